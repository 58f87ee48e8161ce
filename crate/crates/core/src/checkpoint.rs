//! Plain-text checkpoint format.
//!
//! ```text
//! ufrec-checkpoint 1
//! config num_items 50
//! config dim 64
//! config layers 2
//! config heads 2
//! config max_len 50
//! config dropout 0.2
//! param item_emb 51 64
//! <one line of space-separated values per row>
//! param ...
//! end
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a save/load
//! cycle reproduces every parameter bit for bit. Parameters that are not
//! part of the backbone come back as auxiliary parameters; a file without
//! them is a valid inference checkpoint.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::Model;

pub const MAGIC: &str = "ufrec-checkpoint";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, backbone: &Backbone, aux: Option<&ParamStore>) -> std::io::Result<()> {
    let c = &backbone.config;
    writeln!(w, "{MAGIC} {VERSION}")?;
    writeln!(w, "config num_items {}", c.num_items)?;
    writeln!(w, "config dim {}", c.dim)?;
    writeln!(w, "config layers {}", c.layers)?;
    writeln!(w, "config heads {}", c.heads)?;
    writeln!(w, "config max_len {}", c.max_len)?;
    writeln!(w, "config dropout {:?}", c.dropout)?;
    let all = backbone.params.iter().chain(aux.into_iter().flat_map(|a| a.iter()));
    for (name, t) in all {
        let shape: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        writeln!(w, "param {name} {}", shape.join(" "))?;
        let cols = t.shape().last().copied().unwrap_or(1).max(1);
        for row in t.data().chunks(cols) {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", vals.join(" "))?;
        }
    }
    writeln!(w, "end")?;
    w.flush()
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    save(path, &model.backbone, Some(&model.aux))
}

pub fn save(path: &Path, backbone: &Backbone, aux: Option<&ParamStore>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), backbone, aux).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbone: Backbone,
    pub aux: ParamStore,
}

impl Checkpoint {
    pub fn into_model(self) -> Model {
        Model {
            backbone: self.backbone,
            aux: self.aux,
        }
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f), &path.display().to_string())
}

pub fn read_checkpoint<R: BufRead>(reader: R, source: &str) -> Result<Checkpoint> {
    let mut lines = reader.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(Error::Checkpoint(format!("{source}:{}: {e}", i + 1))),
            None => Err(Error::Checkpoint(format!(
                "{source}: unexpected end of file, expected {what}"
            ))),
        }
    };
    let bad = |line: usize, msg: String| Error::Checkpoint(format!("{source}:{line}: {msg}"));

    let (ln, header) = next("header")?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(bad(ln, "not a checkpoint file".into()));
    }
    match parts.next().and_then(|v| v.parse::<u32>().ok()) {
        Some(VERSION) => {}
        other => return Err(bad(ln, format!("unsupported version {other:?}"))),
    }

    let mut cfg = BackboneConfig::new(0);
    let mut store = ParamStore::new();
    let mut pending: Option<(usize, String)> = None;
    loop {
        let (ln, line) = match pending.take() {
            Some(p) => p,
            None => next("`end`")?,
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end"] => break,
            ["config", key, value] => {
                let int = || value.parse::<usize>().map_err(|e| bad(ln, format!("{key}: {e}")));
                match *key {
                    "num_items" => cfg.num_items = int()?,
                    "dim" => cfg.dim = int()?,
                    "layers" => cfg.layers = int()?,
                    "heads" => cfg.heads = int()?,
                    "max_len" => cfg.max_len = int()?,
                    "dropout" => cfg.dropout = value.parse().map_err(|e| bad(ln, format!("dropout: {e}")))?,
                    other => return Err(bad(ln, format!("unknown config key `{other}`"))),
                }
            }
            ["param", name, dims @ ..] => {
                let shape: Vec<usize> = dims
                    .iter()
                    .map(|d| {
                        d.parse::<usize>()
                            .map_err(|e| bad(ln, format!("shape of `{name}`: {e}")))
                    })
                    .collect::<Result<_>>()?;
                let numel: usize = shape.iter().product();
                let mut data = Vec::with_capacity(numel);
                while data.len() < numel {
                    let (vl, row) = next("parameter values")?;
                    for tok in row.split_whitespace() {
                        data.push(tok.parse::<f64>().map_err(|e| bad(vl, format!("`{name}`: {e}")))?);
                    }
                }
                if data.len() != numel {
                    return Err(bad(
                        ln,
                        format!("`{name}` has {} values, shape needs {numel}", data.len()),
                    ));
                }
                let t = Tensor::new(shape, data).map_err(|e| bad(ln, e.to_string()))?;
                store.insert(name.to_string(), t);
            }
            [] => {}
            _ => return Err(bad(ln, format!("unexpected line `{line}`"))),
        }
    }

    let expected: Vec<String> = Backbone::expected_shapes(&cfg).into_iter().map(|(n, _)| n).collect();
    let mut aux = ParamStore::new();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        if !expected.contains(&name) {
            let t = store.take(&name).expect("name came from the store");
            aux.insert(name, t);
        }
    }
    let backbone = Backbone::from_params(cfg, store)?;
    Ok(Checkpoint { backbone, aux })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let cfg = BackboneConfig {
            num_items: 12,
            dim: 4,
            layers: 1,
            heads: 2,
            max_len: 5,
            dropout: 0.1,
        };
        Model::init(cfg, 3, 9).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut m = model();
        m.backbone.params.get_mut("item_emb").unwrap().data_mut()[5] = 1.0 / 3.0;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m.backbone, Some(&m.aux)).unwrap();
        let back = read_checkpoint(buf.as_slice(), "mem").unwrap().into_model();
        assert_eq!(back, m);
    }

    #[test]
    fn backbone_only_file_loads() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m.backbone, None).unwrap();
        let back = read_checkpoint(buf.as_slice(), "mem").unwrap();
        assert_eq!(back.backbone, m.backbone);
        assert!(back.aux.is_empty());
    }

    #[test]
    fn shape_mismatch_is_a_checkpoint_error() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m.backbone, None).unwrap();
        let text = String::from_utf8(buf)
            .unwrap()
            .replace("config dim 4", "config dim 6")
            .replace("config heads 2", "config heads 3");
        assert!(matches!(
            read_checkpoint(text.as_bytes(), "mem"),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m.backbone, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = &text[..text.len() / 2];
        assert!(read_checkpoint(cut.as_bytes(), "mem").is_err());
        assert!(read_checkpoint("garbage".as_bytes(), "mem").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("best.ckpt");
        let m = model();
        save_model(&p, &m).unwrap();
        assert_eq!(load(&p).unwrap().into_model(), m);
    }
}
