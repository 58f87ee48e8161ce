//! Interaction logs, k-core filtering, leave-one-out splits, prefix
//! expansion and batching.
//!
//! The on-disk format is UTF-8 text with one user per line:
//! `user item_1 item_2 ... item_n`, items in chronological order. A user
//! token that appears on several lines has those lines concatenated.

mod batch;
mod split;
mod synth;

pub use batch::{left_pad, make_batches, Batch, BatchIter};
pub use split::{expand_instances, split_leave_one_out, EvalCase, Splits, TrainingInstance};
pub use synth::{inject_noise, synth_markov, MarkovChain};

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Default minimum interaction count for users and items.
pub const DEFAULT_MIN_CORE: usize = 5;

/// Item id reserved for padding; real items are `1..=num_items`.
pub const PAD: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoreMode {
    /// Repeat user and item filtering until nothing changes.
    #[default]
    Fixpoint,
    /// One item pass followed by one user pass.
    SinglePass,
}

/// A raw user sequence before id remapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSequence {
    pub user: String,
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: String,
    pub items: Vec<u32>,
}

impl UserRecord {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Filtered corpus with items remapped to `1..=num_items`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionCorpus {
    pub users: Vec<UserRecord>,
    pub num_items: usize,
    /// Raw token of item `id` at index `id - 1`.
    pub item_tokens: Vec<String>,
}

/// Dataset statistics in the usual `#Users #Items #Actions Avg.Length
/// Density` layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub avg_length: f64,
    pub density: f64,
}

impl std::fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{:.1}\t{:.2}%",
            self.users,
            self.items,
            self.actions,
            self.avg_length,
            self.density * 100.0
        )
    }
}

/// Parses the whitespace-separated log format.
pub fn parse_log<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<RawSequence>> {
    let mut seqs: Vec<RawSequence> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source_name, e))?;
        let mut tokens = line.split_whitespace();
        let Some(user) = tokens.next() else { continue };
        let items: Vec<String> = tokens.map(str::to_owned).collect();
        if items.is_empty() {
            return Err(Error::Parse {
                source_name: source_name.to_owned(),
                line: lineno + 1,
                message: format!("user `{user}` has no items (need at least 2 tokens)"),
            });
        }
        match index.get(user) {
            Some(&i) => seqs[i].items.extend(items),
            None => {
                index.insert(user.to_owned(), seqs.len());
                seqs.push(RawSequence {
                    user: user.to_owned(),
                    items,
                });
            }
        }
    }
    Ok(seqs)
}

/// Drops users and items with fewer than `min_core` interactions.
///
/// Item counts are interaction records, so an item repeated inside one
/// sequence counts once per occurrence.
pub fn kcore_filter(mut seqs: Vec<RawSequence>, min_core: usize, mode: CoreMode) -> Vec<RawSequence> {
    loop {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in &seqs {
            for it in &s.items {
                *counts.entry(it.as_str()).or_default() += 1;
            }
        }
        let rare: std::collections::HashSet<String> = counts
            .into_iter()
            .filter(|&(_, c)| c < min_core)
            .map(|(k, _)| k.to_owned())
            .collect();
        let mut changed = !rare.is_empty();
        if changed {
            for s in &mut seqs {
                s.items.retain(|it| !rare.contains(it));
            }
        }
        let before = seqs.len();
        seqs.retain(|s| s.items.len() >= min_core);
        changed |= seqs.len() != before;
        if !changed || mode == CoreMode::SinglePass {
            return seqs;
        }
    }
}

impl InteractionCorpus {
    /// Remaps surviving items to dense ids in order of first appearance.
    pub fn from_sequences(seqs: Vec<RawSequence>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Data("corpus is empty after filtering".into()));
        }
        let mut ids: HashMap<String, u32> = HashMap::new();
        let mut item_tokens = Vec::new();
        let mut users = Vec::with_capacity(seqs.len());
        for s in seqs {
            let items = s
                .items
                .into_iter()
                .map(|tok| {
                    *ids.entry(tok).or_insert_with_key(|tok| {
                        item_tokens.push(tok.clone());
                        item_tokens.len() as u32
                    })
                })
                .collect();
            users.push(UserRecord { user_id: s.user, items });
        }
        Ok(InteractionCorpus {
            users,
            num_items: item_tokens.len(),
            item_tokens,
        })
    }

    /// Filters then remaps; fails if nothing survives.
    pub fn build(seqs: Vec<RawSequence>, min_core: usize, mode: CoreMode) -> Result<Self> {
        Self::from_sequences(kcore_filter(seqs, min_core, mode))
    }

    pub fn num_actions(&self) -> usize {
        self.users.iter().map(UserRecord::len).sum()
    }

    pub fn stats(&self) -> CorpusStats {
        let users = self.users.len();
        let actions = self.num_actions();
        CorpusStats {
            users,
            items: self.num_items,
            actions,
            avg_length: actions as f64 / users as f64,
            density: actions as f64 / (users as f64 * self.num_items as f64),
        }
    }

    /// Writes the corpus in the input format, items as their dense ids.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for u in &self.users {
            write!(w, "{}", u.user_id)?;
            for it in &u.items {
                write!(w, " {it}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Writes `id<TAB>raw token` lines.
    pub fn write_item_map<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, tok) in self.item_tokens.iter().enumerate() {
            writeln!(w, "{}\t{tok}", i + 1)?;
        }
        Ok(())
    }

    /// Writes `index<TAB>raw user` lines.
    pub fn write_user_map<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, u) in self.users.iter().enumerate() {
            writeln!(w, "{i}\t{}", u.user_id)?;
        }
        Ok(())
    }

    pub fn to_sequences(&self) -> Vec<RawSequence> {
        self.users
            .iter()
            .map(|u| RawSequence {
                user: u.user_id.clone(),
                items: u.items.iter().map(|i| i.to_string()).collect(),
            })
            .collect()
    }
}

/// Reads, filters and remaps an interaction log.
pub fn load_corpus(path: &Path, min_core: usize, mode: CoreMode) -> Result<InteractionCorpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let seqs = parse_log(BufReader::new(file), &path.display().to_string())?;
    InteractionCorpus::build(seqs, min_core, mode)
}
