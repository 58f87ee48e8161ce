//! Full-catalog ranking and leave-one-out metrics.
//!
//! Every real item is scored; nothing is sampled and previously seen items
//! are not filtered. Equal scores rank the lower item id first.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::backbone::{predict, Backbone, ITEM_EMB};
use crate::data::{Batch, EvalCase, PAD};
use crate::error::Result;
use crate::tensor::{Tape, TensorError};

pub const CUTOFFS: [usize; 2] = [10, 20];

/// Histories scored per tape.
pub const EVAL_CHUNK: usize = 256;

pub fn hit_rate(rank: usize, m: usize) -> f64 {
    if rank <= m {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at(rank: usize, m: usize) -> f64 {
    if rank <= m {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// 1-based rank of `target` among items `1..scores.len()`.
pub fn rank_of(scores: &[f64], target: u32) -> usize {
    let t = target as usize;
    let st = scores[t];
    1 + scores
        .iter()
        .enumerate()
        .skip(1)
        .filter(|&(j, &s)| j != t && (s > st || (s == st && j < t)))
        .count()
}

/// Item ids `1..=V` ordered by descending score, ties by ascending id.
pub fn ranking(scores: &[f64]) -> Vec<u32> {
    let mut ids: Vec<u32> = (1..scores.len() as u32).collect();
    ids.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
    ids
}

/// Next-item scores `h · Mᵀ` for each history, `(V+1)` per row.
pub fn score_histories(model: &Backbone, histories: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
    if histories.iter().any(|h| h.is_empty()) {
        return Err(TensorError::Contract("history must be non-empty".into()).into());
    }
    let mut out = Vec::with_capacity(histories.len());
    let cols = model.config.num_items + 1;
    for chunk in histories.chunks(EVAL_CHUNK) {
        let batch = Batch::from_contexts(chunk, model.config.max_len);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let mut rng = NoRng;
        let enc = model.forward(&mut tape, &vars, &batch, false, &mut rng)?;
        let logits = predict(&mut tape, vars.var(ITEM_EMB), enc.h)?;
        out.extend(tape.value(logits).chunks(cols).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Top `n` items for one history. Only backbone parameters are involved.
pub fn infer_topn(model: &Backbone, history: &[u32], n: usize) -> Result<Vec<u32>> {
    let scores = score_histories(model, &[history])?;
    let mut r = ranking(&scores[0]);
    r.truncate(n);
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub num_evaluated: usize,
    /// Target rank per case, in case order.
    pub ranks: Vec<usize>,
}

impl EvalReport {
    pub fn from_ranks(ranks: Vec<usize>) -> Self {
        let n = ranks.len().max(1) as f64;
        let mut hr = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for m in CUTOFFS {
            hr.insert(m, ranks.iter().map(|&r| hit_rate(r, m)).sum::<f64>() / n);
            ndcg.insert(m, ranks.iter().map(|&r| ndcg_at(r, m)).sum::<f64>() / n);
        }
        EvalReport {
            hr,
            ndcg,
            num_evaluated: ranks.len(),
            ranks,
        }
    }

    pub fn hr_at(&self, m: usize) -> f64 {
        self.hr[&m]
    }

    pub fn ndcg_at(&self, m: usize) -> f64 {
        self.ndcg[&m]
    }

    /// Metric bounds and orderings that any report must satisfy.
    pub fn check_invariants(&self) -> bool {
        let tol = 1e-12;
        let bounded = self
            .hr
            .values()
            .chain(self.ndcg.values())
            .all(|v| (0.0..=1.0).contains(v));
        bounded
            && self.hr_at(20) + tol >= self.hr_at(10)
            && self.ndcg_at(20) + tol >= self.ndcg_at(10)
            && CUTOFFS.iter().all(|&m| self.hr_at(m) + tol >= self.ndcg_at(m))
    }

    pub fn table(&self, title: &str) -> String {
        let mut s = format!("{title} ({} users)\n", self.num_evaluated);
        let _ = writeln!(s, "{:<8}{:>10}{:>10}", "m", "HR", "NDCG");
        for m in CUTOFFS {
            let _ = writeln!(s, "{:<8}{:>10.4}{:>10.4}", m, self.hr_at(m), self.ndcg_at(m));
        }
        s
    }

    /// Tab-separated `metric m value split seed` lines.
    pub fn machine_lines(&self, split: &str, seed: u64) -> String {
        let mut s = String::new();
        for m in CUTOFFS {
            let _ = writeln!(s, "HR\t{m}\t{:.6}\t{split}\t{seed}", self.hr_at(m));
            let _ = writeln!(s, "NDCG\t{m}\t{:.6}\t{split}\t{seed}", self.ndcg_at(m));
        }
        s
    }
}

/// Ranks every case's target over the full catalog.
pub fn evaluate(model: &Backbone, cases: &[EvalCase]) -> Result<EvalReport> {
    let mut ranks = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(EVAL_CHUNK) {
        let histories: Vec<&[u32]> = chunk.iter().map(|c| c.context.as_slice()).collect();
        let scores = score_histories(model, &histories)?;
        for (case, row) in chunk.iter().zip(&scores) {
            if case.target == PAD || case.target as usize >= row.len() {
                return Err(TensorError::Contract(format!("evaluation target {} out of range", case.target)).into());
            }
            ranks.push(rank_of(row, case.target));
        }
    }
    Ok(EvalReport::from_ranks(ranks))
}

/// Inference never draws random numbers; this makes that explicit.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("inference is deterministic")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("inference is deterministic")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("inference is deterministic")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn metric_examples() {
        assert_eq!(hit_rate(1, 10), 1.0);
        assert_eq!(hit_rate(11, 10), 0.0);
        assert_eq!(hit_rate(10, 10), 1.0);
        assert_eq!(ndcg_at(1, 10), 1.0);
        assert_eq!(ndcg_at(3, 10), 0.5);
        assert_eq!(ndcg_at(11, 10), 0.0);
    }

    #[test]
    fn ranking_and_ties() {
        let scores = [9.0, 2.0, 5.0, 1.0];
        assert_eq!(ranking(&scores), vec![2, 1, 3]);
        assert_eq!(rank_of(&scores, 2), 1);
        assert_eq!(rank_of(&scores, 3), 3);
        let tied = [0.0, 1.0, 3.0, 3.0, 3.0];
        assert_eq!(ranking(&tied), vec![2, 3, 4, 1]);
        assert_eq!(rank_of(&tied, 2), 1);
        assert_eq!(rank_of(&tied, 4), 3);
    }

    #[test]
    fn pad_score_never_counts() {
        let scores = [100.0, 1.0, 2.0];
        assert_eq!(rank_of(&scores, 2), 1);
        assert!(!ranking(&scores).contains(&0));
    }

    #[test]
    fn perfect_model_scores_one() {
        let r = EvalReport::from_ranks(vec![1; 10]);
        assert_eq!(r.hr_at(10), 1.0);
        assert_eq!(r.ndcg_at(10), 1.0);
        assert!(r.check_invariants());
    }

    #[test]
    fn random_scores_hit_ten_over_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = 200usize;
        let users = 4000;
        let ranks: Vec<usize> = (0..users)
            .map(|_| {
                let scores: Vec<f64> = (0..=v).map(|_| rng.random()).collect();
                rank_of(&scores, rng.random_range(1..=v as u32))
            })
            .collect();
        let r = EvalReport::from_ranks(ranks);
        let p = 10.0 / v as f64;
        let sigma = (p * (1.0 - p) / users as f64).sqrt();
        assert!((r.hr_at(10) - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn model_ranks_match_sorting_oracle() {
        let cfg = BackboneConfig {
            num_items: 60,
            dim: 8,
            layers: 1,
            heads: 2,
            max_len: 10,
            dropout: 0.0,
        };
        let model = Backbone::init(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases: Vec<EvalCase> = (0..30)
            .map(|u| EvalCase {
                user: u,
                context: (0..rng.random_range(1..15)).map(|_| rng.random_range(1..=60)).collect(),
                target: rng.random_range(1..=60),
            })
            .collect();
        let report = evaluate(&model, &cases).unwrap();
        let histories: Vec<&[u32]> = cases.iter().map(|c| c.context.as_slice()).collect();
        let scores = score_histories(&model, &histories).unwrap();
        for ((case, row), &rank) in cases.iter().zip(&scores).zip(&report.ranks) {
            let order = ranking(row);
            assert_eq!(order.iter().position(|&i| i == case.target).unwrap() + 1, rank);
        }
        assert!(report.check_invariants());
        let top = infer_topn(&model, &cases[0].context, 5).unwrap();
        assert_eq!(top, ranking(&scores[0])[..5]);
        assert!(infer_topn(&model, &[], 5).is_err());
    }

    #[test]
    fn output_formats() {
        let r = EvalReport::from_ranks(vec![1, 3, 30]);
        let lines = r.machine_lines("test", 7);
        assert_eq!(lines.lines().count(), 4);
        assert!(lines.starts_with("HR\t10\t0.666667\ttest\t7"));
        assert!(r.table("test").contains("NDCG"));
    }
}
