use crate::error::{Error, Result};

use super::InteractionCorpus;

/// One held-out prediction: rank `target` given `context`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    pub user: usize,
    pub context: Vec<u32>,
    pub target: u32,
}

/// Chronological leave-one-out split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    /// Per-user training sequence: everything but the last two items.
    pub train: Vec<Vec<u32>>,
    /// Penultimate item, with the training sequence as context.
    pub valid: Vec<EvalCase>,
    /// Last item, with the training sequence plus the validation item as
    /// context.
    pub test: Vec<EvalCase>,
    pub num_items: usize,
}

pub fn split_leave_one_out(corpus: &InteractionCorpus) -> Result<Splits> {
    let mut train = Vec::with_capacity(corpus.users.len());
    let mut valid = Vec::with_capacity(corpus.users.len());
    let mut test = Vec::with_capacity(corpus.users.len());
    for (u, rec) in corpus.users.iter().enumerate() {
        let n = rec.items.len();
        if n < 3 {
            return Err(Error::Data(format!(
                "user `{}` has {n} interactions; leave-one-out needs at least 3",
                rec.user_id
            )));
        }
        train.push(rec.items[..n - 2].to_vec());
        valid.push(EvalCase {
            user: u,
            context: rec.items[..n - 2].to_vec(),
            target: rec.items[n - 2],
        });
        test.push(EvalCase {
            user: u,
            context: rec.items[..n - 1].to_vec(),
            target: rec.items[n - 1],
        });
    }
    Ok(Splits {
        train,
        valid,
        test,
        num_items: corpus.num_items,
    })
}

/// A training prefix with its next-item target and future targets.
///
/// `t` is the 1-based prefix length. `future_targets` holds whatever of
/// `v_{t+2} ..= v_{t+K}` exists inside the training sequence; the
/// auxiliary losses only use it when the validity flags are set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    pub user: usize,
    pub t: usize,
    pub prefix: Vec<u32>,
    pub next_target: u32,
    pub future_targets: Vec<u32>,
    /// `t + K <= n`: every future target up to step K exists.
    pub fs_valid: bool,
    /// All of `v_{t+1} ..= v_{t+K}` exist; same condition as `fs_valid`.
    pub fc_valid: bool,
}

/// Emits `n - 1` instances for every training sequence of length `n`.
pub fn expand_instances(train: &[Vec<u32>], horizon: usize) -> Vec<TrainingInstance> {
    let horizon = horizon.max(1);
    let mut out = Vec::new();
    for (u, seq) in train.iter().enumerate() {
        let n = seq.len();
        for t in 1..n {
            let valid = t + horizon <= n;
            // 1-based v_{t+2} ..= v_{t+K} is 0-based t+1 ..= t+K-1.
            let end = (t + horizon).min(n);
            let future = if t + 1 < end {
                seq[t + 1..end].to_vec()
            } else {
                Vec::new()
            };
            out.push(TrainingInstance {
                user: u,
                t,
                prefix: seq[..t].to_vec(),
                next_target: seq[t],
                future_targets: future,
                fs_valid: valid,
                fc_valid: valid,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RawSequence, UserRecord};

    fn corpus(users: &[&[u32]]) -> InteractionCorpus {
        InteractionCorpus {
            users: users
                .iter()
                .enumerate()
                .map(|(i, items)| UserRecord {
                    user_id: format!("u{i}"),
                    items: items.to_vec(),
                })
                .collect(),
            num_items: 10,
            item_tokens: (1..=10).map(|i| i.to_string()).collect(),
        }
    }

    #[test]
    fn five_item_user() {
        let s = split_leave_one_out(&corpus(&[&[1, 2, 3, 4, 5]])).unwrap();
        assert_eq!(s.train[0], vec![1, 2, 3]);
        assert_eq!(s.valid[0].context, vec![1, 2, 3]);
        assert_eq!(s.valid[0].target, 4);
        assert_eq!(s.test[0].context, vec![1, 2, 3, 4]);
        assert_eq!(s.test[0].target, 5);
    }

    #[test]
    fn one_case_per_user() {
        let s = split_leave_one_out(&corpus(&[&[1, 2, 3, 4, 5], &[5, 4, 3, 2, 1, 6]])).unwrap();
        assert_eq!(s.valid.len(), 2);
        assert_eq!(s.test.len(), 2);
    }

    #[test]
    fn too_short_user_is_a_data_error() {
        assert!(matches!(split_leave_one_out(&corpus(&[&[1, 2]])), Err(Error::Data(_))));
    }

    #[test]
    fn horizon_two_on_length_five() {
        let inst = expand_instances(&[vec![1, 2, 3, 4, 5]], 2);
        assert_eq!(inst.len(), 4);
        let valid: Vec<bool> = inst.iter().map(|i| i.fs_valid).collect();
        assert_eq!(valid, vec![true, true, true, false]);
        assert_eq!(inst[0].prefix, vec![1]);
        assert_eq!(inst[0].next_target, 2);
        assert_eq!(inst[0].future_targets, vec![3]);
        assert!(inst[3].future_targets.is_empty());
    }

    #[test]
    fn horizon_one_is_always_valid() {
        let inst = expand_instances(&[vec![1, 2, 3, 4]], 1);
        assert!(inst
            .iter()
            .all(|i| i.fs_valid && i.fc_valid && i.future_targets.is_empty()));
    }

    #[test]
    fn validity_arithmetic_exhaustive() {
        for n in 2..=12usize {
            let seq: Vec<u32> = (1..=n as u32).collect();
            for k in 1..=5usize {
                for inst in expand_instances(std::slice::from_ref(&seq), k) {
                    assert_eq!(inst.fs_valid, inst.t + k <= n, "n={n} k={k} t={}", inst.t);
                    assert_eq!(inst.fc_valid, inst.fs_valid);
                    if inst.fs_valid {
                        assert_eq!(inst.future_targets.len(), k - 1);
                        let expect: Vec<u32> = (inst.t as u32 + 2..=(inst.t + k) as u32).collect();
                        assert_eq!(inst.future_targets, expect);
                    }
                }
            }
        }
    }

    #[test]
    fn instance_count_matches_direct_count() {
        let c = InteractionCorpus::from_sequences(
            (0..7)
                .map(|u| RawSequence {
                    user: u.to_string(),
                    items: (0..(5 + u * 3 % 7)).map(|i| ((i * 7 + u) % 11).to_string()).collect(),
                })
                .collect(),
        )
        .unwrap();
        let s = split_leave_one_out(&c).unwrap();
        let expected: usize = s.train.iter().map(|t| t.len().saturating_sub(1)).sum();
        assert_eq!(expand_instances(&s.train, 3).len(), expected);
    }
}
