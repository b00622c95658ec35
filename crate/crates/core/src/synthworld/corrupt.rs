use rand::Rng;
use serde::{Deserialize, Serialize};

use super::random_target_token;
use crate::rng::rng;

/// One atomic edit. Positions refer to the sequence as it is when the edit runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Edit {
    Drop { pos: usize },
    Replace { pos: usize, token: u32 },
    Insert { pos: usize, token: u32 },
    /// Exchanges `pos` and `pos + 1`.
    Swap { pos: usize },
}

impl Edit {
    pub fn apply(&self, seq: &mut Vec<u32>) {
        match *self {
            Edit::Drop { pos } => {
                seq.remove(pos);
            }
            Edit::Replace { pos, token } => seq[pos] = token,
            Edit::Insert { pos, token } => seq.insert(pos, token),
            Edit::Swap { pos } => seq.swap(pos, pos + 1),
        }
    }
}

/// `round(0.15 · len)`, halves away from zero.
pub fn fifteen_percent_ops(len: usize) -> usize {
    (len * 15 + 50) / 100
}

pub fn replay(reference: &[u32], trace: &[Edit]) -> Vec<u32> {
    let mut seq = reference.to_vec();
    for e in trace {
        e.apply(&mut seq);
    }
    seq
}

/// Applies `n_ops` edits drawn uniformly from drop/replace/insert/swap.
///
/// Drops and swaps need two tokens, so on a single-token sequence they are
/// redrawn; an empty reference only ever receives inserts. Replacements
/// always change the token.
pub fn corrupt(reference: &[u32], n_ops: usize, seed: u64) -> (Vec<u32>, Vec<Edit>) {
    let mut r = rng(seed);
    let mut seq = reference.to_vec();
    let mut trace = Vec::with_capacity(n_ops);
    for _ in 0..n_ops {
        let len = seq.len();
        let edit = loop {
            match r.random_range(0..4u8) {
                0 if len >= 2 => break Edit::Drop { pos: r.random_range(0..len) },
                1 if len >= 1 => {
                    let pos = r.random_range(0..len);
                    let token = loop {
                        let t = random_target_token(&mut r);
                        if t != seq[pos] {
                            break t;
                        }
                    };
                    break Edit::Replace { pos, token };
                }
                2 => {
                    break Edit::Insert {
                        pos: r.random_range(0..=len),
                        token: random_target_token(&mut r),
                    }
                }
                3 if len >= 2 => break Edit::Swap { pos: r.random_range(0..len - 1) },
                _ => continue,
            }
        };
        edit.apply(&mut seq);
        trace.push(edit);
    }
    (seq, trace)
}
