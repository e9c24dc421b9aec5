//! Checks a recorded history against a model map.
//!
//! A get may return the value of any write that could be the latest one at
//! some instant inside the get's interval: a write is ruled out only if
//! another write started after it completed and itself completed before the
//! get began. Writes that never completed (crashed or failed clients) stay
//! possible forever. Every key starts absent.

use std::collections::HashMap;

use serde::Serialize;

use crate::sim::{OpKind, OpRecord, Outcome};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Position of the offending get in the history.
    pub op: usize,
    pub key: Vec<u8>,
    pub outcome: Outcome,
    /// Values the get could have returned; `None` is absent.
    pub allowed: Vec<Option<Vec<u8>>>,
}

#[derive(Clone, Debug)]
struct Write {
    start: u64,
    /// `u64::MAX` when the write may still take effect.
    end: u64,
    value: Option<Vec<u8>>,
}

fn writes_by_key(history: &[OpRecord]) -> HashMap<&[u8], Vec<Write>> {
    let mut map: HashMap<&[u8], Vec<Write>> = HashMap::new();
    for r in history {
        let value = match r.kind {
            OpKind::Get => continue,
            OpKind::Put => r.value.clone(),
            OpKind::Delete => None,
        };
        let end = match (&r.outcome, r.end) {
            (Some(Outcome::Done), Some(end)) => end,
            // A delete of an absent key and a rejected put change nothing.
            (Some(Outcome::NotFound), _) => continue,
            _ => u64::MAX,
        };
        map.entry(&r.key[..]).or_insert_with(|| {
            vec![Write {
                start: 0,
                end: 0,
                value: None,
            }]
        });
        map.get_mut(&r.key[..]).unwrap().push(Write {
            start: r.start,
            end,
            value,
        });
    }
    map
}

/// Values a get over `[start, end]` may observe among `writes`.
fn allowed(writes: &[Write], start: u64, end: u64) -> Vec<Option<Vec<u8>>> {
    let latest_start = writes
        .iter()
        .filter(|w| w.end < start)
        .map(|w| w.start)
        .max()
        .unwrap_or(0);
    let mut out: Vec<Option<Vec<u8>>> = Vec::new();
    for w in writes {
        if w.start <= end && w.end >= latest_start && !out.contains(&w.value) {
            out.push(w.value.clone());
        }
    }
    out
}

/// All gets in `history` that returned something no write allows. Gets that
/// report data loss are violations; failed or unfinished gets are skipped.
pub fn check_history(history: &[OpRecord]) -> Vec<Violation> {
    let writes = writes_by_key(history);
    let initial = [Write {
        start: 0,
        end: 0,
        value: None,
    }];
    let mut out = Vec::new();
    for (i, r) in history.iter().enumerate() {
        if r.kind != OpKind::Get {
            continue;
        }
        let (Some(outcome), Some(end)) = (&r.outcome, r.end) else {
            continue;
        };
        let ws = writes.get(&r.key[..]).map_or(&initial[..], |w| &w[..]);
        let options = allowed(ws, r.start, end);
        let ok = match outcome {
            Outcome::Failed(_) => true,
            Outcome::DataLoss | Outcome::Done => false,
            other => {
                let seen = other.observed().unwrap().map(<[u8]>::to_vec);
                options.contains(&seen)
            }
        };
        if !ok {
            out.push(Violation {
                op: i,
                key: r.key.clone(),
                outcome: outcome.clone(),
                allowed: options,
            });
        }
    }
    out
}

/// The state a sequential history leaves behind: each key's last
/// acknowledged value.
pub fn final_state(history: &[OpRecord]) -> HashMap<Vec<u8>, Option<Vec<u8>>> {
    let mut state = HashMap::new();
    for r in history {
        if r.outcome != Some(Outcome::Done) {
            continue;
        }
        match r.kind {
            OpKind::Put => {
                state.insert(r.key.clone(), r.value.clone());
            }
            OpKind::Delete => {
                state.insert(r.key.clone(), None);
            }
            OpKind::Get => {}
        }
    }
    state
}
