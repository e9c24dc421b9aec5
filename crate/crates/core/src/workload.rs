//! YCSB-style operation streams: a load phase creating every key, then a
//! seeded run phase with Zipfian key popularity and a fixed read/write mix.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Value sizes swept by the experiments.
pub const VALUE_SIZES: [usize; 5] = [16, 64, 256, 1024, 4096];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("unknown workload mix {0:?} (expected ycsb_a, ycsb_b, ycsb_c or update_only)")]
    UnknownMix(String),
    #[error("invalid workload: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mix {
    YcsbA,
    YcsbB,
    YcsbC,
    UpdateOnly,
}

impl Mix {
    pub const ALL: [Mix; 4] = [Mix::YcsbA, Mix::YcsbB, Mix::YcsbC, Mix::UpdateOnly];

    pub fn read_fraction(self) -> f64 {
        match self {
            Mix::YcsbA => 0.5,
            Mix::YcsbB => 0.95,
            Mix::YcsbC => 1.0,
            Mix::UpdateOnly => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mix::YcsbA => "ycsb_a",
            Mix::YcsbB => "ycsb_b",
            Mix::YcsbC => "ycsb_c",
            Mix::UpdateOnly => "update_only",
        }
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mix {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mix::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| WorkloadError::UnknownMix(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub mix: Mix,
    pub key_count: u64,
    pub key_size: usize,
    pub value_size: usize,
    pub op_count: u64,
    pub zipf_theta: f64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            mix: Mix::YcsbA,
            key_count: 10_000,
            key_size: 8,
            value_size: 64,
            op_count: 10_000,
            zipf_theta: 0.99,
            seed: 1,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let fail = |m: String| Err(WorkloadError::Invalid(m));
        if self.key_count == 0 {
            return fail("key_count must be positive".into());
        }
        let digits = (self.key_count - 1).to_string().len();
        if self.key_size < digits + 1 {
            return fail(format!(
                "key_size {} cannot name {} keys (needs {} bytes)",
                self.key_size,
                self.key_count,
                digits + 1
            ));
        }
        if !(self.zipf_theta > 0.0 && self.zipf_theta < 1.0) {
            return fail(format!("zipf_theta {} outside (0, 1)", self.zipf_theta));
        }
        Ok(())
    }
}

/// Zipfian ranks over `0..n` by the YCSB inverse method: rank 0 is the most
/// popular and `p(r) ∝ 1 / (r + 1)^theta`.
#[derive(Clone, Debug)]
pub struct Zipfian {
    n: u64,
    theta: f64,
    zeta_n: f64,
    alpha: f64,
    eta: f64,
}

impl Zipfian {
    pub fn new(n: u64, theta: f64) -> Self {
        let zeta = |n: u64| (1..=n).map(|i| (i as f64).powf(-theta)).sum::<f64>();
        let zeta_n = zeta(n);
        let zeta_2 = zeta(2.min(n));
        let eta = if n > 2 {
            (1.0 - (2.0 / n as f64).powf(1.0 - theta)) / (1.0 - zeta_2 / zeta_n)
        } else {
            0.0
        };
        Zipfian {
            n,
            theta,
            zeta_n,
            alpha: 1.0 / (1.0 - theta),
            eta,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        let u: f64 = rng.gen();
        let uz = u * self.zeta_n;
        if uz < 1.0 {
            return 0;
        }
        if uz < 1.0 + 0.5f64.powf(self.theta) {
            return 1.min(self.n - 1);
        }
        let r = (self.n as f64 * (self.eta * u - self.eta + 1.0).powf(self.alpha)) as u64;
        r.min(self.n - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpType {
    Read,
    /// A put. In the load phase every put creates its key.
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Op {
    pub kind: OpType,
    pub key: u64,
    /// Seed of the value bytes; only meaningful for writes.
    pub value_seed: u64,
}

/// A generator for one spec. Streams are pure functions of the spec.
#[derive(Clone, Debug)]
pub struct Workload {
    spec: WorkloadSpec,
    zipf: Zipfian,
}

impl Workload {
    pub fn new(spec: WorkloadSpec) -> Result<Self, WorkloadError> {
        spec.validate()?;
        let zipf = Zipfian::new(spec.key_count, spec.zipf_theta);
        Ok(Workload { spec, zipf })
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    /// Fixed-width decimal key name, e.g. `k0000042` for an 8-byte key.
    pub fn key(&self, id: u64) -> Vec<u8> {
        format!("k{:0width$}", id, width = self.spec.key_size - 1).into_bytes()
    }

    pub fn value(&self, seed: u64) -> Vec<u8> {
        let mut v = vec![0; self.spec.value_size];
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
        v
    }

    /// One create per key, in key order.
    pub fn load_phase(&self) -> impl Iterator<Item = Op> + '_ {
        let base = self.spec.seed.rotate_left(32) ^ 0x4C4F_4144;
        (0..self.spec.key_count).map(move |key| Op {
            kind: OpType::Write,
            key,
            value_seed: base.wrapping_add(key),
        })
    }

    pub fn run_phase(&self) -> impl Iterator<Item = Op> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        let read = self.spec.mix.read_fraction();
        (0..self.spec.op_count).map(move |_| {
            let key = self.zipf.sample(&mut rng);
            let is_read = rng.gen_bool(read);
            let value_seed = rng.next_u64();
            Op {
                kind: if is_read { OpType::Read } else { OpType::Write },
                key,
                value_seed,
            }
        })
    }
}

/// Deal a stream round-robin across `clients`.
pub fn partition(ops: impl IntoIterator<Item = Op>, clients: usize) -> Vec<Vec<Op>> {
    let mut out = vec![Vec::new(); clients.max(1)];
    let n = out.len();
    for (i, op) in ops.into_iter().enumerate() {
        out[i % n].push(op);
    }
    out
}
