//! `key = value` configuration files. Blank lines and lines starting with
//! `#` are ignored; list-valued keys take comma-separated values. The same
//! keys are accepted as `--set key=value` overrides on the command line.

use std::path::Path;

use crate::baselines::BaselineConfig;
use crate::codec::{object_len, Scheme};
use crate::erda::ErdaConfig;
use crate::fabric::CostModel;
use crate::workload::{Mix, WorkloadSpec};

use super::HarnessError;

/// Every accepted key with a one-line description, for `--help` output and
/// the README.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("schemes", "comma list of erda, redo, raw"),
    ("mixes", "comma list of ycsb_a, ycsb_b, ycsb_c, update_only"),
    ("value_sizes", "comma list of value sizes in bytes"),
    ("clients", "comma list of client counts"),
    ("key_count", "keys created by the load phase"),
    ("key_size", "bytes per key"),
    ("op_count", "operations in the run phase"),
    ("zipf_theta", "Zipfian skew in (0, 1)"),
    ("seed", "seed for the workload and the fabric"),
    (
        "auto_size",
        "derive log, table and pool sizes from the workload (true/false)",
    ),
    ("erda.heads", "log heads"),
    ("erda.region_size", "bytes per pool region"),
    ("erda.segment_size", "bytes per segment"),
    ("erda.pool_regions", "regions in the pool"),
    ("erda.max_chain", "regions one head may link"),
    ("erda.table_slots", "index slots (power of two)"),
    ("erda.max_object_size", "largest encoded object"),
    (
        "erda.clean_threshold",
        "chain fill fraction that starts cleaning",
    ),
    (
        "erda.auto_clean",
        "start cleaning automatically (true/false)",
    ),
    (
        "erda.clean_batch",
        "records the cleaner handles per CPU slice",
    ),
    ("baseline.table_slots", "index slots (power of two)"),
    ("baseline.log_size", "redo log bytes"),
    ("baseline.ring_slots", "RAW ring slots"),
    ("baseline.max_object_size", "largest encoded object"),
    ("baseline.dest_size", "bytes for destination slots"),
    ("cost.rtt_ns", "network round trip"),
    ("cost.per_byte_ns", "wire time per payload byte"),
    (
        "cost.server_cpu_op_ns",
        "server CPU time per handled request",
    ),
    (
        "cost.nvm_write_extra_ns",
        "extra CPU time per synchronous NVM write",
    ),
    ("cost.nic_drain_ns", "delay from NIC cache to NVM"),
    ("cost.jitter_ns", "upper bound of random per-leg delay"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct HarnessConfig {
    pub schemes: Vec<Scheme>,
    pub mixes: Vec<Mix>,
    pub value_sizes: Vec<usize>,
    pub clients: Vec<usize>,
    /// Mix, value size and seed are overwritten per run from the lists above.
    pub workload: WorkloadSpec,
    pub auto_size: bool,
    pub erda: ErdaConfig,
    pub baseline: BaselineConfig,
    pub cost: CostModel,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            schemes: Scheme::ALL.to_vec(),
            mixes: vec![Mix::YcsbA],
            value_sizes: vec![64],
            clients: vec![1],
            workload: WorkloadSpec::default(),
            auto_size: true,
            erda: ErdaConfig {
                auto_clean: false,
                ..ErdaConfig::default()
            },
            baseline: BaselineConfig::default(),
            cost: CostModel::default(),
        }
    }
}

fn list<T>(value: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

impl HarnessConfig {
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = HarnessConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), HarnessError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(HarnessError::ConfigLine {
                    line: i + 1,
                    msg: format!("expected key = value, got {line:?}"),
                });
            };
            self.set(k.trim(), v.trim())
                .map_err(|e| HarnessError::ConfigLine {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
        }
        Ok(())
    }

    /// Apply one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), HarnessError> {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(HarnessError::Setting {
                key: pair.into(),
                value: String::new(),
                msg: "expected key=value".into(),
            });
        };
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let res: Result<(), String> = (|| {
            let w = &mut self.workload;
            let e = &mut self.erda;
            let b = &mut self.baseline;
            let c = &mut self.cost;
            match key {
                "schemes" => self.schemes = list(value, |s| s.parse())?,
                "mixes" => self.mixes = list(value, |s| s.parse().map_err(|e| format!("{e}")))?,
                "value_sizes" => self.value_sizes = list(value, num)?,
                "clients" => self.clients = list(value, num)?,
                "key_count" => w.key_count = num(value)?,
                "key_size" => w.key_size = num(value)?,
                "op_count" => w.op_count = num(value)?,
                "zipf_theta" => w.zipf_theta = num(value)?,
                "seed" => w.seed = num(value)?,
                "auto_size" => self.auto_size = num(value)?,
                "erda.heads" => e.heads = num(value)?,
                "erda.region_size" => e.region_size = num(value)?,
                "erda.segment_size" => e.segment_size = num(value)?,
                "erda.pool_regions" => e.pool_regions = num(value)?,
                "erda.max_chain" => e.max_chain = num(value)?,
                "erda.table_slots" => e.table_slots = num(value)?,
                "erda.max_object_size" => e.max_object_size = num(value)?,
                "erda.clean_threshold" => e.clean_threshold = num(value)?,
                "erda.auto_clean" => e.auto_clean = num(value)?,
                "erda.clean_batch" => e.clean_batch = num(value)?,
                "baseline.table_slots" => b.table_slots = num(value)?,
                "baseline.log_size" => b.log_size = num(value)?,
                "baseline.ring_slots" => b.ring_slots = num(value)?,
                "baseline.max_object_size" => b.max_object_size = num(value)?,
                "baseline.dest_size" => b.dest_size = num(value)?,
                "cost.rtt_ns" => c.rtt_ns = num(value)?,
                "cost.per_byte_ns" => c.per_byte_ns = num(value)?,
                "cost.server_cpu_op_ns" => c.server_cpu_op_ns = num(value)?,
                "cost.nvm_write_extra_ns" => c.nvm_write_extra_ns = num(value)?,
                "cost.nic_drain_ns" => c.nic_drain_ns = num(value)?,
                "cost.jitter_ns" => c.jitter_ns = num(value)?,
                _ => return Err("unknown key".into()),
            }
            Ok(())
        })();
        res.map_err(|msg| HarnessError::Setting {
            key: key.into(),
            value: value.into(),
            msg,
        })
    }

    /// The configuration for one run, with geometry derived from the workload
    /// when `auto_size` is set.
    pub fn for_run(&self, spec: &WorkloadSpec) -> HarnessConfig {
        let mut cfg = self.clone();
        cfg.workload = spec.clone();
        if cfg.auto_size {
            cfg.size_for(spec);
        }
        cfg
    }

    /// Size the log, pool, table and destination area so a whole run fits
    /// without cleaning.
    fn size_for(&mut self, spec: &WorkloadSpec) {
        let obj = object_len(spec.key_size, spec.value_size) as u64;
        let slots = (spec.key_count * 2).next_power_of_two().max(256);
        let writes = spec.key_count + spec.op_count;

        let e = &mut self.erda;
        e.max_object_size = obj as u32;
        e.segment_size = e.segment_size.max(obj.next_power_of_two());
        e.region_size = e.region_size.max(e.segment_size);
        // Segment tails are wasted when the next object does not fit.
        let per_segment = e.segment_size / obj;
        let per_head = writes.div_ceil(e.heads as u64) * 3 / 2 + 64;
        let segments = per_head.div_ceil(per_segment);
        let regions = segments.div_ceil(e.region_size / e.segment_size) + 1;
        e.max_chain = e.max_chain.max(regions as u32);
        e.pool_regions = e.pool_regions.max(e.heads as u32 * (e.max_chain + 1) + 1);
        e.table_slots = e.table_slots.max(slots);

        let b = &mut self.baseline;
        b.max_object_size = obj as u32;
        b.table_slots = b.table_slots.max(slots);
        b.log_size = b.log_size.max(4 * (obj + 8));
        b.dest_size = b.dest_size.max(spec.key_count * (obj.div_ceil(8) * 8) * 2);
    }
}
