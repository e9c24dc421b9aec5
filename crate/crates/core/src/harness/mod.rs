//! Experiment driver behind the `erda` binary: workload runs with CSV
//! reports, crash-point enumeration, cleaning stress tests and report merging.

mod cleantest;
mod config;
mod crashtest;
pub mod oracle;
mod report;
mod run;

pub use cleantest::{cleantest, CleanTestReport, CleanTestSpec};
pub use config::{HarnessConfig, CONFIG_KEYS};
pub use crashtest::{crashtest, CrashScenario, CrashTestReport, CrashTestSpec};
pub use report::{comparison_table, merge_csv};
pub use run::{
    audit_trace, mix_order, run, run_matrix, KindStats, RunOptions, RunReport, CSV_HEADER,
};

use thiserror::Error;

use crate::baselines::{self, BaselineClient, BaselineError};
use crate::codec::Scheme;
use crate::erda::{self, ClientOptions, ErdaClient, ErdaError};
use crate::fabric::CostModel;
use crate::nvm::NvmError;
use crate::sim::{ClientCtx, Outcome, Sim};
use crate::workload::WorkloadError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("invalid setting {key}={value}: {msg}")]
    Setting {
        key: String,
        value: String,
        msg: String,
    },
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Erda(#[from] ErdaError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Nvm(#[from] NvmError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed csv: {0}")]
    Csv(String),
}

/// A client of whichever scheme a run uses.
pub enum AnyClient {
    Erda(ErdaClient),
    Baseline(BaselineClient),
}

impl AnyClient {
    pub async fn connect(
        ctx: ClientCtx,
        scheme: Scheme,
        max_object_size: u32,
        opts: ClientOptions,
    ) -> Result<AnyClient, HarnessError> {
        Ok(match scheme {
            Scheme::Erda => AnyClient::Erda(ErdaClient::connect(ctx, opts).await?),
            _ => AnyClient::Baseline(BaselineClient::connect(ctx, scheme, max_object_size).await?),
        })
    }

    pub fn ctx(&self) -> &ClientCtx {
        match self {
            AnyClient::Erda(c) => c.ctx(),
            AnyClient::Baseline(c) => c.ctx(),
        }
    }

    pub async fn get(&mut self, key: &[u8]) -> Outcome {
        match self {
            AnyClient::Erda(c) => c.get(key).await,
            AnyClient::Baseline(c) => c.get(key).await,
        }
    }

    pub async fn put(&mut self, key: &[u8], value: &[u8]) -> Outcome {
        match self {
            AnyClient::Erda(c) => c.put(key, value).await,
            AnyClient::Baseline(c) => c.put(key, value).await,
        }
    }

    pub async fn delete(&mut self, key: &[u8]) -> Outcome {
        match self {
            AnyClient::Erda(c) => c.delete(key).await,
            AnyClient::Baseline(c) => c.delete(key).await,
        }
    }
}

/// A freshly formatted server of `scheme` under the configuration's geometry.
pub fn new_scheme_sim(
    scheme: Scheme,
    cfg: &HarnessConfig,
    cost: CostModel,
    seed: u64,
) -> Result<Sim, HarnessError> {
    Ok(match scheme {
        Scheme::Erda => erda::new_sim(cfg.erda.clone(), cost, seed)?,
        _ => baselines::new_sim(scheme, cfg.baseline.clone(), cost, seed)?,
    })
}

/// Largest encoded object a configuration lets clients write.
pub fn max_object_size(scheme: Scheme, cfg: &HarnessConfig) -> u32 {
    match scheme {
        Scheme::Erda => cfg.erda.max_object_size,
        _ => cfg.baseline.max_object_size,
    }
}
