//! Reference unlearning methods.

mod finetune;
mod sharding;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use finetune::{
    badt_unlearn, neggrad_unlearn, negkl_unlearn, retrain_from_scratch, signed_batch_loss,
    FinetuneConfig,
};
pub use sharding::{
    receraser_plan, shard_seed, sisa_train, sisa_unlearn, train_shard, Shard, ShardEnsemble,
    ShardPlan, ShardStrategy,
};

/// Every registered method, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Retrain,
    Sisa,
    Receraser,
    Negkl,
    Neggrad,
    Badt,
    E2urec,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Retrain,
        Method::Sisa,
        Method::Receraser,
        Method::Negkl,
        Method::Neggrad,
        Method::Badt,
        Method::E2urec,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Method::Retrain => "retrain",
            Method::Sisa => "sisa",
            Method::Receraser => "receraser",
            Method::Negkl => "negkl",
            Method::Neggrad => "neggrad",
            Method::Badt => "badt",
            Method::E2urec => "e2urec",
        }
    }

    /// Display name used in tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Retrain => "Retrain",
            Method::Sisa => "SISA",
            Method::Receraser => "RecEraser",
            Method::Negkl => "NegKL",
            Method::Neggrad => "NegGrad",
            Method::Badt => "Bad-T",
            Method::E2urec => "E2URec",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Method::ALL
            .into_iter()
            .find(|m| m.key() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownMethod {
                key: s.to_string(),
                registered: Method::ALL.map(Method::key).join(", "),
            })
    }
}
