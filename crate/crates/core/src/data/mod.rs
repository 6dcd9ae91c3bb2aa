//! Synthetic click world, the exhaustive best-permutation oracle, and the
//! JSONL log format.
//!
//! One request per line:
//!
//! ```text
//! {"request_id":12,"user_id":3,
//!  "items":[{"features":[17,4,2],"point_pctr":0.231},...],
//!  "displayed":[0,1,2],"clicks":[0,1,0],
//!  "behaviors":[{"items_features":[[5,1,0],[9,4,2],[33,2,1]],"recency_rank":0},...]}
//! ```
//!
//! `displayed` indexes into `items`; `behaviors` are the user's earlier
//! clicked lists, most recent first. Floats carry at most 9 significant digits.

mod generate;
mod jsonl;
mod world;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use generate::{generate_synthetic_dataset, SyntheticData, WorldConfig};
pub use jsonl::{from_jsonl, load_jsonl, parse_record, to_jsonl, write_jsonl, LogRecord, Schema};
pub use world::{oracle_best_permutation, GroundTruthModel, InteractionTable, MAX_CLICK_PROB, MIN_CLICK_PROB};

use crate::error::{PierError, Result};
use crate::permgen::Permutation;
use crate::training::TrainingExample;

/// The ground-truth file written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub world: WorldConfig,
    pub truth: GroundTruthModel,
}

impl Sidecar {
    pub fn schema(&self) -> Schema {
        Schema {
            vocab_sizes: self.world.vocab_sizes.clone(),
            n_d: self.world.n_d,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("sidecar serializes");
        fs::write(path, text).map_err(|e| PierError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PierError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PierError::Parse {
            line: e.line(),
            field: "sidecar".into(),
            detail: format!("{}: {e}", path.display()),
        })
    }
}

impl SyntheticData {
    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            world: self.config.clone(),
            truth: self.truth.clone(),
        }
    }

    pub fn schema(&self) -> Schema {
        self.sidecar().schema()
    }
}

pub fn to_examples(records: &[LogRecord]) -> Result<Vec<TrainingExample>> {
    records.iter().map(LogRecord::to_example).collect()
}

/// Oracle answer for a logged request.
pub fn best_for_record(record: &LogRecord, n_d: usize, truth: &GroundTruthModel) -> Result<Permutation> {
    oracle_best_permutation(&record.candidate_set()?, n_d, record.user_id, record.request_id, truth)
}
