//! Variant comparison under identical data, budgets and seeds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::taskdata::{Dataset, Subtask};

use super::eval::{evaluate, MetricsReport};
use super::train::{train, NoObserver};
use super::{ModelConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    /// Fusion layer replaced by text rows plus one mean-pooled object row.
    #[serde(rename = "no_fusion")]
    NoFusion,
    #[serde(rename = "no_memory")]
    NoMemory,
    /// One co-attention block instead of the configured stack.
    #[serde(rename = "N=1")]
    SingleBlock,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoFusion, Variant::NoMemory, Variant::SingleBlock];

    pub fn apply(self, config: &ModelConfig) -> ModelConfig {
        let mut c = config.clone();
        match self {
            Variant::Full => {}
            Variant::NoFusion => c.fusion = false,
            Variant::NoMemory => c.memory = false,
            Variant::SingleBlock => c.blocks = 1,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoFusion => "no_fusion",
            Variant::NoMemory => "no_memory",
            Variant::SingleBlock => "N=1",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "full" => Ok(Variant::Full),
            "no_fusion" => Ok(Variant::NoFusion),
            "no_memory" => Ok(Variant::NoMemory),
            "n=1" | "n1" | "single_block" => Ok(Variant::SingleBlock),
            _ => Err(Error::Input(format!("unknown variant {s:?} (expected full, no_fusion, no_memory or N=1)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: MetricsReport,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn get(&self, variant: Variant, subtask: Subtask) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.metrics.subtask == subtask)
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:<8} {:>9} {:>7} {:>10}", "variant", "subtask", "accuracy", "mAP", "train loss")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:<8} {:>9.4} {:>7.4} {:>10.4}",
                r.variant.to_string(),
                r.metrics.subtask.to_string(),
                r.metrics.accuracy,
                r.metrics.map,
                r.final_train_loss
            )?;
        }
        Ok(())
    }
}

/// Trains and evaluates every variant on every subtask. Duplicate variants
/// or subtasks are dropped so each appears once in the report.
pub fn ablate<T: Scalar>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    variants: &[Variant],
    subtasks: &[Subtask],
    train_data: &Dataset,
    test_data: &Dataset,
) -> Result<AblationReport> {
    if variants.is_empty() || subtasks.is_empty() {
        return Err(Error::Input("ablation needs at least one variant and one subtask".into()));
    }
    let mut rows = Vec::new();
    let mut seen_variants = Vec::new();
    for &v in variants {
        if seen_variants.contains(&v) {
            continue;
        }
        seen_variants.push(v);
        let mut seen_subtasks = Vec::new();
        for &s in subtasks {
            if seen_subtasks.contains(&s) {
                continue;
            }
            seen_subtasks.push(s);
            let mut config = v.apply(model_config);
            config.subtask = s;
            log::info!("ablation: training {v} on {s}");
            let outcome = train::<T>(&config, train_config, train_data, None, None, &mut NoObserver)?;
            let (metrics, _) = evaluate(&outcome.model, test_data, s)?;
            let final_train_loss = outcome.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
            rows.push(AblationRow { variant: v, metrics, final_train_loss });
        }
    }
    Ok(AblationReport { rows })
}
