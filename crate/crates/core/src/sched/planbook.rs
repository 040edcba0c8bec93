//! Plans precomputed for a ladder of bandwidth buckets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{solve_de, solve_exhaustive, validate_plan, DeConfig, Problem, SchedulePlan};
use crate::cost::{CostProfile, PowerStates};
use crate::error::{Error, Result};
use crate::model::ModelGraph;

pub const PLANBOOK_FORMAT: &str = "hybridpar-planbook";
pub const PLANBOOK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub bandwidth_bps: f64,
    pub plan: SchedulePlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanBook {
    pub format: String,
    pub version: u32,
    /// Checksum of the model the plans were made for.
    pub model: String,
    pub profile: CostProfile,
    pub solver: DeConfig,
    pub buckets: Vec<Bucket>,
}

impl PlanBook {
    pub fn bandwidths(&self) -> Vec<f64> {
        self.buckets.iter().map(|b| b.bandwidth_bps).collect()
    }

    /// Index of the largest bucket at or below the predicted bandwidth, or the
    /// lowest bucket when the prediction is below all of them.
    pub fn select(&self, predicted_bps: f64) -> usize {
        self.buckets
            .iter()
            .rposition(|b| b.bandwidth_bps <= predicted_bps)
            .unwrap_or(0)
    }

    pub fn plan(&self, bucket: usize) -> Option<&SchedulePlan> {
        self.buckets.get(bucket).map(|b| &b.plan)
    }

    /// Canonical serialized form. Identical inputs give identical bytes.
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    pub fn from_text(s: &str) -> Result<PlanBook> {
        let b: PlanBook = serde_json::from_str(s)?;
        if b.format != PLANBOOK_FORMAT || b.version != PLANBOOK_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported plan book {} v{} (expected {} v{})",
                b.format, b.version, PLANBOOK_FORMAT, PLANBOOK_VERSION
            )));
        }
        check_buckets(&b.bandwidths())?;
        Ok(b)
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PlanBook> {
        PlanBook::from_text(&std::fs::read_to_string(path)?)
    }

    /// Confirms the book belongs to `graph` and every plan is structurally valid.
    pub fn verify(&self, graph: &ModelGraph) -> Result<()> {
        let sum = graph.checksum();
        if self.model != sum {
            return Err(Error::Checksum(format!(
                "plan book is for model {}, loaded model is {}",
                self.model, sum
            )));
        }
        let pi = crate::cost::pi_set(graph, &self.profile);
        for b in &self.buckets {
            validate_plan(graph, &pi, &b.plan)?;
        }
        Ok(())
    }
}

fn check_buckets(buckets: &[f64]) -> Result<()> {
    if buckets.is_empty() {
        return Err(Error::Invalid(
            "at least one bandwidth bucket is required".into(),
        ));
    }
    for b in buckets {
        if !(*b > 0.0) || !b.is_finite() {
            return Err(Error::Invalid(format!(
                "bandwidth bucket must be a positive finite rate, got {}",
                b
            )));
        }
    }
    if buckets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid(format!(
            "buckets must be strictly increasing: {:?}",
            buckets
        )));
    }
    Ok(())
}

/// One independent solve per bucket, run in parallel. Each bucket's solver
/// seed is derived from `config.seed` and the bucket index, so the book is
/// identical across runs.
pub fn build_planbook(
    graph: &ModelGraph,
    profile: &CostProfile,
    buckets: &[f64],
    config: &DeConfig,
    exhaustive: bool,
    power: PowerStates,
) -> Result<PlanBook> {
    check_buckets(buckets)?;
    config.validate()?;
    let plans: Vec<Result<SchedulePlan>> = std::thread::scope(|s| {
        let handles: Vec<_> = buckets
            .iter()
            .enumerate()
            .map(|(k, &bw)| {
                s.spawn(move || {
                    let problem = Problem::new(graph, profile, bw)?.with_power(power);
                    if exhaustive {
                        solve_exhaustive(&problem)
                    } else {
                        let cfg = DeConfig {
                            seed: config.seed.wrapping_add(k as u64),
                            ..*config
                        };
                        solve_de(&problem, &cfg)
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("solver thread panicked"))
            .collect()
    });
    let mut plans = plans.into_iter().collect::<Result<Vec<_>>>()?;
    if !exhaustive {
        // A split that wins at one bandwidth is often good at its neighbours too.
        let genomes: Vec<Vec<usize>> = plans.iter().map(|p| p.genome.clone()).collect();
        for (k, &bw) in buckets.iter().enumerate() {
            let problem = Problem::new(graph, profile, bw)?.with_power(power);
            for g in &genomes {
                let cand = problem.plan(g)?;
                if super::better(&cand, &plans[k]) {
                    let flags = plans[k].flags.clone();
                    plans[k] = SchedulePlan { flags, ..cand };
                }
            }
        }
    }
    let buckets = buckets
        .iter()
        .zip(plans)
        .map(|(&bw, plan)| Bucket {
            bandwidth_bps: bw,
            plan,
        })
        .collect();
    Ok(PlanBook {
        format: PLANBOOK_FORMAT.into(),
        version: PLANBOOK_VERSION,
        model: graph.checksum(),
        profile: profile.clone(),
        solver: *config,
        buckets,
    })
}
