//! Experiment configuration files.
//!
//! A configuration is a TOML document: top-level keys describe the
//! experiment, `[sweep]` holds the declared grids and the `[train]` and
//! `[dynamics]` sections hold the learner settings. Keys missing from a
//! file fall back to the preset for the experiment id.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use allo_core::dynamics::DynamicsConfig;
use allo_core::trainer::{Objective, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

/// Seeds per experiment unless overridden.
pub const DEFAULT_SEED_COUNT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    Equilibria,
    Stability,
    BarrierSweep,
    EnvSuite,
    EigenvalueAccuracy,
    Ablation,
    Permutation,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 7] = [
        ExperimentId::Equilibria,
        ExperimentId::Stability,
        ExperimentId::BarrierSweep,
        ExperimentId::EnvSuite,
        ExperimentId::EigenvalueAccuracy,
        ExperimentId::Ablation,
        ExperimentId::Permutation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::Equilibria => "equilibria",
            ExperimentId::Stability => "stability",
            ExperimentId::BarrierSweep => "barrier-sweep",
            ExperimentId::EnvSuite => "env-suite",
            ExperimentId::EigenvalueAccuracy => "eigenvalue-accuracy",
            ExperimentId::Ablation => "ablation",
            ExperimentId::Permutation => "permutation",
        }
    }

    /// Tabular experiments run the full-gradient dynamics instead of the
    /// neural trainer.
    pub fn is_tabular(self) -> bool {
        matches!(self, ExperimentId::Equilibria | ExperimentId::Stability)
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExperimentId::ALL.into_iter().find(|id| id.name() == s).ok_or_else(|| {
            let names: Vec<&str> = ExperimentId::ALL.iter().map(|id| id.name()).collect();
            HarnessError::Config(format!("unknown experiment `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Declared grids. Each experiment reads only the lists it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    /// Representation sizes for the tabular experiments.
    pub dims: Vec<usize>,
    /// Initial barrier coefficients for the barrier sweep.
    pub b0: Vec<f64>,
    /// Barrier ascent rates for the ablation.
    pub alpha_barrier: Vec<f64>,
    /// Objectives compared by the ablation.
    pub objectives: Vec<Objective>,
    /// Fixed barrier coefficient of the GGDO baseline.
    pub baseline_b: f64,
    /// Standard deviation of the equilibrium perturbation.
    pub noise: f64,
    /// Iterations run after perturbing an equilibrium.
    pub perturb_steps: usize,
}

impl Default for Sweep {
    fn default() -> Self {
        Sweep {
            dims: vec![2, 3],
            b0: vec![0.1, 0.5, 2.0],
            alpha_barrier: vec![0.0, 0.01, 0.1],
            objectives: vec![Objective::Allo, Objective::AlloNoDuals, Objective::Ggdo, Objective::GgdoIncreasingB],
            baseline_b: 2.0,
            noise: 1e-3,
            perturb_steps: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub id: ExperimentId,
    /// Bundled map names or paths to map files.
    pub maps: Vec<String>,
    pub seeds: Vec<u64>,
    /// Transitions sampled per map and seed.
    pub samples: usize,
    pub out: PathBuf,
    pub sweep: Sweep,
    pub train: TrainConfig,
    pub dynamics: DynamicsConfig,
}

impl ExperimentSpec {
    /// Desk-scale defaults for `id`.
    pub fn preset(id: ExperimentId) -> Self {
        let maps: Vec<String> = match id {
            ExperimentId::Equilibria => vec!["corridor-2".into(), "ring-8".into()],
            ExperimentId::Stability => vec!["corridor-5".into(), "ring-8".into()],
            ExperimentId::EnvSuite => vec!["open-room-5".into(), "maze-6".into(), "four-rooms-11".into()],
            _ => vec!["maze-6".into()],
        };
        let mut train = TrainConfig::default();
        let mut dynamics = DynamicsConfig::default();
        match id {
            ExperimentId::Ablation => train.b0 = 0.1,
            ExperimentId::Permutation => {
                train.permute_every = 20_000;
                train.steps = 80_000;
            }
            ExperimentId::Stability => dynamics.max_iters = 20_000,
            _ => {}
        }
        ExperimentSpec {
            id,
            maps,
            seeds: (0..DEFAULT_SEED_COUNT as u64).collect(),
            samples: 200_000,
            out: PathBuf::from("results").join(id.name()),
            sweep: Sweep::default(),
            train,
            dynamics,
        }
    }

    /// Parse a configuration, filling absent keys from the preset named by
    /// its `id` (or `default_id` when the file has none).
    pub fn from_toml_str(text: &str, default_id: Option<ExperimentId>) -> Result<Self, String> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        let id = match doc.get("id") {
            Some(toml::Value::String(s)) => s.parse::<ExperimentId>().map_err(|e| e.to_string())?,
            Some(other) => return Err(format!("`id` must be a string, found {other}")),
            None => default_id.ok_or("missing `id`")?,
        };
        doc.insert("id".into(), toml::Value::String(id.name().into()));
        let preset = toml::Table::try_from(ExperimentSpec::preset(id)).map_err(|e| e.to_string())?;
        let merged = merge(preset, doc);
        let spec: ExperimentSpec = merged.try_into().map_err(|e: toml::de::Error| e.to_string())?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment spec is always representable")
    }

    pub fn load(path: impl AsRef<Path>, default_id: Option<ExperimentId>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|source| HarnessError::ConfigRead { path: path.to_path_buf(), source })?;
        let spec = Self::from_toml_str(&text, default_id)
            .map_err(|message| HarnessError::ConfigParse { path: path.to_path_buf(), message })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: &str| Err(HarnessError::Config(format!("{}: {m}", self.id)));
        if self.seeds.is_empty() {
            return fail("at least one seed is required");
        }
        if self.maps.is_empty() {
            return fail("at least one map is required");
        }
        if self.id.is_tabular() && (self.sweep.dims.is_empty() || self.sweep.dims.contains(&0)) {
            return fail("sweep.dims must list positive dimensions");
        }
        if !self.id.is_tabular() && self.samples == 0 {
            return fail("samples must be positive");
        }
        match self.id {
            ExperimentId::BarrierSweep if self.sweep.b0.is_empty() => fail("sweep.b0 is empty"),
            ExperimentId::Ablation if self.sweep.alpha_barrier.is_empty() || self.sweep.objectives.is_empty() => {
                fail("sweep.alpha_barrier and sweep.objectives must be non-empty")
            }
            ExperimentId::Permutation if self.train.permute_every == 0 => fail("train.permute_every must be positive"),
            _ => Ok(()),
        }
    }
}

/// Recursively overlay `top` onto `base`.
fn merge(mut base: toml::Table, top: toml::Table) -> toml::Table {
    for (key, value) in top {
        match (base.remove(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => {
                base.insert(key, toml::Value::Table(merge(b, t)));
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for id in ExperimentId::ALL {
            let spec = ExperimentSpec::preset(id);
            let text = spec.to_toml_string();
            let back = ExperimentSpec::from_toml_str(&text, None).unwrap();
            assert_eq!(back, spec, "{text}");
            assert_eq!(back.to_toml_string(), text);
            spec.validate().unwrap();
        }
    }

    #[test]
    fn partial_file_overlays_preset() {
        let text = "id = \"ablation\"\nseeds = [3, 4]\n\n[train]\nsteps = 100\n\n[sweep]\nalpha_barrier = [0.1]\n";
        let spec = ExperimentSpec::from_toml_str(text, None).unwrap();
        let preset = ExperimentSpec::preset(ExperimentId::Ablation);
        assert_eq!(spec.seeds, vec![3, 4]);
        assert_eq!(spec.train.steps, 100);
        assert_eq!(spec.train.b0, preset.train.b0);
        assert_eq!(spec.sweep.alpha_barrier, vec![0.1]);
        assert_eq!(spec.sweep.objectives, preset.sweep.objectives);
    }

    #[test]
    fn bad_files_are_rejected() {
        assert!(ExperimentSpec::from_toml_str("id = \"nope\"", None).is_err());
        assert!(ExperimentSpec::from_toml_str("seeds = [1]", None).is_err());
        assert!(ExperimentSpec::from_toml_str("id = \"ablation\"\nbogus = 1", None).is_err());
        assert!(ExperimentSpec::from_toml_str("id = \"ablation\"\n[train]\nsteps = \"many\"", None).is_err());
        let spec = ExperimentSpec::from_toml_str("seeds = []", Some(ExperimentId::Equilibria)).unwrap();
        assert!(matches!(spec.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn ids_parse_from_their_names() {
        for id in ExperimentId::ALL {
            assert_eq!(id.name().parse::<ExperimentId>().unwrap(), id);
        }
        assert!("barrier_sweep".parse::<ExperimentId>().is_err());
    }
}
