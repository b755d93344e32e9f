//! Stochastic training of an MLP representation from sampled transitions.
//!
//! Each step draws two independent batches from the dataset, evaluates the
//! network on every state, turns the sampled objective directions into
//! per-state output cotangents and backpropagates them once. Because the
//! state space is small, this yields exactly the same stochastic gradient as
//! backpropagating each sampled transition separately.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{build_transition_model, feature_matrix, FeatureMode, GridWorld, TransitionDataset};
use crate::metrics::{Cell, MetricsLog};
use crate::mlp::{mlp_init, Activation, MlpError, MlpParams, MlpShape};
use crate::objectives::{
    mc_eigenvalue_estimate, sampled_allo_directions, sampled_ggdo_directions, DualVariables, GgdoCoefficients,
    ObjectiveError, SampledDirections, TransitionBatch,
};
use crate::spectral::{similarity_report, EigenSystem};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("transition dataset is empty")]
    EmptyDataset,
    #[error("non-finite values at step {step} (loss = {loss}, b = {b}, max |beta| = {beta_max})")]
    NonFinite { step: usize, loss: f64, b: f64, beta_max: f64 },
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    Allo,
    /// Stop-gradient objective with the barrier, duals frozen at zero.
    AlloNoDuals,
    /// Generalized graph drawing objective with a fixed barrier.
    Ggdo,
    /// Generalized graph drawing objective with barrier ascent.
    GgdoIncreasingB,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Allo => "allo",
            Objective::AlloNoDuals => "allo-no-duals",
            Objective::Ggdo => "ggdo",
            Objective::GgdoIncreasingB => "ggdo-increasing-b",
        }
    }

    pub fn updates_duals(self) -> bool {
        self == Objective::Allo
    }

    pub fn updates_barrier(self) -> bool {
        self != Objective::Ggdo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub d: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,
    pub features: FeatureMode,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub alpha_dual: f64,
    pub alpha_barrier: f64,
    pub b0: f64,
    /// Upper limit for the ascended barrier coefficient. Plain SGD becomes
    /// unstable once `learning_rate · b` is too large.
    pub b_max: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub objective: Objective,
    /// Steps between random relabelings of the outputs; 0 disables them.
    pub permute_every: usize,
    /// Replace sampled batches by every transition weighted by its
    /// probability, which turns the updates into exact expectations.
    pub exhaustive: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 5,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            bias: true,
            features: FeatureMode::Xy,
            batch_size: 1024,
            steps: 50_000,
            learning_rate: 2e-3,
            alpha_dual: 1e-2,
            alpha_barrier: 0.01,
            b0: 2.0,
            b_max: 10.0,
            seed: 0,
            eval_every: 1000,
            objective: Objective::Allo,
            permute_every: 0,
            exhaustive: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_states: usize) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.d == 0 || self.d > num_states {
            return fail(format!("d = {} must be in 1..={num_states}", self.d));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return fail("batch_size and eval_every must be positive".into());
        }
        if self.hidden.contains(&0) {
            return fail("hidden layer widths must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.alpha_dual > 0.0 && self.b0 > 0.0) {
            return fail("learning_rate, alpha_dual and b0 must be positive".into());
        }
        if !(self.alpha_barrier >= 0.0) {
            return fail("alpha_barrier must be non-negative".into());
        }
        if !(self.b_max >= self.b0) {
            return fail(format!("b_max = {} is below b0 = {}", self.b_max, self.b0));
        }
        Ok(())
    }

    pub fn shape(&self, input: usize) -> MlpShape {
        MlpShape { input, hidden: self.hidden.clone(), output: self.d, activation: self.activation, bias: self.bias }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: MlpParams,
    pub duals: DualVariables,
    pub b: f64,
    pub log: MetricsLog,
    pub config: TrainConfig,
    pub wall_clock: Duration,
}

pub fn metrics_header(d: usize) -> Vec<String> {
    let mut h = vec!["step".to_string(), "objective".into(), "avg_cos_sim".into()];
    h.extend((2..=d).map(|i| format!("cos_sim_{i}")));
    h.extend((1..=d).map(|i| format!("beta_{i}")));
    h.extend((1..=d).map(|i| format!("mc_eig_{i}")));
    h.extend(["residual_inf".to_string(), "b".into(), "loss".into()]);
    h
}

/// Mutable training state; exposed so that callers can step the loop by hand.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a TransitionDataset,
    oracle: &'a EigenSystem,
    features: Array2<f64>,
    exhaustive: TransitionBatch,
    eval_batch: TransitionBatch,
    coefficients: GgdoCoefficients,
    rng: ChaCha8Rng,
    step: usize,
    pub params: MlpParams,
    pub duals: DualVariables,
    pub b: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        world: &GridWorld,
        dataset: &'a TransitionDataset,
        config: &TrainConfig,
        oracle: &'a EigenSystem,
    ) -> Result<Self, TrainError> {
        let n = world.num_states();
        config.validate(n)?;
        if dataset.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if oracle.dim() != n {
            return Err(TrainError::Config(format!("oracle has dimension {}, world has {n} states", oracle.dim())));
        }
        if let Some(&(s, sp)) = dataset.pairs.iter().find(|&&(s, sp)| s >= n || sp >= n) {
            return Err(TrainError::Config(format!("transition ({s}, {sp}) outside {n} states")));
        }
        let features = feature_matrix(world, config.features);
        let params = mlp_init(&config.shape(features.ncols()), config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            config: config.clone(),
            dataset,
            oracle,
            exhaustive: TransitionBatch::exhaustive(&build_transition_model(world)),
            eval_batch: TransitionBatch::uniform(dataset.pairs.clone()),
            coefficients: GgdoCoefficients::linear(config.d),
            features,
            rng,
            step: 0,
            params,
            duals: DualVariables::zeros(config.d),
            b: config.b0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// Network outputs on every state, one row per state.
    pub fn outputs(&self) -> Result<Array2<f64>, TrainError> {
        Ok(self.params.predict(self.features.view())?)
    }

    fn sample_batch(&mut self) -> TransitionBatch {
        let pairs = &self.dataset.pairs;
        let batch = (0..self.config.batch_size).map(|_| pairs[self.rng.random_range(0..pairs.len())]).collect();
        TransitionBatch::uniform(batch)
    }

    fn directions(
        &self,
        b1: &TransitionBatch,
        b2: &TransitionBatch,
        outputs: &Array2<f64>,
    ) -> Result<SampledDirections, TrainError> {
        Ok(match self.config.objective {
            Objective::Allo | Objective::AlloNoDuals => {
                sampled_allo_directions(b1, b2, outputs.view(), &self.duals, self.b)?
            }
            Objective::Ggdo | Objective::GgdoIncreasingB => {
                sampled_ggdo_directions(b1, b2, outputs.view(), self.b, &self.coefficients)?
            }
        })
    }

    /// One gradient step with the dual and barrier updates, preceded at the
    /// configured cadence by a random output permutation.
    pub fn step(&mut self) -> Result<SampledDirections, TrainError> {
        // Permuting before the update keeps the metrics logged at a multiple
        // of `permute_every` on the pre-permutation representation.
        let every = self.config.permute_every;
        if every > 0 && self.step > 0 && self.step.is_multiple_of(every) {
            let mut perm: Vec<usize> = (0..self.config.d).collect();
            perm.shuffle(&mut self.rng);
            self.permute(&perm)?;
        }
        let (outputs, cache) = self.params.forward(self.features.view())?;
        let dirs = if self.config.exhaustive {
            self.directions(&self.exhaustive, &self.exhaustive, &outputs)?
        } else {
            let b1 = self.sample_batch();
            let b2 = self.sample_batch();
            self.directions(&b1, &b2, &outputs)?
        };
        let grads = self.params.backward(&cache, dirs.outputs.view())?;
        self.params.sgd_step(&grads, self.config.learning_rate);
        if self.config.objective.updates_duals() {
            self.duals.ascend(&dirs.dual, self.config.alpha_dual);
        }
        if self.config.objective.updates_barrier() {
            let raised = self.b + self.config.alpha_barrier * dirs.barrier.max(0.0);
            self.b = raised.min(self.config.b_max).max(self.b);
        }
        self.step += 1;

        let beta_max = self.duals.packed().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !dirs.loss.is_finite() || !self.b.is_finite() || !beta_max.is_finite() || self.params.check_finite().is_err() {
            return Err(TrainError::NonFinite { step: self.step, loss: dirs.loss, b: self.b, beta_max });
        }
        Ok(dirs)
    }

    /// Relabel output `i` as `perm[i]`, carrying the duals along.
    pub fn permute(&mut self, perm: &[usize]) -> Result<(), TrainError> {
        self.params.permute_outputs(perm)?;
        self.duals = self.duals.permuted(perm);
        Ok(())
    }

    /// One metrics row evaluated on every state.
    pub fn evaluate(&self) -> Result<Vec<Cell>, TrainError> {
        let d = self.config.d;
        let outputs = self.outputs()?;
        let (similarity, average) = match similarity_report(outputs.view(), self.oracle) {
            Ok(rep) => (rep.all_components, rep.average),
            Err(_) => (vec![0.0; d], 0.0),
        };
        let exact = self.directions(&self.exhaustive, &self.exhaustive, &outputs)?;
        let residual_inf = exact.dual.iter().fold(0.0f64, |m, v| m.max(v.abs()));

        let mut row: Vec<Cell> = vec![self.step.into(), self.config.objective.name().into(), average.into()];
        row.extend(similarity.iter().skip(1).map(|&v| Cell::from(v)));
        row.extend(self.duals.diagonal().into_iter().map(Cell::from));
        for i in 0..d {
            let est = mc_eigenvalue_estimate(&self.eval_batch, outputs.view(), i).unwrap_or(f64::NAN);
            row.push(est.into());
        }
        row.extend([residual_inf.into(), self.b.into(), exact.loss.into()]);
        Ok(row)
    }
}

/// Train for `config.steps` steps, logging every `config.eval_every`.
pub fn train(
    world: &GridWorld,
    dataset: &TransitionDataset,
    config: &TrainConfig,
    oracle: &EigenSystem,
) -> Result<TrainRun, TrainError> {
    let start = Instant::now();
    let mut trainer = Trainer::new(world, dataset, config, oracle)?;
    let mut log = MetricsLog::new(metrics_header(config.d));
    log.push(trainer.evaluate()?).expect("row matches header");
    for _ in 0..config.steps {
        trainer.step()?;
        if trainer.step_count() % config.eval_every == 0 {
            log.push(trainer.evaluate()?).expect("row matches header");
        }
    }
    Ok(TrainRun {
        params: trainer.params,
        duals: trainer.duals,
        b: trainer.b,
        log,
        config: config.clone(),
        wall_clock: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{bundled_map, sample_transitions};
    use crate::spectral::eigendecompose;

    fn setup(name: &str, n: usize) -> (GridWorld, TransitionDataset, EigenSystem) {
        let world = bundled_map(name).unwrap();
        let model = build_transition_model(&world);
        let data = sample_transitions(&model, n, 1);
        let sys = eigendecompose(model.laplacian().view()).unwrap();
        (world, data, sys)
    }

    #[test]
    fn log_has_expected_rows_and_columns() {
        let (world, data, sys) = setup("corridor-5", 1000);
        let config = TrainConfig { d: 3, hidden: vec![8], steps: 25, eval_every: 10, ..Default::default() };
        let run = train(&world, &data, &config, &sys).unwrap();
        assert_eq!(run.log.len(), 25 / 10 + 1);
        assert_eq!(run.log.header(), metrics_header(3).as_slice());
        assert_eq!(run.log.header().len(), 3 + 2 + 3 + 3 + 3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (world, data, sys) = setup("corridor-5", 100);
        let empty = TransitionDataset { pairs: vec![], seed: 0, source: "x".into() };
        let config = TrainConfig { d: 2, ..Default::default() };
        assert!(matches!(train(&world, &empty, &config, &sys), Err(TrainError::EmptyDataset)));
        let config = TrainConfig { d: 6, ..Default::default() };
        assert!(matches!(train(&world, &data, &config, &sys), Err(TrainError::Config(_))));
    }

    #[test]
    fn no_duals_arm_keeps_beta_zero_and_ggdo_keeps_b() {
        let (world, data, sys) = setup("corridor-5", 1000);
        for objective in [Objective::AlloNoDuals, Objective::Ggdo] {
            let config = TrainConfig { d: 2, hidden: vec![8], objective, alpha_barrier: 0.1, ..Default::default() };
            let mut t = Trainer::new(&world, &data, &config, &sys).unwrap();
            for _ in 0..50 {
                t.step().unwrap();
                assert!(t.duals.packed().iter().all(|&v| v == 0.0));
            }
            if objective == Objective::Ggdo {
                assert_eq!(t.b, config.b0);
            }
        }
    }

    #[test]
    fn barrier_never_decreases() {
        let (world, data, sys) = setup("corridor-5", 1000);
        let config = TrainConfig { d: 3, hidden: vec![8], alpha_barrier: 0.5, ..Default::default() };
        let mut t = Trainer::new(&world, &data, &config, &sys).unwrap();
        let mut last = t.b;
        for _ in 0..100 {
            t.step().unwrap();
            assert!(t.b >= last);
            last = t.b;
        }
    }

    #[test]
    fn divergence_aborts_with_step() {
        let (world, data, sys) = setup("corridor-5", 1000);
        let config = TrainConfig { d: 2, hidden: vec![8], learning_rate: 1e6, ..Default::default() };
        match train(&world, &data, &config, &sys) {
            Err(TrainError::NonFinite { step, .. }) => assert!(step > 0),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
