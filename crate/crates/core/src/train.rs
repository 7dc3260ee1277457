//! Contrastive training loop: sample a query, one positive (optionally a
//! substructure of it) and `K` negatives, then step Adam on the summed loss.

use std::io::Write;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::encoder::{forward_batch, init_params, EncoderError, EncoderParams};
use crate::featurize::{build_graph, FeaturizeConfig, FeaturizeError, ProteinGraph};
use crate::neural::{Adam, AdamConfig, GradAccumulator, Mode, NeuralError, Tape};
use crate::objective::{total_loss, ObjectiveError};
use crate::protein_io::ProteinChain;
use crate::sampling::{sample_batch, sample_substructure, PositiveSets, SamplingError, SubstructurePlan};
use crate::simmatrix::{SimMatrixError, SimilarityMatrix};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no query has both a positive and {0} negatives")]
    NoTrainableQueries(usize),
    #[error("chains and graphs disagree at position {0}")]
    ChainMismatch(usize),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Matrix(#[from] SimMatrixError),
}

/// Graphs to train on, with the similarity matrix restricted to them and,
/// for substructure sampling, the chains they were built from.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub graphs: Vec<ProteinGraph>,
    pub chains: Option<Vec<ProteinChain>>,
    pub matrix: SimilarityMatrix,
}

impl TrainingSet {
    pub fn new(graphs: Vec<ProteinGraph>, chains: Option<Vec<ProteinChain>>, matrix: &SimilarityMatrix) -> Result<Self, TrainError> {
        if let Some(ch) = &chains {
            for (i, (c, g)) in ch.iter().zip(&graphs).enumerate() {
                if c.id != g.id || c.len() != g.n_residues {
                    return Err(TrainError::ChainMismatch(i));
                }
            }
            if ch.len() != graphs.len() {
                return Err(TrainError::ChainMismatch(ch.len().min(graphs.len())));
            }
        }
        let ids: Vec<String> = graphs.iter().map(|g| g.id.clone()).collect();
        let matrix = matrix.subset(&ids)?;
        Ok(Self { graphs, chains, matrix })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub sim: f64,
    pub hash: f64,
    pub total: f64,
}

impl StepMetrics {
    pub const HEADER: &'static str = "step\tL_sim\tL_hash\tL";

    pub fn write_row<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}\t{:.6}\t{:.6}\t{:.6}", self.step, self.sim, self.hash, self.total)
    }
}

pub struct TrainOutcome {
    pub params: EncoderParams<f32>,
    pub adam: Adam,
    pub metrics: Vec<StepMetrics>,
    /// Structures never used as queries: no positive, or too few negatives.
    pub skipped_queries: usize,
}

/// Optimizer steps implied by `cfg`: `steps` if set, otherwise enough steps
/// for every trainable query to be visited `epochs` times.
pub fn planned_steps(cfg: &RunConfig, n_queries: usize) -> usize {
    if cfg.steps > 0 {
        cfg.steps
    } else {
        (cfg.epochs * n_queries).div_ceil(cfg.accumulation).max(1)
    }
}

pub fn train(cfg: &RunConfig, data: &TrainingSet, mut on_step: impl FnMut(&StepMetrics)) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let enc_cfg = cfg.encoder_config();
    let mut params = init_params::<f32>(&enc_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let sets = PositiveSets::build(&data.matrix, cfg.rho)?;
    let n = data.graphs.len();
    let queries: Vec<usize> = (0..n).filter(|&q| !sets.sets[q].is_empty() && n - 1 - sets.sets[q].len() >= cfg.negatives).collect();
    if queries.is_empty() {
        return Err(TrainError::NoTrainableQueries(cfg.negatives));
    }
    let skipped = n - queries.len();
    if skipped > 0 {
        info!("{skipped} of {n} structures lack positives or negatives and are never queries");
    }
    let plan = match (&data.chains, cfg.substructures) {
        (Some(chains), true) => {
            info!("precomputing substructure lengths for {} chains (alpha {})", chains.len(), cfg.alpha);
            Some(SubstructurePlan::build(chains, cfg.alpha)?)
        }
        _ => None,
    };
    let base_feat = cfg.featurize_config()?;
    let loss_cfg = cfg.loss_config();
    let shapes = params.params.shapes();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &params.params);
    let mut acc = GradAccumulator::<f32>::new(cfg.accumulation, &shapes);
    let steps = planned_steps(cfg, queries.len());
    let mut order: Vec<usize> = Vec::new();
    let mut metrics = Vec::with_capacity(steps);
    let mut sums = [0.0f64; 3];
    while metrics.len() < steps {
        if order.is_empty() {
            order = queries.clone();
            order.shuffle(&mut rng);
        }
        let q = order.pop().expect("refilled above");
        let mut batch = sample_batch(&sets, q, cfg.negatives, &mut rng)?;
        let window_graph = match (&plan, &data.chains) {
            (Some(plan), Some(chains)) => {
                let chain = &chains[batch.positive];
                let min = plan.min_length(&chain.id).unwrap_or(chain.len());
                let (start, len) = sample_substructure(chain.len(), min, &mut rng);
                batch.window = Some((start, len));
                let g = &data.graphs[batch.positive];
                let fc = FeaturizeConfig { k: g.k, rbf: g.rbf.clone(), metric: base_feat.metric };
                Some(build_graph(&chain.window(start, len), &fc)?)
            }
            _ => None,
        };
        let mut graphs: Vec<&ProteinGraph> = Vec::with_capacity(cfg.negatives + 2);
        graphs.push(&data.graphs[q]);
        graphs.push(window_graph.as_ref().unwrap_or(&data.graphs[batch.positive]));
        graphs.extend(batch.negatives.iter().map(|&i| &data.graphs[i]));

        let mut tape = Tape::<f32>::new();
        let fwd = forward_batch(&mut tape, &params, &graphs, Mode::Train)?;
        let loss = total_loss(&mut tape, fwd.y, &loss_cfg)?;
        for (s, v) in sums.iter_mut().zip([loss.sim, loss.hash, loss.total]) {
            *s += tape.value(v).data[0] as f64;
        }
        let grads = tape.backward(loss.total)?.param_grads(&shapes);
        params.absorb_stats(&fwd.stats);
        if let Some(mean) = acc.push(&grads) {
            adam.apply(&mut params.params, &mean)?;
            let k = cfg.accumulation as f64;
            let m = StepMetrics { step: metrics.len() + 1, sim: sums[0] / k, hash: sums[1] / k, total: sums[2] / k };
            debug!("step {} loss {:.4}", m.step, m.total);
            on_step(&m);
            metrics.push(m);
            sums = [0.0; 3];
        }
    }
    Ok(TrainOutcome { params, adam, metrics, skipped_queries: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, FamilySpec};

    fn small_set(substructures: bool) -> (RunConfig, TrainingSet) {
        let data = generate(&FamilySpec { n_families: 4, members: 3, min_len: 20, max_len: 26, sigma: 0.3, seed: 3 }).unwrap();
        let mut cfg = RunConfig { hidden: 8, n_layers: 2, code_length: 16, negatives: 4, accumulation: 2, steps: 6, k_nn: 6, lr: 1e-2, ..RunConfig::default() };
        cfg.substructures = substructures;
        let fc = cfg.featurize_config().unwrap();
        let graphs = data.chains.iter().map(|c| build_graph(c, &fc).unwrap()).collect();
        (cfg, TrainingSet::new(graphs, Some(data.chains), &data.matrix).unwrap())
    }

    #[test]
    fn runs_requested_steps_and_is_deterministic() {
        let (cfg, set) = small_set(true);
        let mut seen = Vec::new();
        let a = train(&cfg, &set, |m| seen.push(m.step)).unwrap();
        assert_eq!(seen, (1..=6).collect::<Vec<_>>());
        assert_eq!(a.adam.step, 6);
        assert!(a.metrics.iter().all(|m| m.total.is_finite() && (m.total - m.sim - 0.5 * m.hash).abs() < 1e-4));
        let b = train(&cfg, &set, |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn loss_decreases_on_tiny_problem() {
        let (mut cfg, set) = small_set(false);
        cfg.steps = 60;
        let out = train(&cfg, &set, |_| {}).unwrap();
        let first: f64 = out.metrics[..10].iter().map(|m| m.sim).sum();
        let last: f64 = out.metrics[50..].iter().map(|m| m.sim).sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn rejects_when_negatives_unavailable() {
        let (mut cfg, set) = small_set(false);
        cfg.negatives = 11;
        assert!(matches!(train(&cfg, &set, |_| {}), Err(TrainError::NoTrainableQueries(11))));
    }

    #[test]
    fn step_count_from_epochs() {
        let cfg = RunConfig { epochs: 3, accumulation: 4, steps: 0, ..RunConfig::default() };
        assert_eq!(planned_steps(&cfg, 10), 8);
        assert_eq!(planned_steps(&RunConfig { steps: 5, ..cfg }, 10), 5);
    }
}
