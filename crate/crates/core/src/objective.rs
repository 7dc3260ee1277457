//! Training losses over a batch of embeddings laid out as rows
//! `[query, positive, negative_1, ..., negative_K]`.

use thiserror::Error;

use crate::neural::{NeuralError, Scalar, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("a contrastive batch needs a query and at least one candidate, got {0} rows")]
    BatchTooSmall(usize),
    #[error("embedding rows differ in length")]
    RaggedBatch,
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub tau: f64,
    /// Negatives per batch.
    pub negatives: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: 0.2, lambda: 0.5, tau: 0.07, negatives: 62 }
    }
}

/// `Σ_t ‖y_t − sign(y_t)‖² + γ Σ_t (y_t · 1)²` over the rows of `y`.
/// `sign(0)` is taken as −1 and the sign is held constant.
pub fn hash_loss<T: Scalar>(tape: &mut Tape<T>, y: Var, gamma: f64) -> Result<Var, ObjectiveError> {
    let yv = tape.value(y);
    let signs = Tensor {
        rows: yv.rows,
        cols: yv.cols,
        data: yv.data.iter().map(|&v| if v > T::zero() { T::one() } else { -T::one() }).collect(),
    };
    let diff = tape.sub_const(y, &signs)?;
    let quant = tape.sum_squares(diff)?;
    let sums = tape.row_sums(y)?;
    let balance = tape.sum_squares(sums)?;
    Ok(tape.weighted_sum(&[(quant, T::one()), (balance, T::of(gamma))])?)
}

/// Negative log-likelihood of the positive (row 1) among all candidates
/// (rows 1..) for the query (row 0), on L2-normalized rows scaled by `1/τ`.
pub fn infonce_loss<T: Scalar>(tape: &mut Tape<T>, y: Var, tau: f64) -> Result<Var, ObjectiveError> {
    let rows = tape.value(y).rows;
    if rows < 2 {
        return Err(ObjectiveError::BatchTooSmall(rows));
    }
    let yn = tape.l2_normalize(y)?;
    let q = tape.gather_rows(yn, &[0])?;
    let cand_idx: Vec<u32> = (1..rows as u32).collect();
    let cands = tape.gather_rows(yn, &cand_idx)?;
    let ct = tape.transpose(cands)?;
    let sims = tape.matmul(q, ct)?;
    let logits = tape.scale(sims, T::of(1.0 / tau))?;
    Ok(tape.neg_log_softmax_first(logits)?)
}

/// Handles to the loss terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub sim: Var,
    pub hash: Var,
    pub total: Var,
}

/// `L = L_sim + λ L_hash`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, y: Var, cfg: &LossConfig) -> Result<LossVars, ObjectiveError> {
    let sim = infonce_loss(tape, y, cfg.tau)?;
    let hash = hash_loss(tape, y, cfg.gamma)?;
    let total = tape.weighted_sum(&[(sim, T::one()), (hash, T::of(cfg.lambda))])?;
    Ok(LossVars { sim, hash, total })
}

/// Query, positive and negative embeddings as plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub sim: f64,
    pub hash: f64,
    pub total: f64,
}

impl BatchEmbeddings {
    pub fn to_tensor(&self) -> Result<Tensor<f64>, ObjectiveError> {
        let d = self.query.len();
        let rows: Vec<&Vec<f64>> = [&self.query, &self.positive].into_iter().chain(&self.negatives).collect();
        if rows.iter().any(|r| r.len() != d) {
            return Err(ObjectiveError::RaggedBatch);
        }
        Ok(Tensor::from_vec(rows.len(), d, rows.into_iter().flatten().copied().collect())?)
    }

    pub fn losses(&self, cfg: &LossConfig) -> Result<LossValues, ObjectiveError> {
        let mut tape = Tape::new();
        let y = tape.constant(self.to_tensor()?)?;
        let v = total_loss(&mut tape, y, cfg)?;
        Ok(LossValues { sim: tape.value(v.sim).data[0], hash: tape.value(v.hash).data[0], total: tape.value(v.total).data[0] })
    }
}
