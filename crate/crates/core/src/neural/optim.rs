use super::{NeuralError, ParamSet, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are kept in f64 regardless of the
/// parameter type.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.shapes().iter().map(|&(r, c)| vec![0.0; r * c]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn apply<T: Scalar>(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<(), NeuralError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(NeuralError::ShapeMismatch(format!(
                "{} gradients / {} moment buffers for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.get(i).shape() || self.m[i].len() != g.len() {
                return Err(NeuralError::ShapeMismatch(format!("gradient for {}", params.name(i))));
            }
            if !g.all_finite() {
                return Err(NeuralError::NonFiniteGradient(i));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i);
            for (k, gv) in g.data.iter().enumerate() {
                let gv = gv.to_f64().unwrap();
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = beta1 * *m + (1.0 - beta1) * gv;
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                p.data[k] = T::of(p.data[k].to_f64().unwrap() - update);
            }
        }
        Ok(())
    }
}

/// Averages gradients over a fixed number of micro-batches.
#[derive(Debug, Clone)]
pub struct GradAccumulator<T> {
    steps: usize,
    count: usize,
    buffers: Vec<Tensor<T>>,
}

impl<T: Scalar> GradAccumulator<T> {
    pub fn new(steps: usize, shapes: &[(usize, usize)]) -> Self {
        assert!(steps >= 1, "accumulation steps must be >= 1");
        Self { steps, count: 0, buffers: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect() }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn pending(&self) -> usize {
        self.count
    }

    /// Adds one micro-batch. Returns the averaged gradients when this was the
    /// last micro-batch of the group, resetting the buffers.
    pub fn push(&mut self, grads: &[Tensor<T>]) -> Option<Vec<Tensor<T>>> {
        for (b, g) in self.buffers.iter_mut().zip(grads) {
            b.add_assign(g);
        }
        self.count += 1;
        if self.count < self.steps {
            return None;
        }
        let scale = T::one() / T::of(self.steps as f64);
        let shapes: Vec<_> = self.buffers.iter().map(Tensor::shape).collect();
        let mut out = std::mem::replace(&mut self.buffers, shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect());
        for t in &mut out {
            t.scale(scale);
        }
        self.count = 0;
        Some(out)
    }
}
