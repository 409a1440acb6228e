//! Parameter registry, AdamW with decoupled weight decay, and the
//! cosine-annealed learning rate schedule.

use crate::embank::l2_normalize;
use crate::error::Result;
use crate::mat::Mat;

/// One named trainable tensor with its gradient buffer.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    pub grad: Mat,
    /// Rows are re-normalized to unit length after every update (cache keys).
    pub renormalize_rows: bool,
}

/// Named tensors with gradient buffers, in a fixed order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat, renormalize_rows: bool) -> usize {
        let grad = Mat::zeros(value.rows(), value.cols());
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            grad,
            renormalize_rows,
        });
        self.entries.len() - 1
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Hyperparameters of one AdamW update.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// AdamW state: bias-corrected first/second moments per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub hyper: AdamHyper,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(params: &ParamSet, hyper: AdamHyper) -> Self {
        let m = params
            .entries
            .iter()
            .map(|e| Mat::zeros(e.value.rows(), e.value.cols()))
            .collect();
        let v = params
            .entries
            .iter()
            .map(|e| Mat::zeros(e.value.rows(), e.value.cols()))
            .collect();
        Self {
            hyper,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    #[cfg(test)]
    pub(crate) fn moments(&self, i: usize) -> (&Mat, &Mat) {
        (&self.m[i], &self.v[i])
    }

    /// One update over all parameters. Weight decay is decoupled
    /// (`theta -= lr * wd * theta`, separate from the Adam direction) and both
    /// terms scale with `lr`, so `lr == 0` leaves every parameter bitwise
    /// unchanged while the moments keep decaying.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        self.step += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        for (i, entry) in params.entries.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = entry.grad.data();
            for k in 0..g.len() {
                m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
                v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
            }
            if lr == 0.0 {
                continue;
            }
            let theta = entry.value.data_mut();
            for k in 0..g.len() {
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                theta[k] -= lr * m_hat / (v_hat.sqrt() + h.eps);
                theta[k] -= lr * h.weight_decay * theta[k];
            }
            if entry.renormalize_rows {
                for r in 0..entry.value.rows() {
                    let row = l2_normalize(entry.value.row(r))?;
                    entry.value.row_mut(r).copy_from_slice(&row);
                }
            }
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate: `0.5 * lr0 * (1 + cos(pi * t / t_max))`,
/// annealing to zero.
pub fn cosine_lr(epoch: usize, lr0: f64, epochs: usize) -> f64 {
    let t_max = epochs.max(1) as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * epoch as f64 / t_max).cos())
}
