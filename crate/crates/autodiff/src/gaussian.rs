use crate::{AdError, Graph, Real, Var};

pub const LOG_STD_MIN: f32 = -5.0;
pub const LOG_STD_MAX: f32 = 2.0;

/// Diagonal Gaussian with clamped log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f32>,
    log_std: Vec<f32>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f32>, log_std: Vec<f32>) -> Result<Self, AdError> {
        if mean.len() != log_std.len() {
            return Err(AdError::Dimension(mean.len(), log_std.len()));
        }
        let log_std = log_std.into_iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![0.0; dim],
        }
    }

    /// Split a head output laid out as `[mean | log_std]`.
    pub fn from_head(head: &[f32]) -> Self {
        let d = head.len() / 2;
        Self::new(head[..d].to_vec(), head[d..].to_vec()).expect("even head width")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f32] {
        &self.log_std
    }

    pub fn std(&self) -> Vec<f32> {
        self.log_std.iter().map(|v| v.exp()).collect()
    }

    /// `mean + std * noise`.
    pub fn reparameterize(&self, noise: &[f32]) -> Result<Vec<f32>, AdError> {
        if noise.len() != self.dim() {
            return Err(AdError::Dimension(self.dim(), noise.len()));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(noise)
            .map(|((m, s), e)| m + s.exp() * e)
            .collect())
    }
}

/// Closed-form `KL(q || p)` of diagonal Gaussians, accumulated in `f64`.
pub fn gaussian_kl(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64, AdError> {
    if q.dim() != p.dim() {
        return Err(AdError::Dimension(q.dim(), p.dim()));
    }
    let mut kl = 0.0f64;
    for i in 0..q.dim() {
        let (mq, lq) = (q.mean[i] as f64, q.log_std[i] as f64);
        let (mp, lp) = (p.mean[i] as f64, p.log_std[i] as f64);
        let d = mq - mp;
        kl += lp - lq + ((2.0 * lq).exp() + d * d) / (2.0 * (2.0 * lp).exp()) - 0.5;
    }
    Ok(kl.max(0.0))
}

/// Batch of diagonal Gaussians on a tape: `mean` and clamped `log_std`,
/// both `[rows, dim]`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVar {
    pub mean: Var,
    pub log_std: Var,
}

impl GaussianVar {
    /// Split a `[rows, 2 * dim]` head output.
    pub fn from_head<T: Real>(g: &mut Graph<T>, head: Var) -> Self {
        let (_, cols) = g.shape(head);
        let d = cols / 2;
        let mean = g.slice_cols(head, 0, d);
        let raw = g.slice_cols(head, d, 2 * d);
        let log_std = g.clamp(raw, LOG_STD_MIN as f64, LOG_STD_MAX as f64);
        Self { mean, log_std }
    }

    pub fn detach<T: Real>(&self, g: &mut Graph<T>) -> Self {
        Self {
            mean: g.detach(self.mean),
            log_std: g.detach(self.log_std),
        }
    }

    /// `mean + exp(log_std) * noise`.
    pub fn sample<T: Real>(&self, g: &mut Graph<T>, noise: Var) -> Var {
        let std = g.exp(self.log_std);
        let scaled = g.mul(std, noise);
        g.add(self.mean, scaled)
    }

    /// Per-row `KL(self || p)` as `[rows, 1]`.
    pub fn kl<T: Real>(&self, g: &mut Graph<T>, p: &GaussianVar) -> Var {
        // lp - lq + (exp(2 lq) + (mq - mp)^2) * exp(-2 lp) / 2 - 1/2
        let dlog = g.sub(p.log_std, self.log_std);
        let two_lq = g.scale(self.log_std, 2.0);
        let var_q = g.exp(two_lq);
        let dm = g.sub(self.mean, p.mean);
        let dm2 = g.square(dm);
        let num = g.add(var_q, dm2);
        let neg_two_lp = g.scale(p.log_std, -2.0);
        let inv_var_p = g.exp(neg_two_lp);
        let ratio = g.mul(num, inv_var_p);
        let half = g.scale(ratio, 0.5);
        let terms = g.add(dlog, half);
        let terms = g.add_scalar(terms, -0.5);
        g.sum_cols(terms)
    }

    /// Per-row `KL(self || N(0, I))` as `[rows, 1]`.
    pub fn kl_standard<T: Real>(&self, g: &mut Graph<T>) -> Var {
        // -lq + (exp(2 lq) + mq^2) / 2 - 1/2
        let two_lq = g.scale(self.log_std, 2.0);
        let var_q = g.exp(two_lq);
        let mq2 = g.square(self.mean);
        let num = g.add(var_q, mq2);
        let half = g.scale(num, 0.5);
        let terms = g.sub(half, self.log_std);
        let terms = g.add_scalar(terms, -0.5);
        g.sum_cols(terms)
    }

    /// Values of row `r` as a plain [`DiagGaussian`].
    pub fn row<T: Real>(&self, g: &Graph<T>, r: usize) -> DiagGaussian {
        let m = g.value(self.mean).row(r).iter().map(|v| v.as_f32()).collect();
        let s = g.value(self.log_std).row(r).iter().map(|v| v.as_f32()).collect();
        DiagGaussian::new(m, s).expect("same width")
    }
}
