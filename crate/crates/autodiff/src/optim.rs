use crate::{AdError, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and step count for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], cfg: &AdamConfig) -> Result<(), AdError> {
    if grads.len() != params.tensors().len() {
        return Err(AdError::StructureMismatch(format!(
            "{}: {} gradients for {} tensors",
            params.name(),
            grads.len(),
            params.tensors().len()
        )));
    }
    for (t, g) in params.tensors().iter().zip(grads) {
        if t.shape() != g.shape() {
            return Err(AdError::Shape {
                context: "adam_step",
                expected: t.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
    }
    let (tensors, moments) = params.split_mut();
    for ((t, st), g) in tensors.iter_mut().zip(moments.iter_mut()).zip(grads) {
        st.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(st.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(st.step as i32);
        for (((w, m), v), &gr) in t
            .data_mut()
            .iter_mut()
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
            .zip(g.data())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gr;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gr * gr;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(groups: &mut [Vec<Tensor>], max_norm: f32) -> f32 {
    let total: f64 = groups.iter().flatten().map(Tensor::sq_norm).sum();
    let norm = total.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in groups.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// `target <- (1 - rate) * target + rate * source`, elementwise.
pub fn ema_update(target: &mut ParamSet, source: &ParamSet, rate: f32) -> Result<(), AdError> {
    if !target.same_structure(source) {
        return Err(AdError::StructureMismatch(format!(
            "{} <- {}",
            target.name(),
            source.name()
        )));
    }
    for (t, s) in target.tensors_mut().iter_mut().zip(source.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = (1.0 - rate) * *a + rate * b;
        }
    }
    Ok(())
}
