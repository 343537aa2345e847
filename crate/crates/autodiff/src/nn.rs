use rand::Rng;

use crate::{AdError, AdamMoments, Graph, Real, Tensor, Var};

/// Named parameter tensors with per-tensor Adam state.
///
/// Tensor order is fixed at construction and is the order used for
/// gradients, optimizer state and serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    key: u32,
    name: String,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    moments: Vec<AdamMoments>,
    frozen: bool,
}

impl ParamSet {
    pub fn new(key: u32, name: impl Into<String>, entries: Vec<(String, Tensor)>) -> Self {
        let (names, tensors): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        let moments = tensors.iter().map(|t| AdamMoments::zeros(t.len())).collect();
        Self {
            key,
            name: name.into(),
            names,
            tensors,
            moments,
            frozen: false,
        }
    }

    pub fn key(&self) -> u32 {
        self.key
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor_names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn moments(&self) -> &[AdamMoments] {
        &self.moments
    }

    pub fn moments_mut(&mut self) -> &mut [AdamMoments] {
        &mut self.moments
    }

    pub(crate) fn split_mut(&mut self) -> (&mut [Tensor], &mut [AdamMoments]) {
        (&mut self.tensors, &mut self.moments)
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Same key, names and shapes.
    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Overwrite values (not optimizer state) with those of `other`.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<(), AdError> {
        if !self.same_structure(other) {
            return Err(AdError::StructureMismatch(format!("{} <- {}", self.name, other.name)));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Bind every tensor onto `g`, trainable unless frozen.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.bind_param(self.key, i, t, !self.frozen))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputAct {
    Identity,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform Glorot initialization.
    Xavier,
    Zero,
}

/// Fully connected network with tanh hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    params: ParamSet,
    sizes: Vec<usize>,
    output: OutputAct,
}

impl Mlp {
    /// `sizes` lists every layer width including input and output.
    pub fn new<R: Rng + ?Sized>(
        key: u32,
        name: &str,
        sizes: &[usize],
        output: OutputAct,
        init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let mut entries = Vec::with_capacity(2 * (sizes.len() - 1));
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = match init {
                Init::Zero => vec![0.0; fan_in * fan_out],
                Init::Xavier => {
                    let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
                    (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect()
                }
            };
            entries.push((
                format!("l{l}.w"),
                Tensor::new(vec![fan_in, fan_out], weights).expect("weight shape"),
            ));
            entries.push((format!("l{l}.b"), Tensor::zeros(vec![fan_out])));
        }
        Self {
            params: ParamSet::new(key, name, entries),
            sizes: sizes.to_vec(),
            output,
        }
    }

    pub fn from_params(params: ParamSet, sizes: Vec<usize>, output: OutputAct) -> Result<Self, AdError> {
        let expected = 2 * (sizes.len() - 1);
        if params.tensors().len() != expected {
            return Err(AdError::StructureMismatch(format!(
                "{}: {} tensors for {} layers",
                params.name(),
                params.tensors().len(),
                sizes.len() - 1
            )));
        }
        for (l, w) in sizes.windows(2).enumerate() {
            let ws = params.tensors()[2 * l].shape();
            let bs = params.tensors()[2 * l + 1].shape();
            if ws != [w[0], w[1]] || bs != [w[1]] {
                return Err(AdError::Shape {
                    context: "Mlp::from_params",
                    expected: vec![w[0], w[1]],
                    got: ws.to_vec(),
                });
            }
        }
        Ok(Self { params, sizes, output })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn output_act(&self) -> OutputAct {
        self.output
    }

    /// Zero the last layer so the network outputs zero (or tanh(0)).
    pub fn zero_output_layer(&mut self) {
        let n = self.params.tensors().len();
        for t in &mut self.params.tensors_mut()[n - 2..] {
            t.data_mut().fill(0.0);
        }
    }

    /// Record a forward pass of `x` (`[rows, input_dim]`) on the tape.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, AdError> {
        self.check_input(g, x)?;
        let vars = self.params.bind(g);
        self.run_layers(g, x, &vars)
    }

    /// Forward pass that treats the weights as constants: no gradient
    /// reaches this network's parameters, but it still flows to `x`.
    pub fn forward_stopped<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, AdError> {
        self.check_input(g, x)?;
        let vars: Vec<Var> = self.params.bind(g).into_iter().map(|v| g.detach(v)).collect();
        self.run_layers(g, x, &vars)
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<(), AdError> {
        let (_, cols) = g.shape(x);
        if cols != self.input_dim() {
            return Err(AdError::Shape {
                context: "Mlp::forward",
                expected: vec![self.input_dim()],
                got: vec![cols],
            });
        }
        Ok(())
    }

    fn run_layers<T: Real>(&self, g: &mut Graph<T>, x: Var, vars: &[Var]) -> Result<Var, AdError> {
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for l in 0..layers {
            h = g.matmul(h, vars[2 * l]);
            h = g.add_bias(h, vars[2 * l + 1]);
            if l + 1 < layers || self.output == OutputAct::Tanh {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    /// Forward pass in plain `f32` without a tape. `input` holds `rows`
    /// row-major rows.
    pub fn infer(&self, rows: usize, input: &[f32]) -> Vec<f32> {
        assert_eq!(input.len(), rows * self.input_dim(), "Mlp::infer input width");
        let layers = self.sizes.len() - 1;
        let mut cur = input.to_vec();
        for l in 0..layers {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let w = self.params.tensors()[2 * l].data();
            let b = self.params.tensors()[2 * l + 1].data();
            let mut next = Vec::with_capacity(rows * fo);
            for r in 0..rows {
                next.extend_from_slice(b);
                let out = &mut next[r * fo..(r + 1) * fo];
                for (p, &x) in cur[r * fi..(r + 1) * fi].iter().enumerate() {
                    for (o, &wv) in out.iter_mut().zip(&w[p * fo..(p + 1) * fo]) {
                        *o += x * wv;
                    }
                }
            }
            if l + 1 < layers || self.output == OutputAct::Tanh {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            cur = next;
        }
        cur
    }
}
