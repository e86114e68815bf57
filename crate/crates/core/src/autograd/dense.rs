//! Dense layers, networks and their hand-derived reverse pass.
//!
//! A network is a chain of affine maps, each followed by an element-wise
//! activation (or a final softmax). Any layer input may additionally be scaled
//! element-wise before the affine map, which is how key modulation enters:
//!
//! - `s_i = scale_i ⊙ z_i` (or `z_i` when the layer carries no scale)
//! - `z_{i+1} = act_i(W_i s_i + b_i)`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    /// Only valid on the final layer.
    Softmax,
}

impl Activation {
    pub fn apply(self, pre: &[f64], out: &mut [f64]) {
        match self {
            Activation::Identity => out.copy_from_slice(pre),
            Activation::Tanh => {
                for (o, &p) in out.iter_mut().zip(pre) {
                    *o = p.tanh();
                }
            }
            Activation::Relu => {
                for (o, &p) in out.iter_mut().zip(pre) {
                    *o = if p > 0.0 { p } else { 0.0 };
                }
            }
            Activation::Softmax => {
                let max = pre.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, &p) in out.iter_mut().zip(pre) {
                    *o = (p - max).exp();
                    sum += *o;
                }
                for o in out.iter_mut() {
                    *o /= sum;
                }
            }
        }
    }

    /// Vector-Jacobian product: maps `d loss / d post` to `d loss / d pre`.
    pub fn backward(self, pre: &[f64], post: &[f64], upstream: &[f64], out: &mut [f64]) {
        match self {
            Activation::Identity => out.copy_from_slice(upstream),
            Activation::Tanh => {
                for ((o, &y), &g) in out.iter_mut().zip(post).zip(upstream) {
                    *o = g * (1.0 - y * y);
                }
            }
            Activation::Relu => {
                for ((o, &p), &g) in out.iter_mut().zip(pre).zip(upstream) {
                    *o = if p > 0.0 { g } else { 0.0 };
                }
            }
            Activation::Softmax => {
                let dot: f64 = post.iter().zip(upstream).map(|(y, g)| y * g).sum();
                for ((o, &y), &g) in out.iter_mut().zip(post).zip(upstream) {
                    *o = y * (g - dot);
                }
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
            Activation::Softmax => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Identity,
            1 => Activation::Tanh,
            2 => Activation::Relu,
            3 => Activation::Softmax,
            _ => return None,
        })
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("matrix dimensions must be non-zero, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// Determinant by partial-pivot elimination; intended for small matrices.
    pub fn determinant(&self) -> f64 {
        if self.rows != self.cols {
            return 0.0;
        }
        let n = self.rows;
        let mut a = self.data.clone();
        let mut det = 1.0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
                .unwrap_or(col);
            if a[pivot * n + col] == 0.0 {
                return 0.0;
            }
            if pivot != col {
                for k in 0..n {
                    a.swap(pivot * n + k, col * n + k);
                }
                det = -det;
            }
            let p = a[col * n + col];
            det *= p;
            for r in col + 1..n {
                let f = a[r * n + col] / p;
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
            }
        }
        det
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    weight: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Shape(format!(
                "bias has {} entries for a layer with {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Layer {
            weight,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn param_count(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }

    fn affine(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.weight.row(r), x) + self.bias[r];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

/// Shape of a fully-connected stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl ArchSpec {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input);
        dims.extend(&self.hidden);
        dims.push(self.output);
        let last = dims.len() - 2;
        dims.windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                input: w[0],
                output: w[1],
                activation: if i == last {
                    self.output_activation
                } else {
                    self.hidden_activation
                },
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_specs()
            .iter()
            .map(|s| s.input * s.output + s.output)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights and biases both drawn uniformly with the fan-in bound.
    UniformFanIn,
    /// Fan-in uniform weights, zero biases.
    #[default]
    ZerosBias,
}

/// Uniform fan-in bound: `sqrt(3 / fan_in)` scaled by the activation gain
/// (`sqrt(2)` for relu), so it never exceeds `sqrt(6 / fan_in)`.
pub fn fan_in_bound(fan_in: usize, activation: Activation) -> f64 {
    let gain: f64 = if activation == Activation::Relu { 2.0 } else { 1.0 };
    (3.0 * gain / fan_in as f64).sqrt()
}

/// Shape signature plus a mutation counter; a forward cache records the
/// fingerprint it was produced under.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Fingerprint {
    version: u64,
    shapes: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct DenseNet {
    layers: Vec<Layer>,
    version: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Architecture("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    layer: i + 1,
                    expected: pair[0].output_dim(),
                    got: pair[1].input_dim(),
                });
            }
        }
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            if layer.input_dim() == 0 || layer.output_dim() == 0 {
                return Err(Error::Architecture(format!("layer {i} has a zero dimension")));
            }
            if layer.activation == Activation::Softmax && i != last {
                return Err(Error::Architecture(format!(
                    "softmax is only allowed on the final layer (found on layer {i})"
                )));
            }
        }
        Ok(DenseNet { layers, version: 0 })
    }

    pub fn init(specs: &[LayerSpec], seed: u64, scheme: InitScheme) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            if spec.input == 0 || spec.output == 0 {
                return Err(Error::Architecture("layer dimensions must be non-zero".into()));
            }
            let bound = fan_in_bound(spec.input, spec.activation);
            let weight: Vec<f64> = (0..spec.input * spec.output)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            let bias = match scheme {
                InitScheme::ZerosBias => vec![0.0; spec.output],
                InitScheme::UniformFanIn => (0..spec.output).map(|_| rng.gen_range(-bound..bound)).collect(),
            };
            layers.push(Layer::new(
                Matrix::from_vec(spec.output, spec.input, weight)?,
                bias,
                spec.activation,
            )?);
        }
        DenseNet::new(layers)
    }

    pub fn from_arch(arch: &ArchSpec, seed: u64) -> Result<Self> {
        DenseNet::init(&arch.layer_specs(), seed, InitScheme::ZerosBias)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access invalidates outstanding forward caches.
    pub fn layer_mut(&mut self, index: usize) -> &mut Layer {
        self.version += 1;
        &mut self.layers[index]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec {
                input: l.input_dim(),
                output: l.output_dim(),
                activation: l.activation,
            })
            .collect()
    }

    /// Parameters flattened layer by layer: weight (row-major), then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight.data);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        self.version += 1;
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.weight.data.len();
            l.weight.data.copy_from_slice(&params[offset..offset + n]);
            offset += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            version: self.version,
            shapes: self.layers.iter().map(|l| (l.output_dim(), l.input_dim())).collect(),
        }
    }

    fn check_scales(&self, scales: &[(usize, &[f64])]) -> Result<()> {
        for &(index, scale) in scales {
            let layer = self.layers.get(index).ok_or(Error::InvalidLayerIndex {
                index,
                layers: self.layers.len(),
            })?;
            if scale.len() != layer.input_dim() {
                return Err(Error::DimensionMismatch {
                    layer: index,
                    expected: layer.input_dim(),
                    got: scale.len(),
                });
            }
        }
        Ok(())
    }

    /// Output only, without retaining a cache.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.predict_scaled(x, &[])
    }

    pub fn predict_scaled(&self, x: &[f64], scales: &[(usize, &[f64])]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                layer: 0,
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        self.check_scales(scales)?;
        let mut z = x.to_vec();
        let mut scaled = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = match scales.iter().find(|(idx, _)| *idx == i) {
                Some((_, s)) => {
                    scaled.clear();
                    scaled.extend(z.iter().zip(s.iter()).map(|(a, b)| b * a));
                    &scaled
                }
                None => &z,
            };
            let mut pre = vec![0.0; layer.output_dim()];
            layer.affine(input, &mut pre);
            let mut post = vec![0.0; layer.output_dim()];
            layer.activation.apply(&pre, &mut post);
            z = post;
        }
        Ok(z)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.forward_scaled(x, &[])
    }

    /// Forward pass where the input of each listed layer is multiplied
    /// element-wise by the given scale vector before the affine map.
    pub fn forward_scaled(&self, x: &[f64], scales: &[(usize, &[f64])]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                layer: 0,
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        self.check_scales(scales)?;
        let depth = self.layers.len();
        let mut activations = Vec::with_capacity(depth + 1);
        let mut pre_acts = Vec::with_capacity(depth);
        let mut layer_scales = vec![None; depth];
        activations.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = &activations[i];
            let mut pre = vec![0.0; layer.output_dim()];
            match scales.iter().find(|(idx, _)| *idx == i) {
                Some((_, s)) => {
                    let scaled: Vec<f64> = z.iter().zip(s.iter()).map(|(a, b)| b * a).collect();
                    layer.affine(&scaled, &mut pre);
                    layer_scales[i] = Some(s.to_vec());
                }
                None => layer.affine(z, &mut pre),
            }
            let mut post = vec![0.0; layer.output_dim()];
            layer.activation.apply(&pre, &mut post);
            pre_acts.push(pre);
            activations.push(post);
        }
        let output = activations[depth].clone();
        Ok((
            output,
            ForwardCache {
                fingerprint: self.fingerprint(),
                activations,
                pre: pre_acts,
                scales: layer_scales,
            },
        ))
    }

    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Backward> {
        let mut tape = GradTape::zeros_for(self);
        let inputs = self.backward_into(cache, upstream, &mut tape)?;
        Ok(Backward { tape, inputs })
    }

    /// Accumulates parameter gradients into `tape` and returns the gradients
    /// with respect to the network input and to every scale vector used.
    pub fn backward_into(&self, cache: &ForwardCache, upstream: &[f64], tape: &mut GradTape) -> Result<InputGrads> {
        if cache.fingerprint.shapes != self.fingerprint().shapes {
            return Err(Error::StaleCache("layer shapes differ"));
        }
        if cache.fingerprint.version != self.version {
            return Err(Error::StaleCache("parameters changed since the forward pass"));
        }
        if !tape.is_congruent(self) {
            return Err(Error::Shape("gradient tape is not congruent with the network".into()));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                layer: self.layers.len() - 1,
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let mut grad = upstream.to_vec();
        let mut scale_grads = Vec::new();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let mut g_pre = vec![0.0; layer.output_dim()];
            layer
                .activation
                .backward(&cache.pre[i], &cache.activations[i + 1], &grad, &mut g_pre);
            let z = &cache.activations[i];
            let scale = cache.scales[i].as_deref();
            let lg = &mut tape.layers[i];
            let cols = layer.input_dim();
            for (r, &g) in g_pre.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &mut lg.weight.data[r * cols..(r + 1) * cols];
                match scale {
                    Some(s) => {
                        for ((w, &zi), &si) in row.iter_mut().zip(z).zip(s) {
                            *w += g * (si * zi);
                        }
                    }
                    None => {
                        for (w, &zi) in row.iter_mut().zip(z) {
                            *w += g * zi;
                        }
                    }
                }
                lg.bias[r] += g;
            }
            let mut g_in = vec![0.0; cols];
            for (r, &g) in g_pre.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (gi, &w) in g_in.iter_mut().zip(layer.weight.row(r)) {
                    *gi += w * g;
                }
            }
            if let Some(s) = scale {
                scale_grads.push((i, g_in.iter().zip(z).map(|(g, zi)| g * zi).collect()));
                for (gi, si) in g_in.iter_mut().zip(s) {
                    *gi *= si;
                }
            }
            grad = g_in;
        }
        scale_grads.reverse();
        Ok(InputGrads {
            input: grad,
            scales: scale_grads,
        })
    }
}

/// Per-layer activations retained by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    fingerprint: Fingerprint,
    /// `z_0 .. z_L`; `z_0` is the network input, `z_L` the output.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    scales: Vec<Option<Vec<f64>>>,
}

impl ForwardCache {
    pub fn layer_input(&self, layer: usize) -> &[f64] {
        &self.activations[layer]
    }

    pub fn pre_activation(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }

    pub fn output(&self) -> &[f64] {
        &self.activations[self.activations.len() - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputGrads {
    pub input: Vec<f64>,
    /// `(layer index, d loss / d scale)` in ascending layer order.
    pub scales: Vec<(usize, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct Backward {
    pub tape: GradTape,
    pub inputs: InputGrads,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Gradient buffers shaped like a network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradTape {
    layers: Vec<LayerGrad>,
}

impl GradTape {
    pub fn zeros_for(net: &DenseNet) -> Self {
        GradTape {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.output_dim(), l.input_dim()),
                    bias: vec![0.0; l.output_dim()],
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerGrad] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerGrad] {
        &mut self.layers
    }

    pub fn is_congruent(&self, net: &DenseNet) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                g.weight.rows == l.output_dim() && g.weight.cols == l.input_dim() && g.bias.len() == l.output_dim()
            })
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.weight.data.iter_mut().for_each(|v| *v = 0.0);
            l.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight.data.iter_mut().for_each(|v| *v *= factor);
            l.bias.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &GradTape) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape("gradient tapes have different depths".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weight.data.len() != b.weight.data.len() || a.bias.len() != b.bias.len() {
                return Err(Error::Shape("gradient tapes have different layer shapes".into()));
            }
            a.weight.data.iter_mut().zip(&b.weight.data).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    /// Same ordering as [`DenseNet::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weight.data);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if !l.weight.data.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { layer: i });
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.data.iter().chain(&l.bias).all(|&v| v == 0.0))
    }
}
