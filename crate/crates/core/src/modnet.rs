//! Key-modulated policies.
//!
//! A [`KeyedPolicy`] keeps the base network's architecture untouched. Each
//! attached [`KeyEncoder`] maps key features to a vector `δ ∈ (-1, 1)^d` that
//! scales the input of one base layer before its affine map:
//! `z_{i+1} = f(W_i diag(δ_i) z_i + b_i)`. The null key skips the encoders
//! entirely, so its forward pass is the base forward pass bit for bit.

use crate::autograd::{central_difference, max_relative_error, Activation, DenseNet, Example, ForwardCache, GradTape, InitScheme, LayerSpec, Optimizer, OptimizerKind};
use crate::keyspace::{key_to_features, Key};
use crate::{Error, Result};

/// A model whose output depends on an input vector and a key.
pub trait KeyConditioned {
    /// Width of the state/feature input (the key is not counted).
    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    fn key_len(&self) -> usize;

    fn predict_many(&self, key: &Key, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;

    fn predict(&self, x: &[f64], key: &Key) -> Result<Vec<f64>> {
        let mut out = self.predict_many(key, &[x.to_vec()])?;
        Ok(out.pop().expect("one output per input"))
    }

    /// Trainable networks, in a fixed order shared with [`ModelGrads`].
    fn nets(&self) -> Vec<&DenseNet>;

    fn nets_mut(&mut self) -> Vec<&mut DenseNet>;

    fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.param_count()).sum()
    }

    fn zero_grads(&self) -> ModelGrads {
        ModelGrads(self.nets().into_iter().map(GradTape::zeros_for).collect())
    }

    /// Runs every input under `key` and accumulates the gradient of
    /// `Σ loss(i)` into `grads`. `upstream(i, output)` returns
    /// `d loss(i) / d output`.
    fn accumulate<X, F>(&self, key: &Key, xs: &[X], grads: &mut ModelGrads, upstream: F) -> Result<()>
    where
        X: AsRef<[f64]>,
        F: FnMut(usize, &[f64]) -> Result<Vec<f64>>;
}

/// Gradient buffers aligned with [`KeyConditioned::nets`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads(pub Vec<GradTape>);

impl ModelGrads {
    pub fn add_assign(&mut self, other: &ModelGrads) -> Result<()> {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|t| t.scale(factor));
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(GradTape::flat).collect()
    }
}

/// One optimizer per trainable network.
#[derive(Clone, Debug)]
pub struct ModelOptimizer {
    optimizers: Vec<Optimizer>,
    frozen: Vec<bool>,
}

impl ModelOptimizer {
    pub fn new<M: KeyConditioned>(model: &M, kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        let n = model.nets().len();
        Ok(ModelOptimizer {
            optimizers: (0..n).map(|_| Optimizer::new(kind, learning_rate)).collect::<Result<_>>()?,
            frozen: vec![false; n],
        })
    }

    /// Replaces the optimizer of network `index` with a fresh one at `learning_rate`.
    pub fn set_learning_rate(&mut self, index: usize, kind: OptimizerKind, learning_rate: f64) -> Result<()> {
        if let Some(opt) = self.optimizers.get_mut(index) {
            *opt = Optimizer::new(kind, learning_rate)?;
        }
        Ok(())
    }

    /// Excludes network `index` from updates.
    pub fn freeze(&mut self, index: usize) {
        if let Some(f) = self.frozen.get_mut(index) {
            *f = true;
        }
    }

    pub fn step<M: KeyConditioned>(&mut self, model: &mut M, grads: &ModelGrads) -> Result<()> {
        for (i, ((net, opt), tape)) in model
            .nets_mut()
            .into_iter()
            .zip(&mut self.optimizers)
            .zip(&grads.0)
            .enumerate()
        {
            if !self.frozen[i] {
                opt.step(net, tape)?;
            }
        }
        Ok(())
    }
}

/// Maps a key to the modulation vector of one base layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyEncoder {
    net: DenseNet,
    layer_index: usize,
}

impl KeyEncoder {
    pub fn new(net: DenseNet, layer_index: usize) -> Result<Self> {
        let last = &net.layers()[net.depth() - 1];
        if last.activation() != Activation::Tanh {
            return Err(Error::Architecture("key encoders must end in tanh".into()));
        }
        Ok(KeyEncoder { net, layer_index })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn encode(&self, key: &Key) -> Result<Vec<f64>> {
        self.net.predict(&key_to_features(key)?)
    }
}

/// Modulation vectors for one key, with the encoder caches needed to
/// backpropagate into the encoders. Empty for the null key.
#[derive(Clone, Debug)]
pub struct Modulation {
    deltas: Vec<(usize, Vec<f64>)>,
    caches: Vec<ForwardCache>,
}

impl Modulation {
    pub fn deltas(&self) -> &[(usize, Vec<f64>)] {
        &self.deltas
    }

    pub fn is_identity(&self) -> bool {
        self.deltas.is_empty()
    }

    fn scales(&self) -> Vec<(usize, &[f64])> {
        self.deltas.iter().map(|(i, d)| (*i, d.as_slice())).collect()
    }
}

#[derive(Clone, Debug)]
pub struct PolicyCache {
    base: ForwardCache,
    modulation: Modulation,
}

impl PolicyCache {
    pub fn modulation(&self) -> &Modulation {
        &self.modulation
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGrads {
    pub base: GradTape,
    pub encoders: Vec<GradTape>,
    pub input: Vec<f64>,
}

/// Base network plus key encoders attached at selected layers.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyedPolicy {
    base: DenseNet,
    encoders: Vec<KeyEncoder>,
    key_len: usize,
    reference: Option<DenseNet>,
}

/// Middle layer of a base network: the default modulation site.
pub fn default_modulation_site(base: &DenseNet) -> usize {
    (base.depth() / 2).max(1)
}

impl KeyedPolicy {
    /// Wraps a base network without any encoders; every key behaves as null.
    pub fn plain(base: DenseNet) -> Self {
        KeyedPolicy {
            base,
            encoders: Vec::new(),
            key_len: 0,
            reference: None,
        }
    }

    /// Attaches freshly initialised encoders (hidden layers `encoder_hidden`,
    /// tanh throughout) at each listed base layer. The base weights are kept
    /// as given and a frozen copy is retained as the reference policy.
    pub fn attach(
        base: DenseNet,
        layer_indices: &[usize],
        encoder_hidden: &[usize],
        key_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if key_len == 0 {
            return Err(Error::InvalidParameter("key length must be positive".into()));
        }
        let mut indices = layer_indices.to_vec();
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("duplicate modulation site".into()));
        }
        let mut encoders = Vec::with_capacity(indices.len());
        for &index in &indices {
            if index == 0 || index >= base.depth() {
                return Err(Error::InvalidLayerIndex {
                    index,
                    layers: base.depth(),
                });
            }
            let width = base.layers()[index].input_dim();
            let mut dims = vec![key_len];
            dims.extend_from_slice(encoder_hidden);
            dims.push(width);
            let specs: Vec<LayerSpec> = dims
                .windows(2)
                .map(|w| LayerSpec {
                    input: w[0],
                    output: w[1],
                    activation: Activation::Tanh,
                })
                .collect();
            let net = DenseNet::init(&specs, seed.wrapping_add(index as u64), InitScheme::ZerosBias)?;
            encoders.push(KeyEncoder::new(net, index)?);
        }
        Ok(KeyedPolicy {
            reference: Some(base.clone()),
            base,
            encoders,
            key_len,
        })
    }

    /// Reassembles a policy from parts, validating encoder shapes.
    pub fn from_parts(base: DenseNet, encoders: Vec<KeyEncoder>, key_len: usize) -> Result<Self> {
        let mut prev = None;
        for e in &encoders {
            let index = e.layer_index;
            if index == 0 || index >= base.depth() || prev.is_some_and(|p| p >= index) {
                return Err(Error::InvalidLayerIndex {
                    index,
                    layers: base.depth(),
                });
            }
            prev = Some(index);
            if e.net.input_dim() != key_len {
                return Err(Error::DimensionMismatch {
                    layer: index,
                    expected: key_len,
                    got: e.net.input_dim(),
                });
            }
            if e.net.output_dim() != base.layers()[index].input_dim() {
                return Err(Error::DimensionMismatch {
                    layer: index,
                    expected: base.layers()[index].input_dim(),
                    got: e.net.output_dim(),
                });
            }
        }
        Ok(KeyedPolicy {
            base,
            encoders,
            key_len,
            reference: None,
        })
    }

    pub fn base(&self) -> &DenseNet {
        &self.base
    }

    pub fn encoders(&self) -> &[KeyEncoder] {
        &self.encoders
    }

    pub fn reference(&self) -> Option<&DenseNet> {
        self.reference.as_ref()
    }

    pub fn set_reference(&mut self, reference: Option<DenseNet>) {
        self.reference = reference;
    }

    pub fn modulated_layers(&self) -> Vec<usize> {
        self.encoders.iter().map(|e| e.layer_index).collect()
    }

    pub fn modulation(&self, key: &Key) -> Result<Modulation> {
        let mut m = Modulation {
            deltas: Vec::with_capacity(self.encoders.len()),
            caches: Vec::with_capacity(self.encoders.len()),
        };
        if key.is_null() || self.encoders.is_empty() {
            return Ok(m);
        }
        if key.len() != self.key_len {
            return Err(Error::KeyLength {
                left: self.key_len,
                right: key.len(),
            });
        }
        let features = key_to_features(key)?;
        for e in &self.encoders {
            let (delta, cache) = e.net.forward(&features)?;
            m.deltas.push((e.layer_index, delta));
            m.caches.push(cache);
        }
        Ok(m)
    }

    pub fn forward_with(&self, x: &[f64], modulation: &Modulation) -> Result<(Vec<f64>, ForwardCache)> {
        self.base.forward_scaled(x, &modulation.scales())
    }

    pub fn predict_with(&self, x: &[f64], modulation: &Modulation) -> Result<Vec<f64>> {
        self.base.predict_scaled(x, &modulation.scales())
    }

    pub fn modulated_forward(&self, x: &[f64], key: &Key) -> Result<(Vec<f64>, PolicyCache)> {
        let modulation = self.modulation(key)?;
        let (out, base) = self.forward_with(x, &modulation)?;
        Ok((out, PolicyCache { base, modulation }))
    }

    pub fn modulated_backward(&self, cache: &PolicyCache, upstream: &[f64]) -> Result<PolicyGrads> {
        let mut base = GradTape::zeros_for(&self.base);
        let mut encoders: Vec<GradTape> = self.encoders.iter().map(|e| GradTape::zeros_for(&e.net)).collect();
        let inputs = self.base.backward_into(&cache.base, upstream, &mut base)?;
        self.encoder_backward(&cache.modulation, &inputs.scales, &mut encoders)?;
        Ok(PolicyGrads {
            base,
            encoders,
            input: inputs.input,
        })
    }

    /// Pushes `d loss / d δ` for each modulated layer through the encoders.
    fn encoder_backward(
        &self,
        modulation: &Modulation,
        delta_grads: &[(usize, Vec<f64>)],
        tapes: &mut [GradTape],
    ) -> Result<()> {
        if modulation.is_identity() {
            return Ok(());
        }
        if modulation.caches.len() != self.encoders.len() || delta_grads.len() != self.encoders.len() {
            return Err(Error::StaleCache("modulation does not match the attached encoders"));
        }
        for (((e, cache), (index, g)), tape) in self
            .encoders
            .iter()
            .zip(&modulation.caches)
            .zip(delta_grads)
            .zip(tapes.iter_mut())
        {
            if *index != e.layer_index {
                return Err(Error::StaleCache("modulated layer order changed"));
            }
            e.net.backward_into(cache, g, tape)?;
        }
        Ok(())
    }

    /// Mean L2 distance between this policy under `key` and `reference`.
    pub fn behavioral_distance(&self, reference: &DenseNet, probes: &[Vec<f64>], key: &Key) -> Result<f64> {
        behavioral_distance(self, reference, probes, key)
    }
}

impl KeyConditioned for KeyedPolicy {
    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.base.output_dim()
    }

    fn key_len(&self) -> usize {
        self.key_len
    }

    fn predict_many(&self, key: &Key, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let m = self.modulation(key)?;
        xs.iter().map(|x| self.predict_with(x, &m)).collect()
    }

    fn nets(&self) -> Vec<&DenseNet> {
        std::iter::once(&self.base).chain(self.encoders.iter().map(|e| &e.net)).collect()
    }

    fn nets_mut(&mut self) -> Vec<&mut DenseNet> {
        std::iter::once(&mut self.base)
            .chain(self.encoders.iter_mut().map(|e| &mut e.net))
            .collect()
    }

    fn accumulate<X, F>(&self, key: &Key, xs: &[X], grads: &mut ModelGrads, mut upstream: F) -> Result<()>
    where
        X: AsRef<[f64]>,
        F: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
    {
        let m = self.modulation(key)?;
        let (base_tape, encoder_tapes) = grads
            .0
            .split_first_mut()
            .ok_or_else(|| Error::Shape("empty gradient set".into()))?;
        let mut delta_sums: Vec<(usize, Vec<f64>)> = m.deltas.iter().map(|(i, d)| (*i, vec![0.0; d.len()])).collect();
        for (i, x) in xs.iter().enumerate() {
            let (out, cache) = self.forward_with(x.as_ref(), &m)?;
            let g = upstream(i, &out)?;
            let inputs = self.base.backward_into(&cache, &g, base_tape)?;
            for ((_, acc), (_, dg)) in delta_sums.iter_mut().zip(&inputs.scales) {
                acc.iter_mut().zip(dg).for_each(|(a, b)| *a += b);
            }
        }
        if !xs.is_empty() {
            self.encoder_backward(&m, &delta_sums, encoder_tapes)?;
        }
        Ok(())
    }
}

/// Largest relative error between the analytic gradient of the summed loss on
/// `batch` (over every network of `model`) and central differences with step `h`.
pub fn keyed_gradient_error<M: KeyConditioned + Clone>(model: &M, key: &Key, batch: &[Example], h: f64) -> Result<f64> {
    let mut grads = model.zero_grads();
    model.accumulate(key, batch, &mut grads, |i, out| Ok(batch[i].target.loss(out)?.1))?;
    let params: Vec<f64> = model.nets().iter().flat_map(|n| n.params()).collect();
    let mut probe = model.clone();
    let numeric = central_difference(&params, h, |flat| {
        let mut offset = 0;
        for net in probe.nets_mut() {
            let n = net.param_count();
            net.set_params(&flat[offset..offset + n])?;
            offset += n;
        }
        let outs = probe.predict_many(key, &batch.iter().map(|e| e.input.clone()).collect::<Vec<_>>())?;
        outs.iter().zip(batch).map(|(o, e)| Ok(e.target.loss(o)?.0)).sum()
    })?;
    Ok(max_relative_error(&grads.flat(), &numeric))
}

pub fn behavioral_distance<M: KeyConditioned>(model: &M, reference: &DenseNet, probes: &[Vec<f64>], key: &Key) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::EmptyProbes);
    }
    if reference.input_dim() != model.input_dim() || reference.output_dim() != model.output_dim() {
        return Err(Error::Shape("reference and policy disagree on input/output widths".into()));
    }
    let outs = model.predict_many(key, probes)?;
    let mut total = 0.0;
    for (x, y) in probes.iter().zip(&outs) {
        let r = reference.predict(x)?;
        total += y.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    }
    Ok(total / probes.len() as f64)
}
