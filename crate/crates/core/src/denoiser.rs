//! The ε-prediction network, its low-rank adapters and the student wrapper
//! used by the training loops.

use std::borrow::Cow;
use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{from_f64, slice_of, slice_of_mut, to_f64, Mlp, MlpCache, Parameters, Scalar};
use crate::optim::{ema_update, Optimizer};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::solver::EpsModel;

/// Class condition; `None` is the null token used for unconditional passes.
pub type Cond = Option<usize>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub total_timesteps: usize,
    pub num_classes: usize,
    pub time_features: usize,
    pub cond_dim: usize,
    pub guidance_features: usize,
    pub hidden: Vec<usize>,
    /// Adds `σ(t)·x` to the network output, so the head only models the
    /// residual of the Gaussian-prior ε.
    #[serde(default = "default_true")]
    pub skip: bool,
    #[serde(default)]
    pub schedule: ScheduleKind,
}

fn default_true() -> bool {
    true
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            total_timesteps: 1000,
            num_classes: 8,
            time_features: 16,
            cond_dim: 8,
            guidance_features: 4,
            hidden: vec![128, 128, 128],
            skip: true,
            schedule: ScheduleKind::Linear,
        }
    }
}

impl DenoiserConfig {
    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_features + self.cond_dim + self.guidance_features
    }

    fn cond_offset(&self) -> usize {
        self.data_dim + self.time_features
    }

    fn guidance_offset(&self) -> usize {
        self.cond_offset() + self.cond_dim
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(&self.hidden);
        sizes.push(self.data_dim);
        sizes
    }

    fn validate(&self) -> Result<()> {
        if self.time_features % 2 != 0 || self.guidance_features % 2 != 0 {
            return Err(invalid("sinusoidal feature counts must be even"));
        }
        if self.data_dim == 0 || self.total_timesteps == 0 {
            return Err(invalid("data dimension and timestep count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Teacher,
    Fake,
    Ema,
}

/// Sinusoidal features of `t / T` at frequencies `(π/2)·2^i`.
pub fn time_features(t: usize, total: usize, count: usize, out: &mut [f64]) {
    let u = t as f64 / total as f64;
    for i in 0..count / 2 {
        let phase = u * 0.5 * PI * (1u64 << i) as f64;
        out[2 * i] = phase.sin();
        out[2 * i + 1] = phase.cos();
    }
}

fn guidance_features(omega: f64, count: usize, out: &mut [f64]) {
    for i in 0..count / 2 {
        let phase = omega * PI / 8.0 * (1u64 << i) as f64;
        out[2 * i] = phase.sin();
        out[2 * i + 1] = phase.cos();
    }
}

/// Weights of one ε-prediction network.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<F = f32> {
    pub config: DenoiserConfig,
    pub role: Role,
    /// Whether ω is fed as an input feature (distilled students only).
    pub guidance_input: bool,
    pub net: Mlp<F>,
    /// `(C + 1) × cond_dim`; the last row is the null token.
    pub cond_embedding: Array2<F>,
}

impl<F: Scalar> DenoiserParams<F> {
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, role: Role, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut net = Mlp::init(&config.layer_sizes(), rng);
        // Guidance columns start at zero so a student initialized from a
        // teacher reproduces it exactly.
        let g0 = config.guidance_offset();
        net.layers[0]
            .weight
            .slice_mut(s![.., g0..g0 + config.guidance_features])
            .fill(F::zero());
        let cond_embedding = Array2::from_shape_simple_fn((config.num_classes + 1, config.cond_dim), || {
            F::of(rng.sample::<f64, _>(StandardNormal))
        });
        Ok(Self { config, role, guidance_input: false, net, cond_embedding })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            role: self.role,
            guidance_input: self.guidance_input,
            net: self.net.zeros_like(),
            cond_embedding: Array2::zeros(self.cond_embedding.raw_dim()),
        }
    }

    pub fn cast<G: Scalar>(&self) -> DenoiserParams<G> {
        DenoiserParams {
            config: self.config.clone(),
            role: self.role,
            guidance_input: self.guidance_input,
            net: self.net.cast(),
            cond_embedding: self.cond_embedding.mapv(|v| G::of(v.as_f64())),
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Builds the network input `[x, time features, condition embedding, ω features]`.
    pub fn features(&self, x: ArrayView2<f64>, t: &[usize], cond: &[Cond], omega: &[f64]) -> Result<Array2<F>> {
        let cfg = &self.config;
        let batch = x.nrows();
        if x.ncols() != cfg.data_dim || t.len() != batch || cond.len() != batch || omega.len() != batch {
            return Err(Error::ShapeMismatch(format!(
                "batch of {batch} points with {} t, {} conditions, {} guidance scales",
                t.len(),
                cond.len(),
                omega.len()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("denoiser input".into()));
        }
        let mut feats = Array2::<F>::zeros((batch, cfg.input_dim()));
        let mut tf = vec![0.0; cfg.time_features];
        let mut gf = vec![0.0; cfg.guidance_features];
        for b in 0..batch {
            if t[b] > cfg.total_timesteps {
                return Err(invalid(format!("timestep {} outside [0, {}]", t[b], cfg.total_timesteps)));
            }
            let row_idx = self.cond_row(cond[b])?;
            let mut row = feats.row_mut(b);
            for d in 0..cfg.data_dim {
                row[d] = F::of(x[[b, d]]);
            }
            time_features(t[b], cfg.total_timesteps, cfg.time_features, &mut tf);
            for (i, v) in tf.iter().enumerate() {
                row[cfg.data_dim + i] = F::of(*v);
            }
            let emb = self.cond_embedding.row(row_idx);
            for i in 0..cfg.cond_dim {
                row[cfg.cond_offset() + i] = emb[i];
            }
            if self.guidance_input {
                guidance_features(omega[b], cfg.guidance_features, &mut gf);
                for (i, v) in gf.iter().enumerate() {
                    row[cfg.guidance_offset() + i] = F::of(*v);
                }
            }
        }
        Ok(feats)
    }

    fn cond_row(&self, c: Cond) -> Result<usize> {
        match c {
            None => Ok(self.config.num_classes),
            Some(i) if i < self.config.num_classes => Ok(i),
            Some(i) => Err(invalid(format!(
                "condition {i} outside 0..{}",
                self.config.num_classes
            ))),
        }
    }

    /// Scatters the condition-embedding columns of an input gradient back to
    /// embedding rows.
    fn embedding_grad(&self, input_grad: &Array2<F>, cond: &[Cond]) -> Array2<F> {
        let mut grad = Array2::zeros(self.cond_embedding.raw_dim());
        let off = self.config.cond_offset();
        for (b, c) in cond.iter().enumerate() {
            let row = self.cond_row(*c).expect("validated in forward");
            let src = input_grad.slice(s![b, off..off + self.config.cond_dim]);
            let mut dst = grad.row_mut(row);
            dst += &src;
        }
        grad
    }

    /// Adds the `σ(t)·x` skip term to a network output.
    fn add_skip(&self, out: &mut Array2<f64>, x: ArrayView2<f64>, t: &[usize]) -> Result<()> {
        if !self.config.skip {
            return Ok(());
        }
        let schedule = NoiseSchedule::new(self.config.total_timesteps, self.config.schedule)?;
        for (b, mut row) in out.rows_mut().into_iter().enumerate() {
            let s = schedule.sigma(t[b]);
            for d in 0..row.len() {
                row[d] += s * x[[b, d]];
            }
        }
        Ok(())
    }
}

impl<F: Scalar> Parameters<F> for DenoiserParams<F> {
    fn tensors(&self) -> Vec<&[F]> {
        let mut t = self.net.tensors();
        t.push(slice_of(&self.cond_embedding));
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut t = self.net.tensors_mut();
        t.push(slice_of_mut(&mut self.cond_embedding));
        t
    }
}

/// Low-rank factors for one dense layer: `ΔW = (α / r) · B · A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactor<F> {
    /// `r × in`
    pub a: Array2<F>,
    /// `out × r`
    pub b: Array2<F>,
}

impl<F: Scalar> LoraFactor<F> {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }
}

/// Low-rank adapter covering every dense layer of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<F = f32> {
    pub rank: usize,
    pub alpha: f64,
    pub factors: Vec<LoraFactor<F>>,
}

impl<F: Scalar> LoraAdapter<F> {
    /// New adapter with `A` uniform in `±1/√in` and `B = 0`, so the adapted
    /// network starts out identical to the base. Per-layer rank is clipped to
    /// `min(in, out)`.
    pub fn new<R: Rng + ?Sized>(net: &Mlp<F>, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(invalid("adapter rank must be >= 1"));
        }
        let factors = net
            .layers
            .iter()
            .map(|l| {
                let r = rank.min(l.inputs()).min(l.outputs());
                let bound = 1.0 / (l.inputs() as f64).sqrt();
                LoraFactor {
                    a: Array2::from_shape_simple_fn((r, l.inputs()), || F::of(rng.random_range(-bound..bound))),
                    b: Array2::zeros((l.outputs(), r)),
                }
            })
            .collect();
        Ok(Self { rank, alpha, factors })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            rank: self.rank,
            alpha: self.alpha,
            factors: self
                .factors
                .iter()
                .map(|f| LoraFactor { a: Array2::zeros(f.a.raw_dim()), b: Array2::zeros(f.b.raw_dim()) })
                .collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> LoraAdapter<G> {
        LoraAdapter {
            rank: self.rank,
            alpha: self.alpha,
            factors: self
                .factors
                .iter()
                .map(|f| LoraFactor {
                    a: f.a.mapv(|v| G::of(v.as_f64())),
                    b: f.b.mapv(|v| G::of(v.as_f64())),
                })
                .collect(),
        }
    }

    fn scale_of(&self, factor: &LoraFactor<F>) -> F {
        F::of(self.alpha / factor.rank() as f64)
    }

    pub fn check_compatible(&self, net: &Mlp<F>) -> Result<()> {
        if self.factors.len() != net.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "adapter has {} factors for {} layers",
                self.factors.len(),
                net.layers.len()
            )));
        }
        for (i, (f, l)) in self.factors.iter().zip(&net.layers).enumerate() {
            let r = f.rank();
            if r == 0 || r > l.inputs().min(l.outputs()) {
                return Err(Error::ShapeMismatch(format!("layer {i}: rank {r} out of range")));
            }
            if f.a.ncols() != l.inputs() || f.b.nrows() != l.outputs() || f.b.ncols() != r {
                return Err(Error::ShapeMismatch(format!("layer {i}: factor shapes do not match weight")));
            }
        }
        Ok(())
    }

    /// Base network with `W + (α/r)·B·A` folded into every layer.
    pub fn effective(&self, base: &Mlp<F>) -> Result<Mlp<F>> {
        self.check_compatible(base)?;
        let mut net = base.clone();
        for (layer, f) in net.layers.iter_mut().zip(&self.factors) {
            let delta = f.b.dot(&f.a) * self.scale_of(f);
            layer.weight += &delta;
        }
        Ok(net)
    }

    /// Maps `∂L/∂W_eff` for every layer onto the factors.
    pub fn project(&self, weight_grads: &Mlp<F>) -> Self {
        let factors = self
            .factors
            .iter()
            .zip(&weight_grads.layers)
            .map(|(f, g)| {
                let s = self.scale_of(f);
                LoraFactor { a: f.b.t().dot(&g.weight) * s, b: g.weight.dot(&f.a.t()) * s }
            })
            .collect();
        Self { rank: self.rank, alpha: self.alpha, factors }
    }

    /// The same adapter with its delta multiplied by `lambda`.
    pub fn scaled(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for f in &mut out.factors {
            f.b.mapv_inplace(|v| v * F::of(lambda));
        }
        out
    }

    /// One adapter whose delta is `Σ w_i ΔW_i`, built by stacking factors.
    pub fn blend(parts: &[(&LoraAdapter<F>, f64)]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("blend of zero adapters"))?;
        let layers = first.0.factors.len();
        if parts.iter().any(|(a, _)| a.factors.len() != layers) {
            return Err(Error::ShapeMismatch("blended adapters cover different layer counts".into()));
        }
        let mut factors = Vec::with_capacity(layers);
        for l in 0..layers {
            let total_rank: usize = parts.iter().map(|(a, _)| a.factors[l].rank()).sum();
            let (inputs, outputs) = (first.0.factors[l].a.ncols(), first.0.factors[l].b.nrows());
            if total_rank > inputs.min(outputs) {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l}: blended rank {total_rank} exceeds min(in, out) = {}",
                    inputs.min(outputs)
                )));
            }
            let mut a = Array2::zeros((total_rank, inputs));
            let mut b = Array2::zeros((outputs, total_rank));
            let mut row = 0;
            for (adapter, w) in parts {
                let f = &adapter.factors[l];
                let r = f.rank();
                // The blend uses α = 1, i.e. scale 1 / total_rank, so each
                // block of B carries its own α_i·w_i·total_rank / r_i.
                let s = adapter.alpha / r as f64 * w * total_rank as f64;
                a.slice_mut(s![row..row + r, ..]).assign(&f.a);
                b.slice_mut(s![.., row..row + r]).assign(&f.b.mapv(|v| v * F::of(s)));
                row += r;
            }
            factors.push(LoraFactor { a, b });
        }
        let rank = factors.iter().map(|f| f.rank()).max().unwrap_or(1);
        Ok(Self { rank, alpha: 1.0, factors })
    }
}

impl<F: Scalar> Parameters<F> for LoraAdapter<F> {
    fn tensors(&self) -> Vec<&[F]> {
        self.factors
            .iter()
            .flat_map(|f| [slice_of(&f.a), slice_of(&f.b)])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        self.factors
            .iter_mut()
            .flat_map(|f| {
                let LoraFactor { a, b } = f;
                [slice_of_mut(a), slice_of_mut(b)]
            })
            .collect()
    }
}

/// Folds an adapter into the base weights.
pub fn lora_merge<F: Scalar>(params: &DenoiserParams<F>, adapter: &LoraAdapter<F>) -> Result<DenoiserParams<F>> {
    let mut merged = params.clone();
    merged.net = adapter.effective(&params.net)?;
    Ok(merged)
}

/// Read-only evaluator over base weights plus an optional adapter.
#[derive(Debug, Clone)]
pub struct Denoiser<'a, F: Scalar = f32> {
    params: &'a DenoiserParams<F>,
    net: Cow<'a, Mlp<F>>,
}

impl<'a, F: Scalar> Denoiser<'a, F> {
    pub fn new(params: &'a DenoiserParams<F>, adapter: Option<&LoraAdapter<F>>) -> Result<Self> {
        let net = match adapter {
            Some(a) => Cow::Owned(a.effective(&params.net)?),
            None => Cow::Borrowed(&params.net),
        };
        Ok(Self { params, net })
    }

    pub fn params(&self) -> &DenoiserParams<F> {
        self.params
    }

    pub fn forward(&self, x: ArrayView2<f64>, t: &[usize], cond: &[Cond], omega: &[f64]) -> Result<Array2<f64>> {
        let feats = self.params.features(x, t, cond, omega)?;
        let mut out = to_f64(&self.net.forward(feats.view()));
        self.params.add_skip(&mut out, x, t)?;
        Ok(out)
    }
}

impl<F: Scalar> EpsModel for Denoiser<'_, F> {
    fn predict_eps(&self, x: ArrayView2<f64>, t: &[usize], cond: &[Cond], omega: &[f64]) -> Result<Array2<f64>> {
        self.forward(x, t, cond, omega)
    }
}

impl<F: Scalar> EpsModel for DenoiserParams<F> {
    fn predict_eps(&self, x: ArrayView2<f64>, t: &[usize], cond: &[Cond], omega: &[f64]) -> Result<Array2<f64>> {
        Denoiser::new(self, None)?.forward(x, t, cond, omega)
    }
}

/// Gradient accumulator matching the trained parameter set.
#[derive(Debug, Clone, PartialEq)]
pub enum GradientBuffer<F: Scalar = f32> {
    Full(DenoiserParams<F>),
    Adapter(LoraAdapter<F>),
}

impl<F: Scalar> GradientBuffer<F> {
    pub fn is_all_zero(&self) -> bool {
        match self {
            Self::Full(p) => p.is_all_zero(),
            Self::Adapter(a) => a.is_all_zero(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        match self {
            Self::Full(p) => p.flatten(),
            Self::Adapter(a) => a.flatten(),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        match (self, other) {
            (Self::Full(a), Self::Full(b)) => a.add_scaled(b, F::of(scale)),
            (Self::Adapter(a), Self::Adapter(b)) => a.add_scaled(b, F::of(scale)),
            _ => return Err(Error::ShapeMismatch("mixing full and adapter gradients".into())),
        }
        Ok(())
    }
}

/// Forward pass kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Tape<F: Scalar = f32> {
    pub eps: Array2<f64>,
    cache: MlpCache<F>,
    cond: Vec<Cond>,
    effective: Option<Mlp<F>>,
}

/// Trainable denoiser: base weights plus an optional adapter. When an adapter
/// is present only the adapter is trained and the base stays frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Student<F: Scalar = f32> {
    pub base: DenoiserParams<F>,
    pub adapter: Option<LoraAdapter<F>>,
}

impl<F: Scalar> Student<F> {
    pub fn full(base: DenoiserParams<F>) -> Self {
        Self { base, adapter: None }
    }

    pub fn with_adapter(base: DenoiserParams<F>, adapter: LoraAdapter<F>) -> Result<Self> {
        adapter.check_compatible(&base.net)?;
        Ok(Self { base, adapter: Some(adapter) })
    }

    pub fn adapter_only(&self) -> bool {
        self.adapter.is_some()
    }

    pub fn cast<G: Scalar>(&self) -> Student<G> {
        Student { base: self.base.cast(), adapter: self.adapter.as_ref().map(|a| a.cast()) }
    }

    pub fn denoiser(&self) -> Result<Denoiser<'_, F>> {
        Denoiser::new(&self.base, self.adapter.as_ref())
    }

    /// Adapter folded into the base weights.
    pub fn merged(&self) -> Result<DenoiserParams<F>> {
        match &self.adapter {
            Some(a) => lora_merge(&self.base, a),
            None => Ok(self.base.clone()),
        }
    }

    pub fn forward_train(&self, x: ArrayView2<f64>, t: &[usize], cond: &[Cond], omega: &[f64]) -> Result<Tape<F>> {
        let effective = match &self.adapter {
            Some(a) => Some(a.effective(&self.base.net)?),
            None => None,
        };
        let net = effective.as_ref().unwrap_or(&self.base.net);
        let feats = self.base.features(x, t, cond, omega)?;
        let (out, cache) = net.forward_cached(feats.view());
        let mut eps = to_f64(&out);
        self.base.add_skip(&mut eps, x, t)?;
        Ok(Tape { eps, cache, cond: cond.to_vec(), effective })
    }

    /// Exact gradients of a scalar loss given `∂L/∂ε̂`.
    pub fn backward(&self, tape: &Tape<F>, grad_eps: ArrayView2<f64>) -> Result<GradientBuffer<F>> {
        if grad_eps.raw_dim() != tape.eps.raw_dim() {
            return Err(Error::ShapeMismatch(format!(
                "loss gradient {:?} vs outputs {:?}",
                grad_eps.shape(),
                tape.eps.shape()
            )));
        }
        let net = tape.effective.as_ref().unwrap_or(&self.base.net);
        let mut weight_grads = net.zeros_like();
        let g: Array2<F> = from_f64(&grad_eps.to_owned());
        let input_grad = net.backward(&tape.cache, g.view(), &mut weight_grads);
        Ok(match &self.adapter {
            Some(a) => GradientBuffer::Adapter(a.project(&weight_grads)),
            None => {
                let cond_embedding = self.base.embedding_grad(&input_grad, &tape.cond);
                GradientBuffer::Full(DenoiserParams {
                    config: self.base.config.clone(),
                    role: self.base.role,
                    guidance_input: self.base.guidance_input,
                    net: weight_grads,
                    cond_embedding,
                })
            }
        })
    }

    pub fn zero_grads(&self) -> GradientBuffer<F> {
        match &self.adapter {
            Some(a) => GradientBuffer::Adapter(a.zeros_like()),
            None => GradientBuffer::Full(self.base.zeros_like()),
        }
    }

    /// One optimizer step on the trainable parameter set.
    pub fn apply(&mut self, optimizer: &mut Optimizer, grads: &GradientBuffer<F>, lr: f64) -> Result<()> {
        match (&mut self.adapter, grads) {
            (Some(a), GradientBuffer::Adapter(g)) => optimizer.step(a, g, lr),
            (None, GradientBuffer::Full(g)) => optimizer.step(&mut self.base, g, lr),
            _ => Err(Error::ShapeMismatch("gradient buffer does not match training mode".into())),
        }
    }

    /// EMA of the trainable parameter set toward `source`.
    pub fn ema_toward(&mut self, source: &Student<F>, decay: f64) -> Result<()> {
        match (&mut self.adapter, &source.adapter) {
            (Some(a), Some(b)) => ema_update(a, b, decay),
            (None, None) => ema_update(&mut self.base, &source.base, decay),
            _ => Err(Error::ShapeMismatch("EMA shadow and student use different training modes".into())),
        }
    }

    /// Flattened trainable parameters.
    pub fn trainable_flat(&self) -> Vec<f64> {
        match &self.adapter {
            Some(a) => a.flatten(),
            None => self.base.flatten(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.base.is_finite() && self.adapter.as_ref().is_none_or(|a| a.is_finite())
    }
}

impl<F: Scalar> EpsModel for Student<F> {
    fn predict_eps(&self, x: ArrayView2<f64>, t: &[usize], cond: &[Cond], omega: &[f64]) -> Result<Array2<f64>> {
        self.denoiser()?.forward(x, t, cond, omega)
    }
}

/// `x̂_0 = (x_t − σ(t)·ε̂) / α(t)`; at `t = 0` returns `x_t`.
pub fn pred_x0(eps: ArrayView2<f64>, x_t: ArrayView2<f64>, t: &[usize], schedule: &NoiseSchedule) -> Result<Array2<f64>> {
    if eps.raw_dim() != x_t.raw_dim() || t.len() != x_t.nrows() {
        return Err(Error::ShapeMismatch("pred_x0 inputs".into()));
    }
    let mut out = x_t.to_owned();
    for (b, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        schedule.check_timestep(t[b])?;
        if t[b] == 0 {
            continue;
        }
        let (a, s) = (schedule.alpha(t[b]), schedule.sigma(t[b]));
        if a == 0.0 {
            return Err(invalid("α(t) = 0"));
        }
        for d in 0..row.len() {
            row[d] = (x_t[[b, d]] - s * eps[[b, d]]) / a;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, seeded};
    use crate::schedule::ScheduleKind;

    fn mini_config() -> DenoiserConfig {
        DenoiserConfig {
            data_dim: 2,
            total_timesteps: 1000,
            num_classes: 3,
            time_features: 4,
            cond_dim: 2,
            guidance_features: 2,
            hidden: vec![6, 5],
            skip: true,
            schedule: ScheduleKind::Linear,
        }
    }

    fn batch(rng: &mut crate::rng::SeededRng, n: usize) -> (Array2<f64>, Vec<usize>, Vec<Cond>, Vec<f64>) {
        let x = normal_matrix(rng, n, 2);
        let t = (0..n).map(|i| 100 + 137 * i).collect();
        let c = (0..n).map(|i| if i % 4 == 3 { None } else { Some(i % 3) }).collect();
        let w = (0..n).map(|i| 1.0 + 0.5 * i as f64).collect();
        (x, t, c, w)
    }

    #[test]
    fn zero_adapter_matches_base() {
        let mut rng = seeded(0);
        let base: DenoiserParams<f32> = DenoiserParams::init(DenoiserConfig::default(), Role::Student, &mut rng).unwrap();
        let adapter = LoraAdapter::new(&base.net, 8, 8.0, &mut rng).unwrap();
        let (x, t, c, w) = batch(&mut rng, 5);
        let plain = Denoiser::new(&base, None).unwrap().forward(x.view(), &t, &c, &w).unwrap();
        let adapted = Denoiser::new(&base, Some(&adapter)).unwrap().forward(x.view(), &t, &c, &w).unwrap();
        assert_eq!(plain, adapted);
        assert_eq!(lora_merge(&base, &adapter).unwrap(), base);
    }

    #[test]
    fn forward_is_deterministic_and_validates_input() {
        let mut rng = seeded(1);
        let base: DenoiserParams<f32> = DenoiserParams::init(mini_config(), Role::Teacher, &mut rng).unwrap();
        let (x, t, c, w) = batch(&mut rng, 4);
        let d = Denoiser::new(&base, None).unwrap();
        assert_eq!(d.forward(x.view(), &t, &c, &w).unwrap(), d.forward(x.view(), &t, &c, &w).unwrap());
        assert!(d.forward(x.view(), &t, &[Some(3), None, None, None], &w).is_err());
        let mut bad = x.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(d.forward(bad.view(), &t, &c, &w).is_err());
        assert!(d.forward(x.view(), &[0, 0, 0, 1001], &c, &w).is_err());
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let mut rng = seeded(2);
        let base: DenoiserParams<f64> = DenoiserParams::init(mini_config(), Role::Student, &mut rng).unwrap();
        let student = Student::full(base);
        let (x, t, c, w) = batch(&mut rng, 3);
        let tape = student.forward_train(x.view(), &t, &c, &w).unwrap();
        let dir = normal_matrix(&mut rng, 3, 2);
        for h in [1e-3, 5e-4] {
            let moved = student.predict_eps((&x + &(&dir * h)).view(), &t, &c, &w).unwrap();
            // Jacobian-vector product via the network input gradient.
            let net = &student.base.net;
            let feats = student.base.features(x.view(), &t, &c, &w).unwrap();
            let (_, cache) = net.forward_cached(feats.view());
            for out in 0..2 {
                let mut seed = Array2::zeros((3, 2));
                seed.column_mut(out).fill(1.0);
                let mut scratch = net.zeros_like();
                let gin = net.backward(&cache, seed.view(), &mut scratch);
                let schedule = NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap();
                for b in 0..3 {
                    let skip = schedule.sigma(t[b]) * dir[[b, out]];
                    let jvp = gin[[b, 0]] * dir[[b, 0]] + gin[[b, 1]] * dir[[b, 1]] + skip;
                    let fd = moved[[b, out]] - tape.eps[[b, out]];
                    assert!((fd - h * jvp).abs() < 50.0 * h * h, "h={h}");
                }
            }
        }
    }

    fn weighted_loss(student: &Student<f64>, x: &Array2<f64>, t: &[usize], c: &[Cond], w: &[f64], seed: &Array2<f64>) -> f64 {
        (student.predict_eps(x.view(), t, c, w).unwrap() * seed).sum()
    }

    fn check_gradients(student: &Student<f64>) {
        let mut rng = seeded(9);
        let (x, t, c, w) = batch(&mut rng, 4);
        let seed = normal_matrix(&mut rng, 4, 2);
        let tape = student.forward_train(x.view(), &t, &c, &w).unwrap();
        let analytic = student.backward(&tape, seed.view()).unwrap().flatten();
        let h = 1e-5;
        let mut probe = student.clone();
        let mut idx = 0;
        let count = student.trainable_flat().len();
        assert_eq!(analytic.len(), count);
        let mut max_rel: f64 = 0.0;
        while idx < count {
            let fd = {
                let eval = |probe: &mut Student<f64>, delta: f64| {
                    let mut k = idx;
                    let tensors = match &mut probe.adapter {
                        Some(a) => a.tensors_mut(),
                        None => probe.base.tensors_mut(),
                    };
                    for t in tensors {
                        if k < t.len() {
                            t[k] += delta;
                            break;
                        }
                        k -= t.len();
                    }
                };
                eval(&mut probe, h);
                let up = weighted_loss(&probe, &x, &t, &c, &w, &seed);
                eval(&mut probe, -2.0 * h);
                let down = weighted_loss(&probe, &x, &t, &c, &w, &seed);
                eval(&mut probe, h);
                (up - down) / (2.0 * h)
            };
            let rel = (fd - analytic[idx]).abs() / (fd.abs().max(analytic[idx].abs()).max(1e-6));
            max_rel = max_rel.max(rel);
            idx += 1;
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn full_gradients_match_finite_differences() {
        let mut rng = seeded(3);
        let mut base: DenoiserParams<f64> = DenoiserParams::init(mini_config(), Role::Student, &mut rng).unwrap();
        base.guidance_input = true;
        // Give the guidance columns non-zero weights so their gradients are exercised.
        for v in base.net.layers[0].weight.iter_mut() {
            if *v == 0.0 {
                *v = 0.3;
            }
        }
        check_gradients(&Student::full(base));
    }

    #[test]
    fn adapter_gradients_match_finite_differences_and_freeze_base() {
        let mut rng = seeded(4);
        let base: DenoiserParams<f64> = DenoiserParams::init(mini_config(), Role::Student, &mut rng).unwrap();
        let mut adapter = LoraAdapter::new(&base.net, 2, 4.0, &mut rng).unwrap();
        for f in &mut adapter.factors {
            f.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let student = Student::with_adapter(base, adapter).unwrap();
        check_gradients(&student);

        let (x, t, c, w) = batch(&mut rng, 4);
        let tape = student.forward_train(x.view(), &t, &c, &w).unwrap();
        let grads = student.backward(&tape, Array2::ones((4, 2)).view()).unwrap();
        assert!(matches!(grads, GradientBuffer::Adapter(_)));
        let mut opt = Optimizer::adam();
        let mut updated = student.clone();
        updated.apply(&mut opt, &grads, 1e-2).unwrap();
        assert_eq!(updated.base, student.base);
        assert_ne!(updated.adapter, student.adapter);
    }

    #[test]
    fn zero_loss_gradient_gives_zero_buffer() {
        let mut rng = seeded(5);
        let base: DenoiserParams<f32> = DenoiserParams::init(mini_config(), Role::Student, &mut rng).unwrap();
        let student = Student::full(base);
        let (x, t, c, w) = batch(&mut rng, 4);
        let tape = student.forward_train(x.view(), &t, &c, &w).unwrap();
        assert!(student.backward(&tape, Array2::zeros((4, 2)).view()).unwrap().is_all_zero());
        assert!(student.backward(&tape, Array2::zeros((3, 2)).view()).is_err());
    }

    #[test]
    fn merge_is_forward_equivalent() {
        let mut rng = seeded(6);
        let base: DenoiserParams<f32> = DenoiserParams::init(DenoiserConfig::default(), Role::Student, &mut rng).unwrap();
        let mut adapter = LoraAdapter::new(&base.net, 4, 4.0, &mut rng).unwrap();
        for f in &mut adapter.factors {
            f.b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        let merged = lora_merge(&base, &adapter).unwrap();
        let (x, _, _, _) = batch(&mut rng, 100);
        let t: Vec<usize> = (0..100).map(|i| i * 10).collect();
        let c: Vec<Cond> = (0..100).map(|i| if i % 9 == 8 { None } else { Some(i % 8) }).collect();
        let w = vec![1.0; 100];
        let a = Denoiser::new(&base, Some(&adapter)).unwrap().forward(x.view(), &t, &c, &w).unwrap();
        let b = Denoiser::new(&merged, None).unwrap().forward(x.view(), &t, &c, &w).unwrap();
        let max = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 1e-6, "max diff {max}");
    }

    #[test]
    fn blended_merge_equals_sequential_merge() {
        let mut rng = seeded(7);
        let base: DenoiserParams<f64> = DenoiserParams::init(mini_config(), Role::Student, &mut rng).unwrap();
        let mut a1 = LoraAdapter::new(&base.net, 1, 2.0, &mut rng).unwrap();
        let mut a2 = LoraAdapter::new(&base.net, 1, 0.5, &mut rng).unwrap();
        for f in a1.factors.iter_mut().chain(a2.factors.iter_mut()) {
            f.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let lambda = 0.7;
        let (w1, w2) = (1.0, 0.4);
        let blend = LoraAdapter::blend(&[(&a1, w1), (&a2, w2)]).unwrap().scaled(lambda);
        let via_blend = lora_merge(&base, &blend).unwrap();
        let step = lora_merge(&base, &a1.scaled(lambda * w1)).unwrap();
        let sequential = lora_merge(&step, &a2.scaled(lambda * w2)).unwrap();
        let diff = via_blend
            .flatten()
            .iter()
            .zip(sequential.flatten())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn adapter_rank_is_clipped_and_validated() {
        let mut rng = seeded(8);
        let base: DenoiserParams<f32> = DenoiserParams::init(mini_config(), Role::Student, &mut rng).unwrap();
        let adapter = LoraAdapter::new(&base.net, 4, 4.0, &mut rng).unwrap();
        assert_eq!(adapter.factors.last().unwrap().rank(), 2);
        assert!(LoraAdapter::new(&base.net, 0, 1.0, &mut rng).is_err());
        let other: DenoiserParams<f32> = DenoiserParams::init(DenoiserConfig::default(), Role::Student, &mut rng).unwrap();
        assert!(lora_merge(&other, &adapter).is_err());
    }

    #[test]
    fn pred_x0_inverts_forward_noising() {
        let schedule = NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap();
        let mut rng = seeded(10);
        let x0 = normal_matrix(&mut rng, 6, 2);
        let z = normal_matrix(&mut rng, 6, 2);
        let t = vec![0, 1, 250, 500, 999, 1000];
        let mut xt = x0.clone();
        for b in 0..6 {
            for d in 0..2 {
                xt[[b, d]] = schedule.alpha(t[b]) * x0[[b, d]] + schedule.sigma(t[b]) * z[[b, d]];
            }
        }
        let rec = pred_x0(z.view(), xt.view(), &t, &schedule).unwrap();
        for b in 0..6 {
            for d in 0..2 {
                let tol = 1e-9 / schedule.alpha(t[b]);
                assert!((rec[[b, d]] - x0[[b, d]]).abs() < tol);
            }
        }
        // t = 0 returns x_t untouched.
        let same = pred_x0(z.view(), xt.view(), &[0; 6], &schedule).unwrap();
        assert_eq!(same, xt);
        // Independent formula evaluation at a single point.
        let one = pred_x0(ndarray::arr2(&[[0.3, -1.2]]).view(), ndarray::arr2(&[[0.5, 0.25]]).view(), &[400], &schedule).unwrap();
        let (a, s) = (schedule.alpha(400), schedule.sigma(400));
        assert!((one[[0, 0]] - (0.5 - s * 0.3) / a).abs() < 1e-12);
        assert!((one[[0, 1]] - (0.25 + s * 1.2) / a).abs() < 1e-12);
    }
}
