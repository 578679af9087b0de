//! Fully-connected SiLU networks with hand-written reverse-mode gradients.
//!
//! Networks are generic over the scalar type. Training runs in `f32`; the same
//! code instantiated at `f64` backs the finite-difference gradient checks.

use std::fmt::Debug;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + std::ops::AddAssign + std::ops::SubAssign + std::ops::MulAssign + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub fn sigmoid<F: Float>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

#[inline]
fn silu<F: Float>(z: F) -> F {
    z * sigmoid(z)
}

#[inline]
fn silu_prime<F: Float>(z: F) -> F {
    let s = sigmoid(z);
    s * (F::one() + z * (F::one() - s))
}

#[inline]
fn silu_second<F: Float>(z: F) -> F {
    let s = sigmoid(z);
    let two = F::one() + F::one();
    s * (F::one() - s) * (two + z * (F::one() - two * s))
}

/// Dense layer `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Array2::zeros((outputs, inputs)), bias: Array1::zeros(outputs) }
    }

    /// Uniform `±1/√in` initialization for weights and biases.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = || F::of(rng.random_range(-bound..bound));
        let weight = Array2::from_shape_simple_fn((outputs, inputs), &mut draw);
        let bias = Array1::from_shape_simple_fn(outputs, &mut draw);
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn apply(&self, x: ArrayView2<F>) -> Array2<F> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

/// Stack of [`Linear`] layers with SiLU between them and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub layers: Vec<Linear<F>>,
}

/// Activations saved by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    /// Input of every layer (`a_0` is the network input).
    inputs: Vec<Array2<F>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<F>>,
}

impl<F> MlpCache<F> {
    pub fn network_input(&self) -> &Array2<F> {
        &self.inputs[0]
    }
}

impl<F: Scalar> Mlp<F> {
    /// `sizes = [in, h_1, …, out]`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Mlp<G> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.mapv(|v| G::of(v.as_f64())),
                    bias: l.bias.mapv(|v| G::of(v.as_f64())),
                })
                .collect(),
        }
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let last = self.layers.len() - 1;
        let mut a = self.layers[0].apply(x);
        if last == 0 {
            return a;
        }
        a.mapv_inplace(silu);
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            a = layer.apply(a.view());
            if i < last {
                a.mapv_inplace(silu);
            }
        }
        a
    }

    pub fn forward_cached(&self, x: ArrayView2<F>) -> (Array2<F>, MlpCache<F>) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(a.view());
            inputs.push(a);
            if i < last {
                a = z.mapv(silu);
                pre.push(z);
            } else {
                a = z;
            }
        }
        (a, MlpCache { inputs, pre })
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂output`, and returns
    /// `∂L/∂input`.
    pub fn backward(&self, cache: &MlpCache<F>, grad_out: ArrayView2<F>, grads: &mut Mlp<F>) -> Array2<F> {
        let mut delta = grad_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let a_in = &cache.inputs[l];
            let g = &mut grads.layers[l];
            g.weight += &delta.t().dot(a_in);
            g.bias += &delta.sum_axis(Axis(0));
            let mut upstream = delta.dot(&self.layers[l].weight);
            if l > 0 {
                ndarray::Zip::from(&mut upstream)
                    .and(&cache.pre[l - 1])
                    .for_each(|u, &z| *u = *u * silu_prime(z));
            }
            delta = upstream;
        }
        delta
    }

    /// Gradient penalty `Σ_b coef · ‖∂D(a_b)/∂a_b[cols]‖²` for a scalar-output
    /// network, with its gradient accumulated into `grads`.
    ///
    /// Tangents along each penalized input coordinate are propagated forward,
    /// then the tangent and primal graphs are reversed together (second-order
    /// terms enter through SiLU''). Returns the per-sample penalty and the
    /// gradient of the total penalty with respect to the network input.
    pub fn input_gradient_penalty(
        &self,
        x: ArrayView2<F>,
        cols: std::ops::Range<usize>,
        coef: F,
        grads: &mut Mlp<F>,
    ) -> (Array1<F>, Array2<F>) {
        assert_eq!(self.output_dim(), 1, "penalty is defined for scalar networks");
        let batch = x.nrows();
        let depth = self.layers.len();
        let (_, cache) = self.forward_cached(x);
        let mut penalty = Array1::zeros(batch);
        // Primal adjoints injected at each hidden pre-activation.
        let mut adj_pre: Vec<Array2<F>> = cache.pre.iter().map(|z| Array2::zeros(z.raw_dim())).collect();
        let two = F::one() + F::one();

        for col in cols {
            // Forward tangent pass.
            let mut tangent_pre = Vec::with_capacity(depth - 1);
            let mut tangent_act = Vec::with_capacity(depth);
            let w0 = self.layers[0].weight.column(col).to_owned();
            let mut zdot = Array2::from_shape_fn((batch, w0.len()), |(_, j)| w0[j]);
            for l in 0..depth - 1 {
                let adot = &zdot * &cache.pre[l].mapv(silu_prime);
                tangent_pre.push(zdot);
                zdot = adot.dot(&self.layers[l + 1].weight.t());
                tangent_act.push(adot);
            }
            let out_dot = zdot; // batch × 1
            penalty += &out_dot.column(0).mapv(|v| coef * v * v);

            // Reverse over the tangent graph.
            let mut adj_adot = out_dot.mapv(|v| two * coef * v);
            for l in (1..depth).rev() {
                // layer l maps tangent_act[l-1] -> tangent_pre[l] (or the output)
                grads.layers[l].weight += &adj_adot.t().dot(&tangent_act[l - 1]);
                let adj_prev_act = adj_adot.dot(&self.layers[l].weight);
                let z = &cache.pre[l - 1];
                let zdot_prev = &tangent_pre[l - 1];
                ndarray::Zip::from(&mut adj_pre[l - 1])
                    .and(&adj_prev_act)
                    .and(z)
                    .and(zdot_prev)
                    .for_each(|acc, &g, &zz, &zd| *acc = *acc + g * silu_second(zz) * zd);
                adj_adot = ndarray::Zip::from(&adj_prev_act)
                    .and(z)
                    .map_collect(|&g, &zz| g * silu_prime(zz));
            }
            // First layer: tangent input is the unit vector e_col.
            let col_grad = adj_adot.sum_axis(Axis(0));
            let mut wcol = grads.layers[0].weight.column_mut(col);
            wcol += &col_grad;
        }

        // Reverse over the primal graph, seeded only at hidden pre-activations.
        let mut adj_act: Option<Array2<F>> = None;
        let mut input_grad = Array2::zeros(x.raw_dim());
        for l in (0..depth - 1).rev() {
            let mut adj_z = adj_pre[l].clone();
            if let Some(upstream) = &adj_act {
                ndarray::Zip::from(&mut adj_z)
                    .and(upstream)
                    .and(&cache.pre[l])
                    .for_each(|acc, &g, &z| *acc = *acc + g * silu_prime(z));
            }
            grads.layers[l].weight += &adj_z.t().dot(&cache.inputs[l]);
            grads.layers[l].bias += &adj_z.sum_axis(Axis(0));
            let down = adj_z.dot(&self.layers[l].weight);
            if l == 0 {
                input_grad = down;
            } else {
                adj_act = Some(down);
            }
        }
        (penalty, input_grad)
    }
}

/// Flat access to the trainable tensors of a parameter set.
///
/// Optimizers, EMA updates and checkpoints walk tensors in the order returned
/// here, so implementations must keep it stable.
pub trait Parameters<F: Scalar> {
    fn tensors(&self) -> Vec<&[F]>;
    fn tensors_mut(&mut self) -> Vec<&mut [F]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(F::zero());
        }
    }

    fn is_all_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| *v == F::zero()))
    }

    /// Flattened copy of all parameters in `f64`.
    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.iter().map(|v| v.as_f64())).collect()
    }

    fn add_scaled(&mut self, other: &Self, scale: F)
    where
        Self: Sized,
    {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + scale * *s;
            }
        }
    }
}

pub(crate) fn slice_of<F>(a: &Array2<F>) -> &[F] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice_of_mut<F>(a: &mut Array2<F>) -> &mut [F] {
    a.as_slice_mut().expect("standard layout")
}

impl<F: Scalar> Parameters<F> for Mlp<F> {
    fn tensors(&self) -> Vec<&[F]> {
        self.layers
            .iter()
            .flat_map(|l| [slice_of(&l.weight), l.bias.as_slice().expect("contiguous")])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let Linear { weight, bias } = l;
                [slice_of_mut(weight), bias.as_slice_mut().expect("contiguous")]
            })
            .collect()
    }
}

/// Fails if any entry of `values` is not finite.
pub fn ensure_finite<F: Scalar>(values: &[F], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn to_f64<F: Scalar>(a: &Array2<F>) -> Array2<f64> {
    a.mapv(|v| v.as_f64())
}

pub fn from_f64<F: Scalar>(a: &Array2<f64>) -> Array2<F> {
    a.mapv(F::of)
}

/// Columns `[start, start + len)` of a matrix as an owned copy.
pub fn columns<F: Clone>(a: &Array2<F>, start: usize, len: usize) -> Array2<F> {
    a.slice(s![.., start..start + len]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn loss(net: &Mlp<f64>, x: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (net.forward(x.view()) * w).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded(1);
        let net: Mlp<f64> = Mlp::init(&[3, 5, 4, 2], &mut rng);
        let x = crate::rng::normal_matrix(&mut rng, 6, 3);
        let w = crate::rng::normal_matrix(&mut rng, 6, 2);
        let (_, cache) = net.forward_cached(x.view());
        let mut grads = net.zeros_like();
        let gx = net.backward(&cache, w.view(), &mut grads);

        let h = 1e-5;
        let analytic = grads.flatten();
        let mut probe = net.clone();
        let mut idx = 0;
        for ti in 0..probe.tensors().len() {
            for j in 0..probe.tensors()[ti].len() {
                let orig = probe.tensors()[ti][j];
                probe.tensors_mut()[ti][j] = orig + h;
                let up = loss(&probe, &x, &w);
                probe.tensors_mut()[ti][j] = orig - h;
                let down = loss(&probe, &x, &w);
                probe.tensors_mut()[ti][j] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - analytic[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "param {idx}");
                idx += 1;
            }
        }
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (loss(&net, &xp, &w) - loss(&net, &xm, &w)) / (2.0 * h);
                assert!((fd - gx[[r, c]]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    fn penalty_value(net: &Mlp<f64>, x: &Array2<f64>, cols: std::ops::Range<usize>) -> f64 {
        let mut scratch = net.zeros_like();
        net.input_gradient_penalty(x.view(), cols, 0.7, &mut scratch).0.sum()
    }

    #[test]
    fn penalty_value_matches_input_jacobian() {
        let mut rng = seeded(2);
        let net: Mlp<f64> = Mlp::init(&[4, 6, 5, 1], &mut rng);
        let x = crate::rng::normal_matrix(&mut rng, 3, 4);
        let mut scratch = net.zeros_like();
        let (per_sample, _) = net.input_gradient_penalty(x.view(), 0..2, 1.0, &mut scratch);
        let (out, cache) = net.forward_cached(x.view());
        let mut g = net.zeros_like();
        let gx = net.backward(&cache, Array2::ones(out.raw_dim()).view(), &mut g);
        for b in 0..3 {
            let expected = gx[[b, 0]].powi(2) + gx[[b, 1]].powi(2);
            assert!((per_sample[b] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut rng = seeded(4);
        let net: Mlp<f64> = Mlp::init(&[4, 6, 5, 1], &mut rng);
        let x = crate::rng::normal_matrix(&mut rng, 3, 4);
        let mut grads = net.zeros_like();
        let (_, gx) = net.input_gradient_penalty(x.view(), 0..2, 0.7, &mut grads);
        let analytic = grads.flatten();
        let h = 1e-5;
        let mut probe = net.clone();
        let mut idx = 0;
        for ti in 0..probe.tensors().len() {
            for j in 0..probe.tensors()[ti].len() {
                let orig = probe.tensors()[ti][j];
                probe.tensors_mut()[ti][j] = orig + h;
                let up = penalty_value(&probe, &x, 0..2);
                probe.tensors_mut()[ti][j] = orig - h;
                let down = penalty_value(&probe, &x, 0..2);
                probe.tensors_mut()[ti][j] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - analytic[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "param {idx}: {fd} vs {}", analytic[idx]);
                idx += 1;
            }
        }
        for c in 0..4 {
            let mut xp = x.clone();
            xp[[1, c]] += h;
            let mut xm = x.clone();
            xm[[1, c]] -= h;
            let fd = (penalty_value(&net, &xp, 0..2) - penalty_value(&net, &xm, 0..2)) / (2.0 * h);
            assert!((fd - gx[[1, c]]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn f32_and_f64_forward_agree() {
        let mut rng = seeded(5);
        let net: Mlp<f32> = Mlp::init(&[3, 8, 2], &mut rng);
        let x = crate::rng::normal_matrix(&mut rng, 4, 3);
        let y32 = to_f64(&net.forward(from_f64::<f32>(&x).view()));
        let y64 = net.cast::<f64>().forward(x.view());
        assert!((y32 - y64).iter().all(|d| d.abs() < 1e-5));
    }
}
