//! Clipped tanh multilayer perceptron.
//!
//! `u(z) = clamp(U_raw(z), -c/2, c/2)` where `U_raw` alternates affine maps
//! and `tanh`, ending in an affine output layer. Input derivatives are
//! propagated forward as jets (value plus one tangent per input axis), and
//! parameter gradients are obtained by reversing that jet computation, so the
//! residual `d_t u + f'(u) . grad_x u` is differentiated exactly.
//!
//! Batches are laid out as `n x B(1+m)` row-major matrices: row `i` is
//! neuron `i`, and node `b` owns columns `b(1+m) .. (b+1)(1+m)` holding the
//! value followed by the `m` input tangents.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::FluxModel;
use crate::scalar::Scalar;

/// Nodes per evaluation chunk. Fixed so that reductions, and therefore
/// results, do not depend on the number of worker threads.
pub const CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct ClippedTanhNet<S> {
    widths: Vec<usize>,
    params: Vec<S>,
    clip: S,
    // (weight offset, bias offset) per affine layer
    offsets: Vec<(usize, usize)>,
}

fn layout(widths: &[usize]) -> (Vec<(usize, usize)>, usize) {
    let mut offsets = Vec::with_capacity(widths.len() - 1);
    let mut off = 0;
    for w in widths.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        offsets.push((off, off + n_in * n_out));
        off += n_in * n_out + n_out;
    }
    (offsets, off)
}

fn check_architecture(widths: &[usize], c: f64) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::Network(
            "need at least input and output widths".into(),
        ));
    }
    if widths.contains(&0) {
        return Err(Error::Network(format!("zero width in {widths:?}")));
    }
    if *widths.last().unwrap() != 1 {
        return Err(Error::Network("output width must be 1".into()));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Network(format!("clip level must be > 0, got {c}")));
    }
    Ok(())
}

impl<S: Scalar> ClippedTanhNet<S> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(widths: &[usize], c: S, seed: u64) -> Result<Self> {
        check_architecture(widths, c.as_f64())?;
        let (offsets, total) = layout(widths);
        let mut params = vec![S::zero(); total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, w) in widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            let (wo, _) = offsets[l];
            for p in &mut params[wo..wo + n_in * n_out] {
                *p = S::of(dist.sample(&mut rng));
            }
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
            clip: c,
            offsets,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(widths: &[usize], c: S) -> Result<Self> {
        check_architecture(widths, c.as_f64())?;
        let (offsets, total) = layout(widths);
        Ok(Self {
            widths: widths.to_vec(),
            params: vec![S::zero(); total],
            clip: c,
            offsets,
        })
    }

    /// Builds a network from explicit `(W, b)` pairs, `W` row-major `out x in`.
    pub fn from_layers(layers: Vec<(Vec<S>, Vec<S>)>, input_dim: usize, c: S) -> Result<Self> {
        let mut widths = vec![input_dim];
        for (w, b) in &layers {
            let n_in = *widths.last().unwrap();
            if b.is_empty() || w.len() != n_in * b.len() {
                return Err(Error::Network(format!(
                    "layer {} has {} weights for {} inputs and {} outputs",
                    widths.len() - 1,
                    w.len(),
                    n_in,
                    b.len()
                )));
            }
            widths.push(b.len());
        }
        let mut net = Self::zeros(&widths, c)?;
        for (l, (w, b)) in layers.into_iter().enumerate() {
            let (wo, bo) = net.offsets[l];
            net.params[wo..wo + w.len()].copy_from_slice(&w);
            net.params[bo..bo + b.len()].copy_from_slice(&b);
        }
        Ok(net)
    }

    pub fn from_params(widths: &[usize], params: Vec<S>, c: S) -> Result<Self> {
        let mut net = Self::zeros(widths, c)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Number of affine layers `L`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn clip(&self) -> S {
        self.clip
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn layer_weights(&self, l: usize) -> &[S] {
        let (wo, bo) = self.offsets[l];
        &self.params[wo..bo]
    }

    pub fn layer_bias(&self, l: usize) -> &[S] {
        let (_, bo) = self.offsets[l];
        &self.params[bo..bo + self.widths[l + 1]]
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: len,
            });
        }
        Ok(())
    }

    /// `Pi_c(r) = min(max(r, -c/2), c/2)`.
    #[inline]
    pub fn clamp(&self, raw: S) -> S {
        let half = self.clip * S::of(0.5);
        raw.max(-half).min(half)
    }

    /// The clip indicator; the band edges count as inactive.
    #[inline]
    pub fn is_active(&self, raw: S) -> bool {
        let half = self.clip * S::of(0.5);
        raw > -half && raw < half
    }

    /// Unclipped network output.
    pub fn raw(&self, z: &[S]) -> Result<S> {
        self.check_input(z.len())?;
        let mut a = z.to_vec();
        for l in 0..self.depth() {
            let n_in = self.widths[l];
            let n_out = self.widths[l + 1];
            let w = self.layer_weights(l);
            let b = self.layer_bias(l);
            let mut next = b.to_vec();
            for i in 0..n_out {
                let row = &w[i * n_in..(i + 1) * n_in];
                let mut acc = S::zero();
                for (wij, aj) in row.iter().zip(&a) {
                    acc += *wij * *aj;
                }
                next[i] += acc;
            }
            if l + 1 < self.depth() {
                for v in &mut next {
                    *v = v.tanh();
                }
            }
            a = next;
        }
        Ok(a[0])
    }

    pub fn forward(&self, z: &[S]) -> Result<S> {
        Ok(self.clamp(self.raw(z)?))
    }

    /// Value, a.e. input gradient `1_{active} grad U_raw`, and the clip indicator.
    pub fn forward_with_input_grad(&self, z: &[S]) -> Result<(S, Vec<S>, bool)> {
        self.check_input(z.len())?;
        let m = self.input_dim();
        let jets = self.eval_jets(z, 1, None);
        let raw = jets.raw[0];
        let active = self.is_active(raw);
        let grad = if active {
            jets.grad[..m].to_vec()
        } else {
            vec![S::zero(); m]
        };
        Ok((self.clamp(raw), grad, active))
    }

    /// Raw values and raw input gradients for `points` (`m` values per point),
    /// evaluated chunk by chunk.
    pub fn eval_batch(&self, points: &[S]) -> Result<RawJets<S>> {
        let m = self.input_dim();
        if points.len() % m != 0 {
            return Err(Error::Shape {
                expected: m,
                got: points.len() % m,
            });
        }
        let n = points.len() / m;
        let parts: Vec<RawJets<S>> = points
            .par_chunks(CHUNK * m)
            .map(|chunk| self.eval_jets(chunk, chunk.len() / m, None))
            .collect();
        let mut raw = Vec::with_capacity(n);
        let mut grad = Vec::with_capacity(n * m);
        for p in parts {
            raw.extend(p.raw);
            grad.extend(p.grad);
        }
        Ok(RawJets { raw, grad })
    }

    fn eval_jets(&self, points: &[S], batch: usize, mut tape: Option<&mut Tape<S>>) -> RawJets<S> {
        let m = self.input_dim();
        let stride = 1 + m;
        let cols = batch * stride;
        let mut x = vec![S::zero(); m * cols];
        for b in 0..batch {
            for k in 0..m {
                x[k * cols + b * stride] = points[b * m + k];
                x[k * cols + b * stride + 1 + k] = S::one();
            }
        }
        if let Some(t) = tape.as_deref_mut() {
            t.pre.clear();
            t.post.clear();
            t.post.push(x.clone());
        }
        for l in 0..self.depth() {
            let n_in = self.widths[l];
            let n_out = self.widths[l + 1];
            let mut z = vec![S::zero(); n_out * cols];
            S::matmul(n_out, n_in, cols, self.layer_weights(l), false, &x, false, S::zero(), &mut z);
            let bias = self.layer_bias(l);
            for i in 0..n_out {
                let row = &mut z[i * cols..(i + 1) * cols];
                for b in 0..batch {
                    row[b * stride] += bias[i];
                }
            }
            if l + 1 == self.depth() {
                let mut raw = Vec::with_capacity(batch);
                let mut grad = Vec::with_capacity(batch * m);
                for b in 0..batch {
                    raw.push(z[b * stride]);
                    grad.extend_from_slice(&z[b * stride + 1..(b + 1) * stride]);
                }
                return RawJets { raw, grad };
            }
            let mut post = z.clone();
            for i in 0..n_out {
                let row = &mut post[i * cols..(i + 1) * cols];
                for b in 0..batch {
                    let a = row[b * stride].tanh();
                    let s = S::one() - a * a;
                    row[b * stride] = a;
                    for k in 1..stride {
                        row[b * stride + k] *= s;
                    }
                }
            }
            if let Some(t) = tape.as_deref_mut() {
                t.pre.push(z);
                t.post.push(post.clone());
            }
            x = post;
        }
        unreachable!("network has at least one affine layer")
    }

    /// Accumulates `d(objective)/d(theta)` for one chunk given the adjoints of
    /// the raw output value and raw input gradient at each node.
    fn backward_chunk(
        &self,
        tape: &Tape<S>,
        batch: usize,
        raw_bar: &[S],
        grad_bar: &[S],
        out: &mut [S],
    ) {
        let m = self.input_dim();
        let stride = 1 + m;
        let cols = batch * stride;
        // adjoint jets of the output layer
        let mut ybar = vec![S::zero(); cols];
        for b in 0..batch {
            ybar[b * stride] = raw_bar[b];
            ybar[b * stride + 1..(b + 1) * stride].copy_from_slice(&grad_bar[b * m..(b + 1) * m]);
        }
        let mut n_out = 1;
        for l in (0..self.depth()).rev() {
            let n_in = self.widths[l];
            let (wo, bo) = self.offsets[l];
            let x = &tape.post[l];
            {
                let (gw, gb) = out[wo..bo + n_out].split_at_mut(n_in * n_out);
                S::matmul(n_out, cols, n_in, &ybar, false, x, true, S::one(), gw);
                for i in 0..n_out {
                    let row = &ybar[i * cols..(i + 1) * cols];
                    let mut acc = S::zero();
                    for b in 0..batch {
                        acc += row[b * stride];
                    }
                    gb[i] += acc;
                }
            }
            if l == 0 {
                break;
            }
            let mut xbar = vec![S::zero(); n_in * cols];
            S::matmul(n_in, n_out, cols, self.layer_weights(l), true, &ybar, false, S::zero(), &mut xbar);
            // through tanh on layer l-1's pre-activations
            let pre = &tape.pre[l - 1];
            let post = x;
            for i in 0..n_in {
                let r = i * cols;
                for b in 0..batch {
                    let c0 = r + b * stride;
                    let a = post[c0];
                    let s = S::one() - a * a;
                    let mut s_bar = S::zero();
                    for k in 1..stride {
                        s_bar += xbar[c0 + k] * pre[c0 + k];
                        xbar[c0 + k] *= s;
                    }
                    xbar[c0] = (xbar[c0] - S::of(2.0) * a * s_bar) * s;
                }
            }
            ybar = xbar;
            n_out = n_in;
        }
    }
}

/// Unclipped outputs and input gradients for a batch of points.
#[derive(Clone, Debug)]
pub struct RawJets<S> {
    pub raw: Vec<S>,
    /// `m` entries per point.
    pub grad: Vec<S>,
}

struct Tape<S> {
    pre: Vec<Vec<S>>,
    post: Vec<Vec<S>>,
}

pub fn init_network<S: Scalar>(widths: &[usize], c: S, seed: u64) -> Result<ClippedTanhNet<S>> {
    ClippedTanhNet::init(widths, c, seed)
}

pub fn forward<S: Scalar>(net: &ClippedTanhNet<S>, z: &[S]) -> Result<S> {
    net.forward(z)
}

pub fn forward_with_input_grad<S: Scalar>(
    net: &ClippedTanhNet<S>,
    z: &[S],
) -> Result<(S, Vec<S>, bool)> {
    net.forward_with_input_grad(z)
}

/// Linearisation of a loss at fixed nodes:
/// `sum_n du[n] * u(z_n) + dres[n] * r(z_n)` with `r = d_t u + f'(u) . grad_x u`.
///
/// The coefficients carry every frozen factor (quadrature weights, signs of
/// `u - k*`, signs of `|r|` and `|u - u0|`), so the gradient of this linear
/// form is the gradient of the loss under the a.e. calculus conventions.
#[derive(Clone, Debug, Default)]
pub struct LinearizedObjective<S> {
    pub points: Vec<S>,
    pub du: Vec<S>,
    pub dres: Vec<S>,
}

impl<S: Scalar> LinearizedObjective<S> {
    pub fn len(&self) -> usize {
        self.du.len()
    }

    pub fn is_empty(&self) -> bool {
        self.du.is_empty()
    }
}

/// Reverse-mode gradient of a [`LinearizedObjective`] with respect to all
/// network parameters (flat, same layout as [`ClippedTanhNet::params`]).
///
/// Nodes where the clip is inactive contribute nothing: both the value and
/// the residual are locally constant there.
pub fn grad_loss_params<S: Scalar>(
    net: &ClippedTanhNet<S>,
    flux: &FluxModel<S>,
    objective: &LinearizedObjective<S>,
) -> Result<Vec<S>> {
    let m = net.input_dim();
    let n = objective.len();
    if flux.dim() + 1 != m {
        return Err(Error::Shape {
            expected: m,
            got: flux.dim() + 1,
        });
    }
    if objective.points.len() != n * m || objective.dres.len() != n {
        return Err(Error::Parameter(
            "objective arrays are inconsistent with the network input dimension".into(),
        ));
    }
    let d = flux.dim();
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<Vec<S>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(n);
            let batch = end - start;
            let mut tape = Tape {
                pre: Vec::new(),
                post: Vec::new(),
            };
            let jets = net.eval_jets(&objective.points[start * m..end * m], batch, Some(&mut tape));
            let mut raw_bar = vec![S::zero(); batch];
            let mut grad_bar = vec![S::zero(); batch * m];
            for b in 0..batch {
                let raw = jets.raw[b];
                if !net.is_active(raw) {
                    continue;
                }
                let g = &jets.grad[b * m..(b + 1) * m];
                let dres = objective.dres[start + b];
                let mut curvature = S::zero();
                for i in 0..d {
                    curvature += flux.f_second_comp(i, raw) * g[i];
                    grad_bar[b * m + i] = dres * flux.f_prime_comp(i, raw);
                }
                grad_bar[b * m + d] = dres;
                raw_bar[b] = objective.du[start + b] + dres * curvature;
            }
            let mut out = vec![S::zero(); net.num_params()];
            net.backward_chunk(&tape, batch, &raw_bar, &grad_bar, &mut out);
            out
        })
        .collect();
    let mut total = vec![S::zero(); net.num_params()];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    Ok(total)
}

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub step: u64,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub lr: S,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(num_params: usize, lr: S) -> Self {
        Self {
            m: vec![S::zero(); num_params],
            v: vec![S::zero(); num_params],
            step: 0,
            beta1: S::of(0.9),
            beta2: S::of(0.999),
            eps: S::of(1e-8),
            lr,
        }
    }
}

/// One bias-corrected Adam update of `net` in place.
pub fn adam_step<S: Scalar>(
    state: &mut AdamState<S>,
    net: &mut ClippedTanhNet<S>,
    grads: &[S],
) -> Result<()> {
    let n = net.num_params();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape {
            expected: n,
            got: grads.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = S::one() - state.beta1.powi(t);
    let bc2 = S::one() - state.beta2.powi(t);
    for (((p, g), m), v) in net
        .params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = state.beta1 * *m + (S::one() - state.beta1) * *g;
        *v = state.beta2 * *v + (S::one() - state.beta2) * *g * *g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

pub const CHECKPOINT_FORMAT: &str = "entropy-net/checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized network: layer widths plus flat row-major parameters
/// (`W_1, b_1, W_2, b_2, ...`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub widths: Vec<usize>,
    pub clip: f64,
    pub params: Vec<f64>,
}

impl<S: Scalar> ClippedTanhNet<S> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            widths: self.widths.clone(),
            clip: self.clip.as_f64(),
            params: self.params.iter().map(|p| p.as_f64()).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Network(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Self::from_params(
            &ck.widths,
            ck.params.iter().map(|&p| S::of(p)).collect(),
            S::of(ck.clip),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::make_flux;

    fn affine_net(c: f64, wx: f64, wt: f64, b: f64) -> ClippedTanhNet<f64> {
        ClippedTanhNet::from_layers(vec![(vec![wx, wt], vec![b])], 2, c).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let widths = [3, 64, 64, 64, 64, 1];
        let a = ClippedTanhNet::<f64>::init(&widths, 4.0, 11).unwrap();
        let b = ClippedTanhNet::<f64>::init(&widths, 4.0, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.depth(), 5);
        assert_eq!(a.num_params(), 3 * 64 + 64 + 3 * (64 * 64 + 64) + 64 + 1);
        assert!(a.layer_bias(2).iter().all(|&x| x == 0.0));
        let c = ClippedTanhNet::<f64>::init(&widths, 4.0, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_width_rejected() {
        assert!(ClippedTanhNet::<f64>::init(&[2, 0, 1], 1.0, 0).is_err());
        assert!(ClippedTanhNet::<f64>::init(&[2, 4, 1], 0.0, 0).is_err());
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = ClippedTanhNet::<f64>::zeros(&[2, 5, 5, 1], 2.0).unwrap();
        assert_eq!(net.forward(&[0.3, 0.1]).unwrap(), 0.0);
    }

    #[test]
    fn clipping_examples() {
        assert_eq!(affine_net(2.0, 0.0, 0.0, 10.0).forward(&[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(affine_net(2.0, 0.0, 0.0, -0.3).forward(&[0.0, 0.0]).unwrap(), -0.3);
        assert_eq!(affine_net(2.0, 0.0, 0.0, -10.0).forward(&[0.0, 0.0]).unwrap(), -1.0);
    }

    #[test]
    fn input_grad_rules() {
        let (v, g, active) = affine_net(10.0, 2.0, 1.0, 0.0)
            .forward_with_input_grad(&[0.5, 0.25])
            .unwrap();
        assert!(active);
        assert_eq!(v, 1.25);
        assert_eq!(g, vec![2.0, 1.0]);

        let (_, g, active) = affine_net(2.0, 2.0, 1.0, 5.0)
            .forward_with_input_grad(&[0.0, 0.0])
            .unwrap();
        assert!(!active);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let net = ClippedTanhNet::<f64>::zeros(&[2, 3, 1], 2.0).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape { .. })));
        assert!(net.forward_with_input_grad(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn batch_matches_pointwise() {
        let net = ClippedTanhNet::<f64>::init(&[2, 7, 5, 1], 6.0, 3).unwrap();
        let pts: Vec<f64> = (0..300).flat_map(|i| {
            let s = i as f64 * 0.01;
            [s.sin(), s.cos() * 0.5]
        }).collect();
        let jets = net.eval_batch(&pts).unwrap();
        for i in 0..300 {
            let z = &pts[2 * i..2 * i + 2];
            assert!((jets.raw[i] - net.raw(z).unwrap()).abs() < 1e-14);
            let (_, g, active) = net.forward_with_input_grad(z).unwrap();
            if active {
                for k in 0..2 {
                    assert!((jets.grad[2 * i + k] - g[k]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn input_grad_matches_finite_differences() {
        let net = ClippedTanhNet::<f64>::init(&[2, 8, 8, 1], 10.0, 5).unwrap();
        for i in 0..50 {
            let z = [-1.0 + 0.04 * i as f64, 0.01 * i as f64];
            let (_, g, active) = net.forward_with_input_grad(&z).unwrap();
            assert!(active);
            for k in 0..2 {
                let step = 1e-6;
                let mut zp = z;
                let mut zm = z;
                zp[k] += step;
                zm[k] -= step;
                let fd = (net.raw(&zp).unwrap() - net.raw(&zm).unwrap()) / (2.0 * step);
                assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + g[k].abs()), "{fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        let mut net = ClippedTanhNet::<f64>::init(&[2, 6, 5, 1], 10.0, 8).unwrap();
        let flux = make_flux::<f64>("burgers1d").unwrap();
        let z0 = vec![0.3, 0.2];
        let obj = LinearizedObjective {
            points: z0.clone(),
            du: vec![1.0],
            dres: vec![0.0],
        };
        let g = grad_loss_params(&net, &flux, &obj).unwrap();
        for p in 0..net.num_params() {
            let orig = net.params()[p];
            let step = 1e-6;
            net.params_mut()[p] = orig + step;
            let fp = net.forward(&z0).unwrap();
            net.params_mut()[p] = orig - step;
            let fm = net.forward(&z0).unwrap();
            net.params_mut()[p] = orig;
            let fd = (fp - fm) / (2.0 * step);
            assert!((fd - g[p]).abs() <= 1e-5 * (1.0 + fd.abs()), "param {p}: {fd} vs {}", g[p]);
        }
    }

    #[test]
    fn residual_gradient_matches_finite_differences() {
        let mut net = ClippedTanhNet::<f64>::init(&[2, 6, 5, 1], 10.0, 9).unwrap();
        let flux = make_flux::<f64>("cubic").unwrap();
        let pts = vec![0.3, 0.2, -0.4, 0.1, 0.8, 0.45];
        let obj = LinearizedObjective {
            points: pts.clone(),
            du: vec![0.0, 0.7, -0.2],
            dres: vec![1.0, -0.5, 0.25],
        };
        let value = |net: &ClippedTanhNet<f64>| -> f64 {
            let mut acc = 0.0;
            for n in 0..3 {
                let (u, g, _) = net.forward_with_input_grad(&pts[2 * n..2 * n + 2]).unwrap();
                let r = g[1] + flux.f_prime_comp(0, u) * g[0];
                acc += obj.du[n] * u + obj.dres[n] * r;
            }
            acc
        };
        let g = grad_loss_params(&net, &flux, &obj).unwrap();
        for p in 0..net.num_params() {
            let orig = net.params()[p];
            let step = 1e-6;
            net.params_mut()[p] = orig + step;
            let fp = value(&net);
            net.params_mut()[p] = orig - step;
            let fm = value(&net);
            net.params_mut()[p] = orig;
            let fd = (fp - fm) / (2.0 * step);
            assert!((fd - g[p]).abs() <= 1e-5 * (1.0 + fd.abs()), "param {p}: {fd} vs {}", g[p]);
        }
    }

    #[test]
    fn adam_closed_form_first_step() {
        let mut net = ClippedTanhNet::<f64>::zeros(&[2, 1], 2.0).unwrap();
        let mut st = AdamState::new(net.num_params(), 1e-3);
        adam_step(&mut st, &mut net, &[0.0, 0.0, 0.0]).unwrap();
        assert!(net.params().iter().all(|&p| p == 0.0));

        let mut st = AdamState::new(net.num_params(), 1e-3);
        adam_step(&mut st, &mut net, &[0.5, -2.0, 3.0]).unwrap();
        for (p, g) in net.params().iter().zip([0.5f64, -2.0, 3.0]) {
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-15);
        }
        assert_eq!(st.step, 1);
        assert!(adam_step(&mut st, &mut net, &[1.0]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = ClippedTanhNet::<f64>::init(&[2, 4, 1], 3.0, 1).unwrap();
        let ck = net.to_checkpoint();
        let json = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(ClippedTanhNet::<f64>::from_checkpoint(&back).unwrap(), net);
    }
}
