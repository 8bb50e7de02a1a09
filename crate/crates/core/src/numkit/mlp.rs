//! Fixed-topology multilayer perceptron with a hand-written reverse pass.
//!
//! Layer `l` maps `sizes[l]` to `sizes[l + 1]` as `act(W_l x + b_l)`, with
//! `W_l` stored row-major as `(out, in)`. Hidden layers use a smooth
//! activation; the output layer is affine. Activations are indexed
//! `a_0 = input, ..., a_L = output`; when a bottleneck index `k` is set,
//! `a_k` is the h-space vector, layers `0..k` form the encoder and layers
//! `k..L` the decoder.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::matrix::{matmul_transb, Matrix};
use super::rng::RngStream;
use crate::error::{check_dim, Error, Result};

const FORMAT_TAG: &str = "fairdiff.mlp.v1";

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn fresh_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    bottleneck: Option<usize>,
    revision: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.sizes == other.sizes
            && self.weights == other.weights
            && self.biases == other.biases
            && self.activation == other.activation
            && self.bottleneck == other.bottleneck
    }
}

/// Activations recorded by a forward pass over layers `start..L`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    revision: u64,
    start: usize,
    activations: Vec<Matrix>,
}

impl ForwardCache {
    /// Activation `a_i` (absolute layer-boundary index), if recorded.
    pub fn activation(&self, i: usize) -> Option<&Matrix> {
        i.checked_sub(self.start).and_then(|j| self.activations.get(j))
    }

    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("cache holds at least the input")
    }
}

/// Parameter gradients, shaped like the network's parameters. Layers not
/// covered by the forward cache carry zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.data().iter().all(|&v| v == 0.0))
            && self.biases.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }
}

impl Mlp {
    /// Random network with `N(0, 1/fan_in)` weights and zero biases.
    pub fn new(
        sizes: &[usize],
        activation: Activation,
        bottleneck: Option<usize>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation, bottleneck)?;
        for w in &mut net.weights {
            let scale = 1.0 / (w.cols() as f64).sqrt();
            for v in w.data_mut() {
                *v = rng.normal() * scale;
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], activation: Activation, bottleneck: Option<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must have at least two positive entries, got {sizes:?}"
            )));
        }
        let layers = sizes.len() - 1;
        if let Some(k) = bottleneck {
            if k == 0 || k >= layers {
                return Err(Error::InvalidArgument(format!(
                    "bottleneck index {k} must lie strictly between 0 and {layers}"
                )));
            }
        }
        let weights = sizes.windows(2).map(|p| Matrix::zeros(p[1], p[0])).collect();
        let biases = sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            activation,
            bottleneck,
            revision: fresh_revision(),
        })
    }

    /// Assembles a network from explicit parameters.
    pub fn from_parts(
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
        bottleneck: Option<usize>,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidArgument("need one bias vector per weight matrix".into()));
        }
        let mut sizes = vec![weights[0].cols()];
        for (w, b) in weights.iter().zip(&biases) {
            check_dim("Mlp layer input", *sizes.last().unwrap(), w.cols())?;
            check_dim("Mlp bias", w.rows(), b.len())?;
            if !w.all_finite() || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("Mlp parameters".into()));
            }
            sizes.push(w.rows());
        }
        let mut net = Self::zeros(&sizes, activation, bottleneck)?;
        net.weights = weights;
        net.biases = biases;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn bottleneck_index(&self) -> Option<usize> {
        self.bottleneck
    }

    pub fn bottleneck_width(&self) -> Option<usize> {
        self.bottleneck.map(|k| self.sizes[k])
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Mutable access to `(weight, bias)` of every layer. Bumps the
    /// revision, invalidating outstanding forward caches.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&mut Matrix, &mut Vec<f64>)> {
        self.revision = fresh_revision();
        self.weights.iter_mut().zip(self.biases.iter_mut())
    }

    fn apply_layer(&self, l: usize, x: &Matrix) -> Matrix {
        let mut z = matmul_transb(x, &self.weights[l]);
        let b = &self.biases[l];
        let hidden = l + 1 < self.num_layers();
        let cols = z.cols();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            let s = *v + b[i % cols];
            *v = if hidden { self.activation.apply(s) } else { s };
        }
        z
    }

    fn run(&self, input: &Matrix, from: usize, to: usize, keep: bool) -> Result<(Matrix, Vec<Matrix>)> {
        check_dim("Mlp forward input", self.sizes[from], input.cols())?;
        let mut acts = Vec::new();
        let mut cur = input.clone();
        for l in from..to {
            let next = self.apply_layer(l, &cur);
            if keep {
                acts.push(std::mem::replace(&mut cur, next));
            } else {
                cur = next;
            }
        }
        if keep {
            acts.push(cur.clone());
        }
        Ok((cur, acts))
    }

    /// Batched forward pass; rows of `input` are samples.
    pub fn forward_batch(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.forward_from(0, input)
    }

    /// Forward pass over layers `start..L`, recording activations so that
    /// gradients can flow back to `a_start`.
    pub fn forward_from(&self, start: usize, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if start >= self.num_layers() {
            return Err(Error::InvalidArgument(format!("start layer {start} out of range")));
        }
        let (out, activations) = self.run(input, start, self.num_layers(), true)?;
        Ok((
            out,
            ForwardCache {
                revision: self.revision,
                start,
                activations,
            },
        ))
    }

    /// Output only, no cache.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.run(input, 0, self.num_layers(), false)?.0)
    }

    /// Single-sample evaluation with `t_embed` appended to `x`.
    pub fn forward(&self, x: &[f64], t_embed: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        check_dim(
            "Mlp forward x width",
            self.input_width().saturating_sub(t_embed.len()),
            x.len(),
        )?;
        let mut row = Vec::with_capacity(x.len() + t_embed.len());
        row.extend_from_slice(x);
        row.extend_from_slice(t_embed);
        let input = Matrix::from_raw(1, row.len(), row);
        let (out, cache) = self.forward_batch(&input)?;
        Ok((out.into_data(), cache))
    }

    fn require_bottleneck(&self) -> Result<usize> {
        self.bottleneck
            .ok_or_else(|| Error::InvalidArgument("network has no bottleneck layer".into()))
    }

    /// Layers before the bottleneck: input → h.
    pub fn encode(&self, input: &Matrix) -> Result<Matrix> {
        let k = self.require_bottleneck()?;
        Ok(self.run(input, 0, k, false)?.0)
    }

    /// Layers after the bottleneck: h → output.
    pub fn decode(&self, h: &Matrix) -> Result<Matrix> {
        let k = self.require_bottleneck()?;
        Ok(self.run(h, k, self.num_layers(), false)?.0)
    }

    /// Exact reverse pass. `out_grad` is ∂loss/∂output for every cached
    /// row; returns summed parameter gradients and ∂loss/∂input per row.
    pub fn backward(&self, cache: &ForwardCache, out_grad: &Matrix) -> Result<(Gradients, Matrix)> {
        if cache.revision != self.revision {
            return Err(Error::StaleCache {
                cache: cache.revision,
                net: self.revision,
            });
        }
        let out = cache.output();
        check_dim("Mlp backward rows", out.rows(), out_grad.rows())?;
        check_dim("Mlp backward cols", out.cols(), out_grad.cols())?;

        let mut grads = Gradients::zeros_like(self);
        let mut delta = out_grad.clone();
        let n = out.rows();
        for l in (cache.start..self.num_layers()).rev() {
            let a_out = &cache.activations[l + 1 - cache.start];
            let a_in = &cache.activations[l - cache.start];
            if l + 1 < self.num_layers() {
                for (d, a) in delta.data_mut().iter_mut().zip(a_out.data()) {
                    *d *= self.activation.deriv_from_output(*a);
                }
            }
            let w = &self.weights[l];
            let (fan_out, fan_in) = (w.rows(), w.cols());
            let gw = grads.weights[l].data_mut();
            let gb = &mut grads.biases[l];
            for r in 0..n {
                let drow = delta.row(r);
                let xrow = a_in.row(r);
                for j in 0..fan_out {
                    let dj = drow[j];
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    let gwr = &mut gw[j * fan_in..(j + 1) * fan_in];
                    for (g, x) in gwr.iter_mut().zip(xrow) {
                        *g += dj * x;
                    }
                }
            }
            let mut prev = Matrix::zeros(n, fan_in);
            for r in 0..n {
                let drow = delta.row(r);
                let prow = prev.row_mut(r);
                for j in 0..fan_out {
                    let dj = drow[j];
                    if dj == 0.0 {
                        continue;
                    }
                    for (p, wv) in prow.iter_mut().zip(w.row(j)) {
                        *p += dj * wv;
                    }
                }
            }
            delta = prev;
        }
        Ok((grads, delta))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = MlpCheckpoint::from(self);
        let text = serde_json::to_string_pretty(&ckpt).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Format { msg, .. } => Error::format(path, msg),
            other => Error::format(path, other),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&MlpCheckpoint::from(self)).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: MlpCheckpoint = serde_json::from_str(text).map_err(|e| Error::format("<mlp>", e))?;
        ckpt.into_mlp()
    }
}

/// On-disk form: layer sizes plus flat row-major parameter arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct MlpCheckpoint {
    format: String,
    sizes: Vec<usize>,
    activation: Activation,
    bottleneck_index: Option<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl From<&Mlp> for MlpCheckpoint {
    fn from(net: &Mlp) -> Self {
        Self {
            format: FORMAT_TAG.into(),
            sizes: net.sizes.clone(),
            activation: net.activation,
            bottleneck_index: net.bottleneck,
            weights: net.weights.iter().map(|w| w.data().to_vec()).collect(),
            biases: net.biases.clone(),
        }
    }
}

impl MlpCheckpoint {
    fn into_mlp(self) -> Result<Mlp> {
        if self.format != FORMAT_TAG {
            return Err(Error::format(
                "<mlp>",
                format!("unsupported format tag `{}`", self.format),
            ));
        }
        if self.sizes.len() < 2 || self.weights.len() != self.sizes.len() - 1 {
            return Err(Error::format("<mlp>", "layer count does not match sizes"));
        }
        let weights = self
            .weights
            .into_iter()
            .enumerate()
            .map(|(l, w)| Matrix::from_vec(self.sizes[l + 1], self.sizes[l], w))
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_parts(weights, self.biases, self.activation, self.bottleneck_index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let layers = net.num_layers();
        for l in 0..layers {
            let w = &net.weights()[l];
            let b = &net.biases()[l];
            let mut next = Vec::new();
            for j in 0..w.rows() {
                let mut s = b[j];
                for i in 0..w.cols() {
                    s += w.get(j, i) * cur[i];
                }
                next.push(if l + 1 < layers { s.tanh() } else { s });
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2], Activation::Tanh, None).unwrap();
        let (out, _) = net.forward(&[1.0, 2.0], &[0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let net = Mlp::from_parts(vec![w], vec![vec![0.1, -0.2]], Activation::Tanh, None).unwrap();
        let (out, _) = net.forward(&[3.0, 4.0], &[]).unwrap();
        assert_eq!(out, vec![1.0 * 3.0 + 2.0 * 4.0 + 0.1, -3.0 + 2.0 - 0.2]);
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = RngStream::new(11);
        let net = Mlp::new(&[4, 7, 3], Activation::Tanh, None, &mut rng).unwrap();
        for _ in 0..20 {
            let x = rng.normal_vec(4);
            let (out, _) = net.forward(&x[..3], &x[3..]).unwrap();
            let want = reference_forward(&net, &x);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_input_width_is_error() {
        let net = Mlp::zeros(&[3, 2], Activation::Tanh, None).unwrap();
        assert!(net.forward(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn bottleneck_must_be_interior() {
        assert!(Mlp::zeros(&[2, 4, 2], Activation::Tanh, Some(0)).is_err());
        assert!(Mlp::zeros(&[2, 4, 2], Activation::Tanh, Some(2)).is_err());
        assert!(Mlp::zeros(&[2, 4, 2], Activation::Tanh, Some(1)).is_ok());
    }

    #[test]
    fn linear_squared_loss_gradient_closed_form() {
        let w = Matrix::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.2]]).unwrap();
        let b = vec![0.05, -0.4];
        let net = Mlp::from_parts(vec![w.clone()], vec![b.clone()], Activation::Tanh, None).unwrap();
        let x = [0.6, -1.3];
        let y = [0.2, 0.9];
        let (out, cache) = net.forward(&x, &[]).unwrap();
        // loss = ½‖Wx+b−y‖², so ∂loss/∂out = out − y
        let resid: Vec<f64> = out.iter().zip(&y).map(|(o, t)| o - t).collect();
        let (g, gx) = net
            .backward(&cache, &Matrix::from_vec(1, 2, resid.clone()).unwrap())
            .unwrap();
        for j in 0..2 {
            assert!((g.biases[0][j] - resid[j]).abs() < 1e-15);
            for i in 0..2 {
                assert!((g.weights[0].get(j, i) - resid[j] * x[i]).abs() < 1e-15);
            }
        }
        for i in 0..2 {
            let want = resid[0] * w.get(0, i) + resid[1] * w.get(1, i);
            assert!((gx.get(0, i) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngStream::new(9);
        let net = Mlp::new(&[3, 5, 4, 2], Activation::Tanh, Some(1), &mut rng).unwrap();
        let x = rng.normal_vec(3);
        let c = rng.normal_vec(2);
        // loss = c · f(x)
        let loss = |n: &Mlp, x: &[f64]| -> f64 { reference_forward(n, x).iter().zip(&c).map(|(a, b)| a * b).sum() };
        let (_, cache) = net.forward(&x, &[]).unwrap();
        let (g, gx) = net
            .backward(&cache, &Matrix::from_vec(1, 2, c.clone()).unwrap())
            .unwrap();
        let h = 1e-6;
        for l in 0..net.num_layers() {
            for k in 0..net.weights()[l].data().len() {
                let bump = |d: f64| {
                    let mut n = net.clone();
                    n.params_mut().nth(l).unwrap().0.data_mut()[k] += d;
                    loss(&n, &x)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!((fd - g.weights[l].data()[k]).abs() < 1e-7, "w{l}[{k}]");
            }
            for k in 0..net.biases()[l].len() {
                let bump = |d: f64| {
                    let mut n = net.clone();
                    n.params_mut().nth(l).unwrap().1[k] += d;
                    loss(&n, &x)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!((fd - g.biases[l][k]).abs() < 1e-7, "b{l}[{k}]");
            }
        }
        for i in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!((fd - gx.get(0, i)).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_out_grad_gives_zero_grads() {
        let mut rng = RngStream::new(5);
        let net = Mlp::new(&[3, 6, 6, 2], Activation::Tanh, Some(1), &mut rng).unwrap();
        let (_, cache) = net.forward(&[0.1, 0.2, 0.3], &[]).unwrap();
        let (g, gx) = net.backward(&cache, &Matrix::zeros(1, 2)).unwrap();
        assert!(g.is_zero());
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_detected() {
        let mut rng = RngStream::new(5);
        let mut net = Mlp::new(&[2, 4, 1], Activation::Tanh, None, &mut rng).unwrap();
        let (_, cache) = net.forward(&[0.1, 0.2], &[]).unwrap();
        for (w, _) in net.params_mut() {
            w.scale(0.5);
        }
        assert!(matches!(
            net.backward(&cache, &Matrix::zeros(1, 1)),
            Err(Error::StaleCache { .. })
        ));
    }

    #[test]
    fn split_forward_matches_unsplit() {
        let mut rng = RngStream::new(9);
        let net = Mlp::new(&[5, 8, 4, 8, 2], Activation::Tanh, Some(2), &mut rng).unwrap();
        let input = crate::numkit::gaussian_sample(&mut rng, 10, 5);
        let full = net.predict(&input).unwrap();
        let split = net.decode(&net.encode(&input).unwrap()).unwrap();
        assert_eq!(full, split);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = RngStream::new(3);
        let net = Mlp::new(&[3, 4, 2, 3], Activation::Sigmoid, Some(2), &mut rng).unwrap();
        let back = Mlp::from_json(&net.to_json()).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn checkpoint_rejects_wrong_tag() {
        let net = Mlp::zeros(&[2, 2], Activation::Tanh, None).unwrap();
        let text = net.to_json().replace(FORMAT_TAG, "other.v9");
        assert!(Mlp::from_json(&text).is_err());
    }
}
