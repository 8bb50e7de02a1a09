use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schedule::{diffuse_with, NoiseSchedule};
use crate::error::{check_dim, Error, Result};
use crate::numkit::{Activation, Adam, Matrix, Mlp, RngStream};
use crate::synthdata::LabeledSample;

const FORMAT_TAG: &str = "fairdiff.denoiser.v1";

/// Sinusoidal features of `t / horizon` at log-spaced frequencies in
/// `[1, 64]` radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub width: usize,
    pub horizon: usize,
}

impl TimeEmbedding {
    pub fn embed(&self, t: usize) -> Vec<f64> {
        let tau = t as f64 / self.horizon as f64;
        let k = self.width / 2;
        let mut out = Vec::with_capacity(self.width);
        for i in 0..k {
            let w = if k > 1 {
                (64f64.ln() * i as f64 / (k - 1) as f64).exp()
            } else {
                1.0
            };
            out.push((w * tau).sin());
            out.push((w * tau).cos());
        }
        if self.width % 2 == 1 {
            out.push(tau);
        }
        out
    }
}

/// Fixed linear skip around the network output `F`.
///
/// With `x̃ = x_t/√ᾱ_t` and `σ² = (1 − ᾱ_t)/ᾱ_t`, the clean-point estimate
/// is `x̂₀ = c_skip·x̃ + c_out·F` where `c_skip = σ_d²/(σ² + σ_d²)` and
/// `c_out = σ·σ_d/√(σ² + σ_d²)`, and the predicted noise is `(x̃ − x̂₀)/σ`.
/// The skip carries the position of `x_t`, so the network (and with it the
/// bottleneck) only supplies what the position alone does not determine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preconditioning {
    pub sigma_data: f64,
    /// `ᾱ_t` for `t = 1..=T` of the schedule the network is trained on.
    pub alpha_bar: Vec<f64>,
}

impl Preconditioning {
    /// `(a, b)` with `ε = a·x_t + b·F` at level `t`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t - 1];
        let sigma = ((1.0 - ab) / ab).sqrt();
        let sd2 = self.sigma_data * self.sigma_data;
        let norm = (sigma * sigma + sd2).sqrt();
        (sigma / (norm * norm * ab.sqrt()), -self.sigma_data / norm)
    }
}

/// Noise-prediction network: an MLP over `[x, embed(t)]` whose bottleneck
/// activation is the h-space, optionally wrapped in a [`Preconditioning`]
/// skip.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub net: Mlp,
    pub embedding: TimeEmbedding,
    pub precond: Option<Preconditioning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub embed_width: usize,
    pub encoder_hidden: Vec<usize>,
    pub bottleneck_width: usize,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    /// Data scale of the output skip; `None` makes the MLP output the
    /// noise directly.
    pub sigma_data: Option<f64>,
    pub train_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last epoch; decays linearly from `lr`.
    pub lr_final: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            embed_width: 16,
            encoder_hidden: vec![64, 64],
            bottleneck_width: 32,
            decoder_hidden: vec![64, 64],
            activation: Activation::Tanh,
            sigma_data: Some(0.5),
            train_samples: 8192,
            epochs: 200,
            batch_size: 128,
            lr: 2e-3,
            lr_final: 1e-4,
            seed: 1,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DenoiserFile {
    format: String,
    embedding: TimeEmbedding,
    precond: Option<Preconditioning>,
    mlp: serde_json::Value,
}

impl Denoiser {
    /// Fresh randomly initialized denoiser for data of dimension `dim`.
    pub fn init(dim: usize, sched: &NoiseSchedule, cfg: &DenoiserConfig, rng: &mut RngStream) -> Result<Self> {
        let mut sizes = vec![dim + cfg.embed_width];
        sizes.extend(&cfg.encoder_hidden);
        sizes.push(cfg.bottleneck_width);
        let k = sizes.len() - 1;
        sizes.extend(&cfg.decoder_hidden);
        sizes.push(dim);
        let net = Mlp::new(&sizes, cfg.activation, Some(k), rng)?;
        Self::new(
            net,
            TimeEmbedding {
                width: cfg.embed_width,
                horizon: sched.steps(),
            },
            cfg.sigma_data.map(|sigma_data| Preconditioning {
                sigma_data,
                alpha_bar: sched.alpha_bar().to_vec(),
            }),
        )
    }

    pub fn new(net: Mlp, embedding: TimeEmbedding, precond: Option<Preconditioning>) -> Result<Self> {
        if net.bottleneck_index().is_none() {
            return Err(Error::InvalidArgument("denoiser needs a bottleneck layer".into()));
        }
        if net.input_width() <= embedding.width {
            return Err(Error::InvalidArgument("input narrower than time embedding".into()));
        }
        check_dim(
            "denoiser output width",
            net.input_width() - embedding.width,
            net.output_width(),
        )?;
        if let Some(p) = &precond {
            check_dim("preconditioning levels", embedding.horizon, p.alpha_bar.len())?;
            let ok = p.sigma_data.is_finite() && p.sigma_data > 0.0 && p.alpha_bar.iter().all(|a| *a > 0.0 && *a < 1.0);
            if !ok {
                return Err(Error::InvalidArgument(
                    "preconditioning needs sigma_data > 0 and alpha_bar in (0, 1)".into(),
                ));
            }
        }
        Ok(Self {
            net,
            embedding,
            precond,
        })
    }

    /// Checks that this network was built for `sched`.
    pub fn check_schedule(&self, sched: &NoiseSchedule) -> Result<()> {
        check_dim("denoiser horizon", sched.steps(), self.embedding.horizon)?;
        if let Some(p) = &self.precond {
            if p.alpha_bar != sched.alpha_bar() {
                return Err(Error::InvalidArgument(
                    "denoiser was trained for a different noise schedule".into(),
                ));
            }
        }
        Ok(())
    }

    /// Turns raw network outputs into noise predictions, in place.
    fn finish(&self, x: &Matrix, ts: impl Fn(usize) -> usize, out: &mut Matrix) {
        if let Some(p) = &self.precond {
            for r in 0..out.rows() {
                let (a, b) = p.coefficients(ts(r));
                for (o, xv) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                    *o = a * xv + b * *o;
                }
            }
        }
    }

    pub fn data_dim(&self) -> usize {
        self.net.output_width()
    }

    pub fn h_width(&self) -> usize {
        self.net.bottleneck_width().expect("checked in constructor")
    }

    /// `[x_i, embed(t)]` rows.
    pub fn inputs(&self, x: &Matrix, t: usize) -> Result<Matrix> {
        check_dim("denoiser x width", self.data_dim(), x.cols())?;
        let e = self.embedding.embed(t);
        let cols = x.cols() + e.len();
        let mut data = Vec::with_capacity(x.rows() * cols);
        for row in x.row_iter() {
            data.extend_from_slice(row);
            data.extend_from_slice(&e);
        }
        Matrix::from_vec(x.rows(), cols, data)
    }

    /// Per-row inputs where each row has its own level.
    fn inputs_mixed(&self, x: &Matrix, ts: &[usize]) -> Matrix {
        let cols = x.cols() + self.embedding.width;
        let mut data = Vec::with_capacity(x.rows() * cols);
        for (row, &t) in x.row_iter().zip(ts) {
            data.extend_from_slice(row);
            data.extend(self.embedding.embed(t));
        }
        Matrix::from_raw(x.rows(), cols, data)
    }

    /// Encoder half: `h = ε^E(x, t)`.
    pub fn encode(&self, x: &Matrix, t: usize) -> Result<Matrix> {
        self.net.encode(&self.inputs(x, t)?)
    }

    /// Decoder half: the noise prediction at `(x, t)` from bottleneck
    /// activations `h` (`x` only enters through the output skip).
    pub fn decode(&self, h: &Matrix, x: &Matrix, t: usize) -> Result<Matrix> {
        check_dim("decode rows", h.rows(), x.rows())?;
        let mut out = self.net.decode(h)?;
        self.check_level(t)?;
        self.finish(x, |_| t, &mut out);
        Ok(out)
    }

    /// Full noise prediction, unsplit.
    pub fn predict_eps(&self, x: &Matrix, t: usize) -> Result<Matrix> {
        self.check_level(t)?;
        let mut out = self.net.predict(&self.inputs(x, t)?)?;
        self.finish(x, |_| t, &mut out);
        Ok(out)
    }

    fn check_level(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.embedding.horizon {
            return Err(Error::StepOutOfRange {
                t,
                max: self.embedding.horizon,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e))
    }

    pub fn to_json(&self) -> String {
        let file = DenoiserFile {
            format: FORMAT_TAG.into(),
            embedding: self.embedding,
            precond: self.precond.clone(),
            mlp: serde_json::from_str(&self.net.to_json()).expect("mlp json"),
        };
        serde_json::to_string(&file).expect("denoiser serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DenoiserFile = serde_json::from_str(text).map_err(|e| Error::format("<denoiser>", e))?;
        if file.format != FORMAT_TAG {
            return Err(Error::format(
                "<denoiser>",
                format!("unsupported format tag `{}`", file.format),
            ));
        }
        let net = Mlp::from_json(&file.mlp.to_string())?;
        Self::new(net, file.embedding, file.precond)
    }
}

/// Trains `denoiser` in place to predict the noise of `forward_diffuse`
/// under mean squared error; returns the mean loss of every epoch.
pub fn train_denoiser(
    data: &[LabeledSample],
    sched: &NoiseSchedule,
    denoiser: &mut Denoiser,
    cfg: &DenoiserConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("denoiser training data"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument("batch size and epochs must be positive".into()));
    }
    denoiser.check_schedule(sched)?;
    let d = denoiser.data_dim();
    for s in data {
        check_dim("training sample", d, s.x0.len())?;
    }
    let mut rng = RngStream::new(cfg.seed).derive(0x7EA1);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let steps = sched.steps();

    for epoch in 0..cfg.epochs {
        opt.lr = if cfg.epochs > 1 {
            cfg.lr + (cfg.lr_final - cfg.lr) * epoch as f64 / (cfg.epochs - 1) as f64
        } else {
            cfg.lr
        };
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut xt = Vec::with_capacity(b * d);
            let mut target = Vec::with_capacity(b * d);
            let mut ts = Vec::with_capacity(b);
            for &i in chunk {
                let t = rng.range(1, steps + 1);
                let eps = rng.normal_vec(d);
                xt.extend(diffuse_with(&data[i].x0, sched.alpha_bar()[t - 1], &eps));
                target.extend(eps);
                ts.push(t);
            }
            let xt = Matrix::from_raw(b, d, xt);
            let input = denoiser.inputs_mixed(&xt, &ts);
            let (raw, cache) = denoiser.net.forward_batch(&input)?;
            let mut eps = raw;
            denoiser.finish(&xt, |r| ts[r], &mut eps);
            let norm = (b * d) as f64;
            let mut grad = eps;
            let mut loss = 0.0;
            for (g, y) in grad.data_mut().iter_mut().zip(&target) {
                let r = *g - y;
                loss += r * r;
                *g = 2.0 * r / norm;
            }
            if let Some(p) = &denoiser.precond {
                // ∂ε/∂F = b
                for (r, &t) in ts.iter().enumerate() {
                    let (_, coef) = p.coefficients(t);
                    grad.row_mut(r).iter_mut().for_each(|g| *g *= coef);
                }
            }
            total += loss;
            count += b * d;
            let (grads, _) = denoiser.net.backward(&cache, &grad)?;
            opt.tick();
            for (slot, (w, bias)) in denoiser.net.params_mut().enumerate() {
                opt.update(2 * slot, w.data_mut(), grads.weights[slot].data());
                opt.update(2 * slot + 1, bias, &grads.biases[slot]);
            }
        }
        let epoch_loss = total / count as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
        curve.push(epoch_loss);
    }
    Ok(curve)
}
