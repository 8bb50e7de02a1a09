use super::denoiser::Denoiser;
use super::schedule::NoiseSchedule;
use crate::error::{check_dim, Error, Result};
use crate::numkit::{gaussian_sample, Matrix, RngStream};

/// `ᾱ` below this makes `x̂_0` numerically meaningless.
pub const ALPHA_BAR_FLOOR: f64 = 1e-12;

/// Clean-point estimate `(x_t − √(1 − ᾱ_t)·eps) / √ᾱ_t`.
pub fn ddim_predict_x0(x_t: &[f64], t: usize, eps_pred: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dim("ddim_predict_x0 eps", x_t.len(), eps_pred.len())?;
    let ab = sched.alpha_bar_at(t)?;
    if ab < ALPHA_BAR_FLOOR {
        return Err(Error::InvalidArgument(format!(
            "alpha_bar {ab} at level {t} below floor"
        )));
    }
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.iter().zip(eps_pred).map(|(x, e)| (x - s * e) / a).collect())
}

/// Deterministic DDIM update from level `t` to `t − 1`.
pub fn ddim_step(x_t: &[f64], t: usize, eps_pred: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::InvalidArgument("ddim_step needs t >= 1".into()));
    }
    let x0 = ddim_predict_x0(x_t, t, eps_pred, sched)?;
    Ok(renoise(&x0, eps_pred, sched.alpha_bar_at(t - 1)?))
}

fn renoise(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

/// Row-wise `ddim_step` over a batch.
pub fn ddim_step_batch(x_t: &Matrix, t: usize, eps: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    check_dim("ddim_step_batch rows", x_t.rows(), eps.rows())?;
    check_dim("ddim_step_batch cols", x_t.cols(), eps.cols())?;
    let mut data = Vec::with_capacity(x_t.rows() * x_t.cols());
    for (x, e) in x_t.row_iter().zip(eps.row_iter()) {
        data.extend(ddim_step(x, t, e, sched)?);
    }
    Ok(Matrix::from_raw(x_t.rows(), x_t.cols(), data))
}

/// Row-wise `ddim_predict_x0` over a batch.
pub fn predict_x0_batch(x_t: &Matrix, t: usize, eps: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    check_dim("predict_x0_batch rows", x_t.rows(), eps.rows())?;
    let mut data = Vec::with_capacity(x_t.rows() * x_t.cols());
    for (x, e) in x_t.row_iter().zip(eps.row_iter()) {
        data.extend(ddim_predict_x0(x, t, e, sched)?);
    }
    Ok(Matrix::from_raw(x_t.rows(), x_t.cols(), data))
}

/// Per-step interception point in batched sampling.
///
/// At every level `t` (from `T` down to 1) the sampler computes the batch's
/// bottleneck activations, passes them through [`GuidanceHook::guide_h`],
/// decodes the (possibly modified) activations into a noise prediction,
/// passes that through [`GuidanceHook::guide_eps`], and takes a DDIM step.
/// Both methods default to the identity.
pub trait GuidanceHook {
    fn guide_h(&mut self, h: Matrix, _t: usize) -> Result<Matrix> {
        Ok(h)
    }

    fn guide_eps(&mut self, _x_t: &Matrix, eps: Matrix, _t: usize, _sched: &NoiseSchedule) -> Result<Matrix> {
        Ok(eps)
    }
}

/// Hook that changes nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityHook;

impl GuidanceHook for IdentityHook {}

/// One recorded level of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub t: usize,
    pub x_t: Vec<f64>,
    pub h_t: Vec<f64>,
}

/// DDIM inversion record of one clean point, levels `1..=T` in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn terminal(&self) -> &[f64] {
        &self.steps.last().expect("non-empty trajectory").x_t
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub samples: Matrix,
    /// Bottleneck activations as seen by the decoder, `h_trace[T - t]` for
    /// level `t`.
    pub h_trace: Vec<Matrix>,
}

/// Runs the deterministic sampler from `x_T` (rows) down to level 0.
pub fn sample_from(
    x_init: Matrix,
    sched: &NoiseSchedule,
    denoiser: &Denoiser,
    mut hook: Option<&mut dyn GuidanceHook>,
    record_h: bool,
) -> Result<SampleOutput> {
    check_dim("sample_from width", denoiser.data_dim(), x_init.cols())?;
    denoiser.check_schedule(sched)?;
    let n = x_init.rows();
    let mut x = x_init;
    let mut h_trace = Vec::new();
    for t in (1..=sched.steps()).rev() {
        let mut h = denoiser.encode(&x, t)?;
        if let Some(hook) = hook.as_deref_mut() {
            let w = h.cols();
            h = hook.guide_h(h, t)?;
            if h.shape() != (n, w) {
                return Err(Error::HookShape {
                    rows: h.rows(),
                    cols: h.cols(),
                    want_rows: n,
                    want_cols: w,
                });
            }
        }
        let mut eps = denoiser.decode(&h, &x, t)?;
        if let Some(hook) = hook.as_deref_mut() {
            let shape = eps.shape();
            eps = hook.guide_eps(&x, eps, t, sched)?;
            if eps.shape() != shape {
                return Err(Error::HookShape {
                    rows: eps.rows(),
                    cols: eps.cols(),
                    want_rows: shape.0,
                    want_cols: shape.1,
                });
            }
        }
        if record_h {
            h_trace.push(h);
        }
        x = ddim_step_batch(&x, t, &eps, sched)?;
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("sampler state at level {t}")));
        }
    }
    Ok(SampleOutput { samples: x, h_trace })
}

/// Draws `n` standard-normal starting points from `rng` and samples.
pub fn sample_batch(
    n: usize,
    sched: &NoiseSchedule,
    denoiser: &Denoiser,
    rng: &mut RngStream,
    hook: Option<&mut dyn GuidanceHook>,
) -> Result<SampleOutput> {
    if n == 0 {
        return Err(Error::Empty("sample batch"));
    }
    let x_t = gaussian_sample(rng, n, denoiser.data_dim());
    sample_from(x_t, sched, denoiser, hook, true)
}

/// Deterministic DDIM inversion of a batch of clean points (rows).
///
/// Each level-`t` update evaluates the noise at the previous state and
/// level `t`, then optionally refines it by re-evaluating at the new state
/// (`refinements` fixed-point passes). `h_t` is the encoder output at the
/// final `(x_t, t)`, i.e. what the sampler sees at that level.
pub fn ddim_invert_batch(
    x0: &Matrix,
    sched: &NoiseSchedule,
    denoiser: &Denoiser,
    refinements: usize,
) -> Result<Vec<Trajectory>> {
    check_dim("ddim_invert width", denoiser.data_dim(), x0.cols())?;
    denoiser.check_schedule(sched)?;
    let n = x0.rows();
    let mut trajs = vec![
        Trajectory {
            steps: Vec::with_capacity(sched.steps())
        };
        n
    ];
    let mut x = x0.clone();
    for t in 1..=sched.steps() {
        let ab_prev = sched.alpha_bar_at(t - 1)?;
        let ab = sched.alpha_bar_at(t)?;
        let mut eps = denoiser.predict_eps(&x, t)?;
        let mut next = invert_step(&x, &eps, ab_prev, ab);
        for _ in 0..refinements {
            eps = denoiser.predict_eps(&next, t)?;
            next = invert_step(&x, &eps, ab_prev, ab);
        }
        if !next.all_finite() {
            return Err(Error::NonFinite(format!("inversion state at level {t}")));
        }
        let h = denoiser.encode(&next, t)?;
        for (i, traj) in trajs.iter_mut().enumerate() {
            traj.steps.push(TrajectoryStep {
                t,
                x_t: next.row(i).to_vec(),
                h_t: h.row(i).to_vec(),
            });
        }
        x = next;
    }
    Ok(trajs)
}

fn invert_step(x_prev: &Matrix, eps: &Matrix, ab_prev: f64, ab: f64) -> Matrix {
    let (ap, sp) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x_prev
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * (x - sp * e) / ap + s * e)
        .collect();
    Matrix::from_raw(x_prev.rows(), x_prev.cols(), data)
}

/// Single-point inversion.
pub fn ddim_invert(x0: &[f64], sched: &NoiseSchedule, denoiser: &Denoiser, refinements: usize) -> Result<Trajectory> {
    let m = Matrix::from_vec(1, x0.len(), x0.to_vec())?;
    Ok(ddim_invert_batch(&m, sched, denoiser, refinements)?.remove(0))
}
