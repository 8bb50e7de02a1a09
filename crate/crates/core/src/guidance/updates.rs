use serde::{Deserialize, Serialize};

use crate::diffcore::{predict_x0_batch, NoiseSchedule};
use crate::error::{check_dim, Error, Result};
use crate::hspace::{adp_gradient, classify_h, AttributePredictor, DistributionLoss, HClassifierBank, HDataset};
use crate::metrics::EvalClassifier;
use crate::numkit::{l2_norm, Matrix, RngStream};
use crate::synthdata::ReferenceDistribution;

/// Per-call summary returned with every update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    /// Mean per-sample norm of the unscaled update direction.
    pub grad_norm: f64,
    /// Summed distribution loss, where one is defined.
    pub loss: f64,
}

fn mean_row_norm(m: &Matrix) -> f64 {
    if m.rows() == 0 {
        return 0.0;
    }
    m.row_iter().map(l2_norm).sum::<f64>() / m.rows() as f64
}

/// `h − γ Σ_k ∂L_k/∂h` over every predictor/reference pair, with all
/// gradients taken at the incoming `h`.
pub fn distribution_update(
    pairs: &[(&dyn AttributePredictor, &ReferenceDistribution)],
    loss: &dyn DistributionLoss,
    h: Matrix,
    t: usize,
    gamma: f64,
) -> Result<(Matrix, UpdateStats)> {
    let mut total = Matrix::zeros(h.rows(), h.cols());
    let mut loss_sum = 0.0;
    for (pred, reference) in pairs {
        let g = adp_gradient(*pred, &h, t, reference, loss)?;
        total.axpy(1.0, &g.grads)?;
        loss_sum += g.loss;
    }
    let stats = UpdateStats {
        grad_norm: mean_row_norm(&total),
        loss: loss_sum,
    };
    if gamma == 0.0 {
        return Ok((h, stats));
    }
    let mut out = h;
    out.axpy(-gamma, &total)?;
    Ok((out, stats))
}

/// `∇_h log softmax_c(W_t h + b_t) = w_c − Σ_k p_k w_k`.
pub fn log_prob_grad_h(bank: &HClassifierBank, h: &[f64], t: usize, class: u8) -> Result<Vec<f64>> {
    let p = classify_h(bank, h, t)?;
    let (w0, w1) = bank.head(t)?;
    let (c0, c1) = if class == 0 {
        (1.0 - p[0], -p[1])
    } else {
        (-p[0], 1.0 - p[1])
    };
    Ok(w0.iter().zip(w1).map(|(a, b)| c0 * a + c1 * b).collect())
}

/// Per-sample ascent on the log-probability of each sample's preset class,
/// summed over banks; `targets[k][i]` is sample `i`'s class for bank `k`.
pub fn sample_update(
    banks: &[&HClassifierBank],
    targets: &[Vec<u8>],
    h: Matrix,
    t: usize,
    gamma: f64,
) -> Result<(Matrix, UpdateStats)> {
    check_dim("sample guidance target lists", banks.len(), targets.len())?;
    let mut total = Matrix::zeros(h.rows(), h.cols());
    for (bank, tg) in banks.iter().zip(targets) {
        if tg.len() != h.rows() {
            return Err(Error::InvalidArgument(format!(
                "quota assignment has {} entries for a batch of {}",
                tg.len(),
                h.rows()
            )));
        }
        for (i, &c) in tg.iter().enumerate() {
            let g = log_prob_grad_h(bank, h.row(i), t, c)?;
            for (acc, v) in total.row_mut(i).iter_mut().zip(g) {
                *acc += v;
            }
        }
    }
    let stats = UpdateStats {
        grad_norm: mean_row_norm(&total),
        loss: f64::NAN,
    };
    if gamma == 0.0 {
        return Ok((h, stats));
    }
    let mut out = h;
    out.axpy(gamma, &total)?;
    Ok((out, stats))
}

/// `∂x̂₀/∂ε = −√(1−ᾱ_t)/√ᾱ_t` (a scalar multiple of the identity).
pub fn x0_eps_factor(alpha_bar: f64) -> f64 {
    -(1.0 - alpha_bar).sqrt() / alpha_bar.sqrt()
}

/// `ε + γ ∇_ε log f(c | x̂₀(x_t, ε))` with `f` a clean-data classifier.
pub fn universal_update(
    clf: &EvalClassifier,
    targets: &[u8],
    x_t: &Matrix,
    eps: Matrix,
    t: usize,
    sched: &NoiseSchedule,
    gamma: f64,
) -> Result<(Matrix, UpdateStats)> {
    if targets.len() != eps.rows() {
        return Err(Error::InvalidArgument(format!(
            "quota assignment has {} entries for a batch of {}",
            targets.len(),
            eps.rows()
        )));
    }
    let x0 = predict_x0_batch(x_t, t, &eps, sched)?;
    let (mut g, _) = clf.log_prob_grad(&x0, targets)?;
    g.scale(x0_eps_factor(sched.alpha_bar_at(t)?));
    let stats = UpdateStats {
        grad_norm: mean_row_norm(&g),
        loss: f64::NAN,
    };
    if gamma == 0.0 {
        return Ok((eps, stats));
    }
    let mut out = eps;
    out.axpy(gamma, &g)?;
    Ok((out, stats))
}

/// Per-level editing directions for one attribute: the mean `h_t` of the
/// minority class minus the mean of the other class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditDirections {
    pub attribute: String,
    /// Under-represented class; edits push toward it.
    pub minority: u8,
    /// `dirs[t − 1]`.
    pub dirs: Vec<Vec<f64>>,
}

impl EditDirections {
    pub fn at(&self, t: usize) -> Result<&[f64]> {
        if t == 0 || t > self.dirs.len() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.dirs.len(),
            });
        }
        Ok(&self.dirs[t - 1])
    }
}

/// Class-1 minus class-0 mean of `h_t` for every level.
pub fn class_mean_difference(hd: &HDataset, attribute: &str) -> Result<Vec<Vec<f64>>> {
    let labels = hd.sample_labels(attribute)?;
    let mut out = Vec::with_capacity(hd.steps());
    for t in 1..=hd.steps() {
        let (m, ids) = hd.level(t);
        let mut sums = [vec![0.0; hd.h_width()], vec![0.0; hd.h_width()]];
        let mut counts = [0usize; 2];
        for (row, id) in m.row_iter().zip(&ids) {
            let c = labels[id] as usize;
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(row) {
                *s += v;
            }
        }
        if counts[0] == 0 || counts[1] == 0 {
            return Err(Error::SingleClass(attribute.into()));
        }
        out.push(
            sums[1]
                .iter()
                .zip(&sums[0])
                .map(|(a, b)| a / counts[1] as f64 - b / counts[0] as f64)
                .collect(),
        );
    }
    Ok(out)
}

/// Directions toward `minority`, the class the edits add.
pub fn compute_edit_directions(hd: &HDataset, attribute: &str, minority: u8) -> Result<EditDirections> {
    if minority > 1 {
        return Err(Error::InvalidArgument(format!("class {minority} is not binary")));
    }
    let mut dirs = class_mean_difference(hd, attribute)?;
    if minority == 0 {
        dirs.iter_mut().for_each(|d| d.iter_mut().for_each(|v| *v = -*v));
    }
    Ok(EditDirections {
        attribute: attribute.into(),
        minority,
        dirs,
    })
}

/// `h_i + s·dir_t` for every masked sample.
pub fn latent_edit_update(
    dirs: &EditDirections,
    mask: &[bool],
    h: Matrix,
    t: usize,
    scale: f64,
) -> Result<(Matrix, UpdateStats)> {
    if mask.len() != h.rows() {
        return Err(Error::InvalidArgument(format!(
            "edit mask has {} entries for a batch of {}",
            mask.len(),
            h.rows()
        )));
    }
    let dir = dirs.at(t)?;
    check_dim("edit direction width", h.cols(), dir.len())?;
    let stats = UpdateStats {
        grad_norm: l2_norm(dir),
        loss: f64::NAN,
    };
    if scale == 0.0 {
        return Ok((h, stats));
    }
    let mut out = h;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for (v, d) in out.row_mut(i).iter_mut().zip(dir) {
                *v += scale * d;
            }
        }
    }
    Ok((out, stats))
}

/// Exactly `round(n·p_c)` indices per class (largest remainder, so counts
/// sum to `n`), in random order.
pub fn quota_assignment(n: usize, probs: &[f64], rng: &mut RngStream) -> Vec<u8> {
    let raw: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .total_cmp(&(raw[a] - raw[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>().min(n);
    for &c in order.iter().cycle().take(left * probs.len().max(1)) {
        if left == 0 {
            break;
        }
        counts[c] += 1;
        left -= 1;
    }
    let mut out: Vec<u8> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c as u8, k))
        .collect();
    out.truncate(n);
    rng.shuffle(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::diffcore::make_schedule;
    use crate::hspace::{ChiSquare, HEntry};
    use crate::metrics::{train_eval_classifier, ClassifierConfig};
    use crate::numkit::{gaussian_sample, log_softmax};
    use crate::synthdata::AttributedMixture;

    fn random_bank(rng: &mut RngStream, steps: usize, width: usize) -> HClassifierBank {
        let w = gaussian_sample(rng, 2 * steps, width);
        HClassifierBank::new("a", steps, w, rng.normal_vec(2 * steps)).unwrap()
    }

    #[test]
    fn zero_strength_is_bitwise_identity() {
        let mut rng = RngStream::new(1);
        let bank = random_bank(&mut rng, 3, 4);
        let h = gaussian_sample(&mut rng, 7, 4);
        let r = ReferenceDistribution::single("a", &[0.3, 0.7]).unwrap();
        let pairs: [(&dyn AttributePredictor, &ReferenceDistribution); 1] = [(&bank, &r)];
        let (out, stats) = distribution_update(&pairs, &ChiSquare::default(), h.clone(), 2, 0.0).unwrap();
        assert_eq!(out, h);
        assert!(stats.grad_norm > 0.0);
        let targets = vec![vec![0, 1, 1, 0, 1, 0, 0]];
        assert_eq!(sample_update(&[&bank], &targets, h.clone(), 2, 0.0).unwrap().0, h);
    }

    #[test]
    fn distribution_update_is_permutation_equivariant() {
        let mut rng = RngStream::new(2);
        let bank = random_bank(&mut rng, 2, 3);
        let h = gaussian_sample(&mut rng, 6, 3);
        let r = ReferenceDistribution::single("a", &[0.5, 0.5]).unwrap();
        let pairs: [(&dyn AttributePredictor, &ReferenceDistribution); 1] = [(&bank, &r)];
        let perm = [4, 0, 5, 2, 1, 3];
        let (a, _) = distribution_update(&pairs, &ChiSquare::default(), h.clone(), 1, 50.0).unwrap();
        let (b, _) = distribution_update(&pairs, &ChiSquare::default(), h.select_rows(&perm), 1, 50.0).unwrap();
        let a = a.select_rows(&perm);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_direction_matches_finite_differences() {
        let mut rng = RngStream::new(3);
        for _ in 0..10 {
            let bank = random_bank(&mut rng, 4, 5);
            let h = rng.normal_vec(5);
            let t = rng.range(1, 5);
            let class = rng.range(0, 2) as u8;
            let g = log_prob_grad_h(&bank, &h, t, class).unwrap();
            for j in 0..5 {
                let lp = |d: f64| {
                    let mut v = h.clone();
                    v[j] += d;
                    let l = bank.logits(&v, t).unwrap();
                    log_softmax(&l)[class as usize]
                };
                let fd = (lp(1e-6) - lp(-1e-6)) / 2e-6;
                assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1.0), "{fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn universal_update_matches_composite_finite_differences() {
        let world = AttributedMixture::default_world();
        let data = world.sample_dataset(300, &mut RngStream::new(4));
        let cfg = ClassifierConfig {
            epochs: 3,
            min_accuracy: 0.0,
            ..ClassifierConfig::default()
        };
        let clf = train_eval_classifier(&data, "a1", &cfg).unwrap();
        let sched = make_schedule(10, 1e-3, 0.3).unwrap();
        let mut rng = RngStream::new(5);
        let x_t = gaussian_sample(&mut rng, 3, 2);
        let eps = gaussian_sample(&mut rng, 3, 2);
        let targets = [1, 0, 1];
        let (t, gamma) = (6, 0.25);
        let (out, _) = universal_update(&clf, &targets, &x_t, eps.clone(), t, &sched, gamma).unwrap();
        let ab = sched.alpha_bar_at(t).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                // log f(c | (x_t − √(1−ᾱ) ε) / √ᾱ) as a function of ε
                let lp = |d: f64| {
                    let mut e = eps.row(r).to_vec();
                    e[c] += d;
                    let x0: Vec<f64> = (0..2)
                        .map(|k| (x_t.get(r, k) - (1.0 - ab).sqrt() * e[k]) / ab.sqrt())
                        .collect();
                    clf.probs(&x0).unwrap()[targets[r] as usize].ln()
                };
                let fd = (lp(1e-6) - lp(-1e-6)) / 2e-6;
                let got = (out.get(r, c) - eps.get(r, c)) / gamma;
                assert!((fd - got).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} vs {got}");
            }
        }
    }

    #[test]
    fn chain_factor() {
        // x̂₀ = (x − √(1−ᾱ) ε)/√ᾱ is linear in ε with this slope
        let ab: f64 = 0.37;
        let x0 = |e: f64| (1.2 - (1.0 - ab).sqrt() * e) / ab.sqrt();
        assert!(((x0(1.0) - x0(0.0)) - x0_eps_factor(ab)).abs() < 1e-14);
    }

    #[test]
    fn quotas_are_exact_and_shuffled() {
        let mut rng = RngStream::new(6);
        let q = quota_assignment(100, &[0.5, 0.5], &mut rng);
        assert_eq!(q.iter().filter(|&&c| c == 1).count(), 50);
        assert_ne!(q[..50], [0u8; 50]);
        let q = quota_assignment(7, &[0.25, 0.25, 0.25, 0.25], &mut rng);
        assert_eq!(q.len(), 7);
        let q = quota_assignment(10, &[0.8, 0.2], &mut rng);
        assert_eq!(q.iter().filter(|&&c| c == 1).count(), 2);
    }

    fn toy_hdataset(points: &[(Vec<f64>, u8)], steps: usize) -> HDataset {
        let mut entries = Vec::new();
        for (id, (h, y)) in points.iter().enumerate() {
            for t in 1..=steps {
                entries.push(HEntry {
                    t,
                    h: h.iter().map(|v| v * t as f64).collect(),
                    labels: BTreeMap::from([("a".to_string(), *y)]),
                    sample_id: id,
                });
            }
        }
        HDataset::new(steps, points[0].0.len(), entries).unwrap()
    }

    #[test]
    fn edit_directions_match_class_means() {
        let pts = vec![
            (vec![1.0, 0.0], 1),
            (vec![3.0, 2.0], 1),
            (vec![-1.0, 0.5], 0),
            (vec![0.0, 0.0], 0),
            (vec![-2.0, 1.0], 0),
        ];
        let hd = toy_hdataset(&pts, 3);
        let dirs = compute_edit_directions(&hd, "a", 1).unwrap();
        // class-1 mean (2, 1), class-0 mean (−1, 0.5), scaled by t
        for t in 1..=3 {
            let want = [3.0 * t as f64, 0.5 * t as f64];
            for (g, w) in dirs.at(t).unwrap().iter().zip(want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
        let toward_zero = compute_edit_directions(&hd, "a", 0).unwrap();
        assert_eq!(toward_zero.dirs[0], vec![-3.0, -0.5]);
    }

    #[test]
    fn mirrored_classes_give_antisymmetric_directions() {
        let pts = vec![
            (vec![1.0, 2.0], 1),
            (vec![-1.0, -2.0], 0),
            (vec![0.5, 1.0], 1),
            (vec![-0.5, -1.0], 0),
        ];
        let swapped: Vec<_> = pts.iter().map(|(h, y)| (h.clone(), 1 - y)).collect();
        let a = class_mean_difference(&toy_hdataset(&pts, 2), "a").unwrap();
        let b = class_mean_difference(&toy_hdataset(&swapped, 2), "a").unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn latent_edit_moves_only_masked_rows() {
        let dirs = EditDirections {
            attribute: "a".into(),
            minority: 1,
            dirs: vec![vec![1.0, -1.0]; 2],
        };
        let h = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let (out, _) = latent_edit_update(&dirs, &[true, false], h.clone(), 2, 0.5).unwrap();
        assert_eq!(out.row(0), &[0.5, -0.5]);
        assert_eq!(out.row(1), h.row(1));
        assert_eq!(
            latent_edit_update(&dirs, &[true, true], h.clone(), 1, 0.0).unwrap().0,
            h
        );
        assert!(latent_edit_update(&dirs, &[true], h, 1, 1.0).is_err());
    }
}
