use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::HDataset;
use crate::error::{check_dim, Error, Result};
use crate::numkit::{dot, softmax, Adam, Matrix, RngStream};

const FORMAT_TAG: &str = "fairdiff.hbank.v1";

/// One two-class linear head per diffusion level, stored jointly as a
/// `(2T × width)` weight matrix: rows `2(t−1)` and `2(t−1)+1` are the class-0
/// and class-1 logits of level `t ∈ 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct HClassifierBank {
    attribute: String,
    steps: usize,
    weights: Matrix,
    bias: Vec<f64>,
    pub meta: BankMeta,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BankMeta {
    pub dataset_size: usize,
    pub seed: u64,
    /// Held-out accuracy per level, `accuracy[t - 1]`.
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub holdout: f64,
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 0.001,
            epochs: 5,
            holdout: 0.2,
            seed: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    format: String,
    attribute: String,
    steps: usize,
    h_width: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    meta: BankMeta,
}

impl HClassifierBank {
    pub fn new(attribute: &str, steps: usize, weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        check_dim("bank weight rows", 2 * steps, weights.rows())?;
        check_dim("bank bias", 2 * steps, bias.len())?;
        if !weights.all_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("bank parameters".into()));
        }
        Ok(Self {
            attribute: attribute.into(),
            steps,
            weights,
            bias,
            meta: BankMeta::default(),
        })
    }

    pub fn zeros(attribute: &str, steps: usize, h_width: usize) -> Self {
        Self::new(
            attribute,
            steps,
            Matrix::zeros(2 * steps, h_width),
            vec![0.0; 2 * steps],
        )
        .expect("zero bank is valid")
    }

    pub fn attribute(&self) -> &str {
        &self.attribute
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn h_width(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> (&mut Matrix, &mut Vec<f64>) {
        (&mut self.weights, &mut self.bias)
    }

    fn slot(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(Error::StepOutOfRange { t, max: self.steps });
        }
        Ok(2 * (t - 1))
    }

    /// Class rows `(w_0, w_1)` of level `t`.
    pub fn head(&self, t: usize) -> Result<(&[f64], &[f64])> {
        let s = self.slot(t)?;
        Ok((self.weights.row(s), self.weights.row(s + 1)))
    }

    /// Logits `W_t h + b_t`.
    pub fn logits(&self, h: &[f64], t: usize) -> Result<[f64; 2]> {
        let s = self.slot(t)?;
        check_dim("classify_h width", self.h_width(), h.len())?;
        Ok([
            dot(self.weights.row(s), h) + self.bias[s],
            dot(self.weights.row(s + 1), h) + self.bias[s + 1],
        ])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&BankFile {
            format: FORMAT_TAG.into(),
            attribute: self.attribute.clone(),
            steps: self.steps,
            h_width: self.h_width(),
            weights: self.weights.data().to_vec(),
            bias: self.bias.clone(),
            meta: self.meta.clone(),
        })
        .expect("bank serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: BankFile = serde_json::from_str(text).map_err(|e| Error::format("<hbank>", e))?;
        if f.format != FORMAT_TAG {
            return Err(Error::format(
                "<hbank>",
                format!("unsupported format tag `{}`", f.format),
            ));
        }
        let w = Matrix::from_vec(2 * f.steps, f.h_width, f.weights)?;
        let mut bank = Self::new(&f.attribute, f.steps, w, f.bias)?;
        bank.meta = f.meta;
        Ok(bank)
    }
}

/// Two-class softmax of level `t`'s head.
pub fn classify_h(bank: &HClassifierBank, h: &[f64], t: usize) -> Result<Vec<f64>> {
    Ok(softmax(&bank.logits(h, t)?))
}

/// Held-out accuracy per level, as exported: `(t, accuracy)`.
pub fn accuracy_table_csv(accuracy: &[f64]) -> String {
    let mut out = String::from("t,accuracy\n");
    for (i, a) in accuracy.iter().enumerate() {
        let _ = writeln!(out, "{},{a:.6}", i + 1);
    }
    out
}

/// Stratified split of sample ids into `(train, holdout)`.
pub fn stratified_split(
    labels: &std::collections::BTreeMap<usize, u8>,
    holdout: f64,
    rng: &mut RngStream,
) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..2u8 {
        let mut ids: Vec<usize> = labels.iter().filter(|(_, &y)| y == class).map(|(&id, _)| id).collect();
        rng.shuffle(&mut ids);
        let n_test = (ids.len() as f64 * holdout).round() as usize;
        test.extend_from_slice(&ids[..n_test]);
        train.extend_from_slice(&ids[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Fits all heads jointly as one `2T`-output linear layer: minibatches
/// are drawn from every `(sample, level)` entry of a stratified training
/// split, each entry scored by its own level's head, and the whole layer
/// is updated with Adam. Reports held-out accuracy per level.
pub fn train_hbank(hd: &HDataset, attribute: &str, cfg: &BankConfig) -> Result<HClassifierBank> {
    if !hd.has_attribute(attribute) {
        return Err(Error::UnknownAttribute(attribute.into()));
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.holdout) {
        return Err(Error::InvalidArgument("bad bank training configuration".into()));
    }
    let labels = hd.sample_labels(attribute)?;
    let ones = labels.values().filter(|&&y| y == 1).count();
    if ones == 0 || ones == labels.len() {
        return Err(Error::SingleClass(attribute.into()));
    }
    let root = RngStream::new(cfg.seed);
    let (train_ids, test_ids) = stratified_split(&labels, cfg.holdout, &mut root.derive(1));
    let train_set: BTreeSet<usize> = train_ids.iter().copied().collect();

    let entries = hd.entries();
    let mut order: Vec<usize> = (0..entries.len())
        .filter(|&i| train_set.contains(&entries[i].sample_id))
        .collect();
    let width = hd.h_width();
    let rows = 2 * hd.steps();
    let mut weights = Matrix::zeros(rows, width);
    let mut bias = vec![0.0; rows];
    let mut opt = Adam::new(cfg.lr);
    let mut rng = root.derive(2);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut gw = Matrix::zeros(rows, width);
            let mut gb = vec![0.0; rows];
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let e = &entries[i];
                let r = 2 * (e.t - 1);
                let p = softmax(&[
                    dot(weights.row(r), &e.h) + bias[r],
                    dot(weights.row(r + 1), &e.h) + bias[r + 1],
                ]);
                let y = labels[&e.sample_id] as usize;
                for c in 0..2 {
                    // ∂CE/∂logit_c = p_c − [c = y]
                    let g = (p[c] - if y == c { 1.0 } else { 0.0 }) * scale;
                    gb[r + c] += g;
                    for (acc, hv) in gw.row_mut(r + c).iter_mut().zip(&e.h) {
                        *acc += g * hv;
                    }
                }
            }
            opt.tick();
            opt.update(0, weights.data_mut(), gw.data());
            opt.update(1, &mut bias, &gb);
        }
    }

    let mut bank = HClassifierBank::new(attribute, hd.steps(), weights, bias)?;
    let accuracy = if test_ids.is_empty() {
        vec![f64::NAN; hd.steps()]
    } else {
        bank_accuracy(&bank, &hd.subset(&test_ids))?
    };
    bank.meta = BankMeta {
        dataset_size: labels.len(),
        seed: cfg.seed,
        accuracy,
    };
    Ok(bank)
}

/// Held-out accuracy of an already-trained bank on another h-dataset.
pub fn bank_accuracy(bank: &HClassifierBank, hd: &HDataset) -> Result<Vec<f64>> {
    let labels = hd.sample_labels(bank.attribute())?;
    (1..=bank.steps())
        .map(|t| {
            let (hs, ids) = hd.level(t);
            let mut correct = 0usize;
            for (h, id) in hs.row_iter().zip(&ids) {
                let l = bank.logits(h, t)?;
                if (l[1] > l[0]) == (labels[id] == 1) {
                    correct += 1;
                }
            }
            Ok(correct as f64 / ids.len().max(1) as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hspace::dataset::HEntry;
    use std::collections::BTreeMap;

    fn toy_dataset(n: usize, steps: usize, rng: &mut RngStream) -> HDataset {
        let mut entries = Vec::new();
        for id in 0..n {
            let y = (id % 2) as u8;
            for t in 1..=steps {
                let sign = if y == 1 { 1.0 } else { -1.0 };
                let h = vec![sign * (1.0 + rng.uniform()), rng.normal(), rng.normal()];
                entries.push(HEntry {
                    t,
                    h,
                    labels: BTreeMap::from([("a".into(), y)]),
                    sample_id: id,
                });
            }
        }
        HDataset::new(steps, 3, entries).unwrap()
    }

    #[test]
    fn default_hyperparameters() {
        let c = BankConfig::default();
        assert_eq!((c.batch_size, c.lr, c.epochs), (64, 0.001, 5));
    }

    #[test]
    fn zero_weights_give_half() {
        let bank = HClassifierBank::zeros("a", 4, 3);
        assert_eq!(classify_h(&bank, &[1.0, 2.0, 3.0], 2).unwrap(), vec![0.5, 0.5]);
        assert!(classify_h(&bank, &[1.0, 2.0], 2).is_err());
        assert!(classify_h(&bank, &[1.0, 2.0, 3.0], 0).is_err());
        assert!(classify_h(&bank, &[1.0, 2.0, 3.0], 5).is_err());
    }

    #[test]
    fn saturated_logits() {
        let mut bank = HClassifierBank::zeros("a", 1, 1);
        bank.weights_mut().1[0] = 800.0;
        let p = classify_h(&bank, &[0.0], 1).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
    }

    #[test]
    fn matches_independent_softmax() {
        let mut rng = RngStream::new(3);
        let w = crate::numkit::gaussian_sample(&mut rng, 6, 4);
        let b = rng.normal_vec(6);
        let bank = HClassifierBank::new("a", 3, w.clone(), b.clone()).unwrap();
        for t in 1..=3 {
            let h = rng.normal_vec(4);
            let p = classify_h(&bank, &h, t).unwrap();
            let z0: f64 = (0..4).map(|i| w.get(2 * t - 2, i) * h[i]).sum::<f64>() + b[2 * t - 2];
            let z1: f64 = (0..4).map(|i| w.get(2 * t - 1, i) * h[i]).sum::<f64>() + b[2 * t - 1];
            let p1 = z1.exp() / (z0.exp() + z1.exp());
            assert!((p[1] - p1).abs() < 1e-12);
            assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn separable_toy_is_perfect() {
        let mut rng = RngStream::new(5);
        let hd = toy_dataset(400, 3, &mut rng);
        let cfg = BankConfig {
            epochs: 20,
            lr: 0.01,
            ..BankConfig::default()
        };
        let bank = train_hbank(&hd, "a", &cfg).unwrap();
        assert!(bank.meta.accuracy.iter().all(|&a| a == 1.0), "{:?}", bank.meta.accuracy);
        assert_eq!(bank.meta.dataset_size, 400);
        // the split is stratified 80/20
        let labels = hd.sample_labels("a").unwrap();
        let (tr, te) = stratified_split(&labels, 0.2, &mut RngStream::new(0));
        assert_eq!((tr.len(), te.len()), (320, 80));
        assert_eq!(te.iter().filter(|id| labels[id] == 1).count(), 40);
    }

    #[test]
    fn single_class_and_unknown_attribute() {
        let mut rng = RngStream::new(5);
        let hd = toy_dataset(10, 2, &mut rng);
        let ones: Vec<usize> = (0..10).filter(|i| i % 2 == 1).collect();
        assert!(matches!(
            train_hbank(&hd.subset(&ones), "a", &BankConfig::default()),
            Err(Error::SingleClass(_))
        ));
        assert!(matches!(
            train_hbank(&hd, "b", &BankConfig::default()),
            Err(Error::UnknownAttribute(_))
        ));
    }

    #[test]
    fn checkpoint_and_table() {
        let mut rng = RngStream::new(1);
        let mut bank = HClassifierBank::new(
            "a",
            2,
            crate::numkit::gaussian_sample(&mut rng, 4, 3),
            rng.normal_vec(4),
        )
        .unwrap();
        bank.meta.accuracy = vec![0.9, 0.95];
        bank.meta.dataset_size = 10;
        assert_eq!(HClassifierBank::from_json(&bank.to_json()).unwrap(), bank);
        assert_eq!(
            accuracy_table_csv(&bank.meta.accuracy),
            "t,accuracy\n1,0.900000\n2,0.950000\n"
        );
    }
}
