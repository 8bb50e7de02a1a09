use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numkit::{softmax, Activation, Adam, Matrix, Mlp, RngStream};
use crate::synthdata::LabeledSample;

const FORMAT_TAG: &str = "fairdiff.evalclf.v1";

/// Two-class MLP over clean data points for one attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalClassifier {
    pub attribute: String,
    pub net: Mlp,
    pub meta: ClassifierMeta,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub train_size: usize,
    pub seed: u64,
    pub holdout_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout: f64,
    /// Training fails when held-out accuracy falls below this.
    pub min_accuracy: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            epochs: 30,
            batch_size: 64,
            lr: 5e-3,
            holdout: 0.2,
            min_accuracy: 0.99,
            seed: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    format: String,
    attribute: String,
    meta: ClassifierMeta,
    mlp: serde_json::Value,
}

impl EvalClassifier {
    pub fn input_width(&self) -> usize {
        self.net.input_width()
    }

    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("classifier input", self.input_width(), x.len())?;
        let out = self.net.predict(&Matrix::from_vec(1, x.len(), x.to_vec())?)?;
        Ok(softmax(out.data()))
    }

    /// Softmax rows for a batch of points.
    pub fn probs_batch(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = self.net.predict(x)?;
        for r in 0..out.rows() {
            let p = softmax(out.row(r));
            out.row_mut(r).copy_from_slice(&p);
        }
        Ok(out)
    }

    /// `∇_x log p(class | x)` per row, with the class probabilities.
    pub fn log_prob_grad(&self, x: &Matrix, classes: &[u8]) -> Result<(Matrix, Matrix)> {
        check_dim("log_prob_grad classes", x.rows(), classes.len())?;
        let (logits, cache) = self.net.forward_batch(x)?;
        let mut probs = logits.clone();
        let mut seed = Matrix::zeros(logits.rows(), logits.cols());
        for r in 0..logits.rows() {
            let p = softmax(logits.row(r));
            // ∂ log p_c / ∂ logits = e_c − p
            for (j, pj) in p.iter().enumerate() {
                seed.set(r, j, if j == classes[r] as usize { 1.0 } else { 0.0 } - pj);
            }
            probs.row_mut(r).copy_from_slice(&p);
        }
        let (_, gx) = self.net.backward(&cache, &seed)?;
        Ok((gx, probs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ClassifierFile {
            format: FORMAT_TAG.into(),
            attribute: self.attribute.clone(),
            meta: self.meta.clone(),
            mlp: serde_json::from_str(&self.net.to_json()).expect("mlp json"),
        })
        .expect("classifier serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ClassifierFile = serde_json::from_str(text).map_err(|e| Error::format("<classifier>", e))?;
        if f.format != FORMAT_TAG {
            return Err(Error::format(
                "<classifier>",
                format!("unsupported format tag `{}`", f.format),
            ));
        }
        Ok(Self {
            attribute: f.attribute,
            net: Mlp::from_json(&f.mlp.to_string())?,
            meta: f.meta,
        })
    }
}

/// Trains a clean-space attribute classifier on `data` with a stratified
/// hold-out split; fails when held-out accuracy is below
/// `cfg.min_accuracy`.
pub fn train_eval_classifier(
    data: &[LabeledSample],
    attribute: &str,
    cfg: &ClassifierConfig,
) -> Result<EvalClassifier> {
    if data.is_empty() {
        return Err(Error::Empty("classifier training data"));
    }
    let labels: Vec<u8> = data.iter().map(|s| s.label(attribute)).collect::<Result<_>>()?;
    let ones = labels.iter().filter(|&&y| y == 1).count();
    if ones == 0 || ones == labels.len() {
        return Err(Error::SingleClass(attribute.into()));
    }
    let d = data[0].x0.len();
    let root = RngStream::new(cfg.seed);
    let by_id: BTreeMap<usize, u8> = labels.iter().enumerate().map(|(i, &y)| (i, y)).collect();
    let (train, test) = crate::hspace::stratified_split(&by_id, cfg.holdout, &mut root.derive(1));

    let mut sizes = vec![d];
    sizes.extend(&cfg.hidden);
    sizes.push(2);
    let mut net = Mlp::new(&sizes, Activation::Tanh, None, &mut root.derive(2))?;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = root.derive(3);
    let mut order = train.clone();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = Matrix::from_rows(&chunk.iter().map(|&i| data[i].x0.clone()).collect::<Vec<_>>())?;
            let (logits, cache) = net.forward_batch(&x)?;
            let mut g = Matrix::zeros(chunk.len(), 2);
            let scale = 1.0 / chunk.len() as f64;
            for (r, &i) in chunk.iter().enumerate() {
                let p = softmax(logits.row(r));
                for c in 0..2 {
                    let y = if labels[i] as usize == c { 1.0 } else { 0.0 };
                    g.set(r, c, (p[c] - y) * scale);
                }
            }
            let (grads, _) = net.backward(&cache, &g)?;
            opt.tick();
            for (slot, (w, b)) in net.params_mut().enumerate() {
                opt.update(2 * slot, w.data_mut(), grads.weights[slot].data());
                opt.update(2 * slot + 1, b, &grads.biases[slot]);
            }
        }
    }
    let mut clf = EvalClassifier {
        attribute: attribute.into(),
        net,
        meta: ClassifierMeta {
            train_size: train.len(),
            seed: cfg.seed,
            holdout_accuracy: f64::NAN,
        },
    };
    let test_pts: Vec<&LabeledSample> = test.iter().map(|&i| &data[i]).collect();
    let acc = accuracy_on(&clf, &test_pts)?;
    clf.meta.holdout_accuracy = acc;
    if acc < cfg.min_accuracy {
        return Err(Error::AccuracyBelowThreshold {
            attribute: attribute.into(),
            accuracy: acc,
            required: cfg.min_accuracy,
        });
    }
    Ok(clf)
}

/// Fraction of samples whose argmax class equals their label.
pub fn accuracy_on(clf: &EvalClassifier, data: &[&LabeledSample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let x = Matrix::from_rows(&data.iter().map(|s| s.x0.clone()).collect::<Vec<_>>())?;
    let p = clf.probs_batch(&x)?;
    let mut correct = 0usize;
    for (r, s) in data.iter().enumerate() {
        let pred = (p.get(r, 1) > p.get(r, 0)) as u8;
        if pred == s.label(&clf.attribute)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
