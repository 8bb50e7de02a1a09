//! Attributed Gaussian mixtures with exact ground truth.
//!
//! Every component is an isotropic Gaussian that carries a fixed binary
//! label for each declared attribute, so the label of a sample is a
//! deterministic function of the component it was drawn from. Component
//! weights encode the sampling bias.

mod reference;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use reference::ReferenceDistribution;

use crate::error::{check_dim, Error, Result};
use crate::numkit::{log_sum_exp, Matrix, RngStream};

const WORLD_FORMAT: &str = "fairdiff.world.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub mean: Vec<f64>,
    /// Isotropic standard deviation.
    pub scale: f64,
    pub weight: f64,
    pub labels: BTreeMap<String, u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributedMixture {
    dim: usize,
    attributes: Vec<String>,
    components: Vec<Component>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x0: Vec<f64>,
    pub labels: BTreeMap<String, u8>,
}

impl LabeledSample {
    pub fn label(&self, attribute: &str) -> Result<u8> {
        self.labels
            .get(attribute)
            .copied()
            .ok_or_else(|| Error::UnknownAttribute(attribute.into()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    format: String,
    dim: usize,
    attributes: Vec<String>,
    components: Vec<Component>,
}

impl AttributedMixture {
    pub fn new(dim: usize, attributes: Vec<String>, components: Vec<Component>) -> Result<Self> {
        if dim == 0 || components.is_empty() || attributes.is_empty() {
            return Err(Error::InvalidArgument(
                "mixture needs a positive dimension, components and attributes".into(),
            ));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 || components.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "component weights must be non-negative and sum to 1, got {total}"
            )));
        }
        for (k, c) in components.iter().enumerate() {
            check_dim("mixture component mean", dim, c.mean.len())?;
            if !(c.scale > 0.0) || !c.scale.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "component {k} has non-positive scale {}",
                    c.scale
                )));
            }
            for a in &attributes {
                match c.labels.get(a) {
                    Some(0 | 1) => {}
                    Some(v) => {
                        return Err(Error::InvalidArgument(format!(
                            "component {k}: attribute `{a}` has non-binary label {v}"
                        )))
                    }
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "component {k} does not define attribute `{a}`"
                        )))
                    }
                }
            }
        }
        Ok(Self {
            dim,
            attributes,
            components,
        })
    }

    /// Four clusters in the plane: `a1` splits left (0) from right (1),
    /// `a2` splits bottom (0) from top (1). Weights 0.45/0.30/0.15/0.10 make
    /// both attributes biased and correlated.
    pub fn default_world() -> Self {
        let comp = |mean: [f64; 2], weight: f64, a1: u8, a2: u8| Component {
            mean: mean.to_vec(),
            scale: DEFAULT_SCALE,
            weight,
            labels: BTreeMap::from([("a1".to_string(), a1), ("a2".to_string(), a2)]),
        };
        Self::new(
            2,
            vec!["a1".into(), "a2".into()],
            vec![
                comp([-2.0, -2.0], 0.45, 0, 0),
                comp([2.0, 2.0], 0.30, 1, 1),
                comp([-2.0, 2.0], 0.15, 0, 1),
                comp([2.0, -2.0], 0.10, 1, 0),
            ],
        )
        .expect("default world is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    fn attr_check(&self, attribute: &str) -> Result<()> {
        if self.attributes.iter().any(|a| a == attribute) {
            Ok(())
        } else {
            Err(Error::UnknownAttribute(attribute.into()))
        }
    }

    /// Same components, new weights (renormalized).
    pub fn with_weights(&self, weights: &[f64]) -> Result<Self> {
        check_dim("mixture weights", self.components.len(), weights.len())?;
        let s: f64 = weights.iter().sum();
        if !(s > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument(
                "weights must be non-negative with positive sum".into(),
            ));
        }
        let mut comps = self.components.clone();
        for (c, w) in comps.iter_mut().zip(weights) {
            c.weight = w / s;
        }
        // renormalization leaves rounding; snap so weights sum to 1 within 1e-12
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        comps[0].weight += 1.0 - total;
        Self::new(self.dim, self.attributes.clone(), comps)
    }

    /// Mixture conditioned on `attribute == class`.
    pub fn conditioned(&self, attribute: &str, class: u8) -> Result<Self> {
        self.attr_check(attribute)?;
        let w: Vec<f64> = self
            .components
            .iter()
            .map(|c| if c.labels[attribute] == class { c.weight } else { 0.0 })
            .collect();
        if w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "no component has `{attribute}` = {class}"
            )));
        }
        self.with_weights(&w)
    }

    /// i.i.d. draws; component by weight, labels copied from the component.
    pub fn sample_dataset(&self, n: usize, rng: &mut RngStream) -> Vec<LabeledSample> {
        let weights = self.weights();
        (0..n)
            .map(|_| {
                let c = &self.components[rng.categorical(&weights)];
                let x0 = c.mean.iter().map(|m| m + c.scale * rng.normal()).collect();
                LabeledSample {
                    x0,
                    labels: c.labels.clone(),
                }
            })
            .collect()
    }

    /// Points only, as an `n × d` matrix.
    pub fn sample_points(&self, n: usize, rng: &mut RngStream) -> Matrix {
        let data = self.sample_dataset(n, rng).into_iter().flat_map(|s| s.x0).collect();
        Matrix::from_raw(n, self.dim, data)
    }

    /// Exact mixture log-density.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim("log_density", self.dim, x.len())?;
        let d = self.dim as f64;
        let terms: Vec<f64> = self
            .components
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| {
                let sq: f64 = x.iter().zip(&c.mean).map(|(a, m)| (a - m).powi(2)).sum();
                let var = c.scale * c.scale;
                c.weight.ln() - 0.5 * d * (2.0 * PI * var).ln() - 0.5 * sq / var
            })
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Marginal class probabilities `(P[a=0], P[a=1])`.
    pub fn true_attribute_fraction(&self, attribute: &str) -> Result<Vec<f64>> {
        self.attr_check(attribute)?;
        let mut p = vec![0.0; 2];
        for c in &self.components {
            p[c.labels[attribute] as usize] += c.weight;
        }
        Ok(p)
    }

    /// Joint class probabilities over several attributes; class index is
    /// the labels read as a binary number, first attribute most significant.
    pub fn joint_attribute_fraction(&self, attributes: &[&str]) -> Result<Vec<f64>> {
        for a in attributes {
            self.attr_check(a)?;
        }
        let mut p = vec![0.0; 1 << attributes.len()];
        for c in &self.components {
            p[joint_index(&c.labels, attributes)] += c.weight;
        }
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        let file = WorldFile {
            format: WORLD_FORMAT.into(),
            dim: self.dim,
            attributes: self.attributes.clone(),
            components: self.components.clone(),
        };
        toml::to_string_pretty(&file).expect("world serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::format(path, e))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: WorldFile = toml::from_str(text).map_err(|e| Error::format("<world>", e))?;
        if file.format != WORLD_FORMAT {
            return Err(Error::format(
                "<world>",
                format!("unsupported format tag `{}`", file.format),
            ));
        }
        Self::new(file.dim, file.attributes, file.components)
    }
}

pub const DEFAULT_SCALE: f64 = 0.6;

/// Joint class index of a label map, first attribute most significant.
pub fn joint_index(labels: &BTreeMap<String, u8>, attributes: &[&str]) -> usize {
    attributes.iter().fold(0, |acc, a| (acc << 1) | labels[*a] as usize)
}

/// Delimited-text export: `x_1..x_d` followed by one column per attribute.
pub fn dataset_to_csv(data: &[LabeledSample], attributes: &[String]) -> String {
    let d = data.first().map_or(0, |s| s.x0.len());
    let mut header: Vec<String> = (1..=d).map(|i| format!("x_{i}")).collect();
    header.extend(attributes.iter().cloned());
    let mut out = header.join(",");
    out.push('\n');
    for s in data {
        let mut fields: Vec<String> = s.x0.iter().map(|v| format!("{v:.17e}")).collect();
        fields.extend(
            attributes
                .iter()
                .map(|a| s.labels.get(a).map_or(String::new(), u8::to_string)),
        );
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

pub fn dataset_from_csv(text: &str) -> Result<(Vec<LabeledSample>, Vec<String>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or(Error::Empty("dataset header"))?.split(',').collect();
    let d = header.iter().take_while(|h| h.starts_with("x_")).count();
    let attrs: Vec<String> = header[d..].iter().map(|s| s.to_string()).collect();
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        check_dim("dataset row", header.len(), f.len())?;
        let parse_err = |e: &dyn std::fmt::Display| Error::format("<dataset>", format!("row {}: {e}", ln + 2));
        let x0 = f[..d]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| parse_err(&e)))
            .collect::<Result<Vec<_>>>()?;
        let mut labels = BTreeMap::new();
        for (a, v) in attrs.iter().zip(&f[d..]) {
            labels.insert(a.clone(), v.parse::<u8>().map_err(|e| parse_err(&e))?);
        }
        out.push(LabeledSample { x0, labels });
    }
    Ok((out, attrs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(mean: Vec<f64>, scale: f64) -> AttributedMixture {
        AttributedMixture::new(
            mean.len(),
            vec!["a".into()],
            vec![Component {
                mean,
                scale,
                weight: 1.0,
                labels: BTreeMap::from([("a".into(), 1)]),
            }],
        )
        .unwrap()
    }

    fn two_way(w: [f64; 2]) -> AttributedMixture {
        let c = |m: f64, wt: f64, a: u8| Component {
            mean: vec![m, 0.0],
            scale: 0.5,
            weight: wt,
            labels: BTreeMap::from([("a".into(), a)]),
        };
        AttributedMixture::new(2, vec!["a".into()], vec![c(-2.0, w[0], 0), c(2.0, w[1], 1)]).unwrap()
    }

    #[test]
    fn single_component_labels_identical() {
        let m = single(vec![0.0, 0.0], 1.0);
        let data = m.sample_dataset(50, &mut RngStream::new(1));
        assert!(data.iter().all(|s| s.labels["a"] == 1));
    }

    #[test]
    fn biased_weights_show_in_labels() {
        let m = two_way([0.8, 0.2]);
        let data = m.sample_dataset(10_000, &mut RngStream::new(2));
        let frac = data.iter().filter(|s| s.labels["a"] == 1).count() as f64 / 1e4;
        assert!((0.18..=0.22).contains(&frac), "{frac}");
    }

    #[test]
    fn one_sample() {
        assert_eq!(two_way([0.5, 0.5]).sample_dataset(1, &mut RngStream::new(0)).len(), 1);
    }

    #[test]
    fn standard_normal_density_at_origin() {
        let m = single(vec![0.0, 0.0], 1.0);
        let v = m.log_density(&[0.0, 0.0]).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((v + 1.8379).abs() < 1e-4);
    }

    #[test]
    fn far_tail_is_finite() {
        let m = single(vec![0.0, 0.0], 1.0);
        let v = m.log_density(&[1e3, -1e3]).unwrap();
        assert!(v.is_finite() && v < -1e5);
    }

    #[test]
    fn duplicate_components_equal_single() {
        let c = Component {
            mean: vec![1.0, -1.0],
            scale: 0.7,
            weight: 0.5,
            labels: BTreeMap::from([("a".into(), 0)]),
        };
        let twin = AttributedMixture::new(2, vec!["a".into()], vec![c.clone(), c]).unwrap();
        let one = single(vec![1.0, -1.0], 0.7);
        for x in [[0.0, 0.0], [1.0, -1.0], [3.0, 2.0]] {
            let a = twin.log_density(&x).unwrap();
            let b = one.log_density(&x).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn marginal_fractions() {
        assert_eq!(
            two_way([0.5, 0.5]).true_attribute_fraction("a").unwrap(),
            vec![0.5, 0.5]
        );
        let p = two_way([0.9, 0.1]).true_attribute_fraction("a").unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15 && (p[1] - 0.1).abs() < 1e-15);
        assert!(matches!(
            two_way([0.5, 0.5]).true_attribute_fraction("b"),
            Err(Error::UnknownAttribute(_))
        ));
    }

    #[test]
    fn joint_marginal_matches_enumeration() {
        let m = AttributedMixture::default_world();
        let joint = m.joint_attribute_fraction(&["a1", "a2"]).unwrap();
        // brute force over components and classes
        for c1 in 0..2u8 {
            for c2 in 0..2u8 {
                let mut want = 0.0;
                for comp in m.components() {
                    if comp.labels["a1"] == c1 && comp.labels["a2"] == c2 {
                        want += comp.weight;
                    }
                }
                assert!((joint[(c1 as usize) * 2 + c2 as usize] - want).abs() < 1e-15);
            }
        }
        let a1 = m.true_attribute_fraction("a1").unwrap();
        assert!((a1[1] - (joint[2] + joint[3])).abs() < 1e-15);
    }

    #[test]
    fn invalid_mixtures_rejected() {
        let mut c = two_way([0.5, 0.5]).components().to_vec();
        c[0].weight = 0.6;
        assert!(AttributedMixture::new(2, vec!["a".into()], c.clone()).is_err());
        c[0].weight = 0.5;
        c[0].scale = 0.0;
        assert!(AttributedMixture::new(2, vec!["a".into()], c.clone()).is_err());
        c[0].scale = 1.0;
        assert!(AttributedMixture::new(2, vec!["a".into(), "b".into()], c).is_err());
    }

    #[test]
    fn conditioned_mixture() {
        let m = AttributedMixture::default_world().conditioned("a1", 1).unwrap();
        let p = m.true_attribute_fraction("a1").unwrap();
        assert!((p[1] - 1.0).abs() < 1e-12);
        let w = m.weights();
        assert!((w[1] - 0.75).abs() < 1e-12 && (w[3] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn world_file_round_trip() {
        let m = AttributedMixture::default_world();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("world.toml");
        m.save(&p).unwrap();
        assert_eq!(AttributedMixture::load(&p).unwrap(), m);
    }

    #[test]
    fn world_file_rejects_unknown_keys() {
        let m = AttributedMixture::default_world();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("world.toml");
        m.save(&p).unwrap();
        let text = std::fs::read_to_string(&p)
            .unwrap()
            .replace("dim = 2", "dim = 2\ncolour = 1");
        assert!(AttributedMixture::from_toml(&text).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = AttributedMixture::default_world();
        let data = m.sample_dataset(20, &mut RngStream::new(4));
        let text = dataset_to_csv(&data, m.attributes());
        assert!(text.starts_with("x_1,x_2,a1,a2\n"));
        let (back, attrs) = dataset_from_csv(&text).unwrap();
        assert_eq!(attrs, m.attributes());
        assert_eq!(back, data);
    }
}
