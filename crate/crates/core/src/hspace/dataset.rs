use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::diffcore::{ddim_invert_batch, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::synthdata::LabeledSample;

#[derive(Debug, Clone, PartialEq)]
pub struct HEntry {
    pub t: usize,
    pub h: Vec<f64>,
    pub labels: BTreeMap<String, u8>,
    pub sample_id: usize,
}

/// Bottleneck activations along the inversion trajectories of labeled
/// samples: every sample contributes one entry per level `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct HDataset {
    steps: usize,
    h_width: usize,
    entries: Vec<HEntry>,
}

const INVERT_CHUNK: usize = 64;

/// DDIM-inverts every sample and pairs each recorded `h_t` with the
/// sample's labels. Sample ids are positions in `data`.
pub fn build_hdataset(
    data: &[LabeledSample],
    sched: &NoiseSchedule,
    denoiser: &Denoiser,
    refinements: usize,
) -> Result<HDataset> {
    if data.is_empty() {
        return Err(Error::Empty("h-dataset source samples"));
    }
    let d = denoiser.data_dim();
    let chunks: Vec<Vec<HEntry>> = data
        .par_chunks(INVERT_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| -> Result<Vec<HEntry>> {
            let rows: Vec<f64> = chunk.iter().flat_map(|s| s.x0.iter().copied()).collect();
            let x0 = Matrix::from_vec(chunk.len(), d, rows)?;
            let trajs = ddim_invert_batch(&x0, sched, denoiser, refinements)?;
            let mut out = Vec::with_capacity(chunk.len() * sched.steps());
            for (j, (traj, s)) in trajs.into_iter().zip(chunk).enumerate() {
                for step in traj.steps {
                    out.push(HEntry {
                        t: step.t,
                        h: step.h_t,
                        labels: s.labels.clone(),
                        sample_id: ci * INVERT_CHUNK + j,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(HDataset {
        steps: sched.steps(),
        h_width: denoiser.h_width(),
        entries: chunks.into_iter().flatten().collect(),
    })
}

impl HDataset {
    pub fn new(steps: usize, h_width: usize, entries: Vec<HEntry>) -> Result<Self> {
        let mut per_sample: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for e in &entries {
            if e.h.len() != h_width {
                return Err(Error::DimensionMismatch {
                    context: "h-dataset entry",
                    expected: h_width,
                    actual: e.h.len(),
                });
            }
            if e.t == 0 || e.t > steps {
                return Err(Error::StepOutOfRange { t: e.t, max: steps });
            }
            per_sample.entry(e.sample_id).or_default().push(e.t);
        }
        for (id, mut ts) in per_sample {
            ts.sort_unstable();
            if ts != (1..=steps).collect::<Vec<_>>() {
                return Err(Error::InvalidArgument(format!(
                    "sample {id} does not cover every level exactly once"
                )));
            }
        }
        Ok(Self {
            steps,
            h_width,
            entries,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn h_width(&self) -> usize {
        self.h_width
    }

    pub fn entries(&self) -> &[HEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct sample ids in ascending order.
    pub fn sample_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.entries.iter().map(|e| e.sample_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn has_attribute(&self, attribute: &str) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.labels.contains_key(attribute))
    }

    /// Per-sample label of `attribute`, keyed by sample id.
    pub fn sample_labels(&self, attribute: &str) -> Result<BTreeMap<usize, u8>> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            let y = *e
                .labels
                .get(attribute)
                .ok_or_else(|| Error::UnknownAttribute(attribute.into()))?;
            out.insert(e.sample_id, y);
        }
        Ok(out)
    }

    /// Rows `h_t` for level `t`, ordered by sample id, with the ids.
    pub fn level(&self, t: usize) -> (Matrix, Vec<usize>) {
        let mut rows: Vec<&HEntry> = self.entries.iter().filter(|e| e.t == t).collect();
        rows.sort_by_key(|e| e.sample_id);
        let ids = rows.iter().map(|e| e.sample_id).collect();
        let data = rows.iter().flat_map(|e| e.h.iter().copied()).collect();
        (Matrix::from_raw(rows.len(), self.h_width, data), ids)
    }

    /// Restriction to the given sample ids.
    pub fn subset(&self, ids: &[usize]) -> HDataset {
        let keep: std::collections::BTreeSet<usize> = ids.iter().copied().collect();
        HDataset {
            steps: self.steps,
            h_width: self.h_width,
            entries: self
                .entries
                .iter()
                .filter(|e| keep.contains(&e.sample_id))
                .cloned()
                .collect(),
        }
    }
}
