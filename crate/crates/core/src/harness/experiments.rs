use rayon::prelude::*;

use super::models::{balanced_samples, Models};
use super::spec::ExperimentSpec;
use super::table::{ResultRow, ResultTable};
use crate::diffcore::{ddim_invert_batch, predict_x0_batch};
use crate::error::{Error, Result};
use crate::guidance::{run_guided_generation, GenerationOutput, GuidanceConfig, Strategy};
use crate::hspace::{bank_accuracy, train_hbank, BankConfig, HDataset, HEntry};
use crate::metrics::{
    accuracy_on, fairness_discrepancy, mean_log_density, train_eval_classifier, ClassifierConfig, EvalClassifier,
    MmdReference,
};
use crate::numkit::{Matrix, RngStream};
use crate::synthdata::{LabeledSample, ReferenceDistribution};

// Stream tags under each run seed. Generation uses the same stream for
// every configuration, so rows of one seed share their starting noise.
const GENERATION: u64 = 0x6E;
const MMD_REFERENCE: u64 = 0x3D;
const DOWNSTREAM: u64 = 0xD0;
const DATA_EFFICIENCY: u64 = 0xDE;

/// Result rows plus per-cell diagnostics (`name`, JSONL text).
#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub table: ResultTable,
    pub diagnostics: Vec<(String, String)>,
    /// Generated points per cell, kept only when asked for.
    pub samples: Vec<(String, Matrix)>,
}

struct Cell {
    row: ResultRow,
    cfg: GuidanceConfig,
    eval: Eval,
}

enum Eval {
    Single {
        attribute: String,
        reference: ReferenceDistribution,
    },
    Multi,
}

/// Runs experiments against one set of trained models.
pub struct Runner<'a> {
    pub spec: &'a ExperimentSpec,
    pub models: &'a Models,
    /// Keep the per-level JSONL diagnostics of every cell.
    pub keep_diagnostics: bool,
    /// Keep the generated points of every cell.
    pub keep_samples: bool,
}

fn cell_name(r: &ResultRow) -> String {
    let mut s = format!("{}-g{}-n{}-seed{}", r.strategy, r.gamma, r.batch_size, r.seed);
    if !r.setting.is_empty() {
        s.push('-');
        s.push_str(&r.setting.replace(['=', ';', ','], "_"));
    }
    s
}

fn row(experiment: &str, strategy: &str, gamma: f64, batch_size: usize, setting: String, seed: u64) -> ResultRow {
    ResultRow {
        experiment: experiment.into(),
        strategy: strategy.into(),
        gamma,
        batch_size,
        setting,
        seed,
        values: Vec::new(),
    }
}

fn early_mean(acc: &[f64]) -> f64 {
    let cut = 0.7 * acc.len() as f64;
    let early: Vec<f64> = acc
        .iter()
        .enumerate()
        .filter(|(i, _)| ((i + 1) as f64) < cut)
        .map(|(_, a)| *a)
        .collect();
    early.iter().sum::<f64>() / early.len().max(1) as f64
}

impl<'a> Runner<'a> {
    pub fn new(spec: &'a ExperimentSpec, models: &'a Models) -> Self {
        Self {
            spec,
            models,
            keep_diagnostics: false,
            keep_samples: false,
        }
    }

    /// Strength a strategy runs at by default.
    pub fn default_gamma(&self, strategy: Strategy) -> f64 {
        match strategy {
            Strategy::Random => 0.0,
            Strategy::Universal => self.spec.guidance.universal_gamma,
            Strategy::LatentEdit => self.spec.guidance.edit_scale,
            _ => self.spec.guidance.gamma,
        }
    }

    /// Single-attribute configuration; for latent editing `gamma` is the
    /// edit scale.
    pub fn single_config(
        &self,
        strategy: Strategy,
        attribute: &str,
        reference: &ReferenceDistribution,
        gamma: f64,
        batch_size: usize,
    ) -> Result<GuidanceConfig> {
        let m = self.models.attribute(attribute)?;
        let mut cfg = GuidanceConfig::single(strategy, m.bank.clone(), reference.clone());
        cfg.batch_size = batch_size;
        cfg.loss = self.spec.guidance.loss;
        match strategy {
            Strategy::Universal => {
                cfg.gamma = gamma;
                cfg.clean_classifier = Some(m.guide_classifier.clone());
            }
            Strategy::LatentEdit => {
                cfg.gamma = 0.0;
                cfg.edit_scale = gamma;
                cfg.edit_directions = Some(m.edits.clone());
            }
            _ => cfg.gamma = gamma,
        }
        Ok(cfg)
    }

    fn reference(&self) -> Result<ReferenceDistribution> {
        ReferenceDistribution::single(&self.spec.guidance.attribute, &self.spec.guidance.reference)
    }

    pub fn generate(&self, cfg: &GuidanceConfig, seed: u64, total: usize) -> Result<GenerationOutput> {
        let rng = RngStream::new(seed).derive(GENERATION);
        run_guided_generation(cfg, &self.models.sched, &self.models.denoiser, total, &rng)
    }

    fn evaluator(&self, attribute: &str) -> Result<&EvalClassifier> {
        Ok(&self.models.attribute(attribute)?.evaluator)
    }

    fn quality_values(&self, samples: &Matrix, seed: u64, out: &mut Vec<(String, f64)>) -> Result<()> {
        out.push(("log_density".into(), mean_log_density(&self.models.world, samples)?));
        if self.spec.metrics.mmd {
            let reference = MmdReference::draw(&self.models.world, &mut RngStream::new(seed).derive(MMD_REFERENCE))?;
            out.push(("mmd2".into(), reference.mmd2(samples)?));
        }
        Ok(())
    }

    fn evaluate(&self, eval: &Eval, samples: &Matrix, seed: u64) -> Result<Vec<(String, f64)>> {
        let mut v = Vec::new();
        match eval {
            Eval::Single { attribute, reference } => {
                let f = fairness_discrepancy(&[self.evaluator(attribute)?], samples, reference)?;
                v.push(("fd".into(), f.fd));
                for (c, p) in f.soft_fractions.iter().enumerate() {
                    v.push((format!("frac_{c}"), *p));
                }
                v.push(("hard_frac_1".into(), f.hard_fractions[1]));
            }
            Eval::Multi => {
                let m = &self.spec.multi;
                let clfs = [self.evaluator(&m.attributes[0])?, self.evaluator(&m.attributes[1])?];
                for (k, attr) in m.attributes.iter().enumerate() {
                    let r = ReferenceDistribution::single(attr, &m.references[k])?;
                    v.push((format!("fd_{attr}"), fairness_discrepancy(&[clfs[k]], samples, &r)?.fd));
                }
                let joint = ReferenceDistribution::new(m.attributes.clone(), m.subgroup_reference.clone())?;
                let f = fairness_discrepancy(&clfs, samples, &joint)?;
                v.push(("fd_joint".into(), f.fd));
                for (c, p) in f.soft_fractions.iter().enumerate() {
                    v.push((format!("frac_{}{}", c >> 1, c & 1), *p));
                }
            }
        }
        self.quality_values(samples, seed, &mut v)?;
        Ok(v)
    }

    fn run_cells(&self, cells: Vec<Cell>) -> Result<ExperimentOutput> {
        let n = self.spec.eval_samples;
        let done: Vec<(ResultRow, Option<String>, Option<Matrix>)> = cells
            .into_par_iter()
            .map(|c| -> Result<_> {
                let out = self.generate(&c.cfg, c.row.seed, n)?;
                let mut row = c.row;
                row.values = self.evaluate(&c.eval, &out.samples, row.seed)?;
                let diag = self.keep_diagnostics.then(|| out.diagnostics_jsonl());
                Ok((row, diag, self.keep_samples.then_some(out.samples)))
            })
            .collect::<Result<_>>()?;
        let mut result = ExperimentOutput::default();
        for (row, diag, samples) in done {
            if let Some(d) = diag {
                result.diagnostics.push((cell_name(&row), d));
            }
            if let Some(s) = samples {
                result.samples.push((cell_name(&row), s));
            }
            result.table.rows.push(row);
        }
        Ok(result)
    }

    fn single_cells(
        &self,
        experiment: &str,
        grid: &[(Strategy, f64, usize)],
        seeds: &[u64],
        setting: &str,
    ) -> Result<Vec<Cell>> {
        let reference = self.reference()?;
        let attribute = self.spec.guidance.attribute.clone();
        let mut cells = Vec::new();
        for &(strategy, gamma, n) in grid {
            let cfg = self.single_config(strategy, &attribute, &reference, gamma, n)?;
            for &seed in seeds {
                cells.push(Cell {
                    row: row(experiment, strategy.name(), gamma, n, setting.into(), seed),
                    cfg: cfg.clone(),
                    eval: Eval::Single {
                        attribute: attribute.clone(),
                        reference: reference.clone(),
                    },
                });
            }
        }
        Ok(cells)
    }

    /// Scores externally produced points against the configured reference.
    pub fn evaluate_points(&self, samples: &Matrix, label: &str, seeds: &[u64]) -> Result<ExperimentOutput> {
        let eval = Eval::Single {
            attribute: self.spec.guidance.attribute.clone(),
            reference: self.reference()?,
        };
        let rows = seeds
            .iter()
            .map(|&seed| {
                let mut r = row("evaluate", "external", 0.0, 0, format!("file={label}"), seed);
                r.values = self.evaluate(&eval, samples, seed)?;
                Ok(r)
            })
            .collect::<Result<_>>()?;
        Ok(ExperimentOutput {
            table: ResultTable::new(rows),
            ..Default::default()
        })
    }

    /// Every configured strategy at its default strength against the
    /// configured reference.
    pub fn pipeline(&self, seeds: &[u64]) -> Result<ExperimentOutput> {
        let grid: Vec<_> = self
            .spec
            .guidance
            .strategies
            .iter()
            .map(|&s| (s, self.default_gamma(s), self.spec.guidance.batch_size))
            .collect();
        self.run_cells(self.single_cells("pipeline", &grid, seeds, &self.spec.guidance.reference_setting())?)
    }

    pub fn ablate_gamma(&self, seeds: &[u64]) -> Result<ExperimentOutput> {
        let a = &self.spec.ablation;
        let mut grid = Vec::new();
        for &s in &a.gamma_strategies {
            for &g in &a.gammas {
                grid.push((s, g, self.spec.guidance.batch_size));
            }
        }
        self.run_cells(self.single_cells("ablate-gamma", &grid, seeds, &self.spec.guidance.reference_setting())?)
    }

    pub fn ablate_batch(&self, seeds: &[u64]) -> Result<ExperimentOutput> {
        let grid: Vec<_> = self
            .spec
            .ablation
            .batch_sizes
            .iter()
            .map(|&n| (Strategy::Distribution, self.spec.guidance.gamma, n))
            .collect();
        self.run_cells(self.single_cells("ablate-batch", &grid, seeds, &self.spec.guidance.reference_setting())?)
    }

    /// Unguided, marginal (one predictor per attribute) and subgroup (one
    /// joint predictor) balancing of two attributes.
    pub fn multi(&self, seeds: &[u64]) -> Result<ExperimentOutput> {
        let m = &self.spec.multi;
        let banks = m
            .attributes
            .iter()
            .map(|a| Ok(self.models.attribute(a)?.bank.clone()))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::stage("multi", e))?;
        let marginal_refs = m
            .attributes
            .iter()
            .zip(&m.references)
            .map(|(a, p)| ReferenceDistribution::single(a, p))
            .collect::<Result<Vec<_>>>()?;
        let joint = ReferenceDistribution::new(m.attributes.clone(), m.subgroup_reference.clone())?;
        let gamma = self.spec.guidance.gamma;
        let n = self.spec.guidance.batch_size;

        let mut modes = Vec::new();
        let mut random = GuidanceConfig::new(Strategy::Random);
        random.banks = banks.clone();
        random.references = marginal_refs.clone();
        random.gamma = 0.0;
        modes.push(("random", random));
        let mut marginal = GuidanceConfig::new(Strategy::Distribution);
        marginal.banks = banks.clone();
        marginal.references = marginal_refs;
        modes.push(("marginal", marginal));
        let mut subgroup = GuidanceConfig::new(Strategy::Distribution);
        subgroup.banks = banks;
        subgroup.references = vec![joint];
        subgroup.subgroup = true;
        modes.push(("subgroup", subgroup));

        let mut cells = Vec::new();
        for (mode, mut cfg) in modes {
            cfg.batch_size = n;
            cfg.loss = self.spec.guidance.loss;
            if cfg.strategy != Strategy::Random {
                cfg.gamma = gamma;
            }
            for &seed in seeds {
                cells.push(Cell {
                    row: row("multi", cfg.strategy.name(), cfg.gamma, n, format!("mode={mode}"), seed),
                    cfg: cfg.clone(),
                    eval: Eval::Multi,
                });
            }
        }
        self.run_cells(cells)
    }

    /// Imbalanced classification with noisy observations, before and after
    /// topping up the minority class with distribution-guided samples.
    pub fn downstream(&self, seeds: &[u64]) -> Result<ExperimentOutput> {
        let rows: Vec<Vec<ResultRow>> = seeds
            .par_iter()
            .map(|&seed| self.downstream_seed(seed))
            .collect::<Result<_>>()?;
        Ok(ExperimentOutput {
            table: ResultTable::new(rows.into_iter().flatten().collect()),
            ..Default::default()
        })
    }

    fn downstream_seed(&self, seed: u64) -> Result<Vec<ResultRow>> {
        let d = &self.spec.downstream;
        let world = &self.models.world;
        let attr = d.attribute.as_str();
        let (maj, min) = (d.majority_class, 1 - d.majority_class);
        let rng = RngStream::new(seed).derive(DOWNSTREAM);
        let observe = |mut data: Vec<LabeledSample>, stream: u64| {
            let mut r = rng.derive(stream);
            for s in &mut data {
                s.x0.iter_mut().for_each(|v| *v += d.observation_noise * r.normal());
            }
            data
        };
        let draw = |class: u8, n: usize, stream: u64| -> Result<Vec<LabeledSample>> {
            Ok(world
                .conditioned(attr, class)?
                .sample_dataset(n, &mut rng.derive(stream)))
        };
        let mut train = draw(maj, d.majority, 0)?;
        train.extend(draw(min, d.minority, 1)?);
        let train = observe(train, 2);
        let mut test = draw(maj, d.test_per_class, 3)?;
        test.extend(draw(min, d.test_per_class, 4)?);
        let test = observe(test, 5);
        let clf_cfg = ClassifierConfig {
            seed: d.classifier.seed.wrapping_add(seed),
            ..d.classifier.clone()
        };
        let group_acc = |clf: &EvalClassifier, class: u8| -> Result<f64> {
            let pts: Vec<&LabeledSample> = test.iter().filter(|s| s.labels[attr] == class).collect();
            accuracy_on(clf, &pts)
        };

        let before = train_eval_classifier(&train, attr, &clf_cfg)?;

        // target is inversely proportional to the class counts
        let need = d.majority - d.minority;
        let total = (d.majority + d.minority) as f64;
        let mut probs = vec![0.0; 2];
        probs[maj as usize] = d.minority as f64 / total;
        probs[min as usize] = 1.0 - probs[maj as usize];
        let reference = ReferenceDistribution::single(attr, &probs)?;
        let cfg = self.single_config(
            Strategy::Distribution,
            attr,
            &reference,
            self.spec.guidance.gamma,
            self.spec.guidance.batch_size,
        )?;
        let evaluator = self.evaluator(attr)?;
        let mut kept: Vec<LabeledSample> = Vec::with_capacity(need);
        let mut rounds = 0u64;
        const MAX_ROUNDS: u64 = 50;
        while kept.len() < need {
            if rounds == MAX_ROUNDS {
                return Err(Error::stage(
                    "downstream",
                    Error::InvalidArgument(format!(
                        "only {} of {need} minority samples after {MAX_ROUNDS} rounds",
                        kept.len()
                    )),
                ));
            }
            let out = run_guided_generation(
                &cfg,
                &self.models.sched,
                &self.models.denoiser,
                need,
                &rng.derive(100 + rounds),
            )?;
            let p = evaluator.probs_batch(&out.samples)?;
            for r in 0..out.samples.rows() {
                let label = (p.get(r, 1) > p.get(r, 0)) as u8;
                if label == min && kept.len() < need {
                    kept.push(LabeledSample {
                        x0: out.samples.row(r).to_vec(),
                        labels: [(attr.to_string(), min)].into(),
                    });
                }
            }
            rounds += 1;
        }
        let augmented = kept.len();
        let mut train_aug = train.clone();
        train_aug.extend(observe(kept, 6));
        let after = train_eval_classifier(&train_aug, attr, &clf_cfg)?;

        let mut rows = Vec::new();
        for (strategy, clf, added, n_train) in [
            ("baseline", &before, 0, train.len()),
            ("distribution", &after, augmented, train_aug.len()),
        ] {
            let gamma = if added == 0 { 0.0 } else { self.spec.guidance.gamma };
            let mut r = row(
                "downstream",
                strategy,
                gamma,
                self.spec.guidance.batch_size,
                format!("majority={maj}"),
                seed,
            );
            r.values = vec![
                ("acc_majority".into(), group_acc(clf, maj)?),
                ("acc_minority".into(), group_acc(clf, min)?),
                ("train_size".into(), n_train as f64),
                ("augmented".into(), added as f64),
            ];
            if added > 0 {
                r.values.push(("generation_rounds".into(), rounds as f64));
            }
            rows.push(r);
        }
        Ok(rows)
    }

    /// h-bank and clean-MLP accuracy per level versus training-set size.
    /// The clean baseline classifies the clean-point estimate of each
    /// level's inversion state.
    pub fn data_efficiency(&self, seeds: &[u64]) -> Result<ExperimentOutput> {
        let attr = self.spec.guidance.attribute.as_str();
        let hs = &self.spec.hspace;
        let models = self.models;
        let steps = models.sched.steps();
        let test_data = balanced_samples(
            &models.world,
            attr,
            self.spec.ablation.data_test_samples,
            &RngStream::new(hs.seed).derive(DATA_EFFICIENCY),
        )?;
        let x0 = Matrix::from_rows(&test_data.iter().map(|s| s.x0.clone()).collect::<Vec<_>>())?;
        let trajs = ddim_invert_batch(&x0, &models.sched, &models.denoiser, hs.refinements)?;
        let mut entries = Vec::with_capacity(trajs.len() * steps);
        for (id, (traj, s)) in trajs.iter().zip(&test_data).enumerate() {
            for st in &traj.steps {
                entries.push(HEntry {
                    t: st.t,
                    h: st.h_t.clone(),
                    labels: s.labels.clone(),
                    sample_id: id,
                });
            }
        }
        let test_hd = HDataset::new(steps, models.denoiser.h_width(), entries)?;
        // clean-point estimates per level, as labeled samples
        let x0_hat: Vec<Vec<LabeledSample>> = (1..=steps)
            .map(|t| -> Result<_> {
                let xt = Matrix::from_rows(&trajs.iter().map(|tr| tr.steps[t - 1].x_t.clone()).collect::<Vec<_>>())?;
                let eps = models.denoiser.predict_eps(&xt, t)?;
                let est = predict_x0_batch(&xt, t, &eps, &models.sched)?;
                Ok(test_data
                    .iter()
                    .enumerate()
                    .map(|(i, s)| LabeledSample {
                        x0: est.row(i).to_vec(),
                        labels: s.labels.clone(),
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;

        let mut jobs = Vec::new();
        for &size in &self.spec.ablation.data_sizes {
            for &seed in seeds {
                jobs.push((size, seed));
            }
        }
        let rows: Vec<Vec<ResultRow>> = jobs
            .into_par_iter()
            .map(|(size, seed)| -> Result<Vec<ResultRow>> {
                let rng = RngStream::new(seed).derive(DATA_EFFICIENCY).derive(size as u64);
                let data = balanced_samples(&models.world, attr, size, &rng)?;
                let hd = models.hdataset_from(&data, hs.refinements)?;
                let bank_cfg = BankConfig {
                    holdout: 0.0,
                    seed,
                    ..hs.bank.clone()
                };
                let bank = train_hbank(&hd, attr, &bank_cfg)?;
                let bank_acc = bank_accuracy(&bank, &test_hd)?;
                let clean = train_eval_classifier(
                    &data,
                    attr,
                    &ClassifierConfig {
                        holdout: 0.0,
                        min_accuracy: 0.0,
                        seed,
                        ..self.spec.evaluator.classifier.clone()
                    },
                )?;
                let clean_acc = x0_hat
                    .iter()
                    .map(|pts| accuracy_on(&clean, &pts.iter().collect::<Vec<_>>()))
                    .collect::<Result<Vec<f64>>>()?;
                Ok([("h-bank", bank_acc), ("clean-mlp", clean_acc)]
                    .into_iter()
                    .map(|(name, acc)| {
                        let mut r = row("data-efficiency", name, 0.0, 0, format!("size={size}"), seed);
                        r.values
                            .push(("acc_mean".into(), acc.iter().sum::<f64>() / acc.len() as f64));
                        r.values.push(("acc_early".into(), early_mean(&acc)));
                        r.values
                            .extend(acc.iter().enumerate().map(|(i, a)| (format!("acc_t{:02}", i + 1), *a)));
                        r
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(ExperimentOutput {
            table: ResultTable::new(rows.into_iter().flatten().collect()),
            ..Default::default()
        })
    }
}
