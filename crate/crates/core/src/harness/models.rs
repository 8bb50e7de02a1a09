use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cache::{load_json, save_json, StageCache, StageRecord};
use super::spec::{content_hash, hash_of, ExperimentSpec};
use crate::diffcore::{train_denoiser, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{compute_edit_directions, EditDirections};
use crate::hspace::{build_hdataset, train_hbank, HClassifierBank, HDataset};
use crate::metrics::{train_eval_classifier, ClassifierConfig, EvalClassifier};
use crate::numkit::RngStream;
use crate::synthdata::{AttributedMixture, LabeledSample};

/// Bumped whenever stage code changes what an artifact contains, so old
/// cache entries stop matching.
const ARTIFACT_VERSION: u32 = 1;

/// Everything trained once per spec.
#[derive(Debug, Clone)]
pub struct Models {
    pub world: AttributedMixture,
    pub sched: NoiseSchedule,
    pub denoiser: Denoiser,
    pub loss_curve: Vec<f64>,
    pub attributes: BTreeMap<String, AttributeModels>,
    pub stages: Vec<StageRecord>,
    world_key: String,
    denoiser_key: String,
}

/// Per-attribute artifacts: the h-space bank and edit directions, the
/// clean classifier used for data-space guidance (all fit on the same
/// class-balanced set), and the independent evaluation classifier.
#[derive(Debug, Clone)]
pub struct AttributeModels {
    pub bank: HClassifierBank,
    pub edits: EditDirections,
    pub guide_classifier: EvalClassifier,
    pub evaluator: EvalClassifier,
}

#[derive(Serialize, Deserialize)]
struct DenoiserArtifact {
    denoiser: serde_json::Value,
    loss_curve: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HSpaceArtifact {
    bank: serde_json::Value,
    edits: EditDirections,
    guide_classifier: serde_json::Value,
}

/// `n` samples, the first half conditioned on `attribute = 0` and the rest
/// on `attribute = 1`.
pub fn balanced_samples(
    world: &AttributedMixture,
    attribute: &str,
    n: usize,
    rng: &RngStream,
) -> Result<Vec<LabeledSample>> {
    let mut out = world
        .conditioned(attribute, 0)?
        .sample_dataset(n / 2, &mut rng.derive(0));
    out.extend(
        world
            .conditioned(attribute, 1)?
            .sample_dataset(n - n / 2, &mut rng.derive(1)),
    );
    Ok(out)
}

pub fn load_world(spec: &ExperimentSpec) -> Result<AttributedMixture> {
    match &spec.world {
        Some(p) => AttributedMixture::load(p),
        None => Ok(AttributedMixture::default_world()),
    }
}

fn json_value(text: &str) -> serde_json::Value {
    serde_json::from_str(text).expect("artifact json")
}

impl Models {
    /// Runs (or loads from `cache`) world → denoiser → per-attribute
    /// h-space artifacts → evaluation classifiers.
    pub fn prepare(spec: &ExperimentSpec, cache: &StageCache) -> Result<Self> {
        let mut models = Self::prepare_denoiser(spec, cache)?;
        models.add_attributes(spec, cache)?;
        Ok(models)
    }

    /// World and denoiser stages only.
    pub fn prepare_denoiser(spec: &ExperimentSpec, cache: &StageCache) -> Result<Self> {
        let mut stages = Vec::new();

        let source = load_world(spec).map_err(|e| Error::stage("world", e))?;
        let world_key = content_hash(format!("{ARTIFACT_VERSION}\n{}", source.to_toml()).as_bytes());
        let world = cache.get_or_build(
            "world",
            &world_key,
            "toml",
            AttributedMixture::load,
            |w, p| w.save(p),
            || Ok(source.clone()),
            &mut stages,
        )?;
        let sched = spec.schedule.build().map_err(|e| Error::stage("schedule", e))?;

        let denoiser_key = hash_of(&(&world_key, &spec.schedule, &spec.denoiser));
        let art: DenoiserArtifact = cache.get_or_build(
            "denoiser",
            &denoiser_key,
            "json",
            load_json,
            save_json,
            || {
                let cfg = &spec.denoiser;
                let data = world.sample_dataset(cfg.train_samples, &mut RngStream::new(cfg.seed));
                let mut den = Denoiser::init(world.dim(), &sched, cfg, &mut RngStream::new(cfg.seed + 1))?;
                let loss_curve = train_denoiser(&data, &sched, &mut den, cfg)?;
                Ok(DenoiserArtifact {
                    denoiser: json_value(&den.to_json()),
                    loss_curve,
                })
            },
            &mut stages,
        )?;
        let denoiser = Denoiser::from_json(&art.denoiser.to_string()).map_err(|e| Error::stage("denoiser", e))?;
        denoiser
            .check_schedule(&sched)
            .map_err(|e| Error::stage("denoiser", e))?;
        Ok(Self {
            world,
            sched,
            denoiser,
            loss_curve: art.loss_curve,
            attributes: BTreeMap::new(),
            stages,
            world_key,
            denoiser_key,
        })
    }

    fn add_attributes(&mut self, spec: &ExperimentSpec, cache: &StageCache) -> Result<()> {
        let (world, sched, denoiser) = (&self.world, &self.sched, &self.denoiser);
        let (world_key, denoiser_key) = (&self.world_key, &self.denoiser_key);
        let stages = &mut self.stages;
        for (i, attr) in spec.hspace.attributes.iter().enumerate() {
            let hs = &spec.hspace;
            let stage = format!("hspace[{attr}]");
            let key = hash_of(&(
                &denoiser_key,
                attr,
                hs.samples,
                hs.refinements,
                hs.seed,
                &hs.bank,
                &spec.evaluator.classifier,
            ));
            let h: HSpaceArtifact = cache.get_or_build(
                &stage,
                &key,
                "json",
                load_json,
                save_json,
                || {
                    let data = balanced_samples(world, attr, hs.samples, &RngStream::new(hs.seed).derive(i as u64))?;
                    let hd = build_hdataset(&data, sched, denoiser, hs.refinements)?;
                    let bank = train_hbank(&hd, attr, &hs.bank)?;
                    // edits add the class the world under-represents
                    let minority = (world.true_attribute_fraction(attr)?[1] < 0.5) as u8;
                    let edits = compute_edit_directions(&hd, attr, minority)?;
                    let guide = train_eval_classifier(
                        &data,
                        attr,
                        &ClassifierConfig {
                            min_accuracy: 0.0,
                            seed: hs.seed,
                            ..spec.evaluator.classifier.clone()
                        },
                    )?;
                    Ok(HSpaceArtifact {
                        bank: json_value(&bank.to_json()),
                        edits,
                        guide_classifier: json_value(&guide.to_json()),
                    })
                },
                stages,
            )?;
            let tag = |e| Error::stage(stage.clone(), e);
            let bank = HClassifierBank::from_json(&h.bank.to_string()).map_err(tag)?;
            let guide_classifier = EvalClassifier::from_json(&h.guide_classifier.to_string()).map_err(tag)?;

            let ev = &spec.evaluator;
            let stage = format!("evaluator[{attr}]");
            let key = hash_of(&(&world_key, attr, i, ev));
            let evaluator = cache.get_or_build(
                &stage,
                &key,
                "json",
                EvalClassifier::load,
                |c, p| c.save(p),
                || {
                    let data = world.sample_dataset(ev.train_samples, &mut RngStream::new(ev.seed).derive(i as u64));
                    train_eval_classifier(
                        &data,
                        attr,
                        &ClassifierConfig {
                            seed: ev.classifier.seed + i as u64,
                            ..ev.classifier.clone()
                        },
                    )
                },
                stages,
            )?;
            self.attributes.insert(
                attr.clone(),
                AttributeModels {
                    bank,
                    edits: h.edits,
                    guide_classifier,
                    evaluator,
                },
            );
        }
        Ok(())
    }

    pub fn attribute(&self, name: &str) -> Result<&AttributeModels> {
        self.attributes.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no h-space bank for attribute `{name}`; add it to hspace.attributes"
            ))
        })
    }

    pub fn hdataset_from(&self, data: &[LabeledSample], refinements: usize) -> Result<HDataset> {
        build_hdataset(data, &self.sched, &self.denoiser, refinements)
    }

    /// The class-balanced samples the h-space stage of `attribute` uses.
    pub fn hspace_samples(&self, spec: &ExperimentSpec, attribute: &str) -> Result<Vec<LabeledSample>> {
        let i = spec
            .hspace
            .attributes
            .iter()
            .position(|a| a == attribute)
            .ok_or_else(|| Error::UnknownAttribute(attribute.into()))?;
        balanced_samples(
            &self.world,
            attribute,
            spec.hspace.samples,
            &RngStream::new(spec.hspace.seed).derive(i as u64),
        )
    }
}

/// Writes the world, denoiser, banks and classifiers under `dir`.
pub fn export_models(models: &Models, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    models.world.save(&dir.join("world.toml"))?;
    models.denoiser.save(&dir.join("denoiser.json"))?;
    for (a, m) in &models.attributes {
        m.bank.save(&dir.join(format!("bank_{a}.json")))?;
        m.evaluator.save(&dir.join(format!("evaluator_{a}.json")))?;
    }
    Ok(())
}
