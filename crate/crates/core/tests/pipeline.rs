use std::process::Command as Proc;
use std::sync::OnceLock;

use fairdiff::guidance::Strategy;
use fairdiff::harness::{ExperimentSpec, Models, ResultTable, Runner, StageCache};

fn tiny_spec() -> ExperimentSpec {
    let mut spec = ExperimentSpec::default();
    spec.seeds = vec![0, 1];
    spec.eval_samples = 120;
    spec.guidance.batch_size = 40;
    spec.denoiser.train_samples = 1024;
    spec.denoiser.epochs = 3;
    spec.hspace.samples = 200;
    spec.evaluator.train_samples = 2000;
    spec.ablation.gammas = vec![0.0, 500.0];
    spec.metrics.mmd = false;
    spec
}

fn shared() -> &'static (ExperimentSpec, Models) {
    static MODELS: OnceLock<(ExperimentSpec, Models)> = OnceLock::new();
    MODELS.get_or_init(|| {
        let spec = tiny_spec();
        let models = Models::prepare(&spec, &StageCache::disabled()).unwrap();
        (spec, models)
    })
}

fn csv_of(t: &ResultTable) -> String {
    t.to_csv()
}

#[test]
fn cached_and_fresh_models_give_identical_tables() {
    let spec = tiny_spec();
    let dir = tempfile::tempdir().unwrap();
    let cache = StageCache::new(dir.path());
    let first = Models::prepare(&spec, &cache).unwrap();
    assert!(first.stages.iter().all(|s| !s.cache_hit));
    let second = Models::prepare(&spec, &cache).unwrap();
    assert!(second.stages.iter().all(|s| s.cache_hit));
    let fresh = &shared().1;
    let tables: Vec<String> = [&first, &second, fresh]
        .iter()
        .map(|m| csv_of(&Runner::new(&spec, m).pipeline(&spec.seeds).unwrap().table))
        .collect();
    assert_eq!(tables[0], tables[1]);
    assert_eq!(tables[0], tables[2]);
}

#[test]
fn zero_gamma_rows_equal_random_rows() {
    let (spec, models) = shared();
    let runner = Runner::new(spec, models);
    let mut random_spec = spec.clone();
    random_spec.guidance.strategies = vec![Strategy::Random];
    let random = Runner::new(&random_spec, models).pipeline(&spec.seeds).unwrap().table;
    let ablation = runner.ablate_gamma(&spec.seeds).unwrap().table;
    let zero: Vec<_> = ablation.rows.iter().filter(|r| r.gamma == 0.0).collect();
    assert_eq!(zero.len(), 2 * spec.seeds.len());
    for r in zero {
        let base = random.rows.iter().find(|b| b.seed == r.seed).unwrap();
        assert_eq!(r.values, base.values, "{}", r.run_id());
    }
}

#[test]
fn ablate_gamma_covers_the_grid() {
    let (spec, models) = shared();
    let t = Runner::new(spec, models).ablate_gamma(&spec.seeds).unwrap().table;
    let a = &spec.ablation;
    assert_eq!(
        t.rows.len(),
        a.gammas.len() * a.gamma_strategies.len() * spec.seeds.len()
    );
    assert_eq!(t.summary().len(), a.gammas.len() * a.gamma_strategies.len());
}

#[test]
fn batch_of_one_runs() {
    let (spec, models) = shared();
    let mut spec = spec.clone();
    spec.eval_samples = 12;
    spec.ablation.batch_sizes = vec![1];
    let t = Runner::new(&spec, models).ablate_batch(&[3]).unwrap().table;
    assert_eq!(t.rows.len(), 1);
    let f = t.rows[0].get("frac_1").unwrap();
    assert!((0.0..=1.0).contains(&f));
    assert!(t.rows[0].get("fd").unwrap().is_finite());
}

#[test]
fn corrupted_checkpoint_is_reported_with_its_path() {
    let spec = tiny_spec();
    let dir = tempfile::tempdir().unwrap();
    let cache = StageCache::new(dir.path());
    Models::prepare_denoiser(&spec, &cache).unwrap();
    let ckpt = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("denoiser-"))
        .expect("denoiser artifact");
    std::fs::write(&ckpt, "{ not json").unwrap();
    let err = Models::prepare_denoiser(&spec, &cache).unwrap_err().to_string();
    let name = ckpt.file_name().unwrap().to_string_lossy().into_owned();
    assert!(err.contains(&name), "{err}");
    assert!(err.contains("denoiser"), "{err}");
}

fn cli() -> Proc {
    Proc::new(env!("CARGO_BIN_EXE_fairdiff"))
}

#[test]
fn cli_rejects_bad_spec_and_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "eval_sampels = 10\n").unwrap();
    let out = cli()
        .args(["--spec", bad.to_str().unwrap(), "pipeline"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eval_sampels"));
    let out = cli()
        .args(["--out", dir.path().to_str().unwrap(), "--jobs", "0", "world"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = cli()
        .args([
            "--out",
            dir.path().to_str().unwrap(),
            "--spec",
            "/nonexistent/spec.toml",
            "world",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cli_world_writes_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli()
        .args(["--out", dir.path().to_str().unwrap(), "world"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let world = dir.path().join("world");
    assert!(world.join("world.toml").exists());
    let csv = std::fs::read_to_string(world.join("dataset.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}
