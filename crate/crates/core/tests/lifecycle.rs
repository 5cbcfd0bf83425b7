use bapo_core::config::RunConfig;
use bapo_core::loss::Method;
use bapo_core::pipeline::{ExportKind, Pipeline, Stage};
use bapo_core::Error;

fn small() -> RunConfig {
    RunConfig::from_toml(
        "seed = 11\n[corpus]\nn_prompts = 30\n[pretrain]\nepochs = 2\n[loss]\nmethod = \"dpo\"\n",
    )
    .unwrap()
}

#[test]
fn tampered_upstream_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(dir.path(), small()).unwrap();
    p.gen().unwrap();
    let base = p.pretrain().unwrap();
    let ckpt = base.file("checkpoint.json");
    let text = std::fs::read_to_string(&ckpt).unwrap();
    std::fs::write(&ckpt, text.replacen('1', "2", 1)).unwrap();
    assert!(matches!(p.cache_base(), Err(Error::StaleArtifact { .. })));
    assert!(matches!(p.train(), Err(Error::StaleArtifact { .. })));
}

#[test]
fn dpo_trains_without_a_cache_and_reports_nan_base_gap() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(dir.path(), small()).unwrap();
    p.gen().unwrap();
    p.pretrain().unwrap();
    let run = p.train().unwrap();
    let report = Pipeline::eval(dir.path(), &run.dir).unwrap();
    assert_eq!(report.method, Method::Dpo);
    assert_eq!(report.lambda, 0.0);
    assert!(report.delta_b_final.is_nan());
    assert!(report.delta_w_final.is_finite());
    let reopened = Stage::open(&run.dir).unwrap();
    assert_eq!(reopened.manifest.stage, "train");
    assert!(reopened.manifest.upstream.contains_key("pretrain"));
    assert!(!reopened.manifest.upstream.contains_key("cache-base"));

    let exported = Pipeline::export(dir.path(), ExportKind::Reports).unwrap();
    let text = std::fs::read_to_string(exported).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("dpo\tP2A\t"));
}

#[test]
fn seeds_separate_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let a = Pipeline::new(dir.path(), small()).unwrap().gen().unwrap();
    let mut other = small();
    other.seed = 12;
    let b = Pipeline::new(dir.path(), other).unwrap().gen().unwrap();
    assert_ne!(a.dir, b.dir);
    assert_ne!(
        std::fs::read(a.file("corpus.jsonl")).unwrap(),
        std::fs::read(b.file("corpus.jsonl")).unwrap()
    );
}
