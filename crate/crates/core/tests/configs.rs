use std::fs;
use std::path::Path;

use tsrom::{Experiment, RunConfig, Variant};

fn bundled() -> Vec<(String, RunConfig)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut out: Vec<(String, RunConfig)> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), RunConfig::load(&p).unwrap()))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn every_bundled_config_loads_and_round_trips() {
    let all = bundled();
    let names: Vec<&str> = all.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["ks-prob.toml", "ks.toml", "linear-ode.toml", "multiscale.toml"]);
    for (name, cfg) in &all {
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(&again, cfg, "{name}");
        assert_eq!(again.digest(), cfg.digest(), "{name}");
        cfg.arch(cfg.input_dim()).unwrap();
    }
}

#[test]
fn bundled_configs_describe_their_experiments() {
    for (name, cfg) in bundled() {
        let (experiment, variant, c, iterations) = match name.as_str() {
            "linear-ode.toml" => (Experiment::LinearOde, Variant::Deterministic, 2, 5000),
            "multiscale.toml" => (Experiment::Multiscale, Variant::Deterministic, 2, 5000),
            "ks.toml" => (Experiment::Ks, Variant::Deterministic, 5, 200_000),
            "ks-prob.toml" => (Experiment::Ks, Variant::Probabilistic, 5, 200_000),
            other => panic!("unexpected config {other}"),
        };
        assert_eq!(cfg.experiment, experiment, "{name}");
        assert_eq!(cfg.variant, variant, "{name}");
        assert_eq!(cfg.model.latent_dim, c, "{name}");
        assert_eq!(cfg.train.iterations, iterations, "{name}");
    }
}

#[test]
fn multiscale_settings_follow_the_experiment() {
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/multiscale.toml")).unwrap();
    assert_eq!(cfg.train.learning_rate, 1e-3);
    assert_eq!(cfg.input_dim(), 8);
}
