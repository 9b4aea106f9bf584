use reachnet::data::{generate_dataset, load_csv, save_csv, split, AdaptiveConfig, Strategy};
use reachnet::models::{Benchmark, REGISTERED_MODELS};
use reachnet::nn::{load_model, save_model, Arch};
use reachnet::sim::IntegratorConfig;

#[test]
fn datasets_roundtrip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = IntegratorConfig::default();
    for name in REGISTERED_MODELS {
        let m = Benchmark::by_name(name).unwrap();
        for strategy in [Strategy::Uniform, Strategy::Adaptive(AdaptiveConfig::for_model(name))] {
            let d = generate_dataset(&m, 60, &strategy, 1.0, 0.01, 17, &cfg).unwrap();
            let path = dir.path().join(format!("{name}-{}.csv", strategy.name()));
            save_csv(&d, &path).unwrap();
            let back = load_csv(&path).unwrap();
            assert_eq!(back, d, "{name} {strategy}");
        }
    }
}

#[test]
fn split_then_train_and_persist() {
    let cfg = IntegratorConfig::default();
    let m = Benchmark::by_name("neuron").unwrap();
    let d = generate_dataset(&m, 200, &Strategy::Uniform, 5.0, 0.01, 2, &cfg).unwrap();
    let (a, b) = split(&d, 0.25, 4).unwrap();
    assert_eq!(a.len() + b.len(), d.len());
    let (lo, hi) = a.bounds().unwrap();
    let net = Arch::DnnS.build(lo, hi).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    save_model(&net, &path).unwrap();
    let back = load_model(&path).unwrap();
    for s in &b.samples {
        assert_eq!(back.forward(&s.state.x).to_bits(), net.forward(&s.state.x).to_bits());
    }
}
