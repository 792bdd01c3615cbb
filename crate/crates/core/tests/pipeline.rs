use sidlab::denoiser::{evaluate_loss, BayesOracle, Denoiser, held_out_examples, train_denoiser_with, Architecture, LearnedDenoiser, TrainConfig};
use sidlab::graph::{generate_dataset, ToyFamily};
use sidlab::harness::{load_artifacts, run_ablation, save_artifacts, train_all, ExperimentConfig};
use sidlab::noising::NoiseSpec;
use sidlab::prob::{RngStream, Schedule, ScheduleKind};
use sidlab::samplers::initial_state;
use sidlab::verify::SMOKE_CONFIG;

#[test]
fn held_out_loss_decreases_with_training() {
    let family = ToyFamily::toy_molecule();
    let schedule = Schedule::new(ScheduleKind::Cosine);
    let mut rng = RngStream::new(4, 0);
    let data = generate_dataset(&family, 300, &mut rng).unwrap();
    let (train, held) = data.split_at(250);
    let noise = NoiseSpec::mask(family.schema(false)).unwrap();
    let held = held_out_examples(held, 4, &schedule, &noise, &mut rng).unwrap();
    let mut model = LearnedDenoiser::new(Architecture::Mpnn(Default::default()), noise, &mut rng).unwrap();
    let before = evaluate_loss(&model, &held).unwrap();
    let cfg = TrainConfig { epochs: 15, lr: 0.01, ..Default::default() };
    train_denoiser_with(&mut model, train, &schedule, &cfg, &mut rng, |_, _| Ok(())).unwrap();
    let after = evaluate_loss(&model, &held).unwrap();
    assert!(after < before, "held-out loss {before} -> {after}");
}

#[test]
fn tabular_denoiser_learns_family_marginals() {
    let family = ToyFamily::TriangleFree4;
    let schedule = Schedule::new(ScheduleKind::Cosine);
    let mut rng = RngStream::new(5, 0);
    let data = generate_dataset(&family, 2000, &mut rng).unwrap();
    let noise = NoiseSpec::mask(family.schema(false)).unwrap();
    let mut model = LearnedDenoiser::new(Architecture::Tabular, noise.clone(), &mut rng).unwrap();
    let cfg = TrainConfig { epochs: 40, lr: 0.05, ..Default::default() };
    train_denoiser_with(&mut model, &data, &schedule, &cfg, &mut rng, |_, _| Ok(())).unwrap();

    // at the all-MASK input the target is the per-slot family marginal
    let oracle = BayesOracle::new(&family, noise.clone()).unwrap();
    let z0 = initial_state(4, &noise, &mut rng);
    let out = model.predict(&z0, 0.0).unwrap();
    let worst = (0..out.slot_count())
        .map(|k| out.slot(k).tv(oracle.prior().slot(k)).unwrap())
        .fold(0.0, f64::max);
    assert!(worst < 0.02, "max tv {worst}");
}

#[test]
fn saved_models_reproduce_the_ablation() {
    let config = ExperimentConfig::from_json(SMOKE_CONFIG).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let trained = train_all(&config).unwrap();
    save_artifacts(&trained, dir.path()).unwrap();
    let loaded = load_artifacts(&config, dir.path()).unwrap();
    assert_eq!(loaded.dataset, trained.dataset);
    assert_eq!(run_ablation(&config, &loaded).unwrap(), run_ablation(&config, &trained).unwrap());
}
