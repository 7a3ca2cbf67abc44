use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use damp::autodiff::Tape;
use damp::config::{Ablation, Mode, RunConfig};
use damp::container::Container;
use damp::data::{generate, DomainSpec};
use damp::experiment::micro_batch;
use damp::model::Model;
use damp::optim::OptimizerState;
use damp::train::{build_loss, evaluate_step, split_data, train_step, Objective, StepBatch, Trainer};
use damp::{DampError, Trainer32};

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.iterations_per_epoch = Some(2);
    cfg.data.sources[0].samples_per_class = 6;
    cfg.data.target.as_mut().unwrap().samples_per_class = 6;
    cfg
}

fn trainer(cfg: &RunConfig) -> Trainer<f64> {
    let (train, eval) = split_data(generate(&cfg.data).unwrap());
    Trainer::new(cfg.clone(), train, eval).unwrap()
}

fn fixed_batch(model: &Model<f64>, cfg: &RunConfig) -> StepBatch<f64> {
    let data = generate(&cfg.data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    micro_batch(model, cfg, &data, 6, &mut rng).unwrap()
}

#[test]
fn zero_epochs_rejected() {
    let cfg = RunConfig {
        epochs: 0,
        ..RunConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(DampError::Config(_))));
}

#[test]
fn resume_reproduces_trajectory_bitwise() {
    let cfg = small();
    let mut full = trainer(&cfg);
    full.train(|_, _| Ok(())).unwrap();

    let mut first = trainer(&cfg);
    first.run_epoch().unwrap();
    let bytes = first.checkpoint().to_bytes();
    let mut resumed = trainer(&cfg);
    resumed.restore(&Container::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.epoch, 1);
    resumed.train(|_, _| Ok(())).unwrap();

    assert!(resumed.model.params.bitwise_eq(&full.model.params));
    assert_eq!(resumed.history[..], full.history[1..]);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut cfg = small();
    cfg.ablation = Ablation::baseline();
    cfg.threshold = 1.01;
    cfg.losses.lambda_c = 0.0;
    cfg.losses.lambda_i = 0.0;
    let mut model = Model::<f64>::new(&cfg).unwrap();
    let before = model.params.clone();
    let batch = fixed_batch(&model, &cfg);
    let mut opt = OptimizerState::new(&model.params, 0.0);
    let rep = train_step(&mut model, &mut opt, &batch, &Objective::from_config(&cfg)).unwrap();
    assert!(model.params.bitwise_eq(&before));
    assert!(rep.components.sup_source > 0.0);
    assert_eq!(rep.components.sup_target, 0.0);
    assert_eq!(rep.accepted, 0);
}

#[test]
fn one_step_lowers_loss_on_its_batch() {
    let cfg = small();
    let mut model = Model::<f64>::new(&cfg).unwrap();
    let batch = fixed_batch(&model, &cfg);
    let obj = Objective::from_config(&cfg);
    let before = evaluate_step(&model, &batch, &obj).unwrap().total;
    let mut opt = OptimizerState::new(&model.params, cfg.learning_rate);
    train_step(&mut model, &mut opt, &batch, &obj).unwrap();
    let after = evaluate_step(&model, &batch, &obj).unwrap().total;
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn step_is_independent_of_when_pseudo_labels_were_built() {
    let cfg = small();
    let model = Model::<f64>::new(&cfg).unwrap();
    let batch = fixed_batch(&model, &cfg);
    let obj = Objective::from_config(&cfg);
    let mut a = model.clone();
    let mut b = model.clone();
    let mut oa = OptimizerState::new(&a.params, cfg.learning_rate);
    let mut ob = OptimizerState::new(&b.params, cfg.learning_rate);
    train_step(&mut a, &mut oa, &batch, &obj).unwrap();
    // Rebuilding the labels as a fresh copy changes nothing downstream.
    let rebuilt = batch.clone();
    train_step(&mut b, &mut ob, &rebuilt, &obj).unwrap();
    assert!(a.params.bitwise_eq(&b.params));
}

#[test]
fn non_finite_loss_reports_every_term() {
    let cfg = small();
    let mut model = Model::<f64>::new(&cfg).unwrap();
    let batch = fixed_batch(&model, &cfg);
    let gv = model.prompter.gamma_v();
    model.params.get_mut(gv).as_mut_slice()[0] = f64::NAN;
    let mut opt = OptimizerState::new(&model.params, cfg.learning_rate);
    let err = train_step(&mut model, &mut opt, &batch, &Objective::from_config(&cfg)).unwrap_err();
    let DampError::NonFinite(msg) = err else {
        panic!("expected a non-finite error, got {err}");
    };
    for term in ["sup_s", "sup_t", "sc_s", "sc_t", "idc_s", "idc_t", "im"] {
        assert!(msg.contains(term), "{msg}");
    }
}

#[test]
fn duplicated_source_matches_single_source_terms() {
    let mut uda = small();
    uda.losses.lambda_i = 0.0;
    let model = Model::<f64>::new(&uda).unwrap();
    let batch = fixed_batch(&model, &uda);
    let mut msda = uda.clone();
    msda.mode = Mode::Msda;
    let mut doubled = batch.clone();
    let mut twin = batch.sources[0].clone();
    twin.name = "twin".into();
    doubled.sources.push(twin);

    let obj = Objective::from_config(&uda);
    let one = evaluate_step(&model, &batch, &obj).unwrap();
    let two = evaluate_step(&model, &doubled, &Objective::from_config(&msda)).unwrap();
    assert_eq!(two.per_domain.len(), 2);
    for d in &two.per_domain {
        let s = &one.per_domain[0];
        assert!((d.sup - s.sup).abs() < 1e-12 && (d.sc - s.sc).abs() < 1e-12 && (d.idc - s.idc).abs() < 1e-12);
    }
    let (c1, c2) = (&one.components, &two.components);
    assert!((c2.sup_source - 2.0 * c1.sup_source).abs() < 1e-12);
    assert!((c2.sc_source - 2.0 * c1.sc_source).abs() < 1e-12);
    assert!((c2.idc_source - 2.0 * c1.idc_source).abs() < 1e-12);
    assert!((c2.sup_target - c1.sup_target).abs() < 1e-12);
}

#[test]
fn idc_denominators_stay_within_one_domain() {
    let mut cfg = small();
    cfg.mode = Mode::Msda;
    cfg.data.sources.push(DomainSpec {
        name: "second".into(),
        samples_per_class: 6,
        ..DomainSpec::default()
    });
    let model = Model::<f64>::new(&cfg).unwrap();
    let batch = fixed_batch(&model, &cfg);
    let mut tape = Tape::new();
    let nodes = build_loss(&model, &mut tape, &batch, &Objective::from_config(&cfg), None).unwrap();
    assert_eq!(nodes.idc_source.len(), 2);
    assert!(nodes.idc_target.is_some());
    let sizes: Vec<usize> = batch
        .sources
        .iter()
        .map(|s| s.weak.len())
        .chain(batch.target.as_ref().map(|t| t.weak.len()))
        .collect();
    // Weak-view segments come first, one per domain, contiguous and disjoint.
    let mut start = 0;
    for (seg, n) in nodes.segments.iter().zip(&sizes) {
        assert_eq!(*seg, (start, start + n));
        start += n;
    }
}

#[test]
fn dg_rejects_target_images() {
    let mut cfg = small();
    cfg.mode = Mode::Dg;
    assert!(cfg.validate().is_err());
    let (train, eval) = split_data(generate(&cfg.data).unwrap());
    cfg.data.target = None;
    assert!(Trainer::<f64>::new(cfg, train, eval).is_err());
}

#[test]
fn single_precision_training_runs() {
    let mut cfg = small();
    cfg.epochs = 1;
    let (train, eval) = split_data(generate(&cfg.data).unwrap());
    let mut t = Trainer32::new(cfg, train, eval).unwrap();
    t.train(|_, _| Ok(())).unwrap();
    let m = &t.history[0];
    assert!(m.total.is_finite());
    assert!(m.target_accuracy.is_some());
}
