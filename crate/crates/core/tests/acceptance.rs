//! Acceptance criteria, one pass/fail line each. Runs without the libtest
//! harness so every line reaches the output.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use damp::config::{Ablation, Mode, RunConfig};
use damp::data::{generate, DomainSpec, ShiftDescriptor};
use damp::experiment::{encoders_unchanged, grad_check, read_metrics, train_in_dir, RunDir, TrainOptions, METRICS_FILE};
use damp::gradcheck::GradCheckConfig;
use damp::losses::{classify, l_idc, l_im, zero_shot_classify, ClassProbabilities};
use damp::model::{ImageEmbeddings, Model, GROUPS};
use damp::prompter::PromptedPair;
use damp::pseudo::ensemble;
use damp::tensor::Matrix;
use damp::train::{split_data, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
}

fn random_probs(rng: &mut ChaCha8Rng, k: usize) -> ClassProbabilities<f64> {
    let logits: Vec<f64> = (0..k).map(|_| 3.0 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    ClassProbabilities::from_logits(&logits)
}

fn criterion_1() -> Outcome {
    let mut worst = 0.0f64;
    let mut instances = 0;
    for seed in 0..5u64 {
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let mut model = Model::<f64>::new(&cfg).unwrap();
        let (gv, gs) = (model.prompter.gamma_v(), model.prompter.gamma_s());
        *model.params.get_mut(gv) = Matrix::zeros(1, 1);
        *model.params.get_mut(gs) = Matrix::zeros(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        // Random prompt context and random G so the check is not tied to init.
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            if id != gv && id != gs {
                let m = model.params.get(id);
                let (r, c) = (m.rows(), m.cols());
                *model.params.get_mut(id) = randn(&mut rng, r, c, 0.3);
            }
        }
        let d = model.encoders.dim();
        let hw = model.encoders.config().spatial_tokens();
        let n = 20;
        let emb = ImageEmbeddings {
            v: randn(&mut rng, n, d, 1.0),
            v_tilde: randn(&mut rng, n * hw, d, 1.0),
            spatial: hw,
        };
        let prompted = model.predict_embedded(&emb).unwrap();
        let enc = model.class_encodings().unwrap();
        let s = Matrix::from_vec(enc.len(), d, enc.iter().flat_map(|e| e.s.clone()).collect()).unwrap();
        for (i, p) in prompted.iter().enumerate() {
            let z = zero_shot_classify(emb.v.row(i), &s, model.tau).unwrap();
            for (a, b) in p.probs.iter().zip(&z.probs) {
                worst = worst.max((a - b).abs());
            }
            instances += 1;
        }
    }
    outcome(worst <= 1e-10, format!("{instances} instances, max |dp| = {worst:.2e} (tol 1e-10)"))
}

fn criterion_2() -> Outcome {
    let cfg = RunConfig::default();
    let reports = grad_check(&cfg, 3, 4, &GradCheckConfig::default()).unwrap();
    let mut worst = 0.0f64;
    let mut seen = Vec::new();
    for batch in &reports {
        for r in batch {
            if !seen.contains(&r.loss) {
                seen.push(r.loss.clone());
            }
            let groups: Vec<&str> = r.groups.iter().map(|g| g.group.as_str()).collect();
            if groups != GROUPS {
                return outcome(false, format!("{} reports groups {groups:?}", r.loss));
            }
            worst = worst.max(r.max_rel_error());
        }
    }
    let all = ["L_sup", "L_sc", "L_idc", "L_im", "L_all"].iter().all(|l| seen.iter().any(|s| s == l));
    outcome(
        all && worst < 1e-4,
        format!("{} batches, losses {seen:?}, max rel error {worst:.2e} (tol 1e-4)", reports.len()),
    )
}

fn criterion_3() -> Outcome {
    let cfg = RunConfig {
        epochs: 2,
        ..RunConfig::default()
    };
    let (train, eval) = split_data(generate(&cfg.data).unwrap());
    let mut t = Trainer::<f64>::new(cfg, train, eval).unwrap();
    let before = t.model.params.clone();
    t.train(|_, _| Ok(())).unwrap();
    let frozen = encoders_unchanged(&t.model.encoders).unwrap();
    let moved = !t.model.params.bitwise_eq(&before);
    let groups = t.model.trainable_groups();
    let names: Vec<&str> = groups.iter().filter(|(_, ids)| !ids.is_empty()).map(|(g, _)| *g).collect();
    let covered: usize = groups.iter().map(|(_, ids)| ids.len()).sum();
    let exact = names == GROUPS && covered == t.model.params.len() && t.opt.m.len() == t.model.params.len();
    let p_only_context = groups[0].1.len() == 1 && t.model.params.name(groups[0].1[0]) == "prompt.context";
    let no_encoder = t
        .model
        .params
        .iter()
        .all(|(_, n, _)| t.model.encoders.weights().find(n).is_none());
    outcome(
        frozen && moved && exact && p_only_context && no_encoder,
        format!("encoders bitwise unchanged: {frozen}; trainables moved: {moved}; registry groups {names:?}, {covered} tensors"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tau = 0.01;
    let mut min_idc = f64::INFINITY;
    let mut max_single = 0.0f64;
    for _ in 0..1000 {
        let b = rng.random_range(1..=8);
        let k = rng.random_range(2..=6);
        let d = rng.random_range(2..=12);
        let pairs: Vec<PromptedPair<f64>> = (0..b)
            .map(|_| PromptedPair {
                v_prime: randn(&mut rng, 1, d, 1.0).as_slice().to_vec(),
                s_prime: randn(&mut rng, k, d, 1.0),
            })
            .collect();
        min_idc = min_idc.min(l_idc(&pairs, tau).unwrap());
        max_single = max_single.max(l_idc(&pairs[..1], tau).unwrap().abs());
    }
    let mut max_im = f64::NEG_INFINITY;
    let mut max_same = 0.0f64;
    for _ in 0..1000 {
        let b = rng.random_range(1..=16);
        let k = rng.random_range(2..=8);
        let probs: Vec<_> = (0..b).map(|_| random_probs(&mut rng, k)).collect();
        max_im = max_im.max(l_im(&probs).unwrap());
        let same = vec![probs[0].clone(); b];
        max_same = max_same.max(l_im(&same).unwrap().abs());
    }
    let mut max_scale = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..=6);
        let d = rng.random_range(2..=12);
        let pair = PromptedPair {
            v_prime: randn(&mut rng, 1, d, 1.0).as_slice().to_vec(),
            s_prime: randn(&mut rng, k, d, 1.0),
        };
        let a: f64 = rng.random_range(0.01..100.0);
        let c: f64 = rng.random_range(0.01..100.0);
        let scaled = PromptedPair {
            v_prime: pair.v_prime.iter().map(|x| a * x).collect(),
            s_prime: pair.s_prime.map(|x| c * x),
        };
        let p = classify(&pair, tau).unwrap();
        let q = classify(&scaled, tau).unwrap();
        for (x, y) in p.probs.iter().zip(&q.probs) {
            max_scale = max_scale.max((x - y).abs());
        }
    }
    let pass = min_idc >= 0.0 && max_single == 0.0 && max_im <= 0.0 && max_same < 1e-12 && max_scale <= 1e-10;
    outcome(
        pass,
        format!(
            "min l_idc {min_idc:.3e}, max |l_idc(B=1)| {max_single:.1e}, max l_im {max_im:.3e}, max |l_im(same)| {max_same:.1e}, rescale dp {max_scale:.1e}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    let mut endpoint_ok = true;
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let naive = random_probs(&mut rng, k);
        let model = random_probs(&mut rng, k);
        let alpha: f64 = rng.random_range(0.0..=1.0);
        let e = ensemble(&naive, &model, alpha).unwrap();
        for i in 0..k {
            let (lo, hi) = (naive.probs[i].min(model.probs[i]), naive.probs[i].max(model.probs[i]));
            if e.probs[i] < lo || e.probs[i] > hi {
                violations += 1;
            }
        }
        endpoint_ok &= ensemble(&naive, &model, 0.0).unwrap() == naive;
        endpoint_ok &= ensemble(&naive, &model, 1.0).unwrap() == model;
    }
    outcome(
        violations == 0 && endpoint_ok,
        format!("{violations} bound violations in 1000 draws; endpoints exact: {endpoint_ok}"),
    )
}

#[derive(Debug, Deserialize)]
struct Margins {
    seeds: Vec<u64>,
    damp_over_zero_shot: f64,
    damp_over_coop: f64,
    trend_floor: f64,
    trend: Vec<[String; 2]>,
}

#[derive(Deserialize)]
struct KnownFailure {
    criterion: usize,
    reason: String,
}

#[derive(Deserialize)]
struct KnownFailures {
    failure: Vec<KnownFailure>,
}

fn known_failures() -> Vec<KnownFailure> {
    let text = include_str!("known_failures.toml");
    toml::from_str::<KnownFailures>(text).expect("known_failures.toml").failure
}

fn margins() -> Margins {
    let text = include_str!("margins.toml");
    toml::from_str(text).expect("margins.toml")
}

struct RunResult {
    target: f64,
    source: f64,
    zero_shot: f64,
}

fn run(cfg: RunConfig) -> RunResult {
    let (train, eval) = split_data(generate(&cfg.data).unwrap());
    let mut t = Trainer::<f64>::new(cfg, train, eval).unwrap();
    t.train(|_, _| Ok(())).unwrap();
    RunResult {
        target: t.target_report().unwrap().unwrap().accuracy,
        source: t.source_accuracy().unwrap(),
        zero_shot: t.target_zero_shot().unwrap().unwrap().accuracy,
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn criterion_6() -> Outcome {
    let m = margins();
    let ladder = Ablation::ladder();
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    let mut zero_shot = Vec::new();
    for (name, ab) in &ladder {
        let mut accs = Vec::new();
        for &seed in &m.seeds {
            let t0 = Instant::now();
            let r = run(RunConfig {
                seed,
                ablation: *ab,
                ..RunConfig::default()
            });
            println!(
                "    {name:<8} seed {seed}: target {:.4} source {:.4} ({:.0?})",
                r.target,
                r.source,
                t0.elapsed()
            );
            if *name == "+L_im" {
                zero_shot.push(r.zero_shot);
            }
            accs.push(r.target);
        }
        rows.push((name.to_string(), accs));
    }
    let row_mean = |n: &str| mean(&rows.iter().find(|(r, _)| r == n).expect("ladder row").1);
    let damp = row_mean("+L_im");
    let coop = row_mean("CoOp");
    let zs = mean(&zero_shot);
    let mut ok = damp - zs > m.damp_over_zero_shot && damp - coop > m.damp_over_coop;
    let mut trend = Vec::new();
    for [from, to] in &m.trend {
        let delta = row_mean(to) - row_mean(from);
        ok &= delta > m.trend_floor;
        trend.push(format!("{from}->{to} {:+.1}", 100.0 * delta));
    }
    outcome(
        ok,
        format!(
            "DAMP {damp:.4}, zero-shot {zs:.4} (margin {}), CoOp {coop:.4} (margin {}); trend in points: {}",
            m.damp_over_zero_shot,
            m.damp_over_coop,
            trend.join(", ")
        ),
    )
}

fn criterion_7() -> Outcome {
    let m = margins();
    let mut tgt = Vec::new();
    let mut src = Vec::new();
    for &seed in &m.seeds {
        let mut cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        if let Some(t) = cfg.data.target.as_mut() {
            t.shift = ShiftDescriptor::identity();
        }
        let r = run(cfg);
        println!("    no-shift seed {seed}: target {:.4} source {:.4}", r.target, r.source);
        tgt.push(r.target);
        src.push(r.source);
    }
    let gap = mean(&tgt) - mean(&src);
    outcome(
        gap.abs() <= 0.03,
        format!("target {:.4} vs source {:.4}, gap {:+.1} points (tol 3)", mean(&tgt), mean(&src), 100.0 * gap),
    )
}

fn small(cfg: &mut RunConfig) {
    cfg.epochs = 2;
    cfg.iterations_per_epoch = Some(2);
    cfg.batch_size = 8;
    cfg.data.sources[0].samples_per_class = 8;
    if let Some(t) = cfg.data.target.as_mut() {
        t.samples_per_class = 8;
    }
}

fn criterion_8() -> Outcome {
    // Three labeled sources with distinct shifts.
    let mut msda = RunConfig {
        mode: Mode::Msda,
        ..RunConfig::default()
    };
    small(&mut msda);
    msda.data.sources = (0..3)
        .map(|i| DomainSpec {
            name: format!("source{i}"),
            samples_per_class: 8,
            shift: ShiftDescriptor {
                rotation_deg: 5.0 * i as f64,
                ..ShiftDescriptor::identity()
            },
        })
        .collect();
    let (train, eval) = split_data(generate(&msda.data).unwrap());
    let mut t = Trainer::<f64>::new(msda, train, eval).unwrap();
    t.train(|_, _| Ok(())).unwrap();
    let last = t.history.last().unwrap();
    let domains: Vec<&str> = last.per_domain.iter().map(|d| d.domain.as_str()).collect();
    let msda_ok = domains == ["source0", "source1", "source2"]
        && last.per_domain.iter().all(|d| d.sup > 0.0 && d.sc > 0.0 && d.idc.is_finite())
        && last.losses.idc_target.is_finite()
        && last.losses.im != 0.0
        && t.history.len() == 2;

    let mut dg = RunConfig {
        mode: Mode::Dg,
        ..RunConfig::default()
    };
    small(&mut dg);
    dg.data.target = None;
    dg.data.unseen = Some(DomainSpec {
        name: "unseen".into(),
        samples_per_class: 8,
        shift: ShiftDescriptor {
            rotation_deg: 15.0,
            ..ShiftDescriptor::identity()
        },
    });
    let (train, eval) = split_data(generate(&dg.data).unwrap());
    let mut t = Trainer::<f64>::new(dg, train, eval).unwrap();
    let counter = t.evaluation_data().unseen.as_ref().unwrap().0.access_counter();
    t.train(|_, _| Ok(())).unwrap();
    let reads_during = counter.count();
    let last = t.history.last().unwrap().clone();
    let no_target_terms = last.losses.im == 0.0
        && last.losses.sup_target == 0.0
        && last.losses.sc_target == 0.0
        && last.losses.idc_target == 0.0
        && last.per_domain.iter().all(|d| d.domain != "target")
        && last.target_accuracy.is_none()
        && !t.objective().l_im;
    let unseen = t.evaluate_unseen().unwrap().unwrap();
    let reads_after = counter.count();
    let dg_ok = reads_during == 0 && reads_after > 0 && no_target_terms && unseen.samples == 48;
    outcome(
        msda_ok && dg_ok,
        format!(
            "msda per-source terms {domains:?} plus target terms; dg target-free decomposition: {no_target_terms}, unseen reads during training {reads_during}, after evaluation {reads_after}"
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut cfg = RunConfig::default();
    small(&mut cfg);
    cfg.epochs = 3;
    let tmp = tempfile::tempdir().unwrap();
    let a = RunDir::new(tmp.path().join("a"));
    let b = RunDir::new(tmp.path().join("b"));
    train_in_dir(cfg.clone(), &a, TrainOptions::default(), |_| {}).unwrap();
    train_in_dir(cfg, &b, TrainOptions::default(), |_| {}).unwrap();
    let la = std::fs::read(a.file(METRICS_FILE)).unwrap();
    let lb = std::fs::read(b.file(METRICS_FILE)).unwrap();
    let epochs = read_metrics(a.file(METRICS_FILE)).unwrap().len();
    outcome(
        la == lb && epochs == 3,
        format!("{epochs} epoch records, {} bytes, logs identical: {}", la.len(), la == lb),
    )
}

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.strip_prefix("--criterion=").and_then(|n| n.parse().ok()))
        .collect();
    // libtest flags such as --list must not start the long runs.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "reduction identity", criterion_1),
        (2, "gradient oracle", criterion_2),
        (3, "frozen contract", criterion_3),
        (4, "loss invariants", criterion_4),
        (5, "pseudo-label ensemble", criterion_5),
        (6, "end-to-end adaptation", criterion_6),
        (7, "no-shift control", criterion_7),
        (8, "mode coverage", criterion_8),
        (9, "determinism", criterion_9),
    ];
    let known = known_failures();
    let mut unexpected = Vec::new();
    let mut known_failed = Vec::new();
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let o = f();
        println!(
            "criterion {n} ({name}): {} [{:.1?}] {}",
            if o.pass { "PASS" } else { "FAIL" },
            t0.elapsed(),
            o.detail
        );
        match (o.pass, known.iter().find(|k| k.criterion == n)) {
            (false, Some(k)) => {
                println!("    known failure: {}", k.reason);
                known_failed.push(n);
            }
            (false, None) => unexpected.push(n),
            (true, Some(_)) => println!("    listed as a known failure but passed"),
            (true, None) => {}
        }
    }
    if !known_failed.is_empty() {
        println!("known failures: {known_failed:?}");
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
