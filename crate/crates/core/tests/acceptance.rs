//! Acceptance suite: one PASS/FAIL line per criterion; exits non-zero if any
//! criterion fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sharpkit::config::{DataSource, ExperimentConfig};
use sharpkit::data::{self, SamplerMode};
use sharpkit::diagnostics::{self, OrthogonalityMode};
use sharpkit::harness::{self, SweepAxis};
use sharpkit::model::{self, Activation, Batch, LossKind, ModelKind, ModelSpec, Targets};
use sharpkit::numkit::{decompose_orthogonal, decompose_paper, ParamVec};
use sharpkit::optim::{LrSchedule, RhoSchedule, Variant};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn moons_base(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data.n = 400;
    c.run.steps = 200;
    c.run.batch_size = 16;
    c.run.eval_every = 50;
    c.run.out = out.to_path_buf();
    c
}

fn run_csv(config: &ExperimentConfig, out: &Path) -> Vec<u8> {
    let mut c = config.clone();
    c.run.out = out.to_path_buf();
    let rec = harness::train(&c).expect("run");
    fs::read(rec.metrics_csv).unwrap()
}

/// Reduction equivalences, exact CSV equality over 200 steps.
fn reductions(dir: &Path) -> Outcome {
    let base = moons_base(dir);
    let with = |variant: Variant, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        c.optimizer.variant = variant;
        f(&mut c);
        c
    };
    let cases = [
        ("fsam(lambda=1) = sam", with(Variant::Fsam, &|c| c.optimizer.lambda = 1.0), with(Variant::Sam, &|_| {})),
        ("fsam(sigma=0) = sam", with(Variant::Fsam, &|c| c.optimizer.sigma = 0.0), with(Variant::Sam, &|_| {})),
        ("sam(rho=0) = sgd", with(Variant::Sam, &|c| c.optimizer.rho = 0.0), with(Variant::Sgd, &|_| {})),
        ("fasam(lambda=1) = asam", with(Variant::Fasam, &|c| c.optimizer.lambda = 1.0), with(Variant::Asam, &|_| {})),
        ("sam-strength(k=1) = sam", with(Variant::SamStrength, &|c| c.optimizer.strength_k = 1), with(Variant::Sam, &|_| {})),
    ];
    let mut failed = Vec::new();
    for (i, (name, a, b)) in cases.iter().enumerate() {
        let ca = run_csv(a, &dir.join(format!("{i}a")));
        let cb = run_csv(b, &dir.join(format!("{i}b")));
        let rows = ca.iter().filter(|&&c| c == b'\n').count() - 1;
        if ca != cb || rows != 200 {
            failed.push(format!("{name} ({rows} rows)"));
        }
    }
    check(failed.is_empty(), if failed.is_empty() { "5/5 pairs byte-identical over 200 steps".into() } else { failed.join("; ") })
}

/// Decomposition reconstruction and orthogonality on 1000 random pairs.
fn decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_rec, mut worst_orth) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let d = rng.random_range(2..64);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let full: ParamVec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0) * scale).collect::<Vec<_>>().into();
        let mix = rng.random_range(-2.0..2.0);
        let batch: ParamVec<f64> =
            (0..d).map(|i| mix * full[i] + rng.random_range(-1.0..1.0) * scale).collect::<Vec<_>>().into();
        for dec in [decompose_paper(&full, &batch).unwrap(), decompose_orthogonal(&full, &batch).unwrap()] {
            for i in 0..d {
                let err = (dec.full_component[i] + dec.noise_component[i] - batch[i]).abs();
                let denom = batch[i].abs().max(dec.full_component[i].abs());
                if err > 0.0 {
                    worst_rec = worst_rec.max(err / denom);
                }
            }
        }
        let orth = decompose_orthogonal(&full, &batch).unwrap();
        let ip = orth.noise_component.dot(&full).unwrap().abs() / (orth.noise_component.norm() * full.norm());
        worst_orth = worst_orth.max(ip);
    }
    check(
        worst_rec < 1e-12 && worst_orth < 1e-10,
        format!("max relative reconstruction error {worst_rec:.2e} (< 1e-12), max normalized inner product {worst_orth:.2e} (< 1e-10)"),
    )
}

/// Exhaustive minibatch average of the noise is orthogonal to the full gradient.
fn lemma_one() -> Outcome {
    let ds = data::gen_gaussian_mixture::<f64>(8, 3, 2, 1.5, 11).unwrap();
    let spec = ModelSpec::logistic(3, 2);
    let params = model::init_params::<f64>(&spec, 5).unwrap();
    let full = model::full_grad(&spec, &params, &ds.examples).unwrap();
    let (mean, _) = diagnostics::orthogonality_stat(&spec, &params, &ds.examples, 2, OrthogonalityMode::Enumerate).unwrap();
    let bound = 1e-10 * (full.dot(&full).unwrap()).max(1.0);
    let batches = data::all_minibatches(8, 2).count();
    check(
        mean.abs() < bound && batches == 28,
        format!("{batches} minibatches, |mean <g_B - g, g>| = {:.2e} (< {bound:.2e})", mean.abs()),
    )
}

fn random_case(rng: &mut ChaCha8Rng, i: usize) -> (ModelSpec, Batch<f64>) {
    let n = rng.random_range(3..12);
    let d = rng.random_range(1..5);
    let c = rng.random_range(2..4);
    let classes = |rng: &mut ChaCha8Rng| Targets::Classes((0..n).map(|_| rng.random_range(0..c)).collect());
    let real = |rng: &mut ChaCha8Rng, w: usize| Targets::Real { values: (0..n * w).map(|_| rng.random_range(-1.0..1.0)).collect(), width: w };
    let features: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let h = rng.random_range(2..7);
    let (spec, targets) = match i % 5 {
        0 => (ModelSpec::linear_regression(d, 1), real(rng, 1)),
        1 => (ModelSpec::logistic(d, c), classes(rng)),
        2 => (ModelSpec::mlp(vec![d, h, c], Activation::Tanh, LossKind::CrossEntropy), classes(rng)),
        3 => (ModelSpec::mlp(vec![d, h, h, c], Activation::Relu, LossKind::CrossEntropy), classes(rng)),
        _ => (ModelSpec::mlp(vec![d, h, 2], Activation::Tanh, LossKind::Mse), real(rng, 2)),
    };
    (spec, Batch::new(features, d, targets).unwrap())
}

/// Analytic gradients against central differences; HVP against closed-form Hessians.
fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let (spec, batch) = random_case(&mut rng, i);
        let params = model::init_params::<f64>(&spec, i as u64).unwrap();
        let params: ParamVec<f64> = params.iter().map(|w| w + rng.random_range(-0.3..0.3)).collect::<Vec<_>>().into();
        let (_, g) = model::grad(&spec, &params, &batch).unwrap();
        let h = 1e-6;
        let fd: ParamVec<f64> = (0..params.len())
            .map(|j| {
                let (mut p, mut m) = (params.clone(), params.clone());
                p[j] += h;
                m[j] -= h;
                (model::loss(&spec, &p, &batch).unwrap() - model::loss(&spec, &m, &batch).unwrap()) / (2.0 * h)
            })
            .collect::<Vec<_>>()
            .into();
        let rel = g.sub(&fd).unwrap().norm() / g.norm().max(fd.norm()).max(1e-8);
        worst = worst.max(rel);
    }

    let mut worst_hvp = 0.0f64;
    for trial in 0..10u64 {
        // Diagonal quadratic.
        let eigs: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..8.0)).collect();
        let (spec, batch) = model::quadratic_problem::<f64>(&eigs).unwrap();
        let w: ParamVec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>().into();
        let v: ParamVec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>().into();
        let hv = model::hvp(&spec, &w, &batch, &v, model::default_hvp_step(&w)).unwrap();
        for i in 0..6 {
            worst_hvp = worst_hvp.max((hv[i] - eigs[i] * v[i]).abs());
        }
        // Dense quadratic: least squares with H = (2 / n) X^T X.
        let (n, d) = (9, 4);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = Batch::new(x.clone(), d, Targets::Real { values: y, width: 1 }).unwrap();
        let spec = ModelSpec::linear_regression(d, 1).without_bias();
        let w = model::init_params::<f64>(&spec, trial).unwrap();
        let v: ParamVec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>().into();
        let hv = model::hvp(&spec, &w, &batch, &v, model::default_hvp_step(&w)).unwrap();
        for a in 0..d {
            let exact: f64 = (0..d)
                .map(|b| (0..n).map(|r| x[r * d + a] * x[r * d + b]).sum::<f64>() * 2.0 / n as f64 * v[b])
                .sum();
            worst_hvp = worst_hvp.max((hv[a] - exact).abs());
        }
    }
    check(
        worst < 1e-4 && worst_hvp < 1e-6,
        format!("20 cases, worst gradient relative error {worst:.2e} (< 1e-4); worst HVP error {worst_hvp:.2e} (< 1e-6)"),
    )
}

/// Tail-averaged EMA error shrinks with the step size under lambda = 1 - gamma^(2/3).
fn theorem_one(dir: &Path) -> Outcome {
    let mut c = ExperimentConfig::default();
    c.data.source = DataSource::GaussianMixture;
    c.data.n = 500;
    c.data.dim = 5;
    c.data.classes = 3;
    c.data.spread = 2.0;
    c.model.kind = ModelKind::LogisticSoftmax;
    c.model.layers = vec![5, 3];
    c.optimizer.variant = Variant::Fsam;
    c.optimizer.momentum = 0.0;
    c.optimizer.weight_decay = 0.0;
    c.run.steps = 2000;
    c.run.batch_size = 16;
    c.run.eval_every = 0;
    c.run.track_phi = true;
    c.run.diag_every = 10;
    let gammas = [0.1, 0.03, 0.01];
    let seeds: Vec<u64> = (0..5).collect();
    let (records, _) = harness::sweep(&c, SweepAxis::Gamma, &gammas, &seeds, dir, 0).unwrap();
    let tails: Vec<f64> = records
        .chunks(seeds.len())
        .map(|runs| {
            runs.iter()
                .map(|r| {
                    let phi: Vec<f64> = harness::read_metrics(&r.metrics_csv).unwrap().iter().filter_map(|m| m.phi).collect();
                    let take = phi.len() / 10;
                    phi[phi.len() - take..].iter().sum::<f64>() / take as f64
                })
                .sum::<f64>()
                / seeds.len() as f64
        })
        .collect();
    check(
        tails.windows(2).all(|w| w[1] <= w[0]),
        format!("tail-mean phi over 5 seeds for gamma 0.1 / 0.03 / 0.01: {:.4} / {:.4} / {:.4}", tails[0], tails[1], tails[2]),
    )
}

/// Full-gradient norm decays under gamma0/sqrt(T) steps and rho0/sqrt(t) radii.
fn theorem_two(dir: &Path) -> Outcome {
    let mut c = ExperimentConfig::default();
    c.data.source = DataSource::GaussianMixture;
    c.data.n = 300;
    c.data.classes = 3;
    c.data.spread = 2.0;
    c.model.layers = vec![2, 16, 3];
    c.optimizer.variant = Variant::Fsam;
    c.optimizer.momentum = 0.0;
    c.optimizer.weight_decay = 0.0;
    c.optimizer.lr = 1.0;
    c.optimizer.lr_schedule = LrSchedule::InvSqrtTotal;
    c.optimizer.rho_schedule = RhoSchedule::InvSqrtStep;
    c.run.steps = 4000;
    c.run.eval_every = 0;
    c.run.log_decomposition = true;
    c.run.diag_every = 1;
    let (mut early, mut late) = (0.0, 0.0);
    for seed in 0..5 {
        c.run.seed = seed;
        c.run.out = dir.join(format!("seed-{seed}"));
        let rec = harness::train(&c).unwrap();
        let text = fs::read_to_string(rec.decomposition_csv.unwrap()).unwrap();
        // full_norm column
        let g2: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap().powi(2))
            .collect();
        early += g2[500..1000].iter().sum::<f64>() / 500.0 / 5.0;
        late += g2[g2.len() - 500..].iter().sum::<f64>() / 500.0 / 5.0;
    }
    check(
        late <= 0.6 * early,
        format!("mean |grad L|^2 steps 500-1000: {early:.5}, last 500: {late:.5}, ratio {:.3} (<= 0.6)", late / early),
    )
}

/// Lanczos on diag(5, 2, 1, 1, 1).
fn lanczos() -> Outcome {
    let (spec, batch) = model::quadratic_problem::<f64>(&[5.0, 2.0, 1.0, 1.0, 1.0]).unwrap();
    let w = ParamVec::from_vec(vec![0.3, -1.0, 0.5, 2.0, -0.7]);
    let r = diagnostics::lanczos_spectrum(&spec, &w, &batch, 5, 25, 1).unwrap();
    let ratio = r.ratio_1_5.unwrap_or(f64::NAN);
    check(
        (r.lambda1 - 5.0).abs() <= 1e-5 && (ratio - 5.0).abs() <= 1e-4,
        format!("lambda1 = {:.8}, lambda1/lambda5 = {ratio:.8}", r.lambda1),
    )
}

/// Two moons with 20% label noise: SAM-noise >= SAM >= SAM-full within 0.5 pp.
fn two_moons(dir: &Path) -> Outcome {
    let mut c = ExperimentConfig::default();
    c.data.n = 400;
    c.data.test_fraction = 0.5;
    c.data.label_noise = 0.2;
    c.model.layers = vec![2, 64, 64, 2];
    c.model.activation = Activation::Relu;
    c.optimizer.rho = 0.1;
    c.optimizer.lr = 0.1;
    c.run.steps = 3000;
    c.run.eval_every = 0;
    let seeds: Vec<u64> = (0..10).collect();
    let mut acc = Vec::new();
    for v in [Variant::SamNoise, Variant::Sam, Variant::SamFull] {
        let mut runs = Vec::new();
        for &s in &seeds {
            c.optimizer.variant = v;
            c.run.seed = s;
            runs.push(c.clone());
            runs.last_mut().unwrap().run.out = dir.join(v.as_str()).join(format!("seed-{s}"));
        }
        let recs = harness::run_all(&runs, 0).unwrap();
        let a: Vec<f64> = recs.iter().map(|r| r.final_test_acc().unwrap()).collect();
        acc.push(100.0 * a.iter().sum::<f64>() / a.len() as f64);
    }
    let (noise, sam, full) = (acc[0], acc[1], acc[2]);
    check(
        noise - sam >= -0.5 && sam - full >= -0.5,
        format!("mean test accuracy: sam-noise {noise:.2}%, sam {sam:.2}%, sam-full {full:.2}%"),
    )
}

/// Symmetric label-noise flip statistics.
fn label_noise() -> Outcome {
    let ds = data::gen_gaussian_mixture::<f64>(10_000, 4, 10, 3.0, 8).unwrap();
    let clean = ds.labels().unwrap().to_vec();
    let frac = |rate: f64| {
        let noisy = data::inject_label_noise(&ds, rate, 21).unwrap();
        let flipped = noisy.labels().unwrap().iter().zip(&clean).filter(|(a, b)| a != b).count();
        flipped as f64 / clean.len() as f64
    };
    let (f02, f1) = (frac(0.2), frac(1.0));
    check(
        (0.18..=0.22).contains(&f02) && f1 == 1.0,
        format!("rate 0.2 flipped {:.2}%, rate 1.0 flipped {:.2}%", 100.0 * f02, 100.0 * f1),
    )
}

/// Byte-identical reruns and exact checkpoint resumption.
fn determinism(dir: &Path) -> Outcome {
    let mut failures = Vec::new();
    for (i, v) in [Variant::Fsam, Variant::SamDb, Variant::SamStrength, Variant::Fasam].into_iter().enumerate() {
        let mut c = moons_base(dir);
        c.run.steps = 60;
        c.run.sampler = if i % 2 == 0 { SamplerMode::EpochShuffle } else { SamplerMode::WithReplacement };
        c.run.track_phi = true;
        c.run.diag_every = 7;
        c.run.eval_every = 10;
        c.run.checkpoint_every = 30;
        c.optimizer.variant = v;
        c.optimizer.strength_k = if v == Variant::SamStrength { 3 } else { 1 };
        let first = dir.join(format!("{v}-a"));
        let a = run_csv(&c, &first);
        let b = run_csv(&c, &dir.join(format!("{v}-b")));
        if a != b {
            failures.push(format!("{v}: reruns differ"));
        }
        let mut r = c.clone();
        r.run.out = dir.join(format!("{v}-resumed"));
        let rec = harness::resume(&r, &first.join("checkpoints/step-30.ckpt")).unwrap();
        let tail: Vec<&str> = std::str::from_utf8(&a).unwrap().lines().skip(31).collect();
        let resumed = fs::read_to_string(&rec.metrics_csv).unwrap();
        let resumed: Vec<&str> = resumed.lines().skip(1).collect();
        let same_ckpt = fs::read(first.join("final.ckpt")).unwrap() == fs::read(rec.checkpoint.unwrap()).unwrap();
        if tail != resumed || tail.len() != 30 || !same_ckpt {
            failures.push(format!("{v}: resume diverged from the uninterrupted run"));
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() { "4 variants: identical reruns; resume at step 30 reproduces rows 30-59 and the final state".into() } else { failures.join("; ") },
    )
}

fn main() {
    // Honour `cargo test -- <filter>` style invocations that list tests.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let root = tempfile::tempdir().unwrap();
    let sub = |name: &str| {
        let p = root.path().join(name);
        fs::create_dir_all(&p).unwrap();
        p
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("reduction equivalences", Box::new({ let d = sub("c1"); move || reductions(&d) })),
        ("decomposition identity", Box::new(decomposition)),
        ("minibatch noise orthogonality", Box::new(lemma_one)),
        ("gradient and HVP correctness", Box::new(gradients)),
        ("EMA error trend in gamma", Box::new({ let d = sub("c5"); move || theorem_one(&d) })),
        ("gradient norm decay", Box::new({ let d = sub("c6"); move || theorem_two(&d) })),
        ("Lanczos spectrum", Box::new(lanczos)),
        ("two-moons variant ordering", Box::new({ let d = sub("c8"); move || two_moons(&d) })),
        ("label-noise statistics", Box::new(label_noise)),
        ("determinism and resume", Box::new({ let d = sub("c10"); move || determinism(&d) })),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let clock = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = clock.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
