//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs as a plain binary so every line reaches the output.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use lecaps::bench::benchmark;
use lecaps::checkpoint::Checkpoint;
use lecaps::config::{DataConfig, DatasetKind, RunConfig};
use lecaps::datasets::load_dataset;
use lecaps::train::{train, OutputDir, Trainer};
use lecaps_core::capsule::capsule_dropout;
use lecaps_core::data::expand_mnist;
use lecaps_core::decoder::DecoderConfig;
use lecaps_core::gradcheck::{check_case, OpCase};
use lecaps_core::loss::{margin_loss, LossParams};
use lecaps_core::model::{count_params, primary_caps_count, ModelConfig, Network};
use lecaps_core::routing::route;
use lecaps_core::{seeded_rng, Tape, Tensor};
use rand::Rng as _;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The smoke configuration with data paths anchored at the workspace root.
fn smoke_config() -> RunConfig {
    let root = workspace_root();
    let mut cfg = RunConfig::load(&root.join("configs/smoke.toml")).expect("configs/smoke.toml");
    cfg.data.train_files = cfg.data.train_files.iter().map(|p| root.join(p)).collect();
    cfg.resolve().unwrap();
    cfg
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for case in OpCase::ALL {
        for seed in 0..10 {
            let err = check_case(case, seed).map_err(|e| format!("{}: {e}", case.name()))?.max_rel_error();
            if err.is_nan() || err >= 1e-4 {
                failures.push(format!("{} seed {seed}: {err:.2e}", case.name()));
            }
            if err > worst.0 {
                worst = (err, case.name());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        failures.is_empty() && secs < 120.0,
        format!(
            "{} ops x 10 instances, worst rel err {:.2e} ({}), {secs:.1}s{}",
            OpCase::ALL.len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!(", failures {failures:?}") }
        ),
    )
}

fn capsule_counts() -> Outcome {
    let base = primary_caps_count(&ModelConfig::baseline([1, 28, 28])).map_err(|e| e.to_string())?;
    let le = primary_caps_count(&ModelConfig::le_capsnet([1, 28, 28])).map_err(|e| e.to_string())?;
    ensure(base == 1152 && le == 108, format!("baseline {base}, LE {le}"))
}

fn parameter_counts() -> Outcome {
    let total = |c: ModelConfig| count_params(&c).map(|p| p.total).map_err(|e| e.to_string());
    let base_mnist = total(ModelConfig::baseline([1, 28, 28]))?;
    let base_cifar = total(ModelConfig::baseline([3, 32, 32]))?;
    let le_mnist = total(ModelConfig::le_capsnet([1, 28, 28]))?;
    let le_cifar = total(ModelConfig::le_capsnet([3, 32, 32]))?;
    let within = |n: usize, target: f64| (n as f64 - target).abs() <= 0.02 * target;
    ensure(
        within(base_mnist, 8.2e6) && within(base_cifar, 11.7e6) && le_cifar <= 4_200_000 && le_mnist <= 3_800_000,
        format!("baseline {base_mnist} / {base_cifar}, LE {le_mnist} / {le_cifar} (28x28x1 / 32x32x3)"),
    )
}

fn speed_ratios() -> Outcome {
    let run = |c: ModelConfig| benchmark(&c, "mnist", 128, 3, 1, 1).map_err(|e| e.to_string());
    let base = run(ModelConfig::baseline([1, 28, 28]))?;
    let le = run(ModelConfig::le_capsnet([1, 28, 28]))?;
    let train = le.train_seconds() / base.train_seconds();
    let infer = le.infer_seconds() / base.infer_seconds();
    ensure(
        train <= 0.7 && infer <= 0.5,
        format!(
            "train {:.3}s vs {:.3}s (ratio {train:.3}), inference {:.3}s vs {:.3}s (ratio {infer:.3}), batch 128",
            le.train_seconds(),
            base.train_seconds(),
            le.infer_seconds(),
            base.infer_seconds()
        ),
    )
}

/// Two full smoke runs with the same seed; returns (seconds, final accuracy,
/// csv) for each.
fn smoke_runs() -> Result<Vec<(f64, f64, String)>, String> {
    let cfg = smoke_config();
    let (train_split, test) = load_dataset(&cfg.data).map_err(|e| e.to_string())?;
    if train_split.len() != 5000 || test.len() != 1000 {
        return Err(format!("smoke split sizes {} / {}", train_split.len(), test.len()));
    }
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for r in 0..2 {
        let out = OutputDir(tmp.path().join(format!("run{r}")));
        let start = Instant::now();
        let trainer = Trainer::new(&cfg.model, &cfg.train).map_err(|e| e.to_string())?;
        let outcome = train(trainer, &train_split, &test, Some(&out), |_| {}).map_err(|e| e.to_string())?;
        let secs = start.elapsed().as_secs_f64();
        let acc = outcome.history.last().map_or(0.0, |m| m.test_acc);
        let csv = std::fs::read_to_string(out.metrics()).map_err(|e| e.to_string())?;
        runs.push((secs, acc, csv));
    }
    Ok(runs)
}

fn training_smoke(runs: &[(f64, f64, String)]) -> Outcome {
    let (secs, acc, _) = runs[0];
    ensure(
        acc >= 0.90 && secs < 900.0,
        format!("small LE model, 5000 train / 1000 held out, 3 epochs: accuracy {:.2}% in {secs:.0}s", acc * 100.0),
    )
}

fn routing_invariants() -> Outcome {
    let cfg = ModelConfig::le_capsnet([1, 28, 28]);
    let net = Network::new(&cfg).map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(6);
    let store = net.init_params::<f64>(&mut rng);
    let images: Vec<f64> = (0..4 * 28 * 28).map(|_| rng.random::<f64>()).collect();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(Tensor::new(&[4, 1, 28, 28], images).unwrap());
    let out = net.forward(&mut tape, &p, x, None, true, &mut rng).map_err(|e| e.to_string())?;
    let mut worst_row = 0.0f64;
    for c in &out.couplings {
        let n_out = *tape.shape(*c).last().unwrap();
        for row in tape.data(*c).chunks(n_out) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let max_norm = tape
        .data(out.class_caps)
        .chunks(cfg.class_dim)
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    // large predictions push routed outputs toward the unit sphere
    let mut tape = Tape::<f64>::new();
    let u: Vec<f64> = (0..2 * 32 * 8).map(|_| 20.0 * (rng.random::<f64>() - 0.5)).collect();
    let w: Vec<f64> = (0..32 * 10 * 16 * 8).map(|_| 4.0 * (rng.random::<f64>() - 0.5)).collect();
    let uv = tape.constant(Tensor::new(&[2, 32, 8], u).unwrap());
    let wv = tape.constant(Tensor::new(&[32, 10, 16, 8], w).unwrap());
    let routed = route(&mut tape, uv, wv, 3, false).map_err(|e| e.to_string())?;
    for c in &routed.couplings {
        for row in tape.data(*c).chunks(10) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let max_norm = tape
        .data(routed.output)
        .chunks(16)
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(max_norm, f64::max);
    // couplings are batch-dependent state; no trainable tensor may stand in for them
    let coupling_like = store.names().iter().zip(store.tensors()).any(|(name, t)| {
        let name = name.to_lowercase();
        name.contains("coupl") || name.contains("logit") || t.shape() == [net.n_primary, cfg.n_classes]
    });
    ensure(
        worst_row < 1e-6 && max_norm < 1.0 && !coupling_like && out.couplings.len() == cfg.routing.iterations,
        format!(
            "{} iterations, worst row-sum error {worst_row:.1e}, max output norm {max_norm:.6}, couplings in parameter set: {coupling_like}",
            out.couplings.len()
        ),
    )
}

fn dropout_statistics() -> Outcome {
    let (batch, caps, dim) = (1000, 100, 4);
    let mut details = Vec::new();
    let mut ok = true;
    for (i, rate) in [0.05, 0.10, 0.40].into_iter().enumerate() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[batch, caps, dim], 1.0));
        let y = capsule_dropout(&mut tape, x, rate, true, false, &mut seeded_rng(i as u64)).map_err(|e| e.to_string())?;
        let dropped = tape.data(y).chunks(dim).filter(|c| c.iter().all(|&v| v == 0.0)).count();
        let frac = dropped as f64 / (batch * caps) as f64;
        ok &= (frac - rate).abs() <= 0.005;
        details.push(format!("{:.0}% -> {:.3}%", rate * 100.0, frac * 100.0));
    }
    let mut rng = seeded_rng(9);
    let data: Vec<f32> = (0..batch * caps * dim).map(|_| rng.random::<f32>() - 0.5).collect();
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(&[batch, caps, dim], data.clone()).unwrap());
    let y = capsule_dropout(&mut tape, x, 0.4, false, false, &mut rng).map_err(|e| e.to_string())?;
    let identity = tape.data(y).iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits());
    ok &= identity;
    details.push(format!("eval identity {identity}"));
    ensure(ok, format!("{} over 1e5 capsules", details.join(", ")))
}

/// (length, class present, m_plus, m_minus, lambda, expected term)
const MARGIN_TABLE: [(f64, bool, f64, f64, f64, f64); 20] = [
    (0.0, true, 0.9, 0.1, 0.5, 0.81),
    (0.0, false, 0.95, 0.05, 0.5, 0.0),
    (0.05, true, 0.8, 0.2, 0.25, 0.5625),
    (0.05, false, 0.9, 0.1, 1.0, 0.0),
    (0.1, true, 0.9, 0.1, 0.5, 0.64),
    (0.1, false, 0.95, 0.05, 0.5, 0.00125),
    (0.3, true, 0.8, 0.2, 0.25, 0.25),
    (0.3, false, 0.9, 0.1, 1.0, 0.04),
    (0.5, true, 0.9, 0.1, 0.5, 0.16),
    (0.5, false, 0.95, 0.05, 0.5, 0.10125),
    (0.85, true, 0.8, 0.2, 0.25, 0.0),
    (0.85, false, 0.9, 0.1, 1.0, 0.5625),
    (0.9, true, 0.9, 0.1, 0.5, 0.0),
    (0.9, false, 0.95, 0.05, 0.5, 0.36125),
    (0.93, true, 0.8, 0.2, 0.25, 0.0),
    (0.93, false, 0.9, 0.1, 1.0, 0.6889),
    (0.97, true, 0.9, 0.1, 0.5, 0.0),
    (0.97, false, 0.95, 0.05, 0.5, 0.4232),
    (0.999, true, 0.8, 0.2, 0.25, 0.0),
    (0.999, false, 0.9, 0.1, 1.0, 0.808201),
];

fn margin_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for &(length, present, m_plus, m_minus, lambda, expected) in &MARGIN_TABLE {
        let params = LossParams {
            m_plus,
            m_minus,
            lambda,
            ..LossParams::default()
        };
        // class 0 carries the tested length; class 1 is either absent at
        // length 0 or present at length 1, contributing nothing either way
        let (lengths, target) = if present { ([length, 0.0], 0) } else { ([length, 1.0], 1) };
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::new(&[1, 2], lengths.to_vec()).unwrap());
        let loss = margin_loss(&mut tape, l, &[target], &params).map_err(|e| e.to_string())?;
        worst = worst.max((tape.data(loss)[0] - expected).abs());
    }
    ensure(worst <= 1e-7, format!("20 cases, worst abs error {worst:.1e}"))
}

fn decoder_claims() -> Outcome {
    let decoder_params = |input: [usize; 3], decoder: DecoderConfig| -> Result<usize, String> {
        let cfg = ModelConfig {
            decoder,
            ..ModelConfig::le_capsnet(input)
        };
        let count = count_params(&cfg).map_err(|e| e.to_string())?;
        Ok(count.breakdown.iter().filter(|(m, _)| m == "decoder").map(|(_, n)| n).sum())
    };
    let mut ok = true;
    let mut details = Vec::new();
    for input in [[1, 28, 28], [3, 32, 32]] {
        let deconv = decoder_params(input, DecoderConfig::deconv())?;
        let fc = decoder_params(input, DecoderConfig::fc())?;
        ok &= deconv < fc;
        details.push(format!("{}x{}x{}: deconv {deconv} vs FC {fc}", input[1], input[2], input[0]));
    }

    let net = Network::new(&ModelConfig::le_capsnet([1, 28, 28])).map_err(|e| e.to_string())?;
    let mut rng = seeded_rng(9);
    let store = net.init_params::<f64>(&mut rng);
    let (b, n, d) = (3, 10, 16);
    let index = [2usize, 7, 0];
    let caps: Vec<f64> = (0..b * n * d).map(|_| rng.random::<f64>() - 0.5).collect();
    let reconstruct = |caps: Vec<f64>| {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let c = tape.constant(Tensor::new(&[b, n, d], caps).unwrap());
        let r = net.decoder.reconstruct(&mut tape, &p, c, &index).unwrap();
        tape.data(r).to_vec()
    };
    let reference = reconstruct(caps.clone());
    let mut invariant = true;
    for trial in 0..20 {
        let mut permuted = caps.clone();
        for (s, &keep) in index.iter().enumerate() {
            let others: Vec<usize> = (0..n).filter(|&j| j != keep).collect();
            let mut order = others.clone();
            let mut prng = seeded_rng(100 + trial);
            for i in (1..order.len()).rev() {
                order.swap(i, prng.random_range(0..=i));
            }
            for (&dst, &src) in others.iter().zip(&order) {
                let (to, from) = ((s * n + dst) * d, (s * n + src) * d);
                permuted[to..to + d].copy_from_slice(&caps[from..from + d]);
            }
        }
        let r = reconstruct(permuted);
        invariant &= r.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    ok &= invariant;
    details.push(format!("reconstruction unchanged under 20 permutations of unselected capsules: {invariant}"));
    ensure(ok, details.join(", "))
}

fn expanded_mnist() -> Outcome {
    let cfg = smoke_config();
    let data = DataConfig {
        holdout: 0,
        train_size: None,
        ..cfg.data.clone()
    };
    // the same files as test set keeps all 10k digits in the training pool
    let files = DataConfig {
        test_files: data.train_files.clone(),
        ..data
    };
    let (pool, _) = load_dataset(&files).map_err(|e| e.to_string())?;
    let pool = pool.take(10_000.min(pool.len())).map_err(|e| e.to_string())?;
    let (expanded, offsets) = expand_mnist(&pool, 40, &mut seeded_rng(10)).map_err(|e| e.to_string())?;
    let shape_ok = expanded.image_shape() == [1, 40, 40];
    let worst_sum = (0..pool.len())
        .map(|i| {
            let a: f64 = pool.image(i).iter().map(|&x| x as f64).sum();
            let b: f64 = expanded.image(i).iter().map(|&x| x as f64).sum();
            (a - b).abs()
        })
        .fold(0.0, f64::max);
    let mut counts = [0usize; 169];
    for &(r, c) in &offsets {
        counts[r * 13 + c] += 1;
    }
    let expected = offsets.len() as f64 / 169.0;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(168.0).unwrap().cdf(chi2);

    // affine path: train briefly on expanded digits, evaluate on transformed ones
    let affine_cfg = DataConfig {
        dataset: DatasetKind::AffineTest,
        holdout: 500,
        train_size: Some(2000),
        ..cfg.data.clone()
    };
    let (train_split, test) = load_dataset(&affine_cfg).map_err(|e| e.to_string())?;
    let model = ModelConfig::le_capsnet_small(train_split.image_shape());
    let tc = lecaps::config::TrainConfig { epochs: 1, ..cfg.train.clone() };
    let outcome = train(Trainer::new(&model, &tc).map_err(|e| e.to_string())?, &train_split, &test, None, |_| {})
        .map_err(|e| e.to_string())?;
    let acc = outcome.history.last().map_or(f64::NAN, |m| m.test_acc);
    let affine_ok = (0.0..=1.0).contains(&acc) && test.image_shape() == [1, 40, 40];
    ensure(
        shape_ok && worst_sum < 1e-9 && p > 0.01 && affine_ok,
        format!(
            "canvas {:?}, worst pixel-sum change {worst_sum:.1e}, offsets chi2 {chi2:.1} (df 168, p {p:.3}) over {} draws; affine test accuracy {:.2}% on {} images after 1 epoch",
            expanded.image_shape(),
            offsets.len(),
            acc * 100.0,
            test.len()
        ),
    )
}

fn determinism(runs: &[(f64, f64, String)]) -> Outcome {
    // epoch_seconds is wall-clock; every other column must match bit for bit
    let strip = |csv: &str| -> Vec<String> {
        csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()).collect()
    };
    let csv_equal = strip(&runs[0].2) == strip(&runs[1].2) && runs[0].2.lines().count() > 1;

    let mut cfg = smoke_config();
    cfg.model.pcg.dropout_rate = 0.1;
    let (train_split, _) = load_dataset(&cfg.data).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(&cfg.model, &cfg.train).map_err(|e| e.to_string())?;
    let batch: Vec<usize> = (0..32).collect();
    let next: Vec<usize> = (32..64).collect();
    let (x, y) = train_split.batch::<f32>(&batch).unwrap();
    trainer.train_step(x, &y).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = tmp.path().join("mid.ckpt");
    trainer.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let mut restored = Trainer::from_checkpoint(Checkpoint::load(&path).map_err(|e| e.to_string())?, &cfg.train)
        .map_err(|e| e.to_string())?;
    let (x, y) = train_split.batch::<f32>(&next).unwrap();
    let la = trainer.train_step(x.clone(), &y).map_err(|e| e.to_string())?;
    let lb = restored.train_step(x, &y).map_err(|e| e.to_string())?;
    let same_params = trainer
        .params
        .tensors()
        .iter()
        .zip(restored.params.tensors())
        .all(|(a, b)| a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    let step_equal = la.to_bits() == lb.to_bits() && same_params;
    ensure(
        csv_equal && step_equal,
        format!(
            "metrics CSV identical across two smoke runs (seconds column excluded): {csv_equal}; next step after checkpoint reload bitwise equal: {step_equal}"
        ),
    )
}

fn main() {
    // optional criterion numbers on the command line restrict the run
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| only.is_empty() || only.contains(&id);
    let started = Instant::now();
    let mut failed = 0;
    let mut ran = 0;
    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        ran += 1;
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{id:>2}] {name}: {detail} ({:.1}s)", Duration::as_secs_f64(&t.elapsed()));
    };

    report(1, "gradient integrity", &mut gradient_integrity);
    report(2, "primary capsule counts", &mut capsule_counts);
    report(3, "parameter counts", &mut parameter_counts);
    report(4, "speed ratios", &mut speed_ratios);
    let runs = if wanted(5) || wanted(11) {
        catch_unwind(smoke_runs).unwrap_or_else(|_| Err("smoke runs panicked".into()))
    } else {
        Ok(Vec::new())
    };
    report(5, "training smoke", &mut || training_smoke(runs.as_ref().map_err(Clone::clone)?));
    report(6, "routing invariants", &mut routing_invariants);
    report(7, "capsule dropout statistics", &mut dropout_statistics);
    report(8, "margin loss oracle", &mut margin_oracle);
    report(9, "decoder claims", &mut decoder_claims);
    report(10, "expanded MNIST pipeline", &mut expanded_mnist);
    report(11, "determinism", &mut || determinism(runs.as_ref().map_err(Clone::clone)?));

    println!(
        "acceptance: {} passed, {failed} failed in {:.0}s",
        ran - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
