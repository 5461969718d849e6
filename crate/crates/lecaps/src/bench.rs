//! Parameter counts and wall-clock timing of training steps and inference.

use std::fmt::Write as _;
use std::time::Instant;

use lecaps_core::loss::LossParams;
use lecaps_core::model::{count_params, primary_caps_count, ModelConfig, Network};
use lecaps_core::optim::{Adam, AdamConfig};
use lecaps_core::{seeded_rng, Tensor};
use rand::Rng as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub model: String,
    pub dataset: String,
    pub param_count: usize,
    pub primary_caps_count: usize,
    pub batch_size: usize,
    pub warmup: usize,
    pub iters: usize,
    pub repeats: usize,
    /// Median per-batch seconds of each repeat.
    pub train_repeats: Vec<f64>,
    pub infer_repeats: Vec<f64>,
    pub threads: usize,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn spread(xs: &[f64]) -> (f64, f64) {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

impl BenchReport {
    /// Median over repeats of the per-repeat median train-step time.
    pub fn train_seconds(&self) -> f64 {
        median(&self.train_repeats)
    }

    pub fn infer_seconds(&self) -> f64 {
        median(&self.infer_repeats)
    }

    /// One `key=value` line.
    pub fn to_line(&self) -> String {
        let (tlo, thi) = spread(&self.train_repeats);
        let (ilo, ihi) = spread(&self.infer_repeats);
        format!(
            "model={} dataset={} param_count={} primary_caps_count={} batch_size={} warmup={} iters={} repeats={} threads={} train_seconds={:.6} train_min={:.6} train_max={:.6} infer_seconds={:.6} infer_min={:.6} infer_max={:.6}",
            self.model,
            self.dataset,
            self.param_count,
            self.primary_caps_count,
            self.batch_size,
            self.warmup,
            self.iters,
            self.repeats,
            self.threads,
            self.train_seconds(),
            tlo,
            thi,
            self.infer_seconds(),
            ilo,
            ihi
        )
    }

    pub const CSV_HEADER: &'static str = "model,dataset,param_count,primary_caps_count,batch_size,warmup,iters,repeats,threads,train_seconds,train_min,train_max,infer_seconds,infer_min,infer_max";

    pub fn to_csv_row(&self) -> String {
        self.to_line()
            .split(' ')
            .map(|kv| kv.split_once('=').map_or(kv, |(_, v)| v))
            .collect::<Vec<_>>()
            .join(",")
    }
}

pub fn reports_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from(BenchReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.to_csv_row());
    }
    out
}

/// Times `iters` train steps (forward, backward, Adam update) and `iters`
/// inference batches after `warmup` untimed ones, `repeats` times over, on
/// random images. Single-threaded.
pub fn benchmark(
    config: &ModelConfig,
    dataset: &str,
    batch_size: usize,
    iters: usize,
    warmup: usize,
    repeats: usize,
) -> Result<BenchReport> {
    if iters == 0 || repeats == 0 {
        return Err(Error::Bench("at least one measured iteration and repeat are required".into()));
    }
    if batch_size == 0 {
        return Err(Error::Bench("batch size must be positive".into()));
    }
    let net = Network::new(config)?;
    let mut rng = seeded_rng(0xbe4c);
    let mut params = net.init_params::<f32>(&mut rng);
    let mut adam = Adam::new(&params, AdamConfig::default());
    let [c, h, w] = config.input;
    let images: Vec<f32> = (0..batch_size * c * h * w).map(|_| rng.random::<f32>()).collect();
    let images = Tensor::new(&[batch_size, c, h, w], images)?;
    let labels: Vec<usize> = (0..batch_size).map(|i| i % config.n_classes).collect();
    let loss = LossParams::default();

    let mut train_step = |rng: &mut lecaps_core::Rng| -> Result<()> {
        let (_, grads) = net.gradients(&params, images.clone(), &labels, &loss, rng)?;
        adam.step(&mut params, &grads, 1e-3)?;
        Ok(())
    };
    let mut train_repeats = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        for _ in 0..warmup {
            train_step(&mut rng)?;
        }
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters {
            let t = Instant::now();
            train_step(&mut rng)?;
            times.push(t.elapsed().as_secs_f64());
        }
        train_repeats.push(median(&times));
    }

    let mut infer_repeats = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        for _ in 0..warmup {
            net.predict(&params, images.clone(), &mut rng)?;
        }
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters {
            let t = Instant::now();
            net.predict(&params, images.clone(), &mut rng)?;
            times.push(t.elapsed().as_secs_f64());
        }
        infer_repeats.push(median(&times));
    }

    Ok(BenchReport {
        model: config.name.clone(),
        dataset: dataset.into(),
        param_count: count_params(config)?.total,
        primary_caps_count: primary_caps_count(config)?,
        batch_size,
        warmup,
        iters,
        repeats,
        train_repeats,
        infer_repeats,
        threads: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_iterations_is_an_error() {
        let cfg = ModelConfig::le_capsnet_small([1, 28, 28]);
        assert!(matches!(benchmark(&cfg, "mnist", 2, 0, 0, 1), Err(Error::Bench(_))));
        assert!(benchmark(&cfg, "mnist", 2, 1, 0, 0).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn report_formats_agree() {
        let cfg = ModelConfig::le_capsnet_small([1, 28, 28]);
        let r = benchmark(&cfg, "mnist", 2, 1, 0, 2).unwrap();
        assert!(r.train_seconds() > 0.0 && r.infer_seconds() > 0.0);
        let line = r.to_line();
        assert!(line.starts_with("model=le-capsnet-small dataset=mnist "));
        let row = r.to_csv_row();
        assert_eq!(row.split(',').count(), BenchReport::CSV_HEADER.split(',').count());
    }
}
