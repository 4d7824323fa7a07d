//! Wall-clock latency of the forward pass and the accuracy-versus-resolution
//! table.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dpt_tensor::{Scalar, Tape, Tensor};

use crate::error::{input_err, Result};
use crate::metrics::{self, DepthEvalPair, DepthMetrics};
use crate::model::{Dpt, Prediction};
use crate::shapes;

pub const DEFAULT_RUNS: usize = 400;
pub const DEFAULT_WARMUP: usize = 10;

/// Summary of repeated measurements, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub runs: usize,
    pub mean_ms: f64,
    /// Sample standard deviation (zero for a single run).
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl Timing {
    pub fn from_samples(samples_ms: &[f64]) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(input_err("no timing samples"));
        }
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = if samples_ms.len() > 1 {
            samples_ms.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Ok(Self {
            runs: samples_ms.len(),
            mean_ms: mean,
            std_ms: var.sqrt(),
            min_ms: samples_ms.iter().cloned().fold(f64::INFINITY, f64::min),
            max_ms: samples_ms.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub height: usize,
    pub width: usize,
    pub flops: u64,
    pub timing: Timing,
}

/// Times `f` `runs` times after `warmup` untimed calls.
pub fn measure<F: FnMut() -> Result<()>>(mut f: F, runs: usize, warmup: usize) -> Result<Timing> {
    if runs == 0 {
        return Err(input_err("runs must be positive"));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Timing::from_samples(&samples)
}

/// Uniform noise in `[-1, 1]`, the range of normalized images.
pub fn random_image<T: Scalar>(h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, h, w], |_| T::lit(rng.gen_range(-1.0..=1.0)))
}

/// Latency of eval-mode inference at each square size.
pub fn bench_model<T: Scalar>(model: &Dpt<T>, sizes: &[usize], runs: usize, warmup: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let cfg = model.config();
    sizes
        .iter()
        .map(|&s| {
            let flops = shapes::flops(cfg, s, s)?;
            let image = random_image::<T>(s, s, seed);
            let timing = measure(|| model.infer(&image).map(|_| ()), runs, warmup)?;
            Ok(BenchRow {
                height: s,
                width: s,
                flops,
                timing,
            })
        })
        .collect()
}

pub fn format_bench(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:>10} {:>14} {:>11} {:>11} {:>11} {:>6}\n",
        "size", "gflops", "mean_ms", "std_ms", "min_ms", "runs"
    );
    for r in rows {
        out += &format!(
            "{:>10} {:>14.3} {:>11.3} {:>11.3} {:>11.3} {:>6}\n",
            format!("{}x{}", r.height, r.width),
            r.flops as f64 / 1e9,
            r.timing.mean_ms,
            r.timing.std_ms,
            r.timing.min_ms,
            r.timing.runs
        );
    }
    out
}

/// An evaluation sample: a normalized `3 x H x W` image and `H x W` depth
/// ground truth with its validity mask.
#[derive(Debug, Clone)]
pub struct DepthSample<T: Scalar> {
    pub image: Tensor<T>,
    pub depth: Tensor<T>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegradationRow {
    pub size: usize,
    /// Mean over samples; `None` if any sample could not be scored.
    pub abs_rel: Option<f64>,
    pub delta1_err: Option<f64>,
    /// `relative_improvement(abs_rel, abs_rel at the reference size)`.
    pub relative_pct: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegradationTable {
    pub reference: usize,
    pub rows: Vec<DegradationRow>,
}

fn resize<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if x.shape()[1..] == [h, w] {
        return Ok(x.clone());
    }
    let tape = Tape::inference();
    Ok(tape.bilinear_resize(&tape.constant(x.clone()), h, w)?.into_value())
}

fn score<T: Scalar>(model: &Dpt<T>, sample: &DepthSample<T>, size: usize) -> Result<DepthMetrics> {
    let [gh, gw] = *sample.depth.shape() else {
        return Err(input_err(format!("ground truth must be H x W, got {:?}", sample.depth.shape())));
    };
    let pred = match model.infer(&resize(&sample.image, size, size)?)? {
        Prediction::Depth(d) => d,
        Prediction::Segmentation { .. } => return Err(input_err("the degradation table needs a depth model")),
    };
    let pred = resize(&pred.reshape(&[1, size, size])?, gh, gw)?;
    let pair = DepthEvalPair::new(pred.data(), sample.depth.data()).with_mask(&sample.mask);
    metrics::depth_metrics(&pair, true)
}

/// Accuracy of the aligned prediction at each inference size, relative to
/// `reference`. Images are resized to the inference size and predictions
/// back to ground-truth resolution.
pub fn degradation_table<T: Scalar>(
    model: &Dpt<T>,
    samples: &[DepthSample<T>],
    sizes: &[usize],
    reference: usize,
) -> Result<DegradationTable> {
    if samples.is_empty() {
        return Err(input_err("no ground-truth samples"));
    }
    let mut all: Vec<usize> = sizes.to_vec();
    if !all.contains(&reference) {
        all.push(reference);
    }
    all.sort_unstable();
    let mut rows = Vec::new();
    for &size in &all {
        model.config().check_input(size, size)?;
        let mut acc = (0.0, 0.0);
        let mut note = None;
        for s in samples {
            match score(model, s, size) {
                Ok(m) => {
                    acc.0 += m.abs_rel;
                    acc.1 += m.delta_err[0];
                }
                Err(e) => {
                    note = Some(e.to_string());
                    break;
                }
            }
        }
        let n = samples.len() as f64;
        let ok = note.is_none();
        rows.push(DegradationRow {
            size,
            abs_rel: ok.then_some(acc.0 / n),
            delta1_err: ok.then_some(acc.1 / n),
            relative_pct: None,
            note,
        });
    }
    let base = rows.iter().find(|r| r.size == reference).and_then(|r| r.abs_rel);
    for r in &mut rows {
        if let (Some(v), Some(b)) = (r.abs_rel, base) {
            r.relative_pct = metrics::relative_improvement(v, b).ok();
        }
    }
    Ok(DegradationTable { reference, rows })
}

impl fmt::Display for DegradationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>, p: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.p$}"));
        writeln!(f, "relative performance vs inference size (reference {})", self.reference)?;
        writeln!(f, "{:>8} {:>10} {:>12} {:>12}", "size", "abs_rel", "delta1_err%", "rel_abs_rel%")?;
        for r in &self.rows {
            write!(
                f,
                "{:>8} {:>10} {:>12} {:>12}",
                r.size,
                opt(r.abs_rel, 4),
                opt(r.delta1_err, 2),
                opt(r.relative_pct, 2)
            )?;
            if let Some(n) = &r.note {
                write!(f, "  ({n})")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_summary() {
        let t = Timing::from_samples(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.mean_ms, 2.0);
        assert_eq!(t.std_ms, 1.0);
        assert_eq!(t.min_ms, 1.0);
        assert_eq!(t.max_ms, 3.0);
        assert!(Timing::from_samples(&[]).is_err());
    }

    #[test]
    fn default_run_count() {
        assert_eq!(DEFAULT_RUNS, 400);
    }

    #[test]
    fn measure_calls_warmup_plus_runs() {
        let mut calls = 0;
        let t = measure(
            || {
                calls += 1;
                Ok(())
            },
            5,
            2,
        )
        .unwrap();
        assert_eq!(calls, 7);
        assert_eq!(t.runs, 5);
        assert!(t.mean_ms >= t.min_ms);
    }
}
