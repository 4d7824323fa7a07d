//! Affine alignment, depth and segmentation metrics, ordinal-relation
//! error and relative-performance arithmetic.

use dpt_tensor::{Scalar, Tape, Var};
use serde::Serialize;

use crate::error::{DptError, Result};

/// Lower clamp applied to aligned inverse depth before inversion.
pub const DEPTH_FLOOR: f64 = 1e-8;

/// Default WHDR threshold on the inverse-depth ratio.
pub const WHDR_MARGIN: f64 = 0.03;

fn metric_err(msg: impl Into<String>) -> DptError {
    DptError::Metric(msg.into())
}

fn masked<'a, A: Scalar, B: Scalar>(
    a: &'a [A],
    b: &'a [B],
    mask: Option<&'a [bool]>,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if a.len() != b.len() {
        return Err(metric_err(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if let Some(m) = mask {
        if m.len() != a.len() {
            return Err(metric_err(format!("mask length {} vs {}", m.len(), a.len())));
        }
    }
    Ok(a.iter()
        .zip(b)
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, (x, y))| (x.as_f64(), y.as_f64())))
}

/// Least-squares `(scale, shift)` minimizing `sum (scale * p + shift - g)^2`
/// over masked-in pixels.
pub fn align_affine_lsq<A: Scalar, B: Scalar>(pred: &[A], target: &[B], mask: Option<&[bool]>) -> Result<(f64, f64)> {
    let pairs: Vec<(f64, f64)> = masked(pred, target, mask)?.collect();
    if pairs.len() < 2 {
        return Err(metric_err("alignment needs at least two valid pixels"));
    }
    let n = pairs.len() as f64;
    let mp = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mg = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut cov, mut var) = (0.0, 0.0);
    for &(p, g) in &pairs {
        cov += (p - mp) * (g - mg);
        var += (p - mp) * (p - mp);
    }
    if !(var > n * (4.0 * f64::EPSILON * mp.abs()).powi(2)) {
        return Err(metric_err("degenerate alignment: prediction is constant"));
    }
    let scale = cov / var;
    Ok((scale, mg - scale * mp))
}

/// Largest `|scale * p + shift - g|` over masked-in pixels.
pub fn affine_residual<A: Scalar, B: Scalar>(pred: &[A], target: &[B], mask: Option<&[bool]>, scale: f64, shift: f64) -> Result<f64> {
    Ok(masked(pred, target, mask)?
        .map(|(p, g)| (scale * p + shift - g).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    #[default]
    Depth,
    InverseDepth,
}

/// A prediction (inverse depth, arbitrary scale and shift) with its ground
/// truth. Masked-in ground truth must be strictly positive.
#[derive(Debug, Clone, Copy)]
pub struct DepthEvalPair<'a, T: Scalar> {
    pub prediction: &'a [T],
    pub ground_truth: &'a [T],
    pub mask: Option<&'a [bool]>,
    pub domain: GroundTruth,
}

impl<'a, T: Scalar> DepthEvalPair<'a, T> {
    pub fn new(prediction: &'a [T], ground_truth: &'a [T]) -> Self {
        Self {
            prediction,
            ground_truth,
            mask: None,
            domain: GroundTruth::Depth,
        }
    }

    pub fn with_mask(mut self, mask: &'a [bool]) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_domain(mut self, domain: GroundTruth) -> Self {
        self.domain = domain;
        self
    }

    fn inverse_target(&self) -> Vec<f64> {
        self.ground_truth
            .iter()
            .map(|g| match self.domain {
                GroundTruth::Depth => 1.0 / g.as_f64(),
                GroundTruth::InverseDepth => g.as_f64(),
            })
            .collect()
    }

    fn depth_target(&self) -> Vec<f64> {
        self.ground_truth
            .iter()
            .map(|g| match self.domain {
                GroundTruth::Depth => g.as_f64(),
                GroundTruth::InverseDepth => 1.0 / g.as_f64(),
            })
            .collect()
    }
}

/// Scale and shift mapping the prediction onto inverse ground truth.
pub fn align_pair<T: Scalar>(pair: &DepthEvalPair<T>) -> Result<(f64, f64)> {
    align_affine_lsq(pair.prediction, &pair.inverse_target(), pair.mask)
}

/// Mean of the per-pair scales and shifts.
pub fn batch_align_average<T: Scalar>(pairs: &[DepthEvalPair<T>]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(metric_err("no pairs to align"));
    }
    let mut sum = (0.0, 0.0);
    for p in pairs {
        let (s, t) = align_pair(p)?;
        sum.0 += s;
        sum.1 += t;
    }
    let n = pairs.len() as f64;
    Ok((sum.0 / n, sum.1 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    /// Fraction with `max(p/g, g/p) < 1.25^k` (higher is better).
    pub delta_acc: [f64; 3],
    /// Percentage with `max(p/g, g/p) >= 1.25^k` (lower is better).
    pub delta_err: [f64; 3],
    pub pixels: usize,
}

/// Metrics of a prediction already in the depth domain against depth
/// ground truth, over masked-in pixels.
pub fn depth_metrics_raw<A: Scalar, B: Scalar>(pred: &[A], gt: &[B], mask: Option<&[bool]>) -> Result<DepthMetrics> {
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut se, mut se_log, mut log10) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    for (p, g) in masked(pred, gt, mask)? {
        if !(g > 0.0) {
            return Err(metric_err(format!("ground truth {g} is not positive")));
        }
        if !(p > 0.0) {
            return Err(metric_err(format!("predicted depth {p} is not positive")));
        }
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        se += diff * diff;
        let dl = p.ln() - g.ln();
        se_log += dl * dl;
        log10 += (p.log10() - g.log10()).abs();
        let delta = (p / g).max(g / p);
        for (k, w) in within.iter_mut().enumerate() {
            if delta < 1.25f64.powi(k as i32 + 1) {
                *w += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(metric_err("empty mask"));
    }
    let nf = n as f64;
    let delta_acc = within.map(|w| w as f64 / nf);
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (se / nf).sqrt(),
        rmse_log: (se_log / nf).sqrt(),
        log10: log10 / nf,
        delta_acc,
        delta_err: delta_acc.map(|a| 100.0 * (1.0 - a)),
        pixels: n,
    })
}

/// Aligns the inverse-depth prediction to inverse ground truth with the
/// given affine map, clamps at `floor`, inverts, and scores in depth.
pub fn evaluate_depth_with<T: Scalar>(pair: &DepthEvalPair<T>, scale: f64, shift: f64, floor: f64) -> Result<DepthMetrics> {
    let depth: Vec<f64> = pair
        .prediction
        .iter()
        .map(|p| 1.0 / (scale * p.as_f64() + shift).max(floor))
        .collect();
    depth_metrics_raw(&depth, &pair.depth_target(), pair.mask)
}

/// Per-image alignment followed by depth-domain metrics.
pub fn evaluate_depth<T: Scalar>(pair: &DepthEvalPair<T>) -> Result<(DepthMetrics, (f64, f64))> {
    let (s, t) = align_pair(pair)?;
    Ok((evaluate_depth_with(pair, s, t, DEPTH_FLOOR)?, (s, t)))
}

/// `aligned = false` treats the prediction as depth already.
pub fn depth_metrics<T: Scalar>(pair: &DepthEvalPair<T>, aligned: bool) -> Result<DepthMetrics> {
    if aligned {
        Ok(evaluate_depth(pair)?.0)
    } else {
        depth_metrics_raw(pair.prediction, &pair.depth_target(), pair.mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordinal {
    ACloser,
    BCloser,
}

/// Two pixels `(row, col)` with an annotated depth order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrdinalPair {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub relation: Ordinal,
}

/// Fraction of pairs whose predicted order disagrees with the annotation.
///
/// `pred` is row-major inverse depth of width `width`. A point counts as
/// closer when its inverse depth exceeds the other's by more than the
/// ratio `1 + margin`; pairs within the margin are predicted "equal" and
/// therefore always disagree with the annotation.
pub fn whdr<T: Scalar>(pred: &[T], width: usize, pairs: &[OrdinalPair], margin: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(metric_err("no ordinal pairs"));
    }
    if width == 0 || pred.len() % width != 0 {
        return Err(metric_err("prediction length is not a multiple of width"));
    }
    let height = pred.len() / width;
    let at = |(r, c): (usize, usize)| -> Result<f64> {
        if r >= height || c >= width {
            return Err(metric_err(format!("point ({r}, {c}) outside {height}x{width}")));
        }
        Ok(pred[r * width + c].as_f64())
    };
    let mut wrong = 0usize;
    for pair in pairs {
        let (za, zb) = (at(pair.a)?, at(pair.b)?);
        let predicted = if za > zb * (1.0 + margin) {
            Some(Ordinal::ACloser)
        } else if zb > za * (1.0 + margin) {
            Some(Ordinal::BCloser)
        } else {
            None
        };
        if predicted != Some(pair.relation) {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegMetrics {
    pub pix_acc: f64,
    pub miou: f64,
    /// `None` for classes absent from both maps.
    pub per_class_iou: Vec<Option<f64>>,
    pub pixels: usize,
}

/// `num_classes x num_classes` counts indexed `[gt][pred]`, skipping
/// pixels whose ground truth is `ignore_label`.
pub fn confusion_matrix(pred: &[usize], gt: &[usize], num_classes: usize, ignore_label: Option<usize>) -> Result<Vec<Vec<u64>>> {
    if pred.len() != gt.len() {
        return Err(metric_err(format!("length mismatch: {} vs {}", pred.len(), gt.len())));
    }
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if Some(g) == ignore_label {
            continue;
        }
        if g >= num_classes || p >= num_classes {
            return Err(metric_err(format!("label out of range: pred {p}, gt {g}")));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

pub fn seg_metrics(pred: &[usize], gt: &[usize], num_classes: usize, ignore_label: Option<usize>) -> Result<SegMetrics> {
    let m = confusion_matrix(pred, gt, num_classes, ignore_label)?;
    let total: u64 = m.iter().flatten().sum();
    if total == 0 {
        return Err(metric_err("no valid pixels"));
    }
    let correct: u64 = (0..num_classes).map(|c| m[c][c]).sum();
    let per_class_iou: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let inter = m[c][c];
            let gt_c: u64 = m[c].iter().sum();
            let pred_c: u64 = m.iter().map(|row| row[c]).sum();
            let union = gt_c + pred_c - inter;
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    Ok(SegMetrics {
        pix_acc: correct as f64 / total as f64,
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class_iou,
        pixels: total as usize,
    })
}

/// `100 * (new - baseline) / baseline`; negative means a lower value.
pub fn relative_improvement(new_value: f64, baseline: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(metric_err("baseline is zero"));
    }
    Ok(100.0 * (new_value - baseline) / baseline)
}

/// Mean cross-entropy over pixels whose label differs from `ignore_label`.
pub fn cross_entropy_loss<T: Scalar>(
    tape: &Tape<T>,
    logits: &Var<T>,
    labels: &[usize],
    ignore_label: Option<usize>,
) -> Result<Var<T>> {
    let labels: Vec<Option<usize>> = labels
        .iter()
        .map(|&l| (Some(l) != ignore_label).then_some(l))
        .collect();
    Ok(tape.cross_entropy(logits, &labels)?)
}

pub fn masked_mse_loss<T: Scalar>(tape: &Tape<T>, pred: &Var<T>, gt: &Var<T>, mask: &[bool]) -> Result<Var<T>> {
    Ok(tape.masked_mse(pred, gt, mask)?)
}

/// One `key=value` line per metric.
pub trait Report: Serialize {
    fn key_values(&self) -> Vec<(String, String)>;

    fn to_kv(&self) -> String {
        self.key_values()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

impl Report for DepthMetrics {
    fn key_values(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("abs_rel".to_string(), format!("{:.6}", self.abs_rel)),
            ("sq_rel".to_string(), format!("{:.6}", self.sq_rel)),
            ("rmse".to_string(), format!("{:.6}", self.rmse)),
            ("rmse_log".to_string(), format!("{:.6}", self.rmse_log)),
            ("log10".to_string(), format!("{:.6}", self.log10)),
        ];
        for k in 0..3 {
            kv.push((format!("delta{}_acc", k + 1), format!("{:.6}", self.delta_acc[k])));
        }
        for k in 0..3 {
            kv.push((format!("delta{}_err_pct", k + 1), format!("{:.4}", self.delta_err[k])));
        }
        kv.push(("pixels".to_string(), self.pixels.to_string()));
        kv
    }
}

impl Report for SegMetrics {
    fn key_values(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("pix_acc".to_string(), format!("{:.6}", self.pix_acc)),
            ("miou".to_string(), format!("{:.6}", self.miou)),
        ];
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            let v = iou.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
            kv.push((format!("iou_{c}"), v));
        }
        kv.push(("pixels".to_string(), self.pixels.to_string()));
        kv
    }
}
