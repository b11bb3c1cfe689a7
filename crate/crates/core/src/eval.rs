//! Masked vertex errors and lip dynamic time warping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::VertexMask;
use crate::model::{Model, SequenceSample};
use crate::tensor::Tensor;

/// Metrics in the units of the input coordinates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub e_max_lip: f64,
    pub e_mean_lip: f64,
    pub e_mean_face: f64,
    pub e_mean_head: f64,
    pub dtw_lip: f64,
    pub frames: usize,
}

/// The three region masks used by the report.
#[derive(Debug, Clone, Copy)]
pub struct Masks<'a> {
    pub lip: &'a VertexMask,
    pub face: &'a VertexMask,
    pub head: &'a VertexMask,
}

fn check_mask(mask: &VertexMask, n: usize) -> Result<()> {
    if mask.is_empty() || mask.indices().iter().any(|&i| i >= n) {
        return Err(Error::invalid(format!("mask does not fit a {n}-vertex mesh")));
    }
    Ok(())
}

/// `[T, 3N]` → `(T, N)` after validation.
fn frames_of(t: &Tensor) -> Result<(usize, usize)> {
    let (frames, w) = t.dims2()?;
    if w % 3 != 0 || frames == 0 {
        return Err(Error::shape("eval", format!("expected [T, 3N] with T > 0, got {:?}", t.shape())));
    }
    Ok((frames, w / 3))
}

fn vertex_dist(a: &[f64], b: &[f64], v: usize) -> f64 {
    let (x, y) = (&a[v * 3..v * 3 + 3], &b[v * 3..v * 3 + 3]);
    ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt()
}

/// Frame-averaged masked errors. `dtw_lip` is left at zero.
pub fn masked_errors(pred: &Tensor, target: &Tensor, masks: Masks<'_>) -> Result<MetricReport> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("masked_errors", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let (t, n) = frames_of(pred)?;
    for m in [masks.lip, masks.face, masks.head] {
        check_mask(m, n)?;
    }
    let w = 3 * n;
    let mut r = MetricReport { frames: t, ..Default::default() };
    for (a, b) in pred.data().chunks_exact(w).zip(target.data().chunks_exact(w)) {
        let mean = |m: &VertexMask| m.indices().iter().map(|&v| vertex_dist(a, b, v)).sum::<f64>() / m.len() as f64;
        let max = masks.lip.indices().iter().map(|&v| vertex_dist(a, b, v)).fold(0.0, f64::max);
        r.e_max_lip += max / t as f64;
        r.e_mean_lip += mean(masks.lip) / t as f64;
        r.e_mean_face += mean(masks.face) / t as f64;
        r.e_mean_head += mean(masks.head) / t as f64;
    }
    Ok(r)
}

/// Accumulated cost of the optimal monotone alignment, with frame cost
/// `Σ_{v ∈ lip} ‖a_v − b_v‖`.
pub fn dtw_lip(pred: &Tensor, target: &Tensor, lip: &VertexMask) -> Result<f64> {
    let (ta, na) = frames_of(pred)?;
    let (tb, nb) = frames_of(target)?;
    if na != nb {
        return Err(Error::Topology { expected: nb, got: na });
    }
    check_mask(lip, na)?;
    let w = 3 * na;
    let cost = |i: usize, j: usize| {
        let (a, b) = (&pred.data()[i * w..(i + 1) * w], &target.data()[j * w..(j + 1) * w]);
        lip.indices().iter().map(|&v| vertex_dist(a, b, v)).sum::<f64>()
    };
    let mut prev = vec![f64::INFINITY; tb];
    let mut cur = vec![0.0; tb];
    for i in 0..ta {
        for j in 0..tb {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = prev[j];
                let left = if j > 0 { cur[j - 1] } else { f64::INFINITY };
                let diag = if j > 0 { prev[j - 1] } else { f64::INFINITY };
                up.min(left).min(diag)
            };
            cur[j] = best + cost(i, j);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[tb - 1])
}

/// All metrics for one predicted sequence.
pub fn sequence_report(pred: &Tensor, target: &Tensor, masks: Masks<'_>) -> Result<MetricReport> {
    let mut r = masked_errors(pred, target, masks)?;
    r.dtw_lip = dtw_lip(pred, target, masks.lip)?;
    Ok(r)
}

/// Mean of per-sample reports, summed in input order. `frames` is the total.
pub fn aggregate(reports: &[MetricReport]) -> MetricReport {
    let k = reports.len().max(1) as f64;
    let mut out = MetricReport::default();
    for r in reports {
        out.e_max_lip += r.e_max_lip / k;
        out.e_mean_lip += r.e_mean_lip / k;
        out.e_mean_face += r.e_mean_face / k;
        out.e_mean_head += r.e_mean_head / k;
        out.dtw_lip += r.dtw_lip / k;
        out.frames += r.frames;
    }
    out
}

/// Runs `model` on every sample and averages the reports.
pub fn evaluate(model: &Model, samples: &[SequenceSample], masks: Masks<'_>) -> Result<MetricReport> {
    evaluate_with(samples, masks, |s| model.predict(&s.template, &s.features, s.frames()))
}

/// Like [`evaluate`] with an arbitrary predictor.
pub fn evaluate_with<F>(samples: &[SequenceSample], masks: Masks<'_>, predict: F) -> Result<MetricReport>
where
    F: Fn(&SequenceSample) -> Result<Tensor> + Sync,
{
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let reports: Vec<MetricReport> = samples
        .par_iter()
        .map(|s| sequence_report(&predict(s)?, &s.targets, masks))
        .collect::<Result<_>>()?;
    Ok(aggregate(&reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::MaskLabel;

    fn seq(frames: &[Vec<[f64; 3]>]) -> Tensor {
        let n = frames[0].len();
        Tensor::new(vec![frames.len(), 3 * n], frames.iter().flatten().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn dtw_single_frame_is_pair_cost() {
        let lip = VertexMask::new(MaskLabel::Lip, vec![0, 1], 2).unwrap();
        let a = seq(&[vec![[0.0; 3], [0.0; 3]]]);
        let b = seq(&[vec![[3.0, 4.0, 0.0], [0.0, 0.0, 1.0]]]);
        assert_eq!(dtw_lip(&a, &b, &lip).unwrap(), 6.0);
        assert_eq!(dtw_lip(&a, &a, &lip).unwrap(), 0.0);
    }

    #[test]
    fn dtw_absorbs_a_time_shift() {
        let lip = VertexMask::new(MaskLabel::Lip, vec![0], 1).unwrap();
        let f = |x: f64| vec![[x, 0.0, 0.0]];
        let a = seq(&[f(0.0), f(0.0), f(1.0), f(2.0)]);
        let b = seq(&[f(0.0), f(1.0), f(2.0), f(2.0)]);
        assert_eq!(dtw_lip(&a, &b, &lip).unwrap(), 0.0);
    }
}
