//! Pixel-level OoD metrics: average precision and false-positive rate at
//! 95% true-positive rate, with OoD pixels as the positive class.
//!
//! A pixel counts as positive at threshold `tau` iff its score is `>= tau`.
//! Equal scores form one group and enter the curves together.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::scorer::ScoreMap;
use crate::tensor_store::{OodMask, LABEL_IGNORE, LABEL_OOD};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub ap: f64,
    pub fpr95: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_ignored: usize,
}

fn check(scores: &[f32], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(format!(
            "metrics need both classes: {pos} positives, {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// `(positives, negatives)` per tie group, by descending score. The sort is
/// stable on index so equal scores are always visited in input order.
fn tie_groups(scores: &[f32], labels: &[bool]) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut prev: Option<f32> = None;
    for i in order {
        let s = scores[i];
        // -0.0 and 0.0 compare equal and share a threshold
        if prev != Some(s) {
            groups.push((0, 0));
            prev = Some(s);
        }
        let g = groups.last_mut().expect("group pushed above");
        if labels[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Shared curve walk: `visit(tp, fp)` at every distinct threshold, from the
/// highest score down.
fn curve_points(tp_fp: impl Iterator<Item = (u64, u64)>, p: u64, n: u64) -> (f64, f64) {
    let (mut ap, mut prev_recall) = (0.0f64, 0.0f64);
    let mut fpr95: Option<f64> = None;
    for (tp, fp) in tp_fp {
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        if fpr95.is_none() && 100 * tp >= 95 * p {
            fpr95 = Some(fp as f64 / n as f64);
        }
    }
    (ap, fpr95.expect("the lowest threshold reaches full recall"))
}

/// `(ap, fpr95)` from one sort.
pub fn ap_and_fpr95(scores: &[f32], labels: &[bool]) -> Result<(f64, f64)> {
    let (p, n) = check(scores, labels)?;
    let cumulative = tie_groups(scores, labels).into_iter().scan((0u64, 0u64), |acc, (gp, gn)| {
        acc.0 += gp;
        acc.1 += gn;
        Some(*acc)
    });
    Ok(curve_points(cumulative, p as u64, n as u64))
}

/// Area under the precision-recall curve by recall increments.
pub fn average_precision(scores: &[f32], labels: &[bool]) -> Result<f64> {
    Ok(ap_and_fpr95(scores, labels)?.0)
}

/// Lowest FPR over thresholds whose TPR is at least 95%.
pub fn fpr_at_95_tpr(scores: &[f32], labels: &[bool]) -> Result<f64> {
    Ok(ap_and_fpr95(scores, labels)?.1)
}

/// Quadratic reference: counts every threshold directly. Only for checking.
pub fn brute_force_metrics(scores: &[f32], labels: &[bool]) -> Result<(f64, f64)> {
    let (p, n) = check(scores, labels)?;
    let mut thresholds: Vec<f32> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup_by(|a, b| a == b);
    let counts = thresholds.into_iter().map(|tau| {
        let mut tp = 0u64;
        let mut fp = 0u64;
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= tau {
                if l {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        (tp, fp)
    });
    Ok(curve_points(counts, p as u64, n as u64))
}

/// Scores and binary labels of the non-ignored pixels of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImagePixels {
    pub scores: Vec<f32>,
    pub labels: Vec<bool>,
    pub ignored: usize,
}

impl ImagePixels {
    pub fn new(map: &ScoreMap, mask: &OodMask) -> Result<Self> {
        if map.height() != mask.height() || map.width() != mask.width() {
            return Err(Error::shape(format!(
                "score map {}x{} vs mask {}x{}",
                map.height(),
                map.width(),
                mask.height(),
                mask.width()
            )));
        }
        let mut out = ImagePixels::default();
        for (&s, &l) in map.values().iter().zip(mask.labels()) {
            if l == LABEL_IGNORE {
                out.ignored += 1;
            } else {
                out.scores.push(s);
                out.labels.push(l == LABEL_OOD);
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self) -> Result<EvalResult> {
        let (ap, fpr95) = ap_and_fpr95(&self.scores, &self.labels)?;
        let n_pos = self.labels.iter().filter(|&&l| l).count();
        Ok(EvalResult {
            ap,
            fpr95,
            n_pos,
            n_neg: self.labels.len() - n_pos,
            n_ignored: self.ignored,
        })
    }
}

/// Concatenation of many images into one pixel set.
#[derive(Debug, Clone, Default)]
pub struct PooledEval {
    pixels: ImagePixels,
}

impl PooledEval {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, image: &ImagePixels) {
        self.pixels.scores.extend_from_slice(&image.scores);
        self.pixels.labels.extend_from_slice(&image.labels);
        self.pixels.ignored += image.ignored;
    }

    pub fn push_map(&mut self, map: &ScoreMap, mask: &OodMask) -> Result<()> {
        self.push(&ImagePixels::new(map, mask)?);
        Ok(())
    }

    pub fn finish(&self) -> Result<EvalResult> {
        self.pixels.evaluate()
    }
}

/// Metrics of one pixel-resolution score map against its mask.
pub fn evaluate(map: &ScoreMap, mask: &OodMask) -> Result<EvalResult> {
    ImagePixels::new(map, mask)?.evaluate()
}

/// Pooled metrics over the listed images.
pub fn evaluate_pooled<'a>(images: impl IntoIterator<Item = &'a ImagePixels>) -> Result<EvalResult> {
    let mut pool = PooledEval::new();
    for im in images {
        pool.push(im);
    }
    pool.finish()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

fn spread(v: &[f64]) -> Spread {
    if v.iter().all(|&x| x == v[0]) {
        return Spread { mean: v[0], std: 0.0 };
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Spread { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub ap: Spread,
    pub fpr95: Spread,
    pub folds: Vec<EvalResult>,
}

/// Pooled metrics on `folds` random subsets of `ceil(fraction * N)` images
/// drawn without replacement; reports the sample mean and standard deviation.
pub fn bootstrap(images: &[ImagePixels], folds: usize, fraction: f64, seed: u64) -> Result<BootstrapResult> {
    if folds < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 folds"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("bootstrap fraction {fraction} outside (0, 1]")));
    }
    let n = images.len();
    let k = (fraction * n as f64).ceil() as usize;
    if n < 2 || k < 1 {
        return Err(Error::Data(format!("bootstrap needs at least 2 images, got {n}")));
    }
    let mut rng = seeded(seed);
    let mut results = Vec::with_capacity(folds);
    for _ in 0..folds {
        let mut picked = index::sample(&mut rng, n, k).into_vec();
        picked.sort_unstable();
        results.push(evaluate_pooled(picked.iter().map(|&i| &images[i]))?);
    }
    let aps: Vec<f64> = results.iter().map(|r| r.ap).collect();
    let fprs: Vec<f64> = results.iter().map(|r| r.fpr95).collect();
    Ok(BootstrapResult {
        ap: spread(&aps),
        fpr95: spread(&fprs),
        folds: results,
    })
}
