//! Keyshot F1 and rank-correlation metrics.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{F1Aggregation, GroundTruth};
use crate::summary::{build_summary, keyframes_to_keyshots};

/// Human inter-annotator agreement on TVSum, for report context only.
pub const HUMAN_TAU: f64 = 0.177;
pub const HUMAN_RHO: f64 = 0.204;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauVariant {
    A,
    #[default]
    B,
}

pub fn prf1(pred: &[u8], reference: &[u8]) -> Result<Prf1> {
    if pred.len() != reference.len() {
        return Err(Error::Shape(format!(
            "prediction mask has {} frames, reference {}",
            pred.len(),
            reference.len()
        )));
    }
    let overlap = pred
        .iter()
        .zip(reference)
        .filter(|(p, r)| **p == 1 && **r == 1)
        .count() as f64;
    let np = pred.iter().filter(|&&p| p == 1).count() as f64;
    let nr = reference.iter().filter(|&&r| r == 1).count() as f64;
    let precision = if np > 0.0 { overlap / np } else { 0.0 };
    let recall = if nr > 0.0 { overlap / nr } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Prf1 {
        precision,
        recall,
        f1,
    })
}

/// F1 against several references, aggregated by mean or max.
pub fn multi_ref_f1(pred: &[u8], references: &[Vec<u8>], mode: F1Aggregation) -> Result<f64> {
    multi_ref_prf1(pred, references, mode).map(|(agg, _)| agg.f1)
}

/// Aggregated P/R/F1 plus the per-reference values. In max mode the
/// aggregate is the triple of the best-F1 reference.
pub fn multi_ref_prf1(
    pred: &[u8],
    references: &[Vec<u8>],
    mode: F1Aggregation,
) -> Result<(Prf1, Vec<Prf1>)> {
    if references.is_empty() {
        return Err(Error::Usage("no reference summaries".into()));
    }
    let per: Vec<Prf1> = references
        .iter()
        .map(|r| prf1(pred, r))
        .collect::<Result<_>>()?;
    let agg = match mode {
        F1Aggregation::Avg => {
            let n = per.len() as f64;
            Prf1 {
                precision: per.iter().map(|p| p.precision).sum::<f64>() / n,
                recall: per.iter().map(|p| p.recall).sum::<f64>() / n,
                f1: per.iter().map(|p| p.f1).sum::<f64>() / n,
            }
        }
        F1Aggregation::Max => *per
            .iter()
            .max_by(|a, b| a.f1.total_cmp(&b.f1))
            .expect("nonempty"),
    };
    Ok((agg, per))
}

fn check_pair(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "score lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Usage(
            "rank correlation needs at least 2 values".into(),
        ));
    }
    Ok(())
}

/// Number of tied pairs among runs of equal values in an already sorted sequence.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for i in 1..=sorted.len() {
        if i < sorted.len() && sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total
}

/// Merge sort that counts inversions (strictly decreasing pairs).
fn sort_count_swaps(v: &mut [f32], buf: &mut [f32]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_count_swaps(&mut v[..mid], &mut buf[..mid]);
    swaps += sort_count_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall rank correlation in O(N log N) (Knight's algorithm).
///
/// τ-b divides by `sqrt((n0 − n1)(n0 − n2))` and is 0 when either factor
/// vanishes; τ-a divides by `n0 = N(N−1)/2`.
pub fn kendall_tau_variant(pred: &[f32], reference: &[f32], variant: TauVariant) -> Result<f64> {
    check_pair(pred, reference)?;
    let n = pred.len();
    let mut pairs: Vec<(f32, f32)> = pred
        .iter()
        .copied()
        .zip(reference.iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n0 = (n * (n - 1) / 2) as u64;
    let xs: Vec<f32> = pairs.iter().map(|p| p.0).collect();
    let n1 = tied_pairs(&xs);
    let n3 = tied_pairs(&pairs);
    let mut ys: Vec<f32> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0f32; n];
    let swaps = sort_count_swaps(&mut ys, &mut buf);
    let n2 = tied_pairs(&ys);
    // concordant − discordant
    let s = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * swaps as i64;
    Ok(match variant {
        TauVariant::A => s as f64 / n0 as f64,
        TauVariant::B => {
            let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
            if denom == 0.0 {
                0.0
            } else {
                s as f64 / denom
            }
        }
    })
}

pub fn kendall_tau(pred: &[f32], reference: &[f32]) -> Result<f64> {
    kendall_tau_variant(pred, reference, TauVariant::B)
}

/// Ranks starting at 1; ties share their mean rank.
pub fn average_ranks(v: &[f32]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman_rho(pred: &[f32], reference: &[f32]) -> Result<f64> {
    check_pair(pred, reference)?;
    Ok(pearson(&average_ranks(pred), &average_ranks(reference)))
}

/// Mean τ and mean ρ over annotators.
pub fn rank_metrics_per_annotator(
    pred: &[f32],
    annotators: &[Vec<f32>],
    variant: TauVariant,
) -> Result<(f64, f64)> {
    if annotators.is_empty() {
        return Err(Error::Usage("no annotator scores".into()));
    }
    let mut tau = 0.0;
    let mut rho = 0.0;
    for a in annotators {
        tau += kendall_tau_variant(pred, a, variant)?;
        rho += spearman_rho(pred, a)?;
    }
    let n = annotators.len() as f64;
    Ok((tau / n, rho / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video_id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_reference: Vec<Prf1>,
    pub tau: Option<f64>,
    pub rho: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aggregation: F1Aggregation,
    pub budget_fraction: f64,
    pub videos: Vec<VideoMetrics>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub mean_tau: Option<f64>,
    pub mean_rho: Option<f64>,
    pub human_tau: f64,
    pub human_rho: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub budget_fraction: f64,
    pub aggregation: F1Aggregation,
    pub tau_variant: TauVariant,
}

/// Reference masks: the annotators' summaries, else keyshots from the labels.
pub fn reference_masks(
    gt: &GroundTruth,
    boundaries: &[usize],
    budget_fraction: f64,
) -> Result<Vec<Vec<u8>>> {
    if gt.reference_summaries.is_empty() {
        Ok(vec![keyframes_to_keyshots(
            &gt.keyframe_labels,
            boundaries,
            budget_fraction,
        )?])
    } else {
        Ok(gt.reference_summaries.clone())
    }
}

/// Metrics of one video from predicted frame scores.
pub fn evaluate_video(
    scores: &[f32],
    gt: &GroundTruth,
    boundaries: &[usize],
    opts: &EvalOptions,
) -> Result<VideoMetrics> {
    gt.validate(scores.len())?;
    let summary = build_summary(scores, boundaries, opts.budget_fraction)?;
    evaluate_mask(&summary.mask, scores, gt, boundaries, opts)
}

/// Metrics of one video from an already built summary mask.
pub fn evaluate_mask(
    mask: &[u8],
    scores: &[f32],
    gt: &GroundTruth,
    boundaries: &[usize],
    opts: &EvalOptions,
) -> Result<VideoMetrics> {
    let refs = reference_masks(gt, boundaries, opts.budget_fraction)?;
    let (agg, per_reference) = multi_ref_prf1(mask, &refs, opts.aggregation)?;
    let (tau, rho) = if gt.annotator_scores.is_empty() || scores.len() < 2 {
        (None, None)
    } else {
        let (t, r) = rank_metrics_per_annotator(scores, &gt.annotator_scores, opts.tau_variant)?;
        (Some(t), Some(r))
    };
    Ok(VideoMetrics {
        video_id: gt.video_id.clone(),
        precision: agg.precision,
        recall: agg.recall,
        f1: agg.f1,
        per_reference,
        tau,
        rho,
    })
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    pub fn from_videos(videos: Vec<VideoMetrics>, opts: &EvalOptions) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::Usage("no videos to report".into()));
        }
        Ok(MetricReport {
            aggregation: opts.aggregation,
            budget_fraction: opts.budget_fraction,
            mean_precision: mean_of(videos.iter().map(|v| v.precision)).unwrap(),
            mean_recall: mean_of(videos.iter().map(|v| v.recall)).unwrap(),
            mean_f1: mean_of(videos.iter().map(|v| v.f1)).unwrap(),
            mean_tau: mean_of(videos.iter().filter_map(|v| v.tau)),
            mean_rho: mean_of(videos.iter().filter_map(|v| v.rho)),
            human_tau: HUMAN_TAU,
            human_rho: HUMAN_RHO,
            videos,
        })
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("video_id,precision,recall,f1,tau,rho\n");
        for v in &self.videos {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{},{}",
                v.video_id,
                v.precision,
                v.recall,
                v.f1,
                opt(v.tau),
                opt(v.rho)
            );
        }
        let _ = writeln!(
            out,
            "mean,{:.6},{:.6},{:.6},{},{}",
            self.mean_precision,
            self.mean_recall,
            self.mean_f1,
            opt(self.mean_tau),
            opt(self.mean_rho)
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prf1_cases() {
        let m = vec![1, 1, 0, 1];
        assert_eq!(
            prf1(&m, &m).unwrap(),
            Prf1 {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0
            }
        );
        assert_eq!(prf1(&[1, 0], &[0, 1]).unwrap(), Prf1::default());
        let mut pred = vec![0u8; 30];
        let mut reference = vec![0u8; 30];
        pred[0..20].fill(1);
        reference[0..10].fill(1);
        let r = prf1(&pred, &reference).unwrap();
        assert_eq!((r.precision, r.recall), (0.5, 1.0));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(prf1(&[0, 0], &[0, 1]).unwrap(), Prf1::default());
        assert!(prf1(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn multi_reference() {
        // per-reference F1 of 0.4 and 0.8
        let pred = vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        // overlap 2 of 5 -> F1 0.4; overlap 4 of 5 -> F1 0.8
        let ref_a = vec![1, 1, 0, 0, 0, 1, 1, 1, 0, 0];
        let ref_b = vec![1, 1, 1, 1, 0, 1, 0, 0, 0, 0];
        let refs = vec![ref_a, ref_b];
        let avg = multi_ref_f1(&pred, &refs, F1Aggregation::Avg).unwrap();
        let max = multi_ref_f1(&pred, &refs, F1Aggregation::Max).unwrap();
        assert!((avg - 0.6).abs() < 1e-12 && (max - 0.8).abs() < 1e-12);
        let single = prf1(&pred, &refs[0]).unwrap().f1;
        assert_eq!(
            multi_ref_f1(&pred, &refs[..1], F1Aggregation::Avg).unwrap(),
            single
        );
        assert_eq!(
            multi_ref_f1(&pred, &refs[..1], F1Aggregation::Max).unwrap(),
            single
        );
        assert!(matches!(
            multi_ref_f1(&pred, &[], F1Aggregation::Avg),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn tau_cases() {
        let a = [0.1f32, 0.5, 0.3, 0.9];
        assert_eq!(kendall_tau(&a, &a).unwrap(), 1.0);
        let rev = [0.9f32, 0.3, 0.5, 0.1];
        assert_eq!(kendall_tau(&a, &rev).unwrap(), -1.0);
        let t = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((t - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(
            kendall_tau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(),
            0.0
        );
        assert!(matches!(kendall_tau(&[1.0], &[1.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn tau_a_ignores_tie_correction() {
        let x = [1.0f32, 1.0, 2.0, 3.0];
        let y = [1.0f32, 2.0, 3.0, 4.0];
        // 5 concordant, 0 discordant, 1 tie in x
        let a = kendall_tau_variant(&x, &y, TauVariant::A).unwrap();
        let b = kendall_tau_variant(&x, &y, TauVariant::B).unwrap();
        assert!((a - 5.0 / 6.0).abs() < 1e-12);
        assert!((b - 5.0 / (5.0f64 * 6.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rho_cases() {
        let a = [0.2f32, 0.7, 0.1];
        assert!((spearman_rho(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman_rho(&a, &[0.8, 0.3, 0.9]).unwrap() + 1.0).abs() < 1e-12);
        let r = spearman_rho(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }

    #[test]
    fn annotator_means() {
        let pred = [0.1f32, 0.4, 0.2, 0.8, 0.5];
        let a1 = vec![0.2f32, 0.3, 0.1, 0.9, 0.4];
        let (t, r) =
            rank_metrics_per_annotator(&pred, std::slice::from_ref(&a1), TauVariant::B).unwrap();
        assert_eq!(t, kendall_tau(&pred, &a1).unwrap());
        assert_eq!(r, spearman_rho(&pred, &a1).unwrap());
        let (t3, r3) =
            rank_metrics_per_annotator(&pred, &[a1.clone(), a1.clone(), a1.clone()], TauVariant::B)
                .unwrap();
        assert!((t3 - t).abs() < 1e-15 && (r3 - r).abs() < 1e-15);
        let a2 = vec![0.9f32, 0.3, 0.1, 0.2, 0.4];
        let a3 = vec![0.5f32, 0.5, 0.1, 0.2, 0.9];
        let anns = [a1, a2, a3];
        let (t, r) = rank_metrics_per_annotator(&pred, &anns, TauVariant::B).unwrap();
        let ht: f64 = anns
            .iter()
            .map(|a| kendall_tau(&pred, a).unwrap())
            .sum::<f64>()
            / 3.0;
        let hr: f64 = anns
            .iter()
            .map(|a| spearman_rho(&pred, a).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((t - ht).abs() < 1e-15 && (r - hr).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn metric_properties(
            pred in proptest::collection::vec(0u8..2, 12),
            reference in proptest::collection::vec(0u8..2, 12),
            xs in proptest::collection::vec(-5i32..5, 2..20),
            seed in 0u32..1000,
        ) {
            let a = prf1(&pred, &reference).unwrap();
            let b = prf1(&reference, &pred).unwrap();
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
            prop_assert!((a.f1 - b.f1).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&a.f1));

            let x: Vec<f32> = xs.iter().map(|&v| v as f32).collect();
            let y: Vec<f32> = xs.iter().enumerate().map(|(i, &v)| ((v as i64 * 7 + i as i64 * 13 + seed as i64).rem_euclid(5)) as f32).collect();
            let t = kendall_tau(&x, &y).unwrap();
            let r = spearman_rho(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&t));
            prop_assert!((-1.0..=1.0).contains(&r));
            // strictly increasing transform of one side
            let xt: Vec<f32> = x.iter().map(|v| v * 3.0 + 100.0).collect();
            prop_assert!((kendall_tau(&xt, &y).unwrap() - t).abs() < 1e-12);
            prop_assert!((spearman_rho(&xt, &y).unwrap() - r).abs() < 1e-12);

            let refs = vec![reference.clone(), pred.iter().map(|p| 1 - p).collect()];
            let avg = multi_ref_f1(&pred, &refs, F1Aggregation::Avg).unwrap();
            let max = multi_ref_f1(&pred, &refs, F1Aggregation::Max).unwrap();
            prop_assert!(max >= avg);
        }
    }
}
