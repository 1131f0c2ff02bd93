//! DAVIS-protocol evaluation: region similarity J, contour accuracy F, and
//! per-sequence statistics (mean, recall, decay).

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// J and F for one object on one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameScore {
    pub frame: usize,
    pub object: u8,
    pub j: f64,
    pub f: f64,
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn region_similarity(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_extents(pred, gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Boundary F-measure under a Chebyshev pixel tolerance.
///
/// Boundaries are foreground pixels with a background 4-neighbor (pixels
/// outside the image count as background). Precision is the fraction of
/// predicted boundary pixels within `tol` of a ground-truth boundary pixel,
/// matched by dilation; recall is symmetric. F = 2PR/(P+R), 0 when P+R = 0,
/// 1 when both boundaries are empty.
pub fn contour_accuracy(pred: &BinaryMask, gt: &BinaryMask, tol: usize) -> Result<f64> {
    check_extents(pred, gt)?;
    let (w, h) = (pred.width(), pred.height());
    let pb = boundary(pred);
    let gb = boundary(gt);
    let pred_count = pb.iter().filter(|&&v| v).count();
    let gt_count = gb.iter().filter(|&&v| v).count();
    if pred_count == 0 && gt_count == 0 {
        return Ok(1.0);
    }
    if pred_count == 0 || gt_count == 0 {
        return Ok(0.0);
    }
    let gb_wide = dilate_chebyshev(&gb, w, h, tol);
    let pb_wide = dilate_chebyshev(&pb, w, h, tol);
    let matched_pred = pb
        .iter()
        .zip(&gb_wide)
        .filter(|&(&p, &g)| p && g)
        .count();
    let matched_gt = gb
        .iter()
        .zip(&pb_wide)
        .filter(|&(&g, &p)| g && p)
        .count();
    let precision = matched_pred as f64 / pred_count as f64;
    let recall = matched_gt as f64 / gt_count as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// The benchmark-conventional tolerance: ⌈0.008 × image diagonal⌉.
pub fn default_boundary_tolerance(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    (0.008 * diag).ceil() as usize
}

fn check_extents(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::shape_mismatch(
            "metric mask extents",
            [pred.width(), pred.height()],
            [gt.width(), gt.height()],
        ));
    }
    Ok(())
}

fn boundary(mask: &BinaryMask) -> Vec<bool> {
    let (w, h) = (mask.width(), mask.height());
    let d = mask.data();
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !d[y * w + x] {
                continue;
            }
            let bg = |xx: isize, yy: isize| -> bool {
                if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                    return true;
                }
                !d[yy as usize * w + xx as usize]
            };
            let (xi, yi) = (x as isize, y as isize);
            if bg(xi - 1, yi) || bg(xi + 1, yi) || bg(xi, yi - 1) || bg(xi, yi + 1) {
                out[y * w + x] = true;
            }
        }
    }
    out
}

/// Binary dilation with a (2·tol+1)² square element, as two 1D passes.
fn dilate_chebyshev(mask: &[bool], w: usize, h: usize, tol: usize) -> Vec<bool> {
    if tol == 0 {
        return mask.to_vec();
    }
    let mut horiz = vec![false; w * h];
    for y in 0..h {
        let row = &mask[y * w..][..w];
        let out = &mut horiz[y * w..][..w];
        for x in 0..w {
            let lo = x.saturating_sub(tol);
            let hi = (x + tol).min(w - 1);
            out[x] = row[lo..=hi].iter().any(|&v| v);
        }
    }
    let mut full = vec![false; w * h];
    for x in 0..w {
        for y in 0..h {
            let lo = y.saturating_sub(tol);
            let hi = (y + tol).min(h - 1);
            full[y * w + x] = (lo..=hi).any(|yy| horiz[yy * w + x]);
        }
    }
    full
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SequenceStats {
    pub mean: f64,
    /// Fraction of frames scoring above 0.5.
    pub recall: f64,
    /// Mean of the first temporal quartile minus mean of the last.
    pub decay: f64,
}

/// Statistics over temporally ordered per-frame scores. Quartiles have
/// ⌈T/4⌉ frames. The caller excludes the first and last annotated frames
/// per benchmark convention.
pub fn sequence_stats(scores: &[f64]) -> Result<SequenceStats> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("sequence_stats needs at least one score"));
    }
    let t = scores.len();
    let mean = scores.iter().sum::<f64>() / t as f64;
    let recall = scores.iter().filter(|&&s| s > 0.5).count() as f64 / t as f64;
    let q = t.div_ceil(4);
    let first = scores[..q].iter().sum::<f64>() / q as f64;
    let last = scores[t - q..].iter().sum::<f64>() / q as f64;
    Ok(SequenceStats {
        mean,
        recall,
        decay: first - last,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ObjectReport {
    pub j: SequenceStats,
    pub f: SequenceStats,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GlobalStats {
    pub j_mean: f64,
    pub f_mean: f64,
    /// (J mean + F mean) / 2 across objects.
    pub jf_mean: f64,
}

/// Wall-time summary attached to reports produced by a pipeline run.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct TimingSummary {
    pub frames: u64,
    pub shared_ms_mean: f64,
    pub object_ms_mean: f64,
    pub fps: f64,
}

/// Per-object and aggregate J/F statistics; serializes to the report JSON.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub objects: BTreeMap<String, ObjectReport>,
    pub global: GlobalStats,
    pub timing: Option<TimingSummary>,
}

/// Group frame scores by object (ordered by frame) and aggregate.
pub fn aggregate(scores: &[FrameScore], timing: Option<TimingSummary>) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("aggregate needs at least one frame score"));
    }
    let mut by_object: BTreeMap<u8, Vec<FrameScore>> = BTreeMap::new();
    for s in scores {
        by_object.entry(s.object).or_default().push(*s);
    }
    let mut objects = BTreeMap::new();
    let mut j_sum = 0.0;
    let mut f_sum = 0.0;
    for (id, mut frames) in by_object {
        frames.sort_by_key(|s| s.frame);
        let j: Vec<f64> = frames.iter().map(|s| s.j).collect();
        let f: Vec<f64> = frames.iter().map(|s| s.f).collect();
        let report = ObjectReport {
            j: sequence_stats(&j)?,
            f: sequence_stats(&f)?,
        };
        j_sum += report.j.mean;
        f_sum += report.f.mean;
        objects.insert(id.to_string(), report);
    }
    let count = objects.len() as f64;
    let j_mean = j_sum / count;
    let f_mean = f_sum / count;
    Ok(EvalReport {
        objects,
        global: GlobalStats {
            j_mean,
            f_mean,
            jf_mean: (j_mean + f_mean) / 2.0,
        },
        timing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rect(w: usize, h: usize, x0: usize, y0: usize, rw: usize, rh: usize) -> BinaryMask {
        let mut data = vec![false; w * h];
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                data[y * w + x] = true;
            }
        }
        BinaryMask::new(w, h, data).unwrap()
    }

    #[test]
    fn identical_masks_score_one() {
        let m = rect(20, 20, 3, 4, 8, 6);
        assert_eq!(region_similarity(&m, &m).unwrap(), 1.0);
        assert_eq!(contour_accuracy(&m, &m, 0).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let a = rect(30, 30, 0, 0, 5, 5);
        let b = rect(30, 30, 20, 20, 5, 5);
        assert_eq!(region_similarity(&a, &b).unwrap(), 0.0);
        assert_eq!(contour_accuracy(&a, &b, 2).unwrap(), 0.0);
    }

    #[test]
    fn half_overlap_is_one_third() {
        // two 10×10 squares overlapping in a 5×10 strip: 50 / 150
        let a = rect(30, 30, 0, 0, 10, 10);
        let b = rect(30, 30, 5, 0, 10, 10);
        let j = region_similarity(&a, &b).unwrap();
        assert!((j - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn empty_conventions() {
        let empty = BinaryMask::new(10, 10, vec![false; 100]).unwrap();
        let full = rect(10, 10, 2, 2, 4, 4);
        assert_eq!(region_similarity(&empty, &empty).unwrap(), 1.0);
        assert_eq!(contour_accuracy(&empty, &empty, 2).unwrap(), 1.0);
        assert_eq!(region_similarity(&empty, &full).unwrap(), 0.0);
        assert_eq!(contour_accuracy(&empty, &full, 2).unwrap(), 0.0);
    }

    #[test]
    fn one_pixel_shift_within_tolerance() {
        let a = rect(40, 40, 10, 10, 12, 12);
        let b = rect(40, 40, 11, 10, 12, 12);
        assert_eq!(contour_accuracy(&a, &b, 2).unwrap(), 1.0);
        // with zero tolerance the shifted contours no longer fully match
        assert!(contour_accuracy(&a, &b, 0).unwrap() < 1.0);
    }

    #[test]
    fn j_and_f_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..10 {
            let data_a: Vec<bool> = (0..400).map(|_| rng.random_bool(0.3)).collect();
            let data_b: Vec<bool> = (0..400).map(|_| rng.random_bool(0.3)).collect();
            let a = BinaryMask::new(20, 20, data_a).unwrap();
            let b = BinaryMask::new(20, 20, data_b).unwrap();
            assert_eq!(
                region_similarity(&a, &b).unwrap(),
                region_similarity(&b, &a).unwrap()
            );
            let fab = contour_accuracy(&a, &b, 2).unwrap();
            let fba = contour_accuracy(&b, &a, 2).unwrap();
            assert!((fab - fba).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_extents_rejected() {
        let a = rect(10, 10, 0, 0, 2, 2);
        let b = rect(11, 10, 0, 0, 2, 2);
        assert!(region_similarity(&a, &b).is_err());
        assert!(contour_accuracy(&a, &b, 1).is_err());
    }

    #[test]
    fn default_tolerance_matches_davis_resolution() {
        assert_eq!(default_boundary_tolerance(854, 480), 8);
    }

    #[test]
    fn sequence_stats_examples() {
        let s = sequence_stats(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.recall, s.decay), (1.0, 1.0, 0.0));

        let s = sequence_stats(&[0.9, 0.8, 0.7, 0.6]).unwrap();
        assert!((s.mean - 0.75).abs() < 1e-12);
        assert_eq!(s.recall, 1.0);
        assert!((s.decay - 0.3).abs() < 1e-9);

        let s = sequence_stats(&[0.4, 0.4]).unwrap();
        assert_eq!(s.recall, 0.0);

        assert!(sequence_stats(&[]).is_err());
    }

    #[test]
    fn decay_signs() {
        let constant = sequence_stats(&[0.6; 9]).unwrap();
        assert_eq!(constant.decay, 0.0);
        let falling = sequence_stats(&[0.9, 0.8, 0.6, 0.5, 0.4, 0.3]).unwrap();
        assert!(falling.decay > 0.0);
    }

    #[test]
    fn aggregate_reports_jf_mean_invariant() {
        let scores = vec![
            FrameScore { frame: 1, object: 1, j: 0.8, f: 0.9 },
            FrameScore { frame: 2, object: 1, j: 0.6, f: 0.7 },
            FrameScore { frame: 1, object: 3, j: 0.5, f: 0.4 },
            FrameScore { frame: 2, object: 3, j: 0.3, f: 0.2 },
        ];
        let report = aggregate(&scores, None).unwrap();
        assert_eq!(report.objects.len(), 2);
        assert!(
            (report.global.jf_mean - (report.global.j_mean + report.global.f_mean) / 2.0).abs()
                < 1e-9
        );
        let json = serde_json::to_value(&report).unwrap();
        assert!(json["objects"]["1"]["j"]["mean"].is_number());
        assert!(json["objects"]["3"]["f"]["decay"].is_number());
        assert!(json["global"]["jf_mean"].is_number());
        assert!(json["timing"].is_null());
    }
}
