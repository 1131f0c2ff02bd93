//! Independent reference implementations used to verify the fast kernels.
//!
//! Everything here is deliberately naive: plain nested loops, f64
//! accumulation, full sorts. These routines share no code with the
//! production paths they check; they exist for the self-test command and
//! the test suites.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;

/// Six-nested-loop cross-correlation with zero padding, f64 accumulation.
pub fn conv2d_naive(
    x: &Tensor,
    kernel: &Tensor,
    bias: &[f32],
    stride: usize,
    pad: (usize, usize),
) -> Tensor {
    let (c_in, h_in, w_in) = x.dims3().expect("rank-3 input");
    let (k_out, kc, kh, kw) = kernel.dims4().expect("rank-4 kernel");
    assert_eq!(c_in, kc);
    let h_out = (h_in + 2 * pad.0 - kh) / stride + 1;
    let w_out = (w_in + 2 * pad.1 - kw) / stride + 1;
    let mut out = vec![0.0f32; k_out * h_out * w_out];
    for k in 0..k_out {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = bias[k] as f64;
                for c in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad.0 as isize;
                            let ix = (ox * stride + kx) as isize - pad.1 as isize;
                            if iy < 0 || iy >= h_in as isize || ix < 0 || ix >= w_in as isize {
                                continue;
                            }
                            let xv = x.data()[(c * h_in + iy as usize) * w_in + ix as usize];
                            let wv = kernel.data()[((k * c_in + c) * kh + ky) * kw + kx];
                            acc += xv as f64 * wv as f64;
                        }
                    }
                }
                out[(k * h_out + oy) * w_out + ox] = acc as f32;
            }
        }
    }
    Tensor::new(&[k_out, h_out, w_out], out).expect("oracle shape")
}

/// Which matching operator a reference computation emulates.
#[derive(Clone, Copy, Debug)]
pub enum MatchKind {
    /// Windowed matching with Chebyshev radius `k`; positions outside the
    /// image count as zero-score candidates.
    Short { k: usize },
    /// All-pairs matching against the full reference map.
    Long,
}

/// Brute-force gated top-n scores, f64 throughout.
///
/// Returns n×H×W values in descending order per position, candidate ties
/// broken by lower candidate index, tail zero-filled.
pub fn match_scores_naive(
    kind: MatchKind,
    cur: &[f64],
    other: &[f64],
    gate: &[f64],
    c: usize,
    cur_hw: (usize, usize),
    other_hw: (usize, usize),
    n: usize,
) -> Vec<f64> {
    let (h, w) = cur_hw;
    let (oh, ow) = other_hw;
    let mut out = vec![0.0f64; n * h * w];
    let mut cands: Vec<(f64, usize)> = Vec::new();
    for i in 0..h {
        for j in 0..w {
            cands.clear();
            let cur_vec: Vec<f64> = (0..c).map(|ci| cur[(ci * h + i) * w + j]).collect();
            match kind {
                MatchKind::Short { k } => {
                    let side = 2 * k + 1;
                    for dy in 0..side {
                        for dx in 0..side {
                            let di = i as isize + dy as isize - k as isize;
                            let dj = j as isize + dx as isize - k as isize;
                            let idx = dy * side + dx;
                            if di < 0 || di >= oh as isize || dj < 0 || dj >= ow as isize {
                                cands.push((0.0, idx));
                                continue;
                            }
                            let (di, dj) = (di as usize, dj as usize);
                            let mut dot = 0.0f64;
                            for (ci, cv) in cur_vec.iter().enumerate() {
                                dot += cv * other[(ci * oh + di) * ow + dj];
                            }
                            let s = dot * gate[di * ow + dj];
                            cands.push((if s == 0.0 { 0.0 } else { s }, idx));
                        }
                    }
                }
                MatchKind::Long => {
                    for di in 0..oh {
                        for dj in 0..ow {
                            let mut dot = 0.0f64;
                            for (ci, cv) in cur_vec.iter().enumerate() {
                                dot += cv * other[(ci * oh + di) * ow + dj];
                            }
                            let s = dot * gate[di * ow + dj];
                            cands.push((if s == 0.0 { 0.0 } else { s }, di * ow + dj));
                        }
                    }
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (slot, &(v, _)) in cands.iter().take(n).enumerate() {
                out[(slot * h + i) * w + j] = v;
            }
        }
    }
    out
}

/// Convenience wrapper producing an f32 tensor from the naive scores.
pub fn match_naive_tensor(
    kind: MatchKind,
    cur: &Tensor,
    other: &Tensor,
    gate: &Tensor,
    n: usize,
) -> Tensor {
    let (c, h, w) = cur.dims3().expect("rank-3");
    let (oc, oh, ow) = other.dims3().expect("rank-3");
    assert_eq!(c, oc);
    let cur64: Vec<f64> = cur.data().iter().map(|&v| v as f64).collect();
    let oth64: Vec<f64> = other.data().iter().map(|&v| v as f64).collect();
    let gate64: Vec<f64> = gate.data().iter().map(|&v| v as f64).collect();
    let vals = match_scores_naive(kind, &cur64, &oth64, &gate64, c, (h, w), (oh, ow), n);
    Tensor::new(&[n, h, w], vals.iter().map(|&v| v as f32).collect()).expect("oracle shape")
}

/// Smallest gap between the n-th and (n+1)-th ranked gated score over all
/// positions; used to pick gradient-check instances away from selection
/// boundaries.
pub fn min_selection_margin(
    kind: MatchKind,
    cur: &Tensor,
    other: &Tensor,
    gate: &Tensor,
    n: usize,
) -> f64 {
    let (c, h, w) = cur.dims3().expect("rank-3");
    let (_, oh, ow) = other.dims3().expect("rank-3");
    let cur64: Vec<f64> = cur.data().iter().map(|&v| v as f64).collect();
    let oth64: Vec<f64> = other.data().iter().map(|&v| v as f64).collect();
    let gate64: Vec<f64> = gate.data().iter().map(|&v| v as f64).collect();
    let mut min_gap = f64::INFINITY;
    let mut cands: Vec<(f64, usize)> = Vec::new();
    for i in 0..h {
        for j in 0..w {
            cands.clear();
            let cur_vec: Vec<f64> = (0..c).map(|ci| cur64[(ci * h + i) * w + j]).collect();
            let mut push = |di: isize, dj: isize, idx: usize| {
                if di < 0 || di >= oh as isize || dj < 0 || dj >= ow as isize {
                    cands.push((0.0, idx));
                    return;
                }
                let (di, dj) = (di as usize, dj as usize);
                let mut dot = 0.0f64;
                for (ci, cv) in cur_vec.iter().enumerate() {
                    dot += cv * oth64[(ci * oh + di) * ow + dj];
                }
                cands.push((dot * gate64[di * ow + dj], idx));
            };
            match kind {
                MatchKind::Short { k } => {
                    let side = 2 * k + 1;
                    for dy in 0..side {
                        for dx in 0..side {
                            push(
                                i as isize + dy as isize - k as isize,
                                j as isize + dx as isize - k as isize,
                                dy * side + dx,
                            );
                        }
                    }
                }
                MatchKind::Long => {
                    for di in 0..oh {
                        for dj in 0..ow {
                            push(di as isize, dj as isize, di * ow + dj);
                        }
                    }
                }
            }
            if n < cands.len() {
                cands.sort_by(|a, b| b.0.total_cmp(&a.0));
                let gap = cands[n - 1].0 - cands[n].0;
                min_gap = min_gap.min(gap);
            }
        }
    }
    min_gap
}

/// Σ upstream ⊙ naive-forward, the scalar objective for finite differences.
fn match_loss(
    kind: MatchKind,
    cur: &[f64],
    other: &[f64],
    gate: &[f64],
    c: usize,
    cur_hw: (usize, usize),
    other_hw: (usize, usize),
    n: usize,
    upstream: &[f32],
) -> f64 {
    let vals = match_scores_naive(kind, cur, other, gate, c, cur_hw, other_hw, n);
    vals.iter()
        .zip(upstream)
        .map(|(&v, &u)| v * u as f64)
        .sum()
}

/// Max relative error between analytic matching gradients and central
/// finite differences of the naive forward, over `samples` coordinates of
/// each feature map.
#[allow(clippy::too_many_arguments)]
pub fn match_grad_max_rel_error(
    kind: MatchKind,
    cur: &Tensor,
    other: &Tensor,
    gate: &Tensor,
    n: usize,
    upstream: &Tensor,
    grad_cur: &Tensor,
    grad_other: &Tensor,
    h_step: f64,
    samples: usize,
    seed: u64,
) -> f64 {
    let (c, h, w) = cur.dims3().expect("rank-3");
    let (_, oh, ow) = other.dims3().expect("rank-3");
    let cur64: Vec<f64> = cur.data().iter().map(|&v| v as f64).collect();
    let oth64: Vec<f64> = other.data().iter().map(|&v| v as f64).collect();
    let gate64: Vec<f64> = gate.data().iter().map(|&v| v as f64).collect();
    let up = upstream.data();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut check = |buf: &mut Vec<f64>, idx: usize, analytic: f64, is_cur: bool| {
        let orig = buf[idx];
        buf[idx] = orig + h_step;
        let (lp, lm);
        {
            let (cb, ob) = if is_cur {
                (buf.as_slice(), oth64.as_slice())
            } else {
                (cur64.as_slice(), buf.as_slice())
            };
            lp = match_loss(kind, cb, ob, &gate64, c, (h, w), (oh, ow), n, up);
        }
        buf[idx] = orig - h_step;
        {
            let (cb, ob) = if is_cur {
                (buf.as_slice(), oth64.as_slice())
            } else {
                (cur64.as_slice(), buf.as_slice())
            };
            lm = match_loss(kind, cb, ob, &gate64, c, (h, w), (oh, ow), n, up);
        }
        buf[idx] = orig;
        let fd = (lp - lm) / (2.0 * h_step);
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-4);
        max_rel = max_rel.max(rel);
    };

    let mut cur_buf = cur64.clone();
    for _ in 0..samples {
        let idx = rng.random_range(0..c * h * w);
        check(&mut cur_buf, idx, grad_cur.data()[idx] as f64, true);
    }
    let mut oth_buf = oth64.clone();
    for _ in 0..samples {
        let idx = rng.random_range(0..c * oh * ow);
        check(&mut oth_buf, idx, grad_other.data()[idx] as f64, false);
    }
    max_rel
}

/// Random L2-normalized features, as the matching branches produce.
pub fn random_unit_features(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    let data: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let t = Tensor::new(&[c, h, w], data).expect("shape");
    crate::numerics::l2_normalize_channels(&t, 1e-8).expect("normalize")
}

/// Deterministically search seeds for an instance whose top-n selection
/// boundary sits at least `margin` away from the next candidate, so finite
/// differences at step h stay on one side of the selection.
pub fn margin_checked_instance(
    seed0: u64,
    kind: MatchKind,
    c: usize,
    cur_hw: (usize, usize),
    other_hw: (usize, usize),
    n: usize,
    margin: f64,
) -> (Tensor, Tensor, Tensor) {
    for seed in seed0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cur = random_unit_features(&mut rng, c, cur_hw.0, cur_hw.1);
        let other = random_unit_features(&mut rng, c, other_hw.0, other_hw.1);
        let gate_data: Vec<f32> = (0..other_hw.0 * other_hw.1)
            .map(|_| rng.random_range(0.2f32..1.0))
            .collect();
        let gate = Tensor::new(&[1, other_hw.0, other_hw.1], gate_data).expect("shape");
        if min_selection_margin(kind, &cur, &other, &gate, n) > margin {
            return (cur, other, gate);
        }
    }
    unreachable!()
}

/// Focal loss evaluated in f64, for finite-difference checks.
fn focal_loss_f64(p: &[f64], target: &[f32], gamma: f64, alpha: f64) -> f64 {
    let eps = 1e-7f64;
    let mut loss = 0.0f64;
    for (&pv, &tv) in p.iter().zip(target) {
        let pc = pv.clamp(eps, 1.0 - eps);
        let (pt, at) = if tv == 1.0 {
            (pc, alpha)
        } else {
            (1.0 - pc, 1.0 - alpha)
        };
        loss += -at * (1.0 - pt).powf(gamma) * pt.ln();
    }
    loss / p.len() as f64
}

/// Max relative error of the analytic focal-loss gradient against central
/// finite differences of the f64 loss, checked at every pixel.
pub fn focal_grad_max_rel_error(
    p: &Tensor,
    target: &Tensor,
    gamma: f32,
    alpha: f32,
    analytic: &[f32],
    h_step: f64,
) -> f64 {
    let mut buf: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
    let t = target.data();
    let mut max_rel = 0.0f64;
    for i in 0..buf.len() {
        let orig = buf[i];
        buf[i] = orig + h_step;
        let lp = focal_loss_f64(&buf, t, gamma as f64, alpha as f64);
        buf[i] = orig - h_step;
        let lm = focal_loss_f64(&buf, t, gamma as f64, alpha as f64);
        buf[i] = orig;
        let fd = (lp - lm) / (2.0 * h_step);
        let an = analytic[i] as f64;
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
        max_rel = max_rel.max(rel);
    }
    max_rel
}
