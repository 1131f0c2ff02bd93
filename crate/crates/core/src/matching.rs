//! Long-term (global) and short-term (windowed) similarity matching.
//!
//! Both operators score the current frame's features against another
//! frame's features by per-pixel dot product (cosine similarity when the
//! branches normalize), multiply every candidate score by a soft
//! foreground/background gate, and keep the N largest values per position
//! in descending order. Short-term matching restricts candidates to a
//! (2k+1)×(2k+1) window around the position; long-term matching scores all
//! reference positions.
//!
//! Candidates at positions outside the image count as zero scores, and
//! positions past the candidate count are zero-filled, consistent with a
//! gate that multiplies them to zero.

use rayon::prelude::*;

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::numerics::{dot_f32, select_top_n, to_position_major, Tensor};

/// Window radius and similarity channel count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchConfig {
    pub k: usize,
    pub n: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { k: 8, n: 256 }
    }
}

impl MatchConfig {
    pub fn new(k: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument {
                name: "n",
                reason: "similarity channel count must be >= 1".into(),
            });
        }
        Ok(MatchConfig { k, n })
    }

    pub fn window_side(&self) -> usize {
        2 * self.k + 1
    }

    /// Candidates per position before selection: (2k+1)².
    pub fn window_candidates(&self) -> usize {
        self.window_side() * self.window_side()
    }
}

/// Soft foreground probability at feature resolution, values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct GateMask {
    values: Tensor,
}

impl GateMask {
    pub fn new(values: Tensor) -> Result<Self> {
        let (c, _, _) = values.dims3()?;
        if c != 1 {
            return Err(Error::InvalidShape(format!(
                "gate mask must be 1×H×W, got {:?}",
                values.shape()
            )));
        }
        if values.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument {
                name: "gate",
                reason: "values must lie in [0,1]".into(),
            });
        }
        Ok(GateMask { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    /// The background gate 1 − M.
    pub fn complement(&self) -> GateMask {
        GateMask {
            values: self.values.map(|v| 1.0 - v),
        }
    }
}

/// N×H×W match scores, descending along the first axis at each position.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    values: Tensor,
}

impl SimilarityMap {
    /// Wrap an n×H×W tensor. The descending-per-position ordering is the
    /// producer's responsibility; this is how ablation paths inject
    /// all-zero maps of the right shape.
    pub fn from_values(values: Tensor) -> Result<Self> {
        values.dims3()?;
        Ok(SimilarityMap { values })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Result<Self> {
        Ok(SimilarityMap {
            values: Tensor::zeros(&[n, h, w])?,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SavedKind {
    Short { k: usize },
    Long { ref_h: usize, ref_w: usize },
}

/// Selected candidate index per output slot, recorded by the forward pass
/// so the backward pass routes gradients to exactly those dot products.
#[derive(Clone, Debug)]
pub struct SavedSelection {
    kind: SavedKind,
    n: usize,
    h: usize,
    w: usize,
    /// n×H×W slot-major candidate ids, −1 for zero-filled slots.
    indices: Vec<i32>,
}

/// Forward result: the similarity map plus what backward needs.
#[derive(Clone, Debug)]
pub struct MatchOutput {
    pub map: SimilarityMap,
    pub saved: SavedSelection,
}

#[inline]
fn canon_zero(v: f32) -> f32 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

/// Non-overlapping stride×stride average pooling of a pixel-resolution mask.
pub fn downsample_mask(mask: &Tensor, stride: usize) -> Result<GateMask> {
    if stride == 0 {
        return Err(Error::InvalidArgument {
            name: "stride",
            reason: "must be positive".into(),
        });
    }
    let (c, h, w) = mask.dims3()?;
    if c != 1 {
        return Err(Error::InvalidShape(format!(
            "mask must be 1×H×W, got {:?}",
            mask.shape()
        )));
    }
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::InvalidShape(format!(
            "mask extents {h}x{w} not divisible by stride {stride}"
        )));
    }
    let (gh, gw) = (h / stride, w / stride);
    let mut out = Tensor::zeros(&[1, gh, gw])?;
    let src = mask.data();
    let dst = out.data_mut();
    let inv = 1.0 / (stride * stride) as f32;
    for gy in 0..gh {
        for gx in 0..gw {
            let mut sum = 0.0f32;
            for y in 0..stride {
                let row = &src[(gy * stride + y) * w + gx * stride..][..stride];
                for &v in row {
                    sum += v;
                }
            }
            dst[gy * gw + gx] = sum * inv;
        }
    }
    GateMask::new(out)
}

struct RowResult {
    /// Per gate: position-major scores (W×n) and optional indices.
    per_gate: Vec<(Vec<f32>, Option<Vec<i32>>)>,
}

/// Shared core: windowed scores for one or two gates over the same dots.
fn short_core(
    cur: &FeatureMap,
    prev: &FeatureMap,
    gates: &[&GateMask],
    cfg: &MatchConfig,
    save: bool,
) -> Result<Vec<(SimilarityMap, Option<SavedSelection>)>> {
    let ct = cur.tensor();
    let pt = prev.tensor();
    if ct.shape() != pt.shape() {
        return Err(Error::shape_mismatch(
            "short_term_match features",
            ct.shape(),
            pt.shape(),
        ));
    }
    let (c, h, w) = ct.dims3()?;
    for g in gates {
        if g.extents() != (h, w) {
            return Err(Error::shape_mismatch(
                "short_term_match gate",
                g.values().shape(),
                [1, h, w],
            ));
        }
    }
    let (k, n) = (cfg.k, cfg.n);
    let side = 2 * k + 1;
    let cand_count = side * side;

    let cur_pm = to_position_major(ct);
    let prev_pm = to_position_major(pt);
    let gate_data: Vec<&[f32]> = gates.iter().map(|g| g.values().data()).collect();

    let rows: Vec<RowResult> = (0..h)
        .into_par_iter()
        .map(|i| {
            let mut dots = vec![0.0f32; cand_count];
            let mut src = vec![-1i32; cand_count];
            let mut cands: Vec<(f32, u32)> = Vec::with_capacity(cand_count);
            let mut per_gate: Vec<(Vec<f32>, Option<Vec<i32>>)> = gate_data
                .iter()
                .map(|_| {
                    (
                        vec![0.0f32; w * n],
                        if save { Some(vec![-1i32; w * n]) } else { None },
                    )
                })
                .collect();
            for j in 0..w {
                let cvec = &cur_pm[(i * w + j) * c..][..c];
                for dy in 0..side {
                    let di = i as isize + dy as isize - k as isize;
                    for dx in 0..side {
                        let dj = j as isize + dx as isize - k as isize;
                        let idx = dy * side + dx;
                        if di < 0 || di >= h as isize || dj < 0 || dj >= w as isize {
                            dots[idx] = 0.0;
                            src[idx] = -1;
                        } else {
                            let q = di as usize * w + dj as usize;
                            dots[idx] = dot_f32(cvec, &prev_pm[q * c..][..c]);
                            src[idx] = q as i32;
                        }
                    }
                }
                for (g, (vals, idxs)) in per_gate.iter_mut().enumerate() {
                    let gd = gate_data[g];
                    cands.clear();
                    for idx in 0..cand_count {
                        let s = if src[idx] < 0 {
                            0.0
                        } else {
                            canon_zero(dots[idx] * gd[src[idx] as usize])
                        };
                        cands.push((s, idx as u32));
                    }
                    let vslice = &mut vals[j * n..][..n];
                    let islice = idxs.as_mut().map(|ix| &mut ix[j * n..][..n]);
                    select_top_n(&mut cands, n, vslice, islice);
                }
            }
            RowResult { per_gate }
        })
        .collect();

    Ok(assemble(rows, gates.len(), n, h, w, save, SavedKind::Short { k }))
}

/// Shared core for the global operator: scores against all reference
/// positions, gated by the reference gate.
fn long_core(
    cur: &FeatureMap,
    reference: &FeatureMap,
    gates: &[&GateMask],
    cfg: &MatchConfig,
    save: bool,
) -> Result<Vec<(SimilarityMap, Option<SavedSelection>)>> {
    let ct = cur.tensor();
    let rt = reference.tensor();
    let (c, h, w) = ct.dims3()?;
    let (rc, rh, rw) = rt.dims3()?;
    if c != rc {
        return Err(Error::shape_mismatch(
            "long_term_match channels",
            ct.shape(),
            rt.shape(),
        ));
    }
    for g in gates {
        if g.extents() != (rh, rw) {
            return Err(Error::shape_mismatch(
                "long_term_match gate",
                g.values().shape(),
                [1, rh, rw],
            ));
        }
    }
    let n = cfg.n;
    let ref_count = rh * rw;

    let cur_pm = to_position_major(ct);
    let ref_pm = to_position_major(rt);
    let gate_data: Vec<&[f32]> = gates.iter().map(|g| g.values().data()).collect();

    let rows: Vec<RowResult> = (0..h)
        .into_par_iter()
        .map(|i| {
            let mut dots = vec![0.0f32; ref_count];
            let mut cands: Vec<(f32, u32)> = Vec::with_capacity(ref_count);
            let mut per_gate: Vec<(Vec<f32>, Option<Vec<i32>>)> = gate_data
                .iter()
                .map(|_| {
                    (
                        vec![0.0f32; w * n],
                        if save { Some(vec![-1i32; w * n]) } else { None },
                    )
                })
                .collect();
            for j in 0..w {
                let cvec = &cur_pm[(i * w + j) * c..][..c];
                for (q, d) in dots.iter_mut().enumerate() {
                    *d = dot_f32(cvec, &ref_pm[q * c..][..c]);
                }
                for (g, (vals, idxs)) in per_gate.iter_mut().enumerate() {
                    let gd = gate_data[g];
                    cands.clear();
                    for (q, &d) in dots.iter().enumerate() {
                        cands.push((canon_zero(d * gd[q]), q as u32));
                    }
                    let vslice = &mut vals[j * n..][..n];
                    let islice = idxs.as_mut().map(|ix| &mut ix[j * n..][..n]);
                    select_top_n(&mut cands, n, vslice, islice);
                }
            }
            RowResult { per_gate }
        })
        .collect();

    Ok(assemble(
        rows,
        gates.len(),
        n,
        h,
        w,
        save,
        SavedKind::Long { ref_h: rh, ref_w: rw },
    ))
}

fn assemble(
    rows: Vec<RowResult>,
    gate_count: usize,
    n: usize,
    h: usize,
    w: usize,
    save: bool,
    kind: SavedKind,
) -> Vec<(SimilarityMap, Option<SavedSelection>)> {
    let hw = h * w;
    let mut out = Vec::with_capacity(gate_count);
    for g in 0..gate_count {
        let mut values = vec![0.0f32; n * hw];
        let mut indices = if save { vec![-1i32; n * hw] } else { Vec::new() };
        for (i, row) in rows.iter().enumerate() {
            let (vals, idxs) = &row.per_gate[g];
            for j in 0..w {
                let p = i * w + j;
                for slot in 0..n {
                    values[slot * hw + p] = vals[j * n + slot];
                }
                if let Some(ix) = idxs {
                    for slot in 0..n {
                        indices[slot * hw + p] = ix[j * n + slot];
                    }
                }
            }
        }
        let map = SimilarityMap {
            values: Tensor::new(&[n, h, w], values).expect("similarity shape"),
        };
        let saved = save.then(|| SavedSelection {
            kind,
            n,
            h,
            w,
            indices: std::mem::take(&mut indices),
        });
        out.push((map, saved));
    }
    out
}

/// Windowed matching of `cur` against `prev`, gated by `gate`
/// (foreground; pass `gate.complement()` for the background map).
pub fn short_term_match(
    cur: &FeatureMap,
    prev: &FeatureMap,
    gate: &GateMask,
    cfg: &MatchConfig,
) -> Result<MatchOutput> {
    let mut res = short_core(cur, prev, &[gate], cfg, true)?;
    let (map, saved) = res.pop().expect("one gate in, one map out");
    Ok(MatchOutput {
        map,
        saved: saved.expect("saved selection requested"),
    })
}

/// Foreground and background maps sharing one dot-product sweep.
pub fn short_term_match_pair(
    cur: &FeatureMap,
    prev: &FeatureMap,
    gate: &GateMask,
    cfg: &MatchConfig,
) -> Result<(SimilarityMap, SimilarityMap)> {
    let bg = gate.complement();
    let mut res = short_core(cur, prev, &[gate, &bg], cfg, false)?;
    let (bg_map, _) = res.pop().expect("background map");
    let (fg_map, _) = res.pop().expect("foreground map");
    Ok((fg_map, bg_map))
}

/// All-pairs matching of `cur` against the reference frame.
pub fn long_term_match(
    cur: &FeatureMap,
    reference: &FeatureMap,
    ref_gate: &GateMask,
    cfg: &MatchConfig,
) -> Result<MatchOutput> {
    let mut res = long_core(cur, reference, &[ref_gate], cfg, true)?;
    let (map, saved) = res.pop().expect("one gate in, one map out");
    Ok(MatchOutput {
        map,
        saved: saved.expect("saved selection requested"),
    })
}

/// Foreground and background global maps sharing one dot-product sweep.
pub fn long_term_match_pair(
    cur: &FeatureMap,
    reference: &FeatureMap,
    ref_gate: &GateMask,
    cfg: &MatchConfig,
) -> Result<(SimilarityMap, SimilarityMap)> {
    let bg = ref_gate.complement();
    let mut res = long_core(cur, reference, &[ref_gate, &bg], cfg, false)?;
    let (bg_map, _) = res.pop().expect("background map");
    let (fg_map, _) = res.pop().expect("foreground map");
    Ok((fg_map, bg_map))
}

fn check_backward_inputs(
    upstream: &Tensor,
    saved: &SavedSelection,
    cur_shape: &[usize],
    other_shape: &[usize],
) -> Result<()> {
    if upstream.shape() != [saved.n, saved.h, saved.w] {
        return Err(Error::shape_mismatch(
            "match backward upstream",
            upstream.shape(),
            [saved.n, saved.h, saved.w],
        ));
    }
    if cur_shape[1] != saved.h || cur_shape[2] != saved.w {
        return Err(Error::shape_mismatch(
            "match backward features",
            cur_shape,
            [saved.h, saved.w],
        ));
    }
    if saved.indices.len() != saved.n * saved.h * saved.w {
        return Err(Error::InvalidShape(
            "saved selection missing candidate indices".into(),
        ));
    }
    let _ = other_shape;
    Ok(())
}

/// Gradients of the selected gated dot products w.r.t. both feature maps;
/// the gate is a constant, unselected candidates get zero.
pub fn short_term_match_backward(
    upstream: &Tensor,
    cur: &FeatureMap,
    prev: &FeatureMap,
    gate: &GateMask,
    saved: &SavedSelection,
) -> Result<(Tensor, Tensor)> {
    let SavedKind::Short { k } = saved.kind else {
        return Err(Error::InvalidArgument {
            name: "saved",
            reason: "selection was saved by long_term_match".into(),
        });
    };
    let ct = cur.tensor();
    let pt = prev.tensor();
    if ct.shape() != pt.shape() {
        return Err(Error::shape_mismatch(
            "short backward features",
            ct.shape(),
            pt.shape(),
        ));
    }
    check_backward_inputs(upstream, saved, ct.shape(), pt.shape())?;
    let (c, h, w) = ct.dims3()?;
    let (n, side) = (saved.n, 2 * k + 1);
    let hw = h * w;
    let gd = gate.values().data();
    let up = upstream.data();
    let cur_d = ct.data();
    let prev_d = pt.data();
    let idxs = &saved.indices;

    // cur gradient: each position accumulates over its own selected slots.
    let mut grad_cur = Tensor::zeros(&[c, h, w])?;
    {
        let gc = grad_cur.data_mut();
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                for slot in 0..n {
                    let cand = idxs[slot * hw + p];
                    if cand < 0 {
                        continue;
                    }
                    let (dy, dx) = (cand as usize / side, cand as usize % side);
                    let di = i as isize + dy as isize - k as isize;
                    let dj = j as isize + dx as isize - k as isize;
                    if di < 0 || di >= h as isize || dj < 0 || dj >= w as isize {
                        continue;
                    }
                    let q = di as usize * w + dj as usize;
                    let g = up[slot * hw + p] * gd[q];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        gc[ci * hw + p] += g * prev_d[ci * hw + q];
                    }
                }
            }
        }
    }

    // prev gradient: gather over the cur positions whose windows reach q.
    let mut grad_prev = Tensor::zeros(&[c, h, w])?;
    {
        let gp = grad_prev.data_mut();
        for a in 0..h {
            for b in 0..w {
                let q = a * w + b;
                let gq = gd[q];
                if gq == 0.0 {
                    continue;
                }
                let i_lo = a.saturating_sub(k);
                let i_hi = (a + k).min(h - 1);
                let j_lo = b.saturating_sub(k);
                let j_hi = (b + k).min(w - 1);
                for i in i_lo..=i_hi {
                    for j in j_lo..=j_hi {
                        let dy = a + k - i;
                        let dx = b + k - j;
                        let cand = (dy * side + dx) as i32;
                        let p = i * w + j;
                        for slot in 0..n {
                            if idxs[slot * hw + p] != cand {
                                continue;
                            }
                            let g = up[slot * hw + p] * gq;
                            if g != 0.0 {
                                for ci in 0..c {
                                    gp[ci * hw + q] += g * cur_d[ci * hw + p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((grad_cur, grad_prev))
}

/// Backward pass of the global operator; same contract shape as the
/// short-term backward.
pub fn long_term_match_backward(
    upstream: &Tensor,
    cur: &FeatureMap,
    reference: &FeatureMap,
    ref_gate: &GateMask,
    saved: &SavedSelection,
) -> Result<(Tensor, Tensor)> {
    let SavedKind::Long { ref_h, ref_w } = saved.kind else {
        return Err(Error::InvalidArgument {
            name: "saved",
            reason: "selection was saved by short_term_match".into(),
        });
    };
    let ct = cur.tensor();
    let rt = reference.tensor();
    let (c, h, w) = ct.dims3()?;
    let (rc, rh, rw) = rt.dims3()?;
    if c != rc || (rh, rw) != (ref_h, ref_w) {
        return Err(Error::shape_mismatch(
            "long backward reference",
            rt.shape(),
            [c, ref_h, ref_w],
        ));
    }
    check_backward_inputs(upstream, saved, ct.shape(), rt.shape())?;
    let n = saved.n;
    let hw = h * w;
    let rhw = rh * rw;
    let gd = ref_gate.values().data();
    let up = upstream.data();
    let cur_d = ct.data();
    let ref_d = rt.data();
    let idxs = &saved.indices;

    let mut grad_cur = Tensor::zeros(&[c, h, w])?;
    {
        let gc = grad_cur.data_mut();
        for p in 0..hw {
            for slot in 0..n {
                let cand = idxs[slot * hw + p];
                if cand < 0 {
                    continue;
                }
                let q = cand as usize;
                let g = up[slot * hw + p] * gd[q];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..c {
                    gc[ci * hw + p] += g * ref_d[ci * rhw + q];
                }
            }
        }
    }

    let mut grad_ref = Tensor::zeros(&[c, rh, rw])?;
    {
        let gr = grad_ref.data_mut();
        for p in 0..hw {
            for slot in 0..n {
                let cand = idxs[slot * hw + p];
                if cand < 0 {
                    continue;
                }
                let q = cand as usize;
                let g = up[slot * hw + p] * gd[q];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..c {
                    gr[ci * rhw + q] += g * cur_d[ci * hw + p];
                }
            }
        }
    }
    Ok((grad_cur, grad_ref))
}
