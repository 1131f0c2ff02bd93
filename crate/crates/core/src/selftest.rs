//! Self-verification suite: oracle equivalence, gradient checks and the
//! fixed architecture constants. The CLI's `selftest` command runs these
//! and prints a pass/fail table; the acceptance tests call them directly.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::dataio::weights;
use crate::encoder::{branch, encode, pad_to_multiple, FeatureMap};
use crate::matching::{
    long_term_match, long_term_match_backward, short_term_match, short_term_match_backward,
    GateMask, MatchConfig,
};
use crate::numerics::{focal_loss, Tensor};
use crate::oracle::{self, MatchKind};
use crate::pipeline::ModelParams;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckResult {
            name,
            passed,
            detail,
        }
    }
}

/// Run every check in order.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        conv_oracle_check(),
        short_term_oracle_check(),
        long_term_oracle_check(),
        focal_gradient_check(),
        short_backward_gradient_check(),
        long_backward_gradient_check(),
        window_global_consistency_check(),
        paper_constants_check(),
    ]
}

/// conv2d against the six-nested-loop reference on 200 random draws.
pub fn conv_oracle_check() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_0001);
    let mut max_delta = 0.0f32;
    for _ in 0..200 {
        let c_in = rng.random_range(1..=6usize);
        let k_out = rng.random_range(1..=6usize);
        let kh = *[1usize, 3, 5].choose(&mut rng).unwrap();
        let kw = *[1usize, 3, 5].choose(&mut rng).unwrap();
        let h = rng.random_range(kh..=kh + 9);
        let w = rng.random_range(kw..=kw + 9);
        let stride = rng.random_range(1..=2usize);
        let pad = (rng.random_range(0..=2usize), rng.random_range(0..=2usize));
        let x = random_tensor(&mut rng, &[c_in, h, w]);
        let kernel = random_tensor(&mut rng, &[k_out, c_in, kh, kw]);
        let bias: Vec<f32> = (0..k_out).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        let spec =
            crate::numerics::ConvSpec::new(kernel.clone(), bias.clone(), stride, pad).unwrap();
        let got = crate::numerics::conv2d(&x, &spec).unwrap();
        let want = oracle::conv2d_naive(&x, &kernel, &bias, stride, pad);
        max_delta = max_delta.max(max_abs_delta(got.data(), want.data()));
    }
    CheckResult::new(
        "conv2d vs nested-loop oracle (200 draws)",
        max_delta < 1e-5,
        format!("max |delta| = {max_delta:.2e} (tolerance 1e-5)"),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn random_gate(rng: &mut ChaCha8Rng, h: usize, w: usize) -> GateMask {
    let data: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0f32..=1.0)).collect();
    GateMask::new(Tensor::new(&[1, h, w], data).unwrap()).unwrap()
}

fn max_abs_delta(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max)
}

/// 50 random short-term instances against the brute-force oracle:
/// C ∈ {8,16}, H,W ∈ 8..=16, k ∈ 0..=3, n ∈ 1..=(2k+1)².
pub fn short_term_oracle_check() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_0002);
    let mut max_delta = 0.0f32;
    for _ in 0..50 {
        let c = *[8usize, 16].choose(&mut rng).unwrap();
        let h = rng.random_range(8..=16usize);
        let w = rng.random_range(8..=16usize);
        let k = rng.random_range(0..=3usize);
        let n = rng.random_range(1..=(2 * k + 1) * (2 * k + 1));
        let cur = oracle::random_unit_features(&mut rng, c, h, w);
        let prev = oracle::random_unit_features(&mut rng, c, h, w);
        let gate = random_gate(&mut rng, h, w);
        let cfg = MatchConfig::new(k, n).unwrap();
        let out = short_term_match(
            &FeatureMap::new(cur.clone(), 8).unwrap(),
            &FeatureMap::new(prev.clone(), 8).unwrap(),
            &gate,
            &cfg,
        )
        .unwrap();
        let want =
            oracle::match_naive_tensor(MatchKind::Short { k }, &cur, &prev, gate.values(), n);
        max_delta = max_delta.max(max_abs_delta(out.map.values().data(), want.data()));
    }
    CheckResult::new(
        "short-term match vs brute-force oracle (50 instances)",
        max_delta < 1e-5,
        format!("max |delta| = {max_delta:.2e} (tolerance 1e-5)"),
    )
}

/// 50 random long-term instances with asymmetric reference extents.
pub fn long_term_oracle_check() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_0003);
    let mut max_delta = 0.0f32;
    for _ in 0..50 {
        let c = *[8usize, 16].choose(&mut rng).unwrap();
        let h = rng.random_range(8..=16usize);
        let w = rng.random_range(8..=16usize);
        let rh = rng.random_range(8..=16usize);
        let rw = rng.random_range(8..=16usize);
        let k = rng.random_range(0..=3usize);
        let n = rng.random_range(1..=(2 * k + 1) * (2 * k + 1));
        let cur = oracle::random_unit_features(&mut rng, c, h, w);
        let reference = oracle::random_unit_features(&mut rng, c, rh, rw);
        let gate = random_gate(&mut rng, rh, rw);
        let cfg = MatchConfig::new(k, n).unwrap();
        let out = long_term_match(
            &FeatureMap::new(cur.clone(), 8).unwrap(),
            &FeatureMap::new(reference.clone(), 8).unwrap(),
            &gate,
            &cfg,
        )
        .unwrap();
        let want = oracle::match_naive_tensor(MatchKind::Long, &cur, &reference, gate.values(), n);
        max_delta = max_delta.max(max_abs_delta(out.map.values().data(), want.data()));
    }
    CheckResult::new(
        "long-term match vs all-pairs oracle (50 instances)",
        max_delta < 1e-5,
        format!("max |delta| = {max_delta:.2e} (tolerance 1e-5)"),
    )
}

/// Analytic focal-loss gradient vs central finite differences (h = 1e-3)
/// at 100 pixels.
pub fn focal_gradient_check() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_0004);
    let n = 100;
    let p: Vec<f32> = (0..n).map(|_| rng.random_range(0.05f32..0.95)).collect();
    let t: Vec<f32> = (0..n)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    let pt = Tensor::new(&[1, 10, 10], p).unwrap();
    let tt = Tensor::new(&[1, 10, 10], t).unwrap();
    let (_, grad) = focal_loss(&pt, &tt, 2.0, 0.25).unwrap();
    let max_rel = oracle::focal_grad_max_rel_error(&pt, &tt, 2.0, 0.25, grad.data(), 1e-3);
    CheckResult::new(
        "focal loss gradient vs finite differences (100 pixels)",
        max_rel < 1e-3,
        format!("max relative error = {max_rel:.2e} (tolerance 1e-3)"),
    )
}

/// Short-term backward vs finite differences of the f64 oracle forward,
/// 120 sampled coordinates.
pub fn short_backward_gradient_check() -> CheckResult {
    let (c, h, w, k, n) = (8usize, 8usize, 8usize, 2usize, 6usize);
    let (cur, prev, gate) =
        oracle::margin_checked_instance(0x100, MatchKind::Short { k }, c, (h, w), (h, w), n, 5e-3);
    let cfg = MatchConfig::new(k, n).unwrap();
    let cur_f = FeatureMap::new(cur.clone(), 8).unwrap();
    let prev_f = FeatureMap::new(prev.clone(), 8).unwrap();
    let gate_m = GateMask::new(gate.clone()).unwrap();
    let out = short_term_match(&cur_f, &prev_f, &gate_m, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_0005);
    let up_data: Vec<f32> = (0..n * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let up = Tensor::new(&[n, h, w], up_data).unwrap();
    let (gc, gp) = short_term_match_backward(&up, &cur_f, &prev_f, &gate_m, &out.saved).unwrap();
    let max_rel = oracle::match_grad_max_rel_error(
        MatchKind::Short { k },
        &cur,
        &prev,
        &gate,
        n,
        &up,
        &gc,
        &gp,
        1e-3,
        60,
        17,
    );
    CheckResult::new(
        "short-term backward vs finite differences (120 coords)",
        max_rel < 1e-3,
        format!("max relative error = {max_rel:.2e} (tolerance 1e-3)"),
    )
}

/// Long-term backward vs finite differences, 120 sampled coordinates.
pub fn long_backward_gradient_check() -> CheckResult {
    let (c, n) = (8usize, 6usize);
    let (cur, reference, gate) =
        oracle::margin_checked_instance(0x200, MatchKind::Long, c, (7, 7), (6, 5), n, 5e-3);
    let cfg = MatchConfig::new(0, n).unwrap();
    let cur_f = FeatureMap::new(cur.clone(), 8).unwrap();
    let ref_f = FeatureMap::new(reference.clone(), 8).unwrap();
    let gate_m = GateMask::new(gate.clone()).unwrap();
    let out = long_term_match(&cur_f, &ref_f, &gate_m, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_0006);
    let up_data: Vec<f32> = (0..n * 7 * 7).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let up = Tensor::new(&[n, 7, 7], up_data).unwrap();
    let (gc, gr) = long_term_match_backward(&up, &cur_f, &ref_f, &gate_m, &out.saved).unwrap();
    let max_rel = oracle::match_grad_max_rel_error(
        MatchKind::Long,
        &cur,
        &reference,
        &gate,
        n,
        &up,
        &gc,
        &gr,
        1e-3,
        60,
        18,
    );
    CheckResult::new(
        "long-term backward vs finite differences (120 coords)",
        max_rel < 1e-3,
        format!("max relative error = {max_rel:.2e} (tolerance 1e-3)"),
    )
}

/// A window that covers the whole image makes the short-term operator equal
/// the long-term one against the previous frame, bit for bit.
pub fn window_global_consistency_check() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_0007);
    let (h, w) = (12usize, 12usize);
    // non-negative features keep out-of-window zero scores from outranking
    // genuine candidates, so the two operators agree exactly
    let make = |rng: &mut ChaCha8Rng| {
        let data: Vec<f32> = (0..8 * h * w).map(|_| rng.random_range(0.1f32..1.0)).collect();
        let t = Tensor::new(&[8, h, w], data).unwrap();
        crate::numerics::l2_normalize_channels(&t, 1e-8).unwrap()
    };
    let cur = FeatureMap::new(make(&mut rng), 8).unwrap();
    let prev = FeatureMap::new(make(&mut rng), 8).unwrap();
    let gate = GateMask::new(Tensor::full(&[1, h, w], 1.0).unwrap()).unwrap();
    let cfg = MatchConfig::new(12, 256).unwrap();
    let short = short_term_match(&cur, &prev, &gate, &cfg).unwrap();
    let long = long_term_match(&cur, &prev, &gate, &cfg).unwrap();
    let equal = short.map == long.map;
    CheckResult::new(
        "window covering the image equals global matching (exact)",
        equal,
        if equal {
            "short k=12 on 12x12 == long, bit-identical".into()
        } else {
            "maps differ".into()
        },
    )
}

/// The fixed constants: 289-candidate default window, 256 similarity
/// channels, and 107×60 matching features for an 854×480 frame.
pub fn paper_constants_check() -> CheckResult {
    let cfg = MatchConfig::default();
    let mut failures = Vec::new();
    if cfg.window_candidates() != 289 {
        failures.push(format!(
            "default window has {} candidates, want 289",
            cfg.window_candidates()
        ));
    }
    if cfg.n != 256 {
        failures.push(format!("default similarity channels {}, want 256", cfg.n));
    }

    let container = weights::seeded_init(0).expect("seeded weights");
    let model = ModelParams::from_container(&container).expect("model params");
    let frame = Tensor::full(&[3, 480, 854], 0.5).expect("frame");
    let (padded, crop) = pad_to_multiple(&frame).expect("pad");
    if padded.shape() != [3, 480, 856] || crop.width != 854 {
        failures.push(format!("854x480 padded to {:?}, want 856x480", padded.shape()));
    }
    let feats = encode(&padded, &model.encoder).expect("encode");
    let match_feats = branch(&feats, &model.branch).expect("branch");
    let (h8, w8) = match_feats.local_feat.extents();
    if (w8, h8) != (107, 60) {
        failures.push(format!("matching features at {w8}x{h8}, want 107x60"));
    }
    let out = short_term_match(
        &match_feats.local_feat,
        &match_feats.local_feat,
        &GateMask::new(Tensor::full(&[1, h8, w8], 1.0).unwrap()).unwrap(),
        &MatchConfig { k: 8, n: 256 },
    );
    match out {
        Ok(o) => {
            if o.map.channels() != 256 {
                failures.push(format!("similarity map has {} channels", o.map.channels()));
            }
        }
        Err(e) => failures.push(format!("default-config match failed: {e}")),
    }

    let passed = failures.is_empty();
    CheckResult::new(
        "architecture constants (k=8 window 289, N=256, 854x480 -> 107x60)",
        passed,
        if passed {
            "window 289, channels 256, features 107x60".into()
        } else {
            failures.join("; ")
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    // the full suite runs in the acceptance tests; spot-check the cheap ones
    #[test]
    fn focal_and_conv_checks_pass() {
        assert!(conv_oracle_check().passed);
        assert!(focal_gradient_check().passed);
    }

    #[test]
    fn consistency_check_passes() {
        assert!(window_global_consistency_check().passed);
    }
}
