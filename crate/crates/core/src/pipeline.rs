//! Sequential per-frame, per-object propagation.
//!
//! Each frame runs one shared stage (pad, encode, branch) regardless of the
//! object count, then a per-object stage (long-term match against the first
//! frame, short-term match against the previous frame, decode), and finally
//! a deterministic merge. Both stages are timed and counted so the cost
//! structure is observable.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::aic::{Aic2dParams, Axis, AxisPassParams};
use crate::dataio::WeightsContainer;
use crate::decoder::{decode, DecoderInput, DecoderParams, ProbabilityMask, RefineParams};
use crate::encoder::{
    branch, encode, pad_to_multiple, BranchParams, CropRecord, EncoderParams, FeatureMap,
    MatchFeatures,
};
use crate::error::{Error, Result};
use crate::mask::LabelMap;
use crate::matching::{
    downsample_mask, long_term_match_pair, short_term_match_pair, GateMask, MatchConfig,
    SimilarityMap,
};
use crate::numerics::{ConvSpec, Tensor};

/// All weights of the fixed architecture, assembled from a container.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub branch: BranchParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    pub fn from_container(c: &WeightsContainer) -> Result<Self> {
        let conv = |name: &str, stride: usize, pad: (usize, usize)| -> Result<ConvSpec> {
            ConvSpec::new(
                c.tensor(&format!("{name}.weight"))?,
                c.vector(&format!("{name}.bias"))?,
                stride,
                pad,
            )
        };
        let pass = |name: &str, axis: Axis| -> Result<AxisPassParams> {
            AxisPassParams::new(
                axis,
                [
                    c.tensor(&format!("{name}.k1.weight"))?,
                    c.tensor(&format!("{name}.k3.weight"))?,
                    c.tensor(&format!("{name}.k5.weight"))?,
                ],
                c.vector(&format!("{name}.bias"))?,
                c.tensor(&format!("{name}.select.weight"))?,
                c.vector(&format!("{name}.select.bias"))?,
            )
        };
        let aic = |name: &str| -> Result<Aic2dParams> {
            Aic2dParams::new(
                pass(&format!("{name}.width"), Axis::Width)?,
                pass(&format!("{name}.height"), Axis::Height)?,
            )
        };

        Ok(ModelParams {
            encoder: EncoderParams {
                down2: conv("encoder.down2", 2, (1, 1))?,
                down4: conv("encoder.down4", 2, (1, 1))?,
                res4a: conv("encoder.res4a", 1, (1, 1))?,
                res4b: conv("encoder.res4b", 1, (1, 1))?,
                down8: conv("encoder.down8", 2, (1, 1))?,
                res8a: conv("encoder.res8a", 1, (1, 1))?,
                res8b: conv("encoder.res8b", 1, (1, 1))?,
            },
            branch: BranchParams {
                global: aic("branch.global")?,
                local: aic("branch.local")?,
            },
            decoder: DecoderParams {
                fuse_proj: conv("decoder.fuse.proj", 1, (0, 0))?,
                fuse_aic: aic("decoder.fuse.aic")?,
                refine4: RefineParams {
                    skip_aic: aic("decoder.refine4.aic")?,
                    proj: conv("decoder.refine4.proj", 1, (0, 0))?,
                },
                refine2: RefineParams {
                    skip_aic: aic("decoder.refine2.aic")?,
                    proj: conv("decoder.refine2.proj", 1, (0, 0))?,
                },
                head: conv("decoder.head", 1, (1, 1))?,
            },
        })
    }
}

/// Which decoder inputs stay live; disabled paths are zero-filled so one
/// parameter set serves every ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationConfig {
    pub use_long: bool,
    pub use_short: bool,
    pub use_prev_mask: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_long: true,
            use_short: true,
            use_prev_mask: true,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.use_long || self.use_short || self.use_prev_mask) {
            return Err(Error::InvalidArgument {
                name: "ablation",
                reason: "at least one of long/short/prev-mask must stay enabled".into(),
            });
        }
        Ok(())
    }

    /// All seven valid switch combinations.
    pub fn all_valid() -> Vec<AblationConfig> {
        let mut out = Vec::new();
        for bits in 1u8..8 {
            out.push(AblationConfig {
                use_long: bits & 1 != 0,
                use_short: bits & 2 != 0,
                use_prev_mask: bits & 4 != 0,
            });
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PipelineConfig {
    pub match_cfg: MatchConfig,
    pub ablation: AblationConfig,
    /// Background threshold for the merge step.
    pub theta: f32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            match_cfg: MatchConfig::default(),
            ablation: AblationConfig::default(),
            theta: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::InvalidArgument {
                name: "theta",
                reason: format!("must be in (0,1), got {}", self.theta),
            });
        }
        Ok(())
    }
}

/// Per-object temporal memory. Reference fields never change after init;
/// previous-frame fields update every frame.
#[derive(Clone, Debug)]
pub struct ObjectState {
    id: u8,
    ref_global: Arc<FeatureMap>,
    ref_gate: GateMask,
    prev_local: Arc<FeatureMap>,
    /// Soft mask at original (uncropped) resolution, values in [0,1].
    prev_soft_mask: Tensor,
}

impl ObjectState {
    pub fn id(&self) -> u8 {
        self.id
    }

    pub fn ref_gate(&self) -> &GateMask {
        &self.ref_gate
    }

    pub fn ref_global(&self) -> &FeatureMap {
        &self.ref_global
    }

    pub fn prev_soft_mask(&self) -> &Tensor {
        &self.prev_soft_mask
    }
}

#[derive(Clone, Debug)]
pub struct PropagationState {
    objects: Vec<ObjectState>,
    crop: CropRecord,
    frame_index: usize,
}

impl PropagationState {
    pub fn objects(&self) -> &[ObjectState] {
        &self.objects
    }

    pub fn object_ids(&self) -> Vec<u8> {
        self.objects.iter().map(|o| o.id).collect()
    }

    pub fn crop(&self) -> &CropRecord {
        &self.crop
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }
}

/// Timing and invocation counts for one processed frame.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct StageCounters {
    pub shared_invocations: u64,
    pub object_invocations: u64,
    pub shared_ms: f64,
    pub object_ms: f64,
    pub total_ms: f64,
}

/// Aggregate over a run, keeping the per-frame records.
#[derive(Clone, Debug, Default, Serialize)]
pub struct RunCounters {
    pub frames: u64,
    pub shared_invocations: u64,
    pub object_invocations: u64,
    pub shared_ms: f64,
    pub object_ms: f64,
    pub total_ms: f64,
    pub per_frame: Vec<StageCounters>,
}

impl RunCounters {
    pub fn push(&mut self, c: StageCounters) {
        self.frames += 1;
        self.shared_invocations += c.shared_invocations;
        self.object_invocations += c.object_invocations;
        self.shared_ms += c.shared_ms;
        self.object_ms += c.object_ms;
        self.total_ms += c.total_ms;
        self.per_frame.push(c);
    }
}

fn gate_from_pixel_mask(mask: &Tensor) -> Result<GateMask> {
    let (padded, _) = pad_to_multiple(mask)?;
    downsample_mask(&padded, crate::encoder::PAD_MULTIPLE)
}

fn check_decoder_compat(model: &ModelParams, cfg: &PipelineConfig) -> Result<()> {
    let fuse_in = model.decoder.fuse_proj.kernel().shape()[1];
    let feat_c = crate::encoder::CHANNELS[2];
    let want = 4 * cfg.match_cfg.n + 1 + feat_c;
    if fuse_in != want {
        return Err(Error::shape_mismatch(
            "similarity channels vs decoder fuse input",
            [want],
            [fuse_in],
        ));
    }
    Ok(())
}

/// Encode frame 0 and seed the per-object state from its label map.
pub fn init_session(
    frame0: &Tensor,
    labels0: &LabelMap,
    model: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<PropagationState> {
    cfg.validate()?;
    check_decoder_compat(model, cfg)?;
    let (_, h, w) = frame0.dims3()?;
    if (labels0.width(), labels0.height()) != (w, h) {
        return Err(Error::shape_mismatch(
            "frame vs label map extents",
            [h, w],
            [labels0.height(), labels0.width()],
        ));
    }
    let ids = labels0.object_ids();
    if ids.is_empty() {
        return Err(Error::EmptyInput("label map has no nonzero objects"));
    }

    let (padded, crop) = pad_to_multiple(frame0)?;
    let feats = encode(&padded, &model.encoder)?;
    let match_feats = branch(&feats, &model.branch)?;
    let ref_global = Arc::new(match_feats.global_feat);
    let prev_local = Arc::new(match_feats.local_feat);

    let mut objects = Vec::with_capacity(ids.len());
    for id in ids {
        let pixel_mask = labels0.to_gate_tensor(id);
        let ref_gate = gate_from_pixel_mask(&pixel_mask)?;
        objects.push(ObjectState {
            id,
            ref_global: Arc::clone(&ref_global),
            ref_gate,
            prev_local: Arc::clone(&prev_local),
            prev_soft_mask: pixel_mask,
        });
    }
    Ok(PropagationState {
        objects,
        crop,
        frame_index: 0,
    })
}

struct SharedStage {
    feats: crate::encoder::EncoderFeatures,
    match_feats: MatchFeatures,
}

fn shared_stage(frame: &Tensor, model: &ModelParams) -> Result<SharedStage> {
    let (padded, _) = pad_to_multiple(frame)?;
    let feats = encode(&padded, &model.encoder)?;
    let match_feats = branch(&feats, &model.branch)?;
    Ok(SharedStage { feats, match_feats })
}

/// Segment one frame: shared stage once, per-object stage K times, merge.
pub fn segment_frame(
    state: &mut PropagationState,
    frame: &Tensor,
    model: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<(LabelMap, Vec<(u8, ProbabilityMask)>, StageCounters)> {
    cfg.validate()?;
    let (c, h, w) = frame.dims3()?;
    if c != 3 || (w, h) != (state.crop.width, state.crop.height) {
        return Err(Error::shape_mismatch(
            "frame extents drifted from frame 0",
            [c, h, w],
            [3, state.crop.height, state.crop.width],
        ));
    }

    let frame_start = Instant::now();
    let shared = shared_stage(frame, model)?;
    let shared_ms = frame_start.elapsed().as_secs_f64() * 1e3;

    let (h8, w8) = shared.match_feats.local_feat.extents();
    let n = cfg.match_cfg.n;
    let cur_global = &shared.match_feats.global_feat;
    let cur_local = &shared.match_feats.local_feat;

    let objects_start = Instant::now();
    let mut prob_maps: Vec<(u8, ProbabilityMask)> = Vec::with_capacity(state.objects.len());
    for obj in &state.objects {
        let needs_gate = cfg.ablation.use_short || cfg.ablation.use_prev_mask;
        let prev_gate = if needs_gate {
            Some(gate_from_pixel_mask(&obj.prev_soft_mask)?)
        } else {
            None
        };

        let (g_fg, g_bg) = if cfg.ablation.use_long {
            long_term_match_pair(cur_global, &obj.ref_global, &obj.ref_gate, &cfg.match_cfg)?
        } else {
            (SimilarityMap::zeros(n, h8, w8)?, SimilarityMap::zeros(n, h8, w8)?)
        };
        let (l_fg, l_bg) = if cfg.ablation.use_short {
            let gate = prev_gate.as_ref().expect("gate computed for short path");
            short_term_match_pair(cur_local, &obj.prev_local, gate, &cfg.match_cfg)?
        } else {
            (SimilarityMap::zeros(n, h8, w8)?, SimilarityMap::zeros(n, h8, w8)?)
        };
        let mask_input = if cfg.ablation.use_prev_mask {
            prev_gate.clone().expect("gate computed for mask path")
        } else {
            GateMask::new(Tensor::zeros(&[1, h8, w8])?)?
        };

        let inp = DecoderInput {
            g_fg: &g_fg,
            g_bg: &g_bg,
            l_fg: &l_fg,
            l_bg: &l_bg,
            prev_mask_s8: &mask_input,
            feat_s8: &shared.feats.s8,
        };
        let prob = decode(&inp, &shared.feats, &state.crop, &model.decoder)?;
        prob_maps.push((obj.id, prob));
    }
    let object_ms = objects_start.elapsed().as_secs_f64() * 1e3;

    let pairs: Vec<(u8, &ProbabilityMask)> = prob_maps.iter().map(|(id, p)| (*id, p)).collect();
    let labels = merge_objects(&pairs, cfg.theta)?;

    // propagate: current local features and soft masks become "previous"
    let new_prev = Arc::new(shared.match_feats.local_feat.clone());
    for (obj, (_, prob)) in state.objects.iter_mut().zip(&prob_maps) {
        obj.prev_local = Arc::clone(&new_prev);
        obj.prev_soft_mask = prob.values().clone();
    }
    state.frame_index += 1;

    let counters = StageCounters {
        shared_invocations: 1,
        object_invocations: state.objects.len() as u64,
        shared_ms,
        object_ms,
        total_ms: frame_start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((labels, prob_maps, counters))
}

/// Per pixel: the object with the largest probability wins if it reaches
/// `theta`, otherwise background; ties go to the lowest object id.
pub fn merge_objects(maps: &[(u8, &ProbabilityMask)], theta: f32) -> Result<LabelMap> {
    if maps.is_empty() {
        return Err(Error::EmptyInput("merge_objects needs at least one map"));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidArgument {
            name: "theta",
            reason: format!("must be in (0,1), got {theta}"),
        });
    }
    let mut ordered: Vec<(u8, &ProbabilityMask)> = maps.to_vec();
    ordered.sort_by_key(|(id, _)| *id);
    let (h, w) = ordered[0].1.extents();
    for (id, m) in &ordered {
        if m.extents() != (h, w) {
            return Err(Error::shape_mismatch(
                format!("merge map extents for object {id}"),
                [m.extents().0, m.extents().1],
                [h, w],
            ));
        }
    }
    let mut ids = vec![0u8; h * w];
    for p in 0..h * w {
        let mut best_id = 0u8;
        let mut best = f32::NEG_INFINITY;
        for (id, m) in &ordered {
            let v = m.values().data()[p];
            if v > best {
                best = v;
                best_id = *id;
            }
        }
        ids[p] = if best >= theta { best_id } else { 0 };
    }
    LabelMap::new(w, h, ids)
}

/// Run a whole clip: frame 0 echoes the given labels, later frames are
/// segmented in order. `frame_at(t)` supplies frames lazily.
pub fn run_sequence<F>(
    frame_count: usize,
    mut frame_at: F,
    labels0: &LabelMap,
    model: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<(Vec<LabelMap>, RunCounters)>
where
    F: FnMut(usize) -> Result<Tensor>,
{
    if frame_count == 0 {
        return Err(Error::EmptyInput("sequence has no frames"));
    }
    let frame0 = frame_at(0)?;
    let mut state = init_session(&frame0, labels0, model, cfg)?;
    let mut labels = Vec::with_capacity(frame_count);
    labels.push(labels0.clone());
    let mut counters = RunCounters::default();
    for t in 1..frame_count {
        let frame = frame_at(t)?;
        let (map, _, frame_counters) = segment_frame(&mut state, &frame, model, cfg)?;
        labels.push(map);
        counters.push(frame_counters);
    }
    Ok((labels, counters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::weights;
    use crate::synthetic;

    fn model(seed: u64) -> ModelParams {
        ModelParams::from_container(&weights::seeded_init(seed).unwrap()).unwrap()
    }

    fn prob(values: Tensor) -> ProbabilityMask {
        ProbabilityMask::new(values).unwrap()
    }

    #[test]
    fn merge_single_object_above_theta() {
        let p = prob(Tensor::full(&[1, 2, 3], 0.9).unwrap());
        let m = merge_objects(&[(4, &p)], 0.5).unwrap();
        assert!(m.ids().iter().all(|&v| v == 4));
    }

    #[test]
    fn merge_all_below_theta_is_background() {
        let p1 = prob(Tensor::full(&[1, 2, 2], 0.2).unwrap());
        let p2 = prob(Tensor::full(&[1, 2, 2], 0.4).unwrap());
        let m = merge_objects(&[(1, &p1), (2, &p2)], 0.5).unwrap();
        assert!(m.ids().iter().all(|&v| v == 0));
    }

    #[test]
    fn merge_tie_goes_to_lowest_id() {
        let p1 = prob(Tensor::full(&[1, 1, 1], 0.7).unwrap());
        let p2 = prob(Tensor::full(&[1, 1, 1], 0.7).unwrap());
        // pass them out of order to exercise the internal sort
        let m = merge_objects(&[(2, &p2), (1, &p1)], 0.5).unwrap();
        assert_eq!(m.ids(), &[1]);
    }

    #[test]
    fn merge_rejects_empty_and_bad_theta() {
        assert!(merge_objects(&[], 0.5).is_err());
        let p = prob(Tensor::full(&[1, 1, 1], 0.7).unwrap());
        assert!(merge_objects(&[(1, &p)], 0.0).is_err());
        assert!(merge_objects(&[(1, &p)], 1.0).is_err());
    }

    #[test]
    fn init_rejects_bad_inputs() {
        let model = model(50);
        let cfg = PipelineConfig::default();
        let frame = Tensor::full(&[3, 32, 32], 0.5).unwrap();

        let empty = LabelMap::new(32, 32, vec![0; 32 * 32]).unwrap();
        assert!(init_session(&frame, &empty, &model, &cfg).is_err());

        let wrong = LabelMap::new(16, 32, vec![1; 16 * 32]).unwrap();
        assert!(init_session(&frame, &wrong, &model, &cfg).is_err());
    }

    #[test]
    fn init_preserves_sparse_ids() {
        let model = model(51);
        let cfg = PipelineConfig::default();
        let frame = Tensor::full(&[3, 32, 32], 0.5).unwrap();
        let mut ids = vec![0u8; 32 * 32];
        ids[5] = 1;
        ids[100] = 3;
        let labels = LabelMap::new(32, 32, ids).unwrap();
        let state = init_session(&frame, &labels, &model, &cfg).unwrap();
        assert_eq!(state.object_ids(), vec![1, 3]);
    }

    #[test]
    fn segment_frame_rejects_extent_drift() {
        let model = model(52);
        let cfg = PipelineConfig::default();
        let clip = synthetic::clip(32, 24, 2, 1, 9).unwrap();
        let mut state = init_session(&clip.frames[0], &clip.labels0, &model, &cfg).unwrap();
        let other = Tensor::full(&[3, 24, 40], 0.5).unwrap();
        assert!(segment_frame(&mut state, &other, &model, &cfg).is_err());
    }

    #[test]
    fn run_sequence_single_frame_echoes_labels() {
        let model = model(53);
        let cfg = PipelineConfig::default();
        let clip = synthetic::clip(32, 24, 1, 1, 10).unwrap();
        let (labels, counters) =
            run_sequence(1, |t| Ok(clip.frames[t].clone()), &clip.labels0, &model, &cfg)
                .unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0], clip.labels0);
        assert_eq!(counters.frames, 0);
    }

    #[test]
    fn run_sequence_is_deterministic_and_counts_stages() {
        let model = model(54);
        let cfg = PipelineConfig::default();
        let clip = synthetic::clip(48, 32, 3, 2, 11).unwrap();
        let run = || {
            run_sequence(3, |t| Ok(clip.frames[t].clone()), &clip.labels0, &model, &cfg)
                .unwrap()
        };
        let (labels_a, counters_a) = run();
        let (labels_b, _) = run();
        assert_eq!(labels_a, labels_b);
        assert_eq!(counters_a.frames, 2);
        assert_eq!(counters_a.shared_invocations, 2);
        assert_eq!(counters_a.object_invocations, 4); // 2 objects × 2 frames

        // ids stay within the first-frame annotation
        for m in &labels_a {
            assert!(m.ids().iter().all(|&v| v <= 2));
        }

        // state invariants: soft masks stay in [0,1]
        let mut state = init_session(&clip.frames[0], &clip.labels0, &model, &cfg).unwrap();
        let ref_gate_before: Vec<_> = state
            .objects()
            .iter()
            .map(|o| o.ref_gate().values().clone())
            .collect();
        for t in 1..3 {
            segment_frame(&mut state, &clip.frames[t], &model, &cfg).unwrap();
        }
        for (obj, before) in state.objects().iter().zip(&ref_gate_before) {
            assert_eq!(obj.ref_gate().values(), before);
            assert!(obj
                .prev_soft_mask()
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn ablation_switches_run_end_to_end() {
        let model = model(55);
        let clip = synthetic::clip(40, 24, 2, 1, 12).unwrap();
        for ablation in AblationConfig::all_valid() {
            let cfg = PipelineConfig {
                ablation,
                ..PipelineConfig::default()
            };
            let (labels, _) =
                run_sequence(2, |t| Ok(clip.frames[t].clone()), &clip.labels0, &model, &cfg)
                    .unwrap();
            assert_eq!(labels[1].width(), 40);
            assert_eq!(labels[1].height(), 24);
        }
        let all_off = AblationConfig {
            use_long: false,
            use_short: false,
            use_prev_mask: false,
        };
        assert!(all_off.validate().is_err());
    }
}
