//! Decoder: fuse the four similarity maps, the previous mask and the
//! stride-8 features, then upsample through two refine stages and a 3×3
//! segmentation head working at half resolution.

use crate::aic::{aic2d, Aic2dParams};
use crate::encoder::{crop_to_record, CropRecord, EncoderFeatures, FeatureMap};
use crate::error::{Error, Result};
use crate::matching::{GateMask, SimilarityMap};
use crate::numerics::{add, bilinear_resize, concat_channels, conv2d, relu, sigmoid, ConvSpec, Tensor};

/// Probabilities are kept strictly inside (0,1).
pub const PROB_CLAMP: f32 = 1e-7;

/// Everything the decoder consumes at stride 8.
#[derive(Clone, Copy)]
pub struct DecoderInput<'a> {
    pub g_fg: &'a SimilarityMap,
    pub g_bg: &'a SimilarityMap,
    pub l_fg: &'a SimilarityMap,
    pub l_bg: &'a SimilarityMap,
    pub prev_mask_s8: &'a GateMask,
    pub feat_s8: &'a FeatureMap,
}

impl DecoderInput<'_> {
    /// Check shared extents and return (channels, H, W) of the concatenation.
    pub fn validate(&self) -> Result<(usize, usize, usize)> {
        let (h, w) = {
            let s = self.feat_s8.tensor().shape();
            (s[1], s[2])
        };
        let maps = [self.g_fg, self.g_bg, self.l_fg, self.l_bg];
        let n0 = maps[0].channels();
        let mut channels = 0usize;
        for m in maps {
            let s = m.values().shape();
            if (s[1], s[2]) != (h, w) {
                return Err(Error::shape_mismatch(
                    "decoder similarity extents",
                    m.values().shape(),
                    [n0, h, w],
                ));
            }
            if m.channels() != n0 {
                return Err(Error::shape_mismatch(
                    "decoder similarity channels",
                    [m.channels()],
                    [n0],
                ));
            }
            channels += m.channels();
        }
        if self.prev_mask_s8.extents() != (h, w) {
            return Err(Error::shape_mismatch(
                "decoder previous mask extents",
                self.prev_mask_s8.values().shape(),
                [1, h, w],
            ));
        }
        channels += 1 + self.feat_s8.channels();
        Ok((channels, h, w))
    }
}

/// One refine stage: AIC on the skip path, 1×1 projection plus ×2 bilinear
/// upsampling on the coarse path, elementwise sum.
#[derive(Clone, Debug)]
pub struct RefineParams {
    pub skip_aic: Aic2dParams,
    pub proj: ConvSpec,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub fuse_proj: ConvSpec,
    pub fuse_aic: Aic2dParams,
    pub refine4: RefineParams,
    pub refine2: RefineParams,
    pub head: ConvSpec,
}

/// Full-resolution per-object probability map, values strictly in (0,1).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMask {
    values: Tensor,
}

impl ProbabilityMask {
    /// Wrap a 1×H×W tensor of probabilities strictly inside (0,1).
    pub fn new(values: Tensor) -> Result<Self> {
        let (c, _, _) = values.dims3()?;
        if c != 1 {
            return Err(Error::InvalidShape(format!(
                "probability mask must be 1×H×W, got {:?}",
                values.shape()
            )));
        }
        if values.data().iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::InvalidArgument {
                name: "probabilities",
                reason: "values must lie strictly in (0,1)".into(),
            });
        }
        Ok(ProbabilityMask { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

/// Concatenate the decoder inputs, project to the working width with a 1×1
/// conv, and mix spatially with one AIC block.
pub fn fuse(inp: &DecoderInput, params: &DecoderParams) -> Result<Tensor> {
    let (channels, _, _) = inp.validate()?;
    let expected = params.fuse_proj.kernel().shape()[1];
    if channels != expected {
        return Err(Error::shape_mismatch(
            "decoder fuse channels",
            [channels],
            [expected],
        ));
    }
    let stacked = concat_channels(&[
        inp.g_fg.values(),
        inp.g_bg.values(),
        inp.l_fg.values(),
        inp.l_bg.values(),
        inp.prev_mask_s8.values(),
        inp.feat_s8.tensor(),
    ])?;
    let projected = relu(&conv2d(&stacked, &params.fuse_proj)?);
    aic2d(&projected, &params.fuse_aic)
}

/// skip is at stride s/2, prev at stride s; output lands at stride s/2 with
/// the skip path's channel count.
pub fn refine(skip: &FeatureMap, prev: &Tensor, params: &RefineParams) -> Result<Tensor> {
    let (sh, sw) = skip.extents();
    let (_, ph, pw) = prev.dims3()?;
    if (sh, sw) != (2 * ph, 2 * pw) {
        return Err(Error::shape_mismatch(
            "refine extents (skip must be 2x prev)",
            [sh, sw],
            [2 * ph, 2 * pw],
        ));
    }
    let skip_path = aic2d(skip.tensor(), &params.skip_aic)?;
    let projected = conv2d(prev, &params.proj)?;
    let upsampled = bilinear_resize(&projected, 2.0)?;
    add(&skip_path, &upsampled)
}

/// 3×3 conv to one channel, sigmoid, ×2 bilinear to pixel resolution,
/// crop away the padding.
pub fn segment_head(x: &Tensor, crop: &CropRecord, head: &ConvSpec) -> Result<ProbabilityMask> {
    let logits = conv2d(x, head)?;
    let (c, h, w) = logits.dims3()?;
    if c != 1 {
        return Err(Error::shape_mismatch("segment head output", [c], [1usize]));
    }
    if crop.height > 2 * h || crop.width > 2 * w {
        return Err(Error::shape_mismatch(
            "segment head crop record",
            [crop.height, crop.width],
            [2 * h, 2 * w],
        ));
    }
    let probs = sigmoid(&logits).map(|v| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP));
    let full = bilinear_resize(&probs, 2.0)?;
    let cropped = crop_to_record(&full, crop)?;
    Ok(ProbabilityMask { values: cropped })
}

/// fuse → refine(s4) → refine(s2) → segment head.
pub fn decode(
    inp: &DecoderInput,
    feats: &EncoderFeatures,
    crop: &CropRecord,
    params: &DecoderParams,
) -> Result<ProbabilityMask> {
    let fused = fuse(inp, params)?;
    let r4 = refine(&feats.s4, &fused, &params.refine4)?;
    let r2 = refine(&feats.s2, &r4, &params.refine2)?;
    segment_head(&r2, crop, &params.head)
}
