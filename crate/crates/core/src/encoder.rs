//! Reference feature extractor and the two AIC matching branches.
//!
//! A compact three-stage residual stack stands in for a large pretrained
//! backbone: it keeps the output contract (strides 2/4/8, channels
//! 32/64/128) while staying fast enough to test on a desktop CPU.

use crate::aic::{aic2d, Aic2dParams};
use crate::error::{Error, Result};
use crate::numerics::{
    add, conv2d, l2_normalize_channels, relu, ConvSpec, Tensor, DEFAULT_NORM_EPS,
};

/// Feature extents are tied to 1/8 of the padded frame.
pub const PAD_MULTIPLE: usize = 8;

/// Channel widths at strides 2/4/8.
pub const CHANNELS: [usize; 3] = [32, 64, 128];

/// Per-channel normalization applied to [0,1] RGB before encoding.
pub const INPUT_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Original (pre-padding) frame extents; inverts `pad_to_multiple`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub width: usize,
    pub height: usize,
}

/// C×H×W features at a named stride relative to the padded frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
    stride: usize,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, stride: usize) -> Result<Self> {
        tensor.dims3()?;
        Ok(FeatureMap { tensor, stride })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    /// Spatial extents as (H, W).
    pub fn extents(&self) -> (usize, usize) {
        (self.tensor.shape()[1], self.tensor.shape()[2])
    }
}

/// Multi-stride encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderFeatures {
    pub s2: FeatureMap,
    pub s4: FeatureMap,
    pub s8: FeatureMap,
}

/// L2-normalized stride-8 features for the two matching paths.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchFeatures {
    pub global_feat: FeatureMap,
    pub local_feat: FeatureMap,
}

/// Encoder weights: one strided conv per stage plus residual blocks at
/// strides 4 and 8.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub down2: ConvSpec,
    pub down4: ConvSpec,
    pub res4a: ConvSpec,
    pub res4b: ConvSpec,
    pub down8: ConvSpec,
    pub res8a: ConvSpec,
    pub res8b: ConvSpec,
}

/// The two AIC branches producing global and local matching features.
#[derive(Clone, Debug)]
pub struct BranchParams {
    pub global: Aic2dParams,
    pub local: Aic2dParams,
}

/// Zero-pad right/bottom so both extents are multiples of 8.
pub fn pad_to_multiple(frame: &Tensor) -> Result<(Tensor, CropRecord)> {
    let (c, h, w) = frame.dims3()?;
    if h < PAD_MULTIPLE || w < PAD_MULTIPLE {
        return Err(Error::InvalidShape(format!(
            "frame must be at least {PAD_MULTIPLE}x{PAD_MULTIPLE}, got {h}x{w}"
        )));
    }
    let crop = CropRecord {
        width: w,
        height: h,
    };
    let ph = h.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let pw = w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    if (ph, pw) == (h, w) {
        return Ok((frame.clone(), crop));
    }
    let mut out = Tensor::zeros(&[c, ph, pw])?;
    let src = frame.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for y in 0..h {
            let s = &src[(ci * h + y) * w..][..w];
            let d = &mut dst[(ci * ph + y) * pw..][..w];
            d.copy_from_slice(s);
        }
    }
    Ok((out, crop))
}

/// Undo `pad_to_multiple` on a rank-3 tensor at pixel resolution.
pub fn crop_to_record(x: &Tensor, crop: &CropRecord) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if crop.height > h || crop.width > w {
        return Err(Error::shape_mismatch(
            "crop record larger than tensor",
            [crop.height, crop.width],
            [h, w],
        ));
    }
    if (crop.height, crop.width) == (h, w) {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros(&[c, crop.height, crop.width])?;
    let src = x.data();
    let dst = out.data_mut();
    for ci in 0..c {
        for y in 0..crop.height {
            let s = &src[(ci * h + y) * w..][..crop.width];
            let d = &mut dst[(ci * crop.height + y) * crop.width..][..crop.width];
            d.copy_from_slice(s);
        }
    }
    Ok(out)
}

fn residual(x: &Tensor, a: &ConvSpec, b: &ConvSpec) -> Result<Tensor> {
    let y = conv2d(&relu(&conv2d(x, a)?), b)?;
    Ok(relu(&add(x, &y)?))
}

/// Extract stride-2/4/8 features from a padded [0,1] RGB frame.
///
/// Normalization (`INPUT_MEAN`/`INPUT_STD`) is applied internally, so the
/// output is a pure function of (frame, weights).
pub fn encode(frame: &Tensor, params: &EncoderParams) -> Result<EncoderFeatures> {
    let (c, h, w) = frame.dims3()?;
    if c != 3 {
        return Err(Error::InvalidShape(format!(
            "expected an RGB frame (3×H×W), got {:?}",
            frame.shape()
        )));
    }
    if h % PAD_MULTIPLE != 0 || w % PAD_MULTIPLE != 0 {
        return Err(Error::InvalidShape(format!(
            "frame extents must be padded to multiples of {PAD_MULTIPLE}, got {h}x{w}"
        )));
    }

    let mut norm = frame.clone();
    {
        let data = norm.data_mut();
        let hw = h * w;
        for ci in 0..3 {
            let (mean, inv_std) = (INPUT_MEAN[ci], 1.0 / INPUT_STD[ci]);
            for v in data[ci * hw..][..hw].iter_mut() {
                *v = (*v - mean) * inv_std;
            }
        }
    }

    let s2 = relu(&conv2d(&norm, &params.down2)?);
    let s4 = residual(&relu(&conv2d(&s2, &params.down4)?), &params.res4a, &params.res4b)?;
    let s8 = residual(&relu(&conv2d(&s4, &params.down8)?), &params.res8a, &params.res8b)?;

    Ok(EncoderFeatures {
        s2: FeatureMap::new(s2, 2)?,
        s4: FeatureMap::new(s4, 4)?,
        s8: FeatureMap::new(s8, 8)?,
    })
}

/// Run the two AIC branches on the stride-8 features and L2-normalize each
/// spatial position, so downstream dot products are cosine similarities.
pub fn branch(features: &EncoderFeatures, params: &BranchParams) -> Result<MatchFeatures> {
    branch_with_normalization(features, params, true)
}

/// `branch` with the normalization switch exposed: raw dot-product scores
/// instead of cosine when `normalize` is false.
pub fn branch_with_normalization(
    features: &EncoderFeatures,
    params: &BranchParams,
    normalize: bool,
) -> Result<MatchFeatures> {
    let run = |aic: &Aic2dParams| -> Result<FeatureMap> {
        let y = aic2d(features.s8.tensor(), aic)?;
        let y = if normalize {
            l2_normalize_channels(&y, DEFAULT_NORM_EPS)?
        } else {
            y
        };
        FeatureMap::new(y, 8)
    };
    Ok(MatchFeatures {
        global_feat: run(&params.global)?,
        local_feat: run(&params.local)?,
    })
}
