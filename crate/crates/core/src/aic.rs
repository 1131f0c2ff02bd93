//! 2D anisotropic convolution block.
//!
//! Each spatial axis gets its own pass: three 1D kernels of sizes 1/3/5
//! run along the axis (zero padding preserves the extent) and a 1×1
//! modulation convolution picks per-position soft blend weights via a
//! channel softmax. The width pass runs first, then the height pass.

use crate::error::{Error, Result};
use crate::numerics::{conv2d_parts, softmax_channels, Tensor};

/// The 1D kernel sizes blended by one pass.
pub const KERNEL_SIZES: [usize; 3] = [1, 3, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Width,
    Height,
}

/// One axis pass: three 1D kernels, a shared bias, and the modulation conv.
#[derive(Clone, Debug)]
pub struct AxisPassParams {
    axis: Axis,
    kernels: [Tensor; 3],
    bias: Vec<f32>,
    select_weight: Tensor,
    select_bias: Vec<f32>,
}

impl AxisPassParams {
    /// Kernels must be rank-4 with extent `KERNEL_SIZES[i]` along `axis` and
    /// 1 along the other spatial axis, all sharing C_out×C_in; the
    /// modulation conv maps C_in to 3 selection channels.
    pub fn new(
        axis: Axis,
        kernels: [Tensor; 3],
        bias: Vec<f32>,
        select_weight: Tensor,
        select_bias: Vec<f32>,
    ) -> Result<Self> {
        let (c_out, c_in, _, _) = kernels[0].dims4()?;
        for (i, k) in kernels.iter().enumerate() {
            let (ko, kc, kh, kw) = k.dims4()?;
            let want = match axis {
                Axis::Width => (1, KERNEL_SIZES[i]),
                Axis::Height => (KERNEL_SIZES[i], 1),
            };
            if (ko, kc) != (c_out, c_in) || (kh, kw) != want {
                return Err(Error::shape_mismatch(
                    format!("aic {axis:?} pass kernel {}", KERNEL_SIZES[i]),
                    k.shape(),
                    [c_out, c_in, want.0, want.1],
                ));
            }
        }
        if bias.len() != c_out {
            return Err(Error::shape_mismatch("aic bias", [bias.len()], [c_out]));
        }
        let (sk, sc, sh, sw) = select_weight.dims4()?;
        if (sk, sc, sh, sw) != (3, c_in, 1, 1) {
            return Err(Error::shape_mismatch(
                "aic modulation weight",
                select_weight.shape(),
                [3, c_in, 1, 1],
            ));
        }
        if select_bias.len() != 3 {
            return Err(Error::shape_mismatch(
                "aic modulation bias",
                [select_bias.len()],
                [3usize],
            ));
        }
        Ok(AxisPassParams {
            axis,
            kernels,
            bias,
            select_weight,
            select_bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.kernels[0].shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels[0].shape()[0]
    }

    fn pad_for(&self, size: usize) -> (usize, usize) {
        match self.axis {
            Axis::Width => (0, (size - 1) / 2),
            Axis::Height => ((size - 1) / 2, 0),
        }
    }
}

/// Parameters of one 2D AIC block: a width pass followed by a height pass.
#[derive(Clone, Debug)]
pub struct Aic2dParams {
    width: AxisPassParams,
    height: AxisPassParams,
}

impl Aic2dParams {
    pub fn new(width: AxisPassParams, height: AxisPassParams) -> Result<Self> {
        if width.axis != Axis::Width || height.axis != Axis::Height {
            return Err(Error::InvalidArgument {
                name: "axis",
                reason: "passes must be (width, height) in that order".into(),
            });
        }
        if width.out_channels() != height.in_channels() {
            return Err(Error::shape_mismatch(
                "aic pass channels",
                [width.out_channels()],
                [height.in_channels()],
            ));
        }
        Ok(Aic2dParams { width, height })
    }

    pub fn in_channels(&self) -> usize {
        self.width.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.height.out_channels()
    }
}

/// Per-position soft selection weights of one pass: 3×H×W summing to 1.
pub fn selection_weights(x: &Tensor, pass: &AxisPassParams) -> Result<Tensor> {
    let logits = conv2d_parts(x, &pass.select_weight, &pass.select_bias, 1, (0, 0))?;
    softmax_channels(&logits)
}

fn axis_pass(x: &Tensor, pass: &AxisPassParams) -> Result<Tensor> {
    let sel = selection_weights(x, pass)?;
    let (_, h, w) = x.dims3()?;
    let c_out = pass.out_channels();
    let hw = h * w;

    let mut out = Tensor::zeros(&[c_out, h, w])?;
    let zero_bias = vec![0.0f32; c_out];
    for (s, kernel) in pass.kernels.iter().enumerate() {
        let y = conv2d_parts(x, kernel, &zero_bias, 1, pass.pad_for(KERNEL_SIZES[s]))?;
        let sel_plane = &sel.data()[s * hw..][..hw];
        let dst = out.data_mut();
        for c in 0..c_out {
            let yrow = &y.data()[c * hw..][..hw];
            let orow = &mut dst[c * hw..][..hw];
            for ((o, yv), sv) in orow.iter_mut().zip(yrow).zip(sel_plane) {
                *o += sv * yv;
            }
        }
    }
    let dst = out.data_mut();
    for c in 0..c_out {
        let b = pass.bias[c];
        for o in dst[c * hw..][..hw].iter_mut() {
            *o += b;
        }
    }
    Ok(out)
}

/// Apply the block; spatial extents are preserved.
pub fn aic2d(x: &Tensor, params: &Aic2dParams) -> Result<Tensor> {
    let (c, _, _) = x.dims3()?;
    if c != params.in_channels() {
        return Err(Error::shape_mismatch(
            "aic2d input channels",
            x.shape(),
            [params.in_channels()],
        ));
    }
    let mid = axis_pass(x, &params.width)?;
    axis_pass(&mid, &params.height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn random_pass(rng: &mut ChaCha8Rng, axis: Axis, c_in: usize, c_out: usize) -> AxisPassParams {
        let kshape = |size: usize| match axis {
            Axis::Width => [c_out, c_in, 1, size],
            Axis::Height => [c_out, c_in, size, 1],
        };
        AxisPassParams::new(
            axis,
            [
                random_tensor(rng, &kshape(1)),
                random_tensor(rng, &kshape(3)),
                random_tensor(rng, &kshape(5)),
            ],
            (0..c_out).map(|_| rng.random_range(-0.2f32..0.2)).collect(),
            random_tensor(rng, &[3, c_in, 1, 1]),
            (0..3).map(|_| rng.random_range(-0.2f32..0.2)).collect(),
        )
        .unwrap()
    }

    pub(crate) fn random_params(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Aic2dParams {
        Aic2dParams::new(
            random_pass(rng, Axis::Width, c_in, c_out),
            random_pass(rng, Axis::Height, c_out, c_out),
        )
        .unwrap()
    }

    #[test]
    fn saturated_modulation_collapses_to_size1_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = 4;
        let x = random_tensor(&mut rng, &[c, 6, 7]);

        let saturated = |rng: &mut ChaCha8Rng, axis: Axis| {
            let kshape = |size: usize| match axis {
                Axis::Width => [c, c, 1, size],
                Axis::Height => [c, c, size, 1],
            };
            AxisPassParams::new(
                axis,
                [
                    random_tensor(rng, &kshape(1)),
                    random_tensor(rng, &kshape(3)),
                    random_tensor(rng, &kshape(5)),
                ],
                vec![0.0; c],
                Tensor::zeros(&[3, c, 1, 1]).unwrap(),
                vec![1000.0, -1000.0, -1000.0],
            )
            .unwrap()
        };
        let wpass = saturated(&mut rng, Axis::Width);
        let hpass = saturated(&mut rng, Axis::Height);
        let params = Aic2dParams::new(wpass.clone(), hpass.clone()).unwrap();
        let got = aic2d(&x, &params).unwrap();

        let zero_bias = vec![0.0f32; c];
        let mid = conv2d_parts(&x, &wpass.kernels[0], &zero_bias, 1, (0, 0)).unwrap();
        let want = conv2d_parts(&mid, &hpass.kernels[0], &zero_bias, 1, (0, 0)).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    // Sum-normalized kernels turn a constant input into a constant output.
    // With support wider than one tap, zero padding bends the border rows,
    // so the spread-kernel variant checks the interior only.
    #[test]
    fn constant_input_center_tap_kernels() {
        let c = 3;
        let x = Tensor::full(&[c, 5, 6], 0.4).unwrap();
        let center_tap = |axis: Axis| {
            let kshape = |size: usize| match axis {
                Axis::Width => [c, c, 1, size],
                Axis::Height => [c, c, size, 1],
            };
            let make = |size: usize| {
                let mut t = Tensor::zeros(&kshape(size)).unwrap();
                let center = size / 2;
                let data = t.data_mut();
                for o in 0..c {
                    let base = (o * c + o) * size;
                    data[base + center] = 1.0;
                }
                t
            };
            AxisPassParams::new(
                axis,
                [make(1), make(3), make(5)],
                vec![0.0; c],
                Tensor::full(&[3, c, 1, 1], 0.1).unwrap(),
                vec![0.0; 3],
            )
            .unwrap()
        };
        let params =
            Aic2dParams::new(center_tap(Axis::Width), center_tap(Axis::Height)).unwrap();
        let y = aic2d(&x, &params).unwrap();
        for &v in y.data() {
            assert!((v - 0.4).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn constant_input_spread_kernels_constant_interior() {
        let c = 2;
        let x = Tensor::full(&[c, 9, 9], 1.0).unwrap();
        let spread = |axis: Axis| {
            let kshape = |size: usize| match axis {
                Axis::Width => [c, c, 1, size],
                Axis::Height => [c, c, size, 1],
            };
            // every output channel sums to exactly 1 over (c_in × taps)
            let make = |size: usize| {
                let per = 1.0 / (c * size) as f32;
                Tensor::full(&kshape(size), per).unwrap()
            };
            AxisPassParams::new(
                axis,
                [make(1), make(3), make(5)],
                vec![0.0; c],
                Tensor::full(&[3, c, 1, 1], 0.3).unwrap(),
                vec![0.1, 0.2, 0.3],
            )
            .unwrap()
        };
        let params = Aic2dParams::new(spread(Axis::Width), spread(Axis::Height)).unwrap();
        let y = aic2d(&x, &params).unwrap();
        let (_, h, w) = y.dims3().unwrap();
        for ci in 0..c {
            for i in 2..h - 2 {
                for j in 2..w - 2 {
                    assert!((y.at3(ci, i, j) - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn output_shape_and_selection_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = random_params(&mut rng, 5, 7);
        let x = random_tensor(&mut rng, &[5, 8, 10]);
        let y = aic2d(&x, &params).unwrap();
        assert_eq!(y.shape(), &[7, 8, 10]);
        assert!(y.all_finite());

        let sel = selection_weights(&x, &params.width).unwrap();
        let (s, h, w) = sel.dims3().unwrap();
        assert_eq!(s, 3);
        for p in 0..h * w {
            let sum: f32 = (0..3).map(|si| sel.data()[si * h * w + p]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_inconsistent_kernel_set() {
        let c = 3;
        let bad = AxisPassParams::new(
            Axis::Width,
            [
                Tensor::zeros(&[c, c, 1, 1]).unwrap(),
                Tensor::zeros(&[c, c, 1, 4]).unwrap(), // wrong size
                Tensor::zeros(&[c, c, 1, 5]).unwrap(),
            ],
            vec![0.0; c],
            Tensor::zeros(&[3, c, 1, 1]).unwrap(),
            vec![0.0; 3],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = random_params(&mut rng, 6, 6);
        let x = random_tensor(&mut rng, &[6, 12, 13]);
        assert_eq!(aic2d(&x, &params).unwrap(), aic2d(&x, &params).unwrap());
    }
}
