use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Nearest-neighbour upsampling of `[C, h, w]` to `[C, height, width]` by
/// integer factors.
pub fn upsample_nearest(input: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    input.expect_ndim(3, "upsample_nearest")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if height < h || width < w || !height.is_multiple_of(h) || !width.is_multiple_of(w) {
        return Err(contract!(
            "upsample_nearest: {h}x{w} does not divide target {height}x{width}"
        ));
    }
    let (fy, fx) = (height / h, width / w);
    let mut out = Tensor::zeros(&[c, height, width]);
    for ch in 0..c {
        let src = input.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..height {
            for x in 0..width {
                dst[y * width + x] = src[(y / fy) * w + x / fx];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_nearest`]: sums each output block back onto its source pixel.
pub fn upsample_nearest_backward(grad_out: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    grad_out.expect_ndim(3, "upsample_nearest_backward")?;
    let (c, height, width) = (grad_out.shape()[0], grad_out.shape()[1], grad_out.shape()[2]);
    if height % h != 0 || width % w != 0 {
        return Err(contract!(
            "upsample_nearest_backward: {h}x{w} does not divide {height}x{width}"
        ));
    }
    let (fy, fx) = (height / h, width / w);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let src = grad_out.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..height {
            for x in 0..width {
                dst[(y / fy) * w + x / fx] += src[y * width + x];
            }
        }
    }
    Ok(out)
}

/// 2x2 average pooling; spatial sizes must be even.
pub fn avg_pool2(input: &Tensor) -> Result<Tensor> {
    input.expect_ndim(3, "avg_pool2")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(contract!("avg_pool2: spatial size {h}x{w} is not even"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let src = input.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                let a = 2 * y * w + 2 * x;
                dst[y * ow + x] = 0.25 * (src[a] + src[a + 1] + src[a + w] + src[a + w + 1]);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward(grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_ndim(3, "avg_pool2_backward")?;
    let (c, oh, ow) = (grad_out.shape()[0], grad_out.shape()[1], grad_out.shape()[2]);
    let w = 2 * ow;
    let mut out = Tensor::zeros(&[c, 2 * oh, w]);
    for ch in 0..c {
        let src = grad_out.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * src[y * ow + x];
                let a = 2 * y * w + 2 * x;
                dst[a] = g;
                dst[a + 1] = g;
                dst[a + w] = g;
                dst[a + w + 1] = g;
            }
        }
    }
    Ok(out)
}
