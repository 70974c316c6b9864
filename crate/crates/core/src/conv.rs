//! Two-layer convolutional front end for square single-channel images.
//!
//! conv(1->8, 3x3, valid) -> ReLU -> maxpool 2 -> conv(8->16, 3x3, valid) -> ReLU -> maxpool 2 -> flatten.
//!
//! Feature maps are stored as `positions x channels` with `position = y * side + x`;
//! the flattened output follows the same position-major, channel-minor order.
//! Filters are rows of `out_channels x (3 * 3 * in_channels)` with columns ordered
//! `(ky, kx, in_channel)`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const CONV1_CHANNELS: usize = 8;
pub const CONV2_CHANNELS: usize = 16;
const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub side: usize,
    /// `8 x 9`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `16 x 72`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    side: usize,
    conv1: usize,
    pool1: usize,
    conv2: usize,
    pool2: usize,
}

fn geometry(side: usize) -> Result<Geometry> {
    let conv1 = side.checked_sub(KERNEL - 1).unwrap_or(0);
    let pool1 = conv1 / 2;
    let conv2 = pool1.checked_sub(KERNEL - 1).unwrap_or(0);
    let pool2 = conv2 / 2;
    if pool2 == 0 {
        return Err(Error::Config(format!(
            "image side {side} too small for the two-layer conv extractor (need at least 10)"
        )));
    }
    Ok(Geometry {
        side,
        conv1,
        pool1,
        conv2,
        pool2,
    })
}

/// Flattened output width for an input of `side x side`.
pub fn output_dim(side: usize) -> Result<usize> {
    let g = geometry(side)?;
    Ok(g.pool2 * g.pool2 * CONV2_CHANNELS)
}

/// Side length of a square image with `d` pixels, if `d` is a perfect square.
pub fn square_side(d: usize) -> Option<usize> {
    let s = (d as f64).sqrt().round() as usize;
    (s * s == d).then_some(s)
}

impl ConvParams {
    pub fn zeros(side: usize) -> Result<Self> {
        geometry(side)?;
        Ok(Self {
            side,
            w1: Array2::zeros((CONV1_CHANNELS, KERNEL * KERNEL)),
            b1: Array1::zeros(CONV1_CHANNELS),
            w2: Array2::zeros((CONV2_CHANNELS, KERNEL * KERNEL * CONV1_CHANNELS)),
            b2: Array1::zeros(CONV2_CHANNELS),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.side * self.side
    }

    pub fn output_dim(&self) -> usize {
        output_dim(self.side).expect("validated at construction")
    }
}

/// `map` is `side*side x channels`; returns `out*out x 9*channels`.
fn im2col(map: ArrayView2<'_, f64>, side: usize) -> Array2<f64> {
    let channels = map.ncols();
    let out = side - (KERNEL - 1);
    let mut cols = Array2::zeros((out * out, KERNEL * KERNEL * channels));
    for y in 0..out {
        for x in 0..out {
            let mut row = cols.row_mut(y * out + x);
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let src = map.row((y + ky) * side + x + kx);
                    let off = (ky * KERNEL + kx) * channels;
                    row.slice_mut(s![off..off + channels]).assign(&src);
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col`].
fn col2im(dcols: ArrayView2<'_, f64>, side: usize, channels: usize) -> Array2<f64> {
    let out = side - (KERNEL - 1);
    let mut map = Array2::zeros((side * side, channels));
    for y in 0..out {
        for x in 0..out {
            let row = dcols.row(y * out + x);
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let off = (ky * KERNEL + kx) * channels;
                    let mut dst = map.row_mut((y + ky) * side + x + kx);
                    dst += &row.slice(s![off..off + channels]);
                }
            }
        }
    }
    map
}

/// 2x2 stride-2 max pooling; returns pooled map and the argmax input position per output cell.
fn maxpool(map: ArrayView2<'_, f64>, side: usize) -> (Array2<f64>, Array2<usize>) {
    let channels = map.ncols();
    let out = side / 2;
    let mut pooled = Array2::zeros((out * out, channels));
    let mut arg = Array2::zeros((out * out, channels));
    for py in 0..out {
        for px in 0..out {
            let o = py * out + px;
            for c in 0..channels {
                let mut best = f64::NEG_INFINITY;
                let mut best_pos = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let pos = (2 * py + dy) * side + 2 * px + dx;
                        let v = map[[pos, c]];
                        if v > best {
                            best = v;
                            best_pos = pos;
                        }
                    }
                }
                pooled[[o, c]] = best;
                arg[[o, c]] = best_pos;
            }
        }
    }
    (pooled, arg)
}

fn maxpool_backward(dpooled: ArrayView2<'_, f64>, arg: &Array2<usize>, side: usize) -> Array2<f64> {
    let channels = dpooled.ncols();
    let mut dmap = Array2::zeros((side * side, channels));
    for ((o, c), &pos) in arg.indexed_iter() {
        dmap[[pos, c]] += dpooled[[o, c]];
    }
    dmap
}

#[derive(Clone, Debug)]
pub(crate) struct ConvCache {
    cols1: Array2<f64>,
    relu1: Array2<f64>,
    arg1: Array2<usize>,
    cols2: Array2<f64>,
    relu2: Array2<f64>,
    arg2: Array2<usize>,
}

pub(crate) fn forward_instance(image: ArrayView1<'_, f64>, params: &ConvParams) -> (Array1<f64>, ConvCache) {
    let g = geometry(params.side).expect("validated at construction");
    let map0 = image.into_shape_with_order((g.side * g.side, 1)).expect("image length checked by caller");
    let cols1 = im2col(map0, g.side);
    let mut relu1 = cols1.dot(&params.w1.t());
    relu1 += &params.b1;
    relu1.mapv_inplace(|v| v.max(0.0));
    let (pool1, arg1) = maxpool(relu1.view(), g.conv1);

    let cols2 = im2col(pool1.view(), g.pool1);
    let mut relu2 = cols2.dot(&params.w2.t());
    relu2 += &params.b2;
    relu2.mapv_inplace(|v| v.max(0.0));
    let (pool2, arg2) = maxpool(relu2.view(), g.conv2);

    let flat = pool2.into_shape_with_order(g.pool2 * g.pool2 * CONV2_CHANNELS).expect("contiguous");
    (
        flat,
        ConvCache {
            cols1,
            relu1,
            arg1,
            cols2,
            relu2,
            arg2,
        },
    )
}

/// Accumulates parameter gradients for one instance given the gradient of its flattened output.
pub(crate) fn backward_instance(
    dout: ArrayView1<'_, f64>,
    cache: &ConvCache,
    params: &ConvParams,
    grads: &mut ConvParams,
) {
    let g = geometry(params.side).expect("validated at construction");
    let dpool2 = dout
        .to_owned()
        .into_shape_with_order((g.pool2 * g.pool2, CONV2_CHANNELS))
        .expect("contiguous");
    let mut drelu2 = maxpool_backward(dpool2.view(), &cache.arg2, g.conv2);
    drelu2.zip_mut_with(&cache.relu2, |d, &a| {
        if a <= 0.0 {
            *d = 0.0
        }
    });
    grads.w2 += &drelu2.t().dot(&cache.cols2);
    grads.b2 += &drelu2.sum_axis(Axis(0));

    let dcols2 = drelu2.dot(&params.w2);
    let dpool1 = col2im(dcols2.view(), g.pool1, CONV1_CHANNELS);
    let mut drelu1 = maxpool_backward(dpool1.view(), &cache.arg1, g.conv1);
    drelu1.zip_mut_with(&cache.relu1, |d, &a| {
        if a <= 0.0 {
            *d = 0.0
        }
    });
    grads.w1 += &drelu1.t().dot(&cache.cols1);
    grads.b1 += &drelu1.sum_axis(Axis(0));
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn geometry_for_common_sides() {
        assert_eq!(output_dim(28).unwrap(), 5 * 5 * 16);
        assert_eq!(output_dim(10).unwrap(), 16);
        assert!(output_dim(9).is_err());
        assert_eq!(square_side(784), Some(28));
        assert_eq!(square_side(10), None);
    }

    #[test]
    fn im2col_then_col2im_counts_overlaps() {
        let side = 4;
        let ones = Array2::ones((side * side, 1));
        let cols = im2col(ones.view(), side);
        assert_eq!(cols.dim(), (4, 9));
        let back = col2im(cols.view(), side, 1);
        // corner covered by one window, centre cells by all four
        assert_eq!(back[[0, 0]], 1.0);
        assert_eq!(back[[5, 0]], 4.0);
    }

    #[test]
    fn maxpool_picks_maximum() {
        let map = array![[1.0], [5.0], [2.0], [0.0]];
        let (p, arg) = maxpool(map.view(), 2);
        assert_eq!(p, array![[5.0]]);
        assert_eq!(arg, array![[1usize]]);
    }
}
