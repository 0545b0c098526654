//! RoIAlign with half-pixel alignment: a box edge at pixel `x` sits at
//! feature coordinate `x * scale - 0.5`, and each output bin averages
//! `sampling_ratio^2` bilinear samples placed at sub-bin centers.

use ndarray::Array4;

use super::real::Real;
use crate::geometry::BBox;

/// A region: index into the feature batch plus its box in input pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub batch_index: usize,
    pub bbox: BBox,
}

type Taps = [(usize, usize, f64); 4];

/// Bilinear taps at `(y, x)` on an `h x w` grid. Points more than one cell
/// outside the grid contribute nothing; points just outside clamp to the edge.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> Option<Taps> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let axis = |v: f64, len: usize| {
        let lo = v.floor() as usize;
        if lo >= len - 1 {
            (len - 1, len - 1, 0.0)
        } else {
            (lo, lo + 1, v - lo as f64)
        }
    };
    let (y0, y1, ly) = axis(y, h);
    let (x0, x1, lx) = axis(x, w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([
        (y0, x0, hy * hx),
        (y0, x1, hy * lx),
        (y1, x0, ly * hx),
        (y1, x1, ly * lx),
    ])
}

/// Calls `f(bin_y, bin_x, taps, weight)` for every sample of `roi`.
fn for_each_sample(
    roi: &BBox,
    scale: f64,
    out_hw: (usize, usize),
    feat_hw: (usize, usize),
    sampling_ratio: usize,
    mut f: impl FnMut(usize, usize, &Taps, f64),
) {
    let (ph, pw) = out_hw;
    let s = sampling_ratio.max(1);
    let y_start = roi.y1 * scale - 0.5;
    let x_start = roi.x1 * scale - 0.5;
    let bin_h = (roi.y2 * scale - 0.5 - y_start) / ph as f64;
    let bin_w = (roi.x2 * scale - 0.5 - x_start) / pw as f64;
    let weight = 1.0 / (s * s) as f64;
    for by in 0..ph {
        for bx in 0..pw {
            for iy in 0..s {
                let y = y_start + by as f64 * bin_h + (iy as f64 + 0.5) * bin_h / s as f64;
                for ix in 0..s {
                    let x = x_start + bx as f64 * bin_w + (ix as f64 + 0.5) * bin_w / s as f64;
                    if let Some(taps) = bilinear_taps(y, x, feat_hw.0, feat_hw.1) {
                        f(by, bx, &taps, weight);
                    }
                }
            }
        }
    }
}

/// Pools `(C, N, H, W)` features into `(C, R, out_h, out_w)`.
pub fn roi_align<R: Real>(
    features: &Array4<R>,
    rois: &[Roi],
    scale: f64,
    out_hw: (usize, usize),
    sampling_ratio: usize,
) -> Array4<R> {
    let (c, _, h, w) = features.dim();
    let mut out = Array4::<R>::zeros((c, rois.len(), out_hw.0, out_hw.1));
    for (r, roi) in rois.iter().enumerate() {
        for_each_sample(&roi.bbox, scale, out_hw, (h, w), sampling_ratio, |by, bx, taps, wt| {
            for ch in 0..c {
                let mut acc = R::zero();
                for &(y, x, tw) in taps {
                    acc += features[[ch, roi.batch_index, y, x]] * R::lit(tw);
                }
                out[[ch, r, by, bx]] += acc * R::lit(wt);
            }
        });
    }
    out
}

/// Scatters pooled gradients back onto a feature map of `feat_shape`.
pub fn roi_align_backward<R: Real>(
    d_out: &Array4<R>,
    rois: &[Roi],
    scale: f64,
    feat_shape: [usize; 4],
    sampling_ratio: usize,
) -> Array4<R> {
    let [c, n, h, w] = feat_shape;
    let out_hw = (d_out.shape()[2], d_out.shape()[3]);
    let mut d_feat = Array4::<R>::zeros((c, n, h, w));
    for (r, roi) in rois.iter().enumerate() {
        for_each_sample(&roi.bbox, scale, out_hw, (h, w), sampling_ratio, |by, bx, taps, wt| {
            for ch in 0..c {
                let g = d_out[[ch, r, by, bx]] * R::lit(wt);
                for &(y, x, tw) in taps {
                    d_feat[[ch, roi.batch_index, y, x]] += g * R::lit(tw);
                }
            }
        });
    }
    d_feat
}
