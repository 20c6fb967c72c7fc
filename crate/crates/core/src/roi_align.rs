//! Region feature extraction: pools a fixed `s x s x d` feature patch for
//! each proposal box out of the single-level feature map by averaged
//! bilinear sampling.
//!
//! Image pixel coordinates map to grid coordinates as `g = p / stride - 0.5`
//! so that the center of grid cell `i` sits exactly on node `i`; a box that
//! covers one cell pooled at `s = 1` therefore returns that cell's value.
//! Out-of-range samples clamp to the border. Box coordinates are constants:
//! gradients flow only into the feature-map values.

use crate::geometry::BoxSet;
use crate::scalar::Scalar;
use crate::tensor::{RoiPlan, Tap, Tensor};

/// Single-level feature grid with its pixel stride.
#[derive(Debug, Clone)]
pub struct FeatureMap<S: Scalar> {
    pub data: Tensor<S>,
    pub stride: f64,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn new(data: Tensor<S>, stride: f64) -> Self {
        let s = data.shape();
        assert!(
            s.len() == 3 && s[1] >= 1 && s[2] >= 1,
            "feature map must be [channels, h, w] with h, w >= 1, got {:?}",
            s
        );
        assert!(stride > 0.0, "feature map stride must be positive, got {}", stride);
        FeatureMap { data, stride }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Pooled region features `[n, s*s, d]`, bins row-major within each region.
#[derive(Debug, Clone)]
pub struct RoiFeature<S: Scalar> {
    pub data: Tensor<S>,
    pub s: usize,
}

/// Four corner taps (iy, ix, weight) for bilinear interpolation at a grid
/// point, with coordinates clamped to the border.
fn corner_taps(h: usize, w: usize, gx: f64, gy: f64) -> [(usize, usize, f64); 4] {
    let cx = gx.max(0.0).min((w - 1) as f64);
    let cy = gy.max(0.0).min((h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ]
}

/// Interpolates all channels at one grid-coordinate point.
pub fn bilinear_sample<S: Scalar>(fm: &FeatureMap<S>, x: f64, y: f64) -> Vec<S> {
    let (c, h, w) = (fm.channels(), fm.height(), fm.width());
    let taps = corner_taps(h, w, x, y);
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let mut acc = S::zero();
        for &(iy, ix, wt) in &taps {
            acc += fm.data.data()[ch * h * w + iy * w + ix] * S::from_f(wt);
        }
        out.push(acc);
    }
    out
}

/// Pools every box into `s x s` bins, each bin averaging
/// `samples_per_bin^2` bilinear samples at regular interior offsets.
pub fn roi_align<S: Scalar>(
    fm: &FeatureMap<S>,
    boxes: &BoxSet<S>,
    s: usize,
    samples_per_bin: usize,
) -> RoiFeature<S> {
    assert!(s >= 1, "roi_align: pooled resolution must be >= 1, got {}", s);
    assert!(
        samples_per_bin >= 1,
        "roi_align: samples_per_bin must be >= 1, got {}",
        samples_per_bin
    );
    let (c, h, w) = (fm.channels(), fm.height(), fm.width());
    let spb = samples_per_bin;
    let group = spb * spb * 4;
    let inv_count = 1.0 / (spb * spb) as f64;
    let mut taps = Vec::with_capacity(boxes.len() * s * s * group);
    for b in &boxes.boxes {
        let gx1 = b.x1.to_f() / fm.stride - 0.5;
        let gy1 = b.y1.to_f() / fm.stride - 0.5;
        let gx2 = b.x2.to_f() / fm.stride - 0.5;
        let gy2 = b.y2.to_f() / fm.stride - 0.5;
        let bw = (gx2 - gx1) / s as f64;
        let bh = (gy2 - gy1) / s as f64;
        for by in 0..s {
            for bx in 0..s {
                for sy in 0..spb {
                    for sx in 0..spb {
                        let gy = gy1 + (by as f64 + (sy as f64 + 0.5) / spb as f64) * bh;
                        let gx = gx1 + (bx as f64 + (sx as f64 + 0.5) / spb as f64) * bw;
                        for (iy, ix, wt) in corner_taps(h, w, gx, gy) {
                            taps.push(Tap {
                                iy: iy as u32,
                                ix: ix as u32,
                                w: wt * inv_count,
                            });
                        }
                    }
                }
            }
        }
    }
    let plan = RoiPlan {
        queries: boxes.len(),
        bins: s * s,
        group,
        taps,
        channels: c,
        fm_h: h,
        fm_w: w,
    };
    RoiFeature {
        data: Tensor::roi_align_with_plan(&fm.data, plan),
        s,
    }
}
