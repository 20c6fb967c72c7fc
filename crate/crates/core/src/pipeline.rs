//! The cascade detector: learnable initial queries and proposal boxes
//! refined over stages of box-aware self attention, RoI pooling,
//! query-conditioned convolution, channel gating, and residual query
//! updates.
//!
//! Box coordinates cross stage boundaries as plain data: stage `k+1` builds
//! its IoU matrix, its pooling taps, and its decode base from the numeric
//! values of stage `k`'s clamped output boxes, so no gradient flows along
//! that handoff. Queries flow with gradients intact. Each stage also emits
//! an unclamped corner tensor (`boxes_raw`) that stays differentiable for
//! the loss.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{attend_with_weights, AttnConfig, AttnMode, MhsaParams};
use crate::dynamic_head::{
    apply_dcw, dcw_masks, project_embeddings, ChannelMaskHeads, DynamicConv, FlattenProj, Linear,
    LnParams, ObjectEmbeddings, QueryUpdate,
};
use crate::error::{Error, Result};
use crate::geometry::{apply_deltas, pairwise_iou, BBox, BoxSet, DELTA_LOG_CLAMP};
use crate::matcher::{cost_matrix, hungarian, set_loss_with_matches, CostConfig, Targets};
use crate::rng::Rng;
use crate::roi_align::{roi_align, FeatureMap};
use crate::scalar::Scalar;
use crate::tensor::{load_named, save_named, Parameter, Tensor};

/// How the head separates classification features from regression features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisentangleMode {
    /// One shared conv and one shared projection; both tasks read the same
    /// embedding.
    Entangled,
    /// Two fully independent convs at half the channel width, one projection
    /// each.
    HalfDim,
    /// Like [`DisentangleMode::HalfDim`] plus a static linear layer per
    /// branch that restores the full channel width before projection.
    FullDim,
    /// One shared conv whose output is gated by per-branch channel masks
    /// predicted from the queries, then projected per branch.
    Dcw,
}

impl DisentangleMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "entangled" => Ok(DisentangleMode::Entangled),
            "half-dim" => Ok(DisentangleMode::HalfDim),
            "full-dim" => Ok(DisentangleMode::FullDim),
            "dcw" => Ok(DisentangleMode::Dcw),
            other => Err(Error::Config(format!(
                "unknown head mode '{}': expected entangled|half-dim|full-dim|dcw",
                other
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DisentangleMode::Entangled => "entangled",
            DisentangleMode::HalfDim => "half-dim",
            DisentangleMode::FullDim => "full-dim",
            DisentangleMode::Dcw => "dcw",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub num_queries: usize,
    pub d_model: usize,
    pub heads: usize,
    pub num_stages: usize,
    pub num_classes: usize,
    pub attn_mode: AttnMode,
    pub dcw_enabled: bool,
    pub disentangle_mode: DisentangleMode,
    /// Pooled RoI resolution per side.
    pub pooled_size: usize,
    /// Bilinear samples per bin side during pooling.
    pub samples_per_bin: usize,
    pub cost: CostConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_queries: 10,
            d_model: 32,
            heads: 4,
            num_stages: 6,
            num_classes: 1,
            attn_mode: AttnMode::IouEsa,
            dcw_enabled: true,
            disentangle_mode: DisentangleMode::Dcw,
            pooled_size: 7,
            samples_per_bin: 2,
            cost: CostConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stages < 1 {
            return Err(Error::Config(format!(
                "num_stages must be >= 1, got {}",
                self.num_stages
            )));
        }
        if self.num_queries < 1 {
            return Err(Error::Config("num_queries must be >= 1".into()));
        }
        if self.num_classes < 1 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.pooled_size < 1 || self.samples_per_bin < 1 {
            return Err(Error::Config(format!(
                "pooled_size {} and samples_per_bin {} must both be >= 1",
                self.pooled_size, self.samples_per_bin
            )));
        }
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by 4 for the bottleneck widths",
                self.d_model
            )));
        }
        if self.dcw_enabled != (self.disentangle_mode == DisentangleMode::Dcw) {
            return Err(Error::Config(format!(
                "dcw_enabled = {} conflicts with head mode '{}'",
                self.dcw_enabled,
                self.disentangle_mode.as_str()
            )));
        }
        Ok(())
    }

    pub fn attn(&self) -> AttnConfig {
        AttnConfig::new(self.d_model, self.heads)
    }

    fn bottleneck_width(&self) -> usize {
        (self.d_model / 4).max(1)
    }
}

/// Head parameters for one stage, per feature-separation mode.
#[derive(Debug, Clone)]
pub enum HeadParams<S: Scalar> {
    Entangled {
        conv: DynamicConv<S>,
        proj: FlattenProj<S>,
    },
    Split {
        conv_cls: DynamicConv<S>,
        conv_reg: DynamicConv<S>,
        /// Full-dim variant: per-branch width-restoring layers; absent for
        /// half-dim.
        recover: Option<(Linear<S>, Linear<S>)>,
        proj_cls: FlattenProj<S>,
        proj_reg: FlattenProj<S>,
    },
    Dcw {
        conv: DynamicConv<S>,
        masks: ChannelMaskHeads<S>,
        proj_cls: FlattenProj<S>,
        proj_reg: FlattenProj<S>,
    },
}

impl<S: Scalar> HeadParams<S> {
    fn init(cfg: &DetectorConfig, rng: &mut Rng, prefix: &str) -> Self {
        let d = cfg.d_model;
        let p = cfg.pooled_size * cfg.pooled_size;
        let dk = cfg.bottleneck_width();
        match cfg.disentangle_mode {
            DisentangleMode::Entangled => HeadParams::Entangled {
                conv: DynamicConv::init(d, d, dk, d, rng, &format!("{}.conv", prefix)),
                proj: FlattenProj::init(p, d, d, rng, &format!("{}.proj", prefix)),
            },
            DisentangleMode::HalfDim | DisentangleMode::FullDim => {
                let dh = d / 2;
                let dkh = (d / 8).max(1);
                let recover = if cfg.disentangle_mode == DisentangleMode::FullDim {
                    Some((
                        Linear::init(dh, d, rng, &format!("{}.recover_cls", prefix)),
                        Linear::init(dh, d, rng, &format!("{}.recover_reg", prefix)),
                    ))
                } else {
                    None
                };
                let pw = if recover.is_some() { d } else { dh };
                HeadParams::Split {
                    conv_cls: DynamicConv::init(d, d, dkh, dh, rng, &format!("{}.conv_cls", prefix)),
                    conv_reg: DynamicConv::init(d, d, dkh, dh, rng, &format!("{}.conv_reg", prefix)),
                    recover,
                    proj_cls: FlattenProj::init(p, pw, d, rng, &format!("{}.proj_cls", prefix)),
                    proj_reg: FlattenProj::init(p, pw, d, rng, &format!("{}.proj_reg", prefix)),
                }
            }
            DisentangleMode::Dcw => HeadParams::Dcw {
                conv: DynamicConv::init(d, d, dk, d, rng, &format!("{}.conv", prefix)),
                masks: ChannelMaskHeads::init(d, dk, d, rng, &format!("{}.mask", prefix)),
                proj_cls: FlattenProj::init(p, d, d, rng, &format!("{}.proj_cls", prefix)),
                proj_reg: FlattenProj::init(p, d, d, rng, &format!("{}.proj_reg", prefix)),
            },
        }
    }

    /// Runs the head on post-attention queries and pooled features
    /// `[n, s*s, d]`; returns the per-branch embeddings plus the fused
    /// vector feeding the query update.
    fn forward(&self, q: &Tensor<S>, rf: &Tensor<S>) -> (ObjectEmbeddings<S>, Tensor<S>) {
        match self {
            HeadParams::Entangled { conv, proj } => {
                let o = proj.apply(&conv.apply(q, rf));
                let emb = ObjectEmbeddings {
                    cls: o.clone(),
                    reg: o.clone(),
                };
                (emb, o)
            }
            HeadParams::Split {
                conv_cls,
                conv_reg,
                recover,
                proj_cls,
                proj_reg,
            } => {
                let mut rc = conv_cls.apply(q, rf);
                let mut rr = conv_reg.apply(q, rf);
                if let Some((lc, lr)) = recover {
                    rc = lc.apply(&rc);
                    rr = lr.apply(&rr);
                }
                let emb = project_embeddings(&rc, &rr, proj_cls, proj_reg);
                let fused = emb.cls.add(&emb.reg);
                (emb, fused)
            }
            HeadParams::Dcw {
                conv,
                masks,
                proj_cls,
                proj_reg,
            } => {
                let mixed = conv.apply(q, rf);
                let (m_cls, m_reg) = dcw_masks(q, masks);
                let emb = project_embeddings(
                    &apply_dcw(&mixed, &m_cls),
                    &apply_dcw(&mixed, &m_reg),
                    proj_cls,
                    proj_reg,
                );
                let fused = emb.cls.add(&emb.reg);
                (emb, fused)
            }
        }
    }

    fn params(&self) -> Vec<&Parameter<S>> {
        match self {
            HeadParams::Entangled { conv, proj } => {
                let mut v = conv.params();
                v.extend(proj.params());
                v
            }
            HeadParams::Split {
                conv_cls,
                conv_reg,
                recover,
                proj_cls,
                proj_reg,
            } => {
                let mut v = conv_cls.params();
                v.extend(conv_reg.params());
                if let Some((lc, lr)) = recover {
                    v.extend(lc.params());
                    v.extend(lr.params());
                }
                v.extend(proj_cls.params());
                v.extend(proj_reg.params());
                v
            }
            HeadParams::Dcw {
                conv,
                masks,
                proj_cls,
                proj_reg,
            } => {
                let mut v = conv.params();
                v.extend(masks.params());
                v.extend(proj_cls.params());
                v.extend(proj_reg.params());
                v
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        match self {
            HeadParams::Entangled { conv, proj } => {
                let mut v = conv.params_mut();
                v.extend(proj.params_mut());
                v
            }
            HeadParams::Split {
                conv_cls,
                conv_reg,
                recover,
                proj_cls,
                proj_reg,
            } => {
                let mut v = conv_cls.params_mut();
                v.extend(conv_reg.params_mut());
                if let Some((lc, lr)) = recover {
                    v.extend(lc.params_mut());
                    v.extend(lr.params_mut());
                }
                v.extend(proj_cls.params_mut());
                v.extend(proj_reg.params_mut());
                v
            }
            HeadParams::Dcw {
                conv,
                masks,
                proj_cls,
                proj_reg,
            } => {
                let mut v = conv.params_mut();
                v.extend(masks.params_mut());
                v.extend(proj_cls.params_mut());
                v.extend(proj_reg.params_mut());
                v
            }
        }
    }
}

/// All trainable parameters of one refinement stage.
#[derive(Debug, Clone)]
pub struct StageParams<S: Scalar> {
    pub attn: MhsaParams<S>,
    pub attn_ln: LnParams<S>,
    pub head: HeadParams<S>,
    pub update: QueryUpdate<S>,
    pub cls_head: Linear<S>,
    pub box_head: Linear<S>,
}

impl<S: Scalar> StageParams<S> {
    fn init(cfg: &DetectorConfig, rng: &mut Rng, prefix: &str) -> Self {
        let d = cfg.d_model;
        let mut sp = StageParams {
            attn: MhsaParams::init(cfg.attn(), rng, &format!("{}.attn", prefix)),
            attn_ln: LnParams::init(d, &format!("{}.attn_ln", prefix)),
            head: HeadParams::init(cfg, rng, prefix),
            update: QueryUpdate::init(d, rng, &format!("{}.update", prefix)),
            cls_head: Linear::init(d, cfg.num_classes, rng, &format!("{}.cls_head", prefix)),
            box_head: Linear::init(d, 4, rng, &format!("{}.box_head", prefix)),
        };
        // The delta head starts at zero so every stage begins as an identity
        // refinement of its proposals; early matching then keys on class
        // scores instead of random box scatter, which keeps assignments
        // stable while training starts.
        let wlen = sp.box_head.w.tensor().numel();
        sp.box_head.w.assign(vec![S::zero(); wlen]);
        sp
    }

    fn params(&self) -> Vec<&Parameter<S>> {
        let mut v = self.attn.params();
        v.extend(self.attn_ln.params());
        v.extend(self.head.params());
        v.extend(self.update.params());
        v.extend(self.cls_head.params());
        v.extend(self.box_head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut v = self.attn.params_mut();
        v.extend(self.attn_ln.params_mut());
        v.extend(self.head.params_mut());
        v.extend(self.update.params_mut());
        v.extend(self.cls_head.params_mut());
        v.extend(self.box_head.params_mut());
        v
    }
}

/// Learnable model state: initial queries, initial proposal boxes, and the
/// per-stage parameter sets.
#[derive(Debug, Clone)]
pub struct ModelState<S: Scalar> {
    /// Initial object queries `[N, d]`.
    pub q0: Parameter<S>,
    /// Raw initial proposals `[N, 4]`; each row squashes through a sigmoid
    /// to normalized `(cx, cy, w, h)` fractions of the image.
    pub b0: Parameter<S>,
    pub stages: Vec<StageParams<S>>,
}

impl<S: Scalar> ModelState<S> {
    /// Unit-normal queries; proposals start as image-centered boxes covering
    /// nearly the whole frame (`sigmoid(0) = 0.5` centers, `sigmoid(4)`
    /// extents).
    pub fn init(cfg: &DetectorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_queries;
        let q0_data: Vec<S> = (0..n * cfg.d_model)
            .map(|_| S::from_f(rng.gauss()))
            .collect();
        // Proposals start as a coarse scan: centers on a grid, two sizes
        // interleaved, shrunk near borders so every start box lies strictly
        // inside the frame. Identical proposals would pool identical
        // features and leave symmetry breaking entirely to q0; a spread
        // start also keeps every sigmoid coordinate in its responsive
        // range.
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let cols = (n as f64).sqrt().ceil() as usize;
        let rows = n.div_ceil(cols);
        let mut b0_data = Vec::with_capacity(n * 4);
        for i in 0..n {
            let cx = ((i % cols) as f64 + 0.5) / cols as f64;
            let cy = ((i / cols) as f64 + 0.5) / rows as f64;
            let fit = (2.0 * cx.min(1.0 - cx)).min(2.0 * cy.min(1.0 - cy)) - 0.05;
            let wide = if i % 2 == 0 { 0.35f64 } else { 0.6 };
            let s = wide.min(fit);
            b0_data.extend_from_slice(&[
                S::from_f(logit(cx)),
                S::from_f(logit(cy)),
                S::from_f(logit(s)),
                S::from_f(logit(s)),
            ]);
        }
        let stages = (0..cfg.num_stages)
            .map(|k| StageParams::init(cfg, rng, &format!("s{}", k)))
            .collect();
        Ok(ModelState {
            q0: Parameter::new("q0", &[n, cfg.d_model], q0_data),
            b0: Parameter::new("b0", &[n, 4], b0_data),
            stages,
        })
    }

    /// The proposal set the first stage sees, clamped into the frame.
    pub fn initial_boxes(&self, image_w: f64, image_h: f64) -> BoxSet<S> {
        base_from_b0(&self.b0, image_w, image_h).set
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut v = vec![&self.q0, &self.b0];
        for s in &self.stages {
            v.extend(s.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut v = vec![&mut self.q0, &mut self.b0];
        for s in &mut self.stages {
            v.extend(s.params_mut());
        }
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, Tensor<S>)> = self
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.tensor().clone()))
            .collect();
        save_named(path, &entries)
    }

    /// Loads a checkpoint written by [`ModelState::save`]; every parameter
    /// must be present with its exact shape.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut by_name: HashMap<String, (Vec<usize>, Vec<f64>)> = load_named(path)?
            .into_iter()
            .map(|(name, shape, data)| (name, (shape, data)))
            .collect();
        let mut params = self.params_mut();
        for p in params.iter_mut() {
            let (shape, data) = by_name.remove(&p.name).ok_or_else(|| {
                Error::Parse(format!("checkpoint is missing parameter '{}'", p.name))
            })?;
            if shape != p.shape() {
                return Err(Error::Parse(format!(
                    "checkpoint parameter '{}' has shape {:?}, model expects {:?}",
                    p.name,
                    shape,
                    p.shape()
                )));
            }
            p.assign(data.into_iter().map(S::from_f).collect());
        }
        if !by_name.is_empty() {
            let mut extra: Vec<String> = by_name.into_keys().collect();
            extra.sort();
            return Err(Error::Parse(format!(
                "checkpoint has {} parameters the model does not: {}",
                extra.len(),
                extra.join(", ")
            )));
        }
        Ok(())
    }
}

/// One stage's predictions.
#[derive(Debug, Clone)]
pub struct StageOutput<S: Scalar> {
    /// `[N, num_classes]` presence logits.
    pub class_logits: Tensor<S>,
    /// Decoded boxes clamped into the frame; the next stage's proposals.
    pub boxes: BoxSet<S>,
    /// `[N, 4]` decoded corners before the frame clamp; stays differentiable
    /// so the loss can push boxes back from beyond the edges.
    pub boxes_raw: Tensor<S>,
    /// `[N, d]` refined queries.
    pub queries_out: Tensor<S>,
}

/// A stage's proposal set plus the center-size tensors the decode uses;
/// the tensors are graph-connected only for the first stage (from `b0`).
struct StageBase<S: Scalar> {
    set: BoxSet<S>,
    cx: Tensor<S>,
    cy: Tensor<S>,
    w: Tensor<S>,
    h: Tensor<S>,
}

fn base_from_set<S: Scalar>(b: &BoxSet<S>) -> StageBase<S> {
    let n = b.len();
    let mut cx = Vec::with_capacity(n);
    let mut cy = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut h = Vec::with_capacity(n);
    for bb in &b.boxes {
        let (a, b2, c, d) = bb.to_center_size();
        cx.push(a);
        cy.push(b2);
        w.push(c);
        h.push(d);
    }
    StageBase {
        set: b.clone(),
        cx: Tensor::constant(&[n, 1], cx),
        cy: Tensor::constant(&[n, 1], cy),
        w: Tensor::constant(&[n, 1], w),
        h: Tensor::constant(&[n, 1], h),
    }
}

/// Differentiable base from the raw proposal parameter. The center-size
/// tensors go through the same corner round trip the plain path performs,
/// so while no clamping bites, both paths agree bitwise.
fn base_from_b0<S: Scalar>(b0: &Parameter<S>, image_w: f64, image_h: f64) -> StageBase<S> {
    let n = b0.shape()[0];
    let frame = Tensor::constant(
        &[4],
        vec![
            S::from_f(image_w),
            S::from_f(image_h),
            S::from_f(image_w),
            S::from_f(image_h),
        ],
    );
    let cs = b0.tensor().sigmoid().mul(&frame);
    let cx0 = cs.slice_last(0, 1);
    let cy0 = cs.slice_last(1, 2);
    let w0 = cs.slice_last(2, 3);
    let h0 = cs.slice_last(3, 4);
    let x1 = cx0.sub(&w0.mul_scalar(0.5));
    let y1 = cy0.sub(&h0.mul_scalar(0.5));
    let x2 = cx0.add(&w0.mul_scalar(0.5));
    let y2 = cy0.add(&h0.mul_scalar(0.5));
    let boxes = {
        let (dx1, dy1, dx2, dy2) = (x1.data(), y1.data(), x2.data(), y2.data());
        (0..n)
            .map(|i| BBox::new(dx1[i], dy1[i], dx2[i], dy2[i]))
            .collect()
    };
    StageBase {
        set: BoxSet::new(S::from_f(image_w), S::from_f(image_h), boxes),
        cx: x1.add(&x2).mul_scalar(0.5),
        cy: y1.add(&y2).mul_scalar(0.5),
        w: x2.sub(&x1),
        h: y2.sub(&y1),
    }
}

/// Applies predicted deltas `[N, 4]` to the base boxes: center shifts
/// proportional to extent, log-space size scaling clamped to ±4. No frame
/// clamp here; this is the loss-facing path.
/// Pooling reads a window this much wider than the proposal, so samples
/// straddle the border and see the feature falloff on both sides of each
/// edge; pooling the box exactly would keep every sample inside it.
const POOL_CONTEXT: f64 = 1.5;

fn pooling_window<S: Scalar>(set: &BoxSet<S>) -> BoxSet<S> {
    let boxes = set
        .boxes
        .iter()
        .map(|b| {
            let (cx, cy, w, h) = b.to_center_size();
            let (cx, cy) = (cx.to_f(), cy.to_f());
            let hw = w.to_f() * 0.5 * POOL_CONTEXT;
            let hh = h.to_f() * 0.5 * POOL_CONTEXT;
            BBox::new(
                S::from_f(cx - hw),
                S::from_f(cy - hh),
                S::from_f(cx + hw),
                S::from_f(cy + hh),
            )
        })
        .collect();
    BoxSet::new(set.image_w, set.image_h, boxes)
}

fn decode_boxes<S: Scalar>(base: &StageBase<S>, deltas: &Tensor<S>) -> Tensor<S> {
    let dx = deltas.slice_last(0, 1);
    let dy = deltas.slice_last(1, 2);
    let dw = deltas.slice_last(2, 3);
    let dh = deltas.slice_last(3, 4);
    let ncx = base.cx.add(&dx.mul(&base.w));
    let ncy = base.cy.add(&dy.mul(&base.h));
    let nw = base.w.mul(&dw.clamp(-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP).exp());
    let nh = base.h.mul(&dh.clamp(-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP).exp());
    let hx = nw.mul_scalar(0.5);
    let hy = nh.mul_scalar(0.5);
    Tensor::concat_last(&[
        ncx.sub(&hx),
        ncy.sub(&hy),
        ncx.add(&hx),
        ncy.add(&hy),
    ])
}

fn ensure_finite<S: Scalar>(t: &Tensor<S>, stage: usize, step: &str) -> Result<()> {
    if t.data().iter().any(|v| !v.to_f().is_finite()) {
        return Err(Error::NonFinite(format!(
            "stage {}: non-finite values after {}",
            stage, step
        )));
    }
    Ok(())
}

fn run_stage<S: Scalar>(
    stage: usize,
    q: &Tensor<S>,
    base: &StageBase<S>,
    fm: &FeatureMap<S>,
    sp: &StageParams<S>,
    cfg: &DetectorConfig,
) -> Result<StageOutput<S>> {
    let n = cfg.num_queries;
    assert!(
        q.shape() == [n, cfg.d_model],
        "stage {}: queries {:?}, expected [{}, {}]",
        stage,
        q.shape(),
        n,
        cfg.d_model
    );
    assert!(
        base.set.len() == n,
        "stage {}: {} proposal boxes for {} queries",
        stage,
        base.set.len(),
        n
    );
    assert!(
        fm.channels() == cfg.d_model,
        "stage {}: feature map has {} channels, queries have width {}",
        stage,
        fm.channels(),
        cfg.d_model
    );
    ensure_finite(q, stage, "input queries")?;

    let q_att = match cfg.attn_mode {
        AttnMode::NoMsa => q.clone(),
        mode => {
            let iou = pairwise_iou(&base.set);
            let iou_arg = match mode {
                AttnMode::FullMsa => None,
                _ => Some(&iou),
            };
            let (out, _) = attend_with_weights(q, iou_arg, &sp.attn, cfg.attn(), mode)?;
            sp.attn_ln.apply(&q.add(&out))
        }
    };
    ensure_finite(&q_att, stage, "attention sublayer")?;

    let rf = roi_align(fm, &pooling_window(&base.set), cfg.pooled_size, cfg.samples_per_bin);
    // Checked here because the conv's relu would turn NaN into zero and hide
    // a poisoned feature map from every later check.
    ensure_finite(&rf.data, stage, "roi pooling")?;
    let (emb, fused) = sp.head.forward(&q_att, &rf.data);
    ensure_finite(&fused, stage, "dynamic head")?;

    let class_logits = sp.cls_head.apply(&emb.cls);
    ensure_finite(&class_logits, stage, "class head")?;
    let deltas = sp.box_head.apply(&emb.reg);
    let boxes_raw = decode_boxes(base, &deltas);
    ensure_finite(&boxes_raw, stage, "box decode")?;

    let (iw, ih) = (base.set.image_w, base.set.image_h);
    let dd = deltas.data();
    let decoded: Vec<BBox<S>> = (0..n)
        .map(|i| {
            let d = (dd[4 * i], dd[4 * i + 1], dd[4 * i + 2], dd[4 * i + 3]);
            apply_deltas(&base.set.boxes[i], d, iw, ih)
        })
        .collect();
    let boxes = BoxSet::new(iw, ih, decoded);

    let queries_out = sp.update.apply(&fused);
    ensure_finite(&queries_out, stage, "query update")?;

    Ok(StageOutput {
        class_logits,
        boxes,
        boxes_raw,
        queries_out,
    })
}

/// Runs a single refinement stage on explicit inputs. The proposal set is
/// taken as data: its coordinates receive no gradient.
pub fn forward_stage<S: Scalar>(
    q: &Tensor<S>,
    b: &BoxSet<S>,
    fm: &FeatureMap<S>,
    sp: &StageParams<S>,
    cfg: &DetectorConfig,
) -> Result<StageOutput<S>> {
    run_stage(0, q, &base_from_set(b), fm, sp, cfg)
}

fn forward_impl<S: Scalar>(
    fm: &FeatureMap<S>,
    state: &ModelState<S>,
    cfg: &DetectorConfig,
    pinned: Option<&[BoxSet<S>]>,
) -> Result<Vec<StageOutput<S>>> {
    cfg.validate()?;
    if state.stages.len() != cfg.num_stages {
        return Err(Error::Config(format!(
            "model has {} stages, config wants {}",
            state.stages.len(),
            cfg.num_stages
        )));
    }
    if let Some(p) = pinned {
        assert!(
            p.len() == cfg.num_stages,
            "pinned handoff needs {} box sets, got {}",
            cfg.num_stages,
            p.len()
        );
    }
    let image_w = fm.width() as f64 * fm.stride;
    let image_h = fm.height() as f64 * fm.stride;

    let mut q = state.q0.tensor().clone();
    let mut base = base_from_b0(&state.b0, image_w, image_h);
    if let Some(p) = pinned {
        base.set = p[0].clone();
    }
    let mut outs = Vec::with_capacity(cfg.num_stages);
    for k in 0..cfg.num_stages {
        let out = run_stage(k, &q, &base, fm, &state.stages[k], cfg)?;
        q = out.queries_out.clone();
        if k + 1 < cfg.num_stages {
            let next = match pinned {
                Some(p) => p[k + 1].clone(),
                None => out.boxes.clone(),
            };
            base = base_from_set(&next);
        }
        outs.push(out);
    }
    Ok(outs)
}

/// Full cascade: chains the stages, feeding each stage the previous stage's
/// clamped boxes as data and its queries with gradients intact.
pub fn forward<S: Scalar>(
    fm: &FeatureMap<S>,
    state: &ModelState<S>,
    cfg: &DetectorConfig,
) -> Result<Vec<StageOutput<S>>> {
    forward_impl(fm, state, cfg, None)
}

/// Forward pass with the stage-to-stage box handoff pinned to the given
/// sets (entry `k` feeds stage `k`; entry 0 replaces the `b0`-derived set).
///
/// The autodiff graph treats handed-off box coordinates as data, so a
/// finite-difference probe of a parameter must hold them fixed for the
/// numeric derivative to measure the same function the graph differentiates.
/// With `pinned` taken from an unpinned base run, this forward has identical
/// outputs and an identical gradient graph, but stays put under probes.
pub fn forward_with_pinned_boxes<S: Scalar>(
    fm: &FeatureMap<S>,
    state: &ModelState<S>,
    cfg: &DetectorConfig,
    pinned: &[BoxSet<S>],
) -> Result<Vec<StageOutput<S>>> {
    forward_impl(fm, state, cfg, Some(pinned))
}

/// Plain gradient descent with momentum, decoupled weight decay, and global
/// gradient-norm clipping. Velocity buffers bind to the parameter list the
/// first `step` sees and must keep matching it.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    velocity: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(lr: f64) -> Self {
        Optimizer {
            lr,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            velocity: Vec::new(),
        }
    }

    /// Applies one update from the gradients currently on the parameters;
    /// missing gradients count as zero. Returns the pre-clip global norm.
    pub fn step<S: Scalar>(&mut self, params: &mut [&mut Parameter<S>]) -> f64 {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.tensor().numel()]).collect();
        }
        assert!(
            self.velocity.len() == params.len(),
            "optimizer holds {} velocity buffers for {} parameters",
            self.velocity.len(),
            params.len()
        );
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|p| match p.grad() {
                Some(g) => g.iter().map(|v| v.to_f()).collect(),
                None => vec![0.0; p.tensor().numel()],
            })
            .collect();
        let mut sq = 0.0;
        for g in &grads {
            for v in g {
                sq += v * v;
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        for ((p, g), vel) in params.iter_mut().zip(&grads).zip(&mut self.velocity) {
            assert!(
                vel.len() == g.len(),
                "parameter {} changed size under the optimizer",
                p.name
            );
            let mut data: Vec<f64> = p.data().iter().map(|v| v.to_f()).collect();
            for i in 0..data.len() {
                vel[i] = self.momentum * vel[i] + g[i] * scale;
                data[i] -= self.lr * vel[i] + self.lr * self.weight_decay * data[i];
            }
            p.assign(data.into_iter().map(S::from_f).collect());
        }
        norm
    }
}

fn stage_stats<S: Scalar>(outs: &[StageOutput<S>]) -> String {
    let span = |t: &Tensor<S>| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in t.data() {
            let f = v.to_f();
            lo = lo.min(f);
            hi = hi.max(f);
        }
        format!("[{:.3e}, {:.3e}]", lo, hi)
    };
    outs.iter()
        .enumerate()
        .map(|(k, o)| {
            format!(
                "stage {}: logits {} raw boxes {}",
                k,
                span(&o.class_logits),
                span(&o.boxes_raw)
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Everything one training step can report.
#[derive(Debug, Clone)]
pub struct TrainStats {
    pub loss: f64,
    /// One matched-loss value per cascade stage; they sum to `loss`.
    pub stage_losses: Vec<f64>,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// One training step on a single scene: forward, matched set loss summed
/// over all stages, backward, optimizer update.
pub fn train_step_detailed<S: Scalar>(
    fm: &FeatureMap<S>,
    targets: &Targets<S>,
    state: &mut ModelState<S>,
    cfg: &DetectorConfig,
    opt: &mut Optimizer,
) -> Result<TrainStats> {
    let outs = forward(fm, state, cfg)?;
    let stages: Vec<(Tensor<S>, Tensor<S>)> = outs
        .iter()
        .map(|o| (o.class_logits.clone(), o.boxes_raw.clone()))
        .collect();
    let mut matches = Vec::with_capacity(stages.len());
    for (logits, boxes) in &stages {
        if targets.is_empty() {
            matches.push(Vec::new());
        } else {
            let cm = cost_matrix(logits, boxes, targets, &cfg.cost);
            matches.push(hungarian(&cm)?.assignment);
        }
    }
    // Stage terms are built one at a time and summed in stage order, which
    // reproduces the all-stage loss bitwise while exposing the per-stage
    // values.
    let mut stage_losses = Vec::with_capacity(stages.len());
    let mut total: Option<Tensor<S>> = None;
    for (stage, pairs) in stages.iter().zip(&matches) {
        let term = set_loss_with_matches(
            std::slice::from_ref(stage),
            targets,
            std::slice::from_ref(pairs),
            &cfg.cost,
        );
        stage_losses.push(term.value().to_f());
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    let loss = total.expect("train step: no stages");
    let lv = loss.value().to_f();
    if !lv.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss is {}; {}",
            lv,
            stage_stats(&outs)
        )));
    }
    for p in state.params_mut() {
        p.tensor().clear_grad();
    }
    loss.backward()?;
    let mut params = state.params_mut();
    let grad_norm = opt.step(&mut params);
    Ok(TrainStats {
        loss: lv,
        stage_losses,
        grad_norm,
    })
}

/// [`train_step_detailed`] reduced to the loss value.
pub fn train_step<S: Scalar>(
    fm: &FeatureMap<S>,
    targets: &Targets<S>,
    state: &mut ModelState<S>,
    cfg: &DetectorConfig,
    opt: &mut Optimizer,
) -> Result<f64> {
    Ok(train_step_detailed(fm, targets, state, cfg, opt)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::{cost_matrix, hungarian, set_loss, set_loss_with_matches};
    use crate::tensor::grad_check_default;

    type T = Tensor<f64>;

    fn tiny_cfg(num_stages: usize) -> DetectorConfig {
        DetectorConfig {
            num_queries: 4,
            d_model: 8,
            heads: 2,
            num_stages,
            num_classes: 1,
            attn_mode: AttnMode::IouEsa,
            dcw_enabled: true,
            disentangle_mode: DisentangleMode::Dcw,
            pooled_size: 3,
            samples_per_bin: 2,
            cost: CostConfig::default(),
        }
    }

    fn rand_fm(rng: &mut Rng, c: usize, h: usize, w: usize, stride: f64) -> FeatureMap<f64> {
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
        FeatureMap::new(T::constant(&[c, h, w], data), stride)
    }

    fn spread_boxes(n: usize) -> BoxSet<f64> {
        let rows = [
            (2.3, 3.1, 13.7, 14.2),
            (9.6, 11.4, 27.8, 25.1),
            (16.2, 4.7, 29.3, 17.6),
            (5.1, 18.9, 19.4, 30.2),
            (12.8, 8.3, 22.6, 21.7),
            (3.4, 9.8, 11.2, 28.4),
        ];
        BoxSet::new(
            32.0,
            32.0,
            rows[..n]
                .iter()
                .map(|&(a, b, c, d)| BBox::new(a, b, c, d))
                .collect(),
        )
    }

    fn one_target() -> Targets<f64> {
        Targets::new(
            BoxSet::new(32.0, 32.0, vec![BBox::new(6.3, 9.1, 21.7, 24.9)]),
            vec![0],
        )
    }

    fn stage_terms(outs: &[StageOutput<f64>]) -> Vec<(T, T)> {
        outs.iter()
            .map(|o| (o.class_logits.clone(), o.boxes_raw.clone()))
            .collect()
    }

    #[test]
    fn output_shapes_contract() {
        let mut cfg = tiny_cfg(2);
        cfg.num_classes = 3;
        let mut rng = Rng::new(11);
        let state = ModelState::<f64>::init(&cfg, &mut rng).unwrap();
        let fm = rand_fm(&mut rng, cfg.d_model, 4, 4, 8.0);
        let outs = forward(&fm, &state, &cfg).unwrap();
        assert_eq!(outs.len(), 2);
        for o in &outs {
            assert_eq!(o.class_logits.shape(), [4, 3]);
            assert_eq!(o.boxes.len(), 4);
            assert_eq!(o.boxes_raw.shape(), [4, 4]);
            assert_eq!(o.queries_out.shape(), [4, 8]);
        }
    }

    #[test]
    fn coincident_proposals_make_iou_weighting_vanish() {
        let cfg_esa = tiny_cfg(1);
        let mut cfg_full = cfg_esa.clone();
        cfg_full.attn_mode = AttnMode::FullMsa;
        let mut rng = Rng::new(29);
        let state = ModelState::<f64>::init(&cfg_esa, &mut rng).unwrap();
        let fm = rand_fm(&mut rng, cfg_esa.d_model, 4, 4, 8.0);
        let same = BBox::new(4.0, 6.0, 20.0, 26.0);
        let b = BoxSet::new(32.0, 32.0, vec![same; 4]);
        let q = state.q0.tensor().clone();

        let esa = forward_stage(&q, &b, &fm, &state.stages[0], &cfg_esa).unwrap();
        let full = forward_stage(&q, &b, &fm, &state.stages[0], &cfg_full).unwrap();
        assert_eq!(esa.class_logits.data(), full.class_logits.data());
        assert_eq!(esa.boxes_raw.data(), full.boxes_raw.data());
        assert_eq!(esa.queries_out.data(), full.queries_out.data());
        for (a, bb) in esa.boxes.boxes.iter().zip(&full.boxes.boxes) {
            assert_eq!(a.tuple(), bb.tuple());
        }
    }

    #[test]
    fn saturated_masks_reduce_to_ungated_projections() {
        // sigmoid(45) rounds to exactly 1.0 in f64, and gating by 1.0 is an
        // IEEE identity, so a mask head forced into saturation must leave
        // the stage bitwise equal to projecting the raw conv output.
        let mut cfg = tiny_cfg(1);
        cfg.attn_mode = AttnMode::NoMsa;
        let mut rng = Rng::new(5);
        let mut state = ModelState::<f64>::init(&cfg, &mut rng).unwrap();
        let d = cfg.d_model;
        match &mut state.stages[0].head {
            HeadParams::Dcw { masks, .. } => {
                for m in [&mut masks.cls, &mut masks.reg] {
                    let wlen = m.fc2.w.tensor().numel();
                    m.fc2.w.assign(vec![0.0; wlen]);
                    m.fc2.b.assign(vec![45.0; d]);
                }
            }
            _ => unreachable!(),
        }
        let fm = rand_fm(&mut rng, d, 4, 4, 8.0);
        let b = spread_boxes(4);
        let q = state.q0.tensor().clone();
        let out = forward_stage(&q, &b, &fm, &state.stages[0], &cfg).unwrap();

        let sp = &state.stages[0];
        let (conv, proj_cls, proj_reg) = match &sp.head {
            HeadParams::Dcw {
                conv,
                proj_cls,
                proj_reg,
                ..
            } => (conv, proj_cls, proj_reg),
            _ => unreachable!(),
        };
        let rf = roi_align(&fm, &pooling_window(&b), cfg.pooled_size, cfg.samples_per_bin);
        let mixed = conv.apply(&q, &rf.data);
        let oc = proj_cls.apply(&mixed);
        let orr = proj_reg.apply(&mixed);
        let logits = sp.cls_head.apply(&oc);
        let deltas = sp.box_head.apply(&orr);
        let raw = decode_boxes(&base_from_set(&b), &deltas);
        let qo = sp.update.apply(&oc.add(&orr));

        assert_eq!(out.class_logits.data(), logits.data());
        assert_eq!(out.boxes_raw.data(), raw.data());
        assert_eq!(out.queries_out.data(), qo.data());
    }

    #[test]
    fn single_stage_forward_reduces_to_forward_stage() {
        let cfg = tiny_cfg(1);
        let mut rng = Rng::new(17);
        let state = ModelState::<f64>::init(&cfg, &mut rng).unwrap();
        let fm = rand_fm(&mut rng, cfg.d_model, 4, 4, 8.0);
        let outs = forward(&fm, &state, &cfg).unwrap();
        let b = state.initial_boxes(32.0, 32.0);
        let direct = forward_stage(state.q0.tensor(), &b, &fm, &state.stages[0], &cfg).unwrap();
        assert_eq!(outs[0].class_logits.data(), direct.class_logits.data());
        assert_eq!(outs[0].boxes_raw.data(), direct.boxes_raw.data());
        assert_eq!(outs[0].queries_out.data(), direct.queries_out.data());
    }

    #[test]
    fn box_gradients_sever_between_stages() {
        let cfg = tiny_cfg(2);
        let mut rng = Rng::new(41);
        let mut state = ModelState::<f64>::init(&cfg, &mut rng).unwrap();
        let fm = rand_fm(&mut rng, cfg.d_model, 4, 4, 8.0);
        let targets = one_target();

        let outs = forward(&fm, &state, &cfg).unwrap();
        let last = vec![stage_terms(&outs)[1].clone()];
        let loss2 = set_loss(&last, &targets, &cfg.cost).unwrap();
        let l2_base = loss2.value();
        loss2.backward().unwrap();

        // Stage-1 box deltas reach stage 2 only through clamped coordinate
        // data, and b0 only through the severed proposal set and the
        // stage-1 loss; a stage-2-only loss must not touch either leaf.
        assert!(state.stages[0].box_head.w.grad().is_none());
        assert!(state.stages[0].box_head.b.grad().is_none());
        assert!(state.b0.grad().is_none());
        // The query path stays live.
        let g = state.stages[0].attn.w_qkv.grad().expect("query path grad");
        assert!(g.iter().any(|v| v.abs() > 0.0));

        // The severed path still moves the value: perturbing the stage-1
        // box weights changes stage-2's proposals and with them its loss.
        let mut wd = state.stages[0].box_head.w.data().to_vec();
        wd[0] += 1e-3;
        state.stages[0].box_head.w.assign(wd);
        let outs_b = forward(&fm, &state, &cfg).unwrap();
        let last_b = vec![stage_terms(&outs_b)[1].clone()];
        let l2_shift = set_loss(&last_b, &targets, &cfg.cost).unwrap().value();
        assert!(
            (l2_shift - l2_base).abs() > 1e-10,
            "stage-2 loss should react to stage-1 box weights through the data path"
        );
    }

    #[test]
    fn pinned_handoff_matches_values_and_gradients() {
        let cfg = tiny_cfg(2);
        let mut rng = Rng::new(43);
        let state = ModelState::<f64>::init(&cfg, &mut rng).unwrap();
        let fm = rand_fm(&mut rng, cfg.d_model, 4, 4, 8.0);
        let targets = one_target();

        let outs = forward(&fm, &state, &cfg).unwrap();
        let pinned = vec![state.initial_boxes(32.0, 32.0), outs[0].boxes.clone()];

        let loss_a = set_loss(&stage_terms(&outs), &targets, &cfg.cost).unwrap();
        for p in state.params() {
            p.tensor().clear_grad();
        }
        loss_a.backward().unwrap();
        let grads_a: Vec<Option<Vec<f64>>> = state.params().iter().map(|p| p.grad()).collect();

        let outs_p = forward_with_pinned_boxes(&fm, &state, &cfg, &pinned).unwrap();
        let loss_b = set_loss(&stage_terms(&outs_p), &targets, &cfg.cost).unwrap();
        assert_eq!(loss_a.value(), loss_b.value());
        for p in state.params() {
            p.tensor().clear_grad();
        }
        loss_b.backward().unwrap();
        let grads_b: Vec<Option<Vec<f64>>> = state.params().iter().map(|p| p.grad()).collect();

        for (a, b) in grads_a.iter().zip(&grads_b) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn boxes_stay_valid_for_arbitrary_weights() {
        for seed in 1..=5u64 {
            for mode in [DisentangleMode::Dcw, DisentangleMode::Entangled] {
                let mut cfg = tiny_cfg(3);
                cfg.disentangle_mode = mode;
                cfg.dcw_enabled = mode == DisentangleMode::Dcw;
                let mut rng = Rng::new(seed);
                let mut state = ModelState::<f64>::init(&cfg, &mut rng).unwrap();
                // Blow up the delta heads so the raw decode leaves the frame.
                for sp in &mut state.stages {
                    let n = sp.box_head.w.tensor().numel();
                    let wd: Vec<f64> = (0..n).map(|_| rng.uniform(-3.0, 3.0)).collect();
                    sp.box_head.w.assign(wd);
                }
                let fm = rand_fm(&mut rng, cfg.d_model, 4, 4, 8.0);
                let outs = forward(&fm, &state, &cfg).unwrap();
                for o in &outs {
                    for b in &o.boxes.boxes {
                        assert!(b.x1 >= 0.0 && b.y1 >= 0.0);
                        assert!(b.x1 <= b.x2 && b.y1 <= b.y2);
                        assert!(b.x2 <= 32.0 && b.y2 <= 32.0);
                    }
                }
            }
        }
    }

    #[test]
    fn full_model_grad_check_tiny_instance() {
        let cfg = DetectorConfig {
            num_queries: 3,
            d_model: 8,
            heads: 2,
            num_stages: 2,
            num_classes: 1,
            attn_mode: AttnMode::IouEsa,
            dcw_enabled: true,
            disentangle_mode: DisentangleMode::Dcw,
            pooled_size: 3,
            samples_per_bin: 2,
            cost: CostConfig::default(),
        };
        let mut rng = Rng::new(61);
        let state = ModelState::<f64>::init(&cfg, &mut rng).unwrap();
        let fm = rand_fm(&mut rng, cfg.d_model, 4, 4, 8.0);
        let targets = one_target();

        // Freeze both discrete elements at the base point: the box handoff
        // (data in the graph) and the matched pairing (constant during
        // differentiation by contract).
        let outs = forward(&fm, &state, &cfg).unwrap();
        let pinned = vec![state.initial_boxes(32.0, 32.0), outs[0].boxes.clone()];
        let matches: Vec<Vec<(usize, usize)>> = outs
            .iter()
            .map(|o| {
                let c = cost_matrix(&o.class_logits, &o.boxes_raw, &targets, &cfg.cost);
                hungarian(&c).unwrap().assignment
            })
            .collect();

        let check = |probe: &T, install: &dyn Fn(&mut ModelState<f64>, T)| -> f64 {
            grad_check_default(
                |t| {
                    let mut st = state.clone();
                    install(&mut st, t.clone());
                    let outs = forward_with_pinned_boxes(&fm, &st, &cfg, &pinned).unwrap();
                    set_loss_with_matches(&stage_terms(&outs), &targets, &matches, &cfg.cost)
                },
                probe,
            )
            .unwrap()
        };

        let cases: Vec<(&str, T, Box<dyn Fn(&mut ModelState<f64>, T)>)> = vec![
            (
                "q0",
                state.q0.tensor().detach(),
                Box::new(|st, t| st.q0.replace_tensor(t)),
            ),
            (
                "b0",
                state.b0.tensor().detach(),
                Box::new(|st, t| st.b0.replace_tensor(t)),
            ),
            (
                "stage-1 attention",
                state.stages[0].attn.w_qkv.tensor().detach(),
                Box::new(|st, t| st.stages[0].attn.w_qkv.replace_tensor(t)),
            ),
            (
                "stage-1 conv generator",
                match &state.stages[0].head {
                    HeadParams::Dcw { conv, .. } => conv.gen.w_gen.tensor().detach(),
                    _ => unreachable!(),
                },
                Box::new(|st, t| match &mut st.stages[0].head {
                    HeadParams::Dcw { conv, .. } => conv.gen.w_gen.replace_tensor(t),
                    _ => unreachable!(),
                }),
            ),
            (
                "stage-1 mask head",
                match &state.stages[0].head {
                    HeadParams::Dcw { masks, .. } => masks.cls.fc2.w.tensor().detach(),
                    _ => unreachable!(),
                },
                Box::new(|st, t| match &mut st.stages[0].head {
                    HeadParams::Dcw { masks, .. } => masks.cls.fc2.w.replace_tensor(t),
                    _ => unreachable!(),
                }),
            ),
            (
                "stage-1 box head",
                state.stages[0].box_head.w.tensor().detach(),
                Box::new(|st, t| st.stages[0].box_head.w.replace_tensor(t)),
            ),
            (
                "stage-2 class head",
                state.stages[1].cls_head.w.tensor().detach(),
                Box::new(|st, t| st.stages[1].cls_head.w.replace_tensor(t)),
            ),
        ];
        for (what, probe, install) in &cases {
            let err = check(probe, install.as_ref());
            assert!(err < 1e-4, "gradient wrt {} off by {:e}", what, err);
        }
    }

    #[test]
    fn ablation_lattice_all_combinations_run() {
        let modes = [
            AttnMode::FullMsa,
            AttnMode::NoMsa,
            AttnMode::IouAsAttn,
            AttnMode::IouEsa,
        ];
        for &attn in &modes {
            for &dcw in &[false, true] {
                let mut cfg = tiny_cfg(2);
                cfg.attn_mode = attn;
                cfg.dcw_enabled = dcw;
                cfg.disentangle_mode = if dcw {
                    DisentangleMode::Dcw
                } else {
                    DisentangleMode::Entangled
                };
                run_combo(cfg);
            }
        }
        for dm in [DisentangleMode::HalfDim, DisentangleMode::FullDim] {
            let mut cfg = tiny_cfg(2);
            cfg.dcw_enabled = false;
            cfg.disentangle_mode = dm;
            run_combo(cfg);
        }
    }

    fn run_combo(cfg: DetectorConfig) {
        let tag = format!("{}/{}", cfg.attn_mode.as_str(), cfg.disentangle_mode.as_str());
        let mut rng = Rng::new(7);
        let mut state = ModelState::<f64>::init(&cfg, &mut rng).unwrap();
        let fm = rand_fm(&mut rng, cfg.d_model, 4, 4, 8.0);
        let targets = one_target();
        let mut opt = Optimizer::new(1e-3);
        for _ in 0..2 {
            let loss = train_step(&fm, &targets, &mut state, &cfg, &mut opt)
                .unwrap_or_else(|e| panic!("{}: {}", tag, e));
            assert!(loss.is_finite(), "{}: loss {}", tag, loss);
        }
    }

    #[test]
    fn overfit_single_scene() {
        let cfg = DetectorConfig {
            num_queries: 5,
            d_model: 16,
            heads: 2,
            num_stages: 2,
            num_classes: 1,
            attn_mode: AttnMode::IouEsa,
            dcw_enabled: true,
            disentangle_mode: DisentangleMode::Dcw,
            pooled_size: 5,
            samples_per_bin: 2,
            cost: CostConfig::default(),
        };
        let mut rng = Rng::new(3);
        let mut state = ModelState::<f64>::init(&cfg, &mut rng).unwrap();
        let fm = rand_fm(&mut rng, cfg.d_model, 4, 4, 8.0);
        let targets = Targets::new(
            BoxSet::new(
                32.0,
                32.0,
                vec![
                    BBox::new(4.2, 5.1, 14.8, 16.3),
                    BBox::new(18.4, 17.2, 29.6, 28.9),
                ],
            ),
            vec![0, 0],
        );
        // Same schedule shape the harness uses: one step drop late in the run.
        let mut opt = Optimizer::new(0.05);
        let first = train_step(&fm, &targets, &mut state, &cfg, &mut opt).unwrap();
        let mut last = first;
        for step in 1..100 {
            if step == 60 {
                opt.lr *= 0.1;
            }
            last = train_step(&fm, &targets, &mut state, &cfg, &mut opt).unwrap();
        }
        assert!(
            last < 0.1 * first,
            "loss {} after 100 steps, started at {}",
            last,
            first
        );
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bitwise() {
        let cfg = tiny_cfg(2);
        let mut rng = Rng::new(19);
        let mut state = ModelState::<f64>::init(&cfg, &mut rng).unwrap();
        let fm = rand_fm(&mut rng, cfg.d_model, 4, 4, 8.0);
        let targets = one_target();
        let before: Vec<Vec<f64>> = state.params().iter().map(|p| p.data().to_vec()).collect();
        let mut opt = Optimizer::new(0.0);
        train_step(&fm, &targets, &mut state, &cfg, &mut opt).unwrap();
        let after: Vec<Vec<f64>> = state.params().iter().map(|p| p.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_gives_identical_loss_curves() {
        let cfg = tiny_cfg(2);
        let run = || {
            let mut rng = Rng::new(123);
            let mut state = ModelState::<f64>::init(&cfg, &mut rng).unwrap();
            let fm = rand_fm(&mut rng, cfg.d_model, 4, 4, 8.0);
            let targets = one_target();
            let mut opt = Optimizer::new(0.01);
            let losses: Vec<f64> = (0..4)
                .map(|_| train_step(&fm, &targets, &mut state, &cfg, &mut opt).unwrap())
                .collect();
            (losses, state.q0.data().to_vec())
        };
        let (la, qa) = run();
        let (lb, qb) = run();
        assert_eq!(la, lb);
        assert_eq!(qa, qb);
    }

    #[test]
    fn non_finite_features_name_stage_and_step() {
        let cfg = tiny_cfg(1);
        let mut rng = Rng::new(2);
        let state = ModelState::<f64>::init(&cfg, &mut rng).unwrap();
        let fm = FeatureMap::new(
            T::constant(&[cfg.d_model, 4, 4], vec![f64::NAN; cfg.d_model * 16]),
            8.0,
        );
        match forward(&fm, &state, &cfg) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("stage 0"), "message: {}", msg),
            other => panic!("expected a non-finite error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn config_flags_must_agree() {
        let mut cfg = tiny_cfg(2);
        cfg.disentangle_mode = DisentangleMode::Entangled;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.dcw_enabled = false;
        assert!(cfg.validate().is_ok());
        cfg.num_stages = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_roundtrip_restores_outputs() {
        let cfg = tiny_cfg(2);
        let mut rng = Rng::new(1);
        let state_a = ModelState::<f64>::init(&cfg, &mut rng).unwrap();
        let mut rng_b = Rng::new(2);
        let mut state_b = ModelState::<f64>::init(&cfg, &mut rng_b).unwrap();
        let fm = rand_fm(&mut rng, cfg.d_model, 4, 4, 8.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        state_a.save(&path).unwrap();
        state_b.load(&path).unwrap();

        let outs_a = forward(&fm, &state_a, &cfg).unwrap();
        let outs_b = forward(&fm, &state_b, &cfg).unwrap();
        for (a, b) in outs_a.iter().zip(&outs_b) {
            assert_eq!(a.class_logits.data(), b.class_logits.data());
            assert_eq!(a.boxes_raw.data(), b.boxes_raw.data());
            assert_eq!(a.queries_out.data(), b.queries_out.data());
        }
    }
}
