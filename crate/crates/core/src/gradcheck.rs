//! Layered gradient verification behind the `gradcheck` subcommand.
//!
//! Three scopes, each comparing reverse-mode gradients against central
//! differences: every differentiable primitive at kink-free base points,
//! the assembled attention / dynamic-head / pooling / loss modules, and the
//! complete two-stage detector with its box handoff and matched pairing
//! frozen so the probed function is the one the graph differentiates.

use crate::attention::{iou_esa, standard_msa, AttnConfig, AttnMode, MhsaParams};
use crate::dynamic_head::{update_query, BottleneckMask, DynamicConv, ObjectEmbeddings, QueryUpdate};
use crate::error::{Error, Result};
use crate::geometry::{pairwise_iou, BBox, BoxSet};
use crate::matcher::{cost_matrix, hungarian, set_loss_with_matches, CostConfig, Targets};
use crate::pipeline::{
    forward, forward_with_pinned_boxes, DetectorConfig, DisentangleMode, ModelState, StageOutput,
};
use crate::rng::Rng;
use crate::roi_align::{roi_align, FeatureMap};
use crate::tensor::{grad_check_default, Tensor};

type T = Tensor<f64>;

/// Error ceiling for primitives and module-level checks.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Error ceiling for the end-to-end detector check.
pub const FULL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Modules,
    Full,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "primitives" => Ok(Scope::Primitives),
            "modules" => Ok(Scope::Modules),
            "full" => Ok(Scope::Full),
            other => Err(Error::Config(format!(
                "unknown gradient-check scope {:?} (expected primitives, modules, or full)",
                other
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Scope::Primitives => "primitives",
            Scope::Modules => "modules",
            Scope::Full => "full",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.worst < self.tol
    }
}

pub fn run(scope: Scope) -> Result<Vec<GradReport>> {
    match scope {
        Scope::Primitives => primitives(),
        Scope::Modules => modules(),
        Scope::Full => full(),
    }
}

fn rt(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> T {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(lo, hi)).collect();
    T::constant(shape, data)
}

/// Magnitudes in [lo, hi] with random signs; keeps every entry away from
/// zero so relu/abs style kinks stay out of finite-difference reach.
fn rt_offset(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> T {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.uniform(lo, hi);
            if rng.next_u64() & 1 == 1 {
                -m
            } else {
                m
            }
        })
        .collect();
    T::constant(shape, data)
}

fn rep(name: &'static str, worst: f64, tol: f64) -> GradReport {
    GradReport { name, worst, tol }
}

fn primitives() -> Result<Vec<GradReport>> {
    let mut rng = Rng::new(271_828);
    let r = &mut rng;
    let mut v: Vec<GradReport> = Vec::new();

    // Elementwise pair ops, both operands probed.
    {
        let a = rt(r, &[3, 4], -1.0, 1.0);
        let b = rt(r, &[3, 4], -1.0, 1.0);
        let wt = rt(r, &[3, 4], -1.0, 1.0);
        let pair = |f: &dyn Fn(&T, &T) -> T| -> Result<f64> {
            let w1 = grad_check_default(|x| f(x, &b).mul(&wt).sum(), &a)?;
            let w2 = grad_check_default(|x| f(&a, x).mul(&wt).sum(), &b)?;
            Ok(w1.max(w2))
        };
        v.push(rep("add", pair(&|x, y| x.add(y))?, PRIMITIVE_TOL));
        v.push(rep("sub", pair(&|x, y| x.sub(y))?, PRIMITIVE_TOL));
        v.push(rep("mul", pair(&|x, y| x.mul(y))?, PRIMITIVE_TOL));
    }
    {
        let a = rt(r, &[3, 4], -1.0, 1.0);
        let b = rt_offset(r, &[3, 4], 0.5, 1.5);
        let wt = rt(r, &[3, 4], -1.0, 1.0);
        let w1 = grad_check_default(|x| x.div(&b).mul(&wt).sum(), &a)?;
        let w2 = grad_check_default(|x| a.div(x).mul(&wt).sum(), &b)?;
        v.push(rep("div", w1.max(w2), PRIMITIVE_TOL));
    }
    // Suffix broadcasting: a matrix against a per-column vector.
    {
        let a = rt(r, &[3, 4], -1.0, 1.0);
        let b = rt(r, &[4], -1.0, 1.0);
        let wt = rt(r, &[3, 4], -1.0, 1.0);
        let w1 = grad_check_default(|x| x.add(&b).mul(&wt).sum(), &a)?;
        let w2 = grad_check_default(|x| a.add(x).mul(&wt).sum(), &b)?;
        let w3 = grad_check_default(|x| a.mul(x).mul(&wt).sum(), &b)?;
        v.push(rep("broadcast", w1.max(w2).max(w3), PRIMITIVE_TOL));
    }
    {
        let a = rt(r, &[2, 5], -1.0, 1.0);
        let wt = rt(r, &[2, 5], -1.0, 1.0);
        let one = |name: &'static str, f: &dyn Fn(&T) -> T| -> Result<GradReport> {
            Ok(rep(
                name,
                grad_check_default(|x| f(x).mul(&wt).sum(), &a)?,
                PRIMITIVE_TOL,
            ))
        };
        v.push(one("neg", &|x| x.neg())?);
        v.push(one("mul_scalar", &|x| x.mul_scalar(1.7))?);
        v.push(one("add_scalar", &|x| x.add_scalar(0.3))?);
        v.push(one("exp", &|x| x.exp())?);
        v.push(one("sigmoid", &|x| x.sigmoid())?);
        v.push(one("softplus", &|x| x.softplus())?);
    }
    {
        let a = rt_offset(r, &[2, 5], 0.2, 1.2);
        let wt = rt(r, &[2, 5], -1.0, 1.0);
        let w1 = grad_check_default(|x| x.relu().mul(&wt).sum(), &a)?;
        let w2 = grad_check_default(|x| x.abs_val().mul(&wt).sum(), &a)?;
        v.push(rep("relu", w1, PRIMITIVE_TOL));
        v.push(rep("abs", w2, PRIMITIVE_TOL));
    }
    // Ties between operands (and clamp edges) are kinks; bases keep a gap.
    {
        let a = rt(r, &[3, 4], -1.0, 1.0);
        let gap = rt_offset(r, &[3, 4], 0.3, 0.9);
        let b = T::constant(
            &[3, 4],
            a.data().iter().zip(gap.data()).map(|(x, g)| x + g).collect(),
        );
        let wt = rt(r, &[3, 4], -1.0, 1.0);
        let wmin = grad_check_default(|x| x.minimum(&b).mul(&wt).sum(), &a)?
            .max(grad_check_default(|x| a.minimum(x).mul(&wt).sum(), &b)?);
        let wmax = grad_check_default(|x| x.maximum(&b).mul(&wt).sum(), &a)?
            .max(grad_check_default(|x| a.maximum(x).mul(&wt).sum(), &b)?);
        v.push(rep("minimum", wmin, PRIMITIVE_TOL));
        v.push(rep("maximum", wmax, PRIMITIVE_TOL));

        let mut vals = Vec::new();
        for i in 0..12 {
            // Half well inside the clamp window, half well outside.
            vals.push(if i % 2 == 0 {
                r.uniform(-0.5, 0.5)
            } else if i % 4 == 1 {
                r.uniform(1.1, 1.6)
            } else {
                r.uniform(-1.6, -1.1)
            });
        }
        let c = T::constant(&[3, 4], vals);
        v.push(rep(
            "clamp",
            grad_check_default(|x| x.clamp(-0.8, 0.8).mul(&wt).sum(), &c)?,
            PRIMITIVE_TOL,
        ));
    }
    {
        let a = rt(r, &[3, 4], -1.0, 1.0);
        let b = rt(r, &[4, 2], -1.0, 1.0);
        let wt = rt(r, &[3, 2], -1.0, 1.0);
        let w1 = grad_check_default(|x| x.matmul(&b).mul(&wt).sum(), &a)?;
        let w2 = grad_check_default(|x| a.matmul(x).mul(&wt).sum(), &b)?;
        v.push(rep("matmul", w1.max(w2), PRIMITIVE_TOL));
    }
    {
        let a = rt(r, &[2, 3, 4], -1.0, 1.0);
        let b = rt(r, &[2, 4, 2], -1.0, 1.0);
        let wt = rt(r, &[2, 3, 2], -1.0, 1.0);
        let w1 = grad_check_default(|x| x.bmm(&b).mul(&wt).sum(), &a)?;
        let w2 = grad_check_default(|x| a.bmm(x).mul(&wt).sum(), &b)?;
        v.push(rep("bmm", w1.max(w2), PRIMITIVE_TOL));
    }
    {
        let a = rt(r, &[2, 3, 4], -1.0, 1.0);
        let wt = rt(r, &[2, 4, 3], -1.0, 1.0);
        v.push(rep(
            "transpose",
            grad_check_default(|x| x.transpose_last2().mul(&wt).sum(), &a)?,
            PRIMITIVE_TOL,
        ));
    }
    {
        let a = rt(r, &[2, 6], -1.0, 1.0);
        let wt = rt(r, &[3, 4], -1.0, 1.0);
        v.push(rep(
            "reshape",
            grad_check_default(|x| x.reshape(&[3, 4]).mul(&wt).sum(), &a)?,
            PRIMITIVE_TOL,
        ));
    }
    {
        let a = rt(r, &[3, 8], -1.0, 1.0);
        let wt = rt(r, &[3, 3], -1.0, 1.0);
        v.push(rep(
            "slice",
            grad_check_default(|x| x.slice_last(2, 5).mul(&wt).sum(), &a)?,
            PRIMITIVE_TOL,
        ));
    }
    {
        let a = rt(r, &[3, 2], -1.0, 1.0);
        let b = rt(r, &[3, 3], -1.0, 1.0);
        let wt = rt(r, &[3, 5], -1.0, 1.0);
        let w1 = grad_check_default(|x| T::concat_last(&[x.clone(), b.clone()]).mul(&wt).sum(), &a)?;
        let w2 = grad_check_default(|x| T::concat_last(&[a.clone(), x.clone()]).mul(&wt).sum(), &b)?;
        v.push(rep("concat", w1.max(w2), PRIMITIVE_TOL));
    }
    {
        let a = rt(r, &[2, 3], -1.0, 1.0);
        let b = rt(r, &[2, 3], -1.0, 1.0);
        let wt = rt(r, &[2, 2, 3], -1.0, 1.0);
        let w1 = grad_check_default(|x| T::stack(&[x.clone(), b.clone()]).mul(&wt).sum(), &a)?;
        let w2 = grad_check_default(|x| T::stack(&[a.clone(), x.clone()]).mul(&wt).sum(), &b)?;
        v.push(rep("stack", w1.max(w2), PRIMITIVE_TOL));
    }
    {
        // A repeated row exercises gradient accumulation into one source.
        let a = rt(r, &[5, 3], -1.0, 1.0);
        let wt = rt(r, &[4, 3], -1.0, 1.0);
        v.push(rep(
            "select_rows",
            grad_check_default(|x| x.select_rows(&[4, 0, 2, 2]).mul(&wt).sum(), &a)?,
            PRIMITIVE_TOL,
        ));
    }
    {
        let a = rt(r, &[3, 4], -1.0, 1.0);
        v.push(rep("sum", grad_check_default(|x| x.sum(), &a)?, PRIMITIVE_TOL));
        v.push(rep("mean", grad_check_default(|x| x.mean(), &a)?, PRIMITIVE_TOL));
    }
    {
        let a = rt(r, &[4, 6], -2.0, 2.0);
        let wt = rt(r, &[4, 6], -1.0, 1.0);
        v.push(rep(
            "softmax_rows",
            grad_check_default(|x| x.softmax_rows().mul(&wt).sum(), &a)?,
            PRIMITIVE_TOL,
        ));
    }
    {
        let a = rt(r, &[4, 6], 0.2, 1.5);
        let wt = rt(r, &[4, 6], -1.0, 1.0);
        v.push(rep(
            "normalize_rows",
            grad_check_default(|x| x.normalize_rows().mul(&wt).sum(), &a)?,
            PRIMITIVE_TOL,
        ));
    }
    {
        let a = rt(r, &[4, 8], -1.0, 1.0);
        let gamma = rt(r, &[8], 0.5, 1.5);
        let beta = rt(r, &[8], -0.5, 0.5);
        let wt = rt(r, &[4, 8], -1.0, 1.0);
        let w1 = grad_check_default(|x| x.layer_norm(&gamma, &beta, 1e-6).mul(&wt).sum(), &a)?;
        let w2 = grad_check_default(|x| a.layer_norm(x, &beta, 1e-6).mul(&wt).sum(), &gamma)?;
        let w3 = grad_check_default(|x| a.layer_norm(&gamma, x, 1e-6).mul(&wt).sum(), &beta)?;
        v.push(rep("layer_norm", w1.max(w2).max(w3), PRIMITIVE_TOL));
    }
    {
        let a = rt(r, &[3, 4, 6], -1.0, 1.0);
        let m = rt(r, &[3, 6], 0.1, 0.9);
        let wt = rt(r, &[3, 4, 6], -1.0, 1.0);
        let w1 = grad_check_default(|x| x.scale_channels(&m).mul(&wt).sum(), &a)?;
        let w2 = grad_check_default(|x| a.scale_channels(x).mul(&wt).sum(), &m)?;
        v.push(rep("scale_channels", w1.max(w2), PRIMITIVE_TOL));
    }
    Ok(v)
}

fn modules() -> Result<Vec<GradReport>> {
    let mut rng = Rng::new(314_159);
    let r = &mut rng;
    let mut v: Vec<GradReport> = Vec::new();

    let cfg = || AttnConfig::new(8, 2);
    let params: MhsaParams<f64> = MhsaParams::init(cfg(), r, "attn");
    let q = rt(r, &[4, 8], -1.0, 1.0);
    let wt = rt(r, &[4, 8], -1.0, 1.0);
    {
        let mut worst = grad_check_default(|x| standard_msa(x, &params, cfg()).mul(&wt).sum(), &q)?;
        let probes: [(&str, &T); 4] = [
            ("w_qkv", params.w_qkv.tensor()),
            ("b_qkv", params.b_qkv.tensor()),
            ("w_o", params.w_o.tensor()),
            ("b_o", params.b_o.tensor()),
        ];
        for (which, base) in probes {
            let w = grad_check_default(
                |x| {
                    let mut p = params.clone();
                    match which {
                        "w_qkv" => p.w_qkv.replace_tensor(x.clone()),
                        "b_qkv" => p.b_qkv.replace_tensor(x.clone()),
                        "w_o" => p.w_o.replace_tensor(x.clone()),
                        _ => p.b_o.replace_tensor(x.clone()),
                    }
                    standard_msa(&q, &p, cfg()).mul(&wt).sum()
                },
                &base.detach(),
            )?;
            worst = worst.max(w);
        }
        v.push(rep("attention", worst, PRIMITIVE_TOL));
    }
    {
        let boxes = BoxSet::new(
            32.0,
            32.0,
            vec![
                BBox::new(2.1, 3.2, 12.7, 14.9),
                BBox::new(8.4, 6.1, 20.3, 18.8),
                BBox::new(15.2, 12.7, 29.1, 27.4),
                BBox::new(4.6, 16.3, 13.9, 28.2),
            ],
        );
        let iou = pairwise_iou(&boxes);
        let w1 = grad_check_default(|x| iou_esa(x, &iou, &params, cfg()).mul(&wt).sum(), &q)?;
        let w2 = grad_check_default(
            |x| {
                let mut p = params.clone();
                p.w_qkv.replace_tensor(x.clone());
                iou_esa(&q, &iou, &p, cfg()).mul(&wt).sum()
            },
            &params.w_qkv.tensor().detach(),
        )?;
        v.push(rep("iou_esa_attention", w1.max(w2), PRIMITIVE_TOL));
    }
    {
        let conv: DynamicConv<f64> = DynamicConv::init(8, 8, 2, 8, r, "conv");
        let qc = rt(r, &[3, 8], -1.0, 1.0);
        let rf = rt(r, &[3, 4, 8], -1.0, 1.0);
        let wt = rt(r, &[3, 4, 8], -1.0, 1.0);
        let mut worst = grad_check_default(|x| conv.apply(x, &rf).mul(&wt).sum(), &qc)?;
        worst = worst.max(grad_check_default(|x| conv.apply(&qc, x).mul(&wt).sum(), &rf)?);
        worst = worst.max(grad_check_default(
            |x| {
                let mut c = conv.clone();
                c.gen.w_gen.replace_tensor(x.clone());
                c.apply(&qc, &rf).mul(&wt).sum()
            },
            &conv.gen.w_gen.tensor().detach(),
        )?);
        v.push(rep("dynamic_conv", worst, PRIMITIVE_TOL));
    }
    {
        let mask: BottleneckMask<f64> = BottleneckMask::init(8, 2, 8, r, "mask");
        let qc = rt(r, &[3, 8], -1.0, 1.0);
        let rf = rt(r, &[3, 4, 8], -1.0, 1.0);
        let wt = rt(r, &[3, 4, 8], -1.0, 1.0);
        let mut worst =
            grad_check_default(|x| rf.scale_channels(&mask.mask(x)).mul(&wt).sum(), &qc)?;
        for which in ["fc1.w", "fc2.w", "fc2.b"] {
            let base = match which {
                "fc1.w" => mask.fc1.w.tensor().detach(),
                "fc2.w" => mask.fc2.w.tensor().detach(),
                _ => mask.fc2.b.tensor().detach(),
            };
            let w = grad_check_default(
                |x| {
                    let mut m = mask.clone();
                    match which {
                        "fc1.w" => m.fc1.w.replace_tensor(x.clone()),
                        "fc2.w" => m.fc2.w.replace_tensor(x.clone()),
                        _ => m.fc2.b.replace_tensor(x.clone()),
                    }
                    rf.scale_channels(&m.mask(&qc)).mul(&wt).sum()
                },
                &base,
            )?;
            worst = worst.max(w);
        }
        v.push(rep("channel_masks", worst, PRIMITIVE_TOL));
    }
    {
        let upd: QueryUpdate<f64> = QueryUpdate::init(8, r, "update");
        let o = ObjectEmbeddings {
            cls: rt(r, &[3, 8], -1.0, 1.0),
            reg: rt(r, &[3, 8], -1.0, 1.0),
        };
        let wt = rt(r, &[3, 8], -1.0, 1.0);
        let w1 = grad_check_default(
            |x| {
                let o2 = ObjectEmbeddings {
                    cls: x.clone(),
                    reg: o.reg.clone(),
                };
                update_query(&o2, &upd).mul(&wt).sum()
            },
            &o.cls,
        )?;
        let w2 = grad_check_default(
            |x| {
                let mut u = upd.clone();
                u.fc1.w.replace_tensor(x.clone());
                update_query(&o, &u).mul(&wt).sum()
            },
            &upd.fc1.w.tensor().detach(),
        )?;
        v.push(rep("query_update", w1.max(w2), PRIMITIVE_TOL));
    }
    {
        // Pooling is linear in the feature values; box coordinates are data.
        let fm_data = rt(r, &[3, 5, 5], -1.0, 1.0);
        let boxes = BoxSet::new(
            20.0,
            20.0,
            vec![BBox::new(2.3, 3.1, 13.7, 15.2), BBox::new(6.2, 1.4, 18.9, 10.8)],
        );
        let wt = rt(r, &[2, 9, 3], -1.0, 1.0);
        let worst = grad_check_default(
            |x| {
                let fm = FeatureMap::new(x.clone(), 4.0);
                roi_align(&fm, &boxes, 3, 2).data.mul(&wt).sum()
            },
            &fm_data,
        )?;
        v.push(rep("roi_pooling", worst, PRIMITIVE_TOL));
    }
    {
        let targets = Targets::new(
            BoxSet::new(
                32.0,
                32.0,
                vec![BBox::new(5.0, 6.0, 17.0, 19.0), BBox::new(18.0, 14.0, 30.0, 29.0)],
            ),
            vec![0, 0],
        );
        let logits = rt(r, &[4, 1], -1.5, 1.5);
        // Raw decoded corners near but never on target coordinates, so the
        // l1 and overlap terms stay off their kinks.
        let boxes = T::constant(
            &[4, 4],
            vec![
                4.3, 5.6, 16.2, 18.1, 17.3, 13.4, 29.2, 28.1, 2.2, 21.6, 11.8, 30.4, 21.7, 2.3,
                30.8, 12.6,
            ],
        );
        let ccfg = CostConfig::default();
        let pairs = hungarian(&cost_matrix(&logits, &boxes, &targets, &ccfg))?.assignment;
        let loss = |lg: &T, bx: &T| {
            set_loss_with_matches(
                &[(lg.clone(), bx.clone())],
                &targets,
                std::slice::from_ref(&pairs),
                &ccfg,
            )
        };
        let w1 = grad_check_default(|x| loss(x, &boxes), &logits)?;
        let w2 = grad_check_default(|x| loss(&logits, x), &boxes)?;
        v.push(rep("matched_set_loss", w1.max(w2), PRIMITIVE_TOL));
    }
    Ok(v)
}

fn stage_terms(outs: &[StageOutput<f64>]) -> Vec<(T, T)> {
    outs.iter()
        .map(|o| (o.class_logits.clone(), o.boxes_raw.clone()))
        .collect()
}

fn full() -> Result<Vec<GradReport>> {
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
    let state = ModelState::<f64>::init(&cfg, &mut rng)?;
    let fm = FeatureMap::new(rt(&mut rng, &[cfg.d_model, 4, 4], -1.0, 1.0), 8.0);
    let targets = Targets::new(
        BoxSet::new(32.0, 32.0, vec![BBox::new(6.3, 9.1, 21.7, 24.9)]),
        vec![0],
    );

    // Freeze the two discrete elements at the base point: handed-off boxes
    // (data in the graph) and the matched pairing (constant by contract).
    let outs = forward(&fm, &state, &cfg)?;
    let pinned = vec![state.initial_boxes(32.0, 32.0), outs[0].boxes.clone()];
    let mut matches = Vec::with_capacity(outs.len());
    for o in &outs {
        let c = cost_matrix(&o.class_logits, &o.boxes_raw, &targets, &cfg.cost);
        matches.push(hungarian(&c)?.assignment);
    }

    let probes: [(&'static str, &str); 8] = [
        ("detector_q0", "q0"),
        ("detector_b0", "b0"),
        ("detector_s0_attention", "s0.attn.w_qkv"),
        ("detector_s0_conv_generator", "s0.conv.w_gen"),
        ("detector_s0_mask_head", "s0.mask.cls.fc2.w"),
        ("detector_s0_box_head", "s0.box_head.w"),
        ("detector_s1_class_head", "s1.cls_head.w"),
        // the stage-0 update feeds stage 1, so its gradient is live; the
        // final stage's update head never reaches the loss
        ("detector_s0_update", "s0.update.fc1.w"),
    ];
    let mut v = Vec::with_capacity(probes.len());
    for (label, pname) in probes {
        let base = state
            .params()
            .into_iter()
            .find(|p| p.name == pname)
            .unwrap_or_else(|| panic!("no parameter named {}", pname))
            .tensor()
            .detach();
        let worst = grad_check_default(
            |x| {
                let mut st = state.clone();
                for p in st.params_mut() {
                    if p.name == pname {
                        p.replace_tensor(x.clone());
                    }
                }
                let outs = forward_with_pinned_boxes(&fm, &st, &cfg, &pinned)
                    .expect("pinned forward on the checked instance");
                set_loss_with_matches(&stage_terms(&outs), &targets, &matches, &cfg.cost)
            },
            &base,
        )?;
        v.push(rep(label, worst, FULL_TOL));
    }
    Ok(v)
}
