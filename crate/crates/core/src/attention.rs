//! Multi-head self attention over object queries, in four modes: the
//! standard softmax form, a variant whose softmax numerators are multiplied
//! by pairwise box IoU before row normalization, the degraded form that uses
//! the row-normalized IoU matrix directly as attention, and "none".
//!
//! The module is a pure weight-routing kernel: residual connections and
//! layer normalization belong to the caller. The IoU matrix is data; no
//! gradient flows through it into box coordinates. Its diagonal is forced to
//! 1 before use so every row keeps a strictly positive normalizer and a
//! query can always route to itself.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

use serde::{Deserialize, Serialize};

/// Attention shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnConfig {
    pub d_model: usize,
    pub heads: usize,
}

impl AttnConfig {
    pub fn new(d_model: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && d_model % heads == 0,
            "attention: d_model {} must divide evenly into {} heads",
            d_model,
            heads
        );
        AttnConfig { d_model, heads }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Which attention the query-interaction sublayer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnMode {
    #[serde(rename = "full")]
    FullMsa,
    #[serde(rename = "none")]
    NoMsa,
    #[serde(rename = "iou")]
    IouAsAttn,
    #[serde(rename = "iou-esa")]
    IouEsa,
}

impl AttnMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AttnMode::FullMsa),
            "none" => Ok(AttnMode::NoMsa),
            "iou" => Ok(AttnMode::IouAsAttn),
            "iou-esa" => Ok(AttnMode::IouEsa),
            other => Err(Error::Config(format!(
                "unknown attention mode {:?} (expected full, none, iou, or iou-esa)",
                other
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AttnMode::FullMsa => "full",
            AttnMode::NoMsa => "none",
            AttnMode::IouAsAttn => "iou",
            AttnMode::IouEsa => "iou-esa",
        }
    }
}

/// Fused projection weights for one attention sublayer.
#[derive(Debug, Clone)]
pub struct MhsaParams<S: Scalar> {
    pub w_qkv: Parameter<S>,
    pub b_qkv: Parameter<S>,
    pub w_o: Parameter<S>,
    pub b_o: Parameter<S>,
}

impl<S: Scalar> MhsaParams<S> {
    /// Xavier-uniform weights, zero biases.
    pub fn init(cfg: AttnConfig, rng: &mut Rng, prefix: &str) -> Self {
        let d = cfg.d_model;
        MhsaParams {
            w_qkv: xavier(rng, &format!("{}.w_qkv", prefix), d, 3 * d),
            b_qkv: Parameter::new(format!("{}.b_qkv", prefix), &[3 * d], vec![S::zero(); 3 * d]),
            w_o: xavier(rng, &format!("{}.w_o", prefix), d, d),
            b_o: Parameter::new(format!("{}.b_o", prefix), &[d], vec![S::zero(); d]),
        }
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        vec![&self.w_qkv, &self.b_qkv, &self.w_o, &self.b_o]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_o,
            &mut self.b_o,
        ]
    }
}

pub(crate) fn xavier<S: Scalar>(
    rng: &mut Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Parameter<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<S> = (0..fan_in * fan_out)
        .map(|_| S::from_f(rng.uniform(-a, a)))
        .collect();
    Parameter::new(name, &[fan_in, fan_out], data)
}

/// Copy of `iou` with the diagonal overwritten to exactly 1.
fn with_unit_diag<S: Scalar>(iou: &Tensor<S>) -> Tensor<S> {
    let s = iou.shape();
    assert!(
        s.len() == 2 && s[0] == s[1],
        "attention: iou matrix must be square, got {:?}",
        s
    );
    let n = s[0];
    let mut data = iou.data().to_vec();
    for i in 0..n {
        data[i * n + i] = S::one();
    }
    Tensor::constant(&[n, n], data)
}

/// The IoU-weighted softmax kernel on raw logits: subtracts each row max,
/// exponentiates, multiplies by the (diagonal-forced) IoU entry, and divides
/// by the row sum. `logits` is `[n, n]`, `iou` is `[n, n]` with unit
/// diagonal; the row max is applied as a constant so its shift cancels.
pub fn esa_weights<S: Scalar>(logits: &Tensor<S>, iou: &Tensor<S>) -> Tensor<S> {
    let s = logits.shape();
    assert!(
        s.len() == 2 && s == iou.shape(),
        "esa_weights: logits {:?} and iou {:?} must be equal square shapes",
        s,
        iou.shape()
    );
    let cols = s[1];
    let maxes = crate::tensor::row_max_of(logits.data(), cols);
    let mut expanded = Vec::with_capacity(logits.numel());
    for m in &maxes {
        for _ in 0..cols {
            expanded.push(*m);
        }
    }
    let shift = Tensor::constant(s, expanded);
    logits.sub(&shift).exp().mul(iou).normalize_rows()
}

fn split_heads<S: Scalar>(m: &Tensor<S>, cfg: AttnConfig) -> Vec<Tensor<S>> {
    let dh = cfg.head_dim();
    (0..cfg.heads)
        .map(|h| m.slice_last(h * dh, (h + 1) * dh))
        .collect()
}

/// Shared forward: projects queries, computes per-head routing weights
/// according to the mode, routes values, and recombines. Returns the output
/// `[n, d]` and the stacked weights `[heads, n, n]`.
fn attend<S: Scalar>(
    q: &Tensor<S>,
    iou: Option<&Tensor<S>>,
    params: &MhsaParams<S>,
    cfg: AttnConfig,
    mode: AttnMode,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let d = cfg.d_model;
    assert!(
        q.shape().len() == 2 && q.shape()[1] == d,
        "attention: queries {:?} must be [n, {}]",
        q.shape(),
        d
    );
    if mode == AttnMode::NoMsa {
        return Err(Error::Contract(
            "attention called in mode none; callers must skip the sublayer".into(),
        ));
    }
    let needs_iou = mode == AttnMode::IouEsa || mode == AttnMode::IouAsAttn;
    let iou_diag = if needs_iou {
        let m = iou.ok_or_else(|| {
            Error::Contract(format!("attention mode {} requires an iou matrix", mode.as_str()))
        })?;
        Some(with_unit_diag(m))
    } else {
        None
    };

    let qkv = q.matmul(params.w_qkv.tensor()).add(params.b_qkv.tensor());
    let qm = qkv.slice_last(0, d);
    let km = qkv.slice_last(d, 2 * d);
    let vm = qkv.slice_last(2 * d, 3 * d);
    let qh = split_heads(&qm, cfg);
    let kh = split_heads(&km, cfg);
    let vh = split_heads(&vm, cfg);
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

    let mut outs = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let logits = qh[h].matmul(&kh[h].transpose_last2()).mul_scalar(scale);
        let w = match mode {
            AttnMode::FullMsa => logits.softmax_rows(),
            AttnMode::IouEsa => esa_weights(&logits, iou_diag.as_ref().unwrap()),
            AttnMode::IouAsAttn => iou_diag.as_ref().unwrap().normalize_rows(),
            AttnMode::NoMsa => unreachable!(),
        };
        outs.push(w.matmul(&vh[h]));
        weights.push(w);
    }
    let combined = Tensor::concat_last(&outs)
        .matmul(params.w_o.tensor())
        .add(params.b_o.tensor());
    Ok((combined, Tensor::stack(&weights)))
}

/// Softmax multi-head self attention. Output is the combined heads after the
/// output projection; the caller adds the residual and normalizes.
pub fn standard_msa<S: Scalar>(q: &Tensor<S>, params: &MhsaParams<S>, cfg: AttnConfig) -> Tensor<S> {
    attend(q, None, params, cfg, AttnMode::FullMsa)
        .expect("full attention cannot fail")
        .0
}

/// IoU-weighted self attention: softmax numerators are multiplied by the
/// corresponding IoU entries before row normalization, sharing one IoU
/// matrix across all heads.
pub fn iou_esa<S: Scalar>(
    q: &Tensor<S>,
    iou: &Tensor<S>,
    params: &MhsaParams<S>,
    cfg: AttnConfig,
) -> Tensor<S> {
    attend(q, Some(iou), params, cfg, AttnMode::IouEsa)
        .expect("iou-weighted attention cannot fail given an iou matrix")
        .0
}

/// Per-head routing weights `[heads, n, n]` for any mode that defines them;
/// mode `none` is a contract error since callers skip attention entirely.
pub fn attention_weights<S: Scalar>(
    q: &Tensor<S>,
    iou: Option<&Tensor<S>>,
    params: &MhsaParams<S>,
    cfg: AttnConfig,
    mode: AttnMode,
) -> Result<Tensor<S>> {
    attend(q, iou, params, cfg, mode).map(|(_, w)| w)
}

/// Full sublayer forward used by the pipeline: output plus weights.
pub fn attend_with_weights<S: Scalar>(
    q: &Tensor<S>,
    iou: Option<&Tensor<S>>,
    params: &MhsaParams<S>,
    cfg: AttnConfig,
    mode: AttnMode,
) -> Result<(Tensor<S>, Tensor<S>)> {
    attend(q, iou, params, cfg, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::naive_msa;
    use crate::tensor::grad_check_default;

    type T = Tensor<f64>;

    fn rand_q(rng: &mut Rng, n: usize, d: usize) -> T {
        T::constant(
            &[n, d],
            (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
    }

    fn rand_iou(rng: &mut Rng, n: usize) -> T {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let v = rng.uniform(0.0, 1.0);
                m[i * n + j] = v;
                m[j * n + i] = v;
            }
            m[i * n + i] = 1.0;
        }
        T::constant(&[n, n], m)
    }

    #[test]
    fn single_slot_softmax_weight_is_one() {
        let mut rng = Rng::new(1);
        let cfg = AttnConfig::new(8, 2);
        let p = MhsaParams::<f64>::init(cfg, &mut rng, "a");
        let q = rand_q(&mut rng, 1, 8);
        let w = attention_weights(&q, None, &p, cfg, AttnMode::FullMsa).expect("weights");
        assert!(w.shape() == [2, 1, 1]);
        assert!(w.data().iter().all(|&v| v == 1.0), "N=1 weights must be exactly 1");
    }

    #[test]
    fn equal_query_rows_give_uniform_attention() {
        let mut rng = Rng::new(2);
        let cfg = AttnConfig::new(8, 2);
        let p = MhsaParams::<f64>::init(cfg, &mut rng, "a");
        let row: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&row);
        }
        let q = T::constant(&[4, 8], data);
        let w = attention_weights(&q, None, &p, cfg, AttnMode::FullMsa).expect("weights");
        for &v in w.data() {
            assert!((v - 0.25).abs() < 1e-12, "expected uniform 1/4, got {}", v);
        }
    }

    #[test]
    fn matches_naive_per_head_oracle() {
        let mut rng = Rng::new(3);
        let cfg = AttnConfig::new(8, 2);
        let p = MhsaParams::<f64>::init(cfg, &mut rng, "a");
        let q = rand_q(&mut rng, 4, 8);
        let got = standard_msa(&q, &p, cfg);
        let want = naive_msa(
            q.data(),
            p.w_qkv.data(),
            p.b_qkv.data(),
            p.w_o.data(),
            p.b_o.data(),
            4,
            8,
            2,
        );
        for (i, (&g, &w)) in got.data().iter().zip(&want).enumerate() {
            assert!(
                (g - w).abs() < 1e-12,
                "output {} disagrees with naive oracle: {} vs {}",
                i,
                g,
                w
            );
        }
    }

    #[test]
    fn all_ones_iou_reduces_to_softmax_bitwise() {
        let mut rng = Rng::new(4);
        let cfg = AttnConfig::new(8, 4);
        let p = MhsaParams::<f64>::init(cfg, &mut rng, "a");
        let q = rand_q(&mut rng, 5, 8);
        let ones = T::filled(&[5, 5], 1.0);
        let (full_o, full_w) =
            attend_with_weights(&q, None, &p, cfg, AttnMode::FullMsa).expect("full");
        let (esa_o, esa_w) =
            attend_with_weights(&q, Some(&ones), &p, cfg, AttnMode::IouEsa).expect("esa");
        for (a, b) in full_w.data().iter().zip(esa_w.data()) {
            assert!(
                a.to_bits() == b.to_bits(),
                "weights must be bit-identical with all-ones iou: {} vs {}",
                a,
                b
            );
        }
        for (a, b) in full_o.data().iter().zip(esa_o.data()) {
            assert!(
                a.to_bits() == b.to_bits(),
                "outputs must be bit-identical with all-ones iou: {} vs {}",
                a,
                b
            );
        }
    }

    #[test]
    fn identity_iou_gives_one_hot_rows() {
        let mut rng = Rng::new(5);
        let cfg = AttnConfig::new(8, 2);
        let p = MhsaParams::<f64>::init(cfg, &mut rng, "a");
        let q = rand_q(&mut rng, 4, 8);
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let iou = T::constant(&[4, 4], eye);
        let w = attention_weights(&q, Some(&iou), &p, cfg, AttnMode::IouEsa).expect("weights");
        for h in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        w.at(&[h, i, j]) == want,
                        "identity iou must one-hot the diagonal, got {} at ({},{},{})",
                        w.at(&[h, i, j]),
                        h,
                        i,
                        j
                    );
                }
            }
        }
    }

    #[test]
    fn hand_value_two_queries() {
        // Logits all zero, iou row [1, 0.5]: numerators 1 and 0.5.
        let logits = T::zeros(&[2, 2]);
        let iou = T::constant(&[2, 2], vec![1.0, 0.5, 0.5, 1.0]);
        let w = esa_weights(&logits, &iou);
        let want = [2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
        for (i, (&g, &want)) in w.data().iter().zip(&want).enumerate() {
            assert!((g - want).abs() < 1e-15, "entry {}: {} != {}", i, g, want);
        }
    }

    #[test]
    fn rows_sum_to_one_in_all_defined_modes() {
        let mut rng = Rng::new(6);
        let cfg = AttnConfig::new(12, 3);
        let p = MhsaParams::<f64>::init(cfg, &mut rng, "a");
        let q = rand_q(&mut rng, 6, 12);
        let iou = rand_iou(&mut rng, 6);
        for mode in [AttnMode::FullMsa, AttnMode::IouEsa, AttnMode::IouAsAttn] {
            let w = attention_weights(&q, Some(&iou), &p, cfg, mode).expect("weights");
            for h in 0..3 {
                for i in 0..6 {
                    let mut s = 0.0;
                    for j in 0..6 {
                        s += w.at(&[h, i, j]);
                    }
                    assert!(
                        (s - 1.0).abs() < 1e-9,
                        "mode {} head {} row {} sums to {}",
                        mode.as_str(),
                        h,
                        i,
                        s
                    );
                }
            }
        }
    }

    #[test]
    fn mode_none_is_a_contract_error() {
        let mut rng = Rng::new(7);
        let cfg = AttnConfig::new(4, 1);
        let p = MhsaParams::<f64>::init(cfg, &mut rng, "a");
        let q = rand_q(&mut rng, 2, 4);
        assert!(
            attention_weights(&q, None, &p, cfg, AttnMode::NoMsa).is_err(),
            "mode none has no weight matrix"
        );
    }

    #[test]
    fn iou_as_attn_identity_routes_identically() {
        let mut rng = Rng::new(8);
        let cfg = AttnConfig::new(4, 2);
        let p = MhsaParams::<f64>::init(cfg, &mut rng, "a");
        let q = rand_q(&mut rng, 3, 4);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let iou = T::constant(&[3, 3], eye);
        let w = attention_weights(&q, Some(&iou), &p, cfg, AttnMode::IouAsAttn).expect("weights");
        for h in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!(w.at(&[h, i, j]) == want, "identity iou must route one-hot");
                }
            }
        }
    }

    #[test]
    fn shift_invariance_of_weighted_rows() {
        let mut rng = Rng::new(9);
        let logits = T::constant(&[3, 3], (0..9).map(|_| rng.uniform(-2.0, 2.0)).collect());
        let iou = rand_iou(&mut rng, 3);
        let base = esa_weights(&logits, &iou);
        // Add a different constant to each row.
        let shifts = T::constant(
            &[3, 3],
            vec![7.5, 7.5, 7.5, -3.25, -3.25, -3.25, 100.0, 100.0, 100.0],
        );
        let shifted = esa_weights(&logits.add(&shifts), &iou);
        for (a, b) in base.data().iter().zip(shifted.data()) {
            assert!(
                (a - b).abs() < 1e-12,
                "row shift changed weights: {} vs {}",
                a,
                b
            );
        }
    }

    #[test]
    fn increasing_one_iou_entry_is_monotone() {
        let mut rng = Rng::new(10);
        let logits = T::constant(&[3, 3], (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let mut iou_lo = rand_iou(&mut rng, 3).data().to_vec();
        iou_lo[1] = 0.3;
        let mut iou_hi = iou_lo.clone();
        iou_hi[1] = 0.8;
        let w_lo = esa_weights(&logits, &T::constant(&[3, 3], iou_lo));
        let w_hi = esa_weights(&logits, &T::constant(&[3, 3], iou_hi));
        assert!(
            w_hi.at(&[0, 1]) > w_lo.at(&[0, 1]),
            "weight(0,1) must strictly increase with its iou"
        );
        for j in [0usize, 2] {
            assert!(
                w_hi.at(&[0, j]) <= w_lo.at(&[0, j]),
                "other weights in the row must weakly decrease"
            );
        }
        for i in 1..3 {
            for j in 0..3 {
                assert!(
                    w_hi.at(&[i, j]) == w_lo.at(&[i, j]),
                    "rows other than 0 must be untouched"
                );
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = Rng::new(11);
        let cfg = AttnConfig::new(8, 2);
        let p = MhsaParams::<f64>::init(cfg, &mut rng, "a");
        let q = rand_q(&mut rng, 4, 8);
        let iou = rand_iou(&mut rng, 4);
        let perm = [2usize, 0, 3, 1];
        let qp = q.select_rows(&perm);
        let mut iou_p = vec![0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                iou_p[i * 4 + j] = iou.at(&[perm[i], perm[j]]);
            }
        }
        let iou_p = T::constant(&[4, 4], iou_p);
        let base = iou_esa(&q, &iou, &p, cfg);
        let permuted = iou_esa(&qp, &iou_p, &p, cfg);
        for i in 0..4 {
            for c in 0..8 {
                let a = permuted.at(&[i, c]);
                let b = base.at(&[perm[i], c]);
                assert!(
                    (a - b).abs() < 1e-12,
                    "row {} channel {}: permuted {} vs base {}",
                    i,
                    c,
                    a,
                    b
                );
            }
        }
    }

    #[test]
    fn grad_check_wrt_queries_and_all_params() {
        let mut rng = Rng::new(12);
        let cfg = AttnConfig::new(4, 2);
        let p = MhsaParams::<f64>::init(cfg, &mut rng, "a");
        let q = rand_q(&mut rng, 3, 4);
        let iou = rand_iou(&mut rng, 3);

        let err = grad_check_default(
            |t| iou_esa(t, &iou, &p, cfg).mul(t).sum(),
            &q,
        )
        .expect("grad check vs q");
        assert!(err < 1e-5, "gradient wrt queries off by {:e}", err);

        for idx in 0..4 {
            let probe = p.params()[idx].tensor().detach();
            let p2 = p.clone();
            let q2 = q.detach();
            let iou2 = iou.detach();
            let err = grad_check_default(
                move |t| {
                    let mut alt = p2.clone();
                    alt.params_mut()[idx].replace_tensor(t.clone());
                    iou_esa(&q2, &iou2, &alt, cfg).sum()
                },
                &probe,
            )
            .expect("grad check vs param");
            assert!(
                err < 1e-5,
                "gradient wrt parameter {} off by {:e}",
                p.params()[idx].name,
                err
            );
        }
    }
}
