//! Per-query interaction head. Pooled box features are mixed channelwise by
//! two 1x1 layers whose weights are generated from each object query, then
//! gated by per-query sigmoid channel masks, one mask per task branch, so
//! classification and regression read different channels of the same pooled
//! evidence. Each branch flattens its gated features into an object
//! embedding; the two embeddings drive the task heads and, summed, a
//! feed-forward update that produces the next stage's queries.

use crate::attention::xavier;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

/// Epsilon inside every layer-norm root in the head.
pub const LN_EPS: f64 = 1e-6;

/// Dense affine map `[.., d_in] -> [.., d_out]`; xavier weights, zero bias.
/// Rank-3 inputs are folded over their leading axes and restored after.
#[derive(Debug, Clone)]
pub struct Linear<S: Scalar> {
    pub w: Parameter<S>,
    pub b: Parameter<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn init(d_in: usize, d_out: usize, rng: &mut Rng, name: &str) -> Self {
        Linear {
            w: xavier(rng, &format!("{}.w", name), d_in, d_out),
            b: Parameter::new(format!("{}.b", name), &[d_out], vec![S::zero(); d_out]),
        }
    }

    pub fn apply(&self, x: &Tensor<S>) -> Tensor<S> {
        let (d_in, d_out) = (self.w.shape()[0], self.w.shape()[1]);
        let s = x.shape();
        assert!(
            s.len() >= 2 && *s.last().unwrap() == d_in,
            "linear: input {:?} must end in {}",
            s,
            d_in
        );
        if s.len() == 2 {
            return x.matmul(self.w.tensor()).add(self.b.tensor());
        }
        let rows = x.numel() / d_in;
        let y = x
            .reshape(&[rows, d_in])
            .matmul(self.w.tensor())
            .add(self.b.tensor());
        let mut out_shape = s.to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        y.reshape(&out_shape)
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Learnable gamma/beta for layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LnParams<S: Scalar> {
    pub gamma: Parameter<S>,
    pub beta: Parameter<S>,
}

impl<S: Scalar> LnParams<S> {
    pub fn init(width: usize, name: &str) -> Self {
        LnParams {
            gamma: Parameter::new(format!("{}.gamma", name), &[width], vec![S::one(); width]),
            beta: Parameter::new(format!("{}.beta", name), &[width], vec![S::zero(); width]),
        }
    }

    pub fn apply(&self, x: &Tensor<S>) -> Tensor<S> {
        x.layer_norm(self.gamma.tensor(), self.beta.tensor(), LN_EPS)
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// One affine map from a query row to two stacked per-query parameter
/// blocks: a `c_in x d_k` reduction and a `d_k x c_out` expansion.
#[derive(Debug, Clone)]
pub struct DynamicParamsGen<S: Scalar> {
    pub w_gen: Parameter<S>,
    pub b_gen: Parameter<S>,
    c_in: usize,
    d_k: usize,
    c_out: usize,
}

impl<S: Scalar> DynamicParamsGen<S> {
    pub fn init(
        d_q: usize,
        c_in: usize,
        d_k: usize,
        c_out: usize,
        rng: &mut Rng,
        name: &str,
    ) -> Self {
        let width = c_in * d_k + d_k * c_out;
        DynamicParamsGen {
            w_gen: xavier(rng, &format!("{}.w_gen", name), d_q, width),
            b_gen: Parameter::new(format!("{}.b_gen", name), &[width], vec![S::zero(); width]),
            c_in,
            d_k,
            c_out,
        }
    }

    /// Per-query parameter blocks `[n, c_in, d_k]` and `[n, d_k, c_out]`.
    pub fn generate(&self, q: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
        assert!(
            q.shape().len() == 2 && q.shape()[1] == self.w_gen.shape()[0],
            "parameter generator: queries {:?} must be [n, {}]",
            q.shape(),
            self.w_gen.shape()[0]
        );
        let n = q.shape()[0];
        let cut = self.c_in * self.d_k;
        let flat = q.matmul(self.w_gen.tensor()).add(self.b_gen.tensor());
        let p1 = flat.slice_last(0, cut).reshape(&[n, self.c_in, self.d_k]);
        let p2 = flat
            .slice_last(cut, cut + self.d_k * self.c_out)
            .reshape(&[n, self.d_k, self.c_out]);
        (p1, p2)
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        vec![&self.w_gen, &self.b_gen]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![&mut self.w_gen, &mut self.b_gen]
    }
}

/// Two query-generated 1x1 channel-mixing layers over pooled features, each
/// followed by layer normalization and relu. The mixing acts per spatial
/// position; positions interact only through the query that generated the
/// weights.
#[derive(Debug, Clone)]
pub struct DynamicConv<S: Scalar> {
    pub gen: DynamicParamsGen<S>,
    pub ln1: LnParams<S>,
    pub ln2: LnParams<S>,
}

impl<S: Scalar> DynamicConv<S> {
    pub fn init(
        d_q: usize,
        c_in: usize,
        d_k: usize,
        c_out: usize,
        rng: &mut Rng,
        name: &str,
    ) -> Self {
        DynamicConv {
            gen: DynamicParamsGen::init(d_q, c_in, d_k, c_out, rng, name),
            ln1: LnParams::init(d_k, &format!("{}.ln1", name)),
            ln2: LnParams::init(c_out, &format!("{}.ln2", name)),
        }
    }

    /// `q` is `[n, d_q]`, `r` is `[n, p, c_in]`; output is `[n, p, c_out]`.
    pub fn apply(&self, q: &Tensor<S>, r: &Tensor<S>) -> Tensor<S> {
        let (p1, p2) = self.gen.generate(q);
        let h = self.ln1.apply(&r.bmm(&p1)).relu();
        self.ln2.apply(&h.bmm(&p2)).relu()
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut out = self.gen.params();
        out.extend(self.ln1.params());
        out.extend(self.ln2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut out = self.gen.params_mut();
        out.extend(self.ln1.params_mut());
        out.extend(self.ln2.params_mut());
        out
    }
}

/// Bottleneck `d_in -> d_hidden -> d_out` emitting a sigmoid channel mask.
#[derive(Debug, Clone)]
pub struct BottleneckMask<S: Scalar> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

impl<S: Scalar> BottleneckMask<S> {
    pub fn init(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut Rng, name: &str) -> Self {
        BottleneckMask {
            fc1: Linear::init(d_in, d_hidden, rng, &format!("{}.fc1", name)),
            fc2: Linear::init(d_hidden, d_out, rng, &format!("{}.fc2", name)),
        }
    }

    /// Mask strictly inside (0, 1), one row per query.
    pub fn mask(&self, q: &Tensor<S>) -> Tensor<S> {
        self.fc2.apply(&self.fc1.apply(q).relu()).sigmoid()
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut out = self.fc1.params();
        out.extend(self.fc2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut out = self.fc1.params_mut();
        out.extend(self.fc2.params_mut());
        out
    }
}

/// The pair of mask bottlenecks, one per task branch.
#[derive(Debug, Clone)]
pub struct ChannelMaskHeads<S: Scalar> {
    pub cls: BottleneckMask<S>,
    pub reg: BottleneckMask<S>,
}

impl<S: Scalar> ChannelMaskHeads<S> {
    pub fn init(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut Rng, name: &str) -> Self {
        ChannelMaskHeads {
            cls: BottleneckMask::init(d_in, d_hidden, d_out, rng, &format!("{}.cls", name)),
            reg: BottleneckMask::init(d_in, d_hidden, d_out, rng, &format!("{}.reg", name)),
        }
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut out = self.cls.params();
        out.extend(self.reg.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut out = self.cls.params_mut();
        out.extend(self.reg.params_mut());
        out
    }
}

/// Both branch masks for a batch of queries: (classification, regression).
pub fn dcw_masks<S: Scalar>(q: &Tensor<S>, heads: &ChannelMaskHeads<S>) -> (Tensor<S>, Tensor<S>) {
    (heads.cls.mask(q), heads.reg.mask(q))
}

/// Gates features `[n, p, d]` by a per-query channel mask `[n, d]`; every
/// spatial position of a query shares the same mask row.
pub fn apply_dcw<S: Scalar>(r: &Tensor<S>, mask: &Tensor<S>) -> Tensor<S> {
    r.scale_channels(mask)
}

/// Per-branch object embeddings read by the task heads.
#[derive(Debug, Clone)]
pub struct ObjectEmbeddings<S: Scalar> {
    pub cls: Tensor<S>,
    pub reg: Tensor<S>,
}

/// Flattens pooled features `[n, positions, channels]` and projects each
/// query's flat vector to an embedding row.
#[derive(Debug, Clone)]
pub struct FlattenProj<S: Scalar> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

impl<S: Scalar> FlattenProj<S> {
    pub fn init(
        positions: usize,
        channels: usize,
        d_out: usize,
        rng: &mut Rng,
        name: &str,
    ) -> Self {
        FlattenProj {
            fc1: Linear::init(positions * channels, d_out, rng, &format!("{}.fc1", name)),
            fc2: Linear::init(d_out, d_out, rng, &format!("{}.fc2", name)),
        }
    }

    /// Linear projection of the flattened grid plus a rectified residual
    /// correction. The correction gives the branch access to ratios of
    /// pooled sums (a box center estimate is one), which no single linear
    /// map of the flattened features can express.
    pub fn apply(&self, r: &Tensor<S>) -> Tensor<S> {
        let s = r.shape();
        assert!(
            s.len() == 3,
            "flatten projection expects [n, positions, channels], got {:?}",
            s
        );
        let h = self.fc1.apply(&r.reshape(&[s[0], s[1] * s[2]]));
        h.add(&self.fc2.apply(&h.relu()))
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

/// Independent embeddings for the two branches; the projections share no
/// parameters, so each branch can be tuned without disturbing the other.
pub fn project_embeddings<S: Scalar>(
    r_c: &Tensor<S>,
    r_r: &Tensor<S>,
    proj_c: &FlattenProj<S>,
    proj_r: &FlattenProj<S>,
) -> ObjectEmbeddings<S> {
    ObjectEmbeddings {
        cls: proj_c.apply(r_c),
        reg: proj_r.apply(r_r),
    }
}

/// Residual feed-forward block (width 2d, relu) with layer normalization
/// that turns summed object embeddings into the next stage's queries.
#[derive(Debug, Clone)]
pub struct QueryUpdate<S: Scalar> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
    pub ln: LnParams<S>,
}

impl<S: Scalar> QueryUpdate<S> {
    pub fn init(d: usize, rng: &mut Rng, name: &str) -> Self {
        QueryUpdate {
            fc1: Linear::init(d, 2 * d, rng, &format!("{}.fc1", name)),
            fc2: Linear::init(2 * d, d, rng, &format!("{}.fc2", name)),
            ln: LnParams::init(d, &format!("{}.ln", name)),
        }
    }

    pub fn apply(&self, q_sum: &Tensor<S>) -> Tensor<S> {
        let ffn = self.fc2.apply(&self.fc1.apply(q_sum).relu());
        self.ln.apply(&q_sum.add(&ffn))
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut out = self.fc1.params();
        out.extend(self.fc2.params());
        out.extend(self.ln.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut out = self.fc1.params_mut();
        out.extend(self.fc2.params_mut());
        out.extend(self.ln.params_mut());
        out
    }
}

/// Next-stage queries from the summed branch embeddings.
pub fn update_query<S: Scalar>(o: &ObjectEmbeddings<S>, upd: &QueryUpdate<S>) -> Tensor<S> {
    upd.apply(&o.cls.add(&o.reg))
}
