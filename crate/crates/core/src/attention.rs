//! Multi-head attention with a pluggable score function.
//!
//! Every head projects, optionally projects its query and key rows onto the
//! unit sphere, scores every query against every key, softmaxes the rows and
//! aggregates values. The score family covers squared cosine (the default),
//! plain and absolute cosine, temperature-scaled squared cosine, dot product,
//! scaled dot product, additive scoring, a per-head mix of squared cosine and
//! scaled dot product, and cross-stream versions of four of them.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::param::Parameter;
use crate::{Error, Result, Tensor};

/// Guard used when normalizing query and key rows.
pub const NORM_EPS: f64 = 1e-12;

/// Default temperature for [`ScoreVariant::TempCosSq`].
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreVariant {
    CosSq,
    Cos,
    AbsCos,
    TempCosSq,
    DotProduct,
    ScaledDotProduct,
    Additive,
    MixedCosSqSdp,
    CrossCosSq,
    CrossCos,
    CrossScaledDotProduct,
    CrossAdditive,
}

/// The formula a single head applies once its variant has been resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    CosSq,
    Cos,
    AbsCos,
    TempCosSq,
    Dot,
    ScaledDot,
    Additive,
}

impl ScoreKind {
    pub fn is_cosine_family(self) -> bool {
        matches!(self, Self::CosSq | Self::Cos | Self::AbsCos | Self::TempCosSq)
    }
}

impl ScoreVariant {
    pub const ALL: [ScoreVariant; 12] = [
        Self::CosSq,
        Self::Cos,
        Self::AbsCos,
        Self::TempCosSq,
        Self::DotProduct,
        Self::ScaledDotProduct,
        Self::Additive,
        Self::MixedCosSqSdp,
        Self::CrossScaledDotProduct,
        Self::CrossCosSq,
        Self::CrossCos,
        Self::CrossAdditive,
    ];

    /// Stable string used on the command line and in result files.
    pub fn tag(self) -> &'static str {
        match self {
            Self::CosSq => "cs2",
            Self::Cos => "cs",
            Self::AbsCos => "abscs",
            Self::TempCosSq => "tempcs2",
            Self::DotProduct => "dp",
            Self::ScaledDotProduct => "sdp",
            Self::Additive => "add",
            Self::MixedCosSqSdp => "msa-cs2",
            Self::CrossScaledDotProduct => "c-sdp",
            Self::CrossCosSq => "c-cs2",
            Self::CrossCos => "c-cs",
            Self::CrossAdditive => "c-add",
        }
    }

    pub fn is_cross(self) -> bool {
        matches!(
            self,
            Self::CrossCosSq | Self::CrossCos | Self::CrossScaledDotProduct | Self::CrossAdditive
        )
    }

    pub fn needs_additive_params(self) -> bool {
        matches!(self, Self::Additive | Self::CrossAdditive)
    }

    /// Number of heads that use squared cosine under the mixed variant.
    pub fn mixed_cos_heads(heads: usize) -> usize {
        heads.div_ceil(2)
    }

    /// Score formula used by `head` out of `heads`.
    pub fn head_kind(self, head: usize, heads: usize) -> ScoreKind {
        match self {
            Self::CosSq | Self::CrossCosSq => ScoreKind::CosSq,
            Self::Cos | Self::CrossCos => ScoreKind::Cos,
            Self::AbsCos => ScoreKind::AbsCos,
            Self::TempCosSq => ScoreKind::TempCosSq,
            Self::DotProduct => ScoreKind::Dot,
            Self::ScaledDotProduct | Self::CrossScaledDotProduct => ScoreKind::ScaledDot,
            Self::Additive | Self::CrossAdditive => ScoreKind::Additive,
            Self::MixedCosSqSdp => {
                if head < Self::mixed_cos_heads(heads) {
                    ScoreKind::CosSq
                } else {
                    ScoreKind::ScaledDot
                }
            }
        }
    }

    /// Both for any variant with a cosine head, None otherwise.
    pub fn default_norm_mode(self) -> NormMode {
        if self.head_kind(0, 1).is_cosine_family() {
            NormMode::Both
        } else {
            NormMode::None
        }
    }

    pub fn valid_tags() -> String {
        let tags: Vec<&str> = Self::ALL.iter().map(|v| v.tag()).collect();
        tags.join(", ")
    }
}

impl fmt::Display for ScoreVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ScoreVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.tag() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown score variant '{s}'; valid tags: {}",
                    Self::valid_tags()
                ))
            })
    }
}

/// Which of the query and key rows are projected onto the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormMode {
    None,
    QueryOnly,
    KeyOnly,
    Both,
}

impl NormMode {
    pub const ALL: [NormMode; 4] = [Self::None, Self::QueryOnly, Self::KeyOnly, Self::Both];

    pub fn tag(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::QueryOnly => "query",
            Self::KeyOnly => "key",
            Self::Both => "both",
        }
    }

    pub fn normalizes_query(self) -> bool {
        matches!(self, Self::QueryOnly | Self::Both)
    }

    pub fn normalizes_key(self) -> bool {
        matches!(self, Self::KeyOnly | Self::Both)
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.tag() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown norm mode '{s}'; valid: none, query, key, both"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub variant: ScoreVariant,
    pub norm_mode: NormMode,
    pub temperature: f64,
    pub eps: f64,
}

impl AttentionConfig {
    /// Config with the variant's default normalization and temperature.
    pub fn new(model_dim: usize, heads: usize, variant: ScoreVariant) -> Result<Self> {
        let cfg = Self {
            model_dim,
            heads,
            variant,
            norm_mode: variant.default_norm_mode(),
            temperature: DEFAULT_TEMPERATURE,
            eps: NORM_EPS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_norm_mode(mut self, mode: NormMode) -> Self {
        self.norm_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model dimension {} must be a positive multiple of the head count {}",
                self.model_dim, self.heads
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Width of the additive scorer's hidden layer.
    pub fn additive_dim(&self) -> usize {
        self.head_dim()
    }

    /// Normalization applied to `head`. The scaled-dot-product heads of the
    /// mixed variant never normalize.
    pub fn head_norm_mode(&self, head: usize) -> NormMode {
        match (self.variant, self.variant.head_kind(head, self.heads)) {
            (ScoreVariant::MixedCosSqSdp, ScoreKind::ScaledDot) => NormMode::None,
            _ => self.norm_mode,
        }
    }
}

/// Per-head additive scorer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveHead {
    /// `[d_a, d_h]`
    pub w_q: Parameter,
    /// `[d_a, d_h]`
    pub w_k: Parameter,
    /// `[d_a]`
    pub w_a: Parameter,
    /// `[d_a]`
    pub b_a: Parameter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Parameter,
    pub w_k: Parameter,
    pub w_v: Parameter,
    pub w_o: Parameter,
    /// One entry per head for additive variants, empty otherwise.
    pub additive: Vec<AdditiveHead>,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(cfg: &AttentionConfig, prefix: &str, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let (dh, da) = (cfg.head_dim(), cfg.additive_dim());
        let w_q = Parameter::glorot(format!("{prefix}.w_q"), &[d, d], rng);
        let w_k = Parameter::glorot(format!("{prefix}.w_k"), &[d, d], rng);
        let w_v = Parameter::glorot(format!("{prefix}.w_v"), &[d, d], rng);
        let w_o = Parameter::glorot(format!("{prefix}.w_o"), &[d, d], rng);
        let additive = if cfg.variant.needs_additive_params() {
            (0..cfg.heads)
                .map(|h| AdditiveHead {
                    w_q: Parameter::glorot(format!("{prefix}.add{h}.w_q"), &[da, dh], rng),
                    w_k: Parameter::glorot(format!("{prefix}.add{h}.w_k"), &[da, dh], rng),
                    w_a: Parameter::glorot(format!("{prefix}.add{h}.w_a"), &[da], rng),
                    b_a: Parameter::zeros(format!("{prefix}.add{h}.b_a"), &[da], false),
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            w_q,
            w_k,
            w_v,
            w_o,
            additive,
        }
    }

    /// Parameters in a fixed order.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = alloc::vec![&self.w_q, &self.w_k, &self.w_v, &self.w_o];
        for a in &self.additive {
            out.extend([&a.w_q, &a.w_k, &a.w_a, &a.b_a]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = alloc::vec![&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o];
        for a in &mut self.additive {
            out.extend([&mut a.w_q, &mut a.w_k, &mut a.w_a, &mut a.b_a]);
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AttentionVars {
        AttentionVars {
            w_q: self.w_q.bind(tape, trainable),
            w_k: self.w_k.bind(tape, trainable),
            w_v: self.w_v.bind(tape, trainable),
            w_o: self.w_o.bind(tape, trainable),
            additive: self
                .additive
                .iter()
                .map(|a| AdditiveVars {
                    w_q: a.w_q.bind(tape, trainable),
                    w_k: a.w_k.bind(tape, trainable),
                    w_a: a.w_a.bind(tape, trainable),
                    b_a: a.b_a.bind(tape, trainable),
                })
                .collect(),
        }
    }
}

/// Attention parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub additive: Vec<AdditiveVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdditiveVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_a: Var,
    pub b_a: Var,
}

/// `Q = tokens_q·W_Q`, `K = tokens_kv·W_K`, `V = tokens_kv·W_V`.
pub fn project_qkv(
    tape: &mut Tape,
    tokens_q: Var,
    tokens_kv: Var,
    vars: &AttentionVars,
) -> Result<(Var, Var, Var)> {
    if tape.shape(tokens_q) != tape.shape(tokens_kv) {
        return Err(Error::dim(
            "project_qkv",
            tape.shape(tokens_q),
            tape.shape(tokens_kv),
        ));
    }
    let q = tape.matmul(tokens_q, vars.w_q)?;
    let k = tape.matmul(tokens_kv, vars.w_k)?;
    let v = tape.matmul(tokens_kv, vars.w_v)?;
    Ok((q, k, v))
}

const UNIT_TOLERANCE: f64 = 1e-9;

fn check_unit_rows(t: &Tensor, eps: f64, what: &str) -> Result<()> {
    let (rows, d) = t.rows_cols();
    for r in 0..rows {
        let row = &t.data()[r * d..(r + 1) * d];
        let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
        if n >= eps && (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Contract(format!(
                "{what} row {r} has norm {n}; cosine scores need normalized rows"
            )));
        }
    }
    Ok(())
}

/// Score matrix `A_h` of head `head` for already-normalized `q` and `k`
/// (`[N, d_h]` each).
pub fn score(
    tape: &mut Tape,
    cfg: &AttentionConfig,
    head: usize,
    q: Var,
    k: Var,
    additive: Option<&AdditiveVars>,
) -> Result<Var> {
    let kind = cfg.variant.head_kind(head, cfg.heads);
    if kind.is_cosine_family() && cfg.head_norm_mode(head) == NormMode::Both {
        check_unit_rows(tape.value(q), cfg.eps, "query")?;
        check_unit_rows(tape.value(k), cfg.eps, "key")?;
    }
    if kind == ScoreKind::Additive {
        let params = additive.ok_or_else(|| {
            Error::Config(format!(
                "variant {} needs additive scorer parameters",
                cfg.variant
            ))
        })?;
        return additive_scores(tape, q, k, params);
    }
    let s = tape.matmul_nt(q, k)?;
    Ok(match kind {
        ScoreKind::CosSq => tape.square(s),
        ScoreKind::Cos | ScoreKind::Dot => s,
        ScoreKind::AbsCos => tape.abs(s),
        ScoreKind::TempCosSq => {
            let sq = tape.square(s);
            tape.scale(sq, 1.0 / cfg.temperature)
        }
        ScoreKind::ScaledDot => tape.scale(s, 1.0 / libm::sqrt(cfg.head_dim() as f64)),
        ScoreKind::Additive => unreachable!(),
    })
}

/// `a_ij = w_aᵀ tanh(W_q q_i + W_k k_j + b_a)` for all pairs.
fn additive_scores(tape: &mut Tape, q: Var, k: Var, p: &AdditiveVars) -> Result<Var> {
    let n = tape.shape(q)[0];
    let m = tape.shape(k)[0];
    let da = tape.shape(p.w_a)[0];
    let pq = tape.matmul_nt(q, p.w_q)?;
    let pk = tape.matmul_nt(k, p.w_k)?;
    let pk = tape.add(pk, p.b_a)?;
    let pair = tape.pairwise_add(pq, pk)?;
    let act = tape.tanh(pair);
    let w = tape.reshape(p.w_a, &[da, 1])?;
    let s = tape.matmul(act, w)?;
    tape.reshape(s, &[n, m])
}

/// Single additive score from plain vectors and head weights.
pub fn additive_score(q: &[f64], k: &[f64], head: &AdditiveHead) -> Result<f64> {
    let wq = &head.w_q.value;
    let wk = &head.w_k.value;
    let da = head.w_a.value.len();
    if wq.shape() != [da, q.len()] || wk.shape() != [da, k.len()] || head.b_a.value.len() != da {
        return Err(Error::dim("additive_score", wq.shape(), &[q.len(), k.len()]));
    }
    let mut s = 0.0;
    for a in 0..da {
        let mut z = head.b_a.value.data()[a];
        for (t, &qv) in q.iter().enumerate() {
            z += wq.data()[a * q.len() + t] * qv;
        }
        for (t, &kv) in k.iter().enumerate() {
            z += wk.data()[a * k.len() + t] * kv;
        }
        s += head.w_a.value.data()[a] * libm::tanh(z);
    }
    Ok(s)
}

/// `softmax_rows(A_h) · V_h`; also returns the attention weights.
pub fn attend(tape: &mut Tape, scores: Var, v: Var) -> Result<(Var, Var)> {
    let alpha = tape.softmax_rows(scores)?;
    let out = tape.matmul(alpha, v)?;
    Ok((out, alpha))
}

/// Output of [`multi_head_attention`] with per-head intermediates exposed.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `[N, D]` after the output projection.
    pub output: Var,
    /// Row-stochastic `[N, N]` weights per head.
    pub weights: Vec<Var>,
    /// `[N, d_h]` per head before concatenation.
    pub head_outputs: Vec<Var>,
}

/// Full attention layer: project, split, normalize, score, softmax, attend,
/// merge and output projection. `tokens_kv` equals `tokens_q` for the
/// self-attention variants.
pub fn multi_head_attention(
    tape: &mut Tape,
    tokens_q: Var,
    tokens_kv: Var,
    cfg: &AttentionConfig,
    vars: &AttentionVars,
) -> Result<AttentionOutput> {
    cfg.validate()?;
    if cfg.variant.needs_additive_params() && vars.additive.len() != cfg.heads {
        return Err(Error::Config(format!(
            "variant {} needs {} additive heads, got {}",
            cfg.variant,
            cfg.heads,
            vars.additive.len()
        )));
    }
    let (q, k, v) = project_qkv(tape, tokens_q, tokens_kv, vars)?;
    let qs = tape.split_heads(q, cfg.heads)?;
    let ks = tape.split_heads(k, cfg.heads)?;
    let vs = tape.split_heads(v, cfg.heads)?;
    let mut weights = Vec::with_capacity(cfg.heads);
    let mut head_outputs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let mut qh = tape.select(qs, h)?;
        let mut kh = tape.select(ks, h)?;
        let vh = tape.select(vs, h)?;
        let mode = cfg.head_norm_mode(h);
        if mode.normalizes_query() {
            qh = tape.l2_normalize_rows(qh, cfg.eps);
        }
        if mode.normalizes_key() {
            kh = tape.l2_normalize_rows(kh, cfg.eps);
        }
        let a = score(tape, cfg, h, qh, kh, vars.additive.get(h))?;
        let (o, alpha) = attend(tape, a, vh)?;
        weights.push(alpha);
        head_outputs.push(o);
    }
    let stacked = tape.stack(&head_outputs)?;
    let merged = tape.merge_heads(stacked)?;
    let output = tape.matmul(merged, vars.w_o)?;
    Ok(AttentionOutput {
        output,
        weights,
        head_outputs,
    })
}
