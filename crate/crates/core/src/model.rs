//! Patch transformer: spectral token embedding, positional embedding, a stack
//! of pre-norm encoder blocks, and a pooled softmax classifier.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{
    multi_head_attention, AttentionConfig, AttentionParams, AttentionVars, NormMode, ScoreVariant,
    DEFAULT_TEMPERATURE, NORM_EPS,
};
use crate::autodiff::{check_dropout_rate, Tape, Var};
use crate::param::Parameter;
use crate::{Error, Result, Tensor};

/// Epsilon inside every layer norm.
pub const LN_EPS: f64 = 1e-5;

/// Standard deviation of the learnable positional table at init.
pub const POSITIONAL_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Positional {
    None,
    Sinusoidal,
    Learnable,
}

impl Positional {
    pub fn tag(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Sinusoidal => "sinusoidal",
            Self::Learnable => "learnable",
        }
    }
}

impl core::str::FromStr for Positional {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "sinusoidal" => Ok(Self::Sinusoidal),
            "learnable" => Ok(Self::Learnable),
            _ => Err(Error::Config(format!(
                "unknown positional encoding '{s}'; valid: none, sinusoidal, learnable"
            ))),
        }
    }
}

impl core::fmt::Display for Positional {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub bands: usize,
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub dropout: f64,
    pub num_classes: usize,
    pub variant: ScoreVariant,
    pub norm_mode: NormMode,
    pub temperature: f64,
    pub positional: Positional,
}

impl ModelConfig {
    /// Reference configuration: 16×16 patches, width 64, depth 4, 4 heads,
    /// MLP width 128, dropout 0.1, learnable positions.
    pub fn new(bands: usize, num_classes: usize, variant: ScoreVariant) -> Self {
        Self {
            patch_size: 16,
            bands,
            model_dim: 64,
            depth: 4,
            heads: 4,
            mlp_dim: 128,
            dropout: 0.1,
            num_classes,
            variant,
            norm_mode: variant.default_norm_mode(),
            temperature: DEFAULT_TEMPERATURE,
            positional: Positional::Learnable,
        }
    }

    pub fn tokens(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.model_dim,
            heads: self.heads,
            variant: self.variant,
            norm_mode: self.norm_mode,
            temperature: self.temperature,
            eps: NORM_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("bands", self.bands),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        check_dropout_rate(self.dropout)?;
        self.attention().validate()
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (c, d, m, k, n) = (
            self.bands,
            self.model_dim,
            self.mlp_dim,
            self.num_classes,
            self.tokens(),
        );
        let attn_add = if self.variant.needs_additive_params() {
            let (dh, da) = (d / self.heads, d / self.heads);
            self.heads * (2 * da * dh + 2 * da)
        } else {
            0
        };
        let per_layer = 4 * d * d + attn_add + 4 * d + (d * m + m) + (m * d + d);
        let positional = if self.positional == Positional::Learnable {
            n * d
        } else {
            0
        };
        c * d + positional + self.depth * per_layer + 2 * d + d * k + k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub ln1_scale: Parameter,
    pub ln1_shift: Parameter,
    pub attention: AttentionParams,
    pub ln2_scale: Parameter,
    pub ln2_shift: Parameter,
    pub mlp_w1: Parameter,
    pub mlp_b1: Parameter,
    pub mlp_w2: Parameter,
    pub mlp_b2: Parameter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `[C, D]`
    pub spectral: Parameter,
    /// `[N, D]`, present only for learnable positions.
    pub positional: Option<Parameter>,
    pub layers: Vec<EncoderParams>,
    pub final_ln_scale: Parameter,
    pub final_ln_shift: Parameter,
    /// `[D, K]`
    pub head_w: Parameter,
    /// `[K]`
    pub head_b: Parameter,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, m) = (cfg.model_dim, cfg.mlp_dim);
        let spectral = Parameter::glorot("embed.spectral", &[cfg.bands, d], rng);
        let positional = (cfg.positional == Positional::Learnable).then(|| {
            Parameter::truncated_normal(
                "embed.positional",
                &[cfg.tokens(), d],
                POSITIONAL_INIT_STD,
                rng,
            )
        });
        let attn_cfg = cfg.attention();
        let layers = (0..cfg.depth)
            .map(|l| {
                let p = format!("layers.{l}");
                EncoderParams {
                    ln1_scale: Parameter::ones(format!("{p}.ln1.scale"), &[d], false),
                    ln1_shift: Parameter::zeros(format!("{p}.ln1.shift"), &[d], false),
                    attention: AttentionParams::init(&attn_cfg, &format!("{p}.attn"), rng),
                    ln2_scale: Parameter::ones(format!("{p}.ln2.scale"), &[d], false),
                    ln2_shift: Parameter::zeros(format!("{p}.ln2.shift"), &[d], false),
                    mlp_w1: Parameter::glorot(format!("{p}.mlp.w1"), &[d, m], rng),
                    mlp_b1: Parameter::zeros(format!("{p}.mlp.b1"), &[m], false),
                    mlp_w2: Parameter::glorot(format!("{p}.mlp.w2"), &[m, d], rng),
                    mlp_b2: Parameter::zeros(format!("{p}.mlp.b2"), &[d], false),
                }
            })
            .collect();
        Ok(Self {
            spectral,
            positional,
            layers,
            final_ln_scale: Parameter::ones("head.ln.scale", &[d], false),
            final_ln_shift: Parameter::zeros("head.ln.shift", &[d], false),
            head_w: Parameter::glorot("head.w", &[d, cfg.num_classes], rng),
            head_b: Parameter::zeros("head.b", &[cfg.num_classes], false),
        })
    }

    /// All parameters in a fixed order; [`ModelParams::bind`] and
    /// [`ModelVars::flat`] follow the same order.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        out.push(&self.spectral);
        if let Some(p) = &self.positional {
            out.push(p);
        }
        for l in &self.layers {
            out.push(&l.ln1_scale);
            out.push(&l.ln1_shift);
            out.extend(l.attention.params());
            out.extend([
                &l.ln2_scale,
                &l.ln2_shift,
                &l.mlp_w1,
                &l.mlp_b1,
                &l.mlp_w2,
                &l.mlp_b2,
            ]);
        }
        out.extend([
            &self.final_ln_scale,
            &self.final_ln_shift,
            &self.head_w,
            &self.head_b,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        out.push(&mut self.spectral);
        if let Some(p) = &mut self.positional {
            out.push(p);
        }
        for l in &mut self.layers {
            out.push(&mut l.ln1_scale);
            out.push(&mut l.ln1_shift);
            out.extend(l.attention.params_mut());
            out.extend([
                &mut l.ln2_scale,
                &mut l.ln2_shift,
                &mut l.mlp_w1,
                &mut l.mlp_b1,
                &mut l.mlp_w2,
                &mut l.mlp_b2,
            ]);
        }
        out.extend([
            &mut self.final_ln_scale,
            &mut self.final_ln_shift,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.value.is_finite())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let spectral = self.spectral.bind(tape, trainable);
        let positional = self.positional.as_ref().map(|p| p.bind(tape, trainable));
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let ln1_scale = l.ln1_scale.bind(tape, trainable);
                let ln1_shift = l.ln1_shift.bind(tape, trainable);
                let attention = l.attention.bind(tape, trainable);
                EncoderVars {
                    ln1_scale,
                    ln1_shift,
                    attention,
                    ln2_scale: l.ln2_scale.bind(tape, trainable),
                    ln2_shift: l.ln2_shift.bind(tape, trainable),
                    mlp_w1: l.mlp_w1.bind(tape, trainable),
                    mlp_b1: l.mlp_b1.bind(tape, trainable),
                    mlp_w2: l.mlp_w2.bind(tape, trainable),
                    mlp_b2: l.mlp_b2.bind(tape, trainable),
                }
            })
            .collect();
        ModelVars {
            spectral,
            positional,
            layers,
            final_ln_scale: self.final_ln_scale.bind(tape, trainable),
            final_ln_shift: self.final_ln_shift.bind(tape, trainable),
            head_w: self.head_w.bind(tape, trainable),
            head_b: self.head_b.bind(tape, trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub ln1_scale: Var,
    pub ln1_shift: Var,
    pub attention: AttentionVars,
    pub ln2_scale: Var,
    pub ln2_shift: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub spectral: Var,
    pub positional: Option<Var>,
    pub layers: Vec<EncoderVars>,
    pub final_ln_scale: Var,
    pub final_ln_shift: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    /// Vars in [`ModelParams::params`] order.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        out.push(self.spectral);
        out.extend(self.positional);
        for l in &self.layers {
            out.extend([l.ln1_scale, l.ln1_shift]);
            let a = &l.attention;
            out.extend([a.w_q, a.w_k, a.w_v, a.w_o]);
            for h in &a.additive {
                out.extend([h.w_q, h.w_k, h.w_a, h.b_a]);
            }
            out.extend([
                l.ln2_scale,
                l.ln2_shift,
                l.mlp_w1,
                l.mlp_b1,
                l.mlp_w2,
                l.mlp_b2,
            ]);
        }
        out.extend([
            self.final_ln_scale,
            self.final_ln_shift,
            self.head_w,
            self.head_b,
        ]);
        out
    }
}

/// `[P, P, C] -> [P², D]`; token `i·P + j` is `W_sᵀ x_{i,j}`.
pub fn tokenize_patch(tape: &mut Tape, patch: Var, spectral: Var) -> Result<Var> {
    let shape = tape.shape(patch).to_vec();
    let ws = tape.shape(spectral).to_vec();
    if shape.len() != 3 || shape[0] != shape[1] || ws.len() != 2 || shape[2] != ws[0] {
        return Err(Error::dim("tokenize_patch", &shape, &ws));
    }
    let flat = tape.reshape(patch, &[shape[0] * shape[1], shape[2]])?;
    tape.matmul(flat, spectral)
}

/// Fixed sinusoidal table: `PE[t, 2m] = sin(t / 10000^(2m/D))`,
/// `PE[t, 2m+1] = cos(t / 10000^(2m/D))`.
pub fn sinusoidal_table(tokens: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[tokens, dim]);
    for pos in 0..tokens {
        for c in 0..dim {
            let pair = (c / 2) * 2;
            let angle = pos as f64 / libm::pow(10000.0, pair as f64 / dim as f64);
            t.data_mut()[pos * dim + c] = if c % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            };
        }
    }
    t
}

pub fn add_positions(
    tape: &mut Tape,
    tokens: Var,
    mode: Positional,
    table: Option<Var>,
) -> Result<Var> {
    match mode {
        Positional::None => Ok(tokens),
        Positional::Learnable => {
            let e = table.ok_or_else(|| {
                Error::Config("learnable positions need an embedding table".into())
            })?;
            if tape.shape(e) != tape.shape(tokens) {
                return Err(Error::dim("add_positions", tape.shape(tokens), tape.shape(e)));
            }
            tape.add(tokens, e)
        }
        Positional::Sinusoidal => {
            let s = tape.shape(tokens).to_vec();
            let pe = tape.constant(sinusoidal_table(s[0], s[1]));
            tape.add(tokens, pe)
        }
    }
}

/// Pre-norm residual attention then pre-norm residual MLP. `reference`
/// supplies the key/value stream for cross variants.
pub fn encoder_block<R: Rng + ?Sized>(
    tape: &mut Tape,
    tokens: Var,
    reference: Var,
    vars: &EncoderVars,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let attn_cfg = cfg.attention();
    let normed = tape.layer_norm(tokens, vars.ln1_scale, vars.ln1_shift, LN_EPS)?;
    let kv = if cfg.variant.is_cross() {
        tape.layer_norm(reference, vars.ln1_scale, vars.ln1_shift, LN_EPS)?
    } else {
        normed
    };
    let attn = multi_head_attention(tape, normed, kv, &attn_cfg, &vars.attention)?;
    let attn = tape.dropout(attn.output, cfg.dropout, training, rng)?;
    let mid = tape.add(tokens, attn)?;

    let normed = tape.layer_norm(mid, vars.ln2_scale, vars.ln2_shift, LN_EPS)?;
    let hidden = tape.matmul(normed, vars.mlp_w1)?;
    let hidden = tape.add(hidden, vars.mlp_b1)?;
    let hidden = tape.gelu(hidden);
    let out = tape.matmul(hidden, vars.mlp_w2)?;
    let out = tape.add(out, vars.mlp_b2)?;
    let out = tape.dropout(out, cfg.dropout, training, rng)?;
    tape.add(mid, out)
}

/// Classifier outputs for one patch, both shaped `[1, K]`.
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    pub logits: Var,
    pub probs: Var,
}

pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    patch: Var,
    vars: &ModelVars,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Prediction> {
    let expect = [cfg.patch_size, cfg.patch_size, cfg.bands];
    if tape.shape(patch) != expect {
        return Err(Error::dim("forward", tape.shape(patch), &expect));
    }
    let tokens = tokenize_patch(tape, patch, vars.spectral)?;
    let t0 = add_positions(tape, tokens, cfg.positional, vars.positional)?;
    let mut t = t0;
    for layer in &vars.layers {
        t = encoder_block(tape, t, t0, layer, cfg, training, rng)?;
    }
    let normed = tape.layer_norm(t, vars.final_ln_scale, vars.final_ln_shift, LN_EPS)?;
    let pooled = tape.reduce_mean(normed, 0)?;
    let pooled = tape.reshape(pooled, &[1, cfg.model_dim])?;
    let logits = tape.matmul(pooled, vars.head_w)?;
    let logits = tape.add(logits, vars.head_b)?;
    let probs = tape.softmax_rows(logits)?;
    Ok(Prediction { logits, probs })
}

/// Forward over `[B, P, P, C]`, returning probabilities `[B, K]`.
pub fn batched_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    batch: Var,
    vars: &ModelVars,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let shape = tape.shape(batch).to_vec();
    if shape.len() != 4 {
        return Err(Error::dim("batched_forward", &shape, &[]));
    }
    let mut rows = Vec::with_capacity(shape[0]);
    for b in 0..shape[0] {
        let patch = tape.select(batch, b)?;
        let pred = forward(tape, patch, vars, cfg, training, rng)?;
        rows.push(pred.probs);
    }
    let stacked = tape.stack(&rows)?;
    tape.reshape(stacked, &[shape[0], cfg.num_classes])
}

/// Inference-mode class probabilities for one `[P, P, C]` patch.
pub fn predict(params: &ModelParams, cfg: &ModelConfig, patch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.constant(patch.clone());
    // Dropout is inactive so the generator is never drawn from.
    let mut rng = crate::seeded(0);
    let pred = forward(&mut tape, x, &vars, cfg, false, &mut rng)?;
    tape.value(pred.probs).reshape(&[cfg.num_classes])
}

/// Loss of one labelled patch and the gradient for every parameter in
/// [`ModelParams::params`] order.
pub fn loss_and_grads<R: Rng + ?Sized>(
    params: &ModelParams,
    cfg: &ModelConfig,
    patch: &Tensor,
    target: usize,
    smoothing: f64,
    training: bool,
    rng: &mut R,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let x = tape.constant(patch.clone());
    let pred = forward(&mut tape, x, &vars, cfg, training, rng)?;
    let loss = tape.label_smoothed_ce(pred.probs, &[target], smoothing)?;
    tape.backward(loss)?;
    let grads = vars
        .flat()
        .into_iter()
        .zip(params.params())
        .map(|(v, p)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
        })
        .collect();
    Ok((tape.value(loss).item(), grads))
}
