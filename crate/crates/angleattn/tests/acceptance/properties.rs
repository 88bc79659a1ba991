//! Invariant properties. Each entry drives one deterministic proptest runner;
//! strategies draw shapes and a seed, bulk data comes from the seed.

use std::collections::BTreeSet;
use std::fmt::Debug;
use std::num::NonZeroUsize;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng;

use angleattn::npy::{self, NpyData};
use angleattn::threads::Threaded;
use angleattn_core::attention::{
    multi_head_attention, score, AttentionConfig, AttentionParams, NormMode, ScoreVariant,
    DEFAULT_TEMPERATURE,
};
use angleattn_core::autodiff::{Tape, Var};
use angleattn_core::data::{
    extract_patch, inject_noise, stratified_split, synth_scene, HyperCube, LabelMap, SplitSpec,
    SynthSpec,
};
use angleattn_core::gradcheck::grad_check;
use angleattn_core::model::{
    add_positions, encoder_block, forward, loss_and_grads, predict, tokenize_patch, ModelConfig,
    ModelParams, Positional,
};
use angleattn_core::param::Parameter;
use angleattn_core::tensor::{l2_normalize_rows, softmax_rows};
use angleattn_core::train::{
    clip_gradients, run_experiment, AdamW, ClipMode, EvalReport, Experiment, TrainConfig,
};
use angleattn_core::{seeded, Error, Sequential, Tensor};

use crate::cli_props;

pub struct Property {
    pub name: &'static str,
    pub check: fn(u32) -> Result<(), String>,
}

pub fn all() -> Vec<Property> {
    macro_rules! props {
        ($($f:path => $name:literal),* $(,)?) => { vec![$(Property { name: $name, check: $f }),*] };
    }
    props![
        op_shapes => "op output shapes depend on input shapes only",
        softmax => "softmax rows are distributions and shift invariant",
        l2_normalize => "l2 normalization is a unit-norm idempotent projection",
        op_gradients => "backward matches central differences for every op",
        seeded_determinism => "fixed seed gives bit-identical op sequences",
        row_stochastic => "attention weights are row-stochastic for every variant",
        score_scale_invariance => "cosine scores ignore scaling, dot product does not",
        score_sign => "squared and absolute cosine ignore sign, cosine negates",
        score_symmetry => "cosine scores are symmetric in their arguments",
        unit_norm_collapse => "unit rows collapse cosine onto (scaled) dot product",
        global_scale_invariance => "global input scaling keeps weights and scales outputs",
        attention_gradients => "attention gradients match central differences",
        shape_chain => "model shape chain ends in a probability vector",
        pure_inference => "dropout 0 makes the model a pure function",
        model_gradients => "end-to-end gradients match central differences",
        param_count => "closed-form parameter count matches allocation",
        split_proportions => "split proportions within one pixel, background unused",
        mirror_padding => "mirror padding only repeats cube values",
        synthetic_separability => "clean synthetic scenes are angularly separable",
        noise => "noise injection keeps shape and is seed-deterministic",
        metric_oracle => "metrics equal a per-pixel counting oracle",
        kappa_bounds => "kappa stays below OA and is 1 only on diagonals",
        adamw_descent => "AdamW descends monotonically on a quadratic",
        training_determinism => "equal seeds give bit-identical checkpoints",
        clipping => "clipping never grows a norm or turns a gradient",
        cli_props::reproducible => "manifest alone regenerates identical outputs",
        cli_props::exit_codes => "exit codes separate usage from runtime errors",
    ]
}

pub(crate) fn run<S>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S: Strategy,
    S::Value: Debug,
{
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(RngAlgorithm::ChaCha);
    TestRunner::new_with_rng(config, rng)
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

pub(crate) fn ok<T>(r: angleattn_core::Result<T>) -> Result<T, TestCaseError> {
    r.map_err(|e| TestCaseError::fail(e.to_string()))
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn grads_of(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
        })
        .collect()
}

fn op_shapes(cases: u32) -> Result<(), String> {
    let dims = (1..5usize, 1..5usize, 1..5usize, 1..4usize, 1..4usize, any::<u64>());
    run(cases, dims, |(m, k, n, b, h, seed)| {
        let mut rng = seeded(seed);
        let mut t = Tape::new();
        let mut leaf = |t: &mut Tape, s: &[usize]| t.leaf(uniform(&mut rng, s, -2.0, 2.0), true);
        let a = leaf(&mut t, &[m, k]);
        let bm = leaf(&mut t, &[k, n]);
        let c = leaf(&mut t, &[n, k]);
        let x = leaf(&mut t, &[m, n]);
        let y = leaf(&mut t, &[m, n]);
        let row = leaf(&mut t, &[n]);
        let bat = leaf(&mut t, &[b, m, k]);
        let heads = leaf(&mut t, &[m, h * k]);
        let ones = t.constant(Tensor::ones(&[n]));
        let zeros = t.constant(Tensor::zeros(&[n]));
        let mut drop_rng = seeded(seed ^ 1);

        macro_rules! expect {
            ($op:expr, $shape:expr) => {{
                let v = ok($op)?;
                let want: &[usize] = &$shape;
                prop_assert_eq!(t.shape(v), want, "{}", stringify!($op));
                v
            }};
        }
        expect!(t.matmul(a, bm), [m, n]);
        expect!(t.matmul(bat, bm), [b, m, n]);
        expect!(t.matmul_nt(a, c), [m, n]);
        expect!(t.add(x, y), [m, n]);
        expect!(t.add(x, row), [m, n]);
        expect!(t.sub(x, y), [m, n]);
        expect!(t.mul(x, y), [m, n]);
        expect!(Ok(t.scale(x, 0.5)), [m, n]);
        expect!(Ok(t.square(x)), [m, n]);
        expect!(Ok(t.abs(x)), [m, n]);
        expect!(Ok(t.tanh(x)), [m, n]);
        expect!(Ok(t.gelu(x)), [m, n]);
        let p = expect!(t.softmax_rows(x), [m, n]);
        expect!(Ok(t.l2_normalize_rows(x, 1e-12)), [m, n]);
        expect!(t.layer_norm(x, ones, zeros, 1e-5), [m, n]);
        expect!(t.reduce_mean(x, 0), [n]);
        expect!(t.reduce_mean(x, 1), [m]);
        expect!(Ok(t.sum(x)), []);
        expect!(t.dropout(x, 0.5, true, &mut drop_rng), [m, n]);
        expect!(t.reshape(x, &[n, m]), [n, m]);
        expect!(t.reshape(x, &[m * n]), [m * n]);
        expect!(t.transpose(x), [n, m]);
        let split = expect!(t.split_heads(heads, h), [h, m, k]);
        expect!(t.merge_heads(split), [m, h * k]);
        expect!(t.select(bat, b - 1), [m, k]);
        expect!(t.stack(&[x, y]), [2, m, n]);
        expect!(t.pairwise_add(a, c), [m, n, k]);
        let targets: Vec<usize> = (0..m).map(|i| i % n).collect();
        expect!(t.label_smoothed_ce(p, &targets, 0.1), []);
        Ok(())
    })
}

fn softmax(cases: u32) -> Result<(), String> {
    run(cases, (1..6usize, 1..9usize, any::<u64>()), |(r, c, seed)| {
        let mut rng = seeded(seed);
        let x = uniform(&mut rng, &[r, c], -20.0, 20.0);
        let s = ok(softmax_rows(&x))?;
        for row in s.data().chunks(c) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9, "row sum {total}");
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let shifts: Vec<f64> = (0..r).map(|_| rng.random_range(-100.0..100.0)).collect();
        let data = x.data().iter().enumerate().map(|(i, v)| v + shifts[i / c]).collect();
        let shifted = ok(softmax_rows(&Tensor::new(&[r, c], data).unwrap()))?;
        let d = max_abs_diff(&s, &shifted);
        prop_assert!(d <= 1e-12, "shift changed softmax by {d}");
        Ok(())
    })
}

fn l2_normalize(cases: u32) -> Result<(), String> {
    let s = (1..6usize, 1..9usize, -3.0..3.0f64, any::<bool>(), any::<u64>());
    run(cases, s, |(r, c, exp, zero_row, seed)| {
        let mut rng = seeded(seed);
        let mut x = uniform(&mut rng, &[r, c], -1.0, 1.0);
        x.scale_in_place(10f64.powf(exp));
        if zero_row {
            x.data_mut()[..c].fill(0.0);
        }
        let y = l2_normalize_rows(&x, 1e-12);
        let z = l2_normalize_rows(&y, 1e-12);
        let d = max_abs_diff(&y, &z);
        prop_assert!(d <= 1e-12, "second normalization moved {d}");
        for (i, row) in y.data().chunks(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if zero_row && i == 0 {
                prop_assert_eq!(n, 0.0);
            } else {
                prop_assert!((n - 1.0).abs() <= 1e-12, "row norm {n}");
            }
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum GradOp {
    Matmul,
    BatchedMatmul,
    MatmulNt,
    Add,
    AddBias,
    Sub,
    Mul,
    Scale,
    Square,
    Abs,
    Tanh,
    Gelu,
    Softmax,
    L2Normalize,
    LayerNorm,
    MeanAxis0,
    MeanAxis1,
    Sum,
    Dropout,
    Reshape,
    Transpose,
    SplitHeads,
    MergeHeads,
    Select,
    Stack,
    PairwiseAdd,
    CrossEntropy,
}

impl GradOp {
    const ALL: [GradOp; 27] = [
        Self::Matmul,
        Self::BatchedMatmul,
        Self::MatmulNt,
        Self::Add,
        Self::AddBias,
        Self::Sub,
        Self::Mul,
        Self::Scale,
        Self::Square,
        Self::Abs,
        Self::Tanh,
        Self::Gelu,
        Self::Softmax,
        Self::L2Normalize,
        Self::LayerNorm,
        Self::MeanAxis0,
        Self::MeanAxis1,
        Self::Sum,
        Self::Dropout,
        Self::Reshape,
        Self::Transpose,
        Self::SplitHeads,
        Self::MergeHeads,
        Self::Select,
        Self::Stack,
        Self::PairwiseAdd,
        Self::CrossEntropy,
    ];

    fn inputs(self, m: usize, k: usize, n: usize) -> Vec<Vec<usize>> {
        use GradOp::*;
        match self {
            Matmul => vec![vec![m, k], vec![k, n]],
            BatchedMatmul => vec![vec![2, m, k], vec![k, n]],
            MatmulNt | PairwiseAdd => vec![vec![m, k], vec![n, k]],
            Add | Sub | Mul => vec![vec![m, n], vec![m, n]],
            AddBias => vec![vec![m, n], vec![n]],
            LayerNorm => vec![vec![m, n], vec![n], vec![n]],
            SplitHeads => vec![vec![m, 2 * k]],
            MergeHeads => vec![vec![2, m, k]],
            Select => vec![vec![3, m, n]],
            Stack => vec![vec![m, n]; 3],
            _ => vec![vec![m, n]],
        }
    }

    fn apply(self, t: &mut Tape, v: &[Var], seed: u64) -> angleattn_core::Result<Var> {
        use GradOp::*;
        Ok(match self {
            Matmul | BatchedMatmul => t.matmul(v[0], v[1])?,
            MatmulNt => t.matmul_nt(v[0], v[1])?,
            Add | AddBias => t.add(v[0], v[1])?,
            Sub => t.sub(v[0], v[1])?,
            Mul => t.mul(v[0], v[1])?,
            Scale => t.scale(v[0], -1.7),
            Square => t.square(v[0]),
            Abs => t.abs(v[0]),
            Tanh => t.tanh(v[0]),
            Gelu => t.gelu(v[0]),
            Softmax => t.softmax_rows(v[0])?,
            L2Normalize => t.l2_normalize_rows(v[0], 1e-12),
            LayerNorm => t.layer_norm(v[0], v[1], v[2], 1e-5)?,
            MeanAxis0 => t.reduce_mean(v[0], 0)?,
            MeanAxis1 => t.reduce_mean(v[0], 1)?,
            Sum => t.sum(v[0]),
            Dropout => t.dropout(v[0], 0.5, true, &mut seeded(seed))?,
            Reshape => {
                let n = t.value(v[0]).len();
                t.reshape(v[0], &[n])?
            }
            Transpose => t.transpose(v[0])?,
            SplitHeads => t.split_heads(v[0], 2)?,
            MergeHeads => t.merge_heads(v[0])?,
            Select => t.select(v[0], 1)?,
            Stack => t.stack(v)?,
            PairwiseAdd => t.pairwise_add(v[0], v[1])?,
            CrossEntropy => {
                let (rows, cols) = (t.shape(v[0])[0], t.shape(v[0])[1]);
                let p = t.softmax_rows(v[0])?;
                let targets: Vec<usize> = (0..rows).map(|i| (i * 7 + 3) % cols).collect();
                t.label_smoothed_ce(p, &targets, 0.1)?
            }
        })
    }
}

fn op_gradients(cases: u32) -> Result<(), String> {
    let s = (0..GradOp::ALL.len(), 1..4usize, 1..4usize, 1..4usize, any::<u64>());
    run(cases, s, |(oi, m, k, n, seed)| {
        let op = GradOp::ALL[oi];
        let mut rng = seeded(seed);
        let inputs: Vec<Tensor> = op
            .inputs(m, k, n)
            .iter()
            .map(|s| uniform(&mut rng, s, -2.0, 2.0))
            .collect();
        let f = |xs: &[Tensor]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), true)).collect();
            let out = op.apply(&mut t, &vars, seed).expect("op applies");
            let loss = if op == GradOp::CrossEntropy {
                out
            } else {
                let shape = t.shape(out).to_vec();
                let w = t.constant(uniform(&mut seeded(seed ^ 0x77), &shape, -1.0, 1.0));
                let p = t.mul(out, w).expect("same shape");
                t.sum(p)
            };
            t.backward(loss).expect("backward");
            (t.value(loss).item(), grads_of(&t, &vars))
        };
        let err = grad_check(&inputs, f, 1e-5, usize::MAX);
        prop_assert!(err <= 1e-4, "{:?}: relative error {err}", op);
        Ok(())
    })
}

fn tiny_model(variant: ScoreVariant, dropout: f64) -> ModelConfig {
    ModelConfig {
        patch_size: 2,
        model_dim: 4,
        depth: 1,
        heads: 2,
        mlp_dim: 4,
        dropout,
        ..ModelConfig::new(3, 3, variant)
    }
}

fn seeded_determinism(cases: u32) -> Result<(), String> {
    let s = (1..5usize, 1..7usize, 0.05..0.9f64, 0..12usize, any::<u64>());
    run(cases, s, |(m, n, rate, vi, seed)| {
        let x = uniform(&mut seeded(seed), &[m, n], -2.0, 2.0);
        let ops = || {
            let mut rng = seeded(seed ^ 0xd5);
            let mut t = Tape::new();
            let a = t.leaf(x.clone(), true);
            let d = t.dropout(a, rate, true, &mut rng).unwrap();
            let g = t.gelu(d);
            let s = t.softmax_rows(g).unwrap();
            let l = t.sum(s);
            t.backward(l).unwrap();
            (t.value(s).clone(), t.grad(a).cloned())
        };
        prop_assert_eq!(ops(), ops());

        let cfg = tiny_model(ScoreVariant::ALL[vi], 0.3);
        let params = ok(ModelParams::init(&cfg, &mut seeded(seed)))?;
        let patch = uniform(&mut seeded(seed ^ 3), &[2, 2, 3], 0.0, 1.0);
        let step = || loss_and_grads(&params, &cfg, &patch, 1, 0.05, true, &mut seeded(seed)).unwrap();
        prop_assert_eq!(step(), step());
        Ok(())
    })
}

fn weights_ok(t: &Tape, w: Var, n: usize, m: usize) -> Result<(), TestCaseError> {
    prop_assert_eq!(t.shape(w), &[n, m][..]);
    for row in t.value(w).data().chunks(m) {
        let total: f64 = row.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9, "row sum {total}");
        prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    Ok(())
}

fn row_stochastic(cases: u32) -> Result<(), String> {
    let s = (0..12usize, 1..4usize, 1..4usize, 1..7usize, any::<u64>());
    run(cases, s, |(vi, heads, dh, n, seed)| {
        let variant = ScoreVariant::ALL[vi];
        let cfg = ok(AttentionConfig::new(heads * dh, heads, variant))?;
        let mut rng = seeded(seed);
        let params = AttentionParams::init(&cfg, "attn", &mut rng);
        let mut t = Tape::new();
        let vars = params.bind(&mut t, false);
        let q = t.constant(uniform(&mut rng, &[n, heads * dh], -2.0, 2.0));
        let kv = if variant.is_cross() {
            t.constant(uniform(&mut rng, &[n, heads * dh], -2.0, 2.0))
        } else {
            q
        };
        let out = ok(multi_head_attention(&mut t, q, kv, &cfg, &vars))?;
        prop_assert_eq!(t.shape(out.output), &[n, heads * dh][..]);
        prop_assert_eq!(out.weights.len(), heads);
        for &w in &out.weights {
            weights_ok(&t, w, n, n)?;
        }
        Ok(())
    })
}

const COSINE: [ScoreVariant; 4] = [
    ScoreVariant::Cos,
    ScoreVariant::CosSq,
    ScoreVariant::AbsCos,
    ScoreVariant::TempCosSq,
];

/// Single-head scores; rows are normalized first when `normalize` is set.
fn head_scores(variant: ScoreVariant, q: &Tensor, k: &Tensor, normalize: bool) -> angleattn_core::Result<Tensor> {
    let cfg = AttentionConfig::new(q.shape()[1], 1, variant)?;
    let mut t = Tape::new();
    let mut qv = t.constant(q.clone());
    let mut kv = t.constant(k.clone());
    if normalize {
        qv = t.l2_normalize_rows(qv, cfg.eps);
        kv = t.l2_normalize_rows(kv, cfg.eps);
    }
    let s = score(&mut t, &cfg, 0, qv, kv, None)?;
    Ok(t.value(s).clone())
}

fn scaled(x: &Tensor, c: f64) -> Tensor {
    x.map(|v| v * c)
}

fn qk(seed: u64, n: usize, m: usize, dh: usize) -> (Tensor, Tensor) {
    let mut rng = seeded(seed);
    let q = uniform(&mut rng, &[n, dh], -2.0, 2.0);
    let k = uniform(&mut rng, &[m, dh], -2.0, 2.0);
    (q, k)
}

fn score_scale_invariance(cases: u32) -> Result<(), String> {
    let s = (
        (0..4usize, 1..6usize, 1..6usize, 1..7usize),
        (-20..20i32, -20..20i32, 0.01..100.0f64, 0.01..100.0f64, any::<u64>()),
    );
    run(cases, s, |((vi, n, m, dh), (eq, ek, cq, ck, seed))| {
        let variant = COSINE[vi];
        let (q, k) = qk(seed, n, m, dh);
        let base = ok(head_scores(variant, &q, &k, true))?;
        let pow2 = ok(head_scores(variant, &scaled(&q, 2f64.powi(eq)), &scaled(&k, 2f64.powi(ek)), true))?;
        prop_assert!(pow2 == base, "power-of-two scaling changed {variant} scores");
        let any_c = ok(head_scores(variant, &scaled(&q, cq), &scaled(&k, ck), true))?;
        let d = max_abs_diff(&any_c, &base);
        prop_assert!(d <= 1e-12, "{variant} moved by {d} under scales {cq}, {ck}");

        // The dot product is not scale invariant: it picks up c_q * c_k.
        let dp = ok(head_scores(ScoreVariant::DotProduct, &q, &k, false))?;
        let dp2 = ok(head_scores(ScoreVariant::DotProduct, &scaled(&q, 2.0), &scaled(&k, 2.0), false))?;
        prop_assert!(dp2 == scaled(&dp, 4.0));
        prop_assert!(dp.data().iter().zip(dp2.data()).any(|(a, b)| a != b));
        Ok(())
    })
}

fn score_sign(cases: u32) -> Result<(), String> {
    run(cases, (0..4usize, 1..6usize, 1..6usize, 1..7usize, any::<u64>()), |(vi, n, m, dh, seed)| {
        let variant = COSINE[vi];
        let (q, k) = qk(seed, n, m, dh);
        let s = ok(head_scores(variant, &q, &k, true))?;
        let flipped = ok(head_scores(variant, &scaled(&q, -1.0), &k, true))?;
        let want = if variant == ScoreVariant::Cos {
            scaled(&s, -1.0)
        } else {
            s
        };
        prop_assert!(flipped == want, "{variant} under Q -> -Q");
        Ok(())
    })
}

fn score_symmetry(cases: u32) -> Result<(), String> {
    run(cases, (0..4usize, 1..6usize, 1..6usize, 1..7usize, any::<u64>()), |(vi, n, m, dh, seed)| {
        let variant = COSINE[vi];
        let (q, k) = qk(seed, n, m, dh);
        let a = ok(head_scores(variant, &q, &k, true))?;
        let b = ok(head_scores(variant, &k, &q, true))?;
        for i in 0..n {
            for j in 0..m {
                prop_assert_eq!(a.get(&[i, j]), b.get(&[j, i]));
            }
        }
        Ok(())
    })
}

fn unit_norm_collapse(cases: u32) -> Result<(), String> {
    run(cases, (1..6usize, 1..6usize, 1..9usize, any::<u64>()), |(n, m, dh, seed)| {
        let (q, k) = qk(seed, n, m, dh);
        let (q, k) = (l2_normalize_rows(&q, 1e-12), l2_normalize_rows(&k, 1e-12));
        let cos = ok(head_scores(ScoreVariant::Cos, &q, &k, false))?;
        let dp = ok(head_scores(ScoreVariant::DotProduct, &q, &k, false))?;
        let sdp = ok(head_scores(ScoreVariant::ScaledDotProduct, &q, &k, false))?;
        prop_assert!(cos == dp);
        prop_assert!(sdp == scaled(&cos, 1.0 / (dh as f64).sqrt()));
        Ok(())
    })
}

struct MhaValues {
    weights: Vec<Tensor>,
    heads: Vec<Tensor>,
    output: Tensor,
}

fn mha_values(cfg: &AttentionConfig, params: &AttentionParams, xq: &Tensor, xkv: &Tensor) -> angleattn_core::Result<MhaValues> {
    let mut t = Tape::new();
    let vars = params.bind(&mut t, false);
    let q = t.constant(xq.clone());
    let kv = if cfg.variant.is_cross() {
        t.constant(xkv.clone())
    } else {
        q
    };
    let out = multi_head_attention(&mut t, q, kv, cfg, &vars)?;
    Ok(MhaValues {
        weights: out.weights.iter().map(|&w| t.value(w).clone()).collect(),
        heads: out.head_outputs.iter().map(|&h| t.value(h).clone()).collect(),
        output: t.value(out.output).clone(),
    })
}

fn global_scale_invariance(cases: u32) -> Result<(), String> {
    const VARIANTS: [ScoreVariant; 6] = [
        ScoreVariant::CosSq,
        ScoreVariant::Cos,
        ScoreVariant::AbsCos,
        ScoreVariant::TempCosSq,
        ScoreVariant::CrossCosSq,
        ScoreVariant::CrossCos,
    ];
    let s = (0..6usize, 1..4usize, 1..4usize, 1..6usize, -10..10i32, 0.1..10.0f64, any::<u64>());
    run(cases, s, |(vi, heads, dh, n, e, c, seed)| {
        let cfg = ok(AttentionConfig::new(heads * dh, heads, VARIANTS[vi]))?;
        let mut rng = seeded(seed);
        let params = AttentionParams::init(&cfg, "attn", &mut rng);
        let xq = uniform(&mut rng, &[n, heads * dh], -2.0, 2.0);
        let xkv = uniform(&mut rng, &[n, heads * dh], -2.0, 2.0);
        let base = ok(mha_values(&cfg, &params, &xq, &xkv))?;

        let p = 2f64.powi(e);
        let exact = ok(mha_values(&cfg, &params, &scaled(&xq, p), &scaled(&xkv, p)))?;
        prop_assert!(exact.weights == base.weights, "weights moved under 2^{e}");
        for (h, o) in exact.heads.iter().zip(&base.heads) {
            prop_assert!(*h == scaled(o, p), "head output not scaled by 2^{e}");
        }
        prop_assert!(exact.output == scaled(&base.output, p));

        let general = ok(mha_values(&cfg, &params, &scaled(&xq, c), &scaled(&xkv, c)))?;
        for (w, w0) in general.weights.iter().zip(&base.weights) {
            let d = max_abs_diff(w, w0);
            prop_assert!(d <= 1e-12, "weights moved by {d} under {c}");
        }
        for (h, o) in general.heads.iter().zip(&base.heads) {
            let bound = 1e-12 * c * (1.0 + o.data().iter().fold(0.0f64, |a, v| a.max(v.abs())));
            let d = max_abs_diff(h, &scaled(o, c));
            prop_assert!(d <= bound, "head output off by {d} under {c}");
        }
        Ok(())
    })
}

fn attention_gradients(cases: u32) -> Result<(), String> {
    let s = (0..12usize, 1..3usize, 1..4usize, 1..5usize, 0..4usize, any::<u64>());
    run(cases, s, |(vi, heads, dh, n, mi, seed)| {
        let variant = ScoreVariant::ALL[vi];
        let mut cfg = ok(AttentionConfig::new(heads * dh, heads, variant))?;
        if variant.default_norm_mode() == NormMode::Both {
            cfg = cfg.with_norm_mode(NormMode::ALL[mi]);
        }
        let d = heads * dh;
        let mut rng = seeded(seed);
        let params = AttentionParams::init(&cfg, "attn", &mut rng);
        let cross = variant.is_cross();
        let mut inputs = vec![uniform(&mut rng, &[n, d], -2.0, 2.0)];
        if cross {
            inputs.push(uniform(&mut rng, &[n, d], -2.0, 2.0));
        }
        let tokens = inputs.len();
        inputs.extend(params.params().iter().map(|p| p.value.clone()));
        let w = uniform(&mut rng, &[n, d], -1.0, 1.0);

        let f = |xs: &[Tensor]| {
            let mut p = params.clone();
            for (slot, x) in p.params_mut().into_iter().zip(&xs[tokens..]) {
                slot.value = x.clone();
            }
            let mut t = Tape::new();
            let q = t.leaf(xs[0].clone(), true);
            let kv = if cross { t.leaf(xs[1].clone(), true) } else { q };
            let vars = p.bind(&mut t, true);
            let out = multi_head_attention(&mut t, q, kv, &cfg, &vars).expect("attention");
            let wv = t.constant(w.clone());
            let prod = t.mul(out.output, wv).unwrap();
            let loss = t.sum(prod);
            t.backward(loss).unwrap();
            let mut flat = vec![q];
            if cross {
                flat.push(kv);
            }
            flat.extend([vars.w_q, vars.w_k, vars.w_v, vars.w_o]);
            for a in &vars.additive {
                flat.extend([a.w_q, a.w_k, a.w_a, a.b_a]);
            }
            (t.value(loss).item(), grads_of(&t, &flat))
        };
        let err = grad_check(&inputs, f, 1e-5, usize::MAX);
        prop_assert!(err <= 1e-4, "{variant} ({}): relative error {err}", cfg.norm_mode);
        Ok(())
    })
}

type ModelDims = (usize, usize, usize, usize, usize, usize, usize, usize, usize);

fn model_dims() -> impl Strategy<Value = (ModelDims, u64)> {
    (
        (1..5usize, 1..6usize, 1..4usize, 1..4usize, 0..3usize, 2..6usize, 1..9usize, 0..12usize, 0..3usize),
        any::<u64>(),
    )
}

fn model_config((p, c, heads, dh, depth, k, mlp, vi, pi): ModelDims) -> ModelConfig {
    ModelConfig {
        patch_size: p,
        bands: c,
        model_dim: heads * dh,
        depth,
        heads,
        mlp_dim: mlp,
        dropout: 0.0,
        num_classes: k,
        positional: [Positional::None, Positional::Sinusoidal, Positional::Learnable][pi],
        temperature: DEFAULT_TEMPERATURE,
        ..ModelConfig::new(c, k, ScoreVariant::ALL[vi])
    }
}

fn shape_chain(cases: u32) -> Result<(), String> {
    run(cases, model_dims(), |(dims, seed)| {
        let cfg = model_config(dims);
        let (p, d, k) = (cfg.patch_size, cfg.model_dim, cfg.num_classes);
        let mut rng = seeded(seed);
        let params = ok(ModelParams::init(&cfg, &mut rng))?;
        let patch = uniform(&mut rng, &[p, p, cfg.bands], 0.0, 1.0);
        let mut t = Tape::new();
        let vars = params.bind(&mut t, false);
        let x = t.constant(patch.clone());
        let tokens = ok(tokenize_patch(&mut t, x, vars.spectral))?;
        prop_assert_eq!(t.shape(tokens), &[p * p, d][..]);
        let t0 = ok(add_positions(&mut t, tokens, cfg.positional, vars.positional))?;
        prop_assert_eq!(t.shape(t0), &[p * p, d][..]);
        let mut h = t0;
        for layer in &vars.layers {
            h = ok(encoder_block(&mut t, h, t0, layer, &cfg, false, &mut rng))?;
            prop_assert_eq!(t.shape(h), &[p * p, d][..]);
        }
        let normed = ok(t.layer_norm(h, vars.final_ln_scale, vars.final_ln_shift, 1e-5))?;
        let pooled = ok(t.reduce_mean(normed, 0))?;
        prop_assert_eq!(t.shape(pooled), &[d][..]);

        let pred = ok(forward(&mut t, x, &vars, &cfg, false, &mut rng))?;
        prop_assert_eq!(t.shape(pred.logits), &[1, k][..]);
        let probs = t.value(pred.probs);
        prop_assert_eq!(probs.shape(), &[1, k][..]);
        prop_assert!((probs.sum() - 1.0).abs() <= 1e-9);
        prop_assert!(probs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = ok(predict(&params, &cfg, &patch))?;
        prop_assert_eq!(again.data(), probs.data());
        Ok(())
    })
}

fn pure_inference(cases: u32) -> Result<(), String> {
    run(cases, (model_dims(), any::<u64>()), |((dims, seed), other)| {
        let cfg = model_config(dims);
        let mut rng = seeded(seed);
        let params = ok(ModelParams::init(&cfg, &mut rng))?;
        let p = cfg.patch_size;
        let patch = uniform(&mut rng, &[p, p, cfg.bands], 0.0, 1.0);
        prop_assert_eq!(ok(predict(&params, &cfg, &patch))?, ok(predict(&params, &cfg, &patch))?);
        let a = ok(loss_and_grads(&params, &cfg, &patch, 0, 0.05, true, &mut seeded(seed)))?;
        let b = ok(loss_and_grads(&params, &cfg, &patch, 0, 0.05, true, &mut seeded(other)))?;
        prop_assert_eq!(a, b);
        Ok(())
    })
}

/// Toy configuration used for whole-model gradient checks.
pub fn gradient_toy(variant: ScoreVariant, classes: usize) -> ModelConfig {
    ModelConfig {
        patch_size: 3,
        model_dim: 8,
        depth: 2,
        heads: 2,
        mlp_dim: 16,
        dropout: 0.0,
        ..ModelConfig::new(5, classes, variant)
    }
}

/// Largest relative gradient error of the label-smoothed loss over every
/// parameter tensor (at most `max_coords` coordinates each).
pub fn model_grad_error(cfg: &ModelConfig, seed: u64, max_coords: usize) -> f64 {
    let mut rng = seeded(seed);
    let params = ModelParams::init(cfg, &mut rng).expect("valid toy config");
    let p = cfg.patch_size;
    let patch = uniform(&mut rng, &[p, p, cfg.bands], 0.0, 1.0);
    let target = rng.random_range(0..cfg.num_classes);
    let values: Vec<Tensor> = params.params().iter().map(|p| p.value.clone()).collect();
    let f = |xs: &[Tensor]| {
        let mut q = params.clone();
        for (slot, x) in q.params_mut().into_iter().zip(xs) {
            slot.value = x.clone();
        }
        loss_and_grads(&q, cfg, &patch, target, 0.05, false, &mut seeded(0)).expect("loss")
    };
    grad_check(&values, f, 1e-5, max_coords)
}

fn model_gradients(cases: u32) -> Result<(), String> {
    run(cases, (0..12usize, 2..5usize, any::<u64>()), |(vi, k, seed)| {
        let cfg = gradient_toy(ScoreVariant::ALL[vi], k);
        let err = model_grad_error(&cfg, seed, 6);
        prop_assert!(err <= 1e-4, "{}: relative error {err}", cfg.variant);
        Ok(())
    })
}

fn param_count(cases: u32) -> Result<(), String> {
    run(cases, model_dims(), |(dims, seed)| {
        let cfg = model_config(dims);
        let params = ok(ModelParams::init(&cfg, &mut seeded(seed)))?;
        prop_assert_eq!(cfg.param_count(), params.count());
        Ok(())
    })
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn split_proportions(cases: u32) -> Result<(), String> {
    let s = (4..13usize, 4..13usize, 2..6usize, 0.01..0.45f64, 0.01..0.45f64, any::<u64>());
    run(cases, s, |(h, w, k, tf, vf, seed)| {
        let mut rng = seeded(seed);
        let mut labels: Vec<u16> = (0..h * w).map(|_| rng.random_range(0..=k as u16)).collect();
        for (i, l) in labels.iter_mut().take(3 * k).enumerate() {
            *l = (i / 3 + 1) as u16;
        }
        let map = LabelMap::new(h, w, labels.clone()).unwrap();
        let counts = map.class_counts();
        let spec = SplitSpec {
            train_frac: tf,
            val_frac: vf,
            seed,
        };
        let split = match stratified_split(&map, &spec) {
            Err(Error::Config(_)) => {
                let starved = (1..=k).any(|c| {
                    let n = counts[c];
                    round_half_up(tf * n as f64).max(1) + round_half_up(vf * n as f64).max(1) >= n
                });
                prop_assert!(starved, "split refused a feasible request");
                return Ok(());
            }
            other => ok(other)?,
        };
        let mut seen = BTreeSet::new();
        for &px in split.train.iter().chain(&split.val).chain(&split.test) {
            prop_assert!(labels[px] != 0, "background pixel {px} sampled");
            prop_assert!(seen.insert(px), "pixel {px} in two subsets");
        }
        prop_assert_eq!(seen.len(), labels.iter().filter(|&&l| l != 0).count());
        for c in 1..=k {
            let n = counts[c] as f64;
            let of = |set: &[usize]| set.iter().filter(|&&p| labels[p] as usize == c).count() as f64;
            prop_assert!((of(&split.train) - tf * n).abs() <= 1.0, "class {c} train");
            prop_assert!((of(&split.val) - vf * n).abs() <= 1.0, "class {c} val");
        }
        Ok(())
    })
}

fn random_cube(rng: &mut impl Rng, h: usize, w: usize, c: usize, lo: f32, hi: f32) -> HyperCube {
    let values = (0..h * w * c).map(|_| rng.random_range(lo..hi)).collect();
    HyperCube::new(h, w, c, values).unwrap()
}

fn mirror_padding(cases: u32) -> Result<(), String> {
    run(cases, (1..7usize, 1..7usize, 1..4usize, 1..16usize, any::<u64>()), |(h, w, c, p, seed)| {
        let cube = random_cube(&mut seeded(seed), h, w, c, 1.0, 2.0);
        let present: BTreeSet<u64> = cube.values().iter().map(|&v| (v as f64).to_bits()).collect();
        for row in 0..h {
            for col in 0..w {
                let patch = ok(extract_patch(&cube, row, col, p))?;
                prop_assert_eq!(patch.shape(), &[p, p, c][..]);
                prop_assert!(patch.data().iter().all(|v| present.contains(&v.to_bits())));
                let centre = &patch.data()[((p / 2) * p + p / 2) * c..][..c];
                let own: Vec<f64> = cube.spectrum(row, col).iter().map(|&v| v as f64).collect();
                prop_assert_eq!(centre, &own[..]);
            }
        }
        Ok(())
    })
}

fn nearest(pixel: &[f32], endmembers: &[Vec<f64>], angular: bool) -> usize {
    let x: Vec<f64> = pixel.iter().map(|&v| v as f64).collect();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let key = |e: &Vec<f64>| {
        if angular {
            let ne = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            -x.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / (nx * ne)
        } else {
            x.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        }
    };
    (0..endmembers.len())
        .min_by(|&a, &b| key(&endmembers[a]).total_cmp(&key(&endmembers[b])))
        .unwrap()
        + 1
}

fn misclassified(spec: &SynthSpec, angular: bool) -> angleattn_core::Result<usize> {
    let scene = synth_scene(spec)?;
    let c = spec.bands;
    Ok(scene
        .cube
        .values()
        .chunks(c)
        .zip(scene.labels.labels())
        .filter(|(px, &l)| nearest(px, &scene.endmembers, angular) != l as usize)
        .count())
}

fn synthetic_separability(cases: u32) -> Result<(), String> {
    // Witness on the default scene: magnitude breaks nearest-by-distance.
    let witness = misclassified(&SynthSpec::default(), false).map_err(|e| e.to_string())?;
    if witness == 0 {
        return Err("nearest-by-Euclidean classified the default scene perfectly".into());
    }
    let s = (
        (4..17usize, 4..17usize, 4..17usize, 2..6usize, 0..6usize),
        (0.5..1.0f64, 0.0..0.5f64, any::<u64>()),
    );
    run(cases, s, |((h, w, bands, classes, extra), (lo, span, seed))| {
        let spec = SynthSpec {
            height: h,
            width: w,
            bands,
            classes,
            sites: classes + extra,
            gain_lo: lo,
            gain_hi: lo + span,
            snr_db: None,
            seed,
        };
        prop_assert_eq!(ok(misclassified(&spec, true))?, 0);
        Ok(())
    })
}

fn noise(cases: u32) -> Result<(), String> {
    run(cases, (1..6usize, 1..6usize, 1..5usize, -10.0..40.0f64, any::<u64>()), |(h, w, c, snr, seed)| {
        let cube = random_cube(&mut seeded(seed), h, w, c, 0.0, 1.0);
        let a = inject_noise(&cube, Some(snr), seed);
        prop_assert_eq!(a.shape(), cube.shape());
        prop_assert!(a == inject_noise(&cube, Some(snr), seed));
        prop_assert!(a != inject_noise(&cube, Some(snr), seed.wrapping_add(1)));
        prop_assert!(inject_noise(&cube, None, seed) == cube);
        Ok(())
    })
}

/// OA, AA and kappa from the individual pixels a confusion matrix stands
/// for. Integer counts keep every floating expression identical to a direct
/// evaluation, so agreement is exact.
pub fn counting_oracle(confusion: &[Vec<u64>]) -> (f64, f64, f64) {
    let k = confusion.len();
    let mut pixels = Vec::new();
    for (t, row) in confusion.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            pixels.extend(std::iter::repeat_n((t, p), n as usize));
        }
    }
    let n = pixels.len() as u64;
    let (mut truth, mut pred, mut hit) = (vec![0u64; k], vec![0u64; k], vec![0u64; k]);
    let mut correct = 0u64;
    for &(t, p) in &pixels {
        truth[t] += 1;
        pred[p] += 1;
        if t == p {
            hit[t] += 1;
            correct += 1;
        }
    }
    let oa = correct as f64 / n as f64;
    let recalls: Vec<f64> = (0..k)
        .filter(|&c| truth[c] > 0)
        .map(|c| hit[c] as f64 / truth[c] as f64)
        .collect();
    let aa = recalls.iter().sum::<f64>() / recalls.len() as f64;
    let chance: u128 = (0..k).map(|c| truth[c] as u128 * pred[c] as u128).sum();
    let pe = chance as f64 / (n as u128 * n as u128) as f64;
    let kappa = if pe >= 1.0 {
        if correct == n {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - pe) / (1.0 - pe)
    };
    (oa, aa, kappa)
}

/// Random confusion matrix with at least one pixel.
pub fn random_confusion(rng: &mut impl Rng, k: usize, diagonal: bool) -> Vec<Vec<u64>> {
    let mut m: Vec<Vec<u64>> = (0..k)
        .map(|t| {
            (0..k)
                .map(|p| if diagonal && t != p { 0 } else { rng.random_range(0..30) })
                .collect()
        })
        .collect();
    if m.iter().flatten().all(|&v| v == 0) {
        m[0][0] = 1;
    }
    m
}

fn metric_oracle(cases: u32) -> Result<(), String> {
    run(cases, (1..8usize, any::<bool>(), any::<u64>()), |(k, diagonal, seed)| {
        let m = random_confusion(&mut seeded(seed), k, diagonal);
        let r = ok(EvalReport::from_confusion(m.clone()))?;
        prop_assert_eq!((r.oa, r.aa, r.kappa), counting_oracle(&m));
        Ok(())
    })
}

fn kappa_bounds(cases: u32) -> Result<(), String> {
    run(cases, (1..8usize, any::<bool>(), any::<u64>()), |(k, diagonal, seed)| {
        let m = random_confusion(&mut seeded(seed), k, diagonal);
        let r = ok(EvalReport::from_confusion(m.clone()))?;
        let is_diagonal = (0..k).all(|t| (0..k).all(|p| t == p || m[t][p] == 0));
        prop_assert!(r.kappa <= r.oa, "kappa {} above OA {}", r.kappa, r.oa);
        prop_assert_eq!(r.kappa == 1.0, is_diagonal);
        Ok(())
    })
}

fn adamw_descent(cases: u32) -> Result<(), String> {
    run(cases, (1..7usize, any::<u64>()), |(n, seed)| {
        let mut rng = seeded(seed);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let start: Vec<f64> = target
            .iter()
            .map(|t| {
                let d: f64 = rng.random_range(0.05..2.0);
                if rng.random::<bool>() { t + d } else { t - d }
            })
            .collect();
        let mut p = Parameter::new("theta", Tensor::new(&[n], start).unwrap(), true);
        let loss = |p: &Parameter| -> f64 {
            (0..n).map(|i| a[i] * (p.value.data()[i] - target[i]).powi(2)).sum()
        };
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut prev = loss(&p);
        for step in 1..=10 {
            let g = (0..n).map(|i| 2.0 * a[i] * (p.value.data()[i] - target[i])).collect();
            p.grad = Tensor::new(&[n], g).unwrap();
            opt.step(&mut [&mut p]);
            let now = loss(&p);
            prop_assert!(now < prev, "step {step}: {prev} -> {now}");
            prev = now;
        }
        Ok(())
    })
}

fn param_bytes(params: &ModelParams) -> Vec<Vec<u8>> {
    params
        .params()
        .iter()
        .map(|p| npy::encode(p.value.shape(), &NpyData::F8(p.value.data().to_vec())))
        .collect()
}

fn training_determinism(cases: u32) -> Result<(), String> {
    run(cases, (0..12usize, any::<u64>()), |(vi, seed)| {
        let scene = ok(synth_scene(&SynthSpec {
            height: 8,
            width: 8,
            bands: 4,
            classes: 2,
            sites: 2,
            seed,
            ..SynthSpec::default()
        }))?;
        let exp = Experiment {
            model: ModelConfig {
                patch_size: 3,
                model_dim: 4,
                depth: 1,
                heads: 2,
                mlp_dim: 4,
                dropout: 0.2,
                ..ModelConfig::new(4, 2, ScoreVariant::ALL[vi])
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 4,
                seed,
                ..TrainConfig::default()
            },
            train_frac: 0.2,
            val_frac: 0.2,
            snr_db: Some(20.0),
        };
        let threaded = Threaded::new(NonZeroUsize::new(3).unwrap());
        let a = run_experiment(&exp, &scene.cube, &scene.labels, &Sequential);
        let b = run_experiment(&exp, &scene.cube, &scene.labels, &Sequential);
        let c = run_experiment(&exp, &scene.cube, &scene.labels, &threaded);
        match (a, b, c) {
            (Ok(a), Ok(b), Ok(c)) => {
                for other in [&b, &c] {
                    prop_assert!(param_bytes(&a.outcome.params) == param_bytes(&other.outcome.params));
                    prop_assert_eq!(&a.outcome.log, &other.outcome.log);
                    prop_assert_eq!(a.outcome.best_epoch, other.outcome.best_epoch);
                    prop_assert_eq!(&a.test, &other.test);
                }
            }
            (Err(a), Err(b), Err(c)) => {
                prop_assert_eq!(a.to_string(), b.to_string());
                prop_assert_eq!(a.to_string(), c.to_string());
            }
            _ => return Err(TestCaseError::fail("runs disagree on success")),
        }
        Ok(())
    })
}

fn clipping(cases: u32) -> Result<(), String> {
    let s = (1..5usize, 1..7usize, -3.0..2.0f64, 0.1..5.0f64, any::<bool>(), any::<u64>());
    run(cases, s, |(tensors, len, exp, clip, global, seed)| {
        let mut rng = seeded(seed);
        let mut params: Vec<Parameter> = (0..tensors)
            .map(|i| {
                let mut p = Parameter::zeros(format!("p{i}"), &[len], true);
                p.grad = uniform(&mut rng, &[len], -1.0, 1.0);
                p.grad.scale_in_place(10f64.powf(exp) * rng.random_range(0.1..3.0));
                p
            })
            .collect();
        let before: Vec<Tensor> = params.iter().map(|p| p.grad.clone()).collect();
        let mode = if global { ClipMode::Global } else { ClipMode::PerTensor };
        let mut refs: Vec<&mut Parameter> = params.iter_mut().collect();
        clip_gradients(&mut refs, clip, mode);
        let mut total = 0.0;
        for (p, g0) in params.iter().zip(&before) {
            let (n0, n1) = (g0.norm_l2(), p.grad.norm_l2());
            prop_assert!(n1 <= n0, "norm grew from {n0} to {n1}");
            let s = if n0 > 0.0 { n1 / n0 } else { 1.0 };
            prop_assert!(s > 0.0 || n0 == 0.0);
            let d = max_abs_diff(&p.grad, &scaled(g0, s));
            prop_assert!(d <= 1e-12 * n0, "direction changed by {d}");
            if !global {
                prop_assert!(n1 <= clip * (1.0 + 1e-12));
                if n0 <= clip {
                    prop_assert!(p.grad == *g0);
                }
            }
            total += n1 * n1;
        }
        if global {
            prop_assert!(total.sqrt() <= clip * (1.0 + 1e-12));
        }
        Ok(())
    })
}
