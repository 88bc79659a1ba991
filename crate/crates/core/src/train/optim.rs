use alloc::vec::Vec;

use crate::param::Parameter;
use crate::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// How the clip threshold is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClipMode {
    /// Every parameter tensor is clipped to the threshold on its own.
    #[default]
    PerTensor,
    /// All gradients are scaled together by their joint norm.
    Global,
}

impl ClipMode {
    pub fn tag(self) -> &'static str {
        match self {
            Self::PerTensor => "per-tensor",
            Self::Global => "global",
        }
    }
}

impl core::str::FromStr for ClipMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "per-tensor" => Ok(Self::PerTensor),
            "global" => Ok(Self::Global),
            _ => Err(crate::Error::Config(alloc::format!(
                "unknown clip mode '{s}'; valid: per-tensor, global"
            ))),
        }
    }
}

/// Rescales gradients whose L2 norm exceeds `clip_norm`.
pub fn clip_gradients(params: &mut [&mut Parameter], clip_norm: f64, mode: ClipMode) {
    match mode {
        ClipMode::PerTensor => {
            for p in params.iter_mut() {
                let n = p.grad.norm_l2();
                if n > clip_norm {
                    p.grad.scale_in_place(clip_norm / n);
                }
            }
        }
        ClipMode::Global => {
            let total: f64 = params
                .iter()
                .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
                .sum();
            let n = libm::sqrt(total);
            if n > clip_norm {
                for p in params.iter_mut() {
                    p.grad.scale_in_place(clip_norm / n);
                }
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients stored in `params`. Moments are
    /// allocated on the first call and matched to parameters by position.
    pub fn step(&mut self, params: &mut [&mut Parameter]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed between steps");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decay { 1.0 - self.lr * self.weight_decay } else { 1.0 };
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, theta) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                *theta = *theta * decay - self.lr * (m_hat / (libm::sqrt(v_hat) + self.eps));
            }
        }
    }
}
