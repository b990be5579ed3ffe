//! Hard- and soft-label losses for joint reasoning generation and
//! classification, each paired with its gradient with respect to the logits.
//!
//! Hard losses are negative log-likelihoods: the reasoning branch sums over
//! unmasked target positions within a sample and averages over the batch.
//! Soft losses are KL divergences between temperature-softened assistant and
//! student distributions.

use serde::{Deserialize, Serialize};

use super::DistillError;

/// Target id marking a position that does not contribute to the loss.
pub const IGNORE_INDEX: i64 = -100;

/// Lower bound applied to student probabilities inside the KL logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

pub const NUM_CLASSES: usize = 3;

/// Weights of the multitask and distillation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_rea: f64,
    /// Share of the soft-label branch in the student objective.
    pub lambda_kd: f64,
    /// Softmax temperature for soft labels. Required in config files.
    pub tau: f64,
    /// Scale KL terms by `tau^2` (classic gradient rescaling). Off by default.
    #[serde(default)]
    pub tau_squared: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 0.2,
            lambda_rea: 0.8,
            lambda_kd: 0.3,
            tau: 2.0,
            tau_squared: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), DistillError> {
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_rea", self.lambda_rea),
            ("lambda_kd", self.lambda_kd),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DistillError::Domain(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DistillError::Domain(format!("tau = {} must be positive", self.tau)));
        }
        Ok(())
    }

    fn kl_scale(&self) -> f64 {
        if self.tau_squared {
            self.tau * self.tau
        } else {
            1.0
        }
    }
}

/// One training sequence. `target_ids[j]` is the token expected after
/// `input_ids[..=j]`, or [`IGNORE_INDEX`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<i64>,
    pub class_target: usize,
    /// Number of leading input positions that belong to the prompt; the
    /// classification head pools over these.
    pub prompt_len: usize,
}

impl TokenizedExample {
    pub fn validate(&self, vocab: usize) -> Result<(), DistillError> {
        let l = self.input_ids.len();
        if l == 0 || self.target_ids.len() != l {
            return Err(DistillError::Shape(format!(
                "input length {l} vs target length {}",
                self.target_ids.len()
            )));
        }
        if self.prompt_len == 0 || self.prompt_len > l {
            return Err(DistillError::Shape(format!("prompt_len {} outside 1..={l}", self.prompt_len)));
        }
        if self.class_target >= NUM_CLASSES {
            return Err(DistillError::Shape(format!("class target {}", self.class_target)));
        }
        if let Some(&t) = self.input_ids.iter().find(|&&t| t >= vocab) {
            return Err(DistillError::Shape(format!("input token {t} >= vocab {vocab}")));
        }
        if let Some(&t) = self
            .target_ids
            .iter()
            .find(|&&t| t != IGNORE_INDEX && (t < 0 || t as usize >= vocab))
        {
            return Err(DistillError::Shape(format!("target token {t} outside vocab {vocab}")));
        }
        Ok(())
    }

    pub fn unmasked(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.target_ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != IGNORE_INDEX)
            .map(|(j, &t)| (j, t as usize))
    }
}

/// Per-position vocabulary logits (`l x V`) and the 3-way class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTensor {
    pub token_logits: Vec<Vec<f64>>,
    pub class_logits: [f64; NUM_CLASSES],
}

impl LogitTensor {
    pub fn is_finite(&self) -> bool {
        self.class_logits.iter().all(|x| x.is_finite())
            && self.token_logits.iter().flatten().all(|x| x.is_finite())
    }
}

/// Gradient of a loss with respect to one sample's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrad {
    pub token: Vec<Vec<f64>>,
    pub class: [f64; NUM_CLASSES],
}

impl LogitGrad {
    pub fn zeros_like(l: &LogitTensor) -> Self {
        LogitGrad {
            token: l.token_logits.iter().map(|r| vec![0.0; r.len()]).collect(),
            class: [0.0; NUM_CLASSES],
        }
    }
}

fn check_tau(tau: f64) -> Result<(), DistillError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(DistillError::Domain(format!("temperature {tau} must be positive")))
    }
}

/// `softmax(z / tau)` with max subtraction.
pub fn temp_softmax(z: &[f64], tau: f64) -> Result<Vec<f64>, DistillError> {
    check_tau(tau)?;
    Ok(softmax_unchecked(z, tau))
}

fn softmax_unchecked(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Numerically stable `log softmax(z)`.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    z.iter().map(|&x| x - lse).collect()
}

/// `KL(p_a || p_s)` in nats; `p_s` is floored at [`PROB_FLOOR`].
pub fn kl_divergence(p_a: &[f64], p_s: &[f64]) -> Result<f64, DistillError> {
    if p_a.len() != p_s.len() {
        return Err(DistillError::Shape(format!(
            "distribution lengths {} vs {}",
            p_a.len(),
            p_s.len()
        )));
    }
    Ok(kl_unchecked(p_a, p_s))
}

fn kl_unchecked(p_a: &[f64], p_s: &[f64]) -> f64 {
    let kl: f64 = p_a
        .iter()
        .zip(p_s)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &s)| a * (a.ln() - s.max(PROB_FLOOR).ln()))
        .sum();
    // Rounding can leave a tiny negative sum for near-equal inputs.
    kl.max(0.0)
}

/// KL between temperature-softened distributions of two logit vectors and
/// its gradient with respect to the student logits.
fn kl_logits(assistant: &[f64], student: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let p_a = softmax_unchecked(assistant, tau);
    let p_s = softmax_unchecked(student, tau);
    let loss = kl_unchecked(&p_a, &p_s);
    // d/dz_m of -sum_k p_a[k] ln p_s[k], over unfloored k only.
    let live_mass: f64 = p_a
        .iter()
        .zip(&p_s)
        .filter(|(_, &s)| s > PROB_FLOOR)
        .map(|(&a, _)| a)
        .sum();
    let grad = p_a
        .iter()
        .zip(&p_s)
        .map(|(&a, &s)| {
            let own = if s > PROB_FLOOR { a } else { 0.0 };
            (s * live_mass - own) / tau
        })
        .collect();
    (loss, grad)
}

/// `-ln softmax(z)[target]` and its gradient `softmax(z) - onehot`.
fn nll_logits(z: &[f64], target: usize) -> (f64, Vec<f64>) {
    let logp = log_softmax(z);
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[target] -= 1.0;
    (-logp[target], grad)
}

fn check_batch(logits: &[LogitTensor], examples: &[TokenizedExample]) -> Result<(), DistillError> {
    if logits.is_empty() || logits.len() != examples.len() {
        return Err(DistillError::Shape(format!(
            "batch of {} logits vs {} examples",
            logits.len(),
            examples.len()
        )));
    }
    for (l, e) in logits.iter().zip(examples) {
        if l.token_logits.len() != e.target_ids.len() {
            return Err(DistillError::Shape(format!(
                "{} logit rows vs {} targets",
                l.token_logits.len(),
                e.target_ids.len()
            )));
        }
    }
    Ok(())
}

/// Reasoning-branch hard loss: summed token NLL over unmasked positions,
/// averaged over the batch. An all-masked batch yields 0 with a warning.
pub fn masked_token_nll(logits: &[LogitTensor], examples: &[TokenizedExample]) -> Result<f64, DistillError> {
    check_batch(logits, examples)?;
    Ok(hard_rea(logits, examples, None))
}

fn hard_rea(logits: &[LogitTensor], examples: &[TokenizedExample], mut grads: Option<(&mut [LogitGrad], f64)>) -> f64 {
    let b = logits.len() as f64;
    let mut total = 0.0;
    let mut any = false;
    for (i, (l, e)) in logits.iter().zip(examples).enumerate() {
        for (j, t) in e.unmasked() {
            any = true;
            let (loss, g) = nll_logits(&l.token_logits[j], t);
            total += loss;
            if let Some((gs, scale)) = grads.as_mut() {
                for (acc, gv) in gs[i].token[j].iter_mut().zip(g) {
                    *acc += *scale * gv / b;
                }
            }
        }
    }
    if !any {
        log::warn!("masked_token_nll: every target position is masked; loss is 0");
    }
    total / b
}

/// Classification hard loss: mean NLL of the class logits.
pub fn class_nll(logits: &[LogitTensor], examples: &[TokenizedExample]) -> Result<f64, DistillError> {
    check_batch(logits, examples)?;
    Ok(hard_cls(logits, examples, None))
}

fn hard_cls(logits: &[LogitTensor], examples: &[TokenizedExample], mut grads: Option<(&mut [LogitGrad], f64)>) -> f64 {
    let b = logits.len() as f64;
    let mut total = 0.0;
    for (i, (l, e)) in logits.iter().zip(examples).enumerate() {
        let (loss, g) = nll_logits(&l.class_logits, e.class_target);
        total += loss;
        if let Some((gs, scale)) = grads.as_mut() {
            for (acc, gv) in gs[i].class.iter_mut().zip(g) {
                *acc += *scale * gv / b;
            }
        }
    }
    total / b
}

/// `lambda_cls * l_cls + lambda_rea * l_rea`.
pub fn multitask_loss(l_cls: f64, l_rea: f64, w: &LossWeights) -> f64 {
    w.lambda_cls * l_cls + w.lambda_rea * l_rea
}

/// Soft losses of one sample: class KL at temperature `tau`, and the mean
/// per-position KL over unmasked target positions (0 when all are masked).
pub fn soft_losses(
    student: &LogitTensor,
    assistant: &LogitTensor,
    targets: &[i64],
    w: &LossWeights,
) -> Result<(f64, f64), DistillError> {
    check_tau(w.tau)?;
    if student.token_logits.len() != assistant.token_logits.len()
        || student.token_logits.len() != targets.len()
    {
        return Err(DistillError::Shape(format!(
            "student {} rows, assistant {} rows, {} targets",
            student.token_logits.len(),
            assistant.token_logits.len(),
            targets.len()
        )));
    }
    Ok(soft_one(student, assistant, targets, w, None))
}

fn soft_one(
    student: &LogitTensor,
    assistant: &LogitTensor,
    targets: &[i64],
    w: &LossWeights,
    mut grad: Option<(&mut LogitGrad, f64, f64)>,
) -> (f64, f64) {
    let k = w.kl_scale();
    let (cls, g) = kl_logits(&assistant.class_logits, &student.class_logits, w.tau);
    if let Some((gs, scale_cls, _)) = grad.as_mut() {
        for (acc, gv) in gs.class.iter_mut().zip(g) {
            *acc += *scale_cls * k * gv;
        }
    }
    let positions: Vec<usize> = targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != IGNORE_INDEX)
        .map(|(j, _)| j)
        .collect();
    let mut rea = 0.0;
    if !positions.is_empty() {
        let n = positions.len() as f64;
        for &j in &positions {
            let (l, g) = kl_logits(&assistant.token_logits[j], &student.token_logits[j], w.tau);
            rea += l;
            if let Some((gs, _, scale_rea)) = grad.as_mut() {
                for (acc, gv) in gs.token[j].iter_mut().zip(g) {
                    *acc += *scale_rea * k * gv / n;
                }
            }
        }
        rea /= n;
    }
    (k * cls, k * rea)
}

/// `(1 - lambda_kd) * hard_multi + lambda_kd * soft_multi`.
pub fn total_student_loss(hard: (f64, f64), soft: (f64, f64), w: &LossWeights) -> f64 {
    (1.0 - w.lambda_kd) * multitask_loss(hard.0, hard.1, w) + w.lambda_kd * multitask_loss(soft.0, soft.1, w)
}

/// Component losses of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub hard_cls: f64,
    pub hard_rea: f64,
    pub soft_cls: f64,
    pub soft_rea: f64,
}

/// Batch objective and its gradient with respect to every sample's logits.
///
/// Without assistant logits this is the multitask hard loss; with them it is
/// the full student objective.
pub fn objective_with_grad(
    logits: &[LogitTensor],
    examples: &[TokenizedExample],
    assistant: Option<&[LogitTensor]>,
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<LogitGrad>), DistillError> {
    w.validate()?;
    check_batch(logits, examples)?;
    let mut grads: Vec<LogitGrad> = logits.iter().map(LogitGrad::zeros_like).collect();
    let hard_scale = if assistant.is_some() { 1.0 - w.lambda_kd } else { 1.0 };
    let hc = hard_cls(logits, examples, Some((&mut grads, hard_scale * w.lambda_cls)));
    let hr = hard_rea(logits, examples, Some((&mut grads, hard_scale * w.lambda_rea)));
    let mut out = LossBreakdown {
        total: 0.0,
        hard_cls: hc,
        hard_rea: hr,
        soft_cls: 0.0,
        soft_rea: 0.0,
    };
    match assistant {
        None => out.total = multitask_loss(hc, hr, w),
        Some(a) => {
            check_batch(a, examples)?;
            let b = logits.len() as f64;
            let sc = w.lambda_kd * w.lambda_cls / b;
            let sr = w.lambda_kd * w.lambda_rea / b;
            for i in 0..logits.len() {
                let (c, r) = soft_one(&logits[i], &a[i], &examples[i].target_ids, w, Some((&mut grads[i], sc, sr)));
                out.soft_cls += c / b;
                out.soft_rea += r / b;
            }
            out.total = total_student_loss((hc, hr), (out.soft_cls, out.soft_rea), w);
        }
    }
    Ok((out, grads))
}
