use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{objective_with_grad, LogitTensor, LossBreakdown, LossWeights, TokenizedExample};
use super::toy::ToyModel;
use super::DistillError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub plateau_patience: usize,
    pub lr_floor: f64,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 3e-4,
            plateau_patience: 2,
            lr_floor: 1e-6,
            batch_size: 2,
            grad_accumulation: 20,
            max_epochs: 20,
            seed: 0,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    /// The default schedule with a learning rate suited to the small toy
    /// model, which gets only a few optimizer steps per epoch.
    pub fn desk() -> Self {
        TrainConfig {
            initial_lr: 0.02,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        let ok = self.initial_lr > 0.0
            && self.lr_floor > 0.0
            && self.lr_floor <= self.initial_lr
            && self.batch_size >= 1
            && self.grad_accumulation >= 1
            && self.max_epochs >= 1
            && self.plateau_patience >= 1
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(DistillError::Domain(format!("invalid train config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Assistant,
    Student,
}

/// Halves the learning rate after `patience` epochs without improvement,
/// never going below `floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    floor: f64,
    patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, floor: f64) -> Self {
        PlateauScheduler {
            lr,
            floor,
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records an epoch's monitored loss (lower is better) and returns the
    /// learning rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best {
            self.best = metric;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr / 2.0).max(self.floor);
                self.stale = 0;
            }
        }
        self.lr
    }
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    weight_decay: f64,
}

impl AdamW {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, weight_decay: f64) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            weight_decay,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * (mhat / (vhat.sqrt() + Self::EPS) + self.weight_decay * params[i]);
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_hard_cls: f64,
    pub loss_hard_rea: f64,
    pub loss_soft_cls: f64,
    pub loss_soft_rea: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub log: Vec<EpochLog>,
    pub updates: usize,
}

/// Loss and parameter gradient of one batch.
pub fn batch_objective(
    model: &ToyModel,
    batch: &[TokenizedExample],
    assistant_logits: Option<&[LogitTensor]>,
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<f64>), DistillError> {
    let (logits, traces): (Vec<_>, Vec<_>) = batch
        .iter()
        .map(|e| model.forward_traced(&e.input_ids, e.prompt_len))
        .unzip();
    let (loss, dl) = objective_with_grad(&logits, batch, assistant_logits, w)?;
    let mut grad = vec![0.0; model.params.len()];
    for (t, g) in traces.iter().zip(&dl) {
        model.backward(t, g, &mut grad);
    }
    Ok((loss, grad))
}

fn check_inputs(model: &ToyModel, data: &[TokenizedExample]) -> Result<(), DistillError> {
    if data.is_empty() {
        return Err(DistillError::Domain("training data is empty".into()));
    }
    for e in data {
        e.validate(model.dims.vocab)?;
    }
    Ok(())
}

fn frozen_logits(assistant: &ToyModel, data: &[TokenizedExample]) -> Vec<LogitTensor> {
    data.iter().map(|e| assistant.forward(&e.input_ids, e.prompt_len)).collect()
}

/// Mean batch objective over a dataset, with batches of `batch_size`.
pub fn mean_objective(
    model: &ToyModel,
    data: &[TokenizedExample],
    assistant: Option<&ToyModel>,
    w: &LossWeights,
    batch_size: usize,
) -> Result<LossBreakdown, DistillError> {
    let soft = assistant.map(|a| frozen_logits(a, data));
    let mut sum = LossBreakdown::default();
    let mut n = 0.0;
    for (bi, batch) in data.chunks(batch_size.max(1)).enumerate() {
        let logits: Vec<LogitTensor> = batch.iter().map(|e| model.forward(&e.input_ids, e.prompt_len)).collect();
        let start = bi * batch_size.max(1);
        let a = soft.as_ref().map(|s| &s[start..start + batch.len()]);
        let (l, _) = objective_with_grad(&logits, batch, a, w)?;
        add(&mut sum, &l, 1.0);
        n += 1.0;
    }
    scale(&mut sum, 1.0 / n);
    Ok(sum)
}

fn add(acc: &mut LossBreakdown, l: &LossBreakdown, k: f64) {
    acc.total += k * l.total;
    acc.hard_cls += k * l.hard_cls;
    acc.hard_rea += k * l.hard_rea;
    acc.soft_cls += k * l.soft_cls;
    acc.soft_rea += k * l.soft_rea;
}

fn scale(acc: &mut LossBreakdown, k: f64) {
    let copy = *acc;
    *acc = LossBreakdown::default();
    add(acc, &copy, k);
}

/// Trains `model` with AdamW. Gradients of `grad_accumulation` consecutive
/// micro-batches are averaged into one update, counting across epoch
/// boundaries; a trailing partial window is not applied. The scheduler
/// monitors the validation objective when `validation` is given, the
/// training objective otherwise.
pub fn train(
    mut model: ToyModel,
    data: &[TokenizedExample],
    validation: Option<&[TokenizedExample]>,
    cfg: &TrainConfig,
    w: &LossWeights,
    role: Role,
    assistant: Option<&ToyModel>,
) -> Result<TrainOutcome, DistillError> {
    cfg.validate()?;
    w.validate()?;
    check_inputs(&model, data)?;
    let assistant = match (role, assistant) {
        (Role::Student, Some(a)) => {
            if a.dims.vocab != model.dims.vocab {
                return Err(DistillError::Shape("assistant and student vocabularies differ".into()));
            }
            Some(a)
        }
        (Role::Student, None) => {
            return Err(DistillError::Domain("student training needs a frozen assistant".into()))
        }
        (Role::Assistant, _) => None,
    };
    let soft = assistant.map(|a| frozen_logits(a, data));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut opt = AdamW::new(model.params.len(), cfg.weight_decay);
    let mut sched = PlateauScheduler::new(cfg.initial_lr, cfg.plateau_patience, cfg.lr_floor);
    let mut acc = vec![0.0; model.params.len()];
    let mut pending = 0usize;
    let mut updates = 0usize;
    let mut log = Vec::with_capacity(cfg.max_epochs);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let lr = sched.lr();
        let mut epoch_loss = LossBreakdown::default();
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TokenizedExample> = idx.iter().map(|&i| data[i].clone()).collect();
            let a: Option<Vec<LogitTensor>> = soft.as_ref().map(|s| idx.iter().map(|&i| s[i].clone()).collect());
            let (loss, grad) = batch_objective(&model, &batch, a.as_deref(), w)?;
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(DistillError::NonFinite { epoch, batch: bi });
            }
            add(&mut epoch_loss, &loss, 1.0);
            batches += 1;
            for (a, g) in acc.iter_mut().zip(&grad) {
                *a += g;
            }
            pending += 1;
            if pending == cfg.grad_accumulation {
                let k = 1.0 / cfg.grad_accumulation as f64;
                acc.iter_mut().for_each(|a| *a *= k);
                opt.step(&mut model.params, &acc, lr);
                acc.iter_mut().for_each(|a| *a = 0.0);
                pending = 0;
                updates += 1;
            }
        }
        scale(&mut epoch_loss, 1.0 / batches as f64);
        log.push(EpochLog {
            epoch,
            loss_total: epoch_loss.total,
            loss_hard_cls: epoch_loss.hard_cls,
            loss_hard_rea: epoch_loss.hard_rea,
            loss_soft_cls: epoch_loss.soft_cls,
            loss_soft_rea: epoch_loss.soft_rea,
            lr,
        });
        let monitored = match validation {
            Some(v) if !v.is_empty() => mean_objective(&model, v, assistant, w, cfg.batch_size)?.total,
            _ => epoch_loss.total,
        };
        log::debug!("epoch {epoch}: loss {:.5} monitored {monitored:.5} lr {lr:e}", epoch_loss.total);
        sched.step(monitored);
    }
    Ok(TrainOutcome { model, log, updates })
}

/// Fraction of examples whose predicted class matches the target.
pub fn class_accuracy(model: &ToyModel, data: &[TokenizedExample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data
        .iter()
        .filter(|e| model.predict_class(&e.input_ids, e.prompt_len) == e.class_target)
        .count();
    hits as f64 / data.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub probed: usize,
}

/// Finite-difference step of [`grad_check`].
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so parameters with near-zero
/// gradient are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;
pub const MAX_PROBES: usize = 500;

/// Compares the analytic gradient of the batch objective against central
/// differences on up to `max_probes` (at most [`MAX_PROBES`]) parameters
/// chosen with `seed`.
pub fn grad_check(
    model: &ToyModel,
    batch: &[TokenizedExample],
    assistant: Option<&ToyModel>,
    w: &LossWeights,
    max_probes: usize,
    seed: u64,
) -> Result<GradCheckReport, DistillError> {
    check_inputs(model, batch)?;
    let soft = assistant.map(|a| frozen_logits(a, batch));
    let (_, grad) = batch_objective(model, batch, soft.as_deref(), w)?;
    let n = model.params.len();
    let probes = max_probes.min(MAX_PROBES).min(n);
    let indices: Vec<usize> = if probes == n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, n, probes).into_vec()
    };
    let f = |m: &ToyModel| -> Result<f64, DistillError> {
        Ok(batch_objective(m, batch, soft.as_deref(), w)?.0.total)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        probed: indices.len(),
    };
    let mut probe = model.clone();
    for i in indices {
        let orig = probe.params[i];
        probe.params[i] = orig + FD_STEP;
        let up = f(&probe)?;
        probe.params[i] = orig - FD_STEP;
        let down = f(&probe)?;
        probe.params[i] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let abs = (fd - grad[i]).abs();
        let rel = abs / fd.abs().max(grad[i].abs()).max(REL_ERROR_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
    }
    Ok(report)
}

/// Random batch over a vocabulary, with a mix of masked and unmasked
/// targets; for gradient checks and property tests.
pub fn random_batch(rng: &mut impl Rng, vocab: usize, batch: usize, max_len: usize) -> Vec<TokenizedExample> {
    (0..batch)
        .map(|_| {
            let l = rng.gen_range(2..=max_len.max(2));
            let prompt_len = rng.gen_range(1..l);
            let input_ids = (0..l).map(|_| rng.gen_range(0..vocab)).collect();
            let target_ids = (0..l)
                .map(|j| {
                    if j + 1 < prompt_len || rng.gen_bool(0.2) {
                        super::losses::IGNORE_INDEX
                    } else {
                        rng.gen_range(0..vocab) as i64
                    }
                })
                .collect();
            TokenizedExample {
                input_ids,
                target_ids,
                class_target: rng.gen_range(0..3),
                prompt_len,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::toy::ToyDims;

    fn tiny() -> ToyDims {
        ToyDims {
            vocab: 8,
            embed: 4,
            hidden: 6,
        }
    }

    #[test]
    fn plateau_halves_after_two_stale_epochs() {
        let mut s = PlateauScheduler::new(1e-3, 2, 1e-6);
        assert_eq!(s.step(1.0), 1e-3);
        assert_eq!(s.step(1.0), 1e-3);
        assert_eq!(s.step(1.0), 5e-4);
        assert_eq!(s.step(0.5), 5e-4);
        let mut f = PlateauScheduler::new(3e-6, 1, 1e-6);
        f.step(1.0);
        for _ in 0..10 {
            f.step(1.0);
        }
        assert_eq!(f.lr(), 1e-6);
    }

    #[test]
    fn forty_micro_batches_give_two_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_batch(&mut rng, 8, 80, 5);
        let cfg = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let out = train(ToyModel::new(tiny(), 1).unwrap(), &data, None, &cfg, &LossWeights::default(), Role::Assistant, None).unwrap();
        assert_eq!(out.updates, 2);
        let cfg3 = TrainConfig { max_epochs: 3, ..cfg };
        // 30 micro-batches per epoch: updates fire across epoch boundaries.
        let out = train(ToyModel::new(tiny(), 1).unwrap(), &data[..60], None, &cfg3, &LossWeights::default(), Role::Assistant, None).unwrap();
        assert_eq!(out.updates, 4);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = random_batch(&mut rng, 8, 40, 6);
        let cfg = TrainConfig {
            max_epochs: 3,
            grad_accumulation: 2,
            ..TrainConfig::desk()
        };
        let asst = ToyModel::new(tiny(), 99).unwrap();
        let run = || {
            train(ToyModel::new(tiny(), 4).unwrap(), &data, Some(&data[..6]), &cfg, &LossWeights::default(), Role::Student, Some(&asst)).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn student_requires_assistant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = random_batch(&mut rng, 8, 4, 4);
        let r = train(ToyModel::new(tiny(), 1).unwrap(), &data, None, &TrainConfig::default(), &LossWeights::default(), Role::Student, None);
        assert!(r.is_err());
        let r = train(ToyModel::new(tiny(), 1).unwrap(), &[], None, &TrainConfig::default(), &LossWeights::default(), Role::Assistant, None);
        assert!(r.is_err());
    }

    #[test]
    fn nan_parameters_abort_with_batch_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = random_batch(&mut rng, 8, 4, 4);
        let mut m = ToyModel::new(tiny(), 1).unwrap();
        let last = m.params.len() - 1;
        m.params[last] = f64::NAN;
        let err = train(m, &data, None, &TrainConfig::default(), &LossWeights::default(), Role::Assistant, None).unwrap_err();
        assert!(matches!(err, DistillError::NonFinite { epoch: 1, batch: 0 }));
    }

    #[test]
    fn grad_check_passes_on_random_models() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = random_batch(&mut rng, 8, 3, 6);
            let m = ToyModel::new(tiny(), seed).unwrap();
            let a = ToyModel::new(tiny(), seed + 100).unwrap();
            let r = grad_check(&m, &batch, Some(&a), &LossWeights::default(), 500, seed).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{r:?}");
            assert_eq!(r.probed, m.params.len());
        }
    }

    #[test]
    fn unused_embedding_row_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut batch = random_batch(&mut rng, 8, 3, 6);
        for e in &mut batch {
            for t in &mut e.input_ids {
                if *t == 7 {
                    *t = 0;
                }
            }
        }
        let m = ToyModel::new(tiny(), 2).unwrap();
        let (_, grad) = batch_objective(&m, &batch, None, &LossWeights::default()).unwrap();
        let d = m.dims.embed;
        assert!(grad[7 * d..8 * d].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn lambda_changes_gradient_when_models_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = random_batch(&mut rng, 8, 2, 5);
        let m = ToyModel::new(tiny(), 1).unwrap();
        let a = ToyModel::new(tiny(), 2).unwrap();
        let soft = frozen_logits(&a, &batch);
        let g = |kd: f64| {
            let w = LossWeights { lambda_kd: kd, ..Default::default() };
            batch_objective(&m, &batch, Some(&soft), &w).unwrap().1
        };
        let (g0, g1) = (g(0.0), g(1.0));
        assert!(g0.iter().zip(&g1).any(|(a, b)| (a - b).abs() > 1e-9));
    }
}
