use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment_strong, augment_weak};
use super::loss::{adapt_terms, pixel_class_balance_weights, seg_loss_masked, AdaptTerms};
use super::model::{Gradient, TinyModel};
use super::pseudolabel::generate_pseudo_label;
use super::AdaptationConfig;
use crate::error::{Error, Result};
use crate::map::{Class, Image, LabelMap, ProbabilityMap};
use crate::metrics::dice;
use crate::par::Exec;
use crate::subject::ScanKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Passes over the training views.
    pub epochs: usize,
    pub base_lr: f64,
    /// The step size is `base_lr × lr_multiplier`.
    pub lr_multiplier: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            base_lr: 8e-5,
            lr_multiplier: 12_500.0,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.base_lr * self.lr_multiplier
    }

    pub fn check(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr() > 0.0) || !self.lr().is_finite() {
            return Err(Error::Config(
                "training needs at least one epoch and a positive step".into(),
            ));
        }
        Ok(())
    }
}

/// Settings for fitting the source model on labelled source-domain data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceTrainConfig {
    pub subjects: usize,
    pub epochs: usize,
    pub lr: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        Self {
            subjects: 6,
            epochs: 4,
            lr: 0.05,
            init_scale: 0.01,
            seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, model: &mut TinyModel, g: &Gradient, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let params = model.weights.iter_mut().chain(model.bias.iter_mut());
        let grads = g.weights.iter().chain(&g.bias);
        for (((p, &gi), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gi;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gi * gi;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

fn sgd_step(model: &mut TinyModel, g: &Gradient, lr: f64) {
    model
        .weights
        .iter_mut()
        .zip(&g.weights)
        .for_each(|(p, d)| *p -= lr * d);
    model
        .bias
        .iter_mut()
        .zip(&g.bias)
        .for_each(|(p, d)| *p -= lr * d);
}

/// `θ_T ← α θ_T + (1 − α) θ`, computed as `θ_T + (1 − α)(θ − θ_T)` so a
/// teacher equal to the student stays bit-identical.
pub fn ema_update(teacher: &mut TinyModel, student: &TinyModel, alpha: f64) {
    let blend = |t: &mut f64, s: f64| {
        *t = if alpha == 0.0 {
            s
        } else {
            *t + (1.0 - alpha) * (s - *t)
        };
    };
    teacher
        .weights
        .iter_mut()
        .zip(&student.weights)
        .for_each(|(t, &s)| blend(t, s));
    teacher
        .bias
        .iter_mut()
        .zip(&student.bias)
        .for_each(|(t, &s)| blend(t, s));
}

#[derive(Debug, Clone)]
pub struct AdaptationState {
    pub student: TinyModel,
    /// Only ever changed through [`ema_update`].
    pub teacher: TinyModel,
    pub epoch: usize,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub lr: f64,
    adam: Option<AdamState>,
}

impl AdaptationState {
    /// Student and teacher both start from `source`.
    pub fn new(source: &TinyModel, cfg: &TrainConfig) -> Self {
        Self {
            student: source.clone(),
            teacher: source.clone(),
            epoch: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            lr: cfg.lr(),
            adam: (cfg.optimizer == Optimizer::Adam).then(|| AdamState::new(source.num_params())),
        }
    }

    pub fn ema_update(&mut self, alpha: f64) {
        ema_update(&mut self.teacher, &self.student, alpha);
    }

    fn apply(&mut self, g: &Gradient) {
        match &mut self.adam {
            Some(adam) => adam.step(&mut self.student, g, self.lr),
            None => sgd_step(&mut self.student, g, self.lr),
        }
    }
}

/// A target view with its integrated label.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptSample {
    pub id: String,
    pub kind: ScanKind,
    pub image: Image,
    pub integrated: LabelMap,
}

/// A view kept out of training, scored against its true label.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldoutSample {
    pub id: String,
    pub kind: ScanKind,
    pub image: Image,
    pub truth: LabelMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lambda: f64,
    #[serde(rename = "segLoss")]
    pub seg_loss: f64,
    #[serde(rename = "confLoss")]
    pub conf_loss: f64,
    #[serde(rename = "adaptLoss")]
    pub adapt_loss: f64,
    #[serde(rename = "heldoutDiceA")]
    pub heldout_dice_a: Option<f64>,
    #[serde(rename = "heldoutDiceV")]
    pub heldout_dice_v: Option<f64>,
    #[serde(rename = "heldoutDiceF")]
    pub heldout_dice_f: Option<f64>,
}

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Loss terms and parameter gradient of the adaptation loss for one input.
pub fn loss_and_gradient(
    model: &TinyModel,
    image: &Image,
    integrated: &LabelMap,
    pseudo: &LabelMap,
    t: f64,
    cfg: &AdaptationConfig,
    exec: Exec,
) -> Result<(AdaptTerms, Gradient)> {
    let probs = model.forward(image, exec)?;
    let mut gp = vec![0.0; probs.data().len()];
    let terms = adapt_terms(
        &probs,
        integrated,
        pseudo,
        t,
        cfg.thresholds.tau_conf,
        &cfg.schedule,
        Some(&mut gp),
    )?;
    let grad = model.backward(image, &probs, &gp, exec)?;
    Ok((terms, grad))
}

/// One student update on `sample` followed by the teacher EMA.
pub fn adaptation_step(
    state: &mut AdaptationState,
    sample: &AdaptSample,
    t: f64,
    cfg: &AdaptationConfig,
    exec: Exec,
) -> Result<AdaptTerms> {
    let weak = augment_weak(&sample.image, &cfg.augment, &mut state.rng);
    let teacher_probs = state.teacher.forward(&weak, exec)?;
    let pseudo = generate_pseudo_label(&teacher_probs, sample.kind, &cfg.thresholds)?;
    let strong = augment_strong(&sample.image, &cfg.augment, &mut state.rng);
    let (terms, grad) = loss_and_gradient(
        &state.student,
        &strong,
        &sample.integrated,
        &pseudo,
        t,
        cfg,
        exec,
    )?;
    if !terms.adapt.is_finite() {
        return Err(Error::Adaptation(format!(
            "non-finite loss on {}",
            sample.id
        )));
    }
    state.apply(&grad);
    state.ema_update(cfg.schedule.ema_alpha);
    state.step += 1;
    Ok(terms)
}

/// Hard prediction of `model` on `image`.
pub fn predict(model: &TinyModel, image: &Image, exec: Exec) -> Result<LabelMap> {
    Ok(model.forward(image, exec)?.argmax())
}

/// Mean Dice of artery, vein and FAZ over `samples`.
pub fn heldout_dice(
    model: &TinyModel,
    samples: &[HeldoutSample],
    exec: Exec,
) -> Result<Option<[f64; 3]>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut acc = [0.0; 3];
    for s in samples {
        let pred = predict(model, &s.image, exec)?;
        for (a, c) in acc.iter_mut().zip([Class::Artery, Class::Vein, Class::Faz]) {
            *a += dice(&pred, &s.truth, c)?;
        }
    }
    Ok(Some(acc.map(|a| a / samples.len() as f64)))
}

/// Teacher-student self-training over `dataset`. Views are shuffled every
/// epoch; `t` advances continuously from 0 to `epochs`. Returns one log row
/// per epoch.
pub fn run_adaptation(
    dataset: &[AdaptSample],
    heldout: &[HeldoutSample],
    state: &mut AdaptationState,
    cfg: &AdaptationConfig,
    exec: Exec,
) -> Result<Vec<LogRow>> {
    if dataset.is_empty() {
        return Err(Error::Argument(
            "adaptation needs at least one training view".into(),
        ));
    }
    cfg.check()?;
    let n = dataset.len();
    let mut log = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut state.rng);
        let mut sums = [0.0; 3];
        let mut lambda = 0.0;
        for (i, &k) in order.iter().enumerate() {
            let t = epoch as f64 + i as f64 / n as f64;
            let terms = adaptation_step(state, &dataset[k], t, cfg, exec)?;
            sums[0] += terms.seg;
            sums[1] += terms.conf;
            sums[2] += terms.adapt;
            lambda = terms.lambda;
        }
        let d = heldout_dice(&state.student, heldout, exec)?;
        let row = LogRow {
            epoch: epoch + 1,
            step: state.step,
            lambda,
            seg_loss: sums[0] / n as f64,
            conf_loss: sums[1] / n as f64,
            adapt_loss: sums[2] / n as f64,
            heldout_dice_a: d.map(|d| d[0]),
            heldout_dice_v: d.map(|d| d[1]),
            heldout_dice_f: d.map(|d| d[2]),
        };
        log::info!(
            "epoch {} step {} adapt loss {:.4} held-out dice A {:?} V {:?}",
            row.epoch,
            row.step,
            row.adapt_loss,
            row.heldout_dice_a,
            row.heldout_dice_v
        );
        log.push(row);
    }
    state.epoch = cfg.train.epochs;
    Ok(log)
}

/// Fits a model on labelled `(image, truth)` pairs with Adam, one view per
/// step, minimizing Dice + CE under pixel class-balance weights.
pub fn train_source_model(
    samples: &[(Image, LabelMap)],
    cfg: &SourceTrainConfig,
    exec: Exec,
) -> Result<TinyModel> {
    let Some((first, _)) = samples.first() else {
        return Err(Error::Argument("source training needs samples".into()));
    };
    let mut model = TinyModel::seeded(first.channels, 5, cfg.seed, cfg.init_scale)?;
    let mut adam = AdamState::new(model.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            let (img, truth) = &samples[k];
            let probs = model.forward(img, exec)?;
            let mut gp = vec![0.0; probs.data().len()];
            let w = pixel_class_balance_weights(truth);
            seg_loss_masked(&probs, truth, &w, 1.0, None, Some((&mut gp, 1.0)))?;
            let g = model.backward(img, &probs, &gp, exec)?;
            adam.step(&mut model, &g, cfg.lr);
        }
    }
    Ok(model)
}

/// Soft output of `model` for each image.
pub fn predict_all(model: &TinyModel, images: &[Image], exec: Exec) -> Result<Vec<ProbabilityMap>> {
    images.iter().map(|img| model.forward(img, exec)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::NUM_CLASSES;

    #[test]
    fn ema_examples() {
        let mut t = TinyModel::zeros(1, 1).unwrap();
        let s = TinyModel::zeros(1, 1).unwrap();
        t.weights.iter_mut().for_each(|v| *v = 1.0);
        let mut fixed = t.clone();
        ema_update(&mut fixed, &t, 0.995);
        assert_eq!(fixed, t);
        let mut a = t.clone();
        ema_update(&mut a, &s, 0.995);
        assert!(a.weights.iter().all(|&v| (v - 0.995).abs() < 1e-15));
        let mut b = t.clone();
        ema_update(&mut b, &s, 0.0);
        assert_eq!(b, s);
    }

    #[test]
    fn empty_dataset_rejected() {
        let m = TinyModel::zeros(2, 5).unwrap();
        let cfg = AdaptationConfig::default();
        let mut st = AdaptationState::new(&m, &cfg.train);
        assert!(matches!(
            run_adaptation(&[], &[], &mut st, &cfg, Exec::Sequential),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn classes_are_five() {
        assert_eq!(TinyModel::zeros(2, 5).unwrap().classes, NUM_CLASSES);
    }
}
