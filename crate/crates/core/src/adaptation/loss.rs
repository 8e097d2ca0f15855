//! Dice, weighted cross-entropy and their scheduled mix. Every loss can
//! also accumulate its gradient with respect to the probabilities.

use crate::error::{Error, Result};
use crate::map::{LabelMap, ProbabilityMap, NUM_CLASSES};

use super::schedule::{class_weight_schedule, lambda_schedule, ScheduleConfig};

pub const DICE_EPS: f64 = 1e-6;
const LOG_FLOOR: f64 = 1e-300;

fn check(probs: &ProbabilityMap, label: &LabelMap, mask: Option<&[bool]>) -> Result<()> {
    probs.require_channels(NUM_CLASSES)?;
    if probs.dims() != (label.height(), label.width()) {
        return Err(Error::Argument(
            "probabilities and label differ in size".into(),
        ));
    }
    if mask.is_some_and(|m| m.len() != label.data().len()) {
        return Err(Error::Argument("mask size differs from label".into()));
    }
    Ok(())
}

/// `Σ_c w_c (1 − D_c) / Σ_c w_c` with the soft Dice
/// `D_c = (2 Σ p_c y_c + ε) / (Σ p_c + Σ y_c + ε)` over unmasked pixels.
/// When `grad` is given, `scale × ∂L/∂p` is added to it.
pub fn dice_loss_masked(
    probs: &ProbabilityMap,
    label: &LabelMap,
    class_weights: &[f64; NUM_CLASSES],
    mask: Option<&[bool]>,
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    check(probs, label, mask)?;
    let total_w: f64 = class_weights.iter().sum();
    if total_w <= 0.0 {
        return Ok(0.0);
    }
    let mut inter = [0.0; NUM_CLASSES];
    let mut sum_p = [0.0; NUM_CLASSES];
    let mut sum_y = [0.0; NUM_CLASSES];
    for (i, (p, &y)) in probs.pixels().zip(label.data()).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for c in 0..NUM_CLASSES {
            sum_p[c] += p[c];
        }
        inter[y as usize] += p[y as usize];
        sum_y[y as usize] += 1.0;
    }
    let mut loss = 0.0;
    let mut coef_y = [0.0; NUM_CLASSES];
    let mut coef = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let denom = sum_p[c] + sum_y[c] + DICE_EPS;
        let d = (2.0 * inter[c] + DICE_EPS) / denom;
        loss += class_weights[c] * (1.0 - d);
        // ∂D_c/∂p_uc = (2 y_uc denom − (2 I_c + ε)) / denom²
        coef_y[c] = -class_weights[c] / total_w * 2.0 / denom;
        coef[c] = class_weights[c] / total_w * (2.0 * inter[c] + DICE_EPS) / (denom * denom);
    }
    if let Some((g, scale)) = grad {
        for (i, (gp, &y)) in g
            .chunks_exact_mut(NUM_CLASSES)
            .zip(label.data())
            .enumerate()
        {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            for c in 0..NUM_CLASSES {
                gp[c] += scale * coef[c];
            }
            gp[y as usize] += scale * coef_y[y as usize];
        }
    }
    Ok(loss / total_w)
}

pub fn dice_loss(
    probs: &ProbabilityMap,
    label: &LabelMap,
    class_weights: &[f64; NUM_CLASSES],
) -> Result<f64> {
    dice_loss_masked(probs, label, class_weights, None, None)
}

/// `Σ_u m_u w_y(u) (−log p_y(u)) / Σ_u m_u w_y(u)`, where `m_u` are pixel
/// weights (1 when absent). Zero when the total weight vanishes.
pub fn ce_loss_weighted(
    probs: &ProbabilityMap,
    label: &LabelMap,
    pixel_weights: Option<&[f64]>,
    class_weights: &[f64; NUM_CLASSES],
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    check(probs, label, None)?;
    if pixel_weights.is_some_and(|m| m.len() != label.data().len()) {
        return Err(Error::Argument(
            "pixel weights differ in size from label".into(),
        ));
    }
    let weight = |i: usize, y: u8| pixel_weights.map_or(1.0, |m| m[i]) * class_weights[y as usize];
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (p, &y)) in probs.pixels().zip(label.data()).enumerate() {
        let w = weight(i, y);
        if w == 0.0 {
            continue;
        }
        num -= w * p[y as usize].max(LOG_FLOOR).ln();
        den += w;
    }
    if den <= 0.0 {
        return Ok(0.0);
    }
    if let Some((g, scale)) = grad {
        for (i, ((gp, p), &y)) in g
            .chunks_exact_mut(NUM_CLASSES)
            .zip(probs.pixels())
            .zip(label.data())
            .enumerate()
        {
            let w = weight(i, y);
            if w != 0.0 {
                gp[y as usize] -= scale * w / (den * p[y as usize].max(LOG_FLOOR));
            }
        }
    }
    Ok(num / den)
}

pub fn ce_loss(
    probs: &ProbabilityMap,
    label: &LabelMap,
    pixel_weights: Option<&[f64]>,
    class_weights: &[f64; NUM_CLASSES],
) -> Result<f64> {
    ce_loss_weighted(probs, label, pixel_weights, class_weights, None)
}

/// `w_c = N / (C_present N_c)` for present classes, 0 for absent ones,
/// rescaled to mean 1 over the present classes.
pub fn pixel_class_balance_weights(label: &LabelMap) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for &l in label.data() {
        counts[l as usize] += 1;
    }
    let n = label.data().len() as f64;
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present == 0 {
        return [0.0; NUM_CLASSES];
    }
    let mut w = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        if counts[c] > 0 {
            w[c] = n / (present as f64 * counts[c] as f64);
        }
    }
    let mean = w.iter().sum::<f64>() / present as f64;
    w.iter_mut().for_each(|v| *v /= mean);
    w
}

/// Dice plus `ce_weight` × cross-entropy over the unmasked pixels.
pub fn seg_loss_masked(
    probs: &ProbabilityMap,
    label: &LabelMap,
    class_weights: &[f64; NUM_CLASSES],
    ce_weight: f64,
    mask: Option<&[bool]>,
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    let pixel_weights: Option<Vec<f64>> =
        mask.map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
    match grad {
        Some((g, scale)) => {
            let d = dice_loss_masked(probs, label, class_weights, mask, Some((&mut *g, scale)))?;
            let ce = ce_loss_weighted(
                probs,
                label,
                pixel_weights.as_deref(),
                class_weights,
                Some((g, scale * ce_weight)),
            )?;
            Ok(d + ce_weight * ce)
        }
        None => {
            let d = dice_loss_masked(probs, label, class_weights, mask, None)?;
            let ce = ce_loss_weighted(probs, label, pixel_weights.as_deref(), class_weights, None)?;
            Ok(d + ce_weight * ce)
        }
    }
}

fn combine(schedule: &[f64; NUM_CLASSES], balance: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    std::array::from_fn(|c| schedule[c] * balance[c])
}

/// Segmentation loss against the integrated label at time `t`; class
/// weights are the scheduled integrated weights times the label's pixel
/// balance weights.
pub fn seg_loss(
    probs: &ProbabilityMap,
    integrated: &LabelMap,
    t: f64,
    cfg: &ScheduleConfig,
) -> Result<f64> {
    let w = combine(
        &class_weight_schedule(t, cfg).1,
        &pixel_class_balance_weights(integrated),
    );
    seg_loss_masked(probs, integrated, &w, cfg.ce_weight, None, None)
}

/// `1[max_c p_c > τ]` per pixel.
pub fn confidence_mask(probs: &ProbabilityMap, tau: f64) -> Vec<bool> {
    probs
        .pixels()
        .map(|p| p.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > tau)
        .collect()
}

/// Segmentation loss against the pseudo-label restricted to confident
/// pixels; 0 when no pixel is confident.
pub fn conf_loss(
    probs: &ProbabilityMap,
    pseudo: &LabelMap,
    t: f64,
    tau_conf: f64,
    cfg: &ScheduleConfig,
) -> Result<f64> {
    Ok(adapt_terms(probs, pseudo, pseudo, t, tau_conf, cfg, None)?.conf)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptTerms {
    pub lambda: f64,
    pub seg: f64,
    pub conf: f64,
    pub adapt: f64,
}

/// `λ(t) L_conf + (1 − λ(t)) L_seg`, optionally accumulating `∂/∂p` into
/// `grad`. The confidence mask comes from `probs` and is treated as a
/// constant when differentiating.
pub fn adapt_terms(
    probs: &ProbabilityMap,
    integrated: &LabelMap,
    pseudo: &LabelMap,
    t: f64,
    tau_conf: f64,
    cfg: &ScheduleConfig,
    grad: Option<&mut [f64]>,
) -> Result<AdaptTerms> {
    let mask = confidence_mask(probs, tau_conf);
    adapt_terms_masked(probs, integrated, pseudo, t, &mask, cfg, grad)
}

/// [`adapt_terms`] with an explicit confidence mask.
pub fn adapt_terms_masked(
    probs: &ProbabilityMap,
    integrated: &LabelMap,
    pseudo: &LabelMap,
    t: f64,
    mask: &[bool],
    cfg: &ScheduleConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<AdaptTerms> {
    let lambda = lambda_schedule(t, cfg);
    let (wt, wi) = class_weight_schedule(t, cfg);
    let w_seg = combine(&wi, &pixel_class_balance_weights(integrated));
    // balance over the pixels that actually contribute
    let confident: Vec<u8> = mask
        .iter()
        .zip(pseudo.data())
        .filter(|(m, _)| **m)
        .map(|(_, &l)| l)
        .collect();
    let w_conf = if confident.is_empty() {
        None
    } else {
        let sub = LabelMap::new(1, confident.len(), confident)?;
        Some(combine(&wt, &pixel_class_balance_weights(&sub)))
    };
    let seg = seg_loss_masked(
        probs,
        integrated,
        &w_seg,
        cfg.ce_weight,
        None,
        grad.as_deref_mut().map(|g| (g, 1.0 - lambda)),
    )?;
    let conf = match w_conf {
        Some(w) => seg_loss_masked(
            probs,
            pseudo,
            &w,
            cfg.ce_weight,
            Some(mask),
            grad.map(|g| (g, lambda)),
        )?,
        None => 0.0,
    };
    Ok(AdaptTerms {
        lambda,
        seg,
        conf,
        adapt: lambda * conf + (1.0 - lambda) * seg,
    })
}

pub fn adapt_loss(
    probs: &ProbabilityMap,
    integrated: &LabelMap,
    pseudo: &LabelMap,
    t: f64,
    tau_conf: f64,
    cfg: &ScheduleConfig,
) -> Result<f64> {
    Ok(adapt_terms(probs, integrated, pseudo, t, tau_conf, cfg, None)?.adapt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::Class;

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let l = LabelMap::new(2, 2, vec![0, 2, 3, 4]).unwrap();
        let p = ProbabilityMap::one_hot(&l, 5);
        let w = [1.0; 5];
        assert!(dice_loss(&p, &l, &w).unwrap().abs() < 1e-6);
        assert!(ce_loss(&p, &l, None, &w).unwrap().abs() < 1e-12);
    }

    #[test]
    fn uniform_ce_is_ln5() {
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 0]).unwrap();
        let p = ProbabilityMap::new(2, 3, 5, vec![0.2; 30]).unwrap();
        assert!((ce_loss(&p, &l, None, &[1.0; 5]).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn balance_weights() {
        let l = LabelMap::filled(4, 4, Class::Vein);
        assert_eq!(pixel_class_balance_weights(&l)[Class::Vein.index()], 1.0);
        let l = LabelMap::new(1, 4, vec![0, 0, 0, 2]).unwrap();
        let w = pixel_class_balance_weights(&l);
        assert!((w[2] / w[0] - 3.0).abs() < 1e-12);
        assert!(((w[0] + w[2]) / 2.0 - 1.0).abs() < 1e-12);
        assert_eq!(w[1], 0.0);
        let l = LabelMap::new(1, 5, vec![0, 1, 2, 3, 4]).unwrap();
        assert_eq!(pixel_class_balance_weights(&l), [1.0; 5]);
    }

    #[test]
    fn conf_loss_masks() {
        let l = LabelMap::new(1, 2, vec![2, 3]).unwrap();
        let cfg = ScheduleConfig::default();
        let low = ProbabilityMap::new(1, 2, 5, vec![0.2; 10]).unwrap();
        assert_eq!(conf_loss(&low, &l, 1.0, 0.8, &cfg).unwrap(), 0.0);
    }
}
