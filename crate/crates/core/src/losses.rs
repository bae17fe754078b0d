//! Segmentation losses, the cross-modal alignment loss and the weighted total.

use magnet_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, MagnetError, Result};

pub const DICE_EPS: f64 = 1e-6;

/// How each alignment ratio enters the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalForm {
    /// `-log(ratio)` (InfoNCE).
    Log,
    /// `-ratio`, the bare softmax probability.
    Literal,
}

impl std::str::FromStr for CalForm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "log" => Ok(Self::Log),
            "literal" => Ok(Self::Literal),
            _ => Err(format!("unknown CAL form `{s}` (log, literal)")),
        }
    }
}

/// Which alignment terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalTerms {
    Off,
    P2p,
    P2t,
    Both,
}

impl CalTerms {
    pub fn p2p(self) -> bool {
        matches!(self, Self::P2p | Self::Both)
    }

    pub fn p2t(self) -> bool {
        matches!(self, Self::P2t | Self::Both)
    }
}

impl std::str::FromStr for CalTerms {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "off" => Ok(Self::Off),
            "p2p" => Ok(Self::P2p),
            "p2t" => Ok(Self::P2t),
            "both" => Ok(Self::Both),
            _ => Err(format!("unknown CAL setting `{s}` (off, p2p, p2t, both)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub cal: f64,
    pub grounding: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bce: 2.0,
            dice: 2.0,
            cal: 0.5,
            grounding: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub cal: CalTerms,
    pub cal_form: CalForm,
    pub tau1: f64,
    pub tau2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            cal: CalTerms::Both,
            cal_form: CalForm::Log,
            tau1: 0.1,
            tau2: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0) || !(self.tau2 > 0.0) {
            return config_err(format!("temperatures must be positive (tau1 {}, tau2 {})", self.tau1, self.tau2));
        }
        let w = &self.weights;
        if [w.bce, w.dice, w.cal, w.grounding].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return config_err("loss weights must be finite and nonnegative");
        }
        Ok(())
    }
}

/// Mean binary cross-entropy from logits.
pub fn bce_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, gt: &Tensor<T>) -> Result<Var> {
    Ok(g.bce_with_logits(logits, gt)?)
}

/// Soft Dice `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)` over one map.
pub fn dice_loss<T: Scalar>(g: &mut Graph<'_, T>, probs: Var, gt: &Tensor<T>) -> Result<Var> {
    Ok(g.dice(probs, gt, DICE_EPS)?)
}

/// Dice computed per sample on `batch` stacked maps, then averaged.
pub fn dice_loss_batched<T: Scalar>(g: &mut Graph<'_, T>, probs: Var, gt: &Tensor<T>, batch: usize) -> Result<Var> {
    let (rows, cols) = g.shape(probs);
    if batch == 0 || rows % batch != 0 || gt.shape() != (rows, cols) {
        return input_err(format!("dice over {rows}x{cols} predictions, {:?} targets, batch {batch}", gt.shape()));
    }
    let n = rows / batch;
    let mut terms = Vec::with_capacity(batch);
    for b in 0..batch {
        let p = g.slice_rows(probs, b * n, n)?;
        let t = Tensor::new(n, cols, gt.data()[b * n * cols..(b + 1) * n * cols].to_vec())?;
        terms.push(g.dice(p, &t, DICE_EPS)?);
    }
    mean_of(g, &terms)
}

fn mean_of<T: Scalar>(g: &mut Graph<'_, T>, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return input_err("mean of zero terms");
    }
    let v = if terms.len() == 1 { terms[0] } else { g.concat_rows(terms)? };
    Ok(g.mean_all(v))
}

/// Foreground and background rows of one sample's decoder feature, each
/// row L2-normalized.
#[derive(Clone, Copy, Debug)]
pub struct PixelPartition {
    pub positives: Option<Var>,
    pub negatives: Option<Var>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl PixelPartition {
    pub fn new<T: Scalar>(g: &mut Graph<'_, T>, features: Var, foreground: &[bool]) -> Result<Self> {
        let (rows, _) = g.shape(features);
        if foreground.len() != rows {
            return input_err(format!("{} mask entries for {rows} feature rows", foreground.len()));
        }
        let normed = g.l2_normalize_rows(features);
        let pos: Vec<usize> = (0..rows).filter(|&i| foreground[i]).collect();
        let neg: Vec<usize> = (0..rows).filter(|&i| !foreground[i]).collect();
        let positives = if pos.is_empty() { None } else { Some(g.gather_rows(normed, &pos)?) };
        let negatives = if neg.is_empty() { None } else { Some(g.gather_rows(normed, &neg)?) };
        Ok(Self {
            positives,
            negatives,
            n_pos: pos.len(),
            n_neg: neg.len(),
        })
    }
}

/// `mean_i f(ratio_i)` with `ratio_i = e^{x_i.a/tau} / (e^{x_i.a/tau} + sum_j e^{x_i.y_j/tau})`.
fn contrast<T: Scalar>(
    g: &mut Graph<'_, T>,
    rows: Var,
    anchor: Var,
    others: Option<Var>,
    tau: f64,
    form: CalForm,
) -> Result<Option<Var>> {
    let Some(others) = others else {
        return Ok(None);
    };
    let inv = T::from_f64_lossy(1.0 / tau);
    let sa = g.matmul_t(rows, false, anchor, true)?;
    let sa = g.scale(sa, inv);
    let sn = g.matmul_t(rows, false, others, true)?;
    let sn = g.scale(sn, inv);
    let all = g.concat_cols(&[sa, sn])?;
    let lse = g.logsumexp_rows(all);
    let neg_log_ratio = g.sub(lse, sa)?;
    Ok(Some(match form {
        CalForm::Log => g.mean_all(neg_log_ratio),
        CalForm::Literal => {
            let ratio = g.scale(neg_log_ratio, -T::one());
            let ratio = g.exp(ratio);
            let m = g.mean_all(ratio);
            g.scale(m, -T::one())
        }
    }))
}

fn normalized_mean<T: Scalar>(g: &mut Graph<'_, T>, rows: Var) -> Result<Var> {
    let m = g.mean_rows(rows)?;
    Ok(g.l2_normalize_rows(m))
}

fn sum_or_zero<T: Scalar>(g: &mut Graph<'_, T>, terms: &[Option<Var>]) -> Result<Var> {
    let present: Vec<Var> = terms.iter().flatten().copied().collect();
    match present.len() {
        0 => Ok(g.constant(Tensor::scalar(T::zero()))),
        1 => Ok(present[0]),
        _ => {
            let mut acc = present[0];
            for &t in &present[1..] {
                acc = g.add(acc, t)?;
            }
            Ok(acc)
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return input_err(format!("temperature {tau} must be positive"));
    }
    Ok(())
}

/// Pixel-to-pixel term: foreground rows against the pooled foreground anchor
/// with background rows as negatives, plus the mirrored background term.
/// A direction with no negatives contributes 0.
pub fn cal_p2p<T: Scalar>(g: &mut Graph<'_, T>, part: &PixelPartition, tau1: f64, form: CalForm) -> Result<Var> {
    check_tau(tau1)?;
    let mut terms = Vec::with_capacity(2);
    if let Some(p) = part.positives {
        let a = normalized_mean(g, p)?;
        terms.push(contrast(g, p, a, part.negatives, tau1, form)?);
    }
    if let Some(n) = part.negatives {
        let a = normalized_mean(g, n)?;
        terms.push(contrast(g, n, a, part.positives, tau1, form)?);
    }
    sum_or_zero(g, &terms)
}

/// Pixel-to-text term. `words` holds the sample's word features (no PAD or
/// CLS rows); `proj` maps their mean into the pixel feature width.
pub fn cal_p2t<T: Scalar>(
    g: &mut Graph<'_, T>,
    part: &PixelPartition,
    words: Var,
    proj: &crate::nn::Linear,
    tau2: f64,
    form: CalForm,
) -> Result<Var> {
    check_tau(tau2)?;
    if g.shape(words).0 == 0 {
        return input_err("pixel-to-text alignment needs at least one word");
    }
    let Some(p) = part.positives else {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    };
    let m = g.mean_rows(words)?;
    let t = proj.forward(g, m)?;
    let t = g.l2_normalize_rows(t);
    let term = contrast(g, p, t, part.negatives, tau2, form)?;
    sum_or_zero(g, &[term])
}

/// The four loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub bce: f64,
    pub dice: f64,
    pub cal: f64,
    pub grounding: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub bce: f64,
    pub dice: f64,
    pub cal: f64,
    pub grounding: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Weighted sum of the components; rejects non-finite components by name.
pub fn total_loss(c: LossComponents, weights: LossWeights) -> Result<LossBundle> {
    for (name, v) in [("bce", c.bce), ("dice", c.dice), ("cal", c.cal), ("grounding", c.grounding)] {
        if !v.is_finite() {
            return Err(MagnetError::NonFinite {
                component: name.to_string(),
                value: v,
            });
        }
    }
    let total = weights.bce * c.bce + weights.dice * c.dice + weights.cal * c.cal + weights.grounding * c.grounding;
    Ok(LossBundle {
        bce: c.bce,
        dice: c.dice,
        cal: c.cal,
        grounding: c.grounding,
        total,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_components_with_default_weights() {
        let c = LossComponents {
            bce: 1.0,
            dice: 1.0,
            cal: 1.0,
            grounding: 1.0,
        };
        assert_eq!(total_loss(c, LossWeights::default()).unwrap().total, 5.5);
        assert_eq!(total_loss(LossComponents::default(), LossWeights::default()).unwrap().total, 0.0);
    }

    #[test]
    fn nan_component_is_named() {
        let c = LossComponents {
            cal: f64::NAN,
            ..LossComponents::default()
        };
        match total_loss(c, LossWeights::default()) {
            Err(MagnetError::NonFinite { component, .. }) => assert_eq!(component, "cal"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parses_flags() {
        assert_eq!("both".parse::<CalTerms>().unwrap(), CalTerms::Both);
        assert_eq!("literal".parse::<CalForm>().unwrap(), CalForm::Literal);
        assert!("maybe".parse::<CalTerms>().is_err());
    }
}
