//! Semi-supervised objective: supervised cross-entropy on both streams,
//! confidence-gated pseudo labels from a designated teacher stream, and the
//! weighted sum of the two terms.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::MixedBatch;
use crate::error::{Error, Result};
use crate::models::ops::{argmax, log_softmax_last, scalar, softmax_last};
use crate::models::{combined_predict, Architecture, HybridModel, Mode, StreamLogits};

/// Probability floor applied before `ln` in [`cross_entropy`].
pub const PROB_EPS: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    SupOnly,
    VanillaCnn,
    VanillaVit,
    ConvLabeled,
    Semiformer,
}

impl VariantName {
    pub const ALL: [VariantName; 5] = [
        VariantName::SupOnly,
        VariantName::VanillaCnn,
        VariantName::VanillaVit,
        VariantName::ConvLabeled,
        VariantName::Semiformer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::SupOnly => "sup_only",
            VariantName::VanillaCnn => "vanilla_cnn",
            VariantName::VanillaVit => "vanilla_vit",
            VariantName::ConvLabeled => "conv_labeled",
            VariantName::Semiformer => "semiformer",
        }
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "sup" | "sup_only" => VariantName::SupOnly,
            "vanilla_cnn" => VariantName::VanillaCnn,
            "vanilla_vit" => VariantName::VanillaVit,
            "conv_labeled" => VariantName::ConvLabeled,
            "semiformer" => VariantName::Semiformer,
            _ => return Err(Error::Config(format!("unknown variant {s:?}"))),
        })
    }
}

/// Which stream's weak-view prediction becomes the pseudo label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoSource {
    Cnn,
    Transformer,
    FusedAverage,
}

impl PseudoSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PseudoSource::Cnn => "cnn",
            PseudoSource::Transformer => "transformer",
            PseudoSource::FusedAverage => "fused_average",
        }
    }
}

impl fmt::Display for PseudoSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PseudoSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "cnn" | "conv" => PseudoSource::Cnn,
            "transformer" | "vit" => PseudoSource::Transformer,
            "fused" | "fused_average" => PseudoSource::FusedAverage,
            _ => return Err(Error::Config(format!("unknown pseudo-label source {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodVariant {
    pub name: VariantName,
    pub pseudo_source: PseudoSource,
}

impl Default for MethodVariant {
    fn default() -> Self {
        Self::new(VariantName::Semiformer)
    }
}

impl MethodVariant {
    /// Variant with its default teacher: a vanilla model teaches itself,
    /// everything else uses the CNN stream.
    pub fn new(name: VariantName) -> Self {
        let pseudo_source = match name {
            VariantName::VanillaVit => PseudoSource::Transformer,
            _ => PseudoSource::Cnn,
        };
        Self { name, pseudo_source }
    }

    pub fn with_source(name: VariantName, pseudo_source: PseudoSource) -> Self {
        Self { name, pseudo_source }
    }

    pub fn uses_unlabeled(&self) -> bool {
        self.name != VariantName::SupOnly
    }

    /// Architecture the variant trains. `None` for `sup_only`, which accepts any.
    pub fn architecture(&self) -> Option<Architecture> {
        match self.name {
            VariantName::SupOnly => None,
            VariantName::VanillaCnn => Some(Architecture::Conv),
            VariantName::VanillaVit => Some(Architecture::Transformer),
            VariantName::ConvLabeled | VariantName::Semiformer => Some(Architecture::Dual),
        }
    }

    /// Checks the variant against the teacher source alone.
    pub fn validate(&self) -> Result<()> {
        let ok = match self.name {
            VariantName::SupOnly => true,
            VariantName::VanillaCnn => self.pseudo_source == PseudoSource::Cnn,
            VariantName::VanillaVit => self.pseudo_source == PseudoSource::Transformer,
            VariantName::ConvLabeled | VariantName::Semiformer => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{} is its own teacher; pseudo-label source {} is not available",
                self.name, self.pseudo_source
            )))
        }
    }

    /// Checks that `model` is the model this variant trains.
    pub fn validate_model(&self, model: &HybridModel) -> Result<()> {
        self.validate()?;
        let arch = model.architecture();
        if let Some(want) = self.architecture() {
            if arch != want {
                return Err(Error::Config(format!(
                    "variant {} needs a {want:?} model, got {arch:?}",
                    self.name
                )));
            }
        }
        if self.name == VariantName::ConvLabeled && !model.fusion_points().is_empty() {
            return Err(Error::Config(
                "conv_labeled trains two independent streams; fusion points must be empty".into(),
            ));
        }
        Ok(())
    }

    /// Adjusts a model configuration to what the variant trains.
    pub fn model_config(&self, base: &crate::models::ModelConfig) -> crate::models::ModelConfig {
        let mut cfg = base.clone();
        if let Some(arch) = self.architecture() {
            cfg.architecture = arch;
        }
        if self.name == VariantName::ConvLabeled || cfg.architecture != Architecture::Dual {
            cfg.fusion.points = Some(Vec::new());
        }
        cfg
    }
}

/// `-Σ_k target_k ln(max(probs_k, ε))` for one example.
pub fn cross_entropy(target: &[f64], probs: &[f64]) -> Result<f64> {
    if target.len() != probs.len() || probs.is_empty() {
        return Err(Error::Contract(format!(
            "target has {} classes, probs {}",
            target.len(),
            probs.len()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL || probs.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Contract(format!("probabilities sum to {sum}, expected 1")));
    }
    Ok(-target
        .iter()
        .zip(probs)
        .map(|(t, p)| t * p.clamp(PROB_EPS, 1.0).ln())
        .sum::<f64>())
}

/// Row-wise cross-entropy of `(n, K)` soft targets against logits, `(n,)`.
pub fn cross_entropy_rows(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok((targets * log_softmax_last(logits)?)?.sum(1)?.neg()?)
}

/// Mixes one-hot targets toward uniform: `(1 - s) y + s / K`.
pub fn smooth_labels(one_hot: &Tensor, smoothing: f64) -> Result<Tensor> {
    if smoothing == 0.0 {
        return Ok(one_hot.clone());
    }
    let k = one_hot.dim(1)? as f64;
    Ok(one_hot.affine(1.0 - smoothing, smoothing / k)?)
}

/// Supervised or unsupervised terms per stream. A stream the model lacks
/// contributes nothing.
#[derive(Debug, Clone)]
pub struct StreamTerms {
    pub transformer: Option<Tensor>,
    pub conv: Option<Tensor>,
}

impl StreamTerms {
    pub fn total(&self) -> Result<Tensor> {
        match (&self.transformer, &self.conv) {
            (Some(t), Some(c)) => Ok((t + c)?),
            (Some(x), None) | (None, Some(x)) => Ok(x.clone()),
            (None, None) => Err(Error::Contract("no stream terms".into())),
        }
    }

    fn values(&self) -> Result<(f64, f64)> {
        let v = |t: &Option<Tensor>| t.as_ref().map_or(Ok(0.0), scalar);
        Ok((v(&self.transformer)?, v(&self.conv)?))
    }
}

fn map_streams(logits: &StreamLogits, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<StreamTerms> {
    Ok(StreamTerms {
        transformer: logits.transformer.as_ref().map(&f).transpose()?,
        conv: logits.conv.as_ref().map(&f).transpose()?,
    })
}

/// Mean over the labeled batch of the per-stream cross-entropies against
/// the (optionally smoothed) ground truth.
pub fn labeled_loss(logits: &StreamLogits, labels: &Tensor, smoothing: f64) -> Result<StreamTerms> {
    let n = labels.dim(0)?;
    if n == 0 {
        return Err(Error::Contract("empty labeled batch".into()));
    }
    let targets = smooth_labels(labels, smoothing)?;
    map_streams(logits, |z| Ok(cross_entropy_rows(z, &targets)?.mean_all()?))
}

#[derive(Debug, Clone)]
pub struct PseudoLabelResult {
    /// Teacher probabilities `(n_u, K)`, detached.
    pub probs: Tensor,
    /// One-hot argmax `(n_u, K)`.
    pub hard_labels: Tensor,
    pub classes: Vec<usize>,
    pub mask: Vec<bool>,
    pub threshold: f64,
    pub coverage: f64,
}

impl PseudoLabelResult {
    /// Gates teacher probabilities at `threshold`.
    pub fn from_probs(probs: &Tensor, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
        }
        let probs = probs.detach();
        let (n, k) = probs.dims2()?;
        let rows: Vec<Vec<f64>> = probs.to_dtype(DType::F64)?.to_vec2()?;
        let classes: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
        let mask: Vec<bool> = rows.iter().zip(&classes).map(|(r, &c)| r[c] >= threshold).collect();
        let mut one_hot = vec![0f64; n * k];
        for (j, &c) in classes.iter().enumerate() {
            one_hot[j * k + c] = 1.0;
        }
        let hard_labels = Tensor::from_vec(one_hot, (n, k), probs.device())?.to_dtype(probs.dtype())?;
        let retained = mask.iter().filter(|&&m| m).count();
        Ok(Self {
            probs,
            hard_labels,
            classes,
            coverage: if n == 0 { 0.0 } else { retained as f64 / n as f64 },
            mask,
            threshold,
        })
    }

    pub fn retained(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| j).collect()
    }

    pub fn retained_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Fraction of retained pseudo labels that equal `truth`; `None` when
    /// nothing is retained.
    pub fn accuracy(&self, truth: &[usize]) -> Option<f64> {
        let kept = self.retained();
        if kept.is_empty() {
            return None;
        }
        let right = kept.iter().filter(|&&j| self.classes[j] == truth[j]).count();
        Some(right as f64 / kept.len() as f64)
    }
}

/// Teacher probabilities from the designated source.
pub fn teacher_probs(logits: &StreamLogits, source: PseudoSource) -> Result<Tensor> {
    let missing = |s: &str| Error::Config(format!("pseudo-label source {s} is absent from the model"));
    let p = match source {
        PseudoSource::Cnn => softmax_last(logits.conv.as_ref().ok_or_else(|| missing("cnn"))?)?,
        PseudoSource::Transformer => {
            softmax_last(logits.transformer.as_ref().ok_or_else(|| missing("transformer"))?)?
        }
        PseudoSource::FusedAverage => match (&logits.transformer, &logits.conv) {
            (Some(t), Some(c)) => combined_predict(t, c)?,
            _ => return Err(missing("fused_average")),
        },
    };
    Ok(p.detach())
}

/// Teacher pass on weak views: running normalization statistics, no graph.
pub fn generate_pseudo_labels(
    model: &HybridModel,
    unlabeled_weak: &Tensor,
    source: PseudoSource,
    threshold: f64,
) -> Result<PseudoLabelResult> {
    let logits = model.forward(&unlabeled_weak.detach(), Mode::Eval)?.detach();
    PseudoLabelResult::from_probs(&teacher_probs(&logits, source)?, threshold)
}

/// Sum over retained examples of the per-stream cross-entropy against the
/// hard pseudo label, divided by `n_u`. Masked rows are dropped before the
/// loss, so they reach neither the value nor the gradient.
pub fn unlabeled_loss(student: &StreamLogits, plr: &PseudoLabelResult) -> Result<StreamTerms> {
    let n_u = plr.mask.len();
    let kept = plr.retained();
    let first = student.present()[0];
    let zero = Tensor::zeros((), first.dtype(), first.device())?;
    if kept.is_empty() {
        return map_streams(student, |_| Ok(zero.clone()));
    }
    let idx = Tensor::from_vec(kept.iter().map(|&j| j as u32).collect::<Vec<_>>(), kept.len(), first.device())?;
    let targets = plr.hard_labels.index_select(&idx, 0)?;
    map_streams(student, |z| {
        if z.dim(0)? != n_u {
            return Err(Error::Contract(format!("{} student rows for {n_u} pseudo labels", z.dim(0)?)));
        }
        let rows = cross_entropy_rows(&z.index_select(&idx, 0)?, &targets)?;
        Ok((rows.sum_all()? / n_u as f64)?)
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerStream {
    #[serde(rename = "L_l_T")]
    pub l_l_t: f64,
    #[serde(rename = "L_l_C")]
    pub l_l_c: f64,
    #[serde(rename = "L_u_T")]
    pub l_u_t: f64,
    #[serde(rename = "L_u_C")]
    pub l_u_c: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_l")]
    pub l_l: f64,
    #[serde(rename = "L_u")]
    pub l_u: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub per_stream: PerStream,
    pub lambda: f64,
    pub retained_count: usize,
}

/// `L = L_l + λ L_u`.
pub fn total_loss(l_l: f64, l_u: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(l_l + lambda * l_u)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub threshold: f64,
    pub lambda: f64,
    pub label_smoothing: f64,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        Self {
            threshold: 0.7,
            lambda: 4.0,
            label_smoothing: 0.0,
        }
    }
}

#[derive(Debug)]
pub struct StepOutput {
    /// Scalar to differentiate.
    pub loss: Tensor,
    pub breakdown: LossBreakdown,
    pub pseudo: Option<PseudoLabelResult>,
}

/// Loss for one training step.
///
/// With `unlabeled_phase == false`, or for `sup_only`, only the labeled term
/// is formed and the unlabeled views are never touched. Otherwise the
/// teacher labels the weak views and the student sees labeled and unlabeled
/// strong views in one forward pass.
pub fn step_objective(
    model: &HybridModel,
    batch: &MixedBatch,
    variant: &MethodVariant,
    settings: &ObjectiveSettings,
    unlabeled_phase: bool,
) -> Result<StepOutput> {
    variant.validate_model(model)?;
    let n_l = batch.labeled_images_strong.dim(0)?;
    if n_l == 0 {
        return Err(Error::Contract("empty labeled batch".into()));
    }
    let use_unlabeled = unlabeled_phase && variant.uses_unlabeled();
    let views = if use_unlabeled {
        match (&batch.unlabeled_images_weak, &batch.unlabeled_images_strong) {
            (Some(w), Some(s)) if w.dim(0)? > 0 => Some((w, s)),
            _ => return Err(Error::Contract("unlabeled phase needs weak and strong views".into())),
        }
    } else {
        None
    };

    let Some((weak, strong)) = views else {
        let logits = model.forward(&batch.labeled_images_strong, Mode::Train)?;
        let sup = labeled_loss(&logits, &batch.labels, settings.label_smoothing)?;
        let (t, c) = sup.values()?;
        let loss = sup.total()?;
        let l_l = scalar(&loss)?;
        return Ok(StepOutput {
            loss,
            breakdown: LossBreakdown {
                l_l,
                l_u: 0.0,
                l: l_l,
                per_stream: PerStream { l_l_t: t, l_l_c: c, ..Default::default() },
                lambda: 0.0,
                retained_count: 0,
            },
            pseudo: None,
        });
    };

    let plr = generate_pseudo_labels(model, weak, variant.pseudo_source, settings.threshold)?;
    let n_u = strong.dim(0)?;
    let joint = Tensor::cat(&[&batch.labeled_images_strong, strong], 0)?;
    let logits = model.forward(&joint, Mode::Train)?;
    let split = |z: &Option<Tensor>, start: usize, len: usize| -> Result<Option<Tensor>> {
        Ok(z.as_ref().map(|z| z.narrow(0, start, len)).transpose()?)
    };
    let labeled = StreamLogits {
        transformer: split(&logits.transformer, 0, n_l)?,
        conv: split(&logits.conv, 0, n_l)?,
    };
    let unlabeled = StreamLogits {
        transformer: split(&logits.transformer, n_l, n_u)?,
        conv: split(&logits.conv, n_l, n_u)?,
    };
    let sup = labeled_loss(&labeled, &batch.labels, settings.label_smoothing)?;
    let unsup = unlabeled_loss(&unlabeled, &plr)?;
    let (l_l_t, l_l_c) = sup.values()?;
    let (l_u_t, l_u_c) = unsup.values()?;
    let l_l_tensor = sup.total()?;
    let l_u_tensor = unsup.total()?;
    let loss = (&l_l_tensor + (&l_u_tensor * settings.lambda)?)?;
    let (l_l, l_u) = (scalar(&l_l_tensor)?, scalar(&l_u_tensor)?);
    Ok(StepOutput {
        loss,
        breakdown: LossBreakdown {
            l_l,
            l_u,
            l: total_loss(l_l, l_u, settings.lambda)?,
            per_stream: PerStream { l_l_t, l_l_c, l_u_t, l_u_c },
            lambda: settings.lambda,
            retained_count: plr.retained_count(),
        },
        pseudo: Some(plr),
    })
}
