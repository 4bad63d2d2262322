//! The two-network training step: supervised loss on weakly augmented
//! labeled data, per-model learning-status and threshold updates, pseudo-label
//! selection, agreement weighting, and the unlabeled loss on strongly augmented
//! views supervised by the peer's pseudo-labels.
//!
//! Both models' gradients are computed from pre-step parameters, then both
//! are updated. When neither cross-labeling nor disagreement weighting is
//! active the peer is never needed and training runs a single model.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::augment::{strong_augment, weak_augment, AugmentSpec, Example, Featurizer};
use crate::classifier::{Activation, Classifier, Gradients, ModelId, Optimizer, OptimizerKind, WeightedSample};
use crate::error::{Error, Result};
use crate::numeric::{mix64, HardLabel, ProbDist, SeededRng, Stream};
use crate::threshold::{LearningStatus, ThresholdController, ThresholdVector};

/// Which JointMatch components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mode {
    pub adaptive_threshold: bool,
    pub cross_labeling: bool,
    pub disagreement_weighting: bool,
}

impl Mode {
    pub const FULL: Mode = Mode {
        adaptive_threshold: true,
        cross_labeling: true,
        disagreement_weighting: true,
    };
    pub const NO_ADAPTIVE: Mode = Mode {
        adaptive_threshold: false,
        ..Mode::FULL
    };
    pub const NO_CROSS: Mode = Mode {
        cross_labeling: false,
        ..Mode::FULL
    };
    pub const NO_DISAGREE: Mode = Mode {
        disagreement_weighting: false,
        ..Mode::FULL
    };
    pub const FIXMATCH: Mode = Mode {
        adaptive_threshold: false,
        cross_labeling: false,
        disagreement_weighting: false,
    };

    /// The ablation battery, in report order.
    pub const ABLATIONS: [Mode; 5] = [
        Mode::FULL,
        Mode::NO_ADAPTIVE,
        Mode::NO_CROSS,
        Mode::NO_DISAGREE,
        Mode::FIXMATCH,
    ];

    /// Whether the step ever needs a second network.
    pub fn uses_peer(self) -> bool {
        self.cross_labeling || self.disagreement_weighting
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> String {
        match self {
            Mode::FULL => "JointMatch".into(),
            Mode::NO_ADAPTIVE => "- Adaptive Threshold".into(),
            Mode::NO_CROSS => "- Cross Labeling".into(),
            Mode::NO_DISAGREE => "- Disagree Weights".into(),
            Mode::FIXMATCH => "- All (FixMatch)".into(),
            other => other.signature(),
        }
    }

    /// Compact flag signature, e.g. `adaptive=1,cross=0,disagree=1`.
    pub fn signature(self) -> String {
        format!(
            "adaptive={},cross={},disagree={}",
            self.adaptive_threshold as u8, self.cross_labeling as u8, self.disagreement_weighting as u8
        )
    }

    /// Parses `full`, `no-adaptive`, `no-cross`, `no-disagree`, `fixmatch`.
    pub fn from_name(name: &str) -> Result<Mode> {
        match name {
            "full" | "jointmatch" => Ok(Mode::FULL),
            "no-adaptive" => Ok(Mode::NO_ADAPTIVE),
            "no-cross" => Ok(Mode::NO_CROSS),
            "no-disagree" => Ok(Mode::NO_DISAGREE),
            "fixmatch" | "no-all" => Ok(Mode::FIXMATCH),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }

    pub fn name(self) -> Option<&'static str> {
        match self {
            Mode::FULL => Some("full"),
            Mode::NO_ADAPTIVE => Some("no-adaptive"),
            Mode::NO_CROSS => Some("no-cross"),
            Mode::NO_DISAGREE => Some("no-disagree"),
            Mode::FIXMATCH => Some("fixmatch"),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub model_f: u64,
    pub model_g: u64,
    pub data: u64,
    pub augmentation: u64,
}

impl Seeds {
    /// Derives all four seeds from one base seed.
    pub fn from_base(base: u64) -> Self {
        Seeds {
            model_f: mix64(base ^ 0xF0),
            model_g: mix64(base ^ 0x60),
            data: base,
            augmentation: mix64(base ^ 0xA0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Labeled batch size `B`.
    pub batch_size: usize,
    /// Unlabeled-to-labeled ratio `μ`.
    pub mu: usize,
    /// EMA decay `λ` of the learning status.
    pub lambda: f64,
    /// Base confidence threshold `τ`.
    pub tau: f64,
    /// Disagreement weight `δ`.
    pub delta: f64,
    /// Unlabeled loss weight `w_u`.
    pub w_u: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub hidden: Vec<usize>,
    /// Hidden layers of model g when it differs from model f.
    pub hidden_g: Option<Vec<usize>>,
    pub activation: Activation,
    pub steps: u64,
    pub eval_every: u64,
    pub seeds: Seeds,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            mu: 10,
            lambda: 0.9,
            tau: 0.98,
            delta: 0.9,
            w_u: 1.0,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::adam(),
            weight_decay: 0.0,
            hidden: vec![64],
            hidden_g: None,
            activation: Activation::Tanh,
            steps: 1000,
            eval_every: 50,
            seeds: Seeds::from_base(0),
            mode: Mode::FULL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size < 1 {
            return fail("batch size must be at least 1".into());
        }
        if self.mu < 1 {
            return fail("unlabeled data ratio must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return fail(format!("EMA decay must lie in [0, 1), got {}", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("fixed threshold must lie in (0, 1], got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return fail(format!("disagreement weight must lie in [0, 1], got {}", self.delta));
        }
        if !(self.w_u >= 0.0) {
            return fail(format!("unsupervised loss weight must be non-negative, got {}", self.w_u));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight decay must be non-negative".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        if self.hidden.iter().chain(self.hidden_g.iter().flatten()).any(|&h| h == 0) {
            return fail("hidden layer sizes must be positive".into());
        }
        if self.mode.disagreement_weighting && !(self.delta > 0.5 && self.delta < 1.0) {
            log::debug!("disagreement weight {} lies outside (0.5, 1)", self.delta);
        }
        Ok(())
    }

    pub fn unlabeled_batch_size(&self) -> usize {
        self.batch_size * self.mu
    }

    pub fn layer_sizes(&self, id: ModelId, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let hidden = match (id, &self.hidden_g) {
            (ModelId::G, Some(h)) => h,
            _ => &self.hidden,
        };
        let mut sizes = vec![input_dim];
        sizes.extend(hidden);
        sizes.push(num_classes);
        sizes
    }

    fn new_optimizer(&self) -> Optimizer {
        Optimizer::new(self.optimizer, self.learning_rate).with_weight_decay(self.weight_decay)
    }
}

/// One network with its threshold controller and optimizer.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub model: Classifier,
    pub controller: ThresholdController,
    pub optimizer: Optimizer,
}

/// Mutable training state carried between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub f: ModelState,
    /// Absent when the mode never consults a peer.
    pub g: Option<ModelState>,
    pub step: u64,
    peer_reads: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let build = |id: ModelId, seed: u64| -> Result<ModelState> {
            Ok(ModelState {
                model: Classifier::init(&config.layer_sizes(id, input_dim, num_classes), config.activation, id, seed)?,
                controller: ThresholdController::new(
                    num_classes,
                    config.tau,
                    config.lambda,
                    config.mode.adaptive_threshold,
                )?,
                optimizer: config.new_optimizer(),
            })
        };
        let f = build(ModelId::F, config.seeds.model_f)?;
        let g = if config.mode.uses_peer() {
            Some(build(ModelId::G, config.seeds.model_g)?)
        } else {
            None
        };
        Ok(TrainState {
            f,
            g,
            step: 0,
            peer_reads: 0,
        })
    }

    /// Builds a state from explicit models (used by oracle tests).
    pub fn from_models(config: &TrainConfig, f: Classifier, g: Option<Classifier>) -> Result<Self> {
        config.validate()?;
        let num_classes = f.num_classes();
        let wrap = |model: Classifier| -> Result<ModelState> {
            Ok(ModelState {
                model,
                controller: ThresholdController::new(
                    num_classes,
                    config.tau,
                    config.lambda,
                    config.mode.adaptive_threshold,
                )?,
                optimizer: config.new_optimizer(),
            })
        };
        if config.mode.uses_peer() && g.is_none() {
            return Err(Error::Config("this mode needs two models".into()));
        }
        Ok(TrainState {
            f: wrap(f)?,
            g: g.map(wrap).transpose()?,
            step: 0,
            peer_reads: 0,
        })
    }

    /// How many times a step consumed the peer's predictions.
    pub fn peer_reads(&self) -> u64 {
        self.peer_reads
    }

    pub fn models(&self) -> impl Iterator<Item = &ModelState> {
        std::iter::once(&self.f).chain(self.g.as_ref())
    }
}

/// Pseudo-label candidate for one unlabeled example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub hard_label: HardLabel,
    pub confidence: f64,
    /// `confidence ≥ τ(hard_label)` of the source model.
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelBatch {
    pub source: ModelId,
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn passed_count(&self) -> usize {
        self.labels.iter().filter(|l| l.passed).count()
    }
}

/// Weak view of a labeled batch, ready for the classifier.
pub fn augment_labeled(
    batch: &[Example],
    spec: &AugmentSpec,
    featurizer: &Featurizer,
    rng: &mut SeededRng,
) -> Result<Vec<(Vec<f64>, HardLabel)>> {
    batch
        .iter()
        .map(|e| {
            let label = e
                .label
                .ok_or_else(|| Error::Data(format!("labeled example {} has no label", e.id)))?;
            let view = weak_augment(e, spec, rng)?;
            Ok((featurizer.features(&view.payload)?, label))
        })
        .collect()
}

/// Weak or strong views of an unlabeled batch.
pub fn augment_unlabeled(
    batch: &[Example],
    spec: &AugmentSpec,
    featurizer: &Featurizer,
    rng: &mut SeededRng,
    strong: bool,
) -> Result<Vec<Vec<f64>>> {
    batch
        .iter()
        .map(|e| {
            let view = if strong {
                strong_augment(e, spec, rng)?
            } else {
                weak_augment(e, spec, rng)?
            };
            featurizer.features(&view.payload)
        })
        .collect()
}

/// `(1/B) Σ H(y_b, p(α(x_b)))` and its gradient.
pub fn supervised_loss(model: &Classifier, weak_views: &[(Vec<f64>, HardLabel)]) -> Result<(f64, Gradients)> {
    if weak_views.is_empty() {
        return Err(Error::Domain("supervised loss on an empty labeled batch".into()));
    }
    let batch: Vec<_> = weak_views
        .iter()
        .map(|(x, y)| WeightedSample::new(x, *y, 1.0))
        .collect();
    let (grads, loss) = model.backward(&batch)?;
    Ok((loss, grads))
}

pub fn predict(model: &Classifier, features: &[Vec<f64>]) -> Result<Vec<ProbDist>> {
    features.iter().map(|x| model.forward(x)).collect()
}

/// Hard label, confidence and mask for each prediction, judged against the
/// source model's own thresholds. The comparison is inclusive.
pub fn select_pseudo_labels(source: ModelId, preds: &[ProbDist], thresholds: &ThresholdVector) -> PseudoLabelBatch {
    let labels = preds
        .iter()
        .map(|q| {
            let hard_label = q.argmax();
            let confidence = q.get(hard_label.0);
            PseudoLabel {
                hard_label,
                confidence,
                passed: confidence >= thresholds.get(hard_label.0),
            }
        })
        .collect();
    PseudoLabelBatch { source, labels }
}

/// Predicts on weak views and selects pseudo-labels. Returns the raw
/// predictions too, since they also feed the learning-status EMA.
pub fn generate_pseudo_labels(
    source: &Classifier,
    weak_views: &[Vec<f64>],
    thresholds: &ThresholdVector,
) -> Result<(PseudoLabelBatch, Vec<ProbDist>)> {
    let preds = predict(source, weak_views)?;
    Ok((select_pseudo_labels(source.id(), &preds, thresholds), preds))
}

/// `w_b = δ` where the two hard labels differ and `1 − δ` where they agree;
/// all ones when weighting is disabled.
pub fn disagreement_weights(
    labels_f: &PseudoLabelBatch,
    labels_g: &PseudoLabelBatch,
    delta: f64,
    enabled: bool,
) -> Result<Vec<f64>> {
    if labels_f.len() != labels_g.len() {
        return Err(Error::Domain(format!(
            "pseudo-label batches are misaligned ({} vs {})",
            labels_f.len(),
            labels_g.len()
        )));
    }
    Ok(labels_f
        .labels
        .iter()
        .zip(&labels_g.labels)
        .map(|(a, b)| match (enabled, a.hard_label == b.hard_label) {
            (false, _) => 1.0,
            (true, true) => 1.0 - delta,
            (true, false) => delta,
        })
        .collect())
}

/// `(1/μB) Σ w_b · 1(passed_b) · H(q̂_b, p(A(u_b)))` for `target`.
///
/// With `cross_labeling` the pseudo-labels must come from the peer; without
/// it, from the target itself.
pub fn unlabeled_loss(
    target: &Classifier,
    pseudo: &PseudoLabelBatch,
    strong_views: &[Vec<f64>],
    weights: &[f64],
    cross_labeling: bool,
) -> Result<(f64, Gradients)> {
    let expected_source = if cross_labeling { target.id().peer() } else { target.id() };
    if pseudo.source != expected_source {
        return Err(Error::Domain(format!(
            "model {} cannot consume pseudo-labels from {} in this mode",
            target.id(),
            pseudo.source
        )));
    }
    if strong_views.len() != pseudo.len() || weights.len() != pseudo.len() {
        return Err(Error::Domain("strong views, weights and pseudo-labels are misaligned".into()));
    }
    if pseudo.is_empty() {
        return Ok((0.0, Gradients::zeros_like(target)));
    }
    let batch: Vec<_> = pseudo
        .labels
        .iter()
        .zip(strong_views)
        .zip(weights)
        .map(|((pl, x), &w)| WeightedSample::new(x, pl.hard_label, if pl.passed { w } else { 0.0 }))
        .collect();
    let (grads, loss) = target.backward(&batch)?;
    Ok((loss, grads))
}

/// Everything one model computed during a step.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTrace {
    pub id: ModelId,
    /// `q_b` on the weak views.
    pub weak_preds: Vec<ProbDist>,
    pub status: LearningStatus,
    pub thresholds: ThresholdVector,
    /// Pseudo-labels this model generated.
    pub pseudo: PseudoLabelBatch,
    pub supervised_loss: f64,
    pub unlabeled_loss: f64,
    pub total_loss: f64,
}

/// Full record of a step, including intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: u64,
    pub models: Vec<ModelTrace>,
    pub weights: Vec<f64>,
    pub telemetry: StepTelemetry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTelemetry {
    pub model: ModelId,
    pub supervised_loss: f64,
    pub unlabeled_loss: f64,
    pub p_tilde: Vec<f64>,
    pub tau_local: Vec<f64>,
    /// Passed pseudo-labels generated by this model, per class.
    pub passed_per_class: Vec<usize>,
    /// Passed pseudo-labels that match the hidden truth, per class.
    pub correct_per_class: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub step: u64,
    pub models: Vec<ModelTelemetry>,
    /// Fraction of unlabeled examples where both hard labels agree.
    pub agreement_rate: Option<f64>,
    pub unlabeled_batch_size: usize,
}

/// Inputs shared by every step of a run.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub config: &'a TrainConfig,
    pub augment: &'a AugmentSpec,
    pub featurizer: &'a Featurizer,
}

fn count_per_class(
    pseudo: &PseudoLabelBatch,
    truth: Option<&[HardLabel]>,
    num_classes: usize,
) -> (Vec<usize>, Option<Vec<usize>>) {
    let mut passed = vec![0; num_classes];
    let mut correct = truth.map(|_| vec![0; num_classes]);
    for (i, pl) in pseudo.labels.iter().enumerate() {
        if !pl.passed {
            continue;
        }
        passed[pl.hard_label.0] += 1;
        if let (Some(c), Some(t)) = (correct.as_mut(), truth) {
            if t[i] == pl.hard_label {
                c[pl.hard_label.0] += 1;
            }
        }
    }
    (passed, correct)
}

/// Runs one training step in place and returns its trace.
///
/// `hidden_truth`, when given, must align with `unlabeled`; it is used only
/// for telemetry and never reaches a loss.
pub fn train_step(
    state: &mut TrainState,
    labeled: &[Example],
    unlabeled: &[Example],
    hidden_truth: Option<&[HardLabel]>,
    ctx: StepContext<'_>,
) -> Result<StepTrace> {
    let step = state.step;
    step_inner(state, labeled, unlabeled, hidden_truth, ctx).map_err(|e| match e {
        Error::NonFinite(what) => Error::Diverged {
            step,
            message: format!("non-finite {what}"),
        },
        other => other,
    })
}

fn step_inner(
    state: &mut TrainState,
    labeled: &[Example],
    unlabeled: &[Example],
    hidden_truth: Option<&[HardLabel]>,
    ctx: StepContext<'_>,
) -> Result<StepTrace> {
    let config = ctx.config;
    let mode = config.mode;
    if labeled.is_empty() {
        return Err(Error::Domain("empty labeled batch".into()));
    }
    if unlabeled.iter().any(|e| e.label.is_some()) {
        return Err(Error::Data("unlabeled batch carries labels".into()));
    }
    if let Some(t) = hidden_truth {
        if t.len() != unlabeled.len() {
            return Err(Error::Domain("hidden labels misaligned with unlabeled batch".into()));
        }
    }
    let step = state.step;
    let seed = config.seeds.augmentation;
    let labeled_views = augment_labeled(
        labeled,
        ctx.augment,
        ctx.featurizer,
        &mut SeededRng::stream(seed, Stream::LabeledWeak, step),
    )?;
    let weak_views = augment_unlabeled(
        unlabeled,
        ctx.augment,
        ctx.featurizer,
        &mut SeededRng::stream(seed, Stream::UnlabeledWeak, step),
        false,
    )?;
    let strong_views = augment_unlabeled(
        unlabeled,
        ctx.augment,
        ctx.featurizer,
        &mut SeededRng::stream(seed, Stream::UnlabeledStrong, step),
        true,
    )?;

    // (1)-(4): supervised loss, status, thresholds, pseudo-labels per model.
    struct Phase {
        sup_loss: f64,
        sup_grads: Gradients,
        preds: Vec<ProbDist>,
        thresholds: ThresholdVector,
        pseudo: PseudoLabelBatch,
    }
    let run_phase = |ms: &mut ModelState| -> Result<Phase> {
        let (sup_loss, sup_grads) = supervised_loss(&ms.model, &labeled_views)?;
        let preds = predict(&ms.model, &weak_views)?;
        ms.controller.observe(&preds)?;
        let thresholds = ms.controller.thresholds()?;
        let pseudo = select_pseudo_labels(ms.model.id(), &preds, &thresholds);
        Ok(Phase {
            sup_loss,
            sup_grads,
            preds,
            thresholds,
            pseudo,
        })
    };
    let phase_f = run_phase(&mut state.f)?;
    let phase_g = match state.g.as_mut() {
        Some(g) => Some(run_phase(g)?),
        None => None,
    };
    if mode.uses_peer() && phase_g.is_none() {
        return Err(Error::Config("mode requires a peer model".into()));
    }

    // (5) agreement weights.
    let weights = match &phase_g {
        Some(pg) => {
            state.peer_reads += 1;
            disagreement_weights(&phase_f.pseudo, &pg.pseudo, config.delta, mode.disagreement_weighting)?
        }
        None => vec![1.0; unlabeled.len()],
    };
    let agreement_rate = phase_g.as_ref().map(|pg| {
        if unlabeled.is_empty() {
            return 1.0;
        }
        let agree = phase_f
            .pseudo
            .labels
            .iter()
            .zip(&pg.pseudo.labels)
            .filter(|(a, b)| a.hard_label == b.hard_label)
            .count();
        agree as f64 / unlabeled.len() as f64
    });

    // (6) unlabeled losses on strong views.
    let teacher_for = |target: ModelId| -> &PseudoLabelBatch {
        match (mode.cross_labeling, target, &phase_g) {
            (true, ModelId::F, Some(pg)) => &pg.pseudo,
            (true, ModelId::G, _) => &phase_f.pseudo,
            (_, ModelId::F, _) => &phase_f.pseudo,
            (_, ModelId::G, Some(pg)) => &pg.pseudo,
            (_, ModelId::G, None) => unreachable!("model g exists whenever it is a target"),
        }
    };
    let mut unlabeled_part = |model: &Classifier| -> Result<(f64, Gradients)> {
        if unlabeled.is_empty() {
            return Ok((0.0, Gradients::zeros_like(model)));
        }
        let teacher = teacher_for(model.id());
        if teacher.source != model.id() {
            state.peer_reads += 1;
        }
        unlabeled_loss(model, teacher, &strong_views, &weights, mode.cross_labeling)
    };
    let (unsup_f, unsup_grads_f) = unlabeled_part(&state.f.model)?;
    let unsup_g = match state.g.as_ref() {
        Some(g) => Some(unlabeled_part(&g.model)?),
        None => None,
    };

    // (7) synchronous update from pre-step parameters.
    let mut traces = Vec::with_capacity(2);
    let mut updates: Vec<(Gradients, f64)> = Vec::with_capacity(2);
    {
        let mut total = phase_f.sup_grads.clone();
        total.add_scaled(&unsup_grads_f, config.w_u)?;
        updates.push((total, phase_f.sup_loss + config.w_u * unsup_f));
    }
    if let (Some(pg), Some((unsup, grads))) = (&phase_g, &unsup_g) {
        let mut total = pg.sup_grads.clone();
        total.add_scaled(grads, config.w_u)?;
        updates.push((total, pg.sup_loss + config.w_u * unsup));
    }
    for (total, loss) in &updates {
        if !loss.is_finite() || !total.is_finite() {
            return Err(Error::Diverged {
                step,
                message: format!("non-finite loss {loss}"),
            });
        }
    }
    let mut updates = updates.into_iter();
    let (grads_f, total_f) = updates.next().unwrap();
    state.f.optimizer.step(&mut state.f.model, &grads_f)?;
    traces.push(ModelTrace {
        id: ModelId::F,
        weak_preds: phase_f.preds,
        status: state.f.controller.status().clone(),
        thresholds: phase_f.thresholds,
        pseudo: phase_f.pseudo,
        supervised_loss: phase_f.sup_loss,
        unlabeled_loss: unsup_f,
        total_loss: total_f,
    });
    if let (Some(g), Some(pg), Some((unsup, _))) = (state.g.as_mut(), phase_g, unsup_g) {
        let (grads_g, total_g) = updates.next().unwrap();
        g.optimizer.step(&mut g.model, &grads_g)?;
        traces.push(ModelTrace {
            id: ModelId::G,
            weak_preds: pg.preds,
            status: g.controller.status().clone(),
            thresholds: pg.thresholds,
            pseudo: pg.pseudo,
            supervised_loss: pg.sup_loss,
            unlabeled_loss: unsup,
            total_loss: total_g,
        });
    }
    if state.models().any(|m| !m.model.params_finite()) {
        return Err(Error::Diverged {
            step,
            message: "non-finite parameters after update".into(),
        });
    }
    state.step += 1;

    let num_classes = state.f.model.num_classes();
    let telemetry = StepTelemetry {
        step,
        models: traces
            .iter()
            .map(|t| {
                let (passed, correct) = count_per_class(&t.pseudo, hidden_truth, num_classes);
                ModelTelemetry {
                    model: t.id,
                    supervised_loss: t.supervised_loss,
                    unlabeled_loss: t.unlabeled_loss,
                    p_tilde: t.status.values().to_vec(),
                    tau_local: t.thresholds.values().to_vec(),
                    passed_per_class: passed,
                    correct_per_class: correct,
                }
            })
            .collect(),
        agreement_rate,
        unlabeled_batch_size: unlabeled.len(),
    };
    Ok(StepTrace {
        step,
        models: traces,
        weights,
        telemetry,
    })
}
