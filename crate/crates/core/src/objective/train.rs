use super::{composite_loss, cosine_lr, LossWeights, Optimizer, OptimizerKind};
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::model::{Model, Phi, PhiVars, PromptMode};
use crate::numerics::{Tape, Tensor, Var};
use crate::par::{map_indexed, Execution};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_i: f64,
    pub lambda_c: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_i: 0.5,
            lambda_c: 0.5,
            epochs: 100,
            learning_rate: 0.05,
            weight_decay: 1e-4,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::AdamW,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_i", self.lambda_i),
            ("lambda_c", self.lambda_c),
            ("weight_decay", self.weight_decay),
        ];
        if let Some((k, v)) = nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "{k} must be a finite non-negative number, got {v}"
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_i: self.lambda_i,
            lambda_c: self.lambda_c,
        }
    }
}

/// Loss parts, prediction and Φ-gradient of one sample.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub loss: f64,
    pub ce: f64,
    pub pull_img: f64,
    pub pull_cls: f64,
    pub predicted: usize,
    /// Aligned with [`Phi::named_tensors`].
    pub grads: Vec<Vec<f64>>,
}

/// Batch means of [`SampleOutcome`].
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: f64,
    pub ce: f64,
    pub pull_img: f64,
    pub pull_cls: f64,
    pub accuracy: f64,
    pub grads: Vec<Vec<f64>>,
}

/// First index of the largest logit.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn non_finite(tape: &Tape, what: &str) -> Error {
    match tape.first_non_finite() {
        Some(n) => Error::NonFinite(format!(
            "{what}: first non-finite tensor is node #{} ({}) of shape {:?}",
            n.id, n.kind, n.shape
        )),
        None => Error::NonFinite(format!("{what} is not finite")),
    }
}

fn finish_sample(
    tape: &mut Tape,
    logits: Var,
    terms: super::LossTerms,
    params: &[Var],
) -> Result<SampleOutcome> {
    let loss = tape.value(terms.total).data()[0];
    if !loss.is_finite() {
        return Err(non_finite(tape, "loss"));
    }
    tape.backward(terms.total)?;
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient of Φ is not finite".into()));
    }
    Ok(SampleOutcome {
        loss,
        ce: tape.value(terms.ce).data()[0],
        pull_img: tape.value(terms.pull_img).data()[0],
        pull_cls: tape.value(terms.pull_cls).data()[0],
        predicted: argmax(tape.value(logits).data()),
        grads,
    })
}

/// Forward, composite loss and backward for one image.
pub fn sample_gradient(
    model: &Model,
    phi: &Phi,
    image: &Tensor,
    label: usize,
    weights: LossWeights,
) -> Result<SampleOutcome> {
    let mut tape = Tape::new();
    let vars = PhiVars::register(&mut tape, phi, true);
    let f = model.forward(&mut tape, &vars, image, false)?;
    let terms = composite_loss(&mut tape, f.logits, label, &f.records, &vars.pools, weights)?;
    finish_sample(&mut tape, f.logits, terms, &vars.all)
}

/// Head-only gradient from precomputed features. Matches
/// [`sample_gradient`] bit for bit when Φ has no prompts.
fn probe_gradient(phi: &Phi, features: &Tensor, label: usize) -> Result<SampleOutcome> {
    let mut tape = Tape::new();
    let vars = PhiVars::register(&mut tape, phi, true);
    let x = tape.constant(features.clone());
    let logits = crate::backbone::classify(&mut tape, x, vars.head_w, vars.head_b)?;
    let terms = composite_loss(&mut tape, logits, label, &[], &[], LossWeights::default())?;
    finish_sample(&mut tape, logits, terms, &vars.all)
}

/// Precomputed classifier inputs for the linear probe.
pub struct FeatureCache(Vec<Tensor>);

impl FeatureCache {
    pub fn build(model: &Model, phi: &Phi, dataset: &Dataset, exec: Execution) -> Result<Self> {
        let feats = map_indexed(dataset.len(), exec, |i| {
            model.features(phi, &dataset.image(i))
        });
        let d = model.config.embed_dim;
        Ok(Self(
            feats
                .into_iter()
                .map(|f| f.map(|f| Tensor::matrix(1, d, f)))
                .collect::<Result<_>>()?,
        ))
    }
}

/// Mean outcome over `indices`. Samples may run concurrently; the reduction
/// is always in batch order.
pub fn batch_gradient(
    model: &Model,
    phi: &Phi,
    dataset: &Dataset,
    indices: &[usize],
    weights: LossWeights,
    exec: Execution,
    cache: Option<&FeatureCache>,
) -> Result<BatchOutcome> {
    if indices.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let outcomes = map_indexed(indices.len(), exec, |b| {
        let i = indices[b];
        match cache {
            Some(c) => probe_gradient(phi, &c.0[i], dataset.labels[i]),
            None => sample_gradient(model, phi, &dataset.image(i), dataset.labels[i], weights),
        }
    });
    let n = indices.len() as f64;
    let mut out = BatchOutcome {
        loss: 0.0,
        ce: 0.0,
        pull_img: 0.0,
        pull_cls: 0.0,
        accuracy: 0.0,
        grads: phi
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect(),
    };
    let mut correct = 0usize;
    for (b, o) in outcomes.into_iter().enumerate() {
        let o = o?;
        out.loss += o.loss;
        out.ce += o.ce;
        out.pull_img += o.pull_img;
        out.pull_cls += o.pull_cls;
        correct += usize::from(o.predicted == dataset.labels[indices[b]]);
        for (acc, g) in out.grads.iter_mut().zip(&o.grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    for g in out.grads.iter_mut().flatten() {
        *g /= n;
    }
    out.loss /= n;
    out.ce /= n;
    out.pull_img /= n;
    out.pull_cls /= n;
    out.accuracy = correct as f64 / n;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub phi: Phi,
    pub optimizer: Optimizer,
    /// Completed optimizer steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
}

impl TrainState {
    pub fn new(phi: Phi, config: &TrainConfig) -> Self {
        let sizes: Vec<usize> = phi.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        Self {
            optimizer: Optimizer::new(config.optimizer, config.weight_decay, &sizes),
            phi,
            step: 0,
            epoch: 0,
        }
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub pull_img: f64,
    pub pull_cls: f64,
    /// Accuracy on the batch before the update.
    pub acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,lr,loss,ce,pull_img,pull_cls,acc";

impl StepMetrics {
    /// Shortest round-trip decimal for every float.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.lr,
            self.loss,
            self.ce,
            self.pull_img,
            self.pull_cls,
            self.acc
        )
    }
}

/// Gradient of the batch followed by one optimizer update of Φ.
pub fn train_step(
    state: &mut TrainState,
    model: &Model,
    dataset: &Dataset,
    batch: &[usize],
    config: &TrainConfig,
    lr: f64,
    cache: Option<&FeatureCache>,
) -> Result<StepMetrics> {
    let out = batch_gradient(
        model,
        &state.phi,
        dataset,
        batch,
        config.loss_weights(),
        config.execution,
        cache,
    )?;
    let mut params = state.phi.tensors_mut();
    state.optimizer.step(&mut params, &out.grads, lr);
    state.step += 1;
    Ok(StepMetrics {
        epoch: state.epoch,
        step: state.step,
        lr,
        loss: out.loss,
        ce: out.ce,
        pull_img: out.pull_img,
        pull_cls: out.pull_cls,
        acc: out.accuracy,
    })
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<StepMetrics>,
}

/// `epochs × batches` of [`train_step`] under a cosine-annealed learning rate.
pub fn train_loop(
    model: &Model,
    phi: Phi,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    dataset.check_model(&model.config)?;
    if phi.num_classes() != dataset.num_classes {
        return Err(Error::Config(format!(
            "head has {} classes, dataset {}",
            phi.num_classes(),
            dataset.num_classes
        )));
    }
    let batches_per_epoch = dataset.len().div_ceil(config.batch_size) as u64;
    let total = batches_per_epoch * config.epochs as u64;
    let cache = match (model.mode, config.epochs) {
        (PromptMode::None, e) if e > 0 => {
            Some(FeatureCache::build(model, &phi, dataset, config.execution)?)
        }
        _ => None,
    };
    let mut state = TrainState::new(phi, config);
    let mut log = Vec::with_capacity(total as usize);
    for epoch in 0..config.epochs as u64 {
        state.epoch = epoch;
        for batch in batch_iter(dataset.len(), config.batch_size, config.seed, epoch) {
            let lr = cosine_lr(config.learning_rate, state.step, total);
            let m = train_step(
                &mut state,
                model,
                dataset,
                &batch,
                config,
                lr,
                cache.as_ref(),
            )?;
            on_step(&m);
            log.push(m);
        }
    }
    state.epoch = config.epochs as u64;
    Ok(TrainOutcome { state, log })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean cross-entropy.
    pub mean_loss: f64,
    pub predictions: Vec<usize>,
}

/// Top-1 accuracy and mean cross-entropy; ties go to the lowest class.
pub fn evaluate(
    model: &Model,
    phi: &Phi,
    dataset: &Dataset,
    exec: Execution,
) -> Result<Evaluation> {
    let rows = map_indexed(dataset.len(), exec, |i| -> Result<(usize, f64)> {
        let mut tape = Tape::new();
        let vars = PhiVars::register(&mut tape, phi, false);
        let f = model.forward(&mut tape, &vars, &dataset.image(i), false)?;
        let ce = tape.cross_entropy(f.logits, dataset.labels[i])?;
        Ok((
            argmax(tape.value(f.logits).data()),
            tape.value(ce).data()[0],
        ))
    });
    let mut predictions = Vec::with_capacity(dataset.len());
    let (mut correct, mut loss) = (0usize, 0.0);
    for (i, r) in rows.into_iter().enumerate() {
        let (p, l) = r?;
        correct += usize::from(p == dataset.labels[i]);
        loss += l;
        predictions.push(p);
    }
    let n = dataset.len().max(1) as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
        predictions,
    })
}
