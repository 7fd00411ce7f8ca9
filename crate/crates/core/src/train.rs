//! Masked Dice + BCE loss, warmup-cosine schedule, AdamW and the training
//! loop that honours a trainable/frozen partition.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{AnnotationSet, ClassId, Image, ProbGrid, Scan};
use crate::error::{Error, Result};
use crate::model::{
    self, backbone_backward, backbone_forward, head_backward, head_forward, head_logits,
    parameter_partition, Gradients, ModelParams, Partition,
};
use crate::nn::{sigmoid, softplus};

/// Additive smoothing in the soft Dice ratio; keeps empty channels finite.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataStrategy {
    RevisedOnly,
    Hybrid,
    Full,
}

impl DataStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            DataStrategy::RevisedOnly => "revised_only",
            DataStrategy::Hybrid => "hybrid",
            DataStrategy::Full => "full",
        }
    }
}

impl std::str::FromStr for DataStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "revised_only" => Ok(DataStrategy::RevisedOnly),
            "hybrid" => Ok(DataStrategy::Hybrid),
            "full" => Ok(DataStrategy::Full),
            other => Err(Error::Contract(format!("unknown data strategy {other:?}"))),
        }
    }
}

/// Hyperparameters for one training call.
///
/// `Default` gives desk-scale values (64×64 phantoms on a CPU). The
/// full-scale values used for 3-D CT are available from
/// [`TuningConfig::full_scale`]: lr 1e-4, weight decay 1e-5, batch 24,
/// 20 warmup epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningConfig {
    pub data_strategy: DataStrategy,
    pub freeze_shared: bool,
    /// When false, class embeddings stay fixed even for revised classes.
    pub train_embeddings: bool,
    pub reuse_fraction: f64,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Weight of the Dice term; BCE gets `1 - loss_mix`.
    pub loss_mix: f64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            data_strategy: DataStrategy::Hybrid,
            freeze_shared: true,
            train_embeddings: true,
            reuse_fraction: 0.0,
            epochs: 40,
            base_lr: 3e-3,
            weight_decay: 1e-5,
            batch_size: 8,
            warmup_epochs: 4,
            seed: 0,
            loss_mix: 0.5,
        }
    }
}

impl TuningConfig {
    pub fn full_scale() -> Self {
        TuningConfig {
            epochs: 250,
            base_lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 24,
            warmup_epochs: 20,
            ..TuningConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Contract(m.to_string()));
        if !(0.0..=1.0).contains(&self.reuse_fraction) {
            return fail("reuse_fraction must lie in [0, 1]");
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.warmup_epochs > self.epochs {
            return fail("warmup_epochs cannot exceed epochs");
        }
        if !(0.0..=1.0).contains(&self.loss_mix) {
            return fail("loss_mix must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    /// Per-class mean DSC on the validation scans; empty without validation.
    pub class_dsc: BTreeMap<ClassId, f64>,
    pub wall_seconds: f64,
    pub scans_processed: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn mean_wall_per_epoch(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|e| e.wall_seconds).sum::<f64>() / self.epochs.len() as f64
    }
}

/// One training example: an image and the channels that supervise it.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSample {
    pub scan_id: String,
    pub image: Image,
    pub target: AnnotationSet,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingView {
    pub samples: Vec<ViewSample>,
}

impl TrainingView {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

struct ChannelLoss {
    loss: f64,
    grad: Option<Vec<f64>>,
}

fn channel_loss_from_logits(
    logits: &[f64],
    target: &[u8],
    mix: f64,
    want_grad: bool,
) -> ChannelLoss {
    let n = logits.len() as f64;
    let probs: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    for ((&l, &p), &g) in logits.iter().zip(&probs).zip(target) {
        let g = g as f64;
        bce += softplus(l) - g * l;
        inter += p * g;
        sum_p += p;
        sum_g += g;
    }
    bce /= n;
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sum_p + sum_g + DICE_SMOOTH;
    let loss = mix * (1.0 - num / den) + (1.0 - mix) * bce;
    let grad = want_grad.then(|| {
        probs
            .iter()
            .zip(target)
            .map(|(&p, &g)| {
                let g = g as f64;
                let d_dice = -(2.0 * g * den - num) / (den * den);
                mix * d_dice * p * (1.0 - p) + (1.0 - mix) * (p - g) / n
            })
            .collect()
    });
    ChannelLoss { loss, grad }
}

fn check_target(target: &AnnotationSet, present: impl Fn(ClassId) -> Option<usize>) -> Result<()> {
    for ch in target.channels() {
        match present(ch.class_id) {
            None => {
                return Err(Error::Contract(format!(
                    "no prediction for annotated class {}",
                    ch.class_id
                )))
            }
            Some(len) if len != ch.mask.len() => {
                return Err(Error::Shape(format!(
                    "class {}: prediction has {len} pixels, target {}",
                    ch.class_id,
                    ch.mask.len()
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Mean over the channels present in `target` of
/// `λ·(1 − soft Dice) + (1 − λ)·BCE`. Predictions for classes absent from the
/// target are ignored; an empty target gives 0.
pub fn masked_loss(
    probs: &BTreeMap<ClassId, ProbGrid>,
    target: &AnnotationSet,
    mix: f64,
) -> Result<f64> {
    check_target(target, |k| probs.get(&k).map(|p| p.len()))?;
    if target.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ch in target.channels() {
        let p = probs[&ch.class_id].as_slice();
        let n = p.len() as f64;
        let mut bce = 0.0;
        let mut inter = 0.0;
        let mut sum_p = 0.0;
        let mut sum_g = 0.0;
        for (&p, &g) in p.iter().zip(ch.mask.as_slice()) {
            let g = g as f64;
            bce -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
            inter += p * g;
            sum_p += p;
            sum_g += g;
        }
        let dice = (2.0 * inter + DICE_SMOOTH) / (sum_p + sum_g + DICE_SMOOTH);
        total += mix * (1.0 - dice) + (1.0 - mix) * bce / n;
    }
    Ok(total / target.n() as f64)
}

/// [`masked_loss`] evaluated on logits, with its gradient for every supplied
/// channel. Channels absent from the target receive an all-zero gradient.
pub fn masked_loss_logit_grads(
    logits: &BTreeMap<ClassId, Vec<f64>>,
    target: &AnnotationSet,
    mix: f64,
) -> Result<(f64, BTreeMap<ClassId, Vec<f64>>)> {
    check_target(target, |k| logits.get(&k).map(Vec::len))?;
    let mut grads: BTreeMap<ClassId, Vec<f64>> = logits
        .iter()
        .map(|(&k, l)| (k, vec![0.0; l.len()]))
        .collect();
    if target.is_empty() {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / target.n() as f64;
    let mut total = 0.0;
    for ch in target.channels() {
        let cl = channel_loss_from_logits(&logits[&ch.class_id], ch.mask.as_slice(), mix, true);
        total += cl.loss * scale;
        let g = grads.get_mut(&ch.class_id).expect("checked above");
        for (dst, src) in g.iter_mut().zip(cl.grad.expect("requested")) {
            *dst = src * scale;
        }
    }
    Ok((total, grads))
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let decay = total_steps.saturating_sub(warmup_steps);
    if decay == 0 {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / decay as f64).min(1.0);
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Per-parameter AdamW moments, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub moments: BTreeMap<String, MomentState>,
}

/// One decoupled-weight-decay Adam step on the trainable names. Frozen
/// parameters and their optimizer state are not touched; gradients supplied
/// for frozen names are ignored.
pub fn update_parameters(
    params: &mut ModelParams,
    gradients: &Gradients,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    trainable: &BTreeSet<String>,
) {
    for name in gradients.keys() {
        if !trainable.contains(name) {
            log::debug!("ignoring gradient for frozen parameter {name}");
        }
    }
    for name in trainable {
        let Some(tensor) = params.tensor_mut(name) else {
            log::warn!("trainable name {name} is not a parameter");
            continue;
        };
        let n = tensor.len();
        let ms = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| MomentState {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
        ms.step += 1;
        let t = ms.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let grad = gradients.get(name);
        for i in 0..n {
            let g = grad.map_or(0.0, |g| g[i]);
            let p = &mut tensor.data[i];
            *p -= lr * weight_decay * *p;
            ms.m[i] = ADAM_BETA1 * ms.m[i] + (1.0 - ADAM_BETA1) * g;
            ms.v[i] = ADAM_BETA2 * ms.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = ms.m[i] / bc1;
            let v_hat = ms.v[i] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Loss of one sample and the gradients of every trainable tensor it
/// reaches. The backbone is only differentiated when a shared tensor is
/// trainable.
pub fn loss_and_gradients(
    params: &ModelParams,
    image: &Image,
    target: &AnnotationSet,
    mix: f64,
    partition: &Partition,
) -> Result<(f64, Gradients)> {
    let train_shared = partition.trains_shared();
    let train_classes = partition.trainable_classes();
    let (features, cache) = backbone_forward(params, image)?;
    let mut logits = BTreeMap::new();
    let mut heads = BTreeMap::new();
    for k in target.class_ids() {
        let (head, hc) = head_forward(params, &features.global, k)?;
        logits.insert(k, head_logits(&head, &features));
        heads.insert(k, (head, hc));
    }
    let (loss, logit_grads) = masked_loss_logit_grads(&logits, target, mix)?;

    let mut grads = Gradients::new();
    let mut grad_features = train_shared.then(|| vec![0.0; features.feature_map.len()]);
    let mut grad_global = train_shared.then(|| vec![0.0; features.global.len()]);
    for (k, (head, hc)) in &heads {
        let train_head = train_classes.contains(k);
        if !train_head && !train_shared {
            continue;
        }
        head_backward(
            params,
            *k,
            head,
            hc,
            &features,
            &logit_grads[k],
            train_head,
            &mut grads,
            grad_features.as_deref_mut(),
            grad_global.as_deref_mut(),
        );
    }
    if let (Some(gf), Some(gg)) = (grad_features, grad_global) {
        backbone_backward(params, cache, gf, &gg, &mut grads);
    }
    grads.retain(|name, _| partition.trainable.contains(name));
    Ok((loss, grads))
}

/// Partition implied by a regime: everything trains under `full` or when
/// the shared network is not frozen; otherwise only the revised classes'
/// heads train.
pub fn regime_partition(
    params: &ModelParams,
    config: &TuningConfig,
    revised: &BTreeSet<ClassId>,
) -> Result<Partition> {
    let mut partition = if config.data_strategy == DataStrategy::Full || !config.freeze_shared {
        Partition::all_trainable(params)
    } else {
        parameter_partition(params, revised)?
    };
    if !config.train_embeddings {
        let embeddings: Vec<String> = params
            .catalog
            .ids()
            .map(|k| model::head_name(k, "embedding"))
            .collect();
        partition.freeze(embeddings);
    }
    Ok(partition)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mini-batch training with a seeded per-epoch shuffle (last partial batch
/// kept). Returns new parameters; frozen tensors are bit-identical to the
/// input. `validation` scans, when given, are scored after every epoch.
pub fn train(
    params: &ModelParams,
    view: &TrainingView,
    config: &TuningConfig,
    partition: &Partition,
    validation: Option<&[Scan]>,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    if view.is_empty() {
        return Err(Error::Contract("training view is empty".into()));
    }
    if !partition.is_total_for(params) {
        return Err(Error::Contract(
            "partition does not cover every parameter exactly once".into(),
        ));
    }
    if config.freeze_shared
        && config.data_strategy != DataStrategy::Full
        && partition.trains_shared()
    {
        return Err(Error::Contract(
            "freeze_shared is set but the partition trains shared tensors".into(),
        ));
    }

    let mut params = params.clone();
    let mut state = AdamState::default();
    let steps_per_epoch = view.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup_steps = steps_per_epoch * config.warmup_epochs;
    let mut step = 0usize;
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed, epoch, view.len());
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(f64, Gradients)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &view.samples[i];
                    loss_and_gradients(&params, &s.image, &s.target, config.loss_mix, partition)
                })
                .collect();
            let mut batch_grads = Gradients::new();
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss;
                for (name, g) in grads {
                    match batch_grads.get_mut(&name) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            batch_grads.insert(name, g);
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: format!("batch loss {batch_loss}"),
                });
            }
            let scale = 1.0 / batch.len() as f64;
            for g in batch_grads.values_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            lr = lr_schedule(step, total_steps, warmup_steps, config.base_lr);
            update_parameters(
                &mut params,
                &batch_grads,
                &mut state,
                lr,
                config.weight_decay,
                &partition.trainable,
            );
            loss_sum += batch_loss;
            step += 1;
        }
        let wall = started.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
        let class_dsc = match validation {
            Some(scans) if !scans.is_empty() => {
                crate::experiment::evaluate(&params, scans, &params.catalog.id_set())?
            }
            _ => BTreeMap::new(),
        };
        let rec = EpochRecord {
            epoch,
            mean_loss: loss_sum / view.len() as f64,
            lr,
            class_dsc,
            wall_seconds: wall,
            scans_processed: view.len(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} lr {:.2e} {:.2}s",
            rec.mean_loss,
            rec.lr,
            rec.wall_seconds
        );
        history.epochs.push(rec);
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ClassCatalog, Mask, MaskChannel, Provenance};
    use crate::model::{init_model, ArchConfig};

    fn tiny() -> (ModelParams, ClassCatalog) {
        let cat = ClassCatalog::abdominal();
        let arch = ArchConfig {
            encoder_widths: vec![2, 3],
            feature_channels: 3,
            embedding_dim: 2,
        };
        (init_model(5, &arch, &cat).unwrap(), cat)
    }

    fn target(classes: &[u16], h: usize, w: usize) -> AnnotationSet {
        AnnotationSet::from_channels(classes.iter().map(|&c| {
            let data = (0..h * w)
                .map(|i| ((i * 7 + c as usize) % 3 == 0) as u8)
                .collect();
            MaskChannel {
                class_id: ClassId(c),
                mask: Mask::from_vec(h, w, data).unwrap(),
                provenance: Provenance::GroundTruth,
            }
        }))
        .unwrap()
    }

    #[test]
    fn schedule_values_and_shape() {
        let base = 1e-3;
        assert_eq!(lr_schedule(0, 100, 10, base), 0.0);
        assert_eq!(lr_schedule(10, 100, 10, base), base);
        assert!((lr_schedule(55, 100, 10, base) - base / 2.0).abs() < 1e-15);
        assert!(lr_schedule(100, 100, 10, base).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=100).map(|s| lr_schedule(s, 100, 10, base)).collect();
        assert!(lrs[..=10].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[10..].windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(lr_schedule(0, 10, 0, base), base);
    }

    #[test]
    fn empty_target_gives_zero_loss_and_gradient() {
        let (p, _) = tiny();
        let img = Image::filled(8, 8, 0.3);
        let all = Partition::all_trainable(&p);
        let (loss, grads) = loss_and_gradients(&p, &img, &AnnotationSet::new(), 0.5, &all).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.values().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn perfect_probabilities_zero_dice_term() {
        let t = target(&[0], 8, 8);
        let probs: BTreeMap<_, _> = [(
            ClassId(0),
            t.get(ClassId(0))
                .unwrap()
                .mask
                .map(|&g| if g == 1 { 1.0 - 1e-15 } else { 1e-15 }),
        )]
        .into();
        let dice_only = masked_loss(&probs, &t, 1.0).unwrap();
        assert!(dice_only.abs() < 1e-12);
    }

    #[test]
    fn missing_prediction_is_a_contract_error() {
        let t = target(&[0, 1], 4, 4);
        let probs: BTreeMap<_, _> = [(ClassId(0), ProbGrid::filled(4, 4, 0.5))].into();
        assert!(matches!(
            masked_loss(&probs, &t, 0.5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_identity() {
        let (mut p, _) = tiny();
        let before = p.clone();
        let all = Partition::all_trainable(&p);
        let zeros: Gradients = p
            .tensors()
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.len()]))
            .collect();
        let mut st = AdamState::default();
        update_parameters(&mut p, &zeros, &mut st, 1e-2, 0.0, &all.trainable);
        assert_eq!(p, before);
        update_parameters(&mut p, &zeros, &mut st, 1e-2, 0.1, &BTreeSet::new());
        assert_eq!(p, before);
    }

    #[test]
    fn training_respects_freeze_and_is_deterministic() {
        let (p, cat) = tiny();
        let view = TrainingView {
            samples: (0..5)
                .map(|i| ViewSample {
                    scan_id: format!("s{i}"),
                    image: Image::from_vec(
                        8,
                        8,
                        (0..64)
                            .map(|j| ((j * (i + 3)) % 11) as f32 / 11.0)
                            .collect(),
                    )
                    .unwrap(),
                    target: target(&[0, 5], 8, 8),
                })
                .collect(),
        };
        let cfg = TuningConfig {
            epochs: 3,
            warmup_epochs: 1,
            batch_size: 2,
            ..TuningConfig::default()
        };
        let revised: BTreeSet<_> = [ClassId(5)].into();
        let part = regime_partition(&p, &cfg, &revised).unwrap();
        let (a, ha) = train(&p, &view, &cfg, &part, None).unwrap();
        let (b, hb) = train(&p, &view, &cfg, &part, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            ha.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>(),
            hb.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>()
        );
        for name in &part.frozen {
            assert_eq!(a.tensor(name), p.tensor(name), "{name} moved");
        }
        assert_ne!(a.tensor("head.5.fc2.bias"), p.tensor("head.5.fc2.bias"));
        assert_eq!(ha.epochs.len(), 3);
        assert!(ha
            .epochs
            .iter()
            .all(|e| e.wall_seconds > 0.0 && e.scans_processed == 5));

        let nothing = parameter_partition(&p, &BTreeSet::new()).unwrap();
        let (c, _) = train(&p, &view, &cfg, &nothing, None).unwrap();
        assert_eq!(c, p);

        let bad = TuningConfig {
            epochs: 0,
            ..cfg.clone()
        };
        assert!(train(&p, &view, &bad, &part, None).is_err());
        assert!(train(&p, &TrainingView::default(), &cfg, &part, None).is_err());
        let all = Partition::all_trainable(&p);
        assert!(train(&p, &view, &cfg, &all, None).is_err());
        let _ = cat;
    }
}
