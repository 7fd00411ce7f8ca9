//! The interactive protocol: base training, then rounds of
//! infer → score → select → revise → merge → tune → evaluate, run under
//! several tuning regimes side by side.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{dsc, AnnotationSet, AnnotationTag, ClassCatalog, ClassId, Scan};
use crate::error::{Error, Result};
use crate::hybrid::{binarize, binarize_predictions, build_training_view, merge_hybrid};
use crate::model::{init_model, predict, ArchConfig, ModelParams, Partition};
use crate::phantom::{generate_split, oracle_revise, PhantomSpec};
use crate::selection::{
    consistency_score, overlap_score, select_for_revision, select_reuse, uncertainty_score,
    Augmentation, ImportanceWeights, ScanScore,
};
use crate::train::{regime_partition, train, DataStrategy, TrainHistory, TuningConfig};

/// Per-class mean DSC of thresholded predictions against ground truth.
pub fn evaluate(
    params: &ModelParams,
    scans: &[Scan],
    classes: &BTreeSet<ClassId>,
) -> Result<BTreeMap<ClassId, f64>> {
    if scans.is_empty() {
        return Err(Error::Contract("evaluation needs at least one scan".into()));
    }
    let per_scan: Vec<BTreeMap<ClassId, f64>> = scans
        .par_iter()
        .map(|scan| {
            let probs = predict(params, &scan.image, classes)?;
            probs
                .iter()
                .map(|(&k, p)| {
                    let truth = scan.ground_truth.get(k).ok_or_else(|| {
                        Error::Contract(format!(
                            "scan {} has no ground truth for class {k}",
                            scan.scan_id
                        ))
                    })?;
                    Ok((k, dsc(&binarize(p, 0.5), &truth.mask)?))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut mean: BTreeMap<ClassId, f64> = classes.iter().map(|&k| (k, 0.0)).collect();
    for scores in &per_scan {
        for (k, v) in scores {
            *mean.get_mut(k).expect("same class set") += v;
        }
    }
    mean.values_mut().for_each(|v| *v /= scans.len() as f64);
    Ok(mean)
}

pub fn mean_over(dsc: &BTreeMap<ClassId, f64>, classes: &[ClassId]) -> f64 {
    if classes.is_empty() {
        return 0.0;
    }
    classes
        .iter()
        .map(|k| dsc.get(k).copied().unwrap_or(0.0))
        .sum::<f64>()
        / classes.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub scan_ratio: f64,
    pub wall_ratio: f64,
}

impl Speedup {
    /// Whole-number rendering of the scan ratio, e.g. `16×` for 200/12.
    pub fn label(&self) -> String {
        format!("{}×", self.scan_ratio.floor())
    }
}

pub fn speedup_accounting(
    full_scans_per_epoch: usize,
    tuned_scans_per_epoch: usize,
    full_wall: f64,
    tuned_wall: f64,
) -> Result<Speedup> {
    if tuned_scans_per_epoch == 0 || !(tuned_wall > 0.0) {
        return Err(Error::Contract(
            "speedup denominators must be positive".into(),
        ));
    }
    Ok(Speedup {
        scan_ratio: full_scans_per_epoch as f64 / tuned_scans_per_epoch as f64,
        wall_ratio: full_wall / tuned_wall,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSource {
    /// The base training scans, still carrying their base annotations.
    Base,
    /// Newly generated scans without annotations.
    #[default]
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSpec {
    #[serde(default)]
    pub pool: PoolSource,
    /// Size of a fresh pool; ignored for the base pool.
    #[serde(default)]
    pub pool_size: usize,
    pub n_select: usize,
    /// Class names or ids.
    pub classes_to_revise: Vec<String>,
    /// Replaces the experiment-wide tuning template for this round.
    #[serde(default)]
    pub tuning: Option<TuningConfig>,
}

/// A data strategy and freeze setting evaluated over every round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub name: String,
    pub data_strategy: DataStrategy,
    pub freeze_shared: bool,
    #[serde(default)]
    pub reuse_fraction: Option<f64>,
}

impl Regime {
    pub fn new(data_strategy: DataStrategy, freeze_shared: bool) -> Self {
        let freeze = if freeze_shared { "freeze" } else { "nofreeze" };
        Regime {
            name: format!("{}_{freeze}", data_strategy.as_str()),
            data_strategy,
            freeze_shared,
            reuse_fraction: None,
        }
    }

    pub fn apply(&self, template: &TuningConfig) -> TuningConfig {
        TuningConfig {
            data_strategy: self.data_strategy,
            freeze_shared: self.freeze_shared,
            reuse_fraction: self.reuse_fraction.unwrap_or(template.reuse_fraction),
            ..template.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub weights: ImportanceWeights,
    pub augmentations: Vec<Augmentation>,
    pub threshold: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            weights: ImportanceWeights::default(),
            augmentations: Augmentation::DEFAULT_SET.to_vec(),
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<String>,
    pub old_classes: Vec<String>,
    pub new_classes: Vec<String>,
    pub base_train: usize,
    pub test_size: usize,
    pub arch: ArchConfig,
    pub base_tuning: TuningConfig,
    pub tuning: TuningConfig,
    pub scoring: ScoringConfig,
    pub rounds: Vec<RoundSpec>,
    pub regimes: Vec<Regime>,
    /// Score the test set after every tuning epoch.
    pub track_curves: bool,
}

pub const REFERENCE_TOML: &str = include_str!("../configs/reference.toml");

impl Default for ExperimentConfig {
    fn default() -> Self {
        let new: Vec<String> = crate::domain::DEFAULT_NEW_CLASSES
            .iter()
            .map(|s| s.to_string())
            .collect();
        let old: Vec<String> = crate::domain::DEFAULT_OLD_CLASSES
            .iter()
            .map(|s| s.to_string())
            .collect();
        ExperimentConfig {
            seed: 0,
            height: 64,
            width: 64,
            classes: old.iter().chain(&new).cloned().collect(),
            old_classes: old,
            new_classes: new.clone(),
            base_train: 200,
            test_size: 50,
            arch: ArchConfig::default(),
            base_tuning: TuningConfig {
                data_strategy: DataStrategy::Full,
                freeze_shared: false,
                ..TuningConfig::default()
            },
            tuning: TuningConfig {
                epochs: 20,
                warmup_epochs: 2,
                ..TuningConfig::default()
            },
            scoring: ScoringConfig::default(),
            rounds: vec![
                RoundSpec {
                    pool: PoolSource::Base,
                    pool_size: 200,
                    n_select: 12,
                    classes_to_revise: new.clone(),
                    tuning: None,
                },
                RoundSpec {
                    pool: PoolSource::Fresh,
                    pool_size: 200,
                    n_select: 22,
                    classes_to_revise: new,
                    tuning: None,
                },
            ],
            regimes: vec![Regime::new(DataStrategy::Hybrid, true)],
            track_curves: false,
        }
    }
}

impl ExperimentConfig {
    /// The packaged configuration mirroring the two-round abdominal protocol.
    pub fn reference() -> Self {
        Self::from_toml(REFERENCE_TOML).expect("packaged config parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Contract(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn catalog(&self) -> Result<ClassCatalog> {
        fn refs(v: &[String]) -> Vec<&str> {
            v.iter().map(String::as_str).collect()
        }
        ClassCatalog::new(
            &refs(&self.classes),
            &refs(&self.old_classes),
            &refs(&self.new_classes),
        )
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec::abdominal(self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let catalog = self.catalog()?;
        self.arch.validate()?;
        self.phantom_spec().validate(&catalog)?;
        self.base_tuning.validate()?;
        self.tuning.validate()?;
        self.scoring.weights.validate()?;
        if self.base_train == 0 || self.test_size == 0 {
            return Err(Error::Contract(
                "base_train and test_size must be >= 1".into(),
            ));
        }
        if catalog.old_classes().is_empty() {
            return Err(Error::Contract(
                "base training needs at least one old class".into(),
            ));
        }
        let m = self.arch.size_multiple();
        if self.height % m != 0 || self.width % m != 0 {
            return Err(Error::Contract(format!(
                "grid {}x{} is not a multiple of {m}",
                self.height, self.width
            )));
        }
        let mut names = BTreeSet::new();
        for regime in &self.regimes {
            if !names.insert(regime.name.as_str()) {
                return Err(Error::Contract(format!(
                    "duplicate regime name {:?}",
                    regime.name
                )));
            }
            regime.apply(&self.tuning).validate()?;
        }
        for (i, round) in self.rounds.iter().enumerate() {
            let pool = self.pool_len(round);
            if round.n_select > pool {
                return Err(Error::Contract(format!(
                    "round {}: n_select {} exceeds pool size {pool}",
                    i + 1,
                    round.n_select
                )));
            }
            if pool == 0 {
                return Err(Error::Contract(format!("round {}: empty pool", i + 1)));
            }
            catalog.parse_classes(&round.classes_to_revise)?;
            if let Some(t) = &round.tuning {
                t.validate()?;
            }
        }
        Ok(())
    }

    fn pool_len(&self, round: &RoundSpec) -> usize {
        match round.pool {
            PoolSource::Base => self.base_train,
            PoolSource::Fresh => round.pool_size,
        }
    }

    pub fn round_tuning(&self, round: usize, regime: &Regime) -> TuningConfig {
        let template = self.rounds[round].tuning.as_ref().unwrap_or(&self.tuning);
        regime.apply(template)
    }

    /// SHA-256 of the canonical serialized config.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }
}

/// Stable seed for a named sub-stream of an experiment.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{tag}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Every split used by an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentData {
    pub catalog: ClassCatalog,
    /// Base scans carrying their old-class ground truth under the prior tag.
    pub base: Vec<Scan>,
    /// One entry per round; `None` when the round reuses the base scans.
    pub fresh_pools: Vec<Option<Vec<Scan>>>,
    pub test: Vec<Scan>,
}

impl ExperimentData {
    pub fn pool(&self, round: usize) -> &[Scan] {
        match &self.fresh_pools[round] {
            Some(p) => p,
            None => &self.base,
        }
    }
}

/// Attaches the old-class ground truth of each scan as its prior annotation.
pub fn attach_base_annotations(scans: &mut [Scan], catalog: &ClassCatalog) {
    let old: BTreeSet<ClassId> = catalog.old_classes().iter().copied().collect();
    for scan in scans {
        let prior = scan.ground_truth.restrict(&old);
        scan.annotations.insert(AnnotationTag::Prior, prior);
    }
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    config.validate()?;
    let catalog = config.catalog()?;
    let spec = config.phantom_spec();
    let mut base = generate_split(
        "base",
        derive_seed(config.seed, "base"),
        config.base_train,
        &spec,
        &catalog,
    )?
    .scans;
    attach_base_annotations(&mut base, &catalog);
    let test = generate_split(
        "test",
        derive_seed(config.seed, "test"),
        config.test_size,
        &spec,
        &catalog,
    )?
    .scans;
    let fresh_pools = config
        .rounds
        .iter()
        .enumerate()
        .map(|(i, r)| match r.pool {
            PoolSource::Base => Ok(None),
            PoolSource::Fresh => {
                let prefix = format!("pool{}", i + 1);
                let seed = derive_seed(config.seed, &prefix);
                generate_split(&prefix, seed, r.pool_size, &spec, &catalog).map(|d| Some(d.scans))
            }
        })
        .collect::<Result<_>>()?;
    Ok(ExperimentData {
        catalog,
        base,
        fresh_pools,
        test,
    })
}

/// Full training from scratch on the base scans' old-class annotations.
pub fn train_base(config: &ExperimentConfig) -> Result<(ModelParams, TrainHistory)> {
    let data = prepare_data(config)?;
    train_base_on(config, &data.base, None)
}

pub fn train_base_on(
    config: &ExperimentConfig,
    base: &[Scan],
    validation: Option<&[Scan]>,
) -> Result<(ModelParams, TrainHistory)> {
    let catalog = config.catalog()?;
    let params = init_model(derive_seed(config.seed, "init"), &config.arch, &catalog)?;
    train_base_from(config, params, base, validation)
}

/// As [`train_base_on`] from given initial parameters (for example with
/// embeddings loaded from a file).
pub fn train_base_from(
    config: &ExperimentConfig,
    params: ModelParams,
    base: &[Scan],
    validation: Option<&[Scan]>,
) -> Result<(ModelParams, TrainHistory)> {
    let tuning = TuningConfig {
        data_strategy: DataStrategy::Full,
        freeze_shared: false,
        ..config.base_tuning.clone()
    };
    for &k in params.catalog.old_classes() {
        if !base.iter().any(|s| {
            s.annotation(AnnotationTag::Prior)
                .is_some_and(|p| p.contains(k))
        }) {
            let name = params.catalog.name_of(k).unwrap_or("?");
            return Err(Error::Contract(format!(
                "base scans carry no annotation for old class {name}"
            )));
        }
    }
    let view = build_training_view(&[], &[], base, DataStrategy::Full)?;
    let partition = Partition::all_trainable(&params);
    train(&params, &view, &tuning, &partition, validation)
}

/// Annotation state carried from one round to the next.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CarryOver {
    /// Scans revised in earlier rounds, with their merged annotations.
    pub annotated: Vec<Scan>,
    pub scores: Vec<ScanScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub regime: String,
    pub round_index: usize,
    pub data_strategy: DataStrategy,
    pub freeze_shared: bool,
    pub selected_scan_ids: Vec<String>,
    pub reused_scan_ids: Vec<String>,
    pub scores: Vec<ScanScore>,
    pub classes_revised: Vec<ClassId>,
    pub dsc_before: BTreeMap<ClassId, f64>,
    pub dsc_after: BTreeMap<ClassId, f64>,
    pub scans_processed_per_epoch: usize,
    pub epochs: usize,
    pub wall_time_seconds: f64,
    pub checkpoint_in: String,
    pub checkpoint_out: String,
    pub history: TrainHistory,
    pub error: Option<String>,
}

impl RoundRecord {
    pub fn wall_per_epoch(&self) -> f64 {
        self.wall_time_seconds / self.epochs.max(1) as f64
    }
}

/// Result of a successful round.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub params: ModelParams,
    pub record: RoundRecord,
    /// The pool with predicted, revised and hybrid annotations attached.
    pub pool: Vec<Scan>,
    pub carry: CarryOver,
}

/// Scores one scan: uncertainty and consistency over `classes`, overlap
/// over every predicted channel. Also returns the thresholded predictions.
pub fn score_scan(
    params: &ModelParams,
    scan: &Scan,
    classes: &BTreeSet<ClassId>,
    scoring: &ScoringConfig,
) -> Result<(ScanScore, AnnotationSet)> {
    let probs = predict(params, &scan.image, &params.catalog.id_set())?;
    let predicted = binarize_predictions(&probs, scoring.threshold)?;
    let restricted: BTreeMap<_, _> = probs
        .into_iter()
        .filter(|(k, _)| classes.contains(k))
        .collect();
    let u = uncertainty_score(&restricted);
    let c = consistency_score(params, &scan.image, classes, &scoring.augmentations)?;
    let o = overlap_score(&predicted);
    Ok((
        ScanScore::new(&scan.scan_id, u, c, o, &scoring.weights),
        predicted,
    ))
}

pub fn score_pool(
    params: &ModelParams,
    pool: &[Scan],
    classes: &BTreeSet<ClassId>,
    scoring: &ScoringConfig,
) -> Result<Vec<(ScanScore, AnnotationSet)>> {
    pool.par_iter()
        .map(|s| score_scan(params, s, classes, scoring))
        .collect()
}

/// Identifies the inputs of a round.
#[derive(Clone, Debug)]
pub struct RoundContext<'a> {
    pub regime: &'a Regime,
    pub round_index: usize,
    pub test: &'a [Scan],
    pub scoring: &'a ScoringConfig,
    pub checkpoint_in: String,
    pub track_curves: bool,
}

/// One full round. Errors leave `params` untouched; the caller keeps using
/// the incoming checkpoint.
pub fn run_round(
    params: &ModelParams,
    pool: &[Scan],
    spec: &RoundSpec,
    tuning: &TuningConfig,
    carry: &CarryOver,
    ctx: &RoundContext<'_>,
) -> Result<RoundOutcome> {
    if pool.is_empty() {
        return Err(Error::Contract("round pool is empty".into()));
    }
    tuning.validate()?;
    let classes = params.catalog.parse_classes(&spec.classes_to_revise)?;
    let all = params.catalog.id_set();
    let dsc_before = evaluate(params, ctx.test, &all)?;

    let scored = score_pool(params, pool, &classes, ctx.scoring)?;
    let scores: Vec<ScanScore> = scored.iter().map(|(s, _)| s.clone()).collect();
    let selected = select_for_revision(&scores, spec.n_select)?;

    let mut pool: Vec<Scan> = pool.to_vec();
    for (scan, (_, predicted)) in pool.iter_mut().zip(scored) {
        scan.annotations.insert(AnnotationTag::Predicted, predicted);
    }
    let selected_set: BTreeSet<&str> = selected.iter().map(String::as_str).collect();
    for scan in pool
        .iter_mut()
        .filter(|s| selected_set.contains(s.scan_id.as_str()))
    {
        let predicted = &scan.annotations[&AnnotationTag::Predicted];
        let revised = oracle_revise(scan, predicted, &classes)?.expert_channels();
        let hybrid = merge_hybrid(predicted, &revised)?;
        scan.annotations.insert(AnnotationTag::Revised, revised);
        scan.annotations.insert(AnnotationTag::Hybrid, hybrid);
    }

    let mut record = RoundRecord {
        regime: ctx.regime.name.clone(),
        round_index: ctx.round_index,
        data_strategy: tuning.data_strategy,
        freeze_shared: tuning.freeze_shared,
        selected_scan_ids: selected.clone(),
        reused_scan_ids: Vec::new(),
        scores: scores.clone(),
        classes_revised: classes.iter().copied().collect(),
        dsc_before: dsc_before.clone(),
        dsc_after: dsc_before,
        scans_processed_per_epoch: 0,
        epochs: 0,
        wall_time_seconds: f64::MIN_POSITIVE,
        checkpoint_in: ctx.checkpoint_in.clone(),
        checkpoint_out: ctx.checkpoint_in.clone(),
        history: TrainHistory::default(),
        error: None,
    };

    let revised_scans: Vec<&Scan> = selected
        .iter()
        .map(|id| {
            pool.iter()
                .find(|s| &s.scan_id == id)
                .expect("selected from pool")
        })
        .collect();
    let mut next_carry = carry.clone();
    for (scan, id) in revised_scans.iter().zip(&selected) {
        next_carry.annotated.push((*scan).clone());
        next_carry.scores.push(
            scores
                .iter()
                .find(|s| &s.scan_id == id)
                .expect("scored")
                .clone(),
        );
    }

    if selected.is_empty() && tuning.data_strategy != DataStrategy::Full {
        return Ok(RoundOutcome {
            params: params.clone(),
            record,
            pool,
            carry: next_carry,
        });
    }

    let reuse: Vec<&Scan> = if tuning.data_strategy == DataStrategy::Hybrid {
        let ids = select_reuse(&carry.scores, tuning.reuse_fraction)?;
        ids.iter()
            .map(|id| {
                carry
                    .annotated
                    .iter()
                    .find(|s| &s.scan_id == id)
                    .expect("carried scan")
            })
            .collect()
    } else {
        Vec::new()
    };
    record.reused_scan_ids = reuse.iter().map(|s| s.scan_id.clone()).collect();
    let view = build_training_view(&revised_scans, &reuse, &pool, tuning.data_strategy)?;

    let (start, partition) = if tuning.data_strategy == DataStrategy::Full {
        let fresh = init_model(tuning.seed, &params.arch, &params.catalog)?;
        let partition = regime_partition(&fresh, tuning, &classes)?;
        (fresh, partition)
    } else {
        (params.clone(), regime_partition(params, tuning, &classes)?)
    };
    let validation = ctx.track_curves.then_some(ctx.test);
    let (tuned, history) = train(&start, &view, tuning, &partition, validation)?;

    record.dsc_after = evaluate(&tuned, ctx.test, &all)?;
    record.scans_processed_per_epoch = view.len();
    record.epochs = history.epochs.len();
    record.wall_time_seconds = history
        .epochs
        .iter()
        .map(|e| e.wall_seconds)
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    record.checkpoint_out = checkpoint_key(&ctx.regime.name, ctx.round_index);
    record.history = history;
    Ok(RoundOutcome {
        params: tuned,
        record,
        pool,
        carry: next_carry,
    })
}

pub const BASE_CHECKPOINT: &str = "base";

pub fn checkpoint_key(regime: &str, round_index: usize) -> String {
    format!("{regime}.round{round_index}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseRecord {
    pub dsc: BTreeMap<ClassId, f64>,
    pub digest: String,
    pub scans_processed_per_epoch: usize,
    pub history: TrainHistory,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub config_digest: String,
    pub catalog: ClassCatalog,
    pub base: BaseRecord,
    pub rounds: Vec<RoundRecord>,
    /// Checkpoints by reference key (`base`, `<regime>.round<i>`).
    pub checkpoints: BTreeMap<String, ModelParams>,
}

impl ExperimentReport {
    pub fn record(&self, regime: &str, round_index: usize) -> Option<&RoundRecord> {
        self.rounds
            .iter()
            .find(|r| r.regime == regime && r.round_index == round_index)
    }

    pub fn speedup(&self, regime: &str, round_index: usize) -> Option<Speedup> {
        round_speedup(&self.rounds, regime, round_index)
    }

    pub fn csv(&self) -> String {
        report_csv(&self.catalog, &self.base, &self.rounds)
    }
}

/// Scan and wall ratios of `regime` against the first successful
/// full-training regime in the same round.
pub fn round_speedup(rounds: &[RoundRecord], regime: &str, round_index: usize) -> Option<Speedup> {
    let tuned = rounds
        .iter()
        .find(|r| r.regime == regime && r.round_index == round_index && r.error.is_none())?;
    let full = rounds.iter().find(|r| {
        r.round_index == round_index && r.data_strategy == DataStrategy::Full && r.error.is_none()
    })?;
    speedup_accounting(
        full.scans_processed_per_epoch,
        tuned.scans_processed_per_epoch,
        full.wall_per_epoch(),
        tuned.wall_per_epoch(),
    )
    .ok()
}

/// Deterministic summary table; excludes wall-clock measurements.
pub fn report_csv(catalog: &ClassCatalog, base: &BaseRecord, rounds: &[RoundRecord]) -> String {
    let mut out = String::from(
        "regime,round,strategy,freeze,class,class_name,group,dsc_before,dsc_after,selected,reused,scans_per_epoch,scan_ratio,error\n",
    );
    let group = |k: ClassId| {
        if catalog.old_classes().contains(&k) {
            "old"
        } else if catalog.new_classes().contains(&k) {
            "new"
        } else {
            "other"
        }
    };
    for (k, v) in &base.dsc {
        let _ = writeln!(
            out,
            "base,0,full,false,{k},{},{},{v:.6},{v:.6},0,0,{},,",
            catalog.name_of(*k).unwrap_or("?"),
            group(*k),
            base.scans_processed_per_epoch
        );
    }
    for r in rounds {
        let ratio = round_speedup(rounds, &r.regime, r.round_index)
            .map(|s| format!("{:.4}", s.scan_ratio))
            .unwrap_or_default();
        let error = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        if r.dsc_before.is_empty() {
            let _ = writeln!(
                out,
                "{},{},{},{},,,,,,0,0,0,,{error}",
                r.regime,
                r.round_index,
                r.data_strategy.as_str(),
                r.freeze_shared
            );
        }
        for (k, before) in &r.dsc_before {
            let after = r.dsc_after.get(k).copied().unwrap_or(f64::NAN);
            let _ = writeln!(
                out,
                "{},{},{},{},{k},{},{},{before:.6},{after:.6},{},{},{},{ratio},{error}",
                r.regime,
                r.round_index,
                r.data_strategy.as_str(),
                r.freeze_shared,
                catalog.name_of(*k).unwrap_or("?"),
                group(*k),
                r.selected_scan_ids.len(),
                r.reused_scan_ids.len(),
                r.scans_processed_per_epoch,
            );
        }
    }
    out
}

/// Runs `config.rounds` under one regime starting from `params`.
/// `first_round` allows resuming a chain from a saved checkpoint.
pub fn run_regime(
    config: &ExperimentConfig,
    data: &ExperimentData,
    regime: &Regime,
    params: ModelParams,
    carry: CarryOver,
    first_round: usize,
    checkpoint_in: String,
) -> (Vec<RoundRecord>, BTreeMap<String, ModelParams>) {
    let mut params = params;
    let mut carry = carry;
    let mut checkpoint_in = checkpoint_in;
    let mut records = Vec::new();
    let mut checkpoints = BTreeMap::new();
    for round in first_round..config.rounds.len() {
        let spec = &config.rounds[round];
        let tuning = config.round_tuning(round, regime);
        let ctx = RoundContext {
            regime,
            round_index: round + 1,
            test: &data.test,
            scoring: &config.scoring,
            checkpoint_in: checkpoint_in.clone(),
            track_curves: config.track_curves,
        };
        match run_round(&params, data.pool(round), spec, &tuning, &carry, &ctx) {
            Ok(outcome) => {
                log::info!(
                    "{} round {}: selected {}, view {}",
                    regime.name,
                    round + 1,
                    outcome.record.selected_scan_ids.len(),
                    outcome.record.scans_processed_per_epoch
                );
                checkpoint_in = outcome.record.checkpoint_out.clone();
                if checkpoint_in != ctx.checkpoint_in {
                    checkpoints.insert(checkpoint_in.clone(), outcome.params.clone());
                }
                params = outcome.params;
                carry = outcome.carry;
                records.push(outcome.record);
            }
            Err(e) => {
                log::warn!("{} round {} failed: {e}", regime.name, round + 1);
                records.push(failed_record(
                    regime,
                    &tuning,
                    round + 1,
                    &checkpoint_in,
                    &e,
                ));
                break;
            }
        }
    }
    (records, checkpoints)
}

fn failed_record(
    regime: &Regime,
    tuning: &TuningConfig,
    round_index: usize,
    checkpoint: &str,
    e: &Error,
) -> RoundRecord {
    RoundRecord {
        regime: regime.name.clone(),
        round_index,
        data_strategy: tuning.data_strategy,
        freeze_shared: tuning.freeze_shared,
        selected_scan_ids: Vec::new(),
        reused_scan_ids: Vec::new(),
        scores: Vec::new(),
        classes_revised: Vec::new(),
        dsc_before: BTreeMap::new(),
        dsc_after: BTreeMap::new(),
        scans_processed_per_epoch: 0,
        epochs: 0,
        wall_time_seconds: f64::MIN_POSITIVE,
        checkpoint_in: checkpoint.to_string(),
        checkpoint_out: checkpoint.to_string(),
        history: TrainHistory::default(),
        error: Some(e.to_string()),
    }
}

/// Base training followed by every round under every regime.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let data = prepare_data(config)?;
    let (base, history) = train_base_on(
        config,
        &data.base,
        config.track_curves.then_some(&data.test[..]),
    )?;
    run_experiment_from(config, &data, base, history)
}

/// As [`run_experiment`] with an already trained base checkpoint.
pub fn run_experiment_from(
    config: &ExperimentConfig,
    data: &ExperimentData,
    base: ModelParams,
    history: TrainHistory,
) -> Result<ExperimentReport> {
    let base_dsc = evaluate(&base, &data.test, &data.catalog.id_set())?;
    let mut checkpoints = BTreeMap::new();
    let mut rounds = Vec::new();
    for regime in &config.regimes {
        let (records, ckpts) = run_regime(
            config,
            data,
            regime,
            base.clone(),
            CarryOver::default(),
            0,
            BASE_CHECKPOINT.to_string(),
        );
        rounds.extend(records);
        checkpoints.extend(ckpts);
    }
    let base_record = BaseRecord {
        dsc: base_dsc,
        digest: base.digest(),
        scans_processed_per_epoch: data.base.len(),
        history,
    };
    checkpoints.insert(BASE_CHECKPOINT.to_string(), base);
    Ok(ExperimentReport {
        config_digest: config.digest(),
        catalog: data.catalog.clone(),
        base: base_record,
        rounds,
        checkpoints,
    })
}
