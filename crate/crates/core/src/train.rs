//! Data preparation, training loops for the three variants, evaluation and
//! the seed-averaged comparison.

use std::collections::BTreeMap;
use std::fs;
use std::marker::PhantomData;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accdoa::{decode, encode, AccdoaTensor};
use crate::error::{Error, Result};
use crate::events::EventList;
use crate::features::{FeatureConfig, FeatureExtractor, FeatureTensor, Standardizer};
use crate::metrics::{
    evaluate_event_lists, threshold_sweep, MetricsReport, SweepResult, DEFAULT_TAU_GRID,
};
use crate::models::{Crnn, ModelConfig, SeldModel, Variant};
use crate::optim::{Adam, AdamConfig};
use crate::rng::derived_rng;
use crate::scene::{render_scene_detailed, DatasetManifest, DatasetSpec, FoaClip, SplitName};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Compile-time split marker.
pub trait SplitTag {
    const NAME: SplitName;
}

#[derive(Debug, Clone, Copy)]
pub struct Train;
#[derive(Debug, Clone, Copy)]
pub struct Validation;
#[derive(Debug, Clone, Copy)]
pub struct Test;

impl SplitTag for Train {
    const NAME: SplitName = SplitName::Train;
}
impl SplitTag for Validation {
    const NAME: SplitName = SplitName::Validation;
}
impl SplitTag for Test {
    const NAME: SplitName = SplitName::Test;
}

/// One clip ready for the networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipData {
    /// Global clip index within the dataset.
    pub index: usize,
    /// `[7, T, n_mels]`, standardized.
    pub features: Tensor,
    /// Ground truth restricted to the `T'` output frames.
    pub events: EventList,
    /// `[T', C, 3]`.
    pub target: AccdoaTensor,
}

#[derive(Debug, Clone)]
pub struct Dataset<S: SplitTag> {
    clips: Vec<ClipData>,
    _split: PhantomData<S>,
}

impl<S: SplitTag> Dataset<S> {
    pub fn new(clips: Vec<ClipData>) -> Self {
        Self {
            clips,
            _split: PhantomData,
        }
    }

    pub fn split(&self) -> SplitName {
        S::NAME
    }

    pub fn clips(&self) -> &[ClipData] {
        &self.clips
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn references(&self) -> Vec<EventList> {
        self.clips.iter().map(|c| c.events.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset<Train>,
    pub validation: Dataset<Validation>,
    pub test: Dataset<Test>,
    pub standardizer: Standardizer,
    pub num_classes: usize,
    /// Same-class frame collisions dropped while building the ground truth.
    pub collisions: usize,
}

struct Prepared {
    index: usize,
    raw: FeatureTensor,
    events: EventList,
}

fn featurize(ex: &FeatureExtractor, index: usize, clip: &FoaClip) -> Result<Prepared> {
    Ok(Prepared {
        index,
        raw: ex.extract_raw(clip)?,
        events: clip.events.clone(),
    })
}

fn finish<S: SplitTag>(
    items: Vec<Prepared>,
    st: &Standardizer,
    model: &ModelConfig,
    classes: usize,
) -> Result<Dataset<S>> {
    let clips = items
        .into_iter()
        .map(|mut p| {
            st.apply(&mut p.raw)?;
            let frames = model.out_frames(p.raw.frames());
            let events = p.events.truncated(frames);
            let enc = encode(&events, frames, classes)?;
            Ok(ClipData {
                index: p.index,
                features: p.raw.time_major(),
                events,
                target: enc.target,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset::new(clips))
}

fn assemble(
    splits: [Vec<Prepared>; 3],
    model: &ModelConfig,
    classes: usize,
    collisions: usize,
) -> Result<PreparedData> {
    let [train, val, test] = splits;
    let raws: Vec<FeatureTensor> = train.iter().map(|p| p.raw.clone()).collect();
    let standardizer = Standardizer::fit(&raws)?;
    Ok(PreparedData {
        train: finish(train, &standardizer, model, classes)?,
        validation: finish(val, &standardizer, model, classes)?,
        test: finish(test, &standardizer, model, classes)?,
        standardizer,
        num_classes: classes,
        collisions,
    })
}

/// Renders every clip in memory, extracts features and fits the
/// standardizer on the training split.
pub fn prepare_data(
    spec: &DatasetSpec,
    features: &FeatureConfig,
    model: &ModelConfig,
) -> Result<PreparedData> {
    let ex = FeatureExtractor::new(features.clone())?;
    let mut collisions = 0;
    let mut splits: [Vec<Prepared>; 3] = Default::default();
    for (k, split) in SplitName::ALL.into_iter().enumerate() {
        for i in spec.indices(split) {
            let scene = render_scene_detailed(&spec.clip_spec(i))?;
            collisions += scene.collisions;
            splits[k].push(featurize(&ex, i, &scene.clip)?);
        }
    }
    assemble(splits, model, spec.scene.num_target_classes, collisions)
}

/// Like [`prepare_data`] but reads clips listed in a dataset manifest.
pub fn prepare_from_manifest(
    root: &Path,
    features: &FeatureConfig,
    model: &ModelConfig,
) -> Result<PreparedData> {
    let manifest = DatasetManifest::load(root)?;
    let ex = FeatureExtractor::new(features.clone())?;
    let mut splits: [Vec<Prepared>; 3] = Default::default();
    for (k, split) in SplitName::ALL.into_iter().enumerate() {
        for (clip, i) in manifest
            .load_split(root, split)?
            .iter()
            .zip(manifest.spec.indices(split))
        {
            splits[k].push(featurize(&ex, i, clip)?);
        }
    }
    assemble(
        splits,
        model,
        manifest.spec.scene.num_target_classes,
        manifest.collisions,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub tau_grid: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig::default(),
            tau_grid: DEFAULT_TAU_GRID.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

/// Everything needed to reproduce an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.scene.validate()?;
        self.model.validate()?;
        if self.model.num_classes != self.dataset.scene.num_target_classes {
            return Err(Error::Config(format!(
                "model has {} classes but the dataset has {}",
                self.model.num_classes, self.dataset.scene.num_target_classes
            )));
        }
        if self.model.n_mels != self.features.n_mels {
            return Err(Error::Config(format!(
                "model expects {} mel bands, features produce {}",
                self.model.n_mels, self.features.n_mels
            )));
        }
        if self.features.sample_rate != self.dataset.scene.sample_rate {
            return Err(Error::Config(
                "feature and scene sample rates differ".into(),
            ));
        }
        let hop_s = self.features.hop as f64 / self.features.sample_rate as f64;
        let label_s = hop_s * crate::models::LABEL_POOL as f64;
        if (label_s - crate::events::LABEL_HOP_S).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "feature hop {hop_s} s pooled by {} gives {label_s} s, not the label hop",
                crate::models::LABEL_POOL
            )));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.train.tau_grid.is_empty() {
            return Err(Error::Config("tau grid is empty".into()));
        }
        if self.dataset.train_clips == 0
            || self.dataset.validation_clips == 0
            || self.dataset.test_clips == 0
        {
            return Err(Error::Config("every split needs at least one clip".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Dataset used by replica `seed`; each seed sees its own clips.
    pub fn dataset_for_seed(&self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            base_seed: self
                .dataset
                .base_seed
                .wrapping_add(seed.wrapping_mul(100_000)),
            ..self.dataset.clone()
        }
    }

    pub fn with_interference(&self, on: bool) -> Self {
        let mut c = self.clone();
        c.dataset.scene.interference_enabled = on;
        c
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.model.variant = variant;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Training history of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetHistory {
    /// Class the network was specialized on, if any.
    pub class_id: Option<usize>,
    /// Training-set loss before the first update, evaluation mode.
    pub initial_loss: f64,
    /// Training-set loss of the restored checkpoint, evaluation mode.
    pub final_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub steps_per_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    pub interference: bool,
    pub nets: Vec<NetHistory>,
    pub best_tau: f64,
    pub tau_spread: f64,
    pub validation: MetricsReport,
    pub test: MetricsReport,
    pub num_parameters: usize,
    pub collisions: usize,
    pub wall_clock_s: f64,
}

impl RunRecord {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Loss curves, one row per network and epoch.
    pub fn write_loss_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
        w.write_record([
            "variant",
            "seed",
            "net",
            "class",
            "epoch",
            "train_loss",
            "val_loss",
        ])
        .map_err(csv_err)?;
        for (i, n) in self.nets.iter().enumerate() {
            let class = n.class_id.map_or(String::new(), |c| c.to_string());
            w.write_record([
                self.variant.as_str().to_string(),
                self.seed.to_string(),
                i.to_string(),
                class.clone(),
                "0".into(),
                format!("{}", n.initial_loss),
                String::new(),
            ])
            .map_err(csv_err)?;
            for e in &n.epochs {
                w.write_record([
                    self.variant.as_str().to_string(),
                    self.seed.to_string(),
                    i.to_string(),
                    class.clone(),
                    e.epoch.to_string(),
                    format!("{}", e.train_loss),
                    format!("{}", e.val_loss),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// A training example: a clip, optionally paired with a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Item {
    pub clip: usize,
    pub class: Option<usize>,
}

/// Training examples for one network of `variant`: every clip for the
/// all-class model and for specialist `class`, every (clip, class) pair for
/// the conditioned model.
pub fn training_items(
    variant: Variant,
    clips: usize,
    classes: usize,
    class: Option<usize>,
) -> Vec<Item> {
    match variant {
        Variant::AllClass => (0..clips).map(|clip| Item { clip, class: None }).collect(),
        Variant::ClassSpecific => (0..clips).map(|clip| Item { clip, class }).collect(),
        Variant::ClassConditioned => (0..clips)
            .flat_map(|clip| {
                (0..classes).map(move |c| Item {
                    clip,
                    class: Some(c),
                })
            })
            .collect(),
    }
}

pub fn steps_per_epoch(items: usize, batch: usize) -> usize {
    items.div_ceil(batch)
}

/// Inputs and targets of one minibatch.
struct Batch {
    x: Tensor,
    y: Tensor,
    classes: Option<Vec<usize>>,
}

fn make_batch(clips: &[ClipData], items: &[Item], variant: Variant) -> Result<Batch> {
    let xs: Vec<&Tensor> = items.iter().map(|it| &clips[it.clip].features).collect();
    let x = Tensor::stack(&xs)?;
    let ys: Vec<Tensor> = items
        .iter()
        .map(|it| {
            let t = &clips[it.clip].target;
            match it.class {
                None => t.tensor().clone().reshape([t.frames(), t.classes() * 3]),
                Some(c) => Ok(t.class_slice(c)),
            }
        })
        .collect::<Result<_>>()?;
    let y = Tensor::stack(&ys.iter().collect::<Vec<_>>())?;
    let classes = (variant == Variant::ClassConditioned)
        .then(|| items.iter().map(|i| i.class.expect("class")).collect());
    Ok(Batch { x, y, classes })
}

fn batch_loss(
    net: &mut Crnn,
    b: &Batch,
    training: bool,
    rng: &mut impl Rng,
) -> Result<(Tape, crate::params::Bound, crate::tape::Var)> {
    let mut tape = Tape::new();
    let bound = net.params().bind(&mut tape);
    let x = tape.constant(b.x.clone());
    let pred = net.forward(&mut tape, &bound, x, b.classes.as_deref(), training, rng)?;
    let target = tape.constant(b.y.clone());
    let loss = tape.mse_loss(pred, target)?;
    Ok((tape, bound, loss))
}

/// Mean evaluation-mode loss over `items`, weighted by batch size.
fn eval_loss(
    net: &mut Crnn,
    clips: &[ClipData],
    items: &[Item],
    variant: Variant,
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut rng = derived_rng(0, 0);
    for chunk in items.chunks(batch) {
        let b = make_batch(clips, chunk, variant)?;
        let (tape, _, loss) = batch_loss(net, &b, false, &mut rng)?;
        total += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / items.len().max(1) as f64)
}

/// One optimizer step; returns the loss before the update.
fn train_step(net: &mut Crnn, adam: &mut Adam, b: &Batch, rng: &mut impl Rng) -> Result<f64> {
    let (mut tape, bound, loss) = batch_loss(net, b, true, rng)?;
    tape.backward(loss)?;
    let grads = net.params().grads(&tape, &bound);
    adam.step(net.params_mut(), &grads);
    Ok(tape.value(loss).data()[0] as f64)
}

/// Trains one network and restores the parameters of the epoch with the
/// lowest validation loss.
#[allow(clippy::too_many_arguments)]
pub fn train_network(
    net: &mut Crnn,
    variant: Variant,
    class: Option<usize>,
    train: &Dataset<Train>,
    val: &Dataset<Validation>,
    classes: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<NetHistory> {
    let mut items = training_items(variant, train.len(), classes, class);
    let val_items = training_items(variant, val.len(), classes, class);
    let mut rng = derived_rng(seed, 2000 + class.unwrap_or(0) as u64);
    let mut adam = Adam::new(net.params(), cfg.adam);
    let initial_loss = eval_loss(net, train.clips(), &items, variant, cfg.batch_size)?;
    let mut best = (f64::INFINITY, 0usize, net.clone());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        items.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, chunk) in items.chunks(cfg.batch_size).enumerate() {
            let b = make_batch(train.clips(), chunk, variant)?;
            let loss = train_step(net, &mut adam, &b, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            sum += loss * chunk.len() as f64;
        }
        let train_loss = sum / items.len() as f64;
        let val_loss = eval_loss(net, val.clips(), &val_items, variant, cfg.batch_size)?;
        log::debug!(
            "{variant} class {class:?} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}"
        );
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, net.clone());
        }
    }
    let best_epoch = best.1;
    if best_epoch > 0 {
        *net = best.2;
    }
    let final_loss = eval_loss(net, train.clips(), &items, variant, cfg.batch_size)?;
    Ok(NetHistory {
        class_id: class,
        initial_loss,
        final_loss,
        epochs,
        best_epoch,
        steps_per_epoch: steps_per_epoch(items.len(), cfg.batch_size),
    })
}

/// Trains every network of `model` on `data`.
pub fn train_model(
    model: &mut SeldModel,
    data: &PreparedData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<NetHistory>> {
    let variant = model.variant();
    let classes = model.num_classes();
    let mut out = Vec::new();
    for (i, net) in model.nets_mut().iter_mut().enumerate() {
        let class = (variant == Variant::ClassSpecific).then_some(i);
        out.push(train_network(
            net,
            variant,
            class,
            &data.train,
            &data.validation,
            classes,
            cfg,
            seed,
        )?);
    }
    Ok(out)
}

/// Evaluation-mode predictions for every clip of a split.
pub fn predict_split<S: SplitTag>(
    model: &mut SeldModel,
    data: &Dataset<S>,
    batch: usize,
) -> Result<Vec<AccdoaTensor>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.clips().chunks(batch.max(1)) {
        let xs: Vec<&Tensor> = chunk.iter().map(|c| &c.features).collect();
        out.extend(model.predict(&Tensor::stack(&xs)?)?);
    }
    Ok(out)
}

/// Decodes at `tau` and scores against the split's ground truth.
pub fn evaluate<S: SplitTag>(
    model: &mut SeldModel,
    data: &Dataset<S>,
    tau: f64,
    batch: usize,
) -> Result<MetricsReport> {
    let preds = predict_split(model, data, batch)?;
    evaluate_predictions(&preds, &data.references(), tau)
}

pub fn evaluate_predictions(
    preds: &[AccdoaTensor],
    refs: &[EventList],
    tau: f64,
) -> Result<MetricsReport> {
    let decoded: Vec<EventList> = preds.iter().map(|p| decode(p, tau)).collect();
    let pairs: Vec<(&EventList, &EventList)> = refs.iter().zip(&decoded).collect();
    evaluate_event_lists(&pairs)
}

/// Threshold selection; only the validation split is accepted.
pub fn sweep_tau(
    model: &mut SeldModel,
    data: &Dataset<Validation>,
    grid: &[f64],
    batch: usize,
) -> Result<SweepResult> {
    let preds = predict_split(model, data, batch)?;
    threshold_sweep(&preds, &data.references(), grid)
}

/// Trains one variant, picks `tau` on validation and scores the test split.
pub fn run_variant(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    seed: u64,
) -> Result<(SeldModel, RunRecord)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = SeldModel::new(cfg.model.clone(), seed)?;
    let nets = train_model(&mut model, data, &cfg.train, seed)?;
    let sweep = sweep_tau(
        &mut model,
        &data.validation,
        &cfg.train.tau_grid,
        cfg.train.batch_size,
    )?;
    let test = evaluate(&mut model, &data.test, sweep.best_tau, cfg.train.batch_size)?;
    let record = RunRecord {
        variant: cfg.model.variant,
        seed,
        interference: cfg.dataset.scene.interference_enabled,
        nets,
        best_tau: sweep.best_tau,
        tau_spread: sweep.spread(),
        validation: sweep.best().report.clone(),
        test,
        num_parameters: model.num_parameters(),
        collisions: data.collisions,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok((model, record))
}

/// Mean metrics of one variant under one interference setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub interference: bool,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub tau: f64,
    pub er20: f64,
    pub f20: f64,
    pub le_cd: f64,
    pub lr_cd: f64,
    pub seld_score: f64,
    pub seld_per_seed: Vec<f64>,
    /// Mean per-class SELD score over seeds, indexed by class.
    pub per_class_seld: Vec<f64>,
    /// Per-class substitution, deletion and insertion frame counts summed
    /// over seeds.
    pub per_class_sdi: Vec<[usize; 3]>,
    pub insertions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub num_classes: usize,
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<RunRecord>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

impl ComparisonRow {
    fn from_runs(runs: &[&RunRecord], classes: usize) -> Self {
        let r0 = runs[0];
        let mut per_class_seld = vec![Vec::new(); classes];
        let mut per_class_sdi = vec![[0usize; 3]; classes];
        for r in runs {
            for c in &r.test.per_class {
                if c.class_id < classes {
                    per_class_seld[c.class_id].push(c.seld_score);
                    let s = &mut per_class_sdi[c.class_id];
                    s[0] += c.counts.subs;
                    s[1] += c.counts.dels;
                    s[2] += c.counts.ins;
                }
            }
        }
        Self {
            interference: r0.interference,
            variant: r0.variant,
            seeds: runs.iter().map(|r| r.seed).collect(),
            tau: mean(runs.iter().map(|r| r.best_tau)),
            er20: mean(runs.iter().map(|r| r.test.er20)),
            f20: mean(runs.iter().map(|r| r.test.f20)),
            le_cd: mean(runs.iter().map(|r| r.test.le_cd)),
            lr_cd: mean(runs.iter().map(|r| r.test.lr_cd)),
            seld_score: mean(runs.iter().map(|r| r.test.seld_score)),
            seld_per_seed: runs.iter().map(|r| r.test.seld_score).collect(),
            per_class_seld: per_class_seld
                .into_iter()
                .map(|v| {
                    if v.is_empty() {
                        f64::NAN
                    } else {
                        mean(v.into_iter())
                    }
                })
                .collect(),
            per_class_sdi,
            insertions: runs.iter().map(|r| r.test.ins).sum(),
        }
    }
}

impl ComparisonTable {
    pub fn from_runs(runs: Vec<RunRecord>, num_classes: usize) -> Self {
        let mut groups: BTreeMap<(bool, Variant), Vec<&RunRecord>> = BTreeMap::new();
        for r in &runs {
            groups
                .entry((r.interference, r.variant))
                .or_default()
                .push(r);
        }
        let rows = groups
            .values()
            .map(|g| ComparisonRow::from_runs(g, num_classes))
            .collect();
        Self {
            num_classes,
            rows,
            runs,
        }
    }

    pub fn row(&self, interference: bool, variant: Variant) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.interference == interference && r.variant == variant)
    }

    /// All-class minus conditioned mean SELD score; positive when the
    /// conditioned model is better.
    pub fn conditioning_margin(&self, interference: bool) -> Option<f64> {
        Some(
            self.row(interference, Variant::AllClass)?.seld_score
                - self
                    .row(interference, Variant::ClassConditioned)?
                    .seld_score,
        )
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:<18} {:>5} {:>6} {:>6} {:>7} {:>6} {:>7}",
            "interference", "system", "tau", "ER20", "F20", "LE_CD", "LR_CD", "SELD"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:<18} {:>5.2} {:>6.3} {:>6.3} {:>7.2} {:>6.3} {:>7.4}",
                if r.interference { "on" } else { "off" },
                r.variant.as_str(),
                r.tau,
                r.er20,
                r.f20,
                r.le_cd,
                r.lr_cd,
                r.seld_score
            );
        }
        for on in [false, true] {
            if let Some(m) = self.conditioning_margin(on) {
                let base = self
                    .row(on, Variant::AllClass)
                    .map_or(f64::NAN, |r| r.seld_score);
                let _ = writeln!(
                    s,
                    "interference {}: all-class minus conditioned SELD = {m:.4} ({:.1}% relative)",
                    if on { "on" } else { "off" },
                    100.0 * m / base
                );
            }
        }
        s
    }

    /// Writes `summary.csv`, `per_class_seld.csv`, `sdi_counts.csv` and
    /// `loss_curves.csv` into `dir`.
    pub fn write_csvs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let on = |b: bool| if b { "on" } else { "off" }.to_string();

        let mut w = csv::Writer::from_path(dir.join("summary.csv")).map_err(csv_err)?;
        w.write_record([
            "interference",
            "variant",
            "tau",
            "er20",
            "f20",
            "le_cd",
            "lr_cd",
            "seld",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                on(r.interference),
                r.variant.as_str().into(),
                r.tau.to_string(),
                r.er20.to_string(),
                r.f20.to_string(),
                r.le_cd.to_string(),
                r.lr_cd.to_string(),
                r.seld_score.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("per_class_seld.csv")).map_err(csv_err)?;
        w.write_record(["interference", "variant", "class", "seld"])
            .map_err(csv_err)?;
        for r in &self.rows {
            for (c, v) in r.per_class_seld.iter().enumerate() {
                w.write_record([
                    on(r.interference),
                    r.variant.as_str().into(),
                    c.to_string(),
                    v.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("sdi_counts.csv")).map_err(csv_err)?;
        w.write_record([
            "interference",
            "variant",
            "class",
            "substitutions",
            "deletions",
            "insertions",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            for (c, sdi) in r.per_class_sdi.iter().enumerate() {
                w.write_record([
                    on(r.interference),
                    r.variant.as_str().into(),
                    c.to_string(),
                    sdi[0].to_string(),
                    sdi[1].to_string(),
                    sdi[2].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("loss_curves.csv")).map_err(csv_err)?;
        w.write_record([
            "interference",
            "variant",
            "seed",
            "net",
            "epoch",
            "train_loss",
            "val_loss",
        ])
        .map_err(csv_err)?;
        for r in &self.runs {
            for (i, n) in r.nets.iter().enumerate() {
                for e in &n.epochs {
                    w.write_record([
                        on(r.interference),
                        r.variant.as_str().into(),
                        r.seed.to_string(),
                        i.to_string(),
                        e.epoch.to_string(),
                        e.train_loss.to_string(),
                        e.val_loss.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains all three variants for every seed on both the interference-free
/// and the interference dataset. Variants of one seed share identical data.
pub fn run_comparison(cfg: &ExperimentConfig) -> Result<ComparisonTable> {
    cfg.validate()?;
    if cfg.train.seeds.is_empty() {
        return Err(Error::Config("comparison needs at least one seed".into()));
    }
    let mut runs = Vec::new();
    for interference in [false, true] {
        let base = cfg.with_interference(interference);
        for &seed in &cfg.train.seeds {
            let data = prepare_data(&base.dataset_for_seed(seed), &base.features, &base.model)?;
            for variant in Variant::ALL {
                let c = base.with_variant(variant);
                let (_, record) = run_variant(&c, &data, seed)?;
                log::info!(
                    "interference {} seed {seed} {variant}: test SELD {:.4} (tau {})",
                    if interference { "on" } else { "off" },
                    record.test.seld_score,
                    record.best_tau
                );
                runs.push(record);
            }
        }
    }
    Ok(ComparisonTable::from_runs(runs, cfg.model.num_classes))
}

/// Fits one batch repeatedly; returns the training-mode loss of every step.
pub fn overfit_batch(
    net: &mut Crnn,
    clips: &[ClipData],
    items: &[Item],
    variant: Variant,
    steps: usize,
    adam: AdamConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let b = make_batch(clips, items, variant)?;
    let mut opt = Adam::new(net.params(), adam);
    let mut rng = derived_rng(seed, 3000);
    (0..steps)
        .map(|step| {
            let l = train_step(net, &mut opt, &b, &mut rng)?;
            if l.is_finite() {
                Ok(l)
            } else {
                Err(Error::Diverged {
                    epoch: 0,
                    step,
                    loss: l,
                })
            }
        })
        .collect()
}

/// Mean absolute difference between the conditioned outputs for two classes
/// on the same clips.
pub fn conditioning_effect(
    model: &mut SeldModel,
    clips: &[ClipData],
    a: usize,
    b: usize,
) -> Result<f64> {
    let xs: Vec<&Tensor> = clips.iter().map(|c| &c.features).collect();
    let x = Tensor::stack(&xs)?;
    let pa = model.predict_class(&x, a)?;
    let pb = model.predict_class(&x, b)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (u, v) in pa.iter().zip(&pb) {
        for (p, q) in u.tensor().data().iter().zip(v.tensor().data()) {
            sum += (p - q).abs() as f64;
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}
