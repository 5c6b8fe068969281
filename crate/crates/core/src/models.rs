//! CRNN localizers: one all-class network, an ensemble of single-class
//! specialists, and a single FiLM-conditioned network.
//!
//! All three share the trunk: convolutional blocks (conv, batch norm,
//! optional FiLM, ReLU, max pool), a bidirectional GRU over the pooled frames
//! and a linear head with `tanh`, emitting ACCDOA vectors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::accdoa::AccdoaTensor;
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::derived_rng;
use crate::tape::{GruParams, RunningStats, Tape, Var};
use crate::tensor::{Scalar, Tensor};

const MODEL_FORMAT: &str = "seldkit-model-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    AllClass,
    ClassSpecific,
    ClassConditioned,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::AllClass,
        Variant::ClassSpecific,
        Variant::ClassConditioned,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::AllClass => "all_class",
            Variant::ClassSpecific => "class_specific",
            Variant::ClassConditioned => "class_conditioned",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "all_class" | "all" | "baseline" => Ok(Variant::AllClass),
            "class_specific" | "specific" | "specialist" | "specialists" => Ok(Variant::ClassSpecific),
            "class_conditioned" | "conditioned" | "film" => Ok(Variant::ClassConditioned),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant `{other}` (expected all_class, class_specific or class_conditioned)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub in_channels: usize,
    pub n_mels: usize,
    pub conv_channels: Vec<usize>,
    pub time_pool: Vec<usize>,
    pub freq_pool: Vec<usize>,
    pub gru_hidden: usize,
    pub embedding_dim: usize,
    pub film_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::AllClass,
            num_classes: 8,
            in_channels: 7,
            n_mels: 64,
            conv_channels: vec![64, 64, 64],
            time_pool: vec![5, 1, 1],
            freq_pool: vec![4, 4, 2],
            gru_hidden: 64,
            embedding_dim: 16,
            film_dropout: 0.1,
        }
    }
}

/// Feature frames per label frame.
pub const LABEL_POOL: usize = 5;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let n = self.conv_channels.len();
        if n == 0 || self.time_pool.len() != n || self.freq_pool.len() != n {
            return bad(format!(
                "conv_channels, time_pool and freq_pool must have one entry per block (got {}, {}, {})",
                n,
                self.time_pool.len(),
                self.freq_pool.len()
            ));
        }
        if self.time_pool.iter().product::<usize>() != LABEL_POOL {
            return bad(format!(
                "time pooling {:?} must reduce frames by exactly {LABEL_POOL}",
                self.time_pool
            ));
        }
        if self.conv_channels.contains(&0)
            || self.time_pool.contains(&0)
            || self.freq_pool.contains(&0)
        {
            return bad("block sizes must be positive".into());
        }
        if self.out_bands() == 0 {
            return bad(format!(
                "frequency pooling {:?} leaves no bands of {}",
                self.freq_pool, self.n_mels
            ));
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.gru_hidden == 0 {
            return bad("num_classes, in_channels and gru_hidden must be positive".into());
        }
        if self.variant == Variant::ClassConditioned && self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.film_dropout) {
            return bad(format!("film_dropout {} outside [0, 1)", self.film_dropout));
        }
        Ok(())
    }

    /// Output frames for `frames` input frames.
    pub fn out_frames(&self, frames: usize) -> usize {
        self.time_pool.iter().fold(frames, |t, p| t / p)
    }

    pub fn out_bands(&self) -> usize {
        self.freq_pool.iter().fold(self.n_mels, |f, p| f / p)
    }

    /// ACCDOA tracks emitted by one network of this variant.
    pub fn tracks_per_net(&self) -> usize {
        match self.variant {
            Variant::AllClass => self.num_classes,
            _ => 1,
        }
    }

    pub fn num_nets(&self) -> usize {
        match self.variant {
            Variant::ClassSpecific => self.num_classes,
            _ => 1,
        }
    }
}

/// One-hot class selector `o_c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionVector {
    class_id: usize,
    num_classes: usize,
}

impl ConditionVector {
    pub fn new(class_id: usize, num_classes: usize) -> Result<Self> {
        if class_id >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {class_id} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            class_id,
            num_classes,
        })
    }

    /// Accepts only vectors with a single 1 and zeros elsewhere.
    pub fn from_one_hot(v: &[Scalar]) -> Result<Self> {
        let ones: Vec<usize> = v
            .iter()
            .enumerate()
            .filter(|(_, x)| **x == 1.0)
            .map(|(i, _)| i)
            .collect();
        let zeros = v.iter().filter(|x| **x == 0.0).count();
        if ones.len() != 1 || zeros + 1 != v.len() {
            return Err(Error::InvalidArgument(format!(
                "not a one-hot vector: {v:?}"
            )));
        }
        Self::new(ones[0], v.len())
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn one_hot(&self) -> Vec<Scalar> {
        (0..self.num_classes)
            .map(|i| if i == self.class_id { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Per-block FiLM scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub gamma: Vec<Tensor>,
    pub beta: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct Block {
    kernel: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct FilmIds {
    table: ParamId,
    heads: Vec<(ParamId, ParamId)>,
}

/// One trunk plus head.
#[derive(Debug, Clone)]
pub struct Crnn {
    config: ModelConfig,
    tracks: usize,
    params: ParamStore,
    stats: Vec<RunningStats>,
    blocks: Vec<Block>,
    gru: [[ParamId; 4]; 2],
    head: (ParamId, ParamId),
    film: Option<FilmIds>,
}

fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let d = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| d.sample(rng) as Scalar)
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let d = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape.to_vec(), |_| d.sample(rng) as Scalar)
}

impl Crnn {
    /// He-normal convolutions, uniform `1/sqrt(fan_in)` recurrent and head
    /// weights, standard-normal embedding, zero FiLM heads.
    pub fn new(
        config: &ModelConfig,
        tracks: usize,
        film: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let mut blocks = Vec::new();
        let mut cin = config.in_channels;
        for (b, &cout) in config.conv_channels.iter().enumerate() {
            let fan_in = (cin * 9) as f64;
            blocks.push(Block {
                kernel: p.add(
                    format!("block{b}.conv.weight"),
                    normal(&[cout, cin, 3, 3], (2.0 / fan_in).sqrt(), rng),
                ),
                bias: p.add(format!("block{b}.conv.bias"), Tensor::zeros([cout])),
                gamma: p.add(format!("block{b}.bn.gamma"), Tensor::ones([cout])),
                beta: p.add(format!("block{b}.bn.beta"), Tensor::zeros([cout])),
            });
            cin = cout;
        }
        let h = config.gru_hidden;
        let din = cin * config.out_bands();
        let bound = 1.0 / (h as f64).sqrt();
        let mut dir = |name: &str, p: &mut ParamStore| {
            [
                p.add(
                    format!("gru.{name}.w_ih"),
                    uniform(&[3 * h, din], bound, rng),
                ),
                p.add(format!("gru.{name}.w_hh"), uniform(&[3 * h, h], bound, rng)),
                p.add(format!("gru.{name}.b_ih"), uniform(&[3 * h], bound, rng)),
                p.add(format!("gru.{name}.b_hh"), uniform(&[3 * h], bound, rng)),
            ]
        };
        let gru = [dir("fwd", &mut p), dir("bwd", &mut p)];
        let hb = 1.0 / ((2 * h) as f64).sqrt();
        let head = (
            p.add("head.weight", uniform(&[3 * tracks, 2 * h], hb, rng)),
            p.add("head.bias", uniform(&[3 * tracks], hb, rng)),
        );
        let film = film.then(|| {
            let n = config.embedding_dim;
            let table = p.add("film.embedding", normal(&[config.num_classes, n], 1.0, rng));
            let heads = config
                .conv_channels
                .iter()
                .enumerate()
                .map(|(b, &ch)| {
                    (
                        p.add(format!("film.block{b}.weight"), Tensor::zeros([2 * ch, n])),
                        p.add(format!("film.block{b}.bias"), Tensor::zeros([2 * ch])),
                    )
                })
                .collect();
            FilmIds { table, heads }
        });
        Ok(Self {
            config: config.clone(),
            tracks,
            params: p,
            stats: config
                .conv_channels
                .iter()
                .map(|&c| RunningStats::new(c))
                .collect(),
            blocks,
            gru,
            head,
            film,
        })
    }

    pub fn tracks(&self) -> usize {
        self.tracks
    }

    pub fn is_conditioned(&self) -> bool {
        self.film.is_some()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    /// Id of the class-embedding table, if this network is conditioned.
    pub fn embedding_id(&self) -> Option<ParamId> {
        self.film.as_ref().map(|f| f.table)
    }

    /// Layer shapes of the shared trunk, for checking that variants agree.
    pub fn trunk_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with("block") || p.name.starts_with("gru"))
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }

    fn film_vars(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        classes: &[usize],
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Vec<(Var, Var)>> {
        let f = self.film.as_ref().expect("conditioned network");
        let e = tape.embedding(bound.var(f.table), classes)?;
        let e = tape.dropout(e, self.config.film_dropout as Scalar, training, rng)?;
        let mut out = Vec::with_capacity(f.heads.len());
        for (&(w, b), &ch) in f.heads.iter().zip(&self.config.conv_channels) {
            let gb = tape.linear(e, bound.var(w), Some(bound.var(b)))?;
            let delta = tape.narrow(gb, 1, 0, ch)?;
            let beta = tape.narrow(gb, 1, ch, ch)?;
            let gamma = tape.add_scalar(delta, 1.0);
            out.push((gamma, beta));
        }
        Ok(out)
    }

    /// `x` is `[B, in_channels, T, n_mels]`; the result is `[B, T', 3 * tracks]`.
    /// `classes` holds one conditioning class per batch item and must be
    /// given exactly when the network is conditioned.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        classes: Option<&[usize]>,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[3] != self.config.n_mels
        {
            return Err(Error::Shape(format!(
                "network input must be [B, {}, T, {}], got {shape:?}",
                self.config.in_channels, self.config.n_mels
            )));
        }
        let batch = shape[0];
        let film = match (classes, self.film.is_some()) {
            (Some(c), true) => {
                if c.len() != batch {
                    return Err(Error::Shape(format!(
                        "{} conditioning classes for batch of {batch}",
                        c.len()
                    )));
                }
                Some(self.film_vars(tape, bound, c, training, rng)?)
            }
            (None, false) => None,
            (Some(_), false) => {
                return Err(Error::InvalidArgument("network is not conditioned".into()))
            }
            (None, true) => {
                return Err(Error::InvalidArgument(
                    "conditioned network needs classes".into(),
                ))
            }
        };
        let mut h = x;
        for (i, blk) in self.blocks.iter().enumerate() {
            h = tape.conv2d(h, bound.var(blk.kernel), bound.var(blk.bias), (1, 1))?;
            h = tape.batch_norm(
                h,
                bound.var(blk.gamma),
                bound.var(blk.beta),
                &mut self.stats[i],
                training,
            )?;
            if let Some(f) = &film {
                h = tape.film(h, f[i].0, f[i].1)?;
            }
            h = tape.relu(h);
            h = tape.max_pool2d(h, (self.config.time_pool[i], self.config.freq_pool[i]))?;
        }
        let s = tape.shape(h).to_vec();
        let (t, feat) = (s[2], s[1] * s[3]);
        h = tape.permute(h, &[0, 2, 1, 3])?;
        h = tape.reshape(h, &[batch, t, feat])?;
        let g = |ids: &[ParamId; 4]| GruParams {
            w_ih: bound.var(ids[0]),
            w_hh: bound.var(ids[1]),
            b_ih: bound.var(ids[2]),
            b_hh: bound.var(ids[3]),
        };
        h = tape.gru_bidirectional(h, g(&self.gru[0]), g(&self.gru[1]))?;
        h = tape.linear(h, bound.var(self.head.0), Some(bound.var(self.head.1)))?;
        Ok(tape.tanh(h))
    }

    /// Evaluation-mode FiLM parameters for one class.
    pub fn film_params(&self, cond: ConditionVector) -> Result<FilmParams> {
        if self.film.is_none() {
            return Err(Error::InvalidArgument("network is not conditioned".into()));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let vars = self.film_vars(
            &mut tape,
            &bound,
            &[cond.class_id()],
            false,
            &mut derived_rng(0, 0),
        )?;
        let take = |v: Var, tape: &Tape| {
            tape.value(v)
                .clone()
                .reshape([tape.value(v).len()])
                .expect("flat")
        };
        Ok(FilmParams {
            gamma: vars.iter().map(|(g, _)| take(*g, &tape)).collect(),
            beta: vars.iter().map(|(_, b)| take(*b, &tape)).collect(),
        })
    }

    /// Evaluation-mode forward pass returning `[B, T', 3 * tracks]`.
    pub fn infer(&mut self, x: &Tensor, classes: Option<&[usize]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(
            &mut tape,
            &bound,
            xv,
            classes,
            false,
            &mut derived_rng(0, 0),
        )?;
        Ok(tape.value(y).clone())
    }
}

/// A trained or freshly initialized localizer of any variant.
#[derive(Debug, Clone)]
pub struct SeldModel {
    config: ModelConfig,
    nets: Vec<Crnn>,
}

impl SeldModel {
    /// Specialist `c` is initialized from its own stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tracks = config.tracks_per_net();
        let film = config.variant == Variant::ClassConditioned;
        let nets = (0..config.num_nets())
            .map(|i| {
                Crnn::new(
                    &config,
                    tracks,
                    film,
                    &mut derived_rng(seed, 1000 + i as u64),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, nets })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn nets(&self) -> &[Crnn] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [Crnn] {
        &mut self.nets
    }

    pub fn num_parameters(&self) -> usize {
        self.nets.iter().map(|n| n.params().num_elements()).sum()
    }

    fn check_batch(&self, x: &Tensor) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "batch must be [B, C, T, F], got {s:?}"
            )));
        }
        Ok((s[0], self.config.out_frames(s[2])))
    }

    /// Single-track prediction for `class`, `[B][T', 1, 3]`. Not available for
    /// the all-class network, whose tracks come from `predict`.
    pub fn predict_class(&mut self, x: &Tensor, class: usize) -> Result<Vec<AccdoaTensor>> {
        ConditionVector::new(class, self.config.num_classes)?;
        let (b, tp) = self.check_batch(x)?;
        let y = match self.config.variant {
            Variant::AllClass => {
                return Err(Error::InvalidArgument(
                    "all-class model has no single-class pass".into(),
                ))
            }
            Variant::ClassSpecific => self.nets[class].infer(x, None)?,
            Variant::ClassConditioned => self.nets[0].infer(x, Some(&vec![class; b]))?,
        };
        split_items(y, b, tp, 1)
    }

    /// Full `[T', C, 3]` prediction per batch item, in evaluation mode.
    pub fn predict(&mut self, x: &Tensor) -> Result<Vec<AccdoaTensor>> {
        let (b, tp) = self.check_batch(x)?;
        let c = self.config.num_classes;
        match self.config.variant {
            Variant::AllClass => {
                let y = self.nets[0].infer(x, None)?;
                split_items(y, b, tp, c)
            }
            Variant::ClassSpecific => {
                let per_class: Vec<Vec<AccdoaTensor>> = (0..c)
                    .map(|k| self.predict_class(x, k))
                    .collect::<Result<_>>()?;
                (0..b)
                    .map(|i| {
                        let slices: Vec<Tensor> =
                            per_class.iter().map(|p| p[i].tensor().clone()).collect();
                        AccdoaTensor::from_class_slices(&slices)
                    })
                    .collect()
            }
            Variant::ClassConditioned => {
                // The C conditioning passes of one clip run as a single batch.
                let item = x.len() / b.max(1);
                let mut out = Vec::with_capacity(b);
                for i in 0..b {
                    let one = &x.data()[i * item..(i + 1) * item];
                    let mut shape = x.shape().to_vec();
                    shape[0] = c;
                    let rep = Tensor::new(shape, one.repeat(c))?;
                    let classes: Vec<usize> = (0..c).collect();
                    let y = self.nets[0].infer(&rep, Some(&classes))?;
                    let slices: Vec<Tensor> = (0..c)
                        .map(|k| {
                            Tensor::new([tp, 3], y.data()[k * tp * 3..(k + 1) * tp * 3].to_vec())
                        })
                        .collect::<Result<_>>()?;
                    out.push(AccdoaTensor::from_class_slices(&slices)?);
                }
                Ok(out)
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::new();
        c.metadata.insert("format".into(), MODEL_FORMAT.into());
        c.metadata
            .insert("variant".into(), self.config.variant.as_str().into());
        c.metadata
            .insert("config".into(), toml::to_string(&self.config)?);
        let classes: Vec<String> = (0..self.config.num_classes)
            .map(|k| format!("class_{k}"))
            .collect();
        c.metadata.insert("classes".into(), classes.join(","));
        for (i, net) in self.nets.iter().enumerate() {
            for p in net.params().iter() {
                c.insert(format!("net{i}/{}", p.name), p.value.clone());
            }
            for (b, s) in net.stats.iter().enumerate() {
                let v = |x: &[Scalar]| Tensor::new([x.len()], x.to_vec());
                c.insert(format!("net{i}/block{b}.bn.running_mean"), v(&s.mean)?);
                c.insert(format!("net{i}/block{b}.bn.running_var"), v(&s.var)?);
            }
        }
        c.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut c = Container::load(path)?;
        let meta = |k: &str| {
            c.metadata.get(k).cloned().ok_or_else(|| {
                Error::Checkpoint(format!("{}: missing `{k}` in manifest", path.display()))
            })
        };
        if meta("format")? != MODEL_FORMAT {
            return Err(Error::Checkpoint(format!(
                "{}: not a model checkpoint",
                path.display()
            )));
        }
        let config: ModelConfig = toml::from_str(&meta("config")?)?;
        let mut model = Self::new(config, 0)?;
        for (i, net) in model.nets.iter_mut().enumerate() {
            for p in net.params.iter_mut() {
                let name = format!("net{i}/{}", p.name);
                let t = c.take(&name).ok_or_else(|| {
                    Error::Checkpoint(format!("{}: missing tensor {name}", path.display()))
                })?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: stored shape {:?}, expected {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                p.value = t;
            }
            for (b, s) in net.stats.iter_mut().enumerate() {
                for (suffix, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
                    let name = format!("net{i}/block{b}.bn.{suffix}");
                    let t = c.take(&name).ok_or_else(|| {
                        Error::Checkpoint(format!("{}: missing tensor {name}", path.display()))
                    })?;
                    if t.len() != dst.len() {
                        return Err(Error::Checkpoint(format!(
                            "{name}: wrong length {}",
                            t.len()
                        )));
                    }
                    *dst = t.into_data();
                }
            }
        }
        Ok(model)
    }
}

fn split_items(y: Tensor, batch: usize, frames: usize, tracks: usize) -> Result<Vec<AccdoaTensor>> {
    let item = frames * tracks * 3;
    if y.len() != batch * item {
        return Err(Error::Shape(format!(
            "network output {:?} does not hold {batch} x [{frames}, {tracks}, 3]",
            y.shape()
        )));
    }
    (0..batch)
        .map(|i| {
            let t = Tensor::new(
                [frames, tracks, 3],
                y.data()[i * item..(i + 1) * item].to_vec(),
            )?;
            AccdoaTensor::from_tensor(t)
        })
        .collect()
}
