//! Encoder-decoder segmentation network and its training loop.
//!
//! The encoder runs one point convolution per stage and randomly
//! subsamples the cloud between stages. The decoder walks back up: each
//! fine point copies the features of its nearest coarse point, these are
//! concatenated with the encoder features of the same level, and a linear
//! layer brings them back to that level's width. Two fully connected
//! layers map the finest features to class logits.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::split_indices;
use crate::error::{Error, Result};
use crate::geometry::{knn, nearest_upsample, random_subsample, NeighborIndex, PointCloud};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::nn::{mix_seed, Bound, Init, Linear, ParamGroup, ParamId, ParamStore, LEAKY_SLOPE};
use crate::optim::Adam;
use crate::stpc::{init_atoms, Aggregation, EncodingCoefficients, IsotropicLayer, LayerShape, StpcLayerParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Name of the initial dictionary parameter.
pub const INITIAL_ATOMS: &str = "dictionary.initial";

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub stages: usize,
    /// Output width of each encoder stage.
    pub widths: Vec<usize>,
    /// Neighbors per point (clamped to the point count of small levels).
    pub k: usize,
    pub atoms: usize,
    pub atom_dim: usize,
    pub tau: f64,
    /// Subsampling ratio between consecutive stages.
    pub ratio: usize,
    pub lambda_dict: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub dict_lr_mult: f64,
    pub epochs: usize,
    pub seed: u64,
    pub classes: usize,
    pub in_channels: usize,
    pub relative_coords: bool,
    pub head_width: usize,
    pub aggregation: Aggregation,
}

impl Default for NetworkConfig {
    /// Two-stage desk configuration.
    fn default() -> Self {
        NetworkConfig {
            stages: 2,
            widths: vec![32, 64],
            k: 16,
            atoms: 25,
            atom_dim: 16,
            tau: crate::stpc::DEFAULT_TAU,
            ratio: 4,
            lambda_dict: 0.1,
            lr: 0.01,
            lr_decay: 0.95,
            dict_lr_mult: 0.01,
            epochs: 200,
            seed: 0,
            classes: 3,
            in_channels: 0,
            relative_coords: false,
            head_width: 64,
            aggregation: Aggregation::Anisotropic,
        }
    }
}

fn parse<T: std::str::FromStr>(field: &'static str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(field, format!("cannot parse `{value}`")))
}

fn parse_bool(field: &'static str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(field, format!("expected true or false, found `{value}`"))),
    }
}

pub(crate) fn parse_list<T: std::str::FromStr>(field: &'static str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(field, s))
        .collect()
}

impl NetworkConfig {
    /// Five stages with widths 32 … 512.
    pub fn five_stage() -> Self {
        NetworkConfig {
            stages: 5,
            widths: vec![32, 64, 128, 256, 512],
            ..NetworkConfig::default()
        }
    }

    pub const KEYS: [&'static str; 18] = [
        "stages",
        "widths",
        "k",
        "atoms",
        "atom_dim",
        "tau",
        "ratio",
        "lambda_dict",
        "lr",
        "lr_decay",
        "dict_lr_mult",
        "epochs",
        "seed",
        "classes",
        "in_channels",
        "relative_coords",
        "head_width",
        "aggregation",
    ];

    /// Sets one field from its text form. Returns `Ok(false)` for a key
    /// that is not a network setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "stages" => self.stages = parse("stages", value)?,
            "widths" => self.widths = parse_list("widths", value)?,
            "k" => self.k = parse("k", value)?,
            "atoms" => self.atoms = parse("atoms", value)?,
            "atom_dim" => self.atom_dim = parse("atom_dim", value)?,
            "tau" => self.tau = parse("tau", value)?,
            "ratio" => self.ratio = parse("ratio", value)?,
            "lambda_dict" => self.lambda_dict = parse("lambda_dict", value)?,
            "lr" => self.lr = parse("lr", value)?,
            "lr_decay" => self.lr_decay = parse("lr_decay", value)?,
            "dict_lr_mult" => self.dict_lr_mult = parse("dict_lr_mult", value)?,
            "epochs" => self.epochs = parse("epochs", value)?,
            "seed" => self.seed = parse("seed", value)?,
            "classes" => self.classes = parse("classes", value)?,
            "in_channels" => self.in_channels = parse("in_channels", value)?,
            "relative_coords" => self.relative_coords = parse_bool("relative_coords", value)?,
            "head_width" => self.head_width = parse("head_width", value)?,
            "aggregation" => self.aggregation = value.trim().parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every field as `(key, value)` text, in [`Self::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let widths: Vec<String> = self.widths.iter().map(ToString::to_string).collect();
        vec![
            ("stages", self.stages.to_string()),
            ("widths", widths.join(",")),
            ("k", self.k.to_string()),
            ("atoms", self.atoms.to_string()),
            ("atom_dim", self.atom_dim.to_string()),
            ("tau", self.tau.to_string()),
            ("ratio", self.ratio.to_string()),
            ("lambda_dict", self.lambda_dict.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("dict_lr_mult", self.dict_lr_mult.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("classes", self.classes.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("relative_coords", self.relative_coords.to_string()),
            ("head_width", self.head_width.to_string()),
            ("aggregation", self.aggregation.to_string()),
        ]
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// Inverse of [`Self::to_text`]; unknown keys are an error.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = NetworkConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config("config", format!("expected `key = value`, found `{line}`")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::config("config", format!("unknown key `{}`", k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stages", self.stages),
            ("k", self.k),
            ("atoms", self.atoms),
            ("atom_dim", self.atom_dim),
            ("ratio", self.ratio),
            ("classes", self.classes),
            ("head_width", self.head_width),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.widths.len() != self.stages {
            return Err(Error::config(
                "widths",
                format!("{} widths given for {} stages", self.widths.len(), self.stages),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("widths", "every width must be at least 1"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay", "must lie in (0, 1]"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.dict_lr_mult.is_finite() && self.dict_lr_mult >= 0.0) {
            return Err(Error::config("dict_lr_mult", "must be non-negative"));
        }
        if !(self.lambda_dict.is_finite() && self.lambda_dict >= 0.0) {
            return Err(Error::config("lambda_dict", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::config("tau", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Global learning rate of `epoch` (0-based): `lr · decay^epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }

    /// Learning rate of the dictionary parameters in `epoch`.
    pub fn dictionary_learning_rate(&self, epoch: usize) -> f64 {
        self.learning_rate(epoch) * self.dict_lr_mult
    }
}

/// One encoder stage.
#[derive(Debug, Clone, Copy)]
pub enum EncoderStage {
    Stpc(StpcLayerParams),
    Isotropic(IsotropicLayer),
}

/// Points, neighborhoods and resampling maps of every encoder level.
#[derive(Debug, Clone)]
pub struct Level {
    pub coords: Vec<[f64; 3]>,
    pub neighbors: NeighborIndex,
    /// Rows of the previous level kept in this one (empty for level 0).
    pub parent_index: Vec<usize>,
    /// For each point of the previous level, its nearest point here.
    pub upsample: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub levels: Vec<Level>,
}

impl Hierarchy {
    /// Level 0 is the input; each further level keeps `⌈n/ratio⌉` random
    /// points of the one before. Neighborhoods use `min(k, n)` points.
    pub fn build(coords: &[[f64; 3]], stages: usize, k: usize, ratio: usize, sample_seed: u64) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        let mut levels: Vec<Level> = Vec::with_capacity(stages);
        levels.push(Level {
            coords: coords.to_vec(),
            neighbors: knn(coords, k.min(coords.len()))?,
            parent_index: Vec::new(),
            upsample: Vec::new(),
        });
        for s in 1..stages {
            let prev = &levels[s - 1].coords;
            let keep = random_subsample(prev.len(), ratio, mix_seed(&[sample_seed, s as u64]));
            let here: Vec<[f64; 3]> = keep.iter().map(|&i| prev[i]).collect();
            let upsample = nearest_upsample(&here, prev)?;
            levels.push(Level {
                neighbors: knn(&here, k.min(here.len()))?,
                coords: here,
                parent_index: keep,
                upsample,
            });
        }
        Ok(Hierarchy { levels })
    }
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[N × C]`, one row per input point.
    pub logits: Var,
    /// One term per point convolution stage.
    pub decorrelation: Vec<Var>,
    pub coefficients: Vec<EncodingCoefficients>,
    pub hierarchy: Hierarchy,
}

#[derive(Debug, Clone)]
pub struct SegModel {
    config: NetworkConfig,
    store: ParamStore,
    initial_atoms: Option<ParamId>,
    encoder: Vec<EncoderStage>,
    decoder: Vec<Linear>,
    head: [Linear; 2],
}

impl SegModel {
    /// Builds the network with parameters drawn from `config.seed`.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let init = Init { seed: config.seed };
        let mut store = ParamStore::new();
        let anisotropic = config.aggregation == Aggregation::Anisotropic;
        let initial_atoms = anisotropic.then(|| {
            let a0 = init_atoms(init, INITIAL_ATOMS, config.atoms, config.atom_dim);
            store.add(INITIAL_ATOMS, a0, ParamGroup::Dictionary)
        });

        let mut encoder = Vec::with_capacity(config.stages);
        let mut in_channels = config.in_channels;
        for (s, &width) in config.widths.iter().enumerate() {
            let name = format!("encoder.{s}");
            let shape = LayerShape {
                in_channels,
                features: width,
                outputs: width,
                atoms: config.atoms,
                atom_dim: config.atom_dim,
            };
            encoder.push(if anisotropic {
                EncoderStage::Stpc(StpcLayerParams::new(&mut store, init, &name, shape, config.tau, config.relative_coords))
            } else {
                EncoderStage::Isotropic(IsotropicLayer::new(
                    &mut store,
                    init,
                    &name,
                    shape,
                    config.aggregation,
                    config.k,
                    config.relative_coords,
                )?)
            });
            in_channels = width;
        }

        let decoder = (0..config.stages - 1)
            .map(|s| {
                let inputs = config.widths[s + 1] + config.widths[s];
                Linear::new(&mut store, init, &format!("decoder.{s}"), inputs, config.widths[s], ParamGroup::Network)
            })
            .collect();
        let head = [
            Linear::new(&mut store, init, "head.0", config.widths[0], config.head_width, ParamGroup::Network),
            Linear::new(&mut store, init, "head.1", config.head_width, config.classes, ParamGroup::Network),
        ];
        Ok(SegModel {
            config,
            store,
            initial_atoms,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Changes the epoch budget (e.g. to extend a resumed run).
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &[EncoderStage] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[Linear] {
        &self.decoder
    }

    pub fn head(&self) -> &[Linear; 2] {
        &self.head
    }

    pub fn initial_atoms(&self) -> Option<ParamId> {
        self.initial_atoms
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, cloud: &PointCloud, sample_seed: u64) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if cloud.channels() != cfg.in_channels {
            return Err(Error::ShapeMismatch {
                op: "forward: input channels",
                lhs: vec![cloud.channels()],
                rhs: vec![cfg.in_channels],
            });
        }
        let hierarchy = Hierarchy::build(cloud.coords(), cfg.stages, cfg.k, cfg.ratio, sample_seed)?;
        let mut feats = if cfg.in_channels > 0 {
            Some(tape.constant(Tensor::new(vec![cloud.len(), cfg.in_channels], cloud.attrs().to_vec())?))
        } else {
            None
        };
        let mut atoms = self.initial_atoms.map(|id| bound.var(id));
        let mut decorrelation = Vec::new();
        let mut coefficients = Vec::new();
        let mut skips = Vec::with_capacity(cfg.stages);

        for (stage, level) in self.encoder.iter().zip(&hierarchy.levels) {
            if let (Some(f), false) = (feats, level.parent_index.is_empty()) {
                feats = Some(tape.gather_rows(f, &level.parent_index)?);
            }
            let y = match stage {
                EncoderStage::Stpc(layer) => {
                    let prev = atoms.ok_or(Error::Empty("dictionary"))?;
                    let out = layer.forward(tape, bound, &level.coords, feats, &level.neighbors, prev)?;
                    atoms = Some(out.atoms);
                    decorrelation.push(out.decorrelation);
                    coefficients.push(out.coefficients);
                    out.features
                }
                EncoderStage::Isotropic(layer) => {
                    if layer.mode == Aggregation::Unordered && level.neighbors.k() < cfg.k {
                        return Err(Error::TooFewPoints {
                            k: cfg.k,
                            n: level.coords.len(),
                        });
                    }
                    layer.forward(tape, bound, &level.coords, feats, &level.neighbors)?
                }
            };
            let y = tape.leaky_relu(y, LEAKY_SLOPE);
            skips.push(y);
            feats = Some(y);
        }

        let mut g = skips[cfg.stages - 1];
        for s in (0..cfg.stages - 1).rev() {
            let up = tape.gather_rows(g, &hierarchy.levels[s + 1].upsample)?;
            let cat = tape.concat(&[up, skips[s]])?;
            let y = self.decoder[s].forward(tape, bound, cat)?;
            g = tape.leaky_relu(y, LEAKY_SLOPE);
        }
        let h = self.head[0].forward(tape, bound, g)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let logits = self.head[1].forward(tape, bound, h)?;
        Ok(ForwardOutput {
            logits,
            decorrelation,
            coefficients,
            hierarchy,
        })
    }

    /// Arg-max labels (ties to the lower class) using frozen parameters.
    pub fn predict(&self, cloud: &PointCloud, sample_seed: u64) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, cloud, sample_seed)?;
        Ok(argmax_rows(tape.value(out.logits)))
    }

    /// Seed used for the sampling of cloud `i` at evaluation time.
    pub fn eval_seed(&self, i: usize) -> u64 {
        mix_seed(&[self.config.seed, u64::MAX, i as u64])
    }

    /// Confusion matrix over every point of `clouds`.
    pub fn confusion(&self, clouds: &[PointCloud]) -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::new(self.config.classes);
        for (i, cloud) in clouds.iter().enumerate() {
            let truth = cloud.labels().ok_or(Error::Empty("labels"))?;
            let pred = self.predict(cloud, self.eval_seed(i))?;
            cm.accumulate(truth, &pred, None)?;
        }
        Ok(cm)
    }

    pub fn evaluate(&self, clouds: &[PointCloud]) -> Result<Metrics> {
        if clouds.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        self.confusion(clouds)?.report()
    }

    /// Per-parameter learning rates for `epoch`.
    pub fn learning_rates(&self, epoch: usize) -> Vec<f64> {
        let net = self.config.learning_rate(epoch);
        let dict = self.config.dictionary_learning_rate(epoch);
        self.store
            .params()
            .iter()
            .map(|p| match p.group {
                ParamGroup::Network => net,
                ParamGroup::Dictionary => dict,
            })
            .collect()
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `cross_entropy + λ · Σ decorrelation`.
pub fn loss(tape: &mut Tape, logits: Var, labels: &[usize], decorrelation: &[Var], lambda_dict: f64) -> Result<Var> {
    let ce = tape.cross_entropy(logits, labels, None)?;
    if lambda_dict == 0.0 || decorrelation.is_empty() {
        return Ok(ce);
    }
    let mut reg = decorrelation[0];
    for &d in &decorrelation[1..] {
        reg = tape.add(reg, d)?;
    }
    let reg = tape.scale(reg, lambda_dict);
    tape.add(ce, reg)
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    /// Scores on the held-out split after the epoch.
    pub metrics: Metrics,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} lr={} loss={} oa={} macc={} miou={}",
            self.epoch, self.lr, self.loss, self.metrics.oa, self.metrics.macc, self.metrics.miou
        )
    }
}

/// Model plus optimizer state; everything needed to resume exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: SegModel,
    pub adam: Adam,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(model: SegModel) -> Self {
        let adam = Adam::new(model.params().params().iter().map(|p| p.tensor.len()));
        TrainState {
            model,
            adam,
            epochs_done: 0,
        }
    }

    /// One Adam step on one cloud; returns the loss before the step.
    pub fn step(&mut self, cloud: &PointCloud, sample_seed: u64, epoch: usize) -> Result<f64> {
        let labels = cloud.labels().ok_or(Error::Empty("labels"))?;
        let mut tape = Tape::new();
        let bound = self.model.store.bind(&mut tape);
        let out = self.model.forward(&mut tape, &bound, cloud, sample_seed)?;
        let total = loss(&mut tape, out.logits, labels, &out.decorrelation, self.model.config.lambda_dict)?;
        tape.backward(total)?;
        let value = tape.value(total).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let zeros: Vec<Vec<f64>> = self
            .model
            .store
            .params()
            .iter()
            .map(|p| vec![0.0; p.tensor.len()])
            .collect();
        let grads: Vec<&[f64]> = bound
            .vars()
            .iter()
            .zip(&zeros)
            .map(|(&v, z)| tape.grad(v).unwrap_or(z))
            .collect();
        let lrs = self.model.learning_rates(epoch);
        let params = self.model.store.params_mut().iter_mut().map(|p| &mut p.tensor);
        self.adam.step(params, &grads, &lrs)?;
        Ok(value)
    }

    /// Runs epoch `self.epochs_done` over `train` in a seeded order and
    /// returns the mean loss.
    pub fn train_epoch(&mut self, train: &[PointCloud]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let epoch = self.epochs_done;
        let seed = self.model.config.seed;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64])));
        let mut sum = 0.0;
        for &i in &order {
            sum += self.step(&train[i], mix_seed(&[seed, epoch as u64, i as u64]), epoch)?;
        }
        self.epochs_done += 1;
        Ok(sum / train.len() as f64)
    }
}

/// Checks that every cloud carries in-range labels and the right channels.
pub fn check_dataset(config: &NetworkConfig, clouds: &[PointCloud]) -> Result<()> {
    if clouds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    for cloud in clouds {
        if cloud.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        if cloud.channels() != config.in_channels {
            return Err(Error::config(
                "in_channels",
                format!("dataset has {} channels, model expects {}", cloud.channels(), config.in_channels),
            ));
        }
        let labels = cloud.labels().ok_or(Error::Empty("labels"))?;
        if let Some(&label) = labels.iter().find(|&&l| l >= config.classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: config.classes,
            });
        }
    }
    Ok(())
}

/// Trains until `config.epochs` epochs are done, scoring the held-out
/// split after each one. `on_epoch` sees every record and may stop the
/// run early by returning `false`.
pub fn train(
    state: &mut TrainState,
    clouds: &[PointCloud],
    mut on_epoch: impl FnMut(&EpochRecord, &TrainState) -> Result<bool>,
) -> Result<Vec<EpochRecord>> {
    check_dataset(&state.model.config, clouds)?;
    let (train_idx, held_idx) = split_indices(clouds.len());
    let train_set: Vec<PointCloud> = train_idx.iter().map(|&i| clouds[i].clone()).collect();
    let held_set: Vec<PointCloud> = held_idx.iter().map(|&i| clouds[i].clone()).collect();
    let mut records = Vec::new();
    while state.epochs_done < state.model.config.epochs {
        let epoch = state.epochs_done;
        let loss = state.train_epoch(&train_set)?;
        let record = EpochRecord {
            epoch,
            lr: state.model.config.learning_rate(epoch),
            loss,
            metrics: state.model.evaluate(&held_set)?,
        };
        let go_on = on_epoch(&record, state)?;
        records.push(record);
        if !go_on {
            break;
        }
    }
    Ok(records)
}
