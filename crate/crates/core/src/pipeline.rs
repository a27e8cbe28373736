//! End-to-end complexity classifier and its training loop.
//!
//! Twelve keyframe heat maps run through the spatial extractor; each
//! `[1, w, h]` output flattens into one token of the camera encoder. The
//! normalized dynamics window runs through the dynamics extractor. Both
//! `[1, 200]` features are concatenated and classified by a two-layer head.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{EncoderConfig, EncoderStack};
use crate::dynamics::{normalize_window, ChannelStats, DynamicsConfig, DynamicsExtractor, DynamicsWindow, CHANNELS};
use crate::error::{Error, Result};
use crate::heatmap::{render_heatmap, Detection, HeatMap};
use crate::nn::{checkpoint, softmax_in_place, Adam, AdamConfig, Graph, ParamId, ParamStore, Tensor, Var};
use crate::spatial::{heatmaps_to_tensor, SpatialConfig, SpatialExtractor};

pub const NUM_CLASSES: usize = 5;
pub const KEYFRAMES: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Detections of the twelve keyframes, in time order, in source-frame
    /// pixel coordinates.
    pub keyframes: Vec<Vec<Detection>>,
    /// Raw (unnormalized) dynamics window.
    pub dynamics: DynamicsWindow,
    pub label: usize,
    /// Whether the vehicle was driving. Stored for filtering only.
    pub moving: bool,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.keyframes.len() != KEYFRAMES {
            return Err(Error::MissingKeyframe {
                found: self.keyframes.len(),
                expected: KEYFRAMES,
            });
        }
        if self.label >= NUM_CLASSES {
            return Err(Error::InvalidLabel(self.label));
        }
        self.dynamics.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityPrediction {
    pub probabilities: [f64; NUM_CLASSES],
    pub predicted_class: usize,
}

impl ComplexityPrediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut p = [0.0; NUM_CLASSES];
        p.copy_from_slice(&logits[..NUM_CLASSES]);
        softmax_in_place(&mut p);
        ComplexityPrediction {
            probabilities: p,
            predicted_class: argmax(&p),
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub spatial: SpatialConfig,
    pub camera: EncoderConfig,
    pub dynamics: DynamicsConfig,
    pub head_hidden: usize,
    /// Source frame size the detection coordinates refer to.
    pub frame_width: f64,
    pub frame_height: f64,
    /// Multiplier applied to heat-map values before the spatial extractor.
    pub heatmap_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_spatial(SpatialConfig::default(), DynamicsConfig::default())
    }
}

impl ModelConfig {
    fn with_spatial(spatial: SpatialConfig, dynamics: DynamicsConfig) -> Self {
        let camera = EncoderConfig::new(KEYFRAMES, spatial.feature_len());
        ModelConfig {
            spatial,
            camera,
            dynamics,
            head_hidden: 64,
            frame_width: 1280.0,
            frame_height: 720.0,
            heatmap_scale: 0.1,
        }
    }

    /// Default model at another heat-map resolution. The camera encoder's
    /// token width follows the spatial output grid.
    pub fn for_heatmap(width: usize, height: usize) -> Self {
        let spatial = SpatialConfig {
            input_width: width,
            input_height: height,
            ..SpatialConfig::default()
        };
        Self::with_spatial(spatial, DynamicsConfig::default())
    }

    /// Full topology at toy sizes: 16x9 heat maps, 16-sample windows.
    pub fn miniature() -> Self {
        let mut c = Self::with_spatial(SpatialConfig::miniature(), DynamicsConfig::miniature());
        c.camera.d_k = 3;
        c.camera.mlp_hidden = 5;
        c.camera.depth = 2;
        c.head_hidden = 6;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.spatial.output_extents();
        if w == 0 || h == 0 {
            return Err(Error::Config("heat map too small for the stem".into()));
        }
        if self.camera.tokens != KEYFRAMES || self.camera.d_model != w * h {
            return Err(Error::Config(format!(
                "camera encoder expects [{}x{}], spatial path gives [{KEYFRAMES}x{}]",
                self.camera.tokens,
                self.camera.d_model,
                w * h
            )));
        }
        if !(self.frame_width > 0.0 && self.frame_height > 0.0) {
            return Err(Error::Config("frame size must be positive".into()));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head width must be positive".into()));
        }
        self.camera.validate()?;
        self.dynamics.validate()
    }

    pub fn fused_len(&self) -> usize {
        self.camera.out_dim + self.dynamics.encoder.out_dim
    }
}

/// Nodes of one end-to-end forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    /// `[12, 1, w, h]`.
    pub spatial: Var,
    /// `[1, 200]`.
    pub camera: Var,
    /// `[1, 200]`.
    pub dynamics: Var,
    /// `[1, 400]`.
    pub fused: Var,
    /// `[1, 5]`.
    pub logits: Var,
    pub probabilities: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub store: ParamStore,
    spatial: SpatialExtractor,
    camera: EncoderStack,
    dynamics: DynamicsExtractor,
    head: [(ParamId, ParamId); 2],
    norm_mean: ParamId,
    norm_std: ParamId,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let spatial = SpatialExtractor::new(config.spatial.clone(), "spatial", &mut store, &mut rng);
        let camera = EncoderStack::new(config.camera.clone(), "camera", &mut store, &mut rng)?;
        let dynamics = DynamicsExtractor::new(config.dynamics.clone(), "dynamics", &mut store, &mut rng)?;
        let fused = config.fused_len();
        let hid = config.head_hidden;
        let head = [
            (
                store.add_glorot("head.dense0.w", &[fused, hid], fused, hid, &mut rng),
                store.add_zeros("head.dense0.b", &[hid]),
            ),
            (
                store.add_glorot("head.dense1.w", &[hid, NUM_CLASSES], hid, NUM_CLASSES, &mut rng),
                store.add_zeros("head.dense1.b", &[NUM_CLASSES]),
            ),
        ];
        let norm_mean = store.add_frozen("norm.mean", Tensor::zeros(&[CHANNELS]));
        let norm_std = store.add_frozen("norm.std", Tensor::filled(&[CHANNELS], 1.0));
        Ok(Model {
            config,
            store,
            spatial,
            camera,
            dynamics,
            head,
            norm_mean,
            norm_std,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn normalization(&self) -> ChannelStats {
        let mut stats = ChannelStats::default();
        stats.mean.copy_from_slice(self.store.get(self.norm_mean).value.data());
        stats.std.copy_from_slice(self.store.get(self.norm_std).value.data());
        stats
    }

    pub fn set_normalization(&mut self, stats: &ChannelStats) {
        self.store.get_mut(self.norm_mean).value.data_mut().copy_from_slice(&stats.mean);
        self.store.get_mut(self.norm_std).value.data_mut().copy_from_slice(&stats.std);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    /// Replaces every parameter with the checkpoint's values.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        checkpoint::load_into(path, &mut self.store)
    }

    /// Renders the keyframes at the spatial input resolution.
    pub fn render_keyframes(&self, sample: &Sample) -> Result<Vec<HeatMap>> {
        sample.validate()?;
        let (w, h) = (self.config.spatial.input_width, self.config.spatial.input_height);
        let sx = w as f64 / self.config.frame_width;
        let sy = h as f64 / self.config.frame_height;
        Ok(sample
            .keyframes
            .iter()
            .map(|dets| {
                let scaled: Vec<Detection> = dets.iter().map(|d| d.scaled(sx, sy)).collect();
                render_heatmap(&scaled, w, h)
            })
            .collect())
    }

    /// Model inputs of one sample: `[12, 1, w, h]` heat maps and the
    /// normalized `[4, len]` dynamics window.
    pub fn prepare(&self, sample: &Sample) -> Result<(Tensor, Tensor)> {
        let maps = self.render_keyframes(sample)?;
        let images = heatmaps_to_tensor(&maps, self.config.heatmap_scale)?;
        let window = normalize_window(&sample.dynamics, &self.normalization())?;
        Ok((images, window.to_tensor()?))
    }

    pub fn forward_traced(&self, g: &mut Graph, images: Var, window: Var) -> Result<ForwardTrace> {
        let spatial = self.spatial.forward(g, &self.store, images)?;
        let tokens = g.reshape(spatial, &[KEYFRAMES, self.config.camera.d_model])?;
        let camera = self.camera.encode(g, &self.store, tokens)?;
        let dynamics = self.dynamics.forward(g, &self.store, window)?;
        let fused = g.concat(&[camera, dynamics], 1)?;
        let mut h = fused;
        for (i, &(w, b)) in self.head.iter().enumerate() {
            let w = g.param(&self.store, w);
            let b = g.param(&self.store, b);
            h = g.dense(h, w, b)?;
            if i == 0 {
                h = g.relu(h);
            }
        }
        let probabilities = g.softmax(h);
        Ok(ForwardTrace {
            spatial,
            camera,
            dynamics,
            fused,
            logits: h,
            probabilities,
        })
    }

    pub fn forward(&self, sample: &Sample) -> Result<ComplexityPrediction> {
        let (images, window) = self.prepare(sample)?;
        let mut g = Graph::new();
        let x = g.input(images);
        let d = g.input(window);
        let trace = self.forward_traced(&mut g, x, d)?;
        Ok(ComplexityPrediction::from_logits(g.value(trace.logits).data()))
    }

    /// Records a forward pass and the cross-entropy loss of `sample`.
    fn loss(&self, g: &mut Graph, sample: &Sample, weight: f64) -> Result<Var> {
        let (images, window) = self.prepare(sample)?;
        let x = g.input(images);
        let d = g.input(window);
        let trace = self.forward_traced(g, x, d)?;
        g.cross_entropy(trace.logits, sample.label, weight)
    }

    /// Accumulates `scale * d loss / d params` for one sample and returns
    /// the loss value.
    pub fn accumulate_gradients(&mut self, sample: &Sample, weight: f64, scale: f64) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss(&mut g, sample, weight)?;
        let value = g.value(loss).data()[0];
        if value.is_finite() {
            g.backward(loss, scale, &mut self.store)?;
        }
        Ok(value)
    }
}

/// Order-preserving map of [`Model::forward`]; failures stay per sample.
pub fn predict_batch(model: &Model, samples: &[Sample]) -> Vec<Result<ComplexityPrediction>> {
    samples.iter().map(|s| model.forward(s)).collect()
}

/// Fraction of samples whose prediction matches the label. Samples that
/// fail to evaluate count as wrong.
pub fn accuracy(model: &Model, samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = predict_batch(model, samples)
        .iter()
        .zip(samples)
        .filter(|(p, s)| matches!(p, Ok(p) if p.predicted_class == s.label))
        .count();
    correct as f64 / samples.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight each sample's loss by the inverse frequency of its class.
    pub class_weights: bool,
    /// Stop after the first epoch whose validation accuracy reaches this.
    pub target_val_acc: Option<f64>,
    /// Stop once this many optimizer steps have run.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 30,
            lr: 1e-3,
            batch_size: 16,
            class_weights: false,
            target_val_acc: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_acc: f64,
    pub steps: usize,
}

/// CSV `epoch,train_loss,val_acc`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_acc\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_acc));
    }
    out
}

/// `N / (K * n_c)` for each class present in `samples`, 0 for absent ones.
pub fn inverse_frequency_weights(samples: &[Sample]) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for s in samples {
        counts[s.label] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    counts.map(|c| {
        if c == 0 {
            0.0
        } else {
            samples.len() as f64 / (present * c) as f64
        }
    })
}

/// Trains `model` in place with Adam on cross-entropy.
///
/// Normalization statistics are refitted on `train` first. With a
/// checkpoint path, the initial model is written immediately and replaced
/// whenever validation accuracy improves (the final epoch's model when
/// `val` is empty), so a non-finite loss leaves the last good checkpoint.
/// On return the model holds the best checkpointed parameters.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for s in train_set.iter().chain(val_set) {
        s.validate()?;
    }
    model.set_normalization(&ChannelStats::fit(train_set.iter().map(|s| &s.dynamics)));
    let weights = if config.class_weights {
        inverse_frequency_weights(train_set)
    } else {
        [1.0; NUM_CLASSES]
    };

    let mut best = model.store.clone();
    if let Some(path) = checkpoint_path {
        model.save(path)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        history: Vec::new(),
        best_epoch: None,
        best_val_acc: f64::NEG_INFINITY,
        steps: 0,
    };

    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut stop = false;
        for batch in order.chunks(config.batch_size) {
            model.store.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &train_set[i];
                let loss = model.accumulate_gradients(s, weights[s.label], scale)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step: report.steps,
                    });
                }
                loss_sum += loss;
                seen += 1;
            }
            adam.step(&mut model.store);
            report.steps += 1;
            if config.max_steps.is_some_and(|m| report.steps >= m) {
                stop = true;
                break;
            }
        }
        let train_loss = loss_sum / seen as f64;
        let val_acc = if val_set.is_empty() {
            0.0
        } else {
            accuracy(model, val_set)
        };
        info!("epoch {epoch}: train_loss {train_loss:.6} val_acc {val_acc:.4}");
        report.history.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
        });
        if val_set.is_empty() || val_acc > report.best_val_acc {
            report.best_val_acc = val_acc;
            report.best_epoch = Some(epoch);
            best = model.store.clone();
            if let Some(path) = checkpoint_path {
                model.save(path)?;
                debug!("saved checkpoint at epoch {epoch}");
            }
        }
        if stop || config.target_val_acc.is_some_and(|t| !val_set.is_empty() && val_acc >= t) {
            break 'epochs;
        }
    }
    model.store = best;
    if report.best_epoch.is_none() {
        report.best_val_acc = 0.0;
    }
    Ok(report)
}
