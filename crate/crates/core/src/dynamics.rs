//! Vehicle-dynamics path: a 4-channel window (longitudinal acceleration,
//! speed, lateral acceleration, yaw rate) through a strided 1D convolution
//! stack, whose output positions become tokens for an attention encoder.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{EncoderConfig, EncoderStack};
use crate::error::{Error, Result};
use crate::nn::{conv_out_len, Graph, ParamId, ParamStore, Tensor, Var};

pub const CHANNELS: usize = 4;
/// Resampling rate of the dynamics grid, Hz.
pub const SAMPLE_RATE: f64 = 30.0;
/// Samples per 4 s window.
pub const WINDOW_LEN: usize = 120;

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsWindow {
    /// Longitudinal acceleration, m/s^2.
    pub a_x: Vec<f64>,
    /// Speed, m/s.
    pub v: Vec<f64>,
    /// Lateral acceleration, m/s^2.
    pub a_y: Vec<f64>,
    /// Yaw rate, rad/s.
    pub yaw_rate: Vec<f64>,
}

impl DynamicsWindow {
    pub fn new(a_x: Vec<f64>, v: Vec<f64>, a_y: Vec<f64>, yaw_rate: Vec<f64>) -> Result<Self> {
        let w = DynamicsWindow {
            a_x,
            v,
            a_y,
            yaw_rate,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn zeros(len: usize) -> Self {
        DynamicsWindow {
            a_x: vec![0.0; len],
            v: vec![0.0; len],
            a_y: vec![0.0; len],
            yaw_rate: vec![0.0; len],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lens = self.channels().map(|c| c.len());
        if lens.iter().any(|&l| l != lens[0]) {
            return Err(Error::LengthMismatch(format!("channel lengths {lens:?}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.a_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_x.is_empty()
    }

    /// Channel order: `a_x, v, a_y, yaw_rate`.
    pub fn channels(&self) -> [&[f64]; CHANNELS] {
        [&self.a_x, &self.v, &self.a_y, &self.yaw_rate]
    }

    fn channels_mut(&mut self) -> [&mut Vec<f64>; CHANNELS] {
        [&mut self.a_x, &mut self.v, &mut self.a_y, &mut self.yaw_rate]
    }

    /// `[4, len]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        self.validate()?;
        let data = self.channels().concat();
        Tensor::new(vec![CHANNELS, self.len()], data)
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Default for ChannelStats {
    fn default() -> Self {
        ChannelStats {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }
}

impl ChannelStats {
    /// Population statistics over every sample of every window.
    pub fn fit<'a>(windows: impl IntoIterator<Item = &'a DynamicsWindow>) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; CHANNELS];
        let mut sq = [0.0; CHANNELS];
        let windows: Vec<_> = windows.into_iter().collect();
        for w in &windows {
            for (c, ch) in w.channels().iter().enumerate() {
                sum[c] += ch.iter().sum::<f64>();
            }
            n += w.len();
        }
        if n == 0 {
            return Self::default();
        }
        let mean = sum.map(|s| s / n as f64);
        for w in &windows {
            for (c, ch) in w.channels().iter().enumerate() {
                sq[c] += ch.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.map(|s| (s / n as f64).sqrt());
        ChannelStats { mean, std }
    }
}

/// Standardizes every channel; channels with `std < 1e-8` become zeros.
pub fn normalize_window(raw: &DynamicsWindow, stats: &ChannelStats) -> Result<DynamicsWindow> {
    raw.validate()?;
    let mut out = raw.clone();
    for (c, ch) in out.channels_mut().into_iter().enumerate() {
        let (mu, sigma) = (stats.mean[c], stats.std[c]);
        for v in ch.iter_mut() {
            *v = if sigma < 1e-8 { 0.0 } else { (*v - mu) / sigma };
        }
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    t: f64,
    ax: f64,
    ay: f64,
    yaw_rate: f64,
    speed: f64,
}

/// Linear interpolation of `(t, value)` knots at `at`, clamped at the ends.
fn interpolate(knots: &[(f64, f64)], at: f64) -> f64 {
    let i = knots.partition_point(|&(t, _)| t <= at);
    if i == 0 {
        return knots[0].1;
    }
    if i == knots.len() {
        return knots[knots.len() - 1].1;
    }
    let (t0, v0) = knots[i - 1];
    let (t1, v1) = knots[i];
    if t1 == t0 {
        return v1;
    }
    v0 + (v1 - v0) * (at - t0) / (t1 - t0)
}

/// Parses `t,ax,ay,yaw_rate,speed` CSV text and resamples it onto
/// `len` points at `rate` Hz starting from `t = 0`. Rows with a non-finite
/// field are dropped.
pub fn parse_dynamics_csv(text: &str, origin: &Path, len: usize, rate: f64) -> Result<DynamicsWindow> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::parse(origin, e))?.clone();
    let expected = ["t", "ax", "ay", "yaw_rate", "speed"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            origin,
            format!("header {:?}, expected {}", headers, expected.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for rec in reader.deserialize::<CsvRow>() {
        let row = rec.map_err(|e| Error::parse(origin, e))?;
        let vals = [row.t, row.ax, row.ay, row.yaw_rate, row.speed];
        if vals.iter().all(|v| v.is_finite()) {
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(Error::parse(origin, "no usable dynamics rows"));
    }
    rows.sort_by(|a, b| a.t.total_cmp(&b.t));
    let knots = |f: fn(&CsvRow) -> f64| rows.iter().map(|r| (r.t, f(r))).collect::<Vec<_>>();
    let (ax, v, ay, yaw) = (knots(|r| r.ax), knots(|r| r.speed), knots(|r| r.ay), knots(|r| r.yaw_rate));
    let grid: Vec<f64> = (0..len).map(|i| i as f64 / rate).collect();
    let sample = |k: &[(f64, f64)]| grid.iter().map(|&t| interpolate(k, t)).collect::<Vec<_>>();
    DynamicsWindow::new(sample(&ax), sample(&v), sample(&ay), sample(&yaw))
}

pub fn read_dynamics_csv(path: &Path, len: usize, rate: f64) -> Result<DynamicsWindow> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dynamics_csv(&text, path, len, rate)
}

/// CSV text for a window sampled at `rate` Hz.
pub fn write_dynamics_csv(window: &DynamicsWindow, rate: f64) -> String {
    let mut out = String::from("t,ax,ay,yaw_rate,speed\n");
    for i in 0..window.len() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            i as f64 / rate,
            window.a_x[i],
            window.a_y[i],
            window.yaw_rate[i],
            window.v[i]
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub window_len: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub stride: usize,
    pub encoder: EncoderConfig,
}

impl DynamicsConfig {
    /// Conv stack over a window of `window_len` samples, encoder sized to
    /// the resulting token count.
    pub fn new(window_len: usize, channels: Vec<usize>, kernels: Vec<usize>, stride: usize) -> Self {
        let tokens = Self::token_count(window_len, &kernels, stride);
        let d_model = *channels.last().unwrap_or(&CHANNELS);
        DynamicsConfig {
            window_len,
            channels,
            kernels,
            stride,
            encoder: EncoderConfig::new(tokens, d_model),
        }
    }

    /// Output positions of the conv stack (padding `(k - 1) / 2`).
    pub fn token_count(window_len: usize, kernels: &[usize], stride: usize) -> usize {
        kernels.iter().fold(window_len, |len, &k| {
            conv_out_len(len, k, stride, (k - 1) / 2).unwrap_or(0)
        })
    }

    pub fn miniature() -> Self {
        let mut c = DynamicsConfig::new(16, vec![3, 4, 4], vec![7, 5, 3], 2);
        c.encoder.d_k = 3;
        c.encoder.mlp_hidden = 5;
        c.encoder.out_dim = 200;
        c.encoder.depth = 2;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.kernels.len() || self.channels.is_empty() {
            return Err(Error::Config("dynamics channels/kernels length differ".into()));
        }
        if self.kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config("dynamics kernels must be odd".into()));
        }
        let tokens = Self::token_count(self.window_len, &self.kernels, self.stride);
        if tokens == 0 || tokens != self.encoder.tokens {
            return Err(Error::Config(format!(
                "conv stack yields {tokens} tokens, encoder expects {}",
                self.encoder.tokens
            )));
        }
        if self.encoder.d_model != *self.channels.last().unwrap() {
            return Err(Error::Config("encoder width must equal last conv channels".into()));
        }
        self.encoder.validate()
    }
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig::new(WINDOW_LEN, vec![16, 32, 64], vec![7, 5, 3], 2)
    }
}

#[derive(Debug, Clone)]
struct Conv1dLayer {
    w: ParamId,
    b: ParamId,
    pad: usize,
}

#[derive(Debug, Clone)]
pub struct DynamicsExtractor {
    config: DynamicsConfig,
    convs: Vec<Conv1dLayer>,
    pub encoder: EncoderStack,
}

/// Intermediate nodes of one dynamics forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DynamicsTrace {
    /// `[channels, tokens]` after the last conv and ReLU.
    pub conv_features: Var,
    /// `[1, out_dim]`.
    pub output: Var,
}

impl DynamicsExtractor {
    pub fn new<R: Rng>(config: DynamicsConfig, prefix: &str, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut c = CHANNELS;
        for (i, (&f, &k)) in config.channels.iter().zip(&config.kernels).enumerate() {
            let w = store.add_glorot(&format!("{prefix}.conv{i}.w"), &[f, c, k], c * k, f * k, rng);
            let b = store.add_zeros(&format!("{prefix}.conv{i}.b"), &[f]);
            convs.push(Conv1dLayer {
                w,
                b,
                pad: (k - 1) / 2,
            });
            c = f;
        }
        let encoder = EncoderStack::new(config.encoder.clone(), &format!("{prefix}.encoder"), store, rng)?;
        Ok(DynamicsExtractor {
            config,
            convs,
            encoder,
        })
    }

    pub fn config(&self) -> &DynamicsConfig {
        &self.config
    }

    /// `window` is `[4, window_len]`, already normalized.
    pub fn forward_traced(&self, g: &mut Graph, store: &ParamStore, window: Var) -> Result<DynamicsTrace> {
        let shape = g.value(window).shape().to_vec();
        if shape != [CHANNELS, self.config.window_len] {
            return Err(Error::shape(
                "extract_dynamics",
                format!("window {shape:?}, expected [{CHANNELS}, {}]", self.config.window_len),
            ));
        }
        let mut h = window;
        for layer in &self.convs {
            let w = g.param(store, layer.w);
            let b = g.param(store, layer.b);
            let y = g.conv1d(h, w, Some(b), self.config.stride, layer.pad)?;
            h = g.relu(y);
        }
        let tokens = g.transpose(h)?;
        let output = self.encoder.encode(g, store, tokens)?;
        Ok(DynamicsTrace {
            conv_features: h,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, window: Var) -> Result<Var> {
        Ok(self.forward_traced(g, store, window)?.output)
    }
}

/// Dynamics feature of one window, `[1, out_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsFeature {
    pub vector: Tensor,
}

/// Runs a normalized window through the extractor (no gradient tracking).
pub fn extract_dynamics(
    extractor: &DynamicsExtractor,
    store: &ParamStore,
    window: &DynamicsWindow,
) -> Result<DynamicsFeature> {
    let mut g = Graph::new();
    let x = g.input(window.to_tensor()?);
    let y = extractor.forward(&mut g, store, x)?;
    Ok(DynamicsFeature {
        vector: g.value(y).clone(),
    })
}
