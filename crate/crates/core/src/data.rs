//! Fleet telemetry: synthetic generation with fault injection, CSV/manifest
//! ingestion, and windowing with leakage-free temporal splits.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::training::{seed_all, tag, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultType {
    UnderPressure,
    OverPressure,
    OverTemperature,
}

impl fmt::Display for FaultType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultType::UnderPressure => "under_pressure",
            FaultType::OverPressure => "over_pressure",
            FaultType::OverTemperature => "over_temperature",
        })
    }
}

impl FromStr for FaultType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "under_pressure" => Ok(FaultType::UnderPressure),
            "over_pressure" => Ok(FaultType::OverPressure),
            "over_temperature" => Ok(FaultType::OverTemperature),
            other => Err(Error::Config(format!("unknown fault type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelInfo {
    pub name: String,
    pub unit: String,
}

impl ChannelInfo {
    pub fn new(name: &str, unit: &str) -> Self {
        ChannelInfo {
            name: name.to_string(),
            unit: unit.to_string(),
        }
    }
}

/// One aircraft type: channel roster, sampling rate and fault mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetSpec {
    pub fleet_id: String,
    pub channels: Vec<ChannelInfo>,
    pub sample_freq_hz: f64,
    pub fault_type: FaultType,
    pub baseline_channel: usize,
    /// Fraction of windows that receive an injected fault.
    pub anomaly_rate: f64,
}

/// Sensor roster shared by every synthetic fleet: (name, unit, offset, scale).
/// The first three entries are the covariates of the baseline channel.
const CATALOG: &[(&str, &str, f64, f64)] = &[
    ("eng_n2", "%rpm", 85.0, 4.0),
    ("altitude", "ft", 35_000.0, 600.0),
    ("tat", "degC", -30.0, 3.0),
    ("mach", "-", 0.78, 0.01),
    ("egt", "degC", 650.0, 20.0),
    ("pack_flow", "kg/s", 0.9, 0.05),
    ("valve_pos", "deg", 40.0, 5.0),
    ("precooler_t", "degC", 190.0, 8.0),
    ("fan_air_valve", "deg", 30.0, 6.0),
    ("hp_valve", "deg", 20.0, 4.0),
];
const COVARIATES: usize = 3;
/// Loadings of the remaining catalog sensors on the three covariates.
/// Sensors co-move through shared flight conditions; the same sensor obeys
/// the same loadings in every fleet.
const COUPLING: &[[f64; COVARIATES]] = &[
    [0.3, 0.8, -0.2],
    [0.8, -0.2, 0.4],
    [0.5, -0.5, 0.3],
    [-0.4, 0.3, 0.7],
    [0.6, 0.2, 0.6],
    [0.2, -0.7, 0.5],
    [-0.6, 0.4, 0.3],
];
/// Weight of a coupled sensor's own dynamics relative to its loadings.
const IDIOSYNCRATIC: f64 = 0.4;
const FREQ_BANK: usize = 5;

impl FleetSpec {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::Config(format!(
                "fleet {} needs at least 2 channels, has {}",
                self.fleet_id,
                self.channels.len()
            )));
        }
        if !(self.sample_freq_hz > 0.0) {
            return Err(Error::Config(format!("fleet {}: sample_freq_hz must be positive", self.fleet_id)));
        }
        if self.baseline_channel >= self.channels.len() {
            return Err(Error::Config(format!(
                "fleet {}: baseline channel {} out of range",
                self.fleet_id, self.baseline_channel
            )));
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return Err(Error::Config(format!("fleet {}: anomaly_rate must lie in [0, 1]", self.fleet_id)));
        }
        Ok(())
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }

    /// Synthetic fleet with `channels` sensors; the baseline channel is last.
    pub fn synthetic(id: &str, channels: usize, sample_freq_hz: f64, fault_type: FaultType) -> FleetSpec {
        assert!(channels > COVARIATES, "synthetic fleets need covariates plus a baseline");
        let mut roster: Vec<ChannelInfo> = (0..channels - 1)
            .map(|i| match CATALOG.get(i) {
                Some((name, unit, _, _)) => ChannelInfo::new(name, unit),
                None => ChannelInfo::new(&format!("aux_{i}"), "-"),
            })
            .collect();
        let (name, unit) = baseline_sensor(fault_type);
        roster.push(ChannelInfo::new(name, unit));
        FleetSpec {
            fleet_id: id.to_string(),
            channels: roster,
            sample_freq_hz,
            fault_type,
            baseline_channel: channels - 1,
            anomaly_rate: 0.5,
        }
    }

    /// Desk-scale analog of the A320 fleet (8 channels, under-pressure).
    pub fn desk_a() -> FleetSpec {
        Self::synthetic("fleet_a", 8, 0.2, FaultType::UnderPressure)
    }

    /// Desk-scale analog of the A330 fleet (6 channels, over-pressure).
    pub fn desk_b() -> FleetSpec {
        Self::synthetic("fleet_b", 6, 1.0, FaultType::OverPressure)
    }

    /// Desk-scale analog of the C919 fleet (4 channels, over-temperature).
    pub fn desk_c() -> FleetSpec {
        Self::synthetic("fleet_c", 4, 0.25, FaultType::OverTemperature)
    }

    /// Full-size rosters matching the reported A320 / A330 / C919 shapes.
    pub fn a320() -> FleetSpec {
        Self::synthetic("a320", 52, 0.2, FaultType::UnderPressure)
    }

    pub fn a330() -> FleetSpec {
        Self::synthetic("a330", 37, 1.0, FaultType::OverPressure)
    }

    pub fn c919() -> FleetSpec {
        Self::synthetic("c919", 17, 0.25, FaultType::OverTemperature)
    }

    /// Look up a built-in spec by fleet id.
    pub fn preset(name: &str) -> Result<FleetSpec> {
        match name {
            "fleet_a" | "a" => Ok(Self::desk_a()),
            "fleet_b" | "b" => Ok(Self::desk_b()),
            "fleet_c" | "c" => Ok(Self::desk_c()),
            "a320" => Ok(Self::a320()),
            "a330" => Ok(Self::a330()),
            "c919" => Ok(Self::c919()),
            other => Err(Error::Config(format!("unknown fleet preset {other:?}"))),
        }
    }
}

fn baseline_sensor(fault: FaultType) -> (&'static str, &'static str) {
    match fault {
        FaultType::OverTemperature => ("bleed_temp", "degC"),
        _ => ("bleed_press", "psi"),
    }
}

fn baseline_scale(fault: FaultType) -> (f64, f64) {
    match fault {
        FaultType::OverTemperature => (200.0, 15.0),
        _ => (45.0, 4.0),
    }
}

/// Multichannel series for one fleet, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetDataset {
    pub spec: FleetSpec,
    pub values: Vec<Vec<f64>>,
    /// Per-timestep anomaly labels (0 normal, 1 anomalous).
    pub labels: Option<Vec<u8>>,
    /// Noise-free covariate function for the baseline channel, in signal
    /// units. Only synthetic data has it; never serialized.
    pub implied_baseline: Option<Vec<f64>>,
}

impl FleetDataset {
    pub fn len(&self) -> usize {
        self.values.first().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }
}

/// One fixed-length multichannel slice, the unit of training.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalWindow {
    pub fleet_id: String,
    pub start: usize,
    /// `[M][L]` in signal units.
    pub values: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub phase: String,
}

impl SignalWindow {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn has_anomaly(&self) -> bool {
        self.labels.contains(&1)
    }
}

// ---------------------------------------------------------------------------
// Generation

/// Per-fleet frequency bank (cycles per sample). Channels of one fleet draw
/// their sinusoids from this bank, so they co-move the way telemetry driven
/// by a shared flight profile does.
fn fleet_frequencies(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..FREQ_BANK)
        .map(|_| rng.gen_range((1.0f64 / 1500.0).ln()..(1.0f64 / 50.0).ln()).exp())
        .collect()
}

fn sinusoid_channel(rng: &mut ChaCha8Rng, bank: &[f64], n: usize) -> Vec<f64> {
    let k = rng.gen_range(2..=4);
    let waves: Vec<(f64, f64, f64)> = bank
        .choose_multiple(rng, k)
        .map(|&f| {
            let amp = rng.gen_range(0.3..1.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (amp, f, phase)
        })
        .collect();
    let phi: f64 = rng.gen_range(0.9..0.98);
    let innov = Normal::new(0.0, 0.25 * (1.0 - phi * phi).sqrt()).expect("valid sd");
    let drift_amp = rng.gen_range(0.2..0.5);
    let drift_period = rng.gen_range(20_000.0..60_000.0);
    let drift_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut ar = 0.0;
    (0..n)
        .map(|t| {
            let t = t as f64;
            ar = phi * ar + innov.sample(rng);
            let periodic: f64 = waves
                .iter()
                .map(|&(a, f, p)| a * (std::f64::consts::TAU * f * t + p).sin())
                .sum();
            let drift = drift_amp * (std::f64::consts::TAU * t / drift_period + drift_phase).sin();
            periodic + ar + drift
        })
        .collect()
}

fn coupling(index: usize, name: &str) -> [f64; COVARIATES] {
    match index.checked_sub(COVARIATES).and_then(|i| COUPLING.get(i)) {
        Some(w) => *w,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(tag(name));
            [(); COVARIATES].map(|_| rng.gen_range(-0.8..0.8))
        }
    }
}

/// A non-covariate sensor: its loadings on the standardized covariates plus
/// its own sinusoid/AR dynamics, restandardized.
fn coupled_channel(u: &[Vec<f64>], own: &[f64], index: usize, name: &str) -> Vec<f64> {
    let w = coupling(index, name);
    let own = standardize(own);
    let mixed: Vec<f64> = (0..own.len())
        .map(|t| w.iter().zip(u).map(|(wk, uk)| wk * uk[t]).sum::<f64>() + IDIOSYNCRATIC * own[t])
        .collect();
    standardize(&mixed)
}

fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt().max(1e-12);
    x.iter().map(|v| (v - mean) / sd).collect()
}

/// Smooth nonlinear map from standardized covariates to the standardized
/// baseline signal.
pub fn baseline_function(u0: f64, u1: f64, u2: f64) -> f64 {
    0.6 * u0 + 0.5 * u1 - 0.4 * u2 + 0.3 * (u0 * u1).tanh()
}

const BASELINE_NOISE: f64 = 0.05;

/// Generate a clean (fault-free, unlabeled) dataset. Every channel is a sum
/// of 2–4 sinusoids plus AR(1) noise and a slow drift; the baseline channel
/// is [`baseline_function`] of the first three channels plus small noise.
pub fn generate_fleet(spec: &FleetSpec, num_points: usize, seed: u64) -> Result<FleetDataset> {
    spec.validate()?;
    let m = spec.num_channels();
    let covariates: Vec<usize> = (0..m).filter(|&c| c != spec.baseline_channel).take(COVARIATES).collect();
    if covariates.len() < COVARIATES {
        return Err(Error::Config(format!(
            "fleet {} needs at least {} non-baseline channels for generation",
            spec.fleet_id, COVARIATES
        )));
    }
    let bank = seed_all(seed);
    let freqs = fleet_frequencies(&mut bank.rng(Stream::Data, &[tag(&spec.fleet_id), u64::MAX - 1]));
    let mut latent: Vec<Vec<f64>> = Vec::with_capacity(m);
    for c in 0..m {
        let mut rng = bank.rng(Stream::Data, &[tag(&spec.fleet_id), c as u64]);
        latent.push(sinusoid_channel(&mut rng, &freqs, num_points));
    }
    let u: Vec<Vec<f64>> = covariates.iter().map(|&c| standardize(&latent[c])).collect();
    let mut noise_rng = bank.rng(Stream::Data, &[tag(&spec.fleet_id), u64::MAX]);
    let noise = Normal::new(0.0, BASELINE_NOISE).expect("valid sd");
    let (b_off, b_scale) = baseline_scale(spec.fault_type);
    let implied: Vec<f64> = (0..num_points)
        .map(|t| b_off + b_scale * baseline_function(u[0][t], u[1][t], u[2][t]))
        .collect();
    let values = (0..m)
        .map(|c| {
            if c == spec.baseline_channel {
                implied
                    .iter()
                    .map(|&v| v + b_scale * noise.sample(&mut noise_rng))
                    .collect()
            } else {
                let (off, scale) = CATALOG.get(c).map_or((0.0, 1.0), |e| (e.2, e.3));
                let z = match covariates.iter().position(|&k| k == c) {
                    Some(_) => latent[c].clone(),
                    None => coupled_channel(&u, &latent[c], c, &spec.channels[c].name),
                };
                z.iter().map(|&z| off + scale * z).collect()
            }
        })
        .collect();
    Ok(FleetDataset {
        spec: spec.clone(),
        values,
        labels: None,
        implied_baseline: Some(implied),
    })
}

/// A contiguous fault segment `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultSegment {
    pub start: usize,
    pub len: usize,
}

fn population_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Shift a segment of `channel` in `values[..]` according to `fault` and
/// return the segment. The segment covers 5–30 % of the slice; σ is the
/// slice's own population standard deviation before injection.
fn inject_into(channel: &mut [f64], fault: FaultType, rng: &mut ChaCha8Rng) -> FaultSegment {
    let l = channel.len();
    let min_len = ((0.05 * l as f64).ceil() as usize).max(1);
    let max_len = ((0.30 * l as f64).floor() as usize).max(min_len);
    let len = rng.gen_range(min_len..=max_len);
    let start = rng.gen_range(0..=l - len);
    let sigma = population_std(channel).max(1e-12);
    match fault {
        FaultType::UnderPressure | FaultType::OverPressure => {
            let sign = if fault == FaultType::UnderPressure { -1.0 } else { 1.0 };
            let shift = sign * rng.gen_range(2.0..=5.0) * sigma;
            for v in &mut channel[start..start + len] {
                *v += shift;
            }
        }
        FaultType::OverTemperature => {
            // ramps from two thirds of the peak up to the peak
            let peak = rng.gen_range(3.0..=6.0) * sigma;
            let denom = (len.max(2) - 1) as f64;
            for (i, v) in channel[start..start + len].iter_mut().enumerate() {
                *v += peak * (2.0 / 3.0 + (i as f64 / denom) / 3.0);
            }
        }
    }
    FaultSegment { start, len }
}

/// Inject one fault into the window's `baseline_channel` and label exactly
/// the modified timesteps.
pub fn inject_fault(window: &mut SignalWindow, baseline_channel: usize, fault: FaultType, seed: u64) -> Result<FaultSegment> {
    if window.labels.iter().any(|&l| l != 0) {
        return Err(Error::Contract("inject_fault expects an all-normal window".into()));
    }
    let channel = window
        .values
        .get_mut(baseline_channel)
        .ok_or_else(|| Error::Config(format!("baseline channel {baseline_channel} out of range")))?;
    let mut rng = seed_all(seed).rng(Stream::Fault, &[window.start as u64]);
    let seg = inject_into(channel, fault, &mut rng);
    for l in &mut window.labels[seg.start..seg.start + seg.len] {
        *l = 1;
    }
    Ok(seg)
}

/// Inject faults at dataset level: the series is cut into aligned chunks of
/// `chunk_len`, and each chunk independently receives one fault with
/// probability `spec.anomaly_rate`. Returns the injected segments in
/// absolute time.
pub fn inject_faults(dataset: &mut FleetDataset, chunk_len: usize, seed: u64) -> Result<Vec<FaultSegment>> {
    if chunk_len == 0 || dataset.len() < chunk_len {
        return Err(Error::Data(format!(
            "dataset of length {} cannot hold fault chunks of {chunk_len}",
            dataset.len()
        )));
    }
    let n = dataset.len();
    let labels = dataset.labels.get_or_insert_with(|| vec![0; n]);
    if labels.iter().any(|&l| l != 0) {
        return Err(Error::Contract("inject_faults expects an unlabeled or all-normal dataset".into()));
    }
    let bank = seed_all(seed);
    let b = dataset.spec.baseline_channel;
    let fault = dataset.spec.fault_type;
    let mut segments = Vec::new();
    for k in 0..n / chunk_len {
        let mut rng = bank.rng(Stream::Fault, &[tag(&dataset.spec.fleet_id), k as u64]);
        if rng.gen::<f64>() >= dataset.spec.anomaly_rate {
            continue;
        }
        let off = k * chunk_len;
        let seg = inject_into(&mut dataset.values[b][off..off + chunk_len], fault, &mut rng);
        for l in &mut labels[off + seg.start..off + seg.start + seg.len] {
            *l = 1;
        }
        segments.push(FaultSegment {
            start: off + seg.start,
            len: seg.len,
        });
    }
    Ok(segments)
}

// ---------------------------------------------------------------------------
// Windowing

pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if len < window || stride == 0 {
        0
    } else {
        (len - window) / stride + 1
    }
}

fn windows_in(dataset: &FleetDataset, from: usize, to: usize, len: usize, stride: usize) -> Vec<SignalWindow> {
    let count = window_count(to - from, len, stride);
    (0..count)
        .map(|i| {
            let start = from + i * stride;
            SignalWindow {
                fleet_id: dataset.spec.fleet_id.clone(),
                start,
                values: dataset.values.iter().map(|c| c[start..start + len].to_vec()).collect(),
                labels: dataset
                    .labels
                    .as_ref()
                    .map_or_else(|| vec![0; len], |l| l[start..start + len].to_vec()),
                phase: "cruise".to_string(),
            }
        })
        .collect()
}

/// Sliding windows of length `len` every `stride` samples over the whole
/// series.
pub fn make_windows(dataset: &FleetDataset, len: usize, stride: usize) -> Result<Vec<SignalWindow>> {
    if stride == 0 || len == 0 {
        return Err(Error::Config("window length and stride must be positive".into()));
    }
    if dataset.len() < len {
        return Err(Error::Data(format!(
            "dataset {} has {} samples, shorter than window length {len}",
            dataset.spec.fleet_id,
            dataset.len()
        )));
    }
    Ok(windows_in(dataset, 0, dataset.len(), len, stride))
}

/// Windows from three contiguous time blocks (70 / 15 / 15 %). No window
/// crosses a block boundary.
#[derive(Debug, Clone)]
pub struct SplitWindows {
    pub train: Vec<SignalWindow>,
    pub val: Vec<SignalWindow>,
    pub test: Vec<SignalWindow>,
    /// Block boundaries `[0, b1)`, `[b1, b2)`, `[b2, len)`.
    pub bounds: (usize, usize),
}

pub fn split_windows(dataset: &FleetDataset, len: usize, stride: usize) -> Result<SplitWindows> {
    if stride == 0 || len == 0 {
        return Err(Error::Config("window length and stride must be positive".into()));
    }
    let n = dataset.len();
    let b1 = n * 70 / 100;
    let b2 = n * 85 / 100;
    let split = SplitWindows {
        train: windows_in(dataset, 0, b1, len, stride),
        val: windows_in(dataset, b1, b2, len, stride),
        test: windows_in(dataset, b2, n, len, stride),
        bounds: (b1, b2),
    };
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Data(format!(
            "dataset {} of length {n} is too short for a 70/15/15 split with windows of {len}",
            dataset.spec.fleet_id
        )));
    }
    Ok(split)
}

// ---------------------------------------------------------------------------
// Manifest and CSV

/// Key-value description of a dataset on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub spec: FleetSpec,
    pub has_labels: bool,
    pub data_file: String,
    /// Provenance lines (`config_hash`, `seed`, ...) carried through untouched.
    pub extra: Vec<(String, String)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        out.push_str(&format!("fleet_id={}\n", s.fleet_id));
        out.push_str(&format!("sample_freq_hz={}\n", s.sample_freq_hz));
        out.push_str(&format!("fault_type={}\n", s.fault_type));
        out.push_str(&format!("baseline_channel={}\n", s.baseline_channel));
        out.push_str(&format!("anomaly_rate={}\n", s.anomaly_rate));
        out.push_str(&format!("has_labels={}\n", self.has_labels));
        out.push_str(&format!("data_file={}\n", self.data_file));
        for c in &s.channels {
            out.push_str(&format!("channel={},{}\n", c.name, c.unit));
        }
        for (k, v) in &self.extra {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut fleet_id = None;
        let mut freq = None;
        let mut fault = None;
        let mut baseline = None;
        let mut rate = 0.0;
        let mut has_labels = false;
        let mut data_file = None;
        let mut channels = Vec::new();
        let mut extra = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line {}: expected key=value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |what: &str| Error::Config(format!("manifest line {}: invalid {what} {v:?}", i + 1));
            match k {
                "fleet_id" => fleet_id = Some(v.to_string()),
                "sample_freq_hz" => freq = Some(v.parse::<f64>().map_err(|_| bad("sample_freq_hz"))?),
                "fault_type" => fault = Some(v.parse::<FaultType>()?),
                "baseline_channel" => baseline = Some(v.parse::<usize>().map_err(|_| bad("baseline_channel"))?),
                "anomaly_rate" => rate = v.parse::<f64>().map_err(|_| bad("anomaly_rate"))?,
                "has_labels" => has_labels = v.parse::<bool>().map_err(|_| bad("has_labels"))?,
                "data_file" => data_file = Some(v.to_string()),
                "channel" => {
                    let (name, unit) = v.split_once(',').unwrap_or((v, "-"));
                    channels.push(ChannelInfo::new(name.trim(), unit.trim()));
                }
                _ => extra.push((k.to_string(), v.to_string())),
            }
        }
        let missing = |key: &str| Error::Config(format!("manifest is missing {key}"));
        let spec = FleetSpec {
            fleet_id: fleet_id.ok_or_else(|| missing("fleet_id"))?,
            channels,
            sample_freq_hz: freq.ok_or_else(|| missing("sample_freq_hz"))?,
            fault_type: fault.ok_or_else(|| missing("fault_type"))?,
            baseline_channel: baseline.ok_or_else(|| missing("baseline_channel"))?,
            anomaly_rate: rate,
        };
        spec.validate()?;
        Ok(Manifest {
            data_file: data_file.unwrap_or_else(|| format!("{}.csv", spec.fleet_id)),
            spec,
            has_labels,
            extra,
        })
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn write_csv(dataset: &FleetDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["t".to_string()];
    header.extend(dataset.spec.channel_names());
    if dataset.labels.is_some() {
        header.push("ad_label".to_string());
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let fs_hz = dataset.spec.sample_freq_hz;
    let mut row = Vec::with_capacity(header.len());
    for t in 0..dataset.len() {
        row.clear();
        row.push(format!("{}", t as f64 / fs_hz));
        for c in &dataset.values {
            row.push(format!("{}", c[t]));
        }
        if let Some(l) = &dataset.labels {
            row.push(l[t].to_string());
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        path: path.to_path_buf(),
        row,
        msg: e.to_string(),
    }
}

/// Load a CSV whose columns follow `manifest`: `t`, every channel in
/// manifest order, then `ad_label` when the manifest declares labels. Row
/// numbers in errors count the header as row 1.
pub fn load_csv(path: &Path, manifest: &Manifest) -> Result<FleetDataset> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(|s| s.trim().to_string()).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let parse_err = |row: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let mut channel_cols = Vec::new();
    for c in &manifest.spec.channels {
        channel_cols.push(col(&c.name).ok_or_else(|| parse_err(1, format!("missing column {:?}", c.name)))?);
    }
    let label_col = if manifest.has_labels {
        Some(col("ad_label").ok_or_else(|| parse_err(1, "missing column \"ad_label\"".into()))?)
    } else {
        None
    };
    let m = manifest.spec.num_channels();
    let mut values = vec![Vec::new(); m];
    let mut labels = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != header.len() {
            return Err(parse_err(row, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        for (c, &ci) in channel_cols.iter().enumerate() {
            let cell = rec[ci].trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, format!("non-numeric cell {cell:?} in column {:?}", header[ci])))?;
            if !v.is_finite() {
                return Err(parse_err(row, format!("non-finite value in column {:?}", header[ci])));
            }
            values[c].push(v);
        }
        if let Some(lc) = label_col {
            match rec[lc].trim() {
                "0" => labels.push(0u8),
                "1" => labels.push(1u8),
                other => return Err(parse_err(row, format!("ad_label must be 0 or 1, found {other:?}"))),
            }
        }
    }
    if values[0].is_empty() {
        return Err(Error::Data(format!("{}: dataset has no rows", path.display())));
    }
    Ok(FleetDataset {
        spec: manifest.spec.clone(),
        values,
        labels: label_col.map(|_| labels),
        implied_baseline: None,
    })
}

/// Read a manifest and the CSV it points at (relative to the manifest).
pub fn load_dataset(manifest_path: &Path) -> Result<FleetDataset> {
    let manifest = Manifest::read(manifest_path)?;
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    load_csv(&dir.join(&manifest.data_file), &manifest)
}

/// Write `<dir>/<fleet_id>.csv` and `<dir>/<fleet_id>.manifest`; returns the
/// manifest path.
pub fn save_dataset(dataset: &FleetDataset, dir: &Path, extra: Vec<(String, String)>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = &dataset.spec.fleet_id;
    let data_file = format!("{id}.csv");
    write_csv(dataset, &dir.join(&data_file))?;
    let manifest = Manifest {
        spec: dataset.spec.clone(),
        has_labels: dataset.labels.is_some(),
        data_file,
        extra,
    };
    let path = dir.join(format!("{id}.manifest"));
    manifest.write(&path)?;
    Ok(path)
}
