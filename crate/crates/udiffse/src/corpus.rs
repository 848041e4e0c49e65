//! Synthetic desk-scale scenes: quasi-speech sources, simple noise types,
//! paired surrogate visual embeddings, and SNR-controlled mixtures.
//!
//! Sub-generators for the clean source, the noise, and the visual stream are
//! derived from the scene seed on separate streams, so each component is
//! reproducible on its own.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::av_fusion::{VisualEmbedding, VISUAL_EMBED_DIM, VISUAL_FRAME_RATE};
use crate::error::{Error, Result};
use crate::score::GaussianPrior;
use crate::spectral::{
    istft_with_len, mix_at_snr, StftConfig, Waveform, DEFAULT_SAMPLE_RATE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Harmonic,
    AmModulated,
    GaussianPriorDraw,
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "harmonic" => Ok(Self::Harmonic),
            "am-modulated" => Ok(Self::AmModulated),
            "gaussian-prior-draw" => Ok(Self::GaussianPriorDraw),
            other => Err(Error::UnknownKind(other.into())),
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Harmonic => "harmonic",
            Self::AmModulated => "am-modulated",
            Self::GaussianPriorDraw => "gaussian-prior-draw",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Lowpass,
    BabbleSurrogate,
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(Self::White),
            "lowpass" => Ok(Self::Lowpass),
            "babble-surrogate" => Ok(Self::BabbleSurrogate),
            other => Err(Error::UnknownKind(other.into())),
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::White => "white",
            Self::Lowpass => "lowpass",
            Self::BabbleSurrogate => "babble-surrogate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub duration: f64,
    pub snr_db: f64,
    pub source_kind: SourceKind,
    pub noise_kind: NoiseKind,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            duration: 2.04,
            snr_db: 0.0,
            source_kind: SourceKind::Harmonic,
            noise_kind: NoiseKind::White,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub clean: Waveform,
    pub noisy: Waveform,
    pub visual: VisualEmbedding,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic harmonic-comb prior over F x T spectrograms: five partials
/// with smooth amplitude modulation, a tight variance on the comb and a
/// small floor elsewhere. This is the prior that `gaussian-prior-draw`
/// scenes sample from, so enhancement of those scenes can run matched.
pub fn scene_prior(cfg: &StftConfig, n_frames: usize) -> GaussianPrior {
    let f_bins = cfg.n_bins();
    let mut mu = Array2::<Complex64>::zeros((f_bins, n_frames));
    let base_bin = 6usize;
    for t in 0..n_frames {
        let phase_t = t as f64 / n_frames.max(1) as f64;
        let env = 0.55 + 0.45 * (2.0 * std::f64::consts::PI * 2.5 * phase_t + 0.3).sin();
        for n in 1..=5usize {
            let bin = base_bin * n;
            if bin + 1 >= f_bins {
                break;
            }
            let amp = 3.0 / n as f64 * env;
            let phase = 1.7 * bin as f64 + 0.23 * t as f64 * (1.0 + n as f64 / 7.0);
            let z = Complex64::from_polar(amp, phase);
            mu[[bin, t]] = z;
            mu[[bin - 1, t]] = z * 0.35;
            mu[[bin + 1, t]] = z * 0.35;
        }
    }
    let c = mu.mapv(|z| {
        let m = z.norm();
        (0.08 * m) * (0.08 * m) + 1e-4
    });
    GaussianPrior::new(mu, c, *cfg).expect("constructed prior is valid")
}

fn harmonic_source(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let f0 = rng.gen_range(140.0..220.0);
    let env_rate = rng.gen_range(2.0..3.5);
    let env_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let t = i as f64 / sr;
        let vibrato = 1.0 + 0.01 * (std::f64::consts::TAU * 5.0 * t).sin();
        phase += std::f64::consts::TAU * f0 * vibrato / sr;
        let env = 0.2 + 0.8 * 0.5 * (1.0 + (std::f64::consts::TAU * env_rate * t + env_phase).sin());
        let mut v = 0.0;
        for n in 1..=5 {
            v += (phase * n as f64).sin() / n as f64;
        }
        out.push(v * env);
    }
    normalize_peak(out, 0.5)
}

fn am_modulated_source(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let carriers: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(300.0..2500.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let t = i as f64 / sr;
        let mut v = 0.0;
        for &(f, ph, mph) in &carriers {
            let am = 0.5 + 0.5 * (std::f64::consts::TAU * 4.0 * t + mph).sin();
            v += (std::f64::consts::TAU * f * t + ph).sin() * am;
        }
        out.push(v);
    }
    normalize_peak(out, 0.5)
}

fn prior_draw_source(len: usize, cfg: &StftConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let n_frames = cfg.n_frames(len);
    let prior = scene_prior(cfg, n_frames);
    let draw = prior.draw(None, rng)?;
    Ok(istft_with_len(&draw, len)?.samples)
}

fn white_noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1).collect()
}

fn lowpass_noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white = white_noise(len, rng);
    moving_average(&white, 8)
}

fn babble_noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let mut out = vec![0.0; len];
    for _ in 0..4 {
        let band = moving_average(&white_noise(len, rng), 16);
        let env_rate = rng.gen_range(3.0..6.0);
        let env_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let env = 0.3 + 0.7 * (std::f64::consts::TAU * env_rate * t + env_phase).sin().abs();
            *o += band[i] * env;
        }
    }
    out
}

fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += x[i];
        if i >= window {
            acc -= x[i - window];
        }
        out.push(acc / window.min(i + 1) as f64);
    }
    out
}

fn normalize_peak(mut x: Vec<f64>, peak: f64) -> Vec<f64> {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        let s = peak / m;
        for v in &mut x {
            *v *= s;
        }
    }
    x
}

/// Surrogate visual stream: each frame row is the clean signal's frame
/// energy times a fixed random direction, plus small isotropic noise.
fn synth_visual(clean: &[f64], duration: f64, rng: &mut ChaCha8Rng) -> Result<VisualEmbedding> {
    let t_v = (VISUAL_FRAME_RATE * duration).round().max(1.0) as usize;
    let hop = (DEFAULT_SAMPLE_RATE as f64 / VISUAL_FRAME_RATE) as usize;
    let mut direction: Vec<f64> = (0..VISUAL_EMBED_DIM)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|x| *x /= norm);

    let mut energies = Vec::with_capacity(t_v);
    for k in 0..t_v {
        let start = (k * hop).min(clean.len());
        let end = ((k + 1) * hop).min(clean.len());
        let e = if end > start {
            (clean[start..end].iter().map(|x| x * x).sum::<f64>() / (end - start) as f64).sqrt()
        } else {
            0.0
        };
        energies.push(e);
    }
    let peak = energies.iter().fold(0.0f64, |m, e| m.max(*e)).max(1e-12);
    let data = Array2::from_shape_fn((t_v, VISUAL_EMBED_DIM), |(k, j)| {
        let noise: f64 = rng.sample(StandardNormal);
        ((energies[k] / peak) * direction[j] + 0.01 * noise) as f32
    });
    VisualEmbedding::new(data)
}

/// Generate a seeded scene: clean source, SNR-controlled mixture, and the
/// paired visual embedding.
pub fn gen_synthetic_scene(spec: &SceneSpec) -> Result<Scene> {
    if !(spec.duration > 0.0 && spec.duration.is_finite()) {
        return Err(Error::InvalidParam("scene duration must be positive".into()));
    }
    let len = (spec.duration * DEFAULT_SAMPLE_RATE as f64).round() as usize;
    if len == 0 {
        return Err(Error::InvalidParam("scene too short for one sample".into()));
    }
    let mut clean_rng = stream_rng(spec.seed, 1);
    let mut noise_rng = stream_rng(spec.seed, 2);
    let mut visual_rng = stream_rng(spec.seed, 3);

    let cfg = StftConfig::default();
    let clean_samples = match spec.source_kind {
        SourceKind::Harmonic => harmonic_source(len, &mut clean_rng),
        SourceKind::AmModulated => am_modulated_source(len, &mut clean_rng),
        SourceKind::GaussianPriorDraw => prior_draw_source(len, &cfg, &mut clean_rng)?,
    };
    let noise_samples = match spec.noise_kind {
        NoiseKind::White => white_noise(len, &mut noise_rng),
        NoiseKind::Lowpass => lowpass_noise(len, &mut noise_rng),
        NoiseKind::BabbleSurrogate => babble_noise(len, &mut noise_rng),
    };
    let clean = Waveform::new(clean_samples, DEFAULT_SAMPLE_RATE)?;
    let noise = Waveform::new(noise_samples, DEFAULT_SAMPLE_RATE)?;
    let noisy = mix_at_snr(&clean, &noise, spec.snr_db)?;
    let visual = synth_visual(&clean.samples, spec.duration, &mut visual_rng)?;
    Ok(Scene { clean, noisy, visual })
}

/// One manifest line: scene name, file paths, seed, and mixing SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub clean: PathBuf,
    pub noisy: PathBuf,
    pub visual: PathBuf,
    pub seed: u64,
    pub snr_db: f64,
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for e in entries {
        writeln!(
            out,
            "{} clean={} noisy={} visual={} seed={} snr_db={}",
            e.name,
            e.clean.display(),
            e.noisy.display(),
            e.visual.display(),
            e.seed,
            e.snr_db
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut entries = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::InvalidParam("empty manifest line".into()))?
            .to_string();
        let mut clean = None;
        let mut noisy = None;
        let mut visual = None;
        let mut seed = None;
        let mut snr_db = None;
        for tok in parts {
            let (key, value) = tok.split_once('=').ok_or_else(|| {
                Error::InvalidParam(format!("manifest token without '=': {tok}"))
            })?;
            match key {
                "clean" => clean = Some(PathBuf::from(value)),
                "noisy" => noisy = Some(PathBuf::from(value)),
                "visual" => visual = Some(PathBuf::from(value)),
                "seed" => {
                    seed = Some(value.parse().map_err(|_| {
                        Error::InvalidParam(format!("bad seed in manifest: {value}"))
                    })?)
                }
                "snr_db" => {
                    snr_db = Some(value.parse().map_err(|_| {
                        Error::InvalidParam(format!("bad snr in manifest: {value}"))
                    })?)
                }
                other => {
                    return Err(Error::InvalidParam(format!(
                        "unknown manifest key: {other}"
                    )))
                }
            }
        }
        let missing = |what: &str| Error::InvalidParam(format!("manifest line missing {what}"));
        entries.push(ManifestEntry {
            name,
            clean: clean.ok_or_else(|| missing("clean"))?,
            noisy: noisy.ok_or_else(|| missing("noisy"))?,
            visual: visual.ok_or_else(|| missing("visual"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            snr_db: snr_db.ok_or_else(|| missing("snr_db"))?,
        });
    }
    Ok(entries)
}
