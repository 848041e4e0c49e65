//! Waveform I/O, STFT analysis/synthesis, SNR mixing, and complex Gaussian
//! sampling.
//!
//! All modeling downstream happens on complex F x T spectrograms produced
//! here. The analysis transform uses centered frames (frame `k` is centered
//! at sample `k * hop`) with multi-bounce reflection padding at both edges;
//! synthesis overlap-adds windowed frames and normalizes by the accumulated
//! squared window, which makes `istft(stft(w))` exact to floating-point
//! precision on the covered range.

mod wav;

pub use wav::{read_wav, write_wav};

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Mono audio signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidParam("sample_rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteWaveform);
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Analysis/synthesis configuration: Hann window length and hop in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { window_length: 510, hop: 128 }
    }
}

impl StftConfig {
    pub fn new(window_length: usize, hop: usize) -> Result<Self> {
        let cfg = Self { window_length, hop };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 || self.hop == 0 {
            return Err(Error::InvalidParam(
                "window length and hop must be positive".into(),
            ));
        }
        if self.hop > self.window_length {
            return Err(Error::HopExceedsWindow {
                hop: self.hop,
                window: self.window_length,
            });
        }
        Ok(())
    }

    /// Number of frequency bins, `window_length / 2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Periodic Hann taper of the configured length.
    pub fn window(&self) -> Vec<f64> {
        let l = self.window_length;
        (0..l)
            .map(|j| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * j as f64 / l as f64).cos()))
            .collect()
    }
}

/// Complex F x T time-frequency array.
///
/// Rows index frequency bins (F), columns index time frames (T). Where a
/// flat FT vector is needed (file formats, the NMF variance vector), the
/// flattening is column-major over (F, T): bin `(f, t)` maps to `f + F * t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Array2<Complex64>,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn new(data: Array2<Complex64>, config: StftConfig) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidParam(
                "spectrogram must have at least one bin and one frame".into(),
            ));
        }
        Ok(Self { data, config })
    }

    pub fn zeros(f: usize, t: usize, config: StftConfig) -> Self {
        Self { data: Array2::zeros((f, t)), config }
    }

    /// Frequency bin count F.
    pub fn f(&self) -> usize {
        self.data.nrows()
    }

    /// Frame count T.
    pub fn t(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, z| m.max(z.norm()))
    }

    /// Power spectrogram `|.|^2`.
    pub fn power(&self) -> Array2<f64> {
        self.data.mapv(|z| z.norm_sqr())
    }

    /// Column-major (f fastest) flattening to a length-FT vector.
    pub fn flatten(&self) -> Vec<Complex64> {
        self.data.t().iter().cloned().collect()
    }
}

/// Column-major (f fastest) flattening of a real F x T array.
pub fn flatten_real(a: &Array2<f64>) -> Vec<f64> {
    a.t().iter().cloned().collect()
}

/// Inverse of [`flatten_real`]: rebuild an F x T array from a column-major
/// vector.
pub fn unflatten_real(v: &[f64], f: usize, t: usize) -> Result<Array2<f64>> {
    if v.len() != f * t {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values", f * t),
            got: format!("{}", v.len()),
        });
    }
    let arr = Array2::from_shape_vec((t, f), v.to_vec())
        .expect("length checked above");
    Ok(arr.t().to_owned())
}

/// Multi-bounce reflection indexing (no edge repetition), numpy-style.
fn reflect_index(i: i64, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut m = i.rem_euclid(period);
    if m > n as i64 - 1 {
        m = period - m;
    }
    m as usize
}

/// Analysis transform: centered, reflect-padded frames, one-sided spectrum.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    if w.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteWaveform);
    }

    let l = cfg.window_length;
    let half = l / 2;
    let n_bins = cfg.n_bins();
    let n_frames = cfg.n_frames(w.len());
    let window = cfg.window();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(l);

    let mut data = Array2::<Complex64>::zeros((n_bins, n_frames));
    let mut buf = vec![Complex64::default(); l];
    for k in 0..n_frames {
        let center = (k * cfg.hop) as i64;
        for (j, b) in buf.iter_mut().enumerate() {
            let idx = reflect_index(center - half as i64 + j as i64, w.len());
            *b = Complex64::new(w.samples[idx] * window[j], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..n_bins {
            data[[f, k]] = buf[f];
        }
    }
    Spectrogram::new(data, *cfg)
}

/// Synthesis transform with the default output length `(T - 1) * hop`,
/// which round-trips analysis of signals whose length is a hop multiple.
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    istft_with_len(s, (s.t() - 1) * s.config.hop)
}

/// Synthesis transform with an explicit output length.
///
/// `len_out` may not exceed the span covered by the frames,
/// `(T - 1) * hop + window_length / 2 - 1`.
pub fn istft_with_len(s: &Spectrogram, len_out: usize) -> Result<Waveform> {
    s.config.validate()?;
    if !s.is_finite() {
        return Err(Error::NonFiniteSpectrogram);
    }
    let l = s.config.window_length;
    let half = l / 2;
    let hop = s.config.hop;
    let n_bins = s.config.n_bins();
    if s.f() != n_bins {
        return Err(Error::ShapeMismatch {
            expected: format!("{} bins for window {}", n_bins, l),
            got: format!("{}", s.f()),
        });
    }
    let covered = (s.t() - 1) * hop + half;
    if len_out > covered {
        return Err(Error::InvalidParam(format!(
            "requested {} samples but frames cover only {}",
            len_out, covered
        )));
    }

    let (num, den) = overlap_add(s);

    let mut samples = Vec::with_capacity(len_out);
    for n in 0..len_out {
        let m = n + half; // shift into the padded domain
        let d = den[m].max(1e-12);
        samples.push(num[m] / d);
    }
    Waveform::new(samples, DEFAULT_SAMPLE_RATE)
}

/// Raw overlap-add accumulation over the padded domain: windowed inverse
/// frames summed into `num`, squared window summed into `den`. Index 0
/// corresponds to padded sample `-window_length / 2`.
pub(crate) fn overlap_add(s: &Spectrogram) -> (Vec<f64>, Vec<f64>) {
    let l = s.config.window_length;
    let hop = s.config.hop;
    let n_bins = s.f();
    let window = s.config.window();

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(l);

    let span = (s.t() - 1) * hop + l;
    let mut num = vec![0.0f64; span];
    let mut den = vec![0.0f64; span];
    let mut buf = vec![Complex64::default(); l];
    let scale = 1.0 / l as f64;

    for k in 0..s.t() {
        buf[..n_bins]
            .iter_mut()
            .enumerate()
            .for_each(|(f, b)| *b = s.data[[f, k]]);
        for (f, b) in buf.iter_mut().enumerate().skip(n_bins) {
            *b = s.data[[l - f, k]].conj();
        }
        ifft.process(&mut buf);
        let base = k * hop;
        for j in 0..l {
            let z = buf[j].re * scale;
            num[base + j] += window[j] * z;
            den[base + j] += window[j] * window[j];
        }
    }
    (num, den)
}

/// Scale `noise` so that `10 log10(P_clean / P_noise_scaled) = snr_db` and
/// add it to `clean`. Noise shorter than `clean` is tiled, longer is
/// truncated.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if clean.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    let n = clean.len();
    let p_clean: f64 = clean.samples.iter().map(|s| s * s).sum();
    if p_clean == 0.0 {
        return Err(Error::SilentClean);
    }
    if noise.is_empty() {
        return Err(Error::SilentNoise);
    }
    let tiled: Vec<f64> = (0..n).map(|i| noise.samples[i % noise.len()]).collect();
    let p_noise: f64 = tiled.iter().map(|s| s * s).sum();
    if p_noise == 0.0 {
        return Err(Error::SilentNoise);
    }
    let alpha = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = clean
        .samples
        .iter()
        .zip(tiled.iter())
        .map(|(c, v)| c + alpha * v)
        .collect();
    Waveform::new(samples, clean.sample_rate)
}

/// Circularly-symmetric complex Gaussian draw around `mean` with per-bin
/// total variance `variance`: real and imaginary parts are independent with
/// variance `variance / 2` each, so `E|z - mean|^2 = variance`.
///
/// Bins are visited in row-major (f, t) order, one real then one imaginary
/// standard-normal draw per bin.
pub fn sample_complex_gaussian<R: Rng + ?Sized>(
    mean: &Spectrogram,
    variance: &Array2<f64>,
    rng: &mut R,
) -> Result<Spectrogram> {
    if variance.dim() != mean.data.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", mean.data.dim()),
            got: format!("{:?}", variance.dim()),
        });
    }
    if let Some(((f, t), _)) = variance.indexed_iter().find(|(_, v)| **v < 0.0) {
        return Err(Error::NegativeVariance { f, t });
    }
    let mut data = mean.data.clone();
    for (z, &v) in data.iter_mut().zip(variance.iter()) {
        let sd = (v / 2.0).sqrt();
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *z += Complex64::new(sd * re, sd * im);
    }
    Spectrogram::new(data, mean.config)
}

/// Unit-variance draw, a convenience wrapper over
/// [`sample_complex_gaussian`].
pub fn sample_unit_complex_gaussian<R: Rng + ?Sized>(
    mean: &Spectrogram,
    rng: &mut R,
) -> Result<Spectrogram> {
    let ones = Array2::from_elem(mean.data.dim(), 1.0);
    sample_complex_gaussian(mean, &ones, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_waveform(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect();
        Waveform::new(samples, DEFAULT_SAMPLE_RATE).unwrap()
    }

    #[test]
    fn zero_waveform_gives_zero_spectrogram() {
        let w = Waveform::new(vec![0.0; 16_000], DEFAULT_SAMPLE_RATE).unwrap();
        let s = stft(&w, &StftConfig::default()).unwrap();
        assert!(s.data.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn default_config_shape_for_2_04_seconds() {
        let w = random_waveform(32_640, 1); // 2.04 s at 16 kHz
        let s = stft(&w, &StftConfig::default()).unwrap();
        assert_eq!(s.f(), 256);
        assert_eq!(s.t(), 256);
    }

    #[test]
    fn round_trip_random_2_04_seconds() {
        let w = random_waveform(32_640, 2);
        let s = stft(&w, &StftConfig::default()).unwrap();
        let back = istft(&s).unwrap();
        assert_eq!(back.len(), w.len());
        let err = w
            .samples
            .iter()
            .zip(back.samples.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err <= 1e-5, "round-trip error {err}");
    }

    #[test]
    fn stft_idempotent_through_istft() {
        let w = random_waveform(4 * 128, 3);
        let cfg = StftConfig::default();
        let s1 = stft(&w, &cfg).unwrap();
        let w2 = istft(&s1).unwrap();
        let s2 = stft(&w2, &cfg).unwrap();
        assert_eq!(s1.t(), s2.t());
        let err = s1
            .data
            .iter()
            .zip(s2.data.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        assert!(err <= 1e-5, "idempotence error {err}");
    }

    #[test]
    fn zero_spectrogram_gives_zero_waveform() {
        let s = Spectrogram::zeros(256, 8, StftConfig::default());
        let w = istft(&s).unwrap();
        assert!(w.samples.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn single_frame_overlap_add_is_window_shaped() {
        // A single frame whose inverse transform is the constant 1 (DC-only
        // spectrum) accumulates as the window itself.
        let cfg = StftConfig::default();
        let l = cfg.window_length;
        let mut data = Array2::<Complex64>::zeros((cfg.n_bins(), 1));
        data[[0, 0]] = Complex64::new(l as f64, 0.0);
        let s = Spectrogram::new(data, cfg).unwrap();
        let (num, den) = overlap_add(&s);
        let window = cfg.window();
        for j in 0..l {
            assert!((num[j] - window[j]).abs() < 1e-9);
        }
        // Normalized synthesis matches the same direct computation.
        let w = istft_with_len(&s, 60).unwrap();
        let half = l / 2;
        for (n, x) in w.samples.iter().enumerate() {
            let expected = num[n + half] / den[n + half].max(1e-12);
            assert!((x - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_waveform_rejected() {
        let w = Waveform::new(vec![], DEFAULT_SAMPLE_RATE).unwrap();
        assert!(matches!(
            stft(&w, &StftConfig::default()),
            Err(Error::EmptyWaveform)
        ));
    }

    #[test]
    fn hop_exceeding_window_rejected() {
        assert!(matches!(
            StftConfig::new(64, 65),
            Err(Error::HopExceedsWindow { .. })
        ));
    }

    #[test]
    fn mix_at_zero_db_equalizes_power() {
        let clean = random_waveform(8_000, 5);
        let noise = random_waveform(8_000, 6);
        let mixed = mix_at_snr(&clean, &noise, 0.0).unwrap();
        let p_clean: f64 = clean.samples.iter().map(|s| s * s).sum();
        let p_scaled: f64 = mixed
            .samples
            .iter()
            .zip(clean.samples.iter())
            .map(|(m, c)| (m - c) * (m - c))
            .sum();
        assert!((p_scaled / p_clean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mix_at_ten_db_power_ratio() {
        let clean = random_waveform(8_000, 7);
        let noise = random_waveform(8_000, 8);
        let mixed = mix_at_snr(&clean, &noise, 10.0).unwrap();
        let p_clean: f64 = clean.samples.iter().map(|s| s * s).sum();
        let p_scaled: f64 = mixed
            .samples
            .iter()
            .zip(clean.samples.iter())
            .map(|(m, c)| (m - c) * (m - c))
            .sum();
        assert!((p_clean / p_scaled / 10.0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mix_reproduces_evaluation_snrs() {
        let clean = random_waveform(8_000, 9);
        let noise = random_waveform(5_000, 10); // forces tiling
        for snr in [-5.0, 5.0] {
            let mixed = mix_at_snr(&clean, &noise, snr).unwrap();
            let p_clean: f64 = clean.samples.iter().map(|s| s * s).sum();
            let p_scaled: f64 = mixed
                .samples
                .iter()
                .zip(clean.samples.iter())
                .map(|(m, c)| (m - c) * (m - c))
                .sum();
            let achieved = 10.0 * (p_clean / p_scaled).log10();
            assert!((achieved - snr).abs() < 1e-6);
        }
    }

    #[test]
    fn silent_clean_rejected() {
        let clean = Waveform::new(vec![0.0; 100], DEFAULT_SAMPLE_RATE).unwrap();
        let noise = random_waveform(100, 11);
        assert!(matches!(
            mix_at_snr(&clean, &noise, 0.0),
            Err(Error::SilentClean)
        ));
    }

    #[test]
    fn gaussian_sampler_is_deterministic() {
        let mean = Spectrogram::zeros(8, 8, StftConfig::default());
        let var = Array2::from_elem((8, 8), 1.0);
        let a = sample_complex_gaussian(&mean, &var, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_complex_gaussian(&mean, &var, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn gaussian_sampler_moments() {
        let mean = Spectrogram::zeros(1, 1, StftConfig::default());
        let var = Array2::from_elem((1, 1), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut e_abs2 = 0.0;
        let mut e_re2 = 0.0;
        let mut e_im2 = 0.0;
        let mut e_z2 = Complex64::default();
        for _ in 0..n {
            let z = sample_complex_gaussian(&mean, &var, &mut rng).unwrap().data[[0, 0]];
            e_abs2 += z.norm_sqr();
            e_re2 += z.re * z.re;
            e_im2 += z.im * z.im;
            e_z2 += z * z;
        }
        let n = n as f64;
        assert!((e_abs2 / n - 1.0).abs() < 0.02);
        assert!((e_re2 / n - 0.5).abs() < 0.01);
        assert!((e_im2 / n - 0.5).abs() < 0.01);
        // circularity: E[z^2] ~ 0
        assert!((e_z2 / n).norm() < 0.02);
    }

    #[test]
    fn negative_variance_rejected() {
        let mean = Spectrogram::zeros(2, 2, StftConfig::default());
        let mut var = Array2::from_elem((2, 2), 1.0);
        var[[1, 0]] = -0.1;
        assert!(matches!(
            sample_complex_gaussian(&mean, &var, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::NegativeVariance { f: 1, t: 0 })
        ));
    }

    #[test]
    fn flatten_is_column_major() {
        let mut data = Array2::<Complex64>::zeros((2, 3));
        for f in 0..2 {
            for t in 0..3 {
                data[[f, t]] = Complex64::new(f as f64, t as f64);
            }
        }
        let s = Spectrogram::new(data, StftConfig::default()).unwrap();
        let flat = s.flatten();
        // f fastest: (0,0),(1,0),(0,1),(1,1),(0,2),(1,2)
        assert_eq!(flat[0], Complex64::new(0.0, 0.0));
        assert_eq!(flat[1], Complex64::new(1.0, 0.0));
        assert_eq!(flat[2], Complex64::new(0.0, 1.0));
        assert_eq!(flat[5], Complex64::new(1.0, 2.0));
    }

    #[test]
    fn unflatten_inverts_flatten() {
        let a = Array2::from_shape_fn((3, 4), |(f, t)| (f * 10 + t) as f64);
        let flat = flatten_real(&a);
        let back = unflatten_real(&flat, 3, 4).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn reflect_indexing_multi_bounce() {
        // n = 4, period 6: -1 -> 1, -3 -> 3, 4 -> 2, 7 -> 1
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(-3, 4), 3);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(7, 4), 1);
        assert_eq!(reflect_index(0, 1), 0);
        assert_eq!(reflect_index(-5, 1), 0);
    }
}
