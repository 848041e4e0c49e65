//! Evaluation metrics: scale-invariant SDR and real-time-factor accounting.

use crate::error::{Error, Result};
use crate::sampler::RunStats;
use crate::spectral::Waveform;

/// Ceiling applied when the residual vanishes (or the ratio exceeds it).
pub const SI_SDR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub si_sdr_db: f64,
    pub rtf: f64,
}

/// Scale-invariant signal-to-distortion ratio in dB.
///
/// The reference is rescaled by `alpha = <estimate, reference> / ||reference||^2`
/// and the value is `10 log10(||alpha ref||^2 / ||alpha ref - estimate||^2)`,
/// capped at [`SI_SDR_CAP_DB`]. No mean removal is applied.
pub fn si_sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::LengthMismatch {
            left: estimate.len(),
            right: reference.len(),
        });
    }
    let ref_energy: f64 = reference.samples.iter().map(|s| s * s).sum();
    if ref_energy == 0.0 {
        return Err(Error::ZeroEnergyReference);
    }
    let dot: f64 = estimate
        .samples
        .iter()
        .zip(reference.samples.iter())
        .map(|(e, r)| e * r)
        .sum();
    let alpha = dot / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let residual_energy: f64 = estimate
        .samples
        .iter()
        .zip(reference.samples.iter())
        .map(|(e, r)| {
            let d = alpha * r - e;
            d * d
        })
        .sum();
    if residual_energy == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target_energy / residual_energy).log10()).min(SI_SDR_CAP_DB))
}

/// Real-time factor: processing seconds per second of audio.
pub fn rtf(stats: &RunStats) -> Result<f64> {
    if stats.audio_duration <= 0.0 {
        return Err(Error::ZeroDuration);
    }
    Ok(stats.wall_time / stats.audio_duration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::DEFAULT_SAMPLE_RATE;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, DEFAULT_SAMPLE_RATE).unwrap()
    }

    #[test]
    fn perfect_estimate_hits_the_cap() {
        let s = wave(vec![0.3, -0.2, 0.9, 0.1]);
        assert_eq!(si_sdr(&s, &s).unwrap(), SI_SDR_CAP_DB);
    }

    #[test]
    fn reference_scaling_is_invariant() {
        let reference = wave(vec![1.0, -0.5, 0.8, -0.3]);
        let estimate = wave(vec![0.9, -0.4, 0.7, -0.4]);
        let doubled = wave(reference.samples.iter().map(|s| 2.0 * s).collect());
        let a = si_sdr(&estimate, &reference).unwrap();
        let b = si_sdr(&estimate, &doubled).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hand_computed_value() {
        // reference [1, 0], estimate [1, 1]: alpha = 1, target energy 1,
        // residual energy 1 -> 0 dB.
        let reference = wave(vec![1.0, 0.0]);
        let estimate = wave(vec![1.0, 1.0]);
        assert!(si_sdr(&estimate, &reference).unwrap().abs() < 1e-12);
    }

    #[test]
    fn permuting_both_signals_preserves_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reference: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let estimate: Vec<f64> = reference
            .iter()
            .map(|r| r + rng.gen_range(-0.2..0.2))
            .collect();
        let a = si_sdr(&wave(estimate.clone()), &wave(reference.clone())).unwrap();
        let perm: Vec<usize> = (0..64).rev().collect();
        let ref_p: Vec<f64> = perm.iter().map(|&i| reference[i]).collect();
        let est_p: Vec<f64> = perm.iter().map(|&i| estimate[i]).collect();
        let b = si_sdr(&wave(est_p), &wave(ref_p)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn zero_db_orthogonal_mixture() {
        // Long sine + equal-power independent noise: mixture scores ~0 dB
        // against the sine.
        let n = 160_000;
        let clean: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let clean_w = wave(clean.clone());
        let mix = crate::spectral::mix_at_snr(&clean_w, &wave(noise), 0.0).unwrap();
        let v = si_sdr(&mix, &clean_w).unwrap();
        assert!(v.abs() < 0.1, "0 dB mixture scored {v}");
    }

    #[test]
    fn zero_reference_rejected() {
        let reference = wave(vec![0.0; 8]);
        let estimate = wave(vec![0.1; 8]);
        assert!(matches!(
            si_sdr(&estimate, &reference),
            Err(Error::ZeroEnergyReference)
        ));
    }

    #[test]
    fn length_mismatch_rejected() {
        let a = wave(vec![0.1; 8]);
        let b = wave(vec![0.1; 9]);
        assert!(matches!(si_sdr(&a, &b), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn rtf_is_wall_over_duration() {
        let stats = RunStats {
            wall_time: 10.53,
            audio_duration: 1.0,
            ..RunStats::default()
        };
        assert!((rtf(&stats).unwrap() - 10.53).abs() < 1e-12);

        let zero = RunStats { wall_time: 0.0, audio_duration: 2.0, ..RunStats::default() };
        assert_eq!(rtf(&zero).unwrap(), 0.0);

        let double = RunStats { wall_time: 21.06, audio_duration: 1.0, ..RunStats::default() };
        assert!((rtf(&double).unwrap() - 2.0 * rtf(&stats).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rtf_requires_positive_duration() {
        let stats = RunStats::default();
        assert!(matches!(rtf(&stats), Err(Error::ZeroDuration)));
    }
}
