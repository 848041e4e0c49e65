//! Low-rank noise variance model `n ~ N_C(0, diag(vec(W H)))` with
//! Itakura-Saito multiplicative updates.
//!
//! Maximizing the circular-Gaussian noise likelihood over the nonnegative
//! factors is equivalent to minimizing the Itakura-Saito divergence between
//! the residual power spectrogram and `W H`, so fitting uses the classical
//! beta = 0 multiplicative rules (H first, then W, with the reconstruction
//! refreshed in between).

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::spectral::{flatten_real, Spectrogram};

#[derive(Debug, Clone, PartialEq)]
pub struct NmfModel {
    w: Array2<f64>, // F x K
    h: Array2<f64>, // K x T
    eps: f64,
}

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_EPS: f64 = 1e-10;

impl NmfModel {
    /// Build from explicit factors; entries are floored to `eps`.
    pub fn new(w: Array2<f64>, h: Array2<f64>, eps: f64) -> Result<Self> {
        if eps <= 0.0 {
            return Err(Error::InvalidParam("nmf floor must be positive".into()));
        }
        if w.ncols() != h.nrows() {
            return Err(Error::ShapeMismatch {
                expected: format!("H with {} rows", w.ncols()),
                got: format!("{}", h.nrows()),
            });
        }
        if w.iter().chain(h.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NmfNaN);
        }
        let w = w.mapv(|x| x.max(eps));
        let h = h.mapv(|x| x.max(eps));
        Ok(Self { w, h, eps })
    }

    /// Scale-matched random initialization: factors i.i.d. Uniform(0.5, 1.5),
    /// rescaled so `mean(W H)` equals half the mixture's mean power.
    pub fn init_from_mixture<R: Rng + ?Sized>(
        x: &Spectrogram,
        rank: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidParam("nmf rank must be positive".into()));
        }
        let (f, t) = x.data.dim();
        let w = Array2::from_shape_fn((f, rank), |_| rng.gen_range(0.5..1.5));
        let h = Array2::from_shape_fn((rank, t), |_| rng.gen_range(0.5..1.5));
        let model = Self::new(w, h, eps)?;
        let target = x.power().mean().unwrap_or(0.0) / 2.0;
        let current = model.variance_matrix().mean().unwrap();
        let scale = if target > 0.0 { (target / current).sqrt() } else { 1.0 };
        Self::new(model.w.mapv(|v| v * scale), model.h.mapv(|v| v * scale), eps)
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn f(&self) -> usize {
        self.w.nrows()
    }

    pub fn t(&self) -> usize {
        self.h.ncols()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn h(&self) -> &Array2<f64> {
        &self.h
    }

    /// Modeled noise variance `W H` as an F x T array.
    pub fn variance_matrix(&self) -> Array2<f64> {
        self.w.dot(&self.h)
    }

    /// Modeled noise variance flattened column-major to length FT.
    pub fn noise_variance(&self) -> Vec<f64> {
        flatten_real(&self.variance_matrix())
    }

    /// One Itakura-Saito multiplicative sweep on the residual power `v`:
    /// H then W, refreshing the reconstruction in between, all entries
    /// refloored afterwards.
    pub fn mu_update_step(&self, v: &Array2<f64>) -> Result<Self> {
        if v.dim() != (self.f(), self.t()) {
            return Err(Error::ShapeMismatch {
                expected: format!("({}, {})", self.f(), self.t()),
                got: format!("{:?}", v.dim()),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteNmfInput);
        }

        let v_hat = self.w.dot(&self.h);
        let ratio = v / &v_hat.mapv(|x| x * x); // V / V_hat^2
        let inv = v_hat.mapv(|x| 1.0 / x); // 1 / V_hat
        let num_h = self.w.t().dot(&ratio);
        let den_h = self.w.t().dot(&inv);
        let h = (&self.h * &num_h / &den_h).mapv(|x| x.max(self.eps));

        let v_hat = self.w.dot(&h);
        let ratio = v / &v_hat.mapv(|x| x * x);
        let inv = v_hat.mapv(|x| 1.0 / x);
        let num_w = ratio.dot(&h.t());
        let den_w = inv.dot(&h.t());
        let w = (&self.w * &num_w / &den_w).mapv(|x| x.max(self.eps));

        if w.iter().chain(h.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NmfNaN);
        }
        Ok(Self { w, h, eps: self.eps })
    }
}

/// Itakura-Saito divergence `sum V/V_hat - ln(V/V_hat) - 1`.
///
/// Bins with `V = 0` contribute zero (boundary convention), keeping the
/// divergence finite on nonnegative inputs.
pub fn is_divergence(v: &Array2<f64>, v_hat: &Array2<f64>) -> Result<f64> {
    if v.dim() != v_hat.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", v.dim()),
            got: format!("{:?}", v_hat.dim()),
        });
    }
    if let Some(((f, t), _)) = v_hat.indexed_iter().find(|(_, x)| **x <= 0.0) {
        return Err(Error::NonPositiveVariance { f, t });
    }
    let mut acc = 0.0;
    for (&a, &b) in v.iter().zip(v_hat.iter()) {
        if a == 0.0 {
            continue;
        }
        let r = a / b;
        acc += r - r.ln() - 1.0;
    }
    Ok(acc)
}

/// Noise log-likelihood `-sum ln(pi V_hat) + |residual|^2 / V_hat` for the
/// circular-Gaussian model; increases exactly when the Itakura-Saito
/// divergence to the residual power decreases.
pub fn noise_log_likelihood(residual_power: &Array2<f64>, v_hat: &Array2<f64>) -> Result<f64> {
    if residual_power.dim() != v_hat.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", residual_power.dim()),
            got: format!("{:?}", v_hat.dim()),
        });
    }
    let mut acc = 0.0;
    for (&p, &m) in residual_power.iter().zip(v_hat.iter()) {
        if m <= 0.0 {
            return Err(Error::NonPositiveVariance { f: 0, t: 0 });
        }
        acc -= (std::f64::consts::PI * m).ln() + p / m;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(f: usize, t: usize, k: usize, seed: u64) -> NmfModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Array2::from_shape_fn((f, k), |_| rng.gen_range(0.5..1.5));
        let h = Array2::from_shape_fn((k, t), |_| rng.gen_range(0.5..1.5));
        NmfModel::new(w, h, DEFAULT_EPS).unwrap()
    }

    #[test]
    fn divergence_identity_of_indiscernibles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Array2::from_shape_fn((5, 7), |_| rng.gen_range(0.1..2.0));
        assert_eq!(is_divergence(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn divergence_nonnegative_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let v = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..3.0));
            let v_hat = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.05..3.0));
            assert!(is_divergence(&v, &v_hat).unwrap() >= 0.0);
        }
    }

    #[test]
    fn divergence_scalar_value() {
        let v = array![[4.0]];
        let v_hat = array![[2.0]];
        let d = is_divergence(&v, &v_hat).unwrap();
        assert!((d - (2.0 - 2.0f64.ln() - 1.0)).abs() < 1e-12);
        assert!((d - 0.306853).abs() < 1e-6);
    }

    #[test]
    fn divergence_rejects_nonpositive_model() {
        let v = array![[1.0]];
        let v_hat = array![[0.0]];
        assert!(matches!(
            is_divergence(&v, &v_hat),
            Err(Error::NonPositiveVariance { .. })
        ));
    }

    #[test]
    fn exact_factorization_is_fixed_point() {
        let model = random_model(6, 9, 3, 3);
        let v = model.variance_matrix();
        let updated = model.mu_update_step(&v).unwrap();
        let dw = (&updated.w - &model.w).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let dh = (&updated.h - &model.h).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(dw < 1e-12, "w moved by {dw}");
        assert!(dh < 1e-12, "h moved by {dh}");
    }

    #[test]
    fn scalar_update_hand_evaluation() {
        // W=[1], H=[2], V=[4]: H <- 2 * (1*4/4) / (1*0.5) = 4, then
        // V_hat = 4 = V so W is untouched.
        let model = NmfModel::new(array![[1.0]], array![[2.0]], DEFAULT_EPS).unwrap();
        let v = array![[4.0]];
        let updated = model.mu_update_step(&v).unwrap();
        assert!((updated.h[[0, 0]] - 4.0).abs() < 1e-12);
        assert!((updated.w[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((updated.variance_matrix()[[0, 0]] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn divergence_monotone_over_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.05..4.0));
        let mut model = random_model(8, 8, 2, 5);
        let mut d = is_divergence(&v, &model.variance_matrix()).unwrap();
        for _ in 0..100 {
            model = model.mu_update_step(&v).unwrap();
            let d_next = is_divergence(&v, &model.variance_matrix()).unwrap();
            assert!(d_next <= d + 1e-9, "divergence rose: {d} -> {d_next}");
            d = d_next;
        }
    }

    #[test]
    fn likelihood_rises_when_divergence_falls() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = Array2::from_shape_fn((6, 6), |_| rng.gen_range(0.05..4.0));
        let mut model = random_model(6, 6, 2, 7);
        let mut d = is_divergence(&v, &model.variance_matrix()).unwrap();
        let mut ll = noise_log_likelihood(&v, &model.variance_matrix()).unwrap();
        for _ in 0..40 {
            model = model.mu_update_step(&v).unwrap();
            let vm = model.variance_matrix();
            let d_next = is_divergence(&v, &vm).unwrap();
            let ll_next = noise_log_likelihood(&v, &vm).unwrap();
            if d_next < d - 1e-12 {
                assert!(ll_next > ll - 1e-9, "likelihood fell while divergence fell");
            }
            d = d_next;
            ll = ll_next;
        }
    }

    #[test]
    fn nonnegativity_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = Array2::from_shape_fn((5, 5), |_| rng.gen_range(0.0..2.0));
        let mut model = random_model(5, 5, 3, 9);
        for _ in 0..50 {
            model = model.mu_update_step(&v).unwrap();
            assert!(model.w.iter().all(|x| *x >= model.eps));
            assert!(model.h.iter().all(|x| *x >= model.eps));
            assert!(model.variance_matrix().iter().all(|x| *x > 0.0));
        }
        assert_eq!(model.noise_variance().len(), 25);
    }

    #[test]
    fn non_finite_input_rejected() {
        let model = random_model(2, 2, 1, 10);
        let v = array![[1.0, f64::NAN], [0.5, 0.5]];
        assert!(matches!(
            model.mu_update_step(&v),
            Err(Error::NonFiniteNmfInput)
        ));
    }
}
