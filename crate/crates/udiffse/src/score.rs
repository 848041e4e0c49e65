//! Score models: the evaluation interface used by the sampler, an analytic
//! Gaussian prior (optionally with linear visual conditioning of its mean),
//! and denoising-score-matching training of that prior.
//!
//! The score convention is the conjugate Wirtinger derivative of the
//! log-density: for `N_C(m, v)` per bin, `score(z) = -(z - m) / v`, which is
//! exactly the quantity the reverse SDE and Tweedie denoiser consume.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::av_fusion::VisualEmbedding;
use crate::error::{Error, Result};
use crate::sde::DiffusionSchedule;
use crate::spectral::{Spectrogram, StftConfig};

/// Evaluates `S(s_t, [v], t)`; deterministic given inputs, output shape
/// equals input shape.
pub trait ScoreModel {
    fn evaluate(
        &self,
        s_t: &Spectrogram,
        t: f64,
        sched: &DiffusionSchedule,
        v: Option<&VisualEmbedding>,
    ) -> Result<Spectrogram>;

    fn conditional(&self) -> bool {
        false
    }
}

/// Diagonal complex Gaussian prior `N_C(mu_eff, diag(c))` with
/// `mu_eff = mu + A * pool(v)` when conditioning is present.
///
/// Under the perturbation kernel the marginal of `s_t` stays Gaussian, so
/// the model score is exact:
/// `score = -(s_t - delta_t * mu_eff) / (delta_t^2 * c + sigma(t)^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mu: Array2<Complex64>, // F x T
    c: Array2<f64>,        // F x T, strictly positive
    /// Linear conditioning map, (F*T) x p with bins in column-major order.
    conditioning: Option<Array2<Complex64>>,
    config: StftConfig,
}

impl GaussianPrior {
    pub fn new(mu: Array2<Complex64>, c: Array2<f64>, config: StftConfig) -> Result<Self> {
        if mu.dim() != c.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", mu.dim()),
                got: format!("{:?}", c.dim()),
            });
        }
        if c.iter().any(|x| *x <= 0.0 || !x.is_finite()) {
            return Err(Error::InvalidParam("prior variance must be positive".into()));
        }
        if mu.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidParam("prior mean must be finite".into()));
        }
        Ok(Self { mu, c, conditioning: None, config })
    }

    /// Unit-variance zero-mean prior, the usual training start.
    pub fn flat(f: usize, t: usize, config: StftConfig) -> Self {
        Self {
            mu: Array2::zeros((f, t)),
            c: Array2::from_elem((f, t), 1.0),
            conditioning: None,
            config,
        }
    }

    pub fn with_conditioning(mut self, a: Array2<Complex64>) -> Result<Self> {
        let ft = self.mu.len();
        if a.nrows() != ft {
            return Err(Error::ShapeMismatch {
                expected: format!("conditioning with {ft} rows"),
                got: format!("{}", a.nrows()),
            });
        }
        self.conditioning = Some(a);
        Ok(self)
    }

    pub fn f(&self) -> usize {
        self.mu.nrows()
    }

    pub fn t(&self) -> usize {
        self.mu.ncols()
    }

    pub fn mu(&self) -> &Array2<Complex64> {
        &self.mu
    }

    pub fn c(&self) -> &Array2<f64> {
        &self.c
    }

    pub fn conditioning(&self) -> Option<&Array2<Complex64>> {
        self.conditioning.as_ref()
    }

    pub fn embed_dim(&self) -> Option<usize> {
        self.conditioning.as_ref().map(|a| a.ncols())
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    /// Mean after applying visual conditioning, `mu + A * pool(v)`.
    pub fn effective_mean(&self, v: Option<&VisualEmbedding>) -> Result<Array2<Complex64>> {
        match (&self.conditioning, v) {
            (None, _) => Ok(self.mu.clone()),
            (Some(_), None) => Err(Error::MissingVisual),
            (Some(a), Some(v)) => {
                if v.p() != a.ncols() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("embedding dim {}", a.ncols()),
                        got: format!("{}", v.p()),
                    });
                }
                let q = v.pooled();
                let shift = conditioning_shift(a, &q, self.f(), self.t());
                Ok(&self.mu + &shift)
            }
        }
    }

    /// Exact score of the perturbed marginal at time `t`.
    pub fn score(
        &self,
        s_t: &Spectrogram,
        t: f64,
        sched: &DiffusionSchedule,
        v: Option<&VisualEmbedding>,
    ) -> Result<Spectrogram> {
        if s_t.data.dim() != self.mu.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.mu.dim()),
                got: format!("{:?}", s_t.data.dim()),
            });
        }
        let co = sched.coefficients(t)?;
        let mu_eff = self.effective_mean(v)?;
        let mut data = Array2::<Complex64>::zeros(s_t.data.dim());
        ndarray::Zip::from(&mut data)
            .and(&s_t.data)
            .and(&mu_eff)
            .and(&self.c)
            .for_each(|out, z, m, &cv| {
                let denom = co.delta * co.delta * cv + co.sigma_sq;
                *out = -(z - m * co.delta) / denom;
            });
        Spectrogram::new(data, s_t.config)
    }

    /// Sample `mu_eff + sqrt(c) * zeta`.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        v: Option<&VisualEmbedding>,
        rng: &mut R,
    ) -> Result<Spectrogram> {
        let mean = Spectrogram::new(self.effective_mean(v)?, self.config)?;
        crate::spectral::sample_complex_gaussian(&mean, &self.c, rng)
    }
}

/// `A * q` reshaped to F x T (bins are column-major in the rows of `A`).
fn conditioning_shift(
    a: &Array2<Complex64>,
    q: &Array1<f64>,
    f: usize,
    t: usize,
) -> Array2<Complex64> {
    let mut shift = Array2::<Complex64>::zeros((f, t));
    for (l, row) in a.rows().into_iter().enumerate() {
        let mut acc = Complex64::default();
        for (z, &x) in row.iter().zip(q.iter()) {
            acc += z * x;
        }
        shift[[l % f, l / f]] = acc;
    }
    shift
}

impl ScoreModel for GaussianPrior {
    fn evaluate(
        &self,
        s_t: &Spectrogram,
        t: f64,
        sched: &DiffusionSchedule,
        v: Option<&VisualEmbedding>,
    ) -> Result<Spectrogram> {
        self.score(s_t, t, sched, v)
    }

    fn conditional(&self) -> bool {
        self.conditioning.is_some()
    }
}

/// Free-function form of [`GaussianPrior::score`].
pub fn gaussian_score(
    prior: &GaussianPrior,
    s_t: &Spectrogram,
    t: f64,
    sched: &DiffusionSchedule,
    v: Option<&VisualEmbedding>,
) -> Result<Spectrogram> {
    prior.score(s_t, t, sched, v)
}

/// Lower bound on sampled diffusion times during training, keeping clear of
/// the vanishing-variance end of the schedule.
pub const DSM_T_MIN: f64 = 0.03;

/// One training draw: a diffusion time and the injected complex noise.
#[derive(Debug, Clone)]
pub struct DsmDraw {
    pub t: f64,
    pub zeta: Array2<Complex64>,
}

/// Sample `n` draws with `t ~ Uniform(t_min, 1)` and unit complex noise of
/// the given shape.
pub fn sample_dsm_draws<R: Rng + ?Sized>(
    n: usize,
    shape: (usize, usize),
    t_min: f64,
    rng: &mut R,
) -> Vec<DsmDraw> {
    use rand_distr::StandardNormal;
    let root_half = 0.5f64.sqrt();
    (0..n)
        .map(|_| {
            let t = rng.gen_range(t_min..1.0);
            let zeta = Array2::from_shape_fn(shape, |_| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re * root_half, im * root_half)
            });
            DsmDraw { t, zeta }
        })
        .collect()
}

/// Denoising-score-matching loss for explicit draws: the mean over the batch
/// of `|| sigma(t) * S(delta_t s + sigma(t) zeta, t) + zeta ||^2`.
pub fn dsm_loss_with_draws<M: ScoreModel + ?Sized>(
    model: &M,
    batch: &[Spectrogram],
    vs: Option<&[VisualEmbedding]>,
    sched: &DiffusionSchedule,
    draws: &[DsmDraw],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if draws.len() != batch.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} draws", batch.len()),
            got: format!("{}", draws.len()),
        });
    }
    if let Some(vs) = vs {
        if vs.len() != batch.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} embeddings", batch.len()),
                got: format!("{}", vs.len()),
            });
        }
    }
    let mut total = 0.0;
    for (i, (s, draw)) in batch.iter().zip(draws.iter()).enumerate() {
        let co = sched.coefficients(draw.t)?;
        let sigma = co.sigma_sq.sqrt();
        let s_t = Spectrogram::new(
            ndarray::Zip::from(&s.data)
                .and(&draw.zeta)
                .map_collect(|z, zeta| z * co.delta + zeta * sigma),
            s.config,
        )?;
        let v = vs.map(|vs| &vs[i]);
        let score = model.evaluate(&s_t, draw.t, sched, v)?;
        let mut norm = 0.0;
        for (sc, zeta) in score.data.iter().zip(draw.zeta.iter()) {
            norm += (sc * sigma + zeta).norm_sqr();
        }
        total += norm;
    }
    Ok(total / batch.len() as f64)
}

/// Denoising-score-matching loss with freshly sampled `(t, zeta)` draws.
pub fn dsm_loss<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    batch: &[Spectrogram],
    vs: Option<&[VisualEmbedding]>,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let shape = batch[0].data.dim();
    let draws = sample_dsm_draws(batch.len(), shape, DSM_T_MIN, rng);
    dsm_loss_with_draws(model, batch, vs, sched, &draws)
}

/// Parameter gradients of the DSM loss for a [`GaussianPrior`].
#[derive(Debug, Clone)]
pub struct PriorGradient {
    pub mu: Array2<Complex64>,
    pub c: Array2<f64>,
    pub a: Option<Array2<Complex64>>,
}

/// Loss and analytic parameter gradients for explicit draws. Gradients of
/// complex parameters are packed as `dL/d(re) + i dL/d(im)`.
pub fn dsm_loss_and_grad(
    prior: &GaussianPrior,
    batch: &[Spectrogram],
    vs: Option<&[VisualEmbedding]>,
    sched: &DiffusionSchedule,
    draws: &[DsmDraw],
) -> Result<(f64, PriorGradient)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if draws.len() != batch.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} draws", batch.len()),
            got: format!("{}", draws.len()),
        });
    }
    if prior.conditional() && vs.is_none() {
        return Err(Error::MissingVisual);
    }
    let dim = prior.mu.dim();
    let mut g_mu = Array2::<Complex64>::zeros(dim);
    let mut g_c = Array2::<f64>::zeros(dim);
    let mut g_a = prior
        .conditioning
        .as_ref()
        .map(|a| Array2::<Complex64>::zeros(a.dim()));
    let mut total = 0.0;

    for (i, (s, draw)) in batch.iter().zip(draws.iter()).enumerate() {
        if s.data.dim() != dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{dim:?}"),
                got: format!("{:?}", s.data.dim()),
            });
        }
        let co = sched.coefficients(draw.t)?;
        let sigma = co.sigma_sq.sqrt();
        let v = vs.map(|vs| &vs[i]);
        let mu_eff = prior.effective_mean(v)?;

        // Per bin: D = delta^2 c + sigma^2, S = -(s_t - delta mu_eff)/D,
        // r = sigma S + zeta. Then dL/dmu = (2 sigma delta / D) r and
        // dL/dc = -(2 sigma delta^2 / D) Re(conj(r) S).
        let mut item_mu = Array2::<Complex64>::zeros(dim);
        for (((((gm, gc), z), m), &cv), zeta) in item_mu
            .iter_mut()
            .zip(g_c.iter_mut())
            .zip(s.data.iter())
            .zip(mu_eff.iter())
            .zip(prior.c.iter())
            .zip(draw.zeta.iter())
        {
            let d = co.delta * co.delta * cv + co.sigma_sq;
            let s_t = z * co.delta + zeta * sigma;
            let score = -(s_t - m * co.delta) / d;
            let r = score * sigma + zeta;
            total += r.norm_sqr();
            *gm = r * (2.0 * sigma * co.delta / d);
            *gc += -(2.0 * sigma * co.delta * co.delta / d) * (r.conj() * score).re;
        }
        if let (Some(g_a), Some(v)) = (g_a.as_mut(), v) {
            let q = v.pooled();
            let f = dim.0;
            for (l, mut row) in g_a.rows_mut().into_iter().enumerate() {
                let gm = item_mu[[l % f, l / f]];
                for (cell, &x) in row.iter_mut().zip(q.iter()) {
                    *cell += gm * x;
                }
            }
        }
        g_mu = g_mu + item_mu;
    }

    let n = batch.len() as f64;
    g_mu.mapv_inplace(|z| z / n);
    g_c.mapv_inplace(|x| x / n);
    if let Some(a) = g_a.as_mut() {
        a.mapv_inplace(|z| z / n);
    }
    Ok((total / n, PriorGradient { mu: g_mu, c: g_c, a: g_a }))
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub t_min: f64,
    /// Lower clamp keeping the variance strictly positive.
    pub c_floor: f64,
    /// Heavy-ball momentum; 0 is plain stochastic gradient.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-4,
            batch_size: 32,
            t_min: DSM_T_MIN,
            c_floor: 1e-8,
            momentum: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub prior: GaussianPrior,
    /// Batch loss at every step.
    pub loss_history: Vec<f64>,
}

/// Stochastic-gradient DSM training of a Gaussian prior.
pub fn train_dsm<R: Rng + ?Sized>(
    prior: &GaussianPrior,
    data: &[Spectrogram],
    vs: Option<&[VisualEmbedding]>,
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if prior.conditional() && vs.is_none() {
        return Err(Error::MissingVisual);
    }
    if let Some(vs) = vs {
        if vs.len() != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} embeddings", data.len()),
                got: format!("{}", vs.len()),
            });
        }
    }
    let mut current = prior.clone();
    let mut history = Vec::with_capacity(cfg.steps);
    let shape = current.mu.dim();

    let mut vel_mu = Array2::<Complex64>::zeros(shape);
    let mut vel_c = Array2::<f64>::zeros(shape);
    let mut vel_a = current
        .conditioning
        .as_ref()
        .map(|a| Array2::<Complex64>::zeros(a.dim()));

    for step in 0..cfg.steps {
        let indices: Vec<usize> = (0..cfg.batch_size.max(1))
            .map(|_| rng.gen_range(0..data.len()))
            .collect();
        let batch: Vec<Spectrogram> = indices.iter().map(|&i| data[i].clone()).collect();
        let batch_vs: Option<Vec<VisualEmbedding>> =
            vs.map(|vs| indices.iter().map(|&i| vs[i].clone()).collect());
        let draws = sample_dsm_draws(batch.len(), shape, cfg.t_min, rng);
        let (loss, grad) =
            dsm_loss_and_grad(&current, &batch, batch_vs.as_deref(), sched, &draws)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        history.push(loss);

        let lr = cfg.learning_rate;
        let m = cfg.momentum;
        ndarray::Zip::from(&mut vel_mu).and(&grad.mu).for_each(|v, g| *v = *v * m + g);
        ndarray::Zip::from(&mut vel_c).and(&grad.c).for_each(|v, g| *v = *v * m + g);
        ndarray::Zip::from(&mut current.mu).and(&vel_mu).for_each(|p, v| *p -= v * lr);
        ndarray::Zip::from(&mut current.c).and(&vel_c).for_each(|p, v| {
            *p = (*p - v * lr).max(cfg.c_floor);
        });
        if let (Some(a), Some(ga), Some(va)) =
            (current.conditioning.as_mut(), grad.a.as_ref(), vel_a.as_mut())
        {
            ndarray::Zip::from(&mut *va).and(ga).for_each(|v, g| *v = *v * m + g);
            ndarray::Zip::from(a).and(&*va).for_each(|p, v| *p -= v * lr);
        }
    }
    Ok(TrainOutcome { prior: current, loss_history: history })
}

const PRIOR_MAGIC: &[u8; 8] = b"UDPRIOR1";

/// Write a prior file: magic "UDPRIOR1", u32 F, u32 T, u8 conditional flag,
/// u32 p when conditional, then little-endian f64 blocks Re(mu), Im(mu), c
/// (each FT values, bins column-major) and, when conditional, Re(A), Im(A)
/// (FT x p values, bin-major rows).
pub fn save_prior(path: impl AsRef<Path>, prior: &GaussianPrior) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    out.write_all(PRIOR_MAGIC)?;
    out.write_all(&(prior.f() as u32).to_le_bytes())?;
    out.write_all(&(prior.t() as u32).to_le_bytes())?;
    out.write_all(&[u8::from(prior.conditional())])?;
    if let Some(a) = &prior.conditioning {
        out.write_all(&(a.ncols() as u32).to_le_bytes())?;
    }
    let flat_mu: Vec<Complex64> = prior.mu.t().iter().cloned().collect();
    for z in &flat_mu {
        out.write_all(&z.re.to_le_bytes())?;
    }
    for z in &flat_mu {
        out.write_all(&z.im.to_le_bytes())?;
    }
    for x in prior.c.t().iter() {
        out.write_all(&x.to_le_bytes())?;
    }
    if let Some(a) = &prior.conditioning {
        for z in a.iter() {
            out.write_all(&z.re.to_le_bytes())?;
        }
        for z in a.iter() {
            out.write_all(&z.im.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_prior(path: impl AsRef<Path>) -> Result<GaussianPrior> {
    let file = File::open(path.as_ref())?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Truncated {
        expected: 8,
        actual: file_len,
    })?;
    if &magic != PRIOR_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(PRIOR_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let f = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let t = u32::from_le_bytes(b4) as usize;
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let conditional = match b1[0] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::InvalidParam(format!(
                "conditional flag must be 0 or 1, found {other}"
            )))
        }
    };
    let p = if conditional {
        r.read_exact(&mut b4)?;
        u32::from_le_bytes(b4) as usize
    } else {
        0
    };

    let ft = (f as u64) * (t as u64);
    let header = 8 + 4 + 4 + 1 + if conditional { 4 } else { 0 };
    let expected = header + 8 * (3 * ft + if conditional { 2 * ft * p as u64 } else { 0 });
    if file_len != expected {
        return Err(Error::Truncated { expected, actual: file_len });
    }

    let mut read_block = |n: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut b8 = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            out.push(f64::from_le_bytes(b8));
        }
        Ok(out)
    };
    let ft = ft as usize;
    let re = read_block(ft)?;
    let im = read_block(ft)?;
    let c_flat = read_block(ft)?;

    let mut mu = Array2::<Complex64>::zeros((f, t));
    let mut c = Array2::<f64>::zeros((f, t));
    for l in 0..ft {
        mu[[l % f, l / f]] = Complex64::new(re[l], im[l]);
        c[[l % f, l / f]] = c_flat[l];
    }
    let prior = GaussianPrior::new(mu, c, StftConfig::default())?;
    if conditional {
        let a_re = read_block(ft * p)?;
        let a_im = read_block(ft * p)?;
        let a = Array2::from_shape_fn((ft, p), |(l, j)| {
            Complex64::new(a_re[l * p + j], a_im[l * p + j])
        });
        if a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFiniteFile);
        }
        prior.with_conditioning(a)
    } else {
        Ok(prior)
    }
}
