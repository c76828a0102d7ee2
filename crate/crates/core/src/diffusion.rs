//! Noise schedule, forward noising, training losses and deterministic DDIM
//! sampling with classifier-free guidance.

use candle_core::{Tensor, D};

use crate::attention::AttentionRecord;
use crate::error::{Error, Result};
use crate::network::Branch;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
/// Classifier-free guidance scale used at inference.
pub const DEFAULT_GUIDANCE: f64 = 1.5;
/// Per-layer weight of the temporal attention regularizer.
pub const DEFAULT_TRA_GAMMA: f64 = 0.5;
/// Regularizer weight for video clips; image batches use 0.
pub const VIDEO_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced from `beta_start` to `beta_end`.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::Config("noise schedule needs at least 2 steps".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < {beta_start} < {beta_end} < 1"
            )));
        }
        let step = (beta_end - beta_start) / (num_steps - 1) as f64;
        let betas: Vec<f64> = (0..num_steps).map(|i| beta_start + step * i as f64).collect();
        let mut alpha_bar = Vec::with_capacity(num_steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Index(format!("timestep {t} outside schedule of {}", self.num_steps())))
    }

    /// Evenly spaced descending timesteps for a `steps`-step sampler, always
    /// starting at the noisiest timestep.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let n = self.num_steps();
        if steps == 0 || steps > n {
            return Err(Error::Config(format!("sampling steps must be in 1..={n}, got {steps}")));
        }
        Ok((0..steps)
            .map(|i| ((n as f64 * (1.0 - i as f64 / steps as f64)).round() as usize).saturating_sub(1))
            .collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(DEFAULT_TRAIN_STEPS, BETA_START, BETA_END).expect("valid default schedule")
    }
}

/// `sqrt(alpha_bar) * z0 + sqrt(1 - alpha_bar) * eps` with an explicit
/// cumulative alpha.
pub fn add_noise_with(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::Shape(format!("z0 {:?} vs eps {:?}", z0.dims(), eps.dims())));
    }
    Ok(((z0 * alpha_bar.sqrt())? + (eps * (1.0 - alpha_bar).sqrt())?)?)
}

pub fn add_noise(z0: &Tensor, eps: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    add_noise_with(z0, eps, schedule.alpha_bar(t)?)
}

/// Forward noising with a separate timestep per leading-axis group of
/// `per_item` rows (one timestep per clip).
pub fn add_noise_batched(
    z0: &Tensor,
    eps: &Tensor,
    timesteps: &[usize],
    per_item: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(timesteps.len());
    for (i, &t) in timesteps.iter().enumerate() {
        let a = z0.narrow(0, i * per_item, per_item)?;
        let e = eps.narrow(0, i * per_item, per_item)?;
        parts.push(add_noise(&a, &e, t, schedule)?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Mean squared error over all elements.
pub fn ldm_loss(eps_pred: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if eps_pred.dims() != eps.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            eps_pred.dims(),
            eps.dims()
        )));
    }
    Ok((eps_pred - eps)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the temporal regularizer in the total loss.
    pub lambda: f64,
    /// One weight per regularized layer.
    pub gammas: Vec<f64>,
    pub tra_layers: Vec<String>,
}

impl LossConfig {
    pub fn new(lambda: f64) -> Self {
        LossConfig {
            lambda,
            gammas: vec![DEFAULT_TRA_GAMMA; 2],
            tra_layers: crate::network::TRA_STAGES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Temporal regularized attention loss:
/// `sum_i gamma_i * sum_{j>=2} mean|A_i^(j) - A_i^(j-1)|`, averaged over the
/// batch. Records whose layer is not listed in `cfg.tra_layers` are ignored.
/// Single-frame records contribute zero.
pub fn tra_loss(records: &[AttentionRecord], cfg: &LossConfig) -> Result<Tensor> {
    if cfg.gammas.len() != cfg.tra_layers.len() {
        return Err(Error::Config(format!(
            "{} gammas for {} regularized layers",
            cfg.gammas.len(),
            cfg.tra_layers.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    let mut shape: Option<Vec<usize>> = None;
    for (layer, &gamma) in cfg.tra_layers.iter().zip(&cfg.gammas) {
        let Some(rec) = records.iter().find(|r| &r.layer == layer) else {
            return Err(Error::Config(format!("no attention record for layer `{layer}`")));
        };
        let (b, t, _, _) = rec.probs.dims4().map_err(|_| {
            Error::Shape(format!("attention record `{layer}` must be [B, T, S_q, S_k]"))
        })?;
        if let Some(s) = &shape {
            if s[0] != b || s[1] != t {
                return Err(Error::Shape("attention records disagree in batch/frames".into()));
            }
        }
        shape = Some(rec.probs.dims().to_vec());
        let term = if t < 2 {
            rec.probs.zeros_like()?.sum_all()?
        } else {
            let later = rec.probs.narrow(1, 1, t - 1)?;
            let earlier = rec.probs.narrow(1, 0, t - 1)?;
            // mean over batch and map entries, summed over frame pairs
            let per_pair = (later - earlier)?
                .abs()?
                .flatten_from(2)?
                .mean(D::Minus1)?
                .mean(0)?;
            (per_pair.sum_all()? * gamma)?
        };
        total = Some(match total {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Err(Error::Config("no regularized layers configured".into())),
    }
}

/// The individual loss terms of one evaluation.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub ldm: Tensor,
    pub tra: Tensor,
    pub total: Tensor,
}

/// `ldm + lambda * tra`.
pub fn total_loss(
    eps_pred: &Tensor,
    eps: &Tensor,
    records: &[AttentionRecord],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let ldm = ldm_loss(eps_pred, eps)?;
    let tra = tra_loss(records, cfg)?;
    let total = if cfg.lambda == 0.0 {
        ldm.clone()
    } else {
        (&ldm + (&tra * cfg.lambda)?)?
    };
    Ok(LossTerms { ldm, tra, total })
}

/// A noise predictor that can be queried with or without the garment condition.
pub trait GuidedDenoiser {
    fn predict_eps(&self, z_t: &Tensor, t: usize, branch: Branch) -> Result<Tensor>;
}

impl<F> GuidedDenoiser for F
where
    F: Fn(&Tensor, usize, Branch) -> Result<Tensor>,
{
    fn predict_eps(&self, z_t: &Tensor, t: usize, branch: Branch) -> Result<Tensor> {
        self(z_t, t, branch)
    }
}

/// `eps_uncond + s * (eps_cond - eps_uncond)`; the unconditional pass is
/// skipped when `s == 1`, and the conditional one when `s == 0`.
pub fn guided_eps<M: GuidedDenoiser + ?Sized>(model: &M, z_t: &Tensor, t: usize, scale: f64) -> Result<Tensor> {
    if scale == 1.0 {
        return model.predict_eps(z_t, t, Branch::Conditional);
    }
    let uncond = model.predict_eps(z_t, t, Branch::Unconditional)?;
    if scale == 0.0 {
        return Ok(uncond);
    }
    let cond = model.predict_eps(z_t, t, Branch::Conditional)?;
    Ok((&uncond + ((cond - &uncond)? * scale)?)?)
}

/// Deterministic (eta = 0) DDIM from `init_noise` down to a clean latent.
/// The last step jumps to alpha_bar = 1, returning the x0 prediction.
pub fn ddim_sample<M: GuidedDenoiser + ?Sized>(
    model: &M,
    init_noise: &Tensor,
    schedule: &NoiseSchedule,
    steps: usize,
    guidance_scale: f64,
) -> Result<Tensor> {
    if guidance_scale < 0.0 || !guidance_scale.is_finite() {
        return Err(Error::Config(format!("guidance scale {guidance_scale} must be >= 0")));
    }
    let ts = schedule.sampling_timesteps(steps)?;
    let mut z = init_noise.clone();
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = match ts.get(i + 1) {
            Some(&p) => schedule.alpha_bar(p)?,
            None => 1.0,
        };
        let eps = guided_eps(model, &z, t, guidance_scale)?;
        let x0 = ((&z - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        z = ((x0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util;
    use candle_core::{DType, Device};

    fn rec(layer: &str, data: Vec<f64>, shape: (usize, usize, usize, usize)) -> AttentionRecord {
        AttentionRecord {
            layer: layer.into(),
            probs: Tensor::from_vec(data, shape, &Device::Cpu).unwrap(),
        }
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::default();
        assert_eq!(s.num_steps(), 1000);
        assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bar.windows(2).all(|w| w[0] > w[1]));
        assert!(s.alpha_bar.iter().all(|&a| a > 0.0 && a < 1.0));
        let mut acc = 1.0;
        for (b, a) in s.betas.iter().zip(&s.alpha_bar) {
            acc *= 1.0 - b;
            assert!((acc - a).abs() < 1e-12);
        }
        assert!(s.alpha_bar(1000).is_err());
    }

    #[test]
    fn sampling_timesteps_descend_from_last() {
        let s = NoiseSchedule::default();
        assert_eq!(s.sampling_timesteps(1).unwrap(), vec![999]);
        let ts = s.sampling_timesteps(10).unwrap();
        assert_eq!(ts[0], 999);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.sampling_timesteps(1000).unwrap().last(), Some(&0));
        assert!(s.sampling_timesteps(0).is_err());
    }

    #[test]
    fn add_noise_cases() {
        let dev = Device::Cpu;
        let z0 = Tensor::ones((2, 3), DType::F64, &dev).unwrap();
        let eps = Tensor::zeros((2, 3), DType::F64, &dev).unwrap();
        let z = add_noise_with(&z0, &eps, 0.25).unwrap();
        assert!(util::to_vec_f64(&z).unwrap().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let e2 = Tensor::full(3.0f64, (2, 3), &dev).unwrap();
        assert_eq!(util::to_vec_f64(&add_noise_with(&z0, &e2, 1.0).unwrap()).unwrap(), vec![1.0; 6]);
        assert_eq!(util::to_vec_f64(&add_noise_with(&z0, &e2, 0.0).unwrap()).unwrap(), vec![3.0; 6]);
        assert!(matches!(add_noise(&z0, &eps, 5000, &NoiseSchedule::default()), Err(Error::Index(_))));
    }

    #[test]
    fn ldm_loss_cases() {
        let mut rng = util::rng(1);
        let a = util::randn(&mut rng, &[3, 4, 2, 2], DType::F64, &Device::Cpu).unwrap();
        assert_eq!(util::scalar_f64(&ldm_loss(&a, &a).unwrap()).unwrap(), 0.0);
        let l = util::scalar_f64(&ldm_loss(&(&a + 1.0).unwrap(), &a).unwrap()).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        let b = util::randn(&mut rng, &[3, 4, 2, 2], DType::F64, &Device::Cpu).unwrap();
        let (va, vb) = (util::to_vec_f64(&a).unwrap(), util::to_vec_f64(&b).unwrap());
        let oracle: f64 = va.iter().zip(&vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / va.len() as f64;
        let got = util::scalar_f64(&ldm_loss(&a, &b).unwrap()).unwrap();
        assert!((got - oracle).abs() < 1e-7);
    }

    #[test]
    fn tra_hand_computed() {
        let cfg = LossConfig {
            lambda: 1.0,
            gammas: vec![0.5],
            tra_layers: vec!["l".into()],
        };
        let r = rec("l", vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0], (1, 2, 2, 2));
        let v = util::scalar_f64(&tra_loss(&[r], &cfg).unwrap()).unwrap();
        assert_eq!(v, 0.5);
        let same = rec("l", vec![0.3, 0.7, 0.3, 0.7], (1, 2, 1, 2));
        assert_eq!(util::scalar_f64(&tra_loss(&[same], &cfg).unwrap()).unwrap(), 0.0);
        let single = rec("l", vec![0.3, 0.7], (1, 1, 1, 2));
        assert_eq!(util::scalar_f64(&tra_loss(&[single], &cfg).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn tra_missing_layer_is_error() {
        let cfg = LossConfig::new(1.0);
        let r = rec("other", vec![1.0, 0.0], (1, 1, 1, 2));
        assert!(tra_loss(&[r], &cfg).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let dev = Device::Cpu;
        let zero = Tensor::zeros((1, 1), DType::F64, &dev).unwrap();
        let one = Tensor::ones((1, 1), DType::F64, &dev).unwrap();
        let r = rec("l", vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0], (1, 2, 2, 2));
        let cfg = LossConfig {
            lambda: 1e-3,
            gammas: vec![0.5],
            tra_layers: vec!["l".into()],
        };
        let t = total_loss(&one, &zero, std::slice::from_ref(&r), &cfg).unwrap();
        assert!((util::scalar_f64(&t.total).unwrap() - 1.0005).abs() < 1e-12);
        let cfg0 = LossConfig { lambda: 0.0, ..cfg.clone() };
        let t0 = total_loss(&one, &zero, std::slice::from_ref(&r), &cfg0).unwrap();
        assert_eq!(util::scalar_f64(&t0.total).unwrap(), util::scalar_f64(&t0.ldm).unwrap());
        let flat = rec("l", vec![0.5; 8], (1, 2, 2, 2));
        let tz = total_loss(&zero, &zero, &[flat], &cfg).unwrap();
        assert_eq!(util::scalar_f64(&tz.total).unwrap(), 0.0);
    }

    #[test]
    fn guidance_scale_one_is_conditional() {
        let dev = Device::Cpu;
        let model = |z: &Tensor, _t: usize, b: Branch| -> Result<Tensor> {
            Ok(match b {
                Branch::Conditional => (z * 2.0)?,
                Branch::Unconditional => (z * -7.0)?,
            })
        };
        let z = Tensor::new(&[1.5f64, -2.0], &dev).unwrap();
        let e = guided_eps(&model, &z, 3, 1.0).unwrap();
        assert_eq!(util::to_vec_f64(&e).unwrap(), vec![3.0, -4.0]);
        let e = guided_eps(&model, &z, 3, 1.5).unwrap();
        let want: Vec<f64> = [1.5f64, -2.0].iter().map(|v| -7.0 * v + 1.5 * (2.0 * v + 7.0 * v)).collect();
        for (g, w) in util::to_vec_f64(&e).unwrap().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_one_step_recovers_clean_latent() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::default();
        let mut rng = util::rng(4);
        let z0 = util::randn(&mut rng, &[2, 4, 3, 3], DType::F64, &dev).unwrap();
        let eps = util::randn(&mut rng, &[2, 4, 3, 3], DType::F64, &dev).unwrap();
        let t = s.sampling_timesteps(1).unwrap()[0];
        let zt = add_noise(&z0, &eps, t, &s).unwrap();
        let oracle = |_z: &Tensor, _t: usize, _b: Branch| -> Result<Tensor> { Ok(eps.clone()) };
        let out = ddim_sample(&oracle, &zt, &s, 1, 1.5).unwrap();
        let err = (out - &z0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 1e-9, "{err}");
        assert!(ddim_sample(&oracle, &zt, &s, 0, 1.5).is_err());
    }
}
