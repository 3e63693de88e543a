//! Closed-form DDPM mathematics: noise schedule, forward corruption,
//! instruction perturbation, the ε-prediction loss and the ancestral
//! reverse step.
//!
//! Step indices are 1-based throughout (`1..=T`). Every random quantity is
//! an explicit argument, so all functions here are pure.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::conditioning::ImageCondition;
use crate::error::{arg, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    #[default]
    Linear,
}

/// β/ᾱ tables for a discrete diffusion process, kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
    /// Step index of the underlying training schedule that each entry
    /// corresponds to. Identity unless the schedule was respaced.
    model_steps: Vec<usize>,
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: BetaKind,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return arg("schedule needs at least one step");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return arg(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        ));
    }
    let betas = match kind {
        BetaKind::Linear if steps == 1 => vec![beta_start],
        BetaKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return arg("schedule needs at least one step");
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return arg(format!("beta {b} outside (0, 1)"));
        }
        let model_steps = (1..=betas.len()).collect();
        Ok(Self::build(betas, model_steps))
    }

    fn build(betas: Vec<f64>, model_steps: Vec<usize>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_vars = (0..betas.len())
            .map(|i| {
                if i == 0 {
                    betas[0]
                } else {
                    betas[i] * (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i])
                }
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
            model_steps,
        }
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return arg(format!("step {t} outside [1, {}]", self.len()));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.idx(t)?])
    }

    pub fn posterior_var(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_vars[self.idx(t)?])
    }

    /// The training-schedule step the model should be told about at `t`.
    pub fn model_step(&self, t: usize) -> Result<usize> {
        Ok(self.model_steps[self.idx(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Sub-schedule over `count` evenly strided steps `1, 1+k, 1+2k, ...`
    /// whose cumulative products agree with `self` at the kept steps. Running
    /// the ancestral sampler over it is exact DDPM on that subsequence.
    pub fn respaced(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.len() {
            return arg(format!("cannot respace {} steps to {count}", self.len()));
        }
        let kept: Vec<usize> = (0..count).map(|k| 1 + k * self.len() / count).collect();
        let mut betas = Vec::with_capacity(count);
        let mut prev = 1.0;
        for &t in &kept {
            let ab = self.alpha_bars[t - 1];
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        Ok(Self::build(betas, kept))
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
pub fn forward_diffuse(
    x0: &Tensor,
    t: usize,
    noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_same_shape(x0, noise, "forward_diffuse")?;
    let ab = sched.alpha_bar(t)?;
    Ok((x0.affine(ab.sqrt(), 0.0)? + noise.affine((1.0 - ab).sqrt(), 0.0)?)?)
}

/// Batched [`forward_diffuse`] with one step per leading-dimension entry.
pub fn forward_diffuse_batch(
    x0: &Tensor,
    steps: &[usize],
    noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_same_shape(x0, noise, "forward_diffuse_batch")?;
    if x0.dim(0)? != steps.len() {
        return Err(Error::Shape(format!(
            "{} steps for batch of {}",
            steps.len(),
            x0.dim(0)?
        )));
    }
    let mut signal = Vec::with_capacity(steps.len());
    let mut spread = Vec::with_capacity(steps.len());
    for &t in steps {
        let ab = sched.alpha_bar(t)?;
        signal.push(ab.sqrt());
        spread.push((1.0 - ab).sqrt());
    }
    let mut coef_shape = vec![1usize; x0.rank()];
    coef_shape[0] = steps.len();
    let coef = |v: Vec<f64>| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, coef_shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?)
    };
    let a = x0.broadcast_mul(&coef(signal)?)?;
    let b = noise.broadcast_mul(&coef(spread)?)?;
    Ok((a + b)?)
}

/// Noises the occupied instruction slots of an image condition at level
/// `t_pert`. Slots not listed in `active_slots` are passed through untouched,
/// so padding and dropped instructions stay exactly zero.
pub fn perturb_instruction(
    cond: &ImageCondition,
    sched: &NoiseSchedule,
    t_pert: usize,
    noise: &Tensor,
    active_slots: &[usize],
) -> Result<ImageCondition> {
    let data = cond.tensor();
    check_same_shape(data, noise, "perturb_instruction")?;
    let frames = data.dim(0)?;
    for &s in active_slots {
        if s != 0 && s != frames - 1 {
            return arg(format!(
                "slot {s} is not an instruction slot (only 0 and {} are)",
                frames - 1
            ));
        }
    }
    sched.alpha_bar(t_pert)?;
    if active_slots.is_empty() {
        return Ok(cond.clone());
    }
    let mut slots = Vec::with_capacity(frames);
    for f in 0..frames {
        let slot = data.narrow(0, f, 1)?;
        if active_slots.contains(&f) {
            slots.push(forward_diffuse(&slot, t_pert, &noise.narrow(0, f, 1)?, sched)?);
        } else {
            slots.push(slot);
        }
    }
    Ok(cond.with_tensor(Tensor::cat(&slots, 0)?))
}

/// Mean squared error over all elements, as a scalar tensor so it can be
/// differentiated.
pub fn eps_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<Tensor> {
    check_same_shape(eps_hat, eps, "eps_loss")?;
    Ok((eps_hat - eps)?.sqr()?.mean_all()?)
}

pub fn eps_loss_value(eps_hat: &Tensor, eps: &Tensor) -> Result<f64> {
    Ok(eps_loss(eps_hat, eps)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?)
}

/// One ancestral DDPM step `x_t → x_{t−1}` with variance `β̃_t`.
///
/// `step_noise` of `None` means zero noise. At `t = 1` the step is
/// deterministic and any nonzero noise is rejected.
pub fn ddpm_ancestral_step(
    xt: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    step_noise: Option<&Tensor>,
) -> Result<Tensor> {
    check_same_shape(xt, eps_hat, "ddpm_ancestral_step")?;
    let beta = sched.beta(t)?;
    let alpha = sched.alpha(t)?;
    let ab = sched.alpha_bar(t)?;
    let mean = ((xt - eps_hat.affine(beta / (1.0 - ab).sqrt(), 0.0)?)?
        .affine(1.0 / alpha.sqrt(), 0.0))?;
    match step_noise {
        None => Ok(mean),
        Some(z) => {
            check_same_shape(xt, z, "ddpm_ancestral_step noise")?;
            if t == 1 {
                let peak = z.abs()?.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                if peak != 0.0 {
                    return arg("step noise must be zero at t = 1");
                }
                return Ok(mean);
            }
            let sigma = sched.posterior_var(t)?.sqrt();
            Ok((mean + z.affine(sigma, 0.0)?)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise;
    use candle_core::Device;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[v], &Device::Cpu).unwrap()
    }

    fn first(t: &Tensor) -> f64 {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn default_schedule_matches_direct_product() {
        let s = make_schedule(1000, 1e-4, 0.02, BetaKind::Linear).unwrap();
        let mut prod = 1.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        let got = s.alpha_bar(1000).unwrap();
        assert!((got - prod).abs() < 1e-15, "{got} vs {prod}");
        assert!(got > 3e-5 && got < 5e-5, "{got}");
    }

    #[test]
    fn small_schedules_by_hand() {
        let one = make_schedule(1, 0.1, 0.1, BetaKind::Linear).unwrap();
        assert!((one.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        let two = make_schedule(2, 0.1, 0.2, BetaKind::Linear).unwrap();
        assert!((two.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((two.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
        assert_eq!(two.posterior_var(1).unwrap(), 0.1);
    }

    #[test]
    fn schedule_rejects_bad_arguments() {
        assert!(make_schedule(0, 1e-4, 0.02, BetaKind::Linear).is_err());
        assert!(make_schedule(10, 0.0, 0.02, BetaKind::Linear).is_err());
        assert!(make_schedule(10, 0.03, 0.02, BetaKind::Linear).is_err());
        assert!(make_schedule(10, 0.1, 1.0, BetaKind::Linear).is_err());
        let s = make_schedule(10, 1e-4, 0.02, BetaKind::Linear).unwrap();
        assert!(s.alpha_bar(0).is_err());
        assert!(s.alpha_bar(11).is_err());
    }

    #[test]
    fn schedule_invariants() {
        let s = make_schedule(1000, 1e-4, 0.02, BetaKind::Linear).unwrap();
        for t in 2..=1000 {
            let (ab, prev) = (s.alpha_bar(t).unwrap(), s.alpha_bar(t - 1).unwrap());
            assert!(ab < prev);
            let ratio = ab / prev;
            assert!((ratio - s.alpha(t).unwrap()).abs() / s.alpha(t).unwrap() < 1e-12);
            assert!(s.posterior_var(t).unwrap() >= 0.0);
        }
    }

    #[test]
    fn respacing_keeps_cumulative_products() {
        let s = make_schedule(1000, 1e-4, 0.02, BetaKind::Linear).unwrap();
        let r = s.respaced(50).unwrap();
        assert_eq!(r.len(), 50);
        assert_eq!(r.model_step(1).unwrap(), 1);
        assert_eq!(r.model_step(2).unwrap(), 21);
        assert_eq!(r.model_step(50).unwrap(), 981);
        for k in 1..=50 {
            let t = r.model_step(k).unwrap();
            let rel = (r.alpha_bar(k).unwrap() - s.alpha_bar(t).unwrap()).abs()
                / s.alpha_bar(t).unwrap();
            assert!(rel < 1e-12);
        }
        let full = s.respaced(1000).unwrap();
        for (a, b) in full.betas().iter().zip(s.betas()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_diffuse_examples() {
        let two = make_schedule(2, 0.1, 0.2, BetaKind::Linear).unwrap();
        let out = forward_diffuse(&scalar(1.0), 2, &scalar(1.0), &two).unwrap();
        assert!((first(&out) - (0.72f64.sqrt() + 0.28f64.sqrt())).abs() < 1e-12);
        assert!((first(&out) - 1.3777).abs() < 1e-4);

        let tiny = make_schedule(1, 1e-300, 1e-300, BetaKind::Linear).unwrap();
        let x0 = Tensor::new(&[0.25f64, -3.0], &Device::Cpu).unwrap();
        let n = Tensor::new(&[5.0f64, 7.0], &Device::Cpu).unwrap();
        let out = forward_diffuse(&x0, 1, &n, &tiny).unwrap();
        assert_eq!(out.to_vec1::<f64>().unwrap(), vec![0.25, -3.0]);

        let zero = Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap();
        let out = forward_diffuse(&zero, 2, &n, &two).unwrap().to_vec1::<f64>().unwrap();
        assert!((out[0] - 0.28f64.sqrt() * 5.0).abs() < 1e-12);

        let bad = Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(forward_diffuse(&zero, 1, &bad, &two), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_diffuse_moments() {
        let s = make_schedule(1000, 1e-4, 0.02, BetaKind::Linear).unwrap();
        let n = 10_000usize;
        let x0 = [0.7f64, -1.2, 0.0];
        for &t in &[1usize, 100, 500, 1000] {
            let mut rng = noise::seeded(t as u64);
            let x = Tensor::new(&x0, &Device::Cpu).unwrap().broadcast_as((n, 3)).unwrap().contiguous().unwrap();
            let eps = noise::gaussian(&mut rng, (n, 3), DType::F64, &Device::Cpu).unwrap();
            let out = forward_diffuse(&x, t, &eps, &s).unwrap().to_vec2::<f64>().unwrap();
            let ab = s.alpha_bar(t).unwrap();
            for j in 0..3 {
                let mean = out.iter().map(|r| r[j]).sum::<f64>() / n as f64;
                let var = out.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                let bound = 4.0 * ((1.0 - ab) / n as f64).sqrt();
                assert!((mean - ab.sqrt() * x0[j]).abs() <= bound, "t={t} mean {mean}");
                assert!((var - (1.0 - ab)).abs() <= 0.1 * (1.0 - ab), "t={t} var {var}");
            }
        }
    }

    #[test]
    fn batch_forward_matches_single() {
        let s = make_schedule(100, 1e-4, 0.02, BetaKind::Linear).unwrap();
        let mut rng = noise::seeded(3);
        let x = noise::gaussian(&mut rng, (3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let e = noise::gaussian(&mut rng, (3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let steps = [1, 50, 100];
        let batch = forward_diffuse_batch(&x, &steps, &e, &s).unwrap();
        for (i, &t) in steps.iter().enumerate() {
            let single = forward_diffuse(&x.get(i).unwrap(), t, &e.get(i).unwrap(), &s).unwrap();
            let diff = (batch.get(i).unwrap() - single).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-15);
        }
    }

    #[test]
    fn eps_loss_examples() {
        let mut rng = noise::seeded(11);
        let eps = noise::gaussian(&mut rng, (2, 2), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(eps_loss_value(&eps, &eps).unwrap(), 0.0);
        let shifted = eps.affine(1.0, 0.3).unwrap();
        assert!((eps_loss_value(&shifted, &eps).unwrap() - 0.09).abs() < 1e-12);

        let other = noise::gaussian(&mut rng, (2, 2), DType::F64, &Device::Cpu).unwrap();
        let (a, b) = (other.to_vec2::<f64>().unwrap(), eps.to_vec2::<f64>().unwrap());
        let mut acc = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                acc += (a[i][j] - b[i][j]).powi(2);
            }
        }
        assert!((eps_loss_value(&other, &eps).unwrap() - acc / 4.0).abs() < 1e-12);
        assert!(eps_loss(&other, &eps.flatten_all().unwrap()).is_err());
    }

    #[test]
    fn ancestral_step_examples() {
        let two = make_schedule(2, 0.1, 0.2, BetaKind::Linear).unwrap();
        let out = ddpm_ancestral_step(&scalar(1.0), &scalar(0.5), 2, &two, None).unwrap();
        let expect = (1.0 / 0.8f64.sqrt()) * (1.0 - 0.2 * 0.5 / 0.28f64.sqrt());
        assert!((first(&out) - expect).abs() < 1e-12);
        assert!((first(&out) - 0.906745).abs() < 1e-6);

        let out = ddpm_ancestral_step(&scalar(2.0), &scalar(0.0), 2, &two, Some(&scalar(0.0))).unwrap();
        assert!((first(&out) - 2.0 / 0.8f64.sqrt()).abs() < 1e-12);

        assert!(ddpm_ancestral_step(&scalar(1.0), &scalar(0.0), 1, &two, Some(&scalar(0.1))).is_err());
        assert!(ddpm_ancestral_step(&scalar(1.0), &scalar(0.0), 1, &two, Some(&scalar(0.0))).is_ok());
    }

    #[test]
    fn one_step_recovery_single_precision() {
        let s = make_schedule(1000, 1e-4, 0.02, BetaKind::Linear).unwrap();
        let mut rng = noise::seeded(5);
        let x0 = noise::gaussian(&mut rng, (4, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let eps = noise::gaussian(&mut rng, (4, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let xt = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        let back = ddpm_ancestral_step(&xt, &eps, 1, &s, None).unwrap();
        let err = (back - &x0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        let scale = x0.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(err / scale < 1e-6, "{err}");
    }
}
