use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Linear-beta DDPM schedule. Tables are indexed by timestep `t` in `1..=T`
/// (index `t - 1` in the vectors).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub params: ScheduleParams,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps < 10 {
        return Err(invalid(format!("need at least 10 timesteps, got {timesteps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!("beta range [{beta_start}, {beta_end}] must satisfy 0 < start <= end < 1")));
    }
    let betas: Vec<f64> = (0..timesteps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, &a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { params: ScheduleParams { timesteps, beta_start, beta_end }, betas, alphas, alpha_bars })
}

impl NoiseSchedule {
    pub fn from_params(p: ScheduleParams) -> Result<Self> {
        make_schedule(p.timesteps, p.beta_start, p.beta_end)
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(invalid(format!("timestep {t} outside 1..={}", self.timesteps())));
        }
        Ok(())
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 { 1.0 } else { self.alpha_bars[t - 1] }
    }

    /// `steps` timesteps spread uniformly over `1..=T`, descending, ending at 1.
    pub fn strided(&self, steps: usize) -> Result<Vec<usize>> {
        let big_t = self.timesteps();
        if steps == 0 || steps > big_t {
            return Err(invalid(format!("sampling steps {steps} not in 1..={big_t}")));
        }
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| 1 + ((i as f64) * (big_t - 1) as f64 / (steps.max(2) - 1) as f64).round() as usize)
            .collect();
        if steps == 1 {
            ts = vec![big_t];
        }
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }
}

/// √ᾱ_t·x0 + √(1−ᾱ_t)·eps for one shared timestep.
pub fn q_sample<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    q_sample_batch(x0, &vec![t; x0.shape()[0]], eps, sched)
}

/// Forward process with a timestep per sample along the leading axis.
pub fn q_sample_batch<T: Scalar>(x0: &Tensor<T>, t: &[usize], eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(invalid(format!("x0 {:?} and eps {:?} differ in shape", x0.shape(), eps.shape())));
    }
    if t.len() != x0.shape()[0] {
        return Err(invalid(format!("{} timesteps for a batch of {}", t.len(), x0.shape()[0])));
    }
    let mut out = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        sched.check_t(ti)?;
        let ab = sched.alpha_bar(ti);
        let (a, b) = (T::from_f64(ab.sqrt()).unwrap(), T::from_f64((1.0 - ab).sqrt()).unwrap());
        for (o, &e) in out.item_mut(i).iter_mut().zip(eps.item(i)) {
            *o = a * *o + b * e;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_schedule_values() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        // independent evaluation of the cumulative product
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 1e-3);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas.windows(2).all(|w| w[1] >= w[0]) && s.betas.iter().all(|&b| b > 0.0));
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(make_schedule(5, 1e-4, 0.02).is_err());
        assert!(make_schedule(100, 0.0, 0.02).is_err());
        assert!(make_schedule(100, 0.03, 0.02).is_err());
        assert!(make_schedule(100, 1e-4, 1.0).is_err());
    }

    #[test]
    fn strided_steps() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let ts = s.strided(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], *ts.last().unwrap()), (1000, 1));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert!(s.strided(1001).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::<f64>::randn(&[1, 1, 4, 4], &mut rng);
        let zero = Tensor::zeros(&[1, 1, 4, 4]);
        let out = q_sample(&x0, 300, &zero, &s).unwrap();
        let a = s.alpha_bar(300).sqrt();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert!((o - a * x).abs() < 1e-15);
        }
        let eps = Tensor::randn(&[1, 1, 4, 4], &mut rng);
        let near = q_sample(&x0, 1, &eps, &s).unwrap();
        let max_dev = near.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_dev < 0.05);
        assert!(q_sample(&x0, 0, &eps, &s).is_err());
        assert!(q_sample(&x0, 1001, &eps, &s).is_err());
    }
}
