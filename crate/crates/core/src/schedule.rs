//! Diffusion noise schedule, forward noising, the reverse kernel and the
//! truncated generative sampler.
//!
//! Tables are indexed by the step `t` in `1..=len()`. Index 0 holds the
//! boundary values `alpha_bar = 1`, `beta = sigma = 0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    /// Step of the original schedule that each entry stands for.
    timesteps: Vec<usize>,
}

/// Linear schedule with `steps` entries from `beta_start` to `beta_end`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(
            "make_schedule",
            format!("need steps >= 1 and 0 < beta_start <= beta_end < 1, got {steps}, {beta_start}, {beta_end}"),
        ));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect::<Vec<_>>();
    NoiseSchedule::from_betas(&betas)
}

fn ratio(num: f64, den: f64) -> f64 {
    // 0/0 arises only on degenerate noise-free steps
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl NoiseSchedule {
    /// Builds tables from explicit `beta_1..beta_T`. Zero betas are allowed,
    /// which gives a noise-free schedule.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::invalid("schedule", "betas must be non-empty and lie in [0, 1)"));
        }
        let timesteps = (0..=betas.len()).collect();
        Ok(Self::build(betas, timesteps))
    }

    fn build(betas: &[f64], timesteps: Vec<usize>) -> Self {
        let mut beta = vec![0.0];
        let mut alpha_bar = vec![1.0];
        let mut sigma = vec![0.0];
        for &b in betas {
            let prev = *alpha_bar.last().expect("seeded");
            let cur = prev * (1.0 - b);
            let var = ratio(1.0 - prev, 1.0 - cur) * b;
            beta.push(b);
            alpha_bar.push(cur);
            sigma.push(var.sqrt());
        }
        NoiseSchedule {
            beta,
            alpha_bar,
            sigma,
            timesteps,
        }
    }

    /// Number of steps.
    pub fn len(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.len() || (t == 0 && !allow_zero) {
            return Err(Error::invalid(
                "schedule",
                format!("step {t} outside {}..={}", u8::from(!allow_zero), self.len()),
            ));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Original-schedule step represented by entry `t`; identity unless
    /// this schedule came from [`subsequence_schedule`].
    pub fn timestep(&self, t: usize) -> usize {
        self.timesteps[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta[1..]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar[1..]
    }

    /// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn forward_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check(t, false)?;
        let (a, b) = (self.alpha_bar[t].sqrt(), (1.0 - self.alpha_bar[t]).sqrt());
        x0.zip_map(eps, |x, e| (a * x as f64 + b * e as f64) as f32)
            .map_err(|_| Error::shape("forward_sample", x0.shape(), eps.shape()))
    }

    /// Mean of the learned reverse transition at step `t`.
    pub fn posterior_mean(&self, x_t: &Tensor, eps_hat: &Tensor, t: usize) -> Result<Tensor> {
        self.check(t, false)?;
        let inv = 1.0 / (1.0 - self.beta[t]).sqrt();
        let coef = ratio(self.beta[t], (1.0 - self.alpha_bar[t]).sqrt());
        x_t.zip_map(eps_hat, |x, e| (inv * (x as f64 - coef * e as f64)) as f32)
            .map_err(|_| Error::shape("posterior_mean", x_t.shape(), eps_hat.shape()))
    }

    /// One stochastic reverse step: posterior mean plus `sigma_t z`.
    pub fn reverse_step(&self, x_t: &Tensor, eps_hat: &Tensor, t: usize, z: &Tensor) -> Result<Tensor> {
        let mean = self.posterior_mean(x_t, eps_hat, t)?;
        let s = self.sigma[t];
        mean.zip_map(z, |m, z| (m as f64 + s * z as f64) as f32)
            .map_err(|_| Error::shape("reverse_step", x_t.shape(), z.shape()))
    }
}

/// Keeps `steps` evenly spaced entries `t_i = floor(i T / steps)` of the
/// first `horizon` steps and rebuilds the tables so that every kept
/// `alpha_bar` is unchanged.
pub fn subsequence_schedule(sched: &NoiseSchedule, steps: usize, horizon: usize) -> Result<NoiseSchedule> {
    if steps == 0 || steps > horizon || horizon > sched.len() {
        return Err(Error::invalid(
            "subsequence_schedule",
            format!("need 1 <= steps ({steps}) <= horizon ({horizon}) <= {}", sched.len()),
        ));
    }
    let picks: Vec<usize> = (0..=steps).map(|i| i * horizon / steps).collect();
    let betas: Vec<f64> = picks
        .windows(2)
        .map(|w| 1.0 - ratio(sched.alpha_bar[w[1]], sched.alpha_bar[w[0]]).clamp(0.0, 1.0))
        .collect();
    let timesteps = picks.iter().map(|&t| sched.timesteps[t]).collect();
    let mut out = NoiseSchedule::build(&betas, timesteps);
    // store the exact marginals rather than the re-multiplied products
    for (i, &t) in picks.iter().enumerate() {
        out.alpha_bar[i] = sched.alpha_bar[t];
    }
    Ok(out)
}

/// Anything that predicts the noise in `x_t` given the condition pair.
pub trait ScoreModel {
    fn predict(&self, moving: &Tensor, fixed: &Tensor, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// The zero predictor.
impl ScoreModel for () {
    fn predict(&self, _: &Tensor, _: &Tensor, x_t: &Tensor, _: usize) -> Result<Tensor> {
        Ok(Tensor::zeros(x_t.shape()))
    }
}

/// Sampling settings for [`generate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateParams {
    /// Noise level the moving image is diffused to before denoising.
    pub horizon: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for GenerateParams {
    fn default() -> Self {
        GenerateParams {
            horizon: 200,
            steps: 80,
            seed: 0,
        }
    }
}

/// Diffuses the moving image to step `horizon`, then denoises it back to
/// step 0 under the conditional score model. The result is clamped to
/// `[-1, 1]`.
pub fn generate(
    model: &impl ScoreModel,
    moving: &Tensor,
    fixed: &Tensor,
    sched: &NoiseSchedule,
    params: GenerateParams,
) -> Result<Tensor> {
    generate_traced(model, moving, fixed, sched, params, |_, _| Ok(()))
}

/// [`generate`], handing every intermediate state to `trace` together
/// with its step in the original schedule: first the noised moving image
/// at `horizon`, then the state after each reverse step (step 0 last,
/// before clamping).
pub fn generate_traced(
    model: &impl ScoreModel,
    moving: &Tensor,
    fixed: &Tensor,
    sched: &NoiseSchedule,
    params: GenerateParams,
    mut trace: impl FnMut(usize, &Tensor) -> Result<()>,
) -> Result<Tensor> {
    if moving.shape() != fixed.shape() {
        return Err(Error::shape("generate", moving.shape(), fixed.shape()));
    }
    let sub = subsequence_schedule(sched, params.steps, params.horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let eps = Tensor::randn(moving.shape(), &mut rng);
    let mut x = sched.forward_sample(moving, params.horizon, &eps)?;
    trace(params.horizon, &x)?;
    for i in (1..=sub.len()).rev() {
        let eps_hat = model.predict(moving, fixed, &x, sub.timestep(i))?;
        if eps_hat.shape() != x.shape() {
            return Err(Error::shape("generate", x.shape(), eps_hat.shape()));
        }
        let z = if i > 1 {
            Tensor::randn(x.shape(), &mut rng)
        } else {
            Tensor::zeros(x.shape())
        };
        x = sub.reverse_step(&x, &eps_hat, i, &z)?;
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("generated sample at step {}", sub.timestep(i))));
        }
        trace(sub.timestep(i - 1), &x)?;
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn default_schedule() -> NoiseSchedule {
        make_schedule(2000, 1e-6, 1e-2).unwrap()
    }

    fn within_3se(samples: &[f64], mean: f64, var: f64) {
        let n = samples.len() as f64;
        let m = samples.iter().sum::<f64>() / n;
        let v = samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1.0);
        let se_mean = (var / n).sqrt();
        let se_var = var * (2.0 / (n - 1.0)).sqrt();
        assert!((m - mean).abs() < 3.0 * se_mean, "mean {m} vs {mean}");
        assert!((v - var).abs() < 3.0 * se_var, "var {v} vs {var}");
    }

    #[test]
    fn linear_endpoints_and_tables() {
        let s = default_schedule();
        assert_eq!(s.len(), 2000);
        assert_eq!(s.beta(1), 1e-6);
        assert!((s.beta(2000) - 1e-2).abs() < 1e-15);
        assert_eq!(s.sigma(1), 0.0);
        for t in 1..=2000 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1) && s.alpha_bar(t) > 0.0);
            assert!(s.sigma(t).powi(2) <= s.beta(t) * (1.0 + 1e-12));
            if t > 1 {
                assert!(s.beta(t) >= s.beta(t - 1));
            }
        }
        let one = make_schedule(1, 0.3, 0.3).unwrap();
        assert_eq!(one.alpha_bar(1), 1.0 - 0.3);
    }

    #[test]
    fn terminal_alpha_matches_log_domain_product() {
        let s = default_schedule();
        // sum of log1p is an independent, more accurate route to the product
        let direct: f64 = s.betas().iter().map(|b| (-b).ln_1p()).sum::<f64>().exp();
        assert!((s.alpha_bar(2000) - direct).abs() / direct < 1e-10);
        assert!(direct < 1e-4);
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(make_schedule(0, 1e-4, 1e-2).is_err());
        assert!(make_schedule(10, 0.0, 1e-2).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        let s = default_schedule();
        let x = Tensor::zeros([3]);
        assert!(s.forward_sample(&x, 0, &x).is_err());
        assert!(s.forward_sample(&x, 2001, &x).is_err());
        assert!(s.forward_sample(&x, 5, &Tensor::zeros([4])).is_err());
        assert!(s.posterior_mean(&x, &x, 0).is_err());
    }

    #[test]
    fn forward_sample_special_cases() {
        let s = default_schedule();
        let x0 = Tensor::new([3], vec![0.5f32, -1.0, 0.25]).unwrap();
        let t = 700;
        let a = s.alpha_bar(t).sqrt();
        let out = s.forward_sample(&x0, t, &Tensor::zeros([3])).unwrap();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert!((*o as f64 - a * *x as f64).abs() < 1e-7);
        }
        let out = s.forward_sample(&Tensor::zeros([3]), t, &x0).unwrap();
        let b = (1.0 - s.alpha_bar(t)).sqrt();
        for (o, e) in out.data().iter().zip(x0.data()) {
            assert!((*o as f64 - b * *e as f64).abs() < 1e-7);
        }
    }

    #[test]
    fn forward_sample_monte_carlo() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let t = 1500;
        let eps = Tensor::randn([n], &mut rng);
        let out = s.forward_sample(&Tensor::full([n], 0.6), t, &eps).unwrap();
        let xs: Vec<f64> = out.data().iter().map(|&v| v as f64).collect();
        within_3se(&xs, s.alpha_bar(t).sqrt() * 0.6, 1.0 - s.alpha_bar(t));
    }

    #[test]
    fn chained_transitions_match_closed_form() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in [1usize, 10, 100] {
            let xs: Vec<f64> = (0..10_000)
                .map(|_| {
                    let mut x = 0.8f64;
                    for k in 1..=t {
                        let z: f64 = rng.sample(StandardNormal);
                        x = (1.0 - s.beta(k)).sqrt() * x + s.beta(k).sqrt() * z;
                    }
                    x
                })
                .collect();
            within_3se(&xs, s.alpha_bar(t).sqrt() * 0.8, 1.0 - s.alpha_bar(t));
        }
    }

    #[test]
    fn posterior_mean_cases() {
        let s = default_schedule();
        let t = 900;
        let x = Tensor::new([2], vec![0.3f32, -0.7]).unwrap();
        let out = s.posterior_mean(&x, &Tensor::zeros([2]), t).unwrap();
        let inv = 1.0 / (1.0 - s.beta(t)).sqrt();
        assert!((out.data()[0] as f64 - 0.3f32 as f64 * inv).abs() < 1e-7);

        let tiny = NoiseSchedule::from_betas(&[1e-12]).unwrap();
        let out = tiny.posterior_mean(&x, &Tensor::full([2], 0.4), 1).unwrap();
        for (o, i) in out.data().iter().zip(x.data()) {
            assert!((o - i).abs() < 1e-5);
        }

        // substituting x_t = forward_sample(x0, eps) and eps_hat = eps
        let x0 = Tensor::new([2], vec![0.2f32, -0.9]).unwrap();
        let eps = Tensor::new([2], vec![1.1f32, 0.4]).unwrap();
        let xt = s.forward_sample(&x0, t, &eps).unwrap();
        let out = s.posterior_mean(&xt, &eps, t).unwrap();
        let (ab, b) = (s.alpha_bar(t), s.beta(t));
        for i in 0..2 {
            let e = eps.data()[i] as f64;
            let expect = (ab.sqrt() * x0.data()[i] as f64 + ((1.0 - ab).sqrt() - b / (1.0 - ab).sqrt()) * e)
                / (1.0 - b).sqrt();
            assert!((out.data()[i] as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn reverse_step_cases() {
        let s = default_schedule();
        let x = Tensor::new([2], vec![0.3f32, -0.7]).unwrap();
        let e = Tensor::new([2], vec![0.1f32, 0.2]).unwrap();
        let mean = s.posterior_mean(&x, &e, 40).unwrap();
        assert_eq!(s.reverse_step(&x, &e, 40, &Tensor::zeros([2])).unwrap(), mean);
        let big = Tensor::full([2], 5.0);
        assert_eq!(
            s.reverse_step(&x, &e, 1, &big).unwrap(),
            s.posterior_mean(&x, &e, 1).unwrap()
        );

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = 1200;
        let n = 10_000;
        let z = Tensor::randn([n], &mut rng);
        let out = s
            .reverse_step(&Tensor::full([n], 0.2), &Tensor::full([n], -0.3), t, &z)
            .unwrap();
        let m = s.posterior_mean(&Tensor::full([1], 0.2), &Tensor::full([1], -0.3), t).unwrap().data()[0] as f64;
        let xs: Vec<f64> = out.data().iter().map(|&v| v as f64).collect();
        within_3se(&xs, m, s.sigma(t).powi(2));
    }

    #[test]
    fn subsequence_cases() {
        let s = default_schedule();
        let same = subsequence_schedule(&s, 200, 200).unwrap();
        for t in 1..=200 {
            assert!((same.beta(t) - s.beta(t)).abs() < 1e-15);
            assert_eq!(same.alpha_bar(t), s.alpha_bar(t));
            assert!((same.sigma(t) - s.sigma(t)).abs() < 1e-12);
            assert_eq!(same.timestep(t), t);
        }
        let single = subsequence_schedule(&s, 1, 537).unwrap();
        assert_eq!(single.len(), 1);
        assert!((single.alpha_bar(1) - s.alpha_bar(537)).abs() < 1e-15);
        assert!(((1.0 - single.beta(1)) - s.alpha_bar(537)).abs() < 1e-15);

        let sub = subsequence_schedule(&s, 80, 200).unwrap();
        let prod: f64 = sub.betas().iter().map(|b| 1.0 - b).product();
        assert!((prod - s.alpha_bar(200)).abs() / s.alpha_bar(200) < 1e-6);
        assert_eq!(sub.timestep(80), 200);
        assert!(sub.sigma(1) == 0.0);

        assert!(subsequence_schedule(&s, 0, 10).is_err());
        assert!(subsequence_schedule(&s, 11, 10).is_err());
        assert!(subsequence_schedule(&s, 10, 2001).is_err());
    }

    #[test]
    fn noise_free_generation_returns_moving_image() {
        let s = NoiseSchedule::from_betas(&[0.0; 20]).unwrap();
        let m = Tensor::from_fn([1, 1, 4, 4], |i| i as f32 / 16.0 - 0.5);
        let f = Tensor::zeros([1, 1, 4, 4]);
        let p = GenerateParams {
            horizon: 20,
            steps: 7,
            seed: 3,
        };
        assert_eq!(generate(&(), &m, &f, &s, p).unwrap(), m);
    }

    #[test]
    fn generation_is_seeded() {
        let s = default_schedule();
        let m = Tensor::from_fn([1, 1, 4, 4], |i| i as f32 / 16.0 - 0.5);
        let p = GenerateParams::default();
        let a = generate(&(), &m, &m, &s, p).unwrap();
        assert_eq!(a, generate(&(), &m, &m, &s, p).unwrap());
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let b = generate(&(), &m, &m, &s, GenerateParams { seed: 1, ..p }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn trace_visits_every_kept_step() {
        let s = default_schedule();
        let m = Tensor::from_fn([1, 1, 4, 4], |i| i as f32 / 16.0 - 0.5);
        let p = GenerateParams { horizon: 20, steps: 5, seed: 3 };
        let mut seen = Vec::new();
        let mut last = None;
        let out = generate_traced(&(), &m, &m, &s, p, |t, x| {
            seen.push(t);
            last = Some(x.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, [20, 16, 12, 8, 4, 0]);
        assert_eq!(out, last.unwrap().map(|v| v.clamp(-1.0, 1.0)));
        assert_eq!(out, generate(&(), &m, &m, &s, p).unwrap());
        // a failing trace aborts generation
        let err = generate_traced(&(), &m, &m, &s, p, |_, _| Err(Error::NonFinite("stop".into())));
        assert!(err.is_err());
    }
}
