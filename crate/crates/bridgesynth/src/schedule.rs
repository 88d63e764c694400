//! Brownian bridge schedule: forward marginals, one-step transitions and the
//! reverse posterior, all precomputed per timestep.
//!
//! The forward marginal is
//! `q(x_t | x_0, y) = N((1 - m_t) x_0 + m_t y, delta_t I)` with a linear
//! `m_t` from 0.001 at t=1 to 0.999 at t=T and `delta_t = 2 s m_t (1 - m_t)`.
//! The paper only states this marginal; the one-step transition and the
//! posterior used for sampling are derived here by Gaussian conjugacy and
//! cross-checked by Monte-Carlo in the test suite.

use crate::error::{Error, Result};

const M_FIRST: f64 = 0.001;
const M_LAST: f64 = 0.999;

/// Negative variances below this magnitude are rounding noise and clamp to 0.
const VARIANCE_EPS: f64 = 1e-12;

/// Coefficients of the reverse posterior mean
/// `mu = on_x_t * x_t + on_y * y + on_x0 * x0_hat` plus its variance.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorCoeffs {
    pub on_x_t: f64,
    pub on_y: f64,
    pub on_x0: f64,
    pub variance: f64,
}

/// Coefficients of the one-step forward transition
/// `q(x_t | x_{t-1}, y) = N(on_prev * x_{t-1} + on_y * y, variance)`.
#[derive(Debug, Clone, Copy)]
pub struct TransitionParams {
    pub on_prev: f64,
    pub on_y: f64,
    pub variance: f64,
}

/// Precomputed per-timestep bridge quantities. Immutable after build; `t`
/// arguments are 1-based and valid on [1, T].
#[derive(Debug, Clone)]
pub struct ScheduleTable {
    t_max: usize,
    s: f64,
    m: Vec<f64>,
    delta: Vec<f64>,
    delta_cond: Vec<f64>,
    delta_rev: Vec<f64>,
    coeffs: Vec<PosteriorCoeffs>,
}

fn transition_from(m_prev: f64, m_cur: f64, d_prev: f64, d_cur: f64) -> TransitionParams {
    let on_prev = (1.0 - m_cur) / (1.0 - m_prev);
    let on_y = m_cur - m_prev * on_prev;
    let mut variance = d_cur - d_prev * on_prev * on_prev;
    if variance < 0.0 && variance > -VARIANCE_EPS {
        variance = 0.0;
    }
    TransitionParams {
        on_prev,
        on_y,
        variance,
    }
}

fn posterior_from(m_prev: f64, m_cur: f64, d_prev: f64, d_cur: f64) -> PosteriorCoeffs {
    let tr = transition_from(m_prev, m_cur, d_prev, d_cur);
    let on_x_t = tr.on_prev * d_prev / d_cur;
    let on_x0 = (1.0 - m_prev) * tr.variance / d_cur;
    // derived independently of the affine identity so the sum-to-one
    // invariant is an actual numerical check
    let on_y = m_prev * tr.variance / d_cur - on_x_t * tr.on_y;
    let mut variance = tr.variance * d_prev / d_cur;
    if variance < 0.0 && variance > -VARIANCE_EPS {
        variance = 0.0;
    }
    PosteriorCoeffs {
        on_x_t,
        on_y,
        on_x0,
        variance,
    }
}

/// Build the schedule for `T` steps with variance scale `s`.
pub fn build_schedule(t_max: usize, s: f64) -> Result<ScheduleTable> {
    if t_max < 2 {
        return Err(Error::InvalidArgument(format!(
            "schedule needs T >= 2, got {t_max}"
        )));
    }
    if s <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "variance scale must be > 0, got {s}"
        )));
    }
    let mut m = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let frac = (t - 1) as f64 / (t_max - 1) as f64;
        let mt = if t == 1 {
            M_FIRST
        } else if t == t_max {
            M_LAST
        } else {
            M_FIRST + (M_LAST - M_FIRST) * frac
        };
        m.push(mt);
    }
    let delta: Vec<f64> = m.iter().map(|&mt| 2.0 * s * mt * (1.0 - mt)).collect();
    let mut delta_cond = vec![0.0; t_max];
    let mut delta_rev = vec![0.0; t_max];
    let mut coeffs = vec![
        PosteriorCoeffs {
            on_x_t: 0.0,
            on_y: 0.0,
            on_x0: 1.0,
            variance: 0.0,
        };
        t_max
    ];
    for t in 2..=t_max {
        let (mp, mc) = (m[t - 2], m[t - 1]);
        let (dp, dc) = (delta[t - 2], delta[t - 1]);
        delta_cond[t - 1] = transition_from(mp, mc, dp, dc).variance;
        let pc = posterior_from(mp, mc, dp, dc);
        delta_rev[t - 1] = pc.variance;
        coeffs[t - 1] = pc;
    }
    Ok(ScheduleTable {
        t_max,
        s,
        m,
        delta,
        delta_cond,
        delta_rev,
        coeffs,
    })
}

impl ScheduleTable {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn variance_scale(&self) -> f64 {
        self.s
    }

    fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.t_max {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} out of range [{min}, {}]",
                self.t_max
            )));
        }
        Ok(())
    }

    pub fn m(&self, t: usize) -> f64 {
        self.m[t - 1]
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t - 1]
    }

    /// Conditional variance of the one-step transition, t >= 2.
    pub fn delta_cond(&self, t: usize) -> f64 {
        self.delta_cond[t - 1]
    }

    /// Reverse posterior variance `delta_cond * delta_{t-1} / delta_t`, t >= 2.
    pub fn delta_rev(&self, t: usize) -> f64 {
        self.delta_rev[t - 1]
    }

    /// Posterior coefficients for the consecutive pair (t, t-1).
    pub fn posterior_coeffs(&self, t: usize) -> Result<PosteriorCoeffs> {
        self.check_t(t, 2)?;
        Ok(self.coeffs[t - 1])
    }

    /// Posterior coefficients for an arbitrary strided pair t_hi > t_lo,
    /// used by DDIM-style subsequence sampling.
    pub fn posterior_coeffs_between(&self, t_hi: usize, t_lo: usize) -> Result<PosteriorCoeffs> {
        self.check_t(t_hi, 2)?;
        self.check_t(t_lo, 1)?;
        if t_lo >= t_hi {
            return Err(Error::InvalidArgument(format!(
                "strided pair needs t_lo < t_hi, got {t_lo} >= {t_hi}"
            )));
        }
        Ok(posterior_from(
            self.m(t_lo),
            self.m(t_hi),
            self.delta(t_lo),
            self.delta(t_hi),
        ))
    }

    /// Conditional variance for an arbitrary strided pair t_hi > t_lo.
    pub fn delta_cond_between(&self, t_hi: usize, t_lo: usize) -> Result<f64> {
        self.check_t(t_hi, 2)?;
        self.check_t(t_lo, 1)?;
        if t_lo >= t_hi {
            return Err(Error::InvalidArgument(format!(
                "strided pair needs t_lo < t_hi, got {t_lo} >= {t_hi}"
            )));
        }
        Ok(transition_from(self.m(t_lo), self.m(t_hi), self.delta(t_lo), self.delta(t_hi)).variance)
    }

    /// One-step transition coefficients for t >= 2.
    pub fn transition_params(&self, t: usize) -> Result<TransitionParams> {
        self.check_t(t, 2)?;
        Ok(transition_from(
            self.m(t - 1),
            self.m(t),
            self.delta(t - 1),
            self.delta(t),
        ))
    }

    /// Plain-text table of the per-timestep quantities.
    pub fn dump(&self) -> String {
        let mut out = String::from("t\tm_t\tdelta_t\tdelta_cond_t\tdelta_rev_t\n");
        for t in 1..=self.t_max {
            out.push_str(&format!(
                "{t}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\n",
                self.m(t),
                self.delta(t),
                self.delta_cond(t),
                self.delta_rev(t)
            ));
        }
        out
    }
}

fn check_same_len(name: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch(format!(
            "{name}: expected {expected} elements, got {actual}"
        )));
    }
    Ok(())
}

/// Draw `x_t = (1 - m_t) x0 + m_t y + sqrt(delta_t) eps` elementwise.
pub fn forward_sample(
    x0: &[f64],
    y: &[f64],
    t: usize,
    eps: &[f64],
    sched: &ScheduleTable,
) -> Result<Vec<f64>> {
    sched.check_t(t, 1)?;
    check_same_len("forward_sample y", x0.len(), y.len())?;
    check_same_len("forward_sample eps", x0.len(), eps.len())?;
    let m = sched.m(t);
    let sd = sched.delta(t).sqrt();
    Ok(x0
        .iter()
        .zip(y)
        .zip(eps)
        .map(|((&a, &b), &e)| (1.0 - m) * a + m * b + sd * e)
        .collect())
}

/// One reverse posterior step from t to t-1:
/// `a x_t + b y + c x0_hat + eta sqrt(delta_rev) z`. With `eta = 0` the step
/// is the deterministic DDIM-style update and `z` may be omitted.
pub fn posterior_step(
    x_t: &[f64],
    y: &[f64],
    x0_hat: &[f64],
    t: usize,
    sched: &ScheduleTable,
    eta: f64,
    z: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let pc = sched.posterior_coeffs(t)?;
    posterior_step_with(x_t, y, x0_hat, &pc, eta, z)
}

/// Posterior step with explicit coefficients (shared by the consecutive and
/// strided paths).
pub fn posterior_step_with(
    x_t: &[f64],
    y: &[f64],
    x0_hat: &[f64],
    pc: &PosteriorCoeffs,
    eta: f64,
    z: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!(
            "eta must be in [0, 1], got {eta}"
        )));
    }
    check_same_len("posterior_step y", x_t.len(), y.len())?;
    check_same_len("posterior_step x0_hat", x_t.len(), x0_hat.len())?;
    let noise_scale = eta * pc.variance.sqrt();
    let mut out: Vec<f64> = x_t
        .iter()
        .zip(y)
        .zip(x0_hat)
        .map(|((&xt, &yv), &x0)| pc.on_x_t * xt + pc.on_y * yv + pc.on_x0 * x0)
        .collect();
    if noise_scale > 0.0 {
        let z = z.ok_or_else(|| {
            Error::InvalidArgument("posterior_step needs noise z when eta > 0".into())
        })?;
        check_same_len("posterior_step z", x_t.len(), z.len())?;
        for (o, &zv) in out.iter_mut().zip(z) {
            *o += noise_scale * zv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn rejects_bad_parameters() {
        assert!(build_schedule(1, 1.0).is_err());
        assert!(build_schedule(10, 0.0).is_err());
        assert!(build_schedule(10, -1.0).is_err());
    }

    #[test]
    fn linear_m_endpoints_and_spacing() {
        let sched = build_schedule(1000, 1.0).unwrap();
        assert_eq!(sched.m(1), 0.001);
        assert_eq!(sched.m(1000), 0.999);
        let step = (M_LAST - M_FIRST) / 999.0;
        for t in 2..=1000 {
            assert!((sched.m(t) - sched.m(t - 1) - step).abs() < 1e-12);
            assert!(sched.m(t) > sched.m(t - 1));
        }
    }

    #[test]
    fn delta_formula_direct_evaluation() {
        // T=3 puts m_2 exactly halfway: 0.001 + 0.998 / 2 = 0.5
        let sched = build_schedule(3, 1.0).unwrap();
        assert!((sched.m(2) - 0.5).abs() < 1e-15);
        assert!((sched.delta(2) - 0.5).abs() < 1e-12);
        assert!((sched.delta(3) - 0.001998).abs() < 1e-15);
    }

    #[test]
    fn variances_are_nonnegative() {
        for (t_max, s) in [(20usize, 1.0), (1000, 1.0), (50, 0.25), (10, 4.0)] {
            let sched = build_schedule(t_max, s).unwrap();
            for t in 1..=t_max {
                assert!(sched.delta(t) >= 0.0);
                if t >= 2 {
                    assert!(sched.delta_cond(t) >= 0.0, "delta_cond at t={t}");
                    assert!(sched.delta_rev(t) >= 0.0, "delta_rev at t={t}");
                    assert!(
                        (sched.delta_rev(t) - sched.delta_cond(t) * sched.delta(t - 1) / sched.delta(t))
                            .abs()
                            < 1e-15
                    );
                }
            }
        }
    }

    #[test]
    fn posterior_coefficients_sum_to_one() {
        let sched = build_schedule(1000, 1.0).unwrap();
        for t in 2..=1000 {
            let pc = sched.posterior_coeffs(t).unwrap();
            let sum = pc.on_x_t + pc.on_y + pc.on_x0;
            assert!((sum - 1.0).abs() < 1e-9, "t={t} sum={sum}");
        }
        // strided pairs satisfy the same affine identity
        for (hi, lo) in [(1000, 1), (500, 250), (40, 39), (999, 3)] {
            let pc = sched.posterior_coeffs_between(hi, lo).unwrap();
            let sum = pc.on_x_t + pc.on_y + pc.on_x0;
            assert!((sum - 1.0).abs() < 1e-9, "pair ({hi},{lo}) sum={sum}");
        }
    }

    #[test]
    fn transition_coefficients_sum_to_one_and_flat_limit() {
        let sched = build_schedule(200, 1.0).unwrap();
        for t in 2..=200 {
            let tr = sched.transition_params(t).unwrap();
            assert!((tr.on_prev + tr.on_y - 1.0).abs() < 1e-12);
        }
        // hypothetical flat step: coefficient 1 on x_{t-1}, 0 on y
        let tr = transition_from(0.4, 0.4, 0.3, 0.45);
        assert!((tr.on_prev - 1.0).abs() < 1e-15);
        assert!(tr.on_y.abs() < 1e-15);
        assert!((tr.variance - 0.15).abs() < 1e-15);
    }

    #[test]
    fn forward_sample_midpoint_and_endpoint() {
        let sched = build_schedule(3, 1.0).unwrap();
        let x0 = [0.2, 0.8, 0.0, 1.0];
        let y = [0.6, 0.4, 1.0, 0.0];
        let zeros = [0.0; 4];
        let mid = forward_sample(&x0, &y, 2, &zeros, &sched).unwrap();
        for i in 0..4 {
            assert!((mid[i] - 0.5 * (x0[i] + y[i])).abs() < 1e-12);
        }
        let end = forward_sample(&x0, &y, 3, &zeros, &sched).unwrap();
        for i in 0..4 {
            assert!((end[i] - (0.001 * x0[i] + 0.999 * y[i])).abs() < 1e-12);
        }
        // t=1 stays within 0.1% interpolation weight of x0
        let start = forward_sample(&x0, &y, 1, &zeros, &sched).unwrap();
        for i in 0..4 {
            assert!((start[i] - x0[i]).abs() <= 0.001 * (y[i] - x0[i]).abs() + 1e-15);
        }
        assert!(forward_sample(&x0, &y, 4, &zeros, &sched).is_err());
        assert!(forward_sample(&x0, &y[..2], 2, &zeros, &sched).is_err());
    }

    #[test]
    fn forward_sample_monte_carlo_moments() {
        let sched = build_schedule(20, 1.0).unwrap();
        let (x0, y) = (0.3, 0.9);
        let n = 100_000usize;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let t = 11;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let e = normal.sample(&mut rng);
            let xt = forward_sample(&[x0], &[y], t, &[e], &sched).unwrap()[0];
            sum += xt;
            sum_sq += xt * xt;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let m = sched.m(t);
        let want_mean = (1.0 - m) * x0 + m * y;
        let want_var = sched.delta(t);
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - want_mean).abs() < 3.0 * se_mean);
        assert!((var - want_var).abs() < 3.0 * se_var);
    }

    #[test]
    fn transition_composes_to_marginal() {
        // sample x_{t-1} from its marginal, push through the derived
        // transition, compare moments with the direct t-marginal
        let sched = build_schedule(5, 1.0).unwrap();
        let (x0, y) = (0.25, 0.75);
        let n = 100_000usize;
        let normal = Normal::new(0.0, 1.0).unwrap();
        for t in 2..=5 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7 + t as u64);
            let tr = sched.transition_params(t).unwrap();
            let sd_cond = tr.variance.sqrt();
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let e = normal.sample(&mut rng);
                let x_prev = forward_sample(&[x0], &[y], t - 1, &[e], &sched).unwrap()[0];
                let xi: f64 = normal.sample(&mut rng);
                let x_t = tr.on_prev * x_prev + tr.on_y * y + sd_cond * xi;
                sum += x_t;
                sum_sq += x_t * x_t;
            }
            let mean = sum / n as f64;
            let var = sum_sq / n as f64 - mean * mean;
            let m = sched.m(t);
            let want_mean = (1.0 - m) * x0 + m * y;
            let want_var = sched.delta(t);
            let se_mean = (want_var / n as f64).sqrt();
            let se_var = want_var * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!((mean - want_mean).abs() < 3.0 * se_mean, "mean at t={t}");
            assert!((var - want_var).abs() < 3.0 * se_var, "var at t={t}");
        }
    }

    #[test]
    fn posterior_step_constant_fixed_point_and_determinism() {
        let sched = build_schedule(10, 1.0).unwrap();
        let c = [0.625; 6];
        for t in 2..=10 {
            let out = posterior_step(&c, &c, &c, t, &sched, 0.0, None).unwrap();
            for &v in &out {
                assert!((v - 0.625).abs() < 1e-9);
            }
        }
        let x_t = [0.1, 0.9, 0.4, 0.2, 0.7, 0.35];
        let y = [0.5; 6];
        let x0 = [0.3; 6];
        let a = posterior_step(&x_t, &y, &x0, 5, &sched, 0.0, None).unwrap();
        let b = posterior_step(&x_t, &y, &x0, 5, &sched, 0.0, None).unwrap();
        assert_eq!(a, b);
        // eta > 0 without noise is rejected; t out of range is rejected
        assert!(posterior_step(&x_t, &y, &x0, 5, &sched, 0.5, None).is_err());
        assert!(posterior_step(&x_t, &y, &x0, 1, &sched, 0.0, None).is_err());
        assert!(posterior_step(&x_t, &y, &x0, 11, &sched, 0.0, None).is_err());
    }

    #[test]
    fn dump_lists_every_timestep() {
        let sched = build_schedule(10, 1.0).unwrap();
        let dump = sched.dump();
        assert_eq!(dump.lines().count(), 11);
        assert!(dump.lines().nth(1).unwrap().starts_with("1\t0.001000000"));
        assert!(dump.lines().nth(10).unwrap().starts_with("10\t0.999000000"));
    }
}
