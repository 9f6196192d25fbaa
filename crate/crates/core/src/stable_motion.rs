//! Symmetric α-stable motion on the line: the Lévy constant, exact increment
//! sampling, boundary-exit jumps out of `(-R, R)` and killed Euler skeletons.

use rand::Rng;
use statrs::function::gamma::gamma;
use std::f64::consts::PI;

use crate::error::{LabError, Result};
use crate::stats::{proportion, Estimate};

/// Parameters of the symmetric α-stable process with generator `-(-Δ)^{α/2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StableLaw {
    pub alpha: f64,
    /// Lévy density constant: jumps of size `z` arrive at rate `c_alpha |z|^{-1-α}`.
    pub c_alpha: f64,
}

impl StableLaw {
    pub fn new(alpha: f64) -> Result<Self> {
        Ok(StableLaw { alpha, c_alpha: levy_constant(alpha)? })
    }

    /// Rate of jumps of size at least `r` in one direction: `(c_α/α) r^{-α}`.
    pub fn one_sided_tail(&self, r: f64) -> f64 {
        self.c_alpha / self.alpha * r.powf(-self.alpha)
    }
}

/// The constant `c_α = α 2^{α-1} Γ((1+α)/2) / (√π Γ(1-α/2))` making the
/// principal-value jump operator have Fourier symbol `-|ξ|^α`.
pub fn levy_constant(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(LabError::domain(format!("alpha must lie in (0, 2), got {alpha}")));
    }
    Ok(alpha * 2f64.powf(alpha - 1.0) * gamma(0.5 * (1.0 + alpha))
        / (PI.sqrt() * gamma(1.0 - 0.5 * alpha)))
}

/// Standard symmetric stable variate with characteristic function `exp(-|ξ|^α)`
/// (Chambers–Mallows–Stuck).
pub fn standard_stable<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let v = PI * (rng.random::<f64>() - 0.5);
    if alpha == 1.0 {
        return v.tan();
    }
    // W ~ Exp(1) from an open-interval uniform
    let w = -(1.0 - rng.random::<f64>()).ln();
    let cv = v.cos();
    (alpha * v).sin() / cv.powf(1.0 / alpha) * (((1.0 - alpha) * v).cos() / w).powf((1.0 - alpha) / alpha)
}

/// Increment of the process over a duration `t`.
pub fn sample_increment<R: Rng + ?Sized>(law: &StableLaw, t: f64, rng: &mut R) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(LabError::domain(format!("duration must be nonnegative, got {t}")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    Ok(t.powf(1.0 / law.alpha) * standard_stable(law.alpha, rng))
}

/// Unchecked increment for inner loops; `scale = t^{1/α}`.
#[inline]
pub(crate) fn step<R: Rng + ?Sized>(alpha: f64, scale: f64, rng: &mut R) -> f64 {
    scale * standard_stable(alpha, rng)
}

/// Landing point of a jump from `x` that leaves `(-R, R)`, drawn from the
/// Lévy density restricted to `|y| >= R`.
pub fn sample_exit_jump<R: Rng + ?Sized>(law: &StableLaw, x: f64, radius: f64, rng: &mut R) -> Result<f64> {
    if !(x.abs() < radius) {
        return Err(LabError::domain(format!("exit jump needs |x| < R, got x={x}, R={radius}")));
    }
    let a = law.alpha;
    let right = (radius - x).powf(-a);
    let left = (radius + x).powf(-a);
    let u = 1.0 - rng.random::<f64>();
    let pareto = u.powf(-1.0 / a);
    if rng.random::<f64>() * (right + left) < right {
        Ok(x + (radius - x) * pareto)
    } else {
        Ok(x - (radius + x) * pareto)
    }
}

/// Euler skeleton of a path killed on leaving `(-R, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KilledPath {
    /// Grid times at which the path was still inside.
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    pub exit_time: Option<f64>,
    pub exit_position: Option<f64>,
}

impl KilledPath {
    pub fn survived(&self) -> bool {
        self.exit_time.is_none()
    }
}

fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(horizon >= 0.0) {
        return Err(LabError::domain(format!("need dt > 0 and T >= 0, got dt={dt}, T={horizon}")));
    }
    Ok((horizon / dt - 1e-9).ceil().max(0.0) as usize)
}

/// Simulate on the grid `k·T/n`, `n = ⌈T/dt⌉`, stopping at the first grid
/// point outside `(-R, R)`.
pub fn sample_killed_path<R: Rng + ?Sized>(
    law: &StableLaw,
    radius: f64,
    x0: f64,
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<KilledPath> {
    let n = step_count(horizon, dt)?;
    if x0.abs() >= radius {
        return Ok(KilledPath { times: vec![], positions: vec![], exit_time: Some(0.0), exit_position: Some(x0) });
    }
    let h = if n == 0 { 0.0 } else { horizon / n as f64 };
    let scale = h.powf(1.0 / law.alpha);
    let mut path = KilledPath {
        times: vec![0.0],
        positions: vec![x0],
        exit_time: None,
        exit_position: None,
    };
    let mut x = x0;
    for k in 1..=n {
        x += step(law.alpha, scale, rng);
        let t = k as f64 * h;
        if x.abs() >= radius {
            path.exit_time = Some(t);
            path.exit_position = Some(x);
            break;
        }
        path.times.push(t);
        path.positions.push(x);
    }
    Ok(path)
}

/// Endpoint at time `T` of a killed skeleton, or `None` if it exited. Same
/// draws as [`sample_killed_path`] without storing the path.
pub fn killed_endpoint<R: Rng + ?Sized>(
    law: &StableLaw,
    radius: f64,
    x0: f64,
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<Option<f64>> {
    let n = step_count(horizon, dt)?;
    if x0.abs() >= radius {
        return Ok(None);
    }
    let h = if n == 0 { 0.0 } else { horizon / n as f64 };
    let scale = h.powf(1.0 / law.alpha);
    let mut x = x0;
    for _ in 0..n {
        x += step(law.alpha, scale, rng);
        if x.abs() >= radius {
            return Ok(None);
        }
    }
    Ok(Some(x))
}

/// Monte Carlo estimate of `P(sup_{u <= T} Y_u >= r)` from grid maxima.
pub fn sup_tail<R: Rng + ?Sized>(
    law: &StableLaw,
    r: f64,
    n_paths: usize,
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<Estimate> {
    if !(r >= 0.0) {
        return Err(LabError::domain(format!("level must be nonnegative, got {r}")));
    }
    let n = step_count(horizon, dt)?;
    if r == 0.0 {
        return Ok(Estimate { value: 1.0, stderr: 0.0 });
    }
    let scale = (horizon / n.max(1) as f64).powf(1.0 / law.alpha);
    let mut hits = 0;
    for _ in 0..n_paths {
        let mut y = 0.0;
        for _ in 0..n {
            y += step(law.alpha, scale, rng);
            if y >= r {
                hits += 1;
                break;
            }
        }
    }
    let (value, stderr) = proportion(hits, n_paths);
    Ok(Estimate { value, stderr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::{integrate_to_infinity, QuadOpts};
    use crate::rng::stream;
    use crate::stats::{ks_two_sample, MeanAcc};
    use approx::assert_relative_eq;

    /// `1 / (2 ∫_0^∞ (1 - cos u) u^{-1-α} du)`: the constant for which the
    /// jump operator applied to `cos` has eigenvalue `-1`.
    fn symbol_oracle(alpha: f64) -> f64 {
        // split at 1: near zero use the Taylor-safe form, beyond integrate
        // u^{-1-α} analytically and the cosine part panel by panel
        let near = crate::quad::integrate(
            |u| (2.0 * (0.5 * u).sin().powi(2)) * u.powf(-1.0 - alpha),
            &[0.0, 0.5, 1.0],
            QuadOpts::tol(1e-15, 1e-13),
        )
        .value;
        let mut cos_part = 0.0;
        let mut a = 1.0;
        let period = 2.0 * PI;
        while a < 1.0e3 {
            let b = a + period;
            cos_part += crate::quad::integrate(|u| u.cos() * u.powf(-1.0 - alpha), &[a, b], QuadOpts::tol(1e-16, 1e-13))
                .value;
            a = b;
        }
        // ∫_a^∞ cos(u) u^{-β} du by two integrations by parts
        let beta = 1.0 + alpha;
        cos_part += -a.sin() * a.powf(-beta) + beta * a.cos() * a.powf(-beta - 1.0);
        let far = 1.0 / alpha - cos_part;
        1.0 / (2.0 * (near + far))
    }

    #[test]
    fn levy_constant_matches_symbol_oracle() {
        for &a in &[0.4, 0.5, 1.0, 1.5] {
            let oracle = symbol_oracle(a);
            assert_relative_eq!(levy_constant(a).unwrap(), oracle, max_relative = 1e-6);
        }
        assert_relative_eq!(levy_constant(1.0).unwrap(), 1.0 / PI, max_relative = 1e-14);
    }

    #[test]
    fn levy_constant_domain() {
        assert!(levy_constant(0.0).is_err());
        assert!(levy_constant(2.0).is_err());
        assert!(levy_constant(f64::NAN).is_err());
        for k in 1..40 {
            assert!(levy_constant(k as f64 * 0.05).unwrap() > 0.0);
        }
    }

    #[test]
    fn frozen_half_constant() {
        // value fixed by the symbol oracle above
        assert_relative_eq!(levy_constant(0.5).unwrap(), 0.199_471_140_200_716_4, max_relative = 1e-12);
    }

    #[test]
    fn zero_duration_increment() {
        let law = StableLaw::new(0.7).unwrap();
        assert_eq!(sample_increment(&law, 0.0, &mut stream(1, 0)).unwrap(), 0.0);
        assert!(sample_increment(&law, -1.0, &mut stream(1, 0)).is_err());
    }

    #[test]
    fn cauchy_characteristic_function() {
        let law = StableLaw::new(1.0).unwrap();
        let mut rng = stream(3, 0);
        let acc: MeanAcc = (0..100_000).map(|_| sample_increment(&law, 0.5, &mut rng).unwrap().cos()).collect();
        assert!((acc.mean() - (-0.5f64).exp()).abs() < 3.0 * acc.stderr());
    }

    #[test]
    fn characteristic_function_other_alphas() {
        for &(a, xi) in &[(0.5, 1.0), (1.5, 0.7), (0.8, 2.0)] {
            let law = StableLaw::new(a).unwrap();
            let mut rng = stream(5, 1);
            let acc: MeanAcc =
                (0..100_000).map(|_| (xi * sample_increment(&law, 0.3, &mut rng).unwrap()).cos()).collect();
            let target = (-0.3 * f64::powf(xi, a)).exp();
            assert!((acc.mean() - target).abs() < 4.0 * acc.stderr(), "alpha {a}");
        }
    }

    #[test]
    fn self_similarity() {
        let law = StableLaw::new(0.6).unwrap();
        let mut r1 = stream(9, 0);
        let mut r2 = stream(9, 1);
        let a: Vec<f64> = (0..20_000)
            .map(|_| 2f64.powf(-1.0 / 0.6) * sample_increment(&law, 2.0, &mut r1).unwrap())
            .collect();
        let b: Vec<f64> = (0..20_000).map(|_| sample_increment(&law, 1.0, &mut r2).unwrap()).collect();
        assert!(ks_two_sample(&a, &b).passes(0.01));
    }

    #[test]
    fn exit_jump_side_and_overshoot() {
        let law = StableLaw::new(1.5).unwrap();
        let mut rng = stream(4, 0);
        let mut right = 0usize;
        let mut over = MeanAcc::new();
        let n = 200_000;
        for _ in 0..n {
            let y = sample_exit_jump(&law, 0.0, 1.0, &mut rng).unwrap();
            assert!(y.abs() >= 1.0);
            if y > 0.0 {
                right += 1;
                over.push(y - 1.0);
            }
        }
        let (p, se) = proportion(right, n);
        assert!((p - 0.5).abs() < 4.0 * se);
        // heavy tail (finite mean, infinite variance): loose check
        assert!((over.mean() - 2.0).abs() < 0.15, "overshoot {}", over.mean());
        assert!(sample_exit_jump(&law, 1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn overshoot_mean_by_quadrature() {
        // E[y - R | right] = ∫ (y-R) c|y-x|^{-1-α} dy / ∫ c|y-x|^{-1-α} dy
        let (a, x, r) = (1.5, 0.0, 1.0);
        let num = integrate_to_infinity(|y| (y - r) * (y - x).powf(-1.0 - a), r, &[2.0], QuadOpts::tol(1e-12, 1e-10));
        let den = integrate_to_infinity(|y| (y - x).powf(-1.0 - a), r, &[2.0], QuadOpts::default());
        assert_relative_eq!(num.value / den.value, (r - x) / (a - 1.0), max_relative = 1e-6);
    }

    #[test]
    fn killed_path_basics() {
        let law = StableLaw::new(0.5).unwrap();
        let mut rng = stream(2, 0);
        let p = sample_killed_path(&law, 1.0, 1.5, 1.0, 0.01, &mut rng).unwrap();
        assert_eq!(p.exit_time, Some(0.0));
        for _ in 0..200 {
            let p = sample_killed_path(&law, 1.0, 0.2, 1.0, 0.01, &mut rng).unwrap();
            assert!(p.positions.iter().all(|x| x.abs() < 1.0));
            if let Some(y) = p.exit_position {
                assert!(y.abs() >= 1.0);
            }
        }
    }

    #[test]
    fn survival_monotone_in_horizon_and_radius() {
        let law = StableLaw::new(0.8).unwrap();
        let n = 4000;
        let surv = |radius: f64, horizon: f64| {
            let mut rng = stream(12, 0);
            (0..n)
                .filter(|_| killed_endpoint(&law, radius, 0.1, horizon, 0.01, &mut rng).unwrap().is_some())
                .count()
        };
        // common random numbers make these pathwise monotone
        assert!(surv(1.0, 0.5) >= surv(1.0, 1.0));
        assert!(surv(4.0, 1.0) >= surv(1.0, 1.0));
        assert!(surv(1e6, 1.0) == n);
    }

    #[test]
    fn sup_tail_edge_cases() {
        let law = StableLaw::new(1.0).unwrap();
        let mut rng = stream(1, 1);
        assert_eq!(sup_tail(&law, 0.0, 10, 1.0, 0.1, &mut rng).unwrap().value, 1.0);
        assert!(sup_tail(&law, -1.0, 10, 1.0, 0.1, &mut rng).is_err());
        let a = sup_tail(&law, 1.0, 20_000, 1.0, 0.01, &mut stream(1, 2)).unwrap().value;
        let b = sup_tail(&law, 2.0, 20_000, 1.0, 0.01, &mut stream(1, 2)).unwrap().value;
        assert!(a >= b);
    }
}
