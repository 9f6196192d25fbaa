//! Squared Bessel processes of dimension `4δ < 1` started from 0: the
//! transition density, the law of the first zero `T₀`, the probability that
//! an interval contains no zero, Euler simulation and box-counting of the
//! zero set.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::{gamma, gamma_lr, ln_gamma};

use crate::dirichlet_kernel::BoundReport;
use crate::error::{LabError, Result};
use crate::quad::{integrate, integrate_to_infinity, QuadOpts};
use crate::stats::linear_fit;

const OPTS: QuadOpts = QuadOpts { abs_tol: 1e-14, rel_tol: 1e-12, max_intervals: 4000 };

/// Parameters of `BESQ(4δ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BesqParams {
    pub delta: f64,
    /// Normalisation of the `T₀` density.
    pub c_delta: f64,
    pub start: f64,
}

impl BesqParams {
    pub fn new(delta: f64, start: f64) -> Result<Self> {
        check_delta(delta)?;
        if !(start >= 0.0) {
            return Err(LabError::domain(format!("start must be >= 0, got {start}")));
        }
        Ok(BesqParams { delta, c_delta: t0_constant(delta), start })
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 0.25) {
        return Err(LabError::domain(format!("delta must lie in (0, 1/4), got {delta}")));
    }
    Ok(())
}

/// `c_δ = 2^{2δ-1}/Γ(1-2δ)`, which makes the `T₀` density integrate to 1.
pub fn t0_constant(delta: f64) -> f64 {
    2f64.powf(2.0 * delta - 1.0) / gamma(1.0 - 2.0 * delta)
}

/// `q_t(0,y) = Γ(2δ)^{-1} (2t)^{-2δ} y^{2δ-1} e^{-y/2t}`, a Gamma density
/// with shape `2δ` and scale `2t`.
pub fn besq_density(delta: f64, t: f64, y: f64) -> Result<f64> {
    if !(t > 0.0 && y > 0.0) {
        return Err(LabError::domain(format!("density needs t > 0 and y > 0, got t={t}, y={y}")));
    }
    let k = 2.0 * delta;
    Ok((2.0 * t).powf(-k) * y.powf(k - 1.0) * (-y / (2.0 * t)).exp() / gamma(k))
}

/// `P_y(T₀ > τ) = ∫_τ^∞ c_δ y^{1-2δ} s^{2δ-2} e^{-y/2s} ds` by quadrature.
///
/// After `u = y/2s` and `w = u^{1-2δ}` the integrand is
/// `c_δ 2^{1-2δ} e^{-w^{1/(1-2δ)}} / (1-2δ)` on `[0, (y/2τ)^{1-2δ}]`.
pub fn t0_survival(delta: f64, y: f64, tau: f64) -> Result<f64> {
    if delta >= 0.5 {
        return Err(LabError::gate(format!("T0 law diverges for delta >= 1/2, got {delta}")));
    }
    if !(delta > 0.0) || !(y > 0.0) || !(tau >= 0.0) {
        return Err(LabError::domain(format!("need delta > 0, y > 0, tau >= 0 (got {delta}, {y}, {tau})")));
    }
    let e = 1.0 - 2.0 * delta;
    let pre = t0_constant(delta) * 2f64.powf(e) / e;
    let f = |w: f64| (-w.powf(1.0 / e)).exp();
    // e^{-u} is negligible past u = 45
    let w_tail = 45f64.powf(e);
    let top = if tau == 0.0 { f64::INFINITY } else { (y / (2.0 * tau)).powf(e) };
    let value = if top > w_tail {
        integrate_to_infinity(f, 0.0, &[1.0, w_tail], OPTS).value
    } else {
        integrate(f, &[0.0, 0.5 * top, top], OPTS).value
    };
    Ok((pre * value).min(1.0))
}

/// Closed form of [`t0_survival`]: the regularised lower incomplete gamma
/// `P(1-2δ, y/2τ)`.
pub fn t0_survival_closed(delta: f64, y: f64, tau: f64) -> f64 {
    if tau == 0.0 {
        return 1.0;
    }
    gamma_lr(1.0 - 2.0 * delta, y / (2.0 * tau))
}

fn check_window(a: f64, b: f64) -> Result<()> {
    if !(a > 0.0 && b > a) {
        return Err(LabError::domain(format!("need 0 < a < b, got a={a}, b={b}")));
    }
    Ok(())
}

/// `P(no zero in (a,b)) = ∫ P_y(T₀ > b-a) q_a(0,y) dy`, with the inner
/// probability itself computed by quadrature.
pub fn zero_gap_nested(a: f64, b: f64, delta: f64) -> Result<f64> {
    check_window(a, b)?;
    check_delta(delta)?;
    let k = 2.0 * delta;
    // y = v^{1/k} removes the y^{k-1} singularity: q_a(0,y) dy = e^{-y/2a} dv / (k Γ(k) (2a)^k)
    let pre = 1.0 / (k * gamma(k) * (2.0 * a).powf(k));
    let v_top = (90.0 * a).powf(k);
    let mut failed = None;
    let q = integrate(
        |v| {
            if v <= 0.0 {
                return 0.0;
            }
            let y = v.powf(1.0 / k);
            match t0_survival(delta, y, b - a) {
                Ok(p) => p * (-y / (2.0 * a)).exp(),
                Err(e) => {
                    failed = Some(e);
                    0.0
                }
            }
        },
        &[0.0, (2.0 * a).powf(k), (20.0 * a).powf(k), v_top],
        QuadOpts { abs_tol: 1e-13, rel_tol: 1e-11, max_intervals: 2000 },
    );
    if let Some(e) = failed {
        return Err(e);
    }
    Ok(pre * q.value)
}

/// The same probability after integrating out `y` first:
/// `c_δ Γ(2δ)^{-1} (2a)^{-2δ} ∫_{b-a}^∞ s^{2δ-2} · 2sa/(s+a) ds`.
pub fn zero_gap_reduced(a: f64, b: f64, delta: f64) -> Result<f64> {
    check_window(a, b)?;
    check_delta(delta)?;
    let k = 2.0 * delta;
    let e = 1.0 - k;
    let g = b - a;
    // s = g r^{-1/e} maps [g, ∞) to (0, 1] and absorbs s^{k-2} ds
    let inner = integrate(
        |r| {
            if r <= 0.0 {
                return 1.0;
            }
            let s = g * r.powf(-1.0 / e);
            s / (s + a)
        },
        &[0.0, 0.5, 1.0],
        OPTS,
    );
    let s_part = g.powf(k - 1.0) / e * inner.value;
    Ok(t0_constant(delta) / gamma(k) * (2.0 * a).powf(-k) * 2.0 * a * s_part)
}

/// Arcsine-type law of the last zero before `b`: `I_{a/b}(1-2δ, 2δ)`.
pub fn zero_gap_closed(a: f64, b: f64, delta: f64) -> f64 {
    beta_reg(1.0 - 2.0 * delta, 2.0 * delta, a / b)
}

/// Probability that `BESQ(4δ)` from 0 has no zero in `(a, b)`.
pub fn zero_gap_probability(a: f64, b: f64, delta: f64) -> Result<f64> {
    zero_gap_reduced(a, b, delta).map(|v| v.clamp(0.0, 1.0))
}

/// Fitted constant of `P(zero in (a,b)) ≥ 1 - C a^{1-2δ} (b-a)^{2δ-1}`, i.e.
/// the sup of `I a^{2δ-1} (b-a)^{1-2δ}` over `a ∈ [0.1, 1]`,
/// `b - a ∈ [0.01, 1]` on log-spaced grids of `5·2^level` points per axis.
pub fn lemma23_bound_check(delta: f64, levels: usize) -> Result<BoundReport> {
    check_delta(delta)?;
    let k = 2.0 * delta;
    let logspace = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
        (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
    };
    let mut trace = Vec::with_capacity(levels);
    for level in 0..levels {
        let n = 5 << level;
        let mut sup: f64 = 0.0;
        for &a in &logspace(0.1, 1.0, n) {
            for &g in &logspace(0.01, 1.0, n) {
                let i = zero_gap_probability(a, a + g, delta)?;
                sup = sup.max(i * a.powf(k - 1.0) * g.powf(1.0 - k));
            }
        }
        trace.push(sup);
    }
    Ok(BoundReport {
        lemma_id: "zero_gap".to_string(),
        alpha: f64::NAN,
        radius: f64::NAN,
        gamma: Some(delta),
        rho: None,
        sup_ratio: *trace.last().unwrap_or(&f64::NAN),
        divergent: trace.iter().any(|v| !v.is_finite()),
        refinement_trace: trace,
        flags: vec![],
    })
}

/// Zero flags of a simulated path: `flags[i]` is set when the state after
/// step `i+1` (time `(i+1)·dt`) is zero after truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroSet {
    pub dt: f64,
    pub flags: Vec<bool>,
    /// Maximal runs of flagged steps as `(first time, last time)`.
    pub intervals: Vec<(f64, f64)>,
}

impl ZeroSet {
    pub fn from_flags(dt: f64, flags: Vec<bool>) -> Self {
        let mut intervals = Vec::new();
        let mut start = None;
        for (i, &z) in flags.iter().enumerate() {
            match (z, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    intervals.push(((s + 1) as f64 * dt, i as f64 * dt));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            intervals.push(((s + 1) as f64 * dt, flags.len() as f64 * dt));
        }
        ZeroSet { dt, flags, intervals }
    }

    pub fn times(&self) -> Vec<f64> {
        self.flags.iter().enumerate().filter(|(_, &z)| z).map(|(i, _)| (i + 1) as f64 * self.dt).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["start", "end"])?;
        for &(s, e) in &self.intervals {
            w.write_record([s.to_string(), e.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One truncated Euler step of `dZ = 2√Z dβ + 4δ dt` given a standard
/// normal `xi`.
#[inline]
pub fn besq_step(z: f64, delta: f64, dt: f64, xi: f64) -> f64 {
    (z + 2.0 * (z * dt).sqrt() * xi + 4.0 * delta * dt).max(0.0)
}

/// Euler path on `[0, T]` from 0 (including the initial value) and its
/// zero set.
pub fn simulate_besq<R: Rng + ?Sized>(delta: f64, horizon: f64, dt: f64, rng: &mut R) -> Result<(Vec<f64>, ZeroSet)> {
    check_delta(delta)?;
    if !(dt > 0.0 && horizon > 0.0) {
        return Err(LabError::domain("need dt > 0 and T > 0".to_string()));
    }
    let n = (horizon / dt).round() as usize;
    let mut path = Vec::with_capacity(n + 1);
    let mut flags = Vec::with_capacity(n);
    let mut z = 0.0;
    path.push(z);
    for _ in 0..n {
        z = besq_step(z, delta, dt, rng.sample(StandardNormal));
        path.push(z);
        flags.push(z == 0.0);
    }
    Ok((path, ZeroSet::from_flags(dt, flags)))
}

/// Whether an Euler path from 0 has a zero at some grid time in `(a, b)`,
/// without storing the path.
pub fn besq_hits_zero<R: Rng + ?Sized>(delta: f64, a: f64, b: f64, dt: f64, rng: &mut R) -> bool {
    let mut z = 0.0;
    let n = (b / dt).round() as usize;
    for i in 1..=n {
        z = besq_step(z, delta, dt, rng.sample(StandardNormal));
        let t = i as f64 * dt;
        if z == 0.0 && t > a && t < b {
            return true;
        }
    }
    false
}

/// Exact transition of `BESQ(4δ)` from `x` over time `t`:
/// `2t·Gamma(2δ + N)` with `N ~ Poisson(x/2t)`.
pub fn sample_besq_exact<R: Rng + ?Sized>(delta: f64, x: f64, t: f64, rng: &mut R) -> f64 {
    let lambda = x / (2.0 * t);
    let n = if lambda > 0.0 { Poisson::new(lambda).expect("positive mean").sample(rng) } else { 0.0 };
    2.0 * t * Gamma::new(2.0 * delta + n, 1.0).expect("positive shape").sample(rng)
}

/// `I_ν(w)` for `|ν| < 1` by its power series, `w ≤ 40`.
fn bessel_i_series(nu: f64, w: f64) -> f64 {
    let lh = (0.5 * w).ln();
    let mut sum = 0.0;
    for k in 0..400 {
        let kf = k as f64;
        let term = ((2.0 * kf + nu) * lh - ln_gamma(kf + 1.0) - ln_gamma(kf + nu + 1.0)).exp();
        sum += term;
        if kf > w && term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Probability that a `BESQ(4δ)` bridge from `x > 0` to `y > 0` over time
/// `t` touches zero: `1 - I_μ(w)/I_{-μ}(w)` with `μ = 1-2δ`, `w = √(xy)/t`,
/// the ratio of the killed to the full transition density.
pub fn bridge_hit_probability(delta: f64, x: f64, y: f64, t: f64) -> f64 {
    let w = (x * y).sqrt() / t;
    if w == 0.0 {
        return 1.0;
    }
    if w > 40.0 {
        // ≈ 2 sin(μπ) e^{-2w}
        return 0.0;
    }
    let mu = 1.0 - 2.0 * delta;
    (1.0 - bessel_i_series(mu, w) / bessel_i_series(-mu, w)).clamp(0.0, 1.0)
}

/// Whether a path from 0 has a zero in `(a, b)`, simulated without
/// discretisation error: exact transitions at `a` and on `steps` equal
/// steps to `b`, with each step's bridge checked for a zero.
pub fn besq_hits_zero_exact<R: Rng + ?Sized>(delta: f64, a: f64, b: f64, steps: usize, rng: &mut R) -> bool {
    let h = (b - a) / steps as f64;
    let mut x = sample_besq_exact(delta, 0.0, a, rng);
    for _ in 0..steps {
        let y = sample_besq_exact(delta, x, h, rng);
        if rng.random::<f64>() < bridge_hit_probability(delta, x, y, h) {
            return true;
        }
        x = y;
    }
    false
}

/// Box-counting estimate over a window.
#[derive(Debug, Clone, PartialEq)]
pub struct DimensionEstimate {
    pub window: (f64, f64),
    pub scales: Vec<f64>,
    pub counts: Vec<usize>,
    pub slope: f64,
    /// False when too few boxes are occupied for a meaningful slope.
    pub reliable: bool,
}

impl DimensionEstimate {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["window", "scale", "count", "slope"])?;
        let win = format!("{}:{}", self.window.0, self.window.1);
        for (s, c) in self.scales.iter().zip(&self.counts) {
            w.write_record([win.clone(), s.to_string(), c.to_string(), self.slope.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Occupied-box counts of `times ∩ window` at each scale.
pub fn box_counts(times: &[f64], window: (f64, f64), scales: &[f64]) -> Vec<usize> {
    scales
        .iter()
        .map(|&eps| {
            let mut boxes: Vec<u64> = times
                .iter()
                .copied()
                .filter(|&t| t > window.0 && t < window.1)
                .map(|t| ((t - window.0) / eps) as u64)
                .collect();
            boxes.dedup();
            boxes.sort_unstable();
            boxes.dedup();
            boxes.len()
        })
        .collect()
}

/// Slope of `log N(ε)` against `log(1/ε)` from occupied-box counts.
pub fn dimension_from_counts(window: (f64, f64), scales: &[f64], counts: Vec<usize>, min_boxes: usize) -> Result<DimensionEstimate> {
    if scales.len() < 4 {
        return Err(LabError::domain("box counting needs at least 4 scales".to_string()));
    }
    let (lo, hi) = scales.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &s| (l.min(s), h.max(s)));
    if hi / lo < 100.0 - 1e-9 {
        return Err(LabError::domain("box counting scales must span two decades".to_string()));
    }
    let reliable = counts.iter().all(|&c| c >= 1) && counts.iter().copied().max().unwrap_or(0) >= min_boxes;
    let slope = if counts.iter().all(|&c| c >= 1) {
        let x: Vec<f64> = scales.iter().map(|s| (1.0 / s).ln()).collect();
        let y: Vec<f64> = counts.iter().map(|&c| (c as f64).ln()).collect();
        linear_fit(&x, &y).slope
    } else {
        f64::NAN
    };
    Ok(DimensionEstimate { window, scales: scales.to_vec(), counts, slope, reliable })
}

/// Box-counting dimension of the zero set within `window`.
pub fn box_dimension(zeros: &ZeroSet, window: (f64, f64), scales: &[f64]) -> Result<DimensionEstimate> {
    let counts = box_counts(&zeros.times(), window, scales);
    dimension_from_counts(window, scales, counts, 10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;

    #[test]
    fn density_is_gamma() {
        for &(d, t) in &[(0.1f64, 1.0f64), (0.2, 0.3)] {
            let k = 2.0 * d;
            // y = v^{1/k} for the singular part
            let mom = |p: i32| {
                integrate_to_infinity(
                    |v: f64| {
                        if v <= 0.0 {
                            return if p == 0 { (2.0 * t).powf(-k) / (k * gamma(k)) } else { 0.0 };
                        }
                        let y = v.powf(1.0 / k);
                        besq_density(d, t, y).unwrap() * y.powf(1.0 - k) / k * y.powi(p)
                    },
                    0.0,
                    &[(2.0 * t).powf(k), (20.0 * t).powf(k)],
                    OPTS,
                )
                .value
            };
            assert_relative_eq!(mom(0), 1.0, max_relative = 1e-8);
            assert_relative_eq!(mom(1), 4.0 * d * t, max_relative = 1e-8);
            assert_relative_eq!(mom(2) - (4.0 * d * t).powi(2), 8.0 * d * t * t, max_relative = 1e-8);
        }
        let v = besq_density(0.1, 1.0, 1.0).unwrap();
        assert_relative_eq!(v, 2f64.powf(-0.2) * (-0.5f64).exp() / gamma(0.2), max_relative = 1e-14);
        assert!(besq_density(0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn t0_law() {
        for &d in &[0.05, 0.1, 0.2] {
            assert_relative_eq!(t0_survival(d, 1.3, 0.0).unwrap(), 1.0, epsilon = 1e-8);
            for &(y, tau) in &[(1.0, 1.0), (0.1, 2.0), (3.0, 0.2)] {
                assert_relative_eq!(t0_survival(d, y, tau).unwrap(), t0_survival_closed(d, y, tau), max_relative = 1e-10);
            }
        }
        assert!(t0_survival(0.1, 1e-9, 1.0).unwrap() < 1e-6);
        assert!(matches!(t0_survival(0.5, 1.0, 1.0), Err(LabError::Gate(_))));
    }

    #[test]
    fn t0_constant_matches_direct_normalisation() {
        // ∫_0^∞ y^{1-2δ} s^{2δ-2} e^{-y/2s} ds = y^{1-2δ} (y/2)^{2δ-1} Γ(1-2δ)
        let d = 0.1;
        let y: f64 = 0.7;
        let direct = integrate_to_infinity(
            |s: f64| if s <= 0.0 { 0.0 } else { y.powf(1.0 - 2.0 * d) * s.powf(2.0 * d - 2.0) * (-y / (2.0 * s)).exp() },
            0.0,
            &[0.01, 0.1, 1.0, 10.0],
            OPTS,
        );
        assert_relative_eq!(t0_constant(d) * direct.value, 1.0, max_relative = 1e-7);
    }

    #[test]
    fn zero_gap_oracles_agree() {
        for &d in &[0.05, 0.1, 0.2] {
            for &(a, b) in &[(0.25, 0.5), (0.1, 1.0), (1.0, 1.01), (0.5, 3.0)] {
                let n = zero_gap_nested(a, b, d).unwrap();
                let r = zero_gap_reduced(a, b, d).unwrap();
                let c = zero_gap_closed(a, b, d);
                assert!((n - r).abs() < 1e-6, "{d} {a} {b}: {n} {r}");
                assert!((r - c).abs() < 1e-9, "{d} {a} {b}: {r} {c}");
            }
        }
    }

    #[test]
    fn zero_gap_limits_and_monotone() {
        // 1 - I vanishes like (b-a)^{2δ}
        let miss = |g: f64| 1.0 - zero_gap_probability(0.5, 0.5 + g, 0.1).unwrap();
        assert!(miss(1e-12) < 0.005 && miss(1e-12) < miss(1e-9) && miss(1e-9) < miss(1e-6));
        let mut last = 1.0;
        for k in 1..20 {
            let v = zero_gap_probability(0.3, 0.3 + 0.1 * k as f64, 0.1).unwrap();
            assert!((0.0..=1.0).contains(&v) && v <= last);
            last = v;
        }
        assert!(zero_gap_probability(0.5, 0.4, 0.1).is_err());
    }

    #[test]
    fn zero_gap_constant_is_stable() {
        let r = lemma23_bound_check(0.1, 3).unwrap();
        assert!(!r.divergent);
        assert!(r.is_stable(0.02), "{:?}", r.refinement_trace);
    }

    #[test]
    fn euler_path_basics() {
        let mut rng = stream(1, 0);
        let (path, zs) = simulate_besq(0.1, 1.0, 1e-3, &mut rng).unwrap();
        assert_eq!(path.len(), 1001);
        assert!(path.iter().all(|&z| z >= 0.0));
        for (i, &f) in zs.flags.iter().enumerate() {
            assert_eq!(f, path[i + 1] == 0.0);
        }
        assert!(zs.intervals.windows(2).all(|w| w[0].1 < w[1].0));
    }

    #[test]
    fn euler_bias_shrinks_with_dt() {
        // truncation at zero pushes the mean above 4δT; the excess must shrink
        let excess = |dt: f64, seed: u64| {
            let v = crate::rng::run_replicas(4000, seed, |_, rng| *simulate_besq(0.1, 1.0, dt, rng).unwrap().0.last().unwrap());
            let acc: crate::stats::MeanAcc = v.into_iter().collect();
            (acc.mean() - 0.4, acc.stderr())
        };
        let (coarse, _) = excess(1e-2, 8);
        let (fine, se) = excess(1e-4, 8);
        assert!(fine < coarse);
        assert!(fine.abs() < 0.05 + 3.0 * se);
    }

    #[test]
    fn bridge_probability_limits() {
        assert_eq!(bridge_hit_probability(0.1, 0.0, 1.0, 1.0), 1.0);
        assert!(bridge_hit_probability(0.1, 1e-8, 1e-8, 1.0) > 0.99);
        assert!(bridge_hit_probability(0.1, 1.0, 1.0, 0.05) < 1e-6);
        let mut last = 1.0;
        for k in 1..30 {
            let p = bridge_hit_probability(0.1, 0.1 * k as f64, 0.3, 0.2);
            assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn exact_chain_single_step_start() {
        // from x over t: ∫ (1 - p_hit) q(x,y) dy = P_x(T0 > t); check by simulation
        let mut rng = stream(9, 0);
        let (x, t, n) = (0.3, 0.4, 40000);
        let mut miss = 0;
        for _ in 0..n {
            let y = sample_besq_exact(0.1, x, t, &mut rng);
            if rng.random::<f64>() >= bridge_hit_probability(0.1, x, y, t) {
                miss += 1;
            }
        }
        let (p, se) = crate::stats::proportion(miss, n);
        assert!((p - t0_survival_closed(0.1, x, t)).abs() < 3.5 * se);
    }

    #[test]
    fn exact_sampler_mean() {
        let mut rng = stream(2, 0);
        let xs: crate::stats::MeanAcc = (0..20000).map(|_| sample_besq_exact(0.1, 0.8, 0.5, &mut rng)).collect();
        // E Z_t = x + 4δ t
        assert!((xs.mean() - 1.0).abs() < 3.0 * xs.stderr());
    }

    #[test]
    fn box_dimension_trivial_sets() {
        let dt = 1e-5;
        let full = ZeroSet::from_flags(dt, vec![true; 100_000]);
        let scales = [1e-4, 1e-3, 1e-2, 1e-1];
        let d = box_dimension(&full, (0.25, 1.0), &scales).unwrap();
        assert_relative_eq!(d.slope, 1.0, epsilon = 0.01);
        let mut one = vec![false; 100_000];
        one[50_000] = true;
        let d = box_dimension(&ZeroSet::from_flags(dt, one), (0.25, 1.0), &scales).unwrap();
        assert_eq!(d.slope, 0.0);
        assert!(!d.reliable);
        assert!(box_dimension(&full, (0.25, 1.0), &[1e-3, 1e-2, 1e-1]).is_err());
    }
}
