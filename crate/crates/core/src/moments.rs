//! Moment recursion for `⟨X_s, φ⟩`: the functions `v_n(s, x)` built from
//! `v_1 = P_s φ` and
//! `v_n(s) = Σ_{k=1}^{n-1} C(n-1,k) ∫_0^s P_{s-u}(v_k(u) v_{n-k}(u)) du`,
//! which are the cumulants of `⟨X_s, φ⟩` under `P_{δ_x}`. Semigroups are
//! supplied by oracles acting on functions sampled at spatial nodes.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use statrs::function::gamma::ln_gamma;

use crate::dirichlet_kernel::{flux, kappa_integral, BoundReport};
use crate::error::{LabError, Result};
use crate::quad::{integrate, GaussLegendre, QuadOpts};
use crate::rng::stream;
use crate::stable_motion::{killed_endpoint, StableLaw};

/// Density of the process at time `t`, started at 0, by Fourier inversion of
/// `exp(-t|ξ|^α)` (tail series for large arguments).
pub fn stable_density(law: &StableLaw, t: f64, x: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(LabError::domain(format!("density needs t > 0, got {t}")));
    }
    let scale = t.powf(-1.0 / law.alpha);
    Ok(scale * unit_density(law.alpha, x.abs() * scale))
}

const SERIES_FROM: f64 = 30.0;

fn unit_density(alpha: f64, z: f64) -> f64 {
    if z >= SERIES_FROM {
        if let Some(v) = tail_series(alpha, z) {
            return v;
        }
    }
    fourier_density(alpha, z)
}

/// `(1/π) Σ_k (-1)^{k+1} Γ(αk+1)/k! sin(παk/2) z^{-αk-1}`, summed until the
/// terms are negligible; `None` if they stop shrinking first.
fn tail_series(alpha: f64, z: f64) -> Option<f64> {
    let lz = z.ln();
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    for k in 1..200 {
        let kf = k as f64;
        let mag = (ln_gamma(alpha * kf + 1.0) - ln_gamma(kf + 1.0) - (alpha * kf + 1.0) * lz).exp();
        let term = if k % 2 == 1 { mag } else { -mag } * (0.5 * PI * alpha * kf).sin();
        sum += term;
        if mag <= 1e-17 * sum.abs() {
            return Some(sum / PI);
        }
        if mag > prev && k > 3 {
            return None;
        }
        prev = mag;
    }
    None
}

fn fourier_density(alpha: f64, z: f64) -> f64 {
    // e^{-ξ^α} < 1e-17 beyond this
    let top = 40f64.powf(1.0 / alpha);
    let width = if z > 0.5 { (PI / z).min(1.0) } else { 1.0 };
    let mut breaks = crate::quad::graded_toward_left(0.0, width.min(top), 0.25, 1e-10);
    let mut b = width;
    while b < top {
        b = (b + width).min(top);
        breaks.push(b);
    }
    let q = integrate(
        |xi| (z * xi).cos() * (-xi.powf(alpha)).exp(),
        &breaks,
        QuadOpts { abs_tol: 1e-16, rel_tol: 1e-12, max_intervals: 8 * breaks.len() + 1000 },
    );
    q.value / PI
}

/// Which semigroup an oracle represents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleKind {
    FullSpace,
    Killed { radius: f64 },
}

/// `φ ↦ P_s φ` on functions sampled at a fixed set of spatial nodes.
pub trait SemigroupOracle: Sync {
    fn kind(&self) -> OracleKind;
    fn nodes(&self) -> &[f64];
    /// `P_s f` at the nodes, for `s > 0`.
    fn apply(&self, f: &[f64], s: f64) -> Vec<f64>;
    /// Value at an arbitrary point of the function represented by `f`.
    fn interpolate(&self, f: &[f64], x: f64) -> f64;
    /// Whether `P_a P_b = P_{a+b}` holds for the discrete operator, which
    /// lets the recursion accumulate incrementally.
    fn is_semigroup(&self) -> bool {
        true
    }

    fn sample(&self, phi: &dyn Fn(f64) -> f64) -> Vec<f64> {
        self.nodes().iter().map(|&x| phi(x)).collect()
    }

    fn evaluate(&self, phi: &dyn Fn(f64) -> f64, s: f64, x: f64) -> f64 {
        let f = self.sample(phi);
        self.interpolate(&self.apply(&f, s), x)
    }
}

/// Full-space semigroup by FFT on a periodic uniform grid over `[-L, L)`:
/// multiplies the discrete Fourier coefficients by `exp(-s|ξ|^α)`.
/// Constants are preserved exactly; mass wrapping around the period is the
/// only approximation for smooth inputs.
pub struct FullSpaceOracle {
    law: StableLaw,
    nodes: Vec<f64>,
    freq_power: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    half_width: f64,
}

impl FullSpaceOracle {
    pub fn new(law: StableLaw, half_width: f64, log2_points: u32) -> Self {
        let n = 1usize << log2_points;
        let h = 2.0 * half_width / n as f64;
        let nodes = (0..n).map(|k| -half_width + k as f64 * h).collect();
        let freq_power = (0..n)
            .map(|k| {
                let m = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
                (2.0 * PI * m / (2.0 * half_width)).abs().powf(law.alpha)
            })
            .collect();
        let mut planner = FftPlanner::new();
        FullSpaceOracle {
            law,
            nodes,
            freq_power,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            half_width,
        }
    }

    pub fn law(&self) -> &StableLaw {
        &self.law
    }
}

impl SemigroupOracle for FullSpaceOracle {
    fn kind(&self) -> OracleKind {
        OracleKind::FullSpace
    }

    fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    fn apply(&self, f: &[f64], s: f64) -> Vec<f64> {
        let n = self.nodes.len();
        let mut buf: Vec<Complex<f64>> = f.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        for (c, &p) in buf.iter_mut().zip(&self.freq_power) {
            *c *= (-s * p).exp() / n as f64;
        }
        self.inverse.process(&mut buf);
        buf.iter().map(|c| c.re).collect()
    }

    fn interpolate(&self, f: &[f64], x: f64) -> f64 {
        let n = f.len();
        let h = 2.0 * self.half_width / n as f64;
        let u = (x + self.half_width) / h;
        let i = u.floor();
        let w = u - i;
        let i0 = (i as i64).rem_euclid(n as i64) as usize;
        let i1 = (i0 + 1) % n;
        f[i0] * (1.0 - w) + f[i1] * w
    }
}

/// Killed semigroup on `(-R, R)` by averaging over killed Euler skeletons
/// started at each node. Node `j` always uses random stream `j`, so repeated
/// applications share random numbers.
pub struct KilledMcOracle {
    law: StableLaw,
    radius: f64,
    nodes: Vec<f64>,
    n_paths: usize,
    dt: f64,
    seed: u64,
}

impl KilledMcOracle {
    pub fn new(law: StableLaw, radius: f64, n_nodes: usize, n_paths: usize, dt: f64, seed: u64) -> Self {
        let h = 2.0 * radius / n_nodes as f64;
        let nodes = (0..n_nodes).map(|j| -radius + (j as f64 + 0.5) * h).collect();
        KilledMcOracle { law, radius, nodes, n_paths, dt, seed }
    }
}

impl SemigroupOracle for KilledMcOracle {
    fn kind(&self) -> OracleKind {
        OracleKind::Killed { radius: self.radius }
    }

    fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    fn apply(&self, f: &[f64], s: f64) -> Vec<f64> {
        self.nodes
            .par_iter()
            .enumerate()
            .map(|(j, &x)| {
                let mut rng = stream(self.seed, j as u64);
                let dt = self.dt.min(s);
                let total: f64 = (0..self.n_paths)
                    .map(|_| match killed_endpoint(&self.law, self.radius, x, s, dt, &mut rng).expect("valid inputs") {
                        Some(y) => self.interpolate(f, y),
                        None => 0.0,
                    })
                    .sum();
                total / self.n_paths as f64
            })
            .collect()
    }

    fn interpolate(&self, f: &[f64], x: f64) -> f64 {
        let n = f.len();
        let h = 2.0 * self.radius / n as f64;
        let u = ((x + self.radius) / h - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (u.floor() as usize).min(n - 2);
        let w = u - i as f64;
        f[i] * (1.0 - w) + f[i + 1] * w
    }
}

/// Killed semigroup replaced by its upper envelope `κ` (not a semigroup).
/// Represents even functions on `(-R, R)` by their values at nodes placed
/// geometrically in the distance to the boundary, interpolated
/// log-linearly in that distance.
pub struct KappaOracle {
    law: StableLaw,
    radius: f64,
    /// Distances to the boundary, increasing, last one `R` (the centre).
    dists: Vec<f64>,
    nodes: Vec<f64>,
    d_min: f64,
    gl: GaussLegendre,
}

impl KappaOracle {
    pub fn new(law: StableLaw, radius: f64, d_min: f64, ratio: f64) -> Self {
        let mut dists = vec![d_min];
        while *dists.last().unwrap() * ratio < radius {
            let next = dists.last().unwrap() * ratio;
            dists.push(next);
        }
        dists.push(radius);
        let nodes = dists.iter().map(|d| radius - d).collect();
        KappaOracle { law, radius, dists, nodes, d_min, gl: GaussLegendre::new(8) }
    }
}

impl SemigroupOracle for KappaOracle {
    fn kind(&self) -> OracleKind {
        OracleKind::Killed { radius: self.radius }
    }

    fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    fn is_semigroup(&self) -> bool {
        false
    }

    fn apply(&self, f: &[f64], s: f64) -> Vec<f64> {
        let logs: Vec<f64> = f.iter().map(|v| v.max(1e-300).ln()).collect();
        self.nodes
            .par_iter()
            .map(|&y| kappa_integral(&self.law, s, y, self.radius, 0.1 * self.d_min, &self.gl, |x| self.interp_log(&logs, x)))
            .collect()
    }

    fn interpolate(&self, f: &[f64], x: f64) -> f64 {
        let logs: Vec<f64> = f.iter().map(|v| v.max(1e-300).ln()).collect();
        self.interp_log(&logs, x)
    }
}

impl KappaOracle {
    fn interp_log(&self, logs: &[f64], x: f64) -> f64 {
        let d = (self.radius - x.abs()).max(1e-300);
        let ds = &self.dists;
        let n = ds.len();
        // the last cell (up to the centre) is interpolated linearly in d
        if d >= ds[n - 2] {
            let w = (d - ds[n - 2]) / (ds[n - 1] - ds[n - 2]);
            return (logs[n - 2] * (1.0 - w) + logs[n - 1] * w).exp();
        }
        let i = match ds.partition_point(|&v| v <= d) {
            0 => 0,
            k => (k - 1).min(n - 3),
        };
        let (l0, l1) = (ds[i].ln(), ds[i + 1].ln());
        let w = (d.ln() - l0) / (l1 - l0);
        (logs[i] * (1.0 - w) + logs[i + 1] * w).exp()
    }
}

/// Cells `[t_{i-1}, t_i]` covering `[0, s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub edges: Vec<f64>,
}

impl TimeGrid {
    /// `t_i = s (i/m)^q`: uniform for `q = 1`, refined toward `u = 0` for `q > 1`.
    pub fn graded(s: f64, m: usize, q: f64) -> Result<Self> {
        if !(s > 0.0) || m == 0 || !(q >= 1.0) {
            return Err(LabError::domain("time grid needs s > 0, m > 0, q >= 1".to_string()));
        }
        Ok(TimeGrid { edges: (0..=m).map(|i| s * (i as f64 / m as f64).powf(q)).collect() })
    }

    pub fn horizon(&self) -> f64 {
        *self.edges.last().unwrap()
    }

    pub fn cells(&self) -> usize {
        self.edges.len() - 1
    }
}

/// `v_1..v_4` at the final time of a grid, sampled at the oracle's nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct VnSolution {
    pub s: f64,
    /// `values[n-1]` holds `v_n(s, ·)`; orders above the requested one are empty.
    pub values: Vec<Vec<f64>>,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Source term `Σ_{k=1}^{n-1} C(n-1,k) v_k v_{n-k}` at one time.
fn source(n: usize, v: &[Vec<f64>]) -> Vec<f64> {
    let len = v[0].len();
    let mut out = vec![0.0; len];
    for k in 1..n {
        let c = binomial(n - 1, k);
        for (o, (a, b)) in out.iter_mut().zip(v[k - 1].iter().zip(&v[n - k - 1])) {
            *o += c * a * b;
        }
    }
    out
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Composite midpoint rule in `u` on the cells of `grid`. Values at cell
/// midpoints `c_i` (needed for higher orders) use the half cell
/// `[t_{i-1}, c_i]` with the source frozen at `c_i`; the final time uses
/// full cells. Semigroup oracles accumulate incrementally, others by direct
/// summation.
pub fn v_all(phi: &[f64], oracle: &dyn SemigroupOracle, grid: &TimeGrid, max_order: usize) -> Result<VnSolution> {
    if !(1..=4).contains(&max_order) {
        return Err(LabError::domain(format!("moment order must be 1..=4, got {max_order}")));
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(LabError::Input("non-finite test function sample".to_string()));
    }
    let s = grid.horizon();
    let m = grid.cells();
    let mid: Vec<f64> = grid.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let h: Vec<f64> = grid.edges.windows(2).map(|w| w[1] - w[0]).collect();
    let len = phi.len();
    let incremental = oracle.is_semigroup();

    // src[n-1][i] = source term of order n at c_i
    let mut src: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(m); max_order];
    // running S_i = Σ_{j<i} h_j P_{c_i - c_j} F(c_j) per order (incremental mode)
    let mut acc: Vec<Vec<f64>> = vec![vec![0.0; len]; max_order];
    for i in 0..m {
        if incremental && i > 0 {
            let gap = mid[i] - mid[i - 1];
            for n in 2..=max_order {
                let mut carry = acc[n - 1].clone();
                axpy(h[i - 1], &src[n - 1][i - 1], &mut carry);
                acc[n - 1] = oracle.apply(&carry, gap);
            }
        }
        {
            // v_n(c_i) for n = 1..max_order
            let mut cur: Vec<Vec<f64>> = vec![oracle.apply(phi, mid[i])];
            for n in 2..=max_order {
                let f = source(n, &cur);
                let mut val = if incremental {
                    acc[n - 1].clone()
                } else {
                    let mut total = vec![0.0; len];
                    for j in 0..i {
                        axpy(h[j], &oracle.apply(&src[n - 1][j], mid[i] - mid[j]), &mut total);
                    }
                    total
                };
                axpy(0.5 * h[i], &oracle.apply(&f, 0.25 * h[i]), &mut val);
                src[n - 1].push(f);
                cur.push(val);
            }
        }
    }
    let mut values = vec![oracle.apply(phi, s)];
    for n in 2..=max_order {
        let out = if incremental {
            // acc holds S at c_m without cell m; add it, then move to s
            let mut carry = acc[n - 1].clone();
            axpy(h[m - 1], &src[n - 1][m - 1], &mut carry);
            oracle.apply(&carry, s - mid[m - 1])
        } else {
            let mut total = vec![0.0; len];
            for j in 0..m {
                axpy(h[j], &oracle.apply(&src[n - 1][j], s - mid[j]), &mut total);
            }
            total
        };
        values.push(out);
    }
    Ok(VnSolution { s, values })
}

/// `v_n(s, ·)` for one order.
pub fn v_n(phi: &[f64], n: usize, oracle: &dyn SemigroupOracle, grid: &TimeGrid) -> Result<Vec<f64>> {
    let sol = v_all(phi, oracle, grid, n)?;
    Ok(sol.values[n - 1].clone())
}

/// Richardson extrapolation of [`v_all`] from `m` and `2m` cells, removing
/// the `O(m^{-2})` term of the midpoint rule.
pub fn v_all_extrapolated(
    phi: &[f64],
    oracle: &dyn SemigroupOracle,
    s: f64,
    m: usize,
    q: f64,
    max_order: usize,
) -> Result<VnSolution> {
    let coarse = v_all(phi, oracle, &TimeGrid::graded(s, m, q)?, max_order)?;
    let fine = v_all(phi, oracle, &TimeGrid::graded(s, 2 * m, q)?, max_order)?;
    let values = coarse
        .values
        .iter()
        .zip(&fine.values)
        .map(|(c, f)| c.iter().zip(f).map(|(a, b)| (4.0 * b - a) / 3.0).collect())
        .collect();
    Ok(VnSolution { s, values })
}

/// Moments of `⟨X_s, φ⟩` under an initial measure.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable {
    pub s: f64,
    pub phi_id: String,
    /// `⟨μ, v_n(s)⟩`, n = 1..4 (the cumulants).
    pub cumulants: [f64; 4],
    /// `E⟨X_s, φ⟩^n`, n = 1..4.
    pub raw: [f64; 4],
    /// `E(⟨X_s, φ⟩ - ⟨μ, P_s φ⟩)^4 = ⟨μ, v_4⟩ + 3⟨μ, v_2⟩²`.
    pub centered_fourth: f64,
}

/// Raw moments from cumulants.
pub fn raw_from_cumulants(k: [f64; 4]) -> [f64; 4] {
    let [k1, k2, k3, k4] = k;
    [
        k1,
        k2 + k1 * k1,
        k3 + 3.0 * k2 * k1 + k1.powi(3),
        k4 + 4.0 * k3 * k1 + 3.0 * k2 * k2 + 6.0 * k2 * k1 * k1 + k1.powi(4),
    ]
}

/// Assemble the moment table for `μ = Σ mass·δ_position` from a solution.
pub fn moments_of(mu: &[(f64, f64)], phi_id: &str, sol: &VnSolution, oracle: &dyn SemigroupOracle) -> MomentTable {
    let mut cumulants = [0.0; 4];
    for (n, c) in cumulants.iter_mut().enumerate() {
        if let Some(v) = sol.values.get(n) {
            *c = mu.iter().map(|&(x, m)| m * oracle.interpolate(v, x)).sum();
        }
    }
    MomentTable {
        s: sol.s,
        phi_id: phi_id.to_string(),
        cumulants,
        raw: raw_from_cumulants(cumulants),
        centered_fourth: cumulants[3] + 3.0 * cumulants[1] * cumulants[1],
    }
}

/// One CSV row comparing a recursion value with a Monte Carlo estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentRow {
    pub s: f64,
    pub phi_id: String,
    pub order: usize,
    pub recursion_value: f64,
    pub mc_value: Option<f64>,
    pub mc_stderr: Option<f64>,
}

impl MomentRow {
    pub fn write_csv<W: std::io::Write>(rows: &[MomentRow], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "phi_id", "order", "recursion_value", "mc_value", "mc_stderr"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in rows {
            w.write_record([
                r.s.to_string(),
                r.phi_id.clone(),
                r.order.to_string(),
                r.recursion_value.to_string(),
                opt(r.mc_value),
                opt(r.mc_stderr),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `δ₀ = (1+ε₀)/4` must come from `0 < ε₀ < 1 ∧ (1/α - 3/2)`.
pub fn check_delta0(alpha: f64, delta0: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 2.0 / 3.0) {
        return Err(LabError::gate(format!("moment envelopes need alpha < 2/3, got {alpha}")));
    }
    let eps0 = 4.0 * delta0 - 1.0;
    if !(eps0 > 0.0 && eps0 < 1f64.min(1.0 / alpha - 1.5)) {
        return Err(LabError::domain(format!(
            "delta0 = {delta0} gives eps0 = {eps0}, outside (0, 1 ∧ (1/alpha - 3/2))"
        )));
    }
    Ok(())
}

/// Fitted constants of the envelopes
/// `v_1(s,y) ≤ C (R-|y|+s^{1/α})^{-α}` and, for n = 2..4,
/// `v_n(s,y) ≤ C s^{(n-1)δ₀} (R-|y|+s^{1/α})^{-(1+(n-1)δ₀)α}`,
/// for `φ = f_R` with the κ envelope as killed semigroup. One report per
/// order; refinement doubles the number of time cells starting from
/// `base_cells`.
pub fn check_vn_envelopes(
    radius: f64,
    law: &StableLaw,
    s_grid: &[f64],
    delta0: f64,
    base_cells: usize,
    levels: usize,
) -> Result<Vec<BoundReport>> {
    check_delta0(law.alpha, delta0)?;
    if s_grid.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
        return Err(LabError::domain("s grid must lie in (0, 1]".to_string()));
    }
    let oracle = KappaOracle::new(*law, radius, 1e-6 * radius, 1.5);
    let phi: Vec<f64> = oracle.nodes().iter().map(|&x| flux(law, x, radius)).collect();
    let a = law.alpha;
    let mut traces = vec![Vec::new(); 4];
    for level in 0..levels {
        let m = base_cells << level;
        let mut sup = [0.0f64; 4];
        for &s in s_grid {
            let sol = v_all(&phi, &oracle, &TimeGrid::graded(s, m, 2.0)?, 4)?;
            for (n, vals) in sol.values.iter().enumerate() {
                let e = n as f64 * delta0;
                for (&y, &v) in oracle.nodes().iter().zip(vals) {
                    let env = s.powf(e) * (radius - y.abs() + s.powf(1.0 / a)).powf(-(1.0 + e) * a);
                    sup[n] = sup[n].max(v / env);
                }
            }
        }
        for n in 0..4 {
            traces[n].push(sup[n]);
        }
    }
    Ok(traces
        .into_iter()
        .enumerate()
        .map(|(n, trace)| {
            let divergent = trace.iter().any(|v: &f64| !v.is_finite());
            BoundReport {
                lemma_id: format!("v{}_envelope", n + 1),
                alpha: a,
                radius,
                gamma: None,
                rho: Some(delta0),
                sup_ratio: *trace.last().unwrap_or(&f64::NAN),
                refinement_trace: trace,
                divergent,
                flags: vec![],
            }
        })
        .collect())
}

/// Smooth bump `exp(1 - 1/(1-x²))` on `|x| < 1`, equal to 1 at the origin.
pub fn smooth_bump(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - x * x)).exp()
    }
}
