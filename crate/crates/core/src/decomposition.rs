//! Splitting of the branching system into the part whose ancestry never
//! left `(-R, R)` (label `V`) and the part descended from exited mass
//! (label `W`), the immigration rate `Ȧ_t = V_t(f_R)` between them, and the
//! pathwise comparison of the `W` total mass with a squared Bessel process.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::branching::{branch, branching_probability, move_particles, Label, ParticlePopulation};
use crate::dirichlet_kernel::flux;
use crate::error::{LabError, Result};
use crate::rng::{run_replicas, stream};
use crate::stable_motion::StableLaw;
use crate::stats::{weighted_linear_fit, LinearFit, MeanAcc};

/// Grid record of a labelled simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrajectory {
    pub radius: f64,
    pub dt: f64,
    pub mass_unit: f64,
    pub times: Vec<f64>,
    pub v_count: Vec<usize>,
    pub w_count: Vec<usize>,
    /// Particles outside the decomposition (descendants of `Free` ancestors).
    pub free_count: Vec<usize>,
    pub a_dot: Vec<f64>,
    pub support: Vec<Option<(f64, f64)>>,
    /// Particles relabelled `V → W` during each step.
    pub relabeled: Vec<usize>,
    /// Net change of the `V` count from branching during each step.
    pub v_branch_change: Vec<i64>,
    pub final_population: ParticlePopulation,
    /// The last few nonempty populations as `(time, positions)`, oldest first.
    pub tail: Vec<(f64, Vec<f64>)>,
}

impl LabeledTrajectory {
    pub fn v_mass(&self, i: usize) -> f64 {
        self.v_count[i] as f64 * self.mass_unit
    }

    pub fn w_mass(&self, i: usize) -> f64 {
        self.w_count[i] as f64 * self.mass_unit
    }

    pub fn x_mass(&self, i: usize) -> f64 {
        self.total_count(i) as f64 * self.mass_unit
    }

    pub fn total_count(&self, i: usize) -> usize {
        self.v_count[i] + self.w_count[i] + self.free_count[i]
    }

    /// First recorded time with no particles at all.
    pub fn extinction_time(&self) -> Option<f64> {
        (0..self.times.len()).find(|&i| self.total_count(i) == 0).map(|i| self.times[i])
    }

    /// First recorded time with no `V` or `W` particles.
    pub fn labeled_extinction_time(&self) -> Option<f64> {
        (0..self.times.len()).find(|&i| self.v_count[i] + self.w_count[i] == 0).map(|i| self.times[i])
    }

    /// First recorded time with no `Free` particles.
    pub fn free_extinction_time(&self) -> Option<f64> {
        (0..self.times.len()).find(|&i| self.free_count[i] == 0).map(|i| self.times[i])
    }

    /// Index of the recorded time closest to `t`.
    pub fn index_at(&self, t: f64) -> usize {
        (((t - self.times[0]) / self.dt).round().max(0.0) as usize).min(self.times.len() - 1)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "v_mass", "w_mass", "x_mass", "a_dot", "support_min", "support_max"])?;
        for i in 0..self.times.len() {
            let (lo, hi) = match self.support[i] {
                Some((a, b)) => (a.to_string(), b.to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([
                self.times[i].to_string(),
                self.v_mass(i).to_string(),
                self.w_mass(i).to_string(),
                self.x_mass(i).to_string(),
                self.a_dot[i].to_string(),
                lo,
                hi,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `Ȧ = Σ_{V particles} mass · f_R(x)`.
pub fn immigration_rate(pop: &ParticlePopulation, radius: f64, law: &StableLaw) -> Result<f64> {
    let mut total = 0.0;
    for (&x, &l) in pop.positions.iter().zip(&pop.labels) {
        if l != Label::V {
            continue;
        }
        if !(x.abs() < radius) {
            return Err(LabError::Invariant(format!("V particle at {x} outside (-{radius}, {radius})")));
        }
        total += flux(law, x, radius);
    }
    Ok(total * pop.mass_unit)
}

/// Simulate from `x0` with every particle labelled `V` at time 0. Each step
/// moves all particles, relabels `V` particles that landed outside
/// `(-R, R)` as `W`, then branches (offspring inherit labels). The random
/// stream consumed is the same as for an unlabelled simulation.
pub fn coupled_simulate<R: Rng + ?Sized>(
    x0: &ParticlePopulation,
    law: &StableLaw,
    radius: f64,
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<LabeledTrajectory> {
    let mut v0 = x0.clone();
    v0.labels.iter_mut().for_each(|l| *l = Label::V);
    coupled_simulate_with(&v0, law, radius, horizon, dt, rng, &RecordOptions::default())
}

/// Recording switches for [`coupled_simulate_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordOptions {
    /// Number of last nonempty populations kept in `tail`.
    pub keep_last: usize,
    /// Stop stepping once every particle is gone.
    pub stop_at_extinction: bool,
}

impl Default for RecordOptions {
    fn default() -> Self {
        RecordOptions { keep_last: 0, stop_at_extinction: false }
    }
}

/// General form of [`coupled_simulate`]: particles enter with their own
/// labels. `V` particles must start in `[-R/2, R/2]`; `Free` particles are
/// carried along unlabelled and never relabelled.
pub fn coupled_simulate_with<R: Rng + ?Sized>(
    x0: &ParticlePopulation,
    law: &StableLaw,
    radius: f64,
    horizon: f64,
    dt: f64,
    rng: &mut R,
    opts: &RecordOptions,
) -> Result<LabeledTrajectory> {
    if !(radius > 0.0) {
        return Err(LabError::domain(format!("radius must be positive, got {radius}")));
    }
    for (&x, &l) in x0.positions.iter().zip(&x0.labels) {
        if l == Label::V && x.abs() > 0.5 * radius {
            return Err(LabError::domain(format!("initial V particle at {x} not inside [-R/2, R/2] for R = {radius}")));
        }
        if l == Label::W {
            return Err(LabError::domain("initial population may not contain W particles".to_string()));
        }
    }
    let p = branching_probability(x0.rate(), dt)?;
    let n = (horizon / dt).round() as usize;
    let mut pop = x0.clone();
    let mut traj = LabeledTrajectory {
        radius,
        dt,
        mass_unit: pop.mass_unit,
        times: Vec::with_capacity(n + 1),
        v_count: Vec::with_capacity(n + 1),
        w_count: Vec::with_capacity(n + 1),
        free_count: Vec::with_capacity(n + 1),
        a_dot: Vec::with_capacity(n + 1),
        support: Vec::with_capacity(n + 1),
        relabeled: Vec::with_capacity(n),
        v_branch_change: Vec::with_capacity(n),
        final_population: ParticlePopulation::new(pop.mass_unit),
        tail: Vec::new(),
    };
    let record = |traj: &mut LabeledTrajectory, pop: &ParticlePopulation| -> Result<()> {
        let v = pop.count_with(Label::V);
        let w = pop.count_with(Label::W);
        traj.times.push(pop.time);
        traj.v_count.push(v);
        traj.w_count.push(w);
        traj.free_count.push(pop.len() - v - w);
        traj.a_dot.push(immigration_rate(pop, radius, law)?);
        traj.support.push(pop.support());
        if opts.keep_last > 0 && !pop.is_empty() {
            if traj.tail.len() == opts.keep_last {
                traj.tail.remove(0);
            }
            traj.tail.push((pop.time, pop.positions.clone()));
        }
        Ok(())
    };
    record(&mut traj, &pop)?;
    for k in 1..=n {
        if pop.is_empty() && opts.stop_at_extinction {
            break;
        }
        if !pop.is_empty() {
            move_particles(&mut pop, dt, law, rng);
            let mut moved_out = 0;
            for (x, l) in pop.positions.iter().zip(pop.labels.iter_mut()) {
                if *l == Label::V && x.abs() >= radius {
                    *l = Label::W;
                    moved_out += 1;
                }
            }
            let v_before = pop.count_with(Label::V) as i64;
            branch(&mut pop, p, rng)?;
            traj.relabeled.push(moved_out);
            traj.v_branch_change.push(pop.count_with(Label::V) as i64 - v_before);
        } else {
            traj.relabeled.push(0);
            traj.v_branch_change.push(0);
        }
        pop.time = x0.time + k as f64 * dt;
        record(&mut traj, &pop)?;
    }
    traj.final_population = pop;
    Ok(traj)
}

/// Unlabelled total mass at the listed step indices, consuming the random
/// stream exactly like [`coupled_simulate`].
pub fn plain_total_mass<R: Rng + ?Sized>(
    x0: &ParticlePopulation,
    law: &StableLaw,
    dt: f64,
    checkpoints: &[usize],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let p = branching_probability(x0.rate(), dt)?;
    let mut pop = x0.clone();
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut done = 0;
    for &target in checkpoints {
        while done < target {
            if !pop.is_empty() {
                move_particles(&mut pop, dt, law, rng);
                branch(&mut pop, p, rng)?;
            }
            done += 1;
        }
        out.push(pop.total_mass());
    }
    Ok(out)
}

/// Maximal recorded intervals on which only `V` particles exist (and at
/// least one does), as `(first time, last time)`.
pub fn detect_support_collapse(traj: &LabeledTrajectory) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for i in 0..traj.times.len() {
        let collapsed = traj.w_count[i] == 0 && traj.free_count[i] == 0 && traj.v_count[i] > 0;
        match (collapsed, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((traj.times[s], traj.times[i - 1]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((traj.times[s], *traj.times.last().unwrap()));
    }
    out
}

/// Settings of the fourth-moment scan of `Ȧ` increments.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementScanParams {
    pub law: StableLaw,
    pub radius: f64,
    /// Particles per unit initial mass.
    pub n_particles: usize,
    /// Total initial mass, placed at the origin.
    pub initial_mass: f64,
    pub dt: f64,
    /// Base time `t` of the increment `Ȧ_{t+s} - Ȧ_t`.
    pub start: f64,
    pub s_values: Vec<f64>,
    pub n_replicas: usize,
    pub seed: u64,
}

/// Result of an increment scan.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementScan {
    /// `(s, estimate of E[(Ȧ_{t+s} - Ȧ_t)^4], standard error)`.
    pub rows: Vec<(f64, f64, f64)>,
    /// Weighted fit of log estimate against log s.
    pub fit: Option<LinearFit>,
}

impl IncrementScan {
    /// Lower end of the two-sided 95% interval for the log-log slope.
    pub fn slope_lower_95(&self) -> Option<f64> {
        self.fit.map(|f| f.slope - 1.959_963_985 * f.slope_se)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "fourth_moment", "stderr", "slope"])?;
        let slope = self.fit.map(|f| f.slope.to_string()).unwrap_or_default();
        for &(s, m, se) in &self.rows {
            w.write_record([s.to_string(), m.to_string(), se.to_string(), slope.clone()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Monte Carlo estimates of `E[(Ȧ_{t+s} - Ȧ_t)^4]` with independent
/// replicas for each `s`, and the log-log slope.
pub fn increment_moment_scan(p: &IncrementScanParams) -> Result<IncrementScan> {
    if !(p.law.alpha < 2.0 / 3.0) {
        return Err(LabError::gate(format!("increment moments need alpha < 2/3, got {}", p.law.alpha)));
    }
    if p.s_values.iter().any(|&s| !(s >= 0.0) || p.start + s > 1.0) || !(p.start >= 0.0) {
        return Err(LabError::domain("need 0 <= t and t + s <= 1".to_string()));
    }
    let count = (p.initial_mass * p.n_particles as f64).round() as usize;
    let x0 = ParticlePopulation::from_atoms(&[(0.0, count)], 1.0 / p.n_particles as f64, Label::V);
    branching_probability(x0.rate(), p.dt)?;
    let mut rows = Vec::with_capacity(p.s_values.len());
    for (j, &s) in p.s_values.iter().enumerate() {
        if s == 0.0 {
            rows.push((0.0, 0.0, 0.0));
            continue;
        }
        let seed = crate::rng::derive_seed(p.seed, j as u64);
        let vals = run_replicas(p.n_replicas, seed, |_, rng| -> Result<f64> {
            let traj = coupled_simulate(&x0, &p.law, p.radius, p.start + s, p.dt, rng)?;
            let a0 = traj.a_dot[traj.index_at(p.start)];
            let a1 = *traj.a_dot.last().unwrap();
            Ok((a1 - a0).powi(4))
        });
        let acc: MeanAcc = vals.into_iter().collect::<Result<Vec<_>>>()?.into_iter().collect();
        rows.push((s, acc.mean(), acc.stderr()));
    }
    let pts: Vec<&(f64, f64, f64)> = rows.iter().filter(|r| r.0 > 0.0 && r.1 > 0.0).collect();
    let fit = if pts.len() >= 2 {
        let x: Vec<f64> = pts.iter().map(|r| r.0.ln()).collect();
        let y: Vec<f64> = pts.iter().map(|r| r.1.ln()).collect();
        let sig: Vec<f64> = pts.iter().map(|r| (r.2 / r.1).max(1e-12)).collect();
        Some(weighted_linear_fit(&x, &y, &sig))
    } else {
        None
    };
    Ok(IncrementScan { rows, fit })
}

/// Euler solutions of `dW = √W⁺ dB + Ȧ dt` and `dZ̃ = √Z̃⁺ dB + δ dt` from 0
/// driven by the same increments.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRun {
    pub dt: f64,
    pub a_dot_path: Vec<f64>,
    pub w_path: Vec<f64>,
    pub z_path: Vec<f64>,
    pub delta: f64,
    /// First step with `Ȧ ≥ δ`, if any.
    pub tau_index: Option<usize>,
}

impl ComparisonRun {
    /// `max (W - Z̃)⁺` over the grid points up to `tau_index`.
    pub fn max_violation(&self) -> f64 {
        let end = self.tau_index.map_or(self.w_path.len(), |k| k + 1);
        self.w_path[..end].iter().zip(&self.z_path).map(|(w, z)| (w - z).max(0.0)).fold(0.0, f64::max)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "w", "z", "a_dot", "violation_flag"])?;
        for k in 0..self.w_path.len() {
            let a = self.a_dot_path.get(k).map(|v| v.to_string()).unwrap_or_default();
            let flag = (self.w_path[k] > self.z_path[k]) as u8;
            w.write_record([k.to_string(), self.w_path[k].to_string(), self.z_path[k].to_string(), a, flag.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `n` Brownian increments over steps of `dt`.
pub fn brownian_increments(seed: u64, n: usize, dt: f64) -> Vec<f64> {
    let mut rng = stream(seed, 0);
    let sd = dt.sqrt();
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Sum consecutive groups of `factor` increments: the same Brownian path on
/// a coarser grid.
pub fn coarsen_increments(db: &[f64], factor: usize) -> Vec<f64> {
    db.chunks(factor).map(|c| c.iter().sum()).collect()
}

/// Comparison run with increments drawn from `seed`.
pub fn sde_comparison(a_dot_path: &[f64], delta: f64, dt: f64, seed: u64) -> Result<ComparisonRun> {
    let db = brownian_increments(seed, a_dot_path.len(), dt);
    sde_comparison_with_noise(a_dot_path, delta, dt, &db)
}

/// Comparison run with given increments (`db.len() == a_dot_path.len()`).
pub fn sde_comparison_with_noise(a_dot_path: &[f64], delta: f64, dt: f64, db: &[f64]) -> Result<ComparisonRun> {
    if !(delta > 0.0 && delta < 0.25) {
        return Err(LabError::domain(format!("delta must lie in (0, 1/4), got {delta}")));
    }
    if !(dt > 0.0) || db.len() != a_dot_path.len() {
        return Err(LabError::domain("need dt > 0 and one increment per drift value".to_string()));
    }
    if a_dot_path.iter().any(|&a| !(a >= 0.0)) {
        return Err(LabError::domain("immigration path must be nonnegative".to_string()));
    }
    let n = a_dot_path.len();
    let mut w_path = Vec::with_capacity(n + 1);
    let mut z_path = Vec::with_capacity(n + 1);
    let (mut w, mut z) = (0.0f64, 0.0f64);
    w_path.push(w);
    z_path.push(z);
    for k in 0..n {
        w = (w + w.max(0.0).sqrt() * db[k] + a_dot_path[k] * dt).max(0.0);
        z = (z + z.max(0.0).sqrt() * db[k] + delta * dt).max(0.0);
        w_path.push(w);
        z_path.push(z);
    }
    Ok(ComparisonRun {
        dt,
        a_dot_path: a_dot_path.to_vec(),
        w_path,
        z_path,
        delta,
        tau_index: a_dot_path.iter().position(|&a| a >= delta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dirichlet_kernel::f_r;
    use approx::assert_relative_eq;

    fn law() -> StableLaw {
        StableLaw::new(0.5).unwrap()
    }

    #[test]
    fn immigration_rate_examples() {
        let l = law();
        let pop = ParticlePopulation::from_atoms(&[(0.0, 1)], 1.0, Label::V);
        let want = 2.0 * l.c_alpha / (l.alpha * 2f64.powf(l.alpha));
        assert_relative_eq!(immigration_rate(&pop, 2.0, &l).unwrap(), want, max_relative = 1e-12);
        assert_relative_eq!(f_r(0.0, 2.0, &l).unwrap(), want, max_relative = 1e-12);
        assert_eq!(immigration_rate(&ParticlePopulation::new(0.1), 2.0, &l).unwrap(), 0.0);
        let spread = ParticlePopulation::from_atoms(&[(0.3, 3), (-0.9, 2)], 0.2, Label::V);
        assert!(immigration_rate(&spread, 3.0, &l).unwrap() < immigration_rate(&spread, 2.0, &l).unwrap());
        let bad = ParticlePopulation::from_atoms(&[(2.5, 1)], 1.0, Label::V);
        assert!(matches!(immigration_rate(&bad, 2.0, &l), Err(LabError::Invariant(_))));
        let w = ParticlePopulation::from_atoms(&[(2.5, 1)], 1.0, Label::W);
        assert_eq!(immigration_rate(&w, 2.0, &l).unwrap(), 0.0);
    }

    #[test]
    fn coupled_run_invariants() {
        let l = law();
        let x0 = ParticlePopulation::from_atoms(&[(0.0, 50), (0.4, 50)], 0.01, Label::Free);
        let mut rng = stream(4, 0);
        let traj = coupled_simulate(&x0, &l, 2.0, 0.5, 1e-3, &mut rng).unwrap();
        assert_eq!(traj.w_count[0], 0);
        assert_eq!(traj.times.len(), 501);
        for k in 0..traj.relabeled.len() {
            let lhs = traj.v_count[k + 1] as i64;
            let rhs = traj.v_count[k] as i64 - traj.relabeled[k] as i64 + traj.v_branch_change[k];
            assert_eq!(lhs, rhs);
        }
        for (x, l) in traj.final_population.positions.iter().zip(&traj.final_population.labels) {
            if *l == Label::V {
                assert!(x.abs() < 2.0);
            }
        }
        let intervals = detect_support_collapse(&traj);
        assert_eq!(intervals[0].0, 0.0);
        for &(a, b) in &intervals {
            for i in traj.index_at(a)..=traj.index_at(b) {
                let (lo, hi) = traj.support[i].unwrap();
                assert!(lo > -2.0 && hi < 2.0);
            }
        }
    }

    #[test]
    fn labels_do_not_change_the_path() {
        let l = law();
        let x0 = ParticlePopulation::from_atoms(&[(0.0, 40)], 0.025, Label::V);
        let traj = coupled_simulate(&x0, &l, 1.0, 0.3, 1e-3, &mut stream(5, 0)).unwrap();
        let plain = plain_total_mass(&x0, &l, 1e-3, &[100, 300], &mut stream(5, 0)).unwrap();
        assert_relative_eq!(traj.x_mass(100), plain[0], max_relative = 1e-12);
        assert_relative_eq!(traj.x_mass(300), plain[1], max_relative = 1e-12);
    }

    #[test]
    fn initial_support_is_checked() {
        let x0 = ParticlePopulation::from_atoms(&[(1.5, 1)], 1.0, Label::V);
        assert!(coupled_simulate(&x0, &law(), 2.0, 0.1, 1e-3, &mut stream(1, 0)).is_err());
        // free particles may start anywhere and are never relabelled
        let mut mixed = ParticlePopulation::from_atoms(&[(0.0, 5)], 0.1, Label::V);
        mixed.push(5.0, Label::Free);
        let opts = RecordOptions { keep_last: 3, stop_at_extinction: true };
        let traj = coupled_simulate_with(&mixed, &law(), 2.0, 0.2, 1e-3, &mut stream(1, 0), &opts).unwrap();
        assert_eq!(traj.free_count[0], 1);
        assert!(traj.tail.len() <= 3);
        assert!(detect_support_collapse(&traj).iter().all(|&(a, _)| traj.free_count[traj.index_at(a)] == 0));
    }

    #[test]
    fn collapse_after_extinction_not_reported() {
        let l = law();
        let x0 = ParticlePopulation::from_atoms(&[(0.0, 2)], 0.5, Label::V);
        let traj = coupled_simulate(&x0, &l, 1.0, 3.0, 0.01, &mut stream(2, 0)).unwrap();
        if let Some(z) = traj.extinction_time() {
            assert!(detect_support_collapse(&traj).iter().all(|&(_, b)| b < z));
        }
    }

    #[test]
    fn comparison_trivial_cases() {
        let n = 1000;
        let same = sde_comparison(&vec![0.1; n], 0.1, 1e-3, 3).unwrap();
        assert_eq!(same.w_path, same.z_path);
        assert_eq!(same.tau_index, Some(0));
        let zero = sde_comparison(&vec![0.0; n], 0.1, 1e-3, 3).unwrap();
        assert!(zero.w_path.iter().all(|&w| w == 0.0));
        assert!(zero.z_path.iter().all(|&z| z >= 0.0));
        assert_eq!(zero.max_violation(), 0.0);
        assert!(sde_comparison(&[-1.0], 0.1, 1e-3, 3).is_err());
        let db = brownian_increments(1, 8, 0.1);
        let c = coarsen_increments(&db, 4);
        assert_relative_eq!(c[0] + c[1], db.iter().sum::<f64>(), max_relative = 1e-12);
    }

    #[test]
    fn increment_scan_gate_and_zero() {
        let p = IncrementScanParams {
            law: StableLaw::new(0.7).unwrap(),
            radius: 4.0,
            n_particles: 10,
            initial_mass: 1.0,
            dt: 1e-3,
            start: 0.0,
            s_values: vec![0.0],
            n_replicas: 2,
            seed: 1,
        };
        assert!(matches!(increment_moment_scan(&p), Err(LabError::Gate(_))));
        let ok = IncrementScanParams { law: law(), ..p };
        assert_eq!(increment_moment_scan(&ok).unwrap().rows[0], (0.0, 0.0, 0.0));
    }
}
