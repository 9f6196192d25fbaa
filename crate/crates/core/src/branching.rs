//! Critical binary branching particle systems with α-stable motion, the
//! total-mass Feller diffusion and its extinction law.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson, StandardNormal};

use crate::error::{LabError, Result};
use crate::stable_motion::{step, StableLaw};

/// Lineage tag. `V` lineages have never left the ball, `W` lineages have.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Free,
    V,
    W,
}

/// A particle as seen by callers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub position: f64,
    pub mass: f64,
    pub label: Label,
}

/// Empirical measure of equal-mass particles (`mass_unit = 1/N`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParticlePopulation {
    pub positions: Vec<f64>,
    pub labels: Vec<Label>,
    pub time: f64,
    pub mass_unit: f64,
    /// Hard bound on the particle count; exceeding it is an error.
    pub cap: usize,
}

impl ParticlePopulation {
    pub fn new(mass_unit: f64) -> Self {
        assert!(mass_unit > 0.0, "mass unit must be positive");
        ParticlePopulation { positions: vec![], labels: vec![], time: 0.0, mass_unit, cap: usize::MAX }
    }

    /// `count` particles at each listed position, all with label `label`.
    pub fn from_atoms(atoms: &[(f64, usize)], mass_unit: f64, label: Label) -> Self {
        let mut pop = Self::new(mass_unit);
        for &(x, count) in atoms {
            pop.positions.extend(std::iter::repeat_n(x, count));
        }
        pop.labels = vec![label; pop.positions.len()];
        pop
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    /// Branching rate `N = 1/mass_unit`.
    pub fn rate(&self) -> f64 {
        1.0 / self.mass_unit
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.len() as f64 * self.mass_unit
    }

    pub fn mass_with(&self, label: Label) -> f64 {
        self.count_with(label) as f64 * self.mass_unit
    }

    pub fn count_with(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// `(min, max)` of the positions, `None` when empty.
    pub fn support(&self) -> Option<(f64, f64)> {
        if self.is_empty() {
            return None;
        }
        Some(self.positions.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x))))
    }

    /// Integral of `phi` against the measure.
    pub fn integrate<F: Fn(f64) -> f64>(&self, phi: F) -> f64 {
        self.positions.iter().map(|&x| phi(x)).sum::<f64>() * self.mass_unit
    }

    pub fn particles(&self) -> impl Iterator<Item = Particle> + '_ {
        self.positions
            .iter()
            .zip(&self.labels)
            .map(|(&position, &label)| Particle { position, mass: self.mass_unit, label })
    }

    pub fn push(&mut self, position: f64, label: Label) {
        self.positions.push(position);
        self.labels.push(label);
    }

    fn keep_where(&mut self, keep: &[bool]) {
        let mut k = 0;
        for i in 0..self.positions.len() {
            if keep[i] {
                self.positions[k] = self.positions[i];
                self.labels[k] = self.labels[i];
                k += 1;
            }
        }
        self.positions.truncate(k);
        self.labels.truncate(k);
    }

    /// Translate every particle by `shift`.
    pub fn translate(&mut self, shift: f64) {
        for x in &mut self.positions {
            *x += shift;
        }
    }

    fn empty_like(&self) -> Self {
        ParticlePopulation { positions: vec![], labels: vec![], time: self.time, mass_unit: self.mass_unit, cap: self.cap }
    }
}

/// Per-particle death and split probability for one step: `N·dt/2`.
pub fn branching_probability(rate: f64, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(LabError::domain(format!("dt must be positive, got {dt}")));
    }
    if rate * dt > 0.5 {
        return Err(LabError::gate(format!("N·dt = {} exceeds 0.5", rate * dt)));
    }
    Ok(0.5 * rate * dt)
}

/// Outcome of the branching half of a step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BranchCounts {
    pub deaths: usize,
    pub births: usize,
}

/// Independent critical binary branching of every particle: die with
/// probability `p`, split in two with probability `p`. Offspring inherit
/// position and label. Fails if the cap is exceeded.
pub fn branch<R: Rng + ?Sized>(pop: &mut ParticlePopulation, p: f64, rng: &mut R) -> Result<BranchCounts> {
    let n = pop.len();
    let mut keep = vec![true; n];
    let mut counts = BranchCounts::default();
    let mut born: Vec<usize> = Vec::new();
    for (i, k) in keep.iter_mut().enumerate() {
        let u: f64 = rng.random();
        if u < p {
            *k = false;
            counts.deaths += 1;
        } else if u < 2.0 * p {
            born.push(i);
        }
    }
    counts.births = born.len();
    let new_len = n - counts.deaths + counts.births;
    if new_len > pop.cap {
        return Err(LabError::CapExceeded { count: new_len, cap: pop.cap });
    }
    for &i in &born {
        let (x, l) = (pop.positions[i], pop.labels[i]);
        pop.push(x, l);
    }
    keep.resize(pop.len(), true);
    pop.keep_where(&keep);
    Ok(counts)
}

/// Move every particle by an independent increment over `dt`.
pub fn move_particles<R: Rng + ?Sized>(pop: &mut ParticlePopulation, dt: f64, law: &StableLaw, rng: &mut R) {
    let scale = dt.powf(1.0 / law.alpha);
    for x in &mut pop.positions {
        *x += step(law.alpha, scale, rng);
    }
}

/// One step: motion, optional killing outside `(-R, R)`, then branching.
/// Returns the landing points of particles removed by killing.
pub fn evolve_population<R: Rng + ?Sized>(
    pop: &mut ParticlePopulation,
    dt: f64,
    law: &StableLaw,
    rng: &mut R,
    kill_radius: Option<f64>,
) -> Result<Vec<f64>> {
    let p = branching_probability(pop.rate(), dt)?;
    move_particles(pop, dt, law, rng);
    let mut exits = Vec::new();
    if let Some(r) = kill_radius {
        let keep: Vec<bool> = pop.positions.iter().map(|x| x.abs() < r).collect();
        exits.extend(pop.positions.iter().zip(&keep).filter(|(_, &k)| !k).map(|(&x, _)| x));
        pop.keep_where(&keep);
    }
    branch(pop, p, rng)?;
    pop.time += dt;
    Ok(exits)
}

/// Partition by `|x| < K` (inside) versus `|x| >= K` (outside).
pub fn split_initial(pop: &ParticlePopulation, k: f64) -> (ParticlePopulation, ParticlePopulation) {
    let mut inside = pop.empty_like();
    let mut outside = pop.empty_like();
    for (&x, &l) in pop.positions.iter().zip(&pop.labels) {
        if x.abs() < k {
            inside.push(x, l);
        } else {
            outside.push(x, l);
        }
    }
    (inside, outside)
}

/// `P(M_t > 0) = 1 - exp(-2 m0 / t)` for the Feller diffusion `dM = √M dβ`.
pub fn survival_probability(m0: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) || !(m0 >= 0.0) {
        return Err(LabError::domain(format!("need m0 >= 0 and t > 0, got m0={m0}, t={t}")));
    }
    Ok(-(-2.0 * m0 / t).exp_m1())
}

/// Euler path of the Feller diffusion with absorption at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FellerMassPath {
    pub times: Vec<f64>,
    pub masses: Vec<f64>,
    pub extinction_time: Option<f64>,
}

/// Euler–Maruyama for `dM = √(M⁺) dβ`, truncated at zero and absorbed there.
pub fn simulate_feller_mass<R: Rng + ?Sized>(m0: f64, horizon: f64, dt: f64, rng: &mut R) -> Result<FellerMassPath> {
    if !(dt > 0.0) || !(m0 >= 0.0) || !(horizon >= 0.0) {
        return Err(LabError::domain("need dt > 0, m0 >= 0, T >= 0".to_string()));
    }
    let n = (horizon / dt - 1e-9).ceil().max(0.0) as usize;
    let h = if n == 0 { 0.0 } else { horizon / n as f64 };
    let sh = h.sqrt();
    let mut times = Vec::with_capacity(n + 1);
    let mut masses = Vec::with_capacity(n + 1);
    let mut m = m0;
    let mut extinction_time = if m0 == 0.0 { Some(0.0) } else { None };
    times.push(0.0);
    masses.push(m);
    for k in 1..=n {
        if m > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            m = (m + m.sqrt() * sh * z).max(0.0);
            if m == 0.0 {
                extinction_time = Some(k as f64 * h);
            }
        }
        times.push(k as f64 * h);
        masses.push(m);
    }
    Ok(FellerMassPath { times, masses, extinction_time })
}

/// Mass at the listed times only, without storing the path (same scheme as
/// [`simulate_feller_mass`]). `times` must be increasing.
pub fn feller_mass_at<R: Rng + ?Sized>(m0: f64, times: &[f64], dt: f64, rng: &mut R) -> Vec<f64> {
    let sh = dt.sqrt();
    let mut out = Vec::with_capacity(times.len());
    let mut m = m0;
    let mut t = 0.0;
    for &target in times {
        let steps = ((target - t) / dt).round() as usize;
        for _ in 0..steps {
            if m == 0.0 {
                break;
            }
            let z: f64 = rng.sample(StandardNormal);
            m = (m + m.sqrt() * sh * z).max(0.0);
        }
        t = target;
        out.push(m);
    }
    out
}

/// Exact draw of `M_t` given `M_0 = m0`: a Poisson(2m0/t) number of
/// Exponential(mean t/2) clusters.
pub fn sample_feller_exact<R: Rng + ?Sized>(m0: f64, t: f64, rng: &mut R) -> f64 {
    let lambda = 2.0 * m0 / t;
    if lambda <= 0.0 {
        return 0.0;
    }
    let k = Poisson::new(lambda).expect("positive mean").sample(rng);
    if k == 0.0 {
        return 0.0;
    }
    Gamma::new(k, 0.5 * t).expect("positive shape").sample(rng)
}

/// Particle counts of the branching system at the listed step indices,
/// simulated at the level of counts (motion does not affect mass). Each
/// step draws the number of branching events and how many of them split.
pub fn particle_counts_at<R: Rng + ?Sized>(n0: u64, p: f64, checkpoints: &[usize], rng: &mut R) -> Vec<u64> {
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut n = n0;
    let mut done = 0usize;
    for &target in checkpoints {
        while done < target && n > 0 {
            let events = Binomial::new(n, 2.0 * p).expect("valid probability").sample(rng);
            let splits = Binomial::new(events, 0.5).expect("valid probability").sample(rng);
            n = n + splits - (events - splits);
            done += 1;
        }
        done = done.max(target);
        out.push(n);
    }
    out
}

/// Positions at time `horizon` of the descendants of one particle at `x0`
/// under continuous-time critical binary branching at total rate `rate`
/// (death and split each at `rate/2`) with exact stable motion, appended to
/// `out`.
///
/// The genealogy of the survivors is drawn as a coalescent point process:
/// the family survives with probability `1/(1+λT)`, its size is then
/// geometric, and consecutive survivors split at depths `H` with
/// `P(H > h) = 1/(1+λh)` conditioned on `H < T`, where `λ = rate/2`.
/// Displacements are then laid down along the tree.
pub fn sample_family<R: Rng + ?Sized>(
    law: &StableLaw,
    x0: f64,
    rate: f64,
    horizon: f64,
    rng: &mut R,
    out: &mut Vec<f64>,
) {
    let lam = 0.5 * rate;
    let lt = lam * horizon;
    if rng.random::<f64>() >= 1.0 / (1.0 + lt) {
        return;
    }
    let q = lt / (1.0 + lt);
    let u: f64 = 1.0 - rng.random::<f64>();
    let k = if q > 0.0 { 1 + (u.ln() / q.ln()).floor() as usize } else { 1 };
    let depths: Vec<f64> = (0..k - 1)
        .map(|_| {
            let v = rng.random::<f64>() * q;
            v / (lam * (1.0 - v))
        })
        .collect();
    let inv = 1.0 / law.alpha;
    let moved = |pos: f64, dur: f64, rng: &mut R| if dur > 0.0 { pos + step(law.alpha, dur.powf(inv), rng) } else { pos };
    // (first leaf, last leaf, position, depth at which this subtree starts)
    let mut stack = vec![(0usize, k - 1, x0, horizon)];
    let base = out.len();
    out.resize(base + k, 0.0);
    while let Some((l, r, pos, top)) = stack.pop() {
        if l == r {
            out[base + l] = moved(pos, top, rng);
            continue;
        }
        let mut m = l;
        for i in l + 1..r {
            if depths[i] > depths[m] {
                m = i;
            }
        }
        let split = moved(pos, top - depths[m], rng);
        stack.push((m + 1, r, split, depths[m]));
        stack.push((l, m, split, depths[m]));
    }
}

/// Positions at `horizon` of the system started from `count` particles at
/// each listed position, via [`sample_family`].
pub fn sample_system_at<R: Rng + ?Sized>(law: &StableLaw, atoms: &[(f64, usize)], rate: f64, horizon: f64, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::new();
    for &(x, count) in atoms {
        for _ in 0..count {
            sample_family(law, x, rate, horizon, rng, &mut out);
        }
    }
    out
}

/// One row of a trajectory CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub total_mass: f64,
    pub support_min: f64,
    pub support_max: f64,
    pub particle_count: usize,
    pub v_mass: f64,
    pub w_mass: f64,
}

impl Snapshot {
    pub fn of(pop: &ParticlePopulation) -> Self {
        let (lo, hi) = pop.support().unwrap_or((f64::NAN, f64::NAN));
        Snapshot {
            time: pop.time,
            total_mass: pop.total_mass(),
            support_min: lo,
            support_max: hi,
            particle_count: pop.len(),
            v_mass: pop.mass_with(Label::V),
            w_mass: pop.mass_with(Label::W),
        }
    }

    pub fn write_csv<W: std::io::Write>(rows: &[Snapshot], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "total_mass", "support_min", "support_max", "particle_count", "v_mass", "w_mass"])?;
        for s in rows {
            w.write_record([
                s.time.to_string(),
                s.total_mass.to_string(),
                s.support_min.to_string(),
                s.support_max.to_string(),
                s.particle_count.to_string(),
                s.v_mass.to_string(),
                s.w_mass.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{run_replicas, stream};
    use crate::stats::MeanAcc;
    use approx::assert_relative_eq;

    #[test]
    fn survival_formula_values() {
        assert_relative_eq!(survival_probability(1.0, 1.0).unwrap(), 0.864_664_716_763_387_3, max_relative = 1e-14);
        assert_eq!(survival_probability(0.0, 1.0).unwrap(), 0.0);
        assert!(survival_probability(1.0, 1e12).unwrap() < 1e-11);
        assert!(survival_probability(1.0, 0.0).is_err());
    }

    #[test]
    fn gate_on_branching_probability() {
        assert!(branching_probability(100.0, 0.005).is_ok());
        assert!(matches!(branching_probability(100.0, 0.006), Err(LabError::Gate(_))));
    }

    #[test]
    fn empty_population_stays_empty() {
        let law = StableLaw::new(1.0).unwrap();
        let mut pop = ParticlePopulation::new(0.01);
        let exits = evolve_population(&mut pop, 0.001, &law, &mut stream(1, 0), Some(1.0)).unwrap();
        assert!(pop.is_empty() && exits.is_empty());
    }

    #[test]
    fn cap_is_enforced() {
        let law = StableLaw::new(1.0).unwrap();
        let mut pop = ParticlePopulation::from_atoms(&[(0.0, 1000)], 0.01, Label::Free).with_cap(1000);
        let mut rng = stream(2, 0);
        let mut hit = false;
        for _ in 0..200 {
            match evolve_population(&mut pop, 0.005, &law, &mut rng, None) {
                Err(LabError::CapExceeded { .. }) => {
                    hit = true;
                    break;
                }
                Err(e) => panic!("{e}"),
                Ok(_) => {}
            }
        }
        assert!(hit);
    }

    #[test]
    fn killed_population_stays_inside() {
        let law = StableLaw::new(0.5).unwrap();
        let mut pop = ParticlePopulation::from_atoms(&[(0.0, 200)], 0.005, Label::V);
        let mut rng = stream(3, 0);
        for _ in 0..100 {
            let exits = evolve_population(&mut pop, 0.001, &law, &mut rng, Some(1.0)).unwrap();
            assert!(exits.iter().all(|x| x.abs() >= 1.0));
            assert!(pop.positions.iter().all(|x| x.abs() < 1.0));
        }
    }

    #[test]
    fn mean_mass_is_preserved() {
        let law = StableLaw::new(1.0).unwrap();
        let finals = run_replicas(4000, 7, |_, rng| {
            let mut pop = ParticlePopulation::from_atoms(&[(0.0, 50)], 0.02, Label::Free);
            for _ in 0..50 {
                evolve_population(&mut pop, 0.01, &law, rng, None).unwrap();
            }
            pop.total_mass()
        });
        let acc: MeanAcc = finals.into_iter().collect();
        assert!((acc.mean() - 1.0).abs() < 3.0 * acc.stderr());
        // variance m0·t = 0.5
        assert!((acc.variance() - 0.5).abs() < 0.06, "variance {}", acc.variance());
    }

    #[test]
    fn split_partitions_mass() {
        let pop = ParticlePopulation::from_atoms(&[(0.0, 3), (2.0, 2), (-5.0, 1)], 0.1, Label::Free);
        let (a, b) = split_initial(&pop, 1.0);
        assert_relative_eq!(a.total_mass() + b.total_mass(), pop.total_mass());
        assert_eq!(a.len(), 3);
        let (a, b) = split_initial(&pop, 10.0);
        assert_eq!(a.len(), 6);
        assert!(b.is_empty());
    }

    #[test]
    fn feller_paths_nonnegative_and_martingale() {
        let finals = run_replicas(20_000, 4, |_, rng| {
            let path = simulate_feller_mass(1.0, 1.0, 0.01, rng).unwrap();
            assert!(path.masses.iter().all(|&m| m >= 0.0));
            if let Some(t) = path.extinction_time {
                let i = path.times.iter().position(|&s| s >= t).unwrap();
                assert!(path.masses[i..].iter().all(|&m| m == 0.0));
            }
            *path.masses.last().unwrap()
        });
        let acc: MeanAcc = finals.into_iter().collect();
        assert!((acc.mean() - 1.0).abs() < 3.0 * acc.stderr());
    }

    #[test]
    fn exact_feller_sampler_matches_laws() {
        let mut rng = stream(8, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_feller_exact(1.0, 1.0, &mut rng)).collect();
        let alive = xs.iter().filter(|&&x| x > 0.0).count() as f64 / n as f64;
        assert!((alive - survival_probability(1.0, 1.0).unwrap()).abs() < 0.003);
        let acc: MeanAcc = xs.iter().copied().collect();
        assert!((acc.mean() - 1.0).abs() < 3.0 * acc.stderr());
        assert!((acc.variance() - 1.0).abs() < 0.03);
    }

    #[test]
    fn count_level_matches_particles_in_mean() {
        let mut rng = stream(9, 0);
        let counts: MeanAcc = (0..4000)
            .map(|_| particle_counts_at(100, 0.25, &[400], &mut rng)[0] as f64)
            .collect();
        assert!((counts.mean() - 100.0).abs() < 3.0 * counts.stderr());
    }

    #[test]
    fn snapshot_csv_header() {
        let pop = ParticlePopulation::from_atoms(&[(0.5, 2)], 0.5, Label::V);
        let mut buf = Vec::new();
        Snapshot::write_csv(&[Snapshot::of(&pop)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,total_mass,support_min,support_max,particle_count,v_mass,w_mass\n"));
        assert!(text.contains("0,1,0.5,0.5,2,1,0"));
    }

    #[test]
    fn family_size_is_critical() {
        let law = StableLaw::new(1.0).unwrap();
        let mut rng = stream(21, 0);
        let mut out = Vec::new();
        let reps = 20000;
        let mut alive = 0;
        for _ in 0..reps {
            let before = out.len();
            sample_family(&law, 0.0, 8.0, 0.5, &mut rng, &mut out);
            alive += (out.len() > before) as usize;
        }
        // mean 1, variance rate·T = 4
        let mean = out.len() as f64 / reps as f64;
        assert!((mean - 1.0).abs() < 4.0 * (4.0 / reps as f64).sqrt());
        let p = alive as f64 / reps as f64;
        assert!((p - 1.0 / 3.0).abs() < 4.0 * (p * (1.0 - p) / reps as f64).sqrt());
    }

    #[test]
    fn genealogy_sampler_matches_stepped_system() {
        let law = StableLaw::new(1.0).unwrap();
        let n = 20usize;
        let horizon: f64 = 0.5;
        let dt = 1e-3;
        let phi = |x: f64| (-x * x).exp();
        let stepped = run_replicas(1500, 5, |_, rng| {
            let mut pop = ParticlePopulation::from_atoms(&[(0.0, n)], 1.0 / n as f64, Label::Free);
            for _ in 0..(horizon / dt).round() as usize {
                evolve_population(&mut pop, dt, &law, rng, None).unwrap();
            }
            pop.integrate(phi)
        });
        let tree = run_replicas(1500, 6, |_, rng| {
            let pos = sample_system_at(&law, &[(0.0, n)], n as f64, horizon, rng);
            pos.iter().map(|&x| phi(x)).sum::<f64>() / n as f64
        });
        let ks = crate::stats::ks_two_sample(&stepped, &tree);
        assert!(ks.passes(0.01), "{ks:?}");
    }
}
