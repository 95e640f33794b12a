//! Exact and numerically-exact stationary laws for two and three particles.
//!
//! These small systems are the oracles for the event-driven simulator: the
//! n = 2 gap is a birth-death chain (deterministic jumps) or a density under
//! a four-term master equation (jump laws with a density); n = 3 with unit
//! jumps is a lattice chain solved on a truncation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{JumpLaw, RateFunction};
use crate::specfun::adaptive_quad;

/// Birth-death chain of the two-particle gap under deterministic unit jumps:
/// from gap k the leader jumps at w(k/2) (gap up) and the laggard at
/// w(-k/2) (gap down); from 0 either particle jumps at w(0).
#[derive(Debug, Clone)]
pub struct GapChain {
    w: RateFunction,
    k_max: usize,
}

impl GapChain {
    pub fn new(w: RateFunction, k_max: usize) -> Result<Self> {
        if w.is_constant() {
            return Err(Error::InvalidRate(
                "a constant rate gives a null-recurrent gap chain".into(),
            ));
        }
        if k_max < 2 {
            return Err(Error::InvalidArgument("k_max must be at least 2".into()));
        }
        Ok(GapChain { w, k_max })
    }

    pub fn rate(&self) -> &RateFunction {
        &self.w
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Up-rate out of state k.
    pub fn lambda(&self, k: usize) -> f64 {
        if k == 0 {
            2.0 * self.w.eval(0.0)
        } else {
            self.w.eval(k as f64 / 2.0)
        }
    }

    /// Down-rate out of state k (k >= 1).
    pub fn mu(&self, k: usize) -> f64 {
        self.w.eval(-(k as f64) / 2.0)
    }
}

/// Stationary distribution of a [`GapChain`], truncated with a certified
/// geometric tail bound.
#[derive(Debug, Clone)]
pub struct BdStationary {
    pub pi: Vec<f64>,
    /// Upper bound on the stationary mass beyond the truncation.
    pub tail_bound: f64,
}

/// pi_0 = 1 / (1 + 2 sum_k prod w(i/2)/prod w(-i/2)), pi_k = 2 pi_0 (that
/// ratio); the series is summed until its geometric tail bound drops below
/// 1e-12 of the partial sum.
pub fn bd_stationary(chain: &GapChain) -> Result<BdStationary> {
    let mut ratios = vec![1.0f64]; // r_k for k >= 1 appended below
    let mut sum = 0.0; // sum of r_k, k >= 1
    let mut r = 1.0;
    let mut tail = f64::INFINITY;
    for k in 1..=chain.k_max {
        // r_k = r_{k-1} w((k-1)/2) / w(-k/2); the factor is non-increasing
        // in k, so the current factor bounds the tail geometrically.
        let q = chain.w.eval((k as f64 - 1.0) / 2.0) / chain.w.eval(-(k as f64) / 2.0);
        r *= q;
        ratios.push(r);
        sum += r;
        if q < 1.0 {
            // pi_0 < 1, so 2 r q / (1 - q) bounds the stationary tail mass.
            tail = 2.0 * r * q / (1.0 - q);
            if tail < 1e-12 {
                break;
            }
        }
    }
    if !(tail < 1e-12) {
        return Err(Error::SeriesDivergence);
    }
    let pi0 = 1.0 / (1.0 + 2.0 * sum);
    let mut pi: Vec<f64> = ratios.iter().map(|&r| 2.0 * pi0 * r).collect();
    pi[0] = pi0;
    let tail_bound = pi0 * tail;
    Ok(BdStationary { pi, tail_bound })
}

/// Density of the two-particle gap on a uniform point grid over [0, g_max].
#[derive(Debug, Clone, PartialEq)]
pub struct GapDensity {
    g_max: f64,
    /// Values at the n+1 grid points j * dg.
    values: Vec<f64>,
}

impl GapDensity {
    pub fn from_fn(g_max: f64, n_points: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if !(g_max > 0.0) {
            return Err(Error::InvalidArgument(format!("g_max must be positive, got {g_max}")));
        }
        if n_points < 16 {
            return Err(Error::InvalidArgument("need at least 16 grid intervals".into()));
        }
        let dg = g_max / n_points as f64;
        let values: Vec<f64> = (0..=n_points).map(|j| f(j as f64 * dg)).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("density values must be finite".into()));
        }
        Ok(GapDensity { g_max, values })
    }

    pub fn g_max(&self) -> f64 {
        self.g_max
    }

    pub fn dg(&self) -> f64 {
        self.g_max / (self.values.len() - 1) as f64
    }

    pub fn n_intervals(&self) -> usize {
        self.values.len() - 1
    }

    pub fn point(&self, j: usize) -> f64 {
        j as f64 * self.dg()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Trapezoid mass.
    pub fn mass(&self) -> f64 {
        let n = self.values.len() - 1;
        let inner: f64 = self.values[1..n].iter().sum();
        (0.5 * (self.values[0] + self.values[n]) + inner) * self.dg()
    }

    pub fn normalize(&mut self) {
        let m = self.mass();
        for v in self.values.iter_mut() {
            *v /= m;
        }
    }

    /// max |p|.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// L1 distance to another density on the same grid.
    pub fn l1_distance(&self, other: &GapDensity) -> Result<f64> {
        if self.values.len() != other.values.len() || self.g_max != other.g_max {
            return Err(Error::ConfigMismatch("gap grids differ".into()));
        }
        let diff = GapDensity {
            g_max: self.g_max,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| (a - b).abs())
                .collect(),
        };
        Ok(diff.mass())
    }
}

/// Second-order endpoint derivative estimates for the Euler-Maclaurin
/// correction.
fn deriv_at(vals: &[f64], i: usize, h: f64) -> f64 {
    let n = vals.len();
    if n < 3 {
        return 0.0;
    }
    if i == 0 {
        (-3.0 * vals[0] + 4.0 * vals[1] - vals[2]) / (2.0 * h)
    } else if i == n - 1 {
        (3.0 * vals[n - 1] - 4.0 * vals[n - 2] + vals[n - 3]) / (2.0 * h)
    } else {
        (vals[i + 1] - vals[i - 1]) / (2.0 * h)
    }
}

/// Corrected cumulative trapezoid: out[j] = int_0^{x_j} q, with the
/// h^2/12 (q'(x_j) - q'(0)) Euler-Maclaurin term subtracted, giving a
/// fourth-order prefix quadrature on smooth data.
fn corrected_cumtrapz(q: &[f64], h: f64) -> Vec<f64> {
    let n = q.len();
    let mut out = vec![0.0; n];
    let mut acc = 0.0;
    for j in 1..n {
        acc += 0.5 * (q[j - 1] + q[j]) * h;
        out[j] = acc;
    }
    if n >= 3 {
        let d0 = deriv_at(q, 0, h);
        for (j, o) in out.iter_mut().enumerate().skip(1) {
            *o -= h * h / 12.0 * (deriv_at(q, j, h) - d0);
        }
    }
    out
}

/// Corrected suffix trapezoid: out[j] = int_{x_j}^{x_N} q, accumulated from
/// the right so that small suffixes of a decaying integrand keep full
/// relative accuracy.
fn corrected_cumtrapz_rev(q: &[f64], h: f64) -> Vec<f64> {
    let n = q.len();
    let mut out = vec![0.0; n];
    let mut acc = 0.0;
    for j in (0..n - 1).rev() {
        acc += 0.5 * (q[j] + q[j + 1]) * h;
        out[j] = acc;
    }
    if n >= 3 {
        let dn = deriv_at(q, n - 1, h);
        for (j, o) in out.iter_mut().enumerate().take(n - 1) {
            *o -= h * h / 12.0 * (dn - deriv_at(q, j, h));
        }
    }
    out
}

/// Time derivative of the gap density under the master equation, plus its
/// conservation defect (the trapezoid integral of the returned derivative,
/// which would be exactly zero in the continuum).
#[derive(Debug, Clone)]
pub struct GapRhs {
    pub values: Vec<f64>,
    pub conservation_defect: f64,
}

/// Precomputed tables for the exponential-jump master operator: with
/// phi(x) = e^{-x} the three gain integrals factorize,
///   I2(g) = e^{-g} int_0^g p w+ e^{y} dy,
///   I3(g) = e^{g} int_g^G p w- e^{-y} dy,
///   I4(g) = e^{-g} int_0^G p w- e^{-y} dy,
/// so one rhs evaluation is O(N) with no transcendental calls in the loop.
struct ExpGapOperator {
    h: f64,
    /// w(g/2) e^{g} at grid points.
    wp_ep: Vec<f64>,
    /// w(-g/2) e^{-g} at grid points.
    wm_em: Vec<f64>,
    /// total loss rate w(-g/2) + w(g/2).
    loss: Vec<f64>,
    e_plus: Vec<f64>,
    e_minus: Vec<f64>,
}

impl ExpGapOperator {
    fn new(w: &RateFunction, g_max: f64, n_points: usize) -> Self {
        let h = g_max / n_points as f64;
        let n = n_points + 1;
        let mut wp_ep = Vec::with_capacity(n);
        let mut wm_em = Vec::with_capacity(n);
        let mut loss = Vec::with_capacity(n);
        let mut e_plus = Vec::with_capacity(n);
        let mut e_minus = Vec::with_capacity(n);
        for j in 0..n {
            let g = j as f64 * h;
            let wp = w.eval(g / 2.0);
            let wm = w.eval(-g / 2.0);
            wp_ep.push(wp * g.exp());
            wm_em.push(wm * (-g).exp());
            loss.push(wp + wm);
            e_plus.push(g.exp());
            e_minus.push((-g).exp());
        }
        ExpGapOperator { h, wp_ep, wm_em, loss, e_plus, e_minus }
    }

    fn rhs_into(&self, p: &[f64], q2: &mut Vec<f64>, q3: &mut Vec<f64>, out: &mut [f64]) {
        let n = p.len();
        q2.clear();
        q3.clear();
        for j in 0..n {
            q2.push(p[j] * self.wp_ep[j]);
            q3.push(p[j] * self.wm_em[j]);
        }
        let a2 = corrected_cumtrapz(q2, self.h);
        // The suffix integral must be accumulated from the right: computing
        // it as total - prefix cancels catastrophically once it is scaled
        // back by e^{g}.
        let b3 = corrected_cumtrapz_rev(q3, self.h);
        let total3 = b3[0];
        for j in 0..n {
            let gains = self.e_minus[j] * (a2[j] + total3) + self.e_plus[j] * b3[j];
            out[j] = gains - p[j] * self.loss[j];
        }
    }
}

/// Evaluate the four-term master equation for the gap density:
/// loss at rate w(-g/2) + w(g/2), gain from the leader jumping (gap grew),
/// from the laggard jumping but staying behind (gap shrank), and from the
/// laggard overtaking.
///
/// Quadrature is the (endpoint-corrected) trapezoid rule on the shared grid;
/// for the exponential jump law the kernels factorize and the whole
/// evaluation is O(N).
pub fn gap_master_rhs(p: &GapDensity, w: &RateFunction, law: &JumpLaw) -> Result<GapRhs> {
    let (phi, upper) = law
        .density()
        .ok_or_else(|| Error::NoDensity("the gap master equation needs a jump density".into()))?;
    let n = p.values.len();
    let h = p.dg();

    if matches!(law, JumpLaw::ExponentialUnit) {
        let op = ExpGapOperator::new(w, p.g_max, p.n_intervals());
        let mut values = vec![0.0; n];
        let mut q2 = Vec::with_capacity(n);
        let mut q3 = Vec::with_capacity(n);
        op.rhs_into(&p.values, &mut q2, &mut q3, &mut values);
        let defect = *corrected_cumtrapz(&values, h).last().unwrap();
        return Ok(GapRhs { values, conservation_defect: defect });
    }

    let gains: Vec<f64> = {
        // Generic density: assemble each integrand row and apply the same
        // corrected trapezoid. O(N^2).
        let wp: Vec<f64> = (0..n).map(|j| p.values[j] * w.eval(p.point(j) / 2.0)).collect();
        let wm: Vec<f64> = (0..n).map(|j| p.values[j] * w.eval(-p.point(j) / 2.0)).collect();
        let phi_at = |x: f64| if x >= 0.0 && x <= upper { phi(x) } else { 0.0 };
        let mut out = vec![0.0; n];
        let mut row = vec![0.0; n];
        for j in 0..n {
            let g = p.point(j);
            // I2 over [0, g]
            for (i, r) in row.iter_mut().enumerate().take(j + 1) {
                *r = wp[i] * phi_at(g - p.point(i));
            }
            let i2 = *corrected_cumtrapz(&row[..=j], h).last().unwrap_or(&0.0);
            // I3 over [g, G]
            for i in j..n {
                row[i - j] = wm[i] * phi_at(p.point(i) - g);
            }
            let i3 = *corrected_cumtrapz(&row[..n - j], h).last().unwrap_or(&0.0);
            // I4 over [0, G]
            for (i, r) in row.iter_mut().enumerate() {
                *r = wm[i] * phi_at(p.point(i) + g);
            }
            let i4 = *corrected_cumtrapz(&row[..n], h).last().unwrap_or(&0.0);
            out[j] = i2 + i3 + i4;
        }
        out
    };

    let values: Vec<f64> = (0..n)
        .map(|j| {
            let g = p.point(j);
            gains[j] - p.values[j] * (w.eval(-g / 2.0) + w.eval(g / 2.0))
        })
        .collect();
    // The conservation integral uses the same corrected quadrature as the
    // operator itself; the plain trapezoid would re-introduce an O(h^2)
    // boundary term that has nothing to do with the dynamics.
    let defect = *corrected_cumtrapz(&values, h).last().unwrap();
    Ok(GapRhs { values, conservation_defect: defect })
}

/// Richardson estimate of the discretization error of [`gap_master_rhs`]:
/// compare against the rhs on the twice-coarser grid (shared points) and
/// scale by the order of the corrected quadrature.
pub fn gap_master_richardson(p: &GapDensity, w: &RateFunction, law: &JumpLaw) -> Result<f64> {
    let n = p.n_intervals();
    if n % 2 != 0 || n < 32 {
        return Err(Error::InvalidArgument("need an even interval count >= 32".into()));
    }
    let fine = gap_master_rhs(p, w, law)?;
    let coarse_p = GapDensity {
        g_max: p.g_max,
        values: p.values.iter().copied().step_by(2).collect(),
    };
    let coarse = gap_master_rhs(&coarse_p, w, law)?;
    let mut worst = 0.0f64;
    for (jc, v_coarse) in coarse.values.iter().enumerate() {
        worst = worst.max((fine.values[2 * jc] - v_coarse).abs());
    }
    // Fourth-order quadrature: the fine-grid error is about 1/15 of the
    // grid-to-grid difference.
    Ok(worst / 15.0)
}

/// The closed-form stationary gap density for exponential jumps and the
/// exponential rate: p(g) proportional to cosh(beta g / 2)^{-(1 + 2/beta)}.
/// The window is chosen so the continuum tail mass is below 1e-10.
pub fn gap_stationary_closed_form(beta: f64, n_points: usize) -> Result<GapDensity> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let power = 1.0 + 2.0 / beta;
    let unnorm = move |g: f64| (beta * g / 2.0).cosh().powf(-power);
    // The integrand decays like 2^power e^{-(beta/2) power g}; march until
    // the implied tail bound is below 1e-10 of the accumulated mass.
    let decay = 0.5 * beta * power;
    // Besides the 1e-10 tail-mass requirement, keep the window long enough
    // that the truncated laggard-gain term p(g) w(-g/2) ~ 2^power e^{-g} is
    // negligible at the edge; otherwise the master-equation residual at the
    // boundary is dominated by truncation rather than discretization.
    let g_floor = (2.0f64.powf(power) * 1e9).ln();
    let mut g_max = 4.0f64.max(g_floor);
    let mut mass;
    loop {
        mass = adaptive_quad(unnorm, 0.0, g_max, 1e-12).value;
        let tail = unnorm(g_max) * 2.0f64.powf(power) / decay;
        if tail < 1e-10 * mass {
            break;
        }
        g_max *= 1.5;
        if g_max > 1e4 {
            return Err(Error::InvalidArgument("window search ran away".into()));
        }
    }
    let c = 1.0 / mass;
    GapDensity::from_fn(g_max, n_points, |g| c * unnorm(g))
}

/// RK4 time integration of the gap master equation (stationarity oracle).
/// Restricted to the exponential jump law, where the O(N) factorized
/// operator keeps long horizons affordable.
pub fn gap_evolve(
    p0: &GapDensity,
    w: &RateFunction,
    law: &JumpLaw,
    horizon: f64,
    dt_max: f64,
) -> Result<GapDensity> {
    if !matches!(law, JumpLaw::ExponentialUnit) {
        return Err(Error::NoDensity(
            "time integration is implemented for the exponential jump law".into(),
        ));
    }
    let mut p = p0.clone();
    let n = p.values.len();
    let op = ExpGapOperator::new(w, p.g_max, p.n_intervals());
    // Explicit-scheme stability bound from the largest total loss rate.
    let max_rate = op.loss.iter().copied().fold(0.0f64, f64::max);
    let dt_stable = 0.5 / max_rate;

    let mut q2 = Vec::with_capacity(n);
    let mut q3 = Vec::with_capacity(n);
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut stage = vec![0.0; n];

    let mut t = 0.0;
    while t < horizon {
        let dt = dt_max.min(dt_stable).min(horizon - t);
        op.rhs_into(&p.values, &mut q2, &mut q3, &mut k1);
        for j in 0..n {
            stage[j] = p.values[j] + 0.5 * dt * k1[j];
        }
        op.rhs_into(&stage, &mut q2, &mut q3, &mut k2);
        for j in 0..n {
            stage[j] = p.values[j] + 0.5 * dt * k2[j];
        }
        op.rhs_into(&stage, &mut q2, &mut q3, &mut k3);
        for j in 0..n {
            stage[j] = p.values[j] + dt * k3[j];
        }
        op.rhs_into(&stage, &mut q2, &mut q3, &mut k4);
        for j in 0..n {
            p.values[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        t += dt;
    }
    Ok(p)
}

/// Stationary law of the three-particle chain (deterministic unit jumps)
/// viewed from the center of mass, on a diamond truncation of the lattice.
#[derive(Debug, Clone)]
pub struct LatticeStationary {
    /// States as (3(x1 - m), 3(x2 - m), 3(x3 - m)) triples.
    pub states: Vec<[i64; 3]>,
    pub pi: Vec<f64>,
    /// Stationary probability flux over the dropped boundary edges.
    pub boundary_flux: f64,
    /// Final residual max_s |(pi Q)_s|.
    pub residual: f64,
    pub radius: i64,
}

impl LatticeStationary {
    pub fn index_of(&self, state: [i64; 3]) -> Option<usize> {
        self.states.binary_search(&state).ok()
    }

    /// Net probability current on the directed edge s -> s'.
    pub fn edge_current(&self, from: [i64; 3], to: [i64; 3], w: &RateFunction) -> f64 {
        let fwd = match self.index_of(from) {
            Some(i) => {
                if transition_targets(from).contains(&to) {
                    let jumper = (0..3).find(|&k| to[k] == from[k] + 2).unwrap();
                    self.pi[i] * w.eval(from[jumper] as f64 / 3.0)
                } else {
                    0.0
                }
            }
            None => 0.0,
        };
        let bwd = match self.index_of(to) {
            Some(i) => {
                if transition_targets(to).contains(&from) {
                    let jumper = (0..3).find(|&k| from[k] == to[k] + 2).unwrap();
                    self.pi[i] * w.eval(to[jumper] as f64 / 3.0)
                } else {
                    0.0
                }
            }
            None => 0.0,
        };
        fwd - bwd
    }
}

/// When particle k jumps one unit, the recentered coordinates move by
/// +2 on k and -1 on the others.
fn transition_targets(u: [i64; 3]) -> [[i64; 3]; 3] {
    let mut out = [[0i64; 3]; 3];
    for k in 0..3 {
        for j in 0..3 {
            out[k][j] = u[j] + if j == k { 2 } else { -1 };
        }
    }
    out
}

fn l1_norm(u: [i64; 3]) -> i64 {
    u.iter().map(|v| v.abs()).sum()
}

/// Solve pi Q = 0 on the truncation {|u|_1 <= radius} by uniformized power
/// iteration; outgoing boundary edges are dropped and the stationary flux
/// they would carry is reported (and checked against `flux_threshold`).
pub fn three_particle_stationary(
    w: &RateFunction,
    radius: i64,
    flux_threshold: f64,
) -> Result<LatticeStationary> {
    if radius < 4 {
        return Err(Error::InvalidArgument("radius must be at least 4".into()));
    }
    // Enumerate reachable states: coordinates summing to zero, congruent
    // to each other mod 3, inside the diamond.
    let mut states = Vec::new();
    for u1 in -radius..=radius {
        for u2 in -radius..=radius {
            let u3 = -u1 - u2;
            let u = [u1, u2, u3];
            if l1_norm(u) > radius {
                continue;
            }
            if (u1 - u2).rem_euclid(3) != 0 || (u2 - u3).rem_euclid(3) != 0 {
                continue;
            }
            states.push(u);
        }
    }
    states.sort_unstable();
    let index: BTreeMap<[i64; 3], usize> =
        states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let n = states.len();

    // Sparse kept-edge structure and per-state dropped (boundary) rate.
    let mut edges: Vec<(usize, usize, f64)> = Vec::with_capacity(3 * n);
    let mut dropped_rate = vec![0.0f64; n];
    let mut out_rate = vec![0.0f64; n];
    for (i, &u) in states.iter().enumerate() {
        for (k, &target) in transition_targets(u).iter().enumerate() {
            let rate = w.eval(u[k] as f64 / 3.0);
            match index.get(&target) {
                Some(&j) => {
                    edges.push((i, j, rate));
                    out_rate[i] += rate;
                }
                None => dropped_rate[i] += rate,
            }
        }
    }

    // Uniformized power iteration: pi <- pi (I + Q/Lambda).
    let lambda = out_rate.iter().copied().fold(0.0f64, f64::max).max(1e-300);
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0f64; n];
    let tol = 1e-14;
    let mut residual = f64::INFINITY;
    for _ in 0..2_000_000 {
        for (i, v) in next.iter_mut().enumerate() {
            *v = pi[i] * (1.0 - out_rate[i] / lambda);
        }
        for &(i, j, rate) in &edges {
            next[j] += pi[i] * rate / lambda;
        }
        let total: f64 = next.iter().sum();
        for v in next.iter_mut() {
            *v /= total;
        }
        residual = pi
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max)
            * lambda;
        std::mem::swap(&mut pi, &mut next);
        if residual < tol {
            break;
        }
    }
    if !(residual < 1e-10) {
        return Err(Error::StationaryResidual { requested: 1e-10, achieved: residual });
    }

    let boundary_flux: f64 = pi.iter().zip(&dropped_rate).map(|(p, r)| p * r).sum();
    if boundary_flux > flux_threshold {
        return Err(Error::TruncationFlux {
            flux: boundary_flux,
            threshold: flux_threshold,
            radius,
        });
    }
    Ok(LatticeStationary { states, pi, boundary_flux, residual, radius })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_chain_stationary_is_geometric() {
        let chain = GapChain::new(RateFunction::step(2.0, 1.0).unwrap(), 10_000).unwrap();
        let st = bd_stationary(&chain).unwrap();
        assert!((st.pi[0] - 1.0 / 3.0).abs() < 1e-12);
        for k in 1..30 {
            let expect = (2.0 / 3.0) * 0.5f64.powi(k as i32);
            assert!((st.pi[k] - expect).abs() < 1e-12, "pi[{k}] = {}", st.pi[k]);
        }
        assert!(st.tail_bound < 1e-12);
        let total: f64 = st.pi.iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn step_chain_closed_form_pi0() {
        // pi_0 = (a - b)/(a + b) for the step rate.
        for (a, b) in [(2.0, 1.0), (3.0, 1.0), (5.0, 2.0)] {
            let chain = GapChain::new(RateFunction::step(a, b).unwrap(), 10_000).unwrap();
            let st = bd_stationary(&chain).unwrap();
            assert!(
                (st.pi[0] - (a - b) / (a + b)).abs() < 1e-12,
                "step({a},{b}): pi0 = {}",
                st.pi[0]
            );
        }
    }

    #[test]
    fn detailed_balance_is_exact() {
        let chain = GapChain::new(RateFunction::exponential(0.8).unwrap(), 10_000).unwrap();
        let st = bd_stationary(&chain).unwrap();
        for k in 0..st.pi.len() - 1 {
            let lhs = st.pi[k] * chain.lambda(k);
            let rhs = st.pi[k + 1] * chain.mu(k + 1);
            assert!(
                (lhs - rhs).abs() <= 1e-15 * lhs.max(rhs).max(1e-300),
                "detailed balance broken at k={k}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn exponential_chain_has_gaussian_decay() {
        // pi_k / pi_{k-1} = exp(-beta (2k - 1) / 2): log pi is concave.
        let beta = 1.0;
        let chain = GapChain::new(RateFunction::exponential(beta).unwrap(), 1000).unwrap();
        let st = bd_stationary(&chain).unwrap();
        // k = 1 carries the extra factor 2 from the doubled rate out of 0;
        // from k = 2 on the ratio is exactly w((k-1)/2)/w(-k/2).
        let r1 = st.pi[1] / st.pi[0];
        let expect1 = 2.0 * (-beta * 0.5).exp();
        assert!((r1 / expect1 - 1.0).abs() < 1e-10, "k=1: {r1} vs {expect1}");
        // Gaussian-type decay truncates the series after a handful of terms.
        let top = st.pi.len().min(12);
        assert!(top >= 6, "series truncated too early: {top} terms");
        for k in 2..top {
            let ratio = st.pi[k] / st.pi[k - 1];
            let expect = (-beta * (2.0 * k as f64 - 1.0) / 2.0).exp();
            assert!((ratio / expect - 1.0).abs() < 1e-10, "k={k}: {ratio} vs {expect}");
        }
        for k in 2..top {
            let d1 = st.pi[k - 1].ln() - st.pi[k].ln();
            let d0 = st.pi[k - 2].ln() - st.pi[k - 1].ln();
            assert!(d1 > d0, "log pi not concave at k={k}");
        }
    }

    #[test]
    fn constant_rate_diverges() {
        let w = RateFunction::tabulated(vec![(-1.0, 1.0), (1.0, 1.0)]).unwrap();
        assert!(GapChain::new(w, 100).is_err());
    }

    #[test]
    fn closed_form_beta_two_is_sech_squared() {
        let p = gap_stationary_closed_form(2.0, 4096).unwrap();
        // p(g) = 1/cosh^2(g): normalization constant is exactly 1 and
        // p(0) = 1.
        assert!((p.values()[0] - 1.0).abs() < 1e-9, "p(0) = {}", p.values()[0]);
        let mid = p.values()[p.n_intervals() / 4];
        let g = p.point(p.n_intervals() / 4);
        assert!((mid - 1.0 / g.cosh().powi(2)).abs() < 1e-9);
        assert!((p.mass() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn closed_form_is_stationary_under_the_master_equation() {
        let p = gap_stationary_closed_form(2.0, 4096).unwrap();
        let rhs = gap_master_rhs(&p, &RateFunction::exponential(2.0).unwrap(), &JumpLaw::ExponentialUnit)
            .unwrap();
        let sup: f64 = rhs.values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(
            sup < 1e-6 * p.sup_norm(),
            "stationarity residual {sup} vs {}",
            1e-6 * p.sup_norm()
        );
    }

    #[test]
    fn master_equation_conserves_mass_for_any_density() {
        // A lumpy (non-stationary) density: conservation must still hold.
        let w = RateFunction::exponential(1.0).unwrap();
        // The window leaves ~30 units between the bumps and the right edge
        // so that truncated leader-jump gains stay below the tolerance.
        let p = GapDensity::from_fn(26.0, 4096, |g| {
            (-(g - 2.0) * (g - 2.0)).exp() + 0.5 * (-(g - 6.0) * (g - 6.0) / 4.0).exp()
        })
        .unwrap();
        let rhs = gap_master_rhs(&p, &w, &JumpLaw::ExponentialUnit).unwrap();
        assert!(
            rhs.conservation_defect.abs() < 1e-8,
            "defect {}",
            rhs.conservation_defect
        );
    }

    #[test]
    fn generic_path_matches_factorized_path() {
        // The custom-density route with phi = e^{-x} must agree with the
        // exponential fast path.
        let w = RateFunction::exponential(1.0).unwrap();
        let custom = JumpLaw::custom(
            |z| if z >= 0.0 { (-z).exp() } else { 0.0 },
            |_| 1.0,
            40.0,
        )
        .unwrap();
        let p = GapDensity::from_fn(12.0, 1024, |g| (-g).exp()).unwrap();
        let fast = gap_master_rhs(&p, &w, &JumpLaw::ExponentialUnit).unwrap();
        let slow = gap_master_rhs(&p, &w, &custom).unwrap();
        let scale = fast.values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for (a, b) in fast.values.iter().zip(&slow.values) {
            assert!((a - b).abs() < 1e-6 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_rate_is_not_stationary_for_compact_density() {
        // With a constant rate the closed form does not apply and a compact
        // density cannot be stationary: the rhs must be visibly nonzero.
        let w = RateFunction::tabulated(vec![(-1.0, 1.0), (1.0, 1.0)]).unwrap();
        let p = GapDensity::from_fn(16.0, 512, |g| (-g).exp()).unwrap();
        let rhs = gap_master_rhs(&p, &w, &JumpLaw::ExponentialUnit).unwrap();
        let sup: f64 = rhs.values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(sup > 1e-3 * p.sup_norm(), "residual unexpectedly small: {sup}");
    }

    #[test]
    fn richardson_estimate_is_small_on_fine_grids() {
        let p = gap_stationary_closed_form(2.0, 1024).unwrap();
        let est = gap_master_richardson(
            &p,
            &RateFunction::exponential(2.0).unwrap(),
            &JumpLaw::ExponentialUnit,
        )
        .unwrap();
        assert!(est < 1e-6, "estimate {est}");
    }

    #[test]
    fn time_integration_reaches_the_closed_form() {
        // beta = 1: start from Exp(1) and integrate to stationarity; the
        // L1 gap to the closed form must drop below 1e-4.
        let beta = 1.0;
        let w = RateFunction::exponential(beta).unwrap();
        let n = 2048;
        // Wide enough that the e^{-G}-scale edge leak stays within the 1e-4
        // budget over the whole horizon, short enough that the stiff loss
        // rate w(-G/2) keeps the explicit step affordable.
        let g_max = 16.0;
        let target = {
            let closed = gap_stationary_closed_form(beta, 4096).unwrap();
            // Re-sample the closed form on the integration window.
            let power = 1.0 + 2.0 / beta;
            let c = closed.values()[0]; // closed form at 0 equals the constant
            GapDensity::from_fn(g_max, n, |g| c * (beta * g / 2.0).cosh().powf(-power)).unwrap()
        };
        let p0 = GapDensity::from_fn(g_max, n, |g| (-g).exp()).unwrap();
        let p_end = gap_evolve(&p0, &w, &JumpLaw::ExponentialUnit, 30.0, 0.05).unwrap();
        let l1 = p_end.l1_distance(&target).unwrap();
        assert!(l1 < 1e-4, "L1 distance to closed form {l1}");
    }

    #[test]
    fn lattice_enumeration_matches_figure_neighborhood() {
        let w = RateFunction::step(2.0, 1.0).unwrap();
        let st = three_particle_stationary(&w, 30, 1.0).unwrap();
        // The origin and its first ring.
        assert!(st.index_of([0, 0, 0]).is_some());
        for u in [[2, -1, -1], [-1, 2, -1], [-1, -1, 2], [1, -2, 1], [1, 1, -2], [-2, 1, 1]] {
            assert!(st.index_of(u).is_some(), "missing {u:?}");
        }
        // Targets out of the origin carry rate w(0).
        let targets = transition_targets([0, 0, 0]);
        assert_eq!(targets[0], [2, -1, -1]);
        assert_eq!(targets[1], [-1, 2, -1]);
        assert_eq!(targets[2], [-1, -1, 2]);
        let total: f64 = st.pi.iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lattice_stationary_is_permutation_symmetric() {
        let w = RateFunction::step(2.0, 1.0).unwrap();
        let st = three_particle_stationary(&w, 36, 1.0).unwrap();
        let perms: [[usize; 3]; 5] =
            [[1, 2, 0], [2, 0, 1], [1, 0, 2], [0, 2, 1], [2, 1, 0]];
        for (i, &u) in st.states.iter().enumerate() {
            for perm in perms {
                let v = [u[perm[0]], u[perm[1]], u[perm[2]]];
                let j = st.index_of(v).expect("closed under permutations");
                let gap = (st.pi[i] - st.pi[j]).abs();
                assert!(
                    gap <= 1e-9 * st.pi[i].max(st.pi[j]).max(1e-12),
                    "asymmetry at {u:?} vs {v:?}: {gap}"
                );
            }
        }
    }

    #[test]
    fn lattice_has_nonzero_cycle_current() {
        // Directed triangle (0,0,0) -> (2,-1,-1) -> (1,1,-2) -> (0,0,0):
        // no detailed balance is possible on one-way edges.
        let w = RateFunction::step(2.0, 1.0).unwrap();
        let st = three_particle_stationary(&w, 36, 1.0).unwrap();
        let cycle = [[0, 0, 0], [2, -1, -1], [1, 1, -2], [0, 0, 0]];
        let mut min_current = f64::INFINITY;
        for k in 0..3 {
            let j = st.edge_current(cycle[k], cycle[k + 1], &w);
            min_current = min_current.min(j.abs());
        }
        assert!(
            min_current > 10.0 * st.residual,
            "cycle current {min_current} vs residual {}",
            st.residual
        );
    }

    #[test]
    fn lattice_flux_error_advises_larger_radius() {
        let w = RateFunction::step(2.0, 1.0).unwrap();
        match three_particle_stationary(&w, 8, 1e-12) {
            Err(Error::TruncationFlux { radius, .. }) => assert_eq!(radius, 8),
            other => panic!("expected truncation-flux error, got {other:?}"),
        }
    }
}
