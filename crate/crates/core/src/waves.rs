//! Traveling-wave densities and wave speeds.
//!
//! For exponential jump lengths, the stationary shape seen from the center
//! of mass is rho(x) = K exp(integral_0^x (w(s)/c - 1) ds), with the speed c
//! singled out by the requirement that rho is centered. The exponential
//! rate w(x) = exp(-beta x) closes to a generalized Gumbel density.

use crate::error::{Error, Result};
use crate::model::RateFunction;
use crate::specfun::{adaptive_quad, digamma, find_root, log_gamma};

/// ln(1 + e^u) without overflow.
fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// The unnormalized wave profile exp(E(x)) with E(x) = int_0^x (w(s)/c - 1) ds.
#[derive(Debug, Clone)]
pub struct WaveDensity {
    w: RateFunction,
    c: f64,
}

impl WaveDensity {
    /// Requires a non-constant rate (constant rates admit no probability
    /// solution) and a positive speed. Exponential jump lengths are the
    /// standing hypothesis for this form.
    pub fn new(w: RateFunction, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::InvalidArgument(format!("wave speed must be positive, got {c}")));
        }
        if w.is_constant() {
            return Err(Error::InvalidRate(
                "constant rates admit no traveling-wave probability density".into(),
            ));
        }
        Ok(WaveDensity { w, c })
    }

    pub fn speed(&self) -> f64 {
        self.c
    }

    pub fn rate(&self) -> &RateFunction {
        &self.w
    }

    /// E(x) = int_0^x (w(s)/c - 1) ds; closed forms for the exponential,
    /// step, and smooth-step rates, adaptive quadrature otherwise.
    pub fn exponent(&self, x: f64) -> f64 {
        let c = self.c;
        match &self.w {
            RateFunction::Exponential { beta } => (1.0 - (-beta * x).exp()) / (c * beta) - x,
            RateFunction::Step { a, b } => {
                if x >= 0.0 {
                    (b / c - 1.0) * x
                } else {
                    (a / c - 1.0) * x
                }
            }
            RateFunction::SmoothStep { a, b, width } => {
                // int_0^x 1/(1 + e^{s/W}) ds = W (ln 2 - softplus(-x/W))
                let ramp = width * (std::f64::consts::LN_2 - softplus(-x / width));
                (b * x + (a - b) * ramp) / c - x
            }
            RateFunction::Tabulated { .. } => {
                let w = &self.w;
                adaptive_quad(|s| w.eval(s) / c - 1.0, 0.0, x, 1e-12).value
            }
        }
    }

    /// exp(E(x)); may under- or overflow for far-out x, callers should work
    /// with `exponent` when scaling matters.
    pub fn eval_unnormalized(&self, x: f64) -> f64 {
        self.exponent(x).exp()
    }

    /// Location of the profile's mode: w(x) = c. The profile increases to
    /// the left of it and decreases to the right.
    fn peak(&self) -> f64 {
        let w = &self.w;
        let c = self.c;
        // Bracket the crossing of the non-increasing w through c.
        let mut lo = -1.0;
        let mut hi = 1.0;
        for _ in 0..80 {
            if w.eval(lo) > c {
                break;
            }
            lo *= 2.0;
        }
        for _ in 0..80 {
            if w.eval(hi) < c {
                break;
            }
            hi *= 2.0;
        }
        if !(w.eval(lo) > c && w.eval(hi) < c) {
            // Speed outside the rate's range; profile is one-sided.
            return 0.0;
        }
        find_root(|x| w.eval(x) - c, lo, hi, 1e-10, f64::NEG_INFINITY).unwrap_or(0.0)
    }

    /// Window [lo, hi] outside which exp(E(x) - E(peak)) < exp(drop_log).
    fn window(&self, drop_log: f64) -> (f64, f64, f64) {
        let x0 = self.peak();
        let e0 = self.exponent(x0);
        let target = e0 + drop_log;
        let mut step = 1.0;
        let mut hi = x0;
        for _ in 0..200 {
            hi += step;
            if self.exponent(hi) < target {
                break;
            }
            step *= 1.5;
        }
        step = 1.0;
        let mut lo = x0;
        for _ in 0..200 {
            lo -= step;
            if self.exponent(lo) < target {
                break;
            }
            step *= 1.5;
        }
        (lo, hi, e0)
    }

    /// Moments of the unnormalized profile rescaled by exp(-E(peak)):
    /// returns (m0, m1) with m_k = int x^k exp(E(x) - E(peak)) dx.
    fn scaled_moments(&self) -> (f64, f64) {
        let (lo, hi, e0) = self.window((1e-18f64).ln());
        let m0 = adaptive_quad(|x| (self.exponent(x) - e0).exp(), lo, hi, 1e-11).value;
        let tol1 = (1e-11 * m0).max(1e-14);
        let m1 = adaptive_quad(|x| x * (self.exponent(x) - e0).exp(), lo, hi, tol1).value;
        (m0, m1)
    }
}

/// A normalized traveling wave together with its speed.
#[derive(Debug, Clone)]
pub struct WaveSolution {
    profile: WaveDensity,
    /// log of the normalizing constant K.
    log_k: f64,
    /// Certified window: density mass outside is below `tail_mass`.
    support: (f64, f64),
    tail_mass: f64,
}

impl WaveSolution {
    /// rho(x).
    pub fn density(&self, x: f64) -> f64 {
        (self.log_k + self.profile.exponent(x)).exp()
    }

    pub fn speed(&self) -> f64 {
        self.profile.speed()
    }

    /// The normalizing constant K.
    pub fn normalization(&self) -> f64 {
        self.log_k.exp()
    }

    pub fn rate(&self) -> &RateFunction {
        self.profile.rate()
    }

    /// Window holding all but `tail_mass_bound` of the mass.
    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn tail_mass_bound(&self) -> f64 {
        self.tail_mass
    }

    /// Quadrature residuals of the defining invariants:
    /// (|mass - 1|, |mean|, |c - int w rho|).
    pub fn invariant_residuals(&self) -> (f64, f64, f64) {
        let (lo, hi) = self.support;
        let mass = adaptive_quad(|x| self.density(x), lo, hi, 1e-11).value;
        let mean = adaptive_quad(|x| x * self.density(x), lo, hi, 1e-11).value;
        let w = self.profile.rate().clone();
        let avg_rate = adaptive_quad(|x| w.eval(x) * self.density(x), lo, hi, 1e-11).value;
        (
            (mass - 1.0).abs() + self.tail_mass,
            mean.abs(),
            (self.speed() - avg_rate).abs(),
        )
    }
}

fn certify_support(profile: &WaveDensity, log_k: f64) -> (f64, f64, f64) {
    // Outside x0 with w(x0) < c the density decays at least like
    // exp(-(1 - w(x0)/c)(x - x0)), mirrored on the left; march out until the
    // implied tail bound drops below 1e-13 on each side.
    let c = profile.speed();
    let (mut lo, mut hi, _) = profile.window((1e-16f64).ln());
    let mut tail = 0.0;
    for _ in 0..200 {
        let rate = 1.0 - profile.rate().eval(hi) / c;
        if rate > 0.0 {
            let bound = (log_k + profile.exponent(hi)).exp() / rate;
            if bound < 1e-13 {
                tail += bound;
                break;
            }
        }
        hi += 1.0 + 0.05 * (hi - lo).abs();
    }
    for _ in 0..200 {
        let rate = profile.rate().eval(lo) / c - 1.0;
        if rate > 0.0 {
            let bound = (log_k + profile.exponent(lo)).exp() / rate;
            if bound < 1e-13 {
                tail += bound;
                break;
            }
        }
        lo -= 1.0 + 0.05 * (hi - lo).abs();
    }
    (lo, hi, tail.max(1e-16))
}

/// Build the normalized wave for rate `w` at speed `c`. The result is only a
/// probability solution when `c` solves the centering condition; use
/// [`solve_speed`] for that.
pub fn wave_density(w: RateFunction, c: f64) -> Result<WaveSolution> {
    let profile = WaveDensity::new(w, c)?;
    let (lo, hi, e0) = profile.window((1e-18f64).ln());
    let m0 =
        adaptive_quad(|x| (profile.exponent(x) - e0).exp(), lo, hi, 1e-11).into_checked(1e-11)?;
    let log_k = -(e0 + m0.ln());
    let (slo, shi, tail) = certify_support(&profile, log_k);
    Ok(WaveSolution { profile, log_k, support: (slo, shi), tail_mass: tail })
}

/// The unique speed c0 for which the wave profile is centered, found by
/// bracketed bisection with a secant polish on the normalized first moment
/// F(c) = int x rho_c / int rho_c.
pub fn solve_speed(w: &RateFunction) -> Result<f64> {
    if w.is_constant() {
        return Err(Error::InvalidRate(
            "constant rates admit no traveling-wave probability density".into(),
        ));
    }
    let centered_mean = |c: f64| -> f64 {
        let profile = WaveDensity { w: w.clone(), c };
        let (m0, m1) = profile.scaled_moments();
        m1 / m0
    };

    let (inf_w, sup_w) = (w.inf_bound(), w.sup_bound());
    let (lo, hi) = if sup_w.is_finite() && inf_w > 0.0 {
        // c = int w rho lies strictly inside (inf w, sup w); shrink the
        // margin geometrically until the signs straddle.
        let span = sup_w - inf_w;
        let mut found = None;
        let mut margin = 0.25 * span;
        for _ in 0..40 {
            let lo = inf_w + margin;
            let hi = sup_w - margin;
            if lo < hi && centered_mean(lo) > 0.0 && centered_mean(hi) < 0.0 {
                found = Some((lo, hi));
                break;
            }
            margin *= 0.5;
        }
        found.ok_or_else(|| {
            Error::NoBracket(format!(
                "no sign change of the centering functional inside ({inf_w}, {sup_w})"
            ))
        })?
    } else {
        // Unbounded (or vanishing) rate: geometric scan around w(0).
        let c0 = w.eval(0.0).max(1e-12);
        let mut lo = c0;
        let mut hi = c0;
        let mut flo = centered_mean(lo);
        let mut fhi = centered_mean(hi);
        let mut found = false;
        for _ in 0..80 {
            if flo > 0.0 && fhi < 0.0 {
                found = true;
                break;
            }
            if flo <= 0.0 {
                lo *= 0.5;
                flo = centered_mean(lo);
            }
            if fhi >= 0.0 {
                hi *= 2.0;
                fhi = centered_mean(hi);
            }
        }
        if !found && !(flo > 0.0 && fhi < 0.0) {
            return Err(Error::NoBracket(format!(
                "geometric scan over [{lo:e}, {hi:e}] found no sign change; \
                 F({lo:e}) = {flo:e}, F({hi:e}) = {fhi:e}"
            )));
        }
        (lo, hi)
    };

    find_root(centered_mean, lo, hi, 1e-12, 1e-10)
}

/// The generalized Gumbel wave for w(x) = exp(-beta x): closed-form density
/// and speed c = (1/beta) exp(-psi(1/beta)).
pub fn gumbel_wave(beta: f64) -> Result<WaveSolution> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let k = 1.0 / beta;
    let c = k * (-digamma(k)?).exp();
    let w = RateFunction::exponential(beta)?;
    let profile = WaveDensity::new(w, c)?;
    // The closed form is
    //   rho(x) = beta/Gamma(1/beta) exp(-(x - psi/beta) - e^{-beta (x - psi/beta)}),
    // and equals K exp(E(x)) with E the exponential-rate exponent; the two
    // exponents differ by a constant, pinned at x = 0, which fixes log K
    // from log Gamma instead of quadrature.
    let shift = digamma(k)? / beta;
    let log_k_closed = beta.ln() - log_gamma(k)?;
    let e_at0 = profile.exponent(0.0);
    let closed_at0 = shift - (beta * shift).exp();
    let log_k = log_k_closed + closed_at0 - e_at0;
    let (slo, shi, tail) = certify_support(&profile, log_k);
    Ok(WaveSolution { profile, log_k, support: (slo, shi), tail_mass: tail })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specfun::EULER_GAMMA;

    #[test]
    fn step_wave_is_laplace() {
        // Step(a, b) at c = (a+b)/2 gives the Laplace density
        // (a-b)/(2(a+b)) exp(-(a-b)/(a+b) |x|).
        let (a, b) = (2.0, 1.0);
        let c = (a + b) / 2.0;
        let wave = wave_density(RateFunction::step(a, b).unwrap(), c).unwrap();
        let k = (a - b) / (2.0 * (a + b));
        for x in [-3.0f64, -1.0, 0.0, 0.5, 2.0, 6.0] {
            let expect = k * (-(a - b) / (a + b) * x.abs()).exp();
            assert!(
                (wave.density(x) - expect).abs() < 1e-10,
                "x={x}: {} vs {expect}",
                wave.density(x)
            );
        }
    }

    #[test]
    fn step_three_one_constants() {
        let wave = wave_density(RateFunction::step(3.0, 1.0).unwrap(), 2.0).unwrap();
        assert!((wave.normalization() - 0.25).abs() < 1e-10);
        for x in [-2.0f64, 0.0, 1.0, 4.0] {
            let expect = 0.25 * (-x.abs() / 2.0).exp();
            assert!((wave.density(x) - expect).abs() < 1e-11);
        }
    }

    #[test]
    fn exponential_exponent_closed_form_matches_quadrature() {
        let beta = 1.7;
        let c = 0.8;
        let wd = WaveDensity::new(RateFunction::exponential(beta).unwrap(), c).unwrap();
        for x in [-2.0, 0.0, 3.0] {
            let by_quad = adaptive_quad(|s| (-beta * s).exp() / c - 1.0, 0.0, x, 1e-12).value;
            assert!(
                (wd.exponent(x) - by_quad).abs() < 1e-10,
                "x={x}: closed {} vs quad {by_quad}",
                wd.exponent(x)
            );
        }
    }

    #[test]
    fn smooth_step_exponent_closed_form_matches_quadrature() {
        let w = RateFunction::smooth_step(2.0, 1.0, 0.3).unwrap();
        let wd = WaveDensity::new(w.clone(), 1.4).unwrap();
        for x in [-4.0, -0.5, 0.0, 1.0, 5.0] {
            let by_quad = adaptive_quad(|s| w.eval(s) / 1.4 - 1.0, 0.0, x, 1e-12).value;
            assert!((wd.exponent(x) - by_quad).abs() < 1e-10);
        }
    }

    #[test]
    fn solve_speed_step_is_midpoint() {
        for (a, b) in [(2.0, 1.0), (3.0, 1.0), (5.5, 0.25), (1.01, 1.0)] {
            let c = solve_speed(&RateFunction::step(a, b).unwrap()).unwrap();
            assert!(
                (c - (a + b) / 2.0).abs() < 1e-8,
                "step({a},{b}): c = {c}, want {}",
                (a + b) / 2.0
            );
        }
    }

    #[test]
    fn solve_speed_exponential_matches_digamma_formula() {
        for beta in [0.5, 1.0, 2.0] {
            let c = solve_speed(&RateFunction::exponential(beta).unwrap()).unwrap();
            let k = 1.0 / beta;
            let expect = k * (-digamma(k).unwrap()).exp();
            assert!(
                (c - expect).abs() < 1e-8,
                "beta={beta}: c = {c}, formula gives {expect}"
            );
        }
        // beta = 1: psi(1) = -gamma, so c = e^{gamma}. (Jensen on the speed
        // identity forces c >= 1 here, pinning the sign in the exponent.)
        let c = solve_speed(&RateFunction::exponential(1.0).unwrap()).unwrap();
        assert!((c - EULER_GAMMA.exp()).abs() < 1e-8);
        assert!((c - 1.7810724179901979).abs() < 1e-8);
    }

    #[test]
    fn gumbel_wave_beta_one_is_standard_gumbel() {
        let wave = gumbel_wave(1.0).unwrap();
        // rho_1(x) = exp(-(x+gamma) - exp(-(x+gamma))); at x = -gamma the
        // exponent is -1.
        let v = wave.density(-EULER_GAMMA);
        assert!((v - (-1.0f64).exp()).abs() < 1e-10, "{v}");
        assert!((v - 0.36787944117144233).abs() < 1e-10);
        for x in [-1.5, 0.0, 2.0] {
            let y = x + EULER_GAMMA;
            let expect = (-y - (-y).exp()).exp();
            assert!((wave.density(x) - expect).abs() < 1e-10);
        }
        assert!((wave.speed() - EULER_GAMMA.exp()).abs() < 1e-12);
    }

    #[test]
    fn gumbel_wave_mass_and_centering() {
        for beta in [0.5, 1.0, 2.0, 4.0] {
            let wave = gumbel_wave(beta).unwrap();
            let (mass_res, mean_res, speed_res) = wave.invariant_residuals();
            assert!(mass_res < 1e-8, "beta={beta}: mass residual {mass_res}");
            assert!(mean_res < 1e-8, "beta={beta}: mean residual {mean_res}");
            assert!(speed_res < 1e-8, "beta={beta}: speed residual {speed_res}");
        }
    }

    #[test]
    fn gumbel_matches_generic_route() {
        for beta in [0.5, 1.0, 2.0] {
            let closed = gumbel_wave(beta).unwrap();
            let w = RateFunction::exponential(beta).unwrap();
            let c = solve_speed(&w).unwrap();
            let generic = wave_density(w, c).unwrap();
            let mut x = -5.0;
            while x <= 10.0 {
                assert!(
                    (closed.density(x) - generic.density(x)).abs() < 1e-8,
                    "beta={beta}, x={x}: {} vs {}",
                    closed.density(x),
                    generic.density(x)
                );
                x += 0.25;
            }
        }
    }

    #[test]
    fn wave_invariants_hold_for_step_and_smooth() {
        for w in [
            RateFunction::step(2.0, 1.0).unwrap(),
            RateFunction::smooth_step(2.0, 1.0, 0.2).unwrap(),
        ] {
            let c = solve_speed(&w).unwrap();
            let wave = wave_density(w, c).unwrap();
            let (mass_res, mean_res, speed_res) = wave.invariant_residuals();
            assert!(mass_res < 1e-8);
            assert!(mean_res < 1e-8);
            assert!(speed_res < 1e-8);
        }
    }

    #[test]
    fn tail_bound_holds_pointwise() {
        // rho(x) <= rho(x0) exp(-(1 - w(x0)/c)(x - x0)) for x >= x0 when
        // w(x0) < c.
        let wave = gumbel_wave(1.0).unwrap();
        let c = wave.speed();
        let x0 = 1.0;
        let w_x0 = (-x0 as f64).exp();
        assert!(w_x0 < c);
        let rate = 1.0 - w_x0 / c;
        let mut x = x0;
        while x < 12.0 {
            let bound = wave.density(x0) * (-rate * (x - x0)).exp();
            assert!(wave.density(x) <= bound * (1.0 + 1e-12), "x={x}");
            x += 0.125;
        }
    }

    #[test]
    fn speed_increases_with_step_height() {
        let mut prev = 0.0;
        for a in [1.5, 2.0, 2.5, 3.0] {
            let c = solve_speed(&RateFunction::step(a, 1.0).unwrap()).unwrap();
            assert!(c > prev);
            prev = c;
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(wave_density(RateFunction::step(2.0, 1.0).unwrap(), 0.0).is_err());
        assert!(wave_density(RateFunction::step(2.0, 1.0).unwrap(), -1.0).is_err());
        let constant = RateFunction::tabulated(vec![(-1.0, 1.0), (1.0, 1.0)]).unwrap();
        assert!(wave_density(constant.clone(), 1.0).is_err());
        assert!(solve_speed(&constant).is_err());
        assert!(gumbel_wave(0.0).is_err());
    }
}
