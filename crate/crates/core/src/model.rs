//! Primitive model objects: jump rate functions, jump length laws, initial
//! conditions, and the class of test functions the generator acts on.
//!
//! All types are immutable after construction and safe to share across
//! threads. RNG streams are owned by each run, never by these objects.

use std::fmt;
use std::sync::Arc;

use rand_distr::{Distribution, Exp1, Normal, StandardUniform};

use crate::error::{Error, Result};
use crate::specfun::adaptive_quad;

/// Quadrature tolerance for `expected_post_jump`.
const POST_JUMP_TOL: f64 = 1e-9;

/// The jump rate function w: positive and non-increasing. Particles behind
/// the center of mass jump faster than particles ahead of it.
#[derive(Debug, Clone, PartialEq)]
pub enum RateFunction {
    /// w(x) = exp(-beta x). Unbounded as x -> -inf.
    Exponential { beta: f64 },
    /// w(x) = a for x < 0, b for 0 <= x, with a > b > 0.
    Step { a: f64, b: f64 },
    /// Logistic interpolation between a (far left) and b (far right):
    /// w(x) = b + (a - b) / (1 + exp(x / width)). Bounded, differentiable,
    /// with |w'| <= (a - b) / (4 width).
    SmoothStep { a: f64, b: f64, width: f64 },
    /// User-supplied knots (x, w(x)), linearly interpolated, clamped to the
    /// end values outside the table range.
    Tabulated { knots: Arc<Vec<(f64, f64)>> },
}

impl RateFunction {
    pub fn exponential(beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::InvalidRate(format!("beta must be positive, got {beta}")));
        }
        Ok(RateFunction::Exponential { beta })
    }

    pub fn step(a: f64, b: f64) -> Result<Self> {
        if !(a > b && b > 0.0) {
            return Err(Error::InvalidRate(format!(
                "step heights must satisfy a > b > 0, got a={a}, b={b}"
            )));
        }
        Ok(RateFunction::Step { a, b })
    }

    pub fn smooth_step(a: f64, b: f64, width: f64) -> Result<Self> {
        if !(a > b && b > 0.0) {
            return Err(Error::InvalidRate(format!(
                "smooth step heights must satisfy a > b > 0, got a={a}, b={b}"
            )));
        }
        if !(width > 0.0) {
            return Err(Error::InvalidRate(format!("width must be positive, got {width}")));
        }
        Ok(RateFunction::SmoothStep { a, b, width })
    }

    /// Build from knots; they must be strictly increasing in x, positive, and
    /// non-increasing in w.
    pub fn tabulated(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidRate("need at least two knots".into()));
        }
        for pair in knots.windows(2) {
            let (x0, w0) = pair[0];
            let (x1, w1) = pair[1];
            if !(x1 > x0) {
                return Err(Error::InvalidRate(format!(
                    "knot abscissae must be strictly increasing ({x0} then {x1})"
                )));
            }
            if w1 > w0 {
                return Err(Error::InvalidRate(format!(
                    "rate must be non-increasing: w({x0})={w0} < w({x1})={w1}"
                )));
            }
        }
        if knots.iter().any(|&(_, w)| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidRate("rate values must be positive and finite".into()));
        }
        Ok(RateFunction::Tabulated { knots: Arc::new(knots) })
    }

    /// Evaluate w(x).
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            RateFunction::Exponential { beta } => (-beta * x).exp(),
            RateFunction::Step { a, b } => {
                if x < 0.0 {
                    *a
                } else {
                    *b
                }
            }
            RateFunction::SmoothStep { a, b, width } => b + (a - b) / (1.0 + (x / width).exp()),
            RateFunction::Tabulated { knots } => {
                let first = knots.first().unwrap();
                let last = knots.last().unwrap();
                if x <= first.0 {
                    return first.1;
                }
                if x >= last.0 {
                    return last.1;
                }
                let i = knots.partition_point(|&(xk, _)| xk <= x);
                let (x0, w0) = knots[i - 1];
                let (x1, w1) = knots[i];
                w0 + (w1 - w0) * (x - x0) / (x1 - x0)
            }
        }
    }

    /// sup_x w(x); infinite for the exponential rate.
    pub fn sup_bound(&self) -> f64 {
        match self {
            RateFunction::Exponential { .. } => f64::INFINITY,
            RateFunction::Step { a, .. } | RateFunction::SmoothStep { a, .. } => *a,
            RateFunction::Tabulated { knots } => knots.first().unwrap().1,
        }
    }

    /// inf_x w(x); zero for the exponential rate.
    pub fn inf_bound(&self) -> f64 {
        match self {
            RateFunction::Exponential { .. } => 0.0,
            RateFunction::Step { b, .. } | RateFunction::SmoothStep { b, .. } => *b,
            RateFunction::Tabulated { knots } => knots.last().unwrap().1,
        }
    }

    /// Bound on |w'| where the derivative exists. `None` when no finite
    /// global bound is available (exponential: unbounded; step: not
    /// differentiable at the jump).
    pub fn lip_bound(&self) -> Option<f64> {
        match self {
            RateFunction::Exponential { .. } | RateFunction::Step { .. } => None,
            RateFunction::SmoothStep { a, b, width } => Some((a - b) / (4.0 * width)),
            RateFunction::Tabulated { knots } => knots
                .windows(2)
                .map(|p| ((p[1].1 - p[0].1) / (p[1].0 - p[0].0)).abs())
                .max_by(f64::total_cmp),
        }
    }

    pub fn is_bounded(&self) -> bool {
        self.sup_bound().is_finite()
    }

    /// True when the rate takes a single value everywhere (no attraction).
    pub fn is_constant(&self) -> bool {
        match self {
            RateFunction::Exponential { .. } => false,
            RateFunction::Step { .. } | RateFunction::SmoothStep { .. } => false,
            RateFunction::Tabulated { knots } => {
                let w0 = knots[0].1;
                knots.iter().all(|&(_, w)| w == w0)
            }
        }
    }
}

impl fmt::Display for RateFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RateFunction::Exponential { beta } => write!(f, "exponential(beta={beta})"),
            RateFunction::Step { a, b } => write!(f, "step(a={a}, b={b})"),
            RateFunction::SmoothStep { a, b, width } => {
                write!(f, "smooth-step(a={a}, b={b}, width={width})")
            }
            RateFunction::Tabulated { knots } => write!(f, "tabulated({} knots)", knots.len()),
        }
    }
}

type DensityFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type SamplerFn = Arc<dyn Fn(&mut dyn rand::RngCore) -> f64 + Send + Sync>;

/// A user-supplied jump length distribution with density.
#[derive(Clone)]
pub struct CustomDensity {
    density: DensityFn,
    sampler: SamplerFn,
    /// Upper truncation bound: the density mass beyond it must be < 1e-12.
    upper: f64,
    mean: f64,
    second_moment: f64,
    third_moment: f64,
}

impl fmt::Debug for CustomDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomDensity")
            .field("upper", &self.upper)
            .field("mean", &self.mean)
            .finish()
    }
}

/// The jump length law Z: nonnegative, scaled to E Z = 1, finite third moment.
#[derive(Debug, Clone)]
pub enum JumpLaw {
    /// Z = 1 always.
    DeterministicUnit,
    /// Z ~ Exp(1), density exp(-z) on [0, inf).
    ExponentialUnit,
    Custom(CustomDensity),
}

impl JumpLaw {
    /// Validate and wrap a custom density. Checks, by quadrature on
    /// [0, upper]: total mass 1 (within 1e-10, certifying the tail bound),
    /// mean 1 within 1e-6, and a finite third moment.
    pub fn custom(
        density: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sampler: impl Fn(&mut dyn rand::RngCore) -> f64 + Send + Sync + 'static,
        upper: f64,
    ) -> Result<Self> {
        if !(upper > 0.0) || !upper.is_finite() {
            return Err(Error::InvalidLaw(format!(
                "truncation bound must be positive and finite, got {upper}"
            )));
        }
        let density: DensityFn = Arc::new(density);
        let d = Arc::clone(&density);
        let mass = adaptive_quad(|z| d(z), 0.0, upper, 1e-13).into_checked(1e-13)?;
        if (mass - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidLaw(format!(
                "density mass on [0, {upper}] is {mass}; tail beyond the bound must be < 1e-12"
            )));
        }
        let d = Arc::clone(&density);
        let mean = adaptive_quad(|z| z * d(z), 0.0, upper, 1e-10).into_checked(1e-10)?;
        if (mean - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidLaw(format!("E Z = {mean}, must equal 1 within 1e-6")));
        }
        let d = Arc::clone(&density);
        let second_moment = adaptive_quad(|z| z * z * d(z), 0.0, upper, 1e-10).value;
        let d = Arc::clone(&density);
        let third_moment = adaptive_quad(|z| z * z * z * d(z), 0.0, upper, 1e-10).value;
        if !third_moment.is_finite() {
            return Err(Error::InvalidLaw("third moment must be finite".into()));
        }
        Ok(JumpLaw::Custom(CustomDensity {
            density,
            sampler: Arc::new(sampler),
            upper,
            mean,
            second_moment,
            third_moment,
        }))
    }

    /// Draw one jump length.
    pub fn sample(&self, rng: &mut dyn rand::RngCore) -> f64 {
        match self {
            JumpLaw::DeterministicUnit => 1.0,
            JumpLaw::ExponentialUnit => Exp1.sample(rng),
            JumpLaw::Custom(c) => (c.sampler)(rng),
        }
    }

    /// E Z (equal to 1 by construction for every law).
    pub fn mean(&self) -> f64 {
        match self {
            JumpLaw::DeterministicUnit | JumpLaw::ExponentialUnit => 1.0,
            JumpLaw::Custom(c) => c.mean,
        }
    }

    pub fn second_moment(&self) -> f64 {
        match self {
            JumpLaw::DeterministicUnit => 1.0,
            JumpLaw::ExponentialUnit => 2.0,
            JumpLaw::Custom(c) => c.second_moment,
        }
    }

    pub fn third_moment(&self) -> f64 {
        match self {
            JumpLaw::DeterministicUnit => 1.0,
            JumpLaw::ExponentialUnit => 6.0,
            JumpLaw::Custom(c) => c.third_moment,
        }
    }

    /// The density phi of Z, if the law has one, together with the upper
    /// truncation bound for quadrature.
    pub fn density(&self) -> Option<(DensityFn, f64)> {
        match self {
            JumpLaw::DeterministicUnit => None,
            JumpLaw::ExponentialUnit => {
                // Tail beyond 40 is 4e-18, far below every tolerance in use.
                Some((Arc::new(|z: f64| if z >= 0.0 { (-z).exp() } else { 0.0 }), 40.0))
            }
            JumpLaw::Custom(c) => Some((Arc::clone(&c.density), c.upper)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            JumpLaw::DeterministicUnit => "deterministic-unit",
            JumpLaw::ExponentialUnit => "exponential-unit",
            JumpLaw::Custom(_) => "custom-density",
        }
    }
}

/// A member of the test-function class H: bounded continuous with |f| <= 1,
/// or the identity.
#[derive(Clone)]
pub enum TestFunction {
    Identity,
    Bounded { name: String, f: DensityFn },
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestFunction::Identity => write!(f, "Id"),
            TestFunction::Bounded { name, .. } => write!(f, "{name}"),
        }
    }
}

impl TestFunction {
    pub fn identity() -> Self {
        TestFunction::Identity
    }

    /// Wrap a bounded continuous function; |f| <= 1 is probed on a coarse
    /// grid covering several orders of magnitude and rejected on violation.
    pub fn bounded(name: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        let name = name.into();
        let mut probes = vec![0.0];
        let mut x = 1e-3;
        while x < 1e7 {
            probes.push(x);
            probes.push(-x);
            x *= 3.7;
        }
        for &p in &probes {
            let v = f(p);
            if !v.is_finite() || v.abs() > 1.0 + 1e-12 {
                return Err(Error::NotInTestClass(format!("|{name}({p})| = {v}")));
            }
        }
        Ok(TestFunction::Bounded { name, f: Arc::new(f) })
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            TestFunction::Identity => x,
            TestFunction::Bounded { f, .. } => f(x),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, TestFunction::Identity)
    }
}

/// E[f(x + Z)] for a test function f and jump law Z.
///
/// Identity short-circuits to x + 1 (E Z = 1); deterministic jumps evaluate
/// f(x + 1); otherwise adaptive quadrature against the law's density to
/// absolute tolerance 1e-9.
pub fn expected_post_jump(law: &JumpLaw, f: &TestFunction, x: f64) -> Result<f64> {
    if f.is_identity() {
        return Ok(x + 1.0);
    }
    match law {
        JumpLaw::DeterministicUnit => Ok(f.eval(x + 1.0)),
        _ => {
            let (phi, upper) = law.density().expect("non-deterministic laws have densities");
            let r = adaptive_quad(|z| f.eval(x + z) * phi(z), 0.0, upper, POST_JUMP_TOL * 0.5);
            r.into_checked(POST_JUMP_TOL)
        }
    }
}

/// How to lay down the n starting positions.
#[derive(Debug, Clone)]
pub enum InitialCondition {
    /// Every particle at x0.
    PointMass { x0: f64 },
    /// i.i.d. draws from a named density with finite third moment.
    IidSample { density: DensitySpec },
    /// Positions given verbatim.
    Explicit { positions: Vec<f64> },
}

/// Named initial densities. All have finite third moments, which is the
/// simple sufficient condition for the fluid-limit assumptions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DensitySpec {
    Gaussian { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Exp(rate) on [0, inf).
    Exponential { rate: f64 },
}

impl DensitySpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DensitySpec::Gaussian { sd, .. } if !(sd > 0.0) => {
                Err(Error::InvalidInitial(format!("gaussian sd must be positive, got {sd}")))
            }
            DensitySpec::Uniform { lo, hi } if !(hi > lo) => {
                Err(Error::InvalidInitial(format!("uniform needs hi > lo, got [{lo}, {hi}]")))
            }
            DensitySpec::Exponential { rate } if !(rate > 0.0) => {
                Err(Error::InvalidInitial(format!("exponential rate must be positive, got {rate}")))
            }
            _ => Ok(()),
        }
    }

    pub fn density(&self, x: f64) -> f64 {
        match *self {
            DensitySpec::Gaussian { mean, sd } => {
                let z = (x - mean) / sd;
                (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            }
            DensitySpec::Uniform { lo, hi } => {
                if x >= lo && x <= hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            DensitySpec::Exponential { rate } => {
                if x >= 0.0 {
                    rate * (-rate * x).exp()
                } else {
                    0.0
                }
            }
        }
    }

    pub fn sample(&self, rng: &mut dyn rand::RngCore) -> f64 {
        match *self {
            DensitySpec::Gaussian { mean, sd } => {
                Normal::new(mean, sd).expect("validated").sample(rng)
            }
            DensitySpec::Uniform { lo, hi } => {
                let u: f64 = StandardUniform.sample(rng);
                lo + (hi - lo) * u
            }
            DensitySpec::Exponential { rate } => {
                let e: f64 = Exp1.sample(rng);
                e / rate
            }
        }
    }
}

impl InitialCondition {
    pub fn point_mass(x0: f64) -> Result<Self> {
        if !x0.is_finite() {
            return Err(Error::InvalidInitial(format!("point mass at {x0}")));
        }
        Ok(InitialCondition::PointMass { x0 })
    }

    pub fn iid(density: DensitySpec) -> Result<Self> {
        density.validate()?;
        Ok(InitialCondition::IidSample { density })
    }

    pub fn explicit(positions: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidInitial("no positions given".into()));
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInitial("positions must be finite".into()));
        }
        Ok(InitialCondition::Explicit { positions })
    }

    /// Materialize n starting positions. For `Explicit` the stored list is
    /// returned and must have length n.
    pub fn generate(&self, n: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::InvalidInitial("need at least one particle".into()));
        }
        match self {
            InitialCondition::PointMass { x0 } => Ok(vec![*x0; n]),
            InitialCondition::IidSample { density } => {
                Ok((0..n).map(|_| density.sample(rng)).collect())
            }
            InitialCondition::Explicit { positions } => {
                if positions.len() != n {
                    return Err(Error::InvalidInitial(format!(
                        "{} explicit positions but n = {n}",
                        positions.len()
                    )));
                }
                Ok(positions.clone())
            }
        }
    }
}
