//! Closed-form stability and ISS constants, and pointwise envelope checks
//! of simulated arcs against them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid_time::{HybridArc, HybridTimePoint};

/// Estimator gains, regressor bound, excitation certificate and the free
/// Lyapunov parameters `(q_m, q_M, ζ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub gamma_c: f64,
    pub lambda_c: f64,
    pub gamma_d: f64,
    pub lambda_d: f64,
    pub phi_max: f64,
    pub psi_0: f64,
    pub delta: f64,
    pub mu: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub zeta: f64,
    #[serde(default)]
    pub lipschitz_c: f64,
    #[serde(default)]
    pub lipschitz_d: f64,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be positive, got {v}")))
    }
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be nonnegative, got {v}")))
    }
}

fn jump_rate(lambda_d: f64) -> Result<()> {
    if lambda_d > 0.0 && lambda_d < 2.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("lambda_d must lie in (0, 2), got {lambda_d}")))
    }
}

fn unit_open(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must lie in (0, 1), got {v}")))
    }
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        positive("gamma_c", self.gamma_c)?;
        positive("lambda_c", self.lambda_c)?;
        positive("gamma_d", self.gamma_d)?;
        jump_rate(self.lambda_d)?;
        nonnegative("phi_max", self.phi_max)?;
        nonnegative("psi_0", self.psi_0)?;
        positive("delta", self.delta)?;
        positive("mu", self.mu)?;
        positive("q_min", self.q_min)?;
        if !(self.q_max >= self.q_min && self.q_max.is_finite()) {
            return Err(Error::Parameter(format!(
                "q_max = {} must be at least q_min = {}",
                self.q_max, self.q_min
            )));
        }
        unit_open("zeta", self.zeta)?;
        nonnegative("lipschitz_c", self.lipschitz_c)?;
        nonnegative("lipschitz_d", self.lipschitz_d)?;
        Ok(())
    }
}

/// `−ln(1 − λ_d(2 − λ_d))`, infinite at `λ_d = 1`.
fn jump_decay(lambda_d: f64) -> f64 {
    -(-lambda_d * (2.0 - lambda_d)).ln_1p()
}

/// Decay rate of the filter error: `½ min{2λ_c, −ln(1 − λ_d(2 − λ_d))}`.
pub fn filter_error_rate(lambda_c: f64, lambda_d: f64) -> Result<f64> {
    positive("lambda_c", lambda_c)?;
    jump_rate(lambda_d)?;
    Ok(0.5 * (2.0 * lambda_c).min(jump_decay(lambda_d)))
}

/// Rate used inside the stability constant chain: `½ min{λ_c, −ln(1 − λ_d(2 − λ_d))}`.
pub fn chain_b(lambda_c: f64, lambda_d: f64) -> Result<f64> {
    positive("lambda_c", lambda_c)?;
    jump_rate(lambda_d)?;
    Ok(0.5 * lambda_c.min(jump_decay(lambda_d)))
}

fn jump_filter_gain(lambda_d: f64) -> f64 {
    let s = lambda_d * (2.0 - lambda_d);
    (2.0 * s + 16.0).sqrt() / s
}

/// Uniform bound on `|ψ|`.
pub fn regressor_filter_bound(psi_0: f64, lambda_c: f64, lambda_d: f64, phi_max: f64) -> Result<f64> {
    nonnegative("psi_0", psi_0)?;
    positive("lambda_c", lambda_c)?;
    jump_rate(lambda_d)?;
    nonnegative("phi_max", phi_max)?;
    Ok(psi_0 + (1.0 / lambda_c).max(jump_filter_gain(lambda_d)) * phi_max)
}

/// Data entering `σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaInputs {
    pub a_m: f64,
    pub mu_0: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IssGainConstants {
    pub sigma: f64,
    pub kappa_0: f64,
    pub lambda_0: f64,
    pub p_m: f64,
    #[serde(rename = "p_M")]
    pub p_big_m: f64,
    pub rho: f64,
    pub omega: f64,
    /// `√(p_M / p_m)`, the gain of `β(s, r) = √(p_M/p_m) e^{−ωr} s`.
    pub beta_gain: f64,
}

impl IssGainConstants {
    /// `β(s, r)`.
    pub fn beta(&self, s: f64, r: f64) -> f64 {
        self.beta_gain * (-self.omega * r).exp() * s
    }
}

/// `½ min{x, −ln(1 − x)}` with `x = q_m (1 − ζ) / (2 p_M)`.
pub fn omega(q_min: f64, p_big_m: f64, zeta: f64) -> f64 {
    let x = q_min / (2.0 * p_big_m) * (1.0 - zeta);
    0.5 * x.min(-(-x).ln_1p())
}

/// `σ = 2μ_0 / (1 + √((a_M + 2)(Δ + 2)³(a_M(Δ + 2) + ½)))²`.
pub fn sigma(s: SigmaInputs) -> f64 {
    let d2 = s.delta + 2.0;
    let root = ((s.a_m + 2.0) * d2 * d2 * d2 * (s.a_m * d2 + 0.5)).sqrt();
    2.0 * s.mu_0 / ((1.0 + root) * (1.0 + root))
}

/// ISS constants of the generic error class.
pub fn error_class_constants(q_min: f64, q_max: f64, zeta: f64, s: SigmaInputs) -> Result<IssGainConstants> {
    positive("q_min", q_min)?;
    if !(q_max >= q_min && q_max.is_finite()) {
        return Err(Error::Parameter(format!("q_max = {q_max} must be at least q_min = {q_min}")));
    }
    unit_open("zeta", zeta)?;
    nonnegative("a_M", s.a_m)?;
    positive("mu_0", s.mu_0)?;
    positive("delta", s.delta)?;

    let sigma = sigma(s);
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::Bounds(format!(
            "sigma = {sigma} is outside (0, 1); the excitation level is inconsistent with the regressor bound"
        )));
    }
    let kappa_0 = (1.0 / (1.0 - sigma)).sqrt();
    let lambda_0 = -(-sigma).ln_1p() / (2.0 * (s.delta + 1.0));
    let k2 = kappa_0 * kappa_0;
    let two_l0 = 2.0 * lambda_0;
    let p_m = q_min;
    let p_big_m = q_min + q_max * k2 / two_l0 + q_max * k2 * two_l0.exp() / two_l0.exp_m1();
    // ρ = √(2p_M³/(q_m p_m ζ) (2p_M/q_m + 1)), factored to keep p_M³ out of range trouble
    let rho = p_big_m * (2.0 * p_big_m / (q_min * p_m * zeta) * (2.0 * p_big_m / q_min + 1.0)).sqrt();
    Ok(IssGainConstants {
        sigma,
        kappa_0,
        lambda_0,
        p_m,
        p_big_m,
        rho,
        omega: omega(q_min, p_big_m, zeta),
        beta_gain: (p_big_m / p_m).sqrt(),
    })
}

/// Constants of the noisy estimator's ISS bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseIssConstants {
    pub kappa_nu: f64,
    pub lambda_nu: f64,
    pub rho_nu: f64,
    pub lambda_eps: f64,
    pub rho_eps: f64,
    /// `ρ_ε max{λ_c + L_c, 1 − λ_d + L_d} + 1`, the noise gain in the disturbance bounds.
    pub noise_gain: f64,
}

pub fn lambda_eps(lambda_c: f64, lambda_d: f64, zeta: f64) -> f64 {
    let x = 0.5 * lambda_d * (2.0 - lambda_d) * (1.0 - zeta);
    0.5 * (lambda_c * (1.0 - zeta)).min(-(-x).ln_1p())
}

pub fn rho_eps(lambda_c: f64, lambda_d: f64, zeta: f64) -> f64 {
    let sz = zeta.sqrt();
    (2.0 / (lambda_c * sz)).max(jump_filter_gain(lambda_d) / sz)
}

/// ISS constants of the noisy estimator.
pub fn noisy_estimator_constants(inputs: &BoundInputs) -> Result<NoiseIssConstants> {
    let chain = Chain::evaluate(inputs)?;
    Ok(chain.noise)
}

/// One derived constant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub name: String,
    pub value: f64,
    pub formula: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundLedger {
    pub inputs: BoundInputs,
    pub entries: Vec<LedgerEntry>,
}

impl BoundLedger {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.value)
    }

    fn value(&self, name: &str) -> f64 {
        self.get(name).unwrap_or(f64::NAN)
    }

    pub fn kappa_g(&self) -> f64 {
        self.value("kappa_g")
    }
    pub fn lambda_g(&self) -> f64 {
        self.value("lambda_g")
    }

    /// Structural invariants that must hold for any valid input. Returns the failed ones.
    pub fn invariant_violations(&self) -> Vec<String> {
        let v = |n: &str| self.value(n);
        let mut bad = Vec::new();
        let mut check = |ok: bool, what: &str| {
            if !ok {
                bad.push(what.to_string());
            }
        };
        check(v("sigma") > 0.0 && v("sigma") < 1.0, "sigma in (0, 1)");
        check(v("kappa_0") >= 1.0, "kappa_0 >= 1");
        check(v("lambda_0") > 0.0, "lambda_0 > 0");
        check(v("p_M") >= v("p_m") && v("p_m") > 0.0, "p_M >= p_m > 0");
        check(v("omega") > 0.0, "omega > 0");
        check(v("kappa_g") >= 1.0, "kappa_g >= 1");
        check(v("lambda_g") > 0.0, "lambda_g > 0");
        check(
            v("rho_nu") >= v("rho") && v("rho_nu") >= v("rho_eps"),
            "rho_nu >= max{rho, rho_eps}",
        );
        bad
    }
}

struct Chain {
    entries: Vec<LedgerEntry>,
    noise: NoiseIssConstants,
}

impl Chain {
    fn evaluate(i: &BoundInputs) -> Result<Self> {
        i.validate()?;
        let mut entries = Vec::new();
        let mut put = |name: &str, value: f64, formula: &str, role: &str| {
            entries.push(LedgerEntry {
                name: name.into(),
                value,
                formula: formula.into(),
                role: role.into(),
            });
            value
        };

        let psi_m = put(
            "psi_M",
            regressor_filter_bound(i.psi_0, i.lambda_c, i.lambda_d, i.phi_max)?,
            "psi_0 + max{1/lambda_c, sqrt(2 lambda_d (2 - lambda_d) + 16) / (lambda_d (2 - lambda_d))} phi_M",
            "bound on |psi|",
        );
        let a_m = put("a_M", i.gamma_c * psi_m * psi_m, "gamma_c psi_M^2", "bound on |A|");
        let mu_0 = put(
            "mu_0",
            (i.gamma_c).min(1.0 / (2.0 * (i.gamma_d + psi_m * psi_m))) * i.mu,
            "min{gamma_c, 1 / (2 (gamma_d + psi_M^2))} mu",
            "excitation level of the error class",
        );
        let iss = error_class_constants(i.q_min, i.q_max, i.zeta, SigmaInputs { a_m, mu_0, delta: i.delta })?;
        put(
            "sigma",
            iss.sigma,
            "2 mu_0 / (1 + sqrt((a_M + 2)(Delta + 2)^3 (a_M (Delta + 2) + 1/2)))^2",
            "contraction per excitation window",
        );
        put("kappa_0", iss.kappa_0, "sqrt(1 / (1 - sigma))", "transition matrix overshoot");
        put(
            "lambda_0",
            iss.lambda_0,
            "-ln(1 - sigma) / (2 (Delta + 1))",
            "transition matrix decay rate",
        );
        let p_m = put("p_m", iss.p_m, "q_m", "Lyapunov lower bound");
        let p_big_m = put(
            "p_M",
            iss.p_big_m,
            "q_m + q_M kappa_0^2 / (2 lambda_0) + q_M kappa_0^2 e^{2 lambda_0} / (e^{2 lambda_0} - 1)",
            "Lyapunov upper bound",
        );
        let rho = put(
            "rho",
            iss.rho,
            "sqrt(2 p_M^3 / (q_m p_m zeta) (2 p_M / q_m + 1))",
            "disturbance gain",
        );
        let omega = put(
            "omega",
            iss.omega,
            "1/2 min{q_m (1 - zeta) / (2 p_M), -ln(1 - q_m (1 - zeta) / (2 p_M))}",
            "ISS decay rate",
        );
        let a = put(
            "a",
            (i.gamma_c * psi_m).max(1.0 / (2.0 * i.gamma_d.sqrt())),
            "max{gamma_c psi_M, 1 / (2 sqrt(gamma_d))}",
            "disturbance-to-filter-error gain",
        );
        let b = put(
            "b",
            chain_b(i.lambda_c, i.lambda_d)?,
            "1/2 min{lambda_c, -ln(1 - lambda_d (2 - lambda_d))}",
            "filter error decay rate used in the stability chain",
        );
        put(
            "b_filter_error",
            filter_error_rate(i.lambda_c, i.lambda_d)?,
            "1/2 min{2 lambda_c, -ln(1 - lambda_d (2 - lambda_d))}",
            "filter error decay rate as stated for the filter error alone",
        );
        let ratio = p_big_m / p_m;
        let kappa = put(
            "kappa",
            2.0 * ratio.max(a * rho * ratio.sqrt()),
            "2 max{p_M / p_m, a rho sqrt(p_M / p_m)}",
            "overshoot with decaying disturbance",
        );
        let lambda = put("lambda", 0.5 * omega.min(b), "1/2 min{omega, b}", "decay rate with decaying disturbance");
        put("kappa_g", 3f64.sqrt() * kappa, "sqrt(3) kappa", "estimator overshoot");
        put("lambda_g", lambda.min(b), "min{lambda, b}", "estimator decay rate");

        let kappa_nu = put("kappa_nu", (2.0 * ratio).sqrt(), "sqrt(2 p_M / p_m)", "noisy estimator overshoot");
        let lambda_eps = put(
            "lambda_eps",
            lambda_eps(i.lambda_c, i.lambda_d, i.zeta),
            "1/2 min{lambda_c (1 - zeta), -ln(1 - (lambda_d / 2)(2 - lambda_d)(1 - zeta))}",
            "noisy filter error decay rate",
        );
        let rho_eps = put(
            "rho_eps",
            rho_eps(i.lambda_c, i.lambda_d, i.zeta),
            "max{2 / (lambda_c sqrt(zeta)), sqrt(2 lambda_d (2 - lambda_d) + 16) / (lambda_d (2 - lambda_d) sqrt(zeta))}",
            "noisy filter error gain",
        );
        let lambda_nu = put("lambda_nu", omega.min(lambda_eps), "min{omega, lambda_eps}", "noisy estimator decay rate");
        let rho_nu = put(
            "rho_nu",
            2f64.sqrt() * rho.max(rho_eps),
            "sqrt(2) max{rho, rho_eps}",
            "noisy estimator disturbance gain",
        );
        let noise_gain = put(
            "noise_gain",
            rho_eps * (i.lambda_c + i.lipschitz_c).max(1.0 - i.lambda_d + i.lipschitz_d) + 1.0,
            "rho_eps max{lambda_c + L_c, 1 - lambda_d + L_d} + 1",
            "noise gain in the disturbance bounds",
        );
        Ok(Self {
            entries,
            noise: NoiseIssConstants {
                kappa_nu,
                lambda_nu,
                rho_nu,
                lambda_eps,
                rho_eps,
                noise_gain,
            },
        })
    }
}

/// Evaluates the full constant chain in dependency order.
pub fn estimator_constants(inputs: &BoundInputs) -> Result<BoundLedger> {
    let chain = Chain::evaluate(inputs)?;
    Ok(BoundLedger {
        inputs: *inputs,
        entries: chain.entries,
    })
}

/// Allowed numerical excess over an envelope: `absolute + relative * envelope`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeTolerance {
    pub absolute: f64,
    pub relative: f64,
}

impl Default for EnvelopeTolerance {
    fn default() -> Self {
        Self {
            absolute: 1e-9,
            relative: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeReport {
    pub kappa: f64,
    pub lambda: f64,
    pub initial_distance: f64,
    /// Largest `distance − envelope` over all samples; nonpositive when the envelope dominates.
    pub max_violation: f64,
    pub worst_point: HybridTimePoint,
    /// Largest `distance / envelope`, a measure of how loose the envelope is.
    pub max_ratio: f64,
    pub samples: usize,
    pub tolerance: EnvelopeTolerance,
    pub pass: bool,
}

/// Checks `distance(t,j) <= κ e^{−λ(t+j)} distance(0,0) + offset(t,j)` at
/// every sample of `arc`.
pub fn check_envelope<D, O>(
    arc: &HybridArc,
    mut distance: D,
    kappa: f64,
    lambda: f64,
    mut offset: O,
    tolerance: EnvelopeTolerance,
) -> EnvelopeReport
where
    D: FnMut(usize, HybridTimePoint, &[f64]) -> f64,
    O: FnMut(usize, HybridTimePoint) -> f64,
{
    let mut report = EnvelopeReport {
        kappa,
        lambda,
        initial_distance: 0.0,
        max_violation: f64::NEG_INFINITY,
        worst_point: HybridTimePoint::ORIGIN,
        max_ratio: 0.0,
        samples: arc.len(),
        tolerance,
        pass: true,
    };
    if arc.is_empty() {
        report.max_violation = 0.0;
        return report;
    }
    let d0 = distance(0, arc.point(0), arc.value(0));
    report.initial_distance = d0;
    for i in 0..arc.len() {
        let at = arc.point(i);
        let d = if i == 0 { d0 } else { distance(i, at, arc.value(i)) };
        let env = kappa * (-lambda * at.length()).exp() * d0 + offset(i, at);
        let excess = d - env;
        if excess > report.max_violation {
            report.max_violation = excess;
            report.worst_point = at;
        }
        if env > 0.0 {
            report.max_ratio = report.max_ratio.max(d / env);
        } else if d > 0.0 {
            report.max_ratio = f64::INFINITY;
        }
        if !(d <= env + tolerance.absolute + tolerance.relative * env.abs()) {
            report.pass = false;
        }
    }
    report
}
