use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{sample, scalar_envelope, Check, EstimatorTrace, GainConfig, LyapunovConfig, NamedEnvelope, RunReport, ENVELOPE_SLACK};
use crate::bounds::{
    estimator_constants, filter_error_rate, noisy_estimator_constants, regressor_filter_bound, BoundInputs,
    BoundLedger, NoiseIssConstants,
};
use crate::error::{Error, Result};
use crate::estimators::{
    ct_gradient_run, dt_gradient_run, error_class_run, recorded_error_signals, CtSignals, DtSignals,
    EstimatorParams, EstimatorState, EstimatorSystem, GradientInit, JumpRule, KnownModel, Layout, Noise, Plant,
    TimeInput,
};
use crate::exec::{simulate, ExecConfig, Termination};
use crate::hybrid_time::{ArcBuilder, HybridArc, HybridTimePoint};
use crate::linalg::{lambda_min, spectral_norm};
use crate::pe::{certify_hybrid_pe, hybrid_pe_gramian, PECertificate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotivationalConfig {
    pub theta: [f64; 2],
    pub x0: [f64; 2],
    pub theta_hat0: [f64; 2],
    /// Jump regressor, row by row.
    pub phi_d: [[f64; 2]; 2],
    pub gains: GainConfig,
    /// `η(0,0)` for each initial condition; `ψ(0,0) = 0` throughout.
    pub eta0_cases: Vec<[f64; 2]>,
    /// Number of sawtooth periods (and jumps) simulated.
    pub periods: usize,
    pub step: f64,
    pub jump_location_tol: f64,
    /// `ν(t,j) = amplitude · sin(frequency · t) (1, 1)`.
    pub noise_amplitude: f64,
    pub noise_frequency: f64,
    pub pe_delta: f64,
    pub lyapunov: LyapunovConfig,
}

impl Default for MotivationalConfig {
    fn default() -> Self {
        Self {
            theta: [1.0, 1.0],
            x0: [3.0, 6.0],
            theta_hat0: [0.0, 0.0],
            phi_d: [[1.0, 2.0], [2.0, 4.0]],
            gains: GainConfig {
                gamma_c: 1.0,
                lambda_c: 0.1,
                gamma_d: 1.0,
                lambda_d: 0.5,
            },
            eta0_cases: vec![[-3.0, -6.0], [-1.5, -3.0]],
            periods: 20,
            step: 0.001,
            jump_location_tol: 1e-12,
            noise_amplitude: 1.0,
            noise_frequency: 2.0,
            pe_delta: 2.0 * PI + 1.0,
            lyapunov: LyapunovConfig::default(),
        }
    }
}

fn v2(a: [f64; 2]) -> DVector<f64> {
    DVector::from_column_slice(&a)
}

impl MotivationalConfig {
    pub fn model(&self) -> SawtoothModel {
        let p = self.phi_d;
        SawtoothModel {
            phi_d: DMatrix::from_row_slice(2, 2, &[p[0][0], p[0][1], p[1][0], p[1][1]]),
        }
    }

    pub fn theta(&self) -> DVector<f64> {
        v2(self.theta)
    }

    pub fn t_end(&self) -> f64 {
        2.0 * PI * self.periods as f64
    }

    /// Constant-chain inputs for this example at excitation level `mu`.
    pub fn bound_inputs(&self, mu: f64) -> BoundInputs {
        let phi_max = spectral_norm(&self.model().phi_d).max(1.0);
        BoundInputs {
            gamma_c: self.gains.gamma_c,
            lambda_c: self.gains.lambda_c,
            gamma_d: self.gains.gamma_d,
            lambda_d: self.gains.lambda_d,
            phi_max,
            psi_0: 0.0,
            delta: self.pe_delta,
            mu,
            q_min: self.lyapunov.q_min,
            q_max: self.lyapunov.q_max,
            zeta: self.lyapunov.zeta,
            lipschitz_c: 0.0,
            lipschitz_d: 0.0,
        }
    }

    fn noise(&self) -> Box<Noise> {
        let (a, w) = (self.noise_amplitude, self.noise_frequency);
        Box::new(move |at: HybridTimePoint| DVector::from_element(2, a * (w * at.t).sin()))
    }
}

/// `x' = φ_c θ`, `x+ = φ_d θ`, flowing while `u = t − 2πj ≤ 2π`.
#[derive(Debug, Clone)]
pub struct SawtoothModel {
    pub phi_d: DMatrix<f64>,
}

impl KnownModel for SawtoothModel {
    fn state_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn f_c(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(2)
    }
    fn g_d(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(2)
    }
    fn phi_c(&self, at: HybridTimePoint) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[at.t.sin(), 0.0, 0.0, 0.0])
    }
    fn phi_d(&self, _at: HybridTimePoint) -> DMatrix<f64> {
        self.phi_d.clone()
    }
    fn in_flow_set(&self, _x: &DVector<f64>, u: &DVector<f64>) -> bool {
        u[0] <= 2.0 * PI
    }
    fn in_jump_set(&self, _x: &DVector<f64>, u: &DVector<f64>) -> bool {
        u[0] >= 2.0 * PI
    }
}

fn sawtooth(at: HybridTimePoint) -> DVector<f64> {
    DVector::from_element(1, at.t - 2.0 * PI * at.j as f64)
}

fn simulate_case(
    cfg: &MotivationalConfig,
    eta0: [f64; 2],
    noise: Option<&Noise>,
    h: f64,
) -> Result<(HybridArc, Layout)> {
    let model = cfg.model();
    let plant = Plant::new(model.clone(), cfg.theta())?;
    let input = TimeInput(sawtooth);
    let sys = EstimatorSystem {
        model: &model,
        plant: &plant,
        input: &input,
        params: cfg.gains.params()?,
        noise,
        rule: JumpRule::Plant,
    };
    let layout = sys.layout();
    let s0 = EstimatorState::initial(v2(cfg.x0), v2(cfg.theta_hat0), v2(eta0));
    let mut ec = ExecConfig::new(h, cfg.t_end() + h);
    ec.max_jumps = cfg.periods;
    ec.jump_location_tol = cfg.jump_location_tol.min(h);
    let out = simulate(&sys, &layout.pack(&s0, &[]), &ec)?;
    if out.termination == Termination::Stuck {
        return Err(Error::Divergence(format!(
            "sawtooth run left both flow and jump sets at {:?}",
            out.arc.domain().end_point()
        )));
    }
    Ok((out.arc, layout))
}

/// `d` and `d_ε` sampled along a noisy run, as scalar norm arcs.
fn noise_disturbances(
    cfg: &MotivationalConfig,
    trace: &EstimatorTrace,
    params: &EstimatorParams,
    noise: &Noise,
) -> (HybridArc, HybridArc) {
    let model = cfg.model();
    let theta = cfg.theta();
    let arc = &trace.arc;
    let l = trace.layout;
    let d = arc.map(1, 1, |i, at, v| {
        if arc.is_pre_jump(i) {
            let post = sample(&l, arc.value(i + 1));
            let nu_plus = noise(HybridTimePoint::new(at.t, at.j + 1));
            let n = spectral_norm(&post.psi);
            let dd = -(post.psi.transpose() * (post.epsilon(&theta) + nu_plus)) / (params.gamma_d + n * n);
            vec![dd.norm()]
        } else {
            let s = sample(&l, v);
            let dc = -(s.psi.transpose() * (s.epsilon(&theta) + noise(at))) * params.gamma_c;
            vec![dc.norm()]
        }
    });
    let d_eps = arc.map(1, 1, |i, at, v| {
        let s = sample(&l, v);
        let u = sawtooth(at);
        let nu = noise(at);
        let noisy = &s.x + &nu;
        let alpha = if arc.is_pre_jump(i) {
            &nu * (1.0 - params.lambda_d) + model.g_d(&s.x, &u) - model.g_d(&noisy, &u)
        } else {
            &nu * -params.lambda_c + model.f_c(&s.x, &u) - model.f_c(&noisy, &u)
        };
        vec![alpha.norm()]
    });
    (d, d_eps)
}

/// Everything produced by one motivational run.
#[derive(Debug, Clone)]
pub struct MotivationalRun {
    pub config: MotivationalConfig,
    pub cases: Vec<EstimatorTrace>,
    pub noisy: Vec<EstimatorTrace>,
    /// `ρ_ν d_ν(t,j)` along each noisy run.
    pub noise_offsets: Vec<HybridArc>,
    pub ct_error: Option<HybridArc>,
    pub dt_error: Option<HybridArc>,
    pub certificate: PECertificate,
    /// Smallest eigenvalue of the Gramian over the single window `(0,0) → (t_1, 1)`.
    pub first_window_mu: f64,
    pub ledger: BoundLedger,
    pub noise_constants: NoiseIssConstants,
    pub envelopes: Vec<NamedEnvelope>,
    /// Sup-norm gap between `θ̃` and the error-class replay, per noise-free case.
    pub oracle_gaps: Vec<f64>,
}

impl MotivationalRun {
    pub fn envelope(&self, bound: &str, run: &str) -> Option<&NamedEnvelope> {
        self.envelopes.iter().find(|e| e.bound == bound && e.run == run)
    }

    pub fn envelopes_for(&self, bound: &str) -> impl Iterator<Item = &NamedEnvelope> {
        let bound = bound.to_string();
        self.envelopes.iter().filter(move |e| e.bound == bound)
    }

    pub fn report(&self) -> Result<RunReport> {
        let mut r = RunReport {
            scenario: "motivational".into(),
            ..Default::default()
        };
        for (k, c) in self.cases.iter().enumerate() {
            let suffix = if k == 0 { String::new() } else { format!("_{}", c.label) };
            r.arc(&format!("theta_err_hybrid{suffix}"), c.theta_err.clone());
            r.arc(&format!("xi_norm_{}", c.label), c.xi_norm.clone());
            r.arc(&format!("eps_norm_{}", c.label), c.eps_norm.clone());
            r.arc(&format!("psi_norm_{}", c.label), c.psi_norm.clone());
        }
        for (c, off) in self.noisy.iter().zip(&self.noise_offsets) {
            r.arc(&format!("theta_err_{}", c.label), c.theta_err.clone());
            r.arc(&format!("xi_norm_{}", c.label), c.xi_norm.clone());
            r.arc(&format!("iss_offset_{}", c.label), off.clone());
        }
        if let Some(a) = &self.ct_error {
            r.arc("theta_err_ct", a.clone());
        }
        if let Some(a) = &self.dt_error {
            r.arc("theta_err_dt", a.clone());
        }
        r.document(
            "pe_certificate",
            &serde_json::json!({
                "certificate": self.certificate,
                "first_window_mu": self.first_window_mu,
            }),
        )?;
        r.document("bound_ledger", &self.ledger)?;
        for (bound, file) in [
            ("estimator", "envelope_estimator"),
            ("filter_error", "envelope_filter_error"),
            ("regressor", "envelope_regressor"),
            ("noise_iss", "envelope_noise_iss"),
        ] {
            let list: Vec<_> = self.envelopes_for(bound).collect();
            if !list.is_empty() {
                r.document(file, &list)?;
            }
        }
        r.document(
            "error_class_oracle",
            &serde_json::json!({ "runs": self.cases.iter().map(|c| &c.label).collect::<Vec<_>>(), "sup_gap": self.oracle_gaps }),
        )?;
        r.checks = self.checks();
        Ok(r)
    }

    pub fn checks(&self) -> Vec<Check> {
        let mut out = Vec::new();
        for e in &self.envelopes {
            out.push(Check::new(
                &format!("envelope {} on {}", e.bound, e.run),
                e.report.pass,
                format!("max excess {:e} at {:?}", e.report.max_violation, e.report.worst_point),
            ));
        }
        let gap = self.oracle_gaps.iter().cloned().fold(0.0, f64::max);
        out.push(Check::new(
            "error-class replay matches estimator",
            gap < 1e-8,
            format!("sup gap {gap:e}"),
        ));
        if let Some(c) = self.cases.first() {
            let reached = c.first_length_below(&c.xi_norm, 1e-2);
            out.push(Check::new(
                "hybrid estimator converges",
                reached.is_some_and(|l| l <= 120.0),
                format!("|xi| < 1e-2 first at hybrid length {reached:?}"),
            ));
        }
        for (name, arc) in [("continuous-time", &self.ct_error), ("discrete-time", &self.dt_error)] {
            if let Some(a) = arc {
                let last = a.last()[0];
                out.push(Check::new(
                    &format!("{name} baseline stalls"),
                    last > 0.1,
                    format!("final |theta error| {last}"),
                ));
            }
        }
        out
    }
}

/// Continuous-time gradient baseline on the signals obtained by ignoring the resets.
pub fn motivational_ct_baseline(cfg: &MotivationalConfig) -> Result<HybridArc> {
    let model = cfg.model();
    let theta = cfg.theta();
    let (x0, th1) = (cfg.x0, cfg.theta[0]);
    let phi_c = |t: f64| model.phi_c(HybridTimePoint::new(t, 0));
    let x = move |t: f64| DVector::from_column_slice(&[x0[0] + th1 * (1.0 - t.cos()), x0[1]]);
    let f_c = |_: &DVector<f64>, _: f64| DVector::zeros(2);
    let sig = CtSignals {
        phi_c: &phi_c,
        x: &x,
        f_c: &f_c,
    };
    let init = GradientInit {
        theta_hat: v2(cfg.theta_hat0),
        psi: DMatrix::zeros(2, 2),
        eta: -x(0.0),
    };
    let run = ct_gradient_run(&sig, &cfg.gains.params()?, &init, cfg.t_end(), cfg.step)?;
    Ok(run.theta_hat.map(1, 1, |_, _, v| vec![(DVector::from_column_slice(v) - &theta).norm()]))
}

/// Discrete-time gradient baseline on the jump-only signals.
pub fn motivational_dt_baseline(cfg: &MotivationalConfig) -> Result<HybridArc> {
    let model = cfg.model();
    let theta = cfg.theta();
    let after = &model.phi_d * &theta;
    let x0 = v2(cfg.x0);
    let phi_d = |_: usize| model.phi_d.clone();
    let x = |j: usize| if j == 0 { x0.clone() } else { after.clone() };
    let g_d = |_: &DVector<f64>, _: usize| DVector::zeros(2);
    let sig = DtSignals {
        phi_d: &phi_d,
        x: &x,
        g_d: &g_d,
    };
    let init = GradientInit {
        theta_hat: v2(cfg.theta_hat0),
        psi: DMatrix::zeros(2, 2),
        eta: -x(0),
    };
    let run = dt_gradient_run(&sig, &cfg.gains.params()?, &init, cfg.periods)?;
    let mut b = ArcBuilder::with_capacity(1, 1, run.theta_hat.len());
    for (j, th) in run.theta_hat.iter().enumerate() {
        b.push(HybridTimePoint::new(0.0, j), &[(th - &theta).norm()])?;
    }
    b.finish(false)
}

/// Runs the hybrid estimator on every configured initial condition and
/// checks it against the closed-form constants.
pub fn run_motivational(cfg: &MotivationalConfig, with_baselines: bool, with_noise: bool) -> Result<MotivationalRun> {
    if cfg.eta0_cases.is_empty() {
        return Err(Error::Config("motivational.eta0_cases must not be empty".into()));
    }
    let params = cfg.gains.params()?;
    let theta = cfg.theta();
    let model = cfg.model();

    let mut cases = Vec::new();
    for (k, eta0) in cfg.eta0_cases.iter().enumerate() {
        let (arc, layout) = simulate_case(cfg, *eta0, None, cfg.step)?;
        cases.push(EstimatorTrace::new(&format!("case{}", k + 1), arc, layout, &theta));
    }

    let first = &cases[0];
    let l = first.layout;
    let psi_arc = first.arc.map(2, 2, |_, _, v| v[l.psi()].to_vec());
    let certificate = certify_hybrid_pe(&psi_arc, cfg.pe_delta)?;
    let first_window_mu = match first.arc.domain().jump_times().get(1) {
        Some(&t1) if first.arc.domain().jump_count() >= 1 => {
            lambda_min(&hybrid_pe_gramian(&psi_arc, HybridTimePoint::ORIGIN, HybridTimePoint::new(t1, 1))?)
        }
        _ => f64::NAN,
    };

    let inputs = cfg.bound_inputs(certificate.mu);
    let ledger = estimator_constants(&inputs)?;
    let noise_constants = noisy_estimator_constants(&inputs)?;
    let b = filter_error_rate(params.lambda_c, params.lambda_d)?;
    let psi_m = regressor_filter_bound(inputs.psi_0, params.lambda_c, params.lambda_d, inputs.phi_max)?;

    let mut envelopes = Vec::new();
    let mut oracle_gaps = Vec::new();
    for c in &cases {
        let mut push = |bound: &str, report| {
            envelopes.push(NamedEnvelope {
                bound: bound.into(),
                run: c.label.clone(),
                report,
            })
        };
        push("filter_error", scalar_envelope(&c.eps_norm, 1.0, b, |_, _| 0.0, ENVELOPE_SLACK));
        push("regressor", scalar_envelope(&c.psi_norm, 0.0, 0.0, |_, _| psi_m, ENVELOPE_SLACK));
        push(
            "estimator",
            scalar_envelope(&c.xi_norm, ledger.kappa_g(), ledger.lambda_g(), |_, _| 0.0, ENVELOPE_SLACK),
        );

        let signals = recorded_error_signals(&c.arc, c.layout, &model, &params, &theta)?;
        let replay = error_class_run(&signals, &(&theta - v2(cfg.theta_hat0)), c.arc.domain(), cfg.step)?;
        oracle_gaps.push(replay_gap(&replay, c, &theta)?);
    }

    let mut noisy = Vec::new();
    let mut noise_offsets = Vec::new();
    if with_noise {
        let nu = cfg.noise();
        for (k, eta0) in cfg.eta0_cases.iter().enumerate() {
            let (arc, layout) = simulate_case(cfg, *eta0, Some(&*nu), cfg.step)?;
            let trace = EstimatorTrace::new(&format!("noisy_case{}", k + 1), arc, layout, &theta);
            let (d, d_eps) = noise_disturbances(cfg, &trace, &params, &*nu);
            let (sd, se) = (d.running_sup(), d_eps.running_sup());
            let rho = noise_constants.rho_nu;
            let offset = d.map(1, 1, |i, _, _| vec![rho * (sd[i] * sd[i] + se[i] * se[i]).sqrt()]);
            let report = scalar_envelope(
                &trace.xi_norm,
                noise_constants.kappa_nu,
                noise_constants.lambda_nu,
                |i, _| offset.value(i)[0],
                ENVELOPE_SLACK,
            );
            envelopes.push(NamedEnvelope {
                bound: "noise_iss".into(),
                run: trace.label.clone(),
                report,
            });
            noisy.push(trace);
            noise_offsets.push(offset);
        }
    }

    let (ct_error, dt_error) = if with_baselines {
        (Some(motivational_ct_baseline(cfg)?), Some(motivational_dt_baseline(cfg)?))
    } else {
        (None, None)
    };

    Ok(MotivationalRun {
        config: cfg.clone(),
        cases,
        noisy,
        noise_offsets,
        ct_error,
        dt_error,
        certificate,
        first_window_mu,
        ledger,
        noise_constants,
        envelopes,
        oracle_gaps,
    })
}

fn replay_gap(replay: &HybridArc, c: &EstimatorTrace, theta: &DVector<f64>) -> Result<f64> {
    if replay.len() != c.arc.len() {
        return Err(Error::Dimension(format!(
            "error-class replay has {} samples, estimator run has {}",
            replay.len(),
            c.arc.len()
        )));
    }
    let mut gap = 0.0f64;
    for i in 0..replay.len() {
        let (a, b) = (replay.point(i), c.arc.point(i));
        if a.j != b.j || (a.t - b.t).abs() > 1e-9 {
            return Err(Error::Dimension(format!("replay sample {i} at {a:?}, estimator at {b:?}")));
        }
        let theta_err = theta - sample(&c.layout, c.arc.value(i)).theta_hat;
        gap = gap.max((theta_err - replay.vector(i)).norm());
    }
    Ok(gap)
}

/// Final `θ̂` per initial condition at steps `h` and `h/2`; returns the largest change.
pub fn motivational_refinement(cfg: &MotivationalConfig) -> Result<f64> {
    let mut worst = 0.0f64;
    for eta0 in &cfg.eta0_cases {
        let final_at = |h: f64| -> Result<DVector<f64>> {
            let (arc, layout) = simulate_case(cfg, *eta0, None, h)?;
            Ok(sample(&layout, arc.last()).theta_hat)
        };
        let coarse = final_at(cfg.step)?;
        let fine = final_at(cfg.step / 2.0)?;
        worst = worst.max((coarse - fine).norm());
    }
    Ok(worst)
}
