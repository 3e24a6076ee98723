use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{sample, scalar_envelope, Check, EstimatorTrace, GainConfig, LyapunovConfig, NamedEnvelope, RunReport, ENVELOPE_SLACK};
use crate::bounds::{estimator_constants, BoundInputs, BoundLedger};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorState, EstimatorSystem, InputLaw, JumpRule, KnownModel, Plant};
use crate::exec::{simulate, ExecConfig, Termination};
use crate::hybrid_time::{HybridArc, HybridTimePoint};
use crate::linalg::spectral_norm;
use crate::pe::{certify_hybrid_pe, PECertificate};

pub fn rpm_to_rad_s(rpm: f64) -> f64 {
    rpm * 2.0 * PI / 60.0
}

pub fn rad_s_to_rpm(rad_s: f64) -> f64 {
    rad_s * 60.0 / (2.0 * PI)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Controller {
    /// PD law with the bias estimate fed forward.
    PdFeedforward,
    /// PD law plus an integral term frozen across thruster firings.
    PidBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpacecraftConfig {
    pub z_des: f64,
    pub omega_max_rpm: f64,
    pub j_s: f64,
    pub j_w: f64,
    /// Thruster torque `M` during a firing.
    pub thruster_torque: f64,
    /// Firing duration `δ`.
    pub firing_duration: f64,
    pub tau_star: f64,
    pub k_p: f64,
    pub k_d: f64,
    /// Integral gain of the PID comparison.
    pub k_i: f64,
    /// True bias torque.
    pub theta: f64,
    pub theta_hat0: f64,
    /// `(z, ż, Ω, τ_s)` at `(0,0)`; `η(0,0) = −x(0,0)`.
    pub x0: [f64; 4],
    pub gains: GainConfig,
    pub step: f64,
    pub t_end: f64,
    pub record_every: usize,
    pub jump_location_tol: f64,
    pub max_jumps: usize,
    pub pe_delta: f64,
    /// Pointing error is judged only outside this long after each jump.
    pub transient_window: f64,
    /// Horizon of the jump-free runs used to compare settling times.
    pub settling_horizon: f64,
    pub lyapunov: LyapunovConfig,
}

impl Default for SpacecraftConfig {
    fn default() -> Self {
        Self {
            z_des: 0.0,
            omega_max_rpm: 10000.0,
            j_s: 5000.0,
            j_w: 0.1,
            thruster_torque: -10.0,
            firing_duration: 9.5,
            tau_star: 10.0,
            k_p: 10.0,
            k_d: 1200.0,
            k_i: 4.8e-4,
            theta: 0.005,
            theta_hat0: 0.0,
            x0: [0.0; 4],
            gains: GainConfig {
                gamma_c: 0.0012,
                lambda_c: 0.001,
                gamma_d: 0.01,
                lambda_d: 0.5,
            },
            step: 0.05,
            t_end: 100_000.0,
            record_every: 20,
            jump_location_tol: 1e-10,
            max_jumps: 10_000,
            pe_delta: 1000.0,
            transient_window: 200.0,
            settling_horizon: 60_000.0,
            lyapunov: LyapunovConfig::default(),
        }
    }
}

impl SpacecraftConfig {
    pub fn omega_max(&self) -> f64 {
        rpm_to_rad_s(self.omega_max_rpm)
    }

    pub fn model(&self) -> SpacecraftModel {
        SpacecraftModel {
            omega_max: self.omega_max(),
            j_s: self.j_s,
            j_w: self.j_w,
            thruster_torque: self.thruster_torque,
            firing_duration: self.firing_duration,
            tau_star: self.tau_star,
            k_p: self.k_p,
            k_d: self.k_d,
        }
    }

    pub fn input(&self, controller: Controller) -> SpacecraftInput {
        SpacecraftInput {
            z_des: self.z_des,
            k_i: self.k_i,
            controller,
        }
    }
}

/// Single-axis spacecraft with one reaction wheel, `x = (z, ż, Ω, τ_s)`,
/// `u = (z_des, bias compensation)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpacecraftModel {
    pub omega_max: f64,
    pub j_s: f64,
    pub j_w: f64,
    pub thruster_torque: f64,
    pub firing_duration: f64,
    pub tau_star: f64,
    pub k_p: f64,
    pub k_d: f64,
}

impl SpacecraftModel {
    /// Wheel torque `α = −K_P(z_des − z) + K_D ż + compensation`.
    pub fn wheel_torque(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        -self.k_p * (u[0] - x[0]) + self.k_d * x[1] + u[1]
    }

    /// Jacobian of `f_c` in `x`; `f_c` is affine so this is constant.
    pub fn flow_jacobian(&self) -> DMatrix<f64> {
        let (js, jw) = (self.j_s, self.j_w);
        DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 1.0, 0.0, 0.0,
                -self.k_p / js, -self.k_d / js, 0.0, 0.0,
                self.k_p / jw, self.k_d / jw, 0.0, 0.0,
                0.0, 0.0, 0.0, 0.0,
            ],
        )
    }
}

impl KnownModel for SpacecraftModel {
    fn state_dim(&self) -> usize {
        4
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn f_c(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let a = self.wheel_torque(x, u);
        DVector::from_column_slice(&[x[1], -a / self.j_s, a / self.j_w, 1.0])
    }
    fn g_d(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        let kick = self.firing_duration * self.thruster_torque / self.j_s;
        DVector::from_column_slice(&[x[0], x[1] + kick, x[2], 0.0])
    }
    fn phi_c(&self, _at: HybridTimePoint) -> DMatrix<f64> {
        DMatrix::from_column_slice(4, 1, &[0.0, 1.0 / self.j_s, 0.0, 0.0])
    }
    fn phi_d(&self, _at: HybridTimePoint) -> DMatrix<f64> {
        DMatrix::from_column_slice(4, 1, &[0.0, self.firing_duration / self.j_s, 0.0, 0.0])
    }
    fn in_flow_set(&self, x: &DVector<f64>, _u: &DVector<f64>) -> bool {
        x[2] <= self.omega_max || x[3] <= self.tau_star
    }
    fn in_jump_set(&self, x: &DVector<f64>, _u: &DVector<f64>) -> bool {
        x[2] >= self.omega_max && x[3] >= self.tau_star
    }
}

/// Attitude controller feeding `u = (z_des, compensation)` to the plant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpacecraftInput {
    pub z_des: f64,
    pub k_i: f64,
    pub controller: Controller,
}

impl InputLaw for SpacecraftInput {
    fn state_dim(&self) -> usize {
        match self.controller {
            Controller::PdFeedforward => 0,
            Controller::PidBaseline => 1,
        }
    }
    fn input(&self, _at: HybridTimePoint, _x: &DVector<f64>, theta_hat: &DVector<f64>, c: &[f64]) -> DVector<f64> {
        let comp = match self.controller {
            Controller::PdFeedforward => theta_hat[0],
            Controller::PidBaseline => self.k_i * c[0],
        };
        DVector::from_column_slice(&[self.z_des, comp])
    }
    fn rate(&self, _at: HybridTimePoint, x: &DVector<f64>, _c: &[f64]) -> Vec<f64> {
        match self.controller {
            Controller::PdFeedforward => Vec::new(),
            Controller::PidBaseline => vec![x[0] - self.z_des],
        }
    }
}

/// State at a pre-jump sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpRecord {
    pub t: f64,
    pub j: usize,
    pub omega_rpm: f64,
    pub tau_s: f64,
    pub in_jump_set: bool,
}

#[derive(Debug, Clone)]
pub struct SpacecraftRun {
    pub config: SpacecraftConfig,
    pub controller: Controller,
    pub termination: Termination,
    pub trace: EstimatorTrace,
    pub pointing_error: HybridArc,
    pub rw_speed_rpm: HybridArc,
    pub bias_estimate: HybridArc,
    pub integrator: Option<HybridArc>,
    pub jumps: Vec<JumpRecord>,
    /// Largest `|z − z_des|` outside the post-jump transient windows.
    pub steady_pointing_error: f64,
    pub certificate: Option<PECertificate>,
    pub ledger: Option<BoundLedger>,
    pub envelope: Option<NamedEnvelope>,
}

fn simulate_spacecraft(
    cfg: &SpacecraftConfig,
    controller: Controller,
    h: f64,
    t_end: f64,
    record_every: usize,
) -> Result<(crate::exec::SimOutcome, crate::estimators::Layout)> {
    let model = cfg.model();
    let plant = Plant::new(model.clone(), DVector::from_element(1, cfg.theta))?;
    let input = cfg.input(controller);
    let sys = EstimatorSystem {
        model: &model,
        plant: &plant,
        input: &input,
        params: cfg.gains.params()?,
        noise: None,
        rule: JumpRule::Plant,
    };
    let layout = sys.layout();
    let x0 = DVector::from_column_slice(&cfg.x0);
    let s0 = EstimatorState::initial(x0.clone(), DVector::from_element(1, cfg.theta_hat0), -x0);
    let extra = vec![0.0; input.state_dim()];
    let mut ec = ExecConfig::new(h, t_end);
    ec.max_jumps = cfg.max_jumps;
    ec.jump_location_tol = cfg.jump_location_tol.min(h);
    ec.record_every = record_every.max(1);
    ec.min_jump_separation = Some(cfg.tau_star / 2.0);
    let out = simulate(&sys, &layout.pack(&s0, &extra), &ec)?;
    if out.termination == Termination::Stuck {
        return Err(Error::Divergence(format!(
            "spacecraft run left both flow and jump sets at {:?}",
            out.arc.domain().end_point()
        )));
    }
    Ok((out, layout))
}

pub fn run_spacecraft(cfg: &SpacecraftConfig, controller: Controller) -> Result<SpacecraftRun> {
    let (out, layout) = simulate_spacecraft(cfg, controller, cfg.step, cfg.t_end, cfg.record_every)?;
    let theta = DVector::from_element(1, cfg.theta);
    let model = cfg.model();
    let arc = out.arc;
    let l = layout;

    let pointing_error = arc.map(1, 1, |_, _, v| vec![v[0] - cfg.z_des]);
    let rw_speed_rpm = arc.map(1, 1, |_, _, v| vec![rad_s_to_rpm(v[2])]);
    let bias_estimate = arc.map(1, 1, |_, _, v| vec![v[l.theta_hat()][0]]);
    let integrator = (controller == Controller::PidBaseline).then(|| arc.map(1, 1, |_, _, v| vec![v[l.extra()][0]]));

    let u_dummy = DVector::zeros(2);
    let jumps: Vec<JumpRecord> = arc
        .jump_indices()
        .into_iter()
        .map(|(pre, _)| {
            let p = arc.point(pre);
            let x = DVector::from_column_slice(&arc.value(pre)[l.x()]);
            JumpRecord {
                t: p.t,
                j: p.j,
                omega_rpm: rad_s_to_rpm(x[2]),
                tau_s: x[3],
                in_jump_set: model.in_jump_set(&x, &u_dummy),
            }
        })
        .collect();

    let window = cfg.transient_window;
    let steady_pointing_error = (0..arc.len())
        .filter(|&i| {
            let t = arc.point(i).t;
            !jumps.iter().any(|jr| t >= jr.t && t < jr.t + window)
        })
        .map(|i| pointing_error.value(i)[0].abs())
        .fold(0.0, f64::max);

    let trace = EstimatorTrace::new(
        match controller {
            Controller::PdFeedforward => "pd_feedforward",
            Controller::PidBaseline => "pid_baseline",
        },
        arc,
        layout,
        &theta,
    );

    let psi_arc = trace.arc.map(4, 1, |_, _, v| v[l.psi()].to_vec());
    let certificate = if trace.arc.domain().length() >= cfg.pe_delta + 1.0 {
        Some(certify_hybrid_pe(&psi_arc, cfg.pe_delta)?)
    } else {
        None
    };
    let (ledger, envelope) = match &certificate {
        Some(c) if c.mu > 0.0 => {
            let ledger = estimator_constants(&bound_inputs(cfg, c.mu))?;
            let report = scalar_envelope(&trace.xi_norm, ledger.kappa_g(), ledger.lambda_g(), |_, _| 0.0, ENVELOPE_SLACK);
            let env = NamedEnvelope {
                bound: "estimator".into(),
                run: trace.label.clone(),
                report,
            };
            (Some(ledger), Some(env))
        }
        _ => (None, None),
    };

    Ok(SpacecraftRun {
        config: cfg.clone(),
        controller,
        termination: out.termination,
        trace,
        pointing_error,
        rw_speed_rpm,
        bias_estimate,
        integrator,
        jumps,
        steady_pointing_error,
        certificate,
        ledger,
        envelope,
    })
}

fn bound_inputs(cfg: &SpacecraftConfig, mu: f64) -> BoundInputs {
    let model = cfg.model();
    let at = HybridTimePoint::ORIGIN;
    BoundInputs {
        gamma_c: cfg.gains.gamma_c,
        lambda_c: cfg.gains.lambda_c,
        gamma_d: cfg.gains.gamma_d,
        lambda_d: cfg.gains.lambda_d,
        phi_max: spectral_norm(&model.phi_c(at)).max(spectral_norm(&model.phi_d(at))),
        psi_0: 0.0,
        delta: cfg.pe_delta,
        mu,
        q_min: cfg.lyapunov.q_min,
        q_max: cfg.lyapunov.q_max,
        zeta: cfg.lyapunov.zeta,
        lipschitz_c: spectral_norm(&model.flow_jacobian()),
        lipschitz_d: 1.0,
    }
}

impl SpacecraftRun {
    pub fn final_theta_hat(&self) -> f64 {
        self.bias_estimate.last()[0]
    }

    /// Shortest post-jump exclusion window after which `|z − z_des|` stays
    /// below `threshold` until the next jump.
    pub fn settling_after_jumps(&self, threshold: f64) -> f64 {
        let arc = &self.pointing_error;
        let mut worst = 0.0f64;
        for (k, jr) in self.jumps.iter().enumerate() {
            let next = self.jumps.get(k + 1).map_or(f64::INFINITY, |n| n.t);
            for i in 0..arc.len() {
                let t = arc.point(i).t;
                if t >= jr.t && t < next && arc.value(i)[0].abs() >= threshold {
                    worst = worst.max(t - jr.t);
                }
            }
        }
        worst
    }

    pub fn checks(&self) -> Vec<Check> {
        let mut out = Vec::new();
        if self.controller == Controller::PdFeedforward {
            let th = self.final_theta_hat();
            let rel = (th - self.config.theta).abs() / self.config.theta.abs().max(f64::MIN_POSITIVE);
            out.push(Check::new(
                "bias estimate within 1%",
                rel < 0.01,
                format!("final estimate {th}, relative error {rel:e}"),
            ));
        }
        out.push(Check::new(
            "pointing error outside transients",
            self.steady_pointing_error < 1e-3,
            format!(
                "max |z - z_des| = {:e} rad excluding {} s after each of {} jumps",
                self.steady_pointing_error,
                self.config.transient_window,
                self.jumps.len()
            ),
        ));
        let bad = self.jumps.iter().filter(|j| !j.in_jump_set).count();
        out.push(Check::new(
            "jumps only from the jump set",
            bad == 0,
            format!("{bad} of {} pre-jump samples outside the jump set", self.jumps.len()),
        ));
        if let Some(e) = &self.envelope {
            out.push(Check::new(
                &format!("envelope estimator on {}", e.run),
                e.report.pass,
                format!("max excess {:e} at {:?}", e.report.max_violation, e.report.worst_point),
            ));
        }
        out
    }

    pub fn report(&self) -> Result<RunReport> {
        let mut r = RunReport {
            scenario: format!("spacecraft/{}", self.trace.label),
            ..Default::default()
        };
        r.arc("pointing_error", self.pointing_error.clone());
        r.arc("rw_speed", self.rw_speed_rpm.clone());
        r.arc("bias_estimate", self.bias_estimate.clone());
        let theta = self.config.theta;
        r.arc("bias_error", self.bias_estimate.map(1, 1, |_, _, v| vec![theta - v[0]]));
        r.arc("xi_norm", self.trace.xi_norm.clone());
        if let Some(i) = &self.integrator {
            r.arc("integrator", i.clone());
        }
        r.document("jumps", &self.jumps)?;
        if let Some(c) = &self.certificate {
            r.document("pe_certificate", c)?;
        }
        if let Some(l) = &self.ledger {
            r.document("bound_ledger", l)?;
        }
        if let Some(e) = &self.envelope {
            r.document("envelope_estimator", &[e])?;
        }
        r.checks = self.checks();
        Ok(r)
    }
}

/// Settling time of the pointing error during pure flow: jumps are
/// disabled and the result is the last time `|z − z_des|` exceeds
/// `fraction` of its peak.
pub fn flow_settling_time(cfg: &SpacecraftConfig, controller: Controller, fraction: f64) -> Result<f64> {
    let mut c = cfg.clone();
    c.omega_max_rpm = f64::INFINITY;
    let (out, _) = simulate_spacecraft(&c, controller, c.step, c.settling_horizon, c.record_every)?;
    let arc = out.arc;
    let err = |i: usize| (arc.value(i)[0] - c.z_des).abs();
    let peak = (0..arc.len()).map(err).fold(0.0, f64::max);
    let last = (0..arc.len()).rev().find(|&i| err(i) > fraction * peak);
    match last {
        Some(i) if i + 1 < arc.len() => Ok(arc.point(i + 1).t),
        Some(_) => Err(Error::Config(format!(
            "pointing error has not settled to {fraction} of its peak within {} s",
            c.settling_horizon
        ))),
        None => Ok(0.0),
    }
}

/// Largest change of the final bias estimate when the step is halved.
pub fn spacecraft_refinement(cfg: &SpacecraftConfig, controller: Controller) -> Result<f64> {
    let final_at = |h: f64, every: usize| -> Result<f64> {
        let (out, layout) = simulate_spacecraft(cfg, controller, h, cfg.t_end, every)?;
        Ok(sample(&layout, out.arc.last()).theta_hat[0])
    };
    let coarse = final_at(cfg.step, cfg.record_every)?;
    let fine = final_at(cfg.step / 2.0, cfg.record_every * 2)?;
    Ok((coarse - fine).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rpm_round_trip() {
        let cfg = SpacecraftConfig::default();
        assert!((rad_s_to_rpm(cfg.omega_max()) - cfg.omega_max_rpm).abs() < 1e-9);
        assert!((cfg.omega_max() - 1047.1975511965977).abs() < 1e-9);
    }

    #[test]
    fn feedforward_equilibrium_at_setpoint() {
        let cfg = SpacecraftConfig::default();
        let model = cfg.model();
        let input = cfg.input(Controller::PdFeedforward);
        let x = DVector::from_column_slice(&[cfg.z_des, 0.0, 100.0, 3.0]);
        let th = DVector::from_element(1, cfg.theta);
        let u = input.input(HybridTimePoint::ORIGIN, &x, &th, &[]);
        let zdd = model.f_c(&x, &u) + model.phi_c(HybridTimePoint::ORIGIN) * &th;
        assert_eq!(zdd[0], 0.0);
        assert!((zdd[1] * cfg.j_s).abs() < 1e-12);
    }

    #[test]
    fn flow_and_jump_sets() {
        let m = SpacecraftConfig::default().model();
        let u = DVector::zeros(2);
        let at = |om: f64, tau: f64| DVector::from_column_slice(&[0.0, 0.0, om, tau]);
        assert!(m.in_jump_set(&at(m.omega_max, m.tau_star), &u));
        assert!(m.in_flow_set(&at(m.omega_max, m.tau_star), &u));
        assert!(!m.in_jump_set(&at(m.omega_max - 1.0, 100.0), &u));
        assert!(!m.in_jump_set(&at(2.0 * m.omega_max, 1.0), &u));
        assert!(!m.in_flow_set(&at(2.0 * m.omega_max, 11.0), &u));
    }

    #[test]
    fn thruster_kick_and_timer_reset() {
        let cfg = SpacecraftConfig::default();
        let m = cfg.model();
        let x = DVector::from_column_slice(&[0.1, 0.2, 1100.0, 15.0]);
        let th = DVector::from_element(1, cfg.theta);
        let plus = m.g_d(&x, &DVector::zeros(2)) + m.phi_d(HybridTimePoint::ORIGIN) * &th;
        let expected = 0.2 + cfg.firing_duration / cfg.j_s * (cfg.thruster_torque + cfg.theta);
        assert!((plus[1] - expected).abs() < 1e-15);
        assert_eq!(plus[3], 0.0);
        assert_eq!(plus[2], 1100.0);
    }

    #[test]
    fn pid_integrates_pointing_error() {
        let cfg = SpacecraftConfig::default();
        let inp = cfg.input(Controller::PidBaseline);
        let x = DVector::from_column_slice(&[0.01, 0.0, 0.0, 0.0]);
        assert_eq!(inp.state_dim(), 1);
        assert_eq!(inp.rate(HybridTimePoint::ORIGIN, &x, &[2.0]), vec![0.01]);
        assert_eq!(inp.reset(HybridTimePoint::ORIGIN, &x, &[2.0]), vec![2.0]);
        let u = inp.input(HybridTimePoint::ORIGIN, &x, &DVector::zeros(1), &[2.0]);
        assert_eq!(u[1], cfg.k_i * 2.0);
    }
}
