//! The two case studies wired end to end: a sawtooth plant whose regressors
//! are only jointly exciting, and a reaction-wheel spacecraft with momentum
//! dumping. Each run produces a [`RunReport`] that [`emit_report`] writes out.

mod motivational;
mod spacecraft;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bounds::{check_envelope, BoundInputs, EnvelopeReport, EnvelopeTolerance};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorParams, Layout};
use crate::hybrid_time::HybridArc;

pub use motivational::{
    motivational_ct_baseline, motivational_dt_baseline, motivational_refinement, run_motivational, MotivationalConfig, MotivationalRun, SawtoothModel,
};
pub use spacecraft::{
    flow_settling_time, rad_s_to_rpm, rpm_to_rad_s, run_spacecraft, spacecraft_refinement, Controller,
    JumpRecord, SpacecraftConfig, SpacecraftInput, SpacecraftModel, SpacecraftRun,
};

/// Estimator gains as they appear in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainConfig {
    pub gamma_c: f64,
    pub lambda_c: f64,
    pub gamma_d: f64,
    pub lambda_d: f64,
}

impl GainConfig {
    pub fn params(&self) -> Result<EstimatorParams> {
        EstimatorParams::new(self.gamma_c, self.lambda_c, self.gamma_d, self.lambda_d)
    }
}

/// Free parameters of the Lyapunov construction behind the stability constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LyapunovConfig {
    pub q_min: f64,
    pub q_max: f64,
    pub zeta: f64,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self {
            q_min: 1.0,
            q_max: 1.0,
            zeta: 0.5,
        }
    }
}

/// Top-level experiment config. Every field has a built-in default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub motivational: MotivationalConfig,
    pub spacecraft: SpacecraftConfig,
    /// Inputs for a standalone constant-chain evaluation.
    pub bounds: Option<BoundInputs>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// `[bounds]` if present, else the motivational inputs with the
    /// excitation level the sawtooth example is usually quoted with.
    pub fn bound_inputs(&self) -> BoundInputs {
        self.bounds.unwrap_or_else(|| self.motivational.bound_inputs(5.1))
    }
}

/// Scalar arc stored under `arc_<name>.csv`.
#[derive(Debug, Clone)]
pub struct NamedArc {
    pub name: String,
    pub arc: HybridArc,
}

/// One pass/fail verdict of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, pass: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            pass,
            detail,
        }
    }
}

/// Envelope check tagged with what it bounds and on which run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedEnvelope {
    pub bound: String,
    pub run: String,
    pub report: EnvelopeReport,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub scenario: String,
    pub arcs: Vec<NamedArc>,
    /// JSON documents written as `<name>.json`.
    pub documents: Vec<(String, serde_json::Value)>,
    pub checks: Vec<Check>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn arc(&mut self, name: &str, arc: HybridArc) {
        self.arcs.push(NamedArc { name: name.into(), arc });
    }

    fn document<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.documents.push((name.into(), serde_json::to_value(value)?));
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    scenario: &'a str,
    files: Vec<String>,
    passed: bool,
    checks: &'a [Check],
}

/// Writes every arc as CSV, every document as JSON, a long-format
/// `series.csv` (series, t, j, value) and `manifest.json`. Returns the
/// written paths.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for named in &report.arcs {
        let name = format!("arc_{}.csv", named.name);
        named.arc.write_csv(fs::File::create(dir.join(&name))?)?;
        files.push(name);
    }
    for (stem, value) in &report.documents {
        let name = format!("{stem}.json");
        let mut f = fs::File::create(dir.join(&name))?;
        serde_json::to_writer_pretty(&mut f, value)?;
        writeln!(f)?;
        files.push(name);
    }
    if !report.arcs.is_empty() {
        let name = "series.csv".to_string();
        let mut w = csv::Writer::from_path(dir.join(&name))?;
        w.write_record(["series", "t", "j", "value"])?;
        for named in &report.arcs {
            let arc = &named.arc;
            for c in 0..arc.width() {
                let series = if arc.width() == 1 {
                    named.name.clone()
                } else {
                    format!("{}[{c}]", named.name)
                };
                for i in 0..arc.len() {
                    let p = arc.point(i);
                    w.write_record([
                        series.as_str(),
                        &p.t.to_string(),
                        &p.j.to_string(),
                        &arc.value(i)[c].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        files.push(name);
    }
    files.sort();
    let manifest = Manifest {
        scenario: &report.scenario,
        files: files.clone(),
        passed: report.passed(),
        checks: &report.checks,
    };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    let mut paths: Vec<PathBuf> = files.iter().map(|n| dir.join(n)).collect();
    paths.push(dir.join("manifest.json"));
    Ok(paths)
}

/// `x`, `θ̂`, `ψ`, `η` pulled out of a stacked sample.
pub(crate) struct Sample {
    pub x: DVector<f64>,
    pub theta_hat: DVector<f64>,
    pub psi: nalgebra::DMatrix<f64>,
    pub eta: DVector<f64>,
}

pub(crate) fn sample(layout: &Layout, v: &[f64]) -> Sample {
    let s = layout.unpack(v);
    Sample {
        x: s.x,
        theta_hat: s.theta_hat,
        psi: s.psi,
        eta: s.eta,
    }
}

impl Sample {
    pub fn epsilon(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.x + &self.eta - &self.psi * theta
    }

    /// `√(|θ̂ − θ|² + |ε|²)`, the distance to the target set.
    pub fn distance(&self, theta: &DVector<f64>) -> f64 {
        let e = (&self.theta_hat - theta).norm_squared() + self.epsilon(theta).norm_squared();
        e.sqrt()
    }
}

/// Scalar arcs derived from one stacked estimator run.
#[derive(Debug, Clone)]
pub struct EstimatorTrace {
    pub label: String,
    pub arc: HybridArc,
    pub layout: Layout,
    pub theta_err: HybridArc,
    pub eps_norm: HybridArc,
    pub xi_norm: HybridArc,
    pub psi_norm: HybridArc,
}

impl EstimatorTrace {
    pub(crate) fn new(label: &str, arc: HybridArc, layout: Layout, theta: &DVector<f64>) -> Self {
        let l = layout;
        let theta_err = arc.map(1, 1, |_, _, v| vec![(sample(&l, v).theta_hat - theta).norm()]);
        let eps_norm = arc.map(1, 1, |_, _, v| vec![sample(&l, v).epsilon(theta).norm()]);
        let xi_norm = arc.map(1, 1, |_, _, v| vec![sample(&l, v).distance(theta)]);
        let psi_norm = arc.map(1, 1, |_, _, v| vec![crate::linalg::spectral_norm(&sample(&l, v).psi)]);
        Self {
            label: label.into(),
            arc,
            layout,
            theta_err,
            eps_norm,
            xi_norm,
            psi_norm,
        }
    }

    pub fn final_theta_hat(&self) -> DVector<f64> {
        sample(&self.layout, self.arc.last()).theta_hat
    }

    /// First hybrid length at which `|ξ|` drops below `level`.
    pub fn first_length_below(&self, arc: &HybridArc, level: f64) -> Option<f64> {
        (0..arc.len()).find(|&i| arc.value(i)[0] < level).map(|i| arc.point(i).length())
    }
}

pub(crate) fn scalar_envelope(
    arc: &HybridArc,
    kappa: f64,
    lambda: f64,
    offset: impl FnMut(usize, crate::hybrid_time::HybridTimePoint) -> f64,
    tol: EnvelopeTolerance,
) -> EnvelopeReport {
    check_envelope(arc, |_, _, v| v[0], kappa, lambda, offset, tol)
}

/// The additive slack used by the pass/fail envelope checks.
pub const ENVELOPE_SLACK: EnvelopeTolerance = EnvelopeTolerance {
    absolute: 1e-9,
    relative: 0.0,
};
