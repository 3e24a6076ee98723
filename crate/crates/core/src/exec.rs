//! Fixed-step execution of hybrid systems `(C, F, D, G)`.
//!
//! Flows are integrated with classical RK4 on a per-interval grid
//! `t_j + k h`; the last step of an interval is shortened so that interval
//! endpoints are hit exactly. Entry into the jump set is located by
//! bisection over the length of the final step, re-integrating from the
//! last accepted grid point.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid_time::{hybrid_length, ArcBuilder, HybridArc, HybridTimeDomain, HybridTimePoint};

/// Data `(C, F, D, G)` of a hybrid system on a flat state vector.
///
/// The hybrid time `(t, j)` is passed alongside the state so that
/// time-varying data (regressors, inputs, known domains) can be evaluated.
pub trait HybridSystem {
    fn dim(&self) -> usize;
    fn flow(&self, x: &DVector<f64>, at: HybridTimePoint) -> DVector<f64>;
    fn jump(&self, x: &DVector<f64>, at: HybridTimePoint) -> DVector<f64>;
    fn in_flow_set(&self, x: &DVector<f64>, at: HybridTimePoint) -> bool;
    fn in_jump_set(&self, x: &DVector<f64>, at: HybridTimePoint) -> bool;
}

type FlowFn = dyn Fn(&DVector<f64>, HybridTimePoint) -> DVector<f64> + Send + Sync;
type SetFn = dyn Fn(&DVector<f64>, HybridTimePoint) -> bool + Send + Sync;

/// Hybrid system assembled from closures.
pub struct HybridSystemDef {
    pub state_dim: usize,
    pub flow_map: Box<FlowFn>,
    pub jump_map: Box<FlowFn>,
    pub flow_predicate: Box<SetFn>,
    pub jump_predicate: Box<SetFn>,
}

impl HybridSystemDef {
    /// Flow everywhere, never jump.
    pub fn continuous<F>(state_dim: usize, flow_map: F) -> Self
    where
        F: Fn(&DVector<f64>, HybridTimePoint) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            state_dim,
            flow_map: Box::new(flow_map),
            jump_map: Box::new(|x, _| x.clone()),
            flow_predicate: Box::new(|_, _| true),
            jump_predicate: Box::new(|_, _| false),
        }
    }
}

impl HybridSystem for HybridSystemDef {
    fn dim(&self) -> usize {
        self.state_dim
    }
    fn flow(&self, x: &DVector<f64>, at: HybridTimePoint) -> DVector<f64> {
        (self.flow_map)(x, at)
    }
    fn jump(&self, x: &DVector<f64>, at: HybridTimePoint) -> DVector<f64> {
        (self.jump_map)(x, at)
    }
    fn in_flow_set(&self, x: &DVector<f64>, at: HybridTimePoint) -> bool {
        (self.flow_predicate)(x, at)
    }
    fn in_jump_set(&self, x: &DVector<f64>, at: HybridTimePoint) -> bool {
        (self.jump_predicate)(x, at)
    }
}

/// Rule applied when the state lies in both `C` and `D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Priority {
    #[default]
    JumpFirst,
    FlowFirst,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecConfig {
    /// RK4 step `h` in seconds.
    pub step: f64,
    pub t_end: f64,
    /// Stop as soon as this many jumps have occurred.
    pub max_jumps: usize,
    pub jump_location_tol: f64,
    pub priority: Priority,
    /// Keep every n-th flow sample. Interval endpoints and jump samples are always kept.
    pub record_every: usize,
    /// Abort when two consecutive jumps are closer than this in hybrid length.
    pub min_jump_separation: Option<f64>,
}

impl ExecConfig {
    pub fn new(step: f64, t_end: f64) -> Self {
        Self {
            step,
            t_end,
            max_jumps: usize::MAX,
            jump_location_tol: (step * 1e-9).max(1e-12).min(step),
            priority: Priority::JumpFirst,
            record_every: 1,
            min_jump_separation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Parameter(format!("step must be positive, got {}", self.step)));
        }
        if !(self.t_end >= 0.0) {
            return Err(Error::Parameter(format!("t_end must be nonnegative, got {}", self.t_end)));
        }
        if !(self.jump_location_tol > 0.0 && self.jump_location_tol <= self.step) {
            return Err(Error::Parameter(format!(
                "jump_location_tol must lie in (0, step], got {}",
                self.jump_location_tol
            )));
        }
        if self.record_every == 0 {
            return Err(Error::Parameter("record_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Why [`simulate`] stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    EndTime,
    MaxJumps,
    /// Neither flowing nor jumping is allowed from the final state.
    Stuck,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub arc: HybridArc,
    pub termination: Termination,
}

/// `k`-th grid time of an interval starting at `start`, clamped to `end`.
/// Points within `1e-9 h` of the end are snapped onto it.
pub(crate) fn grid_time(start: f64, k: usize, h: f64, end: f64) -> f64 {
    let t = start + k as f64 * h;
    if t >= end - 1e-9 * h {
        end
    } else {
        t
    }
}

fn check_finite(v: &DVector<f64>, at: HybridTimePoint, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            t: at.t,
            j: at.j,
            what: what.to_string(),
        })
    }
}

/// One classical RK4 step of `x' = f(x, (t, j))` over `[t, t + h]` at fixed `j`.
pub fn rk4_step<F>(mut f: F, x: &DVector<f64>, t: f64, j: usize, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>, HybridTimePoint) -> DVector<f64>,
{
    let at = |s: f64| HybridTimePoint::new(s, j);
    let half = 0.5 * h;
    let k1 = f(x, at(t));
    check_finite(&k1, at(t), "flow map")?;
    let k2 = f(&(x + &k1 * half), at(t + half));
    check_finite(&k2, at(t + half), "flow map")?;
    let k3 = f(&(x + &k2 * half), at(t + half));
    check_finite(&k3, at(t + half), "flow map")?;
    let k4 = f(&(x + &k3 * h), at(t + h));
    check_finite(&k4, at(t + h), "flow map")?;
    let next = x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
    check_finite(&next, at(t + h), "state")?;
    Ok(next)
}

/// Earliest time in `(t_lo, t_hi]` at which `predicate_at` becomes true, to
/// within `tol`. The returned time always satisfies the predicate.
///
/// `predicate_at(t)` is expected to re-integrate the trajectory from `t_lo`
/// up to `t` before testing membership.
pub fn locate_jump<P>(mut predicate_at: P, t_lo: f64, t_hi: f64, tol: f64) -> Result<f64>
where
    P: FnMut(f64) -> Result<bool>,
{
    if !(tol > 0.0) || !(t_hi >= t_lo) {
        return Err(Error::EventLocation(format!(
            "bad bracket [{t_lo}, {t_hi}] with tol {tol}"
        )));
    }
    if predicate_at(t_lo)? {
        return Err(Error::EventLocation(format!(
            "predicate already holds at t_lo = {t_lo}"
        )));
    }
    if !predicate_at(t_hi)? {
        return Err(Error::EventLocation(format!(
            "predicate does not change over [{t_lo}, {t_hi}]"
        )));
    }
    let (mut lo, mut hi) = (t_lo, t_hi);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if predicate_at(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

struct Recorder {
    builder: ArcBuilder,
    pending: Option<(HybridTimePoint, DVector<f64>)>,
}

impl Recorder {
    fn new(dim: usize) -> Self {
        Self {
            builder: ArcBuilder::new(dim, 1),
            pending: None,
        }
    }

    fn push(&mut self, at: HybridTimePoint, x: &DVector<f64>) -> Result<()> {
        self.pending = None;
        self.builder.push(at, x.as_slice())
    }

    fn defer(&mut self, at: HybridTimePoint, x: &DVector<f64>) {
        self.pending = Some((at, x.clone()));
    }

    fn flush(&mut self) -> Result<()> {
        if let Some((at, x)) = self.pending.take() {
            self.builder.push(at, x.as_slice())?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<HybridArc> {
        self.flush()?;
        self.builder.finish(false)
    }
}

/// Simulates `sys` from `x0`: flow while in `C`, jump when in `D` (per
/// [`Priority`]), stop at `t_end`, at `max_jumps`, or when stuck.
pub fn simulate<S: HybridSystem + ?Sized>(sys: &S, x0: &DVector<f64>, cfg: &ExecConfig) -> Result<SimOutcome> {
    cfg.validate()?;
    if x0.len() != sys.dim() {
        return Err(Error::Dimension(format!(
            "initial state has {} components, system has {}",
            x0.len(),
            sys.dim()
        )));
    }
    let origin = HybridTimePoint::ORIGIN;
    check_finite(x0, origin, "initial state")?;

    let h = cfg.step;
    let mut rec = Recorder::new(sys.dim());
    rec.push(origin, x0)?;

    let mut x = x0.clone();
    let (mut t, mut j) = (0.0f64, 0usize);
    let mut interval_start = 0.0f64;
    let mut k = 0usize;
    let mut last_jump: Option<HybridTimePoint> = None;

    let termination = loop {
        let at = HybridTimePoint::new(t, j);
        if j >= cfg.max_jumps {
            break Termination::MaxJumps;
        }
        let in_d = sys.in_jump_set(&x, at);
        let in_c = sys.in_flow_set(&x, at);

        if in_d && (cfg.priority == Priority::JumpFirst || !in_c) {
            rec.flush()?;
            if let (Some(prev), Some(min)) = (last_jump, cfg.min_jump_separation) {
                if hybrid_length(prev, at) < min {
                    return Err(Error::Chattering {
                        first: prev,
                        second: at,
                        min_separation: min,
                    });
                }
            }
            last_jump = Some(at);
            x = sys.jump(&x, at);
            j += 1;
            let post = HybridTimePoint::new(t, j);
            check_finite(&x, post, "jump map")?;
            rec.push(post, &x)?;
            interval_start = t;
            k = 0;
            continue;
        }
        if t >= cfg.t_end {
            break Termination::EndTime;
        }
        if !in_c {
            break Termination::Stuck;
        }

        let t_next = grid_time(interval_start, k + 1, h, cfg.t_end);
        let dt = t_next - t;
        let flow = |y: &DVector<f64>, p: HybridTimePoint| sys.flow(y, p);
        let x_next = rk4_step(flow, &x, t, j, dt)?;

        if !in_d && sys.in_jump_set(&x_next, HybridTimePoint::new(t_next, j)) {
            let (t0, x0_step) = (t, x.clone());
            let reach = |s: f64| -> Result<DVector<f64>> {
                if s == t0 {
                    Ok(x0_step.clone())
                } else if s == t_next {
                    Ok(x_next.clone())
                } else {
                    rk4_step(|y: &DVector<f64>, p| sys.flow(y, p), &x0_step, t0, j, s - t0)
                }
            };
            let t_hit = locate_jump(
                |s| Ok(sys.in_jump_set(&reach(s)?, HybridTimePoint::new(s, j))),
                t0,
                t_next,
                cfg.jump_location_tol,
            )?;
            x = reach(t_hit)?;
            t = t_hit;
            k += 1;
            rec.push(HybridTimePoint::new(t, j), &x)?;
            continue;
        }

        x = x_next;
        t = t_next;
        k += 1;
        let here = HybridTimePoint::new(t, j);
        if k % cfg.record_every == 0 || t >= cfg.t_end {
            rec.push(here, &x)?;
        } else {
            rec.defer(here, &x);
        }
    };

    Ok(SimOutcome {
        arc: rec.finish()?,
        termination,
    })
}

/// Simulates `sys` on a prescribed hybrid time domain: flows on every
/// `[t_j, t_{j+1}]` and applies the jump map exactly at each `t_{j+1}`.
/// The flow and jump sets of `sys` are not consulted.
pub fn simulate_on_domain<S: HybridSystem + ?Sized>(
    sys: &S,
    x0: &DVector<f64>,
    domain: &HybridTimeDomain,
    h: f64,
) -> Result<HybridArc> {
    simulate_on_domain_recording(sys, x0, domain, h, 1)
}

/// [`simulate_on_domain`] keeping only every `record_every`-th flow sample.
pub fn simulate_on_domain_recording<S: HybridSystem + ?Sized>(
    sys: &S,
    x0: &DVector<f64>,
    domain: &HybridTimeDomain,
    h: f64,
    record_every: usize,
) -> Result<HybridArc> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }
    if record_every == 0 {
        return Err(Error::Parameter("record_every must be at least 1".into()));
    }
    if x0.len() != sys.dim() {
        return Err(Error::Dimension(format!(
            "initial state has {} components, system has {}",
            x0.len(),
            sys.dim()
        )));
    }
    check_finite(x0, HybridTimePoint::ORIGIN, "initial state")?;

    let mut rec = Recorder::new(sys.dim());
    let mut x = x0.clone();
    rec.push(HybridTimePoint::ORIGIN, &x)?;
    for j in 0..=domain.jump_count() {
        let (start, end) = domain.interval(j).expect("j within domain");
        let mut t = start;
        let mut k = 0usize;
        while t < end {
            let t_next = grid_time(start, k + 1, h, end);
            x = rk4_step(|y: &DVector<f64>, p| sys.flow(y, p), &x, t, j, t_next - t)?;
            t = t_next;
            k += 1;
            let here = HybridTimePoint::new(t, j);
            if k % record_every == 0 || t >= end {
                rec.push(here, &x)?;
            } else {
                rec.defer(here, &x);
            }
        }
        if j < domain.jump_count() {
            let pre = HybridTimePoint::new(end, j);
            x = sys.jump(&x, pre);
            let post = HybridTimePoint::new(end, j + 1);
            check_finite(&x, post, "jump map")?;
            rec.push(post, &x)?;
        }
    }
    rec.finish()
}
