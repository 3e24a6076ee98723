//! Excitation Gramians and persistence-of-excitation certificates.
//!
//! A window from `(t', j')` to `(t*, j*)` accumulates the trapezoid
//! integral of `ψᵀψ` over its flow pieces plus `ψᵀψ` at every post-jump
//! sample `(t_{j+1}, j+1)` with `j' <= j < j*`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid_time::{hybrid_length, HybridArc, HybridTimePoint};
use crate::linalg::lambda_min;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub t_start: f64,
    pub j_start: usize,
    pub t_end: f64,
    pub j_end: usize,
}

impl Window {
    pub fn start(&self) -> HybridTimePoint {
        HybridTimePoint::new(self.t_start, self.j_start)
    }
    pub fn end(&self) -> HybridTimePoint {
        HybridTimePoint::new(self.t_end, self.j_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PECertificate {
    pub delta: f64,
    pub mu: f64,
    pub worst_window: Window,
    pub window_count: usize,
}

/// `ψᵀψ` of sample `i`, flattened column-major.
fn gram_sample(arc: &HybridArc, i: usize) -> Vec<f64> {
    let (n, p) = arc.shape();
    gram_flat(arc.value(i), n, p)
}

fn gram_flat(v: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut g = vec![0.0; p * p];
    for a in 0..p {
        for b in a..p {
            let s: f64 = (0..n).map(|r| v[a * n + r] * v[b * n + r]).sum();
            g[a * p + b] = s;
            g[b * p + a] = s;
        }
    }
    g
}

fn flat_lambda_min(g: &[f64], p: usize) -> f64 {
    match p {
        1 => g[0],
        _ => lambda_min(&DMatrix::from_column_slice(p, p, g)),
    }
}

fn sample_index(arc: &HybridArc, at: HybridTimePoint) -> Result<usize> {
    let range = arc.interval_indices(at.j);
    let slack = 1e-9 * at.t.abs().max(1.0);
    range
        .min_by(|&a, &b| {
            let (da, db) = ((arc.point(a).t - at.t).abs(), (arc.point(b).t - at.t).abs());
            da.total_cmp(&db)
        })
        .filter(|&i| (arc.point(i).t - at.t).abs() <= slack)
        .ok_or_else(|| Error::Window(format!("({}, {}) is not a sample point of the arc", at.t, at.j)))
}

/// Gramian between two sample points, by direct summation.
pub fn hybrid_pe_gramian(arc: &HybridArc, start: HybridTimePoint, end: HybridTimePoint) -> Result<DMatrix<f64>> {
    for q in [start, end] {
        if !arc.domain().contains_within(q, 1e-9 * q.t.abs().max(1.0)) {
            return Err(Error::OutsideDomain(q));
        }
    }
    if !start.precedes(&end) {
        return Err(Error::Window(format!(
            "window start ({}, {}) is after its end ({}, {})",
            start.t, start.j, end.t, end.j
        )));
    }
    let (a, b) = (sample_index(arc, start)?, sample_index(arc, end)?);
    Ok(gramian_between(arc, a, b))
}

/// Gramian between sample indices `a <= b`.
pub fn gramian_between(arc: &HybridArc, a: usize, b: usize) -> DMatrix<f64> {
    let p = arc.shape().1;
    let mut acc = vec![0.0; p * p];
    for i in a + 1..=b {
        add_step(arc, i, &mut acc);
    }
    DMatrix::from_column_slice(p, p, &acc)
}

/// Adds the contribution of the step from sample `i - 1` to sample `i`.
fn add_step(arc: &HybridArc, i: usize, acc: &mut [f64]) {
    let (prev, cur) = (arc.point(i - 1), arc.point(i));
    let gi = gram_sample(arc, i);
    if cur.j == prev.j {
        let half = 0.5 * (cur.t - prev.t);
        let gp = gram_sample(arc, i - 1);
        for (s, (x, y)) in acc.iter_mut().zip(gp.iter().zip(&gi)) {
            *s += half * (x + y);
        }
    } else {
        for (s, y) in acc.iter_mut().zip(&gi) {
            *s += y;
        }
    }
}

/// Certifies hybrid PE for window length `delta`: every sample is a window
/// start, the end is the earliest sample at hybrid length `>= delta`, and
/// `μ` is the smallest `λ_min` over those windows.
pub fn certify_hybrid_pe(arc: &HybridArc, delta: f64) -> Result<PECertificate> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Parameter(format!("delta must be positive, got {delta}")));
    }
    let total = arc.domain().length();
    if arc.len() < 2 || total < delta {
        return Err(Error::Window(format!(
            "arc of hybrid length {total} is shorter than delta = {delta}"
        )));
    }
    let p = arc.shape().1;
    let pp = p * p;

    let mut prefix = vec![0.0; arc.len() * pp];
    for i in 1..arc.len() {
        let (done, rest) = prefix.split_at_mut(i * pp);
        let cur = &mut rest[..pp];
        cur.copy_from_slice(&done[(i - 1) * pp..]);
        add_step(arc, i, cur);
    }
    let lengths: Vec<f64> = arc.points().iter().map(|q| q.length()).collect();

    let mut best: Option<(f64, usize, usize)> = None;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let mut count = 0usize;
    let mut b = 0usize;
    let mut g = vec![0.0; pp];
    for a in 0..arc.len() {
        if b < a {
            b = a;
        }
        while b < arc.len() && lengths[b] - lengths[a] < delta {
            b += 1;
        }
        if b == arc.len() {
            break;
        }
        let span = hybrid_length(arc.point(a), arc.point(b));
        if span >= delta + 1.0 {
            return Err(Error::Window(format!(
                "no sample closes the window from ({}, {}) below hybrid length {}",
                arc.point(a).t,
                arc.point(a).j,
                delta + 1.0
            )));
        }
        for (k, s) in g.iter_mut().enumerate() {
            *s = prefix[b * pp + k] - prefix[a * pp + k];
        }
        let low = flat_lambda_min(&g, p);
        count += 1;
        if best.map_or(true, |(m, _, _)| low < m) {
            best = Some((low, a, b));
        }
        candidates.push((low, a, b));
    }
    let (mu_scan, _, _) = best.ok_or_else(|| Error::Window("no complete window in the arc".into()))?;

    // re-evaluate windows within rounding distance of the minimum by direct
    // summation, so cancellation in the prefix differences cannot move μ
    let scale = prefix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let band = mu_scan + 1e-12 * scale.max(1.0);
    candidates.retain(|c| c.0 <= band);
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0));
    candidates.truncate(64);
    let (mut mu, mut a, mut b) = (f64::INFINITY, 0, 0);
    for &(_, ca, cb) in &candidates {
        let low = lambda_min(&gramian_between(arc, ca, cb));
        if low < mu {
            (mu, a, b) = (low, ca, cb);
        }
    }
    Ok(PECertificate {
        delta,
        mu,
        worst_window: Window {
            t_start: arc.point(a).t,
            j_start: arc.point(a).j,
            t_end: arc.point(b).t,
            j_end: arc.point(b).j,
        },
        window_count: count,
    })
}

/// Continuous-time PE level: smallest `λ_min` of `∫_t^{t+T} ψᵀψ` over sample
/// starts `t`. The window end is placed exactly at `t + T`, interpolating
/// the integrand linearly inside the last step.
pub fn classic_pe_ct(arc: &HybridArc, t_window: f64) -> Result<f64> {
    if arc.domain().jump_count() > 0 {
        return Err(Error::Window("continuous PE needs a jump-free arc".into()));
    }
    if !(t_window > 0.0) {
        return Err(Error::Parameter(format!("window must be positive, got {t_window}")));
    }
    let t_end = arc.domain().end_time();
    if t_end < t_window {
        return Err(Error::Window(format!(
            "signal of length {t_end} is shorter than the window {t_window}"
        )));
    }
    let p = arc.shape().1;
    let pp = p * p;
    let times: Vec<f64> = arc.points().iter().map(|q| q.t).collect();
    let grams: Vec<Vec<f64>> = (0..arc.len()).map(|i| gram_sample(arc, i)).collect();
    let mut prefix = vec![0.0; arc.len() * pp];
    for i in 1..arc.len() {
        let half = 0.5 * (times[i] - times[i - 1]);
        for k in 0..pp {
            prefix[i * pp + k] = prefix[(i - 1) * pp + k] + half * (grams[i - 1][k] + grams[i][k]);
        }
    }
    // integral from sample 0 to an arbitrary time s
    let integral_to = |s: f64, out: &mut [f64]| {
        let i = times.partition_point(|&t| t <= s).clamp(1, times.len() - 1);
        let (ta, tb) = (times[i - 1], times[i]);
        let w = if tb > ta { ((s - ta) / (tb - ta)).clamp(0.0, 1.0) } else { 0.0 };
        let d = s - ta;
        for k in 0..pp {
            let (ga, gb) = (grams[i - 1][k], grams[i][k]);
            let gs = ga + w * (gb - ga);
            out[k] = prefix[(i - 1) * pp + k] + 0.5 * d * (ga + gs);
        }
    };
    let slack = 1e-9 * t_end.max(1.0);
    let mut best = f64::INFINITY;
    let mut end = vec![0.0; pp];
    let mut g = vec![0.0; pp];
    for (a, &t) in times.iter().enumerate() {
        if t + t_window > t_end + slack {
            break;
        }
        integral_to((t + t_window).min(t_end), &mut end);
        for k in 0..pp {
            g[k] = end[k] - prefix[a * pp + k];
        }
        best = best.min(flat_lambda_min(&g, p));
    }
    Ok(best)
}

/// Discrete-time PE level: smallest `λ_min(Σ_{i=j}^{j+J} ψ(i)ᵀψ(i))`, so each window has `J + 1` terms.
pub fn classic_pe_dt(psi: &[DMatrix<f64>], j_window: usize) -> Result<f64> {
    if j_window == 0 {
        return Err(Error::Parameter("window must contain at least one jump".into()));
    }
    if psi.len() < j_window + 1 {
        return Err(Error::Window(format!(
            "sequence of {} terms is shorter than the window of {} terms",
            psi.len(),
            j_window + 1
        )));
    }
    let grams: Vec<DMatrix<f64>> = psi
        .iter()
        .map(|m| DMatrix::from_column_slice(m.ncols(), m.ncols(), &gram_flat(m.as_slice(), m.nrows(), m.ncols())))
        .collect();
    let mut best = f64::INFINITY;
    for j in 0..=psi.len() - (j_window + 1) {
        let mut sum = grams[j].clone();
        for g in &grams[j + 1..=j + j_window] {
            sum += g;
        }
        best = best.min(lambda_min(&sum));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid_time::ArcBuilder;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn continuous_arc(t_end: f64, h: f64, f: impl Fn(f64) -> Vec<f64>, rows: usize, cols: usize) -> HybridArc {
        let mut b = ArcBuilder::new(rows, cols);
        let steps = (t_end / h).round() as usize;
        for k in 0..=steps {
            let t = if k == steps { t_end } else { k as f64 * h };
            b.push(HybridTimePoint::new(t, 0), &f(t)).unwrap();
        }
        b.finish(false).unwrap()
    }

    fn discrete_arc(values: &[f64]) -> HybridArc {
        let mut b = ArcBuilder::new(1, 1);
        for (j, v) in values.iter().enumerate() {
            b.push(HybridTimePoint::new(0.0, j), &[*v]).unwrap();
        }
        b.finish(false).unwrap()
    }

    #[test]
    fn zero_signal_has_zero_gramian() {
        let arc = continuous_arc(3.0, 0.1, |_| vec![0.0, 0.0], 1, 2);
        let g = hybrid_pe_gramian(&arc, HybridTimePoint::ORIGIN, HybridTimePoint::new(3.0, 0)).unwrap();
        assert_eq!(g, DMatrix::zeros(2, 2));
        assert_eq!(certify_hybrid_pe(&arc, 1.0).unwrap().mu, 0.0);
    }

    #[test]
    fn unit_flow_gramian_is_window_length() {
        let arc = continuous_arc(3.0, 0.1, |_| vec![1.0], 1, 1);
        let g = hybrid_pe_gramian(&arc, HybridTimePoint::ORIGIN, HybridTimePoint::new(3.0, 0)).unwrap();
        assert_relative_eq!(g[(0, 0)], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn unit_jump_gramian_counts_jumps() {
        let arc = discrete_arc(&[1.0; 6]);
        let g = hybrid_pe_gramian(&arc, HybridTimePoint::new(0.0, 1), HybridTimePoint::new(0.0, 5)).unwrap();
        assert_eq!(g[(0, 0)], 4.0);
    }

    #[test]
    fn gramian_rejects_reversed_and_outside_windows() {
        let arc = continuous_arc(3.0, 0.1, |_| vec![1.0], 1, 1);
        assert!(hybrid_pe_gramian(&arc, HybridTimePoint::new(2.0, 0), HybridTimePoint::new(1.0, 0)).is_err());
        assert!(matches!(
            hybrid_pe_gramian(&arc, HybridTimePoint::ORIGIN, HybridTimePoint::new(4.0, 0)),
            Err(Error::OutsideDomain(_))
        ));
    }

    #[test]
    fn sine_certificate_is_pi() {
        let arc = continuous_arc(6.0 * PI, 0.001, |t| vec![t.sin()], 1, 1);
        let cert = certify_hybrid_pe(&arc, 2.0 * PI).unwrap();
        assert!((cert.mu - PI).abs() <= 0.02 * PI, "mu = {}", cert.mu);
        let ct = classic_pe_ct(&arc, 2.0 * PI).unwrap();
        assert!((ct - PI).abs() <= 0.02 * PI, "ct = {ct}");
    }

    #[test]
    fn certificate_needs_a_full_window() {
        let arc = continuous_arc(1.0, 0.1, |_| vec![1.0], 1, 1);
        assert!(matches!(certify_hybrid_pe(&arc, 2.0), Err(Error::Window(_))));
        assert!(certify_hybrid_pe(&arc, 0.0).is_err());
    }

    #[test]
    fn prefix_certificate_matches_direct_gramian() {
        let mut b = ArcBuilder::new(2, 1);
        let mut t = 0.0;
        for j in 0..4 {
            for k in 0..=20 {
                let s = if k == 0 { t } else { t + k as f64 * 0.05 };
                b.push(HybridTimePoint::new(s, j), &[s.sin(), (j as f64 + 1.0) * 0.3]).unwrap();
            }
            t += 1.0;
        }
        let arc = b.finish(false).unwrap();
        let cert = certify_hybrid_pe(&arc, 1.5).unwrap();
        let direct = hybrid_pe_gramian(&arc, cert.worst_window.start(), cert.worst_window.end()).unwrap();
        assert_relative_eq!(lambda_min(&direct), cert.mu, epsilon = 1e-12);
    }

    #[test]
    fn classic_ct_constant_identity() {
        let arc = continuous_arc(5.0, 0.1, |_| vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        assert_relative_eq!(classic_pe_ct(&arc, 2.0).unwrap(), 2.0, epsilon = 1e-12);
        assert!(classic_pe_ct(&arc, 6.0).is_err());
    }

    #[test]
    fn classic_dt_examples() {
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        for jw in 1..5 {
            assert!(classic_pe_dt(&vec![singular.clone(); 10], jw).unwrap().abs() < 1e-12);
        }
        let eye = DMatrix::identity(2, 2);
        assert_eq!(classic_pe_dt(&vec![eye; 10], 3).unwrap(), 4.0);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let alt: Vec<_> = (0..8).map(|i| if i % 2 == 0 { a.clone() } else { b.clone() }).collect();
        assert_eq!(classic_pe_dt(&alt, 1).unwrap(), 1.0);
        assert!(classic_pe_dt(&alt, 0).is_err());
        assert!(classic_pe_dt(&alt[..2], 2).is_err());
    }

    #[test]
    fn flow_free_certificate_matches_discrete_level() {
        let values: Vec<f64> = (0..12).map(|j| ((j * 7) % 5) as f64 - 1.5).collect();
        let arc = discrete_arc(&values);
        for jw in 1..5 {
            let cert = certify_hybrid_pe(&arc, (jw + 1) as f64).unwrap();
            let post: Vec<DMatrix<f64>> = values[1..].iter().map(|v| DMatrix::from_element(1, 1, *v)).collect();
            assert_eq!(cert.mu, classic_pe_dt(&post, jw).unwrap());
        }
    }

    #[test]
    fn certificate_serializes_to_expected_shape() {
        let arc = continuous_arc(3.0, 0.5, |_| vec![1.0], 1, 1);
        let cert = certify_hybrid_pe(&arc, 1.0).unwrap();
        let json: serde_json::Value = serde_json::to_value(&cert).unwrap();
        for key in ["delta", "mu", "worst_window", "window_count"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        for key in ["t_start", "j_start", "t_end", "j_end"] {
            assert!(json["worst_window"].get(key).is_some(), "missing {key}");
        }
    }
}
