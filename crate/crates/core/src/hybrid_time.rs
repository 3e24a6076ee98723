//! Hybrid time domains and sampled hybrid arcs.
//!
//! A hybrid time domain is the union of intervals `[t_j, t_{j+1}] x {j}`
//! for a nondecreasing sequence of jump times starting at zero. A hybrid arc
//! is stored as a flat list of samples ordered by `(j, t)`; at every jump the
//! pre-jump sample `(t_{j+1}, j)` and the post-jump sample `(t_{j+1}, j+1)`
//! are both present.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// A point `(t, j)`: ordinary time and jump count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridTimePoint {
    pub t: f64,
    pub j: usize,
}

impl HybridTimePoint {
    pub const ORIGIN: HybridTimePoint = HybridTimePoint { t: 0.0, j: 0 };

    pub fn new(t: f64, j: usize) -> Self {
        Self { t, j }
    }

    /// `t + j`
    pub fn length(&self) -> f64 {
        self.t + self.j as f64
    }

    /// Hybrid order restricted to points of one domain: `self <= other`.
    pub fn precedes(&self, other: &HybridTimePoint) -> bool {
        self.j < other.j || (self.j == other.j && self.t <= other.t)
    }
}

/// Signed hybrid length `(b.t - a.t) + (b.j - a.j)`; the caller enforces ordering.
pub fn hybrid_length(a: HybridTimePoint, b: HybridTimePoint) -> f64 {
    (b.t - a.t) + (b.j as f64 - a.j as f64)
}

/// Finite hybrid time domain given by its jump-time sequence
/// `t_0 = 0 <= t_1 <= ... <= t_{J+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridTimeDomain {
    jump_times: Vec<f64>,
    complete: bool,
}

impl HybridTimeDomain {
    pub fn new(jump_times: Vec<f64>) -> Result<Self> {
        Self::with_completeness(jump_times, false)
    }

    pub fn with_completeness(jump_times: Vec<f64>, complete: bool) -> Result<Self> {
        if jump_times.len() < 2 {
            return Err(Error::InvalidDomain(
                "need at least t_0 and a terminal time".into(),
            ));
        }
        if jump_times[0] != 0.0 {
            return Err(Error::InvalidDomain(format!(
                "t_0 must be 0, got {}",
                jump_times[0]
            )));
        }
        if let Some(bad) = jump_times.iter().find(|t| !t.is_finite()) {
            return Err(Error::InvalidDomain(format!("non-finite jump time {bad}")));
        }
        if let Some(w) = jump_times.windows(2).find(|w| w[1] < w[0]) {
            return Err(Error::InvalidDomain(format!(
                "jump times must be nondecreasing ({} > {})",
                w[0], w[1]
            )));
        }
        Ok(Self {
            jump_times,
            complete,
        })
    }

    /// Jump-free domain `[0, t_end] x {0}`.
    pub fn continuous(t_end: f64) -> Result<Self> {
        Self::new(vec![0.0, t_end])
    }

    /// Evenly spaced jumps every `period` seconds, truncated at `t_end`.
    pub fn periodic(period: f64, t_end: f64) -> Result<Self> {
        if period <= 0.0 {
            return Err(Error::InvalidDomain("period must be positive".into()));
        }
        let mut times = vec![0.0];
        let mut k = 1usize;
        while k as f64 * period <= t_end {
            times.push(k as f64 * period);
            k += 1;
        }
        times.push(t_end);
        Self::new(times)
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    /// Number of jumps `J`.
    pub fn jump_count(&self) -> usize {
        self.jump_times.len() - 2
    }

    pub fn end_time(&self) -> f64 {
        *self.jump_times.last().expect("validated non-empty")
    }

    pub fn end_point(&self) -> HybridTimePoint {
        HybridTimePoint::new(self.end_time(), self.jump_count())
    }

    /// `[t_j, t_{j+1}]`
    pub fn interval(&self, j: usize) -> Option<(f64, f64)> {
        (j <= self.jump_count()).then(|| (self.jump_times[j], self.jump_times[j + 1]))
    }

    pub fn contains(&self, p: HybridTimePoint) -> bool {
        self.contains_within(p, 0.0)
    }

    /// Membership with an absolute slack on `t`.
    pub fn contains_within(&self, p: HybridTimePoint, slack: f64) -> bool {
        match self.interval(p.j) {
            Some((lo, hi)) => p.t >= lo - slack && p.t <= hi + slack,
            None => false,
        }
    }

    /// Total hybrid length `sup_t + sup_j`.
    pub fn length(&self) -> f64 {
        self.end_point().length()
    }
}

/// Pre-jump instants `{(t, j) in E : (t, j + 1) in E}`.
pub fn upsilon(domain: &HybridTimeDomain) -> Vec<HybridTimePoint> {
    (0..domain.jump_count())
        .map(|j| HybridTimePoint::new(domain.jump_times[j + 1], j))
        .collect()
}

/// A sampled hybrid arc with `rows x cols` values (column-major) at every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridArc {
    domain: HybridTimeDomain,
    rows: usize,
    cols: usize,
    points: Vec<HybridTimePoint>,
    data: Vec<f64>,
}

impl HybridArc {
    pub fn domain(&self) -> &HybridTimeDomain {
        &self.domain
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Number of scalar components per sample.
    pub fn width(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[HybridTimePoint] {
        &self.points
    }

    pub fn point(&self, i: usize) -> HybridTimePoint {
        self.points[i]
    }

    pub fn value(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn vector(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(self.value(i))
    }

    pub fn matrix(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.rows, self.cols, self.value(i))
    }

    pub fn first(&self) -> &[f64] {
        self.value(0)
    }

    pub fn last(&self) -> &[f64] {
        self.value(self.len() - 1)
    }

    /// `|value|`: Euclidean norm for vector arcs, induced 2-norm for matrix arcs.
    pub fn norm(&self, i: usize) -> f64 {
        if self.cols == 1 || self.rows == 1 {
            self.value(i).iter().map(|v| v * v).sum::<f64>().sqrt()
        } else {
            linalg::spectral_norm(&self.matrix(i))
        }
    }

    /// True when sample `i` is a pre-jump sample `(t_{j+1}, j)`.
    pub fn is_pre_jump(&self, i: usize) -> bool {
        i + 1 < self.len() && self.points[i + 1].j == self.points[i].j + 1
    }

    /// Index pairs `(pre, post)` for every jump, in order.
    pub fn jump_indices(&self) -> Vec<(usize, usize)> {
        (0..self.len().saturating_sub(1))
            .filter(|&i| self.is_pre_jump(i))
            .map(|i| (i, i + 1))
            .collect()
    }

    /// Sample indices lying on `[t_j, t_{j+1}] x {j}`.
    pub fn interval_indices(&self, j: usize) -> std::ops::Range<usize> {
        let start = self.points.partition_point(|p| p.j < j);
        let end = self.points.partition_point(|p| p.j <= j);
        start..end
    }

    /// Applies `f` sample by sample, producing a `rows x cols` arc on the same domain.
    pub fn map<F>(&self, rows: usize, cols: usize, mut f: F) -> HybridArc
    where
        F: FnMut(usize, HybridTimePoint, &[f64]) -> Vec<f64>,
    {
        let mut data = Vec::with_capacity(self.len() * rows * cols);
        for i in 0..self.len() {
            let v = f(i, self.points[i], self.value(i));
            assert_eq!(v.len(), rows * cols, "mapped value has the wrong width");
            data.extend_from_slice(&v);
        }
        HybridArc {
            domain: self.domain.clone(),
            rows,
            cols,
            points: self.points.clone(),
            data,
        }
    }

    /// Extracts components `range` as a column vector arc.
    pub fn components(&self, range: std::ops::Range<usize>) -> HybridArc {
        let n = range.len();
        self.map(n, 1, |_, _, v| v[range.clone()].to_vec())
    }

    /// Scalar arc of `|value|`.
    pub fn norm_arc(&self) -> HybridArc {
        self.map(1, 1, {
            let this = self;
            move |i, _, _| vec![this.norm(i)]
        })
    }

    /// Index of the last sample not after `upto` in hybrid order.
    fn last_index_upto(&self, upto: HybridTimePoint) -> Option<usize> {
        let n = self.points.partition_point(|p| p.precedes(&upto));
        n.checked_sub(1)
    }

    /// `||arc||_{(t,j)}` approximated by the maximum over stored samples.
    pub fn sup_norm(&self, upto: HybridTimePoint) -> Result<f64> {
        let slack = 1e-9 * upto.t.abs().max(1.0);
        if !self.domain.contains_within(upto, slack) {
            return Err(Error::OutsideDomain(upto));
        }
        Ok(match self.last_index_upto(upto) {
            Some(last) => (0..=last).map(|i| self.norm(i)).fold(0.0, f64::max),
            None => 0.0,
        })
    }

    /// Sup norm from the origin up to each sample, in one pass.
    pub fn running_sup(&self) -> Vec<f64> {
        let mut acc = 0.0f64;
        (0..self.len())
            .map(|i| {
                acc = acc.max(self.norm(i));
                acc
            })
            .collect()
    }

    /// Writes `t, j, component_0, ...`; jumps appear as two rows with equal `t`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string(), "j".to_string()];
        header.extend((0..self.width()).map(|c| format!("component_{c}")));
        out.write_record(&header)?;
        let mut record = Vec::with_capacity(self.width() + 2);
        for i in 0..self.len() {
            record.clear();
            record.push(self.points[i].t.to_string());
            record.push(self.points[i].j.to_string());
            record.extend(self.value(i).iter().map(|v| v.to_string()));
            out.write_record(&record)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads an arc written by [`HybridArc::write_csv`]; components are
    /// interpreted column-major as a `rows x cols` matrix.
    pub fn read_csv<R: Read>(reader: R, rows: usize, cols: usize) -> Result<HybridArc> {
        let mut input = csv::Reader::from_reader(reader);
        let width = input.headers()?.len().saturating_sub(2);
        if width != rows * cols {
            return Err(Error::Dimension(format!(
                "csv has {width} components, expected {rows} x {cols}"
            )));
        }
        let mut builder = ArcBuilder::new(rows, cols);
        let mut value = vec![0.0; width];
        for record in input.records() {
            let record = record?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad number {s:?}: {e}")))
            };
            let t = parse(&record[0])?;
            let j = record[1]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad jump index {:?}: {e}", &record[1])))?;
            for (c, slot) in value.iter_mut().enumerate() {
                *slot = parse(&record[c + 2])?;
            }
            builder.push(HybridTimePoint::new(t, j), &value)?;
        }
        builder.finish(false)
    }
}

/// Incremental arc construction enforcing the sample-ordering invariants.
#[derive(Debug, Clone)]
pub struct ArcBuilder {
    rows: usize,
    cols: usize,
    points: Vec<HybridTimePoint>,
    data: Vec<f64>,
    jump_times: Vec<f64>,
}

impl ArcBuilder {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            points: Vec::new(),
            data: Vec::new(),
            jump_times: vec![0.0],
        }
    }

    pub fn with_capacity(rows: usize, cols: usize, samples: usize) -> Self {
        let mut b = Self::new(rows, cols);
        b.points.reserve(samples);
        b.data.reserve(samples * rows * cols);
        b
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last_point(&self) -> Option<HybridTimePoint> {
        self.points.last().copied()
    }

    /// Appends a sample. It must either continue the current flow interval
    /// (same `j`, strictly later `t`) or be the post-jump sample (same `t`, `j + 1`).
    pub fn push(&mut self, p: HybridTimePoint, value: &[f64]) -> Result<()> {
        if value.len() != self.rows * self.cols {
            return Err(Error::Dimension(format!(
                "sample has {} components, expected {}",
                value.len(),
                self.rows * self.cols
            )));
        }
        match self.points.last() {
            None => {
                if p.t != 0.0 || p.j != 0 {
                    return Err(Error::InvalidDomain(format!(
                        "arc must start at (0, 0), got ({}, {})",
                        p.t, p.j
                    )));
                }
            }
            Some(prev) if p.j == prev.j => {
                if !(p.t > prev.t) {
                    return Err(Error::InvalidDomain(format!(
                        "flow samples must be strictly increasing in t ({} after {})",
                        p.t, prev.t
                    )));
                }
            }
            Some(prev) if p.j == prev.j + 1 => {
                if p.t != prev.t {
                    return Err(Error::InvalidDomain(format!(
                        "post-jump sample at t = {} does not match pre-jump t = {}",
                        p.t, prev.t
                    )));
                }
                self.jump_times.push(p.t);
            }
            Some(prev) => {
                return Err(Error::InvalidDomain(format!(
                    "jump index skips from {} to {}",
                    prev.j, p.j
                )));
            }
        }
        self.points.push(p);
        self.data.extend_from_slice(value);
        Ok(())
    }

    pub fn finish(mut self, complete: bool) -> Result<HybridArc> {
        let last = self
            .points
            .last()
            .ok_or_else(|| Error::InvalidDomain("empty arc".into()))?;
        self.jump_times.push(last.t);
        let domain = HybridTimeDomain::with_completeness(self.jump_times, complete)?;
        Ok(HybridArc {
            domain,
            rows: self.rows,
            cols: self.cols,
            points: self.points,
            data: self.data,
        })
    }
}
