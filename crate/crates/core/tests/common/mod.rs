#![allow(dead_code)]

use hybrid_pe::bounds::{regressor_filter_bound, BoundInputs};
use hybrid_pe::hybrid_time::ArcBuilder;
use hybrid_pe::{HybridArc, HybridTimePoint};
use proptest::prelude::*;

/// Valid constant-chain inputs. `μ` never exceeds `(Δ+1)ψ_M²`, the largest
/// Gramian level a regressor bounded by `ψ_M` can produce over a window.
pub fn bound_inputs() -> impl Strategy<Value = BoundInputs> {
    (
        (0.01f64..10.0, 0.01f64..10.0, 0.01f64..10.0, 0.05f64..1.95),
        (0.1f64..10.0, 0.0f64..5.0, 1.0f64..20.0, 0.0f64..1.0),
        (0.1f64..10.0, 1.0f64..10.0, 0.05f64..0.95),
        (0.0f64..5.0, 0.0f64..5.0),
    )
        .prop_map(|((gc, lc, gd, ld), (phi, psi0, delta, mu_frac), (qm, qratio, zeta), (l_c, l_d))| {
            let psi_m = regressor_filter_bound(psi0, lc, ld, phi).unwrap();
            let mu_max = 100f64.min((delta + 1.0) * psi_m * psi_m);
            BoundInputs {
                gamma_c: gc,
                lambda_c: lc,
                gamma_d: gd,
                lambda_d: ld,
                phi_max: phi,
                psi_0: psi0,
                delta,
                mu: (mu_frac * mu_max).max(1e-9 * mu_max),
                q_min: qm,
                q_max: qm * qratio,
                zeta,
                lipschitz_c: l_c,
                lipschitz_d: l_d,
            }
        })
}

/// Samples `f` on `[0, t_end]` with step `h`, no jumps.
pub fn flow_arc(t_end: f64, h: f64, rows: usize, cols: usize, f: impl Fn(f64) -> Vec<f64>) -> HybridArc {
    let mut b = ArcBuilder::new(rows, cols);
    let steps = (t_end / h).round() as usize;
    for k in 0..=steps {
        let t = if k == steps { t_end } else { k as f64 * h };
        b.push(HybridTimePoint::new(t, 0), &f(t)).unwrap();
    }
    b.finish(false).unwrap()
}

/// One sample per `j`, all at `t = 0`.
pub fn jump_arc(rows: usize, cols: usize, values: &[Vec<f64>]) -> HybridArc {
    let mut b = ArcBuilder::new(rows, cols);
    for (j, v) in values.iter().enumerate() {
        b.push(HybridTimePoint::new(0.0, j), v).unwrap();
    }
    b.finish(false).unwrap()
}

/// Periodic jumps every `period`, sampled with step `h`, value `f(t, j)`.
pub fn periodic_arc(
    period: f64,
    jumps: usize,
    h: f64,
    rows: usize,
    cols: usize,
    f: impl Fn(f64, usize) -> Vec<f64>,
) -> HybridArc {
    let mut b = ArcBuilder::new(rows, cols);
    let per = (period / h).round() as usize;
    for j in 0..=jumps {
        let start = j as f64 * period;
        for k in 0..=per {
            let t = if k == per { start + period } else { start + k as f64 * h };
            b.push(HybridTimePoint::new(t, j), &f(t, j)).unwrap();
        }
    }
    b.finish(false).unwrap()
}
