//! Small dense helpers: induced 2-norm and extreme eigenvalues of the
//! low-dimensional symmetric matrices that show up in the estimators.

use nalgebra::DMatrix;

const POWER_TOL: f64 = 1e-12;
const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Induced Euclidean norm (largest singular value).
///
/// Closed form whenever the smaller of the two Gram matrices is at most 2x2,
/// power iteration on the Gram matrix otherwise.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let gram = if m.ncols() <= m.nrows() {
        m.transpose() * m
    } else {
        m * m.transpose()
    };
    let top = match gram.nrows() {
        1 => gram[(0, 0)],
        2 => sym2_eigenvalues(&gram).1,
        _ => power_iteration(&gram),
    };
    top.max(0.0).sqrt()
}

/// Frobenius norm.
pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Smallest eigenvalue of the symmetric part `(A + A^T)/2`.
pub fn lambda_min(a: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(a).into_iter().fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of the symmetric part `(A + A^T)/2`.
pub fn lambda_max(a: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(a)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Eigenvalues of the symmetric part of a square matrix, unordered.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    assert_eq!(a.nrows(), a.ncols(), "eigenvalues of a non-square matrix");
    let s = (a + a.transpose()) * 0.5;
    match s.nrows() {
        0 => Vec::new(),
        1 => vec![s[(0, 0)]],
        2 => {
            let (lo, hi) = sym2_eigenvalues(&s);
            vec![lo, hi]
        }
        _ => jacobi_eigenvalues(s),
    }
}

fn sym2_eigenvalues(s: &DMatrix<f64>) -> (f64, f64) {
    let (a, b, d) = (s[(0, 0)], 0.5 * (s[(0, 1)] + s[(1, 0)]), s[(1, 1)]);
    let mean = 0.5 * (a + d);
    let radius = (0.5 * (a - d)).hypot(b);
    (mean - radius, mean + radius)
}

fn power_iteration(gram: &DMatrix<f64>) -> f64 {
    let n = gram.nrows();
    // Uneven start vector so it is not orthogonal to the dominant direction
    // for structured inputs.
    let mut v = nalgebra::DVector::from_fn(n, |i, _| 1.0 + i as f64 * 0.1);
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..10_000 {
        let w = gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - estimate).abs() <= POWER_TOL * next.abs().max(1.0) {
            return next;
        }
        estimate = next;
    }
    estimate
}

fn jacobi_eigenvalues(mut s: DMatrix<f64>) -> Vec<f64> {
    let n = s.nrows();
    let scale = frobenius(&s).max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&k| k != i).map(move |k| (i, k)))
            .map(|(i, k)| s[(i, k)] * s[(i, k)])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = s[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (s[(q, q)] - s[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let skp = s[(k, p)];
                    let skq = s[(k, q)];
                    s[(k, p)] = c * skp - sn * skq;
                    s[(k, q)] = sn * skp + c * skq;
                }
                for k in 0..n {
                    let spk = s[(p, k)];
                    let sqk = s[(q, k)];
                    s[(p, k)] = c * spk - sn * sqk;
                    s[(q, k)] = sn * spk + c * sqk;
                }
            }
        }
    }
    (0..n).map(|i| s[(i, i)]).collect()
}
