//! Non-negative least squares, Lawson-Hanson active set.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solution and diagnostics of an NNLS problem.
#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    /// ‖Ax - b‖₂.
    pub residual_norm: f64,
    /// Gradient of ½‖Ax - b‖² at `x`, i.e. `Aᵀ(Ax - b)`.
    pub gradient: DVector<f64>,
    pub iterations: usize,
}

/// `min ‖Ax - b‖₂ subject to x ≥ 0`.
///
/// Zero columns are pinned to 0. The returned point satisfies the KKT
/// conditions up to a tolerance scaled by `‖A‖·‖b‖`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<NnlsSolution> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::Input("nnls needs a non-empty matrix".into()));
    }
    if b.len() != m {
        return Err(Error::Input(format!("nnls: matrix has {m} rows but rhs has {}", b.len())));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Input("nnls: non-finite entries".into()));
    }

    let anorm = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let tol = 10.0 * f64::EPSILON * anorm * (anorm * b.norm()).max(1.0) * (m.max(n) as f64);
    let usable: Vec<bool> = (0..n).map(|j| a.column(j).iter().any(|&v| v != 0.0)).collect();

    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let max_iter = 3 * n + 30;
    let mut iterations = 0;

    loop {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && usable[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::Numerical("nnls did not converge".into()));
            }
            let s = restricted_lsq(a, b, &passive);
            let blocking: Vec<usize> = (0..n).filter(|&i| passive[i] && s[i] <= 0.0).collect();
            if blocking.is_empty() {
                x = s;
                break;
            }
            // step from x toward s until the first passive coordinate hits zero
            let alpha = blocking
                .iter()
                .map(|&i| x[i] / (x[i] - s[i]))
                .fold(f64::INFINITY, f64::min);
            x += (s - &x) * alpha;
            for i in 0..n {
                if passive[i] && x[i] <= tol {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
        }
    }

    let r = a * &x - b;
    Ok(NnlsSolution {
        gradient: a.transpose() * &r,
        residual_norm: r.norm(),
        x,
        iterations,
    })
}

/// Unconstrained least squares on the columns flagged in `free`; other
/// coordinates are 0.
fn restricted_lsq(a: &DMatrix<f64>, b: &DVector<f64>, free: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..free.len()).filter(|&j| free[j]).collect();
    let mut out = DVector::zeros(free.len());
    if cols.is_empty() {
        return out;
    }
    let sub = a.select_columns(&cols);
    let svd = sub.svd(true, true);
    let eps = f64::EPSILON * svd.singular_values.max() * (a.nrows().max(cols.len()) as f64);
    let z = svd.solve(b, eps).expect("u and v were computed");
    for (k, &j) in cols.iter().enumerate() {
        out[j] = z[k];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    /// Best feasible unconstrained solution over all 2^n supports.
    fn brute_force(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, f64) {
        let n = a.ncols();
        let mut best = (DVector::zeros(n), b.norm_squared());
        for mask in 1..(1u32 << n) {
            let free: Vec<bool> = (0..n).map(|j| mask & (1 << j) != 0).collect();
            let s = restricted_lsq(a, b, &free);
            if s.iter().any(|&v| v < 0.0) {
                continue;
            }
            let obj = (a * &s - b).norm_squared();
            if obj < best.1 {
                best = (s, obj);
            }
        }
        best
    }

    fn assert_kkt(a: &DMatrix<f64>, b: &DVector<f64>, sol: &NnlsSolution, tol: f64) {
        let scale = (a.transpose() * b).amax().max(1.0);
        for j in 0..a.ncols() {
            assert!(sol.x[j] >= 0.0);
            // gradient of ½‖Ax-b‖² is ≥ 0 everywhere and 0 on the support
            assert!(sol.gradient[j] >= -tol * scale, "dual infeasible at {j}: {}", sol.gradient[j]);
            assert!((sol.x[j] * sol.gradient[j]).abs() <= tol * scale * sol.x.amax().max(1.0));
        }
    }

    #[test]
    fn identity_projects_onto_orthant() {
        let a = DMatrix::identity(2, 2);
        let sol = nnls(&a, &DVector::from_vec(vec![1.0, -1.0])).unwrap();
        assert_eq!(sol.x.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn identity_with_nonnegative_rhs_returns_rhs() {
        let a = DMatrix::identity(4, 4);
        let b = DVector::from_vec(vec![0.5, 0.0, 3.0, 2.0]);
        assert!((nnls(&a, &b).unwrap().x - &b).amax() < 1e-14);
    }

    #[test]
    fn zero_column_is_pinned() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 1.0, 0.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 1.0]);
        let sol = nnls(&a, &b).unwrap();
        assert_eq!(sol.x[1], 0.0);
        assert!((sol.x[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn one_by_one_is_clamped_ratio() {
        let a = DMatrix::from_element(1, 1, 4.0);
        assert!((nnls(&a, &DVector::from_element(1, 2.0)).unwrap().x[0] - 0.5).abs() < 1e-15);
        assert_eq!(nnls(&a, &DVector::from_element(1, -2.0)).unwrap().x[0], 0.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        let a = DMatrix::<f64>::zeros(2, 2);
        assert!(nnls(&a, &DVector::zeros(3)).is_err());
        let mut a = DMatrix::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(nnls(&a, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let a = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
            let b = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
            let sol = nnls(&a, &b).unwrap();
            let (xb, ob) = brute_force(&a, &b);
            assert!((sol.residual_norm.powi(2) - ob).abs() < 1e-10);
            assert!((&sol.x - xb).amax() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn kkt_holds(
            rows in 1usize..8,
            cols in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0));
            let b = DVector::from_fn(rows, |_, _| rng.random_range(-2.0..2.0));
            let sol = nnls(&a, &b).unwrap();
            assert_kkt(&a, &b, &sol, 1e-10);
        }

        #[test]
        fn column_scaling_rescales_solution(seed in any::<u64>(), s in 0.1f64..10.0) {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
            let b = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let x = nnls(&a, &b).unwrap().x;
            let mut a2 = a.clone();
            a2.column_mut(1).scale_mut(s);
            let x2 = nnls(&a2, &b).unwrap().x;
            prop_assert!((x2[1] * s - x[1]).abs() < 1e-8 * x[1].abs().max(1.0));
        }
    }
}
