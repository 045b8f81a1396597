//! Dense linear-solve helpers with an instrumented factorization counter.
//!
//! All systems in this crate are small (tens of variables), so dense LU with
//! partial pivoting is the only factorization used. The global counter lets
//! tests assert structural complexity claims, e.g. that the dual-based contact
//! normal never factorizes anything and that all step sensitivities are
//! obtained from a single factorization.

use nalgebra::{DMatrix, DVector};
use std::sync::atomic::{AtomicUsize, Ordering};

static FACTORIZATION_COUNT: AtomicUsize = AtomicUsize::new(0);

/// Total number of LU factorizations performed by this process so far.
pub fn factorization_count() -> usize {
    FACTORIZATION_COUNT.load(Ordering::Relaxed)
}

/// An LU factorization of a square matrix, counted in [`factorization_count`].
pub struct LuSolver {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl LuSolver {
    /// Factorize `a`. Returns `None` if the factorization is unusable
    /// (exactly singular pivot).
    pub fn new(a: DMatrix<f64>) -> Option<Self> {
        FACTORIZATION_COUNT.fetch_add(1, Ordering::Relaxed);
        let lu = a.lu();
        if lu.u().diagonal().iter().any(|d| *d == 0.0 || !d.is_finite()) {
            return None;
        }
        Some(LuSolver { lu })
    }

    /// Back-substitute one right-hand side.
    pub fn solve(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        self.lu.solve(b).filter(|x| x.iter().all(|v| v.is_finite()))
    }

    /// Ratio of smallest to largest pivot magnitude; a crude conditioning probe.
    pub fn pivot_ratio(&self) -> f64 {
        let diag = self.lu.u().diagonal();
        let mut min = f64::INFINITY;
        let mut max = 0.0f64;
        for d in diag.iter() {
            min = min.min(d.abs());
            max = max.max(d.abs());
        }
        if max == 0.0 {
            0.0
        } else {
            min / max
        }
    }
}

/// Smallest singular value of `a`.
pub fn smallest_singular_value(a: &DMatrix<f64>) -> f64 {
    let svd = a.clone().svd(false, false);
    svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min)
}
