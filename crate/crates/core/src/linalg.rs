//! Cholesky factorisation with an escalating diagonal jitter.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Jitter schedule relative to a variance scale: start at `1e-10·scale`,
/// multiply by 10 on each failure, give up after `1e-6·scale`.
#[derive(Debug, Clone, Copy)]
pub struct JitterSchedule {
    pub start: f64,
    pub max: f64,
    pub try_without: bool,
}

impl JitterSchedule {
    pub fn relative_to(scale: f64) -> Self {
        Self {
            start: 1e-10 * scale,
            max: 1e-6 * scale,
            try_without: false,
        }
    }

    /// Same as [`relative_to`](Self::relative_to) but attempts the bare
    /// matrix first.
    pub fn exact_first(scale: f64) -> Self {
        Self {
            try_without: true,
            ..Self::relative_to(scale)
        }
    }
}

/// Factorises `a + jitter·I` for the smallest jitter on the schedule that
/// succeeds. Returns the factor and the jitter that was used.
pub fn cholesky_jittered(
    a: &DMatrix<f64>,
    schedule: JitterSchedule,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch {
            op: "cholesky",
            left: vec![a.nrows(), a.ncols()],
            right: vec![n, n],
        });
    }
    if schedule.try_without {
        if let Some(c) = Cholesky::new(a.clone()) {
            return Ok((c, 0.0));
        }
    }
    let mut jitter = schedule.start;
    while jitter <= schedule.max * (1.0 + 1e-9) && jitter > 0.0 {
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    let diag = a.diagonal();
    Err(Error::Cholesky {
        n,
        max_jitter: schedule.max,
        min_diag: diag.iter().copied().fold(f64::INFINITY, f64::min),
        max_diag: diag.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Row-major slice to a square `DMatrix`.
pub fn square_from_row_major(data: &[f64], n: usize) -> DMatrix<f64> {
    debug_assert_eq!(data.len(), n * n);
    DMatrix::from_row_slice(n, n, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorises_spd_without_escalation() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let (c, j) = cholesky_jittered(&a, JitterSchedule::exact_first(1.0)).unwrap();
        assert_eq!(j, 0.0);
        let l = c.l();
        assert!((&l * l.transpose() - &a).norm() < 1e-12);
    }

    #[test]
    fn singular_matrix_needs_jitter() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (_, j) = cholesky_jittered(&a, JitterSchedule::relative_to(1.0)).unwrap();
        assert!(j > 0.0 && j <= 1e-6);
    }

    #[test]
    fn indefinite_matrix_reports_diagnostics() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match cholesky_jittered(&a, JitterSchedule::relative_to(1.0)) {
            Err(Error::Cholesky { n, min_diag, .. }) => {
                assert_eq!(n, 2);
                assert_eq!(min_diag, -1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
