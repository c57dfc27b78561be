//! Sparse direct solver behind a small seam, so the stepping loop never touches the
//! backing library's types. The sparsity pattern of the Newton matrix is fixed for a
//! given mesh and constraint set, so the symbolic analysis is done once and only the
//! numeric factorization repeats.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};

use crate::error::{CoreError, Result};
use crate::Real;

pub struct SparseLu {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    symbolic: Option<SymbolicLu<usize>>,
}

impl SparseLu {
    /// Take ownership of a square CSC pattern (row indices sorted within each column).
    pub fn new(n: usize, col_ptr: Vec<usize>, row_idx: Vec<usize>) -> Self {
        SparseLu { n, col_ptr, row_idx, symbolic: None }
    }

    /// Factor the matrix given by `values` on the stored pattern and overwrite `rhs`
    /// with the solution.
    pub fn solve_in_place(&mut self, values: &[Real], rhs: &mut [Real]) -> Result<()> {
        if values.len() != self.row_idx.len() || rhs.len() != self.n {
            return Err(CoreError::LinearSolve("value/rhs length mismatch".into()));
        }
        let sym_ref = SymbolicSparseColMatRef::new_checked(
            self.n,
            self.n,
            &self.col_ptr,
            None,
            &self.row_idx,
        );
        let mat = SparseColMatRef::new(sym_ref, values);
        if self.symbolic.is_none() {
            let s = SymbolicLu::try_new(sym_ref)
                .map_err(|e| CoreError::LinearSolve(format!("symbolic analysis: {e:?}")))?;
            self.symbolic = Some(s);
        }
        let lu = Lu::try_new_with_symbolic(self.symbolic.clone().unwrap(), mat)
            .map_err(|e| CoreError::LinearSolve(format!("numeric factorization: {e:?}")))?;
        let b = faer::Mat::<Real>::from_fn(self.n, 1, |i, _| rhs[i]);
        let x = lu.solve(&b);
        for i in 0..self.n {
            let v = x[(i, 0)];
            if !v.is_finite() {
                return Err(CoreError::LinearSolve("non-finite solution (singular system?)".into()));
            }
            rhs[i] = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// CSC of [[4,0,1],[0,3,0],[1,0,2]] (symmetric, well conditioned)
    fn small_pattern() -> (Vec<usize>, Vec<usize>, Vec<Real>) {
        let col_ptr = vec![0, 2, 3, 5];
        let row_idx = vec![0, 2, 1, 0, 2];
        let values = vec![4.0, 1.0, 3.0, 1.0, 2.0];
        (col_ptr, row_idx, values)
    }

    #[test]
    fn solves_small_system() {
        let (cp, ri, vals) = small_pattern();
        let mut lu = SparseLu::new(3, cp, ri);
        let mut rhs = vec![6.0, 3.0, 5.0]; // A x = b with x = [1, 1, 2]
        lu.solve_in_place(&vals, &mut rhs).unwrap();
        assert_relative_eq!(rhs[0], 1.0, max_relative = 1e-13);
        assert_relative_eq!(rhs[1], 1.0, max_relative = 1e-13);
        assert_relative_eq!(rhs[2], 2.0, max_relative = 1e-13);
    }

    #[test]
    fn reuses_symbolic_across_refactorizations() {
        let (cp, ri, vals) = small_pattern();
        let mut lu = SparseLu::new(3, cp, ri);
        let mut rhs = vec![6.0, 3.0, 5.0];
        lu.solve_in_place(&vals, &mut rhs).unwrap();
        // same pattern, different values: A = diag(2, 2, 2) plus the off-diagonal pair
        let vals2 = vec![2.0, 1.0, 2.0, 1.0, 2.0];
        let mut rhs2 = vec![4.0, 2.0, 5.0];
        lu.solve_in_place(&vals2, &mut rhs2).unwrap();
        // check by multiplying back
        let ax0 = 2.0 * rhs2[0] + 1.0 * rhs2[2];
        let ax1 = 2.0 * rhs2[1];
        let ax2 = 1.0 * rhs2[0] + 2.0 * rhs2[2];
        assert_relative_eq!(ax0, 4.0, max_relative = 1e-13);
        assert_relative_eq!(ax1, 2.0, max_relative = 1e-13);
        assert_relative_eq!(ax2, 5.0, max_relative = 1e-13);
    }

    #[test]
    fn singular_matrix_is_reported() {
        // [[1, 1], [1, 1]] is singular
        let col_ptr = vec![0, 2, 4];
        let row_idx = vec![0, 1, 0, 1];
        let values = vec![1.0, 1.0, 1.0, 1.0];
        let mut lu = SparseLu::new(2, col_ptr, row_idx);
        let mut rhs = vec![1.0, 2.0];
        let out = lu.solve_in_place(&values, &mut rhs);
        assert!(out.is_err(), "singular system must not report success");
    }
}
