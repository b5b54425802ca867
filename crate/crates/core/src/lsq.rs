//! Thin adapter from closures to the Levenberg-Marquardt solver.

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::storage::Owned;
use nalgebra::{DMatrix, DVector, Dyn};

struct Closures<R, J> {
    x: DVector<f64>,
    r: R,
    j: J,
}

impl<R, J> LeastSquaresProblem<f64, Dyn, Dyn> for Closures<R, J>
where
    R: Fn(&[f64]) -> Option<Vec<f64>>,
    J: Fn(&[f64]) -> Option<DMatrix<f64>>,
{
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, Dyn>;
    type ParameterStorage = Owned<f64, Dyn>;

    fn set_params(&mut self, x: &DVector<f64>) {
        self.x.copy_from(x);
    }

    fn params(&self) -> DVector<f64> {
        self.x.clone()
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        (self.r)(self.x.as_slice()).map(DVector::from_vec)
    }

    fn jacobian(&self) -> Option<DMatrix<f64>> {
        (self.j)(self.x.as_slice())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LsqResult {
    pub x: Vec<f64>,
    pub evaluations: usize,
    pub termination: String,
    pub success: bool,
}

pub(crate) fn minimize<R, J>(x0: &[f64], r: R, j: J, patience: usize) -> LsqResult
where
    R: Fn(&[f64]) -> Option<Vec<f64>>,
    J: Fn(&[f64]) -> Option<DMatrix<f64>>,
{
    let problem = Closures {
        x: DVector::from_column_slice(x0),
        r,
        j,
    };
    let (done, report) = LevenbergMarquardt::new().with_patience(patience).minimize(problem);
    LsqResult {
        x: done.x.as_slice().to_vec(),
        evaluations: report.number_of_evaluations,
        success: report.termination.was_successful(),
        termination: format!("{:?}", report.termination),
    }
}

/// Forward-difference Jacobian of `f` at `x`, given r0 = f(x).
pub(crate) fn forward_jacobian<F>(x: &[f64], r0: &[f64], f: F) -> Option<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let mut jac = DMatrix::zeros(r0.len(), x.len());
    let mut xp = x.to_vec();
    for p in 0..x.len() {
        let h = 1e-7 * x[p].abs().max(1.0);
        xp[p] = x[p] + h;
        let rp = f(&xp)?;
        xp[p] = x[p];
        for (i, (a, b)) in rp.iter().zip(r0).enumerate() {
            jac[(i, p)] = (a - b) / h;
        }
    }
    Some(jac)
}

/// Linear least squares by SVD; returns the coefficients and the residual b - Ax.
pub(crate) fn linear(a: &DMatrix<f64>, b: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    if a.ncols() == 0 {
        return Some((Vec::new(), b.to_vec()));
    }
    let rhs = DVector::from_column_slice(b);
    let svd = a.clone().svd(true, true);
    let tol = 1e-13 * svd.singular_values.max();
    let x = svd.solve(&rhs, tol).ok()?;
    let r = &rhs - a * &x;
    Some((x.as_slice().to_vec(), r.as_slice().to_vec()))
}
