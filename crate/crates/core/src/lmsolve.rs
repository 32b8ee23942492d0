//! Damped Gauss-Newton (Levenberg-Marquardt) minimizer for residual vectors
//! with finite-difference Jacobians. Used by the pose pre-estimator, the
//! template refiner and the eyebrow tracker.

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("residual is non-finite at the initial point")]
    NonFiniteInitial,
    #[error("residual became non-finite while perturbing parameter {param}")]
    NonFinitePerturbed { param: usize },
    #[error("residual dimension is zero")]
    EmptyResidual,
    #[error("fd_steps length {got} does not match parameter count {expected}")]
    StepCountMismatch { got: usize, expected: usize },
    #[error("damped normal matrix stayed singular up to mu = {mu:e}")]
    Singular { mu: f64 },
    #[error("invalid config: {0}")]
    BadConfig(&'static str),
}

/// Solver settings. `fd_steps` holds one forward-difference step per
/// parameter; callers pick steps large enough to beat interpolation noise
/// in image residuals.
#[derive(Debug, Clone)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub tau: f64,
    pub fd_steps: Vec<f64>,
}

impl LmConfig {
    pub fn new(fd_steps: Vec<f64>) -> Self {
        LmConfig { max_iterations: 10, eps1: 1e-8, eps2: 1e-8, tau: 1e-3, fd_steps }
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    fn validate(&self, n_params: usize) -> Result<(), LmError> {
        if self.max_iterations == 0 {
            return Err(LmError::BadConfig("max_iterations must be >= 1"));
        }
        if !(self.eps1 > 0.0 && self.eps2 > 0.0 && self.tau > 0.0) {
            return Err(LmError::BadConfig("eps1, eps2 and tau must be > 0"));
        }
        if self.fd_steps.len() != n_params {
            return Err(LmError::StepCountMismatch { got: self.fd_steps.len(), expected: n_params });
        }
        if !self.fd_steps.iter().all(|h| *h > 0.0) {
            return Err(LmError::BadConfig("fd_steps must all be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientSmall,
    StepSmall,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: Vec<f64>,
    /// Sum of squared residuals at `params`.
    pub final_error: f64,
    /// Number of computed update steps, accepted or rejected.
    pub iterations: usize,
    pub termination: Termination,
}

/// m x n Jacobian, row-major.
#[derive(Debug, Clone)]
pub struct Jacobian {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Jacobian {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Forward finite differences: column i is (r(a + h_i e_i) - r(a)) / h_i.
pub fn fd_jacobian(
    residual_fn: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    a: &[f64],
    fd_steps: &[f64],
    base: &[f64],
) -> Result<Jacobian, LmError> {
    let n = a.len();
    let m = base.len();
    let mut data = vec![0.0; m * n];
    let mut probe = a.to_vec();
    for j in 0..n {
        let h = fd_steps[j];
        probe[j] = a[j] + h;
        let r = residual_fn(&probe);
        probe[j] = a[j];
        if r.len() != m || !r.iter().all(|v| v.is_finite()) {
            return Err(LmError::NonFinitePerturbed { param: j });
        }
        for i in 0..m {
            data[i * n + j] = (r[i] - base[i]) / h;
        }
    }
    Ok(Jacobian { rows: m, cols: n, data })
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Solve the symmetric system A x = b by Gaussian elimination with partial
/// pivoting (n <= 6 in every caller). Returns None when singular.
fn solve_sym(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().cloned().collect();
    let mut rhs = b.to_vec();
    let scale: f64 = m.iter().flat_map(|r| r.iter().map(|v| v.abs())).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs()))?;
        if m[piv][k].abs() < 1e-14 * scale {
            return None;
        }
        m.swap(k, piv);
        rhs.swap(k, piv);
        for i in (k + 1)..n {
            let f = m[i][k] / m[k][k];
            for j in k..n {
                m[i][j] -= f * m[k][j];
            }
            rhs[i] -= f * rhs[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = ((k + 1)..n).map(|j| m[k][j] * x[j]).sum();
        x[k] = (rhs[k] - s) / m[k][k];
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Minimize the sum of squared residuals starting from `initial`.
///
/// Iterates a += da with da = -(J^T J + mu I)^-1 J^T r; mu starts at
/// tau * max(diag(J^T J)), doubles on a rejected step and shrinks by 1/3 on
/// an accepted one. Stops when the infinity norm of J^T r drops below eps1,
/// when |da| < eps2 (|a| + eps2), or at the iteration cap.
pub fn minimize(
    mut residual_fn: impl FnMut(&[f64]) -> Vec<f64>,
    initial: &[f64],
    config: &LmConfig,
) -> Result<LmResult, LmError> {
    config.validate(initial.len())?;
    let n = initial.len();
    let mut a = initial.to_vec();
    let mut r = residual_fn(&a);
    if r.is_empty() {
        return Err(LmError::EmptyResidual);
    }
    if !r.iter().all(|v| v.is_finite()) {
        return Err(LmError::NonFiniteInitial);
    }
    let mut err = sq_norm(&r);
    let mut jac = fd_jacobian(&mut residual_fn, &a, &config.fd_steps, &r)?;

    // J^T J and J^T r for the current linearization
    let normal = |jac: &Jacobian, r: &[f64]| {
        let mut jtj = vec![vec![0.0; n]; n];
        let mut jtr = vec![0.0; n];
        for i in 0..jac.rows {
            for c in 0..n {
                let jic = jac.get(i, c);
                jtr[c] += jic * r[i];
                for d in c..n {
                    jtj[c][d] += jic * jac.get(i, d);
                }
            }
        }
        for c in 0..n {
            for d in 0..c {
                jtj[c][d] = jtj[d][c];
            }
        }
        (jtj, jtr)
    };

    let (mut jtj, mut jtr) = normal(&jac, &r);
    let max_diag = (0..n).map(|i| jtj[i][i]).fold(0.0, f64::max);
    let mut mu = config.tau * if max_diag > 0.0 { max_diag } else { 1.0 };
    let mu_cap = 1e12 * config.tau;

    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < config.max_iterations {
        let grad_inf = jtr.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if grad_inf < config.eps1 {
            termination = Termination::GradientSmall;
            break;
        }

        // Solve the damped normal equations, inflating mu past singularities.
        let da = loop {
            let mut damped = jtj.clone();
            for (i, row) in damped.iter_mut().enumerate() {
                row[i] += mu;
            }
            let rhs: Vec<f64> = jtr.iter().map(|v| -v).collect();
            match solve_sym(&damped, &rhs) {
                Some(x) => break x,
                None => {
                    mu *= 2.0;
                    if mu > mu_cap {
                        return Err(LmError::Singular { mu });
                    }
                }
            }
        };
        iterations += 1;

        let step_norm = sq_norm(&da).sqrt();
        let a_norm = sq_norm(&a).sqrt();
        if step_norm < config.eps2 * (a_norm + config.eps2) {
            termination = Termination::StepSmall;
            break;
        }

        let trial: Vec<f64> = a.iter().zip(&da).map(|(x, d)| x + d).collect();
        let trial_r = residual_fn(&trial);
        let trial_err = if trial_r.len() == r.len() && trial_r.iter().all(|v| v.is_finite()) {
            sq_norm(&trial_r)
        } else {
            f64::INFINITY
        };

        if trial_err < err {
            a = trial;
            r = trial_r;
            err = trial_err;
            mu /= 3.0;
            jac = fd_jacobian(&mut residual_fn, &a, &config.fd_steps, &r)?;
            let (njtj, njtr) = normal(&jac, &r);
            jtj = njtj;
            jtr = njtr;
        } else {
            mu *= 2.0;
        }
    }

    Ok(LmResult { params: a, final_error: err, iterations, termination })
}
