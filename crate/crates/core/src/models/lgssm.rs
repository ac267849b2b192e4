//! Linear-Gaussian state-space model, Kalman filter and the locally optimal proposal.

use nalgebra::{DMatrix, DVector};

use super::{Dataset, StateSpaceModel};
use crate::error::{Error, Result};
use crate::linalg::{
    cholesky, is_diagonal, mat_t_vec_acc, mat_vec, symmetrize, GaussianDensity, LN_2PI,
};
use crate::rng::{standard_normal_vec, stream_rng};

/// How the observation matrix of generated experiment models is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CKind {
    /// `C` observes the first `d_y` state coordinates.
    Sparse,
    /// `C_ij ~ N(0, 1)`.
    Dense,
}

/// `x_t = A x_{t-1} + v_t`, `y_t = C x_t + e_t`, `v_t ~ N(0, Q)`, `e_t ~ N(0, R)`.
#[derive(Debug, Clone)]
pub struct LgssmModel {
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    initial: GaussianDensity,
    q_chol: DMatrix<f64>,
    r_chol: DMatrix<f64>,
    q_logdet: f64,
    r_logdet: f64,
    q_inv: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    p0_inv: DMatrix<f64>,
}

impl LgssmModel {
    pub fn new(
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        initial: GaussianDensity,
    ) -> Result<Self> {
        let dx = a.nrows();
        let dy = c.nrows();
        if dx == 0 || a.ncols() != dx {
            return Err(Error::Dimension("A must be square and non-empty".into()));
        }
        if dy == 0 || c.ncols() != dx {
            return Err(Error::Dimension(format!("C must be d_y x {dx}")));
        }
        if q.shape() != (dx, dx) || r.shape() != (dy, dy) || initial.dim() != dx {
            return Err(Error::Dimension("Q, R or initial density has wrong size".into()));
        }
        let q_chol = cholesky(&q, "Q")?;
        let r_chol = cholesky(&r, "R")?;
        let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let inv = |l: &DMatrix<f64>| {
            let linv = l
                .clone()
                .solve_lower_triangular(&DMatrix::identity(l.nrows(), l.nrows()))
                .expect("positive diagonal");
            linv.transpose() * linv
        };
        Ok(Self {
            q_logdet: logdet(&q_chol),
            r_logdet: logdet(&r_chol),
            q_inv: inv(&q_chol),
            r_inv: inv(&r_chol),
            p0_inv: inv(initial.chol()),
            a,
            c,
            q,
            r,
            initial,
            q_chol,
            r_chol,
        })
    }

    /// Scalar model with `x_1 ~ N(0, 1)`.
    pub fn scalar(a: f64, q: f64, c: f64, r: f64) -> Result<Self> {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self::new(m(a), m(c), m(q), m(r), GaussianDensity::standard(1))
    }

    /// `A_ij = alpha^{|i-j|+1}`, `Q = q_var I`, `R = r_var I`, `x_1 ~ N(0, I)`.
    /// A dense `C` is drawn from `seed`.
    pub fn banded(
        dx: usize,
        dy: usize,
        alpha: f64,
        q_var: f64,
        r_var: f64,
        c_kind: CKind,
        seed: u64,
    ) -> Result<Self> {
        if dy > dx && c_kind == CKind::Sparse {
            return Err(Error::Dimension("sparse C needs d_y <= d_x".into()));
        }
        let a = DMatrix::from_fn(dx, dx, |i, j| alpha.powi(i.abs_diff(j) as i32 + 1));
        let c = match c_kind {
            CKind::Sparse => DMatrix::from_fn(dy, dx, |i, j| if i == j { 1.0 } else { 0.0 }),
            CKind::Dense => {
                let mut rng = stream_rng(seed, 0x0c);
                DMatrix::from_row_slice(dy, dx, &standard_normal_vec(&mut rng, dx * dy))
            }
        };
        Self::new(
            a,
            c,
            DMatrix::identity(dx, dx) * q_var,
            DMatrix::identity(dy, dy) * r_var,
            GaussianDensity::standard(dx),
        )
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn initial(&self) -> &GaussianDensity {
        &self.initial
    }

    fn transition_mean(&self, x_prev: Option<&[f64]>, out: &mut [f64]) {
        match x_prev {
            Some(xp) => mat_vec(&self.a, xp, out),
            None => out.copy_from_slice(self.initial.mean().as_slice()),
        }
    }

    /// Covariance and precision of `f(· | x_prev)`.
    fn transition_cov(&self, first: bool) -> (&DMatrix<f64>, &DMatrix<f64>) {
        if first {
            (self.initial.cov(), &self.p0_inv)
        } else {
            (&self.q, &self.q_inv)
        }
    }
}

/// Gaussian log density with lower Cholesky factor `l`; `diff` is overwritten.
fn chol_logpdf(l: &DMatrix<f64>, log_det: f64, diff: &mut [f64]) -> f64 {
    let d = diff.len();
    let mut quad = 0.0;
    for i in 0..d {
        let mut v = diff[i];
        for j in 0..i {
            v -= l[(i, j)] * diff[j];
        }
        v /= l[(i, i)];
        diff[i] = v;
        quad += v * v;
    }
    -0.5 * (d as f64 * LN_2PI + log_det + quad)
}

impl StateSpaceModel for LgssmModel {
    fn name(&self) -> &'static str {
        "lgssm"
    }
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    fn log_transition(&self, x_prev: Option<&[f64]>, x: &[f64]) -> f64 {
        let Some(xp) = x_prev else {
            return self.initial.logpdf(x);
        };
        let mut diff = vec![0.0; x.len()];
        mat_vec(&self.a, xp, &mut diff);
        for (d, xi) in diff.iter_mut().zip(x) {
            *d = xi - *d;
        }
        chol_logpdf(&self.q_chol, self.q_logdet, &mut diff)
    }

    fn log_observation(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut diff = vec![0.0; y.len()];
        mat_vec(&self.c, x, &mut diff);
        for (d, yi) in diff.iter_mut().zip(y) {
            *d = yi - *d;
        }
        chol_logpdf(&self.r_chol, self.r_logdet, &mut diff)
    }

    fn transition_from_noise(&self, x_prev: Option<&[f64]>, eps: &[f64], out: &mut [f64]) {
        match x_prev {
            None => self.initial.sample_from_noise(eps, out),
            Some(xp) => {
                mat_vec(&self.a, xp, out);
                let mut noise = vec![0.0; out.len()];
                mat_vec(&self.q_chol, eps, &mut noise);
                for (o, n) in out.iter_mut().zip(noise) {
                    *o += n;
                }
            }
        }
    }

    fn observation_from_noise(&self, x: &[f64], eps: &[f64], out: &mut [f64]) {
        mat_vec(&self.c, x, out);
        let mut noise = vec![0.0; out.len()];
        mat_vec(&self.r_chol, eps, &mut noise);
        for (o, n) in out.iter_mut().zip(noise) {
            *o += n;
        }
    }

    fn with_theta(&self, theta: &[f64]) -> Result<Box<dyn StateSpaceModel>> {
        if !theta.is_empty() {
            return Err(Error::InvalidArgument(
                "the linear-Gaussian model has no learnable parameters".into(),
            ));
        }
        Ok(Box::new(self.clone()))
    }

    fn grad_log_transition(
        &self,
        x_prev: Option<&[f64]>,
        x: &[f64],
        coeff: f64,
        gx: &mut [f64],
        gx_prev: Option<&mut [f64]>,
        _gtheta: Option<&mut [f64]>,
    ) {
        let d = x.len();
        let mut resid = vec![0.0; d];
        self.transition_mean(x_prev, &mut resid);
        for (r, xi) in resid.iter_mut().zip(x) {
            *r = xi - *r;
        }
        let (_, prec) = self.transition_cov(x_prev.is_none());
        // prec * resid (symmetric)
        let mut pr = vec![0.0; d];
        mat_vec(prec, &resid, &mut pr);
        for (g, v) in gx.iter_mut().zip(&pr) {
            *g -= coeff * v;
        }
        if let (Some(_), Some(gp)) = (x_prev, gx_prev) {
            mat_t_vec_acc(&self.a, &pr, coeff, gp);
        }
    }

    fn grad_log_observation(
        &self,
        x: &[f64],
        y: &[f64],
        coeff: f64,
        gx: &mut [f64],
        _gtheta: Option<&mut [f64]>,
    ) {
        let mut resid = vec![0.0; y.len()];
        mat_vec(&self.c, x, &mut resid);
        for (r, yi) in resid.iter_mut().zip(y) {
            *r = yi - *r;
        }
        let mut pr = vec![0.0; y.len()];
        mat_vec(&self.r_inv, &resid, &mut pr);
        mat_t_vec_acc(&self.c, &pr, coeff, gx);
    }

    fn diag_gaussian_transition(
        &self,
        x_prev: Option<&[f64]>,
        mean: &mut [f64],
        var: &mut [f64],
    ) -> bool {
        let (cov, _) = self.transition_cov(x_prev.is_none());
        if !is_diagonal(cov) {
            return false;
        }
        self.transition_mean(x_prev, mean);
        for (i, v) in var.iter_mut().enumerate() {
            *v = cov[(i, i)];
        }
        true
    }

    fn diag_gaussian_transition_vjp(
        &self,
        x_prev: Option<&[f64]>,
        v_mean: &[f64],
        _v_var: &[f64],
        gx_prev: Option<&mut [f64]>,
        _gtheta: Option<&mut [f64]>,
    ) {
        if let (Some(_), Some(gp)) = (x_prev, gx_prev) {
            mat_t_vec_acc(&self.a, v_mean, 1.0, gp);
        }
    }
}

/// Exact `log p(y_{1:T})` by the Kalman filter.
pub fn lgssm_log_marginal(model: &LgssmModel, data: &Dataset) -> Result<f64> {
    if data.obs_dim() != model.obs_dim() {
        return Err(Error::Dimension(format!(
            "data has {} columns, model observes {}",
            data.obs_dim(),
            model.obs_dim()
        )));
    }
    let dx = model.state_dim();
    let c = &model.c;
    let mut m = model.initial.mean().clone();
    let mut p = model.initial.cov().clone();
    let mut total = 0.0;
    let eye = DMatrix::<f64>::identity(dx, dx);
    for (t, y) in data.rows().enumerate() {
        let numerical = |msg: &str| Error::Numerical {
            t,
            msg: msg.to_string(),
        };
        let mut s = c * &p * c.transpose() + &model.r;
        symmetrize(&mut s);
        let innov = DVector::from_column_slice(y) - c * &m;
        let s_chol = nalgebra::Cholesky::new(s).ok_or_else(|| numerical("innovation covariance not positive definite"))?;
        let logdet = 2.0 * s_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let sol = s_chol.solve(&innov);
        total += -0.5 * (y.len() as f64 * LN_2PI + logdet + innov.dot(&sol));
        let k = s_chol.solve(&(c * &p)).transpose();
        m += &k * innov;
        let ikc = &eye - &k * c;
        p = &ikc * &p * ikc.transpose() + &k * &model.r * k.transpose();
        symmetrize(&mut p);
        if p.iter().any(|v| !v.is_finite()) || !total.is_finite() {
            return Err(numerical("non-finite filtering covariance"));
        }
        m = &model.a * m;
        p = &model.a * p * model.a.transpose() + &model.q;
        symmetrize(&mut p);
    }
    Ok(total)
}

/// The Gaussian proportional to `f(x | x_prev) g(y | x)`, together with
/// `log ∫ f(x | x_prev) g(y | x) dx`.
pub fn lgssm_optimal_proposal(
    model: &LgssmModel,
    x_prev: Option<&[f64]>,
    y: &[f64],
) -> Result<(GaussianDensity, f64)> {
    let dx = model.state_dim();
    let mut mf = vec![0.0; dx];
    model.transition_mean(x_prev, &mut mf);
    let (prior_cov, _) = model.transition_cov(x_prev.is_none());
    let post = OptimalStep::new(model, prior_cov)?;
    let mf = DVector::from_vec(mf);
    let (mean, lognorm) = post.posterior_mean(&model.c, &mf, y);
    let density = GaussianDensity::new(mean, post.cov.clone())?;
    Ok((density, lognorm))
}

/// Parts of the `f · g` product that do not depend on `x_prev` or `y`.
#[derive(Debug, Clone)]
pub(crate) struct OptimalStep {
    pub(crate) cov: DMatrix<f64>,
    pub(crate) chol: DMatrix<f64>,
    pub(crate) log_det: f64,
    gain: DMatrix<f64>,
    marg_chol: DMatrix<f64>,
    marg_logdet: f64,
}

impl OptimalStep {
    pub(crate) fn new(model: &LgssmModel, prior_cov: &DMatrix<f64>) -> Result<Self> {
        let c = &model.c;
        let mut s = c * prior_cov * c.transpose() + &model.r;
        symmetrize(&mut s);
        let s_chol = nalgebra::Cholesky::new(s.clone()).ok_or(Error::NotPositiveDefinite("C P Cᵀ + R"))?;
        let gain = s_chol.solve(&(c * prior_cov)).transpose();
        let dx = prior_cov.nrows();
        let ikc = DMatrix::identity(dx, dx) - &gain * c;
        let mut cov = &ikc * prior_cov * ikc.transpose() + &gain * &model.r * gain.transpose();
        symmetrize(&mut cov);
        let chol = cholesky(&cov, "optimal proposal covariance")?;
        let log_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let marg_chol = s_chol.l();
        let marg_logdet = 2.0 * marg_chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            cov,
            chol,
            log_det,
            gain,
            marg_chol,
            marg_logdet,
        })
    }

    /// Posterior mean and the log marginal `log N(y; C m_f, C P Cᵀ + R)`.
    pub(crate) fn posterior_mean(
        &self,
        c: &DMatrix<f64>,
        mf: &DVector<f64>,
        y: &[f64],
    ) -> (DVector<f64>, f64) {
        let innov = DVector::from_column_slice(y) - c * mf;
        let mean = mf + &self.gain * &innov;
        let mut diff = innov.as_slice().to_vec();
        let lognorm = chol_logpdf(&self.marg_chol, self.marg_logdet, &mut diff);
        (mean, lognorm)
    }
}
