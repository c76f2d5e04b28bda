//! Closed-form references: a continuous-discrete Kalman filter for linear
//! models and analytic Ornstein–Uhlenbeck / heat transition densities.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{expm, integrated_exp_times, noise_gramian};
use crate::models::{FilterModel, ScalarFn, VectorFn};
use crate::simulate::MeasurementSeries;

/// `f(x) = Ax + a`, `h(x) = Cx + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub a_offset: DVector<f64>,
    pub c: DMatrix<f64>,
    pub c_offset: DVector<f64>,
    pub hbar_nu: f64,
    pub hbar_mu: f64,
}

impl LinearModel {
    pub fn new(
        a: DMatrix<f64>,
        a_offset: DVector<f64>,
        c: DMatrix<f64>,
        c_offset: DVector<f64>,
        hbar_nu: f64,
        hbar_mu: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || a_offset.len() != n || c.ncols() != n || c_offset.len() != c.nrows() {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: c.ncols(),
            });
        }
        let finite = a
            .iter()
            .chain(a_offset.iter())
            .chain(c.iter())
            .chain(c_offset.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter {
                name: "linear model",
                reason: "entries must be finite".into(),
            });
        }
        Ok(Self {
            a,
            a_offset,
            c,
            c_offset,
            hbar_nu,
            hbar_mu,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn meas_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn to_filter_model(&self) -> Result<FilterModel> {
        let (a, av) = (self.a.clone(), self.a_offset.clone());
        let drift: VectorFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
            for i in 0..a.nrows() {
                out[i] = av[i] + (0..a.ncols()).map(|j| a[(i, j)] * x[j]).sum::<f64>();
            }
        });
        let (c, cv) = (self.c.clone(), self.c_offset.clone());
        let meas: VectorFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
            for i in 0..c.nrows() {
                out[i] = cv[i] + (0..c.ncols()).map(|j| c[(i, j)] * x[j]).sum::<f64>();
            }
        });
        let tr = self.a.trace();
        let div: ScalarFn = Arc::new(move |_| tr);
        Ok(FilterModel::new(
            "linear",
            self.state_dim(),
            self.meas_dim(),
            drift,
            meas,
            self.hbar_nu,
            self.hbar_mu,
        )?
        .with_divergence(div))
    }
}

/// Filter output at one observation time.
#[derive(Clone, Debug)]
pub struct KalmanStep {
    pub tau: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Continuous-discrete Kalman filter driven by cumulative observations.
///
/// Each interval propagates the moments exactly and then conditions on
/// `Δy = (C x + c) Δτ + noise`, noise covariance `ħμ Δτ I`, evaluated at the
/// end-of-interval state. One entry per interval `l = 1..N`.
pub fn kalman_filter(
    model: &LinearModel,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    meas: &MeasurementSeries,
) -> Result<Vec<KalmanStep>> {
    let n = model.state_dim();
    let m = model.meas_dim();
    if prior_mean.len() != n || prior_cov.nrows() != n || prior_cov.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: prior_mean.len(),
        });
    }
    if meas.meas_dim() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: meas.meas_dim(),
        });
    }
    if prior_cov.clone().cholesky().is_none() {
        return Err(Error::NonPsd { interval: 0 });
    }
    if !(model.hbar_mu > 0.0) {
        return Err(Error::InvalidParameter {
            name: "hbar_mu",
            reason: "Kalman update requires hbar_mu > 0".into(),
        });
    }
    let q = DMatrix::from_diagonal_element(n, n, model.hbar_nu);
    let mut mean = prior_mean.clone();
    let mut cov = prior_cov.clone();
    let mut out = Vec::with_capacity(meas.intervals());
    for l in 1..=meas.intervals() {
        let dtau = meas.times[l] - meas.times[l - 1];
        let phi = expm(&(&model.a * dtau));
        mean = &phi * &mean + integrated_exp_times(&model.a, &model.a_offset, dtau);
        cov = &phi * &cov * phi.transpose() + noise_gramian(&model.a, &q, dtau);

        let dy = DVector::from_vec(meas.increment(l));
        let h = &model.c * dtau;
        let r = DMatrix::from_diagonal_element(m, m, model.hbar_mu * dtau);
        let innov = dy - (&h * &mean + &model.c_offset * dtau);
        let s = &h * &cov * h.transpose() + &r;
        let s_inv = s.clone().cholesky().ok_or(Error::NonPsd { interval: l })?.inverse();
        let gain = &cov * h.transpose() * s_inv;
        mean += &gain * innov;
        let ident = DMatrix::<f64>::identity(n, n);
        let ikh = &ident - &gain * &h;
        // Joseph form keeps the update symmetric positive semi-definite.
        cov = &ikh * &cov * ikh.transpose() + &gain * &r * gain.transpose();
        cov = (&cov + cov.transpose()) * 0.5;
        if cov.clone().cholesky().is_none() {
            return Err(Error::NonPsd { interval: l });
        }
        out.push(KalmanStep {
            tau: meas.times[l],
            mean: mean.clone(),
            cov: cov.clone(),
        });
    }
    Ok(out)
}

/// CSV `tau,mean_1..mean_n,cov_11..cov_nn`.
pub fn write_kalman_csv<W: Write>(steps: &[KalmanStep], mut w: W) -> Result<()> {
    let n = steps.first().map_or(0, |s| s.mean.len());
    let mut header = vec!["tau".to_string()];
    header.extend((1..=n).map(|i| format!("mean_{i}")));
    for i in 1..=n {
        for j in 1..=n {
            header.push(format!("cov_{i}{j}"));
        }
    }
    writeln!(w, "{}", header.join(","))?;
    for s in steps {
        let mut row = vec![s.tau.to_string()];
        row.extend(s.mean.iter().map(|v| v.to_string()));
        for i in 0..n {
            for j in 0..n {
                row.push(s.cov[(i, j)].to_string());
            }
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Transition density of `dx = −a x dt + dv`, `Var dv = ħν dt`:
/// Gaussian with mean `x₀e^{−at}` and variance `ħν(1 − e^{−2at})/(2a)`.
pub fn ou_transition_density(a: f64, hbar_nu: f64, t: f64, x0: f64, x: f64) -> f64 {
    let mean = x0 * (-a * t).exp();
    let var = hbar_nu * (-(-2.0 * a * t).exp_m1()) / (2.0 * a);
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Free (heat) kernel `(2πħνt)^{−n/2} exp(−|x − x₀|²/(2ħνt))`.
pub fn heat_kernel(hbar_nu: f64, t: f64, x0: &[f64], x: &[f64]) -> f64 {
    let n = x.len() as i32;
    let d2: f64 = x.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum();
    (-d2 / (2.0 * hbar_nu * t)).exp() / (2.0 * std::f64::consts::PI * hbar_nu * t).powf(n as f64 / 2.0)
}
