//! Euler–Maruyama ground truth for the signal and measurement processes.
//!
//! Randomness comes from `ChaCha8Rng::seed_from_u64(seed)`; the state path and
//! the measurement noise use separate streams of the same seed, so a fixed
//! seed reproduces every output bit for bit.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::FilterModel;

const STATE_STREAM: u64 = 0;
const MEASUREMENT_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

/// Observation times `τ₀ < τ₁ < …` and cumulative observations `y(τ_l)`, `y(τ₀) = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSeries {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl MeasurementSeries {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() != values.len() || times.is_empty() {
            return Err(Error::TimeMismatch(format!(
                "{} times but {} observations",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::TimeMismatch("observation times must increase".into()));
        }
        if values[0].iter().any(|v| *v != 0.0) {
            return Err(Error::InvalidParameter {
                name: "y_values",
                reason: "cumulative observations must start at y(τ₀) = 0".into(),
            });
        }
        Ok(Self { times, values })
    }

    pub fn meas_dim(&self) -> usize {
        self.values[0].len()
    }

    /// `y(τ_l) − y(τ_{l−1})` for `l ≥ 1`.
    pub fn increment(&self, l: usize) -> Vec<f64> {
        self.values[l]
            .iter()
            .zip(&self.values[l - 1])
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn intervals(&self) -> usize {
        self.times.len() - 1
    }

    /// CSV `tau,y_1..y_m`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (1..=self.meas_dim()).map(|k| format!("y_{k}")).collect();
        writeln!(w, "tau,{}", header.join(","))?;
        for (t, y) in self.times.iter().zip(&self.values) {
            let row: Vec<String> = y.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{t},{}", row.join(","))?;
        }
        Ok(())
    }
}

impl Trajectory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.states.first().map_or(0, |s| s.len());
        let header: Vec<String> = (1..=n).map(|k| format!("x_{k}")).collect();
        writeln!(w, "t,{}", header.join(","))?;
        for (t, x) in self.times.iter().zip(&self.states) {
            let row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{t},{}", row.join(","))?;
        }
        Ok(())
    }

    /// Index of the path node at time `t`, if `t` lies on the time grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let t0 = self.times[0];
        let dt = if self.times.len() > 1 {
            self.times[1] - self.times[0]
        } else {
            return (t == t0).then_some(0);
        };
        let k = ((t - t0) / dt).round();
        if k < 0.0 || k as usize >= self.times.len() {
            return None;
        }
        let k = k as usize;
        ((self.times[k] - t).abs() <= 1e-9 * dt.max(t.abs())).then_some(k)
    }
}

/// Options for [`simulate_state`].
#[derive(Clone, Copy, Debug)]
pub struct SimOptions {
    /// Abort when `|x|∞` exceeds this bound.
    pub blowup_bound: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { blowup_bound: 1e6 }
    }
}

fn step_count(t0: f64, t1: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t1 > t0) || dt > (t1 - t0) * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter {
            name: "dt",
            reason: format!("need 0 < dt <= t1 - t0, got dt = {dt} on [{t0}, {t1}]"),
        });
    }
    let steps = ((t1 - t0) / dt).round();
    if ((t1 - t0) / dt - steps).abs() > 1e-6 {
        return Err(Error::TimeMismatch(format!(
            "span {} is not an integer multiple of dt = {dt}",
            t1 - t0
        )));
    }
    Ok(steps as usize)
}

/// Euler–Maruyama path `x_{k+1} = x_k + f(x_k) dt + √(ħν dt) ξ_k`.
pub fn simulate_state(model: &FilterModel, x0: &[f64], t0: f64, t1: f64, dt: f64, seed: u64) -> Result<Trajectory> {
    simulate_state_with(model, x0, t0, t1, dt, seed, SimOptions::default())
}

pub fn simulate_state_with(
    model: &FilterModel,
    x0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
    seed: u64,
    opts: SimOptions,
) -> Result<Trajectory> {
    let n = model.state_dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x0.len(),
        });
    }
    let steps = step_count(t0, t1, dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STATE_STREAM);
    let noise = (model.hbar_nu() * dt).sqrt();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    let mut f = vec![0.0; n];
    times.push(t0);
    states.push(x.clone());
    for k in 1..=steps {
        model.drift_into(&x, &mut f);
        for i in 0..n {
            let xi: f64 = StandardNormal.sample(&mut rng);
            x[i] += f[i] * dt + noise * xi;
        }
        let t = t0 + k as f64 * dt;
        let norm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(norm <= opts.blowup_bound) {
            return Err(Error::Blowup {
                time: t,
                norm,
                bound: opts.blowup_bound,
            });
        }
        times.push(t);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

/// Cumulative observations at `obs_times`:
/// `y(τ_l) = y(τ_{l−1}) + Σ_k [h(x(t_k)) Δt + √(ħμ Δt) ξ_k]` over the path steps in the interval.
pub fn simulate_measurements(
    model: &FilterModel,
    traj: &Trajectory,
    obs_times: &[f64],
    seed: u64,
) -> Result<MeasurementSeries> {
    if obs_times.is_empty() {
        return Err(Error::TimeMismatch("no observation times".into()));
    }
    let indices: Vec<usize> = obs_times
        .iter()
        .map(|&t| {
            traj.index_of(t)
                .ok_or_else(|| Error::TimeMismatch(format!("observation time {t} is not on the path grid")))
        })
        .collect::<Result<_>>()?;
    if indices[0] != 0 {
        return Err(Error::TimeMismatch(
            "first observation time must equal the path start".into(),
        ));
    }
    if indices.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::TimeMismatch("observation times must increase".into()));
    }
    let m = model.meas_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(MEASUREMENT_STREAM);
    let mut h = vec![0.0; m];
    let mut y = vec![0.0; m];
    let mut values = vec![y.clone()];
    let last = *indices.last().unwrap();
    let mut next_obs = 1;
    for k in 0..last {
        let dt = traj.times[k + 1] - traj.times[k];
        let noise = (model.hbar_mu() * dt).sqrt();
        model.measurement_into(&traj.states[k], &mut h);
        for j in 0..m {
            let xi: f64 = StandardNormal.sample(&mut rng);
            y[j] += h[j] * dt + noise * xi;
        }
        if k + 1 == indices[next_obs] {
            values.push(y.clone());
            next_obs += 1;
        }
    }
    MeasurementSeries::new(obs_times.to_vec(), values)
}

/// Evenly spaced observation times `t0, t0 + Δτ, …, t1`.
pub fn observation_times(t0: f64, t1: f64, spacing: f64) -> Result<Vec<f64>> {
    let n = step_count(t0, t1, spacing)?;
    Ok((0..=n).map(|l| t0 + l as f64 * spacing).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::BuiltinModel;

    fn ou(hbar_nu: f64, hbar_mu: f64, gain: f64) -> FilterModel {
        BuiltinModel::Ou {
            dim: 1,
            rate: 1.0,
            meas_gain: gain,
            hbar_nu,
            hbar_mu,
        }
        .build()
        .unwrap()
    }

    fn zero(hbar_nu: f64, hbar_mu: f64, gain: f64) -> FilterModel {
        BuiltinModel::Zero {
            dim: 1,
            meas_gain: gain,
            hbar_nu,
            hbar_mu,
        }
        .build()
        .unwrap()
    }

    #[test]
    fn noiseless_zero_drift_is_constant() {
        let t = simulate_state(&zero(0.0, 1.0, 0.0), &[1.25], 0.0, 1.0, 0.01, 3).unwrap();
        assert!(t.states.iter().all(|x| x[0] == 1.25));
        assert_eq!(t.times.len(), 101);
    }

    #[test]
    fn noiseless_ou_is_first_order_accurate() {
        let exact = (-1.0f64).exp();
        let err = |dt| {
            let t = simulate_state(&ou(0.0, 1.0, 1.0), &[1.0], 0.0, 1.0, dt, 0).unwrap();
            (t.states.last().unwrap()[0] - exact).abs()
        };
        let (e1, e2) = (err(0.01), err(0.005));
        assert!(e1 < 0.01);
        let ratio = e1 / e2;
        assert!((1.8..2.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let m = ou(1.0, 1.0, 1.0);
        let a = simulate_state(&m, &[0.3], 0.0, 2.0, 0.01, 42).unwrap();
        let b = simulate_state(&m, &[0.3], 0.0, 2.0, 0.01, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate_state(&m, &[0.3], 0.0, 2.0, 0.01, 43).unwrap();
        assert_ne!(a, c);
        let obs = observation_times(0.0, 2.0, 0.1).unwrap();
        let ya = simulate_measurements(&m, &a, &obs, 42).unwrap();
        let yb = simulate_measurements(&m, &a, &obs, 42).unwrap();
        assert_eq!(ya, yb);
    }

    #[test]
    fn ou_endpoint_variance() {
        let m = ou(1.0, 1.0, 1.0);
        let samples: Vec<f64> = (0..20_000u64)
            .map(|s| simulate_state(&m, &[1.0], 0.0, 1.0, 0.01, s).unwrap().states[100][0])
            .collect();
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let exact = (1.0 - (-2.0f64).exp()) / 2.0;
        // var-of-variance for a Gaussian: 2σ⁴/(n−1); allow O(dt) bias on top of 3σ
        let tol = 3.0 * (2.0 * exact * exact / n).sqrt() + 0.01;
        assert!((var - exact).abs() < tol, "var {var} vs {exact}");
        assert!((mean - (-1.0f64).exp()).abs() < 0.02);
    }

    #[test]
    fn noiseless_measurements() {
        let m = zero(0.0, 0.0, 0.0);
        let t = simulate_state(&m, &[1.0], 0.0, 1.0, 0.01, 1).unwrap();
        let obs = observation_times(0.0, 1.0, 0.25).unwrap();
        let y = simulate_measurements(&m, &t, &obs, 1).unwrap();
        assert!(y.values.iter().all(|v| v[0] == 0.0));

        let m = zero(0.0, 0.0, 1.0);
        let y = simulate_measurements(&m, &t, &obs, 1).unwrap();
        for (tau, v) in y.times.iter().zip(&y.values) {
            assert!((v[0] - tau).abs() < 1e-12);
        }
    }

    #[test]
    fn measurement_noise_variance() {
        let m = zero(0.0, 1.0, 1.0);
        let t = simulate_state(&m, &[1.0], 0.0, 1.0, 0.01, 1).unwrap();
        let obs = [0.0, 0.5, 1.0];
        let resid: Vec<f64> = (0..5000u64)
            .map(|s| simulate_measurements(&m, &t, &obs, s).unwrap().values[2][0] - 1.0)
            .collect();
        let n = resid.len() as f64;
        let var = resid.iter().map(|r| r * r).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "var {var}");
    }

    #[test]
    fn off_grid_observation_rejected() {
        let m = zero(1.0, 1.0, 1.0);
        let t = simulate_state(&m, &[0.0], 0.0, 1.0, 0.1, 1).unwrap();
        assert!(matches!(
            simulate_measurements(&m, &t, &[0.0, 0.55], 1),
            Err(Error::TimeMismatch(_))
        ));
    }

    #[test]
    fn blowup_detected() {
        let m = BuiltinModel::Cubic {
            dim: 1,
            alpha: 1.0,
            beta: -1.0,
            meas_gain: 1.0,
            hbar_nu: 0.0,
            hbar_mu: 1.0,
        }
        .build()
        .unwrap();
        assert!(matches!(
            simulate_state(&m, &[2.0], 0.0, 10.0, 0.1, 0),
            Err(Error::Blowup { .. })
        ));
    }

    #[test]
    fn csv_headers() {
        let m = zero(1.0, 1.0, 1.0);
        let t = simulate_state(&m, &[0.0], 0.0, 0.2, 0.1, 1).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,x_1\n0,0\n"));
        let y = simulate_measurements(&m, &t, &[0.0, 0.2], 1).unwrap();
        let mut buf = Vec::new();
        y.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("tau,y_1\n0,0\n"));
    }
}
