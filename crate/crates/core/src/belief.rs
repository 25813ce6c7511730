//! Per-target spatio-temporal Gaussian-process belief.
//!
//! Each target keeps a window of timestamped binary measurements and
//! conditions a zero-mean, unit-variance GP on them without observation
//! noise (a small diagonal jitter keeps the factorization stable).
//! Measurements whose age reaches the eviction horizon are discarded; at
//! that age the Matérn 3/2 temporal correlation alone leaves 99% of the
//! prior standard deviation.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::env::TimestampedLocation;
use crate::Error;

/// Eviction horizon in units of the temporal length scale.
pub const EVICTION_FACTOR: f64 = 1.993;

const BASE_JITTER: f64 = 1e-8;
const MAX_JITTER: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub l_spatial: f64,
    pub l_temporal: f64,
    pub prior_variance: f64,
    pub prior_mean: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            l_spatial: 0.1,
            l_temporal: 3.0,
            prior_variance: 1.0,
            prior_mean: 0.0,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.l_spatial > 0.0 && self.l_temporal > 0.0 && self.prior_variance > 0.0) {
            return Err(Error::Config(format!("invalid kernel parameters {self:?}")));
        }
        Ok(())
    }

    /// Measurement age at which it is dropped from the window.
    pub fn eviction_horizon(&self) -> f64 {
        EVICTION_FACTOR * self.l_temporal
    }

    /// Anisotropic scaled distance between two space-time points.
    pub fn scaled_distance(&self, a: &TimestampedLocation, b: &TimestampedLocation) -> f64 {
        let dx = (a.x - b.x) / self.l_spatial;
        let dy = (a.y - b.y) / self.l_spatial;
        let dt = (a.t - b.t) / self.l_temporal;
        (dx * dx + dy * dy + dt * dt).sqrt()
    }
}

/// Matérn 3/2 on the scaled space-time distance:
/// `sigma^2 (1 + sqrt(3) d) exp(-sqrt(3) d)`.
pub fn matern32(a: &TimestampedLocation, b: &TimestampedLocation, params: &KernelParams) -> f64 {
    matern32_profile(params.scaled_distance(a, b)) * params.prior_variance
}

/// Unit-variance Matérn 3/2 as a function of scaled distance.
pub fn matern32_profile(d: f64) -> f64 {
    let s = 3f64.sqrt() * d;
    (1.0 + s) * (-s).exp()
}

/// Posterior mean and standard deviation at a set of query points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefField {
    pub query_points: Vec<TimestampedLocation>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Factor {
    chol: Cholesky<f64, Dyn>,
    /// `K^-1 (z - prior_mean)`.
    alpha: DVector<f64>,
}

/// GP posterior for one target over its active measurement window.
#[derive(Clone, Debug)]
pub struct TargetBelief {
    params: KernelParams,
    locations: Vec<TimestampedLocation>,
    values: Vec<f64>,
    factor: Option<Factor>,
}

impl TargetBelief {
    pub fn new(params: KernelParams) -> Self {
        Self {
            params,
            locations: Vec::new(),
            values: Vec::new(),
            factor: None,
        }
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn eviction_horizon(&self) -> f64 {
        self.params.eviction_horizon()
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn active(&self) -> impl Iterator<Item = (&TimestampedLocation, f64)> {
        self.locations.iter().zip(self.values.iter().copied())
    }

    /// Adds one measurement and refactorizes. An existing measurement at the
    /// identical space-time location is overwritten by the newer value.
    pub fn add(&mut self, location: TimestampedLocation, value: f64) -> Result<(), Error> {
        self.insert(location, value);
        self.refactor()
    }

    /// Adds a batch, evicts stale entries relative to `now`, then refactorizes once.
    pub fn update(
        &mut self,
        batch: impl IntoIterator<Item = (TimestampedLocation, f64)>,
        now: f64,
    ) -> Result<(), Error> {
        for (loc, z) in batch {
            self.insert(loc, z);
        }
        self.drop_stale(now);
        self.refactor()
    }

    /// Removes every measurement with `now - t >= horizon`.
    pub fn evict(&mut self, now: f64) -> Result<(), Error> {
        if self.drop_stale(now) {
            self.refactor()?;
        }
        Ok(())
    }

    fn insert(&mut self, location: TimestampedLocation, value: f64) {
        if let Some(i) = self.locations.iter().position(|l| *l == location) {
            self.values[i] = value;
        } else {
            self.locations.push(location);
            self.values.push(value);
        }
    }

    fn drop_stale(&mut self, now: f64) -> bool {
        let horizon = self.eviction_horizon();
        let before = self.locations.len();
        let (locations, values) = self
            .locations
            .iter()
            .zip(&self.values)
            .filter(|(l, _)| now - l.t < horizon)
            .map(|(l, z)| (*l, *z))
            .unzip();
        self.locations = locations;
        self.values = values;
        self.locations.len() != before
    }

    fn refactor(&mut self) -> Result<(), Error> {
        if self.locations.is_empty() {
            self.factor = None;
            return Ok(());
        }
        let n = self.locations.len();
        let gram = DMatrix::from_fn(n, n, |i, j| {
            matern32(&self.locations[i], &self.locations[j], &self.params)
        });
        let mut jitter = BASE_JITTER;
        let chol = loop {
            let mut k = gram.clone();
            for i in 0..n {
                k[(i, i)] += jitter;
            }
            if let Some(c) = Cholesky::new(k) {
                break c;
            }
            jitter *= 10.0;
            if jitter > MAX_JITTER * (1.0 + 1e-9) {
                self.factor = None;
                return Err(Error::FactorizationFailure { size: n });
            }
        };
        let centered = DVector::from_iterator(n, self.values.iter().map(|z| z - self.params.prior_mean));
        let alpha = chol.solve(&centered);
        self.factor = Some(Factor { chol, alpha });
        Ok(())
    }

    fn cross_kernel(&self, queries: &[TimestampedLocation]) -> DMatrix<f64> {
        DMatrix::from_fn(self.locations.len(), queries.len(), |i, j| {
            matern32(&self.locations[i], &queries[j], &self.params)
        })
    }

    /// Posterior mean and standard deviation at `queries`.
    pub fn regress(&self, queries: &[TimestampedLocation]) -> BeliefField {
        let prior_std = self.params.prior_variance.sqrt();
        let Some(factor) = &self.factor else {
            return BeliefField {
                query_points: queries.to_vec(),
                mean: vec![self.params.prior_mean; queries.len()],
                std: vec![prior_std; queries.len()],
            };
        };
        let kstar = self.cross_kernel(queries);
        let mean = kstar.tr_mul(&factor.alpha);
        let v = factor
            .chol
            .l_dirty()
            .solve_lower_triangular(&kstar)
            .expect("Cholesky factor has a non-zero diagonal");
        let std = v
            .column_iter()
            .map(|col| {
                let var = self.params.prior_variance - col.norm_squared();
                var.clamp(0.0, self.params.prior_variance).sqrt()
            })
            .collect();
        BeliefField {
            query_points: queries.to_vec(),
            mean: mean.iter().map(|m| m + self.params.prior_mean).collect(),
            std,
        }
    }

    /// Posterior mean only; skips the triangular solve.
    pub fn mean_at(&self, queries: &[TimestampedLocation]) -> Vec<f64> {
        match &self.factor {
            None => vec![self.params.prior_mean; queries.len()],
            Some(factor) => queries
                .iter()
                .map(|q| {
                    self.locations
                        .iter()
                        .zip(factor.alpha.iter())
                        .map(|(l, a)| a * matern32(l, q, &self.params))
                        .sum::<f64>()
                        + self.params.prior_mean
                })
                .collect(),
        }
    }

    /// Posterior standard deviation only.
    pub fn std_at(&self, queries: &[TimestampedLocation]) -> Vec<f64> {
        self.regress(queries).std
    }

    /// Regression at the same spatial points shifted `dt` into the future.
    pub fn predict_future(&self, queries: &[TimestampedLocation], dt: f64) -> BeliefField {
        let shifted: Vec<_> = queries
            .iter()
            .map(|q| TimestampedLocation::new(q.x, q.y, q.t + dt))
            .collect();
        self.regress(&shifted)
    }
}

/// Exportable belief field for one target at one instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefSnapshot {
    pub target: usize,
    pub time: f64,
    pub field: BeliefField,
}

impl BeliefSnapshot {
    /// Writes `x,y,t,mean,std` rows with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "t", "mean", "std"])?;
        for ((q, m), s) in self
            .field
            .query_points
            .iter()
            .zip(&self.field.mean)
            .zip(&self.field.std)
        {
            w.write_record([
                q.x.to_string(),
                q.y.to_string(),
                q.t.to_string(),
                m.to_string(),
                s.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
