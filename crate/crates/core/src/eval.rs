//! RMSE, posterior predictive averaging and relative improvement.

use crate::cluster::SampleStore;
use crate::error::{Error, Result};
use crate::model::{ChainState, RatingTuple};

/// Inclusive rating range to clip predictions into.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clip {
    pub min: f64,
    pub max: f64,
}

impl Clip {
    pub fn apply(&self, x: f64) -> f64 {
        x.clamp(self.min, self.max)
    }
}

/// Root mean squared error of `predictions` against the tuples' ratings.
pub fn rmse(predictions: &[f64], tuples: &[RatingTuple], clip: Option<Clip>) -> Result<f64> {
    if tuples.is_empty() {
        return Err(Error::arg("RMSE of an empty test set"));
    }
    if predictions.len() != tuples.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} test tuples",
            predictions.len(),
            tuples.len()
        )));
    }
    let sq: f64 = predictions
        .iter()
        .zip(tuples)
        .map(|(&p, t)| {
            let p = clip.map_or(p, |c| c.apply(p));
            (t.rating - p) * (t.rating - p)
        })
        .sum();
    Ok((sq / tuples.len() as f64).sqrt())
}

/// RMSE of a single state's predictions; NaN for an empty set.
pub fn state_rmse(state: &ChainState, tuples: &[RatingTuple]) -> f64 {
    if tuples.is_empty() {
        return f64::NAN;
    }
    let sq: f64 = tuples
        .iter()
        .map(|t| {
            let r = state.residual(t);
            r * r
        })
        .sum();
    (sq / tuples.len() as f64).sqrt()
}

/// Equal-weight pool of posterior snapshots, possibly from several chains.
#[derive(Debug, Clone)]
pub struct PredictiveEnsemble<'a> {
    snapshots: Vec<&'a ChainState>,
}

impl<'a> PredictiveEnsemble<'a> {
    pub fn new(snapshots: Vec<&'a ChainState>) -> Result<Self> {
        let first = snapshots
            .first()
            .ok_or_else(|| Error::arg("an ensemble needs at least one snapshot"))?;
        let shape = (first.n_users(), first.n_items(), first.dim());
        if snapshots
            .iter()
            .any(|s| (s.n_users(), s.n_items(), s.dim()) != shape)
        {
            return Err(Error::arg("ensemble snapshots have different shapes"));
        }
        Ok(PredictiveEnsemble { snapshots })
    }

    /// Pools every snapshot of every chain.
    pub fn from_store(store: &'a SampleStore) -> Result<Self> {
        PredictiveEnsemble::new(store.iter().map(|s| &s.state).collect())
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn predict(&self, user: usize, item: usize) -> Result<f64> {
        let mut sum = 0.0;
        for s in &self.snapshots {
            sum += s.predict(user, item)?;
        }
        Ok(sum / self.snapshots.len() as f64)
    }

    pub fn predict_all(&self, tuples: &[RatingTuple]) -> Result<Vec<f64>> {
        tuples
            .iter()
            .map(|t| self.predict(t.user, t.item))
            .collect()
    }
}

/// Monte Carlo predictive mean `(1/T) Σ_t predict(snapshot_t, user, item)`.
pub fn posterior_predict(ensemble: &PredictiveEnsemble, user: usize, item: usize) -> Result<f64> {
    ensemble.predict(user, item)
}

/// Running mean of predictions on a fixed tuple set, so each evaluation
/// costs one pass over the tuples no matter how many samples were added.
#[derive(Debug, Clone)]
pub struct RunningPredictor {
    tuples: Vec<RatingTuple>,
    sums: Vec<f64>,
    count: usize,
}

impl RunningPredictor {
    pub fn new(tuples: Vec<RatingTuple>) -> Self {
        let sums = vec![0.0; tuples.len()];
        RunningPredictor {
            tuples,
            sums,
            count: 0,
        }
    }

    pub fn add(&mut self, state: &ChainState) -> Result<()> {
        for (s, t) in self.sums.iter_mut().zip(&self.tuples) {
            *s += state.predict(t.user, t.item)?;
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean_predictions(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.sums.iter().map(|s| s / n).collect()
    }

    pub fn rmse(&self, clip: Option<Clip>) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::arg("no samples have been averaged yet"));
        }
        rmse(&self.mean_predictions(), &self.tuples, clip)
    }
}

/// `(r_d − r_x) / r_d`.
pub fn relative_improvement(r_x: f64, r_d: f64) -> Result<f64> {
    if !(r_d > 0.0) {
        return Err(Error::arg(format!(
            "baseline RMSE must be positive, got {r_d}"
        )));
    }
    Ok((r_d - r_x) / r_d)
}
