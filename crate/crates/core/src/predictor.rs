//! Corrective seasonal predictor for per-window average and peak load.
//!
//! A prediction for window `i` of day `k` is the mean of the same window over
//! the previous `D` days (the seasonal component) plus an exponentially
//! weighted mean of the errors that seasonal estimate made over the preceding
//! `N` windows (the corrective delta). Lookback crosses midnight into the
//! tail of the previous day.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::WindowStats;

#[derive(Debug, Error, PartialEq)]
pub enum PredictorError {
    #[error("cold predictor: no history for window {window} before day {day}")]
    ColdPredictor { day: u32, window: u32 },
    #[error("window ({day}, {window}) already observed")]
    Duplicate { day: u32, window: u32 },
    #[error("window index {window} outside [0, {windows_per_day})")]
    WindowOutOfRange { window: u32, windows_per_day: u32 },
    #[error("invalid predictor parameters: {0}")]
    InvalidParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Average,
    Peak,
}

/// How lagged errors are weighted in the corrective delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightOrientation {
    /// Lag `j` gets `2^(N'-j)`: the most recent error weighs most.
    #[default]
    RecentHeaviest,
    /// Lag `j` gets `2^(j-1)`.
    OldestHeaviest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    /// Seasonal sample depth in days.
    pub seasonal_days: u32,
    /// Number of lagged windows feeding the corrective delta.
    pub lookback: u32,
    pub orientation: WeightOrientation,
    pub windows_per_day: u32,
}

impl PredictorParams {
    pub fn validate(&self) -> Result<(), PredictorError> {
        if self.seasonal_days == 0 {
            return Err(PredictorError::InvalidParams("seasonal_days must be >= 1"));
        }
        if self.lookback == 0 {
            return Err(PredictorError::InvalidParams("lookback must be >= 1"));
        }
        if self.lookback > 60 {
            return Err(PredictorError::InvalidParams("lookback must be <= 60"));
        }
        if self.windows_per_day == 0 {
            return Err(PredictorError::InvalidParams(
                "windows_per_day must be >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub model_id: String,
    pub day: u32,
    pub window: u32,
    pub seasonal: f64,
    pub delta: f64,
    /// `max(0, seasonal + delta)`.
    pub predicted: f64,
}

impl Prediction {
    pub fn unclamped(&self) -> f64 {
        self.seasonal + self.delta
    }
}

/// History and parameters for one (model, target) series.
#[derive(Debug, Clone)]
pub struct PredictorState {
    pub model_id: String,
    pub target: Target,
    params: PredictorParams,
    history: BTreeMap<(u32, u32), f64>,
}

impl PredictorState {
    pub fn new(
        model_id: impl Into<String>,
        target: Target,
        params: PredictorParams,
    ) -> Result<Self, PredictorError> {
        params.validate()?;
        Ok(Self {
            model_id: model_id.into(),
            target,
            params,
            history: BTreeMap::new(),
        })
    }

    pub fn params(&self) -> &PredictorParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn observed(&self, day: u32, window: u32) -> Option<f64> {
        self.history.get(&(day, window)).copied()
    }

    /// Records an observation for one window.
    pub fn observe(&mut self, stats: &WindowStats) -> Result<(), PredictorError> {
        let value = match self.target {
            Target::Average => stats.avg_load,
            Target::Peak => stats.peak_load as f64,
        };
        self.observe_value(stats.day, stats.window, value)
    }

    pub fn observe_value(
        &mut self,
        day: u32,
        window: u32,
        value: f64,
    ) -> Result<(), PredictorError> {
        self.check_window(window)?;
        if self.history.contains_key(&(day, window)) {
            return Err(PredictorError::Duplicate { day, window });
        }
        self.history.insert((day, window), value);
        Ok(())
    }

    fn check_window(&self, window: u32) -> Result<(), PredictorError> {
        if window >= self.params.windows_per_day {
            return Err(PredictorError::WindowOutOfRange {
                window,
                windows_per_day: self.params.windows_per_day,
            });
        }
        Ok(())
    }

    /// Mean of window `window` over the most recent `D` earlier days that
    /// have an observation (fewer if less history exists).
    ///
    /// Only days before `day` contribute, so the value equals what an online
    /// predictor computed when window `(day, window)` opened.
    pub fn seasonal_component(&self, day: u32, window: u32) -> Result<f64, PredictorError> {
        self.check_window(window)?;
        let mut sum = 0.0;
        let mut n = 0u32;
        for d in (0..day).rev() {
            if n == self.params.seasonal_days {
                break;
            }
            if let Some(v) = self.history.get(&(d, window)) {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            return Err(PredictorError::ColdPredictor { day, window });
        }
        Ok(sum / n as f64)
    }

    /// Lagged errors `L - P` for `j = 1..=N'`, most recent first. Stops at the
    /// first lag lacking an observation or a seasonal estimate.
    pub fn lagged_errors(&self, day: u32, window: u32) -> Vec<f64> {
        let wpd = self.params.windows_per_day;
        let mut errors = Vec::with_capacity(self.params.lookback as usize);
        let (mut d, mut w) = (day, window);
        for _ in 0..self.params.lookback {
            if w == 0 {
                if d == 0 {
                    break;
                }
                d -= 1;
                w = wpd - 1;
            } else {
                w -= 1;
            }
            let Some(actual) = self.history.get(&(d, w)) else {
                break;
            };
            let Ok(seasonal) = self.seasonal_component(d, w) else {
                break;
            };
            errors.push(actual - seasonal);
        }
        errors
    }

    pub fn corrective_delta(&self, day: u32, window: u32) -> Result<f64, PredictorError> {
        self.check_window(window)?;
        Ok(weighted_error(
            &self.lagged_errors(day, window),
            self.params.orientation,
        ))
    }

    pub fn predict(&self, day: u32, window: u32) -> Result<Prediction, PredictorError> {
        let seasonal = self.seasonal_component(day, window)?;
        let delta = self.corrective_delta(day, window)?;
        Ok(Prediction {
            model_id: self.model_id.clone(),
            day,
            window,
            seasonal,
            delta,
            predicted: (seasonal + delta).max(0.0),
        })
    }
}

/// Normalised exponentially weighted mean of `errors` (index 0 = lag 1).
pub fn weighted_error(errors: &[f64], orientation: WeightOrientation) -> f64 {
    let n = errors.len() as i32;
    if n == 0 {
        return 0.0;
    }
    let norm = 2f64.powi(n) - 1.0;
    let num: f64 = errors
        .iter()
        .enumerate()
        .map(|(idx, e)| {
            let j = idx as i32 + 1;
            let w = match orientation {
                WeightOrientation::RecentHeaviest => 2f64.powi(n - j),
                WeightOrientation::OldestHeaviest => 2f64.powi(j - 1),
            };
            e * w
        })
        .sum();
    num / norm
}
