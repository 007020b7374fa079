//! Run metadata written next to reconstructed volumes as `report.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub name: String,
    pub lambda: f64,
    /// Mean tissue intensity used for λ, when estimated.
    pub mu: Option<f64>,
    /// Noise precision per observation.
    pub tau: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub channels: Vec<ChannelReport>,
    pub rho: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every iteration, starting with the initial value.
    /// `None` for methods without an objective (interpolation).
    pub objective_trace: Option<Vec<f64>>,
    /// `‖λDy − z‖₂` after every ADMM iteration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primal_residual_trace: Option<Vec<f64>>,
    /// Seconds since the start of the solve, aligned with `objective_trace`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_trace: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_solver: Option<String>,
    pub wall_clock_seconds: f64,
    /// Parameters supplied by the user instead of estimated, e.g. `lambda[t1]=0.01`.
    #[serde(default)]
    pub overrides: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = &self.objective_trace {
            if t.len() != self.iterations + 1 {
                return Err(Error::Report(format!(
                    "objective trace has {} entries for {} iterations",
                    t.len(),
                    self.iterations
                )));
            }
            if let Some(v) = t.iter().find(|v| !v.is_finite()) {
                return Err(Error::Report(format!("non-finite objective value {v}")));
            }
        } else if self.iterations != 0 {
            return Err(Error::Report(format!("{} iterations but no objective trace", self.iterations)));
        }
        if let Some(e) = &self.elapsed_trace {
            if Some(e.len()) != self.objective_trace.as_ref().map(Vec::len) {
                return Err(Error::Report("elapsed trace does not match objective trace".into()));
            }
        }
        Ok(())
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.objective_trace.as_ref().and_then(|t| t.last().copied())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = self.to_json()?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: RunReport = serde_json::from_str(&s)?;
        r.validate()?;
        Ok(r)
    }
}
