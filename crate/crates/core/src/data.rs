//! Recorded trajectories sampled at a uniform step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One recorded trajectory: `T + 1` states and `T` controls.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `n x (T + 1)`, column `k` is `x_k`.
    pub states: DMatrix<f64>,
    /// `m x T`, column `k` is `u_k`.
    pub controls: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(states: DMatrix<f64>, controls: DMatrix<f64>) -> Result<Self> {
        if states.ncols() != controls.ncols() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "trajectory has {} states but {} controls (expected states = controls + 1)",
                states.ncols(),
                controls.ncols()
            )));
        }
        if states.nrows() == 0 || controls.nrows() == 0 {
            return Err(Error::InvalidInput(
                "state and control dimensions must be positive".into(),
            ));
        }
        if !states.iter().chain(controls.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("trajectory contains non-finite values".into()));
        }
        Ok(Trajectory { states, controls })
    }

    /// Number of control steps `T`.
    pub fn horizon(&self) -> usize {
        self.controls.ncols()
    }

    pub fn n(&self) -> usize {
        self.states.nrows()
    }

    pub fn m(&self) -> usize {
        self.controls.nrows()
    }

    pub fn state(&self, k: usize) -> DVector<f64> {
        self.states.column(k).into_owned()
    }

    pub fn control(&self, k: usize) -> DVector<f64> {
        self.controls.column(k).into_owned()
    }

    /// Keeps the first `horizon` steps.
    pub fn truncated(&self, horizon: usize) -> Trajectory {
        Trajectory {
            states: self.states.columns(0, horizon + 1).into_owned(),
            controls: self.controls.columns(0, horizon).into_owned(),
        }
    }
}

/// `M` trajectories of identical horizon sampled every `dt` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub dt: f64,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryBatch {
    /// Ragged horizons and mixed dimensions are rejected.
    pub fn new(dt: f64, trajectories: Vec<Trajectory>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput(format!("sampling time must be positive, got {dt}")));
        }
        let first = trajectories
            .first()
            .ok_or_else(|| Error::InvalidInput("batch contains no trajectories".into()))?;
        let (n, m, t) = (first.n(), first.m(), first.horizon());
        if t == 0 {
            return Err(Error::InvalidInput("trajectories need at least one control step".into()));
        }
        for (i, tr) in trajectories.iter().enumerate() {
            if tr.n() != n || tr.m() != m {
                return Err(Error::DimensionMismatch(format!(
                    "trajectory {i} has (n, m) = ({}, {}), expected ({n}, {m})",
                    tr.n(),
                    tr.m()
                )));
            }
            if tr.horizon() != t {
                return Err(Error::DimensionMismatch(format!(
                    "trajectory {i} has horizon {}, expected {t} (ragged batch)",
                    tr.horizon()
                )));
            }
        }
        Ok(TrajectoryBatch { dt, trajectories })
    }

    /// Truncates every trajectory to the shortest horizon before validating.
    pub fn truncate_to_shortest(dt: f64, trajectories: Vec<Trajectory>) -> Result<Self> {
        let t = trajectories
            .iter()
            .map(Trajectory::horizon)
            .min()
            .ok_or_else(|| Error::InvalidInput("batch contains no trajectories".into()))?;
        let cut = trajectories.iter().map(|tr| tr.truncated(t)).collect();
        TrajectoryBatch::new(dt, cut)
    }

    pub fn n(&self) -> usize {
        self.trajectories[0].n()
    }

    pub fn m(&self) -> usize {
        self.trajectories[0].m()
    }

    pub fn horizon(&self) -> usize {
        self.trajectories[0].horizon()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// `n x (M T)` matrix of the states `x_0 .. x_{T-1}` of every trajectory.
    pub fn stacked_states(&self) -> DMatrix<f64> {
        let t = self.horizon();
        let mut out = DMatrix::zeros(self.n(), self.len() * t);
        for (i, tr) in self.trajectories.iter().enumerate() {
            out.columns_mut(i * t, t).copy_from(&tr.states.columns(0, t));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(t: usize) -> Trajectory {
        Trajectory::new(DMatrix::zeros(2, t + 1), DMatrix::zeros(1, t)).unwrap()
    }

    #[test]
    fn ragged_batch_rejected() {
        let err = TrajectoryBatch::new(0.01, vec![traj(5), traj(4)]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn truncation_escape_hatch() {
        let b = TrajectoryBatch::truncate_to_shortest(0.01, vec![traj(5), traj(4)]).unwrap();
        assert_eq!(b.horizon(), 4);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn empty_and_bad_dt_rejected() {
        assert!(TrajectoryBatch::new(0.01, vec![]).is_err());
        assert!(TrajectoryBatch::new(0.0, vec![traj(3)]).is_err());
    }

    #[test]
    fn state_control_count_checked() {
        assert!(Trajectory::new(DMatrix::zeros(2, 3), DMatrix::zeros(1, 3)).is_err());
        let nan = DMatrix::from_element(2, 2, f64::NAN);
        assert!(Trajectory::new(nan, DMatrix::zeros(1, 1)).is_err());
    }
}
