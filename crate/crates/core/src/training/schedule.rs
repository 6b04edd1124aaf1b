use serde::{Deserialize, Serialize};

use crate::decoder::{StagePoint, MAX_STAGE};
use crate::error::{Error, Result};

/// Stage start steps (`starts[s]` opens stage `s`) and the length of the
/// linear blend into each new stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub starts: Vec<u64>,
    pub transition: u64,
}

impl StageSchedule {
    /// Full-length schedule: stages at 0, 10k, 20k, 50k with 2k-step blends.
    pub fn full() -> Self {
        Self { starts: vec![0, 10_000, 20_000, 50_000], transition: 2_000 }
    }

    /// The full schedule shrunk by 100× for desk-scale runs.
    pub fn toy() -> Self {
        Self { starts: vec![0, 100, 200, 500], transition: 20 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.starts.first() != Some(&0) {
            return Err(Error::Config("schedule.starts must begin at step 0".into()));
        }
        if self.starts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("schedule.starts must be strictly increasing".into()));
        }
        if self.starts.len() > MAX_STAGE as usize + 1 {
            return Err(Error::Config(format!("schedule has more than {} stages", MAX_STAGE + 1)));
        }
        if self.transition == 0 {
            return Err(Error::Config("schedule.transition must be positive".into()));
        }
        Ok(())
    }

    pub fn final_stage(&self) -> u32 {
        self.starts.len().saturating_sub(1) as u32
    }
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self::toy()
    }
}

pub fn stage_at(step: u64, schedule: &StageSchedule) -> StagePoint {
    let stage = schedule.starts.iter().rposition(|s| *s <= step).unwrap_or(0);
    if stage == 0 {
        return StagePoint::settled(0);
    }
    let into = (step - schedule.starts[stage]) as f64;
    let lambda = (into / schedule.transition as f64).clamp(0.0, 1.0);
    StagePoint { stage: stage as u32, lambda }
}
