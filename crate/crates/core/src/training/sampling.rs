use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSpec {
    pub context_views: usize,
    pub target_views: usize,
    /// Inclusive bounds of the temporal window length, in frames.
    pub window_min: usize,
    pub window_max: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self { context_views: 5, target_views: 4, window_min: 40, window_max: 220 }
    }
}

impl SampleSpec {
    pub fn total(&self) -> usize {
        self.context_views + self.target_views
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_views == 0 || self.target_views == 0 {
            return Err(Error::Config("sample: context_views and target_views must be positive".into()));
        }
        if self.window_min > self.window_max {
            return Err(Error::Config("sample: window_min exceeds window_max".into()));
        }
        if self.window_min < self.total() {
            return Err(Error::Config(format!(
                "sample: window_min {} cannot hold {} views",
                self.window_min,
                self.total()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewSample {
    pub start: usize,
    pub window: usize,
    /// Ascending frame indices.
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Draws a window of length `U[window_min, window_max]` (capped by the
/// sequence), `total` ordered frames uniformly inside it, and the targets
/// uniformly among those frames.
pub fn sample_views(sequence_len: usize, spec: &SampleSpec, rng: &mut impl Rng) -> Result<ViewSample> {
    spec.validate()?;
    if sequence_len < spec.window_min {
        return Err(Error::invalid(format!(
            "sequence of {sequence_len} frames is shorter than the minimum window {}",
            spec.window_min
        )));
    }
    let window = rng.random_range(spec.window_min..=spec.window_max.min(sequence_len));
    let start = rng.random_range(0..=sequence_len - window);
    let mut frames: Vec<usize> = index::sample(rng, window, spec.total()).into_iter().map(|i| start + i).collect();
    frames.sort_unstable();
    let mut is_target = vec![false; frames.len()];
    for i in index::sample(rng, frames.len(), spec.target_views) {
        is_target[i] = true;
    }
    let (mut context, mut targets) = (Vec::new(), Vec::new());
    for (f, t) in frames.into_iter().zip(is_target) {
        if t {
            targets.push(f);
        } else {
            context.push(f);
        }
    }
    Ok(ViewSample { start, window, context, targets })
}

/// Two overlapping subsets of the ordered context views.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetSplit {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

/// Both subsets keep the first and last view; the intermediates (numbered
/// from 1) go to `a` when odd and to `b` when even. Entries are positions in
/// `ordered`, anchors first.
pub fn split_subsets(ordered: usize) -> Result<SubsetSplit> {
    if ordered < 3 {
        return Err(Error::invalid(format!("splitting needs at least 3 context views, got {ordered}")));
    }
    let last = ordered - 1;
    let mut a = vec![0, last];
    let mut b = vec![0, last];
    for i in 1..last {
        if i % 2 == 1 {
            a.push(i);
        } else {
            b.push(i);
        }
    }
    Ok(SubsetSplit { a, b })
}
