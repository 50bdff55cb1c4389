//! Frame scores to a budgeted keyshot summary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::validate_boundaries;

pub const DEFAULT_BUDGET_FRACTION: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotScore {
    pub index: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    /// Mean frame score over `[start, end)`.
    pub value: f64,
}

impl ShotScore {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// Knapsack value: total score mass of the shot.
    pub fn mass(&self) -> f64 {
        self.value * self.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    /// Indices into the shot list, ascending.
    pub selected: Vec<usize>,
    pub mask: Vec<u8>,
    pub total_frames: usize,
    pub budget_frames: usize,
    pub objective: f64,
}

pub fn frame_to_shot_scores(scores: &[f32], boundaries: &[usize]) -> Result<Vec<ShotScore>> {
    validate_boundaries(boundaries, scores.len())?;
    Ok(boundaries
        .windows(2)
        .enumerate()
        .map(|(index, w)| {
            let (start, end) = (w[0], w[1]);
            let total: f64 = scores[start..end].iter().map(|&s| s as f64).sum();
            ShotScore {
                index,
                start,
                end,
                value: total / (end - start) as f64,
            }
        })
        .collect())
}

fn nearly_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Sum of shot masses in ascending index order.
pub fn objective_of(shots: &[ShotScore], selected: &[usize]) -> f64 {
    selected.iter().map(|&i| shots[i].mass()).sum()
}

/// Exact 0/1 knapsack over shot lengths.
///
/// Maximises total score mass under `budget_frames`; among equal objectives
/// prefers fewer frames, then the lexicographically smallest index set.
pub fn knapsack_select(shots: &[ShotScore], budget_frames: usize) -> Summary {
    let n = shots.len();
    let total_len = shots.iter().map(|s| s.end).max().unwrap_or(0);
    let cap = budget_frames.min(shots.iter().map(ShotScore::len).sum());
    let width = cap + 1;
    // best[i][w]: optimum over shots i.. with capacity w, as (objective, frames).
    let mut best = vec![(0.0f64, 0usize); (n + 1) * width];
    let mut take = vec![false; n * width];
    for i in (0..n).rev() {
        let len = shots[i].len();
        let mass = shots[i].mass();
        for w in 0..width {
            let skip = best[(i + 1) * width + w];
            let mut choice = skip;
            if len <= w {
                let rest = best[(i + 1) * width + w - len];
                let with = (rest.0 + mass, rest.1 + len);
                let better = if nearly_equal(with.0, skip.0) {
                    with.1 <= skip.1
                } else {
                    with.0 > skip.0
                };
                if better {
                    choice = with;
                    take[i * width + w] = true;
                }
            }
            best[i * width + w] = choice;
        }
    }
    let mut selected = Vec::new();
    let mut w = cap;
    for i in 0..n {
        if take[i * width + w] {
            selected.push(i);
            w -= shots[i].len();
        }
    }
    let mut mask = vec![0u8; total_len];
    for &i in &selected {
        mask[shots[i].start..shots[i].end].fill(1);
    }
    Summary {
        total_frames: selected.iter().map(|&i| shots[i].len()).sum(),
        objective: objective_of(shots, &selected),
        selected,
        mask,
        budget_frames,
    }
}

/// `floor(fraction · n)`, tolerant of representation error in the product.
pub fn budget_frames(n_frames: usize, budget_fraction: f64) -> usize {
    (budget_fraction * n_frames as f64 + 1e-9).floor() as usize
}

pub fn build_summary(
    scores: &[f32],
    boundaries: &[usize],
    budget_fraction: f64,
) -> Result<Summary> {
    if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "budget fraction {budget_fraction} outside (0, 1]"
        )));
    }
    let shots = frame_to_shot_scores(scores, boundaries)?;
    Ok(knapsack_select(
        &shots,
        budget_frames(scores.len(), budget_fraction),
    ))
}

/// Converts keyframe labels into a keyshot mask.
///
/// Shots containing at least one keyframe are candidates; they are admitted
/// in order of descending keyframe density (earlier shot first on ties) as
/// long as they fit in the budget.
pub fn keyframes_to_keyshots(
    labels: &[u8],
    boundaries: &[usize],
    budget_fraction: f64,
) -> Result<Vec<u8>> {
    validate_boundaries(boundaries, labels.len())?;
    let budget = budget_frames(labels.len(), budget_fraction);
    let mut marked: Vec<(usize, usize, usize)> = boundaries
        .windows(2)
        .map(|w| {
            (
                w[0],
                w[1],
                labels[w[0]..w[1]].iter().filter(|&&l| l == 1).count(),
            )
        })
        .filter(|&(_, _, k)| k > 0)
        .collect();
    // density k/len compared by cross-multiplication; stable sort keeps earlier shots first
    marked.sort_by(|a, b| (b.2 * (a.1 - a.0)).cmp(&(a.2 * (b.1 - b.0))));
    let mut mask = vec![0u8; labels.len()];
    let mut used = 0;
    for (start, end, _) in marked {
        if used + (end - start) <= budget {
            mask[start..end].fill(1);
            used += end - start;
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedShot {
    pub start: usize,
    pub end: usize,
    pub value: f64,
}

/// Run-length encoding of a binary mask: `[start, end)` intervals of ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RleMask {
    pub length: usize,
    pub runs: Vec<[usize; 2]>,
}

impl RleMask {
    pub fn encode(mask: &[u8]) -> Self {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < mask.len() {
            if mask[i] == 1 {
                let s = i;
                while i < mask.len() && mask[i] == 1 {
                    i += 1;
                }
                runs.push([s, i]);
            } else {
                i += 1;
            }
        }
        RleMask {
            length: mask.len(),
            runs,
        }
    }

    pub fn decode(&self) -> Result<Vec<u8>> {
        let mut mask = vec![0u8; self.length];
        for &[s, e] in &self.runs {
            if s >= e || e > self.length {
                return Err(Error::Validation(format!("bad run [{s}, {e})")));
            }
            mask[s..e].fill(1);
        }
        Ok(mask)
    }
}

/// JSON form of a summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub video_id: String,
    pub budget_fraction: f64,
    pub selected_shots: Vec<SelectedShot>,
    pub frame_mask: RleMask,
}

impl SummaryReport {
    pub fn new(
        video_id: &str,
        budget_fraction: f64,
        shots: &[ShotScore],
        summary: &Summary,
    ) -> Self {
        SummaryReport {
            video_id: video_id.to_string(),
            budget_fraction,
            selected_shots: summary
                .selected
                .iter()
                .map(|&i| SelectedShot {
                    start: shots[i].start,
                    end: shots[i].end,
                    value: shots[i].value,
                })
                .collect(),
            frame_mask: RleMask::encode(&summary.mask),
        }
    }
}
