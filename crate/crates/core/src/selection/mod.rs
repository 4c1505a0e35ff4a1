//! Choosing which experts to keep and which layers to condense.
//!
//! The greedy searches grow a set one element at a time, each step adding
//! the candidate whose tentative inclusion gives the smallest output
//! divergence from the uncondensed reference. The baselines rank candidates
//! by cheap statistics instead.

mod experts;
mod hill;
mod layers;

use serde::{Deserialize, Serialize};

pub use experts::{
    alpha_hill_expert_selection, greedy_expert_selection, greedy_expert_selection_on, l1_expert_selection, l1_norms,
    random_expert_selection, LayerProbe,
};
pub use hill::{alpha_hill, expert_spectrum, fix_finger_k, hill_alpha, AlphaHillScore};
pub use layers::{
    divergence_sweep, global_layer_rank_selection, greedy_layer_selection, layer_rank_selection,
    random_layer_selection, LayerScores, SelectionMetric, SweepRow,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateLoss {
    pub index: usize,
    pub loss: f64,
}

/// Output of a greedy search: the chosen indices in commit order, with the
/// full table of candidate losses at every step for auditing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub chosen: Vec<usize>,
    pub step_losses: Vec<f64>,
    pub candidate_losses: Vec<Vec<CandidateLoss>>,
}

impl SelectionTrace {
    fn commit(&mut self, losses: Vec<CandidateLoss>) -> usize {
        let best = argmin(&losses);
        self.chosen.push(best.index);
        self.step_losses.push(best.loss);
        self.candidate_losses.push(losses);
        best.index
    }

    /// Every step's committed loss is the minimum of that step's candidate table.
    pub fn is_dominant(&self) -> bool {
        self.candidate_losses.iter().zip(&self.step_losses).zip(&self.chosen).all(|((table, &loss), &idx)| {
            table.iter().all(|c| loss <= c.loss) && table.iter().any(|c| c.index == idx && c.loss == loss)
        })
    }
}

/// Lowest loss wins; on exact ties the lowest index (tables are built in
/// ascending index order, so the first minimum is kept).
fn argmin(losses: &[CandidateLoss]) -> CandidateLoss {
    let mut best = losses[0];
    for c in &losses[1..] {
        if c.loss < best.loss {
            best = *c;
        }
    }
    best
}

/// Indices of the `k` smallest scores; scores within `tol` of each other
/// count as tied and go to the lower index.
pub(crate) fn k_smallest(scores: &[f64], k: usize, tol: f64) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if taken[i] {
                continue;
            }
            match best {
                Some(b) if scores[i] >= scores[b] - tol => {}
                _ => best = Some(i),
            }
        }
        let b = best.expect("k <= len");
        taken[b] = true;
        out.push(b);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_smallest_breaks_ties_low() {
        assert_eq!(k_smallest(&[5.0, 1.0, 3.0], 1, 0.0), vec![1]);
        assert_eq!(k_smallest(&[2.0, 2.0, 2.0], 2, 0.0), vec![0, 1]);
        assert_eq!(k_smallest(&[1.0 + 5e-13, 1.0, 3.0], 2, 1e-12), vec![0, 1]);
        assert_eq!(k_smallest(&[4.0, 3.0, 2.0, 1.0], 4, 0.0), vec![3, 2, 1, 0]);
    }

    #[test]
    fn argmin_first_of_ties() {
        let t = [
            CandidateLoss { index: 2, loss: 0.5 },
            CandidateLoss { index: 4, loss: 0.1 },
            CandidateLoss { index: 7, loss: 0.1 },
        ];
        assert_eq!(argmin(&t).index, 4);
    }
}
