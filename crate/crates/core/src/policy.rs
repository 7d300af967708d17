//! Open-loop policy parameters and planner outputs.

use serde::Serialize;

use crate::model::Action;

/// Two probabilities closer than this are treated as tied.
pub const TIE_TOL: f64 = 1e-12;

/// Open-loop policy parameters `θ`: one distribution per action variable per
/// time step. Binary variables store the single parameter `p(a = 1)`; an
/// enumerated variable with `k` values stores a `k`-simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    cards: Vec<usize>,
    steps: usize,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

fn width(card: usize) -> usize {
    if card == 2 {
        1
    } else {
        card
    }
}

impl PolicyParams {
    pub fn uniform(cards: &[usize], steps: usize) -> Self {
        let per_step: usize = cards.iter().map(|&c| width(c)).sum();
        let mut offsets = Vec::with_capacity(cards.len() * steps);
        let mut values = Vec::with_capacity(per_step * steps);
        for _ in 0..steps {
            for &c in cards {
                offsets.push(values.len());
                if c == 2 {
                    values.push(0.5);
                } else {
                    values.extend(std::iter::repeat_n(1.0 / c as f64, c));
                }
            }
        }
        PolicyParams {
            cards: cards.to_vec(),
            steps,
            offsets,
            values,
        }
    }

    /// Point masses on a concrete action sequence.
    pub fn from_plan(cards: &[usize], plan: &[Action]) -> Self {
        let mut p = Self::uniform(cards, plan.len());
        for (t, a) in plan.iter().enumerate() {
            for (l, &v) in a.iter().enumerate() {
                let mut d = vec![0.0; cards[l]];
                d[v] = 1.0;
                p.set_dist(t, l, &d);
            }
        }
        p
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn num_vars(&self) -> usize {
        self.cards.len()
    }

    /// Flat parameter vector (the leaves of the forward compute graph).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the first parameter of `(t, l)` in [`Self::values`].
    pub fn offset(&self, t: usize, l: usize) -> usize {
        self.offsets[t * self.cards.len() + l]
    }

    pub fn is_bernoulli(&self, l: usize) -> bool {
        self.cards[l] == 2
    }

    pub fn prob(&self, t: usize, l: usize, v: usize) -> f64 {
        let o = self.offset(t, l);
        if self.cards[l] == 2 {
            if v == 1 {
                self.values[o]
            } else {
                1.0 - self.values[o]
            }
        } else {
            self.values[o + v]
        }
    }

    pub fn dist(&self, t: usize, l: usize) -> Vec<f64> {
        (0..self.cards[l]).map(|v| self.prob(t, l, v)).collect()
    }

    pub fn set_dist(&mut self, t: usize, l: usize, dist: &[f64]) {
        let o = self.offset(t, l);
        if self.cards[l] == 2 {
            self.values[o] = dist[1];
        } else {
            self.values[o..o + dist.len()].copy_from_slice(dist);
        }
    }

    /// Projects every block onto its feasible set: clipping for Bernoulli
    /// parameters, Euclidean simplex projection for enumerated variables.
    pub fn project(&mut self) {
        for t in 0..self.steps {
            for l in 0..self.cards.len() {
                let o = self.offset(t, l);
                if self.cards[l] == 2 {
                    self.values[o] = self.values[o].clamp(0.0, 1.0);
                } else {
                    project_simplex(&mut self.values[o..o + self.cards[l]]);
                }
            }
        }
    }

    pub fn is_valid(&self) -> bool {
        (0..self.steps).all(|t| {
            (0..self.cards.len()).all(|l| {
                let d = self.dist(t, l);
                d.iter().all(|p| (-1e-12..=1.0 + 1e-12).contains(p))
                    && (d.iter().sum::<f64>() - 1.0).abs() <= 1e-9
            })
        })
    }

    /// Per-variable argmax at every step, ties toward value 0.
    pub fn argmax_plan(&self) -> Vec<Action> {
        (0..self.steps)
            .map(|t| {
                (0..self.cards.len())
                    .map(|l| argmax_low(&self.dist(t, l)))
                    .collect()
            })
            .collect()
    }
}

/// Argmax with ties (within [`TIE_TOL`]) resolved toward the lowest index.
pub fn argmax_low(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate().skip(1) {
        if p > dist[best] + TIE_TOL {
            best = i;
        }
    }
    best
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &mut [f64]) {
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cum += u;
        let candidate = (cum - 1.0) / (i + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - tau).max(0.0);
    }
}

/// Per-planner diagnostics attached to a plan.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    /// Iterations, sweeps or gradient updates actually run.
    pub iterations: usize,
    /// Final objective: score, ELBO or marginal of the chosen action.
    pub score: f64,
    pub converged: bool,
    /// Objective trace (score per update, ELBO per outer iteration, ...).
    pub trace: Vec<f64>,
}

/// Output of every planner: a full open-loop action sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionAssignment {
    pub sequence: Vec<Action>,
    pub diagnostics: Diagnostics,
}

impl ActionAssignment {
    /// The action to execute under receding-horizon control.
    pub fn first(&self) -> &Action {
        &self.sequence[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_projection_is_feasible() {
        let mut v = vec![0.9, 0.6, -0.2];
        project_simplex(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|&x| x >= 0.0));
        assert!((v[0] - 0.65).abs() < 1e-12 && (v[1] - 0.35).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_low_index_on_ties() {
        assert_eq!(argmax_low(&[0.5, 0.5]), 0);
        assert_eq!(argmax_low(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax_low(&[0.1, 0.2, 0.7]), 2);
    }

    #[test]
    fn layout_mixes_bernoulli_and_simplex() {
        let mut p = PolicyParams::uniform(&[3], 2);
        assert_eq!(p.len(), 6);
        p.set_dist(1, 0, &[0.0, 0.0, 1.0]);
        assert_eq!(p.argmax_plan(), vec![vec![0], vec![2]]);
        let b = PolicyParams::from_plan(&[2, 2], &[vec![1, 0]]);
        assert_eq!(b.values(), &[1.0, 0.0]);
        assert_eq!(b.prob(0, 1, 0), 1.0);
        assert!(b.is_valid());
    }
}
