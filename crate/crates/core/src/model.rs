//! Factored finite-horizon MDPs over binary state variables.
//!
//! A [`FactoredMdp`] holds one conditional probability table per state
//! variable, an ordered list of additive reward factors and an initial
//! per-variable Bernoulli distribution. Transition tables may condition on
//! the previous slice, on action variables and on already-sampled variables
//! of the same slice (synchronic arcs); the latter must form a DAG.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A full assignment of state variables (each entry is 0 or 1).
pub type State = Vec<usize>;

/// A full assignment of action variables (binary vars hold 0/1, an
/// enumerated variable holds the index of its value).
pub type Action = Vec<usize>;

/// Tolerance used for probability range checks.
pub const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVar {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionKind {
    Binary,
    /// One enumerated variable; value 0 is the default (no-op) value.
    Enum(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVar {
    pub name: String,
    pub kind: ActionKind,
}

impl ActionVar {
    pub fn binary(name: impl Into<String>) -> Self {
        ActionVar {
            name: name.into(),
            kind: ActionKind::Binary,
        }
    }

    pub fn enumerated(name: impl Into<String>, values: Vec<String>) -> Self {
        ActionVar {
            name: name.into(),
            kind: ActionKind::Enum(values),
        }
    }

    pub fn card(&self) -> usize {
        match &self.kind {
            ActionKind::Binary => 2,
            ActionKind::Enum(v) => v.len(),
        }
    }
}

/// Reference to a parent variable of a transition table or reward factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParentRef {
    /// State variable in the current (conditioning) slice.
    State(usize),
    /// Action variable of the current slice.
    Action(usize),
    /// State variable of the slice being generated (synchronic arc).
    Next(usize),
}

/// Transition table for one binary state variable: `probs[config]` is
/// `p(x' = 1 | parents = config)`; configurations are mixed-radix with the
/// last parent varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cpt {
    pub parents: Vec<ParentRef>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardFactor {
    pub name: String,
    /// Only `State` and `Action` references are allowed.
    pub parents: Vec<ParentRef>,
    /// Raw reward per parent configuration (same indexing as [`Cpt`]).
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactoredMdp {
    pub name: String,
    pub state_vars: Vec<StateVar>,
    pub action_vars: Vec<ActionVar>,
    pub transitions: Vec<Cpt>,
    pub rewards: Vec<RewardFactor>,
    /// `p(s_0^m = 1)` per state variable.
    pub initial: Vec<f64>,
    pub horizon: usize,
    order: Vec<usize>,
}

/// Index of a configuration in a mixed-radix table (last position fastest).
pub fn config_index(cards: &[usize], values: &[usize]) -> usize {
    debug_assert_eq!(cards.len(), values.len());
    cards
        .iter()
        .zip(values)
        .fold(0, |acc, (&c, &v)| acc * c + v)
}

/// Inverse of [`config_index`].
pub fn config_values(cards: &[usize], mut index: usize) -> Vec<usize> {
    let mut out = vec![0; cards.len()];
    for (slot, &c) in out.iter_mut().zip(cards).rev() {
        *slot = index % c;
        index /= c;
    }
    out
}

impl FactoredMdp {
    /// Builds and validates a model.
    pub fn new(
        name: impl Into<String>,
        state_vars: Vec<StateVar>,
        action_vars: Vec<ActionVar>,
        transitions: Vec<Cpt>,
        rewards: Vec<RewardFactor>,
        initial: Vec<f64>,
        horizon: usize,
    ) -> Result<Self> {
        let mut mdp = FactoredMdp {
            name: name.into(),
            state_vars,
            action_vars,
            transitions,
            rewards,
            initial,
            horizon,
            order: Vec::new(),
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&mut self) -> Result<()> {
        let m = self.state_vars.len();
        if m == 0 {
            return Err(Error::model("at least one state variable is required"));
        }
        if self.action_vars.is_empty() {
            return Err(Error::model("at least one action variable is required"));
        }
        let enums = self
            .action_vars
            .iter()
            .filter(|a| matches!(a.kind, ActionKind::Enum(_)))
            .count();
        if enums > 1 || (enums == 1 && self.action_vars.len() > 1) {
            return Err(Error::model(
                "an enumerated action variable must be the only action variable",
            ));
        }
        for a in &self.action_vars {
            if a.card() < 2 {
                return Err(Error::model(format!(
                    "action variable {} needs at least two values",
                    a.name
                )));
            }
        }
        let mut names = std::collections::HashSet::new();
        for n in self
            .state_vars
            .iter()
            .map(|v| &v.name)
            .chain(self.action_vars.iter().map(|v| &v.name))
        {
            if !names.insert(n.as_str()) {
                return Err(Error::model(format!("duplicate variable name {n}")));
            }
        }
        if self.transitions.len() != m {
            return Err(Error::model(format!(
                "expected {m} transition tables, found {}",
                self.transitions.len()
            )));
        }
        if self.initial.len() != m {
            return Err(Error::model("initial distribution length mismatch"));
        }
        for (i, &p) in self.initial.iter().enumerate() {
            if !(p.is_finite() && (-PROB_TOL..=1.0 + PROB_TOL).contains(&p)) {
                return Err(Error::model(format!(
                    "initial probability of {} outside [0,1]: {p}",
                    self.state_vars[i].name
                )));
            }
        }
        if self.horizon == 0 {
            return Err(Error::model("horizon must be positive"));
        }
        for (i, cpt) in self.transitions.iter().enumerate() {
            let var = &self.state_vars[i].name;
            self.check_parents(&cpt.parents, true, var)?;
            if cpt.probs.len() != self.table_size(&cpt.parents) {
                return Err(Error::model(format!(
                    "transition table of {var} has {} rows, expected {}",
                    cpt.probs.len(),
                    self.table_size(&cpt.parents)
                )));
            }
            for &p in &cpt.probs {
                if !(p.is_finite() && (-PROB_TOL..=1.0 + PROB_TOL).contains(&p)) {
                    return Err(Error::model(format!(
                        "transition table of {var} has probability {p} outside [0,1]"
                    )));
                }
            }
        }
        for f in &self.rewards {
            self.check_parents(&f.parents, false, &f.name)?;
            if f.values.len() != self.table_size(&f.parents) {
                return Err(Error::model(format!(
                    "reward factor {} has {} rows, expected {}",
                    f.name,
                    f.values.len(),
                    self.table_size(&f.parents)
                )));
            }
            if let Some(v) = f.values.iter().find(|v| !v.is_finite()) {
                return Err(Error::model(format!(
                    "reward factor {} has non-finite value {v}",
                    f.name
                )));
            }
        }
        self.order = self.synchronic_order()?;
        Ok(())
    }

    fn check_parents(&self, parents: &[ParentRef], allow_next: bool, owner: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for p in parents {
            let ok = match *p {
                ParentRef::State(i) => i < self.state_vars.len(),
                ParentRef::Action(i) => i < self.action_vars.len(),
                ParentRef::Next(i) => allow_next && i < self.state_vars.len(),
            };
            if !ok {
                return Err(Error::model(format!(
                    "{owner}: unresolved parent reference {p:?}"
                )));
            }
            if !seen.insert(*p) {
                return Err(Error::model(format!("{owner}: duplicate parent {p:?}")));
            }
        }
        Ok(())
    }

    /// Topological order of state variables under the synchronic relation.
    fn synchronic_order(&self) -> Result<Vec<usize>> {
        let m = self.state_vars.len();
        let mut indegree = vec![0usize; m];
        let mut children = vec![Vec::new(); m];
        for (i, cpt) in self.transitions.iter().enumerate() {
            for p in &cpt.parents {
                if let ParentRef::Next(j) = *p {
                    if j == i {
                        return Err(Error::model(format!(
                            "cyclic same-slice dependency at {}",
                            self.state_vars[i].name
                        )));
                    }
                    indegree[i] += 1;
                    children[j].push(i);
                }
            }
        }
        // Kahn's algorithm, preferring declaration order among ready vars.
        let mut ready: std::collections::BTreeSet<usize> =
            (0..m).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(m);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &c in &children[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != m {
            let stuck: Vec<_> = (0..m)
                .filter(|i| !order.contains(i))
                .map(|i| self.state_vars[i].name.clone())
                .collect();
            return Err(Error::model(format!(
                "cyclic same-slice dependency among {}",
                stuck.join(", ")
            )));
        }
        Ok(order)
    }

    pub fn num_state_vars(&self) -> usize {
        self.state_vars.len()
    }

    pub fn num_action_vars(&self) -> usize {
        self.action_vars.len()
    }

    /// State variables in an order compatible with same-slice arcs.
    pub fn synchronic_topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn parent_card(&self, p: ParentRef) -> usize {
        match p {
            ParentRef::State(_) | ParentRef::Next(_) => 2,
            ParentRef::Action(i) => self.action_vars[i].card(),
        }
    }

    pub fn table_size(&self, parents: &[ParentRef]) -> usize {
        parents.iter().map(|&p| self.parent_card(p)).product()
    }

    pub fn parent_cards(&self, parents: &[ParentRef]) -> Vec<usize> {
        parents.iter().map(|&p| self.parent_card(p)).collect()
    }

    /// Number of joint action values.
    pub fn joint_action_count(&self) -> usize {
        self.action_vars.iter().map(ActionVar::card).product()
    }

    pub fn action_cards(&self) -> Vec<usize> {
        self.action_vars.iter().map(ActionVar::card).collect()
    }

    /// The all-default action (every variable at value 0).
    pub fn noop(&self) -> Action {
        vec![0; self.action_vars.len()]
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.state_vars.iter().position(|v| v.name == name)
    }

    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.action_vars.iter().position(|v| v.name == name)
    }

    /// Resolves a parent reference to its value given the current state,
    /// action and (partially filled) next state.
    #[inline]
    pub fn parent_value(p: ParentRef, state: &[usize], action: &[usize], next: &[usize]) -> usize {
        match p {
            ParentRef::State(i) => state[i],
            ParentRef::Action(i) => action[i],
            ParentRef::Next(i) => next[i],
        }
    }

    fn row_index(&self, parents: &[ParentRef], state: &[usize], action: &[usize], next: &[usize]) -> usize {
        parents.iter().fold(0, |acc, &p| {
            acc * self.parent_card(p) + Self::parent_value(p, state, action, next)
        })
    }

    /// `p(s'_m = 1 | state, action, next)`; only synchronic parents of `m`
    /// are read from `next`.
    pub fn transition_prob(&self, m: usize, state: &[usize], action: &[usize], next: &[usize]) -> f64 {
        let cpt = &self.transitions[m];
        cpt.probs[self.row_index(&cpt.parents, state, action, next)]
    }

    pub fn factor_reward(&self, i: usize, state: &[usize], action: &[usize]) -> f64 {
        let f = &self.rewards[i];
        f.values[self.row_index(&f.parents, state, action, &[])]
    }

    /// Raw reward `R(s, a)` as the sum of all factors.
    pub fn reward(&self, state: &[usize], action: &[usize]) -> f64 {
        (0..self.rewards.len())
            .map(|i| self.factor_reward(i, state, action))
            .sum()
    }

    /// Global minimum and maximum over all raw reward table entries.
    pub fn reward_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in self.rewards.iter().flat_map(|f| f.values.iter()) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if self.rewards.is_empty() {
            (0.0, 0.0)
        } else {
            (lo, hi)
        }
    }

    /// Point-mass initial state if `initial` is deterministic.
    pub fn initial_state(&self) -> Option<State> {
        self.initial
            .iter()
            .map(|&p| {
                if p <= PROB_TOL {
                    Some(0)
                } else if p >= 1.0 - PROB_TOL {
                    Some(1)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Human-readable action label: the enum value name, or the names of the
    /// binary action variables set to 1 joined by `+` (`noop` if none).
    pub fn action_label(&self, action: &[usize]) -> String {
        if let [ActionVar {
            kind: ActionKind::Enum(values),
            ..
        }] = self.action_vars.as_slice()
        {
            return values[action[0]].clone();
        }
        let on: Vec<&str> = self
            .action_vars
            .iter()
            .zip(action)
            .filter(|(_, &v)| v == 1)
            .map(|(a, _)| a.name.as_str())
            .collect();
        if on.is_empty() {
            "noop".to_string()
        } else {
            on.join("+")
        }
    }

    /// All joint actions in mixed-radix order (index 0 is the no-op).
    pub fn all_actions(&self) -> Vec<Action> {
        let cards = self.action_cards();
        (0..self.joint_action_count())
            .map(|i| config_values(&cards, i))
            .collect()
    }
}

/// Start condition for an unrolled network.
#[derive(Debug, Clone, PartialEq)]
pub enum StartState {
    /// Independent Bernoulli priors on `s_0`; no evidence is added.
    Distribution(Vec<f64>),
    /// A concrete state; recorded as evidence on the `s_0` nodes.
    Concrete(State),
}

impl StartState {
    pub fn from_mdp(mdp: &FactoredMdp) -> Self {
        StartState::Distribution(mdp.initial.clone())
    }

    pub fn probs(&self) -> Vec<f64> {
        match self {
            StartState::Distribution(p) => p.clone(),
            StartState::Concrete(s) => s.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            StartState::Distribution(p) => p.len(),
            StartState::Concrete(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FactoredMdp {
        FactoredMdp::new(
            "tiny",
            vec![StateVar { name: "s".into() }],
            vec![ActionVar::binary("a")],
            vec![Cpt {
                parents: vec![ParentRef::State(0), ParentRef::Action(0)],
                probs: vec![0.0, 1.0, 1.0, 1.0],
            }],
            vec![RewardFactor {
                name: "r".into(),
                parents: vec![ParentRef::State(0)],
                values: vec![0.0, 1.0],
            }],
            vec![0.0],
            5,
        )
        .unwrap()
    }

    #[test]
    fn config_roundtrip() {
        let cards = [2, 3, 2];
        for i in 0..12 {
            assert_eq!(config_index(&cards, &config_values(&cards, i)), i);
        }
        assert_eq!(config_index(&cards, &[1, 0, 1]), 7);
    }

    #[test]
    fn transition_and_reward_lookup() {
        let m = tiny();
        assert_eq!(m.transition_prob(0, &[0], &[1], &[0]), 1.0);
        assert_eq!(m.transition_prob(0, &[0], &[0], &[0]), 0.0);
        assert_eq!(m.reward(&[1], &[0]), 1.0);
        assert_eq!(m.initial_state(), Some(vec![0]));
        assert_eq!(m.action_label(&[1]), "a");
        assert_eq!(m.action_label(&[0]), "noop");
    }

    #[test]
    fn rejects_bad_probability() {
        let mut m = tiny();
        m.transitions[0].probs[0] = 1.2;
        assert!(matches!(m.validate(), Err(Error::Model(_))));
    }

    #[test]
    fn rejects_synchronic_cycle() {
        let r = FactoredMdp::new(
            "cyc",
            vec![StateVar { name: "x".into() }, StateVar { name: "y".into() }],
            vec![ActionVar::binary("a")],
            vec![
                Cpt {
                    parents: vec![ParentRef::Next(1)],
                    probs: vec![0.0, 1.0],
                },
                Cpt {
                    parents: vec![ParentRef::Next(0)],
                    probs: vec![0.0, 1.0],
                },
            ],
            vec![],
            vec![0.0, 0.0],
            3,
        );
        assert!(matches!(r, Err(Error::Model(m)) if m.contains("cyclic")));
    }

    #[test]
    fn synchronic_order_respects_arcs() {
        let m = FactoredMdp::new(
            "ord",
            vec![StateVar { name: "x".into() }, StateVar { name: "y".into() }],
            vec![ActionVar::binary("a")],
            vec![
                Cpt {
                    parents: vec![ParentRef::Next(1)],
                    probs: vec![0.0, 1.0],
                },
                Cpt {
                    parents: vec![ParentRef::Action(0)],
                    probs: vec![0.0, 1.0],
                },
            ],
            vec![],
            vec![0.0, 0.0],
            3,
        )
        .unwrap();
        assert_eq!(m.synchronic_topological_order(), &[1, 0]);
    }

    #[test]
    fn rejects_enum_mixed_with_binary() {
        let r = FactoredMdp::new(
            "mix",
            vec![StateVar { name: "x".into() }],
            vec![
                ActionVar::binary("a"),
                ActionVar::enumerated("e", vec!["u".into(), "v".into()]),
            ],
            vec![Cpt {
                parents: vec![],
                probs: vec![0.5],
            }],
            vec![],
            vec![0.0],
            3,
        );
        assert!(r.is_err());
    }
}
