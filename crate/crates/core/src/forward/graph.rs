//! Differentiable forward approximation of `p(c_T = 1)`.
//!
//! Every node's marginal is the expectation of its conditional table under
//! the product of its parents' marginals, i.e. the fixed point that
//! evidence-free belief propagation reaches after one topological sweep.
//! Action marginals are the policy parameters themselves, so the output is a
//! polynomial in `θ` that can be evaluated and differentiated exactly.

use crate::dbn::{NodeKind, UnrolledDbn};
use crate::policy::PolicyParams;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Const(f64),
    /// Leaf reading `θ.values()[index]`.
    Param(usize),
    /// `bias + Σ coef * node`.
    Linear { bias: f64, terms: Vec<(f64, usize)> },
    Product(Vec<usize>),
}

/// Scalar DAG in topological order (children before parents is never
/// needed: every operand index is smaller than the node's own index).
#[derive(Debug, Clone, PartialEq)]
pub struct ComputeGraph {
    pub ops: Vec<Op>,
    pub output: usize,
    pub num_params: usize,
    /// `values[node][v]` is the graph node holding `μ(node = v)`.
    pub marginal_nodes: Vec<Vec<usize>>,
}

struct Builder {
    ops: Vec<Op>,
}

impl Builder {
    fn push(&mut self, op: Op) -> usize {
        self.ops.push(op);
        self.ops.len() - 1
    }

    fn constant(&self, id: usize) -> Option<f64> {
        match self.ops[id] {
            Op::Const(c) => Some(c),
            _ => None,
        }
    }

    fn product(&mut self, factors: &[usize]) -> usize {
        let mut scale = 1.0;
        let mut kept = Vec::with_capacity(factors.len());
        for &f in factors {
            match self.constant(f) {
                Some(c) => scale *= c,
                None => kept.push(f),
            }
        }
        if scale == 0.0 || kept.is_empty() {
            return self.push(Op::Const(scale));
        }
        let prod = if kept.len() == 1 { kept[0] } else { self.push(Op::Product(kept)) };
        if scale == 1.0 {
            prod
        } else {
            self.push(Op::Linear {
                bias: 0.0,
                terms: vec![(scale, prod)],
            })
        }
    }

    fn linear(&mut self, bias: f64, terms: Vec<(f64, usize)>) -> usize {
        let mut b = bias;
        let mut kept = Vec::with_capacity(terms.len());
        for (c, id) in terms {
            if c == 0.0 {
                continue;
            }
            match self.constant(id) {
                Some(v) => b += c * v,
                None => kept.push((c, id)),
            }
        }
        if kept.is_empty() {
            return self.push(Op::Const(b));
        }
        if b == 0.0 && kept.len() == 1 && kept[0].0 == 1.0 {
            return kept[0].1;
        }
        self.push(Op::Linear { bias: b, terms: kept })
    }
}

/// Builds the forward graph of `dbn`. Evidence is ignored (start states are
/// already point masses in the `s_0` tables), and action nodes read the
/// policy parameters laid out as in `PolicyParams::uniform(action_cards, T)`.
pub fn build_forward_graph(dbn: &UnrolledDbn) -> ComputeGraph {
    let layout = PolicyParams::uniform(&dbn.action_cards(), dbn.lookahead);
    let mut b = Builder { ops: Vec::new() };
    let mut marginal_nodes: Vec<Vec<usize>> = Vec::with_capacity(dbn.len());
    for id in 0..dbn.len() {
        let node = dbn.node(id);
        let values = if let NodeKind::Action { var, t } = node.kind {
            let o = layout.offset(t, var);
            if node.card == 2 {
                let one = b.push(Op::Param(o));
                let zero = b.linear(1.0, vec![(-1.0, one)]);
                vec![zero, one]
            } else {
                (0..node.card).map(|v| b.push(Op::Param(o + v))).collect()
            }
        } else {
            let pcards = dbn.parent_cards(id);
            let mut terms = Vec::new();
            for config in 0..node.num_configs() {
                let p1 = node.prob(config, 1);
                if p1 == 0.0 {
                    continue;
                }
                let pv = crate::model::config_values(&pcards, config);
                let factors: Vec<usize> = node
                    .parents
                    .iter()
                    .zip(&pv)
                    .map(|(&p, &v)| marginal_nodes[p][v])
                    .collect();
                let prod = b.product(&factors);
                terms.push((p1, prod));
            }
            let one = b.linear(0.0, terms);
            let zero = b.linear(1.0, vec![(-1.0, one)]);
            vec![zero, one]
        };
        marginal_nodes.push(values);
    }
    let output = marginal_nodes[dbn.terminal_node()][1];
    ComputeGraph {
        ops: b.ops,
        output,
        num_params: layout.len(),
        marginal_nodes,
    }
}

impl ComputeGraph {
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Value of every node for parameters `theta`.
    pub fn forward(&self, theta: &[f64]) -> Vec<f64> {
        assert_eq!(theta.len(), self.num_params, "parameter vector length");
        let mut val = vec![0.0; self.ops.len()];
        for (i, op) in self.ops.iter().enumerate() {
            val[i] = match op {
                Op::Const(c) => *c,
                Op::Param(k) => theta[*k],
                Op::Linear { bias, terms } => terms.iter().fold(*bias, |acc, (c, j)| acc + c * val[*j]),
                Op::Product(xs) => xs.iter().map(|j| val[*j]).product(),
            };
        }
        val
    }

    /// The output `p̂(c_T = 1)`.
    pub fn evaluate(&self, theta: &PolicyParams) -> f64 {
        self.forward(theta.values())[self.output]
    }

    /// Output value and its gradient with respect to every parameter,
    /// by reverse-mode accumulation.
    pub fn value_and_gradient(&self, theta: &PolicyParams) -> (f64, Vec<f64>) {
        let val = self.forward(theta.values());
        let mut adj = vec![0.0; self.ops.len()];
        adj[self.output] = 1.0;
        let mut grad = vec![0.0; self.num_params];
        let mut prefix = Vec::new();
        for i in (0..self.ops.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            match &self.ops[i] {
                Op::Const(_) => {}
                Op::Param(k) => grad[*k] += a,
                Op::Linear { terms, .. } => {
                    for (c, j) in terms {
                        adj[*j] += c * a;
                    }
                }
                Op::Product(xs) => {
                    // Prefix/suffix products avoid dividing by zero values.
                    prefix.clear();
                    let mut p = 1.0;
                    for j in xs {
                        prefix.push(p);
                        p *= val[*j];
                    }
                    let mut suffix = 1.0;
                    for (k, j) in xs.iter().enumerate().rev() {
                        adj[*j] += a * prefix[k] * suffix;
                        suffix *= val[*j];
                    }
                }
            }
        }
        (val[self.output], grad)
    }

    pub fn gradient(&self, theta: &PolicyParams) -> Vec<f64> {
        self.value_and_gradient(theta).1
    }

    /// Approximate marginal `μ(node = 1)` of every binary node.
    pub fn marginals(&self, theta: &PolicyParams) -> Vec<Vec<f64>> {
        let val = self.forward(theta.values());
        self.marginal_nodes
            .iter()
            .map(|vs| vs.iter().map(|&g| val[g]).collect())
            .collect()
    }
}
