//! Domain definitions: the text format, built-in domains and structural
//! comparison of models.

pub mod builtin;
pub mod parser;
pub mod writer;

use std::path::Path;

pub use builtin::{build_cooking, build_synthetic};
pub use parser::parse_domain;
pub use writer::write_domain;

use crate::error::{Error, Result};
use crate::model::{config_values, FactoredMdp, ParentRef};

/// Loads `builtin:<name>` or a domain file.
pub fn load_domain(spec: &str) -> Result<FactoredMdp> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        return builtin::by_name(name);
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Domain(format!("cannot read {}: {e}", path.display())))?;
    parse_domain(&text)
}

/// First structural difference between two models, or `None` if they
/// define the same variables, dynamics, rewards and initial distribution.
///
/// Tables are compared as functions, so the order in which parents are
/// listed does not matter.
pub fn structural_diff(a: &FactoredMdp, b: &FactoredMdp) -> Option<String> {
    if a.name != b.name {
        return Some(format!("name {} vs {}", a.name, b.name));
    }
    if a.horizon != b.horizon {
        return Some(format!("horizon {} vs {}", a.horizon, b.horizon));
    }
    if a.state_vars != b.state_vars {
        return Some("state variables differ".into());
    }
    if a.action_vars != b.action_vars {
        return Some("action variables differ".into());
    }
    if a.initial != b.initial {
        return Some("initial distribution differs".into());
    }
    for (i, (ca, cb)) in a.transitions.iter().zip(&b.transitions).enumerate() {
        if !same_function(a, &ca.parents, &ca.probs, &cb.parents, &cb.probs) {
            return Some(format!("transition of {} differs", a.state_vars[i].name));
        }
    }
    if a.rewards.len() != b.rewards.len() {
        return Some("number of reward factors differs".into());
    }
    for (fa, fb) in a.rewards.iter().zip(&b.rewards) {
        if fa.name != fb.name || !same_function(a, &fa.parents, &fa.values, &fb.parents, &fb.values) {
            return Some(format!("reward factor {} differs", fa.name));
        }
    }
    None
}

fn same_function(mdp: &FactoredMdp, pa: &[ParentRef], ta: &[f64], pb: &[ParentRef], tb: &[f64]) -> bool {
    let mut union: Vec<ParentRef> = pa.to_vec();
    for p in pb {
        if !union.contains(p) {
            union.push(*p);
        }
    }
    let cards = mdp.parent_cards(&union);
    let size: usize = cards.iter().product();
    let lookup = |parents: &[ParentRef], table: &[f64], vals: &[usize]| {
        let idx = parents.iter().fold(0, |acc, p| {
            let pos = union.iter().position(|q| q == p).unwrap();
            acc * mdp.parent_card(*p) + vals[pos]
        });
        table[idx]
    };
    (0..size).all(|i| {
        let vals = config_values(&cards, i);
        lookup(pa, ta, &vals) == lookup(pb, tb, &vals)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn written_builtins_reparse_identically() {
        for mdp in [
            build_cooking(),
            builtin::penalty_corridor(3).unwrap(),
            builtin::independent_arms(&[0.9, 0.1]).unwrap(),
            builtin::random_mdp(&builtin::RandomMdpShape::default(), 3),
        ] {
            let text = write_domain(&mdp);
            let back = parse_domain(&text).unwrap();
            assert_eq!(structural_diff(&mdp, &back), None, "{}", mdp.name);
            assert_eq!(back, mdp);
        }
    }
}
