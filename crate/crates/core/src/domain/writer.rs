//! Serializer for the domain format. Every table is written flat with its
//! parent list, and floats use the shortest representation that parses back
//! to the same value.

use std::fmt::Write;

use crate::model::{ActionKind, FactoredMdp, ParentRef};

fn parent_name(mdp: &FactoredMdp, p: ParentRef) -> String {
    match p {
        ParentRef::State(i) => mdp.state_vars[i].name.clone(),
        ParentRef::Next(i) => format!("{}'", mdp.state_vars[i].name),
        ParentRef::Action(i) => mdp.action_vars[i].name.clone(),
    }
}

fn parent_list(mdp: &FactoredMdp, parents: &[ParentRef]) -> String {
    parents
        .iter()
        .map(|&p| parent_name(mdp, p))
        .collect::<Vec<_>>()
        .join(", ")
}

fn numbers(out: &mut String, values: &[f64], per_line: usize) {
    for chunk in values.chunks(per_line.max(1)) {
        let row: Vec<String> = chunk.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "  {}", row.join(" "));
    }
}

/// Writes `mdp` in the domain format.
pub fn write_domain(mdp: &FactoredMdp) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "meta:\n  name: {}\n  horizon: {}\n", mdp.name, mdp.horizon);
    out.push_str("statevars:\n");
    for v in &mdp.state_vars {
        let _ = writeln!(out, "  {}", v.name);
    }
    out.push('\n');
    match mdp.action_vars.as_slice() {
        [a] if matches!(a.kind, ActionKind::Enum(_)) => {
            let ActionKind::Enum(values) = &a.kind else { unreachable!() };
            let _ = writeln!(out, "action enum {}:\n  {}\n", a.name, values.join(" "));
        }
        vars => {
            out.push_str("actionvars:\n");
            for v in vars {
                let _ = writeln!(out, "  {}", v.name);
            }
            out.push('\n');
        }
    }
    for (i, cpt) in mdp.transitions.iter().enumerate() {
        let _ = writeln!(
            out,
            "cpt {}({}):",
            mdp.state_vars[i].name,
            parent_list(mdp, &cpt.parents)
        );
        let width = cpt.parents.last().map_or(1, |&p| mdp.parent_card(p));
        numbers(&mut out, &cpt.probs, width.max(2));
        out.push('\n');
    }
    for f in &mdp.rewards {
        let _ = writeln!(out, "reward {}({}):", f.name, parent_list(mdp, &f.parents));
        let width = f.parents.last().map_or(1, |&p| mdp.parent_card(p));
        numbers(&mut out, &f.values, width.max(2));
        out.push('\n');
    }
    out.push_str("init:\n");
    for (v, p) in mdp.state_vars.iter().zip(&mdp.initial) {
        if *p == 0.0 || *p == 1.0 {
            let _ = writeln!(out, "  {} = {}", v.name, *p as u8);
        } else {
            let _ = writeln!(out, "  {} ~ {p:?}", v.name);
        }
    }
    out
}
