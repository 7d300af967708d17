//! Parser for the line-oriented domain format (see `docs/domain-format.md`).

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::model::{config_values, ActionKind, ActionVar, Cpt, FactoredMdp, ParentRef, RewardFactor, StateVar};

/// Default horizon when `meta:` does not set one.
pub const DEFAULT_HORIZON: usize = 20;

#[derive(Debug, Clone)]
struct Line<'a> {
    number: usize,
    text: &'a str,
    raw: &'a str,
}

impl Line<'_> {
    fn col_of(&self, sub: &str) -> usize {
        let start = sub.as_ptr() as usize - self.raw.as_ptr() as usize;
        self.raw[..start].chars().count() + 1
    }

    fn err(&self, sub: &str, msg: impl Into<String>) -> Error {
        Error::parse(self.number, self.col_of(sub), msg)
    }
}

#[derive(Debug)]
struct Section<'a> {
    header: Line<'a>,
    body: Vec<Line<'a>>,
}

/// Splits the document into sections: an unindented line ending in `:`
/// opens a section, indented lines belong to the current one.
fn sections(doc: &str) -> Result<Vec<Section<'_>>> {
    let mut out: Vec<Section> = Vec::new();
    for (i, raw) in doc.lines().enumerate() {
        let code = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let trimmed = code.trim();
        if trimmed.is_empty() {
            continue;
        }
        let offset = trimmed.as_ptr() as usize - raw.as_ptr() as usize;
        let line = Line {
            number: i + 1,
            text: trimmed,
            raw,
        };
        if offset == 0 {
            if !trimmed.ends_with(':') {
                return Err(line.err(trimmed, "expected a section header ending in ':'"));
            }
            out.push(Section {
                header: line,
                body: Vec::new(),
            });
        } else {
            match out.last_mut() {
                Some(s) => s.body.push(line),
                None => return Err(line.err(trimmed, "indented line outside of any section")),
            }
        }
    }
    Ok(out)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Whitespace/comma separated tokens as subslices of `s`.
fn tokens(s: &str) -> impl Iterator<Item = &str> {
    s.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty())
}

#[derive(Debug, Clone, Copy)]
enum Symbol {
    State(usize),
    Action(usize),
    EnumVar,
    EnumValue(usize),
}

struct Declarations {
    names: HashMap<String, Symbol>,
    state_vars: Vec<StateVar>,
    action_vars: Vec<ActionVar>,
    state_lines: Vec<(usize, usize)>,
}

impl Declarations {
    fn enum_card(&self) -> usize {
        match self.action_vars.first().map(|a| &a.kind) {
            Some(ActionKind::Enum(v)) => v.len(),
            _ => 0,
        }
    }

    fn card(&self, p: ParentRef) -> usize {
        match p {
            ParentRef::Action(i) => self.action_vars[i].card(),
            _ => 2,
        }
    }
}

/// A literal of a rule condition, resolved to a parent and accepted values.
#[derive(Debug, Clone, Copy)]
struct Literal {
    parent: ParentRef,
    value: usize,
    negated: bool,
}

impl Literal {
    fn holds(&self, v: usize) -> bool {
        (v == self.value) != self.negated
    }
}

struct Rule {
    conditions: Vec<Literal>,
    value: f64,
}

/// Parses a domain document.
pub fn parse_domain(doc: &str) -> Result<FactoredMdp> {
    let sections = sections(doc)?;
    let mut name = "domain".to_string();
    let mut horizon = DEFAULT_HORIZON;
    let mut decls = Declarations {
        names: HashMap::new(),
        state_vars: Vec::new(),
        action_vars: Vec::new(),
        state_lines: Vec::new(),
    };
    let mut enum_seen: Option<Line> = None;
    let mut binary_seen: Option<Line> = None;

    // Declarations first so that later sections may reference any variable.
    for sec in &sections {
        let head = sec.header.text.trim_end_matches(':').trim();
        let h = &sec.header;
        if head == "meta" {
            for line in &sec.body {
                let Some((k, v)) = line.text.split_once(':') else {
                    return Err(line.err(line.text, "expected 'key: value'"));
                };
                let (k, v) = (k.trim(), v.trim());
                match k {
                    "name" => name = v.to_string(),
                    "horizon" => {
                        horizon = v
                            .parse()
                            .ok()
                            .filter(|&h: &usize| h > 0)
                            .ok_or_else(|| line.err(v, "horizon must be a positive integer"))?;
                    }
                    _ => return Err(line.err(k, format!("unknown meta key '{k}'"))),
                }
            }
        } else if head == "statevars" {
            for line in &sec.body {
                for tok in tokens(line.text) {
                    let sym = Symbol::State(decls.state_vars.len());
                    declare(&mut decls, line, tok, sym)?;
                    decls.state_vars.push(StateVar { name: tok.to_string() });
                    decls.state_lines.push((line.number, line.col_of(tok)));
                }
            }
        } else if head == "actionvars" {
            if let Some(prev) = &enum_seen {
                return Err(h.err(h.text, format!(
                    "binary action variables cannot be combined with the enumerated action declared on line {}",
                    prev.number
                )));
            }
            binary_seen = Some(h.clone());
            for line in &sec.body {
                for tok in tokens(line.text) {
                    let sym = Symbol::Action(decls.action_vars.len());
                    declare(&mut decls, line, tok, sym)?;
                    decls.action_vars.push(ActionVar::binary(tok));
                }
            }
        } else if let Some(rest) = head.strip_prefix("action enum") {
            let var = rest.trim();
            if !is_ident(var) {
                return Err(h.err(h.text, "expected 'action enum <name>:'"));
            }
            if let Some(prev) = enum_seen.as_ref().or(binary_seen.as_ref()) {
                return Err(h.err(h.text, format!(
                    "only one enumerated action variable is allowed and it must be the only action (see line {})",
                    prev.number
                )));
            }
            enum_seen = Some(h.clone());
            declare(&mut decls, h, rest.trim(), Symbol::EnumVar)?;
            let mut values = Vec::new();
            for line in &sec.body {
                for tok in tokens(line.text) {
                    declare(&mut decls, line, tok, Symbol::EnumValue(values.len()))?;
                    values.push(tok.to_string());
                }
            }
            if values.len() < 2 {
                return Err(h.err(h.text, "an enumerated action needs at least two values"));
            }
            decls.action_vars.push(ActionVar::enumerated(var, values));
        }
    }
    if decls.state_vars.is_empty() {
        return Err(Error::parse(1, 1, "no state variables declared"));
    }
    if decls.action_vars.is_empty() {
        return Err(Error::parse(1, 1, "no action variables declared"));
    }

    let m = decls.state_vars.len();
    let mut transitions: Vec<Option<(Cpt, usize)>> = vec![None; m];
    let mut rewards = Vec::new();
    let mut initial = vec![0.0; m];
    for sec in &sections {
        let h = &sec.header;
        let head = h.text.trim_end_matches(':').trim();
        if let Some(rest) = head.strip_prefix("cpt ") {
            let (var_tok, parents) = split_header(h, rest.trim())?;
            let var = match decls.names.get(var_tok) {
                Some(Symbol::State(i)) => *i,
                Some(_) => return Err(h.err(var_tok, format!("'{var_tok}' is not a state variable"))),
                None => return Err(h.err(var_tok, format!("undeclared variable '{var_tok}'"))),
            };
            if transitions[var].is_some() {
                return Err(h.err(var_tok, format!("second table for '{var_tok}'")));
            }
            let parents = parents
                .map(|p| resolve_parents(&decls, h, p, true))
                .transpose()?;
            let (parents, probs) = parse_body(&decls, sec, parents, true)?;
            transitions[var] = Some((Cpt { parents, probs }, h.number));
        } else if let Some(rest) = head.strip_prefix("reward ") {
            let (fname, parents) = split_header(h, rest.trim())?;
            let Some(parents) = parents else {
                return Err(h.err(fname, "expected 'reward <name>(<vars>):'"));
            };
            let parents = resolve_parents(&decls, h, parents, false)?;
            let (parents, values) = parse_body(&decls, sec, Some(parents), false)?;
            rewards.push(RewardFactor {
                name: fname.to_string(),
                parents,
                values,
            });
        } else if head == "init" {
            for line in &sec.body {
                let (lhs, rhs, exact) = if let Some((l, r)) = line.text.split_once('~') {
                    (l.trim(), r.trim(), false)
                } else if let Some((l, r)) = line.text.split_once('=') {
                    (l.trim(), r.trim(), true)
                } else {
                    return Err(line.err(line.text, "expected 'var = 0|1' or 'var ~ p'"));
                };
                let i = match decls.names.get(lhs) {
                    Some(Symbol::State(i)) => *i,
                    _ => return Err(line.err(lhs, format!("'{lhs}' is not a state variable"))),
                };
                let p = if exact {
                    match rhs {
                        "0" => 0.0,
                        "1" => 1.0,
                        _ => return Err(line.err(rhs, "expected 0 or 1 (use '~' for a probability)")),
                    }
                } else {
                    probability(line, rhs)?
                };
                initial[i] = p;
            }
        } else if !matches!(head, "meta" | "statevars" | "actionvars") && !head.starts_with("action enum") {
            return Err(h.err(h.text, format!("unknown section '{head}'")));
        }
    }

    let mut cpts = Vec::with_capacity(m);
    for (i, t) in transitions.iter().enumerate() {
        match t {
            Some((cpt, _)) => cpts.push(cpt.clone()),
            None => {
                let (line, col) = decls.state_lines[i];
                return Err(Error::parse(line, col, format!(
                    "state variable '{}' has no cpt",
                    decls.state_vars[i].name
                )));
            }
        }
    }
    check_acyclic(&decls, &transitions)?;
    FactoredMdp::new(name, decls.state_vars, decls.action_vars, cpts, rewards, initial, horizon)
}

fn declare(decls: &mut Declarations, line: &Line, tok: &str, sym: Symbol) -> Result<()> {
    if !is_ident(tok) {
        return Err(line.err(tok, format!("invalid identifier '{tok}'")));
    }
    if decls.names.insert(tok.to_string(), sym).is_some() {
        return Err(line.err(tok, format!("'{tok}' declared twice")));
    }
    Ok(())
}

/// Splits `name(p1, p2)` into the name and the optional parent list text.
fn split_header<'a>(h: &Line, rest: &'a str) -> Result<(&'a str, Option<&'a str>)> {
    match rest.find('(') {
        Some(open) => {
            let Some(inner) = rest[open + 1..].strip_suffix(')') else {
                return Err(h.err(rest, "unterminated parent list"));
            };
            Ok((rest[..open].trim(), Some(inner)))
        }
        None => Ok((rest, None)),
    }
}

fn resolve_parents(decls: &Declarations, line: &Line, list: &str, allow_next: bool) -> Result<Vec<ParentRef>> {
    let mut out = Vec::new();
    for tok in tokens(list) {
        let (base, next) = match tok.strip_suffix('\'') {
            Some(b) => (b, true),
            None => (tok, false),
        };
        let p = match (decls.names.get(base), next) {
            (Some(Symbol::State(i)), false) => ParentRef::State(*i),
            (Some(Symbol::State(i)), true) if allow_next => ParentRef::Next(*i),
            (Some(Symbol::State(_)), true) => {
                return Err(line.err(tok, "rewards cannot depend on next-step variables"))
            }
            (Some(Symbol::Action(i)), false) => ParentRef::Action(*i),
            (Some(Symbol::EnumVar), false) => ParentRef::Action(0),
            (Some(Symbol::EnumValue(_)), _) => {
                return Err(line.err(tok, format!("'{base}' is an action value; list the action variable")))
            }
            (None, _) => return Err(line.err(tok, format!("undeclared variable '{base}'"))),
            (_, true) => return Err(line.err(tok, "only state variables have a next-step copy")),
        };
        if out.contains(&p) {
            return Err(line.err(tok, format!("duplicate parent '{tok}'")));
        }
        out.push(p);
    }
    Ok(out)
}

fn probability(line: &Line, tok: &str) -> Result<f64> {
    let p: f64 = tok
        .parse()
        .map_err(|_| line.err(tok, format!("invalid number '{tok}'")))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(line.err(tok, format!("probability {tok} outside [0, 1]")));
    }
    Ok(p)
}

fn real(line: &Line, tok: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| line.err(tok, format!("invalid number '{tok}'")))?;
    if !v.is_finite() {
        return Err(line.err(tok, "reward values must be finite"));
    }
    Ok(v)
}

/// Parses a table body, either rules or a flat list of numbers. Returns the
/// parents (inferred from the rules when not declared) and the table.
fn parse_body(
    decls: &Declarations,
    sec: &Section,
    declared: Option<Vec<ParentRef>>,
    is_cpt: bool,
) -> Result<(Vec<ParentRef>, Vec<f64>)> {
    let h = &sec.header;
    let key = if is_cpt { "p" } else { "v" };
    let number = |line: &Line, tok: &str| if is_cpt { probability(line, tok) } else { real(line, tok) };
    let is_rules = sec
        .body
        .first()
        .is_some_and(|l| l.text.starts_with("if ") || l.text.starts_with("default"));

    if !is_rules {
        let Some(parents) = declared else {
            return Err(h.err(h.text, "a flat table needs an explicit parent list"));
        };
        let mut values = Vec::new();
        for line in &sec.body {
            for tok in tokens(line.text) {
                values.push(number(line, tok)?);
            }
        }
        let size: usize = parents.iter().map(|&p| decls.card(p)).product();
        if values.len() != size {
            return Err(h.err(h.text, format!("table has {} entries, expected {size}", values.len())));
        }
        return Ok((parents, values));
    }

    let mut parents = declared.clone().unwrap_or_default();
    let mut rules = Vec::new();
    let mut default = None;
    for line in &sec.body {
        if default.is_some() {
            return Err(line.err(line.text, "rule after 'default' can never apply"));
        }
        let text = line.text;
        if let Some(rest) = text.strip_prefix("default") {
            default = Some(assignment(line, rest.trim(), key, &number)?);
            continue;
        }
        let Some(rest) = text.strip_prefix("if ") else {
            return Err(line.err(text, "expected 'if <condition> then ...' or 'default ...'"));
        };
        let Some(then) = rest.find(" then ") else {
            return Err(line.err(rest, "missing 'then'"));
        };
        let mut conditions = Vec::new();
        for lit in rest[..then].split('&') {
            let lit = lit.trim();
            if lit.is_empty() {
                return Err(line.err(rest, "empty literal in condition"));
            }
            let l = literal(decls, line, lit, is_cpt)?;
            if !parents.contains(&l.parent) {
                if declared.is_some() {
                    return Err(line.err(lit, format!("'{lit}' is not in the declared parent list")));
                }
                parents.push(l.parent);
            }
            conditions.push(l);
        }
        let value = assignment(line, rest[then + 6..].trim(), key, &number)?;
        rules.push(Rule { conditions, value });
    }
    let Some(default) = default else {
        return Err(h.err(h.text, "rule list needs a final 'default' rule"));
    };
    let cards: Vec<usize> = parents.iter().map(|&p| decls.card(p)).collect();
    let size: usize = cards.iter().product();
    let table = (0..size)
        .map(|i| {
            let vals = config_values(&cards, i);
            let get = |p: ParentRef| vals[parents.iter().position(|&q| q == p).unwrap()];
            rules
                .iter()
                .find(|r| r.conditions.iter().all(|l| l.holds(get(l.parent))))
                .map_or(default, |r| r.value)
        })
        .collect();
    Ok((parents, table))
}

fn assignment(line: &Line, text: &str, key: &str, number: &dyn Fn(&Line, &str) -> Result<f64>) -> Result<f64> {
    let Some((k, v)) = text.split_once('=') else {
        return Err(line.err(text, format!("expected '{key}=<number>'")));
    };
    if k.trim() != key {
        return Err(line.err(text, format!("expected '{key}=<number>'")));
    }
    number(line, v.trim())
}

fn literal(decls: &Declarations, line: &Line, lit: &str, allow_next: bool) -> Result<Literal> {
    let (negated, body) = match lit.strip_prefix('!') {
        Some(b) => (true, b.trim()),
        None => (false, lit),
    };
    let (base, next) = match body.strip_suffix('\'') {
        Some(b) => (b, true),
        None => (body, false),
    };
    let parent_value = match (decls.names.get(base), next) {
        (Some(Symbol::State(i)), false) => (ParentRef::State(*i), 1),
        (Some(Symbol::State(i)), true) if allow_next => (ParentRef::Next(*i), 1),
        (Some(Symbol::State(_)), true) => {
            return Err(line.err(lit, "rewards cannot depend on next-step variables"))
        }
        (Some(Symbol::Action(i)), false) => (ParentRef::Action(*i), 1),
        (Some(Symbol::EnumValue(v)), false) => {
            debug_assert!(*v < decls.enum_card());
            (ParentRef::Action(0), *v)
        }
        (Some(Symbol::EnumVar), _) => {
            return Err(line.err(lit, "use one of the action's values as the literal"))
        }
        (None, _) => return Err(line.err(lit, format!("undeclared variable '{base}'"))),
        (_, true) => return Err(line.err(lit, "only state variables have a next-step copy")),
    };
    Ok(Literal {
        parent: parent_value.0,
        value: parent_value.1,
        negated,
    })
}

fn check_acyclic(decls: &Declarations, transitions: &[Option<(Cpt, usize)>]) -> Result<()> {
    let m = transitions.len();
    let deps: Vec<BTreeSet<usize>> = transitions
        .iter()
        .map(|t| {
            t.as_ref()
                .map(|(c, _)| {
                    c.parents
                        .iter()
                        .filter_map(|p| match p {
                            ParentRef::Next(j) => Some(*j),
                            _ => None,
                        })
                        .collect()
                })
                .unwrap_or_default()
        })
        .collect();
    let mut done = vec![false; m];
    loop {
        let mut progressed = false;
        for i in 0..m {
            if !done[i] && deps[i].iter().all(|&j| done[j]) {
                done[i] = true;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    if let Some(i) = (0..m).find(|&i| !done[i]) {
        let line = transitions[i].as_ref().map_or(1, |(_, l)| *l);
        return Err(Error::parse(line, 1, format!(
            "cyclic same-step dependency involving '{}'",
            decls.state_vars[i].name
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_domain() {
        let doc = "statevars:\n  s\nactionvars:\n  a\ncpt s:\n  if s then p=1\n  default p=0\nreward r(s):\n  1 0\n";
        let mdp = parse_domain(doc).unwrap();
        assert_eq!(mdp.num_state_vars(), 1);
        assert_eq!(mdp.transitions[0].parents, vec![ParentRef::State(0)]);
        assert_eq!(mdp.transitions[0].probs, vec![0.0, 1.0]);
        assert_eq!(mdp.rewards[0].values, vec![1.0, 0.0]);
        assert_eq!(mdp.horizon, DEFAULT_HORIZON);
    }

    #[test]
    fn probability_out_of_range_is_located() {
        let doc = "statevars:\n  s\nactionvars:\n  a\ncpt s:\n  if a then p=1.2\n  default p=0\n";
        let err = parse_domain(doc).unwrap_err();
        assert_eq!(
            err,
            Error::Parse {
                line: 6,
                column: 15,
                message: "probability 1.2 outside [0, 1]".into()
            }
        );
    }

    #[test]
    fn first_match_wins() {
        let doc = "statevars:\n  x y\nactionvars:\n  a\ncpt x:\n  if a & y then p=0.9\n  if a then p=0.5\n  default p=0.1\ncpt y:\n  default p=0.3\n";
        let mdp = parse_domain(doc).unwrap();
        let cpt = &mdp.transitions[0];
        assert_eq!(cpt.parents, vec![ParentRef::Action(0), ParentRef::State(1)]);
        assert_eq!(cpt.probs, vec![0.1, 0.1, 0.5, 0.9]);
        assert!(cpt.parents.len() == 2 && mdp.transitions[1].parents.is_empty());
    }

    #[test]
    fn missing_default_is_rejected() {
        let doc = "statevars:\n  s\nactionvars:\n  a\ncpt s:\n  if a then p=1\n";
        assert!(matches!(parse_domain(doc), Err(Error::Parse { line: 5, .. })));
    }

    #[test]
    fn undeclared_and_cycle() {
        let doc = "statevars:\n  s\nactionvars:\n  a\ncpt s:\n  if zz then p=1\n  default p=0\n";
        assert!(matches!(parse_domain(doc), Err(Error::Parse { line: 6, column: 6, .. })));
        let doc = "statevars:\n  x y\nactionvars:\n  a\ncpt x:\n  if y' then p=1\n  default p=0\ncpt y:\n  if x' then p=1\n  default p=0\n";
        let err = parse_domain(doc).unwrap_err().to_string();
        assert!(err.contains("cyclic"), "{err}");
    }
}
