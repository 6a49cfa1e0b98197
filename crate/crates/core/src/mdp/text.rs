//! Plain-text matrix format for MDPs, policy pairs, and fitted nuisances.
//!
//! Every file starts with a header line `# ope-<kind> v1`. After it come
//! `key value` lines and matrix blocks: a block keyword on its own line
//! followed by whitespace-separated numbers in row-major order, one matrix
//! row per line. Blank lines and further `#` lines are ignored.
//!
//! ```text
//! # ope-mdp v1
//! n_states 2
//! n_actions 1
//! gamma 0.9
//! r_max 1
//! noise gaussian
//! transition          # n_states * n_actions rows of n_states entries
//! 0.5 0.5
//! 0.5 0.5
//! reward_mean         # n_states rows of n_actions entries
//! 1
//! 0
//! reward_var
//! 0
//! 0
//! ```
//!
//! Policy files hold two named policies (`policy target`, `policy behavior`),
//! each with an `action_probs` block and an `initial_dist` row. Numbers are
//! written with Rust's shortest round-trip formatting, so write-then-read is
//! bit-exact.

use std::fmt::Write as _;

use super::{Policy, Provenance, QFunction, RewardNoise, TabularMdp, WFunction};
use crate::error::{OpeError, Result};

pub const MDP_HEADER: &str = "# ope-mdp v1";
pub const POLICIES_HEADER: &str = "# ope-policies v1";
pub const QFUNCTION_HEADER: &str = "# ope-qfunction v1";
pub const WFUNCTION_HEADER: &str = "# ope-wfunction v1";

struct Token<'a> {
    line: usize,
    column: usize,
    text: &'a str,
}

struct Tokens<'a> {
    items: Vec<Token<'a>>,
    pos: usize,
    last_line: usize,
}

impl<'a> Tokens<'a> {
    fn new(input: &'a str, header: &str) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        match lines.next() {
            Some((_, first)) if first.trim_end() == header => {}
            Some((_, first)) => {
                return Err(OpeError::parse(
                    1,
                    1,
                    format!("expected header `{header}`, found `{}`", first.trim_end()),
                ))
            }
            None => return Err(OpeError::parse(1, 1, format!("empty input, expected `{header}`"))),
        }
        let mut items = Vec::new();
        let mut last_line = 1;
        for (i, line) in lines {
            last_line = i + 1;
            let content = match line.find('#') {
                Some(cut) => &line[..cut],
                None => line,
            };
            let mut offset = 0;
            for piece in content.split_whitespace() {
                let col = content[offset..].find(piece).unwrap() + offset;
                offset = col + piece.len();
                items.push(Token {
                    line: i + 1,
                    column: col + 1,
                    text: piece,
                });
            }
        }
        Ok(Tokens {
            items,
            pos: 0,
            last_line,
        })
    }

    fn next(&mut self, what: &str) -> Result<&Token<'a>> {
        if self.pos >= self.items.len() {
            return Err(OpeError::parse(
                self.last_line + 1,
                1,
                format!("unexpected end of input, expected {what}"),
            ));
        }
        self.pos += 1;
        Ok(&self.items[self.pos - 1])
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        let tok = self.next(&format!("`{kw}`"))?;
        if tok.text != kw {
            return Err(OpeError::parse(
                tok.line,
                tok.column,
                format!("expected `{kw}`, found `{}`", tok.text),
            ));
        }
        Ok(())
    }

    fn word(&mut self, what: &str) -> Result<(String, usize, usize)> {
        let tok = self.next(what)?;
        Ok((tok.text.to_string(), tok.line, tok.column))
    }

    fn usize_value(&mut self, what: &str) -> Result<usize> {
        let tok = self.next(what)?;
        tok.text.parse::<usize>().map_err(|_| {
            OpeError::parse(
                tok.line,
                tok.column,
                format!("expected a nonnegative integer for {what}, found `{}`", tok.text),
            )
        })
    }

    fn f64_value(&mut self, what: &str) -> Result<f64> {
        let tok = self.next(what)?;
        match tok.text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(OpeError::parse(
                tok.line,
                tok.column,
                format!("expected a finite number for {what}, found `{}`", tok.text),
            )),
        }
    }

    fn key_usize(&mut self, key: &str) -> Result<usize> {
        self.keyword(key)?;
        self.usize_value(key)
    }

    fn key_f64(&mut self, key: &str) -> Result<f64> {
        self.keyword(key)?;
        self.f64_value(key)
    }

    fn block(&mut self, key: &str, count: usize) -> Result<Vec<f64>> {
        self.keyword(key)?;
        (0..count).map(|_| self.f64_value(key)).collect()
    }

    fn finish(&self) -> Result<()> {
        if let Some(tok) = self.items.get(self.pos) {
            return Err(OpeError::parse(
                tok.line,
                tok.column,
                format!("unexpected trailing token `{}`", tok.text),
            ));
        }
        Ok(())
    }

    fn position(&self) -> (usize, usize) {
        match self.items.get(self.pos.saturating_sub(1)) {
            Some(t) => (t.line, t.column),
            None => (1, 1),
        }
    }
}

fn write_rows(out: &mut String, values: &[f64], width: usize) {
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

/// Wraps a validation error with the position where the offending object
/// finished parsing, so callers always get a line/column.
fn at(tokens: &Tokens<'_>, err: OpeError) -> OpeError {
    match err {
        OpeError::InvalidModel(m) | OpeError::InvalidPolicy(m) => {
            let (line, column) = tokens.position();
            OpeError::parse(line, column, m)
        }
        other => other,
    }
}

pub fn write_mdp(mdp: &TabularMdp) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MDP_HEADER}");
    let _ = writeln!(out, "n_states {}", mdp.n_states());
    let _ = writeln!(out, "n_actions {}", mdp.n_actions());
    let _ = writeln!(out, "gamma {}", mdp.gamma());
    let _ = writeln!(out, "r_max {}", mdp.r_max());
    let _ = writeln!(out, "noise {}", mdp.reward_noise().name());
    out.push_str("transition\n");
    write_rows(&mut out, mdp.transition(), mdp.n_states());
    out.push_str("reward_mean\n");
    write_rows(&mut out, mdp.reward_mean(), mdp.n_actions());
    out.push_str("reward_var\n");
    write_rows(&mut out, mdp.reward_var(), mdp.n_actions());
    out
}

pub fn read_mdp(input: &str) -> Result<TabularMdp> {
    let mut t = Tokens::new(input, MDP_HEADER)?;
    let n = t.key_usize("n_states")?;
    let na = t.key_usize("n_actions")?;
    let gamma = t.key_f64("gamma")?;
    let r_max = t.key_f64("r_max")?;
    t.keyword("noise")?;
    let (noise_name, line, col) = t.word("noise kind")?;
    let noise = RewardNoise::from_name(&noise_name).ok_or_else(|| {
        OpeError::parse(line, col, format!("unknown noise kind `{noise_name}`"))
    })?;
    let transition = t.block("transition", n * na * n)?;
    let reward_mean = t.block("reward_mean", n * na)?;
    let reward_var = t.block("reward_var", n * na)?;
    t.finish()?;
    TabularMdp::new(n, na, transition, reward_mean, reward_var, noise, gamma, r_max)
        .map_err(|e| at(&t, e))
}

fn write_policy(out: &mut String, name: &str, pi: &Policy) {
    let _ = writeln!(out, "policy {name}");
    out.push_str("action_probs\n");
    write_rows(out, pi.action_probs(), pi.n_actions());
    out.push_str("initial_dist\n");
    write_rows(out, pi.initial_dist(), pi.n_states());
}

/// Serializes a (target, behavior) policy pair.
pub fn write_policies(target: &Policy, behavior: &Policy) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{POLICIES_HEADER}");
    let _ = writeln!(out, "n_states {}", target.n_states());
    let _ = writeln!(out, "n_actions {}", target.n_actions());
    write_policy(&mut out, "target", target);
    write_policy(&mut out, "behavior", behavior);
    out
}

fn read_policy(t: &mut Tokens<'_>, name: &str, n: usize, na: usize) -> Result<Policy> {
    t.keyword("policy")?;
    t.keyword(name)?;
    let probs = t.block("action_probs", n * na)?;
    let init = t.block("initial_dist", n)?;
    Policy::new(n, na, probs, init).map_err(|e| at(t, e))
}

/// Parses a (target, behavior) policy pair.
pub fn read_policies(input: &str) -> Result<(Policy, Policy)> {
    let mut t = Tokens::new(input, POLICIES_HEADER)?;
    let n = t.key_usize("n_states")?;
    let na = t.key_usize("n_actions")?;
    let target = read_policy(&mut t, "target", n, na)?;
    let behavior = read_policy(&mut t, "behavior", n, na)?;
    t.finish()?;
    Ok((target, behavior))
}

pub fn write_qfunction(q: &QFunction) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{QFUNCTION_HEADER}");
    let _ = writeln!(out, "provenance {}", q.provenance.name());
    let _ = writeln!(out, "n_states {}", q.n_states());
    let _ = writeln!(out, "n_actions {}", q.n_actions());
    out.push_str("values\n");
    write_rows(&mut out, q.values(), q.n_actions());
    out
}

fn read_provenance(t: &mut Tokens<'_>) -> Result<Provenance> {
    t.keyword("provenance")?;
    let (name, line, col) = t.word("provenance")?;
    Provenance::from_name(&name)
        .ok_or_else(|| OpeError::parse(line, col, format!("unknown provenance `{name}`")))
}

pub fn read_qfunction(input: &str) -> Result<QFunction> {
    let mut t = Tokens::new(input, QFUNCTION_HEADER)?;
    let provenance = read_provenance(&mut t)?;
    let n = t.key_usize("n_states")?;
    let na = t.key_usize("n_actions")?;
    let values = t.block("values", n * na)?;
    t.finish()?;
    Ok(QFunction::new(n, na, values).with_provenance(provenance))
}

pub fn write_wfunction(w: &WFunction) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{WFUNCTION_HEADER}");
    let _ = writeln!(out, "provenance {}", w.provenance.name());
    let _ = writeln!(out, "n_states {}", w.len());
    out.push_str("values\n");
    write_rows(&mut out, &w.values, w.len().max(1));
    out
}

pub fn read_wfunction(input: &str) -> Result<WFunction> {
    let mut t = Tokens::new(input, WFUNCTION_HEADER)?;
    let provenance = read_provenance(&mut t)?;
    let n = t.key_usize("n_states")?;
    let values = t.block("values", n)?;
    t.finish()?;
    Ok(WFunction::new(values).with_provenance(provenance))
}
