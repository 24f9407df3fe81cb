//! Line-oriented text format for tabular MDPs.
//!
//! The format is sparse: only nonzero transition probabilities and
//! rewards are listed. Floats are printed with Rust's shortest
//! round-trippable representation, so write -> parse is exact.
//!
//! ```text
//! # optional comments
//! states 3
//! actions 2
//! gamma 0.9
//! terminal 2
//! initial 0 1
//! transition 0 1 2 0.25    # s a s' prob
//! reward 0 1 2 -1.5        # s a s' value
//! ```

use super::DiscreteMdp;
use crate::{DcrlError, Result};
use std::path::Path;

/// Serialize an MDP to the text format.
pub fn write_mdp(mdp: &DiscreteMdp) -> String {
    let mut out = String::new();
    out.push_str(&format!("states {}\n", mdp.n_states));
    out.push_str(&format!("actions {}\n", mdp.n_actions));
    out.push_str(&format!("gamma {}\n", mdp.gamma));
    for &t in &mdp.terminal_states {
        out.push_str(&format!("terminal {t}\n"));
    }
    for (s, &p) in mdp.initial_dist.iter().enumerate() {
        if p != 0.0 {
            out.push_str(&format!("initial {s} {p}\n"));
        }
    }
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            for sp in 0..mdp.n_states {
                let p = mdp.transition[mdp.idx(s, a, sp)];
                if p != 0.0 {
                    out.push_str(&format!("transition {s} {a} {sp} {p}\n"));
                }
            }
        }
    }
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            for sp in 0..mdp.n_states {
                let r = mdp.reward[mdp.idx(s, a, sp)];
                if r != 0.0 {
                    out.push_str(&format!("reward {s} {a} {sp} {r}\n"));
                }
            }
        }
    }
    out
}

fn parse_field<T: std::str::FromStr>(tok: &str, line_no: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| {
        DcrlError::invalid_argument(format!("line {line_no}: cannot parse {what} from {tok:?}"))
    })
}

/// Parse the text format back into a validated MDP.
pub fn parse_mdp(text: &str) -> Result<DiscreteMdp> {
    let mut n_states: Option<usize> = None;
    let mut n_actions: Option<usize> = None;
    let mut gamma: Option<f64> = None;
    let mut terminals = Vec::new();
    let mut initial_entries: Vec<(usize, f64)> = Vec::new();
    let mut transition_entries: Vec<(usize, usize, usize, f64)> = Vec::new();
    let mut reward_entries: Vec<(usize, usize, usize, f64)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let arity_err = || {
            DcrlError::invalid_argument(format!(
                "line {line_no}: wrong number of fields in {line:?}"
            ))
        };
        match toks[0] {
            "states" => {
                if toks.len() != 2 {
                    return Err(arity_err());
                }
                n_states = Some(parse_field(toks[1], line_no, "state count")?);
            }
            "actions" => {
                if toks.len() != 2 {
                    return Err(arity_err());
                }
                n_actions = Some(parse_field(toks[1], line_no, "action count")?);
            }
            "gamma" => {
                if toks.len() != 2 {
                    return Err(arity_err());
                }
                gamma = Some(parse_field(toks[1], line_no, "discount")?);
            }
            "terminal" => {
                if toks.len() != 2 {
                    return Err(arity_err());
                }
                terminals.push(parse_field(toks[1], line_no, "terminal state")?);
            }
            "initial" => {
                if toks.len() != 3 {
                    return Err(arity_err());
                }
                initial_entries.push((
                    parse_field(toks[1], line_no, "state")?,
                    parse_field(toks[2], line_no, "probability")?,
                ));
            }
            "transition" | "reward" => {
                if toks.len() != 5 {
                    return Err(arity_err());
                }
                let entry = (
                    parse_field(toks[1], line_no, "state")?,
                    parse_field(toks[2], line_no, "action")?,
                    parse_field(toks[3], line_no, "next state")?,
                    parse_field(toks[4], line_no, "value")?,
                );
                if toks[0] == "transition" {
                    transition_entries.push(entry);
                } else {
                    reward_entries.push(entry);
                }
            }
            other => {
                return Err(DcrlError::invalid_argument(format!(
                    "line {line_no}: unknown directive {other:?}"
                )));
            }
        }
    }

    let n_states =
        n_states.ok_or_else(|| DcrlError::invalid_argument("missing 'states' line"))?;
    let n_actions =
        n_actions.ok_or_else(|| DcrlError::invalid_argument("missing 'actions' line"))?;
    let gamma = gamma.ok_or_else(|| DcrlError::invalid_argument("missing 'gamma' line"))?;
    if n_states == 0 || n_actions == 0 {
        return Err(DcrlError::invalid_argument(
            "state and action counts must be positive",
        ));
    }

    let check_idx = |s: usize, a: usize, sp: usize| -> Result<()> {
        if s >= n_states || sp >= n_states {
            return Err(DcrlError::invalid_argument(format!(
                "state index out of range in ({s}, {a}, {sp})"
            )));
        }
        if a >= n_actions {
            return Err(DcrlError::invalid_argument(format!(
                "action index out of range in ({s}, {a}, {sp})"
            )));
        }
        Ok(())
    };

    let mut transition = vec![0.0; n_states * n_actions * n_states];
    let mut reward = vec![0.0; n_states * n_actions * n_states];
    let mut initial = vec![0.0; n_states];
    for (s, a, sp, p) in transition_entries {
        check_idx(s, a, sp)?;
        transition[(s * n_actions + a) * n_states + sp] = p;
    }
    for (s, a, sp, r) in reward_entries {
        check_idx(s, a, sp)?;
        reward[(s * n_actions + a) * n_states + sp] = r;
    }
    for (s, p) in initial_entries {
        if s >= n_states {
            return Err(DcrlError::invalid_argument(format!(
                "initial state {s} out of range"
            )));
        }
        initial[s] = p;
    }
    DiscreteMdp::new(n_states, n_actions, transition, reward, gamma, initial, terminals)
}

/// Read and parse an MDP file.
pub fn read_mdp(path: &Path) -> Result<DiscreteMdp> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DcrlError::Io(format!("{}: {e}", path.display())))?;
    parse_mdp(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::validate_mdp;

    #[test]
    fn roundtrip_is_exact() {
        let p = vec![
            0.30000000000000004, 0.7, // awkward float on purpose
            1.0, 0.0,
            0.0, 1.0,
            0.25, 0.75,
        ];
        let r = vec![1.5, -2.25, 0.0, 0.0, 0.125, 0.0, 3.0, 0.0];
        let mdp = crate::mdp::DiscreteMdp::new(
            2,
            2,
            p,
            r,
            0.95,
            vec![0.6, 0.4],
            vec![],
        )
        .unwrap();
        let text = write_mdp(&mdp);
        let back = parse_mdp(&text).unwrap();
        assert_eq!(back.transition, mdp.transition);
        assert_eq!(back.reward, mdp.reward);
        assert_eq!(back.initial_dist, mdp.initial_dist);
        assert_eq!(back.gamma, mdp.gamma);
        // Re-serializing gives byte-identical text.
        assert_eq!(write_mdp(&back), text);
    }

    #[test]
    fn terminals_survive_roundtrip() {
        let mdp = crate::mdp::tests::chain_mdp(3, 0.9, true);
        let back = parse_mdp(&write_mdp(&mdp)).unwrap();
        assert_eq!(back.terminal_states, vec![2]);
        assert!(validate_mdp(&back).is_empty());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "states 2\nactions 1\ngamma 0.9\ninitial 0 1\ntransition 0 0 1 oops\n";
        let err = parse_mdp(text).unwrap_err().to_string();
        assert!(err.contains("line 5"), "got: {err}");
    }

    #[test]
    fn unknown_directive_rejected() {
        let err = parse_mdp("states 1\nactions 1\ngamma 0.5\nbogus 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# header\nstates 1\n\nactions 1 # inline\ngamma 0.5\ninitial 0 1\ntransition 0 0 0 1\n";
        let mdp = parse_mdp(text).unwrap();
        assert_eq!(mdp.n_states, 1);
    }

    #[test]
    fn missing_header_is_an_error() {
        assert!(parse_mdp("actions 1\ngamma 0.5\n").is_err());
    }
}
