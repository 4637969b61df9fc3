//! Line-oriented MDP text format.
//!
//! ```text
//! states N gamma G
//! r s a value
//! t s a s' p
//! ```
//!
//! Reals are written with 17 significant digits so that parsing the output
//! reproduces every bit. Actions of a state appear in the order of their first
//! `r`/`t` line; a missing `r` line means reward 0. Blank lines and lines
//! starting with `#` are ignored.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mdp::{ActionSpec, TabularMdp};
use crate::numeric::fmt17;

pub fn to_text(mdp: &TabularMdp) -> String {
    let mut out = String::new();
    writeln!(out, "states {} gamma {}", mdp.num_states(), fmt17(mdp.gamma())).unwrap();
    for s in 0..mdp.num_states() {
        for k in mdp.pairs(s) {
            let a = mdp.action_of(k);
            writeln!(out, "r {s} {a} {}", fmt17(mdp.reward(k))).unwrap();
            let (next, prob) = mdp.successors(k);
            for (t, p) in next.iter().zip(prob) {
                writeln!(out, "t {s} {a} {t} {}", fmt17(*p)).unwrap();
            }
        }
    }
    out
}

pub fn from_text(text: &str) -> Result<TabularMdp> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (line_no, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (n, gamma) = match fields.as_slice() {
        ["states", n, "gamma", g] => (
            parse_field::<usize>(n, line_no, "state count")?,
            parse_field::<f64>(g, line_no, "gamma")?,
        ),
        _ => {
            return Err(Error::Parse {
                line: line_no,
                message: "expected `states N gamma G`".into(),
            })
        }
    };
    let mut states: Vec<Vec<ActionSpec>> = vec![Vec::new(); n];
    let touch = |states: &mut Vec<Vec<ActionSpec>>, s: usize, a: usize, line: usize| -> Result<usize> {
        let row = states.get_mut(s).ok_or(Error::Parse {
            line,
            message: format!("state {s} out of range"),
        })?;
        Ok(match row.iter().position(|spec| spec.action == a) {
            Some(i) => i,
            None => {
                row.push(ActionSpec::new(a, 0.0, Vec::new()));
                row.len() - 1
            }
        })
    };
    for (line, l) in lines {
        let fields: Vec<&str> = l.split_whitespace().collect();
        match fields.as_slice() {
            ["r", s, a, value] => {
                let s = parse_field::<usize>(s, line, "state")?;
                let a = parse_field::<usize>(a, line, "action")?;
                let value = parse_field::<f64>(value, line, "reward")?;
                let i = touch(&mut states, s, a, line)?;
                states[s][i].reward = value;
            }
            ["t", s, a, next, p] => {
                let s = parse_field::<usize>(s, line, "state")?;
                let a = parse_field::<usize>(a, line, "action")?;
                let next = parse_field::<usize>(next, line, "next state")?;
                let p = parse_field::<f64>(p, line, "probability")?;
                if next >= n {
                    return Err(Error::Parse {
                        line,
                        message: format!("next state {next} out of range"),
                    });
                }
                let i = touch(&mut states, s, a, line)?;
                states[s][i].transitions.push((next, p));
            }
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("unrecognised line `{l}`"),
                })
            }
        }
    }
    TabularMdp::new(gamma, states)
}

fn parse_field<T: std::str::FromStr>(field: &str, line: usize, what: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} `{field}`"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{random_mdp, RandomMdpConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn text_round_trip_is_exact(seed in any::<u64>(), states in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = RandomMdpConfig { states, ..RandomMdpConfig::default() };
            let mdp = random_mdp(&mut rng, &cfg);
            let text = to_text(&mdp);
            let back = from_text(&text).unwrap();
            prop_assert_eq!(back.to_specs(), mdp.to_specs());
            prop_assert_eq!(back.gamma().to_bits(), mdp.gamma().to_bits());
            prop_assert_eq!(to_text(&back), text);
        }
    }

    #[test]
    fn malformed_lines_are_reported_with_line_numbers() {
        let err = from_text("states 2 gamma 0.9\nr 0 0 0.5\nx 1 2\n").unwrap_err();
        assert_eq!(
            err,
            Error::Parse {
                line: 3,
                message: "unrecognised line `x 1 2`".into()
            }
        );
        assert!(from_text("states 1 gamma 0.9\nt 0 0 4 1.0\n").is_err());
        assert!(from_text("").is_err());
    }

    #[test]
    fn header_and_comments() {
        let mdp = from_text("# absorbing\nstates 1 gamma 0.5\n\nt 0 0 0 1\n").unwrap();
        assert_eq!(mdp.num_states(), 1);
        assert_eq!(mdp.reward(0), 0.0);
        assert_eq!(mdp.gamma(), 0.5);
    }
}
