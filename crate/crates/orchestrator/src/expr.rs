//! Binding expressions used by trigger bindings and activity locations.
//!
//! An expression is one or more terms joined by `+`. A term is a reference
//! such as `@event.path` or `@param.file`, a single-quoted literal (`''`
//! escapes a quote), or a bare word of `[A-Za-z0-9_./-]`:
//!
//! ```text
//! @param.folder + '/' + @param.file
//! output
//! ```

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, SecondsFormat, Utc};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ref {
    EventContainer,
    EventPath,
    ScheduleFireTime,
    /// Blob being processed by a batch schedule fire.
    BlobContainer,
    BlobPath,
    Param(String),
    /// Syntactically valid but unknown name; never resolves.
    Unknown(String),
}

impl fmt::Display for Ref {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ref::EventContainer => f.write_str("@event.container"),
            Ref::EventPath => f.write_str("@event.path"),
            Ref::ScheduleFireTime => f.write_str("@schedule.fire_time"),
            Ref::BlobContainer => f.write_str("@blob.container"),
            Ref::BlobPath => f.write_str("@blob.path"),
            Ref::Param(p) => write!(f, "@param.{p}"),
            Ref::Unknown(name) => write!(f, "@{name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Lit(String),
    Ref(Ref),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expr {
    terms: Vec<Term>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("expression {text:?}, position {position}: {reason}")]
pub struct ParseError {
    pub text: String,
    pub position: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("{0} is not available in this context")]
    Unavailable(String),
}

/// Values an expression may draw on. Absent parts make their references fail.
#[derive(Debug, Clone, Copy, Default)]
pub struct Context<'a> {
    pub event: Option<(&'a str, &'a str)>,
    pub fire_time: Option<DateTime<Utc>>,
    pub blob: Option<(&'a str, &'a str)>,
    pub params: Option<&'a BTreeMap<String, String>>,
}

fn bare(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '/' | '-')
}

fn ident(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-')
}

impl Expr {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let err = |position: usize, reason: &str| ParseError {
            text: text.to_string(),
            position,
            reason: reason.to_string(),
        };
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let at = |i: usize| chars.get(i).map_or(text.len(), |c| c.0);
        let mut i = 0;
        let mut terms = Vec::new();
        loop {
            while i < chars.len() && chars[i].1.is_whitespace() {
                i += 1;
            }
            let Some(&(pos, c)) = chars.get(i) else {
                return Err(err(text.len(), "expected a term"));
            };
            if c == '@' {
                let start = i + 1;
                i = start;
                while i < chars.len() && ident(chars[i].1) {
                    i += 1;
                }
                let name = &text[at(start)..at(i)];
                if name.is_empty() {
                    return Err(err(pos, "empty reference"));
                }
                terms.push(Term::Ref(match name {
                    "event.container" => Ref::EventContainer,
                    "event.path" => Ref::EventPath,
                    "schedule.fire_time" => Ref::ScheduleFireTime,
                    "blob.container" => Ref::BlobContainer,
                    "blob.path" => Ref::BlobPath,
                    _ => match name.strip_prefix("param.") {
                        Some(p) if !p.is_empty() && !p.contains('.') => Ref::Param(p.to_string()),
                        _ => Ref::Unknown(name.to_string()),
                    },
                }));
            } else if c == '\'' {
                let mut lit = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(err(pos, "unterminated literal")),
                        Some((_, '\'')) if matches!(chars.get(i + 1), Some((_, '\''))) => {
                            lit.push('\'');
                            i += 2;
                        }
                        Some((_, '\'')) => {
                            i += 1;
                            break;
                        }
                        Some(&(_, ch)) => {
                            lit.push(ch);
                            i += 1;
                        }
                    }
                }
                terms.push(Term::Lit(lit));
            } else if bare(c) {
                let start = i;
                while i < chars.len() && bare(chars[i].1) {
                    i += 1;
                }
                terms.push(Term::Lit(text[at(start)..at(i)].to_string()));
            } else {
                return Err(err(pos, &format!("unexpected character {c:?}")));
            }
            while i < chars.len() && chars[i].1.is_whitespace() {
                i += 1;
            }
            match chars.get(i) {
                None => break,
                Some((_, '+')) => i += 1,
                Some(&(p, ch)) => return Err(err(p, &format!("expected '+', found {ch:?}"))),
            }
        }
        Ok(Self { terms })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn refs(&self) -> impl Iterator<Item = &Ref> {
        self.terms.iter().filter_map(|t| match t {
            Term::Ref(r) => Some(r),
            Term::Lit(_) => None,
        })
    }

    pub fn eval(&self, ctx: &Context<'_>) -> Result<String, EvalError> {
        let mut out = String::new();
        for t in &self.terms {
            match t {
                Term::Lit(s) => out.push_str(s),
                Term::Ref(r) => out.push_str(&resolve(r, ctx).ok_or_else(|| EvalError::Unavailable(r.to_string()))?),
            }
        }
        Ok(out)
    }
}

fn resolve(r: &Ref, ctx: &Context<'_>) -> Option<String> {
    Some(match r {
        Ref::EventContainer => ctx.event?.0.to_string(),
        Ref::EventPath => ctx.event?.1.to_string(),
        Ref::ScheduleFireTime => ctx.fire_time?.to_rfc3339_opts(SecondsFormat::Secs, true),
        Ref::BlobContainer => ctx.blob?.0.to_string(),
        Ref::BlobPath => ctx.blob?.1.to_string(),
        Ref::Param(p) => ctx.params?.get(p)?.clone(),
        Ref::Unknown(_) => return None,
    })
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            match t {
                Term::Ref(r) => write!(f, "{r}")?,
                Term::Lit(s) if !s.is_empty() && s.chars().all(bare) => f.write_str(s)?,
                Term::Lit(s) => write!(f, "'{}'", s.replace('\'', "''"))?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_substitution() {
        let ctx = Context {
            event: Some(("stream", "july14/f001.jpg")),
            ..Context::default()
        };
        let e = Expr::parse("@event.container").unwrap();
        assert_eq!(e.eval(&ctx).unwrap(), "stream");
        let e = Expr::parse("'out/' + @event.path").unwrap();
        assert_eq!(e.eval(&ctx).unwrap(), "out/july14/f001.jpg");
        let e = Expr::parse("@schedule.fire_time").unwrap();
        assert_eq!(e.eval(&ctx), Err(EvalError::Unavailable("@schedule.fire_time".into())));
    }

    #[test]
    fn fire_time_is_rfc3339() {
        let t = DateTime::parse_from_rfc3339("2021-07-14T12:03:00Z")
            .unwrap()
            .with_timezone(&Utc);
        let ctx = Context {
            fire_time: Some(t),
            ..Context::default()
        };
        assert_eq!(
            Expr::parse("@schedule.fire_time").unwrap().eval(&ctx).unwrap(),
            "2021-07-14T12:03:00Z"
        );
    }

    #[test]
    fn literals_and_params() {
        let params: BTreeMap<String, String> = [("file".to_string(), "a.jpg".to_string())].into();
        let ctx = Context {
            params: Some(&params),
            ..Context::default()
        };
        let e = Expr::parse("results/day-1/ + @param.file + '.it''s'").unwrap();
        assert_eq!(e.eval(&ctx).unwrap(), "results/day-1/a.jpg.it's");
        assert!(Expr::parse("@param.missing").unwrap().eval(&ctx).is_err());
        assert!(Expr::parse("@nope.x").unwrap().eval(&ctx).is_err());
    }

    #[test]
    fn parse_errors() {
        for bad in ["", "  ", "a +", "+ a", "'open", "a b", "@", "a * b"] {
            assert!(Expr::parse(bad).is_err(), "{bad:?}");
        }
        assert_eq!(Expr::parse("a b").unwrap_err().position, 2);
    }

    #[test]
    fn display_round_trips() {
        for src in [
            "@param.folder + '/' + @param.file",
            "output",
            "'a b' + @event.path",
            "'it''s'",
            "''",
        ] {
            let e = Expr::parse(src).unwrap();
            assert_eq!(Expr::parse(&e.to_string()).unwrap(), e, "{src}");
        }
    }
}
