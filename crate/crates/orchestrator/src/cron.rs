//! Five-field cron expressions (`minute hour day-of-month month day-of-week`)
//! evaluated in UTC.
//!
//! Each field accepts `*`, numbers, ranges `a-b`, steps `*/n`, `a-b/n` and
//! `a/n`, and comma lists of those. Day-of-week runs 0-6 with 0 = Sunday.
//!
//! When both day fields are restricted a date matches if either matches. A
//! day field counts as unrestricted when it is a single `*` or `*/n` item.

use std::fmt;

use chrono::{DateTime, Datelike, Duration, Months, NaiveDate, Timelike, Utc};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CronError {
    #[error("syntax error at position {position}: {reason}")]
    Syntax { position: usize, reason: String },
    #[error("{field} value {value} at position {position} outside {min}-{max}")]
    Range {
        field: &'static str,
        value: u32,
        min: u8,
        max: u8,
        position: usize,
    },
    #[error("no matching time within five years")]
    NoFireWithinHorizon,
}

#[derive(Clone, Copy)]
struct FieldSpec {
    name: &'static str,
    min: u8,
    max: u8,
}

const FIELDS: [FieldSpec; 5] = [
    FieldSpec {
        name: "minute",
        min: 0,
        max: 59,
    },
    FieldSpec {
        name: "hour",
        min: 0,
        max: 23,
    },
    FieldSpec {
        name: "day-of-month",
        min: 1,
        max: 31,
    },
    FieldSpec {
        name: "month",
        min: 1,
        max: 12,
    },
    FieldSpec {
        name: "day-of-week",
        min: 0,
        max: 6,
    },
];

const HORIZON_MONTHS: u32 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Field {
    bits: u64,
    star: bool,
}

impl Field {
    fn has(&self, v: u32) -> bool {
        v < 64 && self.bits & (1 << v) != 0
    }

    fn values(&self) -> Vec<u8> {
        (0..64u8).filter(|&v| self.bits & (1 << v) != 0).collect()
    }
}

/// A parsed cron expression: one set of permitted values per field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CronExpr {
    fields: [Field; 5],
}

impl CronExpr {
    pub fn parse(text: &str) -> Result<Self, CronError> {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, ch) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
            match (ch.is_whitespace(), start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    spans.push((s, &text[s..i]));
                    start = None;
                }
                _ => {}
            }
        }
        if spans.len() != 5 {
            let position = spans.get(5).map_or(text.len(), |s| s.0);
            return Err(CronError::Syntax {
                position,
                reason: format!("expected 5 fields, found {}", spans.len()),
            });
        }
        let mut fields = [Field { bits: 0, star: false }; 5];
        for (i, (pos, src)) in spans.into_iter().enumerate() {
            fields[i] = parse_field(src, pos, FIELDS[i])?;
        }
        Ok(Self { fields })
    }

    pub fn minutes(&self) -> Vec<u8> {
        self.fields[0].values()
    }

    pub fn hours(&self) -> Vec<u8> {
        self.fields[1].values()
    }

    pub fn days_of_month(&self) -> Vec<u8> {
        self.fields[2].values()
    }

    pub fn months(&self) -> Vec<u8> {
        self.fields[3].values()
    }

    pub fn days_of_week(&self) -> Vec<u8> {
        self.fields[4].values()
    }

    fn date_matches(&self, d: NaiveDate) -> bool {
        let [_, _, dom, month, dow] = &self.fields;
        if !month.has(d.month()) {
            return false;
        }
        let dom_ok = dom.has(d.day());
        let dow_ok = dow.has(d.weekday().num_days_from_sunday());
        if dom.star || dow.star {
            dom_ok && dow_ok
        } else {
            dom_ok || dow_ok
        }
    }

    /// Smallest whole minute strictly after `after` that matches.
    pub fn next_fire(&self, after: DateTime<Utc>) -> Result<DateTime<Utc>, CronError> {
        let floor = after
            .with_second(0)
            .and_then(|t| t.with_nanosecond(0))
            .expect("second 0 always exists");
        let first = floor + Duration::minutes(1);
        let horizon = after
            .date_naive()
            .checked_add_months(Months::new(HORIZON_MONTHS))
            .ok_or(CronError::NoFireWithinHorizon)?;
        let (minutes, hours) = (self.minutes(), self.hours());
        let mut date = first.date_naive();
        let mut from = first.hour() * 60 + first.minute();
        while date <= horizon {
            if self.date_matches(date) {
                for &h in &hours {
                    for &m in &minutes {
                        let at = u32::from(h) * 60 + u32::from(m);
                        if at >= from {
                            let t = date
                                .and_hms_opt(u32::from(h), u32::from(m), 0)
                                .expect("valid clock time")
                                .and_utc();
                            return Ok(t);
                        }
                    }
                }
            }
            date = date.succ_opt().ok_or(CronError::NoFireWithinHorizon)?;
            from = 0;
        }
        Err(CronError::NoFireWithinHorizon)
    }

    pub fn matches(&self, t: DateTime<Utc>) -> bool {
        t.second() == 0
            && self.fields[0].has(t.minute())
            && self.fields[1].has(t.hour())
            && self.date_matches(t.date_naive())
    }
}

impl std::str::FromStr for CronExpr {
    type Err = CronError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

fn parse_field(src: &str, pos: usize, spec: FieldSpec) -> Result<Field, CronError> {
    let mut bits = 0u64;
    let mut offset = pos;
    let items: Vec<&str> = src.split(',').collect();
    let star = items.len() == 1 && (src == "*" || src.starts_with("*/"));
    for item in items {
        bits |= parse_item(item, offset, spec)?;
        offset += item.len() + 1;
    }
    // outside the day fields a full set and a star are interchangeable
    let day_field = matches!(spec.name, "day-of-month" | "day-of-week");
    let full = bits.count_ones() == u32::from(spec.max - spec.min) + 1;
    Ok(Field {
        bits,
        star: star || (full && !day_field),
    })
}

fn parse_item(item: &str, pos: usize, spec: FieldSpec) -> Result<u64, CronError> {
    let syntax = |at: usize, reason: &str| CronError::Syntax {
        position: pos + at,
        reason: reason.to_string(),
    };
    if item.is_empty() {
        return Err(syntax(0, "empty list item"));
    }
    let (range, step) = match item.split_once('/') {
        Some((r, s)) => {
            let at = r.len() + 1;
            let n = number(s, pos + at)?;
            if n == 0 {
                return Err(syntax(at, "step must be positive"));
            }
            (r, Some(n))
        }
        None => (item, None),
    };
    let (lo, hi) = if range == "*" {
        (u32::from(spec.min), u32::from(spec.max))
    } else if let Some((a, b)) = range.split_once('-') {
        let lo = bounded(number(a, pos)?, pos, spec)?;
        let hi = bounded(number(b, pos + a.len() + 1)?, pos + a.len() + 1, spec)?;
        if lo > hi {
            return Err(syntax(0, "range start exceeds end"));
        }
        (lo, hi)
    } else {
        let v = bounded(number(range, pos)?, pos, spec)?;
        // `a/n` runs from a to the field maximum
        (v, if step.is_some() { u32::from(spec.max) } else { v })
    };
    let step = step.unwrap_or(1) as usize;
    Ok((lo..=hi).step_by(step).fold(0u64, |acc, v| acc | (1 << v)))
}

fn number(s: &str, pos: usize) -> Result<u32, CronError> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(CronError::Syntax {
            position: pos,
            reason: format!("expected a number, found {s:?}"),
        });
    }
    s.parse().map_err(|_| CronError::Syntax {
        position: pos,
        reason: format!("number {s:?} too large"),
    })
}

fn bounded(v: u32, pos: usize, spec: FieldSpec) -> Result<u32, CronError> {
    if v < u32::from(spec.min) || v > u32::from(spec.max) {
        return Err(CronError::Range {
            field: spec.name,
            value: v,
            min: spec.min,
            max: spec.max,
            position: pos,
        });
    }
    Ok(v)
}

fn format_field(f: &Field, spec: FieldSpec) -> String {
    let values = f.values();
    let full = values.len() == usize::from(spec.max - spec.min + 1);
    if f.star {
        if full {
            return "*".into();
        }
        let step = match values.as_slice() {
            [_] => u32::from(spec.max - spec.min) + 1,
            [a, b, ..] => u32::from(b - a),
            [] => unreachable!("fields are never empty"),
        };
        return format!("*/{step}");
    }
    if full && !matches!(spec.name, "day-of-month" | "day-of-week") {
        return "*".into();
    }
    let mut parts = Vec::new();
    let mut i = 0;
    while i < values.len() {
        let mut j = i;
        while j + 1 < values.len() && values[j + 1] == values[j] + 1 {
            j += 1;
        }
        parts.push(if i == j {
            values[i].to_string()
        } else {
            format!("{}-{}", values[i], values[j])
        });
        i = j + 1;
    }
    parts.join(",")
}

impl fmt::Display for CronExpr {
    /// Canonical form; parses back to the same expression.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .fields
            .iter()
            .zip(FIELDS)
            .map(|(fd, s)| format_field(fd, s))
            .collect();
        f.write_str(&parts.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(s: &str) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc)
    }

    #[test]
    fn every_third_minute() {
        let c = CronExpr::parse("*/3 * * * *").unwrap();
        assert_eq!(c.minutes(), (0..60).step_by(3).collect::<Vec<u8>>());
        assert_eq!(c.hours().len(), 24);
        assert_eq!(
            c.next_fire(at("2021-07-14T12:00:00Z")).unwrap(),
            at("2021-07-14T12:03:00Z")
        );
        assert_eq!(
            c.next_fire(at("2021-07-14T12:01:59.5Z")).unwrap(),
            at("2021-07-14T12:03:00Z")
        );
        assert_eq!(
            c.next_fire(at("2021-07-14T23:58:00Z")).unwrap(),
            at("2021-07-15T00:00:00Z")
        );
    }

    #[test]
    fn weekly_and_yearly() {
        let monday = CronExpr::parse("0 9 * * 1").unwrap();
        // 2021-07-12 is a Monday
        assert_eq!(
            monday.next_fire(at("2021-07-12T09:00:00Z")).unwrap(),
            at("2021-07-19T09:00:00Z")
        );
        assert_eq!(
            monday.next_fire(at("2021-07-12T08:59:00Z")).unwrap(),
            at("2021-07-12T09:00:00Z")
        );
        let new_year = CronExpr::parse("0 0 1 1 *").unwrap();
        assert_eq!(
            new_year.next_fire(at("2021-07-14T00:00:00Z")).unwrap(),
            at("2022-01-01T00:00:00Z")
        );
        assert_eq!(
            new_year.next_fire(at("2022-01-01T00:00:00Z")).unwrap(),
            at("2023-01-01T00:00:00Z")
        );
    }

    #[test]
    fn leap_day_and_impossible_dates() {
        let leap = CronExpr::parse("0 0 29 2 *").unwrap();
        assert_eq!(
            leap.next_fire(at("2021-03-01T00:00:00Z")).unwrap(),
            at("2024-02-29T00:00:00Z")
        );
        let never = CronExpr::parse("0 0 30 2 *").unwrap();
        assert_eq!(
            never.next_fire(at("2021-07-14T00:00:00Z")),
            Err(CronError::NoFireWithinHorizon)
        );
    }

    #[test]
    fn day_fields_or_when_both_restricted() {
        // the 13th, or any Friday
        let c = CronExpr::parse("0 0 13 * 5").unwrap();
        assert_eq!(
            c.next_fire(at("2021-07-14T00:00:00Z")).unwrap(),
            at("2021-07-16T00:00:00Z")
        );
        assert_eq!(
            c.next_fire(at("2021-08-12T00:00:00Z")).unwrap(),
            at("2021-08-13T00:00:00Z")
        );
        // a star-step day-of-month keeps AND semantics
        let c = CronExpr::parse("0 0 */2 * 5").unwrap();
        assert!(!c.matches(at("2021-07-16T00:00:00Z"))); // Friday the 16th
        assert!(c.matches(at("2021-07-23T00:00:00Z"))); // Friday the 23rd
    }

    #[test]
    fn errors_carry_positions() {
        assert!(matches!(
            CronExpr::parse("61 * * * *"),
            Err(CronError::Range {
                field: "minute",
                value: 61,
                position: 0,
                ..
            })
        ));
        assert!(matches!(
            CronExpr::parse("0 0 * * 7"),
            Err(CronError::Range {
                field: "day-of-week",
                position: 8,
                ..
            })
        ));
        assert!(matches!(
            CronExpr::parse("* * * *"),
            Err(CronError::Syntax { position: 7, .. })
        ));
        assert!(matches!(
            CronExpr::parse("* * * * * *"),
            Err(CronError::Syntax { position: 10, .. })
        ));
        assert!(matches!(
            CronExpr::parse("*/0 * * * *"),
            Err(CronError::Syntax { position: 2, .. })
        ));
        assert!(matches!(
            CronExpr::parse("1,,2 * * * *"),
            Err(CronError::Syntax { position: 2, .. })
        ));
        assert!(matches!(
            CronExpr::parse("* 5-2 * * *"),
            Err(CronError::Syntax { position: 2, .. })
        ));
        assert!(matches!(
            CronExpr::parse("* * x * *"),
            Err(CronError::Syntax { position: 4, .. })
        ));
    }

    #[test]
    fn canonical_format() {
        for (src, canon) in [
            ("*/3 * * * *", "*/3 * * * *"),
            ("0,1,2,3,10 9-17 * * 1-5", "0-3,10 9-17 * * 1-5"),
            ("0 0 1-31 * *", "0 0 1-31 * *"),
            ("5/20 * * * *", "5,25,45 * * * *"),
            ("0 0 */40 * *", "0 0 */31 * *"),
        ] {
            let c = CronExpr::parse(src).unwrap();
            assert_eq!(c.to_string(), canon);
            assert_eq!(CronExpr::parse(canon).unwrap(), c);
        }
    }
}
