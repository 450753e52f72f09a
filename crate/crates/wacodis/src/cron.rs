//! Five-field crontab patterns and next-fire-time evaluation, always in UTC.
//!
//! Field order is minute, hour, day-of-month, month, day-of-week (0 =
//! Sunday). Each field accepts literals, `*`, ranges `a-b`, steps `*/n` and
//! lists `a,b,c`. Day-of-month and day-of-week combine by OR when both are
//! restricted (the classic cron rule); a field counts as restricted when its
//! expression is anything other than `*`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, Months, NaiveDate, TimeZone, Timelike, Utc};

/// Fires are searched up to this many months past the reference instant.
pub const FIRE_HORIZON_MONTHS: u32 = 60;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CronParseError {
    #[error("expected 5 fields, found {0}")]
    FieldCount(usize),
    #[error("{field} field: {reason}")]
    Field { field: &'static str, reason: String },
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CronError {
    #[error("pattern never fires within {FIRE_HORIZON_MONTHS} months")]
    NoFireWithinHorizon,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CronPattern {
    source: String,
    minutes: BTreeSet<u8>,
    hours: BTreeSet<u8>,
    days_of_month: BTreeSet<u8>,
    months: BTreeSet<u8>,
    days_of_week: BTreeSet<u8>,
    dom_restricted: bool,
    dow_restricted: bool,
}

struct FieldSpec {
    name: &'static str,
    min: u8,
    max: u8,
}

const FIELDS: [FieldSpec; 5] = [
    FieldSpec { name: "minute", min: 0, max: 59 },
    FieldSpec { name: "hour", min: 0, max: 23 },
    FieldSpec { name: "day-of-month", min: 1, max: 31 },
    FieldSpec { name: "month", min: 1, max: 12 },
    FieldSpec { name: "day-of-week", min: 0, max: 6 },
];

fn parse_field(text: &str, spec: &FieldSpec) -> Result<(BTreeSet<u8>, bool), CronParseError> {
    let err = |reason: String| CronParseError::Field {
        field: spec.name,
        reason,
    };
    let value = |tok: &str| -> Result<u8, CronParseError> {
        let v: u8 = tok
            .parse()
            .map_err(|_| err(format!("{tok:?} is not a number")))?;
        if v < spec.min || v > spec.max {
            return Err(err(format!(
                "value {v} out of range {}-{}",
                spec.min, spec.max
            )));
        }
        Ok(v)
    };

    if text == "*" {
        return Ok(((spec.min..=spec.max).collect(), false));
    }
    if let Some(step) = text.strip_prefix("*/") {
        let step: u8 = step
            .parse()
            .map_err(|_| err(format!("bad step {step:?}")))?;
        if step == 0 {
            return Err(err("step must be >= 1".into()));
        }
        let set = (spec.min..=spec.max)
            .filter(|v| (v - spec.min) % step == 0)
            .collect();
        return Ok((set, true));
    }

    let mut set = BTreeSet::new();
    for item in text.split(',') {
        if item.is_empty() {
            return Err(err("empty list item".into()));
        }
        match item.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (value(a)?, value(b)?);
                if a > b {
                    return Err(err(format!("descending range {a}-{b}")));
                }
                set.extend(a..=b);
            }
            None => {
                set.insert(value(item)?);
            }
        }
    }
    if set.is_empty() {
        return Err(err("empty field".into()));
    }
    Ok((set, true))
}

impl FromStr for CronPattern {
    type Err = CronParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = s.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(CronParseError::FieldCount(fields.len()));
        }
        let (minutes, _) = parse_field(fields[0], &FIELDS[0])?;
        let (hours, _) = parse_field(fields[1], &FIELDS[1])?;
        let (days_of_month, dom_restricted) = parse_field(fields[2], &FIELDS[2])?;
        let (months, _) = parse_field(fields[3], &FIELDS[3])?;
        let (days_of_week, dow_restricted) = parse_field(fields[4], &FIELDS[4])?;
        Ok(CronPattern {
            source: fields.join(" "),
            minutes,
            hours,
            days_of_month,
            months,
            days_of_week,
            dom_restricted,
            dow_restricted,
        })
    }
}

impl fmt::Display for CronPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl CronPattern {
    pub fn minutes(&self) -> &BTreeSet<u8> {
        &self.minutes
    }
    pub fn hours(&self) -> &BTreeSet<u8> {
        &self.hours
    }
    pub fn days_of_month(&self) -> &BTreeSet<u8> {
        &self.days_of_month
    }
    pub fn months(&self) -> &BTreeSet<u8> {
        &self.months
    }
    pub fn days_of_week(&self) -> &BTreeSet<u8> {
        &self.days_of_week
    }
    pub fn dom_restricted(&self) -> bool {
        self.dom_restricted
    }
    pub fn dow_restricted(&self) -> bool {
        self.dow_restricted
    }

    fn day_matches(&self, date: NaiveDate) -> bool {
        if !self.months.contains(&(date.month() as u8)) {
            return false;
        }
        let dom = self.days_of_month.contains(&(date.day() as u8));
        let dow = self
            .days_of_week
            .contains(&(date.weekday().num_days_from_sunday() as u8));
        if self.dom_restricted && self.dow_restricted {
            dom || dow
        } else {
            dom && dow
        }
    }

    /// True iff the minute containing `t` matches every field.
    pub fn matches(&self, t: DateTime<Utc>) -> bool {
        self.minutes.contains(&(t.minute() as u8))
            && self.hours.contains(&(t.hour() as u8))
            && self.day_matches(t.date_naive())
    }

    /// Smallest minute-aligned instant strictly greater than `after` that
    /// matches the pattern, searching up to [`FIRE_HORIZON_MONTHS`] ahead.
    pub fn next_fire_time(&self, after: DateTime<Utc>) -> Result<DateTime<Utc>, CronError> {
        let start = truncate_to_minute(after) + Duration::minutes(1);
        let horizon = fire_horizon(after);

        let mut date = start.date_naive();
        let last = horizon.date_naive();
        while date <= last {
            if self.day_matches(date) {
                for &hour in &self.hours {
                    for &minute in &self.minutes {
                        let t = Utc.from_utc_datetime(
                            &date
                                .and_hms_opt(hour as u32, minute as u32, 0)
                                .expect("field sets are range-checked"),
                        );
                        if t < start {
                            continue;
                        }
                        if t > horizon {
                            return Err(CronError::NoFireWithinHorizon);
                        }
                        return Ok(t);
                    }
                }
            }
            date = date.succ_opt().expect("date within horizon");
        }
        Err(CronError::NoFireWithinHorizon)
    }
}

pub fn truncate_to_minute(t: DateTime<Utc>) -> DateTime<Utc> {
    t.with_second(0)
        .and_then(|t| t.with_nanosecond(0))
        .expect("truncation keeps instant valid")
}

/// End of the fire-search window for a given reference instant. Shared with
/// test oracles so both sides agree on the boundary.
pub fn fire_horizon(after: DateTime<Utc>) -> DateTime<Utc> {
    after
        .checked_add_months(Months::new(FIRE_HORIZON_MONTHS))
        .expect("horizon within datetime range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn at(y: i32, mo: u32, d: u32, h: u32, mi: u32, s: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, mo, d, h, mi, s).unwrap()
    }

    #[test]
    fn monthly_pattern_next_fire() {
        let p: CronPattern = "0 0 1 * *".parse().unwrap();
        let next = p.next_fire_time(at(2020, 7, 7, 12, 3, 26)).unwrap();
        assert_eq!(next, at(2020, 8, 1, 0, 0, 0));
    }

    #[test]
    fn every_minute_advances_by_one() {
        let p: CronPattern = "* * * * *".parse().unwrap();
        let t = at(2020, 7, 7, 12, 3, 26);
        assert_eq!(p.next_fire_time(t).unwrap(), at(2020, 7, 7, 12, 4, 0));
        // Exactly on a minute boundary: strictly greater means the next one.
        let aligned = at(2020, 7, 7, 12, 3, 0);
        assert_eq!(p.next_fire_time(aligned).unwrap(), at(2020, 7, 7, 12, 4, 0));
    }

    #[test]
    fn impossible_date_errors() {
        let p: CronPattern = "0 0 30 2 *".parse().unwrap();
        assert_eq!(
            p.next_fire_time(at(2020, 1, 1, 0, 0, 0)),
            Err(CronError::NoFireWithinHorizon)
        );
    }

    #[test]
    fn dom_dow_or_rule_when_both_restricted() {
        // Fires on the 15th OR on Sundays.
        let p: CronPattern = "0 0 15 * 0".parse().unwrap();
        // 2020-07-05 is a Sunday before the 15th.
        assert_eq!(
            p.next_fire_time(at(2020, 7, 1, 0, 0, 0)).unwrap(),
            at(2020, 7, 5, 0, 0, 0)
        );
        // After that Sunday, the 12th (Sunday) comes before the 15th.
        assert_eq!(
            p.next_fire_time(at(2020, 7, 5, 0, 0, 0)).unwrap(),
            at(2020, 7, 12, 0, 0, 0)
        );
    }

    #[test]
    fn dom_and_unrestricted_dow() {
        let p: CronPattern = "0 12 15 * *".parse().unwrap();
        assert_eq!(
            p.next_fire_time(at(2020, 7, 1, 0, 0, 0)).unwrap(),
            at(2020, 7, 15, 12, 0, 0)
        );
    }

    #[test]
    fn ranges_steps_lists() {
        let p: CronPattern = "*/15 9-17 1,15 6 *".parse().unwrap();
        assert_eq!(
            p.minutes().iter().copied().collect::<Vec<_>>(),
            vec![0, 15, 30, 45]
        );
        assert_eq!(p.hours().len(), 9);
        assert!(p.days_of_month().contains(&15));
        assert_eq!(p.months().iter().copied().collect::<Vec<_>>(), vec![6]);
        assert_eq!(
            p.next_fire_time(at(2020, 7, 1, 0, 0, 0)).unwrap(),
            at(2021, 6, 1, 9, 0, 0)
        );
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            "61 0 1 * *".parse::<CronPattern>(),
            Err(CronParseError::Field { field: "minute", .. })
        ));
        assert!(matches!(
            "0 0 1 *".parse::<CronPattern>(),
            Err(CronParseError::FieldCount(4))
        ));
        assert!("0 0 0 * *".parse::<CronPattern>().is_err()); // dom starts at 1
        assert!("*/0 * * * *".parse::<CronPattern>().is_err());
        assert!("5-1 * * * *".parse::<CronPattern>().is_err());
        assert!("a * * * *".parse::<CronPattern>().is_err());
    }

    #[test]
    fn display_round_trips_source() {
        let p: CronPattern = " 0  0 1 * * ".parse().unwrap();
        assert_eq!(p.to_string(), "0 0 1 * *");
    }
}
