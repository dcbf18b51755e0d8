use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike, Weekday};

use crate::error::{Error, Result};

/// Uniform partition of whole days into slots of `interval_minutes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeAxis {
    pub start: NaiveDate,
    pub days: usize,
    pub interval_minutes: u32,
}

impl TimeAxis {
    pub fn new(start: NaiveDate, days: usize, interval_minutes: u32) -> Result<Self> {
        if interval_minutes == 0 || 1440 % interval_minutes != 0 {
            return Err(Error::config(format!(
                "interval of {interval_minutes} minutes does not divide a day"
            )));
        }
        if days == 0 {
            return Err(Error::config("time axis needs at least one day"));
        }
        Ok(Self {
            start,
            days,
            interval_minutes,
        })
    }

    pub fn slots_per_day(&self) -> usize {
        (1440 / self.interval_minutes) as usize
    }

    pub fn len(&self) -> usize {
        self.days * self.slots_per_day()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Slot containing `ts`, or `None` outside the span.
    pub fn slot_of(&self, ts: NaiveDateTime) -> Option<usize> {
        let origin = self.start.and_hms_opt(0, 0, 0).unwrap();
        let secs = (ts - origin).num_seconds();
        if secs < 0 {
            return None;
        }
        let slot = (secs / (self.interval_minutes as i64 * 60)) as usize;
        (slot < self.len()).then_some(slot)
    }

    pub fn day(&self, slot: usize) -> usize {
        slot / self.slots_per_day()
    }

    pub fn slot_of_day(&self, slot: usize) -> usize {
        slot % self.slots_per_day()
    }

    pub fn slot_start(&self, slot: usize) -> NaiveDateTime {
        self.start.and_hms_opt(0, 0, 0).unwrap() + Duration::minutes(slot as i64 * self.interval_minutes as i64)
    }

    pub fn weekday(&self, slot: usize) -> Weekday {
        self.slot_start(slot).weekday()
    }

    pub fn is_weekend(&self, slot: usize) -> bool {
        matches!(self.weekday(slot), Weekday::Sat | Weekday::Sun)
    }

    /// 0 = sleep (first eight hours), 1 = peak (middle eight), 2 = off-peak (last eight).
    pub fn day_part(&self, slot: usize) -> usize {
        let t = self.slot_start(slot);
        (t.hour() / 8) as usize
    }
}

/// Accepts `YYYY-MM-DD HH:MM:SS`, the same with a `T` separator, or Unix seconds.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(secs) = s.parse::<i64>() {
        return chrono::DateTime::from_timestamp(secs, 0).map(|d| d.naive_utc());
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
        .ok()
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%d %H:%M:%S").to_string()
}
