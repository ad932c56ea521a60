//! Epochs are UTC calendar days, numbered from 1970-01-01.

use chrono::{DateTime, NaiveDate, Utc};

pub type Epoch = i64;

const SECONDS_PER_DAY: i64 = 86_400;

pub fn epoch_of(ts: &DateTime<Utc>) -> Epoch {
    ts.timestamp().div_euclid(SECONDS_PER_DAY)
}

pub fn epoch_date(epoch: Epoch) -> NaiveDate {
    DateTime::from_timestamp(epoch * SECONDS_PER_DAY, 0)
        .expect("epoch within chrono range")
        .date_naive()
}

pub fn epoch_from_date(date: NaiveDate) -> Epoch {
    date.signed_duration_since(NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date"))
        .num_days()
}

/// Parses an epoch given as a day number or an ISO date.
pub fn parse_epoch(s: &str) -> Option<Epoch> {
    s.parse::<Epoch>().ok().or_else(|| {
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .ok()
            .map(epoch_from_date)
    })
}
