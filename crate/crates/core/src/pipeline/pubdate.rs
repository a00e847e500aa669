use std::sync::LazyLock;

use chrono::NaiveDate;
use regex::Regex;

static ISO_SEGMENT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\d{4})-(\d{2})-(\d{2})$").expect("valid regex"));

// Batch layout: <lccn>/<reel>/<YYYYMMDD><edition>/<seq>.jp2
static BATCH_SEGMENT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\d{4})(\d{2})(\d{2})\d{2}$").expect("valid regex"));

/// Publication date (`YYYY-MM-DD`) from the first dated segment of a corpus path.
///
/// Accepts web-style segments (`1863-07-04`) and batch-style issue
/// directories (`1863070401`, date plus two-digit edition). The date must
/// exist on the calendar.
pub fn parse_pub_date(page_path: &str) -> Result<String, String> {
    for segment in page_path.split(['/', '\\']) {
        let caps = ISO_SEGMENT
            .captures(segment)
            .or_else(|| BATCH_SEGMENT.captures(segment));
        let Some(caps) = caps else { continue };
        let (y, m, d) = (&caps[1], &caps[2], &caps[3]);
        let date = NaiveDate::from_ymd_opt(
            y.parse().expect("digits"),
            m.parse().expect("digits"),
            d.parse().expect("digits"),
        );
        return match date {
            Some(date) => Ok(date.format("%Y-%m-%d").to_string()),
            None => Err(format!("segment {segment:?} in {page_path:?} is not a calendar date")),
        };
    }
    Err(format!("no publication date segment in {page_path:?}"))
}

/// Year of a validated `YYYY-MM-DD` string.
pub fn year_of(pub_date: &str) -> Option<i32> {
    NaiveDate::parse_from_str(pub_date, "%Y-%m-%d")
        .ok()
        .and_then(|_| pub_date.get(..4))
        .and_then(|y| y.parse().ok())
}
