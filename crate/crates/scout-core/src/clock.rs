//! Timestamps for lineage entries.
//!
//! Runs against the mock backend must produce byte-identical artifacts, so
//! the pipeline injects a [`FixedClock`] there and a [`SystemClock`] for live
//! runs.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

/// Source of RFC 3339 timestamps.
pub trait Clock: Send + Sync {
    fn now_rfc3339(&self) -> String;
}

/// Wall-clock time, second resolution.
#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_rfc3339(&self) -> String {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        format_rfc3339(secs)
    }
}

/// Deterministic clock: starts at the Unix epoch and advances one second per
/// call, so repeated runs emit identical timestamps.
#[derive(Debug, Default)]
pub struct FixedClock {
    ticks: AtomicU64,
}

impl Clock for FixedClock {
    fn now_rfc3339(&self) -> String {
        let t = self.ticks.fetch_add(1, Ordering::SeqCst);
        format_rfc3339(t)
    }
}

/// Format seconds since the Unix epoch as `YYYY-MM-DDTHH:MM:SSZ`.
pub fn format_rfc3339(unix_secs: u64) -> String {
    let days = unix_secs / 86_400;
    let rem = unix_secs % 86_400;
    let (year, month, day) = civil_from_days(days as i64);
    format!(
        "{:04}-{:02}-{:02}T{:02}:{:02}:{:02}Z",
        year,
        month,
        day,
        rem / 3600,
        (rem % 3600) / 60,
        rem % 60
    )
}

// Howard Hinnant's civil-from-days algorithm.
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    (if m <= 2 { y + 1 } else { y }, m as u32, d as u32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_formats_as_1970() {
        assert_eq!(format_rfc3339(0), "1970-01-01T00:00:00Z");
    }

    #[test]
    fn known_timestamp() {
        // 2021-03-14T01:59:26Z
        assert_eq!(format_rfc3339(1_615_687_166), "2021-03-14T01:59:26Z");
    }

    #[test]
    fn fixed_clock_is_monotonic_and_deterministic() {
        let a = FixedClock::default();
        let b = FixedClock::default();
        let seq_a: Vec<_> = (0..3).map(|_| a.now_rfc3339()).collect();
        let seq_b: Vec<_> = (0..3).map(|_| b.now_rfc3339()).collect();
        assert_eq!(seq_a, seq_b);
        assert_eq!(seq_a[0], "1970-01-01T00:00:00Z");
        assert_eq!(seq_a[2], "1970-01-01T00:00:02Z");
    }
}
