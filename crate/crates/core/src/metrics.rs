//! Measures of effectiveness over a run, v/C and level of service, and
//! report comparison.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microsim::{TripRecord, Vehicle};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Total distance over total vehicle time, m/s.
    pub mean_speed: f64,
    pub total_travel_time: f64,
    pub mean_waiting_time: f64,
    pub mean_time_lost: f64,
    pub mean_trip_duration: f64,
    pub trips_completed: u64,
    pub trips_unfinished: u64,
}

/// Metric names in report order, counts excluded.
pub const METRIC_NAMES: [&str; 5] = [
    "mean_speed",
    "total_travel_time",
    "mean_waiting_time",
    "mean_time_lost",
    "mean_trip_duration",
];

impl MetricsReport {
    pub fn metric_values(&self) -> [f64; 5] {
        [
            self.mean_speed,
            self.total_travel_time,
            self.mean_waiting_time,
            self.mean_time_lost,
            self.mean_trip_duration,
        ]
    }
}

/// Report over completed `trips`. Vehicles in `unfinished` add their elapsed
/// time up to `horizon` and their driven distance to the totals, and are
/// counted, but stay out of the per-trip means.
pub fn compute_report<'a>(
    trips: &[TripRecord],
    unfinished: impl IntoIterator<Item = &'a Vehicle>,
    horizon: f64,
) -> MetricsReport {
    let mut total_time = 0.0;
    let mut total_distance = 0.0;
    let mut unfinished_count = 0;
    for v in unfinished {
        total_time += (horizon - v.depart_time).max(0.0);
        total_distance += v.distance;
        unfinished_count += 1;
    }
    let n = trips.len();
    let (mut wait, mut lost, mut dur) = (0.0, 0.0, 0.0);
    for t in trips {
        total_time += t.trip_duration;
        total_distance += t.route_length;
        wait += t.accumulated_waiting;
        lost += t.time_lost;
        dur += t.trip_duration;
    }
    let mean = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    MetricsReport {
        mean_speed: if total_time > 0.0 {
            total_distance / total_time
        } else {
            0.0
        },
        total_travel_time: total_time,
        mean_waiting_time: mean(wait),
        mean_time_lost: mean(lost),
        mean_trip_duration: mean(dur),
        trips_completed: n as u64,
        trips_unfinished: unfinished_count,
    }
}

/// Per-metric mean and sample standard deviation over runs.
pub fn aggregate(reports: &[MetricsReport]) -> (MetricsReport, MetricsReport) {
    let n = reports.len();
    if n == 0 {
        return (MetricsReport::default(), MetricsReport::default());
    }
    let col = |f: fn(&MetricsReport) -> f64| -> (f64, f64) {
        let mean = reports.iter().map(f).sum::<f64>() / n as f64;
        let var = if n > 1 {
            reports.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    let speed = col(|r| r.mean_speed);
    let ttt = col(|r| r.total_travel_time);
    let wait = col(|r| r.mean_waiting_time);
    let lost = col(|r| r.mean_time_lost);
    let dur = col(|r| r.mean_trip_duration);
    let done = col(|r| r.trips_completed as f64);
    let open = col(|r| r.trips_unfinished as f64);
    (
        MetricsReport {
            mean_speed: speed.0,
            total_travel_time: ttt.0,
            mean_waiting_time: wait.0,
            mean_time_lost: lost.0,
            mean_trip_duration: dur.0,
            trips_completed: done.0.round() as u64,
            trips_unfinished: open.0.round() as u64,
        },
        MetricsReport {
            mean_speed: speed.1,
            total_travel_time: ttt.1,
            mean_waiting_time: wait.1,
            mean_time_lost: lost.1,
            mean_trip_duration: dur.1,
            trips_completed: done.1.round() as u64,
            trips_unfinished: open.1.round() as u64,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Los {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Los {
    /// Bands on v/C: A < 0.60 <= B < 0.70 <= C < 0.80 <= D < 0.85 <= E < 1.00 <= F.
    pub fn from_ratio(ratio: f64) -> Self {
        match ratio {
            r if r < 0.60 => Los::A,
            r if r < 0.70 => Los::B,
            r if r < 0.80 => Los::C,
            r if r < 0.85 => Los::D,
            r if r < 1.00 => Los::E,
            _ => Los::F,
        }
    }
}

impl fmt::Display for Los {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Demand over capacity, with capacity = sat_flow * green / cycle.
pub fn v_over_c(demand: f64, sat_flow: f64, green: f64, cycle: f64) -> Result<(f64, Los)> {
    if !(sat_flow > 0.0 && green > 0.0 && cycle > 0.0) || demand < 0.0 {
        return Err(Error::Config(format!(
            "v/C needs positive saturation flow, green and cycle (got {sat_flow}, {green}, {cycle})"
        )));
    }
    let ratio = demand / (sat_flow * green / cycle);
    Ok((ratio, Los::from_ratio(ratio)))
}

/// A report tagged with the scenario it was measured on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledReport {
    pub scenario_hash: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricDelta {
    pub metric: &'static str,
    pub baseline: f64,
    pub candidate: f64,
    /// Signed percent change; `None` when the baseline is zero and the candidate is not.
    pub percent: Option<f64>,
}

pub fn compare_reports(baseline: &LabeledReport, candidate: &LabeledReport) -> Result<Vec<MetricDelta>> {
    if baseline.scenario_hash != candidate.scenario_hash {
        return Err(Error::ScenarioMismatch(
            baseline.scenario_hash.clone(),
            candidate.scenario_hash.clone(),
        ));
    }
    let a = baseline.report.metric_values();
    let b = candidate.report.metric_values();
    Ok(METRIC_NAMES
        .iter()
        .zip(a.iter().zip(b))
        .map(|(&metric, (&baseline, candidate))| MetricDelta {
            metric,
            baseline,
            candidate,
            percent: percent_change(baseline, candidate),
        })
        .collect())
}

fn percent_change(a: f64, b: f64) -> Option<f64> {
    if a == 0.0 {
        return (b == 0.0).then_some(0.0);
    }
    Some((b - a) / a * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trip(len: f64, dur: f64, wait: f64, ff: f64) -> TripRecord {
        TripRecord {
            vehicle_id: 0,
            depart_time: 0.0,
            arrive_time: dur,
            accumulated_waiting: wait,
            time_lost: (dur - ff).max(0.0),
            trip_duration: dur,
            route_length: len,
            free_flow_time: ff,
        }
    }

    #[test]
    fn single_trip_arithmetic() {
        let r = compute_report(&[trip(500.0, 100.0, 20.0, 40.0)], [], 100.0);
        assert_eq!(r.mean_speed, 5.0);
        assert_eq!(r.mean_waiting_time, 20.0);
        assert_eq!(r.mean_time_lost, 60.0);
        assert_eq!(r.mean_trip_duration, 100.0);
        assert_eq!(r.total_travel_time, 100.0);
        assert_eq!(r.trips_completed, 1);
    }

    #[test]
    fn duplicate_trips_same_means() {
        let t = trip(500.0, 100.0, 20.0, 40.0);
        let one = compute_report(&[t.clone()], [], 100.0);
        let two = compute_report(&[t.clone(), t], [], 100.0);
        assert_eq!(one.mean_speed, two.mean_speed);
        assert_eq!(one.mean_time_lost, two.mean_time_lost);
        assert_eq!(two.total_travel_time, 200.0);
    }

    #[test]
    fn empty_report() {
        let r = compute_report(&[], [], 0.0);
        assert_eq!(r, MetricsReport::default());
    }

    #[test]
    fn medium_and_heavy_saturation_points() {
        let (r, los) = v_over_c(700.0, 1800.0, 22.0, 50.0).unwrap();
        assert!((r - 0.8838).abs() < 1e-3);
        assert_eq!(los, Los::E);
        let (r, los) = v_over_c(1000.0, 1800.0, 22.0, 50.0).unwrap();
        assert!((r - 1.2626).abs() < 1e-3);
        assert_eq!(los, Los::F);
        let (r, _) = v_over_c(900.0, 1800.0, 50.0, 50.0).unwrap();
        assert_eq!(r, 0.5);
        assert!(v_over_c(1.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn los_band_edges() {
        assert_eq!(Los::from_ratio(0.5999), Los::A);
        assert_eq!(Los::from_ratio(0.60), Los::B);
        assert_eq!(Los::from_ratio(0.85), Los::E);
        assert_eq!(Los::from_ratio(1.0), Los::F);
    }

    fn labeled(hash: &str, wait: f64) -> LabeledReport {
        LabeledReport {
            scenario_hash: hash.to_string(),
            report: MetricsReport {
                mean_speed: 6.0,
                mean_waiting_time: wait,
                ..Default::default()
            },
        }
    }

    #[test]
    fn compare_cases() {
        let d = compare_reports(&labeled("h", 137.0), &labeled("h", 137.0)).unwrap();
        assert!(d.iter().all(|x| x.percent == Some(0.0)));
        let d = compare_reports(&labeled("h", 137.0), &labeled("h", 28.7)).unwrap();
        let w = d.iter().find(|x| x.metric == "mean_waiting_time").unwrap();
        assert!((w.percent.unwrap() - -79.05).abs() < 0.01);
        assert!(matches!(
            compare_reports(&labeled("a", 1.0), &labeled("b", 1.0)),
            Err(Error::ScenarioMismatch(..))
        ));
    }

    #[test]
    fn aggregate_mean_and_stdev() {
        let a = MetricsReport {
            mean_speed: 4.0,
            ..Default::default()
        };
        let b = MetricsReport {
            mean_speed: 6.0,
            ..Default::default()
        };
        let (m, s) = aggregate(&[a, b]);
        assert_eq!(m.mean_speed, 5.0);
        assert!((s.mean_speed - 2f64.sqrt()).abs() < 1e-12);
    }

    prop_compose! {
        fn consistent_trip()(ff in 1.0..300.0f64, lost in 0.0..500.0f64, wait_frac in 0.0..1.0f64, len in 10.0..3000.0f64) -> TripRecord {
            let dur = ff + lost;
            trip(len, dur, lost * wait_frac, ff)
        }
    }

    proptest! {
        #[test]
        fn report_ordering(trips in prop::collection::vec(consistent_trip(), 0..20)) {
            let r = compute_report(&trips, [], 0.0);
            prop_assert!(r.mean_trip_duration >= r.mean_time_lost - 1e-9);
            prop_assert!(r.mean_time_lost >= r.mean_waiting_time - 1e-9);
            prop_assert!(r.mean_speed >= 0.0);
            let total: f64 = trips.iter().map(|t| t.arrive_time - t.depart_time).sum();
            prop_assert!((r.total_travel_time - total).abs() < 1e-6);
            prop_assert_eq!(r, compute_report(&trips, [], 0.0));
        }
    }
}
