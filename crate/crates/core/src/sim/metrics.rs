//! Safety metrics over a closed-loop run: distance to the closest obstacle,
//! inverse time-to-collision `TTC⁻¹ = ḋ/d` and solve times, with box-plot
//! percentile summaries (25/50/75, whiskers at 1.5·IQR).

use crate::error::{Error, Result};

use super::{SimLog, SimLogRecord};

/// Box-plot summary of one series: quartiles, Tukey whiskers and the number
/// of points beyond the whiskers. Non-finite entries are dropped first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesSummary {
    pub count: usize,
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: usize,
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Summarizes a series with the box-plot convention; errors on an empty (or
/// all-non-finite) series.
pub fn summarize(series: &[f64]) -> Result<SeriesSummary> {
    let mut clean: Vec<f64> = series.iter().copied().filter(|v| v.is_finite()).collect();
    if clean.is_empty() {
        return Err(Error::Domain("cannot summarize an empty series".into()));
    }
    clean.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let p25 = quantile(&clean, 0.25);
    let median = quantile(&clean, 0.5);
    let p75 = quantile(&clean, 0.75);
    let iqr = p75 - p25;
    let lo_fence = p25 - 1.5 * iqr;
    let hi_fence = p75 + 1.5 * iqr;
    let whisker_low = clean
        .iter()
        .copied()
        .find(|v| *v >= lo_fence)
        .expect("at least one in-fence point");
    let whisker_high = clean
        .iter()
        .rev()
        .copied()
        .find(|v| *v <= hi_fence)
        .expect("at least one in-fence point");
    let outliers = clean.iter().filter(|v| **v < lo_fence || **v > hi_fence).count();
    Ok(SeriesSummary {
        count: clean.len(),
        min: clean[0],
        p25,
        median,
        p75,
        max: *clean.last().expect("nonempty"),
        whisker_low,
        whisker_high,
        outliers,
    })
}

/// Metric series and their summaries for one run.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub time: Vec<f64>,
    /// Center distance to the closest obstacle (m).
    pub distance: Vec<f64>,
    /// ḋ/d computed by central differences (one-sided at the ends), 1/s.
    pub ttc_inverse: Vec<f64>,
    /// Planner wall time per tick (s).
    pub solve_time: Vec<f64>,
    /// Signed box-surface clearance, min over obstacles (m); negative means
    /// the robot center is inside a box.
    pub clearance: Vec<f64>,
    pub collided: bool,
    pub distance_summary: SeriesSummary,
    pub ttc_summary: SeriesSummary,
    pub solve_summary: SeriesSummary,
}

fn closest_distance(record: &SimLogRecord) -> f64 {
    record
        .obstacles
        .iter()
        .map(|o| (record.robot.position - o.position).norm())
        .fold(f64::INFINITY, f64::min)
}

/// Distance, TTC⁻¹ and solve-time metrics of a log with at least 2 records.
pub fn compute_metrics(log: &SimLog) -> Result<Metrics> {
    let n = log.records.len();
    if n < 2 {
        return Err(Error::Domain(format!(
            "metrics need at least 2 records, got {n}"
        )));
    }
    let dt = log.records[1].time - log.records[0].time;
    let time: Vec<f64> = log.records.iter().map(|r| r.time).collect();
    let distance: Vec<f64> = log.records.iter().map(closest_distance).collect();
    let clearance: Vec<f64> = log
        .records
        .iter()
        .map(|r| {
            r.obstacles
                .iter()
                .zip(&log.boxes)
                .map(|(o, b)| {
                    let rel = r.robot.position - o.position;
                    (0..3)
                        .map(|j| rel[j].abs() - b.semi_sizes()[j])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();

    let mut collided = log.records.iter().any(|r| r.in_collision);
    let mut ttc_inverse = Vec::with_capacity(n);
    for k in 0..n {
        let d_dot = if k == 0 {
            (distance[1] - distance[0]) / dt
        } else if k == n - 1 {
            (distance[n - 1] - distance[n - 2]) / dt
        } else {
            (distance[k + 1] - distance[k - 1]) / (2.0 * dt)
        };
        if distance[k] == 0.0 {
            // Center coincides with an obstacle center: ±∞ sentinel.
            collided = true;
            ttc_inverse.push(if d_dot >= 0.0 { f64::INFINITY } else { f64::NEG_INFINITY });
        } else {
            ttc_inverse.push(d_dot / distance[k]);
        }
    }
    let solve_time: Vec<f64> = log.records.iter().map(|r| r.solve_time).collect();

    let distance_summary = summarize(&distance)?;
    let ttc_summary = summarize(&ttc_inverse)?;
    let solve_summary = summarize(&solve_time)?;
    Ok(Metrics {
        time,
        distance,
        ttc_inverse,
        solve_time,
        clearance,
        collided,
        distance_summary,
        ttc_summary,
        solve_summary,
    })
}
