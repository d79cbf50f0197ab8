//! Measurement reports, CSV rows, and the small statistics helpers the
//! scenario checks need.

use std::time::Duration;

/// Aggregated result of one closed-loop load run.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    /// Logical closed loops (connections × streams per connection).
    pub loops: usize,
    pub sent: u64,
    pub ok: u64,
    pub errors: u64,
    pub affinity_violations: u64,
    pub elapsed: Duration,
    pub throughput_rps: f64,
    pub mean_us: f64,
    pub p50_us: u64,
    pub p99_us: u64,
    pub max_us: u64,
}

impl LoadReport {
    /// Closed-loop identity: throughput × mean latency ≈ loop count.
    /// Returns the measured-over-expected ratio, or `None` without
    /// traffic.
    pub fn concurrency_ratio(&self) -> Option<f64> {
        if self.ok == 0 || self.loops == 0 {
            return None;
        }
        Some(self.throughput_rps * (self.mean_us / 1e6) / self.loops as f64)
    }

    pub fn human(&self) -> String {
        format!(
            "loops={} ok={} err={} affinity_err={} tput={:.0} req/s mean={:.0}us p50={}us p99={}us max={}us",
            self.loops,
            self.ok,
            self.errors,
            self.affinity_violations,
            self.throughput_rps,
            self.mean_us,
            self.p50_us,
            self.p99_us,
            self.max_us,
        )
    }
}

/// Merge reports from load runs that executed concurrently against one
/// system under test.
pub fn merge_reports(parts: &[LoadReport], all_latencies_us: Vec<u64>) -> LoadReport {
    let mut out = LoadReport::default();
    for p in parts {
        out.loops += p.loops;
        out.sent += p.sent;
        out.ok += p.ok;
        out.errors += p.errors;
        out.affinity_violations += p.affinity_violations;
        out.elapsed = out.elapsed.max(p.elapsed);
    }
    let mut lats = all_latencies_us;
    lats.sort_unstable();
    if !lats.is_empty() {
        out.mean_us = lats.iter().sum::<u64>() as f64 / lats.len() as f64;
        out.p50_us = percentile(&lats, 50.0);
        out.p99_us = percentile(&lats, 99.0);
        out.max_us = *lats.last().unwrap();
    }
    if out.elapsed > Duration::ZERO {
        out.throughput_rps = out.ok as f64 / out.elapsed.as_secs_f64();
    }
    out
}

/// Nearest-rank percentile over an ascending-sorted slice.
pub fn percentile(sorted_us: &[u64], p: f64) -> u64 {
    if sorted_us.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted_us.len() as f64).ceil() as usize;
    sorted_us[rank.clamp(1, sorted_us.len()) - 1]
}

/// One CSV line of scenario output.
#[derive(Debug, Clone)]
pub struct CsvRow {
    pub scenario: String,
    pub mode: String,
    pub param: String,
    pub throughput_rps: f64,
    pub mean_us: f64,
    pub p99_us: u64,
    pub errors: u64,
}

impl CsvRow {
    pub const HEADER: &'static str = "scenario,mode,param,throughput_rps,mean_us,p99_us,errors";

    pub fn from_report(scenario: &str, mode: &str, param: impl ToString, r: &LoadReport) -> Self {
        CsvRow {
            scenario: scenario.to_string(),
            mode: mode.to_string(),
            param: param.to_string(),
            throughput_rps: r.throughput_rps,
            mean_us: r.mean_us,
            p99_us: r.p99_us,
            errors: r.errors + r.affinity_violations,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{},{},{},{:.1},{:.1},{},{}",
            self.scenario,
            self.mode,
            self.param,
            self.throughput_rps,
            self.mean_us,
            self.p99_us,
            self.errors,
        )
    }
}

/// Least-squares line fit; returns (slope, intercept, r²). An r² of 1
/// is reported for fewer than two points or zero variance.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return (0.0, ys.first().copied().unwrap_or(0.0), 1.0);
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return (0.0, my, 1.0);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&v, 100.0), 100);
        assert_eq!(percentile(&[42], 99.0), 42);
        assert_eq!(percentile(&[], 99.0), 0);
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let xs = [1.0, 3.0, 5.0];
        let ys = [10.0, 20.0, 30.0];
        let (slope, intercept, r2) = linear_fit(&xs, &ys);
        assert!((slope - 5.0).abs() < 1e-9);
        assert!((intercept - 5.0).abs() < 1e-9);
        assert!((r2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn linear_fit_flags_nonlinearity() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [1.0, 10.0, 1.0, 10.0];
        let (_, _, r2) = linear_fit(&xs, &ys);
        assert!(r2 < 0.5, "r2={r2}");
    }

    #[test]
    fn csv_row_shape() {
        let r = LoadReport {
            loops: 8,
            ok: 100,
            throughput_rps: 1234.5,
            mean_us: 100.4,
            p99_us: 250,
            ..Default::default()
        };
        let row = CsvRow::from_report("connections", "inline", 8, &r);
        assert_eq!(row.line(), "connections,inline,8,1234.5,100.4,250,0");
        assert_eq!(CsvRow::HEADER.split(',').count(), row.line().split(',').count());
    }
}
