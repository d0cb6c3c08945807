// SPDX-License-Identifier: Apache-2.0

//! Energy from stored average-power points, the way a metrics query
//! computes it.

use serde::{Deserialize, Serialize};

use super::{AccountingError, WallWindow};
use crate::counter::EnergyQuantity;

/// Average power over the scrape interval ending at `t_wall_ns`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub t_wall_ns: i64,
    pub watts: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScrapeEstimator {
    /// Point count times interval, boundary coarseness included.
    #[default]
    QuerySum,
    /// Each point weighted by the part of its interval inside the window.
    Clipped,
}

impl ScrapeEstimator {
    pub fn estimate(
        self,
        points: &[PowerPoint],
        window: &WallWindow,
        scrape_interval_s: f64,
    ) -> Result<EnergyQuantity, AccountingError> {
        match self {
            ScrapeEstimator::QuerySum => interval_estimate(points, window, scrape_interval_s),
            ScrapeEstimator::Clipped => interval_estimate_clipped(points, window, scrape_interval_s),
        }
    }
}

fn check(window: &WallWindow, scrape_interval_s: f64) -> Result<(), AccountingError> {
    if window.end_wall_ns <= window.start_wall_ns {
        return Err(AccountingError::Invalid("query window must have positive length".into()));
    }
    if !(scrape_interval_s > 0.0 && scrape_interval_s.is_finite()) {
        return Err(AccountingError::Invalid(format!(
            "scrape interval must be positive, got {scrape_interval_s}"
        )));
    }
    Ok(())
}

fn to_energy(j: f64) -> Result<EnergyQuantity, AccountingError> {
    EnergyQuantity::new(j).map_err(|e| AccountingError::Invalid(e.to_string()))
}

/// Sum of watts over points in `(end - duration, end]`, times the interval.
pub fn interval_estimate(
    points: &[PowerPoint],
    window: &WallWindow,
    scrape_interval_s: f64,
) -> Result<EnergyQuantity, AccountingError> {
    check(window, scrape_interval_s)?;
    let mut n = 0usize;
    let mut sum = 0.0;
    for p in points {
        if p.t_wall_ns > window.start_wall_ns && p.t_wall_ns <= window.end_wall_ns {
            n += 1;
            sum += p.watts;
        }
    }
    if n == 0 {
        return Err(AccountingError::NoPointsInWindow);
    }
    to_energy(sum * scrape_interval_s)
}

/// Like [`interval_estimate`], but a point only contributes for the part of
/// `(t - interval, t]` that falls inside the window.
pub fn interval_estimate_clipped(
    points: &[PowerPoint],
    window: &WallWindow,
    scrape_interval_s: f64,
) -> Result<EnergyQuantity, AccountingError> {
    check(window, scrape_interval_s)?;
    let span_ns = (scrape_interval_s * 1e9).round() as i64;
    let mut any = false;
    let mut joules = 0.0;
    for p in points {
        let a = (p.t_wall_ns - span_ns).max(window.start_wall_ns);
        let b = p.t_wall_ns.min(window.end_wall_ns);
        if b > a {
            any = true;
            joules += p.watts * (b - a) as f64 / 1e9;
        }
    }
    if !any {
        return Err(AccountingError::NoPointsInWindow);
    }
    to_energy(joules)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SEC: i64 = 1_000_000_000;
    const T0: i64 = 1_700_000_000 * SEC;

    /// Points every `step_s` at `anchor + k * step_s` for all k with the
    /// point inside `[from, to]`; watts are the true mean of `power` over the
    /// preceding interval.
    fn grid(anchor: i64, step_s: i64, from: i64, to: i64, power: impl Fn(f64) -> f64) -> Vec<PowerPoint> {
        let step = step_s * SEC;
        let k0 = (from - anchor).div_euclid(step);
        let mut out = Vec::new();
        let mut k = k0;
        loop {
            let t = anchor + k * step;
            if t > to {
                break;
            }
            if t >= from {
                out.push(PowerPoint {
                    t_wall_ns: t,
                    watts: mean(&power, (t - step - T0) as f64 / 1e9, (t - T0) as f64 / 1e9),
                });
            }
            k += 1;
        }
        out
    }

    /// Midpoint rule with 1 ms steps; exact for the piecewise-constant
    /// profiles used here whose breakpoints are on whole milliseconds.
    fn integral(power: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let n = ((b - a) * 1000.0).round() as i64;
        (0..n).map(|i| power(a + (i as f64 + 0.5) / 1000.0) / 1000.0).sum()
    }

    fn mean(power: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        integral(power, a, b) / (b - a)
    }

    fn win(a_s: i64, b_s: i64) -> WallWindow {
        WallWindow::new(T0 + a_s * SEC, T0 + b_s * SEC).unwrap()
    }

    #[test]
    fn long_window_enumeration() {
        let flat = |_: f64| 100.0;
        let w = win(100, 1576);
        let exact = 1476.0 * 100.0;
        // points on a grid through the window end: 50 fall in (end - 1476 s, end]
        let pts = grid(w.end_wall_ns, 30, w.start_wall_ns - 60 * SEC, w.end_wall_ns, flat);
        let n = pts
            .iter()
            .filter(|p| p.t_wall_ns > w.start_wall_ns && p.t_wall_ns <= w.end_wall_ns)
            .count();
        assert_eq!(n, 50);
        let est = interval_estimate(&pts, &w, 30.0).unwrap().joules();
        assert!((est - n as f64 * 3000.0).abs() < 1e-6);
        assert!((est - 150000.0).abs() < 1e-6);

        // grid through the window start: the start point is excluded, 49 remain
        let pts = grid(w.start_wall_ns, 30, w.start_wall_ns, w.end_wall_ns, flat);
        let est = interval_estimate(&pts, &w, 30.0).unwrap().joules();
        assert!((est - 147000.0).abs() < 1e-6);
        assert!((exact - 147600.0f64).abs() < 1e-9);

        let clipped = interval_estimate_clipped(
            &grid(w.start_wall_ns, 30, w.start_wall_ns, w.end_wall_ns + 30 * SEC, flat),
            &w,
            30.0,
        )
        .unwrap()
        .joules();
        assert!((clipped - exact).abs() < 1e-6);
    }

    #[test]
    fn aligned_window_is_exact() {
        let flat = |_: f64| 250.0;
        let w = win(60, 360);
        let pts = grid(T0, 30, T0, T0 + 600 * SEC, flat);
        let est = interval_estimate(&pts, &w, 30.0).unwrap().joules();
        assert!((est - 300.0 * 250.0).abs() <= 1e-9 * est);
    }

    #[test]
    fn short_window_absorbs_idle() {
        // 120 W idle, +60 W while the workflow runs in [90 s, 150 s]
        let power = |t: f64| if (90.0..150.0).contains(&t) { 180.0 } else { 120.0 };
        let w = win(89, 150);
        let pts = grid(T0, 30, T0, T0 + 300 * SEC, power);
        let est = interval_estimate(&pts, &w, 30.0).unwrap().joules();
        let exact = integral(&power, 89.0, 150.0);
        assert!(est > exact, "{est} vs {exact}");
        let clipped = interval_estimate_clipped(&pts, &w, 30.0).unwrap().joules();
        assert!((clipped - exact).abs() < (est - exact).abs());
    }

    #[test]
    fn error_shrinks_with_interval() {
        let power = |t: f64| 100.0 + 20.0 * (t / 7.0).floor();
        let w = win(200, 245);
        let exact = integral(&power, 200.0, 245.0);
        let mut last = f64::INFINITY;
        for step in [30, 10, 1] {
            let pts = grid(w.end_wall_ns, step, T0, T0 + 400 * SEC, power);
            let est = interval_estimate(&pts, &w, step as f64).unwrap().joules();
            let err = (est - exact).abs();
            assert!(err <= last, "step {step}: {err} > {last}");
            last = err;
        }
        assert!(last < 1e-6 * exact);
    }

    #[test]
    fn empty_and_invalid_windows() {
        let pts = [PowerPoint {
            t_wall_ns: T0,
            watts: 1.0,
        }];
        assert!(matches!(
            interval_estimate(&pts, &win(10, 20), 30.0),
            Err(AccountingError::NoPointsInWindow)
        ));
        assert!(interval_estimate(&pts, &win(10, 10), 30.0).is_err());
        assert!(interval_estimate(&pts, &win(-10, 10), 0.0).is_err());
        // a point exactly on the window start lies outside (start, end]
        assert!(interval_estimate(&pts, &win(0, 10), 30.0).is_err());
        assert!(interval_estimate(&pts, &win(-10, 0), 30.0).is_ok());
    }
}
