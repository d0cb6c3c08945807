// SPDX-License-Identifier: Apache-2.0

//! Arithmetic over raw RAPL energy counters.
//!
//! Counters are fixed-width registers that silently wrap to zero. Every
//! function here assumes at most one wrap between two consecutive samples;
//! series remember a wrap-safety horizon so that gaps long enough to hide a
//! second wrap are reported instead of silently undercounted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CounterError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("raw value {value} does not fit in {bit_width} bits")]
    RawOutOfRange { value: u64, bit_width: u32 },
    #[error("energy {raw_delta} counts x {unit} J is not representable")]
    Overflow { raw_delta: u64, unit: f64 },
    #[error("series has {0} samples, at least 2 are required")]
    DegenerateSeries(usize),
    #[error("window start {start_ns} ns precedes first sample at {first_ns} ns")]
    WindowBeforeStart { start_ns: i64, first_ns: i64 },
    #[error("window end {end_ns} ns is after last sample at {last_ns} ns")]
    WindowAfterEnd { end_ns: i64, last_ns: i64 },
    #[error("window start {start_ns} ns is after window end {end_ns} ns")]
    InvertedWindow { start_ns: i64, end_ns: i64 },
    #[error("samples are not strictly increasing in time at index {0}")]
    NonMonotonic(usize),
}

/// RAPL power domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaplDomain {
    Package,
    Core,
    Graphics,
    Dram,
    Psys,
}

impl RaplDomain {
    pub const ALL: [RaplDomain; 5] = [
        RaplDomain::Package,
        RaplDomain::Core,
        RaplDomain::Graphics,
        RaplDomain::Dram,
        RaplDomain::Psys,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RaplDomain::Package => "package",
            RaplDomain::Core => "core",
            RaplDomain::Graphics => "graphics",
            RaplDomain::Dram => "dram",
            RaplDomain::Psys => "psys",
        }
    }
}

impl fmt::Display for RaplDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RaplDomain {
    type Err = CounterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RaplDomain::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| CounterError::InvalidArgument(format!("unknown RAPL domain `{s}`")))
    }
}

fn default_update_period() -> f64 {
    1e-3
}

/// Geometry of one domain's counter register.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterSpec {
    pub domain: RaplDomain,
    pub bit_width: u32,
    pub energy_unit_joules: f64,
    #[serde(default = "default_update_period")]
    pub update_period_s: f64,
}

impl CounterSpec {
    pub fn new(
        domain: RaplDomain,
        bit_width: u32,
        energy_unit_joules: f64,
        update_period_s: f64,
    ) -> Result<Self, CounterError> {
        let spec = CounterSpec {
            domain,
            bit_width,
            energy_unit_joules,
            update_period_s,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Microjoule counter with the default 1 ms update period.
    pub fn microjoules(domain: RaplDomain, bit_width: u32) -> Result<Self, CounterError> {
        Self::new(domain, bit_width, 1e-6, default_update_period())
    }

    pub fn validate(&self) -> Result<(), CounterError> {
        check_width(self.bit_width)?;
        if !(self.energy_unit_joules.is_finite() && self.energy_unit_joules > 0.0) {
            return Err(CounterError::InvalidArgument(format!(
                "energy unit must be finite and positive, got {}",
                self.energy_unit_joules
            )));
        }
        if !(self.update_period_s.is_finite() && self.update_period_s > 0.0) {
            return Err(CounterError::InvalidArgument(format!(
                "update period must be finite and positive, got {}",
                self.update_period_s
            )));
        }
        Ok(())
    }

    /// 2^bit_width.
    pub fn wrap_modulus(&self) -> u128 {
        1u128 << self.bit_width
    }

    /// Largest representable raw value.
    pub fn max_raw(&self) -> u64 {
        mask(self.bit_width)
    }

    /// Energy represented by one full trip around the register.
    pub fn wrap_energy_joules(&self) -> f64 {
        self.wrap_modulus() as f64 * self.energy_unit_joules
    }

    /// Shortest time in which the register can wrap at the given power bound.
    pub fn min_wrap_period_s(&self, max_power_watts: f64) -> f64 {
        self.wrap_energy_joules() / max_power_watts
    }
}

fn check_width(bit_width: u32) -> Result<(), CounterError> {
    if (1..=64).contains(&bit_width) {
        Ok(())
    } else {
        Err(CounterError::InvalidArgument(format!(
            "bit width must be in 1..=64, got {bit_width}"
        )))
    }
}

fn mask(bit_width: u32) -> u64 {
    if bit_width >= 64 {
        u64::MAX
    } else {
        (1u64 << bit_width) - 1
    }
}

/// One raw counter reading on the monotonic clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSample {
    pub t_ns: i64,
    pub raw: u64,
}

/// Non-negative, finite energy.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnergyQuantity(f64);

impl EnergyQuantity {
    pub const ZERO: EnergyQuantity = EnergyQuantity(0.0);

    pub fn new(joules: f64) -> Result<Self, CounterError> {
        if joules.is_finite() && joules >= 0.0 {
            Ok(EnergyQuantity(joules))
        } else {
            Err(CounterError::InvalidArgument(format!(
                "energy must be finite and non-negative, got {joules}"
            )))
        }
    }

    pub fn joules(self) -> f64 {
        self.0
    }
}

impl std::ops::Add for EnergyQuantity {
    type Output = EnergyQuantity;

    fn add(self, rhs: Self) -> Self::Output {
        EnergyQuantity(self.0 + rhs.0)
    }
}

impl std::iter::Sum for EnergyQuantity {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(EnergyQuantity::ZERO, |a, b| a + b)
    }
}

impl fmt::Display for EnergyQuantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} J", self.0)
    }
}

/// Counter increment between two readings, assuming at most one wrap.
pub fn raw_delta(prev: u64, curr: u64, bit_width: u32) -> Result<u64, CounterError> {
    check_width(bit_width)?;
    let m = mask(bit_width);
    for value in [prev, curr] {
        if value > m {
            return Err(CounterError::RawOutOfRange { value, bit_width });
        }
    }
    Ok(curr.wrapping_sub(prev) & m)
}

pub fn to_joules(raw_delta: u64, spec: &CounterSpec) -> Result<EnergyQuantity, CounterError> {
    spec.validate()?;
    let joules = raw_delta as f64 * spec.energy_unit_joules;
    if !joules.is_finite() {
        return Err(CounterError::Overflow {
            raw_delta,
            unit: spec.energy_unit_joules,
        });
    }
    Ok(EnergyQuantity(joules))
}

/// Why part of a series cannot be trusted to hold at most one wrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnsafeGap {
    /// Consecutive samples further apart than half the wrap-safety horizon.
    LongGap { from_ns: i64, to_ns: i64 },
    /// The sampler failed to read the counter at this instant.
    ReadFailure { t_ns: i64 },
}

impl UnsafeGap {
    fn overlaps(&self, start_ns: i64, end_ns: i64) -> bool {
        match *self {
            UnsafeGap::LongGap { from_ns, to_ns } => from_ns < end_ns && to_ns > start_ns,
            UnsafeGap::ReadFailure { t_ns } => t_ns >= start_ns && t_ns <= end_ns,
        }
    }
}

/// Timestamped raw readings of one counter on one node.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSeries {
    pub node_id: String,
    pub spec: CounterSpec,
    /// Wall-clock time (ns since the Unix epoch) at monotonic `t_ns = 0`.
    pub epoch_wall_ns: i64,
    samples: Vec<RawSample>,
    read_failures: Vec<i64>,
    wrap_horizon_ns: Option<i64>,
    // cumulative unwrapped counts at each sample, relative to the first
    cumulative: Vec<u128>,
}

impl SampleSeries {
    pub fn new(
        node_id: impl Into<String>,
        spec: CounterSpec,
        epoch_wall_ns: i64,
        samples: Vec<RawSample>,
    ) -> Result<Self, CounterError> {
        spec.validate()?;
        let max = spec.max_raw();
        for (i, s) in samples.iter().enumerate() {
            if s.raw > max {
                return Err(CounterError::RawOutOfRange {
                    value: s.raw,
                    bit_width: spec.bit_width,
                });
            }
            if i > 0 && s.t_ns <= samples[i - 1].t_ns {
                return Err(CounterError::NonMonotonic(i));
            }
        }
        let mut cumulative = Vec::with_capacity(samples.len());
        let mut acc = 0u128;
        for (i, s) in samples.iter().enumerate() {
            if i > 0 {
                acc += u128::from(raw_delta(samples[i - 1].raw, s.raw, spec.bit_width)?);
            }
            cumulative.push(acc);
        }
        Ok(SampleSeries {
            node_id: node_id.into(),
            spec,
            epoch_wall_ns,
            samples,
            read_failures: Vec::new(),
            wrap_horizon_ns: None,
            cumulative,
        })
    }

    /// Sets the wrap-safety horizon from an upper bound on the domain's power.
    pub fn with_power_bound(mut self, max_power_watts: f64) -> Self {
        if max_power_watts.is_finite() && max_power_watts > 0.0 {
            let period_ns = self.spec.min_wrap_period_s(max_power_watts) * 1e9;
            self.wrap_horizon_ns = Some(period_ns.min(i64::MAX as f64) as i64);
        }
        self
    }

    pub fn with_read_failures(mut self, t_ns: Vec<i64>) -> Self {
        self.read_failures = t_ns;
        self
    }

    pub fn samples(&self) -> &[RawSample] {
        &self.samples
    }

    pub fn read_failures(&self) -> &[i64] {
        &self.read_failures
    }

    pub fn wrap_horizon_ns(&self) -> Option<i64> {
        self.wrap_horizon_ns
    }

    pub fn first_t_ns(&self) -> Option<i64> {
        self.samples.first().map(|s| s.t_ns)
    }

    pub fn last_t_ns(&self) -> Option<i64> {
        self.samples.last().map(|s| s.t_ns)
    }

    pub fn to_wall_ns(&self, t_ns: i64) -> i64 {
        self.epoch_wall_ns + t_ns
    }

    pub fn to_mono_ns(&self, wall_ns: i64) -> i64 {
        wall_ns - self.epoch_wall_ns
    }

    /// Unsafe stretches of the series overlapping `[start_ns, end_ns]`.
    pub fn unsafe_gaps(&self, start_ns: i64, end_ns: i64) -> Vec<UnsafeGap> {
        let mut gaps: Vec<UnsafeGap> = Vec::new();
        if let Some(horizon) = self.wrap_horizon_ns {
            let limit = horizon / 2;
            gaps.extend(
                self.samples
                    .windows(2)
                    .filter(|w| w[1].t_ns - w[0].t_ns > limit)
                    .map(|w| UnsafeGap::LongGap {
                        from_ns: w[0].t_ns,
                        to_ns: w[1].t_ns,
                    }),
            );
        }
        gaps.extend(
            self.read_failures
                .iter()
                .map(|&t_ns| UnsafeGap::ReadFailure { t_ns }),
        );
        gaps.retain(|g| g.overlaps(start_ns, end_ns));
        gaps
    }

    pub fn has_unsafe_gap(&self) -> bool {
        match (self.first_t_ns(), self.last_t_ns()) {
            (Some(a), Some(b)) => !self.unsafe_gaps(a, b).is_empty(),
            _ => !self.read_failures.is_empty(),
        }
    }

    // Cumulative counts at `t_ns`, interpolated linearly between samples.
    fn cumulative_at(&self, t_ns: i64) -> f64 {
        let idx = self.samples.partition_point(|s| s.t_ns <= t_ns);
        // idx >= 1 because callers keep t within [first, last]
        let i = idx - 1;
        let base = self.cumulative[i] as f64;
        if t_ns == self.samples[i].t_ns || i + 1 == self.samples.len() {
            return base;
        }
        let span = (self.samples[i + 1].t_ns - self.samples[i].t_ns) as f64;
        let step = (self.cumulative[i + 1] - self.cumulative[i]) as f64;
        base + step * ((t_ns - self.samples[i].t_ns) as f64 / span)
    }
}

/// Energy consumed within `[window_start_ns, window_end_ns]` on the series'
/// monotonic clock, interpolating linearly at both boundaries.
pub fn integrate_window(
    series: &SampleSeries,
    window_start_ns: i64,
    window_end_ns: i64,
) -> Result<EnergyQuantity, CounterError> {
    let n = series.samples.len();
    if n < 2 {
        return Err(CounterError::DegenerateSeries(n));
    }
    if window_start_ns > window_end_ns {
        return Err(CounterError::InvertedWindow {
            start_ns: window_start_ns,
            end_ns: window_end_ns,
        });
    }
    let first_ns = series.samples[0].t_ns;
    let last_ns = series.samples[n - 1].t_ns;
    if window_start_ns < first_ns {
        return Err(CounterError::WindowBeforeStart {
            start_ns: window_start_ns,
            first_ns,
        });
    }
    if window_end_ns > last_ns {
        return Err(CounterError::WindowAfterEnd {
            end_ns: window_end_ns,
            last_ns,
        });
    }
    let counts = series.cumulative_at(window_end_ns) - series.cumulative_at(window_start_ns);
    let joules = counts.max(0.0) * series.spec.energy_unit_joules;
    if !joules.is_finite() {
        return Err(CounterError::Overflow {
            raw_delta: counts as u64,
            unit: series.spec.energy_unit_joules,
        });
    }
    Ok(EnergyQuantity(joules))
}

pub fn series_total(series: &SampleSeries) -> Result<EnergyQuantity, CounterError> {
    match (series.first_t_ns(), series.last_t_ns()) {
        (Some(a), Some(b)) if series.samples.len() >= 2 => integrate_window(series, a, b),
        _ => Err(CounterError::DegenerateSeries(series.samples.len())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SEC: i64 = 1_000_000_000;

    fn uj(bit_width: u32) -> CounterSpec {
        CounterSpec::microjoules(RaplDomain::Package, bit_width).unwrap()
    }

    // Reference counter that never wraps; readings are reduced afterwards.
    fn wrapped_series(spec: CounterSpec, true_counts: &[(i64, u128)]) -> SampleSeries {
        let modulus = spec.wrap_modulus();
        let samples = true_counts
            .iter()
            .map(|&(t_ns, c)| RawSample {
                t_ns,
                raw: (c % modulus) as u64,
            })
            .collect();
        SampleSeries::new("n0", spec, 0, samples).unwrap()
    }

    #[test]
    fn raw_delta_examples() {
        assert_eq!(raw_delta(100, 250, 38).unwrap(), 150);
        assert_eq!(raw_delta(12345, 12345, 38).unwrap(), 0);
        // unbounded: prev = 2^38 - 10, curr = 2^38 + 5
        let oracle_prev: u128 = (1 << 38) - 10;
        let oracle_curr: u128 = (1 << 38) + 5;
        let expected = (oracle_curr - oracle_prev) as u64;
        assert_eq!(expected, 15);
        assert_eq!(raw_delta((1 << 38) - 10, 5, 38).unwrap(), expected);
    }

    #[test]
    fn raw_delta_rejects_out_of_range() {
        assert_eq!(
            raw_delta(1 << 38, 0, 38),
            Err(CounterError::RawOutOfRange {
                value: 1 << 38,
                bit_width: 38
            })
        );
        assert!(raw_delta(0, 1 << 32, 32).is_err());
        assert!(raw_delta(0, 0, 0).is_err());
        assert!(raw_delta(0, 0, 65).is_err());
    }

    #[test]
    fn raw_delta_full_width() {
        assert_eq!(raw_delta(u64::MAX - 1, 3, 64).unwrap(), 5);
    }

    #[test]
    fn to_joules_examples() {
        assert_eq!(to_joules(1_000_000, &uj(32)).unwrap().joules(), 1.0);
        assert_eq!(to_joules(0, &uj(32)).unwrap().joules(), 0.0);
        let spec = CounterSpec::new(RaplDomain::Dram, 32, 2f64.powi(-16), 1e-3).unwrap();
        // 2^20 * 2^-16 = 2^4, exact in binary
        assert_eq!(to_joules(1 << 20, &spec).unwrap().joules(), 16.0);
    }

    #[test]
    fn to_joules_overflow() {
        let spec = CounterSpec {
            domain: RaplDomain::Package,
            bit_width: 64,
            energy_unit_joules: f64::MAX / 2.0,
            update_period_s: 1e-3,
        };
        assert!(matches!(
            to_joules(u64::MAX, &spec),
            Err(CounterError::Overflow { .. })
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(CounterSpec::new(RaplDomain::Core, 0, 1e-6, 1e-3).is_err());
        assert!(CounterSpec::new(RaplDomain::Core, 65, 1e-6, 1e-3).is_err());
        assert!(CounterSpec::new(RaplDomain::Core, 32, 0.0, 1e-3).is_err());
        assert!(CounterSpec::new(RaplDomain::Core, 32, f64::NAN, 1e-3).is_err());
        assert_eq!(uj(38).wrap_modulus(), 1u128 << 38);
    }

    #[test]
    fn domain_string_form() {
        for d in RaplDomain::ALL {
            assert_eq!(d.to_string().parse::<RaplDomain>().unwrap(), d);
            assert_eq!(d.to_string(), d.to_string().to_lowercase());
        }
        assert!("PACKAGE".parse::<RaplDomain>().is_err());
    }

    #[test]
    fn constant_ramp_window() {
        // 100 W, 1e-6 J/count: 1e8 counts per second, sampled every second
        let counts: Vec<(i64, u128)> = (0..=10).map(|k| (k * SEC, k as u128 * 100_000_000)).collect();
        let series = wrapped_series(uj(64), &counts);
        let e = integrate_window(&series, 2 * SEC + SEC / 2, 7 * SEC + SEC / 2).unwrap();
        assert!((e.joules() - 500.0).abs() < 1e-9);
        assert_eq!(
            integrate_window(&series, 0, 10 * SEC).unwrap(),
            series_total(&series).unwrap()
        );
    }

    #[test]
    fn single_wrap_matches_unbounded_oracle() {
        let spec = uj(38);
        let start: u128 = (1 << 38) - 3_000_000_000;
        let counts: Vec<(i64, u128)> = (0..=60)
            .map(|k| (k * SEC, start + k as u128 * 100_000_000))
            .collect();
        let series = wrapped_series(spec, &counts);
        let oracle_counts = counts.last().unwrap().1 - counts[0].1;
        let oracle = oracle_counts as f64 * 1e-6;
        assert!((series_total(&series).unwrap().joules() - oracle).abs() < 1e-9);
        let w = integrate_window(&series, 5 * SEC, 45 * SEC).unwrap().joules();
        assert!((w - 4000.0).abs() < 1e-6);
    }

    #[test]
    fn three_wraps_over_two_hours() {
        // 38-bit uJ counter wrapping every 52 min: P = 2^38 uJ / 3120 s
        let spec = uj(38);
        let modulus = spec.wrap_modulus();
        let per_sec = modulus / 3120;
        let start = modulus * 4 / 5;
        let counts: Vec<(i64, u128)> = (0..=7200)
            .step_by(10)
            .map(|s| (s as i64 * SEC, start + s as u128 * per_sec))
            .collect();
        let wraps = (counts.last().unwrap().1 / modulus) - (start / modulus);
        assert_eq!(wraps, 3);
        let series = wrapped_series(spec, &counts);
        let oracle = (counts.last().unwrap().1 - start) as f64 * 1e-6;
        let total = series_total(&series).unwrap().joules();
        assert!((total - oracle).abs() / oracle < 1e-12);
    }

    #[test]
    fn two_samples_total() {
        let series = SampleSeries::new(
            "n0",
            uj(32),
            0,
            vec![RawSample { t_ns: 0, raw: 0 }, RawSample { t_ns: SEC, raw: 1000 }],
        )
        .unwrap();
        assert!((series_total(&series).unwrap().joules() - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn window_errors() {
        let series = wrapped_series(uj(32), &[(SEC, 0), (2 * SEC, 10), (3 * SEC, 20)]);
        assert!(matches!(
            integrate_window(&series, 0, 2 * SEC),
            Err(CounterError::WindowBeforeStart { .. })
        ));
        assert!(matches!(
            integrate_window(&series, 2 * SEC, 4 * SEC),
            Err(CounterError::WindowAfterEnd { .. })
        ));
        assert!(matches!(
            integrate_window(&series, 3 * SEC, 2 * SEC),
            Err(CounterError::InvertedWindow { .. })
        ));
        assert_eq!(integrate_window(&series, 2 * SEC, 2 * SEC).unwrap().joules(), 0.0);
        let single = wrapped_series(uj(32), &[(0, 0)]);
        assert_eq!(series_total(&single), Err(CounterError::DegenerateSeries(1)));
    }

    #[test]
    fn series_rejects_bad_samples() {
        let dup = vec![RawSample { t_ns: 5, raw: 0 }, RawSample { t_ns: 5, raw: 1 }];
        assert_eq!(
            SampleSeries::new("n", uj(32), 0, dup),
            Err(CounterError::NonMonotonic(1))
        );
        let wide = vec![RawSample { t_ns: 0, raw: 1 << 32 }];
        assert!(SampleSeries::new("n", uj(32), 0, wide).is_err());
    }

    #[test]
    fn long_gaps_are_flagged() {
        // 30-bit uJ counter at <= 100 W wraps no sooner than ~10.7 s
        let spec = uj(30);
        let series = wrapped_series(spec, &[(0, 0), (SEC, 10), (9 * SEC, 20), (10 * SEC, 30)])
            .with_power_bound(100.0);
        let horizon = series.wrap_horizon_ns().unwrap();
        assert_eq!(horizon, 10_737_418_240);
        let gaps = series.unsafe_gaps(0, 10 * SEC);
        assert_eq!(
            gaps,
            vec![UnsafeGap::LongGap {
                from_ns: SEC,
                to_ns: 9 * SEC
            }]
        );
        assert!(series.unsafe_gaps(9 * SEC, 10 * SEC).is_empty());
        assert!(series.has_unsafe_gap());
    }

    proptest! {
        #[test]
        fn window_additivity(
            steps in proptest::collection::vec((1i64..5_000_000_000, 0u64..2_000_000_000), 2..40),
            a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0,
        ) {
            let spec = uj(32);
            let mut t = 0i64;
            let mut acc = 0u128;
            let mut counts = vec![(0i64, 0u128)];
            for (dt, dc) in steps {
                t += dt;
                acc += dc as u128;
                counts.push((t, acc));
            }
            let series = wrapped_series(spec, &counts);
            let mut cut = [a, b, c].map(|f| (f * t as f64) as i64);
            cut.sort();
            let whole = integrate_window(&series, cut[0], cut[2]).unwrap().joules();
            let left = integrate_window(&series, cut[0], cut[1]).unwrap().joules();
            let right = integrate_window(&series, cut[1], cut[2]).unwrap().joules();
            prop_assert!(whole >= 0.0 && left >= 0.0 && right >= 0.0);
            prop_assert!((left + right - whole).abs() <= 1e-9 * whole.max(1e-12));
            // enlarging never decreases
            prop_assert!(whole + 1e-12 >= left.max(right));
            let total = series_total(&series).unwrap().joules();
            prop_assert!(total + 1e-9 >= whole);
        }
    }
}
