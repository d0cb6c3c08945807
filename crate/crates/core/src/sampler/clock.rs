// SPDX-License-Identifier: Apache-2.0

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

/// Source of monotonic and wall time for the sampler and the watcher.
pub trait Clock {
    /// Monotonic nanoseconds. Survives process restarts on the same host.
    fn mono_ns(&self) -> i64;
    /// Nanoseconds since the Unix epoch.
    fn wall_ns(&self) -> i64;
    fn sleep_until_mono(&self, target_ns: i64);

    /// Wall time at monotonic zero.
    fn epoch_wall_ns(&self) -> i64 {
        self.wall_ns() - self.mono_ns()
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

pub fn wall_now_ns() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as i64)
        .unwrap_or(0)
}

impl Clock for SystemClock {
    fn mono_ns(&self) -> i64 {
        let mut ts = libc::timespec {
            tv_sec: 0,
            tv_nsec: 0,
        };
        // SAFETY: `ts` is a valid, writable timespec.
        let rc = unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
        assert_eq!(rc, 0, "CLOCK_MONOTONIC unavailable");
        ts.tv_sec as i64 * 1_000_000_000 + ts.tv_nsec as i64
    }

    fn wall_ns(&self) -> i64 {
        wall_now_ns()
    }

    fn sleep_until_mono(&self, target_ns: i64) {
        let now = self.mono_ns();
        if target_ns > now {
            std::thread::sleep(Duration::from_nanos((target_ns - now) as u64));
        }
    }
}

/// Simulated clock; sleeping advances time instantly.
#[derive(Debug, Clone)]
pub struct ManualClock {
    now: Arc<AtomicI64>,
    epoch_wall_ns: i64,
}

impl ManualClock {
    pub fn new(epoch_wall_ns: i64) -> Self {
        ManualClock {
            now: Arc::new(AtomicI64::new(0)),
            epoch_wall_ns,
        }
    }

    pub fn advance(&self, ns: i64) {
        self.now.fetch_add(ns, Ordering::SeqCst);
    }

    pub fn set(&self, ns: i64) {
        self.now.store(ns, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn mono_ns(&self) -> i64 {
        self.now.load(Ordering::SeqCst)
    }

    fn wall_ns(&self) -> i64 {
        self.epoch_wall_ns + self.mono_ns()
    }

    fn sleep_until_mono(&self, target_ns: i64) {
        self.now.fetch_max(target_ns, Ordering::SeqCst);
    }

    fn epoch_wall_ns(&self) -> i64 {
        self.epoch_wall_ns
    }
}
