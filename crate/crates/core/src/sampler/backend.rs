// SPDX-License-Identifier: Apache-2.0

//! Counter sources: the Linux powercap tree, the raw MSR device, and a
//! synthetic mock driven by a piecewise-constant power profile.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counter::{CounterSpec, RaplDomain, RawSample};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("permission denied reading {0} (RAPL counters need elevated privileges)")]
    PermissionDenied(PathBuf),
    #[error("counter device {0} is absent")]
    DeviceAbsent(PathBuf),
    #[error("cannot parse {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("domain {0} is not provided by this backend")]
    UnsupportedDomain(RaplDomain),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn map_io(path: &Path, err: io::Error) -> BackendError {
    match err.kind() {
        io::ErrorKind::PermissionDenied => BackendError::PermissionDenied(path.to_path_buf()),
        io::ErrorKind::NotFound => BackendError::DeviceAbsent(path.to_path_buf()),
        _ => BackendError::Io {
            path: path.to_path_buf(),
            source: err,
        },
    }
}

/// Piecewise-constant power for one mock counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockProfile {
    /// `(duration_s, power_watts)` in order. Power past the last segment
    /// stays at the last segment's value.
    pub segments: Vec<(f64, f64)>,
    pub spec: CounterSpec,
    /// Zero starts the counter at 0; any other seed picks a deterministic
    /// arbitrary starting value, as a real register has after boot.
    #[serde(default)]
    pub seed: u64,
}

impl MockProfile {
    pub fn new(segments: Vec<(f64, f64)>, spec: CounterSpec, seed: u64) -> Result<Self, BackendError> {
        let profile = MockProfile { segments, spec, seed };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        self.spec
            .validate()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        if self.segments.is_empty() {
            return Err(BackendError::Config("mock profile has no segments".into()));
        }
        for &(d, w) in &self.segments {
            if !(d.is_finite() && d > 0.0) || !(w.is_finite() && w >= 0.0) {
                return Err(BackendError::Config(format!(
                    "bad mock segment ({d} s, {w} W)"
                )));
            }
        }
        Ok(())
    }

    pub fn total_duration_s(&self) -> f64 {
        self.segments.iter().map(|s| s.0).sum()
    }

    /// Exact energy consumed in `[0, t_s]`.
    pub fn cumulative_joules(&self, t_s: f64) -> f64 {
        if t_s <= 0.0 {
            return 0.0;
        }
        let mut elapsed = 0.0;
        let mut energy = 0.0;
        for &(d, w) in &self.segments {
            if t_s <= elapsed + d {
                return energy + w * (t_s - elapsed);
            }
            elapsed += d;
            energy += w * d;
        }
        let tail_w = self.segments.last().map(|s| s.1).unwrap_or(0.0);
        energy + tail_w * (t_s - elapsed)
    }

    pub fn initial_raw(&self) -> u64 {
        if self.seed == 0 {
            return 0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.gen_range(0..=self.spec.max_raw())
    }

    /// Register value `elapsed_ns` after the profile started. The register
    /// only advances on its update period.
    pub fn raw_at(&self, elapsed_ns: i64) -> u64 {
        let period_ns = ((self.spec.update_period_s * 1e9).round() as i64).max(1);
        let tick_ns = elapsed_ns.max(0) / period_ns * period_ns;
        let joules = self.cumulative_joules(tick_ns as f64 / 1e9);
        // small slack absorbs representation error of the unit
        let counts = (joules / self.spec.energy_unit_joules + 1e-6).floor() as u128;
        ((u128::from(self.initial_raw()) + counts) % self.spec.wrap_modulus()) as u64
    }
}

/// Mock counters for several domains sharing one time origin.
#[derive(Debug, Clone)]
pub struct MockBackend {
    origin_ns: i64,
    profiles: BTreeMap<RaplDomain, MockProfile>,
}

impl MockBackend {
    pub fn new(origin_ns: i64, profiles: impl IntoIterator<Item = MockProfile>) -> Result<Self, BackendError> {
        let mut map = BTreeMap::new();
        for p in profiles {
            p.validate()?;
            map.insert(p.spec.domain, p);
        }
        Ok(MockBackend {
            origin_ns,
            profiles: map,
        })
    }

    pub fn profile(&self, domain: RaplDomain) -> Option<&MockProfile> {
        self.profiles.get(&domain)
    }

    pub fn origin_ns(&self) -> i64 {
        self.origin_ns
    }
}

/// Per-domain zone directories of `/sys/class/powercap`.
#[derive(Debug)]
pub struct PowercapBackend {
    zones: BTreeMap<RaplDomain, PowercapZone>,
}

#[derive(Debug)]
struct PowercapZone {
    energy_path: PathBuf,
    max_range_uj: u64,
    last_uj: Option<u64>,
    // unwrapped microjoules since the first read, reported mod 2^64
    extended: u64,
}

fn read_u64(path: &Path) -> Result<u64, BackendError> {
    let text = fs::read_to_string(path).map_err(|e| map_io(path, e))?;
    text.trim().parse::<u64>().map_err(|e| BackendError::Parse {
        path: path.to_path_buf(),
        detail: format!("`{}`: {e}", text.trim()),
    })
}

fn zone_domain(name: &str) -> Option<RaplDomain> {
    match name {
        n if n.starts_with("package") => Some(RaplDomain::Package),
        "core" => Some(RaplDomain::Core),
        "uncore" => Some(RaplDomain::Graphics),
        "dram" => Some(RaplDomain::Dram),
        "psys" => Some(RaplDomain::Psys),
        _ => None,
    }
}

impl PowercapBackend {
    /// Opens explicit zone directories. `max_energy_range_uj` is read once
    /// here and used as the wrap point for the zone from then on.
    pub fn open(zones: &BTreeMap<RaplDomain, PathBuf>) -> Result<Self, BackendError> {
        let mut opened = BTreeMap::new();
        for (&domain, dir) in zones {
            let energy_path = dir.join("energy_uj");
            let max_range_uj = read_u64(&dir.join("max_energy_range_uj"))?;
            // probe once so that permission problems surface at startup
            read_u64(&energy_path)?;
            opened.insert(
                domain,
                PowercapZone {
                    energy_path,
                    max_range_uj,
                    last_uj: None,
                    extended: 0,
                },
            );
        }
        Ok(PowercapBackend { zones: opened })
    }

    /// Finds zones under `root` (normally `/sys/class/powercap`) by their
    /// `name` file. Only the first zone of each domain is kept.
    // TODO: sum package-N zones on multi-socket nodes instead of keeping socket 0.
    pub fn discover(root: &Path) -> Result<Self, BackendError> {
        let mut zones: BTreeMap<RaplDomain, PathBuf> = BTreeMap::new();
        let mut dirs = vec![root.to_path_buf()];
        let mut depth = 0;
        while !dirs.is_empty() && depth < 3 {
            let mut next = Vec::new();
            for dir in dirs {
                let Ok(entries) = fs::read_dir(&dir) else { continue };
                let mut paths: Vec<PathBuf> = entries.flatten().map(|e| e.path()).collect();
                paths.sort();
                for path in paths {
                    let is_zone = path
                        .file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("intel-rapl:"));
                    if !is_zone || !path.is_dir() {
                        continue;
                    }
                    if let Ok(name) = fs::read_to_string(path.join("name")) {
                        if let Some(domain) = zone_domain(name.trim()) {
                            zones.entry(domain).or_insert_with(|| path.clone());
                        }
                    }
                    next.push(path);
                }
            }
            dirs = next;
            depth += 1;
        }
        if zones.is_empty() {
            return Err(BackendError::DeviceAbsent(root.to_path_buf()));
        }
        Self::open(&zones)
    }

    pub fn domains(&self) -> Vec<RaplDomain> {
        self.zones.keys().copied().collect()
    }

    fn read(&mut self, domain: RaplDomain) -> Result<u64, BackendError> {
        let zone = self
            .zones
            .get_mut(&domain)
            .ok_or(BackendError::UnsupportedDomain(domain))?;
        let now = read_u64(&zone.energy_path)?;
        if let Some(last) = zone.last_uj {
            let delta = if now >= last {
                now - last
            } else {
                // wrapped at the advertised range
                (zone.max_range_uj - last) + now + 1
            };
            zone.extended = zone.extended.wrapping_add(delta);
        } else {
            zone.extended = now;
        }
        zone.last_uj = Some(now);
        Ok(zone.extended)
    }
}

/// MSR addresses of the RAPL energy status registers.
pub fn msr_address(domain: RaplDomain) -> u64 {
    match domain {
        RaplDomain::Package => 0x611,
        RaplDomain::Dram => 0x619,
        RaplDomain::Core => 0x639,
        RaplDomain::Graphics => 0x641,
        RaplDomain::Psys => 0x64d,
    }
}

pub const MSR_RAPL_POWER_UNIT: u64 = 0x606;

/// `/dev/cpu/<n>/msr` reader.
#[derive(Debug)]
pub struct MsrBackend {
    path: PathBuf,
    file: fs::File,
}

impl MsrBackend {
    pub fn open(dev_root: &Path, cpu: u32) -> Result<Self, BackendError> {
        let path = dev_root.join(cpu.to_string()).join("msr");
        let file = fs::File::open(&path).map_err(|e| map_io(&path, e))?;
        Ok(MsrBackend { path, file })
    }

    pub fn read_register(&self, address: u64) -> Result<u64, BackendError> {
        let mut buf = [0u8; 8];
        self.file
            .read_exact_at(&mut buf, address)
            .map_err(|e| map_io(&self.path, e))?;
        Ok(u64::from_le_bytes(buf))
    }

    /// Joules per count from the energy-status-unit field (bits 12:8).
    pub fn energy_unit_joules(&self) -> Result<f64, BackendError> {
        let units = self.read_register(MSR_RAPL_POWER_UNIT)?;
        let esu = ((units >> 8) & 0x1f) as i32;
        Ok(0.5f64.powi(esu))
    }
}

/// A configured counter source.
#[derive(Debug)]
pub enum Backend {
    PowercapFs(PowercapBackend),
    MsrDevice(MsrBackend),
    Mock(MockBackend),
}

impl Backend {
    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::PowercapFs(_) => BackendKind::PowercapFs,
            Backend::MsrDevice(_) => BackendKind::MsrDevice,
            Backend::Mock(_) => BackendKind::Mock,
        }
    }

    /// Checks that `spec` is something this backend can produce.
    pub fn check_spec(&self, spec: &CounterSpec) -> Result<(), BackendError> {
        match self {
            Backend::PowercapFs(_) => {
                if spec.energy_unit_joules != 1e-6 || spec.bit_width != 64 {
                    return Err(BackendError::Config(format!(
                        "powercap domain {} must be declared with unit 1e-6 J and bit_width 64",
                        spec.domain
                    )));
                }
            }
            Backend::MsrDevice(_) => {}
            Backend::Mock(m) => match m.profile(spec.domain) {
                Some(p) if p.spec == *spec => {}
                Some(_) => {
                    return Err(BackendError::Config(format!(
                        "mock profile for {} disagrees with the declared counter spec",
                        spec.domain
                    )))
                }
                None => return Err(BackendError::UnsupportedDomain(spec.domain)),
            },
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    PowercapFs,
    MsrDevice,
    Mock,
}

/// Reads one domain's counter at `now_ns`.
///
/// Powercap values are microjoules extended past the zone's wrap point, so
/// the domain must be declared as a 64-bit microjoule counter. MSR values
/// are returned unscaled and masked to the declared width.
pub fn read_backend(
    backend: &mut Backend,
    domain: &CounterSpec,
    now_ns: i64,
) -> Result<RawSample, BackendError> {
    let raw = match backend {
        Backend::PowercapFs(p) => p.read(domain.domain)?,
        Backend::MsrDevice(m) => {
            let value = m.read_register(msr_address(domain.domain))?;
            value & domain.max_raw()
        }
        Backend::Mock(m) => {
            let profile = m
                .profiles
                .get(&domain.domain)
                .ok_or(BackendError::UnsupportedDomain(domain.domain))?;
            profile.raw_at(now_ns - m.origin_ns)
        }
    };
    Ok(RawSample { t_ns: now_ns, raw })
}
