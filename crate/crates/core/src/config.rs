//! Runtime configuration.
//!
//! A [`Config`] can be built in code or parsed from a flat `key = value`
//! text file (one entry per line, `#` starts a comment). Unknown keys are
//! rejected so that typos do not silently fall back to defaults.

use std::str::FromStr;
use std::time::Duration;

use crate::error::{Error, Result};

/// Critical-section granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CsMode {
    /// One lock per process guards every library entry point.
    Global,
    /// One lock per VCI plus a lock for the global request pool.
    Fg,
    /// As `Fg`, with a request cache and a lightweight request per VCI.
    FgCache,
}

/// How the simulated NIC executes one-sided operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RmaMode {
    /// The NIC applies Put/Get/Accumulate at the target without target CPU help.
    Hardware,
    /// The target's progress engine must dispatch RMA messages.
    Software,
}

/// How `injection_cost` is charged on a hardware context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InjectionModel {
    /// Each context owns a device timeline; a message occupies
    /// `injection_cost * DEVICE_NS_PER_UNIT` of it and becomes visible at the
    /// destination when its slot ends. Injecting threads block once they run
    /// more than a short backlog ahead of the device. Host CPU is not consumed,
    /// so independent contexts overlap even on a single core.
    Device,
    /// The injecting thread spins `injection_cost` iterations of arithmetic
    /// while holding the context's injection lock.
    Spin,
}

/// Nanoseconds of device time per injection work unit.
pub const DEVICE_NS_PER_UNIT: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Hints {
    /// The application promises not to use `ANY_SOURCE`; receives that do are rejected.
    pub no_any_source: bool,
    /// Windows default to unordered accumulates.
    pub accumulate_ordering_none_default: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub cs_mode: CsMode,
    /// VCIs (and hardware contexts) per node, including the fallback VCI 0.
    pub vcis: usize,
    pub injection_cost: u64,
    pub injection_model: InjectionModel,
    pub eager_threshold: usize,
    /// Unsuccessful per-VCI attempts before one global progress round.
    /// `None` disables escalation (pure per-VCI progress).
    pub hybrid_threshold: Option<u32>,
    pub rma_mode: RmaMode,
    pub hints: Hints,
    /// Events drained per context poll.
    pub poll_budget: usize,
    pub req_cache_capacity: usize,
    pub req_pool_size: usize,
    /// VCIs a window spreads its traffic over when accumulate ordering is relaxed.
    pub unordered_window_vcis: usize,
    /// Track accumulate targets per window and flag overlapping accumulates
    /// issued through different windows.
    pub check_cross_window_acc: bool,
    /// Blocking calls give up with [`Error::Stuck`] after this long.
    pub watchdog: Option<Duration>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            cs_mode: CsMode::FgCache,
            vcis: 16,
            injection_cost: 200,
            injection_model: InjectionModel::Device,
            eager_threshold: 8 * 1024,
            hybrid_threshold: Some(100),
            rma_mode: RmaMode::Hardware,
            hints: Hints::default(),
            poll_budget: 32,
            req_cache_capacity: 64,
            req_pool_size: 1 << 16,
            unordered_window_vcis: 1,
            check_cross_window_acc: false,
            watchdog: None,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vcis", self.vcis),
            ("poll_budget", self.poll_budget),
            ("req_pool_size", self.req_pool_size),
            ("unordered_window_vcis", self.unordered_window_vcis),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vcis > u16::MAX as usize {
            return Err(Error::Config("vcis too large".into()));
        }
        if self.hybrid_threshold == Some(0) {
            return Err(Error::Config("hybrid_threshold must be positive or inf".into()));
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
            }
        }
        match key {
            "cs_mode" | "cs" => self.cs_mode = value.parse()?,
            "vcis" => self.vcis = num(key, value)?,
            "injection_cost" => self.injection_cost = num(key, value)?,
            "injection_model" => self.injection_model = value.parse()?,
            "eager_threshold" => self.eager_threshold = num(key, value)?,
            "hybrid_threshold" => {
                self.hybrid_threshold = match value {
                    "inf" | "none" | "off" => None,
                    v => Some(num(key, v)?),
                }
            }
            "rma_mode" | "rma" => self.rma_mode = value.parse()?,
            "no_any_source" => self.hints.no_any_source = flag(key, value)?,
            "accumulate_ordering_none" | "accumulate_ordering_none_default" => {
                self.hints.accumulate_ordering_none_default = flag(key, value)?
            }
            "poll_budget" => self.poll_budget = num(key, value)?,
            "req_cache_capacity" => self.req_cache_capacity = num(key, value)?,
            "req_pool_size" => self.req_pool_size = num(key, value)?,
            "unordered_window_vcis" => self.unordered_window_vcis = num(key, value)?,
            "check_cross_window_acc" => self.check_cross_window_acc = flag(key, value)?,
            "watchdog_ms" => {
                self.watchdog = match value {
                    "off" | "none" | "0" => None,
                    v => Some(Duration::from_millis(num(key, v)?)),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

impl FromStr for CsMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "global" => Ok(CsMode::Global),
            "fg" => Ok(CsMode::Fg),
            "fgcache" | "fg+cache" | "fg_cache" => Ok(CsMode::FgCache),
            _ => Err(Error::Config(format!("unknown critical-section mode {s:?}"))),
        }
    }
}

impl FromStr for RmaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hw" | "hardware" => Ok(RmaMode::Hardware),
            "sw" | "software" => Ok(RmaMode::Software),
            _ => Err(Error::Config(format!("unknown rma mode {s:?}"))),
        }
    }
}

impl FromStr for InjectionModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "device" => Ok(InjectionModel::Device),
            "spin" => Ok(InjectionModel::Spin),
            _ => Err(Error::Config(format!("unknown injection model {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_flat_file() {
        let cfg = Config::parse(
            "# run config\ncs_mode = fg\nvcis = 4\nhybrid_threshold = inf\nrma = sw\n\nno_any_source = true # hint\nwatchdog_ms = 250\n",
        )
        .unwrap();
        assert_eq!(cfg.cs_mode, CsMode::Fg);
        assert_eq!(cfg.vcis, 4);
        assert_eq!(cfg.hybrid_threshold, None);
        assert_eq!(cfg.rma_mode, RmaMode::Software);
        assert!(cfg.hints.no_any_source);
        assert_eq!(cfg.watchdog, Some(Duration::from_millis(250)));
        assert_eq!(cfg.eager_threshold, 8192);
    }

    #[test]
    fn rejects_unknown_keys_and_zero_counts() {
        assert!(Config::parse("vci = 3").is_err());
        assert!(Config::parse("vcis = 0").is_err());
        assert!(Config::parse("hybrid_threshold = 0").is_err());
        assert!(Config::parse("vcis").is_err());
    }
}
