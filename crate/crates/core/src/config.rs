//! Run configuration and its flat `key = value` text format.
//!
//! ```text
//! # comment
//! workload.kind = bfs_csr
//! prefetcher = semantic
//! cache.l1.size = 32768
//! semantic.context_bits = 24
//! ```
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown keys are errors.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::feedback::LookaheadPolicy;
use crate::memsys::{CacheConfig, CacheConfigError};
use crate::semantic::SemanticConfig;
use crate::workloads::{WorkloadKind, WorkloadSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefetcherKind {
    None,
    Nextline,
    Stride,
    Semantic,
}

impl PrefetcherKind {
    pub const ALL: [PrefetcherKind; 4] = [
        PrefetcherKind::None,
        PrefetcherKind::Nextline,
        PrefetcherKind::Stride,
        PrefetcherKind::Semantic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrefetcherKind::None => "none",
            PrefetcherKind::Nextline => "nextline",
            PrefetcherKind::Stride => "stride",
            PrefetcherKind::Semantic => "semantic",
        }
    }
}

impl fmt::Display for PrefetcherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrefetcherKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PrefetcherKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown prefetcher `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StrideConfig {
    pub table: usize,
    pub degree: u32,
}

impl Default for StrideConfig {
    fn default() -> Self {
        StrideConfig {
            table: 256,
            degree: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub workload: WorkloadSpec,
    pub prefetcher: PrefetcherKind,
    /// Retired ops before statistics start.
    pub warmup: u64,
    /// Retired ops measured after warmup; the run also ends when the program halts.
    pub measure: u64,
    pub seed: u64,
    pub cache: CacheConfig,
    pub semantic: SemanticConfig,
    pub queue: usize,
    pub stride: StrideConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            workload: WorkloadSpec::default(),
            prefetcher: PrefetcherKind::Semantic,
            warmup: 40_000,
            measure: 5_000_000,
            seed: 1,
            cache: CacheConfig::default(),
            semantic: SemanticConfig::default(),
            queue: crate::feedback::DEFAULT_QUEUE,
            stride: StrideConfig::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Cache(#[from] CacheConfigError),
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse::<T>()
        .map_err(|_| format!("bad value `{value}` for `{key}`"))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let s = &mut self.semantic;
        match key.trim() {
            "workload.kind" => {
                let kind: WorkloadKind = v.parse()?;
                let keep = self.workload.clone();
                self.workload = WorkloadSpec {
                    seed: keep.seed,
                    path: keep.path,
                    ..WorkloadSpec::new(kind)
                };
            }
            "workload.size" => self.workload.size = parse_value(key, v)?,
            "workload.degree" => self.workload.degree = parse_value(key, v)?,
            "workload.stride" => self.workload.stride = parse_value(key, v)?,
            "workload.inner" => self.workload.inner = parse_value(key, v)?,
            "workload.path" => self.workload.path = Some(v.to_string()),
            "prefetcher" => self.prefetcher = v.parse()?,
            "sim.warmup" => self.warmup = parse_value(key, v)?,
            "sim.measure" => self.measure = parse_value(key, v)?,
            "sim.seed" => {
                self.seed = parse_value(key, v)?;
                self.workload.seed = self.seed;
            }
            "cache.l1.size" => self.cache.l1.size = parse_value(key, v)?,
            "cache.l1.ways" => self.cache.l1.ways = parse_value(key, v)?,
            "cache.l1.latency" => self.cache.l1.latency = parse_value(key, v)?,
            "cache.l2.size" => self.cache.l2.size = parse_value(key, v)?,
            "cache.l2.ways" => self.cache.l2.ways = parse_value(key, v)?,
            "cache.l2.latency" => self.cache.l2.latency = parse_value(key, v)?,
            "cache.l3.size" => self.cache.l3.size = parse_value(key, v)?,
            "cache.l3.ways" => self.cache.l3.ways = parse_value(key, v)?,
            "cache.l3.latency" => self.cache.l3.latency = parse_value(key, v)?,
            "cache.mem.latency" => self.cache.mem_latency = parse_value(key, v)?,
            "semantic.context_bits" => s.context_bits = parse_value(key, v)?,
            "semantic.walkers" => s.walkers = parse_value(key, v)?,
            "semantic.validation_rounds" => s.pie.validation_rounds = parse_value(key, v)?,
            "semantic.loop_unroll" => s.walk.loop_unroll = parse_value(key, v)?,
            "semantic.history" => s.history = parse_value(key, v)?,
            "semantic.pie_entries" => s.pie.entries = parse_value(key, v)?,
            "semantic.usefulness" => s.pie.usefulness = parse_value(key, v)?,
            "semantic.stale_resets" => s.pie.stale_resets = parse_value(key, v)?,
            "semantic.timeout" => s.pie.timeout = parse_value(key, v)?,
            "semantic.mode" => s.mode = v.parse()?,
            "semantic.hotness_window" => s.hotness_window = parse_value(key, v)?,
            "feedback.queue" => self.queue = parse_value(key, v)?,
            "feedback.policy" => {
                let p: LookaheadPolicy = v.parse()?;
                s.controller.policy = p;
                s.pie.initial_lookahead = p.initial();
            }
            "feedback.alpha" => s.controller.alpha = parse_value(key, v)?,
            "stride.degree" => self.stride.degree = parse_value(key, v)?,
            "stride.table" => self.stride.table = parse_value(key, v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| ConfigError::Parse {
                line,
                msg: "expected `key = value`".into(),
            })?;
            cfg.set(k, v)
                .map_err(|msg| ConfigError::Parse { line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.measure == 0 {
            return bad("sim.measure must be positive");
        }
        self.cache.validate()?;
        let s = &self.semantic;
        if s.walkers == 0 {
            return bad("semantic.walkers must be positive");
        }
        if s.context_bits > 24 {
            return bad("semantic.context_bits must be at most 24");
        }
        if !(1..=7).contains(&s.pie.validation_rounds) {
            return bad("semantic.validation_rounds must be in 1..=7");
        }
        if s.walk.loop_unroll == 0 {
            return bad("semantic.loop_unroll must be positive");
        }
        if s.history == 0 {
            return bad("semantic.history must be positive");
        }
        if s.pie.entries == 0 || !s.pie.entries.is_power_of_two() {
            return bad("semantic.pie_entries must be a power of two");
        }
        if !(0.0..=1.0).contains(&s.pie.usefulness) {
            return bad("semantic.usefulness must be in [0, 1]");
        }
        if !(s.controller.alpha > 0.0 && s.controller.alpha <= 1.0) {
            return bad("feedback.alpha must be in (0, 1]");
        }
        if self.queue < 8 {
            return bad("feedback.queue must be at least 8");
        }
        if self.stride.table == 0 {
            return bad("stride.table must be positive");
        }
        if self.workload.kind == WorkloadKind::File && self.workload.path.is_none() {
            return bad("workload.kind = file needs workload.path");
        }
        Ok(())
    }

    /// The semantic configuration with the queue length folded into the controller.
    pub fn semantic_config(&self) -> SemanticConfig {
        let mut s = self.semantic;
        s.controller.queue = self.queue;
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_runs_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn keys_apply() {
        let c = RunConfig::parse(
            "# bfs\nworkload.kind = bfs_csr\nprefetcher=stride\ncache.l1.size = 65536\nsemantic.context_bits=0\nfeedback.policy = fixed_32\nsim.seed = 9\n",
        )
        .unwrap();
        assert_eq!(c.workload.kind, WorkloadKind::BfsCsr);
        assert_eq!(c.workload.size, 65_536);
        assert_eq!(c.workload.seed, 9);
        assert_eq!(c.prefetcher, PrefetcherKind::Stride);
        assert_eq!(c.cache.l1.size, 65536);
        assert_eq!(c.semantic.context_bits, 0);
        assert_eq!(c.semantic.pie.initial_lookahead, 32);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            RunConfig::parse("prefetcher = semantic\n\nbogus.key = 1\n").unwrap_err(),
            ConfigError::Parse {
                line: 3,
                msg: "unknown key `bogus.key`".into()
            }
        );
        assert!(matches!(
            RunConfig::parse("sim.warmup = many\n"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("just words\n"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("sim.measure = 0\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            RunConfig::parse("cache.l1.size = 1000\n"),
            Err(ConfigError::Cache(_))
        ));
    }
}
