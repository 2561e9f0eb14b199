//! The simulation loop: functional core, cache timing, prefetchers and
//! statistics, plus the structured report.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::asm;
use crate::baselines::{next_line, StridePrefetcher};
use crate::config::{ConfigError, PrefetcherKind, RunConfig};
use crate::context::BranchHistory;
use crate::feedback::{Issuer, PrefetchQueue, PrefetchRecord};
use crate::isa::{step, ArchState, Kind, Program, SimFault};
use crate::memsys::{mpki, AccessKind, CacheStats, Hierarchy, HitLevel};
use crate::pie::{PieState, ResetCause};
use crate::semantic::SemanticEngine;
use crate::slicer::slice_shape;
use crate::workloads::{generate, Oracle, Workload, WorkloadError, WorkloadKind};

pub const SCHEMA_VERSION: u32 = 1;
const INJECTION_LOG_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("program file: {0}")]
    Io(String),
    #[error(transparent)]
    Parse(#[from] asm::ParseError),
    #[error("simulation fault at retired op {retired}: {fault}")]
    Fault { retired: u64, fault: SimFault },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadStats {
    pub accesses: u64,
    pub l1_misses: u64,
    pub covered: u64,
    pub late: u64,
}

impl LoadStats {
    pub fn coverage(&self) -> f64 {
        ratio(self.covered, self.covered + self.l1_misses)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IssueStats {
    pub sent: u64,
    pub hits: u64,
    pub useless: u64,
}

impl IssueStats {
    pub fn accuracy(&self) -> f64 {
        ratio(self.hits, self.hits + self.useless)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct InjectionRecord {
    pub pie: usize,
    pub ip: u64,
    pub encounter: Option<u64>,
    pub lookahead: u32,
    pub addr: u64,
    pub oracle_match: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllerSample {
    /// Encounter index of the oracle load.
    pub encounter: u64,
    pub lookahead: u32,
    pub ewma: Option<f64>,
}

#[derive(Clone, Debug, Default)]
struct Measured {
    load_stats: BTreeMap<u64, LoadStats>,
    issue_stats: BTreeMap<u64, IssueStats>,
    hit_depths: Vec<u64>,
    issued: u64,
    dropped_resident: u64,
    oracle_checked: u64,
    oracle_matched: u64,
}

pub struct Simulation {
    pub cfg: RunConfig,
    pub program: Program,
    pub state: ArchState,
    pub mem: Hierarchy,
    pub queue: PrefetchQueue,
    pub engine: Option<SemanticEngine>,
    stride: Option<StridePrefetcher>,
    pub oracle: Option<Oracle>,
    bhr: BranchHistory,
    oracle_encounters: u64,
    measuring: bool,
    start_cycle: u64,
    start_retired: u64,
    m: Measured,
    pub injection_log: Vec<InjectionRecord>,
    controller_trace: Vec<ControllerSample>,
}

/// Loads or generates the configured workload.
pub fn load_workload(cfg: &RunConfig) -> Result<Workload, SimError> {
    if cfg.workload.kind == WorkloadKind::File {
        let path = cfg
            .workload
            .path
            .as_deref()
            .ok_or_else(|| SimError::Io("no path".into()))?;
        let text =
            std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{path}: {e}")))?;
        let img = asm::parse(&text)?;
        return Ok(Workload {
            spec: cfg.workload.clone(),
            program: img.program,
            memory: img.memory,
            oracle: None,
        });
    }
    let mut spec = cfg.workload.clone();
    spec.seed = cfg.seed;
    Ok(generate(&spec)?)
}

impl Simulation {
    pub fn new(cfg: &RunConfig) -> Result<Simulation, SimError> {
        cfg.validate()?;
        let w = load_workload(cfg)?;
        Simulation::with_workload(cfg, w)
    }

    pub fn with_workload(cfg: &RunConfig, w: Workload) -> Result<Simulation, SimError> {
        cfg.validate()?;
        let entry = w
            .program
            .entry()
            .ok_or_else(|| SimError::Io("empty program".into()))?;
        let mut state = ArchState::new(entry);
        state.mem.load_image(&w.memory);
        let engine = (cfg.prefetcher == PrefetcherKind::Semantic)
            .then(|| SemanticEngine::new(cfg.semantic_config()));
        let stride = (cfg.prefetcher == PrefetcherKind::Stride)
            .then(|| StridePrefetcher::new(cfg.stride.table, cfg.stride.degree));
        Ok(Simulation {
            cfg: cfg.clone(),
            program: w.program,
            state,
            mem: Hierarchy::new(cfg.cache).map_err(ConfigError::from)?,
            queue: PrefetchQueue::new(cfg.queue),
            engine,
            stride,
            oracle: w.oracle,
            bhr: BranchHistory::default(),
            oracle_encounters: 0,
            measuring: cfg.warmup == 0,
            start_cycle: 0,
            start_retired: 0,
            m: Measured {
                hit_depths: vec![0; cfg.queue],
                ..Measured::default()
            },
            injection_log: Vec::new(),
            controller_trace: Vec::new(),
        })
    }

    pub fn done(&self) -> bool {
        self.state.halted || self.state.retired >= self.cfg.warmup + self.cfg.measure
    }

    pub fn run(&mut self) -> Result<(), SimError> {
        while !self.done() {
            self.step_one()?;
        }
        Ok(())
    }

    fn issue_prefetch(&mut self, addr: u64, issuer: Issuer, trigger_ip: u64, at: u64) {
        if self.mem.l1_contains(addr) {
            self.m.dropped_resident += 1;
            return;
        }
        self.mem.access(addr, AccessKind::Prefetch, at);
        self.m.issued += 1;
        self.m.issue_stats.entry(trigger_ip).or_default().sent += 1;
        if let Some(e) = self.engine.as_mut() {
            e.on_sent(issuer);
        }
        if let Some(ev) = self
            .queue
            .enqueue(PrefetchRecord::new(addr, issuer, trigger_ip, at))
        {
            self.m.issue_stats.entry(ev.trigger_ip).or_default().useless += 1;
            if let Some(e) = self.engine.as_mut() {
                e.on_useless(ev.issuer);
            }
        }
    }

    /// Retires one op with all prefetcher side activity.
    pub fn step_one(&mut self) -> Result<(), SimError> {
        let retired = self.state.retired;
        let fault = |fault| SimError::Fault { retired, fault };
        let op = *self.program.fetch(self.state.ip).map_err(fault)?;
        let pre_bhr = self.bhr;
        let is_oracle_load = self.oracle.as_ref().is_some_and(|o| o.load_ip == op.ip);

        if op.kind == Kind::Load {
            let now = self.state.cycle;
            let inj = match self.engine.as_mut() {
                Some(e) => e.try_inject(&op, &self.state, pre_bhr, &mut self.mem, now),
                None => None,
            };
            if let Some(inj) = inj {
                self.state.cycle += inj.result.cost_cycles;
                let addr = inj.result.prefetch_addr;
                if !inj.suppressed {
                    let issuer = Issuer::Pie {
                        index: inj.index,
                        ip: inj.key.ip,
                        bhr: inj.key.bhr,
                    };
                    self.issue_prefetch(addr, issuer, op.ip, inj.result.ready_cycle);
                }
                let encounter = is_oracle_load.then_some(self.oracle_encounters);
                let oracle_match = match (&self.oracle, encounter) {
                    (Some(o), Some(i)) => o.check(addr, i as usize, inj.lookahead),
                    _ => None,
                };
                if self.measuring {
                    if let Some(ok) = oracle_match {
                        self.m.oracle_checked += 1;
                        self.m.oracle_matched += ok as u64;
                    }
                }
                if let Some(i) = encounter {
                    let ewma = self
                        .engine
                        .as_ref()
                        .and_then(|e| e.pies.get(inj.index))
                        .and_then(|p| p.hit_depth_ewma);
                    self.controller_trace.push(ControllerSample {
                        encounter: i,
                        lookahead: inj.lookahead,
                        ewma,
                    });
                }
                if self.injection_log.len() < INJECTION_LOG_CAP {
                    self.injection_log.push(InjectionRecord {
                        pie: inj.index,
                        ip: op.ip,
                        encounter,
                        lookahead: inj.lookahead,
                        addr,
                        oracle_match,
                    });
                }
            }
        }

        let ev = step(&mut self.state, &self.program).map_err(fault)?;
        let mut l1_missed = None;
        if let Some(addr) = ev.eff_addr {
            let kind = if op.kind == Kind::Load {
                AccessKind::DemandLoad
            } else {
                AccessKind::DemandStore
            };
            let res = self.mem.access(addr, kind, self.state.cycle);
            if op.kind == Kind::Load {
                self.state.cycle += res.latency;
                let missed = !matches!(res.hit_level, HitLevel::L1 | HitLevel::InFlight);
                l1_missed = Some(missed);
                let s = self.m.load_stats.entry(op.ip).or_default();
                s.accesses += 1;
                s.l1_misses += missed as u64;
                s.covered += res.covered as u64;
                s.late += (res.covered && res.hit_level == HitLevel::InFlight) as u64;
                if let Some(hit) = self.queue.match_demand(addr) {
                    self.m.hit_depths[hit.depth] += 1;
                    self.m.issue_stats.entry(hit.trigger_ip).or_default().hits += 1;
                    let qlen = self.queue.capacity();
                    if let Some(e) = self.engine.as_mut() {
                        e.on_hit(&hit, qlen);
                    }
                }
            }
        }
        if op.kind == Kind::Br {
            self.bhr = self.bhr.update(op.ip, ev.taken.unwrap_or(false));
        }
        if is_oracle_load {
            self.oracle_encounters += 1;
        }

        let now = self.state.cycle;
        if let Some(e) = self.engine.as_mut() {
            e.after_retire(&ev, pre_bhr, l1_missed, now);
            e.timeout_sweep(now);
        }
        if let (Some(addr), Some(missed)) = (ev.eff_addr, l1_missed) {
            match self.cfg.prefetcher {
                PrefetcherKind::Stride => {
                    let targets = self
                        .stride
                        .as_mut()
                        .expect("stride table")
                        .observe_and_issue(op.ip, addr);
                    for t in targets {
                        self.issue_prefetch(t, Issuer::Baseline, op.ip, now);
                    }
                }
                PrefetcherKind::Nextline if missed => {
                    self.issue_prefetch(next_line(addr), Issuer::Baseline, op.ip, now)
                }
                _ => {}
            }
        }

        if !self.measuring && self.state.retired >= self.cfg.warmup {
            self.begin_measurement();
        }
        Ok(())
    }

    fn begin_measurement(&mut self) {
        self.measuring = true;
        self.start_cycle = self.state.cycle;
        self.start_retired = self.state.retired;
        self.mem.reset_stats();
        self.queue.reset_stats();
        self.m = Measured {
            hit_depths: vec![0; self.queue.capacity()],
            ..Measured::default()
        };
        if let Some(e) = self.engine.as_mut() {
            e.reset_counters();
        }
    }

    pub fn load_stats(&self, ip: u64) -> LoadStats {
        self.m.load_stats.get(&ip).copied().unwrap_or_default()
    }

    /// Load statistics summed over the oracle's critical loads.
    pub fn critical_stats(&self) -> LoadStats {
        let ips = self
            .oracle
            .as_ref()
            .map_or(&[][..], |o| &o.critical_ips[..]);
        ips.iter()
            .map(|&ip| self.load_stats(ip))
            .fold(LoadStats::default(), |a, b| LoadStats {
                accesses: a.accesses + b.accesses,
                l1_misses: a.l1_misses + b.l1_misses,
                covered: a.covered + b.covered,
                late: a.late + b.late,
            })
    }

    pub fn issue_stats(&self, ip: u64) -> IssueStats {
        self.m.issue_stats.get(&ip).copied().unwrap_or_default()
    }

    /// Controller state at every injection for the oracle load, warmup included.
    pub fn controller_trace(&self) -> &[ControllerSample] {
        &self.controller_trace
    }

    pub fn measured_retired(&self) -> u64 {
        self.state.retired - self.start_retired
    }

    pub fn measured_cycles(&self) -> u64 {
        self.state.cycle - self.start_cycle
    }

    pub fn report(&self) -> StatsReport {
        let retired = self.measured_retired();
        let cycles = self.measured_cycles();
        let cache = self.mem.stats;
        let critical_ip = self.oracle.as_ref().map(|o| o.load_ip);
        let critical = self.critical_stats();
        let semantic = self
            .engine
            .as_ref()
            .map(|e| SemanticReport::from_engine(e, self.state.cycle))
            .unwrap_or_default();
        let injected = self.engine.as_ref().map_or(0, |e| e.counters.injected_ops);
        StatsReport {
            schema_version: SCHEMA_VERSION,
            workload: self.cfg.workload.kind.name().to_string(),
            prefetcher: self.cfg.prefetcher.name().to_string(),
            seed: self.cfg.seed,
            retired,
            cycles,
            total_retired: self.state.retired,
            total_cycles: self.state.cycle,
            halted: self.state.halted,
            ipc: ratio(retired, cycles),
            cache,
            demand_mpki: if retired == 0 {
                0.0
            } else {
                mpki(&cache, retired)
            },
            coverage: cache.coverage(),
            accuracy: self.queue.accuracy(),
            prefetches_issued: self.m.issued,
            prefetches_dropped_resident: self.m.dropped_resident,
            prefetch_hits: self.queue.hits,
            prefetch_useless: self.queue.useless,
            timeliness_hit_depth: self.m.hit_depths.clone(),
            injections: self.engine.as_ref().map_or(0, |e| e.counters.injections),
            injected_ops: injected,
            injected_op_ratio: ratio(injected, injected + retired),
            critical_load: CriticalReport {
                ip: critical_ip.map(|ip| format!("{ip:#x}")),
                accesses: critical.accesses,
                l1_misses: critical.l1_misses,
                covered: critical.covered,
                late: critical.late,
                coverage: critical.coverage(),
            },
            oracle_checked: self.m.oracle_checked,
            oracle_matched: self.m.oracle_matched,
            per_trigger: self
                .m
                .issue_stats
                .iter()
                .map(|(ip, s)| {
                    (
                        format!("{ip:#x}"),
                        TriggerReport {
                            stats: *s,
                            accuracy: s.accuracy(),
                        },
                    )
                })
                .collect(),
            semantic,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CriticalReport {
    pub ip: Option<String>,
    pub accesses: u64,
    pub l1_misses: u64,
    pub covered: u64,
    pub late: u64,
    pub coverage: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TriggerReport {
    #[serde(flatten)]
    pub stats: IssueStats,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PieRow {
    pub index: usize,
    pub ip: String,
    pub bhr: String,
    pub state: PieState,
    pub lookahead: u32,
    pub sent: u32,
    pub useless: u32,
    pub resets: u32,
    pub encounters: u64,
    pub armed_at_encounter: Option<u64>,
    pub injections: u64,
    pub total_sent: u64,
    pub total_hits: u64,
    pub total_useless: u64,
    pub hit_depth_ewma: f64,
    pub slice: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SemanticReport {
    pub pies: Vec<PieRow>,
    pub reset_causes: BTreeMap<String, u64>,
    pub validation_failures: u64,
    pub disabled: u64,
    pub armed_slices: u64,
    pub armed_events: u64,
    pub slice_size_histogram: BTreeMap<String, u64>,
    pub mean_slice_size: f64,
    pub walks: u64,
    pub walks_deferred: u64,
    pub walk_busy_cycles: u64,
    pub walk_busy_fraction: f64,
    pub detector_denied: u64,
    pub starved_contexts: Vec<String>,
}

impl Default for SemanticReport {
    fn default() -> Self {
        SemanticReport {
            pies: Vec::new(),
            reset_causes: ResetCause::ALL
                .iter()
                .map(|c| (c.name().to_string(), 0))
                .collect(),
            validation_failures: 0,
            disabled: 0,
            armed_slices: 0,
            armed_events: 0,
            slice_size_histogram: BTreeMap::new(),
            mean_slice_size: 0.0,
            walks: 0,
            walks_deferred: 0,
            walk_busy_cycles: 0,
            walk_busy_fraction: 0.0,
            detector_denied: 0,
            starved_contexts: Vec::new(),
        }
    }
}

impl SemanticReport {
    fn from_engine(e: &SemanticEngine, total_cycles: u64) -> SemanticReport {
        let pies: Vec<PieRow> = e
            .pies
            .iter()
            .map(|(i, p)| PieRow {
                index: i,
                ip: format!("{:#x}", p.key.ip),
                bhr: format!("{:#08x}", p.key.bhr),
                state: p.state,
                lookahead: p.lookahead,
                sent: p.sent,
                useless: p.useless,
                resets: p.resets,
                encounters: p.encounters,
                armed_at_encounter: p.armed_at_encounter,
                injections: p.injections,
                total_sent: p.total_sent,
                total_hits: p.total_hits,
                total_useless: p.total_useless,
                hit_depth_ewma: p.hit_depth_ewma.unwrap_or(0.0),
                slice: p.slice.iter().map(|op| op.to_string()).collect(),
            })
            .collect();
        let mut sizes = BTreeMap::new();
        let mut total = 0;
        let armed: Vec<_> = e.pies.armed().collect();
        for (_, p) in &armed {
            *sizes.entry(format!("{:02}", p.slice.len())).or_insert(0) += 1;
            total += p.slice.len();
        }
        SemanticReport {
            pies,
            reset_causes: e
                .pies
                .reset_histogram
                .iter()
                .map(|(c, n)| (c.name().to_string(), *n))
                .collect(),
            validation_failures: e.pies.validation_failures,
            disabled: e.pies.disabled_total,
            armed_slices: armed.len() as u64,
            armed_events: e.counters.armed_events,
            slice_size_histogram: sizes,
            mean_slice_size: ratio(total as u64, armed.len() as u64),
            walks: e.counters.walks,
            walks_deferred: e.counters.walks_deferred,
            walk_busy_cycles: e.walk_busy_cycles,
            walk_busy_fraction: ratio(e.walk_busy_cycles, total_cycles),
            detector_denied: e.detector.denied,
            starved_contexts: e
                .detector
                .starved()
                .iter()
                .map(|(ip, bhr)| format!("{ip:#x}/{bhr:#08x}"))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StatsReport {
    pub schema_version: u32,
    pub workload: String,
    pub prefetcher: String,
    pub seed: u64,
    pub retired: u64,
    pub cycles: u64,
    pub total_retired: u64,
    pub total_cycles: u64,
    pub halted: bool,
    pub ipc: f64,
    pub cache: CacheStats,
    pub demand_mpki: f64,
    pub coverage: f64,
    pub accuracy: f64,
    pub prefetches_issued: u64,
    pub prefetches_dropped_resident: u64,
    pub prefetch_hits: u64,
    pub prefetch_useless: u64,
    pub timeliness_hit_depth: Vec<u64>,
    pub injections: u64,
    pub injected_ops: u64,
    pub injected_op_ratio: f64,
    pub critical_load: CriticalReport,
    pub oracle_checked: u64,
    pub oracle_matched: u64,
    pub per_trigger: BTreeMap<String, TriggerReport>,
    pub semantic: SemanticReport,
}

impl StatsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-PIE table as CSV.
    pub fn pie_csv(&self) -> String {
        let mut out = String::from(
            "index,ip,bhr,state,lookahead,sent,useless,resets,encounters,armed_at_encounter,injections,total_sent,total_hits,total_useless,slice_len\n",
        );
        for p in &self.semantic.pies {
            out.push_str(&format!(
                "{},{},{},{:?},{},{},{},{},{},{},{},{},{},{},{}\n",
                p.index,
                p.ip,
                p.bhr,
                p.state,
                p.lookahead,
                p.sent,
                p.useless,
                p.resets,
                p.encounters,
                p.armed_at_encounter
                    .map_or(String::new(), |e| e.to_string()),
                p.injections,
                p.total_sent,
                p.total_hits,
                p.total_useless,
                p.slice.len()
            ));
        }
        out
    }
}

/// Runs `cfg` to completion.
pub fn run(cfg: &RunConfig) -> Result<StatsReport, SimError> {
    let mut sim = Simulation::new(cfg)?;
    sim.run()?;
    Ok(sim.report())
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub prefetcher: String,
    pub cycles: u64,
    pub demand_mpki: f64,
    pub coverage: f64,
    pub accuracy: f64,
    /// Simulated cycles relative to the first configuration.
    pub cycle_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub workload: String,
    pub rows: Vec<CompareRow>,
}

/// Runs configurations that differ only in prefetcher and tabulates them.
pub fn compare(cfgs: &[RunConfig]) -> Result<CompareReport, SimError> {
    let first = cfgs
        .first()
        .ok_or_else(|| ConfigError::Invalid("compare needs at least two configs".into()))?;
    if cfgs.len() < 2 {
        return Err(ConfigError::Invalid("compare needs at least two configs".into()).into());
    }
    for c in &cfgs[1..] {
        if c.workload != first.workload || c.seed != first.seed {
            return Err(ConfigError::Invalid(
                "compared configs must share workload and seed".into(),
            )
            .into());
        }
    }
    let reports = cfgs.iter().map(run).collect::<Result<Vec<_>, _>>()?;
    let base = reports[0].cycles.max(1) as f64;
    Ok(CompareReport {
        schema_version: SCHEMA_VERSION,
        workload: first.workload.kind.name().to_string(),
        rows: reports
            .iter()
            .map(|r| CompareRow {
                prefetcher: r.prefetcher.clone(),
                cycles: r.cycles,
                demand_mpki: r.demand_mpki,
                coverage: r.coverage,
                accuracy: r.accuracy,
                cycle_ratio: r.cycles as f64 / base,
            })
            .collect(),
    })
}

/// Draft and final slices of every entry that reached a slice.
pub fn dump_slices(sim: &Simulation) -> String {
    let Some(e) = sim.engine.as_ref() else {
        return "no semantic prefetcher configured\n".into();
    };
    let mut out = String::new();
    for (i, p) in e.pies.iter() {
        out.push_str(&format!(
            "pie {i} ip={:#x} bhr={:#08x} state={:?} L={} resets={}\n",
            p.key.ip, p.key.bhr, p.state, p.lookahead, p.resets
        ));
        if let Some(d) = &p.first_draft {
            out.push_str("  draft:\n");
            for op in &d.ops {
                out.push_str(&format!("    {}\n", op.op));
            }
        }
        if p.state == PieState::Armed {
            let shape = slice_shape(&p.slice);
            out.push_str(&format!(
                "  armed ({} ops, load depth {}, alu {}):\n",
                p.slice.len(),
                shape.load_depth,
                shape.alu_ops
            ));
            for op in &p.slice {
                out.push_str(&format!("    {op}\n"));
            }
        }
    }
    out
}
