//! Functional simulator for a prefetcher that learns the backward code
//! slice of each delinquent load, validates it, trims it to a forecast
//! slice and injects it ahead of the load with a tunable lookahead.

pub mod asm;
pub mod baselines;
pub mod config;
pub mod context;
pub mod feedback;
pub mod history;
pub mod injector;
pub mod isa;
pub mod memsys;
pub mod pie;
pub mod semantic;
pub mod sim;
pub mod slicer;
pub mod workloads;

pub use config::{PrefetcherKind, RunConfig};
pub use sim::{compare, dump_slices, run, ControllerSample, Simulation, StatsReport};
