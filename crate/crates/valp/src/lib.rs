//! Guided neural-architecture search for heterogeneous multi-network models.
//!
//! A model here (a *VALP*) is a directed acyclic graph wiring typed model
//! inputs through dense sub-networks into typed model outputs
//! (classification, regression, sampling), trained jointly by summing one
//! loss per output. The crate provides:
//!
//! - [`nn`] — the dense-network engine: matrices, layers, losses, optimizers.
//! - [`graph`] — the model itself: validity checks, subgraph queries,
//!   DAG-wide training/evaluation, checkpoint serialization, random models.
//! - [`ops`] — the variation operators (gentle/aggressive, reducer/extender)
//!   with structural guards, weight inheritance, and subgraph crossover.
//! - [`diag`] — model diagnosis: loss slopes, interventions, linear probes,
//!   population rankings.
//! - [`search`] — the stochastic hill climber with random and rule-guided
//!   operator selection.
//! - [`pareto`] — Pareto fronts over run histories and the gentle-vs-
//!   aggressive G statistic, plus SVG boxplot/barplot rendering.
//! - [`data`] — IDX image ingestion, synthetic benchmarks, target derivation.
//! - [`runner`] — experiment orchestration (operator study, paired searches,
//!   analysis) behind a plain-text config format.
//!
//! Every major capability has a runnable example under `examples/`:
//!
//! ```bash
//! cargo run --release -p valp --example train_minimal
//! cargo run --release -p valp --example morphing_operators
//! cargo run --release -p valp --example diagnose_model
//! cargo run --release -p valp --example guided_vs_random
//! cargo run --release -p valp --example pareto_report
//! cargo run --release -p valp --example operator_study
//! cargo run --release -p valp --example checkpoint_roundtrip
//! ```
//!
//! The `valp` binary exposes the same machinery as a small CLI
//! (`study`, `search`, `analyze`, `validate-model`).

pub mod data;
pub mod diag;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod pareto;
pub mod plot;
pub mod rng;
pub mod runner;
pub mod search;
