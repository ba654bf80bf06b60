//! Model diagnosis: the metrics that characterize a model's components
//! and feed the guided operator-selection rules.
//!
//! - historic sub-loss slope per output (OLS over the training trace),
//! - module intervention relevance per (net, output),
//! - input intervention relevance per (input, output),
//! - dependency probes per (component, output),
//! - relative-performance rankings across a population.

mod intervention;
mod probe;
mod slope;

pub use intervention::{
    input_intervention, input_intervention_on, module_intervention, module_intervention_on,
};
pub use probe::dependency_probe;
pub use slope::{classify_slope, loss_slope, SlopeClass};

use crate::graph::{
    ComponentId, FitnessTuple, GraphError, InputId, LossTrace, ModelGraph, NetId, OutputId,
    ProblemData, SourceId, TrainError,
};
use crate::nn::NnError;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

/// Decision thresholds for the rule engine: slopes above `stuck` count as
/// converged, below `steep` as steeply descending; a component is
/// relevant to an output when its degradation ratio reaches `relevance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub stuck: f64,
    pub steep: f64,
    pub relevance: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            stuck: -1e-10,
            steep: -2e-5,
            relevance: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagError {
    #[error("trace of length {len} is too short for window {window}")]
    ShortTrace { len: usize, window: usize },
    #[error("{component} has no directed path to {output}")]
    NotConnected {
        component: ComponentId,
        output: OutputId,
    },
    #[error("unknown net {0}")]
    UnknownNet(NetId),
    #[error("unknown input {0}")]
    UnknownInput(InputId),
    #[error("probe design matrix is singular")]
    SingularProbe,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Per-component metric values for one model at one point of a search.
/// Relevance and probe entries exist exactly for connected pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisReport {
    pub loss_slope: BTreeMap<OutputId, f64>,
    pub relevance: BTreeMap<(NetId, OutputId), f64>,
    pub input_relevance: BTreeMap<(InputId, OutputId), f64>,
    pub probe_score: BTreeMap<(ComponentId, OutputId), f64>,
    /// Step index the report was taken at.
    pub step: u64,
}

impl DiagnosisReport {
    /// One CSV row per (component, output, metric).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,output,metric,value\n");
        for (o, v) in &self.loss_slope {
            let _ = writeln!(s, "{o},{o},loss_slope,{v}");
        }
        for ((n, o), v) in &self.relevance {
            let _ = writeln!(s, "{n},{o},relevance,{v}");
        }
        for ((i, o), v) in &self.input_relevance {
            let _ = writeln!(s, "{i},{o},input_relevance,{v}");
        }
        for ((c, o), v) in &self.probe_score {
            let _ = writeln!(s, "{c},{o},probe,{v}");
        }
        s
    }
}

/// Controls the cost of a diagnosis pass. Rule matching only needs slopes
/// and relevances, so searches disable probes and cap the evaluation rows.
#[derive(Debug, Clone)]
pub struct DiagnoseOptions {
    /// Slope window; defaults to the whole trace (the retraining segment
    /// since the last accepted variation).
    pub window: Option<usize>,
    pub probes: bool,
    /// Evaluation rows used by interventions and probes.
    pub max_rows: usize,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        DiagnoseOptions {
            window: None,
            probes: true,
            max_rows: 256,
        }
    }
}

/// Assemble the full per-component report for a trained model.
/// Deterministic given the seed.
pub fn diagnose(
    model: &ModelGraph,
    trace: &LossTrace,
    data: &ProblemData,
    seed: u64,
    step: u64,
    opts: &DiagnoseOptions,
) -> Result<DiagnosisReport, DiagError> {
    let mut loss_slope_map = BTreeMap::new();
    for (&o, series) in &trace.per_output {
        let window = opts.window.unwrap_or(series.len());
        loss_slope_map.insert(o, loss_slope(series, window)?);
    }

    let rows: Vec<usize> = data
        .eval_idx
        .iter()
        .copied()
        .take(opts.max_rows)
        .collect();
    let reach = model.reachable_outputs();

    let mut relevance = BTreeMap::new();
    for &n in model.nets.keys().collect::<Vec<_>>() {
        let ratios = module_intervention_on(model, n, data, &rows, seed)?;
        let connected = reach.get(&SourceId::Net(n));
        for (o, v) in ratios {
            if connected.is_some_and(|outs| outs.contains(&o)) {
                relevance.insert((n, o), v);
            }
        }
    }

    let mut input_relevance = BTreeMap::new();
    for (&i, node) in &model.inputs {
        let all: Vec<usize> = (0..node.feature_dim).collect();
        let ratios = input_intervention_on(model, i, &all, data, &rows, seed)?;
        let connected = reach.get(&SourceId::Input(i));
        for (o, v) in ratios {
            if connected.is_some_and(|outs| outs.contains(&o)) {
                input_relevance.insert((i, o), v);
            }
        }
    }

    let probe_score = if opts.probes {
        probe::probe_all(model, data, &rows)?
    } else {
        BTreeMap::new()
    };

    Ok(DiagnosisReport {
        loss_slope: loss_slope_map,
        relevance,
        input_relevance,
        probe_score,
        step,
    })
}

/// Per-output orderings of a population by fitness, ascending; ties break
/// by model id.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationRanking {
    pub per_output: BTreeMap<OutputId, Vec<usize>>,
}

impl PopulationRanking {
    /// Rank of a model for one output (0 = best).
    pub fn rank(&self, output: OutputId, model_id: usize) -> Option<usize> {
        self.per_output
            .get(&output)?
            .iter()
            .position(|&m| m == model_id)
    }
}

/// Rank a population of fitness tuples per output.
pub fn relative_performance(population: &[(usize, FitnessTuple)]) -> PopulationRanking {
    let mut per_output: BTreeMap<OutputId, Vec<usize>> = BTreeMap::new();
    if population.is_empty() {
        return PopulationRanking { per_output };
    }
    for o in population[0].1.outputs() {
        let mut ids: Vec<usize> = population.iter().map(|(id, _)| *id).collect();
        ids.sort_by(|&a, &b| {
            let fa = population.iter().find(|(id, _)| *id == a).unwrap().1.get(o);
            let fb = population.iter().find(|(id, _)| *id == b).unwrap().1.get(o);
            fa.partial_cmp(&fb).unwrap().then(a.cmp(&b))
        });
        per_output.insert(o, ids);
    }
    PopulationRanking { per_output }
}
