//! The model graph: typed inputs, dense sub-networks, and typed outputs
//! wired by arcs into a DAG, with structural-validity checking and
//! subgraph queries.
//!
//! Component widths follow one rule everywhere: a consumer reads the
//! concatenation of its providers' emissions, ordered by ascending
//! provider id (inputs before nets). An internal net's first-layer input
//! dimension, and an output's target dimension, must equal the sum of
//! their providers' emission widths.
//!
//! Sampling components are ordinary sub-networks flagged with a latent
//! dimension `k`: their layer stack produces `(mu ‖ log sigma^2)` of raw
//! width `2k` and they emit a reparameterized sample `z = mu + sigma·eps`
//! of width `k` downstream.

mod forward;
mod random;
mod serial;
mod train;

pub use forward::{forward_model, forward_model_traced, ForwardTrace, NoiseKey};
pub use random::{random_model, GeneratorOptions, ProblemSpec};
pub use serial::{deserialize, serialize, ParseError};
pub use train::{evaluate, mmd2, train, FitnessTuple, LossTrace, ProblemData, TrainError};

use crate::nn::{Activation, DenseLayer, LossKind, NnError, OptimizerSpec, ParamState};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use thiserror::Error;

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}{}", $prefix, self.0)
            }
        }

        impl $name {
            pub fn parse(s: &str) -> Option<Self> {
                s.strip_prefix($prefix)?.parse().ok().map($name)
            }
        }
    };
}

id_type!(InputId, "i");
id_type!(NetId, "n");
id_type!(OutputId, "o");

/// Arc source: a model input or an internal net. The derived ordering
/// (inputs before nets, then by index) is the provider concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SourceId {
    Input(InputId),
    Net(NetId),
}

/// Arc target: an internal net or a model output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SinkId {
    Net(NetId),
    Output(OutputId),
}

/// Any component of the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ComponentId {
    Input(InputId),
    Net(NetId),
    Output(OutputId),
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceId::Input(i) => write!(f, "{i}"),
            SourceId::Net(n) => write!(f, "{n}"),
        }
    }
}

impl fmt::Display for SinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SinkId::Net(n) => write!(f, "{n}"),
            SinkId::Output(o) => write!(f, "{o}"),
        }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentId::Input(i) => write!(f, "{i}"),
            ComponentId::Net(n) => write!(f, "{n}"),
            ComponentId::Output(o) => write!(f, "{o}"),
        }
    }
}

impl SourceId {
    pub fn parse(s: &str) -> Option<Self> {
        InputId::parse(s)
            .map(SourceId::Input)
            .or_else(|| NetId::parse(s).map(SourceId::Net))
    }
}

impl SinkId {
    pub fn parse(s: &str) -> Option<Self> {
        NetId::parse(s)
            .map(SinkId::Net)
            .or_else(|| OutputId::parse(s).map(SinkId::Output))
    }
}

impl ComponentId {
    pub fn parse(s: &str) -> Option<Self> {
        InputId::parse(s)
            .map(ComponentId::Input)
            .or_else(|| NetId::parse(s).map(ComponentId::Net))
            .or_else(|| OutputId::parse(s).map(ComponentId::Output))
    }
}

/// A directed connection between two components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GraphArc {
    pub from: SourceId,
    pub to: SinkId,
}

impl GraphArc {
    pub fn new(from: SourceId, to: SinkId) -> Self {
        GraphArc { from, to }
    }
}

impl fmt::Display for GraphArc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

/// A source node: where data enters the model.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNode {
    pub id: InputId,
    pub feature_dim: usize,
    pub role: String,
}

/// What a model output predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    Classification,
    Regression,
    Sampling,
}

impl OutputKind {
    pub fn name(self) -> &'static str {
        match self {
            OutputKind::Classification => "classification",
            OutputKind::Regression => "regression",
            OutputKind::Sampling => "sampling",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "classification" => OutputKind::Classification,
            "regression" => OutputKind::Regression,
            "sampling" => OutputKind::Sampling,
            _ => return None,
        })
    }

    /// Terminal activation an output of this kind must carry.
    pub fn required_terminal(self) -> Activation {
        match self {
            OutputKind::Classification => Activation::Softmax,
            OutputKind::Regression | OutputKind::Sampling => Activation::Identity,
        }
    }

    pub fn default_loss(self) -> LossKind {
        match self {
            OutputKind::Classification => LossKind::CrossEntropy,
            OutputKind::Regression => LossKind::MeanSquaredError,
            OutputKind::Sampling => LossKind::ReconstructionPlusKL,
        }
    }
}

/// A sink node: one model prediction. The terminal activation is applied
/// to the concatenation of the providers' emissions.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputNode {
    pub id: OutputId,
    pub target_dim: usize,
    pub kind: OutputKind,
    pub terminal: Activation,
}

impl OutputNode {
    pub fn new(id: OutputId, target_dim: usize, kind: OutputKind) -> Self {
        OutputNode {
            id,
            target_dim,
            kind,
            terminal: kind.required_terminal(),
        }
    }
}

/// An internal node: a dense multilayer perceptron. `sampler = Some(k)`
/// marks a sampling component with latent width `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubNetwork {
    pub id: NetId,
    pub layers: Vec<DenseLayer>,
    pub sampler: Option<usize>,
}

impl SubNetwork {
    pub fn new(id: NetId, layers: Vec<DenseLayer>) -> Self {
        SubNetwork {
            id,
            layers,
            sampler: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::in_dim)
    }

    /// Width produced by the layer stack (for samplers this is 2k).
    pub fn raw_output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::out_dim)
    }

    /// Width seen by consumers (k for samplers).
    pub fn emit_dim(&self) -> usize {
        match self.sampler {
            Some(k) => k,
            None => self.raw_output_dim(),
        }
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }
}

/// How the model trains: batch size, one optimizer per output, and the
/// seed that anchors the model's data-order and noise streams.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub optimizers: BTreeMap<OutputId, OptimizerSpec>,
    pub seed: u64,
}

/// Per-net optimizer state (one pair of states per layer: weights, bias).
/// In-memory only; serialization drops it and deserialization starts fresh.
pub type NetOptState = Vec<(ParamState, ParamState)>;

/// The model: a DAG of inputs, sub-networks, and outputs, with one loss
/// per output.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub inputs: BTreeMap<InputId, InputNode>,
    pub nets: BTreeMap<NetId, SubNetwork>,
    pub outputs: BTreeMap<OutputId, OutputNode>,
    pub arcs: BTreeSet<GraphArc>,
    pub losses: BTreeMap<OutputId, LossKind>,
    pub training: TrainingConfig,
    pub(crate) opt_state: BTreeMap<NetId, NetOptState>,
}

/// One structural-correctness failure. Violations are data, not errors:
/// `validate` reports all of them and each names the offending component.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("cycle through {net}")]
    Cycle { net: NetId },
    #[error("model has no outputs")]
    NoOutputs,
    #[error("arc {arc} references a missing component")]
    DanglingArc { arc: GraphArc },
    #[error("output {output} has no loss function")]
    MissingLoss { output: OutputId },
    #[error("output {output} has no optimizer")]
    MissingOptimizer { output: OutputId },
    #[error("output {output}: {reason}")]
    BadOptimizer { output: OutputId, reason: String },
    #[error("output {output} receives no data")]
    OutputNoProvider { output: OutputId },
    #[error("net {net} receives no data")]
    NetNoProvider { net: NetId },
    #[error("net {net} sends data nowhere")]
    NetNoConsumer { net: NetId },
    #[error("input {input} sends data nowhere")]
    InputNoConsumer { input: InputId },
    #[error("{component} expects input width {expected}, providers supply {got}")]
    WidthMismatch {
        component: ComponentId,
        expected: usize,
        got: usize,
    },
    #[error("net {net} has no layers")]
    NoLayers { net: NetId },
    #[error("net {net} layer {layer} input width breaks the chain")]
    LayerChainBroken { net: NetId, layer: usize },
    #[error("net {net} layer {layer} uses softmax inside a sub-network")]
    SoftmaxInsideNet { net: NetId, layer: usize },
    #[error("sampler {net} raw output width must be even and positive")]
    SamplerBadWidth { net: NetId },
    #[error("output {output} terminal activation does not match its kind")]
    TerminalMismatch { output: OutputId },
    #[error("output {output} pairs cross-entropy with a non-softmax terminal")]
    LossPairing { output: OutputId },
    #[error("output {output} uses a sampling loss but has no sampler in its subgraph")]
    SamplerMissing { output: OutputId },
    #[error("batch size must be at least 1")]
    BatchSizeZero,
    #[error("net {net} has non-finite weights")]
    NonFiniteWeights { net: NetId },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("unknown output {0}")]
    UnknownOutput(OutputId),
    #[error("unknown net {0}")]
    UnknownNet(NetId),
    #[error("unknown input {0}")]
    UnknownInput(InputId),
    #[error("graph contains a cycle")]
    Cycle,
    #[error("model is structurally invalid: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Nn(#[from] NnError),
}

fn format_violations(vs: &[Violation]) -> String {
    vs.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// All components and arcs with a directed path to one output.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Subgraph {
    pub inputs: BTreeSet<InputId>,
    pub nets: BTreeSet<NetId>,
    pub arcs: BTreeSet<GraphArc>,
}

impl ModelGraph {
    /// Providers of a sink in concatenation order (ascending id, inputs
    /// before nets).
    pub fn providers_of(&self, sink: SinkId) -> Vec<SourceId> {
        self.arcs
            .iter()
            .filter(|a| a.to == sink)
            .map(|a| a.from)
            .collect()
    }

    pub fn consumers_of(&self, source: SourceId) -> Vec<SinkId> {
        self.arcs
            .iter()
            .filter(|a| a.from == source)
            .map(|a| a.to)
            .collect()
    }

    pub fn has_arc(&self, from: SourceId, to: SinkId) -> bool {
        self.arcs.contains(&GraphArc { from, to })
    }

    /// Width a source emits downstream; None if the id is unknown.
    pub fn emit_width(&self, source: SourceId) -> Option<usize> {
        match source {
            SourceId::Input(i) => self.inputs.get(&i).map(|n| n.feature_dim),
            SourceId::Net(n) => self.nets.get(&n).map(SubNetwork::emit_dim),
        }
    }

    /// Sum of provider emission widths for a sink.
    pub fn provider_width(&self, sink: SinkId) -> usize {
        self.providers_of(sink)
            .iter()
            .filter_map(|&s| self.emit_width(s))
            .sum()
    }

    pub fn total_weight_count(&self) -> usize {
        self.nets.values().map(SubNetwork::weight_count).sum()
    }

    pub fn fresh_net_id(&self) -> NetId {
        NetId(self.nets.keys().map(|n| n.0 + 1).max().unwrap_or(0))
    }

    /// Sampling components in ascending id order. A sampler's position in
    /// this list selects its reparameterization-noise stream.
    pub fn samplers(&self) -> Vec<NetId> {
        self.nets
            .values()
            .filter(|n| n.sampler.is_some())
            .map(|n| n.id)
            .collect()
    }

    /// Internal nodes in topological evaluation order (deterministic:
    /// among ready nodes, smallest id first).
    pub fn topo_order(&self) -> Result<Vec<NetId>, GraphError> {
        let mut indegree: BTreeMap<NetId, usize> =
            self.nets.keys().map(|&n| (n, 0)).collect();
        for arc in &self.arcs {
            if let (SourceId::Net(_), SinkId::Net(to)) = (arc.from, arc.to) {
                if let Some(d) = indegree.get_mut(&to) {
                    *d += 1;
                }
            }
        }
        let mut ready: BTreeSet<NetId> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&n, _)| n)
            .collect();
        let mut order = Vec::with_capacity(self.nets.len());
        while let Some(&n) = ready.iter().next() {
            ready.remove(&n);
            order.push(n);
            for sink in self.consumers_of(SourceId::Net(n)) {
                if let SinkId::Net(m) = sink {
                    if let Some(d) = indegree.get_mut(&m) {
                        *d -= 1;
                        if *d == 0 {
                            ready.insert(m);
                        }
                    }
                }
            }
        }
        if order.len() != self.nets.len() {
            return Err(GraphError::Cycle);
        }
        Ok(order)
    }

    /// Kahn order of the acyclic prefix; shorter than `nets.len()` when a
    /// cycle exists.
    fn partial_topo_order(&self) -> Vec<NetId> {
        match self.topo_order() {
            Ok(order) => order,
            Err(_) => {
                let mut indegree: BTreeMap<NetId, usize> =
                    self.nets.keys().map(|&n| (n, 0)).collect();
                for arc in &self.arcs {
                    if let (SourceId::Net(_), SinkId::Net(to)) = (arc.from, arc.to) {
                        if let Some(d) = indegree.get_mut(&to) {
                            *d += 1;
                        }
                    }
                }
                let mut ready: BTreeSet<NetId> = indegree
                    .iter()
                    .filter(|(_, &d)| d == 0)
                    .map(|(&n, _)| n)
                    .collect();
                let mut order = Vec::new();
                while let Some(&n) = ready.iter().next() {
                    ready.remove(&n);
                    order.push(n);
                    for sink in self.consumers_of(SourceId::Net(n)) {
                        if let SinkId::Net(m) = sink {
                            if let Some(d) = indegree.get_mut(&m) {
                                *d -= 1;
                                if *d == 0 {
                                    ready.insert(m);
                                }
                            }
                        }
                    }
                }
                order
            }
        }
    }

    /// For every source component, the set of outputs it can reach.
    pub fn reachable_outputs(&self) -> BTreeMap<SourceId, BTreeSet<OutputId>> {
        let mut map: BTreeMap<SourceId, BTreeSet<OutputId>> = BTreeMap::new();
        for (&i, _) in &self.inputs {
            map.insert(SourceId::Input(i), BTreeSet::new());
        }
        for (&n, _) in &self.nets {
            map.insert(SourceId::Net(n), BTreeSet::new());
        }
        for (&o, _) in &self.outputs {
            // Reverse BFS from each output.
            let mut queue: VecDeque<SourceId> =
                self.providers_of(SinkId::Output(o)).into();
            let mut seen: BTreeSet<SourceId> = queue.iter().copied().collect();
            while let Some(src) = queue.pop_front() {
                if let Some(set) = map.get_mut(&src) {
                    set.insert(o);
                }
                if let SourceId::Net(n) = src {
                    for p in self.providers_of(SinkId::Net(n)) {
                        if seen.insert(p) {
                            queue.push_back(p);
                        }
                    }
                }
            }
        }
        map
    }

    /// All components that, upon modification, can alter the prediction at
    /// `output`: everything with a directed path to it, plus those arcs.
    pub fn output_subgraph(&self, output: OutputId) -> Result<Subgraph, GraphError> {
        if !self.outputs.contains_key(&output) {
            return Err(GraphError::UnknownOutput(output));
        }
        let reach = self.reachable_outputs();
        let mut sub = Subgraph::default();
        for (&src, outs) in &reach {
            if outs.contains(&output) {
                match src {
                    SourceId::Input(i) => {
                        sub.inputs.insert(i);
                    }
                    SourceId::Net(n) => {
                        sub.nets.insert(n);
                    }
                }
            }
        }
        for arc in &self.arcs {
            let arc_reaches = match arc.to {
                SinkId::Output(o) => o == output,
                SinkId::Net(n) => reach
                    .get(&SourceId::Net(n))
                    .is_some_and(|outs| outs.contains(&output)),
            };
            if arc_reaches {
                sub.arcs.insert(*arc);
            }
        }
        Ok(sub)
    }

    /// The output subgraph minus every component that also reaches another
    /// output.
    pub fn exclusive_subgraph(&self, output: OutputId) -> Result<Subgraph, GraphError> {
        if !self.outputs.contains_key(&output) {
            return Err(GraphError::UnknownOutput(output));
        }
        let reach = self.reachable_outputs();
        let only_this = |src: SourceId| -> bool {
            reach
                .get(&src)
                .is_some_and(|outs| outs.len() == 1 && outs.contains(&output))
        };
        let mut sub = Subgraph::default();
        for (&src, _) in &reach {
            if only_this(src) {
                match src {
                    SourceId::Input(i) => {
                        sub.inputs.insert(i);
                    }
                    SourceId::Net(n) => {
                        sub.nets.insert(n);
                    }
                }
            }
        }
        for arc in &self.arcs {
            let exclusive = match arc.to {
                SinkId::Output(o) => o == output,
                SinkId::Net(n) => only_this(SourceId::Net(n)),
            };
            if exclusive {
                sub.arcs.insert(*arc);
            }
        }
        Ok(sub)
    }

    /// The output whose optimizer governs this net's updates: the lowest-id
    /// output the net reaches. Shared nets receive summed gradients from
    /// all outputs but step under one spec.
    pub fn governing_output(&self, net: NetId) -> Option<OutputId> {
        self.reachable_outputs()
            .get(&SourceId::Net(net))
            .and_then(|outs| outs.iter().next().copied())
    }

    /// Structural-correctness check. Empty iff the model is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();

        if self.outputs.is_empty() {
            v.push(Violation::NoOutputs);
        }
        if self.training.batch_size == 0 {
            v.push(Violation::BatchSizeZero);
        }

        for arc in &self.arcs {
            let from_ok = match arc.from {
                SourceId::Input(i) => self.inputs.contains_key(&i),
                SourceId::Net(n) => self.nets.contains_key(&n),
            };
            let to_ok = match arc.to {
                SinkId::Net(n) => self.nets.contains_key(&n),
                SinkId::Output(o) => self.outputs.contains_key(&o),
            };
            if !from_ok || !to_ok {
                v.push(Violation::DanglingArc { arc: *arc });
            }
        }

        // Acyclicity. Name one net left un-ordered by Kahn's algorithm.
        if let Err(GraphError::Cycle) = self.topo_order() {
            let ordered: BTreeSet<NetId> = self.partial_topo_order().into_iter().collect();
            let net = self
                .nets
                .keys()
                .find(|n| !ordered.contains(n))
                .copied()
                .unwrap_or(NetId(0));
            v.push(Violation::Cycle { net });
        }

        // Degrees.
        for (&o, _) in &self.outputs {
            if self.providers_of(SinkId::Output(o)).is_empty() {
                v.push(Violation::OutputNoProvider { output: o });
            }
        }
        for (&n, _) in &self.nets {
            if self.providers_of(SinkId::Net(n)).is_empty() {
                v.push(Violation::NetNoProvider { net: n });
            }
            if self.consumers_of(SourceId::Net(n)).is_empty() {
                v.push(Violation::NetNoConsumer { net: n });
            }
        }
        for (&i, _) in &self.inputs {
            if self.consumers_of(SourceId::Input(i)).is_empty() {
                v.push(Violation::InputNoConsumer { input: i });
            }
        }

        // Layer stacks.
        for (&id, net) in &self.nets {
            if net.layers.is_empty() {
                v.push(Violation::NoLayers { net: id });
                continue;
            }
            for (li, pair) in net.layers.windows(2).enumerate() {
                if pair[0].out_dim() != pair[1].in_dim() {
                    v.push(Violation::LayerChainBroken {
                        net: id,
                        layer: li + 1,
                    });
                }
            }
            for (li, layer) in net.layers.iter().enumerate() {
                if layer.activation == Activation::Softmax {
                    v.push(Violation::SoftmaxInsideNet { net: id, layer: li });
                }
            }
            if net.sampler.is_some() {
                let raw = net.raw_output_dim();
                let k = net.sampler.unwrap();
                if raw == 0 || raw % 2 != 0 || raw / 2 != k {
                    v.push(Violation::SamplerBadWidth { net: id });
                }
            }
            if net
                .layers
                .iter()
                .any(|l| !l.weights.is_finite() || l.bias.iter().any(|b| !b.is_finite()))
            {
                v.push(Violation::NonFiniteWeights { net: id });
            }
            let expected = net.input_dim();
            let got = self.provider_width(SinkId::Net(id));
            if expected != got && !self.providers_of(SinkId::Net(id)).is_empty() {
                v.push(Violation::WidthMismatch {
                    component: ComponentId::Net(id),
                    expected,
                    got,
                });
            }
        }

        // Outputs: widths, terminals, losses, optimizers.
        for (&o, out) in &self.outputs {
            let got = self.provider_width(SinkId::Output(o));
            if got != out.target_dim && !self.providers_of(SinkId::Output(o)).is_empty() {
                v.push(Violation::WidthMismatch {
                    component: ComponentId::Output(o),
                    expected: out.target_dim,
                    got,
                });
            }
            if out.terminal != out.kind.required_terminal() {
                v.push(Violation::TerminalMismatch { output: o });
            }
            match self.losses.get(&o) {
                None => v.push(Violation::MissingLoss { output: o }),
                Some(LossKind::CrossEntropy) if out.terminal != Activation::Softmax => {
                    v.push(Violation::LossPairing { output: o });
                }
                Some(LossKind::ReconstructionPlusKL) => {
                    if let Ok(sub) = self.output_subgraph(o) {
                        let has_sampler = sub
                            .nets
                            .iter()
                            .any(|n| self.nets[n].sampler.is_some());
                        if !has_sampler {
                            v.push(Violation::SamplerMissing { output: o });
                        }
                    }
                }
                _ => {}
            }
            match self.training.optimizers.get(&o) {
                None => v.push(Violation::MissingOptimizer { output: o }),
                Some(spec) => {
                    if let Err(e) = spec.check() {
                        v.push(Violation::BadOptimizer {
                            output: o,
                            reason: e.to_string(),
                        });
                    }
                }
            }
        }

        v
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }
}
