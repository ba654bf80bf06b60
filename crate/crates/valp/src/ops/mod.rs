//! Variation operators over model graphs.
//!
//! Every operator is a pure transformation: `apply` never mutates its
//! input and either returns a structurally valid model or a guard error
//! naming the violated constraint. Gentle variants preserve every model
//! output value through weight inheritance (zero-initialized new rows,
//! identity insertions, Net2Wider duplication, 0.5-factor cloning);
//! aggressive variants randomize.
//!
//! The taxonomy table is load-bearing: extenders strictly increase the
//! total weight count and reducers strictly decrease it, and `applicable`
//! rejects the degenerate geometries where that would fail (for example
//! removing a narrow bottleneck layer whose re-bridge would grow the
//! parameter count).

mod crossover;
mod hyper;
mod layers;
mod structure;

pub use crossover::crossover;

use crate::graph::{GraphArc, GraphError, ModelGraph, NetId, OutputId, SinkId, SourceId};
use crate::nn::OptimizerKind;
use crate::rng::{self, tag};
use rand::Rng;
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

/// Operator families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OperatorKind {
    AddLayer,
    RemoveLayer,
    ExtendLayer,
    AddConnection,
    DeleteConnection,
    InsertNetwork,
    DeleteNetwork,
    CloneNetwork,
    ChangeLearningRate,
    ChangeOptimizer,
    ChangeBatchSize,
    Crossover,
}

impl OperatorKind {
    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::AddLayer => "add_layer",
            OperatorKind::RemoveLayer => "remove_layer",
            OperatorKind::ExtendLayer => "extend_layer",
            OperatorKind::AddConnection => "add_connection",
            OperatorKind::DeleteConnection => "delete_connection",
            OperatorKind::InsertNetwork => "insert_network",
            OperatorKind::DeleteNetwork => "delete_network",
            OperatorKind::CloneNetwork => "clone_network",
            OperatorKind::ChangeLearningRate => "change_lr",
            OperatorKind::ChangeOptimizer => "change_sgd",
            OperatorKind::ChangeBatchSize => "change_bs",
            OperatorKind::Crossover => "exclusive_subgraph_crossover",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "add_layer" => OperatorKind::AddLayer,
            "remove_layer" => OperatorKind::RemoveLayer,
            "extend_layer" => OperatorKind::ExtendLayer,
            "add_connection" => OperatorKind::AddConnection,
            "delete_connection" => OperatorKind::DeleteConnection,
            "insert_network" => OperatorKind::InsertNetwork,
            "delete_network" => OperatorKind::DeleteNetwork,
            "clone_network" => OperatorKind::CloneNetwork,
            "change_lr" => OperatorKind::ChangeLearningRate,
            "change_sgd" => OperatorKind::ChangeOptimizer,
            "change_bs" => OperatorKind::ChangeBatchSize,
            "exclusive_subgraph_crossover" => OperatorKind::Crossover,
            _ => return None,
        })
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Gentle operators provably leave every output value unchanged;
/// aggressive ones may not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Gentle,
    Aggressive,
    NotApplicable,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Gentle => "gentle",
            Variant::Aggressive => "aggressive",
            Variant::NotApplicable => "na",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "gentle" => Variant::Gentle,
            "aggressive" => Variant::Aggressive,
            "na" => Variant::NotApplicable,
            _ => return None,
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Effect of an operator on the total weight count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComplexityEffect {
    Reducer,
    Extender,
    Neutral,
}

/// One row of the static operator taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaxonomyEntry {
    pub kind: OperatorKind,
    pub variants: &'static [Variant],
    pub effect: ComplexityEffect,
}

const BOTH: &[Variant] = &[Variant::Gentle, Variant::Aggressive];
const AGGR: &[Variant] = &[Variant::Aggressive];
const GENTLE: &[Variant] = &[Variant::Gentle];

/// The full taxonomy, indexed by kind.
pub fn taxonomy(kind: OperatorKind) -> TaxonomyEntry {
    let (variants, effect) = match kind {
        OperatorKind::AddLayer => (BOTH, ComplexityEffect::Extender),
        OperatorKind::RemoveLayer => (AGGR, ComplexityEffect::Reducer),
        OperatorKind::ExtendLayer => (BOTH, ComplexityEffect::Extender),
        OperatorKind::AddConnection => (BOTH, ComplexityEffect::Extender),
        OperatorKind::DeleteConnection => (AGGR, ComplexityEffect::Reducer),
        OperatorKind::InsertNetwork => (BOTH, ComplexityEffect::Extender),
        OperatorKind::DeleteNetwork => (AGGR, ComplexityEffect::Reducer),
        OperatorKind::CloneNetwork => (BOTH, ComplexityEffect::Extender),
        OperatorKind::ChangeLearningRate
        | OperatorKind::ChangeOptimizer
        | OperatorKind::ChangeBatchSize => (GENTLE, ComplexityEffect::Neutral),
        OperatorKind::Crossover => (AGGR, ComplexityEffect::Neutral),
    };
    TaxonomyEntry {
        kind,
        variants,
        effect,
    }
}

/// What an operator acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Net(NetId),
    /// An existing arc, or the unlinked pair a connection would create.
    Connection { from: SourceId, to: SinkId },
    Output(OutputId),
    Model,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Net(n) => write!(f, "{n}"),
            Target::Connection { from, to } => write!(f, "{from}->{to}"),
            Target::Output(o) => write!(f, "{o}"),
            Target::Model => write!(f, "model"),
        }
    }
}

impl Target {
    pub fn parse(s: &str) -> Option<Self> {
        if s == "model" {
            return Some(Target::Model);
        }
        if let Some((from, to)) = s.split_once("->") {
            return Some(Target::Connection {
                from: SourceId::parse(from)?,
                to: SinkId::parse(to)?,
            });
        }
        if let Some(n) = NetId::parse(s) {
            return Some(Target::Net(n));
        }
        OutputId::parse(s).map(Target::Output)
    }
}

/// Kind-specific parameters. Everything outside the (kind, variant,
/// target) identity; sampled once when the descriptor is created.
#[derive(Debug, Clone, PartialEq)]
pub enum OpParams {
    None,
    AddLayer { position: usize, width: usize },
    RemoveLayer { layer_index: usize },
    ExtendLayer { layer_index: usize, extra: usize },
    /// Hidden width for the aggressive variant; `None` defers to the
    /// apply-time seed.
    InsertNetwork { hidden: Option<usize> },
    ChangeLearningRate { new_lr: f64 },
    ChangeOptimizer { new_kind: OptimizerKind },
    ChangeBatchSize { new_bs: usize },
}

/// Identity of a descriptor for exclusion sets and logs: the params are
/// deliberately left out.
pub type DescriptorKey = (OperatorKind, Variant, Target);

/// A fully specified operator application.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorDescriptor {
    pub kind: OperatorKind,
    pub variant: Variant,
    pub target: Target,
    pub params: OpParams,
}

impl OperatorDescriptor {
    pub fn new(kind: OperatorKind, variant: Variant, target: Target) -> Self {
        OperatorDescriptor {
            kind,
            variant,
            target,
            params: OpParams::None,
        }
    }

    pub fn with_params(mut self, params: OpParams) -> Self {
        self.params = params;
        self
    }

    pub fn key(&self) -> DescriptorKey {
        (self.kind, self.variant, self.target)
    }
}

impl fmt::Display for OperatorDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.kind, self.variant, self.target)
    }
}

/// A violated applicability constraint.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{op}: {reason}")]
pub struct GuardError {
    pub op: String,
    pub reason: String,
}

pub(crate) fn guard(op: &OperatorDescriptor, reason: impl Into<String>) -> GuardError {
    GuardError {
        op: op.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OpError {
    #[error(transparent)]
    Guard(#[from] GuardError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("crossover needs a donor model; call ops::crossover directly")]
    CrossoverNeedsDonor,
}

/// Check whether an operator can be applied without breaking structural
/// correctness or its taxonomy contract. `Ok(())` means `apply` will
/// succeed and produce a valid model.
pub fn check_applicable(model: &ModelGraph, op: &OperatorDescriptor) -> Result<(), GuardError> {
    if !taxonomy(op.kind).variants.contains(&op.variant) {
        return Err(guard(
            op,
            format!("variant {} not defined for {}", op.variant, op.kind),
        ));
    }
    match op.kind {
        OperatorKind::AddLayer => layers::check_add_layer(model, op),
        OperatorKind::RemoveLayer => layers::check_remove_layer(model, op),
        OperatorKind::ExtendLayer => layers::check_extend_layer(model, op),
        OperatorKind::AddConnection => structure::check_add_connection(model, op),
        OperatorKind::DeleteConnection => structure::check_delete_connection(model, op),
        OperatorKind::InsertNetwork => structure::check_insert_network(model, op),
        OperatorKind::DeleteNetwork => structure::check_delete_network(model, op),
        OperatorKind::CloneNetwork => structure::check_clone_network(model, op),
        OperatorKind::ChangeLearningRate
        | OperatorKind::ChangeOptimizer
        | OperatorKind::ChangeBatchSize => hyper::check_hyper(model, op),
        OperatorKind::Crossover => Err(guard(op, "crossover applicability depends on the donor")),
    }
}

/// Boolean form of [`check_applicable`].
pub fn applicable(model: &ModelGraph, op: &OperatorDescriptor) -> bool {
    check_applicable(model, op).is_ok()
}

/// Apply an operator, returning the transformed model. The input model is
/// never mutated. `seed` drives any randomness (fresh weights, sampled
/// widths); a given (model, op, seed) triple is deterministic.
pub fn apply(
    model: &ModelGraph,
    op: &OperatorDescriptor,
    seed: u64,
) -> Result<ModelGraph, OpError> {
    check_applicable(model, op)?;
    let mut rng = rng::stream(seed, &[tag::APPLY]);
    let out = match op.kind {
        OperatorKind::AddLayer => layers::add_layer(model, op, &mut rng),
        OperatorKind::RemoveLayer => layers::remove_layer(model, op, &mut rng),
        OperatorKind::ExtendLayer => layers::extend_layer(model, op, &mut rng),
        OperatorKind::AddConnection => structure::add_connection(model, op, &mut rng),
        OperatorKind::DeleteConnection => structure::delete_connection(model, op),
        OperatorKind::InsertNetwork => structure::insert_network(model, op, &mut rng),
        OperatorKind::DeleteNetwork => structure::delete_network(model, op, &mut rng),
        OperatorKind::CloneNetwork => structure::clone_network(model, op),
        OperatorKind::ChangeLearningRate
        | OperatorKind::ChangeOptimizer
        | OperatorKind::ChangeBatchSize => hyper::apply_hyper(model, op),
        OperatorKind::Crossover => return Err(OpError::CrossoverNeedsDonor),
    }?;
    debug_assert!(
        out.validate().is_empty(),
        "{op} produced an invalid model: {:?}",
        out.validate()
    );
    Ok(out)
}

// ---------------------------------------------------------------------------
// First-layer block bookkeeping.
//
// A net's first-layer weight rows are partitioned into consecutive blocks,
// one per provider in ascending id order. Operators that change a provider
// set go through these helpers so inherited weights stay attached to the
// data stream they were trained on.
// ---------------------------------------------------------------------------

pub(crate) fn provider_blocks(model: &ModelGraph, net: NetId) -> Vec<(SourceId, usize)> {
    model
        .providers_of(SinkId::Net(net))
        .into_iter()
        .map(|p| (p, model.emit_width(p).unwrap_or(0)))
        .collect()
}

/// Row range of `provider`'s block given the ordered block list.
pub(crate) fn block_rows(blocks: &[(SourceId, usize)], provider: SourceId) -> Option<std::ops::Range<usize>> {
    let mut at = 0;
    for &(p, w) in blocks {
        if p == provider {
            return Some(at..at + w);
        }
        at += w;
    }
    None
}

/// Remove a row range from a matrix.
pub(crate) fn remove_matrix_rows(
    m: &crate::nn::Matrix,
    range: std::ops::Range<usize>,
) -> crate::nn::Matrix {
    let keep: Vec<usize> = (0..m.rows()).filter(|r| !range.contains(r)).collect();
    m.gather_rows(&keep)
}

/// Insert rows at a position.
pub(crate) fn insert_matrix_rows(
    m: &crate::nn::Matrix,
    at: usize,
    rows: &crate::nn::Matrix,
) -> crate::nn::Matrix {
    assert_eq!(m.cols(), rows.cols(), "column mismatch on row insert");
    let mut out = crate::nn::Matrix::zeros(m.rows() + rows.rows(), m.cols());
    for r in 0..at {
        out.row_mut(r).copy_from_slice(m.row(r));
    }
    for r in 0..rows.rows() {
        out.row_mut(at + r).copy_from_slice(rows.row(r));
    }
    for r in at..m.rows() {
        out.row_mut(rows.rows() + r).copy_from_slice(m.row(r));
    }
    out
}

// ---------------------------------------------------------------------------
// Candidate enumeration.
// ---------------------------------------------------------------------------

/// Which operator families to enumerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateScope {
    /// The five general-structure operators (connection and network
    /// modifications).
    Structural,
    /// Structural plus layer-level plus hyperparameter operators.
    All,
}

/// Every applicable descriptor for the model under the given scope.
/// Structural descriptors are parameter-free (or defer sampling to apply
/// time), so their enumeration is deterministic; layer/hyper descriptors
/// get their parameters from `rng`.
pub fn enumerate_candidates<R: Rng>(
    model: &ModelGraph,
    scope: CandidateScope,
    rng: &mut R,
) -> Vec<OperatorDescriptor> {
    let mut out = Vec::new();
    let sources: Vec<SourceId> = model
        .inputs
        .keys()
        .map(|&i| SourceId::Input(i))
        .chain(model.nets.keys().map(|&n| SourceId::Net(n)))
        .collect();
    let nets: Vec<NetId> = model.nets.keys().copied().collect();

    // add_connection over unlinked (source, net) pairs.
    for &from in &sources {
        for &to in &nets {
            for &variant in BOTH {
                let d = OperatorDescriptor::new(
                    OperatorKind::AddConnection,
                    variant,
                    Target::Connection {
                        from,
                        to: SinkId::Net(to),
                    },
                );
                if applicable(model, &d) {
                    out.push(d);
                }
            }
        }
    }
    // delete_connection / insert_network over existing arcs.
    for arc in &model.arcs {
        let target = Target::Connection {
            from: arc.from,
            to: arc.to,
        };
        let d = OperatorDescriptor::new(OperatorKind::DeleteConnection, Variant::Aggressive, target);
        if applicable(model, &d) {
            out.push(d);
        }
        for &variant in BOTH {
            let d = OperatorDescriptor::new(OperatorKind::InsertNetwork, variant, target)
                .with_params(OpParams::InsertNetwork { hidden: None });
            if applicable(model, &d) {
                out.push(d);
            }
        }
    }
    // delete_network / clone_network over nets.
    for &n in &nets {
        let d = OperatorDescriptor::new(
            OperatorKind::DeleteNetwork,
            Variant::Aggressive,
            Target::Net(n),
        );
        if applicable(model, &d) {
            out.push(d);
        }
        for &variant in BOTH {
            let d = OperatorDescriptor::new(OperatorKind::CloneNetwork, variant, Target::Net(n));
            if applicable(model, &d) {
                out.push(d);
            }
        }
    }

    if scope == CandidateScope::All {
        for &n in &nets {
            let len = model.nets[&n].layers.len();
            for &variant in BOTH {
                let position = rng.gen_range(0..=len);
                let slot = if position == 0 {
                    model.nets[&n].input_dim()
                } else {
                    model.nets[&n].layers[position - 1].out_dim()
                };
                let width = match variant {
                    Variant::Gentle => slot,
                    _ => {
                        if position == len {
                            model.nets[&n].raw_output_dim()
                        } else {
                            rng.gen_range(1..=16)
                        }
                    }
                };
                let d = OperatorDescriptor::new(OperatorKind::AddLayer, variant, Target::Net(n))
                    .with_params(OpParams::AddLayer { position, width });
                if applicable(model, &d) {
                    out.push(d);
                }
            }
            if len >= 2 {
                let layer_index = rng.gen_range(0..len - 1);
                let d = OperatorDescriptor::new(
                    OperatorKind::RemoveLayer,
                    Variant::Aggressive,
                    Target::Net(n),
                )
                .with_params(OpParams::RemoveLayer { layer_index });
                if applicable(model, &d) {
                    out.push(d);
                }
            }
            for &variant in BOTH {
                let layer_index = rng.gen_range(0..len);
                let extra = rng.gen_range(1..=4);
                let d = OperatorDescriptor::new(OperatorKind::ExtendLayer, variant, Target::Net(n))
                    .with_params(OpParams::ExtendLayer { layer_index, extra });
                if applicable(model, &d) {
                    out.push(d);
                }
            }
        }
        for &o in model.outputs.keys().collect::<Vec<_>>() {
            let lr = model
                .training
                .optimizers
                .get(&o)
                .map_or(1e-3, |s| s.learning_rate);
            let factor = if rng.gen_bool(0.5) { 0.5 } else { 2.0 };
            let d = OperatorDescriptor::new(
                OperatorKind::ChangeLearningRate,
                Variant::Gentle,
                Target::Output(o),
            )
            .with_params(OpParams::ChangeLearningRate { new_lr: lr * factor });
            if applicable(model, &d) {
                out.push(d);
            }
            let current = model.training.optimizers.get(&o).map(|s| s.kind);
            let new_kind = match current {
                Some(OptimizerKind::Sgd) => OptimizerKind::Momentum { beta: 0.9 },
                Some(OptimizerKind::Momentum { .. }) => OptimizerKind::Adam {
                    beta1: 0.9,
                    beta2: 0.999,
                    epsilon: 1e-8,
                },
                _ => OptimizerKind::Sgd,
            };
            let d = OperatorDescriptor::new(
                OperatorKind::ChangeOptimizer,
                Variant::Gentle,
                Target::Output(o),
            )
            .with_params(OpParams::ChangeOptimizer { new_kind });
            if applicable(model, &d) {
                out.push(d);
            }
        }
        let bs = model.training.batch_size;
        let new_bs = if rng.gen_bool(0.5) {
            (bs / 2).max(1)
        } else {
            bs * 2
        };
        let d = OperatorDescriptor::new(
            OperatorKind::ChangeBatchSize,
            Variant::Gentle,
            Target::Model,
        )
        .with_params(OpParams::ChangeBatchSize { new_bs });
        if applicable(model, &d) {
            out.push(d);
        }
    }
    out
}

/// Helper shared by guards: per-consumer first-layer fan-out.
pub(crate) fn first_layer_out(model: &ModelGraph, net: NetId) -> usize {
    model.nets[&net]
        .layers
        .first()
        .map_or(0, |l| l.out_dim())
}

/// Existing-arc lookup used by delete_network's rewiring arithmetic.
pub(crate) fn arc_exists(model: &ModelGraph, from: SourceId, to: SinkId) -> bool {
    model.arcs.contains(&GraphArc { from, to })
}

/// The set of output ids a net feeds directly or transitively.
pub(crate) fn reaches_outputs(model: &ModelGraph, net: NetId) -> BTreeSet<OutputId> {
    model
        .reachable_outputs()
        .remove(&SourceId::Net(net))
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testkit::{minimal_chain, two_output_example};
    use crate::graph::{
        forward_model, serialize, InputId, ModelGraph, NoiseKey, OutputId, ProblemSpec,
        random_model,
    };
    use crate::nn::{glorot_uniform, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn randomize_weights(model: &mut ModelGraph, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for net in model.nets.values_mut() {
            for layer in &mut net.layers {
                layer.weights =
                    glorot_uniform(layer.weights.rows(), layer.weights.cols(), &mut rng);
            }
        }
    }

    fn probe_inputs(model: &ModelGraph, rows: usize, seed: u64) -> BTreeMap<InputId, Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model
            .inputs
            .iter()
            .map(|(&i, node)| {
                let mut m = Matrix::zeros(rows, node.feature_dim);
                for v in m.data_mut() {
                    v.clone_from(&rand::Rng::gen_range(&mut rng, 0.0..1.0));
                }
                (i, m)
            })
            .collect()
    }

    fn max_output_diff(a: &ModelGraph, b: &ModelGraph, rows: usize, seed: u64) -> f64 {
        let inputs = probe_inputs(a, rows, seed);
        let fa = forward_model(a, &inputs, NoiseKey::Eval).unwrap();
        let fb = forward_model(b, &inputs, NoiseKey::Eval).unwrap();
        fa.iter()
            .map(|(o, m)| m.max_abs_diff(&fb[o]))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gentle_clone_halves_both_copies_and_preserves_outputs() {
        let mut m = two_output_example();
        randomize_weights(&mut m, 1);
        // n3 feeds only nets (n1, n5).
        let op = OperatorDescriptor::new(
            OperatorKind::CloneNetwork,
            Variant::Gentle,
            Target::Net(crate::graph::NetId(3)),
        );
        let out = apply(&m, &op, 7).unwrap();
        assert_eq!(out.nets.len(), m.nets.len() + 1);
        assert!(max_output_diff(&m, &out, 16, 2) <= 1e-6);
        // Original and clone both carry the halved final layer.
        let orig = &out.nets[&crate::graph::NetId(3)];
        let clone = out.nets.values().max_by_key(|n| n.id).unwrap();
        assert_eq!(
            orig.layers.last().unwrap().weights.data(),
            clone.layers.last().unwrap().weights.data()
        );
    }

    #[test]
    fn gentle_add_connection_is_invisible_until_trained() {
        let mut m = two_output_example();
        randomize_weights(&mut m, 3);
        // n6 -> n1 is unlinked and acyclic.
        let op = OperatorDescriptor::new(
            OperatorKind::AddConnection,
            Variant::Gentle,
            Target::Connection {
                from: SourceId::Net(crate::graph::NetId(6)),
                to: SinkId::Net(crate::graph::NetId(1)),
            },
        );
        check_applicable(&m, &op).unwrap();
        let out = apply(&m, &op, 7).unwrap();
        assert_eq!(out.arcs.len(), m.arcs.len() + 1);
        assert!(max_output_diff(&m, &out, 16, 4) <= 1e-6);
        // Aggressive rows are generically visible.
        let op = OperatorDescriptor::new(
            OperatorKind::AddConnection,
            Variant::Aggressive,
            Target::Connection {
                from: SourceId::Net(crate::graph::NetId(6)),
                to: SinkId::Net(crate::graph::NetId(1)),
            },
        );
        let out = apply(&m, &op, 7).unwrap();
        assert!(max_output_diff(&m, &out, 16, 4) > 1e-9);
    }

    #[test]
    fn aggressive_delete_network_rewires_providers_to_all_consumers() {
        // i0 -> n0 -> n1 -> n2 -> o0; deleting n1 must wire n0 -> n2.
        let mut m = minimal_chain(3);
        m.nets
            .insert(crate::graph::NetId(1), crate::graph::testkit::linear_net(1, &[3, 3]));
        m.nets
            .insert(crate::graph::NetId(2), crate::graph::testkit::linear_net(2, &[3, 3]));
        m.arcs.clear();
        let n = |k: u32| SourceId::Net(crate::graph::NetId(k));
        let sn = |k: u32| SinkId::Net(crate::graph::NetId(k));
        m.arcs
            .insert(GraphArc::new(SourceId::Input(InputId(0)), sn(0)));
        m.arcs.insert(GraphArc::new(n(0), sn(1)));
        m.arcs.insert(GraphArc::new(n(1), sn(2)));
        m.arcs
            .insert(GraphArc::new(n(2), SinkId::Output(OutputId(0))));
        assert!(m.validate().is_empty());
        let op = OperatorDescriptor::new(
            OperatorKind::DeleteNetwork,
            Variant::Aggressive,
            Target::Net(crate::graph::NetId(1)),
        );
        let out = apply(&m, &op, 5).unwrap();
        assert!(!out.nets.contains_key(&crate::graph::NetId(1)));
        assert!(out.has_arc(n(0), sn(2)));
        assert!(out.validate().is_empty());
    }

    #[test]
    fn guard_examples_from_the_operator_contracts() {
        let m = minimal_chain(3);
        // Sole incoming arc of the output cannot be deleted.
        let op = OperatorDescriptor::new(
            OperatorKind::DeleteConnection,
            Variant::Aggressive,
            Target::Connection {
                from: SourceId::Net(crate::graph::NetId(0)),
                to: SinkId::Output(OutputId(0)),
            },
        );
        assert!(!applicable(&m, &op));
        // Already-linked pair cannot gain a connection.
        let op = OperatorDescriptor::new(
            OperatorKind::AddConnection,
            Variant::Gentle,
            Target::Connection {
                from: SourceId::Input(InputId(0)),
                to: SinkId::Net(crate::graph::NetId(0)),
            },
        );
        assert!(!applicable(&m, &op));
        // Removing the only layer is a different operator.
        let op = OperatorDescriptor::new(
            OperatorKind::RemoveLayer,
            Variant::Aggressive,
            Target::Net(crate::graph::NetId(0)),
        )
        .with_params(OpParams::RemoveLayer { layer_index: 0 });
        assert!(!applicable(&m, &op));
        let reason = check_applicable(&m, &op).unwrap_err();
        assert!(reason.reason.contains("only layer"), "{reason}");
    }

    #[test]
    fn gentle_insert_network_adds_identity_node() {
        let mut m = two_output_example();
        randomize_weights(&mut m, 9);
        let arc = Target::Connection {
            from: SourceId::Net(crate::graph::NetId(3)),
            to: SinkId::Net(crate::graph::NetId(5)),
        };
        let op = OperatorDescriptor::new(OperatorKind::InsertNetwork, Variant::Gentle, arc);
        let out = apply(&m, &op, 13).unwrap();
        assert_eq!(out.nets.len(), m.nets.len() + 1);
        assert_eq!(out.arcs.len(), m.arcs.len() + 1);
        assert!(max_output_diff(&m, &out, 16, 6) <= 1e-6);
        assert!(out.validate().is_empty());
    }

    #[test]
    fn gentle_add_layer_preserves_and_aggressive_changes() {
        let mut m = two_output_example();
        randomize_weights(&mut m, 11);
        let target = Target::Net(crate::graph::NetId(5));
        let gentle = OperatorDescriptor::new(OperatorKind::AddLayer, Variant::Gentle, target)
            .with_params(OpParams::AddLayer {
                position: 1,
                width: m.nets[&crate::graph::NetId(5)].layers[0].out_dim(),
            });
        let out = apply(&m, &gentle, 3).unwrap();
        assert_eq!(out.nets[&crate::graph::NetId(5)].layers.len(), 2);
        assert!(max_output_diff(&m, &out, 16, 8) <= 1e-6);

        let aggressive =
            OperatorDescriptor::new(OperatorKind::AddLayer, Variant::Aggressive, target)
                .with_params(OpParams::AddLayer {
                    position: 0,
                    width: 7,
                });
        let out = apply(&m, &aggressive, 3).unwrap();
        assert!(out.validate().is_empty());
        assert!(max_output_diff(&m, &out, 16, 8) > 1e-9);
    }

    #[test]
    fn gentle_extend_layer_matches_hand_computed_widening() {
        // Toy net: 1 -> 2 -> 1 with identity activations.
        // Layer 0: w = [[1, 2]], b = 0. Layer 1: w = [[3], [4]], b = 0.
        // Widening layer 0 by duplicating both units must halve the
        // outgoing rows: f(x) = 11x before and after.
        let mut m = minimal_chain(1);
        {
            let net = m.nets.get_mut(&crate::graph::NetId(0)).unwrap();
            net.layers = vec![
                crate::nn::DenseLayer::new(
                    Matrix::from_rows(&[vec![1.0, 2.0]]),
                    vec![0.0, 0.0],
                    crate::nn::Activation::Identity,
                ),
                crate::nn::DenseLayer::new(
                    Matrix::from_rows(&[vec![3.0], vec![4.0]]),
                    vec![0.0],
                    crate::nn::Activation::Identity,
                ),
            ];
        }
        assert!(m.validate().is_empty());
        let op = OperatorDescriptor::new(
            OperatorKind::ExtendLayer,
            Variant::Gentle,
            Target::Net(crate::graph::NetId(0)),
        )
        .with_params(OpParams::ExtendLayer {
            layer_index: 0,
            extra: 2,
        });
        // Try seeds until the duplication picks each unit once, matching
        // the hand computation (counts = [2, 2]).
        let mut found = false;
        for seed in 0..64 {
            let out = apply(&m, &op, seed).unwrap();
            let l1 = &out.nets[&crate::graph::NetId(0)].layers[1];
            let rows: Vec<f64> = l1.weights.data().to_vec();
            let mut sorted = rows.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if sorted == vec![1.5, 1.5, 2.0, 2.0] {
                found = true;
            }
            // Whatever the duplication pattern, the function is preserved.
            let x = Matrix::from_rows(&[vec![2.5]]);
            let inputs: BTreeMap<InputId, Matrix> = [(InputId(0), x)].into();
            let y = forward_model(&out, &inputs, NoiseKey::Eval).unwrap();
            assert!((y[&OutputId(0)].get(0, 0) - 27.5).abs() < 1e-9, "11 * 2.5");
        }
        assert!(found, "no seed duplicated both units");
    }

    #[test]
    fn extend_layer_guards_protect_output_widths_and_samplers() {
        let m = minimal_chain(3);
        // n0's final layer feeds the output directly.
        let op = OperatorDescriptor::new(
            OperatorKind::ExtendLayer,
            Variant::Gentle,
            Target::Net(crate::graph::NetId(0)),
        )
        .with_params(OpParams::ExtendLayer {
            layer_index: 0,
            extra: 1,
        });
        let err = check_applicable(&m, &op).unwrap_err();
        assert!(err.reason.contains("output"), "{err}");
    }

    #[test]
    fn clone_guards() {
        let m = minimal_chain(3);
        // n0 feeds the output: cloning would double the output width.
        let op = OperatorDescriptor::new(
            OperatorKind::CloneNetwork,
            Variant::Gentle,
            Target::Net(crate::graph::NetId(0)),
        );
        assert!(!applicable(&m, &op));
    }

    #[test]
    fn hyper_operators_update_config_without_touching_weights() {
        let m = two_output_example();
        let op = OperatorDescriptor::new(
            OperatorKind::ChangeLearningRate,
            Variant::Gentle,
            Target::Output(OutputId(1)),
        )
        .with_params(OpParams::ChangeLearningRate { new_lr: 0.005 });
        let out = apply(&m, &op, 1).unwrap();
        assert_eq!(
            out.training.optimizers[&OutputId(1)].learning_rate,
            0.005
        );
        assert!(max_output_diff(&m, &out, 8, 10) == 0.0);

        // Re-setting the same batch size leaves the model bit-identical.
        let op = OperatorDescriptor::new(
            OperatorKind::ChangeBatchSize,
            Variant::Gentle,
            Target::Model,
        )
        .with_params(OpParams::ChangeBatchSize {
            new_bs: m.training.batch_size,
        });
        let out = apply(&m, &op, 1).unwrap();
        assert_eq!(serialize(&out), serialize(&m));

        // Switching the algorithm drops governed nets' optimizer state.
        let mut seeded = m.clone();
        seeded
            .opt_state
            .insert(crate::graph::NetId(4), Vec::new());
        let op = OperatorDescriptor::new(
            OperatorKind::ChangeOptimizer,
            Variant::Gentle,
            Target::Output(OutputId(2)),
        )
        .with_params(OpParams::ChangeOptimizer {
            new_kind: crate::nn::OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
        });
        let out = apply(&seeded, &op, 1).unwrap();
        assert!(!out.opt_state.contains_key(&crate::graph::NetId(4)));
        // Nonpositive learning rate is rejected.
        let bad = OperatorDescriptor::new(
            OperatorKind::ChangeLearningRate,
            Variant::Gentle,
            Target::Output(OutputId(1)),
        )
        .with_params(OpParams::ChangeLearningRate { new_lr: 0.0 });
        assert!(!applicable(&m, &bad));
    }

    #[test]
    fn apply_never_mutates_its_input() {
        let mut m = two_output_example();
        randomize_weights(&mut m, 17);
        let before = serialize(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for op in enumerate_candidates(&m, CandidateScope::All, &mut rng) {
            let _ = apply(&m, &op, 23).unwrap();
            assert_eq!(serialize(&m), before, "{op} mutated its input");
        }
    }

    #[test]
    fn taxonomy_contract_holds_for_every_applicable_candidate() {
        let p = ProblemSpec::benchmark(3, 3);
        for seed in 0..10 {
            let m = random_model(&p, (3, 6), seed);
            let before = m.total_weight_count();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for op in enumerate_candidates(&m, CandidateScope::All, &mut rng) {
                let out = apply(&m, &op, seed).unwrap();
                let after = out.total_weight_count();
                match taxonomy(op.kind).effect {
                    ComplexityEffect::Extender => {
                        assert!(after > before, "{op}: {before} -> {after}")
                    }
                    ComplexityEffect::Reducer => {
                        assert!(after < before, "{op}: {before} -> {after}")
                    }
                    ComplexityEffect::Neutral => {
                        assert_eq!(after, before, "{op}: {before} -> {after}")
                    }
                }
            }
        }
    }

    #[test]
    fn random_walk_keeps_models_valid() {
        let p = ProblemSpec::benchmark(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..5 {
            let mut m = random_model(&p, (3, 6), seed);
            for step in 0..40u64 {
                let candidates = enumerate_candidates(&m, CandidateScope::All, &mut rng);
                assert!(!candidates.is_empty());
                let pick = rand::Rng::gen_range(&mut rng, 0..candidates.len());
                m = apply(&m, &candidates[pick], seed * 1000 + step).unwrap();
                let v = m.validate();
                assert!(v.is_empty(), "seed {seed} step {step}: {v:?}");
            }
        }
    }

    #[test]
    fn descriptor_display_and_key() {
        let op = OperatorDescriptor::new(
            OperatorKind::CloneNetwork,
            Variant::Gentle,
            Target::Net(crate::graph::NetId(3)),
        );
        assert_eq!(op.to_string(), "clone_network:gentle:n3");
        assert_eq!(
            Target::parse("n3"),
            Some(Target::Net(crate::graph::NetId(3)))
        );
        assert_eq!(
            Target::parse("i0->n2"),
            Some(Target::Connection {
                from: SourceId::Input(InputId(0)),
                to: SinkId::Net(crate::graph::NetId(2)),
            })
        );
    }

    #[test]
    fn self_crossover_preserves_the_grafted_output() {
        let p = ProblemSpec::benchmark(3, 3);
        for seed in [1u64, 4, 9] {
            let m = random_model(&p, (4, 6), seed);
            let donor = m.clone();
            let out = match crossover(&m, &donor, OutputId(1), 5) {
                Ok(out) => out,
                Err(OpError::Guard(g)) => {
                    assert!(g.reason.contains("empty"), "{g}");
                    continue;
                }
                Err(e) => panic!("{e}"),
            };
            assert!(out.validate().is_empty());
            let inputs = probe_inputs(&m, 8, seed);
            let fa = forward_model(&m, &inputs, NoiseKey::Eval).unwrap();
            let fb = forward_model(&out, &inputs, NoiseKey::Eval).unwrap();
            assert!(
                fa[&OutputId(1)].max_abs_diff(&fb[&OutputId(1)]) <= 1e-9,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn crossover_grafts_an_isomorphic_exclusive_subgraph() {
        let p = ProblemSpec::benchmark(3, 3);
        let host = random_model(&p, (4, 6), 2);
        let donor = random_model(&p, (4, 6), 5);
        let donor_ex = donor.exclusive_subgraph(OutputId(0)).unwrap();
        assert!(!donor_ex.nets.is_empty());
        let out = crossover(&host, &donor, OutputId(0), 3).unwrap();
        assert!(out.validate().is_empty());
        let new_ex = out.exclusive_subgraph(OutputId(0)).unwrap();
        assert_eq!(new_ex.nets.len(), donor_ex.nets.len());
        let internal = |m: &ModelGraph, nets: &std::collections::BTreeSet<crate::graph::NetId>| {
            m.arcs
                .iter()
                .filter(|a| {
                    matches!(a.from, SourceId::Net(n) if nets.contains(&n))
                        && matches!(a.to, SinkId::Net(n) if nets.contains(&n))
                })
                .count()
        };
        assert_eq!(
            internal(&out, &new_ex.nets),
            internal(&donor, &donor_ex.nets)
        );
    }

    #[test]
    fn crossover_leaves_disjoint_outputs_untouched() {
        let p = ProblemSpec::benchmark(3, 3);
        let host = random_model(&p, (4, 6), 7);
        let donor = random_model(&p, (4, 6), 8);
        let removed = host.exclusive_subgraph(OutputId(0)).unwrap().nets;
        let out = crossover(&host, &donor, OutputId(0), 11).unwrap();
        let inputs = probe_inputs(&host, 8, 31);
        let fa = forward_model(&host, &inputs, NoiseKey::Eval).unwrap();
        let fb = forward_model(&out, &inputs, NoiseKey::Eval).unwrap();
        for &o in host.outputs.keys() {
            if o == OutputId(0) {
                continue;
            }
            let sub = host.output_subgraph(o).unwrap().nets;
            if sub.is_disjoint(&removed) {
                assert_eq!(
                    fa[&o].data(),
                    fb[&o].data(),
                    "output {o} should be bit-identical"
                );
            }
        }
    }

    #[test]
    fn crossover_with_empty_donor_subgraph_is_inapplicable() {
        let p = ProblemSpec::benchmark(3, 3);
        let host = random_model(&p, (4, 6), 2);
        // Make every donor net shared by wiring all heads to all outputs —
        // simpler: a donor whose o0-exclusive set is emptied by an extra arc
        // from each exclusive net to another output is fiddly to build, so
        // fabricate the guard directly instead.
        let mut donor = random_model(&p, (4, 6), 2);
        let ex = donor.exclusive_subgraph(OutputId(1)).unwrap().nets;
        // Wire every o1-exclusive net into o0's head net, sharing them.
        let o0_head = donor
            .providers_of(SinkId::Output(OutputId(0)))
            .into_iter()
            .find_map(|s| match s {
                SourceId::Net(n) => Some(n),
                _ => None,
            })
            .unwrap();
        for n in ex {
            if n == o0_head || donor.has_arc(SourceId::Net(n), SinkId::Net(o0_head)) {
                continue;
            }
            let op = OperatorDescriptor::new(
                OperatorKind::AddConnection,
                Variant::Gentle,
                Target::Connection {
                    from: SourceId::Net(n),
                    to: SinkId::Net(o0_head),
                },
            );
            if applicable(&donor, &op) {
                donor = apply(&donor, &op, 0).unwrap();
            }
        }
        if donor.exclusive_subgraph(OutputId(1)).unwrap().nets.is_empty() {
            match crossover(&host, &donor, OutputId(1), 0) {
                Err(OpError::Guard(g)) => assert!(g.reason.contains("empty"), "{g}"),
                other => panic!("expected guard error, got {other:?}"),
            }
        }
    }
}
