//! General-structure operators: add_connection, delete_connection,
//! insert_network, delete_network, clone_network.

use super::{
    arc_exists, block_rows, first_layer_out, guard, insert_matrix_rows, provider_blocks,
    remove_matrix_rows, GuardError, OpError, OpParams, OperatorDescriptor, Target, Variant,
};
use crate::graph::{GraphArc, ModelGraph, NetId, SinkId, SourceId, SubNetwork};
use crate::nn::{glorot_uniform, Activation, DenseLayer, Matrix};
use rand::Rng;

fn connection_target(op: &OperatorDescriptor) -> Result<(SourceId, SinkId), GuardError> {
    match op.target {
        Target::Connection { from, to } => Ok((from, to)),
        _ => Err(guard(op, "target must be a connection")),
    }
}

fn net_target(op: &OperatorDescriptor) -> Result<NetId, GuardError> {
    match op.target {
        Target::Net(n) => Ok(n),
        _ => Err(guard(op, "target must be a net")),
    }
}

fn source_exists(model: &ModelGraph, s: SourceId) -> bool {
    match s {
        SourceId::Input(i) => model.inputs.contains_key(&i),
        SourceId::Net(n) => model.nets.contains_key(&n),
    }
}

/// Would adding from -> to close a cycle (`to` already reaches `from`)?
fn creates_cycle(model: &ModelGraph, from: SourceId, to: NetId) -> bool {
    let SourceId::Net(target) = from else {
        return false;
    };
    let mut stack = vec![to];
    let mut seen = std::collections::BTreeSet::new();
    while let Some(n) = stack.pop() {
        if n == target {
            return true;
        }
        if !seen.insert(n) {
            continue;
        }
        for sink in model.consumers_of(SourceId::Net(n)) {
            if let SinkId::Net(m) = sink {
                stack.push(m);
            }
        }
    }
    false
}

/// Insert a provider block into a net's first layer at the position the
/// current arc set dictates. The arc must already be present.
fn insert_provider_block(model: &mut ModelGraph, consumer: NetId, provider: SourceId, rows: Matrix) {
    let blocks = provider_blocks(model, consumer);
    let range = block_rows(&blocks, provider).expect("provider arc present");
    debug_assert_eq!(range.len(), rows.rows());
    let net = model.nets.get_mut(&consumer).expect("consumer exists");
    net.layers[0].weights = insert_matrix_rows(&net.layers[0].weights, range.start, &rows);
    model.opt_state.remove(&consumer);
}

/// Remove a provider's block from a net's first layer. Call while the arc
/// is still present, then drop the arc.
fn remove_provider_block(model: &mut ModelGraph, consumer: NetId, provider: SourceId) -> Matrix {
    let blocks = provider_blocks(model, consumer);
    let range = block_rows(&blocks, provider).expect("provider arc present");
    let net = model.nets.get_mut(&consumer).expect("consumer exists");
    let captured = net.layers[0]
        .weights
        .gather_rows(&range.clone().collect::<Vec<_>>());
    net.layers[0].weights = remove_matrix_rows(&net.layers[0].weights, range);
    model.opt_state.remove(&consumer);
    captured
}

// --- add_connection ---------------------------------------------------------

pub(crate) fn check_add_connection(
    model: &ModelGraph,
    op: &OperatorDescriptor,
) -> Result<(), GuardError> {
    let (from, to) = connection_target(op)?;
    let SinkId::Net(to_net) = to else {
        return Err(guard(
            op,
            "model outputs have a fixed width and cannot gain providers",
        ));
    };
    if !source_exists(model, from) {
        return Err(guard(op, format!("unknown source {from}")));
    }
    if !model.nets.contains_key(&to_net) {
        return Err(guard(op, format!("unknown net {to_net}")));
    }
    if from == SourceId::Net(to_net) {
        return Err(guard(op, "cannot link a net to itself"));
    }
    if model.has_arc(from, to) {
        return Err(guard(op, "components are already linked"));
    }
    if creates_cycle(model, from, to_net) {
        return Err(guard(op, "connection would create a cycle"));
    }
    Ok(())
}

pub(crate) fn add_connection<R: Rng>(
    model: &ModelGraph,
    op: &OperatorDescriptor,
    rng: &mut R,
) -> Result<ModelGraph, OpError> {
    let (from, to) = connection_target(op)?;
    let SinkId::Net(to_net) = to else { unreachable!() };
    let mut out = model.clone();
    let width = out.emit_width(from).expect("guard checked");
    let fan_out = first_layer_out(&out, to_net);
    let rows = match op.variant {
        // Zero rows: the new data stream contributes nothing until trained.
        Variant::Gentle => Matrix::zeros(width, fan_out),
        _ => glorot_uniform(width, fan_out, rng),
    };
    out.arcs.insert(GraphArc::new(from, to));
    insert_provider_block(&mut out, to_net, from, rows);
    Ok(out)
}

// --- delete_connection ------------------------------------------------------

pub(crate) fn check_delete_connection(
    model: &ModelGraph,
    op: &OperatorDescriptor,
) -> Result<(), GuardError> {
    let (from, to) = connection_target(op)?;
    if !model.has_arc(from, to) {
        return Err(guard(op, "no such connection"));
    }
    let SinkId::Net(to_net) = to else {
        return Err(guard(
            op,
            "an output's provider set fixes its width; delete upstream instead",
        ));
    };
    if model.providers_of(SinkId::Net(to_net)).len() < 2 {
        return Err(guard(op, "connection is the consumer's only source of data"));
    }
    if model.consumers_of(from).len() < 2 {
        return Err(guard(op, "connection is the source's only outlet"));
    }
    Ok(())
}

pub(crate) fn delete_connection(
    model: &ModelGraph,
    op: &OperatorDescriptor,
) -> Result<ModelGraph, OpError> {
    let (from, to) = connection_target(op)?;
    let SinkId::Net(to_net) = to else { unreachable!() };
    let mut out = model.clone();
    remove_provider_block(&mut out, to_net, from);
    out.arcs.remove(&GraphArc::new(from, to));
    Ok(out)
}

// --- insert_network ---------------------------------------------------------

pub(crate) fn check_insert_network(
    model: &ModelGraph,
    op: &OperatorDescriptor,
) -> Result<(), GuardError> {
    let (from, to) = connection_target(op)?;
    if !model.has_arc(from, to) {
        return Err(guard(op, "no such connection"));
    }
    if op.variant == Variant::Gentle {
        if let SinkId::Output(o) = to {
            if model.providers_of(SinkId::Output(o)).len() > 1 {
                return Err(guard(
                    op,
                    "gentle insertion into a multi-provider output would reorder its concatenation",
                ));
            }
        }
    }
    Ok(())
}

pub(crate) fn insert_network<R: Rng>(
    model: &ModelGraph,
    op: &OperatorDescriptor,
    rng: &mut R,
) -> Result<ModelGraph, OpError> {
    let (from, to) = connection_target(op)?;
    let mut out = model.clone();
    let width = out.emit_width(from).expect("guard checked");
    let id = out.fresh_net_id();
    let layers = match op.variant {
        // Identity mapping: the new node forwards its input untouched.
        Variant::Gentle => vec![DenseLayer::identity_layer(width, Activation::Identity)],
        _ => {
            let hidden = match op.params {
                OpParams::InsertNetwork { hidden: Some(h) } => h.max(1),
                _ => rng.gen_range(4..=16),
            };
            vec![
                DenseLayer::glorot(width, hidden, Activation::ReLU, rng),
                DenseLayer::glorot(hidden, width, Activation::Identity, rng),
            ]
        }
    };
    out.nets.insert(id, SubNetwork::new(id, layers));

    // The consumer keeps its trained rows: the block moves from `from`'s
    // slot to the new node's slot (widths are equal by construction).
    let captured = match to {
        SinkId::Net(c) => Some(remove_provider_block(&mut out, c, from)),
        SinkId::Output(_) => None,
    };
    out.arcs.remove(&GraphArc::new(from, to));
    out.arcs.insert(GraphArc::new(from, SinkId::Net(id)));
    out.arcs.insert(GraphArc::new(SourceId::Net(id), to));
    if let (SinkId::Net(c), Some(rows)) = (to, captured) {
        insert_provider_block(&mut out, c, SourceId::Net(id), rows);
    }
    Ok(out)
}

// --- delete_network ---------------------------------------------------------

pub(crate) fn check_delete_network(
    model: &ModelGraph,
    op: &OperatorDescriptor,
) -> Result<(), GuardError> {
    let id = net_target(op)?;
    let Some(net) = model.nets.get(&id) else {
        return Err(guard(op, format!("unknown net {id}")));
    };
    if net.sampler.is_some() {
        return Err(guard(op, "sampling components cannot be deleted"));
    }
    let providers = model.providers_of(SinkId::Net(id));
    let consumers = model.consumers_of(SourceId::Net(id));
    if providers.is_empty() || consumers.is_empty() {
        return Err(guard(op, "net is not fully wired"));
    }
    let mut removed = net.weight_count() as i64;
    let mut added = 0i64;
    for &c in &consumers {
        match c {
            SinkId::Output(o) => {
                // The rewired provider set must still sum to the target width.
                let mut width: usize = model
                    .providers_of(SinkId::Output(o))
                    .iter()
                    .filter(|&&p| p != SourceId::Net(id))
                    .filter_map(|&p| model.emit_width(p))
                    .sum();
                for &p in &providers {
                    if p == SourceId::Net(id) {
                        continue;
                    }
                    if matches!(p, SourceId::Input(_)) {
                        return Err(guard(
                            op,
                            "deletion would wire a model input straight to an output",
                        ));
                    }
                    if !arc_exists(model, p, c) {
                        width += model.emit_width(p).unwrap_or(0);
                    }
                }
                let target = model.outputs[&o].target_dim;
                if width != target {
                    return Err(guard(
                        op,
                        format!(
                            "rewired providers supply width {width}, output {o} needs {target}"
                        ),
                    ));
                }
            }
            SinkId::Net(cn) => {
                let fan = first_layer_out(model, cn) as i64;
                removed += net.emit_dim() as i64 * fan;
                for &p in &providers {
                    if !arc_exists(model, p, c) {
                        added += model.emit_width(p).unwrap_or(0) as i64 * fan;
                    }
                }
            }
        }
    }
    if added >= removed {
        return Err(guard(
            op,
            "rewiring would not decrease the weight count (reducer contract)",
        ));
    }
    Ok(())
}

pub(crate) fn delete_network<R: Rng>(
    model: &ModelGraph,
    op: &OperatorDescriptor,
    rng: &mut R,
) -> Result<ModelGraph, OpError> {
    let id = net_target(op)?;
    let mut out = model.clone();
    let providers = out.providers_of(SinkId::Net(id));
    let consumers = out.consumers_of(SourceId::Net(id));

    // Drop the net's block from each internal consumer, then the net and
    // every arc touching it.
    for &c in &consumers {
        if let SinkId::Net(cn) = c {
            remove_provider_block(&mut out, cn, SourceId::Net(id));
        }
    }
    out.arcs
        .retain(|a| a.from != SourceId::Net(id) && a.to != SinkId::Net(id));
    out.nets.remove(&id);
    out.opt_state.remove(&id);

    // Every provider switches to supplying every consumer.
    for &c in &consumers {
        for &p in &providers {
            if out.has_arc(p, c) {
                continue;
            }
            out.arcs.insert(GraphArc::new(p, c));
            if let SinkId::Net(cn) = c {
                let rows = glorot_uniform(
                    out.emit_width(p).expect("provider exists"),
                    first_layer_out(&out, cn),
                    rng,
                );
                insert_provider_block(&mut out, cn, p, rows);
            }
        }
    }
    Ok(out)
}

// --- clone_network ----------------------------------------------------------

pub(crate) fn check_clone_network(
    model: &ModelGraph,
    op: &OperatorDescriptor,
) -> Result<(), GuardError> {
    let id = net_target(op)?;
    let Some(net) = model.nets.get(&id) else {
        return Err(guard(op, format!("unknown net {id}")));
    };
    if net.sampler.is_some() {
        return Err(guard(
            op,
            "cloning a sampling component would duplicate its noise stream",
        ));
    }
    let consumers = model.consumers_of(SourceId::Net(id));
    if consumers
        .iter()
        .any(|c| matches!(c, SinkId::Output(_)))
    {
        return Err(guard(
            op,
            "cloning a net that feeds a model output would change the output width",
        ));
    }
    if op.variant == Variant::Gentle {
        let final_act = net.layers.last().map(|l| l.activation);
        if !final_act.is_some_and(Activation::positively_homogeneous) {
            return Err(guard(
                op,
                "the 0.5-factor morphism needs a positively homogeneous final activation",
            ));
        }
    }
    Ok(())
}

pub(crate) fn clone_network(
    model: &ModelGraph,
    op: &OperatorDescriptor,
) -> Result<ModelGraph, OpError> {
    let id = net_target(op)?;
    let mut out = model.clone();
    let clone_id = out.fresh_net_id();
    let providers = out.providers_of(SinkId::Net(id));
    let consumers = out.consumers_of(SourceId::Net(id));

    // Capture each consumer's trained block for the original before any
    // arcs move; the clone's block is a copy of it.
    let mut consumer_blocks = Vec::new();
    for &c in &consumers {
        if let SinkId::Net(cn) = c {
            let blocks = provider_blocks(&out, cn);
            let range = block_rows(&blocks, SourceId::Net(id)).expect("provider block");
            let rows: Vec<usize> = range.collect();
            let captured = out.nets[&cn].layers[0].weights.gather_rows(&rows);
            consumer_blocks.push((cn, captured));
        }
    }

    let mut cloned = out.nets[&id].clone();
    cloned.id = clone_id;
    if op.variant == Variant::Gentle {
        // Halve both copies' final layers; with a positively homogeneous
        // final activation the two emissions sum back to the original.
        for net in [out.nets.get_mut(&id).expect("net"), &mut cloned] {
            let last = net.layers.last_mut().expect("nonempty");
            last.weights.scale(0.5);
            for b in &mut last.bias {
                *b *= 0.5;
            }
        }
    }
    out.nets.insert(clone_id, cloned);
    out.opt_state.remove(&id);

    for &p in &providers {
        out.arcs.insert(GraphArc::new(p, SinkId::Net(clone_id)));
    }
    for &c in &consumers {
        out.arcs.insert(GraphArc::new(SourceId::Net(clone_id), c));
    }
    for (cn, rows) in consumer_blocks {
        insert_provider_block(&mut out, cn, SourceId::Net(clone_id), rows);
    }
    Ok(out)
}
