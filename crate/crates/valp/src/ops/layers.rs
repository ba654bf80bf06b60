//! Layer-level operators: add_layer, remove_layer, extend_layer.

use super::{block_rows, guard, GuardError, OpError, OpParams, OperatorDescriptor, Target, Variant};
use crate::graph::{ModelGraph, NetId, SinkId, SourceId};
use crate::nn::{glorot_uniform, Activation, DenseLayer, Matrix};
use rand::Rng;

fn net_target(op: &OperatorDescriptor) -> Result<NetId, GuardError> {
    match op.target {
        Target::Net(n) => Ok(n),
        _ => Err(guard(op, "target must be a net")),
    }
}

fn add_layer_params(op: &OperatorDescriptor) -> Result<(usize, usize), GuardError> {
    match op.params {
        OpParams::AddLayer { position, width } => Ok((position, width)),
        _ => Err(guard(op, "missing add_layer parameters")),
    }
}

/// Width of the data stream flowing at insertion `position`.
fn slot_width(model: &ModelGraph, net: NetId, position: usize) -> usize {
    let n = &model.nets[&net];
    if position == 0 {
        n.input_dim()
    } else {
        n.layers[position - 1].out_dim()
    }
}

pub(crate) fn check_add_layer(
    model: &ModelGraph,
    op: &OperatorDescriptor,
) -> Result<(), GuardError> {
    let net = net_target(op)?;
    let Some(n) = model.nets.get(&net) else {
        return Err(guard(op, format!("unknown net {net}")));
    };
    let (position, width) = add_layer_params(op)?;
    let len = n.layers.len();
    if position > len {
        return Err(guard(op, format!("position {position} out of range 0..={len}")));
    }
    if width == 0 {
        return Err(guard(op, "width must be positive"));
    }
    let slot = slot_width(model, net, position);
    match op.variant {
        Variant::Gentle => {
            if width != slot {
                return Err(guard(
                    op,
                    format!("gentle insertion must match the slot width {slot}"),
                ));
            }
        }
        _ => {
            if position == len && width != n.raw_output_dim() {
                return Err(guard(
                    op,
                    "appending a final layer must preserve the output width",
                ));
            }
            // Extender contract: inserted params plus the next layer's
            // reshape must add weights on net.
            let delta = (slot * width + width) as i64
                + if position < len && width != slot {
                    (width as i64 - slot as i64) * n.layers[position].out_dim() as i64
                } else {
                    0
                };
            if delta <= 0 {
                return Err(guard(op, "insertion would not increase the weight count"));
            }
        }
    }
    Ok(())
}

pub(crate) fn add_layer<R: Rng>(
    model: &ModelGraph,
    op: &OperatorDescriptor,
    rng: &mut R,
) -> Result<ModelGraph, OpError> {
    let net = net_target(op)?;
    let (position, width) = add_layer_params(op)?;
    let mut out = model.clone();
    let slot = slot_width(&out, net, position);
    let n = out.nets.get_mut(&net).expect("guard checked");
    let len = n.layers.len();
    let layer = match op.variant {
        Variant::Gentle => {
            // Preserved exactly: identity weights, and ReLU only where the
            // preceding activation guarantees nonnegative values.
            let act = if position > 0 && n.layers[position - 1].activation.nonneg_output() {
                Activation::ReLU
            } else {
                Activation::Identity
            };
            DenseLayer::identity_layer(slot, act)
        }
        _ => {
            let act = if position == len {
                Activation::Identity
            } else {
                Activation::ReLU
            };
            DenseLayer::glorot(slot, width, act, rng)
        }
    };
    n.layers.insert(position, layer);
    if op.variant == Variant::Aggressive && position < len && width != slot {
        let next_out = n.layers[position + 1].out_dim();
        n.layers[position + 1].weights = glorot_uniform(width, next_out, rng);
    }
    out.opt_state.remove(&net);
    Ok(out)
}

fn remove_layer_params(op: &OperatorDescriptor) -> Result<usize, GuardError> {
    match op.params {
        OpParams::RemoveLayer { layer_index } => Ok(layer_index),
        _ => Err(guard(op, "missing remove_layer parameters")),
    }
}

pub(crate) fn check_remove_layer(
    model: &ModelGraph,
    op: &OperatorDescriptor,
) -> Result<(), GuardError> {
    let net = net_target(op)?;
    let Some(n) = model.nets.get(&net) else {
        return Err(guard(op, format!("unknown net {net}")));
    };
    if n.layers.len() < 2 {
        return Err(guard(
            op,
            "removing the only layer would delete the network (different operator)",
        ));
    }
    let idx = remove_layer_params(op)?;
    if idx >= n.layers.len() - 1 {
        return Err(guard(
            op,
            "the final layer stays (it fixes the emission width)",
        ));
    }
    let d_prev = slot_width(model, net, idx);
    let d_mid = n.layers[idx].out_dim();
    let next_out = n.layers[idx + 1].out_dim();
    let removed = n.layers[idx].param_count() as i64;
    let delta = (d_prev as i64 - d_mid as i64) * next_out as i64 - removed;
    if delta >= 0 {
        return Err(guard(
            op,
            "re-bridging this bottleneck would not decrease the weight count",
        ));
    }
    Ok(())
}

pub(crate) fn remove_layer<R: Rng>(
    model: &ModelGraph,
    op: &OperatorDescriptor,
    rng: &mut R,
) -> Result<ModelGraph, OpError> {
    let net = net_target(op)?;
    let idx = remove_layer_params(op)?;
    let mut out = model.clone();
    let d_prev = slot_width(&out, net, idx);
    let n = out.nets.get_mut(&net).expect("guard checked");
    let d_mid = n.layers[idx].out_dim();
    n.layers.remove(idx);
    if d_prev != d_mid {
        // Fresh random bridge; the following layer keeps its bias.
        let next_out = n.layers[idx].out_dim();
        n.layers[idx].weights = glorot_uniform(d_prev, next_out, rng);
    }
    out.opt_state.remove(&net);
    Ok(out)
}

fn extend_layer_params(op: &OperatorDescriptor) -> Result<(usize, usize), GuardError> {
    match op.params {
        OpParams::ExtendLayer { layer_index, extra } => Ok((layer_index, extra)),
        _ => Err(guard(op, "missing extend_layer parameters")),
    }
}

pub(crate) fn check_extend_layer(
    model: &ModelGraph,
    op: &OperatorDescriptor,
) -> Result<(), GuardError> {
    let net = net_target(op)?;
    let Some(n) = model.nets.get(&net) else {
        return Err(guard(op, format!("unknown net {net}")));
    };
    let (idx, extra) = extend_layer_params(op)?;
    if idx >= n.layers.len() {
        return Err(guard(op, format!("layer index {idx} out of range")));
    }
    if extra == 0 {
        return Err(guard(op, "must add at least one neuron"));
    }
    if idx == n.layers.len() - 1 {
        if n.sampler.is_some() {
            return Err(guard(
                op,
                "widening a sampler's final layer would break its (mu, log_var) split",
            ));
        }
        let feeds_output = model
            .consumers_of(SourceId::Net(net))
            .iter()
            .any(|s| matches!(s, SinkId::Output(_)));
        if feeds_output {
            return Err(guard(
                op,
                "widening the final layer would change a model output's width",
            ));
        }
    }
    Ok(())
}

pub(crate) fn extend_layer<R: Rng>(
    model: &ModelGraph,
    op: &OperatorDescriptor,
    rng: &mut R,
) -> Result<ModelGraph, OpError> {
    let net = net_target(op)?;
    let (idx, extra) = extend_layer_params(op)?;
    let mut out = model.clone();
    let n = out.nets.get_mut(&net).expect("guard checked");
    let w = n.layers[idx].out_dim();
    let last = idx == n.layers.len() - 1;

    // Sources of the new units (gentle duplicates; aggressive units are
    // fresh so sources are unused there).
    let sources: Vec<usize> = (0..extra).map(|_| rng.gen_range(0..w)).collect();
    let mut counts = vec![1usize; w];
    for &s in &sources {
        counts[s] += 1;
    }

    // Widen layer idx: append columns.
    {
        let layer = &mut n.layers[idx];
        let in_dim = layer.in_dim();
        let mut widened = Matrix::zeros(in_dim, w + extra);
        for r in 0..in_dim {
            widened.row_mut(r)[..w].copy_from_slice(layer.weights.row(r));
        }
        match op.variant {
            Variant::Gentle => {
                for (t, &s) in sources.iter().enumerate() {
                    for r in 0..in_dim {
                        widened.set(r, w + t, layer.weights.get(r, s));
                    }
                    layer.bias.push(layer.bias[s]);
                }
            }
            _ => {
                let fresh = glorot_uniform(in_dim, extra, rng);
                for r in 0..in_dim {
                    for t in 0..extra {
                        widened.set(r, w + t, fresh.get(r, t));
                    }
                }
                layer.bias.extend(std::iter::repeat(0.0).take(extra));
            }
        }
        layer.weights = widened;
    }

    // Rescale/extend the consuming rows: either the next in-net layer, or
    // every consumer's first-layer block when the final layer widened.
    let extend_rows = |orig: &Matrix, variant: Variant, rng: &mut R| -> Matrix {
        debug_assert_eq!(orig.rows(), w);
        let cols = orig.cols();
        let mut grown = Matrix::zeros(w + extra, cols);
        match variant {
            Variant::Gentle => {
                for r in 0..w {
                    let scale = 1.0 / counts[r] as f64;
                    for c in 0..cols {
                        grown.set(r, c, orig.get(r, c) * scale);
                    }
                }
                for (t, &s) in sources.iter().enumerate() {
                    let scale = 1.0 / counts[s] as f64;
                    for c in 0..cols {
                        grown.set(w + t, c, orig.get(s, c) * scale);
                    }
                }
            }
            _ => {
                for r in 0..w {
                    for c in 0..cols {
                        grown.set(r, c, orig.get(r, c));
                    }
                }
                let fresh = glorot_uniform(extra, cols, rng);
                for t in 0..extra {
                    for c in 0..cols {
                        grown.set(w + t, c, fresh.get(t, c));
                    }
                }
            }
        }
        grown
    };

    if !last {
        let n = out.nets.get_mut(&net).expect("guard checked");
        let grown = extend_rows(&n.layers[idx + 1].weights, op.variant, rng);
        n.layers[idx + 1].weights = grown;
    } else {
        // Blocks are located with the pre-widening provider widths; the new
        // rows land at the end of this net's block in each consumer.
        let consumers: Vec<NetId> = out
            .consumers_of(SourceId::Net(net))
            .into_iter()
            .filter_map(|s| match s {
                SinkId::Net(n) => Some(n),
                SinkId::Output(_) => None,
            })
            .collect();
        for c in consumers {
            let blocks: Vec<(SourceId, usize)> = model
                .providers_of(SinkId::Net(c))
                .into_iter()
                .map(|p| (p, model.emit_width(p).unwrap_or(0)))
                .collect();
            let range = block_rows(&blocks, SourceId::Net(net)).expect("provider block");
            let cnet = out.nets.get_mut(&c).expect("consumer exists");
            let first = &cnet.layers[0];
            let cols = first.out_dim();
            let block: Vec<usize> = range.clone().collect();
            let block_m = first.weights.gather_rows(&block);
            let grown_block = extend_rows(&block_m, op.variant, rng);
            // Stitch: rows before the block, grown block, rows after.
            let before: Vec<usize> = (0..range.start).collect();
            let after: Vec<usize> = (range.end..first.weights.rows()).collect();
            let mut stitched = Matrix::zeros(
                before.len() + grown_block.rows() + after.len(),
                cols,
            );
            let mut at = 0;
            for &r in &before {
                stitched.row_mut(at).copy_from_slice(first.weights.row(r));
                at += 1;
            }
            for r in 0..grown_block.rows() {
                stitched.row_mut(at).copy_from_slice(grown_block.row(r));
                at += 1;
            }
            for &r in &after {
                stitched.row_mut(at).copy_from_slice(first.weights.row(r));
                at += 1;
            }
            cnet.layers[0].weights = stitched;
            out.opt_state.remove(&c);
        }
    }
    out.opt_state.remove(&net);
    Ok(out)
}
