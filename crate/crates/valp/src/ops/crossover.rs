//! Exclusive-subgraph crossover: a donor model donates the exclusive
//! subgraph of one output to a host model, replacing the host's.
//!
//! Grafted nets keep the donor's weights. Boundary arcs (donor components
//! outside the exclusive set that fed into it) are reattached to host
//! components matched by role: same-id same-width components first, then
//! the shared net of that output's subgraph with the closest emission
//! width, then a model input. Where a substitute's width disagrees with
//! the donor provider's, the consuming block is freshly randomized.

use super::{insert_matrix_rows, provider_blocks, GuardError, OpError};
use crate::graph::{GraphArc, ModelGraph, NetId, OutputId, SinkId, SourceId};
use crate::nn::{glorot_uniform, Matrix};
use crate::rng::{self, tag};
use std::collections::{BTreeMap, BTreeSet};

fn xguard(reason: impl Into<String>) -> OpError {
    OpError::Guard(GuardError {
        op: "exclusive_subgraph_crossover".into(),
        reason: reason.into(),
    })
}

/// Replace `host`'s exclusive subgraph for `output` with `donor`'s.
pub fn crossover(
    host: &ModelGraph,
    donor: &ModelGraph,
    output: OutputId,
    seed: u64,
) -> Result<ModelGraph, OpError> {
    if !host.outputs.contains_key(&output) || !donor.outputs.contains_key(&output) {
        return Err(xguard(format!("both models must expose output {output}")));
    }
    let same_problem = host.outputs.len() == donor.outputs.len()
        && host.outputs.iter().zip(donor.outputs.iter()).all(|(a, b)| {
            a.0 == b.0 && a.1.target_dim == b.1.target_dim && a.1.kind == b.1.kind
        })
        && host.inputs.len() == donor.inputs.len()
        && host.inputs.iter().zip(donor.inputs.iter()).all(|(a, b)| {
            a.0 == b.0 && a.1.feature_dim == b.1.feature_dim
        });
    if !same_problem {
        return Err(xguard("host and donor solve different problems"));
    }
    let donor_ex = donor
        .exclusive_subgraph(output)
        .map_err(super::OpError::Graph)?;
    if donor_ex.nets.is_empty() {
        return Err(xguard(format!(
            "donor's exclusive subgraph for {output} is empty"
        )));
    }
    let host_ex = host.exclusive_subgraph(output).map_err(OpError::Graph)?;
    let host_shared: BTreeSet<NetId> = host
        .output_subgraph(output)
        .map_err(OpError::Graph)?
        .nets
        .difference(&host_ex.nets)
        .copied()
        .collect();

    let mut rng = rng::stream(seed, &[tag::APPLY, output.0 as u64]);
    let mut out = host.clone();

    // 1. Remove the host's exclusive nets and every arc touching them,
    //    plus the remaining arcs into the output: the donor's provider set
    //    replaces it wholesale.
    for &n in &host_ex.nets {
        let consumers = out.consumers_of(SourceId::Net(n));
        for c in consumers {
            if let SinkId::Net(cn) = c {
                if !host_ex.nets.contains(&cn) {
                    // A shared consumer loses this provider's block.
                    remove_block(&mut out, cn, SourceId::Net(n));
                }
            }
        }
        out.arcs
            .retain(|a| a.from != SourceId::Net(n) && a.to != SinkId::Net(n));
        out.nets.remove(&n);
        out.opt_state.remove(&n);
    }
    out.arcs.retain(|a| a.to != SinkId::Output(output));

    // 2. Allocate fresh host ids for the grafted nets (ascending donor id
    //    order keeps relative provider ordering intact).
    let mut id_map: BTreeMap<NetId, NetId> = BTreeMap::new();
    let mut next = out.fresh_net_id().0;
    for &dn in &donor_ex.nets {
        id_map.insert(dn, NetId(next));
        next += 1;
    }

    // 3. Resolve each donor boundary provider to a host substitute.
    let resolve = |out: &ModelGraph, src: SourceId| -> Option<SourceId> {
        match src {
            SourceId::Input(i) => Some(SourceId::Input(i)),
            SourceId::Net(dn) => {
                let want = donor.nets[&dn].emit_dim();
                // Same id, same role width: the self-crossover fast path.
                if let Some(h) = out.nets.get(&dn) {
                    if h.emit_dim() == want && host_shared.contains(&dn) {
                        return Some(SourceId::Net(dn));
                    }
                }
                let candidates: Vec<NetId> = if host_shared.iter().any(|n| out.nets.contains_key(n)) {
                    host_shared
                        .iter()
                        .copied()
                        .filter(|n| out.nets.contains_key(n))
                        .collect()
                } else {
                    out.nets.keys().copied().filter(|n| !id_map.values().any(|&m| m == *n)).collect()
                };
                candidates
                    .into_iter()
                    .min_by_key(|&n| {
                        let w = out.nets[&n].emit_dim() as i64;
                        ((w - want as i64).abs(), n)
                    })
                    .map(SourceId::Net)
                    .or_else(|| out.inputs.keys().next().copied().map(SourceId::Input))
            }
        }
    };

    // 4. Graft nets with donor weights; rebuild each grafted net's first
    //    layer from per-provider blocks so inherited rows stay attached to
    //    the right data stream.
    for &dn in &donor_ex.nets {
        let hosted_id = id_map[&dn];
        let mut net = donor.nets[&dn].clone();
        net.id = hosted_id;

        let donor_blocks = provider_blocks(donor, dn);
        // New provider list: map in-graft providers, resolve the rest.
        let mut mapped: Vec<(SourceId, SourceId, usize)> = Vec::new(); // (new, donor, width)
        for &(dp, w) in &donor_blocks {
            let new = match dp {
                SourceId::Net(p) if donor_ex.nets.contains(&p) => SourceId::Net(id_map[&p]),
                other => resolve(&out, other)
                    .ok_or_else(|| xguard("no host component can stand in for a donor provider"))?,
            };
            mapped.push((new, dp, w));
        }
        // Dedup: two donor providers may resolve to one host component;
        // keep the first and drop the rest (their rows are dropped too).
        let mut seen: BTreeSet<SourceId> = BTreeSet::new();
        mapped.retain(|(new, _, _)| seen.insert(*new));
        mapped.sort_by_key(|(new, _, _)| *new);

        let fan = net.layers[0].out_dim();
        let mut first = Matrix::zeros(0, fan);
        for &(new, dp, dw) in &mapped {
            let new_w = match new {
                SourceId::Input(i) => out.inputs[&i].feature_dim,
                SourceId::Net(n) => id_map
                    .iter()
                    .find(|(_, &m)| m == n)
                    .map(|(d, _)| donor.nets[d].emit_dim())
                    .or_else(|| out.nets.get(&n).map(|x| x.emit_dim()))
                    .ok_or_else(|| xguard("substitute provider vanished"))?,
            };
            let rows = if new_w == dw {
                let blocks = provider_blocks(donor, dn);
                let range =
                    super::block_rows(&blocks, dp).expect("donor provider block exists");
                donor.nets[&dn].layers[0]
                    .weights
                    .gather_rows(&range.collect::<Vec<_>>())
            } else {
                glorot_uniform(new_w, fan, &mut rng)
            };
            first = insert_matrix_rows(&first, first.rows(), &rows);
            out.arcs.insert(GraphArc::new(new, SinkId::Net(hosted_id)));
        }
        net.layers[0].weights = first;
        out.nets.insert(hosted_id, net);
    }

    // 5. Donor arcs out of the exclusive set all point at the output.
    for arc in &donor.arcs {
        if let (SourceId::Net(p), SinkId::Output(o)) = (arc.from, arc.to) {
            if o == output && donor_ex.nets.contains(&p) {
                out.arcs
                    .insert(GraphArc::new(SourceId::Net(id_map[&p]), SinkId::Output(o)));
            }
        }
    }

    let violations = out.validate();
    if !violations.is_empty() {
        return Err(OpError::Graph(crate::graph::GraphError::Invalid(violations)));
    }
    Ok(out)
}

fn remove_block(model: &mut ModelGraph, consumer: NetId, provider: SourceId) {
    let blocks = provider_blocks(model, consumer);
    if let Some(range) = super::block_rows(&blocks, provider) {
        let net = model.nets.get_mut(&consumer).expect("consumer exists");
        net.layers[0].weights = super::remove_matrix_rows(&net.layers[0].weights, range);
        model.opt_state.remove(&consumer);
    }
}
