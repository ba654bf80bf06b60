//! DAG-wide training and evaluation.
//!
//! Training sums one loss per output (cross-entropy, MSE, or
//! reconstruction+KL) and backpropagates through the whole graph; a net
//! shared by several outputs accumulates their gradients and steps under
//! the optimizer of its governing (lowest-id reachable) output.
//!
//! Data order is counter-based: the indices of global batch `t` depend
//! only on `(model seed, t)`, so a candidate retrained at step `s` sees
//! exactly the data stream the incumbent would have seen.

use super::forward::{forward_model_traced, ForwardTrace, NoiseKey};
use super::{GraphError, InputId, ModelGraph, NetId, OutputId, OutputKind, SinkId, SourceId};
use crate::nn::{
    backward_layers, cross_entropy, cross_entropy_grad, kl_grads, kl_standard_normal, mse,
    mse_grad, optimizer_step, LayerGrads, LossKind, Matrix, ParamState,
};
use crate::rng::{self, tag};
use rand::Rng;
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// One evaluation loss per model output; lower is better everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct FitnessTuple {
    pub values: BTreeMap<OutputId, f64>,
}

impl FitnessTuple {
    pub fn new(values: BTreeMap<OutputId, f64>) -> Self {
        FitnessTuple { values }
    }

    pub fn get(&self, output: OutputId) -> Option<f64> {
        self.values.get(&output).copied()
    }

    pub fn outputs(&self) -> impl Iterator<Item = OutputId> + '_ {
        self.values.keys().copied()
    }

    pub fn is_finite(&self) -> bool {
        self.values.values().all(|v| v.is_finite())
    }
}

impl fmt::Display for FitnessTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (o, v) in &self.values {
            if !first {
                write!(f, " ")?;
            }
            write!(f, "{o}={v:.6}")?;
            first = false;
        }
        Ok(())
    }
}

/// Per-batch, per-output training losses; the raw material for the
/// historic sub-loss slope metric.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub per_output: BTreeMap<OutputId, Vec<f64>>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.per_output.values().next().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, output: OutputId, value: f64) {
        self.per_output.entry(output).or_default().push(value);
    }
}

/// A problem instance: full input/target matrices plus disjoint
/// train/eval row-index splits.
#[derive(Debug, Clone)]
pub struct ProblemData {
    pub inputs: BTreeMap<InputId, Matrix>,
    pub targets: BTreeMap<OutputId, Matrix>,
    pub train_idx: Vec<usize>,
    pub eval_idx: Vec<usize>,
}

impl ProblemData {
    pub fn n_rows(&self) -> usize {
        self.inputs.values().next().map_or(0, Matrix::rows)
    }

    pub fn gather(
        &self,
        indices: &[usize],
    ) -> (BTreeMap<InputId, Matrix>, BTreeMap<OutputId, Matrix>) {
        let inputs = self
            .inputs
            .iter()
            .map(|(&i, m)| (i, m.gather_rows(indices)))
            .collect();
        let targets = self
            .targets
            .iter()
            .map(|(&o, m)| (o, m.gather_rows(indices)))
            .collect();
        (inputs, targets)
    }

    /// Per-feature (min, max) over the training split of one input.
    pub fn feature_range(&self, input: InputId) -> Option<Vec<(f64, f64)>> {
        let m = self.inputs.get(&input)?;
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); m.cols()];
        for &r in &self.train_idx {
            for (c, &v) in m.row(r).iter().enumerate() {
                ranges[c].0 = ranges[c].0.min(v);
                ranges[c].1 = ranges[c].1.max(v);
            }
        }
        Some(ranges)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("training diverged at batch {batch}: loss for {output} is not finite")]
    Diverged { batch: usize, output: OutputId },
    #[error("evaluation produced a non-finite loss for {output}")]
    NonFiniteEvaluation { output: OutputId },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Indices of global batch `t`, sampled with replacement from the train
/// split. Depends only on (seed, t).
fn batch_indices(model: &ModelGraph, data: &ProblemData, global_batch: u64) -> Vec<usize> {
    let mut rng = rng::stream(model.training.seed, &[tag::DATA_ORDER, global_batch]);
    let n = data.train_idx.len();
    (0..model.training.batch_size)
        .map(|_| data.train_idx[rng.gen_range(0..n)])
        .collect()
}

/// For each sampler net, how many ReconstructionPlusKL outputs it serves
/// (its KL term enters the total loss once per such output).
fn kl_multiplicity(model: &ModelGraph) -> BTreeMap<NetId, f64> {
    let mut mult: BTreeMap<NetId, f64> = BTreeMap::new();
    for (&o, _) in &model.outputs {
        if model.losses.get(&o) == Some(&LossKind::ReconstructionPlusKL) {
            if let Ok(sub) = model.output_subgraph(o) {
                for n in sub.nets {
                    if model.nets[&n].sampler.is_some() {
                        *mult.entry(n).or_insert(0.0) += 1.0;
                    }
                }
            }
        }
    }
    mult
}

/// Training loss of one output for a traced forward pass.
fn output_loss(
    model: &ModelGraph,
    trace: &ForwardTrace,
    targets: &BTreeMap<OutputId, Matrix>,
    output: OutputId,
) -> Result<f64, GraphError> {
    let kind = model.losses[&output];
    let pred = &trace.outputs[&output].prediction;
    let target = &targets[&output];
    let base = match kind {
        LossKind::CrossEntropy => cross_entropy(pred, target)?,
        LossKind::MeanSquaredError | LossKind::ReconstructionPlusKL => mse(pred, target)?,
    };
    if kind != LossKind::ReconstructionPlusKL {
        return Ok(base);
    }
    let mut kl = 0.0;
    let sub = model.output_subgraph(output)?;
    for n in sub.nets {
        if model.nets[&n].sampler.is_some() {
            let s = trace.nodes[&n].sampler.as_ref().expect("sampler trace");
            kl += kl_standard_normal(&s.mu, &s.log_var)?;
        }
    }
    Ok(base + kl)
}

/// Backpropagate the summed per-output losses through the DAG.
/// Returns parameter gradients per net.
pub(crate) fn backward_through_graph(
    model: &ModelGraph,
    trace: &ForwardTrace,
    targets: &BTreeMap<OutputId, Matrix>,
) -> Result<BTreeMap<NetId, Vec<LayerGrads>>, GraphError> {
    let kl_mult = kl_multiplicity(model);
    let mut d_emit: BTreeMap<NetId, Matrix> = BTreeMap::new();

    let accumulate =
        |d_emit: &mut BTreeMap<NetId, Matrix>, model: &ModelGraph, sink: SinkId, d_concat: Matrix| -> Result<(), GraphError> {
            let providers = model.providers_of(sink);
            let widths: Vec<usize> = providers
                .iter()
                .map(|&p| model.emit_width(p).unwrap_or(0))
                .collect();
            let blocks = d_concat.split_cols(&widths)?;
            for (p, block) in providers.into_iter().zip(blocks) {
                if let SourceId::Net(n) = p {
                    match d_emit.get_mut(&n) {
                        Some(acc) => acc.add_assign(&block)?,
                        None => {
                            d_emit.insert(n, block);
                        }
                    }
                }
            }
            Ok(())
        };

    for (&o, out) in &model.outputs {
        let ot = &trace.outputs[&o];
        let target = &targets[&o];
        let d_pred = match model.losses[&o] {
            LossKind::CrossEntropy => cross_entropy_grad(&ot.prediction, target)?,
            LossKind::MeanSquaredError | LossKind::ReconstructionPlusKL => {
                mse_grad(&ot.prediction, target)?
            }
        };
        let d_concat = out.terminal.backward(&ot.concat, &ot.prediction, &d_pred);
        accumulate(&mut d_emit, model, SinkId::Output(o), d_concat)?;
    }

    let order = model.topo_order()?;
    let mut grads: BTreeMap<NetId, Vec<LayerGrads>> = BTreeMap::new();
    for &id in order.iter().rev() {
        let net = &model.nets[&id];
        let nt = &trace.nodes[&id];
        let batch = nt.input.rows();
        let g_emit = d_emit
            .remove(&id)
            .unwrap_or_else(|| Matrix::zeros(batch, net.emit_dim()));
        let d_raw = match (&net.sampler, &nt.sampler) {
            (Some(_), Some(s)) => {
                // z = mu + sigma·eps, plus the KL term's direct gradients.
                let mut d_mu = g_emit.clone();
                let mut d_lv = g_emit.clone();
                for (g, (&sg, &e)) in d_lv
                    .data_mut()
                    .iter_mut()
                    .zip(s.sigma.data().iter().zip(s.epsilon.data()))
                {
                    *g *= 0.5 * sg * e;
                }
                if let Some(&mult) = kl_mult.get(&id) {
                    let (kd_mu, kd_lv) = kl_grads(&s.mu, &s.log_var)?;
                    for (a, &b) in d_mu.data_mut().iter_mut().zip(kd_mu.data()) {
                        *a += mult * b;
                    }
                    for (a, &b) in d_lv.data_mut().iter_mut().zip(kd_lv.data()) {
                        *a += mult * b;
                    }
                }
                Matrix::concat_cols(&[&d_mu, &d_lv])?
            }
            _ => g_emit,
        };
        let (layer_grads, d_input) = backward_layers(&net.layers, &nt.input, &nt.caches, &d_raw)?;
        grads.insert(id, layer_grads);
        accumulate(&mut d_emit, model, SinkId::Net(id), d_input)?;
    }
    Ok(grads)
}

fn apply_updates(
    model: &mut ModelGraph,
    grads: &BTreeMap<NetId, Vec<LayerGrads>>,
) -> Result<(), GraphError> {
    let governing: BTreeMap<NetId, OutputId> = model
        .nets
        .keys()
        .filter_map(|&n| model.governing_output(n).map(|o| (n, o)))
        .collect();
    for (&id, layer_grads) in grads {
        let spec = governing
            .get(&id)
            .and_then(|o| model.training.optimizers.get(o))
            .copied();
        let Some(spec) = spec else { continue };
        let net = model.nets.get_mut(&id).expect("net exists");
        let state = model
            .opt_state
            .entry(id)
            .or_insert_with(|| vec![(ParamState::default(), ParamState::default()); net.layers.len()]);
        if state.len() != net.layers.len() {
            *state = vec![(ParamState::default(), ParamState::default()); net.layers.len()];
        }
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let g = &layer_grads[li];
            optimizer_step(
                &spec,
                layer.weights.data_mut(),
                g.d_weights.data(),
                &mut state[li].0,
            )
            .map_err(GraphError::Nn)?;
            optimizer_step(&spec, &mut layer.bias, &g.d_bias, &mut state[li].1)
                .map_err(GraphError::Nn)?;
        }
    }
    Ok(())
}

/// Run `n_batches` steps of backprop through the whole DAG, starting at
/// global batch counter `start_batch`. Returns the full per-batch,
/// per-output loss trace.
pub fn train(
    model: &mut ModelGraph,
    data: &ProblemData,
    n_batches: usize,
    start_batch: u64,
) -> Result<LossTrace, TrainError> {
    let violations = model.validate();
    if !violations.is_empty() {
        return Err(GraphError::Invalid(violations).into());
    }
    let mut trace = LossTrace::default();
    for b in 0..n_batches {
        let global = start_batch + b as u64;
        let idx = batch_indices(model, data, global);
        let (bin, btar) = data.gather(&idx);
        let ftrace = forward_model_traced(model, &bin, NoiseKey::Batch(global))
            .map_err(TrainError::Graph)?;
        for &o in model.outputs.keys().collect::<Vec<_>>() {
            let l = output_loss(model, &ftrace, &btar, o)?;
            if !l.is_finite() {
                return Err(TrainError::Diverged {
                    batch: b,
                    output: o,
                });
            }
            trace.push(o, l);
        }
        let grads = backward_through_graph(model, &ftrace, &btar)?;
        apply_updates(model, &grads)?;
    }
    Ok(trace)
}

/// Squared maximum mean discrepancy with an RBF kernel whose bandwidth is
/// the median pairwise distance of the reference set. Exactly zero when
/// the two sets are identical.
pub fn mmd2(generated: &Matrix, reference: &Matrix) -> f64 {
    assert_eq!(generated.cols(), reference.cols(), "dimension mismatch");
    let sq_dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let d = x - y;
                d * d
            })
            .sum()
    };
    let mut dists = Vec::new();
    for i in 0..reference.rows() {
        for j in (i + 1)..reference.rows() {
            dists.push(sq_dist(reference.row(i), reference.row(j)).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if dists.is_empty() {
        1.0
    } else {
        dists[dists.len() / 2]
    };
    let bandwidth = if median > 0.0 { median } else { 1.0 };
    let denom = 2.0 * bandwidth * bandwidth;
    let kernel_mean = |x: &Matrix, y: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                s += (-sq_dist(x.row(i), y.row(j)) / denom).exp();
            }
        }
        s / (x.rows() * y.rows()) as f64
    };
    kernel_mean(generated, generated) + kernel_mean(reference, reference)
        - 2.0 * kernel_mean(generated, reference)
}

/// How many rows of each set enter the sampling-output MMD estimate.
pub const MMD_SAMPLES: usize = 256;

/// Evaluate a model on the eval split: mean cross-entropy for
/// classification outputs, MSE for regression, MMD^2 against the eval
/// images for sampling. Deterministic: repeated calls give identical
/// tuples.
pub fn evaluate(model: &ModelGraph, data: &ProblemData) -> Result<FitnessTuple, TrainError> {
    evaluate_on(model, data, &data.eval_idx)
}

/// `evaluate` restricted to an explicit row-index set.
pub fn evaluate_on(
    model: &ModelGraph,
    data: &ProblemData,
    rows: &[usize],
) -> Result<FitnessTuple, TrainError> {
    let violations = model.validate();
    if !violations.is_empty() {
        return Err(GraphError::Invalid(violations).into());
    }
    let (inputs, targets) = data.gather(rows);
    let preds = super::forward::forward_model(model, &inputs, NoiseKey::Eval)?;
    let mut values = BTreeMap::new();
    for (&o, out) in &model.outputs {
        let pred = &preds[&o];
        let target = &targets[&o];
        let v = match out.kind {
            OutputKind::Classification => cross_entropy(pred, target).map_err(GraphError::Nn)?,
            OutputKind::Regression => mse(pred, target).map_err(GraphError::Nn)?,
            OutputKind::Sampling => {
                let take = pred.rows().min(MMD_SAMPLES);
                let idx: Vec<usize> = (0..take).collect();
                mmd2(&pred.gather_rows(&idx), &target.gather_rows(&idx))
            }
        };
        if !v.is_finite() {
            return Err(TrainError::NonFiniteEvaluation { output: o });
        }
        values.insert(o, v);
    }
    Ok(FitnessTuple::new(values))
}

#[cfg(test)]
mod tests {
    use super::super::testkit::*;
    use super::super::*;
    use super::*;
    use crate::nn::{Activation, DenseLayer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_problem(n: usize, in_dim: usize, out_dim: usize, seed: u64) -> ProblemData {
        // Exactly linear targets: y = x·A + b.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = crate::nn::glorot_uniform(in_dim, out_dim, &mut rng);
        let x = crate::nn::glorot_uniform(n, in_dim, &mut rng);
        let mut y = x.matmul(&a).unwrap();
        y.add_row_broadcast(&vec![0.3; out_dim]).unwrap();
        let split = n * 4 / 5;
        ProblemData {
            inputs: [(InputId(0), x)].into(),
            targets: [(OutputId(0), y)].into(),
            train_idx: (0..split).collect(),
            eval_idx: (split..n).collect(),
        }
    }

    #[test]
    fn zero_batches_is_a_no_op() {
        let mut m = minimal_chain(3);
        let before = m.nets[&NetId(0)].layers[0].weights.clone();
        let data = linear_problem(40, 3, 3, 1);
        let trace = train(&mut m, &data, 0, 0).unwrap();
        assert!(trace.is_empty());
        assert_eq!(m.nets[&NetId(0)].layers[0].weights, before);
    }

    #[test]
    fn trace_has_one_entry_per_output_per_batch() {
        let mut m = two_output_example();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for net in m.nets.values_mut() {
            for layer in &mut net.layers {
                layer.weights = crate::nn::glorot_uniform(
                    layer.weights.rows(),
                    layer.weights.cols(),
                    &mut rng,
                );
            }
        }
        let mut data = linear_problem(60, 2, 4, 2);
        let y2 = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            crate::nn::glorot_uniform(60, 2, &mut rng)
        };
        data.targets.insert(OutputId(1), data.targets[&OutputId(0)].clone());
        data.targets.insert(OutputId(2), y2);
        data.targets.remove(&OutputId(0));
        let trace = train(&mut m, &data, 7, 0).unwrap();
        assert_eq!(trace.len(), 7);
        assert_eq!(trace.per_output.len(), 2);
        for v in trace.per_output.values() {
            assert_eq!(v.len(), 7);
        }
    }

    #[test]
    fn linear_net_fits_linearly_solvable_data() {
        // Independent oracle: the least-squares optimum for an affine map
        // fitting exactly affine targets is zero loss.
        let mut m = minimal_chain(4);
        {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let net = m.nets.get_mut(&NetId(0)).unwrap();
            net.layers = vec![DenseLayer::glorot(4, 4, Activation::Identity, &mut rng)];
        }
        m.training.batch_size = 16;
        m.training
            .optimizers
            .insert(OutputId(0), crate::nn::OptimizerSpec::adam(0.02));
        let data = linear_problem(200, 4, 4, 3);
        let initial = evaluate(&m, &data).unwrap().get(OutputId(0)).unwrap();
        train(&mut m, &data, 500, 0).unwrap();
        let final_loss = evaluate(&m, &data).unwrap().get(OutputId(0)).unwrap();
        let optimum = 0.0; // consistent affine system
        assert!(
            final_loss < 0.1 * initial + optimum,
            "final {final_loss} vs initial {initial}"
        );
    }

    #[test]
    fn training_is_reproducible_given_the_seed() {
        let data = linear_problem(80, 3, 3, 7);
        let make = || {
            let mut m = minimal_chain(3);
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let net = m.nets.get_mut(&NetId(0)).unwrap();
            net.layers = vec![DenseLayer::glorot(3, 3, Activation::Identity, &mut rng)];
            m
        };
        let mut a = make();
        let mut b = make();
        let ta = train(&mut a, &data, 25, 0).unwrap();
        let tb = train(&mut b, &data, 25, 0).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(
            a.nets[&NetId(0)].layers[0].weights,
            b.nets[&NetId(0)].layers[0].weights
        );
    }

    #[test]
    fn divergence_names_the_batch() {
        let mut m = minimal_chain(2);
        // Absurd learning rate blows the weights up quickly.
        m.training
            .optimizers
            .insert(OutputId(0), crate::nn::OptimizerSpec::sgd(1e12));
        let mut data = linear_problem(40, 2, 2, 4);
        for v in data.targets.get_mut(&OutputId(0)).unwrap().data_mut() {
            *v *= 1e6;
        }
        let err = train(&mut m, &data, 50, 0).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
    }

    #[test]
    fn perfect_predictions_evaluate_to_zero_mse() {
        let m = minimal_chain(3);
        let data = {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let x = crate::nn::glorot_uniform(20, 3, &mut rng);
            ProblemData {
                targets: [(OutputId(0), x.clone())].into(),
                inputs: [(InputId(0), x)].into(),
                train_idx: (0..10).collect(),
                eval_idx: (10..20).collect(),
            }
        };
        // Identity chain reproduces the input exactly.
        let fit = evaluate(&m, &data).unwrap();
        assert_eq!(fit.get(OutputId(0)), Some(0.0));
    }

    #[test]
    fn mmd_zero_for_identical_sets_and_positive_otherwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = crate::nn::glorot_uniform(30, 5, &mut rng);
        assert_eq!(mmd2(&x, &x), 0.0);
        let y = crate::nn::glorot_uniform(30, 5, &mut rng);
        let mut shifted = y.clone();
        for v in shifted.data_mut() {
            *v += 3.0;
        }
        assert!(mmd2(&shifted, &y) > 0.1);
    }

    /// Finite-difference oracle over every weight of a model containing a
    /// sampler, a shared trunk, softmax+CE, MSE, and reconstruction+KL.
    #[test]
    fn dag_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let i0 = InputId(0);
        let (o0, o1) = (OutputId(0), OutputId(1));
        // i0 -> n0(trunk) -> n1 -> o0 (classification, 3 classes)
        //              \--> n2(sampler k=2) -> n3 -> o1 (sampling, dim 4)
        let trunk = SubNetwork::new(
            NetId(0),
            vec![DenseLayer::glorot(4, 5, Activation::ReLU, &mut rng)],
        );
        let head = SubNetwork::new(
            NetId(1),
            vec![DenseLayer::glorot(5, 3, Activation::Identity, &mut rng)],
        );
        let mut sampler = SubNetwork::new(
            NetId(2),
            vec![DenseLayer::glorot(5, 4, Activation::Identity, &mut rng)],
        );
        sampler.sampler = Some(2);
        let decoder = SubNetwork::new(
            NetId(3),
            vec![DenseLayer::glorot(2, 4, Activation::Identity, &mut rng)],
        );
        let model = ModelGraph {
            inputs: [(
                i0,
                InputNode {
                    id: i0,
                    feature_dim: 4,
                    role: "features".into(),
                },
            )]
            .into(),
            nets: [
                (NetId(0), trunk),
                (NetId(1), head),
                (NetId(2), sampler),
                (NetId(3), decoder),
            ]
            .into(),
            outputs: [
                (o0, OutputNode::new(o0, 3, OutputKind::Classification)),
                (o1, OutputNode::new(o1, 4, OutputKind::Sampling)),
            ]
            .into(),
            arcs: [
                GraphArc::new(SourceId::Input(i0), SinkId::Net(NetId(0))),
                GraphArc::new(SourceId::Net(NetId(0)), SinkId::Net(NetId(1))),
                GraphArc::new(SourceId::Net(NetId(0)), SinkId::Net(NetId(2))),
                GraphArc::new(SourceId::Net(NetId(2)), SinkId::Net(NetId(3))),
                GraphArc::new(SourceId::Net(NetId(1)), SinkId::Output(o0)),
                GraphArc::new(SourceId::Net(NetId(3)), SinkId::Output(o1)),
            ]
            .into(),
            losses: [
                (o0, LossKind::CrossEntropy),
                (o1, LossKind::ReconstructionPlusKL),
            ]
            .into(),
            training: default_training(&[o0, o1]),
            opt_state: BTreeMap::new(),
        };
        assert!(model.validate().is_empty(), "{:?}", model.validate());

        let x = crate::nn::glorot_uniform(3, 4, &mut rng);
        let t0 = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ]);
        let t1 = crate::nn::glorot_uniform(3, 4, &mut rng);
        let inputs: BTreeMap<InputId, Matrix> = [(i0, x)].into();
        let targets: BTreeMap<OutputId, Matrix> = [(o0, t0), (o1, t1)].into();
        let key = NoiseKey::Batch(17);

        let total_loss = |m: &ModelGraph| -> f64 {
            let tr = forward_model_traced(m, &inputs, key).unwrap();
            m.outputs
                .keys()
                .map(|&o| output_loss(m, &tr, &targets, o).unwrap())
                .sum()
        };

        let tr = forward_model_traced(&model, &inputs, key).unwrap();
        let grads = backward_through_graph(&model, &tr, &targets).unwrap();

        let h = 1e-5;
        let mut probe = model.clone();
        for (&nid, layer_grads) in &grads {
            let n_layers = probe.nets[&nid].layers.len();
            for li in 0..n_layers {
                let wlen = probe.nets[&nid].layers[li].weights.data().len();
                for wi in 0..wlen {
                    let orig = probe.nets[&nid].layers[li].weights.data()[wi];
                    probe.nets.get_mut(&nid).unwrap().layers[li].weights.data_mut()[wi] =
                        orig + h;
                    let up = total_loss(&probe);
                    probe.nets.get_mut(&nid).unwrap().layers[li].weights.data_mut()[wi] =
                        orig - h;
                    let down = total_loss(&probe);
                    probe.nets.get_mut(&nid).unwrap().layers[li].weights.data_mut()[wi] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let analytic = layer_grads[li].d_weights.data()[wi];
                    let ok = if analytic.abs() < 1e-8 {
                        (analytic - numeric).abs() < 1e-6
                    } else {
                        ((analytic - numeric) / analytic).abs() < 1e-4
                    };
                    assert!(
                        ok,
                        "{nid} layer {li} weight {wi}: analytic {analytic} numeric {numeric}"
                    );
                }
            }
        }
    }
}
