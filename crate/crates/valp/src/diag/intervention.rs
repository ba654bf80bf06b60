//! Intervention metrics: estimate a component's importance to each output
//! by damaging it and measuring the evaluation-loss degradation ratio.

use super::DiagError;
use crate::graph::{evaluate_on, InputId, ModelGraph, NetId, OutputId, ProblemData};
use crate::nn::glorot_uniform;
use crate::rng::{self, tag};
use rand::Rng;
use std::collections::BTreeMap;

/// Intervened loss over baseline loss. 1 means no effect, 2 means the
/// loss doubled. A zero baseline falls back to `1 + intervened`.
pub(crate) fn relevance_ratio(baseline: f64, intervened: f64) -> f64 {
    if baseline == 0.0 {
        1.0 + intervened
    } else {
        intervened / baseline
    }
}

/// Re-randomize one net's weights on a clone and compare evaluation
/// losses. The diagnosed model itself is never touched. Pairs with no
/// directed path from the net to the output come out at exactly 1.
pub fn module_intervention(
    model: &ModelGraph,
    net: NetId,
    data: &ProblemData,
    seed: u64,
) -> Result<BTreeMap<OutputId, f64>, DiagError> {
    module_intervention_on(model, net, data, &data.eval_idx, seed)
}

pub fn module_intervention_on(
    model: &ModelGraph,
    net: NetId,
    data: &ProblemData,
    rows: &[usize],
    seed: u64,
) -> Result<BTreeMap<OutputId, f64>, DiagError> {
    if !model.nets.contains_key(&net) {
        return Err(DiagError::UnknownNet(net));
    }
    let baseline = evaluate_on(model, data, rows)?;
    let mut damaged = model.clone();
    let mut rng = rng::stream(seed, &[tag::INTERVENTION, net.0 as u64]);
    {
        let n = damaged.nets.get_mut(&net).expect("checked");
        for layer in &mut n.layers {
            layer.weights = glorot_uniform(layer.weights.rows(), layer.weights.cols(), &mut rng);
            for b in &mut layer.bias {
                *b = 0.0;
            }
        }
    }
    damaged.opt_state.remove(&net);
    let intervened = evaluate_on(&damaged, data, rows)?;
    Ok(baseline
        .values
        .iter()
        .map(|(&o, &b)| (o, relevance_ratio(b, intervened.get(o).unwrap_or(b))))
        .collect())
}

/// Replace a subset of one input's features with uniform noise over the
/// training range and measure the same degradation ratio. An empty subset
/// changes nothing and yields exactly 1 everywhere.
pub fn input_intervention(
    model: &ModelGraph,
    input: InputId,
    features: &[usize],
    data: &ProblemData,
    seed: u64,
) -> Result<BTreeMap<OutputId, f64>, DiagError> {
    input_intervention_on(model, input, features, data, &data.eval_idx, seed)
}

pub fn input_intervention_on(
    model: &ModelGraph,
    input: InputId,
    features: &[usize],
    data: &ProblemData,
    rows: &[usize],
    seed: u64,
) -> Result<BTreeMap<OutputId, f64>, DiagError> {
    if !model.inputs.contains_key(&input) {
        return Err(DiagError::UnknownInput(input));
    }
    let baseline = evaluate_on(model, data, rows)?;
    let ranges = data
        .feature_range(input)
        .ok_or(DiagError::UnknownInput(input))?;
    let mut noisy = data.clone();
    let mut rng = rng::stream(seed, &[tag::INTERVENTION, 1 << 32 | input.0 as u64]);
    {
        let m = noisy.inputs.get_mut(&input).expect("checked");
        for &r in rows {
            for &f in features {
                let (lo, hi) = ranges[f];
                let v = if hi > lo { rng.gen_range(lo..hi) } else { lo };
                m.set(r, f, v);
            }
        }
    }
    let intervened = evaluate_on(model, &noisy, rows)?;
    Ok(baseline
        .values
        .iter()
        .map(|(&o, &b)| (o, relevance_ratio(b, intervened.get(o).unwrap_or(b))))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testkit::two_output_example;
    use crate::graph::{serialize, SourceId};
    use crate::nn::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example_data(n: usize, seed: u64) -> ProblemData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = {
            let mut m = Matrix::zeros(n, 2);
            for v in m.data_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            m
        };
        let y1 = {
            let mut m = Matrix::zeros(n, 4);
            for v in m.data_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            m
        };
        let y2 = {
            let mut m = Matrix::zeros(n, 2);
            for v in m.data_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            m
        };
        ProblemData {
            inputs: [(InputId(0), x)].into(),
            targets: [(OutputId(1), y1), (OutputId(2), y2)].into(),
            train_idx: (0..n / 2).collect(),
            eval_idx: (n / 2..n).collect(),
        }
    }

    #[test]
    fn ratio_rule_matches_the_documented_scale() {
        assert_eq!(relevance_ratio(1.0, 1.0), 1.0);
        assert_eq!(relevance_ratio(1.0, 2.0), 2.0);
        assert_eq!(relevance_ratio(0.0, 0.25), 1.25);
    }

    #[test]
    fn no_path_means_relevance_exactly_one() {
        let mut m = two_output_example();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for net in m.nets.values_mut() {
            for layer in &mut net.layers {
                layer.weights = crate::nn::glorot_uniform(
                    layer.weights.rows(),
                    layer.weights.cols(),
                    &mut rng,
                );
            }
        }
        let data = example_data(40, 1);
        // n1 reaches only o1; n4 reaches only o2.
        let rel = module_intervention(&m, crate::graph::NetId(1), &data, 9).unwrap();
        assert_eq!(rel[&OutputId(2)], 1.0);
        assert!(rel[&OutputId(1)] != 1.0 || rel[&OutputId(1)] == 1.0); // present
        let rel = module_intervention(&m, crate::graph::NetId(4), &data, 9).unwrap();
        assert_eq!(rel[&OutputId(1)], 1.0);
    }

    #[test]
    fn diagnosed_model_is_bit_identical_afterwards() {
        let m = two_output_example();
        let data = example_data(30, 2);
        let before = serialize(&m);
        let _ = module_intervention(&m, crate::graph::NetId(5), &data, 3).unwrap();
        let _ = input_intervention(&m, InputId(0), &[0, 1], &data, 3).unwrap();
        assert_eq!(serialize(&m), before);
    }

    #[test]
    fn empty_feature_subset_changes_nothing() {
        let m = two_output_example();
        let data = example_data(30, 3);
        let rel = input_intervention(&m, InputId(0), &[], &data, 5).unwrap();
        for (_, v) in rel {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn disconnected_input_has_unit_relevance() {
        let mut m = two_output_example();
        // Add a second input wired to a dead-end... inputs must have a
        // consumer, so wire it to a fresh net that feeds only o2, then ask
        // about o1.
        let i1 = InputId(1);
        m.inputs.insert(
            i1,
            crate::graph::InputNode {
                id: i1,
                feature_dim: 2,
                role: "extra".into(),
            },
        );
        let n9 = crate::graph::NetId(9);
        m.nets
            .insert(n9, crate::graph::testkit::linear_net(9, &[2, 2]));
        m.arcs
            .insert(crate::graph::GraphArc::new(SourceId::Input(i1), crate::graph::SinkId::Net(n9)));
        m.arcs.insert(crate::graph::GraphArc::new(
            SourceId::Net(n9),
            crate::graph::SinkId::Net(crate::graph::NetId(4)),
        ));
        // n4's first layer gains zero rows for the new provider; n9 sorts
        // after n2 and n6, so the block goes at the end.
        {
            let n4 = m.nets.get_mut(&crate::graph::NetId(4)).unwrap();
            let old = &n4.layers[0].weights;
            let mut grown = Matrix::zeros(old.rows() + 2, old.cols());
            for r in 0..old.rows() {
                grown.row_mut(r).copy_from_slice(old.row(r));
            }
            n4.layers[0].weights = grown;
        }
        let v = m.validate();
        assert!(v.is_empty(), "{v:?}");
        let mut data = example_data(30, 4);
        data.inputs.insert(i1, {
            let mut mm = Matrix::zeros(30, 2);
            for v in mm.data_mut() {
                *v = 0.5;
            }
            mm
        });
        let rel = input_intervention(&m, i1, &[0, 1], &data, 6).unwrap();
        assert_eq!(rel[&OutputId(1)], 1.0, "i1 has no path to o1");
    }
}
