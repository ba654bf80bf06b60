//! Constructive random-model generation.
//!
//! Models are grown one chain per output (so every output is reachable
//! from an input and every net sits on an input-to-output path by
//! construction), then padded with intermediate nets and random extra
//! arcs. Sampling outputs get a dedicated sampler node behind their head
//! when the size budget allows one, otherwise the head itself samples.

use super::{
    GraphArc, InputId, InputNode, ModelGraph, NetId, OutputId, OutputKind, OutputNode, SinkId,
    SourceId, SubNetwork, TrainingConfig,
};
use crate::nn::{Activation, DenseLayer, LossKind, OptimizerSpec};
use crate::rng::{self, tag};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet};

/// One model input the problem supplies.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    pub id: InputId,
    pub dim: usize,
    pub role: String,
}

/// One target the problem asks for.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub id: OutputId,
    pub dim: usize,
    pub kind: OutputKind,
}

/// The fixed ends of every model: what comes in and what must come out.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub inputs: Vec<InputSpec>,
    pub outputs: Vec<OutputSpec>,
}

impl ProblemSpec {
    /// The three-objective image benchmark: classify, predict the 8-bin
    /// pixel histogram, and sample images, all from one pixel input.
    pub fn benchmark(side: usize, classes: usize) -> Self {
        let d = side * side;
        ProblemSpec {
            inputs: vec![InputSpec {
                id: InputId(0),
                dim: d,
                role: "pixels".into(),
            }],
            outputs: vec![
                OutputSpec {
                    id: OutputId(0),
                    dim: classes,
                    kind: OutputKind::Classification,
                },
                OutputSpec {
                    id: OutputId(1),
                    dim: 8,
                    kind: OutputKind::Regression,
                },
                OutputSpec {
                    id: OutputId(2),
                    dim: d,
                    kind: OutputKind::Sampling,
                },
            ],
        }
    }

    /// Default size range: one to two nets per output.
    pub fn default_size_range(&self) -> (usize, usize) {
        (self.outputs.len(), 2 * self.outputs.len())
    }
}

/// Knobs for the generator; the defaults match the desk-scale benchmark.
#[derive(Debug, Clone)]
pub struct GeneratorOptions {
    pub hidden_widths: Vec<usize>,
    pub max_layers: usize,
    pub latent_dim: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions {
            hidden_widths: vec![8, 16],
            max_layers: 2,
            latent_dim: 4,
            batch_size: 32,
            optimizer: OptimizerSpec::adam(1e-3),
        }
    }
}

fn would_cycle(arcs: &BTreeSet<GraphArc>, from: SourceId, to: NetId) -> bool {
    // Adding from -> to cycles iff `to` already reaches `from`.
    let SourceId::Net(from) = from else {
        return false;
    };
    let mut stack = vec![to];
    let mut seen = BTreeSet::new();
    while let Some(n) = stack.pop() {
        if n == from {
            return true;
        }
        if !seen.insert(n) {
            continue;
        }
        for arc in arcs {
            if arc.from == SourceId::Net(n) {
                if let SinkId::Net(m) = arc.to {
                    stack.push(m);
                }
            }
        }
    }
    false
}

/// Generate a structurally valid random model for a problem.
pub fn random_model(problem: &ProblemSpec, size_range: (usize, usize), seed: u64) -> ModelGraph {
    random_model_with(problem, size_range, seed, &GeneratorOptions::default())
}

pub fn random_model_with(
    problem: &ProblemSpec,
    size_range: (usize, usize),
    seed: u64,
    opts: &GeneratorOptions,
) -> ModelGraph {
    assert!(!problem.inputs.is_empty(), "problem has no inputs");
    assert!(!problem.outputs.is_empty(), "problem has no outputs");
    let mut rng = rng::stream(seed, &[tag::MODEL_INIT]);

    let n_out = problem.outputs.len();
    let lo = size_range.0.max(n_out);
    let hi = size_range.1.max(lo);
    let budget = rng.gen_range(lo..=hi);
    let mut remaining = budget - n_out;

    let mut next_id = 0u32;
    let mut alloc = || {
        let id = NetId(next_id);
        next_id += 1;
        id
    };

    let mut arcs: BTreeSet<GraphArc> = BTreeSet::new();
    // Planned emission width and sampler flag per net; layers are built
    // after the topology settles.
    let mut plan: BTreeMap<NetId, (usize, Option<usize>)> = BTreeMap::new();

    let random_input = |rng: &mut rand_chacha::ChaCha8Rng| {
        SourceId::Input(problem.inputs.choose(rng).expect("inputs").id)
    };

    // One chain per output.
    for out in &problem.outputs {
        let head = alloc();
        arcs.insert(GraphArc::new(SourceId::Net(head), SinkId::Output(out.id)));
        match out.kind {
            OutputKind::Sampling if remaining > 0 => {
                remaining -= 1;
                let sampler = alloc();
                plan.insert(sampler, (opts.latent_dim, Some(opts.latent_dim)));
                plan.insert(head, (out.dim, None));
                arcs.insert(GraphArc::new(random_input(&mut rng), SinkId::Net(sampler)));
                arcs.insert(GraphArc::new(SourceId::Net(sampler), SinkId::Net(head)));
            }
            OutputKind::Sampling => {
                // Tight budget: the head itself samples, z is the output.
                plan.insert(head, (out.dim, Some(out.dim)));
                arcs.insert(GraphArc::new(random_input(&mut rng), SinkId::Net(head)));
            }
            _ => {
                plan.insert(head, (out.dim, None));
                arcs.insert(GraphArc::new(random_input(&mut rng), SinkId::Net(head)));
            }
        }
    }

    // Spend the rest of the budget on intermediates feeding existing nets.
    while remaining > 0 {
        remaining -= 1;
        let targets: Vec<NetId> = plan.keys().copied().collect();
        let &target = targets.choose(&mut rng).expect("nonempty");
        let m = alloc();
        let width = *opts.hidden_widths.choose(&mut rng).unwrap_or(&8);
        plan.insert(m, (width, None));
        arcs.insert(GraphArc::new(random_input(&mut rng), SinkId::Net(m)));
        arcs.insert(GraphArc::new(SourceId::Net(m), SinkId::Net(target)));
    }

    // A few random extra connections between existing components.
    let nets: Vec<NetId> = plan.keys().copied().collect();
    let attempts = rng.gen_range(0..=nets.len());
    for _ in 0..attempts {
        let &to = nets.choose(&mut rng).expect("nonempty");
        let from = if rng.gen_bool(0.5) {
            random_input(&mut rng)
        } else {
            SourceId::Net(*nets.choose(&mut rng).expect("nonempty"))
        };
        if from == SourceId::Net(to)
            || arcs.contains(&GraphArc::new(from, SinkId::Net(to)))
            || would_cycle(&arcs, from, to)
        {
            continue;
        }
        arcs.insert(GraphArc::new(from, SinkId::Net(to)));
    }

    // Build layer stacks now that provider sets are final.
    let input_dims: BTreeMap<InputId, usize> =
        problem.inputs.iter().map(|i| (i.id, i.dim)).collect();
    let emit = |plan: &BTreeMap<NetId, (usize, Option<usize>)>, src: SourceId| -> usize {
        match src {
            SourceId::Input(i) => input_dims[&i],
            SourceId::Net(n) => plan[&n].0,
        }
    };
    let mut nets_map: BTreeMap<NetId, SubNetwork> = BTreeMap::new();
    for (&id, &(emit_width, sampler)) in &plan {
        let in_dim: usize = arcs
            .iter()
            .filter(|a| a.to == SinkId::Net(id))
            .map(|a| emit(&plan, a.from))
            .sum();
        let raw_out = match sampler {
            Some(k) => 2 * k,
            None => emit_width,
        };
        let n_layers = rng.gen_range(1..=opts.max_layers.max(1));
        let mut dims = vec![in_dim];
        for _ in 0..n_layers - 1 {
            dims.push(*opts.hidden_widths.choose(&mut rng).unwrap_or(&8));
        }
        dims.push(raw_out);
        let mut layers = Vec::with_capacity(n_layers);
        for (li, w) in dims.windows(2).enumerate() {
            let act = if li + 1 == n_layers {
                Activation::Identity
            } else if rng.gen_bool(0.5) {
                Activation::ReLU
            } else {
                Activation::Sigmoid
            };
            layers.push(DenseLayer::glorot(w[0], w[1], act, &mut rng));
        }
        let mut net = SubNetwork::new(id, layers);
        net.sampler = sampler;
        nets_map.insert(id, net);
    }

    let model = ModelGraph {
        inputs: problem
            .inputs
            .iter()
            .map(|i| {
                (
                    i.id,
                    InputNode {
                        id: i.id,
                        feature_dim: i.dim,
                        role: i.role.clone(),
                    },
                )
            })
            .collect(),
        nets: nets_map,
        outputs: problem
            .outputs
            .iter()
            .map(|o| (o.id, OutputNode::new(o.id, o.dim, o.kind)))
            .collect(),
        arcs,
        losses: problem
            .outputs
            .iter()
            .map(|o| (o.id, default_loss(o.kind)))
            .collect(),
        training: TrainingConfig {
            batch_size: opts.batch_size,
            optimizers: problem
                .outputs
                .iter()
                .map(|o| (o.id, opts.optimizer))
                .collect(),
            seed: rng::derive(seed, &[tag::DATA_ORDER]),
        },
        opt_state: BTreeMap::new(),
    };
    debug_assert!(model.validate().is_empty(), "{:?}", model.validate());
    model
}

fn default_loss(kind: OutputKind) -> LossKind {
    kind.default_loss()
}

#[cfg(test)]
mod tests {
    use super::super::serialize;
    use super::*;

    #[test]
    fn three_output_problem_gets_three_to_six_nets() {
        let p = ProblemSpec::benchmark(4, 3);
        let range = p.default_size_range();
        assert_eq!(range, (3, 6));
        let mut seen = BTreeSet::new();
        for seed in 0..50 {
            let m = random_model(&p, range, seed);
            assert!(m.nets.len() >= 3 && m.nets.len() <= 6, "{}", m.nets.len());
            seen.insert(m.nets.len());
        }
        assert!(seen.len() > 1, "size range never varied");
    }

    #[test]
    fn generated_models_validate_across_many_seeds() {
        let p = ProblemSpec::benchmark(4, 3);
        for seed in 0..1000 {
            let m = random_model(&p, p.default_size_range(), seed);
            let v = m.validate();
            assert!(v.is_empty(), "seed {seed}: {v:?}");
        }
    }

    #[test]
    fn same_seed_means_identical_model() {
        let p = ProblemSpec::benchmark(5, 4);
        let a = random_model(&p, (4, 8), 42);
        let b = random_model(&p, (4, 8), 42);
        assert_eq!(serialize(&a), serialize(&b));
        let c = random_model(&p, (4, 8), 43);
        assert_ne!(serialize(&a), serialize(&c));
    }

    #[test]
    fn sampling_output_always_has_a_sampler_in_its_subgraph() {
        let p = ProblemSpec::benchmark(3, 2);
        for seed in 0..100 {
            let m = random_model(&p, (3, 6), seed);
            let sub = m.output_subgraph(OutputId(2)).unwrap();
            assert!(
                sub.nets.iter().any(|n| m.nets[n].sampler.is_some()),
                "seed {seed}"
            );
        }
    }
}
