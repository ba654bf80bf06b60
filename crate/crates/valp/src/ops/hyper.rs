//! Hyperparameter operators: change_lr, change_sgd, change_bs.
//! All gentle by definition: weights are never touched.

use super::{guard, GuardError, OpError, OpParams, OperatorDescriptor, OperatorKind, Target};
use crate::graph::{ModelGraph, OutputId};
use crate::nn::OptimizerSpec;

fn output_target(op: &OperatorDescriptor) -> Result<OutputId, GuardError> {
    match op.target {
        Target::Output(o) => Ok(o),
        _ => Err(guard(op, "target must be a model output")),
    }
}

pub(crate) fn check_hyper(model: &ModelGraph, op: &OperatorDescriptor) -> Result<(), GuardError> {
    match op.kind {
        OperatorKind::ChangeLearningRate => {
            let o = output_target(op)?;
            if !model.outputs.contains_key(&o) {
                return Err(guard(op, format!("unknown output {o}")));
            }
            match op.params {
                OpParams::ChangeLearningRate { new_lr } => {
                    if !(new_lr > 0.0) || !new_lr.is_finite() {
                        return Err(guard(op, format!("learning rate {new_lr} must be positive")));
                    }
                }
                _ => return Err(guard(op, "missing learning-rate parameter")),
            }
        }
        OperatorKind::ChangeOptimizer => {
            let o = output_target(op)?;
            if !model.outputs.contains_key(&o) {
                return Err(guard(op, format!("unknown output {o}")));
            }
            let OpParams::ChangeOptimizer { new_kind } = op.params else {
                return Err(guard(op, "missing optimizer parameter"));
            };
            let lr = model
                .training
                .optimizers
                .get(&o)
                .map_or(1e-3, |s| s.learning_rate);
            let spec = OptimizerSpec {
                kind: new_kind,
                learning_rate: lr,
            };
            if let Err(e) = spec.check() {
                return Err(guard(op, e.to_string()));
            }
        }
        OperatorKind::ChangeBatchSize => {
            if op.target != Target::Model {
                return Err(guard(op, "batch size is a model-level setting"));
            }
            match op.params {
                OpParams::ChangeBatchSize { new_bs } => {
                    if new_bs == 0 {
                        return Err(guard(op, "batch size must be at least 1"));
                    }
                }
                _ => return Err(guard(op, "missing batch-size parameter")),
            }
        }
        _ => unreachable!("not a hyperparameter operator"),
    }
    Ok(())
}

pub(crate) fn apply_hyper(
    model: &ModelGraph,
    op: &OperatorDescriptor,
) -> Result<ModelGraph, OpError> {
    let mut out = model.clone();
    match (op.kind, &op.params) {
        (OperatorKind::ChangeLearningRate, OpParams::ChangeLearningRate { new_lr }) => {
            let o = output_target(op)?;
            if let Some(spec) = out.training.optimizers.get_mut(&o) {
                spec.learning_rate = *new_lr;
            }
        }
        (OperatorKind::ChangeOptimizer, OpParams::ChangeOptimizer { new_kind }) => {
            let o = output_target(op)?;
            if let Some(spec) = out.training.optimizers.get_mut(&o) {
                spec.kind = *new_kind;
            }
            // Switching algorithms starts from fresh moment state for every
            // net this output governs.
            let governed: Vec<_> = out
                .nets
                .keys()
                .copied()
                .filter(|&n| out.governing_output(n) == Some(o))
                .collect();
            for n in governed {
                out.opt_state.remove(&n);
            }
        }
        (OperatorKind::ChangeBatchSize, OpParams::ChangeBatchSize { new_bs }) => {
            out.training.batch_size = *new_bs;
        }
        _ => unreachable!("guard checked"),
    }
    Ok(out)
}
