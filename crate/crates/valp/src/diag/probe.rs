//! Dependency probes: fit a linear readout from a component's emitted
//! representation to an output's target and report the probe's loss.
//! Lower scores mean the representation carries more of what the output
//! needs; callers compare a component's score against its predecessor's.

use super::DiagError;
use crate::graph::{
    forward_model_traced, ComponentId, ModelGraph, NoiseKey, OutputId, OutputKind, ProblemData,
};
use crate::nn::{cross_entropy, Activation, Matrix};
use std::collections::BTreeMap;

const RIDGE_LAMBDA: f64 = 1e-3;
const LOGISTIC_STEPS: usize = 300;
const LOGISTIC_LR: f64 = 0.05;
const LOGISTIC_DECAY: f64 = 1e-3;

/// Solve A·X = B by Gaussian elimination with partial pivoting.
/// A is square (n x n), B is (n x k).
fn solve(a: &mut Matrix, b: &mut Matrix) -> Result<(), DiagError> {
    let n = a.rows();
    assert_eq!(a.cols(), n);
    assert_eq!(b.rows(), n);
    let k = b.cols();
    for col in 0..n {
        let mut pivot = col;
        let mut best = a.get(col, col).abs();
        for r in col + 1..n {
            let v = a.get(r, col).abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best < 1e-300 {
            return Err(DiagError::SingularProbe);
        }
        if pivot != col {
            for c in 0..n {
                let tmp = a.get(col, c);
                a.set(col, c, a.get(pivot, c));
                a.set(pivot, c, tmp);
            }
            for c in 0..k {
                let tmp = b.get(col, c);
                b.set(col, c, b.get(pivot, c));
                b.set(pivot, c, tmp);
            }
        }
        let d = a.get(col, col);
        for r in col + 1..n {
            let f = a.get(r, col) / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a.set(r, c, a.get(r, c) - f * a.get(col, c));
            }
            for c in 0..k {
                b.set(r, c, b.get(r, c) - f * b.get(col, c));
            }
        }
    }
    for col in (0..n).rev() {
        let d = a.get(col, col);
        for c in 0..k {
            let mut v = b.get(col, c);
            for j in col + 1..n {
                v -= a.get(col, j) * b.get(j, c);
            }
            b.set(col, c, v / d);
        }
    }
    Ok(())
}

/// Ridge least squares with an unregularized intercept; returns the
/// in-sample MSE of the fitted readout.
pub(crate) fn ridge_probe(features: &Matrix, target: &Matrix) -> Result<f64, DiagError> {
    let n = features.rows();
    let d = features.cols() + 1; // intercept column
    let mut design = Matrix::zeros(n, d);
    for r in 0..n {
        design.row_mut(r)[..features.cols()].copy_from_slice(features.row(r));
        design.set(r, d - 1, 1.0);
    }
    let mut gram = design.tr_matmul(&design)?;
    for i in 0..d - 1 {
        gram.set(i, i, gram.get(i, i) + RIDGE_LAMBDA);
    }
    let mut rhs = design.tr_matmul(target)?;
    solve(&mut gram, &mut rhs)?;
    let pred = design.matmul(&rhs)?;
    Ok(pred.mean_sq_diff(target)?)
}

/// Multinomial logistic probe trained by full-batch Adam; returns the
/// in-sample mean cross-entropy.
pub(crate) fn logistic_probe(features: &Matrix, target: &Matrix) -> Result<f64, DiagError> {
    let (n, d) = features.shape();
    let k = target.cols();
    let mut weights = Matrix::zeros(d, k);
    let mut bias = vec![0.0; k];
    let mut mw = vec![0.0; d * k];
    let mut vw = vec![0.0; d * k];
    let mut mb = vec![0.0; k];
    let mut vb = vec![0.0; k];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    for t in 1..=LOGISTIC_STEPS {
        let mut logits = features.matmul(&weights)?;
        logits.add_row_broadcast(&bias)?;
        Activation::Softmax.apply(&mut logits);
        // d CE/d logits = (p - t)/n, plus L2 on the weights.
        let mut delta = logits;
        for (dv, &tv) in delta.data_mut().iter_mut().zip(target.data()) {
            *dv = (*dv - tv) / n as f64;
        }
        let gw = features.tr_matmul(&delta)?;
        let mut gb = vec![0.0; k];
        for r in 0..n {
            for (g, &v) in gb.iter_mut().zip(delta.row(r)) {
                *g += v;
            }
        }
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for (i, w) in weights.data_mut().iter_mut().enumerate() {
            let g = gw.data()[i] + LOGISTIC_DECAY * *w;
            mw[i] = b1 * mw[i] + (1.0 - b1) * g;
            vw[i] = b2 * vw[i] + (1.0 - b2) * g * g;
            *w -= LOGISTIC_LR * (mw[i] / bc1) / ((vw[i] / bc2).sqrt() + eps);
        }
        for i in 0..k {
            mb[i] = b1 * mb[i] + (1.0 - b1) * gb[i];
            vb[i] = b2 * vb[i] + (1.0 - b2) * gb[i] * gb[i];
            bias[i] -= LOGISTIC_LR * (mb[i] / bc1) / ((vb[i] / bc2).sqrt() + eps);
        }
    }
    let mut logits = features.matmul(&weights)?;
    logits.add_row_broadcast(&bias)?;
    Activation::Softmax.apply(&mut logits);
    Ok(cross_entropy(&logits, target)?)
}

/// Fit a linear probe from `component`'s emitted representation to
/// `output`'s target over the given rows and return the probe loss
/// (cross-entropy for classification targets, MSE otherwise).
pub fn dependency_probe(
    model: &ModelGraph,
    component: ComponentId,
    output: OutputId,
    data: &ProblemData,
    rows: &[usize],
) -> Result<f64, DiagError> {
    let sub = model.output_subgraph(output)?;
    let connected = match component {
        ComponentId::Input(i) => sub.inputs.contains(&i),
        ComponentId::Net(n) => sub.nets.contains(&n),
        ComponentId::Output(_) => false,
    };
    if !connected {
        return Err(DiagError::NotConnected { component, output });
    }
    let (inputs, targets) = data.gather(rows);
    let features = match component {
        ComponentId::Input(i) => inputs[&i].clone(),
        ComponentId::Net(n) => {
            let trace = forward_model_traced(model, &inputs, NoiseKey::Eval)?;
            trace.nodes[&n].emitted.clone()
        }
        ComponentId::Output(_) => unreachable!(),
    };
    let target = &targets[&output];
    match model.outputs[&output].kind {
        OutputKind::Classification => logistic_probe(&features, target),
        OutputKind::Regression | OutputKind::Sampling => ridge_probe(&features, target),
    }
}

/// Probe scores for every connected (component, output) pair.
pub(crate) fn probe_all(
    model: &ModelGraph,
    data: &ProblemData,
    rows: &[usize],
) -> Result<BTreeMap<(ComponentId, OutputId), f64>, DiagError> {
    let mut scores = BTreeMap::new();
    let (inputs, targets) = data.gather(rows);
    let trace = forward_model_traced(model, &inputs, NoiseKey::Eval)?;
    for (&o, out) in &model.outputs {
        let sub = model.output_subgraph(o)?;
        let target = &targets[&o];
        let mut components: Vec<(ComponentId, &Matrix)> = Vec::new();
        for &i in &sub.inputs {
            components.push((ComponentId::Input(i), &inputs[&i]));
        }
        for &n in &sub.nets {
            components.push((ComponentId::Net(n), &trace.nodes[&n].emitted));
        }
        for (c, features) in components {
            let score = match out.kind {
                OutputKind::Classification => logistic_probe(features, target)?,
                _ => ridge_probe(features, target)?,
            };
            scores.insert((c, o), score);
        }
    }
    Ok(scores)
}
