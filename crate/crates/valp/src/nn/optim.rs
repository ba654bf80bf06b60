use super::NnError;

/// Stochastic-gradient flavors. Coefficients ride along with the kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum { .. } => "momentum",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

/// Which optimizer to run and at what learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerSpec {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            learning_rate,
        }
    }

    pub fn momentum(learning_rate: f64, beta: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Momentum { beta },
            learning_rate,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            learning_rate,
        }
    }

    /// learning_rate > 0 and every decay coefficient in [0, 1).
    pub fn check(&self) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(NnError::InvalidOptimizer(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        let check_beta = |b: f64| -> Result<(), NnError> {
            if (0.0..1.0).contains(&b) {
                Ok(())
            } else {
                Err(NnError::InvalidOptimizer(format!(
                    "decay coefficient {b} outside [0, 1)"
                )))
            }
        };
        match self.kind {
            OptimizerKind::Sgd => {}
            OptimizerKind::Momentum { beta } => check_beta(beta)?,
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                check_beta(beta1)?;
                check_beta(beta2)?;
                if !(epsilon > 0.0) {
                    return Err(NnError::InvalidOptimizer(format!(
                        "epsilon {epsilon} must be positive"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-parameter-tensor optimizer state: first/second moments and the
/// Adam step counter. Sized lazily on first use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl ParamState {
    fn ensure(&mut self, len: usize) {
        if self.m.len() != len {
            self.m = vec![0.0; len];
        }
        if self.v.len() != len {
            self.v = vec![0.0; len];
        }
    }
}

/// One update step over a flat parameter tensor.
///
/// SGD: p -= lr·g. Momentum: m = β·m + g; p -= lr·m.
/// Adam: standard bias-corrected recurrences.
pub fn optimizer_step(
    spec: &OptimizerSpec,
    params: &mut [f64],
    grads: &[f64],
    state: &mut ParamState,
) -> Result<(), NnError> {
    if params.len() != grads.len() {
        return Err(NnError::Shape {
            op: "optimizer_step",
            expected: format!("{} gradients", params.len()),
            got: format!("{}", grads.len()),
        });
    }
    let lr = spec.learning_rate;
    match spec.kind {
        OptimizerKind::Sgd => {
            for (p, &g) in params.iter_mut().zip(grads) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Momentum { beta } => {
            state.ensure(params.len());
            for ((p, &g), m) in params.iter_mut().zip(grads).zip(&mut state.m) {
                *m = beta * *m + g;
                *p -= lr * *m;
            }
        }
        OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } => {
            state.ensure(params.len());
            state.t += 1;
            let t = state.t as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            for (((p, &g), m), v) in params
                .iter_mut()
                .zip(grads)
                .zip(&mut state.m)
                .zip(&mut state.v)
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
    Ok(())
}
