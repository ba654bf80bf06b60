use super::{Matrix, NnError};

/// Probabilities are clamped to [PROB_CLAMP, 1 - PROB_CLAMP] before logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Loss families attached to model outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    MeanSquaredError,
    /// Reconstruction MSE plus KL(N(mu, sigma^2) || N(0, 1)) from the
    /// sampling component in the output's subgraph.
    ReconstructionPlusKL,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::MeanSquaredError => "mse",
            LossKind::ReconstructionPlusKL => "recon_kl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "cross_entropy" => LossKind::CrossEntropy,
            "mse" => LossKind::MeanSquaredError,
            "recon_kl" => LossKind::ReconstructionPlusKL,
            _ => return None,
        })
    }
}

fn check_shapes(op: &'static str, a: &Matrix, b: &Matrix) -> Result<(), NnError> {
    if a.shape() != b.shape() {
        return Err(NnError::Shape {
            op,
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

/// Mean over all entries of the squared difference.
pub fn mse(prediction: &Matrix, target: &Matrix) -> Result<f64, NnError> {
    check_shapes("mse", prediction, target)?;
    prediction.mean_sq_diff(target)
}

pub fn mse_grad(prediction: &Matrix, target: &Matrix) -> Result<Matrix, NnError> {
    check_shapes("mse_grad", prediction, target)?;
    let n = (prediction.rows() * prediction.cols()) as f64;
    let mut out = prediction.clone();
    for (g, &t) in out.data_mut().iter_mut().zip(target.data()) {
        *g = 2.0 * (*g - t) / n;
    }
    Ok(out)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean over rows of -Σ_j t_j ln(p_j) with one-hot target rows.
pub fn cross_entropy(prediction: &Matrix, target: &Matrix) -> Result<f64, NnError> {
    check_shapes("cross_entropy", prediction, target)?;
    let mut total = 0.0;
    for (p, &t) in prediction.data().iter().zip(target.data()) {
        if t != 0.0 {
            total -= t * clamp_prob(*p).ln();
        }
    }
    Ok(total / prediction.rows() as f64)
}

pub fn cross_entropy_grad(prediction: &Matrix, target: &Matrix) -> Result<Matrix, NnError> {
    check_shapes("cross_entropy_grad", prediction, target)?;
    let rows = prediction.rows() as f64;
    let mut out = Matrix::zeros(prediction.rows(), prediction.cols());
    for ((g, &p), &t) in out
        .data_mut()
        .iter_mut()
        .zip(prediction.data())
        .zip(target.data())
    {
        if t != 0.0 {
            *g = -t / clamp_prob(p) / rows;
        }
    }
    Ok(out)
}

/// Mean over rows of 0.5 Σ_k (mu^2 + sigma^2 - 1 - log sigma^2).
/// Zero exactly when mu = 0 and log sigma^2 = 0.
pub fn kl_standard_normal(mu: &Matrix, log_var: &Matrix) -> Result<f64, NnError> {
    check_shapes("kl", mu, log_var)?;
    let mut total = 0.0;
    for (&m, &lv) in mu.data().iter().zip(log_var.data()) {
        total += 0.5 * (m * m + lv.exp() - 1.0 - lv);
    }
    Ok(total / mu.rows() as f64)
}

/// Gradients of the mean KL with respect to (mu, log_var).
pub fn kl_grads(mu: &Matrix, log_var: &Matrix) -> Result<(Matrix, Matrix), NnError> {
    check_shapes("kl_grads", mu, log_var)?;
    let rows = mu.rows() as f64;
    let d_mu = mu.map(|m| m / rows);
    let d_log_var = log_var.map(|lv| 0.5 * (lv.exp() - 1.0) / rows);
    Ok((d_mu, d_log_var))
}

/// Scalar loss for one output. `latent` supplies the sampling component's
/// (mu, log_var) and is required for [`LossKind::ReconstructionPlusKL`].
pub fn loss_value(
    kind: LossKind,
    prediction: &Matrix,
    target: &Matrix,
    latent: Option<(&Matrix, &Matrix)>,
) -> Result<f64, NnError> {
    match kind {
        LossKind::CrossEntropy => cross_entropy(prediction, target),
        LossKind::MeanSquaredError => mse(prediction, target),
        LossKind::ReconstructionPlusKL => {
            let (mu, log_var) = latent.ok_or(NnError::MissingLatent)?;
            Ok(mse(prediction, target)? + kl_standard_normal(mu, log_var)?)
        }
    }
}
