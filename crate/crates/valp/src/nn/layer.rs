use super::{Matrix, NnError};
use rand::Rng;

/// Layer activation. Softmax is reserved for terminal classification
/// surfaces; it never appears inside a sub-network's hidden stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    ReLU,
    Sigmoid,
    Softmax,
}

impl Activation {
    /// Output is guaranteed nonnegative for any input.
    pub fn nonneg_output(self) -> bool {
        matches!(
            self,
            Activation::ReLU | Activation::Sigmoid | Activation::Softmax
        )
    }

    /// act(c·x) == c·act(x) for c > 0. Holds for Identity and ReLU; this is
    /// what makes the 0.5-factor clone morphism exact.
    pub fn positively_homogeneous(self) -> bool {
        matches!(self, Activation::Identity | Activation::ReLU)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::ReLU => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "identity" => Activation::Identity,
            "relu" => Activation::ReLU,
            "sigmoid" => Activation::Sigmoid,
            "softmax" => Activation::Softmax,
            _ => return None,
        })
    }

    /// Apply in place. Softmax normalizes each row with the max-subtraction
    /// trick, so rows sum to 1 and entries stay in (0, 1).
    pub fn apply(self, m: &mut Matrix) {
        match self {
            Activation::Identity => {}
            Activation::ReLU => {
                for v in m.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Activation::Sigmoid => {
                for v in m.data_mut() {
                    *v = 1.0 / (1.0 + (-*v).exp());
                }
            }
            Activation::Softmax => {
                for r in 0..m.rows() {
                    let row = m.row_mut(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
            }
        }
    }

    /// Given d(loss)/d(post-activation) and the cached pre/post values,
    /// return d(loss)/d(pre-activation).
    pub fn backward(self, pre: &Matrix, post: &Matrix, upstream: &Matrix) -> Matrix {
        match self {
            Activation::Identity => upstream.clone(),
            Activation::ReLU => {
                let mut out = upstream.clone();
                for (g, &p) in out.data_mut().iter_mut().zip(pre.data()) {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                }
                out
            }
            Activation::Sigmoid => {
                let mut out = upstream.clone();
                for (g, &y) in out.data_mut().iter_mut().zip(post.data()) {
                    *g *= y * (1.0 - y);
                }
                out
            }
            Activation::Softmax => {
                // Row-wise Jacobian-vector product:
                // d_pre_i = y_i (g_i - Σ_j g_j y_j)
                let mut out = Matrix::zeros(upstream.rows(), upstream.cols());
                for r in 0..upstream.rows() {
                    let g = upstream.row(r);
                    let y = post.row(r);
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for c in 0..upstream.cols() {
                        out.set(r, c, y[c] * (g[c] - dot));
                    }
                }
                out
            }
        }
    }
}

/// Glorot-uniform matrix: U(-l, l) with l = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let mut m = Matrix::zeros(in_dim, out_dim);
    for v in m.data_mut() {
        *v = rng.gen_range(-limit..limit);
    }
    m
}

/// One dense layer: `out = activation(input · weights + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix, // in_dim x out_dim
    pub bias: Vec<f64>,  // out_dim
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Self {
        assert_eq!(weights.cols(), bias.len(), "bias length != weight columns");
        DenseLayer {
            weights,
            bias,
            activation,
        }
    }

    pub fn glorot<R: Rng>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        DenseLayer::new(
            glorot_uniform(in_dim, out_dim, rng),
            vec![0.0; out_dim],
            activation,
        )
    }

    /// Identity-initialized square layer (gentle insertions).
    pub fn identity_layer(dim: usize, activation: Activation) -> Self {
        DenseLayer::new(Matrix::identity(dim), vec![0.0; dim], activation)
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.in_dim() * self.out_dim() + self.bias.len()
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix, NnError> {
        if input.cols() != self.in_dim() {
            return Err(NnError::Shape {
                op: "layer forward",
                expected: format!("{} input columns", self.in_dim()),
                got: format!("{}", input.cols()),
            });
        }
        let mut pre = input.matmul(&self.weights)?;
        pre.add_row_broadcast(&self.bias)?;
        self.activation.apply(&mut pre);
        Ok(pre)
    }

    fn forward_cached(&self, input: &Matrix) -> Result<LayerCache, NnError> {
        if input.cols() != self.in_dim() {
            return Err(NnError::Shape {
                op: "layer forward",
                expected: format!("{} input columns", self.in_dim()),
                got: format!("{}", input.cols()),
            });
        }
        let mut pre = input.matmul(&self.weights)?;
        pre.add_row_broadcast(&self.bias)?;
        let mut post = pre.clone();
        self.activation.apply(&mut post);
        Ok(LayerCache { pre, post })
    }
}

/// Pre- and post-activation values cached for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub pre: Matrix,
    pub post: Matrix,
}

/// Parameter gradients for one layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_weights: Matrix,
    pub d_bias: Vec<f64>,
}

/// Forward through a layer stack, returning the output and per-layer caches.
pub fn forward_layers(
    layers: &[DenseLayer],
    input: &Matrix,
) -> Result<(Matrix, Vec<LayerCache>), NnError> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = input.clone();
    for layer in layers {
        let cache = layer.forward_cached(&cur)?;
        cur = cache.post.clone();
        caches.push(cache);
    }
    Ok((cur, caches))
}

/// Analytic backward through a layer stack.
///
/// `upstream` is d(loss)/d(stack output). Returns per-layer parameter
/// gradients and d(loss)/d(input); the input gradient is what lets
/// gradients cross sub-network boundaries in a model DAG.
pub fn backward_layers(
    layers: &[DenseLayer],
    input: &Matrix,
    caches: &[LayerCache],
    upstream: &Matrix,
) -> Result<(Vec<LayerGrads>, Matrix), NnError> {
    assert_eq!(layers.len(), caches.len(), "cache/layer length mismatch");
    if upstream.shape() != caches.last().map_or(input.shape(), |c| c.post.shape()) {
        return Err(NnError::Shape {
            op: "backward_layers",
            expected: format!("{:?}", caches.last().map_or(input.shape(), |c| c.post.shape())),
            got: format!("{:?}", upstream.shape()),
        });
    }
    let mut grads = vec![
        LayerGrads {
            d_weights: Matrix::zeros(0, 0),
            d_bias: Vec::new(),
        };
        layers.len()
    ];
    let mut up = upstream.clone();
    for i in (0..layers.len()).rev() {
        let layer = &layers[i];
        let cache = &caches[i];
        let layer_input = if i == 0 { input } else { &caches[i - 1].post };
        let d_pre = layer.activation.backward(&cache.pre, &cache.post, &up);
        let d_weights = layer_input.tr_matmul(&d_pre)?;
        let mut d_bias = vec![0.0; layer.out_dim()];
        for r in 0..d_pre.rows() {
            for (b, &g) in d_bias.iter_mut().zip(d_pre.row(r)) {
                *b += g;
            }
        }
        up = d_pre.matmul_tr(&layer.weights)?;
        grads[i] = LayerGrads { d_weights, d_bias };
    }
    Ok((grads, up))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mse, mse_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_through() {
        let layer = DenseLayer::identity_layer(2, Activation::Identity);
        let input = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let out = layer.forward(&input).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_clips_negative_preactivation() {
        // W = [[1], [-1]], b = [0]: input [1, 3] -> 1 - 3 = -2 -> 0.
        let layer = DenseLayer::new(
            Matrix::from_rows(&[vec![1.0], vec![-1.0]]),
            vec![0.0],
            Activation::ReLU,
        );
        let out = layer
            .forward(&Matrix::from_rows(&[vec![1.0, 3.0]]))
            .unwrap();
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = DenseLayer::glorot(4, 5, Activation::Softmax, &mut rng);
        let input = glorot_uniform(3, 4, &mut rng);
        let out = layer.forward(&input).unwrap();
        for r in 0..out.rows() {
            let sum: f64 = out.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "row sum {sum}");
            assert!(out.row(r).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn forward_dimension_mismatch_is_an_error() {
        let layer = DenseLayer::identity_layer(2, Activation::Identity);
        assert!(layer.forward(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn identity_layer_mse_at_target_has_zero_gradients() {
        let layers = vec![DenseLayer::identity_layer(3, Activation::Identity)];
        let input = Matrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.0, 0.0, -3.0]]);
        let (out, caches) = forward_layers(&layers, &input).unwrap();
        let target = out.clone();
        assert_eq!(mse(&out, &target).unwrap(), 0.0);
        let up = mse_grad(&out, &target).unwrap();
        let (grads, d_input) = backward_layers(&layers, &input, &caches, &up).unwrap();
        assert!(grads[0].d_weights.data().iter().all(|&g| g == 0.0));
        assert!(grads[0].d_bias.iter().all(|&g| g == 0.0));
        assert!(d_input.data().iter().all(|&g| g == 0.0));
    }

    /// Central finite differences over every parameter and input entry.
    /// The independent oracle for the analytic backward pass.
    fn finite_difference_check(layers: &mut Vec<DenseLayer>, input: &Matrix, target: &Matrix) {
        let h = 1e-5;
        let loss_of = |layers: &[DenseLayer], input: &Matrix| -> f64 {
            let (out, _) = forward_layers(layers, input).unwrap();
            mse(&out, target).unwrap()
        };
        let (out, caches) = forward_layers(layers, input).unwrap();
        let up = mse_grad(&out, target).unwrap();
        let (grads, d_input) = backward_layers(layers, input, &caches, &up).unwrap();

        let compare = |analytic: f64, numeric: f64, what: &str| {
            if analytic.abs() < 1e-8 {
                assert!(
                    (analytic - numeric).abs() < 1e-6,
                    "{what}: analytic {analytic} vs numeric {numeric}"
                );
            } else {
                let rel = ((analytic - numeric) / analytic).abs();
                assert!(
                    rel < 1e-4,
                    "{what}: analytic {analytic} vs numeric {numeric} (rel {rel})"
                );
            }
        };

        for li in 0..layers.len() {
            for idx in 0..layers[li].weights.data().len() {
                let orig = layers[li].weights.data()[idx];
                layers[li].weights.data_mut()[idx] = orig + h;
                let up_l = loss_of(layers, input);
                layers[li].weights.data_mut()[idx] = orig - h;
                let down = loss_of(layers, input);
                layers[li].weights.data_mut()[idx] = orig;
                compare(
                    grads[li].d_weights.data()[idx],
                    (up_l - down) / (2.0 * h),
                    &format!("layer {li} weight {idx}"),
                );
            }
            for bi in 0..layers[li].bias.len() {
                let orig = layers[li].bias[bi];
                layers[li].bias[bi] = orig + h;
                let up_l = loss_of(layers, input);
                layers[li].bias[bi] = orig - h;
                let down = loss_of(layers, input);
                layers[li].bias[bi] = orig;
                compare(
                    grads[li].d_bias[bi],
                    (up_l - down) / (2.0 * h),
                    &format!("layer {li} bias {bi}"),
                );
            }
        }
        let mut input = input.clone();
        for idx in 0..input.data().len() {
            let orig = input.data()[idx];
            input.data_mut()[idx] = orig + h;
            let up_l = loss_of(layers, &input);
            input.data_mut()[idx] = orig - h;
            let down = loss_of(layers, &input);
            input.data_mut()[idx] = orig;
            compare(
                d_input.data()[idx],
                (up_l - down) / (2.0 * h),
                &format!("input {idx}"),
            );
        }
    }

    #[test]
    fn two_layer_relu_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut layers = vec![
            DenseLayer::glorot(4, 6, Activation::ReLU, &mut rng),
            DenseLayer::glorot(6, 2, Activation::Identity, &mut rng),
        ];
        let input = glorot_uniform(3, 4, &mut rng);
        let target = glorot_uniform(3, 2, &mut rng);
        finite_difference_check(&mut layers, &input, &target);
    }

    #[test]
    fn softmax_cross_entropy_preactivation_gradient_is_probs_minus_onehot() {
        // Closed-form identity on a 3-class case: with L = mean row CE,
        // d L / d pre = (p - t) / rows.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = DenseLayer::glorot(5, 3, Activation::Softmax, &mut rng);
        let input = glorot_uniform(4, 5, &mut rng);
        let target = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ]);
        let cache = layer.forward_cached(&input).unwrap();
        let up = crate::nn::cross_entropy_grad(&cache.post, &target).unwrap();
        let d_pre = layer.activation.backward(&cache.pre, &cache.post, &up);
        for r in 0..4 {
            for c in 0..3 {
                let expected = (cache.post.get(r, c) - target.get(r, c)) / 4.0;
                assert!(
                    (d_pre.get(r, c) - expected).abs() < 1e-12,
                    "entry ({r},{c}): {} vs {}",
                    d_pre.get(r, c),
                    expected
                );
            }
        }
    }
}
