//! Differentiable classifiers with exact input gradients: a small trainable
//! CNN, an analytically shift-invariant linear model used by the verification
//! oracle, softmax cross-entropy, and logit-fused ensembles.

mod cnn;
mod data;
mod store;

pub use cnn::{train, TinyCnn, TrainOptions, TrainReport};
pub use data::{load_idx_dataset, LabeledDataset};
pub use store::{load_classifier, StoredModel};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-item rows of class scores, `items x num_classes`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    num_classes: usize,
    values: Vec<f64>,
}

impl Logits {
    pub fn new(num_classes: usize, values: Vec<f64>) -> Result<Self> {
        if num_classes == 0 || values.len() % num_classes != 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![num_classes],
                actual: vec![values.len()],
            });
        }
        Ok(Logits {
            num_classes,
            values,
        })
    }

    pub fn zeros(items: usize, num_classes: usize) -> Self {
        Logits {
            num_classes,
            values: vec![0.0; items * num_classes],
        }
    }

    pub fn items(&self) -> usize {
        self.values.len() / self.num_classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, item: usize) -> &[f64] {
        &self.values[item * self.num_classes..(item + 1) * self.num_classes]
    }

    pub fn row_mut(&mut self, item: usize) -> &mut [f64] {
        &mut self.values[item * self.num_classes..(item + 1) * self.num_classes]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Predicted class per item; ties broken by the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.items())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    pub fn scale(&self, factor: f64) -> Logits {
        Logits {
            num_classes: self.num_classes,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Logits) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// A differentiable classifier: forward logits plus the vector-Jacobian
/// product of the logits with respect to the input. Implementations are
/// immutable and safe to call concurrently.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    /// `(channels, height, width)` of a single input item.
    fn input_shape(&self) -> (usize, usize, usize);

    fn forward(&self, x: &Tensor) -> Result<Logits>;

    /// Given `dL/dlogits`, return `dL/dx` with the exact shape of `x`.
    fn input_grad_from_logit_grad(&self, x: &Tensor, dlogits: &Logits) -> Result<Tensor>;
}

pub(crate) fn check_input(model: &dyn Classifier, x: &Tensor) -> Result<()> {
    let (c, h, w) = model.input_shape();
    let (_, xc, xh, xw) = x.shape();
    if (xc, xh, xw) != (c, h, w) {
        return Err(Error::ShapeMismatch {
            expected: vec![c, h, w],
            actual: vec![xc, xh, xw],
        });
    }
    Ok(())
}

/// Softmax cross-entropy `-log softmax(logits)[y]` per item, together with
/// the gradient with respect to the logits (`softmax - onehot`).
pub fn softmax_cross_entropy(logits: &Logits, labels: &[usize]) -> Result<(Vec<f64>, Logits)> {
    if logits.items() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![logits.items()],
            actual: vec![labels.len()],
        });
    }
    let classes = logits.num_classes();
    let mut losses = Vec::with_capacity(labels.len());
    let mut grad = Logits::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        let zmax = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = row.iter().map(|&v| (v - zmax).exp()).collect();
        let denom: f64 = exps.iter().sum();
        losses.push(denom.ln() - (row[y] - zmax));
        let grow = grad.row_mut(i);
        for c in 0..classes {
            grow[c] = exps[c] / denom;
        }
        grow[y] -= 1.0;
    }
    Ok((losses, grad))
}

/// Cross-entropy loss per item and its exact gradient with respect to the
/// input. No parameter update occurs.
pub fn loss_and_input_grad(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
) -> Result<(Vec<f64>, Tensor)> {
    check_input(model, x)?;
    let logits = model.forward(x)?;
    let (losses, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let grad = model.input_grad_from_logit_grad(x, &dlogits)?;
    Ok((losses, grad))
}

/// Mean cross-entropy over a batch.
pub fn mean_loss(model: &dyn Classifier, x: &Tensor, labels: &[usize]) -> Result<f64> {
    check_input(model, x)?;
    let logits = model.forward(x)?;
    let (losses, _) = softmax_cross_entropy(&logits, labels)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Predicted class per batch item.
pub fn predict(model: &dyn Classifier, x: &Tensor) -> Result<Vec<usize>> {
    check_input(model, x)?;
    Ok(model.forward(x)?.argmax())
}

/// Fraction of items classified correctly.
pub fn accuracy(model: &dyn Classifier, data: &LabeledDataset) -> Result<f64> {
    let preds = predict(model, data.images())?;
    let correct = preds
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// A classifier whose logits depend on the input only through the sum of all
/// pixels: `logit_c(x) = u_c * sum(x) + b_c`.
///
/// The pixel sum is accumulated in a canonical (sorted) order, so circular
/// translation — a permutation of the pixels — leaves the logits bit-exactly
/// unchanged. Its input gradient is spatially constant. This makes the model
/// an exact instrument for the gradient-translation identity that real CNNs
/// only satisfy approximately.
#[derive(Debug, Clone)]
pub struct LinearSumModel {
    input_shape: (usize, usize, usize),
    class_weights: Vec<f64>,
    class_biases: Vec<f64>,
}

impl LinearSumModel {
    pub fn new(
        input_shape: (usize, usize, usize),
        class_weights: Vec<f64>,
        class_biases: Vec<f64>,
    ) -> Result<Self> {
        if class_weights.is_empty() || class_weights.len() != class_biases.len() {
            return Err(Error::invalid(
                "class weights and biases must be non-empty and the same length",
            ));
        }
        Ok(LinearSumModel {
            input_shape,
            class_weights,
            class_biases,
        })
    }

    /// All-zero weights and biases: uniform softmax, zero gradient.
    pub fn zeros(input_shape: (usize, usize, usize), num_classes: usize) -> Self {
        LinearSumModel {
            input_shape,
            class_weights: vec![0.0; num_classes],
            class_biases: vec![0.0; num_classes],
        }
    }

    pub fn class_weights(&self) -> &[f64] {
        &self.class_weights
    }

    pub fn class_biases(&self) -> &[f64] {
        &self.class_biases
    }

    fn canonical_pixel_sum(item: &[f64]) -> f64 {
        let mut vals = item.to_vec();
        vals.sort_by(f64::total_cmp);
        vals.iter().sum()
    }
}

impl Classifier for LinearSumModel {
    fn num_classes(&self) -> usize {
        self.class_weights.len()
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    fn forward(&self, x: &Tensor) -> Result<Logits> {
        check_input(self, x)?;
        let per_item = x.channels() * x.height() * x.width();
        let mut values = Vec::with_capacity(x.batch() * self.num_classes());
        for i in 0..x.batch() {
            let sum = Self::canonical_pixel_sum(&x.data()[i * per_item..(i + 1) * per_item]);
            for (u, b) in self.class_weights.iter().zip(&self.class_biases) {
                values.push(u * sum + b);
            }
        }
        Logits::new(self.num_classes(), values)
    }

    fn input_grad_from_logit_grad(&self, x: &Tensor, dlogits: &Logits) -> Result<Tensor> {
        check_input(self, x)?;
        let (n, c, h, w) = x.shape();
        let per_item = c * h * w;
        let mut grad = Tensor::zeros(n, c, h, w);
        for i in 0..n {
            let row = dlogits.row(i);
            let g: f64 = row
                .iter()
                .zip(&self.class_weights)
                .map(|(d, u)| d * u)
                .sum();
            grad.data_mut()[i * per_item..(i + 1) * per_item].fill(g);
        }
        Ok(grad)
    }
}

/// Logit-level ensemble: forward returns the weighted sum of member logits,
/// and the input gradient is the matching weighted sum of member gradients.
pub struct FusedClassifier {
    members: Vec<Arc<dyn Classifier>>,
    weights: Vec<f64>,
}

/// Fuse the logit activations of several classifiers with the given weights
/// (which must sum to 1). All members must agree on class count and input
/// shape.
pub fn fuse_logits(
    members: Vec<Arc<dyn Classifier>>,
    weights: Vec<f64>,
) -> Result<FusedClassifier> {
    if members.is_empty() || members.len() != weights.len() {
        return Err(Error::invalid(
            "ensemble needs a weight for each of at least one member",
        ));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "ensemble weights must sum to 1, got {sum}"
        )));
    }
    let classes = members[0].num_classes();
    let shape = members[0].input_shape();
    for m in &members[1..] {
        if m.num_classes() != classes || m.input_shape() != shape {
            return Err(Error::invalid(
                "ensemble members must share class count and input shape",
            ));
        }
    }
    Ok(FusedClassifier { members, weights })
}

impl Classifier for FusedClassifier {
    fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.members[0].input_shape()
    }

    fn forward(&self, x: &Tensor) -> Result<Logits> {
        let mut fused = Logits::zeros(x.batch(), self.num_classes());
        for (member, &w) in self.members.iter().zip(&self.weights) {
            fused.add_assign(&member.forward(x)?.scale(w));
        }
        Ok(fused)
    }

    fn input_grad_from_logit_grad(&self, x: &Tensor, dlogits: &Logits) -> Result<Tensor> {
        let (n, c, h, w) = x.shape();
        let mut grad = Tensor::zeros(n, c, h, w);
        for (member, &w) in self.members.iter().zip(&self.weights) {
            let g = member.input_grad_from_logit_grad(x, &dlogits.scale(w))?;
            grad.add_scaled(&g, 1.0)?;
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ShiftMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(seed: u64, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(n, c, h, w, data).unwrap()
    }

    #[test]
    fn zero_linear_model_gives_uniform_softmax() {
        let model = LinearSumModel::zeros((1, 4, 4), 10);
        let x = random_tensor(1, 3, 1, 4, 4);
        let (losses, grad) = loss_and_input_grad(&model, &x, &[0, 5, 9]).unwrap();
        for j in losses {
            assert!((j - (10.0f64).ln()).abs() < 1e-12);
        }
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_model_gradient_is_spatially_constant() {
        let model =
            LinearSumModel::new((1, 4, 4), vec![0.3, -0.2, 0.1], vec![0.0, 0.5, -0.5]).unwrap();
        let x = random_tensor(2, 2, 1, 4, 4);
        let (_, grad) = loss_and_input_grad(&model, &x, &[0, 2]).unwrap();
        for i in 0..2 {
            let item = grad.item(i);
            let first = item.data()[0];
            assert!(item.data().iter().all(|&g| g == first));
        }
    }

    #[test]
    fn linear_model_loss_is_exactly_circular_shift_invariant() {
        let model =
            LinearSumModel::new((1, 28, 28), vec![0.7, -0.4, 0.15], vec![0.1, 0.0, -0.2]).unwrap();
        let x = random_tensor(3, 2, 1, 28, 28);
        let labels = [0usize, 1, 2];
        let (base, _) = loss_and_input_grad(&model, &x, &labels).unwrap();
        for (i, j) in [(1, 2), (-7, 10), (10, -10), (-10, -10), (5, 0)] {
            let shifted = x.shift(i, j, ShiftMode::Circular).unwrap();
            let (moved, _) = loss_and_input_grad(&model, &shifted, &labels).unwrap();
            for (a, b) in base.iter().zip(&moved) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero() {
        let logits = Logits::new(4, vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let (losses, grad) = softmax_cross_entropy(&logits, &[3, 0]).unwrap();
        assert!(losses.iter().all(|&j| j >= 0.0));
        for i in 0..2 {
            let s: f64 = grad.row(i).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Logits::new(3, vec![0.0, 0.0, 0.0]).unwrap();
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        let logits = Logits::new(3, vec![1.0, 1.0, 0.0, -2.0, -2.0, -2.0]).unwrap();
        assert_eq!(logits.argmax(), vec![0, 0]);
    }

    #[test]
    fn single_member_ensemble_is_identity() {
        let model: Arc<dyn Classifier> = Arc::new(
            LinearSumModel::new((1, 3, 3), vec![0.5, -0.5], vec![0.0, 0.1]).unwrap(),
        );
        let fused = fuse_logits(vec![model.clone()], vec![1.0]).unwrap();
        let x = random_tensor(7, 2, 1, 3, 3);
        let y = [0usize, 1, 0, 1, 0, 1, 0];
        let (j1, g1) = loss_and_input_grad(model.as_ref(), &x, &y).unwrap();
        let (j2, g2) = loss_and_input_grad(&fused, &x, &y).unwrap();
        assert_eq!(j1, j2);
        assert_eq!(g1.data(), g2.data());
    }

    #[test]
    fn duplicated_member_ensemble_matches_single_copy() {
        let model: Arc<dyn Classifier> = Arc::new(
            LinearSumModel::new((1, 3, 3), vec![0.5, -0.5], vec![0.0, 0.1]).unwrap(),
        );
        let fused = fuse_logits(vec![model.clone(), model.clone()], vec![0.5, 0.5]).unwrap();
        let x = random_tensor(8, 1, 1, 3, 3);
        let y = [1usize; 1];
        let (j1, g1) = loss_and_input_grad(model.as_ref(), &x.item(0), &y).unwrap();
        let (j2, g2) = loss_and_input_grad(&fused, &x.item(0), &y).unwrap();
        assert!((j1[0] - j2[0]).abs() < 1e-15);
        assert!(crate::tensor::max_abs_diff(&g1, &g2) < 1e-15);
    }

    #[test]
    fn ensemble_rejects_mismatched_members() {
        let a: Arc<dyn Classifier> =
            Arc::new(LinearSumModel::new((1, 3, 3), vec![0.5, -0.5], vec![0.0; 2]).unwrap());
        let b: Arc<dyn Classifier> =
            Arc::new(LinearSumModel::new((1, 4, 4), vec![0.5, -0.5], vec![0.0; 2]).unwrap());
        assert!(fuse_logits(vec![a.clone(), b], vec![0.5, 0.5]).is_err());
        assert!(fuse_logits(vec![a], vec![0.7]).is_err());
    }
}
