//! A small trainable CNN with exact, hand-written backpropagation.
//!
//! Pipeline: 3x3 conv (8 filters, pad 1) -> tanh -> 2x2 average pool ->
//! 3x3 conv (16 filters, pad 1) -> tanh -> 2x2 average pool -> dense (-> 64)
//! -> tanh -> dense (-> classes). All layers are smooth, which keeps central
//! finite differences honest, and average pooling stands in for max pooling
//! so the loss stays differentiable everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{softmax_cross_entropy, Classifier, LabeledDataset, Logits};
use crate::tensor::{ShiftMode, Tensor};

pub(crate) const CONV1_FILTERS: usize = 8;
pub(crate) const CONV2_FILTERS: usize = 16;
pub(crate) const HIDDEN_UNITS: usize = 64;

#[derive(Debug, Clone)]
pub struct TinyCnn {
    in_c: usize,
    h: usize,
    w: usize,
    num_classes: usize,
    pub(crate) conv1_w: Vec<f64>,
    pub(crate) conv1_b: Vec<f64>,
    pub(crate) conv2_w: Vec<f64>,
    pub(crate) conv2_b: Vec<f64>,
    pub(crate) fc1_w: Vec<f64>,
    pub(crate) fc1_b: Vec<f64>,
    pub(crate) fc2_w: Vec<f64>,
    pub(crate) fc2_b: Vec<f64>,
}

impl TinyCnn {
    /// Fresh model with Glorot-uniform weights (`+-sqrt(6/(fan_in+fan_out))`)
    /// and zero biases, deterministic in `seed`.
    pub fn new(input_shape: (usize, usize, usize), num_classes: usize, seed: u64) -> Result<Self> {
        let (in_c, h, w) = input_shape;
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "input height and width must be positive multiples of 4, got {h}x{w}"
            )));
        }
        if num_classes == 0 || in_c == 0 {
            return Err(Error::invalid("need at least one channel and one class"));
        }
        let flat = CONV2_FILTERS * (h / 4) * (w / 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |count: usize, fan_in: usize, fan_out: usize| -> Vec<f64> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..count).map(|_| rng.gen_range(-limit..limit)).collect()
        };
        Ok(TinyCnn {
            in_c,
            h,
            w,
            num_classes,
            conv1_w: glorot(CONV1_FILTERS * in_c * 9, in_c * 9, CONV1_FILTERS * 9),
            conv1_b: vec![0.0; CONV1_FILTERS],
            conv2_w: glorot(
                CONV2_FILTERS * CONV1_FILTERS * 9,
                CONV1_FILTERS * 9,
                CONV2_FILTERS * 9,
            ),
            conv2_b: vec![0.0; CONV2_FILTERS],
            fc1_w: glorot(HIDDEN_UNITS * flat, flat, HIDDEN_UNITS),
            fc1_b: vec![0.0; HIDDEN_UNITS],
            fc2_w: glorot(num_classes * HIDDEN_UNITS, HIDDEN_UNITS, num_classes),
            fc2_b: vec![0.0; num_classes],
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.conv1_w.len()
            + self.conv1_b.len()
            + self.conv2_w.len()
            + self.conv2_b.len()
            + self.fc1_w.len()
            + self.fc1_b.len()
            + self.fc2_w.len()
            + self.fc2_b.len()
    }

    fn flat_features(&self) -> usize {
        CONV2_FILTERS * (self.h / 4) * (self.w / 4)
    }

    fn forward_cached(&self, x: &Tensor) -> Cache {
        let n = x.batch();
        let (h, w) = (self.h, self.w);
        let (h2, w2) = (h / 2, w / 2);
        let flat = self.flat_features();
        let mut cache = Cache::new(n, self, flat);
        for item in 0..n {
            let input = &x.data()[item * self.in_c * h * w..(item + 1) * self.in_c * h * w];
            let a1 = &mut cache.a1[item * CONV1_FILTERS * h * w..(item + 1) * CONV1_FILTERS * h * w];
            conv3x3_forward(input, self.in_c, h, w, &self.conv1_w, &self.conv1_b, CONV1_FILTERS, a1);
            tanh_inplace(a1);

            let p1 =
                &mut cache.p1[item * CONV1_FILTERS * h2 * w2..(item + 1) * CONV1_FILTERS * h2 * w2];
            avgpool2_forward(a1, CONV1_FILTERS, h, w, p1);

            let a2 =
                &mut cache.a2[item * CONV2_FILTERS * h2 * w2..(item + 1) * CONV2_FILTERS * h2 * w2];
            conv3x3_forward(p1, CONV1_FILTERS, h2, w2, &self.conv2_w, &self.conv2_b, CONV2_FILTERS, a2);
            tanh_inplace(a2);

            let p2 = &mut cache.p2[item * flat..(item + 1) * flat];
            avgpool2_forward(a2, CONV2_FILTERS, h2, w2, p2);

            let h1 = &mut cache.h1[item * HIDDEN_UNITS..(item + 1) * HIDDEN_UNITS];
            dense_forward(p2, &self.fc1_w, &self.fc1_b, h1);
            tanh_inplace(h1);

            let out = &mut cache.logits[item * self.num_classes..(item + 1) * self.num_classes];
            dense_forward(h1, &self.fc2_w, &self.fc2_b, out);
        }
        cache
    }

    /// Backward pass from `dlogits` to the input, optionally accumulating
    /// parameter gradients.
    fn backward(
        &self,
        x: &Tensor,
        cache: &Cache,
        dlogits: &Logits,
        mut grads: Option<&mut ParamGrads>,
    ) -> Tensor {
        let n = x.batch();
        let (h, w) = (self.h, self.w);
        let (h2, w2) = (h / 2, w / 2);
        let flat = self.flat_features();
        let mut dx = Tensor::zeros(n, self.in_c, h, w);
        for item in 0..n {
            let dl = dlogits.row(item);
            let h1 = &cache.h1[item * HIDDEN_UNITS..(item + 1) * HIDDEN_UNITS];
            let p2 = &cache.p2[item * flat..(item + 1) * flat];
            let a2 = &cache.a2[item * CONV2_FILTERS * h2 * w2..(item + 1) * CONV2_FILTERS * h2 * w2];
            let p1 = &cache.p1[item * CONV1_FILTERS * h2 * w2..(item + 1) * CONV1_FILTERS * h2 * w2];
            let a1 = &cache.a1[item * CONV1_FILTERS * h * w..(item + 1) * CONV1_FILTERS * h * w];
            let input = &x.data()[item * self.in_c * h * w..(item + 1) * self.in_c * h * w];

            // dense head
            let mut dh1 = vec![0.0; HIDDEN_UNITS];
            dense_backward_input(dl, &self.fc2_w, &mut dh1);
            if let Some(g) = grads.as_deref_mut() {
                dense_backward_params(dl, h1, &mut g.fc2_w, &mut g.fc2_b);
            }
            tanh_backward_inplace(&mut dh1, h1);

            let mut dp2 = vec![0.0; flat];
            dense_backward_input(&dh1, &self.fc1_w, &mut dp2);
            if let Some(g) = grads.as_deref_mut() {
                dense_backward_params(&dh1, p2, &mut g.fc1_w, &mut g.fc1_b);
            }

            // second conv block
            let mut da2 = vec![0.0; CONV2_FILTERS * h2 * w2];
            avgpool2_backward(&dp2, CONV2_FILTERS, h2, w2, &mut da2);
            tanh_backward_inplace(&mut da2, a2);

            let mut dp1 = vec![0.0; CONV1_FILTERS * h2 * w2];
            conv3x3_backward_input(&da2, CONV2_FILTERS, h2, w2, &self.conv2_w, CONV1_FILTERS, &mut dp1);
            if let Some(g) = grads.as_deref_mut() {
                conv3x3_backward_params(p1, CONV1_FILTERS, &da2, CONV2_FILTERS, h2, w2, &mut g.conv2_w, &mut g.conv2_b);
            }

            // first conv block
            let mut da1 = vec![0.0; CONV1_FILTERS * h * w];
            avgpool2_backward(&dp1, CONV1_FILTERS, h, w, &mut da1);
            tanh_backward_inplace(&mut da1, a1);

            let dx_item = &mut dx.data_mut()[item * self.in_c * h * w..(item + 1) * self.in_c * h * w];
            conv3x3_backward_input(&da1, CONV1_FILTERS, h, w, &self.conv1_w, self.in_c, dx_item);
            if let Some(g) = grads.as_deref_mut() {
                conv3x3_backward_params(input, self.in_c, &da1, CONV1_FILTERS, h, w, &mut g.conv1_w, &mut g.conv1_b);
            }
        }
        dx
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }
}

impl Classifier for TinyCnn {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (self.in_c, self.h, self.w)
    }

    fn forward(&self, x: &Tensor) -> Result<Logits> {
        crate::models::check_input(self, x)?;
        let cache = self.forward_cached(x);
        Logits::new(self.num_classes, cache.logits)
    }

    fn input_grad_from_logit_grad(&self, x: &Tensor, dlogits: &Logits) -> Result<Tensor> {
        crate::models::check_input(self, x)?;
        let cache = self.forward_cached(x);
        Ok(self.backward(x, &cache, dlogits, None))
    }
}

struct Cache {
    a1: Vec<f64>,
    p1: Vec<f64>,
    a2: Vec<f64>,
    p2: Vec<f64>,
    h1: Vec<f64>,
    logits: Vec<f64>,
}

impl Cache {
    fn new(n: usize, model: &TinyCnn, flat: usize) -> Cache {
        let (h, w) = (model.h, model.w);
        let (h2, w2) = (h / 2, w / 2);
        Cache {
            a1: vec![0.0; n * CONV1_FILTERS * h * w],
            p1: vec![0.0; n * CONV1_FILTERS * h2 * w2],
            a2: vec![0.0; n * CONV2_FILTERS * h2 * w2],
            p2: vec![0.0; n * flat],
            h1: vec![0.0; n * HIDDEN_UNITS],
            logits: vec![0.0; n * model.num_classes],
        }
    }
}

pub(crate) struct ParamGrads {
    conv1_w: Vec<f64>,
    conv1_b: Vec<f64>,
    conv2_w: Vec<f64>,
    conv2_b: Vec<f64>,
    fc1_w: Vec<f64>,
    fc1_b: Vec<f64>,
    fc2_w: Vec<f64>,
    fc2_b: Vec<f64>,
}

impl ParamGrads {
    fn zeros_like(model: &TinyCnn) -> ParamGrads {
        ParamGrads {
            conv1_w: vec![0.0; model.conv1_w.len()],
            conv1_b: vec![0.0; model.conv1_b.len()],
            conv2_w: vec![0.0; model.conv2_w.len()],
            conv2_b: vec![0.0; model.conv2_b.len()],
            fc1_w: vec![0.0; model.fc1_w.len()],
            fc1_b: vec![0.0; model.fc1_b.len()],
            fc2_w: vec![0.0; model.fc2_w.len()],
            fc2_b: vec![0.0; model.fc2_b.len()],
        }
    }

    fn as_slices(&self) -> [&Vec<f64>; 8] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }
}

#[inline]
fn tanh_inplace(values: &mut [f64]) {
    for v in values {
        *v = v.tanh();
    }
}

/// Multiply an upstream gradient by tanh' = 1 - tanh^2, given the
/// post-activation values.
#[inline]
fn tanh_backward_inplace(dvalues: &mut [f64], activated: &[f64]) {
    for (d, a) in dvalues.iter_mut().zip(activated) {
        *d *= 1.0 - a * a;
    }
}

/// 3x3 same-padding cross-correlation for one item, all channels.
/// `weights` is `(out_c, in_c, 3, 3)` row-major, `out` starts as garbage.
fn conv3x3_forward(
    input: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    out_c: usize,
    out: &mut [f64],
) {
    for oc in 0..out_c {
        out[oc * h * w..(oc + 1) * h * w].fill(bias[oc]);
    }
    for oc in 0..out_c {
        let out_plane = &mut out[oc * h * w..(oc + 1) * h * w];
        for ic in 0..in_c {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            for ky in 0..3usize {
                let (y0, y1) = row_range(ky, h);
                for kx in 0..3usize {
                    let (x0, x1) = row_range(kx, w);
                    if x0 >= x1 {
                        continue;
                    }
                    let wv = weights[((oc * in_c + ic) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let src = (y + ky - 1) * w + x0 + kx - 1;
                        let dst = y * w + x0;
                        let count = x1 - x0;
                        let (srow, drow) = (&in_plane[src..src + count], &mut out_plane[dst..dst + count]);
                        for i in 0..count {
                            drow[i] += wv * srow[i];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the convolution input (transpose of the forward
/// map). `dinput` must be zero-filled by the caller.
fn conv3x3_backward_input(
    dout: &[f64],
    out_c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    in_c: usize,
    dinput: &mut [f64],
) {
    for ic in 0..in_c {
        let din_plane = &mut dinput[ic * h * w..(ic + 1) * h * w];
        for oc in 0..out_c {
            let dout_plane = &dout[oc * h * w..(oc + 1) * h * w];
            for ky in 0..3usize {
                let (y0, y1) = row_range(ky, h);
                for kx in 0..3usize {
                    let (x0, x1) = row_range(kx, w);
                    if x0 >= x1 {
                        continue;
                    }
                    let wv = weights[((oc * in_c + ic) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let src = y * w + x0;
                        let dst = (y + ky - 1) * w + x0 + kx - 1;
                        let count = x1 - x0;
                        let (srow, drow) =
                            (&dout_plane[src..src + count], &mut din_plane[dst..dst + count]);
                        for i in 0..count {
                            drow[i] += wv * srow[i];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulate weight and bias gradients for one item.
fn conv3x3_backward_params(
    input: &[f64],
    in_c: usize,
    dout: &[f64],
    out_c: usize,
    h: usize,
    w: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    for oc in 0..out_c {
        let dout_plane = &dout[oc * h * w..(oc + 1) * h * w];
        db[oc] += dout_plane.iter().sum::<f64>();
        for ic in 0..in_c {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            for ky in 0..3usize {
                let (y0, y1) = row_range(ky, h);
                for kx in 0..3usize {
                    let (x0, x1) = row_range(kx, w);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src = (y + ky - 1) * w + x0 + kx - 1;
                        let dst = y * w + x0;
                        let count = x1 - x0;
                        let (srow, drow) = (&in_plane[src..src + count], &dout_plane[dst..dst + count]);
                        for i in 0..count {
                            acc += srow[i] * drow[i];
                        }
                    }
                    dw[((oc * in_c + ic) * 3 + ky) * 3 + kx] += acc;
                }
            }
        }
    }
}

/// Destination rows/cols that keep `pos + k - 1` inside `[0, extent)`.
#[inline]
fn row_range(k: usize, extent: usize) -> (usize, usize) {
    match k {
        0 => (1, extent),
        1 => (0, extent),
        _ => (0, extent - 1),
    }
}

fn avgpool2_forward(input: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (h2, w2) = (h / 2, w / 2);
    for ch in 0..c {
        let in_plane = &input[ch * h * w..(ch + 1) * h * w];
        let out_plane = &mut out[ch * h2 * w2..(ch + 1) * h2 * w2];
        for y in 0..h2 {
            for x in 0..w2 {
                let base = 2 * y * w + 2 * x;
                out_plane[y * w2 + x] =
                    0.25 * (in_plane[base] + in_plane[base + 1] + in_plane[base + w] + in_plane[base + w + 1]);
            }
        }
    }
}

fn avgpool2_backward(dout: &[f64], c: usize, h: usize, w: usize, dinput: &mut [f64]) {
    let (h2, w2) = (h / 2, w / 2);
    for ch in 0..c {
        let dout_plane = &dout[ch * h2 * w2..(ch + 1) * h2 * w2];
        let din_plane = &mut dinput[ch * h * w..(ch + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                let g = 0.25 * dout_plane[y * w2 + x];
                let base = 2 * y * w + 2 * x;
                din_plane[base] += g;
                din_plane[base + 1] += g;
                din_plane[base + w] += g;
                din_plane[base + w + 1] += g;
            }
        }
    }
}

/// `out[r] = b[r] + sum_i w[r][i] * input[i]`.
fn dense_forward(input: &[f64], weights: &[f64], bias: &[f64], out: &mut [f64]) {
    let in_dim = input.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &weights[r * in_dim..(r + 1) * in_dim];
        let mut acc = bias[r];
        for i in 0..in_dim {
            acc += row[i] * input[i];
        }
        *o = acc;
    }
}

fn dense_backward_input(dout: &[f64], weights: &[f64], dinput: &mut [f64]) {
    let in_dim = dinput.len();
    for (r, &d) in dout.iter().enumerate() {
        let row = &weights[r * in_dim..(r + 1) * in_dim];
        for i in 0..in_dim {
            dinput[i] += d * row[i];
        }
    }
}

fn dense_backward_params(dout: &[f64], input: &[f64], dw: &mut [f64], db: &mut [f64]) {
    let in_dim = input.len();
    for (r, &d) in dout.iter().enumerate() {
        db[r] += d;
        let row = &mut dw[r * in_dim..(r + 1) * in_dim];
        for i in 0..in_dim {
            row[i] += d * input[i];
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Maximal random translation (pixels) applied per batch, zero-fill;
    /// 0 disables augmentation.
    pub shift_augment: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            learning_rate: 0.2,
            batch_size: 128,
            seed: 1,
            shift_augment: 0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainReport {
    pub epoch_mean_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Plain SGD with a fixed learning rate, deterministic in
/// `TrainOptions::seed` (which drives shuffling and augmentation only; the
/// model carries its own init seed).
pub fn train(
    model: &mut TinyCnn,
    data: &LabeledDataset,
    test: Option<&LabeledDataset>,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if opts.learning_rate <= 0.0 {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_mean_losses = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        // Fisher-Yates shuffle
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let items: Vec<Tensor> = chunk.iter().map(|&i| data.images().item(i)).collect();
            let mut batch = Tensor::stack(&items)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            if opts.shift_augment > 0 {
                let s = opts.shift_augment as isize;
                let di = rng.gen_range(-s..=s);
                let dj = rng.gen_range(-s..=s);
                batch = batch.shift(di, dj, ShiftMode::ZeroFill)?;
            }
            let cache = model.forward_cached(&batch);
            let logits = Logits::new(model.num_classes, cache.logits.clone())?;
            let (losses, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            let batch_loss: f64 = losses.iter().sum::<f64>() / losses.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += batch_loss * losses.len() as f64;
            seen += losses.len();

            // mean loss over the batch
            let dlogits = dlogits.scale(1.0 / losses.len() as f64);
            let mut grads = ParamGrads::zeros_like(model);
            model.backward(&batch, &cache, &dlogits, Some(&mut grads));
            let lr = opts.learning_rate;
            for (param, grad) in model.params_mut().into_iter().zip(grads.as_slices()) {
                for (p, g) in param.iter_mut().zip(grad.iter()) {
                    *p -= lr * g;
                }
            }
        }
        epoch_mean_losses.push(loss_sum / seen.max(1) as f64);
    }

    let train_accuracy = crate::models::accuracy(model, data)?;
    let test_accuracy = match test {
        Some(t) => Some(crate::models::accuracy(model, t)?),
        None => None,
    };
    Ok(TrainReport {
        epoch_mean_losses,
        train_accuracy,
        test_accuracy,
    })
}
