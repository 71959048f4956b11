use crate::error::{Error, Result};

/// Boundary handling for spatial translation.
///
/// `ZeroFill` writes zeros into vacated positions and is the default for all
/// attack paths. `Circular` wraps indices modulo the spatial extent; it exists
/// so that shift-invariance checks can be exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ShiftMode {
    ZeroFill,
    Circular,
}

/// Dense numeric array in `(batch, channel, height, width)` layout,
/// row-major `f64`. The universal value type for images, gradients and
/// perturbations.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        let len = n * c * h * w;
        if data.len() != len {
            return Err(Error::ShapeMismatch {
                expected: vec![n, c, h, w],
                actual: vec![data.len()],
            });
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn full(n: usize, c: usize, h: usize, w: usize, value: f64) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] = value;
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            let (n, c, h, w) = self.shape();
            let (on, oc, oh, ow) = other.shape();
            return Err(Error::ShapeMismatch {
                expected: vec![n, c, h, w],
                actual: vec![on, oc, oh, ow],
            });
        }
        Ok(())
    }

    /// Extract item `i` of the batch as an `(1, c, h, w)` tensor.
    pub fn item(&self, i: usize) -> Tensor {
        assert!(i < self.n, "batch index {i} out of range {}", self.n);
        let stride = self.c * self.h * self.w;
        Tensor {
            n: 1,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data[i * stride..(i + 1) * stride].to_vec(),
        }
    }

    /// Overwrite item `i` of the batch with a `(1, c, h, w)` tensor.
    pub fn set_item(&mut self, i: usize, item: &Tensor) {
        assert!(i < self.n, "batch index {i} out of range {}", self.n);
        assert_eq!((1, self.c, self.h, self.w), item.shape());
        let stride = self.c * self.h * self.w;
        self.data[i * stride..(i + 1) * stride].copy_from_slice(&item.data);
    }

    /// Stack `(1, c, h, w)` items into one batch tensor.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let (_, c, h, w) = first.shape();
        let mut out = Tensor::zeros(items.len(), c, h, w);
        for (i, t) in items.iter().enumerate() {
            if t.shape() != (1, c, h, w) {
                return Err(Error::ShapeMismatch {
                    expected: vec![1, c, h, w],
                    actual: {
                        let (a, b, cc, d) = t.shape();
                        vec![a, b, cc, d]
                    },
                });
            }
            out.set_item(i, t);
        }
        Ok(out)
    }

    // ---- elementwise suite ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor { data, ..*self })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor { data, ..*self })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor { data, ..*self })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data.iter().map(|a| a * factor).collect();
        Tensor { data, ..*self }
    }

    /// In-place `self += factor * other`. Shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, factor: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data.iter().map(|a| a.clamp(lo, hi)).collect();
        Tensor { data, ..*self }
    }

    /// Componentwise sign: `>0 -> +1`, `<0 -> -1`, `0 -> 0`.
    pub fn sign(&self) -> Tensor {
        let data = self
            .data
            .iter()
            .map(|&a| {
                if a > 0.0 {
                    1.0
                } else if a < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        Tensor { data, ..*self }
    }

    // ---- norms over all elements ----

    pub fn l1(&self) -> f64 {
        self.data.iter().map(|a| a.abs()).sum()
    }

    pub fn l2(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn linf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// Translate by `i` rows and `j` columns: `out[a][b] = in[a - i][b - j]`.
    ///
    /// Out-of-range source positions read 0 (`ZeroFill`) or wrap (`Circular`).
    pub fn shift(&self, i: isize, j: isize, mode: ShiftMode) -> Result<Tensor> {
        let (h, w) = (self.h as isize, self.w as isize);
        if i.abs() >= h || j.abs() >= w {
            return Err(Error::invalid(format!(
                "shift ({i}, {j}) exceeds spatial extent ({h}, {w})"
            )));
        }
        let mut out = Tensor::zeros(self.n, self.c, self.h, self.w);
        for n in 0..self.n {
            for c in 0..self.c {
                for a in 0..h {
                    for b in 0..w {
                        let (sy, sx) = (a - i, b - j);
                        let v = match mode {
                            ShiftMode::ZeroFill => {
                                if sy < 0 || sy >= h || sx < 0 || sx >= w {
                                    0.0
                                } else {
                                    self.at(n, c, sy as usize, sx as usize)
                                }
                            }
                            ShiftMode::Circular => self.at(
                                n,
                                c,
                                sy.rem_euclid(h) as usize,
                                sx.rem_euclid(w) as usize,
                            ),
                        };
                        out.set(n, c, a as usize, b as usize, v);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Depthwise same-padding 2D cross-correlation with an odd-sided kernel.
    ///
    /// `out[y][x] = sum_{i,j in [-k, k]} K(i, j) * in[y + i][x + j]`, zero
    /// outside the image. The same kernel is applied to every channel.
    pub fn conv2d_same(&self, kernel: &KernelMatrix) -> Result<Tensor> {
        let k = kernel.half_width() as isize;
        let (h, w) = (self.h as isize, self.w as isize);
        if kernel.side() > self.h.min(self.w) {
            return Err(Error::invalid(format!(
                "kernel side {} exceeds spatial extent ({}, {})",
                kernel.side(),
                self.h,
                self.w
            )));
        }
        let mut out = Tensor::zeros(self.n, self.c, self.h, self.w);
        for n in 0..self.n {
            for c in 0..self.c {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for i in (-k).max(-y)..=k.min(h - 1 - y) {
                            for j in (-k).max(-x)..=k.min(w - 1 - x) {
                                acc += kernel.get(i, j)
                                    * self.at(n, c, (y + i) as usize, (x + j) as usize);
                            }
                        }
                        out.set(n, c, y as usize, x as usize, acc);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Nearest-neighbour resize: `src = floor(dst * orig / new)` per axis.
    pub fn resize_nearest(&self, new_h: usize, new_w: usize) -> Result<Tensor> {
        if new_h == 0 || new_w == 0 {
            return Err(Error::invalid("resize target must be at least 1x1"));
        }
        let mut out = Tensor::zeros(self.n, self.c, new_h, new_w);
        for n in 0..self.n {
            for c in 0..self.c {
                for y in 0..new_h {
                    let sy = y * self.h / new_h;
                    for x in 0..new_w {
                        let sx = x * self.w / new_w;
                        out.set(n, c, y, x, self.at(n, c, sy, sx));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Tensor::resize_nearest`]: scatter each gradient element
    /// back onto its source index, summing on collision. Exact transpose of
    /// the resize linear map.
    pub fn resize_nearest_adjoint(&self, orig_h: usize, orig_w: usize) -> Result<Tensor> {
        if orig_h == 0 || orig_w == 0 {
            return Err(Error::invalid("original size must be at least 1x1"));
        }
        let mut out = Tensor::zeros(self.n, self.c, orig_h, orig_w);
        for n in 0..self.n {
            for c in 0..self.c {
                for y in 0..self.h {
                    let sy = y * orig_h / self.h;
                    for x in 0..self.w {
                        let sx = x * orig_w / self.w;
                        let i = out.idx(n, c, sy, sx);
                        out.data[i] += self.at(n, c, y, x);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Largest absolute componentwise difference between two same-shaped tensors.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    a.data
        .iter()
        .zip(&b.data)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Odd-sided square weight matrix addressed centre-relative, used as a
/// convolution filter.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    side: usize,
    weights: Vec<f64>,
}

impl KernelMatrix {
    pub fn new(side: usize, weights: Vec<f64>) -> Result<Self> {
        if side == 0 || side % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel side must be odd and positive, got {side}"
            )));
        }
        if weights.len() != side * side {
            return Err(Error::ShapeMismatch {
                expected: vec![side, side],
                actual: vec![weights.len()],
            });
        }
        Ok(KernelMatrix { side, weights })
    }

    /// The 1x1 identity kernel.
    pub fn identity() -> Self {
        KernelMatrix {
            side: 1,
            weights: vec![1.0],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Half-width `k`; the kernel is `(2k+1) x (2k+1)`.
    pub fn half_width(&self) -> usize {
        (self.side - 1) / 2
    }

    /// Centre-relative access; `di`, `dj` in `[-k, k]`.
    #[inline]
    pub fn get(&self, di: isize, dj: isize) -> f64 {
        let k = self.half_width() as isize;
        debug_assert!(di.abs() <= k && dj.abs() <= k);
        self.weights[((di + k) as usize) * self.side + (dj + k) as usize]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// 180-degree rotation (the adjoint filter of cross-correlation).
    pub fn flipped(&self) -> KernelMatrix {
        let mut weights = self.weights.clone();
        weights.reverse();
        KernelMatrix {
            side: self.side,
            weights,
        }
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Brute-force filter: `sum_{i,j in [-k, k]} K(i, j) * shift(t, -i, -j, mode)`,
/// accumulated in fixed `(i, j)` order.
///
/// With `ZeroFill` this realises the same linear map as
/// [`Tensor::conv2d_same`] through an entirely different code path; with
/// `Circular` it is the circular-boundary variant used by the verification
/// oracle.
pub fn shift_sum_filter(t: &Tensor, kernel: &KernelMatrix, mode: ShiftMode) -> Result<Tensor> {
    let k = kernel.half_width() as isize;
    if kernel.side() > t.height().min(t.width()) {
        return Err(Error::invalid(format!(
            "kernel side {} exceeds spatial extent ({}, {})",
            kernel.side(),
            t.height(),
            t.width()
        )));
    }
    let (n, c, h, w) = t.shape();
    let mut acc = Tensor::zeros(n, c, h, w);
    for i in -k..=k {
        for j in -k..=k {
            let shifted = t.shift(-i, -j, mode)?;
            acc.add_scaled(&shifted, kernel.get(i, j))?;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2x2(vals: [f64; 4]) -> Tensor {
        Tensor::new(1, 1, 2, 2, vals.to_vec()).unwrap()
    }

    #[test]
    fn shift_zero_fill_moves_rows_down() {
        let t = t2x2([1.0, 2.0, 3.0, 4.0]);
        let s = t.shift(1, 0, ShiftMode::ZeroFill).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn shift_identity_is_bit_exact() {
        let t = t2x2([1.5, -2.25, 0.0, 4.0]);
        for mode in [ShiftMode::ZeroFill, ShiftMode::Circular] {
            assert_eq!(t.shift(0, 0, mode).unwrap().data(), t.data());
        }
    }

    #[test]
    fn shift_circular_wraps() {
        let t = t2x2([1.0, 2.0, 3.0, 4.0]);
        let s = t.shift(1, 0, ShiftMode::Circular).unwrap();
        assert_eq!(s.data(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn shift_rejects_out_of_range_magnitude() {
        let t = t2x2([1.0, 2.0, 3.0, 4.0]);
        assert!(t.shift(2, 0, ShiftMode::ZeroFill).is_err());
        assert!(t.shift(0, -2, ShiftMode::Circular).is_err());
    }

    #[test]
    fn conv_identity_kernel_is_bit_exact() {
        let t = t2x2([1.0, -2.0, 3.5, 4.0]);
        let out = t.conv2d_same(&KernelMatrix::identity()).unwrap();
        assert_eq!(out.data(), t.data());
    }

    #[test]
    fn conv_impulse_response_embeds_kernel() {
        // single 1 at the centre of a 5x5 image
        let mut t = Tensor::zeros(1, 1, 5, 5);
        t.set(0, 0, 2, 2, 1.0);
        let kernel =
            KernelMatrix::new(3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        let out = t.conv2d_same(&kernel).unwrap();
        // cross-correlation of an impulse yields the flipped kernel around it:
        // out[y][x] = K(2 - y, 2 - x)
        for di in -1..=1isize {
            for dj in -1..=1isize {
                let y = (2 + di) as usize;
                let x = (2 + dj) as usize;
                assert_eq!(out.at(0, 0, y, x), kernel.get(-di, -dj));
            }
        }
        assert_eq!(out.at(0, 0, 0, 0), 0.0);
        assert_eq!(out.at(0, 0, 4, 4), 0.0);
    }

    #[test]
    fn conv_rejects_even_kernel() {
        assert!(KernelMatrix::new(2, vec![0.25; 4]).is_err());
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let t = t2x2([1.0, 2.0, 3.0, 4.0]);
        let kernel = KernelMatrix::new(3, vec![1.0 / 9.0; 9]).unwrap();
        assert!(t.conv2d_same(&kernel).is_err());
    }

    #[test]
    fn sign_and_norm_basics() {
        let t = Tensor::new(1, 1, 1, 3, vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(t.sign().data(), &[-1.0, 0.0, 1.0]);
        let u = Tensor::new(1, 1, 1, 3, vec![1.0, -5.0, 2.0]).unwrap();
        assert_eq!(u.linf(), 5.0);
        let ones = Tensor::full(1, 1, 2, 2, 1.0);
        assert_eq!(ones.l1(), 4.0);
        assert_eq!(ones.l2(), 2.0);
    }

    #[test]
    fn elementwise_rejects_shape_mismatch() {
        let a = Tensor::zeros(1, 1, 2, 2);
        let b = Tensor::zeros(1, 1, 2, 3);
        assert!(a.add(&b).is_err());
        assert!(a.sub(&b).is_err());
        assert!(a.mul(&b).is_err());
        assert!(a.dot(&b).is_err());
    }

    #[test]
    fn resize_same_size_is_identity() {
        let t = t2x2([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.resize_nearest(2, 2).unwrap().data(), t.data());
    }

    #[test]
    fn resize_doubling_replicates_blocks() {
        let t = t2x2([1.0, 2.0, 3.0, 4.0]);
        let r = t.resize_nearest(4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(r.at(0, 0, y, x), t.at(0, 0, y / 2, x / 2));
            }
        }
    }

    #[test]
    fn resize_adjoint_of_ones_counts_replications() {
        // transpose of the 2x2 -> 4x4 replication matrix applied to all-ones:
        // every source pixel is hit 4 times.
        let g = Tensor::full(1, 1, 4, 4, 1.0);
        let a = g.resize_nearest_adjoint(2, 2).unwrap();
        assert_eq!(a.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn resize_adjoint_matches_explicit_matrix_transpose() {
        // Build the resize linear map as an explicit matrix and compare the
        // adjoint against the matrix transpose, entry by entry.
        let (oh, ow, nh, nw) = (3usize, 2usize, 4usize, 5usize);
        let src_dim = oh * ow;
        let dst_dim = nh * nw;
        let mut m = vec![vec![0.0; src_dim]; dst_dim];
        for (r, row) in m.iter_mut().enumerate() {
            let (y, x) = (r / nw, r % nw);
            let (sy, sx) = (y * oh / nh, x * ow / nw);
            row[sy * ow + sx] = 1.0;
        }
        let g_vals: Vec<f64> = (0..dst_dim).map(|i| (i as f64) * 0.37 - 1.0).collect();
        let g = Tensor::new(1, 1, nh, nw, g_vals.clone()).unwrap();
        let adj = g.resize_nearest_adjoint(oh, ow).unwrap();
        for s in 0..src_dim {
            let expected: f64 = (0..dst_dim).map(|d| m[d][s] * g_vals[d]).sum();
            assert!((adj.data()[s] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn stack_and_item_round_trip() {
        let a = t2x2([1.0, 2.0, 3.0, 4.0]);
        let b = t2x2([5.0, 6.0, 7.0, 8.0]);
        let batch = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(batch.shape(), (2, 1, 2, 2));
        assert_eq!(batch.item(0).data(), a.data());
        assert_eq!(batch.item(1).data(), b.data());
    }

    fn small_tensor() -> impl Strategy<Value = Tensor> {
        (1usize..3, 1usize..3, 3usize..9, 3usize..9)
            .prop_flat_map(|(n, c, h, w)| {
                proptest::collection::vec(-1.0f64..1.0, n * c * h * w)
                    .prop_map(move |data| Tensor::new(n, c, h, w, data).unwrap())
            })
    }

    fn small_kernel(max_k: usize) -> impl Strategy<Value = KernelMatrix> {
        (0usize..=max_k).prop_flat_map(|k| {
            let side = 2 * k + 1;
            proptest::collection::vec(-1.0f64..1.0, side * side)
                .prop_map(move |w| KernelMatrix::new(side, w).unwrap())
        })
    }

    proptest! {
        #[test]
        fn conv_matches_shift_and_sum_oracle(t in small_tensor(), kernel in small_kernel(1)) {
            let direct = t.conv2d_same(&kernel).unwrap();
            let oracle = shift_sum_filter(&t, &kernel, ShiftMode::ZeroFill).unwrap();
            prop_assert!(max_abs_diff(&direct, &oracle) < 1e-9);
        }

        #[test]
        fn circular_shift_round_trips_exactly(t in small_tensor(), i in -2isize..=2, j in -2isize..=2) {
            let back = t
                .shift(i, j, ShiftMode::Circular).unwrap()
                .shift(-i, -j, ShiftMode::Circular).unwrap();
            prop_assert_eq!(back.data(), t.data());
        }

        #[test]
        fn conv_adjoint_inner_product(t in small_tensor(), kernel in small_kernel(1)) {
            // <conv(a, K), b> == <a, conv(b, flip(K))>
            let (n, c, h, w) = t.shape();
            let b = Tensor::new(n, c, h, w,
                t.data().iter().map(|v| (v * 977.0).sin()).collect()).unwrap();
            let lhs = t.conv2d_same(&kernel).unwrap().dot(&b).unwrap();
            let rhs = t.dot(&b.conv2d_same(&kernel.flipped()).unwrap()).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn resize_adjoint_inner_product(t in small_tensor(), nh in 1usize..10, nw in 1usize..10) {
            // <resize(a), b> == <a, adjoint(b)> exactly (transpose pair)
            let (n, c, h, w) = t.shape();
            let r = t.resize_nearest(nh, nw).unwrap();
            let b = Tensor::new(n, c, nh, nw,
                (0..n * c * nh * nw).map(|i| ((i * 31 % 17) as f64) / 7.0 - 1.0).collect()).unwrap();
            let lhs = r.dot(&b).unwrap();
            let rhs = t.dot(&b.resize_nearest_adjoint(h, w).unwrap()).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn sign_and_clamp_are_idempotent(t in small_tensor()) {
            let s = t.sign();
            prop_assert_eq!(s.sign().data(), s.data());
            let c = t.clamp(-0.5, 0.5);
            prop_assert_eq!(c.clamp(-0.5, 0.5).data(), c.data());
        }
    }
}
