//! Differentiable building blocks. Activations are laid out channels × time.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// 1-D convolution over time with "same" zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// out_channels × in_channels × kernel
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
    pub dilation: usize,
}

impl Conv1d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, dilation: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd for same padding");
        Self {
            weight: Array3::zeros((out_ch, in_ch, kernel)),
            bias: Array1::zeros(out_ch),
            dilation,
        }
    }

    pub fn he_init<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, dilation: usize, rng: &mut R) -> Self {
        let mut conv = Self::zeros(in_ch, out_ch, kernel, dilation);
        fill_he(conv.weight.as_slice_mut().unwrap(), in_ch * kernel, rng);
        conv
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    fn flat_weight(&self) -> ArrayView2<'_, f64> {
        let (o, i, k) = self.weight.dim();
        self.weight.view().into_shape_with_order((o, i * k)).unwrap()
    }

    fn pad(&self) -> isize {
        (self.dilation * (self.kernel() - 1) / 2) as isize
    }

    /// Unfolds the input into `(in * kernel) × T` columns.
    fn im2col(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let (c, t_len) = x.dim();
        let k = self.kernel();
        if k == 1 {
            return x.to_owned();
        }
        let pad = self.pad();
        let mut cols = Array2::zeros((c * k, t_len));
        for i in 0..c {
            for j in 0..k {
                let shift = (j * self.dilation) as isize - pad;
                let (lo, hi) = valid_range(shift, t_len);
                if lo < hi {
                    let src = x.slice(s![i, (lo as isize + shift) as usize..(hi as isize + shift) as usize]);
                    cols.slice_mut(s![i * k + j, lo..hi]).assign(&src);
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, channels: usize) -> Array2<f64> {
        let k = self.kernel();
        if k == 1 {
            return cols.clone();
        }
        let t_len = cols.ncols();
        let pad = self.pad();
        let mut dx = Array2::zeros((channels, t_len));
        for i in 0..channels {
            for j in 0..k {
                let shift = (j * self.dilation) as isize - pad;
                let (lo, hi) = valid_range(shift, t_len);
                if lo < hi {
                    let src = cols.slice(s![i * k + j, lo..hi]);
                    let mut dst = dx.slice_mut(s![i, (lo as isize + shift) as usize..(hi as isize + shift) as usize]);
                    dst += &src;
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let cols = self.im2col(x);
        let mut y = self.flat_weight().dot(&cols);
        y += &self.bias.view().insert_axis(Axis(1));
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, x: ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Conv1d) -> Array2<f64> {
        let cols = self.im2col(x);
        let (o, i, k) = self.weight.dim();
        {
            let mut gw = grad.weight.view_mut().into_shape_with_order((o, i * k)).unwrap();
            gw += &dy.dot(&cols.t());
        }
        grad.bias += &dy.sum_axis(Axis(1));
        let dcols = self.flat_weight().t().dot(dy);
        self.col2im(&dcols, i)
    }
}

/// Output positions `t` for which `t + shift` lies inside `[0, len)`.
fn valid_range(shift: isize, len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(len), hi)
}

/// Fully connected layer on a vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out × in
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn he_init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut d = Self::zeros(in_dim, out_dim);
        fill_he(d.weight.as_slice_mut().unwrap(), in_dim, rng);
        d
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    pub fn backward(&self, x: ArrayView1<f64>, dy: &Array1<f64>, grad: &mut Dense) -> Array1<f64> {
        let outer = dy
            .view()
            .insert_axis(Axis(1))
            .dot(&x.insert_axis(Axis(0)));
        grad.weight += &outer;
        grad.bias += dy;
        self.weight.t().dot(dy)
    }
}

/// Normal weights with standard deviation `sqrt(2 / fan_in)`.
pub fn fill_he<R: Rng>(weights: &mut [f64], fan_in: usize, rng: &mut R) {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    for w in weights {
        *w = normal.sample(rng);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu_inplace<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` where the pre-activation was not positive.
pub fn relu_backward<D: ndarray::Dimension>(
    grad: &mut ndarray::Array<f64, D>,
    pre: &ndarray::Array<f64, D>,
) {
    ndarray::Zip::from(grad).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv1d, x: &Array2<f64>) -> Array2<f64> {
        let (o, i_ch, k) = conv.weight.dim();
        let t_len = x.ncols();
        let pad = conv.pad();
        Array2::from_shape_fn((o, t_len), |(oc, t)| {
            let mut acc = conv.bias[oc];
            for ic in 0..i_ch {
                for j in 0..k {
                    let src = t as isize + (j * conv.dilation) as isize - pad;
                    if src >= 0 && (src as usize) < t_len {
                        acc += conv.weight[[oc, ic, j]] * x[[ic, src as usize]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (k, d) in [(1, 1), (3, 1), (3, 2), (5, 1)] {
            let conv = Conv1d::he_init(3, 4, k, d, &mut rng);
            let x = Array2::from_shape_fn((3, 9), |_| rng.random_range(-1.0..1.0));
            let fast = conv.forward(x.view());
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let conv = Conv1d::he_init(2, 3, 3, 2, &mut rng);
        let x = Array2::from_shape_fn((2, 7), |_| rng.random_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((3, 7), |_| rng.random_range(-1.0..1.0));
        let loss = |c: &Conv1d, x: &Array2<f64>| (c.forward(x.view()) * &probe).sum();

        let mut grad = Conv1d::zeros(2, 3, 3, 2);
        let dx = conv.backward(x.view(), &probe, &mut grad);
        let h = 1e-6;
        for idx in [[0, 0, 0], [1, 1, 2], [2, 0, 1]] {
            let mut p = conv.clone();
            p.weight[idx] += h;
            let mut m = conv.clone();
            m.weight[idx] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grad.weight[idx]).abs() < 1e-7);
        }
        for idx in [[0, 0], [1, 3], [0, 6]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
