//! Single-level orthonormal Haar transform and the WTConv block.
//!
//! Subband convention, for each 2×2 block `[[a, b], [c, d]]`:
//!
//! | band | value             | responds to                               |
//! |------|-------------------|-------------------------------------------|
//! | LL   | `(a + b + c + d)/2` | local mean                                |
//! | LH   | `(a + b - c - d)/2` | row-to-row change (horizontal edges, vertical frequency) |
//! | HL   | `(a - b + c - d)/2` | column-to-column change (vertical edges)  |
//! | HH   | `(a - b - c + d)/2` | diagonal detail                           |

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{kernels, ConvSpec, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Subbands {
    pub ll: Array2<f32>,
    pub lh: Array2<f32>,
    pub hl: Array2<f32>,
    pub hh: Array2<f32>,
}

impl Subbands {
    pub fn dim(&self) -> (usize, usize) {
        self.ll.dim()
    }

    fn bands(&self) -> [&Array2<f32>; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    /// `‖ll‖² + ‖lh‖² + ‖hl‖² + ‖hh‖²`.
    pub fn energy(&self) -> f64 {
        self.bands()
            .iter()
            .flat_map(|b| b.iter())
            .map(|&v| (v as f64).powi(2))
            .sum()
    }
}

fn grid_to_tensor(x: &Array2<f32>) -> Tensor {
    let (h, w) = x.dim();
    Tensor::from_vec([1, 1, h, w], x.iter().copied().collect())
}

pub fn dwt2(x: &Array2<f32>) -> Result<Subbands> {
    let (h, w) = x.dim();
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("dwt2 needs even, non-empty sides, got {h}x{w}")));
    }
    let s = kernels::haar_forward(&grid_to_tensor(x));
    let (h2, w2) = (h / 2, w / 2);
    let band = |k: usize| {
        Array2::from_shape_vec((h2, w2), s.data()[k * h2 * w2..(k + 1) * h2 * w2].to_vec())
            .expect("band length")
    };
    Ok(Subbands {
        ll: band(0),
        lh: band(1),
        hl: band(2),
        hh: band(3),
    })
}

pub fn idwt2(s: &Subbands) -> Result<Array2<f32>> {
    let dim = s.dim();
    if s.bands().iter().any(|b| b.dim() != dim) {
        let dims: Vec<_> = s.bands().iter().map(|b| b.dim()).collect();
        return Err(Error::invalid(format!("subband shapes differ: {dims:?}")));
    }
    let (h2, w2) = dim;
    let data: Vec<f32> = s.bands().iter().flat_map(|b| b.iter().copied()).collect();
    let y = kernels::haar_inverse(&Tensor::from_vec([1, 4, h2, w2], data));
    Ok(Array2::from_shape_vec((2 * h2, 2 * w2), y.into_vec()).expect("image length"))
}

/// Weights of a WTConv block acting on `c` feature channels.
#[derive(Debug, Clone, PartialEq)]
pub struct WTConvParams {
    /// `[c, c, k, k]`, odd `k`, zero padding.
    pub spatial_kernel: Tensor,
    /// `[c, 1, 1, 1]`.
    pub spatial_bias: Tensor,
    /// `[4c, 1, 3, 3]`: one kernel per (subband, channel), subband-major.
    pub subband_kernels: Tensor,
    /// `[4c, 1, 1, 1]`.
    pub subband_bias: Tensor,
    /// `[c, c, 1, 1]`.
    pub fuse_kernel: Tensor,
    /// `[c, 1, 1, 1]`.
    pub fuse_bias: Tensor,
}

impl WTConvParams {
    pub fn zeros(channels: usize, kernel: usize) -> Self {
        let c = channels;
        Self {
            spatial_kernel: Tensor::zeros([c, c, kernel, kernel]),
            spatial_bias: Tensor::zeros([c, 1, 1, 1]),
            subband_kernels: Tensor::zeros([4 * c, 1, 3, 3]),
            subband_bias: Tensor::zeros([4 * c, 1, 1, 1]),
            fuse_kernel: Tensor::zeros([c, c, 1, 1]),
            fuse_bias: Tensor::zeros([c, 1, 1, 1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.spatial_kernel.n()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        let k = self.spatial_kernel.h();
        let expect = [
            ("spatial_kernel", self.spatial_kernel.shape(), [c, c, k, k]),
            ("spatial_bias", self.spatial_bias.shape(), [c, 1, 1, 1]),
            ("subband_kernels", self.subband_kernels.shape(), [4 * c, 1, 3, 3]),
            ("subband_bias", self.subband_bias.shape(), [4 * c, 1, 1, 1]),
            ("fuse_kernel", self.fuse_kernel.shape(), [c, c, 1, 1]),
            ("fuse_bias", self.fuse_bias.shape(), [c, 1, 1, 1]),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::invalid(format!("{name} has shape {got:?}, expected {want:?}")));
            }
        }
        if k.is_multiple_of(2) {
            return Err(Error::invalid(format!("spatial kernel must be odd-sized, got {k}")));
        }
        let all = [
            &self.spatial_kernel,
            &self.spatial_bias,
            &self.subband_kernels,
            &self.subband_bias,
            &self.fuse_kernel,
            &self.fuse_bias,
        ];
        if all.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("WTConv weights must be finite"));
        }
        Ok(())
    }

    /// Moves the weights into `store`, returning their handles.
    pub fn register(self, store: &mut ParamStore, prefix: &str) -> WTConvIds {
        let kernel = self.spatial_kernel.h();
        WTConvIds {
            spatial_w: store.add(format!("{prefix}.spatial.w"), self.spatial_kernel),
            spatial_b: store.add(format!("{prefix}.spatial.b"), self.spatial_bias),
            sub_w: store.add(format!("{prefix}.subband.w"), self.subband_kernels),
            sub_b: store.add(format!("{prefix}.subband.b"), self.subband_bias),
            fuse_w: store.add(format!("{prefix}.fuse.w"), self.fuse_kernel),
            fuse_b: store.add(format!("{prefix}.fuse.b"), self.fuse_bias),
            kernel,
        }
    }
}

/// Parameter handles of a WTConv block living in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WTConvIds {
    pub spatial_w: ParamId,
    pub spatial_b: ParamId,
    pub sub_w: ParamId,
    pub sub_b: ParamId,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    kernel: usize,
}

impl WTConvIds {
    /// Randomly initialised block: uniform fan-in scaling for both
    /// convolutions, subband kernels starting near a centred delta.
    pub fn init(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let c = channels;
        let bound = 1.0 / ((c * 9) as f32).sqrt();
        let fuse_bound = 1.0 / (c as f32).sqrt();
        let spatial_w = store.add_uniform(format!("{prefix}.spatial.w"), [c, c, 3, 3], bound, rng);
        let spatial_b = store.add_uniform(format!("{prefix}.spatial.b"), [c, 1, 1, 1], bound, rng);
        let mut sub = Tensor::zeros([4 * c, 1, 3, 3]);
        for (k, v) in sub.data_mut().iter_mut().enumerate() {
            *v = if k % 9 == 4 { 1.0 } else { 0.0 } + rng.random_range(-0.1..=0.1f32);
        }
        let sub_w = store.add(format!("{prefix}.subband.w"), sub);
        let sub_b = store.add(format!("{prefix}.subband.b"), Tensor::zeros([4 * c, 1, 1, 1]));
        let fuse_w = store.add_uniform(format!("{prefix}.fuse.w"), [c, c, 1, 1], fuse_bound, rng);
        let fuse_b = store.add_uniform(format!("{prefix}.fuse.b"), [c, 1, 1, 1], fuse_bound, rng);
        Self {
            spatial_w,
            spatial_b,
            sub_w,
            sub_b,
            fuse_w,
            fuse_b,
            kernel: 3,
        }
    }

    /// Records `Conv(Conv(x) + idwt(DWConv(dwt(x))))` on the tape.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let spec = ConvSpec {
            kernel: self.kernel,
            stride: 1,
            pad: self.kernel / 2,
        };
        let (sw, sb) = (g.param(store, self.spatial_w), g.param(store, self.spatial_b));
        let spatial = g.conv(x, sw, Some(sb), spec);
        let bands = g.haar(x);
        let (dw, db) = (g.param(store, self.sub_w), g.param(store, self.sub_b));
        let filtered = g.depthwise3(bands, dw, db);
        let detail = g.inv_haar(filtered);
        let sum = g.add(spatial, detail);
        let (fw, fb) = (g.param(store, self.fuse_w), g.param(store, self.fuse_b));
        g.conv(sum, fw, Some(fb), ConvSpec { kernel: 1, stride: 1, pad: 0 })
    }
}

/// Applies a WTConv block to `x: [n, c, h, w]`.
pub fn wtconv_forward(x: &Tensor, p: &WTConvParams) -> Result<Tensor> {
    p.validate()?;
    let [_, c, h, w] = x.shape();
    if c != p.channels() {
        return Err(Error::shape(format!("{} channels", p.channels()), format!("{c} channels")));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("WTConv needs even spatial sides, got {h}x{w}")));
    }
    let mut store = ParamStore::new();
    let ids = p.clone().register(&mut store, "wtconv");
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = ids.apply(&mut g, &store, xv);
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(h: usize, w: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((h, w), || rng.random_range(-1.0..1.0))
    }

    fn max_abs_diff(a: &Array2<f32>, b: &Array2<f32>) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn constant_image_has_only_ll() {
        let s = dwt2(&Array2::from_elem((6, 8), 0.7)).unwrap();
        assert!(s.ll.iter().all(|&v| (v - 1.4).abs() < 1e-6));
        for b in [&s.lh, &s.hl, &s.hh] {
            assert!(b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn row_stripes_land_in_lh() {
        let x = Array2::from_shape_fn((4, 4), |(i, _)| if i % 2 == 0 { 1.0 } else { -1.0 });
        let s = dwt2(&x).unwrap();
        assert!(s.lh.iter().all(|&v| v == 2.0));
        for b in [&s.ll, &s.hl, &s.hh] {
            assert!(b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn odd_sides_rejected() {
        assert!(dwt2(&Array2::zeros((5, 4))).is_err());
        assert!(dwt2(&Array2::zeros((4, 3))).is_err());
    }

    #[test]
    fn inverse_cases() {
        let zero = Subbands {
            ll: Array2::zeros((3, 2)),
            lh: Array2::zeros((3, 2)),
            hl: Array2::zeros((3, 2)),
            hh: Array2::zeros((3, 2)),
        };
        assert!(idwt2(&zero).unwrap().iter().all(|&v| v == 0.0));
        let mut constant = zero.clone();
        constant.ll.fill(2.0 * 0.3);
        assert!(idwt2(&constant).unwrap().iter().all(|&v| (v - 0.3).abs() < 1e-7));
        let mut bad = zero;
        bad.hh = Array2::zeros((2, 2));
        assert!(idwt2(&bad).is_err());
    }

    #[test]
    fn linear() {
        let (a, b) = (random_grid(8, 6, 1), random_grid(8, 6, 2));
        let combo = &a * 0.3 + &b * -1.7;
        let (sa, sb, sc) = (dwt2(&a).unwrap(), dwt2(&b).unwrap(), dwt2(&combo).unwrap());
        let expect = &sa.hl * 0.3 + &sb.hl * -1.7;
        assert!(max_abs_diff(&sc.hl, &expect) < 1e-6);
        let back = idwt2(&sc).unwrap();
        assert!(max_abs_diff(&back, &combo) < 1e-6);
    }

    proptest! {
        #[test]
        fn perfect_reconstruction_and_energy(h2 in 2usize..12, w2 in 2usize..12, seed in any::<u64>()) {
            let x = random_grid(2 * h2, 2 * w2, seed);
            let s = dwt2(&x).unwrap();
            let energy: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum();
            prop_assert!((s.energy() - energy).abs() <= 1e-6 * energy);
            let back = idwt2(&s).unwrap();
            prop_assert!(max_abs_diff(&back, &x) < 1e-6);
            let again = dwt2(&idwt2(&s).unwrap()).unwrap();
            prop_assert!(max_abs_diff(&again.ll, &s.ll) < 1e-6);
            prop_assert!(max_abs_diff(&again.hh, &s.hh) < 1e-6);
        }
    }

    fn delta(shape: [usize; 4]) -> Tensor {
        // identity per channel: centred 1 on the diagonal (out == in)
        let [co, ci, k, _] = shape;
        let mut t = Tensor::zeros(shape);
        for o in 0..co {
            let i = if ci == 1 { 0 } else { o };
            t.data_mut()[((o * ci + i) * k + k / 2) * k + k / 2] = 1.0;
        }
        t
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn wtconv_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor([2, 3, 8, 6], &mut rng);
        let zero = WTConvParams::zeros(3, 3);
        assert!(wtconv_forward(&x, &zero).unwrap().data().iter().all(|&v| v == 0.0));

        let spatial_only = WTConvParams {
            spatial_kernel: delta([3, 3, 3, 3]),
            fuse_kernel: delta([3, 3, 1, 1]),
            ..WTConvParams::zeros(3, 3)
        };
        assert_eq!(wtconv_forward(&x, &spatial_only).unwrap(), x);

        let wavelet_only = WTConvParams {
            subband_kernels: delta([12, 1, 3, 3]),
            fuse_kernel: delta([3, 3, 1, 1]),
            ..WTConvParams::zeros(3, 3)
        };
        let y = wtconv_forward(&x, &wavelet_only).unwrap();
        let err = y.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn wtconv_rejects_bad_inputs() {
        let p = WTConvParams::zeros(2, 3);
        assert!(wtconv_forward(&Tensor::zeros([1, 2, 7, 8]), &p).is_err());
        assert!(wtconv_forward(&Tensor::zeros([1, 3, 8, 8]), &p).is_err());
        let mut nan = p.clone();
        nan.fuse_bias.data_mut()[0] = f32::NAN;
        assert!(wtconv_forward(&Tensor::zeros([1, 2, 8, 8]), &nan).is_err());
    }

    #[test]
    fn wtconv_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 2;
        let params = WTConvParams {
            spatial_kernel: random_tensor([c, c, 3, 3], &mut rng),
            spatial_bias: random_tensor([c, 1, 1, 1], &mut rng),
            subband_kernels: random_tensor([4 * c, 1, 3, 3], &mut rng),
            subband_bias: random_tensor([4 * c, 1, 1, 1], &mut rng),
            fuse_kernel: random_tensor([c, c, 1, 1], &mut rng),
            fuse_bias: random_tensor([c, 1, 1, 1], &mut rng),
        };
        let mut store = ParamStore::new();
        // The input is registered as a parameter so the tape reports its gradient too.
        let x_id = store.add("x", random_tensor([1, c, 8, 8], &mut rng));
        let ids = params.register(&mut store, "wt");
        let target = random_tensor([1, c, 8, 8], &mut rng);

        let loss_of = |store: &ParamStore| {
            let mut g = Graph::new();
            let x = g.param(store, x_id);
            let y = ids.apply(&mut g, store, x);
            let t = g.input(target.clone());
            let l = g.mse(y, t);
            (g, l)
        };
        let (g, l) = loss_of(&store);
        let grads = g.backward(l, &store);

        // The loss is quadratic in every single coordinate, so central
        // differences are exact up to rounding.
        let h = 0.05f32;
        let all: Vec<ParamId> = store.ids().collect();
        for (k, name) in store.names().iter().enumerate() {
            let len = grads[k].numel();
            let mut numeric = vec![0.0f64; len];
            for (idx, slot) in numeric.iter_mut().enumerate() {
                let mut probe = store.clone();
                probe.get_mut(all[k]).data_mut()[idx] += h;
                let (gp, lp) = loss_of(&probe);
                probe.get_mut(all[k]).data_mut()[idx] -= 2.0 * h;
                let (gm, lm) = loss_of(&probe);
                *slot = (gp.value(lp).data()[0] as f64 - gm.value(lm).data()[0] as f64) / (2.0 * h as f64);
            }
            let diff: f64 = numeric
                .iter()
                .zip(grads[k].data())
                .map(|(n, &a)| (n - a as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
            assert!(diff <= 1e-3 * scale, "{name}: relative error {}", diff / scale);
        }
    }
}
