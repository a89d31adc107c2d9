//! A small reverse-mode autodiff tape over [`Tensor`] operations.

use super::kernels::{self, ConvSpec};
use super::params::{ParamId, ParamStore};
use super::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Depthwise { x: Var, w: Var, b: Var },
    Haar { x: Var },
    InvHaar { x: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(f32, f32)> },
    Silu { x: Var },
    Add { a: Var, b: Var },
    AddChannel { x: Var, e: Var },
    Linear { x: Var, w: Var, b: Var },
    Upsample { x: Var },
    Concat { a: Var, b: Var },
    Mse { x: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation and replays it backwards.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec);
        self.push(y, Op::Conv { x, w, b, spec })
    }

    pub fn depthwise3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = kernels::depthwise3(self.value(x), self.value(w), self.value(b));
        self.push(y, Op::Depthwise { x, w, b })
    }

    pub fn haar(&mut self, x: Var) -> Var {
        let y = kernels::haar_forward(self.value(x));
        self.push(y, Op::Haar { x })
    }

    pub fn inv_haar(&mut self, x: Var) -> Var {
        let y = kernels::haar_inverse(self.value(x));
        self.push(y, Op::InvHaar { x })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (y, stats) = kernels::group_norm(self.value(x), self.value(gamma), self.value(beta), groups);
        self.push(y, Op::GroupNorm { x, gamma, beta, groups, stats })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            *v *= sigmoid(*v);
        }
        self.push(y, Op::Silu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add { a, b })
    }

    /// Adds a per-(sample, channel) offset `e: [n, c, 1, 1]` to `x: [n, c, h, w]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Var {
        let mut y = self.value(x).clone();
        let ev = self.value(e);
        assert_eq!([ev.n(), ev.c()], [y.n(), y.c()], "channel offset shape");
        let hw = y.h() * y.w();
        for (k, plane) in y.data_mut().chunks_mut(hw).enumerate() {
            let off = ev.data()[k];
            plane.iter_mut().for_each(|v| *v += off);
        }
        self.push(y, Op::AddChannel { x, e })
    }

    /// `y = x·Wᵀ + b` for `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, fin, fout) = (xv.n(), xv.c(), wv.n());
        assert_eq!(wv.c(), fin, "linear input width");
        let mut y = Tensor::zeros([n, fout, 1, 1]);
        for s in 0..n {
            let xs = xv.sample(s);
            for o in 0..fout {
                let row = &wv.data()[o * fin..(o + 1) * fin];
                y.data_mut()[s * fout + o] = bv.data()[o] + row.iter().zip(xs).map(|(a, b)| a * b).sum::<f32>();
            }
        }
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let mut y = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for (src, dst) in xv.data().chunks(h * w).zip(y.data_mut().chunks_mut(4 * h * w)) {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        self.push(y, Op::Upsample { x })
    }

    /// Concatenates along channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!([av.n(), av.h(), av.w()], [bv.n(), bv.h(), bv.w()], "concat shapes");
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for s in 0..av.n() {
            data.extend_from_slice(av.sample(s));
            data.extend_from_slice(bv.sample(s));
        }
        let y = Tensor::from_vec([av.n(), av.c() + bv.c(), av.h(), av.w()], data);
        self.push(y, Op::Concat { a, b })
    }

    /// Mean squared error over all elements; a scalar `[1, 1, 1, 1]` node.
    pub fn mse(&mut self, x: Var, target: Var) -> Var {
        let (xv, tv) = (self.value(x), self.value(target));
        assert_eq!(xv.shape(), tv.shape(), "mse shapes");
        let sum: f64 = xv.data().iter().zip(tv.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        let y = Tensor::from_vec([1, 1, 1, 1], vec![(sum / xv.numel() as f64) as f32]);
        self.push(y, Op::Mse { x, target })
    }

    /// Back-propagates from the scalar `loss` and returns one gradient per
    /// parameter of `store` (zeros for parameters not on the tape).
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Vec<Tensor> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut param_grads: Vec<Tensor> = store.iter().map(|t| Tensor::zeros(t.shape())).collect();

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => param_grads[id.index()].add_assign(&dy),
                Op::Conv { x, w, b, spec } => {
                    let need_dx = self.needs_grad(*x);
                    let (dx, dw, db) =
                        kernels::conv2d_backward(self.value(*x), self.value(*w), &dy, *spec, need_dx);
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Depthwise { x, w, b } => {
                    let (dx, dw, db) = kernels::depthwise3_backward(self.value(*x), self.value(*w), &dy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Haar { x } => acc(&mut grads, *x, kernels::haar_inverse(&dy)),
                Op::InvHaar { x } => acc(&mut grads, *x, kernels::haar_forward(&dy)),
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let (dx, dg, db) =
                        kernels::group_norm_backward(self.value(*x), self.value(*gamma), stats, *groups, &dy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dg);
                    acc(&mut grads, *beta, db);
                }
                Op::Silu { x } => {
                    let mut dx = dy;
                    for (g, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        let s = sigmoid(v);
                        *g *= s * (1.0 + v * (1.0 - s));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::AddChannel { x, e } => {
                    let ev = self.value(*e);
                    let hw = dy.h() * dy.w();
                    let de: Vec<f32> = dy.data().chunks(hw).map(|p| p.iter().sum()).collect();
                    acc(&mut grads, *e, Tensor::from_vec(ev.shape(), de));
                    acc(&mut grads, *x, dy);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, fin, fout) = (xv.n(), xv.c(), wv.n());
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut dw = Tensor::zeros(wv.shape());
                    let mut db = Tensor::zeros([fout, 1, 1, 1]);
                    for s in 0..n {
                        for o in 0..fout {
                            let g = dy.data()[s * fout + o];
                            db.data_mut()[o] += g;
                            for i in 0..fin {
                                dw.data_mut()[o * fin + i] += g * xv.data()[s * fin + i];
                                dx.data_mut()[s * fin + i] += g * wv.data()[o * fin + i];
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Upsample { x } => {
                    let [n, c, h, w] = self.value(*x).shape();
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for (dst, src) in dx.data_mut().chunks_mut(h * w).zip(dy.data().chunks(4 * h * w)) {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Concat { a, b } => {
                    let (ash, bsh) = (self.value(*a).shape(), self.value(*b).shape());
                    let (alen, blen) = (ash[1] * ash[2] * ash[3], bsh[1] * bsh[2] * bsh[3]);
                    let mut da = Vec::with_capacity(ash[0] * alen);
                    let mut db = Vec::with_capacity(bsh[0] * blen);
                    for s in 0..ash[0] {
                        let ds = dy.sample(s);
                        da.extend_from_slice(&ds[..alen]);
                        db.extend_from_slice(&ds[alen..]);
                    }
                    acc(&mut grads, *a, Tensor::from_vec(ash, da));
                    acc(&mut grads, *b, Tensor::from_vec(bsh, db));
                }
                Op::Mse { x, target } => {
                    let (xv, tv) = (self.value(*x), self.value(*target));
                    let scale = 2.0 * dy.data()[0] / xv.numel() as f32;
                    let g: Vec<f32> = xv.data().iter().zip(tv.data()).map(|(a, b)| scale * (a - b)).collect();
                    acc(&mut grads, *x, Tensor::from_vec(xv.shape(), g));
                }
            }
        }
        param_grads
    }

    /// Whether any parameter lies upstream of `v` (inputs need no gradient).
    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const C3: ConvSpec = ConvSpec { kernel: 3, stride: 1, pad: 1 };

    fn build(store: &ParamStore, ids: &[ParamId], x: &Tensor, target: &Tensor) -> (Graph, Var) {
        let mut g = Graph::new();
        let p: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
        let x = g.input(x.clone());
        let t = g.input(target.clone());
        let h = g.conv(x, p[0], Some(p[1]), C3);
        let h = g.group_norm(h, p[2], p[3], 2);
        let h = g.silu(h);
        let down = g.conv(h, p[4], None, ConvSpec { kernel: 3, stride: 2, pad: 1 });
        let sub = g.haar(h);
        let sub = g.depthwise3(sub, p[5], p[6]);
        let back = g.inv_haar(sub);
        let up = g.upsample2(down);
        let temb = g.input(Tensor::from_vec([2, 3, 1, 1], vec![0.3, -0.2, 0.5, 0.1, 0.9, -0.4]));
        let e = g.linear(temb, p[7], p[8]);
        let up = g.add_channel(up, e);
        let cat = g.concat(back, up);
        let mixed = g.conv(cat, p[9], Some(p[10]), ConvSpec { kernel: 1, stride: 1, pad: 0 });
        let out = g.add(mixed, x);
        let loss = g.mse(out, t);
        (g, loss)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let ids = vec![
            store.add_uniform("c1.w", [4, 1, 3, 3], 0.5, &mut rng),
            store.add_uniform("c1.b", [4, 1, 1, 1], 0.5, &mut rng),
            store.add_uniform("gn.g", [4, 1, 1, 1], 1.0, &mut rng),
            store.add_uniform("gn.b", [4, 1, 1, 1], 0.5, &mut rng),
            store.add_uniform("down.w", [4, 4, 3, 3], 0.3, &mut rng),
            store.add_uniform("dw.w", [16, 1, 3, 3], 0.5, &mut rng),
            store.add_uniform("dw.b", [16, 1, 1, 1], 0.5, &mut rng),
            store.add_uniform("lin.w", [4, 3, 1, 1], 0.5, &mut rng),
            store.add_uniform("lin.b", [4, 1, 1, 1], 0.5, &mut rng),
            store.add_uniform("mix.w", [1, 8, 1, 1], 0.5, &mut rng),
            store.add_uniform("mix.b", [1, 1, 1, 1], 0.5, &mut rng),
        ];
        let x = Tensor::from_vec([2, 1, 8, 8], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect());
        let t = Tensor::from_vec([2, 1, 8, 8], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (g, loss) = build(&store, &ids, &x, &t);
        let grads = g.backward(loss, &store);

        let h = 1e-2f32;
        for (k, &id) in ids.iter().enumerate() {
            let len = store.get(id).numel();
            for idx in [0, len / 2, len - 1] {
                let mut probe = store.clone();
                probe.get_mut(id).data_mut()[idx] += h;
                let (gp, lp) = build(&probe, &ids, &x, &t);
                probe.get_mut(id).data_mut()[idx] -= 2.0 * h;
                let (gm, lm) = build(&probe, &ids, &x, &t);
                let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
                let analytic = grads[k].data()[idx];
                let tol = 2e-3 + 2e-2 * numeric.abs().max(analytic.abs());
                assert!(
                    (numeric - analytic).abs() < tol,
                    "{} [{idx}]: numeric {numeric}, analytic {analytic}",
                    store.names()[k]
                );
            }
        }
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::filled([1, 1, 1, 1], 2.0));
        let _unused = store.add("u", Tensor::filled([3, 1, 1, 1], 1.0));
        let mut g = Graph::new();
        let x = g.input(Tensor::filled([1, 1, 2, 2], 1.0));
        let wv = g.param(&store, w);
        let y = g.conv(x, wv, None, ConvSpec { kernel: 1, stride: 1, pad: 0 });
        let t = g.input(Tensor::zeros([1, 1, 2, 2]));
        let loss = g.mse(y, t);
        let grads = g.backward(loss, &store);
        assert!((grads[0].data()[0] - 4.0).abs() < 1e-6);
        assert!(grads[1].data().iter().all(|&v| v == 0.0));
    }
}
