use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Denoiser;
use crate::error::{Error, Result};
use crate::nn::{ConvSpec, Graph, ParamId, ParamStore, Tensor, Var};
use crate::wavelet::WTConvIds;

const GROUPS: usize = 8;
const CONV3: ConvSpec = ConvSpec { kernel: 3, stride: 1, pad: 1 };
const DOWN: ConvSpec = ConvSpec { kernel: 3, stride: 2, pad: 1 };
const POINT: ConvSpec = ConvSpec { kernel: 1, stride: 1, pad: 0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub base_width: usize,
    /// Use WTConv in place of the second convolution of every block.
    pub wtconv: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            wtconv: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
enum SecondConv {
    Plain(Dense),
    Wavelet(WTConvIds),
}

#[derive(Debug, Clone, Copy)]
struct Block {
    norm1: Dense,
    conv1: Dense,
    time: Dense,
    norm2: Dense,
    conv2: SecondConv,
    skip: Option<Dense>,
}

#[derive(Debug, Clone)]
struct Layout {
    time1: Dense,
    time2: Dense,
    conv_in: Dense,
    enc1: Block,
    down1: Dense,
    enc2: Block,
    down2: Dense,
    mid: Block,
    dec2: Block,
    dec1: Block,
    norm_out: Dense,
    conv_out: Dense,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> Dense {
        let bound = 1.0 / ((cin * k * k) as f32).sqrt();
        Dense {
            w: self.store.add_uniform(format!("{name}.w"), [cout, cin, k, k], bound, &mut self.rng),
            b: self.store.add_uniform(format!("{name}.b"), [cout, 1, 1, 1], bound, &mut self.rng),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Dense {
        Dense {
            w: self.store.add(format!("{name}.gamma"), Tensor::filled([c, 1, 1, 1], 1.0)),
            b: self.store.add(format!("{name}.beta"), Tensor::zeros([c, 1, 1, 1])),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, temb: usize, wtconv: bool) -> Block {
        Block {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cout, cin, 3),
            time: self.conv(&format!("{name}.time"), cout, temb, 1),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: if wtconv {
                SecondConv::Wavelet(WTConvIds::init(self.store, &format!("{name}.conv2"), cout, &mut self.rng))
            } else {
                SecondConv::Plain(self.conv(&format!("{name}.conv2"), cout, cout, 3))
            },
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cout, cin, 1)),
        }
    }
}

/// Three-level U-Net predicting the noise in `x_t` given the prior `c`.
///
/// Widths `W, 2W, 4W` at full, half and quarter resolution; inputs `x_t` and
/// `c` enter as two channels. Side lengths must be multiples of 8 and at
/// least 16, so every WTConv sees even sides of length >= 4.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    params: ParamStore,
    layout: Layout,
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        let w = config.base_width;
        if w == 0 || !w.is_multiple_of(GROUPS) {
            return Err(Error::invalid(format!(
                "base_width must be a positive multiple of {GROUPS}, got {w}"
            )));
        }
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let temb = 4 * w;
        let wt = config.wtconv;
        let time1 = b.conv("time.fc1", temb, w, 1);
        let time2 = b.conv("time.fc2", temb, temb, 1);
        let conv_in = b.conv("conv_in", w, 2, 3);
        let enc1 = b.block("enc1", w, w, temb, wt);
        let down1 = b.conv("down1", w, w, 3);
        let enc2 = b.block("enc2", w, 2 * w, temb, wt);
        let down2 = b.conv("down2", 2 * w, 2 * w, 3);
        let mid = b.block("mid", 2 * w, 4 * w, temb, wt);
        let dec2 = b.block("dec2", 6 * w, 2 * w, temb, wt);
        let dec1 = b.block("dec1", 3 * w, w, temb, wt);
        let norm_out = b.norm("norm_out", w);
        let conv_out = Dense {
            w: b.store.add("conv_out.w", Tensor::zeros([1, w, 3, 3])),
            b: b.store.add("conv_out.b", Tensor::zeros([1, 1, 1, 1])),
        };
        Ok(Self {
            config,
            params,
            layout: Layout {
                time1,
                time2,
                conv_in,
                enc1,
                down1,
                enc2,
                down2,
                mid,
                dec2,
                dec1,
                norm_out,
                conv_out,
            },
        })
    }

    pub fn config(&self) -> UNetConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all weights; names and shapes must match this architecture.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        if params.names() != self.params.names() {
            return Err(Error::invalid("parameter names do not match the architecture"));
        }
        for (k, (a, b)) in params.iter().zip(self.params.iter()).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    format!("{} {:?}", params.names()[k], b.shape()),
                    format!("{:?}", a.shape()),
                ));
            }
        }
        self.params = params;
        Ok(())
    }

    fn check_inputs(&self, x_t: &Tensor, c: &Tensor, t: &[usize]) -> Result<()> {
        let [n, ch, h, w] = x_t.shape();
        if ch != 1 || c.shape() != x_t.shape() {
            return Err(Error::shape(
                format!("x_t and c both [n, 1, h, w], got x_t {:?}", x_t.shape()),
                format!("c {:?}", c.shape()),
            ));
        }
        if h % 8 != 0 || w % 8 != 0 || h < 16 || w < 16 {
            return Err(Error::invalid(format!(
                "U-Net needs sides that are multiples of 8 and >= 16, got {h}x{w}"
            )));
        }
        if t.len() != n {
            return Err(Error::invalid(format!("{} timesteps for a batch of {n}", t.len())));
        }
        Ok(())
    }

    fn dense(&self, g: &mut Graph, d: Dense) -> (Var, Var) {
        (g.param(&self.params, d.w), g.param(&self.params, d.b))
    }

    fn block(&self, g: &mut Graph, blk: &Block, x: Var, temb: Var) -> Var {
        let (g1, b1) = self.dense(g, blk.norm1);
        let h = g.group_norm(x, g1, b1, GROUPS);
        let h = g.silu(h);
        let (w1, c1) = self.dense(g, blk.conv1);
        let h = g.conv(h, w1, Some(c1), CONV3);
        let (tw, tb) = self.dense(g, blk.time);
        let e = g.linear(temb, tw, tb);
        let h = g.add_channel(h, e);
        let (g2, b2) = self.dense(g, blk.norm2);
        let h = g.group_norm(h, g2, b2, GROUPS);
        let h = g.silu(h);
        let h = match blk.conv2 {
            SecondConv::Plain(d) => {
                let (w2, c2) = self.dense(g, d);
                g.conv(h, w2, Some(c2), CONV3)
            }
            SecondConv::Wavelet(ids) => ids.apply(g, &self.params, h),
        };
        let skip = match blk.skip {
            Some(d) => {
                let (ws, bs) = self.dense(g, d);
                g.conv(x, ws, Some(bs), POINT)
            }
            None => x,
        };
        g.add(h, skip)
    }

    /// Records the forward pass on `g` and returns the predicted noise.
    pub fn forward(&self, g: &mut Graph, x_t: &Tensor, c: &Tensor, t: &[usize]) -> Result<Var> {
        self.check_inputs(x_t, c, t)?;
        let l = &self.layout;
        let width = self.config.base_width;
        let emb = g.input(timestep_embedding(t, width));
        let (w, b) = self.dense(g, l.time1);
        let emb = g.linear(emb, w, b);
        let emb = g.silu(emb);
        let (w, b) = self.dense(g, l.time2);
        let emb = g.linear(emb, w, b);
        let temb = g.silu(emb);

        let xt = g.input(x_t.clone());
        let cv = g.input(c.clone());
        let input = g.concat(xt, cv);
        let (w, b) = self.dense(g, l.conv_in);
        let h = g.conv(input, w, Some(b), CONV3);
        let e1 = self.block(g, &l.enc1, h, temb);
        let (w, b) = self.dense(g, l.down1);
        let h = g.conv(e1, w, Some(b), DOWN);
        let e2 = self.block(g, &l.enc2, h, temb);
        let (w, b) = self.dense(g, l.down2);
        let h = g.conv(e2, w, Some(b), DOWN);
        let m = self.block(g, &l.mid, h, temb);
        let up = g.upsample2(m);
        let h = g.concat(up, e2);
        let d2 = self.block(g, &l.dec2, h, temb);
        let up = g.upsample2(d2);
        let h = g.concat(up, e1);
        let d1 = self.block(g, &l.dec1, h, temb);
        let (gn, bn) = self.dense(g, l.norm_out);
        let h = g.group_norm(d1, gn, bn, GROUPS);
        let h = g.silu(h);
        let (w, b) = self.dense(g, l.conv_out);
        Ok(g.conv(h, w, Some(b), CONV3))
    }
}

impl Denoiser for UNet {
    fn predict(&self, x_t: &Tensor, c: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, x_t, c, t)?;
        Ok(g.value(out).clone())
    }
}

/// Sinusoidal embedding `[sin(t·f_k)…, cos(t·f_k)…]`, `f_k = 10000^(−k/half)`,
/// shaped `[n, dim, 1, 1]`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros([t.len(), dim, 1, 1]);
    for (s, &ts) in t.iter().enumerate() {
        let row = out.sample_mut(s);
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let arg = ts as f64 * freq;
            row[k] = arg.sin() as f32;
            row[half + k] = arg.cos() as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn output_matches_input_shape_and_is_deterministic() {
        for wtconv in [false, true] {
            let mut net = UNet::new(UNetConfig { base_width: 8, wtconv }, 1).unwrap();
            // Zero-initialised output layer: make it non-trivial.
            for v in net.params_mut().iter_mut().last().unwrap().data_mut() {
                *v = 0.1;
            }
            let (x, c) = (random([2, 1, 16, 24], 2), random([2, 1, 16, 24], 3));
            let y = net.predict(&x, &c, &[5, 700]).unwrap();
            assert_eq!(y.shape(), [2, 1, 16, 24]);
            assert_eq!(net.predict(&x, &c, &[5, 700]).unwrap(), y);
        }
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let net = UNet::new(UNetConfig { base_width: 8, wtconv: true }, 4).unwrap();
        let y = net.predict(&random([1, 1, 16, 16], 1), &random([1, 1, 16, 16], 2), &[3]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = UNet::new(UNetConfig { base_width: 8, wtconv: false }, 0).unwrap();
        let x = Tensor::zeros([1, 1, 16, 16]);
        assert!(net.predict(&x, &Tensor::zeros([1, 1, 16, 8]), &[1]).is_err());
        assert!(net.predict(&Tensor::zeros([1, 1, 8, 8]), &Tensor::zeros([1, 1, 8, 8]), &[1]).is_err());
        assert!(net.predict(&Tensor::zeros([1, 1, 20, 20]), &Tensor::zeros([1, 1, 20, 20]), &[1]).is_err());
        assert!(net.predict(&x, &x, &[1, 2]).is_err());
        assert!(UNet::new(UNetConfig { base_width: 12, wtconv: false }, 0).is_err());
    }

    #[test]
    fn wtconv_switch_changes_parameters() {
        let a = UNet::new(UNetConfig { base_width: 8, wtconv: false }, 0).unwrap();
        let b = UNet::new(UNetConfig { base_width: 8, wtconv: true }, 0).unwrap();
        assert!(a.params().names().iter().all(|n| !n.contains("subband")));
        assert_eq!(b.params().names().iter().filter(|n| n.ends_with("subband.w")).count(), 5);
    }

    #[test]
    fn embedding_values() {
        let e = timestep_embedding(&[0, 10], 4);
        assert_eq!(e.sample(0), &[0.0, 0.0, 1.0, 1.0]);
        let s = e.sample(1);
        assert!((s[0] - 10f32.sin()).abs() < 1e-6);
        assert!((s[1] - (10.0 * 0.01f64).sin() as f32).abs() < 1e-6);
    }
}
