//! Residual 3D U-Net with group normalisation.
//!
//! Each level holds a residual block (conv-GN-ReLU-conv-GN, plus an identity
//! or 1×1 projection shortcut, then ReLU). The encoder max-pools between
//! levels; the decoder upsamples with stride-sized transposed convolutions
//! and concatenates the encoder features of the same level. All
//! convolutions are same-padded, so output and input spatial sizes match.

use ndarray::Array3;

use super::config::NetworkConfig;
use super::layers::{self, Conv, GroupNorm, GroupNormCache, UpConv};
use super::params::ModelParameters;
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone)]
struct Block {
    prefix: String,
    cin: usize,
    cout: usize,
    groups: usize,
}

struct BlockCache {
    input: Tensor,
    h1: Tensor,
    gn1: GroupNormCache,
    gn2: GroupNormCache,
    out: Tensor,
}

impl Block {
    fn conv1(&self) -> Conv {
        Conv { cin: self.cin, cout: self.cout, k: 3 }
    }
    fn conv2(&self) -> Conv {
        Conv { cin: self.cout, cout: self.cout, k: 3 }
    }
    fn skip(&self) -> Option<Conv> {
        (self.cin != self.cout).then_some(Conv { cin: self.cin, cout: self.cout, k: 1 })
    }
    fn gn(&self) -> GroupNorm {
        GroupNorm { channels: self.cout, groups: self.groups }
    }
    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn forward(&self, p: &ModelParameters, x: Tensor, keep: bool) -> (Tensor, Option<BlockCache>) {
        let c1 = self.conv1().forward(&x, p.get(&self.name("conv1.weight")), p.get(&self.name("conv1.bias")));
        let (mut h1, gn1) = self.gn().forward(&c1, p.get(&self.name("gn1.gamma")), p.get(&self.name("gn1.beta")));
        drop(c1);
        layers::relu_inplace(&mut h1);
        let c2 = self.conv2().forward(&h1, p.get(&self.name("conv2.weight")), p.get(&self.name("conv2.bias")));
        let (mut out, gn2) = self.gn().forward(&c2, p.get(&self.name("gn2.gamma")), p.get(&self.name("gn2.beta")));
        drop(c2);
        match self.skip() {
            Some(s) => out.add_assign(&s.forward(&x, p.get(&self.name("skip.weight")), p.get(&self.name("skip.bias")))),
            None => out.add_assign(&x),
        }
        layers::relu_inplace(&mut out);
        let cache = keep.then(|| BlockCache {
            input: x,
            h1,
            gn1,
            gn2,
            out: out.clone(),
        });
        (out, cache)
    }

    fn backward(&self, p: &ModelParameters, g: &mut ModelParameters, cache: BlockCache, mut grad: Tensor) -> Tensor {
        layers::relu_backward(&cache.out, &mut grad);
        let mut grad_x = match self.skip() {
            Some(s) => with_grads(g, &self.name("skip.weight"), &self.name("skip.bias"), |gw, gb| {
                s.backward(&cache.input, p.get(&self.name("skip.weight")), &grad, gw, gb)
            }),
            None => grad.clone(),
        };
        let gc2 = with_grads(g, &self.name("gn2.gamma"), &self.name("gn2.beta"), |gg, gb| {
            self.gn().backward(&cache.gn2, p.get(&self.name("gn2.gamma")), &grad, gg, gb)
        });
        let mut gh1 = with_grads(g, &self.name("conv2.weight"), &self.name("conv2.bias"), |gw, gb| {
            self.conv2().backward(&cache.h1, p.get(&self.name("conv2.weight")), &gc2, gw, gb)
        });
        layers::relu_backward(&cache.h1, &mut gh1);
        let gc1 = with_grads(g, &self.name("gn1.gamma"), &self.name("gn1.beta"), |gg, gb| {
            self.gn().backward(&cache.gn1, p.get(&self.name("gn1.gamma")), &gh1, gg, gb)
        });
        let gx1 = with_grads(g, &self.name("conv1.weight"), &self.name("conv1.bias"), |gw, gb| {
            self.conv1().backward(&cache.input, p.get(&self.name("conv1.weight")), &gc1, gw, gb)
        });
        grad_x.add_assign(&gx1);
        grad_x
    }
}

/// Run `f` with mutable access to two distinct gradient buffers.
fn with_grads<R>(g: &mut ModelParameters, a: &str, b: &str, f: impl FnOnce(&mut [f32], &mut [f32]) -> R) -> R {
    let mut ga = std::mem::take(&mut g.tensors.get_mut(a).expect("gradient buffer").values);
    let mut gb = std::mem::take(&mut g.tensors.get_mut(b).expect("gradient buffer").values);
    let r = f(&mut ga, &mut gb);
    g.tensors.get_mut(a).unwrap().values = ga;
    g.tensors.get_mut(b).unwrap().values = gb;
    r
}

/// Intermediate values kept by a training forward pass.
pub struct Tape {
    enc: Vec<BlockCache>,
    pool_args: Vec<Vec<u32>>,
    pool_in_dims: Vec<[usize; 3]>,
    /// Inputs to each upsampling layer, indexed by target level.
    up_inputs: Vec<Tensor>,
    dec: Vec<Option<BlockCache>>,
    head_input: Tensor,
}

/// A network bound to a configuration and a parameter set.
pub struct UNet<'a> {
    cfg: &'a NetworkConfig,
    params: &'a ModelParameters,
}

impl<'a> UNet<'a> {
    pub fn new(cfg: &'a NetworkConfig, params: &'a ModelParameters) -> Result<Self> {
        cfg.validate()?;
        params.check_matches(cfg)?;
        Ok(Self { cfg, params })
    }

    fn enc_block(&self, l: usize) -> Block {
        Block {
            prefix: format!("enc{l}"),
            cin: if l == 0 { self.cfg.input_channels } else { self.cfg.features(l - 1) },
            cout: self.cfg.features(l),
            groups: self.cfg.groupnorm_groups,
        }
    }

    fn dec_block(&self, l: usize) -> Block {
        Block {
            prefix: format!("dec{l}"),
            cin: 2 * self.cfg.features(l),
            cout: self.cfg.features(l),
            groups: self.cfg.groupnorm_groups,
        }
    }

    fn up(&self, l: usize) -> UpConv {
        UpConv {
            cin: self.cfg.features(l),
            cout: self.cfg.features(l - 1),
            f: self.cfg.downsample[l - 1],
        }
    }

    fn head(&self) -> Conv {
        Conv { cin: self.cfg.features(0), cout: self.cfg.output_channels, k: 1 }
    }

    /// Scale a Hounsfield-unit image into a one-channel input tensor.
    pub fn input_tensor(&self, image: &Array3<f32>) -> Result<Tensor> {
        let (w, h, d) = image.dim();
        let dims = [w, h, d];
        if !self.cfg.accepts_dims(dims) {
            return Err(Error::ShapeMismatch {
                expected: self.cfg.cumulative_downsample().to_vec(),
                found: dims.to_vec(),
            });
        }
        let scale = self.cfg.intensity_scale;
        let data = image.as_standard_layout().iter().map(|v| v / scale).collect();
        Tensor::from_vec(1, dims, data)
    }

    fn run(&self, input: Tensor, keep: bool) -> (Tensor, Option<Tape>) {
        let p = self.params;
        let levels = self.cfg.levels;
        let mut enc = Vec::new();
        let mut skips: Vec<Tensor> = Vec::new();
        let mut pool_args = Vec::new();
        let mut pool_in_dims = Vec::new();
        let (mut x, c) = self.enc_block(0).forward(p, input, keep);
        enc.extend(c);
        for l in 1..levels {
            let (pooled, arg) = layers::max_pool(&x, self.cfg.downsample[l - 1]);
            pool_in_dims.push(x.dims);
            pool_args.push(arg);
            skips.push(x);
            let (next, c) = self.enc_block(l).forward(p, pooled, keep);
            enc.extend(c);
            x = next;
        }
        let mut up_inputs = Vec::new();
        let mut dec: Vec<Option<BlockCache>> = (0..levels.saturating_sub(1)).map(|_| None).collect();
        for l in (0..levels.saturating_sub(1)).rev() {
            let up = self.up(l + 1);
            let u = up.forward(&x, p.get(&format!("up{}.weight", l + 1)), p.get(&format!("up{}.bias", l + 1)));
            if keep {
                up_inputs.push(x);
            }
            let skip = skips.pop().expect("encoder skip");
            let (out, c) = self.dec_block(l).forward(p, u.concat(&skip), keep);
            dec[l] = c;
            x = out;
        }
        let logits = self.head().forward(&x, p.get("head.weight"), p.get("head.bias"));
        up_inputs.reverse();
        let tape = keep.then_some(Tape {
            enc,
            pool_args,
            pool_in_dims,
            up_inputs,
            dec,
            head_input: x,
        });
        (logits, tape)
    }

    /// Two-channel logits for a preprocessed input.
    pub fn logits(&self, input: Tensor) -> Tensor {
        self.run(input, false).0
    }

    pub fn forward_train(&self, input: Tensor) -> (Tensor, Tape) {
        let (logits, tape) = self.run(input, true);
        (logits, tape.expect("tape requested"))
    }

    /// Per-voxel foreground probability for an image patch in HU.
    pub fn forward(&self, image: &Array3<f32>) -> Result<Array3<f32>> {
        let logits = self.logits(self.input_tensor(image)?);
        let [w, h, d] = logits.dims;
        let probs = foreground_probability(&logits);
        Ok(Array3::from_shape_vec((w, h, d), probs).expect("dims match"))
    }

    /// Accumulate parameter gradients given the gradient w.r.t. the logits.
    pub fn backward(&self, tape: Tape, grad_logits: &Tensor, grads: &mut ModelParameters) {
        let p = self.params;
        let levels = self.cfg.levels;
        let Tape {
            mut enc,
            pool_args,
            pool_in_dims,
            up_inputs,
            dec,
            head_input,
        } = tape;
        let mut g = with_grads(grads, "head.weight", "head.bias", |gw, gb| {
            self.head().backward(&head_input, p.get("head.weight"), grad_logits, gw, gb)
        });
        drop(head_input);
        let mut skip_grads: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
        for (l, cache) in dec.into_iter().enumerate() {
            let cache = cache.expect("decoder cache");
            let gcat = self.dec_block(l).backward(p, grads, cache, g);
            let (gu, gskip) = gcat.split(self.cfg.features(l));
            skip_grads[l] = Some(gskip);
            let up = self.up(l + 1);
            let (wn, bn) = (format!("up{}.weight", l + 1), format!("up{}.bias", l + 1));
            g = with_grads(grads, &wn, &bn, |gw, gb| up.backward(&up_inputs[l], p.get(&wn), &gu, gw, gb));
        }
        for l in (1..levels).rev() {
            let cache = enc.pop().expect("encoder cache");
            let gpool = self.enc_block(l).backward(p, grads, cache, g);
            g = layers::max_pool_backward(&gpool, &pool_args[l - 1], pool_in_dims[l - 1]);
            if let Some(s) = skip_grads[l - 1].take() {
                g.add_assign(&s);
            }
        }
        let cache = enc.pop().expect("encoder cache");
        self.enc_block(0).backward(p, grads, cache, g);
    }
}

/// Softmax over the two output channels, returning channel 1.
pub fn foreground_probability(logits: &Tensor) -> Vec<f32> {
    debug_assert_eq!(logits.channels, 2);
    logits
        .channel(0)
        .iter()
        .zip(logits.channel(1))
        .map(|(&z0, &z1)| sigmoid(z1 - z0))
        .collect()
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::super::params::init_params;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            base_features: 4,
            levels: 3,
            downsample: vec![[2, 2, 2], [2, 2, 1]],
            groupnorm_groups: 2,
            patch_dims: [8, 8, 4],
            ..NetworkConfig::default()
        }
    }

    fn image(dims: [usize; 3], seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((dims[0], dims[1], dims[2]), |_| rng.random_range(-300.0..300.0))
    }

    #[test]
    fn output_shape_and_range() {
        let cfg = NetworkConfig {
            base_features: 4,
            groupnorm_groups: 2,
            ..NetworkConfig::default()
        };
        let params = init_params(&cfg, 1).unwrap();
        let net = UNet::new(&cfg, &params).unwrap();
        let out = net.forward(&image([64, 64, 32], 2)).unwrap();
        assert_eq!(out.dim(), (64, 64, 32));
        assert!(out.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn constant_input_is_finite_and_deterministic() {
        let cfg = tiny();
        let params = init_params(&cfg, 3).unwrap();
        let net = UNet::new(&cfg, &params).unwrap();
        let flat = Array3::from_elem((8, 8, 4), 40.0f32);
        let a = net.forward(&flat).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, net.forward(&flat).unwrap());
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = tiny();
        let params = init_params(&cfg, 3).unwrap();
        let net = UNet::new(&cfg, &params).unwrap();
        assert!(matches!(
            net.forward(&Array3::zeros((8, 6, 4))),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    /// Whole-network backward against central differences of a random
    /// linear functional of the logits.
    #[test]
    fn network_gradient_matches_finite_differences() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 11).unwrap();
        // Non-trivial norm affine parameters exercise every gradient path.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (name, p) in params.tensors.iter_mut() {
            if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
                p.values.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        let img = image([8, 8, 4], 13);
        let net = UNet::new(&cfg, &params).unwrap();
        let input = net.input_tensor(&img).unwrap();
        let (logits, tape) = net.forward_train(input.clone());
        let r: Vec<f32> = (0..logits.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut grads = params.zeros_like();
        net.backward(tape, &Tensor::from_vec(2, logits.dims, r.clone()).unwrap(), &mut grads);

        let objective = |p: &ModelParameters| -> f64 {
            let net = UNet::new(&cfg, p).unwrap();
            net.logits(input.clone())
                .data
                .iter()
                .zip(&r)
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum()
        };
        let central = |name: &str, i: usize, h: f32| {
            let mut plus = params.clone();
            plus.get_mut(name)[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name)[i] -= h;
            (objective(&plus) - objective(&minus)) / (2.0 * h as f64)
        };
        let mut checked = 0;
        let mut worst = 0.0f64;
        for name in params.tensors.keys() {
            let len = params.get(name).len();
            for i in [0, len / 2, len - 1] {
                let an = grads.get(name)[i] as f64;
                // A step can straddle a ReLU or pooling kink; two step sizes
                // make a spurious mismatch on both unlikely.
                let err = [2e-3f32, 7e-4]
                    .map(|h| {
                        let fd = central(name, i, h);
                        (fd - an).abs() / (1.0 + fd.abs().max(an.abs()))
                    })
                    .into_iter()
                    .fold(f64::INFINITY, f64::min);
                let fd = central(name, i, 2e-3);
                worst = worst.max(err);
                assert!(err < 5e-2, "{name}[{i}]: fd {fd} analytic {an}");
                checked += 1;
            }
        }
        assert!(checked > 60, "checked {checked}, worst {worst}");
    }
}
