//! The hybrid CNN/Transformer restoration network.
//!
//! Layout: a shallow stem feeds a CNN branch and a Transformer branch; after
//! every stage the two are fused (gate, SK or plain addition). A
//! pixel-shuffle head with per-level skips brings the result back to full
//! resolution, and a global residual adds the input image.

pub mod blocks;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub use config::{Branches, FusionKind, ModelConfig};

use blocks::Init;

/// A configured network and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn stage_prefix(s: usize, part: &str) -> String {
    format!("stage{s}.{part}")
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model whose forward map is the identity.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build_with(config, seed, true)
    }

    /// With `identity_init = false` every parameter is drawn at random,
    /// including the projections that are normally zero.
    pub fn build_with(config: &ModelConfig, seed: u64, identity_init: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng, identity_init);
        let c0 = config.base_channels;
        let ds = config.downsample_per_stage;

        blocks::declare_stem(&mut init, c0)?;
        let mut c = c0;
        for s in 0..config.stages {
            let c_out = config.stage_channels(s);
            if config.has_cnn() {
                blocks::declare_cnn_block(&mut init, &stage_prefix(s, "cnn"), c, ds)?;
            }
            if config.has_transformer() {
                if ds {
                    init.conv(&stage_prefix(s, "tr_down"), 4 * c, c_out, 1, 1)?;
                }
                blocks::declare_transformer_block(
                    &mut init,
                    &stage_prefix(s, "tr"),
                    c_out,
                    config.heads_for(s),
                    config.ffn_hidden(c_out),
                )?;
            }
            match config.fusion {
                FusionKind::Gate => blocks::declare_gate_fusion(&mut init, &stage_prefix(s, "fuse"), c_out)?,
                FusionKind::Sk => blocks::declare_sk_fusion(&mut init, &stage_prefix(s, "fuse"), c_out)?,
                FusionKind::Add | FusionKind::None => {}
            }
            c = c_out;
        }
        if ds {
            for s in (0..config.stages).rev() {
                let below = if s == 0 { c0 } else { config.stage_channels(s - 1) };
                init.conv(&format!("head.up{s}"), config.stage_channels(s) / 4, below, 3, 1)?;
            }
        }
        init.projection("head.out", c0, 3, 3)?;
        init.perturb_all(0.1);
        Ok(Model {
            config: config.clone(),
            params: init.store,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Checks that `image` is a `[3,H,W]` tensor this model can process.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.size_multiple();
        match *shape {
            [3, h, w] if h % m == 0 && w % m == 0 => Ok(()),
            [3, h, w] => Err(Error::invalid(format!(
                "input {h}x{w} must have height and width divisible by {m} (2^stages)"
            ))),
            _ => Err(Error::invalid(format!(
                "input must be a [3,H,W] image tensor, got {shape:?}"
            ))),
        }
    }

    /// Records the forward pass of `image` on the binder's tape.
    pub fn forward<'t>(&self, p: &Binder<'t, '_, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&image.shape())?;
        let cfg = &self.config;
        let ds = cfg.downsample_per_stage;
        let shallow = blocks::stem(p, image)?;
        let (mut f_cnn, mut f_tr) = (shallow, shallow);
        let mut levels = vec![shallow];

        for s in 0..cfg.stages {
            if cfg.has_cnn() {
                f_cnn = blocks::cnn_block(p, &stage_prefix(s, "cnn"), f_cnn, ds)?;
            }
            if cfg.has_transformer() {
                let x = if ds {
                    blocks::conv(p, &stage_prefix(s, "tr_down"), f_tr.pixel_unshuffle(2)?, 1, 0, 1)?
                } else {
                    f_tr
                };
                f_tr = blocks::transformer_block(p, &stage_prefix(s, "tr"), x, cfg.heads_for(s))?;
            }
            let merged = match cfg.fusion {
                FusionKind::Gate => {
                    (f_cnn, f_tr) = blocks::gate_fusion(p, &stage_prefix(s, "fuse"), f_cnn, f_tr)?;
                    f_cnn.add(f_tr)?
                }
                FusionKind::Sk => {
                    (f_cnn, f_tr) = blocks::sk_fusion(p, &stage_prefix(s, "fuse"), f_cnn, f_tr)?;
                    f_cnn
                }
                FusionKind::Add => {
                    f_cnn = f_cnn.add(f_tr)?;
                    f_tr = f_cnn;
                    f_cnn
                }
                FusionKind::None if cfg.has_cnn() => f_cnn,
                FusionKind::None => f_tr,
            };
            levels.push(merged);
        }

        let mut x = levels.pop().expect("at least one stage");
        if ds {
            for s in (0..cfg.stages).rev() {
                x = blocks::conv(p, &format!("head.up{s}"), x.pixel_shuffle(2)?, 1, 1, 1)?;
                x = x.add(levels[s])?;
            }
        } else {
            x = x.add(shallow)?;
        }
        let residual = blocks::conv(p, "head.out", x, 1, 1, 1)?;
        image.add(residual)
    }

    /// Restores one image outside of training: no gradients, output clamped
    /// to [0,1].
    pub fn infer(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(image.shape())?;
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.params, false);
        let x = tape.constant(image.clone());
        let y = self.forward(&binder, x)?;
        let out = y.value();
        Ok(out.map(|v| v.max(T::zero()).min(T::one())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            stages: 2,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn identity_at_init() {
        let m = Model::<f32>::build(&small(), 3).unwrap();
        let img = Tensor::from_fn(&[3, 8, 8], |i| (i % 17) as f32 / 17.0);
        assert_eq!(m.infer(&img).unwrap(), img);
    }

    #[test]
    fn rejects_indivisible_input() {
        let m = Model::<f32>::build(&small(), 3).unwrap();
        let msg = m.infer(&Tensor::zeros(&[3, 6, 8])).unwrap_err().to_string();
        assert!(msg.contains("divisible by 4"), "{msg}");
        assert!(m.infer(&Tensor::zeros(&[1, 8, 8])).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f32>::build(&small(), 11).unwrap();
        let b = Model::<f32>::build(&small(), 11).unwrap();
        let c = Model::<f32>::build(&small(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_binds_every_parameter() {
        for fusion in [FusionKind::Gate, FusionKind::Sk, FusionKind::Add] {
            let cfg = ModelConfig { fusion, ..small() };
            let m = Model::<f32>::build(&cfg, 0).unwrap();
            let tape = Tape::new();
            let b = Binder::new(&tape, &m.params, true);
            m.forward(&b, tape.constant(Tensor::zeros(&[3, 8, 8]))).unwrap();
            assert!(b.unbound().is_empty(), "{fusion}: {:?}", b.unbound());
        }
    }
}
