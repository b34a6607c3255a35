//! UNet baseline denoiser.
//!
//! A conventional encoder/decoder with skip connections, used as the
//! reference point the multi-resolution network is compared against. Every
//! encoder layer is a stride-2 3x3 convolution (+ instance norm + ReLU) that
//! halves the resolution and doubles the channel count, starting at
//! `init_channels` and capped at `max_channels`, until the map is 1x1 — so a
//! 2^D input yields D encoder layers. A 1x1 convolution forms the bottleneck.
//! Each decoder step bilinearly upsamples by two, concatenates the encoder
//! feature of that resolution (the raw input at full resolution), and applies
//! a 3x3 conv + norm + ReLU. A final 3x3 convolution + ReLU predicts the
//! image.
//!
//! Instance norm needs more than one pixel per plane, so the two layers that
//! touch 1x1 maps (the last encoder layer and the bottleneck) are plain
//! conv + ReLU.

use super::{ArchDescriptor, GraphBuilder, GraphMeta, ModelGraph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::DType;

/// UNet hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct UnetConfig {
    /// Side length of the (square) input; must be a power of two >= 4.
    pub input_size: usize,
    /// Channels after the first encoder layer.
    pub init_channels: usize,
    /// Channel cap for the deep layers.
    pub max_channels: usize,
    /// Instance-norm epsilon.
    pub in_eps: f64,
}

impl Default for UnetConfig {
    /// Desk-scale configuration: 64x64 inputs, 32 initial channels, capped
    /// at 512.
    fn default() -> UnetConfig {
        UnetConfig {
            input_size: 64,
            init_channels: 32,
            max_channels: 512,
            in_eps: 1e-5,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.input_size.is_power_of_two() || self.input_size < 4 {
            return Err(Error::Config(format!(
                "unet input size must be a power of two >= 4, got {}",
                self.input_size
            )));
        }
        if self.init_channels == 0 {
            return Err(Error::Config("unet init_channels must be >= 1".into()));
        }
        if self.max_channels < self.init_channels {
            return Err(Error::Config(format!(
                "unet max_channels ({}) must be >= init_channels ({})",
                self.max_channels, self.init_channels
            )));
        }
        if !self.in_eps.is_finite() || self.in_eps < 0.0 {
            return Err(Error::Config(format!(
                "unet instance-norm eps must be finite and >= 0, got {}",
                self.in_eps
            )));
        }
        Ok(())
    }

    /// Encoder depth: one stride-2 layer per halving down to 1x1.
    pub fn depth(&self) -> usize {
        self.input_size.trailing_zeros() as usize
    }

    /// Output channels of encoder layer `i` (1-based): doubled per layer
    /// from `init_channels`, capped at `max_channels`.
    pub fn encoder_channels(&self, i: usize) -> usize {
        let doubled = self.init_channels.saturating_mul(1usize << (i - 1));
        doubled.min(self.max_channels)
    }
}

/// Build a UNet graph with freshly initialized parameters.
pub fn build_unet(cfg: &UnetConfig, seed: u64, dtype: DType) -> Result<ModelGraph> {
    cfg.validate()?;
    let depth = cfg.depth();
    let eps = cfg.in_eps;
    let mut b = GraphBuilder::new(seed, dtype);

    // Encoder; feats[i] is the feature map at resolution input/2^i.
    let mut feats: Vec<NodeId> = vec![b.input()];
    let mut chs: Vec<usize> = vec![1];
    for i in 1..=depth {
        let c_in = chs[i - 1];
        let c_out = cfg.encoder_channels(i);
        let out_spatial = cfg.input_size >> i;
        let name = format!("enc{i}");
        let node = if out_spatial > 1 {
            b.conv_in_relu(&name, feats[i - 1], c_in, c_out, 3, 2, 1, eps)
        } else {
            let c = b.conv(&format!("{name}.conv"), feats[i - 1], c_in, c_out, 3, 2, 1);
            b.relu(&format!("{name}.relu"), c)
        };
        feats.push(node);
        chs.push(c_out);
    }

    // 1x1 bottleneck on the 1x1 map.
    let bc = b.conv(
        "bottleneck.conv",
        feats[depth],
        chs[depth],
        chs[depth],
        1,
        1,
        0,
    );
    let mut z = b.relu("bottleneck.relu", bc);
    let mut zc = chs[depth];

    // Decoder with skip connections.
    for i in (1..=depth).rev() {
        let name = format!("dec{i}");
        let up = b.upsample(&format!("{name}.up"), z, 2);
        let cat = b.concat(&format!("{name}.cat"), vec![up, feats[i - 1]]);
        let c_out = if i >= 2 {
            cfg.encoder_channels(i - 1)
        } else {
            cfg.init_channels
        };
        z = b.conv_in_relu(&name, cat, zc + chs[i - 1], c_out, 3, 1, 1, eps);
        zc = c_out;
    }

    // Prediction head.
    let hc = b.conv("head.conv", z, zc, 1, 3, 1, 1);
    b.relu("head.relu", hc);

    b.finish(GraphMeta {
        arch: ArchDescriptor::Unet(cfg.clone()),
        input_divisor: 1,
        fixed_input: Some((cfg.input_size, cfg.input_size)),
        input_channels: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fdcheck::fd_check_model;
    use crate::tensor::{Shape4, Tensor};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> UnetConfig {
        UnetConfig {
            input_size: 8,
            init_channels: 2,
            max_channels: 8,
            in_eps: 1e-5,
        }
    }

    #[test]
    fn channel_ladder_doubles_until_capped() {
        let cfg = UnetConfig::default();
        assert_eq!(cfg.depth(), 6);
        let got: Vec<usize> = (1..=6).map(|i| cfg.encoder_channels(i)).collect();
        assert_eq!(got, vec![32, 64, 128, 256, 512, 512]);
    }

    /// Independent parameter-count formula from the architecture description.
    fn expected_params(cfg: &UnetConfig) -> usize {
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let norm = |c: usize| 2 * c;
        let depth = cfg.depth();
        let ec = |i: usize| cfg.encoder_channels(i);
        let mut n = 0;
        // Encoder: layer depth lands on 1x1 and carries no norm.
        for i in 1..=depth {
            let ci = if i == 1 { 1 } else { ec(i - 1) };
            n += conv(ci, ec(i), 3);
            if i < depth {
                n += norm(ec(i));
            }
        }
        n += conv(ec(depth), ec(depth), 1); // bottleneck
        let mut zc = ec(depth);
        for i in (1..=depth).rev() {
            let skip = if i == 1 { 1 } else { ec(i - 1) };
            let c_out = if i >= 2 { ec(i - 1) } else { cfg.init_channels };
            n += conv(zc + skip, c_out, 3) + norm(c_out);
            zc = c_out;
        }
        n + conv(zc, 1, 3)
    }

    #[test]
    fn param_count_matches_formula() {
        for cfg in [UnetConfig::default(), tiny_config()] {
            let g = build_unet(&cfg, 5, DType::F32).unwrap();
            assert_eq!(
                g.count_params(),
                expected_params(&cfg),
                "mismatch for input size {}",
                cfg.input_size
            );
        }
    }

    #[test]
    fn tiny_param_count_by_hand() {
        // input 8 -> depth 3, encoder channels 2, 4, 8.
        // enc1: 2*1*9+2 + 4 = 24; enc2: 4*2*9+4 + 8 = 84; enc3: 8*4*9+8 = 296.
        // bottleneck: 8*8+8 = 72.
        // dec3: conv(8+4 -> 4): 4*12*9+4 + 8 = 444;
        // dec2: conv(4+2 -> 2): 2*6*9+2 + 4 = 114;
        // dec1: conv(2+1 -> 2): 2*3*9+2 + 4 = 60;
        // head: 1*2*9+1 = 19. Total 24+84+296+72+444+114+60+19 = 1113.
        let g = build_unet(&tiny_config(), 5, DType::F64).unwrap();
        assert_eq!(g.count_params(), 1113);
    }

    #[test]
    fn forward_preserves_shape_and_is_nonnegative() {
        let g = build_unet(&UnetConfig::default(), 2, DType::F32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..64 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = Tensor::from_vec((1, 1, 64, 64), data).unwrap().cast(DType::F32);
        let (y, _) = g.forward(&x, false).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 64, 64));
        assert!(y.to_f64_vec().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn wrong_input_size_is_a_config_error() {
        let g = build_unet(&UnetConfig::default(), 2, DType::F32).unwrap();
        let x = Tensor::filled((1, 1, 32, 32), 0.5, DType::F32).unwrap();
        assert!(matches!(
            g.forward(&x, false).unwrap_err(),
            crate::Error::Config(_)
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = UnetConfig::default();
        cfg.input_size = 48; // not a power of two
        assert!(build_unet(&cfg, 0, DType::F32).is_err());

        let mut cfg = UnetConfig::default();
        cfg.max_channels = 16; // below init_channels
        assert!(build_unet(&cfg, 0, DType::F32).is_err());
    }

    #[test]
    fn builds_are_seed_deterministic() {
        let cfg = tiny_config();
        let a = build_unet(&cfg, 31, DType::F32).unwrap();
        let b = build_unet(&cfg, 31, DType::F32).unwrap();
        assert_eq!(a.params().tensors(), b.params().tensors());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = build_unet(&tiny_config(), 77, DType::F64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let data: Vec<f64> = (0..8 * 8).map(|_| rng.random_range(0.1..1.0)).collect();
        let x = Tensor::from_vec((1, 1, 8, 8), data).unwrap();
        let err = fd_check_model(&g, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "unet end-to-end gradcheck error {err}");
    }
}
