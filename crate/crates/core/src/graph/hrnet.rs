//! HRNet-style multi-resolution denoiser.
//!
//! The network keeps several parallel branches alive, one per resolution:
//! branch `b` runs at 1/2^b of the input resolution with its own channel
//! width. A stem lifts the single-channel image onto branch 0; each stage
//! applies a fixed number of conv+norm+ReLU layers per branch and then fuses
//! information across *all* branch pairs:
//!
//! * same resolution: identity,
//! * higher to lower resolution: a chain of stride-2 3x3 convolutions
//!   stepping through the intermediate channel widths (norm+ReLU between
//!   steps, the final step linear),
//! * lower to higher resolution: bilinear upsampling followed by a linear
//!   1x1 convolution,
//!
//! after which each branch applies ReLU to the sum. A new, coarser branch is
//! spawned from the deepest fused branch after each of the first
//! `branches - 1` stages. The head upsamples every branch to full resolution,
//! concatenates them, and predicts the image with a 3x3 convolution + ReLU.

use super::{ArchDescriptor, GraphBuilder, GraphMeta, ModelGraph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::DType;

/// HRNet hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HrnetConfig {
    /// Number of resolution branches (input must be divisible by
    /// `2^(branches-1)`).
    pub branches: usize,
    /// Channel width per branch; length must equal `branches`.
    pub channels: Vec<usize>,
    /// Number of stages; each stage is convs + fusion. Must be at least
    /// `branches` so every branch comes alive.
    pub stages: usize,
    /// Conv+norm+ReLU layers per branch per stage.
    pub convs_per_stage: usize,
    /// Instance-norm epsilon.
    pub in_eps: f64,
}

impl Default for HrnetConfig {
    /// The desk-scale configuration: four branches at widths 16/32/64/128,
    /// four stages of two convolutions each.
    fn default() -> HrnetConfig {
        HrnetConfig {
            branches: 4,
            channels: vec![16, 32, 64, 128],
            stages: 4,
            convs_per_stage: 2,
            in_eps: 1e-5,
        }
    }
}

impl HrnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches == 0 {
            return Err(Error::Config("hrnet needs at least one branch".into()));
        }
        if self.channels.len() != self.branches {
            return Err(Error::Config(format!(
                "hrnet has {} branches but {} channel widths",
                self.branches,
                self.channels.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("hrnet channel widths must be >= 1".into()));
        }
        if self.stages < self.branches {
            return Err(Error::Config(format!(
                "hrnet needs stages >= branches so every branch is instantiated \
                 (got {} stages for {} branches)",
                self.stages, self.branches
            )));
        }
        if self.convs_per_stage == 0 {
            return Err(Error::Config("hrnet needs at least one conv per stage".into()));
        }
        if !self.in_eps.is_finite() || self.in_eps < 0.0 {
            return Err(Error::Config(format!(
                "hrnet instance-norm eps must be finite and >= 0, got {}",
                self.in_eps
            )));
        }
        Ok(())
    }
}

/// Build an HRNet graph with freshly initialized parameters.
pub fn build_hrnet(cfg: &HrnetConfig, seed: u64, dtype: DType) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut b = GraphBuilder::new(seed, dtype);
    let eps = cfg.in_eps;

    // Stem: lift the image onto branch 0.
    let stem = b.conv_in_relu("stem", b.input(), 1, cfg.channels[0], 3, 1, 1, eps);
    let mut branch: Vec<NodeId> = vec![stem];

    for s in 1..=cfg.stages {
        // Per-branch convolution block.
        for (bi, node) in branch.iter_mut().enumerate() {
            let ch = cfg.channels[bi];
            for ci in 0..cfg.convs_per_stage {
                *node = b.conv_in_relu(&format!("s{s}.b{bi}.c{ci}"), *node, ch, ch, 3, 1, 1, eps);
            }
        }

        // Full pairwise fusion (meaningful once two branches exist).
        if branch.len() >= 2 {
            let mut fused = Vec::with_capacity(branch.len());
            for j in 0..branch.len() {
                let mut terms = Vec::with_capacity(branch.len());
                for (i, &src) in branch.iter().enumerate() {
                    let term = match i.cmp(&j) {
                        std::cmp::Ordering::Equal => src,
                        std::cmp::Ordering::Less => {
                            // Downsample chain i -> j through intermediate widths.
                            let mut cur = src;
                            let steps = j - i;
                            for step in 0..steps {
                                let c_in = cfg.channels[i + step];
                                let c_out = cfg.channels[i + step + 1];
                                let name = format!("f{s}.{i}to{j}.d{step}");
                                cur = if step + 1 < steps {
                                    b.conv_in_relu(&name, cur, c_in, c_out, 3, 2, 1, eps)
                                } else {
                                    b.conv(&format!("{name}.conv"), cur, c_in, c_out, 3, 2, 1)
                                };
                            }
                            cur
                        }
                        std::cmp::Ordering::Greater => {
                            // Upsample then a linear 1x1 channel adapter.
                            let up =
                                b.upsample(&format!("f{s}.{i}to{j}.up"), src, 1 << (i - j));
                            b.conv(
                                &format!("f{s}.{i}to{j}.conv"),
                                up,
                                cfg.channels[i],
                                cfg.channels[j],
                                1,
                                1,
                                0,
                            )
                        }
                    };
                    terms.push(term);
                }
                let sum = b.sum(&format!("f{s}.j{j}.sum"), terms);
                fused.push(b.relu(&format!("f{s}.j{j}.relu"), sum));
            }
            branch = fused;
        }

        // Spawn the next branch from the deepest one.
        if s < cfg.stages && branch.len() < cfg.branches {
            let nb = branch.len();
            let node = b.conv_in_relu(
                &format!("nb{nb}"),
                *branch.last().expect("at least the stem branch"),
                cfg.channels[nb - 1],
                cfg.channels[nb],
                3,
                2,
                1,
                eps,
            );
            branch.push(node);
        }
    }

    // Head: bring all branches to full resolution, concatenate, predict.
    let mut ups = Vec::with_capacity(branch.len());
    for (bi, &node) in branch.iter().enumerate() {
        ups.push(if bi == 0 {
            node
        } else {
            b.upsample(&format!("head.b{bi}.up"), node, 1 << bi)
        });
    }
    let cat = b.concat("head.concat", ups);
    let total: usize = cfg.channels.iter().sum();
    let conv = b.conv("head.conv", cat, total, 1, 3, 1, 1);
    b.relu("head.relu", conv);

    b.finish(GraphMeta {
        arch: ArchDescriptor::Hrnet(cfg.clone()),
        input_divisor: 1 << (cfg.branches - 1),
        fixed_input: None,
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

    fn tiny_config() -> HrnetConfig {
        HrnetConfig {
            branches: 2,
            channels: vec![2, 3],
            stages: 2,
            convs_per_stage: 1,
            in_eps: 1e-5,
        }
    }

    /// Independent parameter-count formula, written directly from the
    /// architecture description (conv: co*ci*k^2 + co; norm: 2c).
    fn expected_params(cfg: &HrnetConfig) -> usize {
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let norm = |c: usize| 2 * c;
        let ch = &cfg.channels;
        let mut n = conv(1, ch[0], 3) + norm(ch[0]); // stem
        let mut alive = 1usize;
        for s in 1..=cfg.stages {
            for bi in 0..alive {
                n += cfg.convs_per_stage * (conv(ch[bi], ch[bi], 3) + norm(ch[bi]));
            }
            if alive >= 2 {
                for j in 0..alive {
                    for i in 0..alive {
                        if i < j {
                            for step in 0..(j - i) {
                                n += conv(ch[i + step], ch[i + step + 1], 3);
                                if step + 1 < j - i {
                                    n += norm(ch[i + step + 1]);
                                }
                            }
                        } else if i > j {
                            n += conv(ch[i], ch[j], 1);
                        }
                    }
                }
            }
            if s < cfg.stages && alive < cfg.branches {
                n += conv(ch[alive - 1], ch[alive], 3) + norm(ch[alive]);
                alive += 1;
            }
        }
        n += conv(ch.iter().sum(), 1, 3); // head
        n
    }

    #[test]
    fn desk_model_param_count_matches_formula() {
        let cfg = HrnetConfig::default();
        let g = build_hrnet(&cfg, 7, DType::F32).unwrap();
        assert_eq!(g.count_params(), expected_params(&cfg));
    }

    #[test]
    fn tiny_model_param_count_matches_formula() {
        let cfg = tiny_config();
        let g = build_hrnet(&cfg, 7, DType::F64).unwrap();
        // By hand: stem 1*2*9+2 + 4 = 24.
        // Stage 1: branch0 conv 2*2*9+2 + 4 = 42; spawn b1: 2*3*9+3 + 6 = 63.
        // Stage 2: b0 42, b1 3*3*9+3+6 = 90;
        //   fusion: 0->1 one step conv 2*3*9+3 = 57 (no norm, single step);
        //           1->0 1x1 conv 3*2+2 = 8.
        // Head: conv (2+3)*9*1+1 = 46. Total = 24+42+63+42+90+57+8+46 = 372.
        assert_eq!(g.count_params(), 372);
        assert_eq!(expected_params(&cfg), 372);
    }

    #[test]
    fn forward_preserves_spatial_shape() {
        let cfg = HrnetConfig::default();
        let g = build_hrnet(&cfg, 3, DType::F32).unwrap();
        let x = Tensor::filled((1, 1, 64, 64), 0.4, DType::F32).unwrap();
        let (y, _) = g.forward(&x, false).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 64, 64));
        // Final ReLU -> non-negative output.
        assert!(y.to_f64_vec().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn indivisible_input_is_a_config_error() {
        let g = build_hrnet(&HrnetConfig::default(), 3, DType::F32).unwrap();
        let x = Tensor::filled((1, 1, 60, 60), 0.4, DType::F32).unwrap();
        let err = g.forward(&x, false).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn same_seed_same_model_different_seed_different_model() {
        let cfg = tiny_config();
        let a = build_hrnet(&cfg, 11, DType::F32).unwrap();
        let b = build_hrnet(&cfg, 11, DType::F32).unwrap();
        let c = build_hrnet(&cfg, 12, DType::F32).unwrap();
        assert_eq!(a.params().tensors(), b.params().tensors());
        assert_ne!(a.params().tensors(), c.params().tensors());
    }

    #[test]
    fn forward_is_deterministic() {
        let g = build_hrnet(&tiny_config(), 5, DType::F32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..8 * 8).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = Tensor::from_vec((1, 1, 8, 8), data).unwrap().cast(DType::F32);
        let (y1, _) = g.forward(&x, false).unwrap();
        let (y2, _) = g.forward(&x, false).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = HrnetConfig::default();
        cfg.channels = vec![16, 32]; // wrong count
        assert!(build_hrnet(&cfg, 0, DType::F32).is_err());

        let mut cfg = HrnetConfig::default();
        cfg.stages = 3; // fewer stages than branches
        assert!(build_hrnet(&cfg, 0, DType::F32).is_err());

        let mut cfg = HrnetConfig::default();
        cfg.convs_per_stage = 0;
        assert!(build_hrnet(&cfg, 0, DType::F32).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = build_hrnet(&tiny_config(), 42, DType::F64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..8 * 8).map(|_| rng.random_range(0.1..1.0)).collect();
        let x = Tensor::from_vec((1, 1, 8, 8), data).unwrap();
        let err = fd_check_model(&g, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "hrnet end-to-end gradcheck error {err}");
    }
}
