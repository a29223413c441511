use ndarray::{ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{Conv1d, Dense};
use crate::error::{Error, Result};

/// Architecture hyper-parameters of the bridging network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub conv_channels: usize,
    pub frame_kernel: usize,
    /// Bottleneck of the squeeze-excitation gate.
    pub bottleneck_dim: usize,
    /// Hidden width of the channel-time attention.
    pub attention_dim: usize,
    pub res2_scale: usize,
    pub res2_kernel: usize,
    pub res2_dilation: usize,
    /// Number of stacked Res2 + SE blocks.
    pub n_blocks: usize,
    pub fc_nodes: usize,
    /// Length of the recognition logits; equals the OA grid length.
    pub logits_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            conv_channels: 256,
            frame_kernel: 5,
            bottleneck_dim: 256,
            attention_dim: 256,
            res2_scale: 8,
            res2_kernel: 3,
            res2_dilation: 2,
            n_blocks: 1,
            fc_nodes: 384,
            logits_dim: 11,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration with logits bound to a grid of step `k`.
    pub fn for_grid(k: f64) -> Result<Self> {
        let grid = crate::audio::OaGrid::new(k)?;
        Ok(Self {
            logits_dim: grid.len(),
            ..Self::default()
        })
    }

    /// A small configuration for tests and desk-scale experiments.
    pub fn tiny() -> Self {
        Self {
            conv_channels: 16,
            bottleneck_dim: 8,
            attention_dim: 8,
            res2_scale: 4,
            fc_nodes: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_mels == 0 || self.conv_channels == 0 || self.fc_nodes == 0 {
            return bad("n_mels, conv_channels and fc_nodes must be positive".into());
        }
        if self.res2_scale < 2 || self.conv_channels % self.res2_scale != 0 {
            return bad(format!(
                "res2_scale {} must be >= 2 and divide conv_channels {}",
                self.res2_scale, self.conv_channels
            ));
        }
        if self.frame_kernel % 2 == 0 || self.res2_kernel % 2 == 0 {
            return bad("kernel sizes must be odd".into());
        }
        if self.res2_dilation == 0 || self.bottleneck_dim == 0 || self.attention_dim == 0 {
            return bad("dilation and bottleneck widths must be positive".into());
        }
        if self.n_blocks == 0 {
            return bad("at least one Res2 block is required".into());
        }
        if self.logits_dim < 2 {
            return bad("logits_dim must be at least 2".into());
        }
        Ok(())
    }

    pub fn group_width(&self) -> usize {
        self.conv_channels / self.res2_scale
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// One Res2 block followed by a squeeze-excitation gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Res2Block {
    pub conv_in: Conv1d,
    /// One convolution per group except the first, which passes through.
    pub branches: Vec<Conv1d>,
    pub conv_out: Conv1d,
    pub se_squeeze: Dense,
    pub se_excite: Dense,
}

/// Every trainable tensor of the bridging network.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub frame: Conv1d,
    pub blocks: Vec<Res2Block>,
    pub attn_hidden: Conv1d,
    pub attn_score: Conv1d,
    pub fc: Dense,
    pub ri_head: Dense,
    pub pq_head: Dense,
}

impl Parameters {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::build(cfg, |i, o, k, d| Conv1d::zeros(i, o, k, d), Dense::zeros)
    }

    fn build(
        cfg: &ModelConfig,
        mut conv: impl FnMut(usize, usize, usize, usize) -> Conv1d,
        mut dense: impl FnMut(usize, usize) -> Dense,
    ) -> Self {
        let c = cfg.conv_channels;
        let w = cfg.group_width();
        let frame = conv(2 * cfg.n_mels, c, cfg.frame_kernel, 1);
        let blocks = (0..cfg.n_blocks)
            .map(|_| Res2Block {
                conv_in: conv(c, c, 1, 1),
                branches: (1..cfg.res2_scale)
                    .map(|_| conv(w, w, cfg.res2_kernel, cfg.res2_dilation))
                    .collect(),
                conv_out: conv(c, c, 1, 1),
                se_squeeze: dense(c, cfg.bottleneck_dim),
                se_excite: dense(cfg.bottleneck_dim, c),
            })
            .collect();
        Self {
            frame,
            blocks,
            attn_hidden: conv(c, cfg.attention_dim, 1, 1),
            attn_score: conv(cfg.attention_dim, c, 1, 1),
            fc: dense(2 * c, cfg.fc_nodes),
            ri_head: dense(cfg.fc_nodes, cfg.logits_dim),
            pq_head: dense(cfg.fc_nodes, 1),
        }
    }

    /// Tensors in a fixed order, with stable names.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        fn push_conv<'a>(name: String, c: &'a Conv1d, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
            out.push((format!("{name}.weight"), c.weight.view().into_dyn()));
            out.push((format!("{name}.bias"), c.bias.view().into_dyn()));
        }
        fn push_dense<'a>(name: String, d: &'a Dense, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
            out.push((format!("{name}.weight"), d.weight.view().into_dyn()));
            out.push((format!("{name}.bias"), d.bias.view().into_dyn()));
        }
        push_conv("frame".into(), &self.frame, &mut out);
        for (b, block) in self.blocks.iter().enumerate() {
            push_conv(format!("block{b}.conv_in"), &block.conv_in, &mut out);
            for (g, br) in block.branches.iter().enumerate() {
                push_conv(format!("block{b}.branch{}", g + 1), br, &mut out);
            }
            push_conv(format!("block{b}.conv_out"), &block.conv_out, &mut out);
            push_dense(format!("block{b}.se_squeeze"), &block.se_squeeze, &mut out);
            push_dense(format!("block{b}.se_excite"), &block.se_excite, &mut out);
        }
        push_conv("attn_hidden".into(), &self.attn_hidden, &mut out);
        push_conv("attn_score".into(), &self.attn_score, &mut out);
        push_dense("fc".into(), &self.fc, &mut out);
        push_dense("ri_head".into(), &self.ri_head, &mut out);
        push_dense("pq_head".into(), &self.pq_head, &mut out);
        out
    }

    /// Mutable tensors in the same order as [`Parameters::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out: Vec<ArrayViewMutD<'_, f64>> = Vec::new();
        fn conv<'a>(c: &'a mut Conv1d, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
            out.push(c.weight.view_mut().into_dyn());
            out.push(c.bias.view_mut().into_dyn());
        }
        fn dense<'a>(d: &'a mut Dense, out: &mut Vec<ArrayViewMutD<'a, f64>>) {
            out.push(d.weight.view_mut().into_dyn());
            out.push(d.bias.view_mut().into_dyn());
        }
        conv(&mut self.frame, &mut out);
        for block in &mut self.blocks {
            conv(&mut block.conv_in, &mut out);
            for br in &mut block.branches {
                conv(br, &mut out);
            }
            conv(&mut block.conv_out, &mut out);
            dense(&mut block.se_squeeze, &mut out);
            dense(&mut block.se_excite, &mut out);
        }
        conv(&mut self.attn_hidden, &mut out);
        conv(&mut self.attn_score, &mut out);
        dense(&mut self.fc, &mut out);
        dense(&mut self.ri_head, &mut out);
        dense(&mut self.pq_head, &mut out);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// All values concatenated in enumeration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
            .collect()
    }

    /// Overwrites every value from a flat slice in enumeration order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "expected {} values, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for mut t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for mut t in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    /// Global L2 norm over all tensors.
    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn add_assign(&mut self, other: &Parameters) {
        let src: Vec<Vec<f64>> = other
            .tensors()
            .iter()
            .map(|(_, t)| t.iter().copied().collect())
            .collect();
        for (mut dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Parameters::zeros(cfg);
        let want = expected.tensors();
        let have = self.tensors();
        if want.len() != have.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                want.len(),
                have.len()
            )));
        }
        for ((wn, wt), (hn, ht)) in want.iter().zip(&have) {
            if wn != hn || wt.shape() != ht.shape() {
                return Err(Error::Shape(format!(
                    "tensor {hn} has shape {:?}, config expects {wn} {:?}",
                    ht.shape(),
                    wt.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Output heads start at this fraction of the He scale so that neither
/// sigmoid is saturated before training.
pub const HEAD_INIT_GAIN: f64 = 0.1;

/// He-normal weights, zero biases; deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Parameters> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut p = Parameters::build(
        cfg,
        |i, o, k, d| Conv1d::he_init(i, o, k, d, rng),
        // A second closure can't borrow rng mutably, so dense layers draw from a derived stream.
        {
            let mut dense_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            move |i, o| Dense::he_init(i, o, &mut dense_rng)
        },
    );
    p.ri_head.weight *= HEAD_INIT_GAIN;
    p.pq_head.weight *= HEAD_INIT_GAIN;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::tiny();
        assert_eq!(init_params(&cfg, 3).unwrap(), init_params(&cfg, 3).unwrap());
        assert_ne!(init_params(&cfg, 3).unwrap(), init_params(&cfg, 4).unwrap());
    }

    #[test]
    fn biases_start_at_zero() {
        let p = init_params(&ModelConfig::tiny(), 1).unwrap();
        for (name, t) in p.tensors() {
            if name.ends_with(".bias") {
                assert!(t.iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn he_scaling_matches_fan_in() {
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 11).unwrap();
        // frame kernel: 16 × 160 × 5 = 12,800 draws with fan-in 800
        let w = p.frame.weight.as_slice().unwrap();
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let expected = (2.0 / 800.0f64).sqrt();
        assert!((std / expected - 1.0).abs() < 0.2, "std {std} vs {expected}");
    }

    #[test]
    fn heads_start_small() {
        let cfg = ModelConfig::default();
        let p = init_params(&cfg, 5).unwrap();
        let w = p.ri_head.weight.as_slice().unwrap();
        let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        let expected = HEAD_INIT_GAIN * (2.0 / cfg.fc_nodes as f64).sqrt();
        assert!((std / expected - 1.0).abs() < 0.2, "std {std} vs {expected}");
    }

    #[test]
    fn enumeration_is_stable_and_complete() {
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 1).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.first().unwrap(), "frame.weight");
        assert_eq!(names.last().unwrap(), "pq_head.bias");
        assert_eq!(names.len(), p.clone().tensors_mut().len());
        assert!(names.contains(&"block0.branch3.weight".to_string()));
        assert!(!names.contains(&"block0.branch4.weight".to_string()));
        let flat = p.flatten();
        let mut q = Parameters::zeros(&cfg);
        q.assign_flat(&flat).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.validate().unwrap();
        cfg.res2_scale = 7;
        assert!(cfg.validate().is_err());
        assert_eq!(ModelConfig::for_grid(0.05).unwrap().logits_dim, 21);
        let mut wide = ModelConfig::default();
        wide.conv_channels = 384;
        wide.validate().unwrap();
    }

    #[test]
    fn shape_check_detects_logits_mismatch() {
        let p = init_params(&ModelConfig::tiny(), 1).unwrap();
        let mut other = ModelConfig::tiny();
        other.logits_dim = 21;
        assert!(matches!(p.check_shapes(&other), Err(Error::Shape(_))));
        p.check_shapes(&ModelConfig::tiny()).unwrap();
    }
}
