//! Network assembly: configuration, presets, parameter initialization,
//! and the encoder/bottleneck/decoder forward pass.
//!
//! All four presets share one skeleton. The encoder runs `depth` blocks,
//! each followed by a 2x2 max pool; the bottleneck widens once more; the
//! decoder mirrors the encoder with 2x2 stride-2 transposed convolutions,
//! concatenating each skip in front of its decoder block; a 1x1 head maps
//! to the output channel count. Blocks preserve spatial size, so the
//! output mask matches the input resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{materialize_decls, BlockSpec, Init, Mode, ParamDecl, Session};
use crate::error::{bail_spec, Error, Result};
use crate::ops::{self, ConvSpec};
use crate::params::ParamSet;
use crate::tape::Value;
use crate::tensor::{dims, Scalar, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Unet,
    Lunet,
    Punet,
    Plunet,
}

impl Variant {
    pub fn parse(name: &str) -> Result<Variant> {
        match name {
            "unet" => Ok(Variant::Unet),
            "lunet" => Ok(Variant::Lunet),
            "punet" => Ok(Variant::Punet),
            "plunet" => Ok(Variant::Plunet),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}, expected unet|lunet|punet|plunet"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::Lunet => "lunet",
            Variant::Punet => "punet",
            Variant::Plunet => "plunet",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    ConvBlock,
    Lg,
    Ls,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckKind {
    ConvBlock,
    Ps,
}

fn default_in_channels() -> usize {
    3
}

fn default_out_channels() -> usize {
    1
}

fn default_se_reduction() -> usize {
    16
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub variant: Variant,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_out_channels")]
    pub out_channels: usize,
    pub depth: usize,
    pub widths: Vec<usize>,
    pub bottleneck_width: usize,
    pub block_kind: BlockKind,
    pub bottleneck_kind: BottleneckKind,
    #[serde(default = "default_se_reduction")]
    pub se_reduction: usize,
}

impl ArchConfig {
    pub fn preset(variant: Variant) -> ArchConfig {
        let (depth, widths, bottleneck_width, block_kind, bottleneck_kind) = match variant {
            Variant::Unet => (
                4,
                vec![64, 128, 256, 512],
                1024,
                BlockKind::ConvBlock,
                BottleneckKind::ConvBlock,
            ),
            Variant::Lunet => (
                4,
                vec![64, 128, 256, 512],
                1024,
                BlockKind::Ls,
                BottleneckKind::ConvBlock,
            ),
            Variant::Punet => (
                4,
                vec![64, 128, 256, 512],
                1024,
                BlockKind::ConvBlock,
                BottleneckKind::Ps,
            ),
            Variant::Plunet => (
                3,
                vec![64, 128, 256],
                512,
                BlockKind::Ls,
                BottleneckKind::Ps,
            ),
        };
        ArchConfig {
            variant,
            in_channels: default_in_channels(),
            out_channels: default_out_channels(),
            depth,
            widths,
            bottleneck_width,
            block_kind,
            bottleneck_kind,
            se_reduction: default_se_reduction(),
        }
    }

    pub fn from_json(text: &str) -> Result<ArchConfig> {
        let cfg: ArchConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("bad architecture config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            bail_spec!("depth must be at least 1");
        }
        if self.widths.len() != self.depth {
            bail_spec!(
                "widths list has {} entries but depth is {}",
                self.widths.len(),
                self.depth
            );
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            bail_spec!("channel counts must be positive");
        }
        if self.widths.iter().any(|&w| w == 0) || self.bottleneck_width == 0 {
            bail_spec!("widths must be positive");
        }
        let model = Model {
            config: self.clone(),
        };
        for (_, spec) in model.block_specs() {
            spec.validate()?;
        }
        Ok(())
    }
}

/// A configured network: owns no tensors, only the recipe. Parameters
/// live in a [`ParamSet`] created by [`Model::init_params`] or loaded
/// from a checkpoint.
pub struct Model {
    config: ArchConfig,
}

impl Model {
    pub fn new(config: ArchConfig) -> Result<Model> {
        config.validate()?;
        Ok(Model { config })
    }

    pub fn preset(variant: Variant) -> Model {
        Model {
            config: ArchConfig::preset(variant),
        }
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    fn pathway_block(&self, in_ch: usize, out_ch: usize) -> BlockSpec {
        match self.config.block_kind {
            BlockKind::ConvBlock => BlockSpec::ConvBlock { in_ch, out_ch },
            BlockKind::Lg => BlockSpec::Lg { in_ch, out_ch },
            BlockKind::Ls => BlockSpec::Ls {
                in_ch,
                out_ch,
                se_reduction: self.config.se_reduction,
            },
        }
    }

    fn bottleneck_block(&self) -> BlockSpec {
        let in_ch = *self.config.widths.last().expect("validated depth >= 1");
        let out_ch = self.config.bottleneck_width;
        match self.config.bottleneck_kind {
            BottleneckKind::ConvBlock => BlockSpec::ConvBlock { in_ch, out_ch },
            BottleneckKind::Ps => BlockSpec::Ps {
                in_ch,
                out_ch,
                se_reduction: self.config.se_reduction,
            },
        }
    }

    /// Every block in the network with its parameter path, encoder first,
    /// then bottleneck, then decoder.
    pub fn block_specs(&self) -> Vec<(String, BlockSpec)> {
        let cfg = &self.config;
        let mut out = Vec::new();
        let mut prev = cfg.in_channels;
        for (i, &w) in cfg.widths.iter().enumerate() {
            out.push((format!("enc{}", i + 1), self.pathway_block(prev, w)));
            prev = w;
        }
        out.push(("bottleneck".to_string(), self.bottleneck_block()));
        for (i, &w) in cfg.widths.iter().rev().enumerate() {
            out.push((format!("dec{}", i + 1), self.pathway_block(2 * w, w)));
        }
        out
    }

    /// Transposed-convolution stages as (path, in_channels, out_channels),
    /// in decoder order.
    pub fn up_stages(&self) -> Vec<(String, usize, usize)> {
        let cfg = &self.config;
        let mut out = Vec::new();
        let mut prev = cfg.bottleneck_width;
        for (i, &w) in cfg.widths.iter().rev().enumerate() {
            out.push((format!("up{}", i + 1), prev, w));
            prev = w;
        }
        out
    }

    pub fn head_spec(&self) -> ConvSpec {
        ConvSpec::k1(self.config.widths[0], self.config.out_channels)
    }

    pub fn param_decls(&self) -> Result<Vec<ParamDecl>> {
        let mut decls = Vec::new();
        let blocks = self.block_specs();
        let ups = self.up_stages();
        let split = self.config.depth + 1;
        for (path, spec) in &blocks[..split] {
            decls.extend(spec.param_decls(path)?);
        }
        for (i, (up_path, in_ch, out_ch)) in ups.iter().enumerate() {
            decls.push(ParamDecl {
                name: format!("{up_path}.w"),
                dims: dims(*in_ch, *out_ch, 2, 2),
                init: Init::HeUniform { fan_in: *in_ch },
                learnable: true,
            });
            let (path, spec) = &blocks[split + i];
            decls.extend(spec.param_decls(path)?);
        }
        let head = self.head_spec();
        decls.push(ParamDecl {
            name: "head.w".to_string(),
            dims: head.weight_dims(),
            init: Init::HeUniform {
                fan_in: head.in_channels,
            },
            learnable: true,
        });
        decls.push(ParamDecl {
            name: "head.b".to_string(),
            dims: head.bias_dims(),
            init: Init::Zeros,
            learnable: true,
        });
        Ok(decls)
    }

    /// Fresh parameters, fully determined by the seed.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamSet<T>> {
        let decls = self.param_decls()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        materialize_decls(&decls, &mut params, &mut rng)?;
        Ok(params)
    }

    /// Checks channel count and spatial divisibility by `2^depth`.
    pub fn validate_input(&self, d: crate::tensor::Dims) -> Result<()> {
        self.check_input(d)
    }

    fn check_input(&self, d: crate::tensor::Dims) -> Result<()> {
        if d.c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {}",
                self.config.in_channels, d.c
            )));
        }
        let factor = 1usize << self.config.depth;
        if d.h % factor != 0 || d.w % factor != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} not divisible by 2^depth = {}",
                d.h, d.w, factor
            )));
        }
        Ok(())
    }

    /// Runs the network on `x` and returns the head logits (no sigmoid).
    /// Mode and tape behaviour come from the session.
    pub fn forward<T: Scalar>(&self, sess: &mut Session<T>, x: &Tensor<T>) -> Result<Value<T>> {
        self.check_input(x.dims())?;
        let blocks = self.block_specs();
        let ups = self.up_stages();
        let split = self.config.depth + 1;

        let mut cur = sess.tape.leaf(x.clone());
        let mut skips = Vec::with_capacity(self.config.depth);
        for (path, spec) in &blocks[..self.config.depth] {
            cur = spec.forward(sess, path, &cur)?;
            skips.push(cur.clone());
            cur = sess.tape.maxpool2d(&cur)?;
        }
        let (bpath, bspec) = &blocks[self.config.depth];
        cur = bspec.forward(sess, bpath, &cur)?;

        for (i, (up_path, _, _)) in ups.iter().enumerate() {
            let w = sess.bind(&format!("{up_path}.w"))?;
            cur = sess.tape.conv_transpose2d(&cur, &w)?;
            let skip = &skips[self.config.depth - 1 - i];
            cur = sess.tape.concat_channels(&[skip, &cur])?;
            let (path, spec) = &blocks[split + i];
            cur = spec.forward(sess, path, &cur)?;
        }

        let hw = sess.bind("head.w")?;
        let hb = sess.bind("head.b")?;
        sess.tape.conv2d(&cur, &hw, Some(&hb), &self.head_spec())
    }

    /// Inference: eval mode, no tape, sigmoid applied. Running statistics
    /// are read but never written.
    pub fn forward_probs<T: Scalar>(
        &self,
        params: &mut ParamSet<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut sess = Session::new(params, Mode::Eval, false);
        let logits = self.forward(&mut sess, x)?;
        Ok(ops::sigmoid(logits.tensor()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rand_tensor;

    fn tiny_config() -> ArchConfig {
        ArchConfig {
            variant: Variant::Plunet,
            in_channels: 3,
            out_channels: 1,
            depth: 2,
            widths: vec![4, 8],
            bottleneck_width: 16,
            block_kind: BlockKind::Ls,
            bottleneck_kind: BottleneckKind::Ps,
            se_reduction: 2,
        }
    }

    #[test]
    fn unet_preset_learnable_total() {
        let model = Model::preset(Variant::Unet);
        let params: ParamSet<f32> = model.init_params(0).unwrap();
        assert_eq!(params.learnable_elements(), 31_042_561);
    }

    #[test]
    fn plunet_preset_learnable_total() {
        let model = Model::preset(Variant::Plunet);
        let params: ParamSet<f32> = model.init_params(0).unwrap();
        assert_eq!(params.learnable_elements(), 6_524_185);
    }

    #[test]
    fn preset_totals_sit_within_a_fifth_of_published_sizes() {
        let unet: ParamSet<f32> = Model::preset(Variant::Unet).init_params(0).unwrap();
        let plunet: ParamSet<f32> = Model::preset(Variant::Plunet).init_params(0).unwrap();
        let ratio_unet = unet.learnable_elements() as f64 / 34_530_000.0;
        let ratio_plunet = plunet.learnable_elements() as f64 / 6_220_000.0;
        assert!((0.8..=1.2).contains(&ratio_unet), "{ratio_unet}");
        assert!((0.8..=1.2).contains(&ratio_plunet), "{ratio_plunet}");
    }

    #[test]
    fn tiny_model_forward_preserves_spatial_size() {
        let model = Model::new(tiny_config()).unwrap();
        let mut params: ParamSet<f32> = model.init_params(1).unwrap();
        let x = rand_tensor(dims(2, 3, 16, 16), 2);
        let probs = model.forward_probs(&mut params, &x).unwrap();
        assert_eq!(probs.dims(), dims(2, 1, 16, 16));
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn indivisible_input_is_rejected_with_depth_in_message() {
        let model = Model::new(tiny_config()).unwrap();
        let mut params: ParamSet<f32> = model.init_params(1).unwrap();
        let x = rand_tensor(dims(1, 3, 18, 16), 3);
        let err = model.forward_probs(&mut params, &x).unwrap_err();
        assert!(err.to_string().contains("2^depth"));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let model = Model::new(tiny_config()).unwrap();
        let mut params: ParamSet<f32> = model.init_params(1).unwrap();
        let x = rand_tensor(dims(1, 4, 16, 16), 3);
        assert!(model.forward_probs(&mut params, &x).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let model = Model::new(tiny_config()).unwrap();
        let a: ParamSet<f64> = model.init_params(9).unwrap();
        let b: ParamSet<f64> = model.init_params(9).unwrap();
        let c: ParamSet<f64> = model.init_params(10).unwrap();
        for (ea, eb) in a.iter().zip(b.iter()) {
            assert_eq!(ea.tensor.data(), eb.tensor.data());
        }
        let differs = a
            .iter()
            .zip(c.iter())
            .any(|(ea, ec)| ea.tensor.data() != ec.tensor.data());
        assert!(differs);
    }

    #[test]
    fn bn_state_is_not_learnable() {
        let model = Model::new(tiny_config()).unwrap();
        let params: ParamSet<f32> = model.init_params(0).unwrap();
        let state: Vec<_> = params
            .iter()
            .filter(|e| !e.learnable)
            .map(|e| e.name.clone())
            .collect();
        assert!(!state.is_empty());
        assert!(state.iter().all(|n| n.contains("running_")));
    }

    #[test]
    fn config_json_round_trip_and_unknown_field_rejection() {
        let cfg = ArchConfig::preset(Variant::Plunet);
        let text = cfg.to_json();
        let back = ArchConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);

        let with_extra = text.replacen('{', "{\n  \"surprise\": 1,", 1);
        assert!(ArchConfig::from_json(&with_extra).is_err());

        let defaults = r#"{
            "variant": "unet",
            "depth": 1,
            "widths": [4],
            "bottleneck_width": 8,
            "block_kind": "conv_block",
            "bottleneck_kind": "conv_block"
        }"#;
        let cfg = ArchConfig::from_json(defaults).unwrap();
        assert_eq!(cfg.in_channels, 3);
        assert_eq!(cfg.out_channels, 1);
        assert_eq!(cfg.se_reduction, 16);
    }

    #[test]
    fn depth_widths_mismatch_is_rejected() {
        let mut cfg = tiny_config();
        cfg.depth = 3;
        assert!(cfg.validate().is_err());
        assert!(Model::new(cfg).is_err());
    }

    #[test]
    fn plunet_records_three_pools_three_ups_and_a_pyramid_bottleneck() {
        let model = Model::preset(Variant::Plunet);
        let mut params: ParamSet<f32> = model.init_params(0).unwrap();
        assert!(params.contains("bottleneck.branch_d18.dw.w"));
        let x = rand_tensor(dims(1, 3, 16, 16), 4);
        let mut sess = Session::new(&mut params, Mode::Eval, true);
        model.forward(&mut sess, &x).unwrap();
        let kinds = sess.tape.op_kinds();
        let pools = kinds.iter().filter(|k| **k == "maxpool2d").count();
        let ups = kinds.iter().filter(|k| **k == "conv_transpose2d").count();
        assert_eq!(pools, 3);
        assert_eq!(ups, 3);
    }

    #[test]
    fn presets_match_their_published_shapes() {
        let unet = ArchConfig::preset(Variant::Unet);
        assert_eq!(unet.depth, 4);
        assert_eq!(unet.widths, [64, 128, 256, 512]);
        assert_eq!(unet.bottleneck_width, 1024);
        let plunet = ArchConfig::preset(Variant::Plunet);
        assert_eq!(plunet.depth, 3);
        assert_eq!(plunet.widths, [64, 128, 256]);
        assert_eq!(plunet.bottleneck_width, 512);
        assert_eq!(plunet.bottleneck_kind, BottleneckKind::Ps);
    }
}
