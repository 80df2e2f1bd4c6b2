//! Toy-scale multi-attention segmentation network.
//!
//! Encoder: a 3×3 stride-2 stem followed by four stride-2 ResNeXt
//! bottleneck blocks, giving feature maps at strides 2, 4, 8, 16 and 32.
//! Decoder: four stages, each upsampling the deeper map with a 2×2 stride-2
//! transposed convolution, concatenating it with the skip map of the same
//! resolution and passing the pair through an attention block. The last
//! block's output is bilinearly upsampled ×2 and a 1×1 head produces the
//! class logits.
//!
//! Convolutions carry a per-channel affine (scale, bias) instead of batch
//! normalization; activations are ReLU.

pub mod checkpoint;
pub mod data;
pub mod train;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionBlockParams, BlockVars};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::ops::ConvSpec;
use crate::tensor::{Scalar, Tensor};

/// Number of encoder outputs: stem plus four residual stages.
pub const STAGES: usize = 5;

/// Spatial reduction between input and the deepest feature map.
pub const OUTPUT_STRIDE: usize = 1 << STAGES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNeXtBlockConfig {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub cardinality: usize,
    pub stride: usize,
}

impl ResNeXtBlockConfig {
    pub fn validate(&self) -> Result<()> {
        let ResNeXtBlockConfig {
            in_channels,
            mid_channels,
            out_channels,
            cardinality,
            stride,
        } = *self;
        if in_channels == 0 || mid_channels == 0 || out_channels == 0 || cardinality == 0 {
            return Err(Error::Config(format!("ResNeXt block with zero-sized field: {self:?}")));
        }
        if mid_channels % cardinality != 0 {
            return Err(Error::Config(format!(
                "cardinality {cardinality} does not divide {mid_channels} bottleneck channels"
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!("ResNeXt stride must be 1 or 2, got {stride}")));
        }
        Ok(())
    }

    /// Whether the shortcut needs a projection instead of the identity.
    pub fn projects_shortcut(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManetConfig {
    pub input_channels: usize,
    /// Widths of `[stem, res2, res3, res4, res5]`.
    pub stage_channels: [usize; STAGES],
    pub cardinality: usize,
    pub num_classes: usize,
}

impl Default for ManetConfig {
    fn default() -> Self {
        ManetConfig {
            input_channels: 3,
            stage_channels: [8, 16, 32, 64, 128],
            cardinality: 4,
            num_classes: 3,
        }
    }
}

impl ManetConfig {
    /// Narrower widths for quick training runs at 32×32.
    pub fn tiny(num_classes: usize) -> Self {
        ManetConfig {
            input_channels: 3,
            stage_channels: [8, 16, 16, 32, 32],
            cardinality: 4,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config(format!(
                "stage widths must be positive: {:?}",
                self.stage_channels
            )));
        }
        for i in 1..STAGES {
            self.block_config(i).validate()?;
        }
        Ok(())
    }

    /// Configuration of residual stage `stage` (1..=4, i.e. Res-2..Res-5).
    pub fn block_config(&self, stage: usize) -> ResNeXtBlockConfig {
        let out = self.stage_channels[stage];
        ResNeXtBlockConfig {
            in_channels: self.stage_channels[stage - 1],
            mid_channels: (out / 2).max(1),
            out_channels: out,
            cardinality: self.cardinality,
            stride: 2,
        }
    }

    /// Checks that an input of `h×w` survives five halvings exactly.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != self.input_channels {
            return Err(Error::dim(
                "manet",
                format!(
                    "expected a {}×H×W image, got {shape:?}",
                    self.input_channels
                ),
            ));
        }
        if !shape[1].is_multiple_of(OUTPUT_STRIDE) || !shape[2].is_multiple_of(OUTPUT_STRIDE) {
            return Err(Error::dim(
                "manet",
                format!(
                    "spatial size {}×{} must be divisible by {OUTPUT_STRIDE}",
                    shape[1], shape[2]
                ),
            ));
        }
        Ok(())
    }
}

/// Learnable tensors keyed by stable names, plus the seed used to create them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub seed: u64,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(seed: u64) -> Self {
        ModelParams {
            seed,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            seed: self.seed,
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Registers every tensor as a named parameter on `g`.
    pub fn register(&self, g: &mut Graph<T>) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.param(k.clone(), v.clone())))
                .collect(),
        )
    }

    /// Attention-block parameters stored under `prefix`.
    pub fn attention_block(&self, prefix: &str) -> Result<AttentionBlockParams<T>> {
        Ok(AttentionBlockParams {
            fuse_weight: self.get(&format!("{prefix}.fuse.w"))?.clone(),
            fuse_bias: self.get(&format!("{prefix}.fuse.b"))?.clone(),
            kam: attention::KamParams {
                proj: attention::ProjectionWeights::new(
                    self.get(&format!("{prefix}.kam.wq"))?.clone(),
                    self.get(&format!("{prefix}.kam.wk"))?.clone(),
                    self.get(&format!("{prefix}.kam.wv"))?.clone(),
                )?,
                gamma: self.get(&format!("{prefix}.kam.gamma"))?.item()?,
            },
            beta: self.get(&format!("{prefix}.cam.beta"))?.item()?,
        })
    }

    pub fn insert_attention_block(&mut self, prefix: &str, p: AttentionBlockParams<T>) {
        self.insert(format!("{prefix}.fuse.w"), p.fuse_weight);
        self.insert(format!("{prefix}.fuse.b"), p.fuse_bias);
        self.insert(format!("{prefix}.kam.wq"), p.kam.proj.wq);
        self.insert(format!("{prefix}.kam.wk"), p.kam.proj.wk);
        self.insert(format!("{prefix}.kam.wv"), p.kam.proj.wv);
        self.insert(format!("{prefix}.kam.gamma"), Tensor::scalar(p.kam.gamma));
        self.insert(format!("{prefix}.cam.beta"), Tensor::scalar(p.beta));
    }

    /// Sets every attention residual scale (`γ` and `β`) to `value`.
    pub fn set_attention_scales(&mut self, value: T) {
        for (name, t) in self.iter_mut() {
            if name.ends_with(".kam.gamma") || name.ends_with(".cam.beta") {
                t.data_mut()[0] = value;
            }
        }
    }
}

/// Graph handles for a registered [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars(BTreeMap<String, Var>);

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        ParamVars(iter.into_iter().collect())
    }
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    fn block(&self, prefix: &str) -> Result<BlockVars> {
        Ok(BlockVars {
            fuse_weight: self.get(&format!("{prefix}.fuse.w"))?,
            fuse_bias: self.get(&format!("{prefix}.fuse.b"))?,
            wq: self.get(&format!("{prefix}.kam.wq"))?,
            wk: self.get(&format!("{prefix}.kam.wk"))?,
            wv: self.get(&format!("{prefix}.kam.wv"))?,
            gamma: self.get(&format!("{prefix}.kam.gamma"))?,
            beta: self.get(&format!("{prefix}.cam.beta"))?,
        })
    }
}

/// Standard deviation used by the He initializer for a weight of this shape.
///
/// Convolutions (`Cout×Cin/g×kh×kw`) use `fan_in = Cin/g·kh·kw`. Transposed
/// convolutions (`Cin×Cout×k×k`, stride = k) use `fan_in = Cin`, the number
/// of terms feeding each output pixel. Projection matrices (`C×D`) use
/// `fan_in = C`.
pub fn he_std(shape: &[usize], transposed: bool) -> f64 {
    let fan_in = match (shape.len(), transposed) {
        (4, false) => shape[1] * shape[2] * shape[3],
        _ => shape[0],
    };
    (2.0 / fan_in as f64).sqrt()
}

fn conv_weight<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::randn(shape, he_std(shape, false), rng)
}

fn insert_conv_affine<T: Scalar>(
    p: &mut ModelParams<T>,
    prefix: &str,
    shape: [usize; 4],
    rng: &mut ChaCha8Rng,
) {
    p.insert(format!("{prefix}.w"), conv_weight(&shape, rng));
    p.insert(format!("{prefix}.scale"), Tensor::ones(&[shape[0]]));
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[shape[0]]));
}

/// Adds the parameters of one ResNeXt block under `prefix`.
pub fn init_resnext_block<T: Scalar>(
    p: &mut ModelParams<T>,
    prefix: &str,
    cfg: &ResNeXtBlockConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let (cin, mid, cout, g) = (
        cfg.in_channels,
        cfg.mid_channels,
        cfg.out_channels,
        cfg.cardinality,
    );
    insert_conv_affine(p, &format!("{prefix}.reduce"), [mid, cin, 1, 1], rng);
    insert_conv_affine(p, &format!("{prefix}.grouped"), [mid, mid / g, 3, 3], rng);
    insert_conv_affine(p, &format!("{prefix}.expand"), [cout, mid, 1, 1], rng);
    if cfg.projects_shortcut() {
        insert_conv_affine(p, &format!("{prefix}.shortcut"), [cout, cin, 1, 1], rng);
    }
    Ok(())
}

pub fn stage_name(stage: usize) -> String {
    if stage == 0 {
        "stem".to_string()
    } else {
        format!("res{}", stage + 1)
    }
}

/// Decoder stage `i` (1 = deepest) fuses encoder stage `STAGES - 1 - i`.
pub fn decoder_name(i: usize) -> String {
    format!("dec{i}")
}

/// He-initialized convolutions, unit affines, random attention projections
/// and zero attention residual scales. Deterministic in `seed`.
pub fn init_params<T: Scalar>(cfg: &ManetConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new(seed);
    let ch = cfg.stage_channels;

    insert_conv_affine(&mut p, "stem.conv", [ch[0], cfg.input_channels, 3, 3], &mut rng);
    for stage in 1..STAGES {
        init_resnext_block(&mut p, &stage_name(stage), &cfg.block_config(stage), &mut rng)?;
    }
    for i in 1..STAGES {
        let (deep, skip) = (ch[STAGES - i], ch[STAGES - 1 - i]);
        let name = decoder_name(i);
        let up_shape = [deep, skip, 2, 2];
        p.insert(
            format!("{name}.up.w"),
            Tensor::randn(&up_shape, he_std(&up_shape, true), &mut rng),
        );
        p.insert(format!("{name}.up.b"), Tensor::zeros(&[skip]));
        p.insert_attention_block(&name, AttentionBlockParams::init(2 * skip, skip, &mut rng)?);
    }
    p.insert("head.w", conv_weight(&[cfg.num_classes, ch[0], 1, 1], &mut rng));
    p.insert("head.b", Tensor::zeros(&[cfg.num_classes]));
    Ok(p)
}

fn conv_affine_var<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    vars: &ParamVars,
    prefix: &str,
    spec: ConvSpec,
) -> Result<Var> {
    let y = g.conv2d(x, vars.get(&format!("{prefix}.w"))?, spec)?;
    g.channel_affine(
        y,
        vars.get(&format!("{prefix}.scale"))?,
        vars.get(&format!("{prefix}.bias"))?,
    )
}

/// `relu(expand(grouped3×3(reduce(x))) + shortcut(x))`.
pub fn resnext_block_var<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &ResNeXtBlockConfig,
    vars: &ParamVars,
    prefix: &str,
) -> Result<Var> {
    cfg.validate()?;
    let h = conv_affine_var(g, x, vars, &format!("{prefix}.reduce"), ConvSpec::default())?;
    let h = g.relu(h);
    let h = conv_affine_var(
        g,
        h,
        vars,
        &format!("{prefix}.grouped"),
        ConvSpec::new(cfg.stride, 1, cfg.cardinality),
    )?;
    let h = g.relu(h);
    let h = conv_affine_var(g, h, vars, &format!("{prefix}.expand"), ConvSpec::default())?;
    let shortcut = if cfg.projects_shortcut() {
        conv_affine_var(
            g,
            x,
            vars,
            &format!("{prefix}.shortcut"),
            ConvSpec::new(cfg.stride, 0, 1),
        )?
    } else {
        x
    };
    let sum = g.add(h, shortcut)?;
    Ok(g.relu(sum))
}

/// Plain-tensor wrapper around [`resnext_block_var`].
pub fn resnext_block_forward<T: Scalar>(
    x: &Tensor<T>,
    cfg: &ResNeXtBlockConfig,
    params: &ModelParams<T>,
    prefix: &str,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let xv = g.input(x.clone());
    let out = resnext_block_var(&mut g, xv, cfg, &vars, prefix)?;
    Ok(g.value(out).clone())
}

/// The five encoder feature maps, strides 2 through 32.
pub fn encoder_var<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    cfg: &ManetConfig,
    vars: &ParamVars,
) -> Result<[Var; STAGES]> {
    cfg.check_input(g.shape(image))?;
    let stem = conv_affine_var(g, image, vars, "stem.conv", ConvSpec::new(2, 1, 1))?;
    let mut maps = [g.relu(stem); STAGES];
    for stage in 1..STAGES {
        maps[stage] = resnext_block_var(
            g,
            maps[stage - 1],
            &cfg.block_config(stage),
            vars,
            &stage_name(stage),
        )?;
    }
    Ok(maps)
}

pub fn encoder_forward<T: Scalar>(
    image: &Tensor<T>,
    cfg: &ManetConfig,
    params: &ModelParams<T>,
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.input(image.clone());
    let maps = encoder_var(&mut g, x, cfg, &vars)?;
    Ok(maps.iter().map(|&m| g.value(m).clone()).collect())
}

/// How decoder stages combine upsampled and skip features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Full attention block.
    Attention,
    /// Fusion convolution only, both attention branches removed.
    ConvOnly,
}

/// Class logits `k×H×W` for a `C_in×H×W` image.
pub fn manet_var<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    cfg: &ManetConfig,
    vars: &ParamVars,
    fusion: Fusion,
) -> Result<Var> {
    let maps = encoder_var(g, image, cfg, vars)?;
    let mut deep = maps[STAGES - 1];
    for i in 1..STAGES {
        let name = decoder_name(i);
        let up = g.conv_transpose2d(deep, vars.get(&format!("{name}.up.w"))?, 2)?;
        let up = g.channel_bias(up, vars.get(&format!("{name}.up.b"))?)?;
        let block = vars.block(&name)?;
        let skip = maps[STAGES - 1 - i];
        deep = match fusion {
            Fusion::Attention => attention::attention_block_var(g, up, skip, &block)?,
            Fusion::ConvOnly => attention::fuse_var(g, up, skip, &block)?,
        };
    }
    let full = g.bilinear_upsample(deep, 2)?;
    let logits = g.conv2d(full, vars.get("head.w")?, ConvSpec::default())?;
    g.channel_bias(logits, vars.get("head.b")?)
}

pub fn manet_forward<T: Scalar>(
    image: &Tensor<T>,
    cfg: &ManetConfig,
    params: &ModelParams<T>,
) -> Result<Tensor<T>> {
    manet_forward_with(image, cfg, params, Fusion::Attention)
}

pub fn manet_forward_with<T: Scalar>(
    image: &Tensor<T>,
    cfg: &ManetConfig,
    params: &ModelParams<T>,
    fusion: Fusion,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.input(image.clone());
    let logits = manet_var(&mut g, x, cfg, &vars, fusion)?;
    Ok(g.value(logits).clone())
}

/// Per-pixel argmax of `k×H×W` logits.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.dim(0);
    let pixels = logits.dim(1) * logits.dim(2);
    let d = logits.data();
    (0..pixels)
        .map(|p| {
            (0..k)
                .max_by(|&a, &b| {
                    d[a * pixels + p]
                        .partial_cmp(&d[b * pixels + p])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(b.cmp(&a))
                })
                .unwrap_or(0)
        })
        .collect()
}

/// Predicted class per pixel.
pub fn segment<T: Scalar>(
    image: &Tensor<T>,
    cfg: &ManetConfig,
    params: &ModelParams<T>,
) -> Result<Vec<usize>> {
    Ok(argmax_labels(&manet_forward(image, cfg, params)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_block_config_validates() {
        let cfg = ResNeXtBlockConfig {
            in_channels: 256,
            mid_channels: 128,
            out_channels: 256,
            cardinality: 32,
            stride: 1,
        };
        assert!(cfg.validate().is_ok());
        assert!(!cfg.projects_shortcut());
        let bad = ResNeXtBlockConfig {
            cardinality: 3,
            ..cfg
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ResNeXtBlockConfig { stride: 3, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ManetConfig::default().validate().is_ok());
        assert!(ManetConfig::tiny(3).validate().is_ok());
        let mut c = ManetConfig::default();
        c.num_classes = 1;
        assert!(c.validate().is_err());
        let mut c = ManetConfig::default();
        c.cardinality = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn input_size_gate() {
        let cfg = ManetConfig::default();
        assert!(cfg.check_input(&[3, 64, 64]).is_ok());
        assert!(matches!(cfg.check_input(&[3, 48, 64]), Err(Error::Dimension { .. })));
        assert!(cfg.check_input(&[1, 64, 64]).is_err());
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let logits = Tensor::<f64>::from_vec(&[2, 1, 2], vec![1.0, 0.0, 1.0, 3.0]).unwrap();
        assert_eq!(argmax_labels(&logits), vec![0, 1]);
    }
}
