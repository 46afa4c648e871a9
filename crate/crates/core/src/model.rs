//! Model assembly from a TOML config, analytic parameter counting, the full
//! forward pass and weight files.
//!
//! Backbone: a 3×3 stride-2 stem, then four stages of a stride-2 GhostConv
//! followed by residual ghost bottlenecks, giving maps at strides 4, 8, 16
//! and 32. The stride-32 map goes through ASPP and the transformer encoder.
//! The four maps feed the neck, and one head per level predicts boxes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionSpec, NormKind, TransformerEncoder, WindowAttentionBlock};
use crate::blocks::{Aspp, AsppSpec, Conv2d, GhostBottleneck, GhostConv, GhostConvSpec};
use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::head::{decode, AnchorTable, Head, RawPrediction, DEFAULT_CONF_THRESHOLD};
use crate::init::WeightInit;
use crate::neck::{AttentionPlacement, BiFpn, Neck, PYRAMID_STRIDES};
use crate::tensor::{self, io, ConvParams, FeatureMap, Tensor};

pub const LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Square input side; a multiple of 32.
    pub input_size: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Anchor file, relative to the config file.
    pub anchors: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    /// Ghost ratio `s`.
    pub ghost_ratio: usize,
    pub ghost_kernel: usize,
    /// Hidden width of a bottleneck, as a multiple of the stage width.
    pub bottleneck_expansion: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsppSection {
    pub channels: usize,
    pub dilation_rates: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerSection {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
}

impl TransformerSection {
    pub fn spec(&self) -> AttentionSpec {
        AttentionSpec {
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            mlp_hidden: self.mlp_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeckSection {
    pub channels: usize,
    pub window: [usize; 2],
    pub num_heads: usize,
    pub mlp_hidden: usize,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
    #[serde(default)]
    pub placement: AttentionPlacement,
}

fn default_norm() -> NormKind {
    NormKind::LayerNorm
}

impl NeckSection {
    pub fn spec(&self) -> AttentionSpec {
        AttentionSpec {
            embed_dim: self.channels,
            num_heads: self.num_heads,
            mlp_hidden: self.mlp_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSection {
    pub anchors_per_cell: usize,
    #[serde(default = "default_conf")]
    pub conf_threshold: f64,
}

fn default_conf() -> f64 {
    DEFAULT_CONF_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model: ModelSection,
    pub backbone: BackboneSection,
    pub aspp: AsppSection,
    pub transformer: TransformerSection,
    pub neck: NeckSection,
    pub head: HeadSection,
}

impl ModelConfig {
    /// Parses a config; relative anchor paths are resolved against `base`.
    pub fn parse(text: &str, source_name: &str, base: &Path) -> Result<Self> {
        let mut cfg: ModelConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::Parse {
                source_name: source_name.to_string(),
                line,
                reason: e.message().to_string(),
            }
        })?;
        if cfg.model.anchors.is_relative() {
            cfg.model.anchors = base.join(&cfg.model.anchors);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(
            &text,
            &path.display().to_string(),
            path.parent().unwrap_or(Path::new(".")),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.input_size == 0 || !m.input_size.is_multiple_of(32) {
            return Err(Error::config("model.input_size", "must be a positive multiple of 32"));
        }
        if m.num_classes == 0 {
            return Err(Error::config("model.num_classes", "must be positive"));
        }
        let b = &self.backbone;
        if b.stem_channels == 0 {
            return Err(Error::config("backbone.stem_channels", "must be positive"));
        }
        if b.ghost_ratio < 1 {
            return Err(Error::config("backbone.ghost_ratio", "must be at least 1"));
        }
        if b.ghost_kernel.is_multiple_of(2) {
            return Err(Error::config("backbone.ghost_kernel", "must be odd"));
        }
        if b.bottleneck_expansion == 0 {
            return Err(Error::config("backbone.bottleneck_expansion", "must be positive"));
        }
        for (i, &c) in b.stage_channels.iter().enumerate() {
            if c == 0 || c % b.ghost_ratio != 0 {
                return Err(Error::config(
                    format!("backbone.stage_channels[{i}]"),
                    format!("{c} must be a positive multiple of ghost_ratio {}", b.ghost_ratio),
                ));
            }
        }
        AsppSpec {
            in_channels: b.stage_channels[3],
            out_channels: self.aspp.channels,
            dilation_rates: self.aspp.dilation_rates.clone(),
        }
        .validate()
        .map_err(|e| Error::config("aspp", e.to_string()))?;
        self.transformer
            .spec()
            .validate()
            .map_err(|e| Error::config("transformer", e.to_string()))?;
        self.neck
            .spec()
            .validate()
            .map_err(|e| Error::config("neck", e.to_string()))?;
        if self.neck.window.contains(&0) {
            return Err(Error::config("neck.window", "window sides must be positive"));
        }
        if self.head.anchors_per_cell == 0 {
            return Err(Error::config("head.anchors_per_cell", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.head.conf_threshold) {
            return Err(Error::config("head.conf_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn load_anchors(&self) -> Result<AnchorTable> {
        let path = &self.model.anchors;
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("model.anchors", format!("cannot read {}: {e}", path.display())))?;
        let table = AnchorTable::parse(&text, &path.display().to_string())?;
        if table.levels().len() != LEVELS || table.anchors_per_level() != self.head.anchors_per_cell {
            return Err(Error::config(
                "model.anchors",
                format!(
                    "table has {} levels of {}, expected {LEVELS} of {}",
                    table.levels().len(),
                    table.anchors_per_level(),
                    self.head.anchors_per_cell
                ),
            ));
        }
        Ok(table)
    }

    fn stage_inputs(&self) -> [usize; 4] {
        let c = &self.backbone.stage_channels;
        [self.backbone.stem_channels, c[0], c[1], c[2]]
    }

    fn down_spec(&self, stage: usize) -> GhostConvSpec {
        let b = &self.backbone;
        GhostConvSpec::new(
            self.stage_inputs()[stage],
            b.stage_channels[stage],
            b.ghost_ratio,
            b.ghost_kernel,
            2,
        )
    }

    fn bottleneck_specs(&self, stage: usize) -> (GhostConvSpec, GhostConvSpec) {
        let b = &self.backbone;
        let c = b.stage_channels[stage];
        let hidden = c * b.bottleneck_expansion;
        (
            GhostConvSpec::new(c, hidden, b.ghost_ratio, b.ghost_kernel, 1),
            GhostConvSpec::new(hidden, c, b.ghost_ratio, b.ghost_kernel, 1),
        )
    }

    /// Every GhostConv of the backbone, in construction order.
    pub fn ghost_specs(&self) -> Vec<GhostConvSpec> {
        let mut out = Vec::new();
        for s in 0..4 {
            out.push(self.down_spec(s));
            for _ in 0..self.backbone.stage_depths[s] {
                let (e, p) = self.bottleneck_specs(s);
                out.extend([e, p]);
            }
        }
        out
    }

    fn aspp_spec(&self) -> AsppSpec {
        AsppSpec {
            in_channels: self.backbone.stage_channels[3],
            out_channels: self.aspp.channels,
            dilation_rates: self.aspp.dilation_rates.clone(),
        }
    }

    /// Widths of the four maps handed to the neck.
    pub fn pyramid_channels(&self) -> [usize; 4] {
        let c = &self.backbone.stage_channels;
        [c[0], c[1], c[2], self.transformer.embed_dim]
    }
}

/// Parameter counts per module, in a fixed order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCounts {
    fn from_modules(modules: Vec<(String, usize)>) -> Self {
        let total = modules.iter().map(|m| m.1).sum();
        Self { modules, total }
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.modules.iter().find(|m| m.0 == name).map(|m| m.1)
    }
}

/// Counts parameters from the config alone.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamCounts> {
    cfg.validate()?;
    let mut modules = vec![(
        "stem".to_string(),
        Conv2d::param_count(1, cfg.backbone.stem_channels, 3, 1),
    )];
    for s in 0..4 {
        let mut n = cfg.down_spec(s).param_count().ghost_total();
        let (e, p) = cfg.bottleneck_specs(s);
        n += cfg.backbone.stage_depths[s] * (e.param_count().ghost_total() + p.param_count().ghost_total());
        modules.push((format!("stage{}", s + 1), n));
    }
    modules.push(("aspp".into(), cfg.aspp_spec().param_count()));
    modules.push((
        "encoder".into(),
        TransformerEncoder::param_count(
            cfg.backbone.stage_channels[3],
            cfg.aspp.channels,
            &cfg.transformer.spec(),
        ),
    ));
    let nc = cfg.neck.channels;
    modules.push((
        "neck.lateral".into(),
        cfg.pyramid_channels()
            .iter()
            .map(|&c| Conv2d::param_count(c, nc, 1, 1))
            .sum(),
    ));
    modules.push(("neck.bifpn".into(), BiFpn::param_count(LEVELS, nc)));
    modules.push((
        "neck.refine".into(),
        LEVELS * WindowAttentionBlock::param_count(&cfg.neck.spec(), cfg.neck.norm),
    ));
    modules.push((
        "heads".into(),
        LEVELS * Head::param_count(nc, cfg.head.anchors_per_cell, cfg.model.num_classes),
    ));
    Ok(ParamCounts::from_modules(modules))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub down: GhostConv,
    pub blocks: Vec<GhostBottleneck>,
}

impl Stage {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = tensor::gelu(&self.down.forward(x)?);
        for b in &self.blocks {
            y = b.forward(&y)?;
        }
        Ok(y)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.down.tensors();
        v.extend(self.blocks.iter().flat_map(|b| b.tensors()));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.down.tensors_mut();
        v.extend(self.blocks.iter_mut().flat_map(|b| b.tensors_mut()));
        v
    }
}

/// Detections of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelDetections {
    pub stride: usize,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub anchors: AnchorTable,
    pub stem: Conv2d,
    pub stages: Vec<Stage>,
    pub aspp: Aspp,
    pub encoder: TransformerEncoder,
    pub neck: Neck,
    pub heads: Vec<Head>,
}

/// Builds a model with seeded fan-in uniform weights.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let anchors = cfg.load_anchors()?;
    let mut rng = WeightInit::new(cfg.model.seed);
    let stem = Conv2d::init(&mut rng, 1, cfg.backbone.stem_channels, 3, ConvParams::new(2, 1));
    let mut stages = Vec::with_capacity(4);
    for s in 0..4 {
        let down = GhostConv::init(&mut rng, cfg.down_spec(s))?;
        let mut blocks = Vec::new();
        for _ in 0..cfg.backbone.stage_depths[s] {
            let (e, p) = cfg.bottleneck_specs(s);
            blocks.push(GhostBottleneck::new(
                GhostConv::init(&mut rng, e)?,
                GhostConv::init(&mut rng, p)?,
                true,
            )?);
        }
        stages.push(Stage { down, blocks });
    }
    let aspp = Aspp::init(&mut rng, cfg.aspp_spec())?;
    let encoder = TransformerEncoder::init(
        &mut rng,
        cfg.backbone.stage_channels[3],
        cfg.aspp.channels,
        cfg.transformer.spec(),
    )?;
    let nc = cfg.neck.channels;
    let lateral = cfg
        .pyramid_channels()
        .iter()
        .map(|&c| Conv2d::init(&mut rng, c, nc, 1, ConvParams::default()))
        .collect();
    let bifpn = BiFpn::init(&mut rng, LEVELS, nc);
    let window = (cfg.neck.window[0], cfg.neck.window[1]);
    let refine = (0..LEVELS)
        .map(|_| WindowAttentionBlock::init(&mut rng, cfg.neck.spec(), window, cfg.neck.norm))
        .collect::<Result<Vec<_>>>()?;
    let heads = (0..LEVELS)
        .map(|_| Head::init(&mut rng, nc, cfg.head.anchors_per_cell, cfg.model.num_classes))
        .collect();
    Ok(Model {
        config: cfg.clone(),
        anchors,
        stem,
        stages,
        aspp,
        encoder,
        neck: Neck {
            lateral,
            bifpn,
            refine,
            placement: cfg.neck.placement,
        },
        heads,
    })
}

impl Model {
    /// Parameter tensors grouped by module, in the order of [`count_params`].
    pub fn modules(&self) -> Vec<(String, Vec<&Tensor>)> {
        let mut out = vec![("stem".to_string(), self.stem.tensors())];
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{}", i + 1), s.tensors()));
        }
        out.push(("aspp".into(), self.aspp.tensors()));
        out.push(("encoder".into(), self.encoder.tensors()));
        out.push((
            "neck.lateral".into(),
            self.neck.lateral.iter().flat_map(|c| c.tensors()).collect(),
        ));
        out.push(("neck.bifpn".into(), self.neck.bifpn.tensors()));
        out.push((
            "neck.refine".into(),
            self.neck.refine.iter().flat_map(|b| b.tensors()).collect(),
        ));
        out.push(("heads".into(), self.heads.iter().flat_map(|h| h.tensors()).collect()));
        out
    }

    pub fn modules_mut(&mut self) -> Vec<(String, Vec<&mut Tensor>)> {
        let mut out = vec![("stem".to_string(), self.stem.tensors_mut())];
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("stage{}", i + 1), s.tensors_mut()));
        }
        out.push(("aspp".into(), self.aspp.tensors_mut()));
        out.push(("encoder".into(), self.encoder.tensors_mut()));
        out.push((
            "neck.lateral".into(),
            self.neck.lateral.iter_mut().flat_map(|c| c.tensors_mut()).collect(),
        ));
        out.push(("neck.bifpn".into(), self.neck.bifpn.tensors_mut()));
        out.push((
            "neck.refine".into(),
            self.neck.refine.iter_mut().flat_map(|b| b.tensors_mut()).collect(),
        ));
        out.push((
            "heads".into(),
            self.heads.iter_mut().flat_map(|h| h.tensors_mut()).collect(),
        ));
        out
    }

    /// Counts parameters by summing the sizes of the allocated tensors.
    pub fn allocated_params(&self) -> ParamCounts {
        ParamCounts::from_modules(
            self.modules()
                .into_iter()
                .map(|(name, ts)| (name, ts.iter().map(|t| t.numel()).sum()))
                .collect(),
        )
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w) = image.dims3()?;
        if c != 1 {
            return Err(Error::shape(format!("model expects one input channel, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::invalid(format!("image {w}x{h} is not a multiple of 32")));
        }
        Ok((h, w))
    }

    /// Backbone maps at strides 4, 8, 16 and 32; the last one has been
    /// through ASPP and the transformer encoder.
    pub fn backbone(&self, image: &Tensor) -> Result<Vec<FeatureMap>> {
        self.check_image(image)?;
        let mut x = tensor::gelu(&self.stem.forward(image)?);
        let mut maps = Vec::with_capacity(LEVELS);
        for (s, stage) in self.stages.iter().enumerate() {
            x = stage.forward(&x)?;
            maps.push(FeatureMap::new(x.clone(), PYRAMID_STRIDES[s])?);
        }
        let deepest = maps.pop().unwrap();
        let context = FeatureMap::new(self.aspp.forward(&deepest.tensor)?, deepest.stride)?;
        maps.push(self.encoder.forward(&deepest, &context)?);
        Ok(maps)
    }

    pub fn raw_predictions(&self, image: &Tensor) -> Result<Vec<RawPrediction>> {
        let levels = self.neck.forward(&self.backbone(image)?)?;
        levels
            .levels()
            .iter()
            .zip(&self.heads)
            .map(|(l, h)| {
                let raw = h.forward(l)?;
                if !raw.logits.is_finite() {
                    return Err(Error::NonFinite(format!("head logits at stride {}", raw.stride)));
                }
                Ok(raw)
            })
            .collect()
    }

    /// Per-level detections scoring at least `conf_threshold`.
    pub fn full_forward(&self, image: &Tensor, conf_threshold: f64) -> Result<Vec<LevelDetections>> {
        let (h, w) = self.check_image(image)?;
        self.raw_predictions(image)?
            .iter()
            .enumerate()
            .map(|(i, raw)| {
                Ok(LevelDetections {
                    stride: raw.stride,
                    detections: decode(raw, self.anchors.level(i), (w, h), conf_threshold)?,
                })
            })
            .collect()
    }

    /// All levels' detections concatenated, finest level first.
    pub fn detect(&self, image: &Tensor, conf_threshold: f64) -> Result<Vec<Detection>> {
        Ok(self
            .full_forward(image, conf_threshold)?
            .into_iter()
            .flat_map(|l| l.detections)
            .collect())
    }
}

pub fn full_forward(image: &Tensor, model: &Model, conf_threshold: f64) -> Result<Vec<LevelDetections>> {
    model.full_forward(image, conf_threshold)
}

/// Writes one `<module>.tnsr` file of concatenated tensor records per module
/// and a `manifest.txt` listing `module file tensor_count`.
pub fn save_weights(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (name, tensors) in model.modules() {
        let file = format!("{name}.tnsr");
        let mut bytes = Vec::new();
        for t in &tensors {
            io::encode_into(t, &mut bytes);
        }
        fs::write(dir.join(&file), bytes)?;
        manifest.push_str(&format!("{name} {file} {}\n", tensors.len()));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Builds the model for `cfg` and replaces its weights with those in `dir`.
pub fn load_weights(cfg: &ModelConfig, dir: &Path) -> Result<Model> {
    let mut model = build_model(cfg)?;
    let manifest_path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&manifest_path)?;
    let source = manifest_path.display().to_string();
    let mut files = std::collections::HashMap::new();
    for (i, line) in manifest.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::Parse {
                source_name: source.clone(),
                line: i + 1,
                reason: "expected `module file count`".into(),
            });
        }
        files.insert(fields[0].to_string(), fields[1].to_string());
    }
    for (name, slots) in model.modules_mut() {
        let file = files.get(&name).ok_or_else(|| Error::Parse {
            source_name: source.clone(),
            line: 0,
            reason: format!("module `{name}` missing"),
        })?;
        let tensors = io::decode_all(&fs::read(dir.join(file))?)?;
        if tensors.len() != slots.len() {
            return Err(Error::invalid(format!(
                "{file}: {} tensors, model expects {}",
                tensors.len(),
                slots.len()
            )));
        }
        for (k, (slot, t)) in slots.into_iter().zip(tensors).enumerate() {
            if slot.shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "{file}: tensor {k} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
    }
    Ok(model)
}
