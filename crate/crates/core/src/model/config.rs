use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::window_out;

/// A run of 3×3 convolutions at one width, followed by one downsampling layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub convs: usize,
    pub channels: usize,
}

impl Stage {
    pub const fn new(convs: usize, channels: usize) -> Self {
        Self { convs, channels }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    /// 2×2 max pooling with stride 2.
    #[default]
    MaxPool,
    /// The last convolution of each stage runs with stride 2.
    StridedConv,
}

/// The super-class branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScbConfig {
    /// 0-based index of the backbone downsampling layer whose output feeds the branch.
    pub attach: usize,
    pub stages: Vec<Stage>,
    /// Hidden fully connected widths before the super-class head (empty = one layer).
    #[serde(default)]
    pub fc_widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgnetConfig {
    pub name: String,
    #[serde(default = "default_in_channels")]
    pub input_channels: usize,
    pub input_size: usize,
    pub backbone_stages: Vec<Stage>,
    #[serde(default)]
    pub downsample: Downsample,
    /// `None` is the plain single-branch baseline.
    pub scb: Option<ScbConfig>,
    pub fcb_fc_widths: Vec<usize>,
    pub num_finer: usize,
    pub num_super: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_in_channels() -> usize {
    3
}

fn default_alpha() -> f64 {
    0.5
}

/// Where a parameter tensor sits, used to build both the model and its parameter count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum LayerKind {
    /// 3×3 convolution, padding 1.
    Conv { stride: usize },
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerSpec {
    pub prefix: String,
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Followed by ReLU (hidden layer) rather than producing logits.
    pub hidden: bool,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv { .. } => vec![self.out_dim, self.in_dim, 3, 3],
            LayerKind::Linear => vec![self.out_dim, self.in_dim],
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv { .. } => self.in_dim * 9,
            LayerKind::Linear => self.in_dim,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.out_dim
    }
}

/// Resolved layer plan of a config.
#[derive(Debug, Clone)]
pub(crate) struct Plan {
    /// Backbone stages up to and including the attach point.
    pub trunk: Vec<Vec<LayerSpec>>,
    /// Backbone stages after the attach point (the finer branch's convolutions).
    pub fcb_convs: Vec<Vec<LayerSpec>>,
    pub fcb_fc: Vec<LayerSpec>,
    pub scb_convs: Vec<Vec<LayerSpec>>,
    pub scb_fc: Vec<LayerSpec>,
}

impl Plan {
    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.trunk
            .iter()
            .flatten()
            .chain(self.fcb_convs.iter().flatten())
            .chain(self.scb_convs.iter().flatten())
            .chain(&self.scb_fc)
            .chain(&self.fcb_fc)
    }
}

fn downsampled(size: usize, ds: Downsample) -> Option<usize> {
    match ds {
        Downsample::MaxPool => window_out(size, 2, 2, 0),
        Downsample::StridedConv => window_out(size, 3, 2, 1),
    }
}

fn stage_layers(
    prefix: &str,
    first_index: usize,
    stage: Stage,
    in_channels: usize,
    ds: Downsample,
) -> Vec<LayerSpec> {
    (0..stage.convs)
        .map(|i| LayerSpec {
            prefix: format!("{prefix}.conv{}", first_index + i),
            kind: LayerKind::Conv {
                stride: if ds == Downsample::StridedConv && i + 1 == stage.convs { 2 } else { 1 },
            },
            in_dim: if i == 0 { in_channels } else { stage.channels },
            out_dim: stage.channels,
            hidden: true,
        })
        .collect()
}

fn fc_layers(prefix: &str, input: usize, widths: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut dims = vec![input];
    dims.extend_from_slice(widths);
    dims.push(classes);
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let last = i + 2 == dims.len();
            LayerSpec {
                prefix: if last { format!("{prefix}.out") } else { format!("{prefix}.fc{i}") },
                kind: LayerKind::Linear,
                in_dim: w[0],
                out_dim: w[1],
                hidden: !last,
            }
        })
        .collect()
}

impl SgnetConfig {
    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    pub(crate) fn plan(&self) -> Result<Plan> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.num_finer == 0 || self.num_super == 0 {
            return Err(Error::config("class counts must be positive"));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::config("input extents must be positive"));
        }
        if self.backbone_stages.is_empty() {
            return Err(Error::config("backbone needs at least one stage"));
        }
        let all_stages = self
            .backbone_stages
            .iter()
            .chain(self.scb.iter().flat_map(|s| s.stages.iter()));
        for st in all_stages {
            if st.convs == 0 || st.channels == 0 {
                return Err(Error::config(format!("degenerate stage {st:?}")));
            }
        }

        let ds = self.downsample;
        let mut spatial = self.input_size;
        let mut channels = self.input_channels;
        let mut conv_index = 0;
        let mut stages_layers = Vec::new();
        let mut spatial_after = Vec::new();
        for st in &self.backbone_stages {
            stages_layers.push(stage_layers("backbone", conv_index, *st, channels, ds));
            conv_index += st.convs;
            channels = st.channels;
            spatial = downsampled(spatial, ds).ok_or_else(|| {
                Error::config(format!(
                    "input size {} is too small for {} downsampling layers",
                    self.input_size,
                    self.backbone_stages.len()
                ))
            })?;
            spatial_after.push((spatial, channels));
        }
        let final_spatial = spatial;
        let fcb_channels = channels;

        let (trunk, fcb_convs, scb_convs, scb_fc, scb_channels) = match &self.scb {
            None => (stages_layers, Vec::new(), Vec::new(), Vec::new(), 0),
            Some(scb) => {
                let total = self.backbone_stages.len();
                if scb.attach + 1 >= total {
                    return Err(Error::config(format!(
                        "SCB attach index {} leaves no backbone downsampling layers after it ({} in total)",
                        scb.attach, total
                    )));
                }
                let remaining = total - scb.attach - 1;
                if scb.stages.len() != remaining {
                    return Err(Error::config(format!(
                        "SCB has {} downsampling layers but the backbone has {} after the attach point",
                        scb.stages.len(),
                        remaining
                    )));
                }
                let backbone_depth: usize = self.backbone_stages[scb.attach + 1..]
                    .iter()
                    .map(|s| s.convs)
                    .sum();
                let scb_depth: usize = scb.stages.iter().map(|s| s.convs).sum();
                if scb_depth >= backbone_depth {
                    return Err(Error::config(format!(
                        "SCB must be shallower than the backbone after the attach point ({scb_depth} convolutions vs {backbone_depth})"
                    )));
                }
                let mut rest = stages_layers;
                let fcb_convs = rest.split_off(scb.attach + 1);
                let (_, mut ch) = spatial_after[scb.attach];
                let mut scb_convs = Vec::new();
                let mut idx = 0;
                for st in &scb.stages {
                    scb_convs.push(stage_layers("scb", idx, *st, ch, ds));
                    idx += st.convs;
                    ch = st.channels;
                }
                let flat = ch * final_spatial * final_spatial;
                let scb_fc = fc_layers("scb", flat, &scb.fc_widths, self.num_super);
                (rest, fcb_convs, scb_convs, scb_fc, ch)
            }
        };
        let fcb_in = (fcb_channels + scb_channels) * final_spatial * final_spatial;
        let fcb_fc = fc_layers("fcb", fcb_in, &self.fcb_fc_widths, self.num_finer);
        Ok(Plan {
            trunk,
            fcb_convs,
            fcb_fc,
            scb_convs,
            scb_fc,
        })
    }

    /// Number of trainable scalars, computed from the config alone.
    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.plan()?.layers().map(LayerSpec::parameter_count).sum())
    }

    /// Names and shapes of every parameter tensor, in initialization order.
    pub fn parameter_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let plan = self.plan()?;
        let mut out = Vec::new();
        for l in plan.layers() {
            out.push((format!("{}.weight", l.prefix), l.weight_shape()));
            out.push((format!("{}.bias", l.prefix), vec![l.out_dim]));
        }
        Ok(out)
    }

    pub fn has_scb(&self) -> bool {
        self.scb.is_some()
    }

    /// Same backbone and finer head without the super-class branch.
    pub fn baseline(&self) -> Self {
        Self {
            name: format!("{}-baseline", self.name),
            scb: None,
            ..self.clone()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset_names() -> &'static [&'static str] {
        &[
            "vgg16-sgnet-cifar",
            "vgg16-cifar",
            "sgnet-cifar-small",
            "sgnet-synth-2x2",
            "sgnet-tiny",
        ]
    }

    pub fn preset(name: &str) -> Result<Self> {
        let vgg16 = vec![
            Stage::new(2, 64),
            Stage::new(2, 128),
            Stage::new(3, 256),
            Stage::new(3, 512),
            Stage::new(3, 512),
        ];
        let cfg = match name {
            // SCB after the 4th max pooling layer: two 512-channel convolutions,
            // one pooling layer and a single fully connected super-class head.
            "vgg16-sgnet-cifar" => SgnetConfig {
                name: name.into(),
                input_channels: 3,
                input_size: 32,
                backbone_stages: vgg16,
                downsample: Downsample::MaxPool,
                scb: Some(ScbConfig {
                    attach: 3,
                    stages: vec![Stage::new(2, 512)],
                    fc_widths: vec![],
                }),
                fcb_fc_widths: vec![4096, 4096],
                num_finer: 100,
                num_super: 20,
                alpha: 0.5,
            },
            "vgg16-cifar" => SgnetConfig {
                name: name.into(),
                ..Self::preset("vgg16-sgnet-cifar")?.baseline()
            },
            "sgnet-cifar-small" => SgnetConfig {
                name: name.into(),
                input_channels: 3,
                input_size: 32,
                backbone_stages: vec![
                    Stage::new(1, 16),
                    Stage::new(1, 32),
                    Stage::new(1, 32),
                    Stage::new(1, 64),
                    Stage::new(2, 64),
                ],
                downsample: Downsample::MaxPool,
                scb: Some(ScbConfig {
                    attach: 3,
                    stages: vec![Stage::new(1, 64)],
                    fc_widths: vec![],
                }),
                fcb_fc_widths: vec![128],
                num_finer: 100,
                num_super: 20,
                alpha: 0.5,
            },
            "sgnet-synth-2x2" => SgnetConfig {
                name: name.into(),
                input_channels: 3,
                input_size: 16,
                backbone_stages: vec![Stage::new(1, 8), Stage::new(1, 16), Stage::new(2, 16)],
                downsample: Downsample::MaxPool,
                scb: Some(ScbConfig {
                    attach: 1,
                    stages: vec![Stage::new(1, 16)],
                    fc_widths: vec![],
                }),
                fcb_fc_widths: vec![32],
                num_finer: 4,
                num_super: 2,
                alpha: 0.5,
            },
            "sgnet-tiny" => SgnetConfig {
                name: name.into(),
                input_channels: 2,
                input_size: 8,
                backbone_stages: vec![Stage::new(1, 2), Stage::new(1, 3), Stage::new(2, 3)],
                downsample: Downsample::MaxPool,
                scb: Some(ScbConfig {
                    attach: 1,
                    stages: vec![Stage::new(1, 2)],
                    fc_widths: vec![],
                }),
                fcb_fc_widths: vec![5],
                num_finer: 4,
                num_super: 2,
                alpha: 0.5,
            },
            other => {
                return Err(Error::config(format!(
                    "unknown architecture preset \"{other}\" (known: {})",
                    Self::preset_names().join(", ")
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in SgnetConfig::preset_names() {
            SgnetConfig::preset(name).unwrap();
        }
    }

    #[test]
    fn downsample_count_mismatch_quotes_both_counts() {
        let mut cfg = SgnetConfig::preset("vgg16-sgnet-cifar").unwrap();
        cfg.scb.as_mut().unwrap().attach = 2;
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let msg = err.to_string();
        assert!(msg.contains("SCB has 1") && msg.contains("has 2 after"), "{msg}");
    }

    #[test]
    fn scb_must_be_shallower() {
        let mut cfg = SgnetConfig::preset("vgg16-sgnet-cifar").unwrap();
        cfg.scb.as_mut().unwrap().stages = vec![Stage::new(3, 512)];
        assert!(cfg.validate().unwrap_err().to_string().contains("shallower"));
    }

    #[test]
    fn alpha_must_be_open_unit_interval() {
        let mut cfg = SgnetConfig::preset("sgnet-tiny").unwrap();
        for bad in [0.0, 1.0, -0.1, 1.5] {
            cfg.alpha = bad;
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn fcb_input_covers_concatenated_channels() {
        let cfg = SgnetConfig::preset("vgg16-sgnet-cifar").unwrap();
        let shapes = cfg.parameter_shapes().unwrap();
        let fc0 = shapes.iter().find(|(n, _)| n == "fcb.fc0.weight").unwrap();
        assert_eq!(fc0.1, vec![4096, 1024]);
        let base = cfg.baseline().parameter_shapes().unwrap();
        let fc0 = base.iter().find(|(n, _)| n == "fcb.fc0.weight").unwrap();
        assert_eq!(fc0.1, vec![4096, 512]);
    }

    #[test]
    fn vgg16_parameter_counts() {
        let sg = SgnetConfig::preset("vgg16-sgnet-cifar").unwrap().parameter_count().unwrap();
        let base = SgnetConfig::preset("vgg16-cifar").unwrap().parameter_count().unwrap();
        assert_eq!(base, 34_006_948);
        assert_eq!(sg, 40_833_976);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = SgnetConfig::preset("sgnet-synth-2x2").unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(SgnetConfig::from_toml(&text).unwrap(), cfg);
    }
}
