//! Declarative model description and its `key = value` text form.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Learned group convolution followed by a grouped 3×3 convolution.
    Baseline,
    /// Learned group convolution followed by a depthwise separable pair.
    CondenseNeXt,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "condensenet_baseline",
            Variant::CondenseNeXt => "condensenext",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "condensenet_baseline" | "baseline" | "condensenet" => Ok(Variant::Baseline),
            "condensenext" => Ok(Variant::CondenseNeXt),
            other => Err(Error::config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    /// `(block_count, growth_rate)` per stage.
    pub stages: Vec<(usize, usize)>,
    pub groups: usize,
    pub condensation_factor: usize,
    pub pruning_p: usize,
    pub num_classes: usize,
    /// `(channels, height, width)`.
    pub input_shape: (usize, usize, usize),
    pub variant: Variant,
    /// Output channels of the 3×3 stem convolution.
    pub init_channels: usize,
    /// The learned group convolution widens to `bottleneck · growth` channels.
    pub bottleneck: usize,
}

impl ModelSpec {
    /// Three stages of 14 blocks, growth 8/16/32, four groups, condensation factor 4.
    pub fn cifar(variant: Variant) -> Self {
        ModelSpec {
            stages: vec![(14, 8), (14, 16), (14, 32)],
            groups: 4,
            condensation_factor: 4,
            pruning_p: 4,
            num_classes: 10,
            input_shape: (3, 32, 32),
            variant,
            init_channels: 16,
            bottleneck: 4,
        }
    }

    /// One stage holding a single block of growth 8.
    pub fn single_stage(variant: Variant) -> Self {
        ModelSpec {
            stages: vec![(1, 8)],
            ..ModelSpec::cifar(variant)
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        ModelSpec {
            variant,
            ..self.clone()
        }
    }

    /// Channels entering each stage, plus the final feature width as the last entry.
    pub fn stage_channels(&self) -> Vec<usize> {
        let mut out = vec![self.init_channels];
        for &(blocks, growth) in &self.stages {
            let last = *out.last().expect("non-empty");
            out.push(last + blocks * growth);
        }
        out
    }

    pub fn feature_width(&self) -> usize {
        *self.stage_channels().last().expect("non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("groups", self.groups),
            ("condensation_factor", self.condensation_factor),
            ("classes", self.num_classes),
            ("init_channels", self.init_channels),
            ("bottleneck", self.bottleneck),
            ("input channels", self.input_shape.0),
            ("input height", self.input_shape.1),
            ("input width", self.input_shape.2),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.stages.is_empty() {
            return Err(Error::config("at least one stage is required"));
        }
        for (s, &(blocks, growth)) in self.stages.iter().enumerate() {
            if blocks == 0 || growth == 0 {
                return Err(Error::config(format!("stage {s} needs positive block count and growth")));
            }
            let wide = self.bottleneck * growth;
            if wide % self.groups != 0 {
                return Err(Error::config(format!(
                    "stage {s}: {wide} bottleneck channels not divisible by {} groups",
                    self.groups
                )));
            }
            if self.variant == Variant::Baseline && growth % self.groups != 0 {
                return Err(Error::config(format!(
                    "stage {s}: growth {growth} not divisible by {} groups",
                    self.groups
                )));
            }
            if self.pruning_p > wide {
                return Err(Error::config(format!(
                    "stage {s}: p = {} exceeds cardinality {wide}",
                    self.pruning_p
                )));
            }
        }
        let shrink = 1usize << (self.stages.len() - 1);
        if self.input_shape.1 < shrink || self.input_shape.2 < shrink {
            return Err(Error::config(format!(
                "input {}×{} too small for {} pooling transitions",
                self.input_shape.1,
                self.input_shape.2,
                self.stages.len() - 1
            )));
        }
        Ok(())
    }

    /// `key = value` lines; `#` starts a comment.
    pub fn to_config(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let join = |f: fn(&(usize, usize)) -> usize| {
            self.stages.iter().map(|s| f(s).to_string()).collect::<Vec<_>>().join(",")
        };
        let (c, h, w) = self.input_shape;
        vec![
            ("variant".into(), self.variant.to_string()),
            ("stages".into(), join(|s| s.0)),
            ("growth".into(), join(|s| s.1)),
            ("groups".into(), self.groups.to_string()),
            ("condensation_factor".into(), self.condensation_factor.to_string()),
            ("p".into(), self.pruning_p.to_string()),
            ("classes".into(), self.num_classes.to_string()),
            ("init_channels".into(), self.init_channels.to_string()),
            ("bottleneck".into(), self.bottleneck.to_string()),
            ("input".into(), format!("{c},{h},{w}")),
        ]
    }

    /// Parses a config; keys not given keep their CIFAR defaults.
    pub fn from_config(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let variant = pairs
            .iter()
            .find(|(k, _)| k == "variant")
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(Variant::CondenseNeXt);
        let mut spec = ModelSpec::cifar(variant);
        let mut blocks: Option<Vec<usize>> = None;
        let mut growth: Option<Vec<usize>> = None;
        for (k, v) in pairs {
            match k.as_str() {
                "variant" => {}
                "stages" => blocks = Some(parse_list(k, v)?),
                "growth" => growth = Some(parse_list(k, v)?),
                "groups" => spec.groups = parse_num(k, v)?,
                "condensation_factor" => spec.condensation_factor = parse_num(k, v)?,
                "p" => spec.pruning_p = parse_num(k, v)?,
                "classes" => spec.num_classes = parse_num(k, v)?,
                "init_channels" => spec.init_channels = parse_num(k, v)?,
                "bottleneck" => spec.bottleneck = parse_num(k, v)?,
                "input" => match parse_list(k, v)?.as_slice() {
                    &[c, h, w] => spec.input_shape = (c, h, w),
                    _ => return Err(Error::config("input takes channels,height,width")),
                },
                other => return Err(Error::config(format!("unknown key `{other}`"))),
            }
        }
        let default_blocks: Vec<usize> = spec.stages.iter().map(|s| s.0).collect();
        let default_growth: Vec<usize> = spec.stages.iter().map(|s| s.1).collect();
        let blocks = blocks.unwrap_or(default_blocks);
        let growth = growth.unwrap_or(default_growth);
        if blocks.len() != growth.len() {
            return Err(Error::config(format!(
                "{} stage block counts but {} growth rates",
                blocks.len(),
                growth.len()
            )));
        }
        spec.stages = blocks.into_iter().zip(growth).collect();
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_num(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: `{v}` is not a non-negative integer")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| parse_num(key, x)).collect()
}
