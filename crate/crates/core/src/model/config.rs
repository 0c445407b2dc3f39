use std::fmt;

use crate::error::{Error, Result};

/// How the two branches are merged after each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionKind {
    /// Bidirectional gated residual mixer.
    Gate,
    /// Selective-kernel weighting; both branches continue from the fused map.
    Sk,
    /// Plain addition; both branches continue from the sum.
    Add,
    /// No fusion. Only valid with a single branch.
    None,
}

/// Which feature branches are instantiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branches {
    Both,
    Cnn,
    Transformer,
}

text_enum!(FusionKind { Gate => "gate", Sk => "sk", Add => "add", None => "none" });
text_enum!(Branches { Both => "both", Cnn => "cnn", Transformer => "transformer" });

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Width of the shallow features (C₀).
    pub base_channels: usize,
    /// Number of branch-block + fusion rounds.
    pub stages: usize,
    /// Attention heads per stage; a single entry applies to every stage.
    pub heads: Vec<usize>,
    /// Hidden-width multiplier of the feed-forward block.
    pub ffn_expansion: f32,
    pub fusion: FusionKind,
    pub branches: Branches,
    /// Halve the resolution (and double the width) at the start of each stage.
    pub downsample_per_stage: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default: C₀=16, two stages, one head, γ=2, gate fusion.
    pub fn toy() -> Self {
        ModelConfig {
            base_channels: 16,
            stages: 2,
            heads: vec![1],
            ffn_expansion: 2.0,
            fusion: FusionKind::Gate,
            branches: Branches::Both,
            downsample_per_stage: true,
        }
    }

    /// Larger preset closer to common restoration backbones. Not exercised by
    /// the acceptance suite.
    pub fn large() -> Self {
        ModelConfig {
            base_channels: 32,
            stages: 4,
            heads: vec![1, 2, 4, 8],
            ..Self::toy()
        }
    }

    /// Channel count at the output of stage `s` (0-based).
    pub fn stage_channels(&self, s: usize) -> usize {
        if self.downsample_per_stage {
            self.base_channels << (s + 1)
        } else {
            self.base_channels
        }
    }

    pub fn heads_for(&self, s: usize) -> usize {
        if self.heads.len() == 1 {
            self.heads[0]
        } else {
            self.heads[s]
        }
    }

    /// Hidden width of the feed-forward block at `channels`.
    pub fn ffn_hidden(&self, channels: usize) -> usize {
        (self.ffn_expansion as f64 * channels as f64).round() as usize
    }

    /// Required divisor of the input height and width.
    pub fn size_multiple(&self) -> usize {
        if self.downsample_per_stage {
            1 << self.stages
        } else {
            1
        }
    }

    pub fn has_cnn(&self) -> bool {
        self.branches != Branches::Transformer
    }

    pub fn has_transformer(&self) -> bool {
        self.branches != Branches::Cnn
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            problems.push(format!(
                "base_channels={} must be even and >= 2 (simple gate splits channels)",
                self.base_channels
            ));
        }
        if self.stages < 1 {
            problems.push("stages must be >= 1".to_string());
        }
        if self.heads.is_empty() || (self.heads.len() != 1 && self.heads.len() != self.stages) {
            problems.push(format!(
                "heads must have 1 or {} entries, got {:?}",
                self.stages, self.heads
            ));
        } else if self.stages >= 1 {
            for s in 0..self.stages {
                let (h, c) = (self.heads_for(s), self.stage_channels(s));
                if h == 0 || c % h != 0 {
                    problems.push(format!("stage {s}: heads={h} must divide channels={c}"));
                }
            }
        }
        if !(self.ffn_expansion > 0.0) {
            problems.push(format!("ffn_expansion={} must be positive", self.ffn_expansion));
        } else {
            for s in 0..self.stages {
                let c = self.stage_channels(s);
                let hidden = self.ffn_expansion as f64 * c as f64;
                if (hidden - hidden.round()).abs() > 1e-6 || hidden.round() < 1.0 {
                    problems.push(format!(
                        "stage {s}: ffn_expansion*channels = {hidden} must be a positive integer"
                    ));
                }
            }
        }
        match (self.fusion, self.branches) {
            (FusionKind::None, Branches::Both) => {
                problems.push("fusion=none requires a single branch (branches=cnn or branches=transformer)".to_string())
            }
            (f, b) if f != FusionKind::None && b != Branches::Both => {
                problems.push(format!("fusion={f} needs both branches, got branches={b}"))
            }
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Stable `key=value` rendering, one entry per field.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("base_channels", self.base_channels.to_string()),
            ("stages", self.stages.to_string()),
            (
                "heads",
                self.heads.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
            ("ffn_expansion", self.ffn_expansion.to_string()),
            ("fusion", self.fusion.to_string()),
            ("branches", self.branches.to_string()),
            ("downsample", self.downsample_per_stage.to_string()),
        ]
    }

    /// Applies one `key=value` entry; returns `false` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |e: &dyn fmt::Display| Error::Config(format!("{key}={value}: {e}"));
        match key {
            "base_channels" => self.base_channels = value.trim().parse().map_err(|e| bad(&e))?,
            "stages" => self.stages = value.trim().parse().map_err(|e| bad(&e))?,
            "heads" => {
                self.heads = value
                    .split(',')
                    .map(|h| h.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(&e))?
            }
            "ffn_expansion" => self.ffn_expansion = value.trim().parse().map_err(|e| bad(&e))?,
            "fusion" => self.fusion = value.parse()?,
            "branches" => self.branches = value.parse()?,
            "downsample" => self.downsample_per_stage = value.trim().parse().map_err(|e| bad(&e))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::toy();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config echo line `{line}`")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::Format(format!("unknown config echo key `{k}`")));
            }
        }
        Ok(cfg)
    }

    /// First field (in rendering order) whose value differs from `other`,
    /// as `(field, ours, theirs)`.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<(String, String, String)> {
        self.to_pairs()
            .into_iter()
            .zip(other.to_pairs())
            .find(|(a, b)| a.1 != b.1)
            .map(|(a, b)| (a.0.to_string(), a.1, b.1))
    }
}
