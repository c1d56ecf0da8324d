//! Run configuration: profile defaults overlaid with user-supplied JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::cam::{CamConfig, ExpertPolicy};
use crate::dam::{CueKeys, DamConfig};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::mfi::MfiConfig;
use crate::tensor::DType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Desk-scale model used by tests and the overfit run.
    Toy,
    /// Full-size ViT-B geometry.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}; expected toy or paper"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Element type of parameters and activations.
    pub dtype: DType,

    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub template_side: usize,
    pub search_side: usize,
    pub ffn_ratio: usize,
    pub shared_trunk: bool,

    /// 1-based layers followed by a cross-modal interaction.
    pub mfi_layers: Vec<usize>,
    pub mfi_ratio: usize,
    pub state_dim: usize,
    pub mamba_layers: usize,
    pub conv_width: usize,

    pub experts: usize,
    pub expert_policy: ExpertPolicy,

    pub cue_count: usize,
    pub offset_scale: f64,
    pub cue_keys: CueKeys,

    pub head_width: usize,
    pub head_depth: usize,

    /// Template crop side as a multiple of `sqrt(w h)`.
    pub template_factor: f64,
    /// Search crop side as a multiple of `sqrt(w h)`.
    pub search_factor: f64,
    /// Frames between dynamic-template refreshes; `null` never refreshes.
    pub update_interval: Option<usize>,
    /// Peak score a frame needs to refresh the dynamic template.
    pub update_threshold: f64,

    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,

    /// Synthetic sequence used when no sequence directory is given.
    pub frames: usize,
    pub frame_side: usize,
    pub misalignment_px: f64,

    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn toy() -> Self {
        RunConfig {
            profile: Profile::Toy,
            seed: 0,
            dtype: DType::F32,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 2,
            template_side: 32,
            search_side: 64,
            ffn_ratio: 4,
            shared_trunk: true,
            mfi_layers: vec![2, 3],
            mfi_ratio: 8,
            state_dim: 8,
            mamba_layers: 2,
            conv_width: 4,
            experts: 3,
            expert_policy: ExpertPolicy::Routed,
            cue_count: 1,
            offset_scale: 5.0,
            cue_keys: CueKeys::SameModality,
            head_width: 64,
            head_depth: 3,
            template_factor: 2.0,
            search_factor: 4.0,
            update_interval: Some(25),
            update_threshold: 0.7,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 2,
            frames: 20,
            frame_side: 128,
            misalignment_px: 2.0,
            output_dir: None,
        }
    }

    pub fn paper() -> Self {
        RunConfig {
            profile: Profile::Paper,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            template_side: 128,
            search_side: 256,
            mfi_layers: vec![4, 7, 10],
            mfi_ratio: 8,
            state_dim: 16,
            experts: 6,
            cue_count: 1,
            offset_scale: 5.0,
            head_width: 768,
            frame_side: 512,
            ..Self::toy()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Toy => Self::toy(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Parses JSON whose keys override the defaults of its `profile` (toy
    /// when absent). Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let overrides = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let profile = match overrides.get("profile") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
            None => Profile::Toy,
        };
        let mut merged = serde_json::to_value(Self::for_profile(profile)).expect("config serializes");
        let base = merged.as_object_mut().expect("config is an object");
        for (key, v) in overrides {
            if !base.contains_key(key) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            base.insert(key.clone(), v.clone());
        }
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        self.mfi().validate()?;
        self.cam().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.head_width == 0 || self.head_depth == 0 {
            return bad("head_width and head_depth must be positive".into());
        }
        if !(self.offset_scale.is_finite() && self.offset_scale >= 0.0) {
            return bad(format!("offset_scale must be finite and >= 0, got {}", self.offset_scale));
        }
        if !(self.template_factor > 0.0 && self.search_factor > 0.0) {
            return bad("crop factors must be positive".into());
        }
        if self.update_interval == Some(0) {
            return bad("update_interval must be positive or null".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.frames < 2 {
            return bad(format!("frames must be at least 2, got {}", self.frames));
        }
        if self.frame_side < 16 {
            return bad(format!("frame_side must be at least 16, got {}", self.frame_side));
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            template_side: self.template_side,
            search_side: self.search_side,
            mfi_layers: self.mfi_layers.clone(),
            cue_count: self.cue_count,
            ffn_ratio: self.ffn_ratio,
            shared_trunk: self.shared_trunk,
        }
    }

    pub fn mfi(&self) -> MfiConfig {
        MfiConfig {
            embed_dim: self.embed_dim,
            ratio: self.mfi_ratio,
            state_dim: self.state_dim,
            layers: self.mamba_layers,
            conv_width: self.conv_width,
        }
    }

    pub fn cam(&self) -> CamConfig {
        CamConfig {
            embed_dim: self.embed_dim,
            depth: self.depth,
            experts: self.experts,
            policy: self.expert_policy.clone(),
        }
    }

    pub fn dam(&self) -> DamConfig {
        DamConfig {
            embed_dim: self.embed_dim,
            heads: self.heads,
            cue_count: self.cue_count,
            offset_scale: self.offset_scale,
            ffn_ratio: self.ffn_ratio,
            cue_keys: self.cue_keys,
        }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            embed_dim: self.embed_dim,
            width: self.head_width,
            depth: self.head_depth,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_defaults() {
        let c = RunConfig::toy();
        assert_eq!((c.patch_size, c.embed_dim, c.depth, c.heads), (8, 64, 4, 2));
        assert_eq!((c.template_side, c.search_side, c.state_dim, c.experts), (32, 64, 8, 3));
        assert_eq!(c.mfi_layers, vec![2, 3]);
        assert_eq!((c.cue_count, c.offset_scale), (1, 5.0));
        c.validate().unwrap();
    }

    #[test]
    fn paper_defaults() {
        let c = RunConfig::paper();
        assert_eq!((c.patch_size, c.embed_dim, c.depth, c.heads), (16, 768, 12, 12));
        assert_eq!((c.template_side, c.search_side), (128, 256));
        assert_eq!(c.mfi_layers, vec![4, 7, 10]);
        assert_eq!((c.mfi_ratio, c.experts, c.cue_count, c.offset_scale), (8, 6, 1, 5.0));
        assert_eq!(c.backbone().layout().total(), 385);
        c.validate().unwrap();
    }

    #[test]
    fn overlay_and_round_trip() {
        let c = RunConfig::from_json(r#"{"profile": "toy", "seed": 9, "update_interval": null}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.update_interval, None);
        assert_eq!(c.embed_dim, 64);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        let p = RunConfig::from_json(r#"{"profile": "paper"}"#).unwrap();
        assert_eq!(p, RunConfig::paper());
    }

    #[test]
    fn unknown_and_invalid_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"sead": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"mfi_layers": [5]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"experts": 9}"#).is_err());
        assert!(RunConfig::from_json("[1]").is_err());
        let policy = RunConfig::from_json(r#"{"expert_policy": {"manual": [1, 2, 4]}}"#).unwrap();
        assert_eq!(policy.expert_policy, ExpertPolicy::Manual(vec![1, 2, 4]));
    }
}
