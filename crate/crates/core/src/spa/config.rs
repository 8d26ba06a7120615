use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::WINDOW_LEN;

/// Geometry and widths of the hierarchical encoder/decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    /// Samples covered by one token at each stage.
    pub patch_sizes: Vec<usize>,
    /// Attention blocks per stage; blocks run in (unshifted, shifted) pairs.
    pub depths: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    /// `false` turns every shifted block into an unshifted one (fixed-patch baseline).
    pub shifted: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            patch_sizes: vec![32, 64, 128, 256, 512],
            depths: vec![2, 2, 6, 6, 2],
            d_model: 64,
            heads: 4,
            stem_channels: 8,
            stem_kernel: 7,
            shifted: true,
        }
    }
}

impl StageConfig {
    /// Single-stage, unshifted model with `patch` samples per token and the
    /// same total depth as `self`.
    pub fn fixed_patch(&self, patch: usize) -> Result<Self> {
        if patch == 0 || WINDOW_LEN % patch != 0 {
            return Err(Error::Parameter(format!(
                "fixed patch size {patch} must divide the {WINDOW_LEN}-sample window"
            )));
        }
        let cfg = Self {
            patch_sizes: vec![patch],
            depths: vec![self.depths.iter().sum()],
            shifted: false,
            ..self.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_sizes.is_empty() || self.patch_sizes.len() != self.depths.len() {
            return bad(format!(
                "{} patch sizes for {} stage depths",
                self.patch_sizes.len(),
                self.depths.len()
            ));
        }
        if self.patch_sizes[0] == 0 || WINDOW_LEN % self.patch_sizes[0] != 0 {
            return bad(format!("first patch size {} must divide {WINDOW_LEN}", self.patch_sizes[0]));
        }
        if self.patch_sizes.windows(2).any(|w| w[1] != 2 * w[0]) {
            return bad(format!("patch sizes {:?} must double stage to stage", self.patch_sizes));
        }
        if *self.patch_sizes.last().unwrap() > WINDOW_LEN {
            return bad(format!("patch sizes {:?} exceed the window", self.patch_sizes));
        }
        if self.depths.iter().any(|&d| d == 0 || d % 2 != 0) {
            return bad(format!("depths {:?} must be positive and even", self.depths));
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.stem_channels == 0 || self.stem_kernel % 2 == 0 {
            return bad(format!(
                "stem needs channels > 0 and an odd kernel, got {} / {}",
                self.stem_channels, self.stem_kernel
            ));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.patch_sizes.len()
    }

    pub fn token_count(&self, stage: usize) -> usize {
        WINDOW_LEN / self.patch_sizes[stage]
    }

    pub fn total_depth(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Canonical text form, the input of [`StageConfig::hash`].
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_hierarchical() {
        let c = StageConfig::default();
        c.validate().unwrap();
        assert_eq!((0..5).map(|s| c.token_count(s)).collect::<Vec<_>>(), [16, 8, 4, 2, 1]);
        assert_eq!(c.total_depth(), 18);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = StageConfig::default();
        let mut c = base.clone();
        c.depths[2] = 5;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.patch_sizes[1] = 96;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.heads = 3;
        assert!(c.validate().is_err());
        assert!(base.fixed_patch(48).is_err());
    }

    #[test]
    fn fixed_patch_geometry() {
        let f = StageConfig::default().fixed_patch(128).unwrap();
        assert_eq!(f.token_count(0), 4);
        assert_eq!(f.depths, vec![18]);
        assert!(!f.shifted);
        assert_eq!(StageConfig::default().fixed_patch(32).unwrap().token_count(0), 16);
    }

    #[test]
    fn hash_tracks_config() {
        let a = StageConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.d_model = 32;
        assert_ne!(a.hash(), b.hash());
    }
}
