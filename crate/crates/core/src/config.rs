//! Run configuration: one JSON document mirroring every module's knobs,
//! hashed canonically so outputs can be tied to the exact settings that
//! produced them.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Synthetic dataset layout.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthLayout {
    /// Stimulus and mask extent (square).
    pub image_size: usize,
    /// Early ROIs form an NxN retinotopic tile grid.
    pub early_grid: usize,
    /// Number of mid ROIs (quadrant masks carrying global contour stats).
    pub mid_count: usize,
    /// Shape categories; one late ROI per category.
    pub categories: usize,
}

impl Default for SynthLayout {
    fn default() -> Self {
        SynthLayout {
            image_size: 64,
            early_grid: 3,
            mid_count: 4,
            categories: 4,
        }
    }
}

impl SynthLayout {
    pub fn early_count(&self) -> usize {
        self.early_grid * self.early_grid
    }

    pub fn roi_count(&self) -> usize {
        self.early_count() + self.mid_count + self.categories
    }
}

/// Guidance branch and schedule settings. Per-scale vectors follow the
/// order of `RunConfig::scales` (ascending, i.e. deepest first).
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub lambda_max: Vec<f64>,
    pub rho: Vec<f64>,
    /// Soft budget on total injected energy.
    pub eta: f64,
    pub mhla: bool,
    pub heads: usize,
    /// gamma head is tanh-bounded to [-gamma_bound, gamma_bound].
    pub gamma_bound: f64,
    /// L1 penalty weight on the pyramid; 0 disables.
    pub sparsity_l1: f64,
    /// Injection order at a wired depth: FiLM then MHLA, or the reverse.
    pub film_first: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            // shallow->deep strengths (0.8, 0.7, 0.6, 0.5) stored in
            // ascending-scale order (deepest first).
            lambda_max: vec![0.5, 0.6, 0.7, 0.8],
            rho: vec![2.0, 1.5, 1.0, 0.5],
            eta: 2.0,
            mhla: true,
            heads: 4,
            gamma_bound: 0.5,
            sparsity_l1: 0.0,
            film_first: true,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    /// L2 on the group-aggregation coefficients.
    pub l2_alpha: f64,
    /// KL prior weight pulling gate mass toward the depth prior.
    pub kl_gates: f64,
    /// Total variation on the aggregated pyramid maps.
    pub tv: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            l2_alpha: 1e-3,
            kl_gates: 1e-3,
            tv: 0.0,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub stage_a_steps: usize,
    pub stage_b_steps: usize,
    pub lr_guidance: f64,
    pub lr_backbone: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    /// Stage A ramps lambda_max linearly from 0 over this many steps.
    pub lambda_ramp_steps: usize,
    /// DDPM training steps T.
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Records held out of training batches for the validation loss.
    pub val_records: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 8,
            stage_a_steps: 500,
            stage_b_steps: 150,
            lr_guidance: 1e-4,
            lr_backbone: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weight_decay: 1e-2,
            lambda_ramp_steps: 100,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            val_records: 16,
        }
    }
}

/// Which parts of the conditioning stack are active. The ablation axes of
/// the evaluation grid live here so variants differ in exactly one subtree.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VariantConfig {
    /// Subset of "eml" to keep in the aggregation.
    pub groups: String,
    /// false: bypass the adapter, feed a raw fused ROI map to the hints.
    pub adapter: bool,
    /// false: skip gated cross-attention entirely.
    pub mhla: bool,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            groups: "eml".to_string(),
            adapter: true,
            mhla: true,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Pyramid resolutions, ascending. The deepest U-Net block pairs with
    /// the smallest scale.
    pub scales: Vec<usize>,
    /// Guidance channels d_s per scale.
    pub channels_per_scale: Vec<usize>,
    /// U-Net block widths per scale (same order as `scales`).
    pub unet_widths: Vec<usize>,
    pub latent_channels: usize,
    /// Base blur for the mask scale space.
    pub sigma0: f64,
    /// Replace interior scales with band-pass (difference-of-blur) maps.
    pub bandpass: bool,
    pub layout: SynthLayout,
    pub guidance: GuidanceConfig,
    pub reg: RegConfig,
    pub train: TrainConfig,
    pub ddim_steps: usize,
    pub variant: VariantConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scales: vec![8, 16, 32, 64],
            channels_per_scale: vec![4, 8, 8, 16],
            unet_widths: vec![128, 96, 64, 32],
            latent_channels: 4,
            sigma0: 0.5,
            bandpass: false,
            layout: SynthLayout::default(),
            guidance: GuidanceConfig::default(),
            reg: RegConfig::default(),
            train: TrainConfig::default(),
            ddim_steps: 50,
            variant: VariantConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    /// Width of the U-Net block wired to scale index `si`.
    pub fn width_at(&self, si: usize) -> usize {
        self.unet_widths[si]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.scales.len();
        let cfg = |msg: String| Err(Error::Config(msg));
        if n == 0 || self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return cfg(format!("scales must be strictly increasing, got {:?}", self.scales));
        }
        if self.channels_per_scale.len() != n
            || self.unet_widths.len() != n
            || self.guidance.lambda_max.len() != n
            || self.guidance.rho.len() != n
        {
            return cfg(format!(
                "per-scale vectors must all have length {n}: d_s {}, widths {}, lambda {}, rho {}",
                self.channels_per_scale.len(),
                self.unet_widths.len(),
                self.guidance.lambda_max.len(),
                self.guidance.rho.len()
            ));
        }
        let top = *self.scales.last().unwrap();
        if self.layout.image_size != top {
            return cfg(format!(
                "image_size {} must equal the largest scale {top}",
                self.layout.image_size
            ));
        }
        for &s in &self.scales {
            let ratio = top / s;
            if top % s != 0 || !ratio.is_power_of_two() {
                return cfg(format!("scale {s} must divide {top} by a power of two"));
            }
        }
        for &w in &self.unet_widths {
            if w % self.guidance.heads != 0 {
                return cfg(format!(
                    "attention heads {} must divide every unet width, got {w}",
                    self.guidance.heads
                ));
            }
        }
        for &l in &self.guidance.lambda_max {
            if !(0.0..=1.0).contains(&l) {
                return cfg(format!("lambda_max {l} outside [0,1]"));
            }
        }
        if self.guidance.rho.iter().any(|&r| r <= 0.0) {
            return cfg(format!("rho must be > 0, got {:?}", self.guidance.rho));
        }
        if self.guidance.eta <= 0.0 {
            return cfg(format!("eta must be > 0, got {}", self.guidance.eta));
        }
        if self.layout.categories < 2 || self.layout.categories > 4 {
            return cfg(format!(
                "categories must be in 2..=4, got {}",
                self.layout.categories
            ));
        }
        if self.layout.early_grid == 0 || self.layout.mid_count == 0 {
            return cfg("early_grid and mid_count must be positive".to_string());
        }
        if self.train.batch == 0 || self.train.diffusion_steps == 0 || self.ddim_steps == 0 {
            return cfg("batch, diffusion_steps and ddim_steps must be positive".to_string());
        }
        let keep = &self.variant.groups;
        if keep.is_empty() || keep.chars().any(|c| !"eml".contains(c)) {
            return cfg(format!("variant.groups must be a nonempty subset of \"eml\", got {keep:?}"));
        }
        Ok(())
    }

    /// Canonical hash: serialize to a JSON value (object keys sort), then
    /// SHA-256 of the compact rendering. Stable under key reordering of any
    /// input document.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canon = serde_json::to_string(&value).expect("value renders");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::json(origin.to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn hash_is_stable_under_key_reordering() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        // rebuild from a Value round-trip, which re-sorts keys
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        let cfg2: RunConfig = serde_json::from_value(value).unwrap();
        assert_eq!(cfg.hash(), cfg2.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value = serde_json::to_value(RunConfig::default()).unwrap();
        value["no_such_key"] = serde_json::json!(1);
        let text = serde_json::to_string(&value).unwrap();
        assert!(RunConfig::from_json(&text, "test").is_err());
    }

    #[test]
    fn hash_differs_when_fields_differ() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn bad_scales_rejected() {
        let mut cfg = RunConfig::default();
        cfg.scales = vec![8, 8, 32, 64];
        assert!(cfg.validate().is_err());
    }
}
