use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CampaignError;
use crate::simt::{DeviceConfig, WARP_SIZE};

/// Device shape for a campaign. Memory size and instruction budget are
/// derived from the model and its golden run unless given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSettings {
    pub num_sms: usize,
    pub max_resident_warps_per_sm: usize,
    #[serde(default = "warp_size")]
    pub warp_size: usize,
    pub regs_per_thread: usize,
    #[serde(default)]
    pub global_mem_words: Option<usize>,
}

fn warp_size() -> usize {
    WARP_SIZE
}

impl Default for DeviceSettings {
    fn default() -> DeviceSettings {
        DeviceSettings {
            num_sms: 2,
            max_resident_warps_per_sm: 16,
            warp_size: WARP_SIZE,
            regs_per_thread: 32,
            global_mem_words: None,
        }
    }
}

impl DeviceSettings {
    pub fn device(&self, global_mem_words: usize, instr_budget: u64) -> DeviceConfig {
        DeviceConfig {
            num_sms: self.num_sms,
            max_resident_warps_per_sm: self.max_resident_warps_per_sm,
            warp_size: self.warp_size,
            regs_per_thread: self.regs_per_thread,
            global_mem_words,
            instr_budget,
        }
    }
}

/// Campaign description, read from JSON. Relative paths resolve against
/// the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    /// Model manifest.
    pub model: PathBuf,
    /// IDX image file.
    pub images: PathBuf,
    /// IDX label file.
    pub labels: PathBuf,
    /// Dataset images (the first `image_count`) each fault runs on.
    pub image_count: usize,
    /// Line-JSON fault list.
    pub faults: PathBuf,
    #[serde(default)]
    pub device: DeviceSettings,
    /// Per-launch warp-instruction budget; defaults to 20x the largest
    /// golden per-kernel count.
    #[serde(default)]
    pub instr_budget: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub parallelism: usize,
    pub output_dir: PathBuf,
}

fn one() -> usize {
    1
}

impl CampaignConfig {
    pub fn from_json(json: &str, base_dir: &Path) -> Result<CampaignConfig, CampaignError> {
        let mut c: CampaignConfig = serde_json::from_str(json)
            .map_err(|e| CampaignError::Config(format!("campaign config: {e}")))?;
        for p in [
            &mut c.model,
            &mut c.images,
            &mut c.labels,
            &mut c.faults,
            &mut c.output_dir,
        ] {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        if c.image_count == 0 {
            return Err(CampaignError::Config("image_count must be at least 1".into()));
        }
        if c.parallelism == 0 {
            return Err(CampaignError::Config("parallelism must be at least 1".into()));
        }
        if c.instr_budget == Some(0) {
            return Err(CampaignError::Config("instr_budget must be positive".into()));
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CampaignConfig, CampaignError> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| CampaignError::io(path, e))?;
        CampaignConfig::from_json(&json, path.parent().unwrap_or_else(|| Path::new(".")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_and_defaults() {
        let json = r#"{"model":"m.json","images":"/abs/i.idx","labels":"l.idx",
            "image_count":3,"faults":"f.jsonl","output_dir":"out"}"#;
        let c = CampaignConfig::from_json(json, Path::new("/cfg")).unwrap();
        assert_eq!(c.model, PathBuf::from("/cfg/m.json"));
        assert_eq!(c.images, PathBuf::from("/abs/i.idx"));
        assert_eq!(c.parallelism, 1);
        assert_eq!(c.device, DeviceSettings::default());
        assert_eq!(c.instr_budget, None);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = Path::new(".");
        assert!(CampaignConfig::from_json("{not json", base).is_err());
        let zero = r#"{"model":"m","images":"i","labels":"l","image_count":0,"faults":"f","output_dir":"o"}"#;
        assert!(CampaignConfig::from_json(zero, base).is_err());
        let extra = r#"{"model":"m","images":"i","labels":"l","image_count":1,"faults":"f","output_dir":"o","bogus":1}"#;
        assert!(CampaignConfig::from_json(extra, base).is_err());
    }
}
