use crate::error::{CliError, CliResult};
use qcomp::compensator::DEFAULT_TAU;
use qcomp::quantizer::{GroupSize, QuantConfig};
use qcomp::sensitivity::NormScope;
use qcomp::toymodel::{LayerKind, ModelSpec};
use qcomp::WindowKind;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub layers: Vec<LayerKind>,
    pub n_experts: usize,
    pub top_k: usize,
    pub seed: u64,
    pub planted_salient: usize,
    pub noise_floor: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelSpec::default();
        Self {
            hidden: d.hidden,
            ffn_hidden: d.ffn_hidden,
            vocab: d.vocab,
            layers: d.layers,
            n_experts: d.n_experts,
            top_k: d.top_k,
            seed: d.seed,
            planted_salient: d.planted_salient,
            noise_floor: d.noise_floor,
        }
    }
}

/// `group_size = "row"` or a positive column count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupSetting {
    Cols(usize),
    Named(RowGroup),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowGroup {
    Row,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    pub bits: u8,
    pub group_size: GroupSetting,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            bits: 3,
            group_size: GroupSetting::Named(RowGroup::Row),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocationSection {
    pub tau: f64,
    /// Number of top layers; unset means `ceil(L / 4)`.
    pub top_layers: Option<usize>,
    pub k0: u32,
    pub norm_scope: NormScope,
    /// Fixed per-window budgets replacing the calibrated ones.
    pub r_std: Option<BTreeMap<WindowKind, usize>>,
}

impl Default for AllocationSection {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            top_layers: None,
            k0: qcomp::allocator::DEFAULT_K0,
            norm_scope: NormScope::Window,
            r_std: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub samples: usize,
    pub tokens: usize,
    pub seed: u64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            samples: 8,
            tokens: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub ranks: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
    pub tokens: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            ranks: vec![8, 16, 32, 64],
            warmup: 3,
            reps: 10,
            tokens: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub quant: QuantSection,
    pub allocation: AllocationSection,
    pub calibration: CalibrationSection,
    pub probe: ProbeSection,
    /// Where commands write when `--out` is not given. Not part of the
    /// config hash.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            quant: QuantSection::default(),
            allocation: AllocationSection::default(),
            calibration: CalibrationSection::default(),
            probe: ProbeSection::default(),
            out_dir: PathBuf::from("qcomp-out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn quant_config(&self) -> QuantConfig {
        let group = match self.quant.group_size {
            GroupSetting::Named(RowGroup::Row) => GroupSize::PerRow,
            GroupSetting::Cols(c) => GroupSize::Cols(c),
        };
        QuantConfig::new(self.quant.bits, group)
    }

    pub fn model_spec(&self) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            hidden: m.hidden,
            ffn_hidden: m.ffn_hidden,
            vocab: m.vocab,
            layers: m.layers.clone(),
            n_experts: m.n_experts,
            top_k: m.top_k,
            seed: m.seed,
            grid: self.quant_config(),
            planted_salient: m.planted_salient,
            noise_floor: m.noise_floor,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let spec = self.model_spec();
        spec.validate()?;
        for cols in [spec.hidden, spec.ffn_hidden] {
            spec.grid.validate(cols)?;
        }
        let a = &self.allocation;
        if !(a.tau > 0.0 && a.tau.is_finite()) {
            return Err(CliError::Config(format!("allocation.tau: must be positive, got {}", a.tau)));
        }
        if a.k0 > 16 {
            return Err(CliError::Config(format!("allocation.k0: {} is above 16", a.k0)));
        }
        if let Some(k) = a.top_layers {
            if k == 0 || k > spec.layers.len() {
                return Err(CliError::Config(format!(
                    "allocation.top_layers: {k} outside [1, {}]",
                    spec.layers.len()
                )));
            }
        }
        let c = &self.calibration;
        if c.samples == 0 || c.tokens == 0 {
            return Err(CliError::Config("calibration.samples and calibration.tokens must be positive".into()));
        }
        let p = &self.probe;
        let distinct: std::collections::BTreeSet<_> = p.ranks.iter().filter(|&&r| r > 0).collect();
        if distinct.len() < 3 {
            return Err(CliError::Config("probe.ranks: needs 3 distinct nonzero ranks".into()));
        }
        if p.reps == 0 || p.tokens == 0 {
            return Err(CliError::Config("probe.reps and probe.tokens must be positive".into()));
        }
        Ok(())
    }

    /// Hash of every field that shapes results.
    pub fn sha256(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            model: &'a ModelSection,
            quant: &'a QuantSection,
            allocation: &'a AllocationSection,
            calibration: &'a CalibrationSection,
            probe: &'a ProbeSection,
        }
        let h = Hashed {
            model: &self.model,
            quant: &self.quant,
            allocation: &self.allocation,
            calibration: &self.calibration,
            probe: &self.probe,
        };
        crate::provenance::sha256_hex(&serde_json::to_vec(&h).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.model_spec(), ModelSpec::default());
    }

    #[test]
    fn partial_file_and_group_forms() {
        let c: RunConfig = toml::from_str("[quant]\nbits = 4\ngroup_size = 32\n").unwrap();
        assert_eq!(c.quant_config().group_size, GroupSize::Cols(32));
        assert_eq!(c.model, ModelSection::default());
        let r: RunConfig = toml::from_str("[quant]\ngroup_size = \"row\"\n").unwrap();
        assert_eq!(r.quant_config().group_size, GroupSize::PerRow);
        assert!(toml::from_str::<RunConfig>("[model]\nwidth = 3\n").is_err());
    }

    #[test]
    fn invalid_fields_are_named() {
        let mut c = RunConfig::default();
        c.model.hidden = 0;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("hidden"), "{e}");
        let mut c = RunConfig::default();
        c.allocation.tau = 0.0;
        assert!(c.validate().unwrap_err().to_string().contains("allocation.tau"));
        let mut c = RunConfig::default();
        c.probe.ranks = vec![8, 8, 16];
        assert!(c.validate().unwrap_err().to_string().contains("probe.ranks"));
    }

    #[test]
    fn hash_ignores_out_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.sha256(), b.sha256());
        b.model.seed += 1;
        assert_ne!(a.sha256(), b.sha256());
    }
}
