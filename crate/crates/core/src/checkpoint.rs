//! Single-file checkpoints: safetensors weights plus a JSON header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::cyclegan::{CycleGanState, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::ffa::{Ffa, FfaConfig, Normalization};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::training::{EpochRecord, Phase, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "ckpt";
const META_KEY: &str = "haze_restore";

/// Loss accumulated in an epoch that was interrupted by a step limit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialEpoch {
    pub loss_sum: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub phase: Phase,
    pub variant: String,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub ffa: FfaConfig,
    pub normalization: Option<Normalization>,
    pub discriminator: Option<DiscriminatorConfig>,
    pub train: Option<TrainConfig>,
    pub history: Vec<EpochRecord>,
    #[serde(default)]
    pub partial_epoch: PartialEpoch,
    /// Step count per optimizer, keyed by tensor prefix.
    #[serde(default)]
    pub optimizer_steps: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

/// `{phase}_{variant}_{epoch}.ckpt`
pub fn file_name(phase: Phase, variant: &str, epoch: u64) -> String {
    format!("{}_{variant}_{epoch}.{EXTENSION}", phase.as_str())
}

/// Highest-epoch `{phase}_{variant}_{epoch}.ckpt` in `dir`.
pub fn latest(dir: &Path, phase: Phase, variant: &str) -> Option<std::path::PathBuf> {
    let prefix = format!("{}_{variant}_", phase.as_str());
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?;
            let epoch: u64 = name.strip_prefix(&prefix)?.strip_suffix(&format!(".{EXTENSION}"))?.parse().ok()?;
            Some((epoch, p))
        })
        .max_by_key(|(epoch, _)| *epoch)
        .map(|(_, p)| p)
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            tensors: HashMap::new(),
        }
    }

    /// A generator-only checkpoint, e.g. for exporting a fixed model.
    pub fn from_generator(phase: Phase, variant: &str, generator: &Ffa) -> Result<Self> {
        let mut ckpt = Self::new(CheckpointMeta {
            format_version: FORMAT_VERSION,
            phase,
            variant: variant.to_string(),
            epoch: 0,
            step: 0,
            ffa: *generator.config(),
            normalization: generator.normalization().copied(),
            discriminator: None,
            train: None,
            history: Vec::new(),
            partial_epoch: PartialEpoch::default(),
            optimizer_steps: BTreeMap::new(),
        });
        ckpt.add_store("g_xy.", generator.params())?;
        Ok(ckpt)
    }

    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        self.tensors.extend(store.export(prefix)?);
        Ok(())
    }

    pub fn add_optimizer(&mut self, prefix: &str, opt: &Adam) {
        self.tensors.extend(opt.export(prefix));
        self.meta.optimizer_steps.insert(prefix.to_string(), opt.steps());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut header = HashMap::new();
        header.insert("format_version".to_string(), FORMAT_VERSION.to_string());
        header.insert(META_KEY.to_string(), serde_json::to_string(&self.meta)?);
        let mut entries: Vec<(&String, &Tensor)> = self.tensors.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let tmp = path.with_extension("ckpt.tmp");
        safetensors::serialize_to_file(entries, Some(header), &tmp)
            .map_err(|e| Error::checkpoint(path, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) =
            safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::checkpoint(path, e))?;
        let info = header
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::checkpoint(path, "missing metadata header"))?;
        let version: u32 = info
            .get("format_version")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::checkpoint(path, "missing format_version"))?;
        if version > FORMAT_VERSION {
            return Err(Error::checkpoint(
                path,
                format!("format version {version} is newer than supported {FORMAT_VERSION}"),
            ));
        }
        let meta: CheckpointMeta = info
            .get(META_KEY)
            .ok_or_else(|| Error::checkpoint(path, "missing metadata"))
            .and_then(|m| serde_json::from_str(m).map_err(|e| Error::checkpoint(path, e)))?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::checkpoint(path, e))?;
        let mut tensors = HashMap::with_capacity(st.len());
        for (name, view) in st.tensors() {
            let t = view.load(&Device::Cpu).map_err(|e| Error::checkpoint(path, e))?;
            tensors.insert(name, t);
        }
        Ok(Self { meta, tensors })
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }

    fn import(&self, prefix: &str, store: &ParamStore) -> Result<()> {
        store.import(prefix, |k| self.tensors.get(k).cloned())
    }

    /// The hazy-to-clean generator.
    pub fn generator(&self, dtype: DType) -> Result<Ffa> {
        let g = Ffa::new(self.meta.ffa, 0, dtype)?.with_normalization(self.meta.normalization);
        self.import("g_xy.", g.params())?;
        Ok(g)
    }

    /// All four networks; requires a checkpoint from an adversarial phase.
    pub fn cyclegan_state(&self, dtype: DType) -> Result<CycleGanState> {
        let disc = self
            .meta
            .discriminator
            .ok_or_else(|| Error::Config(format!("{} checkpoint has no discriminators", self.meta.phase.as_str())))?;
        let state = CycleGanState {
            generator_xy: self.generator(dtype)?,
            generator_yx: Ffa::new(self.meta.ffa, 0, dtype)?,
            discriminator_x: Discriminator::new(disc, 0, dtype)?,
            discriminator_y: Discriminator::new(disc, 0, dtype)?,
        };
        self.import("g_yx.", state.generator_yx.params())?;
        self.import("d_x.", state.discriminator_x.params())?;
        self.import("d_y.", state.discriminator_y.params())?;
        Ok(state)
    }

    /// Restores an optimizer saved under `prefix`.
    pub fn restore_optimizer(&self, prefix: &str, store: &ParamStore, opt: &mut Adam) -> Result<()> {
        let step = self.meta.optimizer_steps.get(prefix).copied().unwrap_or(0);
        opt.import(store, prefix, step, |k| self.tensors.get(k).cloned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Phase;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            phase: Phase::FfaPretrain,
            variant: "base".into(),
            epoch: 3,
            step: 12,
            ffa: FfaConfig::tiny(),
            normalization: Some(Normalization::default()),
            discriminator: None,
            train: None,
            history: Vec::new(),
            partial_epoch: PartialEpoch::default(),
            optimizer_steps: BTreeMap::new(),
        }
    }

    #[test]
    fn round_trip_reproduces_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(file_name(Phase::FfaPretrain, "base", 3));
        let g = Ffa::new(FfaConfig::tiny(), 7, DType::F32)
            .unwrap()
            .with_normalization(Some(Normalization::default()));
        let mut ckpt = Checkpoint::new(meta());
        ckpt.add_store("g_xy.", g.params()).unwrap();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.meta, ckpt.meta);
        let g2 = loaded.generator(DType::F32).unwrap();
        let x = Tensor::rand(0f32, 1f32, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let a = g.infer(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = g2.infer(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.ckpt");
        std::fs::write(&path, b"garbage").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }));
        assert!(err.to_string().contains("broken.ckpt"));
    }

    #[test]
    fn naming_scheme() {
        assert_eq!(file_name(Phase::Finetune, "k25", 4), "finetune_k25_4.ckpt");
    }

    #[test]
    fn latest_picks_highest_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let g = Ffa::new(FfaConfig::tiny(), 1, DType::F32).unwrap();
        let ckpt = Checkpoint::from_generator(Phase::Finetune, "k5", &g).unwrap();
        for epoch in [2, 10, 9] {
            ckpt.save(&dir.path().join(file_name(Phase::Finetune, "k5", epoch))).unwrap();
        }
        ckpt.save(&dir.path().join(file_name(Phase::Finetune, "k50", 99))).unwrap();
        let got = latest(dir.path(), Phase::Finetune, "k5").unwrap();
        assert_eq!(got.file_name().unwrap(), "finetune_k5_10.ckpt");
        assert!(latest(dir.path(), Phase::Finetune, "k0").is_none());
        assert!(!Checkpoint::load(&got).unwrap().has_prefix("d_x."));
    }
}
