use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AcousticModel, ModelDims};
use crate::checkpoint::{read_archive, restore_params, write_archive};
use crate::config::RunConfig;
use crate::data::{CorpusManifest, Lexicon, MelConfig, MelStats, Rules, SpeakerInfo};
use crate::error::{Error, Result};

pub const ACOUSTIC_KIND: &str = "acoustic";

/// Corpus facts inference needs without the corpus itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub mel: MelConfig,
    pub speakers: Vec<SpeakerInfo>,
    pub norm: MelStats,
    pub rules: Rules,
    pub lexicon: Lexicon,
    pub alphabet_size: usize,
}

impl CorpusInfo {
    pub fn from_manifest(m: &CorpusManifest) -> Self {
        Self {
            mel: m.mel.clone(),
            speakers: m.speakers.clone(),
            norm: m.norm.clone(),
            rules: m.rules.clone(),
            lexicon: m.lexicon.clone(),
            alphabet_size: m.alphabet_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticMeta {
    pub step: usize,
    pub config: RunConfig,
    pub dims: ModelDims,
    pub corpus: CorpusInfo,
}

impl AcousticModel {
    pub fn save(&self, path: &Path, meta: &AcousticMeta) -> Result<()> {
        if meta.dims != self.dims || meta.config.acoustic != self.cfg {
            return Err(Error::Checkpoint("metadata does not describe this model".into()));
        }
        write_archive(path, ACOUSTIC_KIND, &meta.config.hash(), meta, &self.store, "")
    }

    pub fn load(path: &Path) -> Result<(Self, AcousticMeta)> {
        let ar = read_archive::<AcousticMeta>(path, ACOUSTIC_KIND)?;
        let meta = ar.manifest.meta;
        meta.config.validate()?;
        if ar.manifest.config_hash != meta.config.hash() {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let mut model = AcousticModel::new(&meta.config.acoustic, meta.dims, meta.config.seed);
        restore_params(&mut model.store, &ar.tensors, "")?;
        Ok((model, meta))
    }
}
