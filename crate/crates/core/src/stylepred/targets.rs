use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Corpus, SymbolicWordFeatures};
use crate::error::{Error, Result};
use crate::io::write_text;
use crate::model::{scaleograms, AcousticModel};
use crate::nn::Graph;
use crate::prosody::CwtConfig;

/// Training targets for one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleTargets {
    pub id: String,
    pub speaker: usize,
    pub gse_weights: Vec<f64>,
    /// One weight vector per word.
    pub lse_weights: Vec<Vec<f64>>,
    pub features: Vec<SymbolicWordFeatures>,
}

/// Utterances per reference-path batch. Fixed so extraction is reproducible.
const EXTRACT_BATCH: usize = 8;

/// Runs the acoustic model's reference path over every utterance and keeps
/// the head-averaged token weights next to the corpus annotations.
pub fn extract_targets(model: &AcousticModel, corpus: &Corpus, cwt: &CwtConfig) -> Result<Vec<StyleTargets>> {
    let sgs = scaleograms(corpus, cwt)?;
    let order: Vec<usize> = (0..corpus.utterances.len()).collect();
    let mut out = Vec::with_capacity(order.len());
    for idx in order.chunks(EXTRACT_BATCH) {
        let batch = Batch::collate(corpus, idx, &sgs)?;
        let mut g = Graph::new(&model.store);
        let fw = model.teacher_forced_forward::<ChaCha8Rng>(&mut g, &batch, None)?;
        let gw = g.value(fw.gse_weights);
        for (b, &u) in idx.iter().enumerate() {
            let utt = &corpus.utterances[u];
            out.push(StyleTargets {
                id: utt.id.clone(),
                speaker: utt.speaker,
                gse_weights: gw.row(b).to_vec(),
                lse_weights: fw.lse_weights[b].clone(),
                features: utt.features.clone(),
            });
        }
    }
    Ok(out)
}

pub fn write_targets_jsonl(path: &Path, targets: &[StyleTargets]) -> Result<()> {
    let mut s = String::new();
    for t in targets {
        s.push_str(&serde_json::to_string(t)?);
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn read_targets_jsonl(path: &Path) -> Result<Vec<StyleTargets>> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
