use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::Corpus;
use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::prosody::PitchScaleogram;

/// Padded tensors for a group of utterances. Sequences are stored
/// `(batch * steps) x features` with row `b * steps + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub sym_lens: Vec<usize>,
    pub max_symbols: usize,
    /// `batch * max_symbols` symbol ids, `None` where padded.
    pub symbols: Vec<Option<usize>>,
    pub frame_lens: Vec<usize>,
    pub max_frames: usize,
    /// Z-normalized target mels, zero where padded.
    pub mel: Mat,
    /// Frame-major scaleogram, zero where padded.
    pub scaleogram: Mat,
    pub speakers: Vec<usize>,
    pub word_onsets: Vec<Vec<usize>>,
    pub durations: Vec<Vec<usize>>,
}

impl Batch {
    /// Collates utterances; `scaleograms[i]` belongs to utterance `i` of the corpus.
    pub fn collate(corpus: &Corpus, indices: &[usize], scaleograms: &[PitchScaleogram]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let utts: Vec<_> = indices.iter().map(|&i| &corpus.utterances[i]).collect();
        let nb = corpus.n_bins();
        let sym_lens: Vec<usize> = utts.iter().map(|u| u.sequence.len()).collect();
        let frame_lens: Vec<usize> = utts.iter().map(|u| u.n_frames()).collect();
        let max_symbols = *sym_lens.iter().max().unwrap();
        let max_frames = *frame_lens.iter().max().unwrap();
        let n_scales = scaleograms.first().map_or(0, |s| s.scales.len());
        let b = indices.len();
        let mut symbols = vec![None; b * max_symbols];
        let mut mel = Mat::zeros(b * max_frames, nb);
        let mut scaleogram = Mat::zeros(b * max_frames, n_scales);
        for (k, (u, &i)) in utts.iter().zip(indices).enumerate() {
            for (j, &s) in u.sequence.symbols.iter().enumerate() {
                symbols[k * max_symbols + j] = Some(s);
            }
            let z = corpus.manifest.norm.normalize(&u.mel);
            mel.data[k * max_frames * nb..(k * max_frames + z.rows) * nb].copy_from_slice(&z.data);
            let sg = &scaleograms[i];
            if sg.n_frames != u.n_frames() {
                return Err(Error::Shape(format!("scaleogram of {} has {} frames", u.id, sg.n_frames)));
            }
            let fm = sg.frame_major();
            scaleogram.data[k * max_frames * n_scales..(k * max_frames + sg.n_frames) * n_scales].copy_from_slice(&fm);
        }
        Ok(Self {
            indices: indices.to_vec(),
            sym_lens,
            max_symbols,
            symbols,
            frame_lens,
            max_frames,
            mel,
            scaleogram,
            speakers: utts.iter().map(|u| u.speaker).collect(),
            word_onsets: utts.iter().map(|u| u.sequence.word_onsets.clone()).collect(),
            durations: utts.iter().map(|u| u.durations.0.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Splits the corpus into length-bucketed batches. The order is a pure
/// function of `(seed, epoch)`; every utterance appears exactly once.
pub fn make_batches(corpus: &Corpus, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least one".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0xa076_1d64_78bd_642f));
    let mut idx: Vec<usize> = (0..corpus.utterances.len()).collect();
    idx.shuffle(&mut rng);
    idx.sort_by_key(|&i| corpus.utterances[i].n_frames());
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(&mut rng);
    Ok(batches)
}
