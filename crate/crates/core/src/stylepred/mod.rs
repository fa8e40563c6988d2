//! Text-side style prediction: contextual word-piece embeddings in, global
//! and local token weights plus symbolic word features out.

mod confusion;
mod loss;
mod targets;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use confusion::{eval_confusion, ConfusionMatrix, ConfusionReport};
pub use loss::{style_weight_loss, style_weight_loss_grad, symbolic_loss, symbolic_loss_grad, SymbolicLogits};
pub use targets::{extract_targets, read_targets_jsonl, write_targets_jsonl, StyleTargets};
pub use train::{train_stylepred, StyleLossRow, StylePredMeta, STYLE_LOSS_HEADER, STYLEPRED_KIND};

use crate::config::{AcousticConfig, StylePredConfig};
use crate::data::{Liaison, Punct, Schwa, Sentence, SymbolicWordFeatures};
use crate::error::{Error, Result};
use crate::align::softmax;
use crate::nn::{BiGru, BiLstm, Embedding, Graph, Linear, Mat, ParamStore, Var};
use crate::prosody::PauseCategory;
use crate::style::{SpeakerTable, StyleCodebook};

/// Parameter-name prefixes of the copies taken from the acoustic model.
pub const FROZEN_PREFIXES: [&str; 3] = ["speaker/", "style/global_tokens/", "style/local_tokens/"];

/// Word pieces of a sentence. Piece ids: 0 is unused, `1..=n_words` are
/// lexicon entries, then one id per punctuation mark.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokens {
    pub ids: Vec<usize>,
    pub piece_word: Vec<usize>,
}

impl TextTokens {
    pub fn from_sentence(sentence: &Sentence, lexicon_len: usize) -> Self {
        let mut ids = Vec::new();
        let mut piece_word = Vec::new();
        for (w, (&word, p)) in sentence.words.iter().zip(&sentence.punct).enumerate() {
            ids.push(word + 1);
            piece_word.push(w);
            if let Some(p) = p {
                ids.push(lexicon_len + 1 + p.index());
                piece_word.push(w);
            }
        }
        Self { ids, piece_word }
    }

    pub fn vocab_size(lexicon_len: usize) -> usize {
        lexicon_len + 1 + Punct::ALL.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn first_pieces(piece_word: &[usize]) -> Result<Vec<usize>> {
    let mut first = Vec::new();
    for (p, &w) in piece_word.iter().enumerate() {
        if w == first.len() {
            first.push(p);
        } else if w + 1 != first.len() {
            return Err(Error::Invalid(format!("piece {p} maps to word {w} out of order")));
        }
    }
    if first.is_empty() {
        return Err(Error::Invalid("no word pieces".into()));
    }
    Ok(first)
}

/// Per-piece vectors (text features then the speaker embedding) and the
/// piece-to-word map.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualTextEmbedding {
    pub pieces: Mat,
    pub piece_word: Vec<usize>,
}

impl ContextualTextEmbedding {
    pub fn new(pieces: Mat, piece_word: Vec<usize>) -> Result<Self> {
        if pieces.rows != piece_word.len() {
            return Err(Error::Shape(format!("{} piece vectors for {} pieces", pieces.rows, piece_word.len())));
        }
        first_pieces(&piece_word)?;
        Ok(Self { pieces, piece_word })
    }

    /// Adapter for an external encoder: appends `speaker` to every piece row.
    pub fn from_external(text: &Mat, piece_word: Vec<usize>, speaker: &[f64]) -> Result<Self> {
        let cols = text.cols + speaker.len();
        let mut data = Vec::with_capacity(text.rows * cols);
        for r in 0..text.rows {
            data.extend_from_slice(text.row(r));
            data.extend_from_slice(speaker);
        }
        Self::new(Mat::from_vec(text.rows, cols, data), piece_word)
    }

    pub fn n_words(&self) -> usize {
        self.piece_word.last().map_or(0, |w| w + 1)
    }

    pub fn first_pieces(&self) -> Vec<usize> {
        first_pieces(&self.piece_word).expect("validated on construction")
    }
}

/// Head outputs for one word.
#[derive(Debug, Clone, PartialEq)]
pub struct WordOutputs {
    pub lse_weights: Vec<f64>,
    pub logits: SymbolicLogits,
}

impl WordOutputs {
    pub fn features(&self) -> SymbolicWordFeatures {
        self.logits.argmax()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StylePrediction {
    pub gse_weights: Vec<f64>,
    pub gse: Vec<f64>,
    pub words: Vec<WordOutputs>,
    pub lse: Vec<Vec<f64>>,
    pub features: Vec<SymbolicWordFeatures>,
}

/// Width of the shared word affine map: local token logits then the
/// schwa, liaison and pause logits.
pub fn word_head_dim(n_local_tokens: usize) -> usize {
    n_local_tokens + 2 + 2 + PauseCategory::COUNT
}

#[derive(Debug, Clone)]
pub struct StylePredictor {
    pub cfg: StylePredConfig,
    pub acoustic: AcousticConfig,
    pub vocab: usize,
    pub store: ParamStore,
    pub words: Embedding,
    pub context: BiGru,
    pub global_rnn: BiLstm,
    pub global_out: Linear,
    pub word_out: Linear,
    pub speakers: SpeakerTable,
    pub global_tokens: StyleCodebook,
    pub local_tokens: StyleCodebook,
}

/// A padded batch of tokenized sentences.
pub(crate) struct TextBatch {
    pub ids: Vec<Option<usize>>,
    pub lens: Vec<usize>,
    pub steps: usize,
    pub speakers: Vec<usize>,
    /// Rows `b * steps + p` of each word's first piece, sentence by sentence.
    pub first_rows: Vec<Option<usize>>,
}

impl TextBatch {
    pub fn new(items: &[(&TextTokens, usize)]) -> Result<Self> {
        let steps = items.iter().map(|(t, _)| t.len()).max().unwrap_or(0);
        if steps == 0 {
            return Err(Error::Invalid("nonempty token lists required".into()));
        }
        let mut ids = vec![None; items.len() * steps];
        let mut first_rows = Vec::new();
        for (b, (t, _)) in items.iter().enumerate() {
            for (p, &id) in t.ids.iter().enumerate() {
                ids[b * steps + p] = Some(id);
            }
            first_rows.extend(first_pieces(&t.piece_word)?.into_iter().map(|p| Some(b * steps + p)));
        }
        Ok(Self {
            ids,
            lens: items.iter().map(|(t, _)| t.len()).collect(),
            steps,
            speakers: items.iter().map(|&(_, s)| s).collect(),
            first_rows,
        })
    }
}

impl StylePredictor {
    pub fn new(cfg: &StylePredConfig, acoustic: &AcousticConfig, vocab: usize, n_speakers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_57e1);
        let r = &mut rng;
        let mut store = ParamStore::new();
        let st = &mut store;
        let speakers = SpeakerTable::new(st, "speaker/table", n_speakers, acoustic.speaker_embedding, r);
        let global_tokens = StyleCodebook::new(st, "style/global_tokens", acoustic.global_rnn, acoustic, r);
        let local_tokens = StyleCodebook::new(st, "style/local_tokens", 2 * acoustic.local_rnn, acoustic, r);
        let words = Embedding::new(st, "text/embedding", vocab, cfg.word_embedding, 0.3, r);
        let context = BiGru::new(st, "text/context", cfg.word_embedding, cfg.context_rnn, r);
        let head_in = context.out_dim() + acoustic.speaker_embedding;
        let global_rnn = BiLstm::new(st, "global_head/rnn", head_in, cfg.global_rnn, r);
        let global_out = Linear::new(st, "global_head/out", 2 * global_rnn.out_dim(), acoustic.style_tokens, true, r);
        let word_out = Linear::new(st, "word_head/out", head_in, word_head_dim(acoustic.style_tokens), true, r);
        for p in FROZEN_PREFIXES {
            store.freeze_prefix(p);
        }
        Self {
            cfg: cfg.clone(),
            acoustic: acoustic.clone(),
            vocab,
            store,
            words,
            context,
            global_rnn,
            global_out,
            word_out,
            speakers,
            global_tokens,
            local_tokens,
        }
    }

    /// Width of the per-piece vectors the heads read.
    pub fn embedding_dim(&self) -> usize {
        self.context.out_dim() + self.acoustic.speaker_embedding
    }

    /// Built-in trainable encoder: piece embeddings, a bidirectional GRU,
    /// then the speaker embedding appended to every piece.
    pub fn encode_text(&self, tokens: &TextTokens, speaker: usize) -> Result<ContextualTextEmbedding> {
        self.check_tokens(tokens, speaker)?;
        let batch = TextBatch::new(&[(tokens, speaker)])?;
        let mut g = Graph::new(&self.store);
        let x = self.encode_graph(&mut g, &batch);
        ContextualTextEmbedding::new(g.value(x).clone(), tokens.piece_word.clone())
    }

    fn check_tokens(&self, tokens: &TextTokens, speaker: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty token list".into()));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&i| i == 0 || i >= self.vocab) {
            return Err(Error::Invalid(format!("token id {bad} outside 1..{}", self.vocab)));
        }
        if speaker >= self.speakers.n_speakers {
            return Err(Error::Invalid(format!("speaker {speaker} out of {}", self.speakers.n_speakers)));
        }
        first_pieces(&tokens.piece_word).map(|_| ())
    }

    pub(crate) fn encode_graph(&self, g: &mut Graph, batch: &TextBatch) -> Var {
        let e = self.words.forward(g, &batch.ids);
        let ctx = self.context.run(g, e, &batch.lens, batch.steps);
        let spk = self.speakers.lookup(g, &batch.speakers);
        let rows = (0..batch.lens.len() * batch.steps).map(|r| Some(r / batch.steps)).collect();
        let spk = g.gather(spk, rows);
        g.concat_cols(&[ctx, spk])
    }

    /// Global logits `[batch x n_global]` from the first and last bi-LSTM
    /// states, and word logits `[words x word_head_dim]` from first pieces.
    pub(crate) fn heads_graph(&self, g: &mut Graph, x: Var, batch: &TextBatch) -> (Var, Var) {
        let h = self.global_rnn.run(g, x, &batch.lens, batch.steps);
        let first = g.gather(h, (0..batch.lens.len()).map(|b| Some(b * batch.steps)).collect());
        let last = g.gather(h, batch.lens.iter().enumerate().map(|(b, &l)| Some(b * batch.steps + l - 1)).collect());
        let cat = g.concat_cols(&[first, last]);
        let global = self.global_out.forward(g, cat);
        let wx = g.gather(x, batch.first_rows.clone());
        (global, self.word_out.forward(g, wx))
    }

    fn heads(&self, emb: &ContextualTextEmbedding) -> Result<(Mat, Mat)> {
        if emb.pieces.cols != self.embedding_dim() {
            return Err(Error::Shape(format!(
                "piece vectors have {} values, the heads read {}",
                emb.pieces.cols,
                self.embedding_dim()
            )));
        }
        let batch = TextBatch {
            ids: Vec::new(),
            lens: vec![emb.pieces.rows],
            steps: emb.pieces.rows,
            speakers: Vec::new(),
            first_rows: emb.first_pieces().into_iter().map(Some).collect(),
        };
        let mut g = Graph::new(&self.store);
        let x = g.constant(emb.pieces.clone());
        let (gl, wl) = self.heads_graph(&mut g, x, &batch);
        Ok((g.value(gl).clone(), g.value(wl).clone()))
    }

    /// Softmax over the global tokens.
    pub fn predict_global_weights(&self, emb: &ContextualTextEmbedding) -> Result<Vec<f64>> {
        let (gl, _) = self.heads(emb)?;
        Ok(softmax(gl.row(0)))
    }

    pub fn predict_word_outputs(&self, emb: &ContextualTextEmbedding) -> Result<Vec<WordOutputs>> {
        let (_, wl) = self.heads(emb)?;
        Ok((0..wl.rows).map(|w| split_word_row(wl.row(w), self.acoustic.style_tokens)).collect())
    }

    /// Everything synthesis needs from text: weights, embeddings from the
    /// frozen codebooks and the argmax symbolic features.
    pub fn predict(&self, sentence: &Sentence, lexicon_len: usize, speaker: usize) -> Result<StylePrediction> {
        let tokens = TextTokens::from_sentence(sentence, lexicon_len);
        let emb = self.encode_text(&tokens, speaker)?;
        let gse_weights = self.predict_global_weights(&emb)?;
        let words = self.predict_word_outputs(&emb)?;
        let gse = self.global_tokens.embedding_from_weights(&self.store, &gse_weights)?;
        let lse = words
            .iter()
            .map(|w| self.local_tokens.embedding_from_weights(&self.store, &w.lse_weights))
            .collect::<Result<_>>()?;
        let mut features: Vec<_> = words.iter().map(WordOutputs::features).collect();
        // nothing follows the last word
        if let Some(f) = features.last_mut() {
            f.pause = PauseCategory::None;
        }
        Ok(StylePrediction {
            gse_weights,
            gse,
            words,
            lse,
            features,
        })
    }
}

pub(crate) fn split_word_row(row: &[f64], n_local: usize) -> WordOutputs {
    let s = &row[n_local..];
    WordOutputs {
        lse_weights: softmax(&row[..n_local]),
        logits: SymbolicLogits {
            schwa: [s[0], s[1]],
            liaison: [s[2], s[3]],
            pause: [s[4], s[5], s[6], s[7], s[8]],
        },
    }
}

impl SymbolicLogits {
    pub fn argmax(&self) -> SymbolicWordFeatures {
        SymbolicWordFeatures {
            schwa: Schwa::from_index(argmax(&self.schwa)),
            liaison: Liaison::from_index(argmax(&self.liaison)),
            pause: PauseCategory::from_index(argmax(&self.pause)).expect("five pause logits"),
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
