use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::targets::{extract_targets, write_targets_jsonl, StyleTargets};
use super::{StylePredictor, TextBatch, TextTokens, FROZEN_PREFIXES};
use crate::checkpoint::{read_archive, restore_params, write_archive};
use crate::config::RunConfig;
use crate::data::{Corpus, Lexicon};
use crate::error::{Error, Result};
use crate::io::write_text;
use crate::model::{AcousticMeta, AcousticModel};
use crate::nn::{Adam, Graph, Mat, Var};
use crate::prosody::PauseCategory;

pub const STYLEPRED_KIND: &str = "stylepred";
pub const STYLE_LOSS_HEADER: &str = "step,L,L_gse,L_lse,L_sym,lr,grad_norm";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StylePredMeta {
    pub step: usize,
    pub config: RunConfig,
    pub vocab: usize,
    pub n_speakers: usize,
    pub lexicon: Lexicon,
    /// Config hash of the acoustic checkpoint the codebooks came from.
    pub acoustic_config_hash: String,
    /// Fingerprints of the frozen copies, by prefix.
    pub frozen: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleLossRow {
    pub step: usize,
    pub total: f64,
    pub gse: f64,
    pub lse: f64,
    pub symbolic: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StyleLossRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.3e},{:.4}",
            self.step, self.total, self.gse, self.lse, self.symbolic, self.lr, self.grad_norm
        )
    }
}

impl StylePredictor {
    fn fingerprints(&self) -> Vec<(String, String)> {
        FROZEN_PREFIXES.iter().map(|p| (p.to_string(), self.store.fingerprint(p))).collect()
    }

    /// Copies the speaker table and both codebooks from a trained acoustic
    /// model. Any shape disagreement is refused.
    pub fn adopt_codebooks(&mut self, acoustic: &AcousticModel) -> Result<()> {
        let mut tensors = std::collections::BTreeMap::new();
        for (_, name, v) in acoustic.store.iter() {
            if FROZEN_PREFIXES.iter().any(|p| name.starts_with(p)) {
                tensors.insert(name.to_string(), v.clone());
            }
        }
        for p in FROZEN_PREFIXES {
            restore_params(&mut self.store, &tensors, p)
                .map_err(|e| Error::Checkpoint(format!("codebook dimensions do not match the acoustic checkpoint: {e}")))?;
        }
        for p in FROZEN_PREFIXES {
            if self.store.fingerprint(p) != acoustic.store.fingerprint(p) {
                return Err(Error::Checkpoint(format!("parameters under {p} differ from the acoustic model")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, meta: &StylePredMeta) -> Result<()> {
        if meta.vocab != self.vocab || meta.config.stylepred != self.cfg || meta.config.acoustic != self.acoustic {
            return Err(Error::Checkpoint("metadata does not describe this predictor".into()));
        }
        write_archive(path, STYLEPRED_KIND, &meta.config.hash(), meta, &self.store, "")
    }

    pub fn load(path: &Path) -> Result<(Self, StylePredMeta)> {
        let ar = read_archive::<StylePredMeta>(path, STYLEPRED_KIND)?;
        let meta = ar.manifest.meta;
        meta.config.validate()?;
        if ar.manifest.config_hash != meta.config.hash() {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let mut m = StylePredictor::new(&meta.config.stylepred, &meta.config.acoustic, meta.vocab, meta.n_speakers, meta.config.seed);
        restore_params(&mut m.store, &ar.tensors, "")?;
        if m.fingerprints() != meta.frozen {
            return Err(Error::Checkpoint("frozen codebook fingerprints do not match".into()));
        }
        Ok((m, meta))
    }

    /// `L = w_g CE(gse) + w_l CE(lse) + w_s (CE(schwa) + CE(liaison) + CE(pause) + beta EMD2(pause))`,
    /// each term averaged over sentences or words.
    pub(crate) fn batch_loss(&self, g: &mut Graph, targets: &[&StyleTargets], tokens: &[&TextTokens]) -> Result<[Var; 4]> {
        let items: Vec<_> = tokens.iter().zip(targets).map(|(t, s)| (*t, s.speaker)).collect();
        let batch = TextBatch::new(&items)?;
        let x = self.encode_graph(g, &batch);
        let (gl, wl) = self.heads_graph(g, x, &batch);
        let n = self.acoustic.style_tokens;
        let nw = batch.first_rows.len();
        let gt = Mat::from_vec(targets.len(), n, targets.iter().flat_map(|t| t.gse_weights.clone()).collect());
        let l_gse = g.soft_cross_entropy(gl, gt, vec![1.0; targets.len()]);
        let lt: Vec<f64> = targets.iter().flat_map(|t| t.lse_weights.concat()).collect();
        if lt.len() != nw * n {
            return Err(Error::Shape(format!("{} target LSE values for {nw} words", lt.len())));
        }
        let ll = g.slice_cols(wl, 0, n);
        let l_lse = g.soft_cross_entropy(ll, Mat::from_vec(nw, n, lt), vec![1.0; nw]);
        let feats: Vec<_> = targets.iter().flat_map(|t| t.features.iter().copied()).collect();
        let onehot = |k: usize, idx: &dyn Fn(usize) -> usize| {
            let mut m = Mat::zeros(nw, k);
            for (w, _) in feats.iter().enumerate() {
                m.data[w * k + idx(w)] = 1.0;
            }
            m
        };
        let schwa = onehot(2, &|w| feats[w].schwa.index());
        let liaison = onehot(2, &|w| feats[w].liaison.index());
        let pause = onehot(PauseCategory::COUNT, &|w| feats[w].pause.index());
        let ones = vec![1.0; nw];
        let zs = g.slice_cols(wl, n, 2);
        let zl = g.slice_cols(wl, n + 2, 2);
        let zp = g.slice_cols(wl, n + 4, PauseCategory::COUNT);
        let c_s = g.soft_cross_entropy(zs, schwa, ones.clone());
        let c_l = g.soft_cross_entropy(zl, liaison, ones.clone());
        let c_p = g.soft_cross_entropy(zp, pause.clone(), ones.clone());
        let emd = g.emd2_softmax(zp, pause, ones);
        let emd = g.scale(emd, self.cfg.emd_weight);
        let s1 = g.add(c_s, c_l);
        let s2 = g.add(c_p, emd);
        let l_sym = g.add(s1, s2);
        let a = g.scale(l_gse, self.cfg.gse_weight);
        let b = g.scale(l_lse, self.cfg.lse_weight);
        let c = g.scale(l_sym, self.cfg.symbolic_weight);
        let ab = g.add(a, b);
        let total = g.add(ab, c);
        Ok([total, l_gse, l_lse, l_sym])
    }
}

fn same_lexicon(a: &Lexicon, b: &Lexicon) -> bool {
    a.entries == b.entries
}

/// Trains the style predictor against targets extracted with the acoustic
/// model. Writes `style_targets.jsonl`, `stylepred_loss.csv` and
/// `stylepred.ckpt` under `out_dir`.
pub fn train_stylepred(
    corpus: &Corpus,
    acoustic: &AcousticModel,
    acoustic_meta: &AcousticMeta,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<(StylePredictor, Vec<StyleLossRow>)> {
    cfg.validate()?;
    if corpus.utterances.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    let lex = &corpus.manifest.lexicon;
    if !same_lexicon(lex, &acoustic_meta.corpus.lexicon) {
        return Err(Error::Invalid("corpus lexicon differs from the acoustic checkpoint's".into()));
    }
    if corpus.n_speakers() > acoustic.dims.n_speakers {
        return Err(Error::Invalid(format!(
            "corpus has {} speakers, the acoustic model {}",
            corpus.n_speakers(),
            acoustic.dims.n_speakers
        )));
    }
    let sp = &cfg.stylepred;
    let vocab = TextTokens::vocab_size(lex.len());
    let mut model = StylePredictor::new(sp, &cfg.acoustic, vocab, acoustic.dims.n_speakers, cfg.seed);
    model.adopt_codebooks(acoustic)?;
    let frozen = model.fingerprints();

    let targets = extract_targets(acoustic, corpus, &cfg.prosody.cwt)?;
    write_targets_jsonl(&out_dir.join("style_targets.jsonl"), &targets)?;
    let tokens: Vec<TextTokens> = corpus
        .utterances
        .iter()
        .map(|u| TextTokens::from_sentence(&u.sentence, lex.len()))
        .collect();

    let mut adam = Adam::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57a7_e5ed);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut csv = format!("# config_hash={}\n{STYLE_LOSS_HEADER}\n", cfg.hash());
    let mut rows = Vec::new();
    let mut step = 0;
    let bs = sp.batch_size.max(1);
    while step < sp.steps {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            if step >= sp.steps {
                break;
            }
            let tg: Vec<&StyleTargets> = chunk.iter().map(|&i| &targets[i]).collect();
            let tk: Vec<&TextTokens> = chunk.iter().map(|&i| &tokens[i]).collect();
            let (vals, mut grads) = {
                let mut g = Graph::new(&model.store);
                let l = model.batch_loss(&mut g, &tg, &tk)?;
                let vals = l.map(|v| g.value(v).scalar_value());
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged {
                        step,
                        detail: format!("style losses {vals:?}"),
                    });
                }
                (vals, g.backward(l[0]))
            };
            let lr = sp.learning_rate;
            let grad_norm = adam.step(&mut model.store, &mut grads, lr, 0.0);
            let row = StyleLossRow {
                step,
                total: vals[0],
                gse: vals[1],
                lse: vals[2],
                symbolic: vals[3],
                lr,
                grad_norm,
            };
            if sp.log_every > 0 && step % sp.log_every == 0 || step + 1 == sp.steps {
                writeln!(csv, "{}", row.csv()).expect("string write");
                log::info!("stylepred step {} L {:.4} sym {:.4}", step, row.total, row.symbolic);
            }
            rows.push(row);
            step += 1;
        }
    }
    write_text(&out_dir.join("stylepred_loss.csv"), &csv)?;
    model.store.round_to_f32();
    if model.fingerprints() != frozen {
        return Err(Error::Checkpoint("frozen codebooks changed during training".into()));
    }
    let meta = StylePredMeta {
        step,
        config: cfg.clone(),
        vocab,
        n_speakers: acoustic.dims.n_speakers,
        lexicon: lex.clone(),
        acoustic_config_hash: acoustic_meta.config.hash(),
        frozen,
    };
    model.save(&out_dir.join("stylepred.ckpt"), &meta)?;
    Ok((model, rows))
}
