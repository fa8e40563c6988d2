use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AcousticMeta, AcousticModel, CorpusInfo, ModelDims};
use crate::config::RunConfig;
use crate::data::{make_batches, Batch, Corpus, ALPHABET_SIZE};
use crate::error::{Error, Result};
use crate::io::{write_heatmap, write_text};
use crate::nn::{Adam, Graph, LrSchedule, Mat};
use crate::prosody::{pitch_scaleogram, CwtConfig, PitchScaleogram};

/// Scaleogram of every utterance's pitch contour, in corpus order.
pub fn scaleograms(corpus: &Corpus, cwt: &CwtConfig) -> Result<Vec<PitchScaleogram>> {
    corpus
        .utterances
        .iter()
        .map(|u| {
            pitch_scaleogram(&u.pitch, cwt).map_err(|e| Error::Corpus {
                utterance: u.id.clone(),
                reason: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub total: f64,
    pub spec: f64,
    pub dur: f64,
    pub align: f64,
    pub lambda: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub const LOSS_HEADER: &str = "step,L,L_spec,L_dur,L_align,lambda,lr,grad_norm";

impl LossRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{:.3e},{:.4}",
            self.step, self.total, self.spec, self.dur, self.align, self.lambda, self.lr, self.grad_norm
        )
    }
}

pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Continue from this checkpoint. Extra corpus speakers get fresh rows.
    pub init: Option<PathBuf>,
    /// Print a progress line every `log_every` steps.
    pub verbose: bool,
}

fn dims_for(corpus: &Corpus, cfg: &RunConfig) -> ModelDims {
    ModelDims {
        n_symbols: ALPHABET_SIZE,
        n_bins: corpus.n_bins(),
        n_scales: cfg.prosody.cwt.n_scales,
        n_speakers: corpus.n_speakers(),
    }
}

fn initial_model(corpus: &Corpus, cfg: &RunConfig, init: Option<&Path>) -> Result<(AcousticModel, usize)> {
    let dims = dims_for(corpus, cfg);
    let mut model = AcousticModel::new(&cfg.acoustic, dims, cfg.seed);
    let Some(path) = init else { return Ok((model, 0)) };
    let (old, meta) = AcousticModel::load(path)?;
    if old.cfg != cfg.acoustic {
        return Err(Error::Checkpoint("initial checkpoint was trained with different model sizes".into()));
    }
    let (od, nd) = (old.dims, dims);
    if od.n_bins != nd.n_bins || od.n_scales != nd.n_scales || od.n_symbols != nd.n_symbols || od.n_speakers > nd.n_speakers {
        return Err(Error::Checkpoint(format!("checkpoint dims {od:?} do not fit corpus dims {nd:?}")));
    }
    model.store.copy_from(&old.store);
    // keep the trained speaker rows, fresh rows for new speakers
    let table = model.speakers.table.table;
    let old_rows = old.store.get(old.speakers.table.table);
    let dst = model.store.get_mut(table);
    dst.data[..old_rows.len()].copy_from_slice(&old_rows.data);
    Ok((model, meta.step))
}

fn loss_values(g: &Graph, l: &super::LossTerms) -> [f64; 4] {
    [l.total, l.spec, l.dur, l.align].map(|v| g.value(v).scalar_value())
}

/// Trains the acoustic model, writing `acoustic.ckpt`, `acoustic_loss.csv`
/// and alignment heatmaps under `opts.out_dir`.
pub fn train_acoustic(corpus: &Corpus, cfg: &RunConfig, opts: &TrainOptions) -> Result<(AcousticModel, Vec<LossRow>)> {
    if corpus.utterances.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    cfg.validate()?;
    let tc = &cfg.train;
    let sgs = scaleograms(corpus, &cfg.prosody.cwt)?;
    let (mut model, start_step) = initial_model(corpus, cfg, opts.init.as_deref())?;
    let info = CorpusInfo::from_manifest(&corpus.manifest);
    let mut adam = Adam::new(&model.store);
    let sched = LrSchedule {
        base: tc.learning_rate,
        knee: tc.knee,
        decay_rate: tc.decay_rate,
        decay_steps: tc.decay_steps(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20b);
    let ckpt = opts.out_dir.join("acoustic.ckpt");
    let mut csv = format!("# config_hash={}\n{LOSS_HEADER}\n", cfg.hash());
    let mut rows = Vec::new();
    let t0 = Instant::now();
    let mut step = 0;
    let mut epoch = 0u64;
    let save = |model: &mut AcousticModel, step: usize| -> Result<()> {
        model.store.round_to_f32();
        let meta = AcousticMeta {
            step: start_step + step,
            config: cfg.clone(),
            dims: model.dims,
            corpus: info.clone(),
        };
        model.save(&ckpt, &meta)
    };
    while step < tc.steps {
        for idx in make_batches(corpus, tc.batch_size, cfg.seed, epoch)? {
            if step >= tc.steps {
                break;
            }
            let batch = Batch::collate(corpus, &idx, &sgs)?;
            let lambda = if start_step + step >= tc.knee { 1.0 } else { 0.0 };
            let g_step = step;
            let (vals, mut grads, heat) = {
                let mut g = Graph::new(&model.store);
                let out = model.teacher_forced_forward(&mut g, &batch, Some(&mut rng))?;
                let loss = model.total_loss(&mut g, &out, &batch, lambda);
                let vals = loss_values(&g, &loss);
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged {
                        step: g_step,
                        detail: format!("losses {vals:?} on batch {idx:?}"),
                    });
                }
                let heat = (tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0).then(|| {
                    let a = g.value(out.attention);
                    let (t, j) = (batch.frame_lens[0], batch.sym_lens[0]);
                    let cells: Vec<f64> = (0..t).flat_map(|i| a.row(i)[..j].to_vec()).collect();
                    (corpus.utterances[idx[0]].id.clone(), t, j, cells)
                });
                (vals, g.backward(loss.total), heat)
            };
            if !grads.all_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            let lr = sched.at(start_step + step);
            let grad_norm = adam.step(&mut model.store, &mut grads, lr, tc.grad_clip);
            let row = LossRow {
                step: start_step + step,
                total: vals[0],
                spec: vals[1],
                dur: vals[2],
                align: vals[3],
                lambda,
                lr,
                grad_norm,
            };
            let log_now = tc.log_every > 0 && step % tc.log_every == 0 || step + 1 == tc.steps;
            if log_now {
                writeln!(csv, "{}", row.csv()).expect("string write");
                write_text(&opts.out_dir.join("acoustic_loss.csv"), &csv)?;
                if opts.verbose {
                    log::info!(
                        "step {} L {:.4} spec {:.4} dur {:.4} align {:.4} ({:.0}s)",
                        row.step,
                        row.total,
                        row.spec,
                        row.dur,
                        row.align,
                        t0.elapsed().as_secs_f64()
                    );
                }
            }
            rows.push(row);
            step += 1;
            if let Some((id, t, j, cells)) = heat {
                let png = opts.out_dir.join("alignments").join(format!("step{:06}_{id}.png", start_step + step));
                write_heatmap(&png, t, j, &cells, 2, &[("config_hash", cfg.hash()), ("utterance", id)])?;
                save(&mut model, step)?;
                // the rounded values are what the optimizer continues from
            }
        }
        epoch += 1;
    }
    save(&mut model, step)?;
    Ok((model, rows))
}

/// Teacher-forced fit on a corpus, all averages over valid frames or symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct OverfitMetrics {
    /// Per-bin mean L1 before and after the post-net (z-normalized mels).
    pub l1_pre: f64,
    pub l1_post: f64,
    /// Mean `|mu_i - k_i|` where `k_i` is the symbol whose ground-truth span holds frame `i`.
    pub mu_error: f64,
    /// Mean `|log d_pred - log d|` against durations extracted from the attention.
    pub log_dur_error: f64,
    /// Same against the corpus durations.
    pub log_dur_error_truth: f64,
    pub unreached_words: usize,
}

impl OverfitMetrics {
    pub fn spec(&self) -> f64 {
        self.l1_pre + self.l1_post
    }
}

pub fn evaluate_teacher_forced(model: &AcousticModel, corpus: &Corpus, cfg: &RunConfig) -> Result<OverfitMetrics> {
    let sgs = scaleograms(corpus, &cfg.prosody.cwt)?;
    let (mut l1p, mut l1q, mut nbin) = (0.0, 0.0, 0.0);
    let (mut mu_err, mut nfr) = (0.0, 0.0);
    let (mut de, mut dt, mut nsym) = (0.0, 0.0, 0.0);
    let mut unreached = 0;
    let order: Vec<usize> = (0..corpus.utterances.len()).collect();
    for idx in order.chunks(cfg.train.batch_size) {
        let batch = Batch::collate(corpus, idx, &sgs)?;
        let mut g = Graph::new(&model.store);
        let out = model.teacher_forced_forward::<ChaCha8Rng>(&mut g, &batch, None)?;
        let (pre, post) = (g.value(out.mel_pre), g.value(out.mel_post));
        let ld = g.value(out.log_durations);
        let t = batch.max_frames;
        let j = batch.max_symbols;
        let bins = batch.mel.cols;
        for b in 0..batch.len() {
            for i in 0..batch.frame_lens[b] {
                let r = b * t + i;
                for c in 0..bins {
                    let y = batch.mel.at(r, c);
                    l1p += (pre.at(r, c) - y).abs();
                    l1q += (post.at(r, c) - y).abs();
                }
                nbin += bins as f64;
            }
            let mut k = 0;
            let mut end = batch.durations[b][0];
            for (i, s) in out.trace[b].iter().enumerate() {
                while i >= end {
                    k += 1;
                    end += batch.durations[b][k];
                }
                mu_err += (s.mu - k as f64).abs();
                nfr += 1.0;
            }
            for k in 0..batch.sym_lens[b] {
                let p = ld.at(b * j + k, 0);
                de += (p - (out.durations[b].0[k] as f64).ln()).abs();
                dt += (p - (batch.durations[b][k] as f64).ln()).abs();
                nsym += 1.0;
            }
            unreached += out.onset_flags[b].iter().filter(|&&f| f).count();
        }
    }
    Ok(OverfitMetrics {
        l1_pre: l1p / nbin,
        l1_post: l1q / nbin,
        mu_error: mu_err / nfr,
        log_dur_error: de / nsym,
        log_dur_error_truth: dt / nsym,
        unreached_words: unreached,
    })
}

/// Heatmap of a `rows x cols` alignment.
pub fn alignment_png(path: &Path, weights: &Mat, config_hash: &str) -> Result<()> {
    write_heatmap(path, weights.rows, weights.cols, &weights.data, 2, &[("config_hash", config_hash.to_string())])
}
