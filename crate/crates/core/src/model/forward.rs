use rand::Rng;

use super::AcousticModel;
use crate::align::{extract_durations, AttentionState, DurationVector};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{sequence_mask, step_rows, Graph, Mat, MixEntry, Var};

/// Everything the teacher-forced pass produces. Sequence tensors are
/// `(batch * steps) x features` with row `b * steps + t`.
pub struct ForwardOutputs {
    pub mel_pre: Var,
    pub mel_post: Var,
    /// Row-normalized attention, `(batch * frames) x symbols`.
    pub attention: Var,
    /// Valid steps of each utterance.
    pub trace: Vec<Vec<AttentionState>>,
    /// `(batch * symbols) x 1`.
    pub log_durations: Var,
    /// Upsampled alignment from the extracted durations, `(batch * frames) x symbols`.
    pub upsampled: Var,
    pub durations: Vec<DurationVector>,
    pub gse: Var,
    pub gse_weights: Var,
    /// Per utterance, per word.
    pub lse: Vec<Vec<Vec<f64>>>,
    pub lse_weights: Vec<Vec<Vec<f64>>>,
    pub onset_frames: Vec<Vec<usize>>,
    /// Words whose onset was never reached within the utterance.
    pub onset_flags: Vec<Vec<bool>>,
}

/// `L = L_spec + lambda * (L_dur + L_align)` and its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub spec: Var,
    pub dur: Var,
    pub align: Var,
}

pub(crate) fn word_spans(onsets: &[usize], len: usize) -> Vec<(usize, usize)> {
    onsets
        .iter()
        .enumerate()
        .map(|(w, &s)| (s, onsets.get(w + 1).copied().unwrap_or(len)))
        .collect()
}

pub(crate) fn check_onsets(onsets: &[usize], len: usize) -> Result<()> {
    if onsets.is_empty() || onsets[0] != 0 {
        return Err(Error::Invalid("the first word must start at position 0".into()));
    }
    if onsets.windows(2).any(|w| w[0] >= w[1]) || onsets.last().is_some_and(|&o| o >= len) {
        return Err(Error::Invalid(format!("word onsets {onsets:?} are not increasing within {len} symbols")));
    }
    Ok(())
}

fn masked(m: &Mat, lens: &[usize], steps: usize) -> Mat {
    let mask = sequence_mask(lens, steps, m.cols);
    let mut out = m.clone();
    out.data.iter_mut().zip(&mask.data).for_each(|(x, k)| *x *= k);
    out
}

impl AcousticModel {
    /// Rows `b * steps + k`: encoder output, GSE, the LSE of the word holding
    /// position `k`, and the speaker embedding.
    pub(crate) fn concat_rows(
        &self,
        enc: &Mat,
        lens: &[usize],
        steps: usize,
        onsets: &[Vec<usize>],
        gse: &[&[f64]],
        lse: &[Vec<Vec<f64>>],
        spk: &[&[f64]],
    ) -> Mat {
        let (e, s) = (self.encoder_dim(), self.cfg.style_embedding);
        let dim = self.concat_dim();
        let mut out = Mat::zeros(lens.len() * steps, dim);
        for (b, &len) in lens.iter().enumerate() {
            for (w, (start, end)) in word_spans(&onsets[b], len).into_iter().enumerate() {
                for k in start..end {
                    let r = b * steps + k;
                    let row = out.row_mut(r);
                    row[..e].copy_from_slice(enc.row(r));
                    row[e..e + s].copy_from_slice(gse[b]);
                    row[e + s..e + 2 * s].copy_from_slice(&lse[b][w]);
                    row[e + 2 * s..].copy_from_slice(spk[b]);
                }
            }
        }
        out
    }

    /// Training path: encoder, reference encoders, teacher-forced decoding
    /// under gaussian attention, duration extraction, duration and range
    /// prediction, and upsampling. `dropout` enables prenet dropout.
    pub fn teacher_forced_forward<'a, R: Rng>(
        &'a self,
        g: &mut Graph<'a>,
        batch: &Batch,
        mut dropout: Option<&mut R>,
    ) -> Result<ForwardOutputs> {
        let (nb, j, t) = (batch.len(), batch.max_symbols, batch.max_frames);
        let bins = self.dims.n_bins;
        if batch.mel.cols != bins || batch.scaleogram.cols != self.dims.n_scales {
            return Err(Error::Shape(format!(
                "batch has {} bins and {} scales, model expects {bins} and {}",
                batch.mel.cols, batch.scaleogram.cols, self.dims.n_scales
            )));
        }
        for (b, onsets) in batch.word_onsets.iter().enumerate() {
            check_onsets(onsets, batch.sym_lens[b])?;
        }
        if let Some(&s) = batch.speakers.iter().find(|&&s| s >= self.dims.n_speakers) {
            return Err(Error::Invalid(format!("speaker {s} out of {}", self.dims.n_speakers)));
        }
        let spans: Vec<Vec<(usize, usize)>> = batch
            .word_onsets
            .iter()
            .zip(&batch.sym_lens)
            .map(|(o, &l)| word_spans(o, l))
            .collect();

        let enc = self.encode(g, &batch.symbols, &batch.sym_lens, j);
        let mel_in = masked(&batch.mel, &batch.frame_lens, t);
        let mel = g.constant(mel_in.clone());
        let gq = self.global_ref.encode(g, mel, &batch.frame_lens, t);
        let (gse, gse_weights) = self.global_tokens.attend(g, gq);
        let spk = self.speakers.lookup(g, &batch.speakers);
        let sg = g.constant(masked(&batch.scaleogram, &batch.frame_lens, t));
        let local = self.local_ref.encode(g, sg, &batch.frame_lens, t);

        let p_enc = self.ctx_enc.forward(g, enc);
        let bg = self.ctx_gse.forward(g, gse);
        let bs = self.ctx_spk.forward(g, spk);
        let bias = g.add(bg, bs);

        let mut prev = Mat::zeros(nb * t, bins);
        for b in 0..nb {
            for i in 1..t {
                let src = mel_in.row(b * t + i - 1).to_vec();
                prev.row_mut(b * t + i).copy_from_slice(&src);
            }
        }
        let masks = dropout.as_deref_mut().map(|rng| {
            let p = self.cfg.prenet_dropout;
            self.prenet
                .iter()
                .map(|l| {
                    let data = (0..nb * t * l.out_dim)
                        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                        .collect();
                    Mat::from_vec(nb * t, l.out_dim, data)
                })
                .collect::<Vec<_>>()
        });
        let prev = g.constant(prev);
        let px = self.prenet_forward(g, prev, masks.as_deref());
        let pw = self.att_rnn.input.forward(g, px);

        let (h1d, h2d) = (self.cfg.attention_rnn, self.cfg.decoder_rnn);
        let ctx_dim = 3 * h1d + 3 * h2d + bins;
        let mut h1 = g.constant(Mat::zeros(nb, h1d));
        let mut h2 = g.constant(Mat::zeros(nb, h2d));
        let mut state = g.constant(Mat::zeros(nb, 3));
        let pos0 = g.positional(state, self.cfg.positional_dim);
        let mut pos_w = self.pos_proj.forward(g, pos0);
        let mut ctx = g.constant(Mat::zeros(nb, ctx_dim));

        let n_words: Vec<usize> = batch.word_onsets.iter().map(Vec::len).collect();
        let mut next_word = vec![0usize; nb];
        // (table, row) holding each reached word's projected LSE
        let mut slot: Vec<Vec<Option<(usize, usize)>>> = n_words.iter().map(|&n| vec![None; n]).collect();
        let mut tables: Vec<Var> = Vec::new();
        let mut lse: Vec<Vec<Vec<f64>>> = n_words.iter().map(|&n| vec![Vec::new(); n]).collect();
        let mut lse_weights = lse.clone();
        let mut onset_frames: Vec<Vec<usize>> = n_words.iter().map(|&n| vec![0; n]).collect();
        let mut onset_flags: Vec<Vec<bool>> = n_words.iter().map(|&n| vec![false; n]).collect();

        let mut outs = Vec::with_capacity(t);
        let mut alphas = Vec::with_capacity(t);
        let mut mus = vec![Vec::with_capacity(t); nb];
        let mut trace = vec![Vec::with_capacity(t); nb];
        for i in 0..t {
            let pre_w = g.gather(pw, step_rows(nb, t, i));
            h1 = self.attention_rnn_step(g, pre_w, pos_w, ctx, h1);
            if !g.value(h1).is_finite() {
                return Err(Error::NonFiniteState { step: i });
            }
            let raw = self.attention_raw(g, h1);
            state = g.attention_state(raw, state);
            let alpha = g.gaussian_rows(state, batch.sym_lens.clone(), j);
            let pos_src = if self.cfg.detach_position { g.detach(state) } else { state };
            let pos = g.positional(pos_src, self.cfg.positional_dim);
            pos_w = self.pos_proj.forward(g, pos);

            let sv = g.value(state).clone();
            let mut fresh = Vec::new();
            for b in 0..nb {
                if i >= batch.frame_lens[b] {
                    continue;
                }
                let s = AttentionState {
                    mu: sv.at(b, 0),
                    sigma: sv.at(b, 1),
                    delta: sv.at(b, 2),
                };
                mus[b].push(s.mu);
                trace[b].push(s);
                while next_word[b] < n_words[b] && batch.word_onsets[b][next_word[b]] as f64 <= s.mu {
                    fresh.push((b, next_word[b]));
                    onset_frames[b][next_word[b]] = i;
                    next_word[b] += 1;
                }
            }
            if !fresh.is_empty() {
                let q = g.gather(local, fresh.iter().map(|&(b, _)| Some(b * t + i)).collect());
                let (e, w) = self.local_tokens.attend(g, q);
                let proj = self.ctx_lse.forward(g, e);
                let (ev, wv) = (g.value(e).clone(), g.value(w).clone());
                for (r, &(b, wd)) in fresh.iter().enumerate() {
                    slot[b][wd] = Some((tables.len(), r));
                    lse[b][wd] = ev.row(r).to_vec();
                    lse_weights[b][wd] = wv.row(r).to_vec();
                }
                tables.push(proj);
            }

            let c = g.batched_vec_mat(alpha, p_enc);
            let mut c = g.add(c, bias);
            for (ti, &table) in tables.iter().enumerate() {
                let mut entries = Vec::new();
                for b in 0..nb {
                    for (wd, s) in slot[b].iter().enumerate() {
                        if let Some((tj, r)) = *s {
                            if tj == ti {
                                let (start, end) = spans[b][wd];
                                entries.push(MixEntry { batch: b, row: r, start, end });
                            }
                        }
                    }
                }
                let m = g.word_mix(alpha, table, entries);
                c = g.add(c, m);
            }
            let (nh2, o) = self.decoder_rnn_step(g, h1, pos_w, c, h2);
            h2 = nh2;
            ctx = c;
            outs.push(o);
            alphas.push(alpha);
        }

        // words never reached are sampled at the last frame
        let missing: Vec<(usize, usize)> = (0..nb)
            .flat_map(|b| (next_word[b]..n_words[b]).map(move |w| (b, w)))
            .collect();
        if !missing.is_empty() {
            let q = g.gather(local, missing.iter().map(|&(b, _)| Some(b * t + batch.frame_lens[b] - 1)).collect());
            let (e, w) = self.local_tokens.attend(g, q);
            let (ev, wv) = (g.value(e).clone(), g.value(w).clone());
            for (r, &(b, wd)) in missing.iter().enumerate() {
                lse[b][wd] = ev.row(r).to_vec();
                lse_weights[b][wd] = wv.row(r).to_vec();
                onset_frames[b][wd] = batch.frame_lens[b] - 1;
                onset_flags[b][wd] = true;
            }
        }

        let pre = g.stack_steps(&outs);
        let fmask = g.constant(sequence_mask(&batch.frame_lens, t, bins));
        let mel_pre = g.mul(pre, fmask);
        let mel_post = self.postnet_forward(g, mel_pre, &batch.frame_lens, t);
        let attention = g.stack_steps(&alphas);

        let durations = mus
            .iter()
            .zip(&batch.sym_lens)
            .map(|(m, &len)| extract_durations(m, len))
            .collect::<Result<Vec<_>>>()?;
        let encv = g.value(enc).clone();
        let gv = g.value(gse).clone();
        let sv = g.value(spk).clone();
        let gse_rows: Vec<&[f64]> = (0..nb).map(|b| gv.row(b)).collect();
        let spk_rows: Vec<&[f64]> = (0..nb).map(|b| sv.row(b)).collect();
        let cat = self.concat_rows(&encv, &batch.sym_lens, j, &batch.word_onsets, &gse_rows, &lse, &spk_rows);
        let log_durations = self.predict_log_durations(g, &cat, &batch.sym_lens, j);
        let dvecs: Vec<Vec<usize>> = durations.iter().map(|d| d.0.clone()).collect();
        let ranges = self.predict_ranges(g, &cat, &dvecs, j);
        let ranges = g.reshape(ranges, nb, j);
        let upsampled = g.upsample(ranges, dvecs, t);

        Ok(ForwardOutputs {
            mel_pre,
            mel_post,
            attention,
            trace,
            log_durations,
            upsampled,
            durations,
            gse,
            gse_weights,
            lse,
            lse_weights,
            onset_frames,
            onset_flags,
        })
    }

    /// Combined objective. The duration and alignment terms only see detached
    /// copies of the encoder outputs and the attention, so their gradient
    /// reaches the duration and range predictors alone.
    pub fn total_loss(&self, g: &mut Graph, out: &ForwardOutputs, batch: &Batch, lambda: f64) -> LossTerms {
        let (nb, j, t) = (batch.len(), batch.max_symbols, batch.max_frames);
        let bins = self.dims.n_bins;
        let fmask = sequence_mask(&batch.frame_lens, t, bins);
        let target = masked(&batch.mel, &batch.frame_lens, t);
        let l_pre = g.masked_l1(out.mel_pre, target.clone(), fmask.clone());
        let l_post = g.masked_l1(out.mel_post, target, fmask);
        let spec = g.add(l_pre, l_post);

        let mut logd = Mat::zeros(nb * j, 1);
        for (b, d) in out.durations.iter().enumerate() {
            for (k, &v) in d.0.iter().enumerate() {
                logd.data[b * j + k] = (v.max(1) as f64).ln();
            }
        }
        let dur = g.masked_sq(out.log_durations, logd, sequence_mask(&batch.sym_lens, j, 1));

        let p = g.value(out.attention).clone();
        let weights = sequence_mask(&batch.frame_lens, t, 1).data;
        let align = g.kl_rows(out.upsampled, p, weights);

        let aux = g.add(dur, align);
        let aux = g.scale(aux, lambda);
        let total = g.add(spec, aux);
        LossTerms { total, spec, dur, align }
    }
}
