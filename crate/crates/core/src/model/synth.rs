use super::forward::{check_onsets, word_spans};
use super::AcousticModel;
use crate::align::{centroid, positional_encoding, upsample_frames, AlignmentMatrix, DurationVector};
use crate::data::LinguisticSequence;
use crate::error::{Error, Result};
use crate::nn::{Graph, Mat, MixEntry};

/// Inference output. The mel is in the model's z-normalized domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub mel: Mat,
    pub alignment: AlignmentMatrix,
    pub durations: DurationVector,
    pub log_durations: Vec<f64>,
}

impl AcousticModel {
    fn check_style(&self, seq: &LinguisticSequence, gse: &[f64], lse: &[Vec<f64>], speaker: usize) -> Result<()> {
        seq.validate()?;
        check_onsets(&seq.word_onsets, seq.len())?;
        let s = self.cfg.style_embedding;
        if gse.len() != s {
            return Err(Error::Shape(format!("GSE has {} values, expected {s}", gse.len())));
        }
        if lse.len() != seq.n_words() {
            return Err(Error::Shape(format!("{} LSE vectors for {} words", lse.len(), seq.n_words())));
        }
        if lse.iter().any(|v| v.len() != s) {
            return Err(Error::Shape(format!("every LSE must have {s} values")));
        }
        if gse.iter().chain(lse.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite style embedding".into()));
        }
        if speaker >= self.dims.n_speakers {
            return Err(Error::Invalid(format!("speaker {speaker} out of {}", self.dims.n_speakers)));
        }
        if let Some(&bad) = seq.symbols.iter().find(|&&x| x >= self.dims.n_symbols) {
            return Err(Error::Invalid(format!("symbol {bad} outside the alphabet")));
        }
        Ok(())
    }

    /// Predicted log-durations and the rounded durations (at least one frame).
    pub fn predict_durations(&self, seq: &LinguisticSequence, gse: &[f64], lse: &[Vec<f64>], speaker: usize) -> Result<(Vec<f64>, DurationVector)> {
        self.check_style(seq, gse, lse, speaker)?;
        let mut g = Graph::new(&self.store);
        let (_, cat) = self.text_side(&mut g, seq, gse, lse, speaker)?;
        let j = seq.len();
        let ld = self.predict_log_durations(&mut g, &cat, &[j], j);
        let logd = g.value(ld).data.clone();
        let d = logd.iter().map(|&x| (x.exp().round() as usize).max(1)).collect();
        Ok((logd, DurationVector(d)))
    }

    fn text_side(&self, g: &mut Graph, seq: &LinguisticSequence, gse: &[f64], lse: &[Vec<f64>], speaker: usize) -> Result<(Mat, Mat)> {
        let j = seq.len();
        let syms: Vec<Option<usize>> = seq.symbols.iter().map(|&s| Some(s)).collect();
        let enc = self.encode(g, &syms, &[j], j);
        let encv = g.value(enc).clone();
        let spk = self.speakers.embedding(&self.store, speaker)?;
        let cat = self.concat_rows(&encv, &[j], j, &[seq.word_onsets.clone()], &[gse], &[lse.to_vec()], &[&spk]);
        Ok((encv, cat))
    }

    /// Duration-driven inference: the attention is bypassed, each step's
    /// context and positional code come from the upsampled alignment. Takes
    /// no reference acoustics.
    pub fn synthesize(&self, seq: &LinguisticSequence, gse: &[f64], lse: &[Vec<f64>], speaker: usize) -> Result<Synthesis> {
        self.check_style(seq, gse, lse, speaker)?;
        let j = seq.len();
        let bins = self.dims.n_bins;
        let mut g = Graph::new(&self.store);
        let (encv, cat) = self.text_side(&mut g, seq, gse, lse, speaker)?;
        let ld = self.predict_log_durations(&mut g, &cat, &[j], j);
        let log_durations = g.value(ld).data.clone();
        let d: Vec<usize> = log_durations.iter().map(|&x| (x.exp().round() as usize).max(1)).collect();
        let r = self.predict_ranges(&mut g, &cat, std::slice::from_ref(&d), j);
        let ranges = g.value(r).data.clone();
        let t: usize = d.iter().sum();
        let align = upsample_frames(&d, &ranges, t)?;

        let enc = g.constant(encv);
        let p_enc = self.ctx_enc.forward(&mut g, enc);
        let gv = g.constant(Mat::row_vector(gse.to_vec()));
        let bg = self.ctx_gse.forward(&mut g, gv);
        let spk = g.constant(Mat::row_vector(self.speakers.embedding(&self.store, speaker)?));
        let bs = self.ctx_spk.forward(&mut g, spk);
        let bias = g.add(bg, bs);
        let lt = g.constant(Mat::from_vec(lse.len(), self.cfg.style_embedding, lse.concat()));
        let table = self.ctx_lse.forward(&mut g, lt);
        let spans = word_spans(&seq.word_onsets, j);

        let (h1d, h2d) = (self.cfg.attention_rnn, self.cfg.decoder_rnn);
        let mut h1 = g.constant(Mat::zeros(1, h1d));
        let mut h2 = g.constant(Mat::zeros(1, h2d));
        let pos0 = g.constant(Mat::row_vector(positional_encoding(0.0, self.cfg.positional_dim).0));
        let mut pos_w = self.pos_proj.forward(&mut g, pos0);
        let mut ctx = g.constant(Mat::zeros(1, 3 * h1d + 3 * h2d + bins));
        let mut prev = g.constant(Mat::zeros(1, bins));
        let mut reached = 0;
        let mut outs = Vec::with_capacity(t);
        for i in 0..t {
            let px = self.prenet_forward(&mut g, prev, None);
            let pre_w = self.att_rnn.input.forward(&mut g, px);
            h1 = self.attention_rnn_step(&mut g, pre_w, pos_w, ctx, h1);
            if !g.value(h1).is_finite() {
                return Err(Error::NonFiniteState { step: i });
            }
            let row = align.row(i).to_vec();
            let mu = centroid(&row);
            let alpha = g.constant(Mat::row_vector(row));
            let pos = g.constant(Mat::row_vector(positional_encoding(mu, self.cfg.positional_dim).0));
            pos_w = self.pos_proj.forward(&mut g, pos);
            while reached < spans.len() && spans[reached].0 as f64 <= mu {
                reached += 1;
            }
            let c = g.batched_vec_mat(alpha, p_enc);
            let c = g.add(c, bias);
            let entries = spans[..reached]
                .iter()
                .enumerate()
                .map(|(w, &(start, end))| MixEntry { batch: 0, row: w, start, end })
                .collect();
            let m = g.word_mix(alpha, table, entries);
            let c = g.add(c, m);
            let (nh2, o) = self.decoder_rnn_step(&mut g, h1, pos_w, c, h2);
            h2 = nh2;
            ctx = c;
            prev = o;
            outs.push(o);
        }
        let pre = g.stack_steps(&outs);
        let post = self.postnet_forward(&mut g, pre, &[t], t);
        Ok(Synthesis {
            mel: g.value(post).clone(),
            alignment: align,
            durations: DurationVector(d),
            log_durations,
        })
    }
}
