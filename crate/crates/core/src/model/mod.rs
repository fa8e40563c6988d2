//! Autoregressive acoustic model with single-gaussian attention, a duration
//! predictor trained from the attention, and gaussian upsampling for
//! inference.

mod checkpoint;
mod forward;
mod synth;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{AcousticMeta, CorpusInfo, ACOUSTIC_KIND};
pub use forward::{ForwardOutputs, LossTerms};
pub use synth::Synthesis;
pub use train::{alignment_png, evaluate_teacher_forced, scaleograms, train_acoustic, LossRow, OverfitMetrics, TrainOptions, LOSS_HEADER};

use crate::align::AttentionParams;
use crate::config::AcousticConfig;
use crate::nn::{sequence_mask, BiGru, BiLstm, Conv1d, Embedding, Graph, Gru, LayerNorm, Linear, Mat, ParamStore, Var};
use crate::style::{GlobalReferenceEncoder, LocalReferenceEncoder, SpeakerTable, StyleCodebook};

/// Sizes fixed by the corpus rather than the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_symbols: usize,
    pub n_bins: usize,
    pub n_scales: usize,
    pub n_speakers: usize,
}

/// Parameter-name prefixes of the model parts.
pub mod prefix {
    pub const ENCODER: &str = "encoder/";
    pub const ATTENTION: &str = "attention/";
    pub const DURATION: &str = "duration/";
    pub const RANGE: &str = "range/";
    pub const GLOBAL_TOKENS: &str = "style/global_tokens/";
    pub const LOCAL_TOKENS: &str = "style/local_tokens/";
}

pub struct AcousticModel {
    pub cfg: AcousticConfig,
    pub dims: ModelDims,
    pub store: ParamStore,
    pub symbols: Embedding,
    pub enc_convs: Vec<Conv1d>,
    pub enc_rnn: BiGru,
    pub speakers: SpeakerTable,
    pub global_ref: GlobalReferenceEncoder,
    pub global_tokens: StyleCodebook,
    pub local_ref: LocalReferenceEncoder,
    pub local_tokens: StyleCodebook,
    pub prenet: Vec<Linear>,
    /// Projections of the concatenated encoder output into the decoder's
    /// gate space; the context is projected once per encoder position.
    pub ctx_enc: Linear,
    pub ctx_gse: Linear,
    pub ctx_lse: Linear,
    pub ctx_spk: Linear,
    pub att_rnn: Gru,
    pub pos_proj: Linear,
    pub att_hidden: Linear,
    pub att_out: Linear,
    pub dec_rnn: Gru,
    pub frame_out: Linear,
    pub postnet: Vec<Conv1d>,
    pub post_norms: Vec<LayerNorm>,
    pub post_proj: Linear,
    pub dur_rnn: BiLstm,
    pub dur_out: Linear,
    pub range_conv: Conv1d,
    pub range_out: Linear,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl AcousticModel {
    pub fn new(cfg: &AcousticConfig, dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut s = ParamStore::new();
        let st = &mut s;

        let symbols = Embedding::new(st, "encoder/symbols", dims.n_symbols, cfg.symbol_embedding, 0.5, r);
        let mut enc_convs = Vec::new();
        let mut c_in = cfg.symbol_embedding;
        for i in 0..cfg.encoder_conv_layers {
            let conv = Conv1d::new(st, &format!("encoder/conv{i}"), c_in, cfg.encoder_conv_channels, cfg.encoder_conv_kernel, r);
            enc_convs.push(conv);
            c_in = cfg.encoder_conv_channels;
        }
        let enc_rnn = BiGru::new(st, "encoder/rnn", c_in, cfg.encoder_rnn, r);
        let enc_dim = enc_rnn.out_dim();

        let speakers = SpeakerTable::new(st, "speaker/table", dims.n_speakers, cfg.speaker_embedding, r);
        let global_ref = GlobalReferenceEncoder::new(st, "style/global_ref", dims.n_bins, cfg, r);
        let global_tokens = StyleCodebook::new(st, "style/global_tokens", global_ref.query_dim(), cfg, r);
        let local_ref = LocalReferenceEncoder::new(st, "style/local_ref", dims.n_scales, cfg, r);
        let local_tokens = StyleCodebook::new(st, "style/local_tokens", local_ref.query_dim(), cfg, r);

        let mut prenet = Vec::new();
        let mut p_in = dims.n_bins;
        for (i, &w) in cfg.prenet.iter().enumerate() {
            prenet.push(Linear::new(st, &format!("decoder/prenet{i}"), p_in, w, true, r));
            p_in = w;
        }
        let (h1, h2) = (cfg.attention_rnn, cfg.decoder_rnn);
        let ctx_dim = 3 * h1 + 3 * h2 + dims.n_bins;
        let ctx_enc = Linear::new(st, "decoder/ctx_enc", enc_dim, ctx_dim, false, r);
        let ctx_gse = Linear::new(st, "decoder/ctx_gse", cfg.style_embedding, ctx_dim, false, r);
        let ctx_lse = Linear::new(st, "decoder/ctx_lse", cfg.style_embedding, ctx_dim, false, r);
        let ctx_spk = Linear::new(st, "decoder/ctx_spk", cfg.speaker_embedding, ctx_dim, false, r);
        let att_rnn = Gru::new(st, "decoder/att_rnn", p_in, h1, r);
        let pos_proj = Linear::new(st, "decoder/pos_proj", cfg.positional_dim, 3 * h1 + 3 * h2, false, r);
        let att_hidden = Linear::new(st, "attention/hidden", h1, cfg.attention_hidden, true, r);
        let att_out = Linear::new(st, "attention/out", cfg.attention_hidden, 2, true, r);
        st.get_mut(att_out.w).scale_assign(0.1);
        let b = att_out.b.expect("bias");
        st.get_mut(b).data = vec![inverse_softplus(cfg.init_sigma), logit(cfg.init_delta)];
        let dec_rnn = Gru::new(st, "decoder/dec_rnn", h1, h2, r);
        let frame_out = Linear::new(st, "decoder/frame_out", h2, dims.n_bins, true, r);

        let mut postnet = Vec::new();
        let mut post_norms = Vec::new();
        let mut c_in = dims.n_bins;
        for i in 0..cfg.postnet_layers {
            let last = i + 1 == cfg.postnet_layers;
            let c_out = if last { dims.n_bins } else { cfg.postnet_channels };
            postnet.push(Conv1d::new(st, &format!("postnet/conv{i}"), c_in, c_out, cfg.postnet_kernel, r));
            if last {
                st.get_mut(postnet[i].proj.w).scale_assign(0.1);
            } else {
                post_norms.push(LayerNorm::new(st, &format!("postnet/norm{i}"), c_out));
            }
            c_in = c_out;
        }
        let post_proj = Linear::new(st, "postnet/proj", dims.n_bins, dims.n_bins, true, r);
        let mut eye = Mat::zeros(dims.n_bins, dims.n_bins);
        (0..dims.n_bins).for_each(|k| eye.data[k * dims.n_bins + k] = 1.0);
        *st.get_mut(post_proj.w) = eye;

        let cat_dim = enc_dim + 2 * cfg.style_embedding + cfg.speaker_embedding;
        let dur_rnn = BiLstm::new(st, "duration/rnn", cat_dim, cfg.duration_rnn, r);
        let dur_out = Linear::new(st, "duration/out", dur_rnn.out_dim(), 1, true, r);
        st.get_mut(dur_out.b.expect("bias")).data[0] = 1.5;
        let range_conv = Conv1d::new(st, "range/conv", 1, cfg.range_channels, 3, r);
        let range_out = Linear::new(st, "range/out", cfg.range_channels + cat_dim, 1, true, r);
        st.get_mut(range_out.w).scale_assign(0.1);
        st.get_mut(range_out.b.expect("bias")).data[0] = inverse_softplus(0.3);

        Self {
            cfg: cfg.clone(),
            dims,
            store: s,
            symbols,
            enc_convs,
            enc_rnn,
            speakers,
            global_ref,
            global_tokens,
            local_ref,
            local_tokens,
            prenet,
            ctx_enc,
            ctx_gse,
            ctx_lse,
            ctx_spk,
            att_rnn,
            pos_proj,
            att_hidden,
            att_out,
            dec_rnn,
            frame_out,
            postnet,
            post_norms,
            post_proj,
            dur_rnn,
            dur_out,
            range_conv,
            range_out,
        }
    }

    pub fn encoder_dim(&self) -> usize {
        self.enc_rnn.out_dim()
    }

    /// Width of the encoder output concatenated with GSE, LSE and speaker.
    pub fn concat_dim(&self) -> usize {
        self.encoder_dim() + 2 * self.cfg.style_embedding + self.cfg.speaker_embedding
    }

    fn gate_dims(&self) -> (usize, usize) {
        (3 * self.cfg.attention_rnn, 3 * self.cfg.decoder_rnn)
    }

    /// Encoder outputs `(batch * steps) x encoder_dim`, zero past each length.
    pub(crate) fn encode(&self, g: &mut Graph, symbols: &[Option<usize>], lens: &[usize], steps: usize) -> Var {
        let mut x = self.symbols.forward(g, symbols);
        for conv in &self.enc_convs {
            let y = conv.forward(g, x, steps);
            let y = g.relu(y);
            let m = g.constant(sequence_mask(lens, steps, conv.proj.out_dim));
            x = g.mul(y, m);
        }
        let h = self.enc_rnn.run(g, x, lens, steps);
        let m = g.constant(sequence_mask(lens, steps, self.encoder_dim()));
        g.mul(h, m)
    }

    /// Prenet over `(rows) x n_bins` previous frames; `dropout` holds one
    /// keep-mask per layer when training.
    pub(crate) fn prenet_forward(&self, g: &mut Graph, x: Var, dropout: Option<&[Mat]>) -> Var {
        let mut x = x;
        for (i, layer) in self.prenet.iter().enumerate() {
            let y = layer.forward(g, x);
            x = g.relu(y);
            if let Some(masks) = dropout {
                let m = g.constant(masks[i].clone());
                x = g.mul(x, m);
            }
        }
        x
    }

    /// Duration and range predictors over a constant concatenated encoder
    /// output. Returns `(log durations, ranges)`, both `(batch * steps) x 1`;
    /// ranges are computed for the given durations.
    pub(crate) fn predict_log_durations(&self, g: &mut Graph, cat: &Mat, lens: &[usize], steps: usize) -> Var {
        let x = g.constant(cat.clone());
        let h = self.dur_rnn.run(g, x, lens, steps);
        self.dur_out.forward(g, h)
    }

    pub(crate) fn predict_ranges(&self, g: &mut Graph, cat: &Mat, durations: &[Vec<usize>], steps: usize) -> Var {
        let mut logd = Mat::zeros(durations.len() * steps, 1);
        for (b, d) in durations.iter().enumerate() {
            for (k, &v) in d.iter().enumerate() {
                logd.data[b * steps + k] = (v.max(1) as f64).ln();
            }
        }
        let x = g.constant(logd);
        let y = self.range_conv.forward(g, x, steps);
        let y = g.relu(y);
        let c = g.constant(cat.clone());
        let z = g.concat_cols(&[y, c]);
        let z = self.range_out.forward(g, z);
        let z = g.softplus(z);
        let floor = g.constant(Mat::filled(durations.len() * steps, 1, 0.02));
        g.add(z, floor)
    }

    /// Post-net with layer normalization, residual connection and a final
    /// projection.
    pub(crate) fn postnet_forward(&self, g: &mut Graph, pre: Var, lens: &[usize], steps: usize) -> Var {
        let mut x = pre;
        for (i, conv) in self.postnet.iter().enumerate() {
            let y = conv.forward(g, x, steps);
            x = match self.post_norms.get(i) {
                Some(norm) => {
                    let y = norm.forward(g, y);
                    g.tanh(y)
                }
                None => y,
            };
            let m = g.constant(sequence_mask(lens, steps, conv.proj.out_dim));
            x = g.mul(x, m);
        }
        let res = g.add(pre, x);
        let out = self.post_proj.forward(g, res);
        let m = g.constant(sequence_mask(lens, steps, self.dims.n_bins));
        g.mul(out, m)
    }

    /// One attention-RNN step from the projected prenet input, the previous
    /// positional projection and the previous context.
    pub(crate) fn attention_rnn_step(&self, g: &mut Graph, pre_w: Var, pos_w: Var, ctx: Var, h1: Var) -> Var {
        let (g1, _) = self.gate_dims();
        let p = g.slice_cols(pos_w, 0, g1);
        let c = g.slice_cols(ctx, 0, g1);
        let x = g.add(pre_w, p);
        let x = g.add(x, c);
        self.att_rnn.step(g, x, h1)
    }

    /// Raw `[batch x 2]` attention parameters from the attention-RNN state.
    pub(crate) fn attention_raw(&self, g: &mut Graph, h1: Var) -> Var {
        let a = self.att_hidden.forward(g, h1);
        let a = g.relu(a);
        self.att_out.forward(g, a)
    }

    /// The attention MLP as standalone parameters for [`crate::align::attention_step`].
    pub fn attention_params(&self) -> AttentionParams {
        let w = self.store.get(self.att_hidden.w).transpose();
        let v = self.store.get(self.att_out.w).transpose();
        let c = &self.store.get(self.att_out.b.expect("bias")).data;
        AttentionParams {
            input_dim: w.cols,
            w: w.data,
            b: self.store.get(self.att_hidden.b.expect("bias")).data.clone(),
            v: v.data,
            c: [c[0], c[1]],
        }
    }

    /// Decoder-RNN step and the output frame.
    pub(crate) fn decoder_rnn_step(&self, g: &mut Graph, h1: Var, pos_w: Var, ctx: Var, h2: Var) -> (Var, Var) {
        let (g1, g2) = self.gate_dims();
        let x = self.dec_rnn.input.forward(g, h1);
        let p = g.slice_cols(pos_w, g1, g2);
        let c = g.slice_cols(ctx, g1, g2);
        let x = g.add(x, p);
        let x = g.add(x, c);
        let h2 = self.dec_rnn.step(g, x, h2);
        let o = self.frame_out.forward(g, h2);
        let co = g.slice_cols(ctx, g1 + g2, self.dims.n_bins);
        (h2, g.add(o, co))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_helpers() {
        assert!((crate::align::softplus(inverse_softplus(0.8)) - 0.8).abs() < 1e-12);
        assert!((crate::align::sigmoid(logit(0.15)) - 0.15).abs() < 1e-12);
    }
}
