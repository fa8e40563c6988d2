//! Global and local reference encoders, style-token attention and speaker
//! embeddings.

use rand::Rng;

use crate::align::AttentionState;
use crate::config::AcousticConfig;
use crate::error::{Error, Result};
use crate::nn::{last_rows, sequence_mask, BiGru, Conv1d, Conv2d, Embedding, Graph, Gru, Linear, Mat, ParamId, ParamStore, Var};

/// Trainable token bank plus the multi-head attention that reads it.
#[derive(Debug, Clone)]
pub struct StyleCodebook {
    pub tokens: ParamId,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub n_tokens: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
}

/// A style embedding and the head-averaged token weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbedding {
    pub vector: Vec<f64>,
    pub weights: Vec<f64>,
}

impl StyleCodebook {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, query_dim: usize, cfg: &AcousticConfig, rng: &mut R) -> Self {
        let inner = cfg.style_heads * cfg.style_head_dim;
        Self {
            tokens: store.add(
                format!("{name}/tokens"),
                Mat::uniform(cfg.style_tokens, cfg.style_token_dim, 0.5, rng),
            ),
            query: Linear::new(store, &format!("{name}/query"), query_dim, inner, false, rng),
            key: Linear::new(store, &format!("{name}/key"), cfg.style_token_dim, inner, false, rng),
            value: Linear::new(store, &format!("{name}/value"), cfg.style_token_dim, inner, false, rng),
            out: Linear::new(store, &format!("{name}/out"), inner, cfg.style_embedding, true, rng),
            n_tokens: cfg.style_tokens,
            token_dim: cfg.style_token_dim,
            heads: cfg.style_heads,
            head_dim: cfg.style_head_dim,
            embed_dim: cfg.style_embedding,
        }
    }

    pub fn query_dim(&self, store: &ParamStore) -> usize {
        store.get(self.query.w).rows
    }

    fn keys_values(&self, g: &mut Graph) -> (Var, Var) {
        let t = g.param(self.tokens);
        let t = g.tanh(t);
        (self.key.forward(g, t), self.value.forward(g, t))
    }

    /// Attends `[n x query_dim]` queries over the tokens. Returns the
    /// `[n x embed_dim]` embeddings and `[n x n_tokens]` head-averaged weights.
    pub fn attend(&self, g: &mut Graph, query: Var) -> (Var, Var) {
        let q = self.query.forward(g, query);
        let (k, v) = self.keys_values(g);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut ctx = Vec::with_capacity(self.heads);
        let mut avg: Option<Var> = None;
        for h in 0..self.heads {
            let off = h * self.head_dim;
            let qh = g.slice_cols(q, off, self.head_dim);
            let kh = g.slice_cols(k, off, self.head_dim);
            let vh = g.slice_cols(v, off, self.head_dim);
            let s = g.matmul_bt(qh, kh);
            let s = g.scale(s, scale);
            let w = g.softmax_rows(s);
            ctx.push(g.matmul(w, vh));
            avg = Some(match avg {
                Some(a) => g.add(a, w),
                None => w,
            });
        }
        let cat = g.concat_cols(&ctx);
        let emb = self.out.forward(g, cat);
        let weights = g.scale(avg.expect("at least one head"), 1.0 / self.heads as f64);
        (emb, weights)
    }

    /// `[n_tokens x embed_dim]`: the embedding each token yields when every
    /// head attends to it alone.
    pub fn value_projections(&self, store: &ParamStore) -> Mat {
        let mut g = Graph::new(store);
        let (_, v) = self.keys_values(&mut g);
        let e = self.out.forward(&mut g, v);
        g.value(e).clone()
    }

    /// Embedding for externally supplied token weights, applied to every head.
    /// The result is the matching convex combination of [`Self::value_projections`].
    pub fn embedding_from_weights(&self, store: &ParamStore, weights: &[f64]) -> Result<Vec<f64>> {
        check_simplex(weights, self.n_tokens)?;
        let proj = self.value_projections(store);
        let mut out = vec![0.0; self.embed_dim];
        for (t, &w) in weights.iter().enumerate() {
            out.iter_mut().zip(proj.row(t)).for_each(|(o, p)| *o += w * p);
        }
        Ok(out)
    }
}

pub fn check_simplex(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::Shape(format!("expected {n} token weights, got {}", w.len())));
    }
    let s: f64 = w.iter().sum();
    if w.iter().any(|x| !(*x >= -1e-9)) || (s - 1.0).abs() > 1e-5 {
        return Err(Error::Invalid(format!("token weights are not on the simplex (sum {s})")));
    }
    Ok(())
}

/// Standalone attention of one query vector over a codebook.
pub fn style_token_attention(store: &ParamStore, codebook: &StyleCodebook, query: &[f64]) -> Result<StyleEmbedding> {
    let qd = codebook.query_dim(store);
    if query.len() != qd {
        return Err(Error::Shape(format!("query has {} values, codebook expects {qd}", query.len())));
    }
    let mut g = Graph::new(store);
    let q = g.constant(Mat::row_vector(query.to_vec()));
    let (e, w) = codebook.attend(&mut g, q);
    Ok(StyleEmbedding {
        vector: g.value(e).data.clone(),
        weights: g.value(w).data.clone(),
    })
}

/// 2-D convolutions (stride 2 in time and frequency) then a GRU whose last
/// valid state is the query.
#[derive(Debug, Clone)]
pub struct GlobalReferenceEncoder {
    pub convs: Vec<Conv2d>,
    pub rnn: Gru,
    pub n_bins: usize,
}

fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

impl GlobalReferenceEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, n_bins: usize, cfg: &AcousticConfig, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let (mut c_in, mut f) = (1, n_bins);
        for (i, &c) in cfg.global_conv_channels.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{name}/conv{i}"), c_in, c, (3, 3), (2, 2), rng));
            c_in = c;
            f = halve(f);
        }
        let rnn = Gru::new(store, &format!("{name}/rnn"), f * c_in, cfg.global_rnn, rng);
        Self { convs, rnn, n_bins }
    }

    pub fn query_dim(&self) -> usize {
        self.rnn.hidden
    }

    /// `mel` is `(batch * steps) x n_bins`, zero beyond each length.
    pub fn encode(&self, g: &mut Graph, mel: Var, lens: &[usize], steps: usize) -> Var {
        let batch = lens.len();
        let (mut x, mut t, mut f) = (mel, steps, self.n_bins);
        let mut lens = lens.to_vec();
        for conv in &self.convs {
            let (y, to, fo) = conv.forward(g, x, batch, t, f);
            lens.iter_mut().for_each(|l| *l = halve(*l));
            let y = g.relu(y);
            let mask = g.constant(sequence_mask(&lens, to, fo * conv.out_ch));
            x = g.mul(y, mask);
            t = to;
            f = fo;
        }
        let h = self.rnn.run(g, x, batch, t);
        g.gather(h, last_rows(&lens, t))
    }
}

/// 1-D convolutions over the scaleogram (stride 1) then a bidirectional GRU;
/// outputs are kept per frame and sampled at word onsets.
#[derive(Debug, Clone)]
pub struct LocalReferenceEncoder {
    pub convs: Vec<Conv1d>,
    pub rnn: BiGru,
}

impl LocalReferenceEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, n_scales: usize, cfg: &AcousticConfig, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let mut c_in = n_scales;
        for (i, &c) in cfg.local_conv_channels.iter().enumerate() {
            convs.push(Conv1d::new(store, &format!("{name}/conv{i}"), c_in, c, 3, rng));
            c_in = c;
        }
        let rnn = BiGru::new(store, &format!("{name}/rnn"), c_in, cfg.local_rnn, rng);
        Self { convs, rnn }
    }

    pub fn query_dim(&self) -> usize {
        self.rnn.out_dim()
    }

    /// `(batch * steps) x query_dim` frame-level outputs.
    pub fn encode(&self, g: &mut Graph, scaleogram: Var, lens: &[usize], steps: usize) -> Var {
        let mut x = scaleogram;
        for conv in &self.convs {
            let y = conv.forward(g, x, steps);
            let y = g.relu(y);
            let mask = g.constant(sequence_mask(lens, steps, conv.proj.out_dim));
            x = g.mul(y, mask);
        }
        self.rnn.run(g, x, lens, steps)
    }
}

#[derive(Debug, Clone)]
pub struct SpeakerTable {
    pub table: Embedding,
    pub n_speakers: usize,
}

impl SpeakerTable {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, n_speakers: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            table: Embedding::new(store, name, n_speakers, dim, 0.3, rng),
            n_speakers,
        }
    }

    pub fn lookup(&self, g: &mut Graph, speakers: &[usize]) -> Var {
        let ids: Vec<_> = speakers.iter().map(|&s| Some(s)).collect();
        self.table.forward(g, &ids)
    }

    pub fn embedding(&self, store: &ParamStore, speaker: usize) -> Result<Vec<f64>> {
        if speaker >= self.n_speakers {
            return Err(Error::Invalid(format!("speaker {speaker} out of {} speakers", self.n_speakers)));
        }
        Ok(store.get(self.table.table).row(speaker).to_vec())
    }
}

/// Runs the global reference encoder on a single `T x n_bins` mel.
pub fn global_reference_encode(store: &ParamStore, enc: &GlobalReferenceEncoder, mel: &Mat) -> Result<Vec<f64>> {
    if mel.rows == 0 {
        return Err(Error::Invalid("empty mel spectrogram".into()));
    }
    if mel.cols != enc.n_bins {
        return Err(Error::Shape(format!("mel has {} bins, encoder expects {}", mel.cols, enc.n_bins)));
    }
    let mut g = Graph::new(store);
    let x = g.constant(mel.clone());
    let q = enc.encode(&mut g, x, &[mel.rows], mel.rows);
    Ok(g.value(q).data.clone())
}

/// Runs the local reference encoder on a `scales x T` scaleogram (row-major by
/// scale) and returns one query per onset frame, in order.
pub fn local_reference_encode(
    store: &ParamStore,
    enc: &LocalReferenceEncoder,
    scaleogram: &crate::prosody::PitchScaleogram,
    onset_frames: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let t = scaleogram.n_frames;
    if let Some(&bad) = onset_frames.iter().find(|&&f| f >= t) {
        return Err(Error::Invalid(format!("onset frame {bad} outside {t} frames")));
    }
    let mut g = Graph::new(store);
    let x = g.constant(Mat::from_vec(t, scaleogram.scales.len(), scaleogram.frame_major()));
    let out = enc.encode(&mut g, x, &[t], t);
    let v = g.value(out);
    Ok(onset_frames.iter().map(|&f| v.row(f).to_vec()).collect())
}

/// First decoder step whose attention mean reaches each word's first encoder
/// index. Words never reached map to the last frame and are flagged `true`.
pub fn word_onset_frames(mus: &[f64], onsets: &[usize]) -> Result<(Vec<usize>, Vec<bool>)> {
    if mus.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut frames = Vec::with_capacity(onsets.len());
    let mut flags = Vec::with_capacity(onsets.len());
    let mut i = 0;
    for &k in onsets {
        while i < mus.len() && mus[i] < k as f64 {
            i += 1;
        }
        if i < mus.len() {
            frames.push(i);
            flags.push(false);
        } else {
            frames.push(mus.len() - 1);
            flags.push(true);
        }
    }
    Ok((frames, flags))
}

/// [`word_onset_frames`] over a trace of attention states.
pub fn onset_frames_from_trace(trace: &[AttentionState], onsets: &[usize]) -> Result<(Vec<usize>, Vec<bool>)> {
    let mus: Vec<f64> = trace.iter().map(|s| s.mu).collect();
    word_onset_frames(&mus, onsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, StyleCodebook, GlobalReferenceEncoder, LocalReferenceEncoder) {
        let cfg = AcousticConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let gre = GlobalReferenceEncoder::new(&mut store, "gref", 16, &cfg, &mut rng);
        let lre = LocalReferenceEncoder::new(&mut store, "lref", 10, &cfg, &mut rng);
        let cb = StyleCodebook::new(&mut store, "gst", gre.query_dim(), &cfg, &mut rng);
        (store, cb, gre, lre)
    }

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        Mat::uniform(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn onset_frames_by_first_crossing() {
        let (f, flag) = word_onset_frames(&[0.3, 0.9, 1.4], &[0, 1]).unwrap();
        assert_eq!(f, vec![0, 2]);
        assert_eq!(flag, vec![false, false]);
        let (f, flag) = word_onset_frames(&[0.3, 0.9], &[0, 5]).unwrap();
        assert_eq!(f, vec![0, 1]);
        assert_eq!(flag, vec![false, true]);
        assert!(word_onset_frames(&[], &[0]).is_err());
    }

    #[test]
    fn diagonal_alignment_recovers_onsets() {
        let (t, j) = (230usize, 37usize);
        let mus: Vec<f64> = (0..t).map(|i| (i as f64 + 0.5) * j as f64 / t as f64).collect();
        let onsets = [0usize, 4, 9, 15, 22, 30, 36];
        let (f, _) = word_onset_frames(&mus, &onsets).unwrap();
        for (&k, &fr) in onsets.iter().zip(&f) {
            let want = (k as f64 * t as f64 / j as f64).round() as i64;
            assert!((fr as i64 - want).abs() <= 1, "onset {k}: {fr} vs {want}");
        }
    }

    #[test]
    fn global_query_size_is_length_independent() {
        let (store, _, gre, _) = setup();
        for t in [1, 50, 500] {
            let q = global_reference_encode(&store, &gre, &random_mat(t, 16, t as u64)).unwrap();
            assert_eq!(q.len(), 128);
        }
        assert!(global_reference_encode(&store, &gre, &Mat::zeros(0, 16)).is_err());
        let a = random_mat(40, 16, 1);
        let mut b = a.clone();
        b.data[20 * 16 + 3] += 0.5;
        let qa = global_reference_encode(&store, &gre, &a).unwrap();
        assert_ne!(qa, global_reference_encode(&store, &gre, &b).unwrap());
    }

    #[test]
    fn batched_global_encoding_matches_single() {
        let (store, _, gre, _) = setup();
        let (a, b) = (random_mat(30, 16, 2), random_mat(17, 16, 3));
        let mut x = Mat::zeros(60, 16);
        x.data[..a.len()].copy_from_slice(&a.data);
        x.data[30 * 16..30 * 16 + b.len()].copy_from_slice(&b.data);
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let q = gre.encode(&mut g, xv, &[30, 17], 30);
        let q = g.value(q).clone();
        let qa = global_reference_encode(&store, &gre, &a).unwrap();
        let qb = global_reference_encode(&store, &gre, &b).unwrap();
        for (x, y) in q.row(0).iter().zip(&qa).chain(q.row(1).iter().zip(&qb)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn local_queries_follow_onsets() {
        let (store, _, _, lre) = setup();
        let values: Vec<f64> = (0..60).map(|i| (i as f64 * 0.3).sin()).collect();
        let sg = crate::prosody::cwt_decompose(&crate::prosody::PitchContour::fully_voiced(values), 10);
        let q = local_reference_encode(&store, &lre, &sg, &[3, 20, 41]).unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(q[0].len(), 64);
        let p = local_reference_encode(&store, &lre, &sg, &[41, 20, 3]).unwrap();
        assert_eq!((&p[0], &p[2]), (&q[2], &q[0]));
        assert!(local_reference_encode(&store, &lre, &sg, &[60]).is_err());
    }

    #[test]
    fn token_attention_weights_are_a_simplex() {
        let (store, cb, _, _) = setup();
        let q: Vec<f64> = (0..128).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        let e = style_token_attention(&store, &cb, &q).unwrap();
        assert_eq!(e.vector.len(), 256);
        assert!((e.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(e.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn zero_query_gives_uniform_weights_and_mean_projection() {
        let (store, cb, _, _) = setup();
        let e = style_token_attention(&store, &cb, &[0.0; 128]).unwrap();
        for w in &e.weights {
            assert!((w - 0.1).abs() < 1e-12);
        }
        let mean = cb.embedding_from_weights(&store, &[0.1; 10]).unwrap();
        for (a, b) in e.vector.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn saturated_attention_yields_a_token_projection() {
        let (mut store, cb, _, _) = setup();
        // make token 3 dominate: a key direction only it matches
        let mut qm = Mat::zeros(128, 64);
        qm.data[0] = 1.0;
        for h in 0..4 {
            qm.data[h * 16] = 1.0;
        }
        *store.get_mut(cb.query.w) = qm;
        let mut km = Mat::zeros(32, 64);
        for h in 0..4 {
            km.data[h * 16] = 1.0;
        }
        *store.get_mut(cb.key.w) = km;
        let mut tok = store.get(cb.tokens).clone();
        for t in 0..10 {
            tok.data[t * 32] = if t == 3 { 10.0 } else { -10.0 };
        }
        *store.get_mut(cb.tokens) = tok;
        let mut q = vec![0.0; 128];
        q[0] = 1e4;
        let e = style_token_attention(&store, &cb, &q).unwrap();
        assert!((e.weights[3] - 1.0).abs() < 1e-9);
        let proj = cb.value_projections(&store);
        for (a, b) in e.vector.iter().zip(proj.row(3)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_reach_query_and_codebook() {
        let (store, cb, _, _) = setup();
        let mut g = Graph::new(&store);
        let q = g.input(random_mat(2, 128, 9));
        let (e, _) = cb.attend(&mut g, q);
        let sq = g.mul(e, e);
        let l = g.sum_all(sq);
        let gq = g.grad_wrt(l, &[q]);
        assert!(gq[0].sq_norm() > 0.0);
        let grads = g.backward(l);
        assert!(!grads.is_zero(cb.tokens));
    }
}
