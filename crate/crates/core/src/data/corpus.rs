use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::text::{
    is_pause_marker, is_voiced, realize, sample_sentence, symbolic_features, Lexicon, LinguisticSequence, Sentence, SymbolicWordFeatures, ALPHABET_SIZE, N_STYLE_CLASSES,
};
use crate::align::DurationVector;
use crate::error::{Error, Result};
use crate::io::{read_tensor, sha256_hex, write_tensor, write_text};
use crate::nn::Mat;
use crate::prosody::{categorize_pause_with, PauseCategory, PauseThresholds, PitchContour};

pub const CORPUS_VERSION: u32 = 1;
const LEXICON_SEED: u64 = 2024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub n_bins: usize,
    pub scale: String,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub band_centers_hz: Vec<f64>,
    pub window_ms: f64,
    pub hop_ms: f64,
}

impl MelConfig {
    /// ERB-rate spaced bands between 50 Hz and 8 kHz, 50 ms windows, 10 ms hop.
    pub fn erb(n_bins: usize) -> Self {
        let (lo, hi) = (50.0, 8000.0);
        let erb = |f: f64| 21.4 * (1.0 + 0.00437 * f).log10();
        let inv = |e: f64| (10f64.powf(e / 21.4) - 1.0) / 0.00437;
        let (el, eh) = (erb(lo), erb(hi));
        let band_centers_hz = (0..n_bins)
            .map(|i| {
                let frac = if n_bins > 1 { i as f64 / (n_bins - 1) as f64 } else { 0.5 };
                inv(el + frac * (eh - el))
            })
            .collect();
        Self {
            n_bins,
            scale: "erb".into(),
            f_min_hz: lo,
            f_max_hz: hi,
            band_centers_hz,
            window_ms: 50.0,
            hop_ms: 10.0,
        }
    }

    pub fn hop_sec(&self) -> f64 {
        self.hop_ms / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerInfo {
    pub id: usize,
    pub name: String,
    /// Average phones per second, the pause normalizer.
    pub speaking_rate: f64,
    /// Multiplies every phone duration.
    pub rate_factor: f64,
    pub pitch_base_hz: f64,
    pub spectral_offset: Vec<f64>,
}

/// Per-bin statistics used to z-normalize mels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MelStats {
    pub fn normalize(&self, mel: &Mat) -> Mat {
        let mut out = mel.clone();
        for r in 0..out.rows {
            for (c, x) in out.row_mut(r).iter_mut().enumerate() {
                *x = (*x - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn denormalize(&self, mel: &Mat) -> Mat {
        let mut out = mel.clone();
        for r in 0..out.rows {
            for (c, x) in out.row_mut(r).iter_mut().enumerate() {
                *x = *x * self.std[c] + self.mean[c];
            }
        }
        out
    }
}

/// Generation rules, recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rules {
    /// Rate-normalized pause length for `Short..=ExtraLong`.
    pub pause_norm: [f64; 4],
    pub pause_thresholds: PauseThresholds,
    /// Probability of `,`, `;`, `.` after a non-final word.
    pub punct_probs: [f64; 3],
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub prominence_stretch: f64,
    pub jitter_prob: f64,
    pub noise_std: f64,
    pub style_rate: [f64; N_STYLE_CLASSES],
    pub style_pitch: [f64; N_STYLE_CLASSES],
    pub style_tilt: [f64; N_STYLE_CLASSES],
    pub style_gain: [f64; N_STYLE_CLASSES],
    /// Base duration in frames per symbol id (pause markers excluded).
    pub base_frames: Vec<f64>,
    pub lexicon_seed: u64,
}

impl Rules {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let base_frames = (0..ALPHABET_SIZE)
            .map(|s| match s {
                0 => 0.0,
                1..=30 => rng.gen_range(3..=7) as f64,
                _ => 3.0,
            })
            .collect();
        Self {
            pause_norm: [0.8, 2.4, 5.5, 10.5],
            pause_thresholds: PauseThresholds::default(),
            punct_probs: [0.18, 0.06, 0.04],
            min_symbols: 20,
            max_symbols: 60,
            min_frames: 3,
            max_frames: 12,
            prominence_stretch: 1.25,
            jitter_prob: 0.2,
            noise_std: 0.02,
            style_rate: [1.0, 0.8, 1.25, 1.0],
            style_pitch: [1.0, 1.3, 0.85, 1.15],
            style_tilt: [0.0, 0.6, -0.6, 0.0],
            style_gain: [0.0, 0.3, -0.3, 0.5],
            base_frames,
            lexicon_seed: LEXICON_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub n_utterances: usize,
    pub mel: MelConfig,
    pub speakers: Vec<SpeakerInfo>,
    pub norm: MelStats,
    pub rules: Rules,
    pub lexicon: Lexicon,
    pub alphabet_size: usize,
    pub index_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub sentence: Sentence,
    pub sequence: LinguisticSequence,
    pub features: Vec<SymbolicWordFeatures>,
    pub durations: DurationVector,
    /// Pause length in seconds for every inter-word slot.
    pub pause_sec: Vec<f64>,
    pub style_class: usize,
    /// Raw (unnormalized) `frames x bins` mel, f32 precision.
    pub mel: Mat,
    /// Hz, zero where unvoiced.
    pub pitch: PitchContour,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.mel.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenOptions {
    pub seed: u64,
    pub n_utterances: usize,
    pub n_speakers: usize,
    pub n_bins: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            n_utterances: 200,
            n_speakers: 2,
            n_bins: 16,
        }
    }
}

struct Voice {
    templates: Mat,
    slopes: Mat,
}

fn smooth_bins(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let a = v[i.saturating_sub(1)];
            let c = v[(i + 1).min(n - 1)];
            0.25 * a + 0.5 * v[i] + 0.25 * c
        })
        .collect()
}

fn make_voice(rng: &mut ChaCha8Rng, n_bins: usize) -> Voice {
    let mut templates = Mat::zeros(ALPHABET_SIZE, n_bins);
    let mut slopes = Mat::zeros(ALPHABET_SIZE, n_bins);
    for s in 1..ALPHABET_SIZE {
        let raw: Vec<f64> = (0..n_bins).map(|_| rng.gen_range(-1.6..1.6)).collect();
        let sl: Vec<f64> = (0..n_bins).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (t, sl) = if is_pause_marker(s) {
            (raw.iter().map(|x| -2.0 + 0.1 * x).collect(), vec![0.0; n_bins])
        } else if s > 30 {
            (raw.iter().map(|x| -1.0 + 0.4 * x).collect(), sl.iter().map(|x| 0.3 * x).collect())
        } else {
            (smooth_bins(&raw), smooth_bins(&sl))
        };
        templates.row_mut(s).copy_from_slice(&t);
        slopes.row_mut(s).copy_from_slice(&sl);
    }
    Voice { templates, slopes }
}

fn make_speakers(rng: &mut ChaCha8Rng, n: usize, n_bins: usize, rules: &Rules) -> Vec<SpeakerInfo> {
    let mean_base = rules.base_frames[1..=30].iter().sum::<f64>() / 30.0;
    (0..n)
        .map(|id| {
            let rate_factor = if n == 1 { 1.0 } else { 0.85 + 0.3 * id as f64 / (n - 1) as f64 };
            let offset: Vec<f64> = (0..n_bins).map(|_| rng.gen_range(-0.5..0.5)).collect();
            SpeakerInfo {
                id,
                name: format!("spk{id}"),
                speaking_rate: 100.0 / (mean_base * rate_factor),
                rate_factor,
                pitch_base_hz: [210.0, 120.0, 165.0, 250.0][id % 4] * (1.0 + 0.02 * (id / 4) as f64),
                spectral_offset: smooth_bins(&offset),
            }
        })
        .collect()
}

/// Raised-cosine envelope over the frames of prominent words.
fn prominence_envelope(seq: &LinguisticSequence, durations: &[usize], prominent: &[bool]) -> Vec<f64> {
    let total: usize = durations.iter().sum();
    let mut starts = Vec::with_capacity(durations.len() + 1);
    let mut acc = 0;
    for &d in durations {
        starts.push(acc);
        acc += d;
    }
    starts.push(acc);
    let mut env = vec![0.0; total];
    for (w, (s, e)) in seq.word_spans().into_iter().enumerate() {
        if !prominent[w] {
            continue;
        }
        // phones only: stop before trailing punctuation and pause markers
        let mut e = e;
        while e > s + 1 && seq.symbols[e - 1] > 30 {
            e -= 1;
        }
        let (fs, fe) = (starts[s], starts[e]);
        let len = (fe - fs) as f64;
        for (f, slot) in env.iter_mut().enumerate().take(fe).skip(fs) {
            let x = (f - fs) as f64 + 0.5;
            *slot = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * x / len).cos();
        }
    }
    env
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

#[allow(clippy::too_many_arguments)]
fn make_utterance(
    i: usize,
    seed: u64,
    lex: &Lexicon,
    rules: &Rules,
    speakers: &[SpeakerInfo],
    voice: &Voice,
    mel_cfg: &MelConfig,
) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64 + 1));
    let speaker = i % speakers.len();
    let spk = &speakers[speaker];
    let sentence = sample_sentence(&mut rng, lex, rules.punct_probs, rules.min_symbols, rules.max_symbols);
    let features = symbolic_features(&sentence, lex);
    let sequence = realize(&sentence, &features, lex).expect("features match words");
    let style = sentence.style_class(lex);
    let prominent: Vec<bool> = sentence.words.iter().map(|&w| lex.get(w).prominent).collect();
    let word_of = sequence.word_of_position();
    let hop = mel_cfg.hop_sec();

    let durations: Vec<usize> = sequence
        .symbols
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            if is_pause_marker(s) {
                let cat = s - 34;
                (rules.pause_norm[cat - 1] / spk.speaking_rate / hop).round() as usize
            } else {
                let stretch = if prominent[word_of[k]] && s <= 30 { rules.prominence_stretch } else { 1.0 };
                let base = rules.base_frames[s] * rules.style_rate[style] * spk.rate_factor * stretch;
                let jitter = if rng.gen_bool(rules.jitter_prob) {
                    if rng.gen_bool(0.5) {
                        1.0
                    } else {
                        -1.0
                    }
                } else {
                    0.0
                };
                ((base.round() + jitter) as usize).clamp(rules.min_frames, rules.max_frames)
            }
        })
        .collect();

    let mut pause_sec = Vec::with_capacity(sentence.len().saturating_sub(1));
    for w in 0..sentence.len().saturating_sub(1) {
        let (s, e) = sequence.word_spans()[w];
        let frames: usize = (s..e)
            .filter(|&k| is_pause_marker(sequence.symbols[k]))
            .map(|k| durations[k])
            .sum();
        pause_sec.push(round_f32(frames as f64 * hop));
    }

    let total: usize = durations.iter().sum();
    let env = prominence_envelope(&sequence, &durations, &prominent);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let nb = mel_cfg.n_bins;
    let mut mel = Mat::zeros(total, nb);
    let mut pitch = vec![0.0; total];
    let mut voiced = vec![false; total];
    let mut f = 0;
    for (&s, &d) in sequence.symbols.iter().zip(&durations) {
        for q in 0..d {
            let t = f as f64 / total as f64;
            let r = (q as f64 + 0.5) / d as f64;
            let f0 = spk.pitch_base_hz
                * rules.style_pitch[style]
                * (1.0 - 0.15 * t)
                * (1.0 + 0.2 * env[f])
                * (1.0 + 0.03 * (std::f64::consts::TAU * f as f64 / 40.0 + phase).sin());
            let v = is_voiced(s);
            if v {
                pitch[f] = round_f32(f0);
                voiced[f] = true;
            }
            let center = (nb - 1) as f64 * ((f0.ln() - 80f64.ln()) / (400f64.ln() - 80f64.ln())).clamp(0.0, 1.0);
            let row = mel.row_mut(f);
            for (b, slot) in row.iter_mut().enumerate() {
                let x = if nb > 1 { b as f64 / (nb - 1) as f64 } else { 0.5 };
                let noise = rules.noise_std * 3f64.sqrt() * rng.gen_range(-1.0..1.0);
                let mut val = voice.templates.at(s, b) + (r - 0.5) * voice.slopes.at(s, b);
                if is_pause_marker(s) {
                    val += 0.3 * spk.spectral_offset[b];
                } else {
                    val += spk.spectral_offset[b] + rules.style_tilt[style] * (x - 0.5) + rules.style_gain[style];
                    val += 0.4 * env[f] * (1.0 - x);
                    if v {
                        let z = (b as f64 - center) / 1.5;
                        val += 0.6 * (-0.5 * z * z).exp();
                    }
                }
                *slot = round_f32(val + noise);
            }
            f += 1;
        }
    }

    Utterance {
        id: format!("utt{i:05}"),
        speaker,
        sentence,
        sequence,
        features,
        durations: DurationVector(durations),
        pause_sec,
        style_class: style,
        mel,
        pitch: PitchContour { values: pitch, voiced },
    }
}

fn mel_stats(utts: &[Utterance], n_bins: usize) -> MelStats {
    let mut sum = vec![0.0; n_bins];
    let mut sq = vec![0.0; n_bins];
    let mut n = 0usize;
    for u in utts {
        for r in 0..u.mel.rows {
            for (b, &x) in u.mel.row(r).iter().enumerate() {
                sum[b] += x;
                sq[b] += x * x;
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n - m * m).max(1e-8).sqrt())
        .collect();
    MelStats { mean, std }
}

/// Builds a corpus in memory.
pub fn generate(opts: &GenOptions) -> Result<Corpus> {
    if opts.n_utterances == 0 {
        return Err(Error::Invalid("at least one utterance is required".into()));
    }
    if opts.n_speakers == 0 {
        return Err(Error::Invalid("at least one speaker is required".into()));
    }
    if opts.n_bins == 0 {
        return Err(Error::Invalid("at least one mel bin is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let rules = Rules::new(&mut rng);
    let lexicon = Lexicon::generate(rules.lexicon_seed);
    let mel = MelConfig::erb(opts.n_bins);
    let voice = make_voice(&mut rng, opts.n_bins);
    let speakers = make_speakers(&mut rng, opts.n_speakers, opts.n_bins, &rules);
    let utterances: Vec<Utterance> = (0..opts.n_utterances)
        .map(|i| make_utterance(i, opts.seed, &lexicon, &rules, &speakers, &voice, &mel))
        .collect();
    let norm = mel_stats(&utterances, opts.n_bins);
    Ok(Corpus {
        manifest: CorpusManifest {
            version: CORPUS_VERSION,
            seed: opts.seed,
            n_utterances: opts.n_utterances,
            mel,
            speakers,
            norm,
            rules,
            lexicon,
            alphabet_size: ALPHABET_SIZE,
            index_sha256: String::new(),
        },
        utterances,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRef {
    path: String,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexRecord {
    id: String,
    speaker: usize,
    text: String,
    sentence: Sentence,
    sequence: LinguisticSequence,
    features: Vec<SymbolicWordFeatures>,
    durations: DurationVector,
    pause_sec: Vec<f64>,
    style_class: usize,
    n_frames: usize,
    mel: FileRef,
    pitch: FileRef,
}

/// Writes the corpus directory; returns the manifest as written.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<CorpusManifest> {
    fs::create_dir_all(dir).map_err(Error::file(dir))?;
    let nb = corpus.manifest.mel.n_bins;
    let mut index = String::new();
    for u in &corpus.utterances {
        let mel_rel = format!("mel/{}.f32", u.id);
        let pitch_rel = format!("pitch/{}.f32", u.id);
        let mel_sha = write_tensor(&dir.join(&mel_rel), &[u.mel.rows, nb], &u.mel.data)?;
        let pitch_sha = write_tensor(&dir.join(&pitch_rel), &[u.pitch.len()], &u.pitch.values)?;
        let rec = IndexRecord {
            id: u.id.clone(),
            speaker: u.speaker,
            text: u.sentence.render(&corpus.manifest.lexicon),
            sentence: u.sentence.clone(),
            sequence: u.sequence.clone(),
            features: u.features.clone(),
            durations: u.durations.clone(),
            pause_sec: u.pause_sec.clone(),
            style_class: u.style_class,
            n_frames: u.mel.rows,
            mel: FileRef {
                path: mel_rel,
                sha256: mel_sha,
            },
            pitch: FileRef {
                path: pitch_rel,
                sha256: pitch_sha,
            },
        };
        index.push_str(&serde_json::to_string(&rec)?);
        index.push('\n');
    }
    write_text(&dir.join("index.jsonl"), &index)?;
    let mut manifest = corpus.manifest.clone();
    manifest.index_sha256 = sha256_hex(index.as_bytes());
    write_text(&dir.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(manifest)
}

/// Generates and writes a corpus.
pub fn gen_corpus(seed: u64, n_utterances: usize, n_speakers: usize, dir: &Path) -> Result<CorpusManifest> {
    let corpus = generate(&GenOptions {
        seed,
        n_utterances,
        n_speakers,
        ..GenOptions::default()
    })?;
    save_corpus(&corpus, dir)
}

fn corpus_err(id: &str, reason: impl ToString) -> Error {
    Error::Corpus {
        utterance: id.to_string(),
        reason: reason.to_string(),
    }
}

fn validate(u: &Utterance, m: &CorpusManifest) -> std::result::Result<(), String> {
    u.sequence.validate().map_err(|e| e.to_string())?;
    if u.speaker >= m.speakers.len() {
        return Err(format!("speaker {} not in manifest", u.speaker));
    }
    if u.durations.len() != u.sequence.len() {
        return Err(format!("{} durations for {} symbols", u.durations.len(), u.sequence.len()));
    }
    if u.durations.total() != u.n_frames() {
        return Err(format!("durations sum to {} but mel has {} frames", u.durations.total(), u.n_frames()));
    }
    if u.pitch.len() != u.n_frames() {
        return Err("pitch and mel frame counts differ".into());
    }
    if u.mel.cols != m.mel.n_bins {
        return Err(format!("mel has {} bins, manifest says {}", u.mel.cols, m.mel.n_bins));
    }
    let n_words = u.sentence.len();
    if u.features.len() != n_words || u.sequence.n_words() != n_words || u.sentence.punct.len() != n_words {
        return Err("word counts disagree between text, sequence and features".into());
    }
    if u.pause_sec.len() + 1 != n_words {
        return Err("pause slots do not match words".into());
    }
    if u.sentence.words.iter().any(|&w| w >= m.lexicon.len()) {
        return Err("word id outside the lexicon".into());
    }
    if u.style_class >= N_STYLE_CLASSES {
        return Err("style class out of range".into());
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let mpath = dir.join("manifest.json");
    let manifest: CorpusManifest = serde_json::from_slice(&fs::read(&mpath).map_err(Error::file(&mpath))?)?;
    if manifest.version != CORPUS_VERSION {
        return Err(Error::Invalid(format!("unsupported corpus version {}", manifest.version)));
    }
    let ipath = dir.join("index.jsonl");
    let index = fs::read_to_string(&ipath).map_err(Error::file(&ipath))?;
    if sha256_hex(index.as_bytes()) != manifest.index_sha256 {
        return Err(Error::Invalid(format!("{}: checksum mismatch", ipath.display())));
    }
    let mut utterances = Vec::new();
    for line in index.lines().filter(|l| !l.trim().is_empty()) {
        let rec: IndexRecord = serde_json::from_str(line)?;
        let id = rec.id.clone();
        let (mshape, mdata) = read_tensor(&dir.join(&rec.mel.path), &rec.mel.sha256).map_err(|e| corpus_err(&id, e))?;
        if mshape != [rec.n_frames, manifest.mel.n_bins] {
            return Err(corpus_err(&id, format!("mel shape {mshape:?}")));
        }
        let (pshape, pdata) =
            read_tensor(&dir.join(&rec.pitch.path), &rec.pitch.sha256).map_err(|e| corpus_err(&id, e))?;
        if pshape != [rec.n_frames] {
            return Err(corpus_err(&id, format!("pitch shape {pshape:?}")));
        }
        let voiced = pdata.iter().map(|&v| v > 0.0).collect();
        let u = Utterance {
            id: rec.id,
            speaker: rec.speaker,
            sentence: rec.sentence,
            sequence: rec.sequence,
            features: rec.features,
            durations: rec.durations,
            pause_sec: rec.pause_sec,
            style_class: rec.style_class,
            mel: Mat::from_vec(rec.n_frames, manifest.mel.n_bins, mdata),
            pitch: PitchContour { values: pdata, voiced },
        };
        validate(&u, &manifest).map_err(|r| corpus_err(&id, r))?;
        utterances.push(u);
    }
    if utterances.len() != manifest.n_utterances {
        return Err(Error::Invalid(format!(
            "index lists {} utterances, manifest says {}",
            utterances.len(),
            manifest.n_utterances
        )));
    }
    Ok(Corpus { manifest, utterances })
}

impl Corpus {
    /// Re-derives every symbolic label from the text and the recorded rules,
    /// and every pause class from the stored pause length.
    pub fn rederive_labels(&self, u: &Utterance) -> Result<(Vec<SymbolicWordFeatures>, Vec<PauseCategory>)> {
        let m = &self.manifest;
        let feats = symbolic_features(&u.sentence, &m.lexicon);
        let rate = m.speakers[u.speaker].speaking_rate;
        let pauses = u
            .pause_sec
            .iter()
            .map(|&p| categorize_pause_with(p, rate, &m.rules.pause_thresholds))
            .collect::<Result<Vec<_>>>()?;
        Ok((feats, pauses))
    }

    pub fn n_speakers(&self) -> usize {
        self.manifest.speakers.len()
    }

    pub fn n_bins(&self) -> usize {
        self.manifest.mel.n_bins
    }

    pub fn find(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenOptions {
        GenOptions {
            seed: 7,
            n_utterances: 12,
            n_speakers: 2,
            n_bins: 16,
        }
    }

    #[test]
    fn generation_invariants_hold() {
        let c = generate(&small()).unwrap();
        for u in &c.utterances {
            validate(u, &c.manifest).unwrap();
            assert!((20..=60).contains(&u.sequence.len()));
            assert!(u.mel.is_finite());
            let (feats, pauses) = c.rederive_labels(u).unwrap();
            assert_eq!(feats, u.features);
            let expected: Vec<_> = u.features[..u.features.len() - 1].iter().map(|f| f.pause).collect();
            assert_eq!(pauses, expected);
            for (&s, &d) in u.sequence.symbols.iter().zip(&u.durations.0) {
                if !is_pause_marker(s) {
                    assert!((3..=12).contains(&d), "symbol {s} lasts {d}");
                }
            }
        }
    }

    #[test]
    fn same_seed_same_corpus_different_seed_differs() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&GenOptions { seed: 8, ..small() }).unwrap();
        assert_ne!(a.utterances[0].mel, c.utterances[0].mel);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&small()).unwrap();
        let m = save_corpus(&c, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.manifest, m);
        assert_eq!(back.utterances, c.utterances);
    }

    #[test]
    fn corrupted_tensor_names_the_utterance() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&small()).unwrap();
        save_corpus(&c, dir.path()).unwrap();
        let p = dir.path().join("mel/utt00003.f32");
        let mut bytes = fs::read(&p).unwrap();
        bytes[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        match load_corpus(dir.path()) {
            Err(Error::Corpus { utterance, .. }) => assert_eq!(utterance, "utt00003"),
            other => panic!("expected corpus error, got {other:?}"),
        }
    }
}
