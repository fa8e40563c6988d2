//! Symbol alphabet, lexicon and the text-to-sequence frontend.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prosody::PauseCategory;

pub const PAD: usize = 0;
pub const N_PHONES: usize = 30;
pub const ALPHABET_SIZE: usize = 40;
/// Ten vowels (ids 1..=10, the last being the schwa), twelve voiced and
/// eight unvoiced consonants.
pub const PHONE_NAMES: [&str; N_PHONES] = [
    "a", "e", "i", "o", "u", "y", "E", "O", "A", "@", "b", "d", "g", "v", "z", "j", "m", "n", "l", "r", "w", "Z", "p",
    "t", "k", "f", "s", "S", "h", "x",
];
pub const SCHWA: usize = 10;
const FIRST_UNVOICED: usize = 23;
/// Ids of the pause markers for `Short..=ExtraLong`.
const PAUSE_MARKER_BASE: usize = 35;

pub fn is_phone(id: usize) -> bool {
    (1..=N_PHONES).contains(&id)
}

pub fn is_vowel(id: usize) -> bool {
    (1..=10).contains(&id)
}

/// Vowels and voiced consonants carry pitch; everything else is unvoiced.
pub fn is_voiced(id: usize) -> bool {
    (1..FIRST_UNVOICED).contains(&id)
}

pub fn pause_marker(cat: PauseCategory) -> Option<usize> {
    match cat {
        PauseCategory::None => None,
        c => Some(PAUSE_MARKER_BASE + c.index() - 1),
    }
}

pub fn is_pause_marker(id: usize) -> bool {
    (PAUSE_MARKER_BASE..PAUSE_MARKER_BASE + 4).contains(&id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Punct {
    #[serde(rename = ",")]
    Comma,
    #[serde(rename = ";")]
    Semicolon,
    #[serde(rename = ".")]
    Period,
    #[serde(rename = "!")]
    Exclaim,
    #[serde(rename = "?")]
    Question,
}

impl Punct {
    pub const ALL: [Punct; 5] = [Punct::Comma, Punct::Semicolon, Punct::Period, Punct::Exclaim, Punct::Question];

    pub fn symbol_id(self) -> usize {
        match self {
            Punct::Comma => 31,
            Punct::Semicolon => 32,
            Punct::Period => 33,
            Punct::Exclaim => 34,
            Punct::Question => 39,
        }
    }

    pub fn as_char(self) -> char {
        [',', ';', '.', '!', '?'][self.index()]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_char(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_char() == c)
    }
}

pub fn symbol_name(id: usize) -> String {
    if is_phone(id) {
        PHONE_NAMES[id - 1].to_string()
    } else if is_pause_marker(id) {
        format!("<{}>", PauseCategory::ALL[id - PAUSE_MARKER_BASE + 1].symbol())
    } else if let Some(p) = Punct::ALL.into_iter().find(|p| p.symbol_id() == id) {
        p.as_char().to_string()
    } else {
        "_".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Schwa {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "reduced")]
    Reduced,
}

impl Schwa {
    pub const LABELS: [&'static str; 2] = ["full", "reduced"];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Schwa::Full
        } else {
            Schwa::Reduced
        }
    }
}

/// Optional liaison, realized ("1") or omitted ("0").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Liaison {
    #[serde(rename = "1")]
    Realized,
    #[serde(rename = "0")]
    Omitted,
}

impl Liaison {
    pub const LABELS: [&'static str; 2] = ["1", "0"];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Liaison::Realized
        } else {
            Liaison::Omitted
        }
    }
}

/// Word-level pronunciation variants and the pause class of the slot after
/// the word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SymbolicWordFeatures {
    pub schwa: Schwa,
    pub liaison: Liaison,
    pub pause: PauseCategory,
}

impl Default for SymbolicWordFeatures {
    fn default() -> Self {
        Self {
            schwa: Schwa::Full,
            liaison: Liaison::Omitted,
            pause: PauseCategory::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexEntry {
    pub spelling: String,
    /// Citation form; schwa-capable words end in the schwa.
    pub phones: Vec<usize>,
    pub schwa: bool,
    /// Latent consonant realized under liaison.
    pub liaison: Option<usize>,
    /// Followed by a short pause when no punctuation intervenes.
    pub exclamative: bool,
    pub prominent: bool,
    /// Sentence-final keywords select the global style class.
    pub style_group: Option<usize>,
}

impl LexEntry {
    pub fn vowel_initial(&self) -> bool {
        is_vowel(self.phones[0])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "LexiconRepr", into = "LexiconRepr")]
pub struct Lexicon {
    pub entries: Vec<LexEntry>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct LexiconRepr {
    entries: Vec<LexEntry>,
}

impl From<LexiconRepr> for Lexicon {
    fn from(r: LexiconRepr) -> Self {
        Lexicon::new(r.entries)
    }
}

impl From<Lexicon> for LexiconRepr {
    fn from(l: Lexicon) -> Self {
        LexiconRepr { entries: l.entries }
    }
}

impl PartialEq for Lexicon {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

pub const N_STYLE_CLASSES: usize = 4;
const KEYWORDS_PER_CLASS: usize = 3;
const N_REGULAR_WORDS: usize = 68;

impl Lexicon {
    pub fn new(entries: Vec<LexEntry>) -> Self {
        let index = entries.iter().enumerate().map(|(i, e)| (e.spelling.clone(), i)).collect();
        Self { entries, index }
    }

    /// Deterministic pseudo-lexicon: 68 regular words plus three keywords per
    /// style class.
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1e81_c0de);
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let total = N_REGULAR_WORDS + N_STYLE_CLASSES * KEYWORDS_PER_CLASS;
        while entries.len() < total {
            let k = entries.len();
            let keyword = k >= N_REGULAR_WORDS;
            let n = rng.gen_range(2..=4);
            let vowel_initial = rng.gen_bool(0.45);
            let mut phones = Vec::with_capacity(n + 1);
            for i in 0..n {
                let vowel = if i == 0 { vowel_initial } else { !is_vowel(phones[i - 1]) || rng.gen_bool(0.2) };
                phones.push(if vowel {
                    rng.gen_range(1..SCHWA)
                } else {
                    rng.gen_range(SCHWA + 1..=N_PHONES)
                });
            }
            let class = if keyword { 5 } else { rng.gen_range(0..5) };
            let schwa = class == 0;
            let liaison = class == 1;
            if schwa {
                if is_vowel(*phones.last().unwrap()) {
                    phones.push(rng.gen_range(SCHWA + 1..FIRST_UNVOICED));
                }
                phones.push(SCHWA);
            }
            let latent = if liaison {
                if !is_vowel(*phones.last().unwrap()) {
                    phones.push(rng.gen_range(1..SCHWA));
                }
                Some(if rng.gen_bool(0.5) { 15 } else { 24 })
            } else {
                None
            };
            let spelling: String = phones.iter().map(|&p| PHONE_NAMES[p - 1]).collect();
            if !seen.insert(spelling.clone()) {
                continue;
            }
            entries.push(LexEntry {
                spelling,
                phones,
                schwa,
                liaison: latent,
                exclamative: class == 2,
                prominent: class == 3 || (keyword && k % 2 == 0),
                style_group: keyword.then(|| (k - N_REGULAR_WORDS) / KEYWORDS_PER_CLASS),
            });
        }
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> &LexEntry {
        &self.entries[id]
    }

    pub fn lookup(&self, spelling: &str) -> Option<usize> {
        self.index.get(spelling).copied()
    }

    pub fn regular_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].style_group.is_none()).collect()
    }

    pub fn keyword_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].style_group.is_some()).collect()
    }
}

/// A sentence at the text level: words plus the punctuation following each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub words: Vec<usize>,
    pub punct: Vec<Option<Punct>>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn render(&self, lex: &Lexicon) -> String {
        let mut s = String::new();
        for (i, (&w, p)) in self.words.iter().zip(&self.punct).enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(&lex.get(w).spelling);
            if let Some(p) = p {
                s.push(p.as_char());
            }
        }
        s
    }

    /// Parses whitespace-separated words with trailing punctuation.
    pub fn parse(text: &str, lex: &Lexicon) -> Result<Self> {
        let mut words = Vec::new();
        let mut punct = Vec::new();
        for raw in text.split_whitespace() {
            let mut w = raw;
            let mut p = None;
            if let Some(c) = w.chars().last().and_then(Punct::from_char) {
                p = Some(c);
                w = &w[..w.len() - 1];
            }
            if w.is_empty() {
                match (p, punct.last_mut()) {
                    (Some(p), Some(slot @ None)) => {
                        *slot = Some(p);
                        continue;
                    }
                    _ => return Err(Error::Invalid(format!("stray punctuation in {text:?}"))),
                }
            }
            let id = lex
                .lookup(w)
                .ok_or_else(|| Error::Invalid(format!("unknown word {w:?}")))?;
            words.push(id);
            punct.push(p);
        }
        if words.is_empty() {
            return Err(Error::Invalid("empty sentence".into()));
        }
        Ok(Self { words, punct })
    }

    /// Style class selected by the final word, if it is a keyword.
    pub fn style_class(&self, lex: &Lexicon) -> usize {
        self.words.last().and_then(|&w| lex.get(w).style_group).unwrap_or(0)
    }
}

/// The encoder input: symbol ids with word structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinguisticSequence {
    pub symbols: Vec<usize>,
    /// Encoder index of each word's first symbol, strictly increasing.
    pub word_onsets: Vec<usize>,
    /// One category per inter-word slot.
    pub pause_markers: Vec<PauseCategory>,
}

impl LinguisticSequence {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn n_words(&self) -> usize {
        self.word_onsets.len()
    }

    /// `[start, end)` encoder span of every word; trailing punctuation and
    /// pause markers belong to the preceding word.
    pub fn word_spans(&self) -> Vec<(usize, usize)> {
        let n = self.word_onsets.len();
        (0..n)
            .map(|w| {
                let end = if w + 1 < n { self.word_onsets[w + 1] } else { self.symbols.len() };
                (self.word_onsets[w], end)
            })
            .collect()
    }

    pub fn word_of_position(&self) -> Vec<usize> {
        let mut out = vec![0; self.symbols.len()];
        for (w, (s, e)) in self.word_spans().into_iter().enumerate() {
            out[s..e].iter_mut().for_each(|x| *x = w);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.symbols.is_empty() {
            return Err(Error::Invalid("empty symbol sequence".into()));
        }
        if let Some(&s) = self.symbols.iter().find(|&&s| s == PAD || s >= ALPHABET_SIZE) {
            return Err(Error::Invalid(format!("symbol id {s} outside the alphabet")));
        }
        if self.word_onsets.is_empty() || self.word_onsets[0] != 0 {
            return Err(Error::Invalid("first word must start at position 0".into()));
        }
        if self.word_onsets.windows(2).any(|w| w[0] >= w[1]) || *self.word_onsets.last().unwrap() >= self.symbols.len() {
            return Err(Error::Invalid("word onsets must be strictly increasing and in range".into()));
        }
        if self.pause_markers.len() + 1 != self.word_onsets.len() {
            return Err(Error::Invalid(format!(
                "{} pause slots for {} words",
                self.pause_markers.len(),
                self.word_onsets.len()
            )));
        }
        Ok(())
    }
}

/// Corpus rules deriving the symbolic labels from text: punctuation sets the
/// pause class (`,` medium, `;` long, `.` extra-long), an exclamative word
/// without punctuation takes a short pause; schwa reduction and liaison happen
/// before a vowel-initial word with no punctuation in between.
pub fn symbolic_features(sentence: &Sentence, lex: &Lexicon) -> Vec<SymbolicWordFeatures> {
    let n = sentence.len();
    (0..n)
        .map(|i| {
            let entry = lex.get(sentence.words[i]);
            let punct = sentence.punct[i];
            let linked = i + 1 < n && punct.is_none() && lex.get(sentence.words[i + 1]).vowel_initial();
            let pause = if i + 1 == n {
                PauseCategory::None
            } else {
                match punct {
                    Some(Punct::Comma) => PauseCategory::Medium,
                    Some(Punct::Semicolon) => PauseCategory::Long,
                    Some(Punct::Period | Punct::Exclaim | Punct::Question) => PauseCategory::ExtraLong,
                    None if entry.exclamative => PauseCategory::Short,
                    None => PauseCategory::None,
                }
            };
            SymbolicWordFeatures {
                schwa: if entry.schwa && linked { Schwa::Reduced } else { Schwa::Full },
                liaison: if entry.liaison.is_some() && linked {
                    Liaison::Realized
                } else {
                    Liaison::Omitted
                },
                pause,
            }
        })
        .collect()
}

/// Builds the encoder sequence for a sentence under the given pronunciation
/// variants and pause classes.
pub fn realize(sentence: &Sentence, features: &[SymbolicWordFeatures], lex: &Lexicon) -> Result<LinguisticSequence> {
    if features.len() != sentence.len() {
        return Err(Error::Shape(format!(
            "{} feature sets for {} words",
            features.len(),
            sentence.len()
        )));
    }
    let mut symbols = Vec::new();
    let mut word_onsets = Vec::new();
    let mut pause_markers = Vec::new();
    let n = sentence.len();
    for (i, (&w, f)) in sentence.words.iter().zip(features).enumerate() {
        let entry = lex.get(w);
        word_onsets.push(symbols.len());
        let mut phones = entry.phones.clone();
        if entry.schwa && f.schwa == Schwa::Reduced && phones.len() > 1 {
            phones.pop();
        }
        symbols.extend(phones);
        if let (Some(c), Liaison::Realized) = (entry.liaison, f.liaison) {
            symbols.push(c);
        }
        if let Some(p) = sentence.punct[i] {
            symbols.push(p.symbol_id());
        }
        if i + 1 < n {
            if let Some(m) = pause_marker(f.pause) {
                symbols.push(m);
            }
            pause_markers.push(f.pause);
        }
    }
    Ok(LinguisticSequence {
        symbols,
        word_onsets,
        pause_markers,
    })
}

/// Draws a sentence whose realized sequence has between `min_symbols` and
/// `max_symbols` symbols.
pub fn sample_sentence<R: Rng>(
    rng: &mut R,
    lex: &Lexicon,
    punct_probs: [f64; 3],
    min_symbols: usize,
    max_symbols: usize,
) -> Sentence {
    let regular = lex.regular_ids();
    let keywords = lex.keyword_ids();
    loop {
        let n = rng.gen_range(4..=10);
        let mut words: Vec<usize> = (0..n - 1).map(|_| *regular.choose(rng).unwrap()).collect();
        words.push(*keywords.choose(rng).unwrap());
        let mut punct: Vec<Option<Punct>> = (0..n)
            .map(|i| {
                if i + 1 == n {
                    return None;
                }
                let u: f64 = rng.gen();
                if u < punct_probs[0] {
                    Some(Punct::Comma)
                } else if u < punct_probs[0] + punct_probs[1] {
                    Some(Punct::Semicolon)
                } else if u < punct_probs[0] + punct_probs[1] + punct_probs[2] {
                    Some(Punct::Period)
                } else {
                    None
                }
            })
            .collect();
        let class = lex.get(words[n - 1]).style_group.unwrap_or(0);
        punct[n - 1] = Some(match class {
            1 => Punct::Exclaim,
            3 => Punct::Question,
            _ => Punct::Period,
        });
        let s = Sentence { words, punct };
        let feats = symbolic_features(&s, lex);
        let len = realize(&s, &feats, lex).map(|q| q.len()).unwrap_or(0);
        if (min_symbols..=max_symbols).contains(&len) {
            return s;
        }
    }
}
