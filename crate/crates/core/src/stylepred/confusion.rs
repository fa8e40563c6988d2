use std::fmt::Write as _;
use std::path::Path;

use super::{StylePredictor, TextTokens};
use crate::data::{Corpus, Liaison, Schwa, SymbolicWordFeatures};
use crate::error::{Error, Result};
use crate::io::{write_heatmap, write_text};
use crate::prosody::PauseCategory;

/// Counts with the ground truth on rows and the prediction on columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub name: String,
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(name: &str, labels: &[&str]) -> Self {
        Self {
            name: name.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            counts: vec![vec![0; labels.len()]; labels.len()],
        }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn support(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> usize {
        self.support().iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hit: usize = (0..self.labels.len()).map(|i| self.counts[i][i]).sum();
        hit as f64 / self.total().max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let w = self.labels.iter().map(String::len).max().unwrap_or(1).max(6);
        let mut s = format!("# {} (rows: ground truth, columns: predicted)\n", self.name);
        write!(s, "{:>w$}", "gt\\pred").expect("string write");
        for l in &self.labels {
            write!(s, " {l:>w$}").expect("string write");
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            write!(s, "{l:>w$}").expect("string write");
            for c in row {
                write!(s, " {c:>w$}").expect("string write");
            }
            s.push('\n');
        }
        writeln!(s, "accuracy {:.4}", self.accuracy()).expect("string write");
        s
    }

    /// Grayscale image, one block per cell, intensity `255 * count / max`.
    pub fn write_png(&self, path: &Path, config_hash: &str) -> Result<()> {
        let n = self.labels.len();
        let values: Vec<f64> = self.counts.iter().flatten().map(|&c| c as f64).collect();
        let text = [
            ("config_hash", config_hash.to_string()),
            ("matrix", self.name.clone()),
            ("orientation", "rows ground truth, columns predicted".to_string()),
        ];
        write_heatmap(path, n, n, &values, 24, &text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionReport {
    pub schwa: ConfusionMatrix,
    pub liaison: ConfusionMatrix,
    pub pause: ConfusionMatrix,
}

impl ConfusionReport {
    pub fn matrices(&self) -> [&ConfusionMatrix; 3] {
        [&self.schwa, &self.liaison, &self.pause]
    }

    pub fn to_text(&self) -> String {
        self.matrices().map(ConfusionMatrix::to_text).join("\n")
    }

    /// Writes `confusion.txt` and one PNG per matrix.
    pub fn write(&self, dir: &Path, config_hash: &str) -> Result<()> {
        write_text(&dir.join("confusion.txt"), &format!("# config_hash={config_hash}\n{}", self.to_text()))?;
        for m in self.matrices() {
            m.write_png(&dir.join(format!("confusion_{}.png", m.name)), config_hash)?;
        }
        Ok(())
    }
}

/// Predicts symbolic features for every corpus sentence and tallies them
/// against the annotations.
pub fn eval_confusion(model: &StylePredictor, corpus: &Corpus) -> Result<ConfusionReport> {
    let lex_len = corpus.manifest.lexicon.len();
    if TextTokens::vocab_size(lex_len) != model.vocab {
        return Err(Error::Invalid("corpus lexicon does not match the predictor vocabulary".into()));
    }
    let mut rep = ConfusionReport {
        schwa: ConfusionMatrix::new("schwa", &Schwa::LABELS),
        liaison: ConfusionMatrix::new("liaison", &Liaison::LABELS),
        pause: ConfusionMatrix::new("pauses", &PauseCategory::ALL.map(PauseCategory::symbol)),
    };
    for u in &corpus.utterances {
        let pred = model.predict(&u.sentence, lex_len, u.speaker)?;
        for (t, p) in u.features.iter().zip(&pred.features) {
            tally(&mut rep, t, p);
        }
    }
    Ok(rep)
}

fn tally(rep: &mut ConfusionReport, t: &SymbolicWordFeatures, p: &SymbolicWordFeatures) {
    rep.schwa.add(t.schwa.index(), p.schwa.index());
    rep.liaison.add(t.liaison.index(), p.liaison.index());
    rep.pause.add(t.pause.index(), p.pause.index());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::read_heatmap_cells;

    #[test]
    fn rows_sum_to_support_and_png_agrees() {
        let mut m = ConfusionMatrix::new("pauses", &["-", ".", ",", ";", "#"]);
        for (t, p, n) in [(0, 0, 30), (1, 1, 4), (1, 2, 1), (4, 4, 2), (2, 2, 7)] {
            for _ in 0..n {
                m.add(t, p);
            }
        }
        assert_eq!(m.support(), vec![30, 5, 7, 0, 2]);
        assert!((m.accuracy() - 43.0 / 44.0).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        m.write_png(&p, "h").unwrap();
        let cells = read_heatmap_cells(&p, 5, 5).unwrap();
        for (k, &c) in cells.iter().enumerate() {
            let v = m.counts[k / 5][k % 5] as f64;
            assert_eq!(c, (255.0 * v / 30.0).round() as u8);
        }
        assert!(m.to_text().contains("rows: ground truth"));
    }
}
