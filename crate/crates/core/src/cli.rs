//! Command-line workflows. Exit codes: 0 success, 1 usage, 2 runtime.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate, load_corpus, realize, save_corpus, symbolic_features, GenOptions, Sentence};
use crate::error::{Error, Result};
use crate::io::{write_heatmap, write_tensor, write_text};
use crate::model::{train_acoustic, AcousticModel, TrainOptions};
use crate::stylepred::{eval_confusion, train_stylepred, StylePredictor};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "nat-prosody", version, about = "Prosody-controllable acoustic model toolkit")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults are used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, env = "NAT_PROSODY_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        utterances: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        speakers: Option<u64>,
    },
    /// Train the acoustic model.
    TrainAcoustic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from an acoustic checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train the style predictor against a trained acoustic model.
    TrainStylepred {
        /// Without --config the acoustic checkpoint's configuration is used.
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        acoustic_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Synthesize mels from text, without reference audio.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, required_unless_present_all = ["gse", "lse"])]
        stylepred_ckpt: Option<PathBuf>,
        /// JSONL lines of {"id", "text", "speaker"}.
        #[arg(long)]
        text_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON array of global token weights, used without a style predictor.
        #[arg(long, conflicts_with = "stylepred_ckpt", requires = "lse")]
        gse: Option<PathBuf>,
        /// JSON array of local token weights applied to every word.
        #[arg(long, conflicts_with = "stylepred_ckpt", requires = "gse")]
        lse: Option<PathBuf>,
    },
    /// Confusion matrices of the predicted symbolic features.
    EvalConfusion {
        #[arg(long)]
        stylepred_ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Provenance note written next to every command's outputs.
#[derive(Debug, Serialize)]
struct RunNote<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
}

fn note(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let n = RunNote {
        command,
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    write_text(&out.join(format!("{command}.run.json")), &(serde_json::to_string_pretty(&n)? + "\n"))
}

fn load_config(common: &Common, fallback: Option<&RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(f)) => f.clone(),
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextItem {
    id: String,
    text: String,
    #[serde(default)]
    speaker: usize,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_text_manifest(path: &Path) -> Result<Vec<TextItem>> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    let items: Vec<TextItem> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    if items.is_empty() {
        return Err(Error::Invalid(format!("{} holds no sentences", path.display())));
    }
    Ok(items)
}

#[derive(Debug, Serialize)]
struct SynthRecord<'a> {
    id: &'a str,
    text: &'a str,
    speaker: usize,
    config_hash: &'a str,
    frames: usize,
    durations: &'a [usize],
    log_durations: &'a [f64],
    symbols: &'a [usize],
    gse_weights: &'a [f64],
    lse_weights: &'a [Vec<f64>],
    pauses: Vec<String>,
}

fn synth(
    ckpt: &Path,
    stylepred: Option<&Path>,
    manifest: &Path,
    out: &Path,
    gse: Option<&Path>,
    lse: Option<&Path>,
) -> Result<()> {
    let (model, meta) = AcousticModel::load(ckpt)?;
    let predictor = stylepred.map(StylePredictor::load).transpose()?;
    let fixed = match (gse, lse) {
        (Some(g), Some(l)) => Some((read_json::<Vec<f64>>(g)?, read_json::<Vec<f64>>(l)?)),
        _ => None,
    };
    if predictor.is_none() && fixed.is_none() {
        return Err(Error::Invalid("synthesis without a style predictor needs --gse and --lse".into()));
    }
    let lex = &meta.corpus.lexicon;
    let hash = meta.config.hash();
    let mut summary = String::new();
    for item in read_text_manifest(manifest)? {
        let sentence = Sentence::parse(&item.text, lex)?;
        let (gse_w, lse_w, feats, gse_v, lse_v) = match &predictor {
            Some((p, pm)) => {
                if pm.lexicon.entries != lex.entries {
                    return Err(Error::Invalid("style predictor and acoustic checkpoint use different lexicons".into()));
                }
                let pr = p.predict(&sentence, lex.len(), item.speaker)?;
                let lw = pr.words.iter().map(|w| w.lse_weights.clone()).collect();
                (pr.gse_weights, lw, pr.features, pr.gse, pr.lse)
            }
            None => {
                let (g, l) = fixed.as_ref().expect("checked above");
                let gv = model.global_tokens.embedding_from_weights(&model.store, g)?;
                let lv = model.local_tokens.embedding_from_weights(&model.store, l)?;
                let n = sentence.len();
                (g.clone(), vec![l.clone(); n], symbolic_features(&sentence, lex), gv, vec![lv; n])
            }
        };
        let seq = realize(&sentence, &feats, lex)?;
        let syn = model.synthesize(&seq, &gse_v, &lse_v, item.speaker)?;
        let frames = syn.mel.rows;
        if frames != syn.durations.total() {
            return Err(Error::FrameMismatch {
                frames,
                sum: syn.durations.total(),
            });
        }
        let mel = meta.corpus.norm.denormalize(&syn.mel);
        write_tensor(&out.join(format!("{}.mel.f32", item.id)), &[frames, mel.cols], &mel.data)?;
        let a = &syn.alignment;
        write_heatmap(
            &out.join(format!("{}_alignment.png", item.id)),
            a.rows(),
            a.cols(),
            a.weights(),
            2,
            &[("config_hash", hash.clone()), ("utterance", item.id.clone())],
        )?;
        let rec = SynthRecord {
            id: &item.id,
            text: &item.text,
            speaker: item.speaker,
            config_hash: &hash,
            frames,
            durations: &syn.durations.0,
            log_durations: &syn.log_durations,
            symbols: &seq.symbols,
            gse_weights: &gse_w,
            lse_weights: &lse_w,
            pauses: seq.pause_markers.iter().map(|p| p.symbol().to_string()).collect(),
        };
        let line = serde_json::to_string(&rec)?;
        write_text(&out.join(format!("{}.durations.json", item.id)), &(line.clone() + "\n"))?;
        summary.push_str(&line);
        summary.push('\n');
    }
    write_text(&out.join("synth.jsonl"), &summary)?;
    note(out, "synth", &meta.config)
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            out,
            utterances,
            speakers,
        } => {
            let cfg = load_config(&common, None)?;
            let opts = GenOptions {
                seed: cfg.seed,
                n_utterances: utterances.map_or(cfg.data.utterances, |u| u as usize),
                n_speakers: speakers.map_or(cfg.data.speakers, |s| s as usize),
                n_bins: cfg.data.mel_bins,
            };
            let corpus = generate(&opts)?;
            save_corpus(&corpus, &out)?;
            note(&out, "gen-data", &cfg)
        }
        Command::TrainAcoustic {
            common,
            corpus,
            out,
            steps,
            init,
        } => {
            let mut cfg = load_config(&common, None)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let corpus = load_corpus(&corpus)?;
            let opts = TrainOptions {
                out_dir: out.clone(),
                init,
                verbose: cli.verbose,
            };
            train_acoustic(&corpus, &cfg, &opts)?;
            note(&out, "train-acoustic", &cfg)
        }
        Command::TrainStylepred {
            common,
            corpus,
            acoustic_ckpt,
            out,
            steps,
        } => {
            let (model, meta) = AcousticModel::load(&acoustic_ckpt)?;
            let mut cfg = load_config(&common, Some(&meta.config))?;
            if let Some(s) = steps {
                cfg.stylepred.steps = s;
            }
            let corpus = load_corpus(&corpus)?;
            train_stylepred(&corpus, &model, &meta, &cfg, &out)?;
            note(&out, "train-stylepred", &cfg)
        }
        Command::Synth {
            ckpt,
            stylepred_ckpt,
            text_manifest,
            out,
            gse,
            lse,
        } => synth(&ckpt, stylepred_ckpt.as_deref(), &text_manifest, &out, gse.as_deref(), lse.as_deref()),
        Command::EvalConfusion {
            stylepred_ckpt,
            corpus,
            out,
        } => {
            let (p, meta) = StylePredictor::load(&stylepred_ckpt)?;
            let corpus = load_corpus(&corpus)?;
            let rep = eval_confusion(&p, &corpus)?;
            rep.write(&out, &meta.config.hash())?;
            if cli.verbose {
                for m in rep.matrices() {
                    log::info!("{} accuracy {:.4}", m.name, m.accuracy());
                }
            }
            note(&out, "eval-confusion", &meta.config)
        }
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.verbose {
        let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    }
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["nat-prosody", "gen-data", "--out", "/tmp/x", "--utterances", "0"]), EXIT_USAGE);
        assert_eq!(main_with_args(["nat-prosody", "no-such-command"]), EXIT_USAGE);
        assert_eq!(main_with_args(["nat-prosody", "synth", "--ckpt", "a", "--text-manifest", "t", "--out", "o"]), EXIT_USAGE);
    }

    #[test]
    fn missing_inputs_exit_two() {
        assert_eq!(main_with_args(["nat-prosody", "eval-confusion", "--stylepred-ckpt", "/nonexistent", "--corpus", "/nonexistent", "--out", "/tmp/none"]), EXIT_RUNTIME);
    }
}
