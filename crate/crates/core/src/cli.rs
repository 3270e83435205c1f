//! Command-line entry point. Human-readable results go to stdout, JSON-lines
//! events to stderr.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use serde_json::json;

use crate::binmap::{BinMap, RecordEvent, RecordReader, Value};
use crate::checkpoint::load_checkpoint;
use crate::config::{Config, ModelConfig};
use crate::data::shard::{read_all, ShardIndex, INDEX_FILE};
use crate::data::synth::{gen_synthetic_corpus_sharded, SynthSpec, DEFAULT_SAMPLES_PER_SHARD};
use crate::data::{AVSample, Label};
use crate::dynamics::convergence_stats;
use crate::error::{Error, Result};
use crate::evaluation::{
    attention_probe_train, embed_clips, export_embeddings, permutation_null, quantile, retrieve, tsv_header,
    Direction, ProbeConfig, ProbeInput,
};
use crate::rng::{stream, Purpose};
use crate::training::{run_pretraining, RunOptions, LOSSES_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const EMBED_CHUNK: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "tgdp", version, about = "Audio-visual masked pretraining with a guided contrastive pass")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired corpus as shards plus an index.
    GenData {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        /// Probability that a clip's audio matches its visual content.
        #[arg(long, default_value_t = 1.0)]
        correlation: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Config supplying image, audio and frame sizes.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_SAMPLES_PER_SHARD)]
        per_shard: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Report record count, field shapes and checksum status of a shard.
    InspectShard {
        /// A shard file or a dataset directory.
        path: PathBuf,
    },
    /// Pretrain on a sharded corpus.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run into `--out`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this step.
        #[arg(long)]
        until: Option<u64>,
        #[arg(long)]
        force: bool,
        /// Emit a step event every this many steps.
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Zero-shot cross-modal retrieval; prints a recall table as TSV.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `va` or `av`; both when omitted.
        #[arg(long)]
        direction: Option<String>,
        #[arg(long = "k", value_delimiter = ',', default_values_t = vec![1, 5, 10])]
        ks: Vec<usize>,
        /// Shuffles for the permutation null of R@1 (0 disables).
        #[arg(long, default_value_t = 1000)]
        null: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attention probe on frozen per-frame global tokens.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        /// Training split for the probe head.
        #[arg(long = "data", alias = "train-data")]
        train_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        /// `av`, `a` or `v`.
        #[arg(long, default_value = "av")]
        modality: String,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Permute training labels (control run).
        #[arg(long)]
        shuffle_labels: bool,
    },
    /// Write per-frame global tokens as shards.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SAMPLES_PER_SHARD)]
        per_shard: usize,
        #[arg(long)]
        force: bool,
    },
    /// Convergence summary of a loss log as JSON.
    Dynamics {
        #[arg(long)]
        csv: PathBuf,
        /// Relative band around the final value.
        #[arg(long, default_value_t = 0.05)]
        within: f64,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ConfigParse { .. } | Error::ConfigInvalid { .. } | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Data(_) | Error::Format(_) | Error::Shape(_) => EXIT_DATA,
        Error::NonFinite { .. } | Error::Tensor(_) => EXIT_NUMERIC,
    }
}

/// Parse `args` (including the program name) and run, returning the exit code.
pub fn run_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            let _ = writeln!(err, "{}", json!({"event": "error", "code": code, "message": e.to_string()}));
            code
        }
    }
}

fn event(err: &mut dyn Write, value: serde_json::Value) {
    let _ = writeln!(err, "{value}");
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn load_corpus(dir: &Path) -> Result<Vec<AVSample>> {
    let samples = read_all(&ShardIndex::load(dir)?)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: dataset is empty", dir.display())));
    }
    Ok(samples)
}

fn refuse_clobber(dir: &Path, marker: &str, force: bool) -> Result<()> {
    if dir.join(marker).exists() && !force {
        return Err(Error::InvalidArgument(format!(
            "{} already exists; pass --force to overwrite",
            dir.join(marker).display()
        )));
    }
    Ok(())
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData {
            classes,
            per_class,
            correlation,
            noise,
            seed,
            config,
            overrides,
            per_shard,
            out: dir,
            force,
        } => {
            refuse_clobber(&dir, INDEX_FILE, force)?;
            let mut cfg = match &config {
                Some(p) => Config::parse(&std::fs::read_to_string(p).map_err(io_err(p))?)?,
                None => Config::default(),
            };
            cfg.apply_overrides(&overrides)?;
            let spec = SynthSpec {
                num_classes: classes,
                samples_per_class: per_class,
                correlation,
                noise_sigma: noise,
                seed,
            };
            let index = gen_synthetic_corpus_sharded(&spec, &cfg.model, &dir, per_shard)?;
            writeln!(out, "wrote {} clips in {} shards to {}", index.total(), index.shards.len(), dir.display())
                .map_err(io_err(&dir))?;
            event(err, json!({"event": "gen-data", "clips": index.total(), "shards": index.shards.len()}));
            Ok(())
        }
        Command::InspectShard { path } => inspect(&path, out),
        Command::Pretrain {
            config,
            data,
            overrides,
            seed,
            out: dir,
            resume,
            until,
            force,
            log_every,
        } => {
            let mut cfg = match &config {
                Some(p) => Config::parse(&std::fs::read_to_string(p).map_err(io_err(p))?)?,
                None => Config::default(),
            };
            cfg.apply_overrides(&overrides)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            if resume.is_none() {
                refuse_clobber(&dir, LOSSES_FILE, force)?;
            }
            let corpus = load_corpus(&data)?;
            let opts = RunOptions {
                resume,
                until,
                force,
            };
            let every = log_every.max(1);
            let summary = run_pretraining(&cfg, &corpus, &dir, &opts, &mut |r| {
                if r.step % every == 0 {
                    event(
                        err,
                        json!({"event": "step", "step": r.step, "total": r.total, "rec_v": r.rec_v,
                               "rec_a": r.rec_a, "contra": r.contra, "dis": r.dis, "lr": r.lr}),
                    );
                }
            })?;
            writeln!(out, "step {} checkpoint {}", summary.final_step, summary.checkpoint.display())
                .map_err(io_err(&dir))?;
            event(err, json!({"event": "done", "step": summary.final_step,
                              "checkpoint": summary.checkpoint.display().to_string()}));
            Ok(())
        }
        Command::Retrieve {
            ckpt,
            data,
            direction,
            ks,
            null,
            seed,
        } => {
            let directions = match direction {
                Some(d) => vec![d.parse::<Direction>()?],
                None => vec![Direction::AudioToVisual, Direction::VisualToAudio],
            };
            let c = load_checkpoint(&ckpt, DType::F32)?;
            let corpus = load_corpus(&data)?;
            check_geometry(&c.config.model, &corpus[0])?;
            let embs = embed_clips(&c.student, &corpus, EMBED_CHUNK)?;
            writeln!(out, "{}", tsv_header(&ks)).map_err(io_err(&ckpt))?;
            for dir in directions {
                let res = retrieve(&embs, dir, &ks)?;
                writeln!(out, "{}", res.tsv_row()).map_err(io_err(&ckpt))?;
                let mut ev = json!({"event": "retrieval", "direction": dir.as_str(), "clips": embs.len(),
                                    "chance_r1": 1.0 / embs.len() as f64});
                if null > 0 {
                    let dist = permutation_null(&res.scores, 1, null, seed)?;
                    ev["null_r1_p99"] = json!(quantile(&dist, 0.99));
                }
                event(err, ev);
            }
            Ok(())
        }
        Command::Probe {
            ckpt,
            train_data,
            test_data,
            modality,
            epochs,
            batch_size,
            lr,
            seed,
            shuffle_labels,
        } => {
            let input: ProbeInput = modality.parse()?;
            let c = load_checkpoint(&ckpt, DType::F32)?;
            let train = load_corpus(&train_data)?;
            let test = load_corpus(&test_data)?;
            check_geometry(&c.config.model, &train[0])?;
            let mut train_e = embed_clips(&c.student, &train, EMBED_CHUNK)?;
            let test_e = embed_clips(&c.student, &test, EMBED_CHUNK)?;
            if shuffle_labels {
                let mut labels: Vec<Option<Label>> = train_e.iter().map(|e| e.label.clone()).collect();
                labels.shuffle(&mut stream(seed, Purpose::Probe, &[u64::MAX]));
                for (e, l) in train_e.iter_mut().zip(labels) {
                    e.label = l;
                }
            }
            let pc = ProbeConfig {
                epochs,
                batch_size,
                lr,
                seed,
                ..ProbeConfig::default()
            };
            let m = attention_probe_train(&c.student, &train_e, &test_e, input, &pc)?;
            let summary = json!({"modality": modality, "top1": m.top1, "map": m.map,
                                 "final_train_loss": m.final_train_loss,
                                 "encoder_grad_norm": m.encoder_grad_norm});
            writeln!(out, "{summary}").map_err(io_err(&ckpt))?;
            Ok(())
        }
        Command::ExportEmbeddings {
            ckpt,
            data,
            out: dir,
            per_shard,
            force,
        } => {
            refuse_clobber(&dir, INDEX_FILE, force)?;
            let c = load_checkpoint(&ckpt, DType::F32)?;
            let corpus = load_corpus(&data)?;
            check_geometry(&c.config.model, &corpus[0])?;
            let embs = embed_clips(&c.student, &corpus, EMBED_CHUNK)?;
            let index = export_embeddings(&embs, &dir, per_shard)?;
            writeln!(out, "wrote {} embeddings to {}", index.total(), dir.display()).map_err(io_err(&dir))?;
            Ok(())
        }
        Command::Dynamics { csv, within } => {
            let text = std::fs::read_to_string(&csv).map_err(io_err(&csv))?;
            let stats = convergence_stats(&text, within)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&stats.to_json()).unwrap_or_default())
                .map_err(io_err(&csv))?;
            Ok(())
        }
    }
}

fn check_geometry(cfg: &ModelConfig, s: &AVSample) -> Result<()> {
    let (h, w) = cfg.image_size;
    let (mel, seg) = cfg.audio_segment_size;
    let [_, fh, fw, _] = s.frames_shape;
    let [_, sm, sf] = s.segments_shape;
    if (fh, fw, sm, sf) != (h, w, mel, seg) {
        return Err(Error::Data(format!(
            "clip `{}` is {fh}x{fw} / {sm}x{sf}, model expects {h}x{w} / {mel}x{seg}",
            s.sample_id
        )));
    }
    Ok(())
}

fn describe(map: &BinMap) -> Vec<String> {
    map.iter()
        .map(|(k, v)| match v {
            Value::Str(_) => format!("{k}\tstr"),
            Value::U32List(l) => format!("{k}\tu32[{}]", l.len()),
            Value::F32Array { shape, .. } => format!("{k}\tf32{shape:?}"),
            Value::I64(_) => format!("{k}\ti64"),
        })
        .collect()
}

fn inspect(path: &Path, out: &mut dyn Write) -> Result<()> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let index = ShardIndex::load(path)?;
        (0..index.shards.len()).map(|i| index.shard_path(i)).collect()
    } else {
        vec![path.to_path_buf()]
    };
    let (mut records, mut corrupt) = (0usize, 0usize);
    let mut first: Option<BinMap> = None;
    for f in &files {
        let file = File::open(f).map_err(io_err(f))?;
        let reader = RecordReader::new(BufReader::new(file)).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
        for ev in reader {
            match ev.map_err(|e| Error::Data(format!("{}: {e}", f.display())))? {
                RecordEvent::Payload(p) => {
                    records += 1;
                    if first.is_none() {
                        first = Some(BinMap::decode(&p)?);
                    }
                }
                RecordEvent::ChecksumMismatch { .. } => corrupt += 1,
            }
        }
    }
    let w = |e| Error::io(path, e);
    writeln!(out, "shards\t{}", files.len()).map_err(w)?;
    writeln!(out, "records\t{records}").map_err(w)?;
    writeln!(out, "crc\t{}", if corrupt == 0 { "ok".to_string() } else { format!("{corrupt} corrupt") })
        .map_err(w)?;
    if let Some(m) = first {
        for line in describe(&m) {
            writeln!(out, "{line}").map_err(w)?;
        }
    }
    Ok(())
}
