use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use super::config::{load_config, RunConfig, PRESETS};
use super::rundir::RunDir;
use super::workflow::{
    export_corpus, generated_content_error, label_map, probe_corpus, run_ablation, segment_vectors, ExportKind,
};
use crate::audio::{load_wav, save_wav, synth_corpus, Corpus, Split};
use crate::error::{Error, Result};
use crate::eval::{embed_2d, eval_reconstruction, plot_data, ReferenceClassifiers};
use crate::features::{build_toy_encoder, load_features, pretrain_toy_encoder, save_features};
use crate::generator::{diffusability_probe, train_cfm, Arm, ArmScorer, CfmModel, LatentCorpus};
use crate::seed;
use crate::train::{
    encoder_checkpoint, load_encoder, train_stage, Checkpoint, Pipeline, RunSink, TrainState, TRAIN_DTYPE,
};

#[derive(Debug, Parser)]
#[command(
    name = "wavcube",
    version,
    about = "Train, evaluate and probe compressed speech latents",
    after_long_help = schema_help()
)]
pub struct Cli {
    /// Base configuration: desk, tiny or paper.
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,
    /// JSON file overlaid on the preset. Unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
            SplitArg::All => Split::All,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the resolved configuration and its hash.
    ShowConfig,
    /// Generate the synthetic multi-speaker corpus into a directory.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-prediction pretraining of the toy feature encoder.
    PretrainEncoder {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Stage 1: train compressor, restorer and decoder over the frozen encoder.
    TrainStage1 {
        #[arg(long)]
        corpus: PathBuf,
        /// Encoder checkpoint from pretrain-encoder.
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        resume: bool,
        /// Stop (with a checkpoint) after this many completed steps.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Stage 2: fine-tune the encoder copy against the frozen reference.
    TrainStage2 {
        #[arg(long)]
        corpus: PathBuf,
        /// Final stage-1 checkpoint.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Waveform to latent (or encoder features) container.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Write encoder features instead of latents.
        #[arg(long)]
        features: bool,
    },
    /// Latent container to waveform.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Encode and decode a waveform.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write latents (or features) and labels for a corpus split.
    ExportLatents {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        features: bool,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Train the toy content and speaker classifiers used for scoring.
    TrainClassifiers {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a flow-matching generator on exported sequences.
    TrainCfm {
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Generate one sequence from a trained generator.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated class per frame.
        #[arg(long, conflicts_with = "like")]
        classes: Option<String>,
        /// Reuse the labels of this utterance from --latents.
        #[arg(long, requires = "latents")]
        like: Option<String>,
        #[arg(long)]
        latents: Option<PathBuf>,
        /// Keep the first N frames of the --like utterance as a prompt.
        #[arg(long, requires = "like")]
        prompt_frames: Option<usize>,
        #[arg(long)]
        output: PathBuf,
        /// Stage checkpoint used to render the sample to audio.
        #[arg(long, requires = "wav")]
        decoder: Option<PathBuf>,
        #[arg(long, requires = "decoder")]
        wav: Option<PathBuf>,
    },
    /// Matched generators on encoder features and on latents, same seeds.
    Diffusability {
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        resume: bool,
        /// Stage checkpoint for decoding samples; enables content scoring.
        #[arg(long, requires_all = ["corpus", "classifiers"])]
        pipeline: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Classifier checkpoint; trained and written here when missing.
        #[arg(long)]
        classifiers: Option<PathBuf>,
    },
    /// Linear content/speaker probes and content silhouette.
    Probe {
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out reconstruction report.
    EvalRecon {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classifiers: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Two-dimensional projection of segment-pooled sequences, as plot data.
    Embed2d {
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bottleneck ablation sweep with short stage runs and one shared report.
    Ablation {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        classifiers: Option<PathBuf>,
    },
}

/// Every configuration key with its desk default, for `--help`.
fn schema_help() -> String {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, v, out);
                }
            }
            other => out.push(format!("  --{prefix}={other}")),
        }
    }
    let mut lines = vec![
        format!("Presets: {}.", PRESETS.join(", ")),
        "Any key below can be overridden with --section.key=value (JSON values).".into(),
        "Module seeds are derived from `seed`.".into(),
        String::new(),
        "Configuration keys (desk defaults):".into(),
    ];
    let v = serde_json::to_value(RunConfig::desk()).unwrap_or(Value::Null);
    walk("", &v, &mut lines);
    lines.join("\n")
}

/// Pulls `--section.key=value` (or `--section.key value`) out of argv.
pub fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.to_str().and_then(|s| s.strip_prefix("--")).filter(|s| {
            let name = s.split('=').next().unwrap_or("");
            name.contains('.') && name.starts_with(|c: char| c.is_ascii_alphabetic())
        });
        match key {
            Some(s) => match s.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it
                        .next()
                        .and_then(|v| v.into_string().ok())
                        .ok_or_else(|| Error::config(format!("--{s} needs a value")))?;
                    overrides.push((s.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

/// Parses and runs; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let (argv, overrides) = match split_overrides(args.into_iter().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(&cli.preset, cli.config.as_deref(), overrides)?;
    match &cli.command {
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            println!("hash {}", cfg.hash()?);
            Ok(())
        }
        Command::SynthCorpus { out } => {
            let m = synth_corpus(&cfg.corpus, out)?;
            println!("wrote {} utterances to {}", m.entries.len(), out.join("manifest.jsonl").display());
            Ok(())
        }
        Command::PretrainEncoder { corpus, run_dir, resume } => pretrain(&cfg, corpus, run_dir, *resume),
        Command::TrainStage1 {
            corpus,
            encoder,
            run_dir,
            resume,
            stop_after,
        } => {
            let rd = RunDir::open(run_dir, &cfg, *resume)?;
            let corpus = Corpus::load(corpus)?;
            let state = match resumed_state(&rd, *resume, 1)? {
                Some(s) => s,
                None => {
                    let enc = load_encoder(&cfg.encoder, &Checkpoint::load(encoder)?, "encoder")?;
                    TrainState::stage1(cfg.model(), cfg.stage1.clone(), &enc)?
                }
            };
            run_stage(&rd, state, &corpus, *stop_after)
        }
        Command::TrainStage2 {
            corpus,
            init,
            run_dir,
            resume,
            stop_after,
        } => {
            let rd = RunDir::open(run_dir, &cfg, *resume)?;
            let corpus = Corpus::load(corpus)?;
            let state = match resumed_state(&rd, *resume, 2)? {
                Some(s) => s,
                None => TrainState::stage2(&Checkpoint::load(init)?, cfg.stage2.clone())?,
            };
            if state.model != cfg.model() {
                return Err(Error::config(
                    "stage-1 checkpoint was trained with a different model configuration",
                ));
            }
            run_stage(&rd, state, &corpus, *stop_after)
        }
        Command::Encode {
            checkpoint,
            input,
            output,
            features,
        } => {
            let p = Pipeline::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            let w = load_wav(input)?;
            let m = if *features { p.features(&w)? } else { p.latent(&w)? };
            save_features(output, &m)?;
            println!("{} frames x {} dims at {} Hz", m.frames(), m.dim(), m.frame_rate());
            Ok(())
        }
        Command::Decode {
            checkpoint,
            input,
            output,
        } => {
            let p = Pipeline::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            save_wav(output, &p.decode(&load_features(input)?, None)?)
        }
        Command::Reconstruct {
            checkpoint,
            input,
            output,
        } => {
            let p = Pipeline::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            save_wav(output, &p.reconstruct(&load_wav(input)?)?)
        }
        Command::ExportLatents {
            checkpoint,
            corpus,
            out,
            features,
            split,
        } => {
            let p = Pipeline::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            let kind = if *features { ExportKind::Features } else { ExportKind::Latents };
            let lc = export_corpus(&p, &Corpus::load(corpus)?, (*split).into(), kind)?;
            lc.save(out)?;
            println!("exported {} sequences ({} dims) to {}", lc.len(), lc.dim()?, out.display());
            Ok(())
        }
        Command::TrainClassifiers { corpus, out } => {
            let clf = classifiers(&cfg, Some(out), &Corpus::load(corpus)?)?;
            println!(
                "content error {:.4}, speaker accuracy {:.4}",
                clf.content_heldout_error, clf.speaker_heldout_accuracy
            );
            Ok(())
        }
        Command::TrainCfm {
            latents,
            run_dir,
            resume,
        } => train_generator(&cfg, latents, run_dir, *resume),
        Command::Sample {
            checkpoint,
            classes,
            like,
            latents,
            prompt_frames,
            output,
            decoder,
            wav,
        } => {
            let model = CfmModel::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            let (labels, prompt) = match (classes, like) {
                (Some(c), _) => (parse_classes(c)?, None),
                (None, Some(id)) => {
                    let lc = LatentCorpus::load(latents.as_ref().expect("clap enforces --latents"))?;
                    let item = lc
                        .items
                        .into_iter()
                        .find(|i| &i.id == id)
                        .ok_or_else(|| Error::data(format!("no utterance `{id}`")))?;
                    let prompt = prompt_frames.map(|k| {
                        let mask: Vec<f32> = (0..item.frames.frames()).map(|t| if t < k { 0.0 } else { 1.0 }).collect();
                        (item.frames.clone(), mask)
                    });
                    (item.classes, prompt)
                }
                (None, None) => return Err(Error::config("pass --classes or --like")),
            };
            let x = model.generate(&labels, prompt.as_ref().map(|(f, m)| (f, m.as_slice())), &cfg.sampler)?;
            save_features(output, &x)?;
            if let (Some(d), Some(w)) = (decoder, wav) {
                let p = Pipeline::from_checkpoint(&Checkpoint::load(d)?)?;
                let arm = if x.dim() == p.adapter.config.d_z {
                    Arm::Latent
                } else if x.dim() == p.adapter.config.d_s {
                    Arm::Raw
                } else {
                    return Err(Error::data(format!("{}-dim samples fit neither side of the pipeline", x.dim())));
                };
                save_wav(w, &super::workflow::render_sample(arm, &p, &x)?)?;
            }
            Ok(())
        }
        Command::Diffusability {
            raw,
            latents,
            run_dir,
            resume,
            pipeline,
            corpus,
            classifiers: clf_path,
        } => {
            let rd = RunDir::open(run_dir, &cfg, *resume)?;
            let out = rd.reports().join("diffusability.json");
            if *resume && out.exists() {
                log::info!("{} exists, nothing to do", out.display());
                return Ok(());
            }
            let raw = LatentCorpus::load(raw)?;
            let lat = LatentCorpus::load(latents)?;
            let scoring = match (pipeline, corpus) {
                (Some(p), Some(c)) => {
                    let corpus = Corpus::load(c)?;
                    let clf = classifiers(&cfg, clf_path.as_deref(), &corpus)?;
                    Some((Pipeline::from_checkpoint(&Checkpoint::load(p)?)?, label_map(&corpus), clf))
                }
                _ => None,
            };
            let (raw_t, lat_t) = (raw.subset(Split::Test), lat.subset(Split::Test));
            let mut score = |arm: Arm, _seed: u64, m: &CfmModel| -> Result<f64> {
                let (p, labels, clf) = scoring.as_ref().expect("scorer only built with a pipeline");
                let targets = if arm == Arm::Raw { &raw_t } else { &lat_t };
                generated_content_error(m, arm, p, targets, labels, clf, cfg.eval.samples_per_arm, &cfg.sampler)
            };
            let scorer: Option<&mut ArmScorer<'_>> = if scoring.is_some() { Some(&mut score) } else { None };
            let report = diffusability_probe(&raw, &lat, &cfg.cfm, &cfg.eval.diffusability_seeds, scorer)?;
            for r in &report.runs {
                for p in &r.curve {
                    rd.append_metric(&json!({"arm": r.arm, "seed": r.seed, "point": p}))?;
                }
                println!(
                    "{:?} seed {} dim {}: final normalized loss {:.4}, content error {:?}",
                    r.arm,
                    r.seed,
                    r.dim,
                    r.final_normalized(),
                    r.content_error
                );
            }
            println!(
                "latent arm lower on {}/{} seeds; loss ordering holds: {}",
                report.latent_wins, report.seeds, report.loss_ordering_holds
            );
            write_json(&out, &report)
        }
        Command::Probe { latents, out } => {
            let probes = probe_corpus(&LatentCorpus::load(latents)?, cfg.eval.probe_seed)?;
            println!(
                "content probe {:.4}, speaker probe {:.4}, content silhouette {:.4} over {} segments",
                probes.content.accuracy, probes.speaker.accuracy, probes.content_silhouette, probes.segments
            );
            match out {
                Some(p) => write_json(p, &probes),
                None => Ok(()),
            }
        }
        Command::EvalRecon {
            checkpoint,
            corpus,
            out,
            classifiers: clf_path,
            split,
        } => {
            let corpus_data = Corpus::load(corpus)?;
            let clf = classifiers(&cfg, clf_path.as_deref(), &corpus_data)?;
            let state = TrainState::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            let reference = state.reference.clone_frozen()?;
            let p = Pipeline::from_state(state);
            let report = eval_reconstruction(
                &p,
                Some(&reference),
                &corpus_data,
                (*split).into(),
                &clf,
                &corpus.display().to_string(),
                &cfg.hash()?,
            )?;
            print!("{}", report.summary_table());
            report.save(out)
        }
        Command::Embed2d { latents, out } => {
            let (xs, ys, ids) = segment_vectors(&LatentCorpus::load(latents)?)?;
            let e = embed_2d(&xs)?;
            std::fs::write(out, plot_data(&ids, &e, &ys)).map_err(|err| Error::io(out, err))?;
            println!("{} points, explained variance {:?}", xs.len(), e.variance);
            Ok(())
        }
        Command::Ablation {
            corpus,
            encoder,
            run_dir,
            resume,
            classifiers: clf_path,
        } => {
            let rd = RunDir::open(run_dir, &cfg, *resume)?;
            let out = rd.reports().join("ablation.json");
            if *resume && out.exists() {
                log::info!("{} exists, nothing to do", out.display());
                return Ok(());
            }
            let corpus = Corpus::load(corpus)?;
            let clf = classifiers(&cfg, clf_path.as_deref(), &corpus)?;
            let report = run_ablation(&cfg, &corpus, &Checkpoint::load(encoder)?, &clf, Some(&rd.checkpoints()))?;
            print!("{}", report.table());
            write_json(&out, &report)
        }
    }
}

fn pretrain(cfg: &RunConfig, corpus: &Path, run_dir: &Path, resume: bool) -> Result<()> {
    let rd = RunDir::open(run_dir, cfg, resume)?;
    let out = rd.checkpoints().join("encoder.wcck");
    if resume && out.exists() {
        log::info!("{} exists, nothing to do", out.display());
        return Ok(());
    }
    // Pretraining is short and restarts from scratch.
    rd.truncate_metrics(0)?;
    let corpus = Corpus::load(corpus)?;
    let enc = build_toy_encoder(&cfg.encoder, seed::derive(cfg.seed, "encoder.init"), TRAIN_DTYPE)?;
    let report = pretrain_toy_encoder(&enc, &corpus, &cfg.pretrain)?;
    for (step, loss) in &report.train_curve {
        rd.append_metric(&json!({"stage": "pretrain", "step": step, "loss": loss}))?;
    }
    println!(
        "held-out masked loss {:.4} -> {:.4}",
        report.initial_val_loss, report.final_val_loss
    );
    write_json(&rd.reports().join("pretrain.json"), &report)?;
    encoder_checkpoint(&enc, serde_json::to_value(&report)?)?.save(&out)
}

/// The latest checkpoint of this run when resuming, with the metric log cut
/// back to it.
fn resumed_state(rd: &RunDir, resume: bool, stage: u8) -> Result<Option<TrainState>> {
    if !resume {
        return Ok(None);
    }
    match rd.latest_checkpoint()? {
        Some((n, p)) => {
            let s = TrainState::from_checkpoint(&Checkpoint::load(&p)?)?;
            if s.stage.stage != stage || s.step != n {
                return Err(Error::data(format!("{} is not a stage-{stage} checkpoint at step {n}", p.display())));
            }
            rd.truncate_metrics(n)?;
            log::info!("resuming stage {stage} from step {n}");
            Ok(Some(s))
        }
        None => {
            rd.truncate_metrics(0)?;
            Ok(None)
        }
    }
}

fn run_stage(rd: &RunDir, mut state: TrainState, corpus: &Corpus, stop_after: Option<u64>) -> Result<()> {
    let sink = RunSink {
        metrics: Some(rd.metrics_path()),
        checkpoints: Some(rd.checkpoints()),
    };
    let logged = train_stage(&mut state, corpus, &sink, stop_after)?;
    let path = rd.checkpoint(state.step);
    if !path.exists() {
        state.to_checkpoint()?.save(&path)?;
    }
    if let Some(m) = logged.last() {
        println!("stage {} step {}: total {:.4}, mel {:.4}", m.stage, m.step, m.total, m.mel);
    }
    println!("checkpoint {}", path.display());
    Ok(())
}

fn train_generator(cfg: &RunConfig, latents: &Path, run_dir: &Path, resume: bool) -> Result<()> {
    let rd = RunDir::open(run_dir, cfg, resume)?;
    let out = rd.checkpoint(cfg.cfm.total_steps);
    if resume && out.exists() {
        log::info!("{} exists, nothing to do", out.display());
        return Ok(());
    }
    // Generator training has no mid-run checkpoints; an interrupted run restarts.
    rd.truncate_metrics(0)?;
    let lc = LatentCorpus::load(latents)?;
    let outcome = train_cfm(&cfg.cfm, &lc)?;
    for p in &outcome.curve {
        rd.append_metric(p)?;
    }
    if let Some(p) = outcome.curve.last() {
        println!("final normalized validation loss {:.4}", p.normalized);
    }
    write_json(&rd.reports().join("curve.json"), &outcome.curve)?;
    outcome.model.save(&out, json!({ "curve": outcome.curve }))
}

/// Loads the classifiers at `path`, or trains them (saving to `path` when given).
fn classifiers(cfg: &RunConfig, path: Option<&Path>, corpus: &Corpus) -> Result<ReferenceClassifiers> {
    if let Some(p) = path.filter(|p| p.exists()) {
        return ReferenceClassifiers::from_checkpoint(&Checkpoint::load(p)?);
    }
    let clf = ReferenceClassifiers::train(corpus, &cfg.classifiers)?;
    if let Some(p) = path {
        clf.to_checkpoint()?.save(p)?;
    }
    Ok(clf)
}

fn parse_classes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|c| {
            c.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad class `{c}` in --classes")))
        })
        .collect()
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_from_clap_args() {
        let (rest, ov) = split_overrides(os(&[
            "wavcube",
            "--stage1.peak_lr=1e-3",
            "train-cfm",
            "--run-dir=out.d",
            "--cfm.batch",
            "4",
        ]))
        .unwrap();
        assert_eq!(rest, os(&["wavcube", "train-cfm", "--run-dir=out.d"]));
        assert_eq!(ov, vec![("stage1.peak_lr".into(), "1e-3".into()), ("cfm.batch".into(), "4".into())]);
        assert!(split_overrides(os(&["wavcube", "--cfm.batch"])).is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let h = schema_help();
        assert!(h.contains("--stage2.lambda_sem="));
        assert!(h.contains("--cfm.dit.width="));
    }
}
