use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tera_core::diagnostics::{alteration_statistics, model_gradcheck, op_gradcheck, Check, GradOp};
use tera_core::features::{cmvn_per_speaker, fbank, load_features, mfcc, read_wav, save_features, Split};
use tera_core::pretrain::{pretrain, Checkpoint, TrainConfig};
use tera_core::probes::{
    examples_for_task, shuffled_labels, stratified_split, train_probe, ClassifierKind, ProbeData, ProbeSpec, ProbeTask,
};
use tera_core::synth::{generate, random_corpus, SynthConfig, SynthCorpus};
use tera_core::transfer::{extract_batch, representation_matrix, TransferConfig, TransferMode};
use tera_core::util::write_text_atomic;
use tera_core::{FeatureMatrix, Result, TeraError};

use crate::manifest::{read_labels, write_labels, Manifest, ManifestRow};

#[derive(Parser, Debug)]
#[command(name = "tera", version, about = "Masked-reconstruction speech pre-training toolkit")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert the WAV files of a manifest to TFEA1 feature files.
    Features(FeaturesArgs),
    /// Write the seeded synthetic corpus as TFEA1 files, label files and a manifest.
    Synth(SynthArgs),
    /// Pre-train an encoder from a JSON training config.
    Pretrain(PretrainArgs),
    /// Dump encoder representations as TFEA1 files.
    Extract(ExtractArgs),
    /// Train and evaluate a probing classifier.
    Probe(ProbeArgs),
    /// Compare reverse-mode gradients with 64-bit finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the statistical checks of the alteration policies.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FeatureChoice {
    Fbank,
    Mfcc,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "fbank")]
    kind: FeatureChoice,
    /// Mel bins for FBANK.
    #[arg(long, default_value_t = 80)]
    mels: usize,
    /// Skip per-speaker mean and variance normalization.
    #[arg(long)]
    no_cmvn: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON generator settings; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write unstructured random features with random labels instead.
    #[arg(long)]
    random: bool,
    #[arg(long, default_value_t = 64, requires = "random")]
    utterances: usize,
    #[arg(long, default_value_t = 40, requires = "random")]
    frames: usize,
    #[arg(long, default_value_t = 4, requires = "random")]
    classes: usize,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    manifest: Option<PathBuf>,
    /// Train on the default synthetic corpus.
    #[arg(long)]
    synthetic: bool,
    /// Checkpoint directory; an existing run there is resumed.
    #[arg(long)]
    out: PathBuf,
    /// Write every step's alteration records as JSON lines.
    #[arg(long)]
    dump_alterations: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Layer {
    Last,
    Ws,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `ws` averages all layers with equal weights.
    #[arg(long, value_enum, default_value = "last")]
    layer: Layer,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum TaskArg {
    PhoneFrame,
    SpeakerFrame,
    SpeakerUtterance,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClassifierArg {
    Linear,
    Hidden1,
    Concat8,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long, value_enum, default_value = "linear")]
    classifier: ClassifierArg,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden_width: Option<usize>,
    /// Number of phone classes (default: largest label + 1).
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.125)]
    dev_fraction: f64,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    /// Permute the labels before training (chance-level control).
    #[arg(long)]
    shuffle_labels: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random cases per operation.
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    /// Random parameter directions for the full model.
    #[arg(long, default_value_t = 100)]
    directions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long)]
    json: Option<PathBuf>,
}

const OP_TOLERANCE: f64 = 1e-6;
const MODEL_TOLERANCE: f64 = 1e-5;

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Features(a) => features(a),
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Extract(a) => extract(a),
        Command::Probe(a) => probe(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Selftest(a) => selftest(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| TeraError::io(dir, e))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(|e| TeraError::io(p, e))
}

fn feature_file(dir: &Path, utterance_id: &str) -> Result<PathBuf> {
    if utterance_id.contains(['/', '\\']) || utterance_id.starts_with('.') {
        return Err(TeraError::Data(format!("utterance_id '{utterance_id}' cannot name a file")));
    }
    Ok(dir.join(format!("{utterance_id}.tfea")))
}

fn features(a: FeaturesArgs) -> Result<ExitCode> {
    let manifest = Manifest::load(&a.manifest)?;
    manifest.check_paths()?;
    let mut feats = Vec::with_capacity(manifest.rows.len());
    for r in &manifest.rows {
        let (samples, rate) = read_wav(&r.path)?;
        let fm = match a.kind {
            FeatureChoice::Fbank => fbank(&r.utterance_id, &r.speaker_id, &samples, rate, a.mels),
            FeatureChoice::Mfcc => mfcc(&r.utterance_id, &r.speaker_id, &samples, rate),
        }
        .map_err(|e| TeraError::Data(format!("{}: {e}", r.path.display())))?;
        feats.push(fm);
    }
    if !a.no_cmvn {
        feats = cmvn_per_speaker(&feats)?;
    }
    write_feature_set(&a.out, &manifest.rows, &feats)?;
    eprintln!("wrote {} feature files to {}", feats.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Save features next to a manifest that keeps the original label files.
fn write_feature_set(out: &Path, rows: &[ManifestRow], feats: &[FeatureMatrix]) -> Result<()> {
    create_dir(out)?;
    let mut written = Vec::with_capacity(rows.len());
    for (r, fm) in rows.iter().zip(feats) {
        let path = feature_file(out, &r.utterance_id)?;
        save_features(&path, fm)?;
        let label_path = r.label_path.as_deref().map(absolute).transpose()?;
        written.push(ManifestRow { path, label_path, ..r.clone() });
    }
    write_text_atomic(&out.join("manifest.tsv"), &Manifest { rows: written }.to_tsv(out))
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let corpus = if a.random {
        random_corpus(a.utterances, a.frames, 16, a.classes, a.seed.unwrap_or(0))?
    } else {
        let mut cfg = match &a.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| TeraError::io(p, e))?;
                serde_json::from_str::<SynthConfig>(&text).map_err(|e| TeraError::parse(p.display(), e.to_string()))?
            }
            None => SynthConfig::default(),
        };
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        generate(&cfg)?
    };
    write_synth(&a.out, &corpus)?;
    eprintln!("wrote {} synthetic utterances to {}", corpus.features.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn write_synth(out: &Path, corpus: &SynthCorpus) -> Result<()> {
    let labels_dir = out.join("labels");
    create_dir(&labels_dir)?;
    let mut rows = Vec::with_capacity(corpus.features.len());
    for (fm, labels) in corpus.features.iter().zip(&corpus.frame_labels) {
        let path = feature_file(out, &fm.utterance_id)?;
        save_features(&path, fm)?;
        let label_path = labels_dir.join(format!("{}.txt", fm.utterance_id));
        write_labels(&label_path, labels)?;
        rows.push(ManifestRow {
            utterance_id: fm.utterance_id.clone(),
            speaker_id: fm.speaker_id.clone(),
            path,
            label_path: Some(label_path),
        });
    }
    write_text_atomic(&out.join("manifest.tsv"), &Manifest { rows }.to_tsv(out))
}

fn pretrain_cmd(a: PretrainArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&a.config).map_err(|e| TeraError::io(&a.config, e))?;
    let cfg = TrainConfig::from_json(&text, &a.config.display().to_string())?;
    let feats = match &a.manifest {
        Some(m) => {
            let manifest = Manifest::load(m)?;
            manifest.check_paths()?;
            manifest.corpus(Split::Train)?.load()?
        }
        None => generate(&SynthConfig::default())?.features,
    };
    if let Some(bad) = feats.iter().find(|f| f.num_channels() != cfg.model.input_dim) {
        return Err(TeraError::Incompatible(format!(
            "{}: {} channels but model.input_dim is {} in {}",
            bad.utterance_id,
            bad.num_channels(),
            cfg.model.input_dim,
            a.config.display()
        )));
    }
    create_dir(&a.out)?;
    write_text_atomic(&a.out.join("config.json"), &serde_json::to_string_pretty(&cfg).expect("config serializes"))?;

    let mut dump = String::new();
    let every = (cfg.total_steps / 20).max(1);
    let state = pretrain(&feats, &cfg, Some(&a.out), |r| {
        if r.step % every == 0 || r.step == cfg.total_steps {
            eprintln!("step {:>7}  loss {:.5}  lr {:.3e}  grad-norm {:.3}", r.step, r.loss, r.lr, r.grad_norm);
        }
        if a.dump_alterations.is_some() {
            let line = serde_json::json!({ "step": r.step, "records": r.records });
            dump.push_str(&line.to_string());
            dump.push('\n');
        }
    })?;
    if let Some(path) = &a.dump_alterations {
        write_text_atomic(path, &dump)?;
    }
    println!("final checkpoint {} at step {}", a.out.join("final.tckp").display(), state.step);
    Ok(ExitCode::SUCCESS)
}

fn extract(a: ExtractArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let manifest = Manifest::load(&a.manifest)?;
    manifest.check_paths()?;
    let feats = manifest.corpus(Split::Test)?.load()?;
    let mode = match a.layer {
        Layer::Last => TransferMode::ExtractLast,
        Layer::Ws => TransferMode::ExtractWs,
    };
    let tc = TransferConfig::new(mode, model.config.n_layers);
    let mut reprs = Vec::with_capacity(feats.len());
    for fm in &feats {
        let r = extract_batch(&[fm], &model, &tc)?.pop().expect("one utterance in, one out");
        reprs.push(representation_matrix(fm, r)?);
    }
    write_feature_set(&a.out, &manifest.rows, &reprs)?;
    eprintln!("wrote {} representations of width {} to {}", reprs.len(), model.config.d_model, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn probe(a: ProbeArgs) -> Result<ExitCode> {
    let manifest = Manifest::load(&a.manifest)?;
    manifest.check_paths()?;
    let task = match a.task {
        TaskArg::PhoneFrame => ProbeTask::PhoneFrame,
        TaskArg::SpeakerFrame => ProbeTask::SpeakerFrame,
        TaskArg::SpeakerUtterance => ProbeTask::SpeakerUtterance,
    };
    let feats: Vec<FeatureMatrix> = manifest.rows.iter().map(|r| load_features(&r.path)).collect::<Result<_>>()?;

    let speakers: BTreeMap<&str, usize> = {
        let mut names: Vec<&str> = manifest.rows.iter().map(|r| r.speaker_id.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
    };
    let speaker_labels: Vec<usize> = manifest.rows.iter().map(|r| speakers[r.speaker_id.as_str()]).collect();
    let mut frame_labels = Vec::new();
    if task == ProbeTask::PhoneFrame {
        for (r, fm) in manifest.rows.iter().zip(&feats) {
            let path = r.label_path.as_ref().ok_or_else(|| {
                TeraError::Data(format!("{}: phone_frame needs a label_path in {}", r.utterance_id, a.manifest.display()))
            })?;
            let labels = read_labels(path)?;
            if labels.len() != fm.num_frames() {
                return Err(TeraError::Data(format!(
                    "{}: {} labels for {} frames",
                    path.display(),
                    labels.len(),
                    fm.num_frames()
                )));
            }
            frame_labels.push(labels);
        }
    }
    let n_classes = match task {
        ProbeTask::PhoneFrame => a.classes.unwrap_or_else(|| frame_labels.iter().flatten().max().map_or(0, |m| m + 1)),
        _ => speakers.len(),
    };

    let ids: Vec<String> = manifest.rows.iter().map(|r| r.utterance_id.clone()).collect();
    let reprs = feats.into_iter().map(|f| f.frames).collect();
    let mut examples = examples_for_task(&ids, reprs, &frame_labels, &speaker_labels, task)?;
    if a.shuffle_labels {
        examples = shuffled_labels(&examples, a.seed);
    }
    let split = stratified_split(&speaker_labels, a.dev_fraction, a.test_fraction, a.seed);
    let data = ProbeData::from_split(&examples, &split);

    let classifier = match a.classifier {
        ClassifierArg::Linear => ClassifierKind::Linear,
        ClassifierArg::Hidden1 => ClassifierKind::Hidden1,
        ClassifierArg::Concat8 => ClassifierKind::Concat8Linear,
    };
    let mut spec = ProbeSpec::new(task, classifier, n_classes, a.epochs);
    if let Some(lr) = a.lr {
        spec.lr = lr;
    }
    if let Some(b) = a.batch_size {
        spec.batch_size = b;
    }
    spec.hidden_width = a.hidden_width;
    let report = train_probe(&data, &spec, a.seed)?;
    println!("{}", report.to_table());
    if let Some(p) = &a.json {
        write_text_atomic(p, &report.to_json())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut ok = true;
    for op in GradOp::ALL {
        let mut worst = 0f64;
        for s in 0..a.seeds {
            worst = worst.max(op_gradcheck(op, a.seed.wrapping_add(s))?);
        }
        let check = Check::new(op.name(), worst, 0.0, OP_TOLERANCE);
        ok &= check.pass;
        println!("{check}");
    }
    let check = Check::new("model (L1 objective)", model_gradcheck(a.seed, a.directions)?, 0.0, MODEL_TOLERANCE);
    ok &= check.pass;
    println!("{check}");
    Ok(verdict(ok))
}

fn selftest(a: SelftestArgs) -> Result<ExitCode> {
    let checks = alteration_statistics(a.seed, a.draws)?;
    for c in &checks {
        println!("{c}");
    }
    if let Some(p) = &a.json {
        write_text_atomic(p, &serde_json::to_string_pretty(&checks).expect("checks serialize"))?;
    }
    Ok(verdict(checks.iter().all(|c| c.pass)))
}

fn verdict(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        eprintln!("error: one or more checks failed");
        ExitCode::from(2)
    }
}
