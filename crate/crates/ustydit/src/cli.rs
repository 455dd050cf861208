//! Command-line front end: training, stylization, edge extraction,
//! curation, evaluation, gradient checking, and a quick cost benchmark.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 check failure.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::{self, ScorerBinding, ScorerMode, Stage};
use crate::diffusion::{
    self, build_train_item, edge_f1, training_step, SgdMomentum, CANNY_HIGH, CANNY_LOW,
};
use crate::imaging::{canny, ssim, ImageBuffer};
use crate::model::{GradCheckFixture, Model};
use crate::msm;
use crate::numerics::{grad_check, ParamStore};
use crate::tokenizer::ModelConfig;
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub seed: u64,
    pub parallelism: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            step_size: 1e-2,
            momentum: 0.9,
            seed: 7,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub steps: usize,
    pub lambda: f64,
    pub prompt: String,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 8,
            lambda: 0.5,
            prompt: String::new(),
            seed: 7,
        }
    }
}

/// Top-level JSON run configuration. Every field has a default; CLI flags
/// override whatever the file provides.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

impl RunConfig {
    pub fn load(path: Option<&PathBuf>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                Ok(serde_json::from_str(&text)?)
            }
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "ustydit",
    about = "Desk-scale stylized diffusion: training, inference, and dataset curation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train the model on a JSONL manifest of style images
    Train(TrainArgs),
    /// Stylize a content image with a style image
    Stylize(StylizeArgs),
    /// Extract an edge map from an image
    Canny(CannyArgs),
    /// Run the staged curation pipeline over a manifest
    Curate(CurateArgs),
    /// Report SSIM and edge-F1 between two images
    Eval(EvalArgs),
    /// Finite-difference gradient check of the full model
    GradCheck(GradCheckArgs),
    /// Compare modulator attention cost against the naive joint form
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSONL manifest: one {"id","image_path","prompt"} per line
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoint and training log
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
}

#[derive(Args, Debug)]
pub struct StylizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the conditioning edge map here
    #[arg(long)]
    pub edge_out: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct CannyArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = CANNY_LOW)]
    pub low: f64,
    #[arg(long, default_value_t = CANNY_HIGH)]
    pub high: f64,
}

#[derive(Args, Debug)]
pub struct CurateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output JSONL with per-record scores, decisions, and final status
    #[arg(long)]
    pub out_manifest: PathBuf,
    /// Output JSON summary of counts
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
    /// External consistency scorer command (split on whitespace)
    #[arg(long)]
    pub consistency_scorer: Option<String>,
    #[arg(long)]
    pub aesthetic_scorer: Option<String>,
    #[arg(long)]
    pub canny_scorer: Option<String>,
    #[arg(long, default_value_t = curation::CONSISTENCY_THRESHOLD)]
    pub consistency_threshold: f64,
    #[arg(long, default_value_t = curation::AESTHETIC_THRESHOLD)]
    pub aesthetic_threshold: f64,
    #[arg(long, default_value_t = curation::CANNY_SIMILARITY_THRESHOLD)]
    pub canny_threshold: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Token counts per sequence to probe
    #[arg(long, value_delimiter = ',', default_values_t = vec![4usize, 16, 64])]
    pub lengths: Vec<usize>,
    /// Style patch counts to probe
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 5, 10])]
    pub patch_counts: Vec<usize>,
}

/// Parse argv and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // help/version are successful exits
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::CheckFailed(_) | Error::NonFinite(_) => EXIT_CHECK_FAILED,
                _ => EXIT_CONFIG,
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Stylize(a) => cmd_stylize(&a),
        Cmd::Canny(a) => cmd_canny(&a),
        Cmd::Curate(a) => cmd_curate(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::GradCheck(a) => cmd_grad_check(&a),
        Cmd::Bench(a) => cmd_bench(&a),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_ref())?;
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = args.parallelism {
        cfg.train.parallelism = p;
    }
    std::fs::create_dir_all(&args.out_dir)?;

    let entries = diffusion::load_manifest(&args.manifest)?;
    if entries.is_empty() {
        return Err(Error::Config("empty training manifest".into()));
    }
    let mut items = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let img = ImageBuffer::read_png(&PathBuf::from(&e.image_path))?;
        items.push(build_train_item(
            &cfg.model,
            &e.id,
            &img,
            &e.prompt,
            cfg.train.seed.wrapping_add(i as u64),
        )?);
    }

    let mut model = Model::init(cfg.model.clone(), cfg.train.seed)?;
    let mut opt = SgdMomentum::new(cfg.train.step_size, cfg.train.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut log = String::from("step,loss,wall_ms\n");
    for step in 0..cfg.train.steps {
        let t0 = Instant::now();
        let loss = training_step(&mut model, &items, &mut opt, &mut rng, cfg.train.parallelism)?;
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        log.push_str(&format!("{step},{loss:.17e},{wall_ms:.3}\n"));
        if step % 50 == 0 || step + 1 == cfg.train.steps {
            println!("step {step} loss {loss:.6}");
        }
    }
    std::fs::write(args.out_dir.join("train_log.csv"), log)?;
    model.store.save(&args.out_dir.join("model.ckpt"))?;
    let cfg_json = serde_json::to_string_pretty(&cfg)?;
    std::fs::write(args.out_dir.join("run_config.json"), cfg_json)?;
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

pub fn cmd_stylize(args: &StylizeArgs) -> Result<()> {
    let cfg = RunConfig::load(args.config.as_ref())?;
    let store = ParamStore::load(&args.checkpoint)?;
    let model = Model {
        cfg: cfg.model.clone(),
        store,
    };
    let content = ImageBuffer::read_png(&args.content)?;
    let style = ImageBuffer::read_png(&args.style)?;
    let lambda = args.lambda.unwrap_or(cfg.sample.lambda);
    let prompt = args.prompt.clone().unwrap_or_else(|| cfg.sample.prompt.clone());
    let steps = args.steps.unwrap_or(cfg.sample.steps);
    let seed = args.seed.unwrap_or(cfg.sample.seed);
    let (out, edge) = diffusion::stylize(&model, &content, &style, lambda, &prompt, steps, seed)?;
    out.write_png(&args.out)?;
    if let Some(p) = &args.edge_out {
        edge.to_image()?.write_png(p)?;
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn cmd_canny(args: &CannyArgs) -> Result<()> {
    let img = ImageBuffer::read_png(&args.input)?;
    let edges = canny(&img, args.low, args.high)?;
    edges.to_image()?.write_png(&args.out)?;
    let count: usize = edges.values.iter().map(|&v| v as usize).sum();
    println!("{} edge pixels -> {}", count, args.out.display());
    Ok(())
}

fn parse_scorer(spec: Option<&String>, stage: Stage, threshold: f64) -> Result<ScorerBinding> {
    let mode = match spec {
        None => ScorerMode::BuiltinStub,
        Some(s) => {
            let mut parts = s.split_whitespace().map(String::from);
            let command = parts
                .next()
                .ok_or_else(|| Error::Config("empty scorer command".into()))?;
            ScorerMode::ExternalCommand {
                command,
                args: parts.collect(),
            }
        }
    };
    Ok(ScorerBinding {
        stage,
        mode,
        threshold,
    })
}

pub fn cmd_curate(args: &CurateArgs) -> Result<()> {
    let records = curation::load_manifest(&args.manifest)?;
    let bindings = vec![
        parse_scorer(
            args.consistency_scorer.as_ref(),
            Stage::Consistency,
            args.consistency_threshold,
        )?,
        parse_scorer(
            args.aesthetic_scorer.as_ref(),
            Stage::Aesthetic,
            args.aesthetic_threshold,
        )?,
        parse_scorer(
            args.canny_scorer.as_ref(),
            Stage::CannySimilarity,
            args.canny_threshold,
        )?,
    ];
    let out = curation::run_pipeline(&records, &bindings, args.parallelism)?;
    curation::write_manifest(&args.out_manifest, &out.records)?;
    let summary_json = serde_json::to_string_pretty(&out.summary)?;
    if let Some(p) = &args.summary {
        std::fs::write(p, &summary_json)?;
    }
    println!("{summary_json}");
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let a = ImageBuffer::read_png(&args.image)?;
    let b = ImageBuffer::read_png(&args.reference)?;
    let s = ssim(&a, &b)?;
    let ea = canny(&a, CANNY_LOW, CANNY_HIGH)?;
    let eb = canny(&b, CANNY_LOW, CANNY_HIGH)?;
    let f1 = edge_f1(&ea, &eb)?;
    println!(
        "{}",
        serde_json::json!({ "ssim": s, "edge_f1": f1 })
    );
    Ok(())
}

/// Small full-model configuration for gradient checking: every pathway is
/// exercised but the parameter count stays in the low thousands.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        patch_px: 4,
        base_resolution: 8,
        n_patches: 3,
        heads: 2,
        blocks: 1,
        text_vocab: 32,
        text_max_tokens: 4,
    }
}

pub fn cmd_grad_check(args: &GradCheckArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(_) => RunConfig::load(args.config.as_ref())?.model,
        None => grad_check_config(),
    };
    let model = Model::init(cfg.clone(), args.seed)?;
    let fixture = GradCheckFixture::generate(&cfg, args.seed)?;
    let t0 = Instant::now();
    let report = grad_check(
        &model.store,
        |store, want_grads| crate::model::grad_check_eval(&cfg, store, &fixture, want_grads),
        1e-5,
        args.tolerance,
        args.parallelism,
    )?;
    println!(
        "gradient check passed: max relative error {:.3e} (worst parameter {}) in {:.1}s",
        report.max_rel_err,
        report.worst_param,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    println!("{:>6} {:>6} {:>14} {:>14} {:>8}", "L", "n", "mixed", "naive", "ratio");
    for &l in &args.lengths {
        for &n in &args.patch_counts {
            let mixed = msm::count_mixed_attention_entries(l);
            let naive = msm::count_naive_attention_entries(l, n);
            println!(
                "{:>6} {:>6} {:>14} {:>14} {:>8.2}",
                l,
                n,
                mixed,
                naive,
                naive as f64 / mixed as f64
            );
        }
    }
    println!(
        "predicted asymptotic ratio at n=10: {:.2}",
        msm::score_entry_ratio(10)
    );
    Ok(())
}
