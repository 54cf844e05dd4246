use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use loc_core::config::{load_generator, load_run_checkpoint, RunConfig};
use loc_core::datamodel::{
    load_checkpoint, load_image, save_checkpoint, save_image, stack_images, Manifest,
};
use loc_core::diffusion::{edit_with_bundle, EditUnet};
use loc_core::eval::{evaluate, run_ablation, AblationOptions, EvalOptions, MetricEncoder};
use loc_core::hypernetwork::Hypernetwork;
use loc_core::lora::{negate_bundle, LoRABundle};
use loc_core::synthdata::{
    gen_pair_dataset, gen_quad_evalset, load_pair_dataset, load_quad_evalset, CorpusOptions,
    TransformKind,
};
use loc_core::training::{pretrain_generator, two_stage_train, RunOutput, TrainState};

const LORA_PREFIX: &str = "lora.";

#[derive(Parser)]
#[command(name = "loc", version, about = "Edit images by example with generated LoRA bundles")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic pair corpus or genuine-quad evaluation set.
    GenData(GenData),
    /// Pretrain (or load) the generator, then train the hypernetwork.
    Train(Train),
    /// Edit a query image with the change shown by a before/after pair.
    Edit(Edit),
    /// Score a checkpoint on genuine quads.
    Eval(Eval),
    /// Train reverse-on/off (and exchange-off) arms and compare them.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "n_quads", required_unless_present = "n_quads")]
    n_pairs: Option<usize>,
    #[arg(long)]
    n_quads: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// Comma-separated transform kinds (default: all).
    #[arg(long, value_delimiter = ',')]
    transforms: Vec<String>,
    #[arg(long, default_value_t = 0.01)]
    min_change: f32,
}

#[derive(Args)]
struct Train {
    /// Stage-1 pair corpus (overrides the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Stage-2 pair corpus (overrides the config).
    #[arg(long)]
    stage2: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint whose generator is reused instead of pretraining one.
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Continue from a run checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    no_reverse: bool,
    #[arg(long)]
    no_exchange: bool,
}

#[derive(Args)]
struct Edit {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required_unless_present = "lora")]
    before: Option<PathBuf>,
    #[arg(long, required_unless_present = "lora")]
    after: Option<PathBuf>,
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long)]
    seed: u64,
    /// Write the instruction's bundle to this directory.
    #[arg(long)]
    save_lora: Option<PathBuf>,
    /// Use a saved bundle instead of reading a before/after pair.
    #[arg(long, conflicts_with_all = ["before", "after"])]
    lora: Option<PathBuf>,
    /// Negate the bundle before sampling.
    #[arg(long)]
    reverse: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    quads: PathBuf,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint whose encoder serves as the metric encoder (default: --ckpt).
    #[arg(long)]
    encoder_ckpt: Option<PathBuf>,
    /// Held-out pairs for the LoRA consistency score.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    quads: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Held-out pairs for the LoRA consistency score.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Also train an exchange-off arm.
    #[arg(long)]
    exchange: bool,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long)]
    seed: u64,
}

fn write_json(value: &serde_json::Value, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen_data(a: GenData) -> Result<()> {
    let transforms = if a.transforms.is_empty() {
        TransformKind::ALL.to_vec()
    } else {
        a.transforms
            .iter()
            .map(|t| TransformKind::parse(t).with_context(|| format!("unknown transform `{t}`")))
            .collect::<Result<_>>()?
    };
    let opts = CorpusOptions {
        image_size: a.image_size,
        transforms,
        min_change: a.min_change,
    };
    let manifest = match (a.n_pairs, a.n_quads) {
        (Some(n), None) => gen_pair_dataset(n, &opts, &a.out, a.seed)?,
        (None, Some(n)) => gen_quad_evalset(n, &opts, &a.out, a.seed)?,
        _ => bail!("give exactly one of --n-pairs and --n-quads"),
    };
    println!("wrote {} samples to {}", manifest.count, a.out.display());
    Ok(())
}

fn obtain_generator(cfg: &RunConfig, generator: Option<&Path>, stage1: &Path, out: &Path) -> Result<EditUnet> {
    if let Some(path) = generator {
        return Ok(load_generator(path, &cfg.generator)?);
    }
    let (_, records) = load_pair_dataset(stage1)?;
    log::info!("pretraining the generator on {} pairs", records.len());
    let (model, losses) = pretrain_generator(&records, &cfg.generator, &cfg.pretrain, &cfg.schedule()?)?;
    let mut manifest = Manifest::new(cfg.to_json(), cfg.pretrain.steps, cfg.pretrain.seed);
    manifest.extras = serde_json::json!({ "final_loss": losses.last() });
    save_checkpoint(&model.store().to_named()?, &manifest, &out.join("generator"))?;
    Ok(model.into_frozen()?)
}

fn cmd_train(a: Train) -> Result<()> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (cfg, model, hypernet, mut state) = match &a.resume {
        Some(ckpt) => {
            let run = load_run_checkpoint(ckpt)?;
            log::info!("resuming at step {}", run.state.progress.global_step);
            (run.config, run.model, run.hypernet, run.state)
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(d) = &a.data {
                cfg.data.stage1 = Some(d.clone());
            }
            if let Some(d) = &a.stage2 {
                cfg.data.stage2 = Some(d.clone());
            }
            if a.no_reverse {
                cfg.train.reverse_enabled = false;
            }
            if a.no_exchange {
                cfg.train.exchange_enabled = false;
            }
            cfg.validate()?;
            let stage1 = cfg.data.stage1.clone().context("no stage-1 data: pass --data")?;
            let model = obtain_generator(&cfg, a.generator.as_deref(), &stage1, &a.out)?;
            let hypernet = Hypernetwork::init(&cfg.hypernet, cfg.train.seed)?;
            let state = TrainState::new(&cfg.train);
            (cfg, model, hypernet, state)
        }
    };
    write_json(&cfg.to_json(), &a.out.join("config.json"))?;
    let stage1 = cfg.data.stage1.clone().context("config has no stage-1 data")?;
    let (_, s1) = load_pair_dataset(&stage1)?;
    let s2 = match &cfg.data.stage2 {
        Some(p) => Some(load_pair_dataset(p)?.1),
        None => None,
    };
    let out = RunOutput {
        dir: a.out.clone(),
        config: cfg.to_json(),
        seed: cfg.train.seed,
    };
    let sched = cfg.schedule()?;
    let reports = two_stage_train(&s1, s2.as_deref(), &hypernet, &model, &sched, &cfg.train, &mut state, Some(&out))?;
    if let Some(last) = reports.last() {
        println!("step {}: total loss {:.5}", last.step, last.total);
    }
    println!("final checkpoint: {}", a.out.join("final").display());
    Ok(())
}

fn cmd_edit(a: Edit) -> Result<()> {
    let run = load_run_checkpoint(&a.ckpt)?;
    let size = run.config.generator.image_size;
    let query = load_image(&a.query, size)?;
    let mut bundle = match &a.lora {
        Some(dir) => {
            let (tensors, _) = load_checkpoint(dir)?;
            LoRABundle::from_named(&tensors, LORA_PREFIX, &candle_core::Device::Cpu)?
        }
        None => {
            let dev = candle_core::Device::Cpu;
            let before = load_image(a.before.as_ref().context("--before is required")?, size)?;
            let after = load_image(a.after.as_ref().context("--after is required")?, size)?;
            run.hypernet
                .forward(&stack_images(&[&before], &dev)?, &stack_images(&[&after], &dev)?)?
                .detach()?
        }
    };
    let echo = serde_json::json!({
        "command": "edit",
        "ckpt": a.ckpt,
        "before": a.before,
        "after": a.after,
        "query": a.query,
        "lora": a.lora,
        "reverse": a.reverse,
        "steps": a.steps,
        "seed": a.seed,
        "config": run.config.to_json(),
    });
    if let Some(dir) = &a.save_lora {
        let mut manifest = Manifest::new(echo.clone(), run.manifest.step, a.seed);
        manifest.extras = serde_json::json!({ "layer_dims": bundle.dims() });
        save_checkpoint(&bundle.to_named(LORA_PREFIX)?, &manifest, dir)?;
    }
    if a.reverse {
        bundle = negate_bundle(&bundle)?;
    }
    let sched = run.config.schedule()?;
    let out = edit_with_bundle(Some(&bundle), &[&query], &run.model, &sched, a.steps, a.seed)?;
    save_image(&out[0], &a.out)?;
    write_json(&echo, &a.out.with_extension("json"))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn load_pairs_images(path: &Option<PathBuf>) -> Result<Vec<loc_core::synthdata::PairRecord>> {
    Ok(match path {
        Some(p) => load_pair_dataset(p)?.1,
        None => Vec::new(),
    })
}

fn cmd_eval(a: Eval) -> Result<()> {
    let run = load_run_checkpoint(&a.ckpt)?;
    let (_, quads) = load_quad_evalset(&a.quads)?;
    let enc = match &a.encoder_ckpt {
        Some(p) => MetricEncoder::from_hypernet(&load_run_checkpoint(p)?.hypernet)?,
        None => MetricEncoder::from_hypernet(&run.hypernet)?,
    };
    let pairs = load_pairs_images(&a.pairs)?;
    let held: Vec<_> = pairs.iter().map(|r| (&r.before, &r.after)).collect();
    let opts = EvalOptions {
        name: "eval",
        steps: a.steps,
        seed: a.seed,
        config: serde_json::json!({
            "run": run.config.to_json(),
            "ckpt": a.ckpt,
            "quads": a.quads,
            "encoder_ckpt": a.encoder_ckpt,
            "step": run.manifest.step,
        }),
        consistency_pairs: &held,
    };
    let report = evaluate(&quads, &run.hypernet, &run.model, &run.config.schedule()?, &enc, &opts)?;
    report.save_json(&a.out)?;
    let g = &report.aggregate;
    println!(
        "{} quads: align {:?}, fidelity {:.5}, leak margin {:.5}, positive fraction {:.3}",
        g.count, g.align_score, g.fidelity_err, g.leak_margin, g.positive_margin_fraction
    );
    Ok(())
}

fn cmd_ablate(a: Ablate) -> Result<bool> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.data.stage1 = Some(a.data.clone());
    cfg.data.eval_quads = Some(a.quads.clone());
    cfg.validate()?;
    let (_, quads) = load_quad_evalset(&a.quads)?;
    let (_, pairs) = load_pair_dataset(&a.data)?;
    let model = obtain_generator(&cfg, a.generator.as_deref(), &a.data, &a.out)?;
    let held = load_pairs_images(&a.pairs)?;
    let opts = AblationOptions {
        include_exchange: a.exchange,
        eval_steps: a.steps,
        eval_seed: a.seed,
        out_dir: Some(a.out.clone()),
    };
    let (report, _) = run_ablation(&pairs, &quads, &held, &model, &cfg, &opts)?;
    let verdicts = report.verdicts();
    for (what, ok) in &verdicts {
        println!("{} {what}", if *ok { "PASS" } else { "FAIL" });
    }
    let all = verdicts.iter().all(|v| v.1);
    println!("ablation: {}", if all { "PASS" } else { "FAIL" });
    Ok(all)
}

fn init_threads() {
    if let Ok(v) = std::env::var("LOC_NUM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                // candle's kernels size their pool from this variable.
                std::env::set_var("RAYON_NUM_THREADS", n.to_string());
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => log::warn!("ignoring LOC_NUM_THREADS={v}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    init_threads();
    let result = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Edit(a) => cmd_edit(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
