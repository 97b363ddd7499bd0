//! `t2i`: ingest a model catalog, train and align the routing policy,
//! evaluate it and query it.

mod config;

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use config::Loaded;
use t2i_core::catalog::textgen::text_clients;
use t2i_core::catalog::{ingest, read_records, split_dataset, Registry};
use t2i_core::evaluation::{
    decode_response, directional_checks, evaluate, timing_probe, Decoded, EvalConfig, Policies,
};
use t2i_core::pipeline::{instructions, run_rrhf, run_sft};
use t2i_core::policy::Policy;
use t2i_core::schema::{parse_pair, serialize_api, serialize_pair, InstructionApiPair};
use t2i_core::scoring::{backends, Backends};
use t2i_core::synth::style_world;

#[derive(Parser)]
#[command(name = "t2i", version, about = "Prompt-to-API routing for text-to-image generation")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter raw records, build the registry and write the data splits.
    Ingest(Common),
    /// Supervised training on the train split.
    TrainSft(Common),
    /// Ranking alignment of the supervised checkpoint on the align split.
    Align(Common),
    /// Score all comparison variants on the eval split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Fail unless the directional checks hold.
        #[arg(long)]
        check: bool,
        /// Add mean decode latency to the report (not reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Recommend an API for a prompt with the aligned checkpoint.
    Recommend {
        #[command(flatten)]
        common: Common,
        /// Print one JSON object instead of text.
        #[arg(long)]
        record: bool,
        #[arg(long, default_value = "")]
        negative: String,
        prompt: Vec<String>,
    },
    /// Write a synthetic catalog, its scoring world and a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Ingest(c) => cmd_ingest(&load(&c)?),
        Command::TrainSft(c) => cmd_train_sft(&load(&c)?),
        Command::Align(c) => cmd_align(&load(&c)?),
        Command::Evaluate { common, check, timing } => return cmd_evaluate(&load(&common)?, check, timing),
        Command::Recommend { common, record, negative, prompt } => {
            cmd_recommend(&load(&common)?, &prompt.join(" "), &negative, record)
        }
        Command::Synth { out, seed } => cmd_synth(&out, seed),
    }
    .map(|()| ExitCode::SUCCESS)
}

fn load(c: &Common) -> Result<Loaded> {
    Loaded::load(&c.config, c.seed)
}

/// Writes via a sibling temporary file so readers never see partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|i| serde_json::to_string(&i).expect("serializes") + "\n").collect()
}

fn pairs_jsonl(pairs: &[InstructionApiPair]) -> String {
    jsonl(pairs.iter().map(serialize_pair))
}

fn read_pairs(path: &Path, registry: &Registry) -> Result<Vec<InstructionApiPair>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(parse_pair(&v, registry.samplers()).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn read_registry(run: &Loaded) -> Result<Registry> {
    let path = run.file("registry.json");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("{} missing; run `t2i ingest` first", path.display()))?;
    Registry::from_json(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn read_policy(run: &Loaded, name: &str, stage: &str) -> Result<Policy> {
    let path = run.file(name);
    if !path.exists() {
        bail!("{} missing; run `t2i {stage}` first", path.display());
    }
    Policy::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn make_backends(run: &Loaded) -> Result<Backends> {
    backends().create(&run.config.backend.name, &run.backend_options()).context("backend")
}

fn cmd_ingest(run: &Loaded) -> Result<()> {
    let records_path = run.resolve(&run.config.paths.records);
    let f = File::open(&records_path).with_context(|| format!("ingest: opening {}", records_path.display()))?;
    let records = read_records(BufReader::new(f)).context("ingest: reading records")?;
    let client = text_clients().create(&run.config.textgen.name, &run.config.textgen.options).context("ingest")?;
    let out = ingest(&records, &run.config.quality, &Default::default(), client.as_ref()).context("ingest")?;
    let splits = split_dataset(&out.pairs, run.seed).context("ingest: split")?;

    std::fs::create_dir_all(&run.run_dir).with_context(|| format!("creating {}", run.run_dir.display()))?;
    write_atomic(&run.file("config.json"), serde_json::to_string_pretty(&run.config)?.as_bytes())?;
    write_atomic(&run.file("registry.json"), out.registry.to_json().as_bytes())?;
    write_atomic(&run.file("train.jsonl"), pairs_jsonl(&splits.train).as_bytes())?;
    write_atomic(&run.file("align.jsonl"), pairs_jsonl(&splits.align).as_bytes())?;
    write_atomic(&run.file("eval.jsonl"), pairs_jsonl(&splits.eval).as_bytes())?;
    write_atomic(&run.file("ingest_summary.json"), serde_json::to_string_pretty(&out.summary)?.as_bytes())?;
    println!(
        "ingested {} models, {} pairs (train {}, align {}, eval {}) -> {}",
        out.registry.len(),
        out.pairs.len(),
        splits.train.len(),
        splits.align.len(),
        splits.eval.len(),
        run.run_dir.display()
    );
    Ok(())
}

fn splits_from_disk(run: &Loaded, registry: &Registry) -> Result<t2i_core::catalog::Splits> {
    Ok(t2i_core::catalog::Splits {
        train: read_pairs(&run.file("train.jsonl"), registry)?,
        align: read_pairs(&run.file("align.jsonl"), registry)?,
        eval: read_pairs(&run.file("eval.jsonl"), registry)?,
    })
}

fn cmd_train_sft(run: &Loaded) -> Result<()> {
    let registry = read_registry(run).context("train-sft")?;
    let splits = splits_from_disk(run, &registry).context("train-sft")?;
    let (policy, log) = run_sft(&registry, &splits, &run.config.train).context("train-sft")?;
    let path = run.file("sft.ckpt.json");
    policy.save(&path).context("train-sft: saving checkpoint")?;
    write_atomic(&run.file("sft_log.jsonl"), jsonl(&log).as_bytes())?;
    let last = log.last().map_or(f64::NAN, |e| e.loss);
    println!("sft: {} epochs, final loss {last:.4} -> {}", log.len(), path.display());
    Ok(())
}

fn cmd_align(run: &Loaded) -> Result<()> {
    let registry = read_registry(run).context("align")?;
    let sft = read_policy(run, "sft.ckpt.json", "train-sft").context("align")?;
    let splits = splits_from_disk(run, &registry).context("align")?;
    let b = make_backends(run).context("align")?;
    let (policy, log) = run_rrhf(&sft, &registry, &splits, &b, &run.config.train).context("align")?;
    let path = run.file("rrhf.ckpt.json");
    policy.save(&path).context("align: saving checkpoint")?;
    write_atomic(&run.file("rrhf_log.jsonl"), jsonl(&log).as_bytes())?;
    for e in &log {
        println!(
            "epoch {:>3}  loss {:.4}  rank {:.4}  ce {:.4}  raw hallucination {:.3}  best score {:.4}",
            e.epoch, e.mean_loss, e.mean_rank_loss, e.mean_ce_loss, e.raw_hallucination_rate, e.mean_best_score
        );
    }
    println!("align -> {}", path.display());
    Ok(())
}

fn cmd_evaluate(run: &Loaded, check: bool, timing: bool) -> Result<ExitCode> {
    let registry = read_registry(run).context("evaluate")?;
    let sft = read_policy(run, "sft.ckpt.json", "train-sft").context("evaluate")?;
    let rrhf = read_policy(run, "rrhf.ckpt.json", "align").context("evaluate")?;
    let eval = read_pairs(&run.file("eval.jsonl"), &registry).context("evaluate")?;
    let b = make_backends(run).context("evaluate")?;
    let cfg = EvalConfig { n_images: run.config.eval.n_images, seed: run.seed, ..Default::default() };
    let mut report = evaluate(&eval, Policies { sft: &sft, rrhf: &rrhf }, &registry, &b, &cfg).context("evaluate")?;
    if timing {
        report.wall_time_per_response = Some(timing_probe(&rrhf, &instructions(&eval), &registry)?);
    }
    write_atomic(&run.file("report.jsonl"), report.to_jsonl().as_bytes())?;
    write_atomic(&run.file("report.txt"), report.table().as_bytes())?;
    print!("{}", report.table());
    if report.partial {
        return Ok(ExitCode::FAILURE);
    }
    if check {
        let checks = directional_checks(&report);
        for c in &checks {
            println!("[{}] {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        if checks.iter().any(|c| !c.passed) {
            eprintln!("error: directional checks failed");
            return Ok(ExitCode::from(2));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_recommend(run: &Loaded, prompt: &str, negative: &str, record: bool) -> Result<()> {
    let registry = read_registry(run).context("recommend")?;
    let policy = read_policy(run, "rrhf.ckpt.json", "align").context("recommend")?;
    let (api, warning) = match decode_response(&policy, prompt, &registry)? {
        Decoded::Valid(api) => (api, None),
        Decoded::Hallucinated(reason) => {
            let api = registry.default_response().ok_or_else(|| anyhow!("recommend: registry is empty"))?;
            (api, Some(reason))
        }
    };
    let mut out = std::io::stdout().lock();
    if record {
        let line = json!({
            "prompt": prompt,
            "negative_prompt": negative,
            "api": serialize_api(&api),
            "fallback": warning.is_some(),
            "warning": warning,
        });
        writeln!(out, "{line}")?;
    } else {
        if let Some(w) = &warning {
            writeln!(out, "warning: policy response rejected ({w}); showing the default response")?;
        }
        writeln!(out, "model:           {}", api.info.model)?;
        writeln!(out, "type:            {}", api.info.kind.as_str())?;
        writeln!(out, "base_model:      {}", api.info.base_model.as_str())?;
        writeln!(out, "size:            {}x{}", api.params.width, api.params.height)?;
        writeln!(out, "sampling_method: {}", api.params.sampling_method)?;
        writeln!(out, "sampling_steps:  {}", api.params.sampling_steps)?;
        writeln!(out, "cfg_scale:       {}", api.params.cfg_scale)?;
    }
    Ok(())
}

fn cmd_synth(out: &Path, seed: u64) -> Result<()> {
    let w = style_world(seed);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join("records.jsonl"), jsonl(&w.records).as_bytes())?;
    write_atomic(&out.join("world.json"), serde_json::to_string_pretty(&w.spec)?.as_bytes())?;
    let config = format!(
        "seed = {seed}\n\n[paths]\nrecords = \"records.jsonl\"\nruns = \"runs\"\n\n[backend]\nname = \"styleworld\"\noptions = {{ world = \"world.json\" }}\n"
    );
    write_atomic(&out.join("run.toml"), config.as_bytes())?;
    let images: usize = w.records.iter().map(|r| r.sample_images.len()).sum();
    println!("synth: {} models, {images} images -> {}", w.records.len(), out.display());
    Ok(())
}
