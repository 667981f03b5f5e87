//! `artaug` subcommands. Every command prints a JSON object with `--json`
//! and a short text report otherwise; exit codes are 0 on success, 1 on a
//! usage error and 2 on a runtime error.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use artaug::curation::{serve, summarize, Manifest, ReviewServer, Scores};
use artaug::diffusion::DenoiserParams;
use artaug::interaction::interactive_generate;
use artaug::lora::{lora_fuse, LoraParams};
use artaug::orchestrator::{
    evaluate, export_merged, init_run, run_iteration, run_loop, should_stop, train_base_model, EvalConfig,
    IterationStats, RunConfig, RunDir, RunState,
};
use artaug::world::PromptSpec;
use artaug::{Error, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(
    name = "artaug",
    version,
    about = "Interaction-driven enhancement of a toy diffusion model"
)]
pub struct Cli {
    /// Print one JSON object on stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a run directory with its config.json.
    Init {
        run: PathBuf,
        /// Start from this config file instead of the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        auto_accept: bool,
        /// Prompts sampled per iteration.
        #[arg(long)]
        prompts: Option<usize>,
        #[arg(long)]
        max_iters: Option<u32>,
        #[arg(long)]
        alpha: Option<f32>,
    },
    /// Train the base model of a run.
    TrainBase { run: PathBuf },
    /// Generate one before/after pair for a prompt with the run's current model.
    Interact {
        run: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the next iteration.
    RunIteration {
        run: PathBuf,
        /// Serve the review API on this port while the iteration waits for review.
        #[arg(long)]
        serve_review: Option<u16>,
    },
    /// Run iterations until a stop rule fires.
    Loop {
        run: PathBuf,
        #[arg(long)]
        serve_review: Option<u16>,
    },
    /// Review API.
    Review {
        #[command(subcommand)]
        command: ReviewCommand,
    },
    /// Compare two models on held-out prompts. A model is a denoiser .atw
    /// path or one of base, current, iter<k> (iter0 is the base),
    /// merged-fused, looked up in --run or the working directory.
    Evaluate {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        prompts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Merge every iteration's update into merged.atw.
    ExportLora { run: PathBuf },
    /// Per-iteration statistics of a run.
    Stats { run: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum ReviewCommand {
    /// Serve the review API for a run until interrupted.
    Serve {
        run: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

/// What a command reports: the JSON form and the text form.
pub struct Outcome {
    pub json: Value,
    pub text: String,
}

impl Outcome {
    fn new(json: Value, text: impl Into<String>) -> Self {
        Self {
            json,
            text: text.into(),
        }
    }

    fn already_done(mut json: Value, what: &str) -> Self {
        json["already_done"] = Value::Bool(true);
        Self::new(json, format!("{what}: already done"))
    }
}

fn completed_iterations(dir: &RunDir) -> Result<Vec<IterationStats>> {
    let mut out = Vec::new();
    for k in 1.. {
        let p = dir.stats(k);
        if !p.exists() {
            break;
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
        out.push(serde_json::from_str(&text)?);
    }
    Ok(out)
}

/// The newest completed model of a run, or its base.
fn latest_model(dir: &RunDir) -> Result<(DenoiserParams, u32)> {
    let k = completed_iterations(dir)?.len() as u32;
    let path = if k == 0 { dir.base() } else { dir.model(k) };
    Ok((DenoiserParams::load(&path)?, k))
}

/// Named models resolve against `run`, or the working directory without one.
fn resolve_model(run: Option<&Path>, spec: &str) -> Result<DenoiserParams> {
    let root = run.unwrap_or(Path::new("."));
    let dir = RunDir::new(root);
    match spec {
        "base" => return DenoiserParams::load(&dir.base()),
        "current" => return latest_model(&dir).map(|(m, _)| m),
        "merged-fused" => {
            let base = DenoiserParams::load(&dir.base())?;
            return lora_fuse(&base, &LoraParams::load(&dir.merged())?, 1.0);
        }
        _ => {}
    }
    if let Some(k) = spec.strip_prefix("iter").and_then(|s| s.parse::<u32>().ok()) {
        let path = if k == 0 { dir.base() } else { dir.model(k) };
        return DenoiserParams::load(&path);
    }
    let inside = root.join(spec);
    if inside.exists() {
        return DenoiserParams::load(&inside);
    }
    DenoiserParams::load(Path::new(spec))
}

fn stats_text(rows: &[IterationStats]) -> String {
    let mut s = format!(
        "{:>4} {:>9} {:>5} {:>8} {:>9} {:>9} {:>9} {:>9} {:>7} {:>4}\n",
        "iter", "generated", "kept", "accepted", "aes_pre", "aes_post", "cons_pre", "cons_post", "cosine", "J"
    );
    for r in rows {
        let p = &r.pairs;
        s += &format!(
            "{:>4} {:>9} {:>5} {:>8} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>7.4} {:>4}\n",
            p.iteration,
            p.generated,
            p.auto_kept,
            p.accepted,
            p.mean_aesthetic_before,
            p.mean_aesthetic_after,
            p.mean_consistency_before,
            p.mean_consistency_after,
            p.mean_image_cosine,
            r.j
        );
    }
    s
}

fn start_review(state: &RunState, port: Option<u16>) -> Result<Option<ReviewServer>> {
    port.map(|p| {
        let server = ReviewServer::start(
            state.dir.root().to_path_buf(),
            state.manifest.clone(),
            SocketAddr::from(([127, 0, 0, 1], p)),
        )?;
        info!("review API at {}", server.url());
        Ok(server)
    })
    .transpose()
}

fn slug(text: &str) -> String {
    text.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect()
}

pub fn run_command(command: Command) -> Result<Outcome> {
    match command {
        Command::Init {
            run,
            config,
            seed,
            auto_accept,
            prompts,
            max_iters,
            alpha,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.auto_accept |= auto_accept;
            if let Some(n) = prompts {
                cfg.prompts_per_iteration = n;
            }
            if let Some(n) = max_iters {
                cfg.max_iters = n;
            }
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            let json = json!({ "run": run, "config": cfg });
            if init_run(&run, &cfg)? {
                Ok(Outcome::new(json, format!("initialized {}", run.display())))
            } else {
                Ok(Outcome::already_done(json, "init"))
            }
        }
        Command::TrainBase { run } => {
            let path = RunDir::new(&run).base();
            match train_base_model(&run)? {
                Some(report) => Ok(Outcome::new(
                    json!({ "base": path, "report": report }),
                    format!(
                        "trained {}: validation loss {:.4} -> {:.4}",
                        path.display(),
                        report.initial_val_loss,
                        report.final_val_loss
                    ),
                )),
                None => Ok(Outcome::already_done(json!({ "base": path }), "train-base")),
            }
        }
        Command::Interact { run, prompt, seed } => {
            let prompt = PromptSpec::parse(&prompt)?;
            let dir = RunDir::new(&run);
            let cfg = RunConfig::load(&dir.config())?;
            let out = run.join("interact");
            let stem = format!("seed{seed}-{}", slug(&prompt.text()));
            let report = out.join(format!("{stem}.json"));
            if report.exists() {
                let json: Value = serde_json::from_str(&std::fs::read_to_string(&report).map_err(|e| Error::Io {
                    path: report.clone(),
                    source: e,
                })?)?;
                return Ok(Outcome::already_done(json, "interact"));
            }
            let (model, k) = latest_model(&dir)?;
            let r = interactive_generate(&model, None, &prompt, seed, &cfg.critic, cfg.sampler_steps)?;
            let (before, after) = (r.before.quantized(), r.after.quantized());
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let (bp, ap) = (
                out.join(format!("{stem}.before.pgm")),
                out.join(format!("{stem}.after.pgm")),
            );
            before.save_pgm(&bp)?;
            after.save_pgm(&ap)?;
            let scores = Scores::compute(&before, &after, &prompt);
            let json = json!({
                "prompt": prompt.text(),
                "seed": seed,
                "model_iteration": k,
                "before": bp,
                "after": ap,
                "critic": r.critic_used,
                "suggestions": r.suggestions,
                "scores": scores,
            });
            std::fs::write(&report, serde_json::to_string_pretty(&json)?).map_err(|e| Error::Io {
                path: report.clone(),
                source: e,
            })?;
            Ok(Outcome::new(
                json,
                format!(
                    "{} suggestions; aesthetic {:.4} -> {:.4}, consistency {:.4} -> {:.4}\nwrote {} and {}",
                    r.suggestions.len(),
                    scores.aesthetic_before,
                    scores.aesthetic_after,
                    scores.consistency_before,
                    scores.consistency_after,
                    bp.display(),
                    ap.display()
                ),
            ))
        }
        Command::RunIteration { run, serve_review } => {
            let mut state = RunState::open(&run)?;
            if let Some(reason) = should_stop(&state.history, &state.config) {
                return Ok(Outcome::already_done(
                    json!({ "completed": state.completed(), "stop": reason }),
                    "run-iteration (stop rule reached)",
                ));
            }
            let _server = start_review(&state, serve_review)?;
            let stats = run_iteration(&mut state)?;
            let text = stats_text(std::slice::from_ref(&stats));
            Ok(Outcome::new(json!({ "stats": stats }), text))
        }
        Command::Loop { run, serve_review } => {
            let mut state = RunState::open(&run)?;
            let _server = start_review(&state, serve_review)?;
            let outcome = run_loop(&mut state)?;
            let json = json!({ "ran": outcome.ran, "stop": outcome.reason, "completed": state.completed() });
            if outcome.ran.is_empty() {
                return Ok(Outcome::already_done(json, "loop"));
            }
            let text = format!("{}stopped: {:?}", stats_text(&outcome.ran), outcome.reason);
            Ok(Outcome::new(json, text))
        }
        Command::Review {
            command: ReviewCommand::Serve { run, port, host },
        } => {
            let dir = RunDir::new(&run);
            if !dir.config().exists() {
                return Err(Error::Contract(format!("{} is not a run directory", run.display())));
            }
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| Error::Contract(format!("bad address {host}:{port}: {e}")))?;
            serve(run.clone(), Manifest::new(dir.manifest()), addr)?;
            Ok(Outcome::new(json!({ "served": run }), "review server stopped"))
        }
        Command::Evaluate {
            a,
            b,
            run,
            prompts,
            seed,
            steps,
        } => {
            let here = RunDir::new(".");
            let cfg = match &run {
                Some(r) => RunConfig::load(&RunDir::new(r).config())?,
                None if here.config().exists() => RunConfig::load(&here.config())?,
                None => RunConfig::default(),
            };
            let eval = EvalConfig {
                prompts: prompts.unwrap_or(cfg.eval.prompts),
                seed: seed.unwrap_or(cfg.eval.seed),
            };
            if eval.prompts == 0 {
                return Err(Error::Contract("--prompts must be ≥ 1".into()));
            }
            let ma = resolve_model(run.as_deref(), &a)?;
            let mb = resolve_model(run.as_deref(), &b)?;
            let report = evaluate(&ma, &mb, &eval, steps.unwrap_or(cfg.sampler_steps), cfg.parallelism)?;
            let text = report.table();
            Ok(Outcome::new(json!({ "a": a, "b": b, "report": report }), text))
        }
        Command::ExportLora { run } => {
            let state = RunState::open(&run)?;
            let path = state.dir.merged();
            let iterations: Vec<u32> = state.updates.iter().map(|(k, _)| *k).collect();
            if path.exists() {
                let existing = LoraParams::load(&path)?;
                if existing.meta.get("iterations") == Some(&json!(iterations)) {
                    return Ok(Outcome::already_done(
                        json!({ "merged": path, "iterations": iterations }),
                        "export-lora",
                    ));
                }
            }
            let merged = export_merged(&state)?;
            Ok(Outcome::new(
                json!({ "merged": path, "iterations": iterations, "rank": merged.rank }),
                format!(
                    "wrote {} (rank {}, iterations {:?})",
                    path.display(),
                    merged.rank,
                    iterations
                ),
            ))
        }
        Command::Stats { run } => {
            let dir = RunDir::new(&run);
            let cfg = RunConfig::load(&dir.config())?;
            let rows = completed_iterations(&dir)?;
            let pairs = summarize(Manifest::new(dir.manifest()).latest_view()?.values());
            let stop = should_stop(&rows, &cfg);
            let mut text = stats_text(&rows);
            if let Some(r) = stop {
                text += &format!("stop rule reached: {r:?}\n");
            }
            Ok(Outcome::new(
                json!({ "iterations": rows, "manifest": pairs, "stop": stop }),
                text,
            ))
        }
    }
}

/// Parses `args` (including the program name), runs the command, prints its
/// outcome, and returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .try_init();
    match run_command(cli.command) {
        Ok(out) => {
            if cli.json {
                println!("{}", out.json);
            } else {
                println!("{}", out.text.trim_end());
            }
            0
        }
        Err(e) => {
            if cli.json {
                println!("{}", json!({ "error": e.to_string() }));
            }
            eprintln!("error: {e}");
            2
        }
    }
}
