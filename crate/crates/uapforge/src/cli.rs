//! Command-line orchestration: attack-image, attack-text, evaluate,
//! report.
//!
//! Every run resolves its configuration (flags win over `UAPFORGE_SEED`,
//! which wins over the file), then writes a `*.resolved.toml` snapshot
//! next to its artifacts so the exact settings are always recoverable.
//! Relative paths are taken against `--workdir`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::adapter::{EncoderBundle, ToyDualEncoder};
use crate::config::{load_run_config, ResolvedConfig, RunConfig};
use crate::dataset::{load_manifest, Geometry, PairedDataset};
use crate::error::{Result, UapError};
use crate::evaluation::{evaluate_attack, AttackReport};
use crate::objective::DivergenceConfig;
use crate::optimizer::run_image_attack;
use crate::persist::{
    load_report, load_triggers, load_uap, save_report, save_triggers, save_uap, write_trace_csv,
    TriggerArtifact,
};
use crate::text_attack::{mine_triggers, TextTrigger};

pub const SEED_ENV_VAR: &str = "UAPFORGE_SEED";
const TOY_EMBED_DIM: usize = 32;

#[derive(Parser)]
#[command(
    name = "uapforge",
    version,
    about = "Universal multimodal perturbations for dual-encoder vision-language models"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSONL manifest of the training/evaluation corpus.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Encoder adapter, e.g. "toy" or "toy:<seed>".
    #[arg(long)]
    adapter: Option<String>,
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base directory for all relative paths.
    #[arg(long, default_value = ".")]
    workdir: PathBuf,
    /// Seed override (beats UAPFORGE_SEED and the config file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a universal image perturbation.
    AttackImage {
        #[command(flatten)]
        common: Common,
        /// Output UAP container.
        #[arg(long, default_value = "uap.bin")]
        out: PathBuf,
    },
    /// Mine universal trigger words.
    AttackText {
        #[command(flatten)]
        common: Common,
        /// Output trigger lexicon.
        #[arg(long, default_value = "triggers.json")]
        out: PathBuf,
    },
    /// Measure clean/adversarial retrieval and attack success rates.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// UAP container to apply (optional).
        #[arg(long)]
        uap: Option<PathBuf>,
        /// Trigger artifact to apply (optional).
        #[arg(long)]
        triggers: Option<PathBuf>,
        /// Comma-separated ranks, e.g. "1,5,10"; defaults to the config.
        #[arg(long)]
        k: Option<String>,
        /// Output report.
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
    },
    /// Render the ASR table from a saved report.
    Report {
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
        #[arg(long, default_value = ".")]
        workdir: PathBuf,
    },
}

fn resolve_path(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV_VAR) {
        Err(_) => Ok(None),
        Ok(raw) => raw.parse::<u64>().map(Some).map_err(|_| {
            UapError::Config(format!(
                "{SEED_ENV_VAR} must be an unsigned integer, got '{raw}'"
            ))
        }),
    }
}

/// Instantiate an encoder bundle by name.
pub fn build_adapter(name: &str, geometry: Geometry) -> Result<Box<dyn EncoderBundle>> {
    if name == "toy" {
        return Ok(Box::new(ToyDualEncoder::new(0, geometry, TOY_EMBED_DIM)));
    }
    if let Some(rest) = name.strip_prefix("toy:") {
        let seed: u64 = rest.parse().map_err(|_| {
            UapError::UnknownAdapter(format!("{name} (seed must be an unsigned integer)"))
        })?;
        return Ok(Box::new(ToyDualEncoder::new(seed, geometry, TOY_EMBED_DIM)));
    }
    if name.starts_with("external:") {
        return Err(UapError::UnknownAdapter(format!(
            "{name}: external adapters are linked in by the embedding application; \
             this binary ships only the toy bundle"
        )));
    }
    Err(UapError::UnknownAdapter(name.to_string()))
}

struct Session {
    resolved: ResolvedConfig,
    dataset: PairedDataset,
    bundle: Box<dyn EncoderBundle>,
    workdir: PathBuf,
}

fn open_session(common: &Common) -> Result<Session> {
    let workdir = common.workdir.clone();
    let file_cfg = match &common.config {
        Some(p) => load_run_config(&resolve_path(&workdir, p))?,
        None => RunConfig::default(),
    };
    let resolved = file_cfg.resolve(
        common.manifest.clone(),
        common.adapter.clone(),
        common.seed,
        env_seed()?,
    )?;
    let manifest_path = resolve_path(&workdir, &resolved.manifest);
    let dataset = load_manifest(&manifest_path)?;
    let bundle = build_adapter(&resolved.adapter, dataset.geometry)?;
    Ok(Session {
        resolved,
        dataset,
        bundle,
        workdir,
    })
}

/// Write the resolved-config snapshot next to `artifact` and return its
/// digest.
fn write_snapshot(resolved: &ResolvedConfig, artifact: &Path) -> Result<String> {
    let text = resolved.snapshot_toml()?;
    let stem = artifact
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "run".to_string());
    let path = artifact.with_file_name(format!("{stem}.resolved.toml"));
    std::fs::write(&path, &text)?;
    let digest = Sha256::digest(text.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(format!("sha256:{hex}"))
}

fn parse_ks(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| UapError::Config(format!("invalid rank '{p}' in --k")))
        })
        .collect()
}

fn print_report(report: &AttackReport) {
    println!("adapter:       {}", report.adapter);
    println!("config digest: {}", report.config_digest);
    println!(
        "{:<10} {:>4} {:>12} {:>12} {:>10}",
        "direction", "K", "clean R@K", "adv R@K", "ASR@K"
    );
    let fmt_asr = |v: Option<f64>| match v {
        Some(v) => format!("{v:.2}"),
        None => "n/a".to_string(),
    };
    for k in &report.ks {
        let key = k.to_string();
        let clean = &report.clean[&key];
        let adv = &report.adversarial[&key];
        let asr = &report.asr[&key];
        println!(
            "{:<10} {:>4} {:>12.2} {:>12.2} {:>10}",
            "I2T",
            k,
            clean.i2t,
            adv.i2t,
            fmt_asr(asr.i2t)
        );
        println!(
            "{:<10} {:>4} {:>12.2} {:>12.2} {:>10}",
            "T2I",
            k,
            clean.t2i,
            adv.t2i,
            fmt_asr(asr.t2i)
        );
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::AttackImage { common, out } => {
            let session = open_session(&common)?;
            let out = resolve_path(&session.workdir, &out);
            let attack_cfg = session.resolved.attack_config()?;
            let (uap, trace) =
                run_image_attack(&session.dataset, session.bundle.as_ref(), &attack_cfg)?;
            save_uap(&uap, &out)?;
            let trace_path = out.with_file_name("trace.csv");
            write_trace_csv(&trace, &trace_path)?;
            write_snapshot(&session.resolved, &out)?;
            let last = trace.last().expect("at least one step");
            println!(
                "attack-image: {} steps, final l1 {:.4}, l2 {:.4}, linf {:.6}",
                trace.len(),
                last.l1,
                last.l2,
                last.linf
            );
            println!("wrote {} and {}", out.display(), trace_path.display());
            Ok(())
        }
        Command::AttackText { common, out } => {
            let session = open_session(&common)?;
            let out = resolve_path(&session.workdir, &out);
            let mining = session.resolved.mining_config()?;
            let (lexicon, _) = mine_triggers(&session.dataset, session.bundle.as_ref(), &mining)?;
            let top = lexicon
                .top()
                .ok_or_else(|| UapError::Contract("mined an empty lexicon".into()))?;
            let artifact = TriggerArtifact {
                trigger: TextTrigger {
                    token: top.token.clone(),
                    budget: session.resolved.run.epsilon_t,
                    policy: session.resolved.run.text.policy,
                },
                ranked: lexicon.entries.clone(),
            };
            save_triggers(&artifact, &out)?;
            write_snapshot(&session.resolved, &out)?;
            println!(
                "attack-text: trigger '{}' (score {:.4}) from {} candidates",
                artifact.trigger.token,
                top.score,
                artifact.ranked.len()
            );
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Evaluate {
            common,
            uap,
            triggers,
            k,
            report,
        } => {
            let session = open_session(&common)?;
            let report_path = resolve_path(&session.workdir, &report);
            let uap = uap
                .map(|p| load_uap(&resolve_path(&session.workdir, &p)))
                .transpose()?;
            let trigger = triggers
                .map(|p| load_triggers(&resolve_path(&session.workdir, &p)))
                .transpose()?
                .map(|a| a.trigger);
            let ks = match k {
                Some(raw) => parse_ks(&raw)?,
                None => session.resolved.run.eval.ks.clone(),
            };
            let digest = write_snapshot(&session.resolved, &report_path)?;
            let divergence = DivergenceConfig::new(session.resolved.run.loss.temperature)?;
            let result = evaluate_attack(
                session.bundle.as_ref(),
                &session.dataset,
                uap.as_ref(),
                trigger.as_ref(),
                &ks,
                &divergence,
                session.resolved.run.seed,
                digest,
            )?;
            save_report(&result, &report_path)?;
            print_report(&result);
            println!("wrote {}", report_path.display());
            Ok(())
        }
        Command::Report { report, workdir } => {
            let report = load_report(&resolve_path(&workdir, &report))?;
            print_report(&report);
            Ok(())
        }
    }
}

pub fn run_from_args() -> Result<()> {
    run(Cli::parse())
}
