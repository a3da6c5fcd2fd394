mod bench;
mod config;

use std::fs;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use oblix_core::costmodel::CostReport;
use oblix_core::dataset::{self, TemplateSet};
use oblix_core::oblivious::AttributeLexicon;
use oblix_core::protocol::{run_session, Server, SimulatedTransport, TcpTransport, Transport};
use oblix_core::security::{
    check_indistinguishability, distinguisher_experiment, transcript_adversaries, OracleAdversary,
    Ordering,
};

use config::{RunConfig, TransportKind};

#[derive(Parser, Debug)]
#[command(name = "oblix", version, about = "Oblivious cloud-device hybrid generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one hybrid generation and write the image and cost report.
    Generate(RunArgs),
    /// Answer generation requests on the configured socket address.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `server.address`.
        #[arg(long)]
        address: Option<String>,
    },
    /// Like `generate`, always over the socket transport.
    Client(RunArgs),
    /// Sweep a grid of switch points, gates and candidate counts.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// e.g. `k=0,10,25;r=4,26;s=6,26;reuse=0,1;n=1,2,6`
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Emit prompt records from the portrait templates.
    Dataset {
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Number of sampled records; omit for the full enumeration.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check transcript equality over the prompt corpus and run the
    /// distinguisher experiments.
    Attest {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Seeds per prompt.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the configured cloud or device weights to a file.
    ExportWeights {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        device: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Image path (portable pixmap).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cost report path (JSON lines).
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OBLIX_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args, false),
        Command::Client(args) => cmd_generate(args, true),
        Command::Serve { config, address } => cmd_serve(config.as_deref(), address),
        Command::Bench {
            config,
            grid,
            out,
            seed,
        } => {
            let rc = RunConfig::load(config.as_deref())?.with_seed(seed);
            let grid = bench::Grid::parse(&grid)?;
            let records = bench::run_grid(&rc, &grid)?;
            let mut text = String::new();
            for r in &records {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            write_or_print(out.as_deref(), text.as_bytes())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Dataset {
            templates,
            lexicon,
            count,
            seed,
            out,
        } => {
            let lex = match lexicon {
                Some(p) => AttributeLexicon::parse(
                    &fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                )?,
                None => AttributeLexicon::default(),
            };
            let set = load_templates(templates.as_deref(), &lex)?;
            let records = match count {
                Some(n) => set.sample(n, seed),
                None => set.enumerate(),
            };
            dataset::verify_redetection(&records, &lex)?;
            write_or_print(out.as_deref(), dataset::to_json_lines(&records).as_bytes())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Attest {
            config,
            templates,
            seeds,
            trials,
            seed,
        } => {
            let rc = RunConfig::load(config.as_deref())?.with_seed(seed);
            cmd_attest(&rc, templates.as_deref(), seeds, trials)
        }
        Command::ExportWeights {
            config,
            device,
            out,
        } => {
            let rc = RunConfig::load(config.as_deref())?;
            let w = if device { &rc.device } else { &rc.cloud };
            fs::write(&out, w.to_bytes()).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} ({:016x})", out.display(), w.fingerprint());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_templates(path: Option<&Path>, lex: &AttributeLexicon) -> Result<TemplateSet> {
    Ok(match path {
        Some(p) => TemplateSet::parse(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            lex,
        )?,
        None => TemplateSet::parse(include_str!("../../core/assets/templates.yaml"), lex)?,
    })
}

fn write_or_print(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn cmd_generate(args: RunArgs, force_tcp: bool) -> Result<ExitCode> {
    let rc = RunConfig::load(args.config.as_deref())?.with_seed(args.seed);
    let prompt = args
        .prompt
        .or_else(|| rc.file.prompt.clone())
        .context("no prompt given (use --prompt or set `prompt` in the config)")?;
    let tcp = force_tcp || rc.file.server.transport == TransportKind::Tcp;
    let mut transport: Box<dyn Transport> = if tcp {
        Box::new(TcpTransport::new(rc.file.server.address.clone()))
    } else {
        let server = Server::new().with_model(rc.client.model_id.clone(), Arc::clone(&rc.cloud));
        Box::new(SimulatedTransport::new(Arc::new(server), rc.file.channel))
    };
    let out = run_session(&prompt, &rc.client, &rc.lexicon, &rc.device, transport.as_mut())
        .with_context(|| {
            if tcp {
                format!("session with server at {}", rc.file.server.address)
            } else {
                "session".to_string()
            }
        })?;
    let report = CostReport::from_session(&out, &rc.file.channel);

    let image_path = args
        .out
        .or_else(|| rc.file.output.image.clone())
        .unwrap_or_else(|| PathBuf::from("out.ppm"));
    fs::write(&image_path, out.image.to_ppm())
        .with_context(|| format!("writing {}", image_path.display()))?;
    if let Some(p) = args.report.or_else(|| rc.file.output.report.clone()) {
        fs::write(&p, report.to_json_lines()).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{}", report.to_table());
    println!("image            {}", image_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(config: Option<&Path>, address: Option<String>) -> Result<ExitCode> {
    let rc = RunConfig::load(config)?;
    let addr = address.unwrap_or_else(|| rc.file.server.address.clone());
    let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
    let server = Server::new().with_model(rc.client.model_id.clone(), Arc::clone(&rc.cloud));
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    Arc::new(server).serve(listener)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_attest(
    rc: &RunConfig,
    templates: Option<&Path>,
    seeds: u64,
    trials: usize,
) -> Result<ExitCode> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let lex = &rc.lexicon;
    let corpus = load_templates(templates, lex)?.enumerate();
    let mut failures = 0usize;
    let mut checked = 0usize;
    let mut max_n = 0usize;
    let mut controls_failed = 0usize;
    let mut controls = 0usize;
    for rec in &corpus {
        for s in 0..seeds {
            let cfg = oblix_core::protocol::ClientConfig {
                seed: rc.client.seed.wrapping_add(s),
                ..rc.client.clone()
            };
            let v = check_indistinguishability(&rec.prompt, lex, &cfg, None, Ordering::Canonical)?;
            checked += 1;
            max_n = max_n.max(v.class_size);
            if !v.pass {
                failures += 1;
                println!("FAIL {:?} seed {}: differs at byte {:?}", rec.prompt, cfg.seed, v.first_difference);
            }
            if s == 0 && v.class_size > 1 {
                controls += 1;
                let c = check_indistinguishability(&rec.prompt, lex, &cfg, None, Ordering::LeakyRealFirst)?;
                if !c.pass {
                    controls_failed += 1;
                }
            }
        }
    }
    println!(
        "transcript equality: {}/{} sessions identical across their class (max N = {max_n})",
        checked - failures,
        checked
    );
    println!("negative control: {controls_failed}/{controls} leaky orderings detected");
    let mut ok = failures == 0 && controls_failed == controls;

    let pool: Vec<String> = corpus.iter().map(|r| r.prompt.clone()).collect();
    for classes in [&["gender"][..], &["gender", "age"][..]] {
        let sub = lex.restricted(classes)?;
        for mut adv in transcript_adversaries() {
            let v = distinguisher_experiment(&pool, &sub, &rc.client, trials, adv.as_mut(), rc.client.seed, false)?;
            println!(
                "distinguisher N={} {:<16} accuracy {:.4} (chance {:.4} ± {:.4}) {}",
                v.class_size,
                adv.name(),
                v.accuracy.unwrap_or(0.0),
                v.chance.unwrap_or(0.0),
                v.tolerance.unwrap_or(0.0),
                if v.pass { "PASS" } else { "FAIL" }
            );
            ok &= v.pass;
        }
        let v = distinguisher_experiment(&pool, &sub, &rc.client, trials.min(200), &mut OracleAdversary, rc.client.seed, true)?;
        let sane = v.accuracy == Some(1.0);
        println!(
            "distinguisher N={} oracle           accuracy {:.4} {}",
            v.class_size,
            v.accuracy.unwrap_or(0.0),
            if sane { "PASS (leaky control)" } else { "FAIL" }
        );
        ok &= sane;
    }
    println!("{}", if ok { "attestation passed" } else { "attestation FAILED" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
