use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use muse_core::attention::{measure_flops, AttentionKind, FlopReport};
use muse_core::checkpoint::{load_checkpoint, save_checkpoint};
use muse_core::checks::{suite_config, suites};
use muse_core::config::RunConfig;
use muse_core::dataset::{build_dataset_index, Side};
use muse_core::metrics::{si_sdr, ssnr, SSNR_FRAME, SSNR_HOP};
use muse_core::model::{count_params, Muse};
use muse_core::train::{train_loop, LogRow, TrainEvent};
use muse_core::wav::{read_wav, write_wav, WavClip};
use muse_core::Precision;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const PARAM_BAND: std::ops::RangeInclusive<usize> = 460_000..=560_000;

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Parser)]
#[command(name = "muse", version, about = "Lightweight speech enhancement")]
struct Cli {
    /// Seed for initialization and shuffling (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Arithmetic precision of the forward and backward passes.
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Denoise one 16 kHz mono WAV file.
    Enhance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Must describe the same model as the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Clean reference; prints SSNR and SI-SDR of input and output.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
    /// Train on paired clean/noisy directories.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        noisy: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter count with per-module breakdown.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Analytic and measured attention cost as CSV.
    BenchAttn {
        #[arg(long)]
        t: u64,
        #[arg(long)]
        f: u64,
        #[arg(long)]
        d: u64,
        /// Also report t doubled four times.
        #[arg(long)]
        sweep: bool,
    },
    /// Finite-difference gradient suites.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn enhance(cli: &Cli, model: &Path, input: &Path, out: &Path, config: Option<&Path>, reference: Option<&Path>) -> Result<()> {
    let (net, store) = load_checkpoint(model).with_context(|| format!("loading {}", model.display()))?;
    if let Some(p) = config {
        let cfg = load_config(Some(p), None)?;
        if cfg.model != net.cfg {
            bail!("config {} describes a different model than checkpoint {}", p.display(), model.display());
        }
    }
    let noisy = read_wav(input)?;
    let enhanced = net.enhance(&store, &noisy.samples, cli.precision.into())?;
    write_wav(
        out,
        &WavClip {
            samples: enhanced.clone(),
            sample_rate: noisy.sample_rate,
            source_path: out.display().to_string(),
        },
    )?;
    if let Some(r) = reference {
        let clean = read_wav(r)?.samples;
        if clean.len() != noisy.samples.len() {
            bail!("reference has {} samples, input has {}", clean.len(), noisy.samples.len());
        }
        for (label, x) in [("input", &noisy.samples), ("output", &enhanced)] {
            println!(
                "{label}: ssnr {:.3} dB, si-sdr {:.3} dB",
                ssnr(&clean, x, SSNR_FRAME, SSNR_HOP)?,
                si_sdr(&clean, x)?
            );
        }
    }
    Ok(())
}

fn train(cli: &Cli, config: Option<&Path>, clean: &Path, noisy: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config, cli.seed)?;
    print!("{}", cfg.to_text());
    let index = build_dataset_index(clean, noisy, cfg.train.segment_length)?;
    for o in &index.orphans {
        let missing = match o.side {
            Side::Clean => "noisy",
            Side::Noisy => "clean",
        };
        eprintln!("warning: {} has no {missing} counterpart, skipped", o.path.display());
    }
    let segments = index.load_segments()?;
    let padded = segments.iter().filter(|s| s.span.padded).count();
    println!("{} pairs, {} segments ({} zero-padded)", index.pairs.len(), segments.len(), padded);
    let data: Vec<_> = segments.into_iter().map(|s| s.pair).collect();

    std::fs::create_dir_all(out)?;
    let (model, mut store) = Muse::new(cfg.model.clone(), cfg.train.seed)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("train_log.csv"))?);
    writeln!(log, "{}", LogRow::CSV_HEADER)?;
    let every = cfg.train.checkpoint_every;
    let epochs = cfg.train.epochs;
    let summary = train_loop(&model, &mut store, &data, &cfg.train, cli.precision.into(), |event| {
        match event {
            TrainEvent::Step(row) => {
                writeln!(log, "{}", row.csv_row())?;
            }
            TrainEvent::EpochEnd { epoch, store } => {
                log.flush()?;
                let n = epoch + 1;
                if every > 0 && n % every == 0 && n != epochs {
                    save_checkpoint(&out.join(format!("epoch_{n:04}.ckpt")), &model.cfg, store)?;
                }
            }
        }
        Ok(())
    })?;
    log.flush()?;
    save_checkpoint(&out.join("final.ckpt"), &model.cfg, &store)?;
    println!(
        "{} steps ({} skipped), loss {:.6} -> {:.6}",
        summary.steps, summary.skipped_steps, summary.first_loss, summary.last_loss
    );
    Ok(())
}

fn params(cli: &Cli, config: Option<&Path>) -> Result<bool> {
    let cfg = load_config(config, cli.seed)?;
    print!("{}", cfg.to_text());
    let (_, store) = Muse::new(cfg.model, cfg.train.seed)?;
    println!();
    println!("{:<12} {:>10}", "module", "params");
    for (name, n) in store.breakdown(1) {
        println!("{name:<12} {n:>10}");
    }
    let total = count_params(&store);
    println!("{:<12} {total:>10}", "total");
    let ok = PARAM_BAND.contains(&total);
    if !ok {
        eprintln!("total {total} is outside [{}, {}]", PARAM_BAND.start(), PARAM_BAND.end());
    }
    Ok(ok)
}

fn bench_attn(t: u64, f: u64, d: u64, sweep: bool, seed: u64) -> Result<()> {
    println!("{}", FlopReport::CSV_HEADER);
    let steps = if sweep { 5 } else { 1 };
    for i in 0..steps {
        let t = t << i;
        for kind in [AttentionKind::Softmax, AttentionKind::Taylor] {
            println!("{}", measure_flops(kind, t, f, d, seed)?.csv_row());
        }
    }
    Ok(())
}

fn gradcheck(cli: &Cli, module: Option<&str>) -> Result<bool> {
    if cli.precision != PrecisionArg::F64 {
        bail!("finite-difference checks need --precision f64");
    }
    let all = suites();
    let selected: Vec<_> = match module {
        Some(m) => {
            let found: Vec<_> = all.iter().filter(|(n, _)| *n == m).collect();
            if found.is_empty() {
                let names: Vec<_> = all.iter().map(|(n, _)| *n).collect();
                bail!("unknown module `{m}`; available: {}", names.join(", "));
            }
            found
        }
        None => all.iter().collect(),
    };
    let mut cfg = suite_config();
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let mut ok = true;
    for (name, f) in selected {
        let rep = f(&cfg)?;
        let status = if rep.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {name}: max rel err {:.3e} (tol {:.0e}), {} checked, {} near kinks skipped",
            rep.max_rel_err, rep.tol, rep.checked, rep.kink_skipped
        );
        ok &= rep.passed();
    }
    Ok(ok)
}

fn run(cli: &Cli) -> Result<bool> {
    Ok(match &cli.command {
        Command::Enhance {
            model,
            input,
            out,
            config,
            reference,
        } => {
            enhance(cli, model, input, out, config.as_deref(), reference.as_deref())?;
            true
        }
        Command::Train { config, clean, noisy, out } => {
            train(cli, config.as_deref(), clean, noisy, out)?;
            true
        }
        Command::Params { config } => params(cli, config.as_deref())?,
        Command::BenchAttn { t, f, d, sweep } => {
            bench_attn(*t, *f, *d, *sweep, cli.seed.unwrap_or(0))?;
            true
        }
        Command::Gradcheck { module } => gradcheck(cli, module.as_deref())?,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
