use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use maskplan::codec::{Codec, TemplateSpec, Vocabulary};
use maskplan::config::RunConfig;
use maskplan::decoder::{decode_autoregressive, decode_diffusion, CachePolicy, DecodeError};
use maskplan::eval::{
    ablate_steps, ablate_threshold, ablation_csv, comparison_csv, evaluate, summary_table, threshold_table,
    DecoderChoice, EvalOptions, EvalSample, L2Mode, Variant,
};
use maskplan::model::checkpoint::Checkpoint;
use maskplan::model::MaskPredictor;
use maskplan::training::{train, TrainExample, TrainOutputs};
use maskplan::world::{
    emit_dataset, generate_parking, generate_scene, read_dataset, split_seeds, DatasetKind, DatasetRecord, Split,
};

#[derive(Debug, Parser)]
#[command(name = "maskplan", version, about = "Masked-diffusion trajectory planning on synthetic scenes")]
struct Cli {
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key = value run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset file plus manifest.
    GenData(GenData),
    /// Train a mask predictor and write a checkpoint.
    Train(Train),
    /// Decode one synthetic sample and print the plan.
    Decode(Decode),
    /// Benchmark decoders and sweep thresholds or step counts.
    Bench(Bench),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Driving,
    Parking,
}

impl From<Kind> for DatasetKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Driving => DatasetKind::Driving,
            Kind::Parking => DatasetKind::Parking,
        }
    }
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long, value_enum, default_value = "driving")]
    kind: Kind,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
}

#[derive(Debug, Args)]
struct Train {
    /// Dataset file; overrides `train_data` from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Per-epoch CSV log; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Decode {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 1)]
    sample_seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Prompt-cache refresh interval; off when absent.
    #[arg(long)]
    cache: Option<usize>,
    /// Left-to-right causal decoding instead of diffusion.
    #[arg(long)]
    ar: bool,
    /// Step trace file; defaults to `--out` when given.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Ablation {
    Tau,
    Steps,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Compare {
    Ar,
    Cache,
}

#[derive(Debug, Args)]
struct Bench {
    #[arg(long)]
    ckpt: PathBuf,
    /// Checkpoint trained without the fixed pattern, for `--fp off`.
    #[arg(long)]
    ckpt_off: Option<PathBuf>,
    #[arg(long, value_enum)]
    ablate: Option<Ablation>,
    #[arg(long, value_enum)]
    compare: Option<Compare>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.9, 0.7, 0.5, 0.3])]
    taus: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64, 128])]
    steps: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values = ["on"])]
    fp: Vec<String>,
    /// Held-out samples (odd seeds).
    #[arg(long)]
    val_count: Option<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Average L2 over all waypoints up to each horizon.
    #[arg(long)]
    cumulative: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn resolve(cli: &Cli, kind: Option<DatasetKind>) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::for_kind(kind.unwrap_or(DatasetKind::Driving)),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(&cli, a),
        Command::Train(a) => train_cmd(&cli, a),
        Command::Decode(a) => decode_cmd(&cli, a),
        Command::Bench(a) => bench_cmd(&cli, a),
    }
}

fn gen_data(cli: &Cli, a: &GenData) -> Result<()> {
    let kind = a.kind.into();
    let cfg = resolve(cli, Some(kind))?;
    let out = out_path(cli, "data.jsonl");
    let m = emit_dataset(&out, a.count as usize, cfg.seed, kind, &cfg.echo())?;
    println!("wrote {} {:?} samples (seeds {}..{}) to {}", m.count, kind, m.seed_start, m.seed_start + m.count as u64, out.display());
    println!("sha256 {}", m.sha256);
    Ok(())
}

fn examples_from_records(records: &[DatasetRecord], codec: &Codec, vocab: &Vocabulary) -> Result<Vec<TrainExample>> {
    records
        .iter()
        .map(|r| {
            let ex = match r {
                DatasetRecord::Driving { seed, .. } => generate_scene(*seed, vocab).to_example(codec)?,
                DatasetRecord::Parking { seed, .. } => generate_parking(*seed, vocab).to_example(codec)?,
            };
            // Records carry the fixed-pattern rendering; compare on free slots.
            let stored = codec.parse(r.truth())?;
            if codec.decode(&stored)? != codec.decode(&ex.target)? {
                bail!("record for seed {} does not match its regeneration", r.seed());
            }
            Ok(ex)
        })
        .collect()
}

fn train_cmd(cli: &Cli, a: &Train) -> Result<()> {
    let mut cfg = resolve(cli, None)?;
    if let Some(d) = &a.data {
        cfg.train_data = d.display().to_string();
    }
    let vocab = Vocabulary::standard();
    let spec = cfg.template()?;
    let codec = Codec::new(spec);
    let data = if cfg.train_data.is_empty() {
        split_seeds(0, cfg.train_count, Split::Train)
            .into_iter()
            .map(|s| match cfg.kind {
                DatasetKind::Driving => generate_scene(s, &vocab).to_example(&codec),
                DatasetKind::Parking => generate_parking(s, &vocab).to_example(&codec),
            })
            .collect::<Result<Vec<_>, _>>()?
    } else {
        let path = Path::new(&cfg.train_data);
        let records = read_dataset(path)?;
        // Parse with the fixed-pattern layout the file was written in.
        let file_codec = Codec::new(spec.with_fixed_pattern(true));
        let mut out = examples_from_records(&records, &file_codec, &vocab)?;
        for ex in &mut out {
            ex.target = codec.encode(&file_codec.decode(&ex.target)?)?;
        }
        out
    };
    let model = MaskPredictor::new(cfg.model(vocab.len())?, cfg.seed)?;
    let out = out_path(cli, "model.bin");
    let log = a.log.clone().unwrap_or_else(|| suffixed(&out, ".log.csv"));
    let echo = cfg.echo();
    let outputs = TrainOutputs {
        log: Some(&log),
        checkpoint: Some(&out),
        provenance: &echo,
    };
    let (_, report) = train(model, &data, codec.template(), &cfg.train(), &outputs)?;
    for (i, (l, s)) in report.epoch_losses.iter().zip(&report.epoch_seconds).enumerate() {
        println!("epoch {i}: loss {l:.4} ({s:.1} s)");
    }
    println!("checkpoint {} after {} steps; log {}", out.display(), report.steps, log.display());
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn kind_of(spec: &TemplateSpec) -> DatasetKind {
    if spec.waypoints == 1 {
        DatasetKind::Parking
    } else {
        DatasetKind::Driving
    }
}

fn decode_cmd(cli: &Cli, a: &Decode) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let mut cfg = resolve(cli, Some(kind_of(&ck.template)))?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(t) = a.tau {
        cfg.tau = t;
    }
    let vocab = Vocabulary::standard();
    let codec = Codec::new(ck.template);
    let (scene, context) = match kind_of(&ck.template) {
        DatasetKind::Driving => {
            let s = generate_scene(a.sample_seed, &vocab);
            (s.raster, s.instruction)
        }
        DatasetKind::Parking => {
            let s = generate_parking(a.sample_seed, &vocab);
            (s.raster, s.instruction)
        }
    };
    let mut dc = cfg.decode();
    if let Some(k) = a.cache {
        dc = dc.with_cache(CachePolicy::Prompt { refresh: k });
    }
    let result = if a.ar {
        decode_autoregressive(&ck.model, &codec, &scene, &context)
    } else {
        decode_diffusion(&ck.model, &codec, &scene, &context, &dc)
    };
    let (trace, trajectory) = match result {
        Ok(d) => (d.trace, Some(d.trajectory)),
        Err(DecodeError::Malformed { trace, source }) => {
            eprintln!("warning: {source}");
            (*trace, None)
        }
        Err(e) => return Err(e.into()),
    };
    println!("{}", trace.sequence.render(codec.vocab()));
    if let Some(t) = &trajectory {
        let pts: Vec<String> = t.waypoints.iter().map(|w| format!("({:.1}, {:.1})", w.x, w.y)).collect();
        println!("trajectory {}", pts.join(" "));
    }
    println!("steps {} model_calls {} wall_clock {:.4} s", trace.steps.len(), trace.model_calls, trace.wall_clock);
    if let Some(path) = a.trace.as_ref().or(cli.out.as_ref()) {
        let mut text: String = cfg.echo().lines().map(|l| format!("# {l}\n")).collect();
        text.push_str(&trace.to_records(&codec));
        fs::write(path, text).with_context(|| format!("writing trace {}", path.display()))?;
    }
    if trajectory.is_none() {
        bail!("decoded sequence is malformed");
    }
    Ok(())
}

fn bench_cmd(cli: &Cli, a: &Bench) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let kind = kind_of(&ck.template);
    if kind == DatasetKind::Parking {
        bail!("bench runs on driving checkpoints");
    }
    let cfg = resolve(cli, Some(kind))?;
    let vocab = Vocabulary::standard();
    let codec = Codec::new(ck.template);
    let n = a.val_count.unwrap_or(cfg.val_count);
    let split: Vec<EvalSample> = split_seeds(0, n, Split::Val)
        .iter()
        .map(|&s| EvalSample::from(&generate_scene(s, &vocab)))
        .collect();
    let opts = EvalOptions {
        l2_mode: if a.cumulative { L2Mode::Cumulative } else { L2Mode::Horizon },
        repeats: a.repeats,
        workers: a.workers,
    };
    let mut echo = cfg.echo();
    let _ = writeln!(echo, "\n[checkpoint]\npath = {:?}", a.ckpt.display().to_string());
    echo.push_str(&ck.provenance);
    let (csv, table) = match (a.ablate, a.compare) {
        (Some(_), Some(_)) => bail!("choose one of --ablate and --compare"),
        (Some(Ablation::Tau), None) => {
            let rows = ablate_threshold(&ck.model, &codec, &split, &a.taus, cfg.steps, &opts)?;
            (ablation_csv(&rows, &echo), threshold_table(&rows))
        }
        (Some(Ablation::Steps), None) => {
            let off = match &a.ckpt_off {
                Some(p) => Some(Checkpoint::load(p)?),
                None => None,
            };
            let off_codec = off.as_ref().map(|c| Codec::new(c.template));
            let mut variants = Vec::new();
            for flag in &a.fp {
                match flag.as_str() {
                    "on" => variants.push(Variant {
                        model: &ck.model,
                        codec: &codec,
                    }),
                    "off" => match (&off, &off_codec) {
                        (Some(c), Some(oc)) => variants.push(Variant {
                            model: &c.model,
                            codec: oc,
                        }),
                        _ => bail!("--fp off needs --ckpt-off"),
                    },
                    other => bail!("--fp takes on/off, got {other:?}"),
                }
            }
            let rows = ablate_steps(&variants, &split, &a.steps, cfg.tau, &opts)?;
            (ablation_csv(&rows, &echo), String::new())
        }
        (None, compare) => {
            let base = DecoderChoice::Diffusion(cfg.decode());
            let other = match compare {
                Some(Compare::Cache) => DecoderChoice::Diffusion(cfg.decode().with_cache(CachePolicy::Prompt {
                    refresh: cfg.cache_refresh,
                })),
                _ => DecoderChoice::Autoregressive,
            };
            let e1 = evaluate(&ck.model, &codec, &split, &base, &opts)?;
            let e2 = evaluate(&ck.model, &codec, &split, &other, &opts)?;
            (comparison_csv(&[&e1, &e2], &echo), summary_table(&[&e1, &e2]))
        }
    };
    match &cli.out {
        Some(path) => {
            fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    if !table.is_empty() {
        eprint!("{table}");
    }
    Ok(())
}
