//! `r2p`: synthesize data, train, evaluate, ablate losses and export clouds.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use r2p_core::metrics::{chamfer, emd_approx, emd_exact, DEFAULT_AUCTION_EPS, DEFAULT_EXACT_CAP};
use r2p_core::model::{load_model, LossSpec, R2PModel};
use r2p_core::pointcloud::{denormalize, normalize, read_cloud, read_dataset, resample, write_cloud, CloudFormat, Dataset};
use r2p_core::synth::{corruption_from_kv, write_synthetic_dataset, Category, SynthConfig};
use r2p_core::train::{ablate_losses, evaluate, train_run, RunOptions, TrainConfig, TrainState, MODEL_FILE, STATE_FILE};
use r2p_core::{Error, Result};

const THREADS_ENV: &str = "R2P_THREADS";
const RUN_ECHO: &str = "run.txt";

#[derive(Parser, Debug)]
#[command(name = "r2p", version, about = "Point-cloud reconstruction from coarse multi-view depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Per-sample CD and EMD of a model on a dataset, as CSV.
    Eval(EvalArgs),
    /// Train every loss variant with identical settings and compare.
    Ablate(AblateArgs),
    /// Reconstruct a single cloud.
    Export(ExportArgs),
    /// Print CD and EMD between two clouds.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Comma-separated categories: box, l_shape, chair_like, desk_like, car_like.
    #[arg(long)]
    category: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// key=value corruption overrides.
    #[arg(long)]
    corruption_file: Option<PathBuf>,
    /// A previous `<out>.cfg` echo; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossSpec>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Encoder/decoder widths as h1,h2,h3,h4,d1,d2.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    no_batchnorm: bool,
    /// A previous `run.txt` echo; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Input points per cloud (defaults to the dataset's).
    #[arg(long)]
    n: Option<usize>,
    /// Output points per cloud (defaults to the dataset's).
    #[arg(long)]
    m: Option<usize>,
    /// Leading samples used for training; the rest are held out.
    #[arg(long)]
    train_count: Option<usize>,
    /// Continue from the checkpoint in `--out-dir`.
    #[arg(long)]
    resume: bool,
    /// Checkpoint and stop once this (0-based) epoch completes.
    #[arg(long)]
    stop_after_epoch: Option<usize>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip this many leading samples (e.g. the training split).
    #[arg(long, default_value_t = 0)]
    skip: usize,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    train_count: Option<usize>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// `.xyz` or `.ply` input cloud of any size; resampled to the model's n.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

fn parse_loss(s: &str) -> std::result::Result<LossSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 1,
        Error::NumericalAbort { .. } | Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init_threads().and_then(|_| run(cli.command)) {
        eprintln!("error: {e}");
        if let Error::NumericalAbort { snapshot: Some(p), .. } = &e {
            eprintln!("snapshot written to {}", p.display());
        }
        return ExitCode::from(exit_code(&e));
    }
    ExitCode::SUCCESS
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Error::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))
}

/// Fails with the path in the message when an input file is missing or unreadable.
fn check_input(path: &Path) -> Result<()> {
    fs::metadata(path)
        .map(|_| ())
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_text(path: &Path) -> Result<String> {
    check_input(path)?;
    Ok(fs::read_to_string(path)?)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Export(a) => export(a),
        Command::Metrics(a) => metrics(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_kv(&read_text(p)?, p)?,
        None => SynthConfig::default(),
    };
    if let Some(c) = &a.category {
        cfg.categories = c.split(',').map(str::parse::<Category>).collect::<Result<_>>()?;
    }
    if let Some(p) = &a.corruption_file {
        cfg.corruption = corruption_from_kv(&read_text(p)?, p)?;
    }
    cfg.count = a.count.unwrap_or(cfg.count);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.n = a.n.unwrap_or(cfg.n);
    cfg.m = a.m.unwrap_or(cfg.m);
    cfg.validate()?;
    eprint!("{}", indent("synth settings", &cfg.to_kv()));
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let ds = write_synthetic_dataset(&cfg, &a.out)?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

/// Keys the CLI adds to a training echo on top of `TrainConfig::to_kv`.
#[derive(Debug, Default)]
struct RunExtras {
    data: Option<PathBuf>,
    train_count: Option<usize>,
    seeds: Option<Vec<u64>>,
}

fn read_echo(path: &Path) -> Result<(TrainConfig, RunExtras)> {
    let text = read_text(path)?;
    let mut extras = RunExtras::default();
    let mut rest = String::new();
    for (i, line) in text.lines().enumerate() {
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        match line.trim().split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
            Some(("data", v)) => extras.data = Some(PathBuf::from(v)),
            Some(("train_count", v)) => extras.train_count = Some(v.parse().map_err(|e| perr(format!("{e}")))?),
            Some(("seeds", v)) => {
                extras.seeds = Some(
                    v.split(',')
                        .map(|s| s.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| perr(format!("{e}")))?,
                )
            }
            _ => {
                rest.push_str(line);
                rest.push('\n');
                continue;
            }
        }
        // Blank placeholder keeps line numbers in later parse errors right.
        rest.push('\n');
    }
    Ok((TrainConfig::from_kv(&rest, path)?, extras))
}

fn parse_widths(s: &str) -> Result<[usize; 6]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|w| w.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Usage(format!("--widths: {e}")))?;
    v.try_into()
        .map_err(|_| Error::Usage("--widths takes six values: h1,h2,h3,h4,d1,d2".into()))
}

/// Applies command-line flags over the echoed (or default) configuration.
fn resolve(flags: &TrainFlags) -> Result<(TrainConfig, RunExtras)> {
    let (mut cfg, extras) = match &flags.config {
        Some(p) => read_echo(p)?,
        None => (TrainConfig::default(), RunExtras::default()),
    };
    if let Some(l) = flags.loss {
        cfg.loss = l.with_alpha(cfg.loss.alpha);
    }
    if let Some(al) = flags.alpha {
        cfg.loss.alpha = al;
    }
    cfg.epochs = flags.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = flags.batch.unwrap_or(cfg.batch_size);
    cfg.lr = flags.lr.unwrap_or(cfg.lr);
    cfg.seed = flags.seed.unwrap_or(cfg.seed);
    if let Some(w) = &flags.widths {
        let [h1, h2, h3, h4, d1, d2] = parse_widths(w)?;
        cfg.model = r2p_core::model::ModelConfig {
            h1,
            h2,
            h3,
            h4,
            d1,
            d2,
            ..cfg.model
        };
    }
    if flags.no_batchnorm {
        cfg.model.batchnorm = false;
    }
    Ok((cfg, extras))
}

fn default_train_count(len: usize) -> usize {
    len - len / 15
}

fn load_split(data: &Path, train_count: Option<usize>) -> Result<(Dataset, Dataset, usize)> {
    check_input(data)?;
    let ds = read_dataset(data)?;
    if ds.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    let tc = train_count.unwrap_or_else(|| default_train_count(ds.len()));
    let (tr, te) = ds.split(tc)?;
    Ok((tr, te, tc))
}

fn echo(cfg: &TrainConfig, data: &Path, train_count: usize, seeds: Option<&[u64]>) -> String {
    let mut s = cfg.to_kv();
    writeln!(s, "data={}", data.display()).unwrap();
    writeln!(s, "train_count={train_count}").unwrap();
    if let Some(seeds) = seeds {
        let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
        writeln!(s, "seeds={}", list.join(",")).unwrap();
    }
    s
}

fn indent(title: &str, kv: &str) -> String {
    let mut s = format!("{title}:\n");
    for line in kv.lines() {
        writeln!(s, "  {line}").unwrap();
    }
    s
}

fn train(a: TrainArgs) -> Result<()> {
    let (mut cfg, extras) = resolve(&a.flags)?;
    let data = a
        .data
        .or(extras.data)
        .ok_or_else(|| Error::Usage("--data is required".into()))?;
    let (train_set, held_out, tc) = load_split(&data, a.train_count.or(extras.train_count))?;
    let (dn, dm) = train_set.dims()?;
    cfg.model.n = a.n.unwrap_or(dn);
    cfg.model.m = a.m.unwrap_or(dm);
    cfg.validate()?;

    fs::create_dir_all(&a.out_dir)?;
    let text = echo(&cfg, &data, tc, None);
    eprint!("{}", indent("train settings", &text));
    fs::write(a.out_dir.join(RUN_ECHO), &text)?;

    let mut model = R2PModel::new(cfg.model, cfg.seed)?;
    let resume = if a.resume {
        check_input(&a.out_dir.join(MODEL_FILE))?;
        model = load_model(&a.out_dir.join(MODEL_FILE))?;
        if model.config != cfg.model {
            return Err(Error::Checkpoint("checkpoint architecture differs from the requested one".into()));
        }
        Some(TrainState::load(&a.out_dir.join(STATE_FILE), &model)?)
    } else {
        None
    };
    let opts = RunOptions {
        out_dir: Some(a.out_dir.clone()),
        held_out: (!held_out.is_empty()).then_some(&held_out),
        resume,
        stop_after_epoch: a.stop_after_epoch,
        on_epoch: Some(Box::new(|r| {
            eprintln!("epoch {:>4}  loss {:.6e}  lr {:.3e}  {:.1}s", r.epoch, r.loss, r.lr, r.seconds)
        })),
    };
    let (report, _) = train_run(&mut model, &train_set, &cfg, opts)?;
    let report_path = a.out_dir.join("report.csv");
    let mut csv = report.to_csv();
    if a.resume {
        if let Ok(earlier) = fs::read_to_string(&report_path) {
            // Drop the header of the new rows and continue the earlier file.
            csv = earlier + csv.split_once('\n').map_or("", |(_, rows)| rows);
        }
    }
    fs::write(&report_path, csv)?;
    if !report.held_out.is_empty() {
        fs::write(a.out_dir.join("held_out.csv"), report.held_out_csv())?;
    }
    if cfg.epochs > 0 && !held_out.is_empty() {
        let mut r = evaluate(&model, &held_out)?;
        for row in &mut r.rows {
            row.sample_id += tc;
        }
        r.write_csv(&a.out_dir.join("eval.csv"))?;
        println!("held-out mean cd={:.6e} emd={:.6e}", r.mean_cd, r.mean_emd);
    }
    println!("trained {} epochs, outputs in {}", report.epochs.len(), a.out_dir.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    check_input(&a.model)?;
    check_input(&a.data)?;
    let model = load_model(&a.model)?;
    let ds = read_dataset(&a.data)?;
    let (_, ds) = ds.split(a.skip)?;
    if ds.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut r = evaluate(&model, &ds)?;
    // Row ids refer to positions in the full dataset file.
    for row in &mut r.rows {
        row.sample_id += a.skip;
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    r.write_csv(&a.out)?;
    let kind = if r.emd_exact { "exact" } else { "approximate" };
    println!("mean cd={:.6e} emd={:.6e} ({kind} emd) over {} samples", r.mean_cd, r.mean_emd, r.rows.len());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let (mut cfg, extras) = resolve(&a.flags)?;
    let data = a
        .data
        .or(extras.data)
        .ok_or_else(|| Error::Usage("--data is required".into()))?;
    let seeds = a.seeds.or(extras.seeds).unwrap_or_else(|| vec![0, 1, 2]);
    let (train_set, test_set, tc) = load_split(&data, a.train_count.or(extras.train_count))?;
    if test_set.is_empty() {
        return Err(Error::Usage("ablation needs held-out samples; lower --train-count".into()));
    }
    let (n, m) = train_set.dims()?;
    cfg.model.n = n;
    cfg.model.m = m;
    cfg.validate()?;

    fs::create_dir_all(&a.out_dir)?;
    let text = echo(&cfg, &data, tc, Some(&seeds));
    eprint!("{}", indent("ablation settings", &text));
    fs::write(a.out_dir.join(RUN_ECHO), &text)?;

    let table = ablate_losses(&train_set, &test_set, &cfg, &seeds)?;
    fs::write(a.out_dir.join("ablation.csv"), table.to_csv())?;
    fs::write(a.out_dir.join("ablation_runs.csv"), table.runs_csv())?;
    print!("{}", table.to_csv());
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    check_input(&a.model)?;
    check_input(&a.input)?;
    let model = load_model(&a.model)?;
    let out_format = CloudFormat::from_path(&a.out)?;
    let cloud = read_cloud(&a.input, CloudFormat::from_path(&a.input)?)?;
    let sampled = resample(&cloud, model.config.n, a.seed)?;
    let (input, norm) = normalize(&sampled)?;
    let out = denormalize(&model.reconstruct(&input)?, &norm);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_cloud(&a.out, &out, out_format)?;
    println!("wrote {} points to {}", out.len(), a.out.display());
    Ok(())
}

fn metrics(a: MetricsArgs) -> Result<()> {
    check_input(&a.a)?;
    check_input(&a.b)?;
    let x = read_cloud(&a.a, CloudFormat::from_path(&a.a)?)?;
    let y = read_cloud(&a.b, CloudFormat::from_path(&a.b)?)?;
    let cd = chamfer(&x, &y)?;
    if x.len() != y.len() {
        println!("cd={cd} emd=n/a");
        eprintln!("emd needs equal point counts ({} vs {})", x.len(), y.len());
        return Ok(());
    }
    let emd = if x.len() <= DEFAULT_EXACT_CAP {
        emd_exact(&x, &y)?
    } else {
        emd_approx(&x, &y, DEFAULT_AUCTION_EPS)?
    };
    println!("cd={cd} emd={}", emd.cost);
    Ok(())
}
