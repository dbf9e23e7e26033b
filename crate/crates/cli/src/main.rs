use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ebmflow::autodiff::Tensor;
use ebmflow::base::{BaseKind, LogZMode, SpinSource};
use ebmflow::checkpoint::load_checkpoint;
use ebmflow::config::RunConfig;
use ebmflow::data::{make_splits, DatasetId};
use ebmflow::flow::Shape3;
use ebmflow::model::EbmFlowModel;
use ebmflow::train::{eval_model, train_loop, Trainer};
use ebmflow::{io, plot, Error};

#[derive(Parser)]
#[command(name = "ebmflow", version, about = "Flows over Gaussian-smoothed Boltzmann machine bases")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run configuration.
    Train {
        config: PathBuf,
        /// Replace `architecture.base`, for ablation sweeps.
        #[arg(long)]
        base: Option<BaseKind>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Replace `training.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Replace `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output prefix; writes `<out>.ebmf`, `<out>.csv` and, for spin bases,
        /// the drawn spins to `<out>.spins.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Also draw `--per-column` samples for each distinct spin vector seen
        /// and write them as a grid figure.
        #[arg(long)]
        grid_by_spin: bool,
        #[arg(long, default_value_t = 16)]
        per_column: usize,
        /// Gibbs sweeps for fresh RBM chains.
        #[arg(long, default_value_t = 1000)]
        sweeps: usize,
    },
    /// Test-set NLL with the partition function from enumeration or AIS.
    Eval {
        checkpoint: PathBuf,
        /// Dataset name; defaults to the checkpoint's held-out split.
        #[arg(long)]
        dataset: Option<String>,
        /// Image tensor file for `--dataset binimg`.
        #[arg(long)]
        path: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = LogZArg::Exact)]
        logz: LogZArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        ais_temps: usize,
        #[arg(long, default_value_t = 256)]
        ais_chains: usize,
        /// Append a metrics row to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Samples conditioned on explicit spin vectors, one column each.
    Grid {
        checkpoint: PathBuf,
        /// Spin vectors separated by ';', entries by ',', e.g. "1,-1;-1,-1".
        #[arg(long, allow_hyphen_values = true)]
        spins: String,
        #[arg(long, default_value_t = 16)]
        per_column: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Figure path (`.svg` for 2-D data, `.ppm` for images).
        #[arg(long)]
        out: PathBuf,
    },
    /// Render metrics or samples.
    Plot {
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        out: PathBuf,
        /// Metrics column for `--kind curve`.
        #[arg(long, default_value = "nll_nats")]
        column: String,
        /// Image shape `HxWxC` for `--kind grid` when the tensor is flat.
        #[arg(long)]
        shape: Option<String>,
        /// Images per row for `--kind grid`.
        #[arg(long, default_value_t = 8)]
        cols: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LogZArg {
    Exact,
    Ais,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Curve,
    Scatter,
    Grid,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::TooLarge { .. } | Error::InvalidSpin(_) => 1,
            _ => 2,
        };
        let message = match e {
            Error::TooLarge { n, limit } => format!(
                "exact partition function needs at most {limit} spins, this base has {n}; use --logz ais"
            ),
            other => other.to_string(),
        };
        Self { code, message }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, base, resume, epochs, out } => cmd_train(&config, base, resume.as_deref(), epochs, out),
        Command::Sample { checkpoint, count, seed, out, grid_by_spin, per_column, sweeps } => {
            cmd_sample(&checkpoint, count, seed, &out, grid_by_spin, per_column, sweeps)
        }
        Command::Eval { checkpoint, dataset, path, logz, seed, ais_temps, ais_chains, csv } => {
            let mode = match logz {
                LogZArg::Exact => LogZMode::Exact,
                LogZArg::Ais => LogZMode::Ais { temps: ais_temps, chains: ais_chains, seed },
            };
            cmd_eval(&checkpoint, dataset.as_deref(), path.as_deref(), mode, seed, csv.as_deref())
        }
        Command::Grid { checkpoint, spins, per_column, seed, out } => cmd_grid(&checkpoint, &spins, per_column, seed, &out),
        Command::Plot { input, kind, out, column, shape, cols } => cmd_plot(&input, kind, &out, &column, shape.as_deref(), cols),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_train(path: &Path, base: Option<BaseKind>, resume: Option<&Path>, epochs: Option<usize>, out: Option<PathBuf>) -> CliResult {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut value: toml::Table = text.parse().map_err(|e| usage(format!("config error: {e}")))?;
    if let Some(b) = base {
        let arch = value.entry("architecture").or_insert_with(|| toml::Value::Table(Default::default()));
        if let toml::Value::Table(t) = arch {
            t.insert("base".into(), toml::Value::String(b.name().into()));
        }
    }
    let mut config = RunConfig::from_toml(&value.to_string())?;
    if let Some(e) = epochs {
        config.training.epochs = e;
    }
    if let Some(o) = out {
        config.output.dir = o;
    }
    let resume = resume.map(load_checkpoint).transpose()?;
    let t = train_loop(&config, resume)?;
    match t.history.last() {
        Some(m) => println!(
            "trained {} base for {} epochs: test nll {:.4} nats ({:.4} bpd), log Z {:.4} ± {:.4}, {} rejected steps",
            config.base().name(),
            m.epoch,
            m.nll_nats,
            m.bpd,
            m.logz,
            m.logz_stderr,
            m.pd_failures
        ),
        None => println!("saved initial {} model to {}", config.base().name(), config.output.dir.display()),
    }
    Ok(())
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_csv(path: &Path, t: &Tensor) -> std::io::Result<()> {
    let mut out = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)
}

fn spin_label(s: &[f64]) -> String {
    s.iter().map(|v| if *v > 0.0 { "+1" } else { "-1" }).collect::<Vec<_>>().join(",")
}

/// Writes a figure of conditional samples: SVG panels for 2-D data, a PPM
/// grid (one row per spin vector) for images.
fn write_grid(model: &EbmFlowModel, spins: &[Vec<f64>], per_column: usize, seed: u64, out: &Path) -> CliResult {
    let x = model.conditional_grid(spins, per_column, seed)?;
    match model.spec.image {
        Some(shape) => {
            let px = EbmFlowModel::discretize(&x);
            std::fs::write(out, plot::ppm_grid(&px, shape, per_column.max(1))?).map_err(Error::from)?;
        }
        None => {
            let cols: Vec<(String, Tensor)> = spins
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    let rows: Vec<usize> = (c * per_column..(c + 1) * per_column).collect();
                    let data = rows.iter().flat_map(|&r| x.row(r).iter().copied()).collect();
                    (spin_label(s), Tensor::matrix(per_column, x.cols(), data).expect("sized"))
                })
                .collect();
            let svg = plot::svg_columns("samples per spin configuration", &cols)?;
            std::fs::write(out, svg).map_err(Error::from)?;
        }
    }
    Ok(())
}

fn load_model(path: &Path) -> std::result::Result<Trainer, Failure> {
    Ok(load_checkpoint(path)?)
}

fn cmd_sample(ckpt: &Path, count: usize, seed: u64, out: &Path, grid: bool, per_column: usize, sweeps: usize) -> CliResult {
    let t = load_model(ckpt)?;
    let model = &t.model;
    if grid && !model.base.kind.has_spins() {
        return Err(usage(format!("--grid-by-spin needs a spin base, this model has a {} base", model.base.kind.name())));
    }
    let (x, s) = model.sample(count, seed, SpinSource::BurnIn(sweeps.max(1)))?;
    let x = if model.spec.image.is_some() { EbmFlowModel::discretize(&x) } else { x };
    io::write_tensor(&with_ext(out, "ebmf"), &x)?;
    write_csv(&with_ext(out, "csv"), &x).map_err(Error::from)?;
    if model.base.kind.has_spins() {
        write_csv(&with_ext(out, "spins.csv"), &s).map_err(Error::from)?;
    }
    if grid {
        let mut seen = BTreeSet::new();
        let mut distinct = Vec::new();
        for r in 0..s.rows() {
            let key: Vec<i8> = s.row(r).iter().map(|v| if *v > 0.0 { 1 } else { -1 }).collect();
            if seen.insert(key) {
                distinct.push(s.row(r).to_vec());
            }
        }
        let ext = if model.spec.image.is_some() { "grid.ppm" } else { "grid.svg" };
        write_grid(model, &distinct, per_column, seed, &with_ext(out, ext))?;
        println!("wrote {count} samples and a grid of {} spin configurations", distinct.len());
    } else {
        println!("wrote {count} samples");
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, dataset: Option<&str>, path: Option<&Path>, mode: LogZMode, seed: u64, csv: Option<&Path>) -> CliResult {
    let t = load_model(ckpt)?;
    let cfg = &t.config;
    let id = match dataset {
        Some(name) => DatasetId::parse(name, path)?,
        None => cfg.dataset_id()?,
    };
    let (_, test) = make_splits(&id, cfg.data.train_size, cfg.data.test_size, cfg.training.seed)?;
    if test.spec != t.model.spec {
        return Err(usage(format!("dataset layout {:?} does not match the model's {:?}", test.spec, t.model.spec)));
    }
    let log_z = t.model.snapshot_base()?.log_z(mode)?;
    let m = eval_model(&t.model, &test, log_z, seed)?;
    println!(
        "nll {:.6} nats, {:.6} bpd, log Z {:.6} ± {:.6} ({} points)",
        m.nll_nats, m.bpd, m.logz, m.logz_stderr, m.count
    );
    if let Some(p) = csv {
        use std::io::Write;
        let fresh = !p.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(p).map_err(Error::from)?;
        if fresh {
            writeln!(f, "checkpoint,nll_nats,bpd,logz,logz_stderr").map_err(Error::from)?;
        }
        writeln!(f, "{},{:.6},{:.6},{:.6},{:.6}", ckpt.display(), m.nll_nats, m.bpd, m.logz, m.logz_stderr)
            .map_err(Error::from)?;
    }
    Ok(())
}

fn parse_spins(text: &str) -> std::result::Result<Vec<Vec<f64>>, Failure> {
    text.split(';')
        .filter(|c| !c.trim().is_empty())
        .map(|col| {
            col.split(',')
                .map(|v| match v.trim() {
                    "1" | "+1" => Ok(1.0),
                    "-1" => Ok(-1.0),
                    other => Err(usage(format!("spin entries must be +1 or -1, got '{other}'"))),
                })
                .collect()
        })
        .collect()
}

fn cmd_grid(ckpt: &Path, spins: &str, per_column: usize, seed: u64, out: &Path) -> CliResult {
    let spins = parse_spins(spins)?;
    let t = load_model(ckpt)?;
    if !t.model.base.kind.has_spins() {
        return Err(usage("grids need a spin base (rbm or dflow)"));
    }
    write_grid(&t.model, &spins, per_column, seed, out)?;
    println!("wrote {} columns of {per_column} samples", spins.len());
    Ok(())
}

fn parse_shape(s: &str) -> std::result::Result<Shape3, Failure> {
    let p: Vec<usize> = s.split('x').map(|v| v.parse().map_err(|_| usage(format!("bad shape '{s}'")))).collect::<Result<_, _>>()?;
    match p[..] {
        [h, w] => Ok(Shape3::new(h, w, 1)),
        [h, w, c] => Ok(Shape3::new(h, w, c)),
        _ => Err(usage(format!("bad shape '{s}', expected HxW or HxWxC"))),
    }
}

fn cmd_plot(input: &Path, kind: PlotKind, out: &Path, column: &str, shape: Option<&str>, cols: usize) -> CliResult {
    let bad_input = |e: Error| usage(format!("{}: {e}", input.display()));
    let figure: Vec<u8> = match kind {
        PlotKind::Curve | PlotKind::Scatter => {
            let text = std::fs::read_to_string(input).map_err(|e| Failure::from(Error::from(e)))?;
            let table = plot::parse_csv(&text).map_err(bad_input)?;
            match kind {
                PlotKind::Curve => plot::svg_metrics(&table, column).map_err(bad_input)?.into_bytes(),
                _ => {
                    let w = table.rows[0].len();
                    let data = table.rows.iter().flatten().copied().collect();
                    let t = Tensor::matrix(table.rows.len(), w, data).map_err(bad_input)?;
                    plot::svg_scatter("samples", &t, None).map_err(bad_input)?.into_bytes()
                }
            }
        }
        PlotKind::Grid => {
            let t = io::read_tensor(input)?;
            let (images, shape) = match (t.shape(), shape) {
                (&[n, h, w], None) => (t.clone().reshaped(vec![n, h * w])?, Shape3::new(h, w, 1)),
                (&[n, h, w, c], None) => (t.clone().reshaped(vec![n, h * w * c])?, Shape3::new(h, w, c)),
                (&[_, _], Some(s)) => (t.clone(), parse_shape(s)?),
                (s, _) => return Err(usage(format!("cannot lay out a tensor of shape {s:?} as images; pass --shape"))),
            };
            plot::ppm_grid(&images, shape, cols)?
        }
    };
    std::fs::write(out, figure).map_err(Error::from)?;
    Ok(())
}
