mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use memsim_core::crossbar::AdcRangeMode;
use memsim_core::dpe::NoiseMode;
use memsim_core::slicing::SliceScheme;
use serde::de::DeserializeOwned;

use commands::Run;
use config::{RunConfig, ScaleGrid, Sweep, SweepKind, XbarInput};
use error::{CliError, CliResult};
use output::OutputDir;

/// Memristive crossbar in-memory computing simulator.
#[derive(Parser, Debug)]
#[command(name = "memsim", version, about)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Emit {
    /// Also write the series behind each figure to `plot-data/`.
    PlotData,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// JSON config file (or a previous run's manifest.json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the file and MEMSIM_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    emit: Option<Emit>,

    /// Slice scheme for both operands, e.g. `int8:1,1,2,4` or `fp:16:1,1,2,4,4`.
    #[arg(long, global = true, value_parser = parse_scheme, conflicts_with_all = ["weight_scheme", "input_scheme"])]
    scheme: Option<SliceScheme>,
    #[arg(long, global = true, value_parser = parse_scheme)]
    weight_scheme: Option<SliceScheme>,
    #[arg(long, global = true, value_parser = parse_scheme)]
    input_scheme: Option<SliceScheme>,
    /// Coefficient of variation of programmed conductances.
    #[arg(long, global = true)]
    cv: Option<f64>,
    #[arg(long, global = true)]
    g_levels: Option<u32>,
    #[arg(long, global = true)]
    hgs: Option<f64>,
    #[arg(long, global = true)]
    lgs: Option<f64>,
    #[arg(long, global = true)]
    rdac: Option<u64>,
    #[arg(long, global = true)]
    radc: Option<u64>,
    /// Square array size.
    #[arg(long, global = true)]
    array: Option<usize>,
    #[arg(long, global = true)]
    r_wire: Option<f64>,
    #[arg(long, global = true)]
    v_read: Option<f64>,
    /// `ideal`, `variation_only` or `variation_plus_irdrop`.
    #[arg(long, global = true, value_parser = parse_enum::<NoiseMode>)]
    noise_mode: Option<NoiseMode>,
    /// `worst_case` or `dynamic`.
    #[arg(long, global = true, value_parser = parse_enum::<AdcRangeMode>)]
    adc_range: Option<AdcRangeMode>,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// IR-drop solve of one crossbar read.
    Xbar {
        #[arg(long, value_parser = parse_enum::<XbarInput>)]
        input: Option<XbarInput>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        /// Skip the direct nodal solve.
        #[arg(long)]
        no_oracle: bool,
    },
    /// One matrix product on the engine.
    Matmul {
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        range: Option<f64>,
        /// Left operand CSV instead of random values.
        #[arg(long)]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
    },
    /// Monte Carlo relative-error sweep.
    Mc {
        /// e.g. `cv=0,0.05,0.1;block=64,32;scheme=int8|fp16`.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        cycles: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Word-line circuit by conjugate gradient on the engine.
    Solve {
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        rwire: Option<f64>,
        #[arg(long)]
        g_min: Option<f64>,
        #[arg(long)]
        g_max: Option<f64>,
        #[arg(long)]
        drive: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        block: Option<usize>,
    },
    /// Morlet wavelet power spectrum.
    Cwt {
        /// Single-column CSV.
        #[arg(long)]
        signal: Option<PathBuf>,
        #[arg(long)]
        length: Option<usize>,
        /// `min:max:steps`.
        #[arg(long)]
        scales: Option<ScaleGrid>,
        #[arg(long)]
        omega0: Option<f64>,
    },
    /// k-means clustering.
    Kmeans {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        tail: Option<usize>,
        /// `all` or `single`.
        #[arg(long, value_parser = parse_enum::<memsim_core::apps::CenterUpdate>)]
        update: Option<memsim_core::apps::CenterUpdate>,
    },
    /// Train the desk-scale CNN.
    Train {
        /// Directory with MNIST IDX files.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        train_limit: Option<usize>,
        #[arg(long)]
        test_limit: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        /// `hardware` or `digital`.
        #[arg(long, value_parser = parse_enum::<memsim_core::nn::LayerMode>)]
        mode: Option<memsim_core::nn::LayerMode>,
        /// JSON list of per-layer overrides.
        #[arg(long)]
        layer_config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, optionally sweeping slices or cv.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        test_limit: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_parser = parse_enum::<memsim_core::nn::LayerMode>)]
        mode: Option<memsim_core::nn::LayerMode>,
        #[arg(long)]
        layer_config: Option<PathBuf>,
        /// `slices=2,3,4` or `cv=0.01,0.1`.
        #[arg(long, value_parser = parse_sweep)]
        sweep: Option<Sweep>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Xbar { .. } => "xbar",
            Command::Matmul { .. } => "matmul",
            Command::Mc { .. } => "mc",
            Command::Solve { .. } => "solve",
            Command::Cwt { .. } => "cwt",
            Command::Kmeans { .. } => "kmeans",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
        }
    }
}

fn parse_scheme(s: &str) -> Result<SliceScheme, String> {
    s.parse().map_err(|e: memsim_core::Error| e.to_string())
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| format!("unknown value `{s}`"))
}

fn parse_list<T: std::str::FromStr>(s: &str, sep: char) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(sep)
        .map(|v| v.trim().parse::<T>().map_err(|e| format!("`{v}`: {e}")))
        .collect()
}

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    let (kind, values) = s.split_once('=').ok_or_else(|| format!("expected kind=values, got `{s}`"))?;
    let kind = match kind.trim() {
        "slices" => SweepKind::Slices,
        "cv" => SweepKind::Cv,
        other => return Err(format!("unknown sweep `{other}` (slices or cv)")),
    };
    Ok(Sweep {
        kind,
        values: parse_list(values, ',')?,
    })
}

/// Applies `cv=..;block=..;scheme=a|b` onto the Monte Carlo section.
fn apply_grid(cfg: &mut RunConfig, grid: &str) -> CliResult<()> {
    for part in grid.split(';').filter(|p| !p.trim().is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| CliError::config("grid", format!("expected key=values, got `{part}`")))?;
        let key = key.trim();
        match key {
            "cv" => cfg.mc.cvs = parse_list(values, ',').map_err(|e| CliError::config("mc.cvs", e))?,
            "block" => cfg.mc.block_sizes = parse_list(values, ',').map_err(|e| CliError::config("mc.block_sizes", e))?,
            "scheme" => {
                cfg.mc.schemes = values
                    .split('|')
                    .map(parse_scheme)
                    .collect::<Result<_, _>>()
                    .map_err(|e| CliError::config("mc.schemes", e))?
            }
            other => return Err(CliError::config("grid", format!("unknown grid key `{other}`"))),
        }
    }
    Ok(())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_flags(cfg: &mut RunConfig, g: &GlobalArgs, cmd: &Command) -> CliResult<()> {
    set(&mut cfg.seed, g.seed);
    set(&mut cfg.out, g.out.clone());
    set(&mut cfg.device.cv, g.cv);
    set(&mut cfg.device.g_levels, g.g_levels);
    set(&mut cfg.device.hgs, g.hgs);
    set(&mut cfg.device.lgs, g.lgs);
    set(&mut cfg.crossbar.rdac, g.rdac);
    set(&mut cfg.crossbar.radc, g.radc);
    if let Some(n) = g.array {
        cfg.crossbar.rows = n;
        cfg.crossbar.cols = n;
    }
    set(&mut cfg.crossbar.r_wire, g.r_wire);
    set(&mut cfg.crossbar.v_read, g.v_read);
    set(&mut cfg.crossbar.adc_range_mode, g.adc_range);
    set(&mut cfg.noise_mode, g.noise_mode);

    // Scheme flags also replace the scheme a subcommand section would use.
    let weight = g.scheme.clone().or_else(|| g.weight_scheme.clone());
    let input = g.scheme.clone().or_else(|| g.input_scheme.clone());
    set(&mut cfg.weight_scheme, weight.clone());
    set(&mut cfg.input_scheme, input.clone());
    match cmd {
        Command::Mc { .. } => {
            if let Some(s) = &g.scheme {
                cfg.mc.schemes = vec![s.clone()];
            }
        }
        Command::Solve { .. } => set(&mut cfg.solve.scheme, g.scheme.clone()),
        Command::Cwt { .. } => {
            set(&mut cfg.cwt.weight_scheme, weight);
            set(&mut cfg.cwt.input_scheme, input);
        }
        Command::Kmeans { .. } => set(&mut cfg.kmeans.scheme, g.scheme.clone()),
        _ => {}
    }

    match cmd.clone() {
        Command::Xbar { input, tol, max_iter, no_oracle } => {
            set(&mut cfg.xbar.input, input);
            set(&mut cfg.xbar.tol, tol);
            set(&mut cfg.xbar.max_iter, max_iter);
            if no_oracle {
                cfg.xbar.oracle = false;
            }
        }
        Command::Matmul { m, k, n, range, .. } => {
            set(&mut cfg.matmul.m, m);
            set(&mut cfg.matmul.k, k);
            set(&mut cfg.matmul.n, n);
            set(&mut cfg.matmul.range, range);
        }
        Command::Mc { grid, cycles, size } => {
            if let Some(grid) = grid {
                apply_grid(cfg, &grid)?;
            }
            set(&mut cfg.mc.cycles, cycles);
            set(&mut cfg.mc.size, size);
        }
        Command::Solve { nodes, rwire, g_min, g_max, drive, tol, max_iter, block } => {
            let s = &mut cfg.solve;
            set(&mut s.nodes, nodes);
            set(&mut s.r_wire, rwire);
            set(&mut s.g_min, g_min);
            set(&mut s.g_max, g_max);
            set(&mut s.drive, drive);
            set(&mut s.tol, tol);
            set(&mut s.max_iter, max_iter);
            set(&mut s.block, block);
        }
        Command::Cwt { signal, length, scales, omega0 } => {
            if signal.is_some() {
                cfg.cwt.signal = signal;
            }
            set(&mut cfg.cwt.length, length);
            set(&mut cfg.cwt.scales, scales);
            set(&mut cfg.cwt.omega0, omega0);
        }
        Command::Kmeans { input, k, max_iter, tail, update } => {
            if input.is_some() {
                cfg.kmeans.input = input;
            }
            set(&mut cfg.kmeans.k, k);
            set(&mut cfg.kmeans.max_iter, max_iter);
            set(&mut cfg.kmeans.tail, tail);
            set(&mut cfg.kmeans.update, update);
        }
        Command::Train { data, train_limit, test_limit, epochs, batch_size, lr, momentum, mode, layer_config } => {
            let t = &mut cfg.train;
            if data.is_some() {
                t.data = data;
            }
            if train_limit.is_some() {
                t.train_limit = train_limit;
            }
            if test_limit.is_some() {
                t.test_limit = test_limit;
            }
            set(&mut t.epochs, epochs);
            set(&mut t.batch_size, batch_size);
            set(&mut t.learning_rate, lr);
            set(&mut t.momentum, momentum);
            set(&mut t.mode, mode);
            if layer_config.is_some() {
                t.layer_config = layer_config;
            }
        }
        Command::Infer { checkpoint, data, test_limit, batch_size, mode, layer_config, sweep } => {
            let s = &mut cfg.infer;
            if checkpoint.is_some() {
                s.checkpoint = checkpoint;
            }
            if data.is_some() {
                s.data = data;
            }
            if test_limit.is_some() {
                s.test_limit = test_limit;
            }
            set(&mut s.batch_size, batch_size);
            set(&mut s.mode, mode);
            if layer_config.is_some() {
                s.layer_config = layer_config;
            }
            if sweep.is_some() {
                s.sweep = sweep;
            }
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> CliResult<()> {
    let env_seed = std::env::var("MEMSIM_SEED").ok();
    let mut cfg = config::load(cli.global.config.as_deref(), env_seed.as_deref())?;
    apply_flags(&mut cfg, &cli.global, &cli.command)?;
    cfg.validate()?;

    let threads = cli.global.threads.unwrap_or(0);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::runtime("threads", e))?;
    }

    let mut out = OutputDir::create(&cfg.out)?;
    let run = Run {
        cfg: &cfg,
        out: &mut out,
        plot_data: cli.global.emit == Some(Emit::PlotData),
    };
    match &cli.command {
        Command::Xbar { .. } => commands::xbar(run)?,
        Command::Matmul { a, b, .. } => commands::matmul(run, a.as_deref(), b.as_deref())?,
        Command::Mc { .. } => commands::mc(run)?,
        Command::Solve { .. } => commands::solve(run)?,
        Command::Cwt { .. } => commands::cwt(run)?,
        Command::Kmeans { .. } => commands::kmeans(run)?,
        Command::Train { .. } => commands::train_cmd(run)?,
        Command::Infer { .. } => commands::infer_cmd(run)?,
    }
    out.finish(cli.command.name(), &cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
