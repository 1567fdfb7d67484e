use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use memsim_core::apps::circuit::solve_circuit_hw;
use memsim_core::apps::cwt::{cwt_exact, cwt_hw, log_scales, normalized_correlation, two_tone_chirp, MorletKernelBank};
use memsim_core::apps::kmeans::{assignment_agreement, kmeans_exact, kmeans_hw, load_iris_or_synthetic, scale_features, KMeansParams};
use memsim_core::apps::WordLineCircuit;
use memsim_core::crossbar::{build_kcl_system, solve_ideal, solve_irdrop};
use memsim_core::dpe::{dpe_matmul, monte_carlo, McGrid};
use memsim_core::nn::{apply_overrides, infer, load_checkpoint, load_mnist, save_checkpoint, synthetic_digits, train, Dataset, LayerOverride, Model, TrainParams};
use memsim_core::numerics::io::read_csv;
use memsim_core::numerics::{matmul_exact, Purpose, SeededRng, StreamId};
use memsim_core::slicing::SliceScheme;
use memsim_core::Matrix;
use serde_json::json;

use crate::config::{RunConfig, SweepKind, XbarInput};
use crate::error::{CliError, CliResult, Context};
use crate::output::{csv_table, OutputDir};

pub const PLOT_DIR: &str = "plot-data";

pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub out: &'a mut OutputDir,
    pub plot_data: bool,
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn column(name: &str, values: &[f64]) -> String {
    csv_table(&["index", name], values.iter().enumerate().map(|(i, v)| vec![i.to_string(), v.to_string()]))
}

fn uniform_matrix(rows: usize, cols: usize, range: f64, seed: u64, tag: usize) -> Matrix {
    let mut r = SeededRng::new(seed, StreamId::new(Purpose::Operands).block(tag, 0));
    Matrix::from_fn(rows, cols, |_, _| r.uniform(-range, range))
}

pub fn xbar(run: Run) -> CliResult<()> {
    let cfg = run.cfg;
    let xb = &cfg.crossbar;
    let (lgs, hgs) = (cfg.device.lgs, cfg.device.hgs);
    let mut r = SeededRng::new(cfg.seed, StreamId::new(Purpose::Operands));
    let g = Matrix::from_fn(xb.rows, xb.cols, |_, _| r.uniform(lgs, hgs));
    let v_in: Vec<f64> = match cfg.xbar.input {
        XbarInput::Sine => (0..xb.rows).map(|i| xb.v_read * (PI * (i as f64 + 0.5) / xb.rows as f64).sin()).collect(),
        XbarInput::Random => (0..xb.rows).map(|_| r.uniform(0.0, xb.v_read)).collect(),
    };
    let sol = solve_irdrop(&v_in, &g, xb, cfg.xbar.tol, cfg.xbar.max_iter).context("xbar")?;
    let ideal = solve_ideal(&v_in, &g).context("xbar")?;
    let oracle_error = if cfg.xbar.oracle && xb.r_wire > 0.0 {
        let sys = build_kcl_system(&v_in, &g, xb).context("xbar oracle")?;
        let direct = sys.solve_direct().context("xbar oracle")?;
        Some(rel_err(&sol.currents, &sys.output_currents(&direct)))
    } else {
        None
    };
    run.out.matrix("wordline_voltages.csv", &sol.voltages.wordline)?;
    run.out.matrix("bitline_voltages.csv", &sol.voltages.bitline)?;
    run.out.text(
        "currents.csv",
        &csv_table(
            &["column", "current", "ideal_current"],
            sol.currents.iter().zip(&ideal).enumerate().map(|(j, (c, i))| vec![j.to_string(), c.to_string(), i.to_string()]),
        ),
    )?;
    run.out.json(
        "report.json",
        &json!({
            "iterations": sol.iterations,
            "converged": sol.converged,
            "oracle_relative_error": oracle_error,
            "irdrop_current_loss": rel_err(&sol.currents, &ideal),
        }),
    )?;
    if run.plot_data {
        run.out.text(&format!("{PLOT_DIR}/convergence.csv"), &column("max_change", &sol.change_history))?;
    }
    Ok(())
}

pub fn matmul(run: Run, a_path: Option<&Path>, b_path: Option<&Path>) -> CliResult<()> {
    let cfg = run.cfg;
    let m = &cfg.matmul;
    let a = match a_path {
        Some(p) => read_csv(p).map_err(|e| CliError::config("a", format!("{}: {e}", p.display())))?,
        None => uniform_matrix(m.m, m.k, m.range, cfg.seed, 0),
    };
    let b = match b_path {
        Some(p) => read_csv(p).map_err(|e| CliError::config("b", format!("{}: {e}", p.display())))?,
        None => uniform_matrix(m.k, m.n, m.range, cfg.seed, 1),
    };
    let exact = matmul_exact(&a, &b).context("matmul")?;
    let rep = dpe_matmul(&a, &b, &cfg.engine(), 0)
        .and_then(|r| r.with_reference(&exact))
        .context("matmul")?;
    run.out.matrix("result.csv", &rep.result)?;
    run.out.json(
        "report.json",
        &json!({
            "re": rep.relative_error,
            "iterations": rep.iterations,
            "converged": rep.converged,
            "shape": [a.rows(), a.cols(), b.cols()],
            "saturated_outputs": rep.block_stats.iter().map(|s| s.saturated).sum::<usize>(),
            "config": cfg,
        }),
    )?;
    if run.plot_data {
        run.out.text(
            &format!("{PLOT_DIR}/scatter.csv"),
            &csv_table(
                &["ideal", "simulated"],
                exact.data().iter().zip(rep.result.data()).map(|(i, s)| vec![i.to_string(), s.to_string()]),
            ),
        )?;
    }
    Ok(())
}

pub fn mc(run: Run) -> CliResult<()> {
    let cfg = run.cfg;
    let s = &cfg.mc;
    let a = uniform_matrix(s.size, s.size, 1.0, cfg.seed, 0);
    let b = uniform_matrix(s.size, s.size, 1.0, cfg.seed, 1);
    let grid = McGrid {
        cvs: s.cvs.clone(),
        block_sizes: s.block_sizes.clone(),
        schemes: s.schemes.clone(),
    };
    let table = monte_carlo(&cfg.engine(), &grid, &a, &b, s.cycles).context("mc")?;
    run.out.text("mc.csv", &table.to_csv())?;
    run.out.text("summary.csv", &table.summary_csv())?;
    if run.plot_data {
        run.out.text(&format!("{PLOT_DIR}/boxplot.csv"), &table.summary_csv())?;
    }
    Ok(())
}

pub fn solve(run: Run) -> CliResult<()> {
    let cfg = run.cfg;
    let s = &cfg.solve;
    let circuit = WordLineCircuit::random(s.nodes, s.r_wire, s.g_min, s.g_max, s.drive, cfg.seed);
    let mut engine = cfg.engine();
    engine.weight_scheme = s.scheme.clone();
    engine.input_scheme = s.scheme.clone();
    engine.crossbar = engine.crossbar.with_size(s.block, s.block);
    engine
        .validate()
        .map_err(|e| CliError::config("solve", e.to_string()))?;
    let rep = solve_circuit_hw(&circuit, &engine, s.tol, s.max_iter).context("solve")?;
    run.out.text(
        "voltages.csv",
        &csv_table(
            &["node", "hardware", "software", "reference"],
            (0..s.nodes).map(|i| {
                vec![
                    i.to_string(),
                    rep.hardware.voltages[i].to_string(),
                    rep.software.voltages[i].to_string(),
                    rep.reference[i].to_string(),
                ]
            }),
        ),
    )?;
    let len = rep.hardware.history.len().max(rep.software.history.len());
    let cell = |h: &[f64], i: usize| h.get(i).map(|v| v.to_string()).unwrap_or_default();
    let history = csv_table(
        &["iteration", "hardware", "software"],
        (0..len).map(|i| vec![(i + 1).to_string(), cell(&rep.hardware.history, i), cell(&rep.software.history, i)]),
    );
    run.out.text("residual_history.csv", &history)?;
    run.out.json(
        "report.json",
        &json!({
            "hardware_iterations": rep.hardware.iterations(),
            "software_iterations": rep.software.iterations(),
            "hardware_converged": rep.hardware.converged,
            "software_converged": rep.software.converged,
            "hardware_rms_error": rep.hardware_rms_error,
            "hardware_true_residual": rep.hardware_true_residual,
        }),
    )?;
    if run.plot_data {
        run.out.text(&format!("{PLOT_DIR}/residual_history.csv"), &history)?;
    }
    Ok(())
}

fn read_signal(path: &Path) -> CliResult<Vec<f64>> {
    let m = read_csv(path).map_err(|e| CliError::config("cwt.signal", format!("{}: {e}", path.display())))?;
    if m.cols() != 1 {
        return Err(CliError::config("cwt.signal", format!("expected one column, found {}", m.cols())));
    }
    Ok(m.into_vec())
}

pub fn cwt(run: Run) -> CliResult<()> {
    let cfg = run.cfg;
    let c = &cfg.cwt;
    let signal = match &c.signal {
        Some(p) => read_signal(p)?,
        None => two_tone_chirp(c.length, c.f0, c.f1),
    };
    let scales = log_scales(c.scales.min, c.scales.max, c.scales.steps);
    let bank = MorletKernelBank::new(&scales, c.omega0).map_err(|e| CliError::config("cwt.scales", e.to_string()))?;
    let mut engine = cfg.engine();
    engine.weight_scheme = c.weight_scheme.clone();
    engine.input_scheme = c.input_scheme.clone();
    let hw = cwt_hw(&signal, &bank, &engine).context("cwt")?;
    let exact = cwt_exact(&signal, &bank).context("cwt")?;
    let corr = normalized_correlation(&hw, &exact).ok();
    run.out.matrix("power.csv", &hw)?;
    run.out.matrix("power_exact.csv", &exact)?;
    let freqs = csv_table(
        &["scale", "frequency"],
        bank.scales.iter().zip(bank.frequencies()).map(|(s, f)| vec![s.to_string(), f.to_string()]),
    );
    run.out.text("scales.csv", &freqs)?;
    run.out.json(
        "report.json",
        &json!({ "correlation": corr, "kernel_length": bank.length, "samples": signal.len() }),
    )?;
    if run.plot_data {
        run.out.text(&format!("{PLOT_DIR}/signal.csv"), &column("value", &signal))?;
        run.out.text(&format!("{PLOT_DIR}/scales.csv"), &freqs)?;
    }
    Ok(())
}

pub fn kmeans(run: Run) -> CliResult<()> {
    let cfg = run.cfg;
    let k = &cfg.kmeans;
    if let Some(p) = &k.input {
        if !p.exists() {
            return Err(CliError::config("kmeans.input", format!("{} not found", p.display())));
        }
    }
    let (raw, labels, synthetic) = load_iris_or_synthetic(k.input.as_deref(), cfg.seed).context("kmeans input")?;
    let x = scale_features(&raw);
    let params = KMeansParams {
        k: k.k,
        max_iter: k.max_iter,
        tail: k.tail,
        update: k.update,
        seed: cfg.seed,
    };
    let mut engine = cfg.engine();
    engine.weight_scheme = k.scheme.clone();
    engine.input_scheme = k.scheme.clone();
    let hw = kmeans_hw(&x, &engine, &params).context("kmeans")?;
    let exact = kmeans_exact(&x, &params).context("kmeans")?;
    run.out.text(
        "assignments.csv",
        &csv_table(
            &["point", "cluster", "exact_cluster"],
            hw.assignments.iter().zip(&exact.assignments).enumerate().map(|(i, (h, e))| vec![i.to_string(), h.to_string(), e.to_string()]),
        ),
    )?;
    run.out.matrix("centers.csv", &hw.centers)?;
    run.out.json(
        "report.json",
        &json!({
            "synthetic_input": synthetic,
            "iterations": hw.iterations,
            "converged": hw.converged,
            "exact_iterations": exact.iterations,
            "agreement_with_exact": assignment_agreement(&hw.assignments, &exact.assignments, k.k),
            "agreement_with_labels": labels.as_ref().map(|l| assignment_agreement(&hw.assignments, l, k.k)),
            "sse": hw.sse_history.last(),
        }),
    )?;
    if run.plot_data {
        run.out.text(&format!("{PLOT_DIR}/sse_history.csv"), &column("sse", &hw.sse_history))?;
    }
    Ok(())
}

fn read_overrides(path: Option<&Path>, key: &str) -> CliResult<Vec<LayerOverride>> {
    let Some(p) = path else { return Ok(Vec::new()) };
    let text = fs::read_to_string(p).map_err(|e| CliError::config(key, format!("{}: {e}", p.display())))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| CliError::config(format!("{key}{}", path_suffix(e.path())), e.into_inner().to_string()))
}

fn path_suffix(p: &serde_path_to_error::Path) -> String {
    let s = p.to_string();
    match s.as_str() {
        "." => String::new(),
        _ if s.starts_with('[') => s,
        _ => format!(".{s}"),
    }
}

/// Train and test sets: IDX files when a directory is given, synthetic digits otherwise.
fn datasets(dir: Option<&Path>, train_limit: Option<usize>, test_limit: Option<usize>, seed: u64, key: &str) -> CliResult<(Dataset, Dataset)> {
    let (train_set, test_set) = match dir {
        Some(d) => load_mnist(d).map_err(|e| CliError::config(key, format!("{}: {e}", d.display())))?,
        None => (
            synthetic_digits(train_limit.unwrap_or(2000), seed),
            synthetic_digits(test_limit.unwrap_or(1000), seed.wrapping_add(1)),
        ),
    };
    let cap = |d: Dataset, n: Option<usize>| match n {
        Some(n) if n < d.len() => d.take(n),
        _ => d,
    };
    Ok((cap(train_set, train_limit), cap(test_set, test_limit)))
}

pub fn train_cmd(run: Run) -> CliResult<()> {
    let cfg = run.cfg;
    let t = &cfg.train;
    let (train_set, test_set) = datasets(t.data.as_deref(), t.train_limit, t.test_limit, cfg.seed, "train.data")?;
    let overrides = read_overrides(t.layer_config.as_deref(), "train.layer_config")?;
    let mut model = Model::desk_cnn(cfg.seed);
    apply_overrides(&mut model, t.mode, &cfg.engine(), &overrides).map_err(|e| CliError::config("train.layer_config", e.to_string()))?;
    let params = TrainParams {
        epochs: t.epochs,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        momentum: t.momentum,
        seed: cfg.seed,
    };
    params.validate().map_err(|e| CliError::config("train", e.to_string()))?;
    let log = train(&mut model, &train_set, Some(&test_set), &params).context("train")?;
    save_checkpoint(&model, &run.out.path("checkpoint")).context("checkpoint")?;
    run.out.adopt_dir("checkpoint")?;
    let table = csv_table(
        &["epoch", "loss", "train_accuracy", "test_accuracy"],
        log.epochs.iter().map(|e| {
            vec![
                e.epoch.to_string(),
                e.loss.to_string(),
                e.train_acc.to_string(),
                e.test_acc.map(|a| a.to_string()).unwrap_or_default(),
            ]
        }),
    );
    run.out.text("training_log.csv", &table)?;
    run.out.json(
        "report.json",
        &json!({
            "train_samples": train_set.len(),
            "test_samples": test_set.len(),
            "final_test_accuracy": log.epochs.last().and_then(|e| e.test_acc),
            "halted": log.halted,
        }),
    )?;
    if run.plot_data {
        run.out.text(&format!("{PLOT_DIR}/accuracy.csv"), &table)?;
    }
    Ok(())
}

pub fn infer_cmd(run: Run) -> CliResult<()> {
    let cfg = run.cfg;
    let s = &cfg.infer;
    let ckpt = s
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::config("infer.checkpoint", "a checkpoint directory is required"))?;
    let base_model = load_checkpoint(ckpt).map_err(|e| CliError::config("infer.checkpoint", format!("{}: {e}", ckpt.display())))?;
    let (_, test_set) = datasets(s.data.as_deref(), Some(0), s.test_limit, cfg.seed, "infer.data")?;
    let overrides = read_overrides(s.layer_config.as_deref(), "infer.layer_config")?;
    let evaluate = |engine: &memsim_core::dpe::EngineConfig| -> CliResult<memsim_core::nn::InferReport> {
        let mut model = base_model.clone();
        apply_overrides(&mut model, s.mode, engine, &overrides).map_err(|e| CliError::config("infer.layer_config", e.to_string()))?;
        if model.has_hardware() {
            model.update_weights().context("program")?;
        }
        infer(&mut model, &test_set, s.batch_size).context("infer")
    };
    let rep = evaluate(&cfg.engine())?;
    run.out.text(
        "per_class.csv",
        &csv_table(
            &["class", "support", "correct", "accuracy"],
            rep.per_class.iter().map(|c| vec![c.class.to_string(), c.support.to_string(), c.correct.to_string(), c.accuracy.to_string()]),
        ),
    )?;
    run.out.text(
        "predictions.csv",
        &csv_table(
            &["sample", "label", "prediction"],
            rep.predictions.iter().zip(&test_set.labels).enumerate().map(|(i, (p, l))| vec![i.to_string(), l.to_string(), p.to_string()]),
        ),
    )?;
    let mut sweep_rows = Vec::new();
    if let Some(sw) = &s.sweep {
        for &v in &sw.values {
            let mut engine = cfg.engine();
            match sw.kind {
                SweepKind::Slices => {
                    if v.fract() != 0.0 || v < 2.0 {
                        return Err(CliError::config("infer.sweep.values", format!("slice count {v} must be an integer >= 2")));
                    }
                    let scheme = SliceScheme::one_bit(v as u32).map_err(|e| CliError::config("infer.sweep.values", e.to_string()))?;
                    engine.weight_scheme = scheme.clone();
                    engine.input_scheme = scheme;
                }
                SweepKind::Cv => engine.device.cv = v,
            }
            engine.validate().map_err(|e| CliError::config("infer.sweep.values", e.to_string()))?;
            sweep_rows.push((v, evaluate(&engine)?.accuracy));
        }
        let table = csv_table(
            &["value", "accuracy"],
            sweep_rows.iter().map(|(v, a)| vec![v.to_string(), a.to_string()]),
        );
        run.out.text("sweep.csv", &table)?;
        if run.plot_data {
            run.out.text(&format!("{PLOT_DIR}/sweep.csv"), &table)?;
        }
    }
    run.out.json(
        "report.json",
        &json!({
            "accuracy": rep.accuracy,
            "test_samples": test_set.len(),
            "sweep": s.sweep.as_ref().map(|sw| json!({
                "kind": sw.kind,
                "points": sweep_rows.iter().map(|(v, a)| json!({"value": v, "accuracy": a})).collect::<Vec<_>>(),
            })),
        }),
    )?;
    Ok(())
}
