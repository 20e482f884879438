//! Subcommand implementations. Each experiment command resolves its config,
//! runs the protocol, writes one CSV plus its manifest, and prints a short
//! note per output. The CSV bytes depend only on the resolved config and
//! master seed, never on thread count or timing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use misspec::analytic::{breakdown_pinv, expected_mse_ridge, Regime};
use misspec::dataset::{
    ingest_csv, run_realdata_sweep, summarize_double_descent, write_planted_csv,
    ColumnOrderPolicy, RealDataSweepPlan,
};
use misspec::model::{CovarianceSpec, ProblemConfig};
use misspec::montecarlo::{
    run_covariance_experiment, run_decomposition_sweep, run_sigma_sweep, run_sweep,
    CovarianceSeedPolicy, SamplingMode, SweepAxis, SweepPlan, SweepRow,
};
use misspec::rmt::estimate_moments;
use misspec::validate::{all_passed, run_validation, ValidationOptions};
use misspec::StreamKey;

use crate::config::{
    ColumnOrder, Config, CovSeedPolicy, Mode, MonteCarloConfig, Protocol, RealDataConfig,
};
use crate::csvio::{Cell, Table};
use crate::error::CliError;
use crate::manifest::{sha256_hex, OutputRecord, RunManifest};

pub struct CommandContext {
    pub config: Config,
    pub out_path: PathBuf,
    pub threads: usize,
    pub quick: bool,
}

fn write_output(
    ctx: &CommandContext,
    command: &str,
    table: &Table,
    timings: Vec<(String, u128)>,
    notes: Vec<String>,
) -> Result<(), CliError> {
    let csv = table.render();
    std::fs::write(&ctx.out_path, csv.as_bytes())
        .map_err(|e| CliError::Io(format!("{}: {e}", ctx.out_path.display())))?;
    let manifest = RunManifest {
        tool: "misspec".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        master_seed: ctx.config.master_seed,
        threads: ctx.threads,
        resolved_config: ctx.config.resolved_toml()?,
        timings_ms: timings,
        outputs: vec![OutputRecord {
            path: ctx.out_path.display().to_string(),
            sha256: sha256_hex(csv.as_bytes()),
            rows: table.row_count(),
        }],
        notes,
    };
    manifest.write_next_to(&ctx.out_path)?;
    println!(
        "wrote {} ({} rows) and {}",
        ctx.out_path.display(),
        table.row_count(),
        RunManifest::manifest_path(&ctx.out_path).display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// analytic
// ---------------------------------------------------------------------------

const ANALYTIC_HEADER: [&str; 11] = [
    "p_s", "p_c", "p_f", "n", "sigma_v2", "sigma_hat2", "eps", "eps_f", "eps_y", "regime",
    "formula_id",
];

pub fn cmd_analytic(ctx: &CommandContext) -> Result<(), CliError> {
    let cfg = ctx
        .config
        .analytic
        .clone()
        .ok_or_else(|| CliError::Config("missing [analytic] section".into()))?;
    if cfg.power_x_s <= 0.0 || cfg.power_x_c <= 0.0 {
        return Err(CliError::Config("component powers must be positive".into()));
    }
    let start = Instant::now();
    let mut table = Table::new(ANALYTIC_HEADER.to_vec());
    let key = StreamKey::root(ctx.config.master_seed);
    for (cell_idx, &p_f) in cfg.p_f.iter().enumerate() {
        let tr_s = cfg.power_x_s * cfg.p_s as f64;
        let tr_c = cfg.power_x_c * cfg.p_c as f64;
        // The ridge moments depend on the shape only; share them across the
        // noise levels of one fake count.
        let moments = if cfg.sigma_hat2 > 0.0 && cfg.p_s + p_f > 1 {
            Some(
                estimate_moments::<f64, _>(
                    cfg.n,
                    cfg.p_s + p_f,
                    cfg.sigma_hat2,
                    cfg.p_s,
                    cfg.num_spectra.max(2),
                    &mut key.descend(&[1, cell_idx as u64]).rng(),
                )
                .map_err(misspec::Error::from)?,
            )
        } else {
            None
        };
        for &sigma_v2 in &cfg.sigma_v2 {
            let regime = Regime::of(cfg.n, cfg.p_s + p_f);
            let (eps, eps_f, eps_y, formula): (
                Option<f64>,
                Option<f64>,
                Option<f64>,
                &'static str,
            ) = if cfg.sigma_hat2 == 0.0 {
                match breakdown_pinv(cfg.p_s, p_f, cfg.n, tr_s, tr_c, sigma_v2) {
                    Ok(b) => (
                        Some(b.eps),
                        Some(b.eps_f),
                        Some(b.eps_y),
                        match b.regime {
                            Regime::Under => "pinv_under",
                            Regime::Over => "pinv_over",
                            Regime::NearThreshold => unreachable!(),
                        },
                    ),
                    Err(misspec::Error::NearThreshold { .. }) => (None, None, None, ""),
                    Err(e) => return Err(e.into()),
                }
            } else {
                match &moments {
                    Some(m) => {
                        let (eps, _) =
                            expected_mse_ridge(cfg.p_s, p_f, tr_s, tr_c, sigma_v2, m)
                                .map_err(CliError::from)?;
                        (Some(eps), None, None, "ridge_moments")
                    }
                    None => (None, None, None, ""),
                }
            };
            table.push(vec![
                Cell::Uint(cfg.p_s as u64),
                Cell::Uint(cfg.p_c as u64),
                Cell::Uint(p_f as u64),
                Cell::Uint(cfg.n as u64),
                Cell::Float(sigma_v2),
                Cell::Float(cfg.sigma_hat2),
                Cell::OptFloat(eps),
                Cell::OptFloat(eps_f),
                Cell::OptFloat(eps_y),
                Cell::Str(regime.as_str().into()),
                Cell::Str(formula.into()),
            ]);
        }
    }
    let timings = vec![("cmd_analytic".to_string(), start.elapsed().as_millis())];
    write_output(ctx, "analytic", &table, timings, Vec::new())
}

// ---------------------------------------------------------------------------
// montecarlo
// ---------------------------------------------------------------------------

const MC_HEADER: [&str; 30] = [
    "protocol",
    "p_s",
    "p_c",
    "p_f",
    "n",
    "sigma_v2",
    "sigma_hat2",
    "alpha",
    "alpha_f",
    "m_r",
    "m_u",
    "mode",
    "eps_hat",
    "eps_se",
    "eps_s_hat",
    "eps_c_hat",
    "eps_f_hat",
    "eps_f_se",
    "eps_y_hat",
    "eps_y_se",
    "identity_gap",
    "identity_gap_se",
    "eps_analytic",
    "eps_analytic_se",
    "eps_f_analytic",
    "eps_y_analytic",
    "regime",
    "formula",
    "eps_hat_norm",
    "eps_analytic_norm",
];

struct McRowExtra {
    protocol: &'static str,
    alpha: Option<(f64, f64)>,
}

fn push_mc_row(table: &mut Table, row: &SweepRow<f64>, extra: &McRowExtra, mode: Mode) {
    let tr_k_x = row.config.tr_k_x();
    let norm = |x: f64| if tr_k_x > 0.0 { Some(x / tr_k_x) } else { None };
    let analytic = row.analytic.as_ref();
    table.push(vec![
        Cell::Str(extra.protocol.into()),
        Cell::Uint(row.config.p_s as u64),
        Cell::Uint(row.config.p_c as u64),
        Cell::Uint(row.config.p_f as u64),
        Cell::Uint(row.config.n as u64),
        Cell::Float(row.config.sigma_v2),
        Cell::Float(row.config.sigma_hat2),
        Cell::OptFloat(extra.alpha.map(|a| a.0)),
        Cell::OptFloat(extra.alpha.map(|a| a.1)),
        Cell::Uint(row.cell.m_r as u64),
        Cell::Uint(row.cell.m_u as u64),
        Cell::Str(
            match mode {
                Mode::Full => "full",
                Mode::Conditional => "conditional",
            }
            .into(),
        ),
        Cell::Float(row.cell.eps_hat),
        Cell::OptFloat(row.cell.eps_se),
        Cell::Float(row.cell.eps_s_hat),
        Cell::Float(row.cell.eps_c_hat),
        Cell::Float(row.cell.eps_f_hat),
        Cell::OptFloat(row.cell.eps_f_se),
        Cell::OptFloat(row.cell.eps_y_hat),
        Cell::OptFloat(row.cell.eps_y_se),
        Cell::OptFloat(row.cell.identity_gap),
        Cell::OptFloat(row.cell.identity_gap_se),
        Cell::OptFloat(analytic.map(|a| a.eps)),
        Cell::OptFloat(analytic.map(|a| a.eps_se)),
        Cell::OptFloat(analytic.and_then(|a| a.eps_f)),
        Cell::OptFloat(analytic.and_then(|a| a.eps_y)),
        Cell::Str(row.regime.as_str().into()),
        Cell::Str(analytic.map(|a| a.formula).unwrap_or("").into()),
        Cell::OptFloat(norm(row.cell.eps_hat)),
        Cell::OptFloat(analytic.and_then(|a| norm(a.eps))),
    ]);
}

fn base_config(mc: &MonteCarloConfig, sigma_v2: f64) -> ProblemConfig<f64> {
    ProblemConfig {
        p_s: mc.p_s,
        p_c: mc.p_c,
        p_f: 0,
        n: mc.n,
        sigma_v2,
        sigma_hat2: mc.sigma_hat2,
        cov_x_s: CovarianceSpec::unit(mc.p_s),
        cov_x_c: CovarianceSpec::unit(mc.p_c),
    }
}

fn base_plan(
    mc: &MonteCarloConfig,
    sigma_v2: f64,
    axis: SweepAxis<f64>,
    master_seed: u64,
    experiment_index: u64,
) -> SweepPlan<f64> {
    let mut plan = SweepPlan::new(base_config(mc, sigma_v2), axis);
    plan.m_r = mc.m_r;
    plan.m_u = mc.m_u;
    plan.mode = match mc.mode {
        Mode::Full => SamplingMode::FullSampling,
        Mode::Conditional => SamplingMode::ConditionalTrace,
    };
    plan.master_seed = master_seed;
    plan.experiment_index = experiment_index;
    plan.num_spectra = mc.num_spectra;
    plan.cov_seed_policy = match mc.cov_seed_policy {
        CovSeedPolicy::Fixed => CovarianceSeedPolicy::FixedPerExperiment,
        CovSeedPolicy::PerRealization => CovarianceSeedPolicy::RedrawPerRealization,
    };
    plan
}

pub fn cmd_montecarlo(ctx: &CommandContext) -> Result<(), CliError> {
    let mc = ctx
        .config
        .montecarlo
        .clone()
        .ok_or_else(|| CliError::Config("missing [montecarlo] section".into()))?;
    if mc.sigma_v2.is_empty() {
        return Err(CliError::Config("sigma_v2 list must not be empty".into()));
    }
    let start = Instant::now();
    let mut table = Table::new(MC_HEADER.to_vec());
    let mut notes = Vec::new();
    let mut timings = Vec::new();
    let mut experiment_index = 0u64;

    for &sigma_v2 in &mc.sigma_v2 {
        match mc.protocol {
            Protocol::FakeSweep => {
                let plan = base_plan(
                    &mc,
                    sigma_v2,
                    SweepAxis::FakeCount(mc.p_f.clone()),
                    ctx.config.master_seed,
                    experiment_index,
                );
                experiment_index += 1;
                let t = Instant::now();
                let sweep = run_sweep(&plan)?;
                timings.push((
                    format!("fake_sweep sigma_v2={sigma_v2}"),
                    t.elapsed().as_millis(),
                ));
                let extra = McRowExtra {
                    protocol: "fake_sweep",
                    alpha: None,
                };
                for row in &sweep.rows {
                    push_mc_row(&mut table, row, &extra, mc.mode);
                }
            }
            Protocol::SigmaSweep => {
                let fake_counts = if mc.p_f.is_empty() { vec![0] } else { mc.p_f.clone() };
                for &p_f in &fake_counts {
                    let mut plan = base_plan(
                        &mc,
                        sigma_v2,
                        SweepAxis::AssumedNoise(mc.sigma_hat2_axis.clone()),
                        ctx.config.master_seed,
                        experiment_index,
                    );
                    experiment_index += 1;
                    plan.base.p_f = p_f;
                    let t = Instant::now();
                    let result = run_sigma_sweep(&plan)?;
                    timings.push((
                        format!("sigma_sweep sigma_v2={sigma_v2} p_f={p_f}"),
                        t.elapsed().as_millis(),
                    ));
                    let extra = McRowExtra {
                        protocol: "sigma_sweep",
                        alpha: None,
                    };
                    for row in &result.rows {
                        push_mc_row(&mut table, row, &extra, mc.mode);
                    }
                    let mut note = format!(
                        "sigma_sweep p_f={p_f} sigma_v2={sigma_v2}: empirical argmin sigma_hat2 = {}",
                        result.argmin_sigma_hat2
                    );
                    if let Some(opt) = result.lemma_sigma_hat2 {
                        note.push_str(&format!(", closed-form optimum = {opt}"));
                    }
                    notes.push(note);
                }
            }
            Protocol::Decomposition => {
                let mut plan = base_plan(
                    &mc,
                    sigma_v2,
                    SweepAxis::FakeCount(mc.p_f.clone()),
                    ctx.config.master_seed,
                    experiment_index,
                );
                experiment_index += 1;
                plan.test_points = mc.test_points;
                let t = Instant::now();
                let sweep = run_decomposition_sweep(&plan)?;
                timings.push((
                    format!("decomposition sigma_v2={sigma_v2}"),
                    t.elapsed().as_millis(),
                ));
                let extra = McRowExtra {
                    protocol: "decomposition",
                    alpha: None,
                };
                for row in &sweep.rows {
                    push_mc_row(&mut table, row, &extra, mc.mode);
                }
            }
            Protocol::Covariance => {
                let plan = base_plan(
                    &mc,
                    sigma_v2,
                    SweepAxis::FakeCount(mc.p_f.clone()),
                    ctx.config.master_seed,
                    experiment_index,
                );
                experiment_index += mc.alphas.len() as u64;
                let t = Instant::now();
                let results = run_covariance_experiment(&plan, &mc.alphas)?;
                timings.push((
                    format!("covariance sigma_v2={sigma_v2}"),
                    t.elapsed().as_millis(),
                ));
                for (decay, sweep) in &results {
                    let extra = McRowExtra {
                        protocol: "covariance",
                        alpha: Some((decay.alpha, decay.alpha_f)),
                    };
                    for row in &sweep.rows {
                        push_mc_row(&mut table, row, &extra, mc.mode);
                    }
                }
            }
        }
    }
    timings.push(("cmd_montecarlo".to_string(), start.elapsed().as_millis()));
    write_output(ctx, "montecarlo", &table, timings, notes)
}

// ---------------------------------------------------------------------------
// realdata
// ---------------------------------------------------------------------------

const REALDATA_HEADER: [&str; 7] = [
    "width",
    "sigma_hat2",
    "mean_error",
    "stderr",
    "n_train",
    "n_test",
    "repeats",
];

pub fn cmd_realdata(ctx: &CommandContext, csv_path: &Path) -> Result<(), CliError> {
    let rd: RealDataConfig = ctx
        .config
        .realdata
        .clone()
        .ok_or_else(|| CliError::Config("missing [realdata] section".into()))?;
    if let Some(synth) = &rd.synthetic {
        if !csv_path.exists() {
            write_planted_csv(csv_path, synth.rows, synth.cols, synth.sigma_v2, synth.seed)
                .map_err(CliError::from)?;
            println!(
                "generated planted-signal stand-in at {} ({} x {})",
                csv_path.display(),
                synth.rows,
                synth.cols
            );
        }
    }
    let start = Instant::now();
    let data = ingest_csv::<f64>(csv_path, &rd.response_column)?;
    if data.provenance.rejected_rows > 0 {
        println!(
            "ingest: dropped {} row(s) with unusable cells",
            data.provenance.rejected_rows
        );
    }
    let plan = RealDataSweepPlan {
        train_count: rd.train_count,
        test_count: rd.test_count,
        width_axis: rd.width_axis.clone(),
        sigma_hat2_values: rd.sigma_hat2.clone(),
        repeats: rd.repeats,
        column_order: match rd.column_order {
            ColumnOrder::AsIs => ColumnOrderPolicy::AsIs,
            ColumnOrder::Shuffled => ColumnOrderPolicy::ShuffledPerExperiment,
        },
        standardize: rd.standardize,
        master_seed: ctx.config.master_seed,
    };
    let result = run_realdata_sweep(&data, &plan)?;
    let mut table = Table::new(REALDATA_HEADER.to_vec());
    for row in &result.rows {
        table.push(vec![
            Cell::Uint(row.width as u64),
            Cell::Float(row.sigma_hat2),
            Cell::Float(row.mean_error),
            Cell::OptFloat(row.stderr),
            Cell::Uint(result.train_count as u64),
            Cell::Uint(result.test_count as u64),
            Cell::Uint(result.repeats as u64),
        ]);
    }
    // Per-ridge curve summaries.
    let mut notes = vec![format!(
        "source {} sha256 {} ({} rows dropped)",
        data.provenance.source, data.provenance.content_hash, data.provenance.rejected_rows
    )];
    for &sigma_hat2 in &rd.sigma_hat2 {
        let curve: Vec<(usize, f64)> = result
            .rows
            .iter()
            .filter(|r| r.sigma_hat2 == sigma_hat2)
            .map(|r| (r.width, r.mean_error))
            .collect();
        let line = match summarize_double_descent(&curve, rd.train_count) {
            Ok(s) => format!(
                "sigma_hat2={sigma_hat2}: peak at width {} (error {:.4}), min at width {} (error {:.4}), overparameterized optimum: {}",
                s.peak_width, s.peak_error, s.global_min_width, s.min_error, s.overparam_optimum
            ),
            Err(e) => format!("sigma_hat2={sigma_hat2}: no double-descent summary ({e})"),
        };
        println!("{line}");
        notes.push(line);
    }
    let timings = vec![("cmd_realdata".to_string(), start.elapsed().as_millis())];
    write_output(ctx, "realdata", &table, timings, notes)
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

pub fn cmd_validate(master_seed: Option<u64>, quick: bool) -> Result<(), CliError> {
    let mut opts = ValidationOptions {
        quick,
        ..Default::default()
    };
    if let Some(seed) = master_seed {
        opts.master_seed = seed;
    }
    let start = Instant::now();
    let reports = run_validation(&opts);
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &reports {
        println!(
            "{:<width$}  statistic {:>12.6e}  tolerance {:>10.3e}  {}",
            r.name,
            r.statistic,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" },
        );
    }
    let ok = all_passed(&reports);
    println!(
        "{} of {} checks passed in {:.1}s",
        reports.iter().filter(|r| r.passed).count(),
        reports.len(),
        start.elapsed().as_secs_f64()
    );
    if ok {
        Ok(())
    } else {
        Err(CliError::Validation)
    }
}
