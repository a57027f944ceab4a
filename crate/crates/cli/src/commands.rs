use std::path::{Path, PathBuf};

use log::warn;
use mlgem_core::evaluate::metric_report;
use mlgem_core::select::{DEFAULT_FOLDS, DEFAULT_GAMMA};
use mlgem_core::{
    em_fit, fit as fit_method, roc_curve, sample_panel, select_lambda, test_equal_cross_blocks,
    test_sigma0_zero, BlockNorm, Criterion, FitMethod, FitReport, FitSettings, GlassoSettings,
    LambdaGrid, PenaltyPair,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{GridFile, RocConfig, SimulateConfig, Table1Config};
use crate::error::{CliError, CliResult};
use crate::io::{self, num, EstimateManifest, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Copy)]
pub struct Globals {
    pub seed: Option<u64>,
    pub gamma: Option<f64>,
    pub folds: Option<usize>,
    pub delta: Option<f64>,
    pub max_iter: Option<usize>,
    pub format: Format,
}

impl Globals {
    fn settings(&self, p: usize) -> CliResult<FitSettings> {
        let mut s = FitSettings::new(p);
        if let Some(d) = self.delta {
            if !(d > 0.0) {
                return Err(CliError::Validation("--delta must be positive".into()));
            }
            s.delta = d;
        }
        if let Some(m) = self.max_iter {
            if m == 0 {
                return Err(CliError::Validation("--max-iter must be at least 1".into()));
            }
            s.max_iterations = m;
        }
        Ok(s)
    }

    fn criterion(&self, kind: CriterionKind, seed: u64) -> Criterion {
        match kind {
            CriterionKind::Ebic => Criterion::Ebic {
                gamma: self.gamma.unwrap_or(DEFAULT_GAMMA),
            },
            CriterionKind::Cv => Criterion::Cv {
                folds: self.folds.unwrap_or(DEFAULT_FOLDS),
                seed,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CriterionKind {
    Ebic,
    Cv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    Sigma0,
    EqualBlocks,
}

fn check_output_dir(out: &Path) -> CliResult<()> {
    if out.is_file() {
        return Err(CliError::io(out, "output path is an existing file"));
    }
    Ok(())
}

fn fit_manifest(
    report: &FitReport,
    method: FitMethod,
    penalties: PenaltyPair,
    provenance: Provenance,
) -> EstimateManifest {
    let mut m = EstimateManifest::for_stack(&report.estimate, provenance);
    m.method = Some(method.to_string());
    m.lambda1 = Some(penalties.lambda1);
    m.lambda2 = Some(penalties.lambda2);
    m.converged = Some(report.converged);
    m.iterations = Some(report.iterations);
    m.wall_time_seconds = Some(report.wall_time_seconds);
    m.objective_trace = report.objective_trace.clone();
    m.edge_count = Some(report.edge_count);
    m.warnings = report.warnings.clone();
    m
}

fn summarise_fit(
    g: &Globals,
    manifest: &EstimateManifest,
    report: &FitReport,
    out: &Path,
) -> CliResult<()> {
    match g.format {
        Format::Json => io::print(&format!(
            "{}\n",
            serde_json::to_string_pretty(manifest).expect("serialises")
        )),
        _ => io::print(&format!(
            "{}: {} after {} iterations in {:.2} s, objective {:.6}, {} edges -> {}\n",
            manifest.method.as_deref().unwrap_or("fit"),
            if report.converged {
                "converged"
            } else {
                "not converged"
            },
            report.iterations,
            report.wall_time_seconds,
            report.final_objective(),
            report.edge_count,
            out.display()
        )),
    }
}

fn convergence_status(report: &FitReport) -> CliResult<()> {
    if report.converged {
        Ok(())
    } else {
        Err(CliError::Convergence(format!(
            "stopped after {} iterations; partial results written",
            report.iterations
        )))
    }
}

pub fn simulate(g: &Globals, config: &Path, out: &Path) -> CliResult<()> {
    let mut cfg: SimulateConfig = io::read_json(config)?;
    if let Some(seed) = g.seed {
        cfg.scenario.seed = seed;
    }
    cfg.scenario
        .validate()
        .map_err(|e| CliError::invalid(config, e))?;
    check_output_dir(out)?;
    let (data, truth) = sample_panel(&cfg.scenario.spec(0))?;
    let prov = Provenance::new(Some(cfg.scenario.seed), &cfg);
    io::create_dir(out)?;
    io::write_dataset(&out.join("data.csv"), &data, prov.clone())?;
    io::write_estimate(
        &out.join("truth"),
        &truth,
        &EstimateManifest::for_stack(&truth, prov.clone()),
    )?;
    io::write_json(
        &out.join("config.json"),
        &json!({ "config": cfg, "provenance": prov }),
    )?;
    if g.format == Format::Json {
        io::print(&format!("{}\n", json!({ "out": out, "provenance": prov })))
    } else {
        io::print(&format!(
            "simulated n = {}, K = {}, p = {} -> {}\n",
            data.n(),
            data.k_categories(),
            data.p(),
            out.display()
        ))
    }
}

#[derive(Serialize)]
struct FitRun<'a> {
    command: &'a str,
    data_sha256: String,
    method: FitMethod,
    lambda1: f64,
    lambda2: f64,
    init_sha256: Option<String>,
    delta: f64,
    max_iterations: usize,
    glasso: GlassoSettings,
}

pub struct FitArgs {
    pub data: PathBuf,
    pub method: FitMethod,
    pub lambda1: f64,
    pub lambda2: f64,
    pub init: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn fit(g: &Globals, args: &FitArgs) -> CliResult<()> {
    let data = io::read_dataset(&args.data)?;
    let penalties = PenaltyPair::new(args.lambda1, args.lambda2)?;
    let settings = g.settings(data.p())?;
    let init = match &args.init {
        Some(dir) => {
            if args.method != FitMethod::Em {
                return Err(CliError::Validation(
                    "--init is supported for --method em only".into(),
                ));
            }
            Some(io::read_estimate(dir)?.0)
        }
        None => None,
    };
    check_output_dir(&args.out)?;
    let run = FitRun {
        command: "fit",
        data_sha256: io::file_sha256(&args.data)?,
        method: args.method,
        lambda1: penalties.lambda1,
        lambda2: penalties.lambda2,
        init_sha256: args
            .init
            .as_ref()
            .map(|d| io::file_sha256(&d.join(io::ESTIMATE_MANIFEST)))
            .transpose()?,
        delta: settings.delta,
        max_iterations: settings.max_iterations,
        glasso: settings.glasso,
    };
    let report = match &init {
        Some(init) => em_fit(&data, penalties, &settings.em_settings(false), Some(init))?,
        None => fit_method(args.method, &data, penalties, &settings)?,
    };
    for w in &report.warnings {
        warn!("{w}");
    }
    let manifest = fit_manifest(
        &report,
        args.method,
        penalties,
        Provenance::new(g.seed, &run),
    );
    io::write_estimate(&args.out, &report.estimate, &manifest)?;
    summarise_fit(g, &manifest, &report, &args.out)?;
    convergence_status(&report)
}

#[derive(Serialize)]
struct SelectRun<'a> {
    command: &'a str,
    data_sha256: String,
    method: FitMethod,
    criterion: Criterion,
    grid: &'a LambdaGrid,
    delta: f64,
    max_iterations: usize,
}

pub struct SelectArgs {
    pub data: PathBuf,
    pub method: FitMethod,
    pub criterion: CriterionKind,
    pub grid: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn select(g: &Globals, args: &SelectArgs) -> CliResult<()> {
    let data = io::read_dataset(&args.data)?;
    let grid = match &args.grid {
        Some(path) => {
            let file: GridFile = io::read_json(path)?;
            file.to_grid().map_err(|e| CliError::invalid(path, e))?
        }
        None => LambdaGrid::default_for(data.p(), data.n()),
    };
    let settings = g.settings(data.p())?;
    let seed = g.seed.unwrap_or(0);
    let criterion = g.criterion(args.criterion, seed);
    check_output_dir(&args.out)?;
    let run = SelectRun {
        command: "select",
        data_sha256: io::file_sha256(&args.data)?,
        method: args.method,
        criterion,
        grid: &grid,
        delta: settings.delta,
        max_iterations: settings.max_iterations,
    };
    let prov = Provenance::new(Some(seed), &run);
    let report = select_lambda(&data, &grid, criterion, args.method, &settings, false)?;

    let mut manifest = fit_manifest(&report.chosen_fit, args.method, report.chosen, prov.clone());
    manifest.selection = Some(json!({
        "criterion": criterion,
        "chosen": { "lambda1": report.chosen.lambda1, "lambda2": report.chosen.lambda2 },
        "scores": "scores.csv",
    }));
    io::write_estimate(&args.out, &report.chosen_fit.estimate, &manifest)?;
    let rows: Vec<Vec<String>> = report
        .scores
        .iter()
        .map(|s| {
            vec![
                num(s.penalties.lambda1),
                num(s.penalties.lambda2),
                s.score.map(num).unwrap_or_default(),
                s.error.clone().unwrap_or_default(),
                prov.version.clone(),
                seed.to_string(),
                prov.config_hash.clone(),
            ]
        })
        .collect();
    io::write_csv(
        &args.out.join("scores.csv"),
        &[
            "lambda1",
            "lambda2",
            "score",
            "error",
            "tool_version",
            "seed",
            "config_hash",
        ],
        &rows,
    )?;
    summarise_fit(g, &manifest, &report.chosen_fit, &args.out)?;
    convergence_status(&report.chosen_fit)
}

pub fn evaluate(g: &Globals, truth: &Path, estimate: &Path, out: Option<&Path>) -> CliResult<()> {
    let (truth_stack, truth_manifest) = io::read_estimate(truth)?;
    let (est_stack, est_manifest) = io::read_estimate(estimate)?;
    let report = metric_report(&truth_stack, &est_stack)?;
    let run = json!({
        "command": "evaluate",
        "truth": truth_manifest.provenance.config_hash,
        "estimate": est_manifest.provenance.config_hash,
    });
    let prov = Provenance::new(g.seed, &run);
    let text = if g.format == Format::Json {
        format!(
            "{}\n",
            serde_json::to_string_pretty(&json!({ "metrics": report, "provenance": prov }))
                .expect("serialises")
        )
    } else {
        io::csv_string(
            &[
                "truth",
                "estimate",
                "method",
                "entropy_loss",
                "frobenius_loss",
                "fp_rate",
                "fn_rate",
                "hamming",
                "tool_version",
                "seed",
                "config_hash",
            ],
            &[vec![
                truth.display().to_string(),
                estimate.display().to_string(),
                est_manifest.method.unwrap_or_default(),
                num(report.entropy_loss),
                num(report.frobenius_loss),
                num(report.fp_rate),
                num(report.fn_rate),
                num(report.hamming),
                prov.version.clone(),
                g.seed.map(|s| s.to_string()).unwrap_or_default(),
                prov.config_hash.clone(),
            ]],
        )
    };
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::io(path, e)),
        None => io::print(&text),
    }
}

pub fn roc(g: &Globals, config: &Path, out: &Path) -> CliResult<()> {
    let mut cfg: RocConfig = io::read_json(config)?;
    if let Some(seed) = g.seed {
        cfg.scenario.seed = seed;
    }
    cfg.scenario
        .validate()
        .map_err(|e| CliError::invalid(config, e))?;
    if cfg.methods.is_empty() || cfg.replicates == 0 {
        return Err(CliError::invalid(
            config,
            "need at least one method and one replicate",
        ));
    }
    let grid = cfg.grid().map_err(|e| CliError::invalid(config, e))?;
    let settings = g.settings(cfg.scenario.p)?;
    check_output_dir(out)?;
    let prov = Provenance::new(Some(cfg.scenario.seed), &cfg);

    let results: Vec<Vec<(FitMethod, mlgem_core::RocCurve)>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| -> CliResult<_> {
            let (data, truth) = sample_panel(&cfg.scenario.spec(r))?;
            cfg.methods
                .iter()
                .map(|&m| Ok((m, roc_curve(&data, &truth, m, &grid, &settings)?)))
                .collect()
        })
        .collect::<CliResult<_>>()?;

    let label = cfg.scenario.label();
    let mut curve_rows = Vec::new();
    let mut auc_rows = Vec::new();
    let mut totals = vec![0.0; cfg.methods.len()];
    for (r, per_method) in results.iter().enumerate() {
        let seed = cfg.scenario.spec(r as u64).seed.to_string();
        for (i, (method, curve)) in per_method.iter().enumerate() {
            for pt in &curve.points {
                curve_rows.push(vec![
                    label.clone(),
                    method.to_string(),
                    r.to_string(),
                    seed.clone(),
                    num(pt.lambda),
                    num(pt.fpr),
                    num(pt.tpr),
                    prov.version.clone(),
                    prov.config_hash.clone(),
                ]);
            }
            let auc = curve.auc();
            totals[i] += auc;
            auc_rows.push(vec![
                label.clone(),
                method.to_string(),
                r.to_string(),
                seed.clone(),
                num(auc),
                curve.failures.to_string(),
                prov.version.clone(),
                prov.config_hash.clone(),
            ]);
        }
    }
    io::create_dir(out)?;
    io::write_csv(
        &out.join("roc.csv"),
        &[
            "scenario",
            "method",
            "replicate",
            "seed",
            "lambda",
            "fpr",
            "tpr",
            "tool_version",
            "config_hash",
        ],
        &curve_rows,
    )?;
    io::write_csv(
        &out.join("auc.csv"),
        &[
            "scenario",
            "method",
            "replicate",
            "seed",
            "auc",
            "failed_points",
            "tool_version",
            "config_hash",
        ],
        &auc_rows,
    )?;
    io::write_json(
        &out.join("manifest.json"),
        &json!({ "config": cfg, "provenance": prov }),
    )?;

    let reps = cfg.replicates as f64;
    let means: Vec<(String, f64)> = cfg
        .methods
        .iter()
        .zip(&totals)
        .map(|(m, t)| (m.to_string(), t / reps))
        .collect();
    if g.format == Format::Json {
        let map: serde_json::Map<String, serde_json::Value> =
            means.iter().map(|(m, a)| (m.clone(), json!(a))).collect();
        io::print(&format!(
            "{}\n",
            json!({ "mean_auc": map, "provenance": prov })
        ))
    } else {
        let mut text = String::new();
        for (m, a) in means {
            text.push_str(&format!(
                "{m}: mean AUC {a:.4} over {} replicates\n",
                cfg.replicates
            ));
        }
        io::print(&text)
    }
}

#[derive(Serialize)]
struct TestRun {
    command: &'static str,
    data_sha256: String,
    test: TestKind,
    draws: usize,
    norm: BlockNorm,
    seed: u64,
}

pub fn test(
    g: &Globals,
    data_path: &Path,
    kind: TestKind,
    draws: usize,
    norm: BlockNorm,
    out: Option<&Path>,
) -> CliResult<()> {
    let data = io::read_dataset(data_path)?;
    let seed = g.seed.unwrap_or(0);
    let run = TestRun {
        command: "test",
        data_sha256: io::file_sha256(data_path)?,
        test: kind,
        draws,
        norm,
        seed,
    };
    let outcome = match kind {
        TestKind::Sigma0 => test_sigma0_zero(&data, draws, seed, norm)?,
        TestKind::EqualBlocks => test_equal_cross_blocks(&data, draws, seed, norm)?,
    };
    for w in &outcome.warnings {
        warn!("{w}");
    }
    let report = json!({
        "test": kind,
        "norm": norm,
        "draws": draws,
        "statistic": outcome.statistic,
        "p_value": outcome.p_value,
        "null_draws": outcome.null_draws,
        "warnings": outcome.warnings,
        "provenance": Provenance::new(Some(seed), &run),
    });
    let text = if g.format == Format::Text && out.is_none() {
        format!(
            "statistic {:.6}, p-value {:.4} from {draws} draws\n",
            outcome.statistic, outcome.p_value
        )
    } else {
        format!(
            "{}\n",
            serde_json::to_string_pretty(&report).expect("serialises")
        )
    };
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::io(path, e)),
        None => io::print(&text),
    }
}

struct Table1Row {
    method: FitMethod,
    criterion: Criterion,
    replicate: u64,
    seed: u64,
    outcome: Result<(PenaltyPair, mlgem_core::MetricReport, FitReport), String>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn repro_table1(g: &Globals, config: &Path, out: &Path) -> CliResult<()> {
    let mut cfg: Table1Config = io::read_json(config)?;
    if let Some(seed) = g.seed {
        cfg.scenario.seed = seed;
    }
    cfg.scenario
        .validate()
        .map_err(|e| CliError::invalid(config, e))?;
    if cfg.methods.is_empty() || cfg.criteria.is_empty() || cfg.replicates == 0 {
        return Err(CliError::invalid(
            config,
            "need methods, criteria and at least one replicate",
        ));
    }
    let grid = cfg.grid().map_err(|e| CliError::invalid(config, e))?;
    let settings = g.settings(cfg.scenario.p)?;
    check_output_dir(out)?;
    let prov = Provenance::new(Some(cfg.scenario.seed), &cfg);

    let rows: Vec<Vec<Table1Row>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| -> CliResult<Vec<Table1Row>> {
            let spec = cfg.scenario.spec(r);
            let (data, truth) = sample_panel(&spec)?;
            let mut rows = Vec::new();
            for &method in &cfg.methods {
                for c in &cfg.criteria {
                    let criterion = c.resolve(g.gamma, g.folds, spec.seed);
                    let outcome = select_lambda(&data, &grid, criterion, method, &settings, false)
                        .and_then(|sel| {
                            let metrics = metric_report(&truth, &sel.chosen_fit.estimate)?;
                            Ok((sel.chosen, metrics, sel.chosen_fit))
                        })
                        .map_err(|e| e.to_string());
                    if let Err(e) = &outcome {
                        warn!("replicate {r}, {method}/{}: {e}", criterion.label());
                    }
                    rows.push(Table1Row {
                        method,
                        criterion,
                        replicate: r,
                        seed: spec.seed,
                        outcome,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<CliResult<_>>()?;
    let rows: Vec<Table1Row> = rows.into_iter().flatten().collect();

    let label = cfg.scenario.label();
    let metric_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let mut cells = vec![
                label.clone(),
                row.method.to_string(),
                row.criterion.label(),
                row.replicate.to_string(),
                row.seed.to_string(),
            ];
            match &row.outcome {
                Ok((pen, m, fit)) => cells.extend([
                    num(pen.lambda1),
                    num(pen.lambda2),
                    num(m.entropy_loss),
                    num(m.frobenius_loss),
                    num(m.fp_rate),
                    num(m.fn_rate),
                    num(m.hamming),
                    fit.edge_count.to_string(),
                    fit.iterations.to_string(),
                    num(fit.wall_time_seconds),
                    String::new(),
                ]),
                Err(e) => {
                    cells.extend(std::iter::repeat_n(String::new(), 10));
                    cells.push(e.clone());
                }
            }
            cells.extend([prov.version.clone(), prov.config_hash.clone()]);
            cells
        })
        .collect();

    let mut summary_rows = Vec::new();
    let mut text = format!("{label}, {} replicates\n", cfg.replicates);
    for &method in &cfg.methods {
        for c in &cfg.criteria {
            let label_c = c.resolve(g.gamma, g.folds, 0).label();
            let ok: Vec<&(PenaltyPair, mlgem_core::MetricReport, FitReport)> = rows
                .iter()
                .filter(|r| r.method == method && r.criterion.label() == label_c)
                .filter_map(|r| r.outcome.as_ref().ok())
                .collect();
            let failures = cfg.replicates as usize - ok.len();
            let stat = |f: &dyn Fn(&mlgem_core::MetricReport) -> f64| {
                mean_sd(&ok.iter().map(|(_, m, _)| f(m)).collect::<Vec<_>>())
            };
            let el = stat(&|m| m.entropy_loss);
            let fl = stat(&|m| m.frobenius_loss);
            let fp = stat(&|m| m.fp_rate);
            let fnr = stat(&|m| m.fn_rate);
            let hd = stat(&|m| m.hamming);
            let mut cells = vec![
                label.clone(),
                method.to_string(),
                label_c.clone(),
                ok.len().to_string(),
                failures.to_string(),
            ];
            for (mean, sd) in [el, fl, fp, fnr, hd] {
                cells.push(num(mean));
                cells.push(num(sd));
            }
            cells.extend([prov.version.clone(), prov.config_hash.clone()]);
            summary_rows.push(cells);
            text.push_str(&format!(
                "{method:>8} {label_c:<18} EL {:.2} ({:.2})  FL {:.3} ({:.3})  FP {:.1}%  FN {:.1}%  HD {:.1}%{}\n",
                el.0,
                el.1,
                fl.0,
                fl.1,
                100.0 * fp.0,
                100.0 * fnr.0,
                100.0 * hd.0,
                if failures > 0 { format!("  [{failures} failed]") } else { String::new() }
            ));
        }
    }

    io::create_dir(out)?;
    io::write_csv(
        &out.join("metrics.csv"),
        &[
            "scenario",
            "method",
            "criterion",
            "replicate",
            "seed",
            "lambda1",
            "lambda2",
            "entropy_loss",
            "frobenius_loss",
            "fp_rate",
            "fn_rate",
            "hamming",
            "edge_count",
            "iterations",
            "wall_time_seconds",
            "error",
            "tool_version",
            "config_hash",
        ],
        &metric_rows,
    )?;
    io::write_csv(
        &out.join("summary.csv"),
        &[
            "scenario",
            "method",
            "criterion",
            "replicates",
            "failures",
            "entropy_loss_mean",
            "entropy_loss_sd",
            "frobenius_loss_mean",
            "frobenius_loss_sd",
            "fp_rate_mean",
            "fp_rate_sd",
            "fn_rate_mean",
            "fn_rate_sd",
            "hamming_mean",
            "hamming_sd",
            "tool_version",
            "config_hash",
        ],
        &summary_rows,
    )?;
    io::write_json(
        &out.join("manifest.json"),
        &json!({ "config": cfg, "provenance": prov }),
    )?;
    if g.format == Format::Json {
        io::print(&format!("{}\n", json!({ "out": out, "provenance": prov })))
    } else {
        io::print(&text)
    }
}
