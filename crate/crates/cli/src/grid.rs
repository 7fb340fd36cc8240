//! Calibration-method comparison grid: every requested method is run
//! through synthesis and QAT at every bit setting and seed, and student
//! accuracy lands in one table. A failing cell is recorded and skipped,
//! never fatal, so a long grid survives one divergent corner.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use zsqd::ckpt::{save_checkpoint, CheckpointMeta};
use zsqd::config::RunConfig;
use zsqd::data::Dataset;
use zsqd::detector::{BoxLabel, DetectorModel};
use zsqd::qat::{metrics_csv, run_qat};
use zsqd::quant::QuantSpec;
use zsqd::synthesis::{generate_with_method, CalibMethod};
use zsqd::{Error, Result};

use crate::commands::{
    adopt_dataset, adopt_teacher, bits_label, load_dataset_at, load_frozen_checkpoint,
    parse_bits, parse_method, read_config_file, roundtrip_labels, CommonArgs,
};
use crate::provenance::RunRecord;
use crate::report::render_table;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectArm {
    With,
    Without,
}

pub fn parse_arm(s: &str) -> std::result::Result<DetectArm, String> {
    match s {
        "with" => Ok(DetectArm::With),
        "without" => Ok(DetectArm::Without),
        other => Err(format!("unknown arm '{other}', want with|without")),
    }
}

/// The detect-free arm rides along in the method column, mirroring the
/// "w/o L_detect" rows of the accuracy tables.
fn method_label(m: CalibMethod, arm: DetectArm) -> String {
    match arm {
        DetectArm::With => m.label().to_string(),
        DetectArm::Without => format!("{}-no-detect", m.label()),
    }
}

/// info: does the method see real box categories and coordinates?
/// distri: does it see the per-image label-count distribution?
fn info_distri(m: CalibMethod) -> (&'static str, &'static str) {
    match m {
        CalibMethod::RealLabels => ("yes", "yes"),
        CalibMethod::TileIn | CalibMethod::MultisampleIn => ("no", "yes"),
        _ => ("no", "no"),
    }
}

const SCHEMA: &str = "method,info,distri,bits,map,map50\n";

#[derive(clap::Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Frozen teacher checkpoint
    #[arg(long, value_name = "FILE")]
    pub teacher: PathBuf,
    /// Real dataset: label statistics for in-distribution methods and the
    /// validation split every student is scored on
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Comma-separated methods; default runs all seven
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Vec<CalibMethod>,
    /// Comma-separated bit settings, e.g. w6a6,w4a8
    #[arg(long, value_delimiter = ',', value_parser = parse_bits)]
    pub bits: Vec<QuantSpec>,
    /// Comma-separated seeds; the top-level table averages over them
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// QAT arms: "with" keeps the detection loss, "without" drops it
    #[arg(long, value_delimiter = ',', value_parser = parse_arm)]
    pub detect_arms: Vec<DetectArm>,
    /// Calibration images per cell
    #[arg(long, default_value_t = 256)]
    pub count: usize,
    /// Keep each cell's student checkpoint
    #[arg(long)]
    pub save_checkpoints: bool,
}

#[derive(Serialize)]
struct CellStatus {
    method: String,
    bits: String,
    seed: u64,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    map50: Option<f64>,
}

struct CellOutcome {
    map: f64,
    map50: f64,
    diverged: Option<String>,
}

/// One (method, bits, arm, seed) cell: resolve the config exactly like the
/// standalone synthesize and qat commands would, so a single-cell grid is
/// bit-identical to running them by hand.
#[allow(clippy::too_many_arguments)]
fn run_cell(
    teacher: &DetectorModel,
    tmeta: &CheckpointMeta,
    raw_cfg: &RunConfig,
    real: &Dataset,
    real_train: &[Vec<BoxLabel>],
    method: CalibMethod,
    bits: QuantSpec,
    arm: DetectArm,
    seed: Option<u64>,
    count: usize,
    cell_dir: &Path,
    save_ckpt: bool,
) -> Result<CellOutcome> {
    let mut cfg = raw_cfg.clone();
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    adopt_dataset(&mut cfg, &real.manifest);
    adopt_teacher(&mut cfg, tmeta);
    cfg.qat.bits_weight = bits.bits_weight;
    cfg.qat.bits_act = bits.bits_act;
    if arm == DetectArm::Without {
        cfg.qat.beta_detect = 0.0;
    }
    cfg.validate()?;

    let labels_src = method.needs_real_data().then_some(real_train);
    let (mut calib, _report) = generate_with_method(
        teacher,
        &cfg.synthesis,
        count,
        &cfg.detect_weights,
        method,
        labels_src,
    )?;
    roundtrip_labels(&mut calib)?;
    let outcome = run_qat(teacher, &calib, real, &cfg.qat, &cfg.detect_weights)?;

    fs::create_dir_all(cell_dir)?;
    fs::write(cell_dir.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    let best = &outcome.metrics[outcome.best_epoch];
    if save_ckpt {
        let mut metrics = BTreeMap::new();
        metrics.insert("map".to_string(), best.map);
        metrics.insert("map50".to_string(), best.map50);
        let meta = CheckpointMeta {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            epoch: outcome.best_epoch as u32,
            metrics,
            model: cfg.model.clone(),
            quant: Some(cfg.qat.quant_spec()),
        };
        save_checkpoint(&outcome.model, &meta, &cell_dir.join("student.ckpt"))?;
    }
    Ok(CellOutcome { map: best.map, map50: best.map50, diverged: outcome.diverged })
}

pub fn cmd_compare_baselines(args: &CompareArgs) -> Result<()> {
    let raw_cfg = read_config_file(args.common.config.as_ref())?;
    let real = load_dataset_at(&args.data, "gen-data")?;
    let (teacher, tmeta) = load_frozen_checkpoint(&args.teacher, "train-teacher")?;
    let real_train = real.batch_labels(&real.train_indices());

    let methods = if args.methods.is_empty() {
        vec![
            CalibMethod::RealLabels,
            CalibMethod::Gaussian,
            CalibMethod::Tile,
            CalibMethod::TileIn,
            CalibMethod::MultisampleOut,
            CalibMethod::MultisampleIn,
            CalibMethod::Adaptive,
        ]
    } else {
        args.methods.clone()
    };
    let bits_list =
        if args.bits.is_empty() { vec![QuantSpec::new(6, 6)] } else { args.bits.clone() };
    let arms = if args.detect_arms.is_empty() {
        vec![DetectArm::With, DetectArm::Without]
    } else {
        args.detect_arms.clone()
    };
    // no --seeds and no --seed leaves the file config's seeds untouched
    let seed_opts: Vec<Option<u64>> = if !args.seeds.is_empty() {
        args.seeds.iter().map(|&s| Some(s)).collect()
    } else {
        vec![args.common.seed]
    };

    let out = &args.common.out;
    fs::create_dir_all(out)?;

    let n_seeds = seed_opts.len();
    let mut seed_tables: Vec<String> = vec![SCHEMA.to_string(); n_seeds];
    let mut agg_csv = SCHEMA.to_string();
    let mut statuses: Vec<CellStatus> = Vec::new();
    let mut ok_cells = 0usize;
    let mut total_cells = 0usize;

    for &bits in &bits_list {
        for &method in &methods {
            for &arm in &arms {
                let label = method_label(method, arm);
                let (info, distri) = info_distri(method);
                let bl = bits_label(bits);
                let mut samples: Vec<(f64, f64)> = Vec::new();
                for (si, &seed) in seed_opts.iter().enumerate() {
                    total_cells += 1;
                    let eff_seed = seed.unwrap_or(raw_cfg.seed);
                    let cell_dir =
                        out.join(format!("seed-{eff_seed}")).join(format!("{label}-{bl}"));
                    info!("cell {label} {bl} seed {eff_seed}");
                    let cell = run_cell(
                        &teacher,
                        &tmeta,
                        &raw_cfg,
                        &real,
                        &real_train,
                        method,
                        bits,
                        arm,
                        seed,
                        args.count,
                        &cell_dir,
                        args.save_checkpoints,
                    );
                    let (map_s, map50_s, status, maps) = match cell {
                        Ok(c) => match c.diverged {
                            None => {
                                ok_cells += 1;
                                samples.push((c.map, c.map50));
                                (
                                    format!("{:.6}", c.map),
                                    format!("{:.6}", c.map50),
                                    "ok".to_string(),
                                    Some((c.map, c.map50)),
                                )
                            }
                            Some(msg) => {
                                warn!("cell {label} {bl} seed {eff_seed} diverged: {msg}");
                                ("-".into(), "-".into(), format!("diverged: {msg}"), None)
                            }
                        },
                        Err(e) => {
                            warn!("cell {label} {bl} seed {eff_seed} failed: {e}");
                            ("-".into(), "-".into(), format!("error: {e}"), None)
                        }
                    };
                    seed_tables[si].push_str(&format!(
                        "{label},{info},{distri},{bl},{map_s},{map50_s}\n"
                    ));
                    statuses.push(CellStatus {
                        method: label.clone(),
                        bits: bl.clone(),
                        seed: eff_seed,
                        status,
                        map: maps.map(|m| m.0),
                        map50: maps.map(|m| m.1),
                    });
                }
                let (map_s, map50_s) = if samples.is_empty() {
                    ("-".to_string(), "-".to_string())
                } else {
                    let n = samples.len() as f64;
                    let map = samples.iter().map(|s| s.0).sum::<f64>() / n;
                    let map50 = samples.iter().map(|s| s.1).sum::<f64>() / n;
                    (format!("{map:.6}"), format!("{map50:.6}"))
                };
                agg_csv.push_str(&format!("{label},{info},{distri},{bl},{map_s},{map50_s}\n"));
            }
        }
    }

    for (si, &seed) in seed_opts.iter().enumerate() {
        let eff_seed = seed.unwrap_or(raw_cfg.seed);
        let dir = out.join(format!("seed-{eff_seed}"));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("baselines.csv"), &seed_tables[si])?;
    }
    fs::write(out.join("baselines.csv"), &agg_csv)?;
    let mut cells_json = serde_json::to_string_pretty(&statuses)?;
    cells_json.push('\n');
    fs::write(out.join("cells.json"), cells_json)?;

    let record_cfg = match args.common.seed {
        Some(s) => raw_cfg.clone().with_seed(s),
        None => raw_cfg.clone(),
    };
    let mut rec = RunRecord::new("compare-baselines", &record_cfg);
    rec.param("methods", methods.iter().map(|m| m.label()).collect::<Vec<_>>().join(","));
    rec.param("bits", bits_list.iter().map(|&b| bits_label(b)).collect::<Vec<_>>().join(","));
    rec.param(
        "seeds",
        seed_opts
            .iter()
            .map(|s| s.unwrap_or(raw_cfg.seed).to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    rec.param("count", args.count);
    rec.param(
        "detect_arms",
        arms.iter()
            .map(|a| if *a == DetectArm::With { "with" } else { "without" })
            .collect::<Vec<_>>()
            .join(","),
    );
    rec.input_file("teacher_checkpoint", &args.teacher)?;
    rec.input_dir("dataset", &args.data)?;
    if let Some(p) = &args.common.config {
        rec.input_file("config_file", p)?;
    }
    rec.write(out)?;

    print!("{}", render_table("baselines (seed-averaged)", &agg_csv));
    println!("{ok_cells}/{total_cells} cells succeeded; details in {}", out.join("cells.json").display());
    if ok_cells == 0 {
        return Err(Error::Config("every grid cell failed; see cells.json".to_string()));
    }
    Ok(())
}
