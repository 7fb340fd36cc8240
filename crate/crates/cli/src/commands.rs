//! One function per pipeline subcommand. Each resolves its config the
//! same way (defaults, then the config file, then flags), runs the stage,
//! and leaves artifacts plus a `run.json` under `--out`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use zsqd::ckpt::{load_checkpoint, save_checkpoint, CheckpointMeta};
use zsqd::config::RunConfig;
use zsqd::data::{self, Dataset, Manifest};
use zsqd::detector::DetectorModel;
use zsqd::eval::{evaluate_model, result_csv, summary_text, EVAL_CONF, EVAL_NMS_IOU};
use zsqd::qat::{metrics_csv, run_qat, timing_csv};
use zsqd::quant::QuantSpec;
use zsqd::synthesis::{generate_with_method, CalibMethod};
use zsqd::train::{teacher_csv, train_teacher};
use zsqd::{Error, Result};

use crate::provenance::RunRecord;

const EVAL_BATCH: usize = 64;

#[derive(clap::Args, Debug)]
pub struct CommonArgs {
    /// JSON config file; keys left out keep their defaults
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed, copied into every pipeline stage
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory all artifacts are written under
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

pub fn parse_method(s: &str) -> std::result::Result<CalibMethod, String> {
    CalibMethod::parse(s).map_err(|e| e.to_string())
}

pub fn parse_bits(s: &str) -> std::result::Result<QuantSpec, String> {
    QuantSpec::parse(s).map_err(|e| e.to_string())
}

pub fn bits_label(q: QuantSpec) -> String {
    format!("w{}a{}", q.bits_weight, q.bits_act)
}

pub fn read_config_file(path: Option<&PathBuf>) -> Result<RunConfig> {
    let Some(p) = path else {
        return Ok(RunConfig::default());
    };
    let doc =
        fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    let mut cfg = RunConfig::from_json(&doc)?;
    // the file's master seed reaches every component the file didn't
    // seed itself, same as --seed but overridable per component
    let val: serde_json::Value = serde_json::from_str(&doc)?;
    if val.get("seed").is_some() {
        let m = cfg.seed;
        if val.pointer("/data/seed").is_none() {
            cfg.data.seed = m;
        }
        if val.pointer("/model/seed").is_none() {
            cfg.model.seed = m;
        }
        if val.pointer("/teacher/seed").is_none() {
            cfg.teacher.seed = m;
        }
        if val.pointer("/synthesis/seed").is_none() {
            cfg.synthesis.seed = m;
        }
        if val.pointer("/qat/seed").is_none() {
            cfg.qat.seed = m;
        }
    }
    Ok(cfg)
}

/// Defaults, overlaid by the config file, overlaid by `--seed`.
/// Per-command flags land on top of the result.
pub fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = read_config_file(common.config.as_ref())?;
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

/// A loaded dataset is authoritative for its own geometry; the config
/// follows it so one config file can drive datasets of any size.
pub fn adopt_dataset(cfg: &mut RunConfig, m: &Manifest) {
    cfg.data.num_images = m.num_images;
    cfg.data.image_size = m.image_size;
    cfg.data.num_classes = m.num_classes;
    cfg.data.train_fraction = m.train_count as f64 / m.num_images as f64;
    cfg.data.seed = m.seed;
    cfg.model.image_size = m.image_size;
    cfg.model.num_classes = m.num_classes;
    cfg.synthesis.resolution = m.image_size;
}

/// A loaded checkpoint is authoritative for the model architecture.
pub fn adopt_teacher(cfg: &mut RunConfig, meta: &CheckpointMeta) {
    cfg.model = meta.model.clone();
    cfg.synthesis.resolution = cfg.model.image_size;
}

pub fn load_dataset_at(dir: &Path, produced_by: &str) -> Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(Error::Dataset(format!(
            "no dataset at {} (manifest.json missing); create one with `zsqd {produced_by}`",
            dir.display()
        )));
    }
    data::load_dataset(dir)
}

pub fn load_frozen_checkpoint(
    path: &Path,
    produced_by: &str,
) -> Result<(DetectorModel, CheckpointMeta)> {
    if !path.is_file() {
        return Err(Error::Checkpoint(format!(
            "no checkpoint at {}; create one with `zsqd {produced_by}`",
            path.display()
        )));
    }
    let (mut model, meta) = load_checkpoint(path)?;
    model.set_frozen(true);
    Ok((model, meta))
}

/// Push labels through the on-disk text codec so an in-memory dataset is
/// indistinguishable from one that was saved and reloaded.
pub fn roundtrip_labels(ds: &mut Dataset) -> Result<()> {
    let classes = ds.manifest.num_classes;
    for labels in &mut ds.labels {
        for l in labels.iter_mut() {
            *l = data::parse_label_line(&data::format_label(l), classes)?;
        }
    }
    Ok(())
}

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("creating {}: {e}", dir.display())))
}

fn check_same_geometry(what: &str, m: &Manifest, model: &DetectorModel) -> Result<()> {
    if m.image_size != model.cfg.image_size || m.num_classes != model.cfg.num_classes {
        return Err(Error::Config(format!(
            "{what} has {}px images and {} classes, the checkpoint wants {}px and {}",
            m.image_size, m.num_classes, model.cfg.image_size, model.cfg.num_classes
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- gen-data

#[derive(clap::Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of images to render
    #[arg(long)]
    pub count: Option<usize>,
    /// Square image edge in pixels (multiple of 8)
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Number of object classes, 1..=6
    #[arg(long)]
    pub classes: Option<usize>,
    /// Fraction of images in the training split
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(n) = args.count {
        cfg.data.num_images = n;
    }
    if let Some(px) = args.image_size {
        cfg.data.image_size = px;
        cfg.model.image_size = px;
        cfg.synthesis.resolution = px;
    }
    if let Some(k) = args.classes {
        cfg.data.num_classes = k;
        cfg.model.num_classes = k;
    }
    if let Some(f) = args.train_fraction {
        cfg.data.train_fraction = f;
    }
    cfg.validate()?;

    let out = &args.common.out;
    ensure_out(out)?;
    info!("rendering {} images at {}px", cfg.data.num_images, cfg.data.image_size);
    let ds = data::generate_dataset(&cfg.data, out)?;

    let mut rec = RunRecord::new("gen-data", &cfg);
    if let Some(p) = &args.common.config {
        rec.input_file("config_file", p)?;
    }
    rec.write(out)?;
    println!(
        "wrote {} images ({} train / {} val) to {}",
        ds.len(),
        ds.manifest.train_count,
        ds.len() - ds.manifest.train_count,
        out.display()
    );
    Ok(())
}

// ------------------------------------------------------------ train-teacher

#[derive(clap::Args, Debug)]
pub struct TrainTeacherArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset directory from gen-data
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

pub fn cmd_train_teacher(args: &TrainTeacherArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let ds = load_dataset_at(&args.data, "gen-data")?;
    adopt_dataset(&mut cfg, &ds.manifest);
    if let Some(e) = args.epochs {
        cfg.teacher.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.teacher.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.teacher.lr = lr;
    }
    cfg.validate()?;

    let out = &args.common.out;
    ensure_out(out)?;
    let mut model = DetectorModel::new(cfg.model.clone())?;
    info!("training teacher for {} epochs on {} images", cfg.teacher.epochs, ds.len());
    let outcome = train_teacher(&mut model, &ds, &cfg.teacher, &cfg.detect_weights)?;
    model.set_frozen(true);

    let last = outcome.metrics.last().expect("at least one epoch");
    let mut metrics = BTreeMap::new();
    metrics.insert("loss".to_string(), last.loss);
    metrics.insert("map".to_string(), last.map);
    metrics.insert("map50".to_string(), last.map50);
    let meta = CheckpointMeta {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        epoch: last.epoch as u32,
        metrics,
        model: cfg.model.clone(),
        quant: None,
    };
    save_checkpoint(&model, &meta, &out.join("teacher.ckpt"))?;
    fs::write(out.join("metrics.csv"), teacher_csv(&outcome.metrics))?;
    fs::write(out.join("timing.csv"), timing_csv(&outcome.epoch_seconds))?;

    let mut rec = RunRecord::new("train-teacher", &cfg);
    rec.input_dir("dataset", &args.data)?;
    if let Some(p) = &args.common.config {
        rec.input_file("config_file", p)?;
    }
    rec.write(out)?;
    println!(
        "teacher mAP50 {:.4} (mAP {:.4}) after {} epochs -> {}",
        last.map50,
        last.map,
        last.epoch,
        out.join("teacher.ckpt").display()
    );
    Ok(())
}

// -------------------------------------------------------------- synthesize

#[derive(clap::Args, Debug)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Frozen teacher checkpoint
    #[arg(long, value_name = "FILE")]
    pub teacher: PathBuf,
    /// How labels are produced: adaptive, real-labels, tile, tile-in,
    /// multisample-in, multisample-out, or gaussian
    #[arg(long, default_value = "adaptive", value_parser = parse_method)]
    pub mode: CalibMethod,
    /// Number of images to synthesize
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    /// Real dataset directory; required by modes that copy label info
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Optimizer steps per synthesis round
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Detection-loss weight; 0 makes the objective task-agnostic
    #[arg(long)]
    pub alpha_detect: Option<f64>,
}

pub fn cmd_synthesize(args: &SynthesizeArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let (teacher, tmeta) = load_frozen_checkpoint(&args.teacher, "train-teacher")?;
    adopt_teacher(&mut cfg, &tmeta);
    if let Some(it) = args.iterations {
        cfg.synthesis.iterations = it;
    }
    if let Some(b) = args.batch_size {
        cfg.synthesis.batch_size = b;
    }
    if let Some(a) = args.alpha_detect {
        cfg.synthesis.alpha_detect = a;
    }
    cfg.validate()?;

    let real = match (&args.data, args.mode.needs_real_data()) {
        (Some(dir), _) => Some(load_dataset_at(dir, "gen-data")?),
        (None, true) => {
            return Err(Error::Config(format!(
                "--mode {} copies label information from real data; pass --data DIR",
                args.mode.label()
            )));
        }
        (None, false) => None,
    };
    if let Some(ds) = &real {
        check_same_geometry("--data dataset", &ds.manifest, &teacher)?;
    }
    // label statistics come from the training split only
    let real_train: Option<Vec<_>> =
        real.as_ref().map(|ds| ds.batch_labels(&ds.train_indices()));

    let out = &args.common.out;
    ensure_out(out)?;
    info!(
        "synthesizing {} images with mode {} ({} iterations/round)",
        args.count,
        args.mode.label(),
        cfg.synthesis.iterations
    );
    let (calib, report) = generate_with_method(
        &teacher,
        &cfg.synthesis,
        args.count,
        &cfg.detect_weights,
        args.mode,
        real_train.as_deref(),
    )?;
    data::save_dataset(&calib, out)?;
    let mut report_json = serde_json::to_string_pretty(&report)?;
    report_json.push('\n');
    fs::write(out.join("report.json"), report_json)?;

    let mut rec = RunRecord::new("synthesize", &cfg);
    rec.param("mode", args.mode.label());
    rec.param("count", args.count);
    rec.input_file("teacher_checkpoint", &args.teacher)?;
    if let Some(dir) = &args.data {
        rec.input_dir("dataset", dir)?;
    }
    if let Some(p) = &args.common.config {
        rec.input_file("config_file", p)?;
    }
    rec.write(out)?;

    let labels: usize = calib.labels.iter().map(Vec::len).sum();
    if let Some(last) = report.batches.last() {
        println!(
            "wrote {} images ({} labels) to {}; last batch BNS {:.4} -> {:.4}",
            calib.len(),
            labels,
            out.display(),
            last.bns_first,
            last.bns_last
        );
    } else {
        println!("wrote {} images ({} labels) to {}", calib.len(), labels, out.display());
    }
    Ok(())
}

// --------------------------------------------------------------------- qat

#[derive(clap::Args, Debug)]
pub struct QatArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Frozen teacher checkpoint
    #[arg(long, value_name = "FILE")]
    pub teacher: PathBuf,
    /// Calibration set directory from synthesize
    #[arg(long, value_name = "DIR")]
    pub calib: PathBuf,
    /// Real dataset whose validation split scores each epoch
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Bit widths, e.g. w4a8
    #[arg(long, value_parser = parse_bits)]
    pub bits: Option<QuantSpec>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Distillation KL weight
    #[arg(long)]
    pub beta_kl: Option<f64>,
    /// Feature-mimicking weight
    #[arg(long)]
    pub beta_feat: Option<f64>,
    /// Detection-loss weight; 0 trains without ground-truth supervision
    #[arg(long)]
    pub beta_detect: Option<f64>,
    /// Distillation temperature
    #[arg(long)]
    pub tau: Option<f64>,
}

pub fn cmd_qat(args: &QatArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let real = load_dataset_at(&args.data, "gen-data")?;
    adopt_dataset(&mut cfg, &real.manifest);
    let (teacher, tmeta) = load_frozen_checkpoint(&args.teacher, "train-teacher")?;
    adopt_teacher(&mut cfg, &tmeta);
    let calib = load_dataset_at(&args.calib, "synthesize")?;
    if let Some(q) = args.bits {
        cfg.qat.bits_weight = q.bits_weight;
        cfg.qat.bits_act = q.bits_act;
    }
    if let Some(e) = args.epochs {
        cfg.qat.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.qat.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.qat.lr = lr;
    }
    if let Some(v) = args.beta_kl {
        cfg.qat.beta_kl = v;
    }
    if let Some(v) = args.beta_feat {
        cfg.qat.beta_feat = v;
    }
    if let Some(v) = args.beta_detect {
        cfg.qat.beta_detect = v;
    }
    if let Some(v) = args.tau {
        cfg.qat.tau = v;
    }
    cfg.validate()?;
    check_same_geometry("calibration set", &calib.manifest, &teacher)?;
    check_same_geometry("--data dataset", &real.manifest, &teacher)?;

    let out = &args.common.out;
    ensure_out(out)?;
    info!(
        "QAT at {}: {} epochs over {} calibration images",
        bits_label(cfg.qat.quant_spec()),
        cfg.qat.epochs,
        calib.len()
    );
    let outcome = run_qat(&teacher, &calib, &real, &cfg.qat, &cfg.detect_weights)?;

    fs::write(out.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    fs::write(out.join("timing.csv"), timing_csv(&outcome.epoch_seconds))?;
    let best = &outcome.metrics[outcome.best_epoch];
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
    let ckpt_path = out.join("student.ckpt");
    save_checkpoint(&outcome.model, &meta, &ckpt_path)?;

    let mut rec = RunRecord::new("qat", &cfg);
    rec.param("bits", bits_label(cfg.qat.quant_spec()));
    rec.input_file("teacher_checkpoint", &args.teacher)?;
    rec.input_dir("calibration", &args.calib)?;
    rec.input_dir("dataset", &args.data)?;
    if let Some(p) = &args.common.config {
        rec.input_file("config_file", p)?;
    }
    rec.write(out)?;

    if let Some(msg) = outcome.diverged {
        return Err(Error::Diverged(format!(
            "{msg}; last stable state saved to {}",
            ckpt_path.display()
        )));
    }
    println!(
        "student mAP50 {:.4} (mAP {:.4}) at epoch {} -> {}",
        best.map50,
        best.map,
        outcome.best_epoch,
        ckpt_path.display()
    );
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

pub fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "all" => Ok(Split::All),
        other => Err(format!("unknown split '{other}', want train|val|all")),
    }
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::All => "all",
        }
    }

    fn indices(self, ds: &Dataset) -> Vec<usize> {
        match self {
            Split::Train => ds.train_indices(),
            Split::Val => ds.val_indices(),
            Split::All => (0..ds.len()).collect(),
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to score (teacher or student)
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Dataset directory to score on
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Which images to score
    #[arg(long, default_value = "val", value_parser = parse_split)]
    pub split: Split,
    /// Score even when the checkpoint was built under a different config
    #[arg(long)]
    pub force: bool,
    /// Detection confidence floor
    #[arg(long, default_value_t = EVAL_CONF)]
    pub conf_thresh: f64,
    /// NMS overlap threshold
    #[arg(long, default_value_t = EVAL_NMS_IOU)]
    pub nms_iou: f64,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let ds = load_dataset_at(&args.data, "gen-data or synthesize")?;
    adopt_dataset(&mut cfg, &ds.manifest);
    let (model, meta) = load_frozen_checkpoint(&args.checkpoint, "train-teacher or qat")?;
    adopt_teacher(&mut cfg, &meta);
    if let Some(q) = &meta.quant {
        cfg.qat.bits_weight = q.bits_weight;
        cfg.qat.bits_act = q.bits_act;
        cfg.qat.asymmetric_act = q.asymmetric_act;
    }
    check_same_geometry("--data dataset", &ds.manifest, &model)?;
    cfg.validate()?;

    if cfg.hash() != meta.config_hash && !args.force {
        return Err(Error::Config(format!(
            "checkpoint {} was built under config {} but the resolved config hashes to {}; \
             pass the original config file and seed (checkpoint seed {}) or --force",
            args.checkpoint.display(),
            meta.config_hash,
            cfg.hash(),
            meta.seed
        )));
    }

    let indices = args.split.indices(&ds);
    if indices.is_empty() {
        return Err(Error::Dataset(format!(
            "split '{}' of {} is empty ({} train / {} val images)",
            args.split.label(),
            args.data.display(),
            ds.manifest.train_count,
            ds.len() - ds.manifest.train_count
        )));
    }
    let r = evaluate_model(&model, &ds, &indices, args.conf_thresh, args.nms_iou, EVAL_BATCH)?;

    let out = &args.common.out;
    ensure_out(out)?;
    fs::write(out.join("eval.csv"), result_csv(&r))?;
    let mut doc = serde_json::to_string_pretty(&serde_json::json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "split": args.split.label(),
        "images": indices.len(),
        "map": r.map_5095,
        "map50": r.map_50,
        "tp50": r.tp50,
        "fp50": r.fp50,
        "fn50": r.fn50,
    }))?;
    doc.push('\n');
    fs::write(out.join("eval.json"), doc)?;

    let mut rec = RunRecord::new("eval", &cfg);
    rec.param("split", args.split.label());
    rec.input_file("checkpoint", &args.checkpoint)?;
    rec.input_dir("dataset", &args.data)?;
    if let Some(p) = &args.common.config {
        rec.input_file("config_file", p)?;
    }
    rec.write(out)?;

    print!("{}", summary_text(&r, &ds.manifest.class_names));
    Ok(())
}
