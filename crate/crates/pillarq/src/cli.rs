//! The `pillarq` command line.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use pillarq_core::eval::{evaluate, range_ablation, RANGE_LABELS};
use pillarq_core::nn::Network;
use pillarq_core::pipeline::{layer_errors, predict_boxes, run_baseline_calibration, run_lidar_ptq, sample_indices, train_fp_baseline, CalibrationSet};
use pillarq_core::Tensor;

use crate::config::{Method, Settings};
use crate::dataset::{self, Dataset, Split};
use crate::report::{self, AccessJson, CompareRow, EvalJson, QuantizeJson, RangeJson, TrainJson};
use crate::{model, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "pillarq", version, about = "Post-training quantization for a pillar BEV detector on synthetic LiDAR scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// key = value settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; created if absent.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the `seed` setting.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Extra `key=value` setting, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArg {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArg {
    /// PTQF model file.
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelsArg {
    /// `NAME=PATH` of a PTQF model; repeatable.
    #[arg(long = "model", value_name = "NAME=PATH", required = true)]
    pub models: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the float detector on the train split.
    TrainFp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Calibration-only quantization with the configured method.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Quantize with the configured method (the full pipeline by default).
    Quantize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        model: ModelArg,
    },
    /// BEV AP of one model on the val split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Side-by-side AP of several models, sorted by mean AP.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        models: ModelsArg,
    },
    /// AP by range bucket relative to the first model.
    AblateRange {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        models: ModelsArg,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::TrainFp { common, .. }
            | Command::Calibrate { common, .. }
            | Command::Quantize { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Compare { common, .. }
            | Command::AblateRange { common, .. } => common,
        }
    }
}

pub fn settings(c: &Common) -> Result<Settings> {
    let mut s = match &c.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    for kv in &c.overrides {
        s.apply_override(kv)?;
    }
    if let Some(seed) = c.seed {
        s.seed = seed;
    }
    s.validate()?;
    Ok(s)
}

/// Creates `out`, refusing a non-empty directory unless `force`.
pub fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let mut it = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if it.next().is_some() && !force {
            return Err(Error::OutputExists(out.to_path_buf()));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn parse_models(specs: &[String]) -> Result<Vec<(String, PathBuf)>> {
    specs
        .iter()
        .map(|s| match s.split_once('=') {
            Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
            _ => Err(Error::Config(format!("model `{s}` is not NAME=PATH"))),
        })
        .collect()
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", p.display())))
    }
}

fn require_dataset(p: &Path) -> Result<()> {
    require_file(&p.join(dataset::MANIFEST))
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common().clone();
    let s = settings(&common)?;
    // Everything the command refers to must exist before the output is touched.
    match &cli.command {
        Command::GenData { .. } => {}
        Command::TrainFp { data, .. } => require_dataset(&data.data)?,
        Command::Calibrate { data, model, .. } | Command::Quantize { data, model, .. } | Command::Evaluate { data, model, .. } => {
            require_dataset(&data.data)?;
            require_file(&model.model)?;
        }
        Command::Compare { data, models, .. } | Command::AblateRange { data, models, .. } => {
            require_dataset(&data.data)?;
            let m = parse_models(&models.models)?;
            if matches!(cli.command, Command::AblateRange { .. }) && m.len() < 2 {
                return Err(Error::Config("ablate-range needs at least two models".into()));
            }
            for (_, p) in &m {
                require_file(p)?;
            }
        }
    }
    if let (Method::Calibrate(_), Command::Calibrate { .. } | Command::Quantize { .. }) = (s.method, &cli.command) {
        if s.pipeline.bits_w != s.pipeline.bits_a {
            return Err(Error::Config("calibration-only methods use one bit-width; set bits_w = bits_a".into()));
        }
    }
    if matches!(cli.command, Command::Calibrate { .. }) && s.method == Method::LidarPtq {
        return Err(Error::Config("calibrate needs method = maxmin, entropy or maxmin_grid".into()));
    }
    let out = &common.out;
    prepare_out(out, common.force)?;
    std::fs::write(out.join("config.txt"), s.render()).map_err(|e| Error::io(out.join("config.txt"), e))?;
    let t = Instant::now();
    match &cli.command {
        Command::GenData { .. } => gen_data(&s, out)?,
        Command::TrainFp { data, .. } => train_fp(&s, &data.data, out)?,
        Command::Calibrate { data, model, .. } => quantize(&s, &data.data, &model.model, out, s.method)?,
        Command::Quantize { data, model, .. } => quantize(&s, &data.data, &model.model, out, s.method)?,
        Command::Evaluate { data, model, .. } => evaluate_cmd(&s, &data.data, &model.model, out)?,
        Command::Compare { data, models, .. } => compare(&s, &data.data, &parse_models(&models.models)?, out)?,
        Command::AblateRange { data, models, .. } => ablate_range(&s, &data.data, &parse_models(&models.models)?, out)?,
    }
    eprintln!("done in {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}

fn gen_data(s: &Settings, out: &Path) -> Result<()> {
    let entries = dataset::generate(out, &s.scene, s.n_train, s.n_val, s.seed)?;
    eprintln!("wrote {} frames to {}", entries.len(), out.display());
    Ok(())
}

fn train_fp(s: &Settings, data: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::open(data)?;
    let cfg = s.train_config();
    let train = ds.labeled(Split::Train, &s.grid)?;
    let val = ds.labeled(Split::Val, &s.grid)?;
    eprintln!("training on {} frames, validating on {}", train.len(), val.len());
    let (net, rep) = train_fp_baseline(&train, &val, &cfg)?;
    model::save(&net, &out.join("model.ptqf"))?;
    report::write_csv(
        &out.join("train_log.csv"),
        &["epoch", "val_ap"],
        rep.epoch_ap.iter().enumerate().map(|(i, a)| vec![(i + 1).to_string(), a.to_string()]),
    )?;
    report::write_csv(
        &out.join("train_steps.csv"),
        &["step", "loss"],
        rep.step_losses.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]),
    )?;
    report::write_json(
        &out.join("train.json"),
        &TrainJson { seed: s.seed, epochs_run: rep.epoch_ap.len(), epoch_ap: rep.epoch_ap.clone(), final_ap: rep.final_ap, ap_floor: cfg.ap_floor },
    )?;
    eprintln!("val AP per epoch {:?}", rep.epoch_ap);
    Ok(())
}

/// Unlabeled calibration frames drawn from the train split.
pub fn calibration_set(ds: &Dataset, s: &Settings) -> Result<CalibrationSet> {
    let train: Vec<_> = ds.split(Split::Train).collect();
    let picks = sample_indices(train.len(), s.pipeline.calib_frames, s.seed)?;
    let mut inputs = Vec::with_capacity(picks.len());
    for &i in &picks {
        inputs.push(pillarq_core::detector::pillarize(&ds.point_cloud(train[i])?, &s.grid).input());
    }
    Ok(CalibrationSet { frame_ids: picks.iter().map(|&i| train[i].frame_id).collect(), inputs })
}

fn quantize(s: &Settings, data: &Path, model_path: &Path, out: &Path, method: Method) -> Result<()> {
    let fp = model::load(model_path)?;
    let ds = Dataset::open(data)?;
    let calib = calibration_set(&ds, s)?;
    let cfg = s.pipeline_config();
    eprintln!("{}: {} calibration frames", method.name(), calib.len());
    let (net, log) = match method {
        Method::LidarPtq => {
            let (n, l) = run_lidar_ptq(&fp, &calib, &cfg)?;
            (n, Some(l))
        }
        Method::Calibrate(m) => (run_baseline_calibration(&fp, &calib, m, cfg.bits_a, &cfg.search)?, None),
    };
    model::save(&net, &out.join("model.ptqf"))?;
    let errors = layer_errors(&fp, &net, &calib)?;
    report::write_csv(
        &out.join("calibration.csv"),
        &["layer", "method", "weight_scale", "activation_scale", "mse_maxmin", "mse"],
        errors.iter().map(|e| {
            vec![e.layer.clone(), method.name().to_string(), e.weight_scale.to_string(), e.activation_scale.to_string(), e.mse_maxmin.to_string(), e.mse.to_string()]
        }),
    )?;
    let access = ds.accesses();
    report::write_csv(&out.join("access.csv"), &["kind", "path"], report::access_rows(&access))?;
    let mut summary = QuantizeJson {
        method: method.name().to_string(),
        bits_w: cfg.bits_w,
        bits_a: cfg.bits_a,
        seed: s.seed,
        calibration_frames: calib.frame_ids.clone(),
        layers: report::layer_table(&net),
        units: Vec::new(),
        layer_mse: Vec::new(),
        file_access: AccessJson::new(&access),
    };
    let empty = Default::default();
    let log = log.as_ref().unwrap_or(&empty);
    summary.add_log(log);
    report::write_csv(&out.join("run_log.csv"), &["iteration", "layer", "local", "tgpl", "total"], report::run_log_rows(log))?;
    report::write_json(&out.join("summary.json"), &summary)?;
    Ok(())
}

fn eval_model(s: &Settings, net: &Network<f32>, inputs: &[Tensor<f32>], gts: &[Vec<pillarq_core::detector::Box3D>]) -> Result<EvalJson> {
    let cfg = s.train_config();
    let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
    let preds = predict_boxes(net, &refs, &s.grid, &cfg.decode)?;
    let r = evaluate(&preds, gts, cfg.eval_iou, cfg.detector.num_classes)?;
    Ok(EvalJson::new(&r, cfg.eval_iou, inputs.len()))
}

type ValSet = (Vec<Tensor<f32>>, Vec<Vec<pillarq_core::detector::Box3D>>);

fn val_set(s: &Settings, data: &Path) -> Result<ValSet> {
    let ds = Dataset::open(data)?;
    let frames = ds.labeled(Split::Val, &s.grid)?;
    Ok(frames.into_iter().map(|f| (f.input, f.boxes)).unzip())
}

fn evaluate_cmd(s: &Settings, data: &Path, model_path: &Path, out: &Path) -> Result<()> {
    let net = model::load(model_path)?;
    let (inputs, gts) = val_set(s, data)?;
    let e = eval_model(s, &net, &inputs, &gts)?;
    report::write_json(&out.join("eval.json"), &e)?;
    println!("mean AP {:.4}  range AP {:.4} / {:.4} / {:.4}", e.mean_ap, e.range[0].ap, e.range[1].ap, e.range[2].ap);
    Ok(())
}

fn compare(s: &Settings, data: &Path, models: &[(String, PathBuf)], out: &Path) -> Result<()> {
    let (inputs, gts) = val_set(s, data)?;
    let mut rows = Vec::new();
    for (name, p) in models {
        let net = model::load(p)?;
        rows.push(CompareRow { name: name.clone(), model: p.display().to_string(), eval: eval_model(s, &net, &inputs, &gts)? });
    }
    // stable: ties keep the order given on the command line
    rows.sort_by(|a, b| b.eval.mean_ap.total_cmp(&a.eval.mean_ap));
    let mut header = vec!["name".to_string(), "mean_ap".to_string()];
    header.extend(rows[0].eval.classes.iter().map(|c| format!("ap_{}", c.class)));
    header.extend(RANGE_LABELS.iter().map(|l| format!("ap_{l}")));
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.name.clone(), format!("{:.4}", r.eval.mean_ap)];
            v.extend(r.eval.classes.iter().map(|c| c.ap.map_or_else(|| "-".into(), |a| format!("{a:.4}"))));
            v.extend(r.eval.range.iter().map(|b| format!("{:.4}", b.ap)));
            v
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    report::write_csv(&out.join("compare.csv"), &h, &table)?;
    report::write_json(&out.join("compare.json"), &rows)?;
    print!("{}", report::text_table(&h, &table));
    Ok(())
}

fn ablate_range(s: &Settings, data: &Path, models: &[(String, PathBuf)], out: &Path) -> Result<()> {
    let cfg = s.train_config();
    let (inputs, gts) = val_set(s, data)?;
    let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
    let mut variants = Vec::new();
    for (name, p) in models {
        let net = model::load(p)?;
        let preds = predict_boxes(&net, &refs, &s.grid, &cfg.decode)?;
        variants.push((name.clone(), evaluate(&preds, &gts, cfg.eval_iou, cfg.detector.num_classes)?));
    }
    let rows: Vec<RangeJson> = range_ablation(&variants)?.iter().map(RangeJson::from).collect();
    let header = ["name", "mean_ap", "ap_0-10m", "ap_10-20m", "ap_20m+", "drop_mean", "drop_0-10m", "drop_10-20m", "drop_20m+"];
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.name.clone(), format!("{:.4}", r.mean_ap)];
            v.extend(r.range_ap.iter().map(|a| format!("{a:.4}")));
            v.push(format!("{:.1}%", 100.0 * r.mean_drop));
            v.extend(r.range_drop.iter().map(|d| format!("{:.1}%", 100.0 * d)));
            v
        })
        .collect();
    report::write_csv(&out.join("range.csv"), &header, &table)?;
    report::write_json(&out.join("range.json"), &rows)?;
    print!("{}", report::text_table(&header, &table));
    Ok(())
}
