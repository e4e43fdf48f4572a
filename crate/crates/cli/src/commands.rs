use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use stpc::checkpoint::Checkpoint;
use stpc::dataio::{gen_synthetic, read_cloud, read_dataset, split_indices, write_dataset, write_predictions, MANIFEST};
use stpc::gradcheck::{check_model, GradcheckOptions};
use stpc::metrics::{ConfusionMatrix, Metrics};
use stpc::segnet::{check_dataset, train as train_model, NetworkConfig, SegModel, TrainState};
use stpc::stpc::Aggregation;
use stpc::{PointCloud, Tape};

use crate::config::RunConfig;
use crate::CliError;

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Problems with the inputs a user pointed us at are configuration errors.
fn data_err(e: stpc::Error) -> CliError {
    match e {
        stpc::Error::Empty(_)
        | stpc::Error::LabelOutOfRange { .. }
        | stpc::Error::InvalidConfig { .. }
        | stpc::Error::TooFewPoints { .. } => CliError::Config(e.to_string()),
        other => other.into(),
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.path("out_dir")?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    Ok(out)
}

fn load_dataset(cfg: &RunConfig) -> Result<Vec<PointCloud>, CliError> {
    let dir = cfg.path("data_dir")?;
    if !dir.join(MANIFEST).is_file() {
        return Err(config_err(format!("data_dir `{}` has no {MANIFEST}", dir.display())));
    }
    let clouds = read_dataset(&dir)?;
    if clouds.is_empty() {
        return Err(config_err(format!("dataset `{}` is empty", dir.display())));
    }
    Ok(clouds)
}

fn load_checkpoint(path: &Path) -> Result<TrainState, CliError> {
    if !path.is_file() {
        return Err(config_err(format!("checkpoint `{}` does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?.to_state()?)
}

pub fn gen(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.synthetic()?;
    let clouds: Vec<PointCloud> = gen_synthetic(&spec)?.into_iter().map(|c| c.cloud).collect();
    let out = prepare_out(cfg)?;
    let paths = write_dataset(&out, &clouds)?;
    println!("wrote {} clouds to {}", paths.len(), out.display());
    Ok(())
}

fn same_except_epochs(a: &NetworkConfig, b: &NetworkConfig) -> bool {
    NetworkConfig { epochs: 0, ..a.clone() } == NetworkConfig { epochs: 0, ..b.clone() }
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let clouds = load_dataset(cfg)?;
    let resume = cfg.raw("resume");
    let mut state = if resume.is_empty() {
        TrainState::new(SegModel::new(cfg.network.clone())?)
    } else {
        let mut state = load_checkpoint(Path::new(resume))?;
        if !same_except_epochs(state.model.config(), &cfg.network) {
            return Err(config_err("resume checkpoint was trained with a different network configuration"));
        }
        state.model.set_epochs(cfg.network.epochs);
        state
    };
    check_dataset(state.model.config(), &clouds).map_err(data_err)?;
    let out = prepare_out(cfg)?;
    let ckpt = out.join("model.stpc");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!resume.is_empty())
        .truncate(resume.is_empty())
        .open(out.join("train_log.txt"))?;
    train_model(&mut state, &clouds, |record, st| {
        let line = record.log_line();
        println!("{line}");
        writeln!(log, "{line}")?;
        Checkpoint::from_state(st).save(&ckpt)?;
        Ok(true)
    })
    .map_err(data_err)?;
    Checkpoint::from_state(&state).save(&ckpt)?;
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let state = load_checkpoint(&cfg.path("checkpoint")?)?;
    let model = &state.model;
    if cfg.is_explicit("classes") && cfg.network.classes != model.config().classes {
        return Err(config_err(format!(
            "classes = {} but the checkpoint predicts {} classes",
            cfg.network.classes,
            model.config().classes
        )));
    }
    let clouds = load_dataset(cfg)?;
    check_dataset(model.config(), &clouds).map_err(data_err)?;
    let out = prepare_out(cfg)?;
    let mut cm = ConfusionMatrix::new(model.config().classes);
    for (i, cloud) in clouds.iter().enumerate() {
        let pred = model.predict(cloud, model.eval_seed(i))?;
        write_predictions(&out.join(format!("pred_{i:04}.txt")), &pred)?;
        cm.accumulate(cloud.labels().expect("checked"), &pred, None)?;
    }
    let metrics = cm.report()?;
    fs::write(out.join("metrics.csv"), format!("{}\n{}\n", metrics.csv_header(), metrics.csv_row()))?;
    fs::write(out.join("metrics.txt"), metrics.key_values())?;
    print!("{}", metrics.key_values());
    Ok(())
}

/// Trains one configuration and scores it on the held-out split.
fn run_variant(network: NetworkConfig, clouds: &[PointCloud]) -> Result<Metrics, CliError> {
    check_dataset(&network, clouds).map_err(data_err)?;
    let mut state = TrainState::new(SegModel::new(network)?);
    let records = train_model(&mut state, clouds, |_, _| Ok(true)).map_err(data_err)?;
    match records.last() {
        Some(r) => Ok(r.metrics.clone()),
        None => {
            let (_, held) = split_indices(clouds.len());
            let held: Vec<PointCloud> = held.iter().map(|&i| clouds[i].clone()).collect();
            Ok(state.model.evaluate(&held)?)
        }
    }
}

fn write_rows(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let seeds: u64 = cfg.parse("seeds")?;
    if seeds == 0 {
        return Err(config_err("`seeds` must be at least 1"));
    }
    let clouds = load_dataset(cfg)?;
    let out = prepare_out(cfg)?;
    let header = "variant,seed,miou,oa,macc";
    let mut rows = Vec::new();
    for s in 0..seeds {
        let seed = cfg.network.seed + s;
        for variant in Aggregation::ALL {
            let network = NetworkConfig {
                aggregation: variant,
                seed,
                ..cfg.network.clone()
            };
            let m = run_variant(network, &clouds)?;
            let row = format!("{variant},{seed},{},{},{}", m.miou, m.oa, m.macc);
            println!("{row}");
            rows.push(row);
            write_rows(&out.join("ablation.csv"), header, &rows)?;
        }
    }
    Ok(())
}

pub fn sweep_atoms(cfg: &RunConfig) -> Result<(), CliError> {
    let grid: Vec<usize> = cfg.list("atom_grid")?;
    if grid.is_empty() || grid.contains(&0) {
        return Err(config_err("`atom_grid` needs one or more positive atom counts"));
    }
    let clouds = load_dataset(cfg)?;
    let out = prepare_out(cfg)?;
    let header = "atoms,seed,miou,oa,macc";
    let mut rows = Vec::new();
    for &atoms in &grid {
        let network = NetworkConfig {
            atoms,
            aggregation: Aggregation::Anisotropic,
            ..cfg.network.clone()
        };
        let m = run_variant(network, &clouds)?;
        let row = format!("{atoms},{},{},{},{}", cfg.network.seed, m.miou, m.oa, m.macc);
        println!("{row}");
        rows.push(row);
        write_rows(&out.join("sweep.csv"), header, &rows)?;
    }
    Ok(())
}

pub fn inspect_coeffs(cfg: &RunConfig) -> Result<(), CliError> {
    let state = load_checkpoint(&cfg.path("checkpoint")?)?;
    let model = &state.model;
    if model.config().aggregation != Aggregation::Anisotropic {
        return Err(config_err("the checkpoint has no direction dictionary (aggregation is not anisotropic)"));
    }
    let pre = match cfg.raw("coeff_mode") {
        "pre" => true,
        "post" => false,
        other => return Err(config_err(format!("coeff_mode must be pre or post, found `{other}`"))),
    };
    let path = cfg.path("cloud")?;
    if !path.is_file() {
        return Err(config_err(format!("cloud `{}` does not exist", path.display())));
    }
    let cloud = read_cloud(&path)?;
    if cloud.channels() != model.config().in_channels {
        return Err(config_err(format!(
            "cloud has {} channels, the checkpoint expects {}",
            cloud.channels(),
            model.config().in_channels
        )));
    }
    let point: usize = cfg.parse("point_index")?;
    if point >= cloud.len() {
        return Err(config_err(format!("point_index {point} is outside a {}-point cloud", cloud.len())));
    }
    let mut tape = Tape::new();
    let bound = model.params().bind_frozen(&mut tape);
    let fwd = model.forward(&mut tape, &bound, &cloud, model.eval_seed(0))?;
    let coeffs = fwd.coefficients[0];
    let values = tape.value(if pre { coeffs.pre_threshold } else { coeffs.alpha });
    let (k, m) = (values.shape()[1], values.shape()[2]);
    let neighbors = fwd.hierarchy.levels[0].neighbors.row(point);

    let mut csv = String::from("k,neighbor_index");
    for j in 1..=m {
        write!(csv, ",m{j}").unwrap();
    }
    csv.push('\n');
    for (kk, &nb) in neighbors.iter().enumerate() {
        write!(csv, "{},{nb}", kk + 1).unwrap();
        for v in &values.data()[(point * k + kk) * m..(point * k + kk + 1) * m] {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    }
    let out = prepare_out(cfg)?;
    fs::write(out.join("coeffs.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = stpc::dataio::SyntheticSpec {
        clouds: 1,
        points: cfg.parse("gc_points")?,
        ..cfg.synthetic()?
    };
    spec.validate()?;
    let cloud = gen_synthetic(&spec)?.remove(0).cloud;
    let model = SegModel::new(cfg.network.clone())?;
    let samples: usize = cfg.parse("gc_samples")?;
    let opts = GradcheckOptions {
        step: cfg.parse("h")?,
        tolerance: cfg.parse("tol")?,
        floor: cfg.parse("floor")?,
        samples: (samples > 0).then_some(samples),
        seed: cfg.network.seed,
        corrupt_backward: cfg.flag("corrupt_backward")?,
    };
    if !(opts.step > 0.0 && opts.tolerance > 0.0 && opts.floor >= 0.0) {
        return Err(config_err("h and tol must be positive and floor non-negative"));
    }
    let out = prepare_out(cfg)?;
    let reports = check_model(&model, &cloud, cfg.network.seed, &opts).map_err(data_err)?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    let mut text = String::new();
    for r in &reports {
        writeln!(text, "{}", r.line()).unwrap();
    }
    writeln!(text, "{} of {} blocks failed", failed, reports.len()).unwrap();
    fs::write(out.join("gradcheck.txt"), &text)?;
    print!("{text}");
    if failed > 0 {
        return Err(CliError::Runtime(format!("gradient check failed for {failed} blocks")));
    }
    Ok(())
}
