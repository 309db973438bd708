use std::path::{Path, PathBuf};

use crm::data::{gen_gmm, load_idx, split_dataset};
use crm::eval::{estimator_study, evaluate, reference_linear_model};
use crm::trainer::train;
use crm::{Dataset, Model};

use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};

/// How a command finished when it did not error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

pub const DATA_DIR_ENV: &str = "CRM_DATA_DIR";

pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Train, calibration and test sets as described by `[data]`.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let d = &cfg.data;
    let seed = cfg.run.seed;
    let splits = match d.source {
        DataSource::Mnist => {
            let dir = data_root().join(&d.dir);
            let file = |name: &str| dir.join(name);
            let train = load_idx(file("train-images-idx3-ubyte"), file("train-labels-idx1-ubyte"))?;
            let test = load_idx(file("t10k-images-idx3-ubyte"), file("t10k-labels-idx1-ubyte"))?;
            let (tr, cal, _) = split_dataset(train, (d.train_size, d.cal_size, 0), seed)?;
            (tr, cal, test)
        }
        DataSource::Gmm => split_dataset(gen_gmm(&cfg.gmm_spec())?, (d.train_size, d.cal_size, d.test_size), seed)?,
        DataSource::Cache => {
            let path = d
                .path
                .as_ref()
                .ok_or_else(|| Error::Usage("[data] source = \"cache\" needs a path".into()))?;
            split_dataset(Dataset::load(path)?, (d.train_size, d.cal_size, d.test_size), seed)?
        }
    };
    Ok(splits)
}

pub fn cmd_train(cfg: &RunConfig, origin: &Path, out: &Path) -> Result<Outcome> {
    let tc = cfg.train_config(origin)?;
    let (tr, cal, test) = load_splits(cfg)?;
    let layers = Model::mlp_topology(tr.feature_dim, &cfg.model.hidden, tr.num_classes);
    let model = Model::init(layers, tc.seed)?;
    let (model, history) = train(model, &tr, &cal, &test, &tc)?;
    create_out(out)?;
    model.save(out.join("model.crml"))?;
    history.save_csv(out.join("history.csv"))?;
    if let Some(r) = history.last() {
        println!(
            "epoch {} estimator {} test_acc {:.4} avg_set_size {:.4} coverage {:.4} test_loss {:.4}",
            r.epoch, tc.estimator, r.test_acc, r.avg_set_size, r.coverage, r.test_loss
        );
    }
    Ok(Outcome::Success)
}

pub fn cmd_eval(cfg: &RunConfig, origin: &Path, checkpoint: &Path, trials: Option<usize>, out: &Path) -> Result<Outcome> {
    if !checkpoint.exists() {
        return Err(Error::CheckpointNotFound(checkpoint.to_path_buf()));
    }
    let conf = cfg.conformal_config(origin)?;
    let model = Model::load(checkpoint)?;
    let (_, cal, test) = load_splits(cfg)?;
    let trials = trials.unwrap_or(cfg.eval.trials);
    let report = evaluate(&model, &cal, &test, conf.alpha, trials, cfg.run.seed, conf.score_kind)?;
    create_out(out)?;
    report.save_csvs(out.join("eval_trials.csv"), out.join("eval_classes.csv"))?;
    println!(
        "trials {} accuracy {:.4} avg_set_size {:.4} ± {:.4} coverage {:.4} ± {:.4}",
        report.trials,
        report.accuracy,
        report.avg_set_size,
        report.avg_set_size_std,
        report.coverage,
        report.coverage_std
    );
    Ok(Outcome::Success)
}

pub fn cmd_study(cfg: &RunConfig, origin: &Path, out: &Path) -> Result<Outcome> {
    let sc = cfg.study_config(origin)?;
    let gmm = cfg.gmm_spec();
    let model = match &cfg.study.theta {
        Some(theta) => Model::new(Model::linear_topology(gmm.dim(), gmm.num_classes()), theta.clone())?,
        None => reference_linear_model(),
    };
    let report = estimator_study(&model, &gmm, &sc)?;
    create_out(out)?;
    report.save_csv(out.join("study.csv"))?;
    let mut ok = true;
    for check in report.checks() {
        println!("{check}");
        ok &= check.passed;
    }
    Ok(if ok { Outcome::Success } else { Outcome::CheckFailed })
}

pub fn cmd_gen_gmm(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let ds = gen_gmm(&cfg.gmm_spec())?;
    create_out(out)?;
    let path = out.join("gmm.crmd");
    ds.save(&path)?;
    println!("wrote {} examples to {}", ds.len(), path.display());
    Ok(Outcome::Success)
}
