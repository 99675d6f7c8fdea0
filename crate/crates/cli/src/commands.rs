use std::path::PathBuf;

use eri_core::encoders::{load_checkpoint, save_checkpoint};
use eri_core::ensembler::{ensemble_predict, incremental_report, write_report_csv, EnsembleSpec};
use eri_core::featstore::{default_emotion_names, gen_synthetic, Dataset, DatasetManifest, Split};
use eri_core::objectives::{label_corr_matrix, write_corr_csv, write_report_json};
use eri_core::trainer::{evaluate, predict, split_targets, TrainSession};
use eri_core::tuner::run_search_manifest;

use crate::config::RunConfig;
use crate::{Command as Cmd, Failure};

pub fn run(cmd: Cmd, cfg: &RunConfig) -> Result<(), Failure> {
    match cmd {
        Cmd::Synth => synth(cfg),
        Cmd::Train => train(cfg),
        Cmd::Eval => eval(cfg),
        Cmd::Tune => tune(cfg),
        Cmd::Ensemble => ensemble(cfg),
        Cmd::Labelcorr => labelcorr(cfg),
    }
}

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.manifest.clone().unwrap_or_else(|| cfg.out.join("manifest.jsonl"))
}

fn load(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let m = DatasetManifest::load(manifest_path(cfg))?;
    Ok(Dataset::load(&m)?)
}

fn info(cfg: &RunConfig, msg: impl AsRef<str>) {
    if cfg.verbosity > 0 {
        eprintln!("{}", msg.as_ref());
    }
}

fn synth(cfg: &RunConfig) -> Result<(), Failure> {
    let m = gen_synthetic(&cfg.synth, cfg.seed, &cfg.out)?;
    println!(
        "wrote {} samples to {}",
        m.entries.len(),
        cfg.out.join("manifest.jsonl").display()
    );
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<(), Failure> {
    cfg.hp.validate()?;
    let ds = load(cfg)?;
    let mut session = TrainSession::new(&ds, &cfg.hp, cfg.seed)?;
    while !session.is_done() {
        let e = session.step_epoch()?;
        info(
            cfg,
            format!(
                "epoch {:>3}  loss {:.5}  val mean_pcc {:.4}  val mse {:.5}",
                e.epoch, e.train_loss, e.val_mean_pcc, e.val_mse
            ),
        );
    }
    let out = session.finish()?;
    let model = &out.checkpoint.model;
    save_checkpoint(model, &out.checkpoint.meta, cfg.out.join("checkpoint.ckpt"))?;
    out.history.write_jsonl(cfg.out.join("history.jsonl"))?;
    predict(model, &ds, Split::Val)?.write_csv(cfg.out.join("predictions_val.csv"))?;
    let report = evaluate(model, &ds, Split::Val)?;
    write_report_json(&report, cfg.out.join("val_metrics.json"))?;
    println!(
        "best epoch {} of {}: val mean_pcc {:.4}",
        out.history.best_epoch.unwrap_or(0),
        out.history.epochs.len(),
        report.mean_pcc
    );
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<(), Failure> {
    let ck_path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("checkpoint.ckpt"));
    let ck = load_checkpoint(&ck_path)?;
    let ds = load(cfg)?;
    let split = cfg.split.unwrap_or(Split::Val);
    let report = evaluate(&ck.model, &ds, split)?;
    write_report_json(&report, cfg.out.join("metrics.json"))?;
    predict(&ck.model, &ds, split)?.write_csv(cfg.out.join(format!("predictions_{}.csv", split.as_str())))?;
    println!(
        "{} on {}: mean_pcc {:.4}  mse {:.5}  n {}",
        ck_path.display(),
        split.as_str(),
        report.mean_pcc,
        report.mse,
        report.n_samples
    );
    Ok(())
}

fn tune(cfg: &RunConfig) -> Result<(), Failure> {
    let space = cfg.search_space();
    space.validate()?;
    let m = DatasetManifest::load(manifest_path(cfg))?;
    let out = run_search_manifest(&m, &space, cfg.seed, cfg.parallelism)?;
    out.write_jsonl(cfg.out.join("trials.jsonl"))?;
    out.write_summary(cfg.out.join("search_summary.json"))?;
    let best = out.best().map_err(|e| Failure::runtime(e.to_string()))?;
    println!(
        "best trial {}: val mean_pcc {:.4} (lr {:.3e}, batch {}, hidden {})",
        best.trial_id,
        best.score.unwrap_or(f64::NAN),
        best.hyperparams.learning_rate,
        best.hyperparams.batch_size,
        best.hyperparams.hidden_dim
    );
    Ok(())
}

fn ensemble(cfg: &RunConfig) -> Result<(), Failure> {
    let spec = EnsembleSpec {
        members: cfg.ensemble.members.clone(),
        weights: cfg.ensemble.weights.clone(),
    };
    spec.weights()?;
    let ds = load(cfg)?;
    let split = cfg.split.unwrap_or(Split::Val);
    let rows = incremental_report(&spec, &ds, split)?;
    write_report_csv(&rows, cfg.out.join("ensemble_report.csv"))?;
    ensemble_predict(&spec, &ds, split)?
        .write_csv(cfg.out.join(format!("ensemble_predictions_{}.csv", split.as_str())))?;
    for r in &rows {
        println!("{:>2}  {:<24} {:.4}", r.k, r.member_id, r.mean_pcc);
    }
    Ok(())
}

fn labelcorr(cfg: &RunConfig) -> Result<(), Failure> {
    let ds = load(cfg)?;
    let split = cfg.split.unwrap_or(Split::Train);
    let (_, labels) = split_targets(&ds, split)?;
    let corr = label_corr_matrix(&labels)?;
    let path = cfg.out.join("label_corr.csv");
    write_corr_csv(&corr, &default_emotion_names(), &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
