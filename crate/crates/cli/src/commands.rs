use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use segpre::data::coco::ANNOTATION_FILE;
use segpre::data::synth::synth_dataset_with;
use segpre::data::{load_coco_dataset, make_few_shot_split, write_coco_dataset, CocoDataset, FewShotSplit, ImageSample, SynthConfig};
use segpre::eval::{evaluate, ground_truth_of, predict, results_json, DecodeConfig, EvalReport};
use segpre::model::{Detector, DetectorParams};
use segpre::trainer::{
    coco_pretrain, finetune_on_with, initial_params, load_checkpoint, pre_finetune, save_checkpoint, ArmData,
    Checkpoint, Phase, TrainEvent,
};

use crate::config::{self, ResolvedConfig};
use crate::output::{self, Layout};
use crate::{overlay, CliError, Cli, Command, Format, Split};

#[derive(Debug, Serialize)]
struct FileRecord {
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    arm: Option<String>,
    seed: u64,
    workers: Option<usize>,
    config: &'a ResolvedConfig,
    inputs: BTreeMap<String, FileRecord>,
    checkpoint: Option<FileRecord>,
    metrics: BTreeMap<String, Value>,
    duration_secs: f64,
    version: &'static str,
}

struct Ctx<'a> {
    cli: &'a Cli,
    layout: Layout,
    cfg: ResolvedConfig,
    seed: u64,
    inputs: BTreeMap<String, FileRecord>,
    checkpoint: Option<FileRecord>,
    metrics: BTreeMap<String, Value>,
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut cfg = config::load(cli.config.as_deref(), &cli.sets)?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    match &cli.command {
        Command::Amt2 {
            reset_queue_per_iter,
            freeze_backbone_in_adaption,
            ..
        } => {
            cfg.train.amt2.reset_queue_per_iter |= reset_queue_per_iter;
            cfg.train.amt2.freeze_backbone_in_adaption |= freeze_backbone_in_adaption;
        }
        Command::Finetune { l2sp_finetune, .. } => cfg.train.finetune.l2sp_finetune |= l2sp_finetune,
        _ => {}
    }
    cfg.train = cli.arm.configure(&cfg.train);
    cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let started = Instant::now();
    let mut ctx = Ctx {
        cli,
        layout: Layout::new(&cli.out),
        seed: cfg.train.seed,
        cfg,
        inputs: BTreeMap::new(),
        checkpoint: None,
        metrics: BTreeMap::new(),
    };
    let name = match &cli.command {
        Command::Synth { domain, n, size } => {
            synth(&mut ctx, *domain, *n as usize, *size as usize)?;
            "synth"
        }
        Command::PretrainCoco { coco } => {
            ctx.layout.ensure()?;
            pretrain(&mut ctx, coco)?;
            "pretrain-coco"
        }
        Command::Amt2 { coco, cells, .. } => {
            ctx.layout.ensure()?;
            amt2(&mut ctx, coco.as_deref(), cells)?;
            "amt2"
        }
        Command::Finetune { data, fraction, curve_every, .. } => {
            ctx.layout.ensure()?;
            finetune(&mut ctx, data, *fraction, curve_every.map(|c| c as usize))?;
            "finetune"
        }
        Command::Evaluate {
            data,
            checkpoint,
            split,
            fraction,
            overlays,
            overlay_score,
            events,
        } => {
            ctx.layout.ensure()?;
            let ck = checkpoint.clone().unwrap_or_else(|| ctx.layout.checkpoint("finetune"));
            let opts = EvalOptions {
                split: *split,
                fraction: *fraction,
                overlays: *overlays,
                overlay_score: *overlay_score,
                events: events.clone(),
            };
            evaluate_cmd(&mut ctx, data, &ck, &opts)?;
            "evaluate"
        }
        Command::Run {
            coco,
            cells,
            data,
            fraction,
            overlays,
        } => {
            ctx.layout.ensure()?;
            run(&mut ctx, coco.as_deref(), cells.as_deref(), data, *fraction, *overlays)?;
            "run"
        }
    };
    let manifest = Manifest {
        command: name,
        arm: (!matches!(cli.command, Command::Synth { .. })).then(|| cli.arm.to_string()),
        seed: ctx.seed,
        workers: cli.workers,
        config: &ctx.cfg,
        inputs: ctx.inputs,
        checkpoint: ctx.checkpoint,
        metrics: ctx.metrics,
        duration_secs: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION"),
    };
    output::write_json(&ctx.layout.manifest(), &manifest)?;
    Ok(())
}

fn annotation_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(ANNOTATION_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_dataset(ctx: &mut Ctx, role: &str, path: &Path) -> Result<CocoDataset> {
    let ann = annotation_path(path);
    if !ann.exists() {
        return Err(CliError::Data(format!("{role} annotations not found at {}", ann.display())).into());
    }
    let ds = load_coco_dataset(&ann).with_context(|| format!("loading {role} dataset {}", ann.display()))?;
    if ds.samples.is_empty() {
        return Err(CliError::Data(format!("{role} dataset {} has no images", ann.display())).into());
    }
    ctx.inputs.insert(
        role.to_string(),
        FileRecord {
            sha256: output::sha256_file(&ann)?,
            path: ann,
        },
    );
    Ok(ds)
}

fn check_categories(ds: &CocoDataset, num_classes: usize, role: &str) -> Result<()> {
    let max = ds.max_category();
    if max as usize > num_classes {
        return Err(CliError::Data(format!(
            "{role} dataset uses category ids up to {max} but the model predicts {num_classes} classes"
        ))
        .into());
    }
    Ok(())
}

fn load_prior(ctx: &mut Ctx, phase: &str, hint: &str) -> Result<Checkpoint> {
    let path = ctx.layout.checkpoint(phase);
    if !path.exists() {
        return Err(CliError::Dependency(format!(
            "{} not found; run `segpre {hint}` with the same --out first",
            path.display()
        ))
        .into());
    }
    let ck = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    ctx.inputs.insert(
        format!("{phase}_checkpoint"),
        FileRecord {
            sha256: output::sha256_file(&path)?,
            path,
        },
    );
    Ok(ck)
}

fn checkpoint_arm(ck: &Checkpoint) -> Option<&str> {
    ck.meta.get("arm").and_then(Value::as_str)
}

fn save(ctx: &mut Ctx, phase: &str, ck: &Checkpoint, events: &[TrainEvent]) -> Result<()> {
    let path = ctx.layout.checkpoint(phase);
    let hash = save_checkpoint(ck, &path).with_context(|| format!("writing {}", path.display()))?;
    output::append_events(&ctx.layout.events(), events)?;
    if let Some(last) = events.last() {
        ctx.metrics.insert(format!("{phase}_final_loss"), json!(last.losses.total));
    }
    ctx.metrics.insert(format!("{phase}_steps"), json!(events.len()));
    log::info!("{phase}: {} events, checkpoint {}", events.len(), path.display());
    ctx.checkpoint = Some(FileRecord { path, sha256: hash });
    Ok(())
}

fn checkpoint_for(ctx: &Ctx, model: segpre::model::ModelConfig, params: DetectorParams, moco: Option<segpre::moco::MoCoState>, phase: &str, extra: Value) -> Checkpoint {
    let mut meta = json!({ "phase": phase, "arm": ctx.cli.arm.as_str(), "seed": ctx.seed });
    if let (Some(m), Some(e)) = (meta.as_object_mut(), extra.as_object()) {
        m.extend(e.clone());
    }
    Checkpoint {
        model,
        params,
        moco,
        config: Some(ctx.cfg.train.clone()),
        meta,
    }
}

fn say(ctx: &Ctx, text: &str, json_value: Value) -> Result<()> {
    match ctx.cli.format {
        Format::Text => println!("{text}"),
        Format::Json => println!("{}", serde_json::to_string_pretty(&json_value)?),
    }
    Ok(())
}

fn synth(ctx: &mut Ctx, domain: segpre::data::Domain, n: usize, size: usize) -> Result<()> {
    let out = &ctx.cli.out;
    if !ctx.cli.force && !output::dir_is_empty(out)? {
        return Err(CliError::Usage(format!("{} is not empty; pass --force to write into it", out.display())).into());
    }
    let samples = synth_dataset_with(domain, n, ctx.seed, SynthConfig { height: size, width: size })?;
    let cats = domain.categories();
    let ann = write_coco_dataset(out, &samples, &cats)?;
    let instances: usize = samples.iter().map(|s| s.annotations.len()).sum();
    ctx.metrics.insert("images".into(), json!(n));
    ctx.metrics.insert("instances".into(), json!(instances));
    ctx.inputs.insert(
        "annotations".into(),
        FileRecord {
            sha256: output::sha256_file(&ann)?,
            path: ann.clone(),
        },
    );
    say(
        ctx,
        &format!("wrote {n} {domain} images ({instances} instances) to {}", out.display()),
        json!({ "annotations": ann, "images": n, "instances": instances }),
    )
}

fn pretrain(ctx: &mut Ctx, coco: &Path) -> Result<Checkpoint> {
    let arm = ctx.cli.arm;
    if !arm.uses_pretrain() {
        return Err(CliError::Usage(format!("arm {arm} has no natural-image pre-training phase")).into());
    }
    let ds = load_dataset(ctx, "coco", coco)?;
    let (det, _) = Detector::new(ctx.cfg.train.model)?;
    check_categories(&ds, det.config.num_classes, "coco")?;
    let mut params = initial_params(&det, ctx.seed);
    let events = coco_pretrain(&det, &mut params, &ds.samples, &ctx.cfg.train)?;
    let ck = checkpoint_for(ctx, det.config, params, None, "pretrain", json!({}));
    save(ctx, "pretrain", &ck, &events)?;
    say(
        ctx,
        &format!("pre-training finished: {} steps", events.len()),
        json!({ "phase": "pretrain", "steps": events.len() }),
    )?;
    Ok(ck)
}

fn amt2(ctx: &mut Ctx, coco: Option<&Path>, cells: &Path) -> Result<Checkpoint> {
    let arm = ctx.cli.arm;
    if !arm.uses_amt2() && !arm.uses_moco_only() {
        return Err(CliError::Usage(format!("arm {arm} has no cell pre-training phase")).into());
    }
    let (det, pretrained) = if arm.uses_pretrain() {
        let ck = load_prior(ctx, "pretrain", "pretrain-coco")?;
        (Detector::new(ck.model)?.0, Some((ck.params, Vec::new())))
    } else {
        (Detector::new(ctx.cfg.train.model)?.0, None)
    };
    let cell_ds = load_dataset(ctx, "cells", cells)?;
    let coco_ds = match (coco, arm.uses_amt2()) {
        (Some(p), _) => Some(load_dataset(ctx, "coco", p)?),
        (None, true) => return Err(CliError::Usage(format!("arm {arm} needs --coco for the adaption phases")).into()),
        (None, false) => None,
    };
    if let Some(ds) = &coco_ds {
        check_categories(ds, det.config.num_classes, "coco")?;
    }
    let coco_samples: &[ImageSample] = coco_ds.as_ref().map_or(&[], |d| &d.samples);
    let data = ArmData {
        coco: coco_samples,
        cells: &cell_ds.samples,
        finetune: &[],
    };
    let mut cfg = ctx.cfg.train.clone();
    // The pre-training phase already ran (or does not apply); only new events are logged.
    cfg.pretrain.coco_pretrain_epochs = 0;
    let out = pre_finetune(arm, &det, &cfg, &data, pretrained.as_ref())?;
    let ck = checkpoint_for(ctx, det.config, out.params, out.moco, "amt2", json!({}));
    save(ctx, "amt2", &ck, &out.events)?;
    let moco = out.events.iter().filter(|e| e.phase == Phase::Moco).count();
    let adaption = out.events.iter().filter(|e| e.phase == Phase::Adaption).count();
    say(
        ctx,
        &format!("cell pre-training finished: {moco} MoCo steps, {adaption} adaption steps"),
        json!({ "phase": "amt2", "moco_steps": moco, "adaption_steps": adaption }),
    )?;
    Ok(ck)
}

fn split_of(ds: &CocoDataset, fraction: f64, seed: u64) -> Result<FewShotSplit> {
    Ok(make_few_shot_split(&ds.ids(), fraction, seed)?)
}

fn select<'a>(ds: &'a CocoDataset, ids: &[String]) -> Vec<&'a ImageSample> {
    let wanted: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
    ds.samples.iter().filter(|s| wanted.contains(s.id.as_str())).collect()
}

fn finetune(ctx: &mut Ctx, data: &Path, fraction: f64, curve_every: Option<usize>) -> Result<Checkpoint> {
    let arm = ctx.cli.arm;
    let (det, mut params) = if arm.uses_amt2() || arm.uses_moco_only() {
        let ck = load_prior(ctx, "amt2", &format!("--arm {arm} amt2"))?;
        if checkpoint_arm(&ck) != Some(arm.as_str()) {
            return Err(CliError::Dependency(format!(
                "checkpoints/amt2.ckpt was produced for arm {}, not {arm}; rerun `segpre --arm {arm} amt2`",
                checkpoint_arm(&ck).unwrap_or("?")
            ))
            .into());
        }
        (Detector::new(ck.model)?.0, ck.params)
    } else if arm.uses_pretrain() {
        let ck = load_prior(ctx, "pretrain", "pretrain-coco")?;
        (Detector::new(ck.model)?.0, ck.params)
    } else {
        let det = Detector::new(ctx.cfg.train.model)?.0;
        let p = initial_params(&det, ctx.seed);
        (det, p)
    };
    let ds = load_dataset(ctx, "data", data)?;
    check_categories(&ds, det.config.num_classes, "data")?;
    let split = split_of(&ds, fraction, ctx.seed)?;
    let few = select(&ds, &split.selected_ids);
    let holdout: Vec<ImageSample> = select(&ds, &split.holdout_ids).into_iter().cloned().collect();
    let decode = ctx.cfg.eval;
    let mut curve = String::from("step,epoch,ap_bbox,ap_segm\n");
    let per_epoch = few.len().div_ceil(ctx.cfg.train.finetune.batch_size);
    let steps = ctx.cfg.train.finetune.steps;
    let events = finetune_on_with(&det, &mut params, &few, &ctx.cfg.train, |step, p| {
        if let Some(k) = curve_every {
            if (step + 1) % k == 0 || step + 1 == steps {
                let r = eval_report(&det, p, &holdout, &decode)?;
                let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
                let _ = writeln!(curve, "{},{},{},{}", step + 1, step / per_epoch, f(r.ap_bbox), f(r.ap_segm));
            }
        }
        Ok(())
    })?;
    if curve_every.is_some() {
        output::write_atomic(&ctx.layout.report("finetune_curve.csv"), curve.as_bytes())?;
    }
    let extra = json!({ "split": { "fraction": fraction, "seed": ctx.seed, "selected": split.selected_ids.len() } });
    let ck = checkpoint_for(ctx, det.config, params, None, "finetune", extra);
    save(ctx, "finetune", &ck, &events)?;
    say(
        ctx,
        &format!("fine-tuning finished: {} steps on {} images", events.len(), few.len()),
        json!({ "phase": "finetune", "steps": events.len(), "images": few.len() }),
    )?;
    Ok(ck)
}

fn eval_report(det: &Detector, params: &DetectorParams, samples: &[ImageSample], decode: &DecodeConfig) -> segpre::Result<EvalReport> {
    let preds = predict(det, params, samples, decode)?;
    evaluate(&preds, &ground_truth_of(samples), samples.len())
}

const OVERLAY_SCALE: usize = 4;

struct EvalOptions {
    split: Split,
    fraction: Option<f64>,
    overlays: usize,
    overlay_score: f64,
    events: Option<PathBuf>,
}

fn evaluate_cmd(ctx: &mut Ctx, data: &Path, checkpoint: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    if !checkpoint.exists() {
        return Err(CliError::Dependency(format!(
            "{} not found; run `segpre finetune` first or pass --checkpoint",
            checkpoint.display()
        ))
        .into());
    }
    let ck = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    ctx.inputs.insert(
        "checkpoint".into(),
        FileRecord {
            sha256: output::sha256_file(checkpoint)?,
            path: checkpoint.to_path_buf(),
        },
    );
    let det = Detector::new(ck.model)?.0;
    let ds = load_dataset(ctx, "data", data)?;
    check_categories(&ds, det.config.num_classes, "data")?;
    let split_meta = ck.meta.get("split");
    let fraction = opts
        .fraction
        .or_else(|| split_meta.and_then(|s| s.get("fraction")).and_then(Value::as_f64))
        .unwrap_or(0.05);
    let split_seed = split_meta.and_then(|s| s.get("seed")).and_then(Value::as_u64).unwrap_or(ctx.seed);
    let samples: Vec<ImageSample> = match opts.split {
        Split::All => ds.samples.clone(),
        s => {
            let split = split_of(&ds, fraction, split_seed)?;
            let ids = if s == Split::Train { &split.selected_ids } else { &split.holdout_ids };
            select(&ds, ids).into_iter().cloned().collect()
        }
    };
    if samples.is_empty() {
        return Err(CliError::Data("the selected split has no images".into()).into());
    }
    let preds = predict(&det, &ck.params, &samples, &ctx.cfg.eval)?;
    let report = evaluate(&preds, &ground_truth_of(&samples), samples.len())?;

    output::write_json(&ctx.layout.report("eval.json"), &report)?;
    output::write_atomic(&ctx.layout.report("eval.txt"), report.to_table().as_bytes())?;
    output::write_json(&ctx.layout.report("results.json"), &results_json(&preds)?)?;
    let mut csv = String::from("iou,ap_bbox,ap_segm,tp_bbox,fp_bbox,fn_bbox,tp_segm,fp_segm,fn_segm\n");
    for (b, m) in report.bbox.thresholds.iter().zip(&report.segm.thresholds) {
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        let _ = writeln!(
            csv,
            "{:.2},{},{},{},{},{},{},{},{}",
            b.iou,
            f(b.ap),
            f(m.ap),
            b.tp,
            b.fp,
            b.fn_,
            m.tp,
            m.fp,
            m.fn_
        );
    }
    output::write_atomic(&ctx.layout.report("ap_curve.csv"), csv.as_bytes())?;
    if let Some(ev) = &opts.events {
        write_loss_curve(&ctx.layout.report("loss_curve.csv"), &output::read_events(ev)?)?;
    }
    if opts.overlays > 0 {
        let dir = ctx.layout.overlays();
        fs::create_dir_all(&dir)?;
        for s in samples.iter().take(opts.overlays) {
            let mine: Vec<&segpre::eval::Prediction> = preds
                .iter()
                .filter(|p| p.image_id == s.id && p.score >= opts.overlay_score)
                .collect();
            let name: String = s.id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect();
            overlay::write(&dir.join(format!("{name}.png")), s, &mine, OVERLAY_SCALE)?;
        }
    }
    ctx.metrics.insert("ap_bbox".into(), json!(report.ap_bbox));
    ctx.metrics.insert("ap_segm".into(), json!(report.ap_segm));
    ctx.metrics.insert("eval_images".into(), json!(samples.len()));
    ctx.metrics.insert("predictions".into(), json!(preds.len()));
    match ctx.cli.format {
        Format::Text => print!("{}", report.to_table()),
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(report)
}

/// Mean losses per (phase, iteration), in order of first appearance.
fn write_loss_curve(path: &Path, events: &[TrainEvent]) -> Result<()> {
    let mut rows: Vec<((Phase, usize), Vec<&TrainEvent>)> = Vec::new();
    for e in events {
        match rows.last_mut() {
            Some((k, v)) if *k == (e.phase, e.iter) => v.push(e),
            _ => rows.push(((e.phase, e.iter), vec![e])),
        }
    }
    let mut csv = String::from("phase,iter,steps,total,clas,box,seg,contra,reg\n");
    for ((phase, iter), evs) in rows {
        let n = evs.len() as f64;
        let m = |f: fn(&TrainEvent) -> f64| evs.iter().map(|e| f(e)).sum::<f64>() / n;
        let _ = writeln!(
            csv,
            "{},{iter},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            phase.as_str(),
            evs.len(),
            m(|e| e.losses.total),
            m(|e| e.losses.clas),
            m(|e| e.losses.bbox),
            m(|e| e.losses.seg),
            m(|e| e.losses.contra),
            m(|e| e.losses.reg)
        );
    }
    output::write_atomic(path, csv.as_bytes())
}

fn run(ctx: &mut Ctx, coco: Option<&Path>, cells: Option<&Path>, data: &Path, fraction: f64, overlays: usize) -> Result<()> {
    let arm = ctx.cli.arm;
    let need = |p: Option<&Path>, flag: &str| -> Result<PathBuf> {
        p.map(Path::to_path_buf)
            .ok_or_else(|| CliError::Usage(format!("arm {arm} needs {flag}")).into())
    };
    if ctx.cli.force {
        let _ = fs::remove_file(ctx.layout.events());
    } else if ctx.layout.events().exists() {
        return Err(CliError::Usage(format!(
            "{} already holds an event log; pass --force to start over",
            ctx.layout.root.display()
        ))
        .into());
    }
    if arm.uses_pretrain() {
        pretrain(ctx, &need(coco, "--coco")?)?;
    }
    if arm.uses_amt2() || arm.uses_moco_only() {
        amt2(ctx, coco, &need(cells, "--cells")?)?;
    }
    finetune(ctx, data, fraction, None)?;
    let ck_record = ctx.checkpoint.take();
    let opts = EvalOptions {
        split: Split::Holdout,
        fraction: Some(fraction),
        overlays,
        overlay_score: 0.3,
        events: Some(ctx.layout.events()),
    };
    let path = ctx.layout.checkpoint("finetune");
    evaluate_cmd(ctx, data, &path, &opts)?;
    ctx.inputs.remove("checkpoint");
    ctx.checkpoint = ck_record;
    Ok(())
}
