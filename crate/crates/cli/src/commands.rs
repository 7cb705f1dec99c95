use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nilm_core::bench::{classification_windows, mix_recordings, solo_recordings};
use nilm_core::decompose::{decompose, energy, vae_train, PowerWindow, SoloWindow, VaeConfig, VaeParams};
use nilm_core::eval::{
    baseline_rawseq, multilabel_metrics, render_table, write_report_csv, write_report_json, MetricReport, ReportRow,
};
use nilm_core::nn::{Graph, ParamStore};
use nilm_core::preprocess::{cycles_from_recording, CycleSample, PreprocessConfig};
use nilm_core::signature::{render_pgm, SignatureChannels};
use nilm_core::synth::{ingest_csv, split_dataset, synth_recording, RawRecording, Scenario, GRID_HZ};
use nilm_core::train::{
    continual_update, predict, pretrain, train_supervised, Example, Model, ModelConfig, TaskSnapshot,
};
use serde::{Deserialize, Serialize};

use crate::checks;
use crate::config::RunConfig;
use crate::rundir::{read_json, write_json, DatasetIndex, RunDir, INDEX, LATEST, SCENARIOS, THETA0};

/// Stored next to a task's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMeta {
    pub task_id: String,
    pub parent: Option<String>,
    pub appliances: Vec<String>,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VaeMeta {
    cfg: VaeConfig,
    num_appliances: usize,
    scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum MaskSource {
    /// model predictions when a trained model exists, otherwise labels
    Auto,
    Labels,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
}

fn check_task_name(task: &str) -> Result<()> {
    if task.is_empty() || !task.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        bail!("task name `{task}` must be non-empty and use only letters, digits, `-` and `_`");
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T], last: Option<serde_json::Value>) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    if let Some(v) = last {
        text.push_str(&serde_json::to_string(&v)?);
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

struct Ctx {
    rd: RunDir,
    cfg: RunConfig,
    index: DatasetIndex,
}

impl Ctx {
    fn open(run: &Path) -> Result<Self> {
        let rd = RunDir::new(run);
        let index = rd.index()?;
        let cfg = rd.config()?;
        Ok(Self { rd, cfg, index })
    }

    fn pre(&self) -> PreprocessConfig {
        self.cfg.preprocess(self.index.fs)
    }

    fn k(&self) -> usize {
        self.index.appliances.len()
    }

    fn samples(&self, name: &str) -> Result<Vec<CycleSample>> {
        let rec = self.rd.recording(&self.index, name)?;
        cycles_from_recording(&rec, &self.pre()).with_context(|| format!("preprocessing dataset/{name}.csv"))
    }

    fn examples(&self, names: &[String]) -> Result<Vec<Example>> {
        let mut out = Vec::new();
        for n in names {
            let s = self.samples(n)?;
            let ex = Example::from_samples(&s);
            if ex.is_empty() {
                bail!("dataset/{n}.csv has no labeled cycles");
            }
            if let Some(e) = ex.iter().find(|e| e.label.len() != self.k()) {
                bail!(
                    "dataset/{n}.csv carries {} label columns but the index lists {} appliances",
                    e.label.len(),
                    self.k()
                );
            }
            out.extend(ex);
        }
        if out.is_empty() {
            bail!("the dataset lists no recordings for this step");
        }
        Ok(out)
    }

    fn load_task(&self, task: Option<&str>) -> Result<(Model, TaskSnapshot, TaskMeta)> {
        let task = match task {
            Some(t) => t.to_string(),
            None => self.rd.latest_task()?,
        };
        check_task_name(&task)?;
        let meta: TaskMeta = read_json(&self.rd.path(&self.rd.task_file(&task, "model.json")))?;
        let theta = ParamStore::load(&self.rd.path(&self.rd.task_file(&task, "theta_star.bin")))?;
        let fisher = ParamStore::load(&self.rd.path(&self.rd.task_file(&task, "fisher.bin")))?;
        let model = Model::from_params(meta.model.clone(), theta.clone())?;
        let snap = TaskSnapshot {
            task_id: task,
            theta_star: theta,
            fisher,
        };
        snap.validate()?;
        Ok((model, snap, meta))
    }

    fn save_task(&self, snap: &TaskSnapshot, meta: &TaskMeta) -> Result<()> {
        let task = &snap.task_id;
        let dir = self.rd.path(&format!("checkpoints/{task}"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        snap.theta_star.save(&dir.join("theta_star.bin"))?;
        snap.fisher.save(&dir.join("fisher.bin"))?;
        write_json(&dir.join("model.json"), meta)?;
        std::fs::write(self.rd.path(LATEST), format!("{task}\n"))?;
        Ok(())
    }

    fn finish(&self, command: &str) -> Result<()> {
        self.rd.update_manifest(&self.cfg, command)
    }
}

/// Predictions thresholded and cut to the label width, then scored.
pub fn score(model: &Model, examples: &[Example], threshold: f64) -> Result<(MetricReport, Vec<Vec<u8>>)> {
    let k = examples
        .first()
        .map(|e| e.label.len())
        .ok_or_else(|| anyhow!("no labeled cycles to score"))?;
    if k > model.num_classes() {
        bail!("labels have {k} classes but the model only {}", model.num_classes());
    }
    let mut preds = Vec::with_capacity(examples.len());
    for e in examples {
        let mut p = predict(model, &e.cycle, threshold)?.on_off;
        p.truncate(k);
        preds.push(p);
    }
    let truth: Vec<Vec<u8>> = examples.iter().map(|e| e.label.clone()).collect();
    Ok((multilabel_metrics(&truth, &preds)?, preds))
}

fn load_config(config: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fresh_run(out: &Path) -> Result<RunDir> {
    let rd = RunDir::new(out);
    if rd.path(INDEX).exists() {
        bail!("{} already holds a dataset", rd.path(INDEX).display());
    }
    rd.create()?;
    Ok(rd)
}

pub fn simulate(out: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    if cfg.profiles.is_empty() {
        bail!("config lists no appliance profiles");
    }
    let rd = fresh_run(out)?;
    write_json(&rd.path(crate::rundir::CONFIG), &cfg)?;
    let d = &cfg.dataset;
    let (train, test) = classification_windows(d, &cfg.profiles, cfg.stage_seed("dataset"))?;
    let solo = solo_recordings(d, &cfg.profiles, cfg.stage_seed("solo"));
    let mixes = mix_recordings(d, &cfg.profiles, cfg.stage_seed("mix"));
    let (mix_train, mix_test) = if mixes.len() >= 2 {
        split_dataset(mixes, 0.5, cfg.stage_seed("mix.split"))?
    } else {
        (Vec::new(), mixes)
    };
    let mut scenarios = BTreeMap::new();
    let mut write_group = |prefix: &str, group: Vec<Scenario>| -> Result<Vec<String>> {
        let mut names = Vec::new();
        for (i, sc) in group.into_iter().enumerate() {
            let name = format!("{prefix}_{i:03}");
            synth_recording(&sc)?.write_csv(&rd.path(&format!("dataset/{name}.csv")))?;
            scenarios.insert(name.clone(), sc);
            names.push(name);
        }
        Ok(names)
    };
    let index = DatasetIndex {
        fs: d.fs,
        appliances: cfg.profiles.iter().map(|p| p.id.clone()).collect(),
        train: write_group("train", train)?,
        test: write_group("test", test)?,
        solo: write_group("solo", solo)?,
        mix_train: write_group("mixtrain", mix_train)?,
        mix_test: write_group("mixtest", mix_test)?,
    };
    write_json(&rd.path(SCENARIOS), &scenarios)?;
    write_json(&rd.path(INDEX), &index)?;
    println!(
        "simulate: {} appliances, {} train / {} test windows, {} solo, {}+{} mixes",
        index.appliances.len(),
        index.train.len(),
        index.test.len(),
        index.solo.len(),
        index.mix_train.len(),
        index.mix_test.len()
    );
    rd.update_manifest(&cfg, "simulate")
}

pub struct IngestArgs {
    pub out: PathBuf,
    pub fs: f64,
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub solo: Vec<PathBuf>,
    pub mix: Vec<PathBuf>,
    pub appliances: Option<Vec<String>>,
    pub config: Option<PathBuf>,
}

pub fn ingest(a: &IngestArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), None)?;
    cfg.dataset.fs = a.fs;
    cfg.validate()?;
    let load = |p: &PathBuf| -> Result<RawRecording> { Ok(ingest_csv(p, a.fs)?) };
    let first = load(a.train.first().ok_or_else(|| anyhow!("ingest needs at least one --train file"))?)?;
    let k = first
        .num_appliances()
        .ok_or_else(|| anyhow!("{} has no label columns", a.train[0].display()))?;
    let appliances = match &a.appliances {
        Some(names) if names.len() == k => names.clone(),
        Some(names) => bail!("--appliances lists {} names for {k} label columns", names.len()),
        None if cfg.profiles.len() == k => cfg.profiles.iter().map(|p| p.id.clone()).collect(),
        None => (0..k).map(|i| format!("appliance_{i}")).collect(),
    };
    let rd = fresh_run(&a.out)?;
    write_json(&rd.path(crate::rundir::CONFIG), &cfg)?;
    let copy = |prefix: &str, files: &[PathBuf]| -> Result<Vec<String>> {
        let mut names = Vec::new();
        for (i, f) in files.iter().enumerate() {
            let rec = load(f)?;
            if let Some(kk) = rec.num_appliances() {
                if kk != k {
                    bail!("{} has {kk} label columns, expected {k}", f.display());
                }
            }
            let name = format!("{prefix}_{i:03}");
            rec.write_csv(&rd.path(&format!("dataset/{name}.csv")))?;
            names.push(name);
        }
        Ok(names)
    };
    let index = DatasetIndex {
        fs: a.fs,
        appliances,
        train: copy("train", &a.train)?,
        test: copy("test", &a.test)?,
        solo: copy("solo", &a.solo)?,
        mix_train: Vec::new(),
        mix_test: copy("mixtest", &a.mix)?,
    };
    write_json(&rd.path(INDEX), &index)?;
    println!("ingest: {} train / {} test recordings, {k} appliances", index.train.len(), index.test.len());
    rd.update_manifest(&cfg, "ingest")
}

pub fn run_pretrain(run: &Path) -> Result<()> {
    let ctx = Ctx::open(run)?;
    let mut cycles = Vec::new();
    for n in &ctx.index.train {
        cycles.extend(ctx.samples(n)?.into_iter().map(|s| s.cycle));
    }
    if cycles.is_empty() {
        bail!("no training cycles in the dataset");
    }
    let tc = ctx.cfg.train_config();
    let mut model = Model::new(ctx.cfg.model_config(ctx.k()), tc.seed)?;
    let (theta0, log) = pretrain(&mut model, &cycles, &tc)?;
    theta0.save(&ctx.rd.path(THETA0))?;
    write_jsonl(&ctx.rd.path("reports/pretrain_log.jsonl"), &log, None)?;
    match log.last() {
        Some(r) => println!("pretrain: {} cycles, {} epochs, final loss {:.6}", cycles.len(), log.len(), r.loss),
        None => println!("pretrain: 0 epochs, initial weights stored"),
    }
    ctx.finish("pretrain")
}

pub fn run_train(run: &Path, task: &str) -> Result<()> {
    check_task_name(task)?;
    let ctx = Ctx::open(run)?;
    let train = ctx.examples(&ctx.index.train)?;
    let test = ctx.examples(&ctx.index.test)?;
    let tc = ctx.cfg.train_config();
    let theta0_path = ctx.rd.path(THETA0);
    let theta0 = if theta0_path.is_file() {
        Some(ParamStore::load(&theta0_path)?)
    } else {
        None
    };
    let mut model = Model::new(ctx.cfg.model_config(ctx.k()), tc.seed)?;
    let (snap, log) = train_supervised(&mut model, &train, &tc, theta0.as_ref(), task)?;
    let (report, _) = score(&model, &test, ctx.cfg.train.threshold)?;
    let meta = TaskMeta {
        task_id: task.to_string(),
        parent: None,
        appliances: ctx.index.appliances.clone(),
        model: model.config().clone(),
    };
    ctx.save_task(&snap, &meta)?;
    let last = serde_json::json!({
        "final": true,
        "task": task,
        "pretrained": theta0.is_some(),
        "test_macro_f1": report.f1_macro,
    });
    write_jsonl(&ctx.rd.path("reports/train_log.jsonl"), &log, Some(last))?;
    println!(
        "train: {} cycles, {} epochs{}, test macro-F1 {:.4}",
        train.len(),
        log.len(),
        if theta0.is_some() { " from pretrained front end" } else { "" },
        report.f1_macro
    );
    ctx.finish(&format!("train --task {task}"))
}

pub fn run_eval(run: &Path, task: Option<&str>, with_baseline: bool) -> Result<()> {
    let ctx = Ctx::open(run)?;
    let test = ctx.examples(&ctx.index.test)?;
    let (model, snap, _) = ctx.load_task(task)?;
    let (report, _) = score(&model, &test, ctx.cfg.train.threshold)?;
    let mut rows = vec![ReportRow {
        method: "Proposed".to_string(),
        metrics: report,
    }];
    if with_baseline {
        let train = ctx.examples(&ctx.index.train)?;
        let mut tc = ctx.cfg.train_config();
        tc.seed = ctx.cfg.stage_seed("baseline");
        let (b, _) = baseline_rawseq(&train, &test, &ctx.cfg.baseline, &tc)?;
        rows.push(ReportRow {
            method: "RawSeq-CNN".to_string(),
            metrics: b,
        });
    }
    write_report_csv(&rows, &ctx.rd.path("reports/metrics.csv"))?;
    write_report_json(&rows, &ctx.rd.path("reports/metrics.json"))?;
    print!("eval ({}):\n{}", snap.task_id, render_table(&rows));
    ctx.finish(&format!("eval --task {}", snap.task_id))
}

pub fn run_learn_new(run: &Path, data: &Path, task: Option<&str>, lambda: Option<f64>) -> Result<()> {
    let ctx = Ctx::open(run)?;
    let (mut model, snap, meta) = ctx.load_task(None)?;
    let task = match task {
        Some(t) => t.to_string(),
        None => format!("{}-next", snap.task_id),
    };
    check_task_name(&task)?;
    if task == snap.task_id {
        bail!("task `{task}` would overwrite its own anchor");
    }
    let other = Ctx {
        rd: RunDir::new(data),
        index: RunDir::new(data).index()?,
        cfg: ctx.cfg.clone(),
    };
    if !other.index.appliances.starts_with(&meta.appliances) {
        bail!(
            "{} lists appliances {:?}, which do not extend the model's {:?}",
            other.rd.path(INDEX).display(),
            other.index.appliances,
            meta.appliances
        );
    }
    let new_train = other.examples(&other.index.train)?;
    let new_test = other.examples(&other.index.test)?;
    let old_test = ctx.examples(&ctx.index.test)?;
    let th = ctx.cfg.train.threshold;
    let (old_before, _) = score(&model, &old_test, th)?;

    let mut tc = ctx.cfg.train_config();
    tc.seed = ctx.cfg.stage_seed(&format!("learn-new.{task}"));
    if let Some(l) = lambda {
        tc.lambda_ewc = l;
    }
    let (new_snap, log) = continual_update(&mut model, &snap, &new_train, &tc, &task)?;
    let (old_after, _) = score(&model, &old_test, th)?;
    let (new_report, _) = score(&model, &new_test, th)?;
    let new_meta = TaskMeta {
        task_id: task.clone(),
        parent: Some(snap.task_id.clone()),
        appliances: other.index.appliances.clone(),
        model: model.config().clone(),
    };
    ctx.save_task(&new_snap, &new_meta)?;
    let summary = serde_json::json!({
        "task": task,
        "parent": snap.task_id,
        "lambda_ewc": tc.lambda_ewc,
        "appliances": other.index.appliances,
        "old_macro_f1_before": old_before.f1_macro,
        "old_macro_f1_after": old_after.f1_macro,
        "old_macro_f1_drop": old_before.f1_macro - old_after.f1_macro,
        "new_test": new_report,
        "log": log,
    });
    write_json(&ctx.rd.path(&format!("reports/learn_new_{task}.json")), &summary)?;
    println!(
        "learn-new {task}: old macro-F1 {:.4} -> {:.4}, new-data macro-F1 {:.4} (lambda {})",
        old_before.f1_macro, old_after.f1_macro, new_report.f1_macro, tc.lambda_ewc
    );
    ctx.finish(&format!("learn-new --task {task}"))
}

fn majority(rows: &[&[u8]], k: usize) -> Vec<u8> {
    (0..k)
        .map(|j| u8::from(2 * rows.iter().filter(|r| r[j] == 1).count() > rows.len()))
        .collect()
}

fn solo_windows(ctx: &Ctx, m: usize) -> Result<Vec<SoloWindow>> {
    let mut out = Vec::new();
    for n in &ctx.index.solo {
        let s = ctx.samples(n)?;
        let labels: Vec<&[u8]> = s
            .iter()
            .map(|c| c.label.as_deref().ok_or_else(|| anyhow!("dataset/{n}.csv has no labels")))
            .collect::<Result<_>>()?;
        let on = majority(&labels, ctx.k());
        let active: Vec<usize> = (0..on.len()).filter(|&j| on[j] == 1).collect();
        let [appliance] = active[..] else {
            bail!("dataset/{n}.csv must have exactly one running appliance, found {active:?}");
        };
        let p: Vec<f64> = s.iter().map(|c| c.power.max(0.0)).collect();
        out.extend(p.chunks_exact(m).map(|w| SoloWindow {
            appliance,
            power: w.to_vec(),
        }));
    }
    Ok(out)
}

fn label_windows(ctx: &Ctx, name: &str, m: usize) -> Result<Vec<(Vec<CycleSample>, Vec<u8>)>> {
    let s = ctx.samples(name)?;
    let mut out = Vec::new();
    for chunk in s.chunks_exact(m) {
        let labels: Vec<&[u8]> = chunk
            .iter()
            .map(|c| c.label.as_deref().ok_or_else(|| anyhow!("dataset/{name}.csv has no labels")))
            .collect::<Result<_>>()?;
        out.push((chunk.to_vec(), majority(&labels, ctx.k())));
    }
    Ok(out)
}

pub fn run_decompose(run: &Path, masks: MaskSource) -> Result<()> {
    let ctx = Ctx::open(run)?;
    let vcfg = ctx.cfg.vae_config();
    let m = vcfg.window;
    let k = ctx.k();
    if ctx.index.mix_test.is_empty() {
        bail!("{} lists no held-out mix recordings", ctx.rd.path(INDEX).display());
    }
    let solo = solo_windows(&ctx, m)?;
    let mut mixes = Vec::new();
    for n in &ctx.index.mix_train {
        for (chunk, on) in label_windows(&ctx, n, m)? {
            let p: Vec<f64> = chunk.iter().map(|c| c.power).collect();
            mixes.push(PowerWindow::from_measured(&p, on)?);
        }
    }
    let (vae, loss) = vae_train(&solo, &mixes, k, &vcfg)?;
    vae.store.save(&ctx.rd.path("checkpoints/vae.bin"))?;
    write_json(
        &ctx.rd.path("checkpoints/vae.json"),
        &VaeMeta {
            cfg: vae.cfg.clone(),
            num_appliances: vae.num_appliances,
            scale: vae.scale,
        },
    )?;
    reload_check(&ctx, &vae)?;

    let model = match masks {
        MaskSource::Labels => None,
        MaskSource::Model => Some(ctx.load_task(None)?.0),
        MaskSource::Auto if ctx.rd.path(LATEST).is_file() => Some(ctx.load_task(None)?.0),
        MaskSource::Auto => None,
    };
    let scenarios = ctx.rd.scenarios()?;
    let th = ctx.cfg.train.threshold;

    let mut csv = String::from("recording,window,cycle,appliance,mask,estimated_w,true_w\n");
    let mut energy_csv = String::from("recording,appliance,estimated_wh,true_wh\n");
    // per appliance: sum |err|, sum truth, count, over windows where it truly ran
    let mut acc = vec![(0.0, 0.0, 0usize); k];
    let mut mask_errors = 0usize;
    let mut windows = 0usize;
    for name in &ctx.index.mix_test {
        let truth_samples = match scenarios.as_ref().and_then(|s| s.get(name)) {
            Some(sc) => Some(cycles_from_recording(&synth_recording(sc)?, &ctx.pre())?),
            None => None,
        };
        let mut est_series = vec![Vec::new(); k];
        let mut true_series = vec![Vec::new(); k];
        for (w, (chunk, on_true)) in label_windows(&ctx, name, m)?.into_iter().enumerate() {
            let on = match &model {
                Some(model) => {
                    let preds: Vec<Vec<u8>> = chunk
                        .iter()
                        .map(|c| predict(model, &c.cycle, th).map(|p| p.on_off[..k].to_vec()))
                        .collect::<nilm_core::Result<_>>()?;
                    let refs: Vec<&[u8]> = preds.iter().map(Vec::as_slice).collect();
                    majority(&refs, k)
                }
                None => on_true.clone(),
            };
            mask_errors += usize::from(on != on_true);
            windows += 1;
            let p: Vec<f64> = chunk.iter().map(|c| c.power).collect();
            let parts = decompose(&vae, &PowerWindow::from_measured(&p, on.clone())?)?;
            for (c, sample) in chunk.iter().enumerate() {
                let truth = truth_samples
                    .as_ref()
                    .and_then(|t| t.iter().find(|s| s.start == sample.start))
                    .and_then(|s| s.appliance_power.clone());
                for a in 0..k {
                    let est = parts[a][c];
                    est_series[a].push(est);
                    let tv = truth.as_ref().map(|t| t[a]);
                    let _ = writeln!(
                        csv,
                        "{name},{w},{c},{},{},{est},{}",
                        ctx.index.appliances[a],
                        on[a],
                        tv.map(|v| v.to_string()).unwrap_or_default()
                    );
                    if let Some(tv) = tv {
                        true_series[a].push(tv.max(0.0));
                        if on_true[a] == 1 {
                            acc[a].0 += (est - tv).abs();
                            acc[a].1 += tv;
                            acc[a].2 += 1;
                        }
                    }
                }
            }
        }
        let dt = 1.0 / GRID_HZ;
        for a in 0..k {
            let e = energy(&est_series[a], dt)?;
            let t = if true_series[a].len() == est_series[a].len() {
                energy(&true_series[a], dt)?.watt_hours.to_string()
            } else {
                String::new()
            };
            let _ = writeln!(energy_csv, "{name},{},{},{t}", ctx.index.appliances[a], e.watt_hours);
        }
    }
    std::fs::write(ctx.rd.path("reports/decomposition.csv"), csv)?;
    std::fs::write(ctx.rd.path("reports/energy.csv"), energy_csv)?;
    let per_appliance: Vec<serde_json::Value> = (0..k)
        .filter(|&a| acc[a].2 > 0)
        .map(|a| {
            let (err, tot, n) = acc[a];
            let mae = err / n as f64;
            let mean_on = tot / n as f64;
            serde_json::json!({
                "appliance": ctx.index.appliances[a],
                "cycles_on": n,
                "mae_w": mae,
                "mean_on_power_w": mean_on,
                "relative_mae": mae / mean_on,
            })
        })
        .collect();
    let summary = serde_json::json!({
        "masks": if model.is_some() { "model" } else { "labels" },
        "windows": windows,
        "mask_errors": mask_errors,
        "vae_final_loss": loss.last(),
        "per_appliance": per_appliance,
    });
    write_json(&ctx.rd.path("reports/decomposition.json"), &summary)?;
    println!(
        "decompose: {windows} windows ({} masks, {mask_errors} wrong), {} appliances scored",
        if model.is_some() { "model" } else { "label" },
        per_appliance.len()
    );
    for v in &per_appliance {
        println!(
            "  {:<16} MAE {:>8.2} W  ({:.2}% of mean on-power)",
            v["appliance"].as_str().unwrap_or("?"),
            v["mae_w"].as_f64().unwrap_or(f64::NAN),
            100.0 * v["relative_mae"].as_f64().unwrap_or(f64::NAN)
        );
    }
    ctx.finish("decompose")
}

/// The stored decomposition model must load back to the same parameters.
fn reload_check(ctx: &Ctx, vae: &VaeParams) -> Result<()> {
    let store = ParamStore::load(&ctx.rd.path("checkpoints/vae.bin"))?;
    let meta: VaeMeta = read_json(&ctx.rd.path("checkpoints/vae.json"))?;
    if store != vae.store || meta.scale != vae.scale {
        bail!("decomposition checkpoint did not round-trip");
    }
    Ok(())
}

pub fn run_render_signature(run: &Path, count: usize, split: Split) -> Result<()> {
    let ctx = Ctx::open(run)?;
    let names = match split {
        Split::Train => &ctx.index.train,
        Split::Test => &ctx.index.test,
    };
    let model = if ctx.rd.path(LATEST).is_file() {
        ctx.load_task(None)?.0
    } else {
        let tc = ctx.cfg.train_config();
        let mut m = Model::new(ctx.cfg.model_config(ctx.k()), tc.seed)?;
        let t0 = ctx.rd.path(THETA0);
        if t0.is_file() {
            m.params.overwrite_from(&ParamStore::load(&t0)?)?;
        }
        m
    };
    let channel_names: &[&str] = match model.config().signature.channels {
        SignatureChannels::All => &["lrg", "lgm", "gg"],
        SignatureChannels::GgOnly => &["gg"],
    };
    let tag = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut written = 0;
    'outer: for n in names {
        for s in ctx.samples(n)? {
            if written == count {
                break 'outer;
            }
            let mut g = Graph::new(&model.params);
            let img = model.net().signature(&mut g, &s.cycle)?;
            let side = model.config().signature.s;
            for (c, ch) in g.value(img).data().chunks(side * side).enumerate() {
                let path = ctx.rd.path(&format!("signatures/{tag}_{written:03}_{}.pgm", channel_names[c]));
                render_pgm(ch, side, side, &path)?;
            }
            written += 1;
        }
    }
    println!("render-signature: {written} cycles, {} channel(s) each", channel_names.len());
    ctx.finish(&format!("render-signature --count {count}"))
}

/// Returns whether every check passed.
pub fn selftest() -> bool {
    let results = checks::all();
    for c in &results {
        println!("{}", c.line());
    }
    results.iter().all(|c| c.passed)
}
