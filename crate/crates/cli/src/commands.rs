use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use attnpyr_core::eval::{distance_matrix, evaluate, EvalReport, Labels};
use attnpyr_core::gradcheck::{registry, run_suite, SuiteReport};
use attnpyr_core::model::data::load_dataset;
use attnpyr_core::model::{
    count_flops, restore_checkpoint, save_checkpoint, synth_generate, train, Dataset, FlopReport, Split, StepLog,
    ToyBackbone,
};
use attnpyr_core::pyramid::{AttentionKind, PyramidConfig};
use attnpyr_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{sampler_seed, Mode, QuerySplit, RunConfig};
use crate::error::{CliError, CliResult};

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Synthesize the dataset, or load it from `data.dir`.
pub fn load_data(cfg: &RunConfig) -> CliResult<Dataset> {
    match &cfg.data_dir {
        Some(dir) => load_dataset(dir).map_err(|e| CliError::Config {
            key: "data.dir".into(),
            message: format!("{}: {e}", dir.display()),
        }),
        None => synth_generate(&cfg.data, cfg.data_seed).map_err(|e| CliError::Config {
            key: "data".into(),
            message: e.to_string(),
        }),
    }
}

fn classes_of(data: &Dataset) -> usize {
    attnpyr_core::model::class_labels(&data.train.ids).1
}

fn image_dims(data: &Dataset) -> (usize, usize) {
    let s = data.train.images.shape();
    (s[2], s[3])
}

/// Freshly initialized model for `cfg` on `data`.
pub fn build_model(cfg: &RunConfig, data: &Dataset) -> CliResult<ToyBackbone> {
    let (h, w) = image_dims(data);
    let mcfg = cfg.model_config(classes_of(data), h, w);
    Ok(ToyBackbone::new(mcfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?)
}

fn query_and_gallery<'a>(cfg: &RunConfig, data: &'a Dataset) -> (&'a Split, &'a Split) {
    match cfg.eval_query_split {
        QuerySplit::Query => (&data.query, &data.gallery),
        QuerySplit::Gallery => (&data.gallery, &data.gallery),
    }
}

/// Features of the query and gallery roles, in that order.
pub fn extract(cfg: &RunConfig, model: &ToyBackbone, data: &Dataset) -> CliResult<(Tensor, Tensor)> {
    let (q, g) = query_and_gallery(cfg, data);
    let qf = model.extract_features(&q.images, cfg.eval_flip_average, cfg.eval_batch)?;
    let gf = model.extract_features(&g.images, cfg.eval_flip_average, cfg.eval_batch)?;
    Ok((qf, gf))
}

pub fn evaluate_model(cfg: &RunConfig, model: &ToyBackbone, data: &Dataset) -> CliResult<EvalReport> {
    let (qf, gf) = extract(cfg, model, data)?;
    score(cfg, data, &qf, &gf)
}

fn score(cfg: &RunConfig, data: &Dataset, qf: &Tensor, gf: &Tensor) -> CliResult<EvalReport> {
    let (q, g) = query_and_gallery(cfg, data);
    let dist = distance_matrix(qf, gf, cfg.eval_metric)?;
    let labels = Labels {
        q_ids: &q.ids,
        g_ids: &g.ids,
        q_cams: &q.cams,
        g_cams: &g.cams,
    };
    Ok(evaluate(&dist, &labels, &cfg.protocol())?)
}

#[derive(Clone, Debug, Serialize)]
pub struct Seeds {
    pub seed: u64,
    pub data_seed: u64,
    pub sampler_seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StageInfo {
    pub stage: usize,
    pub dims: [usize; 3],
    pub levels: usize,
    /// Set when a spatial pyramid was cut back below `pyramid.levels`.
    pub capped_from: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: std::collections::BTreeMap<String, String>,
    pub seeds: Seeds,
    pub classes: usize,
    pub train_images: usize,
    pub query_images: usize,
    pub gallery_images: usize,
    pub parameters: usize,
    pub stages: Vec<StageInfo>,
}

pub fn manifest(command: &str, cfg: &RunConfig, data: &Dataset, model: &ToyBackbone) -> CliResult<Manifest> {
    let requested = model.cfg.pyramid.levels;
    let dims = model.cfg.stage_dims()?;
    let stages = model
        .stage_levels()
        .into_iter()
        .zip(dims)
        .enumerate()
        .map(|(stage, (levels, dims))| StageInfo {
            stage,
            dims,
            levels,
            capped_from: (levels < requested).then_some(requested),
        })
        .collect();
    Ok(Manifest {
        command: command.into(),
        config: cfg.resolved(),
        seeds: Seeds {
            seed: cfg.seed,
            data_seed: cfg.data_seed,
            sampler_seed: sampler_seed(cfg.seed),
        },
        classes: model.cfg.classes,
        train_images: data.train.len(),
        query_images: data.query.len(),
        gallery_images: data.gallery.len(),
        parameters: model.param_count(),
        stages,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub steps: usize,
    pub epoch_loss: Vec<f64>,
    pub snapshots: Vec<EpochEval>,
    pub report: EvalReport,
    pub run_dir: PathBuf,
}

/// Train on the configured data. `out` receives `config.txt`,
/// `manifest.json`, `loss_log.jsonl`, `eval_log.jsonl`, `model.ckpt` and
/// the final `eval.json`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let mut model = build_model(cfg, &data)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text(false))?;
    write_json(&out.join("manifest.json"), &manifest("train", cfg, &data, &model)?)?;

    let tcfg = cfg.train_config(model.cfg.classes);
    let mut loss_log = BufWriter::new(File::create(out.join("loss_log.jsonl"))?);
    let mut eval_log = BufWriter::new(File::create(out.join("eval_log.jsonl"))?);
    let mut snapshots = Vec::new();
    let every = cfg.eval_every;
    let summary = train(
        &mut model,
        &data.train,
        &tcfg,
        &mut |log: &StepLog| {
            let line = serde_json::to_string(log).map_err(|e| attnpyr_core::Error::Format(e.to_string()))?;
            writeln!(loss_log, "{line}")?;
            Ok(())
        },
        &mut |epoch, m| {
            if every > 0 && (epoch + 1) % every == 0 {
                let r = evaluate_model(cfg, m, &data).map_err(|e| attnpyr_core::Error::Invalid(e.to_string()))?;
                let snap = EpochEval {
                    epoch,
                    map: r.map,
                    rank1: r.rank1(),
                    rank5: r.rank(5),
                };
                let line = serde_json::to_string(&snap).map_err(|e| attnpyr_core::Error::Format(e.to_string()))?;
                writeln!(eval_log, "{line}")?;
                snapshots.push(snap);
            }
            Ok(())
        },
    )?;
    loss_log.flush()?;
    eval_log.flush()?;
    save_checkpoint(&model, &out.join("model.ckpt"))?;
    let report = evaluate_model(cfg, &model, &data)?;
    write_json(&out.join("eval.json"), &report)?;
    Ok(TrainOutcome {
        steps: summary.steps,
        epoch_loss: summary.epoch_loss,
        snapshots,
        report,
        run_dir: out.to_path_buf(),
    })
}

/// Evaluate a checkpoint. Writes `eval.json`, plus `query.tensor` and
/// `gallery.tensor` with `eval.dump_embeddings`, plus `attention/` with
/// `eval.dump_attention`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> CliResult<EvalReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let (h, w) = image_dims(&data);
    let mut model = ToyBackbone::zeros(cfg.model_config(classes_of(&data), h, w))?;
    restore_checkpoint(&mut model, checkpoint).map_err(|e| match e {
        attnpyr_core::Error::Checkpoint(m) => CliError::Checkpoint(m),
        attnpyr_core::Error::Io(io) => CliError::Checkpoint(format!("{}: {io}", checkpoint.display())),
        other => CliError::Checkpoint(other.to_string()),
    })?;
    fs::create_dir_all(out)?;
    let (qf, gf) = extract(cfg, &model, &data)?;
    let report = score(cfg, &data, &qf, &gf)?;
    write_json(&out.join("eval.json"), &report)?;
    if cfg.eval_dump_embeddings {
        qf.save(out.join("query.tensor"))?;
        gf.save(out.join("gallery.tensor"))?;
    }
    if cfg.eval_dump_attention > 0 {
        let (q, _) = query_and_gallery(cfg, &data);
        dump_attention(&model, q, cfg.eval_dump_attention, &out.join("attention"))?;
    }
    Ok(report)
}

/// Gates of the first `n` images of `split`, one tensor file and one PGM per
/// image, stage and level: `img{i}_stage{s}_level{l}.{tensor,pgm}`.
pub fn dump_attention(model: &ToyBackbone, split: &Split, n: usize, dir: &Path) -> CliResult<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut tape = Tape::new();
    for i in 0..n.min(split.len()) {
        tape.reset();
        let x = tape.constant(split.batch(&[i]));
        let bound = model.bind_frozen(&mut tape);
        let mut gates = Vec::new();
        model.forward_eval(&mut tape, x, &bound, Some(&mut gates))?;
        for (s, stage) in gates.iter().enumerate() {
            for (l, &g) in stage.iter().enumerate() {
                let t = tape.value(g);
                let stem = dir.join(format!("img{i:03}_stage{s}_level{}", l + 1));
                let tp = stem.with_extension("tensor");
                t.save(&tp)?;
                let pp = stem.with_extension("pgm");
                write_pgm(&pp, t)?;
                written.extend([tp, pp]);
            }
        }
    }
    Ok(written)
}

/// 8-bit greyscale image of a gate in `[0, 1]`. Channel gates become a
/// single row, spatial gates an `H x W` map.
fn write_pgm(path: &Path, gate: &Tensor) -> CliResult<()> {
    let dims: Vec<usize> = gate.shape()[1..].iter().copied().filter(|&d| d > 1).collect();
    let (rows, cols) = match dims[..] {
        [] => (1, 1),
        [n] => (1, n),
        [h, w] => (h, w),
        _ => (1, gate.numel()),
    };
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{cols} {rows}\n255\n")?;
    let bytes: Vec<u8> = gate
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct FlopsOutcome {
    pub kind: AttentionKind,
    pub radix: usize,
    pub levels: usize,
    pub stage_levels: Vec<usize>,
    pub report: FlopReport,
    /// Multiply-accumulates only.
    pub macs: u64,
    pub baseline_total: u64,
    pub baseline_macs: u64,
    /// `(total - baseline_total) / baseline_total`.
    pub overhead_vs_baseline: f64,
    pub macs_overhead_vs_baseline: f64,
}

fn macs_of(r: &FlopReport) -> u64 {
    r.layers.iter().map(|l| l.macs).sum()
}

/// Operation counts of the configured model next to its `L = 0` baseline.
/// Writes `flops.json`.
pub fn cmd_flops(cfg: &RunConfig, out: &Path) -> CliResult<FlopsOutcome> {
    cfg.validate()?;
    let (h, w, k) = (cfg.data.height, cfg.data.width, cfg.data.train_identities.max(2));
    let mcfg = cfg.model_config(k, h, w);
    let model = ToyBackbone::zeros(mcfg.clone())?;
    let mut base_cfg = mcfg;
    base_cfg.pyramid = PyramidConfig::new(cfg.pyramid_kind, cfg.pyramid().radix, 0);
    let base = count_flops(&ToyBackbone::zeros(base_cfg)?);
    let report = count_flops(&model);
    let (macs, base_macs) = (macs_of(&report), macs_of(&base));
    let outcome = FlopsOutcome {
        kind: cfg.pyramid_kind,
        radix: model.cfg.pyramid.radix,
        levels: model.cfg.pyramid.levels,
        stage_levels: model.stage_levels(),
        overhead_vs_baseline: (report.total - base.total) as f64 / base.total as f64,
        macs_overhead_vs_baseline: (macs - base_macs) as f64 / base_macs as f64,
        report,
        macs,
        baseline_total: base.total,
        baseline_macs: base_macs,
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("flops.json"), &outcome)?;
    Ok(outcome)
}

/// Finite-difference check of every registered op at `seed, seed+1, seed+2`.
/// Writes `gradcheck.json`; fails naming the ops over tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path, corrupt: Option<&str>) -> CliResult<SuiteReport> {
    let cases = registry();
    if let Some(op) = corrupt {
        if !cases.iter().any(|c| c.name == op) {
            return Err(CliError::Config {
                key: "--corrupt".into(),
                message: format!("no registered op named {op:?}"),
            });
        }
    }
    let seeds = [cfg.seed, cfg.seed + 1, cfg.seed + 2];
    let report = run_suite(&cases, &seeds, corrupt)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("gradcheck.json"), &report)?;
    if !report.passed {
        return Err(CliError::Failed(format!(
            "gradient check failed for: {}",
            report.failures().join(", ")
        )));
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthOutcome {
    pub identities: usize,
    pub train: usize,
    pub query: usize,
    pub gallery: usize,
    pub dir: PathBuf,
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<SynthOutcome> {
    cfg.validate()?;
    let data = synth_generate(&cfg.data, cfg.data_seed).map_err(|e| CliError::Config {
        key: "data".into(),
        message: e.to_string(),
    })?;
    attnpyr_core::model::data::save_dataset(&data, out)?;
    Ok(SynthOutcome {
        identities: data.identities.len(),
        train: data.train.len(),
        query: data.query.len(),
        gallery: data.gallery.len(),
        dir: out.to_path_buf(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub kind: AttentionKind,
    pub levels: usize,
    pub radix: usize,
    pub mode: Mode,
    pub status: String,
    pub reason: Option<String>,
    pub map: Option<f64>,
    pub r1: Option<f64>,
    pub r5: Option<f64>,
    pub macs: Option<u64>,
    pub ops: Option<u64>,
    pub wallclock_s: Option<f64>,
    pub stage_levels: Option<Vec<usize>>,
}

struct CellResult {
    report: EvalReport,
    macs: u64,
    ops: u64,
    wallclock_s: f64,
    stage_levels: Vec<usize>,
}

fn run_cell(cfg: &RunConfig, data: &Dataset) -> CliResult<CellResult> {
    let start = Instant::now();
    let mut model = build_model(cfg, data)?;
    let flops = count_flops(&model);
    let tcfg = cfg.train_config(model.cfg.classes);
    train(&mut model, &data.train, &tcfg, &mut |_| Ok(()), &mut |_, _| Ok(()))?;
    let report = evaluate_model(cfg, &model, data)?;
    Ok(CellResult {
        report,
        macs: macs_of(&flops),
        ops: flops.total,
        wallclock_s: start.elapsed().as_secs_f64(),
        stage_levels: model.stage_levels(),
    })
}

/// Sweep levels x radix x mode. Cells with identical effective pyramids
/// (every `L = 0` cell; `radix = 1` and stacked) are trained once and share
/// results. Writes `ablation.json` and `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> CliResult<Vec<AblationRow>> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let mut cells: Vec<(usize, usize, Mode)> = Vec::new();
    for &levels in &cfg.ablate_levels {
        for &mode in &cfg.ablate_modes {
            match mode {
                Mode::Split => cells.extend(cfg.ablate_radix.iter().map(|&r| (levels, r, mode))),
                Mode::Stacked => cells.push((levels, 1, mode)),
            }
        }
    }
    let cell_cfg = |levels: usize, radix: usize, mode: Mode| {
        let mut c = cfg.clone();
        c.pyramid_levels = levels;
        c.pyramid_radix = radix;
        c.pyramid_mode = mode;
        c
    };
    let effective = |levels: usize, radix: usize| if levels == 0 { (0, 0) } else { (levels, radix) };
    let mut distinct: Vec<(usize, usize, Mode)> = Vec::new();
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    for &(l, r, m) in &cells {
        index.entry(effective(l, r)).or_insert_with(|| {
            distinct.push((l, r, m));
            distinct.len() - 1
        });
    }

    let results: Mutex<Vec<Option<CliResult<CellResult>>>> = Mutex::new((0..distinct.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = cfg.ablate_workers.min(distinct.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(l, r, m)) = distinct.get(i) else { break };
                let res = run_cell(&cell_cfg(l, r, m), &data);
                results.lock().unwrap()[i] = Some(res);
            });
        }
    });
    let results = results.into_inner().unwrap();

    let rows: Vec<AblationRow> = cells
        .iter()
        .map(|&(levels, radix, mode)| {
            let mut row = AblationRow {
                config: format!("L{levels}-r{radix}-{}", mode.name()),
                kind: cfg.pyramid_kind,
                levels,
                radix,
                mode,
                status: "ok".into(),
                reason: None,
                map: None,
                r1: None,
                r5: None,
                macs: None,
                ops: None,
                wallclock_s: None,
                stage_levels: None,
            };
            match results[index[&effective(levels, radix)]].as_ref().expect("every cell ran") {
                Ok(c) => {
                    row.map = Some(c.report.map);
                    row.r1 = Some(c.report.rank1());
                    row.r5 = Some(c.report.rank(5));
                    row.macs = Some(c.macs);
                    row.ops = Some(c.ops);
                    row.wallclock_s = Some(c.wallclock_s);
                    row.stage_levels = Some(c.stage_levels.clone());
                }
                Err(e) => {
                    row.status = "skipped".into();
                    row.reason = Some(e.to_string());
                }
            }
            row
        })
        .collect();
    fs::create_dir_all(out)?;
    write_json(&out.join("ablation.json"), &rows)?;
    fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut out = String::from("config,kind,levels,radix,mode,status,reason,map,r1,r5,macs,ops,wallclock_s,stage_levels\n");
    for r in rows {
        let fields = [
            r.config.clone(),
            r.kind.name().to_string(),
            r.levels.to_string(),
            r.radix.to_string(),
            r.mode.name().to_string(),
            r.status.clone(),
            opt(r.reason.clone()),
            opt(r.map.map(|v| format!("{v:.6}"))),
            opt(r.r1.map(|v| format!("{v:.6}"))),
            opt(r.r5.map(|v| format!("{v:.6}"))),
            opt(r.macs.map(|v| v.to_string())),
            opt(r.ops.map(|v| v.to_string())),
            opt(r.wallclock_s.map(|v| format!("{v:.3}"))),
            opt(r.stage_levels.as_ref().map(|v| {
                v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
            })),
        ];
        let line: Vec<String> = fields.iter().map(|f| csv_field(f)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
