//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Criteria 5 and 6 train fifteen models on the default benchmark and take
//! most of the runtime. Set `ACCEPTANCE_ONLY=1,2,7` to run a subset.
//!
//! Criterion failures are reported, not fatal: the process exits nonzero
//! only when the harness itself breaks, or with `ACCEPTANCE_STRICT=1`.

use std::fs;
use std::path::Path;
use std::time::Instant;

use attnpyr_cli::commands::{cmd_eval, cmd_flops, cmd_train};
use attnpyr_cli::RunConfig;
use attnpyr_core::attention::{channel_attention, spatial_attention, AttentionVars};
use attnpyr_core::eval::{evaluate, Labels, Protocol};
use attnpyr_core::gradcheck::{registry, run_suite};
use attnpyr_core::losses::{ce_label_smoothed, cross_entropy};
use attnpyr_core::pyramid::{AttentionKind, Pyramid, PyramidConfig};
use attnpyr_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

const GRAD_SEEDS: [u64; 3] = [11, 12, 13];
const GRAD_BUDGET_S: f64 = 120.0;
const LSR_TOL: f64 = 1e-10;
const UNIFORM_CE_TOL: f64 = 1e-12;
const METRIC_TOL: f64 = 1e-12;
const METRIC_INSTANCES: usize = 1000;
const MAX_GALLERY: usize = 20;
const FLOPS_LEVELS: &str = "3";
const FLOPS_RADIX: &str = "2";
const FLOPS_MAX_OVERHEAD: f64 = 0.01;
const FIXTURE: &str = "tests/fixtures/benchmark.json";

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// 1

fn gradients() -> Check {
    let start = Instant::now();
    let cases = registry();
    let report = run_suite(&cases, &GRAD_SEEDS, None).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = report
        .cases
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map(|c| format!("{} {:.2e}", c.op, c.max_rel_error))
        .unwrap_or_default();
    ensure(
        report.cases.iter().any(|c| c.op == "model_loss"),
        "model loss is not in the suite",
    )?;
    ensure(report.passed, format!("failing ops: {:?}", report.failures()))?;
    ensure(secs < GRAD_BUDGET_S, format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} ops x {} seeds, worst {worst}, {secs:.1}s",
        report.cases.len(),
        GRAD_SEEDS.len()
    ))
}

// 2

fn split_round_trip() -> Result<(), String> {
    let mut r = rng(21);
    for _ in 0..20 {
        let shape = [
            r.gen_range(1..4),
            2 * r.gen_range(1..5),
            3 * r.gen_range(1..4),
            4 * r.gen_range(1..3),
        ];
        let x = Tensor::randn(&shape, 1.0, &mut r);
        for (axis, n) in [(1, 2), (2, 3), (3, 4), (3, 2)] {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let parts = tape.split(v, axis, n).map_err(err)?;
            let back = tape.concat(&parts, axis).map_err(err)?;
            ensure(tape.value(back) == &x, format!("split/concat {shape:?} axis {axis}"))?;
        }
    }
    Ok(())
}

fn gating_contracts() -> Result<(), String> {
    for seed in 0..10u64 {
        let mut r = rng(100 + seed);
        for kind in [AttentionKind::Channel, AttentionKind::Spatial] {
            let cfg = PyramidConfig::new(kind, 2, 2);
            let p = Pyramid::new(cfg, 8, 4, 4, &mut r).map_err(err)?;
            let x = Tensor::randn(&[2, 8, 4, 4], 1.0, &mut r);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let b = p.bind(&mut tape);
            let mut cur = xv;
            for lvl in &b.levels {
                let (out, _) = attnpyr_core::pyramid::apply_level(&mut tape, cur, lvl, &cfg).map_err(err)?;
                let (a, o) = (tape.value(cur), tape.value(out));
                for (&xi, &yi) in a.data().iter().zip(o.data()) {
                    if xi != 0.0 {
                        ensure(yi.abs() < xi.abs() && yi * xi > 0.0, format!("{kind:?} gate {xi} -> {yi}"))?;
                    }
                }
                cur = out;
            }
        }
    }
    Ok(())
}

fn radix_one_is_stacked() -> Result<(), String> {
    for (seed, kind) in [(31u64, AttentionKind::Channel), (32, AttentionKind::Spatial)] {
        let mut r = rng(seed);
        let levels = 3;
        let (c, h, w) = (8, 4, 4);
        let x = Tensor::randn(&[2, c, h, w], 1.0, &mut r);
        let p = Pyramid::new(PyramidConfig::new(kind, 1, levels), c, h, w, &mut r).map_err(err)?;
        let mut stacked = p.clone();
        stacked.cfg = PyramidConfig::stacked(kind, levels);

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let b = p.bind(&mut tape);
        let y = p.forward(&mut tape, xv, &b, None).map_err(err)?;
        let bs = stacked.bind(&mut tape);
        let ys = stacked.forward(&mut tape, xv, &bs, None).map_err(err)?;

        let mut cur = xv;
        for lvl in &b.levels {
            let g = match lvl[0] {
                AttentionVars::Channel(cv) => {
                    let g = channel_attention(&mut tape, cur, &cv).map_err(err)?;
                    tape.reshape(g, &[2, c, 1, 1]).map_err(err)?
                }
                AttentionVars::Spatial(sv) => {
                    let g = spatial_attention(&mut tape, cur, &sv).map_err(err)?;
                    tape.reshape(g, &[2, 1, h, w]).map_err(err)?
                }
            };
            let g = tape.broadcast_to(g, &[2, c, h, w]).map_err(err)?;
            cur = tape.mul(cur, g).map_err(err)?;
        }
        ensure(tape.value(y) == tape.value(cur), format!("{kind:?} radix 1 differs from sequential attention"))?;
        ensure(tape.value(y) == tape.value(ys), format!("{kind:?} radix 1 differs from stacked"))?;
    }
    Ok(())
}

fn zero_levels_identity() -> Result<(), String> {
    for kind in [AttentionKind::Channel, AttentionKind::Spatial] {
        let mut r = rng(41);
        let p = Pyramid::new(PyramidConfig::new(kind, 2, 0), 6, 4, 4, &mut r).map_err(err)?;
        let x = Tensor::randn(&[3, 6, 4, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let b = p.bind(&mut tape);
        let y = p.forward(&mut tape, xv, &b, None).map_err(err)?;
        ensure(tape.value(y) == &x, format!("{kind:?} L=0 is not the identity"))?;
    }
    Ok(())
}

/// Row-wise log-softmax, written out independently of the tape.
fn log_softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

fn label_smoothing_identity() -> Result<f64, String> {
    let mut worst = 0.0f64;
    let mut r = rng(51);
    for _ in 0..50 {
        let (n, k) = (r.gen_range(1..9), r.gen_range(2..12));
        let eps = r.gen_range(0.0..1.0);
        let logits = Tensor::randn(&[n, k], 4.0, &mut r);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let lsr = ce_label_smoothed(&mut tape, lv, &labels, eps).map_err(err)?;
        let ce = cross_entropy(&mut tape, lv, &labels).map_err(err)?;
        let ls = log_softmax_rows(logits.data(), k);
        let unif = -ls.iter().sum::<f64>() / (n * k) as f64;
        let lhs = tape.value(lsr).data()[0];
        let rhs = (1.0 - eps) * tape.value(ce).data()[0] + eps * unif;
        worst = worst.max((lhs - rhs).abs());
    }
    ensure(worst < LSR_TOL, format!("label smoothing identity off by {worst:.2e}"))?;
    Ok(worst)
}

fn uniform_ce() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for k in [2usize, 3, 10, 100, 751] {
        for level in [0.0, -3.5, 17.25] {
            let n = 4;
            let mut tape = Tape::new();
            let lv = tape.constant(Tensor::full(&[n, k], level));
            let labels: Vec<usize> = (0..n).map(|i| (i * 7) % k).collect();
            let ce = cross_entropy(&mut tape, lv, &labels).map_err(err)?;
            worst = worst.max((tape.value(ce).data()[0] - (k as f64).ln()).abs());
        }
    }
    ensure(worst < UNIFORM_CE_TOL, format!("uniform CE off by {worst:.2e}"))?;
    Ok(worst)
}

fn algebra() -> Check {
    split_round_trip()?;
    gating_contracts()?;
    radix_one_is_stacked()?;
    zero_levels_identity()?;
    let lsr = label_smoothing_identity()?;
    let ce = uniform_ce()?;
    Ok(format!("bit-exact identities hold; lsr err {lsr:.1e}, uniform CE err {ce:.1e}"))
}

// 3

struct Instance {
    dist: Vec<f64>,
    nq: usize,
    ng: usize,
    q_ids: Vec<usize>,
    g_ids: Vec<usize>,
    q_cams: Vec<usize>,
    g_cams: Vec<usize>,
    filter: bool,
}

/// Brute force: sort each query's surviving gallery by (distance, index),
/// then read AP and the first hit off the sorted list.
fn brute_force(inst: &Instance) -> Vec<Option<(f64, usize)>> {
    (0..inst.nq)
        .map(|i| {
            let mut keep: Vec<usize> = (0..inst.ng)
                .filter(|&j| !(inst.filter && inst.g_ids[j] == inst.q_ids[i] && inst.g_cams[j] == inst.q_cams[i]))
                .collect();
            keep.sort_by(|&a, &b| {
                let (da, db) = (inst.dist[i * inst.ng + a], inst.dist[i * inst.ng + b]);
                da.total_cmp(&db).then(a.cmp(&b))
            });
            let hits: Vec<usize> = keep
                .iter()
                .enumerate()
                .filter(|(_, &j)| inst.g_ids[j] == inst.q_ids[i])
                .map(|(pos, _)| pos)
                .collect();
            if hits.is_empty() {
                return None;
            }
            let ap = hits
                .iter()
                .enumerate()
                .map(|(m, &pos)| (m + 1) as f64 / (pos + 1) as f64)
                .sum::<f64>()
                / hits.len() as f64;
            Some((ap, hits[0]))
        })
        .collect()
}

fn random_instance(r: &mut ChaCha8Rng, tie_heavy: bool) -> Instance {
    let nq = r.gen_range(1..6);
    let ng = r.gen_range(1..=MAX_GALLERY);
    let ids = r.gen_range(1..5);
    let dist = (0..nq * ng)
        .map(|_| {
            if tie_heavy {
                r.gen_range(0..3) as f64 * 0.5
            } else {
                r.gen_range(0.0..2.0)
            }
        })
        .collect();
    Instance {
        dist,
        nq,
        ng,
        q_ids: (0..nq).map(|_| r.gen_range(0..ids)).collect(),
        g_ids: (0..ng).map(|_| r.gen_range(0..ids)).collect(),
        q_cams: (0..nq).map(|_| r.gen_range(0..3)).collect(),
        g_cams: (0..ng).map(|_| r.gen_range(0..3)).collect(),
        filter: r.gen_bool(0.7),
    }
}

fn compare(inst: &Instance) -> Result<bool, String> {
    let expected = brute_force(inst);
    let dist = Tensor::new(&[inst.nq, inst.ng], inst.dist.clone()).map_err(err)?;
    let labels = Labels {
        q_ids: &inst.q_ids,
        g_ids: &inst.g_ids,
        q_cams: &inst.q_cams,
        g_cams: &inst.g_cams,
    };
    let proto = Protocol {
        same_camera_filter: inst.filter,
        ..Protocol::default()
    };
    let valid: Vec<(f64, usize)> = expected.iter().flatten().copied().collect();
    let got = evaluate(&dist, &labels, &proto);
    if valid.is_empty() {
        ensure(got.is_err(), "instance without valid queries was scored")?;
        return Ok(false);
    }
    let got = got.map_err(err)?;
    let excluded: Vec<usize> = (0..inst.nq).filter(|&i| expected[i].is_none()).collect();
    ensure(got.excluded_queries == excluded, "excluded queries differ")?;
    ensure(got.average_precision.len() == valid.len(), "AP count differs")?;
    for (a, (b, _)) in got.average_precision.iter().zip(&valid) {
        ensure((a - b).abs() <= METRIC_TOL, format!("AP {a} vs {b}"))?;
    }
    let map = valid.iter().map(|v| v.0).sum::<f64>() / valid.len() as f64;
    ensure((got.map - map).abs() <= METRIC_TOL, format!("mAP {} vs {map}", got.map))?;
    for k in 0..inst.ng {
        let cmc = valid.iter().filter(|v| v.1 <= k).count() as f64 / valid.len() as f64;
        ensure((got.cmc_curve[k] - cmc).abs() <= METRIC_TOL, format!("CMC@{} differs", k + 1))?;
    }
    Ok(true)
}

fn hand_case(dist: Vec<f64>, g_ids: &[usize]) -> Result<f64, String> {
    let n = dist.len();
    let d = Tensor::new(&[1, n], dist).map_err(err)?;
    let cams = vec![1; n];
    let labels = Labels {
        q_ids: &[0],
        g_ids,
        q_cams: &[0],
        g_cams: &cams,
    };
    Ok(evaluate(&d, &labels, &Protocol::default()).map_err(err)?.map)
}

fn metric() -> Check {
    let mut r = rng(61);
    let mut scored = 0;
    for i in 0..METRIC_INSTANCES {
        if compare(&random_instance(&mut r, i % 2 == 0))? {
            scored += 1;
        }
    }
    // Engineered ties: equal distances rank by gallery index.
    let ties = [
        (vec![0.5, 0.5, 0.5], vec![3, 0, 3], 0.5),
        (vec![0.5, 0.5, 0.5], vec![0, 3, 3], 1.0),
        (vec![0.2, 0.2, 0.1, 0.2], vec![1, 0, 1, 0], 0.5 * (1.0 / 3.0 + 2.0 / 4.0) * 1.0),
    ];
    for (d, g, want) in ties {
        let got = hand_case(d.clone(), &g)?;
        ensure(got == want, format!("tie fixture {d:?} {g:?}: {got} vs {want}"))?;
    }
    let half = hand_case(vec![0.1, 0.2, 0.3], &[5, 0, 7])?;
    ensure(half == 0.5, format!("hand case gave {half}, expected 0.5"))?;
    let five_sixths = hand_case(vec![0.1, 0.2, 0.3], &[0, 4, 0])?;
    ensure(five_sixths == (1.0 + 2.0 / 3.0) / 2.0, format!("hand case gave {five_sixths}"))?;
    ensure((five_sixths - 0.8333).abs() < 1e-4, "hand case is not 0.8333")?;
    Ok(format!(
        "{METRIC_INSTANCES} instances ({scored} scorable) match brute force; hand cases 0.5 and {five_sixths:.4}"
    ))
}

// 4

fn flops(dir: &Path) -> Check {
    let mut cfg = RunConfig::default();
    cfg.set("pyramid.kind", "channel").map_err(err)?;
    cfg.set("pyramid.levels", FLOPS_LEVELS).map_err(err)?;
    cfg.set("pyramid.radix", FLOPS_RADIX).map_err(err)?;
    let out = cmd_flops(&cfg, &dir.join("flops")).map_err(err)?;
    ensure(dir.join("flops/flops.json").exists(), "flops.json not written")?;
    let detail = format!(
        "MACs {} vs {} (+{:.3}%), ops +{:.3}%",
        out.macs,
        out.baseline_macs,
        100.0 * out.macs_overhead_vs_baseline,
        100.0 * out.overhead_vs_baseline
    );
    ensure(out.macs > out.baseline_macs, format!("pyramid adds no MACs: {detail}"))?;
    ensure(out.macs_overhead_vs_baseline < FLOPS_MAX_OVERHEAD, detail.clone())?;
    ensure(out.overhead_vs_baseline < FLOPS_MAX_OVERHEAD, detail.clone())?;
    Ok(detail)
}

// 5, 6

#[derive(Deserialize)]
struct Benchmark {
    seeds: Vec<u64>,
    levels: Vec<usize>,
    radix: usize,
    /// Each median must exceed the one below it by at least this.
    min_gap: f64,
    /// At least one gap must exceed this.
    min_strict_gap: f64,
    /// Allowed excess of the pyramid's occlusion drop over the baseline's.
    drop_margin: f64,
    occlusion: f64,
}

struct Runs {
    clean: Vec<Vec<f64>>,
    occluded: Vec<Vec<f64>>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn benchmark_runs(bench: &Benchmark, dir: &Path) -> Result<Runs, String> {
    let mut clean = vec![Vec::new(); bench.levels.len()];
    let mut occluded = vec![Vec::new(); bench.levels.len()];
    for &seed in &bench.seeds {
        for (i, &levels) in bench.levels.iter().enumerate() {
            let mut cfg = RunConfig::default();
            let s = seed.to_string();
            cfg.set("seed", &s).map_err(err)?;
            cfg.set("data.seed", &s).map_err(err)?;
            cfg.set("pyramid.kind", "channel").map_err(err)?;
            cfg.set("pyramid.radix", &bench.radix.to_string()).map_err(err)?;
            cfg.set("pyramid.levels", &levels.to_string()).map_err(err)?;
            cfg.set("eval.every", "0").map_err(err)?;
            let run = dir.join(format!("bench_s{seed}_l{levels}"));
            let trained = cmd_train(&cfg, &run).map_err(err)?;
            cfg.set("data.occlusion", &bench.occlusion.to_string()).map_err(err)?;
            cfg.set("data.occlude_query_only", "true").map_err(err)?;
            let occ = cmd_eval(&cfg, &run.join("model.ckpt"), &run.join("occluded")).map_err(err)?;
            clean[i].push(trained.report.rank1());
            occluded[i].push(occ.rank1());
        }
    }
    Ok(Runs { clean, occluded })
}

fn ordering(bench: &Benchmark, runs: &Runs) -> Check {
    let medians: Vec<f64> = runs.clean.iter().map(|v| median(v)).collect();
    let gaps: Vec<f64> = medians.windows(2).map(|w| w[1] - w[0]).collect();
    let detail = format!(
        "median Rank-1 by levels {:?}: {:?}; per seed {:?}",
        bench.levels, medians, runs.clean
    );
    ensure(gaps.iter().all(|&g| g >= bench.min_gap), detail.clone())?;
    ensure(gaps.iter().any(|&g| g > bench.min_strict_gap), detail.clone())?;
    Ok(detail)
}

fn occlusion(bench: &Benchmark, runs: &Runs) -> Check {
    let drops: Vec<Vec<f64>> = runs
        .clean
        .iter()
        .zip(&runs.occluded)
        .map(|(c, o)| c.iter().zip(o).map(|(a, b)| a - b).collect())
        .collect();
    let base = median(&drops[0]);
    let top = median(drops.last().unwrap());
    let detail = format!(
        "median Rank-1 drop: baseline {base:.4}, L={} {top:.4}; occluded per seed {:?}",
        bench.levels.last().unwrap(),
        runs.occluded
    );
    ensure(top <= base + bench.drop_margin, detail.clone())?;
    Ok(detail)
}

// 7

fn determinism(dir: &Path) -> Check {
    let mut cfg = RunConfig::default();
    cfg.set("seed", "7").map_err(err)?;
    cfg.set("optim.epochs", "3").map_err(err)?;
    cfg.set("optim.milestones", "2").map_err(err)?;
    cfg.set("eval.every", "1").map_err(err)?;
    let mut files = 0;
    let runs: Vec<_> = ["a", "b"].iter().map(|t| dir.join(format!("det_{t}"))).collect();
    for run in &runs {
        cmd_train(&cfg, run).map_err(err)?;
        cmd_eval(&cfg, &run.join("model.ckpt"), &run.join("eval")).map_err(err)?;
    }
    for name in ["manifest.json", "loss_log.jsonl", "eval_log.jsonl", "eval.json", "model.ckpt", "eval/eval.json"] {
        let a = fs::read(runs[0].join(name)).map_err(err)?;
        let b = fs::read(runs[1].join(name)).map_err(err)?;
        ensure(!a.is_empty(), format!("{name} is empty"))?;
        ensure(a == b, format!("{name} differs between identical runs"))?;
        files += 1;
    }
    Ok(format!("{files} artifacts byte-identical across two runs"))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();

    let mut results: Vec<(usize, &str, Check, f64)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Check| {
        if wanted(n) {
            let t = Instant::now();
            let r = f();
            results.push((n, name, r, t.elapsed().as_secs_f64()));
        }
    };
    timed(1, "gradient suite", &mut gradients);
    timed(2, "algebraic suite", &mut algebra);
    timed(3, "metric oracle", &mut metric);
    timed(4, "pyramid overhead", &mut || flops(dir));
    if wanted(5) || wanted(6) {
        let t = Instant::now();
        let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join(FIXTURE));
        let loaded = text
            .map_err(err)
            .and_then(|t| serde_json::from_str::<Benchmark>(&t).map_err(err))
            .and_then(|b| benchmark_runs(&b, dir).map(|r| (b, r)));
        let secs = t.elapsed().as_secs_f64();
        match loaded {
            Ok((bench, runs)) => {
                let with_time = |d: String| format!("{d}; 15 trainings in {secs:.0}s");
                timed(5, "pyramid benefit", &mut || ordering(&bench, &runs).map(with_time).map_err(with_time));
                timed(6, "occlusion robustness", &mut || occlusion(&bench, &runs));
            }
            Err(e) => {
                timed(5, "pyramid benefit", &mut || Err(e.clone()));
                timed(6, "occlusion robustness", &mut || Err(e.clone()));
            }
        }
    }
    timed(7, "determinism", &mut || determinism(dir));

    let mut failed = 0;
    for (n, name, r, secs) in &results {
        match r {
            Ok(d) => println!("PASS {n} {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n} {name}: {d} [{secs:.1}s]");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
