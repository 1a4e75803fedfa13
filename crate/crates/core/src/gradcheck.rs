//! Central finite-difference certification of tape gradients.
//!
//! [`check`] compares the analytic gradient of a scalar function with
//! `(f(x + h e_i) - f(x - h e_i)) / 2h`. [`registry`] enumerates one case per
//! differentiable operation plus the composite attention, pyramid, loss and
//! full-model objectives; [`run_suite`] evaluates them over several seeds.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{ChannelAttentionParams, SpatialAttentionParams, SpatialWidths};
use crate::error::Result;
use crate::losses::{self, LossConfig};
use crate::model::{ModelConfig, ToyBackbone};
use crate::pyramid::{AttentionKind, Pyramid, PyramidConfig};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// A case fails if more than this fraction of its coordinates straddle a kink.
pub const MAX_SKIPPED: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub step: f64,
    /// Check at most this many coordinates per input (sampled), `None` = all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Multiply the analytic gradient by this factor before comparing.
    /// Only used to build negative controls.
    pub corrupt: Option<f64>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_coords: None,
            seed: 0,
            corrupt: None,
        }
    }
}

/// Error per input, relative to the largest gradient magnitude of the whole
/// case: `max_i |a_i - n_i| / max(max_j |a_j|, max_j |n_j|, 1e-8)` where `i`
/// runs over the input's checked coordinates and `j` over every input's.
#[derive(Clone, Debug)]
pub struct FdResult {
    pub per_input: Vec<f64>,
    /// Coordinates checked, and those skipped because `x - h` and `x + h`
    /// fall on different smooth pieces (a relu sign flip, a sqrt at zero, or
    /// a change of mined index).
    pub checked: usize,
    pub skipped: usize,
}

impl FdResult {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().cloned().fold(0.0, f64::max)
    }
}

fn eval_scalar<F>(inputs: &[Tensor], f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item(), tape.branch_signature()))
}

pub fn check<F>(inputs: &[Tensor], f: F, opts: &FdOptions) -> Result<FdResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut abs_err = Vec::with_capacity(inputs.len());
    let mut scale = 1e-8f64;
    let (mut checked, mut skipped) = (0, 0);
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.numel() => sample(&mut rng, input.numel(), m).into_vec(),
            _ => (0..input.numel()).collect(),
        };
        let mut num_err = 0.0f64;
        for &i in &coords {
            let x0 = input.data()[i];
            probe[k].data_mut()[i] = x0 + opts.step;
            let (fp, sp) = eval_scalar(&probe, &f)?;
            probe[k].data_mut()[i] = x0 - opts.step;
            let (fm, sm) = eval_scalar(&probe, &f)?;
            probe[k].data_mut()[i] = x0;
            checked += 1;
            if sp != sm {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[k].data()[i] * opts.corrupt.unwrap_or(1.0);
            num_err = num_err.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        abs_err.push(num_err);
    }
    Ok(FdResult {
        per_input: abs_err.into_iter().map(|e| e / scale).collect(),
        checked,
        skipped,
    })
}

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One differentiable operation under test: inputs drawn from a seed and a
/// scalar-valued closure built from the operation.
pub struct GradCase {
    pub name: &'static str,
    pub max_coords: Option<usize>,
    pub build: fn(u64) -> (Vec<Tensor>, CaseFn),
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Contract every output element with fixed random weights so the scalar
/// objective exercises the full Jacobian.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = randn(tape.shape(y), &mut rng(seed ^ 0x9e37_79b9));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

macro_rules! case {
    ($name:expr, $coords:expr, |$seed:ident| $body:block) => {
        GradCase {
            name: $name,
            max_coords: $coords,
            build: |$seed: u64| $body,
        }
    };
}

/// One case per registered differentiable operation, plus composites.
pub fn registry() -> Vec<GradCase> {
    vec![
        case!("matmul", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[3, 4], &mut r), randn(&[4, 2], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, seed)
            }))
        }),
        case!("bmm", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[2, 3, 4], &mut r), randn(&[2, 4, 3], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.bmm(v[0], v[1])?;
                project(t, y, seed)
            }))
        }),
        case!("transpose", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[2, 3, 4], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.transpose(v[0])?;
                project(t, y, seed)
            }))
        }),
        case!("reshape", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[2, 6], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.reshape(v[0], &[3, 4])?;
                project(t, y, seed)
            }))
        }),
        case!("broadcast_to", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[2, 1, 3], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.broadcast_to(v[0], &[2, 4, 3])?;
                project(t, y, seed)
            }))
        }),
        case!("add", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[3, 3], &mut r), randn(&[3, 3], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.add(v[0], v[1])?;
                project(t, y, seed)
            }))
        }),
        case!("sub", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[3, 3], &mut r), randn(&[3, 3], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.sub(v[0], v[1])?;
                project(t, y, seed)
            }))
        }),
        case!("mul", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[3, 3], &mut r), randn(&[3, 3], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, seed)
            }))
        }),
        case!("div", None, |seed| {
            let mut r = rng(seed);
            let a = randn(&[3, 3], &mut r);
            let b = Tensor::uniform(&[3, 3], 0.5, 2.0, &mut r);
            (vec![a, b], Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.div(v[0], v[1])?;
                project(t, y, seed)
            }))
        }),
        case!("scale", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[4], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.scale(v[0], -1.7);
                project(t, y, seed)
            }))
        }),
        case!("add_scalar", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[4], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.add_scalar(v[0], 0.3);
                let y = t.mul(y, y)?;
                project(t, y, seed)
            }))
        }),
        case!("sigmoid", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![Tensor::randn(&[5], 2.0, &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.sigmoid(v[0]);
                project(t, y, seed)
            }))
        }),
        case!("relu", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[6], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.relu(v[0]);
                project(t, y, seed)
            }))
        }),
        case!("sqrt", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![Tensor::uniform(&[5], 0.2, 3.0, &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.sqrt(v[0]);
                project(t, y, seed)
            }))
        }),
        case!("conv2d", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[2, 2, 5, 5], &mut r), randn(&[3, 2, 3, 3], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], 2, 1)?;
                project(t, y, seed)
            }))
        }),
        case!("conv2d_pointwise", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[2, 3, 2, 3], &mut r), randn(&[2, 3, 1, 1], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], 1, 0)?;
                project(t, y, seed)
            }))
        }),
        case!("avg_pool2d", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[2, 5, 4], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.avg_pool2d(v[0], 2, 2)?;
                project(t, y, seed)
            }))
        }),
        case!("global_avg_pool", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[2, 3, 2, 4], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.global_avg_pool(v[0])?;
                project(t, y, seed)
            }))
        }),
        case!("sum_axis", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[3, 4], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.sum_axis(v[0], 0)?;
                project(t, y, seed)
            }))
        }),
        case!("mean", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[3, 4], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.mean(y))
            }))
        }),
        case!("log_softmax", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![Tensor::randn(&[3, 5], 3.0, &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.log_softmax(v[0])?;
                project(t, y, seed)
            }))
        }),
        case!("concat_split", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[2, 4, 3], &mut r), randn(&[2, 2, 3], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let parts = t.split(c, 1, 3)?;
                let s = t.sigmoid(parts[1]);
                let y = t.concat(&[parts[2], s, parts[0]], 2)?;
                project(t, y, seed)
            }))
        }),
        case!("index_select", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![randn(&[4, 3], &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.index_select(v[0], &[2, 0, 2, 3])?;
                project(t, y, seed)
            }))
        }),
        case!("channel_attention", None, |seed| {
            let mut r = rng(seed);
            let p = ChannelAttentionParams::init(4, 2, &mut r).unwrap();
            let ins = vec![randn(&[2, 4, 3, 3], &mut r), p.w1.clone(), p.w2.clone()];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let vars = crate::attention::ChannelAttentionVars { w1: v[1], w2: v[2] };
                let y = crate::attention::channel_attention(t, v[0], &vars)?;
                project(t, y, seed)
            }))
        }),
        case!("spatial_attention", None, |seed| {
            let mut r = rng(seed);
            let widths = SpatialWidths::for_part(4, 2, 2);
            let p = SpatialAttentionParams::init(widths, &mut r);
            let mut ins = vec![randn(&[2, 4, 2, 2], &mut r)];
            ins.extend(p.tensors().into_iter().cloned());
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let vars = crate::attention::SpatialAttentionVars::from_slice(&v[1..]);
                let y = crate::attention::spatial_attention(t, v[0], &vars)?;
                project(t, y, seed)
            }))
        }),
        case!("pyramid_channel_3_levels", Some(40), |seed| {
            pyramid_case(seed, AttentionKind::Channel, [8, 2, 2])
        }),
        case!("pyramid_spatial_2_levels", Some(40), |seed| {
            pyramid_case(seed, AttentionKind::Spatial, [2, 4, 2])
        }),
        case!("triplet_batch_hard", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![Tensor::randn(&[6, 3], 1.0, &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                losses::triplet_batch_hard(t, v[0], &[0, 0, 1, 1, 2, 2], 1.0)
            }))
        }),
        case!("ce_label_smoothed", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![Tensor::randn(&[4, 5], 2.0, &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                losses::ce_label_smoothed(t, v[0], &[0, 3, 4, 1], 0.1)
            }))
        }),
        case!("total_loss", None, |seed| {
            let mut r = rng(seed);
            let ins = vec![Tensor::randn(&[4, 3], 1.0, &mut r), Tensor::randn(&[4, 3], 1.0, &mut r)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
                let cfg = LossConfig {
                    margin: 1.0,
                    epsilon: 0.1,
                    lambda: 0.7,
                    classes: 3,
                };
                let parts = losses::total_loss(t, v[0], v[1], &[0, 0, 2, 2], &cfg)?;
                Ok(parts.total)
            }))
        }),
        case!("model_loss", Some(12), |seed| { model_case(seed) }),
    ]
}

fn pyramid_case(seed: u64, kind: AttentionKind, [c, h, w]: [usize; 3]) -> (Vec<Tensor>, CaseFn) {
    let mut r = rng(seed);
    let cfg = PyramidConfig::new(kind, 2, if kind == AttentionKind::Channel { 3 } else { 2 });
    let pyramid = Pyramid::new(cfg, c, h, w, &mut r).expect("valid pyramid geometry");
    let mut ins = vec![randn(&[2, c, h, w], &mut r)];
    ins.extend(pyramid.named_params().into_iter().map(|(_, t)| t.clone()));
    (
        ins,
        Box::new(move |t: &mut Tape, v: &[Var]| {
            let bound = pyramid.bind_from(&v[1..]);
            let y = pyramid.forward(t, v[0], &bound, None)?;
            project(t, y, seed)
        }),
    )
}

fn model_case(seed: u64) -> (Vec<Tensor>, CaseFn) {
    let mut r = rng(seed);
    let cfg = ModelConfig {
        channels: vec![4, 4, 8, 8],
        height: 16,
        width: 16,
        classes: 3,
        pyramid: PyramidConfig::new(AttentionKind::Channel, 2, 2),
        ..ModelConfig::default()
    };
    let model = ToyBackbone::new(cfg, &mut r).expect("valid toy geometry");
    let images = Tensor::uniform(&[6, 3, 16, 16], 0.0, 1.0, &mut r);
    let labels = [0usize, 0, 1, 1, 2, 2];
    let mut ins = vec![images];
    ins.extend(model.named_params().into_iter().map(|(_, t)| t.clone()));
    (
        ins,
        Box::new(move |t: &mut Tape, v: &[Var]| {
            let bound = model.bind_from(&v[1..]);
            let out = model.forward_train(t, v[0], &bound)?;
            let lc = LossConfig {
                margin: 0.3,
                epsilon: 0.1,
                lambda: 1.0,
                classes: 3,
            };
            let parts = losses::total_loss(t, out.embeddings, out.logits, &labels, &lc)?;
            Ok(parts.total)
        }),
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub op: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub seeds: Vec<u64>,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub step: f64,
    pub cases: Vec<CaseReport>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn failures(&self) -> Vec<&str> {
        self.cases
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.op.as_str())
            .collect()
    }
}

/// Run every case over `seeds`. `corrupt` names one op whose analytic gradient
/// is scaled by 1.01 before comparison (negative control).
pub fn run_suite(cases: &[GradCase], seeds: &[u64], corrupt: Option<&str>) -> Result<SuiteReport> {
    let mut reports = Vec::with_capacity(cases.len());
    for case in cases {
        let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
        for &seed in seeds {
            let (inputs, f) = (case.build)(seed);
            let opts = FdOptions {
                max_coords: case.max_coords,
                seed,
                corrupt: (corrupt == Some(case.name)).then_some(1.01),
                ..FdOptions::default()
            };
            let res = check(&inputs, f, &opts)?;
            worst = worst.max(res.max_rel_error());
            checked += res.checked;
            skipped += res.skipped;
        }
        reports.push(CaseReport {
            op: case.name.to_string(),
            max_rel_error: worst,
            checked,
            skipped,
            seeds: seeds.to_vec(),
            passed: worst < TOLERANCE && (skipped as f64) <= MAX_SKIPPED * checked as f64,
        });
    }
    let passed = reports.iter().all(|c| c.passed);
    Ok(SuiteReport {
        tolerance: TOLERANCE,
        step: DEFAULT_STEP,
        cases: reports,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_corrupted_gradient() {
        let cases: Vec<GradCase> = registry().into_iter().filter(|c| c.name == "sigmoid").collect();
        let ok = run_suite(&cases, &[1], None).unwrap();
        assert!(ok.passed);
        let bad = run_suite(&cases, &[1], Some("sigmoid")).unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.failures(), vec!["sigmoid"]);
    }

    #[test]
    fn coordinates_straddling_a_kink_are_skipped() {
        let x = Tensor::new(&[3], vec![3e-6, 0.5, -0.5]).unwrap();
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        };
        let r = check(&[x], f, &FdOptions::default()).unwrap();
        assert_eq!((r.checked, r.skipped), (3, 1));
        assert!(r.max_rel_error() < 1e-8);
    }

    #[test]
    fn sampled_coordinates_are_deterministic() {
        let x = Tensor::randn(&[50], 1.0, &mut rng(3));
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.sigmoid(v[0]);
            Ok(t.sum(y))
        };
        let opts = FdOptions {
            max_coords: Some(5),
            seed: 11,
            ..FdOptions::default()
        };
        let a = check(&[x.clone()], f, &opts).unwrap();
        let b = check(&[x], f, &opts).unwrap();
        assert_eq!(a.per_input, b.per_input);
    }
}
