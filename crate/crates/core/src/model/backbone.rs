use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{AttentionKind, BoundPyramid, Pyramid, PyramidConfig};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output channels of each conv stage.
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub pyramid: PyramidConfig,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 128],
            in_channels: 3,
            height: 48,
            width: 24,
            classes: 32,
            pyramid: PyramidConfig::new(AttentionKind::Channel, 2, 2),
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// `[C, H, W]` after every stage (3x3 same conv, then 2x2 average pool).
    pub fn stage_dims(&self) -> Result<Vec<[usize; 3]>> {
        let (mut h, mut w) = (self.height, self.width);
        let mut out = Vec::with_capacity(self.channels.len());
        for (s, &c) in self.channels.iter().enumerate() {
            if h < 2 || w < 2 {
                return Err(Error::Geometry(format!(
                    "stage {s} input {h}x{w} is too small to downsample"
                )));
            }
            h /= 2;
            w /= 2;
            out.push([c, h, w]);
        }
        Ok(out)
    }

    pub fn embedding_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&self.in_channels)
    }
}

/// One stage: 3x3 conv, batch norm, relu, 2x2 average pool, then the
/// pyramid on the pooled output.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub conv: Tensor,
    /// Per-channel scale and shift of the batch norm, `[C]`.
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub pyramid: Pyramid,
}

/// Small conv backbone with an attention pyramid after every stage and a
/// BN-style bottleneck in front of the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackbone {
    pub cfg: ModelConfig,
    pub stages: Vec<Stage>,
    /// Learned per-feature scale of the bottleneck.
    pub gamma: Tensor,
    /// `[K, D]`
    pub classifier: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub convs: Vec<Var>,
    /// `(gamma, beta)` of each stage's batch norm.
    pub norms: Vec<(Var, Var)>,
    pub pyramids: Vec<BoundPyramid>,
    pub gamma: Var,
    pub classifier: Var,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Pooled embeddings `[B, D]` (triplet input).
    pub embeddings: Var,
    /// Bottleneck output `[B, D]`.
    pub features: Var,
    pub logits: Var,
    /// Batch `(mean, var)` of every normalization: one per stage, then the
    /// bottleneck.
    pub stats: Vec<(Var, Var)>,
}

impl TrainOutput {
    /// Values of [`TrainOutput::stats`], for [`ToyBackbone::update_running_stats`].
    pub fn batch_stats(&self, tape: &Tape) -> Vec<(Tensor, Tensor)> {
        self.stats
            .iter()
            .map(|&(m, v)| (tape.value(m).clone(), tape.value(v).clone()))
            .collect()
    }
}

enum Norm<'a> {
    Batch(&'a mut Vec<(Var, Var)>),
    Running(&'a Tensor, &'a Tensor),
}

/// Standardize `[B, C, ...]` per channel over every other axis, with batch
/// statistics (recorded into the sink) or the given running statistics.
fn standardize(tape: &mut Tape, x: Var, eps: f64, norm: Norm) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, c) = (shape[0], shape[1]);
    let r: usize = shape[2..].iter().product();
    let flat = [b, c, r];
    let x3 = tape.reshape(x, &flat)?;
    let (mean, var) = match norm {
        Norm::Batch(sink) => {
            let inv = 1.0 / (b * r) as f64;
            let s = tape.sum_axis(x3, 2)?;
            let s = tape.sum_axis(s, 0)?;
            let mean = tape.scale(s, inv);
            let mb = tape.broadcast_to(mean, &flat)?;
            let centered = tape.sub(x3, mb)?;
            let sq = tape.mul(centered, centered)?;
            let v = tape.sum_axis(sq, 2)?;
            let v = tape.sum_axis(v, 0)?;
            let var = tape.scale(v, inv);
            sink.push((mean, var));
            (mean, var)
        }
        Norm::Running(m, v) => {
            let mean = tape.constant(m.clone().reshape(&[1, c, 1])?);
            let var = tape.constant(v.clone().reshape(&[1, c, 1])?);
            (mean, var)
        }
    };
    let mb = tape.broadcast_to(mean, &flat)?;
    let centered = tape.sub(x3, mb)?;
    let std = tape.add_scalar(var, eps);
    let std = tape.sqrt(std);
    let std = tape.broadcast_to(std, &flat)?;
    let y = tape.div(centered, std)?;
    tape.reshape(y, &shape)
}

/// `x * gamma (+ beta)` with per-channel `[C]`-sized parameters.
fn affine(tape: &mut Tape, x: Var, gamma: Var, beta: Option<Var>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut pshape = vec![1; shape.len()];
    pshape[1] = shape[1];
    let g = tape.reshape(gamma, &pshape)?;
    let g = tape.broadcast_to(g, &shape)?;
    let y = tape.mul(x, g)?;
    match beta {
        Some(beta) => {
            let bt = tape.reshape(beta, &pshape)?;
            let bt = tape.broadcast_to(bt, &shape)?;
            tape.add(y, bt)
        }
        None => Ok(y),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOutput {
    pub embeddings: Var,
    pub features: Var,
}

impl ToyBackbone {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(cfg, Some(rng))
    }

    /// Every weight zero, normalization scales one.
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        Self::build::<rand_chacha::ChaCha8Rng>(cfg, None)
    }

    fn build<R: Rng + ?Sized>(cfg: ModelConfig, mut rng: Option<&mut R>) -> Result<Self> {
        fn init<R: Rng + ?Sized>(shape: &[usize], rng: &mut Option<&mut R>) -> Tensor {
            match rng {
                Some(r) => Tensor::he_init(shape, &mut **r),
                None => Tensor::zeros(shape),
            }
        }
        if cfg.classes < 2 {
            return Err(Error::Invalid(format!("need at least 2 classes, got {}", cfg.classes)));
        }
        if cfg.channels.is_empty() {
            return Err(Error::Invalid("backbone needs at least one stage".into()));
        }
        let dims = cfg.stage_dims()?;
        let mut stages = Vec::with_capacity(dims.len());
        let mut c_in = cfg.in_channels;
        for [c, h, w] in dims {
            let conv = init(&[c, c_in, 3, 3], &mut rng);
            let pcfg = stage_pyramid(&cfg.pyramid, c, h, w);
            let pyramid = match rng.as_deref_mut() {
                Some(r) => Pyramid::new(pcfg, c, h, w, &mut *r)?,
                None => Pyramid::zeros(pcfg, c, h, w)?,
            };
            stages.push(Stage {
                conv,
                bn_gamma: Tensor::ones(&[c]),
                bn_beta: Tensor::zeros(&[c]),
                running_mean: Tensor::zeros(&[c]),
                running_var: Tensor::ones(&[c]),
                pyramid,
            });
            c_in = c;
        }
        let d = cfg.embedding_dim();
        let classifier = init(&[cfg.classes, d], &mut rng);
        Ok(Self {
            gamma: Tensor::ones(&[1, d]),
            classifier,
            running_mean: Tensor::zeros(&[1, d]),
            running_var: Tensor::ones(&[1, d]),
            stages,
            cfg,
        })
    }

    /// Pyramid levels actually built at each stage.
    pub fn stage_levels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.pyramid.cfg.levels).collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            out.push((format!("stage{s}.conv"), &stage.conv));
            out.push((format!("stage{s}.bn.gamma"), &stage.bn_gamma));
            out.push((format!("stage{s}.bn.beta"), &stage.bn_beta));
            for (name, t) in stage.pyramid.named_params() {
                out.push((format!("stage{s}.pyramid.{name}"), t));
            }
        }
        out.push(("bottleneck.gamma".into(), &self.gamma));
        out.push(("classifier".into(), &self.classifier));
        out
    }

    /// Same order as [`ToyBackbone::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            out.push(&mut stage.conv);
            out.push(&mut stage.bn_gamma);
            out.push(&mut stage.bn_beta);
            out.extend(stage.pyramid.params_mut());
        }
        out.push(&mut self.gamma);
        out.push(&mut self.classifier);
        out
    }

    /// Non-learned state saved alongside the parameters.
    pub fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            out.push((format!("stage{s}.bn.running_mean"), &stage.running_mean));
            out.push((format!("stage{s}.bn.running_var"), &stage.running_var));
        }
        out.push(("bottleneck.running_mean".into(), &self.running_mean));
        out.push(("bottleneck.running_var".into(), &self.running_var));
        out
    }

    /// Same order as [`ToyBackbone::named_buffers`].
    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            out.push(&mut stage.running_mean);
            out.push(&mut stage.running_var);
        }
        out.push(&mut self.running_mean);
        out.push(&mut self.running_var);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let vars: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect();
        self.bind_from(&vars)
    }

    /// Bind as constants: forward only, no gradient bookkeeping.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundModel {
        let vars: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect();
        self.bind_from(&vars)
    }

    /// Pair vars listed in [`ToyBackbone::named_params`] order with the model.
    pub fn bind_from(&self, vars: &[Var]) -> BoundModel {
        let mut at = 0;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut pyramids = Vec::new();
        for stage in &self.stages {
            convs.push(vars[at]);
            norms.push((vars[at + 1], vars[at + 2]));
            at += 3;
            let n = stage.pyramid.named_params().len();
            pyramids.push(stage.pyramid.bind_from(&vars[at..at + n]));
            at += n;
        }
        BoundModel {
            convs,
            norms,
            pyramids,
            gamma: vars[at],
            classifier: vars[at + 1],
        }
    }

    /// Stages and global pooling. With `stats`, stage norms use batch
    /// statistics and record them; otherwise running statistics.
    fn trunk(
        &self,
        tape: &mut Tape,
        images: Var,
        bound: &BoundModel,
        mut stats: Option<&mut Vec<(Var, Var)>>,
        mut gates: Option<&mut Vec<Vec<Var>>>,
    ) -> Result<Var> {
        let s = tape.shape(images).to_vec();
        let want = [self.cfg.in_channels, self.cfg.height, self.cfg.width];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::dim("model input", &s, &want));
        }
        let mut x = images;
        for (s, stage) in self.stages.iter().enumerate() {
            x = tape.conv2d(x, bound.convs[s], 1, 1)?;
            let norm = match stats.as_deref_mut() {
                Some(sink) => Norm::Batch(sink),
                None => Norm::Running(&stage.running_mean, &stage.running_var),
            };
            x = standardize(tape, x, self.cfg.bn_eps, norm)?;
            let (g, b) = bound.norms[s];
            x = affine(tape, x, g, Some(b))?;
            x = tape.relu(x);
            x = tape.avg_pool2d(x, 2, 2)?;
            let mut stage_gates = Vec::new();
            let sink = gates.is_some().then_some(&mut stage_gates);
            x = stage.pyramid.forward(tape, x, &bound.pyramids[s], sink)?;
            if let Some(g) = gates.as_deref_mut() {
                g.push(stage_gates);
            }
        }
        tape.global_avg_pool(x)
    }

    fn classify(&self, tape: &mut Tape, features: Var, bound: &BoundModel) -> Result<Var> {
        let wt = tape.transpose(bound.classifier)?;
        tape.matmul(features, wt)
    }

    /// Training-mode forward: every normalization uses batch statistics.
    pub fn forward_train(&self, tape: &mut Tape, images: Var, bound: &BoundModel) -> Result<TrainOutput> {
        let mut stats = Vec::with_capacity(self.stages.len() + 1);
        let emb = self.trunk(tape, images, bound, Some(&mut stats), None)?;
        let norm = standardize(tape, emb, self.cfg.bn_eps, Norm::Batch(&mut stats))?;
        let features = affine(tape, norm, bound.gamma, None)?;
        let logits = self.classify(tape, features, bound)?;
        Ok(TrainOutput {
            embeddings: emb,
            features,
            logits,
            stats,
        })
    }

    /// Inference-mode forward with running statistics. When `gates` is given,
    /// it receives one list of per-level gates per stage.
    pub fn forward_eval(
        &self,
        tape: &mut Tape,
        images: Var,
        bound: &BoundModel,
        gates: Option<&mut Vec<Vec<Var>>>,
    ) -> Result<EvalOutput> {
        let emb = self.trunk(tape, images, bound, None, gates)?;
        let norm = standardize(
            tape,
            emb,
            self.cfg.bn_eps,
            Norm::Running(&self.running_mean, &self.running_var),
        )?;
        let features = affine(tape, norm, bound.gamma, None)?;
        Ok(EvalOutput {
            embeddings: emb,
            features,
        })
    }

    /// Fold one training batch's statistics (see [`TrainOutput::batch_stats`])
    /// into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(Tensor, Tensor)]) {
        let m = self.cfg.bn_momentum;
        let blend = |run: &mut Tensor, batch: &Tensor| {
            for (r, b) in run.data_mut().iter_mut().zip(batch.data()) {
                *r = (1.0 - m) * *r + m * b;
            }
        };
        let mut it = stats.iter();
        for stage in &mut self.stages {
            let (mean, var) = it.next().expect("one stats pair per stage");
            blend(&mut stage.running_mean, mean);
            blend(&mut stage.running_var, var);
        }
        let (mean, var) = it.next().expect("bottleneck stats");
        blend(&mut self.running_mean, mean);
        blend(&mut self.running_var, var);
    }

    /// Post-bottleneck inference features `[B, D]`, computed in chunks of
    /// `batch` images. With `flip_average`, the result is the mean of the
    /// features of the images and of their horizontal mirrors.
    pub fn extract_features(&self, images: &Tensor, flip_average: bool, batch: usize) -> Result<Tensor> {
        let plain = self.features_of(images, batch)?;
        if !flip_average {
            return Ok(plain);
        }
        let flipped = self.features_of(&images.flip_last(), batch)?;
        let data = plain
            .data()
            .iter()
            .zip(flipped.data())
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        Tensor::new(plain.shape(), data)
    }

    fn features_of(&self, images: &Tensor, batch: usize) -> Result<Tensor> {
        let n = images.shape()[0];
        let per = images.numel() / n;
        let d = self.cfg.embedding_dim();
        let mut out = Vec::with_capacity(n * d);
        let mut tape = Tape::new();
        for start in (0..n).step_by(batch.max(1)) {
            let end = (start + batch.max(1)).min(n);
            tape.reset();
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(&shape, images.data()[start * per..end * per].to_vec())?;
            let x = tape.constant(chunk);
            let bound = self.bind_frozen(&mut tape);
            let o = self.forward_eval(&mut tape, x, &bound, None)?;
            out.extend_from_slice(tape.value(o.features).data());
        }
        Tensor::new(&[n, d], out)
    }
}

/// Pyramid config for one stage. Spatial pyramids are cut back to the
/// deepest level the stage's height supports; channel pyramids are left
/// intact so bad geometry fails loudly.
fn stage_pyramid(cfg: &PyramidConfig, c: usize, h: usize, w: usize) -> PyramidConfig {
    match cfg.kind {
        AttentionKind::Spatial => PyramidConfig {
            levels: cfg.feasible_levels(c, h, w),
            ..*cfg
        },
        AttentionKind::Channel => *cfg,
    }
}
