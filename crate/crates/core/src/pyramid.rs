//! Split-attend-merge-stack attention pyramid.
//!
//! Level `i` (1-based) cuts the running feature map into `radix^i` parts
//! along the channel axis (channel kind) or the height axis (spatial kind),
//! runs an independent sub-attention on every part, concatenates the part
//! gates back into one map and multiplies it into the features. Levels are
//! applied coarse to fine, so `X_i = sigmoid(A_i) * X_{i-1}`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    reduction_for, AttentionParams, AttentionVars, ChannelAttentionParams, SpatialAttentionParams,
    SpatialWidths,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Channel,
    Spatial,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Channel => "channel",
            AttentionKind::Spatial => "spatial",
        }
    }

    /// Axis of a `[B, C, H, W]` batch that parts are cut along.
    pub fn split_axis(self) -> usize {
        match self {
            AttentionKind::Channel => 1,
            AttentionKind::Spatial => 2,
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel" => Ok(AttentionKind::Channel),
            "spatial" => Ok(AttentionKind::Spatial),
            _ => Err(Error::Invalid(format!("unknown attention kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub kind: AttentionKind,
    pub radix: usize,
    pub levels: usize,
}

impl PyramidConfig {
    pub fn new(kind: AttentionKind, radix: usize, levels: usize) -> Self {
        Self { kind, radix, levels }
    }

    /// Same attention repeated `levels` times without splitting.
    pub fn stacked(kind: AttentionKind, levels: usize) -> Self {
        Self::new(kind, 1, levels)
    }

    /// Extent of the split axis for a `[C, H, W]` map.
    fn split_extent(&self, c: usize, h: usize) -> usize {
        match self.kind {
            AttentionKind::Channel => c,
            AttentionKind::Spatial => h,
        }
    }

    /// Deepest level `<= self.levels` whose parts are valid for a `[C, H, W]`
    /// map.
    pub fn feasible_levels(&self, c: usize, h: usize, w: usize) -> usize {
        (1..=self.levels)
            .take_while(|&i| part_geometry(self, i, c, h, w).is_ok())
            .last()
            .unwrap_or(0)
    }
}

pub fn num_parts(level: usize, radix: usize) -> usize {
    radix.pow(level as u32)
}

/// Shape `[C, H, W]` of one part at `level`, or the reason there is none.
fn part_geometry(cfg: &PyramidConfig, level: usize, c: usize, h: usize, w: usize) -> Result<[usize; 3]> {
    if cfg.radix == 0 {
        return Err(Error::Invalid("pyramid radix must be at least 1".into()));
    }
    let n = num_parts(level, cfg.radix);
    let extent = cfg.split_extent(c, h);
    if extent % n != 0 {
        return Err(Error::Divisibility { extent, parts: n });
    }
    let part = match cfg.kind {
        AttentionKind::Channel => [c / n, h, w],
        AttentionKind::Spatial => [c, h / n, w],
    };
    if cfg.kind == AttentionKind::Spatial && part[1] * part[2] < 2 {
        return Err(Error::Geometry(format!(
            "spatial part {}x{} has fewer than 2 positions",
            part[1], part[2]
        )));
    }
    Ok(part)
}

fn at_level(level: usize, e: Error) -> Error {
    Error::Level {
        level,
        source: Box::new(e),
    }
}

/// One pyramid level: `radix^index` independent sub-attentions.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub index: usize,
    pub parts: Vec<AttentionParams>,
}

impl PyramidLevel {
    fn build(
        cfg: &PyramidConfig,
        index: usize,
        [c, h, w]: [usize; 3],
        mut make: impl FnMut([usize; 3]) -> Result<AttentionParams>,
    ) -> Result<Self> {
        let part = part_geometry(cfg, index, c, h, w).map_err(|e| at_level(index, e))?;
        let parts = (0..num_parts(index, cfg.radix))
            .map(|_| make(part))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| at_level(index, e))?;
        Ok(Self { index, parts })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub cfg: PyramidConfig,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub levels: Vec<PyramidLevel>,
}

/// Pyramid parameters bound to tape vars: `levels[i][j]` is part `j` of
/// level `i + 1`.
#[derive(Clone, Debug)]
pub struct BoundPyramid {
    pub levels: Vec<Vec<AttentionVars>>,
}

impl Pyramid {
    /// Randomly initialized pyramid for `[C, H, W]` inputs. Fails if any level
    /// cannot split the input evenly.
    pub fn new<R: Rng + ?Sized>(cfg: PyramidConfig, c: usize, h: usize, w: usize, rng: &mut R) -> Result<Self> {
        Self::build(cfg, [c, h, w], |kind, [pc, ph, pw]| match kind {
            AttentionKind::Channel => Ok(AttentionParams::Channel(ChannelAttentionParams::init(
                pc,
                reduction_for(pc),
                rng,
            )?)),
            AttentionKind::Spatial => Ok(AttentionParams::Spatial(SpatialAttentionParams::init(
                SpatialWidths::for_part(pc, ph, pw),
                rng,
            ))),
        })
    }

    /// Pyramid with every weight zero: each level halves its input.
    pub fn zeros(cfg: PyramidConfig, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::build(cfg, [c, h, w], |kind, [pc, ph, pw]| match kind {
            AttentionKind::Channel => Ok(AttentionParams::Channel(ChannelAttentionParams::zeros(
                pc,
                reduction_for(pc),
            )?)),
            AttentionKind::Spatial => Ok(AttentionParams::Spatial(SpatialAttentionParams::zeros(
                SpatialWidths::for_part(pc, ph, pw),
            ))),
        })
    }

    fn build(
        cfg: PyramidConfig,
        dims: [usize; 3],
        mut make: impl FnMut(AttentionKind, [usize; 3]) -> Result<AttentionParams>,
    ) -> Result<Self> {
        let levels = (1..=cfg.levels)
            .map(|i| PyramidLevel::build(&cfg, i, dims, |p| make(cfg.kind, p)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            channels: dims[0],
            height: dims[1],
            width: dims[2],
            levels,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for lvl in &self.levels {
            for (j, part) in lvl.parts.iter().enumerate() {
                for (name, t) in part.tensor_names().iter().zip(part.tensors()) {
                    out.push((format!("level{}.part{}.{}", lvl.index, j, name), t));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.levels
            .iter_mut()
            .flat_map(|l| l.parts.iter_mut())
            .flat_map(|p| p.tensors_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Number of sub-attention blocks over all levels.
    pub fn block_count(&self) -> usize {
        self.levels.iter().map(|l| l.parts.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundPyramid {
        let vars: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect();
        self.bind_from(&vars)
    }

    /// Pair vars listed in [`Pyramid::named_params`] order with their blocks.
    pub fn bind_from(&self, vars: &[Var]) -> BoundPyramid {
        let mut at = 0;
        let levels = self
            .levels
            .iter()
            .map(|lvl| {
                lvl.parts
                    .iter()
                    .map(|p| {
                        let n = p.tensors().len();
                        let v = p.vars_from(&vars[at..at + n]);
                        at += n;
                        v
                    })
                    .collect()
            })
            .collect();
        BoundPyramid { levels }
    }

    /// Run every level on `x` (`[C, H, W]` or `[B, C, H, W]`). When `gates` is
    /// given, the gate of each level is pushed onto it.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        bound: &BoundPyramid,
        gates: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        pyramid_forward(tape, x, &bound.levels, &self.cfg, gates)
    }
}

fn lift(tape: &mut Tape, x: Var) -> Result<(Var, bool)> {
    let s = tape.shape(x).to_vec();
    match s.len() {
        4 => Ok((x, false)),
        3 => Ok((tape.reshape(x, &[1, s[0], s[1], s[2]])?, true)),
        _ => Err(Error::dim("pyramid input", &s, &[])),
    }
}

/// Merged gate `sigmoid([A_{i,1}(X_{i,1}), ..., A_{i,n}(X_{i,n})])` over the
/// channel axis (`[B, C]`) or the spatial grid (`[B, H, W]`); unbatched inputs
/// drop the leading axis.
pub fn level_attention(tape: &mut Tape, x: Var, parts: &[AttentionVars], cfg: &PyramidConfig) -> Result<Var> {
    let (xb, unbatched) = lift(tape, x)?;
    let logits = if parts.len() == 1 {
        parts[0].logits(tape, xb)?
    } else {
        let pieces = tape.split(xb, cfg.kind.split_axis(), parts.len())?;
        let logits = pieces
            .into_iter()
            .zip(parts)
            .map(|(piece, p)| p.logits(tape, piece))
            .collect::<Result<Vec<_>>>()?;
        // Channel logits are [B, C/n]; spatial logits [B, H/n, W]. Both merge on axis 1.
        tape.concat(&logits, 1)?
    };
    let gate = tape.sigmoid(logits);
    if unbatched {
        let s = tape.shape(gate)[1..].to_vec();
        tape.reshape(gate, &s)
    } else {
        Ok(gate)
    }
}

/// `sigmoid(A_i) * x_prev`, broadcasting the gate over the unattended axes.
/// Returns the gated map and the gate.
pub fn apply_level(
    tape: &mut Tape,
    x_prev: Var,
    parts: &[AttentionVars],
    cfg: &PyramidConfig,
) -> Result<(Var, Var)> {
    let (xb, unbatched) = lift(tape, x_prev)?;
    let gate = level_attention(tape, xb, parts, cfg)?;
    let s = tape.shape(xb).to_vec();
    let g = match cfg.kind {
        AttentionKind::Channel => tape.reshape(gate, &[s[0], s[1], 1, 1])?,
        AttentionKind::Spatial => tape.reshape(gate, &[s[0], 1, s[2], s[3]])?,
    };
    let g = tape.broadcast_to(g, &s)?;
    let out = tape.mul(xb, g)?;
    if unbatched {
        let gate = tape.reshape(gate, &tape.shape(gate)[1..].to_vec())?;
        Ok((tape.reshape(out, &s[1..])?, gate))
    } else {
        Ok((out, gate))
    }
}

/// Fold [`apply_level`] over `levels` (coarse to fine). Errors carry the
/// 1-based index of the failing level.
pub fn pyramid_forward(
    tape: &mut Tape,
    x: Var,
    levels: &[Vec<AttentionVars>],
    cfg: &PyramidConfig,
    mut gates: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let mut cur = x;
    for (i, parts) in levels.iter().enumerate() {
        let (out, gate) = apply_level(tape, cur, parts, cfg).map_err(|e| at_level(i + 1, e))?;
        if let Some(g) = gates.as_deref_mut() {
            g.push(gate);
        }
        cur = out;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{channel_attention, spatial_attention};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn part_counts() {
        assert_eq!(num_parts(1, 2), 2);
        assert_eq!(num_parts(3, 2), 8);
        assert_eq!(num_parts(5, 1), 1);
    }

    #[test]
    fn single_part_equals_base_attention() {
        let mut r = rng(1);
        let cfg = PyramidConfig::new(AttentionKind::Channel, 1, 1);
        let p = Pyramid::new(cfg, 4, 3, 3, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[4, 3, 3], 1.0, &mut r));
        let b = p.bind(&mut tape);
        let g = level_attention(&mut tape, x, &b.levels[0], &cfg).unwrap();
        let AttentionVars::Channel(cv) = b.levels[0][0] else { unreachable!() };
        let base = channel_attention(&mut tape, x, &cv).unwrap();
        assert_eq!(tape.value(g), tape.value(base));

        let cfg = PyramidConfig::new(AttentionKind::Spatial, 1, 1);
        let p = Pyramid::new(cfg, 4, 3, 2, &mut r).unwrap();
        let x = tape.constant(Tensor::randn(&[4, 3, 2], 1.0, &mut r));
        let b = p.bind(&mut tape);
        let g = level_attention(&mut tape, x, &b.levels[0], &cfg).unwrap();
        let AttentionVars::Spatial(sv) = b.levels[0][0] else { unreachable!() };
        let base = spatial_attention(&mut tape, x, &sv).unwrap();
        assert_eq!(tape.value(g), tape.value(base));
    }

    #[test]
    fn zero_weights_give_half_gates() {
        let cfg = PyramidConfig::new(AttentionKind::Channel, 2, 1);
        let p = Pyramid::zeros(cfg, 4, 2, 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[4, 2, 2], 1.0, &mut rng(2)));
        let b = p.bind(&mut tape);
        let g = level_attention(&mut tape, x, &b.levels[0], &cfg).unwrap();
        assert_eq!(tape.value(g), &Tensor::full(&[4], 0.5));
        let (out, _) = apply_level(&mut tape, x, &b.levels[0], &cfg).unwrap();
        let half = tape.value(x).map(|v| v / 2.0);
        assert_eq!(tape.value(out), &half);
    }

    #[test]
    fn each_half_is_attended_alone() {
        let mut r = rng(3);
        let cfg = PyramidConfig::new(AttentionKind::Channel, 2, 1);
        let p = Pyramid::new(cfg, 4, 3, 2, &mut r).unwrap();
        let x = Tensor::randn(&[4, 3, 2], 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let b = p.bind(&mut tape);
        let g = level_attention(&mut tape, xv, &b.levels[0], &cfg).unwrap();
        let gate = tape.value(g).clone();
        for j in 0..2 {
            let half = Tensor::new(&[2, 3, 2], x.data()[j * 12..(j + 1) * 12].to_vec()).unwrap();
            let hv = tape.constant(half);
            let AttentionVars::Channel(cv) = b.levels[0][j] else { unreachable!() };
            let alone = channel_attention(&mut tape, hv, &cv).unwrap();
            assert_eq!(&gate.data()[j * 2..(j + 1) * 2], tape.value(alone).data());
        }
    }

    #[test]
    fn two_zero_levels_quarter_the_input() {
        for kind in [AttentionKind::Channel, AttentionKind::Spatial] {
            let cfg = PyramidConfig::new(kind, 2, 2);
            let p = Pyramid::zeros(cfg, 4, 4, 2).unwrap();
            let mut tape = Tape::new();
            let x = Tensor::randn(&[2, 4, 4, 2], 1.0, &mut rng(4));
            let xv = tape.constant(x.clone());
            let b = p.bind(&mut tape);
            let y = p.forward(&mut tape, xv, &b, None).unwrap();
            assert_eq!(tape.value(y), &x.map(|v| v / 4.0));
        }
    }

    #[test]
    fn zero_levels_is_identity() {
        let cfg = PyramidConfig::new(AttentionKind::Spatial, 2, 0);
        let p = Pyramid::new(cfg, 3, 5, 5, &mut rng(0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[3, 5, 5], 1.0, &mut rng(1)));
        let b = p.bind(&mut tape);
        let y = p.forward(&mut tape, x, &b, None).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert_eq!(p.param_count(), 0);
    }

    #[test]
    fn radix_one_is_sequential_whole_tensor_attention() {
        let mut r = rng(6);
        let cfg = PyramidConfig::stacked(AttentionKind::Channel, 2);
        let p = Pyramid::new(cfg, 8, 2, 2, &mut r).unwrap();
        let x = Tensor::randn(&[8, 2, 2], 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let b = p.bind(&mut tape);
        let y = p.forward(&mut tape, xv, &b, None).unwrap();
        let mut cur = xv;
        for lvl in &b.levels {
            let AttentionVars::Channel(cv) = lvl[0] else { unreachable!() };
            let g = channel_attention(&mut tape, cur, &cv).unwrap();
            let g = tape.reshape(g, &[8, 1, 1]).unwrap();
            let g = tape.broadcast_to(g, &[8, 2, 2]).unwrap();
            cur = tape.mul(cur, g).unwrap();
        }
        assert_eq!(tape.value(y), tape.value(cur));
    }

    #[test]
    fn indivisible_level_names_its_index() {
        let cfg = PyramidConfig::new(AttentionKind::Channel, 2, 3);
        let err = Pyramid::new(cfg, 12, 2, 2, &mut rng(0)).unwrap_err();
        match err {
            Error::Level { level, source } => {
                assert_eq!(level, 3);
                assert!(matches!(*source, Error::Divisibility { extent: 12, parts: 8 }));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(Pyramid::new(cfg, 12, 2, 2, &mut rng(0)).unwrap_err().is_geometry());
    }

    #[test]
    fn feasible_levels_caps_spatial_depth() {
        let cfg = PyramidConfig::new(AttentionKind::Spatial, 2, 3);
        assert_eq!(cfg.feasible_levels(8, 24, 12), 3);
        assert_eq!(cfg.feasible_levels(8, 6, 3), 1);
        assert_eq!(cfg.feasible_levels(8, 3, 1), 0);
    }

    #[test]
    fn forward_mismatch_reports_level() {
        let cfg = PyramidConfig::new(AttentionKind::Channel, 2, 2);
        let p = Pyramid::new(cfg, 8, 2, 2, &mut rng(0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[6, 2, 2]));
        let b = p.bind(&mut tape);
        let err = p.forward(&mut tape, x, &b, None).unwrap_err();
        assert!(matches!(err, Error::Level { level: 1, .. }));
    }

    #[test]
    fn gates_are_recorded_per_level() {
        let cfg = PyramidConfig::new(AttentionKind::Spatial, 2, 2);
        let p = Pyramid::new(cfg, 2, 4, 2, &mut rng(5)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[2, 4, 2], 1.0, &mut rng(6)));
        let b = p.bind(&mut tape);
        let mut gates = Vec::new();
        p.forward(&mut tape, x, &b, Some(&mut gates)).unwrap();
        assert_eq!(gates.len(), 2);
        assert_eq!(tape.shape(gates[1]), &[4, 2]);
    }
}
