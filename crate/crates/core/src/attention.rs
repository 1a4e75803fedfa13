//! Base attention blocks stacked by the pyramid.
//!
//! Both blocks come in two flavours: `*_logits` returns the pre-sigmoid map
//! (what the pyramid merges before its single gating sigmoid) and the plain
//! function returns the gate `sigmoid(logits)`. No block has bias terms.
//!
//! Inputs are feature maps `[C, H, W]` or batches `[B, C, H, W]`; outputs
//! keep the batch axis when the input has one.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Squeeze-excite bottleneck ratio: 16 for wide inputs, 2 for narrow ones,
/// 1 when the channel count is odd.
pub fn reduction_for(channels: usize) -> usize {
    if channels >= 32 {
        16
    } else if channels % 2 == 0 {
        2
    } else {
        1
    }
}

/// Squeeze-excite weights: `w1: [C/r, C]`, `w2: [C, C/r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub reduction: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelAttentionVars {
    pub w1: Var,
    pub w2: Var,
}

impl ChannelAttentionParams {
    fn check(channels: usize, reduction: usize) -> Result<usize> {
        if reduction == 0 || channels == 0 || channels % reduction != 0 {
            return Err(Error::Divisibility {
                extent: channels,
                parts: reduction,
            });
        }
        Ok(channels / reduction)
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let hidden = Self::check(channels, reduction)?;
        Ok(Self {
            w1: Tensor::he_init(&[hidden, channels], rng),
            w2: Tensor::he_init(&[channels, hidden], rng),
            reduction,
        })
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = Self::check(channels, reduction)?;
        Ok(Self {
            w1: Tensor::zeros(&[hidden, channels]),
            w2: Tensor::zeros(&[channels, hidden]),
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> ChannelAttentionVars {
        ChannelAttentionVars {
            w1: tape.param(self.w1.clone()),
            w2: tape.param(self.w2.clone()),
        }
    }
}

/// Lift `[C, H, W]` to `[1, C, H, W]`; report whether the input was unbatched.
fn batched(tape: &mut Tape, x: Var) -> Result<(Var, bool)> {
    let s = tape.shape(x).to_vec();
    match s.len() {
        4 => Ok((x, false)),
        3 => Ok((tape.reshape(x, &[1, s[0], s[1], s[2]])?, true)),
        _ => Err(Error::dim("attention input", &s, &[])),
    }
}

/// `W2 relu(W1 pool_avg(x))`, shape `[B, C]` (or `[C]`).
pub fn channel_attention_logits(tape: &mut Tape, x: Var, p: &ChannelAttentionVars) -> Result<Var> {
    let (x, unbatched) = batched(tape, x)?;
    let c = tape.shape(x)[1];
    if tape.shape(p.w1)[1] != c {
        return Err(Error::dim("channel_attention", tape.shape(x), tape.shape(p.w1)));
    }
    let pooled = tape.global_avg_pool(x)?;
    let w1t = tape.transpose(p.w1)?;
    let h = tape.matmul(pooled, w1t)?;
    let h = tape.relu(h);
    let w2t = tape.transpose(p.w2)?;
    let logits = tape.matmul(h, w2t)?;
    if unbatched {
        tape.reshape(logits, &[c])
    } else {
        Ok(logits)
    }
}

/// Per-channel gate in `(0, 1)`.
pub fn channel_attention(tape: &mut Tape, x: Var, p: &ChannelAttentionVars) -> Result<Var> {
    let logits = channel_attention_logits(tape, x, p)?;
    Ok(tape.sigmoid(logits))
}

/// Internal widths of one relation-aware spatial block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialWidths {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output width of the theta/phi projections.
    pub relation: usize,
    /// Hidden width of the relation head.
    pub hidden: usize,
}

impl SpatialWidths {
    /// theta/phi project `C -> max(C/8, 1)`; the head reduces
    /// `2N + 1 -> max(N/8, 1) -> 1` with `N = H * W`.
    pub fn for_part(channels: usize, height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            channels,
            height,
            width,
            relation: (channels / 8).max(1),
            hidden: (n / 8).max(1),
        }
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Channels of the stacked `[row relations, column relations, global]` map.
    pub fn stack_channels(&self) -> usize {
        2 * self.positions() + 1
    }
}

/// Relation-aware spatial attention weights, all 1x1 projections stored as
/// `[out, in]` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams {
    pub widths: SpatialWidths,
    pub theta: Tensor,
    pub phi: Tensor,
    /// Global branch: a 1x1 projection `C -> 1` evaluated at every position.
    pub global: Tensor,
    pub w1s: Tensor,
    pub w2s: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialAttentionVars {
    pub theta: Var,
    pub phi: Var,
    pub global: Var,
    pub w1s: Var,
    pub w2s: Var,
}

impl SpatialAttentionVars {
    /// Vars in [`SpatialAttentionParams::tensors`] order.
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            theta: v[0],
            phi: v[1],
            global: v[2],
            w1s: v[3],
            w2s: v[4],
        }
    }
}

impl SpatialAttentionParams {
    pub fn init<R: Rng + ?Sized>(widths: SpatialWidths, rng: &mut R) -> Self {
        let w = widths;
        Self {
            widths,
            theta: Tensor::he_init(&[w.relation, w.channels], rng),
            phi: Tensor::he_init(&[w.relation, w.channels], rng),
            global: Tensor::he_init(&[1, w.channels], rng),
            w1s: Tensor::he_init(&[w.hidden, w.stack_channels()], rng),
            w2s: Tensor::he_init(&[1, w.hidden], rng),
        }
    }

    pub fn zeros(widths: SpatialWidths) -> Self {
        let w = widths;
        Self {
            widths,
            theta: Tensor::zeros(&[w.relation, w.channels]),
            phi: Tensor::zeros(&[w.relation, w.channels]),
            global: Tensor::zeros(&[1, w.channels]),
            w1s: Tensor::zeros(&[w.hidden, w.stack_channels()]),
            w2s: Tensor::zeros(&[1, w.hidden]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.theta, &self.phi, &self.global, &self.w1s, &self.w2s]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.theta,
            &mut self.phi,
            &mut self.global,
            &mut self.w1s,
            &mut self.w2s,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> SpatialAttentionVars {
        let v: Vec<Var> = self.tensors().into_iter().map(|t| tape.param(t.clone())).collect();
        SpatialAttentionVars::from_slice(&v)
    }
}

fn pointwise(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let ws = tape.shape(w).to_vec();
    if ws.len() != 2 {
        return Err(Error::dim("1x1 projection", &ws, &[]));
    }
    let k = tape.reshape(w, &[ws[0], ws[1], 1, 1])?;
    tape.conv2d(x, k, 1, 0)
}

/// Pairwise affinities `r[p, q] = theta(f_p) . phi(f_q)` over the `N = H * W`
/// positions, shape `[B, N, N]` (or `[N, N]`).
pub fn spatial_relations(tape: &mut Tape, x: Var, p: &SpatialAttentionVars) -> Result<Var> {
    let (x, unbatched) = batched(tape, x)?;
    let r = relations_batched(tape, x, p)?;
    if unbatched {
        let n = tape.shape(r)[1];
        tape.reshape(r, &[n, n])
    } else {
        Ok(r)
    }
}

fn relations_batched(tape: &mut Tape, x: Var, p: &SpatialAttentionVars) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n) = (s[0], s[2] * s[3]);
    if n < 2 {
        return Err(Error::Geometry(format!(
            "spatial attention needs at least 2 positions, got {}x{}",
            s[2], s[3]
        )));
    }
    let th = pointwise(tape, x, p.theta)?;
    let ph = pointwise(tape, x, p.phi)?;
    let cr = tape.shape(th)[1];
    let th = tape.reshape(th, &[b, cr, n])?;
    let ph = tape.reshape(ph, &[b, cr, n])?;
    let tht = tape.transpose(th)?;
    tape.bmm(tht, ph)
}

/// `W2s relu(W1s [A_RH, A_RV, A_G])` at every position, shape `[B, H, W]`
/// (or `[H, W]`).
pub fn spatial_attention_logits(tape: &mut Tape, x: Var, p: &SpatialAttentionVars) -> Result<Var> {
    let (x, unbatched) = batched(tape, x)?;
    let s = tape.shape(x).to_vec();
    let (b, h, w, n) = (s[0], s[2], s[3], s[2] * s[3]);
    let rel = relations_batched(tape, x, p)?;
    // Channel q at position p: row vectors carry r[p, q], column vectors r[q, p].
    let rows = tape.transpose(rel)?;
    let global = pointwise(tape, x, p.global)?;
    let global = tape.reshape(global, &[b, 1, n])?;
    let stack = tape.concat(&[rows, rel, global], 1)?;
    let stack = tape.reshape(stack, &[b, 2 * n + 1, h, w])?;
    let hidden = pointwise(tape, stack, p.w1s)?;
    let hidden = tape.relu(hidden);
    let logits = pointwise(tape, hidden, p.w2s)?;
    if unbatched {
        tape.reshape(logits, &[h, w])
    } else {
        tape.reshape(logits, &[b, h, w])
    }
}

/// Per-position gate in `(0, 1)`.
pub fn spatial_attention(tape: &mut Tape, x: Var, p: &SpatialAttentionVars) -> Result<Var> {
    let logits = spatial_attention_logits(tape, x, p)?;
    Ok(tape.sigmoid(logits))
}

/// Weights of one sub-attention block of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionParams {
    Channel(ChannelAttentionParams),
    Spatial(SpatialAttentionParams),
}

#[derive(Clone, Copy, Debug)]
pub enum AttentionVars {
    Channel(ChannelAttentionVars),
    Spatial(SpatialAttentionVars),
}

impl AttentionParams {
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            AttentionParams::Channel(p) => vec![&p.w1, &p.w2],
            AttentionParams::Spatial(p) => p.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            AttentionParams::Channel(p) => vec![&mut p.w1, &mut p.w2],
            AttentionParams::Spatial(p) => p.tensors_mut(),
        }
    }

    pub fn tensor_names(&self) -> &'static [&'static str] {
        match self {
            AttentionParams::Channel(_) => &["w1", "w2"],
            AttentionParams::Spatial(_) => &["theta", "phi", "global", "w1s", "w2s"],
        }
    }

    /// Pair with vars listed in [`AttentionParams::tensors`] order.
    pub fn vars_from(&self, v: &[Var]) -> AttentionVars {
        match self {
            AttentionParams::Channel(_) => AttentionVars::Channel(ChannelAttentionVars { w1: v[0], w2: v[1] }),
            AttentionParams::Spatial(_) => AttentionVars::Spatial(SpatialAttentionVars::from_slice(v)),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        let v: Vec<Var> = self.tensors().into_iter().map(|t| tape.param(t.clone())).collect();
        self.vars_from(&v)
    }
}

impl AttentionVars {
    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            AttentionVars::Channel(p) => channel_attention_logits(tape, x, p),
            AttentionVars::Spatial(p) => spatial_attention_logits(tape, x, p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn reduction_rule() {
        assert_eq!(reduction_for(128), 16);
        assert_eq!(reduction_for(32), 16);
        assert_eq!(reduction_for(16), 2);
        assert_eq!(reduction_for(2), 2);
        assert_eq!(reduction_for(1), 1);
        assert!(ChannelAttentionParams::zeros(6, 4).is_err());
    }

    #[test]
    fn zero_weights_give_half_gate() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[4, 3, 3], 1.0, &mut rng(1)));
        let p = ChannelAttentionParams::zeros(4, 2).unwrap().bind(&mut tape);
        let g = channel_attention(&mut tape, x, &p).unwrap();
        assert_eq!(tape.shape(g), &[4]);
        assert!(tape.value(g).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_input_gives_half_gate() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 2, 2]));
        let p = ChannelAttentionParams::init(4, 2, &mut rng(2)).unwrap().bind(&mut tape);
        let g = channel_attention(&mut tape, x, &p).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_attention_matches_scalar_loops() {
        let mut r = rng(5);
        let (c, h, w) = (4, 3, 2);
        let x = Tensor::randn(&[c, h, w], 1.0, &mut r);
        let p = ChannelAttentionParams::init(c, 2, &mut r).unwrap();

        // Oracle: sigma(W2 relu(W1 mean_{H,W}(x))) with explicit loops.
        let mut pooled = vec![0.0; c];
        for (ch, m) in pooled.iter_mut().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    *m += x.at(&[ch, i, j]);
                }
            }
            *m /= (h * w) as f64;
        }
        let hidden: Vec<f64> = (0..2)
            .map(|k| (0..c).map(|ch| p.w1.at(&[k, ch]) * pooled[ch]).sum::<f64>().max(0.0))
            .collect();
        let expected: Vec<f64> = (0..c)
            .map(|ch| sig((0..2).map(|k| p.w2.at(&[ch, k]) * hidden[k]).sum()))
            .collect();

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pv = p.bind(&mut tape);
        let g = channel_attention(&mut tape, xv, &pv).unwrap();
        for (a, e) in tape.value(g).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[6, 2, 2]));
        let p = ChannelAttentionParams::zeros(4, 2).unwrap().bind(&mut tape);
        assert!(matches!(
            channel_attention(&mut tape, x, &p),
            Err(Error::Dimension { .. })
        ));
    }

    fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.set(&[i, i], 1.0);
        }
        t
    }

    #[test]
    fn orthonormal_positions_give_identity_relations() {
        // 4 channels, 2x2 grid; position p holds basis vector e_p.
        let mut x = Tensor::zeros(&[4, 2, 2]);
        for p in 0..4 {
            x.set(&[p, p / 2, p % 2], 1.0);
        }
        let widths = SpatialWidths {
            relation: 4,
            ..SpatialWidths::for_part(4, 2, 2)
        };
        let mut params = SpatialAttentionParams::zeros(widths);
        params.theta = identity(4);
        params.phi = identity(4);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pv = params.bind(&mut tape);
        let r = spatial_relations(&mut tape, xv, &pv).unwrap();
        assert_eq!(tape.value(r), &identity(4));

        let z = tape.constant(Tensor::zeros(&[4, 2, 2]));
        let r = spatial_relations(&mut tape, z, &pv).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relations_match_pairwise_enumeration() {
        // 1 channel, 2x2 grid: theta/phi are 1x1 scalars.
        let x = Tensor::new(&[1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let widths = SpatialWidths::for_part(1, 2, 2);
        let mut params = SpatialAttentionParams::zeros(widths);
        params.theta = Tensor::new(&[1, 1], vec![1.5]).unwrap();
        params.phi = Tensor::new(&[1, 1], vec![-0.75]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = params.bind(&mut tape);
        let r = spatial_relations(&mut tape, xv, &pv).unwrap();
        let f = x.data();
        for p in 0..4 {
            for q in 0..4 {
                let expected = (1.5 * f[p]) * (-0.75 * f[q]);
                assert!((tape.value(r).at(&[p, q]) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_head_gives_half_gate() {
        let widths = SpatialWidths::for_part(3, 2, 3);
        let mut params = SpatialAttentionParams::init(widths, &mut rng(4));
        params.w2s = Tensor::zeros(&[1, widths.hidden]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[3, 2, 3], 1.0, &mut rng(8)));
        let pv = params.bind(&mut tape);
        let g = spatial_attention(&mut tape, x, &pv).unwrap();
        assert_eq!(tape.shape(g), &[2, 3]);
        assert!(tape.value(g).data().iter().all(|&v| v == 0.5));
    }

    /// Standalone re-implementation with scalar loops.
    fn spatial_oracle(x: &Tensor, p: &SpatialAttentionParams) -> Vec<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = h * w;
        let f = |pos: usize, ch: usize| x.at(&[ch, pos / w, pos % w]);
        let proj = |m: &Tensor, pos: usize| -> Vec<f64> {
            (0..m.shape()[0])
                .map(|o| (0..c).map(|ch| m.at(&[o, ch]) * f(pos, ch)).sum())
                .collect()
        };
        let rel = |a: usize, b: usize| -> f64 {
            let ta = proj(&p.theta, a);
            let pb = proj(&p.phi, b);
            ta.iter().zip(&pb).map(|(u, v)| u * v).sum()
        };
        (0..n)
            .map(|pos| {
                let mut stack = Vec::with_capacity(2 * n + 1);
                stack.extend((0..n).map(|q| rel(pos, q)));
                stack.extend((0..n).map(|q| rel(q, pos)));
                stack.push(proj(&p.global, pos)[0]);
                let hidden: Vec<f64> = (0..p.w1s.shape()[0])
                    .map(|k| {
                        stack
                            .iter()
                            .enumerate()
                            .map(|(i, s)| p.w1s.at(&[k, i]) * s)
                            .sum::<f64>()
                            .max(0.0)
                    })
                    .collect();
                sig(hidden.iter().enumerate().map(|(k, v)| p.w2s.at(&[0, k]) * v).sum())
            })
            .collect()
    }

    #[test]
    fn spatial_attention_matches_scalar_loops() {
        let mut r = rng(21);
        let x = Tensor::randn(&[8, 2, 2], 1.0, &mut r);
        let params = SpatialAttentionParams::init(SpatialWidths::for_part(8, 2, 2), &mut r);
        let expected = spatial_oracle(&x, &params);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pv = params.bind(&mut tape);
        let g = spatial_attention(&mut tape, xv, &pv).unwrap();
        for (a, e) in tape.value(g).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn transposed_relations_swap_theta_and_phi() {
        let mut r = rng(9);
        let x = Tensor::randn(&[2, 4, 3, 2], 1.0, &mut r);
        let params = SpatialAttentionParams::init(SpatialWidths::for_part(4, 3, 2), &mut r);
        let mut swapped = params.clone();
        std::mem::swap(&mut swapped.theta, &mut swapped.phi);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let a = params.bind(&mut tape);
        let b = swapped.bind(&mut tape);
        let ra = spatial_relations(&mut tape, xv, &a).unwrap();
        let rb = spatial_relations(&mut tape, xv, &b).unwrap();
        let rat = tape.transpose(ra).unwrap();
        assert!(tape.value(rat).max_abs_diff(tape.value(rb)) < 1e-12);
    }

    #[test]
    fn spatial_gate_is_permutation_equivariant_with_symmetric_head() {
        // With W1s constant within the row-relation block and within the
        // column-relation block, the head ignores channel order, so permuting
        // positions permutes the gate.
        let mut r = rng(33);
        let (c, h, w) = (4, 2, 3);
        let n = h * w;
        let widths = SpatialWidths::for_part(c, h, w);
        let mut params = SpatialAttentionParams::init(widths, &mut r);
        for k in 0..widths.hidden {
            let (a, b) = (r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
            for q in 0..n {
                params.w1s.set(&[k, q], a);
                params.w1s.set(&[k, n + q], b);
            }
        }
        let x = Tensor::randn(&[c, h, w], 1.0, &mut r);
        let perm = [4usize, 0, 5, 2, 1, 3];
        let mut xp = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for ch in 0..c {
                xp.set(&[ch, dst / w, dst % w], x.at(&[ch, src / w, src % w]));
            }
        }
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let xv = tape.constant(x);
        let xpv = tape.constant(xp);
        let g = spatial_attention(&mut tape, xv, &pv).unwrap();
        let gp = spatial_attention(&mut tape, xpv, &pv).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            let a = tape.value(gp).data()[dst];
            let b = tape.value(g).data()[src];
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_attention_ignores_spatial_permutation() {
        let mut r = rng(12);
        let x = Tensor::randn(&[4, 2, 3], 1.0, &mut r);
        let xp = x.flip_last();
        let p = ChannelAttentionParams::init(4, 2, &mut r).unwrap();
        let mut tape = Tape::new();
        let pv = p.bind(&mut tape);
        let a = tape.constant(x);
        let b = tape.constant(xp);
        let ga = channel_attention(&mut tape, a, &pv).unwrap();
        let gb = channel_attention(&mut tape, b, &pv).unwrap();
        assert!(tape.value(ga).max_abs_diff(tape.value(gb)) < 1e-15);
    }
}
