//! Analytic operation counts for one inference forward pass (batch 1).
//!
//! Convolutions count `C_out * C_in * k^2 * H' * W'` multiply-accumulates,
//! matrix products `M * K * N`, pooling and activations one op per element.
//! Elementwise arithmetic (gating products, normalization) is tracked in a
//! separate column and left out of the totals.

use serde::Serialize;

use crate::attention::{AttentionParams, SpatialWidths};
use crate::error::Result;
use crate::pyramid::PyramidLevel;
use crate::tensor::{Tape, Tensor};

use super::backbone::ToyBackbone;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Backbone,
    Attention,
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub name: String,
    pub group: Group,
    pub macs: u64,
    pub per_element: u64,
    pub elementwise: u64,
}

impl LayerFlops {
    /// Counted ops: multiply-accumulates plus per-element ops.
    pub fn ops(&self) -> u64 {
        self.macs + self.per_element
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
    pub backbone: u64,
    pub attention: u64,
    pub head: u64,
    pub total: u64,
    /// Elementwise products and normalization, not part of `total`.
    pub elementwise: u64,
    /// `attention / (backbone + head)`.
    pub overhead_ratio: f64,
}

impl FlopReport {
    fn from_layers(layers: Vec<LayerFlops>) -> Self {
        let sum = |g: Group| layers.iter().filter(|l| l.group == g).map(LayerFlops::ops).sum::<u64>();
        let (backbone, attention, head) = (sum(Group::Backbone), sum(Group::Attention), sum(Group::Head));
        let elementwise = layers.iter().map(|l| l.elementwise).sum();
        Self {
            total: backbone + attention + head,
            overhead_ratio: attention as f64 / (backbone + head) as f64,
            layers,
            backbone,
            attention,
            head,
            elementwise,
        }
    }
}

struct Counter {
    layers: Vec<LayerFlops>,
}

impl Counter {
    fn push(&mut self, name: String, group: Group, macs: usize, per_element: usize, elementwise: usize) {
        self.layers.push(LayerFlops {
            name,
            group,
            macs: macs as u64,
            per_element: per_element as u64,
            elementwise: elementwise as u64,
        });
    }

    fn level(&mut self, prefix: &str, lvl: &PyramidLevel, [c, h, w]: [usize; 3]) {
        use Group::Attention as A;
        for (j, part) in lvl.parts.iter().enumerate() {
            let p = format!("{prefix}.level{}.part{j}", lvl.index);
            match part {
                AttentionParams::Channel(cp) => {
                    let (cp_, hid) = (cp.channels(), cp.hidden());
                    self.push(format!("{p}.pool"), A, 0, cp_ * h * w, 0);
                    self.push(format!("{p}.fc1"), A, cp_ * hid, 0, 0);
                    self.push(format!("{p}.relu"), A, 0, hid, 0);
                    self.push(format!("{p}.fc2"), A, hid * cp_, 0, 0);
                }
                AttentionParams::Spatial(sp) => {
                    let SpatialWidths {
                        channels: cc,
                        relation: cr,
                        hidden: hid,
                        ..
                    } = sp.widths;
                    let n = sp.widths.positions();
                    self.push(format!("{p}.theta"), A, cr * cc * n, 0, 0);
                    self.push(format!("{p}.phi"), A, cr * cc * n, 0, 0);
                    self.push(format!("{p}.relations"), A, n * n * cr, 0, 0);
                    self.push(format!("{p}.global"), A, cc * n, 0, 0);
                    self.push(format!("{p}.w1s"), A, hid * (2 * n + 1) * n, 0, 0);
                    self.push(format!("{p}.relu"), A, 0, hid * n, 0);
                    self.push(format!("{p}.w2s"), A, hid * n, 0, 0);
                }
            }
        }
        let gate = match lvl.parts.first() {
            Some(AttentionParams::Spatial(_)) => h * w,
            _ => c,
        };
        let p = format!("{prefix}.level{}", lvl.index);
        self.push(format!("{p}.sigmoid"), A, 0, gate, 0);
        self.push(format!("{p}.gate"), A, 0, 0, c * h * w);
    }
}

/// Per-layer counts for one image through [`ToyBackbone::forward_eval`].
pub fn count_flops(model: &ToyBackbone) -> FlopReport {
    use Group::{Backbone as B, Head as H};
    let cfg = &model.cfg;
    let mut k = Counter { layers: Vec::new() };
    let (mut c_in, mut h, mut w) = (cfg.in_channels, cfg.height, cfg.width);
    for (s, stage) in model.stages.iter().enumerate() {
        let c = stage.conv.shape()[0];
        k.push(format!("stage{s}.conv"), B, c * c_in * 9 * h * w, 0, 0);
        k.push(format!("stage{s}.bn"), B, 0, 0, 4 * c * h * w + 2 * c);
        k.push(format!("stage{s}.relu"), B, 0, c * h * w, 0);
        k.push(format!("stage{s}.pool"), B, 0, c * h * w, 0);
        h /= 2;
        w /= 2;
        for lvl in &stage.pyramid.levels {
            k.level(&format!("stage{s}.pyramid"), lvl, [c, h, w]);
        }
        c_in = c;
    }
    let d = cfg.embedding_dim();
    k.push("head.pool".into(), H, 0, c_in * h * w, 0);
    k.push("head.bottleneck".into(), H, 0, 0, 5 * d);
    FlopReport::from_layers(k.layers)
}

/// Independent count: run the forward pass and total the tape's own per-node
/// costs. Returns `(ops, elementwise)`.
pub fn tape_flops(model: &ToyBackbone) -> Result<(u64, u64)> {
    let cfg = &model.cfg;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, cfg.in_channels, cfg.height, cfg.width]));
    let bound = model.bind_frozen(&mut tape);
    model.forward_eval(&mut tape, x, &bound, None)?;
    Ok(tape
        .op_costs()
        .fold((0, 0), |(o, e), (_, c)| (o + c.macs + c.per_element, e + c.elementwise)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pyramid::{AttentionKind, PyramidConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(kind: AttentionKind, radix: usize, levels: usize) -> ToyBackbone {
        let cfg = ModelConfig {
            pyramid: PyramidConfig::new(kind, radix, levels),
            ..ModelConfig::default()
        };
        ToyBackbone::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn pointwise_conv_closed_form() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 4, 4]));
        let w = tape.constant(Tensor::ones(&[3, 2, 1, 1]));
        tape.conv2d(x, w, 1, 0).unwrap();
        let macs: u64 = tape.op_costs().map(|(_, c)| c.macs).sum();
        assert_eq!(macs, 96);
    }

    #[test]
    fn double_entry_agrees_with_tape() {
        for (kind, radix, levels) in [
            (AttentionKind::Channel, 2, 0),
            (AttentionKind::Channel, 2, 3),
            (AttentionKind::Channel, 1, 2),
            (AttentionKind::Spatial, 2, 2),
        ] {
            let m = model(kind, radix, levels);
            let report = count_flops(&m);
            assert_eq!(report.total, report.layers.iter().map(LayerFlops::ops).sum::<u64>());
            let (ops, elementwise) = tape_flops(&m).unwrap();
            assert_eq!(report.total, ops, "{kind:?} r={radix} L={levels}");
            assert_eq!(report.elementwise, elementwise);
        }
    }

    #[test]
    fn overhead_grows_with_depth_and_stays_small() {
        let base = count_flops(&model(AttentionKind::Channel, 2, 0));
        assert_eq!(base.attention, 0);
        let mut prev = base.total;
        for levels in 1..=3 {
            let r = count_flops(&model(AttentionKind::Channel, 2, levels));
            assert!(r.total >= prev);
            assert_eq!(r.backbone + r.head, base.total);
            prev = r.total;
        }
        let l3 = count_flops(&model(AttentionKind::Channel, 2, 3));
        assert!(((l3.total - base.total) as f64) < 0.01 * base.total as f64);
    }
}
