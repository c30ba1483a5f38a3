//! Static multiply-accumulate and parameter accounting.

use std::fmt::Write as _;

use serde::Serialize;

use crate::arch::{LayerGraph, LayerKind, LayerNode};
use crate::ops::ConvMode;

/// How multiply-accumulates are converted to FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub enum FlopConvention {
    /// One multiply-accumulate is one FLOP.
    #[default]
    #[serde(rename = "mac=1")]
    Mac1,
    /// Multiply and add counted separately for convolutions and linear layers.
    #[serde(rename = "mac=2")]
    Mac2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub id: usize,
    pub name: String,
    pub kind: &'static str,
    pub flops: u64,
    pub params: u64,
    /// Set on learned group convolutions whose pruning target was clamped.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub variant: String,
    pub flop_convention: FlopConvention,
    pub entries: Vec<CostEntry>,
    pub total_flops: u64,
    pub total_params: u64,
}

pub fn kind_name(kind: &LayerKind) -> &'static str {
    match kind {
        LayerKind::Input => "input",
        LayerKind::Conv(cfg) => match cfg.mode {
            ConvMode::Standard => "conv",
            ConvMode::Grouped => "group_conv",
            ConvMode::Depthwise => "depthwise_conv",
            ConvMode::Pointwise => "pointwise_conv",
        },
        LayerKind::LearnedGroupConv { .. } => "learned_group_conv",
        LayerKind::BatchNorm => "batch_norm",
        LayerKind::Relu6 => "relu6",
        LayerKind::Concat => "concat",
        LayerKind::AvgPool { .. } => "avg_pool",
        LayerKind::GlobalAvgPool => "global_avg_pool",
        LayerKind::Dropout => "dropout",
        LayerKind::Linear { .. } => "linear",
    }
}

/// `(multiply-accumulates, parameters)` of one node.
///
/// Batch norm contributes its two parameters per channel but no
/// multiply-accumulates: at inference it folds into the adjacent convolution.
/// ReLU6 and pooling count one operation per element read.
pub fn node_cost(node: &LayerNode) -> (u64, u64) {
    let [c_in, h_in, w_in] = node.in_shape.map(|v| v as u64);
    let [c_out, h_out, w_out] = node.out_shape.map(|v| v as u64);
    let plane_out = h_out * w_out;
    match &node.kind {
        LayerKind::Input | LayerKind::Concat | LayerKind::Dropout => (0, 0),
        LayerKind::Conv(cfg) => {
            let k2 = (cfg.kernel_size * cfg.kernel_size) as u64;
            let (i, o, g) = (cfg.in_channels as u64, cfg.out_channels as u64, cfg.groups as u64);
            let macs = match cfg.mode {
                ConvMode::Standard | ConvMode::Grouped => k2 * (i / g) * o * plane_out,
                ConvMode::Depthwise => k2 * i * plane_out,
                ConvMode::Pointwise => i * o * plane_out,
            };
            (macs, cfg.weight_len() as u64)
        }
        LayerKind::LearnedGroupConv {
            groups,
            out_channels,
            kept,
            ..
        } => {
            let per_group_out = (*out_channels / *groups) as u64;
            let weights = *kept as u64 * per_group_out;
            (weights * plane_out, weights)
        }
        LayerKind::BatchNorm => (0, 2 * c_in),
        LayerKind::Relu6 => (c_in * h_in * w_in, 0),
        LayerKind::AvgPool { window, .. } => ((window * window) as u64 * c_out * plane_out, 0),
        LayerKind::GlobalAvgPool => (c_in * h_in * w_in, 0),
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            let (i, o) = (*in_features as u64, *out_features as u64);
            (i * o, i * o + o)
        }
    }
}

fn is_multiply_layer(kind: &LayerKind) -> bool {
    matches!(
        kind,
        LayerKind::Conv(_) | LayerKind::LearnedGroupConv { .. } | LayerKind::Linear { .. }
    )
}

pub fn count_costs(graph: &LayerGraph) -> CostReport {
    count_costs_with(graph, FlopConvention::Mac1)
}

pub fn count_costs_with(graph: &LayerGraph, convention: FlopConvention) -> CostReport {
    let entries: Vec<CostEntry> = graph
        .nodes()
        .iter()
        .map(|n| {
            let (macs, params) = node_cost(n);
            let flops = if convention == FlopConvention::Mac2 && is_multiply_layer(&n.kind) {
                2 * macs
            } else {
                macs
            };
            CostEntry {
                id: n.id,
                name: n.name.clone(),
                kind: kind_name(&n.kind),
                flops,
                params,
                saturated: matches!(n.kind, LayerKind::LearnedGroupConv { saturated: true, .. }),
            }
        })
        .collect();
    CostReport {
        variant: graph.spec.variant.to_string(),
        flop_convention: convention,
        total_flops: entries.iter().map(|e| e.flops).sum(),
        total_params: entries.iter().map(|e| e.params).sum(),
        entries,
    }
}

/// Percentage reduction `100·(1 − proposed/baseline)`.
pub fn reduction_percent(baseline: u64, proposed: u64) -> f64 {
    if baseline == 0 {
        return 0.0;
    }
    100.0 * (1.0 - proposed as f64 / baseline as f64)
}

impl CostReport {
    /// FLOPs and parameters summed per layer kind, in first-seen order.
    pub fn by_kind(&self) -> Vec<(&'static str, u64, u64)> {
        let mut out: Vec<(&'static str, u64, u64)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(k, ..)| *k == e.kind) {
                Some(slot) => {
                    slot.1 += e.flops;
                    slot.2 += e.params;
                }
                None => out.push((e.kind, e.flops, e.params)),
            }
        }
        out
    }

    pub fn saturated_layers(&self) -> usize {
        self.entries.iter().filter(|e| e.saturated).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-kind table followed by a totals line.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant: {} ({:?})", self.variant, self.flop_convention);
        let _ = writeln!(s, "{:<20} {:>14} {:>12}", "kind", "FLOPs", "params");
        for (kind, flops, params) in self.by_kind() {
            let _ = writeln!(s, "{kind:<20} {flops:>14} {params:>12}");
        }
        let _ = writeln!(
            s,
            "total: {:.2}M FLOPs, {:.2}M params ({} flops, {} params)",
            self.total_flops as f64 / 1e6,
            self.total_params as f64 / 1e6,
            self.total_flops,
            self.total_params
        );
        s
    }
}
