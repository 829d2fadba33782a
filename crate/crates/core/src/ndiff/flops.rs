//! Static FLOP accounting over a flat list of op descriptors.
//!
//! Dense layers count a multiply and an add per weight (`2·n_in·n_out` for
//! fc, `2·F·C·k²·H_out·W_out` for conv). Elementwise ops count per element;
//! ISP stages count a fixed per-pixel cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isp::IspKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OpDesc {
    Fc {
        n_in: u64,
        n_out: u64,
    },
    Conv {
        filters: u64,
        channels: u64,
        k: u64,
        h_out: u64,
        w_out: u64,
    },
    Relu {
        n: u64,
    },
    Sigmoid {
        n: u64,
    },
    /// `a·x + b` per element.
    Affine {
        n: u64,
    },
    Add {
        n: u64,
    },
    Mul {
        n: u64,
    },
    Pool {
        channels: u64,
        h: u64,
        w: u64,
    },
    Isp {
        isp: IspKind,
        pixels: u64,
    },
}

/// Per-pixel cost of each ISP stage.
pub fn isp_flops_per_pixel(kind: IspKind) -> u64 {
    match kind {
        IspKind::Ag => 4,
        // 25 taps × (spatial weight, intensity difference and square,
        // scale, exp, product, two accumulations) plus normalize and blend.
        IspKind::Dn => 25 * 8 + 4,
        IspKind::Sn => 25 * 2 + 3,
        IspKind::Gm => 10,
        IspKind::Cs => 2,
    }
}

impl OpDesc {
    pub fn flops(&self) -> u64 {
        match *self {
            OpDesc::Fc { n_in, n_out } => 2 * n_in * n_out,
            OpDesc::Conv {
                filters,
                channels,
                k,
                h_out,
                w_out,
            } => 2 * filters * channels * k * k * h_out * w_out,
            OpDesc::Relu { n } | OpDesc::Add { n } | OpDesc::Mul { n } => n,
            OpDesc::Sigmoid { n } => 3 * n,
            OpDesc::Affine { n } => 2 * n,
            OpDesc::Pool { channels, h, w } => channels * h * w,
            OpDesc::Isp { isp, pixels } => isp_flops_per_pixel(isp) * pixels,
        }
    }
}

/// Total FLOPs of a graph; an empty graph costs nothing.
pub fn flop_count(graph: &[OpDesc]) -> u64 {
    graph.iter().map(OpDesc::flops).sum()
}

/// Parses a JSON array of op descriptors, rejecting unknown kinds.
pub fn parse_graph(json: &str) -> Result<Vec<OpDesc>> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(json)?;
    raw.into_iter()
        .map(|v| {
            let kind = v
                .get("kind")
                .and_then(|k| k.as_str())
                .unwrap_or("<missing>")
                .to_string();
            serde_json::from_value(v).map_err(|_| Error::UnknownOp(kind))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fc_formula() {
        assert_eq!(
            flop_count(&[OpDesc::Fc {
                n_in: 256,
                n_out: 3
            }]),
            1536
        );
    }

    #[test]
    fn empty_graph_is_zero() {
        assert_eq!(flop_count(&[]), 0);
    }

    #[test]
    fn conv_formula() {
        let op = OpDesc::Conv {
            filters: 4,
            channels: 2,
            k: 3,
            h_out: 8,
            w_out: 8,
        };
        assert_eq!(op.flops(), 2 * 4 * 2 * 9 * 64);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let err =
            parse_graph(r#"[{"kind":"fc","n_in":2,"n_out":2},{"kind":"lstm","n":3}]"#).unwrap_err();
        assert!(matches!(err, Error::UnknownOp(ref k) if k == "lstm"));
        let ok = parse_graph(r#"[{"kind":"isp","isp":"gm","pixels":100}]"#).unwrap();
        assert_eq!(flop_count(&ok), 1000);
    }
}
