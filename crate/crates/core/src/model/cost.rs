//! Analytic parameter and FLOP counts.
//!
//! FLOP convention: a multiply-accumulate is 2 FLOPs; batch norm costs 2 per
//! element (scale and shift); ReLU and residual additions 1 per element;
//! average pooling 1 add per input element; linear biases 1 per output.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::spec::{conv_out, ArchitectureSpec, InputShape, LayerSpec};

pub const FLOP_CONVENTION: &str = "multiply-accumulate = 2 FLOPs; BN 2/elem; ReLU, add 1/elem; avgpool 1 add/elem";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub num_heads: usize,
    pub params_backbone: u64,
    pub params_per_head: u64,
    pub params_total_multihead: u64,
    pub params_total_single: u64,
    pub params_total_k_dnns: u64,
    pub flops_backbone: u64,
    pub flops_per_head: u64,
    pub flops_single: u64,
    pub flops_multihead: u64,
    pub convention: String,
}

#[derive(Debug, Clone, Copy, Default)]
struct Cost {
    params: u64,
    flops: u64,
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        self.params += rhs.params;
        self.flops += rhs.flops;
    }
}

fn conv_bn(cin: usize, out: usize, kernel: usize, out_shape: InputShape) -> Cost {
    let hw = (out_shape.height * out_shape.width) as u64;
    let (cin, out, k) = (cin as u64, out as u64, kernel as u64);
    Cost {
        params: cin * out * k * k + 2 * out,
        flops: 2 * k * k * cin * out * hw + 2 * out * hw,
    }
}

fn layers_cost(layers: &[LayerSpec], input: InputShape) -> (Cost, InputShape) {
    let mut total = Cost::default();
    let mut cur = input;
    for layer in layers {
        match *layer {
            LayerSpec::ConvBnRelu {
                out_channels,
                kernel,
                stride,
            } => {
                let out = conv_out(cur, out_channels, kernel, stride);
                total += conv_bn(cur.channels, out_channels, kernel, out);
                total.flops += out.len() as u64;
                cur = out;
            }
            LayerSpec::ResidualGroup {
                out_channels,
                blocks,
                stride,
            } => {
                for b in 0..blocks {
                    let s = if b == 0 { stride } else { 1 };
                    let out = conv_out(cur, out_channels, 3, s);
                    let elems = out.len() as u64;
                    total += conv_bn(cur.channels, out_channels, 3, out);
                    total += conv_bn(out_channels, out_channels, 3, out);
                    if s != 1 || cur.channels != out_channels {
                        total += conv_bn(cur.channels, out_channels, 1, out);
                    }
                    // two ReLUs and the residual add
                    total.flops += 3 * elems;
                    cur = out;
                }
            }
            LayerSpec::Dense { out_features } => {
                let (fin, fout) = (cur.len() as u64, out_features as u64);
                total += Cost {
                    params: fin * fout + fout,
                    flops: 2 * fin * fout + 2 * fout,
                };
                cur = InputShape::new(out_features, 1, 1);
            }
            LayerSpec::AvgPool => {
                total.flops += cur.len() as u64;
                cur = InputShape::new(cur.channels, 1, 1);
            }
        }
    }
    (total, cur)
}

fn classifier_cost(features: InputShape, classes: usize) -> Cost {
    let (f, k) = (features.len() as u64, classes as u64);
    Cost {
        params: f * k + k,
        flops: 2 * f * k + k,
    }
}

impl CostReport {
    pub fn from_spec(spec: &ArchitectureSpec) -> Result<Self> {
        spec.validate()?;
        let (backbone, feature) = layers_cost(spec.backbone_layers(), spec.input_shape);
        let (mut head, out) = layers_cost(spec.head_layers(), feature);
        head += classifier_cost(out, spec.num_classes);
        let l = spec.num_heads as u64;
        let single_params = backbone.params + head.params;
        Ok(CostReport {
            num_heads: spec.num_heads,
            params_backbone: backbone.params,
            params_per_head: head.params,
            params_total_multihead: backbone.params + l * head.params,
            params_total_single: single_params,
            params_total_k_dnns: l * single_params,
            flops_backbone: backbone.flops,
            flops_per_head: head.flops,
            flops_single: backbone.flops + head.flops,
            flops_multihead: backbone.flops + l * head.flops,
            convention: FLOP_CONVENTION.to_string(),
        })
    }

    pub fn flops_ratio(&self) -> f64 {
        self.flops_multihead as f64 / self.flops_single as f64
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("num_heads", self.num_heads as u64),
            ("params_backbone", self.params_backbone),
            ("params_per_head", self.params_per_head),
            ("params_total_multihead", self.params_total_multihead),
            ("params_total_single", self.params_total_single),
            ("params_total_k_dnns", self.params_total_k_dnns),
            ("flops_backbone", self.flops_backbone),
            ("flops_per_head", self.flops_per_head),
            ("flops_single", self.flops_single),
            ("flops_multihead", self.flops_multihead),
        ] {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push_str(&format!("convention={}\n", self.convention));
        out
    }
}

/// `1730714` -> `1,730,714`.
pub fn with_commas(v: u64) -> String {
    let digits = v.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let gflops = |v: u64| format!("{:.3}", v as f64 / 1e9);
        let rows = [
            ("backbone params", with_commas(self.params_backbone)),
            ("params per head", with_commas(self.params_per_head)),
            ("single network params", with_commas(self.params_total_single)),
            (
                &*format!("{}-head network params", self.num_heads),
                with_commas(self.params_total_multihead),
            ),
            (
                &*format!("{} independent networks params", self.num_heads),
                with_commas(self.params_total_k_dnns),
            ),
            ("single network GFLOPs", gflops(self.flops_single)),
            (
                &*format!("{}-head network GFLOPs", self.num_heads),
                gflops(self.flops_multihead),
            ),
            ("multi-head / single FLOPs", format!("{:.3}", self.flops_ratio())),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in rows {
            writeln!(f, "{k:<width$}  {v:>14}")?;
        }
        write!(f, "convention: {}", self.convention)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::preset_layers;

    #[test]
    fn resnet110_parameter_counts() {
        let report = CostReport::from_spec(&ArchitectureSpec::resnet110(5)).unwrap();
        assert_eq!(report.params_total_single, 1_730_714);
        assert_eq!(report.params_total_multihead, 6_995_138);
        assert_eq!(report.params_total_k_dnns, 8_653_570);
        assert_eq!(report.params_backbone, 414_608);
        assert_eq!(report.params_per_head, 1_316_106);
    }

    #[test]
    fn linear_net_flops() {
        let spec = ArchitectureSpec::new(vec![], 0, 1, 3, InputShape::new(1, 1, 7)).unwrap();
        let report = CostReport::from_spec(&spec).unwrap();
        assert_eq!(report.flops_single, 2 * 7 * 3 + 3);
        assert_eq!(report.params_total_single, 7 * 3 + 3);
    }

    #[test]
    fn split_zero_multiplies_everything() {
        let mut spec = ArchitectureSpec::resnet110(5);
        spec.split_index = 0;
        let report = CostReport::from_spec(&spec).unwrap();
        assert_eq!(report.flops_multihead, 5 * report.flops_single);
        assert_eq!(report.params_total_multihead, 8_653_570);
    }

    #[test]
    fn single_head_report_equals_single_network() {
        let spec = ArchitectureSpec::resnet110(1);
        let r = CostReport::from_spec(&spec).unwrap();
        assert_eq!(r.params_total_multihead, r.params_total_single);
        assert_eq!(r.params_total_k_dnns, r.params_total_single);
        assert_eq!(r.flops_multihead, r.flops_single);
    }

    #[test]
    fn later_split_never_costs_more() {
        let layers = preset_layers("desk-resnet").unwrap();
        let mut prev = u64::MAX;
        for split in 0..=layers.len() {
            let spec = ArchitectureSpec::new(layers.clone(), split, 4, 10, InputShape::new(3, 16, 16)).unwrap();
            let r = CostReport::from_spec(&spec).unwrap();
            assert_eq!(r.params_total_multihead - r.params_total_single, 3 * r.params_per_head);
            assert!(r.params_total_multihead <= prev);
            prev = r.params_total_multihead;
        }
    }

    #[test]
    fn formatting() {
        assert_eq!(with_commas(1_730_714), "1,730,714");
        assert_eq!(with_commas(12), "12");
        let r = CostReport::from_spec(&ArchitectureSpec::resnet110(5)).unwrap();
        assert!(r.to_string().contains("6,995,138"));
        assert!(r.to_key_values().contains("params_total_k_dnns=8653570\n"));
    }
}
