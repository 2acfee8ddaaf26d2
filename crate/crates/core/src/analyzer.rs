//! Static size and transfer arithmetic over model descriptors.
//!
//! A descriptor pins a backbone's parameter count, its forward/backward
//! activation footprint, and the element count of the shared feature. All
//! sizes stay exact in bytes; unit conventions (SI vs binary) apply only
//! when rendering. Published architecture descriptors ship as JSON files;
//! desk-scale descriptors are computed from live models.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{transfer_time_report, ChannelModel, Paradigm};
use crate::model::MtlModel;
use crate::rng::Rng;

pub const BYTES_PER_PARAM: u64 = 4;

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("descriptor {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

/// Static size record for one backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub name: String,
    pub param_count: u64,
    /// Forward plus backward activation footprint, in bytes.
    pub fwd_bwd_activation_bytes: u64,
    /// Elements of the flattened shared feature.
    pub feature_len: u64,
}

impl ModelDescriptor {
    /// Exact descriptor of a live model's backbone. Activation bytes count
    /// each layer output once forward and once backward at 4 bytes per
    /// element.
    pub fn from_model(name: impl Into<String>, model: &MtlModel) -> Self {
        let mut param_count = 0u64;
        for (pname, tensor) in model.params.iter() {
            if pname.starts_with("backbone.") {
                param_count += tensor.len() as u64;
            }
        }
        let output_elements: u64 = model
            .config
            .backbone_layer_dims()
            .iter()
            .map(|&(_, fan_out)| fan_out as u64)
            .sum();
        ModelDescriptor {
            name: name.into(),
            param_count,
            fwd_bwd_activation_bytes: 4 * output_elements * 2,
            feature_len: model.config.feature_len as u64,
        }
    }

    pub fn load(path: &Path) -> Result<Self, AnalyzerError> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|source| AnalyzerError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), AnalyzerError> {
        let bytes = crate::canonical::to_canonical_json(self).map_err(|source| {
            AnalyzerError::Parse {
                path: path.display().to_string(),
                source,
            }
        })?;
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

/// Load every `*.json` descriptor in a directory, sorted by file name.
pub fn load_descriptor_dir(dir: &Path) -> Result<Vec<ModelDescriptor>, AnalyzerError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| ModelDescriptor::load(p)).collect()
}

pub fn params_size_bytes(param_count: u64) -> u64 {
    param_count * BYTES_PER_PARAM
}

/// Parameter bytes plus the activation figure, exact.
pub fn estimated_model_size(d: &ModelDescriptor) -> u64 {
    params_size_bytes(d.param_count) + d.fwd_bwd_activation_bytes
}

/// Local-only computing needs one independent network per task.
pub fn loc_memory(d: &ModelDescriptor, n_tasks: u64) -> u64 {
    assert!(n_tasks >= 1, "loc_memory needs at least one task");
    n_tasks * estimated_model_size(d)
}

/// Fraction of LoC memory saved by sharing one backbone on the edge.
/// `head_bytes` is any extra edge-resident footprint to charge against the
/// split deployment (zero when every head lives on the server).
pub fn sc_memory_saving(d: &ModelDescriptor, n_tasks: u64, head_bytes: u64) -> f64 {
    assert!(n_tasks >= 2, "sharing needs at least two tasks");
    let edge = estimated_model_size(d) + head_bytes;
    1.0 - edge as f64 / loc_memory(d, n_tasks) as f64
}

/// Bytes of one raw input tensor.
pub fn roc_input_bytes(w: u64, h: u64, c: u64, bytes_per_elem: u64) -> u64 {
    assert!(w > 0 && h > 0 && c > 0, "dimensions must be positive");
    w * h * c * bytes_per_elem
}

/// Bytes of one flattened feature transfer.
pub fn feature_bytes(d: &ModelDescriptor) -> u64 {
    d.feature_len * BYTES_PER_PARAM
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitConvention {
    /// Megabyte = 10^6 bytes, gigabyte = 10^9.
    Si,
    /// Mebibyte = 2^20 bytes, gibibyte = 2^30.
    Binary,
}

impl UnitConvention {
    pub fn mb(&self, bytes: u64) -> f64 {
        match self {
            UnitConvention::Si => bytes as f64 / 1e6,
            UnitConvention::Binary => bytes as f64 / (1u64 << 20) as f64,
        }
    }

    pub fn gb(&self, bytes: u64) -> f64 {
        match self {
            UnitConvention::Si => bytes as f64 / 1e9,
            UnitConvention::Binary => bytes as f64 / (1u64 << 30) as f64,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            UnitConvention::Si => "SI (MB = 10^6 B)",
            UnitConvention::Binary => "binary (MiB = 2^20 B)",
        }
    }
}

impl std::str::FromStr for UnitConvention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "si" => Ok(UnitConvention::Si),
            "binary" => Ok(UnitConvention::Binary),
            other => Err(format!("unknown unit convention {other:?} (expected si|binary)")),
        }
    }
}

/// One rendered size-table row. Byte fields stay exact; the `*_mb` fields
/// follow the chosen unit convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub name: String,
    pub param_count: u64,
    pub params_bytes: u64,
    pub activation_bytes: u64,
    pub estimated_bytes: u64,
    pub feature_len: u64,
    pub feature_bytes: u64,
    pub params_mb: f64,
    pub activations_mb: f64,
    pub estimated_mb: f64,
    pub feature_mb: f64,
}

/// Size table over descriptors, rendered in `unit`.
pub fn render_size_table(descriptors: &[ModelDescriptor], unit: UnitConvention) -> Vec<SizeRow> {
    descriptors
        .iter()
        .map(|d| {
            let params_bytes = params_size_bytes(d.param_count);
            let estimated_bytes = estimated_model_size(d);
            let feature = feature_bytes(d);
            SizeRow {
                name: d.name.clone(),
                param_count: d.param_count,
                params_bytes,
                activation_bytes: d.fwd_bwd_activation_bytes,
                estimated_bytes,
                feature_len: d.feature_len,
                feature_bytes: feature,
                params_mb: unit.mb(params_bytes),
                activations_mb: unit.mb(d.fwd_bwd_activation_bytes),
                estimated_mb: unit.mb(estimated_bytes),
                feature_mb: unit.mb(feature),
            }
        })
        .collect()
}

/// Aligned text rendering of the size table.
pub fn size_table_text(rows: &[SizeRow], unit: UnitConvention) -> String {
    let mut out = String::new();
    out.push_str(&format!("units: {}\n", unit.label()));
    out.push_str(&format!(
        "{:<14} {:>12} {:>12} {:>14} {:>14} {:>12} {:>10}\n",
        "model", "params", "params MB", "fwd/bwd MB", "estimated MB", "feature len", "feat MB"
    ));
    for row in rows {
        out.push_str(&format!(
            "{:<14} {:>12} {:>12.2} {:>14.2} {:>14.2} {:>12} {:>10.2}\n",
            row.name,
            row.param_count,
            row.params_mb,
            row.activations_mb,
            row.estimated_mb,
            row.feature_len,
            row.feature_mb
        ));
    }
    out
}

/// Memory and transfer summary of one deployment paradigm for a workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParadigmReport {
    pub paradigm: Paradigm,
    pub n_tasks: u64,
    /// Model bytes resident on the edge device.
    pub edge_model_bytes: u64,
    /// Tensor bytes crossing the network per input.
    pub per_input_transfer_bytes: u64,
    /// Payload seconds for the full workload on the given channel.
    pub latency_seconds: f64,
}

/// LoC / RoC / SC comparison for a descriptor and workload.
#[allow(clippy::too_many_arguments)]
pub fn paradigm_reports(
    d: &ModelDescriptor,
    n_tasks: u64,
    input_shape: (usize, usize, usize),
    task_classes: &[u16],
    n_inputs: u64,
    ch: &ChannelModel,
    rng: &mut Rng,
) -> Vec<ParadigmReport> {
    [Paradigm::Loc, Paradigm::Roc, Paradigm::Sc]
        .into_iter()
        .map(|paradigm| {
            let transfer = transfer_time_report(
                paradigm,
                n_inputs,
                input_shape,
                d.feature_len,
                task_classes,
                ch,
                rng,
            );
            let edge_model_bytes = match paradigm {
                Paradigm::Loc => loc_memory(d, n_tasks),
                Paradigm::Roc => 0,
                Paradigm::Sc => estimated_model_size(d),
            };
            ParadigmReport {
                paradigm,
                n_tasks,
                edge_model_bytes,
                per_input_transfer_bytes: transfer.request_payload_bytes
                    + transfer.response_payload_bytes,
                latency_seconds: transfer.payload_seconds(),
            }
        })
        .collect()
}

/// Descriptors matching the published two-architecture size table.
pub fn paper_descriptors() -> Vec<ModelDescriptor> {
    vec![
        ModelDescriptor {
            name: "MobileNetV3".into(),
            // Back-derived from the stated 3.58 MB at 4 bytes per parameter.
            param_count: 895_000,
            fwd_bwd_activation_bytes: 724_080_000,
            // Stated in thousands of elements.
            feature_len: 55_300,
        },
        ModelDescriptor {
            name: "EfficientNet".into(),
            param_count: 3_862_500,
            fwd_bwd_activation_bytes: 3_452_090_000,
            feature_len: 406_060,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TaskSpec};

    fn mobilenet() -> ModelDescriptor {
        paper_descriptors().remove(0)
    }

    fn efficientnet() -> ModelDescriptor {
        paper_descriptors().remove(1)
    }

    #[test]
    fn params_size_arithmetic() {
        assert_eq!(params_size_bytes(0), 0);
        assert_eq!(params_size_bytes(1_000_000), 4_000_000);
        assert_eq!(UnitConvention::Si.mb(4_000_000), 4.0);
        assert!((UnitConvention::Binary.mb(4_000_000) - 3.81).abs() < 0.01);
        // 895k parameters land on the published 3.58 MB figure.
        assert!((UnitConvention::Si.mb(params_size_bytes(895_000)) - 3.58).abs() < 1e-9);
    }

    #[test]
    fn estimated_sizes_are_exact_sums() {
        let m = mobilenet();
        assert_eq!(estimated_model_size(&m), 3_580_000 + 724_080_000);
        assert!((UnitConvention::Si.mb(estimated_model_size(&m)) - 727.66).abs() < 1e-9);

        let e = efficientnet();
        assert_eq!(estimated_model_size(&e), 15_450_000 + 3_452_090_000);
        assert!((UnitConvention::Si.mb(estimated_model_size(&e)) - 3467.54).abs() < 1e-9);

        let no_acts = ModelDescriptor {
            fwd_bwd_activation_bytes: 0,
            ..mobilenet()
        };
        assert_eq!(
            estimated_model_size(&no_acts),
            params_size_bytes(no_acts.param_count)
        );
    }

    #[test]
    fn loc_memory_matches_reported_totals() {
        let m = mobilenet();
        let e = efficientnet();
        assert_eq!(loc_memory(&m, 1), estimated_model_size(&m));

        // Two tasks: ~1.46 GB vs the reported ~1.5 GB; ~6.94 vs ~6.9.
        let two_m = UnitConvention::Si.gb(loc_memory(&m, 2));
        assert!((two_m - 1.46).abs() < 0.005, "{two_m}");
        assert!((two_m - 1.5).abs() / 1.5 < 0.05);
        let two_e = UnitConvention::Si.gb(loc_memory(&e, 2));
        assert!((two_e - 6.94).abs() < 0.005, "{two_e}");
        assert!((two_e - 6.9).abs() / 6.9 < 0.05);

        // Three tasks: ~2.18 vs ~2.1 and ~10.40 vs ~10.3.
        let three_m = UnitConvention::Si.gb(loc_memory(&m, 3));
        assert!((three_m - 2.18).abs() < 0.005, "{three_m}");
        assert!((three_m - 2.1).abs() / 2.1 < 0.05);
        let three_e = UnitConvention::Si.gb(loc_memory(&e, 3));
        assert!((three_e - 10.40).abs() < 0.005, "{three_e}");
        assert!((three_e - 10.3).abs() / 10.3 < 0.05);
    }

    #[test]
    fn loc_memory_is_linear_in_tasks() {
        let m = mobilenet();
        let one = loc_memory(&m, 1);
        for n in 2..6 {
            assert_eq!(loc_memory(&m, n), n * one);
        }
    }

    #[test]
    fn sharing_saves_the_expected_fraction() {
        let e = efficientnet();
        // One shared backbone for two tasks halves the footprint.
        assert_eq!(sc_memory_saving(&e, 2, 0), 0.5);
        // Charging a full second backbone to the edge cancels the saving.
        assert_eq!(sc_memory_saving(&e, 2, estimated_model_size(&e)), 0.0);
        // Spreadsheet check on a small descriptor.
        let d = ModelDescriptor {
            name: "desk".into(),
            param_count: 1000,
            fwd_bwd_activation_bytes: 6000,
            feature_len: 64,
        };
        let expected = 1.0 - (10_000.0 + 500.0) / 30_000.0;
        assert!((sc_memory_saving(&d, 3, 500) - expected).abs() < 1e-12);
    }

    #[test]
    fn raw_input_bytes_bracket_the_reported_size() {
        let faces = roc_input_bytes(2835, 3543, 3, 4);
        assert_eq!(faces, 120_532_860);
        let si = UnitConvention::Si.mb(faces);
        let binary = UnitConvention::Binary.mb(faces);
        assert!((binary - 114.95).abs() < 0.01);
        for mb in [si, binary] {
            assert!((110.0..=121.0).contains(&mb), "{mb}");
        }

        assert_eq!(roc_input_bytes(1, 1, 1, 4), 4);
        assert_eq!(roc_input_bytes(16, 16, 3, 4), 3072);
    }

    #[test]
    fn size_table_reproduces_published_rows() {
        let rows_si = render_size_table(&paper_descriptors(), UnitConvention::Si);
        let rows_bin = render_size_table(&paper_descriptors(), UnitConvention::Binary);

        let m = &rows_si[0];
        assert!((m.params_mb - 3.58).abs() <= 0.02);
        assert!((m.activations_mb - 724.08).abs() <= 0.02);
        assert!((m.estimated_mb - 727.66).abs() <= 0.02);
        // The feature column matches under the binary reading.
        assert!((rows_bin[0].feature_mb - 0.21).abs() <= 0.02);

        let e = &rows_si[1];
        assert!((e.params_mb - 15.45).abs() <= 0.02);
        assert!((e.activations_mb - 3452.09).abs() <= 0.02);
        assert!((e.estimated_mb - 3467.54).abs() <= 0.02);
        assert!((rows_bin[1].feature_mb - 1.56).abs() <= 0.02);

        // Unit switches never change byte-level values.
        for (a, b) in rows_si.iter().zip(&rows_bin) {
            assert_eq!(a.params_bytes, b.params_bytes);
            assert_eq!(a.estimated_bytes, b.estimated_bytes);
            assert_eq!(a.feature_bytes, b.feature_bytes);
        }

        assert!(render_size_table(&[], UnitConvention::Si).is_empty());

        let text = size_table_text(&rows_si, UnitConvention::Si);
        assert!(text.contains("MobileNetV3"));
        assert!(text.contains("727.66"));
    }

    #[test]
    fn desk_descriptor_comes_from_the_live_model() {
        let config = ModelConfig {
            input_shape: (16, 16, 3),
            backbone_widths: vec![64],
            feature_len: 64,
            head_hidden_width: 32,
            tasks: vec![
                TaskSpec {
                    name: "hue".into(),
                    n_classes: 6,
                },
                TaskSpec {
                    name: "shape".into(),
                    n_classes: 4,
                },
            ],
        };
        let mut rng = Rng::seed_from_u64(1);
        let model = MtlModel::init(config, &mut rng).unwrap();
        let d = ModelDescriptor::from_model("desk", &model);
        // 768x64 + 64 + 64x64 + 64 backbone parameters.
        assert_eq!(d.param_count, 768 * 64 + 64 + 64 * 64 + 64);
        // Two layer outputs of 64 elements, forward and backward, 4 bytes.
        assert_eq!(d.fwd_bwd_activation_bytes, 4 * (64 + 64) * 2);
        assert_eq!(d.feature_len, 64);
    }

    #[test]
    fn descriptor_files_round_trip_and_name_bad_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("desk.json");
        let d = ModelDescriptor {
            name: "desk".into(),
            param_count: 123,
            fwd_bwd_activation_bytes: 456,
            feature_len: 8,
        };
        d.save(&path).unwrap();
        assert_eq!(ModelDescriptor::load(&path).unwrap(), d);

        std::fs::write(&path, br#"{"name":"x","param_count":1}"#).unwrap();
        let err = ModelDescriptor::load(&path).unwrap_err();
        assert!(
            err.to_string().contains("fwd_bwd_activation_bytes"),
            "error should name the missing field: {err}"
        );
    }

    #[test]
    fn paradigm_reports_follow_the_deployment_contract() {
        let d = efficientnet();
        let mut rng = Rng::seed_from_u64(0);
        let reports = paradigm_reports(
            &d,
            3,
            (2835, 3543, 3),
            &[3, 2, 3],
            100,
            &ChannelModel::gigabit(),
            &mut rng,
        );
        let loc = &reports[0];
        assert_eq!(loc.paradigm, Paradigm::Loc);
        assert_eq!(loc.per_input_transfer_bytes, 0);
        assert_eq!(loc.latency_seconds, 0.0);
        assert_eq!(loc.edge_model_bytes, loc_memory(&d, 3));

        let roc = &reports[1];
        assert_eq!(roc.edge_model_bytes, 0);
        assert!(roc.per_input_transfer_bytes >= 120_532_860);

        let sc = &reports[2];
        assert_eq!(sc.edge_model_bytes, estimated_model_size(&d));
        assert!(sc.per_input_transfer_bytes < roc.per_input_transfer_bytes);
        assert!(sc.latency_seconds < roc.latency_seconds);
    }
}
