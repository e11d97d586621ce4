// SPDX-License-Identifier: Apache-2.0

//! Cartesian ablation sweeps over config overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::plot;
use super::run::{self, TrainOptions};
use crate::embank::EmbeddingBank;
use crate::error::{Result, SgvaError};
use crate::infer::{ModeValues, PredictMode};

/// One setting of an axis: a label and the overrides it applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisLevel {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationAxis {
    pub name: String,
    pub levels: Vec<AxisLevel>,
    /// Numeric x-coordinates of the levels, when the axis is plottable.
    pub numeric: Option<Vec<f64>>,
}

impl AblationAxis {
    /// A single-key axis, e.g. `loss.tau2` over `5,10,15`.
    pub fn over_key(key: &str, values: &[&str]) -> Self {
        let numeric: Option<Vec<f64>> = values.iter().map(|v| v.parse().ok()).collect();
        AblationAxis {
            name: key.to_string(),
            levels: values
                .iter()
                .map(|v| AxisLevel {
                    label: v.to_string(),
                    overrides: vec![(key.to_string(), v.to_string())],
                })
                .collect(),
            numeric,
        }
    }

    /// Parses `key=v1,v2,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| SgvaError::Config(format!("axis `{spec}` is not key=v1,v2,...")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(SgvaError::Config(format!("axis `{key}` has no values")));
        }
        Ok(Self::over_key(key.trim(), &values))
    }
}

pub const PRESETS: [&str; 6] = ["kd", "kd_variant", "tau2", "hidden", "adapter_prompt", "shots"];

/// Named sweeps mirroring the standard ablations.
pub fn preset(name: &str) -> Result<AblationAxis> {
    let level = |label: &str, kv: &[(&str, &str)]| AxisLevel {
        label: label.to_string(),
        overrides: kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    };
    Ok(match name {
        "kd" => AblationAxis {
            name: "kd".into(),
            levels: vec![level("w/o KD", &[("loss.kd", "false")]), level("w/ KD", &[("loss.kd", "true")])],
            numeric: None,
        },
        "kd_variant" => AblationAxis {
            name: "kd_variant".into(),
            levels: vec![
                level("direct", &[("loss.kd", "true"), ("loss.kd_variant", "direct")]),
                level("implicit", &[("loss.kd", "true"), ("loss.kd_variant", "implicit")]),
            ],
            numeric: None,
        },
        "tau2" => AblationAxis::over_key("loss.tau2", &["5", "10", "15", "20", "25"]),
        "hidden" => AblationAxis::over_key("adapter.hidden", &["512", "1024", "2048", "4096", "8192"]),
        "adapter_prompt" => {
            let row = |a: bool, p: bool| {
                level(
                    &format!("adapter {} / learnable prompt {}", mark(a), mark(p)),
                    &[("adapter.enabled", bool_str(a)), ("prompt.learnable", bool_str(p))],
                )
            };
            AblationAxis {
                name: "adapter_prompt".into(),
                levels: vec![row(false, false), row(true, false), row(false, true), row(true, true)],
                numeric: None,
            }
        }
        "shots" => AblationAxis::over_key("sampling.k_shot", &["1", "2", "4", "8", "16"]),
        other => {
            return Err(SgvaError::Config(format!(
                "unknown ablation preset `{other}`; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    })
}

fn mark(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        "✗"
    }
}

fn bool_str(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub labels: Vec<String>,
    pub overrides: Vec<(String, String)>,
    pub episodes: usize,
    pub mean: ModeValues,
    pub ci95: ModeValues,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub name: String,
    pub axes: Vec<AblationAxis>,
    pub rows: Vec<AblationRow>,
}

/// Runs the Cartesian product of `axes` on top of `base`, every run with
/// the base seed. No axes yields one row.
pub fn run_ablation_suite(name: &str, base: &ExperimentConfig, axes: &[AblationAxis], bank: &EmbeddingBank) -> Result<AblationTable> {
    if let Some(a) = axes.iter().find(|a| a.levels.is_empty()) {
        return Err(SgvaError::Config(format!("axis `{}` has no levels", a.name)));
    }
    let mut combos: Vec<Vec<&AxisLevel>> = vec![Vec::new()];
    for axis in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                axis.levels.iter().map(move |l| {
                    let mut next = c.clone();
                    next.push(l);
                    next
                })
            })
            .collect();
    }
    let mut rows = Vec::with_capacity(combos.len());
    for combo in combos {
        let overrides: Vec<(String, String)> = combo.iter().flat_map(|l| l.overrides.iter().cloned()).collect();
        let cfg = base.with_overrides(&overrides)?;
        let out = run::run_train(&cfg, bank, &TrainOptions::default())?;
        rows.push(AblationRow {
            labels: combo.iter().map(|l| l.label.clone()).collect(),
            overrides,
            episodes: out.report.evaluation.episodes,
            mean: out.report.evaluation.mean,
            ci95: out.report.evaluation.ci95,
            content_hash: out.report.content_hash,
        });
    }
    Ok(AblationTable {
        name: name.to_string(),
        axes: axes.to_vec(),
        rows,
    })
}

/// Runs each named preset as its own sweep and writes its artifacts into
/// `out_dir`.
pub fn run_presets(base: &ExperimentConfig, names: &[&str], bank: &EmbeddingBank, out_dir: &Path) -> Result<Vec<(AblationTable, Vec<PathBuf>)>> {
    let axes = names.iter().map(|n| preset(n)).collect::<Result<Vec<_>>>()?;
    names
        .iter()
        .zip(axes)
        .map(|(name, axis)| {
            let table = run_ablation_suite(name, base, &[axis], bank)?;
            let files = table.write_artifacts(out_dir)?;
            Ok((table, files))
        })
        .collect()
}

impl AblationTable {
    fn axis_names(&self) -> Vec<String> {
        self.axes.iter().map(|a| a.name.clone()).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = self.axis_names();
        for m in PredictMode::ALL {
            header.push(format!("{}_mean", m.name()));
            header.push(format!("{}_ci95", m.name()));
        }
        header.push("episodes".into());
        header.push("content_hash".into());
        let csv_err = |e: csv::Error| SgvaError::Config(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = r.labels.clone();
            for m in PredictMode::ALL {
                rec.push(format!("{}", r.mean.get(m)));
                rec.push(format!("{}", r.ci95.get(m)));
            }
            rec.push(r.episodes.to_string());
            rec.push(r.content_hash.clone());
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| SgvaError::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Accuracy in percent, `mean ± ci`, one column per prediction mode.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let mut header = if self.axes.is_empty() { vec!["run".to_string()] } else { self.axis_names() };
        header.extend(PredictMode::ALL.iter().map(|m| m.name().to_string()));
        let _ = writeln!(s, "| {} |", header.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
        for r in &self.rows {
            let mut cells = if r.labels.is_empty() { vec!["base".to_string()] } else { r.labels.clone() };
            for m in PredictMode::ALL {
                cells.push(format!("{:.2} ± {:.2}", 100.0 * r.mean.get(m), 100.0 * r.ci95.get(m)));
            }
            let _ = writeln!(s, "| {} |", cells.join(" | "));
        }
        s
    }

    /// Accuracy against the first axis when it is numeric and the only one.
    pub fn to_svg(&self) -> Option<String> {
        let [axis] = self.axes.as_slice() else {
            return None;
        };
        let xs = axis.numeric.as_ref()?;
        let series: Vec<(String, Vec<(f64, f64)>)> = PredictMode::ALL
            .iter()
            .map(|&m| {
                let pts = xs.iter().zip(&self.rows).map(|(&x, r)| (x, 100.0 * r.mean.get(m))).collect();
                (m.name().to_string(), pts)
            })
            .collect();
        Some(plot::line_chart(&self.name, &axis.name, "accuracy (%)", &series))
    }

    /// Writes `<name>.csv`, `<name>.md`, `<name>.json` and, when plottable,
    /// `<name>.svg` into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |ext: &str, body: String| -> Result<()> {
            let p = dir.join(format!("{}.{ext}", self.name));
            std::fs::write(&p, body)?;
            written.push(p);
            Ok(())
        };
        put("csv", self.to_csv()?)?;
        put("md", self.to_markdown())?;
        put("json", serde_json::to_string_pretty(self).expect("table serializes"))?;
        if let Some(svg) = self.to_svg() {
            put("svg", svg)?;
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_shapes() {
        assert_eq!(preset("tau2").unwrap().levels.len(), 5);
        assert_eq!(preset("adapter_prompt").unwrap().levels.len(), 4);
        assert_eq!(preset("kd").unwrap().levels.len(), 2);
        assert_eq!(preset("nope").unwrap_err().kind(), "ConfigError");
        for p in PRESETS {
            let axis = preset(p).unwrap();
            let base = ExperimentConfig::default();
            for l in &axis.levels {
                base.with_overrides(&l.overrides).unwrap();
            }
        }
    }

    #[test]
    fn axis_parsing() {
        let a = AblationAxis::parse("loss.tau2=5, 10").unwrap();
        assert_eq!(a.numeric, Some(vec![5.0, 10.0]));
        assert_eq!(a.levels[1].overrides, vec![("loss.tau2".to_string(), "10".to_string())]);
        assert!(AblationAxis::parse("loss.tau2=").is_err());
        assert_eq!(AblationAxis::parse("loss.kd_variant=direct,implicit").unwrap().numeric, None);
    }
}
