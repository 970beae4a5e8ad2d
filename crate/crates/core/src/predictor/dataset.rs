//! Labeled feature matrices, their CSV form and z-score standardization.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::features::{FeatureSchema, extract_features};
use super::segment::SignalSegment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureVector {
    pub values: Vec<f64>,
    pub label: i8,
    pub provenance: Provenance,
    pub run_id: String,
    pub end_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub schema: FeatureSchema,
    pub rows: Vec<LabeledFeatureVector>,
}

impl FeatureDataset {
    pub fn from_segments(segments: &[SignalSegment], schema: &FeatureSchema) -> Result<Self> {
        let rows = segments
            .par_iter()
            .map(|s| {
                Ok(LabeledFeatureVector {
                    values: extract_features(s, schema)?,
                    label: s.label,
                    provenance: Provenance::Real,
                    run_id: s.run_id.clone(),
                    end_time: s.end_time,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            schema: schema.clone(),
            rows,
        })
    }

    pub fn labels(&self) -> Vec<i8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn matrix(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.values.clone()).collect()
    }

    pub fn count(&self, label: i8) -> usize {
        self.rows.iter().filter(|r| r.label == label).count()
    }

    /// Header line with schema parameters, column header, one row per vector.
    pub fn to_csv(&self, meta: &str) -> String {
        let sc = &self.schema;
        let lags: Vec<String> = sc.lags.iter().map(|l| l.to_string()).collect();
        let mut out = format!(
            "# schema_version={} sample_rate={} cutoff_hz={} lags={} signals={} {meta}\n",
            sc.version,
            sc.sample_rate,
            sc.cutoff_hz,
            lags.join(";"),
            sc.signals.join(";")
        );
        out.push_str("run_id,end_time,label,provenance");
        for n in sc.names() {
            out.push(',');
            out.push_str(&n);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{}", r.run_id, r.end_time, r.label, r.provenance.as_str());
            for v in &r.values {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {line}: {message}"),
        };
        let mut lines = text.lines();
        let meta = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let field = |key: &str| -> Result<&str> {
            meta.split_whitespace()
                .find_map(|tok| tok.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| err(1, format!("missing '{key}' in metadata line")))
        };
        let num = |key: &str| -> Result<f64> {
            field(key)?.parse().map_err(|_| err(1, format!("bad value for '{key}'")))
        };
        let version: u32 = field("schema_version")?
            .parse()
            .map_err(|_| err(1, "bad schema_version".into()))?;
        let lags = field("lags")?
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| err(1, format!("bad lag '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        let schema = FeatureSchema {
            version,
            signals: field("signals")?.split(';').map(str::to_string).collect(),
            lags,
            sample_rate: num("sample_rate")?,
            cutoff_hz: num("cutoff_hz")?,
        };
        let header = lines.next().ok_or_else(|| err(2, "missing header".into()))?;
        let expected: Vec<String> = ["run_id", "end_time", "label", "provenance"]
            .iter()
            .map(|s| s.to_string())
            .chain(schema.names())
            .collect();
        if header.split(',').ne(expected.iter().map(String::as_str)) {
            return Err(Error::Schema(format!(
                "{}: feature header does not match schema version {version}",
                path.display()
            )));
        }
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            let ln = k + 3;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != expected.len() {
                return Err(err(ln, format!("expected {} fields, got {}", expected.len(), cells.len())));
            }
            let provenance = match cells[3] {
                "real" => Provenance::Real,
                "synthetic" => Provenance::Synthetic,
                other => return Err(err(ln, format!("unknown provenance '{other}'"))),
            };
            let values = cells[4..]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| err(ln, format!("bad number '{c}'"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(LabeledFeatureVector {
                values,
                label: cells[2].parse().map_err(|_| err(ln, "bad label".into()))?,
                provenance,
                run_id: cells[0].to_string(),
                end_time: cells[1].parse().map_err(|_| err(ln, "bad end time".into()))?,
            });
        }
        Ok(Self { schema, rows })
    }
}

/// Per-feature z-score constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Standard deviation, replaced by 1 for constant features.
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InsufficientData("cannot standardize an empty dataset".into()));
        }
        let d = rows[0].len();
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Standardizes only the listed features of `x`.
    pub fn apply_selected(&self, x: &[f64], selected: &[usize]) -> Vec<f64> {
        selected.iter().map(|&i| (x[i] - self.mean[i]) / self.scale[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let schema = FeatureSchema::new(vec!["f_t".into()], 10.0);
        let d = schema.dimension();
        let ds = FeatureDataset {
            rows: vec![
                LabeledFeatureVector {
                    values: (0..d).map(|i| i as f64 * 0.1 + 1e-17).collect(),
                    label: -1,
                    provenance: Provenance::Real,
                    run_id: "L2_000017".into(),
                    end_time: 11.8,
                },
                LabeledFeatureVector {
                    values: (0..d).map(|i| -(i as f64) / 3.0).collect(),
                    label: 1,
                    provenance: Provenance::Synthetic,
                    run_id: "L0_000001".into(),
                    end_time: 4.9,
                },
            ],
            schema,
        };
        let text = ds.to_csv("seed=1");
        let back = FeatureDataset::from_csv(&text, Path::new("x.csv")).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn standardizer_constant_feature() {
        let rows = vec![vec![1.0, 3.0], vec![1.0, 5.0]];
        let s = Standardizer::fit(&rows).unwrap();
        assert_eq!(s.apply(&[1.0, 4.0]), vec![0.0, 0.0]);
        assert_eq!(s.apply(&[1.0, 5.0]), vec![0.0, 1.0]);
    }
}
