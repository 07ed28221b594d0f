//! Run configuration: a TOML document with matrices as row-major nested
//! arrays. Overrides are dotted keys applied to the parsed table before it
//! is typed, so every field can be overridden from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ossfield::fields::{default_quadrature, FieldSpec, Variant};
use ossfield::{KernelSpec, Operator, QuadratureSpec};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub field: FieldConfig,
    #[serde(default = "default_quadrature")]
    pub quadrature: QuadratureSpec,
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub verify: VerifySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub variant: VariantName,
    pub alpha: f64,
    #[serde(rename = "E")]
    pub e: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    pub d: Vec<Vec<f64>>,
    pub kernel: KernelConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    MovingAverage,
    Harmonizable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    /// `Σ_j |x_j|^{γ_j}`.
    SumPowers { gammas: Vec<f64>, beta: f64 },
    /// `|x|^{1/c}`.
    EuclideanPower { c: f64, beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
    /// Product grid appended to `points`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PointGrid>,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub sample: String,
    pub text_export: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            sample: "sample.bin".into(),
            text_export: true,
        }
    }
}

/// Parameters of the verification suites; every entry has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub r: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<f64>>,
    pub panel_size: usize,
    pub panel_seed: u64,
    /// Replaces `D` on the scaled side of the self-similarity test.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_override: Option<Vec<Vec<f64>>>,
    pub drop_base_point: bool,
    pub proper_point: usize,
    pub c_grid: Vec<f64>,
    pub directions: usize,
    pub recurrence_cases: usize,
    pub probes_per_case: usize,
    pub r_small: [f64; 2],
    pub r_large: [f64; 2],
    pub slope_points: usize,
    pub lebesgue_samples: usize,
    pub polar_points: usize,
    pub polar_r: Vec<f64>,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            r: 2.0,
            h: None,
            panel_size: ossfield::verify::PANEL_SIZE,
            panel_seed: 1,
            d_override: None,
            drop_base_point: false,
            proper_point: 0,
            c_grid: vec![0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0],
            directions: 16,
            recurrence_cases: 100,
            probes_per_case: 8,
            r_small: [1e-6, 1e-2],
            r_large: [1e2, 1e6],
            slope_points: 13,
            lebesgue_samples: 1_000_000,
            polar_points: 10_000,
            polar_r: vec![1e-3, 0.5, 1.0, 2.0, 1e3],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical form: the serialization that [`RunConfig::parse`] inverts.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    /// SHA-256 of the canonical form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.run.replicates == 0 {
            return Err(CliError::Config("run.replicates must be positive".into()));
        }
        if let Some(g) = &self.run.grid {
            if g.lo.len() != g.hi.len() || g.lo.len() != g.n.len() || g.n.contains(&0) {
                return Err(CliError::Config("run.grid needs lo, hi, n of equal length and n ≥ 1".into()));
            }
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut out = self.run.points.clone();
        if let Some(g) = &self.run.grid {
            let total: usize = g.n.iter().product();
            for k in 0..total {
                let mut rem = k;
                out.push(
                    (0..g.n.len())
                        .map(|a| {
                            let i = rem % g.n[a];
                            rem /= g.n[a];
                            if g.n[a] == 1 {
                                g.lo[a]
                            } else {
                                g.lo[a] + (g.hi[a] - g.lo[a]) * i as f64 / (g.n[a] - 1) as f64
                            }
                        })
                        .collect(),
                );
            }
        }
        out
    }

    pub fn e(&self) -> Result<Operator, CliError> {
        Ok(Operator::from_rows(&self.field.e)?)
    }

    pub fn d(&self) -> Result<Operator, CliError> {
        Ok(Operator::from_rows(&self.field.d)?)
    }

    pub fn kernel(&self) -> Result<KernelSpec, CliError> {
        Ok(match &self.field.kernel {
            KernelConfig::SumPowers { gammas, beta } => KernelSpec::sum_powers(gammas, *beta)?,
            KernelConfig::EuclideanPower { c, beta } => {
                if !(*c > 0.0) {
                    return Err(CliError::Config(format!("kernel exponent c must be positive, got {c}")));
                }
                KernelSpec::euclidean_power(*c, *beta)
            }
        })
    }

    fn variant(&self) -> Variant {
        match self.field.variant {
            VariantName::MovingAverage => Variant::MovingAverage,
            VariantName::Harmonizable => Variant::Harmonizable,
        }
    }

    /// The field spec with the existence hypotheses checked.
    pub fn field_spec(&self) -> Result<FieldSpec, CliError> {
        Ok(FieldSpec::new(
            self.e()?,
            self.d()?,
            self.field.alpha,
            self.kernel()?,
            self.variant(),
            self.quadrature,
        )?)
    }
}

/// Applies `a.b.c=VALUE`; the value is read as a TOML value, falling back to
/// a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not KEY=VALUE")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override key `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
