//! Plot-ready tables: one header line, whitespace-separated numeric columns.

use std::fmt::Write as _;
use std::path::Path;

use clap::ValueEnum;

use ossfield::verify::{EcfReport, NormBoundReport};

use crate::persist::{write_file, SampleFile};
use crate::suites::SuiteReport;
use crate::{CliError, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PlotKind {
    FieldSlice,
    EcfPanel,
    SlopeFit,
}

impl PlotKind {
    pub fn name(self) -> &'static str {
        match self {
            PlotKind::FieldSlice => "field_slice",
            PlotKind::EcfPanel => "ecf_panel",
            PlotKind::SlopeFit => "slope_fit",
        }
    }
}

pub fn cmd_plotdata(kind: PlotKind, input: &Path, replicate: usize, out_dir: &Path) -> Result<Outcome, CliError> {
    let table = match kind {
        PlotKind::FieldSlice => field_slice(&SampleFile::read(input)?, replicate)?,
        PlotKind::EcfPanel => ecf_panel(&read_report(input)?)?,
        PlotKind::SlopeFit => slope_fit(&read_report(input)?)?,
    };
    write_file(out_dir, &format!("{}.tsv", kind.name()), table.as_bytes())?;
    Ok(Outcome {
        pass: true,
        failing_check: None,
        out_dir: out_dir.to_path_buf(),
    })
}

fn read_report(path: &Path) -> Result<SuiteReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: not a suite report: {e}", path.display())))
}

/// First state component of one replicate at every point, with the first
/// two coordinates of the point.
pub fn field_slice(sample: &SampleFile, replicate: usize) -> Result<String, CliError> {
    if replicate >= sample.replicates {
        return Err(CliError::Config(format!(
            "replicate {replicate} out of range (sample has {})",
            sample.replicates
        )));
    }
    let cols = sample.d.min(2);
    let mut out = String::new();
    let header: Vec<String> = (0..cols).map(|a| format!("x{a}")).chain(["value".into()]).collect();
    writeln!(out, "{}", header.join("\t")).unwrap();
    for (j, p) in sample.points.iter().enumerate() {
        let row: Vec<String> = p[..cols]
            .iter()
            .map(|v| format!("{v:e}"))
            .chain([format!("{:e}", sample.value(replicate, j)[0])])
            .collect();
        writeln!(out, "{}", row.join("\t")).unwrap();
    }
    Ok(out)
}

/// `theta_index re_emp im_emp se theo z`; `se` is the pooled real-part
/// standard error and `theo` is `exp(−Γ)` (NaN without an exponent).
pub fn ecf_panel(report: &SuiteReport) -> Result<String, CliError> {
    let value = report.detail.get("ecf").unwrap_or(&report.detail);
    let ecf: EcfReport = serde_json::from_value(value.clone())
        .map_err(|_| CliError::Config(format!("the {} report has no ECF panel", report.suite)))?;
    let mut out = String::from("theta_index\tre_emp\tim_emp\tse\ttheo\tz\n");
    for (k, row) in ecf.rows.iter().enumerate() {
        let se = row.empirical.se_re.hypot(row.reference.se_re);
        let theo = row.theoretical_exponent.map_or(f64::NAN, |g| (-g).exp());
        writeln!(
            out,
            "{k}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}",
            row.empirical.re, row.empirical.im, se, theo, row.z
        )
        .unwrap();
    }
    Ok(out)
}

/// Two rows, small-r then large-r:
/// `r_lo r_hi slope corrected target_lo target_hi`.
pub fn slope_fit(report: &SuiteReport) -> Result<String, CliError> {
    let bad = || CliError::Config(format!("the {} report has no slope fit", report.suite));
    let rep: NormBoundReport =
        serde_json::from_value(report.detail.get("report").cloned().ok_or_else(bad)?).map_err(|_| bad())?;
    let grid = |key: &str| -> Result<[f64; 2], CliError> {
        serde_json::from_value(report.detail.get(key).cloned().ok_or_else(bad)?).map_err(|_| bad())
    };
    let (small, large) = (grid("r_small")?, grid("r_large")?);
    let mut out = String::from("r_lo\tr_hi\tslope\tcorrected\ttarget_lo\ttarget_hi\n");
    for (g, slope, corr, target) in [
        (small, rep.slope_small, rep.corrected_small, rep.h),
        (large, rep.slope_large, rep.corrected_large, rep.big_h),
    ] {
        writeln!(
            out,
            "{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}",
            g[0],
            g[1],
            slope,
            corr,
            target - rep.slack,
            target + rep.slack
        )
        .unwrap();
    }
    Ok(out)
}
