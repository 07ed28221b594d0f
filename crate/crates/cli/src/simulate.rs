use std::path::Path;

use serde_json::json;

use ossfield::fields::simulate;

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::persist::{write_file, SampleFile};
use crate::{CliError, Outcome};

/// Simulates the configured field and writes the sample, its text export,
/// the canonical config and the manifest into `out_dir`.
pub fn cmd_simulate(cfg: &RunConfig, out_dir: &Path) -> Result<Outcome, CliError> {
    let spec = cfg.field_spec()?;
    let points = cfg.points();
    if points.is_empty() {
        return Err(CliError::Config("no evaluation points".into()));
    }
    let digest = cfg.digest();
    let mut manifest = RunManifest::new("simulate", digest.clone(), cfg.run.seed);
    let sample = manifest.stage("simulate", || simulate(&spec, &points, cfg.run.replicates, cfg.run.seed))?;
    let file = SampleFile {
        digest,
        d: spec.dim_d(),
        m: spec.dim_m(),
        seed: cfg.run.seed,
        replicates: sample.n_rep,
        points: sample.points.clone(),
        values: sample.values.clone(),
    };
    manifest.quadrature = json!({
        "cells": sample.cells,
        "margins": sample.margins,
        "upsilon": sample.upsilon,
    });
    manifest.verdicts = json!({ "simulate": "ok" });
    let mut files = vec![write_file(out_dir, &cfg.output.sample, &file.to_bytes())?];
    if cfg.output.text_export {
        let name = format!("{}.txt", cfg.output.sample.trim_end_matches(".bin"));
        files.push(write_file(out_dir, &name, file.to_text().as_bytes())?);
    }
    files.push(write_file(out_dir, "config.toml", cfg.canonical().as_bytes())?);
    manifest.files = files;
    write_manifest(&manifest, out_dir)?;
    Ok(Outcome {
        pass: true,
        failing_check: None,
        out_dir: out_dir.to_path_buf(),
    })
}

pub(crate) fn write_manifest(manifest: &RunManifest, out_dir: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifests serialize");
    write_file(out_dir, "manifest.json", text.as_bytes()).map(|_| ())
}
