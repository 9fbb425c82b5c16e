use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use segrisk::features::{RiskCategory, FEATURE_DIM};
use segrisk::forest::{cross_validate, CvConfig, CvReport};
use segrisk::Exec;

use crate::args::ClassifyArgs;
use crate::commands::features::SLIDE_ROW;
use crate::files::{column, create_dir, read_csv, write_json, write_manifest, write_text};

pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Serialize)]
struct ClassifyReport<'a> {
    slide_ids: &'a [String],
    #[serde(flatten)]
    cv: &'a CvReport,
}

/// Slide-level feature vectors keyed by slide id.
fn read_features(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let (header, rows) = read_csv(path)?;
    let (s, f) = (column(&header, "slide_id", path)?, column(&header, "frag_id", path)?);
    if header.len() != FEATURE_DIM + 2 {
        bail!("{} has {} columns, expected {}", path.display(), header.len(), FEATURE_DIM + 2);
    }
    let mut out = BTreeMap::new();
    for r in rows.iter().filter(|r| r[f] == SLIDE_ROW) {
        let values = r
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != s && *i != f)
            .map(|(_, v)| v.parse::<f64>().with_context(|| format!("bad feature value {v:?} for slide {}", r[s])))
            .collect::<Result<Vec<_>>>()?;
        if out.insert(r[s].clone(), values).is_some() {
            bail!("slide {} appears twice in {}", r[s], path.display());
        }
    }
    Ok(out)
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, RiskCategory>> {
    let (header, rows) = read_csv(path)?;
    let (s, g) = (column(&header, "slide_id", path)?, column(&header, "grade", path)?);
    let mut out = BTreeMap::new();
    for r in &rows {
        let grade = r[g].parse().with_context(|| format!("bad grade for slide {}", r[s]))?;
        if out.insert(r[s].clone(), grade).is_some() {
            bail!("slide {} labelled twice in {}", r[s], path.display());
        }
    }
    Ok(out)
}

pub fn run(args: &ClassifyArgs, exec: Exec) -> Result<()> {
    let features = read_features(&args.features)?;
    let labels = read_labels(&args.labels)?;
    let missing_labels: Vec<&str> = features.keys().filter(|k| !labels.contains_key(*k)).map(String::as_str).collect();
    let missing_features: Vec<&str> = labels.keys().filter(|k| !features.contains_key(*k)).map(String::as_str).collect();
    if !missing_labels.is_empty() || !missing_features.is_empty() {
        bail!(
            "features and labels do not align; without label: [{}]; without features: [{}]",
            missing_labels.join(", "),
            missing_features.join(", ")
        );
    }
    let ids: Vec<String> = features.keys().cloned().collect();
    let x: Vec<Vec<f64>> = ids.iter().map(|id| features[id].clone()).collect();
    let y: Vec<RiskCategory> = ids.iter().map(|id| labels[id]).collect();
    let config = CvConfig { folds: args.folds, seed: args.seed, n_trees: args.trees };
    let report = cross_validate(&x, &y, &config, exec)?;

    create_dir(&args.out)?;
    write_json(&args.out.join(REPORT_FILE), &ClassifyReport { slide_ids: &ids, cv: &report })?;
    let summary = report.summary();
    write_text(&args.out.join(SUMMARY_FILE), &summary)?;
    print!("{summary}");
    write_manifest(&args.out, "classify", args, &[("seed", args.seed)], &[&args.features, &args.labels])
}
