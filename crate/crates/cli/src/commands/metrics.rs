use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use segrisk::features::{relabel_lumen, RiskCategory};
use segrisk::metrics::{confusion_matrix, dice_from_confusion, quadratic_weighted_kappa, AbsentClass, ConfusionMatrix, DiceReport};
use segrisk::tensor::{read_pgm, read_tensor, LabelMap, NUM_TISSUE_CLASSES};

use crate::args::{MetricName, MetricsArgs};
use crate::files::{column, create_dir, list_files, read_csv, write_json, write_manifest};

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum Report {
    Dice(DiceReport),
    Kappa { kappa: f64, n: usize },
}

/// Pairs `--pred` and `--ref`: two files, or two directories matched by file name.
fn mask_pairs(pred: &Path, reference: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if !pred.is_dir() {
        return Ok(vec![(pred.to_path_buf(), reference.to_path_buf())]);
    }
    let preds = list_files(pred, ".pgm")?;
    if preds.is_empty() {
        bail!("no masks (*.pgm) in {}", pred.display());
    }
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for p in preds {
        let r = reference.join(p.file_name().expect("listed files have names"));
        if r.is_file() {
            pairs.push((p, r));
        } else {
            missing.push(r.display().to_string());
        }
    }
    if !missing.is_empty() {
        bail!("missing reference masks: {}", missing.join(", "));
    }
    Ok(pairs)
}

fn dice_report(args: &MetricsArgs) -> Result<DiceReport> {
    let classes = args.classes.unwrap_or(NUM_TISSUE_CLASSES);
    let lumen_rgb = match &args.lumen_relabel {
        Some(p) => Some(read_tensor(p).and_then(|t| t.to_rgb()).with_context(|| format!("cannot read {}", p.display()))?),
        None => None,
    };
    let pairs = mask_pairs(&args.pred, &args.r#ref)?;
    if lumen_rgb.is_some() && pairs.len() != 1 {
        bail!("--lumen-relabel takes a single prediction/reference pair");
    }
    let mut total = ConfusionMatrix::new(classes);
    for (p, r) in pairs {
        let pred = read_pgm(&p).with_context(|| format!("cannot read {}", p.display()))?;
        let mut reference: LabelMap = read_pgm(&r).with_context(|| format!("cannot read {}", r.display()))?;
        if let Some(rgb) = &lumen_rgb {
            reference = relabel_lumen(rgb, &reference)?;
        }
        total.add(&confusion_matrix(&pred, &reference, classes)?);
    }
    let mode = if args.absent_zero { AbsentClass::Zero } else { AbsentClass::Exclude };
    Ok(dice_from_confusion(&total, mode)?)
}

fn read_grades(path: &Path) -> Result<BTreeMap<String, usize>> {
    let (header, rows) = read_csv(path)?;
    let id = column(&header, "id", path).or_else(|_| column(&header, "slide_id", path))?;
    let g = column(&header, "grade", path)?;
    let mut out = BTreeMap::new();
    for r in &rows {
        let value = match r[g].parse::<usize>() {
            Ok(v) => v,
            Err(_) => r[g].parse::<RiskCategory>()?.index(),
        };
        out.insert(r[id].clone(), value);
    }
    Ok(out)
}

fn kappa_report(args: &MetricsArgs) -> Result<Report> {
    let pred = read_grades(&args.pred)?;
    let reference = read_grades(&args.r#ref)?;
    let offenders: Vec<&str> = pred.keys().filter(|k| !reference.contains_key(*k)).chain(reference.keys().filter(|k| !pred.contains_key(*k))).map(String::as_str).collect();
    if !offenders.is_empty() {
        bail!("ids present in only one file: {}", offenders.join(", "));
    }
    let r: Vec<usize> = reference.values().copied().collect();
    let p: Vec<usize> = reference.keys().map(|k| pred[k]).collect();
    let categories = args.classes.unwrap_or(RiskCategory::COUNT);
    Ok(Report::Kappa { kappa: quadratic_weighted_kappa(&r, &p, categories)?, n: r.len() })
}

pub fn run(args: &MetricsArgs) -> Result<()> {
    let report = match args.metric {
        MetricName::Dice | MetricName::F1 => Report::Dice(dice_report(args)?),
        MetricName::Kappa => {
            if args.lumen_relabel.is_some() {
                bail!("--lumen-relabel applies to dice and f1 only");
            }
            kappa_report(args)?
        }
    };
    match &args.out {
        Some(dir) => {
            create_dir(dir)?;
            write_json(&dir.join("report.json"), &report)?;
            let mut inputs: Vec<&Path> = vec![&args.pred, &args.r#ref];
            inputs.extend(args.lumen_relabel.as_deref());
            write_manifest(dir, "metrics", args, &[], &inputs)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}
