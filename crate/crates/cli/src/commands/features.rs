use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

use segrisk::features::{extract_feature_vector, split_fragments, worst_grade, Connectivity, RiskCategory, SlideFeatureVector};
use segrisk::tensor::{read_pgm, NUM_TISSUE_CLASSES};
use segrisk::Exec;

use crate::args::{ConnectivityArg, FeaturesArgs};
use crate::files::{column, create_dir, list_files, read_csv, stem, write_manifest, write_text};

pub const SLIDE_ROW: &str = "slide";
pub const FEATURES_FILE: &str = "features.csv";
pub const SLIDES_FILE: &str = "slides.csv";
pub const SLIDE_LABELS_FILE: &str = "slide_labels.csv";

pub fn header() -> String {
    let hist: Vec<String> = (0..NUM_TISSUE_CLASSES).map(|k| format!("h{k}")).collect();
    format!("slide_id,frag_id,{},n_clusters,mean_area,min_area,max_area\n", hist.join(","))
}

fn row(slide: &str, frag: &str, f: &SlideFeatureVector) -> String {
    let hist: Vec<String> = f.histogram.iter().map(|h| format!("{h:.6}")).collect();
    format!(
        "{slide},{frag},{},{},{:.6},{:.6},{:.6}\n",
        hist.join(","),
        f.tumor_cluster_count,
        f.tumor_cluster_mean_area,
        f.tumor_cluster_min_area,
        f.tumor_cluster_max_area
    )
}

struct SlideRows {
    fragments: Vec<SlideFeatureVector>,
    slide: SlideFeatureVector,
}

fn slide_rows(path: &Path, pixel_area: f64, connectivity: Connectivity) -> Result<SlideRows> {
    let map = read_pgm(path)?;
    let fragments = split_fragments(&map)
        .iter()
        .map(|f| extract_feature_vector(&f.crop(&map), pixel_area, connectivity))
        .collect::<segrisk::Result<Vec<_>>>()?;
    Ok(SlideRows { fragments, slide: extract_feature_vector(&map, pixel_area, connectivity)? })
}

/// Worst fragment grade per slide from a `slide_id,frag_id,grade` CSV.
fn slide_labels(path: &Path, fragment_counts: &BTreeMap<String, usize>) -> Result<String> {
    let (header, rows) = read_csv(path)?;
    let (s, f, g) = (column(&header, "slide_id", path)?, column(&header, "frag_id", path)?, column(&header, "grade", path)?);
    let mut grades: BTreeMap<String, BTreeMap<usize, RiskCategory>> = BTreeMap::new();
    for r in &rows {
        let frag: usize = r[f].parse().with_context(|| format!("bad frag_id {:?} in {}", r[f], path.display()))?;
        let grade: RiskCategory = r[g].parse()?;
        grades.entry(r[s].clone()).or_default().insert(frag, grade);
    }
    let mut offenders = Vec::new();
    for (slide, &n) in fragment_counts {
        let ok = grades.get(slide).is_some_and(|m| m.len() == n && m.keys().copied().eq(0..n));
        if !ok {
            offenders.push(slide.clone());
        }
    }
    offenders.extend(grades.keys().filter(|s| !fragment_counts.contains_key(*s)).cloned());
    if !offenders.is_empty() {
        bail!("fragment labels do not match the extracted fragments for: {}", offenders.join(", "));
    }
    let mut out = String::from("slide_id,grade\n");
    for (slide, m) in &grades {
        let worst = worst_grade(&m.values().copied().collect::<Vec<_>>())?;
        out.push_str(&format!("{slide},{}\n", worst.token()));
    }
    Ok(out)
}

pub fn run(args: &FeaturesArgs, exec: Exec) -> Result<()> {
    if !(args.pixel_area > 0.0 && args.pixel_area.is_finite()) {
        bail!("--pixel-area must be positive");
    }
    let connectivity = match args.connectivity {
        ConnectivityArg::Four => Connectivity::Four,
        ConnectivityArg::Eight => Connectivity::Eight,
    };
    let maps = list_files(&args.segmaps, ".pgm")?;
    if maps.is_empty() {
        bail!("no segmentation maps (*.pgm) in {}", args.segmaps.display());
    }
    create_dir(&args.out)?;
    let results = exec.map(&maps, |p| slide_rows(p, args.pixel_area, connectivity));

    let mut all = header();
    let mut slides = header();
    let mut counts = BTreeMap::new();
    let mut failures = Vec::new();
    for (path, result) in maps.iter().zip(results) {
        let id = stem(path, ".pgm");
        match result {
            Ok(rows) => {
                for (i, f) in rows.fragments.iter().enumerate() {
                    all.push_str(&row(&id, &i.to_string(), f));
                }
                let slide_row = row(&id, SLIDE_ROW, &rows.slide);
                all.push_str(&slide_row);
                slides.push_str(&slide_row);
                counts.insert(id, rows.fragments.len());
            }
            Err(e) => {
                eprintln!("error: {}: {e:#}", path.display());
                failures.push(path.display().to_string());
            }
        }
    }
    write_text(&args.out.join(FEATURES_FILE), &all)?;
    write_text(&args.out.join(SLIDES_FILE), &slides)?;
    if let Some(labels) = &args.fragment_labels {
        write_text(&args.out.join(SLIDE_LABELS_FILE), &slide_labels(labels, &counts)?)?;
    }
    let mut inputs: Vec<&Path> = vec![&args.segmaps];
    inputs.extend(args.fragment_labels.as_deref());
    write_manifest(&args.out, "features", args, &[], &inputs)?;
    if !failures.is_empty() {
        bail!("{} of {} maps could not be processed: {}", failures.len(), maps.len(), failures.join(", "));
    }
    Ok(())
}
