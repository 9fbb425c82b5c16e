//! Dataset directories, digests and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use segrisk::tensor::{read_pgm, read_tensor, write_pgm, write_tensor, Tensor};
use segrisk::train::Tile;

pub const MANIFEST: &str = "manifest.json";
const RGB_SUFFIX: &str = ".rgb.tns";
const MASK_SUFFIX: &str = ".mask.pgm";

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_tile(dir: &Path, id: &str, tile: &Tile) -> Result<()> {
    write_tensor(&Tensor::from_rgb(&tile.rgb), dir.join(format!("{id}{RGB_SUFFIX}")))?;
    write_pgm(&tile.labels, dir.join(format!("{id}{MASK_SUFFIX}")))?;
    Ok(())
}

/// Files directly inside `dir` with the given suffix, sorted by name.
pub fn list_files(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).with_context(|| format!("cannot read directory {}", dir.display()))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.is_file() && path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// File name with `suffix` removed.
pub fn stem(path: &Path, suffix: &str) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name.strip_suffix(suffix).unwrap_or(name).to_string()
}

/// All `<id>.rgb.tns` / `<id>.mask.pgm` pairs in `dir`, ordered by id.
pub fn read_tile_dir(dir: &Path) -> Result<Vec<(String, Tile)>> {
    let mut tiles = Vec::new();
    for rgb_path in list_files(dir, RGB_SUFFIX)? {
        let id = stem(&rgb_path, RGB_SUFFIX);
        let mask_path = dir.join(format!("{id}{MASK_SUFFIX}"));
        let rgb = read_tensor(&rgb_path)
            .and_then(|t| t.to_rgb())
            .with_context(|| format!("cannot read tile image {}", rgb_path.display()))?;
        let labels = read_pgm(&mask_path).with_context(|| format!("cannot read tile mask {}", mask_path.display()))?;
        if (rgb.height, rgb.width) != (labels.height, labels.width) {
            bail!("tile {id}: image {}x{} but mask {}x{}", rgb.height, rgb.width, labels.height, labels.width);
        }
        tiles.push((id, Tile { rgb, labels }));
    }
    if tiles.is_empty() {
        bail!("no tiles (*{RGB_SUFFIX}) found in {}", dir.display());
    }
    Ok(tiles)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digests of every file under `root`, keyed by `/`-separated relative path.
fn digest_tree(root: &Path, skip: Option<&Path>, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).with_context(|| format!("cannot read directory {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if Some(path.as_path()) != skip {
                let rel = path.strip_prefix(root).unwrap_or(&path);
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                out.insert(key, sha256_file(&path)?);
            }
        }
    }
    Ok(())
}

/// Digests of an input path: the file itself, or every file below a directory.
pub fn digest_input(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if path.is_dir() {
        let mut inner = BTreeMap::new();
        digest_tree(path, None, &mut inner)?;
        for (k, v) in inner {
            out.insert(format!("{}/{k}", path.display()), v);
        }
    } else {
        out.insert(path.display().to_string(), sha256_file(path)?);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a, F: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub flags: &'a F,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Writes `manifest.json` into `out_dir`, digesting `inputs` and every other
/// file under `out_dir`.
pub fn write_manifest<F: Serialize>(
    out_dir: &Path,
    command: &str,
    flags: &F,
    seeds: &[(&str, u64)],
    inputs: &[&Path],
) -> Result<()> {
    let manifest_path = out_dir.join(MANIFEST);
    let mut outputs = BTreeMap::new();
    digest_tree(out_dir, Some(&manifest_path), &mut outputs)?;
    let mut input_digests = BTreeMap::new();
    for p in inputs {
        input_digests.extend(digest_input(p)?);
    }
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        flags,
        seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        inputs: input_digests,
        outputs,
    };
    write_json(&manifest_path, &manifest)
}

/// Reads a headed CSV into rows of strings.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    let header = reader.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.with_context(|| format!("malformed CSV {}", path.display()))?;
        rows.push(record.iter().map(|s| s.trim().to_string()).collect());
    }
    Ok((header, rows))
}

pub fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .with_context(|| format!("{} has no `{name}` column", path.display()))
}
