use std::path::Path;

use anyhow::{bail, Context, Result};

use segrisk::features::split_fragments;
use segrisk::synth::{gen_cohort, gen_slide, gen_tile, tile_specs, TileSpec, DEFAULT_MIX, SIX_CLASS_MIX};
use segrisk::tensor::{write_pgm, NUM_TISSUE_CLASSES};
use segrisk::train::Tile;
use segrisk::Exec;

use crate::args::GenSynthArgs;
use crate::files::{create_dir, write_manifest, write_text, write_tile};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn parse_mix(text: &str) -> Result<Vec<f64>> {
    match text {
        "six" => Ok(SIX_CLASS_MIX.to_vec()),
        "all" => Ok(DEFAULT_MIX.to_vec()),
        _ => {
            let weights = text
                .split(',')
                .map(|w| w.trim().parse::<f64>().with_context(|| format!("bad mix weight {w:?}")))
                .collect::<Result<Vec<_>>>()?;
            if weights.len() != NUM_TISSUE_CLASSES {
                bail!("--mix needs {NUM_TISSUE_CLASSES} weights, got {}", weights.len());
            }
            Ok(weights)
        }
    }
}

fn write_tiles(dir: &Path, template: &TileSpec, n: usize, seed: u64, stream: u64, exec: Exec) -> Result<()> {
    create_dir(dir)?;
    let specs = tile_specs(template, n, seed, stream);
    let tiles = exec.map(&specs, |s| gen_tile(s).map(|(rgb, labels)| Tile { rgb, labels }));
    for (i, tile) in tiles.into_iter().enumerate() {
        write_tile(dir, &format!("tile_{i:05}"), &tile?)?;
    }
    Ok(())
}

fn write_cohort(dir: &Path, n: usize, seed: u64, exec: Exec) -> Result<()> {
    create_dir(dir)?;
    let specs = gen_cohort(n, seed);
    let slides = exec.map(&specs, gen_slide);
    let mut labels = String::from("slide_id,grade\n");
    let mut fragments = String::from("slide_id,frag_id,grade\n");
    for (i, slide) in slides.into_iter().enumerate() {
        let slide = slide?;
        let id = format!("slide_{i:04}");
        write_pgm(&slide.map, dir.join(format!("{id}.pgm")))?;
        labels.push_str(&format!("{id},{}\n", slide.grade.token()));
        // fragments are drawn in equal-width cells, left to right
        let cell = slide.map.width / slide.fragment_grades.len();
        for (f, frag) in split_fragments(&slide.map).iter().enumerate() {
            let grade = slide.fragment_grades[frag.bbox.min_col / cell];
            fragments.push_str(&format!("{id},{f},{}\n", grade.token()));
        }
    }
    write_text(&dir.join("labels.csv"), &labels)?;
    write_text(&dir.join("fragments.csv"), &fragments)
}

pub fn run(args: &GenSynthArgs, exec: Exec) -> Result<()> {
    let template = TileSpec {
        size: args.size,
        class_mix: parse_mix(&args.mix)?,
        blob_scale: args.blob_scale,
        noise: args.color_noise,
        seed: 0,
    };
    template.validate()?;
    if let Some(split) = &args.split {
        if split.len() != SPLITS.len() {
            bail!("--split takes {} counts (train,val,test), got {}", SPLITS.len(), split.len());
        }
    }
    let tile_total = args.split.as_ref().map_or(args.tiles, |s| s.iter().sum());
    if tile_total == 0 && args.cohort == 0 {
        bail!("nothing to generate: pass --tiles, --split or --cohort");
    }
    create_dir(&args.out)?;
    match &args.split {
        Some(counts) => {
            for (stream, (name, &n)) in SPLITS.iter().zip(counts).enumerate() {
                write_tiles(&args.out.join(name), &template, n, args.seed, stream as u64 + 1, exec)?;
            }
        }
        None if args.tiles > 0 => write_tiles(&args.out.join("tiles"), &template, args.tiles, args.seed, 0, exec)?,
        None => {}
    }
    if args.cohort > 0 {
        write_cohort(&args.out.join("cohort"), args.cohort, args.seed, exec)?;
    }
    write_manifest(&args.out, "gen-synth", args, &[("seed", args.seed)], &[])
}
