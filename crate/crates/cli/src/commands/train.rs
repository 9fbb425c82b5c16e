use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use segrisk::loss::{BiTemperedParams, FocalParams, LossKind};
use segrisk::synth::{derive_seed, inject_label_noise};
use segrisk::tensor::{TissueClass, IGNORE, NUM_TISSUE_CLASSES};
use segrisk::train::{evaluate, train, EvalReport, Tile, TrainConfig, TrainLog};
use segrisk::Exec;

use crate::args::{CompareArgs, LossName, ScheduleArgs, TrainArgs};
use crate::files::{create_dir, read_tile_dir, write_json, write_manifest, write_text};

const NOISE_STREAM: u64 = 0x4E01;
pub const LOSS_ORDER: [LossName; 4] = [LossName::Cc, LossName::Focal, LossName::Bitempered, LossName::Lovasz];
pub const TABLE_FILE: &str = "table.csv";
pub const REPORT_FILE: &str = "report.json";

pub fn loss_kind(name: LossName, s: &ScheduleArgs) -> LossKind {
    match name {
        LossName::Cc => LossKind::Cc,
        LossName::Focal => LossKind::Focal(FocalParams { alpha: s.alpha, gamma: s.gamma }),
        LossName::Bitempered => LossKind::BiTempered(BiTemperedParams { t1: s.t1, t2: s.t2 }),
        LossName::Lovasz => LossKind::Lovasz,
    }
}

pub fn train_config(name: LossName, s: &ScheduleArgs) -> TrainConfig {
    TrainConfig {
        loss: loss_kind(name, s),
        initial_lr: s.lr,
        plateau_factor: s.plateau_factor,
        plateau_patience: s.plateau_patience,
        early_stop_patience: s.early_stop,
        max_epochs: s.epochs,
        iterations_per_epoch: s.iterations,
        batch_size: s.batch,
        augment: !s.no_augment,
        seed: s.seed,
    }
}

fn tiles(dir: &Path) -> Result<Vec<Tile>> {
    Ok(read_tile_dir(dir)?.into_iter().map(|(_, t)| t).collect())
}

fn save_run(dir: &Path, model: &segrisk::train::PixelScorer, log: &TrainLog) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join("model.json"), model)?;
    write_text(&dir.join("trainlog.csv"), &log.to_csv())
}

pub fn run_train(args: &TrainArgs, exec: Exec) -> Result<()> {
    let config = train_config(args.loss, &args.schedule);
    config.validate()?;
    let train_set = tiles(&args.data)?;
    let val_set = tiles(&args.val)?;
    let (model, log) = train(&train_set, &val_set, NUM_TISSUE_CLASSES, &config, exec)
        .with_context(|| format!("training with {} loss", config.loss.display_name()))?;
    save_run(&args.out, &model, &log)?;
    if let Some(best) = log.best_epoch() {
        println!(
            "{}: {} epochs, best validation loss {:.6} at epoch {} (Dice {:.4})",
            config.loss.display_name(),
            log.epochs.len(),
            best.val_loss,
            best.epoch,
            best.val_dice
        );
    }
    write_manifest(&args.out, "train", args, &[("seed", args.schedule.seed)], &[&args.data, &args.val])
}

#[derive(Debug, Serialize)]
struct LossResult {
    loss: &'static str,
    display: &'static str,
    config: TrainConfig,
    epochs_run: usize,
    best_epoch: usize,
    best_val_loss: f64,
    test_per_class: Vec<Option<f64>>,
    test_mean: f64,
}

#[derive(Debug, Serialize)]
struct DiceDelta {
    per_class: Vec<Option<f64>>,
    mean: f64,
}

#[derive(Debug, Serialize)]
struct CompareReport {
    noise: f64,
    seed: u64,
    train_tiles: usize,
    val_tiles: usize,
    test_tiles: usize,
    losses: Vec<LossResult>,
    bitempered_minus_cc: DiceDelta,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |d| format!("{d:.6}"))
}

/// Per-class rows and a final `Average` row, one column per loss.
pub fn table_csv(names: &[&str], reports: &[EvalReport]) -> String {
    let mut out = format!("class,{}\n", names.join(","));
    for class in TissueClass::ALL {
        let cells: Vec<String> = reports.iter().map(|r| cell(r.per_class[class.index()])).collect();
        out.push_str(&format!("{},{}\n", class.name(), cells.join(",")));
    }
    let means: Vec<String> = reports.iter().map(|r| format!("{:.6}", r.mean)).collect();
    out.push_str(&format!("Average,{}\n", means.join(",")));
    out
}

/// Flips the requested fraction of each training mask among the classes seen in training.
fn add_label_noise(tiles: &mut [Tile], rate: f64, seed: u64) -> Result<()> {
    let classes: Vec<u8> = tiles
        .iter()
        .flat_map(|t| t.labels.data.iter().copied())
        .filter(|&l| l != IGNORE)
        .collect::<BTreeSet<u8>>()
        .into_iter()
        .collect();
    for (i, t) in tiles.iter_mut().enumerate() {
        t.labels = inject_label_noise(&t.labels, rate, &classes, derive_seed(seed, NOISE_STREAM, i as u64))?;
    }
    Ok(())
}

pub fn run_compare(args: &CompareArgs, exec: Exec) -> Result<()> {
    let configs: Vec<TrainConfig> = LOSS_ORDER.iter().map(|&n| train_config(n, &args.schedule)).collect();
    for c in &configs {
        c.validate()?;
    }
    let mut train_set = tiles(&args.data.join("train"))?;
    let val_set = tiles(&args.data.join("val"))?;
    let test_set = tiles(&args.data.join("test"))?;
    if args.noise > 0.0 {
        add_label_noise(&mut train_set, args.noise, args.schedule.seed)?;
    }
    create_dir(&args.out)?;

    let mut results = Vec::new();
    let mut evals = Vec::new();
    for config in configs {
        let name = config.loss.display_name();
        log::info!("training with {name} loss");
        let (model, log) = train(&train_set, &val_set, NUM_TISSUE_CLASSES, &config, exec)
            .with_context(|| format!("training with {name} loss"))?;
        save_run(&args.out.join(config.loss.name()), &model, &log)?;
        let eval = evaluate(&model, &test_set, exec)?;
        let best = log.best_epoch().expect("training ran at least one epoch");
        println!("{name}: test mean Dice {:.4} after {} epochs", eval.mean, log.epochs.len());
        results.push(LossResult {
            loss: config.loss.name(),
            display: name,
            epochs_run: log.epochs.len(),
            best_epoch: best.epoch,
            best_val_loss: best.val_loss,
            test_per_class: eval.per_class.clone(),
            test_mean: eval.mean,
            config,
        });
        evals.push(eval);
    }

    let names: Vec<&str> = results.iter().map(|r| r.display).collect();
    write_text(&args.out.join(TABLE_FILE), &table_csv(&names, &evals))?;
    let (cc, bt) = (&evals[0], &evals[2]);
    let delta = DiceDelta {
        per_class: cc.per_class.iter().zip(&bt.per_class).map(|(c, b)| Some((*b)? - (*c)?)).collect(),
        mean: bt.mean - cc.mean,
    };
    println!("Bi-tempered minus CC mean Dice: {:+.4}", delta.mean);
    let report = CompareReport {
        noise: args.noise,
        seed: args.schedule.seed,
        train_tiles: train_set.len(),
        val_tiles: val_set.len(),
        test_tiles: test_set.len(),
        losses: results,
        bitempered_minus_cc: delta,
    };
    write_json(&args.out.join(REPORT_FILE), &report)?;
    write_manifest(&args.out, "compare-losses", args, &[("seed", args.schedule.seed)], &[&args.data])
}
