//! The seven subcommands. Each validates everything it can up front, writes
//! an echo of the effective configuration beside its outputs, and keeps its
//! outputs deterministic for a fixed (config, seed).

use std::io::Write;
use std::path::{Path, PathBuf};

use frs_core::data::{
    parse_labels, parse_manifest, read_ppm, serialize_labels, serialize_manifest, split_dataset,
    stats_report, synth_generate, AnnotatedImage, ClassCatalog, ManifestEntry, SynthSceneSpec,
};
use frs_core::detector::{
    evaluate_model, load_params_into, save_params, train, FrsNanoConfig, NanoParams, Sample,
    TrainConfig, UpsamplerKind,
};
use frs_core::error::{Error, Result};
use frs_core::verify;

use crate::config::RunConfig;

pub struct CommonArgs {
    pub config: RunConfig,
    pub out_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub seeds: Vec<u64>,
}

fn out_dir(args: &CommonArgs) -> Result<&Path> {
    args.out_dir
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --out DIR".into()))
}

fn write_echo(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.echo"), cfg.echo_text())?;
    Ok(())
}

// ---------------------------------------------------------------------------

/// Run every gradient check and oracle comparison; exit zero only if all
/// pass and print one report line per check.
pub fn cmd_selftest() -> Result<()> {
    let outcome = verify::selftest(verify::DEFAULT_INSTANCES)?;
    for r in &outcome.grad_reports {
        println!("{r}");
    }
    for r in &outcome.oracle_reports {
        println!("{r}");
    }
    if outcome.pass() {
        println!("selftest: all checks passed");
        Ok(())
    } else {
        let first = outcome.first_failure().unwrap_or_default();
        Err(Error::invalid("selftest", format!("first failing check: {first}")))
    }
}

// ---------------------------------------------------------------------------

fn scene_spec(cfg: &RunConfig, seed: u64) -> Result<SynthSceneSpec> {
    Ok(SynthSceneSpec {
        image_size: cfg.get_usize("data.image_size")?,
        small_targets: cfg.get_usize("data.small_targets")?,
        occluded_pairs: cfg.get_usize("data.occluded_pairs")?,
        smoke_blobs: cfg.get_usize("data.smoke_blobs")?,
        noise_level: cfg.get_f64("data.noise_level")?,
        num_classes: cfg.get_usize("model.classes")?,
        seed,
    })
}

/// Generate `data.count` scenes to disk: images/, labels/, manifest.txt.
pub fn cmd_synth(args: &CommonArgs) -> Result<()> {
    let dir = out_dir(args)?;
    let count = args.config.get_usize("data.count")?;
    let base_seed = args.config.get_u64("train.seed")?;

    write_echo(dir, &args.config)?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;

    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let spec = scene_spec(&args.config, base_seed * 1_000_000 + i as u64)?;
        let (image, ann) = synth_generate(&spec)?;
        let image_path = format!("images/img_{i:05}.ppm");
        let label_path = format!("labels/img_{i:05}.txt");
        frs_core::data::write_ppm(&dir.join(&image_path), &image)?;
        std::fs::write(dir.join(&label_path), serialize_labels(&ann.boxes))?;
        entries.push(ManifestEntry {
            image_path,
            label_path,
        });
    }
    std::fs::write(dir.join("manifest.txt"), serialize_manifest(&entries))?;
    println!("wrote {count} scenes under {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------

/// Split a manifest 8:1:1 into train.txt / val.txt / test.txt.
pub fn cmd_split(args: &CommonArgs) -> Result<()> {
    let dir = out_dir(args)?;
    let manifest_path = args
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Config("split needs --manifest PATH".into()))?;
    let entries = parse_manifest(&std::fs::read_to_string(manifest_path)?)?;
    let seed = args.config.get_u64("train.seed")?;
    let (train_e, val_e, test_e) = split_dataset(&entries, seed)?;

    write_echo(dir, &args.config)?;
    std::fs::write(dir.join("train.txt"), serialize_manifest(&train_e))?;
    std::fs::write(dir.join("val.txt"), serialize_manifest(&val_e))?;
    std::fs::write(dir.join("test.txt"), serialize_manifest(&test_e))?;
    println!(
        "split {} entries into {}/{}/{}",
        entries.len(),
        train_e.len(),
        val_e.len(),
        test_e.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn load_annotations(root: &Path, entries: &[ManifestEntry]) -> Result<Vec<AnnotatedImage>> {
    entries
        .iter()
        .map(|e| {
            let (width, height) = frs_core::data::ppm_dimensions(&root.join(&e.image_path))?;
            let boxes = parse_labels(&std::fs::read_to_string(root.join(&e.label_path))?)?;
            Ok(AnnotatedImage {
                id: e.image_path.clone(),
                width,
                height,
                boxes,
            })
        })
        .collect()
}

/// Per-class counts and the size-bucket histogram for a manifest.
pub fn cmd_stats(args: &CommonArgs) -> Result<()> {
    let manifest_path = args
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Config("stats needs --manifest PATH".into()))?;
    let root = PathBuf::from(args.config.get("data.root"));
    let entries = parse_manifest(&std::fs::read_to_string(manifest_path)?)?;
    let annotations = load_annotations(&root, &entries)?;
    let classes = args.config.get_usize("model.classes")?;
    let report = stats_report(&annotations, classes);
    let catalog = if classes == 8 {
        ClassCatalog::default_catalog()
    } else {
        ClassCatalog::new((0..classes).map(|i| format!("class_{i}")).collect())?
    };
    let text = report.to_text(&catalog);
    print!("{text}");
    if let Some(dir) = args.out_dir.as_deref() {
        write_echo(dir, &args.config)?;
        std::fs::write(dir.join("stats.txt"), text)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn load_samples(root: &Path, manifest_path: &Path) -> Result<Vec<Sample>> {
    let entries = parse_manifest(&std::fs::read_to_string(manifest_path)?)?;
    entries
        .iter()
        .map(|e| {
            let image = read_ppm(&root.join(&e.image_path))?;
            let boxes = parse_labels(&std::fs::read_to_string(root.join(&e.label_path))?)?;
            Ok(Sample { image, boxes })
        })
        .collect()
}

/// Train per the configuration: per-epoch loss/mAP log, a last checkpoint
/// after every epoch, and the best checkpoint by validation mAP50.
pub fn cmd_train(args: &CommonArgs) -> Result<()> {
    let dir = out_dir(args)?;
    let cfg = args.config.model_config()?;
    let tc = args.config.train_config()?;
    let root = PathBuf::from(args.config.get("data.root"));

    let train_manifest = args.config.get("data.train_manifest");
    if train_manifest.is_empty() {
        return Err(Error::Config("train needs data.train_manifest".into()));
    }
    let train_set = load_samples(&root, &root.join(train_manifest))?;
    let val_manifest = args.config.get("data.val_manifest");
    let val_set = if val_manifest.is_empty() {
        Vec::new()
    } else {
        load_samples(&root, &root.join(val_manifest))?
    };

    write_echo(dir, &args.config)?;
    let log_path = dir.join("loss.log");
    let mut log_file = std::fs::File::create(&log_path)?;
    let last_path = dir.join("last.ckpt");

    let result = train(&cfg, &tc, &train_set, &val_set, |entry, params| {
        // incremental log + refreshed last checkpoint keep interrupted runs
        // resumable
        writeln!(log_file, "{}", entry.to_line()).expect("log write");
        log_file.flush().expect("log flush");
        save_params(params, &last_path).expect("checkpoint write");
        println!("{}", entry.to_line());
    })?;

    save_params(&result.params, &last_path)?;
    save_params(&result.best_params, &dir.join("best.ckpt"))?;
    println!(
        "trained {} epochs, best val mAP50 {:.6}",
        tc.epochs, result.best_map50
    );
    Ok(())
}

// ---------------------------------------------------------------------------

/// Evaluate a checkpoint over a manifest and write the report files.
pub fn cmd_eval(args: &CommonArgs) -> Result<()> {
    let dir = out_dir(args)?;
    let cfg = args.config.model_config()?;
    let ckpt = args
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("eval needs --checkpoint PATH".into()))?;
    let manifest_path = args
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Config("eval needs --manifest PATH".into()))?;
    let root = PathBuf::from(args.config.get("data.root"));
    let set = load_samples(&root, manifest_path)?;
    if set.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }

    let mut params = NanoParams::init(&cfg, 0)?;
    load_params_into(&mut params, ckpt)?;
    let report = evaluate_model(
        &cfg,
        &params,
        &set,
        args.config.get_f64("eval.conf_threshold")?,
        args.config.get_f64("eval.iou_threshold")?,
    )?;

    write_echo(dir, &args.config)?;
    std::fs::write(dir.join("report.txt"), report.to_table())?;
    std::fs::write(dir.join("report.kv"), report.to_kv_text())?;
    print!("{}", report.to_table());
    Ok(())
}

// ---------------------------------------------------------------------------

struct AblationRow {
    name: &'static str,
    per_seed_map50: Vec<f64>,
    map50: f64,
    map50_95: f64,
    precision: f64,
    recall: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    v[v.len() / 2]
}

/// Train the four configurations (baseline, attention, dynamic upsampling,
/// both) across the seed list and emit a medians table.
pub fn cmd_ablate(args: &CommonArgs) -> Result<()> {
    let dir = out_dir(args)?;
    let seeds = if args.seeds.is_empty() {
        vec![11, 22, 33, 44, 55]
    } else {
        args.seeds.clone()
    };
    if seeds.len() < 2 {
        eprintln!("warning: fewer than 2 seeds; medians will be single measurements");
    }
    let tc_base = args.config.train_config()?;
    let base_cfg = args.config.model_config()?;
    let n_train = args.config.get_usize("data.train_images")?;
    let n_val = args.config.get_usize("data.val_images")?;
    let conf_thr = args.config.get_f64("eval.conf_threshold")?;
    let iou_thr = args.config.get_f64("eval.iou_threshold")?;

    write_echo(dir, &args.config)?;

    let variants: [(&'static str, bool, bool); 4] = [
        ("baseline", false, false),
        ("+mcea", true, false),
        ("+dysample", false, true),
        ("+mcea+dysample", true, true),
    ];
    let mut rows: Vec<AblationRow> = Vec::new();
    let mut per_seed_scores: Vec<Vec<(f64, f64, f64, f64)>> = vec![Vec::new(); variants.len()];

    for &seed in &seeds {
        let make = |base: u64, n: usize| -> Result<Vec<Sample>> {
            (0..n)
                .map(|i| {
                    let spec = scene_spec(&args.config, base + i as u64)?;
                    let (image, ann) = synth_generate(&spec)?;
                    Ok(Sample {
                        image,
                        boxes: ann.boxes,
                    })
                })
                .collect()
        };
        let train_set = make(seed * 1_000_000, n_train)?;
        let val_set = make(seed * 1_000_000 + 500_000, n_val)?;

        for (vi, (name, use_mcea, dysample)) in variants.iter().enumerate() {
            let cfg = FrsNanoConfig {
                use_mcea: *use_mcea,
                upsampler: if *dysample {
                    UpsamplerKind::Dysample
                } else {
                    UpsamplerKind::FixedBilinear
                },
                ..base_cfg.clone()
            };
            let tc = TrainConfig {
                seed,
                ..tc_base.clone()
            };
            let result = train(&cfg, &tc, &train_set, &val_set, |_, _| {})?;
            let report = evaluate_model(&cfg, &result.best_params, &val_set, conf_thr, iou_thr)?;
            println!(
                "seed {seed} {name:<16} mAP50 {:.4} mAP50-95 {:.4} P {:.4} R {:.4}",
                report.map50, report.map50_95, report.precision, report.recall
            );
            per_seed_scores[vi].push((
                report.map50,
                report.map50_95,
                report.precision,
                report.recall,
            ));
        }
    }

    for (vi, (name, _, _)) in variants.iter().enumerate() {
        let scores = &per_seed_scores[vi];
        rows.push(AblationRow {
            name,
            per_seed_map50: scores.iter().map(|s| s.0).collect(),
            map50: median(&scores.iter().map(|s| s.0).collect::<Vec<_>>()),
            map50_95: median(&scores.iter().map(|s| s.1).collect::<Vec<_>>()),
            precision: median(&scores.iter().map(|s| s.2).collect::<Vec<_>>()),
            recall: median(&scores.iter().map(|s| s.3).collect::<Vec<_>>()),
        });
    }

    let mut table = String::new();
    table.push_str(&format!(
        "{:<16} {:>8} {:>9} {:>9} {:>8} {:>8}  per-seed mAP50\n",
        "variant", "mAP50", "mAP50-95", "precision", "recall", "delta"
    ));
    let baseline_map50 = rows[0].map50;
    for row in &rows {
        let per_seed: Vec<String> = row.per_seed_map50.iter().map(|v| format!("{v:.4}")).collect();
        table.push_str(&format!(
            "{:<16} {:>8.4} {:>9.4} {:>9.4} {:>8.4} {:>+8.4}  [{}]\n",
            row.name,
            row.map50,
            row.map50_95,
            row.precision,
            row.recall,
            row.map50 - baseline_map50,
            per_seed.join(", ")
        ));
    }
    print!("{table}");
    std::fs::write(dir.join("ablation.txt"), &table)?;

    let mut kv = String::new();
    for row in &rows {
        kv.push_str(&format!("{},median_mAP50,{:.6}\n", row.name, row.map50));
        kv.push_str(&format!("{},median_mAP50-95,{:.6}\n", row.name, row.map50_95));
        kv.push_str(&format!("{},median_precision,{:.6}\n", row.name, row.precision));
        kv.push_str(&format!("{},median_recall,{:.6}\n", row.name, row.recall));
        kv.push_str(&format!(
            "{},median_delta_mAP50,{:.6}\n",
            row.name,
            row.map50 - baseline_map50
        ));
    }
    std::fs::write(dir.join("ablation.kv"), kv)?;
    Ok(())
}
