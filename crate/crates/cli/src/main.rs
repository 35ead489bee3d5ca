//! `mlh`: descriptor computation, dataset building, training and checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use mlh_core::dataset::{build_from_directory, generate_synthetic, Split, SyntheticSpec};
use mlh_core::descriptor::{mlh_from_normalized, orient_and_normalize, ViewDirection};
use mlh_core::format::{
    load_checkpoint, load_dataset, load_descriptor, save_checkpoint, save_dataset,
    save_descriptor,
};
use mlh_core::image::export_layer_image;
use mlh_core::mesh::load_mesh;
use mlh_core::multiview::MergeVariant;
use mlh_core::nn::SgdConfig;
use mlh_core::sampling::{required_point_count, sample_surface, SamplingConfig};
use mlh_core::train::{evaluate, train_with_progress, TrainConfig};
use mlh_core::voxel::{consistency_check, voxelize_points};
use mlh_core::MlhDescriptor;

#[derive(Parser)]
#[command(name = "mlh", version, about = "Multi-layered height-map descriptors and multi-view classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    X,
    Y,
    Z,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the descriptor of one mesh.
    Compute {
        mesh: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        view: ViewArg,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; with `--view all`, `<stem>_x/_y/_z.<ext>` next to it.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Build a dataset from a `class/{train,test}/*.off` tree.
    Batch {
        dir: PathBuf,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Build a dataset of jittered boxes, ellipsoids, cylinders and cones.
    GenSynthetic {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train a multi-view classifier.
    Train {
        dataset: PathBuf,
        #[arg(long, default_value = "ind-cat")]
        merge: MergeVariant,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 10)]
        decay_every: usize,
        #[arg(long, default_value_t = 0.1)]
        decay_factor: f64,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        hidden: usize,
        /// Initialize first-layer filters by expanding 3-channel ones.
        #[arg(long)]
        expand_init: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Export one descriptor layer as a PGM or PNG image.
    Render {
        descriptor: PathBuf,
        /// 1-based layer.
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Check descriptors of a mesh against the voxel oracle (exit 0 iff pass).
    Check {
        mesh: PathBuf,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Oracle resolution; defaults to N.
        #[arg(long)]
        r: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn view_path(out: &Path, view: ViewDirection) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    let ext = out
        .extension()
        .map(|e| e.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mlhd".into());
    out.with_file_name(format!("{stem}_{}.{ext}", view.name()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn compute(mesh: &Path, view: ViewArg, n: usize, k: usize, seed: u64, out: &Path) -> Result<()> {
    let mesh = load_mesh(mesh)?;
    let config = SamplingConfig::with_seed(seed);
    let count = required_point_count(n, k, &config)?;
    let cloud = sample_surface(&mesh, count, seed)?;
    let views: Vec<ViewDirection> = match view {
        ViewArg::X => vec![ViewDirection::PosX],
        ViewArg::Y => vec![ViewDirection::PosY],
        ViewArg::Z => vec![ViewDirection::PosZ],
        ViewArg::All => ViewDirection::CANONICAL.to_vec(),
    };
    for v in views {
        let normalized = orient_and_normalize(&cloud, v)?;
        let desc = mlh_from_normalized(&normalized, n, k, v)?;
        let path = match view {
            ViewArg::All => view_path(out, v),
            _ => out.to_path_buf(),
        };
        save_descriptor(&path, &desc)?;
        println!(
            "{}: view {} N={n} k={k}, {} of {} bins occupied",
            path.display(),
            v.name(),
            desc.occupied_bins().len(),
            n * n
        );
    }
    Ok(())
}

fn check(mesh: &Path, n: usize, k: usize, r: usize, seed: u64) -> Result<bool> {
    let mesh = load_mesh(mesh)?;
    let config = SamplingConfig::with_seed(seed);
    let count = required_point_count(n, k, &config)?;
    let cloud = sample_surface(&mesh, count, seed)?;
    let mut views = Vec::new();
    let mut passed = true;
    for v in ViewDirection::CANONICAL {
        let normalized = orient_and_normalize(&cloud, v)?;
        let desc: MlhDescriptor = mlh_from_normalized(&normalized, n, k, v)?;
        let grid = voxelize_points(&normalized, r)?;
        let report = consistency_check(&desc, &grid)?;
        passed &= report.passed();
        let sample: Vec<_> = report
            .violations
            .iter()
            .take(20)
            .map(|viol| json!({"p": viol.p, "q": viol.q, "layer": viol.layer, "kind": format!("{:?}", viol.kind)}))
            .collect();
        views.push(json!({
            "view": v.name(),
            "passed": report.passed(),
            "violations": report.violations.len(),
            "first_violations": sample,
            "max_deviation": report.max_deviation,
            "tolerance": report.tolerance(),
            "occupied_voxels": grid.occupied_count(),
        }));
    }
    let out = json!({"n": n, "k": k, "r": r, "seed": seed, "points": count, "passed": passed, "views": views});
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(passed)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Compute {
            mesh,
            view,
            n,
            k,
            seed,
            output,
        } => compute(&mesh, view, n, k, seed, &output)?,
        Command::Batch {
            dir,
            n,
            k,
            seed,
            output,
        } => {
            let ds = build_from_directory(&dir, n, k, seed)?;
            save_dataset(&output, &ds)?;
            println!(
                "{}: {} records, classes {:?}",
                output.display(),
                ds.records.len(),
                ds.class_names
            );
        }
        Command::GenSynthetic {
            classes,
            per_class,
            n,
            k,
            seed,
            output,
        } => {
            let ds = generate_synthetic(&SyntheticSpec {
                classes,
                per_class,
                n,
                k,
                seed,
            })?;
            save_dataset(&output, &ds)?;
            println!("{}: {} records", output.display(), ds.records.len());
        }
        Command::Train {
            dataset,
            merge,
            epochs,
            batch,
            lr,
            momentum,
            decay_every,
            decay_factor,
            width,
            hidden,
            expand_init,
            seed,
            output,
            report,
        } => {
            let ds = load_dataset(&dataset)?;
            let config = TrainConfig {
                sgd: SgdConfig {
                    learning_rate: lr,
                    momentum,
                    epochs,
                    batch_size: batch,
                    decay_every,
                    decay_factor,
                },
                width,
                hidden,
                expand_init,
                ..TrainConfig::new(merge, seed)
            };
            let (rep, net) = train_with_progress(&ds, &config, |s| {
                eprintln!(
                    "epoch {:>3}  lr {:.2e}  batch loss {:.5}  train loss {:.5}  train acc {:.4}  test acc {:.4}",
                    s.epoch + 1,
                    s.learning_rate,
                    s.batch_loss,
                    s.train_loss,
                    s.train_accuracy,
                    s.test_accuracy
                );
            })?;
            save_checkpoint(&output, &net)?;
            write_json(&report, &serde_json::to_value(&rep)?)?;
            println!("final test accuracy {}", rep.final_test_accuracy);
        }
        Command::Eval {
            checkpoint,
            dataset,
            report,
        } => {
            let mut net = load_checkpoint::<f32>(&checkpoint)?;
            let ds = load_dataset(&dataset)?;
            let eval = evaluate(&mut net, &ds, Split::Test)?;
            let out = json!({
                "classes": ds.class_names,
                "split": Split::Test,
                "count": eval.count,
                "loss": eval.loss,
                "accuracy": eval.accuracy,
                "confusion": eval.confusion,
            });
            write_json(&report, &out)?;
            println!("test accuracy {}", eval.accuracy);
        }
        Command::Render {
            descriptor,
            layer,
            output,
        } => {
            let desc = load_descriptor(&descriptor)?;
            export_layer_image(&desc, layer)?.save(&output)?;
            println!("{}", output.display());
        }
        Command::Check { mesh, n, k, r, seed } => {
            let r = r.unwrap_or(n);
            if r == 0 {
                bail!("oracle resolution must be >= 1");
            }
            if !check(&mesh, n, k, r, seed)? {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
