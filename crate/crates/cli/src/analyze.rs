use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use sparseattn::metrics::pearson;
use sparseattn::Error;

use crate::artifacts::{self, fmt_g, RunSummary};
use crate::Failure;

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Run directories written by `train`.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Directory for the reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Point {
    run: String,
    config: String,
    target_sparsity: f64,
    mean_sparsity: f64,
    val_accuracy: f64,
    mean_entropy: f64,
}

#[derive(Serialize)]
struct Correlation {
    x: &'static str,
    y: &'static str,
    points: usize,
    r: Option<f64>,
    reason: Option<String>,
}

#[derive(Serialize)]
struct Analysis {
    points: Vec<Point>,
    correlation: Correlation,
    scope: &'static str,
}

const SCOPE: &str = "Desk-scale measurements of the runs listed above. Accuracies and attention \
statistics of full-size pretrained encoders fine-tuned on SST-2 are not reproduced here, and no \
ordering between configurations is asserted. Adaptive per-layer targets are a linear ramp around \
the mean target, a stand-in for per-layer values that were never published.";

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<std::fs::File>, Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    w.write_record(header)
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    Ok(w)
}

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), Failure> {
    let err = |e: &dyn std::fmt::Display| Failure::data(format!("{}: {e}", path.display()));
    let mut w = csv_writer(path, header)?;
    for row in rows {
        w.write_record(row).map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

pub fn run(args: AnalyzeArgs) -> Result<(), Failure> {
    let mut runs = Vec::new();
    for dir in &args.runs {
        let summary: RunSummary = artifacts::read_json(&dir.join(artifacts::SUMMARY))?;
        runs.push((run_name(dir), summary));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::data(format!("{}: {e}", args.out.display())))?;

    let points: Vec<Point> = runs
        .iter()
        .map(|(run, s)| Point {
            run: run.clone(),
            config: s.config_name.clone(),
            target_sparsity: s.target_mean,
            mean_sparsity: s.mean_sparsity,
            val_accuracy: s.final_val_accuracy,
            mean_entropy: s.mean_entropy,
        })
        .collect();

    write_rows(
        &args.out.join("analysis.csv"),
        &[
            "run",
            "config",
            "target_sparsity",
            "mean_sparsity",
            "val_accuracy",
            "mean_entropy",
        ],
        points
            .iter()
            .map(|p| {
                vec![
                    p.run.clone(),
                    p.config.clone(),
                    fmt_g(p.target_sparsity),
                    fmt_g(p.mean_sparsity),
                    fmt_g(p.val_accuracy),
                    fmt_g(p.mean_entropy),
                ]
            })
            .collect(),
    )?;

    let mut layer_rows = Vec::new();
    let mut entropy_rows = Vec::new();
    for (run, s) in &runs {
        let cfg = &s.config_name;
        for (l, achieved) in s.per_layer_sparsity.iter().enumerate() {
            let target = s.target_per_layer.get(l).copied().unwrap_or(f64::NAN);
            layer_rows.push(vec![
                run.clone(),
                cfg.clone(),
                l.to_string(),
                fmt_g(target),
                fmt_g(*achieved),
            ]);
        }
        entropy_rows.push(vec![
            run.clone(),
            cfg.clone(),
            "model".into(),
            String::new(),
            String::new(),
            fmt_g(s.mean_entropy),
        ]);
        for (l, e) in s.per_layer_entropy.iter().enumerate() {
            entropy_rows.push(vec![
                run.clone(),
                cfg.clone(),
                "layer".into(),
                l.to_string(),
                String::new(),
                fmt_g(*e),
            ]);
        }
        for (l, heads) in s.per_head_entropy.iter().enumerate() {
            for (h, e) in heads.iter().enumerate() {
                entropy_rows.push(vec![
                    run.clone(),
                    cfg.clone(),
                    "head".into(),
                    l.to_string(),
                    h.to_string(),
                    fmt_g(*e),
                ]);
            }
        }
    }
    write_rows(
        &args.out.join("layer_sparsity.csv"),
        &["run", "config", "layer", "target", "achieved"],
        layer_rows,
    )?;
    write_rows(
        &args.out.join("entropy.csv"),
        &["run", "config", "level", "layer", "head", "entropy_nats"],
        entropy_rows,
    )?;

    let xs: Vec<f64> = points.iter().map(|p| p.mean_sparsity).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.val_accuracy).collect();
    let (r, reason) = match pearson(&xs, &ys) {
        Ok(c) => (Some(c.r), None),
        Err(Error::UndefinedCorrelation(why)) => (None, Some(why)),
        Err(e) => return Err(e.into()),
    };
    match (r, &reason) {
        (Some(r), _) => println!(
            "pearson r(mean_sparsity, val_accuracy) = {r:.6} over {} runs",
            points.len()
        ),
        (None, Some(why)) => println!("correlation omitted: {why}"),
        _ => {}
    }
    let analysis = Analysis {
        correlation: Correlation {
            x: "mean_sparsity",
            y: "val_accuracy",
            points: points.len(),
            r,
            reason,
        },
        points,
        scope: SCOPE,
    };
    artifacts::write_json(&args.out.join("analysis.json"), &analysis)
}
