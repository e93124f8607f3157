//! Report emission: CSV tables, JSON significance results, and a
//! self-contained SVG accuracy plot.
//!
//! Everything here only formats numbers computed elsewhere. Output is fully
//! deterministic: fixed float precision, fixed row order, no timestamps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::pipeline::{per_class_rows, overall_rows, ExperimentReport};
use crate::scene::ClassTaxonomy;

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// `per_class.csv`: one row per (variant, IoU, class).
pub fn per_class_csv(report: &ExperimentReport, taxonomy: &ClassTaxonomy, fold: usize) -> String {
    let mut out = String::from("variant,iou,class,tp,fp,fn,tn,precision,recall,f1,accuracy,tnr\n");
    for (variant, iou, class_id, counts, m) in per_class_rows(&report.folds[fold].grid) {
        writeln!(
            out,
            "{variant},{iou},{},{},{},{},{},{},{},{},{},{}",
            taxonomy.name(class_id),
            counts.tp,
            counts.fp,
            counts.r#fn,
            counts.tn,
            fmt(m.precision),
            fmt(m.recall),
            fmt(m.f1),
            fmt(m.accuracy),
            fmt(m.tnr),
        )
        .unwrap();
    }
    out
}

/// `overall.csv`: one row per (variant, IoU); accuracy excludes TN.
pub fn overall_csv(report: &ExperimentReport, fold: usize) -> String {
    let mut out = String::from("variant,iou,tp,fp,fn,tn,precision,recall,f1,accuracy\n");
    for (variant, iou, counts, m) in overall_rows(&report.folds[fold].grid) {
        writeln!(
            out,
            "{variant},{iou},{},{},{},{},{},{},{},{}",
            counts.tp,
            counts.fp,
            counts.r#fn,
            counts.tn,
            fmt(m.precision),
            fmt(m.recall),
            fmt(m.f1),
            fmt(m.accuracy),
        )
        .unwrap();
    }
    out
}

/// `accuracy_vs_iou.csv`: the sweep table (fold 0's grid).
pub fn sweep_csv(report: &ExperimentReport, fold: usize) -> String {
    let grid = &report.folds[fold].grid;
    let mut out = String::from("iou,accuracy_image,accuracy_fused\n");
    for i in 0..grid.image.len() {
        writeln!(
            out,
            "{},{},{}",
            grid.image[i].iou,
            fmt(grid.overall_accuracy(false, i)),
            fmt(grid.overall_accuracy(true, i)),
        )
        .unwrap();
    }
    out
}

/// `train_report.csv` for one fold: epoch curves.
pub fn train_report_csv(report: &ExperimentReport, fold: usize) -> String {
    let tr = &report.folds[fold].train_report;
    let mut out = String::from("epoch,train_acc,val_acc,loss\n");
    for e in 0..tr.stopped_epoch {
        writeln!(
            out,
            "{},{},{},{}",
            e + 1,
            fmt(tr.train_accuracy[e]),
            fmt(tr.val_accuracy[e]),
            fmt(tr.train_loss[e]),
        )
        .unwrap();
    }
    out
}

/// `folds.csv`: per-fold overall accuracies per threshold for both variants,
/// with Mean and StD (population) rows.
pub fn folds_csv(report: &ExperimentReport) -> String {
    let grid_len = report.config.iou_grid.len();
    let mut header = String::from("fold");
    for &iou in &report.config.iou_grid {
        write!(header, ",image@{iou}").unwrap();
    }
    for &iou in &report.config.iou_grid {
        write!(header, ",fused@{iou}").unwrap();
    }
    let mut out = header + "\n";
    for fold in &report.folds {
        write!(out, "{}", fold.fold + 1).unwrap();
        for i in 0..grid_len {
            write!(out, ",{}", fmt(fold.grid.overall_accuracy(false, i))).unwrap();
        }
        for i in 0..grid_len {
            write!(out, ",{}", fmt(fold.grid.overall_accuracy(true, i))).unwrap();
        }
        out.push('\n');
    }
    if !report.significance.is_empty() {
        let mut mean_row = String::from("Mean");
        let mut std_row = String::from("StD");
        for row in &report.significance {
            write!(mean_row, ",{}", fmt(row.image_mean)).unwrap();
            write!(std_row, ",{}", fmt(row.image_std)).unwrap();
        }
        for row in &report.significance {
            write!(mean_row, ",{}", fmt(row.fused_mean)).unwrap();
            write!(std_row, ",{}", fmt(row.fused_std)).unwrap();
        }
        out.push_str(&mean_row);
        out.push('\n');
        out.push_str(&std_row);
        out.push('\n');
    }
    out
}

/// `ttest.json`: per-threshold significance results.
pub fn ttest_json(report: &ExperimentReport) -> Result<String> {
    #[derive(serde::Serialize)]
    struct Row<'a> {
        iou: f64,
        t: Option<f64>,
        p: Option<f64>,
        df: Option<f64>,
        mean_image: f64,
        std_image: f64,
        mean_fused: f64,
        std_fused: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        note: Option<&'a str>,
    }
    let rows: Vec<Row> = report
        .significance
        .iter()
        .map(|s| Row {
            iou: s.iou,
            t: s.ttest.map(|t| t.t),
            p: s.ttest.map(|t| t.p),
            df: s.ttest.map(|t| t.df),
            mean_image: s.image_mean,
            std_image: s.image_std,
            mean_fused: s.fused_mean,
            std_fused: s.fused_std,
            note: s.ttest.is_none().then_some("degenerate: zero pooled variance"),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&rows)? + "\n")
}

/// Accuracy-vs-IoU chart as a self-contained SVG with one polyline per
/// variant (image-only and fused).
pub fn sweep_svg(report: &ExperimentReport, fold: usize) -> String {
    let grid = &report.folds[fold].grid;
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 30.0, 50.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;

    let xs: Vec<f64> = grid.image.iter().map(|t| t.iou).collect();
    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let px = |x: f64| ml + (x - x_min) / x_span * plot_w;
    let py = |y: f64| mt + (1.0 - y) * plot_h;

    let polyline = |accs: &[f64], color: &str, label: &str, ly: f64| {
        let pts: Vec<String> = xs
            .iter()
            .zip(accs)
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n\
             <text x=\"{:.2}\" y=\"{ly:.2}\" fill=\"{color}\" font-size=\"13\">{label}</text>\n",
            pts.join(" "),
            ml + 10.0,
        )
    };

    let image_acc: Vec<f64> = (0..xs.len()).map(|i| grid.overall_accuracy(false, i)).collect();
    let fused_acc: Vec<f64> = (0..xs.len()).map(|i| grid.overall_accuracy(true, i)).collect();

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    // axes
    write!(
        svg,
        "<line x1=\"{ml}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        mt + plot_h,
        ml + plot_w,
        mt + plot_h,
        mt + plot_h,
    )
    .unwrap();
    // y ticks every 0.2
    for i in 0..=5 {
        let y = i as f64 * 0.2;
        write!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#cccccc\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{y:.1}</text>\n",
            ml,
            py(y),
            ml + plot_w,
            py(y),
            ml - 6.0,
            py(y) + 4.0,
        )
        .unwrap();
    }
    // x ticks at the sweep thresholds
    for &x in &xs {
        write!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{x}</text>\n",
            px(x),
            mt + plot_h + 18.0,
        )
        .unwrap();
    }
    write!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\">IoU threshold</text>\n\
         <text x=\"16\" y=\"{:.2}\" font-size=\"13\" transform=\"rotate(-90 16 {:.2})\" text-anchor=\"middle\">overall accuracy</text>\n",
        ml + plot_w / 2.0,
        mt + plot_h + 38.0,
        mt + plot_h / 2.0,
        mt + plot_h / 2.0,
    )
    .unwrap();
    svg.push_str(&polyline(&image_acc, "#c0392b", "image only", mt + 20.0));
    svg.push_str(&polyline(&fused_acc, "#2471a3", "fused", mt + 38.0));
    svg.push_str("</svg>\n");
    svg
}

/// Provenance view of the config: everything that determines the numbers,
/// no host paths.
pub fn config_json(report: &ExperimentReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(&report.config)? + "\n")
}

/// Writes the full report directory.
pub fn write_report_dir(
    report: &ExperimentReport,
    taxonomy: &ClassTaxonomy,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), config_json(report)?)?;
    fs::write(dir.join("per_class.csv"), per_class_csv(report, taxonomy, 0))?;
    fs::write(dir.join("overall.csv"), overall_csv(report, 0))?;
    fs::write(dir.join("accuracy_vs_iou.csv"), sweep_csv(report, 0))?;
    fs::write(dir.join("accuracy_vs_iou.svg"), sweep_svg(report, 0))?;
    fs::write(dir.join("train_report.csv"), train_report_csv(report, 0))?;
    if !report.significance.is_empty() {
        fs::write(dir.join("folds.csv"), folds_csv(report))?;
        fs::write(dir.join("ttest.json"), ttest_json(report)?)?;
    }
    Ok(())
}
