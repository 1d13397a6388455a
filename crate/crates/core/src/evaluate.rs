//! Checkpoint evaluation, metric reports, SVG timelines and report diffs.

use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, FeatureSource, TrainedModel};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_sequence, one_hot, SequenceMetrics};
use crate::model::argmax_frames;
use crate::pose::{DatasetManifest, Split};
use crate::train::{load_samples, LoadOptions, Sample, Trainable};

pub const REPORT_SCHEMA_ID: &str = "segtcn.eval-report.v1";

/// JSON schema of [`EvalReport`].
pub const REPORT_SCHEMA: &str = include_str!("../schema/eval-report.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    /// Limb dropout probability; 0 leaves skeletons untouched.
    pub drop_p: f64,
    pub drop_seed: u64,
    /// Score the ground truth against itself, bypassing the model.
    pub oracle: bool,
    /// Override the checkpoint's feature source.
    pub features: Option<FeatureSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation across sequences.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummaries {
    pub f1_10: Summary,
    pub edit: Summary,
    pub map: Summary,
    pub acc: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub id: String,
    pub frames: usize,
    #[serde(flatten)]
    pub metrics: SequenceMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema: String,
    pub split: Split,
    pub drop_p: f64,
    pub drop_seed: u64,
    pub oracle: bool,
    pub num_sequences: usize,
    pub metrics: MetricSummaries,
    pub sequences: Vec<SequenceReport>,
}

impl EvalReport {
    pub fn from_sequences(
        sequences: Vec<SequenceReport>,
        split: Split,
        opts: &EvalOptions,
    ) -> Self {
        let col = |f: fn(&SequenceMetrics) -> f64| -> Summary {
            Summary::of(&sequences.iter().map(|s| f(&s.metrics)).collect::<Vec<_>>())
        };
        Self {
            schema: REPORT_SCHEMA_ID.into(),
            split,
            drop_p: opts.drop_p,
            drop_seed: opts.drop_seed,
            oracle: opts.oracle,
            num_sequences: sequences.len(),
            metrics: MetricSummaries {
                f1_10: col(|m| m.f1_10),
                edit: col(|m| m.edit),
                map: col(|m| m.map),
                acc: col(|m| m.acc),
            },
            sequences,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization") + "\n"
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(context, e))
    }

    /// Per-sequence table as tab-separated text.
    pub fn table(&self) -> String {
        let mut out = String::from("id\tframes\tf1@10\tedit\tmap\tacc\n");
        for s in &self.sequences {
            let m = &s.metrics;
            let _ = writeln!(
                out,
                "{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
                s.id, s.frames, m.f1_10, m.edit, m.map, m.acc
            );
        }
        let fmt = |s: &Summary| format!("{:.2} ± {:.2}", s.mean, s.std);
        let m = &self.metrics;
        let _ = writeln!(
            out,
            "mean ± std\t\t{}\t{}\t{}\t{}",
            fmt(&m.f1_10),
            fmt(&m.edit),
            fmt(&m.map),
            fmt(&m.acc)
        );
        out
    }
}

/// Predictions of one evaluated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePrediction {
    pub id: String,
    pub truth: Vec<usize>,
    pub pred: Vec<usize>,
}

fn check_compatible(ckpt: &Checkpoint, samples: &[Sample], class_names: &[String]) -> Result<()> {
    let model = &ckpt.model;
    if class_names.len() != model.num_classes() {
        return Err(Error::Dimension(format!(
            "checkpoint predicts {} classes, class map has {}",
            model.num_classes(),
            class_names.len()
        )));
    }
    if class_names != ckpt.class_names.as_slice() {
        return Err(Error::Validation(
            "class map names differ from the checkpoint's classes".into(),
        ));
    }
    for s in samples {
        if s.heat.nrows() != model.input_dim() {
            return Err(Error::Dimension(format!(
                "sequence '{}' has {}-dimensional features, checkpoint expects {}",
                s.id,
                s.heat.nrows(),
                model.input_dim()
            )));
        }
        if let (Some(aux), Some(dim)) = (&s.aux, model.aux_dim()) {
            if aux.nrows() != dim {
                return Err(Error::Dimension(format!(
                    "sequence '{}' has {}-dimensional auxiliary features, checkpoint expects {dim}",
                    s.id,
                    aux.nrows()
                )));
            }
        }
    }
    Ok(())
}

fn final_probs(model: &TrainedModel, sample: &Sample) -> Result<Array2<f32>> {
    match model {
        TrainedModel::Single(m) => m.final_probs(sample),
        TrainedModel::Fusion(m) => m.final_probs(sample),
    }
}

/// Runs the checkpoint over one split of the manifest.
pub fn evaluate(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    split: Split,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<SequencePrediction>)> {
    if !(0.0..=1.0).contains(&opts.drop_p) {
        return Err(Error::Validation(format!(
            "drop probability {} outside [0,1]",
            opts.drop_p
        )));
    }
    let classes = manifest.classes()?;
    let mut spec = ckpt.features;
    if let Some(source) = opts.features {
        spec.source = source;
    }
    let load = LoadOptions {
        want_aux: matches!(ckpt.model, TrainedModel::Fusion(_)) && !opts.oracle,
        drop_p: (opts.drop_p > 0.0).then_some(opts.drop_p),
        drop_seed: opts.drop_seed,
    };
    let samples = load_samples(manifest, &classes, split, &spec, &load)?;
    if samples.is_empty() {
        return Err(Error::Validation(format!(
            "manifest has no {split:?} sequences"
        )));
    }
    if !opts.oracle {
        check_compatible(ckpt, &samples, classes.names())?;
    }
    let num_classes = classes.len();
    let rows: Vec<(SequenceReport, SequencePrediction)> = samples
        .par_iter()
        .map(|s| {
            let (pred, probs) = if opts.oracle {
                (s.labels.clone(), one_hot(&s.labels, num_classes))
            } else {
                let p = final_probs(&ckpt.model, s)?;
                (argmax_frames(p.view()), p.mapv(f64::from))
            };
            let metrics = evaluate_sequence(&pred, &probs, &s.labels)?;
            Ok((
                SequenceReport {
                    id: s.id.clone(),
                    frames: s.labels.len(),
                    metrics,
                },
                SequencePrediction {
                    id: s.id.clone(),
                    truth: s.labels.clone(),
                    pred,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let (reports, preds): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok((EvalReport::from_sequences(reports, split, opts), preds))
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Two-row timeline (ground truth above prediction) of one sequence.
pub fn timeline_svg(p: &SequencePrediction, class_names: &[String]) -> String {
    const WIDTH: f64 = 1000.0;
    const ROW: f64 = 24.0;
    const LABEL: f64 = 90.0;
    let frames = p.truth.len().max(1) as f64;
    let scale = (WIDTH - LABEL) / frames;
    let legend_rows = class_names.len().div_ceil(5);
    let height = 2.0 * ROW + 30.0 + 18.0 * legend_rows as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, "<title>{}</title>", escape(&p.id));
    for (row, (name, labels)) in [("truth", &p.truth), ("predicted", &p.pred)]
        .into_iter()
        .enumerate()
    {
        let y = 4.0 + row as f64 * (ROW + 4.0);
        let _ = writeln!(svg, r#"<text x="4" y="{:.1}">{name}</text>"#, y + ROW * 0.7);
        for seg in crate::pose::segments_of(labels) {
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{y:.1}" width="{:.2}" height="{ROW}" fill="{}"/>"#,
                LABEL + seg.start as f64 * scale,
                seg.len() as f64 * scale,
                PALETTE[seg.class % PALETTE.len()]
            );
        }
    }
    for (k, name) in class_names.iter().enumerate() {
        let x = LABEL + (k % 5) as f64 * 180.0;
        let y = 2.0 * ROW + 16.0 + (k / 5) as f64 * 18.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.1}" y="{y:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            PALETTE[k % PALETTE.len()],
            x + 16.0,
            y + 10.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Metric-by-metric comparison of two reports (`b - a`).
pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> String {
    let mut out = String::from("metric\ta\tb\tdelta\n");
    let rows = [
        ("f1@10", a.metrics.f1_10, b.metrics.f1_10),
        ("edit", a.metrics.edit, b.metrics.edit),
        ("map", a.metrics.map, b.metrics.map),
        ("acc", a.metrics.acc, b.metrics.acc),
    ];
    for (name, x, y) in rows {
        let _ = writeln!(
            out,
            "{name}\t{:.2} ± {:.2}\t{:.2} ± {:.2}\t{:+.2}",
            x.mean,
            x.std,
            y.mean,
            y.std,
            y.mean - x.mean
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(id: &str, acc: f64) -> SequenceReport {
        SequenceReport {
            id: id.into(),
            frames: 10,
            metrics: SequenceMetrics {
                f1_10: 100.0,
                edit: 50.0,
                map: 75.0,
                acc,
            },
        }
    }

    #[test]
    fn population_std() {
        let s = Summary::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.std, 2.0);
    }

    #[test]
    fn report_round_trip_and_compare() {
        let opts = EvalOptions::default();
        let a =
            EvalReport::from_sequences(vec![seq("a", 80.0), seq("b", 100.0)], Split::Test, &opts);
        assert_eq!(
            a.metrics.acc,
            Summary {
                mean: 90.0,
                std: 10.0
            }
        );
        let back = EvalReport::from_json(&a.to_json(), "mem").unwrap();
        assert_eq!(back, a);
        let b = EvalReport::from_sequences(vec![seq("a", 90.0)], Split::Test, &opts);
        let table = compare_reports(&a, &b);
        assert!(
            table.contains("acc\t90.00 ± 10.00\t90.00 ± 0.00\t+0.00"),
            "{table}"
        );
        assert!(a.table().contains("mean ± std"));
    }

    #[test]
    fn svg_has_one_rect_per_segment() {
        let p = SequencePrediction {
            id: "v<1>".into(),
            truth: vec![0, 0, 1, 1],
            pred: vec![0, 1, 1, 1],
        };
        let svg = timeline_svg(&p, &["a".into(), "b".into()]);
        assert_eq!(svg.matches("<rect").count(), 4 + 2);
        assert!(svg.contains("v&lt;1&gt;"));
    }
}
