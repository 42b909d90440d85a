//! Per-image evaluation, dataset aggregation and the CSV report formats.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use mdsam_autograd::{resize_bilinear, Tensor};

use super::{binarize_gt, check_dims, e_measure, f_measure_curve, mae, s_measure, weighted_f, FCurve, THRESHOLDS};
use crate::data::{list_images, load_saliency};
use crate::error::{Error, Result};

/// A prediction and its ground truth, both row-major `width x height`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub id: String,
    pub pred: Vec<f64>,
    /// Binarized at 0.5 on construction.
    pub gt: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

impl EvalPair {
    pub fn new(id: &str, pred: Vec<f64>, gt: Vec<f64>, width: usize, height: usize) -> Result<Self> {
        check_dims(&pred, &gt, width, height)?;
        if pred.iter().any(|p| !p.is_finite()) {
            return Err(Error::Eval(format!("prediction `{id}` has non-finite values")));
        }
        let gt = binarize_gt(&gt).into_iter().map(|b| b as u8 as f64).collect();
        Ok(Self {
            id: id.to_string(),
            pred,
            gt,
            width,
            height,
        })
    }

    pub fn has_foreground(&self) -> bool {
        self.gt.iter().any(|&g| g > 0.0)
    }
}

/// Metrics of one image. F, S and weighted F are absent when the ground
/// truth has no foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub mae: f64,
    pub f_max: Option<f64>,
    pub f_mean: Option<f64>,
    pub s_measure: Option<f64>,
    pub e_measure: f64,
    pub weighted_f: Option<f64>,
}

impl ImageMetrics {
    pub fn empty_gt(&self) -> bool {
        self.f_max.is_none()
    }
}

/// Dataset-level means.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub mae: f64,
    /// Maximum of the mean F curve.
    pub f_max: f64,
    /// Mean of the mean F curve.
    pub f_mean: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    pub weighted_f: f64,
    /// Images evaluated.
    pub images: usize,
    /// Images whose ground truth had no foreground.
    pub empty_gt: usize,
    /// Stems present on only one side.
    pub unmatched: usize,
}

/// Precision, recall and F per threshold, averaged over images.
#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f: Vec<f64>,
}

impl Curves {
    fn zeros() -> Self {
        Self {
            precision: vec![0.0; THRESHOLDS],
            recall: vec![0.0; THRESHOLDS],
            f: vec![0.0; THRESHOLDS],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
    pub curves: Curves,
    /// Sorted stems that had no counterpart.
    pub unmatched: Vec<String>,
}

fn evaluate_one(pair: &EvalPair) -> Result<(ImageMetrics, Option<FCurve>)> {
    let (w, h) = (pair.width, pair.height);
    let mae_v = mae(&pair.pred, &pair.gt)?;
    let e = e_measure(&pair.pred, &pair.gt)?;
    if !pair.has_foreground() {
        return Ok((
            ImageMetrics {
                id: pair.id.clone(),
                mae: mae_v,
                f_max: None,
                f_mean: None,
                s_measure: None,
                e_measure: e,
                weighted_f: None,
            },
            None,
        ));
    }
    let curve = f_measure_curve(&pair.pred, &pair.gt)?;
    let m = ImageMetrics {
        id: pair.id.clone(),
        mae: mae_v,
        f_max: Some(curve.f_max),
        f_mean: Some(curve.f_mean),
        s_measure: Some(s_measure(&pair.pred, &pair.gt, w, h)?),
        e_measure: e,
        weighted_f: Some(weighted_f(&pair.pred, &pair.gt, w, h)?),
    };
    Ok((m, Some(curve)))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluates every pair (in parallel across available cores) and
/// aggregates. The result does not depend on the order of `pairs` beyond
/// the order of `per_image`, which is sorted by id.
pub fn evaluate_pairs(pairs: &[EvalPair]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Eval("nothing to evaluate".into()));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(pairs.len());
    let chunk = pairs.len().div_ceil(workers);
    let mut results: Vec<(ImageMetrics, Option<FCurve>)> = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(evaluate_one).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("metric worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    results.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let mut curves = Curves::zeros();
    let with_curve: Vec<&FCurve> = results.iter().filter_map(|(_, c)| c.as_ref()).collect();
    if !with_curve.is_empty() {
        let n = with_curve.len() as f64;
        for t in 0..THRESHOLDS {
            curves.precision[t] = with_curve.iter().map(|c| c.precision[t]).sum::<f64>() / n;
            curves.recall[t] = with_curve.iter().map(|c| c.recall[t]).sum::<f64>() / n;
            curves.f[t] = with_curve.iter().map(|c| c.f[t]).sum::<f64>() / n;
        }
    }
    let per_image: Vec<ImageMetrics> = results.into_iter().map(|(m, _)| m).collect();
    let aggregate = aggregate_of(&per_image, &curves, 0);
    Ok(MetricReport {
        per_image,
        aggregate,
        curves,
        unmatched: Vec::new(),
    })
}

fn aggregate_of(per_image: &[ImageMetrics], curves: &Curves, unmatched: usize) -> Aggregate {
    let has_fg = per_image.iter().any(|m| !m.empty_gt());
    Aggregate {
        mae: mean(per_image.iter().map(|m| m.mae)),
        f_max: if has_fg { curves.f.iter().cloned().fold(0.0, f64::max) } else { 0.0 },
        f_mean: if has_fg { mean(curves.f.iter().cloned()) } else { 0.0 },
        s_measure: mean(per_image.iter().filter_map(|m| m.s_measure)),
        e_measure: mean(per_image.iter().map(|m| m.e_measure)),
        weighted_f: mean(per_image.iter().filter_map(|m| m.weighted_f)),
        images: per_image.len(),
        empty_gt: per_image.iter().filter(|m| m.empty_gt()).count(),
        unmatched,
    }
}

/// Pairs prediction and ground-truth files by stem and evaluates the
/// intersection. Predictions whose size differs from the ground truth are
/// resized bilinearly to it. Unmatched stems are reported, not fatal,
/// unless nothing matches.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let preds = list_images(pred_dir)?;
    let gts = list_images(gt_dir)?;
    let gt_stems: BTreeSet<&str> = gts.iter().map(|(s, _)| s.as_str()).collect();
    let pred_stems: BTreeSet<&str> = preds.iter().map(|(s, _)| s.as_str()).collect();
    let unmatched: Vec<String> = pred_stems.symmetric_difference(&gt_stems).map(|s| s.to_string()).collect();
    let matched: Vec<(&String, &PathBuf, &PathBuf)> = preds
        .iter()
        .filter_map(|(s, p)| gts.iter().find(|(g, _)| g == s).map(|(_, gp)| (s, p, gp)))
        .collect();
    if matched.is_empty() {
        return Err(Error::Eval(format!(
            "no common stems between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    if !unmatched.is_empty() {
        log::warn!("{} unmatched stems excluded", unmatched.len());
    }
    let pairs = matched
        .into_iter()
        .map(|(id, pp, gp)| {
            let gt = load_saliency(gp)?;
            let (h, w) = (gt.dim(1), gt.dim(2));
            let mut pred = load_saliency(pp)?;
            if pred.shape() != gt.shape() {
                let (ph, pw) = (pred.dim(1), pred.dim(2));
                pred = resize_bilinear(&pred.reshape(&[1, 1, ph, pw]), h, w);
            }
            EvalPair::new(id, pred.into_data(), gt.into_data(), w, h)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = evaluate_pairs(&pairs)?;
    report.aggregate.unmatched = unmatched.len();
    report.unmatched = unmatched;
    Ok(report)
}

/// Id of the aggregate row in the report CSV.
pub const AGGREGATE_ID: &str = "mean";
const REPORT_HEADER: [&str; 8] = ["id", "mae", "f_max", "f_mean", "s_m", "e_m", "wf", "empty_gt"];
const CURVE_HEADER: [&str; 4] = ["threshold", "precision", "recall", "f"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes one row per image and a final aggregate row, preceded by the
/// config hash and the unmatched stems as comment lines.
pub fn write_report_csv<W: Write>(mut out: W, report: &MetricReport, config_hash: &str) -> Result<()> {
    writeln!(out, "# config_hash={config_hash}")?;
    writeln!(out, "# unmatched={}", report.unmatched.join(";"))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for m in &report.per_image {
        w.write_record([
            m.id.clone(),
            m.mae.to_string(),
            opt(m.f_max),
            opt(m.f_mean),
            opt(m.s_measure),
            m.e_measure.to_string(),
            opt(m.weighted_f),
            (m.empty_gt() as u8).to_string(),
        ])?;
    }
    let a = &report.aggregate;
    w.write_record([
        AGGREGATE_ID.to_string(),
        a.mae.to_string(),
        a.f_max.to_string(),
        a.f_mean.to_string(),
        a.s_measure.to_string(),
        a.e_measure.to_string(),
        a.weighted_f.to_string(),
        a.empty_gt.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// Writes the 256-row threshold / precision / recall / F table.
pub fn write_curves_csv<W: Write>(mut out: W, curves: &Curves, config_hash: &str) -> Result<()> {
    writeln!(out, "# config_hash={config_hash}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER)?;
    for t in 0..THRESHOLDS {
        w.write_record([
            t.to_string(),
            curves.precision[t].to_string(),
            curves.recall[t].to_string(),
            curves.f[t].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Splits leading `# key=value` comment lines from the CSV body.
fn split_comments<R: Read>(input: R) -> Result<(Vec<(String, String)>, String)> {
    let mut comments = Vec::new();
    let mut body = String::new();
    for line in BufReader::new(input).lines() {
        let line = line?;
        match line.strip_prefix('#') {
            Some(c) if body.is_empty() => {
                let (k, v) = c.trim().split_once('=').unwrap_or((c.trim(), ""));
                comments.push((k.to_string(), v.to_string()));
            }
            _ => {
                body.push_str(&line);
                body.push('\n');
            }
        }
    }
    Ok((comments, body))
}

fn check_header(rec: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if rec.iter().ne(expected.iter().copied()) {
        return Err(Error::Eval(format!("unexpected header {:?}, wanted {expected:?}", rec)));
    }
    Ok(())
}

fn parse_f(s: &str, what: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Eval(format!("bad {what} value `{s}`")))
}

fn parse_opt(s: &str, what: &str) -> Result<Option<f64>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_f(s, what).map(Some)
    }
}

/// Parses a curve table. Returns the curves and the config hash.
pub fn read_curves_csv<R: Read>(input: R) -> Result<(Curves, String)> {
    let (comments, body) = split_comments(input)?;
    let hash = comments.into_iter().find(|(k, _)| k == "config_hash").map(|(_, v)| v).unwrap_or_default();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    check_header(r.headers()?, &CURVE_HEADER)?;
    let mut curves = Curves::zeros();
    let mut seen = 0usize;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::Eval(format!("curve row has {} fields", rec.len())));
        }
        let t: usize = rec[0].trim().parse().map_err(|_| Error::Eval(format!("bad threshold `{}`", &rec[0])))?;
        if t != seen || t >= THRESHOLDS {
            return Err(Error::Eval(format!("threshold {t} out of order")));
        }
        curves.precision[t] = parse_f(&rec[1], "precision")?;
        curves.recall[t] = parse_f(&rec[2], "recall")?;
        curves.f[t] = parse_f(&rec[3], "f")?;
        seen += 1;
    }
    if seen != THRESHOLDS {
        return Err(Error::Eval(format!("curve table has {seen} rows, wanted {THRESHOLDS}")));
    }
    Ok((curves, hash))
}

/// Parses a report written by [`write_report_csv`]. Curves are not part of
/// the report file and come back as supplied.
pub fn read_report_csv<R: Read>(input: R, curves: Curves) -> Result<(MetricReport, String)> {
    let (comments, body) = split_comments(input)?;
    let lookup = |key: &str| comments.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    let hash = lookup("config_hash").unwrap_or_default();
    let unmatched: Vec<String> = lookup("unmatched")
        .map(|v| v.split(';').filter(|s| !s.is_empty()).map(String::from).collect())
        .unwrap_or_default();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    check_header(r.headers()?, &REPORT_HEADER)?;
    let mut per_image = Vec::new();
    let mut aggregate = None;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != REPORT_HEADER.len() {
            return Err(Error::Eval(format!("report row has {} fields", rec.len())));
        }
        if &rec[0] == AGGREGATE_ID {
            aggregate = Some(Aggregate {
                mae: parse_f(&rec[1], "mae")?,
                f_max: parse_f(&rec[2], "f_max")?,
                f_mean: parse_f(&rec[3], "f_mean")?,
                s_measure: parse_f(&rec[4], "s_m")?,
                e_measure: parse_f(&rec[5], "e_m")?,
                weighted_f: parse_f(&rec[6], "wf")?,
                images: per_image.len(),
                empty_gt: rec[7].trim().parse().map_err(|_| Error::Eval("bad empty_gt count".into()))?,
                unmatched: unmatched.len(),
            });
        } else {
            per_image.push(ImageMetrics {
                id: rec[0].to_string(),
                mae: parse_f(&rec[1], "mae")?,
                f_max: parse_opt(&rec[2], "f_max")?,
                f_mean: parse_opt(&rec[3], "f_mean")?,
                s_measure: parse_opt(&rec[4], "s_m")?,
                e_measure: parse_f(&rec[5], "e_m")?,
                weighted_f: parse_opt(&rec[6], "wf")?,
            });
        }
    }
    let aggregate = aggregate.ok_or_else(|| Error::Eval("report has no aggregate row".into()))?;
    Ok((
        MetricReport {
            per_image,
            aggregate,
            curves,
            unmatched,
        },
        hash,
    ))
}

impl MetricReport {
    /// The aggregate MAE, max F, S and E line printed by the CLI.
    pub fn summary_line(&self) -> String {
        let a = &self.aggregate;
        format!("{:.4} {:.4} {:.4} {:.4}", a.mae, a.f_max, a.s_measure, a.e_measure)
    }
}

/// Convenience for tests and tools: evaluates tensors of shape `[.., H, W]`.
pub fn pair_from_tensors(id: &str, pred: &Tensor, gt: &Tensor) -> Result<EvalPair> {
    let nd = pred.ndim();
    if nd < 2 || gt.shape() != pred.shape() {
        return Err(Error::Eval(format!("shape mismatch {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let (h, w) = (pred.dim(nd - 2), pred.dim(nd - 1));
    EvalPair::new(id, pred.data().to_vec(), gt.data().to_vec(), w, h)
}
