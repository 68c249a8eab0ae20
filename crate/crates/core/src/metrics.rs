//! Frame- and event-level F1 with micro and macro averaging.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassMap, IptEvent};
use crate::{Error, Result};

/// Default onset tolerance in seconds.
pub const DEFAULT_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// No reference and no predicted positives.
    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Micro, macro and per-class scores from per-class counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub micro: f64,
    pub macro_: f64,
    pub per_class: Vec<f64>,
    /// Classes with no reference and no predicted positives (scored 0).
    pub zero_support: Vec<usize>,
    pub counts: Vec<Counts>,
}

impl Scores {
    pub fn from_counts(counts: Vec<Counts>) -> Self {
        let mut pooled = Counts::default();
        for c in &counts {
            pooled.add(c);
        }
        let per_class: Vec<f64> = counts.iter().map(Counts::f1).collect();
        let macro_ = if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().sum::<f64>() / per_class.len() as f64
        };
        Scores {
            micro: pooled.f1(),
            macro_,
            zero_support: counts.iter().enumerate().filter(|(_, c)| c.is_empty()).map(|(i, _)| i).collect(),
            per_class,
            counts,
        }
    }
}

/// Per-class frame counts over rows with `mask[t] != 0`.
pub fn frame_counts(pred: ArrayView2<u8>, reference: ArrayView2<u8>, mask: &[u8]) -> Result<Vec<Counts>> {
    if pred.dim() != reference.dim() || pred.nrows() != mask.len() {
        return Err(Error::Contract(format!(
            "frame_f1 shapes differ: pred {:?}, ref {:?}, mask {}",
            pred.dim(),
            reference.dim(),
            mask.len()
        )));
    }
    let mut counts = vec![Counts::default(); pred.ncols()];
    for ((p_row, r_row), &m) in pred.rows().into_iter().zip(reference.rows()).zip(mask) {
        if m == 0 {
            continue;
        }
        for (c, (&p, &r)) in p_row.iter().zip(r_row.iter()).enumerate() {
            match (p != 0, r != 0) {
                (true, true) => counts[c].tp += 1,
                (true, false) => counts[c].fp += 1,
                (false, true) => counts[c].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(counts)
}

pub fn frame_f1(pred: ArrayView2<u8>, reference: ArrayView2<u8>, mask: &[u8]) -> Result<Scores> {
    Ok(Scores::from_counts(frame_counts(pred, reference, mask)?))
}

/// Maximum-cardinality one-to-one matching of predicted to reference events.
/// A pair is compatible when the labels agree and the onsets differ by at
/// most `tolerance` seconds. Returns `(pred_index, ref_index)` pairs sorted by
/// prediction index.
pub fn match_events(pred: &[IptEvent], reference: &[IptEvent], tolerance: f64) -> Vec<(usize, usize)> {
    let adj: Vec<Vec<usize>> = pred
        .iter()
        .map(|p| {
            reference
                .iter()
                .enumerate()
                .filter(|(_, r)| r.label == p.label && (p.onset - r.onset).abs() <= tolerance)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; reference.len()];
    for i in 0..pred.len() {
        let mut seen = vec![false; reference.len()];
        augment(i, &adj, &mut owner, &mut seen);
    }
    let mut pairs: Vec<(usize, usize)> = owner
        .iter()
        .enumerate()
        .filter_map(|(j, o)| o.map(|i| (i, j)))
        .collect();
    pairs.sort_unstable();
    pairs
}

fn augment(i: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &j in &adj[i] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        if owner[j].is_none_or(|k| augment(k, adj, owner, seen)) {
            owner[j] = Some(i);
            return true;
        }
    }
    false
}

/// Per-class event counts; each class is matched independently.
pub fn event_counts(pred: &[IptEvent], reference: &[IptEvent], tolerance: f64, n_classes: usize) -> Vec<Counts> {
    (0..n_classes)
        .map(|c| {
            let p: Vec<IptEvent> = pred.iter().filter(|e| e.label == c).copied().collect();
            let r: Vec<IptEvent> = reference.iter().filter(|e| e.label == c).copied().collect();
            let tp = match_events(&p, &r, tolerance).len() as u64;
            Counts {
                tp,
                fp: p.len() as u64 - tp,
                fn_: r.len() as u64 - tp,
            }
        })
        .collect()
}

pub fn event_f1(pred: &[IptEvent], reference: &[IptEvent], tolerance: f64, class_map: &ClassMap) -> Scores {
    Scores::from_counts(event_counts(pred, reference, tolerance, class_map.n_ipt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Scores computed once over counts pooled from all recordings.
    #[default]
    Pooled,
    /// Unweighted mean of the fold reports' scores.
    MeanOfFolds,
    /// Counts pooled across fold reports.
    PooledFolds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub frame_f1: f64,
    pub event_f1: f64,
    /// Reference positive frames.
    pub support: u64,
    pub event_support: u64,
    pub zero_support: bool,
    pub frame_counts: Counts,
    pub event_counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frame_micro_f1: f64,
    pub frame_macro_f1: f64,
    pub event_micro_f1: f64,
    pub event_macro_f1: f64,
    pub per_class: Vec<ClassReport>,
    pub tolerance: f64,
    pub aggregation: Aggregation,
    pub recordings: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

impl EvalReport {
    pub fn class_names(&self) -> Vec<&str> {
        self.per_class.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn from_counts(
        names: &[String],
        frame: Vec<Counts>,
        event: Vec<Counts>,
        tolerance: f64,
        recordings: usize,
        aggregation: Aggregation,
    ) -> Self {
        let f = Scores::from_counts(frame);
        let e = Scores::from_counts(event);
        let per_class = names
            .iter()
            .enumerate()
            .map(|(c, name)| ClassReport {
                name: name.clone(),
                frame_f1: f.per_class[c],
                event_f1: e.per_class[c],
                support: f.counts[c].tp + f.counts[c].fn_,
                event_support: e.counts[c].tp + e.counts[c].fn_,
                zero_support: f.counts[c].is_empty(),
                frame_counts: f.counts[c],
                event_counts: e.counts[c],
            })
            .collect();
        EvalReport {
            frame_micro_f1: f.micro,
            frame_macro_f1: f.macro_,
            event_micro_f1: e.micro,
            event_macro_f1: e.macro_,
            per_class,
            tolerance,
            aggregation,
            recordings,
            variant: None,
        }
    }
}

/// Accumulates counts over recordings.
#[derive(Debug, Clone)]
pub struct Evaluator {
    names: Vec<String>,
    tolerance: f64,
    frame: Vec<Counts>,
    event: Vec<Counts>,
    recordings: usize,
}

impl Evaluator {
    pub fn new(class_map: &ClassMap, tolerance: f64) -> Result<Self> {
        if !(tolerance.is_finite() && tolerance >= 0.0) {
            return Err(Error::Config(format!("tolerance must be non-negative, got {tolerance}")));
        }
        let n = class_map.n_ipt();
        Ok(Evaluator {
            names: class_map.ipt_names.clone(),
            tolerance,
            frame: vec![Counts::default(); n],
            event: vec![Counts::default(); n],
            recordings: 0,
        })
    }

    pub fn add(
        &mut self,
        pred_frames: ArrayView2<u8>,
        ref_frames: ArrayView2<u8>,
        mask: &[u8],
        pred_events: &[IptEvent],
        ref_events: &[IptEvent],
    ) -> Result<()> {
        let f = frame_counts(pred_frames, ref_frames, mask)?;
        if f.len() != self.frame.len() {
            return Err(Error::Contract(format!("{} classes, expected {}", f.len(), self.frame.len())));
        }
        let e = event_counts(pred_events, ref_events, self.tolerance, self.names.len());
        for (acc, c) in self.frame.iter_mut().zip(&f) {
            acc.add(c);
        }
        for (acc, c) in self.event.iter_mut().zip(&e) {
            acc.add(c);
        }
        self.recordings += 1;
        Ok(())
    }

    pub fn report(&self) -> EvalReport {
        EvalReport::from_counts(
            &self.names,
            self.frame.clone(),
            self.event.clone(),
            self.tolerance,
            self.recordings,
            Aggregation::Pooled,
        )
    }
}

/// Combines fold reports (cross-validation).
pub fn aggregate(reports: &[EvalReport], mode: Aggregation) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::Contract("no reports to aggregate".into()))?;
    check_same_classes(reports)?;
    let names: Vec<String> = first.per_class.iter().map(|c| c.name.clone()).collect();
    let recordings = reports.iter().map(|r| r.recordings).sum();
    match mode {
        Aggregation::Pooled | Aggregation::PooledFolds => {
            let mut frame = vec![Counts::default(); names.len()];
            let mut event = vec![Counts::default(); names.len()];
            for r in reports {
                for (c, pc) in r.per_class.iter().enumerate() {
                    frame[c].add(&pc.frame_counts);
                    event[c].add(&pc.event_counts);
                }
            }
            Ok(EvalReport::from_counts(&names, frame, event, first.tolerance, recordings, Aggregation::PooledFolds))
        }
        Aggregation::MeanOfFolds => {
            let n = reports.len() as f64;
            let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
            let mut out = EvalReport::from_counts(
                &names,
                vec![Counts::default(); names.len()],
                vec![Counts::default(); names.len()],
                first.tolerance,
                recordings,
                Aggregation::MeanOfFolds,
            );
            out.frame_micro_f1 = mean(&|r| r.frame_micro_f1);
            out.event_micro_f1 = mean(&|r| r.event_micro_f1);
            for (c, pc) in out.per_class.iter_mut().enumerate() {
                pc.frame_f1 = mean(&|r| r.per_class[c].frame_f1);
                pc.event_f1 = mean(&|r| r.per_class[c].event_f1);
                for r in reports {
                    pc.frame_counts.add(&r.per_class[c].frame_counts);
                    pc.event_counts.add(&r.per_class[c].event_counts);
                }
                pc.support = pc.frame_counts.tp + pc.frame_counts.fn_;
                pc.event_support = pc.event_counts.tp + pc.event_counts.fn_;
                pc.zero_support = pc.frame_counts.is_empty();
            }
            let k = names.len().max(1) as f64;
            out.frame_macro_f1 = out.per_class.iter().map(|c| c.frame_f1).sum::<f64>() / k;
            out.event_macro_f1 = out.per_class.iter().map(|c| c.event_f1).sum::<f64>() / k;
            out.variant = first.variant.clone();
            Ok(out)
        }
    }
}

fn check_same_classes(reports: &[EvalReport]) -> Result<()> {
    let names = reports[0].class_names();
    for r in &reports[1..] {
        if r.class_names() != names {
            return Err(Error::Compatibility(format!(
                "reports have different classes: {:?} vs {:?}",
                names,
                r.class_names()
            )));
        }
    }
    Ok(())
}

/// Writes a bar chart of per-class frame F1 (`<stem>.png`) and the values
/// as CSV (`<stem>.csv`), in class-map order. Returns both paths.
pub fn per_class_histogram(report: &EvalReport, output: &Path) -> Result<(PathBuf, PathBuf)> {
    if report.per_class.is_empty() {
        return Err(Error::Contract("report has no per-class entries".into()));
    }
    let png = output.with_extension("png");
    let csv_path = output.with_extension("csv");
    if let Some(dir) = png.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
    w.write_record(["class", "frame_f1", "support"]).map_err(|e| csv_err(&csv_path, e))?;
    for c in &report.per_class {
        w.write_record([c.name.clone(), format!("{}", c.frame_f1), c.support.to_string()])
            .map_err(|e| csv_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    render_bars(&report.per_class.iter().map(|c| c.frame_f1).collect::<Vec<_>>())
        .save(&png)?;
    Ok((png, csv_path))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

const BAR_W: u32 = 48;
const GAP: u32 = 16;
const PLOT_H: u32 = 300;
const MARGIN: u32 = 24;

/// Bars scaled to `[0, 1]` with light grid lines every 0.25.
pub fn render_bars(values: &[f64]) -> RgbImage {
    let n = values.len() as u32;
    let width = 2 * MARGIN + n * BAR_W + n.saturating_sub(1) * GAP;
    let height = PLOT_H + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let base = MARGIN + PLOT_H;
    for q in 0..=4 {
        let y = base - PLOT_H * q / 4;
        let shade = if q == 0 { Rgb([0, 0, 0]) } else { Rgb([215, 215, 215]) };
        for x in MARGIN / 2..width - MARGIN / 2 {
            img.put_pixel(x, y, shade);
        }
    }
    for (i, &v) in values.iter().enumerate() {
        let h = (v.clamp(0.0, 1.0) * PLOT_H as f64).round() as u32;
        let x0 = MARGIN + i as u32 * (BAR_W + GAP);
        for x in x0..x0 + BAR_W {
            for y in base - h..base {
                img.put_pixel(x, y, Rgb([49, 99, 149]));
            }
        }
    }
    img
}

/// Bar count of an image drawn by [`render_bars`], from the baseline row's neighbour.
pub fn count_bars(img: &RgbImage) -> usize {
    let y = MARGIN + PLOT_H - 1;
    let mut bars = 0;
    let mut inside = false;
    for x in 0..img.width() {
        let on = *img.get_pixel(x, y) == Rgb([49, 99, 149]);
        if on && !inside {
            bars += 1;
        }
        inside = on;
    }
    bars
}

/// One row of the variant comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub frame_micro_f1: f64,
    pub frame_macro_f1: f64,
    pub event_micro_f1: f64,
    pub event_macro_f1: f64,
}

/// Builds the four-column comparison table; rejects reports over different classes.
pub fn comparison_table(reports: &[(String, EvalReport)]) -> Result<Vec<TableRow>> {
    if reports.is_empty() {
        return Err(Error::Contract("at least one report is required".into()));
    }
    let only: Vec<EvalReport> = reports.iter().map(|(_, r)| r.clone()).collect();
    check_same_classes(&only)?;
    Ok(reports
        .iter()
        .map(|(name, r)| TableRow {
            name: name.clone(),
            frame_micro_f1: r.frame_micro_f1,
            frame_macro_f1: r.frame_macro_f1,
            event_micro_f1: r.event_micro_f1,
            event_macro_f1: r.event_macro_f1,
        })
        .collect())
}

pub fn write_table_csv(rows: &[TableRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_table_csv(path: &Path) -> Result<Vec<TableRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Fixed-width text rendering, scores in percent with one decimal.
pub fn format_table(rows: &[TableRow]) -> String {
    let w = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(7);
    let mut s = format!(
        "{:<w$} | {:>11} | {:>11} | {:>11} | {:>11}\n",
        "variant", "frame MI-F1", "frame MA-F1", "event MI-F1", "event MA-F1"
    );
    s.push_str(&format!("{}\n", "-".repeat(w + 4 * 14)));
    for r in rows {
        s.push_str(&format!(
            "{:<w$} | {:>11.1} | {:>11.1} | {:>11.1} | {:>11.1}\n",
            r.name,
            100.0 * r.frame_micro_f1,
            100.0 * r.frame_macro_f1,
            100.0 * r.event_micro_f1,
            100.0 * r.event_macro_f1
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn ev(label: usize, onset: f64) -> IptEvent {
        IptEvent::new(label, onset, onset + 0.1, None).unwrap()
    }

    #[test]
    fn identical_grids_score_one() {
        let g = Array2::from_shape_vec((3, 2), vec![1u8, 0, 0, 1, 1, 1]).unwrap();
        let s = frame_f1(g.view(), g.view(), &[1, 1, 1]).unwrap();
        assert_eq!((s.micro, s.macro_), (1.0, 1.0));
    }

    #[test]
    fn all_negative_is_zero_and_flagged() {
        let g = Array2::<u8>::zeros((4, 2));
        let s = frame_f1(g.view(), g.view(), &[1; 4]).unwrap();
        assert_eq!((s.micro, s.macro_), (0.0, 0.0));
        assert_eq!(s.zero_support, vec![0, 1]);
    }

    #[test]
    fn masked_rows_are_ignored() {
        let p = Array2::from_shape_vec((2, 1), vec![1u8, 1]).unwrap();
        let r = Array2::from_shape_vec((2, 1), vec![1u8, 0]).unwrap();
        assert_eq!(frame_f1(p.view(), r.view(), &[1, 0]).unwrap().micro, 1.0);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let p = Array2::<u8>::zeros((2, 1));
        let r = Array2::<u8>::zeros((2, 2));
        assert!(matches!(frame_f1(p.view(), r.view(), &[1, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn tolerance_boundary() {
        assert_eq!(match_events(&[ev(0, 1.0)], &[ev(0, 1.04)], 0.05).len(), 1);
        assert!(match_events(&[ev(0, 1.0)], &[ev(0, 1.06)], 0.05).is_empty());
        assert!(match_events(&[ev(0, 1.0)], &[ev(1, 1.0)], 0.05).is_empty());
    }

    #[test]
    fn two_preds_one_ref() {
        assert_eq!(match_events(&[ev(0, 1.0), ev(0, 1.01)], &[ev(0, 1.0)], 0.05).len(), 1);
    }

    #[test]
    fn augmenting_path_beats_greedy() {
        // greedy pairing p0-r0 would strand p1
        let p = [ev(0, 1.00), ev(0, 0.96)];
        let r = [ev(0, 0.99), ev(0, 1.04)];
        assert_eq!(match_events(&p, &r, 0.05).len(), 2);
    }

    #[test]
    fn empty_predictions() {
        let cm = crate::dataset::DatasetSchema::Toy.class_map();
        let s = event_f1(&[], &[ev(0, 1.0)], 0.05, &cm);
        assert_eq!(s.micro, 0.0);
        assert_eq!(s.counts[0], Counts { tp: 0, fp: 0, fn_: 1 });
    }

    fn report(tp: u64, fp: u64) -> EvalReport {
        let names = vec!["a".to_string(), "b".to_string()];
        let c = Counts { tp, fp, fn_: 1 };
        EvalReport::from_counts(&names, vec![c, c], vec![c, c], 0.05, 1, Aggregation::Pooled)
    }

    #[test]
    fn aggregation_modes() {
        let rs = [report(1, 0), report(3, 0)];
        let mean = aggregate(&rs, Aggregation::MeanOfFolds).unwrap();
        let expect = (rs[0].frame_micro_f1 + rs[1].frame_micro_f1) / 2.0;
        assert!((mean.frame_micro_f1 - expect).abs() < 1e-15);
        let pooled = aggregate(&rs, Aggregation::PooledFolds).unwrap();
        assert_eq!(pooled.per_class[0].frame_counts, Counts { tp: 4, fp: 0, fn_: 2 });
        assert!((pooled.frame_micro_f1 - 8.0 / 10.0).abs() < 1e-15);
    }

    #[test]
    fn class_mismatch_rejected() {
        let mut b = report(1, 0);
        b.per_class[1].name = "c".into();
        assert!(matches!(aggregate(&[report(1, 0), b.clone()], Aggregation::MeanOfFolds), Err(Error::Compatibility(_))));
        assert!(comparison_table(&[("x".into(), report(1, 0)), ("y".into(), b)]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let r = report(2, 1);
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn bars_are_counted() {
        assert_eq!(count_bars(&render_bars(&[0.2, 0.9, 0.5])), 3);
        assert_eq!(count_bars(&render_bars(&[1.0])), 1);
    }
}
