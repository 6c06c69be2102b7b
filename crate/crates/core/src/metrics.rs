//! Dice score and 95th-percentile Hausdorff distance on label masks.
//!
//! Distances are measured between full class point sets (pixel centres),
//! scaled by the mask spacing. The 95th percentile uses the nearest-rank
//! rule: the `ceil(0.95 n)`-th smallest of `n` directed distances.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2D map of class ids with physical pixel spacing `(row_mm, col_mm)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub spacing: (f64, f64),
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        Ok(LabelMask {
            height,
            width,
            labels,
            spacing: (1.0, 1.0),
        })
    }

    pub fn with_spacing(mut self, row_mm: f64, col_mm: f64) -> Self {
        self.spacing = (row_mm, col_mm);
        self
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Fails unless every label is below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= classes) {
            Some(l) => Err(Error::Domain(format!("label {l} outside {classes} classes"))),
            None => Ok(()),
        }
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

fn check_pair(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch(format!(
            "masks {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.spacing != b.spacing {
        return Err(Error::ShapeMismatch(format!(
            "spacings {:?} and {:?}",
            a.spacing, b.spacing
        )));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)`; 1 when both sets are empty.
pub fn dice_score(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let (ip, ig) = (p == class, g == class);
        np += ip as usize;
        ng += ig as usize;
        inter += (ip && ig) as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Squared distance from every pixel to the nearest pixel of `class` in
/// `mask`; `None` when the class is absent.
fn squared_distance_map(mask: &LabelMask, class: u8) -> Option<Vec<f64>> {
    let (h, w) = (mask.height, mask.width);
    let (sr, sc) = mask.spacing;
    // Column offset to the nearest member within each row.
    let mut row_gap: Vec<Option<usize>> = vec![None; h * w];
    let mut any = false;
    for r in 0..h {
        let row = &mask.labels[r * w..(r + 1) * w];
        let mut last: Option<usize> = None;
        for c in 0..w {
            if row[c] == class {
                last = Some(c);
                any = true;
            }
            row_gap[r * w + c] = last.map(|l| c - l);
        }
        let mut next: Option<usize> = None;
        for c in (0..w).rev() {
            if row[c] == class {
                next = Some(c);
            }
            if let Some(n) = next {
                let gap = n - c;
                let cell = &mut row_gap[r * w + c];
                if cell.is_none_or(|g| gap < g) {
                    *cell = Some(gap);
                }
            }
        }
    }
    if !any {
        return None;
    }
    let mut out = vec![f64::INFINITY; h * w];
    for c in 0..w {
        for r in 0..h {
            let mut best = f64::INFINITY;
            for r2 in 0..h {
                if let Some(gap) = row_gap[r2 * w + c] {
                    let dr = r.abs_diff(r2) as f64 * sr;
                    let dc = gap as f64 * sc;
                    best = best.min(dr * dr + dc * dc);
                }
            }
            out[r * w + c] = best;
        }
    }
    Some(out)
}

/// Nearest-rank quantile of unsorted values: the `ceil(q n)`-th smallest.
pub fn nearest_rank_percentile(values: &mut [f64], percent: usize) -> f64 {
    assert!(!values.is_empty() && (1..=100).contains(&percent));
    values.sort_unstable_by(f64::total_cmp);
    let rank = (percent * values.len()).div_ceil(100);
    values[rank - 1]
}

/// Distances from each `class` pixel of `from` to the nearest `class` pixel of `to`.
fn directed_distances(from: &LabelMask, to_map: &[f64], class: u8) -> Vec<f64> {
    from.labels
        .iter()
        .zip(to_map)
        .filter(|(&l, _)| l == class)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

/// Symmetric 95th-percentile Hausdorff distance in spacing units.
///
/// Returns `Some(0.0)` when the class is absent from both masks and `None`
/// (undefined) when it is absent from exactly one.
pub fn hd95(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<Option<f64>> {
    hausdorff_percentile(pred, gt, class, 95)
}

/// Symmetric Hausdorff distance at the given nearest-rank percentile; 100
/// gives the classical Hausdorff distance.
pub fn hausdorff_percentile(pred: &LabelMask, gt: &LabelMask, class: u8, percent: usize) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    let (dp, dg) = (squared_distance_map(pred, class), squared_distance_map(gt, class));
    match (dp, dg) {
        (None, None) => Ok(Some(0.0)),
        (Some(_), None) | (None, Some(_)) => Ok(None),
        (Some(to_pred), Some(to_gt)) => {
            let mut p2g = directed_distances(pred, &to_gt, class);
            let mut g2p = directed_distances(gt, &to_pred, class);
            let a = nearest_rank_percentile(&mut p2g, percent);
            let b = nearest_rank_percentile(&mut g2p, percent);
            Ok(Some(a.max(b)))
        }
    }
}

/// Per-class metrics (background class 0 excluded) averaged over images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Class ids `1..J`, aligned with the per-class lists.
    pub classes: Vec<u8>,
    pub per_class_dice: Vec<f64>,
    /// `None` when no image had a defined distance for the class.
    pub per_class_hd95: Vec<Option<f64>>,
    pub mean_dice: f64,
    /// Mean over classes with a defined distance.
    pub mean_hd95: Option<f64>,
    /// `(image, class)` pairs whose distance was undefined and excluded.
    pub excluded: Vec<(usize, u8)>,
}

/// Scores each image separately, then averages per class over images.
pub fn evaluate(pred: &[LabelMask], gt: &[LabelMask], classes: usize) -> Result<MetricReport> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} ground-truth masks",
            pred.len(),
            gt.len()
        )));
    }
    if !(2..=256).contains(&classes) {
        return Err(Error::Domain(format!("class count {classes} outside 2..=256")));
    }
    for (p, g) in pred.iter().zip(gt) {
        p.validate(classes)?;
        g.validate(classes)?;
    }
    let ids: Vec<u8> = (1..classes).map(|c| c as u8).collect();
    let mut per_class_dice = Vec::with_capacity(ids.len());
    let mut per_class_hd95 = Vec::with_capacity(ids.len());
    let mut excluded = Vec::new();
    for &c in &ids {
        let mut dice_sum = 0.0;
        let mut hd = Vec::new();
        for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
            dice_sum += dice_score(p, g, c)?;
            match hd95(p, g, c)? {
                Some(d) => hd.push(d),
                None => excluded.push((i, c)),
            }
        }
        per_class_dice.push(dice_sum / pred.len() as f64);
        per_class_hd95.push((!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64));
    }
    let mean_dice = per_class_dice.iter().sum::<f64>() / ids.len() as f64;
    let defined: Vec<f64> = per_class_hd95.iter().flatten().copied().collect();
    let mean_hd95 = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(MetricReport {
        classes: ids,
        per_class_dice,
        per_class_hd95,
        mean_dice,
        mean_hd95,
        excluded,
    })
}

pub const CSV_HEADER: &str = "class,dice,hd95_mm";

/// Marker for an undefined distance in CSV and tables.
pub const UNDEFINED: &str = "-";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |d| format!("{d:.6}"))
}

impl MetricReport {
    /// One row per class plus a final `mean` row; 6 decimals, LF endings.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(CSV_HEADER);
        s.push('\n');
        for (i, c) in self.classes.iter().enumerate() {
            let _ = writeln!(s, "{c},{:.6},{}", self.per_class_dice[i], fmt_opt(self.per_class_hd95[i]));
        }
        let _ = writeln!(s, "mean,{:.6},{}", self.mean_dice, fmt_opt(self.mean_hd95));
        s
    }

    /// Parses the output of [`to_csv`](Self::to_csv). Exclusions are not
    /// part of the CSV and come back empty.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::CorruptFile(format!("metric CSV: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(bad("missing header".into()));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        let parse_opt = |s: &str| if s == UNDEFINED { Ok(None) } else { parse_f(s).map(Some) };
        let mut report = MetricReport {
            classes: Vec::new(),
            per_class_dice: Vec::new(),
            per_class_hd95: Vec::new(),
            mean_dice: 0.0,
            mean_hd95: None,
            excluded: Vec::new(),
        };
        let mut saw_mean = false;
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 || saw_mean {
                return Err(bad(format!("unexpected row `{line}`")));
            }
            if cols[0] == "mean" {
                report.mean_dice = parse_f(cols[1])?;
                report.mean_hd95 = parse_opt(cols[2])?;
                saw_mean = true;
            } else {
                report.classes.push(cols[0].parse().map_err(|e| bad(format!("class `{}`: {e}", cols[0])))?);
                report.per_class_dice.push(parse_f(cols[1])?);
                report.per_class_hd95.push(parse_opt(cols[2])?);
            }
        }
        if !saw_mean {
            return Err(bad("missing mean row".into()));
        }
        Ok(report)
    }

    /// Fixed-width table: one column per class (Dice %), then mean Dice %
    /// and mean HD95 in mm, followed by a footer on excluded distances.
    pub fn format_table(&self, label: &str, class_names: Option<&[String]>) -> String {
        let names: Vec<String> = match class_names {
            Some(n) => n.to_vec(),
            None => self.classes.iter().map(|c| format!("class {c}")).collect(),
        };
        let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(8);
        let label_w = label.len().max(6);
        let mut s = String::new();
        let _ = write!(s, "{:<label_w$}", "Method");
        for n in &names {
            let _ = write!(s, " | {n:>width$}");
        }
        let _ = writeln!(s, " | {:>8} | {:>8}", "DSC %", "HD mm");
        let _ = write!(s, "{:<label_w$}", label);
        for d in &self.per_class_dice {
            let _ = write!(s, " | {:>width$.2}", d * 100.0);
        }
        let hd = self.mean_hd95.map_or_else(|| UNDEFINED.to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(s, " | {:>8.2} | {:>8}", self.mean_dice * 100.0, hd);
        if self.excluded.is_empty() {
            s.push_str("HD95 defined for every image and class.\n");
        } else {
            let _ = writeln!(
                s,
                "HD95 undefined (class present in only one mask) and excluded for {} image/class pair(s): {}",
                self.excluded.len(),
                self.excluded
                    .iter()
                    .map(|(i, c)| format!("image {i} class {c}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
        }
        s
    }
}
