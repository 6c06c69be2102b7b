//! Twin runs differing in one architecture setting, reported as tables.

use std::fmt::Write;
use std::path::Path;

use crate::error::Result;
use crate::metrics::{MetricReport, UNDEFINED};
use crate::nn::UpsampleMode;
use crate::train::config::RunConfig;
use crate::train::trainer::{SplitKind, Trainer};

/// One trained variant.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub config: RunConfig,
    pub report: MetricReport,
    pub final_loss: f64,
}

/// Trains `cfg`, writing its run to `out/<dir>` when `out` is given, and
/// scores the holdout split (the training split when there is no holdout).
fn run_variant(label: String, cfg: RunConfig, out: Option<&Path>, dir: &str) -> Result<AblationRow> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let run_dir = out.map(|o| o.join(dir));
    let manifest = trainer.fit(run_dir.as_deref())?;
    let split = if cfg.holdout_images > 0 { SplitKind::Holdout } else { SplitKind::Train };
    log::info!("{label}: final loss {:?}", manifest.loss_trace.last());
    Ok(AblationRow {
        label,
        report: manifest.reports[split.label()].clone(),
        final_loss: manifest.loss_trace.last().copied().unwrap_or(f64::NAN),
        config: cfg,
    })
}

fn table(rows: &[AblationRow]) -> String {
    let classes = rows.first().map_or(&[][..], |r| &r.report.classes[..]);
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = write!(s, "{:<label_w$}", "Method");
    for c in classes {
        let _ = write!(s, " | {:>9}", format!("class {c}"));
    }
    let _ = writeln!(s, " | {:>9} | {:>9}", "DSC %", "HD95 mm");
    for r in rows {
        let _ = write!(s, "{:<label_w$}", r.label);
        for d in &r.report.per_class_dice {
            let _ = write!(s, " | {:>9.2}", d * 100.0);
        }
        let hd = r.report.mean_hd95.map_or_else(|| UNDEFINED.to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(s, " | {:>9.2} | {:>9}", r.report.mean_dice * 100.0, hd);
    }
    s
}

fn observed(flag: bool) -> &'static str {
    if flag {
        "observed"
    } else {
        "not observed"
    }
}

/// Bilinear versus transposed-convolution decoder upsampling.
#[derive(Clone, Debug)]
pub struct UpsampleAblation {
    /// Exactly two rows, labelled `BI` then `TC`.
    pub rows: Vec<AblationRow>,
}

impl UpsampleAblation {
    /// Whether transposed convolution scored at least as well as bilinear.
    pub fn tc_at_least_bi(&self) -> bool {
        self.rows[1].report.mean_dice >= self.rows[0].report.mean_dice
    }

    pub fn format(&self) -> String {
        let mut s = String::from("Decoder upsampling ablation (Dice per class, mean Dice, mean HD95)\n");
        s.push_str(&table(&self.rows));
        let _ = writeln!(
            s,
            "Reference direction TC >= BI (full-scale mean Dice 78.53 vs 77.24): {}",
            observed(self.tc_at_least_bi())
        );
        s
    }
}

/// Trains `base` twice, differing only in the upsampling mode. Both runs
/// share the seed, so they see identical data and batch order.
pub fn ablate_upsampling(base: &RunConfig, out: Option<&Path>) -> Result<UpsampleAblation> {
    let mut rows = Vec::with_capacity(2);
    for mode in [UpsampleMode::Bilinear, UpsampleMode::TransposedConv] {
        let mut cfg = base.clone();
        cfg.model.upsample_mode = mode;
        rows.push(run_variant(mode.label().to_string(), cfg, out, mode.label())?);
    }
    Ok(UpsampleAblation { rows })
}

/// Depth versus embedding-width grid.
#[derive(Clone, Debug)]
pub struct ScaleAblation {
    pub depths: Vec<usize>,
    pub dims: Vec<usize>,
    /// Row-major over `depths x dims`.
    pub rows: Vec<AblationRow>,
}

impl ScaleAblation {
    /// `(depth, dim)` of the row with the highest mean Dice; the first such
    /// row wins ties.
    pub fn best(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, r) in self.rows.iter().enumerate() {
            if r.report.mean_dice > self.rows[best].report.mean_dice {
                best = i;
            }
        }
        (self.rows[best].config.model.depth, self.rows[best].config.model.embed_dim)
    }

    pub fn format(&self) -> String {
        let mut s = String::from(
            "Depth and embedding width ablation (Dice per class, mean Dice, mean HD95)\n\
             Reference full-scale best cell: L=4, d=384 (ET Dice 72.06)\n",
        );
        s.push_str(&table(&self.rows));
        let (l, d) = self.best();
        // The smallest width here stands in for d=384.
        let target = (self.depths.iter().copied().max(), self.dims.iter().copied().min());
        let _ = writeln!(
            s,
            "Best cell here: L={l}, d={d}; reference direction (deepest L with the narrower width best): {}",
            observed(target == (Some(l), Some(d)))
        );
        s
    }
}

/// Trains one run per `(depth, dim)` pair of the grid.
pub fn ablate_scale(base: &RunConfig, depths: &[usize], dims: &[usize], out: Option<&Path>) -> Result<ScaleAblation> {
    let mut rows = Vec::with_capacity(depths.len() * dims.len());
    for &l in depths {
        for &d in dims {
            let mut cfg = base.clone();
            cfg.model.depth = l;
            cfg.model.embed_dim = d;
            rows.push(run_variant(format!("L={l}, d={d}"), cfg, out, &format!("L{l}_d{d}"))?);
        }
    }
    Ok(ScaleAblation {
        depths: depths.to_vec(),
        dims: dims.to_vec(),
        rows,
    })
}
