//! Editing-quality metrics: exact region-based scores for synthetic pairs,
//! the success/overedit balance math, and per-category aggregation.

use crate::datagen::EditSample;
use crate::error::{Error, Result};
use crate::img::Rgb8;
use std::collections::BTreeMap;

/// Per-channel tolerance when comparing pixels; absorbs codec
/// reconstruction error.
pub const PIXEL_TOLERANCE: u8 = 8;

/// Scores on the 0-10 scale for one edited sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleScores {
    /// Instruction adherence inside the edited region.
    pub success: f64,
    /// Preservation everywhere else.
    pub overedit: f64,
    /// Harmonic mean of the two.
    pub balance: f64,
}

fn check_range(name: &str, v: f64) -> Result<()> {
    if !(0.0..=10.0).contains(&v) || !v.is_finite() {
        return Err(Error::Data(format!("{name} score {v} outside [0, 10]")));
    }
    Ok(())
}

/// Harmonic mean of success and overedit: `2so / (s + o)`, zero whenever
/// either side is zero.
pub fn balance(success: f64, overedit: f64) -> Result<f64> {
    check_range("success", success)?;
    check_range("overedit", overedit)?;
    if success == 0.0 || overedit == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * success * overedit / (success + overedit))
}

impl SampleScores {
    pub fn new(success: f64, overedit: f64) -> Result<SampleScores> {
        Ok(SampleScores {
            success,
            overedit,
            balance: balance(success, overedit)?,
        })
    }
}

/// External judge interface: scores (success, overedit) on 0-10 for an
/// edit. Network-backed judges implement this; the synthetic scorer below
/// is the deterministic stand-in.
pub trait EditJudge {
    fn score(&self, source: &Rgb8, edited: &Rgb8, instruction: &str) -> Result<(f64, f64)>;
}

/// Extension point for embedding-similarity metrics; intentionally left
/// without a bundled implementation (needs an external vision-language
/// encoder).
pub trait EmbeddingScorer {
    fn directional_similarity(&self, source: &Rgb8, edited: &Rgb8, instruction: &str) -> Result<f64>;
}

fn pixels_match(a: [u8; 3], b: [u8; 3]) -> bool {
    a.iter()
        .zip(b.iter())
        .all(|(&x, &y)| x.abs_diff(y) <= PIXEL_TOLERANCE)
}

/// Exact synthetic scores: success is the fraction of in-region pixels
/// within tolerance of the target, overedit the fraction of out-of-region
/// pixels within tolerance of the source, both scaled to 0-10.
pub fn synthetic_scores(sample: &EditSample, edited: &Rgb8) -> Result<SampleScores> {
    let (h, w) = (sample.source.height, sample.source.width);
    if edited.height != h || edited.width != w {
        return Err(Error::Shape(format!(
            "edited image {}x{} does not match sample {}x{}",
            edited.width, edited.height, w, h
        )));
    }
    let r = sample.region;
    if r.x1 > w || r.y1 > h || r.x0 >= r.x1 || r.y0 >= r.y1 {
        return Err(Error::Data(format!("region {r:?} outside {w}x{h} image")));
    }
    let mut in_total = 0usize;
    let mut in_ok = 0usize;
    let mut out_total = 0usize;
    let mut out_ok = 0usize;
    for y in 0..h {
        for x in 0..w {
            let e = edited.get(y, x);
            if r.contains(x, y) {
                in_total += 1;
                if pixels_match(e, sample.target.get(y, x)) {
                    in_ok += 1;
                }
            } else {
                out_total += 1;
                if pixels_match(e, sample.source.get(y, x)) {
                    out_ok += 1;
                }
            }
        }
    }
    let success = 10.0 * in_ok as f64 / in_total as f64;
    // A region covering the whole image leaves nothing to overedit.
    let overedit = if out_total == 0 {
        10.0
    } else {
        10.0 * out_ok as f64 / out_total as f64
    };
    SampleScores::new(success, overedit)
}

/// Mean scores for one category of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryRow {
    pub category: String,
    pub count: usize,
    pub success: f64,
    pub overedit: f64,
    pub balance: f64,
}

/// Per-category and overall arithmetic means. Balance is averaged over
/// per-sample balances, never recomputed from the aggregated success and
/// overedit means.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub categories: Vec<CategoryRow>,
    pub overall: CategoryRow,
}

pub fn aggregate(scores: &[(String, SampleScores)]) -> Result<Report> {
    if scores.is_empty() {
        return Err(Error::Data("cannot aggregate an empty score list".into()));
    }
    let mut buckets: BTreeMap<&str, Vec<&SampleScores>> = BTreeMap::new();
    for (cat, s) in scores {
        buckets.entry(cat.as_str()).or_default().push(s);
    }
    let row = |name: &str, items: &[&SampleScores]| {
        let n = items.len() as f64;
        CategoryRow {
            category: name.to_string(),
            count: items.len(),
            success: items.iter().map(|s| s.success).sum::<f64>() / n,
            overedit: items.iter().map(|s| s.overedit).sum::<f64>() / n,
            balance: items.iter().map(|s| s.balance).sum::<f64>() / n,
        }
    };
    let categories = buckets
        .iter()
        .map(|(name, items)| row(name, items))
        .collect();
    let all: Vec<&SampleScores> = scores.iter().map(|(_, s)| s).collect();
    Ok(Report {
        categories,
        overall: row("overall", &all),
    })
}

impl Report {
    /// Table mirroring the Suc./Over./Bal. column layout.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>6} {:>7} {:>7} {:>7}\n",
            "category", "n", "Suc.", "Over.", "Bal."
        ));
        for row in self.categories.iter().chain(std::iter::once(&self.overall)) {
            out.push_str(&format!(
                "{:<12} {:>6} {:>7.3} {:>7.3} {:>7.3}\n",
                row.category, row.count, row.success, row.overedit, row.balance
            ));
        }
        out
    }

    /// One machine-readable line per category:
    /// `category<TAB>count<TAB>success<TAB>overedit<TAB>balance`.
    pub fn machine_lines(&self) -> String {
        self.categories
            .iter()
            .chain(std::iter::once(&self.overall))
            .map(|r| {
                format!(
                    "{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
                    r.category, r.count, r.success, r.overedit, r.balance
                )
            })
            .collect()
    }
}
