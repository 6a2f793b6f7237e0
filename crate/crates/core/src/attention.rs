//! Block-causal multi-scale attention with the three conditioning
//! strategies, the first-layer scale-aligned reference mechanism, and
//! heatmap export.
//!
//! Visibility is block-granular: every token of a block sees the whole
//! block (per-scale parallel prediction) plus everything laid out before
//! it. Under SAR, layer 1 swaps the source block out of each target
//! scale's visible set and swaps in a same-size reference block holding
//! the finest source feature downsampled to that scale; all other layers
//! behave exactly like finest-scale conditioning.

use crate::codec::FeatureMap;
use crate::error::{Error, Result};
use crate::resample::area_down;
use crate::schedule::{Block, Role, ScaleSchedule, SequenceLayout, Strategy};
use ndarray::{Array2, ArrayView2};
use std::ops::Range;
use std::path::{Path, PathBuf};

/// A virtual reference block injected for one target scale (SAR layer 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefBlock {
    pub scale: usize,
    pub len: usize,
}

/// Per-layer visibility: for each layout block, the ordered list of blocks
/// its queries may attend to, plus any reference blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPlan {
    pub layer_index: usize,
    pub strategy: Strategy,
    pub visible: Vec<Vec<Block>>,
    pub sar_refs: Vec<RefBlock>,
}

impl AttentionPlan {
    /// Visible sequence ranges for layout block `b`, ascending.
    pub fn ranges(&self, b: usize) -> Vec<Range<usize>> {
        self.visible[b].iter().map(|blk| blk.range()).collect()
    }

    /// The reference block for a target scale, if this plan injects one.
    pub fn ref_for_scale(&self, scale: usize) -> Option<RefBlock> {
        self.sar_refs.iter().copied().find(|r| r.scale == scale)
    }
}

/// Build the visibility plan for one layer.
///
/// `layer_index` is 1-based. The layout must carry the source blocks the
/// strategy expects: a full-strategy plan needs a full layout, finest/SAR
/// plans need the single finest source block.
pub fn build_plan(
    layout: &SequenceLayout,
    strategy: Strategy,
    layer_index: usize,
    num_layers: usize,
) -> Result<AttentionPlan> {
    if layer_index == 0 || layer_index > num_layers {
        return Err(Error::Config(format!(
            "layer index {layer_index} out of 1..={num_layers}"
        )));
    }
    let source_count = layout.source_blocks().count();
    match strategy {
        Strategy::Full => {
            if layout.strategy != Strategy::Full {
                return Err(Error::Config(
                    "full-strategy plan needs a full layout".into(),
                ));
            }
        }
        Strategy::Finest | Strategy::Sar => {
            if source_count != 1 {
                return Err(Error::Config(format!(
                    "{} plan needs exactly one source block, layout has {source_count}",
                    strategy.name()
                )));
            }
        }
    }
    let sar_layer_one = strategy == Strategy::Sar && layer_index == 1;
    let mut visible = Vec::with_capacity(layout.blocks.len());
    let mut sar_refs = Vec::new();
    for (bi, block) in layout.blocks.iter().enumerate() {
        let causal: Vec<Block> = layout.blocks[..=bi].to_vec();
        if sar_layer_one {
            if let Role::Target { scale } = block.role {
                // Eq-style reference conditioning: the start token, the
                // scale-aligned reference, and target history; the source
                // block itself is not attended in this layer.
                visible.push(
                    causal
                        .into_iter()
                        .filter(|b| !matches!(b.role, Role::Source { .. }))
                        .collect(),
                );
                sar_refs.push(RefBlock {
                    scale,
                    len: block.token_count,
                });
                continue;
            }
        }
        visible.push(causal);
    }
    Ok(AttentionPlan {
        layer_index,
        strategy,
        visible,
        sar_refs,
    })
}

/// Plans for every layer of a model.
pub fn build_plans(
    layout: &SequenceLayout,
    strategy: Strategy,
    num_layers: usize,
) -> Result<Vec<AttentionPlan>> {
    (1..=num_layers)
        .map(|l| build_plan(layout, strategy, l, num_layers))
        .collect()
}

/// Scale-aligned reference features: the finest source feature downsampled
/// to scale k's grid. At k = K this is the source feature itself.
pub fn build_sar_reference(
    finest_source: &FeatureMap,
    schedule: &ScaleSchedule,
    k: usize,
) -> Result<FeatureMap> {
    if k == 0 || k > schedule.num_scales() {
        return Err(Error::Bounds(format!(
            "scale {k} out of 1..={}",
            schedule.num_scales()
        )));
    }
    let (h, w) = schedule.feature_hw;
    let dims = finest_source.dim();
    if (dims.0, dims.1) != (h, w) {
        return Err(Error::Shape(format!(
            "source feature {:?} is not at the finest grid ({h},{w})",
            dims
        )));
    }
    let (hk, wk) = schedule.grid(k);
    Ok(area_down(finest_source.view(), hk, wk))
}

/// Forward attention over an explicit visible set, with everything the
/// backward pass and heatmap capture need.
pub struct AttendOutput {
    /// nq x width.
    pub out: Array2<f64>,
    /// Per head: nq x n_visible attention weights.
    pub weights: Vec<Array2<f64>>,
    /// Sequence row index of each visible column; reference columns are
    /// appended after the sequence and marked in `n_ref`.
    pub vis_index: Vec<usize>,
    /// Trailing columns that came from a reference block.
    pub n_ref: usize,
    k_vis: Array2<f64>,
    v_vis: Array2<f64>,
}

/// Softmax attention of `q` against the visible rows of `k`/`v`.
///
/// `visible` lists ascending, non-overlapping row ranges; `ref_kv`, when
/// present, appends reference keys/values after them. Masked positions are
/// simply never gathered, so they get exactly zero weight. The softmax
/// subtracts the row max before exponentiating.
pub fn attend(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    visible: &[Range<usize>],
    ref_kv: Option<(ArrayView2<'_, f64>, ArrayView2<'_, f64>)>,
    heads: usize,
) -> Result<AttendOutput> {
    let width = q.ncols();
    if width == 0 || heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!(
            "width {width} not divisible into {heads} heads"
        )));
    }
    if k.ncols() != width || v.ncols() != width || k.nrows() != v.nrows() {
        return Err(Error::Shape("q/k/v width mismatch".into()));
    }
    let mut vis_index: Vec<usize> = Vec::new();
    for r in visible {
        if r.end > k.nrows() || r.start > r.end {
            return Err(Error::Bounds(format!(
                "visible range {r:?} outside {} keys",
                k.nrows()
            )));
        }
        vis_index.extend(r.clone());
    }
    let n_seq_vis = vis_index.len();
    let n_ref = ref_kv.map_or(0, |(rk, _)| rk.nrows());
    let n_vis = n_seq_vis + n_ref;
    if n_vis == 0 {
        return Err(Error::Config("query with empty visible set".into()));
    }
    if let Some((rk, rv)) = ref_kv {
        if rk.ncols() != width || rv.dim() != rk.dim() {
            return Err(Error::Shape("reference k/v shape mismatch".into()));
        }
    }

    let mut k_vis = Array2::zeros((n_vis, width));
    let mut v_vis = Array2::zeros((n_vis, width));
    for (row, &src) in vis_index.iter().enumerate() {
        k_vis.row_mut(row).assign(&k.row(src));
        v_vis.row_mut(row).assign(&v.row(src));
    }
    if let Some((rk, rv)) = ref_kv {
        for r in 0..n_ref {
            k_vis.row_mut(n_seq_vis + r).assign(&rk.row(r));
            v_vis.row_mut(n_seq_vis + r).assign(&rv.row(r));
        }
        vis_index.extend((0..n_ref).map(|r| usize::MAX - n_ref + 1 + r));
    }

    let nq = q.nrows();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((nq, width));
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k_vis.slice(ndarray::s![.., cols.clone()]);
        let vh = v_vis.slice(ndarray::s![.., cols.clone()]);
        let mut scores = qh.dot(&kh.t());
        scores *= scale;
        for mut row in scores.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let oh = scores.dot(&vh);
        out.slice_mut(ndarray::s![.., cols]).assign(&oh);
        weights.push(scores);
    }
    Ok(AttendOutput {
        out,
        weights,
        vis_index,
        n_ref,
        k_vis,
        v_vis,
    })
}

/// Gradient sink for one visible column: sequence row or reference row.
pub enum VisTarget {
    Seq(usize),
    Ref(usize),
}

impl AttendOutput {
    /// Which sink visible column `c` scatters into.
    pub fn target_of(&self, c: usize) -> VisTarget {
        let n_seq = self.vis_index.len() - self.n_ref;
        if c < n_seq {
            VisTarget::Seq(self.vis_index[c])
        } else {
            VisTarget::Ref(c - n_seq)
        }
    }
}

/// Backward through [`attend`]: accumulates dQ and scatters per-column
/// dK/dV rows through `scatter`.
pub fn attend_backward(
    cache: &AttendOutput,
    q: ArrayView2<'_, f64>,
    d_out: ArrayView2<'_, f64>,
    heads: usize,
    dq: &mut Array2<f64>,
    mut scatter: impl FnMut(VisTarget, &[f64], &[f64]),
) {
    let width = q.ncols();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n_vis = cache.k_vis.nrows();
    let mut dk_vis = Array2::zeros((n_vis, width));
    let mut dv_vis = Array2::zeros((n_vis, width));
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let a = &cache.weights[h];
        let doh = d_out.slice(ndarray::s![.., cols.clone()]);
        let vh = cache.v_vis.slice(ndarray::s![.., cols.clone()]);
        let kh = cache.k_vis.slice(ndarray::s![.., cols.clone()]);
        let qh = q.slice(ndarray::s![.., cols.clone()]);

        // dV += A^T dO
        let dvh = a.t().dot(&doh);
        dv_vis.slice_mut(ndarray::s![.., cols.clone()]).assign(&dvh);
        // dA = dO V^T, then softmax backward.
        let da = doh.dot(&vh.t());
        let mut ds = Array2::zeros(a.dim());
        for r in 0..a.nrows() {
            let dot: f64 = (0..n_vis).map(|c| a[(r, c)] * da[(r, c)]).sum();
            for c in 0..n_vis {
                ds[(r, c)] = a[(r, c)] * (da[(r, c)] - dot);
            }
        }
        let dqh = ds.dot(&kh).mapv(|x| x * scale);
        dq.slice_mut(ndarray::s![.., cols.clone()])
            .zip_mut_with(&dqh, |acc, &g| *acc += g);
        let dkh = ds.t().dot(&qh).mapv(|x| x * scale);
        dk_vis.slice_mut(ndarray::s![.., cols]).assign(&dkh);
    }
    for c in 0..n_vis {
        let dk_row: Vec<f64> = dk_vis.row(c).to_vec();
        let dv_row: Vec<f64> = dv_vis.row(c).to_vec();
        scatter(cache.target_of(c), &dk_row, &dv_row);
    }
}

/// Independent reference attention: explicit per-query scalar loops over
/// the visible set, no gathers or matrix products. Kept separate from
/// [`attend`] as the oracle the test suite compares against.
pub mod oracle {
    use super::*;

    pub fn naive_attend(
        q: ArrayView2<'_, f64>,
        k: ArrayView2<'_, f64>,
        v: ArrayView2<'_, f64>,
        visible: &[Range<usize>],
        ref_kv: Option<(ArrayView2<'_, f64>, ArrayView2<'_, f64>)>,
        heads: usize,
    ) -> Array2<f64> {
        let width = q.ncols();
        let dh = width / heads;
        let nq = q.nrows();
        let mut out = Array2::zeros((nq, width));
        for qi in 0..nq {
            for h in 0..heads {
                let base = h * dh;
                // Collect logits over every visible position, one by one.
                let mut logits: Vec<f64> = Vec::new();
                let mut values: Vec<Vec<f64>> = Vec::new();
                let push = |key: &[f64], val: &[f64], logits: &mut Vec<f64>, values: &mut Vec<Vec<f64>>| {
                    let mut dot = 0.0;
                    for d in 0..dh {
                        dot += q[(qi, base + d)] * key[d];
                    }
                    logits.push(dot / (dh as f64).sqrt());
                    values.push(val.to_vec());
                };
                for range in visible {
                    for r in range.clone() {
                        let key: Vec<f64> = (0..dh).map(|d| k[(r, base + d)]).collect();
                        let val: Vec<f64> = (0..dh).map(|d| v[(r, base + d)]).collect();
                        push(&key, &val, &mut logits, &mut values);
                    }
                }
                if let Some((rk, rv)) = ref_kv {
                    for r in 0..rk.nrows() {
                        let key: Vec<f64> = (0..dh).map(|d| rk[(r, base + d)]).collect();
                        let val: Vec<f64> = (0..dh).map(|d| rv[(r, base + d)]).collect();
                        push(&key, &val, &mut logits, &mut values);
                    }
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for d in 0..dh {
                    let mut acc = 0.0;
                    for (e, val) in exps.iter().zip(&values) {
                        acc += e / sum * val[d];
                    }
                    out[(qi, base + d)] = acc;
                }
            }
        }
        out
    }
}

/// Column role in a captured heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColRole {
    Source,
    Start,
    Target,
    Reference,
}

/// One layer's block-averaged attention mass: rows are target scales,
/// columns are the visible blocks (plus reference columns under SAR).
#[derive(Debug, Clone)]
pub struct LayerHeatmap {
    pub layer: usize,
    pub col_labels: Vec<String>,
    pub col_roles: Vec<ColRole>,
    /// num_target_scales x num_columns; each row sums to 1.
    pub rows: Array2<f64>,
}

impl LayerHeatmap {
    /// Mean over target scales of the entropy of the row mass restricted to
    /// source-conditioning columns (source blocks, plus references under
    /// SAR), renormalized to a distribution. Rows with no source mass are
    /// skipped.
    pub fn source_entropy(&self) -> f64 {
        let src_cols: Vec<usize> = self
            .col_roles
            .iter()
            .enumerate()
            .filter(|(_, r)| matches!(r, ColRole::Source | ColRole::Reference))
            .map(|(i, _)| i)
            .collect();
        let mut total = 0.0;
        let mut rows_used = 0usize;
        for row in self.rows.rows() {
            let mass: f64 = src_cols.iter().map(|&c| row[c]).sum();
            if mass < 1e-12 {
                continue;
            }
            let mut h = 0.0;
            for &c in &src_cols {
                let p = row[c] / mass;
                if p > 0.0 {
                    h -= p * p.ln();
                }
            }
            total += h;
            rows_used += 1;
        }
        if rows_used == 0 {
            0.0
        } else {
            total / rows_used as f64
        }
    }
}

/// Write per-layer heatmaps as `attn_L{layer}.mat` files: first line
/// `rows cols`, then one space-separated line per row.
pub fn dump_attention(dir: &Path, heatmaps: &[LayerHeatmap]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for hm in heatmaps {
        let path = dir.join(format!("attn_L{}.mat", hm.layer));
        let (r, c) = hm.rows.dim();
        let mut text = format!("{r} {c}\n");
        for row in hm.rows.rows() {
            let line: Vec<String> = row.iter().map(|x| format!("{x:.9}")).collect();
            text.push_str(&line.join(" "));
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
