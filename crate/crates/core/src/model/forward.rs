//! Teacher-forced forward pass with full activation caching for the manual
//! backward, plus logits readout, loss, and attention-heatmap capture.

use super::seq::BuiltSequence;
use super::Model;
use crate::attention::{attend, build_plans, AttendOutput, AttentionPlan, ColRole, LayerHeatmap};
use crate::codec::ResidualStack;
use crate::error::{Error, Result};
use crate::rope::{apply_rope, RopeCoord};
use crate::schedule::Role;
use ndarray::{Array1, Array2, Array3};

pub(crate) const RMS_EPS: f64 = 1e-6;

/// Row-wise RMS norm with gain; returns the normalized rows and each row's
/// 1/rms for the backward pass.
pub(crate) fn rmsnorm_rows(x: &Array2<f64>, gain: &Array1<f64>) -> (Array2<f64>, Vec<f64>) {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    let mut invs = Vec::with_capacity(n);
    for r in 0..n {
        let ms: f64 = x.row(r).iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for c in 0..d {
            out[(r, c)] = x[(r, c)] * inv * gain[c];
        }
        invs.push(inv);
    }
    (out, invs)
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_deriv(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Rotate each row of a q/k matrix by its position's coordinate, one head
/// at a time.
pub(crate) fn rope_rows(mat: &mut Array2<f64>, coords: &[RopeCoord], heads: usize) -> Result<()> {
    let width = mat.ncols();
    let dh = width / heads;
    for (r, coord) in coords.iter().enumerate() {
        let mut row = mat.row_mut(r);
        let row = row.as_slice_mut().expect("contiguous row");
        for h in 0..heads {
            apply_rope(&mut row[h * dh..(h + 1) * dh], *coord)?;
        }
    }
    Ok(())
}

/// Cached reference-block projections for SAR layer 1.
pub(crate) struct RefCache {
    pub scale: usize,
    pub norm: Array2<f64>,
    pub inv: Vec<f64>,
    pub k_roped: Array2<f64>,
    pub v: Array2<f64>,
}

pub(crate) struct LayerCache {
    pub x_in: Array2<f64>,
    pub n1: Array2<f64>,
    pub inv1: Vec<f64>,
    pub q_roped: Array2<f64>,
    /// One attend cache per layout block, in block order.
    pub attends: Vec<AttendOutput>,
    pub refs: Vec<RefCache>,
    pub attn_concat: Array2<f64>,
    pub x2: Array2<f64>,
    pub nc: Array2<f64>,
    pub invc: Vec<f64>,
    pub qc: Array2<f64>,
    pub cross: AttendOutput,
    pub x3: Array2<f64>,
    pub n2: Array2<f64>,
    pub inv2: Vec<f64>,
    pub h_pre: Array2<f64>,
    pub h_act: Array2<f64>,
}

pub struct ForwardCache {
    pub seq: BuiltSequence,
    pub(crate) plans: Vec<AttentionPlan>,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) x_final: Array2<f64>,
    pub(crate) nf: Array2<f64>,
    pub(crate) invf: Vec<f64>,
    /// Sequence row of each target cell, scale 1..K row-major.
    pub target_rows: Vec<usize>,
    /// Readout logits, one row per target cell.
    pub logits: Array2<f64>,
}

/// Run the model over an assembled sequence, keeping every intermediate.
pub fn forward_cached(model: &Model, seq: BuiltSequence) -> Result<ForwardCache> {
    let config = &model.config;
    let params = &model.params;
    let plans = build_plans(&seq.layout, config.strategy, config.layers)?;
    let coords = seq.coords();
    let heads = config.heads;

    let mut x = seq.embeddings();
    let mut layer_caches = Vec::with_capacity(config.layers);
    for (l, lp) in params.layers.iter().enumerate() {
        let plan = &plans[l];
        let x_in = x;
        let (n1, inv1) = rmsnorm_rows(&x_in, &lp.ln1);
        let mut q_roped = n1.dot(&lp.wq);
        let mut k_roped = n1.dot(&lp.wk);
        let v = n1.dot(&lp.wv);
        rope_rows(&mut q_roped, &coords, heads)?;
        rope_rows(&mut k_roped, &coords, heads)?;

        // Reference keys/values share layer-1 weights and norm.
        let refs: Vec<RefCache> = if plan.sar_refs.is_empty() {
            Vec::new()
        } else {
            seq.refs
                .iter()
                .map(|r| {
                    let (norm, inv) = rmsnorm_rows(&r.emb, &lp.ln1);
                    let mut k_ref = norm.dot(&lp.wk);
                    rope_rows(&mut k_ref, &r.coords, heads)?;
                    let v_ref = norm.dot(&lp.wv);
                    Ok(RefCache {
                        scale: r.scale,
                        norm,
                        inv,
                        k_roped: k_ref,
                        v: v_ref,
                    })
                })
                .collect::<Result<_>>()?
        };

        let mut attn_concat = Array2::zeros(x_in.dim());
        let mut attends = Vec::with_capacity(seq.layout.blocks.len());
        for (bi, block) in seq.layout.blocks.iter().enumerate() {
            let rows = block.range();
            let q_block = q_roped.slice(ndarray::s![rows.clone(), ..]);
            let ref_kv = match block.role {
                Role::Target { scale } if plan.ref_for_scale(scale).is_some() => refs
                    .iter()
                    .find(|r| r.scale == scale)
                    .map(|r| (r.k_roped.view(), r.v.view())),
                _ => None,
            };
            let out = attend(
                q_block,
                k_roped.view(),
                v.view(),
                &plan.ranges(bi),
                ref_kv,
                heads,
            )?;
            attn_concat
                .slice_mut(ndarray::s![rows, ..])
                .assign(&out.out);
            attends.push(out);
        }
        let x2 = &x_in + &attn_concat.dot(&lp.wo);

        let (nc, invc) = rmsnorm_rows(&x2, &lp.lnc);
        let qc = nc.dot(&lp.cq);
        let text_k = seq.text.embeddings.dot(&lp.ck);
        let text_v = seq.text.embeddings.dot(&lp.cv);
        let cross = attend(
            qc.view(),
            text_k.view(),
            text_v.view(),
            &[0..seq.text.len()],
            None,
            heads,
        )?;
        let x3 = &x2 + &cross.out.dot(&lp.co);

        let (n2, inv2) = rmsnorm_rows(&x3, &lp.ln2);
        let h_pre = n2.dot(&lp.fc1) + &lp.b1;
        let h_act = h_pre.mapv(silu);
        let x4 = &x3 + &(h_act.dot(&lp.fc2) + &lp.b2);

        layer_caches.push(LayerCache {
            x_in,
            n1,
            inv1,
            q_roped,
            attends,
            refs,
            attn_concat,
            x2,
            nc,
            invc,
            qc,
            cross,
            x3,
            n2,
            inv2,
            h_pre,
            h_act,
        });
        x = x4;
    }

    let x_final = x;
    let (nf, invf) = rmsnorm_rows(&x_final, &params.ln_f);

    let mut target_rows = Vec::new();
    for block in &seq.layout.blocks {
        if matches!(block.role, Role::Target { .. }) {
            target_rows.extend(block.range());
        }
    }
    let mut gathered = Array2::zeros((target_rows.len(), config.width));
    for (i, &row) in target_rows.iter().enumerate() {
        gathered.row_mut(i).assign(&nf.row(row));
    }
    let logits = gathered.dot(&params.head_w) + &params.head_b;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }

    Ok(ForwardCache {
        seq,
        plans,
        layers: layer_caches,
        x_final,
        nf,
        invf,
        target_rows,
        logits,
    })
}

impl ForwardCache {
    /// Split the flat logits into per-scale (h_k, w_k, V) stacks.
    pub fn logits_per_scale(&self) -> Vec<Array3<f64>> {
        let vocab = self.logits.ncols();
        let mut stacks = Vec::new();
        let mut row = 0;
        for k in 1..=self.seq.schedule.num_scales() {
            let (h, w) = self.seq.schedule.grid(k);
            let mut a = Array3::zeros((h, w, vocab));
            for i in 0..h {
                for j in 0..w {
                    for c in 0..vocab {
                        a[(i, j, c)] = self.logits[(row + i * w + j, c)];
                    }
                }
            }
            row += h * w;
            stacks.push(a);
        }
        stacks
    }
}

/// Public forward: per-scale logits without retaining activations.
pub fn forward(model: &Model, seq: BuiltSequence) -> Result<Vec<Array3<f64>>> {
    let cache = forward_cached(model, seq)?;
    Ok(cache.logits_per_scale())
}

/// Ground-truth indices flattened in readout order (scale 1..K, row-major).
pub fn flatten_targets(stack: &ResidualStack) -> Vec<usize> {
    let mut out = Vec::new();
    for map in &stack.maps {
        for &idx in map.iter() {
            out.push(idx);
        }
    }
    out
}

/// Mean cross-entropy over all target cells; also returns per-cell
/// probabilities for the backward pass.
pub fn loss_and_probs(logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, vocab) = logits.dim();
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} targets",
            n,
            targets.len()
        )));
    }
    let mut probs = Array2::zeros((n, vocab));
    let mut loss = 0.0;
    for r in 0..n {
        let t = targets[r];
        if t >= vocab {
            return Err(Error::Data(format!("target index {t} out of vocab {vocab}")));
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..vocab {
            let e = (row[c] - max).exp();
            probs[(r, c)] = e;
            sum += e;
        }
        for c in 0..vocab {
            probs[(r, c)] /= sum;
        }
        loss -= probs[(r, t)].ln();
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok((loss, probs))
}

/// Mean cross-entropy of a per-scale logits stack against ground truth.
pub fn loss_of_logits(logits: &[Array3<f64>], gt: &ResidualStack) -> Result<f64> {
    if logits.len() != gt.maps.len() {
        return Err(Error::Shape(format!(
            "{} logit scales vs {} ground-truth maps",
            logits.len(),
            gt.maps.len()
        )));
    }
    let mut flat_rows = Vec::new();
    let mut targets = Vec::new();
    for (l, map) in logits.iter().zip(&gt.maps) {
        let (h, w, vocab) = l.dim();
        if (h, w) != map.dim() {
            return Err(Error::Shape("logits grid mismatch".into()));
        }
        for i in 0..h {
            for j in 0..w {
                let mut row = Vec::with_capacity(vocab);
                for c in 0..vocab {
                    row.push(l[(i, j, c)]);
                }
                flat_rows.push(row);
                targets.push(map[(i, j)]);
            }
        }
    }
    let vocab = flat_rows[0].len();
    let mut flat = Array2::zeros((flat_rows.len(), vocab));
    for (r, row) in flat_rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            flat[(r, c)] = *v;
        }
    }
    Ok(loss_and_probs(&flat, &targets)?.0)
}

/// Block-averaged attention-mass heatmaps, one per layer: rows are target
/// scales, columns are layout blocks plus a trailing reference column.
pub fn capture_heatmaps(cache: &ForwardCache) -> Vec<LayerHeatmap> {
    let layout = &cache.seq.layout;
    let mut col_labels: Vec<String> = layout
        .blocks
        .iter()
        .map(|b| match b.role {
            Role::Source { scale } => format!("src{scale}"),
            Role::Start => "start".into(),
            Role::Target { scale } => format!("tgt{scale}"),
        })
        .collect();
    let mut col_roles: Vec<ColRole> = layout
        .blocks
        .iter()
        .map(|b| match b.role {
            Role::Source { .. } => ColRole::Source,
            Role::Start => ColRole::Start,
            Role::Target { .. } => ColRole::Target,
        })
        .collect();
    let has_ref = cache.layers.iter().any(|lc| !lc.refs.is_empty());
    if has_ref {
        col_labels.push("ref".into());
        col_roles.push(ColRole::Reference);
    }
    let n_cols = col_labels.len();
    let target_blocks: Vec<usize> = layout
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| matches!(b.role, Role::Target { .. }))
        .map(|(i, _)| i)
        .collect();

    cache
        .layers
        .iter()
        .enumerate()
        .map(|(l, lc)| {
            let plan = &cache.plans[l];
            let mut rows = Array2::zeros((target_blocks.len(), n_cols));
            for (ri, &bi) in target_blocks.iter().enumerate() {
                let att = &lc.attends[bi];
                // Column segments follow the plan's visible blocks in order,
                // then the reference block.
                let mut mass = vec![0.0f64; n_cols];
                let heads = att.weights.len();
                let nq = att.weights[0].nrows();
                let mut col = 0usize;
                for vis_block in &plan.visible[bi] {
                    let seg = vis_block.token_count;
                    let target_col = layout
                        .blocks
                        .iter()
                        .position(|b| b.role == vis_block.role)
                        .unwrap();
                    for w in &att.weights {
                        for q in 0..nq {
                            for c in col..col + seg {
                                mass[target_col] += w[(q, c)];
                            }
                        }
                    }
                    col += seg;
                }
                if att.n_ref > 0 {
                    for w in &att.weights {
                        for q in 0..nq {
                            for c in col..col + att.n_ref {
                                mass[n_cols - 1] += w[(q, c)];
                            }
                        }
                    }
                }
                let denom = (heads * nq) as f64;
                for (c, m) in mass.into_iter().enumerate() {
                    rows[(ri, c)] = m / denom;
                }
            }
            LayerHeatmap {
                layer: l + 1,
                col_labels: col_labels.clone(),
                col_roles: col_roles.clone(),
                rows,
            }
        })
        .collect()
}
