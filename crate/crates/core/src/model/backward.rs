//! Reverse pass: cross-entropy through the head, final norm, each block's
//! MLP / cross-attention / plan-masked self-attention (including the SAR
//! reference key/value paths), down to the embedding projections, scale
//! embeddings, and text table.

use super::forward::{loss_and_probs, silu_deriv, ForwardCache};
use super::seq::BlockContent;
use super::{Model, ModelParams, TrainItem};
use crate::attention::{attend_backward, VisTarget};
use crate::codec::Codebook;
use crate::error::Result;
use crate::rope::{apply_rope_inverse, RopeCoord};
use crate::text::{TextCondition, TextTokenId};
use ndarray::{Array1, Array2, Axis};

fn rope_rows_inverse(mat: &mut Array2<f64>, coords: &[RopeCoord], heads: usize) -> Result<()> {
    let width = mat.ncols();
    let dh = width / heads;
    for (r, coord) in coords.iter().enumerate() {
        let mut row = mat.row_mut(r);
        let row = row.as_slice_mut().expect("contiguous row");
        for h in 0..heads {
            apply_rope_inverse(&mut row[h * dh..(h + 1) * dh], *coord)?;
        }
    }
    Ok(())
}

/// dx rows for a gained RMS norm, accumulating the gain gradient.
fn rmsnorm_backward(
    d_out: &Array2<f64>,
    x: &Array2<f64>,
    invs: &[f64],
    gain: &Array1<f64>,
    d_gain: &mut Array1<f64>,
) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut dx = Array2::zeros((n, d));
    for r in 0..n {
        let inv = invs[r];
        let mut dot = 0.0;
        for c in 0..d {
            d_gain[c] += d_out[(r, c)] * x[(r, c)] * inv;
            dot += gain[c] * d_out[(r, c)] * x[(r, c)];
        }
        let correction = inv * inv * inv * dot / d as f64;
        for c in 0..d {
            dx[(r, c)] = inv * gain[c] * d_out[(r, c)] - x[(r, c)] * correction;
        }
    }
    dx
}

/// Full backward through a cached forward pass. Returns the loss and
/// parameter gradients.
pub fn backward(
    model: &Model,
    cache: &ForwardCache,
    targets: &[usize],
) -> Result<(f64, ModelParams)> {
    let config = &model.config;
    let params = &model.params;
    let seq = &cache.seq;
    let heads = config.heads;
    let n = seq.layout.total_len;
    let width = config.width;
    let coords = seq.coords();
    let mut grads = model.zeros_like();

    let (loss, probs) = loss_and_probs(&cache.logits, targets)?;

    // Cross-entropy + head.
    let cells = targets.len();
    let mut d_logits = probs;
    for (r, &t) in targets.iter().enumerate() {
        d_logits[(r, t)] -= 1.0;
    }
    d_logits /= cells as f64;
    let mut gathered = Array2::zeros((cells, width));
    for (i, &row) in cache.target_rows.iter().enumerate() {
        gathered.row_mut(i).assign(&cache.nf.row(row));
    }
    grads.head_w += &gathered.t().dot(&d_logits);
    grads.head_b += &d_logits.sum_axis(Axis(0));
    let d_gathered = d_logits.dot(&params.head_w.t());
    let mut d_nf = Array2::zeros((n, width));
    for (i, &row) in cache.target_rows.iter().enumerate() {
        let mut dst = d_nf.row_mut(row);
        dst += &d_gathered.row(i);
    }

    // Final norm.
    let mut dx = rmsnorm_backward(&d_nf, &cache.x_final, &cache.invf, &params.ln_f, &mut grads.ln_f);

    // Text-embedding gradient accumulator (cross-attention + pooled paths).
    let mut d_tex = Array2::zeros(seq.text.embeddings.dim());

    for l in (0..config.layers).rev() {
        let lc = &cache.layers[l];
        let lp = &params.layers[l];
        let lg = &mut grads.layers[l];
        let d_x4 = dx;

        // MLP branch.
        lg.fc2 += &lc.h_act.t().dot(&d_x4);
        lg.b2 += &d_x4.sum_axis(Axis(0));
        let d_h_act = d_x4.dot(&lp.fc2.t());
        let mut d_h_pre = d_h_act;
        d_h_pre.zip_mut_with(&lc.h_pre, |g, &h| *g *= silu_deriv(h));
        lg.fc1 += &lc.n2.t().dot(&d_h_pre);
        lg.b1 += &d_h_pre.sum_axis(Axis(0));
        let d_n2 = d_h_pre.dot(&lp.fc1.t());
        let d_from_mlp = rmsnorm_backward(&d_n2, &lc.x3, &lc.inv2, &lp.ln2, &mut lg.ln2);
        let d_x3 = &d_x4 + &d_from_mlp;

        // Cross-attention branch.
        lg.co += &lc.cross.out.t().dot(&d_x3);
        let d_cc = d_x3.dot(&lp.co.t());
        let mut d_qc = Array2::zeros((n, width));
        let text_len = seq.text.len();
        let mut d_text_k = Array2::zeros((text_len, width));
        let mut d_text_v = Array2::zeros((text_len, width));
        attend_backward(
            &lc.cross,
            lc.qc.view(),
            d_cc.view(),
            heads,
            &mut d_qc,
            |t, dkr, dvr| match t {
                VisTarget::Seq(row) => {
                    for (c, (a, b)) in dkr.iter().zip(dvr).enumerate() {
                        d_text_k[(row, c)] += a;
                        d_text_v[(row, c)] += b;
                    }
                }
                VisTarget::Ref(_) => unreachable!("cross-attention has no reference blocks"),
            },
        );
        lg.cq += &lc.nc.t().dot(&d_qc);
        let d_nc = d_qc.dot(&lp.cq.t());
        lg.ck += &seq.text.embeddings.t().dot(&d_text_k);
        lg.cv += &seq.text.embeddings.t().dot(&d_text_v);
        d_tex += &d_text_k.dot(&lp.ck.t());
        d_tex += &d_text_v.dot(&lp.cv.t());
        let d_from_cross = rmsnorm_backward(&d_nc, &lc.x2, &lc.invc, &lp.lnc, &mut lg.lnc);
        let d_x2 = &d_x3 + &d_from_cross;

        // Self-attention branch.
        lg.wo += &lc.attn_concat.t().dot(&d_x2);
        let d_ac = d_x2.dot(&lp.wo.t());
        let mut d_q = Array2::zeros((n, width));
        let mut d_k = Array2::zeros((n, width));
        let mut d_v = Array2::zeros((n, width));
        let mut d_ref_k: Vec<Array2<f64>> = lc
            .refs
            .iter()
            .map(|r| Array2::zeros(r.k_roped.dim()))
            .collect();
        let mut d_ref_v: Vec<Array2<f64>> = lc
            .refs
            .iter()
            .map(|r| Array2::zeros(r.v.dim()))
            .collect();
        for (bi, block) in seq.layout.blocks.iter().enumerate() {
            let rows = block.range();
            let att = &lc.attends[bi];
            let ref_idx = lc
                .refs
                .iter()
                .position(|r| Some(r.scale) == block.role.scale() && att.n_ref > 0);
            let q_block = lc.q_roped.slice(ndarray::s![rows.clone(), ..]);
            let d_out_block = d_ac.slice(ndarray::s![rows.clone(), ..]);
            let mut d_q_block = Array2::zeros((block.token_count, width));
            attend_backward(
                att,
                q_block,
                d_out_block,
                heads,
                &mut d_q_block,
                |t, dkr, dvr| match t {
                    VisTarget::Seq(row) => {
                        for (c, (a, b)) in dkr.iter().zip(dvr).enumerate() {
                            d_k[(row, c)] += a;
                            d_v[(row, c)] += b;
                        }
                    }
                    VisTarget::Ref(row) => {
                        let ri = ref_idx.expect("reference gradient without a reference block");
                        for (c, (a, b)) in dkr.iter().zip(dvr).enumerate() {
                            d_ref_k[ri][(row, c)] += a;
                            d_ref_v[ri][(row, c)] += b;
                        }
                    }
                },
            );
            let mut dst = d_q.slice_mut(ndarray::s![rows, ..]);
            dst += &d_q_block;
        }
        rope_rows_inverse(&mut d_q, &coords, heads)?;
        rope_rows_inverse(&mut d_k, &coords, heads)?;
        lg.wq += &lc.n1.t().dot(&d_q);
        lg.wk += &lc.n1.t().dot(&d_k);
        lg.wv += &lc.n1.t().dot(&d_v);
        let mut d_n1 = d_q.dot(&lp.wq.t());
        d_n1 += &d_k.dot(&lp.wk.t());
        d_n1 += &d_v.dot(&lp.wv.t());

        // Reference key/value paths (layer 1 under SAR).
        let mut d_ref_emb: Vec<Array2<f64>> = Vec::new();
        for (ri, rc) in lc.refs.iter().enumerate() {
            let seq_ref = &seq.refs[ri];
            let mut d_rk = d_ref_k[ri].clone();
            rope_rows_inverse(&mut d_rk, &seq_ref.coords, heads)?;
            let d_rv = &d_ref_v[ri];
            lg.wk += &rc.norm.t().dot(&d_rk);
            lg.wv += &rc.norm.t().dot(d_rv);
            let mut d_rnorm = d_rk.dot(&lp.wk.t());
            d_rnorm += &d_rv.dot(&lp.wv.t());
            let d_emb =
                rmsnorm_backward(&d_rnorm, &seq_ref.emb, &rc.inv, &lp.ln1, &mut lg.ln1);
            d_ref_emb.push(d_emb);
        }
        if !d_ref_emb.is_empty() {
            // Reference embeddings come from the input projection and scale
            // embeddings, same as source tokens.
            for (ri, d_emb) in d_ref_emb.iter().enumerate() {
                let seq_ref = &seq.refs[ri];
                grads.in_proj += &seq_ref.feats.t().dot(d_emb);
                grads.in_bias += &d_emb.sum_axis(Axis(0));
                let mut row = grads.scale_embed.row_mut(seq_ref.scale - 1);
                row += &d_emb.sum_axis(Axis(0));
            }
        }

        let d_from_self = rmsnorm_backward(&d_n1, &lc.x_in, &lc.inv1, &lp.ln1, &mut lg.ln1);
        dx = &d_x2 + &d_from_self;
    }

    // Embedding backward, block by block.
    let mut d_pooled = Array1::zeros(config.text_width);
    for block in &seq.blocks {
        let layout_block = seq
            .layout
            .blocks
            .iter()
            .find(|b| b.role == block.role)
            .expect("layout block");
        let rows = layout_block.range();
        let d_emb = dx.slice(ndarray::s![rows, ..]);
        match &block.content {
            BlockContent::Feats(feats) => {
                grads.in_proj += &feats.t().dot(&d_emb);
                grads.in_bias += &d_emb.sum_axis(Axis(0));
                let scale = block.role.scale().expect("feature blocks carry a scale");
                let mut row = grads.scale_embed.row_mut(scale - 1);
                row += &d_emb.sum_axis(Axis(0));
            }
            BlockContent::Pooled => {
                let colsum = d_emb.sum_axis(Axis(0));
                for (i, p) in seq.text.pooled.iter().enumerate() {
                    for (j, g) in colsum.iter().enumerate() {
                        grads.start_proj[(i, j)] += p * g;
                    }
                }
                grads.start_bias += &colsum;
                d_pooled += &params.start_proj.dot(&colsum);
                if let Some(scale) = block.role.scale() {
                    let mut row = grads.scale_embed.row_mut(scale - 1);
                    row += &colsum;
                }
            }
        }
    }
    // pooled = mean of text rows.
    let text_len = seq.text.len() as f64;
    for mut row in d_tex.rows_mut() {
        row.scaled_add(1.0 / text_len, &d_pooled);
    }
    for (r, id) in seq.text.ids.iter().enumerate() {
        match id {
            TextTokenId::Vocab(i) => {
                let mut dst = grads.text_embed.row_mut(*i);
                dst += &d_tex.row(r);
            }
            TextTokenId::Null => {
                grads.null_text += &d_tex.row(r);
            }
        }
    }

    Ok((loss, grads))
}

impl Model {
    /// Build the text condition for an item, honoring classifier-free
    /// dropout.
    pub fn text_condition(&self, instruction: &str, drop_text: bool) -> TextCondition {
        if drop_text {
            TextCondition::null(self.config.text_width, &self.params.null_text)
        } else {
            TextCondition::encode(instruction, &self.params.text_embed, &self.params.null_text)
        }
    }

    /// Loss and parameter gradients for one teacher-forced item.
    pub fn train_grads(
        &self,
        codebook: &Codebook,
        item: &TrainItem,
    ) -> Result<(f64, ModelParams)> {
        let text = self.text_condition(&item.instruction, item.drop_text);
        let source = super::seq::source_features(&item.src_stack, codebook, self.config.strategy)?;
        let seq = self.embed_inputs(&source, &item.tgt_stack, codebook, &text)?;
        let cache = super::forward::forward_cached(self, seq)?;
        let targets = super::forward::flatten_targets(&item.tgt_stack);
        backward(self, &cache, &targets)
    }

    /// Teacher-forced loss only.
    pub fn train_loss(&self, codebook: &Codebook, item: &TrainItem) -> Result<f64> {
        let text = self.text_condition(&item.instruction, item.drop_text);
        let source = super::seq::source_features(&item.src_stack, codebook, self.config.strategy)?;
        let seq = self.embed_inputs(&source, &item.tgt_stack, codebook, &text)?;
        let cache = super::forward::forward_cached(self, seq)?;
        let targets = super::forward::flatten_targets(&item.tgt_stack);
        Ok(loss_and_probs(&cache.logits, &targets)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::rmsnorm_rows;
    use crate::model::ModelConfig;
    use crate::schedule::{ScaleSchedule, Strategy};

    #[test]
    fn rmsnorm_backward_matches_fd() {
        use rand::Rng;
        let mut rng = crate::rng::stream(50, "rms-fd");
        let x = Array2::from_shape_fn((3, 8), |_| rng.gen_range(-1.0..1.0));
        let gain = Array1::from_shape_fn(8, |_| rng.gen_range(0.5..1.5));
        let d_out = Array2::from_shape_fn((3, 8), |_| rng.gen_range(-1.0..1.0));
        let (_, invs) = rmsnorm_rows(&x, &gain);
        let mut d_gain = Array1::zeros(8);
        let dx = rmsnorm_backward(&d_out, &x, &invs, &gain, &mut d_gain);
        let f = |x: &Array2<f64>, g: &Array1<f64>| -> f64 {
            let (y, _) = rmsnorm_rows(x, g);
            y.iter().zip(d_out.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for idx in [(0, 0), (1, 3), (2, 7)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (f(&xp, &gain) - f(&xm, &gain)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "{idx:?}: {fd} vs {}", dx[idx]);
        }
        for c in [0usize, 5] {
            let mut gp = gain.clone();
            gp[c] += h;
            let mut gm = gain.clone();
            gm[c] -= h;
            let fd = (f(&x, &gp) - f(&x, &gm)) / (2.0 * h);
            assert!((fd - d_gain[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_runs_and_grads_are_finite() {
        let config = ModelConfig {
            width: 32,
            layers: 2,
            heads: 2,
            codebook_size: 12,
            codebook_dim: 4,
            text_width: 16,
            text_vocab: 64,
            strategy: Strategy::Sar,
            schedule: ScaleSchedule::with_grids(64, vec![(1, 1), (2, 2), (4, 4)]).unwrap(),
            seed: 5,
        };
        let model = Model::init(config).unwrap();
        let (codebook, item) = crate::model::random_item(&model.config, 3);
        let (loss, grads) = model.train_grads(&codebook, &item).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert!(grads.is_finite());
        // Loss near ln V at random init.
        assert!((loss - (model.config.codebook_size as f64).ln()).abs() < 1.0);
    }
}
