//! Incremental forward engine with per-layer key/value caches. Blocks are
//! appended in layout order; each append runs the new positions through
//! every layer against the cached history, so a full generation touches
//! each position exactly once.

use super::forward::{rmsnorm_rows, rope_rows, silu};
use super::seq::BuiltBlock;
use super::Model;
use crate::attention::{attend, build_plans, AttentionPlan};
use crate::codec::FeatureMap;
use crate::error::{Error, Result};
use crate::schedule::{layout_sequence, Role, SequenceLayout};
use crate::text::TextCondition;
use ndarray::Array2;

pub struct Engine<'a> {
    model: &'a Model,
    pub text: TextCondition,
    pub layout: SequenceLayout,
    plans: Vec<AttentionPlan>,
    k_cache: Vec<Array2<f64>>,
    v_cache: Vec<Array2<f64>>,
    text_k: Vec<Array2<f64>>,
    text_v: Vec<Array2<f64>>,
    /// Per scale: roped reference keys and values for layer 1 (SAR only).
    refs: Vec<(usize, Array2<f64>, Array2<f64>)>,
    blocks_done: usize,
    n_pos: usize,
}

impl<'a> Engine<'a> {
    /// Set up caches for one generation stream. `finest_source` feeds the
    /// SAR reference blocks and is required exactly when the model's
    /// strategy is SAR.
    pub fn new(
        model: &'a Model,
        text: TextCondition,
        finest_source: Option<&FeatureMap>,
    ) -> Result<Engine<'a>> {
        let config = &model.config;
        let layout = layout_sequence(&config.schedule, config.strategy);
        let plans = build_plans(&layout, config.strategy, config.layers)?;
        let total = layout.total_len;
        let width = config.width;
        let k_cache = vec![Array2::zeros((total, width)); config.layers];
        let v_cache = vec![Array2::zeros((total, width)); config.layers];
        let mut text_k = Vec::with_capacity(config.layers);
        let mut text_v = Vec::with_capacity(config.layers);
        for lp in &model.params.layers {
            text_k.push(text.embeddings.dot(&lp.ck));
            text_v.push(text.embeddings.dot(&lp.cv));
        }
        let refs = if config.strategy == crate::schedule::Strategy::Sar {
            let source = finest_source.ok_or_else(|| {
                Error::Config("SAR generation needs the finest source feature".into())
            })?;
            let lp = &model.params.layers[0];
            model
                .ref_blocks(source)?
                .into_iter()
                .map(|r| {
                    let (norm, _) = rmsnorm_rows(&r.emb, &lp.ln1);
                    let mut k = norm.dot(&lp.wk);
                    rope_rows(&mut k, &r.coords, config.heads)?;
                    let v = norm.dot(&lp.wv);
                    Ok((r.scale, k, v))
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Engine {
            model,
            text,
            layout,
            plans,
            k_cache,
            v_cache,
            text_k,
            text_v,
            refs,
            blocks_done: 0,
            n_pos: 0,
        })
    }

    pub fn blocks_done(&self) -> usize {
        self.blocks_done
    }

    /// Role the next appended block must have.
    pub fn expected_role(&self) -> Option<Role> {
        self.layout.blocks.get(self.blocks_done).map(|b| b.role)
    }

    /// Run one block through all layers, updating the caches. Returns the
    /// block's rows after the final norm.
    pub fn append(&mut self, block: &BuiltBlock) -> Result<Array2<f64>> {
        let config = &self.model.config;
        let params = &self.model.params;
        let heads = config.heads;
        let layout_block = *self
            .layout
            .blocks
            .get(self.blocks_done)
            .ok_or_else(|| Error::Bounds("sequence layout already complete".into()))?;
        if layout_block.role != block.role {
            return Err(Error::Shape(format!(
                "expected block {:?}, got {:?}",
                layout_block.role, block.role
            )));
        }
        let nb = block.emb.nrows();
        if nb != layout_block.token_count {
            return Err(Error::Shape(format!(
                "block has {nb} rows, layout wants {}",
                layout_block.token_count
            )));
        }
        let rows = layout_block.range();
        debug_assert_eq!(rows.start, self.n_pos);

        let mut x = block.emb.clone();
        for (l, lp) in params.layers.iter().enumerate() {
            let plan = &self.plans[l];
            let (n1, _) = rmsnorm_rows(&x, &lp.ln1);
            let mut q = n1.dot(&lp.wq);
            let mut k = n1.dot(&lp.wk);
            let v = n1.dot(&lp.wv);
            rope_rows(&mut q, &block.coords, heads)?;
            rope_rows(&mut k, &block.coords, heads)?;
            self.k_cache[l]
                .slice_mut(ndarray::s![rows.clone(), ..])
                .assign(&k);
            self.v_cache[l]
                .slice_mut(ndarray::s![rows.clone(), ..])
                .assign(&v);

            let ref_kv = match block.role {
                Role::Target { scale } if plan.ref_for_scale(scale).is_some() => self
                    .refs
                    .iter()
                    .find(|(s, _, _)| *s == scale)
                    .map(|(_, rk, rv)| (rk.view(), rv.view())),
                _ => None,
            };
            let out = attend(
                q.view(),
                self.k_cache[l].view(),
                self.v_cache[l].view(),
                &plan.ranges(self.blocks_done),
                ref_kv,
                heads,
            )?;
            x += &out.out.dot(&lp.wo);

            let (nc, _) = rmsnorm_rows(&x, &lp.lnc);
            let qc = nc.dot(&lp.cq);
            let cross = attend(
                qc.view(),
                self.text_k[l].view(),
                self.text_v[l].view(),
                &[0..self.text.len()],
                None,
                heads,
            )?;
            x += &cross.out.dot(&lp.co);

            let (n2, _) = rmsnorm_rows(&x, &lp.ln2);
            let h = (n2.dot(&lp.fc1) + &lp.b1).mapv(silu);
            x += &(h.dot(&lp.fc2) + &lp.b2);
        }

        self.blocks_done += 1;
        self.n_pos += nb;
        let (nf, _) = rmsnorm_rows(&x, &params.ln_f);
        Ok(nf)
    }

    /// Codebook logits for final-normed rows.
    pub fn logits(&self, final_rows: &Array2<f64>) -> Array2<f64> {
        final_rows.dot(&self.model.params.head_w) + &self.model.params.head_b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{quantize, Codebook};
    use crate::model::{forward_cached, source_features, ModelConfig};
    use crate::schedule::{ScaleSchedule, Strategy};
    use ndarray::Array3;
    use rand::Rng;

    fn setup(strategy: Strategy) -> (Model, Codebook, crate::codec::ResidualStack) {
        let config = ModelConfig {
            width: 32,
            layers: 3,
            heads: 2,
            codebook_size: 12,
            codebook_dim: 4,
            text_width: 16,
            text_vocab: 64,
            strategy,
            schedule: ScaleSchedule::with_grids(64, vec![(1, 1), (2, 2), (4, 4)]).unwrap(),
            seed: 15,
        };
        let model = Model::init(config.clone()).unwrap();
        let codebook = Codebook::init(config.codebook_size, config.codebook_dim, 16).unwrap();
        let mut rng = crate::rng::stream(17, "engine-test");
        let f = Array3::from_shape_fn((4, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let stack = quantize(&f, &codebook, &config.schedule).unwrap();
        (model, codebook, stack)
    }

    #[test]
    fn engine_matches_teacher_forced_forward() {
        for strategy in Strategy::ALL {
            let (model, codebook, stack) = setup(strategy);
            let source = source_features(&stack, &codebook, strategy).unwrap();
            let text = model.text_condition("shift the blue square", false);
            let seq = model
                .embed_inputs(&source, &stack, &codebook, &text)
                .unwrap();
            let blocks = seq.blocks.clone();
            let cache = forward_cached(&model, seq).unwrap();

            let finest = source.last().map(|(_, f)| f.clone());
            let mut engine = Engine::new(&model, text, finest.as_ref()).unwrap();
            let mut all_logits = Vec::new();
            for block in &blocks {
                let rows = engine.append(block).unwrap();
                if matches!(block.role, Role::Target { .. }) {
                    all_logits.push(engine.logits(&rows));
                }
            }
            let mut row = 0;
            for scale_logits in &all_logits {
                for r in 0..scale_logits.nrows() {
                    for c in 0..scale_logits.ncols() {
                        let a = scale_logits[(r, c)];
                        let b = cache.logits[(row + r, c)];
                        assert!(
                            (a - b).abs() < 1e-9,
                            "{strategy:?} row {} col {c}: {a} vs {b}",
                            row + r
                        );
                    }
                }
                row += scale_logits.nrows();
            }
        }
    }

    #[test]
    fn engine_enforces_layout_order() {
        let (model, codebook, stack) = setup(Strategy::Finest);
        let source = source_features(&stack, &codebook, Strategy::Finest).unwrap();
        let text = model.text_condition("x", false);
        let seq = model
            .embed_inputs(&source, &stack, &codebook, &text)
            .unwrap();
        let mut engine = Engine::new(&model, text, None).unwrap();
        // Appending the start block first violates the layout.
        assert!(engine.append(&seq.blocks[1]).is_err());
        assert!(engine.append(&seq.blocks[0]).is_ok());
    }

    #[test]
    fn sar_engine_requires_source_feature() {
        let (model, _, _) = setup(Strategy::Sar);
        let text = model.text_condition("x", false);
        assert!(Engine::new(&model, text, None).is_err());
    }
}
