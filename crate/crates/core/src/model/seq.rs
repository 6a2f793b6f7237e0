//! Token sequence assembly: source conditioning features, the pooled-text
//! start token, teacher-forced target inputs, and SAR reference blocks.
//!
//! Target block k carries the scale-(k-1) cumulative feature resampled to
//! grid k; block 1 carries the pooled instruction broadcast over grid 1.
//! Every position gets its rotary coordinate and additive scale embedding
//! here, before the first transformer block.

use super::{Model, ModelParams};
use crate::codec::{aggregate, next_scale_input, Codebook, FeatureMap, ResidualStack};
use crate::error::{Error, Result};
use crate::resample::area_down;
use crate::rope::{coord_of, CoordRole, RopeCoord};
use crate::schedule::{layout_sequence, Role, ScaleSchedule, SequenceLayout, Strategy};
use crate::text::TextCondition;
use ndarray::{Array1, Array2};

/// What a block's embedding rows were computed from; backward needs it to
/// route gradients into the right projection.
#[derive(Debug, Clone)]
pub enum BlockContent {
    /// n x d_c feature rows through the input projection.
    Feats(Array2<f64>),
    /// The pooled text vector (broadcast) through the start projection.
    Pooled,
}

#[derive(Debug, Clone)]
pub struct BuiltBlock {
    pub role: Role,
    pub content: BlockContent,
    pub coords: Vec<RopeCoord>,
    /// n x width embedding rows, scale embedding already added.
    pub emb: Array2<f64>,
}

/// A SAR reference block: not a sequence position, but embedded the same
/// way as source tokens and injected as extra keys/values in layer 1.
#[derive(Debug, Clone)]
pub struct SarRefBlock {
    pub scale: usize,
    pub feats: Array2<f64>,
    pub coords: Vec<RopeCoord>,
    pub emb: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct BuiltSequence {
    pub schedule: ScaleSchedule,
    pub layout: SequenceLayout,
    pub blocks: Vec<BuiltBlock>,
    pub refs: Vec<SarRefBlock>,
    pub text: TextCondition,
}

impl BuiltSequence {
    pub fn total_len(&self) -> usize {
        self.layout.total_len
    }

    /// All embedding rows stacked in layout order.
    pub fn embeddings(&self) -> Array2<f64> {
        let width = self.blocks[0].emb.ncols();
        let mut out = Array2::zeros((self.layout.total_len, width));
        let mut row = 0;
        for b in &self.blocks {
            for r in 0..b.emb.nrows() {
                out.row_mut(row).assign(&b.emb.row(r));
                row += 1;
            }
        }
        out
    }

    /// Per-position rotary coordinates in layout order.
    pub fn coords(&self) -> Vec<RopeCoord> {
        self.blocks.iter().flat_map(|b| b.coords.iter().copied()).collect()
    }
}

/// Flatten an (h, w, d) feature map into row-major (h*w, d) rows.
pub fn flatten_cells(feature: &FeatureMap) -> Array2<f64> {
    let (h, w, d) = feature.dim();
    let mut out = Array2::zeros((h * w, d));
    for i in 0..h {
        for j in 0..w {
            for c in 0..d {
                out[(i * w + j, c)] = feature[(i, j, c)];
            }
        }
    }
    out
}

/// Source conditioning features per strategy: one (scale, feature-at-grid)
/// entry per source block. Full exposes each scale's cumulative feature at
/// that scale's grid; finest and SAR expose only the scale-K feature.
pub fn source_features(
    stack: &ResidualStack,
    codebook: &Codebook,
    strategy: Strategy,
) -> Result<Vec<(usize, FeatureMap)>> {
    stack.validate(codebook)?;
    let schedule = &stack.schedule;
    let k_max = schedule.num_scales();
    match strategy {
        Strategy::Full => (1..=k_max)
            .map(|k| {
                let cumulative = aggregate(stack, k, codebook)?;
                let (hk, wk) = schedule.grid(k);
                Ok((k, area_down(cumulative.view(), hk, wk)))
            })
            .collect(),
        Strategy::Finest | Strategy::Sar => {
            Ok(vec![(k_max, aggregate(stack, k_max, codebook)?)])
        }
    }
}

impl Model {
    fn scale_embed_row(&self, scale: usize) -> ndarray::ArrayView1<'_, f64> {
        self.params.scale_embed.row(scale - 1)
    }

    /// Embed an (h, w, d_c) feature block: input projection plus the scale
    /// embedding, with coordinates from the scale's stride.
    pub(crate) fn feat_block(
        &self,
        role: Role,
        feature: &FeatureMap,
    ) -> Result<BuiltBlock> {
        let scale = role
            .scale()
            .ok_or_else(|| Error::Config("feature blocks need a scale".into()))?;
        let schedule = &self.config.schedule;
        let (hk, wk) = schedule.grid(scale);
        let (h, w, d) = feature.dim();
        if (h, w) != (hk, wk) || d != self.config.codebook_dim {
            return Err(Error::Shape(format!(
                "block feature {:?} does not match grid ({hk},{wk},{})",
                feature.dim(),
                self.config.codebook_dim
            )));
        }
        let coord_role = match role {
            Role::Source { .. } => CoordRole::Source,
            _ => CoordRole::Target,
        };
        let feats = flatten_cells(feature);
        let mut emb = feats.dot(&self.params.in_proj);
        emb += &self.params.in_bias;
        emb += &self.scale_embed_row(scale);
        let mut coords = Vec::with_capacity(hk * wk);
        for i in 0..hk {
            for j in 0..wk {
                coords.push(coord_of(coord_role, scale, (i, j), schedule)?);
            }
        }
        Ok(BuiltBlock {
            role,
            content: BlockContent::Feats(feats),
            coords,
            emb,
        })
    }

    /// The start position: pooled text through the start projection, at
    /// coordinate (0, 0), no scale embedding.
    pub(crate) fn start_block(&self, text: &TextCondition) -> BuiltBlock {
        let emb1 = pooled_embedding(&self.params, &text.pooled);
        let mut emb = Array2::zeros((1, self.config.width));
        emb.row_mut(0).assign(&emb1);
        BuiltBlock {
            role: Role::Start,
            content: BlockContent::Pooled,
            coords: vec![RopeCoord { x: 0, y: 0 }],
            emb,
        }
    }

    /// Target block 1: the pooled text broadcast over grid 1 with the
    /// scale-1 embedding.
    pub(crate) fn target_one_block(&self, text: &TextCondition) -> Result<BuiltBlock> {
        let schedule = &self.config.schedule;
        let (h1, w1) = schedule.grid(1);
        let base = pooled_embedding(&self.params, &text.pooled);
        let mut emb = Array2::zeros((h1 * w1, self.config.width));
        for mut row in emb.rows_mut() {
            row.assign(&base);
        }
        emb += &self.scale_embed_row(1);
        let mut coords = Vec::with_capacity(h1 * w1);
        for i in 0..h1 {
            for j in 0..w1 {
                coords.push(coord_of(CoordRole::Target, 1, (i, j), schedule)?);
            }
        }
        Ok(BuiltBlock {
            role: Role::Target { scale: 1 },
            content: BlockContent::Pooled,
            coords,
            emb,
        })
    }

    /// Target input block for scale k >= 2: the scale-(k-1) cumulative
    /// feature resampled to grid k.
    pub(crate) fn target_block(&self, k: usize, input: &FeatureMap) -> Result<BuiltBlock> {
        if k < 2 {
            return Err(Error::Bounds("target feature blocks start at scale 2".into()));
        }
        self.feat_block(Role::Target { scale: k }, input)
    }

    /// Reference blocks for SAR layer 1, one per scale, embedded like
    /// source tokens (source-offset coordinates at their own scale).
    pub(crate) fn ref_blocks(&self, finest_source: &FeatureMap) -> Result<Vec<SarRefBlock>> {
        let schedule = &self.config.schedule;
        (1..=schedule.num_scales())
            .map(|k| {
                let feature = crate::attention::build_sar_reference(finest_source, schedule, k)?;
                let (hk, wk) = schedule.grid(k);
                let feats = flatten_cells(&feature);
                let mut emb = feats.dot(&self.params.in_proj);
                emb += &self.params.in_bias;
                emb += &self.scale_embed_row(k);
                let mut coords = Vec::with_capacity(hk * wk);
                for i in 0..hk {
                    for j in 0..wk {
                        coords.push(coord_of(CoordRole::Source, k, (i, j), schedule)?);
                    }
                }
                Ok(SarRefBlock {
                    scale: k,
                    feats,
                    coords,
                    emb,
                })
            })
            .collect()
    }

    /// Assemble the full teacher-forced sequence: per-strategy source
    /// blocks, the start token, and target input blocks derived from the
    /// ground-truth stack.
    pub fn embed_inputs(
        &self,
        source: &[(usize, FeatureMap)],
        target: &ResidualStack,
        codebook: &Codebook,
        text: &TextCondition,
    ) -> Result<BuiltSequence> {
        let schedule = &self.config.schedule;
        let strategy = self.config.strategy;
        target.validate(codebook)?;
        if target.schedule != *schedule {
            return Err(Error::Shape("target stack schedule mismatch".into()));
        }
        let layout = layout_sequence(schedule, strategy);
        let expected_sources: Vec<usize> = layout
            .source_blocks()
            .map(|b| b.role.scale().unwrap())
            .collect();
        let got: Vec<usize> = source.iter().map(|(k, _)| *k).collect();
        if got != expected_sources {
            return Err(Error::Shape(format!(
                "source blocks {got:?} do not match strategy {strategy:?} (wants {expected_sources:?})"
            )));
        }

        let mut blocks = Vec::with_capacity(layout.blocks.len());
        for (k, feature) in source {
            blocks.push(self.feat_block(Role::Source { scale: *k }, feature)?);
        }
        blocks.push(self.start_block(text));
        blocks.push(self.target_one_block(text)?);
        for k in 2..=schedule.num_scales() {
            let cumulative = aggregate(target, k - 1, codebook)?;
            let input = next_scale_input(&cumulative, schedule, k - 1)?;
            blocks.push(self.target_block(k, &input)?);
        }

        let refs = if strategy == Strategy::Sar {
            // The finest source feature is the single conditioning entry.
            self.ref_blocks(&source[0].1)?
        } else {
            Vec::new()
        };
        Ok(BuiltSequence {
            schedule: schedule.clone(),
            layout,
            blocks,
            refs,
            text: text.clone(),
        })
    }
}

/// pooled -> width through the start projection.
pub(crate) fn pooled_embedding(params: &ModelParams, pooled: &Array1<f64>) -> Array1<f64> {
    pooled.dot(&params.start_proj) + &params.start_bias
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{quantize, Codebook};
    use crate::model::{Model, ModelConfig};
    use ndarray::Array3;
    use rand::Rng;

    fn setup(strategy: Strategy) -> (Model, Codebook, ResidualStack) {
        let config = ModelConfig {
            width: 32,
            layers: 2,
            heads: 2,
            codebook_size: 12,
            codebook_dim: 4,
            text_width: 16,
            text_vocab: 64,
            strategy,
            schedule: ScaleSchedule::with_grids(64, vec![(1, 1), (2, 2), (4, 4)]).unwrap(),
            seed: 5,
        };
        let model = Model::init(config.clone()).unwrap();
        let codebook = Codebook::init(config.codebook_size, config.codebook_dim, 7).unwrap();
        let mut rng = crate::rng::stream(9, "seq-test");
        let f = Array3::from_shape_fn((4, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let stack = quantize(&f, &codebook, &config.schedule).unwrap();
        (model, codebook, stack)
    }

    #[test]
    fn sequence_lengths_match_layout() {
        for strategy in Strategy::ALL {
            let (model, codebook, stack) = setup(strategy);
            let source = source_features(&stack, &codebook, strategy).unwrap();
            let text = TextCondition::encode(
                "change the red square to blue",
                &model.params.text_embed,
                &model.params.null_text,
            );
            let seq = model.embed_inputs(&source, &stack, &codebook, &text).unwrap();
            let expect = match strategy {
                Strategy::Full => 2 * 21 + 1,
                _ => 16 + 21 + 1,
            };
            assert_eq!(seq.total_len(), expect);
            assert_eq!(seq.embeddings().nrows(), expect);
            assert_eq!(seq.coords().len(), expect);
            assert_eq!(seq.refs.len(), if strategy == Strategy::Sar { 3 } else { 0 });
        }
    }

    #[test]
    fn zero_text_start_embedding_is_the_bias() {
        let (mut model, _, _) = setup(Strategy::Finest);
        model.params.text_embed.fill(0.0);
        model
            .params
            .start_bias
            .iter_mut()
            .enumerate()
            .for_each(|(i, b)| *b = i as f64 * 0.1);
        let text = TextCondition::encode(
            "anything here",
            &model.params.text_embed,
            &model.params.null_text,
        );
        let start = model.start_block(&text);
        for (i, v) in start.emb.row(0).iter().enumerate() {
            assert!((v - i as f64 * 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn single_scale_schedule_targets_are_start_content_only() {
        let config = ModelConfig {
            width: 32,
            layers: 2,
            heads: 2,
            codebook_size: 8,
            codebook_dim: 3,
            text_width: 16,
            text_vocab: 64,
            strategy: Strategy::Finest,
            schedule: ScaleSchedule::with_grids(32, vec![(2, 2)]).unwrap(),
            seed: 5,
        };
        let model = Model::init(config.clone()).unwrap();
        let codebook = Codebook::init(8, 3, 7).unwrap();
        let mut rng = crate::rng::stream(10, "seq-k1");
        let f = Array3::from_shape_fn((2, 2, 3), |_| rng.gen_range(-1.0..1.0));
        let stack = quantize(&f, &codebook, &config.schedule).unwrap();
        let source = source_features(&stack, &codebook, Strategy::Finest).unwrap();
        let text = TextCondition::encode("x", &model.params.text_embed, &model.params.null_text);
        let seq = model.embed_inputs(&source, &stack, &codebook, &text).unwrap();
        // src(4) + start(1) + target-1(4): all target inputs are pooled text.
        assert_eq!(seq.total_len(), 9);
        let target_blocks: Vec<_> = seq
            .blocks
            .iter()
            .filter(|b| matches!(b.role, Role::Target { .. }))
            .collect();
        assert_eq!(target_blocks.len(), 1);
        assert!(matches!(target_blocks[0].content, BlockContent::Pooled));
    }

    #[test]
    fn full_source_at_finest_scale_matches_finest_strategy() {
        let (_, codebook, stack) = setup(Strategy::Full);
        let full = source_features(&stack, &codebook, Strategy::Full).unwrap();
        let finest = source_features(&stack, &codebook, Strategy::Finest).unwrap();
        assert_eq!(full.len(), 3);
        assert_eq!(finest.len(), 1);
        // The last full block is the finest feature itself.
        assert_eq!(full[2].1, finest[0].1);
    }

    #[test]
    fn wrong_source_set_rejected() {
        let (model, codebook, stack) = setup(Strategy::Full);
        let finest_only = source_features(&stack, &codebook, Strategy::Finest).unwrap();
        let text = TextCondition::encode("x", &model.params.text_embed, &model.params.null_text);
        assert!(model
            .embed_inputs(&finest_only, &stack, &codebook, &text)
            .is_err());
    }
}
