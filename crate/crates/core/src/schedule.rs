//! Coarse-to-fine grid schedules, token sequence layouts for the three
//! source-conditioning strategies, and the analytic attention-cost model.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Feature cells per image patch side. The toy autoencoder pools
/// non-overlapping 16x16 pixel patches, so a 256px image has a 16x16
/// finest feature grid.
pub const PATCH: usize = 16;

/// How source-image tokens condition target generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Prepend source tokens from every scale.
    Full,
    /// Prepend only the finest-scale source tokens.
    Finest,
    /// Finest-scale sequence plus scale-aligned reference keys/values in
    /// the first self-attention layer.
    Sar,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Full, Strategy::Finest, Strategy::Sar];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::Finest => "finest",
            Strategy::Sar => "sar",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Strategy::Full),
            "finest" => Ok(Strategy::Finest),
            "sar" => Ok(Strategy::Sar),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// The ordered list of (h_k, w_k) grids for one resolution, coarsest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    /// Pixels per image side.
    pub resolution: usize,
    /// (h, w) of the finest feature map; equals the last grid.
    pub feature_hw: (usize, usize),
    /// Grids, non-decreasing in both dimensions.
    pub grids: Vec<(usize, usize)>,
}

const GRIDS_256: [(usize, usize); 7] =
    [(1, 1), (2, 2), (4, 4), (6, 6), (8, 8), (12, 12), (16, 16)];
const GRIDS_512_EXTRA: [(usize, usize); 3] = [(20, 20), (24, 24), (32, 32)];

impl ScaleSchedule {
    /// Built-in schedule for a supported resolution (256 or 512).
    pub fn for_resolution(resolution: usize) -> Result<ScaleSchedule> {
        let grids: Vec<(usize, usize)> = match resolution {
            256 => GRIDS_256.to_vec(),
            512 => GRIDS_256.iter().chain(GRIDS_512_EXTRA.iter()).copied().collect(),
            other => {
                return Err(Error::Config(format!(
                    "no built-in schedule for resolution {other}; supply explicit grids"
                )))
            }
        };
        ScaleSchedule::with_grids(resolution, grids)
    }

    /// Schedule from an explicit grid list. The finest grid must equal
    /// `resolution / 16` per side.
    pub fn with_grids(resolution: usize, grids: Vec<(usize, usize)>) -> Result<ScaleSchedule> {
        if resolution == 0 || resolution % PATCH != 0 {
            return Err(Error::Config(format!(
                "resolution {resolution} is not a positive multiple of {PATCH}"
            )));
        }
        let feature_hw = (resolution / PATCH, resolution / PATCH);
        if grids.is_empty() {
            return Err(Error::Config("schedule needs at least one grid".into()));
        }
        for win in grids.windows(2) {
            let (a, b) = (win[0], win[1]);
            if b.0 < a.0 || b.1 < a.1 {
                return Err(Error::Config(format!(
                    "grids must be non-decreasing, got {a:?} then {b:?}"
                )));
            }
        }
        if grids.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        if *grids.last().unwrap() != feature_hw {
            return Err(Error::Config(format!(
                "last grid {:?} must equal the feature grid {feature_hw:?}",
                grids.last().unwrap()
            )));
        }
        Ok(ScaleSchedule {
            resolution,
            feature_hw,
            grids,
        })
    }

    /// Number of scales K.
    pub fn num_scales(&self) -> usize {
        self.grids.len()
    }

    /// Grid of 1-based scale `k`.
    pub fn grid(&self, k: usize) -> (usize, usize) {
        self.grids[k - 1]
    }

    /// Tokens in scale `k`'s map.
    pub fn tokens_at(&self, k: usize) -> usize {
        let (h, w) = self.grid(k);
        h * w
    }

    /// Total tokens across all scales.
    pub fn total_tokens(&self) -> usize {
        self.grids.iter().map(|&(h, w)| h * w).sum()
    }
}

/// What a contiguous run of sequence positions holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Source tokens of one scale.
    Source { scale: usize },
    /// The single start-of-target position carrying the pooled instruction.
    Start,
    /// Target input positions for one scale; their outputs predict that
    /// scale's residual map.
    Target { scale: usize },
}

impl Role {
    pub fn scale(&self) -> Option<usize> {
        match self {
            Role::Source { scale } | Role::Target { scale } => Some(*scale),
            Role::Start => None,
        }
    }
}

/// One block of the laid-out token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub role: Role,
    pub token_count: usize,
    pub start_offset: usize,
}

impl Block {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start_offset..self.start_offset + self.token_count
    }
}

/// Block layout of the full token sequence for one strategy.
///
/// Order is always: source blocks, the start token, then target blocks in
/// ascending scale order. Target block k holds the scale-(k-1) aggregate
/// resampled to grid k (the pooled instruction broadcast, for k = 1), and
/// its positions read out scale k's logits. SAR reference blocks are not
/// sequence positions; they live in the attention plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub strategy: Strategy,
    pub blocks: Vec<Block>,
    pub total_len: usize,
}

impl SequenceLayout {
    pub fn block_of_target(&self, scale: usize) -> &Block {
        self.blocks
            .iter()
            .find(|b| b.role == Role::Target { scale })
            .expect("layout has every target scale")
    }

    pub fn source_blocks(&self) -> impl Iterator<Item = &Block> {
        self.blocks
            .iter()
            .filter(|b| matches!(b.role, Role::Source { .. }))
    }

    pub fn start_offset(&self) -> usize {
        self.blocks
            .iter()
            .find(|b| b.role == Role::Start)
            .expect("layout has a start block")
            .start_offset
    }
}

/// Lay out the token sequence for `strategy` over `schedule`.
pub fn layout_sequence(schedule: &ScaleSchedule, strategy: Strategy) -> SequenceLayout {
    let k_max = schedule.num_scales();
    let mut blocks = Vec::new();
    let mut offset = 0;
    let mut push = |role: Role, count: usize, offset: &mut usize| {
        blocks.push(Block {
            role,
            token_count: count,
            start_offset: *offset,
        });
        *offset += count;
    };
    match strategy {
        Strategy::Full => {
            for k in 1..=k_max {
                push(Role::Source { scale: k }, schedule.tokens_at(k), &mut offset);
            }
        }
        Strategy::Finest | Strategy::Sar => {
            push(Role::Source { scale: k_max }, schedule.tokens_at(k_max), &mut offset);
        }
    }
    push(Role::Start, 1, &mut offset);
    for k in 1..=k_max {
        push(Role::Target { scale: k }, schedule.tokens_at(k), &mut offset);
    }
    SequenceLayout {
        strategy,
        blocks,
        total_len: offset,
    }
}

/// Attention-score cost of one full generation pass, in (query, visible key)
/// pairs summed over layers.
///
/// Every sequence position is processed exactly once under KV caching, so
/// each counts as a query against its visible set: source blocks are
/// block-causal among themselves, the start token sees all sources plus
/// itself, and target scale k sees the strategy's source blocks, the start,
/// and target scales 1..=k. Under SAR each target scale's queries
/// additionally see one reference block of equal size, in layer 1 only.
/// Only the quadraticQK^T term is counted; projections are excluded.
pub fn attention_cost(layout: &SequenceLayout, layers: usize) -> u128 {
    let mut per_layer: u128 = 0;
    let mut seen_before: u128 = 0;
    for block in &layout.blocks {
        let q = block.token_count as u128;
        per_layer += q * (seen_before + q);
        seen_before += q;
    }
    let mut cost = per_layer * layers as u128;
    if layout.strategy == Strategy::Sar && layers >= 1 {
        for block in &layout.blocks {
            if matches!(block.role, Role::Target { .. }) {
                let t = block.token_count as u128;
                cost += t * t;
            }
        }
    }
    cost
}

/// Plain-text cost table for one schedule, one row per strategy.
pub fn cost_report(schedule: &ScaleSchedule, layers: usize) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "attention cost model: resolution {}px, {} scales, {} layers\n",
        schedule.resolution,
        schedule.num_scales(),
        layers
    ));
    out.push_str("unit: attention score entries (query x visible key), summed over layers\n");
    out.push_str(&format!(
        "{:<8} {:>10} {:>16} {:>12}\n",
        "strategy", "seq_len", "score_pairs", "vs_finest"
    ));
    let finest = attention_cost(&layout_sequence(schedule, Strategy::Finest), layers);
    for strategy in Strategy::ALL {
        let layout = layout_sequence(schedule, strategy);
        let cost = attention_cost(&layout, layers);
        let rel = if finest == 0 {
            1.0
        } else {
            cost as f64 / finest as f64
        };
        out.push_str(&format!(
            "{:<8} {:>10} {:>16} {:>11.3}x\n",
            strategy.name(),
            layout.total_len,
            cost,
            rel
        ));
    }
    out
}
