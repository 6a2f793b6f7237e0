//! Gradient verification: analytic gradients against 64-bit central finite
//! differences on a random subset of parameter coordinates.

use super::{Model, ModelConfig, TrainItem};
use crate::codec::{Codebook, ResidualStack};
use crate::error::{Error, Result};
use crate::rng;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

const FD_STEP: f64 = 1e-4;

/// A random but well-formed training item (random residual stacks and a
/// short instruction) for verification runs.
pub fn random_item(config: &ModelConfig, seed: u64) -> (Codebook, TrainItem) {
    let codebook = Codebook::init(config.codebook_size, config.codebook_dim, seed).unwrap();
    let mut stream = rng::stream(seed, "gradcheck-item");
    let stack = |stream: &mut rand_chacha::ChaCha8Rng| ResidualStack {
        schedule: config.schedule.clone(),
        maps: (1..=config.schedule.num_scales())
            .map(|k| {
                let (h, w) = config.schedule.grid(k);
                Array2::from_shape_fn((h, w), |_| stream.gen_range(0..config.codebook_size))
            })
            .collect(),
    };
    let words = ["change", "the", "red", "square", "to", "blue", "remove", "green"];
    let len = stream.gen_range(2..6);
    let instruction: Vec<&str> = (0..len)
        .map(|_| words[stream.gen_range(0..words.len())])
        .collect();
    let item = TrainItem {
        src_stack: stack(&mut stream),
        tgt_stack: stack(&mut stream),
        instruction: instruction.join(" "),
        drop_text: false,
    };
    (codebook, item)
}

fn get_coord(model: &Model, flat: usize) -> f64 {
    let mut offset = 0;
    for (_, data, _) in model.params.tensors() {
        if flat < offset + data.len() {
            return data[flat - offset];
        }
        offset += data.len();
    }
    panic!("coordinate {flat} out of range");
}

fn set_coord(model: &mut Model, flat: usize, value: f64) {
    let mut offset = 0;
    for (_, data, _) in model.params.tensors_mut() {
        if flat < offset + data.len() {
            data[flat - offset] = value;
            return;
        }
        offset += data.len();
    }
    panic!("coordinate {flat} out of range");
}

/// Maximum relative error between analytic and central-difference gradients
/// over `coords` random parameter coordinates (step 1e-4). Relative error
/// is `|a - fd| / max(|a| + |fd|, 1e-4)`: the usual two-sided form, with an
/// absolute floor so near-zero gradients are compared absolutely at 1e-8.
pub fn grad_check(
    config: &ModelConfig,
    codebook: &Codebook,
    item: &TrainItem,
    coords: usize,
    seed: u64,
) -> Result<f64> {
    let mut model = Model::init(config.clone())?;
    let (_, grads) = model.train_grads(codebook, item)?;
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite analytic gradient".into()));
    }
    let flat_grads: Vec<f64> = grads
        .tensors()
        .iter()
        .flat_map(|(_, d, _)| d.iter().copied())
        .collect();
    let total = flat_grads.len();
    let mut indices: Vec<usize> = (0..total).collect();
    let mut stream = rng::stream(seed, "gradcheck-coords");
    indices.shuffle(&mut stream);
    indices.truncate(coords.min(total));

    let mut max_rel: f64 = 0.0;
    for &i in &indices {
        let orig = get_coord(&model, i);
        set_coord(&mut model, i, orig + FD_STEP);
        let up = model.train_loss(codebook, item)?;
        set_coord(&mut model, i, orig - FD_STEP);
        let down = model.train_loss(codebook, item)?;
        set_coord(&mut model, i, orig);
        let fd = (up - down) / (2.0 * FD_STEP);
        if !fd.is_finite() {
            return Err(Error::Numeric(format!("non-finite finite difference at {i}")));
        }
        let a = flat_grads[i];
        let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-4);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{ScaleSchedule, Strategy};

    fn tiny(strategy: Strategy) -> ModelConfig {
        ModelConfig {
            width: 16,
            layers: 2,
            heads: 2,
            codebook_size: 9,
            codebook_dim: 3,
            text_width: 8,
            text_vocab: 32,
            strategy,
            schedule: ScaleSchedule::with_grids(48, vec![(1, 1), (2, 2), (3, 3)]).unwrap(),
            seed: 11,
        }
    }

    #[test]
    fn gradients_match_finite_differences_all_strategies() {
        for strategy in Strategy::ALL {
            let config = tiny(strategy);
            let (codebook, item) = random_item(&config, 21);
            let err = grad_check(&config, &codebook, &item, 60, 1).unwrap();
            assert!(err < 1e-4, "{strategy:?}: max rel err {err}");
        }
    }

    #[test]
    fn dropped_text_path_has_exact_gradients_too() {
        let config = tiny(Strategy::Sar);
        let (codebook, mut item) = random_item(&config, 22);
        item.drop_text = true;
        let err = grad_check(&config, &codebook, &item, 40, 2).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn saturated_head_bias_has_near_zero_gradient() {
        // Teacher-forced perfect logits via a frozen-head trick: crank the
        // bias of one class and make every target that class; the softmax
        // saturates and the head-bias gradient all but vanishes.
        let config = tiny(Strategy::Finest);
        let (codebook, mut item) = random_item(&config, 23);
        for map in item.tgt_stack.maps.iter_mut() {
            map.fill(3);
        }
        let mut model = Model::init(config).unwrap();
        model.params.head_b[3] = 50.0;
        let (loss, grads) = model.train_grads(&codebook, &item).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
        let norm: f64 = grads.head_b.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "head bias grad norm {norm}");
    }
}
