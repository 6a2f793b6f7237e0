//! Toy image codec: patch autoencoder plus the multi-scale residual
//! quantizer.
//!
//! `encode` mean-pools non-overlapping 16x16 patches and projects the RGB
//! means to `d_c` channels; `decode` projects back and broadcasts each cell
//! over its patch. `quantize` peels the feature map into K discrete residual
//! maps coarse-to-fine: downsample the running residual to grid k, snap each
//! cell to its nearest codebook entry, broadcast the looked-up map back to full
//! resolution, subtract, repeat. `aggregate` rebuilds features by summing
//! the upsampled lookups.

use crate::error::{Error, Result};
use crate::resample::{area_down, area_down_adjoint, box_up};
use crate::rng;
use crate::schedule::{ScaleSchedule, PATCH};
use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::Rng;

/// A feature map of shape (h, w, d_c).
pub type FeatureMap = Array3<f64>;

/// Learned codebook: V entries of dimension d_c.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub entries: Array2<f64>,
}

impl Codebook {
    pub fn new(entries: Array2<f64>) -> Result<Codebook> {
        let v = entries.nrows();
        if v < 2 {
            return Err(Error::Config(format!("codebook needs >= 2 entries, got {v}")));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("codebook contains non-finite entries".into()));
        }
        for a in 0..v {
            for b in a + 1..v {
                let d2: f64 = entries
                    .row(a)
                    .iter()
                    .zip(entries.row(b).iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                if d2 < 1e-18 {
                    return Err(Error::Config(format!("duplicate codebook entries {a} and {b}")));
                }
            }
        }
        Ok(Codebook { entries })
    }

    /// Fixed-seed init, uniform on [-1, 1]^d_c, with entry 0 forced to the
    /// zero vector so an all-zero residual quantizes to a no-op.
    pub fn init(size: usize, dim: usize, seed: u64) -> Result<Codebook> {
        let mut stream = rng::stream(seed, "codebook");
        let mut entries = Array2::zeros((size, dim));
        for mut row in entries.rows_mut().into_iter().skip(1) {
            for x in row.iter_mut() {
                *x = stream.gen_range(-1.0..1.0);
            }
        }
        Codebook::new(entries)
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }
}

/// Assigns each feature cell a codebook index. The default snaps to the
/// nearest entry in Euclidean distance; alternative quantizers (a spherical
/// binary code, say) plug in here.
pub trait CellAssigner {
    fn assign(&self, cells: ArrayView3<'_, f64>, codebook: &Codebook) -> Array2<usize>;
}

/// Nearest codebook entry, ties broken toward the lowest index.
#[derive(Debug, Clone, Copy, Default)]
pub struct NearestAssigner;

impl CellAssigner for NearestAssigner {
    fn assign(&self, cells: ArrayView3<'_, f64>, codebook: &Codebook) -> Array2<usize> {
        let (h, w, d) = cells.dim();
        debug_assert_eq!(d, codebook.dim());
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut best = 0usize;
            let mut best_d2 = f64::INFINITY;
            for (vi, entry) in codebook.entries.rows().into_iter().enumerate() {
                let mut d2 = 0.0;
                for (c, e) in (0..d).zip(entry.iter()) {
                    let diff = cells[(i, j, c)] - e;
                    d2 += diff * diff;
                }
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = vi;
                }
            }
            best
        })
    }
}

/// K discrete residual index maps, one per scale of the schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualStack {
    pub schedule: ScaleSchedule,
    pub maps: Vec<Array2<usize>>,
}

impl ResidualStack {
    pub fn validate(&self, codebook: &Codebook) -> Result<()> {
        if self.maps.len() != self.schedule.num_scales() {
            return Err(Error::Shape(format!(
                "stack has {} maps for {} scales",
                self.maps.len(),
                self.schedule.num_scales()
            )));
        }
        for (k, map) in self.maps.iter().enumerate() {
            let grid = self.schedule.grid(k + 1);
            if map.dim() != grid {
                return Err(Error::Shape(format!(
                    "map {} has shape {:?}, grid is {:?}",
                    k + 1,
                    map.dim(),
                    grid
                )));
            }
            if map.iter().any(|&i| i >= codebook.size()) {
                return Err(Error::Data(format!("map {} has out-of-range index", k + 1)));
            }
        }
        Ok(())
    }
}

/// Look up a residual map's codebook vectors as an (h_k, w_k, d_c) feature.
pub fn lookup(map: &Array2<usize>, codebook: &Codebook) -> FeatureMap {
    let (h, w) = map.dim();
    Array3::from_shape_fn((h, w, codebook.dim()), |(i, j, c)| {
        codebook.entries[(map[(i, j)], c)]
    })
}

/// Decompose `feature` (at the schedule's finest grid) into residual maps.
pub fn quantize(
    feature: &FeatureMap,
    codebook: &Codebook,
    schedule: &ScaleSchedule,
) -> Result<ResidualStack> {
    Ok(quantize_with_residual(feature, codebook, schedule, &NearestAssigner)?.0)
}

/// [`quantize`], also returning the final running residual (the exact
/// reconstruction error left after all K scales).
pub fn quantize_with_residual(
    feature: &FeatureMap,
    codebook: &Codebook,
    schedule: &ScaleSchedule,
    assigner: &impl CellAssigner,
) -> Result<(ResidualStack, FeatureMap)> {
    let (h, w) = schedule.feature_hw;
    if feature.dim() != (h, w, codebook.dim()) {
        return Err(Error::Shape(format!(
            "feature shape {:?} does not match finest grid ({h},{w},{})",
            feature.dim(),
            codebook.dim()
        )));
    }
    let mut residual = feature.clone();
    let mut maps = Vec::with_capacity(schedule.num_scales());
    for k in 1..=schedule.num_scales() {
        let (hk, wk) = schedule.grid(k);
        let down = area_down(residual.view(), hk, wk);
        let map = assigner.assign(down.view(), codebook);
        let up = box_up(lookup(&map, codebook).view(), h, w);
        residual -= &up;
        maps.push(map);
    }
    Ok((
        ResidualStack {
            schedule: schedule.clone(),
            maps,
        },
        residual,
    ))
}

/// Cumulative feature after scales 1..=k, at full feature resolution:
/// the sum of each map's looked-up vectors upsampled to (h, w).
pub fn aggregate(stack: &ResidualStack, upto: usize, codebook: &Codebook) -> Result<FeatureMap> {
    let k_max = stack.schedule.num_scales();
    if upto == 0 || upto > k_max {
        return Err(Error::Bounds(format!("scale {upto} out of 1..={k_max}")));
    }
    let (h, w) = stack.schedule.feature_hw;
    let mut acc = Array3::zeros((h, w, codebook.dim()));
    for k in 1..=upto {
        acc += &box_up(lookup(&stack.maps[k - 1], codebook).view(), h, w);
    }
    Ok(acc)
}

/// Downsample the cumulative scale-k feature to the next scale's grid,
/// producing the transformer input for scale k+1.
pub fn next_scale_input(
    feature: &FeatureMap,
    schedule: &ScaleSchedule,
    k: usize,
) -> Result<FeatureMap> {
    if k == 0 || k >= schedule.num_scales() {
        return Err(Error::Bounds(format!(
            "no scale after {k} in a {}-scale schedule",
            schedule.num_scales()
        )));
    }
    let (hn, wn) = schedule.grid(k + 1);
    Ok(area_down(feature.view(), hn, wn))
}

/// Patch autoencoder weights: a 3 -> d_c projection on patch means and a
/// d_c -> 3 projection back.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams {
    pub enc_w: Array2<f64>,
    pub enc_b: Array1<f64>,
    pub dec_w: Array2<f64>,
    pub dec_b: Array1<f64>,
}

impl CodecParams {
    pub fn init(dim: usize, seed: u64) -> CodecParams {
        let mut stream = rng::stream(seed, "codec-init");
        let mut normal = || {
            // Box-Muller; plenty for init.
            let u1: f64 = stream.gen_range(f64::EPSILON..1.0);
            let u2: f64 = stream.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        CodecParams {
            enc_w: Array2::from_shape_fn((3, dim), |_| normal() * 0.5),
            enc_b: Array1::zeros(dim),
            dec_w: Array2::from_shape_fn((dim, 3), |_| normal() * 0.5),
            dec_b: Array1::zeros(3),
        }
    }

    pub fn dim(&self) -> usize {
        self.enc_w.ncols()
    }

    /// Patch-mean-pool `img` ((side, side, 3), values in [0,1]) and project
    /// to d_c channels.
    pub fn encode(&self, img: &Array3<f64>) -> Result<FeatureMap> {
        let (h, w, c) = img.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || h % PATCH != 0 || w == 0 || w % PATCH != 0 {
            return Err(Error::Shape(format!(
                "image side ({h},{w}) not divisible by patch size {PATCH}"
            )));
        }
        let means = area_down(img.view(), h / PATCH, w / PATCH);
        let (fh, fw, _) = means.dim();
        let d = self.dim();
        let mut out = Array3::zeros((fh, fw, d));
        for i in 0..fh {
            for j in 0..fw {
                for dc in 0..d {
                    let mut acc = self.enc_b[dc];
                    for ch in 0..3 {
                        acc += means[(i, j, ch)] * self.enc_w[(ch, dc)];
                    }
                    out[(i, j, dc)] = acc;
                }
            }
        }
        Ok(out)
    }

    /// Project features back to RGB and broadcast each cell over its patch.
    pub fn decode(&self, feature: &FeatureMap) -> Result<Array3<f64>> {
        let (fh, fw, d) = feature.dim();
        if d != self.dim() {
            return Err(Error::Shape(format!(
                "feature has {d} channels, codec expects {}",
                self.dim()
            )));
        }
        let mut out = Array3::zeros((fh * PATCH, fw * PATCH, 3));
        for i in 0..fh {
            for j in 0..fw {
                let mut rgb = [0.0f64; 3];
                for (ch, v) in rgb.iter_mut().enumerate() {
                    let mut acc = self.dec_b[ch];
                    for dc in 0..d {
                        acc += feature[(i, j, dc)] * self.dec_w[(dc, ch)];
                    }
                    *v = acc;
                }
                for pi in 0..PATCH {
                    for pj in 0..PATCH {
                        for ch in 0..3 {
                            out[(i * PATCH + pi, j * PATCH + pj, ch)] = rgb[ch];
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One training step's loss terms.
#[derive(Debug, Clone, Copy)]
pub struct CodecLoss {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl CodecLoss {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.codebook + 0.25 * self.commitment
    }
}

/// Adam state for the codec's joint autoencoder + codebook training.
///
/// Codebook entries that go unselected for a while are restarted onto
/// residual vectors drawn from the current batch, so the whole book stays
/// live instead of collapsing onto a handful of codes.
pub struct CodecTrainer {
    pub params: CodecParams,
    pub codebook: Codebook,
    schedule: ScaleSchedule,
    lr: f64,
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    last_used: Vec<usize>,
    restart_after: usize,
    restart_rng: rand_chacha::ChaCha8Rng,
    /// EMA cluster statistics driving the codebook update (online k-means).
    ema_count: Vec<f64>,
    ema_sum: Array2<f64>,
    /// Steps to train the plain autoencoder before enabling quantization,
    /// so the codebook fits a stationary feature distribution. The encoder
    /// freezes once quantization starts; the decoder and codebook keep
    /// training.
    pub ae_warmup: usize,
    /// Total planned steps, for the cosine learning-rate decay and for
    /// stopping restarts near the end so the book settles.
    pub total_steps: usize,
}

struct CodecGrads {
    enc_w: Array2<f64>,
    enc_b: Array1<f64>,
    dec_w: Array2<f64>,
    dec_b: Array1<f64>,
    assign_sum: Array2<f64>,
    assign_count: Vec<f64>,
}

impl CodecTrainer {
    pub fn new(
        params: CodecParams,
        codebook: Codebook,
        schedule: ScaleSchedule,
        lr: f64,
        seed: u64,
    ) -> Self {
        let n = params.enc_w.len()
            + params.enc_b.len()
            + params.dec_w.len()
            + params.dec_b.len()
            + codebook.entries.len();
        let size = codebook.size();
        let dims = codebook.entries.dim();
        CodecTrainer {
            params,
            codebook,
            schedule,
            lr,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            last_used: vec![0; size],
            restart_after: 120,
            restart_rng: rng::stream(seed, "codec-restart"),
            ema_count: vec![0.0; size],
            ema_sum: Array2::zeros(dims),
            ae_warmup: 0,
            total_steps: 0,
        }
    }

    /// Standard phase schedule: 20% plain-autoencoder warmup, then joint
    /// quantized training with a frozen encoder.
    pub fn with_schedule(mut self, total_steps: usize) -> Self {
        self.total_steps = total_steps;
        self.ae_warmup = total_steps / 5;
        self
    }

    /// Straight-through reconstruction pass over one image; returns the loss
    /// terms and accumulates gradients, the selected entries, and the
    /// residual vectors seen (restart candidates).
    fn backward_one(
        &self,
        img: &Array3<f64>,
        grads: &mut CodecGrads,
        used: &mut [bool],
        pool: &mut Vec<Vec<f64>>,
    ) -> Result<CodecLoss> {
        let (h, w) = self.schedule.feature_hw;
        let d = self.params.dim();
        let feature = self.params.encode(img)?;

        let quantizing = self.step >= self.ae_warmup;
        // Quantize, caching the per-scale downsampled residuals and picks.
        let mut residual = feature.clone();
        let mut downs: Vec<FeatureMap> = Vec::new();
        let mut maps: Vec<Array2<usize>> = Vec::new();
        if quantizing {
            for k in 1..=self.schedule.num_scales() {
                let (hk, wk) = self.schedule.grid(k);
                let down = area_down(residual.view(), hk, wk);
                let map = NearestAssigner.assign(down.view(), &self.codebook);
                let up = box_up(lookup(&map, &self.codebook).view(), h, w);
                residual -= &up;
                for &idx in map.iter() {
                    used[idx] = true;
                }
                let (hk2, wk2, _) = down.dim();
                for i in 0..hk2 {
                    for j in 0..wk2 {
                        pool.push((0..d).map(|c| down[(i, j, c)]).collect());
                    }
                }
                downs.push(down);
                maps.push(map);
            }
        } else {
            residual.fill(0.0);
        }
        let f_hat = &feature - &residual; // sum of upsampled lookups
        let recon = self.params.decode(&f_hat)?;

        // Mean-squared losses.
        let n_px = recon.len() as f64;
        let mut rec_loss = 0.0;
        for (r, t) in recon.iter().zip(img.iter()) {
            rec_loss += (r - t) * (r - t);
        }
        rec_loss /= n_px;
        let mut cb_loss = 0.0;
        let mut commit_loss = 0.0;
        let n_all = downs.iter().map(|d| d.len()).sum::<usize>().max(1) as f64;
        for (down, map) in downs.iter().zip(&maps) {
            let (hk, wk, _) = down.dim();
            for i in 0..hk {
                for j in 0..wk {
                    let e = self.codebook.entries.row(map[(i, j)]);
                    for (c, ev) in e.iter().enumerate() {
                        let diff = down[(i, j, c)] - ev;
                        cb_loss += diff * diff / n_all;
                        commit_loss += diff * diff / n_all;
                    }
                }
            }
        }

        // Reconstruction backward: d_recon -> decoder -> straight-through
        // into the encoder output.
        let mut d_recon = Array3::zeros(recon.dim());
        for ((dr, r), t) in d_recon.iter_mut().zip(recon.iter()).zip(img.iter()) {
            *dr = 2.0 * (r - t) / n_px;
        }
        // decode: per-cell rgb broadcast over the patch; adjoint sums the patch.
        let mut d_fhat = Array3::zeros((h, w, d));
        for i in 0..h {
            for j in 0..w {
                let mut d_rgb = [0.0f64; 3];
                for pi in 0..PATCH {
                    for pj in 0..PATCH {
                        for ch in 0..3 {
                            d_rgb[ch] += d_recon[(i * PATCH + pi, j * PATCH + pj, ch)];
                        }
                    }
                }
                for ch in 0..3 {
                    grads.dec_b[ch] += d_rgb[ch];
                    for dc in 0..d {
                        grads.dec_w[(dc, ch)] += f_hat[(i, j, dc)] * d_rgb[ch];
                    }
                }
                for dc in 0..d {
                    let mut acc = 0.0;
                    for ch in 0..3 {
                        acc += d_rgb[ch] * self.params.dec_w[(dc, ch)];
                    }
                    d_fhat[(i, j, dc)] = acc;
                }
            }
        }
        // Straight-through: gradient w.r.t. the encoder output is d_fhat
        // unchanged, plus the commitment pull on each downsampled residual.
        let mut d_feature = d_fhat;
        for (k, (down, map)) in downs.iter().zip(&maps).enumerate() {
            let (hk, wk, _) = down.dim();
            let mut d_down = Array3::zeros(down.dim());
            for i in 0..hk {
                for j in 0..wk {
                    let e = self.codebook.entries.row(map[(i, j)]);
                    for (c, ev) in e.iter().enumerate() {
                        let diff = down[(i, j, c)] - ev;
                        d_down[(i, j, c)] = 0.25 * 2.0 * diff / n_all;
                        grads.assign_sum[(map[(i, j)], c)] += down[(i, j, c)];
                    }
                    grads.assign_count[map[(i, j)]] += 1.0;
                }
            }
            // d_k = Down(r_{k-1}); lookups are gradient-stopped, so
            // d r_{k-1} / d feature is the identity.
            let _ = k;
            d_feature += &area_down_adjoint(d_down.view(), h, w);
        }
        // Encoder backward.
        let means = area_down(img.view(), h, w);
        for i in 0..h {
            for j in 0..w {
                for dc in 0..d {
                    let g = d_feature[(i, j, dc)];
                    grads.enc_b[dc] += g;
                    for ch in 0..3 {
                        grads.enc_w[(ch, dc)] += means[(i, j, ch)] * g;
                    }
                }
            }
        }
        Ok(CodecLoss {
            reconstruction: rec_loss,
            codebook: cb_loss,
            commitment: commit_loss,
        })
    }

    pub fn step(&mut self, batch: &[Array3<f64>]) -> Result<CodecLoss> {
        let d = self.params.dim();
        let mut grads = CodecGrads {
            enc_w: Array2::zeros((3, d)),
            enc_b: Array1::zeros(d),
            dec_w: Array2::zeros((d, 3)),
            dec_b: Array1::zeros(3),
            assign_sum: Array2::zeros(self.codebook.entries.dim()),
            assign_count: vec![0.0; self.codebook.size()],
        };
        let mut total = CodecLoss {
            reconstruction: 0.0,
            codebook: 0.0,
            commitment: 0.0,
        };
        let mut used = vec![false; self.codebook.size()];
        let mut pool: Vec<Vec<f64>> = Vec::new();
        for img in batch {
            let loss = self.backward_one(img, &mut grads, &mut used, &mut pool)?;
            total.reconstruction += loss.reconstruction;
            total.codebook += loss.codebook;
            total.commitment += loss.commitment;
        }
        let scale = 1.0 / batch.len().max(1) as f64;
        total.reconstruction *= scale;
        total.codebook *= scale;
        total.commitment *= scale;
        if !total.total().is_finite() {
            return Err(Error::Numeric("non-finite codec loss".into()));
        }

        self.step += 1;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let bias1 = 1.0 - b1_pow(b1, self.step);
        let bias2 = 1.0 - b1_pow(b2, self.step);
        let lr = if self.total_steps > self.step {
            let progress = self.step as f64 / self.total_steps as f64;
            let floor = 0.1 * self.lr;
            floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            self.lr
        };
        let freeze_encoder = self.step > self.ae_warmup && self.ae_warmup > 0;
        let mut idx = 0;
        let apply = |param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..param.len() {
                let g = grad[i] * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                param[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        };
        let (m, v) = (&mut self.m, &mut self.v);
        let mut seg = |len: usize| {
            let r = idx..idx + len;
            idx += len;
            r
        };
        let r = seg(self.params.enc_w.len());
        if !freeze_encoder {
            apply(
                self.params.enc_w.as_slice_mut().unwrap(),
                grads.enc_w.as_slice().unwrap(),
                &mut m[r.clone()],
                &mut v[r.clone()],
            );
        }
        let r2 = seg(self.params.enc_b.len());
        if !freeze_encoder {
            apply(
                self.params.enc_b.as_slice_mut().unwrap(),
                grads.enc_b.as_slice().unwrap(),
                &mut m[r2.clone()],
                &mut v[r2.clone()],
            );
        }
        let r = seg(self.params.dec_w.len());
        apply(
            self.params.dec_w.as_slice_mut().unwrap(),
            grads.dec_w.as_slice().unwrap(),
            &mut m[r.clone()],
            &mut v[r],
        );
        let r = seg(self.params.dec_b.len());
        apply(
            self.params.dec_b.as_slice_mut().unwrap(),
            grads.dec_b.as_slice().unwrap(),
            &mut m[r.clone()],
            &mut v[r],
        );
        let _ = seg(self.codebook.entries.len());
        // EMA cluster update (online k-means): selected entries drift to the
        // running mean of the residual vectors assigned to them.
        let decay = 0.99;
        for e in 0..self.codebook.size() {
            self.ema_count[e] = decay * self.ema_count[e] + (1.0 - decay) * grads.assign_count[e];
            for c in 0..self.codebook.dim() {
                self.ema_sum[(e, c)] =
                    decay * self.ema_sum[(e, c)] + (1.0 - decay) * grads.assign_sum[(e, c)];
            }
            if self.ema_count[e] > 1e-3 {
                for c in 0..self.codebook.dim() {
                    self.codebook.entries[(e, c)] = self.ema_sum[(e, c)] / self.ema_count[e];
                }
            }
        }

        // Dead-code restarts: entries idle past the window move onto the
        // batch residuals farthest from the current book (the uncovered
        // tail), with a little jitter so no two entries coincide. Their
        // moments reset. Restarts stop near the end so the book settles.
        let codebook_offset = self.m.len() - self.codebook.entries.len();
        for (e, last) in self.last_used.iter_mut().enumerate() {
            if used[e] {
                *last = self.step;
            }
        }
        let restarts_active = self.total_steps == 0 || self.step < self.total_steps * 3 / 5;
        if !pool.is_empty() && self.step > self.ae_warmup && restarts_active {
            let dim = self.codebook.dim();
            let dead: Vec<usize> = (0..self.codebook.size())
                .filter(|&e| self.step - self.last_used[e] >= self.restart_after)
                .take(8)
                .collect();
            if !dead.is_empty() {
                // Nearest-book distance per pool vector.
                let mut scored: Vec<(f64, usize)> = pool
                    .iter()
                    .enumerate()
                    .map(|(pi, vec)| {
                        let mut best = f64::INFINITY;
                        for entry in self.codebook.entries.rows() {
                            let mut d2 = 0.0;
                            for (c, ev) in entry.iter().enumerate() {
                                let diff = vec[c] - ev;
                                d2 += diff * diff;
                            }
                            best = best.min(d2);
                        }
                        (best, pi)
                    })
                    .collect();
                scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                for (slot, &e) in dead.iter().enumerate() {
                    let pick = &pool[scored[slot % scored.len()].1];
                    for c in 0..dim {
                        let jitter = self.restart_rng.gen_range(-1e-3..1e-3);
                        self.codebook.entries[(e, c)] = pick[c] + jitter;
                        self.ema_sum[(e, c)] = 0.0;
                    }
                    self.ema_count[e] = 0.0;
                    let span = codebook_offset + e * dim..codebook_offset + (e + 1) * dim;
                    self.m[span.clone()].fill(0.0);
                    self.v[span].fill(0.0);
                    self.last_used[e] = self.step;
                }
            }
        }
        Ok(total)
    }
}

fn b1_pow(b: f64, n: usize) -> f64 {
    b.powi(n as i32)
}
