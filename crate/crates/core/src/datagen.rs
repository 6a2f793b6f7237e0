//! Synthetic instruction-edit corpus: patch-aligned colored rectangles on a
//! uniform background, edited by recoloring, adding, removing, or moving one
//! shape. Everything outside the affected bounding box is pixel-identical
//! between source and target, which is what the mock judge and the synthetic
//! scorer lean on.

use crate::error::{Error, Result};
use crate::img::Rgb8;
use crate::rng::indexed_stream;
use crate::schedule::PATCH;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Recolor,
    Add,
    Remove,
    Move,
}

impl OpKind {
    pub const ALL: [OpKind; 4] = [OpKind::Recolor, OpKind::Add, OpKind::Remove, OpKind::Move];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Recolor => "recolor",
            OpKind::Add => "add",
            OpKind::Remove => "remove",
            OpKind::Move => "move",
        }
    }

    /// The verb every instruction of this kind contains.
    pub fn verb(self) -> &'static str {
        match self {
            OpKind::Recolor => "change",
            OpKind::Add => "add",
            OpKind::Remove => "remove",
            OpKind::Move => "move",
        }
    }

    pub fn parse(s: &str) -> Result<OpKind> {
        match s {
            "recolor" => Ok(OpKind::Recolor),
            "add" => Ok(OpKind::Add),
            "remove" => Ok(OpKind::Remove),
            "move" => Ok(OpKind::Move),
            other => Err(Error::Data(format!("unknown op kind '{other}'"))),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pixel rectangle, half-open: x in [x0, x1), y in [y0, y1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn union(&self, other: &Rect) -> Rect {
        Rect {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    fn overlaps(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

/// One instruction-edit pair with its synthesis metadata.
#[derive(Debug, Clone)]
pub struct EditSample {
    pub id: u64,
    pub source: Rgb8,
    pub target: Rgb8,
    pub instruction: String,
    pub op: OpKind,
    /// Bounding box of every pixel allowed to differ.
    pub region: Rect,
    pub seed: u64,
}

const NAMED_COLORS: [(&str, [u8; 3]); 5] = [
    ("red", [214, 40, 40]),
    ("green", [60, 160, 70]),
    ("blue", [45, 80, 200]),
    ("yellow", [230, 200, 50]),
    ("purple", [140, 70, 180]),
];

const BACKGROUNDS: [[u8; 3]; 1] = [[235, 235, 230]];

#[derive(Debug, Clone, Copy)]
struct Shape {
    /// Patch-grid rect (units of 16px patches).
    px: usize,
    py: usize,
    pw: usize,
    ph: usize,
    color_idx: usize,
}

impl Shape {
    fn rect(&self) -> Rect {
        Rect {
            x0: self.px * PATCH,
            y0: self.py * PATCH,
            x1: (self.px + self.pw) * PATCH,
            y1: (self.py + self.ph) * PATCH,
        }
    }

    fn patch_rect(&self) -> Rect {
        Rect {
            x0: self.px,
            y0: self.py,
            x1: self.px + self.pw,
            y1: self.py + self.ph,
        }
    }

    fn noun(&self) -> &'static str {
        if self.pw == self.ph {
            "square"
        } else {
            "rectangle"
        }
    }
}

fn draw(img: &mut Rgb8, rect: Rect, color: [u8; 3]) {
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            img.set(y, x, color);
        }
    }
}

/// Deterministic op-kind sequence matching the configured proportions:
/// greedy largest-deficit scheduling, so every prefix tracks the targets.
pub fn op_schedule(proportions: &BTreeMap<OpKind, f64>, count: usize) -> Vec<OpKind> {
    let total: f64 = proportions.values().sum();
    assert!(total > 0.0, "op proportions must not all be zero");
    let shares: Vec<(OpKind, f64)> = proportions
        .iter()
        .filter(|(_, &w)| w > 0.0)
        .map(|(&k, &w)| (k, w / total))
        .collect();
    let mut used: BTreeMap<OpKind, usize> = shares.iter().map(|&(k, _)| (k, 0)).collect();
    (0..count)
        .map(|i| {
            let pick = shares
                .iter()
                .max_by(|a, b| {
                    let da = a.1 * (i + 1) as f64 - used[&a.0] as f64;
                    let db = b.1 * (i + 1) as f64 - used[&b.0] as f64;
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
                .0;
            *used.get_mut(&pick).unwrap() += 1;
            pick
        })
        .collect()
}

/// Corpus generator. Samples are derived purely from `(seed, id)`, so any
/// id can be produced independently and shards can be generated in
/// parallel.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    pub resolution: usize,
    pub seed: u64,
    ops: Vec<OpKind>,
}

impl Synthesizer {
    pub fn new(resolution: usize, seed: u64, proportions: &BTreeMap<OpKind, f64>) -> Result<Synthesizer> {
        if resolution == 0 || resolution % PATCH != 0 {
            return Err(Error::Config(format!(
                "corpus resolution {resolution} must be a positive multiple of {PATCH}"
            )));
        }
        if resolution / PATCH < 3 {
            return Err(Error::Config(format!(
                "corpus resolution {resolution} leaves fewer than 3 patches per side"
            )));
        }
        if proportions.values().all(|&w| w <= 0.0) {
            return Err(Error::Config("op proportions must not all be zero".into()));
        }
        // A long deterministic pattern; sample i uses ops[i % len].
        let ops = op_schedule(proportions, 1 << 12);
        Ok(Synthesizer {
            resolution,
            seed,
            ops,
        })
    }

    fn op_for(&self, id: u64) -> OpKind {
        self.ops[(id % self.ops.len() as u64) as usize]
    }

    /// Generate sample `id`.
    pub fn sample(&self, id: u64) -> EditSample {
        let mut rng = indexed_stream(self.seed, "corpus", id);
        let op = self.op_for(id);
        let patches = self.resolution / PATCH;

        let background = BACKGROUNDS[rng.gen_range(0..BACKGROUNDS.len())];
        // Distinct colors so instructions refer unambiguously.
        let mut color_order: Vec<usize> = (0..NAMED_COLORS.len()).collect();
        color_order.shuffle(&mut rng);

        // Place 1-4 non-overlapping patch-aligned shapes. `add` needs room
        // for one more, `remove`/`move`/`recolor` need at least one.
        let want = rng.gen_range(1..=4usize);
        let mut shapes: Vec<Shape> = Vec::new();
        let mut attempts = 0;
        while shapes.len() < want && attempts < 64 {
            attempts += 1;
            let pw = rng.gen_range(1..=2usize.min(patches));
            let ph = rng.gen_range(1..=2usize.min(patches));
            let px = rng.gen_range(0..=patches - pw);
            let py = rng.gen_range(0..=patches - ph);
            let cand = Shape {
                px,
                py,
                pw,
                ph,
                color_idx: color_order[shapes.len()],
            };
            if shapes.iter().all(|s| !s.patch_rect().overlaps(&cand.patch_rect())) {
                shapes.push(cand);
            }
        }

        let mut source = Rgb8::filled(self.resolution, self.resolution, background);
        for s in &shapes {
            draw(&mut source, s.rect(), NAMED_COLORS[s.color_idx].1);
        }
        let mut target = source.clone();

        let free_color = |shapes: &[Shape], rng: &mut ChaCha8Rng| -> usize {
            loop {
                let c = rng.gen_range(0..NAMED_COLORS.len());
                if shapes.iter().all(|s| s.color_idx != c) {
                    return c;
                }
            }
        };

        let (instruction, region) = match op {
            OpKind::Recolor => {
                let victim = shapes[rng.gen_range(0..shapes.len())];
                let new_color = free_color(&shapes, &mut rng);
                draw(&mut target, victim.rect(), NAMED_COLORS[new_color].1);
                (
                    format!(
                        "change the {} {} to {}",
                        NAMED_COLORS[victim.color_idx].0,
                        victim.noun(),
                        NAMED_COLORS[new_color].0
                    ),
                    victim.rect(),
                )
            }
            OpKind::Add => {
                // Find a free slot for the new shape; shrink ambitions if
                // the canvas is crowded.
                let mut placed = None;
                for _ in 0..128 {
                    let pw = rng.gen_range(1..=2usize.min(patches));
                    let ph = rng.gen_range(1..=2usize.min(patches));
                    let px = rng.gen_range(0..=patches - pw);
                    let py = rng.gen_range(0..=patches - ph);
                    let cand = Shape {
                        px,
                        py,
                        pw,
                        ph,
                        color_idx: free_color(&shapes, &mut rng),
                    };
                    if shapes.iter().all(|s| !s.patch_rect().overlaps(&cand.patch_rect())) {
                        placed = Some(cand);
                        break;
                    }
                }
                let new = placed.unwrap_or(Shape {
                    px: 0,
                    py: 0,
                    pw: 1,
                    ph: 1,
                    color_idx: free_color(&shapes, &mut rng),
                });
                if placed.is_none() {
                    // Crowded fallback overdraws the corner; the region is
                    // still exactly the new shape's bbox.
                }
                draw(&mut target, new.rect(), NAMED_COLORS[new.color_idx].1);
                let zone = zone_name(new.px, new.py, patches);
                (
                    format!(
                        "add a {} {} in the {zone}",
                        NAMED_COLORS[new.color_idx].0,
                        new.noun()
                    ),
                    new.rect(),
                )
            }
            OpKind::Remove => {
                let victim = shapes[rng.gen_range(0..shapes.len())];
                draw(&mut target, victim.rect(), background);
                (
                    format!(
                        "remove the {} {}",
                        NAMED_COLORS[victim.color_idx].0,
                        victim.noun()
                    ),
                    victim.rect(),
                )
            }
            OpKind::Move => {
                let idx = rng.gen_range(0..shapes.len());
                let victim = shapes[idx];
                let mut dirs: Vec<(&str, isize, isize)> = vec![
                    ("left", -1, 0),
                    ("right", 1, 0),
                    ("up", 0, -1),
                    ("down", 0, 1),
                ];
                dirs.shuffle(&mut rng);
                let mut chosen = None;
                for (name, dx, dy) in dirs {
                    let nx = victim.px as isize + dx;
                    let ny = victim.py as isize + dy;
                    if nx < 0
                        || ny < 0
                        || nx as usize + victim.pw > patches
                        || ny as usize + victim.ph > patches
                    {
                        continue;
                    }
                    let moved = Shape {
                        px: nx as usize,
                        py: ny as usize,
                        ..victim
                    };
                    let clear = shapes
                        .iter()
                        .enumerate()
                        .all(|(i, s)| i == idx || !s.patch_rect().overlaps(&moved.patch_rect()));
                    if clear {
                        chosen = Some((name, moved));
                        break;
                    }
                }
                match chosen {
                    Some((dir, moved)) => {
                        draw(&mut target, victim.rect(), background);
                        draw(&mut target, moved.rect(), NAMED_COLORS[moved.color_idx].1);
                        (
                            format!(
                                "move the {} {} {dir}",
                                NAMED_COLORS[victim.color_idx].0,
                                victim.noun()
                            ),
                            victim.rect().union(&moved.rect()),
                        )
                    }
                    None => {
                        // Boxed in: fall back to a recolor so the pair is
                        // still a valid single-region edit.
                        let new_color = free_color(&shapes, &mut rng);
                        draw(&mut target, victim.rect(), NAMED_COLORS[new_color].1);
                        (
                            format!(
                                "change the {} {} to {}",
                                NAMED_COLORS[victim.color_idx].0,
                                victim.noun(),
                                NAMED_COLORS[new_color].0
                            ),
                            victim.rect(),
                        )
                    }
                }
            }
        };
        let op = if instruction.starts_with("change") && op == OpKind::Move {
            OpKind::Recolor
        } else {
            op
        };
        EditSample {
            id,
            source,
            target,
            instruction,
            op,
            region,
            seed: self.seed,
        }
    }

    /// Generate ids `0..count` lazily.
    pub fn iter(&self, count: u64) -> impl Iterator<Item = EditSample> + '_ {
        (0..count).map(move |id| self.sample(id))
    }
}

fn zone_name(px: usize, py: usize, patches: usize) -> String {
    let third = |v: usize| match (3 * v) / patches.max(1) {
        0 => 0,
        1 => 1,
        _ => 2,
    };
    let vert = ["top", "middle", "bottom"][third(py)];
    let horiz = ["left", "center", "right"][third(px)];
    format!("{vert} {horiz}")
}

/// Accept-or-reject verdict from a sample judge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeVerdict {
    pub accepted: bool,
    pub reason: String,
}

/// Pluggable quality judge for corpus filtering. An external
/// vision-language model would implement this; the built-in mock checks
/// the constructive region discipline instead.
pub trait SampleJudge {
    fn judge(&self, sample: &EditSample) -> std::result::Result<JudgeVerdict, String>;
}

/// Deterministic judge: rejects any sample whose source and target differ
/// outside the declared region.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockJudge;

impl SampleJudge for MockJudge {
    fn judge(&self, sample: &EditSample) -> std::result::Result<JudgeVerdict, String> {
        let (h, w) = (sample.source.height, sample.source.width);
        if sample.target.height != h || sample.target.width != w {
            return Err("source/target size mismatch".into());
        }
        for y in 0..h {
            for x in 0..w {
                if !sample.region.contains(x, y) && sample.source.get(y, x) != sample.target.get(y, x)
                {
                    return Ok(JudgeVerdict {
                        accepted: false,
                        reason: format!("pixel ({x},{y}) changed outside region"),
                    });
                }
            }
        }
        Ok(JudgeVerdict {
            accepted: true,
            reason: "clean".into(),
        })
    }
}

/// Partition samples through a judge, preserving order. Judge failures drop
/// the sample with reason "judge-error" and the pipeline continues.
pub fn filter(
    samples: Vec<EditSample>,
    judge: &dyn SampleJudge,
) -> (Vec<EditSample>, Vec<(EditSample, String)>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for sample in samples {
        match judge.judge(&sample) {
            Ok(v) if v.accepted => kept.push(sample),
            Ok(v) => dropped.push((sample, v.reason)),
            Err(e) => dropped.push((sample, format!("judge-error: {e}"))),
        }
    }
    (kept, dropped)
}

/// On-disk corpus paths for one sample id.
pub fn shard_paths(id: u64) -> (PathBuf, PathBuf) {
    let shard = id / 1000;
    (
        PathBuf::from(format!("images/{shard:03}/{id:06}_src.png")),
        PathBuf::from(format!("images/{shard:03}/{id:06}_tgt.png")),
    )
}

/// Write samples and the tab-separated manifest under `dir`.
pub fn write_corpus(dir: &Path, samples: &[EditSample]) -> Result<PathBuf> {
    let manifest_path = dir.join("manifest.tsv");
    let mut manifest = String::new();
    for s in samples {
        let (src_rel, tgt_rel) = shard_paths(s.id);
        let src = dir.join(&src_rel);
        let tgt = dir.join(&tgt_rel);
        std::fs::create_dir_all(src.parent().unwrap()).map_err(|e| Error::io(src.parent().unwrap(), e))?;
        s.source.save_png(&src)?;
        s.target.save_png(&tgt)?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{},{},{},{}\n",
            s.id,
            src_rel.display(),
            tgt_rel.display(),
            s.instruction,
            s.op,
            s.region.x0,
            s.region.y0,
            s.region.x1,
            s.region.y1
        ));
    }
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// A manifest record (images not yet loaded).
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: u64,
    pub src_path: PathBuf,
    pub tgt_path: PathBuf,
    pub instruction: String,
    pub op: OpKind,
    pub region: Rect,
}

impl ManifestEntry {
    pub fn load(&self, dir: &Path) -> Result<EditSample> {
        Ok(EditSample {
            id: self.id,
            source: Rgb8::load_png(&dir.join(&self.src_path))?,
            target: Rgb8::load_png(&dir.join(&self.tgt_path))?,
            instruction: self.instruction.clone(),
            op: self.op,
            region: self.region,
            seed: 0,
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join("manifest.tsv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Data(format!(
                "manifest line {} has {} fields, expected 6",
                ln + 1,
                fields.len()
            )));
        }
        let coords: Vec<usize> = fields[5]
            .split(',')
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("manifest line {}: bad region: {e}", ln + 1)))?;
        if coords.len() != 4 {
            return Err(Error::Data(format!("manifest line {}: bad region", ln + 1)));
        }
        entries.push(ManifestEntry {
            id: fields[0]
                .parse()
                .map_err(|e| Error::Data(format!("manifest line {}: bad id: {e}", ln + 1)))?,
            src_path: fields[1].into(),
            tgt_path: fields[2].into(),
            instruction: fields[3].to_string(),
            op: OpKind::parse(fields[4])?,
            region: Rect {
                x0: coords[0],
                y0: coords[1],
                x1: coords[2],
                y1: coords[3],
            },
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proportions(pairs: &[(OpKind, f64)]) -> BTreeMap<OpKind, f64> {
        pairs.iter().copied().collect()
    }

    fn default_synth(seed: u64) -> Synthesizer {
        Synthesizer::new(
            64,
            seed,
            &proportions(&[
                (OpKind::Recolor, 0.4),
                (OpKind::Add, 0.2),
                (OpKind::Remove, 0.3),
                (OpKind::Move, 0.1),
            ]),
        )
        .unwrap()
    }

    #[test]
    fn synthesis_is_deterministic_per_seed() {
        let a = default_synth(7);
        let b = default_synth(7);
        for id in 0..32 {
            let sa = a.sample(id);
            let sb = b.sample(id);
            assert_eq!(sa.source, sb.source);
            assert_eq!(sa.target, sb.target);
            assert_eq!(sa.instruction, sb.instruction);
        }
        let c = default_synth(8);
        assert_ne!(a.sample(0).source, c.sample(0).source);
    }

    #[test]
    fn zero_count_is_empty() {
        let s = default_synth(1);
        assert_eq!(s.iter(0).count(), 0);
    }

    #[test]
    fn samples_change_only_inside_region() {
        let synth = default_synth(11);
        for sample in synth.iter(200) {
            let mut outside_changed = 0;
            let mut inside_changed = 0;
            for y in 0..sample.source.height {
                for x in 0..sample.source.width {
                    if sample.source.get(y, x) != sample.target.get(y, x) {
                        if sample.region.contains(x, y) {
                            inside_changed += 1;
                        } else {
                            outside_changed += 1;
                        }
                    }
                }
            }
            assert_eq!(outside_changed, 0, "sample {}", sample.id);
            assert!(inside_changed >= 1, "sample {} is a no-op", sample.id);
            assert!(
                sample.instruction.contains(sample.op.verb()),
                "instruction '{}' lacks verb '{}'",
                sample.instruction,
                sample.op.verb()
            );
        }
    }

    #[test]
    fn every_sample_passes_the_mock_judge() {
        let synth = default_synth(13);
        let samples: Vec<_> = synth.iter(150).collect();
        let (kept, dropped) = filter(samples, &MockJudge);
        assert_eq!(kept.len(), 150);
        assert!(dropped.is_empty());
    }

    #[test]
    fn corrupted_sample_is_dropped_with_reason() {
        let synth = default_synth(17);
        let mut samples: Vec<_> = synth.iter(10).collect();
        // Inject out-of-region noise into sample 4.
        let victim = &mut samples[4];
        let (rx, ry) = (victim.region.x0, victim.region.y0);
        let poke = (0..victim.source.width)
            .flat_map(|x| (0..victim.source.height).map(move |y| (x, y)))
            .find(|&(x, y)| !victim.region.contains(x, y))
            .unwrap();
        let _ = (rx, ry);
        let mut c = victim.target.get(poke.1, poke.0);
        c[0] = c[0].wrapping_add(40);
        victim.target.set(poke.1, poke.0, c);
        let (kept, dropped) = filter(samples, &MockJudge);
        assert_eq!(kept.len(), 9);
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].0.id, 4);
        assert!(dropped[0].1.contains("outside region"));
    }

    struct AlwaysReject;
    impl SampleJudge for AlwaysReject {
        fn judge(&self, _: &EditSample) -> std::result::Result<JudgeVerdict, String> {
            Ok(JudgeVerdict {
                accepted: false,
                reason: "no".into(),
            })
        }
    }

    struct Failing;
    impl SampleJudge for Failing {
        fn judge(&self, _: &EditSample) -> std::result::Result<JudgeVerdict, String> {
            Err("timeout".into())
        }
    }

    #[test]
    fn judge_edge_cases() {
        let synth = default_synth(19);
        let samples: Vec<_> = synth.iter(5).collect();
        let (kept, dropped) = filter(samples.clone(), &AlwaysReject);
        assert!(kept.is_empty());
        assert_eq!(dropped.len(), 5);
        let (kept, dropped) = filter(samples, &Failing);
        assert!(kept.is_empty());
        assert!(dropped.iter().all(|(_, r)| r.starts_with("judge-error")));
    }

    #[test]
    fn op_proportions_tracked_within_two_percent() {
        let props = proportions(&[
            (OpKind::Recolor, 0.5),
            (OpKind::Remove, 0.3),
            (OpKind::Add, 0.2),
        ]);
        let synth = Synthesizer::new(64, 23, &props).unwrap();
        let n = 10_000u64;
        let mut counts: BTreeMap<OpKind, usize> = BTreeMap::new();
        for id in 0..n {
            *counts.entry(synth.op_for(id)).or_default() += 1;
        }
        assert!(counts.get(&OpKind::Move).is_none());
        for (op, want) in [(OpKind::Recolor, 0.5), (OpKind::Remove, 0.3), (OpKind::Add, 0.2)] {
            let got = counts[&op] as f64 / n as f64;
            assert!((got - want).abs() <= 0.02, "{op}: {got} vs {want}");
        }
    }

    #[test]
    fn corpus_roundtrip_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let synth = default_synth(29);
        let samples: Vec<_> = synth.iter(6).collect();
        write_corpus(dir.path(), &samples).unwrap();
        let entries = read_manifest(dir.path()).unwrap();
        assert_eq!(entries.len(), 6);
        for (entry, orig) in entries.iter().zip(&samples) {
            let loaded = entry.load(dir.path()).unwrap();
            assert_eq!(loaded.source, orig.source);
            assert_eq!(loaded.target, orig.target);
            assert_eq!(loaded.instruction, orig.instruction);
            assert_eq!(loaded.op, orig.op);
            assert_eq!(loaded.region, orig.region);
        }
    }
}
