//! Target-image provisioning: procedural toy datasets, PNG directory
//! ingestion, area-average downsampling, and deterministic epoch shuffling.
//!
//! Procedural glyphs are rendered through the environment's own brush, so
//! every glyph comes with a ground-truth action sequence that reproduces it
//! bit-exactly — "a perfect score is attainable" is checkable by replay.

use crate::env::{
    Action, ActionSpec, BrushParams, CompoundAction, EnvConfig, Interface, PaintEnv,
};
use crate::png_io;
use crate::render::{BrushConfig, Canvas};
use crate::util::{rng_for, stream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty dataset")]
    Empty,
    #[error("dataset config: {0}")]
    Config(String),
    #[error("png: {0}")]
    Png(#[from] crate::png_io::PngError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("env: {0}")]
    Env(#[from] crate::env::EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// One antialiased filled disc with a random center, radius, and
    /// palette color (always a clearly dominant channel) on white.
    ProceduralDiscs,
    /// 2-4 random polyline strokes deposited through the compound brush.
    ProceduralGlyphs,
    /// Flat folder of 8-bit RGB PNGs, downsampled to the train size.
    ImageDirectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Source folder for `ImageDirectory`.
    pub dir: Option<PathBuf>,
    /// Number of procedural items.
    pub count: usize,
    pub seed: u64,
    /// Square side of every emitted canvas.
    pub train_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::ProceduralDiscs,
            dir: None,
            count: 256,
            seed: 0,
            train_size: 32,
        }
    }
}

/// Immutable after construction; batch cursors live with each consumer.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cfg: DatasetConfig,
    items: Vec<Canvas>,
    /// Ground-truth compound action lists, glyphs only.
    glyph_actions: Vec<Vec<Action>>,
    /// The action discretization glyphs were generated with.
    glyph_spec: Option<(ActionSpec, BrushConfig)>,
}

/// Per-consumer batch position; epoch order is a seeded permutation that is
/// reshuffled when the cursor wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Cursor {
    pub epoch: u64,
    pub pos: usize,
}

impl Dataset {
    pub fn build(cfg: DatasetConfig) -> Result<Dataset, DataError> {
        Self::build_with_spec(cfg, &ActionSpec::default(), &BrushConfig::default())
    }

    /// Glyph datasets take the action discretization so their strokes stay
    /// exactly realizable by the environment.
    pub fn build_with_spec(
        cfg: DatasetConfig,
        spec: &ActionSpec,
        brush: &BrushConfig,
    ) -> Result<Dataset, DataError> {
        if cfg.train_size < 2 {
            return Err(DataError::Config("train_size must be >= 2".into()));
        }
        let mut items = Vec::new();
        let mut glyph_actions = Vec::new();
        let mut glyph_spec = None;
        match cfg.kind {
            DatasetKind::ProceduralDiscs => {
                if cfg.count == 0 {
                    return Err(DataError::Empty);
                }
                for index in 0..cfg.count {
                    items.push(gen_disc(cfg.seed, index as u64, cfg.train_size));
                }
            }
            DatasetKind::ProceduralGlyphs => {
                if cfg.count == 0 {
                    return Err(DataError::Empty);
                }
                let mut gspec = spec.clone();
                gspec.interface = Interface::Compound;
                for index in 0..cfg.count {
                    let (canvas, actions) =
                        gen_glyph(cfg.seed, index as u64, cfg.train_size, &gspec, brush)?;
                    items.push(canvas);
                    glyph_actions.push(actions);
                }
                glyph_spec = Some((gspec, *brush));
            }
            DatasetKind::ImageDirectory => {
                let dir = cfg
                    .dir
                    .as_ref()
                    .ok_or_else(|| DataError::Config("image-directory needs `dir`".into()))?;
                let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| p.extension().is_some_and(|x| x == "png"))
                    .collect();
                paths.sort();
                for p in paths {
                    let native = png_io::read_png(&p)?;
                    items.push(to_train_size(&native, cfg.train_size)?);
                }
                if items.is_empty() {
                    return Err(DataError::Empty);
                }
            }
        }
        Ok(Dataset { cfg, items, glyph_actions, glyph_spec })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Canvas {
        &self.items[i]
    }

    pub fn glyph_ground_truth(&self, i: usize) -> Option<&[Action]> {
        self.glyph_actions.get(i).map(|v| v.as_slice())
    }

    pub fn glyph_spec(&self) -> Option<&(ActionSpec, BrushConfig)> {
        self.glyph_spec.as_ref()
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        let mut rng = rng_for(self.cfg.seed, &[stream::DATASET_SHUFFLE, epoch]);
        // Fisher-Yates.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    /// Draws `batch_size` canvases in seeded-permutation order, advancing
    /// the cursor (wrapping into a reshuffled next epoch).
    pub fn sample_batch(&self, batch_size: usize, cursor: &mut Cursor) -> Vec<&Canvas> {
        assert!(!self.items.is_empty());
        let mut batch = Vec::with_capacity(batch_size);
        let mut perm = self.permutation(cursor.epoch);
        for _ in 0..batch_size {
            if cursor.pos >= perm.len() {
                cursor.epoch += 1;
                cursor.pos = 0;
                perm = self.permutation(cursor.epoch);
            }
            batch.push(&self.items[perm[cursor.pos]]);
            cursor.pos += 1;
        }
        batch
    }

    /// Like `sample_batch` but returning item indices.
    pub fn sample_indices(&self, batch_size: usize, cursor: &mut Cursor) -> Vec<usize> {
        let mut batch = Vec::with_capacity(batch_size);
        let mut perm = self.permutation(cursor.epoch);
        for _ in 0..batch_size {
            if cursor.pos >= perm.len() {
                cursor.epoch += 1;
                cursor.pos = 0;
                perm = self.permutation(cursor.epoch);
            }
            batch.push(perm[cursor.pos]);
            cursor.pos += 1;
        }
        batch
    }
}

/// Area-average pooling by an integer factor. Dimensions that do not divide
/// are reflect-padded up to the next multiple first.
pub fn downsample(image: &Canvas, factor: usize) -> Canvas {
    assert!(factor >= 1);
    if factor == 1 {
        return image.clone();
    }
    let (h, w) = (image.height(), image.width());
    let padded = if h % factor == 0 && w % factor == 0 {
        image.clone()
    } else {
        reflect_pad(image, h.div_ceil(factor) * factor, w.div_ceil(factor) * factor)
    };
    let (ph, pw) = (padded.height(), padded.width());
    let (oh, ow) = (ph / factor, pw / factor);
    let mut out = Canvas::white(oh, ow);
    let inv = 1.0 / (factor * factor) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = [0.0; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let px = padded.get(oy * factor + dy, ox * factor + dx);
                    for c in 0..3 {
                        acc[c] += px[c];
                    }
                }
            }
            out.set(oy, ox, [acc[0] * inv, acc[1] * inv, acc[2] * inv]);
        }
    }
    out
}

fn reflect_pad(image: &Canvas, h: usize, w: usize) -> Canvas {
    let (ih, iw) = (image.height(), image.width());
    let mut out = Canvas::white(h, w);
    for r in 0..h {
        let sr = if r < ih { r } else { 2 * ih - 2 - r.min(2 * ih - 2) };
        for c in 0..w {
            let sc = if c < iw { c } else { 2 * iw - 2 - c.min(2 * iw - 2) };
            out.set(r, c, image.get(sr.min(ih - 1), sc.min(iw - 1)));
        }
    }
    out
}

fn to_train_size(native: &Canvas, train: usize) -> Result<Canvas, DataError> {
    if native.height() < train || native.width() < train {
        return Err(DataError::Config(format!(
            "image {}x{} smaller than train size {train}",
            native.height(),
            native.width()
        )));
    }
    let factor = (native.height().max(native.width())).div_ceil(train);
    let down = downsample(native, factor);
    if down.height() != train || down.width() != train {
        return Err(DataError::Config(format!(
            "image {}x{} does not downsample to {train}x{train} by an integer factor",
            native.height(),
            native.width()
        )));
    }
    Ok(down)
}

/// Palette used for disc colors: a clearly dominant channel (so the
/// hue-match probe is well defined), with every value on the color-bin grid.
pub fn gen_disc(seed: u64, index: u64, size: usize) -> Canvas {
    let mut rng = rng_for(seed, &[stream::DATA_GEN, index]);
    let cx = 0.3 + 0.4 * rng.random::<f64>();
    let cy = 0.3 + 0.4 * rng.random::<f64>();
    let radius = 0.12 + 0.16 * rng.random::<f64>();
    let dominant = rng.random_range(0..3usize);
    let hi = [5.0 / 7.0, 6.0 / 7.0, 1.0][rng.random_range(0..3usize)];
    let lo = |rng: &mut rand_chacha::ChaCha12Rng| [0.0, 1.0 / 7.0, 2.0 / 7.0][rng.random_range(0..3usize)];
    let mut color = [0.0; 3];
    for (c, slot) in color.iter_mut().enumerate() {
        *slot = if c == dominant { hi } else { lo(&mut rng) };
    }

    let mut canvas = Canvas::white(size, size);
    let (pcx, pcy, pr) = (cx * size as f64, cy * size as f64, radius * size as f64);
    let ss = 4;
    for row in 0..size {
        for col in 0..size {
            let mut cover = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = col as f64 + (sx as f64 + 0.5) / ss as f64;
                    let y = row as f64 + (sy as f64 + 0.5) / ss as f64;
                    let d2 = (x - pcx) * (x - pcx) + (y - pcy) * (y - pcy);
                    if d2 <= pr * pr {
                        cover += 1.0;
                    }
                }
            }
            if cover > 0.0 {
                let a = cover / (ss * ss) as f64;
                let mut px = [0.0; 3];
                for c in 0..3 {
                    px[c] = a * color[c] + (1.0 - a);
                }
                canvas.set(row, col, px);
            }
        }
    }
    canvas
}

/// Disc parameters used by `gen_disc` (center, radius, color), exposed for
/// oracle checks.
pub fn disc_params(seed: u64, index: u64) -> (f64, f64, f64, [f64; 3]) {
    let mut rng = rng_for(seed, &[stream::DATA_GEN, index]);
    let cx = 0.3 + 0.4 * rng.random::<f64>();
    let cy = 0.3 + 0.4 * rng.random::<f64>();
    let radius = 0.12 + 0.16 * rng.random::<f64>();
    let dominant = rng.random_range(0..3usize);
    let hi = [5.0 / 7.0, 6.0 / 7.0, 1.0][rng.random_range(0..3usize)];
    let lo = |rng: &mut rand_chacha::ChaCha12Rng| [0.0, 1.0 / 7.0, 2.0 / 7.0][rng.random_range(0..3usize)];
    let mut color = [0.0; 3];
    for (c, slot) in color.iter_mut().enumerate() {
        *slot = if c == dominant { hi } else { lo(&mut rng) };
    }
    (cx, cy, radius, color)
}

/// 2-4 polyline strokes of 2-3 grid points each, dark palette colors, full
/// opacity, deposited through the compound interface. Returns the canvas and
/// the generating action list.
pub fn gen_glyph(
    seed: u64,
    index: u64,
    size: usize,
    spec: &ActionSpec,
    brush: &BrushConfig,
) -> Result<(Canvas, Vec<Action>), DataError> {
    let mut rng = rng_for(seed, &[stream::DATA_GEN, index]);
    let strokes = rng.random_range(2..=4usize);
    let mut actions = Vec::new();
    for _ in 0..strokes {
        let points = rng.random_range(2..=3usize);
        let thickness = rng.random_range(0..2usize.min(spec.thickness_bins.len()));
        let shade = rng.random_range(0..2usize); // black or near-black
        let brush_params = BrushParams {
            thickness,
            color: [shade, shade, shade],
            opacity: spec.opacity_bins.len() - 1,
        };
        let mut prev = usize::MAX;
        for _ in 0..points {
            let mut cell = rng.random_range(0..spec.grid_cells());
            while cell == prev {
                cell = rng.random_range(0..spec.grid_cells());
            }
            prev = cell;
            actions.push(Action::Compound(CompoundAction::AddControlPoint {
                point: cell,
                brush: brush_params,
            }));
        }
        actions.push(Action::Compound(CompoundAction::CommitStroke));
    }

    let cfg = EnvConfig {
        episode_len: actions.len(),
        canvas_size: size,
        new_stroke_penalty: 0.0,
        stroke_length_penalty: 0.0,
        conditional: false,
    };
    let mut env = PaintEnv::reset(cfg, spec.clone(), *brush, None, seed ^ index)?;
    for a in &actions {
        env.step(a)?;
    }
    Ok((env.canvas().clone(), actions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn discs(count: usize) -> Dataset {
        Dataset::build(DatasetConfig { count, seed: 9, ..DatasetConfig::default() }).unwrap()
    }

    #[test]
    fn batches_have_requested_size_and_are_deterministic() {
        let ds = discs(100);
        let mut cursor = Cursor::default();
        let batch = ds.sample_batch(64, &mut cursor);
        assert_eq!(batch.len(), 64);

        let mut c2 = Cursor::default();
        let again = ds.sample_batch(64, &mut c2);
        for (a, b) in batch.iter().zip(again.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn two_epochs_visit_every_item_exactly_twice() {
        let ds = discs(40);
        let mut cursor = Cursor::default();
        let mut seen: HashMap<usize, usize> = HashMap::new();
        for _ in 0..8 {
            for i in ds.sample_indices(10, &mut cursor) {
                *seen.entry(i).or_default() += 1;
            }
        }
        assert_eq!(seen.len(), 40);
        assert!(seen.values().all(|&v| v == 2));
    }

    #[test]
    fn emitted_canvases_are_in_bounds_with_correct_shape() {
        let ds = discs(16);
        for i in 0..ds.len() {
            let c = ds.get(i);
            assert_eq!((c.height(), c.width()), (32, 32));
            assert!(c.in_bounds());
        }
    }

    #[test]
    fn downsample_block_means() {
        // Constant image stays constant.
        let mut c = Canvas::white(4, 4);
        for r in 0..4 {
            for col in 0..4 {
                c.set(r, col, [0.25, 0.5, 0.75]);
            }
        }
        let d = downsample(&c, 2);
        assert_eq!(d.height(), 2);
        for r in 0..2 {
            for col in 0..2 {
                let px = d.get(r, col);
                assert!((px[0] - 0.25).abs() < 1e-12);
                assert!((px[1] - 0.5).abs() < 1e-12);
                assert!((px[2] - 0.75).abs() < 1e-12);
            }
        }

        // 2x2 block (0,0,1,1) -> 0.5.
        let mut c = Canvas::white(2, 2);
        c.set(0, 0, [0.0; 3]);
        c.set(0, 1, [0.0; 3]);
        c.set(1, 0, [1.0; 3]);
        c.set(1, 1, [1.0; 3]);
        let d = downsample(&c, 2);
        assert_eq!(d.get(0, 0), [0.5; 3]);

        // Random 8x8 equals the brute-force block-mean oracle, and the mean
        // is preserved.
        let mut rng = crate::util::rng_for(3, &[1]);
        use rand::Rng;
        let pixels: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.random()).collect();
        let c = Canvas::from_pixels(8, 8, pixels);
        let d = downsample(&c, 2);
        let mut mean_in = 0.0;
        let mut mean_out = 0.0;
        for oy in 0..4 {
            for ox in 0..4 {
                let mut acc = [0.0; 3];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let px = c.get(oy * 2 + dy, ox * 2 + dx);
                        for ch in 0..3 {
                            acc[ch] += px[ch] * 0.25;
                        }
                    }
                }
                let got = d.get(oy, ox);
                for ch in 0..3 {
                    assert!((got[ch] - acc[ch]).abs() < 1e-12);
                    mean_out += got[ch];
                }
            }
        }
        for v in c.pixels() {
            mean_in += v;
        }
        mean_in /= (8 * 8 * 3) as f64;
        mean_out /= (4 * 4 * 3) as f64;
        assert!((mean_in - mean_out).abs() < 1e-6);
    }

    #[test]
    fn generation_is_deterministic_in_seed_and_index() {
        assert_eq!(gen_disc(5, 3, 32), gen_disc(5, 3, 32));
        assert_ne!(gen_disc(5, 3, 32), gen_disc(5, 4, 32));
        let spec = ActionSpec { interface: Interface::Compound, ..ActionSpec::default() };
        let b = BrushConfig::default();
        let (c1, a1) = gen_glyph(5, 3, 32, &spec, &b).unwrap();
        let (c2, a2) = gen_glyph(5, 3, 32, &spec, &b).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(a1, a2);
    }

    #[test]
    fn glyphs_are_reproducible_from_their_action_lists() {
        let spec = ActionSpec { interface: Interface::Compound, ..ActionSpec::default() };
        let cfg = DatasetConfig {
            kind: DatasetKind::ProceduralGlyphs,
            count: 8,
            seed: 11,
            ..DatasetConfig::default()
        };
        let ds = Dataset::build_with_spec(cfg, &spec, &BrushConfig::default()).unwrap();
        for i in 0..ds.len() {
            let actions = ds.glyph_ground_truth(i).unwrap();
            let (gspec, brush) = ds.glyph_spec().unwrap();
            let env_cfg = EnvConfig {
                episode_len: actions.len(),
                canvas_size: 32,
                new_stroke_penalty: 0.0,
                stroke_length_penalty: 0.0,
                conditional: false,
            };
            let mut env = PaintEnv::reset(env_cfg, gspec.clone(), *brush, None, 0).unwrap();
            for a in actions {
                env.step(a).unwrap();
            }
            // Bit-exact replay: mean squared distance is exactly zero.
            assert_eq!(env.canvas(), ds.get(i), "glyph {i} replay mismatch");
            assert_eq!(env.canvas().mean_sq_distance(ds.get(i)), 0.0);
        }
    }

    #[test]
    fn disc_mask_matches_analytic_circle_oracle() {
        for index in 0..10 {
            let size = 32;
            let c = gen_disc(21, index, size);
            let (cx, cy, r, color) = disc_params(21, index);
            let (pcx, pcy, pr) = (cx * size as f64, cy * size as f64, r * size as f64);
            for row in 0..size {
                for col in 0..size {
                    let d = ((col as f64 + 0.5 - pcx).powi(2) + (row as f64 + 0.5 - pcy).powi(2)).sqrt();
                    if (d - pr).abs() < 1.0 {
                        continue; // boundary band
                    }
                    let px = c.get(row, col);
                    if d < pr {
                        for ch in 0..3 {
                            assert!((px[ch] - color[ch]).abs() < 1e-9, "inside pixel off-color");
                        }
                    } else {
                        assert_eq!(px, [1.0; 3], "outside pixel not white");
                    }
                }
            }
        }
    }

    #[test]
    fn empty_dataset_is_a_config_error() {
        let cfg = DatasetConfig { count: 0, ..DatasetConfig::default() };
        assert!(matches!(Dataset::build(cfg), Err(DataError::Empty)));
    }

    #[test]
    fn png_directory_round_trip() {
        let dir = std::env::temp_dir().join("easel_data_dir_test");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..3 {
            let c = gen_disc(31, i, 64);
            png_io::write_png(&dir.join(format!("img{i}.png")), &c).unwrap();
        }
        let cfg = DatasetConfig {
            kind: DatasetKind::ImageDirectory,
            dir: Some(dir.clone()),
            count: 0,
            seed: 0,
            train_size: 32,
        };
        let ds = Dataset::build(cfg).unwrap();
        assert_eq!(ds.len(), 3);
        for i in 0..3 {
            assert_eq!((ds.get(i).height(), ds.get(i).width()), (32, 32));
            assert!(ds.get(i).in_bounds());
        }
    }
}
