//! Synthetic moving-shape videos with exact ground-truth optical flow.
//!
//! Every scene is a single flat-colored shape on a flat background, rendered
//! by sampling pixel centers (no antialiasing). Because rasterization is
//! nearest-pixel and default velocities are integers, warping frame `i` by its
//! analytic flow reproduces frame `i + 1` exactly.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowfield::FlowField;
use crate::format::{self, Tensor};

/// Block-matching search radius the corpus is bounded by.
pub const DEFAULT_SEARCH_RADIUS: usize = 3;
/// Number of distinct (shape, motion) classes. Id `NUM_CLASSES` is the null condition.
pub const NUM_CLASSES: usize = 12;
/// Oscillating scenes reverse direction every this many frames.
pub const OSCILLATION_HALF_PERIOD: usize = 2;
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disc,
    Bar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Translate,
    Bounce,
    Rotate,
    Oscillate,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Disc, ShapeKind::Bar];
}

impl MotionKind {
    pub const ALL: [MotionKind; 4] = [
        MotionKind::Translate,
        MotionKind::Bounce,
        MotionKind::Rotate,
        MotionKind::Oscillate,
    ];
}

/// Class id of a (shape, motion) combination.
pub fn class_id(shape: ShapeKind, motion: MotionKind) -> usize {
    let s = ShapeKind::ALL.iter().position(|&k| k == shape).unwrap();
    let m = MotionKind::ALL.iter().position(|&k| k == motion).unwrap();
    s * MotionKind::ALL.len() + m
}

/// A pixel sequence `T x H x W x C` with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub data: Array4<f64>,
}

impl Video {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("video contains non-finite values".into()));
        }
        Ok(Video { data })
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn view(&self) -> ArrayView4<'_, f64> {
        self.data.view()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape_kind: ShapeKind,
    pub motion_kind: MotionKind,
    pub size_px: usize,
    /// Pixels per frame as `(x, y)`; ignored by rotating scenes.
    pub velocity: [f64; 2],
    /// Radians per frame; only rotating scenes use it.
    pub angular_rate: f64,
    /// Top-left corner of the shape's bounding box at frame 0, `(x, y)`.
    pub start_position: [f64; 2],
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub foreground: [f64; 3],
    pub background: [f64; 3],
}

impl SceneSpec {
    pub fn class_id(&self) -> usize {
        class_id(self.shape_kind, self.motion_kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size_px < 1 || self.size_px >= self.height.min(self.width) {
            return Err(Error::invalid(
                "size_px",
                format!("{} not in [1, min(H, W))", self.size_px),
            ));
        }
        if self.frames < 2 {
            return Err(Error::invalid("frames", "need at least 2 frames"));
        }
        for (name, c) in [("foreground", &self.foreground), ("background", &self.background)] {
            if c.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::invalid(name, "intensities must lie in [-1, 1]"));
            }
        }
        if self.velocity.iter().chain(&self.start_position).any(|v| !v.is_finite()) || !self.angular_rate.is_finite() {
            return Err(Error::invalid("velocity", "non-finite motion parameters"));
        }
        let radius = DEFAULT_SEARCH_RADIUS as f64;
        let step = match self.motion_kind {
            MotionKind::Rotate => {
                let r = self.size_px as f64 * std::f64::consts::SQRT_2 / 2.0;
                2.0 * r * (self.angular_rate.abs() / 2.0).sin().abs()
            }
            _ => self.velocity[0].hypot(self.velocity[1]),
        };
        if step > radius + 1e-9 {
            let field = match self.motion_kind {
                MotionKind::Rotate => "angular_rate",
                _ => "velocity",
            };
            return Err(Error::invalid(
                field,
                format!("per-frame displacement {step:.3} exceeds search radius {radius}"),
            ));
        }
        Ok(())
    }

    /// Top-left corner of the bounding box for every frame.
    pub fn positions(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.frames);
        let mut p = self.start_position;
        let mut v = self.velocity;
        out.push(p);
        for k in 1..self.frames {
            match self.motion_kind {
                MotionKind::Translate => {
                    p = [p[0] + v[0], p[1] + v[1]];
                }
                MotionKind::Bounce => {
                    let bounds = [(self.width - self.size_px) as f64, (self.height - self.size_px) as f64];
                    for a in 0..2 {
                        let next = p[a] + v[a];
                        if next < 0.0 {
                            p[a] = 0.0;
                            v[a] = -v[a];
                        } else if next > bounds[a] {
                            p[a] = bounds[a];
                            v[a] = -v[a];
                        } else {
                            p[a] = next;
                        }
                    }
                }
                MotionKind::Oscillate => {
                    let sign = if ((k - 1) / OSCILLATION_HALF_PERIOD).is_multiple_of(2) {
                        1.0
                    } else {
                        -1.0
                    };
                    p = [p[0] + sign * v[0], p[1] + sign * v[1]];
                }
                MotionKind::Rotate => {}
            }
            out.push(p);
        }
        out
    }

    fn angle(&self, frame: usize) -> f64 {
        match self.motion_kind {
            MotionKind::Rotate => self.angular_rate * frame as f64,
            _ => 0.0,
        }
    }

    fn center(&self, top_left: [f64; 2]) -> [f64; 2] {
        let half = self.size_px as f64 / 2.0;
        [top_left[0] + half, top_left[1] + half]
    }

    /// Whether the pixel center `(x + 0.5, y + 0.5)` lies inside the shape.
    fn inside(&self, center: [f64; 2], angle: f64, x: usize, y: usize) -> bool {
        let ox = x as f64 + 0.5 - center[0];
        let oy = y as f64 + 0.5 - center[1];
        // Undo the shape's rotation so the test runs in its own frame.
        let (sin, cos) = angle.sin_cos();
        let (lx, ly) = if angle == 0.0 {
            (ox, oy)
        } else {
            (cos * ox + sin * oy, -sin * ox + cos * oy)
        };
        let half = self.size_px as f64 / 2.0;
        match self.shape_kind {
            ShapeKind::Square => lx.abs() < half && ly.abs() < half,
            ShapeKind::Disc => lx * lx + ly * ly <= half * half,
            ShapeKind::Bar => {
                let bar_half = (self.size_px / 2).max(1) as f64 / 2.0;
                lx.abs() < half && ly.abs() < bar_half
            }
        }
    }

    /// `T x H x W` foreground mask.
    pub fn foreground_mask(&self) -> Array3<bool> {
        let positions = self.positions();
        let mut mask = Array3::from_elem((self.frames, self.height, self.width), false);
        for (k, &p) in positions.iter().enumerate() {
            let c = self.center(p);
            let angle = self.angle(k);
            for y in 0..self.height {
                for x in 0..self.width {
                    mask[[k, y, x]] = self.inside(c, angle, x, y);
                }
            }
        }
        mask
    }
}

pub fn render_video(spec: &SceneSpec) -> Result<Video> {
    spec.validate()?;
    let mask = spec.foreground_mask();
    let mut data = Array4::zeros((spec.frames, spec.height, spec.width, CHANNELS));
    for ((k, y, x), &fg) in mask.indexed_iter() {
        let color = if fg { &spec.foreground } else { &spec.background };
        for c in 0..CHANNELS {
            data[[k, y, x, c]] = color[c];
        }
    }
    Ok(Video { data })
}

/// Exact per-pixel displacement from frame `i` to frame `i + 1`, `T - 1` frames.
pub fn analytic_flow(spec: &SceneSpec) -> Result<FlowField> {
    spec.validate()?;
    let mask = spec.foreground_mask();
    let positions = spec.positions();
    let mut data = Array4::zeros((spec.frames - 1, spec.height, spec.width, 2));
    for i in 0..spec.frames - 1 {
        let shift = [
            positions[i + 1][0] - positions[i][0],
            positions[i + 1][1] - positions[i][1],
        ];
        let center = spec.center(positions[i]);
        let (sin, cos) = spec.angular_rate.sin_cos();
        for y in 0..spec.height {
            for x in 0..spec.width {
                if !mask[[i, y, x]] {
                    continue;
                }
                let (u, v) = match spec.motion_kind {
                    MotionKind::Rotate => {
                        let ox = x as f64 + 0.5 - center[0];
                        let oy = y as f64 + 0.5 - center[1];
                        (cos * ox - sin * oy - ox, sin * ox + cos * oy - oy)
                    }
                    _ => (shift[0], shift[1]),
                };
                data[[i, y, x, 0]] = u;
                data[[i, y, x, 1]] = v;
            }
        }
    }
    FlowField::new(data, false)
}

/// A random texture panned rigidly by an integer velocity, with its constant
/// analytic flow. Used to exercise block matching on non-degenerate content.
pub fn render_texture_pan(
    frames: usize,
    height: usize,
    width: usize,
    velocity: [i64; 2],
    seed: u64,
) -> Result<(Video, FlowField)> {
    if frames < 2 {
        return Err(Error::invalid("frames", "need at least 2 frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = (frames - 1) * velocity[0].unsigned_abs().max(velocity[1].unsigned_abs()) as usize;
    let canvas_h = height + 2 * margin;
    let canvas_w = width + 2 * margin;
    let canvas = Array3::from_shape_fn((canvas_h, canvas_w, CHANNELS), |_| rng.random_range(-1.0..1.0));
    let mut data = Array4::zeros((frames, height, width, CHANNELS));
    for k in 0..frames {
        let dy = margin as i64 - k as i64 * velocity[1];
        let dx = margin as i64 - k as i64 * velocity[0];
        let window = canvas.slice(s![
            dy as usize..dy as usize + height,
            dx as usize..dx as usize + width,
            ..
        ]);
        data.index_axis_mut(Axis(0), k).assign(&window);
    }
    let mut flow = Array4::zeros((frames - 1, height, width, 2));
    flow.slice_mut(s![.., .., .., 0]).fill(velocity[0] as f64);
    flow.slice_mut(s![.., .., .., 1]).fill(velocity[1] as f64);
    Ok((Video { data }, FlowField::new(flow, false)?))
}

/// Reorders frames so output frame `k` is input frame `perm[k]`.
pub fn permute_frames(data: ArrayView4<'_, f64>, perm: &[usize]) -> Array4<f64> {
    data.select(Axis(0), perm)
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Draws a uniformly random non-identity frame permutation.
pub fn random_permutation(frames: usize, seed: u64) -> Result<Vec<usize>> {
    if frames < 2 {
        return Err(Error::invalid("frames", "shuffling needs at least 2 frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..frames).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().any(|(k, &p)| k != p) {
            return Ok(perm);
        }
    }
}

pub fn shuffle_frames(video: &Video, seed: u64) -> Result<(Video, Vec<usize>)> {
    let perm = random_permutation(video.frames(), seed)?;
    let data = permute_frames(video.view(), &perm);
    Ok((Video { data }, perm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_holdout: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub size_min: usize,
    pub size_max: usize,
    /// Largest per-axis integer speed for translating scenes.
    pub max_axis_speed: i64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 512,
            n_holdout: 64,
            frames: 8,
            height: 16,
            width: 16,
            size_min: 3,
            size_max: 5,
            max_axis_speed: 2,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::invalid("dataset.frames", "need at least 2 frames"));
        }
        if self.size_min < 1 || self.size_min > self.size_max {
            return Err(Error::invalid("dataset.size_min", "need 1 <= size_min <= size_max"));
        }
        if self.size_max + 2 >= self.height.min(self.width) {
            return Err(Error::invalid("dataset.size_max", "shape too large for the frame"));
        }
        let diag = (self.max_axis_speed as f64) * std::f64::consts::SQRT_2;
        if self.max_axis_speed < 1 || diag > DEFAULT_SEARCH_RADIUS as f64 {
            return Err(Error::invalid(
                "dataset.max_axis_speed",
                format!("diagonal speed must stay within radius {DEFAULT_SEARCH_RADIUS}"),
            ));
        }
        Ok(())
    }
}

fn start_range(extent: i64, size: i64, travel: i64) -> (i64, i64) {
    let lo = 0.max(-travel);
    let hi = (extent - size).min(extent - size - travel);
    (lo, hi)
}

fn pick_start<R: Rng>(rng: &mut R, extent: usize, size: usize, travel: i64) -> f64 {
    let (lo, hi) = start_range(extent as i64, size as i64, travel);
    if lo <= hi {
        rng.random_range(lo..=hi) as f64
    } else {
        // The trajectory is longer than the frame; center it.
        (((extent - size) as i64 - travel) as f64 / 2.0).round()
    }
}

/// Draws one scene; a pure function of `(config, seed)`.
pub fn sample_scene(config: &DatasetConfig, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape_kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
    let motion_kind = MotionKind::ALL[rng.random_range(0..MotionKind::ALL.len())];
    let size_px = rng.random_range(config.size_min..=config.size_max);
    let vmax = config.max_axis_speed;
    let velocity = loop {
        let v = [rng.random_range(-vmax..=vmax), rng.random_range(-vmax..=vmax)];
        if v != [0, 0] {
            break v;
        }
    };
    let angular_rate = rng.random_range(0.15..0.4) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    let t = config.frames as i64 - 1;
    let dims = [config.width, config.height];
    let mut start_position = [0.0; 2];
    for a in 0..2 {
        start_position[a] = match motion_kind {
            MotionKind::Translate => pick_start(&mut rng, dims[a], size_px, t * velocity[a]),
            MotionKind::Bounce | MotionKind::Rotate => rng.random_range(0..=(dims[a] - size_px) as i64) as f64,
            MotionKind::Oscillate => {
                pick_start(&mut rng, dims[a], size_px, OSCILLATION_HALF_PERIOD as i64 * velocity[a])
            }
        };
    }
    let foreground = [(); 3].map(|_| rng.random_range(0.2..1.0));
    let background = [(); 3].map(|_| rng.random_range(-1.0..-0.5));
    SceneSpec {
        shape_kind,
        motion_kind,
        size_px,
        velocity: velocity.map(|v| v as f64),
        angular_rate,
        start_position,
        frames: config.frames,
        height: config.height,
        width: config.width,
        foreground,
        background,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub video: String,
    pub flow: String,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    /// `[H, W]`.
    pub resolution: [usize; 2],
    pub frames: usize,
    pub train: Vec<ManifestItem>,
    pub holdout: Vec<ManifestItem>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Renders and writes `n_train + n_holdout` items; item `i` uses seed `seed + i`.
pub fn build_dataset(config: &DatasetConfig, seed: u64, out_dir: &Path, overwrite: bool) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !overwrite {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} exists; pass overwrite to replace it", manifest_path.display()),
        )));
    }
    let mut train = Vec::with_capacity(config.n_train);
    let mut holdout = Vec::with_capacity(config.n_holdout);
    for idx in 0..config.n_train + config.n_holdout {
        let spec = sample_scene(config, seed.wrapping_add(idx as u64));
        let video = render_video(&spec)?;
        let flow = analytic_flow(&spec)?;
        let item = ManifestItem {
            video: format!("item_{idx}_video.vjt"),
            flow: format!("item_{idx}_flow.vjt"),
            class_id: spec.class_id(),
        };
        format::save_tensor(out_dir.join(&item.video), &Tensor::F64(video.data.into_dyn()))?;
        format::save_tensor(out_dir.join(&item.flow), &Tensor::F64(flow.data.into_dyn()))?;
        if idx < config.n_train {
            train.push(item);
        } else {
            holdout.push(item);
        }
    }
    let manifest = DatasetManifest {
        seed,
        resolution: [config.height, config.width],
        frames: config.frames,
        train,
        holdout,
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// One loaded `(video, flow, class)` triple.
#[derive(Debug, Clone)]
pub struct Item {
    pub video: Video,
    pub flow: FlowField,
    pub class_id: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub train: Vec<Item>,
    pub holdout: Vec<Item>,
}

fn load_item(root: &Path, m: &ManifestItem, manifest: &DatasetManifest) -> Result<Item> {
    let video = format::load_tensor(root.join(&m.video))?
        .to_f64()
        .into_dimensionality()
        .map_err(|_| Error::Format(format!("{} is not 4-D", m.video)))?;
    let flow = format::load_tensor(root.join(&m.flow))?
        .to_f64()
        .into_dimensionality()
        .map_err(|_| Error::Format(format!("{} is not 4-D", m.flow)))?;
    let video = Video::new(video)?;
    let [h, w] = manifest.resolution;
    if video.data.dim() != (manifest.frames, h, w, CHANNELS) {
        return Err(Error::shape(format!("{} does not match the manifest", m.video)));
    }
    let flow = FlowField::new(flow, false)?;
    if flow.data.dim() != (manifest.frames - 1, h, w, 2) {
        return Err(Error::shape(format!("{} does not match the manifest", m.flow)));
    }
    if m.class_id >= NUM_CLASSES {
        return Err(Error::invalid("class_id", format!("{} out of range", m.class_id)));
    }
    Ok(Item {
        video,
        flow,
        class_id: m.class_id,
    })
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(root.join(MANIFEST_FILE))?)?;
        let train = manifest
            .train
            .iter()
            .map(|m| load_item(&root, m, &manifest))
            .collect::<Result<Vec<_>>>()?;
        let holdout = manifest
            .holdout
            .iter()
            .map(|m| load_item(&root, m, &manifest))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            manifest,
            root,
            train,
            holdout,
        })
    }

    /// Builds an in-memory dataset without touching disk.
    pub fn generate(config: &DatasetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut items = Vec::new();
        for idx in 0..config.n_train + config.n_holdout {
            let spec = sample_scene(config, seed.wrapping_add(idx as u64));
            items.push(Item {
                video: render_video(&spec)?,
                flow: analytic_flow(&spec)?,
                class_id: spec.class_id(),
            });
        }
        let holdout = items.split_off(config.n_train);
        let describe = |offset: usize, items: &[Item]| {
            items
                .iter()
                .enumerate()
                .map(|(i, it)| ManifestItem {
                    video: format!("item_{}_video.vjt", offset + i),
                    flow: format!("item_{}_flow.vjt", offset + i),
                    class_id: it.class_id,
                })
                .collect()
        };
        let manifest = DatasetManifest {
            seed,
            resolution: [config.height, config.width],
            frames: config.frames,
            train: describe(0, &items),
            holdout: describe(config.n_train, &holdout),
        };
        Ok(Dataset {
            manifest,
            root: PathBuf::new(),
            train: items,
            holdout,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(motion: MotionKind, velocity: [f64; 2], start: [f64; 2]) -> SceneSpec {
        SceneSpec {
            shape_kind: ShapeKind::Square,
            motion_kind: motion,
            size_px: 3,
            velocity,
            angular_rate: 0.0,
            start_position: start,
            frames: 8,
            height: 16,
            width: 16,
            foreground: [1.0, 0.5, 0.0],
            background: [-1.0, -1.0, -1.0],
        }
    }

    #[test]
    fn translation_shifts_frames() {
        let spec = square(MotionKind::Translate, [1.0, 0.0], [2.0, 4.0]);
        let v = render_video(&spec).unwrap();
        for k in 1..8 {
            for y in 0..16 {
                for x in 0..16 {
                    let expected = if x >= k { v.data[[0, y, x - k, 0]] } else { -1.0 };
                    assert_eq!(v.data[[k, y, x, 0]], expected, "frame {k} ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn static_scene_is_constant_with_zero_flow() {
        let spec = square(MotionKind::Translate, [0.0, 0.0], [5.0, 5.0]);
        let v = render_video(&spec).unwrap();
        for k in 1..8 {
            assert_eq!(v.data.index_axis(Axis(0), k), v.data.index_axis(Axis(0), 0));
        }
        let f = analytic_flow(&spec).unwrap();
        assert!(f.data.iter().all(|&x| x == 0.0));
        assert_eq!(f.frames(), 7);
    }

    #[test]
    fn bounce_flips_velocity_after_contact() {
        // Right wall bound is W - size = 13; one pixel of clearance at start.
        let spec = square(MotionKind::Bounce, [2.0, 0.0], [12.0, 4.0]);
        let xs: Vec<f64> = spec.positions().iter().map(|p| p[0]).collect();
        assert_eq!(&xs[..4], &[12.0, 13.0, 11.0, 9.0]);
        let f = analytic_flow(&spec).unwrap();
        assert_eq!(f.data[[0, 5, 12, 0]], 1.0);
        assert_eq!(f.data[[1, 5, 13, 0]], -2.0);
    }

    #[test]
    fn rotation_flow_quarter_turn() {
        let mut spec = square(MotionKind::Rotate, [0.0; 2], [4.0, 4.0]);
        spec.size_px = 5;
        spec.angular_rate = std::f64::consts::FRAC_PI_2;
        // Bypass the radius bound: a quarter turn is deliberately large.
        let mask = spec.foreground_mask();
        let positions = spec.positions();
        let center = spec.center(positions[0]);
        // Pixel (7, 6) has center (7.5, 6.5), offset (1, 0) from (6.5, 6.5).
        assert_eq!(center, [6.5, 6.5]);
        assert!(mask[[0, 6, 7]]);
        let (sin, cos) = spec.angular_rate.sin_cos();
        let (ox, oy) = (1.0, 0.0);
        let flow = (cos * ox - sin * oy - ox, sin * ox + cos * oy - oy);
        assert!((flow.0 + 1.0).abs() < 1e-12 && (flow.1 - 1.0).abs() < 1e-12);
        assert!(matches!(
            analytic_flow(&spec),
            Err(Error::Validation { field, .. }) if field == "angular_rate"
        ));
    }

    #[test]
    fn rotation_flow_matches_formula() {
        let mut spec = square(MotionKind::Rotate, [0.0; 2], [5.0, 5.0]);
        spec.size_px = 4;
        spec.angular_rate = 0.3;
        let f = analytic_flow(&spec).unwrap();
        // Pixel (8, 7): center (8.5, 7.5), rotation center (7, 7), offset (1.5, 0.5).
        let (s, c) = 0.3f64.sin_cos();
        let (ox, oy) = (1.5, 0.5);
        assert!((f.data[[0, 7, 8, 0]] - (c * ox - s * oy - ox)).abs() < 1e-12);
        assert!((f.data[[0, 7, 8, 1]] - (s * ox + c * oy - oy)).abs() < 1e-12);
    }

    #[test]
    fn validation_names_the_field() {
        let mut spec = square(MotionKind::Translate, [1.0, 0.0], [0.0, 0.0]);
        spec.size_px = 16;
        assert!(matches!(render_video(&spec), Err(Error::Validation { field, .. }) if field == "size_px"));
        spec.size_px = 3;
        spec.frames = 1;
        assert!(matches!(render_video(&spec), Err(Error::Validation { field, .. }) if field == "frames"));
        spec.frames = 8;
        spec.velocity = [4.0, 0.0];
        assert!(matches!(render_video(&spec), Err(Error::Validation { field, .. }) if field == "velocity"));
        spec.velocity = [1.0, 0.0];
        spec.foreground = [1.5, 0.0, 0.0];
        assert!(matches!(render_video(&spec), Err(Error::Validation { field, .. }) if field == "foreground"));
    }

    #[test]
    fn warp_by_flow_reproduces_next_frame() {
        let config = DatasetConfig::default();
        for seed in 0..200 {
            let spec = sample_scene(&config, seed);
            if spec.motion_kind == MotionKind::Rotate {
                continue;
            }
            let v = render_video(&spec).unwrap();
            let f = analytic_flow(&spec).unwrap();
            let mask = spec.foreground_mask();
            let (t, h, w) = mask.dim();
            for i in 0..t - 1 {
                for y in 0..h {
                    for x in 0..w {
                        if !mask[[i, y, x]] {
                            continue;
                        }
                        let tx = x as f64 + f.data[[i, y, x, 0]];
                        let ty = y as f64 + f.data[[i, y, x, 1]];
                        if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                            continue;
                        }
                        let (tx, ty) = (tx as usize, ty as usize);
                        assert!(mask[[i + 1, ty, tx]], "seed {seed} frame {i}");
                        for c in 0..3 {
                            assert_eq!(v.data[[i + 1, ty, tx, c]], v.data[[i, y, x, c]]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn corpus_respects_flow_bound_and_classes() {
        let config = DatasetConfig::default();
        let mut seen = [false; NUM_CLASSES];
        for seed in 0..300 {
            let spec = sample_scene(&config, seed);
            spec.validate().unwrap();
            let f = analytic_flow(&spec).unwrap();
            assert!(f.max_magnitude() <= DEFAULT_SEARCH_RADIUS as f64 + 1e-9);
            seen[spec.class_id()] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn shuffle_two_frames_swaps() {
        let spec = square(MotionKind::Translate, [1.0, 0.0], [2.0, 2.0]);
        let mut spec2 = spec.clone();
        spec2.frames = 2;
        let v = render_video(&spec2).unwrap();
        let (s, perm) = shuffle_frames(&v, 7).unwrap();
        assert_eq!(perm, vec![1, 0]);
        assert_eq!(s.data.index_axis(Axis(0), 0), v.data.index_axis(Axis(0), 1));
    }

    #[test]
    fn shuffle_is_invertible_and_deterministic() {
        let spec = square(MotionKind::Translate, [1.0, 1.0], [2.0, 2.0]);
        let v = render_video(&spec).unwrap();
        let (s, perm) = shuffle_frames(&v, 3).unwrap();
        let (_, perm2) = shuffle_frames(&v, 3).unwrap();
        assert_eq!(perm, perm2);
        assert_ne!(perm, (0..8).collect::<Vec<_>>());
        let back = permute_frames(s.view(), &invert_permutation(&perm));
        assert_eq!(back, v.data);
        let one = Video::new(Array4::zeros((1, 4, 4, 3))).unwrap();
        assert!(shuffle_frames(&one, 0).is_err());
    }

    #[test]
    fn texture_pan_is_rigid() {
        let (v, f) = render_texture_pan(4, 8, 8, [2, -1], 5).unwrap();
        for k in 0..3 {
            for y in 1..7 {
                for x in 0..6 {
                    assert_eq!(v.data[[k + 1, y - 1, x + 2, 1]], v.data[[k, y, x, 1]]);
                }
            }
        }
        assert!(f.data.slice(s![.., .., .., 0]).iter().all(|&u| u == 2.0));
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let config = DatasetConfig {
            n_train: 0,
            n_holdout: 0,
            ..Default::default()
        };
        let m = build_dataset(&config, 0, dir.path(), false).unwrap();
        assert!(m.train.is_empty() && m.holdout.is_empty());
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(loaded.manifest, m);
        assert!(build_dataset(&config, 0, dir.path(), false).is_err());
        assert!(build_dataset(&config, 0, dir.path(), true).is_ok());
    }
}
