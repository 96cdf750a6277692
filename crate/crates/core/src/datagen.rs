//! Procedural class-incremental video streams.
//!
//! Each class is a (shape, trajectory, stripe frequency) combination rendered
//! as a bright textured sprite moving over a dark, slowly drifting background.
//! Every clip is rendered from its own random stream keyed by
//! `(seed, clip_id)`, so generation order does not matter.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::VideoClip;
use crate::error::{CramError, Result};
use crate::protocol::{Task, TaskStream};
use crate::rng::{self, Rng};
use crate::tensorcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Bar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Static,
    Right,
    Left,
    Down,
    Up,
}

impl Motion {
    fn direction(self) -> (f64, f64) {
        match self {
            Motion::Static => (0.0, 0.0),
            Motion::Right => (1.0, 0.0),
            Motion::Left => (-1.0, 0.0),
            Motion::Down => (0.0, 1.0),
            Motion::Up => (0.0, -1.0),
        }
    }
}

/// Appearance of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub shape: Shape,
    pub motion: Motion,
    /// Stripe period inside the sprite, in pixels.
    pub stripe_period: f64,
    /// Range of sprite intensity.
    pub brightness: (f64, f64),
}

const SHAPES: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Bar];
const MOTIONS: [Motion; 5] = [Motion::Static, Motion::Right, Motion::Left, Motion::Down, Motion::Up];

/// Fully bright colour of hue `h` (turns) and saturation `s`.
fn hue_to_rgb(h: f64, s: f64) -> [f64; 3] {
    let sector = h.rem_euclid(1.0) * 6.0;
    let f = sector.fract();
    let (lo, falling, rising) = (1.0 - s, 1.0 - s * f, 1.0 - s * (1.0 - f));
    match sector as usize {
        0 => [1.0, rising, lo],
        1 => [falling, 1.0, lo],
        2 => [lo, 1.0, rising],
        3 => [lo, falling, 1.0],
        4 => [rising, lo, 1.0],
        _ => [1.0, lo, falling],
    }
}

/// Consecutive class ids share a sprite colour in groups of this size, so
/// with the default split every task brings a new colour.
const PALETTE_GROUP: usize = 4;
const PALETTE_SATURATION: f64 = 0.7;

/// Sprite colour of a class. Hues step by the golden ratio of a turn.
fn class_palette(class: usize) -> [f64; 3] {
    hue_to_rgb((class / PALETTE_GROUP) as f64 * 0.382, PALETTE_SATURATION)
}

/// The 20 built-in class styles.
pub fn default_styles() -> Vec<ClassStyle> {
    let mut styles = Vec::new();
    for (si, &shape) in SHAPES.iter().enumerate() {
        for (mi, &motion) in MOTIONS.iter().enumerate() {
            styles.push(ClassStyle {
                shape,
                motion,
                stripe_period: if (si + mi) % 2 == 0 { 8.0 } else { 3.0 },
                brightness: (0.65, 1.0),
            });
        }
    }
    styles
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    /// Classes introduced by each task, in order; their sum is the class count.
    pub task_classes: Vec<usize>,
    pub clips_per_class_train: usize,
    pub clips_per_class_eval: usize,
    /// `[T, H, W]`
    pub clip: [usize; 3],
    /// Sprite half-size range in pixels.
    pub sprite_radius: (f64, f64),
    /// Sprite speed range in pixels per frame.
    pub speed: (f64, f64),
    /// Background base level range.
    pub background: (f64, f64),
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            task_classes: vec![4; 5],
            clips_per_class_train: 30,
            clips_per_class_eval: 10,
            clip: [8, 32, 32],
            sprite_radius: (5.0, 7.0),
            speed: (1.5, 2.5),
            background: (0.05, 0.2),
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn n_classes(&self) -> usize {
        self.task_classes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_classes.is_empty() || self.task_classes.contains(&0) {
            return Err(CramError::config("tasks", "every task needs at least one class"));
        }
        if self.n_classes() > default_styles().len() {
            return Err(CramError::config(
                "classes_per_task",
                format!("{} classes requested, {} styles available", self.n_classes(), default_styles().len()),
            ));
        }
        if self.clips_per_class_train == 0 || self.clips_per_class_eval == 0 {
            return Err(CramError::config("data", "clips per class must be positive"));
        }
        if self.clip.iter().any(|&d| d < 8) {
            return Err(CramError::config("clip_geometry", "clips must be at least 8 in every dimension"));
        }
        Ok(())
    }
}

/// Ids below this stride index clips within one class.
const CLASS_STRIDE: u64 = 1_000_000;

fn clip_id(class: usize, index: usize) -> u64 {
    class as u64 * CLASS_STRIDE + index as u64
}

/// Per-clip random draws that stay fixed along a long video.
struct ClipParams {
    radius: f64,
    x0: f64,
    y0: f64,
    speed: f64,
    tint: [f64; 3],
    intensity: f64,
    background: f64,
    bg_angle: f64,
    bg_wavelength: f64,
    bg_phase: f64,
    bg_drift: f64,
    stripe_phase: f64,
}

impl ClipParams {
    fn draw(rng: &mut Rng, spec: &StreamSpec, style: &ClassStyle, class: usize) -> Self {
        let [t, h, w] = spec.clip;
        let radius = rng.gen_range(spec.sprite_radius.0..spec.sprite_radius.1);
        let speed = if style.motion == Motion::Static {
            0.0
        } else {
            rng.gen_range(spec.speed.0..spec.speed.1)
        };
        let (dx, dy) = style.motion.direction();
        let travel = speed * (t - 1) as f64;
        let axis_range = |extent: usize, dir: f64| {
            let lo = radius + 1.0;
            let hi = extent as f64 - radius - 1.0;
            // Start far enough back that the sprite stays in frame when possible.
            let (lo, hi) = match dir.partial_cmp(&0.0) {
                Some(std::cmp::Ordering::Greater) => (lo, (hi - travel).max(lo)),
                Some(std::cmp::Ordering::Less) => ((lo + travel).min(hi), hi),
                _ => (lo, hi),
            };
            if hi > lo {
                (lo, hi)
            } else {
                (lo, lo + 1e-9)
            }
        };
        let (xl, xh) = axis_range(w, dx);
        let (yl, yh) = axis_range(h, dy);
        let x0 = rng.gen_range(xl..xh);
        let y0 = rng.gen_range(yl..yh);
        let intensity = rng.gen_range(style.brightness.0..style.brightness.1);
        let palette = class_palette(class);
        let tint = palette.map(|c| c * rng.gen_range(0.85..1.0));
        ClipParams {
            radius,
            x0,
            y0,
            speed,
            tint,
            intensity,
            background: rng.gen_range(spec.background.0..spec.background.1),
            bg_angle: rng.gen_range(0.0..2.0 * PI),
            bg_wavelength: rng.gen_range(16.0..32.0),
            bg_phase: rng.gen_range(0.0..2.0 * PI),
            bg_drift: rng.gen_range(-0.3..0.3),
            stripe_phase: rng.gen_range(0.0..style.stripe_period),
        }
    }
}

/// Reflect `p` into `[lo, hi]` (sprites bounce off the frame edge).
fn bounce(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (p - lo).rem_euclid(2.0 * span);
    lo + if m > span { 2.0 * span - m } else { m }
}

fn inside(shape: Shape, u: f64, v: f64, r: f64) -> bool {
    match shape {
        Shape::Square => u.abs() <= r && v.abs() <= r,
        Shape::Circle => u * u + v * v <= r * r,
        // Apex up, base at v = r.
        Shape::Triangle => v.abs() <= r && u.abs() <= (v + r) / 2.0,
        Shape::Bar => u.abs() <= 1.5 * r && v.abs() <= r / 2.0,
    }
}

/// Render frames `first_frame .. first_frame + T` of one sprite trajectory.
fn render(spec: &StreamSpec, style: &ClassStyle, p: &ClipParams, first_frame: usize) -> Result<Tensor> {
    let [t, h, w] = spec.clip;
    let (dx, dy) = style.motion.direction();
    let mut data = Vec::with_capacity(t * h * w * 3);
    let (ca, sa) = (p.bg_angle.cos(), p.bg_angle.sin());
    for f in first_frame..first_frame + t {
        let time = f as f64;
        let cx = bounce(p.x0 + dx * p.speed * time, p.radius + 1.0, w as f64 - p.radius - 1.0);
        let cy = bounce(p.y0 + dy * p.speed * time, p.radius + 1.0, h as f64 - p.radius - 1.0);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
                let wave = (2.0 * PI * (xf * ca + yf * sa) / p.bg_wavelength + p.bg_phase + p.bg_drift * time).sin();
                let bg = (p.background + 0.06 * wave).clamp(0.0, 1.0);
                let (u, v) = (xf - cx, yf - cy);
                if inside(style.shape, u, v, p.radius) {
                    let stripe = if ((u + p.stripe_phase) / style.stripe_period).rem_euclid(1.0) < 0.5 {
                        1.0
                    } else {
                        0.8
                    };
                    for c in 0..3 {
                        data.push((p.intensity * p.tint[c] * stripe).clamp(0.0, 1.0));
                    }
                } else {
                    data.extend([bg; 3]);
                }
            }
        }
    }
    Tensor::new(vec![t, h, w, 3], data)
}

fn render_clip(spec: &StreamSpec, styles: &[ClassStyle], class: usize, task: u32, index: usize) -> Result<VideoClip> {
    let id = clip_id(class, index);
    let mut rng = rng::stream(spec.seed, &format!("datagen/clip/{id}"));
    let params = ClipParams::draw(&mut rng, spec, &styles[class], class);
    VideoClip::new(render(spec, &styles[class], &params, 0)?, class as u32, id, task)
}

/// Seeded assignment of the built-in styles to class ids.
fn class_styles(spec: &StreamSpec) -> Vec<ClassStyle> {
    let mut styles = default_styles();
    styles.shuffle(&mut rng::stream(spec.seed, "datagen/styles"));
    styles.truncate(spec.n_classes());
    styles
}

/// Build a stream whose class `c` looks like `styles[c]`.
pub fn generate_with_styles(spec: &StreamSpec, styles: &[ClassStyle]) -> Result<TaskStream> {
    build(spec, styles, 1)
}

pub fn generate(spec: &StreamSpec) -> Result<TaskStream> {
    spec.validate()?;
    build(spec, &class_styles(spec), 1)
}

/// Like [`generate`], but each sample is a long video cut into
/// `segments_per_video` consecutive clips sharing a `video_id`. The sprite
/// keeps moving (bouncing off edges) and the background keeps drifting
/// across segments.
pub fn long_video_mode(spec: &StreamSpec, segments_per_video: usize) -> Result<TaskStream> {
    if segments_per_video == 0 {
        return Err(CramError::InvalidArgument("segments_per_video must be >= 1".into()));
    }
    spec.validate()?;
    build(spec, &class_styles(spec), segments_per_video)
}

fn build(spec: &StreamSpec, styles: &[ClassStyle], segments: usize) -> Result<TaskStream> {
    if styles.len() < spec.n_classes() {
        return Err(CramError::InvalidArgument(format!(
            "{} styles for {} classes",
            styles.len(),
            spec.n_classes()
        )));
    }
    let per_class = spec.clips_per_class_train + spec.clips_per_class_eval;
    let mut tasks = Vec::new();
    let mut next_class = 0usize;
    for (t, &count) in spec.task_classes.iter().enumerate() {
        let task_id = t as u32;
        let classes: Vec<usize> = (next_class..next_class + count).collect();
        next_class += count;
        let jobs: Vec<(usize, usize)> = classes
            .iter()
            .flat_map(|&c| (0..per_class).map(move |i| (c, i)))
            .collect();
        let videos = jobs
            .par_iter()
            .map(|&(class, index)| {
                if segments == 1 {
                    return Ok(vec![render_clip(spec, styles, class, task_id, index)?]);
                }
                let video_id = clip_id(class, index);
                let mut rng = rng::stream(spec.seed, &format!("datagen/clip/{video_id}"));
                let params = ClipParams::draw(&mut rng, spec, &styles[class], class);
                (0..segments)
                    .map(|s| {
                        let frames = render(spec, &styles[class], &params, s * spec.clip[0])?;
                        let id = video_id * segments as u64 + s as u64;
                        let mut clip = VideoClip::new(frames, class as u32, id, task_id)?;
                        clip.video_id = video_id;
                        Ok(clip)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for ((_, index), clips) in jobs.iter().zip(videos) {
            if *index < spec.clips_per_class_train {
                train.extend(clips);
            } else {
                eval.extend(clips);
            }
        }
        // Videos stay contiguous; shuffle whole videos within the task.
        let mut order: Vec<usize> = (0..train.len() / segments).collect();
        order.shuffle(&mut rng::stream(spec.seed, &format!("datagen/shuffle/{task_id}")));
        let mut chunks: Vec<Option<Vec<VideoClip>>> = train.chunks(segments).map(|c| Some(c.to_vec())).collect();
        let train = order.iter().flat_map(|&i| chunks[i].take().unwrap()).collect();
        tasks.push(Task {
            task_id,
            classes: classes.iter().map(|&c| c as u32).collect(),
            train,
            eval,
        });
    }
    let stream = TaskStream { tasks };
    stream.validate()?;
    Ok(stream)
}

/// Hand-crafted per-clip features used to calibrate class separability:
/// mean sprite velocity, fill ratio and aspect of the sprite's bounding box,
/// stripe contrast and sprite area.
pub fn probe_features(clip: &VideoClip) -> Vec<f64> {
    let [t, h, w] = clip.geometry();
    let data = clip.frames.data();
    let luma = |f: usize, y: usize, x: usize| {
        let i = ((f * h + y) * w + x) * 3;
        (data[i] + data[i + 1] + data[i + 2]) / 3.0
    };
    let mut centroids = Vec::with_capacity(t);
    let (mut fill, mut aspect, mut area_sum, mut stripes) = (0.0, 0.0, 0.0, 0.0);
    for f in 0..t {
        let (mut n, mut sx, mut sy) = (0.0, 0.0, 0.0);
        let (mut x0, mut x1, mut y0, mut y1) = (w, 0, h, 0);
        let mut edges = 0.0;
        for y in 0..h {
            for x in 0..w {
                if luma(f, y, x) > 0.45 {
                    n += 1.0;
                    sx += x as f64;
                    sy += y as f64;
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    if x + 1 < w && luma(f, y, x + 1) > 0.45 {
                        edges += (luma(f, y, x + 1) - luma(f, y, x)).abs();
                    }
                }
            }
        }
        if n > 0.0 {
            centroids.push((sx / n, sy / n));
            let bw = (x1 - x0 + 1) as f64;
            let bh = (y1 - y0 + 1) as f64;
            fill += n / (bw * bh);
            aspect += bw / bh;
            area_sum += n;
            stripes += edges / n;
        }
    }
    let frames = centroids.len().max(1) as f64;
    let (vx, vy) = match (centroids.first(), centroids.last()) {
        (Some(a), Some(b)) if centroids.len() > 1 => {
            let steps = (centroids.len() - 1) as f64;
            ((b.0 - a.0) / steps, (b.1 - a.1) / steps)
        }
        _ => (0.0, 0.0),
    };
    vec![
        vx,
        vy,
        vx.abs() + vy.abs(),
        fill / frames,
        aspect / frames,
        20.0 * stripes / frames,
        area_sum / frames / 100.0,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> StreamSpec {
        StreamSpec {
            task_classes: vec![2, 2],
            clips_per_class_train: 3,
            clips_per_class_eval: 2,
            seed: 11,
            ..StreamSpec::default()
        }
    }

    #[test]
    fn pixels_in_range_and_deterministic() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        for task in &a.tasks {
            for clip in task.train.iter().chain(&task.eval) {
                assert!(clip.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn classes_disjoint_and_clip_ids_split() {
        let s = generate(&small_spec()).unwrap();
        assert_eq!(s.tasks[0].classes, vec![0, 1]);
        assert_eq!(s.tasks[1].classes, vec![2, 3]);
        let train: Vec<u64> = s.tasks.iter().flat_map(|t| t.train.iter().map(|c| c.clip_id)).collect();
        let eval: Vec<u64> = s.tasks.iter().flat_map(|t| t.eval.iter().map(|c| c.clip_id)).collect();
        assert!(train.iter().all(|id| !eval.contains(id)));
        assert_eq!(train.len(), 12);
        assert_eq!(eval.len(), 8);
    }

    #[test]
    fn single_segment_long_mode_is_generate() {
        let spec = small_spec();
        assert_eq!(long_video_mode(&spec, 1).unwrap(), generate(&spec).unwrap());
        assert!(long_video_mode(&spec, 0).is_err());
    }

    #[test]
    fn long_videos_have_one_clip_per_segment() {
        let spec = small_spec();
        let s = long_video_mode(&spec, 4).unwrap();
        let task = &s.tasks[0];
        assert_eq!(task.train.len(), 2 * 3 * 4);
        for video in task.train.chunks(4) {
            assert!(video.iter().all(|c| c.video_id == video[0].video_id));
            let mut ids: Vec<u64> = video.iter().map(|c| c.clip_id).collect();
            ids.dedup();
            assert_eq!(ids.len(), 4);
        }
    }

    #[test]
    fn bounce_stays_in_range() {
        for i in 0..200 {
            let p = bounce(i as f64 * 0.7 - 30.0, 2.0, 9.0);
            assert!((2.0..=9.0).contains(&p));
        }
        assert_eq!(bounce(10.0, 2.0, 9.0), 8.0);
    }
}
