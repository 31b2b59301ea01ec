//! Procedural moving-sprite sequences.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EdenError, Result};
use crate::frame::Frame;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    Linear,
    /// Linear drift plus a sinusoidal offset perpendicular to the velocity.
    Sinusoidal,
}

/// One sprite with an explicit trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sprite {
    pub shape: ShapeKind,
    /// Centre `(x, y)` in pixels at frame 0.
    pub center: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    /// Radius (disc), half-width (rectangle) or half-side (triangle) in pixels.
    pub size: f64,
    pub color: [f32; 3],
    pub trajectory: Trajectory,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_period")]
    pub period: f64,
    #[serde(default)]
    pub phase: f64,
}

fn default_period() -> f64 {
    12.0
}

impl Sprite {
    pub fn center_at(&self, frame: usize) -> [f64; 2] {
        let t = frame as f64;
        let [cx, cy] = self.center;
        let [vx, vy] = self.velocity;
        let mut p = [cx + vx * t, cy + vy * t];
        if self.trajectory == Trajectory::Sinusoidal {
            let speed = (vx * vx + vy * vy).sqrt();
            if speed > 0.0 {
                let (nx, ny) = (-vy / speed, vx / speed);
                let off = self.amplitude * (2.0 * PI * t / self.period + self.phase).sin();
                p[0] += nx * off;
                p[1] += ny * off;
            }
        }
        p
    }

    /// Signed distance from `(x, y)` to the sprite outline at `frame`.
    fn distance(&self, x: f64, y: f64, frame: usize) -> f64 {
        let [cx, cy] = self.center_at(frame);
        let (px, py) = (x - cx, y - cy);
        let r = self.size;
        match self.shape {
            ShapeKind::Disc => (px * px + py * py).sqrt() - r,
            ShapeKind::Rectangle => (px.abs() - r).max(py.abs() - 0.7 * r),
            ShapeKind::Triangle => {
                let k = 3f64.sqrt();
                let (mut qx, mut qy) = (px.abs() - r, -py + r / k);
                if qx + k * qy > 0.0 {
                    (qx, qy) = ((qx - k * qy) / 2.0, (-k * qx - qy) / 2.0);
                }
                qx -= qx.clamp(-2.0 * r, 0.0);
                -(qx * qx + qy * qy).sqrt() * qy.signum()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpriteSceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_sprites: usize,
    pub shapes: Vec<ShapeKind>,
    /// Speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    pub size_min: f64,
    pub size_max: f64,
    /// Trajectory kinds drawn uniformly per sprite.
    pub trajectories: Vec<Trajectory>,
    pub amplitude: f64,
    pub period: f64,
    pub seq_len: usize,
    /// Largest triplet interval the sequences must support.
    pub max_interval: usize,
    pub seed: u64,
    /// Explicit sprites; when set, the random sprite fields are ignored.
    pub sprites: Option<Vec<Sprite>>,
}

impl Default for SpriteSceneConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            num_sprites: 3,
            shapes: vec![ShapeKind::Disc, ShapeKind::Rectangle, ShapeKind::Triangle],
            speed_min: 0.5,
            speed_max: 2.5,
            size_min: 5.0,
            size_max: 10.0,
            trajectories: vec![Trajectory::Linear, Trajectory::Sinusoidal],
            amplitude: 3.0,
            period: 12.0,
            seq_len: 21,
            max_interval: 10,
            seed: 0,
            sprites: None,
        }
    }
}

impl SpriteSceneConfig {
    /// `prefix` is the config path of this section, used in error messages.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(EdenError::Config {
                path: format!("{prefix}.{field}"),
                message,
            })
        };
        if self.height == 0 || self.width == 0 {
            return bad("height", "canvas must be non-empty".into());
        }
        if self.max_interval == 0 {
            return bad("max_interval", "must be at least 1".into());
        }
        if self.seq_len < 2 * self.max_interval + 1 {
            return bad(
                "seq_len",
                format!(
                    "{} frames cannot hold a triplet with interval {} (need {})",
                    self.seq_len,
                    self.max_interval,
                    2 * self.max_interval + 1
                ),
            );
        }
        if self.sprites.is_none() {
            if self.shapes.is_empty() {
                return bad("shapes", "at least one shape is required".into());
            }
            if self.trajectories.is_empty() {
                return bad("trajectories", "at least one trajectory is required".into());
            }
            let limit = self.height.min(self.width) as f64 / 4.0;
            if !(0.0 <= self.speed_min
                && self.speed_min <= self.speed_max
                && self.speed_max <= limit)
            {
                return bad(
                    "speed_max",
                    format!("speeds must satisfy 0 <= min <= max <= {limit} px/frame"),
                );
            }
            if !(0.0 < self.size_min && self.size_min <= self.size_max) {
                return bad("size_min", "sizes must satisfy 0 < min <= max".into());
            }
            if self.period <= 0.0 {
                return bad("period", "must be positive".into());
            }
        }
        Ok(())
    }

    fn random_sprites(&self, rng: &mut impl Rng) -> Vec<Sprite> {
        let (h, w) = (self.height as f64, self.width as f64);
        let mid = (self.seq_len.saturating_sub(1)) as f64 / 2.0;
        (0..self.num_sprites)
            .map(|_| {
                let shape = self.shapes[rng.random_range(0..self.shapes.len())];
                let trajectory = self.trajectories[rng.random_range(0..self.trajectories.len())];
                let speed = if self.speed_max > self.speed_min {
                    rng.random_range(self.speed_min..self.speed_max)
                } else {
                    self.speed_min
                };
                let angle = rng.random_range(0.0..2.0 * PI);
                let velocity = [speed * angle.cos(), speed * angle.sin()];
                let size = if self.size_max > self.size_min {
                    rng.random_range(self.size_min..self.size_max)
                } else {
                    self.size_min
                };
                // centred in view at the middle of the sequence
                let mx = rng.random_range(0.25 * w..0.75 * w);
                let my = rng.random_range(0.25 * h..0.75 * h);
                let color = [
                    rng.random_range(0.1f32..1.0),
                    rng.random_range(0.1f32..1.0),
                    rng.random_range(0.1f32..1.0),
                ];
                Sprite {
                    shape,
                    center: [mx - velocity[0] * mid, my - velocity[1] * mid],
                    velocity,
                    size,
                    color,
                    trajectory,
                    amplitude: self.amplitude,
                    period: self.period,
                    phase: rng.random_range(0.0..2.0 * PI),
                }
            })
            .collect()
    }
}

/// Smooth two-colour gradient background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Background {
    pub top_left: [f32; 3],
    pub bottom_right: [f32; 3],
}

impl Background {
    fn random(rng: &mut impl Rng) -> Self {
        let mut c = || {
            [
                rng.random_range(0.05f32..0.6),
                rng.random_range(0.05f32..0.6),
                rng.random_range(0.05f32..0.6),
            ]
        };
        Self {
            top_left: c(),
            bottom_right: c(),
        }
    }

    fn at(&self, y: usize, x: usize, h: usize, w: usize, c: usize) -> f32 {
        let s = (y as f32 + x as f32) / ((h + w).saturating_sub(2).max(1) as f32);
        self.top_left[c] * (1.0 - s) + self.bottom_right[c] * s
    }
}

/// Renders frame `index` with 1-pixel anti-aliased sprite edges, painting
/// sprites in order over the background.
pub fn render_frame(
    sprites: &[Sprite],
    background: &Background,
    height: usize,
    width: usize,
    index: usize,
) -> Result<Frame> {
    let mut px = vec![0f32; height * width * 3];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                px[(y * width + x) * 3 + c] = background.at(y, x, height, width, c);
            }
        }
    }
    for s in sprites {
        let [cx, cy] = s.center_at(index);
        let reach = s.size * 1.5 + 2.0;
        let y0 = ((cy - reach).floor().max(0.0) as usize).min(height);
        let y1 = ((cy + reach).ceil().max(0.0) as usize).min(height);
        let x0 = ((cx - reach).floor().max(0.0) as usize).min(width);
        let x1 = ((cx + reach).ceil().max(0.0) as usize).min(width);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = s.distance(x as f64 + 0.5, y as f64 + 0.5, index);
                let cover = (0.5 - d).clamp(0.0, 1.0) as f32;
                if cover > 0.0 {
                    for c in 0..3 {
                        let p = &mut px[(y * width + x) * 3 + c];
                        *p = *p * (1.0 - cover) + s.color[c] * cover;
                    }
                }
            }
        }
    }
    Frame::new(height, width, px)
}

/// Deterministic `seq_len`-frame sequence for `cfg` (sprites and background
/// drawn from the config seed and `index`).
pub fn synth_sequence_indexed(cfg: &SpriteSceneConfig, index: u64) -> Result<Vec<Frame>> {
    cfg.validate("scene")?;
    let mut rng = seed::rng(cfg.seed, seed::DATA, &[index]);
    let background = Background::random(&mut rng);
    let sprites = match &cfg.sprites {
        Some(s) => s.clone(),
        None => cfg.random_sprites(&mut rng),
    };
    (0..cfg.seq_len)
        .map(|t| render_frame(&sprites, &background, cfg.height, cfg.width, t))
        .collect()
}

pub fn synth_sequence(cfg: &SpriteSceneConfig) -> Result<Vec<Frame>> {
    synth_sequence_indexed(cfg, 0)
}
