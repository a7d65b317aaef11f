//! Deterministic synthetic scene-text rendering.
//!
//! Words are drawn from the font glyph by glyph. A word follows either a
//! straight baseline or a circular arc; each glyph is rigidly rotated to the
//! local arc tangent. Instances never overlap: a candidate placement is
//! rejected when its padded bounding box touches an earlier one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::font::{glyph_width, render_glyph, Bitmap};
use super::{Image, SceneSample, TextInstanceGt, ALPHABET};
use crate::error::{Error, Result};
use crate::evalkit::geometry::{bounds, is_simple, polygon_iou, Point};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of attempted instances per image.
    pub instances: (usize, usize),
    /// Inclusive range of glyph heights in pixels.
    pub glyph_height: (usize, usize),
    /// Inclusive range of word lengths.
    pub word_length: (usize, usize),
    /// Baseline rotation range in degrees.
    pub rotation_deg: (f64, f64),
    /// Range of arc curvature (inverse radius, per pixel); 0 is straight.
    pub curvature: (f64, f64),
    /// Probability that a word is curved, when the curvature range allows it.
    pub curved_fraction: f64,
    /// Clutter shapes per image.
    pub clutter: (usize, usize),
    /// Placement attempts per instance before it is dropped.
    pub max_retries: usize,
    /// Minimum gap in pixels between instance bounding boxes.
    pub spacing: f64,
    /// Minimum luminance difference between text and background.
    pub min_contrast: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            instances: (1, 3),
            glyph_height: (12, 20),
            word_length: (2, 5),
            rotation_deg: (-20.0, 20.0),
            curvature: (-1.0 / 90.0, 1.0 / 90.0),
            curved_fraction: 0.3,
            clutter: (0, 3),
            max_retries: 40,
            spacing: 3.0,
            min_contrast: 0.4,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.width == 0 || self.height == 0 || self.width % 32 != 0 || self.height % 32 != 0 {
            return bad("image size must be a positive multiple of 32");
        }
        if self.instances.0 > self.instances.1 || self.word_length.0 > self.word_length.1 || self.glyph_height.0 > self.glyph_height.1 {
            return bad("inverted range");
        }
        if self.glyph_height.0 < 7 || self.word_length.0 == 0 {
            return bad("glyph height must be >= 7 and words non-empty");
        }
        if self.rotation_deg.0 > self.rotation_deg.1 || self.curvature.0 > self.curvature.1 || self.clutter.0 > self.clutter.1 {
            return bad("inverted range");
        }
        if !(0.0..=1.0).contains(&self.curved_fraction) || !(0.0..=1.0).contains(&self.min_contrast) {
            return bad("fractions must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Geometry of one word along its baseline.
struct Layout {
    origin: Point,
    tangent: Point,
    up: Point,
    curvature: f64,
    length: f64,
    glyph_h: f64,
}

impl Layout {
    /// Centre-line point, tangent and up-normal at arc length `u` from the middle.
    fn frame(&self, u: f64) -> (Point, Point, Point) {
        let (t, n) = (self.tangent, self.up);
        if self.curvature.abs() < 1e-12 {
            return ([self.origin[0] + t[0] * u, self.origin[1] + t[1] * u], t, n);
        }
        let k = self.curvature;
        let phi = u * k;
        let (s, c) = phi.sin_cos();
        let along = s / k;
        let across = (1.0 - c) / k;
        let p = [
            self.origin[0] + t[0] * along + n[0] * across,
            self.origin[1] + t[1] * along + n[1] * across,
        ];
        let tt = [t[0] * c + n[0] * s, t[1] * c + n[1] * s];
        let nn = [n[0] * c - t[0] * s, n[1] * c - t[1] * s];
        (p, tt, nn)
    }

    /// Enclosing polygon with `margin` pixels of padding; 4 corners when
    /// straight, sampled top and bottom arcs otherwise.
    fn polygon(&self, margin: f64) -> Vec<Point> {
        let half = self.length / 2.0 + margin;
        let off = self.glyph_h / 2.0 + margin;
        let steps = if self.curvature.abs() < 1e-12 { 1 } else { 7 };
        let offset = |u: f64, d: f64| {
            let (p, _, n) = self.frame(u);
            [p[0] + n[0] * d, p[1] + n[1] * d]
        };
        let mut poly = Vec::with_capacity(2 * (steps + 1));
        for i in 0..=steps {
            poly.push(offset(-half + 2.0 * half * i as f64 / steps as f64, off));
        }
        for i in (0..=steps).rev() {
            poly.push(offset(-half + 2.0 * half * i as f64 / steps as f64, -off));
        }
        poly
    }
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]
}

fn draw_clutter(img: &mut Image, rng: &mut ChaCha8Rng) {
    let (w, h) = (img.width as f64, img.height as f64);
    let color = random_color(rng);
    let alpha = rng.random_range(0.3..0.7);
    let kind = rng.random_range(0..3);
    let cx = rng.random_range(0.0..w);
    let cy = rng.random_range(0.0..h);
    let size = rng.random_range(4.0..w / 4.0);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (sa, ca) = angle.sin_cos();
    for y in 0..img.height {
        for x in 0..img.width {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let hit = match kind {
                0 => dx * dx + dy * dy <= size * size / 4.0,
                1 => dx.abs() <= size / 2.0 && dy.abs() <= size / 3.0,
                _ => (dx * sa - dy * ca).abs() <= 1.0 && (dx * ca + dy * sa).abs() <= size,
            };
            if hit {
                let p = img.pixel(x, y);
                img.set(x, y, std::array::from_fn(|i| p[i] * (1.0 - alpha) + color[i] * alpha));
            }
        }
    }
}

fn draw_word(img: &mut Image, layout: &Layout, glyphs: &[Bitmap], gap: f64, color: [f64; 3]) {
    let gw = glyphs[0].width as f64;
    let gh = glyphs[0].height as f64;
    let radius = (gw * gw + gh * gh).sqrt() / 2.0 + 1.0;
    for (k, g) in glyphs.iter().enumerate() {
        let u = -layout.length / 2.0 + k as f64 * (gw + gap) + gw / 2.0;
        let (c, t, n) = layout.frame(u);
        let x0 = (c[0] - radius).floor().max(0.0) as usize;
        let x1 = ((c[0] + radius).ceil() as usize).min(img.width);
        let y0 = (c[1] - radius).floor().max(0.0) as usize;
        let y1 = ((c[1] + radius).ceil() as usize).min(img.height);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = [x as f64 + 0.5 - c[0], y as f64 + 0.5 - c[1]];
                let along = d[0] * t[0] + d[1] * t[1];
                let above = d[0] * n[0] + d[1] * n[1];
                let col = (along + gw / 2.0).floor();
                let row = (gh / 2.0 - above).floor();
                if col >= 0.0 && row >= 0.0 && col < gw && row < gh && g.get(row as usize, col as usize) {
                    img.set(x, y, color);
                }
            }
        }
    }
}

fn random_word(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> String {
    let len = rng.random_range(cfg.word_length.0..=cfg.word_length.1);
    let symbols: Vec<char> = ALPHABET.chars().collect();
    (0..len).map(|_| symbols[rng.random_range(0..symbols.len())]).collect()
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Renders one sample; a pure function of `(cfg, seed)`.
pub fn synthesize_sample(cfg: &GenConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);

    let base = random_color(&mut rng);
    let tint = random_color(&mut rng);
    let mut img = Image::filled(cfg.width, cfg.height, base);
    for y in 0..cfg.height {
        let t = y as f64 / h * 0.3;
        for x in 0..cfg.width {
            img.set(x, y, std::array::from_fn(|i| base[i] * (1.0 - t) + tint[i] * t));
        }
    }
    let clutter = rng.random_range(cfg.clutter.0..=cfg.clutter.1);
    for _ in 0..clutter {
        draw_clutter(&mut img, &mut rng);
    }
    let bg_lum = luminance(base) * 0.85 + luminance(tint) * 0.15;

    let mut instances: Vec<TextInstanceGt> = Vec::new();
    let mut boxes: Vec<[f64; 4]> = Vec::new();
    let wanted = rng.random_range(cfg.instances.0..=cfg.instances.1);
    for _ in 0..wanted {
        for _attempt in 0..cfg.max_retries {
            let word = random_word(&mut rng, cfg);
            let gh = rng.random_range(cfg.glyph_height.0..=cfg.glyph_height.1);
            let gw = glyph_width(gh) as f64;
            let gap = (gh as f64 / 7.0).round().max(1.0);
            let n = word.chars().count() as f64;
            let length = n * gw + (n - 1.0) * gap;
            let theta = sample_range(&mut rng, cfg.rotation_deg).to_radians();
            let curved = rng.random::<f64>() < cfg.curved_fraction;
            let curvature = if curved { sample_range(&mut rng, cfg.curvature) } else { 0.0 };
            let origin = [rng.random_range(0.0..w), rng.random_range(0.0..h)];
            let (s, c) = theta.sin_cos();
            let layout = Layout {
                origin,
                tangent: [c, s],
                up: [s, -c],
                curvature,
                length,
                glyph_h: gh as f64,
            };
            let polygon = layout.polygon(1.0);
            if polygon.iter().any(|&[x, y]| x < 0.0 || y < 0.0 || x > w || y > h) || !is_simple(&polygon) {
                continue;
            }
            let b = bounds(&polygon);
            let pad = cfg.spacing;
            let clash = boxes.iter().zip(&instances).any(|(o, inst)| {
                let separated = b[0] - pad >= o[2] || o[0] >= b[2] + pad || b[1] - pad >= o[3] || o[1] >= b[3] + pad;
                !separated || polygon_iou(&polygon, &inst.polygon) >= 0.05
            });
            if clash {
                continue;
            }
            let mut color = random_color(&mut rng);
            for _ in 0..20 {
                if (luminance(color) - bg_lum).abs() >= cfg.min_contrast {
                    break;
                }
                color = random_color(&mut rng);
            }
            if (luminance(color) - bg_lum).abs() < cfg.min_contrast {
                color = if bg_lum > 0.5 { [0.0; 3] } else { [1.0; 3] };
            }
            let glyphs: Vec<Bitmap> = word.chars().map(|ch| render_glyph(ch, gh)).collect::<Result<_>>()?;
            draw_word(&mut img, &layout, &glyphs, gap, color);
            boxes.push(b);
            instances.push(TextInstanceGt {
                polygon,
                transcription: word,
                legible: true,
            });
            break;
        }
    }
    img.quantize();
    Ok(SceneSample {
        image: img,
        instances,
        sample_id: format!("synth_{seed:08}"),
    })
}

/// `count` samples with seeds `seed, seed + 1, ...`.
pub fn synthesize_dataset(cfg: &GenConfig, seed: u64, count: usize) -> Result<Vec<SceneSample>> {
    (0..count as u64).map(|i| synthesize_sample(cfg, seed.wrapping_add(i))).collect()
}
