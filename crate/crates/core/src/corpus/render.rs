//! Stick-figure renderer with keypoint confidence maps.

use serde::{Deserialize, Serialize};

use super::spec::{Attributes, Bottoms, Color, PersonSpec, Sleeve};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::visual::{Keypoint, PersonImage, KEYPOINTS};

const BASE_W: f64 = 32.0;
const BASE_H: f64 = 96.0;
const SKIN: [f64; 3] = [0.92, 0.72, 0.58];
const BAG: [f64; 3] = [0.45, 0.30, 0.15];

/// Skeleton at 32×96 in keypoint order (x, y).
const SKELETON: [(f64, f64); KEYPOINTS] = [
    (10.0, 22.0),
    (8.0, 36.0),
    (7.0, 48.0),
    (22.0, 22.0),
    (24.0, 36.0),
    (25.0, 48.0),
    (12.5, 52.0),
    (12.0, 70.0),
    (12.0, 87.0),
    (19.5, 52.0),
    (20.0, 70.0),
    (20.0, 87.0),
    (16.0, 5.0),
    (16.0, 18.0),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub occlusion_prob: f64,
    pub distractors: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { height: 96, width: 32, occlusion_prob: 0.2, distractors: 2 }
    }
}

impl RenderConfig {
    /// Blob width: 2 px at height 96, proportional to height.
    pub fn sigma(&self) -> f64 {
        2.0 * self.height as f64 / BASE_H
    }
}

/// Rows `[start, end)` hidden behind a horizontal bar.
pub type Occlusion = Option<(usize, usize)>;

struct Canvas {
    h: usize,
    w: usize,
    sx: f64,
    sy: f64,
    rgb: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self { h, w, sx: w as f64 / BASE_W, sy: h as f64 / BASE_H, rgb: vec![[0.0; 3]; h * w] }
    }

    /// Paints every pixel whose base-frame center satisfies `inside`, within a bounding box.
    fn paint(&mut self, bbox: (f64, f64, f64, f64), color: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
        let (x0, y0, x1, y1) = bbox;
        let c0 = ((x0 * self.sx).floor().max(0.0)) as usize;
        let r0 = ((y0 * self.sy).floor().max(0.0)) as usize;
        let c1 = ((x1 * self.sx).ceil().max(0.0) as usize).min(self.w);
        let r1 = ((y1 * self.sy).ceil().max(0.0) as usize).min(self.h);
        for r in r0..r1 {
            for c in c0..c1 {
                let (x, y) = ((c as f64 + 0.5) / self.sx, (r as f64 + 0.5) / self.sy);
                if inside(x, y) {
                    self.rgb[r * self.w + c] = color;
                }
            }
        }
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [f64; 3]) {
        self.paint((x0, y0, x1, y1), color, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1);
    }

    fn disc(&mut self, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
        self.paint((cx - r, cy - r, cx + r, cy + r), color, |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r);
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), r: f64, color: [f64; 3]) {
        let bbox = (a.0.min(b.0) - r, a.1.min(b.1) - r, a.0.max(b.0) + r, a.1.max(b.1) + r);
        self.paint(bbox, color, |x, y| segment_dist2((x, y), a, b) <= r * r);
    }

    /// Convex polygon with vertices in either winding order.
    fn polygon(&mut self, pts: &[(f64, f64)], color: [f64; 3]) {
        let xs = pts.iter().map(|p| p.0);
        let ys = pts.iter().map(|p| p.1);
        let bbox = (
            xs.clone().fold(f64::MAX, f64::min),
            ys.clone().fold(f64::MAX, f64::min),
            xs.fold(f64::MIN, f64::max),
            ys.fold(f64::MIN, f64::max),
        );
        self.paint(bbox, color, |x, y| {
            let signs: Vec<f64> = (0..pts.len())
                .map(|i| {
                    let (p, q) = (pts[i], pts[(i + 1) % pts.len()]);
                    (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0)
                })
                .collect();
            signs.iter().all(|&s| s >= 0.0) || signs.iter().all(|&s| s <= 0.0)
        });
    }
}

fn segment_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    (p.0 - qx).powi(2) + (p.1 - qy).powi(2)
}

fn jittered_skeleton(rng: &mut Rng) -> [(f64, f64); KEYPOINTS] {
    let (dx, dy) = (rng.range(-3.0, 3.0), rng.range(-3.0, 3.0));
    let scale = rng.range(0.92, 1.05);
    let mut pts = SKELETON;
    for (k, p) in pts.iter_mut().enumerate() {
        let (jx, jy) = match k {
            1 | 2 | 4 | 5 => (rng.range(-2.0, 2.0), rng.range(-2.0, 2.0)),
            7 | 8 | 10 | 11 => (rng.range(-1.5, 1.5), rng.range(-1.0, 1.0)),
            _ => (rng.range(-0.5, 0.5), rng.range(-0.5, 0.5)),
        };
        p.0 = 16.0 + (p.0 - 16.0) * scale + dx + jx;
        p.1 = 48.0 + (p.1 - 48.0) * scale + dy + jy;
    }
    pts
}

fn draw_person(cv: &mut Canvas, a: &Attributes, k: &[(f64, f64); KEYPOINTS]) {
    let shirt = a.shirt.rgb();
    let bottoms = a.bottoms_color.rgb();
    let mid = |i: usize, j: usize| ((k[i].0 + k[j].0) / 2.0, (k[i].1 + k[j].1) / 2.0);
    // Legs, then bottoms over them.
    let leg_lower = if a.bottoms == Bottoms::Pants { bottoms } else { SKIN };
    let leg_upper = if a.bottoms == Bottoms::Skirt { SKIN } else { bottoms };
    for (hip, knee, ankle) in [(6, 7, 8), (9, 10, 11)] {
        cv.segment(k[knee], k[ankle], 1.9, leg_lower);
        cv.segment(k[hip], k[knee], 2.1, leg_upper);
    }
    cv.segment(k[6], k[9], 2.2, bottoms);
    if a.bottoms == Bottoms::Skirt {
        let knee_y = (k[7].1 + k[10].1) / 2.0 - 4.0;
        cv.polygon(
            &[(k[6].0 - 1.5, k[6].1 - 1.0), (k[9].0 + 1.5, k[9].1 - 1.0), (k[10].0 + 3.0, knee_y), (k[7].0 - 3.0, knee_y)],
            bottoms,
        );
    }
    let shoes = a.shoes.rgb();
    for ankle in [8, 11] {
        cv.rect(k[ankle].0 - 2.5, k[ankle].1 - 1.0, k[ankle].0 + 2.5, k[ankle].1 + 3.0, shoes);
    }
    // Torso and arms.
    cv.polygon(&[(k[0].0, k[0].1 - 1.0), (k[3].0, k[3].1 - 1.0), (k[9].0 + 0.5, k[9].1), (k[6].0 - 0.5, k[6].1)], shirt);
    cv.segment(k[0], k[3], 1.8, shirt);
    let forearm = if a.sleeve == Sleeve::Long { shirt } else { SKIN };
    for (sh, el, wr) in [(0, 1, 2), (3, 4, 5)] {
        cv.segment(k[sh], k[el], 1.7, shirt);
        cv.segment(k[el], k[wr], 1.4, forearm);
        cv.disc(k[wr].0, k[wr].1 + 0.5, 1.5, SKIN);
    }
    if a.bag {
        let (x, y) = (k[9].0 + 4.5, k[9].1);
        cv.segment(k[3], (x, y - 8.0), 0.6, BAG);
        cv.rect(x - 2.5, y - 8.0, x + 3.0, y + 3.0, BAG);
    }
    // Head and hat.
    let (hx, hy) = mid(12, 13);
    let r = (k[13].1 - k[12].1) / 2.0 + 0.3;
    cv.segment(k[13], (k[13].0, k[13].1 + 3.0), 1.3, SKIN);
    cv.disc(hx, hy, r, SKIN);
    if let Some(h) = a.hat {
        let c = h.rgb();
        let cut = hy - 0.8;
        cv.paint((hx - r, hy - r - 0.5, hx + r, cut), c, |x, y| (x - hx).powi(2) + (y - hy).powi(2) <= (r + 0.5).powi(2) && y < cut);
        cv.segment((hx - r - 1.5, cut), (hx + r + 1.5, cut), 0.8, c);
    }
}

/// Gaussian blobs at visible keypoints; rows inside `occlusion` are zero.
pub fn confidence_maps(keypoints: &[Keypoint], occlusion: Occlusion, h: usize, w: usize, sigma: f64) -> Tensor {
    let mut out = vec![0.0; KEYPOINTS * h * w];
    let reach = (3.0 * sigma).ceil() as isize;
    for (k, kp) in keypoints.iter().enumerate().take(KEYPOINTS) {
        if !kp.visible {
            continue;
        }
        let (kx, ky) = (kp.x as isize, kp.y as isize);
        for r in (ky - reach).max(0)..(ky + reach + 1).min(h as isize) {
            if occlusion.is_some_and(|(a, b)| (r as usize) >= a && (r as usize) < b) {
                continue;
            }
            for c in (kx - reach).max(0)..(kx + reach + 1).min(w as isize) {
                let d2 = ((c - kx).pow(2) + (r - ky).pow(2)) as f64;
                out[(k * h + r as usize) * w + c as usize] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    Tensor::from_parts(vec![KEYPOINTS, h, w], out)
}

/// Renders one image of `spec`; all randomness comes from `rng`.
pub fn render(spec: &PersonSpec, rng: &mut Rng, cfg: &RenderConfig) -> (PersonImage, Occlusion) {
    let (h, w) = (cfg.height, cfg.width);
    let mut cv = Canvas::new(h, w);
    let g = rng.range(0.35, 0.65);
    let tint = [rng.range(-0.05, 0.05), rng.range(-0.05, 0.05), rng.range(-0.05, 0.05)];
    let slope = rng.range(-0.1, 0.1);
    for r in 0..h {
        let v = g + slope * (r as f64 / h as f64 - 0.5);
        for c in 0..w {
            cv.rgb[r * w + c] = [v + tint[0], v + tint[1], v + tint[2]];
        }
    }
    for _ in 0..cfg.distractors {
        let size = rng.range(3.0, 6.0);
        let (x, y) = (rng.range(0.0, BASE_W - size), rng.range(0.0, BASE_H - size));
        let color = Color::ALL[rng.below(Color::ALL.len())].rgb();
        cv.rect(x, y, x + size, y + size, color);
    }
    let pts = jittered_skeleton(rng);
    draw_person(&mut cv, &spec.attributes, &pts);

    let occlusion = if rng.bernoulli(cfg.occlusion_prob) {
        let bar = rng.range(10.0, 16.0);
        let top = rng.range(20.0, BASE_H - bar);
        let shade = rng.range(0.3, 0.7);
        cv.rect(-1.0, top, BASE_W + 1.0, top + bar, [shade; 3]);
        let a = ((top * cv.sy).floor().max(0.0)) as usize;
        let b = (((top + bar) * cv.sy).ceil() as usize).min(h);
        Some((a, b))
    } else {
        None
    };

    let keypoints: Vec<Keypoint> = pts
        .iter()
        .map(|&(x, y)| {
            let px = (x * cv.sx).floor().clamp(0.0, (w - 1) as f64);
            let py = (y * cv.sy).floor().clamp(0.0, (h - 1) as f64);
            let hidden = occlusion.is_some_and(|(a, b)| (py as usize) >= a && (py as usize) < b);
            Keypoint { x: px, y: py, visible: !hidden }
        })
        .collect();

    let brightness = rng.range(0.85, 1.15);
    let mut pixels = vec![0.0; 3 * h * w];
    for (i, px) in cv.rgb.iter().enumerate() {
        for ch in 0..3 {
            let v = px[ch] * brightness + rng.range(-0.03, 0.03);
            pixels[ch * h * w + i] = v.clamp(0.0, 1.0);
        }
    }
    let confidence = confidence_maps(&keypoints, occlusion, h, w, cfg.sigma());
    let image = PersonImage {
        pixels: Tensor::from_parts(vec![3, h, w], pixels),
        confidence,
        identity: spec.identity,
        keypoints,
    };
    (image, occlusion)
}
