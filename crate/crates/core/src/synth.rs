//! Synthetic videos whose objects develop regions never seen before.
//!
//! Every object is a textured star polygon moving by whole pixels over a
//! textured background cluttered with unlabeled look-alike shapes, so its
//! pixels keep exact object-local coordinates from frame to frame. An emergence mode hides a part of the object (with
//! its own, different texture) and reveals it progressively from frame
//! `t_e` on. A pixel is flagged emergent when its object-local position was
//! not visible in any earlier frame.

use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmergenceMode {
    /// Objects stay fully visible.
    None,
    /// A sliding occluder uncovers one side of the object.
    Occlusion,
    /// The object enters the frame across the image border.
    Border,
    /// A limb grows out of the object.
    Articulation,
    /// Cycles through the three emergence modes by video index.
    Mixed,
}

impl EmergenceMode {
    pub fn name(self) -> &'static str {
        match self {
            EmergenceMode::None => "none",
            EmergenceMode::Occlusion => "occlusion",
            EmergenceMode::Border => "border",
            EmergenceMode::Articulation => "articulation",
            EmergenceMode::Mixed => "mixed",
        }
    }
}

impl FromStr for EmergenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => EmergenceMode::None,
            "occlusion" => EmergenceMode::Occlusion,
            "border" => EmergenceMode::Border,
            "articulation" => EmergenceMode::Articulation,
            "mixed" => EmergenceMode::Mixed,
            other => return Err(Error::Config(alloc::format!("unknown emergence mode '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    /// Square image side, 32 or 64.
    pub size: usize,
    /// 1 or 2 objects.
    pub objects: usize,
    pub mode: EmergenceMode,
    /// First frame of the reveal; drawn from `[2, frames/2]` when unset.
    pub reveal_frame: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 12,
            size: 32,
            objects: 1,
            mode: EmergenceMode::Mixed,
            reveal_frame: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.frames < 3 {
            return bad("videos need at least 3 frames");
        }
        if self.size != 32 && self.size != 64 {
            return bad("image size must be 32 or 64");
        }
        if !(1..=2).contains(&self.objects) {
            return bad("object count must be 1 or 2");
        }
        if let Some(t) = self.reveal_frame {
            if t == 0 || t >= self.frames {
                return bad("reveal frame must lie in [1, frames - 1]");
            }
        }
        Ok(())
    }

    /// The concrete mode of video `index` in a corpus.
    pub fn mode_for(&self, index: usize) -> EmergenceMode {
        match self.mode {
            EmergenceMode::Mixed => [EmergenceMode::Occlusion, EmergenceMode::Border, EmergenceMode::Articulation][index % 3],
            m => m,
        }
    }
}

/// One generated video. Frames are 8-bit RGB and labels hold the object id
/// (0 for background) of every pixel, exactly as persisted on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub seed: u64,
    pub config: SynthConfig,
    pub height: usize,
    pub width: usize,
    pub objects: usize,
    pub frames: Vec<Vec<u8>>,
    pub labels: Vec<Vec<u8>>,
    pub emergent: Vec<Vec<bool>>,
    /// Image position of each object's local origin, `[object][frame]`
    /// as `(x, y)`. Empty for videos loaded from disk.
    pub offsets: Vec<Vec<(i64, i64)>>,
    pub reveal_frame: usize,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame `t` as `H × W × 3` in `[0, 1]`.
    pub fn frame<T: Scalar>(&self, t: usize) -> Tensor<T> {
        rgb_tensor(&self.frames[t], self.height, self.width)
    }

    /// Binary mask of object `id` (1-based) in frame `t`.
    pub fn mask(&self, t: usize, id: usize) -> Vec<bool> {
        self.labels[t].iter().map(|&l| l as usize == id).collect()
    }

    pub fn mask_tensor<T: Scalar>(&self, t: usize, id: usize) -> Tensor<T> {
        let data = self.labels[t].iter().map(|&l| if l as usize == id { T::one() } else { T::zero() }).collect();
        Tensor::new(&[self.height, self.width, 1], data).expect("label map size")
    }

    /// Per frame, the foreground pixels whose object-local position was not
    /// visible in frame 0. Unlike [`VideoSample::emergent`], a revealed
    /// region stays flagged for the rest of the video, which is what a
    /// first-frame-only memory sees. `None` without object offsets.
    pub fn unseen_since_first(&self) -> Option<Vec<Vec<bool>>> {
        if self.offsets.len() != self.objects || self.is_empty() {
            return None;
        }
        let (h, w) = (self.height as i64, self.width as i64);
        let first = &self.labels[0];
        let out = self
            .labels
            .iter()
            .enumerate()
            .map(|(t, labels)| {
                labels
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| {
                        if l == 0 {
                            return false;
                        }
                        let (ox, oy) = self.offsets[l as usize - 1][t];
                        let (fx, fy) = self.offsets[l as usize - 1][0];
                        let (x, y) = (i as i64 % w - ox + fx, i as i64 / w - oy + fy);
                        !((0..w).contains(&x) && (0..h).contains(&y) && first[(y * w + x) as usize] == l)
                    })
                    .collect()
            })
            .collect();
        Some(out)
    }

    /// Whether the area unseen since frame 0 never shrinks and ends
    /// positive.
    pub fn is_monotone_emergence(&self) -> bool {
        let Some(unseen) = self.unseen_since_first() else {
            return false;
        };
        let area: Vec<usize> = unseen.iter().map(|u| u.iter().filter(|&&b| b).count()).collect();
        area.windows(2).all(|p| p[0] <= p[1]) && area.last().is_some_and(|&a| a > 0)
    }
}

/// `H × W × 3` tensor in `[0, 1]` from 8-bit RGB.
pub fn rgb_tensor<T: Scalar>(rgb: &[u8], h: usize, w: usize) -> Tensor<T> {
    let data = rgb.iter().map(|&v| T::from_f64(v as f64 / 255.0)).collect();
    Tensor::new(&[h, w, 3], data).expect("frame size")
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of video `index` in a corpus generated from `seed`.
pub fn video_seed(seed: u64, index: usize) -> u64 {
    splitmix(seed ^ splitmix(index as u64 + 1))
}

fn lattice(seed: u64, x: i64, y: i64) -> f64 {
    let h = splitmix(seed ^ (x as u64).wrapping_mul(0x8cb9_2ba7_2f3d_8dd7) ^ (y as u64).wrapping_mul(0xd6e8_feb8_6659_fd93));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in `[0, 1]` with the given cell size.
fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let (fx, fy) = (x / cell, y / cell);
    let (x0, y0) = (libm::floor(fx), libm::floor(fy));
    let (tx, ty) = (fx - x0, fy - y0);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(tx), s(ty));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let top = lattice(seed, ix, iy) * (1.0 - sx) + lattice(seed, ix + 1, iy) * sx;
    let bot = lattice(seed, ix, iy + 1) * (1.0 - sx) + lattice(seed, ix + 1, iy + 1) * sx;
    top * (1.0 - sy) + bot * sy
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h - libm::floor(h)) * 6.0;
    let i = libm::floor(h6) as usize % 6;
    let f = h6 - libm::floor(h6);
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, Copy)]
struct Texture {
    color: [f64; 3],
    seed: u64,
    cell: f64,
}

impl Texture {
    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let n = 0.65 * value_noise(self.seed, x, y, self.cell) + 0.35 * value_noise(self.seed ^ 1, x, y, self.cell / 2.0);
        let k = 0.55 + 0.7 * n;
        self.color.map(|c| c * k)
    }
}

/// How the hidden part of an object is defined and uncovered.
#[derive(Debug, Clone, Copy)]
enum Part {
    None,
    /// Pixels with `s·(x − c) > 0`.
    Side { s: i64, c: i64 },
    /// Axis-aligned limb along `dir`, attached at the origin.
    Limb { dir: (i64, i64), base: i64, half_width: i64 },
}

#[derive(Debug, Clone)]
struct Object {
    verts: Vec<(f64, f64)>,
    body: Texture,
    part_tex: Texture,
    part: Part,
    /// Pixels uncovered in total by the end of the reveal.
    reveal_total: i64,
    /// Local bounding box `(x0, y0, x1, y1)` (inclusive) of every pixel the
    /// object can occupy.
    bbox: (i64, i64, i64, i64),
}

fn point_in_poly(verts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = verts.len();
    for i in 0..n {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[(i + n - 1) % n];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

impl Object {
    fn in_body(&self, lx: i64, ly: i64) -> bool {
        point_in_poly(&self.verts, lx as f64, ly as f64)
    }

    /// Whether the local pixel belongs to the object once `r` pixels of the
    /// reveal have happened, and whether it is part of the hidden part.
    fn classify(&self, lx: i64, ly: i64, r: i64) -> Option<bool> {
        let body = self.in_body(lx, ly);
        match self.part {
            Part::None => body.then_some(false),
            Part::Side { s, c } => body.then_some(s * (lx - c) > 0),
            Part::Limb { dir, base, half_width } => {
                let along = dir.0 * lx + dir.1 * ly;
                let across = (dir.0 * ly - dir.1 * lx).abs();
                let limb = across <= half_width && along >= 0 && along < base + r;
                if body {
                    Some(false)
                } else {
                    limb.then_some(true)
                }
            }
        }
    }

    fn texture(&self, hidden: bool) -> &Texture {
        if hidden { &self.part_tex } else { &self.body }
    }
}

/// Number of unlabeled distractor shapes per video.
const DISTRACTORS: core::ops::RangeInclusive<usize> = 2..=3;

/// Frames over which a hidden part is uncovered. A short reveal keeps each
/// frame's newly uncovered strip several pixels wide, so it spans whole cells
/// of the stride-4 feature grid.
pub const REVEAL_FRAMES: usize = 3;

/// Cumulative reveal (in pixels) at each frame: zero before `t_e`, then a
/// non-decreasing per-frame increment of at least one pixel whose sum
/// reaches `total` within [`REVEAL_FRAMES`] frames (or by the last frame).
pub fn reveal_schedule(frames: usize, t_e: usize, total: i64) -> Vec<i64> {
    let mut out = vec![0i64; frames];
    if total <= 0 || t_e >= frames {
        return out;
    }
    let n = ((frames - t_e).min(REVEAL_FRAMES) as i64).min(total);
    let extra = total - n;
    let mut inc: Vec<i64> = (1..=n).map(|k| 1 + extra * (2 * k - 1) / (n * n)).collect();
    let sum: i64 = inc.iter().sum();
    *inc.last_mut().expect("n ≥ 1") += total - sum;
    let mut r = 0;
    for (t, slot) in out.iter_mut().enumerate().skip(t_e) {
        if let Some(d) = inc.get(t - t_e) {
            r += d;
        }
        *slot = r;
    }
    out
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    unit: f64,
}

impl Builder<'_> {
    fn texture(&mut self, hue: f64) -> Texture {
        let s = self.rng.random_range(0.65..1.0);
        let v = self.rng.random_range(0.7..1.0);
        Texture {
            color: hsv(hue, s, v),
            seed: self.rng.random(),
            cell: self.rng.random_range(2.5..4.5) * self.unit,
        }
    }

    fn object(&mut self, radius: f64, hue: f64, mode: EmergenceMode, side: i64) -> Object {
        let n = self.rng.random_range(5..=8);
        let mut angles: Vec<f64> = (0..n).map(|i| (i as f64 + self.rng.random_range(0.15..0.85)) / n as f64).collect();
        angles.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let tau = 2.0 * core::f64::consts::PI;
        let verts: Vec<(f64, f64)> = angles
            .iter()
            .map(|&a| {
                let r = radius * self.rng.random_range(0.75..1.0);
                (r * libm::cos(tau * a), r * libm::sin(tau * a))
            })
            .collect();
        let body = self.texture(hue);
        let shift = self.rng.random_range(0.33..0.67);
        let part_tex = self.texture(hue + shift);
        let ri = libm::ceil(radius) as i64;
        let u = self.unit as i64;
        let (part, reveal_total) = match mode {
            EmergenceMode::None | EmergenceMode::Mixed => (Part::None, 0),
            EmergenceMode::Occlusion | EmergenceMode::Border => {
                let c = -side * libm::round(radius * self.rng.random_range(0.0..0.3)) as i64;
                (Part::Side { s: side, c }, 0)
            }
            EmergenceMode::Articulation => {
                let dir = match self.rng.random_range(0..4) {
                    0 => (1, 0),
                    1 => (-1, 0),
                    2 => (0, 1),
                    _ => (0, -1),
                };
                let dir = if side != 0 { (side, 0) } else { dir };
                let base = libm::floor(0.4 * radius) as i64;
                (Part::Limb { dir, base, half_width: 2 * u }, ri - base + 3 * u)
            }
        };
        let mut obj = Object {
            verts,
            body,
            part_tex,
            part,
            reveal_total,
            bbox: (0, 0, 0, 0),
        };
        let full = ri + 4 * u + 1;
        let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        let mut hidden_extent = 0;
        for ly in -full..=full {
            for lx in -full..=full {
                if let Some(hidden) = obj.classify(lx, ly, reveal_total) {
                    x0 = x0.min(lx);
                    y0 = y0.min(ly);
                    x1 = x1.max(lx);
                    y1 = y1.max(ly);
                    if let (true, Part::Side { s, c }) = (hidden, obj.part) {
                        hidden_extent = hidden_extent.max(s * (lx - c));
                    }
                }
            }
        }
        if let Part::Side { .. } = obj.part {
            obj.reveal_total = hidden_extent;
        }
        obj.bbox = (x0, y0, x1, y1);
        obj
    }
}

/// One object's trajectory inside its horizontal band `[rx0, rx1)`.
fn trajectory(
    rng: &mut ChaCha8Rng,
    obj: &Object,
    mode: EmergenceMode,
    region: (i64, i64),
    size: i64,
    reveal: &[i64],
    unit: i64,
) -> Option<Vec<(i64, i64)>> {
    let (bx0, by0, bx1, by1) = obj.bbox;
    let (rx0, rx1) = region;
    let (ymin, ymax) = (-by0, size - 1 - by1);
    if ymin > ymax {
        return None;
    }
    let mut y = rng.random_range(ymin..=ymax);
    let mut vy = rng.random_range(-unit..=unit);
    let frames = reveal.len();
    let mut out = Vec::with_capacity(frames);
    if let (EmergenceMode::Border, Part::Side { s, c }) = (mode, obj.part) {
        // Hidden side starts exactly beyond the image edge.
        let start = if s < 0 { -c } else { size - 1 - c };
        if bx1 - bx0 >= region.1 - region.0 {
            return None;
        }
        for &r in reveal {
            out.push((start - s * r, y));
            let ny = y + vy;
            if ny < ymin || ny > ymax {
                vy = -vy;
            }
            y = (y + vy).clamp(ymin, ymax);
        }
        return Some(out);
    }
    let (xmin, xmax) = (rx0 - bx0, rx1 - 1 - bx1);
    if xmin > xmax {
        return None;
    }
    let mut x = rng.random_range(xmin..=xmax);
    let mut vx = rng.random_range(-unit..=unit);
    for _ in 0..frames {
        out.push((x, y));
        if x + vx < xmin || x + vx > xmax {
            vx = -vx;
        }
        if y + vy < ymin || y + vy > ymax {
            vy = -vy;
        }
        x = (x + vx).clamp(xmin, xmax);
        y = (y + vy).clamp(ymin, ymax);
    }
    Some(out)
}

/// Generates video `seed` under `cfg` with a concrete emergence `mode`.
pub fn gen_video_mode(seed: u64, cfg: &SynthConfig, mode: EmergenceMode) -> Result<VideoSample> {
    cfg.validate()?;
    let mode = if mode == EmergenceMode::Mixed { cfg.mode_for(seed as usize) } else { mode };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.size;
    let unit = (size / 32) as i64;
    let t_count = cfg.frames;
    let t_e = cfg.reveal_frame.unwrap_or_else(|| rng.random_range(2..=(t_count / 2).max(2)).min(t_count - 1));

    let bg = Texture {
        color: hsv(rng.random_range(0.0..1.0), rng.random_range(0.0..0.2), rng.random_range(0.35..0.55)),
        seed: rng.random(),
        cell: rng.random_range(3.0..6.0) * unit as f64,
    };
    let occluder_shade = rng.random_range(0.15..0.3);

    let regions: Vec<(i64, i64)> = if cfg.objects == 1 {
        vec![(0, size as i64)]
    } else {
        vec![(0, size as i64 / 2), (size as i64 / 2, size as i64)]
    };
    let mut objects = Vec::new();
    let mut paths = Vec::new();
    let mut reveals = Vec::new();
    let mut hues = Vec::new();
    for (i, &region) in regions.iter().enumerate() {
        let side = match (cfg.objects, mode) {
            (_, EmergenceMode::None) => 0,
            (2, _) => if i == 0 { -1 } else { 1 },
            (_, EmergenceMode::Articulation) => 0,
            _ => if rng.random::<bool>() { 1 } else { -1 },
        };
        let mut radius = if cfg.objects == 1 { rng.random_range(5.0..7.0) } else { rng.random_range(4.0..5.5) } * unit as f64;
        let hue = rng.random_range(0.0..1.0);
        hues.push(hue);
        let mut placed = None;
        for _ in 0..16 {
            let obj = Builder { rng: &mut rng, unit: unit as f64 }.object(radius, hue, mode, side);
            let reveal = reveal_schedule(t_count, t_e, obj.reveal_total);
            if let Some(path) = trajectory(&mut rng, &obj, mode, region, size as i64, &reveal, unit) {
                placed = Some((obj, path, reveal));
                break;
            }
            radius *= 0.85;
        }
        let (obj, path, reveal) = placed.ok_or_else(|| Error::Config("objects do not fit the image".into()))?;
        objects.push(obj);
        paths.push(path);
        reveals.push(reveal);
    }

    // Unlabeled clutter under the objects; every other one shares the first
    // object's hue, so colour alone does not single out the target.
    let mut distractors = Vec::new();
    for k in 0..rng.random_range(DISTRACTORS) {
        let hue = if k % 2 == 0 { hues[0] + rng.random_range(-0.04..0.04) } else { rng.random_range(0.0..1.0) };
        let radius = rng.random_range(3.0..5.5) * unit as f64;
        let obj = Builder { rng: &mut rng, unit: unit as f64 }.object(radius, hue, EmergenceMode::None, 0);
        if let Some(path) = trajectory(&mut rng, &obj, EmergenceMode::None, (0, size as i64), size as i64, &vec![0; t_count], unit) {
            distractors.push((obj, path));
        }
    }

    let (h, w) = (size, size);
    let mut sample = VideoSample {
        seed,
        config: SynthConfig { mode, ..cfg.clone() },
        height: h,
        width: w,
        objects: objects.len(),
        frames: Vec::with_capacity(t_count),
        labels: Vec::with_capacity(t_count),
        emergent: Vec::with_capacity(t_count),
        offsets: paths.clone(),
        reveal_frame: t_e,
    };
    // Object-local "already seen" sets, one flat bitmap per object over its bbox.
    let mut seen: Vec<Vec<bool>> = objects
        .iter()
        .map(|o| vec![false; ((o.bbox.2 - o.bbox.0 + 1) * (o.bbox.3 - o.bbox.1 + 1)) as usize])
        .collect();
    for t in 0..t_count {
        let mut rgb = vec![0.0f64; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                let c = bg.at(x as f64, y as f64);
                rgb[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
            }
        }
        for (obj, path) in &distractors {
            let (ox, oy) = path[t];
            let (bx0, by0, bx1, by1) = obj.bbox;
            for ly in by0..=by1 {
                for lx in bx0..=bx1 {
                    let (x, y) = ((lx + ox) as usize, (ly + oy) as usize);
                    if obj.classify(lx, ly, 0).is_some() {
                        let pix = y * w + x;
                        rgb[pix * 3..pix * 3 + 3].copy_from_slice(&obj.body.at(lx as f64, ly as f64));
                    }
                }
            }
        }
        let mut label = vec![0u8; h * w];
        let mut emergent = vec![false; h * w];
        let mut newly_seen: Vec<Vec<usize>> = vec![Vec::new(); objects.len()];
        for (i, obj) in objects.iter().enumerate() {
            let (ox, oy) = paths[i][t];
            let r = reveals[i][t];
            let (bx0, by0, bx1, by1) = obj.bbox;
            let bw = bx1 - bx0 + 1;
            let region = regions[i];
            // The occluder extends past the object's box while sliding away.
            let pad = if mode == EmergenceMode::Occlusion { obj.reveal_total + 3 } else { 0 };
            for ly in by0 - pad.min(1)..=by1 + pad.min(1) {
                for lx in bx0 - pad..=bx1 + pad {
                    let (x, y) = (lx + ox, ly + oy);
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    let pix = y as usize * w + x as usize;
                    let occluded = match (mode, obj.part) {
                        (EmergenceMode::Occlusion, Part::Side { s, c }) => {
                            let k = s * (lx - c) - r;
                            let covered = k > 0 && k <= obj.reveal_total + 2 && (by0 - 1..=by1 + 1).contains(&ly);
                            covered && (region.0..region.1).contains(&x)
                        }
                        _ => false,
                    };
                    if occluded {
                        let stripe = if ((lx + ly).rem_euclid(4 * unit)) < 2 * unit { 0.0 } else { 0.12 };
                        rgb[pix * 3..pix * 3 + 3].fill(occluder_shade + stripe);
                        continue;
                    }
                    let Some(hidden) = obj.classify(lx, ly, r) else { continue };
                    let c = obj.texture(hidden).at(lx as f64, ly as f64);
                    rgb[pix * 3..pix * 3 + 3].copy_from_slice(&c);
                    label[pix] = (i + 1) as u8;
                    let local = ((ly - by0) * bw + (lx - bx0)) as usize;
                    if t > 0 && !seen[i][local] {
                        emergent[pix] = true;
                    }
                    newly_seen[i].push(local);
                }
            }
        }
        for (s, idx) in seen.iter_mut().zip(newly_seen) {
            for k in idx {
                s[k] = true;
            }
        }
        let bytes = rgb.iter().map(|&v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8).collect();
        sample.frames.push(bytes);
        sample.labels.push(label);
        sample.emergent.push(emergent);
    }
    Ok(sample)
}

/// Generates video `seed` with the configured mode (`Mixed` picks a mode
/// from the seed).
pub fn gen_video(seed: u64, cfg: &SynthConfig) -> Result<VideoSample> {
    gen_video_mode(seed, cfg, cfg.mode)
}

/// Video `index` of a corpus: per-video seed and, for `Mixed`, a mode that
/// cycles with the index.
pub fn gen_corpus_video(seed: u64, index: usize, cfg: &SynthConfig) -> Result<VideoSample> {
    gen_video_mode(video_seed(seed, index), cfg, cfg.mode_for(index))
}

/// Maximum temporal gap between sampled training frames: rises linearly
/// from 1 to 25 over the first 5% of iterations, holds, then falls to 5 over
/// the last 25%.
pub fn max_gap(iteration: usize, total: usize) -> usize {
    let total = total.max(1);
    let it = iteration.min(total - 1) as f64;
    let rise = (total as f64 * 0.05).max(1.0);
    let fall_start = total as f64 * 0.75;
    let gap = if it < rise {
        1.0 + 24.0 * it / rise
    } else if it < fall_start {
        25.0
    } else {
        let span = (total as f64 - 1.0 - fall_start).max(1.0);
        25.0 - 20.0 * ((it - fall_start) / span).min(1.0)
    };
    libm::round(gap) as usize
}

/// Three increasing frame indices whose consecutive gaps are at most
/// `gap` (clamped so they fit in the video).
pub fn sample_frames(rng: &mut impl Rng, len: usize, gap: usize) -> Result<[usize; 3]> {
    if len < 3 {
        return Err(Error::Input(alloc::format!("training needs videos of ≥ 3 frames, got {len}")));
    }
    let g = gap.clamp(1, (len - 1) / 2);
    let g1 = rng.random_range(1..=g);
    let g2 = rng.random_range(1..=g);
    let t0 = rng.random_range(0..len - g1 - g2);
    Ok([t0, t0 + g1, t0 + g1 + g2])
}

/// Three frames and the masks of one object, ready for a training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingClip<T> {
    pub frames: [Tensor<T>; 3],
    pub masks: [Tensor<T>; 3],
    pub indices: [usize; 3],
    pub object: usize,
}

/// Random per-frame rotation (≤ 15°) and scale (`[0.9, 1.1]`) about the
/// image centre. Frames use bilinear sampling with edge clamping, masks use
/// nearest sampling with zero outside.
pub fn augment<T: Scalar>(rng: &mut impl Rng, frame: &Tensor<T>, mask: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let angle = rng.random_range(-15.0f64..=15.0).to_radians();
    let scale = rng.random_range(0.9..=1.1);
    warp(frame, mask, angle, scale)
}

fn warp<T: Scalar>(frame: &Tensor<T>, mask: &Tensor<T>, angle: f64, scale: f64) -> (Tensor<T>, Tensor<T>) {
    let (h, w, c) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sn, cs) = (libm::sin(angle), libm::cos(angle));
    let mut out_f = vec![T::zero(); h * w * c];
    let mut out_m = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            // Inverse map: output pixel → source position.
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = (cs * dx + sn * dy) / scale + cx;
            let sy = (-sn * dx + cs * dy) / scale + cy;
            let (nx, ny) = (libm::round(sx), libm::round(sy));
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                out_m[y * w + x] = mask.data()[ny as usize * w + nx as usize];
            }
            let fx = sx.clamp(0.0, w as f64 - 1.0);
            let fy = sy.clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (libm::floor(fx) as usize, libm::floor(fy) as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (T::from_f64(fx - x0 as f64), T::from_f64(fy - y0 as f64));
            for ch in 0..c {
                let at = |yy: usize, xx: usize| frame.data()[(yy * w + xx) * c + ch];
                let top = at(y0, x0) * (T::one() - ax) + at(y0, x1) * ax;
                let bot = at(y1, x0) * (T::one() - ax) + at(y1, x1) * ax;
                out_f[(y * w + x) * c + ch] = top * (T::one() - ay) + bot * ay;
            }
        }
    }
    (
        Tensor::new(&[h, w, c], out_f).expect("frame size"),
        Tensor::new(&[h, w, 1], out_m).expect("mask size"),
    )
}

/// Samples a clip for `iteration` of `total`: frame indices follow the gap
/// curriculum, the object is drawn among those present in the first frame.
pub fn sample_training_clip<T: Scalar>(
    video: &VideoSample,
    iteration: usize,
    total: usize,
    rng: &mut impl Rng,
    with_augment: bool,
) -> Result<TrainingClip<T>> {
    let indices = sample_frames(rng, video.len(), max_gap(iteration, total))?;
    let present: Vec<usize> = (1..=video.objects).filter(|&id| video.labels[indices[0]].iter().any(|&l| l as usize == id)).collect();
    let object = if present.is_empty() { 1 } else { present[rng.random_range(0..present.len())] };
    let mut frames = Vec::with_capacity(3);
    let mut masks = Vec::with_capacity(3);
    for &t in &indices {
        let (f, m) = (video.frame::<T>(t), video.mask_tensor::<T>(t, object));
        let (f, m) = if with_augment { augment(rng, &f, &m) } else { (f, m) };
        frames.push(f);
        masks.push(m);
    }
    let arr = |v: Vec<Tensor<T>>| -> [Tensor<T>; 3] { v.try_into().expect("three frames") };
    Ok(TrainingClip {
        frames: arr(frames),
        masks: arr(masks),
        indices,
        object,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: EmergenceMode) -> SynthConfig {
        SynthConfig {
            mode,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let c = cfg(EmergenceMode::Occlusion);
        assert_eq!(gen_video(7, &c).unwrap(), gen_video(7, &c).unwrap());
        assert_ne!(gen_video(7, &c).unwrap().frames, gen_video(8, &c).unwrap().frames);
    }

    #[test]
    fn no_emergence_without_mode() {
        for seed in 0..10 {
            for objects in [1, 2] {
                let v = gen_video(seed, &SynthConfig { objects, ..cfg(EmergenceMode::None) }).unwrap();
                assert!(v.emergent.iter().flatten().all(|&e| !e));
            }
        }
    }

    #[test]
    fn reveal_timing_t_e_3() {
        for seed in 0..20 {
            let c = SynthConfig {
                frames: 5,
                reveal_frame: Some(3),
                ..cfg(EmergenceMode::Occlusion)
            };
            let v = gen_video(seed, &c).unwrap();
            let counts: Vec<usize> = v.emergent.iter().map(|e| e.iter().filter(|&&b| b).count()).collect();
            assert_eq!(&counts[..3], &[0, 0, 0], "seed {seed}");
            assert!(counts[3] > 0, "seed {seed}");
        }
    }

    #[test]
    fn invariants_hold() {
        for mode in [EmergenceMode::Occlusion, EmergenceMode::Border, EmergenceMode::Articulation] {
            for objects in [1, 2] {
                for size in [32, 64] {
                    for seed in 0..6 {
                        let v = gen_video(seed, &SynthConfig { objects, size, ..cfg(mode) }).unwrap();
                        assert!(v.emergent[0].iter().all(|&e| !e));
                        for t in 0..v.len() {
                            for (e, &l) in v.emergent[t].iter().zip(&v.labels[t]) {
                                assert!(!*e || l != 0);
                            }
                            for id in 1..=objects {
                                assert!(v.mask(t, id).iter().any(|&m| m), "{mode:?} {seed} {t} {id}");
                            }
                        }
                        assert!(v.emergent.iter().flatten().any(|&e| e), "{mode:?} {objects} {size} {seed}");
                    }
                }
            }
        }
    }

    #[test]
    fn schedule_is_monotone_and_complete() {
        for total in 1..30 {
            for frames in 3..16 {
                for t_e in 1..frames {
                    let r = reveal_schedule(frames, t_e, total);
                    assert_eq!(r[t_e - 1], 0);
                    assert!(r[t_e] >= 1);
                    assert_eq!(*r.last().unwrap(), total);
                    let inc: Vec<i64> = r.windows(2).map(|w| w[1] - w[0]).collect();
                    let active = ((frames - t_e).min(REVEAL_FRAMES) as i64).min(total) as usize;
                    for k in t_e..t_e + active - 1 {
                        assert!(inc[k] >= inc[k - 1] || k == t_e, "{total} {frames} {t_e}");
                    }
                }
            }
        }
    }

    #[test]
    fn curriculum_examples() {
        assert_eq!(max_gap(0, 2000), 1);
        assert_eq!(max_gap(50, 2000), 13);
        assert_eq!(max_gap(1000, 2000), 25);
        assert_eq!(max_gap(1999, 2000), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let [a, b, c] = sample_frames(&mut rng, 12, 25).unwrap();
            assert!(a < b && b < c && c < 12);
        }
        assert!(sample_frames(&mut rng, 2, 1).is_err());
    }

    #[test]
    fn identity_warp_is_exact() {
        let v = gen_video(3, &cfg(EmergenceMode::Border)).unwrap();
        let (f, m) = (v.frame::<f64>(0), v.mask_tensor::<f64>(0, 1));
        let (f2, m2) = warp(&f, &m, 0.0, 1.0);
        assert!(f.max_abs_diff(&f2) < 1e-12);
        assert_eq!(m, m2);
    }
}
