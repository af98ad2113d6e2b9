//! Shadow triplets: procedural synthesis, ISTD-layout loading, augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use cnsnet_tensor::init::seeded_rng;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::mask::HardMask;

/// Aligned shadow image, hard mask and shadow-free ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTriplet {
    pub id: String,
    pub shadow: RgbImage,
    pub mask: HardMask,
    pub free: RgbImage,
}

impl ImageTriplet {
    pub fn new(id: impl Into<String>, shadow: RgbImage, mask: HardMask, free: RgbImage) -> Result<Self> {
        let id = id.into();
        if !shadow.same_size(&free) || (mask.height, mask.width) != (shadow.height, shadow.width) {
            return Err(Error::Data(format!("triplet {id}: components differ in size")));
        }
        Ok(ImageTriplet { id, shadow, mask, free })
    }

    pub fn height(&self) -> usize {
        self.shadow.height
    }

    pub fn width(&self) -> usize {
        self.shadow.width
    }
}

/// Indexed collection of triplets that may be loaded lazily.
pub trait TripletSource {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Result<ImageTriplet>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TripletSource for Vec<ImageTriplet> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, i: usize) -> Result<ImageTriplet> {
        Ok(self[i].clone())
    }
}

/// Parameters of the procedural shadow generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub size: usize,
    /// Inclusive range of coloured scene shapes.
    pub scene_shapes: (usize, usize),
    /// Inclusive range of shapes whose union forms the shadow.
    pub shadow_shapes: (usize, usize),
    /// Per-channel multiplicative attenuation range, within `(0, 1]`.
    pub attenuation: (f32, f32),
    /// Penumbra blur radius range in pixels.
    pub blur: (f32, f32),
    /// Amplitude of uniform texture noise.
    pub noise: f32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 64,
            scene_shapes: (2, 6),
            shadow_shapes: (1, 2),
            attenuation: (0.2, 0.6),
            blur: (0.0, 3.0),
            noise: 0.03,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.attenuation;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Config(format!("attenuation range ({a0}, {a1}) must lie in (0, 1]")));
        }
        if !(self.blur.0 >= 0.0 && self.blur.0 <= self.blur.1) {
            return Err(Error::Config(format!("invalid blur range {:?}", self.blur)));
        }
        if self.size < 8 || self.scene_shapes.0 > self.scene_shapes.1 || self.shadow_shapes.0 > self.shadow_shapes.1 {
            return Err(Error::Config("invalid synthetic image size or shape counts".into()));
        }
        Ok(())
    }
}

/// A filled region: ellipse or convex polygon (vertices on a rotated
/// ellipse at sorted angles, hence convex).
enum Shape {
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32, rot: f32 },
    Polygon(Vec<(f32, f32)>),
}

impl Shape {
    fn random(rng: &mut impl Rng, size: f32, min_r: f32, max_r: f32) -> Shape {
        let cx = rng.random_range(0.0..size);
        let cy = rng.random_range(0.0..size);
        let rx = rng.random_range(min_r..max_r);
        let ry = rng.random_range(min_r..max_r);
        let rot = rng.random_range(0.0..std::f32::consts::PI);
        if rng.random_bool(0.5) {
            Shape::Ellipse { cx, cy, rx, ry, rot }
        } else {
            let k = rng.random_range(3..=7);
            let mut angles: Vec<f32> = (0..k).map(|_| rng.random_range(0.0..std::f32::consts::TAU)).collect();
            angles.sort_by(f32::total_cmp);
            let (s, c) = rot.sin_cos();
            Shape::Polygon(
                angles
                    .into_iter()
                    .map(|t| {
                        let (x, y) = (rx * t.cos(), ry * t.sin());
                        (cx + x * c - y * s, cy + x * s + y * c)
                    })
                    .collect(),
            )
        }
    }

    fn contains(&self, x: f32, y: f32) -> bool {
        match self {
            Shape::Ellipse { cx, cy, rx, ry, rot } => {
                let (s, c) = rot.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(pts) => {
                if pts.len() < 3 {
                    return false;
                }
                // Counter-clockwise vertex order: inside iff left of every edge.
                (0..pts.len()).all(|i| {
                    let (ax, ay) = pts[i];
                    let (bx, by) = pts[(i + 1) % pts.len()];
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
                })
            }
        }
    }
}

/// Separable Gaussian blur with `sigma = radius / 2`, truncated at `radius`
/// and renormalised at the borders.
fn blur(map: &[f32], h: usize, w: usize, radius: f32) -> Vec<f32> {
    let r = radius.round() as isize;
    if r <= 0 {
        return map.to_vec();
    }
    let sigma = radius / 2.0;
    let k: Vec<f32> = (-r..=r).map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |src: &[f32], along_x: bool| -> Vec<f32> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (j, &kv) in k.iter().enumerate() {
                    let d = j as isize - r;
                    let (sx, sy) = if along_x { (x as isize + d, y as isize) } else { (x as isize, y as isize + d) };
                    if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        acc += kv * src[sy as usize * w + sx as usize];
                        norm += kv;
                    }
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(map, true), false)
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [0, 1, 2].map(|_| rng.random_range(0.25..0.95))
}

/// Generates one triplet; identical `(spec, seed)` give identical output.
///
/// The shadow is multiplicative: `shadow = free * (1 - (1 - a_c) * soft)`
/// where `soft` is the blurred shadow-shape union and `a_c` a per-channel
/// attenuation. The hard mask is `soft >= 0.5`.
pub fn synth_triplet(spec: &SynthSpec, seed: u64) -> Result<ImageTriplet> {
    spec.validate()?;
    let mut rng = seeded_rng(seed);
    let (h, w) = (spec.size, spec.size);
    let sz = spec.size as f32;
    let n = h * w;

    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut free = RgbImage::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let t = (((x as f32 / sz - 0.5) * dx + (y as f32 / sz - 0.5) * dy) + 0.75) / 1.5;
            for c in 0..3 {
                free.data[c * n + y * w + x] = c0[c] + (c1[c] - c0[c]) * t.clamp(0.0, 1.0);
            }
        }
    }
    let scene = rng.random_range(spec.scene_shapes.0..=spec.scene_shapes.1);
    for _ in 0..scene {
        let shape = Shape::random(&mut rng, sz, sz * 0.05, sz * 0.25);
        let col = random_color(&mut rng);
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x as f32 + 0.5, y as f32 + 0.5) {
                    for c in 0..3 {
                        free.data[c * n + y * w + x] = col[c];
                    }
                }
            }
        }
    }
    for v in free.data.iter_mut() {
        *v = (*v + rng.random_range(-1.0..=1.0) * spec.noise).clamp(0.0, 1.0);
    }

    let count = rng.random_range(spec.shadow_shapes.0..=spec.shadow_shapes.1);
    let shapes: Vec<Shape> = (0..count).map(|_| Shape::random(&mut rng, sz, sz * 0.12, sz * 0.35)).collect();
    let mut region = vec![0.0f32; n];
    for y in 0..h {
        for x in 0..w {
            if shapes.iter().any(|s| s.contains(x as f32 + 0.5, y as f32 + 0.5)) {
                region[y * w + x] = 1.0;
            }
        }
    }
    let radius = if spec.blur.1 > spec.blur.0 {
        rng.random_range(spec.blur.0..=spec.blur.1)
    } else {
        spec.blur.0
    };
    let soft = blur(&region, h, w, radius);
    let atten = [0, 1, 2].map(|_| {
        if spec.attenuation.1 > spec.attenuation.0 {
            rng.random_range(spec.attenuation.0..=spec.attenuation.1)
        } else {
            spec.attenuation.0
        }
    });
    let mut shadow = free.clone();
    for c in 0..3 {
        for (v, &s) in shadow.plane_mut(c).iter_mut().zip(&soft) {
            *v *= 1.0 - (1.0 - atten[c]) * s;
        }
    }
    let mask = HardMask::new(h, w, soft.iter().map(|&s| s >= 0.5).collect())?;
    ImageTriplet::new(format!("synth-{seed:08}"), shadow, mask, free)
}

/// `count` triplets with seeds `base_seed, base_seed + 1, ...`.
pub fn synth_dataset(spec: &SynthSpec, base_seed: u64, count: usize) -> Result<Vec<ImageTriplet>> {
    (0..count as u64).map(|i| synth_triplet(spec, base_seed.wrapping_add(i))).collect()
}

/// Geometric transform applied identically to all triplet components:
/// clockwise rotation by `rot90 * 90` degrees, then flips, then a crop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub rot90: u8,
    pub hflip: bool,
    pub vflip: bool,
    /// `(top, left, side)` in the rotated frame.
    pub crop: Option<(usize, usize, usize)>,
}

impl Augmentation {
    /// Random draw; `crop` is the square patch side, if any.
    pub fn draw(rng: &mut impl Rng, h: usize, w: usize, crop: Option<usize>) -> Result<Self> {
        let rot90 = rng.random_range(0..4u8);
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let (rh, rw) = if rot90 % 2 == 1 { (w, h) } else { (h, w) };
        let crop = match crop {
            Some(s) if s > rh.min(rw) => {
                return Err(Error::Data(format!("crop {s} larger than image {h}x{w}")));
            }
            Some(s) => Some((rng.random_range(0..=rh - s), rng.random_range(0..=rw - s), s)),
            None => None,
        };
        Ok(Augmentation { rot90, hflip, vflip, crop })
    }

    /// Transforms one `h x w` row-major plane, returning the new extents.
    pub fn apply_plane<X: Copy>(&self, src: &[X], h: usize, w: usize) -> (Vec<X>, usize, usize) {
        let mut data = src.to_vec();
        let (mut h, mut w) = (h, w);
        for _ in 0..self.rot90 % 4 {
            // Clockwise: out[y][x] = in[h-1-x][y], out extents (w, h).
            let mut out = Vec::with_capacity(data.len());
            for y in 0..w {
                for x in 0..h {
                    out.push(data[(h - 1 - x) * w + y]);
                }
            }
            data = out;
            std::mem::swap(&mut h, &mut w);
        }
        if self.hflip {
            for row in data.chunks_mut(w) {
                row.reverse();
            }
        }
        if self.vflip {
            let rows: Vec<Vec<X>> = data.chunks(w).rev().map(|r| r.to_vec()).collect();
            data = rows.concat();
        }
        if let Some((top, left, s)) = self.crop {
            let mut out = Vec::with_capacity(s * s);
            for y in top..top + s {
                out.extend_from_slice(&data[y * w + left..y * w + left + s]);
            }
            return (out, s, s);
        }
        (data, h, w)
    }

    pub fn apply_rgb(&self, img: &RgbImage) -> RgbImage {
        let mut data = Vec::with_capacity(img.data.len());
        let (mut oh, mut ow) = (0, 0);
        for c in 0..3 {
            let (p, h, w) = self.apply_plane(img.plane(c), img.height, img.width);
            data.extend(p);
            (oh, ow) = (h, w);
        }
        RgbImage {
            height: oh,
            width: ow,
            data,
        }
    }

    pub fn apply_mask(&self, m: &HardMask) -> HardMask {
        let (data, height, width) = self.apply_plane(&m.data, m.height, m.width);
        HardMask { height, width, data }
    }

    pub fn apply(&self, t: &ImageTriplet) -> ImageTriplet {
        ImageTriplet {
            id: t.id.clone(),
            shadow: self.apply_rgb(&t.shadow),
            mask: self.apply_mask(&t.mask),
            free: self.apply_rgb(&t.free),
        }
    }
}

/// Random rotation, flips and optional square crop, seeded.
pub fn augment(t: &ImageTriplet, seed: u64, crop: Option<usize>) -> Result<ImageTriplet> {
    let aug = Augmentation::draw(&mut seeded_rng(seed), t.height(), t.width(), crop)?;
    Ok(aug.apply(t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletPaths {
    pub id: String,
    pub shadow: PathBuf,
    pub mask: PathBuf,
    pub free: PathBuf,
}

/// Lazily loaded dataset in ISTD layout (`*_A` shadow, `*_B` mask, `*_C`
/// shadow-free) or the generic `shadow/ mask/ free/` layout.
#[derive(Clone, Debug)]
pub struct IstdIndex {
    pub root: PathBuf,
    pub entries: Vec<TripletPaths>,
    /// One message per skipped image.
    pub warnings: Vec<String>,
}

const IMAGE_EXTS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn find_layout(root: &Path, split: Split) -> Option<[PathBuf; 3]> {
    let s = split.name();
    for base in [root.join(s), root.to_path_buf()] {
        let istd = [format!("{s}_A"), format!("{s}_B"), format!("{s}_C")].map(|d| base.join(d));
        let generic = ["shadow", "mask", "free"].map(|d| base.join(d));
        for dirs in [istd, generic] {
            if dirs.iter().all(|d| d.is_dir()) {
                return Some(dirs);
            }
        }
    }
    None
}

/// Indexes a dataset split, matching the three folders by file stem in
/// lexicographic order. Images lacking a counterpart are skipped with a warning.
pub fn load_istd(root: impl AsRef<Path>, split: Split) -> Result<IstdIndex> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} does not exist", root.display())));
    }
    let [sd, md, fd] = find_layout(root, split).ok_or_else(|| {
        Error::Data(format!(
            "no {0}_A/{0}_B/{0}_C or shadow/mask/free folders under {1}",
            split.name(),
            root.display()
        ))
    })?;
    let shadows = list_images(&sd)?;
    let masks = list_images(&md)?;
    let frees = list_images(&fd)?;
    let lookup = |v: &[(String, PathBuf)], id: &str| v.binary_search_by(|(s, _)| s.as_str().cmp(id)).ok().map(|i| v[i].1.clone());
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for (id, shadow) in &shadows {
        match (lookup(&masks, id), lookup(&frees, id)) {
            (Some(mask), Some(free)) => entries.push(TripletPaths {
                id: id.clone(),
                shadow: shadow.clone(),
                mask,
                free,
            }),
            (m, f) => {
                let missing: Vec<&str> = [m.is_none().then_some("mask"), f.is_none().then_some("shadow-free")]
                    .into_iter()
                    .flatten()
                    .collect();
                let msg = format!("{id}: missing {}", missing.join(" and "));
                warn!("skipping {msg}");
                warnings.push(msg);
            }
        }
    }
    for (id, _) in masks.iter().chain(&frees) {
        if lookup(&shadows, id).is_none() {
            let msg = format!("{id}: missing shadow image");
            if !warnings.contains(&msg) {
                warn!("skipping {msg}");
                warnings.push(msg);
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("no complete triplets under {}", root.display())));
    }
    Ok(IstdIndex {
        root: root.to_path_buf(),
        entries,
        warnings,
    })
}

impl TripletSource for IstdIndex {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn get(&self, i: usize) -> Result<ImageTriplet> {
        let p = &self.entries[i];
        ImageTriplet::new(
            p.id.clone(),
            RgbImage::load_png(&p.shadow)?,
            HardMask::load_png(&p.mask)?,
            RgbImage::load_png(&p.free)?,
        )
    }
}

/// Writes triplets as `dir/shadow/{id}.png`, `dir/mask/{id}.png`, `dir/free/{id}.png`.
pub fn materialize(dir: impl AsRef<Path>, triplets: &[ImageTriplet]) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["shadow", "mask", "free"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for t in triplets {
        let name = format!("{}.png", t.id);
        t.shadow.save_png(dir.join("shadow").join(&name))?;
        t.mask.save_png(dir.join("mask").join(&name))?;
        t.free.save_png(dir.join("free").join(&name))?;
    }
    Ok(())
}
