//! Synthetic multi-object scenes with exact ground-truth masks,
//! augmented views, and weak prompts (box / points / polygon).

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;

use crate::error::{OcrtError, Result};
use crate::io;
use crate::rng;
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disc,
    Triangle,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    /// Grid side length (H = W).
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub background_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 32,
            min_objects: 2,
            max_objects: 3,
            background_noise: 0.03,
        }
    }
}

const BACKGROUND_LEVEL: f64 = 0.25;
const TEXTURE_NOISE: f64 = 0.03;

/// Rendered scene. `masks` are the per-object visible masks with
/// occlusion resolved frontmost-wins; together with `background` they
/// partition the grid exactly.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub size: usize,
    /// H*W*3 row-major, channel innermost, values in [0,1].
    pub image: Vec<f64>,
    pub masks: Vec<Vec<f64>>,
    pub background: Vec<f64>,
}

impl SyntheticScene {
    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    /// Exact per-pixel partition check.
    pub fn is_partition(&self) -> bool {
        let n = self.pixels();
        (0..n).all(|p| {
            let mut s = self.background[p];
            for m in &self.masks {
                s += m[p];
            }
            s == 1.0
        })
    }

    /// Image as an [H*W, 3] tensor.
    pub fn image_tensor(&self) -> Tensor {
        Tensor::from_vec(self.image.clone(), &[self.pixels(), 3]).expect("image in range")
    }
}

struct PlacedObject {
    raw_mask: Vec<bool>,
    color: [f64; 3],
}

fn raw_mask(kind: ShapeKind, cx: i64, cy: i64, a: i64, b: i64, size: usize) -> Vec<bool> {
    let mut m = vec![false; size * size];
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            let (dx, dy) = (x - cx, y - cy);
            let inside = match kind {
                ShapeKind::Rectangle => dx.abs() <= a && dy.abs() <= b,
                ShapeKind::Disc => dx * dx + dy * dy <= a * a,
                ShapeKind::Triangle => {
                    // Isoceles triangle: apex up, base at cy + a.
                    dy >= -a && dy <= a && dx.abs() * 2 * a <= (dy + a) * a
                }
            };
            if inside {
                m[(y * size as i64 + x) as usize] = true;
            }
        }
    }
    m
}

/// Deterministic in the seed; masks plus background partition the grid.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    if spec.min_objects > spec.max_objects || spec.max_objects > 0 && spec.size < 16 {
        return Err(OcrtError::Generation(format!(
            "invalid spec: objects {}..={} on grid {}",
            spec.min_objects, spec.max_objects, spec.size
        )));
    }
    let size = spec.size;
    let mut rng = rng::stream(seed, "scene", 0);
    let n_objects = if spec.max_objects == 0 {
        0
    } else {
        rng.gen_range(spec.min_objects..=spec.max_objects)
    };

    let mut placed: Vec<PlacedObject> = Vec::new();
    for _ in 0..n_objects {
        let mut ok = false;
        for _attempt in 0..50 {
            let kind = match rng.gen_range(0..3) {
                0 => ShapeKind::Rectangle,
                1 => ShapeKind::Disc,
                _ => ShapeKind::Triangle,
            };
            // Half-extent capped by the grid so small scenes stay placeable.
            let hi = (size / 5).clamp(3, 6);
            let a = rng.gen_range(3..=hi) as i64;
            let b = if kind == ShapeKind::Rectangle {
                rng.gen_range(3..=hi) as i64
            } else {
                a
            };
            let ext = a.max(b);
            let cx = rng.gen_range(ext..size as i64 - ext);
            let cy = rng.gen_range(ext..size as i64 - ext);
            let m = raw_mask(kind, cx, cy, a, b, size);
            let area = m.iter().filter(|&&v| v).count();
            // Cap pairwise overlap so no object is wiped out by occlusion.
            let heavy_overlap = placed.iter().any(|p| {
                let inter = m
                    .iter()
                    .zip(&p.raw_mask)
                    .filter(|(&x, &y)| x && y)
                    .count();
                let other = p.raw_mask.iter().filter(|&&v| v).count();
                inter * 5 > area.min(other) * 2
            });
            if heavy_overlap {
                continue;
            }
            let color = [
                rng.gen_range(0.15..1.0),
                rng.gen_range(0.15..1.0),
                rng.gen_range(0.15..1.0),
            ];
            placed.push(PlacedObject { raw_mask: m, color });
            ok = true;
            break;
        }
        if !ok {
            return Err(OcrtError::Generation(format!(
                "could not place object {} after 50 attempts",
                placed.len()
            )));
        }
    }

    // Ownership grid: later objects are frontmost.
    let n = size * size;
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (i, obj) in placed.iter().enumerate() {
        for p in 0..n {
            if obj.raw_mask[p] {
                owner[p] = Some(i);
            }
        }
    }

    let mut image = vec![0.0; n * 3];
    for p in 0..n {
        match owner[p] {
            Some(i) => {
                for c in 0..3 {
                    let v = placed[i].color[c] + rng.gen_range(-TEXTURE_NOISE..=TEXTURE_NOISE);
                    image[p * 3 + c] = v.clamp(0.0, 1.0);
                }
            }
            None => {
                let v = BACKGROUND_LEVEL
                    + rng.gen_range(-spec.background_noise..=spec.background_noise.max(1e-12));
                for c in 0..3 {
                    image[p * 3 + c] = v.clamp(0.0, 1.0);
                }
            }
        }
    }

    let masks: Vec<Vec<f64>> = (0..placed.len())
        .map(|i| {
            (0..n)
                .map(|p| if owner[p] == Some(i) { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let background: Vec<f64> = (0..n)
        .map(|p| if owner[p].is_none() { 1.0 } else { 0.0 })
        .collect();

    Ok(SyntheticScene {
        size,
        image,
        masks,
        background,
    })
}

fn shift_scene(scene: &SyntheticScene, dx: i64, dy: i64) -> SyntheticScene {
    let size = scene.size as i64;
    let n = scene.pixels();
    let mut image = vec![0.0; n * 3];
    let mut masks = vec![vec![0.0; n]; scene.masks.len()];
    let mut background = vec![0.0; n];
    for y in 0..size {
        for x in 0..size {
            let p = (y * size + x) as usize;
            let (sx, sy) = (x - dx, y - dy);
            if sx >= 0 && sx < size && sy >= 0 && sy < size {
                let q = (sy * size + sx) as usize;
                image[p * 3..p * 3 + 3].copy_from_slice(&scene.image[q * 3..q * 3 + 3]);
                for (m, sm) in masks.iter_mut().zip(&scene.masks) {
                    m[p] = sm[q];
                }
                background[p] = scene.background[q];
            } else {
                // Revealed area joins the background.
                for c in 0..3 {
                    image[p * 3 + c] = BACKGROUND_LEVEL;
                }
                background[p] = 1.0;
            }
        }
    }
    SyntheticScene {
        size: scene.size,
        image,
        masks,
        background,
    }
}

/// Weakly and strongly augmented views. The strong view shares the weak
/// view's geometry (so masks and prompts line up) and adds photometric
/// distortion plus an occluding patch.
pub fn make_views(scene: &SyntheticScene, seed: u64, strength: f64) -> (SyntheticScene, SyntheticScene) {
    if strength == 0.0 {
        return (scene.clone(), scene.clone());
    }
    let mut rng = rng::stream(seed, "views", 0);
    let jitter = |r: &mut rand_chacha::ChaCha8Rng| -> i64 {
        let v: f64 = r.gen_range(-1.5..1.5) * strength;
        (v.round() as i64).clamp(-1, 1)
    };
    let (dx, dy) = (jitter(&mut rng), jitter(&mut rng));
    let mut weak = shift_scene(scene, dx, dy);
    let brightness = rng.gen_range(-0.05..0.05) * strength;
    for v in weak.image.iter_mut() {
        *v = (*v + brightness).clamp(0.0, 1.0);
    }

    let mut strong = weak.clone();
    let scales: Vec<f64> = (0..3)
        .map(|_| 1.0 + strength * rng.gen_range(-0.4..0.4))
        .collect();
    let noise_sigma = 0.05 * strength;
    let n = strong.pixels();
    for p in 0..n {
        for c in 0..3 {
            let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * noise_sigma;
            strong.image[p * 3 + c] = (strong.image[p * 3 + c] * scales[c] + noise).clamp(0.0, 1.0);
        }
    }
    // Occluding patch: photometric damage only, masks untouched.
    let patch = 6.min(strong.size);
    let px = rng.gen_range(0..=strong.size - patch);
    let py = rng.gen_range(0..=strong.size - patch);
    for y in py..py + patch {
        for x in px..px + patch {
            let p = y * strong.size + x;
            for c in 0..3 {
                strong.image[p * 3 + c] = 0.5;
            }
        }
    }
    (weak, strong)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Box,
    Point,
    Poly,
}

impl PromptKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(PromptKind::Box),
            "point" => Ok(PromptKind::Point),
            "poly" => Ok(PromptKind::Poly),
            other => Err(OcrtError::Config {
                key: "prompt".into(),
                reason: format!("unknown prompt kind `{other}`"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PromptKind::Box => "box",
            PromptKind::Point => "point",
            PromptKind::Poly => "poly",
        }
    }
}

#[derive(Debug, Clone)]
pub enum WeakPrompt {
    /// Tight bounding box, inclusive pixel coordinates.
    Box {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    },
    /// Five points on the mask, five off it.
    Points {
        inside: Vec<(usize, usize)>,
        outside: Vec<(usize, usize)>,
    },
    /// ceil(P/20) vertices equally spaced along the traced boundary.
    Poly { vertices: Vec<(usize, usize)> },
}

fn mask_pixels(mask: &[f64], size: usize) -> Vec<(usize, usize)> {
    (0..size * size)
        .filter(|&p| mask[p] > 0.5)
        .map(|p| (p % size, p / size))
        .collect()
}

/// Largest 4-connected component of the mask.
fn largest_component(mask: &[f64], size: usize) -> Vec<bool> {
    let mut label = vec![0usize; size * size];
    let mut next = 0usize;
    let mut best = (0usize, 0usize); // (label, count)
    for start in 0..size * size {
        if mask[start] <= 0.5 || label[start] != 0 {
            continue;
        }
        next += 1;
        let mut count = 0usize;
        let mut q = VecDeque::from([start]);
        label[start] = next;
        while let Some(p) = q.pop_front() {
            count += 1;
            let (x, y) = (p % size, p / size);
            let mut push = |nx: i64, ny: i64| {
                if nx >= 0 && ny >= 0 && (nx as usize) < size && (ny as usize) < size {
                    let np = ny as usize * size + nx as usize;
                    if mask[np] > 0.5 && label[np] == 0 {
                        label[np] = next;
                        q.push_back(np);
                    }
                }
            };
            push(x as i64 - 1, y as i64);
            push(x as i64 + 1, y as i64);
            push(x as i64, y as i64 - 1);
            push(x as i64, y as i64 + 1);
        }
        if count > best.1 {
            best = (next, count);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.0).collect()
}

fn is_boundary(comp: &[bool], size: usize, x: usize, y: usize) -> bool {
    if !comp[y * size + x] {
        return false;
    }
    if x == 0 || y == 0 || x == size - 1 || y == size - 1 {
        return true;
    }
    !(comp[y * size + x - 1]
        && comp[y * size + x + 1]
        && comp[(y - 1) * size + x]
        && comp[(y + 1) * size + x])
}

/// Ordered outer-boundary trace (Moore neighbourhood) of the largest
/// component, plus the number of distinct boundary pixels.
fn trace_boundary(mask: &[f64], size: usize) -> (Vec<(usize, usize)>, usize) {
    let comp = largest_component(mask, size);
    let distinct = (0..size * size)
        .filter(|&p| is_boundary(&comp, size, p % size, p / size))
        .count();
    // Start: topmost then leftmost component pixel.
    let start = (0..size * size).find(|&p| comp[p]).map(|p| (p % size, p / size));
    let Some(start) = start else {
        return (Vec::new(), 0);
    };
    let at = |x: i64, y: i64| -> bool {
        x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size && comp[y as usize * size + x as usize]
    };
    // Clockwise Moore neighbourhood starting west.
    const DIRS: [(i64, i64); 8] = [
        (-1, 0),
        (-1, -1),
        (0, -1),
        (1, -1),
        (1, 0),
        (1, 1),
        (0, 1),
        (-1, 1),
    ];
    let mut trace = vec![start];
    let (mut cx, mut cy) = (start.0 as i64, start.1 as i64);
    let mut dir = 0usize; // index into DIRS of the backtrack direction
    let cap = 8 * size * size;
    for _ in 0..cap {
        let mut found = None;
        for k in 0..8 {
            let d = (dir + k) % 8;
            let (nx, ny) = (cx + DIRS[d].0, cy + DIRS[d].1);
            if at(nx, ny) {
                found = Some((d, nx, ny));
                break;
            }
        }
        let Some((d, nx, ny)) = found else {
            break; // isolated pixel
        };
        if (nx as usize, ny as usize) == start && trace.len() > 1 {
            break;
        }
        trace.push((nx as usize, ny as usize));
        cx = nx;
        cy = ny;
        // Next scan starts just after the direction pointing back.
        dir = (d + 5) % 8;
    }
    (trace, distinct.max(1))
}

/// Derive a weak prompt from a nonempty mask.
pub fn derive_prompt(mask: &[f64], size: usize, kind: PromptKind, seed: u64) -> Result<WeakPrompt> {
    let inside = mask_pixels(mask, size);
    if inside.is_empty() {
        return Err(OcrtError::EmptyMask);
    }
    match kind {
        PromptKind::Box => {
            let x0 = inside.iter().map(|&(x, _)| x).min().unwrap();
            let x1 = inside.iter().map(|&(x, _)| x).max().unwrap();
            let y0 = inside.iter().map(|&(_, y)| y).min().unwrap();
            let y1 = inside.iter().map(|&(_, y)| y).max().unwrap();
            Ok(WeakPrompt::Box { x0, y0, x1, y1 })
        }
        PromptKind::Point => {
            let outside: Vec<(usize, usize)> = (0..size * size)
                .filter(|&p| mask[p] <= 0.5)
                .map(|p| (p % size, p / size))
                .collect();
            let mut rng = rng::stream(seed, "prompt", 0);
            let pick = |r: &mut rand_chacha::ChaCha8Rng, v: &[(usize, usize)]| -> Vec<(usize, usize)> {
                (0..5).map(|_| v[r.gen_range(0..v.len())]).collect()
            };
            let ins = pick(&mut rng, &inside);
            let outs = if outside.is_empty() {
                Vec::new()
            } else {
                pick(&mut rng, &outside)
            };
            Ok(WeakPrompt::Points {
                inside: ins,
                outside: outs,
            })
        }
        PromptKind::Poly => {
            let (trace, perimeter) = trace_boundary(mask, size);
            if trace.is_empty() {
                return Err(OcrtError::EmptyMask);
            }
            let n_vertices = perimeter.div_ceil(20).max(1);
            let vertices = (0..n_vertices)
                .map(|i| trace[i * trace.len() / n_vertices])
                .collect();
            Ok(WeakPrompt::Poly { vertices })
        }
    }
}

// ── dataset directory layout ────────────────────────────────────────
// scenes/NNNN.tns  image as [H, W, 3]
// masks/NNNN.tns   [n_objects + 1, H, W], background last
// manifest.txt     one line per scene

pub fn save_dataset(dir: &Path, spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<u64>> {
    std::fs::create_dir_all(dir).map_err(|e| OcrtError::io(dir, e))?;
    let mut manifest = String::new();
    let mut seeds = Vec::with_capacity(count);
    for i in 0..count {
        let scene_seed = rng::derive(seed, "dataset", i as u64);
        let scene = generate_scene(spec, scene_seed)?;
        let img_rel = format!("scenes/{i:04}.tns");
        let mask_rel = format!("masks/{i:04}.tns");
        io::write_tensor(
            &dir.join(&img_rel),
            &[scene.size, scene.size, 3],
            &scene.image,
        )?;
        let mut packed = Vec::new();
        for m in &scene.masks {
            packed.extend_from_slice(m);
        }
        packed.extend_from_slice(&scene.background);
        io::write_tensor(
            &dir.join(&mask_rel),
            &[scene.masks.len() + 1, scene.size, scene.size],
            &packed,
        )?;
        manifest.push_str(&format!(
            "idx={i:04} seed={scene_seed} objects={} scene={img_rel} masks={mask_rel}\n",
            scene.masks.len()
        ));
        seeds.push(scene_seed);
    }
    io::write_text(&dir.join("manifest.txt"), &manifest)?;
    Ok(seeds)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let manifest = io::read_text(&dir.join("manifest.txt"))?;
    let mut scenes = Vec::new();
    for line in manifest.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let field = |key: &str| -> Result<&str> {
            line.split_whitespace()
                .find_map(|tok| tok.strip_prefix(&format!("{key}=")[..]))
                .ok_or_else(|| OcrtError::Checkpoint(format!("manifest line missing {key}: {line}")))
        };
        let (img_shape, image) = io::read_tensor(&dir.join(field("scene")?))?;
        let (mask_shape, packed) = io::read_tensor(&dir.join(field("masks")?))?;
        if img_shape.len() != 3 || mask_shape.len() != 3 {
            return Err(OcrtError::Checkpoint("dataset tensors have wrong rank".into()));
        }
        let size = img_shape[0];
        let n = size * size;
        let layers = mask_shape[0];
        let masks = (0..layers - 1)
            .map(|k| packed[k * n..(k + 1) * n].to_vec())
            .collect();
        let background = packed[(layers - 1) * n..layers * n].to_vec();
        scenes.push(SyntheticScene {
            size,
            image,
            masks,
            background,
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_objects_is_all_background() {
        let spec = SceneSpec {
            max_objects: 0,
            min_objects: 0,
            ..Default::default()
        };
        let s = generate_scene(&spec, 1).unwrap();
        assert!(s.masks.is_empty());
        assert!(s.background.iter().all(|&v| v == 1.0));
        assert!(s.is_partition());
    }

    #[test]
    fn same_seed_bit_identical() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, 42).unwrap();
        let b = generate_scene(&spec, 42).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.masks, b.masks);
    }

    #[test]
    fn masks_partition_grid() {
        let spec = SceneSpec {
            min_objects: 3,
            max_objects: 3,
            ..Default::default()
        };
        for seed in 0..20 {
            let s = generate_scene(&spec, seed).unwrap();
            assert!(s.is_partition(), "seed {seed}");
        }
    }

    #[test]
    fn zero_strength_views_equal_input() {
        let s = generate_scene(&SceneSpec::default(), 3).unwrap();
        let (w, st) = make_views(&s, 9, 0.0);
        assert_eq!(w.image, s.image);
        assert_eq!(st.image, s.image);
    }

    #[test]
    fn weak_view_closer_than_strong_on_average() {
        let s = generate_scene(&SceneSpec::default(), 5).unwrap();
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
        };
        let (mut dw, mut ds) = (0.0, 0.0);
        for seed in 0..100 {
            let (w, st) = make_views(&s, seed, 1.0);
            dw += dist(&w.image, &s.image);
            ds += dist(&st.image, &s.image);
        }
        assert!(dw < ds, "weak {dw} vs strong {ds}");
    }

    #[test]
    fn augmented_masks_still_partition() {
        let s = generate_scene(&SceneSpec::default(), 11).unwrap();
        for seed in 0..20 {
            let (w, st) = make_views(&s, seed, 1.0);
            assert!(w.is_partition());
            assert!(st.is_partition());
        }
    }

    #[test]
    fn box_prompt_full_grid() {
        let size = 8;
        let mask = vec![1.0; size * size];
        let p = derive_prompt(&mask, size, PromptKind::Box, 0).unwrap();
        match p {
            WeakPrompt::Box { x0, y0, x1, y1 } => {
                assert_eq!((x0, y0, x1, y1), (0, 0, 7, 7));
            }
            _ => panic!("expected box"),
        }
    }

    #[test]
    fn single_pixel_point_prompt() {
        let size = 8;
        let mut mask = vec![0.0; size * size];
        mask[3 * size + 5] = 1.0;
        let p = derive_prompt(&mask, size, PromptKind::Point, 0).unwrap();
        match p {
            WeakPrompt::Points { inside, .. } => {
                assert_eq!(inside.len(), 5);
                assert!(inside.iter().all(|&pt| pt == (5, 3)));
            }
            _ => panic!("expected points"),
        }
    }

    #[test]
    fn square_poly_vertex_count() {
        // 10x10 filled square: 36 boundary pixels -> ceil(36/20) = 2 vertices.
        let size = 16;
        let mut mask = vec![0.0; size * size];
        for y in 2..12 {
            for x in 2..12 {
                mask[y * size + x] = 1.0;
            }
        }
        let (_, perimeter) = trace_boundary(&mask, size);
        assert_eq!(perimeter, 36);
        let p = derive_prompt(&mask, size, PromptKind::Poly, 0).unwrap();
        match p {
            WeakPrompt::Poly { vertices } => {
                assert_eq!(vertices.len(), 2);
                for (x, y) in vertices {
                    assert!(is_boundary(&largest_component(&mask, size), size, x, y));
                }
            }
            _ => panic!("expected poly"),
        }
    }

    #[test]
    fn empty_mask_rejected() {
        let mask = vec![0.0; 64];
        assert!(matches!(
            derive_prompt(&mask, 8, PromptKind::Box, 0),
            Err(OcrtError::EmptyMask)
        ));
    }

    #[test]
    fn prompt_points_respect_mask_membership() {
        let spec = SceneSpec::default();
        for seed in 0..50 {
            let s = generate_scene(&spec, seed).unwrap();
            for (k, mask) in s.masks.iter().enumerate() {
                if mask.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let p = derive_prompt(mask, s.size, PromptKind::Point, seed + k as u64).unwrap();
                if let WeakPrompt::Points { inside, outside } = p {
                    for (x, y) in inside {
                        assert!(mask[y * s.size + x] > 0.5);
                    }
                    for (x, y) in outside {
                        assert!(mask[y * s.size + x] <= 0.5);
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &SceneSpec::default(), 3, 7).unwrap();
        let scenes = load_dataset(dir.path()).unwrap();
        assert_eq!(scenes.len(), 3);
        for s in &scenes {
            assert!(s.is_partition());
        }
        let direct = generate_scene(&SceneSpec::default(), rng::derive(7, "dataset", 1)).unwrap();
        assert_eq!(scenes[1].image, direct.image);
    }
}
