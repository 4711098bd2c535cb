//! Procedural 2D shapes world: scenes of colored circles, squares and
//! triangles on a white background, each kind locked to its motion law
//! (circles vertical, squares horizontal, triangles diagonal), rendered with
//! anti-aliasing and serialized with exact ground-truth metadata.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domains, Rng};
use crate::tensor::Tensor;
use crate::util::parallel_map;

/// Discrete speed set in pixels per frame; zero is excluded so every shape
/// moves and velocity histograms stay multimodal.
pub const SPEEDS: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];

/// Minimum pairwise L-infinity distance between shape colors, and between
/// any shape color and the white background (the latter keeps every shape
/// visible to color-mask centroid measurements).
pub const MIN_COLOR_GAP: f64 = 0.25;

const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Sub-pixel center (x, y); the pixel grid spans [0, resolution].
    pub center: [f64; 2],
    /// Radius (circle) or half-extent (square, triangle) in pixels.
    pub size: f64,
    /// RGB in [0, 1].
    pub color: [f64; 3],
    /// Pixels per frame.
    pub velocity: [f64; 2],
}

impl Shape {
    /// Point-inclusion test in continuous image coordinates.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let s = self.size;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= s * s,
            ShapeKind::Square => dx.abs() <= s && dy.abs() <= s,
            ShapeKind::Triangle => {
                // Upright isoceles triangle: apex above center, flat base
                // below (y grows downward in image coordinates).
                let ax = self.center[0];
                let ay = self.center[1] - s;
                let bx = self.center[0] - s;
                let by = self.center[1] + s;
                let cx = self.center[0] + s;
                let cy = self.center[1] + s;
                let e1 = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let e2 = (cx - bx) * (y - by) - (cy - by) * (x - bx);
                let e3 = (ax - cx) * (y - cy) - (ay - cy) * (x - cx);
                (e1 >= 0.0 && e2 >= 0.0 && e3 >= 0.0) || (e1 <= 0.0 && e2 <= 0.0 && e3 <= 0.0)
            }
        }
    }
}

/// An ordered shape list (later entries render on top) at a fixed resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shapes: Vec<Shape>,
    pub resolution: usize,
}

impl Scene {
    /// The scene one time step later: every center advanced by its velocity.
    pub fn advanced(&self) -> Scene {
        let shapes = self
            .shapes
            .iter()
            .map(|s| {
                let mut n = s.clone();
                n.center[0] += s.velocity[0];
                n.center[1] += s.velocity[1];
                n
            })
            .collect();
        Scene { shapes, resolution: self.resolution }
    }
}

fn linf(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
}

fn pick_speed(rng: &mut Rng) -> f64 {
    SPEEDS[rng.below(SPEEDS.len())]
}

/// Samples a scene: every kind present with probability 0.6 (re-drawn until
/// at least one shape), sizes uniform in [res/8, res/4], positions uniform
/// subject to both frames keeping each center at least size/2 from every
/// border, colors uniform with pairwise (and against-background) L-infinity
/// gap of at least 0.25. Motion laws: circles move vertically, squares
/// horizontally, triangles diagonally; a triangle copies the circle's
/// vertical speed whenever a circle is present.
pub fn sample_scene(rng: &mut Rng, resolution: usize) -> Result<Scene> {
    if resolution < 16 {
        return Err(Error::InvalidArgument {
            op: "sample_scene",
            detail: format!("resolution must be at least 16, got {resolution}"),
        });
    }
    let mut present = [false; 3];
    let mut attempts = 0;
    while !present.iter().any(|&p| p) {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Generation("could not draw a non-empty shape set".into()));
        }
        for p in &mut present {
            *p = rng.chance(0.6);
        }
    }

    // Velocities first: the triangle's coupling needs the circle's draw.
    let motion = MotionDraw {
        circle_vy: pick_speed(rng),
        square_vx: pick_speed(rng),
        lone_triangle_speed: pick_speed(rng),
    };
    place_shapes(rng, resolution, present, motion)
}

/// The three independent speed draws behind a scene's velocity assignment.
#[derive(Clone, Copy)]
struct MotionDraw {
    circle_vy: f64,
    square_vx: f64,
    lone_triangle_speed: f64,
}

/// Places and colors shapes for a fixed presence mask and velocity
/// assignment (the non-motion half of [`sample_scene`]).
fn place_shapes(
    rng: &mut Rng,
    resolution: usize,
    present: [bool; 3],
    motion: MotionDraw,
) -> Result<Scene> {
    let res = resolution as f64;
    let MotionDraw { circle_vy, square_vx, lone_triangle_speed } = motion;
    let mut shapes = Vec::new();
    for (slot, &kind) in ShapeKind::ALL.iter().enumerate() {
        if !present[slot] {
            continue;
        }
        let velocity = match kind {
            ShapeKind::Circle => [0.0, circle_vy],
            ShapeKind::Square => [square_vx, 0.0],
            ShapeKind::Triangle => {
                let s = if present[0] { circle_vy } else { lone_triangle_speed };
                [s, s]
            }
        };
        let size = rng.uniform(res / 8.0, res / 4.0);
        let margin = size / 2.0;
        let mut center = [0.0; 2];
        for axis in 0..2 {
            let lo = margin + (-velocity[axis]).max(0.0);
            let hi = res - margin - velocity[axis].max(0.0);
            if hi <= lo {
                return Err(Error::Generation(format!(
                    "no valid position for size {size:.2} velocity {velocity:?} at resolution {resolution}"
                )));
            }
            center[axis] = rng.uniform(lo, hi);
        }
        shapes.push(Shape { kind, center, size, color: [0.0; 3], velocity });
    }

    // Colors drawn jointly so the pairwise constraint treats all shapes (and
    // the background) symmetrically.
    let white = [1.0, 1.0, 1.0];
    let mut attempts = 0;
    loop {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Generation("could not draw well-separated shape colors".into()));
        }
        let colors: Vec<[f64; 3]> = (0..shapes.len())
            .map(|_| [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)])
            .collect();
        let ok = colors.iter().all(|&c| linf(c, white) >= MIN_COLOR_GAP)
            && colors
                .iter()
                .enumerate()
                .all(|(i, &a)| colors[..i].iter().all(|&b| linf(a, b) >= MIN_COLOR_GAP));
        if ok {
            for (shape, color) in shapes.iter_mut().zip(colors) {
                shape.color = color;
            }
            break;
        }
    }

    Ok(Scene { shapes, resolution })
}

/// Samples a scene with the same shape kinds and the exact velocity
/// assignment of `like`, but fresh sizes, positions, and colors. This is the
/// generator behind motion-analogy ground truth: the returned scene realizes
/// the same motion in a different appearance.
pub fn sample_matched_scene(rng: &mut Rng, like: &Scene) -> Result<Scene> {
    let mut present = [false; 3];
    let mut motion = MotionDraw {
        circle_vy: SPEEDS[0],
        square_vx: SPEEDS[0],
        lone_triangle_speed: SPEEDS[0],
    };
    for shape in &like.shapes {
        match shape.kind {
            ShapeKind::Circle => {
                present[0] = true;
                motion.circle_vy = shape.velocity[1];
            }
            ShapeKind::Square => {
                present[1] = true;
                motion.square_vx = shape.velocity[0];
            }
            ShapeKind::Triangle => {
                present[2] = true;
                motion.lone_triangle_speed = shape.velocity[0];
            }
        }
    }
    place_shapes(rng, like.resolution, present, motion)
}

/// Rasterizes a scene to a `[3, R, R]` tensor in [0, 1]: white background,
/// shapes composited in list order (later on top), 2x2 supersampled
/// anti-aliasing. Deterministic.
pub fn render(scene: &Scene) -> Tensor<f32> {
    let r = scene.resolution;
    let mut out = Tensor::full(&[3, r, r], 1.0f32);
    let data = out.data_mut();
    const SUB: [f64; 2] = [0.25, 0.75];
    for py in 0..r {
        for px in 0..r {
            let mut acc = [0.0f64; 3];
            for sy in SUB {
                for sx in SUB {
                    let x = px as f64 + sx;
                    let y = py as f64 + sy;
                    let mut color = [1.0, 1.0, 1.0];
                    for shape in scene.shapes.iter().rev() {
                        if shape.contains_point(x, y) {
                            color = shape.color;
                            break;
                        }
                    }
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            for c in 0..3 {
                data[c * r * r + py * r + px] = (acc[c] / 4.0) as f32;
            }
        }
    }
    out
}

/// Planar [3,R,R] float frame to interleaved 8-bit RGB.
pub fn quantize_rgb8(frame: &Tensor<f32>) -> Vec<u8> {
    let r = frame.dim(1);
    let d = frame.data();
    let mut out = Vec::with_capacity(3 * r * r);
    for p in 0..r * r {
        for c in 0..3 {
            out.push((d[c * r * r + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Interleaved 8-bit RGB to a planar [3,R,R] float frame in [0,1].
pub fn dequantize_rgb8(bytes: &[u8], resolution: usize) -> Result<Tensor<f32>> {
    let r = resolution;
    if bytes.len() != 3 * r * r {
        return Err(Error::InvalidArgument {
            op: "dequantize_rgb8",
            detail: format!("expected {} bytes for resolution {r}, got {}", 3 * r * r, bytes.len()),
        });
    }
    let mut t = Tensor::zeros(&[3, r, r]);
    let d = t.data_mut();
    for p in 0..r * r {
        for c in 0..3 {
            d[c * r * r + p] = bytes[p * 3 + c] as f32 / 255.0;
        }
    }
    Ok(t)
}

/// On-disk image encoding for dataset frames.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Ppm => "ppm",
        }
    }
}

impl FromStr for ImageFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png" => Ok(ImageFormat::Png),
            "ppm" => Ok(ImageFormat::Ppm),
            other => Err(Error::InvalidArgument {
                op: "image_format",
                detail: format!("unknown format {other:?}, expected png or ppm"),
            }),
        }
    }
}

fn encode_png(rgb: &[u8], resolution: usize) -> Result<Vec<u8>> {
    use image::{codecs::png::PngEncoder, ExtendedColorType, ImageEncoder};
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(rgb, resolution as u32, resolution as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Numerical(format!("png encode failed: {e}")))?;
    Ok(buf)
}

/// Binary PPM (P6) with the same pixel content as the PNG writer.
fn encode_ppm(rgb: &[u8], resolution: usize) -> Vec<u8> {
    let mut buf = format!("P6\n{resolution} {resolution}\n255\n").into_bytes();
    buf.extend_from_slice(rgb);
    buf
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, usize)> {
    let err = |detail: String| Error::Format { path: path.to_path_buf(), detail };
    let mut reader = BufReader::new(bytes);
    let mut header = String::new();
    for _ in 0..3 {
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| err(format!("unreadable ppm header: {e}")))?;
        header.push_str(&line);
    }
    let mut fields = header.split_ascii_whitespace();
    if fields.next() != Some("P6") {
        return Err(err("not a binary ppm (missing P6 magic)".into()));
    }
    let w: usize = fields
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| err("bad ppm width".into()))?;
    let h: usize = fields
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| err("bad ppm height".into()))?;
    if w != h {
        return Err(err(format!("frames must be square, got {w}x{h}")));
    }
    if fields.next() != Some("255") {
        return Err(err("ppm maxval must be 255".into()));
    }
    let mut rgb = vec![0u8; 3 * w * h];
    reader
        .read_exact(&mut rgb)
        .map_err(|e| err(format!("short ppm pixel data: {e}")))?;
    Ok((rgb, w))
}

/// Loads one frame (PNG or PPM by extension) as planar [3,R,R] in [0,1].
pub fn load_frame(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (rgb, res) = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => decode_ppm(&bytes, path)?,
        _ => {
            let img = image::load_from_memory(&bytes)
                .map_err(|e| Error::Format { path: path.to_path_buf(), detail: format!("{e}") })?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            if w != h {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("frames must be square, got {w}x{h}"),
                });
            }
            (img.into_raw(), w)
        }
    };
    dequantize_rgb8(&rgb, res)
}

/// Saves one planar [3,R,R] frame in [0,1] (PNG, or PPM for a .ppm path).
pub fn save_frame(frame: &Tensor<f32>, path: &Path) -> Result<()> {
    if frame.rank() != 3 || frame.dim(0) != 3 || frame.dim(1) != frame.dim(2) {
        return Err(Error::Shape {
            op: "save_frame",
            detail: format!("expected [3, R, R], got {:?}", frame.shape()),
        });
    }
    let rgb = quantize_rgb8(frame);
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => encode_ppm(&rgb, frame.dim(1)),
        _ => encode_png(&rgb, frame.dim(1))?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// One line of `meta.jsonl`: the ground truth for a consecutive frame pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairMeta {
    pub index: usize,
    pub scene_t: Vec<Shape>,
    pub scene_t1: Vec<Shape>,
    pub resolution: usize,
}

fn frame_path(dir: &Path, index: usize, side: char, ext: &str) -> PathBuf {
    dir.join("pairs").join(format!("{index:06}_{side}.{ext}"))
}

/// Generates `n_pairs` scene pairs under `out_dir`: `pairs/NNNNNN_a.<ext>`,
/// `pairs/NNNNNN_b.<ext>` and one `meta.jsonl` line per pair. Content is a
/// pure function of (seed, n_pairs, resolution, format): each pair derives
/// its generator as master seed XOR a fixed domain constant XOR the pair
/// index, so worker count cannot change the dataset.
pub fn generate_dataset(
    seed: u64,
    n_pairs: usize,
    resolution: usize,
    out_dir: &Path,
    threads: usize,
    format: ImageFormat,
) -> Result<()> {
    if n_pairs == 0 {
        return Err(Error::InvalidArgument {
            op: "generate_dataset",
            detail: "n_pairs must be at least 1".into(),
        });
    }
    let pairs_dir = out_dir.join("pairs");
    fs::create_dir_all(&pairs_dir).map_err(|e| Error::io(&pairs_dir, e))?;

    let rendered: Vec<Result<(Vec<u8>, Vec<u8>, String)>> =
        parallel_map(n_pairs, threads, |index| {
            let mut rng = Rng::new(seed ^ domains::SCENE ^ index as u64);
            let scene = sample_scene(&mut rng, resolution)?;
            let next = scene.advanced();
            let enc = |frame: &Tensor<f32>| -> Result<Vec<u8>> {
                let rgb = quantize_rgb8(frame);
                match format {
                    ImageFormat::Png => encode_png(&rgb, resolution),
                    ImageFormat::Ppm => Ok(encode_ppm(&rgb, resolution)),
                }
            };
            let a = enc(&render(&scene))?;
            let b = enc(&render(&next))?;
            let meta = PairMeta {
                index,
                scene_t: scene.shapes,
                scene_t1: next.shapes,
                resolution,
            };
            let line = serde_json::to_string(&meta)
                .map_err(|e| Error::Numerical(format!("metadata serialization failed: {e}")))?;
            Ok((a, b, line))
        });

    let meta_path = out_dir.join("meta.jsonl");
    let meta_file = fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut meta_out = BufWriter::new(meta_file);
    let ext = format.extension();
    for (index, item) in rendered.into_iter().enumerate() {
        let (a, b, line) = item?;
        let pa = frame_path(out_dir, index, 'a', ext);
        fs::write(&pa, a).map_err(|e| Error::io(&pa, e))?;
        let pb = frame_path(out_dir, index, 'b', ext);
        fs::write(&pb, b).map_err(|e| Error::io(&pb, e))?;
        writeln!(meta_out, "{line}").map_err(|e| Error::io(&meta_path, e))?;
    }
    meta_out.flush().map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

/// A dataset loaded into memory: planar float frames plus ground truth.
pub struct Dataset {
    pub resolution: usize,
    pub meta: Vec<PairMeta>,
    frames_a: Vec<f32>,
    frames_b: Vec<f32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    fn frame_len(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    /// First frame of pair `i`, planar `[3,R,R]` data.
    pub fn frame_a(&self, i: usize) -> &[f32] {
        &self.frames_a[i * self.frame_len()..(i + 1) * self.frame_len()]
    }

    /// Second frame of pair `i`.
    pub fn frame_b(&self, i: usize) -> &[f32] {
        &self.frames_b[i * self.frame_len()..(i + 1) * self.frame_len()]
    }

    /// Stacks the indexed pairs into `[B,3,R,R]` tensors (first, second).
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let r = self.resolution;
        let fl = self.frame_len();
        let mut a = Tensor::zeros(&[indices.len(), 3, r, r]);
        let mut b = Tensor::zeros(&[indices.len(), 3, r, r]);
        for (row, &i) in indices.iter().enumerate() {
            a.data_mut()[row * fl..(row + 1) * fl].copy_from_slice(self.frame_a(i));
            b.data_mut()[row * fl..(row + 1) * fl].copy_from_slice(self.frame_b(i));
        }
        (a, b)
    }
}

/// Loads a dataset directory produced by [`generate_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.jsonl");
    let file = fs::File::open(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut meta = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&meta_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: PairMeta = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: meta_path.clone(),
            detail: format!("line {}: {e}", lineno + 1),
        })?;
        meta.push(m);
    }
    if meta.is_empty() {
        return Err(Error::Format { path: meta_path, detail: "no metadata records".into() });
    }
    let resolution = meta[0].resolution;
    for m in &meta {
        if m.resolution != resolution {
            return Err(Error::Format {
                path: meta_path,
                detail: format!(
                    "pair {} has resolution {}, dataset started with {resolution}",
                    m.index, m.resolution
                ),
            });
        }
    }

    let fl = 3 * resolution * resolution;
    let mut frames_a = Vec::with_capacity(meta.len() * fl);
    let mut frames_b = Vec::with_capacity(meta.len() * fl);
    for m in &meta {
        for (side, store) in [('a', &mut frames_a), ('b', &mut frames_b)] {
            let png = frame_path(dir, m.index, side, "png");
            let path = if png.exists() { png } else { frame_path(dir, m.index, side, "ppm") };
            let frame = load_frame(&path)?;
            if frame.dim(1) != resolution {
                return Err(Error::Format {
                    path,
                    detail: format!(
                        "frame resolution {} does not match metadata {resolution}",
                        frame.dim(1)
                    ),
                });
            }
            store.extend_from_slice(frame.data());
        }
    }
    Ok(Dataset { resolution, meta, frames_a, frames_b })
}
