//! Quantitative evaluation: velocity-distribution KL divergence against
//! baselines, zero-shot motion-analogy error, latent-code sparsity
//! statistics, and feature-map dumps.
//!
//! The velocity of each synthesized shape is measured by color segmentation
//! and connected-component centroids instead of optical flow: exact for this
//! color-coded world and itself testable against generator metadata.

use std::collections::BTreeMap;
use std::fmt::Write as FmtWrite;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Model;
use crate::rng::{domains, Rng};
use crate::shapes::{
    render, sample_matched_scene, sample_scene, Dataset, Scene, Shape, ShapeKind, SPEEDS,
};
use crate::tensor::Tensor;
use crate::train::{sample_prior, EmpiricalPrior, PriorMode};
use crate::util::parallel_map;

/// A pixel belongs to a shape when its color is within this L∞ distance of
/// the shape's color (well under the generator's 0.25 color-separation gap).
pub const COLOR_MATCH_TOLERANCE: f32 = 0.15;
/// A shape is "unmatched" when its largest connected component covers less
/// than this fraction of the analytic shape area.
pub const MIN_AREA_FRACTION: f64 = 0.25;
/// Velocity histograms only accumulate shapes whose measured component covers
/// at least this fraction of the analytic area in both frames. Occluded or
/// border-clipped shapes fall below it (their centroid is biased toward the
/// visible part), while anti-aliased but fully visible shapes stay above.
pub const AREA_GATE_FRACTION: f64 = 0.85;
/// A latent dimension is active when the mean of |z_mean| exceeds this.
pub const ACTIVE_DIM_THRESHOLD: f64 = 1e-2;
/// Additive smoothing applied to predicted histograms before normalization.
pub const HISTOGRAM_SMOOTHING: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Analytic shape geometry

/// Exact area in square pixels implied by [`Shape::contains_point`].
pub fn analytic_area(shape: &Shape) -> f64 {
    let s = shape.size;
    match shape.kind {
        ShapeKind::Circle => std::f64::consts::PI * s * s,
        ShapeKind::Square => 4.0 * s * s,
        // Base 2s, height 2s.
        ShapeKind::Triangle => 2.0 * s * s,
    }
}

/// Exact centroid of the filled shape in image coordinates.
pub fn analytic_centroid(shape: &Shape) -> [f64; 2] {
    match shape.kind {
        ShapeKind::Circle | ShapeKind::Square => shape.center,
        // Vertex mean of apex (cx, cy-s) and base corners (cx±s, cy+s).
        ShapeKind::Triangle => [shape.center[0], shape.center[1] + shape.size / 3.0],
    }
}

// ---------------------------------------------------------------------------
// Velocity estimation

/// Largest color-matched connected component of one shape in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeComponent {
    /// Mean of member pixel centers, in image coordinates.
    pub centroid: [f64; 2],
    /// Member pixel count.
    pub area: f64,
}

/// Per-shape measured components of a frame, aligned with `shapes`. `None`
/// means the shape was not found.
///
/// Segmentation: each pixel is assigned to the nearest shape color if that
/// distance is within [`COLOR_MATCH_TOLERANCE`] (ties to the earlier shape),
/// else to the background. Per shape, the largest 4-connected component of
/// its pixels must cover at least [`MIN_AREA_FRACTION`] of the analytic
/// area; smaller components do not count as a detection.
pub fn measure_components(
    frame: &[f32],
    resolution: usize,
    shapes: &[Shape],
) -> Vec<Option<ShapeComponent>> {
    let r = resolution;
    let rr = r * r;
    assert_eq!(frame.len(), 3 * rr, "frame length does not match resolution");
    if shapes.is_empty() {
        return Vec::new();
    }

    // Label map: index of the owning shape, or -1 for background.
    let mut labels = vec![-1i32; rr];
    for p in 0..rr {
        let rgb = [frame[p], frame[rr + p], frame[2 * rr + p]];
        let mut best = -1i32;
        let mut best_dist = f32::INFINITY;
        for (k, shape) in shapes.iter().enumerate() {
            let mut dist = 0.0f32;
            for c in 0..3 {
                dist = dist.max((rgb[c] - shape.color[c] as f32).abs());
            }
            if dist < best_dist {
                best_dist = dist;
                best = k as i32;
            }
        }
        if best_dist <= COLOR_MATCH_TOLERANCE {
            labels[p] = best;
        }
    }

    let mut visited = vec![false; rr];
    let mut stack = Vec::new();
    shapes
        .iter()
        .enumerate()
        .map(|(k, shape)| {
            visited.iter_mut().for_each(|v| *v = false);
            let mut best: Option<(usize, f64, f64)> = None; // (size, sum_x, sum_y)
            for start in 0..rr {
                if visited[start] || labels[start] != k as i32 {
                    continue;
                }
                let mut size = 0usize;
                let (mut sx, mut sy) = (0.0f64, 0.0f64);
                stack.push(start);
                visited[start] = true;
                while let Some(p) = stack.pop() {
                    let (x, y) = (p % r, p / r);
                    size += 1;
                    sx += x as f64;
                    sy += y as f64;
                    let mut push = |q: usize| {
                        if !visited[q] && labels[q] == k as i32 {
                            visited[q] = true;
                            stack.push(q);
                        }
                    };
                    if x > 0 {
                        push(p - 1);
                    }
                    if x + 1 < r {
                        push(p + 1);
                    }
                    if y > 0 {
                        push(p - r);
                    }
                    if y + 1 < r {
                        push(p + r);
                    }
                }
                if best.map_or(true, |(bs, _, _)| size > bs) {
                    best = Some((size, sx, sy));
                }
            }
            let (size, sx, sy) = best?;
            if (size as f64) < MIN_AREA_FRACTION * analytic_area(shape) {
                return None;
            }
            // Pixel (x, y) covers [x, x+1) x [y, y+1); its center is +0.5.
            Some(ShapeComponent {
                centroid: [sx / size as f64 + 0.5, sy / size as f64 + 0.5],
                area: size as f64,
            })
        })
        .collect()
}

/// Per-shape component centroids of a frame, aligned with `shapes`.
pub fn measure_shape_centroids(
    frame: &[f32],
    resolution: usize,
    shapes: &[Shape],
) -> Vec<Option<[f64; 2]>> {
    measure_components(frame, resolution, shapes)
        .into_iter()
        .map(|c| c.map(|c| c.centroid))
        .collect()
}

/// Per-shape velocity estimates for one synthesized frame, aligned with
/// `shapes` (the scene at time t). `None` means the shape could not be
/// matched in both frames.
///
/// The estimate is the displacement between the shape's measured component
/// centroid in `j_hat` and in `i_frame`, with both frames segmented by
/// [`measure_shape_centroids`]. Measuring the reference centroid in I (rather
/// than using the analytic one) cancels the bias that occlusion or border
/// clipping puts on both frames alike, and makes j_hat = I report exactly
/// zero; for an isolated fully visible shape the two frames' masks are exact
/// translates (speeds are integers), so the estimate is the true velocity.
pub fn estimate_velocities(
    i_frame: &[f32],
    j_hat: &[f32],
    resolution: usize,
    shapes: &[Shape],
) -> Vec<Option<[f64; 2]>> {
    let anchors = measure_shape_centroids(i_frame, resolution, shapes);
    estimate_velocities_from(&anchors, j_hat, resolution, shapes)
}

/// [`estimate_velocities`] with the I-frame centroids precomputed (they are
/// per test image, while synthesized frames vary per sample).
pub fn estimate_velocities_from(
    i_centroids: &[Option<[f64; 2]>],
    j_hat: &[f32],
    resolution: usize,
    shapes: &[Shape],
) -> Vec<Option<[f64; 2]>> {
    let moved = measure_shape_centroids(j_hat, resolution, shapes);
    i_centroids
        .iter()
        .zip(&moved)
        .map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) => Some([b[0] - a[0], b[1] - a[1]]),
            _ => None,
        })
        .collect()
}

/// Velocity of a cleanly measured shape, or `None` when either frame's
/// component misses [`AREA_GATE_FRACTION`] of the analytic area. Both the
/// law calibration and model evaluation go through this gate, so dropping
/// unreliable measurements keeps the two distributions comparable.
pub fn gated_velocity(
    anchor: &Option<ShapeComponent>,
    moved: &Option<ShapeComponent>,
    shape: &Shape,
) -> Option<[f64; 2]> {
    let (a, b) = (anchor.as_ref()?, moved.as_ref()?);
    let floor = AREA_GATE_FRACTION * analytic_area(shape);
    if a.area < floor || b.area < floor {
        return None;
    }
    Some([b.centroid[0] - a.centroid[0], b.centroid[1] - a.centroid[1]])
}

// ---------------------------------------------------------------------------
// Velocity histograms

/// Histogram bin centers: integers −4..=4 on each axis.
pub const HIST_BINS: usize = 9;
const HIST_MAX: f64 = 4.0;

/// 2D histogram over (vx, vy), bin width 1 px/frame, range [−4, 4]².
/// Weights are real-valued so exact law masses (¼ per speed option) and
/// integer sample counts share one type.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityHistogram {
    counts: Vec<f64>,
    total: f64,
}

impl Default for VelocityHistogram {
    fn default() -> Self {
        Self::new()
    }
}

impl VelocityHistogram {
    pub fn new() -> Self {
        VelocityHistogram { counts: vec![0.0; HIST_BINS * HIST_BINS], total: 0.0 }
    }

    fn bin(v: f64) -> usize {
        (v.round().clamp(-HIST_MAX, HIST_MAX) + HIST_MAX) as usize
    }

    pub fn add(&mut self, vx: f64, vy: f64, weight: f64) {
        self.counts[Self::bin(vx) * HIST_BINS + Self::bin(vy)] += weight;
        self.total += weight;
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn merge(&mut self, other: &VelocityHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    /// Exact normalized probabilities (all zeros for an empty histogram).
    pub fn probabilities(&self) -> Vec<f64> {
        if self.total <= 0.0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|c| c / self.total).collect()
    }

    /// Probabilities after additive smoothing: ε is added to every bin
    /// before normalization, so the result is strictly positive and sums to
    /// 1 within 1e-9.
    pub fn smoothed_probabilities(&self) -> Vec<f64> {
        let denom = self.total + HISTOGRAM_SMOOTHING * self.counts.len() as f64;
        self.counts.iter().map(|c| (c + HISTOGRAM_SMOOTHING) / denom).collect()
    }
}

/// KL(p ‖ q) for two probability vectors; bins with p = 0 contribute 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum();
    kl.max(0.0)
}

/// KL(ground truth ‖ prediction) with smoothing on the prediction only.
pub fn histogram_kl(gt: &VelocityHistogram, pred: &VelocityHistogram) -> f64 {
    kl_divergence(&gt.probabilities(), &pred.smoothed_probabilities())
}

/// The generator's velocity law for one shape kind: the four equally likely
/// (vx, vy) assignments. (A triangle's motion set is the same whether or not
/// it is coupled to a circle; coupling only correlates the joint draw.)
pub fn velocity_law(kind: ShapeKind) -> [[f64; 2]; 4] {
    let mut out = [[0.0; 2]; 4];
    for (i, &s) in SPEEDS.iter().enumerate() {
        out[i] = match kind {
            ShapeKind::Circle => [0.0, s],
            ShapeKind::Square => [s, 0.0],
            ShapeKind::Triangle => [s, s],
        };
    }
    out
}

// ---------------------------------------------------------------------------
// KL evaluation

/// Per-kind KL(p_gt ‖ p_pred) plus the circle–triangle coupling column:
/// `circle_triangle` is KL over the joint (circle vy, triangle vy) histogram
/// on scenes containing both kinds, measuring whether the predictions
/// reproduce the triangle-copies-circle correlation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub circle: f64,
    pub square: f64,
    pub triangle: f64,
    pub circle_triangle: f64,
}

/// How future frames are produced for a test image.
pub enum FramePredictor<'a> {
    /// The trained model: latent codes drawn from the prior, one forward
    /// pass per sample batch.
    Model {
        model: &'a Model<f32>,
        prior: Option<&'a EmpiricalPrior>,
        prior_mode: PriorMode,
    },
    /// Nearest-neighbor motion transfer: pick uniformly among the 10 closest
    /// training frames (pixel L2 on I) and add that pair's difference image.
    FlowTransfer { train: &'a Dataset },
    /// The dataset's true next frame (measurement-pipeline calibration).
    GroundTruth,
}

/// The number of nearest neighbors the flow-transfer baseline draws from.
pub const FLOW_NEIGHBORS: usize = 10;

/// Synthesizes `n_samples` future frames (flat [3,R,R] buffers) for one test
/// image under the given predictor.
pub fn predict_frames(
    predictor: &FramePredictor,
    test: &Dataset,
    index: usize,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<f32>>> {
    let r = test.resolution;
    let frame_len = 3 * r * r;
    let image = test.frame_a(index);
    match predictor {
        FramePredictor::GroundTruth => Ok(vec![test.frame_b(index).to_vec(); n_samples]),
        FramePredictor::FlowTransfer { train } => {
            if train.is_empty() {
                return Err(Error::InvalidArgument {
                    op: "flow_baseline",
                    detail: "training set is empty".into(),
                });
            }
            let mut dists: Vec<(f64, usize)> = (0..train.len())
                .map(|j| {
                    let t = train.frame_a(j);
                    let d: f64 = image
                        .iter()
                        .zip(t)
                        .map(|(&a, &b)| {
                            let d = (a - b) as f64;
                            d * d
                        })
                        .sum();
                    (d, j)
                })
                .collect();
            let k = FLOW_NEIGHBORS.min(dists.len());
            dists.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
            let mut neighbors: Vec<usize> = dists[..k].iter().map(|&(_, j)| j).collect();
            neighbors.sort_unstable();
            Ok((0..n_samples)
                .map(|_| {
                    let j = neighbors[rng.below(neighbors.len())];
                    let (na, nb) = (train.frame_a(j), train.frame_b(j));
                    (0..frame_len)
                        .map(|p| (image[p] + nb[p] - na[p]).clamp(0.0, 1.0))
                        .collect()
                })
                .collect())
        }
        FramePredictor::Model { model, prior, prior_mode } => {
            let d = model.latent_dim();
            let mut batch = Vec::with_capacity(n_samples * frame_len);
            for _ in 0..n_samples {
                batch.extend_from_slice(image);
            }
            let images = Tensor::new(vec![n_samples, 3, r, r], batch)?;
            let mut z = Vec::with_capacity(n_samples * d);
            for _ in 0..n_samples {
                z.extend(sample_prior(*prior, d, rng, *prior_mode)?);
            }
            let z = Tensor::new(vec![n_samples, d], z)?;
            let out = model.forward_sample(&images, &z)?;
            let data = out.into_data();
            Ok((0..n_samples).map(|s| data[s * frame_len..(s + 1) * frame_len].to_vec()).collect())
        }
    }
}

struct KindHists {
    per_kind: [VelocityHistogram; 3],
    joint: VelocityHistogram,
}

impl KindHists {
    fn new() -> Self {
        KindHists {
            per_kind: [VelocityHistogram::new(), VelocityHistogram::new(), VelocityHistogram::new()],
            joint: VelocityHistogram::new(),
        }
    }

    fn merge(&mut self, other: &KindHists) {
        for (a, b) in self.per_kind.iter_mut().zip(&other.per_kind) {
            a.merge(b);
        }
        self.joint.merge(&other.joint);
    }
}

fn kind_slot(kind: ShapeKind) -> usize {
    match kind {
        ShapeKind::Circle => 0,
        ShapeKind::Square => 1,
        ShapeKind::Triangle => 2,
    }
}

/// Ground-truth histograms: the generator's law evaluated on the test
/// scenes — ¼ mass per speed option per present shape, and for scenes with
/// both a circle and a triangle, ¼ mass on each diagonal joint cell.
fn ground_truth_hists(test: &Dataset) -> KindHists {
    let mut h = KindHists::new();
    for meta in &test.meta {
        for shape in &meta.scene_t {
            for v in velocity_law(shape.kind) {
                h.per_kind[kind_slot(shape.kind)].add(v[0], v[1], 0.25);
            }
        }
        let has_both = [ShapeKind::Circle, ShapeKind::Triangle]
            .iter()
            .all(|&k| meta.scene_t.iter().any(|s| s.kind == k));
        if has_both {
            for &s in &SPEEDS {
                h.joint.add(s, s, 0.25);
            }
        }
    }
    h
}

/// Samples futures for every test image, measures per-shape velocities, and
/// returns per-kind KL(p_gt ‖ p_pred). Sampling parallelizes across test
/// images with per-image derived seeds; histogram reduction is
/// order-independent, so the result does not depend on `threads`.
pub fn eval_kl(
    test: &Dataset,
    predictor: &FramePredictor,
    n_samples: usize,
    seed: u64,
    threads: usize,
) -> Result<KlRow> {
    if test.is_empty() {
        return Err(Error::InvalidArgument { op: "eval_kl", detail: "test set is empty".into() });
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument {
            op: "eval_kl",
            detail: "need at least one sample per image".into(),
        });
    }
    let per_image: Vec<Result<KindHists>> = parallel_map(test.len(), threads, |i| {
        let mut rng = Rng::new(seed ^ domains::EVAL ^ i as u64);
        let frames = predict_frames(predictor, test, i, n_samples, &mut rng)?;
        let shapes = &test.meta[i].scene_t;
        let anchors = measure_components(test.frame_a(i), test.resolution, shapes);
        let mut h = KindHists::new();
        for frame in &frames {
            let moved = measure_components(frame, test.resolution, shapes);
            let mut circle_vy = None;
            let mut triangle_vy = None;
            for (si, shape) in shapes.iter().enumerate() {
                let Some(v) = gated_velocity(&anchors[si], &moved[si], shape) else {
                    continue;
                };
                h.per_kind[kind_slot(shape.kind)].add(v[0], v[1], 1.0);
                match shape.kind {
                    ShapeKind::Circle => circle_vy = Some(v[1]),
                    ShapeKind::Triangle => triangle_vy = Some(v[1]),
                    ShapeKind::Square => {}
                }
            }
            if let (Some(c), Some(t)) = (circle_vy, triangle_vy) {
                h.joint.add(c, t, 1.0);
            }
        }
        Ok(h)
    });
    let mut pred = KindHists::new();
    for h in per_image {
        pred.merge(&h?);
    }
    let gt = ground_truth_hists(test);
    Ok(KlRow {
        circle: histogram_kl(&gt.per_kind[0], &pred.per_kind[0]),
        square: histogram_kl(&gt.per_kind[1], &pred.per_kind[1]),
        triangle: histogram_kl(&gt.per_kind[2], &pred.per_kind[2]),
        circle_triangle: histogram_kl(&gt.joint, &pred.joint),
    })
}

// ---------------------------------------------------------------------------
// Motion analogies

/// One analogy instance: B−A and D_gt−C realize the same velocity
/// assignment on scenes with the same shape kinds but independent geometry
/// and colors.
pub struct AnalogyQuadruple {
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
    pub c: Tensor<f32>,
    pub d_gt: Tensor<f32>,
    pub scene_a: Scene,
    pub scene_c: Scene,
}

/// Generates analogy quadruples; each index is reproducible on its own.
pub fn generate_analogy_set(
    seed: u64,
    count: usize,
    resolution: usize,
    threads: usize,
) -> Result<Vec<AnalogyQuadruple>> {
    let r = resolution;
    // Rendered frames get a leading batch axis so they feed the model as-is.
    let batched = |scene: &Scene| render(scene).reshaped(vec![1, 3, r, r]);
    parallel_map(count, threads, |i| {
        let mut rng = Rng::new(seed ^ domains::EVAL ^ i as u64);
        let scene_a = sample_scene(&mut rng, resolution)?;
        let scene_c = sample_matched_scene(&mut rng, &scene_a)?;
        Ok(AnalogyQuadruple {
            a: batched(&scene_a)?,
            b: batched(&scene_a.advanced())?,
            c: batched(&scene_c)?,
            d_gt: batched(&scene_c.advanced())?,
            scene_a,
            scene_c,
        })
    })
    .into_iter()
    .collect()
}

/// Mean squared pixel error in 8-bit units: mean over pixels of
/// (a − b)² × 255².
pub fn pixel_mse(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    sum / a.numel() as f64 * 255.0 * 255.0
}

/// Transfers the motion of (a, b) onto c: the posterior-mean latent code of
/// the pair, decoded against c. Deterministic (no sampling).
pub fn analogy_predict(
    model: &Model<f32>,
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    c: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let z = model.encode_motion(a, b)?;
    model.forward_sample(c, &z)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AnalogyReport {
    /// MSE of forward_sample(C, encode_motion(A, B)) against D_gt, ×255².
    pub model_mse: f64,
    /// MSE of predicting no motion (D_hat = C), ×255².
    pub copy_mse: f64,
    pub count: usize,
}

/// Evaluates motion transfer over an analogy set.
pub fn eval_analogy(
    model: &Model<f32>,
    set: &[AnalogyQuadruple],
    threads: usize,
) -> Result<AnalogyReport> {
    if set.is_empty() {
        return Err(Error::InvalidArgument {
            op: "eval_analogy",
            detail: "analogy set is empty".into(),
        });
    }
    let per_item: Vec<Result<(f64, f64)>> = parallel_map(set.len(), threads, |i| {
        let q = &set[i];
        let d_hat = analogy_predict(model, &q.a, &q.b, &q.c)?;
        Ok((pixel_mse(&d_hat, &q.d_gt), pixel_mse(&q.c, &q.d_gt)))
    });
    let (mut model_mse, mut copy_mse) = (0.0, 0.0);
    for r in per_item {
        let (m, c) = r?;
        model_mse += m;
        copy_mse += c;
    }
    let n = set.len() as f64;
    Ok(AnalogyReport { model_mse: model_mse / n, copy_mse: copy_mse / n, count: set.len() })
}

/// The model's own reconstruction error on known pairs: MSE ×255² of
/// forward_sample(I, encode_motion(I, J)) against J. The floor that analogy
/// predictions are judged against.
pub fn reconstruction_mse(model: &Model<f32>, test: &Dataset, threads: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument {
            op: "reconstruction_mse",
            detail: "test set is empty".into(),
        });
    }
    let r = test.resolution;
    let per_item: Vec<Result<f64>> = parallel_map(test.len(), threads, |i| {
        let a = Tensor::new(vec![1, 3, r, r], test.frame_a(i).to_vec())?;
        let b = Tensor::new(vec![1, 3, r, r], test.frame_b(i).to_vec())?;
        let z = model.encode_motion(&a, &b)?;
        let b_hat = model.forward_sample(&a, &z)?;
        Ok(pixel_mse(&b_hat, &b))
    });
    let mut sum = 0.0;
    for v in per_item {
        sum += v?;
    }
    Ok(sum / test.len() as f64)
}

// ---------------------------------------------------------------------------
// Latent statistics

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LatentStats {
    pub latent_dim: usize,
    /// Dimensions whose mean |z_mean| over the set exceeds 1e-2.
    pub nonzero_dims: usize,
    /// Principal components needed for ≥ 95% of the z_mean variance.
    pub pca_components_95: usize,
}

/// Counts dimensions of an `[N, D]` matrix whose column mean absolute value
/// exceeds `threshold`.
pub fn count_active_dims(mu: &Tensor<f32>, threshold: f64) -> usize {
    let (n, d) = (mu.dim(0), mu.dim(1));
    let data = mu.data();
    (0..d)
        .filter(|&j| {
            let mean_abs: f64 =
                (0..n).map(|i| data[i * d + j].abs() as f64).sum::<f64>() / n as f64;
            mean_abs > threshold
        })
        .count()
}

/// Eigenvalues of a symmetric d×d matrix (row-major) by the cyclic Jacobi
/// method. Returned in descending order.
pub fn symmetric_eigenvalues(mut a: Vec<f64>, d: usize) -> Vec<f64> {
    assert_eq!(a.len(), d * d, "matrix must be d^2 entries");
    if d == 0 {
        return Vec::new();
    }
    let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..64 {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| a[p * d + q] * a[p * d + q])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[i * d + p];
                    let aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for i in 0..d {
                    let api = a[p * d + i];
                    let aqi = a[q * d + i];
                    a[p * d + i] = c * api - s * aqi;
                    a[q * d + i] = s * api + c * aqi;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eig
}

/// Principal components needed to reach 95% of total variance given a
/// descending eigenvalue spectrum; a (near-)zero-variance spectrum reports 1.
pub fn components_for_95(eigenvalues: &[f64]) -> usize {
    let total: f64 = eigenvalues.iter().map(|&v| v.max(0.0)).sum();
    if total <= 1e-12 {
        return 1;
    }
    let mut acc = 0.0;
    for (i, &v) in eigenvalues.iter().enumerate() {
        acc += v.max(0.0);
        if acc >= 0.95 * total {
            return i + 1;
        }
    }
    eigenvalues.len()
}

/// Covariance spectrum statistics of an `[N, D]` z_mean matrix.
pub fn latent_stats_from(mu: &Tensor<f32>) -> LatentStats {
    let (n, d) = (mu.dim(0), mu.dim(1));
    let data = mu.data();
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += data[i * d + j] as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for i in 0..n {
        let row = &data[i * d..(i + 1) * d];
        for j in 0..d {
            let xj = row[j] as f64 - mean[j];
            for k in j..d {
                cov[j * d + k] += xj * (row[k] as f64 - mean[k]);
            }
        }
    }
    for j in 0..d {
        for k in j..d {
            let v = cov[j * d + k] / n as f64;
            cov[j * d + k] = v;
            cov[k * d + j] = v;
        }
    }
    let eig = symmetric_eigenvalues(cov, d);
    LatentStats {
        latent_dim: d,
        nonzero_dims: count_active_dims(mu, ACTIVE_DIM_THRESHOLD),
        pca_components_95: components_for_95(&eig),
    }
}

/// Posterior-mean statistics of a trained model over a dataset.
pub fn latent_stats(model: &Model<f32>, test: &Dataset, threads: usize) -> Result<LatentStats> {
    let prior = crate::train::compute_prior(model, test, threads)?;
    Ok(latent_stats_from(&prior.mu))
}

// ---------------------------------------------------------------------------
// Feature-map dumps

fn encode_gray_png(gray: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    use image::{codecs::png::PngEncoder, ExtendedColorType, ImageEncoder};
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(gray, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Numerical(format!("png encode failed: {e}")))?;
    Ok(buf)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Min-max normalizes one channel to 8-bit grayscale (constant maps become
/// mid-gray).
fn normalize_channel(values: &[f32]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi - lo).is_finite() || hi - lo <= 0.0 {
        return vec![128; values.len()];
    }
    values.iter().map(|&v| (((v - lo) / (hi - lo)) * 255.0).round() as u8).collect()
}

/// Writes every image-encoder channel of one frame as a normalized grayscale
/// PNG plus one montage per pyramid scale; returns the written paths
/// (scales × maps_per_scale channel images + one montage per scale).
pub fn dump_features(
    model: &Model<f32>,
    image: &Tensor<f32>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let frame = match image.rank() {
        3 => Tensor::new(vec![1, 3, image.dim(1), image.dim(2)], image.data().to_vec())?,
        _ => image.clone(),
    };
    let features = model.image_features(&frame)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (si, feat) in features.iter().enumerate() {
        let scale = model.config.pyramid_scales[si];
        let maps = feat.dim(1);
        let (h, w) = (feat.dim(2), feat.dim(3));
        let mut montage = vec![255u8; h * (maps * w + maps.saturating_sub(1))];
        let montage_w = maps * w + maps.saturating_sub(1);
        for m in 0..maps {
            let chan = &feat.data()[m * h * w..(m + 1) * h * w];
            if chan.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite activation in scale {scale} map {m}"
                )));
            }
            let gray = normalize_channel(chan);
            let path = out_dir.join(format!("scale{scale}_map{m:02}.png"));
            write_bytes(&path, &encode_gray_png(&gray, w, h)?)?;
            written.push(path);
            let x0 = m * (w + 1);
            for y in 0..h {
                montage[y * montage_w + x0..y * montage_w + x0 + w]
                    .copy_from_slice(&gray[y * w..(y + 1) * w]);
            }
        }
        let path = out_dir.join(format!("scale{scale}_montage.png"));
        write_bytes(&path, &encode_gray_png(&montage, montage_w, h)?)?;
        written.push(path);
    }
    Ok(written)
}

/// For each shape kind in the scene, the strongest |Pearson correlation|
/// between any image-encoder channel and the shape's analytic mask,
/// evaluated at each channel's own grid resolution.
pub fn feature_mask_correlations(
    model: &Model<f32>,
    scene: &Scene,
) -> Result<BTreeMap<String, f64>> {
    let frame = render(scene);
    let r = scene.resolution;
    let image = Tensor::new(vec![1, 3, r, r], frame.data().to_vec())?;
    let features = model.image_features(&image)?;
    let mut out = BTreeMap::new();
    for shape in &scene.shapes {
        let mut best = 0.0f64;
        for feat in &features {
            let (maps, h, w) = (feat.dim(1), feat.dim(2), feat.dim(3));
            let step = r as f64 / w as f64;
            let mask: Vec<f64> = (0..h * w)
                .map(|p| {
                    let x = ((p % w) as f64 + 0.5) * step;
                    let y = ((p / w) as f64 + 0.5) * step;
                    if shape.contains_point(x, y) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            for m in 0..maps {
                let chan = &feat.data()[m * h * w..(m + 1) * h * w];
                let r = pearson(&mask, chan);
                if r.abs() > best.abs() {
                    best = r;
                }
            }
        }
        let key = format!("{:?}", shape.kind).to_lowercase();
        out.insert(key, best);
    }
    Ok(out)
}

fn pearson(a: &[f64], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y as f64 - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

// ---------------------------------------------------------------------------
// Report

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RunStats {
    pub wallclock_ms: u64,
    pub test_pairs: usize,
    pub samples_per_image: usize,
    pub seed: u64,
}

/// The complete evaluation output, serialized as one JSON document; the
/// matching CSV table comes from [`report_csv`].
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// Method name ("ours", "flow", "ae") → per-kind KL row.
    pub kl: BTreeMap<String, KlRow>,
    /// How the circle–triangle column is computed (joint-histogram KL).
    pub circle_triangle_interpretation: String,
    pub analogy: Option<AnalogyReport>,
    pub latent: Option<LatentStats>,
    pub runtime: RunStats,
}

pub const CIRCLE_TRIANGLE_NOTE: &str = "circle_triangle is KL(gt||pred) over the joint \
     (circle vy, triangle vy) histogram on scenes containing both kinds; it measures the \
     learned speed correlation, not a per-kind marginal";

/// CSV mirror of the KL table: one row per method, one column per kind.
pub fn report_csv(report: &EvalReport) -> String {
    let mut s = String::from("method,circle,square,triangle,circle_triangle\n");
    for (method, row) in &report.kl {
        let _ = writeln!(
            s,
            "{method},{:.6},{:.6},{:.6},{:.6}",
            row.circle, row.square, row.triangle, row.circle_triangle
        );
    }
    s
}
