//! Synthetic crowd scenes and the three annotation protocols.
//!
//! Scenes come from a Poisson-cluster (Thomas) process: parent centers are
//! Poisson over the grid, each parent spawns a Poisson number of heads with
//! Gaussian offsets of width `cluster_spread`. That gives the local density
//! variation crowd images exhibit. The intensity grid is the sum of
//! unit-mass Gaussian splats (width `render_sigma`) truncated at the grid
//! borders.
//!
//! Everything is a pure function of (inputs, seed) via ChaCha streams, so
//! scene sets are replayable and trivially parallelizable.

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::geometry::{AnnotationSet, Point, Protocol, Scene};
use crate::{Error, Result};

/// Mean heads per cluster of the parent/offspring process.
const OFFSPRING_MEAN: f64 = 4.0;

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Mean total head count (lambda of the cluster process).
    pub expected_count: f64,
    /// Gaussian spread of heads around their cluster center, grid units.
    pub cluster_spread: f64,
    /// Width of the rendered unit-mass Gaussian splat per head, grid units.
    pub render_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("scene dimensions must be positive"));
        }
        if !(self.expected_count > 0.0) {
            return Err(Error::config(format!(
                "expected_count {} must be positive",
                self.expected_count
            )));
        }
        if !(self.cluster_spread >= 0.0) {
            return Err(Error::config("cluster_spread must be non-negative"));
        }
        if !(self.render_sigma > 0.0) {
            return Err(Error::config("render_sigma must be positive"));
        }
        Ok(())
    }
}

/// Gaussian ratio disturbance, in percentage points, clipped by the 3-sigma
/// rule. `N(0, 11)` on an 80% base ratio realizes ratios in [70%, 90%]
/// because `3 * sqrt(11) ~ 10`.
#[derive(Debug, Clone, Copy)]
pub struct DisturbanceSpec {
    /// Variance in percentage-points squared.
    pub variance: f64,
}

impl DisturbanceSpec {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance >= 0.0) {
            return Err(Error::config(format!("variance {variance} must be >= 0")));
        }
        Ok(DisturbanceSpec { variance })
    }

    /// Half-width of the clipped disturbance, in percentage points.
    pub fn clip_pp(&self) -> f64 {
        3.0 * self.variance.sqrt()
    }
}

/// Renders head points as unit-mass Gaussian splats onto a grid, evaluating
/// the density at cell centers and truncating at the borders.
pub fn render_intensity(points: &[Point], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let mut grid = vec![0.0f64; height * width];
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let inv_two_sq = 1.0 / (2.0 * sigma * sigma);
    let reach = (6.0 * sigma).ceil() as isize + 1;
    for p in points {
        let cx = p.x.floor() as isize;
        let cy = p.y.floor() as isize;
        for row in (cy - reach).max(0)..=(cy + reach).min(height as isize - 1) {
            for col in (cx - reach).max(0)..=(cx + reach).min(width as isize - 1) {
                let dx = col as f64 + 0.5 - p.x;
                let dy = row as f64 + 0.5 - p.y;
                grid[row as usize * width + col as usize] +=
                    norm * (-(dx * dx + dy * dy) * inv_two_sq).exp();
            }
        }
    }
    grid
}

/// Draws a scene from the Poisson-cluster process. Deterministic per seed.
/// Empty draws are rejected and redrawn so downstream sampling always has at
/// least one head; at desk-scale counts the truncation bias is negligible.
pub fn generate_scene(cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = cfg.width as f64;
    let h = cfg.height as f64;

    let parent_rate = (cfg.expected_count / OFFSPRING_MEAN).max(f64::MIN_POSITIVE);
    let parents = Poisson::new(parent_rate).expect("validated rate");
    let offspring = Poisson::new(OFFSPRING_MEAN).expect("constant rate");
    let spread = if cfg.cluster_spread > 0.0 {
        Some(Normal::new(0.0, cfg.cluster_spread).expect("validated spread"))
    } else {
        None
    };

    let mut points = Vec::new();
    for attempt in 0.. {
        if attempt == 1000 {
            return Err(Error::config(
                "point process produced no heads in 1000 attempts",
            ));
        }
        points.clear();
        let n_parents = parents.sample(&mut rng) as usize;
        for _ in 0..n_parents {
            let px = rng.random::<f64>() * w;
            let py = rng.random::<f64>() * h;
            let n_children = offspring.sample(&mut rng) as usize;
            for _ in 0..n_children {
                let (x, y) = match spread {
                    Some(normal) => {
                        // redraw the offset until the head lands in-bounds
                        let mut xy = (px, py);
                        for _ in 0..64 {
                            let x = px + normal.sample(&mut rng);
                            let y = py + normal.sample(&mut rng);
                            if x >= 0.0 && x < w && y >= 0.0 && y < h {
                                xy = (x, y);
                                break;
                            }
                        }
                        xy
                    }
                    None => (px, py),
                };
                points.push(Point::new(x, y));
            }
        }
        if !points.is_empty() {
            break;
        }
    }

    let intensity = render_intensity(&points, cfg.height, cfg.width, cfg.render_sigma);
    Scene::new(cfg.height, cfg.width, intensity, points, cfg.seed)
}

fn annotation_count(ratio: f64, total: usize) -> usize {
    ((ratio * total as f64).round() as usize).clamp(1, total)
}

fn check_sampler_inputs(scene: &Scene, ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("annotation ratio {ratio} outside (0, 1]")));
    }
    if scene.count() == 0 {
        return Err(Error::config("scene has no ground-truth points to sample"));
    }
    Ok(())
}

/// Uniformly samples `max(1, round(ratio * N))` head points without
/// replacement across the whole scene. Selected points keep ground-truth
/// order so fixtures are stable.
pub fn sample_sparse(scene: &Scene, ratio: f64, seed: u64) -> Result<AnnotationSet> {
    check_sampler_inputs(scene, ratio)?;
    let n = scene.count();
    let nc = annotation_count(ratio, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index_sample(&mut rng, n, nc).into_vec();
    idx.sort_unstable();
    let points = idx.iter().map(|&i| scene.ground_truth()[i]).collect();
    AnnotationSet::new(scene, points, ratio, Protocol::Sparse)
}

/// Perturbs an annotation ratio by a clipped Gaussian disturbance.
///
/// The draw is `Normal(0, variance)` in percentage points, clipped to
/// `+-3 * sqrt(variance)`, and the result is kept in `[0.01, 1]` so the
/// ratio never reaches zero or exceeds one.
pub fn disturb_ratio(base_ratio: f64, spec: &DisturbanceSpec, seed: u64) -> f64 {
    debug_assert!(base_ratio > 0.0 && base_ratio <= 1.0);
    if spec.variance == 0.0 {
        return base_ratio;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, spec.variance.sqrt()).expect("validated variance");
    let clip = spec.clip_pp();
    let delta_pp = normal.sample(&mut rng).clamp(-clip, clip);
    (base_ratio + delta_pp / 100.0).clamp(0.01, 1.0)
}

/// An axis-aligned patch rectangle, half-open: `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy)]
pub struct PatchRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PatchRect {
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x0 && p.x < self.x1 && p.y >= self.y0 && p.y < self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Partial protocol: all heads inside one rectangular patch whose scale is
/// binary-searched so it holds roughly `ratio * N` points.
pub fn sample_partial(scene: &Scene, ratio: f64, seed: u64) -> Result<AnnotationSet> {
    sample_partial_with_patch(scene, ratio, seed).map(|(set, _)| set)
}

/// As [`sample_partial`], also reporting the patch rectangle.
pub fn sample_partial_with_patch(
    scene: &Scene,
    ratio: f64,
    seed: u64,
) -> Result<(AnnotationSet, PatchRect)> {
    check_sampler_inputs(scene, ratio)?;
    let n = scene.count();
    let target = annotation_count(ratio, n);
    let w = scene.width() as f64;
    let h = scene.height() as f64;
    if target == n {
        // full coverage: the patch is the whole scene
        let rect = PatchRect {
            x0: 0.0,
            y0: 0.0,
            x1: w,
            y1: h,
        };
        let set =
            AnnotationSet::new(scene, scene.ground_truth().to_vec(), ratio, Protocol::Partial)?;
        return Ok((set, rect));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _attempt in 0..100 {
        // Anchor fractions fix the patch family: as the scale grows the
        // rectangles are nested, so the in-patch count is monotone and the
        // scale can be binary-searched.
        let ax = rng.random::<f64>();
        let ay = rng.random::<f64>();
        let patch_at = |s: f64| -> PatchRect {
            let x0 = ax * w * (1.0 - s);
            let y0 = ay * h * (1.0 - s);
            PatchRect {
                x0,
                y0,
                x1: x0 + s * w,
                y1: y0 + s * h,
            }
        };
        let count_at = |s: f64| {
            let rect = patch_at(s);
            scene.ground_truth().iter().filter(|p| rect.contains(**p)).count()
        };

        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if count_at(mid) >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let rect = patch_at(hi);
        let points: Vec<Point> = scene
            .ground_truth()
            .iter()
            .copied()
            .filter(|p| rect.contains(*p))
            .collect();
        if points.is_empty() {
            continue;
        }
        let set = AnnotationSet::new(scene, points, ratio, Protocol::Partial)?;
        return Ok((set, rect));
    }
    Err(Error::config(
        "no non-empty patch found after 100 placement retries",
    ))
}

/// K-annotation protocol: at most `k` heads, uniformly sampled; all of them
/// when the scene holds fewer than `k`.
pub fn sample_kcap(scene: &Scene, k: usize, seed: u64) -> Result<AnnotationSet> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if scene.count() == 0 {
        return Err(Error::config("scene has no ground-truth points to sample"));
    }
    let n = scene.count();
    let nc = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index_sample(&mut rng, n, nc).into_vec();
    idx.sort_unstable();
    let points = idx.iter().map(|&i| scene.ground_truth()[i]).collect();
    let target_ratio = (k as f64 / n as f64).min(1.0);
    AnnotationSet::new(scene, points, target_ratio, Protocol::KCap)
}
