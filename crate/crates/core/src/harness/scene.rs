use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::tensor::Matrix;

/// Base RGB per class: floor, walls, then up to three blobs.
const PALETTE: [[f64; 3]; 5] =
    [[0.80, 0.70, 0.50], [0.55, 0.55, 0.95], [0.95, 0.20, 0.20], [0.20, 0.85, 0.30], [0.15, 0.25, 0.60]];

/// Room with a floor (class 0), two walls at `x = 0` and `y = 0` (class 1)
/// and ellipsoid blobs (classes 2, 3, …) floating above the floor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneRecipe {
    pub seed: u64,
    pub points: usize,
    /// 1 to 3.
    pub blobs: usize,
    /// Room extent in meters along x, y, z; the room spans `[0, extent]`.
    pub room: [f64; 3],
    /// Fraction of points per class, `2 + blobs` entries summing to 1.
    pub proportions: Vec<f64>,
    /// Half-width of the uniform color perturbation.
    pub color_noise: f64,
    /// Gap in meters between the floor's edge and the walls, so floor and
    /// wall points do not share voxels.
    pub floor_margin: f64,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        Self {
            seed: 0,
            points: 2000,
            blobs: 2,
            room: [1.6, 1.6, 1.2],
            proportions: vec![0.35, 0.35, 0.15, 0.15],
            color_noise: 0.05,
            floor_margin: 0.2,
        }
    }
}

impl SceneRecipe {
    pub fn num_classes(&self) -> usize {
        2 + self.blobs
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.blobs) {
            return bad(format!("1 to 3 blobs supported, got {}", self.blobs));
        }
        if self.proportions.len() != self.num_classes() {
            return bad(format!("{} proportions for {} classes", self.proportions.len(), self.num_classes()));
        }
        if self.proportions.iter().any(|&p| !(p > 0.0)) || (self.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("proportions must be positive and sum to 1".into());
        }
        if self.room.iter().any(|&r| !(r >= 1.0 && r.is_finite())) {
            return bad("room extents must be at least 1 m".into());
        }
        if !(0.0..0.15).contains(&self.color_noise) {
            return bad("color_noise must lie in [0, 0.15)".into());
        }
        if !(0.0..0.5).contains(&self.floor_margin) {
            return bad("floor_margin must lie in [0, 0.5)".into());
        }
        if self.points < self.num_classes() {
            return bad(format!("{} points cannot cover {} classes", self.points, self.num_classes()));
        }
        Ok(())
    }

    /// Exact point count per class by largest remainder; ties go to the lower class.
    pub fn class_counts(&self) -> Vec<usize> {
        let n = self.points as f64;
        let mut counts: Vec<usize> = self.proportions.iter().map(|p| (p * n).floor() as usize).collect();
        let mut rest: Vec<(usize, f64)> =
            self.proportions.iter().enumerate().map(|(c, p)| (c, p * n - (p * n).floor())).collect();
        rest.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let missing = self.points - counts.iter().sum::<usize>();
        for &(c, _) in rest.iter().take(missing) {
            counts[c] += 1;
        }
        counts
    }
}

struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
}

fn place_blobs(recipe: &SceneRecipe, rng: &mut ChaCha8Rng) -> Result<Vec<Blob>> {
    const CLEARANCE: f64 = 0.15;
    let mut blobs: Vec<Blob> = Vec::new();
    for _ in 0..10_000 {
        if blobs.len() == recipe.blobs {
            break;
        }
        let radii = [rng.random_range(0.15..0.3), rng.random_range(0.15..0.3), rng.random_range(0.15..0.3)];
        let mut center = [0.0; 3];
        for a in 0..3 {
            let lo = radii[a] + CLEARANCE;
            let hi = recipe.room[a] - radii[a] - if a == 2 { 0.0 } else { CLEARANCE };
            center[a] = rng.random_range(lo..hi);
        }
        let rmax = |b: &[f64; 3]| b.iter().copied().fold(0.0, f64::max);
        let clear = blobs.iter().all(|b| {
            let d = (0..3).map(|a| (b.center[a] - center[a]).powi(2)).sum::<f64>().sqrt();
            d > rmax(&b.radii) + rmax(&radii) + CLEARANCE
        });
        if clear {
            blobs.push(Blob { center, radii });
        }
    }
    if blobs.len() < recipe.blobs {
        return Err(Error::Config(format!("could not fit {} blobs into the room", recipe.blobs)));
    }
    Ok(blobs)
}

/// Area-uniform sample on an ellipsoid surface by rejection on the
/// sphere-to-ellipsoid area element.
fn ellipsoid_point(b: &Blob, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let [ra, rb, rc] = b.radii;
    let gmax = (rb * rc).max(ra * rc).max(ra * rb);
    loop {
        let v: [f64; 3] = [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm < 1e-12 {
            continue;
        }
        let u = [v[0] / norm, v[1] / norm, v[2] / norm];
        let g = ((rb * rc * u[0]).powi(2) + (ra * rc * u[1]).powi(2) + (ra * rb * u[2]).powi(2)).sqrt();
        if rng.random::<f64>() * gmax <= g {
            return [b.center[0] + ra * u[0], b.center[1] + rb * u[1], b.center[2] + rc * u[2]];
        }
    }
}

/// Deterministic labeled scene with RGB features in `[0, 1]`.
pub fn gen_scene(recipe: &SceneRecipe) -> Result<PointCloud<f64>> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let [lx, ly, lz] = recipe.room;
    let blobs = place_blobs(recipe, &mut rng)?;
    let counts = recipe.class_counts();

    let mut positions = Vec::with_capacity(recipe.points);
    let mut labels = Vec::with_capacity(recipe.points);
    let wall_x_share = ly / (lx + ly);
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let p = match class {
                0 => [rng.random_range(recipe.floor_margin..=lx), rng.random_range(recipe.floor_margin..=ly), 0.0],
                1 if rng.random::<f64>() < wall_x_share => [0.0, rng.random_range(0.0..=ly), rng.random_range(0.0..=lz)],
                1 => [rng.random_range(0.0..=lx), 0.0, rng.random_range(0.0..=lz)],
                c => ellipsoid_point(&blobs[c - 2], &mut rng),
            };
            positions.push(p);
            labels.push(class as i64);
        }
    }
    let noise = recipe.color_noise;
    let features = Matrix::from_fn(recipe.points, 3, |i, ch| {
        let base = PALETTE[labels[i] as usize][ch];
        let jitter = if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
        (base + jitter).clamp(0.0, 1.0)
    });
    PointCloud::new(positions, features, Some(labels))
}
