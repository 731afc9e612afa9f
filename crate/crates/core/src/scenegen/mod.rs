//! Synthetic counting scenes with exact ground truth, and the partial
//! supervision views (LC annotations, RLC category splits) derived from it.
//!
//! Category ids are 0-based throughout the crate.

mod annotate;
pub(crate) mod io;

pub use annotate::{annotate_lc, make_rlc_split, CountLabel, LcAnnotation, RlcSplit};
pub use io::{dataset_hash, export_ppm, load_dataset, save_dataset, FORMAT_VERSION, RNG_ALGORITHM};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Rejection-sampling attempts per glyph before the placement of a sample
/// is restarted.
pub const ATTEMPTS_PER_GLYPH: usize = 1000;
/// Placement restarts per sample before generation gives up.
pub const PLACEMENT_RESTARTS: usize = 20;
/// Restarts with the same counts before the counts are redrawn.
pub const RESTARTS_PER_DRAW: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlyphShape {
    Square,
    Disc,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub shape: GlyphShape,
    pub color: [f32; 3],
}

impl Glyph {
    /// Whether offset `(dr, dc)` from the center is covered by a glyph of
    /// the given radius.
    pub fn covers(&self, dr: i32, dc: i32, radius: i32) -> bool {
        if dr.abs() > radius || dc.abs() > radius {
            return false;
        }
        match self.shape {
            GlyphShape::Square => true,
            GlyphShape::Disc => dr * dr + dc * dc <= radius * radius,
            // apex up, base on the bottom row
            GlyphShape::Triangle => dc.abs() <= (dr + radius + 1) / 2,
        }
    }
}

/// Glyph table with `n` pairwise-distinct colors: evenly spaced hues at full
/// saturation, shapes cycling square/disc/triangle.
pub fn default_glyphs(n: usize) -> Vec<Glyph> {
    const SHAPES: [GlyphShape; 3] = [GlyphShape::Square, GlyphShape::Disc, GlyphShape::Triangle];
    (0..n)
        .map(|c| Glyph {
            shape: SHAPES[c % 3],
            color: hue_to_rgb(c as f32 / n as f32),
        })
        .collect()
}

fn hue_to_rgb(h: f32) -> [f32; 3] {
    let f = |n: f32| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub num_categories: usize,
    pub image_size: usize,
    pub max_count: u32,
    pub zero_probability: f64,
    pub glyphs: Vec<Glyph>,
    pub glyph_radius: u32,
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_categories: 12,
            image_size: 64,
            max_count: 8,
            zero_probability: 0.5,
            glyphs: default_glyphs(12),
            glyph_radius: 2,
            min_separation: 7.5,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| Err(Error::format(field, detail));
        if self.num_categories < 2 {
            return bad("num_categories", format!("{} < 2", self.num_categories));
        }
        if self.image_size < 32 {
            return bad("image_size", format!("{} < 32", self.image_size));
        }
        if self.max_count < 1 {
            return bad("max_count", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.zero_probability) {
            return bad("zero_probability", format!("{} outside [0, 1]", self.zero_probability));
        }
        if self.glyphs.len() != self.num_categories {
            return bad(
                "glyphs",
                format!("{} glyphs for {} categories", self.glyphs.len(), self.num_categories),
            );
        }
        for (i, a) in self.glyphs.iter().enumerate() {
            if a.color.iter().any(|v| !(0.0..=1.0).contains(v)) || a.color == [0.0; 3] {
                return bad("glyphs", format!("glyph {i} color must be in [0,1] and not black"));
            }
            if let Some(j) = self.glyphs[..i].iter().position(|b| b.color == a.color) {
                return bad("glyphs", format!("glyphs {j} and {i} share a color"));
            }
        }
        let extent = 2 * self.glyph_radius as usize + 1;
        if extent >= self.image_size {
            return bad("glyph_radius", format!("{} too large for the image", self.glyph_radius));
        }
        // Integer centers at Euclidean distance >= s must be at least
        // 2R + 2 apart in Chebyshev distance so glyphs never touch.
        let needed = 2.0 * (extent as f64).powi(2);
        if self.min_separation.powi(2) <= needed {
            return bad(
                "min_separation",
                format!(
                    "{} lets glyphs of radius {} touch; need > {:.3}",
                    self.min_separation,
                    self.glyph_radius,
                    needed.sqrt()
                ),
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[3, image_size, image_size]`, values in `[0, 1]`.
    pub image: Tensor,
    pub gt_counts: Vec<u32>,
    /// Per category, `(row, col)` instance centers.
    pub gt_points: Vec<Vec<(u32, u32)>>,
}

impl SceneSample {
    pub fn num_categories(&self) -> usize {
        self.gt_counts.len()
    }

    pub fn total_count(&self) -> u32 {
        self.gt_counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn place(rng: &mut ChaCha8Rng, spec: &SceneSpec, counts: &[u32]) -> Option<Vec<Vec<(u32, u32)>>> {
    let r = spec.glyph_radius;
    let hi = spec.image_size as u32 - 1 - r;
    let min_d2 = spec.min_separation * spec.min_separation;
    let mut placed: Vec<(u32, u32)> = Vec::new();
    let mut points = vec![Vec::new(); counts.len()];
    for (c, &k) in counts.iter().enumerate() {
        for _ in 0..k {
            let mut found = None;
            for _ in 0..ATTEMPTS_PER_GLYPH {
                let p = (rng.random_range(r..=hi), rng.random_range(r..=hi));
                let clear = placed.iter().all(|q| {
                    let dr = p.0 as f64 - q.0 as f64;
                    let dc = p.1 as f64 - q.1 as f64;
                    dr * dr + dc * dc >= min_d2
                });
                if clear {
                    found = Some(p);
                    break;
                }
            }
            let p = found?;
            placed.push(p);
            points[c].push(p);
        }
    }
    Some(points)
}

fn render(spec: &SceneSpec, points: &[Vec<(u32, u32)>]) -> Tensor {
    let s = spec.image_size;
    let r = spec.glyph_radius as i32;
    let mut img = vec![0.0f32; 3 * s * s];
    for (glyph, pts) in spec.glyphs.iter().zip(points) {
        for &(pr, pc) in pts {
            for dr in -r..=r {
                for dc in -r..=r {
                    if !glyph.covers(dr, dc, r) {
                        continue;
                    }
                    let (y, x) = ((pr as i32 + dr) as usize, (pc as i32 + dc) as usize);
                    for ch in 0..3 {
                        img[(ch * s + y) * s + x] = glyph.color[ch];
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, s, s], img).expect("image shape")
}

fn draw_counts(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Vec<u32> {
    (0..spec.num_categories)
        .map(|_| {
            if rng.random_bool(spec.zero_probability) {
                0
            } else {
                rng.random_range(1..=spec.max_count)
            }
        })
        .collect()
}

/// Draws `n_samples` scenes. Counts per category are i.i.d.: zero with
/// probability `zero_probability`, otherwise uniform on `[1, max_count]`.
///
/// Placement is rejection sampling. A sample whose glyphs cannot be placed
/// after [`RESTARTS_PER_DRAW`] restarts has its counts redrawn, which trims
/// totals near the packing limit of the image.
pub fn generate_dataset(spec: &SceneSpec, n_samples: usize) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(n_samples);
    for index in 0..n_samples {
        let mut counts = Vec::new();
        let mut points = None;
        for restart in 0..PLACEMENT_RESTARTS {
            if restart % RESTARTS_PER_DRAW == 0 {
                counts = draw_counts(&mut rng, spec);
            }
            points = place(&mut rng, spec, &counts);
            if points.is_some() {
                break;
            }
        }
        let points = points.ok_or(Error::Placement {
            sample: index,
            attempts: PLACEMENT_RESTARTS * ATTEMPTS_PER_GLYPH,
        })?;
        samples.push(SceneSample {
            image: render(spec, &points),
            gt_counts: counts,
            gt_points: points,
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}
