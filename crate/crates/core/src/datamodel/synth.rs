//! Synthetic compositional-attribute datasets.
//!
//! Every class is a distinct subset of `K` shared attributes. Attribute `j`
//! is drawn as its own glyph (shape family and colour) inside a fixed cell of
//! a square grid, with a small per-image positional jitter, so the location
//! of each attribute in every image is known exactly.

use std::collections::HashSet;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Region, Sample, Split};
use super::semantics::SemanticsTable;
use crate::error::{Error, Result};

const MIN_CELL: usize = 8;
const MAX_ATTRIBUTES: usize = 63;
const SUBSET_RETRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub num_attributes: usize,
    pub images_per_class: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Fraction of each seen class's images held out for generalized evaluation.
    #[serde(default = "default_seen_test_fraction")]
    pub seen_test_fraction: f64,
    /// Std of Gaussian jitter applied to the {0,1} class semantics (then clamped to [0,1]).
    #[serde(default)]
    pub semantics_jitter: f64,
}

fn default_image_size() -> usize {
    64
}
fn default_channels() -> usize {
    3
}
fn default_seen_test_fraction() -> f64 {
    0.2
}

impl SynthSpec {
    pub fn new(n_seen: usize, n_unseen: usize, num_attributes: usize, images_per_class: usize) -> Self {
        SynthSpec {
            n_seen,
            n_unseen,
            num_attributes,
            images_per_class,
            image_size: default_image_size(),
            noise_std: 0.0,
            seed: 0,
            channels: default_channels(),
            seen_test_fraction: default_seen_test_fraction(),
            semantics_jitter: 0.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n_seen + self.n_unseen
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_attributes;
        let n = self.num_classes();
        if n < 2 {
            return Err(Error::Synth(format!("need at least 2 classes, got {n}")));
        }
        if self.n_seen == 0 {
            return Err(Error::Synth("need at least one seen class".into()));
        }
        // Subset exhaustion is checked first so that tiny K reports it directly.
        if k < MAX_ATTRIBUTES && (1u64 << k) - 1 < n as u64 {
            return Err(Error::Synth(format!(
                "cannot build {n} distinct non-empty attribute subsets from K = {k} attributes"
            )));
        }
        if k < 4 {
            return Err(Error::Synth(format!("need K >= 4 attributes, got {k}")));
        }
        if k > MAX_ATTRIBUTES {
            return Err(Error::Synth(format!("at most {MAX_ATTRIBUTES} attributes supported")));
        }
        if self.images_per_class == 0 {
            return Err(Error::Synth("images_per_class must be positive".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Synth("noise_std must be finite and non-negative".into()));
        }
        if !(self.semantics_jitter.is_finite() && self.semantics_jitter >= 0.0) {
            return Err(Error::Synth("semantics_jitter must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.seen_test_fraction) {
            return Err(Error::Synth("seen_test_fraction must be in [0, 1)".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Synth("channels must be 1 or 3".into()));
        }
        GlyphLayout::new(self.image_size, k)?;
        Ok(())
    }
}

/// Placement of the `K` attribute cells on the image.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphLayout {
    pub image_size: usize,
    pub grid: usize,
    pub cell: usize,
    pub margin: usize,
}

impl GlyphLayout {
    pub fn new(image_size: usize, num_attributes: usize) -> Result<Self> {
        let grid = (num_attributes as f64).sqrt().ceil() as usize;
        let cell = image_size / grid.max(1);
        if cell < MIN_CELL {
            return Err(Error::Synth(format!(
                "image_size {image_size} too small for {num_attributes} glyph cells \
                 (cell side {cell} < {MIN_CELL})"
            )));
        }
        Ok(GlyphLayout {
            image_size,
            grid,
            cell,
            margin: cell / 4,
        })
    }

    pub fn region(&self, attribute: usize) -> Region {
        Region {
            top: (attribute / self.grid) * self.cell,
            left: (attribute % self.grid) * self.cell,
            height: self.cell,
            width: self.cell,
        }
    }

    pub fn glyph_side(&self) -> usize {
        self.cell - 2 * self.margin
    }

    pub fn max_jitter(&self) -> usize {
        self.margin / 2
    }
}

/// Whether local pixel `(y, x)` of a `side`-sized glyph box is inked for `attribute`.
pub fn glyph_mask(attribute: usize, side: usize, y: usize, x: usize) -> bool {
    let t = (side / 5).max(1);
    let c = side as isize / 2;
    let (yi, xi) = (y as isize, x as isize);
    match attribute % 8 {
        0 => true,
        1 => y < t || y >= side - t || x < t || x >= side - t,
        2 => (yi - c).unsigned_abs() < t || (xi - c).unsigned_abs() < t,
        3 => (yi - xi).unsigned_abs() < t || (yi + xi - (side as isize - 1)).unsigned_abs() < t,
        4 => (y / (side / 4).max(1)) % 2 == 0,
        5 => (x / (side / 4).max(1)) % 2 == 0,
        6 => ((y / (side / 4).max(1)) + (x / (side / 4).max(1))) % 2 == 0,
        _ => ((yi - c).abs() + (xi - c).abs()) as usize <= side / 2,
    }
}

/// Colour of attribute `j`, bright enough to stand out from black background.
pub fn glyph_color(attribute: usize, channels: usize) -> Vec<f64> {
    let hue = (attribute as f64 * 0.618_033_988_75).fract();
    if channels == 1 {
        return vec![0.4 + 0.6 * hue];
    }
    let h6 = hue * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    let (r, g, b) = match h6 as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].iter().map(|v| 0.25 + 0.75 * v).collect()
}

/// Draws one image: the listed attributes' glyphs at their jittered positions
/// and optional Gaussian pixel noise, clamped to [0, 1].
pub fn render(
    layout: &GlyphLayout,
    channels: usize,
    attributes: &[usize],
    offsets: &[(isize, isize)],
    noise: Option<(&mut ChaCha8Rng, f64)>,
) -> Array3<f32> {
    let n = layout.image_size;
    let mut img = Array3::<f64>::zeros((n, n, channels));
    let side = layout.glyph_side();
    for (&j, &(dy, dx)) in attributes.iter().zip(offsets) {
        let r = layout.region(j);
        let color = glyph_color(j, channels);
        let y0 = (r.top + layout.margin) as isize + dy;
        let x0 = (r.left + layout.margin) as isize + dx;
        for y in 0..side {
            for x in 0..side {
                if glyph_mask(j, side, y, x) {
                    let (py, px) = ((y0 + y as isize) as usize, (x0 + x as isize) as usize);
                    for (ch, &v) in color.iter().enumerate() {
                        img[[py, px, ch]] = v;
                    }
                }
            }
        }
    }
    if let Some((rng, std)) = noise {
        if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("finite std");
            img.iter_mut().for_each(|v| *v += dist.sample(rng));
        }
    }
    img.mapv(|v| v.clamp(0.0, 1.0) as f32)
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.num_attributes;
    let layout = GlyphLayout::new(spec.image_size, k)?;

    // Independent streams so that e.g. the noise level never moves glyphs.
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(s);
        r
    };
    let mut subset_rng = stream(0);
    let mut place_rng = stream(1);
    let mut noise_rng = stream(2);
    let mut jitter_rng = stream(3);

    let masks = class_subsets(spec, &mut subset_rng);
    let n = masks.len();
    let mut cs = Array2::<f64>::zeros((n, k));
    let jitter = (spec.semantics_jitter > 0.0).then(|| Normal::new(0.0, spec.semantics_jitter).unwrap());
    for (i, &mask) in masks.iter().enumerate() {
        for j in 0..k {
            let on = mask >> j & 1 == 1;
            let base = if on { 1.0 } else { 0.0 };
            cs[[i, j]] = match &jitter {
                // Active entries keep a positive floor so no row can vanish.
                Some(d) if on => (base - d.sample(&mut jitter_rng).abs()).clamp(0.05, 1.0),
                Some(d) => (base + d.sample(&mut jitter_rng).abs()).clamp(0.0, 1.0),
                None => base,
            };
        }
    }

    // At least one training image per seen class; at least one held-out
    // image whenever a test fraction is requested and there is room.
    let per_class = spec.images_per_class;
    let mut n_train = (per_class as f64 * (1.0 - spec.seen_test_fraction)).round() as usize;
    if spec.seen_test_fraction > 0.0 && per_class > 1 {
        n_train = n_train.min(per_class - 1);
    }
    let n_train = n_train.max(1);
    let jmax = layout.max_jitter() as isize;
    let mut samples = Vec::with_capacity(n * spec.images_per_class);
    for (class, &mask) in masks.iter().enumerate() {
        let attrs: Vec<usize> = (0..k).filter(|j| mask >> j & 1 == 1).collect();
        for r in 0..spec.images_per_class {
            let offsets: Vec<(isize, isize)> = attrs
                .iter()
                .map(|_| (place_rng.gen_range(-jmax..=jmax), place_rng.gen_range(-jmax..=jmax)))
                .collect();
            let image = render(
                &layout,
                spec.channels,
                &attrs,
                &offsets,
                Some((&mut noise_rng, spec.noise_std)),
            );
            let split = if class < spec.n_seen && r < n_train {
                Split::Train
            } else {
                Split::Test
            };
            samples.push(Sample { image, label: class, split });
        }
    }

    let ds = Dataset {
        samples,
        seen_classes: (0..spec.n_seen).collect(),
        unseen_classes: (spec.n_seen..n).collect(),
        semantics: SemanticsTable::one_hot(cs)?,
        attribute_regions: Some((0..k).map(|j| layout.region(j)).collect()),
        synth: Some(spec.clone()),
    };
    ds.validate()?;
    Ok(ds)
}

/// Distinct non-empty attribute bitmasks; the first `n_seen` are the seen classes.
/// Retries until every attribute is both present and absent among seen classes
/// (when achievable), so every unseen composition uses only trained attributes.
fn class_subsets(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let k = spec.num_attributes;
    let n = spec.num_classes();
    let mut best = Vec::new();
    for _ in 0..SUBSET_RETRIES {
        let masks = draw_distinct_masks(k, n, rng);
        let seen = &masks[..spec.n_seen];
        let covered = (0..k).all(|j| {
            let present = seen.iter().filter(|&&m| m >> j & 1 == 1).count();
            present > 0 && (spec.n_seen < 2 || present < spec.n_seen)
        });
        best = masks;
        if covered {
            break;
        }
    }
    best
}

fn draw_distinct_masks(k: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let universe = (1u64 << k) - 1;
    if (n as u64) * 2 > universe {
        let mut all: Vec<u64> = (1..=universe).collect();
        all.shuffle(rng);
        all.truncate(n);
        return all;
    }
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let m = rng.gen::<u64>() & universe;
        if m != 0 && seen.insert(m) {
            out.push(m);
        }
    }
    out
}
