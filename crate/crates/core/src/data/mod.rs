//! Synthetic cardiac-like phantoms, percentile normalization, label-aware
//! patch sampling and the `MSV1` volume file format.

mod io;

pub use io::{decode_volume, encode_volume, read_volume, write_volume};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const RV: u8 = 1;
pub const MYO: u8 = 2;
pub const LV: u8 = 3;
pub const NUM_CLASSES: usize = 4;

/// Image `1 × D × H × W` with optional per-voxel labels and voxel spacing in
/// millimetres `(d, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub image: Tensor,
    pub labels: Option<Vec<u8>>,
    pub spacing: [f32; 3],
}

impl LabeledVolume {
    pub fn new(image: Tensor, labels: Option<Vec<u8>>, spacing: [f32; 3]) -> Result<Self> {
        let v = LabeledVolume { image, labels, spacing };
        v.validate()?;
        Ok(v)
    }

    fn validate(&self) -> Result<()> {
        let (c, d, h, w) = self.image.dims4()?;
        if c != 1 {
            return Err(dim_err!("volume image must have one channel, got {c}"));
        }
        if let Some(l) = &self.labels {
            if l.len() != d * h * w {
                return Err(dim_err!("{} labels for a {d}×{h}×{w} volume", l.len()));
            }
            if let Some(&bad) = l.iter().find(|&&v| usize::from(v) >= NUM_CLASSES) {
                return Err(param_err!("label {bad} out of range"));
            }
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(param_err!("spacing {:?} must be positive", self.spacing));
        }
        Ok(())
    }

    /// `(D, H, W)`.
    pub fn dims(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }

    pub fn labels(&self) -> Result<&[u8]> {
        self.labels.as_deref().ok_or_else(|| param_err!("volume has no labels"))
    }

    /// Copies out the box starting at `origin` with extent `size`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<LabeledVolume> {
        let dims = self.dims();
        if (0..3).any(|i| origin[i] + size[i] > dims[i]) {
            return Err(dim_err!("crop {origin:?}+{size:?} leaves volume {dims:?}"));
        }
        let [_, h, w] = dims;
        let mut img = Vec::with_capacity(size.iter().product());
        let mut lab = Vec::new();
        for d in origin[0]..origin[0] + size[0] {
            for y in origin[1]..origin[1] + size[1] {
                let row = (d * h + y) * w + origin[2];
                img.extend_from_slice(&self.image.data()[row..row + size[2]]);
                if let Some(l) = &self.labels {
                    lab.extend_from_slice(&l[row..row + size[2]]);
                }
            }
        }
        let image = Tensor::new([1, size[0], size[1], size[2]], img)?;
        Ok(LabeledVolume { image, labels: self.labels.as_ref().map(|_| lab), spacing: self.spacing })
    }

    /// Mirrors along `axis` (0 = D, 1 = H, 2 = W).
    pub fn flip(&self, axis: usize) -> Result<LabeledVolume> {
        if axis > 2 {
            return Err(param_err!("flip axis {axis} out of range"));
        }
        let [d, h, w] = self.dims();
        let src = |z: usize, y: usize, x: usize| match axis {
            0 => ((d - 1 - z) * h + y) * w + x,
            1 => (z * h + h - 1 - y) * w + x,
            _ => (z * h + y) * w + w - 1 - x,
        };
        self.remap([d, h, w], self.spacing, src)
    }

    /// Rotates each axial slice by 90° counter-clockwise; `H` and `W` swap.
    pub fn rot90(&self) -> Result<LabeledVolume> {
        let [d, h, w] = self.dims();
        // Output (y, x) over a w × h grid reads input (x, w - 1 - y).
        let src = |z: usize, y: usize, x: usize| (z * h + x) * w + (w - 1 - y);
        let [sd, sh, sw] = self.spacing;
        self.remap([d, w, h], [sd, sw, sh], src)
    }

    fn remap(&self, out: [usize; 3], spacing: [f32; 3], src: impl Fn(usize, usize, usize) -> usize) -> Result<Self> {
        let [d, h, w] = out;
        let mut idx = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    idx.push(src(z, y, x));
                }
            }
        }
        let img = idx.iter().map(|&i| self.image.data()[i]).collect();
        Ok(LabeledVolume {
            image: Tensor::new([1, d, h, w], img)?,
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            spacing,
        })
    }
}

/// Ranges for the nested-ellipsoid phantom. Lengths are in voxels `(d, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Maximum offset of the LV centre from the volume centre.
    pub center_jitter: [f32; 3],
    pub lv_radii: ([f32; 3], [f32; 3]),
    /// Myocardial wall thickness range added to the LV radius per axis.
    pub myo_thickness: ([f32; 3], [f32; 3]),
    pub rv_radii: ([f32; 3], [f32; 3]),
    /// RV centre offset along `W` beyond the outer myocardial wall.
    pub rv_offset: (f32, f32),
    /// Mean intensity per class `[bg, RV, Myo, LV]`.
    pub intensity: [f32; 4],
    pub noise_sigma: f32,
    pub spacing: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [16, 64, 64],
            center_jitter: [0.5, 5.0, 2.0],
            lv_radii: ([3.0, 8.0, 7.0], [4.0, 12.0, 10.0]),
            myo_thickness: ([1.5, 3.0, 3.0], [2.5, 5.0, 5.0]),
            rv_radii: ([4.0, 9.0, 5.0], [6.0, 15.0, 7.0]),
            rv_offset: (-3.0, 0.0),
            intensity: [0.08, 0.55, 0.3, 0.85],
            noise_sigma: 0.04,
            spacing: 1.5,
        }
    }
}

impl PhantomSpec {
    /// Same geometry scaled to fit `dims`, keeping the default proportions
    /// except that the wall stays at least one voxel thick. Dims much smaller
    /// than the default may not validate.
    pub fn for_dims(dims: [usize; 3]) -> Self {
        let base = PhantomSpec::default();
        let f = [0, 1, 2].map(|i| dims[i] as f32 / base.dims[i] as f32);
        let s = |v: [f32; 3]| [v[0] * f[0], v[1] * f[1], v[2] * f[2]];
        let wall = |v: [f32; 3]| s(v).map(|t| t.max(1.0));
        PhantomSpec {
            dims,
            center_jitter: s(base.center_jitter),
            lv_radii: (s(base.lv_radii.0), s(base.lv_radii.1)),
            myo_thickness: (wall(base.myo_thickness.0), wall(base.myo_thickness.1)),
            rv_radii: (s(base.rv_radii.0), s(base.rv_radii.1)),
            rv_offset: (base.rv_offset.0 * f[2], base.rv_offset.1 * f[2]),
            ..base
        }
    }

    /// Checks that every admissible draw keeps the LV and its wall, plus the
    /// RV, inside the volume.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.dims.iter().any(|&d| d < 3) {
            return bad(format!("phantom dims {:?} too small", self.dims));
        }
        let ranges = [self.lv_radii, self.rv_radii, self.myo_thickness];
        for (lo, hi) in ranges {
            if (0..3).any(|i| !(lo[i] > 0.0 && lo[i] <= hi[i])) {
                return bad(format!("radius range {lo:?}..{hi:?} is invalid"));
            }
        }
        let (t0, t1) = self.myo_thickness;
        if t0.iter().any(|&t| t < 1.0) {
            return bad(format!("myocardial thickness {t0:?} must be at least one voxel"));
        }
        if self.rv_offset.0 > self.rv_offset.1 || self.noise_sigma < 0.0 || !(self.spacing > 0.0) {
            return bad("offset range, noise or spacing invalid".into());
        }
        for i in 0..3 {
            let half = self.dims[i] as f32 / 2.0;
            let outer = self.center_jitter[i] + self.lv_radii.1[i] + t1[i];
            if outer > half - 0.5 || self.center_jitter[i] + self.rv_radii.1[i] > half - 0.5 {
                return bad(format!("structures (LV and wall reach {outer}) exceed half-dimension {half} on axis {i}"));
            }
        }
        let rv_reach = self.center_jitter[2] + self.lv_radii.1[2] + t1[2] + self.rv_offset.1 + 2.0 * self.rv_radii.1[2];
        if rv_reach > self.dims[2] as f32 / 2.0 {
            return bad(format!("RV (reach {rv_reach}) exceeds the volume along W"));
        }
        Ok(())
    }
}

fn ellipsoid(p: [f32; 3], c: [f32; 3], r: [f32; 3]) -> f32 {
    (0..3).map(|i| ((p[i] - c[i]) / r[i]).powi(2)).sum()
}

/// Draws one phantom: an LV ellipsoid wrapped in a myocardial shell, with a
/// crescent-shaped RV to one side. Any non-LV voxel touching the LV through a
/// face is relabelled as myocardium, so the shell is always closed.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<LabeledVolume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |lo: f32, hi: f32| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let [d, h, w] = spec.dims;
    let mid = [d, h, w].map(|n| (n as f32 - 1.0) / 2.0);
    let c_lv: [f32; 3] = std::array::from_fn(|i| mid[i] + draw(-spec.center_jitter[i], spec.center_jitter[i]));
    let r_lv: [f32; 3] = std::array::from_fn(|i| draw(spec.lv_radii.0[i], spec.lv_radii.1[i]));
    let r_myo: [f32; 3] = std::array::from_fn(|i| r_lv[i] + draw(spec.myo_thickness.0[i], spec.myo_thickness.1[i]));
    let r_rv: [f32; 3] = std::array::from_fn(|i| draw(spec.rv_radii.0[i], spec.rv_radii.1[i]));
    let side = if draw(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
    let off = r_myo[2] + draw(spec.rv_offset.0, spec.rv_offset.1) + r_rv[2];
    let c_rv = [c_lv[0], c_lv[1] + draw(-2.0, 2.0), c_lv[2] + side * off];

    let mut labels = vec![BACKGROUND; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f32, y as f32, x as f32];
                let i = (z * h + y) * w + x;
                labels[i] = if ellipsoid(p, c_lv, r_lv) <= 1.0 {
                    LV
                } else if ellipsoid(p, c_lv, r_myo) <= 1.0 {
                    MYO
                } else if ellipsoid(p, c_rv, r_rv) <= 1.0 {
                    RV
                } else {
                    BACKGROUND
                };
            }
        }
    }
    close_shell(&mut labels, spec.dims);
    let mut hist = [0usize; NUM_CLASSES];
    labels.iter().for_each(|&l| hist[usize::from(l)] += 1);
    if let Some(k) = hist.iter().position(|&n| n == 0) {
        return Err(param_err!("phantom draw left class {k} empty; widen the radius ranges"));
    }

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| param_err!("noise: {e}"))?;
    let img =
        labels.iter().map(|&l| (spec.intensity[usize::from(l)] + noise.sample(&mut rng)).clamp(0.0, 1.0)).collect();
    LabeledVolume::new(Tensor::new([1, d, h, w], img)?, Some(labels), [spec.spacing; 3])
}

/// Face neighbours of voxel `i` inside a `dims` grid.
pub(crate) fn face_neighbors(i: usize, dims: [usize; 3]) -> impl Iterator<Item = usize> {
    let [d, h, w] = dims;
    let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
    let hw = h * w;
    [
        (z > 0).then(|| i - hw),
        (z + 1 < d).then(|| i + hw),
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
    ]
    .into_iter()
    .flatten()
}

fn close_shell(labels: &mut [u8], dims: [usize; 3]) {
    let touch: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] != LV && labels[i] != MYO)
        .filter(|&i| face_neighbors(i, dims).any(|j| labels[j] == LV))
        .collect();
    touch.into_iter().for_each(|i| labels[i] = MYO);
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f32], p: f64) -> f64 {
    let n = sorted.len();
    let pos = p / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    f64::from(sorted[lo]) + frac * (f64::from(sorted[hi]) - f64::from(sorted[lo]))
}

/// Maps the `lo` percentile to 0 and the `hi` percentile to 1, then clamps.
/// A degenerate range yields all zeros.
pub fn normalize_percentile(vol: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if vol.numel() == 0 {
        return Err(param_err!("cannot normalize an empty volume"));
    }
    if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo > hi {
        return Err(param_err!("percentiles {lo}, {hi} invalid"));
    }
    if !vol.is_finite() {
        return Err(Error::Numeric("volume has non-finite values".into()));
    }
    let mut sorted = vol.data().to_vec();
    sorted.sort_by(f32::total_cmp);
    let (a, b) = (percentile(&sorted, lo), percentile(&sorted, hi));
    let data = if b > a {
        vol.data().iter().map(|&v| ((f64::from(v) - a) / (b - a)).clamp(0.0, 1.0) as f32).collect()
    } else {
        vec![0.0; vol.numel()]
    };
    Tensor::new(vol.shape().to_vec(), data)
}

/// Applies [`normalize_percentile`] with the default 0.5/99.5 bounds to the
/// image of `lv`.
pub fn normalize_volume(lv: &LabeledVolume) -> Result<LabeledVolume> {
    Ok(LabeledVolume { image: normalize_percentile(&lv.image, 0.5, 99.5)?, ..lv.clone() })
}

const PATCH_RETRIES: usize = 1000;

/// `n` random crops of extent `size`. With `require_label`, each crop is
/// redrawn until it holds a foreground voxel.
pub fn extract_patches(
    lv: &LabeledVolume,
    size: [usize; 3],
    n: usize,
    require_label: bool,
    seed: u64,
) -> Result<Vec<LabeledVolume>> {
    let dims = lv.dims();
    if (0..3).any(|i| size[i] == 0 || size[i] > dims[i]) {
        return Err(param_err!("patch {size:?} does not fit volume {dims:?}"));
    }
    if require_label && lv.labels.is_none() {
        return Err(param_err!("require_label on an unlabeled volume"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tries = 0;
        loop {
            let origin: [usize; 3] = std::array::from_fn(|i| rng.random_range(0..=dims[i] - size[i]));
            let p = lv.crop(origin, size)?;
            if !require_label || p.labels()?.iter().any(|&l| l != BACKGROUND) {
                out.push(p);
                break;
            }
            tries += 1;
            if tries == PATCH_RETRIES {
                return Err(Error::Sampling(format!("no foreground patch after {PATCH_RETRIES} draws")));
            }
        }
    }
    Ok(out)
}

/// Generates `count` normalized phantoms with seeds `seed, seed + 1, …`.
pub fn phantom_dataset(spec: &PhantomSpec, count: usize, seed: u64) -> Result<Vec<LabeledVolume>> {
    (0..count as u64).map(|i| normalize_volume(&generate_phantom(spec, seed.wrapping_add(i))?)).collect()
}
