//! Procedural fundus-like phantoms with ground-truth vessel masks.
//!
//! A phantom is a circular field of view on black surround, with a smooth
//! radial luminance falloff, a bright elliptical optic disc, and a dark
//! vessel tree grown by recursive bifurcation from points on the disc
//! boundary. Branches are quadratic Bezier strokes rendered with
//! anti-aliasing, their width tapering by 0.8x per depth level. Vessels
//! are strictly darker than whatever they are drawn over because every
//! tone is scaled by the same radial falloff and the vessel tone is
//! required to sit below the background and disc tones per channel.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::io;
use crate::rng::{streams, Pcg32};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// Image side length in pixels (square output).
    pub size: usize,
    /// Field-of-view radius as a fraction of half the side length.
    pub fov_radius_frac: f32,
    /// Optic-disc radius as a fraction of the FOV radius.
    pub disc_radius_frac: f32,
    pub n_vessel_roots: usize,
    pub branch_depth: usize,
    /// Stroke width of root branches in pixels; children taper by 0.8x.
    pub vessel_width_px: f32,
    pub background_tone: [f32; 3],
    pub vessel_tone: [f32; 3],
    pub disc_tone: [f32; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 64,
            fov_radius_frac: 0.95,
            disc_radius_frac: 0.16,
            n_vessel_roots: 3,
            branch_depth: 3,
            vessel_width_px: 2.2,
            background_tone: [0.82, 0.45, 0.25],
            vessel_tone: [0.35, 0.08, 0.06],
            disc_tone: [0.97, 0.85, 0.55],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Validation(format!(
                "size: {} is below the 16-pixel minimum",
                self.size
            )));
        }
        if !(self.fov_radius_frac > 0.0 && self.fov_radius_frac <= 1.0) {
            return Err(Error::Validation(format!(
                "fov_radius_frac: {} outside (0, 1]",
                self.fov_radius_frac
            )));
        }
        if !(self.disc_radius_frac > 0.0 && self.disc_radius_frac <= 0.4) {
            return Err(Error::Validation(format!(
                "disc_radius_frac: {} outside (0, 0.4]",
                self.disc_radius_frac
            )));
        }
        if self.n_vessel_roots < 1 {
            return Err(Error::Validation(
                "n_vessel_roots: must be at least 1".to_string(),
            ));
        }
        if self.branch_depth < 1 {
            return Err(Error::Validation(
                "branch_depth: must be at least 1".to_string(),
            ));
        }
        if !(self.vessel_width_px > 0.0) {
            return Err(Error::Validation(format!(
                "vessel_width_px: {} must be positive",
                self.vessel_width_px
            )));
        }
        for (name, tone) in [
            ("background_tone", self.background_tone),
            ("vessel_tone", self.vessel_tone),
            ("disc_tone", self.disc_tone),
        ] {
            if tone.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Validation(format!("{name}: {tone:?} outside [0, 1]")));
            }
        }
        for c in 0..3 {
            if self.vessel_tone[c] >= self.background_tone[c]
                || self.vessel_tone[c] >= self.disc_tone[c]
            {
                return Err(Error::Validation(format!(
                    "vessel_tone: channel {c} must be strictly darker than background and disc"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Image,
    /// 1 marks a vessel pixel.
    pub vessel_mask: Mask,
    /// Optic-disc center as (row, col).
    pub disc_center: (usize, usize),
    pub seed: u64,
}

/// Render internals exposed for verification: the image without vessels
/// and the integer centerline pixels of every stroke inside the FOV.
#[derive(Debug, Clone)]
pub struct PhantomTrace {
    pub background: Image,
    pub centerline: Vec<(usize, usize)>,
}

/// Fraction of the radial luminance lost at the FOV rim.
const FALLOFF_STRENGTH: f32 = 0.35;
/// Vessel coverage acceptance band as a fraction of FOV area.
const COVERAGE_MIN: f64 = 0.02;
const COVERAGE_MAX: f64 = 0.20;
const MAX_RESEED_ATTEMPTS: u64 = 16;

struct Stroke {
    p0: (f32, f32), // (x, y)
    p1: (f32, f32),
    p2: (f32, f32),
    width: f32,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    generate_phantom_traced(spec).map(|(p, _)| p)
}

pub fn generate_phantom_traced(spec: &PhantomSpec) -> Result<(Phantom, PhantomTrace)> {
    spec.validate()?;
    for attempt in 0..MAX_RESEED_ATTEMPTS {
        let (phantom, trace, coverage) = render_attempt(spec, attempt);
        if (COVERAGE_MIN..=COVERAGE_MAX).contains(&coverage) {
            return Ok((phantom, trace));
        }
    }
    Err(Error::Generation(format!(
        "vessel coverage stayed outside [{COVERAGE_MIN}, {COVERAGE_MAX}] of the FOV after \
         {MAX_RESEED_ATTEMPTS} attempts for spec {spec:?}"
    )))
}

fn render_attempt(spec: &PhantomSpec, attempt: u64) -> (Phantom, PhantomTrace, f64) {
    // Each reseed attempt perturbs the seed by a fixed odd stride so the
    // whole sequence stays a pure function of (spec, seed).
    let seed = spec.seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut rng = Pcg32::new(seed, streams::PHANTOM);
    let n = spec.size;
    let half = n as f32 / 2.0;
    let fov_r = spec.fov_radius_frac * half;
    let disc_r = spec.disc_radius_frac * fov_r;
    let (disc_ax, disc_ay) = (disc_r, 1.15 * disc_r);

    // Disc center: random direction, distance bounded so the whole
    // ellipse stays strictly inside the FOV.
    let phi = rng.next_range(0.0, std::f64::consts::TAU) as f32;
    let d_max = (fov_r - disc_ay - 1.5).max(0.0);
    let d = rng.next_range(0.35, 0.6) as f32 * fov_r;
    let d = d.min(d_max);
    let disc_cx = half + d * phi.cos();
    let disc_cy = half + d * phi.sin();

    // Grow the vessel tree before rasterizing anything.
    let mut strokes = Vec::new();
    let base_angle = rng.next_range(0.0, std::f64::consts::TAU) as f32;
    for i in 0..spec.n_vessel_roots {
        let theta = base_angle
            + i as f32 * std::f32::consts::TAU / spec.n_vessel_roots as f32
            + rng.next_range(-0.3, 0.3) as f32;
        let p0 = (disc_cx + disc_ax * theta.cos(), disc_cy + disc_ay * theta.sin());
        let dir = (theta.cos(), theta.sin());
        let len = 0.45 * fov_r * rng.next_range(0.85, 1.15) as f32;
        grow_branch(
            &mut rng,
            p0,
            dir,
            len,
            spec.vessel_width_px,
            spec.branch_depth,
            &mut strokes,
        );
    }

    // Rasterize the vessel alpha buffer (max blend across strokes) and
    // collect centerline pixels.
    let mut vessel_alpha = vec![0.0f32; n * n];
    let mut centerline = Vec::new();
    for s in &strokes {
        splat_stroke(s, n, &mut vessel_alpha, &mut centerline);
    }

    // Compose background, disc, and vessels under the shared falloff.
    let mut image = Image::zeros(n, n, 3);
    let mut background = Image::zeros(n, n, 3);
    let mut vessel_mask = Mask::zeros(n, n);
    let mut fov_px = 0usize;
    let mut vessel_px = 0usize;
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let r = ((px - half).powi(2) + (py - half).powi(2)).sqrt();
            if r > fov_r {
                continue; // strict black surround
            }
            fov_px += 1;
            let rim = (fov_r - r + 0.5).clamp(0.0, 1.0);
            let falloff = (1.0 - FALLOFF_STRENGTH * (r / fov_r).powi(2)) * rim;

            let e = ((px - disc_cx) / disc_ax).powi(2) + ((py - disc_cy) / disc_ay).powi(2);
            let disc_alpha = (disc_r * (1.0 - e.sqrt()) + 0.5).clamp(0.0, 1.0);
            let va = vessel_alpha[y * n + x];
            for c in 0..3 {
                let mut v = spec.background_tone[c];
                v = v + disc_alpha * (spec.disc_tone[c] - v);
                background.set(y, x, c, v * falloff);
                let v = v + va * (spec.vessel_tone[c] - v);
                image.set(y, x, c, v * falloff);
            }
            if va > 0.5 {
                vessel_mask.set(y, x, 1);
                vessel_px += 1;
            }
        }
    }
    centerline.retain(|&(y, x)| {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        ((px - half).powi(2) + (py - half).powi(2)).sqrt() < fov_r - 1.0
    });
    centerline.sort_unstable();
    centerline.dedup();

    let coverage = vessel_px as f64 / fov_px.max(1) as f64;
    let phantom = Phantom {
        image,
        vessel_mask,
        disc_center: (disc_cy as usize, disc_cx as usize),
        seed: spec.seed,
    };
    let trace = PhantomTrace {
        background,
        centerline,
    };
    (phantom, trace, coverage)
}

fn grow_branch(
    rng: &mut Pcg32,
    p0: (f32, f32),
    dir: (f32, f32),
    len: f32,
    width: f32,
    depth_left: usize,
    out: &mut Vec<Stroke>,
) {
    let p2 = (p0.0 + dir.0 * len, p0.1 + dir.1 * len);
    let mid = ((p0.0 + p2.0) / 2.0, (p0.1 + p2.1) / 2.0);
    let perp = (-dir.1, dir.0);
    let bow = len * rng.next_range(-0.22, 0.22) as f32;
    let p1 = (mid.0 + perp.0 * bow, mid.1 + perp.1 * bow);
    out.push(Stroke { p0, p1, p2, width });
    if depth_left > 1 {
        for sign in [-1.0f32, 1.0] {
            let spread = rng.next_range(0.28, 0.75) as f32 * sign;
            let (sin, cos) = spread.sin_cos();
            let child = (dir.0 * cos - dir.1 * sin, dir.0 * sin + dir.1 * cos);
            let child_len = len * 0.75 * rng.next_range(0.85, 1.15) as f32;
            grow_branch(rng, p2, child, child_len, width * 0.8, depth_left - 1, out);
        }
    }
}

/// Evaluate the quadratic Bezier at parameter u.
fn bezier(s: &Stroke, u: f32) -> (f32, f32) {
    let v = 1.0 - u;
    let x = v * v * s.p0.0 + 2.0 * v * u * s.p1.0 + u * u * s.p2.0;
    let y = v * v * s.p0.1 + 2.0 * v * u * s.p1.1 + u * u * s.p2.1;
    (x, y)
}

/// Stamp soft discs along the curve into the alpha buffer (max blend) and
/// record the integer pixels the centerline passes through.
fn splat_stroke(s: &Stroke, n: usize, alpha: &mut [f32], centerline: &mut Vec<(usize, usize)>) {
    let mut arclen = 0.0f32;
    let mut prev = bezier(s, 0.0);
    for k in 1..=16 {
        let q = bezier(s, k as f32 / 16.0);
        arclen += ((q.0 - prev.0).powi(2) + (q.1 - prev.1).powi(2)).sqrt();
        prev = q;
    }
    let steps = ((arclen / 0.25).ceil() as usize).max(2);
    let reach = s.width / 2.0 + 1.0;
    for k in 0..=steps {
        let q = bezier(s, k as f32 / steps as f32);
        let (qx, qy) = q;
        if qx < -reach || qy < -reach || qx > n as f32 + reach || qy > n as f32 + reach {
            continue;
        }
        let (cx, cy) = (qx - 0.5, qy - 0.5); // pixel-center coordinates
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = (cy + reach).ceil().min(n as f32 - 1.0) as usize;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = (cx + reach).ceil().min(n as f32 - 1.0) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
                let a = (s.width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                let cell = &mut alpha[y * n + x];
                if a > *cell {
                    *cell = a;
                }
            }
        }
        let (ix, iy) = (qx.floor(), qy.floor());
        if ix >= 0.0 && iy >= 0.0 && (ix as usize) < n && (iy as usize) < n {
            centerline.push((iy as usize, ix as usize));
        }
    }
}

pub fn make_dataset(n: usize, base_seed: u64, spec: &PhantomSpec) -> Result<Vec<Phantom>> {
    if n < 1 {
        return Err(Error::Validation(
            "dataset size must be at least 1".to_string(),
        ));
    }
    (0..n)
        .map(|i| {
            let mut item = spec.clone();
            item.seed = base_seed.wrapping_add(i as u64);
            generate_phantom(&item)
                .map_err(|e| Error::Generation(format!("phantom {i} of {n}: {e}")))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PhantomMeta {
    pub seed: u64,
    pub disc_center: (usize, usize),
    pub spec: PhantomSpec,
}

/// Persist one phantom under `<root>/phantom_<seed>/` as a viewing PNG,
/// a lossless raster, the binary vessel mask, and a metadata sidecar.
pub fn save_phantom(root: &Path, phantom: &Phantom, spec: &PhantomSpec) -> Result<PathBuf> {
    let dir = root.join(format!("phantom_{}", phantom.seed));
    io::ensure_dir(&dir)?;
    io::write_png(&dir.join("image.png"), &phantom.image)?;
    io::write_f32_raster(&dir.join("image.f32"), &phantom.image)?;
    io::write_mask_png(&dir.join("vessels.png"), &phantom.vessel_mask)?;
    let mut spec = spec.clone();
    spec.seed = phantom.seed;
    let meta = PhantomMeta {
        seed: phantom.seed,
        disc_center: phantom.disc_center,
        spec,
    };
    io::write_json(&dir.join("meta.json"), &meta)?;
    Ok(dir)
}

/// Load one phantom back from a directory written by [`save_phantom`].
/// The image comes from the lossless raster, never the preview PNG.
pub fn load_phantom(dir: &Path) -> Result<Phantom> {
    let image = io::read_f32_raster(&dir.join("image.f32"))?;
    let vessel_mask = io::read_mask_png(&dir.join("vessels.png"))?;
    let meta: PhantomMeta = io::read_json(&dir.join("meta.json"))?;
    if vessel_mask.height != image.height || vessel_mask.width != image.width {
        return Err(Error::Validation(format!(
            "{}: vessel mask {}x{} does not match image {}x{}",
            dir.display(),
            vessel_mask.height,
            vessel_mask.width,
            image.height,
            image.width
        )));
    }
    Ok(Phantom {
        image,
        vessel_mask,
        disc_center: meta.disc_center,
        seed: meta.seed,
    })
}

/// Load every `phantom_*/` under `root`, sorted by directory name.
pub fn load_phantoms(root: &Path) -> Result<Vec<Phantom>> {
    let dirs = crate::dataset::subdirs_with_prefix(root, "phantom_")?;
    if dirs.is_empty() {
        return Err(Error::Validation(format!(
            "dataset: no phantom_* directories under {}",
            root.display()
        )));
    }
    dirs.into_iter().map(|(_, path)| load_phantom(&path)).collect()
}
