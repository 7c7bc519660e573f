//! Artifact-mask extraction and synthetic artifact injection.
//!
//! Mask polarity is fixed throughout the crate: value 1 marks artifact
//! (unknown) pixels that the sampler is allowed to regenerate; value 0
//! marks known pixels that must survive restoration untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{disk_offsets, Image, Mask};
use crate::phantom::Phantom;
use crate::rng::{streams, Pcg32};

/// Luminance threshold separating field of view from black surround.
pub const TAU_FOV: f32 = 0.02;

/// Thresholds and morphology radii for artifact extraction. The blur
/// width used by texture extraction defaults to size/16 at the call
/// site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractParams {
    /// Luminance above this is flagged as flash/over-exposure.
    pub tau_high: f32,
    /// Luminance below this (inside the FOV) is flagged as under-exposure.
    pub tau_low: f32,
    /// Opening radius that removes speckle from the raw detection.
    pub open_radius: usize,
    /// Safety-margin dilation applied after opening.
    pub dilate_radius: usize,
}

impl Default for ExtractParams {
    fn default() -> Self {
        ExtractParams {
            tau_high: 0.92,
            tau_low: 0.08,
            open_radius: 1,
            dilate_radius: 2,
        }
    }
}

// ---------------------------------------------------------------------
// Binary morphology
// ---------------------------------------------------------------------

/// Dilation by a disc: a pixel becomes 1 if any input pixel within the
/// disc is 1. Radius 0 is the identity.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let offsets = disk_offsets(radius);
    let mut out = Mask::zeros(mask.height, mask.width);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) == 0 {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < mask.height && (nx as usize) < mask.width {
                    out.set(ny as usize, nx as usize, 1);
                }
            }
        }
    }
    out
}

/// Erosion by a disc: a pixel stays 1 only if every pixel within the disc
/// is 1 (positions outside the frame count as 0).
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let offsets = disk_offsets(radius);
    let mut out = Mask::zeros(mask.height, mask.width);
    for y in 0..mask.height {
        'pixels: for x in 0..mask.width {
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0
                    || nx < 0
                    || ny as usize >= mask.height
                    || nx as usize >= mask.width
                    || mask.get(ny as usize, nx as usize) == 0
                {
                    continue 'pixels;
                }
            }
            out.set(y, x, 1);
        }
    }
    out
}

/// Opening: erosion followed by dilation with the same disc.
pub fn open(mask: &Mask, radius: usize) -> Mask {
    dilate(&erode(mask, radius), radius)
}

// ---------------------------------------------------------------------
// FOV detection
// ---------------------------------------------------------------------

/// Largest 4-connected component of `predicate` pixels, or None if no
/// pixel satisfies it.
fn largest_component(height: usize, width: usize, lit: &[bool]) -> Option<Vec<usize>> {
    let mut visited = vec![false; height * width];
    let mut best: Option<Vec<usize>> = None;
    let mut queue = std::collections::VecDeque::new();
    for start in 0..height * width {
        if !lit[start] || visited[start] {
            continue;
        }
        let mut component = Vec::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            component.push(i);
            let (y, x) = (i / width, i % width);
            let mut push = |ny: usize, nx: usize| {
                let j = ny * width + nx;
                if lit[j] && !visited[j] {
                    visited[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                push(y - 1, x);
            }
            if y + 1 < height {
                push(y + 1, x);
            }
            if x > 0 {
                push(y, x - 1);
            }
            if x + 1 < width {
                push(y, x + 1);
            }
        }
        if best.as_ref().map_or(true, |b| component.len() > b.len()) {
            best = Some(component);
        }
    }
    best
}

/// Detect the circular field of view: threshold luminance, keep the
/// largest connected component, and fill its enclosing circle (centroid
/// center, max-distance radius).
pub fn detect_fov(img: &Image) -> Result<Mask> {
    detect_fov_with(img, TAU_FOV)
}

pub fn detect_fov_with(img: &Image, tau_fov: f32) -> Result<Mask> {
    let lum = img.luminance()?;
    let lit: Vec<bool> = lum.iter().map(|&v| v > tau_fov).collect();
    let component = largest_component(img.height, img.width, &lit).ok_or_else(|| {
        Error::EmptyFov(format!(
            "no pixel above luminance {tau_fov}; image appears to be all black"
        ))
    })?;
    let (mut cy, mut cx) = (0.0f64, 0.0f64);
    for &i in &component {
        cy += (i / img.width) as f64;
        cx += (i % img.width) as f64;
    }
    cy /= component.len() as f64;
    cx /= component.len() as f64;
    let mut r2max = 0.0f64;
    for &i in &component {
        let dy = (i / img.width) as f64 - cy;
        let dx = (i % img.width) as f64 - cx;
        r2max = r2max.max(dy * dy + dx * dx);
    }
    let radius = r2max.sqrt() + 0.5;
    let mut out = Mask::zeros(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if (dy * dy + dx * dx).sqrt() <= radius {
                out.set(y, x, 1);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Artifact mask extraction
// ---------------------------------------------------------------------

/// Raw (pre-morphology) detection set: pixels inside `fov` whose
/// luminance crosses either exposure threshold. Exposed separately so the
/// monotonicity of the detection in `tau_high` can be verified directly.
pub fn threshold_artifacts(img: &Image, fov: &Mask, tau_high: f32, tau_low: f32) -> Result<Mask> {
    check_thresholds(tau_high, tau_low)?;
    let lum = img.luminance()?;
    let mut out = Mask::zeros(img.height, img.width);
    for i in 0..lum.len() {
        if fov.data[i] == 1 && (lum[i] > tau_high || lum[i] < tau_low) {
            out.data[i] = 1;
        }
    }
    Ok(out)
}

fn check_thresholds(tau_high: f32, tau_low: f32) -> Result<()> {
    if !(0.0 <= tau_low && tau_low < tau_high && tau_high <= 1.0) {
        return Err(Error::Validation(format!(
            "thresholds must satisfy 0 <= tau_low < tau_high <= 1, got tau_low={tau_low}, \
             tau_high={tau_high}"
        )));
    }
    Ok(())
}

/// Detect over-/under-exposed regions inside the FOV, clean them with an
/// opening, and grow a safety margin by dilation. The result is again
/// restricted to the FOV.
pub fn extract_artifact_mask(img: &Image, params: &ExtractParams) -> Result<Mask> {
    check_thresholds(params.tau_high, params.tau_low)?;
    let fov = detect_fov(img)?;
    let raw = threshold_artifacts(img, &fov, params.tau_high, params.tau_low)?;
    let cleaned = open(&raw, params.open_radius);
    let grown = dilate(&cleaned, params.dilate_radius);
    Ok(grown.intersect(&fov))
}

// ---------------------------------------------------------------------
// Texture extraction and blending
// ---------------------------------------------------------------------

/// Normalized artifact appearance plus the mask it is defined on.
#[derive(Debug, Clone)]
pub struct ArtifactTexture {
    pub image: Image,
    pub support: Mask,
}

/// Separable Gaussian blur with replicated edges. The kernel covers
/// three standard deviations each side and is normalized to sum 1.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut sum = 0.0f64;
    for k in -radius..=radius {
        let w = (-((k * k) as f64) / (2.0 * sigma as f64 * sigma as f64)).exp();
        kernel.push(w);
        sum += w;
    }
    let kernel: Vec<f32> = kernel.iter().map(|w| (w / sum) as f32).collect();

    let mut horiz = Image::zeros(img.height, img.width, img.channels);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                let mut acc = 0.0;
                for (ki, w) in kernel.iter().enumerate() {
                    let sx = (x as isize + ki as isize - radius).clamp(0, img.width as isize - 1);
                    acc += w * img.get(y, sx as usize, c);
                }
                horiz.set(y, x, c, acc);
            }
        }
    }
    let mut out = Image::zeros(img.height, img.width, img.channels);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                let mut acc = 0.0;
                for (ki, w) in kernel.iter().enumerate() {
                    let sy = (y as isize + ki as isize - radius).clamp(0, img.height as isize - 1);
                    acc += w * horiz.get(sy as usize, x, c);
                }
                out.set(y, x, c, acc);
            }
        }
    }
    out
}

/// High-pass the artifact image and min-max normalize the result over the
/// mask support (all channels jointly); zero outside the support. A
/// constant region normalizes to all zeros.
pub fn extract_texture(artifact_img: &Image, m: &Mask, blur_sigma: f32) -> Result<ArtifactTexture> {
    if m.height != artifact_img.height || m.width != artifact_img.width {
        return Err(Error::Validation(format!(
            "texture mask {}x{} does not match image {}x{}",
            m.height, m.width, artifact_img.height, artifact_img.width
        )));
    }
    if m.is_empty_mask() {
        return Err(Error::Validation(
            "texture extraction needs a nonempty mask".to_string(),
        ));
    }
    let blurred = gaussian_blur(artifact_img, blur_sigma);
    let mut high = artifact_img.clone();
    for (h, b) in high.data.iter_mut().zip(&blurred.data) {
        *h -= b;
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(y, x) == 1 {
                for c in 0..high.channels {
                    let v = high.get(y, x, c);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
    }
    let span = hi - lo;
    let mut image = Image::zeros(high.height, high.width, high.channels);
    if span > 1e-12 {
        for y in 0..m.height {
            for x in 0..m.width {
                if m.get(y, x) == 1 {
                    for c in 0..high.channels {
                        image.set(y, x, c, (high.get(y, x, c) - lo) / span);
                    }
                }
            }
        }
    }
    Ok(ArtifactTexture {
        image,
        support: m.clone(),
    })
}

/// Translate a donor-frame mask into the destination frame by the given
/// (row, col) delta; pixels leaving the frame are reported by the caller
/// via the FOV check in `blend_artifact`.
pub fn translate_mask(m: &Mask, delta: (isize, isize), height: usize, width: usize) -> Mask {
    let mut out = Mask::zeros(height, width);
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(y, x) == 1 {
                let ny = y as isize + delta.0;
                let nx = x as isize + delta.1;
                if ny >= 0 && nx >= 0 && (ny as usize) < height && (nx as usize) < width {
                    out.set(ny as usize, nx as usize, 1);
                }
            }
        }
    }
    out
}

/// Blend a donor artifact texture into a clean image. The texture and
/// mask live in the donor frame and are translated so the donor optic
/// disc lands on the destination disc (translation only, no rotation or
/// scaling). Output pixels outside the translated mask equal the clean
/// input exactly; inside, `(1 - alpha) * clean + alpha * texture`,
/// clamped to [0, 1].
pub fn blend_artifact(
    clean: &Image,
    tex: &ArtifactTexture,
    m: &Mask,
    alpha: f32,
    disc_center_src: (usize, usize),
    disc_center_dst: (usize, usize),
) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("alpha: {alpha} outside [0, 1]")));
    }
    if !tex.support.same_shape(m) || tex.image.height != m.height || tex.image.width != m.width {
        return Err(Error::Validation(
            "texture, support, and mask shapes must agree".to_string(),
        ));
    }
    let delta = (
        disc_center_dst.0 as isize - disc_center_src.0 as isize,
        disc_center_dst.1 as isize - disc_center_src.1 as isize,
    );
    let dest_fov = detect_fov(clean)?;
    let mut out = clean.clone();
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(y, x) == 0 {
                continue;
            }
            let ny = y as isize + delta.0;
            let nx = x as isize + delta.1;
            let inside = ny >= 0
                && nx >= 0
                && (ny as usize) < clean.height
                && (nx as usize) < clean.width
                && dest_fov.get(ny as usize, nx as usize) == 1;
            if !inside {
                return Err(Error::Placement(format!(
                    "translated mask pixel ({ny}, {nx}) leaves the destination field of view \
                     (delta {delta:?})"
                )));
            }
            let (ny, nx) = (ny as usize, nx as usize);
            for c in 0..clean.channels {
                let t = if c < tex.image.channels {
                    tex.image.get(y, x, c)
                } else {
                    tex.image.get(y, x, 0)
                };
                let v = (1.0 - alpha) * clean.get(ny, nx, c) + alpha * t;
                out.set(ny, nx, c, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Synthetic artifact/clean pair construction
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Blend strength of the injected texture.
    pub alpha: f32,
    pub extract: ExtractParams,
    /// Gaussian width for texture extraction; if 0, defaults to size/16.
    pub blur_sigma: f32,
    /// Placement retries before giving up on a pair.
    pub max_attempts: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            alpha: 0.9,
            extract: ExtractParams::default(),
            blur_sigma: 0.0,
            max_attempts: 8,
        }
    }
}

/// One synthetic artifact/clean pair: the degraded image in the clean
/// frame plus the injected mask (destination frame).
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub artifact: Image,
    pub mask: Mask,
}

/// Paint saturating flash blobs near the donor's optic disc, extract the
/// resulting artifact mask and texture from the donor, and blend them
/// into the clean phantom with disc-center alignment.
pub fn synthesize_pair(
    clean: &Phantom,
    donor: &Phantom,
    params: &SynthParams,
    seed: u64,
) -> Result<SyntheticPair> {
    if params.max_attempts == 0 {
        return Err(Error::Validation(
            "max_attempts: must be at least 1".to_string(),
        ));
    }
    let mut last_err = None;
    for attempt in 0..params.max_attempts as u64 {
        let blob_seed = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        match synthesize_attempt(clean, donor, params, blob_seed) {
            Ok(pair) => return Ok(pair),
            Err(e @ Error::Placement(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| {
        Error::Placement("no placement attempt produced a valid pair".to_string())
    }))
}

fn synthesize_attempt(
    clean: &Phantom,
    donor: &Phantom,
    params: &SynthParams,
    blob_seed: u64,
) -> Result<SyntheticPair> {
    let mut rng = Pcg32::new(blob_seed, streams::SYNTH);
    let size = donor.image.height.min(donor.image.width) as f32;
    let mut painted = donor.image.clone();
    let (dy, dx) = (donor.disc_center.0 as f32, donor.disc_center.1 as f32);

    // Flash blobs: saturated discs with a soft radial profile, centered
    // within a small ring around the donor disc so the disc-aligned
    // translation keeps them inside the destination FOV. Their footprint
    // is kept large (roughly a tenth of the frame) so the corruption
    // visibly shifts the image's latent code, not just a few pixels:
    // offset + radius stays below the disc's minimum distance to the
    // FOV boundary, which placement retries then only rarely hit.
    let n_blobs = 3 + rng.next_below(3);
    let max_offset = 0.025 * size;
    for _ in 0..n_blobs {
        let ang = rng.next_range(0.0, std::f64::consts::TAU) as f32;
        let dist = rng.next_range(0.0, max_offset as f64) as f32;
        let (by, bx) = (dy + dist * ang.sin(), dx + dist * ang.cos());
        let radius = rng.next_range(0.12, 0.165) as f32 * size;
        paint_blob(&mut painted, (by, bx), radius, &mut rng);
    }

    let mask = extract_artifact_mask(&painted, &params.extract)?;
    if mask.is_empty_mask() {
        return Err(Error::Generation(
            "painted donor produced an empty artifact mask".to_string(),
        ));
    }
    let sigma = if params.blur_sigma > 0.0 {
        params.blur_sigma
    } else {
        size / 16.0
    };
    let tex = extract_texture(&painted, &mask, sigma)?;
    let artifact = blend_artifact(
        &clean.image,
        &tex,
        &mask,
        params.alpha,
        donor.disc_center,
        clean.disc_center,
    )?;
    let delta = (
        clean.disc_center.0 as isize - donor.disc_center.0 as isize,
        clean.disc_center.1 as isize - donor.disc_center.1 as isize,
    );
    let mask = translate_mask(&mask, delta, clean.image.height, clean.image.width);
    Ok(SyntheticPair { artifact, mask })
}

/// Stamp one saturated blob: intensity 1.0 at the center easing to ~0.93
/// at the rim, with a little deterministic jitter for texture content.
fn paint_blob(img: &mut Image, center: (f32, f32), radius: f32, rng: &mut Pcg32) {
    let (cy, cx) = center;
    let y0 = ((cy - radius).floor().max(0.0)) as usize;
    let y1 = ((cy + radius).ceil().min(img.height as f32 - 1.0)) as usize;
    let x0 = ((cx - radius).floor().max(0.0)) as usize;
    let x1 = ((cx + radius).ceil().min(img.width as f32 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
            if d > radius {
                continue;
            }
            let profile = 1.0 - 0.07 * (d / radius).powi(2);
            let jitter = rng.next_range(-0.01, 0.01) as f32;
            let v = (profile + jitter).clamp(0.93, 1.0);
            for c in 0..img.channels {
                img.set(y, x, c, v);
            }
        }
    }
}
