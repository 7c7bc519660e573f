//! Image-quality metrics (PSNR, SSIM, Dice) and a morphological
//! vesselness segmenter, all implemented from their definitions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{disk_offsets, Image, Mask};
use crate::masks::{detect_fov, erode};

/// PSNR returned when the mean squared error underflows (identical
/// images); keeps the metric total instead of emitting infinity.
pub const PSNR_CAP_DB: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-12;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Default black-top-hat radius (pixels) for vessel detection at the
/// 64-pixel desk scale, and the threshold on the normalized response.
pub const VESSEL_SCALE_PX: f64 = 2.0;
pub const VESSEL_THRESHOLD: f64 = 0.30;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Validation(format!(
            "metric inputs differ in shape: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in decibels: 10 log10(peak^2 / MSE), capped
/// at [`PSNR_CAP_DB`] when the MSE falls below 1e-12.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if peak <= 0.0 {
        return Err(Error::Validation(format!("peak: {peak} must be positive")));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    let mse = acc / a.data.len() as f64;
    if mse < MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR restricted to pixels where `region` is 1.
pub fn psnr_in(a: &Image, b: &Image, region: &Mask, peak: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if region.height != a.height || region.width != a.width {
        return Err(Error::Validation(
            "psnr region mask shape mismatch".to_string(),
        ));
    }
    if peak <= 0.0 {
        return Err(Error::Validation(format!("peak: {peak} must be positive")));
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            if region.get(y, x) == 0 {
                continue;
            }
            for c in 0..a.channels {
                let d = a.get(y, x, c) as f64 - b.get(y, x, c) as f64;
                acc += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Validation(
            "psnr region mask selects no pixels".to_string(),
        ));
    }
    let mse = acc / count as f64;
    if mse < MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Per-channel summed-area tables over one channel of an image.
struct Integral {
    width: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Integral {
    fn new(img: &Image, channel: usize, prod_with: Option<&Image>) -> Integral {
        let (h, w) = (img.height, img.width);
        let mut sum = vec![0.0; (h + 1) * (w + 1)];
        let mut sum_sq = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                let v = img.get(y, x, channel) as f64;
                let v2 = match prod_with {
                    Some(other) => v * other.get(y, x, channel) as f64,
                    None => v * v,
                };
                let i = (y + 1) * (w + 1) + (x + 1);
                sum[i] = v + sum[i - 1] + sum[i - (w + 1)] - sum[i - (w + 1) - 1];
                sum_sq[i] = v2 + sum_sq[i - 1] + sum_sq[i - (w + 1)] - sum_sq[i - (w + 1) - 1];
            }
        }
        Integral {
            width: w + 1,
            sum,
            sum_sq,
        }
    }

    /// Window sums over rows y0..y0+k, cols x0..x0+k.
    fn window(&self, y0: usize, x0: usize, k: usize) -> (f64, f64) {
        let (y1, x1) = (y0 + k, x0 + k);
        let at = |v: &Vec<f64>, y: usize, x: usize| v[y * self.width + x];
        let s = at(&self.sum, y1, x1) - at(&self.sum, y0, x1) - at(&self.sum, y1, x0)
            + at(&self.sum, y0, x0);
        let q = at(&self.sum_sq, y1, x1) - at(&self.sum_sq, y0, x1) - at(&self.sum_sq, y1, x0)
            + at(&self.sum_sq, y0, x0);
        (s, q)
    }
}

/// Structural similarity: mean over all fully interior windows and all
/// channels of the standard luminance-contrast-structure product with
/// stabilizers C1 = (k1 peak)^2 and C2 = (k2 peak)^2. Statistics are
/// population moments over the window.
pub fn ssim(a: &Image, b: &Image, window: usize, k1: f64, k2: f64, peak: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if window < 3 || window % 2 == 0 {
        return Err(Error::Validation(format!(
            "window: {window} must be odd and at least 3"
        )));
    }
    if a.height < window || a.width < window {
        return Err(Error::Validation(format!(
            "image {}x{} smaller than ssim window {window}",
            a.height, a.width
        )));
    }
    let c1 = (k1 * peak) * (k1 * peak);
    let c2 = (k2 * peak) * (k2 * peak);
    let n = (window * window) as f64;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ch in 0..a.channels {
        let ia = Integral::new(a, ch, None);
        let ib = Integral::new(b, ch, None);
        let iab = Integral::new(a, ch, Some(b));
        for y0 in 0..=a.height - window {
            for x0 in 0..=a.width - window {
                let (sa, qa) = ia.window(y0, x0, window);
                let (sb, qb) = ib.window(y0, x0, window);
                let (_, qab) = iab.window(y0, x0, window);
                let (ma, mb) = (sa / n, sb / n);
                let va = qa / n - ma * ma;
                let vb = qb / n - mb * mb;
                let cov = qab / n - ma * mb;
                let val = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += val;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// SSIM with the crate defaults (window 7, k1 = 0.01, k2 = 0.03, peak 1).
pub fn ssim_default(a: &Image, b: &Image) -> Result<f64> {
    ssim(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2, 1.0)
}

/// SSIM over windows fully contained in `region`.
pub fn ssim_in(
    a: &Image,
    b: &Image,
    region: &Mask,
    window: usize,
    k1: f64,
    k2: f64,
    peak: f64,
) -> Result<f64> {
    check_shapes(a, b)?;
    if region.height != a.height || region.width != a.width {
        return Err(Error::Validation(
            "ssim region mask shape mismatch".to_string(),
        ));
    }
    if window < 3 || window % 2 == 0 {
        return Err(Error::Validation(format!(
            "window: {window} must be odd and at least 3"
        )));
    }
    if a.height < window || a.width < window {
        return Err(Error::Validation(format!(
            "image {}x{} smaller than ssim window {window}",
            a.height, a.width
        )));
    }
    let c1 = (k1 * peak) * (k1 * peak);
    let c2 = (k2 * peak) * (k2 * peak);
    let n = (window * window) as f64;
    // Windows whose every pixel lies in the region: erode the region by
    // the window's inradius and test window centers.
    let half = window / 2;
    let eroded = {
        // Square structuring element via two passes of the disc erosion is
        // wrong; test window membership directly instead.
        let mut ok = Mask::zeros(region.height, region.width);
        for y0 in 0..=region.height - window {
            'w: for x0 in 0..=region.width - window {
                for yy in y0..y0 + window {
                    for xx in x0..x0 + window {
                        if region.get(yy, xx) == 0 {
                            continue 'w;
                        }
                    }
                }
                ok.set(y0 + half, x0 + half, 1);
            }
        }
        ok
    };
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ch in 0..a.channels {
        let ia = Integral::new(a, ch, None);
        let ib = Integral::new(b, ch, None);
        let iab = Integral::new(a, ch, Some(b));
        for y0 in 0..=a.height - window {
            for x0 in 0..=a.width - window {
                if eroded.get(y0 + half, x0 + half) == 0 {
                    continue;
                }
                let (sa, qa) = ia.window(y0, x0, window);
                let (sb, qb) = ib.window(y0, x0, window);
                let (_, qab) = iab.window(y0, x0, window);
                let (ma, mb) = (sa / n, sb / n);
                let va = qa / n - ma * ma;
                let vb = qb / n - mb * mb;
                let cov = qab / n - ma * mb;
                let val = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += val;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Validation(
            "ssim region contains no full window".to_string(),
        ));
    }
    Ok(total / count as f64)
}

/// Dice overlap 2|A n B| / (|A| + |B|); 1 when both masks are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Validation(format!(
            "dice inputs differ in shape: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (x, y) in a.data.iter().zip(&b.data) {
        inter += (*x & *y) as usize;
        total += (*x + *y) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Grayscale dilation (local max) over a disc.
fn gray_dilate(lum: &[f32], height: usize, width: usize, radius: usize) -> Vec<f32> {
    let offsets = disk_offsets(radius);
    let mut out = vec![0.0f32; lum.len()];
    for y in 0..height {
        for x in 0..width {
            let mut best = f32::NEG_INFINITY;
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < height && (nx as usize) < width {
                    best = best.max(lum[ny as usize * width + nx as usize]);
                }
            }
            out[y * width + x] = best;
        }
    }
    out
}

/// Grayscale erosion (local min) over a disc.
fn gray_erode(lum: &[f32], height: usize, width: usize, radius: usize) -> Vec<f32> {
    let offsets = disk_offsets(radius);
    let mut out = vec![0.0f32; lum.len()];
    for y in 0..height {
        for x in 0..width {
            let mut best = f32::INFINITY;
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < height && (nx as usize) < width {
                    best = best.min(lum[ny as usize * width + nx as usize]);
                }
            }
            out[y * width + x] = best;
        }
    }
    out
}

/// Dark-line detector: black top-hat (grayscale closing minus input) on
/// the luminance channel, min-max normalized over an eroded FOV, then
/// thresholded. The FOV is eroded by the detection scale plus one pixel
/// so the rim falloff ring cannot masquerade as vasculature.
pub fn segment_vessels(img: &Image, scale_px: f64, threshold: f64) -> Result<Mask> {
    if scale_px < 1.0 {
        return Err(Error::Validation(format!(
            "scale_px: {scale_px} must be at least 1"
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Validation(format!(
            "threshold: {threshold} outside [0, 1]"
        )));
    }
    let radius = scale_px.round() as usize;
    let fov = detect_fov(img)?;
    let support = erode(&fov, radius + 1);
    let lum = img.luminance()?;
    let closed = gray_erode(
        &gray_dilate(&lum, img.height, img.width, radius),
        img.height,
        img.width,
        radius,
    );
    let tophat: Vec<f32> = closed.iter().zip(&lum).map(|(c, l)| c - l).collect();
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for i in 0..tophat.len() {
        if support.data[i] == 1 {
            lo = lo.min(tophat[i]);
            hi = hi.max(tophat[i]);
        }
    }
    let mut out = Mask::zeros(img.height, img.width);
    let span = hi - lo;
    if span > 1e-9 {
        for i in 0..tophat.len() {
            if support.data[i] == 1 && ((tophat[i] - lo) / span) as f64 > threshold {
                out.data[i] = 1;
            }
        }
    }
    Ok(out)
}

/// Vessel segmentation with the desk-scale defaults.
pub fn segment_vessels_default(img: &Image) -> Result<Mask> {
    segment_vessels(img, VESSEL_SCALE_PX, VESSEL_THRESHOLD)
}

// ---------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub dice_vessels: Option<f64>,
    pub mask_area_frac: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (n - 1 denominator; 0 when n = 1).
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricAggregates {
    pub n: usize,
    pub psnr_db: MeanStd,
    pub ssim: MeanStd,
    pub dice_vessels: Option<MeanStd>,
    pub mask_area_frac: Option<MeanStd>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub aggregates: MetricAggregates,
}

impl MetricReport {
    pub fn from_rows(mut rows: Vec<MetricRow>) -> Result<MetricReport> {
        if rows.is_empty() {
            return Err(Error::Validation(
                "metric report needs at least one row".to_string(),
            ));
        }
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let collect = |f: fn(&MetricRow) -> Option<f64>| -> Option<MeanStd> {
            let vals: Vec<f64> = rows.iter().filter_map(f).collect();
            if vals.len() == rows.len() {
                Some(mean_std(&vals))
            } else {
                None
            }
        };
        let aggregates = MetricAggregates {
            n: rows.len(),
            psnr_db: mean_std(&rows.iter().map(|r| r.psnr_db).collect::<Vec<_>>()),
            ssim: mean_std(&rows.iter().map(|r| r.ssim).collect::<Vec<_>>()),
            dice_vessels: collect(|r| r.dice_vessels),
            mask_area_frac: collect(|r| r.mask_area_frac),
        };
        Ok(MetricReport { rows, aggregates })
    }

    /// Per-image rows as CSV; optional columns are left empty when absent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr_db,ssim,dice_vessels,mask_area_frac\n");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{}\n",
                r.id,
                r.psnr_db,
                r.ssim,
                opt(r.dice_vessels),
                opt(r.mask_area_frac)
            ));
        }
        out
    }
}
