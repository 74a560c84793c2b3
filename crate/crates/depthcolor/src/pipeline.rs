//! The colorization pipelines: plain surface normals and the extended
//! chain (hole fill, bilateral smoothing, normals, unsharp sharpening).

use crate::error::{DepthColorError, Result};
use crate::image::{ColorImage, DepthImage};

/// Parameters of the extended pipeline. Spatial quantities are in pixels;
/// the range sigma is in normalized depth units (depth is scaled to [0, 1]
/// before filtering).
#[derive(Debug, Clone)]
pub struct SnPlusConfig {
    /// Median fill window side length, odd and >= 3.
    pub window: usize,
    /// Fill iteration cap.
    pub max_iter: usize,
    pub sigma_spatial: f64,
    pub sigma_range: f64,
    pub unsharp_amount: f64,
    /// Gaussian radius of the unsharp blur, in pixels.
    pub unsharp_radius: f64,
}

impl Default for SnPlusConfig {
    fn default() -> Self {
        SnPlusConfig {
            window: 5,
            max_iter: 100,
            sigma_spatial: 3.0,
            sigma_range: 0.05,
            unsharp_amount: 1.5,
            unsharp_radius: 1.0,
        }
    }
}

impl SnPlusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(DepthColorError::InvalidArgument(format!(
                "median window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if self.sigma_spatial <= 0.0 || self.sigma_range <= 0.0 || self.unsharp_radius <= 0.0 {
            return Err(DepthColorError::InvalidArgument("sigmas must be positive".into()));
        }
        if self.unsharp_amount < 0.0 {
            return Err(DepthColorError::InvalidArgument("unsharp amount must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sn,
    SnPlus,
}

/// Per-pixel unit surface normals from a scalar field: gradients by central
/// differences (one-sided at borders), n = (-dz/dx, -dz/dy, 1) normalized.
/// The z component is strictly positive everywhere.
pub fn surface_normals_field(z: &[f64], width: usize, height: usize) -> Result<Vec<[f64; 3]>> {
    if width < 2 || height < 2 {
        return Err(DepthColorError::Dimension(
            "normals need at least 2 pixels in each direction".into(),
        ));
    }
    if z.len() != width * height {
        return Err(DepthColorError::Dimension("field size mismatch".into()));
    }
    let at = |x: usize, y: usize| z[y * width + x];
    let mut out = Vec::with_capacity(z.len());
    for y in 0..height {
        for x in 0..width {
            let dzdx = if x == 0 {
                at(1, y) - at(0, y)
            } else if x == width - 1 {
                at(x, y) - at(x - 1, y)
            } else {
                (at(x + 1, y) - at(x - 1, y)) / 2.0
            };
            let dzdy = if y == 0 {
                at(x, 1) - at(x, 0)
            } else if y == height - 1 {
                at(x, y) - at(x, y - 1)
            } else {
                (at(x, y + 1) - at(x, y - 1)) / 2.0
            };
            let norm = (dzdx * dzdx + dzdy * dzdy + 1.0).sqrt();
            out.push([-dzdx / norm, -dzdy / norm, 1.0 / norm]);
        }
    }
    Ok(out)
}

/// Normals of a depth image over its normalized field; masked (null)
/// pixels get the straight-up normal.
pub fn surface_normals(d: &DepthImage) -> Result<Vec<[f64; 3]>> {
    let z = d.normalized();
    let mut normals = surface_normals_field(&z, d.width(), d.height())?;
    for y in 0..d.height() {
        for x in 0..d.width() {
            if d.is_null(x, y) {
                normals[y * d.width() + x] = [0.0, 0.0, 1.0];
            }
        }
    }
    Ok(normals)
}

/// Map unit normals to 8-bit RGB: x and y span the full byte range, z maps
/// into [128, 255]. Rounding is round-half-up.
pub fn normals_to_rgb(normals: &[[f64; 3]], width: usize, height: usize) -> Result<ColorImage> {
    if normals.len() != width * height {
        return Err(DepthColorError::Dimension("normal field size mismatch".into()));
    }
    let mut data = Vec::with_capacity(normals.len() * 3);
    for n in normals {
        data.push(((n[0] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
        data.push(((n[1] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
        data.push((128.0 + n[2] * 127.0).round().clamp(128.0, 255.0) as u8);
    }
    ColorImage::new(width, height, data)
}

/// Iteratively replace each null pixel having at least one non-null
/// neighbor in its window with the (lower) median of those neighbors.
/// Valid input pixels are never altered.
pub fn recursive_median_fill(d: &DepthImage, window: usize, max_iter: usize) -> Result<DepthImage> {
    if window < 3 || window % 2 == 0 {
        return Err(DepthColorError::InvalidArgument(format!(
            "median window must be odd and >= 3, got {window}"
        )));
    }
    if d.data().iter().all(|&v| v == 0) {
        return Err(DepthColorError::InvalidArgument("image is entirely null".into()));
    }
    let (w, h) = (d.width(), d.height());
    let half = (window / 2) as isize;
    let mut cur: Vec<u16> = d.data().to_vec();
    let mut nulls: usize = cur.iter().filter(|&&v| v == 0).count();
    for it in 0..max_iter {
        if nulls == 0 {
            break;
        }
        let prev = cur.clone();
        let mut filled = 0usize;
        for y in 0..h as isize {
            for x in 0..w as isize {
                if prev[y as usize * w + x as usize] != 0 {
                    continue;
                }
                let mut neigh = Vec::new();
                for dy in -half..=half {
                    for dx in -half..=half {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let v = prev[ny as usize * w + nx as usize];
                        if v != 0 {
                            neigh.push(v);
                        }
                    }
                }
                if neigh.is_empty() {
                    continue;
                }
                neigh.sort_unstable();
                cur[y as usize * w + x as usize] = neigh[(neigh.len() - 1) / 2];
                filled += 1;
            }
        }
        nulls -= filled;
        if filled == 0 && nulls > 0 {
            return Err(DepthColorError::FillIncomplete { remaining: nulls, iterations: it + 1 });
        }
    }
    if nulls > 0 {
        return Err(DepthColorError::FillIncomplete { remaining: nulls, iterations: max_iter });
    }
    DepthImage::new(w, h, cur)
}

fn kernel_half_width(sigma: f64) -> isize {
    (3.0 * sigma).ceil() as isize
}

fn clamp_coord(v: isize, max: usize) -> usize {
    v.clamp(0, max as isize - 1) as usize
}

/// Windowed Gaussian blur with border replication; the same window and
/// normalization as the bilateral filter so the two agree in the large
/// range-sigma limit.
pub fn gaussian_blur(z: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let half = kernel_half_width(sigma);
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut out = vec![0.0; z.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut num = 0.0;
            let mut den = 0.0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let wgt = (-((dx * dx + dy * dy) as f64) * inv2s2).exp();
                    let sx = clamp_coord(x + dx, width);
                    let sy = clamp_coord(y + dy, height);
                    num += wgt * z[sy * width + sx];
                    den += wgt;
                }
            }
            out[y as usize * width + x as usize] = num / den;
        }
    }
    out
}

/// Edge-preserving bilateral filter over a normalized depth field with
/// border replication.
pub fn bilateral_filter(
    z: &[f64],
    width: usize,
    height: usize,
    sigma_spatial: f64,
    sigma_range: f64,
) -> Result<Vec<f64>> {
    if z.len() != width * height {
        return Err(DepthColorError::Dimension("field size mismatch".into()));
    }
    if sigma_spatial <= 0.0 || sigma_range <= 0.0 {
        return Err(DepthColorError::InvalidArgument("sigmas must be positive".into()));
    }
    let half = kernel_half_width(sigma_spatial);
    let inv2ss = 1.0 / (2.0 * sigma_spatial * sigma_spatial);
    let inv2sr = 1.0 / (2.0 * sigma_range * sigma_range);
    let mut out = vec![0.0; z.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let center = z[y as usize * width + x as usize];
            let mut num = 0.0;
            let mut den = 0.0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let sx = clamp_coord(x + dx, width);
                    let sy = clamp_coord(y + dy, height);
                    let v = z[sy * width + sx];
                    let d = v - center;
                    let wgt = (-((dx * dx + dy * dy) as f64) * inv2ss - d * d * inv2sr).exp();
                    num += wgt * v;
                    den += wgt;
                }
            }
            out[y as usize * width + x as usize] = num / den;
        }
    }
    Ok(out)
}

/// Sharpen by adding back the high-frequency residual:
/// out = clamp(c + amount * (c - blur(c))).
pub fn unsharp_mask(c: &ColorImage, amount: f64, radius: f64) -> Result<ColorImage> {
    if amount < 0.0 {
        return Err(DepthColorError::InvalidArgument("unsharp amount must be >= 0".into()));
    }
    if radius <= 0.0 {
        return Err(DepthColorError::InvalidArgument("unsharp radius must be positive".into()));
    }
    let (w, h) = (c.width(), c.height());
    let mut out = vec![0u8; w * h * 3];
    for ch in 0..3 {
        let plane: Vec<f64> = c.data().iter().skip(ch).step_by(3).map(|&b| b as f64).collect();
        let blurred = gaussian_blur(&plane, w, h, radius);
        for i in 0..plane.len() {
            let v = plane[i] + amount * (plane[i] - blurred[i]);
            out[i * 3 + ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    ColorImage::new(w, h, out)
}

/// Full depth-to-color pipeline. `Sn` maps surface normals straight to
/// RGB; `SnPlus` runs fill, bilateral smoothing, normals, RGB mapping and
/// unsharp sharpening, in that order.
pub fn colorize(d: &DepthImage, method: Method, config: &SnPlusConfig) -> Result<ColorImage> {
    config.validate()?;
    match method {
        Method::Sn => {
            let normals = surface_normals(d)?;
            normals_to_rgb(&normals, d.width(), d.height())
        }
        Method::SnPlus => {
            let filled = recursive_median_fill(d, config.window, config.max_iter)?;
            let z = filled.normalized();
            let smooth = bilateral_filter(
                &z,
                filled.width(),
                filled.height(),
                config.sigma_spatial,
                config.sigma_range,
            )?;
            let normals = surface_normals_field(&smooth, filled.width(), filled.height())?;
            let rgb = normals_to_rgb(&normals, filled.width(), filled.height())?;
            unsharp_mask(&rgb, config.unsharp_amount, config.unsharp_radius)
        }
    }
}
