//! Grayscale image storage, sub-pixel sampling, gradients, image pyramids and
//! the Harris corner response used for mouth-corner refinement.
//!
//! Intensities are stored as `f64` in `[0, 255]`; file decode converts 8-bit
//! data to real values once so that all residual math stays real-valued.

use std::path::Path;

use crate::geom::Vec2;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("image data length {len} does not match {width}x{height}")]
    SizeMismatch { width: usize, height: usize, len: usize },
    #[error("image contains non-finite intensities")]
    NonFinite,
    #[error("image {width}x{height} too small for {requested} pyramid levels (max {max_levels})")]
    TooSmallForPyramid { width: usize, height: usize, requested: usize, max_levels: usize },
    #[error("pyramid needs at least one level")]
    ZeroLevels,
    #[error("image must be at least 3x3 for gradients, got {width}x{height}")]
    TooSmallForGradients { width: usize, height: usize },
    #[error("harris window [{x0},{x1}]x[{y0},{y1}] not inside image")]
    WindowOutOfBounds { x0: i64, x1: i64, y0: i64, y1: i64 },
    #[error("failed to read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("failed to decode {path}: {source}")]
    Decode { path: String, source: image::ImageError },
    #[error("failed to encode {path}: {source}")]
    Encode { path: String, source: image::ImageError },
}

/// Row-major grayscale intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::SizeMismatch { width, height, len: data.len() });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(ImageError::NonFinite);
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }

    /// Bilinear interpolation of the four surrounding pixels. Returns `None`
    /// when `p` is outside `[0, w-1] x [0, h-1]`; each caller decides its own
    /// out-of-bounds policy. Exact at integer coordinates.
    #[inline]
    pub fn sample_bilinear(&self, p: Vec2) -> Option<f64> {
        if !self.contains(p) || !p.is_finite() {
            return None;
        }
        let x0 = p.x.floor() as usize;
        let y0 = p.y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = p.x - x0 as f64;
        let fy = p.y - y0 as f64;
        let i00 = self.get(x0, y0);
        let i10 = self.get(x1, y0);
        let i01 = self.get(x0, y1);
        let i11 = self.get(x1, y1);
        let top = i00 + fx * (i10 - i00);
        let bot = i01 + fx * (i11 - i01);
        Some(top + fy * (bot - top))
    }
}

/// Coarse-to-fine image stack; level k has dimensions `ceil(prev / 2)`.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<GrayImage>,
}

impl Pyramid {
    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, k: usize) -> &GrayImage {
        &self.levels[k]
    }

    pub fn base(&self) -> &GrayImage {
        &self.levels[0]
    }
}

fn max_feasible_levels(width: usize, height: usize) -> usize {
    let mut n = 1;
    let (mut w, mut h) = (width, height);
    while w >= 2 && h >= 2 {
        w = w.div_ceil(2);
        h = h.div_ceil(2);
        n += 1;
    }
    n - 1
}

/// Low-pass filter with the separable binomial kernel [1,4,6,4,1]/16
/// (replicated borders), then decimate by 2.
fn downsample(img: &GrayImage) -> GrayImage {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (w, h) = (img.width, img.height);
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;

    // horizontal pass
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, k) in K.iter().enumerate() {
                acc += k * img.get(clamp(x as i64 + t as i64 - 2, w), y);
            }
            tmp[y * w + x] = acc;
        }
    }
    // vertical pass + decimation
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = GrayImage::new(ow, oh);
    for oy in 0..oh {
        let sy = 2 * oy;
        for ox in 0..ow {
            let sx = 2 * ox;
            let mut acc = 0.0;
            for (t, k) in K.iter().enumerate() {
                acc += k * tmp[clamp(sy as i64 + t as i64 - 2, h) * w + sx];
            }
            out.set(ox, oy, acc);
        }
    }
    out
}

/// Build a `levels`-deep pyramid; level 0 is the source image.
pub fn build_pyramid(img: &GrayImage, levels: usize) -> Result<Pyramid, ImageError> {
    if levels == 0 {
        return Err(ImageError::ZeroLevels);
    }
    let need = 1usize << (levels - 1);
    if img.width < need || img.height < need {
        return Err(ImageError::TooSmallForPyramid {
            width: img.width,
            height: img.height,
            requested: levels,
            max_levels: max_feasible_levels(img.width, img.height),
        });
    }
    let mut stack = vec![img.clone()];
    for _ in 1..levels {
        let next = downsample(stack.last().unwrap());
        stack.push(next);
    }
    Ok(Pyramid { levels: stack })
}

/// Central differences in the interior, one-sided at the borders.
pub fn gradients(img: &GrayImage) -> Result<(GrayImage, GrayImage), ImageError> {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return Err(ImageError::TooSmallForGradients { width: w, height: h });
    }
    let mut ix = GrayImage::new(w, h);
    let mut iy = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let gx = if x == 0 {
                img.get(1, y) - img.get(0, y)
            } else if x == w - 1 {
                img.get(w - 1, y) - img.get(w - 2, y)
            } else {
                0.5 * (img.get(x + 1, y) - img.get(x - 1, y))
            };
            let gy = if y == 0 {
                img.get(x, 1) - img.get(x, 0)
            } else if y == h - 1 {
                img.get(x, h - 1) - img.get(x, h - 2)
            } else {
                0.5 * (img.get(x, y + 1) - img.get(x, y - 1))
            };
            ix.set(x, y, gx);
            iy.set(x, y, gy);
        }
    }
    Ok((ix, iy))
}

const HARRIS_K: f64 = 0.04;

/// Harris response det(M) - k trace(M)^2 at integer pixel (x, y), with the
/// structure tensor M accumulated over a 3x3 Gaussian-weighted window.
fn harris_response(ix: &GrayImage, iy: &GrayImage, x: usize, y: usize) -> f64 {
    const W: [f64; 3] = [0.25, 0.5, 0.25];
    let (w, h) = (ix.width, ix.height);
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let wgt = W[(dx + 1) as usize] * W[(dy + 1) as usize];
            let px = clamp(x as i64 + dx, w);
            let py = clamp(y as i64 + dy, h);
            let gx = ix.get(px, py);
            let gy = iy.get(px, py);
            a += wgt * gx * gx;
            b += wgt * gx * gy;
            c += wgt * gy * gy;
        }
    }
    (a * c - b * b) - HARRIS_K * (a + c) * (a + c)
}

/// Integer pixel within `center +- radius` maximizing the Harris response.
/// Returns `center` (rounded) when the window is degenerate, i.e. all
/// responses equal.
pub fn harris_strongest(
    img: &GrayImage,
    center: Vec2,
    radius: usize,
) -> Result<Vec2, ImageError> {
    let cx = center.x.round() as i64;
    let cy = center.y.round() as i64;
    let r = radius as i64;
    let (x0, x1) = (cx - r, cx + r);
    let (y0, y1) = (cy - r, cy + r);
    if x0 < 0 || y0 < 0 || x1 >= img.width as i64 || y1 >= img.height as i64 {
        return Err(ImageError::WindowOutOfBounds { x0, x1, y0, y1 });
    }
    let (ix, iy) = gradients(img)?;
    let mut best = (cx, cy);
    let mut best_r = f64::NEG_INFINITY;
    let mut min_r = f64::INFINITY;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let resp = harris_response(&ix, &iy, x as usize, y as usize);
            min_r = min_r.min(resp);
            if resp > best_r {
                best_r = resp;
                best = (x, y);
            }
        }
    }
    if best_r - min_r <= 0.0 {
        return Ok(Vec2::new(cx as f64, cy as f64));
    }
    Ok(Vec2::new(best.0 as f64, best.1 as f64))
}

/// Load an 8-bit grayscale or RGB PNG/PGM frame. RGB is converted with
/// luma = 0.299 R + 0.587 G + 0.114 B.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage, ImageError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => ImageError::Io { path: name.clone(), source },
        source => ImageError::Decode { path: name.clone(), source },
    })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let data = match dynimg {
        image::DynamicImage::ImageLuma8(img) => img.pixels().map(|p| p.0[0] as f64).collect(),
        image::DynamicImage::ImageLuma16(img) => {
            img.pixels().map(|p| p.0[0] as f64 / 257.0).collect()
        }
        other => {
            let rgb = other.to_rgb8();
            rgb.pixels()
                .map(|p| 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
                .collect()
        }
    };
    GrayImage::from_vec(w, h, data)
}

/// Write an intensity grid as an 8-bit grayscale image (format from the
/// file extension; PNG and PGM supported).
pub fn save_gray(img: &GrayImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let buf: Vec<u8> = img.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let out = image::GrayImage::from_raw(img.width as u32, img.height as u32, buf)
        .expect("buffer length matches dimensions");
    out.save(path).map_err(|source| ImageError::Encode { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, _| 2.0 * x as f64)
    }

    #[test]
    fn sample_integer_coordinate_is_identity() {
        let img = GrayImage::from_fn(8, 8, |x, y| (x * 10 + y) as f64);
        assert_eq!(img.sample_bilinear(Vec2::new(3.0, 5.0)), Some(35.0));
    }

    #[test]
    fn sample_constant_image() {
        let img = GrayImage::from_fn(6, 6, |_, _| 42.0);
        assert_eq!(img.sample_bilinear(Vec2::new(2.3, 4.7)), Some(42.0));
    }

    #[test]
    fn sample_center_of_2x2() {
        let img = GrayImage::from_vec(2, 2, vec![0.0, 10.0, 20.0, 30.0]).unwrap();
        assert_eq!(img.sample_bilinear(Vec2::new(0.5, 0.5)), Some(15.0));
    }

    #[test]
    fn sample_out_of_bounds_is_none() {
        let img = GrayImage::new(4, 4);
        assert_eq!(img.sample_bilinear(Vec2::new(-0.01, 1.0)), None);
        assert_eq!(img.sample_bilinear(Vec2::new(3.01, 1.0)), None);
        assert_eq!(img.sample_bilinear(Vec2::new(3.0, 3.0)), Some(0.0));
    }

    #[test]
    fn pyramid_single_level_is_input() {
        let img = ramp(16, 16);
        let pyr = build_pyramid(&img, 1).unwrap();
        assert_eq!(pyr.levels(), 1);
        assert_eq!(pyr.base(), &img);
    }

    #[test]
    fn pyramid_preserves_constants() {
        let img = GrayImage::from_fn(32, 24, |_, _| 77.0);
        let pyr = build_pyramid(&img, 3).unwrap();
        for k in 0..3 {
            for v in pyr.level(k).as_slice() {
                assert!((v - 77.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pyramid_dimensions() {
        let pyr = build_pyramid(&ramp(64, 64), 3).unwrap();
        let dims: Vec<_> = (0..3).map(|k| pyr.level(k).width()).collect();
        assert_eq!(dims, vec![64, 32, 16]);
    }

    #[test]
    fn pyramid_too_small_names_max_levels() {
        let err = build_pyramid(&ramp(5, 5), 4).unwrap_err();
        match err {
            ImageError::TooSmallForPyramid { max_levels, .. } => assert_eq!(max_levels, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn gradients_constant_is_zero() {
        let (ix, iy) = gradients(&GrayImage::from_fn(5, 5, |_, _| 9.0)).unwrap();
        assert!(ix.as_slice().iter().all(|v| *v == 0.0));
        assert!(iy.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_exact_on_ramp() {
        let (ix, iy) = gradients(&ramp(7, 5)).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                assert!((ix.get(x, y) - 2.0).abs() < 1e-12);
                assert!(iy.get(x, y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_difference_oracle() {
        // independent finite-difference oracle on a fixed random-ish 5x5 image
        let vals = [
            12.0, 200.0, 34.0, 90.0, 3.0, 61.0, 17.0, 150.0, 42.0, 99.0, 5.0, 210.0, 77.0, 31.0,
            120.0, 88.0, 9.0, 66.0, 180.0, 25.0, 140.0, 53.0, 11.0, 240.0, 70.0,
        ];
        let img = GrayImage::from_vec(5, 5, vals.to_vec()).unwrap();
        let (ix, iy) = gradients(&img).unwrap();
        let at = |x: usize, y: usize| vals[y * 5 + x];
        for y in 0..5 {
            for x in 1..4 {
                assert_eq!(ix.get(x, y), 0.5 * (at(x + 1, y) - at(x - 1, y)));
            }
        }
        for y in 1..4 {
            for x in 0..5 {
                assert_eq!(iy.get(x, y), 0.5 * (at(x, y + 1) - at(x, y - 1)));
            }
        }
    }

    fn l_corner_image(cx: usize, cy: usize) -> GrayImage {
        // bright quadrant with corner at (cx, cy)
        GrayImage::from_fn(21, 21, |x, y| if x >= cx && y >= cy { 200.0 } else { 20.0 })
    }

    /// Brute-force oracle: evaluate the documented response formula over the
    /// window using a from-scratch structure tensor.
    fn harris_oracle(img: &GrayImage, x0: usize, x1: usize, y0: usize, y1: usize) -> (usize, usize) {
        let (ix, iy) = gradients(img).unwrap();
        let mut best = (x0, y0);
        let mut best_r = f64::NEG_INFINITY;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let w = [0.25, 0.5, 0.25];
                let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                for dy in 0..3usize {
                    for dx in 0..3usize {
                        let px = (x + dx - 1).min(img.width() - 1);
                        let py = (y + dy - 1).min(img.height() - 1);
                        let wgt = w[dx] * w[dy];
                        a += wgt * ix.get(px, py) * ix.get(px, py);
                        b += wgt * ix.get(px, py) * iy.get(px, py);
                        c += wgt * iy.get(px, py) * iy.get(px, py);
                    }
                }
                let r = a * c - b * b - 0.04 * (a + c) * (a + c);
                if r > best_r {
                    best_r = r;
                    best = (x, y);
                }
            }
        }
        best
    }

    #[test]
    fn harris_flat_returns_center() {
        let img = GrayImage::from_fn(15, 15, |_, _| 50.0);
        let p = harris_strongest(&img, Vec2::new(7.0, 7.0), 3).unwrap();
        assert_eq!((p.x, p.y), (7.0, 7.0));
    }

    #[test]
    fn harris_finds_synthetic_corner() {
        let img = l_corner_image(10, 9);
        let found = harris_strongest(&img, Vec2::new(9.0, 10.0), 4).unwrap();
        let oracle = harris_oracle(&img, 5, 13, 6, 14);
        assert_eq!((found.x as usize, found.y as usize), oracle);
        // the corner structure sits at the quadrant junction
        assert!((found.x - 10.0).abs() <= 1.0 && (found.y - 9.0).abs() <= 1.0);
    }

    #[test]
    fn harris_stays_inside_window() {
        let img = l_corner_image(16, 16);
        let p = harris_strongest(&img, Vec2::new(5.0, 5.0), 3).unwrap();
        assert!(p.x >= 2.0 && p.x <= 8.0 && p.y >= 2.0 && p.y <= 8.0);
    }

    proptest! {
        #[test]
        fn bilinear_is_continuous(
            seed in 0u64..1000,
            px in 0.0f64..6.9,
            py in 0.0f64..6.9,
            dx in -0.05f64..0.05,
            dy in -0.05f64..0.05,
        ) {
            let img = GrayImage::from_fn(8, 8, |x, y| {
                ((x as u64 * 31 + y as u64 * 17 + seed) % 256) as f64
            });
            let q = Vec2::new((px + dx).clamp(0.0, 7.0), (py + dy).clamp(0.0, 7.0));
            let p = Vec2::new(px, py);
            let a = img.sample_bilinear(p).unwrap();
            let b = img.sample_bilinear(q).unwrap();
            let bound = 255.0 * ((p.x - q.x).abs() + (p.y - q.y).abs()) + 1e-9;
            prop_assert!((a - b).abs() <= bound);
        }
    }
}
