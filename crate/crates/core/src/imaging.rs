//! Planar floating-point images and the I/O around them.
//!
//! Pixels are stored channel-major (`[c][y][x]`), so one channel of one row is
//! a contiguous slice. Images live in `[0, 1]`; feature maps reuse the same
//! container without the range restriction.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, ImageReader};
use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

/// Planar `channels × height × width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

/// The `f32` tensor used for images and inference feature maps.
pub type ImageTensor = Tensor<f32>;

impl<T: Float> Tensor<T> {
    /// Wraps planar data, checking its length and that every value is finite.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!("{} values for a {height}x{width}x{channels} tensor", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("tensor contains non-finite values".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub(crate) fn from_vec_unchecked(height: usize, width: usize, channels: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, data }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    /// Builds a tensor from `f(channel, y, x)`.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Pixels per channel.
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape<U>(&self, other: &Tensor<U>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn ensure_same_shape<U>(&self, other: &Tensor<U>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    /// True when every value lies in `[0, 1]`.
    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Per-channel means, accumulated in `f64`.
    pub fn channel_means(&self) -> Vec<f64> {
        let n = self.plane_len().max(1) as f64;
        (0..self.channels).map(|c| self.plane(c).iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>() / n).collect()
    }

    /// Converts the element type.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| U::from(v).unwrap_or_else(U::zero)).collect(),
        }
    }

    /// Copies the `h × w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w}@({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for c in 0..self.channels {
            let plane = self.plane(c);
            for y in y0..y0 + h {
                let row = y * self.width;
                data.extend_from_slice(&plane[row + x0..row + x0 + w]);
            }
        }
        Ok(Self { height: h, width: w, channels: self.channels, data })
    }
}

/// Reads a PNG or binary PPM into a 3-channel `[0, 1]` tensor.
///
/// Grayscale inputs are replicated across channels and alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode { path: path.to_path_buf(), reason: other.to_string() },
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f32::from(px[c]) / 255.0;
        }
    }
    Ok(Tensor::from_vec_unchecked(h, w, 3, data))
}

/// 8-bit quantization: clamp to `[0, 1]`, then `round(v * 255)` with halves rounding up.
#[inline]
pub fn quantize8(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Writes an image as 8-bit PNG (or binary PPM when the extension is `.ppm`/`.pnm`).
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (img.height(), img.width());
    let mut raw = vec![0u8; h * w * 3];
    for i in 0..h * w {
        for c in 0..3 {
            // Single-channel tensors are written as gray.
            let src = if img.channels() == 1 { 0 } else { c };
            raw[3 * i + c] = quantize8(img.plane(src)[i]);
        }
    }
    let io_err = |source| Error::Io { path: path.to_path_buf(), source };
    let is_pnm = matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm" | "pnm")
    );
    if is_pnm {
        // Binary P6.
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend_from_slice(&raw);
        return fs::write(path, bytes).map_err(io_err);
    }
    image::save_buffer_with_format(path, &raw, w as u32, h as u32, image::ExtendedColorType::Rgb8, ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => io_err(source),
            other => io_err(std::io::Error::other(other)),
        })
}

/// Bilinear resampling with half-pixel-centre alignment.
///
/// Output pixel `(y, x)` samples the source at `((y + 0.5) * h_in / h_out - 0.5, ...)`,
/// clamped to the valid range.
pub fn resize_bilinear<T: Float>(img: &Tensor<T>, new_h: usize, new_w: usize) -> Result<Tensor<T>> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::InvalidArgument(format!("target size {new_h}x{new_w}")));
    }
    if new_h == img.height() && new_w == img.width() {
        return Ok(img.clone());
    }
    let ys = sample_axis(img.height(), new_h);
    let xs = sample_axis(img.width(), new_w);
    let mut out = Tensor::zeros(new_h, new_w, img.channels());
    for c in 0..img.channels() {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        let sw = img.width();
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::from(fy).unwrap();
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::from(fx).unwrap();
                let top = src[y0 * sw + x0] * (T::one() - fx) + src[y0 * sw + x1] * fx;
                let bot = src[y1 * sw + x0] * (T::one() - fx) + src[y1 * sw + x1] * fx;
                dst[oy * new_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

fn sample_axis(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = len_in as f64 / len_out as f64;
    let last = (len_in - 1) as f64;
    (0..len_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Draws a top-left offset for a `size × size` window inside `height × width`.
pub fn random_crop_offset<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    size: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if size == 0 || size > height.min(width) {
        return Err(Error::InvalidArgument(format!("crop size {size} does not fit a {height}x{width} image")));
    }
    Ok((rng.random_range(0..=height - size), rng.random_range(0..=width - size)))
}

/// Square random crop; deterministic for a given RNG state.
pub fn random_crop<T: Float, R: Rng + ?Sized>(img: &Tensor<T>, size: usize, rng: &mut R) -> Result<Tensor<T>> {
    let (y0, x0) = random_crop_offset(img.height(), img.width(), size, rng)?;
    img.crop(y0, x0, size, size)
}

/// Decodable image files (PNG/PPM/PNM) directly inside `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
            .unwrap_or(false);
        if ok && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(h, w, 3, |_, _, _| rng.random::<f32>())
    }

    #[test]
    fn new_rejects_bad_length_and_nan() {
        assert!(matches!(Tensor::<f32>::new(2, 2, 3, vec![0.0; 11]), Err(Error::Shape(_))));
        let mut v = vec![0.0f32; 12];
        v[3] = f32::NAN;
        assert!(Tensor::new(2, 2, 3, v).is_err());
    }

    #[test]
    fn png_bytes_scale_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("px.png");
        let raw = [0u8, 128, 255, 10, 20, 30, 40, 50, 60, 70, 80, 90];
        image::save_buffer(&p, &raw, 2, 2, image::ExtendedColorType::Rgb8).unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!((t.height(), t.width(), t.channels()), (2, 2, 3));
        assert_eq!(t.get(0, 0, 0), 0.0);
        assert_eq!(t.get(1, 0, 0), 128.0 / 255.0);
        assert_eq!(t.get(2, 0, 0), 1.0);
        assert_eq!(t.get(0, 0, 1), 10.0 / 255.0);
    }

    #[test]
    fn gray_png_is_replicated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::save_buffer(&p, &[7u8, 200], 2, 1, image::ExtendedColorType::L8).unwrap();
        let t = load_image(&p).unwrap();
        for c in 0..3 {
            assert_eq!(t.get(c, 0, 1), 200.0 / 255.0);
        }
    }

    #[test]
    fn missing_file_is_not_found() {
        assert!(matches!(load_image("none.png"), Err(Error::NotFound(_))));
    }

    #[test]
    fn garbage_is_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        fs::write(&p, b"definitely not an image").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Decode { .. })));
    }

    #[test]
    fn half_gray_quantizes_to_128_and_overflow_clamps() {
        assert_eq!(quantize8(0.5), 128);
        assert_eq!(quantize8(1.2), 255);
        assert_eq!(quantize8(-0.3), 0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.png");
        save_image(&ImageTensor::filled(3, 4, 3, 0.5), &p).unwrap();
        let back = image::open(&p).unwrap().to_rgb8();
        assert!(back.as_raw().iter().all(|&b| b == 128));
        // Out-of-range by caller error.
        let mut hot = ImageTensor::filled(1, 1, 3, 0.0);
        hot.data_mut()[0] = 1.2;
        save_image(&hot, &p).unwrap();
        assert_eq!(image::open(&p).unwrap().to_rgb8().as_raw()[0], 255);
    }

    #[test]
    fn save_into_missing_dir_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("no/such/dir/x.png");
        assert!(matches!(save_image(&ImageTensor::zeros(2, 2, 3), &p), Err(Error::Io { .. })));
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let img = random_image(5, 7, 3);
        save_image(&img, &p).unwrap();
        assert!(fs::read(&p).unwrap().starts_with(b"P6"));
        let back = load_image(&p).unwrap();
        let q = img.map(|v| f32::from(quantize8(v)) / 255.0);
        assert_eq!(back, q);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = random_image(6, 9, 1);
        assert_eq!(resize_bilinear(&img, 6, 9).unwrap(), img);
        let c = ImageTensor::filled(7, 5, 3, 0.3);
        for (h, w) in [(1, 1), (3, 4), (20, 11)] {
            let r = resize_bilinear(&c, h, w).unwrap();
            assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        }
        assert!(matches!(resize_bilinear(&c, 0, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn crop_full_size_is_whole_image() {
        let img = random_image(8, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop(&img, 8, &mut rng).unwrap(), img);
        assert!(random_crop(&img, 9, &mut rng).is_err());
    }

    #[test]
    fn crop_is_deterministic_per_seed() {
        let img = random_image(40, 30, 5);
        let a = random_crop(&img, 12, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let b = random_crop(&img, 12, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_offsets_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let (y, x) = random_crop_offset(100, 100, 32, &mut rng).unwrap();
            assert!(y <= 68 && x <= 68);
        }
    }

    #[test]
    fn list_images_filters_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.PPM", "c.txt", "d.jpg"] {
            fs::write(dir.path().join(name), b"x").unwrap();
        }
        let names: Vec<_> = list_images(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["a.PPM", "b.png"]);
    }
}
