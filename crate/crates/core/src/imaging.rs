//! RGB image buffers, PNG I/O and full-reference quality metrics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use usv_nn::{Scalar, Tensor};

use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 8;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak value of the 8-bit scale on which MSE is reported.
pub const PIXEL_SCALE: f64 = 255.0;

/// ITU-R BT.601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// H x W x 3 raster, row-major interleaved RGB, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{height}x{width} is smaller than the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Build from a per-pixel function; outputs are clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|v| clamp01(*v)));
            }
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = clamp01(rgb[c]);
        }
    }

    /// Per-pixel BT.601 luma.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect()
    }

    /// Photographic negative `1 - v`.
    pub fn negative(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// Round every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
        }
    }

    /// 2x2 box-filter downsampling (odd trailing row/column dropped).
    pub fn downsample2(&self) -> Result<Self> {
        let (h, w) = (self.height / 2, self.width / 2);
        Self::from_fn(h, w, |y, x| {
            let mut acc = [0.0; 3];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let p = self.pixel(2 * y + dy, 2 * x + dx);
                for c in 0..3 {
                    acc[c] += p[c] * 0.25;
                }
            }
            acc
        })
    }

    /// NCHW tensor with a batch dimension of one.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w) = self.dims();
        let mut out = vec![T::zero(); 3 * h * w];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * h * w + i] = T::lit(px[c]);
            }
        }
        Tensor::from_vec([1, 3, h, w], out)
    }

    /// Batch item `n` of a 3-channel tensor, clamped into `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        if t.c() != 3 {
            return Err(Error::InvalidImage(format!("tensor has {} channels, expected 3", t.c())));
        }
        let (h, w) = (t.h(), t.w());
        let s = t.sample(n);
        let mut data = Vec::with_capacity(3 * h * w);
        for i in 0..h * w {
            for c in 0..3 {
                data.push(clamp01(s[c * h * w + i].to_f64().unwrap_or(0.0)));
            }
        }
        Self::new(h, w, data)
    }
}

#[inline]
pub fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Round-half-up to an 8-bit level.
#[inline]
pub fn to_u8(v: f64) -> u8 {
    (clamp01(v) * 255.0 + 0.5).floor().min(255.0) as u8
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch { left: a.dims(), right: b.dims() });
    }
    Ok(())
}

/// Mean squared error of `scale * a` against `scale * b`.
pub fn mse(a: &ImageBuffer, b: &ImageBuffer, scale: f64) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (scale * (x - y)).powi(2)).sum();
    Ok(sum / a.data.len() as f64)
}

pub fn psnr_from_mse(mse: f64, scale: f64) -> Result<f64> {
    if !(mse > 0.0) {
        return Err(Error::InvalidArgument(format!("psnr_from_mse needs mse > 0, got {mse}")));
    }
    Ok(10.0 * (scale * scale / mse).log10())
}

/// PSNR in dB, [`PSNR_CAP_DB`] for identical images.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, scale: f64) -> Result<f64> {
    psnr_capped(a, b, scale, PSNR_CAP_DB)
}

pub fn psnr_capped(a: &ImageBuffer, b: &ImageBuffer, scale: f64, cap_db: f64) -> Result<f64> {
    let e = mse(a, b, scale)?;
    if e == 0.0 {
        Ok(cap_db)
    } else {
        Ok(psnr_from_mse(e, scale)?.min(cap_db))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as f64;
    let raw: Vec<f64> = (0..window).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" correlation of an `h x w` plane with `taps` in both axes.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM over every fully contained Gaussian window of the
/// BT.601 luminance planes (dynamic range 1).
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, params: &SsimParams) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w) = a.dims();
    if params.window.is_multiple_of(2) || params.window == 0 || params.window > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "ssim window {} must be odd and at most {}",
            params.window,
            h.min(w)
        )));
    }
    let la = a.luminance();
    let lb = b.luminance();
    let taps = gaussian_taps(params.window, params.sigma);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&la, h, w, &taps);
    let mu_b = filter_valid(&lb, h, w, &taps);
    let e_aa = filter_valid(&prod(&la, &la), h, w, &taps);
    let e_bb = filter_valid(&prod(&lb, &lb), h, w, &taps);
    let e_ab = filter_valid(&prod(&la, &lb), h, w, &taps);
    let c1 = params.k1 * params.k1;
    let c2 = params.k2 * params.k2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let png_err = |e: png::DecodingError| Error::Png { path: path.to_path_buf(), message: e.to_string() };
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png { path: path.to_path_buf(), message: "image too large".into() })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let bytes = &buf[..info.buffer_size()];
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = Vec::with_capacity(h * w * 3);
    match info.color_type {
        png::ColorType::Rgb => data.extend(bytes.iter().map(|&b| b as f64 / 255.0)),
        png::ColorType::Rgba => {
            for px in bytes.chunks_exact(4) {
                data.extend(px[..3].iter().map(|&b| b as f64 / 255.0));
            }
        }
        png::ColorType::Grayscale => {
            for &g in bytes {
                data.extend([g as f64 / 255.0; 3]);
            }
        }
        png::ColorType::GrayscaleAlpha => {
            for px in bytes.chunks_exact(2) {
                data.extend([px[0] as f64 / 255.0; 3]);
            }
        }
        png::ColorType::Indexed => {
            return Err(Error::Png {
                path: path.to_path_buf(),
                message: "indexed color survived expansion".into(),
            })
        }
    }
    ImageBuffer::new(h, w, data)
}

pub fn save_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let enc_err = |e: png::EncodingError| Error::Png { path: path.to_path_buf(), message: e.to_string() };
    let mut writer = encoder.write_header().map_err(enc_err)?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    writer.write_image_data(&bytes).map_err(enc_err)?;
    writer.finish().map_err(enc_err)?;
    Ok(())
}

/// One row of a PSNR / SSIM / MSE comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub psnr_db: f64,
    pub ssim: f64,
    /// On the 0-255 scale.
    pub mse: f64,
    pub n_images: usize,
}

impl MetricsReport {
    /// PSNR is always derived from `mse`, never measured separately.
    pub fn from_mse(label: impl Into<String>, mse: f64, ssim: f64, n_images: usize) -> Result<Self> {
        if !(mse >= 0.0) || !mse.is_finite() {
            return Err(Error::InvalidArgument(format!("mse must be finite and >= 0, got {mse}")));
        }
        if !(-1.0..=1.0).contains(&ssim) {
            return Err(Error::InvalidArgument(format!("ssim {ssim} outside [-1, 1]")));
        }
        let psnr_db = if mse == 0.0 { PSNR_CAP_DB } else { psnr_from_mse(mse, PIXEL_SCALE)?.min(PSNR_CAP_DB) };
        Ok(Self { label: label.into(), psnr_db, ssim, mse, n_images })
    }

    /// Average metrics of `(candidate, reference)` pairs. MSE and SSIM are
    /// means over images; PSNR follows from the mean MSE.
    pub fn evaluate<'a>(
        label: impl Into<String>,
        pairs: impl IntoIterator<Item = (&'a ImageBuffer, &'a ImageBuffer)>,
        ssim_params: &SsimParams,
    ) -> Result<Self> {
        let (mut mse_sum, mut ssim_sum, mut n) = (0.0, 0.0, 0usize);
        for (cand, reference) in pairs {
            mse_sum += mse(cand, reference, PIXEL_SCALE)?;
            ssim_sum += ssim(cand, reference, ssim_params)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::InvalidArgument("no image pairs to evaluate".into()));
        }
        Self::from_mse(label, mse_sum / n as f64, ssim_sum / n as f64, n)
    }
}

pub const METRICS_CSV_HEADER: &str = "label,psnr,ssim,mse,n_images";

pub fn metrics_csv(rows: &[MetricsReport]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{:.2},{:.2},{:.2},{}\n", r.label, r.psnr_db, r.ssim, r.mse, r.n_images));
    }
    out
}

/// Write `<stem>.csv` (table formatting) and `<stem>.json` (full precision).
pub fn write_metrics(rows: &[MetricsReport], dir: &Path, stem: &str) -> Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, metrics_csv(rows)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join(format!("{stem}.json"));
    let mut f = BufWriter::new(File::create(&json).map_err(|e| Error::io(&json, e))?);
    serde_json::to_writer_pretty(&mut f, rows)?;
    f.write_all(b"\n").map_err(|e| Error::io(&json, e))?;
    Ok(())
}
