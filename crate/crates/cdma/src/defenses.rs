//! Input-transformation defenses applied in front of the oracle.
//!
//! Four transforms: bit-depth reduction, per-channel median smoothing with
//! reflection padding, a simplified blockwise-DCT JPEG analog (no chroma
//! subsampling or entropy coding; only the lossy transform matters here),
//! and uniform pixel deflection. All map `[0,1]` images to `[0,1]` images of
//! the same shape; the stochastic one is pure given its seed.

use serde::{Deserialize, Serialize};

use crate::error::DefenseError;
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// A defense with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DefenseSpec {
    BitDepthReduce { bits: u8 },
    MedianSmooth { window: usize },
    JpegLite { quality: u8 },
    PixelDeflect { count: usize, window: usize, seed: u64 },
}

impl DefenseSpec {
    /// Short identifier used in CSV rows and report tables.
    pub fn id(&self) -> String {
        match self {
            DefenseSpec::BitDepthReduce { bits } => format!("bdr-{bits}"),
            DefenseSpec::MedianSmooth { window } => format!("ms-{window}"),
            DefenseSpec::JpegLite { quality } => format!("jpeg-{quality}"),
            DefenseSpec::PixelDeflect { count, window, .. } => format!("pd-{count}-{window}"),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor, DefenseError> {
        match *self {
            DefenseSpec::BitDepthReduce { bits } => bit_depth_reduce(x, bits),
            DefenseSpec::MedianSmooth { window } => median_smooth(x, window),
            DefenseSpec::JpegLite { quality } => jpeg_lite(x, quality),
            DefenseSpec::PixelDeflect { count, window, seed } => {
                pixel_deflect(x, count, window, seed)
            }
        }
    }
}

fn image_dims(x: &Tensor) -> Result<(usize, usize, usize), DefenseError> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(DefenseError::BadShape(s.to_vec()));
    }
    Ok((s[0], s[1], s[2]))
}

/// Quantize to `2^bits` levels: `round(x * (2^b - 1)) / (2^b - 1)`.
pub fn bit_depth_reduce(x: &Tensor, bits: u8) -> Result<Tensor, DefenseError> {
    if !(1..=7).contains(&bits) {
        return Err(DefenseError::BitsOutOfRange(bits));
    }
    image_dims(x)?;
    let levels = ((1u32 << bits) - 1) as f32;
    Ok(x.map(|v| (v * levels).round() / levels))
}

/// Per-channel k x k median with symmetric reflection padding.
pub fn median_smooth(x: &Tensor, window: usize) -> Result<Tensor, DefenseError> {
    if window < 3 || window % 2 == 0 {
        return Err(DefenseError::BadWindow(window));
    }
    let (c, h, w) = image_dims(x)?;
    let half = (window / 2) as isize;
    let data = x.data();
    let mut out = vec![0.0f32; data.len()];
    let mut buf = Vec::with_capacity(window * window);
    // Mirror including the edge pixel: -1 -> 0, -2 -> 1, h -> h-1, ...
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i as usize
    };
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                buf.clear();
                for dy in -half..=half {
                    let sy = reflect(y as isize + dy, h);
                    for dx in -half..=half {
                        let sx = reflect(xx as isize + dx, w);
                        buf.push(plane[sy * w + sx]);
                    }
                }
                let mid = buf.len() / 2;
                let (_, median, _) =
                    buf.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
                out[(ch * h + y) * w + xx] = *median;
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out).expect("median shape"))
}

// Standard luminance quantization table, applied per channel.
const QUANT_BASE: [f32; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Orthonormal 8x8 DCT-II basis matrix.
fn dct_matrix() -> [f32; 64] {
    let mut m = [0.0f32; 64];
    for k in 0..8 {
        let scale = if k == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for n in 0..8 {
            m[k * 8 + n] = (scale
                * ((std::f64::consts::PI / 8.0) * (n as f64 + 0.5) * k as f64).cos())
                as f32;
        }
    }
    m
}

fn mat8_mul(a: &[f32; 64], b: &[f32; 64]) -> [f32; 64] {
    let mut out = [0.0f32; 64];
    for i in 0..8 {
        for k in 0..8 {
            let av = a[i * 8 + k];
            if av == 0.0 {
                continue;
            }
            for j in 0..8 {
                out[i * 8 + j] += av * b[k * 8 + j];
            }
        }
    }
    out
}

fn mat8_transpose(a: &[f32; 64]) -> [f32; 64] {
    let mut out = [0.0f32; 64];
    for i in 0..8 {
        for j in 0..8 {
            out[j * 8 + i] = a[i * 8 + j];
        }
    }
    out
}

/// Forward 2-D DCT of one 8x8 block: `D X D^T`.
pub fn dct8x8(block: &[f32; 64]) -> [f32; 64] {
    let d = dct_matrix();
    let dt = mat8_transpose(&d);
    mat8_mul(&mat8_mul(&d, block), &dt)
}

/// Inverse 2-D DCT of one 8x8 block: `D^T Y D`.
pub fn idct8x8(coeffs: &[f32; 64]) -> [f32; 64] {
    let d = dct_matrix();
    let dt = mat8_transpose(&d);
    mat8_mul(&mat8_mul(&dt, coeffs), &d)
}

/// Quality-scaled quantization table (libjpeg scaling convention).
fn quant_table(quality: u8) -> [f32; 64] {
    let q = quality as f32;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0f32; 64];
    for i in 0..64 {
        t[i] = ((QUANT_BASE[i] * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

/// Blockwise-DCT lossy compression analog.
///
/// Channels are processed independently on the 0..255 scale with a 128 level
/// shift; images whose sides are not multiples of 8 are reflection-padded
/// and cropped back. `quality = 100` quantizes every coefficient by 1 and is
/// near-lossless.
pub fn jpeg_lite(x: &Tensor, quality: u8) -> Result<Tensor, DefenseError> {
    if !(1..=100).contains(&quality) {
        return Err(DefenseError::BadQuality(quality));
    }
    let (c, h, w) = image_dims(x)?;
    let hp = h.div_ceil(8) * 8;
    let wp = w.div_ceil(8) * 8;
    let table = quant_table(quality);
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else {
            2 * n - 1 - i
        }
    };
    let data = x.data();
    let mut out = vec![0.0f32; c * h * w];
    let mut block = [0.0f32; 64];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for by in (0..hp).step_by(8) {
            for bx in (0..wp).step_by(8) {
                for y in 0..8 {
                    let sy = reflect(by + y, h);
                    for xx in 0..8 {
                        let sx = reflect(bx + xx, w);
                        block[y * 8 + xx] = plane[sy * w + sx] * 255.0 - 128.0;
                    }
                }
                let mut coeffs = dct8x8(&block);
                for (v, q) in coeffs.iter_mut().zip(table.iter()) {
                    *v = (*v / q).round() * q;
                }
                let rec = idct8x8(&coeffs);
                for y in 0..8 {
                    let oy = by + y;
                    if oy >= h {
                        continue;
                    }
                    for xx in 0..8 {
                        let ox = bx + xx;
                        if ox >= w {
                            continue;
                        }
                        out[(ch * h + oy) * w + ox] =
                            ((rec[y * 8 + xx] + 128.0) / 255.0).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out).expect("jpeg shape"))
}

/// Replace up to `count` random pixels with a uniformly chosen neighbor
/// within a `window`-radius box (all channels move together). Deterministic
/// given `seed`.
pub fn pixel_deflect(
    x: &Tensor,
    count: usize,
    window: usize,
    seed: u64,
) -> Result<Tensor, DefenseError> {
    let (c, h, w) = image_dims(x)?;
    let mut out = x.clone();
    if count == 0 {
        return Ok(out);
    }
    let mut rng = rng_from(seed);
    let r = window as isize;
    for _ in 0..count {
        let y = rand::Rng::gen_range(&mut rng, 0..h) as isize;
        let xx = rand::Rng::gen_range(&mut rng, 0..w) as isize;
        let dy = rand::Rng::gen_range(&mut rng, -r..=r);
        let dx = rand::Rng::gen_range(&mut rng, -r..=r);
        let sy = (y + dy).clamp(0, h as isize - 1) as usize;
        let sx = (xx + dx).clamp(0, w as isize - 1) as usize;
        for ch in 0..c {
            let src = (ch * h + sy) * w + sx;
            let dst = (ch * h + y as usize) * w + xx as usize;
            let v = out.data()[src];
            out.data_mut()[dst] = v;
        }
    }
    Ok(out)
}
