//! Dense 2D buffers, feature maps and netpbm I/O.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `width × height` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

pub type RgbImage = Grid2<[f64; 3]>;
pub type Plane = Grid2<f64>;
pub type Mask = Grid2<bool>;

impl<T: Clone> Grid2<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid2<T> {
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn same_dims<U>(&self, other: &Grid2<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// `height × width × channels` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn texel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn texel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Bilinear sample at continuous feature-map coordinates whose texel
    /// centers sit at integer + 0.5, clamping to the edge texels.
    pub fn sample_bilinear(&self, u: f64, v: f64, out: &mut [f64]) {
        let x = u - 0.5;
        let y = v - 0.5;
        let x0f = x.floor();
        let y0f = y.floor();
        let fx = x - x0f;
        let fy = y - y0f;
        let clamp = |i: f64, n: usize| (i.max(0.0) as usize).min(n - 1);
        let x0 = clamp(x0f, self.width);
        let x1 = clamp(x0f + 1.0, self.width);
        let y0 = clamp(y0f, self.height);
        let y1 = clamp(y0f + 1.0, self.height);
        let (a, b, c, d) = (
            self.texel(x0, y0),
            self.texel(x1, y0),
            self.texel(x0, y1),
            self.texel(x1, y1),
        );
        for ch in 0..self.channels {
            let top = a[ch] * (1.0 - fx) + b[ch] * fx;
            let bot = c[ch] * (1.0 - fx) + d[ch] * fx;
            out[ch] = top * (1.0 - fy) + bot * fy;
        }
    }

    /// Sample at image-pixel coordinates of an image of `image_w × image_h`,
    /// rescaling into this map's resolution.
    pub fn sample_at_image_coords(
        &self,
        u: f64,
        v: f64,
        image_w: usize,
        image_h: usize,
        out: &mut [f64],
    ) {
        let su = u * self.width as f64 / image_w as f64;
        let sv = v * self.height as f64 / image_h as f64;
        self.sample_bilinear(su, sv, out);
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16(v: f64) -> u16 {
    v.clamp(0.0, 65535.0).round() as u16
}

/// Binary PPM (P6, 8-bit).
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for px in &img.data {
        buf.extend(px.iter().map(|&c| to_u8(c)));
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Binary PGM (P5, 16-bit big-endian); `scale` maps values to counts.
pub fn write_pgm16(path: &Path, plane: &Plane, scale: f64) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n65535\n", plane.width, plane.height).into_bytes();
    for &v in &plane.data {
        buf.extend(to_u16(v * scale).to_be_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Depth planes are stored in millimeters.
pub const DEPTH_PGM_SCALE: f64 = 1000.0;
/// Alpha and dynamic-score planes map [0, 1] onto the full 16-bit range.
pub const UNIT_PGM_SCALE: f64 = 65535.0;

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated netpbm header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad netpbm header value {s:?}")))
}

/// Reads an 8-bit P6 file back into [0, 1] floats.
pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    if next_token(&bytes, &mut pos)? != "P6" {
        return Err(Error::Format(format!("{} is not a P6 file", path.display())));
    }
    let w = parse_usize(&next_token(&bytes, &mut pos)?)?;
    let h = parse_usize(&next_token(&bytes, &mut pos)?)?;
    if parse_usize(&next_token(&bytes, &mut pos)?)? != 255 {
        return Err(Error::Format("only 8-bit PPM is supported".into()));
    }
    pos += 1;
    let body = bytes
        .get(pos..pos + w * h * 3)
        .ok_or_else(|| Error::Format("truncated PPM body".into()))?;
    let data = body
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
        .collect();
    Ok(Grid2 {
        width: w,
        height: h,
        data,
    })
}
