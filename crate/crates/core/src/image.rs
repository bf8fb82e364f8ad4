//! `[0,1]`-valued images and binary PPM/PGM I/O.

use std::fs;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// A `(C,H,W)` image with `C ∈ {1, 3}` and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Tensor);

impl Image {
    /// Validate the layout and clamp values into `[0, 1]`.
    pub fn new(t: Tensor) -> Result<Self> {
        t.expect_rank(3, "image")?;
        if !matches!(t.dim(0), 1 | 3) {
            return invalid(format!("images have 1 or 3 channels, got {}", t.dim(0)));
        }
        let t = t.ensure_finite("image ingest")?;
        Ok(Self(t.map(|v| v.clamp(0.0, 1.0))))
    }

    pub fn channels(&self) -> usize {
        self.0.dim(0)
    }

    pub fn height(&self) -> usize {
        self.0.dim(1)
    }

    pub fn width(&self) -> usize {
        self.0.dim(2)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Snap every value to the nearest multiple of 1/255.
    pub fn quantize8(&self) -> Image {
        Image(self.0.map(|v| (v * 255.0).round() / 255.0))
    }

    /// Binary P6 (three channels) or P5 (one channel), maxval 255.
    pub fn to_pnm(&self) -> Vec<u8> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let magic = if c == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
        let plane = h * w;
        let d = self.0.data();
        out.reserve(c * plane);
        for p in 0..plane {
            for ch in 0..c {
                out.push((d[ch * plane + p] * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Image> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        let c = match magic.as_str() {
            "P6" => 3,
            "P5" => 1,
            other => return Err(Error::Format(format!("unsupported image magic {other:?}"))),
        };
        let w = parse_dim(&next_token(bytes, &mut pos)?)?;
        let h = parse_dim(&next_token(bytes, &mut pos)?)?;
        let maxval = parse_dim(&next_token(bytes, &mut pos)?)?;
        if maxval > 255 {
            return Err(Error::Format(format!("only 8-bit images are supported (maxval {maxval})")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let need = c * h * w;
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| Error::Format(format!("raster truncated: need {need} bytes")))?;
        let plane = h * w;
        let mut data = vec![0.0; need];
        for p in 0..plane {
            for ch in 0..c {
                data[ch * plane + p] = raster[p * c + ch] as f64 / maxval as f64;
            }
        }
        Image::new(Tensor::new(&[c, h, w], data)?)
    }

    pub fn read(path: &Path) -> Result<Image> {
        Image::from_pnm(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pnm())?;
        Ok(())
    }

    /// File extension matching the channel count.
    pub fn extension(&self) -> &'static str {
        if self.channels() == 3 {
            "ppm"
        } else {
            "pgm"
        }
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            None => return Err(Error::Format("header truncated".into())),
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_dim(s: &str) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::Format(format!("bad header field {s:?}"))),
    }
}
