use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Channel-major (`C×H×W`) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Axis-aligned pixel rectangle in source-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("image", "empty image"));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!(
                    "{channels}x{height}x{width} needs {} values, got {}",
                    channels * height * width,
                    data.len()
                ),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn crop(&self, r: Rect) -> Result<Image> {
        if r.height == 0
            || r.width == 0
            || r.top + r.height > self.height
            || r.left + r.width > self.width
        {
            return Err(Error::invalid(
                "crop",
                format!("{r:?} outside {}x{}", self.height, self.width),
            ));
        }
        let mut out = Image::filled(self.channels, r.height, r.width, 0.0);
        for c in 0..self.channels {
            for y in 0..r.height {
                for x in 0..r.width {
                    out.set(c, y, x, self.get(c, r.top + y, r.left + x));
                }
            }
        }
        Ok(out)
    }

    /// Bilinear resampling with half-pixel centres and edge clamping. Equal
    /// sizes reproduce the input exactly.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        let ys = bilinear_taps(self.height, height);
        let xs = bilinear_taps(self.width, width);
        let mut out = Image::filled(self.channels, height, width, 0.0);
        for c in 0..self.channels {
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let top = self.get(c, y0, x0) * (1.0 - wx) + self.get(c, y0, x1) * wx;
                    let bot = self.get(c, y1, x0) * (1.0 - wx) + self.get(c, y1, x1) * wx;
                    out.set(c, oy, ox, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    /// Writes binary PGM (one channel) or PPM (three channels), 8-bit.
    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let bytes = self.to_pnm_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn to_pnm_bytes(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(Error::Format(format!("cannot write {c}-channel image as PNM"))),
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.push(quantize(self.get(c, y, x)));
                }
            }
        }
        Ok(out)
    }

    pub fn read_pnm(path: &Path) -> Result<Image> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(f)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Image::from_pnm_bytes(&bytes)
    }

    /// Parses P2/P3 (ASCII) and P5/P6 (binary) 8-bit pixmaps.
    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Image> {
        let mut cursor = std::io::Cursor::new(bytes);
        let magic = next_token(&mut cursor)?;
        let (channels, ascii) = match magic.as_str() {
            "P2" => (1, true),
            "P3" => (3, true),
            "P5" => (1, false),
            "P6" => (3, false),
            m => return Err(Error::Format(format!("unsupported magic {m:?}"))),
        };
        let width = parse_num(&next_token(&mut cursor)?)?;
        let height = parse_num(&next_token(&mut cursor)?)?;
        let maxval = parse_num(&next_token(&mut cursor)?)?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("maxval {maxval} not in 1..=255")));
        }
        let n = width * height * channels;
        let samples: Vec<usize> = if ascii {
            (0..n)
                .map(|_| next_token(&mut cursor).and_then(|t| parse_num(&t)))
                .collect::<Result<_>>()?
        } else {
            let start = cursor.position() as usize;
            let body = bytes
                .get(start..start + n)
                .ok_or_else(|| Error::Format("truncated pixel data".into()))?;
            body.iter().map(|&b| b as usize).collect()
        };
        let mut data = vec![0.0; n];
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let s = samples[(y * width + x) * channels + c];
                    if s > maxval {
                        return Err(Error::Format(format!("sample {s} exceeds maxval {maxval}")));
                    }
                    data[(c * height + y) * width + x] = s as f64 / maxval as f64;
                }
            }
        }
        Image::new(channels, height, width, data)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_num(t: &str) -> Result<usize> {
    t.parse()
        .map_err(|_| Error::Format(format!("expected a number, found {t:?}")))
}

/// Next whitespace-separated header token, skipping `#` comments. Consumes
/// exactly one trailing whitespace byte, as the binary formats require.
fn next_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r
            .read(&mut byte)
            .map_err(|e| Error::Format(e.to_string()))?;
        if n == 0 {
            if tok.is_empty() {
                return Err(Error::Format("unexpected end of header".into()));
            }
            break;
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut line = Vec::new();
            r.read_until(b'\n', &mut line)
                .map_err(|e| Error::Format(e.to_string()))?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b);
    }
    String::from_utf8(tok).map_err(|e| Error::Format(e.to_string()))
}

/// For each output index, the two source taps and the weight of the second.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let w = if i1 == i0 { 0.0 } else { s - i0 as f64 };
            (i0, i1, w)
        })
        .collect()
}
