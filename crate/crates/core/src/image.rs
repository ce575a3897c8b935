//! RGB images as planar f32 in [0, 1]: binary PPM (P6) and PNG codecs,
//! half-pixel bilinear resizing and conversion to network input tensors.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensornet::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    /// `(3, height, width)` planes.
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn from_planes(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::contract(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Fills `[x0, x1) × [y0, y1)` (clamped to the image) with an RGB colour.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, rgb: [f32; 3]) {
        let (x1, y1) = (x1.min(self.width), y1.min(self.height));
        for (c, &v) in rgb.iter().enumerate() {
            for y in y0..y1 {
                for x in x0..x1 {
                    self.set(c, y, x, v);
                }
            }
        }
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize(&self, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::contract(format!(
                "cannot resize {}x{} to {width}x{height}",
                self.width, self.height
            )));
        }
        let taps = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
            let scale = src as f64 / dst as f64;
            (0..dst)
                .map(|o| {
                    let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                    let i0 = s.floor() as usize;
                    (i0, (i0 + 1).min(src - 1), (s - i0 as f64) as f32)
                })
                .collect()
        };
        let tx = taps(width, self.width);
        let ty = taps(height, self.height);
        let mut out = Image::new(width, height);
        for c in 0..3 {
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = (1.0 - lx) * self.get(c, y0, x0) + lx * self.get(c, y0, x1);
                    let bot = (1.0 - lx) * self.get(c, y1, x0) + lx * self.get(c, y1, x1);
                    out.set(c, oy, ox, (1.0 - ly) * top + ly * bot);
                }
            }
        }
        Ok(out)
    }

    /// `(1, 3, H, W)` tensor of `v - 0.5`, zero-padded on the bottom and
    /// right up to multiples of `multiple`.
    pub fn to_tensor(&self, multiple: usize) -> Tensor {
        let m = multiple.max(1);
        let pw = self.width.div_ceil(m) * m;
        let ph = self.height.div_ceil(m) * m;
        let mut t = Tensor::zeros(&[1, 3, ph, pw]);
        let d = t.data_mut();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    d[(c * ph + y) * pw + x] = self.get(c, y, x) - 0.5;
                }
            }
        }
        t
    }

    fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 * self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    fn from_interleaved(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Self {
        let mut img = Image::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let px = &bytes[(y * width + x) * channels..];
                for c in 0..3 {
                    // Grey (and grey-alpha) replicate the single channel.
                    let v = if channels < 3 { px[0] } else { px[c] };
                    img.set(c, y, x, v as f32 / 255.0);
                }
            }
        }
        img
    }

    pub fn write_ppm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.to_rgb8())?;
        Ok(())
    }

    pub fn read_ppm(r: impl Read) -> Result<Image> {
        let mut r = BufReader::new(r);
        let magic = ppm_token(&mut r)?;
        if magic != "P6" {
            return Err(Error::format(format!("expected PPM magic P6, got `{magic}`")));
        }
        let mut field = |name: &str| -> Result<usize> {
            let tok = ppm_token(&mut r)?;
            tok.parse()
                .map_err(|_| Error::format(format!("bad PPM {name} `{tok}`")))
        };
        let width = field("width")?;
        let height = field("height")?;
        let maxval = field("maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::format(format!("unsupported PPM maxval {maxval}")));
        }
        let mut bytes = vec![0u8; 3 * width * height];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::format("truncated PPM pixel data"))?;
        let mut img = Image::from_interleaved(width, height, 3, &bytes);
        if maxval != 255 {
            let s = 255.0 / maxval as f32;
            img.data.iter_mut().for_each(|v| *v = (*v * s).min(1.0));
        }
        Ok(img)
    }

    pub fn write_png(&self, w: impl Write) -> Result<()> {
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::format(format!("PNG encode: {e}")))?;
        writer
            .write_image_data(&self.to_rgb8())
            .map_err(|e| Error::format(format!("PNG encode: {e}")))?;
        Ok(())
    }

    pub fn read_png(r: impl BufRead + std::io::Seek) -> Result<Image> {
        let mut dec = png::Decoder::new(r);
        dec.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = dec
            .read_info()
            .map_err(|e| Error::format(format!("PNG decode: {e}")))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::format("PNG too large"))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::format(format!("PNG decode: {e}")))?;
        let channels = info.color_type.samples();
        let (w, h) = (info.width as usize, info.height as usize);
        Ok(Image::from_interleaved(w, h, channels, &buf[..info.buffer_size()]))
    }

    /// Reads PNG or PPM, chosen by file signature.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(b"\x89PNG") {
            Image::read_png(std::io::Cursor::new(bytes))
        } else if bytes.starts_with(b"P6") {
            Image::read_ppm(&bytes[..])
        } else {
            Err(Error::format(format!("{}: not a PNG or P6 PPM file", path.display())))
        }
    }

    /// Writes PNG for a `.png` extension, PPM otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            self.write_png(file)
        } else {
            self.write_ppm(file)
        }
    }
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn ppm_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    loop {
        let buf = r.fill_buf()?;
        let Some(&b) = buf.first() else {
            if tok.is_empty() {
                return Err(Error::format("unexpected end of PPM header"));
            }
            return Ok(tok);
        };
        r.consume(1);
        match b {
            b'#' if tok.is_empty() => {
                let mut line = Vec::new();
                r.read_until(b'\n', &mut line)?;
            }
            b if b.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            b => tok.push(b as char),
        }
    }
}
