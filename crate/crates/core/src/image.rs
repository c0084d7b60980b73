//! Grayscale rasters and their file formats (16-bit PGM/PNG, 8-bit masks).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("PNG decode error: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("PNG encode error: {0}")]
    PngEncode(#[from] png::EncodingError),
    #[error("malformed image: {0}")]
    Format(String),
    #[error("data length {len} does not match {width}x{height}")]
    Size { width: u32, height: u32, len: usize },
}

/// Read access shared by integer and floating-point rasters so the phase
/// code can run on rendered frames and on continuous test signals alike.
pub trait Raster: Sync {
    fn width(&self) -> u32;
    fn height(&self) -> u32;
    /// Sample at row-major index `i`.
    fn sample(&self, i: usize) -> f64;

    fn dims(&self) -> (u32, u32) {
        (self.width(), self.height())
    }

    fn len(&self) -> usize {
        self.width() as usize * self.height() as usize
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major 16-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage16 {
    width: u32,
    height: u32,
    data: Vec<u16>,
}

impl GrayImage16 {
    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, 0)
    }

    pub fn filled(width: u32, height: u32, value: u16) -> Self {
        GrayImage16 { width, height, data: vec![value; width as usize * height as usize] }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<u16>) -> Result<Self, ImageError> {
        if data.len() != width as usize * height as usize {
            return Err(ImageError::Size { width, height, len: data.len() });
        }
        Ok(GrayImage16 { width, height, data })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u16) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage16 { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u16> {
        self.data
    }

    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: u16) {
        self.data[y as usize * self.width as usize + x as usize] = value;
    }

    /// Bilinear lookup with pixel centres at integer coordinates and
    /// edge clamping. Returns a value in `[0, 65535]`.
    pub fn bilinear(&self, u: f64, v: f64) -> f64 {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let u = u.clamp(0.0, max_x);
        let v = v.clamp(0.0, max_y);
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = u - x0;
        let fy = v - y0;
        let x0 = x0 as u32;
        let y0 = y0 as u32;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let p00 = self.get(x0, y0) as f64;
        let p10 = self.get(x1, y0) as f64;
        let p01 = self.get(x0, y1) as f64;
        let p11 = self.get(x1, y1) as f64;
        let top = p00 + (p10 - p00) * fx;
        let bottom = p01 + (p11 - p01) * fx;
        top + (bottom - top) * fy
    }

    /// Writes a binary PGM (`P5`, maxval 65535, big-endian samples).
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P5\n{} {}\n65535\n", self.width, self.height)?;
        for v in &self.data {
            w.write_all(&v.to_be_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an 8- or 16-bit binary PGM; 8-bit data is widened by `x * 257`.
    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let mut r = BufReader::new(File::open(path)?);
        let header = read_pgm_header(&mut r)?;
        let n = header.width as usize * header.height as usize;
        let data = if header.maxval > 255 {
            let mut buf = vec![0u8; n * 2];
            r.read_exact(&mut buf)?;
            let scale = 65535.0 / header.maxval as f64;
            buf.chunks_exact(2)
                .map(|c| rescale(u16::from_be_bytes([c[0], c[1]]) as f64 * scale))
                .collect()
        } else {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)?;
            let scale = 65535.0 / header.maxval as f64;
            buf.into_iter().map(|b| rescale(b as f64 * scale)).collect()
        };
        GrayImage16::from_vec(header.width, header.height, data)
    }

    /// Writes a 16-bit grayscale PNG, or an 8-bit one (high byte) when
    /// `eight_bit` is set.
    pub fn write_png(&self, path: impl AsRef<Path>, eight_bit: bool) -> Result<(), ImageError> {
        let w = BufWriter::new(File::create(path)?);
        let mut encoder = png::Encoder::new(w, self.width, self.height);
        encoder.set_color(png::ColorType::Grayscale);
        if eight_bit {
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder.write_header()?;
            let bytes: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
            writer.write_image_data(&bytes)?;
            writer.finish()?;
        } else {
            encoder.set_depth(png::BitDepth::Sixteen);
            let mut writer = encoder.write_header()?;
            let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_be_bytes()).collect();
            writer.write_image_data(&bytes)?;
            writer.finish()?;
        }
        Ok(())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf)?;
        if info.color_type != png::ColorType::Grayscale {
            return Err(ImageError::Format(format!("expected grayscale PNG, got {:?}", info.color_type)));
        }
        let bytes = &buf[..info.buffer_size()];
        let data = match info.bit_depth {
            png::BitDepth::Sixteen => bytes.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
            png::BitDepth::Eight => bytes.iter().map(|b| *b as u16 * 257).collect(),
            other => return Err(ImageError::Format(format!("unsupported PNG bit depth {other:?}"))),
        };
        GrayImage16::from_vec(info.width, info.height, data)
    }

    /// Dispatches on the file extension (`.png`, otherwise PGM).
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        if has_png_extension(path) {
            self.write_png(path, false)
        } else {
            self.write_pgm(path)
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        if has_png_extension(path) {
            Self::read_png(path)
        } else {
            Self::read_pgm(path)
        }
    }
}

impl Raster for GrayImage16 {
    fn width(&self) -> u32 {
        self.width
    }
    fn height(&self) -> u32 {
        self.height
    }
    fn sample(&self, i: usize) -> f64 {
        self.data[i] as f64
    }
}

/// Row-major `f64` raster used for continuous-valued test signals.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> f64) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        FloatImage { width, height, data }
    }
}

impl Raster for FloatImage {
    fn width(&self) -> u32 {
        self.width
    }
    fn height(&self) -> u32 {
        self.height
    }
    fn sample(&self, i: usize) -> f64 {
        self.data[i]
    }
}

/// Rounds and clamps a value into the 16-bit range.
pub fn rescale(v: f64) -> u16 {
    if v.is_nan() {
        0
    } else {
        v.round().clamp(0.0, 65535.0) as u16
    }
}

fn to_u8(v: u16) -> u8 {
    ((v as u32 * 255 + 32767) / 65535) as u8
}

fn has_png_extension(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Writes a boolean mask as an 8-bit PGM (255 = set).
pub fn write_mask_pgm(path: impl AsRef<Path>, width: u32, height: u32, mask: &[bool]) -> Result<(), ImageError> {
    if mask.len() != width as usize * height as usize {
        return Err(ImageError::Size { width, height, len: mask.len() });
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = mask.iter().map(|m| if *m { 255 } else { 0 }).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<(u32, u32, Vec<bool>), ImageError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_pgm_header(&mut r)?;
    if header.maxval > 255 {
        return Err(ImageError::Format("mask PGM must be 8-bit".into()));
    }
    let mut buf = vec![0u8; header.width as usize * header.height as usize];
    r.read_exact(&mut buf)?;
    Ok((header.width, header.height, buf.into_iter().map(|b| b > 127).collect()))
}

struct PgmHeader {
    width: u32,
    height: u32,
    maxval: u32,
}

fn read_pgm_header(r: &mut impl BufRead) -> Result<PgmHeader, ImageError> {
    let mut tokens = Vec::with_capacity(4);
    let mut byte = [0u8; 1];
    let mut current = String::new();
    while tokens.len() < 4 {
        if r.read(&mut byte)? == 0 {
            return Err(ImageError::Format("truncated PGM header".into()));
        }
        let c = byte[0] as char;
        if c == '#' && current.is_empty() {
            let mut comment = String::new();
            r.read_line(&mut comment)?;
        } else if c.is_ascii_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else {
            current.push(c);
        }
    }
    if tokens[0] != "P5" {
        return Err(ImageError::Format(format!("unsupported PGM magic {:?}", tokens[0])));
    }
    let parse = |s: &str| s.parse::<u32>().map_err(|_| ImageError::Format(format!("bad PGM header field {s:?}")));
    let header = PgmHeader { width: parse(&tokens[1])?, height: parse(&tokens[2])?, maxval: parse(&tokens[3])? };
    if header.maxval == 0 || header.maxval > 65535 {
        return Err(ImageError::Format(format!("bad PGM maxval {}", header.maxval)));
    }
    Ok(header)
}
