//! RGB image buffer with PNG (8-bit) and PFM (32-bit float) codecs.
//!
//! Pixels are f64 linear values, row-major from the top-left. PNG is for
//! previews; loss-bearing comparisons go through PFM so quantization never
//! leaks into metrics.

use crate::error::{Error, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, index = y · width + x.
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Image {
        Image { width, height, data: vec![[0.0; 3]; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Image {
        let mut img = Image::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.data[y * width + x] = f(x, y);
            }
        }
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64; 3] {
        &mut self.data[y * self.width + x]
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let n = (self.data.len() * 3) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>())
            .sum::<f64>()
            / n
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let n = (self.data.len() * 3) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.data
            .iter()
            .zip(&other.data)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() * 3);
        for px in &self.data {
            for c in 0..3 {
                buf.push((px[c].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        image::save_buffer(
            path,
            &buf,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| Error::format(format!("png encode {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::format(format!("png decode {}: {e}", path.display())))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img
            .pixels()
            .map(|p| [p.0[0] as f64 / 255.0, p.0[1] as f64 / 255.0, p.0[2] as f64 / 255.0])
            .collect();
        Ok(Image { width: w, height: h, data })
    }

    /// Little-endian binary PFM, rows bottom-to-top per the format.
    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write!(w, "PF\n{} {}\n-1.0\n", self.width, self.height)?;
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for c in self.pixel(x, y) {
                    w.write_all(&(c as f32).to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_pfm(path: &Path) -> Result<Image> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let bad = |msg: &str| Error::format(format!("pfm {}: {msg}", path.display()));

        let token = |r: &mut BufReader<std::fs::File>| -> Result<String> {
            let mut s = Vec::new();
            loop {
                let mut b = [0u8; 1];
                if r.read(&mut b)? == 0 {
                    break;
                }
                if b[0].is_ascii_whitespace() {
                    if s.is_empty() {
                        continue;
                    }
                    break;
                }
                s.push(b[0]);
            }
            String::from_utf8(s).map_err(|_| Error::format("pfm: non-utf8 header"))
        };

        if token(&mut r)? != "PF" {
            return Err(bad("not a color PFM (missing PF magic)"));
        }
        let width: usize = token(&mut r)?.parse().map_err(|_| bad("bad width"))?;
        let height: usize = token(&mut r)?.parse().map_err(|_| bad("bad height"))?;
        let scale: f64 = token(&mut r)?.parse().map_err(|_| bad("bad scale"))?;
        let little_endian = scale < 0.0;

        let mut raw = vec![0u8; width * height * 12];
        r.read_exact(&mut raw).map_err(|_| bad("truncated pixel data"))?;
        let mut img = Image::new(width, height);
        let mut i = 0;
        for y in (0..height).rev() {
            for x in 0..width {
                let mut px = [0.0; 3];
                for c in &mut px {
                    let bytes: [u8; 4] = raw[i..i + 4].try_into().unwrap();
                    let v = if little_endian {
                        f32::from_le_bytes(bytes)
                    } else {
                        f32::from_be_bytes(bytes)
                    };
                    *c = v as f64;
                    i += 4;
                }
                *img.pixel_mut(x, y) = px;
            }
        }
        Ok(img)
    }

    pub fn load(path: &Path) -> Result<Image> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pfm") => Image::load_pfm(path),
            Some("png") => Image::load_png(path),
            other => Err(Error::format(format!(
                "unsupported image extension {:?} for {}",
                other,
                path.display()
            ))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pfm") => self.save_pfm(path),
            Some("png") => self.save_png(path),
            other => Err(Error::format(format!(
                "unsupported image extension {:?} for {}",
                other,
                path.display()
            ))),
        }
    }
}
