//! Binary Netpbm: P6 (RGB pixmap) for images, P5 (graymap) for depth.
//!
//! Only `maxval = 255` is accepted. Samples map to `[0, 1]` as `v / 255`
//! and are written back as `round(v * 255)` after clamping.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::haze::DepthMap;
use crate::tensor::{Shape, Tensor};

struct Header {
    width: usize,
    height: usize,
    /// Offset of the first pixel byte.
    data_start: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::ImageFormat {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                self.pos = start;
                self.fail(format!("{what} out of range"))
            })
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(cur.fail(format!("expected magic `{}`", String::from_utf8_lossy(magic))));
    }
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        cur.pos = maxval_at;
        cur.skip_space_and_comments();
        return Err(cur.fail(format!("maxval {maxval} is not supported (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(cur.fail("zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.fail("expected whitespace after maxval")),
    }
    Ok(Header {
        width,
        height,
        data_start: cur.pos,
    })
}

fn raster<'a>(bytes: &'a [u8], header: &Header, channels: usize, path: &Path) -> Result<&'a [u8]> {
    let expected = header.width * header.height * channels;
    let actual = bytes.len() - header.data_start;
    if actual < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    Ok(&bytes[header.data_start..header.data_start + expected])
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let header = parse_header(bytes, b"P6", path)?;
    let pixels = raster(bytes, &header, 3, path)?;
    let (h, w) = (header.height, header.width);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        pixels[(y * w + x) * 3 + c] as f32 / 255.0
    }))
}

pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape("write_image", format!("expected (1, 3, h, w), got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.reserve(s.numel());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push(quantize(image.at(0, c, y, x)));
            }
        }
    }
    Ok(out)
}

fn quantize(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Read a binary P6 file as a `(1, 3, h, w)` tensor in `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn write_image(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

/// Read a binary P5 depth map; samples map to `[0, 1]`.
pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes, b"P5", path)?;
    let pixels = raster(&bytes, &header, 1, path)?;
    DepthMap::new(
        header.height,
        header.width,
        pixels.iter().map(|&v| v as f32 / 255.0).collect(),
    )
}

/// Write a depth map as P5. Values are expected in `[0, 1]`.
pub fn write_depth(depth: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", depth.width(), depth.height()).into_bytes();
    out.extend(depth.values().iter().map(|&v| quantize(v)));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(name: &str) -> &Path {
        Path::new(name)
    }

    #[test]
    fn single_white_pixel() {
        let t = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff", p("w.ppm")).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 1));
        assert_eq!(t.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let t = decode_ppm(
            b"P6 # made by hand\n2 1 # dims\n255\n\x00\x00\x00\xff\x80\x00",
            p("c.ppm"),
        )
        .unwrap();
        assert_eq!(t.at(0, 1, 0, 1), 128.0 / 255.0);
    }

    #[test]
    fn truncated_payload_reports_counts() {
        let err = decode_ppm(b"P6\n2 2\n255\n\x00\x00\x00", p("t.ppm")).unwrap_err();
        match err {
            Error::Truncated { expected, actual, .. } => assert_eq!((expected, actual), (12, 3)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_maxval_reports_offset() {
        let err = decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00", p("m.ppm")).unwrap_err();
        match err {
            Error::ImageFormat { offset, .. } => assert_eq!(offset, 7),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_magic_and_missing_fields() {
        assert!(matches!(
            decode_ppm(b"P3\n1 1\n255\n", p("a")),
            Err(Error::ImageFormat { offset: 0, .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 \n", p("a")),
            Err(Error::ImageFormat { .. })
        ));
        assert!(matches!(decode_ppm(b"", p("a")), Err(Error::ImageFormat { .. })));
        assert!(matches!(
            decode_ppm(b"P6\n0 1\n255\n", p("a")),
            Err(Error::ImageFormat { .. })
        ));
    }

    proptest! {
        #[test]
        fn write_then_read_is_within_half_a_step(values in prop::collection::vec(0.0f32..=1.0, 3 * 5 * 4)) {
            let img = Tensor::from_vec([1, 3, 5, 4], values).unwrap();
            let back = decode_ppm(&encode_ppm(&img).unwrap(), p("rt.ppm")).unwrap();
            prop_assert!(back.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-7);
            // Quantized values survive exactly.
            let again = decode_ppm(&encode_ppm(&back).unwrap(), p("rt.ppm")).unwrap();
            prop_assert_eq!(again, back);
        }
    }
}
