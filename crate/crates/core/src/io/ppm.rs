//! Binary PPM (P6, 8-bit).

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format("non-ASCII PPM header"))?.to_string());
    }
    if fields[0] != "P6" {
        return Err(Error::format(format!("unsupported PPM magic {:?}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(format!("bad PPM header field {s:?}")));
    let (width, height, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 255 {
        return Err(Error::format(format!("only 8-bit PPM is supported (maxval {max})")));
    }
    // exactly one whitespace byte separates the header from the raster
    let body = bytes.get(pos + 1..).unwrap_or(&[]);
    let n = width * height * 3;
    if body.len() < n {
        return Err(Error::format(format!("PPM raster has {} bytes, expected {n}", body.len())));
    }
    Image::new(width, height, body[..n].iter().map(|b| *b as f64 / 255.0).collect())
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    super::write_atomic(path, &encode_ppm(img))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&super::read_file(path)?).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}
