use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// File name of the camera frame captured at time `t`.
pub fn frame_file_name(t: f64) -> String {
    format!("{t:.6}.pgm")
}

/// Reads a binary (P5) or ASCII (P2) PGM with maxval up to 255. Intensities
/// are scaled to `[0, 1]`; all pixels are valid.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let err = |offset: usize, m: &str| Error::Parse {
        offset,
        message: m.to_string(),
    };
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<(usize, String)> {
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
            return Err(err(start, "unexpected end of file"));
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
    };
    let (_, magic) = token(&mut pos)?;
    let ascii = match magic.as_str() {
        "P5" => false,
        "P2" => true,
        _ => return Err(err(0, "not a P5/P2 PGM")),
    };
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let (off, t) = token(&mut pos)?;
        *d = t.parse().map_err(|_| err(off, "bad header number"))?;
    }
    let [w, h, maxval] = dims;
    if maxval == 0 || maxval > 255 {
        return Err(err(pos, "only 8-bit PGM is supported"));
    }
    let scale = maxval as f64;
    let mut data = Vec::with_capacity(w * h);
    if ascii {
        for _ in 0..w * h {
            let (off, t) = token(&mut pos)?;
            let v: u32 = t.parse().map_err(|_| err(off, "bad pixel value"))?;
            data.push(v.min(maxval as u32) as f64 / scale);
        }
    } else {
        pos += 1;
        let body = bytes
            .get(pos..pos + w * h)
            .ok_or_else(|| err(bytes.len(), "truncated pixel data"))?;
        data.extend(body.iter().map(|&b| (b as usize).min(maxval) as f64 / scale));
    }
    Ok(GrayImage::from_data(w, h, data))
}

/// Writes an 8-bit binary PGM. Masked-out pixels are written as 0.
pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .zip(image.mask())
            .map(|(&v, &m)| if m { (v.clamp(0.0, 1.0) * 255.0).round() as u8 } else { 0 }),
    );
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let img = GrayImage::from_fn(5, 3, |x, y| ((x * 3 + y * 50) % 256) as f64 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(frame_file_name(1.5));
        assert!(path.ends_with("1.500000.pgm"));
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ascii_with_comments() {
        let img = parse_pgm(b"P2\n# hello\n2 1\n15\n0 15\n").unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
        assert!(parse_pgm(b"P5\n2 2\n255\n\x01").is_err());
    }
}
