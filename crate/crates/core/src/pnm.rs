//! Binary Netpbm I/O: PGM (`P5`) for grayscale and PPM (`P6`) for color,
//! 8 bits per sample.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image8;

pub fn encode(img: &Image8) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.cols(), img.rows()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
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

    fn token(&mut self, what: &str) -> Result<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::MalformedHeader(format!("missing {what}")));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        let tok = self.token(what)?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedHeader(format!("bad {what}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Image8> {
    let mut h = Header { bytes, pos: 0 };
    let channels = match h.token("magic number")? {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::MalformedHeader(format!(
                "unsupported magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let cols = h.number("width")? as usize;
    let rows = h.number("height")? as usize;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedBitDepth(maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(Error::MalformedHeader("missing raster separator".into()));
    }
    let start = h.pos + 1;
    let need = rows * cols * channels;
    if rows == 0 || cols == 0 {
        return Err(Error::MalformedHeader(format!("empty raster {cols}x{rows}")));
    }
    if bytes.len() < start + need {
        return Err(Error::MalformedHeader(format!(
            "truncated raster: need {need} bytes, have {}",
            bytes.len().saturating_sub(start)
        )));
    }
    Image8::new(rows, cols, channels, bytes[start..start + need].to_vec())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image8> {
    decode(&fs::read(path)?)
}

pub fn save_image(img: &Image8, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_pixel_round_trip() {
        let img = Image8::new(1, 1, 1, vec![42]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.pgm");
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n# depth\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let img = decode(&bytes).unwrap();
        assert_eq!((img.rows(), img.cols()), (1, 2));
        assert_eq!(img.pixels(), &[7, 9]);
    }

    #[test]
    fn truncated_file_is_malformed() {
        let img = Image8::filled(4, 4, 3, 10);
        let bytes = encode(&img);
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode(b"P5\n4"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode(b""), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn sixteen_bit_rejected() {
        let mut bytes = b"P5 1 1 65535\n".to_vec();
        bytes.extend_from_slice(&[0, 1]);
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedBitDepth(65535))));
    }

    #[test]
    fn ascii_variant_rejected() {
        assert!(matches!(decode(b"P2 1 1 255\n0"), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image("/nonexistent/nowhere.pgm").unwrap_err();
        assert!(err.is_io());
    }

    proptest! {
        #[test]
        fn round_trip(rows in 1usize..6, cols in 1usize..6, color in any::<bool>(), seed in any::<u64>()) {
            use rand::Rng;
            let ch = if color { 3 } else { 1 };
            let mut rng = crate::seed::rng(seed);
            let px: Vec<u8> = (0..rows * cols * ch).map(|_| rng.random()).collect();
            let img = Image8::new(rows, cols, ch, px).unwrap();
            let bytes = encode(&img);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back), bytes);
            prop_assert_eq!(back, img);
        }
    }
}
