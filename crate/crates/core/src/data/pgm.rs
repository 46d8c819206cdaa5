//! Binary PGM (P5, maxval 255) images and manifest-driven loading.

use std::path::Path;

use super::{Dataset, IMAGE_SIDE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    /// Maps values linearly so that `min → 0` and `max → 255`; a constant
    /// input becomes all zeros.
    pub fn min_max(width: usize, height: usize, values: &[f64]) -> Pgm {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let pixels = values
            .iter()
            .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
            .collect();
        Pgm { width, height, pixels }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Parses a P5 image. Header comments (`#` to end of line) are skipped.
pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<Pgm, String> {
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
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("not a binary PGM (magic `{}`)", fields[0]));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} `{s}`"));
    let width = num(&fields[1], "width")?;
    let height = num(&fields[2], "height")?;
    let maxval = num(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported, expected 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(format!("raster has {} bytes, expected {need}", bytes.len().saturating_sub(pos)));
    }
    Ok(Pgm {
        width,
        height,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|detail| Error::Data {
        path: path.to_path_buf(),
        detail,
    })
}

pub fn write_pgm(path: &Path, image: &Pgm) -> Result<()> {
    std::fs::write(path, image.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads the images listed in a `relative_path,label` manifest. Paths are
/// relative to the manifest's directory; blank lines are ignored. Stops at
/// the first bad file.
pub fn load_image_dir(manifest: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad_line = |detail: String| Error::Data {
            path: manifest.to_path_buf(),
            detail: format!("line {}: {detail}", lineno + 1),
        };
        let (rel, label) = line
            .rsplit_once(',')
            .ok_or_else(|| bad_line(format!("expected `path,label`, got `{line}`")))?;
        let path = root.join(rel.trim());
        let label = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Data {
                    path,
                    detail: format!("unknown label `{other}`"),
                })
            }
        };
        let pgm = read_pgm(&path)?;
        if (pgm.width, pgm.height) != (IMAGE_SIDE, IMAGE_SIDE) {
            return Err(Error::Data {
                path,
                detail: format!("image is {}x{}, expected {IMAGE_SIDE}x{IMAGE_SIDE}", pgm.width, pgm.height),
            });
        }
        images.push(pgm.pixels.iter().map(|&p| p as f32 / 255.0).collect());
        labels.push(label);
    }
    Dataset::new(images, labels)
}
