//! Binary PPM/PGM images, plain-text manifests and video directories.
//!
//! A video directory holds `frame_NNNN.ppm` files listed in `frames.txt` and,
//! optionally, `mask_NNNN.pgm` label maps listed in `masks.txt`. Predictions
//! are written as `label_NNNN.pgm` listed in `labels.txt`. Manifests hold one
//! file name per line, relative to the directory; blank lines and `#`
//! comments are skipped.

use std::fs;
use std::path::{Path, PathBuf};

use tensorlab::Tensor;

use crate::error::{input, QmvosError, Result};
use crate::evalsynth::LabelMap;

pub const FRAMES_MANIFEST: &str = "frames.txt";
pub const MASKS_MANIFEST: &str = "masks.txt";
pub const LABELS_MANIFEST: &str = "labels.txt";

/// Interleaved 8-bit RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return input(format!("RGB image {height}×{width} with {} bytes", data.len()));
        }
        Ok(Self { height, width, data })
    }

    /// Planar `3×H×W` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            f64::from(self.data[(i % hw) * 3 + i / hw]) / 255.0
        })
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> QmvosError {
    QmvosError::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Parses a binary netpbm header; returns `(width, height, maxval, data offset)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(
            path,
            format!("magic: expected `{}`", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or_default();
        fields[i] = text
            .parse()
            .map_err(|_| format_err(path, format!("header field `{name}` is missing or not a number")))?;
        if fields[i] == 0 {
            return Err(format_err(path, format!("header field `{name}` must be positive")));
        }
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err(path, "header must end with one whitespace byte")),
    }
    if fields[2] > 255 {
        return Err(format_err(path, format!("header field `maxval` = {} exceeds 255", fields[2])));
    }
    Ok((fields[0], fields[1], fields[2], pos))
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let (w, h, maxval, off) = parse_header(bytes, b"P6", path)?;
    if maxval != 255 {
        return Err(format_err(path, format!("header field `maxval` = {maxval}, expected 255")));
    }
    let body = &bytes[off..];
    if body.len() != w * h * 3 {
        return Err(format_err(path, format!("pixel data: {} bytes for {w}×{h}", body.len())));
    }
    RgbImage::new(h, w, body.to_vec())
}

pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend_from_slice(&map.data);
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<LabelMap> {
    let (w, h, maxval, off) = parse_header(bytes, b"P5", path)?;
    let body = &bytes[off..];
    if body.len() != w * h {
        return Err(format_err(path, format!("pixel data: {} bytes for {w}×{h}", body.len())));
    }
    if let Some(&v) = body.iter().find(|&&v| v as usize > maxval) {
        return Err(format_err(path, format!("pixel value {v} exceeds maxval {maxval}")));
    }
    LabelMap::new(h, w, body.to_vec())
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    Ok(fs::write(path, encode_ppm(img))?)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    decode_ppm(&read(path)?, path)
}

pub fn write_pgm(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    Ok(fs::write(path, encode_pgm(map))?)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    decode_pgm(&read(path)?, path)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_manifest(path: impl AsRef<Path>, names: &[String]) -> Result<()> {
    let mut text = String::new();
    for n in names {
        text.push_str(n);
        text.push('\n');
    }
    Ok(fs::write(path, text)?)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = String::from_utf8(read(path)?).map_err(|_| format_err(path, "manifest is not UTF-8"))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(format_err(path, "manifest lists no files"));
    }
    Ok(names)
}

fn numbered(prefix: &str, i: usize, ext: &str) -> String {
    format!("{prefix}_{i:04}.{ext}")
}

pub fn write_frames(dir: impl AsRef<Path>, frames: &[RgbImage]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let names: Vec<String> = (0..frames.len()).map(|i| numbered("frame", i, "ppm")).collect();
    for (n, f) in names.iter().zip(frames) {
        write_ppm(dir.join(n), f)?;
    }
    write_manifest(dir.join(FRAMES_MANIFEST), &names)
}

fn write_label_set(dir: &Path, maps: &[LabelMap], prefix: &str, manifest: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let names: Vec<String> = (0..maps.len()).map(|i| numbered(prefix, i, "pgm")).collect();
    for (n, m) in names.iter().zip(maps) {
        write_pgm(dir.join(n), m)?;
    }
    write_manifest(dir.join(manifest), &names)
}

pub fn write_masks(dir: impl AsRef<Path>, masks: &[LabelMap]) -> Result<()> {
    write_label_set(dir.as_ref(), masks, "mask", MASKS_MANIFEST)
}

pub fn write_labels(dir: impl AsRef<Path>, labels: &[LabelMap]) -> Result<()> {
    write_label_set(dir.as_ref(), labels, "label", LABELS_MANIFEST)
}

pub fn read_frames(dir: impl AsRef<Path>) -> Result<Vec<RgbImage>> {
    let dir = dir.as_ref();
    let frames = read_manifest(dir.join(FRAMES_MANIFEST))?
        .iter()
        .map(|n| read_ppm(dir.join(n)))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (frames[0].height, frames[0].width);
    if let Some(f) = frames.iter().find(|f| (f.height, f.width) != (h, w)) {
        return input(format!("frames differ in size: {h}×{w} vs {}×{}", f.height, f.width));
    }
    Ok(frames)
}

/// Label maps from `labels.txt`, falling back to `masks.txt`.
pub fn read_label_dir(dir: impl AsRef<Path>) -> Result<Vec<LabelMap>> {
    let dir = dir.as_ref();
    let manifest: PathBuf = [LABELS_MANIFEST, MASKS_MANIFEST]
        .iter()
        .map(|m| dir.join(m))
        .find(|p| p.exists())
        .ok_or_else(|| format_err(dir, format!("neither {LABELS_MANIFEST} nor {MASKS_MANIFEST} found")))?;
    read_manifest(&manifest)?.iter().map(|n| read_pgm(dir.join(n))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_and_layout() {
        let img = RgbImage::new(2, 3, (0..18).collect()).unwrap();
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(decode_ppm(&bytes, Path::new("x")).unwrap(), img);
        let t = img.to_tensor();
        assert_eq!(t.shape(), [3, 2, 3]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[6], 1.0 / 255.0);
        assert_eq!(t.data()[1], 3.0 / 255.0);
    }

    #[test]
    fn pgm_round_trip_with_comments() {
        let m = LabelMap::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&m), Path::new("x")).unwrap(), m);
        let commented = b"P5\n# a comment\n2 2\n# more\n255\n\x00\x01\x02\x00";
        assert_eq!(decode_pgm(commented, Path::new("x")).unwrap(), m);
    }

    #[test]
    fn malformed_headers_name_the_field() {
        let p = Path::new("bad.pgm");
        let e = decode_pgm(b"P6\n2 2\n255\n\0\0\0\0", p).unwrap_err().to_string();
        assert!(e.contains("magic") && e.contains("bad.pgm"), "{e}");
        let e = decode_pgm(b"P5\n2 x\n255\n\0\0\0\0", p).unwrap_err().to_string();
        assert!(e.contains("height"), "{e}");
        let e = decode_pgm(b"P5\n2 2\n999\n\0\0\0\0", p).unwrap_err().to_string();
        assert!(e.contains("maxval"), "{e}");
        let e = decode_pgm(b"P5\n2 2\n255\n\0\0\0", p).unwrap_err().to_string();
        assert!(e.contains("pixel data"), "{e}");
        let e = decode_pgm(b"P5\n2 1\n1\n\0\x05", p).unwrap_err().to_string();
        assert!(e.contains("exceeds maxval"), "{e}");
    }

    #[test]
    fn video_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<RgbImage> = (0..3)
            .map(|i| RgbImage::new(2, 2, vec![i as u8; 12]).unwrap())
            .collect();
        let masks: Vec<LabelMap> = (0..3).map(|i| LabelMap::new(2, 2, vec![i as u8; 4]).unwrap()).collect();
        write_frames(dir.path(), &frames).unwrap();
        write_masks(dir.path(), &masks).unwrap();
        assert_eq!(read_frames(dir.path()).unwrap(), frames);
        assert_eq!(read_label_dir(dir.path()).unwrap(), masks);
        let names = read_manifest(dir.path().join(FRAMES_MANIFEST)).unwrap();
        assert_eq!(names, ["frame_0000.ppm", "frame_0001.ppm", "frame_0002.ppm"]);
        let out = dir.path().join("pred");
        write_labels(&out, &masks).unwrap();
        assert_eq!(read_label_dir(&out).unwrap(), masks);
    }

    #[test]
    fn manifest_skips_comments_and_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        fs::write(&p, "# list\n\na.ppm\n  b.ppm \n").unwrap();
        assert_eq!(read_manifest(&p).unwrap(), ["a.ppm", "b.ppm"]);
        fs::write(&p, "# nothing\n").unwrap();
        assert!(read_manifest(&p).is_err());
        assert!(read_manifest(dir.path().join("missing.txt")).is_err());
    }
}
