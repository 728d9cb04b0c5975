//! Binary 8-bit portable graymap (`P5`, maxval 255).

use std::fs;
use std::path::Path;

use super::{PhantomError, Result};
use crate::tensor::Tensor;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PhantomError + '_ {
    move |source| PhantomError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a `[.., H, W]` tensor with values in `[0, 1]`, rounding to 8 bits.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() < 2 || image.numel() != shape[shape.len() - 2] * shape[shape.len() - 1] {
        return Err(PhantomError::Argument(format!("cannot write {shape:?} as a single graymap")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, bytes).map_err(io(path))
}

/// Reads a `P5` file into a `[1, 1, H, W]` tensor scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io(path))?;
    let bad = |detail: &str| PhantomError::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    // Header: magic, width, height, maxval separated by whitespace, then one
    // whitespace byte before the raster. Comments are not produced here and
    // not accepted.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let raster = &bytes[pos + 1..];
    if raster.len() != w * h || w == 0 || h == 0 {
        return Err(bad("raster size does not match header"));
    }
    Tensor::new(&[1, 1, h, w], raster.iter().map(|&b| b as f64 / 255.0).collect())
        .map_err(|e| bad(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_quantises_to_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x/img.pgm");
        let img = Tensor::new(&[1, 1, 2, 3], vec![0.0, 1.0, 0.5, 0.25, 0.9, 1.2]).unwrap();
        write_pgm(&path, &img).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), &[1, 1, 2, 3]);
        assert!(back.max_abs_diff(&img.map(|v| v.clamp(0.0, 1.0))).unwrap() <= 0.5 / 255.0);
        fs::write(&path, b"P5\n3 2\n255\n12").unwrap();
        assert!(matches!(read_pgm(&path), Err(PhantomError::Format { .. })));
    }
}
