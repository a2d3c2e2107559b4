use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;

use super::{DType, Slice, SliceVolume, SliceWriter, VolumeMeta};
use crate::error::{Error, Result};

fn tiff_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_tiff = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "tif" | "tiff"))
            .unwrap_or(false);
        if is_tiff && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn decode(path: &Path) -> Result<(DType, u32, u32, Vec<f32>)> {
    let img = image::open(path)?;
    let (w, h) = (img.width(), img.height());
    let (dtype, data) = match img {
        DynamicImage::ImageLuma8(buf) => (DType::U8, buf.into_raw().into_iter().map(f32::from).collect()),
        DynamicImage::ImageLuma16(buf) => (DType::U16, buf.into_raw().into_iter().map(f32::from).collect()),
        other => {
            return Err(Error::UnsupportedPixelType(format!(
                "{}: {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Ok((dtype, w, h, data))
}

/// Imports a directory of single-slice grayscale TIFF files, sorted
/// lexicographically by file name, as one native volume.
pub fn import_tiff_stack(dir: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<SliceVolume> {
    let dir = dir.as_ref();
    let files = tiff_files(dir)?;
    if files.is_empty() {
        return Err(Error::MissingFile(dir.join("*.tif")));
    }
    let (dtype, w, h, first) = decode(&files[0])?;
    let meta = VolumeMeta::new([w as usize, h as usize, files.len()], dtype, 1);
    let mut writer = SliceWriter::create(meta, out)?;
    writer.push(&Slice {
        nx: w as usize,
        ny: h as usize,
        channels: 1,
        data: first,
    })?;
    for path in &files[1..] {
        let (dt, fw, fh, data) = decode(path)?;
        if (fw, fh) != (w, h) {
            return Err(Error::InconsistentSliceShape(format!(
                "{} is {fw}x{fh}, expected {w}x{h}",
                path.display()
            )));
        }
        if dt != dtype {
            return Err(Error::UnsupportedPixelType(format!(
                "{} is {dt}, stack is {dtype}",
                path.display()
            )));
        }
        writer.push(&Slice {
            nx: w as usize,
            ny: h as usize,
            channels: 1,
            data,
        })?;
    }
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageBuffer, Luma};

    fn write_u16(path: &Path, w: u32, h: u32, seed: u16) {
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(w, h, |x, y| Luma([seed.wrapping_mul(997).wrapping_add((x * 31 + y) as u16)]));
        img.save(path).unwrap();
    }

    #[test]
    fn imports_sorted_stack() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("tiffs");
        fs::create_dir(&src).unwrap();
        for i in [2u16, 0, 1] {
            write_u16(&src.join(format!("slice_{i:03}.tif")), 8, 8, i);
        }
        let vol = import_tiff_stack(&src, tmp.path().join("vol")).unwrap();
        assert_eq!(vol.meta().dimensions, [8, 8, 3]);
        assert_eq!(vol.meta().dtype, DType::U16);
        let s1 = vol.read_slice(1).unwrap();
        assert_eq!(s1.get(0, 3, 2), 1u16.wrapping_mul(997).wrapping_add(3 * 31 + 2) as f32);
    }

    #[test]
    fn mixed_shapes_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("tiffs");
        fs::create_dir(&src).unwrap();
        write_u16(&src.join("a.tif"), 8, 8, 0);
        write_u16(&src.join("b.tif"), 4, 4, 1);
        assert!(matches!(
            import_tiff_stack(&src, tmp.path().join("vol")),
            Err(Error::InconsistentSliceShape(_))
        ));
    }

    #[test]
    fn empty_directory_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(import_tiff_stack(tmp.path(), tmp.path().join("vol")).is_err());
    }

    #[test]
    fn color_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let src = tmp.path().join("tiffs");
        fs::create_dir(&src).unwrap();
        let img: ImageBuffer<image::Rgb<u8>, Vec<u8>> = ImageBuffer::new(4, 4);
        img.save(src.join("a.tif")).unwrap();
        assert!(matches!(
            import_tiff_stack(&src, tmp.path().join("vol")),
            Err(Error::UnsupportedPixelType(_))
        ));
    }
}
