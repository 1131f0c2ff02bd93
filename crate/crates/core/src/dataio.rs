//! DAVIS-layout ingestion, indexed-PNG label maps, frame decoding and the
//! weights container.
//!
//! Frames decode from PNG and binary PPM (P6); JPEG is available behind the
//! `jpeg` feature. Label maps are indexed-palette PNGs whose pixel value is
//! the object id (0 = background); they are written with the conventional
//! bit-spread palette used by segmentation benchmarks.

pub mod weights;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mask::LabelMap;
use crate::numerics::Tensor;

pub use weights::{WeightEntry, WeightsContainer};

/// One sequence: ordered frame paths, aligned optional annotations, and the
/// validated shared resolution.
#[derive(Clone, Debug)]
pub struct SequenceHandle {
    name: String,
    frames: Vec<PathBuf>,
    annotations: Vec<Option<PathBuf>>,
    width: usize,
    height: usize,
}

impl SequenceHandle {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_path(&self, index: usize) -> &Path {
        &self.frames[index]
    }

    pub fn annotation_path(&self, index: usize) -> Option<&Path> {
        self.annotations[index].as_deref()
    }

    /// (width, height) in pixels.
    pub fn resolution(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

const FRAME_EXTENSIONS: [&str; 4] = ["png", "ppm", "jpg", "jpeg"];

/// Open `root/JPEGImages/<set>/<name>` + `root/Annotations/<set>/<name>`.
///
/// Frames sort lexicographically; every frame must share one resolution and
/// frame 0 must have an annotation. Later frames may be unannotated.
pub fn load_sequence(root: &Path, set: &str, name: &str) -> Result<SequenceHandle> {
    let frame_dir = root.join("JPEGImages").join(set).join(name);
    let ann_dir = root.join("Annotations").join(set).join(name);

    let mut frames: Vec<PathBuf> = Vec::new();
    let rd = std::fs::read_dir(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(&frame_dir, e))?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if ext.as_deref().is_some_and(|e| FRAME_EXTENSIONS.contains(&e)) {
            frames.push(path);
        }
    }
    if frames.is_empty() {
        return Err(Error::format(&frame_dir, "no frames found"));
    }
    frames.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    let (width, height) = image_dimensions(&frames[0])?;
    for f in &frames[1..] {
        let dims = image_dimensions(f)?;
        if dims != (width, height) {
            return Err(Error::format(
                f,
                format!("resolution {dims:?} differs from first frame ({width}, {height})"),
            ));
        }
    }

    let mut annotations = Vec::with_capacity(frames.len());
    for f in &frames {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let candidate = ann_dir.join(format!("{stem}.png"));
        if candidate.is_file() {
            let dims = image_dimensions(&candidate)?;
            if dims != (width, height) {
                return Err(Error::format(
                    &candidate,
                    format!("annotation resolution {dims:?} differs from frames"),
                ));
            }
            annotations.push(Some(candidate));
        } else {
            annotations.push(None);
        }
    }
    if annotations[0].is_none() {
        return Err(Error::format(
            &ann_dir,
            "first frame has no annotation (semi-supervised input requires it)",
        ));
    }

    Ok(SequenceHandle {
        name: name.to_string(),
        frames,
        annotations,
        width,
        height,
    })
}

/// (width, height) from the file header only.
pub fn image_dimensions(path: &Path) -> Result<(usize, usize)> {
    match extension(path)?.as_str() {
        "png" => {
            let decoder = png::Decoder::new(open(path)?);
            let reader = decoder
                .read_info()
                .map_err(|e| Error::format(path, e.to_string()))?;
            let info = reader.info();
            Ok((info.width as usize, info.height as usize))
        }
        "ppm" => {
            let (w, h, _) = read_ppm_header(path)?;
            Ok((w, h))
        }
        "jpg" | "jpeg" => jpeg_dimensions(path),
        other => Err(Error::format(path, format!("unsupported extension `{other}`"))),
    }
}

/// Decode a frame to 3×H×W RGB in [0,1].
pub fn load_frame(path: &Path) -> Result<Tensor> {
    match extension(path)?.as_str() {
        "png" => load_frame_png(path),
        "ppm" => load_frame_ppm(path),
        "jpg" | "jpeg" => load_frame_jpeg(path),
        other => Err(Error::format(path, format!("unsupported extension `{other}`"))),
    }
}

fn extension(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| Error::format(path, "file has no extension"))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn rgb_bytes_to_tensor(width: usize, height: usize, rgb: &[u8]) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[3, height, width])?;
    let hw = height * width;
    let data = out.data_mut();
    for (p, px) in rgb.chunks_exact(3).enumerate() {
        data[p] = px[0] as f32 / 255.0;
        data[hw + p] = px[1] as f32 / 255.0;
        data[2 * hw + p] = px[2] as f32 / 255.0;
    }
    Ok(out)
}

fn load_frame_png(path: &Path) -> Result<Tensor> {
    let mut decoder = png::Decoder::new(open(path)?);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large to buffer"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => bytes.to_vec(),
        png::ColorType::Rgba => bytes
            .chunks_exact(4)
            .flat_map(|px| [px[0], px[1], px[2]])
            .collect(),
        png::ColorType::Grayscale => bytes.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => bytes
            .chunks_exact(2)
            .flat_map(|px| [px[0], px[0], px[0]])
            .collect(),
        other => {
            return Err(Error::format(
                path,
                format!("unexpected color type {other:?} after expansion"),
            ))
        }
    };
    rgb_bytes_to_tensor(w, h, &rgb)
}

fn read_ppm_header(path: &Path) -> Result<(usize, usize, BufReader<File>)> {
    let mut r = open(path)?;
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format(path, format!("reading magic: {e}")))?;
    if &magic != b"P6" {
        return Err(Error::format(
            path,
            format!("unsupported PPM variant {:?} (only binary P6)", magic),
        ));
    }
    let mut fields = [0usize; 3];
    for slot in fields.iter_mut() {
        *slot = read_ppm_number(&mut r, path)?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if w == 0 || h == 0 {
        return Err(Error::format(path, "degenerate PPM extents"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            path,
            format!("PPM maxval {maxval} unsupported (need 1..=255)"),
        ));
    }
    Ok((w, h, r))
}

/// One whitespace/comment-delimited decimal field; consumes the single
/// whitespace byte that terminates it.
fn read_ppm_number(r: &mut impl Read, path: &Path) -> Result<usize> {
    let mut byte = [0u8; 1];
    let mut value: Option<usize> = None;
    loop {
        if r.read(&mut byte).map_err(|e| Error::format(path, e.to_string()))? == 0 {
            return value.ok_or_else(|| Error::format(path, "unexpected end of PPM header"));
        }
        match byte[0] {
            b'#' => {
                // comment to end of line
                while r.read(&mut byte).map_err(|e| Error::format(path, e.to_string()))? == 1 {
                    if byte[0] == b'\n' {
                        break;
                    }
                }
            }
            b'0'..=b'9' => {
                let d = (byte[0] - b'0') as usize;
                value = Some(value.unwrap_or(0) * 10 + d);
            }
            b' ' | b'\t' | b'\r' | b'\n' => {
                if let Some(v) = value {
                    return Ok(v);
                }
            }
            other => {
                return Err(Error::format(
                    path,
                    format!("unexpected byte {other:#x} in PPM header"),
                ))
            }
        }
    }
}

fn load_frame_ppm(path: &Path) -> Result<Tensor> {
    let (w, h, mut r) = read_ppm_header(path)?;
    let mut rgb = vec![0u8; 3 * w * h];
    r.read_exact(&mut rgb)
        .map_err(|e| Error::format(path, format!("PPM pixel data: {e}")))?;
    rgb_bytes_to_tensor(w, h, &rgb)
}

#[cfg(feature = "jpeg")]
fn load_frame_jpeg(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    rgb_bytes_to_tensor(w, h, img.as_raw())
}

#[cfg(not(feature = "jpeg"))]
fn load_frame_jpeg(path: &Path) -> Result<Tensor> {
    Err(Error::format(
        path,
        "JPEG support is disabled; rebuild with `--features jpeg` or convert frames to PNG/PPM",
    ))
}

#[cfg(feature = "jpeg")]
fn jpeg_dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((w as usize, h as usize))
}

#[cfg(not(feature = "jpeg"))]
fn jpeg_dimensions(path: &Path) -> Result<(usize, usize)> {
    Err(Error::format(
        path,
        "JPEG support is disabled; rebuild with `--features jpeg` or convert frames to PNG/PPM",
    ))
}

/// Read an indexed-palette (or 8-bit grayscale) PNG as a label map; the
/// pixel value is the object id.
pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let mut decoder = png::Decoder::new(open(path)?);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large to buffer"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];

    let ids = match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed, depth) | (png::ColorType::Grayscale, depth) => {
            unpack_to_bytes(bytes, w, h, depth, path)?
        }
        (ct, depth) => {
            return Err(Error::format(
                path,
                format!("label map must be indexed or grayscale PNG, got {ct:?}/{depth:?}"),
            ))
        }
    };
    LabelMap::new(w, h, ids)
}

fn unpack_to_bytes(
    bytes: &[u8],
    w: usize,
    h: usize,
    depth: png::BitDepth,
    path: &Path,
) -> Result<Vec<u8>> {
    let bits = match depth {
        png::BitDepth::One => 1usize,
        png::BitDepth::Two => 2,
        png::BitDepth::Four => 4,
        png::BitDepth::Eight => return Ok(bytes[..w * h].to_vec()),
        png::BitDepth::Sixteen => {
            return Err(Error::format(path, "16-bit label maps are unsupported"))
        }
    };
    let per_byte = 8 / bits;
    let row_bytes = w.div_ceil(per_byte);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &bytes[y * row_bytes..][..row_bytes];
        for x in 0..w {
            let byte = row[x / per_byte];
            let shift = 8 - bits * (x % per_byte + 1);
            out.push((byte >> shift) & ((1 << bits) - 1));
        }
    }
    Ok(out)
}

/// Write `mask` as an 8-bit indexed PNG with the fixed bit-spread palette.
pub fn write_label_map(path: &Path, mask: &LabelMap) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = BufWriter::new(file);
    let mut enc = png::Encoder::new(w, mask.width() as u32, mask.height() as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(davis_palette().to_vec());
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(mask.ids())
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(())
}

/// The standard 256-entry palette: bit j of the index contributes bit
/// (7−j/3) to channel j%3. Index 0 is black, 1 red-ish, 2 green-ish, ...
pub fn davis_palette() -> [u8; 768] {
    let mut palette = [0u8; 768];
    for (idx, rgb) in palette.chunks_exact_mut(3).enumerate() {
        let mut c = idx;
        let mut shift = 7i32;
        while c != 0 && shift >= 0 {
            rgb[0] |= (((c >> 0) & 1) as u8) << shift;
            rgb[1] |= (((c >> 1) & 1) as u8) << shift;
            rgb[2] |= (((c >> 2) & 1) as u8) << shift;
            c >>= 3;
            shift -= 1;
        }
    }
    palette
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) {
        use std::io::Write;
        let mut f = File::create(path).unwrap();
        write!(f, "P6\n{w} {h}\n255\n").unwrap();
        f.write_all(rgb).unwrap();
    }

    #[test]
    fn ppm_round_trip_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ppm");
        write_ppm(&p, 2, 1, &[255, 0, 0, 0, 128, 255]);
        let t = load_frame(&p).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.at3(0, 0, 0), 1.0);
        assert_eq!(t.at3(2, 0, 1), 1.0);
        assert!((t.at3(1, 0, 1) - 128.0 / 255.0).abs() < 1e-6);
        assert_eq!(image_dimensions(&p).unwrap(), (2, 1));
    }

    #[test]
    fn ppm_rejects_non_p6() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ppm");
        std::fs::write(&p, b"P3\n1 1\n255\n1 2 3\n").unwrap();
        assert!(load_frame(&p).is_err());
    }

    #[test]
    fn label_map_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let ids: Vec<u8> = (0..48).map(|i| (i % 5) as u8).collect();
        let mask = LabelMap::new(8, 6, ids).unwrap();
        write_label_map(&p, &mask).unwrap();
        let back = read_label_map(&p).unwrap();
        assert_eq!(mask, back);
        assert_eq!(back.object_ids(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn all_zero_label_map_reads_with_no_objects() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.png");
        let mask = LabelMap::new(4, 4, vec![0; 16]).unwrap();
        write_label_map(&p, &mask).unwrap();
        let back = read_label_map(&p).unwrap();
        assert!(back.object_ids().is_empty());
    }

    #[test]
    fn frame_png_decodes_indexed_as_rgb() {
        // a label map loaded as a *frame* goes through palette expansion
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let mask = LabelMap::new(2, 1, vec![0, 1]).unwrap();
        write_label_map(&p, &mask).unwrap();
        let t = load_frame(&p).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(0, 0, 1), 128.0 / 255.0); // palette entry 1 is (128,0,0)
    }

    fn fixture(dir: &Path, frames: usize, annotated: &[usize]) {
        let fdir = dir.join("JPEGImages/480p/seq");
        let adir = dir.join("Annotations/480p/seq");
        std::fs::create_dir_all(&fdir).unwrap();
        std::fs::create_dir_all(&adir).unwrap();
        for i in 0..frames {
            let rgb = vec![10u8; 3 * 16 * 8];
            write_ppm(&fdir.join(format!("{i:05}.ppm")), 16, 8, &rgb);
            if annotated.contains(&i) {
                let mask = LabelMap::new(16, 8, vec![(i < 1) as u8; 128]).unwrap();
                write_label_map(&adir.join(format!("{i:05}.png")), &mask).unwrap();
            }
        }
    }

    #[test]
    fn sequence_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 3, &[0]);
        let h = load_sequence(dir.path(), "480p", "seq").unwrap();
        assert_eq!(h.frame_count(), 3);
        assert_eq!(h.resolution(), (16, 8));
        assert!(h.annotation_path(0).is_some());
        assert!(h.annotation_path(1).is_none());
        assert_eq!(h.name(), "seq");
    }

    #[test]
    fn sequence_partial_annotations_accepted() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 4, &[0, 2]);
        let h = load_sequence(dir.path(), "480p", "seq").unwrap();
        assert!(h.annotation_path(2).is_some());
        assert!(h.annotation_path(3).is_none());
    }

    #[test]
    fn sequence_missing_dir_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_sequence(dir.path(), "480p", "nope").unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
    }

    #[test]
    fn sequence_missing_frame0_annotation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 2, &[1]);
        assert!(load_sequence(dir.path(), "480p", "seq").is_err());
    }

    #[test]
    fn sequence_mixed_resolution_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 2, &[0]);
        let odd = dir.path().join("JPEGImages/480p/seq/00001.ppm");
        write_ppm(&odd, 8, 8, &vec![0u8; 3 * 64]);
        assert!(load_sequence(dir.path(), "480p", "seq").is_err());
    }

    #[test]
    fn palette_spot_values() {
        let p = davis_palette();
        assert_eq!(&p[0..3], &[0, 0, 0]);
        assert_eq!(&p[3..6], &[128, 0, 0]);
        assert_eq!(&p[6..9], &[0, 128, 0]);
        assert_eq!(&p[9..12], &[128, 128, 0]);
    }
}
