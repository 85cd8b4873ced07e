//! PNG ingestion, color ablation, normalization and dataset traversal.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::graph::Normalization;
use crate::tensor::Tensor;

/// BT.601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

/// Optional input transform applied before normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    None,
    Grayscale,
}

impl Transform {
    pub fn apply(self, pixels: &Tensor) -> Result<Tensor> {
        match self {
            Transform::None => Ok(pixels.clone()),
            Transform::Grayscale => grayscale(pixels),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Transform::None => "none",
            Transform::Grayscale => "grayscale",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub label: Label,
}

/// A decoded image: `[3,H,W]` values in `[0,1]`, before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub label: Label,
    pub pixels: Tensor,
}

impl ImageRecord {
    pub fn load(entry: &DatasetEntry) -> Result<Self> {
        Ok(ImageRecord {
            path: entry.path.clone(),
            label: entry.label,
            pixels: load_png(&entry.path)?,
        })
    }
}

fn decode_err(path: &Path, msg: impl ToString) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Decodes an 8-bit RGB or RGBA PNG into `[3,H,W]`, dropping alpha.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| decode_err(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(decode_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(decode_err(path, format!("unsupported color type {:?}", other))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * stride];
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = row[x * stride + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Balanced);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)?;
    Ok(())
}

/// Encodes `[3,H,W]` values in `[0,1]` as an 8-bit RGB PNG.
pub fn save_png_rgb(path: &Path, pixels: &Tensor) -> Result<()> {
    let (c, h, w) = pixels.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", c)));
    }
    let d = pixels.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                bytes.push(quantize(d[(ch * h + y) * w + x]));
            }
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &bytes)
}

/// Encodes an `[H,W]` map as 8-bit grayscale after min-max scaling to 0–255.
/// A constant map encodes as all zeros.
pub fn save_heatmap_png(path: &Path, values: &Tensor) -> Result<()> {
    let (h, w) = match values.shape() {
        &[h, w] => (h, w),
        other => return Err(Error::Shape(format!("expected [H,W], got {:?}", other))),
    };
    let d = values.data();
    let lo = d.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    let bytes: Vec<u8> = d
        .iter()
        .map(|&v| if range > 0.0 { quantize((v - lo) / range) } else { 0 })
        .collect();
    write_png(path, w, h, png::ColorType::Grayscale, &bytes)
}

/// BT.601 luma replicated to all three channels, computed in float.
pub fn grayscale(pixels: &Tensor) -> Result<Tensor> {
    let (c, h, w) = pixels.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("grayscale needs 3 channels, got {}", c)));
    }
    let d = pixels.data();
    let plane = h * w;
    let mut out = vec![0f32; 3 * plane];
    for i in 0..plane {
        let y = LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i];
        out[i] = y;
        out[plane + i] = y;
        out[2 * plane + i] = y;
    }
    Tensor::new(vec![3, h, w], out)
}

pub fn normalize(pixels: &Tensor, mean: [f32; 3], std: [f32; 3]) -> Result<Tensor> {
    let (c, h, w) = pixels.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("normalize needs 3 channels, got {}", c)));
    }
    if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Config(format!("normalization std must be positive, got {}", s)));
    }
    let plane = h * w;
    let data = pixels
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / plane;
            (v - mean[ch]) / std[ch]
        })
        .collect();
    Tensor::new(vec![3, h, w], data)
}

/// Center crop to `h × w`; images smaller than the target are an error.
pub fn center_crop(pixels: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, ih, iw) = pixels.chw()?;
    if ih < h || iw < w {
        return Err(Error::Shape(format!("cannot crop {}x{} image to {}x{}", ih, iw, h, w)));
    }
    let (y0, x0) = ((ih - h) / 2, (iw - w) / 2);
    let d = pixels.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let start = (ch * ih + y0 + y) * iw + x0;
            out.extend_from_slice(&d[start..start + w]);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Lists PNGs under `dir` in depth-first order with entries of each
/// directory sorted bytewise by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("not a directory: {}", dir.display())));
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(dir, std::io::Error::other(e)))?;
        if entry.file_type().is_file() && is_png(entry.path()) {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

/// Real and fake images of a dataset, each sorted and optionally truncated
/// to `limit` per class.
pub fn scan_dataset(real_dir: &Path, fake_dir: &Path, limit: Option<usize>) -> Result<Vec<DatasetEntry>> {
    let mut out = Vec::new();
    for (dir, label) in [(real_dir, Label::Real), (fake_dir, Label::Fake)] {
        let mut paths = list_pngs(dir)?;
        if let Some(n) = limit {
            paths.truncate(n);
        }
        out.extend(paths.into_iter().map(|path| DatasetEntry { path, label }));
    }
    Ok(out)
}

/// Turns decoded pixels into model input: color transform, optional center
/// crop, then channel normalization.
pub fn prepare(pixels: &Tensor, transform: Transform, crop: Option<(usize, usize)>, norm: &Normalization) -> Result<Tensor> {
    let mut x = transform.apply(pixels)?;
    if let Some((h, w)) = crop {
        x = center_crop(&x, h, w)?;
    }
    normalize(&x, norm.mean, norm.std)
}

/// Decodes every entry in parallel and applies `f`. Entries that fail to
/// decode are skipped (`None`) and logged; any error from `f` aborts.
/// The output is index-aligned with `entries` regardless of thread count.
pub fn map_images<T, F>(entries: &[DatasetEntry], f: F) -> Result<Vec<Option<T>>>
where
    T: Send,
    F: Fn(&ImageRecord) -> Result<T> + Sync,
{
    entries
        .par_iter()
        .map(|e| match ImageRecord::load(e) {
            Ok(rec) => f(&rec).map(Some),
            Err(err @ Error::Decode { .. }) => {
                log::warn!("skipping {}", err);
                Ok(None)
            }
            Err(err) => Err(err),
        })
        .collect()
}

/// `<root>/real` and `<root>/fake`.
pub fn dataset_dirs(root: &Path) -> (PathBuf, PathBuf) {
    (root.join("real"), root.join("fake"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_and_black_pixels() {
        let dir = tempfile::tempdir().unwrap();
        for (v, name) in [(1.0, "white.png"), (0.0, "black.png")] {
            let p = dir.path().join(name);
            save_png_rgb(&p, &Tensor::filled(&[3, 1, 1], v)).unwrap();
            assert_eq!(load_png(&p).unwrap().data(), &[v, v, v]);
        }
    }

    #[test]
    fn rgba_alpha_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgba.png");
        write_png(&p, 2, 1, png::ColorType::Rgba, &[255, 0, 0, 10, 0, 255, 0, 255]).unwrap();
        let t = load_png(&p).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn corrupt_png_is_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(matches!(load_png(&p), Err(Error::Decode { .. })));
    }

    #[test]
    fn grayscale_examples() {
        let gray = Tensor::filled(&[3, 2, 2], 0.5);
        assert_eq!(grayscale(&gray).unwrap(), gray);
        let mut red = vec![0.0; 3];
        red[0] = 1.0;
        let g = grayscale(&Tensor::new(vec![3, 1, 1], red).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.299, 0.299, 0.299]);
    }

    #[test]
    fn normalize_examples() {
        let x = Tensor::new(vec![3, 1, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(normalize(&x, [0.0; 3], [1.0; 3]).unwrap(), x);
        let z = normalize(&Tensor::filled(&[3, 2, 2], 0.25), [0.25; 3], [0.5; 3]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(matches!(normalize(&x, [0.0; 3], [1.0, 0.0, 1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn crop_center() {
        let x = Tensor::new(vec![3, 3, 3], (0..27).map(|v| v as f32).collect()).unwrap();
        let c = center_crop(&x, 1, 1).unwrap();
        assert_eq!(c.data(), &[4.0, 13.0, 22.0]);
        assert!(center_crop(&x, 4, 1).is_err());
    }

    #[test]
    fn scan_is_sorted_nested_and_limited() {
        let dir = tempfile::tempdir().unwrap();
        let real = dir.path().join("real");
        let fake = dir.path().join("fake");
        std::fs::create_dir_all(real.join("a")).unwrap();
        std::fs::create_dir_all(&fake).unwrap();
        let px = Tensor::filled(&[3, 1, 1], 0.5);
        for p in [real.join("b.png"), real.join("a.png"), real.join("a").join("z.png"), real.join("c.PNG")] {
            save_png_rgb(&p, &px).unwrap();
        }
        std::fs::write(real.join("notes.txt"), "skip").unwrap();
        for i in [2, 0, 1] {
            save_png_rgb(&fake.join(format!("f{}.png", i)), &px).unwrap();
        }
        let all = scan_dataset(&real, &fake, None).unwrap();
        let rel: Vec<String> = all
            .iter()
            .map(|e| e.path.strip_prefix(dir.path()).unwrap().to_string_lossy().replace('\\', "/"))
            .collect();
        // depth-first with sorted siblings: directory "a" precedes "a.png"
        assert_eq!(
            rel,
            vec!["real/a/z.png", "real/a.png", "real/b.png", "real/c.PNG", "fake/f0.png", "fake/f1.png", "fake/f2.png"]
        );
        assert_eq!(scan_dataset(&real, &fake, None).unwrap(), all);
        let lim = scan_dataset(&real, &fake, Some(2)).unwrap();
        assert_eq!(lim.len(), 4);
        assert_eq!(lim[2].path, fake.join("f0.png"));
        assert!(scan_dataset(&dir.path().join("missing"), &fake, None).is_err());
    }

    proptest! {
        #[test]
        fn grayscale_idempotent_and_channels_equal(d in prop::collection::vec(0.0f32..=1.0, 12)) {
            let x = Tensor::new(vec![3, 2, 2], d).unwrap();
            let g = grayscale(&x).unwrap();
            let gg = grayscale(&g).unwrap();
            for i in 0..4 {
                prop_assert_eq!(g.data()[i], g.data()[4 + i]);
                prop_assert_eq!(g.data()[i], g.data()[8 + i]);
            }
            for (a, b) in g.data().iter().zip(gg.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn normalize_matches_loop(d in prop::collection::vec(-1.0f32..2.0, 12),
                                  mean in prop::array::uniform3(-1.0f32..1.0),
                                  std in prop::array::uniform3(0.1f32..2.0)) {
            let x = Tensor::new(vec![3, 2, 2], d.clone()).unwrap();
            let n = normalize(&x, mean, std).unwrap();
            for c in 0..3 {
                for i in 0..4 {
                    prop_assert_eq!(n.data()[c * 4 + i], (d[c * 4 + i] - mean[c]) / std[c]);
                }
            }
        }

        #[test]
        fn png_round_trip_within_quantum(d in prop::collection::vec(0.0f32..=1.0, 3 * 3 * 4)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("x.png");
            let x = Tensor::new(vec![3, 3, 4], d).unwrap();
            save_png_rgb(&p, &x).unwrap();
            let y = load_png(&p).unwrap();
            for (a, b) in x.data().iter().zip(y.data()) {
                prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}
