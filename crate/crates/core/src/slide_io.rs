//! Raster loading and the coarse/fine patch grids.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

pub const RAW_MAGIC: &[u8; 4] = b"ISGR";
pub const RAW_VERSION: u32 = 1;
const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

#[derive(Debug, thiserror::Error)]
pub enum SlideError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("patch side {p} exceeds image {width}x{height}")]
    PatchLargerThanImage { p: usize, width: usize, height: usize },
    #[error("coarse side {p} is not a multiple of fine side {q}")]
    NonDivisibleSpec { p: usize, q: usize },
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, SlideError> {
        if width == 0 || height == 0 {
            return Err(SlideError::InvalidRaster(format!("{width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(SlideError::InvalidRaster(format!(
                "{width}x{height} RGB needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        3
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Copies the `side×side` square whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, side: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(side * side * 3);
        for y in y0..y0 + side {
            let start = (y * self.width + x0) * 3;
            out.extend_from_slice(&self.data[start..start + side * 3]);
        }
        out
    }

    /// Encodes in the headered raw-RGB layout.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len());
        out.extend_from_slice(RAW_MAGIC);
        out.extend_from_slice(&RAW_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_raw(&self, path: &Path) -> Result<(), SlideError> {
        fs::write(path, self.to_raw_bytes())?;
        Ok(())
    }

    pub fn write_png(&self, path: &Path) -> Result<(), SlideError> {
        let file = fs::File::create(path)?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| SlideError::CorruptImage(e.to_string()))?;
        w.write_image_data(&self.data)
            .map_err(|e| SlideError::CorruptImage(e.to_string()))?;
        w.finish().map_err(|e| SlideError::CorruptImage(e.to_string()))?;
        Ok(())
    }
}

/// Coarse side `p` and fine side `q` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileSpec {
    pub p: usize,
    pub q: usize,
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec { p: 64, q: 16 }
    }
}

impl TileSpec {
    pub fn new(p: usize, q: usize) -> Result<Self, SlideError> {
        let spec = TileSpec { p, q };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SlideError> {
        if self.q == 0 || self.p == 0 || self.p % self.q != 0 {
            return Err(SlideError::NonDivisibleSpec {
                p: self.p,
                q: self.q,
            });
        }
        Ok(())
    }

    /// Fine patches per coarse side, `p / q`.
    pub fn cube_side(&self) -> usize {
        self.p / self.q
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalPatch {
    pub id: usize,
    pub grid_row: usize,
    pub grid_col: usize,
    pub side: usize,
    /// `side×side×3` row-major bytes.
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalPatchGrid {
    pub parent_id: usize,
    pub cube_side: usize,
    pub q: usize,
    /// Row-major over the `cube_side × cube_side` arrangement.
    pub patches: Vec<Vec<u8>>,
}

impl LocalPatchGrid {
    pub fn get(&self, row: usize, col: usize) -> &[u8] {
        &self.patches[row * self.cube_side + col]
    }

    /// Stitches the fine patches back into the parent's pixel buffer.
    pub fn reassemble(&self) -> Vec<u8> {
        let side = self.cube_side * self.q;
        let mut out = vec![0u8; side * side * 3];
        for r in 0..self.cube_side {
            for c in 0..self.cube_side {
                let patch = self.get(r, c);
                for y in 0..self.q {
                    let dst = ((r * self.q + y) * side + c * self.q) * 3;
                    out[dst..dst + self.q * 3].copy_from_slice(&patch[y * self.q * 3..(y + 1) * self.q * 3]);
                }
            }
        }
        out
    }
}

/// Decodes a PNG (8-bit RGB) or an "ISGR" raw file.
pub fn load_raster(path: &Path) -> Result<RasterImage, SlideError> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => SlideError::FileNotFound(path.display().to_string()),
        _ => SlideError::Io(e),
    })?;
    decode_raster(&bytes)
}

pub fn decode_raster(bytes: &[u8]) -> Result<RasterImage, SlideError> {
    if bytes.starts_with(RAW_MAGIC) {
        decode_raw(bytes)
    } else if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else {
        Err(SlideError::UnsupportedFormat(
            "neither a PNG nor an ISGR raw image".into(),
        ))
    }
}

fn decode_raw(bytes: &[u8]) -> Result<RasterImage, SlideError> {
    if bytes.len() < 16 {
        return Err(SlideError::CorruptImage("truncated ISGR header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != RAW_VERSION {
        return Err(SlideError::UnsupportedFormat(format!("ISGR version {version}")));
    }
    let (width, height) = (word(8) as usize, word(12) as usize);
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| SlideError::CorruptImage("dimensions overflow".into()))?;
    if width == 0 || height == 0 || bytes.len() - 16 != need {
        return Err(SlideError::CorruptImage(format!(
            "{width}x{height} payload needs {need} bytes, found {}",
            bytes.len() - 16
        )));
    }
    RasterImage::new(width, height, bytes[16..].to_vec())
}

fn decode_png(bytes: &[u8]) -> Result<RasterImage, SlideError> {
    let corrupt = |e: png::DecodingError| SlideError::CorruptImage(e.to_string());
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(SlideError::UnsupportedFormat(format!(
            "PNG must be 8-bit RGB, found {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| SlideError::CorruptImage("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(corrupt)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(frame.line_size).take(h) {
        data.extend_from_slice(&row[..w * 3]);
    }
    RasterImage::new(w, h, data)
}

/// Writes the raw encoding to any sink.
pub fn write_raw_to<W: Write>(img: &RasterImage, mut w: W) -> Result<(), SlideError> {
    w.write_all(&img.to_raw_bytes())?;
    Ok(())
}

/// Row-major `⌊h/p⌋ × ⌊w/p⌋` grid of coarse patches; right and bottom
/// remainders are discarded.
pub fn tile_coarse(img: &RasterImage, spec: &TileSpec) -> Result<Vec<GlobalPatch>, SlideError> {
    let p = spec.p;
    if p == 0 || p > img.width.min(img.height) {
        return Err(SlideError::PatchLargerThanImage {
            p,
            width: img.width,
            height: img.height,
        });
    }
    let (rows, cols) = (img.height / p, img.width / p);
    Ok((0..rows * cols)
        .map(|id| {
            let (r, c) = (id / cols, id % cols);
            GlobalPatch {
                id,
                grid_row: r,
                grid_col: c,
                side: p,
                pixels: img.crop(c * p, r * p, p),
            }
        })
        .collect())
}

/// Splits a coarse patch into its `(p/q)²` fine patches.
pub fn tile_fine(patch: &GlobalPatch, spec: &TileSpec) -> Result<LocalPatchGrid, SlideError> {
    spec.validate()?;
    if patch.side != spec.p {
        return Err(SlideError::NonDivisibleSpec {
            p: patch.side,
            q: spec.q,
        });
    }
    let (p, q) = (spec.p, spec.q);
    let n = p / q;
    let mut patches = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let mut buf = Vec::with_capacity(q * q * 3);
            for y in 0..q {
                let start = ((r * q + y) * p + c * q) * 3;
                buf.extend_from_slice(&patch.pixels[start..start + q * 3]);
            }
            patches.push(buf);
        }
    }
    Ok(LocalPatchGrid {
        parent_id: patch.id,
        cube_side: n,
        q,
        patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> RasterImage {
        let data = (0..w * h * 3).map(|i| (i * 7 % 251) as u8).collect();
        RasterImage::new(w, h, data).unwrap()
    }

    #[test]
    fn coarse_counts() {
        let spec = TileSpec::new(64, 16).unwrap();
        assert_eq!(tile_coarse(&ramp(128, 128), &spec).unwrap().len(), 4);
        let tiles = tile_coarse(&ramp(128, 192), &spec).unwrap();
        assert_eq!(tiles.len(), 6);
        assert_eq!((tiles[5].grid_row, tiles[5].grid_col), (2, 1));
        let img = ramp(130, 130);
        let tiles = tile_coarse(&img, &spec).unwrap();
        assert_eq!(tiles.len(), 4);
        // patch (1,1) starts at pixel (64,64); columns 128..130 are dropped
        assert_eq!(tiles[3].pixels[..3], img.pixel(64, 64));
        let last = &tiles[3].pixels[tiles[3].pixels.len() - 3..];
        assert_eq!(last, img.pixel(127, 127));
    }

    #[test]
    fn patch_larger_than_image() {
        let spec = TileSpec::new(64, 16).unwrap();
        assert!(matches!(
            tile_coarse(&ramp(63, 200), &spec),
            Err(SlideError::PatchLargerThanImage { .. })
        ));
    }

    #[test]
    fn fine_grids() {
        let spec = TileSpec::new(64, 16).unwrap();
        let tiles = tile_coarse(&ramp(64, 64), &spec).unwrap();
        let grid = tile_fine(&tiles[0], &spec).unwrap();
        assert_eq!(grid.cube_side, 4);
        assert_eq!(grid.patches.len(), 16);

        let same = TileSpec::new(64, 64).unwrap();
        let grid = tile_fine(&tiles[0], &same).unwrap();
        assert_eq!(grid.patches.len(), 1);
        assert_eq!(grid.patches[0], tiles[0].pixels);

        assert!(matches!(TileSpec::new(64, 48), Err(SlideError::NonDivisibleSpec { .. })));
        let bad = TileSpec { p: 64, q: 48 };
        assert!(matches!(tile_fine(&tiles[0], &bad), Err(SlideError::NonDivisibleSpec { .. })));
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(
            decode_raster(b"hello, this is text"),
            Err(SlideError::UnsupportedFormat(_))
        ));
        let mut bad_png = PNG_SIGNATURE.to_vec();
        bad_png.extend_from_slice(b"garbage garbage");
        assert!(matches!(decode_raster(&bad_png), Err(SlideError::CorruptImage(_))));
        let mut raw = ramp(2, 2).to_raw_bytes();
        raw.pop();
        assert!(matches!(decode_raster(&raw), Err(SlideError::CorruptImage(_))));
        assert!(matches!(
            load_raster(Path::new("/nonexistent/slide.png")),
            Err(SlideError::FileNotFound(_))
        ));
    }

    #[test]
    fn raw_header_layout() {
        let img = ramp(3, 2);
        let b = img.to_raw_bytes();
        assert_eq!(&b[..4], b"ISGR");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &3u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(b.len(), 16 + 18);
        assert_eq!(decode_raster(&b).unwrap(), img);
    }

    #[test]
    fn png_roundtrip_and_minimal_image() {
        let dir = tempfile::tempdir().unwrap();
        let img = RasterImage::new(1, 1, vec![9, 8, 7]).unwrap();
        let path = dir.path().join("one.png");
        img.write_png(&path).unwrap();
        let back = load_raster(&path).unwrap();
        assert_eq!(back.data(), &[9, 8, 7]);

        let big = ramp(37, 21);
        let path = dir.path().join("big.png");
        big.write_png(&path).unwrap();
        assert_eq!(load_raster(&path).unwrap(), big);
        assert_eq!(load_raster(&path).unwrap(), load_raster(&path).unwrap());
    }

    proptest! {
        #[test]
        fn reassembly_and_count(w in 16usize..90, h in 16usize..90, seed in 0u64..1000, which in 0usize..3) {
            let (p, q) = [(16, 4), (16, 8), (8, 8)][which];
            let data = (0..w * h * 3).map(|i| ((i as u64 * 31 + seed * 17) % 256) as u8).collect();
            let img = RasterImage::new(w, h, data).unwrap();
            let spec = TileSpec::new(p, q).unwrap();
            let tiles = tile_coarse(&img, &spec).unwrap();
            prop_assert_eq!(tiles.len(), (h / p) * (w / p));
            for (i, t) in tiles.iter().enumerate() {
                prop_assert_eq!(t.id, i);
                prop_assert_eq!(t.pixels.clone(), img.crop(t.grid_col * p, t.grid_row * p, p));
                let grid = tile_fine(t, &spec).unwrap();
                prop_assert_eq!(grid.reassemble(), t.pixels.clone());
            }
        }
    }
}
