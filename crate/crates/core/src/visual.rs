//! Portrait images, the pluggable visual encoder, and the embedding cache.
//!
//! Encoders are frozen feature extractors: same weights + same image =
//! bitwise-identical 512-d output. Embeddings are stored as little-endian
//! f32, and the stub encoder computes in f32 end to end, so a cache
//! round-trip is lossless and cached pipelines match fresh ones exactly.

use crate::error::{Error, Result};
use image::RgbImage;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

pub const EMBED_DIM: usize = 512;
pub const MIN_SIDE: u32 = 64;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum StyleTag {
    Real,
    FantasyArt,
    Cinematic,
    Neonpunk,
    LineArt,
    GeneratedFree,
}

impl StyleTag {
    /// The four transfer styles produced for each real portrait.
    pub const TRANSFER_STYLES: [StyleTag; 4] =
        [StyleTag::FantasyArt, StyleTag::Cinematic, StyleTag::Neonpunk, StyleTag::LineArt];

    pub fn as_str(&self) -> &'static str {
        match self {
            StyleTag::Real => "real",
            StyleTag::FantasyArt => "fantasy_art",
            StyleTag::Cinematic => "cinematic",
            StyleTag::Neonpunk => "neonpunk",
            StyleTag::LineArt => "line_art",
            StyleTag::GeneratedFree => "generated_free",
        }
    }
}

impl fmt::Display for StyleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An 8-bit RGB portrait with provenance.
#[derive(Clone, Debug)]
pub struct PortraitImage {
    pub pixels: RgbImage,
    pub style_tag: StyleTag,
    pub source_id: String,
}

impl PortraitImage {
    pub fn new(pixels: RgbImage, style_tag: StyleTag, source_id: &str) -> Result<Self> {
        if source_id.is_empty() {
            return Err(Error::InvalidImage("source_id must be nonempty".into()));
        }
        if pixels.width() < MIN_SIDE || pixels.height() < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "image {}x{} below minimum {}x{}",
                pixels.width(),
                pixels.height(),
                MIN_SIDE,
                MIN_SIDE
            )));
        }
        Ok(PortraitImage { pixels, style_tag, source_id: source_id.to_string() })
    }

    /// Load from disk; only 8-bit RGB rasters are accepted.
    pub fn from_file(path: &Path, style_tag: StyleTag, source_id: &str) -> Result<Self> {
        let dynimg = image::open(path)
            .map_err(|e| Error::InvalidImage(format!("{}: {e}", path.display())))?;
        let rgb = match dynimg {
            image::DynamicImage::ImageRgb8(img) => img,
            other => {
                return Err(Error::InvalidImage(format!(
                    "{}: expected 8-bit RGB, got {:?}",
                    path.display(),
                    other.color()
                )))
            }
        };
        PortraitImage::new(rgb, style_tag, source_id)
    }
}

/// The 512-d face feature vector for one portrait.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEmbedding {
    pub values: Vec<f32>,
    pub encoder_id: String,
    pub source_id: String,
}

impl VisualEmbedding {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != EMBED_DIM {
            return Err(Error::Numerics(format!(
                "embedding dimension {} != {}",
                self.values.len(),
                EMBED_DIM
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("embedding contains non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    PretrainedFrozen,
    StubTrainable,
}

/// A pluggable image encoder. Implementations must be deterministic for
/// fixed weights: repeated calls on the same image return identical bytes.
pub trait VisualEncoder: Send + Sync {
    fn encoder_id(&self) -> &str;
    fn mode(&self) -> EncoderMode;
    fn encode(&self, image: &PortraitImage) -> Result<VisualEmbedding>;
}

/// Validate and encode one portrait.
pub fn encode_image(image: &PortraitImage, backend: &dyn VisualEncoder) -> Result<VisualEmbedding> {
    if image.pixels.width() < MIN_SIDE || image.pixels.height() < MIN_SIDE {
        return Err(Error::InvalidImage(format!(
            "image {}x{} below minimum",
            image.pixels.width(),
            image.pixels.height()
        )));
    }
    let emb = backend.encode(image)?;
    emb.validate()?;
    Ok(emb)
}

/// Fixed-seed convolutional projector used wherever the real pretrained
/// encoder is unavailable. Three stride-2 3x3 conv layers (64x64 input down
/// to 8x8) followed by a dense projection to 512. All arithmetic is f32.
pub struct StubEncoder {
    id: String,
    conv: [ConvLayer; 3],
    proj_w: Vec<f32>, // [512, 32*8*8]
    proj_b: Vec<f32>,
}

struct ConvLayer {
    w: Vec<f32>, // [c_out, c_in, 3, 3]
    b: Vec<f32>,
    c_in: usize,
    c_out: usize,
}

const STUB_INPUT: usize = 64;
const STUB_CHANNELS: [usize; 4] = [3, 16, 32, 32];

impl StubEncoder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, bound: f32| -> Vec<f32> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let conv = std::array::from_fn(|i| {
            let (c_in, c_out) = (STUB_CHANNELS[i], STUB_CHANNELS[i + 1]);
            let bound = (1.0 / (c_in * 9) as f32).sqrt();
            ConvLayer { w: uniform(c_out * c_in * 9, bound), b: uniform(c_out, bound), c_in, c_out }
        });
        let flat = STUB_CHANNELS[3] * 8 * 8;
        let bound = (1.0 / flat as f32).sqrt();
        StubEncoder {
            id: format!("stub-{seed}"),
            conv,
            proj_w: uniform(EMBED_DIM * flat, bound),
            proj_b: uniform(EMBED_DIM, bound),
        }
    }
}

impl VisualEncoder for StubEncoder {
    fn encoder_id(&self) -> &str {
        &self.id
    }

    fn mode(&self) -> EncoderMode {
        EncoderMode::StubTrainable
    }

    fn encode(&self, image: &PortraitImage) -> Result<VisualEmbedding> {
        // bilinear resize to the native input is part of the contract
        let resized = image::imageops::resize(
            &image.pixels,
            STUB_INPUT as u32,
            STUB_INPUT as u32,
            image::imageops::FilterType::Triangle,
        );
        let mut side = STUB_INPUT;
        let mut feat: Vec<f32> = vec![0.0; 3 * side * side];
        for (i, px) in resized.pixels().enumerate() {
            let (x, y) = (i % side, i / side);
            for c in 0..3 {
                feat[c * side * side + y * side + x] = px.0[c] as f32 / 255.0;
            }
        }
        for layer in &self.conv {
            feat = layer.forward(&feat, side);
            side /= 2;
            for v in feat.iter_mut() {
                *v = v.tanh();
            }
        }
        let flat = STUB_CHANNELS[3] * side * side;
        let mut out = vec![0.0f32; EMBED_DIM];
        for (o, ov) in out.iter_mut().enumerate() {
            let mut acc = self.proj_b[o];
            let row = &self.proj_w[o * flat..(o + 1) * flat];
            for (wi, fi) in row.iter().zip(&feat) {
                acc += wi * fi;
            }
            *ov = acc;
        }
        Ok(VisualEmbedding {
            values: out,
            encoder_id: self.id.clone(),
            source_id: image.source_id.clone(),
        })
    }
}

impl ConvLayer {
    /// Stride-2, pad-1 3x3 convolution over a `[c_in, side, side]` buffer.
    fn forward(&self, input: &[f32], side: usize) -> Vec<f32> {
        let out_side = side / 2;
        let mut out = vec![0.0f32; self.c_out * out_side * out_side];
        for o in 0..self.c_out {
            for oy in 0..out_side {
                for ox in 0..out_side {
                    let mut acc = self.b[o];
                    for c in 0..self.c_in {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy as usize >= side || ix as usize >= side {
                                    continue;
                                }
                                let w = self.w[((o * self.c_in + c) * 3 + ky) * 3 + kx];
                                acc += w * input[c * side * side + iy as usize * side + ix as usize];
                            }
                        }
                    }
                    out[o * out_side * out_side + oy * out_side + ox] = acc;
                }
            }
        }
        out
    }
}

/// Adapter for externally exported embeddings (the production path when a
/// pretrained face encoder has been run offline): reads `<source_id>.f32`
/// files of 512 little-endian floats from a directory.
pub struct PrecomputedEncoder {
    id: String,
    root: PathBuf,
}

impl PrecomputedEncoder {
    pub fn new(label: &str, root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::BackendUnavailable(format!(
                "embedding directory {} does not exist",
                root.display()
            )));
        }
        Ok(PrecomputedEncoder { id: format!("precomputed-{label}"), root: root.to_path_buf() })
    }
}

impl VisualEncoder for PrecomputedEncoder {
    fn encoder_id(&self) -> &str {
        &self.id
    }

    fn mode(&self) -> EncoderMode {
        EncoderMode::PretrainedFrozen
    }

    fn encode(&self, image: &PortraitImage) -> Result<VisualEmbedding> {
        let path = self.root.join(format!("{}.f32", sanitize(&image.source_id)));
        let bytes = fs::read(&path).map_err(|_| {
            Error::BackendUnavailable(format!("no precomputed embedding at {}", path.display()))
        })?;
        let values = bytes_to_f32(&bytes)?;
        Ok(VisualEmbedding {
            values,
            encoder_id: self.id.clone(),
            source_id: image.source_id.clone(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    encoder_id: String,
    source_id: String,
    dim: usize,
    dtype: String,
}

/// On-disk embedding cache: one `<key>.f32` vector file plus a `<key>.json`
/// sidecar per (encoder_id, source_id). Writes go through a temp file and a
/// rename, so concurrent writers resolve to last-write-wins per key and
/// readers never observe a torn file.
pub struct EmbeddingCache {
    root: PathBuf,
}

impl EmbeddingCache {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::Storage(e.to_string()))?;
        Ok(EmbeddingCache { root: root.to_path_buf() })
    }

    fn stem(&self, encoder_id: &str, source_id: &str) -> String {
        let mut h = Sha256::new();
        h.update(encoder_id.as_bytes());
        h.update([0]);
        h.update(source_id.as_bytes());
        hex::encode(&h.finalize()[..16])
    }

    pub fn store(&self, emb: &VisualEmbedding) -> Result<()> {
        emb.validate()?;
        let stem = self.stem(&emb.encoder_id, &emb.source_id);
        let mut bytes = Vec::with_capacity(emb.values.len() * 4);
        for v in &emb.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let meta = CacheMeta {
            encoder_id: emb.encoder_id.clone(),
            source_id: emb.source_id.clone(),
            dim: emb.values.len(),
            dtype: "f32le".into(),
        };
        write_atomic(&self.root.join(format!("{stem}.f32")), &bytes)?;
        write_atomic(&self.root.join(format!("{stem}.json")), serde_json::to_string(&meta)?.as_bytes())
    }

    pub fn load(&self, encoder_id: &str, source_id: &str) -> Result<VisualEmbedding> {
        let stem = self.stem(encoder_id, source_id);
        let vec_path = self.root.join(format!("{stem}.f32"));
        if !vec_path.exists() {
            return Err(Error::NotFound(format!("embedding ({encoder_id}, {source_id})")));
        }
        let bytes = fs::read(&vec_path).map_err(|e| Error::Storage(e.to_string()))?;
        let values = bytes_to_f32(&bytes)?;
        Ok(VisualEmbedding {
            values,
            encoder_id: encoder_id.to_string(),
            source_id: source_id.to_string(),
        })
    }

    pub fn contains(&self, encoder_id: &str, source_id: &str) -> bool {
        self.root.join(format!("{}.f32", self.stem(encoder_id, source_id))).exists()
    }

    /// Encode through the cache: hit returns the stored vector, miss encodes
    /// and stores.
    pub fn encode_cached(
        &self,
        image: &PortraitImage,
        backend: &dyn VisualEncoder,
    ) -> Result<VisualEmbedding> {
        if self.contains(backend.encoder_id(), &image.source_id) {
            return self.load(backend.encoder_id(), &image.source_id);
        }
        let emb = encode_image(image, backend)?;
        self.store(&emb)?;
        Ok(emb)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().ok_or_else(|| Error::Storage("cache path has no parent".into()))?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        path.file_name().and_then(|s| s.to_str()).unwrap_or("x")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::Storage(e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| Error::Storage(e.to_string()))
}

fn bytes_to_f32(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Storage("vector file length not a multiple of 4".into()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Deterministic synthetic portrait used by stub generation clients and
/// tests: coarse per-cell noise from a seed, tinted per style.
pub fn synthetic_portrait(seed: u64, style: StyleTag, source_id: &str) -> PortraitImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ style_salt(style));
    let side = 64u32;
    let cells = 8;
    let mut cell_colors = Vec::with_capacity(cells * cells);
    for _ in 0..cells * cells {
        cell_colors.push([rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()]);
    }
    let tint = match style {
        StyleTag::Real => [1.0, 1.0, 1.0],
        StyleTag::FantasyArt => [1.0, 0.8, 1.2],
        StyleTag::Cinematic => [1.1, 1.0, 0.8],
        StyleTag::Neonpunk => [1.2, 0.7, 1.3],
        StyleTag::LineArt => [0.9, 0.9, 0.9],
        StyleTag::GeneratedFree => [1.0, 1.1, 0.9],
    };
    let img = RgbImage::from_fn(side, side, |x, y| {
        let cx = (x as usize * cells) / side as usize;
        let cy = (y as usize * cells) / side as usize;
        let base = cell_colors[cy * cells + cx];
        let mut px = [0u8; 3];
        for c in 0..3 {
            px[c] = (base[c] as f32 * tint[c]).clamp(0.0, 255.0) as u8;
        }
        image::Rgb(px)
    });
    PortraitImage::new(img, style, source_id).expect("synthetic portrait is always valid")
}

fn style_salt(style: StyleTag) -> u64 {
    match style {
        StyleTag::Real => 0x1,
        StyleTag::FantasyArt => 0x2,
        StyleTag::Cinematic => 0x3,
        StyleTag::Neonpunk => 0x4,
        StyleTag::LineArt => 0x5,
        StyleTag::GeneratedFree => 0x6,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn blank_image(side: u32, id: &str) -> PortraitImage {
        PortraitImage::new(RgbImage::new(side, side), StyleTag::Real, id).unwrap()
    }

    #[test]
    fn encode_produces_512_finite_dims() {
        let backend = StubEncoder::new(7);
        let emb = encode_image(&blank_image(64, "a"), &backend).unwrap();
        assert_eq!(emb.values.len(), EMBED_DIM);
        assert!(emb.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_is_deterministic() {
        let backend = StubEncoder::new(7);
        let img = blank_image(64, "a");
        let e1 = encode_image(&img, &backend).unwrap();
        let e2 = encode_image(&img, &backend).unwrap();
        assert_eq!(e1.values, e2.values, "same weights + same input must be bitwise equal");
    }

    #[test]
    fn undersized_image_rejected() {
        let err = PortraitImage::new(RgbImage::new(32, 32), StyleTag::Real, "x").unwrap_err();
        assert!(matches!(err, Error::InvalidImage(_)));
    }

    #[test]
    fn different_images_differ() {
        let backend = StubEncoder::new(7);
        let a = encode_image(&synthetic_portrait(1, StyleTag::Real, "a"), &backend).unwrap();
        let b = encode_image(&synthetic_portrait(2, StyleTag::Real, "b"), &backend).unwrap();
        assert_ne!(a.values, b.values);
    }

    #[test]
    fn resize_handles_larger_inputs() {
        let backend = StubEncoder::new(7);
        let emb = encode_image(&blank_image(200, "big"), &backend).unwrap();
        assert_eq!(emb.values.len(), EMBED_DIM);
    }

    #[test]
    fn cache_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let backend = StubEncoder::new(7);
        let emb = encode_image(&synthetic_portrait(3, StyleTag::Cinematic, "c"), &backend).unwrap();
        cache.store(&emb).unwrap();
        let loaded = cache.load(&emb.encoder_id, &emb.source_id).unwrap();
        assert_eq!(emb.values, loaded.values);
    }

    #[test]
    fn cache_miss_is_not_found() {
        let dir = tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let err = cache.load("stub-7", "never-stored").unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }

    #[test]
    fn cache_last_write_wins() {
        let dir = tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let mut emb = VisualEmbedding {
            values: vec![1.0; EMBED_DIM],
            encoder_id: "enc".into(),
            source_id: "s".into(),
        };
        cache.store(&emb).unwrap();
        emb.values = vec![2.0; EMBED_DIM];
        cache.store(&emb).unwrap();
        let loaded = cache.load("enc", "s").unwrap();
        assert_eq!(loaded.values, vec![2.0; EMBED_DIM]);
    }

    #[test]
    fn cached_encode_matches_fresh_encode() {
        let dir = tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let backend = StubEncoder::new(7);
        let img = synthetic_portrait(5, StyleTag::Neonpunk, "p5");
        let fresh = encode_image(&img, &backend).unwrap();
        let via_cache = cache.encode_cached(&img, &backend).unwrap();
        let hit = cache.encode_cached(&img, &backend).unwrap();
        assert_eq!(fresh.values, via_cache.values);
        assert_eq!(fresh.values, hit.values);
    }

    #[test]
    fn synthetic_portraits_are_seed_deterministic() {
        let a = synthetic_portrait(11, StyleTag::LineArt, "x");
        let b = synthetic_portrait(11, StyleTag::LineArt, "x");
        assert_eq!(a.pixels.as_raw(), b.pixels.as_raw());
    }
}
