use std::collections::HashMap;
use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::ToolError;

/// Floating-point RGB working image.
///
/// Values are gamma-encoded (sRGB transfer) in `[0, 1]`, interleaved
/// `R, G, B` row-major. Tools that operate in linear light convert on the fly.
#[derive(Clone, PartialEq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("hash", &self.content_hash())
            .finish()
    }
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self, ToolError> {
        if width == 0 || height == 0 {
            return Err(ToolError::EmptyImage);
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(ToolError::BufferSize {
                expected,
                actual: data.len(),
            });
        }
        let data = data.into_iter().map(clamp01).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn uniform(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f64; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).map(clamp01));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Applies `f` to every pixel and clamps the result.
    pub(crate) fn map_pixels(&self, mut f: impl FnMut(u32, u32, [f64; 3]) -> [f64; 3]) -> Self {
        let w = self.width;
        let mut data = Vec::with_capacity(self.data.len());
        for (i, px) in self.pixels().enumerate() {
            let (x, y) = ((i as u32) % w, (i as u32) / w);
            data.extend(f(x, y, px).map(clamp01));
        }
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| f64::from(quantize_channel(v)) / 255.0)
                .collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_channel(v)).collect()
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self, ToolError> {
        Self::new(
            width,
            height,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    /// SHA-256 over dimensions and the exact bit patterns of every channel.
    pub fn content_hash(&self) -> ContentHash {
        let mut h = Sha256::new();
        h.update(b"sepolab-image-v1");
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        for v in &self.data {
            h.update(v.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        ContentHash(out)
    }
}

pub(crate) fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// `round(v * 255)` with the value clamped to `[0, 1]` first.
pub fn quantize_channel(v: f64) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}

/// Encodes as 8-bit RGB PNG with fixed encoder settings.
pub fn encode_png(img: &ImageBuffer) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width, img.height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::Sub);
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer
            .write_image_data(&img.to_rgb8())
            .expect("in-memory PNG body");
    }
    out
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer, ToolError> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec
        .read_info()
        .map_err(|e| ToolError::Decode(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ToolError::Decode("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ToolError::Decode(e.to_string()))?;
    let buf = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        png::ColorType::Indexed => {
            return Err(ToolError::Decode("unexpanded palette image".into()))
        }
    };
    ImageBuffer::from_rgb8(info.width, info.height, &rgb)
}

pub fn read_png(path: &Path) -> Result<ImageBuffer, ToolError> {
    let bytes = std::fs::read(path).map_err(|e| ToolError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode_png(&bytes)
}

pub fn write_png(path: &Path, img: &ImageBuffer) -> Result<(), ToolError> {
    std::fs::write(path, encode_png(img)).map_err(|e| ToolError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// 256-bit content hash of a float image buffer.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        let arr: [u8; 32] = bytes.try_into().ok()?;
        Some(Self(arr))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..12])
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ContentHash::from_hex(&s)
            .ok_or_else(|| serde::de::Error::custom("expected 64 hex characters"))
    }
}

/// Reference to an image held by an [`ImageStore`]: location, content hash
/// of the float buffer and dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    pub path: String,
    pub hash: ContentHash,
    pub width: u32,
    pub height: u32,
}

impl ImageRef {
    pub fn matches(&self, img: &ImageBuffer) -> bool {
        self.width == img.width && self.height == img.height && self.hash == img.content_hash()
    }
}

/// Resolves image references to buffers.
pub trait ImageStore: Send + Sync {
    fn put(&self, img: &ImageBuffer) -> Result<ImageRef, ToolError>;
    fn get(&self, r: &ImageRef) -> Result<Arc<ImageBuffer>, ToolError>;
}

/// Process-local store keyed by content hash.
#[derive(Default)]
pub struct MemoryStore {
    images: RwLock<HashMap<ContentHash, Arc<ImageBuffer>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.images.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, img: &ImageBuffer, path: String) -> ImageRef {
        let hash = img.content_hash();
        self.images
            .write()
            .unwrap()
            .entry(hash)
            .or_insert_with(|| Arc::new(img.clone()));
        ImageRef {
            path,
            hash,
            width: img.width,
            height: img.height,
        }
    }

    fn lookup(&self, hash: &ContentHash) -> Option<Arc<ImageBuffer>> {
        self.images.read().unwrap().get(hash).cloned()
    }
}

impl ImageStore for MemoryStore {
    fn put(&self, img: &ImageBuffer) -> Result<ImageRef, ToolError> {
        let hash = img.content_hash();
        Ok(self.insert(img, format!("mem:{}", hash.to_hex())))
    }

    fn get(&self, r: &ImageRef) -> Result<Arc<ImageBuffer>, ToolError> {
        self.lookup(&r.hash)
            .ok_or_else(|| ToolError::Unresolvable(r.path.clone()))
    }
}

const RAW_EXT: &str = "f64";

fn io_error(path: &Path, e: std::io::Error) -> ToolError {
    ToolError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Width and height as little-endian `u32`, then every value as little-endian `f64`.
fn write_raw(path: &Path, img: &ImageBuffer) -> Result<(), ToolError> {
    let mut bytes = Vec::with_capacity(8 + img.data.len() * 8);
    bytes.extend_from_slice(&img.width.to_le_bytes());
    bytes.extend_from_slice(&img.height.to_le_bytes());
    for v in &img.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn read_raw(path: &Path) -> Result<ImageBuffer, ToolError> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    let bad = || ToolError::Decode(format!("{}: truncated raw image", path.display()));
    let (head, body) = bytes.split_at_checked(8).ok_or_else(bad)?;
    let width = u32::from_le_bytes(head[..4].try_into().expect("4 bytes"));
    let height = u32::from_le_bytes(head[4..].try_into().expect("4 bytes"));
    if body.len() % 8 != 0 {
        return Err(bad());
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ImageBuffer::new(width, height, data)
}

/// Directory-backed store. Every image is written as `<hash>.png`, the 8-bit
/// rendition, next to `<hash>.f64`, the full-precision buffer. Lookups
/// prefer the `.f64` sidecar, so tool outputs resolve bit-exactly from a
/// fresh process; a bare PNG must decode to its recorded hash.
pub struct DirStore {
    root: PathBuf,
    cache: MemoryStore,
}

impl DirStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, ToolError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| ToolError::Io {
            path: root.clone(),
            message: e.to_string(),
        })?;
        Ok(Self {
            root,
            cache: MemoryStore::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl ImageStore for DirStore {
    fn put(&self, img: &ImageBuffer) -> Result<ImageRef, ToolError> {
        let hash = img.content_hash();
        let path = self.root.join(format!("{}.png", hash.to_hex()));
        if !path.exists() {
            write_png(&path, img)?;
        }
        let raw = path.with_extension(RAW_EXT);
        if !raw.exists() {
            write_raw(&raw, img)?;
        }
        Ok(self.cache.insert(img, path.to_string_lossy().into_owned()))
    }

    fn get(&self, r: &ImageRef) -> Result<Arc<ImageBuffer>, ToolError> {
        if let Some(img) = self.cache.lookup(&r.hash) {
            return Ok(img);
        }
        let path = Path::new(&r.path);
        let raw = path.with_extension(RAW_EXT);
        let img = if raw.is_file() {
            read_raw(&raw)?
        } else {
            read_png(path)?
        };
        if !r.matches(&img) {
            return Err(ToolError::Unresolvable(r.path.clone()));
        }
        self.cache.insert(&img, r.path.clone());
        Ok(Arc::new(img))
    }
}
