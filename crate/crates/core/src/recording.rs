//! Recording ingestion, luminance extraction and frame embeddings.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use base64::Engine as _;
use image::imageops::{self, FilterType};
use image::{AnimationDecoder, GrayImage, ImageBuffer, Luma, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Frame rate assumed for a directory of still images.
pub const DEFAULT_DIRECTORY_FPS: f64 = 30.0;

/// One decoded frame of a recording.
#[derive(Debug, Clone)]
pub struct Frame {
    pub index: usize,
    /// Seconds from the start of the recording.
    pub timestamp: f64,
    pub pixels: Arc<RgbImage>,
    /// Y channel (BT.601), same dimensions as `pixels`.
    pub luminance: Option<Arc<GrayImage>>,
    /// Unit-norm embedding of the luminance raster.
    pub embedding: Option<Arc<[f64]>>,
}

impl Frame {
    pub fn new(index: usize, timestamp: f64, pixels: RgbImage) -> Self {
        Frame {
            index,
            timestamp,
            pixels: Arc::new(pixels),
            luminance: None,
            embedding: None,
        }
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

#[derive(Debug, Clone)]
pub struct Recording {
    pub frames: Vec<Frame>,
    pub fps: f64,
    pub source_path: String,
}

impl Recording {
    /// Builds a recording from in-memory rasters at a constant frame rate.
    pub fn from_rasters(
        rasters: Vec<RgbImage>,
        fps: f64,
        source_path: impl Into<String>,
    ) -> Result<Self> {
        if fps.is_nan() || fps <= 0.0 {
            return Err(Error::Input(format!("fps must be positive, got {fps}")));
        }
        let frames = rasters
            .into_iter()
            .enumerate()
            .map(|(i, px)| Frame::new(i, i as f64 / fps, px))
            .collect();
        Recording::new(frames, fps, source_path)
    }

    /// Validates the frame list: at least two frames, consecutive indices,
    /// non-decreasing timestamps and a single resolution.
    pub fn new(frames: Vec<Frame>, fps: f64, source_path: impl Into<String>) -> Result<Self> {
        let source_path = source_path.into();
        if frames.len() < 2 {
            return Err(Error::DegenerateInput(format!(
                "{source_path}: {} decodable frame(s), need at least 2",
                frames.len()
            )));
        }
        let (w, h) = (frames[0].width(), frames[0].height());
        for (i, f) in frames.iter().enumerate() {
            if f.index != i {
                return Err(Error::Input(format!("frame {i} carries index {}", f.index)));
            }
            if (f.width(), f.height()) != (w, h) {
                return Err(Error::Input(format!(
                    "{source_path}: frame {i} is {}x{}, expected {w}x{h}",
                    f.width(),
                    f.height()
                )));
            }
            if i > 0 && f.timestamp < frames[i - 1].timestamp {
                return Err(Error::Input(format!("{source_path}: timestamps decrease at frame {i}")));
            }
        }
        Ok(Recording {
            frames,
            fps,
            source_path,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.frames[0].width(), self.frames[0].height())
    }

    /// Writes `frames/NNNNNN.png` under `dir`.
    pub fn write_frame_cache(&self, dir: &Path) -> Result<PathBuf> {
        let out = dir.join("frames");
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        for f in &self.frames {
            let path = out.join(format!("{:06}.png", f.index));
            f.pixels
                .save(&path)
                .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    /// Resample to this rate; `None` keeps the native rate.
    pub sample_fps: Option<f64>,
    /// Rate assigned to image directories, which carry no timing.
    pub directory_fps: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            sample_fps: None,
            directory_fps: DEFAULT_DIRECTORY_FPS,
        }
    }
}

/// Loads a GIF, MP4 (through `ffmpeg` on `PATH`) or a directory of PNG/JPEG frames.
pub fn load_recording(path: &Path, sample_fps: Option<f64>) -> Result<Recording> {
    load_recording_with(
        path,
        &LoadOptions {
            sample_fps,
            ..LoadOptions::default()
        },
    )
}

pub fn load_recording_with(path: &Path, opts: &LoadOptions) -> Result<Recording> {
    if let Some(fps) = opts.sample_fps {
        if fps.is_nan() || fps <= 0.0 {
            return Err(Error::Input(format!("sample fps must be positive, got {fps}")));
        }
    }
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let (rasters, timestamps, duration) = if meta.is_dir() {
        read_directory(path, opts.directory_fps)?
    } else {
        match extension(path).as_deref() {
            Some("gif") => read_gif(path)?,
            Some("mp4" | "m4v" | "mov" | "webm" | "mkv") => read_with_ffmpeg(path)?,
            Some("png" | "jpg" | "jpeg") => {
                let img = decode_image(path)?;
                (vec![img], vec![0.0], 1.0 / opts.directory_fps)
            }
            other => {
                return Err(Error::Input(format!(
                    "{}: unsupported recording format {:?}",
                    path.display(),
                    other.unwrap_or("")
                )))
            }
        }
    };
    let source = path.display().to_string();
    if rasters.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "{source}: {} decodable frame(s), need at least 2",
            rasters.len()
        )));
    }
    let native_fps = rasters.len() as f64 / duration;
    match opts.sample_fps {
        None => {
            let frames = rasters
                .into_iter()
                .zip(timestamps)
                .enumerate()
                .map(|(i, (px, t))| Frame::new(i, t, px))
                .collect();
            Recording::new(frames, native_fps, source)
        }
        Some(fps) => {
            let picks = resample_schedule(&timestamps, duration, fps);
            let mut rasters: Vec<Option<RgbImage>> = rasters.into_iter().map(Some).collect();
            let mut frames = Vec::with_capacity(picks.len());
            for (k, &src) in picks.iter().enumerate() {
                // Consecutive samples may repeat a source frame when fps exceeds the native rate.
                let px = if picks[k + 1..].contains(&src) {
                    rasters[src].clone().expect("source frame still present")
                } else {
                    rasters[src].take().expect("source frame still present")
                };
                frames.push(Frame::new(k, k as f64 / fps, px));
            }
            Recording::new(frames, fps, source)
        }
    }
}

/// Source frame shown at each sample time `k / fps` for `k / fps < duration`.
pub fn resample_schedule(timestamps: &[f64], duration: f64, fps: f64) -> Vec<usize> {
    let mut picks = Vec::new();
    let mut src = 0;
    let mut k = 0u64;
    loop {
        let t = k as f64 / fps;
        if t >= duration - 1e-9 {
            break;
        }
        while src + 1 < timestamps.len() && timestamps[src + 1] <= t + 1e-9 {
            src += 1;
        }
        picks.push(src);
        k += 1;
    }
    picks
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

pub fn decode_image(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

type Decoded = (Vec<RgbImage>, Vec<f64>, f64);

fn read_directory(dir: &Path, fps: f64) -> Result<Decoded> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| matches!(extension(p).as_deref(), Some("png" | "jpg" | "jpeg")))
        .collect();
    paths.sort();
    let rasters = paths
        .iter()
        .map(|p| decode_image(p))
        .collect::<Result<Vec<_>>>()?;
    let timestamps = (0..rasters.len()).map(|i| i as f64 / fps).collect();
    let duration = rasters.len() as f64 / fps;
    Ok((rasters, timestamps, duration))
}

fn read_gif(path: &Path) -> Result<Decoded> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = image::codecs::gif::GifDecoder::new(BufReader::new(file))
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut rasters = Vec::new();
    let mut timestamps = Vec::new();
    let mut t = 0.0;
    for frame in decoder.into_frames() {
        let frame = frame.map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let (num, den) = frame.delay().numer_denom_ms();
        let mut delay = num as f64 / den.max(1) as f64 / 1000.0;
        // Browsers treat near-zero GIF delays as 100 ms.
        if delay < 0.02 {
            delay = 0.1;
        }
        timestamps.push(t);
        t += delay;
        rasters.push(image::DynamicImage::ImageRgba8(frame.into_buffer()).to_rgb8());
    }
    Ok((rasters, timestamps, t))
}

fn read_with_ffmpeg(path: &Path) -> Result<Decoded> {
    let fps = probe_frame_rate(path)?;
    let tmp = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let pattern = tmp.path().join("%06d.png");
    let status = Command::new("ffmpeg")
        .args(["-v", "error", "-nostdin", "-i"])
        .arg(path)
        .args(["-vsync", "0"])
        .arg(&pattern)
        .status()
        .map_err(|e| Error::Input(format!("{}: ffmpeg is required for video containers: {e}", path.display())))?;
    if !status.success() {
        return Err(Error::Input(format!("{}: ffmpeg exited with {status}", path.display())));
    }
    read_directory(tmp.path(), fps)
}

fn probe_frame_rate(path: &Path) -> Result<f64> {
    let out = Command::new("ffprobe")
        .args([
            "-v",
            "error",
            "-select_streams",
            "v:0",
            "-show_entries",
            "stream=r_frame_rate",
            "-of",
            "csv=p=0",
        ])
        .arg(path)
        .output()
        .map_err(|e| Error::Input(format!("{}: ffprobe is required for video containers: {e}", path.display())))?;
    let text = String::from_utf8_lossy(&out.stdout);
    let rate = text.trim();
    let parsed = match rate.split_once('/') {
        Some((n, d)) => n.parse::<f64>().ok().zip(d.parse::<f64>().ok()).map(|(n, d)| n / d),
        None => rate.parse().ok(),
    };
    parsed
        .filter(|r| r.is_finite() && *r > 0.0)
        .ok_or_else(|| Error::Input(format!("{}: cannot read frame rate ({rate:?})", path.display())))
}

/// BT.601 luma of one RGB pixel on the 0..=255 scale.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round().clamp(0.0, 255.0) as u8
}

/// Populates the luminance raster; pixels are untouched.
pub fn to_luminance(frame: &Frame) -> Frame {
    let px = &frame.pixels;
    let y = GrayImage::from_fn(px.width(), px.height(), |x, y| {
        let [r, g, b] = px.get_pixel(x, y).0;
        Luma([luma(r, g, b)])
    });
    Frame {
        luminance: Some(Arc::new(y)),
        ..frame.clone()
    }
}

/// Channel-major `3 x height x width` tensor with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct EmbeddingInput {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

/// An image encoder mapping a normalized raster to a feature vector.
pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Native `(width, height)` input resolution.
    fn input_size(&self) -> (u32, u32);
    fn embed(&self, input: &EmbeddingInput) -> Result<Vec<f64>>;
}

/// Normalizes the luminance to `[0, 1]`, resizes it bilinearly to the
/// backend resolution and replicates it over three channels.
pub fn embedding_input(luminance: &GrayImage, size: (u32, u32)) -> EmbeddingInput {
    let (w, h) = size;
    let norm: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(luminance.width(), luminance.height(), |x, y| {
            Luma([luminance.get_pixel(x, y).0[0] as f32 / 255.0])
        });
    let resized = if (norm.width(), norm.height()) == (w, h) {
        norm
    } else {
        imageops::resize(&norm, w, h, FilterType::Triangle)
    };
    let plane: Vec<f32> = resized.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let mut data = Vec::with_capacity(plane.len() * 3);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    EmbeddingInput {
        width: w,
        height: h,
        data,
    }
}

/// Runs the backend on the frame's luminance and stores the L2-normalized output.
pub fn embed(frame: &Frame, backend: &dyn EmbeddingBackend) -> Result<Frame> {
    let lum = frame
        .luminance
        .as_ref()
        .ok_or_else(|| Error::State(format!("frame {} has no luminance", frame.index)))?;
    let input = embedding_input(lum, backend.input_size());
    let raw = backend.embed(&input)?;
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::backend(
            backend.name(),
            format!("frame {}: embedding has norm {norm}", frame.index),
        ));
    }
    let unit: Arc<[f64]> = raw.iter().map(|v| v / norm).collect();
    Ok(Frame {
        embedding: Some(unit),
        ..frame.clone()
    })
}

/// Computes luminance and embeddings for every frame, in parallel.
pub fn prepare(recording: &Recording, backend: &dyn EmbeddingBackend) -> Result<Recording> {
    let frames = recording
        .frames
        .par_iter()
        .map(|f| {
            let f = if f.luminance.is_some() {
                f.clone()
            } else {
                to_luminance(f)
            };
            if f.embedding.is_some() {
                Ok(f)
            } else {
                embed(&f, backend)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Recording {
        frames,
        ..recording.clone()
    })
}

/// Hex digest identifying a raster by content (first 16 hex chars of SHA-256
/// over the dimensions and RGB bytes). Scripted fixtures key on this.
pub fn fingerprint(pixels: &RgbImage) -> String {
    let mut hasher = Sha256::new();
    hasher.update(pixels.width().to_le_bytes());
    hasher.update(pixels.height().to_le_bytes());
    hasher.update(pixels.as_raw());
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_png(pixels: &RgbImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    pixels
        .write_to(&mut buf, image::ImageFormat::Png)
        .expect("png encoding into memory");
    buf.into_inner()
}

pub fn encode_png_base64(pixels: &RgbImage) -> String {
    base64::engine::general_purpose::STANDARD.encode(encode_png(pixels))
}

/// Deterministic stand-in for an image encoder.
///
/// The input tensor `x` (length `n = 3 * 32 * 32`) is mean-centered and
/// projected onto `dim - 2` random sign vectors. Sign `(j, i)` is bit 0 of
/// `splitmix64(seed ^ (j << 32 | i))`, and the projection is scaled by
/// `1 / sqrt(n)`. The last two components are `mean(x) - 0.5` and the
/// constant `0.05`, so uniform frames of different brightness stay apart
/// and no output is the zero vector. [`embed`] normalizes the result.
#[derive(Debug, Clone)]
pub struct StubEmbedding {
    dim: usize,
    seed: u64,
    size: (u32, u32),
    signs: Arc<Vec<f32>>,
}

pub const STUB_EMBEDDING_DIM: usize = 256;
pub const STUB_EMBEDDING_SEED: u64 = 0x005e_ed0f_c11b;

impl Default for StubEmbedding {
    fn default() -> Self {
        StubEmbedding::new(STUB_EMBEDDING_DIM, STUB_EMBEDDING_SEED)
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl StubEmbedding {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 2, "stub embedding needs more than 2 dimensions");
        let size = (32, 32);
        let n = 3 * (size.0 * size.1) as usize;
        let signs = (0..dim - 2)
            .flat_map(|j| {
                (0..n).map(move |i| {
                    if splitmix64(seed ^ ((j as u64) << 32 | i as u64)) & 1 == 1 {
                        1.0
                    } else {
                        -1.0
                    }
                })
            })
            .collect();
        StubEmbedding {
            dim,
            seed,
            size,
            signs: Arc::new(signs),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl EmbeddingBackend for StubEmbedding {
    fn name(&self) -> &str {
        "stub"
    }

    fn input_size(&self) -> (u32, u32) {
        self.size
    }

    fn embed(&self, input: &EmbeddingInput) -> Result<Vec<f64>> {
        let n = 3 * (self.size.0 * self.size.1) as usize;
        if input.data.len() != n {
            return Err(Error::backend(
                "stub",
                format!("expected {n} input values, got {}", input.data.len()),
            ));
        }
        let mean = input.data.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let centered: Vec<f32> = input.data.iter().map(|&v| v - mean as f32).collect();
        let scale = 1.0 / (n as f64).sqrt();
        let mut out: Vec<f64> = self
            .signs
            .chunks_exact(n)
            .map(|row| {
                let dot: f32 = row.iter().zip(&centered).map(|(s, c)| s * c).sum();
                dot as f64 * scale
            })
            .collect();
        out.push(mean - 0.5);
        out.push(0.05);
        Ok(out)
    }
}

/// Client for an embedding service.
///
/// `POST {endpoint}` with `{"width": w, "height": h, "image": "<base64 PNG>"}`;
/// the service answers `{"embedding": [f64, ...]}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedding {
    pub endpoint: String,
    pub input_size: (u32, u32),
    pub api_key: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingReply {
    embedding: Vec<f64>,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    width: u32,
    height: u32,
    image: &'a str,
}

impl EmbeddingBackend for HttpEmbedding {
    fn name(&self) -> &str {
        "http-embedding"
    }

    fn input_size(&self) -> (u32, u32) {
        self.input_size
    }

    fn embed(&self, input: &EmbeddingInput) -> Result<Vec<f64>> {
        let plane = (input.width * input.height) as usize;
        let rgb = RgbImage::from_fn(input.width, input.height, |x, y| {
            let v = (input.data[(y * input.width + x) as usize] * 255.0).round() as u8;
            debug_assert!(input.data.len() >= plane);
            image::Rgb([v, v, v])
        });
        let image = encode_png_base64(&rgb);
        let body = EmbeddingRequest {
            width: input.width,
            height: input.height,
            image: &image,
        };
        let mut req = ureq::post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let reply: EmbeddingReply = req
            .send_json(&body)
            .map_err(|e| Error::backend(self.name(), e))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::backend(self.name(), e))?;
        Ok(reply.embedding)
    }
}
