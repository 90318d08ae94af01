//! RGB images, bilinear resizing, random region erasing, and the patch
//! transformer image encoder.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Block, LayerNorm, Linear};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub const IMAGE_TAG: u16 = 3;

/// Interleaved RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image extents must be positive".into()));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    /// Writes an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v * 255.0).round() as u8).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches extents");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })
    }

    /// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| (v * 255.0).round() as u8 as f32 / 255.0).collect();
        Self { height: self.height, width: self.width, data }
    }

    pub fn mean_pixel<'a>(images: impl IntoIterator<Item = &'a Image>) -> [f32; 3] {
        let mut sum = [0f64; 3];
        let mut n = 0usize;
        for img in images {
            for px in img.data.chunks_exact(3) {
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                }
            }
            n += img.height * img.width;
        }
        if n == 0 {
            return [0.5; 3];
        }
        sum.map(|s| (s / n as f64) as f32)
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_normalize(img: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    if target_h == img.height && target_w == img.width {
        return Ok(img.clone());
    }
    let sy = img.height as f64 / target_h as f64;
    let sx = img.width as f64 / target_w as f64;
    let mut data = Vec::with_capacity(target_h * target_w * 3);
    for y in 0..target_h {
        let (y0, y1, fy) = source_coord(y, sy, img.height);
        for x in 0..target_w {
            let (x0, x1, fx) = source_coord(x, sx, img.width);
            let (p00, p01) = (img.pixel(y0, x0), img.pixel(y0, x1));
            let (p10, p11) = (img.pixel(y1, x0), img.pixel(y1, x1));
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                let bot = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                data.push(((top * (1.0 - fy) + bot * fy) as f32).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(target_h, target_w, data)
}

fn source_coord(i: usize, scale: f64, extent: usize) -> (usize, usize, f64) {
    let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(extent - 1);
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, s - i0 as f64)
}

/// Axis-aligned erased region; zero extents mean nothing was erased.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct EraseRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl EraseRect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    pub image: Image,
    pub rect: EraseRect,
    /// Index of the source sample, when known.
    pub source: Option<usize>,
}

/// Draws the erased rectangle for an `h x w` image: area `round(beta*h*w)`,
/// aspect ratio uniform in `[0.5, 2]`, clipped to fit, placed uniformly.
pub fn erase_rect(h: usize, w: usize, beta: f64, rng: &mut Rng) -> Result<EraseRect> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("erase fraction {beta} outside [0, 1)")));
    }
    let area = (beta * (h * w) as f64).round();
    if area < 1.0 {
        return Ok(EraseRect::default());
    }
    let aspect: f64 = rng.gen_range(0.5..=2.0);
    let mut rh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let mut rw = ((area / rh as f64).round() as usize).clamp(1, w);
    if rw == w {
        rh = ((area / w as f64).round() as usize).clamp(1, h);
    } else if rh == h {
        rw = ((area / h as f64).round() as usize).clamp(1, w);
    }
    let top = rng.gen_range(0..=h - rh);
    let left = rng.gen_range(0..=w - rw);
    Ok(EraseRect { top, left, height: rh, width: rw })
}

/// Replaces one random rectangle covering about `beta` of the image with `fill`.
pub fn erase(x: &Image, beta: f64, fill: [f32; 3], rng: &mut Rng) -> Result<AugmentedView> {
    let rect = erase_rect(x.height, x.width, beta, rng)?;
    let mut image = x.clone();
    for y in rect.top..rect.top + rect.height {
        for xx in rect.left..rect.left + rect.width {
            image.set_pixel(y, xx, fill);
        }
    }
    Ok(AugmentedView { image, rect, source: None })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub model_dim: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 32,
            patch: 8,
            model_dim: 32,
            embed_dim: 32,
            layers: 2,
            heads: 2,
            mlp_ratio: 4,
        }
    }
}

impl ImageConfig {
    pub fn patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding<T> {
    pub vector: Vec<T>,
    pub identity: usize,
    pub camera: u32,
}

/// Patch embedding, class token, learned positions, pre-norm blocks,
/// class-token pooling, linear projection, unit normalization.
#[derive(Clone, Debug)]
pub struct ImageEncoder<T> {
    pub cfg: ImageConfig,
    pub store: ParamStore<T>,
    patch_embed: Linear,
    class_token: ParamId,
    positions: ParamId,
    ln_pre: LayerNorm,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    proj: ParamId,
}

const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;

impl<T: Real> ImageEncoder<T> {
    pub fn new(cfg: ImageConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.patch == 0 || cfg.height % cfg.patch != 0 || cfg.width % cfg.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} not divisible by patch {}",
                cfg.height, cfg.width, cfg.patch
            )));
        }
        if cfg.heads == 0 || cfg.model_dim % cfg.heads != 0 {
            return Err(Error::InvalidArgument("model_dim must be divisible by heads".into()));
        }
        let d = cfg.model_dim;
        let mut store = ParamStore::new(IMAGE_TAG);
        let patch_embed = Linear::new(&mut store, "image.patch", 3 * cfg.patch * cfg.patch, d, rng);
        let class_token = store.add("image.class", normal_tensor(&[1, d], 0.02, rng), true);
        let positions = store.add("image.positions", normal_tensor(&[cfg.patches() + 1, d], 0.02, rng), true);
        let ln_pre = LayerNorm::new(&mut store, "image.ln_pre", d);
        let blocks = (0..cfg.layers)
            .map(|l| Block::new(&mut store, &format!("image.block{l}"), d, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let ln_post = LayerNorm::new(&mut store, "image.ln_post", d);
        let proj = store.add(
            "image.proj",
            normal_tensor(&[d, cfg.embed_dim], 1.0 / (d as f64).sqrt(), rng),
            true,
        );
        Ok(Self { cfg, store, patch_embed, class_token, positions, ln_pre, blocks, ln_post, proj })
    }

    pub fn patch_weight(&self) -> ParamId {
        self.patch_embed.weight
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.store.set_trainable(trainable);
    }

    fn patch_rows(&self, img: &Image, out: &mut Vec<T>) -> Result<()> {
        let p = self.cfg.patch;
        if img.height() % p != 0 || img.width() % p != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} not divisible by patch {p}",
                img.height(),
                img.width()
            )));
        }
        if img.height() != self.cfg.height || img.width() != self.cfg.width {
            return Err(Error::Shape(format!(
                "encoder expects {}x{} images, got {}x{}",
                self.cfg.height,
                self.cfg.width,
                img.height(),
                img.width()
            )));
        }
        for py in 0..img.height() / p {
            for px in 0..img.width() / p {
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            let v = img.pixel(py * p + dy, px * p + dx)[c];
                            out.push(T::c(((v - PIXEL_MEAN) / PIXEL_STD) as f64));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Encodes images into a `[images, embed_dim]` matrix of unit rows.
    pub fn encode_batch(&self, tape: &mut Tape<T>, images: &[&Image]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("no images to encode".into()));
        }
        let np = self.cfg.patches();
        let pd = 3 * self.cfg.patch * self.cfg.patch;
        let mut raw = Vec::with_capacity(images.len() * np * pd);
        for img in images {
            self.patch_rows(img, &mut raw)?;
        }
        let x = tape.constant(Tensor::from_parts(vec![images.len() * np, pd], raw))?;
        let patches = self.patch_embed.forward(tape, &self.store, x)?;
        let cls = tape.param(&self.store, self.class_token)?;
        let all = tape.concat_rows(&[cls, patches])?;
        let len = np + 1;
        let order: Vec<usize> = (0..images.len())
            .flat_map(|b| std::iter::once(0).chain((0..np).map(move |i| 1 + b * np + i)))
            .collect();
        let tokens = tape.gather_rows(all, &order)?;
        let pos = tape.param(&self.store, self.positions)?;
        let pos_idx: Vec<usize> = (0..images.len()).flat_map(|_| 0..len).collect();
        let pos = tape.gather_rows(pos, &pos_idx)?;
        let h = tape.add(tokens, pos)?;
        let mut h = self.ln_pre.forward(tape, &self.store, h)?;
        for b in &self.blocks {
            h = b.forward(tape, &self.store, h, images.len(), len)?;
        }
        let cls_rows: Vec<usize> = (0..images.len()).map(|b| b * len).collect();
        let pooled = tape.gather_rows(h, &cls_rows)?;
        let pooled = self.ln_post.forward(tape, &self.store, pooled)?;
        let proj = tape.param(&self.store, self.proj)?;
        let out = tape.matmul(pooled, proj)?;
        tape.l2_normalize_rows(out)
    }

    /// Embeds images without recording gradients, in chunks of `chunk`.
    pub fn embed_all(&self, images: &[&Image], chunk: usize) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(images.len() * self.cfg.embed_dim);
        for part in images.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let v = self.encode_batch(&mut tape, part)?;
            data.extend_from_slice(tape.value(v).data());
        }
        Tensor::new(vec![images.len(), self.cfg.embed_dim], data)
    }

    pub fn encode(&self, img: &Image, identity: usize, camera: u32) -> Result<ImageEmbedding<T>> {
        let e = self.embed_all(&[img], 1)?;
        Ok(ImageEmbedding { vector: e.into_data(), identity, camera })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..h * w * 3).map(|i| (i % 17) as f32 / 16.0).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp(6, 4);
        assert_eq!(resize_normalize(&img, 6, 4).unwrap(), img);
        let flat = Image::filled(5, 3, [0.25, 0.5, 0.75]);
        let big = resize_normalize(&flat, 11, 7).unwrap();
        assert!(big.data().chunks(3).all(|p| p == [0.25, 0.5, 0.75]));
        assert!(resize_normalize(&img, 0, 4).is_err());
    }

    #[test]
    fn zero_beta_is_identity() {
        let img = ramp(8, 8);
        let v = erase(&img, 0.0, [0.0; 3], &mut substream(0, "e", &[])).unwrap();
        assert_eq!(v.image, img);
        assert_eq!(v.rect.area(), 0);
        assert!(erase(&img, 1.0, [0.0; 3], &mut substream(0, "e", &[])).is_err());
    }

    #[test]
    fn erase_touches_only_the_rectangle() {
        let img = ramp(64, 32);
        let v = erase(&img, 1.0 / 3.0, [0.5; 3], &mut substream(3, "e", &[])).unwrap();
        for y in 0..64 {
            for x in 0..32 {
                if v.rect.contains(y, x) {
                    assert_eq!(v.image.pixel(y, x), [0.5; 3]);
                } else {
                    assert_eq!(v.image.pixel(y, x), img.pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn encoder_rejects_indivisible_geometry() {
        let cfg = ImageConfig { height: 30, ..ImageConfig::default() };
        assert!(ImageEncoder::<f32>::new(cfg, &mut substream(0, "i", &[])).is_err());
        let enc = ImageEncoder::<f32>::new(ImageConfig::default(), &mut substream(0, "i", &[])).unwrap();
        let mut tape = Tape::new();
        assert!(enc.encode_batch(&mut tape, &[&ramp(60, 32)]).is_err());
    }

    #[test]
    fn embedding_is_unit_and_deterministic() {
        let enc = ImageEncoder::<f64>::new(ImageConfig::default(), &mut substream(0, "i", &[])).unwrap();
        let img = ramp(64, 32);
        let a = enc.encode(&img, 0, 0).unwrap();
        let b = enc.encode(&img, 0, 0).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}
