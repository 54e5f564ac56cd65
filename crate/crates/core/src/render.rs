//! Deterministic wireframe rasterization.
//!
//! Layouts render as flat colored rectangles on a white canvas: a
//! semi-transparent fill (alpha 0.6) composited over whatever is already
//! there, then an opaque one-pixel border in the same color. Elements are
//! painted in list order. The result feeds both the decoder's image
//! cross-attention and the locator's detection input, so renders must be
//! bit-identical across runs.

use crate::error::{Error, Result};
use crate::layout::{Element, Layout, SequenceCodec, TokenSequence};
use ndarray::{Array3, ArrayView3};

/// Fill opacity for element interiors; borders are fully opaque.
pub const FILL_ALPHA: f32 = 0.6;

/// Color for elements whose geometry is known but whose category token is
/// still masked.
pub const UNKNOWN_CATEGORY_COLOR: [f32; 3] = [0.5, 0.5, 0.5];

/// Output resolution for a render pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { width: 224, height: 224 }
    }
}

/// An H×W×3 intensity grid with values in `[0, 1]`; channel-last, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WireframeImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl WireframeImage {
    /// All-white canvas.
    pub fn blank(cfg: &RenderConfig) -> Self {
        Self { height: cfg.height, width: cfg.width, data: vec![1.0; cfg.height * cfg.width * 3] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn blend(&mut self, y: usize, x: usize, color: [f32; 3], alpha: f32) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = (1.0 - alpha) * self.data[i + c] + alpha * color[c];
        }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        ArrayView3::from_shape((self.height, self.width, 3), &self.data)
            .expect("buffer length is fixed at construction")
    }

    pub fn to_array(&self) -> Array3<f32> {
        self.view().to_owned()
    }

    /// Count of pixels that differ from the white background.
    pub fn occupied_pixels(&self) -> usize {
        self.data.chunks_exact(3).filter(|px| px.iter().any(|&v| v != 1.0)).count()
    }

    /// Stable digest of the raw buffer; equal layouts hash equal.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.data.len() * 4 + 16);
        bytes.extend_from_slice(&(self.height as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.width as u64).to_le_bytes());
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crate::util::sha256_hex(&bytes)
    }

    /// 8-bit RGB PNG encoding of the canvas.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(y, x);
                img.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([quant8(p[0]), quant8(p[1]), quant8(p[2])]),
                );
            }
        }
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

fn quant8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Deterministic per-category color: hue `id / K` on the HSV circle at
/// saturation 0.85, value 0.9.
pub fn palette_color(category: usize, num_categories: usize) -> Result<[f32; 3]> {
    if category >= num_categories {
        return Err(Error::Schema(format!(
            "category id {category} outside palette of {num_categories}"
        )));
    }
    Ok(hsv_to_rgb(category as f32 / num_categories as f32, 0.85, 0.9))
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Integer pixel box for a normalized rect: `round(value * extent)`,
/// half-open on both axes, clamped to the canvas. Boxes that round to zero
/// extent are widened to a single pixel so no in-canvas element vanishes.
pub fn pixel_box(e: &Element, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let snap = |v: f64, extent: usize| -> usize {
        ((v * extent as f64).round() as i64).clamp(0, extent as i64) as usize
    };
    let mut x0 = snap(e.x, width);
    let mut x1 = snap(e.x + e.w, width);
    let mut y0 = snap(e.y, height);
    let mut y1 = snap(e.y + e.h, height);
    if x1 <= x0 {
        if x0 == width {
            x0 = width - 1;
        }
        x1 = x0 + 1;
    }
    if y1 <= y0 {
        if y0 == height {
            y0 = height - 1;
        }
        y1 = y0 + 1;
    }
    (x0, x1, y0, y1)
}

fn paint(img: &mut WireframeImage, e: &Element, color: [f32; 3]) {
    let (x0, x1, y0, y1) = pixel_box(e, img.width, img.height);
    for y in y0..y1 {
        for x in x0..x1 {
            img.blend(y, x, color, FILL_ALPHA);
        }
    }
    // Opaque one-pixel border ring inside the box.
    for x in x0..x1 {
        img.blend(y0, x, color, 1.0);
        img.blend(y1 - 1, x, color, 1.0);
    }
    for y in y0..y1 {
        img.blend(y, x0, color, 1.0);
        img.blend(y, x1 - 1, color, 1.0);
    }
}

/// Renders a complete layout.
pub fn render_wireframe(
    layout: &Layout,
    num_categories: usize,
    cfg: &RenderConfig,
) -> Result<WireframeImage> {
    let mut img = WireframeImage::blank(cfg);
    for e in &layout.elements {
        paint(&mut img, e, palette_color(e.category, num_categories)?);
    }
    Ok(img)
}

/// Renders a partially masked sequence.
///
/// An element is skipped when any of its four geometry tokens is masked; a
/// masked category with complete geometry paints in neutral gray. A fully
/// masked sequence yields the blank canvas.
pub fn render_partial(
    seq: &TokenSequence,
    codec: &SequenceCodec,
    cfg: &RenderConfig,
) -> Result<WireframeImage> {
    use crate::layout::IdKind;
    let vocab = codec.vocab();
    let mut img = WireframeImage::blank(cfg);
    'elems: for elem in 0..seq.num_elements() {
        let mut coords = [0.0f64; 4];
        for attr in 1..=4 {
            let pos = seq.position_of(elem, attr)?;
            match vocab.kind_of(seq.id(pos))? {
                IdKind::Mask => continue 'elems,
                IdKind::Bin(b) => {
                    coords[attr - 1] = crate::layout::continuize(b, vocab.num_bins())?
                }
                other => {
                    return Err(Error::MalformedSequence(format!(
                        "geometry slot {pos} holds {other:?}"
                    )))
                }
            }
        }
        let cat_pos = seq.position_of(elem, 0)?;
        let color = match vocab.kind_of(seq.id(cat_pos))? {
            IdKind::Mask => UNKNOWN_CATEGORY_COLOR,
            IdKind::Category(c) => palette_color(c, vocab.num_categories())?,
            other => {
                return Err(Error::MalformedSequence(format!(
                    "category slot {cat_pos} holds {other:?}"
                )))
            }
        };
        let e = Element::new(0, coords[0], coords[1], coords[2], coords[3]);
        paint(&mut img, &e, color);
    }
    Ok(img)
}

/// SVG rendering of a complete layout, mirroring the raster style.
pub fn to_svg(layout: &Layout, num_categories: usize, cfg: &RenderConfig) -> Result<String> {
    let (w, h) = (cfg.width, cfg.height);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n"
    ));
    out.push_str(&format!("  <rect width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>\n"));
    for e in &layout.elements {
        let c = palette_color(e.category, num_categories)?;
        let hex = format!("#{:02x}{:02x}{:02x}", quant8(c[0]), quant8(c[1]), quant8(c[2]));
        out.push_str(&format!(
            "  <rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" \
             fill=\"{hex}\" fill-opacity=\"0.6\" stroke=\"{hex}\" stroke-width=\"1\"/>\n",
            e.x * w as f64,
            e.y * h as f64,
            e.w * w as f64,
            e.h * h as f64,
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}
