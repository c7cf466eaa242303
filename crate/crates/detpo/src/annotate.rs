//! Rendering colored box outlines onto images for visual prompts:
//! green marks positives and best matches, red false positives, blue
//! false negatives.

use image::{DynamicImage, RgbImage};

use crate::error::Result;
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxColor {
    Green,
    Red,
    Blue,
}

impl BoxColor {
    pub fn rgb(&self) -> [u8; 3] {
        match self {
            BoxColor::Green => [0, 255, 0],
            BoxColor::Red => [255, 0, 0],
            BoxColor::Blue => [0, 0, 255],
        }
    }
}

/// Default stroke width: proportional so boxes stay visible on large
/// aerial frames and thin on thumbnails, never below 2 px.
pub fn auto_stroke_width(width: u32, height: u32) -> u32 {
    ((width.max(height) as f64) * 0.004).round().max(2.0) as u32
}

/// Decode an image and draw rectangle outlines for each `(box, color)`
/// pair. Boxes are pixel-space; strokes run inward from the box edge and
/// clip at image bounds. Pixels outside every stroke band are untouched.
pub fn draw_boxes(
    image_bytes: &[u8],
    boxes: &[(BoundingBox, BoxColor)],
    stroke_width: Option<u32>,
) -> Result<RgbImage> {
    let mut img = image::load_from_memory(image_bytes)?.into_rgb8();
    let stroke = stroke_width.unwrap_or_else(|| auto_stroke_width(img.width(), img.height()));
    for (bbox, color) in boxes {
        draw_rect_outline(&mut img, bbox, color.rgb(), stroke);
    }
    Ok(img)
}

fn draw_rect_outline(img: &mut RgbImage, bbox: &BoundingBox, color: [u8; 3], stroke: u32) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = bbox.x1.floor() as i64;
    let y0 = bbox.y1.floor() as i64;
    let x1 = (bbox.x2.ceil() as i64) - 1;
    let y1 = (bbox.y2.ceil() as i64) - 1;

    let mut put = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && x < w && y < h {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    };

    for i in 0..stroke as i64 {
        let (rx0, ry0, rx1, ry1) = (x0 + i, y0 + i, x1 - i, y1 - i);
        if rx0 > rx1 || ry0 > ry1 {
            break;
        }
        for x in rx0..=rx1 {
            put(x, ry0);
            put(x, ry1);
        }
        for y in ry0..=ry1 {
            put(rx0, y);
            put(rx1, y);
        }
    }
}

/// Deterministic lossless encoding, used for annotated prompt images.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    DynamicImage::ImageRgb8(img.clone())
        .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

/// Encode for a request payload: longest side capped, JPEG at the given
/// quality. Bounds the payload size the chat API sees.
pub fn encode_jpeg_capped(img: &RgbImage, quality: u8, max_side: u32) -> Result<Vec<u8>> {
    let longest = img.width().max(img.height());
    let resized;
    let source = if longest > max_side {
        let scale = max_side as f64 / longest as f64;
        let nw = ((img.width() as f64 * scale).round() as u32).max(1);
        let nh = ((img.height() as f64 * scale).round() as u32).max(1);
        resized = image::imageops::resize(img, nw, nh, image::imageops::FilterType::Triangle);
        &resized
    } else {
        img
    };
    let mut out = Vec::new();
    let mut cursor = std::io::Cursor::new(&mut out);
    let mut encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut cursor, quality);
    encoder.encode_image(&DynamicImage::ImageRgb8(source.clone()))?;
    drop(cursor);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_png(w: u32, h: u32) -> Vec<u8> {
        let img = RgbImage::from_pixel(w, h, image::Rgb([128, 128, 128]));
        encode_png(&img).unwrap()
    }

    #[test]
    fn single_green_box_changes_only_border_pixels() {
        let bytes = gray_png(40, 30);
        let bbox = BoundingBox::new(5.0, 5.0, 20.0, 15.0);
        let img = draw_boxes(&bytes, &[(bbox, BoxColor::Green)], Some(2)).unwrap();

        for y in 0..30i64 {
            for x in 0..40i64 {
                let px = img.get_pixel(x as u32, y as u32).0;
                // band: within the outer rect but not inside the 2px ring
                let in_outer = (5..20).contains(&x) && (5..15).contains(&y);
                let in_inner = (7..18).contains(&x) && (7..13).contains(&y);
                if in_outer && !in_inner {
                    assert_eq!(px, [0, 255, 0], "expected stroke at ({x},{y})");
                } else {
                    assert_eq!(px, [128, 128, 128], "expected untouched at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn empty_box_list_is_identity() {
        let bytes = gray_png(16, 16);
        let img = draw_boxes(&bytes, &[], Some(2)).unwrap();
        let original = image::load_from_memory(&bytes).unwrap().into_rgb8();
        assert_eq!(img.as_raw(), original.as_raw());
    }

    #[test]
    fn corner_box_clips_without_panicking() {
        let bytes = gray_png(20, 20);
        let bbox = BoundingBox::new(-5.0, -5.0, 8.0, 8.0);
        let img = draw_boxes(&bytes, &[(bbox, BoxColor::Red)], Some(3)).unwrap();
        // only the in-bounds part of the outline is drawn
        assert_eq!(img.get_pixel(7, 0).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(0, 7).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(0, 0).0, [128, 128, 128]);
        assert_eq!(img.get_pixel(19, 19).0, [128, 128, 128]);
    }

    #[test]
    fn drawing_is_deterministic() {
        let bytes = gray_png(32, 32);
        let boxes = [(BoundingBox::new(4.0, 4.0, 28.0, 28.0), BoxColor::Blue)];
        let a = encode_png(&draw_boxes(&bytes, &boxes, None).unwrap()).unwrap();
        let b = encode_png(&draw_boxes(&bytes, &boxes, None).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn auto_stroke_scales_with_image() {
        assert_eq!(auto_stroke_width(100, 100), 2);
        assert_eq!(auto_stroke_width(4000, 2000), 16);
    }

    #[test]
    fn jpeg_cap_limits_longest_side() {
        let img = RgbImage::from_pixel(3000, 1000, image::Rgb([10, 20, 30]));
        let bytes = encode_jpeg_capped(&img, 90, 1536).unwrap();
        let decoded = image::load_from_memory(&bytes).unwrap();
        assert_eq!(decoded.width(), 1536);
        assert_eq!(decoded.height(), 512);
    }
}
