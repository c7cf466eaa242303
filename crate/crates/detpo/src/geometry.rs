//! Axis-aligned bounding boxes, IoU, and conversions between the coordinate
//! conventions different model families emit (pixel vs per-mille, xyxy vs
//! yxyx corner order).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with `(x1, y1)` top-left and `(x2, y2)` bottom-right.
///
/// Coordinates are kept as reals; quantization happens only at
/// serialization so that repeated conversions do not compound rounding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Build a box from corners in any order, swapping so that
    /// `x2 >= x1` and `y2 >= y1`. Models frequently emit swapped corners;
    /// dropping those boxes would bias recall.
    pub fn normalized(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Clamp the box to `[0, width] x [0, height]`.
    pub fn clamp_to(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection-over-union of two boxes in the same coordinate space.
///
/// Returns 0 when the union has zero area (two degenerate boxes), which
/// avoids a divide-by-zero and matches common evaluator behavior.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU with an explicit space check. Errors when the two boxes are declared
/// in different coordinate spaces.
pub fn iou_checked(
    a: &BoundingBox,
    space_a: &CoordinateSpace,
    b: &BoundingBox,
    space_b: &CoordinateSpace,
) -> Result<f64> {
    if space_a != space_b {
        return Err(Error::CoordinateSpaceMismatch(format!(
            "{space_a:?} vs {space_b:?}"
        )));
    }
    Ok(iou(a, b))
}

/// Order in which the four corner coordinates appear in serialized form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CornerOrder {
    /// `[x1, y1, x2, y2]` (Qwen-style).
    Xyxy,
    /// `[ymin, xmin, ymax, xmax]` (Gemini-style).
    Yxyx,
}

/// Scale convention of raw coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SpaceKind {
    Pixel { width: f64, height: f64 },
    PerMille,
}

impl SpaceKind {
    fn x_scale(&self) -> f64 {
        match self {
            SpaceKind::Pixel { width, .. } => *width,
            SpaceKind::PerMille => 1000.0,
        }
    }

    fn y_scale(&self) -> f64 {
        match self {
            SpaceKind::Pixel { height, .. } => *height,
            SpaceKind::PerMille => 1000.0,
        }
    }
}

/// A declared coordinate convention: scale plus corner order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateSpace {
    #[serde(flatten)]
    pub kind: SpaceKind,
    pub order: CornerOrder,
}

impl CoordinateSpace {
    pub fn pixel(width: f64, height: f64) -> Result<Self> {
        if width <= 0.0 || height <= 0.0 {
            return Err(Error::InvalidCoordinateSpace(format!(
                "non-positive image dimensions {width}x{height}"
            )));
        }
        Ok(Self {
            kind: SpaceKind::Pixel { width, height },
            order: CornerOrder::Xyxy,
        })
    }

    pub fn per_mille(order: CornerOrder) -> Self {
        Self {
            kind: SpaceKind::PerMille,
            order,
        }
    }

    pub fn with_order(mut self, order: CornerOrder) -> Self {
        self.order = order;
        self
    }

    /// Interpret a raw 4-array in this space's corner order as a canonical
    /// box, swapping corners if they arrive inverted.
    pub fn decode(&self, raw: [f64; 4]) -> BoundingBox {
        let [a, b, c, d] = raw;
        match self.order {
            CornerOrder::Xyxy => BoundingBox::normalized(a, b, c, d),
            CornerOrder::Yxyx => BoundingBox::normalized(b, a, d, c),
        }
    }

    /// Serialize a canonical box into this space's corner order.
    pub fn encode(&self, bbox: &BoundingBox) -> [f64; 4] {
        match self.order {
            CornerOrder::Xyxy => [bbox.x1, bbox.y1, bbox.x2, bbox.y2],
            CornerOrder::Yxyx => [bbox.y1, bbox.x1, bbox.y2, bbox.x2],
        }
    }

    /// Quantize coordinates for serialized output: integers in per-mille
    /// space, one-decimal fixed point in pixel space.
    pub fn quantize(&self, raw: [f64; 4]) -> [f64; 4] {
        match self.kind {
            SpaceKind::PerMille => raw.map(|v| v.round()),
            SpaceKind::Pixel { .. } => raw.map(|v| (v * 10.0).round() / 10.0),
        }
    }
}

/// Rescale a canonical box between space kinds (linear map through the
/// normalized unit square).
pub fn rescale(bbox: &BoundingBox, from: &SpaceKind, to: &SpaceKind) -> Result<BoundingBox> {
    for kind in [from, to] {
        if let SpaceKind::Pixel { width, height } = kind {
            if *width <= 0.0 || *height <= 0.0 {
                return Err(Error::InvalidCoordinateSpace(format!(
                    "non-positive image dimensions {width}x{height}"
                )));
            }
        }
    }
    let sx = to.x_scale() / from.x_scale();
    let sy = to.y_scale() / from.y_scale();
    Ok(BoundingBox {
        x1: bbox.x1 * sx,
        y1: bbox.y1 * sy,
        x2: bbox.x2 * sx,
        y2: bbox.y2 * sy,
    })
}

/// Convert a raw 4-array between coordinate conventions: decode per the
/// source order, rescale, and re-encode per the target order.
pub fn convert(raw: [f64; 4], from: &CoordinateSpace, to: &CoordinateSpace) -> Result<[f64; 4]> {
    let bbox = from.decode(raw);
    let scaled = rescale(&bbox, &from.kind, &to.kind)?;
    Ok(to.encode(&scaled))
}
