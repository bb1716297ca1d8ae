use serde::{Deserialize, Serialize};

/// Corner box in image pixels; `x1 < x2`, `y1 < y2` for valid boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

/// Largest log-scale change allowed when decoding, so `exp` cannot overflow.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

impl BBox {
    pub const fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: (cx - 0.5 * w) as f32,
            y1: (cy - 0.5 * h) as f32,
            x2: (cx + 0.5 * w) as f32,
            y2: (cy + 0.5 * h) as f32,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 as f64 - self.x1 as f64
    }

    pub fn height(&self) -> f64 {
        self.y2 as f64 - self.y1 as f64
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x1 as f64 + self.x2 as f64),
            0.5 * (self.y1 as f64 + self.y2 as f64),
        )
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) as f64 - self.x1.max(other.x1) as f64).max(0.0);
        let h = (self.y2.min(other.y2) as f64 - self.y1.max(other.y1) as f64).max(0.0);
        w * h
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: f32, height: f32) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

/// Regression target of `gt` relative to `anchor`: `(dx, dy, dw, dh)`.
pub fn encode_deltas(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (gx, gy) = gt.center();
    let (gw, gh) = (gt.width(), gt.height());
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gw / aw).ln(),
        (gh / ah).ln(),
    ]
}

/// Inverse of [`encode_deltas`]; log-scales are clamped at [`MAX_LOG_SCALE`].
pub fn decode_deltas(anchor: &BBox, d: [f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + d[0] * aw;
    let cy = ay + d[1] * ah;
    let w = aw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ah * d[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_hand_values() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(1.0, 1.0, 11.0, 11.0);
        assert!((a.iou(&b) - 81.0 / 119.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        let empty = BBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(empty.iou(&empty), 0.0);
    }

    #[test]
    fn identity_and_scale_deltas() {
        let a = BBox::new(0.0, 0.0, 64.0, 64.0);
        assert_eq!(encode_deltas(&a, &a), [0.0, 0.0, 0.0, 0.0]);
        let d = decode_deltas(&a, [0.0, 0.0, 2f64.ln(), 0.0]);
        assert!((d.width() - 128.0).abs() < 1e-4);
        assert_eq!(d.center(), a.center());
    }
}
