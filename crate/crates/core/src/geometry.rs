//! Axis-aligned boxes, overlap, and the box-regression parameterization.
//!
//! Coordinates are continuous pixel coordinates with an exclusive max edge:
//! a box covering pixel columns `0..10` is `x_min = 0, x_max = 10` and has
//! width `10`. No `+1` convention anywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-space scale deltas are clamped to this magnitude before exponentiation.
pub const DELTA_LOG_CLAMP: f64 = 4.0;

/// Corner form; the canonical storage form of a box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCorners {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Center form `(x, y, w, h)` used by box regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCenter {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Scale-invariant center translation `(dx, dy)` and log-space size change `(dw, dh)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegressionDeltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxCorners {
    pub const fn new_unchecked(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BoxCorners {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self::new_unchecked(x_min, y_min, x_max, y_max);
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::Domain(format!("invalid box {b:?}")))
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_max >= self.x_min
            && self.y_max >= self.y_min
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn has_positive_area(&self) -> bool {
        self.width() > 0.0 && self.height() > 0.0
    }

    /// Clip to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BoxCorners {
        BoxCorners {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    pub fn scale(&self, factor: f64) -> BoxCorners {
        BoxCorners {
            x_min: self.x_min * factor,
            y_min: self.y_min * factor,
            x_max: self.x_max * factor,
            y_max: self.y_max * factor,
        }
    }

    pub fn intersection_area(&self, other: &BoxCorners) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn to_center(&self) -> BoxCenter {
        to_center(self)
    }
}

impl BoxCenter {
    pub fn to_corners(&self) -> BoxCorners {
        to_corners(self)
    }
}

/// Intersection over union. Zero whenever either box has zero area.
pub fn iou(a: &BoxCorners, b: &BoxCorners) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = area_a + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn to_center(b: &BoxCorners) -> BoxCenter {
    let w = b.x_max - b.x_min;
    let h = b.y_max - b.y_min;
    BoxCenter {
        x: b.x_min + 0.5 * w,
        y: b.y_min + 0.5 * h,
        w,
        h,
    }
}

pub fn to_corners(c: &BoxCenter) -> BoxCorners {
    BoxCorners {
        x_min: c.x - 0.5 * c.w,
        y_min: c.y - 0.5 * c.h,
        x_max: c.x + 0.5 * c.w,
        y_max: c.y + 0.5 * c.h,
    }
}

/// Map a proposal through predicted deltas. `dw`/`dh` are clamped to
/// `±DELTA_LOG_CLAMP` so an untrained regressor cannot blow a box up.
pub fn apply_deltas(p: &BoxCenter, d: &RegressionDeltas) -> BoxCenter {
    let dw = d.dw.clamp(-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP);
    let dh = d.dh.clamp(-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP);
    BoxCenter {
        x: p.w * d.dx + p.x,
        y: p.h * d.dy + p.y,
        w: p.w * dw.exp(),
        h: p.h * dh.exp(),
    }
}

/// Regression targets taking proposal `p` onto ground truth `g`.
pub fn regression_targets(p: &BoxCenter, g: &BoxCenter) -> Result<RegressionDeltas> {
    let sides = [p.w, p.h, g.w, g.h];
    if sides.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Domain(format!(
            "regression needs positive width/height, got p={p:?} g={g:?}"
        )));
    }
    Ok(RegressionDeltas {
        dx: (g.x - p.x) / p.w,
        dy: (g.y - p.y) / p.h,
        dw: (g.w / p.w).ln(),
        dh: (g.h / p.h).ln(),
    })
}
