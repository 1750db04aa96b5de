//! Axis-aligned bounding boxes in normalized image coordinates.
//!
//! Coordinates are fractions of the image side, so every valid box lives
//! inside the unit square. Degenerate boxes (zero width or height) are legal:
//! they have area 0 and an IoU of 0 against everything, themselves included.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reasons a coordinate tuple cannot form a [`BoundingBox`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoxError {
    #[error("coordinate {value} is not finite")]
    NonFinite { value: f64 },
    #[error("coordinate {value} lies outside [0, 1]")]
    OutOfRange { value: f64 },
    #[error("inverted box: min ({min}) exceeds max ({max})")]
    Inverted { min: f64, max: f64 },
}

/// Box stored as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, BoxError> {
        for value in [x_min, y_min, x_max, y_max] {
            if !value.is_finite() {
                return Err(BoxError::NonFinite { value });
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(BoxError::OutOfRange { value });
            }
        }
        if x_min > x_max {
            return Err(BoxError::Inverted {
                min: x_min,
                max: x_max,
            });
        }
        if y_min > y_max {
            return Err(BoxError::Inverted {
                min: y_min,
                max: y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union. Returns 0 whenever the intersection is empty,
    /// which covers the degenerate-box case where the union is 0 as well.
    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection_area(other);
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = BoxError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

pub fn area(b: &BoundingBox) -> f64 {
    b.area()
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}
