//! The twelve synthetic object shapes, defined as point-membership tests
//! in a unit frame (`|u|, |v| <= 1` up to each shape's own extent).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Bar,
    Ellipse,
    Diamond,
    LShape,
    TShape,
    Plus,
    Chevron,
}

pub const ALL_SHAPES: [ShapeKind; 12] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Ring,
    ShapeKind::Cross,
    ShapeKind::Bar,
    ShapeKind::Ellipse,
    ShapeKind::Diamond,
    ShapeKind::LShape,
    ShapeKind::TShape,
    ShapeKind::Plus,
    ShapeKind::Chevron,
];

impl ShapeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Bar => "bar",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Diamond => "diamond",
            ShapeKind::LShape => "l",
            ShapeKind::TShape => "t",
            ShapeKind::Plus => "plus",
            ShapeKind::Chevron => "chevron",
        }
    }

    /// Point-in-shape test in the unit frame.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Disk => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.82 && v.abs() <= 0.82,
            ShapeKind::Triangle => {
                // Upward triangle with apex (0, -1) and base y = 0.8.
                v <= 0.8 && v >= -1.0 && u.abs() <= (v + 1.0) * 0.55
            }
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.3025..=1.0).contains(&r2) // inner radius 0.55
            }
            ShapeKind::Cross => {
                // Two diagonal strokes.
                let inside = u.abs() <= 1.0 && v.abs() <= 1.0;
                inside && ((u - v).abs() <= 0.42 || (u + v).abs() <= 0.42)
            }
            ShapeKind::Bar => u.abs() <= 1.0 && v.abs() <= 0.32,
            ShapeKind::Ellipse => {
                let vv = v / 0.55;
                u * u + vv * vv <= 1.0
            }
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::LShape => {
                let vertical = u >= -1.0 && u <= -0.4 && v.abs() <= 1.0;
                let bottom = v >= 0.4 && v <= 1.0 && u.abs() <= 1.0;
                vertical || bottom
            }
            ShapeKind::TShape => {
                let top = v >= -1.0 && v <= -0.4 && u.abs() <= 1.0;
                let stem = u.abs() <= 0.3 && v.abs() <= 1.0;
                top || stem
            }
            ShapeKind::Plus => {
                (u.abs() <= 0.32 && v.abs() <= 1.0) || (v.abs() <= 0.32 && u.abs() <= 1.0)
            }
            ShapeKind::Chevron => {
                u.abs() <= 1.0 && (v - (0.85 * u.abs() - 0.45)).abs() <= 0.3
            }
        }
    }
}
