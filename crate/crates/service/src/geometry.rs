//! Crop rectangles for the context and zoom views of a labeling task.

use pointsup::mask::BoundingBox;
use serde::{Deserialize, Serialize};

/// Context margin per side, as a fraction of the box extent.
pub const CONTEXT_MARGIN: f64 = 0.2;
/// Smallest zoom window side, in image pixels.
pub const ZOOM_MIN_SIDE: f64 = 64.0;
/// Zoom window side as a fraction of the box diagonal.
pub const ZOOM_DIAGONAL_FRACTION: f64 = 0.1;
pub const ZOOM_MAGNIFICATION: f64 = 4.0;
/// Side of the green box drawn around the point in the zoom view, display pixels.
pub const HIGHLIGHT_BOX_PX: f64 = 24.0;
/// Radius of the point marker, display pixels.
pub const MARKER_RADIUS_PX: f64 = 4.0;
pub const HIGHLIGHT_COLOR: &str = "#00ff00";

/// Axis-aligned crop in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x && x <= self.x + self.w && y >= self.y && y <= self.y + self.h
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

impl From<BoundingBox> for Rect {
    fn from(b: BoundingBox) -> Self {
        Self {
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextView {
    pub rect: Rect,
    /// Point position inside the crop, image pixels.
    pub marker: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZoomView {
    pub rect: Rect,
    pub magnification: f64,
    /// Rendered size, display pixels.
    pub output_size: [f64; 2],
    /// Point position inside the rendered view, display pixels.
    pub marker: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub radius_px: f64,
    pub highlight_box_px: f64,
    pub color: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewGeometry {
    pub image_size: [usize; 2],
    pub context_view: ContextView,
    pub zoom_view: ZoomView,
    pub marker: Marker,
}

/// Window of `side` along an axis of length `dim` holding `p`, shifted to
/// stay inside `[0, dim]`.
fn axis_window(p: f64, side: f64, dim: f64) -> (f64, f64) {
    if side >= dim {
        (0.0, dim)
    } else {
        ((p - side / 2.0).clamp(0.0, dim - side), side)
    }
}

pub fn zoom_rect(point: (f64, f64), bbox: &BoundingBox, width: usize, height: usize) -> Rect {
    let side = ZOOM_MIN_SIDE.max(ZOOM_DIAGONAL_FRACTION * bbox.diagonal());
    let (x, w) = axis_window(point.0, side, width as f64);
    let (y, h) = axis_window(point.1, side, height as f64);
    Rect { x, y, w, h }
}

pub fn context_rect(bbox: &BoundingBox, width: usize, height: usize) -> Rect {
    bbox.expand(CONTEXT_MARGIN)
        .clamp_to(width as f64, height as f64)
        .map(Rect::from)
        .unwrap_or(Rect {
            x: 0.0,
            y: 0.0,
            w: width as f64,
            h: height as f64,
        })
}

pub fn view_geometry(point: (f64, f64), bbox: &BoundingBox, width: usize, height: usize) -> ViewGeometry {
    let ctx = context_rect(bbox, width, height);
    let zoom = zoom_rect(point, bbox, width, height);
    let m = ZOOM_MAGNIFICATION;
    ViewGeometry {
        image_size: [width, height],
        context_view: ContextView {
            rect: ctx,
            marker: [point.0 - ctx.x, point.1 - ctx.y],
        },
        zoom_view: ZoomView {
            rect: zoom,
            magnification: m,
            output_size: [zoom.w * m, zoom.h * m],
            marker: [(point.0 - zoom.x) * m, (point.1 - zoom.y) * m],
        },
        marker: Marker {
            radius_px: MARKER_RADIUS_PX,
            highlight_box_px: HIGHLIGHT_BOX_PX,
            color: HIGHLIGHT_COLOR.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_when_room() {
        let b = BoundingBox::new(100.0, 100.0, 50.0, 40.0).unwrap();
        let z = zoom_rect((120.0, 110.0), &b, 400, 300);
        assert_eq!(z, Rect { x: 88.0, y: 78.0, w: 64.0, h: 64.0 });
        let c = context_rect(&b, 400, 300);
        assert_eq!(c, Rect { x: 90.0, y: 92.0, w: 70.0, h: 56.0 });
    }

    #[test]
    fn large_boxes_grow_the_zoom() {
        let b = BoundingBox::new(0.0, 0.0, 600.0, 800.0).unwrap();
        let z = zoom_rect((300.0, 400.0), &b, 1000, 1000);
        assert_eq!(z.w, 100.0);
        assert_eq!(z.x, 250.0);
    }

    #[test]
    fn corner_points_stay_inside() {
        let b = BoundingBox::new(0.0, 0.0, 10.0, 8.0).unwrap();
        let g = view_geometry((0.3, 0.2), &b, 40, 30);
        assert_eq!(g.zoom_view.rect, Rect { x: 0.0, y: 0.0, w: 40.0, h: 30.0 });
        assert_eq!(g.context_view.rect, Rect { x: 0.0, y: 0.0, w: 12.0, h: 9.6 });
        assert_eq!(g.zoom_view.marker, [1.2, 0.8]);
    }
}
