use crate::canvas::{CanvasBounds, Point};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Fits 2D coordinates into the canvas minus `margin` on every side.
/// One uniform scale for both axes; the point cloud is centred.
pub fn scale_to_canvas(coords: &Matrix, canvas: CanvasBounds, margin: f64) -> Result<Vec<Point>> {
    if coords.cols() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: coords.cols(),
        });
    }
    if !(canvas.width > 2.0 * margin && canvas.height > 2.0 * margin) || margin < 0.0 {
        return Err(Error::invalid("canvas must be larger than twice the margin"));
    }
    if coords.rows() == 0 {
        return Ok(Vec::new());
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in coords.row_iter() {
        for a in 0..2 {
            lo[a] = lo[a].min(r[a]);
            hi[a] = hi[a].max(r[a]);
        }
    }
    let span = [hi[0] - lo[0], hi[1] - lo[1]];
    let avail = [canvas.width - 2.0 * margin, canvas.height - 2.0 * margin];
    let center = canvas.center();
    if span[0] <= 0.0 && span[1] <= 0.0 {
        return Ok(vec![center; coords.rows()]);
    }
    let scale = [0, 1]
        .iter()
        .filter(|&&a| span[a] > 0.0)
        .map(|&a| avail[a] / span[a])
        .fold(f64::INFINITY, f64::min);
    let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    Ok(coords
        .row_iter()
        .map(|r| {
            canvas.clamp(Point::new(
                center.x + (r[0] - mid[0]) * scale,
                center.y + (r[1] - mid[1]) * scale,
            ))
        })
        .collect())
}
