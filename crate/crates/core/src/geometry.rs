//! Polyline primitives, SE(2) poses, Chamfer distance, arc-length
//! resampling, and rasterization. Everything here is a pure function.

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

pub type Point = (f64, f64);

/// Ordered 2-D point sequence in meters. Closed polylines (pedestrian
/// crossing polygons) implicitly connect the last point back to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Point>,
    pub closed: bool,
}

impl Polyline {
    pub fn new(points: Vec<Point>, closed: bool) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::Contract(format!(
                "polyline needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(GeometryError::Contract("non-finite coordinate".into()));
        }
        Ok(Self { points, closed })
    }

    pub fn open(points: Vec<Point>) -> Result<Self, GeometryError> {
        Self::new(points, false)
    }

    pub fn closed(points: Vec<Point>) -> Result<Self, GeometryError> {
        Self::new(points, true)
    }

    pub fn arc_length(&self) -> f64 {
        arc_length(&self.points, self.closed)
    }

    /// Minimum distance from a point to this polyline's segments.
    pub fn distance_to(&self, p: Point) -> f64 {
        let mut best = f64::INFINITY;
        for (a, b) in segments(&self.points, self.closed) {
            best = best.min(point_segment_distance(p, a, b));
        }
        best
    }
}

fn segments(points: &[Point], closed: bool) -> impl Iterator<Item = (Point, Point)> + '_ {
    let n = points.len();
    let count = if closed { n } else { n - 1 };
    (0..count).map(move |i| (points[i], points[(i + 1) % n]))
}

pub fn dist(a: Point, b: Point) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn arc_length(points: &[Point], closed: bool) -> f64 {
    segments(points, closed).map(|(a, b)| dist(a, b)).sum()
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0);
    dist(p, (a.0 + t * abx, a.1 + t * aby))
}

/// Resample onto uniform arc-length fractions. Open curves keep both
/// endpoints exactly; closed curves use fractions 0..(n-1)/n of the
/// perimeter starting at the first vertex.
pub fn resample(p: &Polyline, n_points: usize) -> Result<Polyline, GeometryError> {
    if n_points < 2 {
        return Err(GeometryError::Contract(format!(
            "resample needs n_points >= 2, got {n_points}"
        )));
    }
    let total = p.arc_length();
    if total <= 0.0 {
        return Err(GeometryError::Degenerate(
            "zero-length polyline (all points coincident)".into(),
        ));
    }
    let seg: Vec<(Point, Point)> = segments(&p.points, p.closed).collect();
    let cumulative: Vec<f64> = {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(seg.len() + 1);
        out.push(0.0);
        for (a, b) in &seg {
            acc += dist(*a, *b);
            out.push(acc);
        }
        out
    };
    let mut points = Vec::with_capacity(n_points);
    let denom = if p.closed { n_points } else { n_points - 1 };
    let mut cursor = 0usize;
    for i in 0..n_points {
        if !p.closed && i == 0 {
            points.push(p.points[0]);
            continue;
        }
        if !p.closed && i == n_points - 1 {
            points.push(*p.points.last().expect("validated nonempty"));
            continue;
        }
        let target = total * i as f64 / denom as f64;
        while cursor + 1 < cumulative.len() - 1 && cumulative[cursor + 1] < target {
            cursor += 1;
        }
        let (a, b) = seg[cursor];
        let seg_len = cumulative[cursor + 1] - cumulative[cursor];
        let t = if seg_len > 0.0 {
            ((target - cumulative[cursor]) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        points.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
    }
    Polyline::new(points, p.closed)
}

/// Symmetric point-set Chamfer distance in meters:
/// 0.5 * (mean nearest-neighbor distance a->b + mean b->a).
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64, GeometryError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeometryError::Contract("chamfer of empty point set".into()));
    }
    let mean_nn = |from: &[Point], to: &[Point]| -> f64 {
        let mut acc = 0.0;
        for p in from {
            let mut best = f64::INFINITY;
            for q in to {
                let d = dist(*p, *q);
                if d < best {
                    best = d;
                }
            }
            acc += best;
        }
        acc / from.len() as f64
    };
    Ok(0.5 * (mean_nn(a, b) + mean_nn(b, a)))
}

// ── SE(2) ───────────────────────────────────────────────────────────────

/// Planar rigid transform; theta normalized to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Se2Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

fn normalize_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta.rem_euclid(two_pi);
    if t > std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

impl Se2Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    /// p' = R(theta) p + t
    pub fn apply_point(&self, p: Point) -> Point {
        let (s, c) = self.theta.sin_cos();
        (
            c * p.0 - s * p.1 + self.x,
            s * p.0 + c * p.1 + self.y,
        )
    }

    pub fn apply_polyline(&self, p: &Polyline) -> Polyline {
        Polyline {
            points: p.points.iter().map(|q| self.apply_point(*q)).collect(),
            closed: p.closed,
        }
    }

    /// (self ∘ other)(p) = self(other(p)).
    pub fn compose(&self, other: &Se2Pose) -> Se2Pose {
        let (s, c) = self.theta.sin_cos();
        Se2Pose::new(
            c * other.x - s * other.y + self.x,
            s * other.x + c * other.y + self.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Se2Pose {
        let (s, c) = self.theta.sin_cos();
        Se2Pose::new(
            -(c * self.x + s * self.y),
            -(-s * self.x + c * self.y),
            -self.theta,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

// ── Raster masks ────────────────────────────────────────────────────────

/// Axis-aligned metric extent of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridWindow {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl GridWindow {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Self {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        p.0 >= self.x_min && p.0 <= self.x_max && p.1 >= self.y_min && p.1 <= self.y_max
    }

    pub fn center(&self) -> Point {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn half_extents(&self) -> (f64, f64) {
        (
            0.5 * (self.x_max - self.x_min),
            0.5 * (self.y_max - self.y_min),
        )
    }
}

/// H x W grid of values in [0,1] over a metric window. Row 0 spans
/// y in [y_min, y_min+resolution); column 0 spans x likewise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterMask {
    pub grid: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub window: GridWindow,
    pub resolution: f64,
}

impl RasterMask {
    pub fn zeros(window: GridWindow, resolution: f64) -> Result<Self, GeometryError> {
        let (h, w) = grid_dims(&window, resolution)?;
        Ok(Self {
            grid: vec![0.0; h * w],
            h,
            w,
            window,
            resolution,
        })
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        (
            self.window.x_min + (col as f64 + 0.5) * self.resolution,
            self.window.y_min + (row as f64 + 0.5) * self.resolution,
        )
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.w + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.grid[row * self.w + col] = v;
    }

    pub fn sum(&self) -> f64 {
        self.grid.iter().sum()
    }
}

/// Validate that the window divides evenly into cells.
pub fn grid_dims(window: &GridWindow, resolution: f64) -> Result<(usize, usize), GeometryError> {
    if resolution <= 0.0 {
        return Err(GeometryError::Contract(format!(
            "resolution must be positive, got {resolution}"
        )));
    }
    let wf = (window.x_max - window.x_min) / resolution;
    let hf = (window.y_max - window.y_min) / resolution;
    for (v, axis) in [(wf, "x"), (hf, "y")] {
        if v < 1.0 || (v - v.round()).abs() > 1e-9 {
            return Err(GeometryError::Contract(format!(
                "window {axis} extent is not an integral number of cells ({v})"
            )));
        }
    }
    Ok((hf.round() as usize, wf.round() as usize))
}

/// Rasterize a polyline. Open curves set every cell whose center lies
/// within thickness/2 of the curve; closed curves fill the polygon
/// interior.
pub fn rasterize(
    p: &Polyline,
    window: GridWindow,
    resolution: f64,
    thickness: f64,
) -> Result<RasterMask, GeometryError> {
    if thickness <= 0.0 {
        return Err(GeometryError::Contract(format!(
            "thickness must be positive, got {thickness}"
        )));
    }
    let mut mask = RasterMask::zeros(window, resolution)?;
    if p.closed {
        for row in 0..mask.h {
            for col in 0..mask.w {
                let c = mask.cell_center(row, col);
                if point_in_polygon(c, &p.points) {
                    mask.set(row, col, 1.0);
                }
            }
        }
    } else {
        let half = thickness / 2.0;
        // Only scan cells near each segment's bounding box.
        for (a, b) in segments(&p.points, false) {
            let x_lo = a.0.min(b.0) - half;
            let x_hi = a.0.max(b.0) + half;
            let y_lo = a.1.min(b.1) - half;
            let y_hi = a.1.max(b.1) + half;
            let col_lo = ((x_lo - window.x_min) / resolution).floor().max(0.0) as usize;
            let row_lo = ((y_lo - window.y_min) / resolution).floor().max(0.0) as usize;
            let col_hi = (((x_hi - window.x_min) / resolution).ceil() as isize)
                .clamp(0, mask.w as isize) as usize;
            let row_hi = (((y_hi - window.y_min) / resolution).ceil() as isize)
                .clamp(0, mask.h as isize) as usize;
            for row in row_lo..row_hi {
                for col in col_lo..col_hi {
                    let c = mask.cell_center(row, col);
                    if point_segment_distance(c, a, b) <= half {
                        mask.set(row, col, 1.0);
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Even-odd ray cast; points exactly on an edge are implementation-defined.
pub fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if ((yi > p.1) != (yj > p.1))
            && (p.0 < (xj - xi) * (p.1 - yi) / (yj - yi) + xi)
        {
            inside = !inside;
        }
        j = i;
    }
    inside
}

// ── Window clipping (support for frame observation) ────────────────────

/// Clip an open polyline to a window, returning the connected pieces in
/// input order.
pub fn clip_open_to_window(points: &[Point], window: &GridWindow) -> Vec<Vec<Point>> {
    let mut pieces: Vec<Vec<Point>> = Vec::new();
    let mut current: Vec<Point> = Vec::new();
    for i in 0..points.len() - 1 {
        if let Some((a, b)) = clip_segment(points[i], points[i + 1], window) {
            match current.last() {
                Some(last) if dist(*last, a) < 1e-9 => {
                    current.push(b);
                }
                Some(_) => {
                    pieces.push(std::mem::take(&mut current));
                    current.push(a);
                    current.push(b);
                }
                None => {
                    current.push(a);
                    current.push(b);
                }
            }
        } else if !current.is_empty() {
            pieces.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        pieces.push(current);
    }
    // Collapse consecutive duplicate points left by tangent clips.
    pieces
        .into_iter()
        .map(|piece| {
            let mut out: Vec<Point> = Vec::with_capacity(piece.len());
            for p in piece {
                if out.last().map_or(true, |q| dist(*q, p) > 1e-12) {
                    out.push(p);
                }
            }
            out
        })
        .filter(|piece| piece.len() >= 2)
        .collect()
}

/// Liang-Barsky segment clip.
fn clip_segment(a: Point, b: Point, window: &GridWindow) -> Option<(Point, Point)> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    let checks = [
        (-dx, a.0 - window.x_min),
        (dx, window.x_max - a.0),
        (-dy, a.1 - window.y_min),
        (dy, window.y_max - a.1),
    ];
    for (p, q) in checks {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                if r > t1 {
                    return None;
                }
                if r > t0 {
                    t0 = r;
                }
            } else {
                if r < t0 {
                    return None;
                }
                if r < t1 {
                    t1 = r;
                }
            }
        }
    }
    if t0 > t1 {
        return None;
    }
    Some((
        (a.0 + t0 * dx, a.1 + t0 * dy),
        (a.0 + t1 * dx, a.1 + t1 * dy),
    ))
}

/// Sutherland-Hodgman polygon clip against the window. May return fewer
/// than 3 points when the polygon lies outside.
pub fn clip_closed_to_window(points: &[Point], window: &GridWindow) -> Vec<Point> {
    #[derive(Clone, Copy)]
    enum Edge {
        XMin(f64),
        XMax(f64),
        YMin(f64),
        YMax(f64),
    }
    let inside = |e: Edge, p: Point| match e {
        Edge::XMin(v) => p.0 >= v,
        Edge::XMax(v) => p.0 <= v,
        Edge::YMin(v) => p.1 >= v,
        Edge::YMax(v) => p.1 <= v,
    };
    let intersect = |e: Edge, a: Point, b: Point| -> Point {
        let t = match e {
            Edge::XMin(v) | Edge::XMax(v) => (v - a.0) / (b.0 - a.0),
            Edge::YMin(v) | Edge::YMax(v) => (v - a.1) / (b.1 - a.1),
        };
        (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
    };
    let mut poly: Vec<Point> = points.to_vec();
    for edge in [
        Edge::XMin(window.x_min),
        Edge::XMax(window.x_max),
        Edge::YMin(window.y_min),
        Edge::YMax(window.y_max),
    ] {
        if poly.is_empty() {
            break;
        }
        let mut out = Vec::with_capacity(poly.len() + 4);
        for i in 0..poly.len() {
            let cur = poly[i];
            let prev = poly[(i + poly.len() - 1) % poly.len()];
            let cur_in = inside(edge, cur);
            let prev_in = inside(edge, prev);
            if cur_in {
                if !prev_in {
                    out.push(intersect(edge, prev, cur));
                }
                out.push(cur);
            } else if prev_in {
                out.push(intersect(edge, prev, cur));
            }
        }
        poly = out;
    }
    // Drop duplicate consecutive vertices introduced by clipping.
    let mut cleaned: Vec<Point> = Vec::with_capacity(poly.len());
    for p in poly {
        if cleaned.last().map_or(true, |q| dist(*q, p) > 1e-12) {
            cleaned.push(p);
        }
    }
    if cleaned.len() >= 2 && dist(cleaned[0], *cleaned.last().unwrap()) <= 1e-12 {
        cleaned.pop();
    }
    cleaned
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn resample_segment_to_five() {
        let p = Polyline::open(vec![(0.0, 0.0), (4.0, 0.0)]).unwrap();
        let r = resample(&p, 5).unwrap();
        let expected = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0), (4.0, 0.0)];
        for (got, want) in r.points.iter().zip(expected) {
            assert_abs_diff_eq!(got.0, want.0, epsilon = 1e-12);
            assert_abs_diff_eq!(got.1, want.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn resample_idempotent_on_uniform() {
        let p = Polyline::open(vec![(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]).unwrap();
        let r = resample(&p, 4).unwrap();
        for (got, want) in r.points.iter().zip(&p.points) {
            assert_abs_diff_eq!(got.0, want.0, epsilon = 1e-9);
            assert_abs_diff_eq!(got.1, want.1, epsilon = 1e-9);
        }
    }

    #[test]
    fn resample_closed_square_corners() {
        let p = Polyline::closed(vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]).unwrap();
        let r = resample(&p, 4).unwrap();
        let expected = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        for (got, want) in r.points.iter().zip(expected) {
            assert_abs_diff_eq!(got.0, want.0, epsilon = 1e-12);
            assert_abs_diff_eq!(got.1, want.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn resample_zero_length_errors() {
        let p = Polyline::open(vec![(1.0, 1.0), (1.0, 1.0)]).unwrap();
        assert!(matches!(
            resample(&p, 3),
            Err(GeometryError::Degenerate(_))
        ));
    }

    /// Arc position of a point known to lie on the polyline: offset along
    /// the segment it is closest to. Independent oracle for spacing checks.
    fn arc_position(p: &Polyline, q: Point) -> f64 {
        let mut cum = 0.0;
        let mut best = (f64::INFINITY, 0.0);
        for w in p.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let len = dist(a, b);
            let d = {
                let len2 = len * len;
                let t = if len2 > 0.0 {
                    (((q.0 - a.0) * (b.0 - a.0) + (q.1 - a.1) * (b.1 - a.1)) / len2)
                        .clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (dist(q, (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))), t)
            };
            if d.0 < best.0 {
                best = (d.0, cum + d.1 * len);
            }
            cum += len;
        }
        best.1
    }

    #[test]
    fn resample_spacing_uniform_in_arc_length() {
        let p = Polyline::open(vec![(0.0, 0.0), (2.0, 1.0), (3.0, -1.0), (7.0, 0.5)]).unwrap();
        let n = 13;
        let r = resample(&p, n).unwrap();
        let total = p.arc_length();
        let step = total / (n - 1) as f64;
        for q in &r.points {
            assert!(p.distance_to(*q) < 1e-9, "resampled point off the curve");
        }
        let positions: Vec<f64> = r.points.iter().map(|q| arc_position(&p, *q)).collect();
        for (i, w) in positions.windows(2).enumerate() {
            assert_abs_diff_eq!(w[1] - w[0], step, epsilon = 1e-9 * total.max(1.0));
            let _ = i;
        }
        assert_abs_diff_eq!(positions[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(positions[n - 1], total, epsilon = 1e-9);
    }

    #[test]
    fn chamfer_identity_zero() {
        let a = vec![(0.0, 0.0), (1.0, 2.0), (3.0, -1.0)];
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_parallel_rows() {
        let a = vec![(0.0, 0.0), (2.0, 0.0)];
        let b = vec![(0.0, 1.0), (2.0, 1.0)];
        assert_abs_diff_eq!(chamfer(&a, &b).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn chamfer_three_four_five() {
        let a = vec![(0.0, 0.0)];
        let b = vec![(3.0, 4.0)];
        assert_abs_diff_eq!(chamfer(&a, &b).unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn chamfer_empty_errors() {
        let a: Vec<Point> = vec![];
        let b = vec![(0.0, 0.0)];
        assert!(chamfer(&a, &b).is_err());
    }

    #[test]
    fn se2_rotation_quarter_turn() {
        let g = Se2Pose::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let p = g.apply_point((1.0, 0.0));
        assert_abs_diff_eq!(p.0, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.1, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn se2_pure_translation() {
        let g = Se2Pose::new(1.0, 2.0, 0.0);
        assert_eq!(g.apply_point((3.0, 4.0)), (4.0, 6.0));
    }

    #[test]
    fn se2_compose_inverse_identity() {
        let g = Se2Pose::new(1.5, -2.0, 0.7);
        let id = g.compose(&g.inverse());
        assert_abs_diff_eq!(id.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(id.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(id.theta, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rasterize_horizontal_row() {
        let window = GridWindow::new(0.0, 4.0, 0.0, 4.0);
        // Row 1 centers sit at y = 1.5.
        let p = Polyline::open(vec![(0.0, 1.5), (4.0, 1.5)]).unwrap();
        let mask = rasterize(&p, window, 1.0, 1.0).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                let expect = if row == 1 { 1.0 } else { 0.0 };
                assert_eq!(mask.get(row, col), expect, "row {row} col {col}");
            }
        }
    }

    #[test]
    fn rasterize_outside_window_zero() {
        let window = GridWindow::new(0.0, 4.0, 0.0, 4.0);
        let p = Polyline::open(vec![(10.0, 10.0), (12.0, 10.0)]).unwrap();
        let mask = rasterize(&p, window, 1.0, 1.0).unwrap();
        assert_eq!(mask.sum(), 0.0);
    }

    #[test]
    fn rasterize_filled_unit_square() {
        let window = GridWindow::new(-1.0, 2.0, -1.0, 2.0);
        let p = Polyline::closed(vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]).unwrap();
        let mask = rasterize(&p, window, 0.5, 1.0).unwrap();
        assert_eq!(mask.sum(), 4.0);
        for (row, col) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
            assert_eq!(mask.get(row, col), 1.0);
        }
    }

    #[test]
    fn clip_open_keeps_inside_piece() {
        let window = GridWindow::new(0.0, 10.0, 0.0, 10.0);
        let pieces = clip_open_to_window(&[(-5.0, 5.0), (15.0, 5.0)], &window);
        assert_eq!(pieces.len(), 1);
        assert_eq!(pieces[0].first().copied(), Some((0.0, 5.0)));
        assert_eq!(pieces[0].last().copied(), Some((10.0, 5.0)));
    }

    #[test]
    fn clip_closed_square_partial() {
        let window = GridWindow::new(0.0, 10.0, 0.0, 10.0);
        let poly = [(-2.0, 2.0), (4.0, 2.0), (4.0, 6.0), (-2.0, 6.0)];
        let clipped = clip_closed_to_window(&poly, &window);
        assert!(clipped.len() >= 4);
        assert!(clipped.iter().all(|p| window.contains(*p)));
    }
}
