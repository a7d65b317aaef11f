//! Planar polygon geometry in double precision.
//!
//! Intersection areas are exact up to rounding: both polygons are split into
//! signed fan triangles, and `area(A ∩ B)` is the signed sum of pairwise
//! triangle intersections, each a convex clip.

pub type Point = [f64; 2];

/// Signed shoelace area; positive for counter-clockwise order in a y-up frame.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

pub fn area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn on_segment(p: Point, q: Point, r: Point) -> bool {
    r[0] >= p[0].min(q[0]) && r[0] <= p[0].max(q[0]) && r[1] >= p[1].min(q[1]) && r[1] <= p[1].max(q[1])
}

/// Whether closed segments `p1p2` and `q1q2` share at least one point.
pub fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// True when no two edges meet except adjacent edges at their shared vertex,
/// and the polygon encloses positive area.
pub fn is_simple(poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 || area(poly) <= 0.0 {
        return false;
    }
    for i in 0..n {
        let (a1, a2) = (poly[i], poly[(i + 1) % n]);
        if a1 == a2 {
            return false;
        }
        for j in i + 1..n {
            let (b1, b2) = (poly[j], poly[(j + 1) % n]);
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // adjacent edges may only share their common vertex: reject
                // a fold-back where one edge runs back along the other
                let shared = if j == i + 1 { a2 } else { a1 };
                let other_a = if j == i + 1 { a1 } else { a2 };
                let other_b = if j == i + 1 { b2 } else { b1 };
                if cross(shared, other_a, other_b) == 0.0 {
                    let da = [other_a[0] - shared[0], other_a[1] - shared[1]];
                    let db = [other_b[0] - shared[0], other_b[1] - shared[1]];
                    if da[0] * db[0] + da[1] * db[1] > 0.0 {
                        return false;
                    }
                }
                continue;
            }
            if segments_intersect(a1, a2, b1, b2) {
                return false;
            }
        }
    }
    true
}

/// Even-odd point containment. Points exactly on the boundary may go either way.
pub fn contains(poly: &[Point], p: Point) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let [xi, yi] = poly[i];
        let [xj, yj] = poly[j];
        if (yi > p[1]) != (yj > p[1]) && p[0] < (xj - xi) * (p[1] - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Axis-aligned bounds `[x_min, y_min, x_max, y_max]`.
pub fn bounds(poly: &[Point]) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for &[x, y] in poly {
        b[0] = b[0].min(x);
        b[1] = b[1].min(y);
        b[2] = b[2].max(x);
        b[3] = b[3].max(y);
    }
    b
}

pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Point> {
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

/// Convex hull by the monotone chain, counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Clips `subject` by the convex counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out = subject.to_vec();
    let m = clip.len();
    for e in 0..m {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[e], clip[(e + 1) % m]);
        let input = std::mem::take(&mut out);
        let k = input.len();
        for i in 0..k {
            let cur = input[i];
            let prev = input[(i + k - 1) % k];
            let dc = cross(a, b, cur);
            let dp = cross(a, b, prev);
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(edge_point(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(edge_point(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn edge_point(p: Point, q: Point, dp: f64, dq: f64) -> Point {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Signed fan triangles from vertex 0, each returned counter-clockwise with
/// the sign of its original orientation.
fn fan(poly: &[Point]) -> Vec<([Point; 3], f64)> {
    (1..poly.len().saturating_sub(1))
        .filter_map(|i| {
            let t = [poly[0], poly[i], poly[i + 1]];
            let s = signed_area(&t);
            if s > 0.0 {
                Some((t, 1.0))
            } else if s < 0.0 {
                Some(([t[0], t[2], t[1]], -1.0))
            } else {
                None
            }
        })
        .collect()
}

/// Area of the intersection of two simple polygons.
pub fn intersection_area(a: &[Point], b: &[Point]) -> f64 {
    let orient = signed_area(a).signum() * signed_area(b).signum();
    if orient == 0.0 {
        return 0.0;
    }
    let (fa, fb) = (fan(a), fan(b));
    let mut acc = 0.0;
    for (ta, sa) in &fa {
        let ba = bounds(ta);
        for (tb, sb) in &fb {
            let bb = bounds(tb);
            if ba[0] >= bb[2] || bb[0] >= ba[2] || ba[1] >= bb[3] || bb[1] >= ba[3] {
                continue;
            }
            acc += sa * sb * area(&clip_convex(ta, tb));
        }
    }
    (acc * orient).max(0.0)
}

/// Intersection over union of two simple polygons, in `[0, 1]`.
/// Degenerate inputs yield 0.
pub fn polygon_iou(a: &[Point], b: &[Point]) -> f64 {
    let (aa, ab) = (area(a), area(b));
    if aa <= 0.0 || ab <= 0.0 {
        log::warn!("polygon_iou: degenerate polygon, returning 0");
        return 0.0;
    }
    let inter = intersection_area(a, b).min(aa).min(ab);
    let union = aa + ab - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Fraction of `a`'s area covered by `b`.
pub fn coverage(a: &[Point], b: &[Point]) -> f64 {
    let aa = area(a);
    if aa <= 0.0 || area(b) <= 0.0 {
        return 0.0;
    }
    (intersection_area(a, b) / aa).clamp(0.0, 1.0)
}

/// Binary `rows x cols` mask of `poly` sampled at the cell centres of the
/// box `[x_min, y_min, x_max, y_max]`, row-major.
pub fn rasterize(poly: &[Point], bbox: [f64; 4], rows: usize, cols: usize) -> Vec<f64> {
    let (bw, bh) = (bbox[2] - bbox[0], bbox[3] - bbox[1]);
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let y = bbox[1] + (i as f64 + 0.5) / rows as f64 * bh;
        for j in 0..cols {
            let x = bbox[0] + (j as f64 + 0.5) / cols as f64 * bw;
            out.push(if contains(poly, [x, y]) { 1.0 } else { 0.0 });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint() {
        let a = rectangle(0.0, 0.0, 2.0, 3.0);
        assert_eq!(polygon_iou(&a, &a), 1.0);
        assert_eq!(polygon_iou(&a, &rectangle(5.0, 5.0, 6.0, 6.0)), 0.0);
    }

    #[test]
    fn offset_rectangles_third() {
        let a = rectangle(0.0, 0.0, 2.0, 1.0);
        let b = rectangle(1.0, 0.0, 3.0, 1.0);
        assert!((polygon_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn orientation_does_not_matter() {
        let a = rectangle(0.0, 0.0, 2.0, 1.0);
        let mut b = rectangle(1.0, 0.0, 3.0, 1.0);
        b.reverse();
        assert!((polygon_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn concave_overlap() {
        // U shape: 3x3 square minus the middle column's top two cells
        let u = vec![[0.0, 0.0], [3.0, 0.0], [3.0, 3.0], [2.0, 3.0], [2.0, 1.0], [1.0, 1.0], [1.0, 3.0], [0.0, 3.0]];
        assert_eq!(area(&u), 7.0);
        let bar = rectangle(0.0, 2.0, 3.0, 3.0);
        assert!((intersection_area(&u, &bar) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bowtie_is_not_simple() {
        let bow = vec![[0.0, 0.0], [2.0, 2.0], [2.0, 0.0], [0.0, 2.0]];
        assert!(!is_simple(&bow));
        assert!(is_simple(&rectangle(0.0, 0.0, 1.0, 1.0)));
    }

    #[test]
    fn hull_of_square_with_interior_points() {
        let pts = [[0.0, 0.0], [1.0, 1.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0], [1.0, 0.0]];
        let h = convex_hull(&pts);
        assert_eq!(h.len(), 4);
        assert_eq!(area(&h), 4.0);
    }

    #[test]
    fn rasterize_half_box() {
        let poly = rectangle(0.0, 0.0, 2.0, 4.0);
        let m = rasterize(&poly, [0.0, 0.0, 4.0, 4.0], 2, 2);
        assert_eq!(m, vec![1.0, 0.0, 1.0, 0.0]);
    }
}
