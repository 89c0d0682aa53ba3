//! Planar polygon helpers shared by image masking and voxel rasterization.

/// Even-odd (crossing number) test of `(x, y)` against a ring of vertices.
/// The ring may or may not repeat its first vertex at the end.
pub fn point_in_ring(x: f64, y: f64, ring: &[(f64, f64)]) -> bool {
    let n = ring.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = ring[i];
        let (xj, yj) = ring[j];
        if (yi > y) != (yj > y) {
            let x_cross = xi + (y - yi) / (yj - yi) * (xj - xi);
            if x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Even-odd over the outer ring and every hole: a point inside a hole is
/// outside the polygon.
pub fn point_in_polygon(x: f64, y: f64, outer: &[(f64, f64)], holes: &[Vec<(f64, f64)>]) -> bool {
    let mut inside = point_in_ring(x, y, outer);
    for hole in holes {
        if point_in_ring(x, y, hole) {
            inside = !inside;
        }
    }
    inside
}

/// Shoelace signed area; positive for counter-clockwise rings.
pub fn signed_area(ring: &[(f64, f64)]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = ring[i];
        let (x1, y1) = ring[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

/// Axis-aligned bounds `(min_x, min_y, max_x, max_y)`.
pub fn ring_bounds(ring: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    ring.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(lo: f64, hi: f64) -> Vec<(f64, f64)> {
        vec![(lo, lo), (hi, lo), (hi, hi), (lo, hi), (lo, lo)]
    }

    #[test]
    fn square_with_hole() {
        let outer = square(0.0, 10.0);
        let holes = vec![square(4.0, 6.0)];
        assert!(point_in_polygon(1.0, 1.0, &outer, &holes));
        assert!(!point_in_polygon(5.0, 5.0, &outer, &holes));
        assert!(!point_in_polygon(11.0, 5.0, &outer, &holes));
    }

    #[test]
    fn area_of_unit_square() {
        assert_eq!(signed_area(&square(0.0, 1.0)), 1.0);
        let mut cw = square(0.0, 1.0);
        cw.reverse();
        assert_eq!(signed_area(&cw), -1.0);
    }
}
