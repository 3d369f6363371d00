//! Zero-level contour extraction by marching squares, used to outline the
//! observation region where the branch-difference field changes sign.

/// Line segments of the zero level set of `field` (row-major, `n` per side)
/// on the unit square. Cells touching values at or above `ignore_above` are
/// skipped.
pub fn zero_contour_segments(
    field: &[f64],
    n: usize,
    ignore_above: f64,
) -> Vec<((f64, f64), (f64, f64))> {
    let h = 1.0 / (n - 1) as f64;
    let mut segments = Vec::new();
    let at = |ix: usize, jy: usize| field[jy * n + ix];
    for jy in 0..n - 1 {
        for ix in 0..n - 1 {
            let v = [
                at(ix, jy),
                at(ix + 1, jy),
                at(ix + 1, jy + 1),
                at(ix, jy + 1),
            ];
            if v.iter().any(|x| x.abs() >= ignore_above) {
                continue;
            }
            let mut case = 0usize;
            for (bit, val) in v.iter().enumerate() {
                if *val > 0.0 {
                    case |= 1 << bit;
                }
            }
            if case == 0 || case == 15 {
                continue;
            }
            let (x0, y0) = (ix as f64 * h, jy as f64 * h);
            // Interpolated crossing on each cell edge: 0 bottom, 1 right,
            // 2 top, 3 left.
            let cross = |a: f64, b: f64| a / (a - b);
            let edge_point = |e: usize| -> (f64, f64) {
                match e {
                    0 => (x0 + h * cross(v[0], v[1]), y0),
                    1 => (x0 + h, y0 + h * cross(v[1], v[2])),
                    2 => (x0 + h * cross(v[3], v[2]), y0 + h),
                    _ => (x0, y0 + h * cross(v[0], v[3])),
                }
            };
            let edges: &[usize] = match case {
                1 | 14 => &[3, 0],
                2 | 13 => &[0, 1],
                3 | 12 => &[3, 1],
                4 | 11 => &[1, 2],
                6 | 9 => &[0, 2],
                7 | 8 => &[3, 2],
                5 => &[3, 0, 1, 2],
                10 => &[0, 1, 3, 2],
                _ => &[],
            };
            let mut i = 0;
            while i + 1 < edges.len() {
                segments.push((edge_point(edges[i]), edge_point(edges[i + 1])));
                i += 2;
            }
        }
    }
    segments
}
