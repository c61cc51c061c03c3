//! Marching squares on a rectilinear grid.

/// Line segment in data coordinates.
pub type Segment = ((f64, f64), (f64, f64));

/// Segments of the level set `{z = level}` of `z[i][j]` sampled at
/// `(xs[i], ys[j])`. Cells touching a non-finite value are skipped.
pub fn marching_squares(xs: &[f64], ys: &[f64], z: &[Vec<f64>], level: f64) -> Vec<Segment> {
    let mut out = Vec::new();
    if xs.len() < 2 || ys.len() < 2 {
        return out;
    }
    for i in 0..xs.len() - 1 {
        for j in 0..ys.len() - 1 {
            // Corners counter-clockwise from (i, j).
            let c = [
                (xs[i], ys[j], z[i][j]),
                (xs[i + 1], ys[j], z[i + 1][j]),
                (xs[i + 1], ys[j + 1], z[i + 1][j + 1]),
                (xs[i], ys[j + 1], z[i][j + 1]),
            ];
            if c.iter().any(|p| !p.2.is_finite()) {
                continue;
            }
            let mut case = 0;
            for (k, p) in c.iter().enumerate() {
                if p.2 > level {
                    case |= 1 << k;
                }
            }
            if case == 0 || case == 15 {
                continue;
            }
            let edge = |a: usize, b: usize| {
                let (pa, pb) = (c[a], c[b]);
                let t = (level - pa.2) / (pb.2 - pa.2);
                (pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1))
            };
            // Edges: 0 = (0,1), 1 = (1,2), 2 = (2,3), 3 = (3,0).
            let e = |k: usize| match k {
                0 => edge(0, 1),
                1 => edge(1, 2),
                2 => edge(2, 3),
                _ => edge(3, 0),
            };
            let center = c.iter().map(|p| p.2).sum::<f64>() / 4.0;
            let pairs: &[(usize, usize)] = match case {
                1 | 14 => &[(3, 0)],
                2 | 13 => &[(0, 1)],
                3 | 12 => &[(3, 1)],
                4 | 11 => &[(1, 2)],
                6 | 9 => &[(0, 2)],
                7 | 8 => &[(3, 2)],
                5 => {
                    if center > level {
                        &[(3, 2), (0, 1)]
                    } else {
                        &[(3, 0), (1, 2)]
                    }
                }
                10 => {
                    if center > level {
                        &[(3, 0), (1, 2)]
                    } else {
                        &[(0, 1), (3, 2)]
                    }
                }
                _ => &[],
            };
            for (a, b) in pairs {
                out.push((e(*a), e(*b)));
            }
        }
    }
    out
}
