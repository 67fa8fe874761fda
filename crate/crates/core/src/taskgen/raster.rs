//! Integer-only shape rasterization and motion paths.

/// `(cos, sin) * 64` at multiples of 22.5 degrees.
pub(crate) const UNIT16: [(i64, i64); 16] = [
    (64, 0),
    (59, 24),
    (45, 45),
    (24, 59),
    (0, 64),
    (-24, 59),
    (-45, 45),
    (-59, 24),
    (-64, 0),
    (-59, -24),
    (-45, -45),
    (-24, -59),
    (0, -64),
    (24, -59),
    (45, -45),
    (59, -24),
];

/// Shape relative to its centre.
#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Ellipse { rx: i64, ry: i64 },
    Rect { half_w: i64, half_h: i64 },
    /// Convex polygon, vertices in angular order.
    Polygon(Vec<(i64, i64)>),
}

impl Geometry {
    /// Whether offset `(dx, dy)` from the centre is covered.
    pub fn contains(&self, dx: i64, dy: i64) -> bool {
        match self {
            Geometry::Ellipse { rx, ry } => dx * dx * ry * ry + dy * dy * rx * rx <= rx * rx * ry * ry,
            Geometry::Rect { half_w, half_h } => dx.abs() <= *half_w && dy.abs() <= *half_h,
            Geometry::Polygon(v) => {
                let (mut pos, mut neg) = (false, false);
                for i in 0..v.len() {
                    let (ax, ay) = v[i];
                    let (bx, by) = v[(i + 1) % v.len()];
                    let cross = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
                    pos |= cross > 0;
                    neg |= cross < 0;
                }
                !(pos && neg)
            }
        }
    }

    /// Half extent along x and y.
    pub fn extent(&self) -> (i64, i64) {
        match self {
            Geometry::Ellipse { rx, ry } => (*rx, *ry),
            Geometry::Rect { half_w, half_h } => (*half_w, *half_h),
            Geometry::Polygon(v) => (
                v.iter().map(|p| p.0.abs()).max().unwrap_or(0),
                v.iter().map(|p| p.1.abs()).max().unwrap_or(0),
            ),
        }
    }

    /// Polygon with vertices at the given table directions and radii.
    pub fn polygon(dirs: &[usize], radii: &[i64]) -> Geometry {
        let mut idx: Vec<(usize, i64)> = dirs.iter().copied().zip(radii.iter().copied()).collect();
        idx.sort_unstable();
        Geometry::Polygon(
            idx.into_iter()
                .map(|(d, r)| {
                    let (c, s) = UNIT16[d % 16];
                    (r * c / 64, r * s / 64)
                })
                .collect(),
        )
    }
}

/// Folds `x` into `[lo, hi]` by reflecting at the ends.
pub(crate) fn reflect(x: i64, lo: i64, hi: i64) -> i64 {
    if hi <= lo {
        return lo;
    }
    let span = hi - lo;
    let m = (x - lo).rem_euclid(2 * span);
    lo + if m <= span { m } else { 2 * span - m }
}
