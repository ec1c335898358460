use crate::geometry::Vec3;

/// Six-face RGB cube texture indexed by world ray direction. Faces follow
/// the usual +X, -X, +Y, -Y, +Z, -Z order with bilinear, clamp-to-edge
/// filtering inside each face.
#[derive(Debug, Clone, PartialEq)]
pub struct SkyCubemap {
    pub resolution: usize,
    /// `[face][row][col][channel]`.
    pub texels: Vec<f64>,
}

pub const DEFAULT_SKY_RESOLUTION: usize = 1024;

/// Four texel indices (into the texel grid, not the channel array) and
/// their bilinear weights.
pub type SkyTaps = [(usize, f64); 4];

impl SkyCubemap {
    pub fn constant(resolution: usize, value: [f64; 3]) -> Self {
        assert!(resolution > 0);
        let n = 6 * resolution * resolution;
        let mut texels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            texels.extend_from_slice(&value);
        }
        Self { resolution, texels }
    }

    pub fn texel_count(&self) -> usize {
        6 * self.resolution * self.resolution
    }

    /// Face index and face coordinates in [0, 1].
    pub fn face_coords(dir: &Vec3) -> (usize, f64, f64) {
        let (x, y, z) = (dir.x, dir.y, dir.z);
        let (ax, ay, az) = (x.abs(), y.abs(), z.abs());
        let (face, ma, sc, tc) = if ax >= ay && ax >= az {
            if x >= 0.0 {
                (0, ax, -z, -y)
            } else {
                (1, ax, z, -y)
            }
        } else if ay >= az {
            if y >= 0.0 {
                (2, ay, x, z)
            } else {
                (3, ay, x, -z)
            }
        } else if z >= 0.0 {
            (4, az, x, -y)
        } else {
            (5, az, -x, -y)
        };
        (face, 0.5 * (sc / ma + 1.0), 0.5 * (tc / ma + 1.0))
    }

    pub fn taps(&self, dir: &Vec3) -> SkyTaps {
        let (face, s, t) = Self::face_coords(dir);
        let r = self.resolution;
        let fx = s * r as f64 - 0.5;
        let fy = t * r as f64 - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let wx = fx - x0;
        let wy = fy - y0;
        let clamp = |v: f64| v.clamp(0.0, (r - 1) as f64) as usize;
        let (xa, xb) = (clamp(x0), clamp(x0 + 1.0));
        let (ya, yb) = (clamp(y0), clamp(y0 + 1.0));
        let base = face * r * r;
        [
            (base + ya * r + xa, (1.0 - wx) * (1.0 - wy)),
            (base + ya * r + xb, wx * (1.0 - wy)),
            (base + yb * r + xa, (1.0 - wx) * wy),
            (base + yb * r + xb, wx * wy),
        ]
    }

    pub fn sample(&self, dir: &Vec3) -> [f64; 3] {
        let mut c = [0.0; 3];
        for (idx, w) in self.taps(dir) {
            for ch in 0..3 {
                c[ch] += w * self.texels[idx * 3 + ch];
            }
        }
        c
    }

    /// World direction through the centre of a texel.
    pub fn texel_direction(&self, face: usize, row: usize, col: usize) -> Vec3 {
        let r = self.resolution as f64;
        let sc = 2.0 * (col as f64 + 0.5) / r - 1.0;
        let tc = 2.0 * (row as f64 + 0.5) / r - 1.0;
        match face {
            0 => Vec3::new(1.0, -tc, -sc),
            1 => Vec3::new(-1.0, -tc, sc),
            2 => Vec3::new(sc, 1.0, tc),
            3 => Vec3::new(sc, -1.0, -tc),
            4 => Vec3::new(sc, -tc, 1.0),
            _ => Vec3::new(-sc, -tc, -1.0),
        }
    }
}
