use nalgebra::Vector3;

pub const GRID_BITS: u32 = 10;

fn spread(mut v: u64) -> u64 {
    v &= 0x3ff;
    v = (v | (v << 16)) & 0x0300_00ff;
    v = (v | (v << 8)) & 0x0300_f00f;
    v = (v | (v << 4)) & 0x030c_30c3;
    v = (v | (v << 2)) & 0x0924_9249;
    v
}

/// Interleaves three 10-bit coordinates with `x` in the most significant position.
pub fn morton3(x: u32, y: u32, z: u32) -> u64 {
    (spread(x as u64) << 2) | (spread(y as u64) << 1) | spread(z as u64)
}

/// Quantizes `centers` to a `2^10`-per-axis grid over their bounding box and
/// returns the indices sorted by Morton code, ties by index.
pub fn serialize_order(centers: &[Vector3<f64>]) -> Vec<usize> {
    if centers.is_empty() {
        return Vec::new();
    }
    let mut lo = centers[0];
    let mut hi = centers[0];
    for c in centers {
        lo = lo.inf(c);
        hi = hi.sup(c);
    }
    let cells = (1u32 << GRID_BITS) as f64;
    let q = |v: f64, a: f64, b: f64| -> u32 {
        if b > a {
            (((v - a) / (b - a) * cells).floor() as i64).clamp(0, cells as i64 - 1) as u32
        } else {
            0
        }
    };
    let mut keyed: Vec<(u64, usize)> = centers
        .iter()
        .enumerate()
        .map(|(i, c)| (morton3(q(c.x, lo.x, hi.x), q(c.y, lo.y, hi.y), q(c.z, lo.z, hi.z)), i))
        .collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, i)| i).collect()
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, p) in perm.iter().enumerate() {
        inv[*p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cube_corners_in_octant_order() {
        // corner with bits (x, y, z) listed in a scrambled order
        let bits = [(1, 1, 0), (0, 0, 1), (1, 0, 1), (0, 0, 0), (1, 1, 1), (0, 1, 0), (1, 0, 0), (0, 1, 1)];
        let centers: Vec<_> = bits.iter().map(|(x, y, z)| Vector3::new(*x as f64, *y as f64, *z as f64)).collect();
        let order = serialize_order(&centers);
        let codes: Vec<u32> = order.iter().map(|&i| (bits[i].0 << 2 | bits[i].1 << 1 | bits[i].2) as u32).collect();
        assert_eq!(codes, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn identical_centers_keep_index_order() {
        let c = vec![Vector3::new(0.3, -1.0, 2.0); 7];
        assert_eq!(serialize_order(&c), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn morton_interleaving() {
        assert_eq!(morton3(1, 0, 0), 0b100);
        assert_eq!(morton3(0, 1, 0), 0b010);
        assert_eq!(morton3(3, 0, 1), 0b100_101);
        assert_eq!(morton3(1023, 1023, 1023), (1 << 30) - 1);
    }

    proptest! {
        #[test]
        fn order_is_a_bijection(pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 0..60)) {
            let c: Vec<_> = pts.iter().map(|(x, y, z)| Vector3::new(*x, *y, *z)).collect();
            let p = serialize_order(&c);
            let inv = invert_permutation(&p);
            let mut sorted = p.clone();
            sorted.sort();
            prop_assert_eq!(sorted, (0..c.len()).collect::<Vec<_>>());
            for i in 0..c.len() {
                prop_assert_eq!(inv[p[i]], i);
                prop_assert_eq!(p[inv[i]], i);
            }
        }
    }
}
