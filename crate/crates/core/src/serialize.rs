//! Space-filling-curve ordering of point clouds.
//!
//! Points are quantized into a `2^bits` lattice spanning the cloud's own
//! bounding box, encoded with a Z-order (Morton) or Hilbert curve, and sorted
//! by code. Morton codes interleave bits with `x` in the least-significant
//! slot of every triple.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Point3, PointCloud};

pub const MAX_BIT_DEPTH: u32 = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Curve {
    ZOrder,
    Hilbert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveKind {
    pub variant: Curve,
    pub bit_depth: u32,
}

impl Default for CurveKind {
    fn default() -> Self {
        CurveKind {
            variant: Curve::Hilbert,
            bit_depth: 16,
        }
    }
}

impl CurveKind {
    pub fn new(variant: Curve, bit_depth: u32) -> Result<Self> {
        let k = CurveKind { variant, bit_depth };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        check_depth(self.bit_depth)
    }

    pub fn encode(&self, c: [u32; 3]) -> Result<u64> {
        match self.variant {
            Curve::ZOrder => morton_encode(c[0], c[1], c[2], self.bit_depth),
            Curve::Hilbert => hilbert_encode(c[0], c[1], c[2], self.bit_depth),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SerializationResult {
    /// `permutation[j]` is the original index of the point placed at `j`.
    pub permutation: Vec<usize>,
    /// Curve code of each point, in original order.
    pub codes: Vec<u64>,
}

fn check_depth(bits: u32) -> Result<()> {
    if !(1..=MAX_BIT_DEPTH).contains(&bits) {
        return Err(Error::invalid(format!(
            "bit depth {bits} outside [1, {MAX_BIT_DEPTH}]"
        )));
    }
    Ok(())
}

fn check_coords(c: [u32; 3], bits: u32) -> Result<()> {
    check_depth(bits)?;
    let limit = 1u64 << bits;
    if let Some(v) = c.iter().find(|&&v| v as u64 >= limit) {
        return Err(Error::invalid(format!(
            "grid coordinate {v} does not fit in {bits} bits"
        )));
    }
    Ok(())
}

/// Maps each axis of the cloud's bounding box affinely onto
/// `[0, 2^bits - 1]` using `floor`; zero-extent axes map to 0.
pub fn quantize(cloud: &PointCloud, bits: u32) -> Result<Vec<[u32; 3]>> {
    quantize_points(cloud.coords(), bits)
}

pub fn quantize_points(points: &[Point3], bits: u32) -> Result<Vec<[u32; 3]>> {
    check_depth(bits)?;
    if points.is_empty() {
        return Err(Error::Degenerate("cannot quantize an empty cloud".into()));
    }
    if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("point {i}")));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let top = ((1u64 << bits) - 1) as f64;
    Ok(points
        .iter()
        .map(|p| {
            let mut q = [0u32; 3];
            for k in 0..3 {
                let extent = hi[k] - lo[k];
                if extent > 0.0 {
                    let t = (p[k] - lo[k]) / extent;
                    q[k] = (t * top).floor().clamp(0.0, top) as u32;
                }
            }
            q
        })
        .collect())
}

fn spread_bits(v: u32) -> u64 {
    let mut x = v as u64 & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f00000000ffff;
    x = (x | (x << 16)) & 0x1f0000ff0000ff;
    x = (x | (x << 8)) & 0x100f00f00f00f00f;
    x = (x | (x << 4)) & 0x10c30c30c30c30c3;
    x = (x | (x << 2)) & 0x1249249249249249;
    x
}

fn compact_bits(v: u64) -> u32 {
    let mut x = v & 0x1249249249249249;
    x = (x | (x >> 2)) & 0x10c30c30c30c30c3;
    x = (x | (x >> 4)) & 0x100f00f00f00f00f;
    x = (x | (x >> 8)) & 0x1f0000ff0000ff;
    x = (x | (x >> 16)) & 0x1f00000000ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x as u32
}

pub fn morton_encode(x: u32, y: u32, z: u32, bits: u32) -> Result<u64> {
    check_coords([x, y, z], bits)?;
    Ok(spread_bits(x) | (spread_bits(y) << 1) | (spread_bits(z) << 2))
}

pub fn morton_decode(code: u64, bits: u32) -> Result<[u32; 3]> {
    check_depth(bits)?;
    if bits < 21 && code >> (3 * bits) != 0 {
        return Err(Error::invalid(format!("code {code} exceeds {bits}-bit range")));
    }
    Ok([compact_bits(code), compact_bits(code >> 1), compact_bits(code >> 2)])
}

// Hilbert encoding follows Skilling's transpose formulation: axes are turned
// into a "transposed" index whose bits, read level by level, give the curve
// position.

fn axes_to_transpose(x: &mut [u32; 3], bits: u32) {
    let m = 1u32 << (bits - 1);
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    let mut q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for v in x.iter_mut() {
        *v ^= t;
    }
}

fn transpose_to_axes(x: &mut [u32; 3], bits: u32) {
    let n = 2u32 << (bits - 1);
    let t = x[2] >> 1;
    for i in (1..3).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;
    let mut q = 2u32;
    while q != n {
        let p = q - 1;
        for i in (0..3).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
}

pub fn hilbert_encode(x: u32, y: u32, z: u32, bits: u32) -> Result<u64> {
    check_coords([x, y, z], bits)?;
    let mut t = [x, y, z];
    axes_to_transpose(&mut t, bits);
    let mut code = 0u64;
    for level in (0..bits).rev() {
        for v in &t {
            code = (code << 1) | ((*v >> level) & 1) as u64;
        }
    }
    Ok(code)
}

pub fn hilbert_decode(code: u64, bits: u32) -> Result<[u32; 3]> {
    check_depth(bits)?;
    if bits < 21 && code >> (3 * bits) != 0 {
        return Err(Error::invalid(format!("code {code} exceeds {bits}-bit range")));
    }
    let mut t = [0u32; 3];
    let mut shift = 3 * bits;
    for level in (0..bits).rev() {
        for v in t.iter_mut() {
            shift -= 1;
            *v |= (((code >> shift) & 1) as u32) << level;
        }
    }
    transpose_to_axes(&mut t, bits);
    Ok(t)
}

/// Sorts points by curve code; equal codes keep their input order.
pub fn serialize(cloud: &PointCloud, curve: CurveKind) -> Result<SerializationResult> {
    serialize_points(cloud.coords(), curve)
}

pub fn serialize_points(points: &[Point3], curve: CurveKind) -> Result<SerializationResult> {
    curve.validate()?;
    let grid = quantize_points(points, curve.bit_depth)?;
    let codes = grid
        .iter()
        .map(|c| curve.encode(*c))
        .collect::<Result<Vec<_>>>()?;
    let mut permutation: Vec<usize> = (0..points.len()).collect();
    permutation.sort_by_key(|&i| codes[i]);
    Ok(SerializationResult { permutation, codes })
}

/// Like [`serialize_points`] but breaks code ties by coordinates, so the
/// result does not depend on input order unless points coincide exactly.
pub fn canonical_order(points: &[Point3], curve: CurveKind) -> Result<SerializationResult> {
    let mut s = serialize_points(points, curve)?;
    let codes = &s.codes;
    s.permutation.sort_by(|&a, &b| {
        codes[a]
            .cmp(&codes[b])
            .then_with(|| points[a][0].total_cmp(&points[b][0]))
            .then_with(|| points[a][1].total_cmp(&points[b][1]))
            .then_with(|| points[a][2].total_cmp(&points[b][2]))
            .then_with(|| a.cmp(&b))
    });
    Ok(s)
}

/// `out[j] = items[permutation[j]]`.
pub fn apply_permutation<T: Clone>(items: &[T], permutation: &[usize]) -> Result<Vec<T>> {
    if items.len() != permutation.len() {
        return Err(Error::shape(
            "apply_permutation",
            format!("{} items, {} indices", items.len(), permutation.len()),
        ));
    }
    permutation
        .iter()
        .map(|&i| {
            items
                .get(i)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("permutation index {i} out of range")))
        })
        .collect()
}

pub fn invert_permutation(permutation: &[usize]) -> Result<Vec<usize>> {
    let mut inv = vec![usize::MAX; permutation.len()];
    for (j, &i) in permutation.iter().enumerate() {
        if i >= permutation.len() || inv[i] != usize::MAX {
            return Err(Error::invalid("not a permutation"));
        }
        inv[i] = j;
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Bit-by-bit interleave, x in the lowest slot.
    fn interleave_oracle(c: [u32; 3], bits: u32) -> u64 {
        let mut code = 0u64;
        for b in 0..bits {
            for (axis, v) in c.iter().enumerate() {
                code |= (((v >> b) & 1) as u64) << (3 * b + axis as u32);
            }
        }
        code
    }

    #[test]
    fn quantize_examples() {
        let one = PointCloud::new(vec![[3.0, -1.0, 2.0]]).unwrap();
        assert_eq!(quantize(&one, 16).unwrap(), vec![[0, 0, 0]]);

        let corners = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 4.0, 1.0], [1.0, 2.0, 0.5]]).unwrap();
        let q = quantize(&corners, 4).unwrap();
        assert_eq!(q[0], [0, 0, 0]);
        assert_eq!(q[1], [15, 15, 15]);
        // floor(0.5 * 15) = 7
        assert_eq!(q[2], [7, 7, 7]);
    }

    #[test]
    fn quantize_rejects_bad_depth() {
        let one = PointCloud::new(vec![[0.0; 3]]).unwrap();
        assert!(quantize(&one, 0).is_err());
        assert!(quantize(&one, 22).is_err());
    }

    #[test]
    fn morton_examples() {
        assert_eq!(morton_encode(0, 0, 0, 4).unwrap(), 0);
        assert_eq!(morton_encode(15, 15, 15, 4).unwrap(), (1 << 12) - 1);
        assert_eq!(morton_encode(1, 0, 0, 4).unwrap(), 1);
        assert_eq!(morton_encode(0, 1, 0, 4).unwrap(), 2);
        assert_eq!(morton_encode(0, 0, 1, 4).unwrap(), 4);
        assert!(morton_encode(16, 0, 0, 4).is_err());
        let m = (1u32 << 21) - 1;
        assert_eq!(morton_encode(m, m, m, 21).unwrap(), (1u64 << 63) - 1);
    }

    #[test]
    fn morton_matches_interleave_oracle() {
        for x in 0..8 {
            for y in 0..8 {
                for z in 0..8 {
                    assert_eq!(morton_encode(x, y, z, 3).unwrap(), interleave_oracle([x, y, z], 3));
                }
            }
        }
    }

    #[test]
    fn morton_monotone_per_axis() {
        for axis in 0..3 {
            let mut last = None;
            for v in 0..32u32 {
                let mut c = [0u32; 3];
                c[axis] = v;
                let code = morton_encode(c[0], c[1], c[2], 5).unwrap();
                if let Some(l) = last {
                    assert!(code > l);
                }
                last = Some(code);
            }
        }
    }

    #[test]
    fn hilbert_origin_and_overflow() {
        assert_eq!(hilbert_encode(0, 0, 0, 4).unwrap(), 0);
        assert!(hilbert_encode(0, 0, 16, 4).is_err());
    }

    #[test]
    fn hilbert_roundtrip_depth4() {
        for x in 0..16 {
            for y in 0..16 {
                for z in 0..16 {
                    let c = hilbert_encode(x, y, z, 4).unwrap();
                    assert_eq!(hilbert_decode(c, 4).unwrap(), [x, y, z]);
                }
            }
        }
    }

    #[test]
    fn hilbert_consecutive_cells_are_face_adjacent() {
        for bits in 1..=3 {
            let n = 1u64 << (3 * bits);
            for code in 0..n - 1 {
                let a = hilbert_decode(code, bits).unwrap();
                let b = hilbert_decode(code + 1, bits).unwrap();
                let diff: u32 = (0..3).map(|k| a[k].abs_diff(b[k])).sum();
                assert_eq!(diff, 1, "bits {bits}, code {code}: {a:?} -> {b:?}");
            }
        }
    }

    #[test]
    fn serialize_examples() {
        let sorted = PointCloud::new((0..5).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap();
        let z = CurveKind::new(Curve::ZOrder, 8).unwrap();
        assert_eq!(serialize(&sorted, z).unwrap().permutation, vec![0, 1, 2, 3, 4]);

        let same = PointCloud::new(vec![[1.0, 1.0, 1.0]; 6]).unwrap();
        let s = serialize(&same, CurveKind::default()).unwrap();
        assert_eq!(s.permutation, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn apply_permutation_examples() {
        let items = vec!['a', 'b', 'c'];
        assert_eq!(apply_permutation(&items, &[0, 1, 2]).unwrap(), items);
        assert_eq!(apply_permutation(&items, &[2, 1, 0]).unwrap(), vec!['c', 'b', 'a']);
        let p = vec![1, 2, 0];
        let inv = invert_permutation(&p).unwrap();
        let there = apply_permutation(&items, &p).unwrap();
        assert_eq!(apply_permutation(&there, &inv).unwrap(), items);
        assert!(apply_permutation(&items, &[0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn serialize_sorts_and_is_bijective(
            pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..64),
            hilbert in any::<bool>(),
        ) {
            let cloud = PointCloud::new(pts).unwrap();
            let curve = CurveKind {
                variant: if hilbert { Curve::Hilbert } else { Curve::ZOrder },
                bit_depth: 10,
            };
            let s = serialize(&cloud, curve).unwrap();
            let mut sorted = s.permutation.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..cloud.len()).collect::<Vec<_>>());
            for w in s.permutation.windows(2) {
                let (a, b) = (s.codes[w[0]], s.codes[w[1]]);
                prop_assert!(a <= b);
                if a == b {
                    prop_assert!(w[0] < w[1]);
                }
            }
        }

        #[test]
        fn canonical_order_ignores_input_order(
            pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 2..40),
            rot in 0usize..40,
        ) {
            let n = pts.len();
            let shifted: Vec<Point3> = (0..n).map(|i| pts[(i + rot) % n]).collect();
            let a = canonical_order(&pts, CurveKind::default()).unwrap();
            let b = canonical_order(&shifted, CurveKind::default()).unwrap();
            let pa: Vec<Point3> = a.permutation.iter().map(|&i| pts[i]).collect();
            let pb: Vec<Point3> = b.permutation.iter().map(|&i| shifted[i]).collect();
            prop_assert_eq!(pa, pb);
        }
    }
}
