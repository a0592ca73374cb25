//! Geometric split of the gland into six biopsy regions.

use thiserror::Error;

pub const SEXTANTS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SextantError {
    #[error("gland mask is empty")]
    EmptyGland,
    #[error("gland spans {0} slices in z, at least 3 are needed")]
    TooThin(usize),
}

/// Six `X×Y×Z` masks ordered left base, left mid, left apex, right base,
/// right mid, right apex.
///
/// Left/right is split at the gland's centroid x-plane (voxels on the plane
/// go left); base/mid/apex are thirds of the gland's z-extent.
pub fn sextant_masks(gland: &[u8], extent: [usize; 3]) -> Result<[Vec<u8>; SEXTANTS], SextantError> {
    let [nx, ny, nz] = extent;
    let mut count = 0usize;
    let mut sum_x = 0usize;
    let (mut zmin, mut zmax) = (usize::MAX, 0);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if gland[(x * ny + y) * nz + z] != 0 {
                    count += 1;
                    sum_x += x;
                    zmin = zmin.min(z);
                    zmax = zmax.max(z);
                }
            }
        }
    }
    if count == 0 {
        return Err(SextantError::EmptyGland);
    }
    let span = zmax - zmin + 1;
    if span < 3 {
        return Err(SextantError::TooThin(span));
    }
    let mut out: [Vec<u8>; SEXTANTS] = std::array::from_fn(|_| vec![0u8; gland.len()]);
    for x in 0..nx {
        // x ≤ centroid ⇔ x·count ≤ Σx, exact in integers
        let side = usize::from(x * count > sum_x);
        for y in 0..ny {
            for z in 0..nz {
                let i = (x * ny + y) * nz + z;
                if gland[i] != 0 {
                    let third = (z - zmin) * 3 / span;
                    out[side * 3 + third][i] = 1;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_splits_into_blocks() {
        let extent = [8, 8, 8];
        let mut gland = vec![0u8; 512];
        for x in 1..7 {
            for y in 1..7 {
                for z in 1..7 {
                    gland[(x * 8 + y) * 8 + z] = 1;
                }
            }
        }
        let s = sextant_masks(&gland, extent).unwrap();
        for (k, m) in s.iter().enumerate() {
            assert_eq!(m.iter().filter(|&&v| v != 0).count(), 3 * 6 * 2, "sextant {k}");
        }
        let xs = |m: &Vec<u8>| -> Vec<usize> {
            (0..512).filter(|&i| m[i] != 0).map(|i| i / 64).collect()
        };
        assert!(xs(&s[0]).iter().all(|&x| (1..=3).contains(&x)));
        assert!(xs(&s[3]).iter().all(|&x| (4..=6).contains(&x)));
        assert!((0..512).filter(|&i| s[1][i] != 0).all(|i| (3..=4).contains(&(i % 8))));
    }

    #[test]
    fn thin_gland_rejected() {
        let mut gland = vec![0u8; 27];
        gland[13] = 1;
        gland[14] = 1;
        assert_eq!(sextant_masks(&gland, [3, 3, 3]), Err(SextantError::TooThin(2)));
        assert_eq!(sextant_masks(&[0; 27], [3, 3, 3]), Err(SextantError::EmptyGland));
    }
}
