//! Synthetic label volumes built from spheres.
//!
//! Spheres are the test pattern for the whole toolkit: their bounding boxes
//! and centers are known in closed form, so prompts derived from the
//! rasterized volume can be checked against ground truth.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelVolume, Spacing};

/// A sphere to rasterize. Centers are in voxel coordinates (fractional
/// values are allowed), the radius is in millimetres, and distances are
/// measured anisotropically through the voxel spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius_mm: f64,
    pub class_id: u8,
}

/// Rasterizes `spheres` into a label volume. A voxel takes the class of the
/// last sphere in the list that covers it; voxels covered by no sphere stay
/// background. The class count of the result is `max(class_id) + 1`, or 1
/// for an empty list.
///
/// Output depends only on the arguments. The seed is accepted for interface
/// stability with callers that also drive randomized placement and does not
/// influence rasterization.
pub fn synth_spheres(
    dims: Dims,
    spacing: Spacing,
    spheres: &[Sphere],
    _seed: u64,
) -> Result<LabelVolume> {
    let mut volume = LabelVolume::background(dims, spacing)?;
    let mut num_classes = 1usize;
    for s in spheres {
        if !s.radius_mm.is_finite() || s.radius_mm <= 0.0 {
            return Err(Error::validation(format!(
                "sphere radius must be finite and positive, got {}",
                s.radius_mm
            )));
        }
        if s.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::validation(format!(
                "sphere center must be finite, got {:?}",
                s.center
            )));
        }
        if s.class_id == 0 {
            return Err(Error::validation(
                "class id 0 is background and cannot label a sphere".to_string(),
            ));
        }
        num_classes = num_classes.max(s.class_id as usize + 1);
    }

    let mut labels = volume.labels().to_vec();
    let r2_of = |s: &Sphere| s.radius_mm * s.radius_mm;
    for s in spheres {
        // Only the sphere's clamped bounding box can be covered.
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut empty = false;
        for a in 0..3 {
            let reach = s.radius_mm / spacing[a];
            let min = (s.center[a] - reach).ceil().max(0.0);
            let max = (s.center[a] + reach).floor().min(dims[a] as f64 - 1.0);
            if min > max {
                empty = true;
                break;
            }
            lo[a] = min as usize;
            hi[a] = max as usize;
        }
        if empty {
            continue;
        }
        let r2 = r2_of(s);
        for z in lo[2]..=hi[2] {
            let dz = spacing[2] * (z as f64 - s.center[2]);
            for y in lo[1]..=hi[1] {
                let dy = spacing[1] * (y as f64 - s.center[1]);
                for x in lo[0]..=hi[0] {
                    let dx = spacing[0] * (x as f64 - s.center[0]);
                    if dx * dx + dy * dy + dz * dz <= r2 {
                        labels[(z * dims[1] + y) * dims[0] + x] = s.class_id;
                    }
                }
            }
        }
    }
    volume = LabelVolume::new(dims, spacing, num_classes, labels)?;
    Ok(volume)
}

/// Places one sphere per entry of `class_ids` at seeded random positions.
///
/// Centers land on integer voxel coordinates, every sphere lies fully
/// inside the volume with at least one voxel of margin, and spheres keep
/// enough pairwise clearance that each class rasterizes to a single intact
/// ball. Placement is deterministic for a given seed.
pub fn random_spheres(
    dims: Dims,
    spacing: Spacing,
    class_ids: &[u8],
    radius_range_mm: (f64, f64),
    seed: u64,
) -> Result<Vec<Sphere>> {
    let (r_lo, r_hi) = radius_range_mm;
    if !(r_lo.is_finite() && r_hi.is_finite()) || r_lo <= 0.0 || r_hi < r_lo {
        return Err(Error::validation(format!(
            "radius range must satisfy 0 < lo <= hi, got ({r_lo}, {r_hi})"
        )));
    }
    if class_ids.iter().any(|&c| c == 0) {
        return Err(Error::validation(
            "class id 0 is background and cannot label a sphere".to_string(),
        ));
    }
    let max_spacing = spacing.iter().cloned().fold(f64::MIN, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placed: Vec<Sphere> = Vec::with_capacity(class_ids.len());
    for &class_id in class_ids {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::validation(format!(
                    "could not place {} spheres of radius {r_lo}..{r_hi} mm inside dims {dims:?}",
                    class_ids.len()
                )));
            }
            let radius_mm = if r_hi > r_lo {
                rng.random_range(r_lo..=r_hi)
            } else {
                r_lo
            };
            let mut center = [0.0f64; 3];
            let mut fits = true;
            for a in 0..3 {
                // One full voxel of margin past the rasterized extent.
                let reach = (radius_mm / spacing[a]).ceil() as usize + 1;
                if 2 * reach >= dims[a] {
                    fits = false;
                    break;
                }
                center[a] = rng.random_range(reach..dims[a] - reach) as f64;
            }
            if !fits {
                return Err(Error::validation(format!(
                    "radius {radius_mm} mm cannot fit inside dims {dims:?} at spacing {spacing:?}"
                )));
            }
            let clear = placed.iter().all(|other| {
                let mut d2 = 0.0;
                for a in 0..3 {
                    let d = spacing[a] * (center[a] - other.center[a]);
                    d2 += d * d;
                }
                let need = radius_mm + other.radius_mm + 2.0 * max_spacing;
                d2 > need * need
            });
            if clear {
                placed.push(Sphere {
                    center,
                    radius_mm,
                    class_id,
                });
                break;
            }
        }
    }
    Ok(placed)
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIT: Spacing = [1.0, 1.0, 1.0];

    #[test]
    fn empty_sphere_list_gives_all_background() {
        let v = synth_spheres([4, 4, 4], UNIT, &[], 0).unwrap();
        assert_eq!(v.num_classes(), 1);
        assert!(v.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn rejects_nonpositive_radius() {
        let s = Sphere {
            center: [2.0, 2.0, 2.0],
            radius_mm: -1.0,
            class_id: 1,
        };
        assert!(matches!(
            synth_spheres([4, 4, 4], UNIT, &[s], 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn rejects_background_class_id() {
        let s = Sphere {
            center: [2.0, 2.0, 2.0],
            radius_mm: 1.0,
            class_id: 0,
        };
        assert!(matches!(
            synth_spheres([4, 4, 4], UNIT, &[s], 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn covered_voxels_take_the_last_sphere() {
        let first = Sphere {
            center: [3.0, 3.0, 3.0],
            radius_mm: 2.5,
            class_id: 1,
        };
        let second = Sphere {
            center: [4.0, 3.0, 3.0],
            radius_mm: 2.5,
            class_id: 2,
        };
        let v = synth_spheres([8, 8, 8], UNIT, &[first, second], 0).unwrap();
        // (4,3,3) is covered by both spheres; the later one wins.
        assert_eq!(v.label_at(4, 3, 3), 2);
        // (1,3,3) is only within the first sphere.
        assert_eq!(v.label_at(1, 3, 3), 1);
        assert_eq!(v.num_classes(), 3);
    }

    #[test]
    fn coverage_uses_anisotropic_distance() {
        let s = Sphere {
            center: [4.0, 4.0, 4.0],
            radius_mm: 2.0,
            class_id: 1,
        };
        let v = synth_spheres([9, 9, 9], [1.0, 1.0, 2.0], &[s], 0).unwrap();
        // 2 mm reaches two voxels along x (1 mm each) but only one along z.
        assert_eq!(v.label_at(6, 4, 4), 1);
        assert_eq!(v.label_at(4, 4, 5), 1);
        assert_eq!(v.label_at(4, 4, 6), 0);
    }

    #[test]
    fn rasterization_is_deterministic() {
        let s = Sphere {
            center: [5.0, 5.0, 5.0],
            radius_mm: 3.0,
            class_id: 2,
        };
        let a = synth_spheres([12, 12, 12], [0.5, 1.0, 1.5], &[s], 7).unwrap();
        let b = synth_spheres([12, 12, 12], [0.5, 1.0, 1.5], &[s], 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_spheres_are_separated_and_interior() {
        for seed in 0..5 {
            let spheres = random_spheres([48, 48, 48], UNIT, &[1, 2, 3], (4.0, 7.0), seed).unwrap();
            assert_eq!(spheres.len(), 3);
            let v = synth_spheres([48, 48, 48], UNIT, &spheres, seed).unwrap();
            // Per-class voxel count matches a solo rasterization of that
            // sphere, so no sphere clipped or overwrote another.
            for s in &spheres {
                let solo = synth_spheres([48, 48, 48], UNIT, &[*s], seed).unwrap();
                let solo_count = solo.labels().iter().filter(|&&l| l != 0).count();
                let count = v
                    .labels()
                    .iter()
                    .filter(|&&l| l == s.class_id)
                    .count();
                assert_eq!(count, solo_count);
                assert!(count > 0);
            }
        }
    }

    #[test]
    fn random_spheres_error_when_radius_cannot_fit() {
        let err = random_spheres([8, 8, 8], UNIT, &[1], (6.0, 6.0), 0);
        assert!(matches!(err, Err(Error::Validation(_))));
    }
}
