//! Shared fixtures for the benchmark targets.

use selfprompt_core::{synth_spheres, BinaryMask, Sphere};

/// Binary mask of one centered sphere filling about half of each axis.
pub fn sphere_mask(dims: [usize; 3]) -> BinaryMask {
    let center = dims.map(|d| d as f64 / 2.0);
    let radius_mm = dims.iter().copied().min().unwrap() as f64 / 4.0;
    let sphere = Sphere {
        center,
        radius_mm,
        class_id: 1,
    };
    let labels = synth_spheres(dims, [1.0; 3], &[sphere], 0).expect("valid fixture");
    labels.one_hot(1).expect("class 1 exists")
}
