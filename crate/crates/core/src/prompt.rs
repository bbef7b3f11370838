//! Geometric prompt generation from label volumes.
//!
//! Each foreground class yields one prompt set: the tight bounding box of
//! its voxels plus the voxel deepest inside the class (the argmax of the
//! distance transform over the class mask, which is the point farthest from
//! the class boundary). Classes with no voxels keep their slot in the
//! output with `present = false` and every coordinate zeroed, so consumers
//! can index prompts by class without special cases.
//!
//! Prompts come in two modes. Volume mode emits one 3-D prompt per class;
//! slice mode walks the z axis and emits one 2-D prompt per class per
//! slice, which is the shape segment-anything-style models consume. A
//! slice-mode prompt equals the volume-mode prompt of that slice extracted
//! as an `nz = 1` volume.
//!
//! Ties in the point selection are broken toward the smallest `(z, y, x)`
//! triple so regenerating a file is reproducible byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::edt::{edt_exact, DistanceField};
use crate::error::{Error, Result};
use crate::volume::{BinaryMask, LabelVolume};

/// Identifier string under the `schema` key of every prompt file.
pub const PROMPT_SCHEMA: &str = "selfprompt/1";

/// Whether prompts describe whole volumes or individual z-slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Slice,
    Volume,
}

impl PromptMode {
    fn coord_len(self) -> usize {
        match self {
            PromptMode::Slice => 2,
            PromptMode::Volume => 3,
        }
    }
}

/// Axis-aligned bounding box with inclusive corners, `[x, y]` in slice
/// mode and `[x, y, z]` in volume mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub min: Vec<usize>,
    pub max: Vec<usize>,
}

/// A single voxel plus its squared distance to the class boundary in mm^2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub index: Vec<usize>,
    pub sq_distance_mm2: f64,
}

/// Prompts for one class (and one slice, in slice mode).
///
/// When `present` is false the class has no voxels and box and point are
/// all-zero sentinels.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub class_id: usize,
    pub mode: PromptMode,
    /// `Some` in slice mode, `None` in volume mode.
    pub slice_index: Option<usize>,
    pub present: bool,
    pub box_prompt: BoxPrompt,
    pub point: PointPrompt,
    /// Which one-hot channel this prompt was derived from.
    pub mask_ref: String,
}

fn zeros(len: usize) -> Vec<usize> {
    vec![0; len]
}

fn mask_ref_for(class_id: usize) -> String {
    format!("onehot:{class_id}")
}

/// Tight 3-D bounding box of the true voxels, or `None` for an empty mask.
pub fn extract_box(mask: &BinaryMask) -> Option<BoxPrompt> {
    let dims = mask.dims();
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut seen = false;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if mask.get(x, y, z) {
                    seen = true;
                    let p = [x, y, z];
                    for a in 0..3 {
                        min[a] = min[a].min(p[a]);
                        max[a] = max[a].max(p[a]);
                    }
                }
            }
        }
    }
    seen.then(|| BoxPrompt {
        min: min.to_vec(),
        max: max.to_vec(),
    })
}

/// Voxel of the mask with the largest field value, ties broken toward the
/// smallest `(z, y, x)`. Returns `None` for an empty mask.
pub fn select_point(mask: &BinaryMask, field: &DistanceField) -> Result<Option<PointPrompt>> {
    if mask.dims() != field.dims() {
        return Err(Error::validation(format!(
            "mask dims {:?} do not match field dims {:?}",
            mask.dims(),
            field.dims()
        )));
    }
    let dims = mask.dims();
    let mut best: Option<(f64, usize)> = None;
    // Linear order is ascending (z, y, x), so a strict comparison keeps the
    // first (smallest) index among ties.
    for (i, (&fg, &v)) in mask.bits().iter().zip(field.values()).enumerate() {
        if fg && best.map_or(true, |(b, _)| v > b) {
            best = Some((v, i));
        }
    }
    Ok(best.map(|(v, i)| {
        let x = i % dims[0];
        let y = (i / dims[0]) % dims[1];
        let z = i / (dims[0] * dims[1]);
        PointPrompt {
            index: vec![x, y, z],
            sq_distance_mm2: v,
        }
    }))
}

fn prompt_for_class(labels: &LabelVolume, class_id: usize, mode: PromptMode) -> PromptSet {
    let coord_len = mode.coord_len();
    let mask = labels
        .one_hot(class_id)
        .expect("class id below num_classes");
    let mask_ref = mask_ref_for(class_id);
    if !mask.any() {
        return PromptSet {
            class_id,
            mode,
            slice_index: None,
            present: false,
            box_prompt: BoxPrompt {
                min: zeros(coord_len),
                max: zeros(coord_len),
            },
            point: PointPrompt {
                index: zeros(coord_len),
                sq_distance_mm2: 0.0,
            },
            mask_ref,
        };
    }
    let mut box_prompt = extract_box(&mask).expect("nonempty mask has a box");
    let field = edt_exact(&mask);
    let mut point = select_point(&mask, &field)
        .expect("mask and its own field share dims")
        .expect("nonempty mask has a point");
    box_prompt.min.truncate(coord_len);
    box_prompt.max.truncate(coord_len);
    point.index.truncate(coord_len);
    PromptSet {
        class_id,
        mode,
        slice_index: None,
        present: true,
        box_prompt,
        point,
        mask_ref,
    }
}

/// Generates prompts for every foreground class (ids `1..num_classes`).
///
/// Volume mode returns `num_classes - 1` prompt sets ordered by class.
/// Slice mode returns `nz * (num_classes - 1)` sets ordered by slice, then
/// class, each computed on that slice alone.
pub fn generate_prompts(labels: &LabelVolume, mode: PromptMode) -> Vec<PromptSet> {
    let classes = 1..labels.num_classes();
    match mode {
        PromptMode::Volume => classes
            .map(|c| prompt_for_class(labels, c, mode))
            .collect(),
        PromptMode::Slice => {
            let mut out = Vec::with_capacity(labels.dims()[2] * classes.len());
            for z in 0..labels.dims()[2] {
                let slice = labels.slice_z(z).expect("slice index in range");
                for c in classes.clone() {
                    let mut p = prompt_for_class(&slice, c, mode);
                    p.slice_index = Some(z);
                    out.push(p);
                }
            }
            out
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PromptSetJson {
    class_id: usize,
    slice_index: Option<usize>,
    present: bool,
    #[serde(rename = "box")]
    box_prompt: BoxPrompt,
    point: PointPrompt,
    mask_ref: String,
}

#[derive(Serialize, Deserialize)]
struct PromptFileJson {
    schema: String,
    mode: PromptMode,
    num_classes: usize,
    prompts: Vec<PromptSetJson>,
}

/// Serializes prompts to the `selfprompt/1` JSON document.
///
/// All prompts must share one mode. The file-level class count is derived
/// as `max(class_id) + 1` (1 for an empty list). Integers serialize
/// exactly and reals round-trip bit for bit.
pub fn prompts_to_json(prompts: &[PromptSet]) -> Result<String> {
    let mode = prompts.first().map(|p| p.mode).unwrap_or(PromptMode::Volume);
    let mut num_classes = 1usize;
    for p in prompts {
        if p.mode != mode {
            return Err(Error::validation(
                "prompt list mixes slice and volume modes".to_string(),
            ));
        }
        if (p.slice_index.is_some()) != (mode == PromptMode::Slice) {
            return Err(Error::validation(
                "slice_index must be set exactly in slice mode".to_string(),
            ));
        }
        num_classes = num_classes.max(p.class_id + 1);
    }
    let file = PromptFileJson {
        schema: PROMPT_SCHEMA.to_string(),
        mode,
        num_classes,
        prompts: prompts
            .iter()
            .map(|p| PromptSetJson {
                class_id: p.class_id,
                slice_index: p.slice_index,
                present: p.present,
                box_prompt: p.box_prompt.clone(),
                point: p.point.clone(),
                mask_ref: p.mask_ref.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::format(e.to_string()))
}

/// Parses a `selfprompt/1` JSON document.
pub fn prompts_from_json(text: &str) -> Result<Vec<PromptSet>> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::format(format!("malformed JSON: {e}")))?;
    let Some(schema) = value.get("schema") else {
        return Err(Error::format("missing schema key".to_string()));
    };
    if schema != PROMPT_SCHEMA {
        return Err(Error::format(format!(
            "unknown schema {schema}, expected \"{PROMPT_SCHEMA}\""
        )));
    }
    let file: PromptFileJson =
        serde_json::from_value(value).map_err(|e| Error::format(e.to_string()))?;
    let coord_len = file.mode.coord_len();
    file.prompts
        .into_iter()
        .map(|p| {
            if (p.slice_index.is_some()) != (file.mode == PromptMode::Slice) {
                return Err(Error::format(
                    "slice_index must be present exactly in slice mode".to_string(),
                ));
            }
            for coords in [&p.box_prompt.min, &p.box_prompt.max, &p.point.index] {
                if coords.len() != coord_len {
                    return Err(Error::format(format!(
                        "coordinate arrays must have {coord_len} entries in this mode, got {}",
                        coords.len()
                    )));
                }
            }
            if !p.point.sq_distance_mm2.is_finite() || p.point.sq_distance_mm2 < 0.0 {
                return Err(Error::format(
                    "sq_distance_mm2 must be finite and non-negative".to_string(),
                ));
            }
            Ok(PromptSet {
                class_id: p.class_id,
                mode: file.mode,
                slice_index: p.slice_index,
                present: p.present,
                box_prompt: p.box_prompt,
                point: p.point,
                mask_ref: p.mask_ref,
            })
        })
        .collect()
}

/// Writes prompts as JSON to `path`.
pub fn write_prompts(prompts: &[PromptSet], path: impl AsRef<Path>) -> Result<()> {
    let text = prompts_to_json(prompts)?;
    fs::write(path, text)?;
    Ok(())
}

/// Reads prompts from a JSON file at `path`.
pub fn read_prompts(path: impl AsRef<Path>) -> Result<Vec<PromptSet>> {
    let text = fs::read_to_string(path)?;
    prompts_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edt::edt_bruteforce;
    use crate::volume::Spacing;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const UNIT: Spacing = [1.0, 1.0, 1.0];

    fn random_labels(dims: [usize; 3], num_classes: usize, seed: u64) -> LabelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims[0] * dims[1] * dims[2];
        let labels = (0..n)
            .map(|_| rng.random_range(0..num_classes) as u8)
            .collect();
        LabelVolume::new(dims, UNIT, num_classes, labels).unwrap()
    }

    #[test]
    fn single_voxel_class_boxes_and_points_itself() {
        let mut labels = vec![0u8; 4 * 3 * 2];
        labels[(1 * 3 + 2) * 4 + 3] = 1; // (x, y, z) = (3, 2, 1)
        let v = LabelVolume::new([4, 3, 2], UNIT, 2, labels).unwrap();
        let prompts = generate_prompts(&v, PromptMode::Volume);
        assert_eq!(prompts.len(), 1);
        let p = &prompts[0];
        assert!(p.present);
        assert_eq!(p.box_prompt.min, vec![3, 2, 1]);
        assert_eq!(p.box_prompt.max, vec![3, 2, 1]);
        assert_eq!(p.point.index, vec![3, 2, 1]);
        assert_eq!(p.mask_ref, "onehot:1");
        assert_eq!(p.slice_index, None);
    }

    #[test]
    fn full_slice_points_at_the_center() {
        let v = LabelVolume::new([5, 5, 1], UNIT, 2, vec![1; 25]).unwrap();
        let prompts = generate_prompts(&v, PromptMode::Slice);
        assert_eq!(prompts.len(), 1);
        let p = &prompts[0];
        assert_eq!(p.point.index, vec![2, 2]);
        assert_eq!(p.point.sq_distance_mm2, 9.0);
        assert_eq!(p.box_prompt.min, vec![0, 0]);
        assert_eq!(p.box_prompt.max, vec![4, 4]);
        assert_eq!(p.slice_index, Some(0));
    }

    #[test]
    fn absent_classes_emit_zero_sentinels() {
        let v = LabelVolume::new([3, 3, 3], UNIT, 4, vec![0; 27]).unwrap();
        let prompts = generate_prompts(&v, PromptMode::Volume);
        assert_eq!(prompts.len(), 3);
        for (i, p) in prompts.iter().enumerate() {
            assert_eq!(p.class_id, i + 1);
            assert!(!p.present);
            assert_eq!(p.box_prompt.min, vec![0, 0, 0]);
            assert_eq!(p.box_prompt.max, vec![0, 0, 0]);
            assert_eq!(p.point.index, vec![0, 0, 0]);
            assert_eq!(p.point.sq_distance_mm2, 0.0);
        }
    }

    #[test]
    fn slice_mode_emits_per_slice_and_class() {
        let v = random_labels([4, 4, 3], 4, 11);
        let prompts = generate_prompts(&v, PromptMode::Slice);
        assert_eq!(prompts.len(), 3 * 3);
        for (i, p) in prompts.iter().enumerate() {
            assert_eq!(p.slice_index, Some(i / 3));
            assert_eq!(p.class_id, i % 3 + 1);
        }
    }

    #[test]
    fn slice_mode_matches_volume_mode_on_extracted_slices() {
        for seed in 0..8 {
            let v = random_labels([6, 5, 4], 4, seed);
            let sliced = generate_prompts(&v, PromptMode::Slice);
            for z in 0..4 {
                let single = v.slice_z(z).unwrap();
                let volume = generate_prompts(&single, PromptMode::Volume);
                for (c, vp) in volume.iter().enumerate() {
                    let sp = &sliced[z * 3 + c];
                    assert_eq!(sp.present, vp.present);
                    assert_eq!(sp.box_prompt.min[..], vp.box_prompt.min[..2]);
                    assert_eq!(sp.box_prompt.max[..], vp.box_prompt.max[..2]);
                    assert_eq!(sp.point.index[..], vp.point.index[..2]);
                    assert_eq!(sp.point.sq_distance_mm2, vp.point.sq_distance_mm2);
                    if vp.present {
                        assert_eq!(vp.point.index[2], 0);
                        assert_eq!(vp.box_prompt.min[2], 0);
                    }
                }
            }
        }
    }

    #[test]
    fn point_lies_in_mask_at_the_oracle_argmax_value() {
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
            let dims = [
                rng.random_range(1..=10),
                rng.random_range(1..=10),
                rng.random_range(1..=10),
            ];
            let n = dims[0] * dims[1] * dims[2];
            let mut bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            bits[rng.random_range(0..n)] = true;
            let mask = BinaryMask::new(dims, UNIT, bits).unwrap();
            let field = edt_exact(&mask);
            let p = select_point(&mask, &field).unwrap().unwrap();
            let [x, y, z] = [p.index[0], p.index[1], p.index[2]];
            assert!(mask.get(x, y, z));
            let oracle = edt_bruteforce(&mask).unwrap();
            let oracle_max = oracle
                .values()
                .iter()
                .zip(mask.bits())
                .filter(|(_, &fg)| fg)
                .map(|(&v, _)| v)
                .fold(f64::MIN, f64::max);
            assert_eq!(p.sq_distance_mm2, oracle_max);
        }
    }

    #[test]
    fn point_ties_break_toward_smallest_zyx() {
        // Two disconnected foreground voxels have the same distance; the
        // smaller (z, y, x) wins.
        let mut bits = vec![false; 27];
        let mask_index = |x: usize, y: usize, z: usize| (z * 3 + y) * 3 + x;
        bits[mask_index(1, 1, 2)] = true;
        bits[mask_index(1, 1, 0)] = true;
        let mask = BinaryMask::new([3, 3, 3], UNIT, bits).unwrap();
        let field = edt_exact(&mask);
        let p = select_point(&mask, &field).unwrap().unwrap();
        assert_eq!(p.index, vec![1, 1, 0]);
    }

    #[test]
    fn select_point_rejects_mismatched_dims() {
        let mask = BinaryMask::filled([2, 2, 2], UNIT, true).unwrap();
        let other = BinaryMask::filled([3, 2, 2], UNIT, true).unwrap();
        let field = edt_exact(&other);
        assert!(matches!(
            select_point(&mask, &field),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn json_round_trip_preserves_structure() {
        for seed in 0..6 {
            let v = random_labels([5, 4, 3], 5, seed + 40);
            for mode in [PromptMode::Volume, PromptMode::Slice] {
                let prompts = generate_prompts(&v, mode);
                let text = prompts_to_json(&prompts).unwrap();
                let back = prompts_from_json(&text).unwrap();
                assert_eq!(back, prompts);
            }
        }
    }

    #[test]
    fn json_files_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.json");
        let v = random_labels([4, 4, 2], 3, 9);
        let prompts = generate_prompts(&v, PromptMode::Slice);
        write_prompts(&prompts, &path).unwrap();
        assert_eq!(read_prompts(&path).unwrap(), prompts);
    }

    #[test]
    fn rejects_malformed_and_unversioned_json() {
        assert!(matches!(
            prompts_from_json("{not json"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            prompts_from_json("{\"mode\":\"volume\",\"num_classes\":1,\"prompts\":[]}"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            prompts_from_json(
                "{\"schema\":\"selfprompt/2\",\"mode\":\"volume\",\"num_classes\":1,\"prompts\":[]}"
            ),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn json_exposes_schema_mode_and_class_count() {
        let v = random_labels([3, 3, 2], 4, 2);
        let text = prompts_to_json(&generate_prompts(&v, PromptMode::Volume)).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["schema"], "selfprompt/1");
        assert_eq!(value["mode"], "volume");
        assert_eq!(value["num_classes"], 4);
        assert_eq!(value["prompts"].as_array().unwrap().len(), 3);
        assert!(value["prompts"][0]["slice_index"].is_null());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn boxes_are_tight_on_every_face(
            nx in 1usize..8,
            ny in 1usize..8,
            nz in 1usize..8,
            seed in proptest::num::u64::ANY,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = nx * ny * nz;
            let mut bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            bits[rng.random_range(0..n)] = true;
            let mask = BinaryMask::new([nx, ny, nz], UNIT, bits).unwrap();
            let b = extract_box(&mask).unwrap();
            // Every true voxel is inside the box.
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        if mask.get(x, y, z) {
                            let p = [x, y, z];
                            for a in 0..3 {
                                prop_assert!(b.min[a] <= p[a] && p[a] <= b.max[a]);
                            }
                        }
                    }
                }
            }
            // Each of the six face planes holds at least one true voxel, so
            // shrinking any face would drop one.
            for a in 0..3 {
                for &plane in &[b.min[a], b.max[a]] {
                    let mut hit = false;
                    for z in 0..nz {
                        for y in 0..ny {
                            for x in 0..nx {
                                let p = [x, y, z];
                                if p[a] == plane && mask.get(x, y, z) {
                                    hit = true;
                                }
                            }
                        }
                    }
                    prop_assert!(hit);
                }
            }
        }
    }
}
