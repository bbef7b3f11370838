//! Implementations of the subcommands.
//!
//! Each command returns `Ok(true)` when it succeeded and every
//! verification it ran passed, `Ok(false)` when a verification failed
//! (exit code 1), and `Err` for usage or input problems (exit code 2).

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use selfprompt_core::nn::{dfused_gradient_check, mcadapter_fuse, ConvStack};
use selfprompt_core::{
    dice_score, ds_weights, edt_bruteforce, edt_exact, generate_prompts, poly_lr, random_spheres,
    read_spv, synth_spheres, write_prompts, write_spv, LabelVolume, LrSchedule, PromptMode,
    PromptSet, ScalarVolume, Sphere, Volume,
};

/// Largest relative error the gradient check may report and still pass.
const GRADCHECK_THRESHOLD: f64 = 1e-6;

/// Error injected into the analytic gradients by `--perturb`.
const GRADCHECK_PERTURBATION: f64 = 1e-3;

/// Relative tolerance when comparing exact and brute-force distance
/// fields under anisotropic spacing (unit spacing must match bit for
/// bit).
const EDT_ORACLE_REL_TOL: f64 = 1e-12;

fn emit<T: Serialize>(json: bool, report: &T, human: impl FnOnce()) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(report)?);
    } else {
        human();
    }
    Ok(())
}

fn triple<T: Copy>(values: &[T], flag: &str) -> Result<[T; 3]> {
    match values {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => bail!("{flag} needs exactly three comma-separated values"),
    }
}

fn read_labels(path: &Path) -> Result<LabelVolume> {
    read_spv(path)
        .and_then(Volume::into_labels)
        .with_context(|| format!("reading label volume {}", path.display()))
}

#[derive(Serialize)]
struct ClassCount {
    class_id: usize,
    voxels: usize,
    fraction: f64,
}

#[derive(Serialize)]
struct SynthReport {
    path: String,
    dims: [usize; 3],
    spacing: [f64; 3],
    num_classes: usize,
    histogram: Vec<ClassCount>,
}

pub fn synth(
    dims: &[usize],
    spacing: &[f64],
    spheres_path: &Path,
    out: &Path,
    seed: u64,
    json: bool,
) -> Result<bool> {
    let dims = triple(dims, "--dims")?;
    let spacing = triple(spacing, "--spacing")?;
    let text = fs::read_to_string(spheres_path)
        .with_context(|| format!("reading sphere spec {}", spheres_path.display()))?;
    let spheres: Vec<Sphere> = serde_json::from_str(&text)
        .with_context(|| format!("parsing sphere spec {}", spheres_path.display()))?;

    let labels = synth_spheres(dims, spacing, &spheres, seed)?;
    let total = labels.labels().len();
    let mut counts = vec![0usize; labels.num_classes()];
    for &l in labels.labels() {
        counts[l as usize] += 1;
    }
    let histogram: Vec<ClassCount> = counts
        .iter()
        .enumerate()
        .map(|(class_id, &voxels)| ClassCount {
            class_id,
            voxels,
            fraction: voxels as f64 / total as f64,
        })
        .collect();
    let report = SynthReport {
        path: out.display().to_string(),
        dims,
        spacing,
        num_classes: labels.num_classes(),
        histogram,
    };
    write_spv(&Volume::Labels(labels), out)
        .with_context(|| format!("writing {}", out.display()))?;

    emit(json, &report, || {
        println!(
            "wrote {} ({}x{}x{} voxels, {} classes)",
            report.path, dims[0], dims[1], dims[2], report.num_classes
        );
        for c in &report.histogram {
            println!(
                "  class {}: {} voxels ({:.2}%)",
                c.class_id,
                c.voxels,
                100.0 * c.fraction
            );
        }
    })?;
    Ok(true)
}

#[derive(Serialize)]
struct PromptsReport {
    path: String,
    mode: PromptMode,
    num_classes: usize,
    total_sets: usize,
    present_sets: usize,
}

pub fn prompts(input: &Path, mode: PromptMode, out: &Path, json: bool) -> Result<bool> {
    let labels = read_labels(input)?;
    let sets = generate_prompts(&labels, mode);
    write_prompts(&sets, out).with_context(|| format!("writing {}", out.display()))?;

    let report = PromptsReport {
        path: out.display().to_string(),
        mode,
        num_classes: labels.num_classes(),
        total_sets: sets.len(),
        present_sets: sets.iter().filter(|p| p.present).count(),
    };
    emit(json, &report, || {
        println!(
            "wrote {} ({} prompt sets, {} with the class present)",
            report.path, report.total_sets, report.present_sets
        );
        match mode {
            PromptMode::Volume => {
                for p in &sets {
                    describe_volume_prompt(p);
                }
            }
            PromptMode::Slice => {
                let slices = labels.dims()[2];
                for class_id in 1..labels.num_classes() {
                    let present = sets
                        .iter()
                        .filter(|p| p.class_id == class_id && p.present)
                        .count();
                    println!("  class {class_id}: present on {present} of {slices} slices");
                }
            }
        }
    })?;
    Ok(true)
}

fn describe_volume_prompt(p: &PromptSet) {
    if p.present {
        println!(
            "  class {}: box {:?}..{:?}, point {:?} (sq dist {} mm^2)",
            p.class_id, p.box_prompt.min, p.box_prompt.max, p.point.index, p.point.sq_distance_mm2
        );
    } else {
        println!("  class {}: absent", p.class_id);
    }
}

#[derive(Serialize)]
struct OracleCheck {
    matched: bool,
    bit_exact_required: bool,
    voxels: usize,
}

#[derive(Serialize)]
struct EdtReport {
    path: String,
    class_id: u8,
    dims: [usize; 3],
    spacing: [f64; 3],
    max_sq_mm2: f64,
    mean_sq_mm2: f64,
    zero_voxels: usize,
    oracle: Option<OracleCheck>,
}

pub fn edt(input: &Path, class: u8, out: &Path, oracle: bool, json: bool) -> Result<bool> {
    let labels = read_labels(input)?;
    let mask = labels.one_hot(class as usize)?;
    let field = edt_exact(&mask);

    let values = field.values();
    let max_sq_mm2 = values.iter().fold(0.0f64, |a, &b| a.max(b));
    let mean_sq_mm2 = values.iter().sum::<f64>() / values.len() as f64;
    let zero_voxels = values.iter().filter(|&&v| v == 0.0).count();

    let oracle_check = if oracle {
        let brute = edt_bruteforce(&mask)?;
        let bit_exact_required = labels.spacing() == [1.0, 1.0, 1.0];
        let matched = values.iter().zip(brute.values()).all(|(&a, &b)| {
            if bit_exact_required {
                a.to_bits() == b.to_bits()
            } else {
                a == b || (a - b).abs() <= EDT_ORACLE_REL_TOL * a.abs().max(b.abs())
            }
        });
        Some(OracleCheck {
            matched,
            bit_exact_required,
            voxels: values.len(),
        })
    } else {
        None
    };

    let report = EdtReport {
        path: out.display().to_string(),
        class_id: class,
        dims: labels.dims(),
        spacing: labels.spacing(),
        max_sq_mm2,
        mean_sq_mm2,
        zero_voxels,
        oracle: oracle_check,
    };
    write_spv(&Volume::Scalars(field.into_scalar_volume()), out)
        .with_context(|| format!("writing {}", out.display()))?;

    let passed = report.oracle.as_ref().is_none_or(|o| o.matched);
    emit(json, &report, || {
        println!(
            "wrote {} (class {}, max {} mm^2, mean {:.3} mm^2, {} zero voxels)",
            report.path, report.class_id, report.max_sq_mm2, report.mean_sq_mm2, report.zero_voxels
        );
        if let Some(o) = &report.oracle {
            let kind = if o.bit_exact_required {
                "bit-exact"
            } else {
                "within 1e-12 relative"
            };
            let verdict = if o.matched { "matches" } else { "DIFFERS FROM" };
            println!(
                "  {} brute-force oracle over {} voxels ({})",
                verdict, o.voxels, kind
            );
        }
    })?;
    Ok(passed)
}

#[derive(Serialize)]
struct DiceEntry {
    class_id: usize,
    dice: f64,
}

#[derive(Serialize)]
struct DiceReport {
    a: String,
    b: String,
    per_class: Vec<DiceEntry>,
    mean: f64,
}

pub fn dice(a_path: &Path, b_path: &Path, json: bool) -> Result<bool> {
    let a = read_labels(a_path)?;
    let b = read_labels(b_path)?;
    if a.dims() != b.dims() {
        bail!(
            "volumes have different grids: {:?} vs {:?}",
            a.dims(),
            b.dims()
        );
    }
    if a.num_classes() != b.num_classes() {
        bail!(
            "volumes declare different class counts: {} vs {}",
            a.num_classes(),
            b.num_classes()
        );
    }

    // Foreground classes only; an all-background pair is a perfect match
    // by convention.
    let mut per_class = Vec::new();
    for class_id in 1..a.num_classes() {
        let d = dice_score(&a.one_hot(class_id)?, &b.one_hot(class_id)?)?;
        per_class.push(DiceEntry { class_id, dice: d });
    }
    let mean = if per_class.is_empty() {
        1.0
    } else {
        per_class.iter().map(|e| e.dice).sum::<f64>() / per_class.len() as f64
    };

    let report = DiceReport {
        a: a_path.display().to_string(),
        b: b_path.display().to_string(),
        per_class,
        mean,
    };
    emit(json, &report, || {
        for e in &report.per_class {
            println!("class {}: {:.6}", e.class_id, e.dice);
        }
        println!("mean: {:.6}", report.mean);
    })?;
    Ok(true)
}

#[derive(Serialize)]
struct LrEntry {
    epoch: u32,
    lr: f64,
}

#[derive(Serialize)]
struct LrReport {
    init_lr: f64,
    max_epochs: u32,
    entries: Vec<LrEntry>,
}

pub fn schedule_lr(
    init_lr: f64,
    max_epochs: u32,
    epochs: Option<&[u32]>,
    json: bool,
) -> Result<bool> {
    let sched = LrSchedule::new(init_lr, max_epochs)?;
    let epochs: Vec<u32> = match epochs {
        Some(list) => list.to_vec(),
        None => {
            let step = (max_epochs / 10).max(1);
            let mut list: Vec<u32> = (0..max_epochs).step_by(step as usize).collect();
            list.push(max_epochs);
            list
        }
    };
    let mut entries = Vec::with_capacity(epochs.len());
    for e in epochs {
        entries.push(LrEntry {
            epoch: e,
            lr: poly_lr(&sched, e)?,
        });
    }
    let report = LrReport {
        init_lr,
        max_epochs,
        entries,
    };
    emit(json, &report, || {
        println!("epoch      lr");
        for e in &report.entries {
            println!("{:<8} {:.10}", e.epoch, e.lr);
        }
    })?;
    Ok(true)
}

#[derive(Serialize)]
struct DswReport {
    levels: usize,
    weights: Vec<f64>,
}

pub fn schedule_dsw(levels: usize, json: bool) -> Result<bool> {
    let report = DswReport {
        levels,
        weights: ds_weights(levels)?,
    };
    emit(json, &report, || {
        println!("level  resolution  weight");
        for (i, w) in report.weights.iter().enumerate() {
            println!("{:<6} 1/{:<9} {:.10}", i + 1, 1usize << i, w);
        }
    })?;
    Ok(true)
}

#[derive(Serialize)]
struct GradcheckReportOut {
    depth: usize,
    tokens: usize,
    channels: usize,
    seed: u64,
    perturbed: bool,
    threshold: f64,
    per_tensor: Vec<TensorErrorOut>,
    max_rel_error: f64,
    pass: bool,
}

#[derive(Serialize)]
struct TensorErrorOut {
    name: String,
    rel_error: f64,
}

pub fn gradcheck(
    depth: usize,
    tokens: usize,
    channels: usize,
    perturb: bool,
    seed: u64,
    json: bool,
) -> Result<bool> {
    let injected = if perturb { GRADCHECK_PERTURBATION } else { 0.0 };
    let check = dfused_gradient_check(depth, tokens, channels, seed, injected)?;
    let pass = check.max_rel_error < GRADCHECK_THRESHOLD;
    let report = GradcheckReportOut {
        depth,
        tokens,
        channels,
        seed,
        perturbed: perturb,
        threshold: GRADCHECK_THRESHOLD,
        per_tensor: check
            .per_tensor
            .iter()
            .map(|t| TensorErrorOut {
                name: t.name.clone(),
                rel_error: t.rel_error,
            })
            .collect(),
        max_rel_error: check.max_rel_error,
        pass,
    };
    emit(json, &report, || {
        println!(
            "gradient check: depth {}, tokens {}, channels {}, seed {}",
            depth, tokens, channels, seed
        );
        for t in &report.per_tensor {
            println!("  {:<6} rel error {:.3e}", t.name, t.rel_error);
        }
        println!(
            "max rel error {:.3e} vs threshold {:.0e}: {}",
            report.max_rel_error,
            report.threshold,
            if pass { "pass" } else { "FAIL" }
        );
    })?;
    Ok(pass)
}

#[derive(Serialize)]
struct DemoCheck {
    name: String,
    pass: bool,
    detail: String,
}

#[derive(Serialize)]
struct DemoReport {
    seed: u64,
    dims: [usize; 3],
    labels_path: String,
    prompts_path: String,
    probs_path: String,
    fused_path: String,
    checks: Vec<DemoCheck>,
    all_passed: bool,
}

/// Tight bounding box of one class, scanned directly from the labels.
fn scan_box(labels: &LabelVolume, class_id: u8) -> Option<([usize; 3], [usize; 3])> {
    let [nx, ny, nz] = labels.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if labels.labels()[labels.index(x, y, z)] == class_id {
                    any = true;
                    for (axis, v) in [x, y, z].into_iter().enumerate() {
                        lo[axis] = lo[axis].min(v);
                        hi[axis] = hi[axis].max(v);
                    }
                }
            }
        }
    }
    any.then_some((lo, hi))
}

pub fn demo(out_dir: &Path, seed: u64, json: bool) -> Result<bool> {
    let dims = [64usize, 64, 64];
    let spacing = [1.0f64, 1.0, 1.0];
    let class_ids = [1u8, 2, 3];
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let spheres = random_spheres(dims, spacing, &class_ids, (4.0, 9.0), seed)?;
    let labels = synth_spheres(dims, spacing, &spheres, seed)?;
    let labels_path = out_dir.join("labels.spv");
    write_spv(&Volume::Labels(labels.clone()), &labels_path)?;

    let sets = generate_prompts(&labels, PromptMode::Volume);
    let prompts_path = out_dir.join("prompts.json");
    write_prompts(&sets, &prompts_path)?;

    let mut checks = Vec::new();
    for sphere in &spheres {
        let class_id = sphere.class_id;
        let set = sets
            .iter()
            .find(|p| p.class_id == class_id as usize)
            .expect("every painted class gets a prompt set");

        checks.push(DemoCheck {
            name: format!("class {class_id} present"),
            pass: set.present,
            detail: format!("present = {}", set.present),
        });

        let scanned = scan_box(&labels, class_id);
        let box_ok = match &scanned {
            Some((lo, hi)) => set.box_prompt.min == lo && set.box_prompt.max == hi,
            None => false,
        };
        checks.push(DemoCheck {
            name: format!("class {class_id} box tight"),
            pass: box_ok,
            detail: format!(
                "prompt {:?}..{:?}, scan {:?}",
                set.box_prompt.min, set.box_prompt.max, scanned
            ),
        });

        let center: Vec<usize> = sphere.center.iter().map(|&c| c.round() as usize).collect();
        checks.push(DemoCheck {
            name: format!("class {class_id} point at sphere center"),
            pass: set.point.index == center,
            detail: format!("point {:?}, center {:?}", set.point.index, center),
        });
    }

    // Turn the labels into exact one-hot logits, push them through an
    // identity multi-class adapter, and require the fused labels to
    // reconstruct the originals perfectly.
    let k = labels.num_classes();
    let voxels = labels.labels().len();
    let mut logits = ScalarVolume::zeros(dims, spacing, k)?;
    for (i, &l) in labels.labels().iter().enumerate() {
        logits.values_mut()[l as usize * voxels + i] = 1.0;
    }
    let stack = ConvStack::mc_identity(k)?;
    let (probs, fused) = mcadapter_fuse(&logits, &stack)?;
    let probs_path = out_dir.join("probs.spv");
    write_spv(&Volume::Scalars(probs), &probs_path)?;
    let fused_path = out_dir.join("fused.spv");
    write_spv(&Volume::Labels(fused.clone()), &fused_path)?;

    for class_id in 1..k {
        let d = dice_score(&labels.one_hot(class_id)?, &fused.one_hot(class_id)?)?;
        checks.push(DemoCheck {
            name: format!("class {class_id} fused dice"),
            pass: d == 1.0,
            detail: format!("dice = {d}"),
        });
    }

    let all_passed = checks.iter().all(|c| c.pass);
    let report = DemoReport {
        seed,
        dims,
        labels_path: labels_path.display().to_string(),
        prompts_path: prompts_path.display().to_string(),
        probs_path: probs_path.display().to_string(),
        fused_path: fused_path.display().to_string(),
        checks,
        all_passed,
    };
    emit(json, &report, || {
        println!("artifacts:");
        println!("  labels:  {}", report.labels_path);
        println!("  prompts: {}", report.prompts_path);
        println!("  probs:   {}", report.probs_path);
        println!("  fused:   {}", report.fused_path);
        println!("checks:");
        for c in &report.checks {
            println!(
                "  [{}] {} ({})",
                if c.pass { "ok" } else { "FAIL" },
                c.name,
                c.detail
            );
        }
        println!(
            "demo {}",
            if report.all_passed { "passed" } else { "FAILED" }
        );
    })?;
    Ok(all_passed)
}
