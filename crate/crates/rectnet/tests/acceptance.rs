//! Acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line with the measured numbers.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use rectnet::detector::{
    candidates_at, detect, grow_clusters, meanshift_modes, DetectorConfig, MapEntry,
};
use rectnet::evaluator::{default_thresholds, froc_sweep, EvalPair};
use rectnet::lung_seg::{segment_lungs, SegmentationConfig};
use rectnet::models::{CnnBaselineConfig, RectNetConfig};
use rectnet::neural::gradcheck::check_model;
use rectnet::neural::layers::{Conv2d, Dense, MaxPool2};
use rectnet::neural::loss::{nll, SoftmaxHead};
use rectnet::neural::lstm::Lstm;
use rectnet::neural::{Image, Tensors};
use rectnet::sampler::{build_dataset, BuildConfig, VolumeRef};
use rectnet::trainer::{train_rectnet, TrainOptions};
use rectnet::volume::{
    generate_phantom, read_annotations, read_mask, read_volume, write_annotations, write_mask,
    write_volume, BinaryMask, Ellipsoid, NoduleAnnotation, NoduleSpec, PhantomSpec, VesselSpec,
    Volume,
};

fn report(n: usize, name: &str, ok: bool, detail: &str) {
    println!(
        "criterion {n} ({name}): {} -- {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn zeroed<M: Tensors<f64> + Clone>(m: &M) -> M {
    let mut z = m.clone();
    for (_, _, d) in z.tensors_mut() {
        for v in d {
            *v = 0.0;
        }
    }
    z
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: (f64, &str) = (0.0, "none");
    let track = |name: &'static str, err: f64, worst: &mut (f64, &str)| {
        if err > worst.0 {
            *worst = (err, name);
        }
    };

    // Convolution with fused ReLU.
    {
        let mut conv = Conv2d::<f64>::new(2, 3, 3, true, &mut rng);
        let x = Image::from_data(2, 8, 8, rand_vec(2 * 8 * 8, &mut rng));
        let r = rand_vec(3 * 6 * 6, &mut rng);
        let (out, cache) = conv.forward(x.clone());
        let mut grads = zeroed(&conv);
        let dy = Image::from_data(3, 6, 6, r.clone());
        conv.backward(&cache, &dy, &mut grads);
        let (rr, xx) = (r.clone(), x.clone());
        let report = check_model(
            &mut conv,
            &grads,
            move |m: &Conv2d<f64>| {
                let (out, _) = m.forward(xx.clone());
                out.data.iter().zip(rr.iter()).map(|(a, b)| a * b).sum()
            },
            64,
            1,
        );
        assert!(out.data.len() == 3 * 6 * 6);
        track("conv", report.max_rel_err, &mut worst);
    }

    // Max pooling: gradients must route through the argmax positions to
    // the upstream convolution parameters.
    {
        let mut conv = Conv2d::<f64>::new(1, 2, 3, false, &mut rng);
        let pool = MaxPool2;
        let x = Image::from_data(1, 9, 9, rand_vec(81, &mut rng));
        let r = rand_vec(2 * 3 * 3, &mut rng);
        let (mid, conv_cache) = conv.forward(x.clone());
        let (_, pool_cache) = pool.forward(&mid);
        let dy = Image::from_data(2, 3, 3, r.clone());
        let dmid = pool.backward(&pool_cache, &dy);
        let mut grads = zeroed(&conv);
        conv.backward(&conv_cache, &dmid, &mut grads);
        let (rr, xx) = (r.clone(), x.clone());
        let report = check_model(
            &mut conv,
            &grads,
            move |m: &Conv2d<f64>| {
                let (mid, _) = m.forward(xx.clone());
                let (out, _) = MaxPool2.forward(&mid);
                out.data.iter().zip(rr.iter()).map(|(a, b)| a * b).sum()
            },
            64,
            2,
        );
        track("max-pool", report.max_rel_err, &mut worst);
    }

    // Dense with ReLU.
    {
        let mut dense = Dense::<f64>::new(6, 4, true, &mut rng);
        let x = rand_vec(6, &mut rng);
        let r = rand_vec(4, &mut rng);
        let (_, cache) = dense.forward(x.clone());
        let mut grads = zeroed(&dense);
        dense.backward(&cache, &r, &mut grads);
        let (rr, xx) = (r.clone(), x.clone());
        let report = check_model(
            &mut dense,
            &grads,
            move |m: &Dense<f64>| {
                let (out, _) = m.forward(xx.clone());
                out.iter().zip(rr.iter()).map(|(a, b)| a * b).sum()
            },
            32,
            3,
        );
        track("dense", report.max_rel_err, &mut worst);
    }

    // Softmax head with the negative log-likelihood.
    {
        let mut head = SoftmaxHead::<f64>::new(5, 2, &mut rng);
        let x = rand_vec(5, &mut rng);
        let label = 1;
        let (_, cache) = head.forward(x.clone());
        let mut grads = zeroed(&head);
        head.backward(&cache, label, 1.0, &mut grads);
        let xx = x.clone();
        let report = check_model(
            &mut head,
            &grads,
            move |m: &SoftmaxHead<f64>| nll(&m.forward(xx.clone()).0, label),
            20,
            4,
        );
        track("softmax/nll", report.max_rel_err, &mut worst);
    }

    // Single LSTM step (sequence of one from the zero state).
    {
        let mut lstm = Lstm::<f64>::new(4, 3, &mut rng);
        let xs = vec![rand_vec(4, &mut rng)];
        let r = rand_vec(3, &mut rng);
        let (_, caches) = lstm.forward_seq(&xs);
        let mut grads = zeroed(&lstm);
        lstm.backward_seq(&caches, &[r.clone()], &mut grads);
        let (rr, xx) = (r.clone(), xs.clone());
        let report = check_model(
            &mut lstm,
            &grads,
            move |m: &Lstm<f64>| {
                let (hs, _) = m.forward_seq(&xx);
                hs[0].iter().zip(rr.iter()).map(|(a, b)| a * b).sum()
            },
            64,
            5,
        );
        track("lstm step", report.max_rel_err, &mut worst);
    }

    // Full backpropagation through time over 7 steps.
    {
        let mut lstm = Lstm::<f64>::new(5, 4, &mut rng);
        let xs: Vec<Vec<f64>> = (0..7).map(|_| rand_vec(5, &mut rng)).collect();
        let rs: Vec<Vec<f64>> = (0..7).map(|_| rand_vec(4, &mut rng)).collect();
        let (_, caches) = lstm.forward_seq(&xs);
        let mut grads = zeroed(&lstm);
        lstm.backward_seq(&caches, &rs, &mut grads);
        let (rr, xx) = (rs.clone(), xs.clone());
        let report = check_model(
            &mut lstm,
            &grads,
            move |m: &Lstm<f64>| {
                let (hs, _) = m.forward_seq(&xx);
                hs.iter()
                    .zip(rr.iter())
                    .map(|(h, r)| h.iter().zip(r.iter()).map(|(a, b)| a * b).sum::<f64>())
                    .sum()
            },
            96,
            6,
        );
        track("bptt 7 steps", report.max_rel_err, &mut worst);
    }

    let elapsed = start.elapsed().as_secs_f64();
    let ok = worst.0 < 1e-4 && elapsed < 60.0;
    report(
        1,
        "gradient correctness",
        ok,
        &format!(
            "max relative error {:.2e} (worst: {}), {elapsed:.1}s",
            worst.0, worst.1
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Architecture fidelity
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_architecture_fidelity() {
    let hybrid = RectNetConfig::paper();
    let baseline = CnnBaselineConfig::paper();
    let hybrid_count = hybrid.param_count().unwrap();
    let baseline_count = baseline.param_count().unwrap();
    let hybrid_rel = (hybrid_count as f64 - 10_691_950.0).abs() / 10_691_950.0;
    let baseline_rel = (baseline_count as f64 - 1_686_598.0).abs() / 1_686_598.0;

    let hybrid_desc = hybrid.describe().unwrap();
    let hybrid_trace = ["46x46", "23x23", "20x20", "18x18", "9x9", "7x7", "3x3"];
    let hybrid_trace_ok = hybrid_trace.iter().all(|t| hybrid_desc.contains(t));
    let baseline_desc = baseline.describe().unwrap();
    let baseline_trace = ["46x46", "44x44", "22x22", "20x20", "18x18", "9x9", "8x8", "4x4"];
    let baseline_trace_ok = baseline_trace.iter().all(|t| baseline_desc.contains(t));

    let ok = hybrid_rel <= 1e-3 && baseline_rel <= 1e-4 && hybrid_trace_ok && baseline_trace_ok;
    report(
        2,
        "architecture fidelity",
        ok,
        &format!(
            "hybrid {hybrid_count} params ({:.4}% off), baseline {baseline_count} \
             ({:.4}% off), traces {}",
            hybrid_rel * 100.0,
            baseline_rel * 100.0,
            if hybrid_trace_ok && baseline_trace_ok { "match" } else { "differ" }
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Clustering oracle
// ---------------------------------------------------------------------------

fn oracle_partition(entries: &[MapEntry], step: usize) -> Vec<Vec<usize>> {
    let coords: Vec<(i64, i64, i64)> = entries
        .iter()
        .map(|e| {
            (
                (e.voxel[0] / step) as i64,
                (e.voxel[1] / step) as i64,
                e.voxel[2] as i64,
            )
        })
        .collect();
    let n = entries.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        let (xi, yi, zi) = coords[i];
        for j in i + 1..n {
            let (xj, yj, zj) = coords[j];
            if (xi - xj).abs() <= 1 && (yi - yj).abs() <= 1 && (zi - zj).abs() <= 1 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    for g in &mut out {
        g.sort_unstable();
    }
    out.sort_by_key(|g| g[0]);
    out
}

#[test]
fn criterion_3_clustering_oracle() {
    let start = Instant::now();
    let step = 4;
    let failures: usize = (0..1000u64)
        .into_par_iter()
        .map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + case);
            let n = rng.gen_range(0..=2000usize);
            let mut seen = std::collections::HashSet::new();
            let mut entries = Vec::new();
            while entries.len() < n && seen.len() < 24 * 24 * 6 {
                let g = (
                    rng.gen_range(0..24usize),
                    rng.gen_range(0..24usize),
                    rng.gen_range(0..6usize),
                );
                if seen.insert(g) {
                    entries.push(MapEntry {
                        voxel: [g.0 * step, g.1 * step, g.2],
                        p: 0.9,
                    });
                }
            }
            let mut got = grow_clusters(&entries, step);
            got.sort_by_key(|g| g[0]);
            usize::from(got != oracle_partition(&entries, step))
        })
        .sum();
    let elapsed = start.elapsed().as_secs_f64();
    let ok = failures == 0 && elapsed < 30.0;
    report(
        3,
        "clustering oracle",
        ok,
        &format!("1000 randomized maps, {failures} mismatches, {elapsed:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// 4. Mean-shift fixture
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_mean_shift_fixture() {
    let config = DetectorConfig::default();
    let h = config.bandwidth;
    let step = 4;
    // Two Gaussian blobs in grid-index space, 10h = 15 grid steps apart.
    let centers = [[10.0, 10.0, 4.0], [25.0, 10.0, 4.0]];
    let probs = [0.9f32, 0.6];
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (center, p) in centers.iter().zip(probs.iter()) {
        for _ in 0..300 {
            let gx = (center[0] + rng.gen_range(-0.8..0.8f64) + rng.gen_range(-0.8..0.8f64)).round();
            let gy = (center[1] + rng.gen_range(-0.8..0.8f64) + rng.gen_range(-0.8..0.8f64)).round();
            let gz = (center[2] + rng.gen_range(-0.6..0.6) + rng.gen_range(-0.6..0.6f64)).round();
            // Grid cells are unique in a scanned probability map.
            if !seen.insert((gx as usize, gy as usize, gz as usize)) {
                continue;
            }
            entries.push(MapEntry {
                voxel: [gx as usize * step, gy as usize * step, gz as usize],
                p: p + rng.gen_range(-0.02..0.02),
            });
        }
    }
    let clusters = grow_clusters(&entries, step);
    let tables: Vec<_> = clusters
        .iter()
        .map(|c| meanshift_modes(&entries, c, step, &config))
        .collect();
    let modes: Vec<_> = tables.iter().flat_map(|t| t.modes.iter()).collect();

    let mut mode_err: f64 = 0.0;
    let mut matched = 0;
    for center in &centers {
        let best = modes
            .iter()
            .map(|m| {
                let d: f64 = (0..3)
                    .map(|a| (m.position[a] - center[a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                d
            })
            .min_by(f64::total_cmp);
        if let Some(d) = best {
            mode_err = mode_err.max(d);
            if d < 0.1 * h {
                matched += 1;
            }
        }
    }

    let candidates = candidates_at(&tables, config.accept_p);
    let one_candidate = candidates.len() == 1;
    let on_strong_blob = one_candidate
        && candidates[0]
            .members
            .iter()
            .all(|m| (m.voxel[0] as f64 / step as f64 - centers[0][0]).abs() < 7.0);

    let ok = modes.len() == 2 && matched == 2 && one_candidate && on_strong_blob;
    report(
        4,
        "mean-shift fixture",
        ok,
        &format!(
            "{} modes, worst center error {:.3} grid steps (limit {:.3}), \
             {} candidate(s) at accept 0.75",
            modes.len(),
            mode_err,
            0.1 * h,
            candidates.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Segmentation
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_segmentation() {
    // CT-sized phantom with a near-cylindrical lung so every slice has a
    // full cross-section; one juxtapleural nodule hugging the pleural
    // boundary and one interior nodule.
    let spec = PhantomSpec {
        dims: [512, 512, 24],
        spacing: [1.0, 1.0, 2.5],
        lung: Ellipsoid {
            center_mm: [256.0, 256.0, 30.0],
            radii_mm: [230.0, 200.0, 200.0],
        },
        nodules: vec![
            NoduleSpec {
                center_mm: [482.5, 256.0, 30.0],
                radii_mm: [2.8, 2.8, 2.8],
                hu: -150,
            },
            NoduleSpec {
                center_mm: [160.0, 256.0, 30.0],
                radii_mm: [4.0, 4.0, 4.0],
                hu: -120,
            },
        ],
        vessels: vec![VesselSpec {
            polyline_mm: [[120.0, 200.0, 10.0], [380.0, 310.0, 50.0]].to_vec(),
            radius_mm: 1.5,
            hu: -110,
        }],
        noise_sigma: 30.0,
        seed: 9,
        ..PhantomSpec::default()
    };
    let (volume, truth, annotations) = generate_phantom(&spec).unwrap();
    let mask = segment_lungs(&volume, &SegmentationConfig::default()).unwrap();
    let iou = mask.iou(&truth);

    let juxtapleural_present = annotations.iter().any(|a| {
        a.voxels.iter().any(|&(x, y, z)| {
            let p = volume.voxel_center_mm(x, y, z);
            let d: f64 = (0..3)
                .map(|i| {
                    let c = [p.0, p.1, p.2][i];
                    ((c - spec.lung.center_mm[i]) / spec.lung.radii_mm[i]).powi(2)
                })
                .sum();
            d.sqrt() > 0.97
        })
    });
    let covered = annotations
        .iter()
        .flat_map(|a| a.voxels.iter())
        .all(|&(x, y, z)| mask.get(x, y, z));

    let ok = iou >= 0.95 && covered && juxtapleural_present;
    report(
        5,
        "segmentation",
        ok,
        &format!(
            "lung IoU {iou:.4}, nodule voxels covered: {covered}, \
             juxtapleural case present: {juxtapleural_present}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Shared phantom suite for criteria 6 and 7
// ---------------------------------------------------------------------------

struct Suite {
    _dir: tempfile::TempDir,
    volumes: Vec<PathBuf>,
}

static SUITE: OnceLock<Suite> = OnceLock::new();

fn dist_point_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len_sq: f64 = ab.iter().map(|v| v * v).sum();
    let t = (ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len_sq;
    let t = t.clamp(0.0, 1.0);
    (0..3)
        .map(|i| (p[i] - (a[i] + t * ab[i])).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn suite_spec(i: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(5000 + i);
    let lung_c = [45.0, 45.0, 27.5];
    let lung_r = [30.0, 24.0, 20.0];
    let wanted = rng.gen_range(1..=3usize);
    let dy = rng.gen_range(-6.0..6.0);
    let vessel_a = [23.0, 45.0 + dy, 16.0];
    let vessel_b = [67.0, 45.0 - dy, 39.0];
    let vessel_r = rng.gen_range(1.0..1.5);
    let mut nodules: Vec<NoduleSpec> = Vec::new();
    let mut guard = 0;
    while nodules.len() < wanted && guard < 400 {
        guard += 1;
        // Uniform direction inside a 0.6-ball of normalized lung space
        // keeps nodules fully interior.
        let p = [
            rng.gen_range(-0.6..0.6),
            rng.gen_range(-0.6..0.6),
            rng.gen_range(-0.6..0.6),
        ];
        if p.iter().map(|v| v * v).sum::<f64>() > 0.36 {
            continue;
        }
        let center = [
            lung_c[0] + p[0] * lung_r[0],
            lung_c[1] + p[1] * lung_r[1],
            lung_c[2] + p[2] * lung_r[2],
        ];
        let r = rng.gen_range(2.6..4.0);
        // Separation keeps distinct nodules in distinct grown clusters,
        // and vessel clearance avoids juxtavascular merges: one grown
        // cluster yields one candidate, so bridged nodules would count
        // as a single detection.
        if nodules.iter().any(|n| {
            let d: f64 = (0..3)
                .map(|a| (n.center_mm[a] - center[a]).powi(2))
                .sum::<f64>()
                .sqrt();
            d < 22.0
        }) {
            continue;
        }
        if dist_point_segment(center, vessel_a, vessel_b) < r + vessel_r + 6.0 {
            continue;
        }
        nodules.push(NoduleSpec {
            center_mm: center,
            radii_mm: [r, r, r],
            hu: rng.gen_range(-170..-90),
        });
    }
    PhantomSpec {
        dims: [72, 72, 22],
        spacing: [1.25, 1.25, 2.5],
        lung: Ellipsoid {
            center_mm: lung_c,
            radii_mm: lung_r,
        },
        nodules,
        vessels: vec![VesselSpec {
            polyline_mm: vec![vessel_a, vessel_b],
            radius_mm: vessel_r,
            hu: -110,
        }],
        noise_sigma: 30.0,
        seed: 9000 + i,
        ..PhantomSpec::default()
    }
}

fn suite() -> &'static Suite {
    SUITE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let volumes: Vec<PathBuf> = (0..25u64)
            .into_par_iter()
            .map(|i| {
                let spec = suite_spec(i);
                assert!(!spec.nodules.is_empty(), "suite phantom {i} has no nodules");
                let (volume, _, annotations) = generate_phantom(&spec).unwrap();
                let path = dir.path().join(format!("vol{i}.json"));
                write_volume(&volume, &path).unwrap();
                write_annotations(&annotations, &rectnet::volume::annotation_path(&path))
                    .unwrap();
                path
            })
            .collect();
        Suite { _dir: dir, volumes }
    })
}

fn suite_refs(paths: &[PathBuf]) -> Vec<VolumeRef> {
    paths
        .iter()
        .map(|p| VolumeRef {
            volume: p.to_string_lossy().into_owned(),
            annotations: Some(
                rectnet::volume::annotation_path(p).to_string_lossy().into_owned(),
            ),
            mask: None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// 6. Desk-scale end-to-end
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_desk_scale_end_to_end() {
    let start = Instant::now();
    let suite = suite();
    let (train_paths, test_paths) = suite.volumes.split_at(20);

    // Negatives are drawn at the inference grid density so vessel and
    // parenchyma patches are represented the way detection will see them.
    let build = BuildConfig {
        grid_multiplier: 4.0,
        max_positives_per_nodule: 10,
        patch_size: 20,
        k: 3,
        seed: 7,
        ..BuildConfig::default()
    };
    let manifest = build_dataset(&suite_refs(train_paths), &build).unwrap();
    let manifest_path = suite._dir.path().join("train.jsonl");
    manifest.write(&manifest_path).unwrap();
    let data = rectnet::trainer::LoadedDataset::load(&manifest_path).unwrap();

    let opts = TrainOptions {
        pretrain_epochs: 6,
        epochs: 16,
        batch_size: 64,
        seed: 42,
        ..TrainOptions::default()
    };
    let (model, artifacts) = train_rectnet(&data, &RectNetConfig::desk(), &opts).unwrap();

    let config = DetectorConfig::default();
    let outputs: Vec<_> = test_paths
        .iter()
        .map(|p| {
            let volume = read_volume(p).unwrap();
            let mask = segment_lungs(&volume, &SegmentationConfig::default()).unwrap();
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            let (output, _) = detect(&volume, &mask, &model, &config, &name).unwrap();
            output
        })
        .collect();
    let truths: Vec<Vec<NoduleAnnotation>> = test_paths
        .iter()
        .map(|p| read_annotations(&rectnet::volume::annotation_path(p)).unwrap())
        .collect();
    let pairs: Vec<EvalPair<'_>> = outputs
        .iter()
        .zip(truths.iter())
        .map(|(detection, nodules)| EvalPair {
            detection,
            nodules,
        })
        .collect();

    let sweep = froc_sweep(&pairs, &default_thresholds()).unwrap();
    let monotone = sweep.windows(2).all(|w| w[1].sensitivity <= w[0].sensitivity + 1e-12);
    let best = sweep
        .iter()
        .filter(|p| p.fps_per_scan <= 8.0)
        .max_by(|a, b| a.sensitivity.total_cmp(&b.sensitivity))
        .cloned();
    let elapsed = start.elapsed().as_secs_f64();

    let (sens, fps, accept) = best
        .map(|b| (b.sensitivity, b.fps_per_scan, b.accept_p))
        .unwrap_or((0.0, f64::INFINITY, f64::NAN));
    let ok = sens >= 0.9 && fps <= 8.0 && monotone && elapsed < 3600.0;
    report(
        6,
        "desk-scale end-to-end",
        ok,
        &format!(
            "sensitivity {sens:.3} at {fps:.2} fp/scan (accept_p {accept:.2}), \
             monotone sweep: {monotone}, val acc {:.3}, {elapsed:.0}s",
            artifacts.final_val_accuracy
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Two-phase training property
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_two_phase_training_property() {
    let suite = suite();
    let build = BuildConfig {
        grid_multiplier: 12.0,
        max_positives_per_nodule: 6,
        patch_size: 20,
        k: 3,
        seed: 11,
        ..BuildConfig::default()
    };
    let manifest = build_dataset(&suite_refs(&suite.volumes[..8]), &build).unwrap();
    let manifest_path = suite._dir.path().join("tune.jsonl");
    manifest.write(&manifest_path).unwrap();
    let data = rectnet::trainer::LoadedDataset::load(&manifest_path).unwrap();

    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let run = |seed: u64, freeze: bool| {
        let opts = TrainOptions {
            pretrain_epochs: 3,
            epochs: 6,
            batch_size: 64,
            val_fraction: 0.15,
            freeze_cnn: freeze,
            seed,
            ..TrainOptions::default()
        };
        let (_, artifacts) = train_rectnet(&data, &RectNetConfig::desk(), &opts).unwrap();
        artifacts.final_val_loss
    };
    let seeds = [101u64, 202, 303];
    let fine: Vec<f64> = seeds.iter().map(|&s| run(s, false)).collect();
    let frozen: Vec<f64> = seeds.iter().map(|&s| run(s, true)).collect();
    let (med_fine, med_frozen) = (median(fine.clone()), median(frozen.clone()));

    let ok = med_fine <= med_frozen;
    report(
        7,
        "two-phase training property",
        ok,
        &format!(
            "median val loss fine-tuned {med_fine:.4} vs frozen {med_frozen:.4} \
             (per-seed fine {fine:?}, frozen {frozen:?})"
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. CLI determinism
// ---------------------------------------------------------------------------

fn run_cli(args: &[&str], dir: &std::path::Path) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_rectnet"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn rectnet");
    assert!(
        out.status.success(),
        "rectnet {:?} failed:\n{}\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn criterion_8_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = PhantomSpec {
        dims: [64, 64, 16],
        spacing: [1.25, 1.25, 2.5],
        lung: Ellipsoid {
            center_mm: [40.0, 40.0, 20.0],
            radii_mm: [26.0, 21.0, 15.0],
        },
        nodules: vec![NoduleSpec {
            center_mm: [32.0, 40.0, 20.0],
            radii_mm: [3.0, 3.0, 3.0],
            hu: -140,
        }],
        noise_sigma: 25.0,
        seed: 5,
        ..PhantomSpec::default()
    };
    std::fs::write(d.join("spec.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    run_cli(&["phantom", "--spec", "spec.json", "--out", "vol.json"], d);

    let mut identical = Vec::new();
    let mut check = |label: &str, a: &str, b: &str| {
        let same = std::fs::read(d.join(a)).unwrap() == std::fs::read(d.join(b)).unwrap();
        identical.push((label.to_string(), same));
    };

    for tag in ["a", "b"] {
        run_cli(
            &[
                "--deterministic",
                "build-dataset",
                "--volume",
                "vol.json",
                "--out",
                &format!("manifest_{tag}.jsonl"),
                "--grid-multiplier",
                "8",
                "--patch-size",
                "20",
                "--k",
                "3",
                "--max-positives-per-nodule",
                "6",
                "--seed",
                "3",
            ],
            d,
        );
    }
    check("build-dataset", "manifest_a.jsonl", "manifest_b.jsonl");

    for tag in ["a", "b"] {
        run_cli(
            &[
                "--deterministic",
                "train",
                "--manifest",
                "manifest_a.jsonl",
                "--arch",
                "rectnet-desk",
                "--out",
                &format!("model_{tag}.rctn"),
                "--log",
                &format!("log_{tag}.csv"),
                "--pretrain-epochs",
                "1",
                "--epochs",
                "1",
                "--batch-size",
                "32",
                "--seed",
                "9",
            ],
            d,
        );
    }
    check("train checkpoint", "model_a.rctn", "model_b.rctn");
    check("train log", "log_a.csv", "log_b.csv");

    for tag in ["a", "b"] {
        run_cli(
            &[
                "--deterministic",
                "detect",
                "--volume",
                "vol.json",
                "--model",
                "model_a.rctn",
                "--out",
                &format!("det_{tag}.json"),
            ],
            d,
        );
    }
    check("detect", "det_a.json", "det_b.json");

    for tag in ["a", "b"] {
        run_cli(
            &[
                "--deterministic",
                "eval",
                "--detections",
                "det_a.json",
                "--truth",
                "vol.nodules.json",
                "--froc",
                &format!("froc_{tag}.csv"),
                "--strata",
                &format!("strata_{tag}.csv"),
            ],
            d,
        );
    }
    check("eval froc", "froc_a.csv", "froc_b.csv");
    check("eval strata", "strata_a.csv", "strata_b.csv");

    let ok = identical.iter().all(|(_, same)| *same);
    let detail: Vec<String> = identical
        .iter()
        .map(|(label, same)| format!("{label}: {}", if *same { "identical" } else { "DIFFER" }))
        .collect();
    report(8, "cli determinism", ok, &detail.join(", "));
}

// ---------------------------------------------------------------------------
// 9. Format round trips
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_format_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut volume_ok = 0;
    let mut mask_ok = 0;
    let mut annotation_ok = 0;
    let mut checkpoint_ok = 0;

    for case in 0..100 {
        let dims = (
            rng.gen_range(1..10usize),
            rng.gen_range(1..10usize),
            rng.gen_range(1..6usize),
        );
        let spacing = (
            rng.gen_range(0.5..2.0),
            rng.gen_range(0.5..2.0),
            rng.gen_range(0.5..4.0),
        );
        let n = dims.0 * dims.1 * dims.2;

        let data: Vec<i16> = (0..n).map(|_| rng.gen_range(-1024..=3071)).collect();
        let volume = Volume::new(dims, spacing, data).unwrap();
        let path = dir.path().join(format!("v{case}.json"));
        write_volume(&volume, &path).unwrap();
        volume_ok += usize::from(read_volume(&path).unwrap() == volume);

        let bools: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let mask = BinaryMask::from_data(dims, spacing, bools).unwrap();
        let path = dir.path().join(format!("m{case}.json"));
        write_mask(&mask, &path).unwrap();
        mask_ok += usize::from(read_mask(&path).unwrap() == mask);

        let annotations: Vec<NoduleAnnotation> = (0..rng.gen_range(1..4usize))
            .map(|id| {
                let mut voxels: Vec<(usize, usize, usize)> = (0..rng.gen_range(1..30usize))
                    .map(|_| {
                        (
                            rng.gen_range(0..40usize),
                            rng.gen_range(0..40usize),
                            rng.gen_range(0..8usize),
                        )
                    })
                    .collect();
                voxels.sort_by_key(|&(x, y, z)| (z, y, x));
                voxels.dedup();
                let readers = rng.gen_range(1..=4usize);
                NoduleAnnotation {
                    id,
                    voxels,
                    subtlety: (0..readers).map(|_| rng.gen_range(1.0..5.0)).collect(),
                    malignancy: (0..readers).map(|_| rng.gen_range(1.0..5.0)).collect(),
                    agreement_level: readers as u8,
                }
            })
            .collect();
        let path = dir.path().join(format!("a{case}.nodules.json"));
        write_annotations(&annotations, &path).unwrap();
        annotation_ok += usize::from(read_annotations(&path).unwrap() == annotations);

        let shapes: Vec<Vec<usize>> = (0..rng.gen_range(1..4usize))
            .map(|_| vec![rng.gen_range(1..5usize), rng.gen_range(1..5usize)])
            .collect();
        let payloads: Vec<Vec<f32>> = shapes
            .iter()
            .map(|s| {
                (0..s.iter().product::<usize>())
                    .map(|_| rng.gen_range(-10.0..10.0))
                    .collect()
            })
            .collect();
        let tensors: Vec<(String, Vec<usize>, &[f32])> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("t{i}"), s.clone(), payloads[i].as_slice()))
            .collect();
        let meta = rectnet::neural::checkpoint::CheckpointMeta {
            model: serde_json::json!({"case": case}),
            tensors: tensors
                .iter()
                .map(|(n, s, _)| rectnet::neural::checkpoint::TensorInfo {
                    name: n.clone(),
                    shape: s.clone(),
                })
                .collect(),
        };
        let path = dir.path().join(format!("c{case}.rctn"));
        rectnet::neural::checkpoint::save(&path, &meta, &tensors).unwrap();
        let loaded = rectnet::neural::checkpoint::load(&path).unwrap();
        let flat: Vec<f32> = payloads.iter().flatten().copied().collect();
        let bits_equal = loaded.payload.len() == flat.len()
            && loaded
                .payload
                .iter()
                .zip(flat.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        checkpoint_ok += usize::from(bits_equal && loaded.meta.model == meta.model);
    }

    let ok = volume_ok == 100 && mask_ok == 100 && annotation_ok == 100 && checkpoint_ok == 100;
    report(
        9,
        "format round trips",
        ok,
        &format!(
            "volumes {volume_ok}/100, masks {mask_ok}/100, annotations \
             {annotation_ok}/100, checkpoints {checkpoint_ok}/100"
        ),
    );
}
