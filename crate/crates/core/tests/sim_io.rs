use pointsup::dataset::{BboxSource, Dataset, ImageInfo, InstanceRecord};
use pointsup::mask::{boundary_distance, rasterize_polygon, rle_decode, rle_encode, Bitmask, BoundingBox};
use pointsup::sim::{
    flip_count, inject_label_noise, keyed_rng, near_boundary_pixels, sample_boundary_biased, sample_uniform_points,
    simulate_dataset, BoundaryBias, NoiseConfig, NoiseMode, PointAnnotationFile,
};
use pointsup::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Even-odd ray cast to +x from `(x, y)`.
fn inside(rings: &[Vec<[f64; 2]>], x: f64, y: f64) -> bool {
    let mut hit = false;
    for ring in rings {
        for i in 0..ring.len() {
            let [x0, y0] = ring[i];
            let [x1, y1] = ring[(i + 1) % ring.len()];
            if (y0 > y) != (y1 > y) {
                let t = (y - y0) / (y1 - y0);
                if x0 + t * (x1 - x0) > x {
                    hit = !hit;
                }
            }
        }
    }
    hit
}

#[test]
fn rasterizer_matches_brute_force_point_in_polygon() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (w, h) = (12, 10);
    for _ in 0..100 {
        let n_rings = if rng.random_bool(0.2) { 2 } else { 1 };
        let rings: Vec<Vec<[f64; 2]>> = (0..n_rings)
            .map(|_| {
                (0..rng.random_range(3..9))
                    .map(|_| [rng.random_range(-1.0..13.0), rng.random_range(-1.0..11.0)])
                    .collect()
            })
            .collect();
        let r = rasterize_polygon(&rings, w, h).unwrap();
        let oracle = Bitmask::from_fn(w, h, |c, row| inside(&rings, c as f64 + 0.5, row as f64 + 0.5));
        assert_eq!(r.mask, oracle, "{rings:?}");
    }
}

#[test]
fn rle_round_trips_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
        let p = rng.random_range(0.0..1.0);
        let m = Bitmask::from_fn(w, h, |_, _| rng.random_bool(p));
        let rle = rle_encode(&m);
        assert_eq!(rle.counts.iter().sum::<u64>(), (w * h) as u64);
        assert_eq!(rle_decode(&rle).unwrap(), m);
        let json = serde_json::to_string(&rle).unwrap();
        assert_eq!(rle_decode(&serde_json::from_str(&json).unwrap()).unwrap(), m);
    }
}

fn toy_dataset(n: usize) -> Dataset {
    let mut images = Vec::new();
    let mut instances = Vec::new();
    for i in 0..n as u64 {
        let cx = 10.0 + (i % 5) as f64 * 4.0;
        let ring = vec![[cx - 6.0, 5.0], [cx + 7.0, 8.0], [cx + 2.0, 27.0], [cx - 5.0, 20.0]];
        let mask = rasterize_polygon(&[ring], 40, 32).unwrap().mask;
        images.push(ImageInfo {
            id: i,
            file_name: format!("{i}.png"),
            width: 40,
            height: 32,
        });
        instances.push(InstanceRecord {
            instance_id: 100 + i,
            image_id: i,
            category: "thing".into(),
            bbox: BoundingBox::new(0.0, 0.0, 40.0, 32.0).unwrap(),
            bbox_source: BboxSource::Given,
            mask,
        });
    }
    Dataset {
        id: "toy".into(),
        images,
        instances,
    }
}

#[test]
fn annotation_file_round_trips_bit_exactly() {
    let ds = toy_dataset(6);
    let sim = simulate_dataset(&ds, 10, 3, None, Exec::Sequential).unwrap();
    let text = sim.file.to_json().unwrap();
    let back = PointAnnotationFile::from_json(&text).unwrap();
    assert_eq!(back, sim.file);
    assert_eq!(back.to_annotations(), sim.annotations);
    // bit-level float identity
    for (a, b) in back.to_annotations().iter().zip(&sim.annotations) {
        for (p, q) in a.points.iter().zip(&b.points) {
            assert_eq!(p.x.to_bits(), q.x.to_bits());
            assert_eq!(p.y.to_bits(), q.y.to_bits());
        }
    }
    assert_eq!(back.to_json().unwrap(), text);
}

#[test]
fn simulation_is_order_and_exec_independent() {
    let ds = toy_dataset(7);
    let a = simulate_dataset(&ds, 5, 9, None, Exec::Sequential).unwrap();
    let b = simulate_dataset(&ds, 5, 9, None, Exec::Parallel).unwrap();
    assert_eq!(a.annotations, b.annotations);
    assert_eq!(a.annotations.iter().map(|x| x.points.len()).sum::<usize>(), 35);
}

#[test]
fn noise_flips_exact_count_and_boundary_prefix() {
    let ds = toy_dataset(8);
    let clean = simulate_dataset(&ds, 25, 4, None, Exec::Sequential).unwrap().annotations;
    let total: usize = clean.iter().map(|a| a.points.len()).sum();
    let expected = (0.05 * total as f64).floor() as usize;
    assert_eq!(flip_count(0.05, total), expected);

    for mode in [NoiseMode::Random, NoiseMode::Boundary] {
        let noisy = inject_label_noise(&clean, &ds.instances, 0.05, mode, 4).unwrap();
        let changed: usize = clean
            .iter()
            .zip(&noisy.annotations)
            .map(|(a, b)| a.points.iter().zip(&b.points).filter(|(p, q)| p.label != q.label).count())
            .sum();
        assert_eq!(changed, expected, "{mode:?}");
        assert_eq!(noisy.flipped.len(), expected);
    }

    // oracle: sort every point by its distance, then (instance id, index)
    let mut keyed = Vec::new();
    for a in &clean {
        let inst = ds.instances.iter().find(|i| i.instance_id == a.instance_id).unwrap();
        let field = boundary_distance(&inst.mask);
        for (k, p) in a.points.iter().enumerate() {
            let d = field.get(p.x.floor() as usize, p.y.floor() as usize);
            keyed.push((d, a.instance_id, k));
        }
    }
    keyed.sort_by(|l, r| l.0.total_cmp(&r.0).then(l.1.cmp(&r.1)).then(l.2.cmp(&r.2)));
    let mut want: Vec<(u64, usize)> = keyed[..expected].iter().map(|&(_, id, k)| (id, k)).collect();
    let noisy = inject_label_noise(&clean, &ds.instances, 0.05, NoiseMode::Boundary, 4).unwrap();
    let mut got = noisy.flipped.clone();
    want.sort_unstable();
    got.sort_unstable();
    assert_eq!(got, want);

    let via_sim = simulate_dataset(
        &ds,
        25,
        4,
        Some(NoiseConfig {
            mode: NoiseMode::Boundary,
            rate: 0.05,
        }),
        Exec::Sequential,
    )
    .unwrap();
    assert_eq!(via_sim.annotations, noisy.annotations);
    assert_eq!(via_sim.file.meta.noise_rate, 0.05);
}

/// Pearson chi-square over a 10x10 grid of equal cells.
#[test]
fn uniform_sampler_passes_chi_square() {
    let bbox = BoundingBox::new(3.5, 7.25, 40.0, 12.0).unwrap();
    let mut rng = keyed_rng(5, 1, 2);
    let n = 20_000;
    let pts = sample_uniform_points(&bbox, n, &mut rng).unwrap();
    let mut counts = [0usize; 100];
    for (x, y) in pts {
        assert!(x >= bbox.x && x < bbox.right() && y >= bbox.y && y < bbox.bottom());
        let i = (((x - bbox.x) / bbox.w * 10.0) as usize).min(9);
        let j = (((y - bbox.y) / bbox.h * 10.0) as usize).min(9);
        counts[j * 10 + i] += 1;
    }
    let e = n as f64 / 100.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    // 99 degrees of freedom, p = 0.001
    assert!(chi2 < 148.2, "chi2 = {chi2}");
}

#[test]
fn boundary_mixture_fractions() {
    let ds = toy_dataset(1);
    let inst = ds.instances[0].with_derived_bbox().unwrap();
    let field = boundary_distance(&inst.mask);
    let near = near_boundary_pixels(&field, &inst.bbox, 2.0);
    let near_set: std::collections::HashSet<_> = near.iter().copied().collect();
    let near_share = near.len() as f64 / inst.bbox.area();
    let n = 20_000;
    for (bias, name) in [(BoundaryBias::mild(), "mild"), (BoundaryBias::heavy(), "heavy")] {
        let mut rng = keyed_rng(8, 0, 0);
        let s = sample_boundary_biased(&inst, n, bias, &mut rng).unwrap();
        assert!(!s.fell_back);
        let hits = s
            .points
            .iter()
            .filter(|(x, y)| near_set.contains(&(x.floor() as usize, y.floor() as usize)))
            .count() as f64
            / n as f64;
        let expected = bias.beta + (1.0 - bias.beta) * near_share;
        let sd = (expected * (1.0 - expected) / n as f64).sqrt().max(1e-9);
        assert!((hits - expected).abs() < 5.0 * sd + 1e-12, "{name}: {hits} vs {expected}");
    }
}
