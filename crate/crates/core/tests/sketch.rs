use proptest::prelude::*;
use s2m::sketch::{
    blur_sketch, mask_to_sketch, simulate_membrane_mask, simulate_nuclei_mask, SimParams, Sketch, SketchStyle,
};
use s2m::tensor::{ImageTensor, LabelMask, ValueRange};

fn params(shape: &[usize], count: (usize, usize)) -> SimParams {
    SimParams {
        image_shape: shape.to_vec(),
        instance_count: count,
        ..SimParams::default()
    }
}

fn sketch_of(shape: &[usize], data: Vec<f64>) -> Sketch {
    Sketch {
        intensity: ImageTensor::new(shape.to_vec(), data, ValueRange::Unit).unwrap(),
        style: SketchStyle::Nuclei,
        sigma_applied: 0.0,
    }
}

#[test]
fn zero_instances_give_background() {
    let s = simulate_nuclei_mask(&params(&[32, 32], (0, 0))).unwrap();
    assert_eq!(s.mask.foreground_count(), 0);
    assert_eq!(s.placed, 0);
}

#[test]
fn single_circle_area_matches_rasterized_disc() {
    let p = SimParams {
        radius: (5.0, 5.0),
        eccentricity: (1.0, 1.0),
        ..params(&[48, 48], (1, 1))
    };
    for seed in 0..10 {
        let s = simulate_nuclei_mask(&p.with_seed(seed)).unwrap();
        assert_eq!(s.mask.instance_ids(), vec![1]);
        let area = s.mask.foreground_count() as f64;
        // disc of radius 5 sampled on the pixel grid: 81 pixels at integer centres
        let disc = (-5i32..=5)
            .flat_map(|y| (-5i32..=5).map(move |x| (x, y)))
            .filter(|&(x, y)| x * x + y * y <= 25)
            .count() as f64;
        let target = std::f64::consts::PI * 25.0;
        assert!((area - target).abs() <= 0.1 * target, "seed {seed}: area {area}");
        assert!((disc - target).abs() <= 0.1 * target);
    }
}

#[test]
fn nuclei_are_deterministic_and_disjoint_by_label() {
    let p = params(&[64, 64], (6, 12)).with_seed(42);
    let a = simulate_nuclei_mask(&p).unwrap();
    assert_eq!(a, simulate_nuclei_mask(&p).unwrap());
    let ids = a.mask.instance_ids();
    assert_eq!(ids, (1..=a.placed as u16).collect::<Vec<_>>());
}

#[test]
fn overfull_field_reports_under_placement() {
    let p = SimParams {
        radius: (7.0, 7.0),
        max_attempts: 20,
        ..params(&[24, 24], (30, 30))
    };
    let s = simulate_nuclei_mask(&p).unwrap();
    assert!(s.under_placed());
    assert!(s.placed < 30 && s.placed >= 1);
}

#[test]
fn single_membrane_seed_covers_the_field() {
    let s = simulate_membrane_mask(&params(&[20, 30], (1, 1))).unwrap();
    assert!(s.mask.labels().iter().all(|&l| l == 1));
}

#[test]
fn membrane_regions_partition_the_field() {
    for k in [2usize, 7, 25] {
        let s = simulate_membrane_mask(&params(&[128, 128], (k, k)).with_seed(k as u64)).unwrap();
        assert!(s.mask.labels().iter().all(|&l| l > 0));
        assert_eq!(s.mask.instance_count(), k);
        assert_eq!(s, simulate_membrane_mask(&params(&[128, 128], (k, k)).with_seed(k as u64)).unwrap());
    }
}

#[test]
fn background_only_sketch_is_constant() {
    let mask = LabelMask::background(&[8, 8]).unwrap();
    let p = SimParams {
        background: (0.05, 0.05),
        ..SimParams::default()
    };
    let s = mask_to_sketch(&mask, SketchStyle::Nuclei, &p, 0).unwrap();
    assert!(s.intensity.data().iter().all(|&v| v == 0.05));
}

#[test]
fn nuclei_sketch_levels_follow_the_mask_exactly() {
    let mut labels = vec![0u16; 100];
    for y in 3..7 {
        for x in 2..6 {
            labels[y * 10 + x] = 1;
        }
    }
    let mask = LabelMask::new(vec![10, 10], labels.clone()).unwrap();
    let p = SimParams {
        foreground: (0.8, 0.8),
        background: (0.1, 0.1),
        ..SimParams::default()
    };
    let s = mask_to_sketch(&mask, SketchStyle::Nuclei, &p, 9).unwrap();
    for (v, l) in s.intensity.data().iter().zip(&labels) {
        assert_eq!(*v, if *l == 1 { 0.8 } else { 0.1 });
    }
    assert_eq!(mask.labels(), &labels[..]);
}

#[test]
fn membrane_band_is_the_four_neighbour_boundary() {
    let (h, w) = (12usize, 15usize);
    let labels: Vec<u16> = (0..h * w).map(|i| if (i % w) + (i / w) / 3 < 8 { 1 } else { 2 }).collect();
    let mask = LabelMask::new(vec![h, w], labels.clone()).unwrap();
    let p = SimParams {
        foreground: (0.9, 0.9),
        background: (0.2, 0.2),
        membrane_thickness: 1,
        ..SimParams::default()
    };
    let s = mask_to_sketch(&mask, SketchStyle::Membrane, &p, 0).unwrap();
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            let mut edge = false;
            for (dy, dx) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
                let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    edge |= labels[yy as usize * w + xx as usize] != l;
                }
            }
            let v = s.intensity.data()[y * w + x];
            assert_eq!(v, if edge { 0.9 } else { 0.2 }, "pixel ({y}, {x})");
        }
    }
}

#[test]
fn blur_zero_is_identity_and_negative_is_rejected() {
    let data: Vec<f64> = (0..36).map(|i| (i % 7) as f64 / 7.0).collect();
    let s = sketch_of(&[6, 6], data);
    assert_eq!(blur_sketch(&s, 0.0).unwrap(), s);
    assert!(blur_sketch(&s, -0.5).is_err());
}

#[test]
fn blurred_impulse_matches_explicit_kernel() {
    let mut data = vec![0.0; 33 * 33];
    data[16 * 33 + 16] = 1.0;
    let out = blur_sketch(&sketch_of(&[33, 33], data), 1.0).unwrap();
    let taps: Vec<f64> = (-3i32..=3).map(|k| (-(k * k) as f64 / 2.0).exp()).collect();
    let norm: f64 = taps.iter().sum();
    for dy in -3i32..=3 {
        for dx in -3i32..=3 {
            let expect = taps[(dy + 3) as usize] * taps[(dx + 3) as usize] / (norm * norm);
            let got = out.intensity.data()[(16 + dy) as usize * 33 + (16 + dx) as usize];
            assert!((got - expect).abs() < 1e-10, "offset ({dy}, {dx})");
        }
    }
    assert_eq!(out.intensity.data()[16 * 33 + 20], 0.0);
}

#[test]
fn blur_keeps_constant_fields() {
    let s = sketch_of(&[9, 11], vec![0.37; 99]);
    for sigma in [0.5, 1.0, 2.5, 6.0] {
        let out = blur_sketch(&s, sigma).unwrap();
        assert!(out.intensity.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }
}

#[test]
fn blur_works_on_volumes() {
    let mut data = vec![0.0; 5 * 8 * 8];
    data[2 * 64 + 4 * 8 + 4] = 1.0;
    let out = blur_sketch(&sketch_of(&[5, 8, 8], data), 0.7).unwrap();
    let total: f64 = out.intensity.data().iter().sum();
    assert!((total - 1.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn blur_conserves_the_mean(seed in any::<u64>(), h in 4usize..20, w in 4usize..20, sigma in 0.3f64..2.0) {
        let mut r = s2m::rng::seeded(seed);
        let data: Vec<f64> = (0..h * w).map(|_| rand::Rng::random_range(&mut r, 0.0..1.0)).collect();
        let before = data.iter().sum::<f64>() / data.len() as f64;
        let out = blur_sketch(&sketch_of(&[h, w], data), sigma).unwrap();
        let after = out.intensity.data().iter().sum::<f64>() / out.intensity.len() as f64;
        prop_assert!((before - after).abs() < 1e-6);
    }

    #[test]
    fn nuclei_sketch_support_equals_mask_support(seed in any::<u64>()) {
        let p = SimParams { background: (0.0, 0.0), foreground: (0.3, 0.9), ..params(&[32, 32], (1, 5)) }.with_seed(seed);
        let mask = simulate_nuclei_mask(&p).unwrap().mask;
        let s = mask_to_sketch(&mask, SketchStyle::Nuclei, &p, seed).unwrap();
        for (v, l) in s.intensity.data().iter().zip(mask.labels()) {
            prop_assert_eq!(*v > 0.0, *l > 0);
        }
    }
}
