use ads3d::eegio::EpochSet;
use ads3d::montage::MontageMap;
use ads3d::stats::*;
use ads3d::synthgen::{default_paper_template, generate, SynthConfig};
use proptest::prelude::*;

fn null_config(seed: u64) -> SynthConfig {
    SynthConfig {
        n_trials_per_class: 10,
        fs: 250.0,
        trial_s: 1.5,
        window_onset_s: 0.25,
        window_s: 1.0,
        line_uv: 0.0,
        effects: Vec::new(),
        channel_names: ["O1", "Oz", "O2", "Fp1"].iter().map(|s| s.to_string()).collect(),
        seed,
        ..default_paper_template()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn paired_t_ignores_common_affine_maps(
        a in prop::collection::vec(-10.0f64..10.0, 3..20),
        noise in prop::collection::vec(-1.0f64..1.0, 20),
        k in 0.1f64..10.0,
        c in -100.0f64..100.0,
    ) {
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, n)| x * 0.5 + n).collect();
        let base = paired_ttest(&a, &b);
        let ka: Vec<f64> = a.iter().map(|v| k * v + c).collect();
        let kb: Vec<f64> = b.iter().map(|v| k * v + c).collect();
        if let Ok(r) = base {
            let s = paired_ttest(&ka, &kb).unwrap();
            prop_assert!((s.t - r.t).abs() <= 1e-9 * r.t.abs().max(1.0));
            prop_assert!((s.p - r.p).abs() <= 1e-9);
            let swapped = paired_ttest(&b, &a).unwrap();
            prop_assert_eq!(swapped.t, -r.t);
            prop_assert!((0.0..=1.0).contains(&r.p));
        }
    }

    #[test]
    fn bonferroni_is_monotone(p in prop::collection::vec(0.0f64..=1.0, 1..70)) {
        let m = p.len();
        let c = bonferroni(&p, m);
        for (raw, cor) in p.iter().zip(&c) {
            prop_assert!(cor >= raw && *cor <= 1.0);
        }
        prop_assert_eq!(bonferroni(&p, 1), p);
    }

    #[test]
    fn anova_sums_of_squares_add_up(
        a in 2usize..4, b in 2usize..5, n in 2usize..5,
        values in prop::collection::vec(-50.0f64..50.0, 80),
    ) {
        let mut it = values.iter().cycle();
        let power: Vec<Vec<Vec<f64>>> = (0..a)
            .map(|i| (0..b).map(|j| (0..n).map(|r| it.next().unwrap() + (i * 3 + j + r) as f64).collect()).collect())
            .collect();
        let t = two_way_anova(&power).unwrap();
        let sum = t.class.ss + t.channel.ss + t.interaction.ss + t.ss_error;
        prop_assert!((sum - t.ss_total).abs() <= 1e-9 * t.ss_total.max(1e-300));
        for e in [t.class, t.channel, t.interaction] {
            prop_assert!((0.0..=1.0).contains(&e.p));
        }
    }

    #[test]
    fn welch_is_non_negative(x in prop::collection::vec(-1e3f64..1e3, 250..800)) {
        let (_, p) = welch_psd(&x, 250.0, 250, 0.5).unwrap();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn null_data_controls_family_wise_errors() {
    let cfg = ContrastConfig::default();
    let runs = 1000;
    let mut false_positives = 0;
    for seed in 0..runs {
        let set = generate(&null_config(seed)).unwrap();
        let r = contrast_topography(&set, 0, 3, &BandSpec::alpha(), &cfg).unwrap();
        false_positives += r.mask.iter().filter(|&&m| m).count();
    }
    // Bonferroni bounds the expected count per run by alpha.
    let mean = cfg.alpha * runs as f64;
    let limit = mean + 3.0 * (mean * (1.0 - cfg.alpha)).sqrt();
    assert!((false_positives as f64) <= limit, "{false_positives} > {limit}");
}

#[test]
fn identical_classes_give_an_empty_mask() {
    let set = generate(&null_config(1)).unwrap();
    let mut copy = set.clone();
    let n = copy.trial_len();
    // Overwrite every class-3 trial with the matching class-0 trial.
    let zeros = copy.class_trials(0);
    for (k, &t3) in copy.class_trials(3).iter().enumerate() {
        let src = set.trial(zeros[k]).to_vec();
        copy.data[t3 * n..(t3 + 1) * n].copy_from_slice(&src);
    }
    let r = contrast_topography(&copy, 0, 3, &BandSpec::both(), &ContrastConfig::default()).unwrap();
    assert!(r.t.iter().all(|&t| t == 0.0));
    assert!(r.mask.iter().all(|&m| !m));
    assert!(contrast_topography(&set, 0, 3, &BandSpec::new("hi", 100.0, 200.0).unwrap(), &Default::default()).is_err());
}

#[test]
fn contrast_is_antisymmetric_and_uses_shortest_class() {
    let mut set = generate(&null_config(2)).unwrap();
    let ab = contrast_topography(&set, 1, 2, &BandSpec::beta(), &Default::default()).unwrap();
    let ba = contrast_topography(&set, 2, 1, &BandSpec::beta(), &Default::default()).unwrap();
    for (x, y) in ab.t.iter().zip(&ba.t) {
        assert_eq!(*x, -*y);
    }
    assert_eq!(ab.n_pairs, 10);

    // Drop the last class-2 trial: pairing truncates to 9.
    let keep: Vec<usize> = (0..set.n_trials).filter(|&t| t != 38).collect();
    assert_eq!(set.labels[38], 2);
    let n = set.trial_len();
    set.data = keep.iter().flat_map(|&t| set.trial(t).to_vec()).collect();
    set.labels = keep.iter().map(|&t| set.labels[t]).collect();
    let set = EpochSet::new(set.fs, set.channel_names.clone(), n / set.n_channels, set.labels, set.data).unwrap();
    assert_eq!(contrast_topography(&set, 1, 2, &BandSpec::beta(), &Default::default()).unwrap().n_pairs, 9);
    assert!(contrast_topography(&set, 1, 7, &BandSpec::beta(), &Default::default()).is_err());
}

#[test]
fn topomap_files_follow_the_montage() {
    let map = MontageMap::reduced_4x4();
    let names = map.names().to_vec();
    let t: Vec<f64> = (0..16).map(|i| (i as f64 - 7.5) * 0.37).collect();
    let report = StatsReport {
        class_a: 0,
        class_b: 3,
        band: BandSpec::alpha(),
        n_pairs: 10,
        alpha: 0.01,
        channel_names: names.iter().rev().cloned().collect(),
        t: t.clone(),
        p_raw: vec![0.5; 16],
        p_corrected: vec![1.0; 16],
        mask: (0..16).map(|i| i % 5 == 0).collect(),
        mean_power_a: vec![1.0; 16],
        mean_power_b: vec![1.0; 16],
    };
    let dir = tempfile::tempdir().unwrap();
    let paths = export_topomap(&report, &map, &dir.path().join("alpha")).unwrap();
    let grid = read_csv_grid(&std::fs::read_to_string(&paths[0]).unwrap()).unwrap();
    let mask = read_csv_grid(&std::fs::read_to_string(&paths[1]).unwrap()).unwrap();
    let pgm = std::fs::read(&paths[2]).unwrap();
    let header = b"P5\n4 4\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    let tmax = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for r in 0..4 {
        for c in 0..4 {
            let i = report.channel_names.iter().position(|n| n == map.channel_at(r, c)).unwrap();
            let printed: f64 = format!("{:.8e}", t[i]).parse().unwrap();
            assert_eq!(grid[r][c].to_bits(), printed.to_bits());
            assert_eq!(mask[r][c] == 1.0, report.mask[i]);
            assert_eq!(pgm[header.len() + r * 4 + c], gray_level(t[i], tmax));
        }
    }

    let flat = StatsReport { t: vec![0.0; 16], ..report };
    let paths = export_topomap(&flat, &map, &dir.path().join("flat")).unwrap();
    let pgm = std::fs::read(&paths[2]).unwrap();
    assert!(pgm[header.len()..].iter().all(|&g| g == 128));
}
