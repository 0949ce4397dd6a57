use margin_calib::bound::{brute_force_allocation, evaluate_epsilon, scaling_check, BoundConfig};
use margin_calib::losses::{rho_margin_objective, LossKind, ScoreBatch};
use margin_calib::margins::{compute_margins, verify_corollary_ratios};
use margin_calib::metrics::{lower_bound_report, BoundScope};
use margin_calib::segdata::{
    accumulate_stats, generate_synthetic, read_mask_pgm, write_mask_pgm, LabelStats, MaskBatch, SynthConfig,
};
use margin_calib::trainer::{train, PixelMLP, TrainConfig};
use margin_calib::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn mask_file_bytes_are_stable() {
    let data = generate_synthetic(&SynthConfig::new(0, 64, 64, 1, vec![0.9, 0.07, 0.03], 0.1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mask.pgm");
    write_mask_pgm(&data.masks, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(
        hex(&Sha256::digest(&bytes)),
        "b4e81c86ef61a32dc368b5eb58e664e7a5f3050df87c947a6ca0d666f694089f"
    );
    assert_eq!(read_mask_pgm(&path).unwrap().labels, data.masks.labels);
}

#[test]
fn robotic_split_frequencies() {
    let counts = [912_000usize, 49_000, 14_000, 16_000, 9_000];
    let mut labels = Vec::with_capacity(1_000_000);
    for (k, &c) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(k as u8, c));
    }
    // Interleave so the counts do not depend on contiguous runs.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    let mask = MaskBatch::new(labels, 1000, 1000, 1).unwrap();
    let st = accumulate_stats(&[mask], 5).unwrap();
    assert_eq!(st.n_total, 1_000_000);
    for (p, want) in st.p_per_class.iter().zip([0.912, 0.049, 0.014, 0.016, 0.009]) {
        assert!((p - want).abs() <= 1e-12);
    }
}

#[test]
fn doubling_the_data_follows_the_offset_formula() {
    let data = generate_synthetic(&SynthConfig::new(9, 32, 32, 10, vec![0.8, 0.15, 0.05], 0.1)).unwrap();
    let once = accumulate_stats(std::slice::from_ref(&data.masks), 3).unwrap();
    let twice = accumulate_stats(&[data.masks.clone(), data.masks.clone()], 3).unwrap();
    assert_eq!(twice.n_total, 2 * once.n_total);
    assert_eq!(twice.p_per_class, once.p_per_class);
    let a = compute_margins(&once, 10.0, 1.0).unwrap();
    let b = compute_margins(&twice, 10.0, 1.0).unwrap();
    for k in 0..3 {
        // rho_0k = tau sqrt(N - N_k) / N_k shrinks by sqrt(2).
        assert!((b.rho_0k[k] * 2f64.sqrt() - a.rho_0k[k]).abs() <= 1e-12 * a.rho_0k[k]);
        let n = twice.n_total as f64;
        let n_k = twice.n_per_class[k] as f64;
        let p = twice.p_per_class[k];
        let mu = p * n_k.sqrt() / ((n - n_k) - p * (n - n_k).sqrt());
        assert!((b.mu_k[k] - mu).abs() <= 1e-12 * mu);
    }
}

#[test]
fn lower_bound_sandwich_over_seeds() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..1000).map(|_| rng.random_range(0..3u8)).collect();
        let scores: Vec<f64> = (0..3000).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y = MaskBatch::from_labels(labels);
        let s = ScoreBatch::new(scores, 1000, 3).unwrap();
        let st = accumulate_stats(std::slice::from_ref(&y), 3).unwrap();
        let m = compute_margins(&st, 10.0, 1.0).unwrap();
        let r = lower_bound_report(&s, &y, &m, &st, BoundScope::Batch).unwrap();
        let lb = r.lower.unwrap();
        assert!(lb.sandwich_holds, "seed {seed}");
        for k in 0..3 {
            assert!(r.p_k0[k] <= lb.l_k0[k] && r.p_0k[k] <= lb.l_0k[k]);
            assert!(lb.iou_lower_per_class[k] <= r.iou_per_class[k]);
        }
    }
}

fn config(counts: Vec<u64>, tau: f64, m_pixels: u64, c_theta: f64) -> BoundConfig {
    let stats = LabelStats::from_counts(counts).unwrap();
    let margins = compute_margins(&stats, tau, 1.0).unwrap();
    BoundConfig {
        stats,
        margins,
        m_pixels,
        eta: 0.05,
        c_theta,
    }
}

#[test]
fn ten_class_balanced_config_at_default_tau_is_vacuous() {
    // Validity needs tau > 4 K F here, far above the default of 10.
    let cfg = config(vec![10_000_000; 10], 10.0, 1 << 16, 10.0);
    assert!(matches!(evaluate_epsilon(&cfg), Err(Error::VacuousBound)));
}

#[test]
fn ten_class_balanced_config_golden() {
    let cfg = config(vec![10_000_000; 10], 1e4, 1 << 16, 10.0);
    let r = evaluate_epsilon(&cfg).unwrap();
    assert!(r.all_valid());
    assert!(r.eps.is_finite() && r.eps > 0.0);
    assert!(
        (r.eps - GOLDEN_TEN_CLASS_EPS).abs() <= 1e-9 * GOLDEN_TEN_CLASS_EPS,
        "{:.17e}",
        r.eps
    );
}

// Evaluated independently at 40 significant digits.
const GOLDEN_TEN_CLASS_EPS: f64 = 700361.314286306;

#[test]
fn closed_form_point_matches_offsets() {
    for counts in [vec![90_000_000u64, 10_000_000], vec![90_000_000, 7_000_000, 3_000_000]] {
        let cfg = config(counts.clone(), 200.0, 4096, 1.0);
        let budget: f64 = cfg.margins.rho_0k.iter().sum();
        let res = if counts.len() == 2 { 1000 } else { 100 };
        let search = brute_force_allocation(&cfg, budget, res).unwrap();
        let direct = evaluate_epsilon(&cfg).unwrap().eps;
        assert!((search.closed_form_eps - direct).abs() <= 1e-12 * direct);
        for (a, b) in search.closed_form_rho.iter().zip(&cfg.margins.rho_0k) {
            assert!((a - b).abs() <= 1e-12 * b);
        }
        assert!(search.closed_form_dominates);
    }
}

#[test]
fn offsets_dominate_grid_for_random_large_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    for _ in 0..20 {
        let minority = rng.random_range(1_000_000..30_000_000u64);
        let cfg = config(
            vec![100_000_000 - minority, minority],
            200.0,
            4096,
            rng.random_range(0.0..2.0),
        );
        assert!(verify_corollary_ratios(&cfg.margins, &cfg.stats).holds);
        let budget: f64 = cfg.margins.rho_0k.iter().sum();
        match brute_force_allocation(&cfg, budget, 500) {
            Ok(s) => {
                assert!(s.closed_form_dominates, "{s:?}");
                checked += 1;
            }
            Err(Error::Search(_)) => {}
            Err(e) => panic!("{e}"),
        }
    }
    assert!(checked >= 10);
}

#[test]
fn gap_shrinks_along_the_scale_sweep() {
    let cfg = config(vec![90_000_000, 7_000_000, 3_000_000], 50.0, 4096, 0.1);
    let mut last = evaluate_epsilon(&cfg).unwrap().eps;
    for c in [2.0, 4.0, 8.0, 10.0] {
        let out = scaling_check(&cfg, c).unwrap();
        assert_eq!(out.decreased, Some(true));
        let now = out.eps_after.unwrap();
        assert!(now < last, "c={c}: {now} >= {last}");
        last = now;
    }
}

#[test]
fn large_complexity_reverses_the_scale_trend() {
    // With recomputed offsets the gap grows with N once C(Theta) dominates sigma.
    let cfg = config(vec![90_000_000, 10_000_000], 50.0, 4096, 1.0);
    let out = scaling_check(&cfg, 2.0).unwrap();
    assert_eq!(out.decreased, Some(false));
}

#[test]
fn margin_calibration_training_makes_progress() {
    let data = generate_synthetic(&SynthConfig::new(100, 64, 64, 200, vec![0.9, 0.07, 0.03], 0.15)).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        eval_every: 1,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train(PixelMLP::new_seeded(8, 16, 3, 3, 1.0), &data, None, &cfg).unwrap();
    let log = &out.log.records;
    assert_eq!(log.len(), 50);
    assert!(log.windows(2).all(|w| w[0].epoch < w[1].epoch));
    assert!(log[49].train_loss < log[0].train_loss);
    // Offsets come from the training split alone.
    assert_eq!(
        out.margins.unwrap(),
        compute_margins(&data.stats(3).unwrap(), 10.0, 1.0).unwrap()
    );
}

#[test]
fn separable_task_drives_rho_objective_down() {
    let data = generate_synthetic(&SynthConfig::new(5, 32, 32, 20, vec![0.8, 0.15, 0.05], 0.0)).unwrap();
    let cfg = TrainConfig {
        loss: LossKind::MarginCalibration,
        epochs: 200,
        eval_every: 200,
        batch_images: 4,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train(PixelMLP::new_seeded(8, 32, 3, 1, 1.0), &data, None, &cfg).unwrap();
    let scores = out.model.forward(&data.features).unwrap();
    let objective = rho_margin_objective(&scores, &data.masks, out.margins.as_ref().unwrap())
        .unwrap()
        .value;
    assert!(objective < 0.05, "objective {objective}");
}
