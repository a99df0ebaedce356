use intra_core::imaging::GrayMap;
use intra_core::metrics::{evaluate_dataset, evaluate_pair, kld, nss, sim, EvalPair};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayMap {
    GrayMap::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
}

// Straight from the half-pixel definition, clamping the source coordinate.
fn bilinear_oracle(src: &GrayMap, out_w: usize, out_h: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, src.height, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, src.width, out_w);
            let v = src.at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + src.at(x1, y0) * fx * (1.0 - fy)
                + src.at(x0, y1) * (1.0 - fx) * fy
                + src.at(x1, y1) * fx * fy;
            out.push(v);
        }
    }
    out
}

#[test]
fn bilinear_upsample_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let src = random_map(&mut rng, 9, 7);
    let got = src.resize(224, 224);
    let want = bilinear_oracle(&src, 224, 224);
    let worst = got.data.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-5, "worst {worst}");
}

#[test]
fn nss_of_random_predictions_averages_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 32 * 32;
    let mut gt = vec![0.0; n];
    for v in gt.iter_mut().take(200) {
        *v = 1.0;
    }
    let trials = 1000;
    let mean: f64 = (0..trials)
        .map(|_| {
            let pred: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            nss(&gt, &pred).unwrap().value
        })
        .sum::<f64>()
        / trials as f64;
    assert!(mean.abs() < 0.05, "mean NSS {mean}");
}

#[test]
fn planted_prediction_beats_shuffled_control() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let side = 32;
    let mut pairs = Vec::new();
    for k in 0..8 {
        let (x0, y0) = (rng.random_range(0..side - 8), rng.random_range(0..side - 8));
        let gt: Vec<f64> = (0..side * side)
            .map(|i| f64::from((x0..x0 + 8).contains(&(i % side)) && (y0..y0 + 8).contains(&(i / side))))
            .collect();
        let pred: Vec<f64> = gt.iter().map(|g| 0.1 + 0.8 * g + 0.05 * rng.random::<f64>()).collect();
        pairs.push(EvalPair {
            id: format!("img{k}"),
            interaction: "grip".into(),
            object: "stick".into(),
            gt: GrayMap::new(side, side, gt).unwrap(),
            pred: GrayMap::new(side, side, pred).unwrap(),
        });
    }
    let planted = evaluate_dataset(&pairs).unwrap().summary;
    // pair each GT with another image's prediction
    let preds: Vec<GrayMap> = pairs.iter().map(|p| p.pred.clone()).collect();
    for (i, p) in pairs.iter_mut().enumerate() {
        p.pred = preds[(i + 3) % preds.len()].clone();
    }
    let shuffled = evaluate_dataset(&pairs).unwrap().summary;
    assert!(planted.m_kld < shuffled.m_kld);
    assert!(planted.m_sim > shuffled.m_sim);
    assert!(planted.m_nss > shuffled.m_nss);
    assert_eq!(planted.count, 8);
}

#[test]
fn empty_gt_is_a_validation_error() {
    let gt = GrayMap::new(4, 4, vec![0.0; 16]).unwrap();
    let pred = GrayMap::new(4, 4, (0..16).map(f64::from).collect()).unwrap();
    assert!(evaluate_pair(&gt, &pred).unwrap_err().is_validation());
}

#[test]
fn constant_prediction_is_flagged_not_nan() {
    let gt = GrayMap::new(4, 4, (0..16).map(|i| f64::from(i < 4)).collect()).unwrap();
    let pred = GrayMap::new(4, 4, vec![0.3; 16]).unwrap();
    let m = evaluate_pair(&gt, &pred).unwrap();
    assert!(m.pred_degenerate);
    assert!(m.kld.is_finite() && m.sim.is_finite());
    assert_eq!(m.nss, 0.0);
}

fn map_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..64).prop_flat_map(|n| (prop::collection::vec(0.0..1.0f64, n), prop::collection::vec(0.0..1.0f64, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kld_is_nonnegative((g, p) in map_strategy()) {
        prop_assert!(kld(&g, &p).unwrap() >= -1e-9);
    }

    #[test]
    fn sim_is_bounded_and_symmetric((g, p) in map_strategy()) {
        let a = sim(&g, &p).unwrap();
        let b = sim(&p, &g).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn self_comparison_is_perfect((g, _) in map_strategy()) {
        prop_assume!(g.iter().any(|v| *v > 0.0));
        prop_assert!(kld(&g, &g).unwrap().abs() < 1e-9);
        prop_assert!((sim(&g, &g).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pipeline_ignores_positive_affine_rescaling(seed in any::<u64>(), a in 0.01..100.0f64, b in -5.0..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_map(&mut rng, 12, 10);
        let pred = random_map(&mut rng, 12, 10);
        let scaled = GrayMap::new(12, 10, pred.data.iter().map(|v| a * v + b).collect()).unwrap();
        let m1 = evaluate_pair(&gt, &pred).unwrap();
        let m2 = evaluate_pair(&gt, &scaled).unwrap();
        prop_assert!((m1.kld - m2.kld).abs() < 1e-6);
        prop_assert!((m1.sim - m2.sim).abs() < 1e-6);
        prop_assert!((m1.nss - m2.nss).abs() < 1e-6);
    }
}
