//! Randomized invariants checked against brute-force oracles.

use ffs_core::datakit::{generate, parse_bin, parse_csv, to_bin_bytes, to_csv_string, DatasetSpec, FeatureRecord};
use ffs_core::evalkit::{auroc, calibrate_threshold, classify, fpr95, Decision, Histogram, ScoreSet};
use ffs_core::flow::{init_flow, FlowArch, FlowLayer, FlowModel, FlowVariant};
use ffs_core::heads::{energy_score, reg_loss_bce, total_loss, BinaryClassifier, EnergyParams, LossWeights};
use ffs_core::numerics::{finite_diff_grad, pca_top2, SeededRng};
use ffs_core::synthesis::{
    fit_class_gaussians, generate_candidates, project_from, project_step, rejection_sample, vos_plus_filter, vos_sample,
    SynthesisConfig, SynthesisMode,
};
use proptest::prelude::*;

fn random_flow(variant: FlowVariant, d: usize, seed: u64) -> FlowModel {
    let mut rng = SeededRng::new(seed);
    let arch = FlowArch { coupling_layers: 2, hidden_layers: 1, hidden_width: 8 };
    let mut m = init_flow(variant, d, arch, &mut rng).unwrap();
    let p: Vec<f64> = m.params().iter().map(|_| 0.3 * rng.normal()).collect();
    m.set_params(&p).unwrap();
    for l in &mut m.layers {
        if let FlowLayer::ActNorm(a) = l {
            a.initialized = true;
        }
    }
    m
}

fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for a in id {
        for b in ood {
            if a < b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (id.len() * ood.len()) as f64
}

fn small_ints(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-8i32..8).prop_map(f64::from), 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn finite_diff_is_exact_on_quadratics(
        d in 1usize..4,
        coef in prop::collection::vec(-10.0f64..10.0, 16 + 4 + 1),
        x in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let a = &coef[..16];
        let b = &coef[16..20];
        let c = coef[20];
        let x = &x[..d];
        let f = |v: &[f64]| -> ffs_core::Result<f64> {
            let mut s = c;
            for i in 0..d {
                s += b[i] * v[i];
                for j in 0..d {
                    s += a[i * 4 + j] * v[i] * v[j];
                }
            }
            Ok(s)
        };
        let g = finite_diff_grad(f, x, 1e-5).unwrap();
        for i in 0..d {
            let exact = b[i] + (0..d).map(|j| (a[i * 4 + j] + a[j * 4 + i]) * x[j]).sum::<f64>();
            prop_assert!((g[i] - exact).abs() <= 1e-8, "coordinate {i}: {} vs {exact}", g[i]);
        }
    }

    #[test]
    fn pca_basis_is_orthonormal(seed in any::<u64>(), n in 3usize..40, d in 2usize..6) {
        let mut rng = SeededRng::new(seed);
        let data: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|k| (k + 1) as f64 * rng.normal()).collect()).collect();
        let pca = pca_top2(&data).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        prop_assert!(dot(&pca.basis[0], &pca.basis[1]).abs() <= 1e-10);
        for b in &pca.basis {
            prop_assert!((dot(b, b).sqrt() - 1.0).abs() <= 1e-10);
        }
        prop_assert!(pca.explained[0] >= pca.explained[1]);
    }

    #[test]
    fn auroc_matches_brute_force(id in small_ints(50), ood in small_ints(50)) {
        let a = auroc(&ScoreSet::energies(id.clone(), ood.clone())).unwrap();
        prop_assert!((a - brute_auroc(&id, &ood)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auroc_swap_gives_complement(id in small_ints(50), ood in small_ints(50)) {
        let a = auroc(&ScoreSet::energies(id.clone(), ood.clone())).unwrap();
        let b = auroc(&ScoreSet::energies(ood, id)).unwrap();
        prop_assert_eq!(a, 1.0 - b);
    }

    #[test]
    fn auroc_invariant_under_increasing_transform(id in small_ints(50), ood in small_ints(50)) {
        let t = |v: &[f64]| v.iter().map(|x| x * x * x + 2.0 * x).collect::<Vec<f64>>();
        let a = auroc(&ScoreSet::energies(id.clone(), ood.clone())).unwrap();
        let b = auroc(&ScoreSet::energies(t(&id), t(&ood))).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn metrics_ignore_input_order(id in small_ints(50), ood in small_ints(50), seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let (mut id2, mut ood2) = (id.clone(), ood.clone());
        rng.shuffle(&mut id2);
        rng.shuffle(&mut ood2);
        let s1 = ScoreSet::energies(id, ood);
        let s2 = ScoreSet::energies(id2, ood2);
        prop_assert_eq!(auroc(&s1).unwrap(), auroc(&s2).unwrap());
        prop_assert_eq!(fpr95(&s1).unwrap(), fpr95(&s2).unwrap());
    }

    #[test]
    fn threshold_flag_tracks_ties(id in small_ints(60)) {
        let t = calibrate_threshold(&id).unwrap();
        let n = id.len();
        let rank = (0.95 * n as f64).ceil() as usize;
        let admitted = id.iter().filter(|&&e| classify(e, t.xi) == Decision::Inlier).count();
        let ties = id.iter().filter(|&&e| e == t.xi).count();
        prop_assert_eq!(t.degenerate, ties > 1);
        if t.degenerate {
            prop_assert!(admitted < rank);
        } else {
            // without ties the strict rule admits every order statistic below ξ
            prop_assert_eq!(admitted, rank - 1);
        }
    }

    #[test]
    fn energy_ignores_background_logit(
        logits in prop::collection::vec(-20.0f64..20.0, 4),
        shift in -50.0f64..50.0,
        t in 0.1f64..5.0,
    ) {
        let p = EnergyParams::uniform(3, t);
        let mut shifted = logits.clone();
        shifted[3] += shift;
        prop_assert_eq!(energy_score(&logits, &p).unwrap(), energy_score(&shifted, &p).unwrap());
    }

    #[test]
    fn energy_is_negative_logsumexp_at_unit_temperature(logits in prop::collection::vec(-30.0f64..30.0, 2..8)) {
        let k = logits.len() - 1;
        let e = energy_score(&logits, &EnergyParams::uniform(k, 1.0)).unwrap();
        let m = logits[..k].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits[..k].iter().map(|h| (h - m).exp()).sum::<f64>().ln();
        prop_assert!((e + lse).abs() <= 1e-12);
    }

    #[test]
    fn bce_is_non_negative(
        id in prop::collection::vec(-100.0f64..100.0, 1..20),
        ood in prop::collection::vec(-100.0f64..100.0, 1..20),
        slope in -5.0f64..5.0,
        intercept in -5.0f64..5.0,
    ) {
        let l = reg_loss_bce(&id, &ood, &BinaryClassifier { slope, intercept }).unwrap();
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn total_loss_is_linear_in_weights(
        det in -10.0f64..10.0, nll in -10.0f64..10.0, reg in 0.0f64..10.0,
        a1 in 0.0f64..1.0, a2 in 0.0f64..1.0, b1 in 0.0f64..1.0, b2 in 0.0f64..1.0,
    ) {
        let w = |alpha, beta| LossWeights { alpha, beta, ..LossWeights::default() };
        let base = total_loss(det, nll, reg, &w(0.0, 0.0));
        prop_assert_eq!(base, det);
        let l = |a, b| total_loss(det, nll, reg, &w(a, b)) - base;
        prop_assert!((l(a1 + a2, b1) - (l(a1, b1) + a2 * reg)).abs() <= 1e-12);
        prop_assert!((l(a1, b1 + b2) - (l(a1, b1) + b2 * nll)).abs() <= 1e-12);
    }

    #[test]
    fn rejection_selects_exact_minimum_subset(seed in any::<u64>(), k in 1usize..60, frac in 0.0f64..1.0) {
        let s = 1 + ((k - 1) as f64 * frac) as usize;
        let flow = random_flow(FlowVariant::RealNvp, 2, seed);
        let cfg = SynthesisConfig { mode: SynthesisMode::Rejection, k, s, ..SynthesisConfig::default() };
        let batch = rejection_sample(&flow, &cfg, &mut SeededRng::new(seed ^ 7)).unwrap();
        let mut all: Vec<f64> = generate_candidates(&flow, k, &mut SeededRng::new(seed ^ 7))
            .unwrap()
            .iter()
            .map(|c| c.log_lik)
            .collect();
        all.sort_by(f64::total_cmp);
        let mut got = batch.log_liks.clone();
        got.sort_by(f64::total_cmp);
        prop_assert_eq!(&got[..], &all[..s]);
        prop_assert_eq!(batch.len(), s);
    }

    #[test]
    fn identity_projection_moves_every_point_outward(
        seed in any::<u64>(), n in 1usize..10, tau in 0.05f64..1.0, d in 1usize..5,
    ) {
        let flow = FlowModel::identity(d);
        let mut rng = SeededRng::new(seed);
        let mut pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let mut prev = project_step(&flow, &mut pts, tau, 0.0, &mut rng).unwrap();
        for _ in 0..5 {
            let cur = project_step(&flow, &mut pts, tau, 0.0, &mut rng).unwrap();
            for (c, p) in cur.iter().zip(&prev) {
                prop_assert!(c < p);
            }
            prev = cur;
        }
    }

    #[test]
    fn projection_stops_below_delta_unless_capped(seed in any::<u64>(), delta in -12.0f64..-2.0, max_steps in 1usize..40) {
        let flow = random_flow(FlowVariant::Glow, 2, seed);
        let cfg = SynthesisConfig { mode: SynthesisMode::Projection, s: 4, tau: 0.5, max_steps, ..SynthesisConfig::default() };
        let mut rng = SeededRng::new(seed);
        let start: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let batch = project_from(&flow, &cfg, delta, start, &mut rng).unwrap();
        if !batch.provenance.hit_cap() {
            prop_assert!(batch.mean_log_lik() <= delta);
        }
        let direct: Vec<f64> = batch.features.iter().map(|x| flow.log_prob(x).unwrap()).collect();
        prop_assert_eq!(direct, batch.log_liks);
    }

    #[test]
    fn sampling_is_seed_deterministic(seed in any::<u64>()) {
        let flow = random_flow(FlowVariant::Gin, 3, seed);
        let cfg = SynthesisConfig::default();
        let a = rejection_sample(&flow, &cfg, &mut SeededRng::new(seed)).unwrap();
        let b = rejection_sample(&flow, &cfg, &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn gaussian_fit_matches_moment_oracle(seed in any::<u64>(), n in 3usize..30, ridge in 0.0f64..0.1) {
        let mut rng = SeededRng::new(seed);
        let records: Vec<FeatureRecord> = (0..3 * n)
            .map(|i| {
                let c = (i % 3) as i32;
                FeatureRecord::new(c, vec![c as f64 + rng.normal(), 2.0 * rng.normal() - c as f64])
            })
            .chain(std::iter::once(FeatureRecord::new(3, vec![100.0, 100.0])))
            .collect();
        let g = fit_class_gaussians(&records, 3, ridge).unwrap();
        // Σ = E[xxᵀ] − Σ_c (n_c/N) μ_c μ_cᵀ + ridge·I
        let inl: Vec<&FeatureRecord> = records.iter().filter(|r| r.label < 3).collect();
        let total = inl.len() as f64;
        for i in 0..2 {
            for j in 0..2 {
                let second: f64 = inl.iter().map(|r| r.feature[i] * r.feature[j]).sum::<f64>() / total;
                let mut between = 0.0;
                for c in 0..3 {
                    let members: Vec<&&FeatureRecord> = inl.iter().filter(|r| r.label == c).collect();
                    let m = members.len() as f64;
                    let mu_i = members.iter().map(|r| r.feature[i]).sum::<f64>() / m;
                    let mu_j = members.iter().map(|r| r.feature[j]).sum::<f64>() / m;
                    prop_assert!((g.means[c as usize][i] - mu_i).abs() <= 1e-12);
                    between += m / total * mu_i * mu_j;
                }
                let expect = second - between + if i == j { ridge } else { 0.0 };
                prop_assert!((g.covariance[(i, j)] - expect).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn vos_plus_matches_explicit_density_rule(seed in any::<u64>(), k in 5usize..80) {
        let mut rng = SeededRng::new(seed);
        let records: Vec<FeatureRecord> = (0..60)
            .map(|i| {
                let c = i % 3;
                FeatureRecord::new(c, vec![1.5 * c as f64 + 0.7 * rng.normal(), 0.5 * rng.normal()])
            })
            .collect();
        let g = fit_class_gaussians(&records, 3, 1e-3).unwrap();
        let class = rng.below(3);
        let s = 1 + k / 3;
        let batch = vos_sample(&g, class, k, s, &mut rng).unwrap();
        let kept = vos_plus_filter(&g, batch.clone()).unwrap();

        // 2x2 Gaussian log-density from the closed-form inverse
        let c = &g.covariance;
        let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
        let logp = |cls: usize, x: &[f64]| {
            let (u, v) = (x[0] - g.means[cls][0], x[1] - g.means[cls][1]);
            let q = (c[(1, 1)] * u * u - 2.0 * c[(0, 1)] * u * v + c[(0, 0)] * v * v) / det;
            -0.5 * q - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln()
        };
        let expect: Vec<Vec<f64>> = batch
            .features
            .iter()
            .filter(|x| (0..3).all(|o| o == class || logp(o, x) <= logp(class, x)))
            .cloned()
            .collect();
        prop_assert_eq!(&kept.features, &expect);
        for (x, ll) in batch.features.iter().zip(&batch.log_liks) {
            prop_assert!((logp(class, x) - ll).abs() <= 1e-9);
        }
    }

    #[test]
    fn csv_and_binary_round_trip(seed in any::<u64>(), n in 0usize..30, d in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let records: Vec<FeatureRecord> = (0..n)
            .map(|_| FeatureRecord::new(rng.below(5) as i32 - 1, (0..d).map(|_| 1e3 * rng.normal()).collect()))
            .collect();
        // the binary format stores features as f32
        let narrowed: Vec<FeatureRecord> = records
            .iter()
            .map(|r| FeatureRecord::new(r.label, r.feature.iter().map(|&v| v as f32 as f64).collect()))
            .collect();
        prop_assert_eq!(&parse_bin(&to_bin_bytes(&records).unwrap()).unwrap(), &narrowed);
        if n > 0 {
            prop_assert_eq!(&parse_csv(&to_csv_string(&records).unwrap()).unwrap(), &records);
        }
    }

    #[test]
    fn histogram_conserves_counts(
        a in prop::collection::vec(-50.0f64..5.0, 1..40),
        b in prop::collection::vec(-50.0f64..5.0, 0..40),
        bins in 1usize..30,
    ) {
        let h = Histogram::build(&[("id", &a), ("background", &b)], bins).unwrap();
        prop_assert_eq!(h.edges.len(), bins + 1);
        prop_assert_eq!(h.groups[0].1.iter().sum::<usize>(), a.len());
        prop_assert_eq!(h.groups[1].1.iter().sum::<usize>(), b.len());
        // binned means stay within one bin width of the exact mean
        let width = h.edges[1] - h.edges[0];
        let binned: f64 = h.groups[0].1.iter().enumerate().map(|(i, &c)| c as f64 * 0.5 * (h.edges[i] + h.edges[i + 1])).sum::<f64>() / a.len() as f64;
        let exact = a.iter().sum::<f64>() / a.len() as f64;
        prop_assert!((binned - exact).abs() <= width + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn splits_are_disjoint_and_exhaustive(seed in any::<u64>(), n in 5usize..60, frac in 0.5f64..0.95) {
        let spec = DatasetSpec { seed, n_per_class: n, n_background: n, n_ood: 10, train_fraction: frac, ..DatasetSpec::default() };
        let ds = generate(&spec).unwrap();
        let key = |r: &FeatureRecord| (r.label, r.feature.iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
        let mut all: Vec<_> = ds.train.iter().chain(&ds.val).map(key).collect();
        let total = all.len();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), total);
        prop_assert_eq!(total, 4 * n);
        for c in 0..=3 {
            prop_assert_eq!(ds.train.iter().chain(&ds.val).filter(|r| r.label == c).count(), n);
        }
        prop_assert!(ds.ood.iter().all(|r| r.label == -1));
    }
}
