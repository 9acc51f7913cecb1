use dfpca::bandwidth::{trust_region_minimize, TrustRegionConfig};
use dfpca::binning::linear_bin;
use dfpca::kernel::{epanechnikov, kernel_eval};
use dfpca::scores::pace_scores;
use dfpca::simulate::{ise, mise};
use dfpca::{EigenSystem, EvaluationGrid, FunctionalDataset, Sample, SurfaceEstimate, SurfaceKind};
use proptest::prelude::*;

fn unit_samples(max_n: usize) -> impl Strategy<Value = Vec<Vec<(f64, f64, f64)>>> {
    prop::collection::vec(prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, -5.0f64..5.0), 1..6), 1..max_n)
}

fn dataset(raw: &[Vec<(f64, f64, f64)>]) -> FunctionalDataset {
    let samples = raw
        .iter()
        .enumerate()
        .map(|(i, obs)| {
            let coords = obs.iter().flat_map(|&(a, b, _)| [a, b]).collect();
            Sample::new(format!("s{i}"), coords, obs.iter().map(|o| o.2).collect())
        })
        .collect();
    FunctionalDataset::with_bounds(2, samples, vec![(0.0, 1.0); 2]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_integrates_to_one(n in 200usize..2000) {
        let step = 2.0 / n as f64;
        let total: f64 = (0..n).map(|k| epanechnikov(-1.0 + (k as f64 + 0.5) * step) * step).sum();
        // Midpoint rule error is 0.5 / n^2 for this quadratic.
        prop_assert!((total - 1.0).abs() <= 0.5 / (n * n) as f64 + 1e-12);
    }

    #[test]
    fn product_kernel_factorizes(u in -1.5f64..1.5, v in -1.5f64..1.5) {
        prop_assert_eq!(kernel_eval(&[u, v]), epanechnikov(u) * epanechnikov(v));
        prop_assert!(kernel_eval(&[u, v]) >= 0.0);
    }

    #[test]
    fn binning_preserves_mass(raw in unit_samples(12), nx in 3usize..9, ny in 3usize..9) {
        let ds = dataset(&raw);
        let g = EvaluationGrid::uniform(&[(0.0, 1.0, nx), (0.0, 1.0, ny)]).unwrap();
        let b = linear_bin(&ds, &g).unwrap();
        prop_assert!((b.total_weight() - ds.n() as f64).abs() < 1e-9);
        let want: f64 = ds.samples().iter().map(|s| s.values().iter().sum::<f64>() / s.len() as f64).sum();
        let got: f64 = b.value.iter().sum();
        prop_assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()));
    }

    #[test]
    fn normalization_round_trips(raw in unit_samples(6), lo in -10.0f64..10.0, width in 0.1f64..50.0) {
        let samples: Vec<Sample> = raw
            .iter()
            .enumerate()
            .map(|(i, obs)| {
                let coords = obs.iter().flat_map(|&(a, b, _)| [lo + width * a, lo + width * b]).collect();
                Sample::new(format!("{i}"), coords, obs.iter().map(|o| o.2).collect())
            })
            .collect();
        let ds = FunctionalDataset::with_bounds(2, samples, vec![(lo, lo + width); 2]).unwrap();
        let (unit, map) = ds.normalize_domain().unwrap();
        for (s, u) in ds.samples().iter().zip(unit.samples()) {
            let mut back = u.coords().to_vec();
            for c in back.chunks_mut(2) {
                prop_assert!(c.iter().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x)));
                map.to_original(c);
            }
            for (a, b) in back.iter().zip(s.coords()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()) * width.max(1.0));
            }
            prop_assert_eq!(u.values(), s.values());
        }
    }

    #[test]
    fn pace_is_affine_in_the_residual(ys in prop::collection::vec(-3.0f64..3.0, 4), zs in prop::collection::vec(-3.0f64..3.0, 4), c in -2.0f64..2.0, s2 in 0.01f64..1.0) {
        let g = EvaluationGrid::uniform(&[(0.0, 1.0, 51)]).unwrap();
        let nodes = g.axis(0).to_vec();
        let mean = SurfaceEstimate::new(g.clone(), SurfaceKind::Mean, nodes.iter().map(|t| t * 0.5).collect()).unwrap();
        let pi = std::f64::consts::PI;
        let eig = EigenSystem {
            grid: g.clone(),
            eigenvalues: vec![1.5, 0.4],
            eigenfunctions: vec![
                nodes.iter().map(|t| 2f64.sqrt() * (pi * t).sin()).collect(),
                nodes.iter().map(|t| 2f64.sqrt() * (2.0 * pi * t).cos()).collect(),
            ],
            fve: vec![0.8, 1.0],
            total_variance: 1.9,
        };
        let at = vec![nodes[5], nodes[18], nodes[30], nodes[44]];
        let score = |v: Vec<f64>| pace_scores(&Sample::new("x", at.clone(), v), 1, &mean, &eig, s2).unwrap();
        let mu: Vec<f64> = [5usize, 18, 30, 44].iter().map(|&j| mean.values[j]).collect();
        let a = score(ys.iter().zip(&mu).map(|(y, m)| y + m).collect());
        let b = score(zs.iter().zip(&mu).map(|(z, m)| z + m).collect());
        let ab = score(ys.iter().zip(&zs).zip(&mu).map(|((y, z), m)| y + c * z + m).collect());
        for l in 0..2 {
            prop_assert!((ab[l] - a[l] - c * b[l]).abs() < 1e-9);
        }
    }

    #[test]
    fn ise_ignores_sign(v in prop::collection::vec(-2.0f64..2.0, 21), w in prop::collection::vec(-2.0f64..2.0, 21)) {
        let g = EvaluationGrid::uniform(&[(0.0, 1.0, 21)]).unwrap();
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let a = ise(&g, &v, &w);
        prop_assert!(a >= 0.0);
        prop_assert!((a - ise(&g, &neg, &w)).abs() <= 1e-12 * (1.0 + a));
        prop_assert!(ise(&g, &v, &v) < 1e-12);
    }

    #[test]
    fn mise_is_nonnegative(v in prop::collection::vec(-2.0f64..2.0, 11), w in prop::collection::vec(-2.0f64..2.0, 11)) {
        let g = EvaluationGrid::uniform(&[(0.0, 1.0, 11)]).unwrap();
        let m = mise(&g, &[v.clone()], &[w]).unwrap();
        prop_assert!(m >= 0.0);
        prop_assert_eq!(mise(&g, &[v.clone()], &[v]).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn best_so_far_never_increases(center in prop::collection::vec(-3.0f64..-0.5, 1..4), shift in -0.5f64..0.5, seed in any::<u64>()) {
        let d = center.len();
        let c = center.clone();
        let f = move |x: &[f64]| x.iter().zip(&c).map(|(a, b)| (a - b).powi(2) + 0.05 * (7.0 * a).sin()).sum::<f64>();
        let x0: Vec<f64> = center.iter().map(|v| v + shift).collect();
        let cfg = TrustRegionConfig { budget: 25, seed, ..Default::default() };
        let res = trust_region_minimize(&f, &x0, &vec![-5.0; d], &vec![0.0; d], &cfg).unwrap();
        prop_assert!(res.trace.windows(2).all(|w| w[1].best_so_far <= w[0].best_so_far));
        let last = res.trace.last().unwrap().best_so_far;
        prop_assert_eq!(last, res.best_value);
        prop_assert!(res.best_value <= f(&x0));
    }
}
