use proptest::prelude::*;

use ctxreg::analysis::{self, bound_curve, per_region_report, Metrics, Region, GM_FLOOR};
use ctxreg::data::{balanced_split, BinConfig, BinStats, Dataset};
use ctxreg::predict::ridge_fit;
use ctxreg::resample::smoter_augment;
use ctxreg::retrieval::{Metric, RetrievalIndex};

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    // small integers so that exact ties are common
    prop::collection::vec(prop::collection::vec((-3i32..=3).prop_map(f64::from), d), n)
}

fn dataset(n: std::ops::Range<usize>) -> impl Strategy<Value = Dataset> {
    prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, 0.0..20.0f64), n).prop_map(|v| {
        let xs = v.iter().map(|&(a, b, _)| vec![a, b]).collect();
        let ys = v.iter().map(|&(_, _, y)| y).collect();
        Dataset::from_parts(xs, ys).unwrap()
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_matches_full_sort(pool in rows(40, 3), q in rows(1, 3), k in 1usize..45) {
        let idx = RetrievalIndex::from_rows(pool.clone(), Metric::Cosine).unwrap();
        let got: Vec<usize> = idx.search_raw(&q[0], k).iter().map(|n| n.row).collect();
        let mut all: Vec<(f64, usize)> = pool.iter().enumerate().map(|(i, r)| (cosine(r, &q[0]), i)).collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<usize> = all.iter().take(k.min(pool.len())).map(|p| p.1).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn cosine_ignores_query_scale(pool in rows(30, 4), q in rows(1, 4), e in -3i32..=3, k in 1usize..30) {
        let idx = RetrievalIndex::from_rows(pool, Metric::Cosine).unwrap();
        let c = 2f64.powi(e);
        let scaled: Vec<f64> = q[0].iter().map(|v| v * c).collect();
        let a: Vec<usize> = idx.search_raw(&q[0], k).iter().map(|n| n.row).collect();
        let b: Vec<usize> = idx.search_raw(&scaled, k).iter().map(|n| n.row).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn ridge_shrinks_with_lambda(ds in dataset(5..40), l in 0.01..10.0f64, f in 1.5..20.0f64) {
        let xs = ds.features();
        let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let ys = ds.labels();
        let norm = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>();
        let lo = ridge_fit(&xr, &ys, l).unwrap();
        let hi = ridge_fit(&xr, &ys, l * f).unwrap();
        prop_assert!(norm(&hi.weights) <= norm(&lo.weights) * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn ridge_fits_no_worse_than_mean(ds in dataset(3..40), l in 0.01..10.0f64) {
        let xs = ds.features();
        let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let ys = ds.labels();
        let fit = ridge_fit(&xr, &ys, l).unwrap();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let sse_ridge: f64 = xr.iter().zip(&ys).map(|(x, y)| (fit.eval(x) - y).powi(2)).sum();
        let sse_mean: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
        prop_assert!(sse_ridge <= sse_mean * (1.0 + 1e-9) + 1e-9);
    }

    #[test]
    fn smoter_points_lie_on_few_segments(ds in dataset(8..40), seed in 0u64..1000) {
        let bins = BinStats::fit(&ds, &BinConfig::count(4)).unwrap();
        let out = smoter_augment(&ds, &bins, seed, 3).unwrap();
        prop_assert!(out.len() >= ds.len());
        prop_assert_eq!(&out.samples()[..ds.len()], ds.samples());
        let src = ds.samples();
        for s in &out.samples()[ds.len()..] {
            let on_segment = src.iter().any(|a| src.iter().any(|b| {
                // solve for t on the label, then check every feature
                let dy = b.label - a.label;
                let t = if dy.abs() > 1e-12 { (s.label - a.label) / dy } else { 0.5 };
                let lerp = |u: f64, v: f64| u + t * (v - u);
                (-1e-9..=1.0 + 1e-9).contains(&t)
                    && (lerp(a.label, b.label) - s.label).abs() < 1e-9
                    && a.features.iter().zip(&b.features).zip(&s.features)
                        .all(|((u, v), w)| (lerp(*u, *v) - w).abs() < 1e-9
                            || (dy.abs() <= 1e-12 && u.min(*v) - 1e-9 <= *w && *w <= u.max(*v) + 1e-9))
            }));
            prop_assert!(on_segment, "synthetic sample {:?} off every segment", s);
        }
    }

    #[test]
    fn split_partitions_and_repeats(ds in dataset(60..200), seed in 0u64..1000) {
        let cfg = BinConfig::count(5);
        let a = balanced_split(&ds, 0.2, &cfg, seed).unwrap();
        let b = balanced_split(&ds, 0.2, &cfg, seed).unwrap();
        prop_assert_eq!(&a.test_rows, &b.test_rows);
        let mut all: Vec<usize> = a.train_rows.iter().chain(&a.test_rows).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        for bin in &a.per_bin {
            prop_assert!(bin.total == 0 || bin.train >= 1);
            prop_assert!(bin.test <= a.cap);
        }
    }

    #[test]
    fn bound_total_is_sum_of_parts(
        y in -10.0..10.0f64,
        cands in prop::collection::vec(-10.0..10.0f64, 1..30),
        sigma in 0.0..3.0f64,
    ) {
        let c = bound_curve(y, &cands, sigma, cands.len()).unwrap();
        for i in 0..c.len() {
            let k = c.ks[i];
            let mean = cands[..k].iter().sum::<f64>() / k as f64;
            prop_assert!((c.bias2[i] - (y - mean).powi(2)).abs() < 1e-9);
            prop_assert!((c.variance[i] - sigma * sigma / k as f64).abs() < 1e-12);
            prop_assert!((c.total[i] - c.bias2[i] - c.variance[i] - sigma * sigma).abs() < 1e-9);
        }
    }

    #[test]
    fn gm_at_most_mae(errs in prop::collection::vec(-100.0..100.0f64, 1..50)) {
        let y = vec![0.0; errs.len()];
        let m = Metrics::compute(&y, &errs).unwrap();
        prop_assert!(m.gm <= m.mae * (1.0 + 1e-12) + GM_FLOOR);
        prop_assert!((m.rmse * m.rmse - m.mse).abs() <= 1e-9 * m.mse.max(1.0));
        prop_assert!(m.mae <= m.rmse * (1.0 + 1e-12));
    }

    #[test]
    fn regions_add_up(ds in dataset(20..300), noise in prop::collection::vec(-1.0..1.0f64, 300)) {
        let bins = BinStats::fit(&ds, &BinConfig::count(6)).unwrap();
        let y = ds.labels();
        let yhat: Vec<f64> = y.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let rep = per_region_report(&y, &yhat, &bins).unwrap();
        let all = rep.get(Region::All);
        prop_assert_eq!(all.count, y.len());
        let parts: usize = [Region::Many, Region::Medium, Region::Few].iter().map(|r| rep.get(*r).count).sum();
        prop_assert_eq!(parts, y.len());
        prop_assert_eq!(all.metrics.unwrap(), Metrics::compute(&y, &yhat).unwrap());
        let sse: f64 = [Region::Many, Region::Medium, Region::Few].iter()
            .filter_map(|r| rep.get(*r).metrics.map(|m| m.mse * rep.get(*r).count as f64))
            .sum();
        prop_assert!((sse / y.len() as f64 - all.metrics.unwrap().mse).abs() < 1e-9);
        prop_assert!(analysis::metric_mse(&y, &yhat).is_ok());
    }
}
