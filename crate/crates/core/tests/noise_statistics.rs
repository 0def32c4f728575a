use vlab::noise::{normal_at, sample_increments, NoiseSpec};
use vlab::Grid;

#[test]
fn increment_variance_and_independence() {
    let grid = Grid::with_horizon(0.04, 0.01).unwrap();
    let noise = NoiseSpec::new(vec![1.0, 0.25, 2.0]).unwrap();
    let paths = 100_000;
    let batch = sample_increments(&noise, grid, paths, 2024).unwrap();
    let q = [1.0, 0.25, 2.0];
    let channels: Vec<(usize, usize)> = (0..grid.n).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
    let series: Vec<Vec<f64>> = channels
        .iter()
        .map(|&(i, j)| (0..paths).map(|p| batch.increment(p, i, j)).collect())
        .collect();
    for (c, &(_, j)) in channels.iter().enumerate() {
        let var = series[c].iter().map(|x| x * x).sum::<f64>() / paths as f64;
        let want = q[j] * grid.dt;
        assert!((var - want).abs() <= 0.05 * want, "channel {c}: {var} vs {want}");
    }
    let bound = 4.0 / (paths as f64).sqrt();
    for a in 0..series.len() {
        for b in a + 1..series.len() {
            let (x, y) = (&series[a], &series[b]);
            let sxy: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
            let sxx: f64 = x.iter().map(|u| u * u).sum();
            let syy: f64 = y.iter().map(|v| v * v).sum();
            let corr = sxy / (sxx * syy).sqrt();
            assert!(corr.abs() <= bound, "channels {a},{b}: {corr}");
        }
    }
}

#[test]
fn sampling_is_independent_of_thread_count() {
    let grid = Grid::with_horizon(1.0, 0.01).unwrap();
    let noise = NoiseSpec::cylindrical(4).unwrap();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| sample_increments(&noise, grid, 300, 11).unwrap())
    };
    let (a, b) = (run(1), run(4));
    for p in 0..300 {
        assert_eq!(a.path(p), b.path(p));
    }
}

#[test]
fn counter_access_is_keyed_by_indices() {
    let grid = Grid::with_horizon(0.1, 0.01).unwrap();
    let noise = NoiseSpec::new(vec![1.0, 1.0]).unwrap();
    let batch = sample_increments(&noise, grid, 5, 3).unwrap();
    for p in 0..5 {
        for i in 0..grid.n {
            for j in 0..2 {
                let z = normal_at(3, p as u64, i, j, 2);
                assert_eq!(batch.increment(p, i, j), z * grid.dt.sqrt());
            }
        }
    }
}
