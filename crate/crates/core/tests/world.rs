use pairlat::experiment::{preset_names, ExperimentConfig};
use pairlat::rng::KeyedRng;
use pairlat::scm::{Edge, GroundTruthGenerator};
use pairlat::Tensor;

fn generator(preset: &str, seed: u64) -> GroundTruthGenerator {
    let cfg = ExperimentConfig::preset(preset).unwrap();
    GroundTruthGenerator::from_config(&cfg.world, seed).unwrap()
}

/// Sample distance correlation, double-centring without storing the n×n
/// distance matrices.
fn distance_correlation(x: &Tensor, y: &Tensor) -> f64 {
    let n = x.rows();
    let dist = |t: &Tensor, i: usize, j: usize| -> f64 {
        t.row(i).iter().zip(t.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let row_means = |t: &Tensor| -> Vec<f64> {
        (0..n).map(|i| (0..n).map(|j| dist(t, i, j)).sum::<f64>() / n as f64).collect()
    };
    let (ra, rb) = (row_means(x), row_means(y));
    let (ga, gb) = (ra.iter().sum::<f64>() / n as f64, rb.iter().sum::<f64>() / n as f64);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let a = dist(x, i, j) - ra[i] - ra[j] + ga;
            let b = dist(y, i, j) - rb[i] - rb[j] + gb;
            ab += a * b;
            aa += a * a;
            bb += b * b;
        }
    }
    (ab / (aa * bb).sqrt()).max(0.0).sqrt()
}

#[test]
fn proxy_edge_is_dependent_without_a_shared_column() {
    let gen = generator("fig2", 1);
    let ds = gen.sample_pair_dataset(Edge::new(0, 1), 10_000, 1).unwrap();
    let view = ds.training_view();
    let (x1, x2) = (view.x_lo(), view.x_hi());
    for a in 0..x1.cols() {
        for b in 0..x2.cols() {
            let same = (0..x1.rows()).all(|r| x1.at(r, a) == x2.at(r, b));
            assert!(!same, "column {a} of x1 equals column {b} of x2");
        }
    }
    let dependent = distance_correlation(x1, x2);
    let perm = KeyedRng::new(1, "test/shuffle").permutation(x2.rows());
    let shuffled = distance_correlation(x1, &x2.select_rows(&perm));
    assert!(dependent > 0.1, "dCor {dependent}");
    assert!(shuffled < 0.05, "shuffled dCor {shuffled}");
}

#[test]
fn shared_factor_is_one_variable_across_modalities() {
    let gen = generator("fig2", 2);
    let ds = gen.sample_pair_dataset(Edge::new(1, 2), 10_000, 2).unwrap();
    let view = ds.training_view();
    // c3 is local coordinate 1 of modality 2 and local coordinate 0 of
    // modality 3; undo each mixing and compare.
    let u2 = gen.mixing(1).inverse(view.x_lo()).unwrap();
    let u3 = gen.mixing(2).inverse(view.x_hi()).unwrap();
    let (a, b) = (u2.select_cols(&[1]), u3.select_cols(&[0]));
    let n = a.rows() as f64;
    let mean = |t: &Tensor| t.data().iter().sum::<f64>() / n;
    let (ma, mb) = (mean(&a), mean(&b));
    let cov: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.data().iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.data().iter().map(|y| (y - mb).powi(2)).sum();
    let corr = cov / (va * vb).sqrt();
    assert!((corr - 1.0).abs() < 1e-12, "corr {corr}");
    let worst = a.data().iter().zip(b.data()).fold(0.0f64, |w, (x, y)| w.max((x - y).abs()));
    assert!(worst < 1e-9, "max difference {worst}");
}

#[test]
fn every_preset_generator_inverts_layerwise() {
    for preset in preset_names() {
        for seed in 1..=3 {
            let gen = generator(preset, seed);
            let z = gen.sample_latents(1000, seed, "test/invert");
            let spec = gen.spec();
            for m in 0..spec.modalities() {
                let x = gen.generate_observation(m, &z).unwrap();
                let u = gen.mixing(m).inverse(&x).unwrap();
                let truth = z.select_cols(&spec.modality_columns(m));
                let err = u.data().iter().zip(truth.data()).fold(0.0f64, |w, (a, b)| w.max((a - b).abs()));
                assert!(err < 1e-8, "{preset} seed {seed} modality {}: {err}", m + 1);
            }
        }
    }
}
