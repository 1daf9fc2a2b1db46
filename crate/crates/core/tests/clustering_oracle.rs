use genreplay_core::linalg::{cosine_distance, RealMatrix};
use genreplay_core::model::{ce_loss, MlpClassifier, MlpDims};
use genreplay_core::pseudo_label::{
    assign_labels, gold_label_embedding, init_centroids, refine_centroids, refinement_residual,
    update_centroids, CentroidSet, EmbeddingGeometry,
};
use genreplay_core::rng::rng_for;
use genreplay_core::stream::LabeledSet;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> RealMatrix {
    let v = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    RealMatrix::from_vec(rows, cols, v).unwrap()
}

fn brute_force(centroids: &RealMatrix, e: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.cols() {
        let d = cosine_distance(e, &centroids.column(c)).unwrap();
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

#[test]
fn assignment_equals_brute_force_argmin() {
    for k in 0..200 {
        let mut rng = rng_for(k, 0xc1);
        let d = rng.random_range(1..=6);
        let c = rng.random_range(2..=6);
        let n = rng.random_range(1..=20);
        let u = random_matrix(&mut rng, d, c);
        let e = random_matrix(&mut rng, n, d);
        let got = assign_labels(&u, &e).unwrap();
        let want: Vec<usize> = e.row_iter().map(|row| brute_force(&u, row)).collect();
        assert_eq!(got, want, "instance {k}");
    }
}

#[test]
fn refinement_beats_random_feasible_candidates() {
    for k in 0..20 {
        let mut rng = rng_for(k, 0xc2);
        let d = rng.random_range(2..=6);
        let c = rng.random_range(2..=5);
        let u0 = random_matrix(&mut rng, d, c);
        let emb = gold_label_embedding(&u0, 0.8).unwrap();
        let v_hat = emb.label_factor();
        let u = random_matrix(&mut rng, d, c);
        let refined = refine_centroids(&u, &emb).unwrap();
        let best = u.sub(&refined).unwrap().frobenius_norm();
        for _ in 0..1000 {
            // candidate Hᵀ V̂ with H random, r × d
            let h = random_matrix(&mut rng, emb.rank(), d);
            let mut cand = h.transpose().matmul(&v_hat).unwrap();
            // half of the candidates sit close to the optimum
            if rng.random_bool(0.5) {
                let mut near = refined.clone();
                let jitter = h.transpose().matmul(&v_hat).unwrap();
                for (a, b) in near.as_mut_slice().iter_mut().zip(jitter.as_slice()) {
                    *a += 1e-3 * b;
                }
                cand = near;
            }
            let other = u.sub(&cand).unwrap().frobenius_norm();
            assert!(best <= other + 1e-12, "instance {k}: {best} > {other}");
        }
    }
}

#[test]
fn refinement_is_a_projection() {
    for k in 0..20 {
        let mut rng = rng_for(k, 0xc3);
        let u0 = random_matrix(&mut rng, 4, 3);
        let emb = gold_label_embedding(&u0, 0.9).unwrap();
        let u = random_matrix(&mut rng, 4, 3);
        let once = refine_centroids(&u, &emb).unwrap();
        let twice = refine_centroids(&once, &emb).unwrap();
        assert!(once.sub(&twice).unwrap().frobenius_norm() <= 1e-10);
        assert!(refinement_residual(&once, &emb).unwrap() <= 1e-20);
    }
}

#[test]
fn label_rank_follows_cumulative_energy() {
    // singular values 3, 2, 1 along orthogonal directions
    let u0 = RealMatrix::from_rows(&[
        [3.0, 0.0, 0.0],
        [0.0, 2.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, 0.0],
    ])
    .unwrap();
    assert_eq!(gold_label_embedding(&u0, 0.9).unwrap().rank(), 2);
    assert_eq!(gold_label_embedding(&u0, 0.5).unwrap().rank(), 1);
    assert_eq!(gold_label_embedding(&u0, 1.0).unwrap().rank(), 3);
    let rank_one = RealMatrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
    assert_eq!(gold_label_embedding(&rank_one, 1.0).unwrap().rank(), 1);
    assert!(gold_label_embedding(&RealMatrix::zeros(3, 2), 0.9).is_err());
}

fn clustering_cost(unit: &RealMatrix, centroids: &RealMatrix, labels: &[usize]) -> f64 {
    unit.row_iter()
        .zip(labels)
        .map(|(e, &y)| cosine_distance(e, &centroids.column(y)).unwrap())
        .sum()
}

#[test]
fn unrefined_clustering_cost_never_increases() {
    let geometry = EmbeddingGeometry { center: false };
    for k in 0..30 {
        let mut rng = rng_for(k, 0xc4);
        let n = rng.random_range(5..30);
        let raw = random_matrix(&mut rng, n, 3);
        let unit = geometry.prepare(&raw).unwrap().unit;
        let probs = {
            let mut p = random_matrix(&mut rng, n, 3);
            for i in 0..n {
                let row = p.row_mut(i);
                row.iter_mut().for_each(|v| *v = v.abs() + 0.01);
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            p
        };
        let mut set = init_centroids(&unit, &probs).unwrap();
        let mut labels = assign_labels(&set.centroids, &unit).unwrap();
        let mut cost = clustering_cost(&unit, &set.centroids, &labels);
        for _ in 0..8 {
            set = update_centroids(&unit, &labels, &set).unwrap();
            let after_update = clustering_cost(&unit, &set.centroids, &labels);
            labels = assign_labels(&set.centroids, &unit).unwrap();
            let after_assign = clustering_cost(&unit, &set.centroids, &labels);
            assert!(after_update <= cost + 1e-9, "instance {k}: update raised cost");
            assert!(after_assign <= after_update + 1e-9, "instance {k}: assign raised cost");
            cost = after_assign;
        }
    }
}

#[test]
fn every_point_gets_one_label_in_range() {
    let mut rng = rng_for(1, 0xc5);
    let u = random_matrix(&mut rng, 4, 5);
    let e = random_matrix(&mut rng, 50, 4);
    let labels = assign_labels(&u, &e).unwrap();
    assert_eq!(labels.len(), 50);
    assert!(labels.iter().all(|&y| y < 5));
    let prev = CentroidSet {
        centroids: u.clone(),
        counts: vec![0; 5],
    };
    let next = update_centroids(&e, &labels, &prev).unwrap();
    assert_eq!(next.counts.iter().sum::<usize>(), 50);
}

#[test]
fn pseudo_label_loss_is_plain_cross_entropy() {
    let dims = MlpDims::new(3, 5, 4, 3);
    let model = MlpClassifier::new(dims, &mut rng_for(9, 0)).unwrap();
    let mut rng = rng_for(9, 1);
    let xs = random_matrix(&mut rng, 12, 3);
    let labels = model.predict(&xs).unwrap();
    let set = LabeledSet::new(xs.clone(), labels.clone(), 3).unwrap();
    let a = ce_loss(&model, set.features(), set.labels()).unwrap();
    let b = ce_loss(&model, &xs, &labels).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}
