//! Analytic gradients against central finite differences.

use genreplay_core::linalg::RealMatrix;
use genreplay_core::model::{ce_loss, ce_loss_and_grad, consistency_loss_and_grad, MlpClassifier, MlpDims};
use genreplay_core::rng::rng_for;
use rand::Rng;

const STEP: f64 = 1e-5;
const MAX_REL: f64 = 1e-4;
// Entries whose magnitude is below this are compared absolutely.
const FLOOR: f64 = 1e-6;

struct Draw {
    model: MlpClassifier,
    xs: RealMatrix,
    ys: Vec<usize>,
}

fn draw(k: u64) -> Draw {
    let mut rng = rng_for(k, 0x6772_6164);
    let dims = MlpDims::new(
        rng.random_range(1..=5),
        rng.random_range(1..=8),
        rng.random_range(1..=6),
        rng.random_range(2..=5),
    );
    let mut model = MlpClassifier::new(dims, &mut rng).unwrap();
    // nonzero biases so every path is exercised
    for p in model.params_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    let n = rng.random_range(1..=6);
    let data: Vec<f64> = (0..n * dims.input).map(|_| rng.random_range(-2.0..2.0)).collect();
    let xs = RealMatrix::from_vec(n, dims.input, data).unwrap();
    let ys = (0..n).map(|_| rng.random_range(0..dims.classes)).collect();
    Draw { model, xs, ys }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn numeric<F: Fn(&MlpClassifier) -> f64>(model: &MlpClassifier, f: F) -> Vec<f64> {
    let mut probe = model.clone();
    (0..model.param_count())
        .map(|i| {
            let base = model.params()[i];
            probe.params_mut()[i] = base + STEP;
            let up = f(&probe);
            probe.params_mut()[i] = base - STEP;
            let down = f(&probe);
            probe.params_mut()[i] = base;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let mut max_seen: f64 = 0.0;
    for k in 0..100 {
        let d = draw(k);
        let (_, g) = ce_loss_and_grad(&d.model, &d.xs, &d.ys).unwrap();
        let fd = numeric(&d.model, |m| ce_loss(m, &d.xs, &d.ys).unwrap());
        let e = worst(g.as_slice(), &fd);
        assert!(e <= MAX_REL, "draw {k}: relative error {e:e}");
        max_seen = max_seen.max(e);
    }
    assert!(max_seen.is_finite());
}

#[test]
fn embedding_upstream_gradient_matches_finite_differences() {
    for k in 100..130 {
        let d = draw(k);
        let dims = d.model.dims();
        let mut rng = rng_for(k, 7);
        let weights: Vec<f64> = (0..d.xs.rows() * dims.embed)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let a = RealMatrix::from_vec(d.xs.rows(), dims.embed, weights).unwrap();
        // L = CE + Σ a ∘ f(x)
        let loss = |m: &MlpClassifier| {
            let pass = m.forward_batch(&d.xs).unwrap();
            let lin: f64 = pass.embeddings.as_slice().iter().zip(a.as_slice()).map(|(e, w)| e * w).sum();
            ce_loss(m, &d.xs, &d.ys).unwrap() + lin
        };
        let pass = d.model.forward_batch(&d.xs).unwrap();
        let (_, dz) = genreplay_core::model::ce_logit_grad(&pass.logits, &d.ys).unwrap();
        let g = d.model.backward(&d.xs, &pass, &dz, Some(&a)).unwrap();
        let e = worst(g.as_slice(), &numeric(&d.model, loss));
        assert!(e <= MAX_REL, "draw {k}: relative error {e:e}");
    }
}

#[test]
fn consistency_gradients_match_finite_differences() {
    for k in 200..230 {
        let d = draw(k);
        let teacher = MlpClassifier::new(d.model.dims(), &mut rng_for(k, 3)).unwrap();
        let (_, g) = consistency_loss_and_grad(&d.model, &teacher, &d.xs, 0.7).unwrap();
        let fd = numeric(&d.model, |m| {
            consistency_loss_and_grad(m, &teacher, &d.xs, 0.7).unwrap().0
        });
        let e = worst(g.as_slice(), &fd);
        assert!(e <= MAX_REL, "draw {k}: relative error {e:e}");
    }
}

#[test]
fn loss_is_bit_identical_across_runs() {
    for k in 0..5 {
        let a = draw(k);
        let b = draw(k);
        let la = ce_loss_and_grad(&a.model, &a.xs, &a.ys).unwrap();
        let lb = ce_loss_and_grad(&b.model, &b.xs, &b.ys).unwrap();
        assert_eq!(la.0.to_bits(), lb.0.to_bits());
        assert_eq!(la.1, lb.1);
    }
}
