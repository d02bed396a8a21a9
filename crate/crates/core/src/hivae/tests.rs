use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::GradCheck;
use crate::schema::{AttributeSpec, ColumnStats, VariableType};

fn micro_schema() -> (DatasetSchema, TrainStats) {
    let schema = DatasetSchema::new(
        1,
        vec![
            AttributeSpec::new("a", VariableType::Real),
            AttributeSpec::new("b", VariableType::Count),
            AttributeSpec::new("c", VariableType::Categorical(3)),
            AttributeSpec::new("d", VariableType::Ordinal(4)),
        ],
    )
    .unwrap();
    let stats = TrainStats {
        schema_version: 1,
        columns: vec![
            ColumnStats::Real { mean: 1.0, std: 2.0 },
            ColumnStats::Count { mean: 2.0, log1p_mean: 0.9, log1p_std: 0.5 },
            ColumnStats::Categorical { probs: vec![0.5, 0.3, 0.2] },
            ColumnStats::Ordinal { probs: vec![0.1, 0.4, 0.3, 0.2] },
        ],
    };
    (schema, stats)
}

fn micro_config() -> HivaeConfig {
    HivaeConfig { d_s: 3, d_z: 3, d_y_shared: 4, d_y_specific: 2, hidden: vec![8], ..Default::default() }
}

fn random_rows(n: usize, rng: &mut impl Rng) -> Vec<Vec<Cell>> {
    (0..n)
        .map(|_| {
            vec![
                rng.random_bool(0.7).then(|| rng.random_range(-3.0..5.0)),
                rng.random_bool(0.7).then(|| rng.random_range(0..7) as f64),
                rng.random_bool(0.7).then(|| rng.random_range(1..=3) as f64),
                rng.random_bool(0.7).then(|| rng.random_range(1..=4) as f64),
            ]
        })
        .collect()
}

fn model() -> HivaeModel {
    let (schema, stats) = micro_schema();
    HivaeModel::new(&schema, &stats, micro_config(), 4).unwrap()
}

#[test]
fn deterministic_and_seeded_encoding_are_reproducible() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rows = random_rows(6, &mut rng);
    let x = m.codec().encode_rows(rows.iter().map(Vec::as_slice), None);
    let a = m.encode::<ChaCha8Rng>(&x, None).unwrap();
    let b = m.encode::<ChaCha8Rng>(&x, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.s, a.pi_s);
    assert_eq!(a.z, a.mu_z);

    let s1 = m.encode(&x, Some(&mut ChaCha8Rng::seed_from_u64(9))).unwrap();
    let s2 = m.encode(&x, Some(&mut ChaCha8Rng::seed_from_u64(9))).unwrap();
    assert_eq!(s1, s2);
    assert_ne!(s1.z, a.z);
    for r in 0..6 {
        assert!((s1.s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn encoder_rejects_wrong_width() {
    let m = model();
    let x = Tensor::zeros(2, m.codec().input_width() + 1);
    assert!(matches!(m.encode::<ChaCha8Rng>(&x, None), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn posterior_variance_is_positive() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = m.codec().input_width();
    let x = Tensor::from_vec(10_000, w, (0..10_000 * w).map(|_| rng.random_range(-20.0..20.0)).collect());
    let state = m.encode::<ChaCha8Rng>(&x, None).unwrap();
    assert!(state.sigma2_z.data().iter().all(|&v| v > 0.0));
}

#[test]
fn decode_matches_schema_types() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows = random_rows(5, &mut rng);
    let x = m.codec().encode_rows(rows.iter().map(Vec::as_slice), None);
    let state = m.encode(&x, Some(&mut rng)).unwrap();
    let params = m.decode(&state).unwrap();
    assert_eq!(params.len(), 5);
    for row in params {
        assert_eq!(row.len(), 4);
        for (p, a) in row.iter().zip(&m.schema().attributes) {
            assert_eq!(p.kind(), a.kind());
            p.validate().unwrap();
        }
    }
}

#[test]
fn heads_read_only_their_own_specific_slice() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = micro_config();
    let width = cfg.d_y_shared + 4 * cfg.d_y_specific;
    let s = Tensor::from_rows(&[vec![0.2, 0.5, 0.3]]);
    let y = Tensor::from_vec(1, width, (0..width).map(|_| rng.random_range(-1.0..1.0)).collect());
    let base = m.head_outputs_from_y(&s, &y);
    for j in 0..4 {
        let mut bumped = y.clone();
        for k in 0..cfg.d_y_specific {
            let c = cfg.d_y_shared + j * cfg.d_y_specific + k;
            bumped.set(0, c, bumped.get(0, c) + 0.7);
        }
        let out = m.head_outputs_from_y(&s, &bumped);
        for (i, (a, b)) in base.iter().zip(&out).enumerate() {
            assert_eq!(a != b, i == j, "bumping y_{j} changed head {i}: {}", a != b);
        }
    }
}

#[test]
fn kl_examples() {
    let (schema, stats) = micro_schema();
    let cfg = HivaeConfig { d_z: 57, ..micro_config() };
    let m = HivaeModel::new(&schema, &stats, cfg, 5).unwrap();
    let s = Tensor::from_rows(&[vec![1.0 / 3.0; 3]]);
    let prior = {
        let mut g = Graph::new();
        let p = m.params().bind(&mut g, false);
        let sv = g.constant(s.clone());
        let out = m.dec_z.forward(&mut g, &p, sv);
        g.value(out).clone()
    };
    let state = EncoderState {
        pi_s: s.clone(),
        s: s.clone(),
        mu_z: prior.clone(),
        sigma2_z: Tensor::full(1, 57, 1.0),
        z: prior.clone(),
    };
    let (ks, kz) = m.kl_terms(&state);
    assert!(ks.abs() < 1e-12, "{ks}");
    assert!(kz.abs() < 1e-12, "{kz}");
    let shifted = EncoderState { mu_z: prior.map(|v| v + 1.0), ..state };
    let (_, kz) = m.kl_terms(&shifted);
    assert!((kz - 28.5).abs() < 1e-9, "{kz}");
}

#[test]
fn kl_terms_are_nonnegative() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let rows = random_rows(4, &mut rng);
        let x = m.codec().encode_rows(rows.iter().map(Vec::as_slice), None);
        let state = m.encode(&x, Some(&mut rng)).unwrap();
        let (ks, kz) = m.kl_terms(&state);
        assert!(ks >= -1e-9 && kz >= -1e-9, "{ks} {kz}");
    }
}

#[test]
fn impute_requires_training_and_is_deterministic() {
    let mut m = model();
    let row = vec![Some(1.0), None, Some(2.0), None];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(m.impute(&row, 0, &mut rng), Err(Error::UntrainedModel)));
    m.mark_trained();
    let a = m.impute(&row, 0, &mut rng).unwrap();
    let b = m.impute(&row, 0, &mut rng).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 1);
    let many = m.impute(&row, 7, &mut rng).unwrap();
    assert_eq!(many.len(), 7);
    assert_ne!(many[0], many[1]);
}

fn micro_batch(rows: &[Vec<Cell>], rng: &mut impl Rng) -> MaskedBatch<'static> {
    let rows: Vec<&'static [Cell]> = rows.iter().map(|r| &*Box::leak(r.clone().into_boxed_slice())).collect();
    let mut batch = MaskedBatch::unmasked(rows, 4);
    for i in 0..batch.n_rows() {
        for j in 0..4 {
            if batch.rows[i][j].is_some() && rng.random_bool(0.5) {
                batch.visible[i * 4 + j] = false;
                batch.targets[i * 4 + j] = true;
            }
        }
    }
    batch
}

#[test]
fn whole_loss_gradient_check() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows = random_rows(6, &mut rng);
    let batch = micro_batch(&rows, &mut rng);
    assert!(batch.target_count() > 0);
    let noise = ChaCha8Rng::seed_from_u64(77);
    let err = GradCheck::default().max_rel_error(
        |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let mut r = noise.clone();
            m.loss_graph(g, &p, &batch, 0.3, 0.2, &mut r).unwrap().total
        },
        m.params().tensors(),
    );
    assert!(err < 1e-3, "rel err {err}");
}

#[test]
fn loss_without_targets_is_the_weighted_kl() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let rows = random_rows(5, &mut rng);
    let leaked: Vec<&[Cell]> = rows.iter().map(Vec::as_slice).collect();
    let batch = MaskedBatch::unmasked(leaked, 4);
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, false);
    let parts = m.loss_graph(&mut g, &p, &batch, 0.5, 0.25, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let expect = 0.5 * g.value(parts.kl_s).item() + 0.25 * g.value(parts.kl_z).item();
    assert_eq!(g.value(parts.nll).item(), 0.0);
    assert!((g.value(parts.total).item() - expect).abs() < 1e-12);
}
