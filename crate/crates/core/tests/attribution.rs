use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spa::attribution::{
    self, build_matrix, ihvp_cg, ihvp_exact, ihvp_lissa, influence_from_grad, influence_score,
    AttributionConfig, Bm25Config, CorpusStats, Document, HessianOperator, LissaConfig, Method,
    ModelHessian, ScaledIdentity,
};
use spa::corpus::{Example, Vocab};
use spa::model::{BaseModel, Differentiable, LoraConfig, LowRankAdaptation};

/// Softmax regression with 5 features and 4 tokens: 20 parameters.
fn convex_instance(seed: u64, n: usize) -> (BaseModel, Vec<Example>) {
    let base = BaseModel::convex(4, 5).unwrap().randomized(seed, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let data = (0..n)
        .map(|id| Example {
            id,
            input: (0..rng.random_range(1..5))
                .map(|_| rng.random_range(0..4))
                .collect(),
            output: (0..rng.random_range(1..3))
                .map(|_| rng.random_range(0..4))
                .collect(),
            topic: None,
        })
        .collect();
    (base, data)
}

/// Damped Hessian assembled column by column and inverted directly.
fn dense_inverse(op: &dyn HessianOperator, damping: f64) -> DMatrix<f64> {
    let n = op.dim();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        h.set_column(j, &DVector::from_vec(op.apply(&e)));
    }
    (h + DMatrix::identity(n, n) * damping)
        .try_inverse()
        .unwrap()
}

fn rel_vec_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn damped_apply(op: &dyn HessianOperator, v: &[f64], damping: f64) -> Vec<f64> {
    op.apply(v)
        .iter()
        .zip(v)
        .map(|(h, x)| h + damping * x)
        .collect()
}

#[test]
fn exact_matches_direct_inverse_and_meets_residual() {
    let (base, data) = convex_instance(1, 200);
    let d = Differentiable::new(&base, None).unwrap();
    assert_eq!(d.len(), 20);
    let op = ModelHessian::new(&d, &data).unwrap();
    let inv = dense_inverse(&op, 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3 {
        let g: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = ihvp_exact(&op, &g, 1e-3).unwrap();
        let want = &inv * DVector::from_column_slice(&g);
        assert!(rel_vec_err(&v, want.as_slice()) < 1e-8);
        let r: Vec<f64> = damped_apply(&op, &v, 1e-3)
            .iter()
            .zip(&g)
            .map(|(a, b)| a - b)
            .collect();
        assert!(
            r.iter().map(|x| x * x).sum::<f64>().sqrt()
                <= 1e-8 * g.iter().map(|x| x * x).sum::<f64>().sqrt()
        );
    }
}

#[test]
fn exact_trivial_cases() {
    let zero = ScaledIdentity { dim: 3, scale: 0.0 };
    assert_eq!(
        ihvp_exact(&zero, &[1.0, 2.0, 3.0], 1.0).unwrap(),
        vec![1.0, 2.0, 3.0]
    );
    let (base, data) = convex_instance(2, 20);
    let d = Differentiable::new(&base, None).unwrap();
    let op = ModelHessian::new(&d, &data).unwrap();
    assert!(ihvp_exact(&op, &[0.0; 20], 1e-3)
        .unwrap()
        .iter()
        .all(|&x| x == 0.0));
}

#[test]
fn cg_matches_exact_over_seeds() {
    for seed in 0..20 {
        let (base, data) = convex_instance(seed, 200);
        let d = Differentiable::new(&base, None).unwrap();
        let op = ModelHessian::new(&d, &data).unwrap();
        let g = d.example_grad(&data[0]);
        let exact = ihvp_exact(&op, &g, 1e-3).unwrap();
        let cg = ihvp_cg(&op, &g, 1e-3, 1e-8, 500).unwrap();
        assert!(
            cg.relative_residual < 1e-8,
            "seed {seed}: residual {}",
            cg.relative_residual
        );
        let err = rel_vec_err(&cg.v, &exact);
        assert!(err < 1e-5, "seed {seed}: error {err}");
    }
}

/// Mean Pearson correlation, over 8 query gradients, between LiSSA and exact
/// influence scores across the training set.
fn lissa_correlation(seed: u64, budget_factor: usize) -> f64 {
    let (base, data) = convex_instance(seed, 200);
    let d = Differentiable::new(&base, None).unwrap();
    let op = ModelHessian::new(&d, &data).unwrap();
    let grads: Vec<Vec<f64>> = data.iter().map(|z| d.example_grad(z)).collect();
    let mut cfg = LissaConfig::for_dataset(data.len() * budget_factor);
    cfg.scale = Some(attribution::estimate_scale(&op, cfg.damping, seed));
    let mut total = 0.0;
    for q in 0..8 {
        let g = &grads[200 - 1 - q * 7];
        let exact = ihvp_exact(&op, g, cfg.damping).unwrap();
        let approx = ihvp_lissa(&op, g, &cfg, seed, q as u64).unwrap();
        let se: Vec<f64> = grads
            .iter()
            .map(|t| influence_from_grad(t, &exact))
            .collect();
        let sa: Vec<f64> = grads
            .iter()
            .map(|t| influence_from_grad(t, &approx))
            .collect();
        total += pearson(&se, &sa);
    }
    total / 8.0
}

#[test]
fn lissa_correlates_with_exact() {
    let mut small = 0.0;
    let mut large = 0.0;
    for seed in 0..5 {
        let c = lissa_correlation(seed, 10);
        assert!(c >= 0.9, "seed {seed}: correlation {c}");
        small += c;
        large += lissa_correlation(seed, 40);
    }
    assert!(
        large >= small,
        "4x budget lowered mean correlation: {small} -> {large}"
    );
}

#[test]
fn lissa_is_deterministic() {
    let (base, data) = convex_instance(4, 50);
    let d = Differentiable::new(&base, None).unwrap();
    let op = ModelHessian::new(&d, &data).unwrap();
    let g = d.example_grad(&data[3]);
    let cfg = LissaConfig::for_dataset(50);
    assert_eq!(
        ihvp_lissa(&op, &g, &cfg, 9, 2).unwrap(),
        ihvp_lissa(&op, &g, &cfg, 9, 2).unwrap()
    );
    assert_ne!(
        ihvp_lissa(&op, &g, &cfg, 9, 2).unwrap(),
        ihvp_lissa(&op, &g, &cfg, 10, 2).unwrap()
    );
}

#[test]
fn self_influence_is_negative() {
    let (base, data) = convex_instance(5, 1);
    let d = Differentiable::new(&base, None).unwrap();
    let op = ModelHessian::new(&d, &data).unwrap();
    let g = d.example_grad(&data[0]);
    let v = ihvp_exact(&op, &g, 1e-3).unwrap();
    let s = influence_score(&base, None, &data[0], &v).unwrap();
    assert!(s < 0.0);
    let doubled: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
    assert!(
        (influence_score(&base, None, &data[0], &doubled).unwrap() - 2.0 * s).abs()
            <= 1e-12 * s.abs()
    );
}

#[test]
fn zero_gradient_example_scores_zero() {
    // empty context: the hashed feature vector is zero, so is the gradient
    let base = BaseModel::convex(4, 5).unwrap().randomized(1, 1.0);
    let z = Example {
        id: 0,
        input: vec![],
        output: vec![2],
        topic: None,
    };
    let v = vec![1.0; 20];
    assert_eq!(influence_score(&base, None, &z, &v).unwrap(), 0.0);
}

#[test]
fn duplicated_example_doubles_influence() {
    // the summed loss over [z, z] weights z twice; its gradient is twice z's
    let (base, data) = convex_instance(6, 10);
    let d = Differentiable::new(&base, None).unwrap();
    let op = ModelHessian::new(&d, &data).unwrap();
    let v = ihvp_exact(&op, &d.example_grad(&data[1]), 1e-3).unwrap();
    let z = &data[4];
    let twice: Vec<f64> = d
        .grad(&[z.clone(), z.clone()])
        .values
        .iter()
        .map(|x| 2.0 * x)
        .collect();
    let single = influence_from_grad(&d.example_grad(z), &v);
    assert!(
        (influence_from_grad(&twice, &v) - 2.0 * single).abs() <= 1e-12 * single.abs().max(1e-300)
    );
}

fn char_vocab() -> Vocab {
    Vocab::new(
        ["<eos>", "a", "b", "c", "d"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    )
    .unwrap()
}

#[test]
fn single_pair_matrix_equals_pointwise_score() {
    let (base, data) = convex_instance(7, 2);
    let vocab = Vocab::synthetic(4).unwrap();
    let d = Differentiable::new(&base, None).unwrap();
    let train = &data[..1];
    let query = &data[1..];
    let op = ModelHessian::new(&d, train).unwrap();
    let v = ihvp_exact(&op, &d.example_grad(&query[0]), 1e-3).unwrap();
    let cfg = AttributionConfig::default();
    let mat = build_matrix(
        Method::InfluenceExact,
        &cfg,
        &base,
        None,
        &vocab,
        train,
        query,
        0,
    )
    .unwrap();
    assert_eq!((mat.n_queries(), mat.n_examples()), (1, 1));
    assert_eq!(
        mat.get(0, 0),
        influence_score(&base, None, &train[0], &v).unwrap()
    );
}

#[test]
fn bm25_matrix_matches_pointwise() {
    let vocab = char_vocab();
    let ex = |id, input: &[usize], output: &[usize]| Example {
        id,
        input: input.to_vec(),
        output: output.to_vec(),
        topic: None,
    };
    let train = vec![
        ex(0, &[1, 2], &[2]),
        ex(1, &[3], &[3, 3, 1]),
        ex(2, &[4, 4], &[1]),
    ];
    let queries = vec![ex(3, &[1], &[2]), ex(4, &[3, 4], &[4])];
    let base = BaseModel::convex(5, 3).unwrap();
    let mat = build_matrix(
        Method::Bm25,
        &AttributionConfig::default(),
        &base,
        None,
        &vocab,
        &train,
        &queries,
        0,
    )
    .unwrap();
    let docs: Vec<Document> = train
        .iter()
        .map(|z| Document::new(&attribution::terms(z, &vocab)))
        .collect();
    let stats = CorpusStats::new(&docs).unwrap();
    for (k, q) in queries.iter().enumerate() {
        let qt = attribution::terms(q, &vocab);
        for (i, d) in docs.iter().enumerate() {
            let s = attribution::bm25_score(d, &qt, &stats, &Bm25Config::default()).unwrap();
            assert_eq!(mat.get(k, i), s.value);
        }
    }
    assert_eq!(mat.query_ids(), &[3, 4]);
}

#[test]
fn cg_matrix_matches_exact_matrix() {
    let (base, data) = convex_instance(8, 200);
    let vocab = Vocab::synthetic(4).unwrap();
    let (train, queries) = data.split_at(190);
    let cfg = AttributionConfig::default();
    let exact = build_matrix(
        Method::InfluenceExact,
        &cfg,
        &base,
        None,
        &vocab,
        train,
        queries,
        0,
    )
    .unwrap();
    let cg = build_matrix(
        Method::InfluenceCg,
        &cfg,
        &base,
        None,
        &vocab,
        train,
        queries,
        0,
    )
    .unwrap();
    let scale = exact
        .rows()
        .iter()
        .flatten()
        .fold(0f64, |m, x| m.max(x.abs()));
    for k in 0..exact.n_queries() {
        for i in 0..exact.n_examples() {
            let (a, b) = (exact.get(k, i), cg.get(k, i));
            assert!(
                (a - b).abs() <= 1e-5 * a.abs().max(1e-3 * scale),
                "({k},{i}): {a} vs {b}"
            );
        }
    }
}

#[test]
fn matrices_are_deterministic() {
    let base = BaseModel::mlp(6, 3, 4).unwrap().randomized(2, 1.0);
    let a = LowRankAdaptation::init(
        &base,
        &LoraConfig {
            rank: 2,
            ..Default::default()
        },
        3,
    )
    .unwrap();
    let vocab = Vocab::synthetic(6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<Example> = (0..30)
        .map(|id| Example {
            id,
            input: (0..3).map(|_| rng.random_range(0..6)).collect(),
            output: (0..2).map(|_| rng.random_range(0..6)).collect(),
            topic: None,
        })
        .collect();
    let (train, queries) = data.split_at(26);
    // the Hessian at B = 0 is indefinite, so LiSSA needs a generous scale here
    let lissa = LissaConfig {
        damping: 0.01,
        depth: 20,
        repeats: 2,
        scale: Some(50.0),
    };
    let cfg = AttributionConfig {
        damping: 0.01,
        lissa: Some(lissa),
        ..Default::default()
    };
    for method in [Method::InfluenceLissa, Method::InfluenceExact, Method::Bm25] {
        let x = build_matrix(method, &cfg, &base, Some(&a), &vocab, train, queries, 5).unwrap();
        let y = build_matrix(method, &cfg, &base, Some(&a), &vocab, train, queries, 5).unwrap();
        assert_eq!(x, y, "{method}");
    }
    // conjugate gradients needs a positive definite system
    let err = build_matrix(
        Method::InfluenceCg,
        &cfg,
        &base,
        Some(&a),
        &vocab,
        train,
        queries,
        5,
    )
    .unwrap_err();
    assert!(matches!(err.root(), spa::Error::Numerical(_)));
    let (convex, data) = convex_instance(9, 40);
    let (train, queries) = data.split_at(36);
    let vocab = Vocab::synthetic(4).unwrap();
    let x = build_matrix(
        Method::InfluenceCg,
        &cfg,
        &convex,
        None,
        &vocab,
        train,
        queries,
        5,
    )
    .unwrap();
    let y = build_matrix(
        Method::InfluenceCg,
        &cfg,
        &convex,
        None,
        &vocab,
        train,
        queries,
        5,
    )
    .unwrap();
    assert_eq!(x, y);
}

#[test]
fn exact_refuses_large_models() {
    let base = BaseModel::convex(50, 41).unwrap();
    let vocab = Vocab::synthetic(50).unwrap();
    let z = Example {
        id: 0,
        input: vec![1],
        output: vec![2],
        topic: None,
    };
    let err = build_matrix(
        Method::InfluenceExact,
        &AttributionConfig::default(),
        &base,
        None,
        &vocab,
        std::slice::from_ref(&z),
        std::slice::from_ref(&z),
        0,
    )
    .unwrap_err();
    assert!(matches!(err.root(), spa::Error::Size(_)));
}
