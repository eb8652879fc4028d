use super::*;
use crate::rng::stream;
use proptest::prelude::*;
use rand::Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = stream(seed, &[]);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn labels(way: usize, per: usize) -> Vec<usize> {
    (0..way).flat_map(|k| std::iter::repeat_n(k, per)).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

// ---- independent oracles -------------------------------------------------

fn mean_oracle(emb: &Tensor, labels: &[usize], k: usize) -> Vec<f64> {
    let d = emb.item_len();
    let mut acc = vec![0.0; d];
    let mut n = 0.0;
    for i in 0..labels.len() {
        if labels[i] == k {
            n += 1.0;
            for j in 0..d {
                acc[j] += emb.data()[i * d + j];
            }
        }
    }
    acc.into_iter().map(|v| v / n).collect()
}

fn softmax_oracle(q: &[f64], protos: &[Vec<f64>]) -> Vec<f64> {
    let mut e = Vec::new();
    for c in protos {
        let mut s = 0.0;
        for j in 0..q.len() {
            s += (q[j] - c[j]) * (q[j] - c[j]);
        }
        e.push((-s).exp());
    }
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for j in 0..a.len() {
        ab += a[j] * b[j];
        aa += a[j] * a[j];
        bb += b[j] * b[j];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

// ---- prototypes ----------------------------------------------------------

#[test]
fn one_shot_prototype_is_the_embedding() {
    let e = rand_tensor(&[3, 4], 1);
    let p = prototypes(&e, &[0, 1, 2], 3).unwrap();
    for k in 0..3 {
        assert_eq!(p.protos[k], e.item(k).to_vec());
    }
}

#[test]
fn prototype_of_two_points() {
    let e = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
    assert_eq!(
        prototypes(&e, &[0, 0], 1).unwrap().protos[0],
        vec![1.0, 1.0]
    );
}

#[test]
fn prototypes_match_loop_oracle() {
    let e = rand_tensor(&[25, 16], 2);
    let l = labels(5, 5);
    let p = prototypes(&e, &l, 5).unwrap();
    for k in 0..5 {
        for (a, b) in p.protos[k].iter().zip(mean_oracle(&e, &l, k)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_class_is_an_error() {
    let e = rand_tensor(&[2, 3], 3);
    assert!(matches!(
        prototypes(&e, &[0, 0], 2),
        Err(Error::EmptyClass(1))
    ));
}

// ---- classify / nll ------------------------------------------------------

#[test]
fn query_at_prototype_dominates() {
    let ps = PrototypeSet {
        protos: vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, -10.0]],
        counts: vec![1; 3],
    };
    let s = classify(&[0.0, 0.0], &ps, Distance::SquaredEuclidean).unwrap();
    assert!(s.probs[0] > 0.99);
}

#[test]
fn equidistant_prototypes_give_uniform_scores() {
    let ps = PrototypeSet {
        protos: vec![
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ],
        counts: vec![1; 4],
    };
    let s = classify(&[0.0, 0.0], &ps, Distance::SquaredEuclidean).unwrap();
    for p in s.probs {
        assert!((p - 0.25).abs() < 1e-12);
    }
}

#[test]
fn classify_matches_softmax_oracle() {
    let e = rand_tensor(&[5, 8], 4);
    let ps = prototypes(&e, &[0, 1, 2, 3, 4], 5).unwrap();
    let q = rand_tensor(&[1, 8], 5);
    let s = classify(q.item(0), &ps, Distance::SquaredEuclidean).unwrap();
    for (a, b) in s.probs.iter().zip(softmax_oracle(q.item(0), &ps.protos)) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn nll_of_two_equidistant_prototypes_is_ln2() {
    let ps = PrototypeSet {
        protos: vec![vec![1.0], vec![-1.0]],
        counts: vec![1, 1],
    };
    let q = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
    let l = fewshot_nll(&q, &[0], &ps, Distance::SquaredEuclidean);
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn nll_vanishes_when_others_are_far() {
    let ps = PrototypeSet {
        protos: vec![vec![0.0], vec![1e3]],
        counts: vec![1, 1],
    };
    let q = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
    assert!(fewshot_nll(&q, &[0], &ps, Distance::SquaredEuclidean) < 1e-12);
}

#[test]
fn nll_equals_cross_entropy_of_classify() {
    for dist in [Distance::SquaredEuclidean, Distance::Euclidean] {
        let s = rand_tensor(&[10, 6], 6);
        let ps = prototypes(&s, &labels(5, 2), 5).unwrap();
        let q = rand_tensor(&[15, 6], 7);
        let ql = labels(5, 3);
        let nll = fewshot_nll(&q, &ql, &ps, dist);
        let ce: f64 = (0..15)
            .map(|i| -classify(q.item(i), &ps, dist).unwrap().probs[ql[i]].ln())
            .sum::<f64>()
            / 15.0;
        assert!((nll - ce).abs() < 1e-6);
        let (loss, ..) = proto_loss(&s, &labels(5, 2), &q, &ql, 5, dist).unwrap();
        assert!((loss - nll).abs() < 1e-12);
    }
}

fn fd_check(f: impl Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor) {
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += eps;
        let mut m = x.clone();
        m.data_mut()[i] -= eps;
        let fd = (f(&p) - f(&m)) / (2.0 * eps);
        let a = analytic.data()[i];
        if fd.abs().max(a.abs()) > 1e-7 {
            worst = worst.max(rel_err(fd, a));
        }
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}

#[test]
fn proto_gradients_match_finite_differences() {
    for dist in [Distance::SquaredEuclidean, Distance::Euclidean] {
        let s = rand_tensor(&[6, 5], 8);
        let sl = labels(3, 2);
        let q = rand_tensor(&[6, 5], 9);
        let ql = labels(3, 2);
        let (_, _, _, ds, dq) = proto_loss(&s, &sl, &q, &ql, 3, dist).unwrap();
        fd_check(|q| proto_loss(&s, &sl, q, &ql, 3, dist).unwrap().0, &q, &dq);
        fd_check(|s| proto_loss(s, &sl, &q, &ql, 3, dist).unwrap().0, &s, &ds);
    }
}

// ---- matching ------------------------------------------------------------

#[test]
fn matching_identity_query_wins() {
    let s = rand_tensor(&[5, 8], 10);
    let sc = matching_scores(s.item(3), &s, &[0, 1, 2, 3, 4], 5).unwrap();
    assert_eq!(sc.argmax(), 3);
}

#[test]
fn matching_matches_oracle() {
    let s = rand_tensor(&[10, 8], 11);
    let sl = labels(5, 2);
    let q = rand_tensor(&[1, 8], 12);
    let sc = matching_scores(q.item(0), &s, &sl, 5).unwrap();
    let e: Vec<f64> = (0..10)
        .map(|i| cosine_oracle(q.item(0), s.item(i)).exp())
        .collect();
    let z: f64 = e.iter().sum();
    for k in 0..5 {
        let expect: f64 = (0..10).filter(|&i| sl[i] == k).map(|i| e[i] / z).sum();
        assert!((sc.probs[k] - expect).abs() < 1e-6);
    }
}

#[test]
fn matching_dimension_mismatch() {
    let s = rand_tensor(&[2, 8], 11);
    assert!(matching_scores(&[0.0; 7], &s, &[0, 1], 2).is_err());
}

#[test]
fn matching_gradients_match_finite_differences() {
    let s = rand_tensor(&[6, 5], 13);
    let sl = labels(3, 2);
    let q = rand_tensor(&[4, 5], 14);
    let ql = vec![0, 1, 2, 1];
    let (_, _, _, ds, dq) = matching_loss(&s, &sl, &q, &ql, 3).unwrap();
    fd_check(|q| matching_loss(&s, &sl, q, &ql, 3).unwrap().0, &q, &dq);
    fd_check(|s| matching_loss(s, &sl, &q, &ql, 3).unwrap().0, &s, &ds);
}

// ---- relation ------------------------------------------------------------

fn relation_setup() -> (Head, ParamState, Tensor, Vec<usize>, Tensor, Vec<usize>) {
    let head = Head {
        kind: HeadKind::Relation,
        distance: Distance::SquaredEuclidean,
        relation: RelationConfig {
            channels: 4,
            hidden: 3,
        },
    };
    let params = head.init_params(3, &mut stream(15, &[]));
    let s = rand_tensor(&[4, 3, 2, 2], 16);
    let q = rand_tensor(&[3, 3, 2, 2], 17);
    (head, params, s, labels(2, 2), q, vec![0, 1, 1])
}

#[test]
fn zeroed_relation_weights_give_uniform_scores() {
    let (head, mut params, s, sl, q, _) = relation_setup();
    for (_, t) in params.iter_mut() {
        t.fill(0.0);
    }
    for sc in head.scores(&params, &s, &sl, &q, 2).unwrap() {
        assert!((sc.probs[0] - 0.5).abs() < 1e-12);
    }
}

#[test]
fn relation_gradients_match_finite_differences() {
    let (head, params, s, sl, q, ql) = relation_setup();
    let out = head.loss(&params, &s, &sl, &q, &ql, 2).unwrap();
    fd_check(
        |q| head.loss(&params, &s, &sl, q, &ql, 2).unwrap().loss,
        &q,
        &out.d_query,
    );
    fd_check(
        |s| head.loss(&params, s, &sl, &q, &ql, 2).unwrap().loss,
        &s,
        &out.d_support,
    );
    for (name, g) in out.param_grads.iter() {
        let base = params.get(name).unwrap().clone();
        fd_check(
            |t| {
                let mut p = params.clone();
                p.insert(name, t.clone());
                head.loss(&p, &s, &sl, &q, &ql, 2).unwrap().loss
            },
            &base,
            g,
        );
    }
}

#[test]
fn relation_rejects_mismatched_maps() {
    let (head, params, s, sl, _, _) = relation_setup();
    let q = rand_tensor(&[1, 3, 3, 3], 18);
    assert!(head.scores(&params, &s, &sl, &q, 2).is_err());
}

// ---- rotation ------------------------------------------------------------

#[test]
fn uniform_rotation_logits_give_ln4() {
    let rh = RotationHead::new(6);
    let mut p = rh.init_params(&mut stream(19, &[]));
    p.get_mut(rotation_names::FC2_W).unwrap().fill(0.0);
    let e = rand_tensor(&[5, 6], 20);
    let (l, ..) = rh.loss(&p, &e, &[0, 1, 2, 3, 0]).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn saturated_correct_rotation_logits_give_zero_loss() {
    let rh = RotationHead::new(2);
    let mut p = rh.init_params(&mut stream(21, &[]));
    p.get_mut(rotation_names::FC2_W).unwrap().fill(0.0);
    p.get_mut(rotation_names::FC2_B)
        .unwrap()
        .data_mut()
        .copy_from_slice(&[0.0, 0.0, 100.0, 0.0]);
    let e = rand_tensor(&[3, 2], 22);
    let (l, ..) = rh.loss(&p, &e, &[2, 2, 2]).unwrap();
    assert!(l < 1e-12);
}

#[test]
fn rotation_loss_matches_scalar_oracle() {
    let rh = RotationHead {
        feature_dim: 5,
        hidden: 7,
    };
    let p = rh.init_params(&mut stream(23, &[]));
    let e = rand_tensor(&[6, 5], 24);
    let y = [0, 3, 1, 2, 2, 0];
    let (l, ..) = rh.loss(&p, &e, &y).unwrap();
    let w1 = p.get(rotation_names::FC1_W).unwrap().data();
    let b1 = p.get(rotation_names::FC1_B).unwrap().data();
    let w2 = p.get(rotation_names::FC2_W).unwrap().data();
    let b2 = p.get(rotation_names::FC2_B).unwrap().data();
    let mut total = 0.0;
    for r in 0..6 {
        let x = e.item(r);
        let mut h = [0.0; 7];
        for o in 0..7 {
            let mut s = b1[o];
            for i in 0..5 {
                s += w1[o * 5 + i] * x[i];
            }
            h[o] = if s > 0.0 { s } else { 0.0 };
        }
        let mut z = [0.0; 4];
        for o in 0..4 {
            z[o] = b2[o];
            for i in 0..7 {
                z[o] += w2[o * 7 + i] * h[i];
            }
        }
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        total += -(z[y[r]].exp() / denom).ln();
    }
    assert!((l - total / 6.0).abs() < 1e-6);
}

#[test]
fn rotation_gradients_match_finite_differences() {
    let rh = RotationHead {
        feature_dim: 5,
        hidden: 7,
    };
    let p = rh.init_params(&mut stream(25, &[]));
    let e = rand_tensor(&[6, 5], 26);
    let y = [0, 3, 1, 2, 2, 0];
    let (_, de, pg) = rh.loss(&p, &e, &y).unwrap();
    fd_check(|e| rh.loss(&p, e, &y).unwrap().0, &e, &de);
    for (name, g) in pg.iter() {
        let base = p.get(name).unwrap().clone();
        fd_check(
            |t| {
                let mut q = p.clone();
                q.insert(name, t.clone());
                rh.loss(&q, &e, &y).unwrap().0
            },
            &base,
            g,
        );
    }
}

#[test]
fn rotation_label_out_of_range() {
    let rh = RotationHead::new(2);
    let p = rh.init_params(&mut stream(27, &[]));
    assert!(rh.loss(&p, &rand_tensor(&[1, 2], 1), &[4]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_are_distributions_and_shift_invariant(seed in 0u64..10_000, shift in -50.0f64..50.0) {
        let e = rand_tensor(&[4, 3], seed);
        let ps = prototypes(&e, &[0, 1, 2, 3], 4).unwrap();
        let q = rand_tensor(&[1, 3], seed + 1);
        let s = classify(q.item(0), &ps, Distance::SquaredEuclidean).unwrap();
        prop_assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(s.probs.iter().all(|&p| p >= 0.0));
        let shifted: Vec<f64> = ps.protos.iter()
            .map(|c| -(Distance::SquaredEuclidean.eval(q.item(0), c) + shift))
            .collect();
        let s2 = ClassScores { probs: crate::nn::softmax(&shifted) };
        prop_assert_eq!(s.argmax(), s2.argmax());
    }

    #[test]
    fn prototypes_are_order_invariant(seed in 0u64..10_000) {
        let e = rand_tensor(&[6, 4], seed);
        let l = [0, 1, 0, 1, 0, 1];
        let perm = [4, 1, 0, 5, 2, 3];
        let mut pe = Tensor::zeros(&[6, 4]);
        let mut pl = [0; 6];
        for (dst, &src) in perm.iter().enumerate() {
            pe.item_mut(dst).copy_from_slice(e.item(src));
            pl[dst] = l[src];
        }
        let a = prototypes(&e, &l, 2).unwrap();
        let b = prototypes(&pe, &pl, 2).unwrap();
        for k in 0..2 {
            for (x, y) in a.protos[k].iter().zip(&b.protos[k]) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
