use super::*;
use crate::cohortgen::Visit;
use crate::encoder::EncoderConfig;
use crate::numkit::{grad_check, Adam, GradCheckConfig};

fn mat(r: usize, c: usize, v: &[f64]) -> Tensor {
    Tensor::matrix(r, c, v.to_vec()).unwrap()
}

fn patient(history: &[&[usize]], index_code: usize, label: u8) -> PatientRecord {
    let mut visits: Vec<Visit> = history.iter().map(|v| Visit::new(v.to_vec())).collect();
    visits.push(Visit::new(vec![index_code]));
    PatientRecord {
        patient_id: 7,
        label,
        index_visit: visits.len() - 1,
        visits,
    }
}

fn label(rows: &[&[f64]]) -> LabelTensor {
    let d = rows[0].len();
    LabelTensor {
        code_ids: (0..rows.len()).collect(),
        matrix: mat(rows.len(), d, &rows.concat()),
    }
}

#[test]
fn pool_sum_skips_pads() {
    let x = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(pool_sum(&x, &[false, false]).unwrap().data(), &[4.0, 6.0]);
    assert_eq!(pool_sum(&mat(1, 2, &[5.0, -1.0]), &[false]).unwrap().data(), &[5.0, -1.0]);
    let x = mat(4, 2, &[1.0, 2.0, 3.0, 4.0, 100.0, 100.0, -7.0, 9.0]);
    assert_eq!(pool_sum(&x, &[false, false, true, true]).unwrap().data(), &[4.0, 6.0]);
    assert!(matches!(pool_sum(&x, &[true; 4]), Err(Error::EmptyHistory(_))));
}

#[test]
fn bc_prediction_is_a_logistic_of_the_pooled_vector() {
    let x = mat(2, 2, &[1.0, 0.0, 1.0, 1.0]);
    let keep = [false, false];
    let p = predict_bc(&x, &keep, &Tensor::vector(vec![0.0, 0.0]), 0.0).unwrap();
    assert_eq!(p.final_prob, 0.5);
    assert!(p.sub_scores.is_none());
    let p = predict_bc(&x, &keep, &Tensor::vector(vec![0.0, 0.0]), 1000.0).unwrap();
    assert!((p.final_prob - 1.0).abs() < 1e-12);
    let p = predict_bc(&x, &keep, &Tensor::vector(vec![1.0, -1.0]), 0.0).unwrap();
    let oracle = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((p.final_prob - oracle).abs() < 1e-15);
    assert!((p.final_prob - 0.731_058_578_630_004_9).abs() < 1e-15);
}

fn reference_params(d: usize) -> (EncoderParams, TargetCodeSet) {
    let gen = crate::cohortgen::GenConfig::default();
    let universe = crate::cohortgen::CodeUniverse::from_config(&gen).unwrap();
    let cfg = EncoderConfig {
        d_model: d,
        n_layers: 1,
        n_heads: 2,
        d_ff: 2 * d,
        max_seq_len: 16,
        max_visits: 17,
        vocab_size: universe.vocab.len(),
        dropout_rate: 0.0,
        init_std: 0.5,
        ..EncoderConfig::default()
    };
    let params = EncoderParams::init(&cfg, &mut Rng::new(21)).unwrap();
    let targets = TargetCodeSet::new(&universe.vocab, &crate::cohortgen::TARGET_CODES).unwrap();
    targets.ensure_disjoint(&universe.confounders).unwrap();
    (params, targets)
}

#[test]
fn label_tensor_rows_are_embedding_rows() {
    let (params, targets) = reference_params(8);
    let lt = extract_label_tensor(&params, &targets).unwrap();
    assert_eq!(lt.matrix.shape(), &[8, 8]);
    let emb = params.token_embedding();
    for (j, &id) in targets.ids.iter().enumerate() {
        let a: Vec<u64> = lt.matrix.row(j).iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = emb.row(id).iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }
    let one = TargetCodeSet {
        codes: vec![targets.codes[3].clone()],
        ids: vec![targets.ids[3]],
    };
    let lt1 = extract_label_tensor(&params, &one).unwrap();
    assert_eq!(lt1.matrix.shape(), &[1, 8]);
    assert_eq!(lt1.matrix.row(0), emb.row(targets.ids[3]));

    let mut perm = targets.clone();
    perm.ids.reverse();
    let lp = extract_label_tensor(&params, &perm).unwrap();
    for j in 0..8 {
        assert_eq!(lp.matrix.row(j), lt.matrix.row(7 - j));
    }
}

#[test]
fn target_code_set_validation() {
    let v = Vocabulary::from_codes(["A", "B"]).unwrap();
    assert!(TargetCodeSet::new(&v, &["A", "A"]).is_err());
    assert!(matches!(TargetCodeSet::new(&v, &["Z"]), Err(Error::Vocabulary(_))));
    let t = TargetCodeSet::new(&v, &["B"]).unwrap();
    assert!(t.ensure_disjoint(&[4]).is_err());
}

#[test]
fn sum_head_examples() {
    let ctx = mat(1, 2, &[1.0, 0.0]);
    let lt = label(&[&[0.0, 0.0], &[2.0, 0.0]]);
    let p = predict_sum(&ctx, &[false], &lt).unwrap();
    let s2 = 1.0 / (1.0 + (-2.0f64).exp());
    assert_eq!(p.sub_scores.as_deref(), Some(&[0.0, 2.0][..]));
    assert_eq!(p.sub_probs.as_ref().unwrap()[0], 0.5);
    assert!((p.final_prob - s2).abs() < 1e-15);
    assert!((p.final_prob - 0.880_797_077_977_882_3).abs() < 1e-15);

    let p = predict_sum(&mat(1, 2, &[0.0, 0.0]), &[false], &lt).unwrap();
    assert_eq!(p.final_prob, 0.5);

    let dup = label(&[&[0.0, 0.0], &[2.0, 0.0], &[2.0, 0.0]]);
    assert_eq!(predict_sum(&ctx, &[false], &dup).unwrap().final_prob, predict_sum(&ctx, &[false], &lt).unwrap().final_prob);
}

#[test]
fn max_of_sigmoids_is_sigmoid_of_max() {
    let mut rng = Rng::new(3);
    for _ in 0..1000 {
        let k = 1 + rng.below(8);
        let scores: Vec<f64> = (0..k).map(|_| 10.0 * rng.normal()).collect();
        let p = Prediction::from_sub_scores(HeadKind::Sum, scores.clone());
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(p.final_prob, sigmoid_scalar(m));
        assert_eq!(p.max_score(), m);
    }
}

#[test]
fn mask_query_appends_the_next_visit() {
    let q = build_mask_query(&patient(&[&[4, 5], &[6]], 3, 1), 64).unwrap();
    assert_eq!(q.token_ids, vec![4, 5, 6, MASK]);
    assert_eq!(q.visit_ids, vec![0, 0, 1, 2]);

    let q = build_mask_query(&patient(&[&[9]], 3, 0), 64).unwrap();
    assert_eq!(q.token_ids, vec![9, MASK]);
    assert_eq!(q.visit_ids, vec![0, 1]);

    let long: Vec<usize> = (10..80).collect();
    let q = build_mask_query(&patient(&[&long], 3, 0), 64).unwrap();
    assert_eq!(q.len(), 64);
    assert_eq!(q.token_ids[0], 17);
    assert_eq!(q.token_ids[62], 79);
    assert_eq!(q.token_ids[63], MASK);

    assert!(matches!(build_mask_query(&patient(&[], 3, 0), 64), Err(Error::EmptyHistory(_))));
}

#[test]
fn mask_head_with_zero_labels_is_uninformative() {
    let (params, _) = reference_params(8);
    let lt = LabelTensor {
        code_ids: vec![3, 4],
        matrix: Tensor::zeros(&[2, 8]),
    };
    for h in [&[10usize, 11][..], &[40]] {
        let p = predict_mask(&patient(&[h], 3, 1), &params, &lt).unwrap();
        assert_eq!(p.final_prob, 0.5);
    }
    let lt = LabelTensor {
        code_ids: vec![3],
        matrix: params.token_embedding().gather_rows(&[3]).unwrap(),
    };
    let pt = patient(&[&[12, 13], &[14]], 3, 1);
    assert_eq!(predict_mask(&pt, &params, &lt).unwrap(), predict_mask(&pt, &params, &lt).unwrap());
}

fn set(store: &mut ParamStore, name: &str, shape: &[usize], data: Vec<f64>) {
    let id = store.id(name).unwrap();
    store.get_mut(id).value = Tensor::new(shape.to_vec(), data).unwrap();
}

/// Normalises a 2-vector exactly as a layer norm does: `±δ/√(δ²+ε)`.
fn ln2(a: f64, b: f64, eps: f64) -> (f64, f64) {
    let delta = (a - b) / 2.0;
    let n = delta / (delta * delta + eps).sqrt();
    (n, -n)
}

#[test]
fn mask_head_matches_hand_computation() {
    let cfg = EncoderConfig {
        d_model: 2,
        n_layers: 1,
        n_heads: 1,
        d_ff: 2,
        max_seq_len: 4,
        max_visits: 5,
        vocab_size: 6,
        dropout_rate: 0.0,
        layer_norm_eps: 1e-12,
        init_std: 0.3,
    };
    let mut params = EncoderParams::init(&cfg, &mut Rng::new(5)).unwrap();
    let s = &mut params.store;
    let mut tok = vec![0.0; 12];
    tok[2..4].copy_from_slice(&[0.3, -0.2]); // MASK
    tok[6..8].copy_from_slice(&[1.0, 2.0]); // history code 3
    tok[8..10].copy_from_slice(&[0.5, -1.0]); // target 4
    tok[10..12].copy_from_slice(&[-0.2, 0.3]); // target 5
    set(s, "encoder.token_embedding", &[6, 2], tok);
    let mut vis = vec![0.0; 10];
    vis[2..4].copy_from_slice(&[0.1, 0.5]);
    set(s, "encoder.visit_embedding", &[5, 2], vis);
    for w in ["wo", "w1", "w2"] {
        set(s, &format!("encoder.layers.0.{w}"), &[2, 2], vec![0.0; 4]);
    }
    set(s, "encoder.layers.0.bo", &[2], vec![0.0; 2]);
    set(s, "encoder.layers.0.b1", &[2], vec![0.7, -0.4]);
    set(s, "encoder.layers.0.b2", &[2], vec![0.3, -0.1]);
    set(s, "encoder.layers.0.ln1_g", &[2], vec![2.0, 0.5]);
    set(s, "encoder.layers.0.ln1_b", &[2], vec![0.1, -0.3]);
    set(s, "encoder.layers.0.ln2_g", &[2], vec![1.5, -0.5]);
    set(s, "encoder.layers.0.ln2_b", &[2], vec![0.2, 0.4]);

    // The output projection is zero, so the MASK row never mixes with the
    // history and the feed-forward branch reduces to its output bias.
    let eps = 1e-12;
    let (e0, e1) = (0.3 + 0.1, -0.2 + 0.5);
    let (n0, n1) = ln2(e0, e1, eps);
    let (x0, x1) = (2.0 * n0 + 0.1, 0.5 * n1 - 0.3);
    let (r0, r1) = (x0 + 0.3, x1 - 0.1);
    let (m0, m1) = ln2(r0, r1, eps);
    let (q0, q1) = (1.5 * m0 + 0.2, -0.5 * m1 + 0.4);
    let scores = [0.5 * q0 - 1.0 * q1, -0.2 * q0 + 0.3 * q1];
    let expected = scores.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).fold(0.0, f64::max);

    let targets = TargetCodeSet {
        codes: vec!["T4".into(), "T5".into()],
        ids: vec![4, 5],
    };
    let lt = extract_label_tensor(&params, &targets).unwrap();
    let pred = predict_mask(&patient(&[&[3]], 4, 1), &params, &lt).unwrap();
    assert!((pred.final_prob - expected).abs() < 1e-10, "{} vs {expected}", pred.final_prob);
    let sub = pred.sub_scores.unwrap();
    assert!((sub[0] - scores[0]).abs() < 1e-10 && (sub[1] - scores[1]).abs() < 1e-10);
}

#[test]
fn single_row_heads_reduce_to_dot_product_logistic() {
    let (params, targets) = reference_params(8);
    let one = TargetCodeSet {
        codes: vec![targets.codes[0].clone()],
        ids: vec![targets.ids[0]],
    };
    let lt = extract_label_tensor(&params, &one).unwrap();
    let row = params.token_embedding().row(one.ids[0]).to_vec();
    let pt = patient(&[&[20, 21], &[22]], one.ids[0], 1);

    let seq = build_input(&pt, 16, false).unwrap();
    let ctx = params.encode(&seq).unwrap();
    let pooled: Vec<f64> = (0..8).map(|j| (0..ctx.rows()).map(|i| ctx.at(i, j)).sum()).collect();
    let z: f64 = row.iter().zip(&pooled).map(|(a, b)| a * b).sum();
    let p = predict_sum(&ctx, &seq.pad, &lt).unwrap();
    assert!((p.final_prob - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);

    let q = build_mask_query(&pt, 16).unwrap();
    let ctx = params.encode(&q).unwrap();
    let z: f64 = row.iter().zip(ctx.row(q.len() - 1)).map(|(a, b)| a * b).sum();
    let p = predict_mask(&pt, &params, &lt).unwrap();
    assert!((p.final_prob - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
}

#[test]
fn loss_examples() {
    let half = Prediction::from_logit(HeadKind::Bc, 0.0);
    assert!((finetune_loss(&half, 0) - 2f64.ln()).abs() < 1e-15);
    assert!((finetune_loss(&half, 1) - 2f64.ln()).abs() < 1e-15);
    let sure = Prediction::from_logit(HeadKind::Bc, 40.0);
    assert!(finetune_loss(&sure, 1) < 1e-6);

    let logit09 = (0.9f64 / 0.1).ln();
    let p = Prediction::from_sub_scores(HeadKind::Sum, vec![0.0, logit09]);
    assert!((finetune_loss(&p, 0) + 0.1f64.ln()).abs() < 1e-12);

    let mut tape = Tape::new();
    let s = tape.input(mat(1, 2, &[0.0, logit09]));
    let top = tape.max(s);
    let l = tape.bce_logit(top, 0.0);
    assert!((tape.scalar(l) + 0.1f64.ln()).abs() < 1e-12);
    let g = tape.backward(l).unwrap();
    let g = g.get(s).unwrap().data();
    assert_eq!(g[0], 0.0);
    assert!((g[1] - 0.9).abs() < 1e-12);

    let ml = finetune_loss_multilabel(&p, Some(1)).unwrap();
    assert!((ml - (2f64.ln() - 0.9f64.ln()) / 2.0).abs() < 1e-12);
    assert!(finetune_loss_multilabel(&half, None).is_err());
}

fn heads_for(kind: HeadKind, freeze: bool, supervision: Supervision) -> HeadModel {
    let (params, targets) = reference_params(8);
    HeadModel::new(kind, &params, &targets, freeze, supervision, &mut Rng::new(2)).unwrap()
}

#[test]
fn head_model_predictions_agree_with_free_functions() {
    let pt = patient(&[&[20, 21], &[22, 23]], 3, 1);
    let (params, targets) = reference_params(8);
    let lt = extract_label_tensor(&params, &targets).unwrap();
    let m = heads_for(HeadKind::Mask, false, Supervision::Max);
    assert_eq!(m.predict(&pt).unwrap(), predict_mask(&pt, &params, &lt).unwrap());
    let s = heads_for(HeadKind::Sum, false, Supervision::Max);
    let seq = build_input(&pt, 16, false).unwrap();
    let ctx = params.encode(&seq).unwrap();
    let got = s.predict(&pt).unwrap();
    let want = predict_sum(&ctx, &seq.pad, &lt).unwrap();
    assert!((got.final_prob - want.final_prob).abs() < 1e-15);
    let b = heads_for(HeadKind::Bc, false, Supervision::Max);
    let (w, bias) = b.bc.unwrap();
    let want = predict_bc(&ctx, &seq.pad, b.store.value(w), b.store.value(bias).item()).unwrap();
    assert!((b.predict(&pt).unwrap().final_prob - want.final_prob).abs() < 1e-15);
    let scores = m.scores(&[&pt, &pt]).unwrap();
    assert_eq!(scores[0], scores[1]);
    assert_eq!(scores[0], m.predict(&pt).unwrap().max_score());
}

#[test]
fn bc_ignores_pad_contents() {
    let m = heads_for(HeadKind::Bc, false, Supervision::Max);
    let base = InputSequence::new(vec![20, 21, 22], vec![0, 0, 1]).unwrap().padded_to(6);
    let mut other = base.clone();
    other.token_ids[3] = 50;
    other.token_ids[5] = 77;
    other.visit_ids[4] = 3;
    let run = |s: &InputSequence| {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape).unwrap();
        let v = m.forward(&mut tape, &b, s, &mut Mode::Eval).unwrap();
        tape.value(v).item()
    };
    assert_eq!(run(&base), run(&other));
}

#[test]
fn live_label_tensor_tracks_trained_embeddings() {
    let pt = patient(&[&[20, 21], &[22]], 3, 1);
    for (freeze, live) in [(false, true), (true, false)] {
        let mut m = heads_for(HeadKind::Mask, freeze, Supervision::Max);
        let before = m.label_tensor().unwrap();
        let mut adam = Adam::new(&m.store, 1e-2);
        for _ in 0..3 {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape).unwrap();
            let l = m.loss(&mut tape, &b, &pt, &mut Mode::Eval).unwrap();
            m.store.zero_grad();
            tape.backward(l).unwrap().accumulate_into(&tape, &mut m.store);
            adam.step(&mut m.store);
            let lt = m.label_tensor().unwrap();
            if live {
                let emb = m.encoder.token_embedding(&m.store).gather_rows(&m.targets.ids).unwrap();
                assert_eq!(lt.matrix, emb);
            } else {
                assert_eq!(lt, before);
            }
        }
        assert_ne!(m.label_tensor().unwrap().matrix == before.matrix, live);
    }
}

fn check_head(kind: HeadKind, supervision: Supervision, label: u8) {
    let m = heads_for(kind, false, supervision);
    let pt = patient(&[&[20, 21, 9], &[22]], m.targets.ids[2], label);
    let report = grad_check(
        |tape, store| {
            let mm = HeadModel {
                store: store.clone(),
                ..m.clone()
            };
            let b = mm.bind(tape)?;
            mm.loss(tape, &b, &pt, &mut Mode::Eval)
        },
        &m.store,
        &GradCheckConfig {
            samples_per_param: 6,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{kind:?} {report:?}");
    assert!(report.checked > 100);
}

#[test]
fn head_gradients_match_finite_differences() {
    check_head(HeadKind::Bc, Supervision::Max, 1);
    check_head(HeadKind::Sum, Supervision::Max, 0);
    check_head(HeadKind::Mask, Supervision::Max, 1);
    check_head(HeadKind::Mask, Supervision::MultiLabel, 1);
    check_head(HeadKind::Sum, Supervision::MultiLabel, 0);
}

#[test]
fn calibration_standardizes_label_scores_without_reordering() {
    let pts = [
        patient(&[&[20, 21], &[22]], 3, 1),
        patient(&[&[30], &[31, 32, 33]], 40, 0),
        patient(&[&[25, 26, 27]], 3, 1),
    ];
    let refs: Vec<&PatientRecord> = pts.iter().collect();
    for kind in [HeadKind::Sum, HeadKind::Mask] {
        let mut m = heads_for(kind, false, Supervision::Max);
        let before = m.scores(&refs).unwrap();
        m.calibrate_scores(&refs).unwrap();
        let after = m.scores(&refs).unwrap();
        let mean = before.iter().sum::<f64>() / 3.0;
        let sd = (before.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        for (a, b) in after.iter().zip(&before) {
            assert!((a - (b - mean) / sd).abs() < 1e-9, "{a} {b}");
        }
        assert!(after.iter().sum::<f64>().abs() < 1e-9);
        assert!((after.iter().map(|a| a * a).sum::<f64>() / 3.0 - 1.0).abs() < 1e-9);
        // a second calibration starts from the raw scores again
        m.calibrate_scores(&refs).unwrap();
        for (a, b) in m.scores(&refs).unwrap().iter().zip(&after) {
            assert!((a - b).abs() < 1e-9);
        }
    }
    let mut bc = heads_for(HeadKind::Bc, false, Supervision::Max);
    let before = bc.scores(&refs).unwrap();
    bc.calibrate_scores(&refs).unwrap();
    assert_eq!(bc.scores(&refs).unwrap(), before);
}
