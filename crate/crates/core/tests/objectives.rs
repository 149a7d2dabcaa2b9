mod common;

use common::*;
use cssnet::autograd::Graph;
use cssnet::compositors::Head;
use cssnet::corpus::AttributeSchema;
use cssnet::dataset::{Corpus, CorpusConfig};
use cssnet::model::Batch;
use cssnet::params::{ParamGroup, ParamStore};
use cssnet::objectives::*;
use cssnet::tensor::Tensor;
use proptest::prelude::*;

fn unit_rows(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| unit(r.clone())).collect::<Vec<_>>()).unwrap()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

// -mean_i sum_j y_ij log softmax(s q_i . k_j)
fn ce_oracle(q: &[Vec<f64>], k: &[Vec<f64>], positives: &[usize], s: f64, eps: f64) -> f64 {
    let n = k.len();
    let mut total = 0.0;
    for (qi, &p) in q.iter().zip(positives) {
        let logits: Vec<f64> = k.iter().map(|kj| s * dot(qi, kj)).collect();
        let lse = log_sum_exp(&logits);
        for (j, l) in logits.iter().enumerate() {
            let y = if j == p { 1.0 - eps } else { eps / (n - 1) as f64 };
            total -= y * (l - lse);
        }
    }
    total / q.len() as f64
}

fn softmax_rows(q: &[Vec<f64>], k: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k.iter().map(|kj| s * dot(qi, kj)).collect();
            let lse = log_sum_exp(&logits);
            logits.iter().map(|l| (l - lse).exp()).collect()
        })
        .collect()
}

fn kl_oracle(pm: &[Vec<f64>], ph: &[Vec<f64>], l1: f64, l2: f64) -> f64 {
    let mut total = 0.0;
    for (rm, rh) in pm.iter().zip(ph) {
        for (m, h) in rm.iter().zip(rh) {
            let w = (l1 * m + l2 * h) / (l1 + l2);
            total += m * (m / w).ln() + h * (h / w).ln();
        }
    }
    total / pm.len() as f64
}

fn bbc_value(q: &Tensor, k: &Tensor, s: f64, eps: f64) -> f64 {
    let mut g = Graph::new();
    let (q, k) = (g.constant(q.clone()), g.constant(k.clone()));
    let l = bbc_loss(&mut g, q, k, s, eps).unwrap();
    g.value(l).item()
}

fn gwc_value(q: &Tensor, protos: &Tensor, rows: &[usize], s: f64, eps: f64) -> f64 {
    let mut g = Graph::new();
    let (q, p) = (g.constant(q.clone()), g.constant(protos.clone()));
    let l = gwc_loss(&mut g, q, p, rows, s, eps).unwrap();
    g.value(l).item()
}

fn kl_value(pm: &Tensor, ph: &Tensor, weights: &ConsensusWeights) -> f64 {
    let mut g = Graph::new();
    let (m, h) = (g.constant(pm.clone()), g.constant(ph.clone()));
    let l = kl_consensus(&mut g, m, h, weights).unwrap();
    g.value(l).item()
}

fn lambdas(l1: f64, l2: f64) -> ConsensusWeights {
    ConsensusWeights {
        lambda1: l1,
        lambda2: l2,
        ..ConsensusWeights::default()
    }
}

#[test]
fn uniform_batch_gives_ln_b() {
    let q = unit_rows(&vec![vec![1.0, 0.0, 0.0]; 4]);
    let loss = bbc_value(&q, &q, SIMILARITY_SCALE, 0.0);
    assert!((loss - 4f64.ln()).abs() < 1e-9, "{loss}");
    // orthogonal queries and keys are uniform too
    let k = unit_rows(&vec![vec![0.0, 1.0, 0.0]; 4]);
    assert!((bbc_value(&q, &k, SIMILARITY_SCALE, 0.0) - 4f64.ln()).abs() < 1e-9);
}

#[test]
fn two_row_batch_example() {
    // query 0 sees scaled similarities (2, 0) with the positive first
    let q = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let k = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let loss = bbc_value(&q, &k, 2.0, 0.0);
    let per_query = (1.0 + (-2f64).exp()).ln();
    assert!((per_query - 0.1269).abs() < 1e-4);
    assert!((loss - per_query).abs() < 1e-12);
}

#[test]
fn separated_batch_loss_falls_with_scale() {
    let q = unit_rows(&[vec![1.0, 0.1, 0.0], vec![0.0, 1.0, 0.2], vec![0.1, 0.0, 1.0]]);
    let mut last = f64::INFINITY;
    for s in [1.0, 2.0, 5.0, 10.0, 20.0, 50.0] {
        let l = bbc_value(&q, &q, s, 0.0);
        assert!(l < last && l >= 0.0, "s={s}: {l}");
        last = l;
    }
    assert!(last < 1e-12);
}

#[test]
fn gwc_examples() {
    let q = unit_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
    let protos = unit_rows(&vec![vec![0.0, 1.0]; 10]);
    assert!((gwc_value(&q, &protos, &[3, 7], SIMILARITY_SCALE, 0.0) - 10f64.ln()).abs() < 1e-12);

    let q = unit_rows(&[vec![1.0, 0.3, -0.2], vec![0.1, 1.0, 0.4], vec![-0.5, 0.2, 1.0]]);
    let k = unit_rows(&[vec![0.9, 0.1, 0.0], vec![0.3, 0.8, 0.1], vec![0.0, 0.4, 1.0]]);
    for eps in [0.0, 0.1] {
        assert_eq!(gwc_value(&q, &k, &[0, 1, 2], 10.0, eps), bbc_value(&q, &k, 10.0, eps));
    }
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    assert!(gwc_loss(&mut g, qv, kv, &[0, 1], 10.0, 0.0).is_err());
    assert!(gwc_loss(&mut g, qv, kv, &[0, 1, 3], 10.0, 0.0).is_err());
}

#[test]
fn gwc_matches_brute_force() {
    let q = unit_rows(&[vec![0.3, -1.0, 0.5, 0.2], vec![1.0, 0.1, 0.0, -0.3], vec![0.2, 0.2, 0.9, 0.4]]);
    let protos = unit_rows(&[
        vec![1.0, 0.0, 0.2, 0.1],
        vec![0.1, -0.9, 0.3, 0.0],
        vec![-0.4, 0.5, 0.5, 0.5],
        vec![0.0, 0.1, 1.0, 0.3],
        vec![0.7, 0.7, 0.0, -0.1],
        vec![0.2, -0.3, 0.1, 1.0],
    ]);
    let rows = [1, 4, 3];
    for eps in [0.0, 0.1, 0.3] {
        let got = gwc_value(&q, &protos, &rows, 7.5, eps);
        let want = ce_oracle(&rows_of(&q), &rows_of(&protos), &rows, 7.5, eps);
        assert!((got - want).abs() < 1e-12, "eps {eps}: {got} vs {want}");
    }
}

#[test]
fn gwc_dominates_in_batch_loss_with_hard_extra_prototypes() {
    let q = unit_rows(&[vec![1.0, 0.2, 0.0], vec![0.0, 1.0, 0.3], vec![0.2, 0.0, 1.0]]);
    let k = unit_rows(&[vec![0.9, 0.3, 0.1], vec![0.1, 0.9, 0.2], vec![0.3, 0.1, 0.9]]);
    let qr = rows_of(&q);
    let kr = rows_of(&k);
    let min_sim = qr
        .iter()
        .flat_map(|a| kr.iter().map(move |b| dot(a, b)))
        .fold(f64::INFINITY, f64::min);
    let extras = vec![vec![0.5, 0.5, 0.5], vec![0.6, 0.6, 0.2]];
    let mut protos = kr.clone();
    protos.extend(extras.into_iter().map(unit));
    for qi in &qr {
        for p in &protos[3..] {
            assert!(dot(qi, p) >= min_sim);
        }
    }
    let protos = Tensor::from_rows(&protos).unwrap();
    assert!(gwc_value(&q, &protos, &[0, 1, 2], 10.0, 0.0) >= bbc_value(&q, &k, 10.0, 0.0));
}

#[test]
fn smoothing_examples() {
    let y = smoothed_labels(5, 2, 0.1).unwrap();
    assert_close(&y, &[0.025, 0.025, 0.9, 0.025, 0.025], 1e-15);
    assert_eq!(smoothed_labels(4, 1, 0.0).unwrap(), [0.0, 1.0, 0.0, 0.0]);
    assert_eq!(smoothed_labels(1, 0, 0.0).unwrap(), [1.0]);
    assert!(smoothed_labels(1, 0, 0.1).is_err());
    assert!(smoothed_labels(3, 3, 0.0).is_err());
    assert!(smoothed_labels(3, 0, -0.1).is_err());
}

#[test]
fn unsmoothed_loss_equals_one_hot_cross_entropy_bitwise() {
    let q = unit_rows(&[vec![0.3, -1.0, 0.5], vec![1.0, 0.1, 0.0], vec![0.2, 0.2, 0.9], vec![-0.3, 0.4, 0.1]]);
    let k = unit_rows(&[vec![0.9, 0.3, 0.1], vec![0.1, 0.9, 0.2], vec![0.3, 0.1, 0.9], vec![0.2, 0.2, 0.2]]);
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    let logits = similarity_logits(&mut g, qv, kv, SIMILARITY_SCALE).unwrap();
    let lp = g.log_softmax(logits);
    let lp = g.value(lp).clone();
    let picked: f64 = (0..4).map(|i| lp.row(i)[i]).sum();
    let one_hot = picked * (-1.0 / 4.0);
    assert_eq!(bbc_value(&q, &k, SIMILARITY_SCALE, 0.0).to_bits(), one_hot.to_bits());

    let rows = [2, 0, 3, 3];
    let picked: f64 = rows.iter().enumerate().map(|(i, &r)| lp.row(i)[r]).sum();
    let one_hot = picked * (-1.0 / 4.0);
    assert_eq!(gwc_value(&q, &k, &rows, SIMILARITY_SCALE, 0.0).to_bits(), one_hot.to_bits());
}

#[test]
fn kl_example_and_identity() {
    let pm = Tensor::new(vec![1, 2], vec![0.8, 0.2]).unwrap();
    let ph = Tensor::new(vec![1, 2], vec![0.6, 0.4]).unwrap();
    let loss = kl_value(&pm, &ph, &lambdas(1.0, 1.0));
    let oracle = kl_oracle(&rows_of(&pm), &rows_of(&ph), 1.0, 1.0);
    assert!((loss - oracle).abs() < 1e-15);
    assert!((loss - 0.0483).abs() < 5e-5, "{loss}");
    for (l1, l2) in [(10.0, 1.0), (1.0, 0.0), (0.0, 3.0)] {
        assert_eq!(kl_value(&pm, &pm, &lambdas(l1, l2)), 0.0);
    }
}

#[test]
fn consensus_target_is_normalized_and_detached() {
    let pm = Tensor::new(vec![2, 2], vec![0.8, 0.2, 0.5, 0.5]).unwrap();
    let ph = Tensor::new(vec![2, 2], vec![0.6, 0.4, 0.1, 0.9]).unwrap();
    let w = lambdas(10.0, 1.0);
    let log_pw = consensus_log_target(&pm, &ph, &w).unwrap();
    for (r, row) in rows_of(&log_pw).iter().enumerate() {
        let total: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-15);
        for (c, v) in row.iter().enumerate() {
            let want = (10.0 * pm.row(r)[c] + ph.row(r)[c]) / 11.0;
            assert!((v.exp() - want).abs() < 1e-15);
        }
    }
    // gradient of KL(p || c) in p with c fixed is ln(p / c) + 1
    let mut store = ParamStore::new();
    let ids = [store.insert("pm", ParamGroup::Main, pm.clone()), store.insert("ph", ParamGroup::Main, ph.clone())];
    let mut g = Graph::new();
    let m = g.param(&store, ids[0]);
    let h = g.param(&store, ids[1]);
    let kl = kl_consensus(&mut g, m, h, &w).unwrap();
    let grads = g.backward(kl).unwrap();
    for (p, id) in [(&pm, ids[0]), (&ph, ids[1])] {
        let grad = grads.get(id).unwrap();
        for i in 0..4 {
            let want = ((p.data()[i]).ln() - log_pw.data()[i] + 1.0) / 2.0;
            assert!((grad.data()[i] - want).abs() < 1e-12);
        }
    }
    assert!(consensus_log_target(&pm, &ph, &lambdas(0.0, 0.0)).is_err());
    assert!(consensus_log_target(&pm, &Tensor::zeros(&[2, 3]), &w).is_err());
}

fn tiny_batch(n: usize) -> (Corpus, Vec<usize>) {
    let cfg = CorpusConfig {
        items: 40,
        triplets: n,
        queries: 2,
        seed: 9,
        ..CorpusConfig::default()
    };
    let corpus = Corpus::generate(&AttributeSchema::default_schema(), &cfg).unwrap();
    let idx = (0..n).collect();
    (corpus, idx)
}

#[test]
fn total_loss_equals_recomputed_terms() {
    let model = small_model(21);
    let (corpus, idx) = tiny_batch(5);
    let picked: Vec<_> = idx.iter().map(|&i| &corpus.train[i]).collect();
    let batch = Batch::from_triplets(&corpus.catalog, &picked, true).unwrap();
    for smoothing in [0.0, 0.1] {
        let cfg = LossConfig {
            smoothing,
            ..LossConfig::default()
        };
        let mut g = Graph::new();
        let (root, breakdown) = total_loss(&mut g, &model, &batch, &cfg).unwrap();

        let queries = model.compose_queries(&batch, &Head::CONSENSUS).unwrap();
        let targets = model.embed_targets(batch.targets.as_ref().unwrap(), &Head::CONSENSUS).unwrap();
        let diag: Vec<usize> = (0..5).collect();
        let mut sum = 0.0;
        for head in Head::CONSENSUS {
            let want = ce_oracle(&rows_of(&queries[&head]), &rows_of(&targets[&head]), &diag, SIMILARITY_SCALE, smoothing);
            let got = breakdown.get(&term_name(head)).unwrap();
            assert!((got - want).abs() < 1e-12, "{head}: {got} vs {want}");
            sum += want;
        }
        let post = |h: Head| softmax_rows(&rows_of(&queries[&h]), &rows_of(&targets[&h]), SIMILARITY_SCALE);
        let kl = kl_oracle(&post(Head::ItMid), &post(Head::ItHigh), 10.0, 1.0);
        assert!((breakdown.get(KL_TERM).unwrap() - kl).abs() < 1e-12);
        sum += kl;
        assert!((g.value(root).item() - sum).abs() < 1e-12);
        assert_eq!(g.value(root).item(), breakdown.total);
        assert_eq!(breakdown.terms.len(), 5);
    }
}

#[test]
fn high_image_text_only_equals_its_batch_loss() {
    let model = small_model(22);
    let (corpus, idx) = tiny_batch(4);
    let picked: Vec<_> = idx.iter().map(|&i| &corpus.train[i]).collect();
    let batch = Batch::from_triplets(&corpus.catalog, &picked, true).unwrap();
    let cfg = LossConfig {
        heads: vec![Head::ItHigh],
        kl: false,
        ..LossConfig::default()
    };
    let mut g = Graph::new();
    let (root, breakdown) = total_loss(&mut g, &model, &batch, &cfg).unwrap();
    assert_eq!(breakdown.terms.len(), 1);

    let mut g2 = Graph::new();
    let out = model.forward(&mut g2, &batch, &[Head::ItHigh], &[Head::ItHigh]).unwrap();
    let l = bbc_loss(&mut g2, out.queries[&Head::ItHigh], out.targets[&Head::ItHigh], SIMILARITY_SCALE, 0.0).unwrap();
    assert_eq!(g.value(root).item(), g2.value(l).item());
}

fn distribution(raw: Vec<f64>) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

proptest! {
    #[test]
    fn kl_is_non_negative(
        a in prop::collection::vec(0.01f64..1.0, 9),
        b in prop::collection::vec(0.01f64..1.0, 9),
        l1 in 0.0f64..20.0,
        l2 in 0.01f64..20.0,
    ) {
        let pm: Vec<f64> = a.chunks(3).flat_map(|r| distribution(r.to_vec())).collect();
        let ph: Vec<f64> = b.chunks(3).flat_map(|r| distribution(r.to_vec())).collect();
        let pm = Tensor::new(vec![3, 3], pm).unwrap();
        let ph = Tensor::new(vec![3, 3], ph).unwrap();
        let loss = kl_value(&pm, &ph, &lambdas(l1, l2));
        prop_assert!(loss >= -1e-15);
        prop_assert!((loss - kl_oracle(&rows_of(&pm), &rows_of(&ph), l1, l2)).abs() < 1e-12);
    }

    #[test]
    fn smoothed_labels_are_distributions(n in 2usize..40, pos in 0usize..40, eps in 0.0f64..0.99) {
        let pos = pos % n;
        let y = smoothed_labels(n, pos, eps).unwrap();
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        prop_assert_eq!(y[pos], 1.0 - eps);
        prop_assert!(y.iter().enumerate().all(|(j, v)| j == pos || *v == eps / (n - 1) as f64));
    }

    #[test]
    fn batch_loss_is_non_negative_and_matches_oracle(
        raw in prop::collection::vec(-1.0f64..1.0, 24),
        s in 0.5f64..20.0,
        eps in 0.0f64..0.5,
    ) {
        let rows: Vec<Vec<f64>> = raw.chunks(3).map(|r| r.iter().map(|v| v + 1e-3).collect()).collect();
        let q = unit_rows(&rows[..4]);
        let k = unit_rows(&rows[4..]);
        let got = bbc_value(&q, &k, s, eps);
        prop_assert!(got >= 0.0);
        let want = ce_oracle(&rows_of(&q), &rows_of(&k), &[0, 1, 2, 3], s, eps);
        prop_assert!((got - want).abs() < 1e-12);
    }
}
