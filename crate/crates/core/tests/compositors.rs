mod common;

use common::*;
use cssnet::autograd::Graph;
use cssnet::compositors::Head;
use cssnet::corpus::AttributeSchema;
use cssnet::encoders::{pool_features, pool_words, FeatureMap, Level, WordFeatures};
use cssnet::model::Model;
use cssnet::tensor::Tensor;

const ATTRS: [usize; 5] = [3, 1, 4, 0, 2];

fn caption() -> Vec<usize> {
    AttributeSchema::default_schema().encode_caption(&[(0, 5), (2, 1)])
}

fn level_index(level: Level) -> usize {
    match level {
        Level::Low => 0,
        Level::Mid => 1,
        Level::High => 2,
    }
}

fn inputs(model: &Model, level: Level) -> (FeatureMap, WordFeatures) {
    let maps = model.encode_image(&patches(4, &ATTRS)).unwrap();
    let words = model.encode_text(&caption()).unwrap();
    (maps[level_index(level)].clone(), words)
}

fn image_text_oracle(model: &Model, head: Head, f: &FeatureMap, text: &[f64]) -> Vec<f64> {
    let st = &model.store;
    let block = &model.image_text[&head];
    let t = affine(st, &block.text_proj, text);
    let (rows, d) = (f.values.rows(), f.values.cols());
    let mut pooled = vec![0.0; d];
    for p in 0..rows {
        let fp = f.values.row(p);
        let u: Vec<f64> = fp.iter().chain(&t).copied().collect();
        let gate = mlp(st, &block.gate, &u);
        let m = mlp(st, &block.modulation, &u);
        for i in 0..d {
            pooled[i] += (fp[i] + m[i] / (1.0 + (-gate[i]).exp())) / rows as f64;
        }
    }
    unit(mlp(st, &block.projector, &pooled))
}

fn text_image_oracle(model: &Model, head: Head, words: &WordFeatures, image: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let st = &model.store;
    let block = &model.text_image[&head];
    let live: Vec<usize> = (0..words.mask.len()).filter(|&i| words.mask[i]).collect();
    let d = words.values.cols();
    let mut pooled = vec![0.0; d];
    for &i in &live {
        for (a, b) in pooled.iter_mut().zip(words.values.row(i)) {
            *a += b / live.len() as f64;
        }
    }
    let q = affine(st, &block.query, image);
    let scores: Vec<f64> = live
        .iter()
        .map(|&i| dot(&q, &affine(st, &block.key, words.values.row(i))) / (block.att_dim as f64).sqrt())
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let mut att = vec![0.0; words.mask.len()];
    for (k, &i) in live.iter().enumerate() {
        att[i] = (scores[k] - max).exp() / z;
    }
    let mut s = pooled;
    for &i in &live {
        let v = affine(st, &block.value, words.values.row(i));
        for (a, b) in s.iter_mut().zip(&v) {
            *a += att[i] * b;
        }
    }
    (att, unit(mlp(st, &block.projector, &s)))
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[test]
fn image_text_matches_straight_line_recomputation() {
    let model = small_model(11);
    for head in [Head::ItMid, Head::ItHigh] {
        let (f, words) = inputs(&model, head.level());
        let text = pool_words(&words).unwrap();
        let got = model.compose_image_text(&f, &text).unwrap();
        assert_close(&got, &image_text_oracle(&model, head, &f, &text), 1e-12);
    }
}

#[test]
fn text_image_matches_straight_line_recomputation() {
    let model = small_model(12);
    for head in [Head::TiMid, Head::TiHigh] {
        let (f, words) = inputs(&model, head.level());
        let image = pool_features(&f);
        let (att, got) = model.text_image_attention(&words, &image, head.level()).unwrap();
        let (att_ref, want) = text_image_oracle(&model, head, &words, &image);
        assert_close(&att, &att_ref, 1e-12);
        assert_close(&got, &want, 1e-12);
    }
}

#[test]
fn zero_modulation_collapses_to_projected_pooled_image() {
    let mut model = small_model(13);
    for head in [Head::ItMid, Head::ItHigh] {
        let block = model.image_text[&head].clone();
        block.modulation.second.zero(&mut model.store);
        let (f, words) = inputs(&model, head.level());
        let got = model.compose_image_text(&f, &pool_words(&words).unwrap()).unwrap();

        let mut g = Graph::new();
        let x = g.constant(f.values.clone());
        let pooled = g.group_mean(x, f.values.rows()).unwrap();
        let y = block.projector.forward(&mut g, &model.store, pooled).unwrap();
        let y = g.l2_normalize(y);
        assert_eq!(got, g.value(y).data());

        let by_hand = unit(mlp(&model.store, &block.projector, &pool_features(&f)));
        assert_close(&got, &by_hand, 1e-12);
    }
}

#[test]
fn zero_value_map_collapses_to_projected_pooled_text() {
    let mut model = small_model(14);
    for head in [Head::TiMid, Head::TiHigh] {
        let block = model.text_image[&head].clone();
        block.value.zero(&mut model.store);
        let (f, words) = inputs(&model, head.level());
        let got = model.compose_text_image(&words, &pool_features(&f), head.level()).unwrap();

        let count = words.mask.iter().filter(|&&m| m).count();
        let weights = words.mask.iter().map(|&m| if m { 1.0 / count as f64 } else { 0.0 }).collect();
        let mut g = Graph::new();
        let x = g.constant(words.values.clone());
        let pooled = g.group_weighted_sum(x, words.mask.len(), weights).unwrap();
        let y = block.projector.forward(&mut g, &model.store, pooled).unwrap();
        let y = g.l2_normalize(y);
        assert_eq!(got, g.value(y).data());

        let by_hand = unit(mlp(&model.store, &block.projector, &pool_words(&words).unwrap()));
        assert_close(&got, &by_hand, 1e-12);
    }
}

#[test]
fn image_text_is_invariant_to_position_order() {
    let model = small_model(15);
    let (f, words) = inputs(&model, Level::Mid);
    let text = pool_words(&words).unwrap();
    let rows: Vec<Vec<f64>> = (0..f.values.rows()).rev().map(|r| f.values.row(r).to_vec()).collect();
    let reversed = FeatureMap {
        level: f.level,
        values: Tensor::from_rows(&rows).unwrap(),
    };
    let a = model.compose_image_text(&f, &text).unwrap();
    let b = model.compose_image_text(&reversed, &text).unwrap();
    assert_close(&a, &b, 1e-12);
}

#[test]
fn text_image_is_invariant_to_word_order() {
    let model = small_model(16);
    let (f, words) = inputs(&model, Level::High);
    let image = pool_features(&f);
    let n = words.mask.len();
    let order: Vec<usize> = (0..n).rev().collect();
    let permuted = WordFeatures {
        values: Tensor::from_rows(&order.iter().map(|&i| words.values.row(i).to_vec()).collect::<Vec<_>>()).unwrap(),
        mask: order.iter().map(|&i| words.mask[i]).collect(),
    };
    let a = model.compose_text_image(&words, &image, Level::High).unwrap();
    let b = model.compose_text_image(&permuted, &image, Level::High).unwrap();
    assert_close(&a, &b, 1e-12);
}

#[test]
fn single_word_attention_is_exactly_one() {
    let model = small_model(17);
    let (f, words) = inputs(&model, Level::Mid);
    let keep = words.mask.iter().position(|&m| m).unwrap();
    let single = WordFeatures {
        values: words.values.clone(),
        mask: (0..words.mask.len()).map(|i| i == keep).collect(),
    };
    let (att, _) = model.text_image_attention(&single, &pool_features(&f), Level::Mid).unwrap();
    for (i, a) in att.iter().enumerate() {
        assert_eq!(*a, if i == keep { 1.0 } else { 0.0 });
    }
}

#[test]
fn outputs_are_unit_norm_and_heads_differ() {
    let model = small_model(18);
    let mut outs = Vec::new();
    for head in Head::CONSENSUS {
        let (f, words) = inputs(&model, head.level());
        let e = if head.is_image_text() {
            model.compose_image_text(&f, &pool_words(&words).unwrap()).unwrap()
        } else {
            model.compose_text_image(&words, &pool_features(&f), head.level()).unwrap()
        };
        assert_eq!(e.len(), 7);
        assert!((norm(&e) - 1.0).abs() < 1e-9);
        let t = model.project_target(&f, head).unwrap();
        assert!((norm(&t) - 1.0).abs() < 1e-9);
        outs.push(e);
    }
    for i in 0..outs.len() {
        for j in i + 1..outs.len() {
            assert_ne!(outs[i], outs[j]);
        }
    }
}

#[test]
fn level_mismatches_are_rejected() {
    let model = small_model(19);
    let (mid, words) = inputs(&model, Level::Mid);
    let (low, _) = inputs(&model, Level::Low);
    let text = pool_words(&words).unwrap();
    assert!(model.compose_image_text(&low, &text).is_err());
    assert!(model.project_target(&mid, Head::ItHigh).is_err());
    assert!(model.project_target(&low, Head::ItLow).is_err());
    assert!(model.compose_text_image(&words, &pool_features(&low), Level::Mid).is_err());
    assert!(model.compose_image_text(&mid, &text[..3]).is_err());
}
