#![allow(dead_code)]

use cssnet::corpus::{AttributeSchema, RenderConfig, Renderer};
use cssnet::layers::{Linear, Mlp2};
use cssnet::model::{Model, ModelConfig, ModelSettings};
use cssnet::params::ParamStore;
use cssnet::tensor::Tensor;

pub fn settings() -> ModelSettings {
    ModelSettings {
        d_low: 6,
        d_mid: 8,
        d_high: 10,
        d_text: 12,
        embed_dim: 7,
        hidden: 9,
        att_dim: 5,
        low_head: false,
    }
}

pub fn small_model(seed: u64) -> Model {
    let schema = AttributeSchema::default_schema();
    let cfg = ModelConfig::from_settings(&schema, &RenderConfig::default(), &settings());
    let mut model = Model::new(cfg, seed);
    // nonzero biases so the oracles exercise them
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.name.ends_with(".b")).map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        for (i, v) in model.store.value_mut(id).data_mut().iter_mut().enumerate() {
            *v = 0.05 * ((k * 7 + i) as f64).sin();
        }
    }
    model
}

pub fn patches(seed: u64, attrs: &[usize]) -> Tensor {
    Renderer::new(&AttributeSchema::default_schema(), RenderConfig::default(), seed).render(0, attrs)
}

// Straight-line reference arithmetic.

pub fn affine(store: &ParamStore, layer: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.value(layer.w);
    let (fan_in, fan_out) = (w.rows(), w.cols());
    assert_eq!(x.len(), fan_in);
    (0..fan_out)
        .map(|j| {
            let mut acc = layer.b.map_or(0.0, |b| store.value(b).data()[j]);
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w.data()[i * fan_out + j];
            }
            acc
        })
        .collect()
}

pub fn mlp(store: &ParamStore, m: &Mlp2, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(store, &m.first, x).into_iter().map(|v| v.max(0.0)).collect();
    affine(store, &m.second, &h)
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}
