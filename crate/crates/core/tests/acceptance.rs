//! End-to-end acceptance gate. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use cssnet::autograd::Graph;
use cssnet::compositors::Head;
use cssnet::corpus::{ambiguity_stats, generate_catalog, generate_triplets, valid_set, AttributeSchema, RenderConfig, Specificity, TripletSpec};
use cssnet::dataset::{Corpus, CorpusConfig};
use cssnet::encoders::{pool_features, pool_words};
use cssnet::eval::*;
use cssnet::experiments::{corpus_at, run_variant, suite_profile, Variant};
use cssnet::model::{Batch, ModelSettings};
use cssnet::objectives::*;
use cssnet::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const KS: [usize; 3] = [1, 10, 50];

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|_| unit((0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    Tensor::from_rows(&data).unwrap()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn ce_oracle(q: &[Vec<f64>], k: &[Vec<f64>], eps: f64) -> f64 {
    let n = k.len();
    let mut total = 0.0;
    for (i, qi) in q.iter().enumerate() {
        let lp = log_softmax(&k.iter().map(|kj| SIMILARITY_SCALE * dot(qi, kj)).collect::<Vec<_>>());
        for (j, l) in lp.iter().enumerate() {
            total -= if j == i { 1.0 - eps } else { eps / (n - 1) as f64 } * l;
        }
    }
    total / q.len() as f64
}

fn posterior(q: &[Vec<f64>], k: &[Vec<f64>]) -> Vec<Vec<f64>> {
    q.iter()
        .map(|qi| {
            log_softmax(&k.iter().map(|kj| SIMILARITY_SCALE * dot(qi, kj)).collect::<Vec<_>>())
                .into_iter()
                .map(f64::exp)
                .collect()
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

fn brute_dots(q: &Tensor, g: &Tensor) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..q.rows() {
        for j in 0..g.rows() {
            let mut acc = 0.0;
            for c in 0..q.cols() {
                acc += q.row(i)[c] * g.row(j)[c];
            }
            out.push(acc);
        }
    }
    out
}

fn brute_ordering(row: &[f64]) -> Vec<usize> {
    let mut out = vec![0; row.len()];
    for (i, &s) in row.iter().enumerate() {
        let ahead = row.iter().enumerate().filter(|&(j, &t)| t > s || (t == s && j < i)).count();
        out[ahead] = i;
    }
    out
}

fn brute_recall(orderings: &[Vec<usize>], valid: &[Vec<usize>], k: usize) -> f64 {
    let hits = orderings
        .iter()
        .zip(valid)
        .filter(|(o, v)| o[..k].iter().any(|id| v.contains(id)))
        .count();
    hits as f64 / orderings.len() as f64
}

fn bundle_of(seed: u64, n1: usize, n2: usize, c: usize) -> (BTreeMap<Head, Tensor>, BTreeMap<Head, Tensor>, SimilarityBundle) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q: BTreeMap<Head, Tensor> = Head::CONSENSUS.iter().map(|&h| (h, random_unit(&mut rng, n1, c))).collect();
    let g: BTreeMap<Head, Tensor> = Head::CONSENSUS.iter().map(|&h| (h, random_unit(&mut rng, n2, c))).collect();
    let bundle = SimilarityBundle::from_embeddings(&q, &g).unwrap();
    (q, g, bundle)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cssnet"))
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let stdout = run_cli(&["gradcheck"])?;
    let took = start.elapsed();
    let err: f64 = stdout
        .split_whitespace()
        .nth(3)
        .and_then(|w| w.parse().ok())
        .ok_or_else(|| format!("unparsed output: {stdout}"))?;
    ensure(err < 1e-4, format!("max relative error {err:.2e}"))?;
    ensure(took < Duration::from_secs(60), format!("took {took:?}"))?;
    Ok(format!("max relative error {err:.2e} in {:.1}s", took.as_secs_f64()))
}

fn loss_identities() -> Outcome {
    let bbc = |q: &Tensor, k: &Tensor, eps: f64| {
        let mut g = Graph::new();
        let (q, k) = (g.constant(q.clone()), g.constant(k.clone()));
        let l = bbc_loss(&mut g, q, k, SIMILARITY_SCALE, eps).unwrap();
        g.value(l).item()
    };
    for b in [2, 4, 16] {
        let q = Tensor::from_rows(&vec![unit(vec![0.2, -0.5, 1.0]); b]).unwrap();
        let l = bbc(&q, &q, 0.0);
        ensure((l - (b as f64).ln()).abs() < 1e-9, format!("uniform batch of {b}: {l}"))?;
    }

    let p = Tensor::new(vec![2, 3], vec![0.7, 0.2, 0.1, 0.3, 0.3, 0.4]).unwrap();
    let mut g = Graph::new();
    let (m, h) = (g.constant(p.clone()), g.constant(p.clone()));
    let kl = kl_consensus(&mut g, m, h, &ConsensusWeights::default()).unwrap();
    ensure(g.value(kl).item() == 0.0, "KL of identical posteriors")?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (q, k) = (random_unit(&mut rng, 5, 4), random_unit(&mut rng, 5, 4));
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    let logits = similarity_logits(&mut g, qv, kv, SIMILARITY_SCALE).unwrap();
    let lp = g.log_softmax(logits);
    let lp = g.value(lp).clone();
    let one_hot = (0..5).map(|i| lp.row(i)[i]).sum::<f64>() * (-1.0 / 5.0);
    ensure(bbc(&q, &k, 0.0).to_bits() == one_hot.to_bits(), "eps = 0 differs from one-hot cross-entropy")?;

    let model = small_model(21);
    let cfg = CorpusConfig {
        items: 40,
        triplets: 5,
        queries: 2,
        seed: 9,
        ..CorpusConfig::default()
    };
    let corpus = Corpus::generate(&AttributeSchema::default_schema(), &cfg).unwrap();
    let picked: Vec<_> = corpus.train.iter().collect();
    let batch = Batch::from_triplets(&corpus.catalog, &picked, true).unwrap();
    let mut worst: f64 = 0.0;
    for smoothing in [0.0, 0.1] {
        let cfg = LossConfig {
            smoothing,
            ..LossConfig::default()
        };
        let mut g = Graph::new();
        let (root, _) = total_loss(&mut g, &model, &batch, &cfg).unwrap();
        let queries = model.compose_queries(&batch, &Head::CONSENSUS).unwrap();
        let targets = model.embed_targets(batch.targets.as_ref().unwrap(), &Head::CONSENSUS).unwrap();
        let mut sum = 0.0;
        for head in Head::CONSENSUS {
            sum += ce_oracle(&rows_of(&queries[&head]), &rows_of(&targets[&head]), smoothing);
        }
        let post = |h: Head| posterior(&rows_of(&queries[&h]), &rows_of(&targets[&h]));
        sum += kl_oracle(&post(Head::ItMid), &post(Head::ItHigh), 10.0, 1.0);
        worst = worst.max((g.value(root).item() - sum).abs());
    }
    ensure(worst < 1e-12, format!("total loss off by {worst:.2e}"))?;
    Ok(format!("total loss within {worst:.1e} of recomputed terms"))
}

fn oracle_equivalence() -> Outcome {
    for (seed, n1, n2) in [(1, 50, 50), (2, 7, 31), (3, 1, 50)] {
        let (q, g, bundle) = bundle_of(seed, n1, n2, 9);
        for h in Head::CONSENSUS {
            let p = bundle.get(h).unwrap();
            ensure(p.data() == brute_dots(&q[&h], &g[&h]).as_slice(), format!("similarities {h} {n1}x{n2}"))?;
            let orderings = rank_rows(p);
            for (r, o) in orderings.iter().enumerate() {
                ensure(o == &brute_ordering(p.row(r)), "ordering")?;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
            let targets: Vec<usize> = (0..n1).map(|_| rng.random_range(0..n2)).collect();
            let valid: Vec<Vec<usize>> = targets
                .iter()
                .map(|&t| {
                    let mut v = vec![t];
                    v.extend((0..rng.random_range(0..4)).map(|_| rng.random_range(0..n2)));
                    v
                })
                .collect();
            let singles: Vec<Vec<usize>> = targets.iter().map(|&t| vec![t]).collect();
            for k in 1..=n2 {
                ensure(recall_at_k(&orderings, &targets, k).unwrap() == brute_recall(&orderings, &singles, k), "recall")?;
                ensure(
                    ambiguity_recall_at_k(&orderings, &valid, k).unwrap() == brute_recall(&orderings, &valid, k),
                    "ambiguity recall",
                )?;
            }
        }
    }
    Ok("similarities, orderings and both recalls exact up to 50x50".into())
}

fn residual_identities() -> Outcome {
    let attrs = [3, 1, 4, 0, 2];
    let caption = AttributeSchema::default_schema().encode_caption(&[(0, 5), (2, 1)]);
    let mut model = small_model(13);
    for head in [Head::ItMid, Head::ItHigh, Head::TiMid, Head::TiHigh] {
        let maps = model.encode_image(&patches(4, &attrs)).unwrap();
        let f = maps.into_iter().find(|m| m.level == head.level()).unwrap();
        let words = model.encode_text(&caption).unwrap();
        let mut g = Graph::new();
        let (got, projector, pooled) = if head.is_image_text() {
            let block = model.image_text[&head].clone();
            block.modulation.second.zero(&mut model.store);
            let got = model.compose_image_text(&f, &pool_words(&words).unwrap()).unwrap();
            let x = g.constant(f.values.clone());
            let pooled = g.group_mean(x, f.values.rows()).unwrap();
            (got, block.projector, pooled)
        } else {
            let block = model.text_image[&head].clone();
            block.value.zero(&mut model.store);
            let got = model.compose_text_image(&words, &pool_features(&f), head.level()).unwrap();
            let count = words.mask.iter().filter(|&&m| m).count();
            let weights = words.mask.iter().map(|&m| if m { 1.0 / count as f64 } else { 0.0 }).collect();
            let x = g.constant(words.values.clone());
            let pooled = g.group_weighted_sum(x, words.mask.len(), weights).unwrap();
            (got, block.projector, pooled)
        };
        let y = projector.forward(&mut g, &model.store, pooled).unwrap();
        let y = g.l2_normalize(y);
        ensure(got == g.value(y).data(), format!("{head} does not collapse exactly"))?;
        let by_hand = unit(mlp(
            &model.store,
            &projector,
            &if head.is_image_text() { pool_features(&f) } else { pool_words(&words).unwrap() },
        ));
        let gap = got.iter().zip(&by_hand).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(gap < 1e-12, format!("{head} off the hand-pooled projection by {gap:.1e}"))?;
    }
    Ok("all four heads collapse to the projected pooled input".into())
}

fn joint_algebra() -> Outcome {
    let (q, g, bundle) = bundle_of(9, 40, 50, 8);
    for (i, h) in Head::CONSENSUS.iter().enumerate() {
        let mut alphas = [0.0; 4];
        alphas[i] = 1.0;
        ensure(joint_rank(&bundle, &alphas).unwrap() == rank_rows(bundle.get(*h).unwrap()), format!("{h} alone"))?;
    }
    let concat = |m: &BTreeMap<Head, Tensor>| {
        let rows: Vec<Vec<f64>> = (0..m[&Head::ItMid].rows())
            .map(|r| Head::CONSENSUS.iter().flat_map(|h| m[h].row(r).to_vec()).collect())
            .collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let scores = dot_rows(&concat(&q), &concat(&g)).unwrap();
    ensure(joint_rank(&bundle, &[1.0; 4]).unwrap() == rank_rows(&scores), "equal weights vs concatenation")?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let alphas: [f64; 4] = std::array::from_fn(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.01..3.0) });
        if alphas.iter().all(|&a| a == 0.0) {
            continue;
        }
        let c = rng.random_range(0.01..100.0);
        let scaled = alphas.map(|a| a * c);
        ensure(joint_rank(&bundle, &alphas).unwrap() == joint_rank(&bundle, &scaled).unwrap(), format!("rescaling {alphas:?} by {c}"))?;
    }
    Ok("single-head, concatenation and rescaling orderings identical".into())
}

/// Per-seed metrics of one trained variant on one corpus.
struct Study {
    runs: BTreeMap<String, Vec<Metrics>>,
}

impl Study {
    fn train(&mut self, key: &str, corpus: &Corpus, variant: &Variant) {
        let settings = ModelSettings::default();
        let profile = suite_profile();
        let runs = SEEDS
            .iter()
            .map(|&s| run_variant(corpus, &settings, &profile, variant, s, &KS).unwrap().metrics)
            .collect();
        self.runs.insert(key.to_string(), runs);
    }

    fn joint(&self, key: &str, k: usize) -> Vec<f64> {
        self.runs[key].iter().map(|m| m.joint_recall(k).unwrap()).collect()
    }

    fn head(&self, key: &str, head: Head, k: usize) -> Vec<f64> {
        self.runs[key].iter().map(|m| m.head_recall(head, k).unwrap()).collect()
    }
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn ambiguity_trend(s: &Study, took: Duration) -> Outcome {
    let (lb, lg) = (s.joint("low bbc", 10), s.joint("low gwc", 10));
    let (hb, hg) = (s.joint("high bbc", 10), s.joint("high gwc", 10));
    let wins = lb.iter().zip(&lg).filter(|(b, g)| b > g).count();
    let (low_gap, high_gap) = (mean(&lb) - mean(&lg), mean(&hb) - mean(&hg));
    let detail = format!(
        "low bbc {:.4} gwc {:.4} (wins {wins}/5), high bbc {:.4} gwc {:.4}, margins {low_gap:.4} > {high_gap:.4}, {:.0}s",
        mean(&lb),
        mean(&lg),
        mean(&hb),
        mean(&hg),
        took.as_secs_f64()
    );
    ensure(low_gap > 0.0 && wins >= 4 && high_gap < low_gap && took < Duration::from_secs(900), detail.clone())?;
    Ok(detail)
}

fn smoothing_trend(s: &Study) -> Outcome {
    let bbc = (mean(&s.joint("low bbc", 10)), mean(&s.joint("low bbc+ls", 10)));
    let gwc = (mean(&s.joint("low gwc", 10)), mean(&s.joint("low gwc+ls", 10)));
    let detail = format!(
        "bbc {:.4} -> {:.4} ({}), gwc {:.4} -> {:.4} ({})",
        bbc.0,
        bbc.1,
        fmt(&s.joint("low bbc+ls", 10)),
        gwc.0,
        gwc.1,
        fmt(&s.joint("low gwc+ls", 10))
    );
    ensure(bbc.1 < bbc.0 && gwc.1 > gwc.0, detail.clone())?;
    Ok(detail)
}

fn joint_trend(s: &Study) -> Outcome {
    let joint = mean(&s.joint("+L_KL", 10));
    let heads: Vec<(Head, f64)> = Head::CONSENSUS.iter().map(|&h| (h, mean(&s.head("+L_KL", h, 10)))).collect();
    let (best, best_r) = heads.iter().cloned().fold((Head::ItMid, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
    let detail = format!("joint {joint:.4} vs best head {best} {best_r:.4}");
    ensure(joint >= best_r, detail.clone())?;
    Ok(detail)
}

fn loss_ladder_trend(s: &Study) -> Outcome {
    let ladder = ["low bbc", "+L_IT_m", "+L_TI", "+L_KL"];
    let r: Vec<f64> = ladder.iter().map(|k| mean(&s.joint(k, 50))).collect();
    let detail = format!("R@50 {}", fmt(&r));
    ensure(r[3] - r[0] >= 0.02, format!("{detail}: full model gains {:.4}", r[3] - r[0]))?;
    for w in r.windows(2) {
        ensure(w[1] - w[0] >= -0.005, format!("{detail}: step {:.4}", w[1] - w[0]))?;
    }
    Ok(format!("{detail}, full model +{:.2} points", 100.0 * (r[3] - r[0])))
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = dir.join("config.json");
    let body = r#"{"data": {"items": 80, "triplets": 96, "queries": 20, "seed": 3},
        "train": {"epochs": 3, "warmup_epochs": 1, "decay_epochs": [2]}}"#;
    std::fs::write(&cfg, body).map_err(|e| e.to_string())?;
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let data = dir.join("data");
    run_cli(&["generate", "--config", &p(&cfg), "--out", &p(&data)])?;
    for run in ["a", "b"] {
        run_cli(&["train", "--data", &p(&data), "--config", &p(&cfg), "--out", &p(&dir.join(run)), "--seed", "7"])?;
    }
    for f in ["checkpoint.json", "metrics.json"] {
        let a = std::fs::read(dir.join("a").join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.join("b").join(f)).map_err(|e| e.to_string())?;
        ensure(a == b, format!("{f} differs"))?;
    }
    Ok("checkpoints and metrics byte-identical".into())
}

fn generator_properties(low: &Corpus, high: &Corpus) -> Outcome {
    let catalog = &low.catalog;
    let triplets = generate_triplets(catalog, &TripletSpec::uniform(400, 5, Specificity::Low, 3)).unwrap();
    for t in &triplets {
        let (r, g) = (&catalog.item(t.ref_id).attrs, &catalog.item(t.target_id).attrs);
        let j = t.changed_slots.len();
        let levels = [Specificity::Low, Specificity::Med, Specificity::High];
        let sets: Vec<Vec<usize>> = levels
            .iter()
            .map(|s| valid_set(catalog, r, g, j, &t.changed_slots[..s.mentions(j)]))
            .collect();
        for w in sets.windows(2) {
            ensure(w[1].iter().all(|id| w[0].contains(id)), "valid sets grow with specificity")?;
        }
        ensure(sets.iter().all(|v| v.contains(&t.target_id)), "target outside its valid set")?;
    }
    for corpus in [low, high] {
        ensure(corpus.train.iter().chain(&corpus.test).all(|t| t.valid_ids.contains(&t.target_id)), "annotated target missing")?;
    }
    let lo = low.train_stats().unwrap().mean_valid_set_size;
    let hi = high.train_stats().unwrap().mean_valid_set_size;
    let unique = generate_catalog(&AttributeSchema::default_schema(), RenderConfig::default(), 300, true, 9).unwrap();
    let full = generate_triplets(&unique, &TripletSpec::uniform(500, 4, Specificity::High, 9)).unwrap();
    let full = ambiguity_stats(&full).unwrap().mean_valid_set_size;
    ensure(lo > 1.0 && hi == 1.0 && full == 1.0, format!("mean valid-set size low {lo}, full {hi} / {full}"))?;
    Ok(format!("mean valid-set size {lo:.3} at low specificity, 1 at full"))
}

fn check(id: usize, title: &str, f: impl FnOnce() -> Outcome) -> (String, bool) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (pass, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let line = format!(
        "[{}] {id:>2}. {title}: {detail} ({:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    println!("{line}");
    (line, pass)
}

#[test]
fn acceptance() {
    let mut lines = vec![
        check(1, "gradient fidelity", gradient_fidelity),
        check(2, "loss identities", loss_identities),
        check(3, "oracle equivalence", oracle_equivalence),
        check(4, "residual identities", residual_identities),
        check(5, "joint-inference algebra", joint_algebra),
    ];

    let low = Corpus::generate(&AttributeSchema::default_schema(), &CorpusConfig::default()).unwrap();
    let high = corpus_at(&low, Specificity::High).unwrap();
    let mut study = Study { runs: BTreeMap::new() };
    let start = Instant::now();
    use cssnet::objectives::Classification::{Batch as Bbc, Global as Gwc};
    study.train("low bbc", &low, &Variant::single(Bbc, 0.0));
    study.train("low gwc", &low, &Variant::single(Gwc, 0.0));
    study.train("high bbc", &high, &Variant::single(Bbc, 0.0));
    study.train("high gwc", &high, &Variant::single(Gwc, 0.0));
    let ambiguity_time = start.elapsed();
    lines.push(check(6, "ambiguity trend", || ambiguity_trend(&study, ambiguity_time)));

    study.train("low bbc+ls", &low, &Variant::single(Bbc, 0.1));
    study.train("low gwc+ls", &low, &Variant::single(Gwc, 0.1));
    lines.push(check(7, "smoothing trend", || smoothing_trend(&study)));

    // the ladder's first rung is the unsmoothed batch-classified IT_h model trained above
    for v in Variant::loss_ladder().into_iter().skip(1) {
        study.train(&v.label.clone(), &low, &v);
    }
    lines.push(check(8, "joint inference vs best head", || joint_trend(&study)));
    lines.push(check(9, "loss ladder", || loss_ladder_trend(&study)));

    let dir = tempfile::tempdir().unwrap();
    lines.push(check(10, "determinism", || determinism(dir.path())));
    lines.push(check(11, "generator properties", || generator_properties(&low, &high)));

    println!("\nacceptance summary");
    for (line, _) in &lines {
        println!("{line}");
    }
    let failed: Vec<&String> = lines.iter().filter(|(_, p)| !p).map(|(l, _)| l).collect();
    assert!(failed.is_empty(), "{} criteria failed:\n{}", failed.len(), failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("\n"));
}
