//! Random search over the archetype-mixture family used for the shipped
//! cohort configuration. Prints the best candidate as JSON.
//!
//! cargo run --release --example calibrate -- [iterations] [seed]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sentinel_core::cohortgen::{generate, measure, CalibrationReport, GenConfig, NumericMode};
use sentinel_core::{FeatureKind, FeatureSchema};

#[derive(Debug, Clone, Copy)]
struct Params {
    block: usize,
    q_risk: f64,
    pairs: usize,
    w_pair: f64,
    flip: f64,
    dup: f64,
}

fn config(p: Params, seed: u64) -> GenConfig {
    let schema = FeatureSchema::default_schema();
    let categorical: Vec<String> =
        schema.features().iter().filter(|f| !matches!(f.kind, FeatureKind::BoundedNumeric { .. })).map(|f| f.id.clone()).collect();
    // interleave domains so the risk block spans all four
    let mut order = Vec::new();
    for k in 0..7 {
        for dom in 0..4 {
            order.push(categorical[dom * 7 + k].clone());
        }
    }
    let mut spans = vec![Vec::new(), order[..p.block].to_vec()];
    for i in 0..p.pairs {
        spans.push(order[p.block + 2 * i..p.block + 2 * i + 2].to_vec());
    }
    let mut weights = vec![1.0 - p.q_risk - p.pairs as f64 * p.w_pair, p.q_risk];
    weights.extend(std::iter::repeat_n(p.w_pair, p.pairs));
    let flip_overrides: BTreeMap<String, f64> = schema
        .features()
        .iter()
        .filter(|f| matches!(f.kind, FeatureKind::BoundedNumeric { .. }))
        .map(|f| (f.id.clone(), 1.0))
        .collect();
    GenConfig {
        n_records: 1000,
        seed,
        archetype_count: spans.len(),
        archetype_weights: weights,
        archetype_spans: Some(spans),
        archetype_divergence: 0.0,
        flip_probability: p.flip,
        flip_overrides,
        duplicate_boost: p.dup,
        invalid_block_size: 7,
        numeric_mode: NumericMode::Discrete,
        localities: 10,
        schema: None,
    }
}

fn loss(r: &CalibrationReport) -> f64 {
    let evr = r.first_pc_evr.unwrap_or(0.0);
    let k = r.components_for_85.unwrap_or(0) as f64;
    [
        (r.duplicate_partner_fraction - 0.48).abs() / 0.05,
        r.low_similarity_pair_fraction_70 / 0.05,
        (evr - 0.21).abs() / 0.03,
        (k - 17.0).abs() / 2.0,
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn evaluate(p: Params, seeds: &[u64]) -> (f64, f64) {
    let losses: Vec<f64> = seeds.iter().map(|&s| loss(&measure(&generate(&config(p, s)).unwrap()).unwrap())).collect();
    (losses[0], losses.iter().sum::<f64>() / losses.len() as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iterations: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let shipped_seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20_240_601);
    let seeds: Vec<u64> = std::iter::once(shipped_seed).chain(1..=5).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let candidates: Vec<Params> = (0..iterations)
        .map(|_| Params {
            block: rng.random_range(6..=11),
            q_risk: rng.random_range(0.005..0.02),
            pairs: rng.random_range(4..=8),
            w_pair: rng.random_range(0.02..0.07),
            flip: rng.random_range(0.002..0.015),
            dup: rng.random_range(0.28..0.42),
        })
        .filter(|p| p.block + 2 * p.pairs <= 28)
        .collect();
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get());
    let chunk = candidates.len().div_ceil(threads).max(1);
    let mut scored: Vec<(f64, f64, Params)> = std::thread::scope(|scope| {
        let handles: Vec<_> = candidates
            .chunks(chunk)
            .map(|c| {
                let seeds = &seeds;
                scope.spawn(move || c.iter().map(|&p| { let (l, m) = evaluate(p, seeds); (l, m, p) }).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    // robust first: the mean over seeds, subject to the shipped seed passing
    scored.sort_by(|a, b| (a.0 > 1.0).cmp(&(b.0 > 1.0)).then(a.1.total_cmp(&b.1)));
    for (l, m, p) in scored.iter().take(5) {
        eprintln!("shipped={l:.3} mean={m:.3} {p:?}");
    }
    let best = scored[0].2;
    let cfg = config(best, shipped_seed);
    eprintln!("{:?}", measure(&generate(&cfg).unwrap()).unwrap());
    println!("{}", serde_json::to_string_pretty(&cfg).unwrap());
}
