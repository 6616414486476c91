mod common;

use common::{resp, scored, toy_spec};
use neat_core::prefdata::{Dataset, Split};
use neat_core::reward::{score, Origin, ScoredResponse};
use neat_core::synth::{ReferenceTask, TaskConfig};
use neat_core::tokens::TokenSeq;
use proptest::prelude::*;

fn query() -> TokenSeq {
    TokenSeq::new(vec![11, 12, 19])
}

#[test]
fn five_response_record_orders_by_hand_scores() {
    let spec = toy_spec();
    let bodies: Vec<Vec<u32>> = vec![vec![28, 29], vec![3], vec![3, 4], vec![14, 28], vec![15]];
    let raw = vec![(query(), bodies.iter().map(|b| resp(b)).collect())];
    let ds = Dataset::prepare(&raw, &spec, Split::Train).unwrap();
    let got: Vec<f64> = ds.records()[0].responses.iter().map(|r| r.reward).collect();
    assert_eq!(got, vec![2.0, 1.0, 0.0, -2.0, -4.0]);
    assert_eq!(ds.records()[0].best().response, resp(&[3, 4]));
    assert_eq!(ds.records()[0].worst().response, resp(&[28, 29]));
}

#[test]
fn round_trips() {
    let spec = toy_spec();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    let empty = Dataset::empty(&spec, Split::Train);
    empty.save(&path).unwrap();
    assert!(Dataset::load(&path, &spec, Split::Train).unwrap().is_empty());

    let task = ReferenceTask::generate(TaskConfig::default()).unwrap();
    let path = dir.path().join("train.jsonl");
    task.train.save(&path).unwrap();
    let back = Dataset::load(&path, &task.spec, Split::Train).unwrap();
    assert_eq!(back.records(), task.train.records());
}

#[test]
fn dedup_off_counts_every_response() {
    let spec = toy_spec();
    let raw = vec![(query(), vec![resp(&[3]), resp(&[28])])];
    let mut ds = Dataset::prepare(&raw, &spec, Split::Train).unwrap().with_dedup(false);
    for _ in 0..3 {
        assert!(ds.expand(&query(), scored(&[3], 1.0)).unwrap());
    }
    assert_eq!(ds.total_responses(), 5);
    assert_eq!(ds.dedup_drops, 0);
}

proptest! {
    #[test]
    fn expansion_keeps_records_sorted(
        bodies in prop::collection::vec(prop::collection::vec(3u32..32, 0..4), 1..20),
        dedup in any::<bool>(),
    ) {
        let spec = toy_spec();
        let raw = vec![(query(), vec![resp(&[3]), resp(&[28])])];
        let mut ds = Dataset::prepare(&raw, &spec, Split::Train).unwrap().with_dedup(dedup);
        let mut added = 0;
        for b in &bodies {
            let r = resp(b);
            let s = ScoredResponse {
                reward: score(&spec, &query(), &r).unwrap(),
                response: r,
                origin: Origin::PositivePrompt,
            };
            if ds.expand(&query(), s).unwrap() {
                added += 1;
            }
        }
        let rec = &ds.records()[0];
        prop_assert!(rec.is_sorted());
        prop_assert_eq!(rec.responses.len(), 2 + added);
        prop_assert_eq!(added + ds.dedup_drops, bodies.len());
        if !dedup {
            prop_assert_eq!(added, bodies.len());
        }
        let capped = rec.capped(8);
        prop_assert!(capped.len() <= 8);
        prop_assert_eq!(&capped[0], rec.best());
        prop_assert_eq!(capped.last().unwrap(), rec.worst());
    }
}
