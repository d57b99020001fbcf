mod common;

use common::tiny;
use dde::{build_preference_pairs, PreferenceDataset, SamplerConfig};

#[test]
fn winners_stochastically_dominate_losers() {
    let f = tiny();
    let mut w: Vec<f64> = f.dataset.pairs.iter().map(|p| p.reward_w).collect();
    let mut l: Vec<f64> = f.dataset.pairs.iter().map(|p| p.reward_l).collect();
    w.sort_by(f64::total_cmp);
    l.sort_by(f64::total_cmp);
    // empirical CDF of winners lies below that of losers everywhere
    assert!(w.iter().zip(&l).all(|(a, b)| a >= b));
    let s = f.dataset.summary();
    assert!(s.mean_reward_w > s.mean_reward_l);
    assert_eq!(s.pairs + s.dropped_ties, f.dataset.header.requested_pairs);
}

#[test]
fn generation_is_a_function_of_the_seed() {
    let f = tiny();
    let sampler = SamplerConfig { n_steps: 10, ..SamplerConfig::default() };
    let again = build_preference_pairs(&f.world, &f.reference, &f.schedule, 64, &sampler, 5).unwrap();
    assert_eq!(again, f.dataset);
    let other = build_preference_pairs(&f.world, &f.reference, &f.schedule, 64, &sampler, 6).unwrap();
    assert_ne!(other.pairs, f.dataset.pairs);
    assert_eq!(f.dataset.header.reference_checksum, f.reference.checksum());
}

#[test]
fn file_round_trip() {
    let f = tiny();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("pairs.jsonl");
    f.dataset.save(&p).unwrap();
    let back = PreferenceDataset::load(&p).unwrap();
    assert_eq!(back, f.dataset);
    for (a, b) in back.pairs.iter().zip(&f.dataset.pairs) {
        assert_eq!(a.x0_w[0].to_bits(), b.x0_w[0].to_bits());
    }
}
