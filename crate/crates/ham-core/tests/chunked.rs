mod common;

#[test]
fn chunked_matches_sequential() {
    for seed in 0..50u64 {
        let t = 1 + (seed as usize * 13) % 64;
        for chunk in [1, 2, 4, 8, t] {
            let gap = common::chunked_gap(seed, t, chunk);
            assert!(gap < 1e-10, "seed {seed} T {t} C {chunk}: {gap:e}");
        }
    }
}

#[test]
fn full_length_chunk() {
    for seed in 0..10 {
        assert!(common::chunked_gap(seed, 64, 64) < 1e-10);
    }
}
