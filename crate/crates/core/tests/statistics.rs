use tera_core::diagnostics::alteration_statistics;

#[test]
fn alteration_policies_match_their_rates() {
    for seed in [1, 2] {
        for c in alteration_statistics(seed, 50_000).unwrap() {
            assert!(c.pass, "seed {seed}: {c}");
        }
    }
}
