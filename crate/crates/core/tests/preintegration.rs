mod common;

#[test]
fn predict_matches_direct_strapdown() {
    for seed in 0..5 {
        let o = common::preintegration_oracle(seed);
        assert!(o.position < 1e-6, "seed {seed}: position gap {:.2e} m", o.position);
        assert!(o.rotation < 1e-7, "seed {seed}: rotation gap {:.2e} rad", o.rotation);
        assert!(o.velocity < 1e-6, "seed {seed}: velocity gap {:.2e} m/s", o.velocity);
    }
}

#[test]
fn split_and_append_matches_one_pass() {
    for seed in 0..5 {
        let o = common::preintegration_oracle(seed);
        assert!(o.chaining < 1e-9, "seed {seed}: chaining gap {:.2e}", o.chaining);
    }
}
