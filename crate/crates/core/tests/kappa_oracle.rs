//! Exhaustive comparison of Cohen's kappa with a brute-force oracle.

mod common;

#[test]
fn binary_vectors_up_to_length_five() {
    let sweep = common::kappa_sweep(5).unwrap();
    assert_eq!(sweep.pairs_checked, 4 + 16 + 64 + 256 + 1024);
    assert!(sweep.degenerate > 0);
    assert!(sweep.max_abs_err <= 1e-12);
}

#[test]
fn oracle_spot_values() {
    assert_eq!(common::brute_kappa(&[1, 1, 0, 0], &[1, 1, 0, 0]), Some(1.0));
    assert_eq!(common::brute_kappa(&[1, 0], &[0, 1]), Some(-1.0));
    assert_eq!(common::brute_kappa(&[1, 1], &[1, 1]), Some(1.0));
    assert_eq!(common::brute_kappa(&[1, 1], &[0, 0]), Some(0.0));
    // a=[1,1,0,0], b=[1,0,0,0]: p_o=3/4, p_e=1/2*1/4+1/2*3/4=1/2
    assert_eq!(common::brute_kappa(&[1, 1, 0, 0], &[1, 0, 0, 0]), Some(0.5));
}
