mod support;

#[test]
fn analytic_gradients_match_finite_differences() {
    let msg = support::checks::finite_difference(5e-2).unwrap_or_else(|e| panic!("{e}"));
    eprintln!("{msg}");
}
