use chc::verify::explore_deletes;

#[test]
fn no_early_delete_in_any_interleaving() {
    let (leaves, early, stuck) = explore_deletes();
    assert_eq!(leaves, 362_880);
    assert_eq!(early, 0, "deleted before all commits arrived");
    assert_eq!(stuck, 0, "never deleted after all commits arrived");
}
