mod support;

#[test]
fn closed_form_values() {
    for v in support::analytic::all() {
        assert!(v.ok(), "{}: got {:.9} want {:.9}", v.name, v.got, v.want);
    }
}
