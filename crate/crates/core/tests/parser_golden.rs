mod support;

use mqm_ape::prompting::RoleTag;

#[test]
fn golden_responses_parse_as_expected() {
    let cases = support::golden_cases();
    assert!(cases.len() >= 30, "only {} golden cases", cases.len());
    for role in RoleTag::ALL {
        assert!(cases.iter().any(|c| c.role == role && c.is_valid()));
        assert!(cases.iter().any(|c| c.role == role && !c.is_valid()));
    }
    let failures: Vec<String> = cases.iter().filter_map(|c| c.check().err()).collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
