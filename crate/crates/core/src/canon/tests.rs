use super::*;
use proptest::prelude::*;

fn path(s: &str) -> KeyPath {
    KeyPath::parse(s).unwrap()
}

fn s(text: &str) -> CanonValue {
    CanonValue {
        kind: ValueKind::String,
        text: text.into(),
    }
}

fn n(text: &str) -> CanonValue {
    CanonValue {
        kind: ValueKind::Number,
        text: text.into(),
    }
}

#[test]
fn total_amount_with_thousands_separator() {
    let fields = canonicalize(r#"{"Total Amount": "1,234.50"}"#).unwrap();
    assert_eq!(fields.len(), 1);
    assert_eq!(fields.get(&path("total_amount")), Some(&s("1234.50")));
}

#[test]
fn leading_zero_number_is_malformed() {
    let err = canonicalize(r#"{"items":[{"qty":2},{"qty":03}]}"#).unwrap_err();
    assert!(matches!(err, CanonError::InvalidJson(_)), "{err:?}");
}

#[test]
fn nested_whitespace_collapse() {
    let fields = canonicalize(r#"{"vendor":{"name":"  ACME  Co "}}"#).unwrap();
    assert_eq!(fields.get(&path("vendor.name")), Some(&s("ACME Co")));
}

#[test]
fn top_level_must_be_object() {
    assert_eq!(canonicalize("[]"), Err(CanonError::NotAnObject));
    assert_eq!(canonicalize("42"), Err(CanonError::NotAnObject));
    assert_eq!(canonicalize(r#""x""#), Err(CanonError::NotAnObject));
}

#[test]
fn depth_cap() {
    let deep = |levels: usize| format!("{}1{}", r#"{"a":"#.repeat(levels), "}".repeat(levels));
    assert!(canonicalize(&deep(32)).is_ok());
    assert_eq!(canonicalize(&deep(33)), Err(CanonError::DepthExceeded(32)));
}

#[test]
fn key_path_length_cap() {
    let long_key = "k".repeat(MAX_PATH_LEN + 1);
    let err = canonicalize(&format!(r#"{{"{long_key}": 1}}"#)).unwrap_err();
    assert!(matches!(err, CanonError::PathTooLong(_)));
    let ok_key = "k".repeat(MAX_PATH_LEN);
    assert!(canonicalize(&format!(r#"{{"{ok_key}": 1}}"#)).is_ok());
}

#[test]
fn key_normalization() {
    assert_eq!(normalize_key("  Invoice - Number "), "invoice_number");
    assert_eq!(normalize_key("PO\t\tNumber"), "po_number");
    assert_eq!(normalize_key("a.b[0]"), "a%2Eb%5B0%5D");
    assert_eq!(normalize_key("already_ok"), "already_ok");
}

#[test]
fn empty_key_is_rejected() {
    assert!(matches!(
        canonicalize(r#"{"  ": 1}"#),
        Err(CanonError::InvalidJson(_))
    ));
}

#[test]
fn numbers_are_minimal_decimals() {
    let cases = [
        ("0", "0"),
        ("-0", "0"),
        ("-0.0e5", "0"),
        ("1.50", "1.5"),
        ("1.0", "1"),
        ("150e-2", "1.5"),
        ("1.5e2", "150"),
        ("1E3", "1000"),
        ("0.00120", "0.0012"),
        ("-12.3400e-3", "-0.01234"),
        ("100", "100"),
        ("123456789012345678901234567890", "123456789012345678901234567890"),
    ];
    for (raw, want) in cases {
        assert_eq!(normalize_number(raw).unwrap(), want, "for {raw}");
    }
    assert!(normalize_number("1e5000").is_err());
    assert!(normalize_number("1e-99999999999").is_err());
}

#[test]
fn numeric_strings_keep_kind_and_fraction() {
    assert_eq!(CanonValue::string("1,200.00"), s("1200.00"));
    assert_eq!(CanonValue::string(" -12,345 "), s("-12345"));
    assert_eq!(CanonValue::string("10000"), s("10000"));
    // ID-like codes keep their leading zeros.
    assert_eq!(CanonValue::string("007"), s("007"));
    assert_eq!(CanonValue::string("0,123"), s("0,123"));
    // Malformed grouping is not a number.
    assert_eq!(CanonValue::string("1,2,3"), s("1,2,3"));
    assert_eq!(CanonValue::string("12,34"), s("12,34"));
    assert_eq!(CanonValue::string("1 234"), s("1 234"));
    assert_eq!(CanonValue::string("0.50"), s("0.50"));
}

#[test]
fn scalar_kinds() {
    let fields = canonicalize(r#"{"a": true, "b": null, "c": 2.50, "d": "2.50"}"#).unwrap();
    assert_eq!(fields.get(&path("a")), Some(&CanonValue::boolean(true)));
    assert_eq!(fields.get(&path("b")), Some(&CanonValue::null()));
    assert_eq!(fields.get(&path("c")), Some(&n("2.5")));
    assert_eq!(fields.get(&path("d")), Some(&s("2.50")));
}

#[test]
fn duplicate_keys_last_wins_with_warning() {
    let out = canonicalize_with_warnings(r#"{"Total": "1", "total": "2"}"#).unwrap();
    assert_eq!(out.fields.get(&path("total")), Some(&s("2")));
    assert_eq!(out.warnings.len(), 1);
    assert!(out.warnings[0].contains("total"));

    // The overridden subtree disappears entirely.
    let out = canonicalize_with_warnings(r#"{"a": {"x": 1, "y": 2}, "a": {"x": 3}}"#).unwrap();
    assert_eq!(out.fields.len(), 1);
    assert_eq!(out.fields.get(&path("a.x")), Some(&n("3")));
}

#[test]
fn empty_containers() {
    assert!(canonicalize(r#"{"a": {}, "b": []}"#).unwrap().is_empty());
    // As array elements they hold their index.
    let fields = canonicalize(r#"{"a": [{}, 1, [], {"b": {}}]}"#).unwrap();
    let expected: CanonicalFieldMap = [
        (path("a[0]"), CanonValue::null()),
        (path("a[1]"), n("1")),
        (path("a[2]"), CanonValue::null()),
        (path("a[3]"), CanonValue::null()),
    ]
    .into_iter()
    .collect();
    assert_eq!(fields, expected);
}

#[test]
fn key_path_parsing() {
    assert_eq!(
        path("items[0][12].qty").segments(),
        vec![
            Segment::Key("items".into()),
            Segment::Index(0),
            Segment::Index(12),
            Segment::Key("qty".into()),
        ]
    );
    for bad in ["", ".a", "a.", "a..b", "[0]", "a[01]", "a[x]", "a[0", "Upper", "a]b", "a b"] {
        assert!(KeyPath::parse(bad).is_err(), "accepted {bad:?}");
    }
}

#[test]
fn render_empty() {
    assert_eq!(render(&CanonicalFieldMap::new()).unwrap(), "{}");
}

#[test]
fn render_nested() {
    let fields: CanonicalFieldMap = [(path("a"), n("1")), (path("b.c"), s("x"))]
        .into_iter()
        .collect();
    assert_eq!(
        render(&fields).unwrap(),
        "{\n  \"a\": 1,\n  \"b\": {\n    \"c\": \"x\"\n  }\n}"
    );
}

#[test]
fn render_fills_array_gaps_with_null() {
    let fields: CanonicalFieldMap = [(path("items[0].qty"), n("2")), (path("items[2].qty"), n("5"))]
        .into_iter()
        .collect();
    let text = render(&fields).unwrap();
    let again = canonicalize(&text).unwrap();
    let expected: CanonicalFieldMap = [
        (path("items[0].qty"), n("2")),
        (path("items[1]"), CanonValue::null()),
        (path("items[2].qty"), n("5")),
    ]
    .into_iter()
    .collect();
    assert_eq!(again, expected);
    let tree: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(tree["items"].as_array().unwrap().len(), 3);
    assert!(tree["items"][1].is_null());
}

#[test]
fn render_rejects_prefix_conflicts() {
    for (a, b) in [("a", "a.b"), ("a", "a[0]"), ("a.b", "a[0]")] {
        let fields: CanonicalFieldMap = [(path(a), n("1")), (path(b), n("2"))]
            .into_iter()
            .collect();
        match render(&fields) {
            Err(CanonError::PathConflict(x, y)) => {
                let mut got = [x, y];
                got.sort();
                let mut want = [a.to_owned(), b.to_owned()];
                want.sort();
                assert_eq!(got, want);
            }
            other => panic!("{a} / {b}: {other:?}"),
        }
    }
}

#[test]
fn render_unescapes_keys() {
    let fields = canonicalize(r#"{"a.b": {"[x]": 1}}"#).unwrap();
    assert!(fields.get(&path("a%2Eb.%5Bx%5D")).is_some());
    let text = render(&fields).unwrap();
    assert!(text.contains("\"a.b\""));
    assert_eq!(canonicalize(&text).unwrap(), fields);
}

#[test]
fn field_map_serde_round_trip() {
    let fields = canonicalize(r#"{"a": [1, "x"], "b": {"c": null}}"#).unwrap();
    let json = serde_json::to_string(&fields).unwrap();
    let back: CanonicalFieldMap = serde_json::from_str(&json).unwrap();
    assert_eq!(back, fields);
    assert!(serde_json::from_str::<CanonicalFieldMap>(r#"{"A": {"kind":"null","text":"null"}}"#).is_err());
}

// ---- property tests -------------------------------------------------------

#[derive(Debug, Clone)]
enum Json {
    Null,
    Bool(bool),
    Num(String),
    Str(String),
    Arr(Vec<Json>),
    Obj(Vec<(String, Json)>),
}

impl Json {
    fn write(&self, out: &mut String) {
        match self {
            Json::Null => out.push_str("null"),
            Json::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            Json::Num(n) => out.push_str(n),
            Json::Str(s) => out.push_str(&serde_json::to_string(s).unwrap()),
            Json::Arr(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    item.write(out);
                }
                out.push(']');
            }
            Json::Obj(members) => {
                out.push('{');
                for (i, (k, v)) in members.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    out.push_str(&serde_json::to_string(k).unwrap());
                    out.push(':');
                    v.write(out);
                }
                out.push('}');
            }
        }
    }

    fn text(&self) -> String {
        let mut out = String::new();
        self.write(&mut out);
        out
    }

    /// Reverses member order at every level.
    fn reversed(&self) -> Json {
        match self {
            Json::Arr(items) => Json::Arr(items.iter().map(Json::reversed).collect()),
            Json::Obj(members) => Json::Obj(
                members
                    .iter()
                    .rev()
                    .map(|(k, v)| (k.clone(), v.reversed()))
                    .collect(),
            ),
            other => other.clone(),
        }
    }
}

fn json_number() -> impl Strategy<Value = String> {
    (
        any::<bool>(),
        prop_oneof!["0", "[1-9][0-9]{0,6}"],
        proptest::option::of("[0-9]{1,4}"),
        proptest::option::of((
            prop_oneof![Just("e"), Just("E")],
            prop_oneof![Just(""), Just("+"), Just("-")],
            "[0-9]{1,2}",
        )),
    )
        .prop_map(|(neg, int, frac, exp)| {
            let mut s = String::new();
            if neg {
                s.push('-');
            }
            s.push_str(&int);
            if let Some(f) = frac {
                s.push('.');
                s.push_str(&f);
            }
            if let Some((e, sign, digits)) = exp {
                s.push_str(e);
                s.push_str(sign);
                s.push_str(&digits);
            }
            s
        })
}

fn json_string() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-zA-Z ]{0,12}",
        "[0-9]{1,3}(,[0-9]{3}){0,2}(\\.[0-9]{1,2})?",
        "0[0-9]{1,4}",
        " *[a-z]+\t+[a-z]+ *",
        "\\PC{0,8}",
    ]
}

/// Keys deliberately include case, whitespace, hyphens and path
/// metacharacters so normalization collisions happen.
fn json_key() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-c]{1,2}",
        "[A-C][a-c]?",
        "[a-c]( |-|\t)+[a-c]",
        "[a-c][.\\[\\]%][a-c]?",
        "%2[Ee]|%5[BbDd]",
    ]
}

fn json_value() -> impl Strategy<Value = Json> {
    let leaf = prop_oneof![
        Just(Json::Null),
        any::<bool>().prop_map(Json::Bool),
        json_number().prop_map(Json::Num),
        json_string().prop_map(Json::Str),
    ];
    leaf.prop_recursive(5, 48, 5, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Json::Arr),
            prop::collection::vec((json_key(), inner), 0..5).prop_map(Json::Obj),
        ]
    })
}

fn json_object() -> impl Strategy<Value = Json> {
    prop::collection::vec((json_key(), json_value()), 0..6).prop_map(Json::Obj)
}

/// Objects whose keys stay distinct after normalization, so that member
/// order cannot matter (with duplicates, "last wins" is order-dependent).
fn distinct_key_object() -> impl Strategy<Value = Json> {
    json_object().prop_map(|j| dedupe(&j))
}

fn dedupe(j: &Json) -> Json {
    match j {
        Json::Arr(items) => Json::Arr(items.iter().map(dedupe).collect()),
        Json::Obj(members) => {
            let mut seen = std::collections::HashSet::new();
            Json::Obj(
                members
                    .iter()
                    .filter(|(k, _)| seen.insert(normalize_key(k)))
                    .map(|(k, v)| (k.clone(), dedupe(v)))
                    .collect(),
            )
        }
        other => other.clone(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn canonicalize_render_is_idempotent(doc in json_object()) {
        let first = match canonicalize(&doc.text()) {
            Ok(f) => f,
            // Only empty keys can fail here.
            Err(CanonError::InvalidJson(_)) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(format!("{e}"))),
        };
        let rendered = render(&first).unwrap();
        prop_assert_eq!(canonicalize(&rendered).unwrap(), first);
    }

    #[test]
    fn key_order_does_not_matter(doc in distinct_key_object()) {
        let forward = canonicalize(&doc.text());
        let backward = canonicalize(&doc.reversed().text());
        prop_assert_eq!(forward, backward);
    }

    #[test]
    fn render_is_byte_deterministic(doc in json_object()) {
        if let Ok(fields) = canonicalize(&doc.text()) {
            let a = render(&fields).unwrap();
            let b = render(&fields.clone()).unwrap();
            let c = render(&canonicalize(&doc.text()).unwrap()).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(&a, &c);
        }
    }

    #[test]
    fn render_is_injective_on_canonical_forms(a in json_object(), b in json_object()) {
        if let (Ok(fa), Ok(fb)) = (canonicalize(&a.text()), canonicalize(&b.text())) {
            if render(&fa).unwrap() == render(&fb).unwrap() {
                prop_assert_eq!(fa, fb);
            }
        }
    }

    #[test]
    fn canonical_number_text_round_trips(raw in json_number()) {
        let text = normalize_number(&raw).unwrap();
        prop_assert_eq!(normalize_number(&text).unwrap(), text.clone());
        let a: f64 = raw.parse().unwrap();
        let b: f64 = text.parse().unwrap();
        prop_assert!((a - b).abs() <= a.abs() * 1e-12);
    }

    #[test]
    fn every_path_parses_back(doc in json_object()) {
        if let Ok(fields) = canonicalize(&doc.text()) {
            for p in fields.paths() {
                prop_assert_eq!(&KeyPath::parse(p.as_str()).unwrap(), p);
            }
        }
    }
}
