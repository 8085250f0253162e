//! Property tests for the data layer and the bundled fixtures.

use std::collections::HashMap;
use std::io::Cursor;

use proptest::prelude::*;

use l2gd_core::data::{
    fixtures, parse_libsvm, partition_sequential, serialize_libsvm, LabeledExample,
};

fn arb_example() -> impl Strategy<Value = LabeledExample> {
    let label = prop_oneof![Just(1.0), Just(-1.0)];
    let features = proptest::collection::btree_map(0usize..200, -100.0f64..100.0, 0..12)
        .prop_map(|m| m.into_iter().collect::<Vec<_>>());
    (features, label).prop_map(|(features, label)| LabeledExample { features, label })
}

proptest! {
    /// parse(serialize(examples)) is the identity on the sparse form.
    #[test]
    fn libsvm_round_trip(examples in proptest::collection::vec(arb_example(), 1..40)) {
        let text = serialize_libsvm(&examples);
        let (parsed, _) = parse_libsvm(Cursor::new(text.as_bytes()), None).unwrap();
        prop_assert_eq!(parsed, examples);
    }

    /// Partitioning is exact: sizes differ by at most one, nothing is lost
    /// or duplicated (multiset equality on the serialized form).
    #[test]
    fn partition_is_exact(
        examples in proptest::collection::vec(arb_example(), 1..60),
        n in 1usize..8,
    ) {
        prop_assume!(n <= examples.len());
        let part = partition_sequential(examples.clone(), n, 200).unwrap();
        let sizes: Vec<usize> = part.clients.iter().map(Vec::len).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), examples.len());
        let max = sizes.iter().max().unwrap();
        let min = sizes.iter().min().unwrap();
        prop_assert!(max - min <= 1);

        let mut source: HashMap<String, isize> = HashMap::new();
        for ex in &examples {
            *source.entry(serialize_libsvm(std::slice::from_ref(ex))).or_default() += 1;
        }
        for client in &part.clients {
            for ex in client {
                *source.entry(serialize_libsvm(std::slice::from_ref(ex))).or_default() -= 1;
            }
        }
        prop_assert!(source.values().all(|&c| c == 0));
    }
}

/// The committed fixture files are exactly what the generator produces, so
/// their provenance is checkable and regeneration is deterministic.
#[test]
fn bundled_fixtures_match_their_generator() {
    let dir = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    for (name, (count, seed)) in [
        ("a1a.libsvm", fixtures::A1A_LIKE),
        ("a2a.libsvm", fixtures::A2A_LIKE),
    ] {
        let expected = serialize_libsvm(&fixtures::adult_like(count, seed));
        let actual = std::fs::read_to_string(dir.join(name))
            .unwrap_or_else(|e| panic!("fixture {name} missing: {e}"));
        assert_eq!(actual, expected, "{name} differs from its generator");
    }
}
