mod common;

use common::random_tree;
use hiertile::commands::{inputs, simulate, verify};
use hiertile::matrix_io::Values;
use hiertile::oracle;
use hiertile::script::{parse, DimOverrides};
use hiertile_core::codegen::generate;
use hiertile_core::lower::lower;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_schedules_match_oracle(seed in any::<u64>()) {
        let t = random_tree(seed);
        let v = verify(&t.loaded, seed, Values::Integer, 0.0);
        prop_assert!(v.pass, "{}\n{}", t.text, v.summary());
    }

    #[test]
    fn printed_scripts_reparse(seed in any::<u64>()) {
        let t = random_tree(seed);
        let printed = parse(&t.text).unwrap().to_string();
        let again = parse(&printed).unwrap();
        prop_assert_eq!(again.to_string(), printed.clone());
        let (root, tree) = again.resolve(DimOverrides::default()).unwrap();
        prop_assert_eq!(root, t.loaded.root.clone());
        prop_assert_eq!(tree, t.loaded.tree.clone());
    }

    #[test]
    fn lowering_is_deterministic(seed in any::<u64>()) {
        let t = random_tree(seed);
        let a = generate(&t.loaded.root, &t.loaded.tree).unwrap();
        let b = generate(&t.loaded.root, &t.loaded.tree).unwrap();
        prop_assert_eq!(a, b);
        let k = lower(&t.loaded.root, &t.loaded.tree).unwrap();
        prop_assert!(k.launch.block_threads <= 1024);
        prop_assert!(k.buffers.shared_bytes() <= 48 * 1024);
    }
}

#[test]
fn float_inputs_stay_close() {
    for seed in 0..4 {
        let t = random_tree(1000 + seed);
        let ins = inputs(&t.loaded, seed, Values::Float);
        let want = oracle::matmul(&t.loaded.root, &ins[0], &ins[1]);
        let got = simulate(&t.loaded, ins, false).unwrap().output;
        let err = got.max_abs_diff(&want);
        assert!(err <= 1e-3, "{}\nerror {err}", t.text);
    }
}
