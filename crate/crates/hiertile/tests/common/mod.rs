//! Shared helpers for the integration tests: listing paths and a seeded
//! generator of valid schedules.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::PathBuf;

use hiertile::script::{load, DimOverrides, Loaded};
use hiertile_core::codegen::generate;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn listing_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../listings").join(name)
}

pub fn listing(name: &str) -> String {
    std::fs::read_to_string(listing_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn load_listing(name: &str, dims: DimOverrides) -> Loaded {
    load(&listing(name), dims).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Largest `m * n * k` the generator produces; keeps simulation time bounded.
pub const MAX_VOLUME: usize = 1 << 22;

pub struct RandomTree {
    pub seed: u64,
    pub text: String,
    pub loaded: Loaded,
}

fn pow2_upto(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    let (a, b) = (lo.trailing_zeros(), hi.trailing_zeros());
    1 << rng.gen_range(a..=b)
}

fn major(rng: &mut ChaCha8Rng) -> &'static str {
    if rng.gen_bool(0.5) {
        "row"
    } else {
        "col"
    }
}

/// One candidate schedule. `None` when the random choices do not fit
/// together (thread count, lane count, divisibility).
fn candidate(rng: &mut ChaCha8Rng) -> Option<String> {
    let dims = [16, 32, 64, 128, 256];
    let (m, n, k) = (*dims.choose(rng)?, *dims.choose(rng)?, *dims.choose(rng)?);
    if m * n * k > MAX_VOLUME {
        return None;
    }
    let mut s = format!("spec matmul {m} {n} {k} A:f32:{} B:f32:{} C:f32:{}\n", major(rng), major(rng), major(rng));

    let (bm, bn) = (pow2_upto(rng, 8, m), pow2_upto(rng, 8, n));
    let blocks = (m / bm) * (n / bn);
    let _ = write!(s, "tile {bm} {bn} .to Block");
    if rng.gen_bool(0.3) {
        let _ = write!(s, " .layout {}", major(rng));
    }
    if blocks > 1 && rng.gen_bool(0.3) {
        let _ = write!(s, " .swizzle ((id + {}) % {blocks})", rng.gen_range(1..blocks));
    }
    s.push_str("\nepilog RF\n");

    let kb = pow2_upto(rng, 1, k.min(32));
    s.push_str(&format!("split {kb}"));
    if k / kb <= 8 && rng.gen_bool(0.3) {
        s.push_str(" .unroll");
    }
    s.push('\n');
    for op in ["A", "B"] {
        if rng.gen_bool(0.6) {
            let _ = write!(s, "load {op} SH");
            if rng.gen_bool(0.3) {
                let _ = write!(s, " .pad {}", [1, 2, 4][rng.gen_range(0..3)]);
            }
            if rng.gen_bool(0.3) {
                let _ = write!(s, " .storageLayout {}", major(rng));
            }
            s.push('\n');
        }
    }

    let (tm, tn) = (pow2_upto(rng, 1, bm.min(8)), pow2_upto(rng, 1, bn.min(8)));
    if rng.gen_bool(0.6) {
        let lr = 1usize << rng.gen_range(0..=5);
        let (wm, wn) = (lr * tm, (32 / lr) * tn);
        if bm % wm != 0 || bn % wn != 0 {
            return None;
        }
        let threads = (bm / wm) * (bn / wn) * 32;
        if threads > 1024 {
            return None;
        }
        let _ = writeln!(s, "tile {wm} {wn} .to Warp");
    } else if (bm / tm) * (bn / tn) > 1024 {
        return None;
    }
    let _ = write!(s, "tile {tm} {tn} .to Thread");
    if rng.gen_bool(0.3) {
        let _ = write!(s, " .layout {}", major(rng));
    }
    let ks = pow2_upto(rng, 1, kb);
    let _ = write!(s, "\nsplit {ks}\nload A RF\nload B RF\n");
    if ks > 1 {
        s.push_str("split 1\n");
    }
    s.push_str("tile 1 1");
    if rng.gen_bool(0.3) {
        s.push_str(" .unroll");
    }
    s.push_str("\ndone\n");
    Some(s)
}

/// A schedule that parses, validates and fits in shared memory.
pub fn random_tree(seed: u64) -> RandomTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let Some(text) = candidate(&mut rng) else { continue };
        let Ok(loaded) = load(&text, DimOverrides::default()) else { continue };
        if loaded.report.launch.block_threads > 1024 || generate(&loaded.root, &loaded.tree).is_err() {
            continue;
        }
        return RandomTree { seed, text, loaded };
    }
}
