//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any of them fails.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{golden_path, listing, load_listing, random_tree};
use hiertile::commands::{self, inputs, simulate, verify};
use hiertile::matrix_io::Values;
use hiertile::oracle;
use hiertile::script::{load, DimOverrides};
use hiertile_core::codegen::{generate, CodegenError, SHARED_LIMIT};
use hiertile_core::index::{cst, is_permutation, maxwell_swizzle, var, IndexExpr};
use hiertile_core::lower::lower;
use hiertile_core::sim::check_ownership;
use hiertile_core::spec::{match_executable, Executable, InstructionSet, MicroKernelSet};
use hiertile_core::{DecompError, MemLevel};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(t: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(t < limit, format!("{what} took {:.2?}, limit {limit:?}", t))
}

fn dims(m: usize, n: usize, k: usize) -> DimOverrides {
    DimOverrides { m: Some(m), n: Some(n), k: Some(k) }
}

fn listing1_trace() -> Outcome {
    let golden = std::fs::read_to_string(golden_path("listing1.trace")).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let l = load(&listing("listing1.fi"), DimOverrides::default()).map_err(|e| e.to_string())?;
    let trace = commands::elaborate(&l);
    let t = start.elapsed();
    ensure(trace.lines().count() == 12, format!("{} trace lines", trace.lines().count()))?;
    ensure(trace == golden, format!("trace differs from golden:\n{trace}"))?;
    within(t, Duration::from_secs(1), "elaboration")?;
    Ok(format!("12 lines, byte-exact, {t:.2?}"))
}

fn listing2_binds_fma() -> Outcome {
    let l = load_listing("listing2.fi", DimOverrides::default());
    let last = l.report.trace.last().ok_or("empty trace")?;
    let form = last.spec.short_form();
    ensure(form == "MatMul(1,1,1)(RF,RF,RF)(Thread)", format!("leaf is {form}"))?;
    let hit = match_executable(&last.spec, &InstructionSet::builtin(), &MicroKernelSet::new()).map_err(|e| e.to_string())?;
    match hit {
        Some(Executable::Instruction(i)) if i.name == "FMA" => Ok(format!("{form} -> FMA")),
        other => Err(format!("leaf binds {other:?}")),
    }
}

/// Seeds and race totals of the random schedules checked by criterion 3.
struct RandomRuns {
    races: Vec<(u64, usize)>,
}

fn exact_equivalence(runs: &mut RandomRuns) -> Outcome {
    let start = Instant::now();
    let l = load_listing("listing2.fi", dims(128, 128, 32));
    let v = verify(&l, 1, Values::Integer, 0.0);
    ensure(v.pass, format!("listing 2: {}", v.summary()))?;
    for seed in 0..50 {
        let t = random_tree(seed);
        let ins = inputs(&t.loaded, seed, Values::Integer);
        let want = oracle::matmul(&t.loaded.root, &ins[0], &ins[1]);
        let sim = simulate(&t.loaded, ins, false).map_err(|e| format!("seed {seed}: {e}\n{}", t.text))?;
        ensure(sim.output == want, format!("seed {seed}: output differs from oracle\n{}", t.text))?;
        runs.races.push((seed, sim.races.total));
    }
    let t = start.elapsed();
    within(t, Duration::from_secs(60), "listing 2 and 50 random schedules")?;
    Ok(format!("listing 2 and 50 random schedules exact, {t:.2?}"))
}

fn float_error() -> Outcome {
    let mut worst = 0f32;
    for k in [32, 128, 512] {
        let l = load_listing("listing2.fi", dims(128, 128, k));
        let v = verify(&l, k as u64, Values::Float, 1e-3);
        ensure(v.pass, format!("K={k}: {}", v.summary()))?;
        worst = worst.max(v.max_error.unwrap_or(f32::INFINITY));
    }
    for seed in 100..105 {
        let t = random_tree(seed);
        let v = verify(&t.loaded, seed, Values::Float, 1e-3);
        ensure(v.pass, format!("seed {seed}: {}\n{}", v.summary(), t.text))?;
        worst = worst.max(v.max_error.unwrap_or(f32::INFINITY));
    }
    Ok(format!("max error {worst:e} (limit 1e-3)"))
}

fn wmma() -> Outcome {
    let start = Instant::now();
    let l = load_listing("wmma_simple.fi", DimOverrides::default());
    let reached = l
        .report
        .trace
        .iter()
        .any(|e| e.depth == 0 && e.spec.short_form().ends_with("(FR,FR,FR)(Warp)"));
    ensure(reached, "trace never reaches (FR,FR,FR)(Warp)")?;
    let tol = 2f32.powi(-8);
    let v = verify(&l, 5, Values::Float, tol);
    ensure(v.pass, v.summary())?;
    let src = generate(&l.root, &l.tree).map_err(|e| e.to_string())?.source;
    let calls: BTreeSet<&str> = src
        .split("wmma::")
        .skip(1)
        .filter_map(|s| s.split_once('(').map(|(name, _)| name))
        .filter(|name| name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
        .collect();
    let want: BTreeSet<&str> = ["load_matrix_sync", "mma_sync", "store_matrix_sync"].into();
    ensure(calls == want, format!("wmma calls {calls:?}"))?;
    let t = start.elapsed();
    within(t, Duration::from_secs(10), "wmma run")?;
    Ok(format!("error {:e} <= 2^-8, calls {:?}, {t:.2?}", v.max_error.unwrap_or(0.0), calls))
}

fn races(runs: &RandomRuns) -> Outcome {
    let l = load_listing("listing2_nosync.fi", DimOverrides::default());
    let sim = simulate(&l, inputs(&l, 3, Values::Integer), false).map_err(|e| e.to_string())?;
    ensure(!sim.races.is_empty(), "noSync on A produced no race")?;
    let clean = load_listing("listing2.fi", DimOverrides::default());
    let s2 = simulate(&clean, inputs(&clean, 3, Values::Integer), false).map_err(|e| e.to_string())?;
    ensure(s2.races.is_empty(), format!("listing 2 reports {} races", s2.races.total))?;
    ensure(runs.races.len() == 50, "random schedules did not run")?;
    if let Some((seed, n)) = runs.races.iter().find(|(_, n)| *n > 0) {
        return Err(format!("random schedule {seed} reports {n} races"));
    }
    Ok(format!("noSync: {} races; listing 2 and 50 random schedules: none", sim.races.total))
}

/// Lanes of an 8x4 lane grid over a 64x32 warp tile whose 8x8 thread tile
/// lands on the same spot under row-major (main chain) and column-major
/// (store) lane ordering.
fn expected_clean_lanes() -> BTreeSet<usize> {
    (0..32usize)
        .filter(|&l| {
            let main = (l % 8, l / 8);
            let store = (l / 4, l % 4);
            main == store
        })
        .collect()
}

fn ownership() -> Outcome {
    let l = load_listing("listing2.fi", DimOverrides::default());
    let ok = check_ownership(&l.root, &l.tree).map_err(|e| e.to_string())?;
    ensure(ok.is_ok(), format!("listing 2: {} violations", ok.violations.len()))?;
    let t = load_listing("transposed_store.fi", DimOverrides::default());
    let bad = check_ownership(&t.root, &t.tree).map_err(|e| e.to_string())?;
    ensure(!bad.is_ok(), "transposed store passed the ownership check")?;
    let violating = bad.violating_lanes();
    let warps: BTreeSet<usize> = violating.iter().map(|&(w, _)| w).collect();
    for w in &warps {
        let clean: BTreeSet<usize> = (0..32).filter(|l| !violating.contains(&(*w, *l))).collect();
        ensure(clean == expected_clean_lanes(), format!("warp {w}: clean lanes {clean:?}"))?;
    }
    ensure(expected_clean_lanes() == [0, 31].into(), "lane oracle disagrees with {0, 31}")?;
    Ok(format!(
        "listing 2 clean; transposed store: {} violations in {} warps, lanes 0 and 31 clean",
        bad.violations.len(),
        warps.len()
    ))
}

fn swizzle() -> Outcome {
    let s = maxwell_swizzle();
    let image: BTreeSet<i64> = (0..64).map(|id| s.eval(&[("id", id)]).unwrap_or(-1)).collect();
    ensure(image == (0..64).collect(), "maxwell swizzle image is not [0,64)")?;
    ensure(is_permutation(&s, 64).unwrap_or(false), "is_permutation disagrees")?;
    let text = |sw: &str| format!("spec matmul 256 256 8\ntile 32 32 .to Block .swizzle ({sw})\nepilog RF\ntile 1 1 .to Thread\nsplit 1\nload A RF\nload B RF\ndone\n");
    let good = load(&text(&s.emit_c()), DimOverrides::default()).map_err(|e| e.to_string())?;
    let v = verify(&good, 9, Values::Integer, 0.0);
    ensure(v.pass, format!("swizzled schedule: {}", v.summary()))?;
    match load(&text("3"), DimOverrides::default()) {
        Err(hiertile::script::ScriptError::Invalid { violation, .. })
            if matches!(violation.error, DecompError::SwizzleNotBijective { domain: 64 }) =>
        {
            Ok("maxwell swizzle permutes [0,64) and simulates exactly; constant swizzle rejected".into())
        }
        other => Err(format!("constant swizzle: {other:?}")),
    }
}

fn random_expr(rng: &mut ChaCha8Rng, depth: u32) -> IndexExpr {
    if depth == 0 || rng.gen_bool(0.25) {
        return match rng.gen_range(0..3) {
            0 => cst(rng.gen_range(0..=64)),
            1 => cst([0, 1, 2, 8, 32][rng.gen_range(0..5)]),
            _ => var(["x", "y", "z"][rng.gen_range(0..3)]),
        };
    }
    let a = random_expr(rng, depth - 1);
    match rng.gen_range(0..9) {
        0 => a.add(random_expr(rng, depth - 1)),
        1 => a.mul(random_expr(rng, depth - 1)),
        2 => a.div(cst(rng.gen_range(1..=32))),
        3 => a.rem(cst(rng.gen_range(1..=32))),
        4 => a.shl(cst(rng.gen_range(0..=4))),
        5 => a.shr(cst(rng.gen_range(0..=4))),
        6 => a.and(random_expr(rng, depth - 1)),
        7 => a.or(random_expr(rng, depth - 1)),
        _ => {
            let c = rng.gen_range(1..=16);
            a.clone().div(cst(c)).mul(cst(c)).add(a.rem(cst(c)))
        }
    }
}

/// Offending `* 0`, `+ 0`, `* 1` and `0 *` tokens: the literal must not be
/// part of a longer number.
fn identity_tokens(src: &str) -> Vec<String> {
    let b = src.as_bytes();
    let mut hits = Vec::new();
    for pat in ["* 0", "+ 0", "* 1"] {
        for (i, _) in src.match_indices(pat) {
            let end = i + pat.len();
            if !b.get(end).is_some_and(|c| c.is_ascii_digit() || *c == b'.') {
                hits.push(src[i.saturating_sub(20)..(end + 10).min(src.len())].to_string());
            }
        }
    }
    for (i, _) in src.match_indices("0 *") {
        if i == 0 || !b[i - 1].is_ascii_digit() {
            hits.push(src[i.saturating_sub(20)..(i + 13).min(src.len())].to_string());
        }
    }
    hits
}

fn index_expressions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1de5);
    let mut checked = 0;
    while checked < 10_000 {
        let e = random_expr(&mut rng, 5);
        let env = [("x", rng.gen_range(0..1000)), ("y", rng.gen_range(0..1000)), ("z", rng.gen_range(0..1000))];
        let Ok(v) = e.eval(&env) else { continue };
        let s = e.simplify();
        ensure(s.eval(&env) == Ok(v), format!("{e} => {s} changes value at {env:?}"))?;
        checked += 1;
    }
    let mut kernels = Vec::new();
    for (name, d) in [
        ("listing2.fi", DimOverrides::default()),
        ("listing2_pad.fi", DimOverrides::default()),
        ("listing1.fi", dims(256, 256, 32)),
        ("wmma_simple.fi", DimOverrides::default()),
        ("wmma_staged.fi", DimOverrides::default()),
        ("reuse_epilog.fi", DimOverrides::default()),
        ("transposed_store.fi", DimOverrides::default()),
        ("hmma.fi", DimOverrides::default()),
    ] {
        let l = load_listing(name, d);
        kernels.push((name.to_string(), generate(&l.root, &l.tree).map_err(|e| format!("{name}: {e}"))?.source));
    }
    for seed in 0..20 {
        let t = random_tree(seed);
        kernels.push((format!("random {seed}"), generate(&t.loaded.root, &t.loaded.tree).map_err(|e| e.to_string())?.source));
    }
    for (name, src) in &kernels {
        let hits = identity_tokens(src);
        ensure(hits.is_empty(), format!("{name}: {hits:?}"))?;
    }
    ensure(!identity_tokens("x = (a * 1);").is_empty(), "token check misses `* 1`")?;
    ensure(identity_tokens("x = a * 16 + 0.5f;").is_empty(), "token check flags `* 16`")?;
    Ok(format!("{checked} eval/simplify checks; {} kernels free of identity arithmetic", kernels.len()))
}

fn buffers() -> Outcome {
    let padded = load_listing("listing2_pad.fi", DimOverrides::default());
    let k = lower(&padded.root, &padded.tree).map_err(|e| e.to_string())?;
    let a = k
        .buffers
        .buffers
        .iter()
        .find(|b| b.role == 'A' && b.mem == MemLevel::SH)
        .ok_or("no A staging buffer")?;
    // col-major 128x8 tile, 4 elements of padding after each column
    let want = 8 * (128 + 4);
    ensure((a.rows, a.cols) == (128, 8), format!("A tile {}x{}", a.rows, a.cols))?;
    ensure(a.extent == want, format!("padded extent {} != {want}", a.extent))?;
    let src = generate(&padded.root, &padded.tree).map_err(|e| e.to_string())?.source;
    ensure(src.contains(&format!("{}[{want}];", a.name)), "padded declaration missing")?;

    let reuse = load_listing("reuse_epilog.fi", DimOverrides::default());
    let k = lower(&reuse.root, &reuse.tree).map_err(|e| e.to_string())?;
    let shared: Vec<_> = k.buffers.buffers.iter().filter(|b| b.is_shared()).collect();
    let c = shared.iter().find(|b| b.role == 'C').ok_or("no C staging buffer")?;
    let group = &k.buffers.groups[c.group.ok_or("C staging buffer has no group")?];
    ensure(group.members.len() == 2, format!("alias group has {} members", group.members.len()))?;
    let bytes = group.members.iter().map(|&m| k.buffers.buffers[m].bytes()).max().unwrap_or(0);
    ensure(group.bytes == bytes && bytes == 64 * 64 * 4, format!("group is {} bytes, want {bytes}", group.bytes))?;
    let src = generate(&reuse.root, &reuse.tree).map_err(|e| e.to_string())?.source;
    ensure(src.contains(&format!("[{bytes}];")), "shared allocation not sized to the larger member")?;
    let v = verify(&reuse, 4, Values::Integer, 0.0);
    ensure(v.pass, format!("reuse schedule: {}", v.summary()))?;

    let big = load_listing("listing1.fi", DimOverrides::default());
    match generate(&big.root, &big.tree) {
        Err(CodegenError::SharedCapacity { bytes, limit }) if bytes > limit && limit == SHARED_LIMIT => Ok(format!(
            "pad -> {want} elements; reuse pair shares {bytes_r} bytes; listing 1 needs {bytes} > {limit}",
            bytes_r = group.bytes
        )),
        other => Err(format!("listing 1 codegen: {:?}", other.map(|s| s.shared_bytes))),
    }
}

fn main() -> ExitCode {
    let mut runs = RandomRuns { races: Vec::new() };
    let mut results: Vec<(&str, Outcome, Duration)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let r = f();
        results.push((name, r, start.elapsed()));
        let (name, r, t) = results.last().unwrap();
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} {name:<28} {detail} [{t:.2?}]");
    };
    run("1 listing 1 trace", &mut listing1_trace);
    run("2 listing 2 leaf binding", &mut listing2_binds_fma);
    run("3 exact equivalence", &mut || exact_equivalence(&mut runs));
    run("4 float error", &mut float_error);
    run("5 wmma", &mut wmma);
    run("6 races", &mut || races(&runs));
    run("7 register ownership", &mut ownership);
    run("8 swizzle", &mut swizzle);
    run("9 index expressions", &mut index_expressions);
    run("10 buffer planning", &mut buffers);
    let failed = results.iter().filter(|(_, r, _)| r.is_err()).count();
    println!("acceptance: {}/{} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
