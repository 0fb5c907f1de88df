//! Acceptance criteria, one check per criterion. Each prints a PASS/FAIL
//! line with its runtime; the test fails if any criterion does.

mod common;

use std::f64::consts::PI;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{brute_angle, point, random_subspace, random_superspace, rng};
use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stratcheck::expr::{Expression, Node};
use stratcheck::flatness::{flatten, is_eps_flat, FLAT_SAMPLES, RECHECK_FACTOR};
use stratcheck::grassmann::angle;
use stratcheck::kuo::KuoContext;
use stratcheck::refine::refine_until_regular;
use stratcheck::sequence::{minimize_pa_sequence, minimize_pb_sequence, DEFAULT_BUDGET};
use stratcheck::whitney::{
    check_a, essential_flags, local_components, scan_pair, sing_a_kaloshin, CheckOptions, Condition, Status,
};
use stratcheck::{fixtures, PairXY, Stratum};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_secs: f64) -> bool {
    elapsed.as_secs_f64() < limit_secs
}

// 1. angle axioms ----------------------------------------------------------

fn angle_axioms() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let (mut sym, mut contain, mut tri) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let n = r.random_range(2..=8);
        // equal dimensions: symmetry
        let d = r.random_range(1..=n);
        let (p, _) = random_subspace(&mut r, n, d);
        let (q, _) = random_subspace(&mut r, n, d);
        sym = sym.max((angle(&p, &q).unwrap() - angle(&q, &p).unwrap()).abs());
        // containment
        let di = r.random_range(1..=n);
        let (inner, basis) = random_subspace(&mut r, n, di);
        let outer_dim = r.random_range(basis.len()..=n);
        let (outer, _) = random_superspace(&mut r, n, &basis, outer_dim);
        contain = contain.max(angle(&inner, &outer).unwrap());
        // triangle inequality for dim T <= dim P <= dim Q
        let dt = r.random_range(1..=n);
        let dp = r.random_range(dt..=n);
        let dq = r.random_range(dp..=n);
        let (t, _) = random_subspace(&mut r, n, dt);
        let (pp, _) = random_subspace(&mut r, n, dp);
        let (qq, _) = random_subspace(&mut r, n, dq);
        let slack = angle(&t, &qq).unwrap() - angle(&t, &pp).unwrap() - angle(&pp, &qq).unwrap();
        tri = tri.max(slack);
    }
    let elapsed = start.elapsed();
    outcome(
        sym <= 1e-9 && contain <= 1e-12 && tri <= 1e-9 && within(elapsed, 5.0),
        format!("symmetry gap {sym:.2e}, containment {contain:.2e}, triangle slack {tri:.2e}"),
    )
}

// 2. spectral angle against brute force ------------------------------------

fn angle_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(2..=6);
        let dp = r.random_range(1..=2.min(n));
        let dq = r.random_range(1..=n);
        let (p, pb) = random_subspace(&mut r, n, dp);
        let (q, qb) = random_subspace(&mut r, n, dq);
        let brute = brute_angle(&pb, &qb, 100_000, &mut r);
        worst = worst.max((angle(&p, &q).unwrap() - brute).abs());
    }
    let elapsed = start.elapsed();
    outcome(worst <= 1e-2 && within(elapsed, 30.0), format!("max |spectral - brute| {worst:.2e}"))
}

// 3. Kuo unit values --------------------------------------------------------

fn kuo_values() -> Outcome {
    let origin = point(&[0.0, 0.0, 0.0]);
    let para = fixtures::paraboloid();
    let ctx = KuoContext::new(&para, &origin).unwrap();
    let x = para.x.locate(&point(&[1.0, 0.0, 1.0])).unwrap();
    let pbp = ctx.p_b_prime(&x).unwrap();

    let cone = fixtures::cone();
    let ctx = KuoContext::new(&cone, &origin).unwrap();
    let cone_pb = cone.x.sample(100, 3).points.iter().map(|p| ctx.p_b(p).unwrap().abs()).fold(0.0, f64::max);

    let mut violations = 0;
    let mut checked = 0;
    for pair in fixtures::all() {
        for y in pair.y.sample(5, 4).points {
            let ctx = KuoContext::new(&pair, &y.x).unwrap();
            let k = ctx.k() as f64;
            for p in pair.x.sample(60, 5).points {
                let v = ctx.values(&p).unwrap();
                checked += 1;
                if !(v.pa >= 0.0 && v.pa <= k + 1e-12 && v.pb_prime >= 0.0 && v.pb_prime <= 1.0 + 1e-12) {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        (pbp - 0.1).abs() <= 1e-9 && cone_pb <= 1e-9 && violations == 0,
        format!("paraboloid p_b' {pbp:.12}, cone max p_b {cone_pb:.1e}, range violations {violations}/{checked}"),
    )
}

// 4. constructive sequences -------------------------------------------------

/// Points where condition (b) is known to fail on the fixtures.
fn b_fault_points(pair: &PairXY) -> Vec<DVector<f64>> {
    match pair.name.as_str() {
        "X,Y" => vec![point(&fixtures::HAT_APEX)],
        "umbrella" => vec![point(&[0.0, 0.0, 0.0])],
        _ => Vec::new(),
    }
}

fn y_samples(y: &Stratum, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let pts: Vec<DVector<f64>> = y.sample(n, seed).points.into_iter().map(|p| p.x).collect();
    if y.dim() == 0 {
        vec![pts[0].clone(); n]
    } else {
        pts
    }
}

fn constructive_sequences() -> Outcome {
    let start = Instant::now();
    let mut worst_pa = 0.0f64;
    let mut worst_pb = 0.0f64;
    let mut failures = Vec::new();
    let mut runs = 0;
    for pair in fixtures::all() {
        let faults = b_fault_points(&pair);
        for (i, y) in y_samples(&pair.y, 100, 11).iter().enumerate() {
            let seed = 1000 + i as u64;
            runs += 1;
            let pa = minimize_pa_sequence(&pair, y, DEFAULT_BUDGET, seed).map(|s| s.tail_pa()).unwrap_or(f64::NAN);
            if !(pa < 0.02) {
                failures.push(format!("{} p_a {pa:.3} at {:?}", pair.name, y.as_slice()));
            }
            worst_pa = worst_pa.max(pa);
            if faults.iter().any(|f| (f - y).norm() < 0.01) {
                continue;
            }
            let pb = minimize_pb_sequence(&pair, y, DEFAULT_BUDGET, seed).map(|s| s.tail_pb()).unwrap_or(f64::NAN);
            if !(pb < 0.02) {
                failures.push(format!("{} p_b {pb:.3} at {:?}", pair.name, y.as_slice()));
            }
            worst_pb = worst_pb.max(pb);
        }
    }
    let elapsed = start.elapsed();
    let mut detail = format!("{runs} points, worst tail p_a {worst_pa:.2e}, worst tail p_b {worst_pb:.2e}");
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; {} failures, first: {f}", failures.len()));
    }
    outcome(failures.is_empty() && within(elapsed, 120.0), detail)
}

// 5. the counterexample -----------------------------------------------------

fn counterexample() -> Outcome {
    let start = Instant::now();
    let hat = fixtures::santa_hat();
    let apex = point(&fixtures::HAT_APEX);
    let opts = CheckOptions::default();
    let comps = local_components(&hat, &apex, 42).unwrap();
    let flags = essential_flags(&hat, &comps, 42).unwrap();
    let essential = flags.iter().filter(|e| **e).count();
    let fault = check_a(&hat, &apex, &opts).unwrap();
    let sing = sing_a_kaloshin(&hat, &apex, &opts).unwrap();
    let mut worst = 0.0f64;
    let mut all_regular = true;
    for k in 0..32 {
        let t = 2.0 * PI * (k as f64 + 0.5) / 32.0;
        let v = check_a(&hat, &point(&[t.cos(), t.sin(), 0.0]), &opts).unwrap();
        all_regular &= v.status == Status::Regular;
        worst = worst.max(v.score);
    }
    let elapsed = start.elapsed();
    let pass = comps.n_y == 2
        && essential == 1
        && fault.status == Status::Fault
        && (0.4..=0.6).contains(&fault.score)
        && sing.verdict.status == Status::Regular
        && all_regular
        && worst < 0.05
        && within(elapsed, 120.0);
    outcome(
        pass,
        format!(
            "N_y {}, essential {essential}, check_a {} score {:.4}, sing_a {}, off-apex worst score {worst:.2e}",
            comps.n_y,
            fault.status.as_str(),
            fault.score,
            sing.verdict.status.as_str()
        ),
    )
}

// 6. fault-set thinness -----------------------------------------------------

fn fault_thinness() -> Outcome {
    let hat = fixtures::santa_hat();
    let opts = CheckOptions::default();
    let coarse = scan_pair(&hat, Condition::A, 64, &opts);
    let fine = scan_pair(&hat, Condition::A, 256, &opts);
    let ratio = coarse.fault_fraction / fine.fault_fraction;
    outcome(
        coarse.isolated_faults.len() == 1 && fine.isolated_faults.len() == 1 && ratio >= 3.0,
        format!(
            "clusters {} / {}, fault fraction {:.4} -> {:.4} (ratio {ratio:.2})",
            coarse.isolated_faults.len(),
            fine.isolated_faults.len(),
            coarse.fault_fraction,
            fine.fault_fraction
        ),
    )
}

// 7. flat subdivision -------------------------------------------------------

fn flat_subdivision() -> Outcome {
    let circle = fixtures::unit_circle();
    let pieces = flatten(&circle, 0.5, 64, 42).unwrap();
    let recheck = pieces
        .iter()
        .enumerate()
        .all(|(i, p)| is_eps_flat(p, 0.5, FLAT_SAMPLES * RECHECK_FACTOR, 900 + i as u64).unwrap().flat);
    let affine: Vec<Stratum> = vec![
        fixtures::half_plane_pair().x.as_ref().clone(),
        fixtures::half_plane_pair().y.as_ref().clone(),
        fixtures::hat_brim(),
    ];
    let affine_ok = affine.iter().all(|s| flatten(s, 0.5, 64, 42).unwrap().len() == 1);
    outcome(
        (12..=64).contains(&pieces.len()) && recheck && affine_ok,
        format!("circle pieces {}, dense recheck {recheck}, affine single piece {affine_ok}", pieces.len()),
    )
}

// 8. refinement loop --------------------------------------------------------

fn refinement() -> Outcome {
    let start = Instant::now();
    let r = refine_until_regular(&fixtures::santa_hat(), 0.1, 3, 42).unwrap();
    let apex = point(&fixtures::HAT_APEX);
    let has_apex = r.strata.iter().any(|s| s.dim() == 0 && s.contains(&apex));
    let opts = CheckOptions { seed: 4242, ..CheckOptions::default() };
    let mut rescan_clean = true;
    for (x, y) in &r.scanned {
        let pair =
            PairXY::new(format!("{x},{y}"), r.stratum(x).unwrap().clone(), r.stratum(y).unwrap().clone()).unwrap();
        rescan_clean &= scan_pair(&pair, Condition::A, 64, &opts).is_clean();
    }
    let elapsed = start.elapsed();
    outcome(
        r.iterations <= 3 && r.complete && has_apex && r.offending().is_empty() && rescan_clean && within(elapsed, 300.0),
        format!(
            "iterations {}, strata {}, apex stratum {has_apex}, final scans clean {}, rescan clean {rescan_clean}",
            r.iterations,
            r.strata.len(),
            r.offending().is_empty()
        ),
    )
}

// 9. determinism ------------------------------------------------------------

fn cli_bytes(args: &[&str], threads: usize) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_stratcheck"))
        .args(args)
        .args(["--threads", &threads.to_string()])
        .env_remove("STRATCHECK_THREADS")
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), out.stdout)
}

fn determinism() -> Outcome {
    let commands: [&[&str]; 9] = [
        &["check-a", "--set", "santa_hat", "--point", "1,0,0"],
        &["check-b", "--set", "whitney_umbrella", "--point", "0,0,0.5"],
        &["scan", "--set", "santa_hat"],
        &["components", "--set", "santa_hat", "--point", "1,0,0"],
        &["flatten", "--set", "santa_hat", "--stratum", "circle", "--eps", "0.5"],
        &["refine", "--set", "santa_hat"],
        &["export", "--set", "santa_hat", "--format", "csv"],
        &["export", "--set", "santa_hat", "--format", "json"],
        &["export", "--set", "santa_hat", "--format", "ply"],
    ];
    let mut differing = Vec::new();
    for args in commands {
        let a = cli_bytes(args, 1);
        let b = cli_bytes(args, 1);
        let c = cli_bytes(args, 3);
        if a != b || a != c || a.1.is_empty() {
            differing.push(args[0].to_string());
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} commands byte-identical across reruns and 1 vs 3 threads", commands.len())
        } else {
            format!("outputs differ for {}", differing.join(", "))
        },
    )
}

// 10. gradients -------------------------------------------------------------

/// Random smooth expression in three variables: divisions and roots only
/// ever see arguments bounded away from zero.
fn smooth_tree(r: &mut ChaCha8Rng, depth: u32) -> Node {
    let b = |n: Node| Box::new(n);
    if depth == 0 || r.random_range(0..4) == 0 {
        return if r.random_bool(0.6) {
            Node::Var(r.random_range(0..3))
        } else {
            Node::Const((r.random_range(-2.0..2.0f64) * 4.0).round() / 4.0)
        };
    }
    let a = smooth_tree(r, depth - 1);
    match r.random_range(0..7) {
        0 => Node::Add(b(a), b(smooth_tree(r, depth - 1))),
        1 => Node::Sub(b(a), b(smooth_tree(r, depth - 1))),
        2 => Node::Mul(b(a), b(smooth_tree(r, depth - 1))),
        3 => Node::Neg(b(a)),
        4 => Node::Pow(b(a), r.random_range(0..=3)),
        5 => {
            let d = smooth_tree(r, depth - 1);
            Node::Div(b(a), b(Node::Add(b(Node::Const(1.0)), b(Node::Pow(b(d), 2)))))
        }
        _ => Node::Sqrt(b(Node::Add(b(Node::Const(1.0)), b(Node::Pow(b(a), 2))))),
    }
}

/// Richardson-extrapolated central difference.
fn derivative(e: &Expression, p: &[f64], i: usize) -> f64 {
    let d = |h: f64| {
        let mut hi = p.to_vec();
        let mut lo = p.to_vec();
        hi[i] += h;
        lo[i] -= h;
        (e.eval(&hi).unwrap() - e.eval(&lo).unwrap()) / (2.0 * h)
    };
    let h = 1e-3;
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

fn gradients() -> Outcome {
    let mut r = rng(10);
    let vars: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let e = Expression::from_node(smooth_tree(&mut r, 4), vars.clone()).unwrap();
        let p: Vec<f64> = (0..3).map(|_| r.random_range(-1.5..1.5)).collect();
        let g = e.gradient(&p).unwrap();
        for (i, gi) in g.iter().enumerate() {
            let fd = derivative(&e, &p, i);
            worst = worst.max((gi - fd).abs() / gi.abs().max(1.0));
        }
    }
    outcome(worst <= 1e-6, format!("max relative gradient error {worst:.2e} over 1000 expression/point pairs"))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("angle axioms", angle_axioms),
        ("angle oracle", angle_oracle),
        ("Kuo values", kuo_values),
        ("constructive sequences", constructive_sequences),
        ("counterexample", counterexample),
        ("fault-set thinness", fault_thinness),
        ("flat subdivision", flat_subdivision),
        ("refinement", refinement),
        ("determinism", determinism),
        ("gradients", gradients),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:2} {verdict} {name} ({:.1}s): {}", i + 1, start.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
