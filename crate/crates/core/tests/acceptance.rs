//! End-to-end acceptance checks. One test drives every criterion in order so
//! the timed benchmark runs without competing test threads; each criterion
//! prints a single PASS/FAIL line.

use std::io::Write;
use std::time::Instant;

use otvp::adapt::{adapt_offline, precompute_source_reps, AdaptationConfig, Method, RepresentationBank};
use otvp::data::{generate, load_dataset, save_dataset, split, CorruptionKind, DomainSpec, SyntheticDataset};
use otvp::harness::{append_records, read_records, build_report, run_method, Experiment, RunOutput};
use otvp::model::{
    checkpoint_bytes, checkpoint_hash, encode, forward_batch, load_checkpoint, load_prompts, patchify_batch,
    save_checkpoint, save_prompts, train_source, TrainConfig, ViTConfig,
};
use otvp::numerics::Tape;
use otvp::ot::{
    cost_base, cost_labeled, exact_ot_uniform, frozen_plan_value, ot_grad_targets, sinkhorn, uniform_weights,
    SinkhornConfig,
};
use otvp::{rng, PromptSet, Tensor, ViTParams};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

// Pinned tolerances.
const GRAD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const SINKHORN_REL_TOL: f64 = 0.05;
const SINKHORN_ABS_TOL: f64 = 1e-6;
const MARGINAL_TOL: f64 = 1e-6;
const CROSS_MASS_TOL: f64 = 1e-6;
const PER_CLASS_TOL: f64 = 1e-6;
const SOURCE_VAL_MIN: f64 = 0.95;
const GAIN_MIN_POINTS: f64 = 3.0;
const BENCH_BUDGET_MIN: f64 = 15.0;
const ENTROPY_CELLS_MIN: usize = 10;
const LAMBDA_PLATEAU_POINTS: f64 = 2.0;
const ONLINE_GAP_POINTS: f64 = 3.0;
const NULL_SHIFT_POINTS: f64 = 1.0;

const SEEDS: [u64; 3] = [0, 1, 2];
const IMAGE_SIZE: usize = 16;
const CLASSES: usize = 7;
const SOURCE_N: usize = 5600;
const TARGET_N: usize = 448;
const BANK_N: usize = 700;
const EPOCHS: usize = 20;
const SEVERITY: u8 = 5;

fn report(id: u32, name: &str, pass: bool, detail: &str) -> bool {
    let tag = if pass { "PASS" } else { "FAIL" };
    // Written around the test harness's capture so the lines always show.
    let _ = writeln!(std::io::stderr(), "[{tag}] criterion {id}: {name} -- {detail}");
    pass
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

fn gauss_tensor(shape: Vec<usize>, scale: f64, r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| { let x: f64 = StandardNormal.sample(r); scale * x }).collect::<Vec<f64>>();
    Tensor::new(shape, data).unwrap()
}

fn central_difference(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + FD_STEP;
            let up = f(&probe);
            probe[k] = x[k] - FD_STEP;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn criterion_1() -> bool {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut r = rng::seeded(rng::derive(seed, "grad-check"));
        let cfg = ViTConfig { image_size: 8, embed_dim: 16, num_layers: 2, num_heads: 2, num_classes: 4, seed, ..Default::default() };
        let params = ViTParams::init(&cfg).unwrap();
        let n = 5;
        let images = Tensor::new(vec![n, 3, 8, 8], (0..n * 192).map(|_| r.random::<f64>()).collect()).unwrap();
        let patches = patchify_batch(&images, &cfg).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
        let gamma = gauss_tensor(vec![3, 16], 0.5, &mut r);

        // Cross-entropy.
        let ce = |tokens: &[f64], want_grad: bool| {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, |_| false).unwrap();
            let p = tape.param(Tensor::new(vec![3, 16], tokens.to_vec()).unwrap()).unwrap();
            let enc = encode(&mut tape, &params, &vars, &patches, Some(p)).unwrap();
            let loss = tape.cross_entropy(enc.logits, &labels).unwrap();
            let g = want_grad.then(|| tape.backward(loss).unwrap().slice(p).unwrap().to_vec());
            (tape.value(loss).item(), g)
        };
        let analytic = ce(gamma.data(), true).1.unwrap();
        let numeric = central_difference(gamma.data(), |x| ce(x, false).0);
        worst = worst.max(rel_err(&analytic, &numeric));

        // Transport value with the coupling frozen.
        let zs = gauss_tensor(vec![6, 16], 1.0, &mut r);
        let ys: Vec<usize> = (0..6).map(|i| i % 4).collect();
        let prompts = PromptSet::new(gamma.clone()).unwrap();
        let (logits, zt) = forward_batch(&params, Some(&prompts), &images).unwrap();
        let yt: Vec<usize> = (0..n).map(|i| otvp::numerics::argmax(logits.row(i))).collect();
        let cost = cost_labeled(&zs, &ys, &zt, &yt, 1.0).unwrap();
        let plan = sinkhorn(&uniform_weights(6), &uniform_weights(n), &cost, &SinkhornConfig::default()).unwrap();
        let g_z = ot_grad_targets(&plan, &zs, &zt).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, |_| false).unwrap();
        let p = tape.param(gamma.clone()).unwrap();
        let enc = encode(&mut tape, &params, &vars, &patches, Some(p)).unwrap();
        let analytic = tape.backward_with_seed(enc.z, &g_z).unwrap().slice(p).unwrap().to_vec();
        let objective = |x: &[f64]| {
            let pr = PromptSet::new(Tensor::new(vec![3, 16], x.to_vec()).unwrap()).unwrap();
            let (_, z) = forward_batch(&params, Some(&pr), &images).unwrap();
            frozen_plan_value(&plan, &zs, &z, Some((&ys, &yt, 1.0)))
        };
        let numeric = central_difference(gamma.data(), objective);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        1,
        "prompt gradients vs central differences",
        worst <= GRAD_REL_TOL && secs < 60.0,
        &format!("worst relative error {worst:.2e} (tol {GRAD_REL_TOL:.0e}) over 10 seeds, {secs:.1}s"),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force(cost: &otvp::CostMatrix) -> f64 {
    let n = cost.rows();
    permutations(n)
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum::<f64>() / n as f64)
        .fold(f64::INFINITY, f64::min)
}

fn criterion_2() -> bool {
    let t = Instant::now();
    let cfg = SinkhornConfig { epsilon_rel: 0.01, ..Default::default() };
    let mut r = rng::seeded(rng::derive(0, "sinkhorn-oracle"));
    let (mut worst_gap, mut worst_viol, mut oracle_gap) = (0.0f64, 0.0f64, 0.0f64);
    let mut ok = true;
    for _ in 0..50 {
        let n = r.random_range(2..=8);
        let d = r.random_range(1..=16);
        let zs = gauss_tensor(vec![n, d], 1.0, &mut r);
        let zt = gauss_tensor(vec![n, d], 1.0, &mut r);
        let cost = cost_base(&zs, &zt).unwrap();
        let exact = exact_ot_uniform(&cost).unwrap().value;
        if n <= 6 {
            oracle_gap = oracle_gap.max((brute_force(&cost) - exact).abs());
        }
        let plan = sinkhorn(&uniform_weights(n), &uniform_weights(n), &cost, &cfg).unwrap();
        let gap = (plan.value - exact).abs();
        ok &= plan.converged && gap <= SINKHORN_REL_TOL * exact + SINKHORN_ABS_TOL && plan.marginal_violation < MARGINAL_TOL;
        worst_gap = worst_gap.max(gap / exact.max(1e-12));
        worst_viol = worst_viol.max(plan.marginal_violation);
    }
    ok &= oracle_gap < 1e-12;
    let secs = t.elapsed().as_secs_f64();
    report(
        2,
        "Sinkhorn vs exact assignment",
        ok && secs < 60.0,
        &format!(
            "50 instances: worst relative gap {worst_gap:.4} (tol {SINKHORN_REL_TOL}), worst marginal violation {worst_viol:.1e}, \
             assignment vs enumeration {oracle_gap:.1e}, {secs:.1}s"
        ),
    )
}

fn class_subset(z: &Tensor, labels: &[usize], c: usize) -> Tensor {
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
    z.gather_rows(&idx)
}

fn criterion_3() -> bool {
    let lambda = 1e4;
    let mut r = rng::seeded(rng::derive(0, "lambda-limit"));
    let (mut worst_mass, mut worst_split) = (0.0f64, 0.0f64);
    let mut converged = true;
    for _ in 0..20 {
        let classes = r.random_range(2..=4);
        let per = r.random_range(2..=6);
        let d = r.random_range(2..=8);
        let n = classes * per;
        let ys: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let mut yt = ys.clone();
        for i in (1..n).rev() {
            yt.swap(i, r.random_range(0..=i));
        }
        let zs = gauss_tensor(vec![n, d], 1.0, &mut r);
        let zt = gauss_tensor(vec![n, d], 1.0, &mut r);
        let cost = cost_labeled(&zs, &ys, &zt, &yt, lambda).unwrap();

        let plan = sinkhorn(&uniform_weights(n), &uniform_weights(n), &cost, &SinkhornConfig::default()).unwrap();
        converged &= plan.converged;
        let cross: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| ys[i] != yt[j]).map(|(i, j)| plan.get(i, j)).sum();
        worst_mass = worst_mass.max(cross);

        let whole = exact_ot_uniform(&cost).unwrap().value;
        let per_class: f64 = (0..classes)
            .map(|c| {
                let sub = cost_base(&class_subset(&zs, &ys, c), &class_subset(&zt, &yt, c)).unwrap();
                exact_ot_uniform(&sub).unwrap().value * per as f64 / n as f64
            })
            .sum();
        worst_split = worst_split.max((whole - per_class).abs());
    }
    report(
        3,
        "label penalty separates classes",
        converged && worst_mass < CROSS_MASS_TOL && worst_split <= PER_CLASS_TOL,
        &format!(
            "20 balanced instances, lambda=1e4: max mismatched mass {worst_mass:.1e} (tol {CROSS_MASS_TOL:.0e}), \
             |OT - sum of per-class OT| {worst_split:.1e} (tol {PER_CLASS_TOL:.0e})"
        ),
    )
}

struct Bench {
    params: ViTParams,
    bank: RepresentationBank,
    val_accuracy: f64,
    held: SyntheticDataset,
    targets: Vec<SyntheticDataset>,
    setup_secs: f64,
}

fn build_bench() -> Bench {
    let t = Instant::now();
    let cfg = ViTConfig { image_size: IMAGE_SIZE, embed_dim: 32, num_layers: 2, num_heads: 4, num_classes: CLASSES, ..Default::default() };
    let source = generate(&DomainSpec::clean("clean", 1), SOURCE_N, CLASSES, IMAGE_SIZE).unwrap();
    let (train, val) = split(&source, 0.8, 0).unwrap();
    let init = ViTParams::init(&cfg).unwrap();
    let tc = TrainConfig { epochs: EPOCHS, ..Default::default() };
    let (params, rep) = train_source(&init, (&train.images, &train.labels), (&val.images, &val.labels), &tc).unwrap();
    let stride = train.len() / BANK_N;
    let idx: Vec<usize> = (0..BANK_N).map(|k| k * stride).collect();
    let bank_set = train.subset(&idx, "bank");
    let bank = precompute_source_reps(&params, &bank_set.images, &bank_set.labels, "clean").unwrap();
    let held = generate(&DomainSpec::clean("clean-held", 99), TARGET_N, CLASSES, IMAGE_SIZE).unwrap();
    let targets = CorruptionKind::ALL
        .into_iter()
        .enumerate()
        .map(|(k, kind)| generate(&DomainSpec::corrupted(kind, SEVERITY, 100 + k as u64), TARGET_N, CLASSES, IMAGE_SIZE).unwrap())
        .collect();
    Bench { params, bank, val_accuracy: rep.best_val_accuracy, held, targets, setup_secs: t.elapsed().as_secs_f64() }
}

impl Bench {
    fn run(&self, target: &SyntheticDataset, cfg: &AdaptationConfig) -> RunOutput {
        let exp = Experiment { params: &self.params, bank: Some(&self.bank), target, source: "clean" };
        run_method(&exp, cfg, &format!("{}/{}/{}", target.name, cfg.method, cfg.seed), None).unwrap()
    }
}

fn otvp(lambda: f64, seed: u64) -> AdaptationConfig {
    AdaptationConfig { method: Method::Otvp, lambda, seed, ..Default::default() }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Results of the benchmark grid reused by several criteria.
struct Grid {
    erm: Vec<(f64, f64)>,
    // [domain][seed] -> (accuracy, mean entropy)
    otvp: Vec<Vec<(f64, f64)>>,
    otvp_b: Vec<Vec<f64>>,
    // [domain] -> seeds whose OT value fell from the first to the last step
    ot_fell: Vec<usize>,
    secs: f64,
}

fn run_grid(b: &Bench) -> Grid {
    let t = Instant::now();
    let none = AdaptationConfig { method: Method::None, ..Default::default() };
    let mut g = Grid { erm: vec![], otvp: vec![], otvp_b: vec![], ot_fell: vec![], secs: 0.0 };
    for target in &b.targets {
        let erm = b.run(target, &none);
        g.erm.push((erm.accuracy, erm.mean_entropy));
        let runs: Vec<RunOutput> = SEEDS.iter().map(|&s| b.run(target, &otvp(1e4, s))).collect();
        g.otvp.push(runs.iter().map(|o| (o.accuracy, o.mean_entropy)).collect());
        g.ot_fell.push(
            runs.iter()
                .filter(|o| {
                    let ot: Vec<f64> = o.records.iter().filter_map(|r| r.ot_value).collect();
                    ot.last() < ot.first()
                })
                .count(),
        );
        let ob = |s| AdaptationConfig { method: Method::OtvpB, seed: s, ..Default::default() };
        g.otvp_b.push(SEEDS.iter().map(|&s| b.run(target, &ob(s)).accuracy).collect());
    }
    g.secs = t.elapsed().as_secs_f64();
    g
}

fn criterion_4(b: &Bench, g: &Grid) -> bool {
    let erm = mean(&g.erm.iter().map(|e| e.0).collect::<Vec<_>>()) * 100.0;
    let per_domain: Vec<f64> = g.otvp.iter().map(|d| mean(&d.iter().map(|c| c.0).collect::<Vec<_>>()) * 100.0).collect();
    let per_domain_b: Vec<f64> = g.otvp_b.iter().map(|d| mean(d) * 100.0).collect();
    let (ot, otb) = (mean(&per_domain), mean(&per_domain_b));
    let minutes = (b.setup_secs + g.secs) / 60.0;
    let mut detail = String::new();
    for (k, t) in b.targets.iter().enumerate() {
        detail += &format!("{} erm {:.1} otvp {:.1} otvp-b {:.1}; ", t.name, g.erm[k].0 * 100.0, per_domain[k], per_domain_b[k]);
    }
    let pass = b.val_accuracy >= SOURCE_VAL_MIN && ot - erm >= GAIN_MIN_POINTS && ot >= otb && minutes < BENCH_BUDGET_MIN;
    report(
        4,
        "desk-scale adaptation benchmark",
        pass,
        &format!(
            "source val {:.1}%; {detail}mean erm {erm:.2} otvp {ot:.2} (gain {:+.2}, need >= {GAIN_MIN_POINTS}) otvp-b {otb:.2} \
             (need otvp >= otvp-b); {minutes:.1} min (budget {BENCH_BUDGET_MIN})",
            b.val_accuracy * 100.0,
            ot - erm
        ),
    )
}

/// Not a numbered criterion: the transport value must actually go down.
fn ot_decreases(b: &Bench, g: &Grid) -> bool {
    let pass = g.ot_fell.iter().all(|&k| k >= 2);
    let per: Vec<String> = b.targets.iter().zip(&g.ot_fell).map(|(t, k)| format!("{} {k}/3", t.name)).collect();
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] invariant: OT value falls over adaptation on >= 2 of 3 seeds -- {}", per.join(", "));
    pass
}

fn criterion_5(g: &Grid) -> bool {
    let mut lower = 0;
    let mut cells = 0;
    for (d, erm) in g.otvp.iter().zip(&g.erm) {
        for &(_, h) in d {
            cells += 1;
            lower += usize::from(h < erm.1);
        }
    }
    report(
        5,
        "adaptation lowers prediction entropy",
        lower >= ENTROPY_CELLS_MIN,
        &format!("entropy lower in {lower} of {cells} (domain, seed) cells (need >= {ENTROPY_CELLS_MIN})"),
    )
}

fn criterion_6(b: &Bench, g: &Grid) -> bool {
    let acc_at = |lambda: f64| {
        let accs: Vec<f64> = b.targets.iter().flat_map(|t| SEEDS.map(|s| b.run(t, &otvp(lambda, s)).accuracy)).collect();
        mean(&accs) * 100.0
    };
    let at_1e4 = mean(&g.otvp.iter().flatten().map(|c| c.0).collect::<Vec<_>>()) * 100.0;
    let at_0 = acc_at(0.0);
    let at_1e5 = acc_at(1e5);
    report(
        6,
        "accuracy over the label penalty",
        at_1e4 >= at_0 && (at_1e4 - at_1e5).abs() <= LAMBDA_PLATEAU_POINTS,
        &format!(
            "mean over 4 domains x 3 seeds: lambda=0 {at_0:.2}, 1e4 {at_1e4:.2}, 1e5 {at_1e5:.2} \
             (need 1e4 >= 0 and |1e4 - 1e5| <= {LAMBDA_PLATEAU_POINTS})"
        ),
    )
}

fn criterion_7(b: &Bench, g: &Grid) -> bool {
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for (k, t) in b.targets.iter().enumerate() {
        let online: Vec<f64> = SEEDS.iter().map(|&s| b.run(t, &AdaptationConfig { online: true, ..otvp(1e4, s) }).accuracy).collect();
        let on = mean(&online) * 100.0;
        let off = mean(&g.otvp[k].iter().map(|c| c.0).collect::<Vec<_>>()) * 100.0;
        worst = worst.max((on - off).abs());
        detail += &format!("{} online {on:.1} offline {off:.1}; ", t.name);
    }
    report(
        7,
        "online vs offline adaptation",
        worst <= ONLINE_GAP_POINTS,
        &format!("{detail}worst gap {worst:.2} (tol {ONLINE_GAP_POINTS}), 3 seeds each"),
    )
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

fn criterion_8(b: &Bench) -> bool {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |cond: bool, what: &str| {
        ok &= cond;
        if !cond {
            notes.push(what.to_string());
        }
    };
    let before = checkpoint_hash(&b.params).unwrap();
    let bytes_before = checkpoint_bytes(&b.params).unwrap();
    let target = &b.targets[0];
    let short = |method| AdaptationConfig { method, steps: 5, ..Default::default() };
    let mut gammas = Vec::new();
    for method in [Method::Otvp, Method::OtvpB, Method::EntropyPrompt] {
        let first = b.run(target, &short(method)).prompts.unwrap();
        let again = b.run(target, &short(method)).prompts.unwrap();
        check(bits(first.tokens().data()) == bits(again.tokens().data()), "prompts not bitwise reproducible");
        check(checkpoint_hash(&b.params).unwrap() == before, "checkpoint hash changed");
        gammas.push(first);
    }
    let direct = adapt_offline(&b.params, &b.bank, &target.images, &short(Method::Otvp)).unwrap().prompts;
    check(bits(direct.tokens().data()) == bits(gammas[0].tokens().data()), "library and harness prompts differ");
    check(checkpoint_bytes(&b.params).unwrap() == bytes_before, "checkpoint bytes changed");

    let dir = tempfile::tempdir().unwrap();
    let at = |name: &str| dir.path().join(name);
    save_checkpoint(&at("model.ckpt"), &b.params).unwrap();
    let loaded: ViTParams = load_checkpoint(&at("model.ckpt")).unwrap();
    check(checkpoint_bytes(&loaded).unwrap() == bytes_before, "checkpoint round trip");
    save_checkpoint(&at("model2.ckpt"), &loaded).unwrap();
    check(std::fs::read(at("model.ckpt")).unwrap() == std::fs::read(at("model2.ckpt")).unwrap(), "checkpoint file bytes");

    save_prompts(&at("p.bin"), &gammas[0]).unwrap();
    let p: PromptSet = load_prompts(&at("p.bin")).unwrap();
    check(bits(p.tokens().data()) == bits(gammas[0].tokens().data()), "prompt round trip");

    b.bank.save(&at("bank.bin")).unwrap();
    check(RepresentationBank::load(&at("bank.bin")).unwrap() == b.bank, "bank round trip");

    save_dataset(&at("data"), std::slice::from_ref(target)).unwrap();
    let back = load_dataset(&at("data"), Some(&target.split)).unwrap();
    check(bits(back.images.data()) == bits(target.images.data()) && back.labels == target.labels, "dataset round trip");

    let records = b.run(target, &short(Method::Otvp)).records;
    append_records(&at("m.jsonl"), &records).unwrap();
    check(read_records(&at("m.jsonl")).unwrap() == records, "metrics round trip");
    let rep = build_report(&records);
    let json = serde_json::to_string(&rep).unwrap();
    check(serde_json::from_str::<otvp::harness::Report>(&json).unwrap() == rep, "report round trip");

    let detail = if notes.is_empty() { "hash frozen for otvp/otvp-b/entropy-prompt; prompts bitwise reproducible; \
         checkpoint, prompts, bank, dataset, metrics and report round-trip bitwise"
        .to_string() } else { notes.join("; ") };
    report(8, "freezing, determinism and file formats", ok, &detail)
}

fn criterion_9(b: &Bench) -> bool {
    let erm = b.run(&b.held, &AdaptationConfig { method: Method::None, ..Default::default() }).accuracy * 100.0;
    let accs: Vec<f64> = SEEDS.iter().map(|&s| b.run(&b.held, &otvp(1e4, s)).accuracy * 100.0).collect();
    let delta = mean(&accs) - erm;
    report(
        9,
        "no harm without a shift",
        delta.abs() <= NULL_SHIFT_POINTS,
        &format!("held-out clean: erm {erm:.2}, otvp {accs:.1?} mean {:.2}, delta {delta:+.2} (tol {NULL_SHIFT_POINTS})", mean(&accs)),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results = vec![criterion_1(), criterion_2(), criterion_3()];
    let bench = build_bench();
    let grid = run_grid(&bench);
    results.push(criterion_4(&bench, &grid));
    results.push(criterion_5(&grid));
    results.push(criterion_6(&bench, &grid));
    results.push(criterion_7(&bench, &grid));
    results.push(criterion_8(&bench));
    results.push(criterion_9(&bench));
    let invariant = ot_decreases(&bench, &grid);
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, &ok)| !ok).map(|(k, _)| k + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
    assert!(invariant, "OT value did not decrease");
}
