//! Acceptance criteria 1-8. Runs without the libtest harness and prints
//! one PASS/FAIL line per criterion; exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccvc::config::ExperimentConfig;
use ccvc::datagen::{make_batch, prepare_data, PreparedData};
use ccvc::eval::miou;
use ccvc::label::LabelMap;
use ccvc::losses::{
    conflict_partition, consistency_loss_cpl, consistency_loss_cpl_grad, cosine_discrepancy_grad,
    cosine_discrepancy_loss, make_pseudo_labels, supervised_loss, supervised_loss_grad, total_loss,
    ConflictPartition, ConsistencyTerm, LossComponents, LossWeights,
};
use ccvc::model::{BranchId, TwoBranchModel};
use ccvc::tensor::{softmax_channels, Tensor};
use ccvc::trainer::{train_loop, EpochRecord, LoopOptions};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: [usize; 4], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

fn random_labels(r: &mut ChaCha8Rng, shape: [usize; 3], classes: u8, ignore_prob: f64) -> LabelMap {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if r.gen_bool(ignore_prob) {
                255
            } else {
                r.gen_range(0..classes)
            }
        })
        .collect();
    LabelMap::from_vec(shape, data).unwrap()
}

fn one_pixel(p: &[f64]) -> Tensor<f64> {
    Tensor::from_vec([1, p.len(), 1, 1], p.to_vec()).unwrap()
}

// Criterion 1.

fn criterion1() -> Outcome {
    let tol = 1e-6;
    let mut fails = Vec::new();
    let mut case = |name: &str, got: f64, want: f64| {
        if (got - want).abs() > tol {
            fails.push(format!("{name}: {got} != {want}"));
        }
    };
    let f = Tensor::from_vec([1, 3, 2, 2], (1..=12).map(f64::from).collect()).unwrap();
    case(
        "dis identical",
        cosine_discrepancy_loss(&f, &f).unwrap(),
        2.0,
    );
    let neg = f.map(|v| -v);
    case(
        "dis opposite",
        cosine_discrepancy_loss(&f, &neg).unwrap(),
        0.0,
    );
    let a = Tensor::from_vec([1, 2, 1, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
    let b = Tensor::from_vec([1, 2, 1, 2], vec![0.0, 2.0, 5.0, 0.0]).unwrap();
    case(
        "dis orthogonal",
        cosine_discrepancy_loss(&a, &b).unwrap(),
        1.0,
    );

    let lab1 = LabelMap::from_vec([1, 1, 1], vec![1]).unwrap();
    let perfect = one_pixel(&[0.0, 1.0, 0.0]);
    case(
        "sup perfect",
        supervised_loss(&perfect, &perfect, &lab1).unwrap().value,
        0.0,
    );
    let uniform = one_pixel(&[1.0 / 3.0; 3]);
    case(
        "sup uniform",
        supervised_loss(&uniform, &uniform, &lab1).unwrap().value,
        3f64.ln(),
    );
    let (pa, pb) = (one_pixel(&[0.2, 0.5, 0.3]), one_pixel(&[0.6, 0.1, 0.3]));
    let s = supervised_loss(&pa, &pb, &lab1).unwrap();
    case("sup average", s.value, 0.5 * (-(0.5f64.ln()) - 0.1f64.ln()));

    let (ids, conf) = make_pseudo_labels(&one_pixel(&[0.7, 0.2, 0.1]));
    case("pseudo id", f64::from(ids.data()[0]), 0.0);
    case("pseudo conf", conf[0], 0.7);
    let (ids, conf) = make_pseudo_labels(&uniform);
    case("pseudo tie id", f64::from(ids.data()[0]), 0.0);
    case("pseudo tie conf", conf[0], 1.0 / 3.0);

    let mut r = rng(1);
    for t in 0..10 {
        let p1 = softmax_channels(&random_tensor(&mut r, [2, 3, 4, 4], 3.0));
        let p2 = softmax_channels(&random_tensor(&mut r, [2, 3, 4, 4], 3.0));
        let part = conflict_partition(&p1, &p2, 0.6).unwrap();
        let cpl1 = consistency_loss_cpl(&p1, &p2, &part, 1.0).unwrap();
        let plain = conflict_partition(&p1, &p2, 1.0).unwrap();
        let eq4 = consistency_loss_cpl(&p1, &p2, &plain, 1.0).unwrap();
        case(&format!("omega=1 identity {t}"), cpl1.value, eq4.value);
        let mut all_cc = part.clone();
        all_cc.cc = [vec![1; part.pixels()], vec![1; part.pixels()]];
        all_cc.e = [vec![0; part.pixels()], vec![0; part.pixels()]];
        let doubled = consistency_loss_cpl(&p1, &p2, &all_cc, 2.0).unwrap();
        case(
            &format!("all cc omega=2 {t}"),
            doubled.per_branch[0],
            2.0 * eq4.per_branch[0],
        );
    }
    let hot = Tensor::from_vec([1, 3, 1, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let part = conflict_partition(&hot, &hot, 0.9).unwrap();
    case(
        "one-hot agreement",
        consistency_loss_cpl(&hot, &hot, &part, 2.0).unwrap().value,
        0.0,
    );

    let w = LossWeights::default();
    let ones = LossComponents {
        sup: 1.0,
        con: 1.0,
        dis_l: 1.0,
        dis_u: 1.0,
        ..Default::default()
    };
    case("eq5 arithmetic", total_loss(&ones, &w).unwrap().total, 8.0);
    case(
        "eq5 zero",
        total_loss(&LossComponents::default(), &w).unwrap().total,
        0.0,
    );
    let ccr = LossWeights { lambda3: 0.0, ..w };
    let c = LossComponents {
        sup: 0.7,
        con: 0.4,
        dis_l: 1.3,
        dis_u: 0.9,
        ..Default::default()
    };
    case(
        "lambda3=0 reduction",
        total_loss(&c, &ccr).unwrap().total,
        5.0 * 0.7 + 0.4,
    );

    check(
        fails.is_empty(),
        if fails.is_empty() {
            "all identities within 1e-6".into()
        } else {
            fails.join("; ")
        },
    )
}

// Criterion 2.

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over all
/// input coordinates.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn finite_difference(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

fn criterion2() -> Outcome {
    let trials = 20;
    let shape = [1, 3, 4, 4];
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    let mut r = rng(2);
    for _ in 0..trials {
        let f1 = random_tensor(&mut r, shape, 1.0);
        let f2 = random_tensor(&mut r, shape, 1.0);
        let (_, g1, g2) = cosine_discrepancy_grad(&f1, &f2).unwrap();
        note(
            "dis/f1",
            relative_error(
                g1.data(),
                &finite_difference(&f1, &|x| cosine_discrepancy_loss(x, &f2).unwrap()),
            ),
        );
        note(
            "dis/f2",
            relative_error(
                g2.data(),
                &finite_difference(&f2, &|x| cosine_discrepancy_loss(&f1, x).unwrap()),
            ),
        );

        let z1 = random_tensor(&mut r, shape, 2.0);
        let z2 = random_tensor(&mut r, shape, 2.0);
        let labels = random_labels(&mut r, [1, 4, 4], 3, 0.2);
        let (_, [s1, s2]) = supervised_loss_grad(&z1, &z2, &labels).unwrap();
        let sup = |a: &Tensor<f64>, b: &Tensor<f64>| {
            supervised_loss(&softmax_channels(a), &softmax_channels(b), &labels)
                .unwrap()
                .value
        };
        note(
            "sup/z1",
            relative_error(s1.data(), &finite_difference(&z1, &|x| sup(x, &z2))),
        );
        note(
            "sup/z2",
            relative_error(s2.data(), &finite_difference(&z2, &|x| sup(&z1, x))),
        );

        // The partition (pseudo-labels and masks) is held fixed.
        let part = conflict_partition(&softmax_channels(&z1), &softmax_channels(&z2), 0.5).unwrap();
        for (name, omega) in [("con", 1.0), ("con+cpl", 2.0)] {
            let (_, [c1, c2]) =
                consistency_loss_cpl_grad(&z1, &z2, &part, omega, None, ConsistencyTerm::Average)
                    .unwrap();
            let con = |a: &Tensor<f64>, b: &Tensor<f64>| {
                consistency_loss_cpl(&softmax_channels(a), &softmax_channels(b), &part, omega)
                    .unwrap()
                    .value
            };
            let e1 = relative_error(c1.data(), &finite_difference(&z1, &|x| con(x, &z2)));
            let e2 = relative_error(c2.data(), &finite_difference(&z2, &|x| con(&z1, x)));
            note(name, e1.max(e2));
        }
    }
    let ok = worst.values().all(|&e| e <= 1e-4);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        ok,
        format!("{trials} trials each, max relative error: {detail}"),
    )
}

// Criterion 3.

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        image_size: 16,
        base_width: 4,
        feature_channels: 8,
        num_classes: 3,
        scenes: 30,
        batch_size: 4,
        ..Default::default()
    }
}

fn criterion3() -> Outcome {
    let cfg = small_config();
    let data = prepare_data(&cfg).unwrap();
    let batch = make_batch(&data.split, cfg.batch_size, 0, &cfg).unwrap();
    let images = batch.unlabelled_images.clone();
    let mut results = Vec::new();
    for term in [0usize, 1] {
        let mut model = TwoBranchModel::<f32>::init(&cfg.arch(), 5).unwrap();
        let (o1, t1) = model
            .forward_branch_taped(BranchId::First, &images, true)
            .unwrap();
        let (o2, t2) = model
            .forward_branch_taped(BranchId::Second, &images, true)
            .unwrap();
        let (z1, z2) = (o1.logits.to_f64(), o2.logits.to_f64());
        let part =
            conflict_partition(&softmax_channels(&z1), &softmax_channels(&z2), cfg.gamma).unwrap();
        let (_, [g1, g2]) = consistency_loss_cpl_grad(
            &z1,
            &z2,
            &part,
            cfg.omega_c,
            None,
            ConsistencyTerm::Branch(term),
        )
        .unwrap();
        model.branches[0].backward(&t1, None, Some(&Tensor::from_f64(&g1)));
        model.branches[1].backward(&t2, None, Some(&Tensor::from_f64(&g2)));
        let (own, other) = (term, 1 - term);
        let mut other_max = 0f32;
        model.branches[other].visit_params(&mut |p| {
            other_max = p.grad.iter().fold(other_max, |m, g| m.max(g.abs()));
        });
        let mut own_nonzero = false;
        model.branches[own].visit_params(&mut |p| own_nonzero |= p.grad.iter().any(|g| *g != 0.0));
        results.push((own, other_max, own_nonzero));
    }
    let ok = results.iter().all(|(_, m, nz)| *m == 0.0 && *nz);
    let detail = results
        .iter()
        .map(|(b, m, nz)| {
            format!(
                "branch{} term: max |grad| on branch{} = {m}, own grads nonzero = {nz}",
                b + 1,
                2 - b
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    check(ok, detail)
}

// Criterion 4.

/// Conflict mask, then per branch: cc masks, e masks, pseudo-labels.
type BrutePartition = (Vec<u8>, [Vec<u8>; 2], [Vec<u8>; 2], [Vec<u8>; 2]);

fn brute_partition(p1: &Tensor<f64>, p2: &Tensor<f64>, gamma: f64) -> BrutePartition {
    let [n, c, h, w] = p1.shape();
    let mut conflict = Vec::new();
    let mut cc = [Vec::new(), Vec::new()];
    let mut e = [Vec::new(), Vec::new()];
    let mut pseudo = [Vec::new(), Vec::new()];
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut best = [(0usize, f64::NEG_INFINITY); 2];
                for (b, p) in [p1, p2].iter().enumerate() {
                    for k in 0..c {
                        let v = p.at(i, k, y, x);
                        if v > best[b].1 {
                            best[b] = (k, v);
                        }
                    }
                }
                let d = best[0].0 != best[1].0;
                conflict.push(u8::from(d));
                for b in 0..2 {
                    let is_cc = d && best[b].1 > gamma;
                    cc[b].push(u8::from(is_cc));
                    e[b].push(u8::from(!is_cc));
                    pseudo[b].push(best[b].0 as u8);
                }
            }
        }
    }
    (conflict, cc, e, pseudo)
}

fn brute_cpl(p1: &Tensor<f64>, p2: &Tensor<f64>, gamma: f64, omega: f64) -> f64 {
    let [n, _, h, w] = p1.shape();
    let (_, cc, _, pseudo) = brute_partition(p1, p2, gamma);
    let mut branch = [0.0; 2];
    for (b, p) in [p1, p2].iter().enumerate() {
        let mut sum_cc = 0.0;
        let mut sum_e = 0.0;
        let mut k = 0;
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let target = pseudo[1 - b][k] as usize;
                    let ce = -p.at(i, target, y, x).ln();
                    if cc[b][k] == 1 {
                        sum_cc += ce;
                    } else {
                        sum_e += ce;
                    }
                    k += 1;
                }
            }
        }
        let total = (n * h * w) as f64;
        branch[b] = omega * (sum_cc / total) + sum_e / total;
    }
    0.5 * (branch[0] + branch[1])
}

/// Per-class IoU as exact rationals from per-pixel counting, and the
/// float mean computed the same way the metric does.
fn brute_miou(
    preds: &[LabelMap],
    labels: &[LabelMap],
    y: usize,
) -> (Vec<Option<Ratio<u64>>>, f64, Ratio<u64>) {
    let mut inter = vec![0u64; y];
    let mut union = vec![0u64; y];
    for (p, t) in preds.iter().zip(labels) {
        for (&a, &b) in p.data().iter().zip(t.data()) {
            if b == 255 {
                continue;
            }
            for c in 0..y as u8 {
                let (in_p, in_t) = (a == c, b == c);
                inter[c as usize] += u64::from(in_p && in_t);
                union[c as usize] += u64::from(in_p || in_t);
            }
        }
    }
    let ious: Vec<Option<Ratio<u64>>> = (0..y)
        .map(|c| (union[c] > 0).then(|| Ratio::new(inter[c], union[c])))
        .collect();
    let present: Vec<Ratio<u64>> = ious.iter().flatten().copied().collect();
    let floats: Vec<f64> = (0..y)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    let float_mean = floats.iter().sum::<f64>() / floats.len() as f64;
    let exact = present.iter().fold(Ratio::from_integer(0), |s, v| s + v)
        / Ratio::from_integer(present.len() as u64);
    (ious, float_mean, exact)
}

fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn criterion4() -> Outcome {
    let instances = 200;
    let mut r = rng(4);
    let mut mask_mismatch = 0;
    let mut loss_err = 0f64;
    let mut miou_mismatch = 0;
    let mut miou_exact_err = 0f64;
    for t in 0..instances {
        let scale = [0.5, 3.0, 8.0][t % 3];
        let p1 = softmax_channels(&random_tensor(&mut r, [2, 3, 4, 4], scale));
        let p2 = softmax_channels(&random_tensor(&mut r, [2, 3, 4, 4], scale));
        let gamma = r.gen_range(0.3..0.99);
        let omega = r.gen_range(1.0..3.0);
        let part: ConflictPartition = conflict_partition(&p1, &p2, gamma).unwrap();
        let (conflict, cc, e, pseudo) = brute_partition(&p1, &p2, gamma);
        let same = part.conflict == conflict
            && part.cc == cc
            && part.e == e
            && part.pseudo[0].data() == pseudo[0].as_slice()
            && part.pseudo[1].data() == pseudo[1].as_slice();
        mask_mismatch += usize::from(!same);
        let got = consistency_loss_cpl(&p1, &p2, &part, omega).unwrap().value;
        loss_err = loss_err.max((got - brute_cpl(&p1, &p2, gamma, omega)).abs());

        let y = r.gen_range(2..6usize);
        let count = r.gen_range(1..4);
        let labels: Vec<LabelMap> = (0..count)
            .map(|_| random_labels(&mut r, [1, 5, 5], y as u8, 0.1))
            .collect();
        let preds: Vec<LabelMap> = (0..count)
            .map(|_| random_labels(&mut r, [1, 5, 5], y as u8, 0.0))
            .collect();
        let (ious, float_mean, exact) = brute_miou(&preds, &labels, y);
        match miou(&preds, &labels, y) {
            Ok((m, per_class)) => {
                let per_ok = per_class.len() == y
                    && per_class.iter().zip(&ious).all(|(a, b)| match (a, b) {
                        (Some(a), Some(b)) => *a == ratio_f64(*b),
                        (None, None) => true,
                        _ => false,
                    });
                miou_mismatch += usize::from(!per_ok || m != float_mean);
                miou_exact_err = miou_exact_err.max((m - ratio_f64(exact)).abs());
            }
            Err(_) => miou_mismatch += usize::from(ious.iter().any(Option::is_some)),
        }
    }
    let ok =
        mask_mismatch == 0 && loss_err <= 1e-12 && miou_mismatch == 0 && miou_exact_err <= 1e-12;
    check(
        ok,
        format!(
            "{instances} instances: partition mismatches {mask_mismatch}, max CPL loss error {loss_err:.1e}, \
             mIoU mismatches {miou_mismatch}, max |mIoU - exact rational| {miou_exact_err:.1e}"
        ),
    )
}

// Criteria 5-7.

type Runs = BTreeMap<(&'static str, u64), EpochRecord>;

const SEEDS: [u64; 3] = [0, 1, 2];
const VARIANTS: [&str; 4] = ["sup", "ccr", "cvc", "ccvc"];

fn variant(base: &ExperimentConfig, name: &str) -> ExperimentConfig {
    let mut cfg = base.clone();
    match name {
        "sup" => {
            cfg.lambda2 = 0.0;
            cfg.lambda3 = 0.0;
        }
        "ccr" => {
            cfg.use_dis = false;
            cfg.use_cpl = false;
        }
        "cvc" => cfg.use_cpl = false,
        _ => {}
    }
    cfg
}

/// Final epoch record of every (variant, seed) run at the default
/// desk-scale configuration.
fn desk_runs() -> Runs {
    let base = ExperimentConfig::default();
    let data: PreparedData = prepare_data(&base).unwrap();
    assert_eq!(
        (
            data.split.labelled.len(),
            data.split.unlabelled.len(),
            base.image_size,
            base.num_classes,
            base.epochs
        ),
        (40, 400, 64, 4, 40),
        "desk-scale setup"
    );
    let jobs: Vec<(&'static str, u64)> = SEEDS
        .iter()
        .flat_map(|&s| VARIANTS.iter().map(move |&v| (v, s)))
        .collect();
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(jobs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(BTreeMap::new());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&(name, seed)) = jobs.get(i) else { break };
                let cfg = variant(&ExperimentConfig { seed, ..base.clone() }, name);
                let start = Instant::now();
                let state = train_loop(&data.split, &data.val, &cfg, LoopOptions::default()).unwrap();
                let last = state.epoch_log.last().unwrap().clone();
                eprintln!(
                    "  run {name} seed {seed}: val mIoU {:.4}, cosine {:.4}, confident {:.4} ({:.0}s)",
                    last.val_miou,
                    last.mean_feature_cosine,
                    last.confident_frac,
                    start.elapsed().as_secs_f64()
                );
                results.lock().unwrap().insert((name, seed), last);
            });
        }
    });
    results.into_inner().unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion5(runs: &Runs) -> Outcome {
    let med = |name: &str| median(SEEDS.iter().map(|s| runs[&(name, *s)].val_miou).collect());
    let (sup, ccr, ccvc) = (med("sup"), med("ccr"), med("ccvc"));
    let ok = ccvc - sup >= 0.03 && ccvc - ccr >= 0.005;
    check(
        ok,
        format!(
            "median val mIoU sup {:.2}, CCR {:.2}, CVC {:.2}, CCVC {:.2}; CCVC-sup {:+.2} pts (need >= 3), CCVC-CCR {:+.2} pts (need >= 0.5)",
            100.0 * sup,
            100.0 * ccr,
            100.0 * med("cvc"),
            100.0 * ccvc,
            100.0 * (ccvc - sup),
            100.0 * (ccvc - ccr)
        ),
    )
}

fn criterion6(runs: &Runs) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for &s in &SEEDS {
        let without = runs[&("ccr", s)].mean_feature_cosine;
        for name in ["cvc", "ccvc"] {
            let with = runs[&(name, s)].mean_feature_cosine;
            ok &= with <= 0.5 && with < without;
            parts.push(format!("seed {s} {name} {with:.3}"));
        }
        parts.push(format!("seed {s} ccr {without:.3}"));
    }
    check(
        ok,
        format!(
            "feature cosine (dis on must be <= 0.5 and below ccr): {}",
            parts.join(", ")
        ),
    )
}

fn criterion7(runs: &Runs) -> Outcome {
    let mut hits = 0;
    let mut parts = Vec::new();
    for &s in &SEEDS {
        let (ccr, cvc) = (&runs[&("ccr", s)], &runs[&("cvc", s)]);
        let hit = ccr.confident_frac >= cvc.confident_frac && cvc.val_miou >= ccr.val_miou;
        hits += usize::from(hit);
        parts.push(format!(
            "seed {s}: confident ccr {:.3} / cvc {:.3}, mIoU ccr {:.4} / cvc {:.4} -> {}",
            ccr.confident_frac,
            cvc.confident_frac,
            ccr.val_miou,
            cvc.val_miou,
            if hit { "yes" } else { "no" }
        ));
    }
    check(hits >= 2, format!("{hits}/3 seeds; {}", parts.join("; ")))
}

// Criterion 8.

fn criterion8() -> Outcome {
    let cfg = ExperimentConfig {
        epochs: 2,
        ..Default::default()
    };
    let data = prepare_data(&cfg).unwrap();
    let run = |dir: &Path| {
        train_loop(
            &data.split,
            &data.val,
            &cfg,
            LoopOptions {
                out_dir: Some(dir),
                ..Default::default()
            },
        )
        .unwrap();
        std::fs::read(dir.join("metrics.jsonl")).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, mb) = (run(a.path()), run(b.path()));
    check(
        ma == mb && !ma.is_empty(),
        format!(
            "two {}-epoch default-config runs, metrics.jsonl {} bytes, identical = {}",
            cfg.epochs,
            ma.len(),
            ma == mb
        ),
    )
}

/// Criterion numbers given on the command line, or all of them.
fn selected() -> Vec<usize> {
    let picked: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .filter(|n| (1..=8).contains(n))
        .collect();
    if picked.is_empty() {
        (1..=8).collect()
    } else {
        picked
    }
}

fn main() {
    let want = selected();
    let mut results = Vec::new();
    let mut report = |n: usize, start: Instant, outcome: Outcome| {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!(
            "criterion {n}: {tag} ({:.1}s) {detail}",
            start.elapsed().as_secs_f64()
        );
        results.push(outcome.is_ok());
    };
    let single: [(usize, fn() -> Outcome); 4] = [
        (1, criterion1),
        (2, criterion2),
        (3, criterion3),
        (4, criterion4),
    ];
    for (n, f) in single {
        if want.contains(&n) {
            let t = Instant::now();
            report(n, t, f());
        }
    }
    if want.iter().any(|n| (5..=7).contains(n)) {
        let t = Instant::now();
        let runs = desk_runs();
        type Check = fn(&Runs) -> Outcome;
        let trained: [(usize, Check); 3] = [(5, criterion5), (6, criterion6), (7, criterion7)];
        for (n, f) in trained {
            if want.contains(&n) {
                report(n, t, f(&runs));
            }
        }
    }
    if want.contains(&8) {
        let t = Instant::now();
        report(8, t, criterion8());
    }

    let failed = results.iter().filter(|ok| !**ok).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
