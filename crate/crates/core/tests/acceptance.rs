//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::f64::consts::E;
use std::time::{Duration, Instant};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spacte_core::certify::{
    certify, certify_dataset, format_record, lower_conf_bound, BaseClassifier, CertificationRecord, CertifyConfig,
};
use spacte_core::cli::{load_datasets, state_digest};
use spacte_core::config::RunConfig;
use spacte_core::data::{subsample_every, synthetic_blobs};
use spacte_core::losses::{
    cosine_diversity, cosine_diversity_loss, head_weights, spacte_objective, spl_weight, HeadWeights, SampleHeadMatrix,
    TeachingWeights,
};
use spacte_core::metrics::{acr, certified_accuracy, certified_curve, curve_integral, radius_grid};
use spacte_core::model::spec::preset_layers;
use spacte_core::model::{ArchitectureSpec, CostReport, HeadLogits, InputNorm, InputShape, MultiHeadNetwork};
use spacte_core::schedule::{lambda_at_epoch, LambdaSchedule};
use spacte_core::tensor::Tensor;
use spacte_core::trainer::{gaussian_augmentation_gradients, iteration_gradients, iteration_noise, train, TrainState};
use spacte_core::Result;

const DESK_CONFIG: &str = include_str!("../../../configs/desk-blobs.cfg");
const FULL_SCALE_CONFIG: &str = include_str!("../../../configs/cifar10-paper.cfg");

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(got: f64, want: f64, tol: f64, what: &str) -> std::result::Result<(), String> {
    ensure(
        (got - want).abs() <= tol,
        format!("{what}: got {got:.12}, want {want:.12}"),
    )
}

fn err(e: spacte_core::Error) -> String {
    e.to_string()
}

fn c1_param_counts() -> Outcome {
    let r = CostReport::from_spec(&ArchitectureSpec::resnet110(5)).map_err(err)?;
    let got = [r.params_total_single, r.params_total_multihead, r.params_total_k_dnns];
    ensure(got == [1_730_714, 6_995_138, 8_653_570], format!("counts {got:?}"))?;
    Ok(format!("{} / {} / {}", got[0], got[1], got[2]))
}

fn c2_flops_ratio() -> Outcome {
    let r = CostReport::from_spec(&ArchitectureSpec::resnet110(5)).map_err(err)?;
    let want = 0.594 / 0.256;
    let ratio = r.flops_ratio();
    ensure(
        (ratio / want - 1.0).abs() <= 0.10,
        format!("ratio {ratio:.3} vs {want:.3}"),
    )?;
    Ok(format!("ratio {ratio:.3} (reference {want:.3}; {})", r.convention))
}

/// `argmax` of `w . x + b` over two classes.
struct Linear {
    weight: Vec<f64>,
    bias: f64,
}

impl BaseClassifier for Linear {
    fn num_classes(&self) -> usize {
        2
    }

    fn input_len(&self) -> usize {
        self.weight.len()
    }

    fn classify(&self, inputs: &[f64]) -> Result<Vec<usize>> {
        Ok(inputs
            .chunks(self.weight.len())
            .map(|x| {
                let s: f64 = self.weight.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias;
                usize::from(s > 0.0)
            })
            .collect())
    }
}

fn c3_soundness() -> Outcome {
    let blobs = synthetic_blobs(16, 0.8, 0.1, 200, 7).map_err(err)?;
    let clf = Linear {
        weight: blobs.weight.clone(),
        bias: blobs.bias,
    };
    let mut cfg = CertifyConfig::new(0.25);
    cfg.n = 1000;
    cfg.alpha = 0.001;
    cfg.seed = 11;
    let mut violations = 0;
    let mut certified = 0;
    for i in 0..blobs.dataset.len() {
        let x = blobs.dataset.input(i);
        let side = blobs.separator_label(x);
        let rec = certify(&clf, x, side, i, &cfg).map_err(err)?;
        match rec.prediction {
            Some(p) if p == side => {
                certified += 1;
                if rec.radius > blobs.margins[i] {
                    violations += 1;
                }
            }
            Some(_) => violations += 1,
            None => {}
        }
    }
    ensure(violations <= 5, format!("{violations} radii exceed the margin"))?;
    Ok(format!("{violations} violations over {certified} certified of 200"))
}

fn c4_clopper_pearson() -> Outcome {
    for n in [10u64, 100, 100_000] {
        for alpha in [0.05, 0.001] {
            close(
                lower_conf_bound(0, n, alpha).map_err(err)?,
                0.0,
                1e-9,
                &format!("k=0 n={n} a={alpha}"),
            )?;
            let want = alpha.powf(1.0 / n as f64);
            close(
                lower_conf_bound(n, n, alpha).map_err(err)?,
                want,
                1e-9,
                &format!("k=n={n} a={alpha}"),
            )?;
        }
    }
    Ok("k=0 and k=n for 3 n x 2 alpha".into())
}

/// Two-class logits whose cross-entropy for label 0 is `ce`.
fn logits_with_ce(ce: f64) -> [f64; 2] {
    [-(ce.exp() - 1.0).ln(), 0.0]
}

fn c5_loss_closed_forms() -> Outcome {
    let tol = 1e-9;
    // Self-paced weights.
    close(spl_weight(0.5, 1.0), 1.0, tol, "spl easy")?;
    close(spl_weight(3f64.ln(), 0.0), 0.5, tol, "spl lambda=0")?;
    let l10 = 10f64.ln();
    close(spl_weight(l10 + 1.0, l10), 1.1 / (1.0 + E), tol, "spl lambda=ln10")?;
    // Head weights.
    let w = head_weights(&[0.3, 0.7], 0.2).map_err(err)?;
    ensure(
        w.0.iter().zip([0.8, 0.2]).all(|(a, b)| (a - b).abs() <= tol),
        format!("eps=0.2 L=2: {:?}", w.0),
    )?;
    let w = head_weights(&[0.9, 0.1, 0.5, 0.3, 0.7], 0.8).map_err(err)?;
    ensure(
        w.0.iter().all(|a| (a - 0.2).abs() <= tol),
        format!("eps=0.8 L=5: {:?}", w.0),
    )?;
    let w = head_weights(&[0.5, 0.5, 0.9], 0.2).map_err(err)?;
    ensure(
        w.0.iter().zip([0.8, 0.1, 0.1]).all(|(a, b)| (a - b).abs() <= tol),
        format!("tie: {:?}", w.0),
    )?;
    // Cosine penalty.
    close(
        cosine_diversity_loss(&[vec![1.0, 0.0], vec![0.0, 1.0]]).map_err(err)?,
        0.0,
        tol,
        "orthogonal",
    )?;
    close(
        cosine_diversity_loss(&[vec![1.0, 0.0], vec![1.0, 0.0]]).map_err(err)?,
        2.0,
        tol,
        "parallel",
    )?;
    close(
        cosine_diversity_loss(&[vec![2.0, 0.0], vec![1.0, 1.0]]).map_err(err)?,
        2.0 * 2f64.sqrt(),
        tol,
        "(2,0),(1,1)",
    )?;
    // Joint objective with L=2, m=1, N=1.
    let mut logits = HeadLogits::zeros(1, 2, 2);
    logits.row_mut(0, 0).copy_from_slice(&logits_with_ce(1.0));
    logits.row_mut(0, 1).copy_from_slice(&logits_with_ce(2.0));
    let nu = TeachingWeights(SampleHeadMatrix::from_columns(&[vec![0.5], vec![1.0]]));
    let omega = HeadWeights(vec![0.8, 0.2]);
    close(
        spacte_objective(&logits, 1, &[0], &nu, &omega, 0.0).map_err(err)?,
        0.4,
        tol,
        "objective",
    )?;
    Ok("self-paced, head weights, cosine, objective".into())
}

fn c6_cosine_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let heads = rng.random_range(2..=5);
        let hs: Vec<Vec<f64>> = (0..heads)
            .map(|_| (0..32).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let analytic = cosine_diversity(&hs, false).map_err(err)?.grads;
        let h = 1e-6;
        for k in 0..heads {
            for j in 0..32 {
                let mut plus = hs.clone();
                let mut minus = hs.clone();
                plus[k][j] += h;
                minus[k][j] -= h;
                let fd = (cosine_diversity_loss(&plus).map_err(err)? - cosine_diversity_loss(&minus).map_err(err)?)
                    / (2.0 * h);
                let a = analytic[k][j];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                worst = worst.max(rel);
                ensure(rel <= 1e-4, format!("case {case}, head {k}, coord {j}: {a} vs {fd}"))?;
            }
        }
    }
    Ok(format!("max relative error {worst:.2e}"))
}

fn c7_lambda_schedule() -> Outcome {
    let l10 = 10f64.ln();
    let s = LambdaSchedule::new(l10, 1.0, 100).map_err(err)?;
    close(lambda_at_epoch(&s, 1), l10, 1e-9, "e=1")?;
    close(lambda_at_epoch(&s, 100), 1.0, 1e-9, "e=E")?;
    close(lambda_at_epoch(&s, 10), l10 + (1.0 - l10) / 2.0, 1e-9, "e=10")?;
    Ok(format!("lambda(10) = {:.6}", lambda_at_epoch(&s, 10)))
}

struct DeskRun {
    state: Vec<f64>,
    digest: String,
    initial_loss: f64,
    final_loss: f64,
    records: Vec<CertificationRecord>,
}

fn desk_run(workers: usize) -> Result<DeskRun> {
    let cfg = RunConfig::parse(DESK_CONFIG)?;
    let (train_set, test_set) = load_datasets(&cfg)?;
    let net = MultiHeadNetwork::build(&cfg.spec, cfg.input_norm(), cfg.seed())?;
    let (state, report) = train(&cfg.train, &train_set, TrainState::new(net, &cfg.train), None, |_| {})?;
    let subset = subsample_every(&test_set, cfg.stride)?;
    let records = certify_dataset(&state.network, &subset, &cfg.certify, workers)?;
    Ok(DeskRun {
        state: state.network.state_vector(),
        digest: state_digest(&state.network),
        initial_loss: report.initial_loss.unwrap_or(f64::NAN),
        final_loss: report.final_loss().unwrap_or(f64::NAN),
        records,
    })
}

fn without_time(records: &[CertificationRecord]) -> Vec<String> {
    records
        .iter()
        .map(|r| {
            let line = format_record(r);
            line.rsplit_once('\t')
                .map_or(line.clone(), |(head, _)| head.to_string())
        })
        .collect()
}

fn c8_determinism(a: &DeskRun, b: &DeskRun) -> Outcome {
    let same_bits =
        a.state.len() == b.state.len() && a.state.iter().zip(&b.state).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure(same_bits, format!("parameters differ: {} vs {}", a.digest, b.digest))?;
    ensure(
        a.records.len() == 100,
        format!("{} records, expected 100", a.records.len()),
    )?;
    ensure(
        without_time(&a.records) == without_time(&b.records),
        "TSV differs between workers=1 and workers=4",
    )?;
    Ok(format!("state {}..., 100 identical records", &a.digest[..16]))
}

fn c9_smoke_quality(run: &DeskRun) -> Outcome {
    let acc0 = certified_accuracy(&run.records, 0.0).map_err(err)?;
    let a = acr(&run.records).map_err(err)?;
    let drop = 1.0 - run.final_loss / run.initial_loss;
    ensure(acc0 >= 0.90, format!("certified accuracy at r=0 is {acc0:.3}"))?;
    ensure(a >= 0.15, format!("ACR {a:.4}"))?;
    ensure(drop >= 0.5, format!("training loss fell only {:.1}%", 100.0 * drop))?;
    Ok(format!(
        "acc@0 {acc0:.3}, ACR {a:.4}, loss {:.4} -> {:.4}",
        run.initial_loss, run.final_loss
    ))
}

fn c10_degenerate_reduction() -> Outcome {
    let cfg = RunConfig::parse(DESK_CONFIG).map_err(err)?;
    let shape = InputShape::new(1, 1, 16);
    let spec = ArchitectureSpec::new(preset_layers("desk-mlp").unwrap(), 2, 1, 2, shape).map_err(err)?;
    let mut tc = cfg.train.clone();
    tc.self_paced = false;
    tc.cosine = false;
    let blobs = synthetic_blobs(16, 0.8, 0.1, 8, 3).map_err(err)?;
    let rows: Vec<usize> = (0..8).collect();
    let (x, labels): (Tensor, Vec<usize>) = blobs.dataset.batch(&rows);
    let noise = iteration_noise(tc.seed, 1, 0, tc.draws, x.n, 16, tc.sigma);
    let mut net = MultiHeadNetwork::build(&spec, InputNorm::identity(1), 5).map_err(err)?;
    let mut twin = net.clone();
    let (g, _) = iteration_gradients(&mut net, &tc, &x, &labels, &noise, tc.lambda_ini).map_err(err)?;
    let base = gaussian_augmentation_gradients(&mut twin, &x, &labels, &noise, tc.draws).map_err(err)?;
    ensure(g.len() == base.len(), "gradient lengths differ")?;
    let worst = g.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(worst <= 1e-12, format!("max gradient difference {worst:.3e}"))?;
    Ok(format!(
        "max gradient difference {worst:.1e} over {} parameters",
        g.len()
    ))
}

fn c11_acr_quadrature(run: &DeskRun) -> Outcome {
    let a = acr(&run.records).map_err(err)?;
    let q = curve_integral(&run.records, 20_001).map_err(err)?;
    ensure(a > 0.0, "ACR is zero")?;
    ensure((q - a).abs() <= 0.01 * a, format!("ACR {a:.6} vs quadrature {q:.6}"))?;
    let max = run.records.iter().map(|r| r.radius).fold(0.0, f64::max);
    let curve = certified_curve(&run.records, &radius_grid(0.01, max + 0.05)).map_err(err)?;
    ensure(
        curve.accuracy.windows(2).all(|w| w[1] <= w[0]),
        "curve increases somewhere",
    )?;
    Ok(format!("ACR {a:.6}, quadrature {q:.6}"))
}

fn c12_full_scale_config() -> Outcome {
    let cfg = RunConfig::parse(FULL_SCALE_CONFIG).map_err(err)?;
    let again = RunConfig::parse(&cfg.render()).map_err(err)?;
    ensure(cfg == again, "render/parse round trip changed the config")?;
    let t = &cfg.train;
    ensure(
        cfg.spec == ArchitectureSpec::resnet110(5),
        "architecture is not five-head ResNet-110",
    )?;
    ensure(
        t.epochs == 150 && t.batch_size == 256 && t.draws == 2,
        "epochs, batch or m",
    )?;
    ensure(
        t.epsilon == 0.8 && t.lr.initial == 0.1 && t.lr.factor == 0.1 && t.lr.period == 50,
        "epsilon or lr",
    )?;
    ensure(
        t.lr.momentum == 0.9 && t.lr.weight_decay == 1e-4 && t.nesterov,
        "momentum or weight decay",
    )?;
    close(t.lambda_ini, 10f64.ln(), 1e-12, "lambda_ini")?;
    ensure(
        cfg.certify.n0 == 100 && cfg.certify.n == 100_000 && cfg.certify.alpha == 0.001,
        "certify keys",
    )?;
    ensure(cfg.sigma() == 0.25, "sigma")?;
    // The full-scale tables are not reproduced at desk scale; only the config is checked.
    Ok("full-scale hyperparameters validate and round-trip".into())
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, limit: Duration, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let mut outcome = f();
        let took = start.elapsed();
        if outcome.is_ok() && took > limit {
            outcome = Err(format!("took {took:.1?}, limit {limit:?}"));
        }
        match outcome {
            Ok(detail) => println!("PASS criterion {n:>2} {name}: {detail} [{took:.2?}]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {n:>2} {name}: {detail} [{took:.2?}]");
            }
        }
    };
    let sec = Duration::from_secs;
    report(1, "parameter counts", sec(1), &mut c1_param_counts);
    report(2, "flops ratio", sec(1), &mut c2_flops_ratio);
    report(3, "certification soundness", sec(180), &mut c3_soundness);
    report(4, "clopper-pearson closed forms", sec(1), &mut c4_clopper_pearson);
    report(5, "loss closed forms", sec(1), &mut c5_loss_closed_forms);
    report(6, "cosine gradient check", sec(10), &mut c6_cosine_gradient);
    report(7, "lambda schedule", sec(1), &mut c7_lambda_schedule);

    let start = Instant::now();
    let runs = desk_run(1).and_then(|a| desk_run(4).map(|b| (a, b)));
    let desk_time = start.elapsed();
    match &runs {
        Ok((a, b)) => {
            report(8, "determinism", sec(900), &mut || {
                ensure(desk_time <= sec(900), format!("two desk runs took {desk_time:.1?}"))?;
                c8_determinism(a, b).map(|d| format!("{d}, two runs {desk_time:.1?}"))
            });
            report(9, "desk smoke quality", sec(1), &mut || c9_smoke_quality(a));
        }
        Err(e) => {
            let msg = format!("desk run failed: {e}");
            report(8, "determinism", sec(900), &mut || Err(msg.clone()));
            report(9, "desk smoke quality", sec(1), &mut || Err(msg.clone()));
        }
    }
    report(10, "degenerate reduction", sec(10), &mut c10_degenerate_reduction);
    match &runs {
        Ok((a, _)) => report(11, "acr quadrature", sec(10), &mut || c11_acr_quadrature(a)),
        Err(e) => report(11, "acr quadrature", sec(10), &mut || {
            Err(format!("desk run failed: {e}"))
        }),
    }
    report(12, "full-scale config round trip", sec(1), &mut c12_full_scale_config);

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 12 acceptance criteria passed");
}
