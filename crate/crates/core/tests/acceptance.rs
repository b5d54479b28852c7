//! End-to-end acceptance checks. Runs as a plain binary so every line is
//! printed; exits nonzero if any check fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use res2net::analysis::{
    count_macs, count_params, enumerate_receptive_fields, positive_block_params, rf_oracle,
    solve_width_for_scale, WIDTH_SEARCH,
};
use res2net::autodiff::{check_fragment, primitive_fragments};
use res2net::harness::{
    decode_weights, encode_weights, evaluate, gen_synthetic_multiscale, grad_cam, parse_cifar100,
    train, TrainConfig, CIFAR_RECORD,
};
use res2net::nnops::{conv2d, conv2d_direct, ConvGeometry, Mode};
use res2net::res2net::{
    build_network, check_block_gradients, delta_kernel, init_block_params, init_params,
    res2net_block_forward, set_bn_identity, Graph, ParamStore, Res2NetBlockConfig, Template,
};
use res2net::{Error, Tensor};

type Outcome = Result<String, String>;

fn res2net50(width: usize, scale: usize) -> Template {
    Template::Res2Net50 {
        width,
        scale,
        cardinality: 1,
    }
}

fn res2next29(cardinality: usize, width: usize, scale: usize) -> Template {
    Template::Res2NeXt29 {
        cardinality,
        width,
        scale,
        depth: 29,
    }
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() / want <= tol
}

fn deadline(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    if t > limit {
        Err(format!("took {t:.1?}, limit {limit:?}"))
    } else {
        Ok(())
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

fn complexity_budgets() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    for (label, t, want) in [
        ("64w", Template::ResNet50, 4.2),
        ("48wx2s", res2net50(48, 2), 4.2),
        ("26wx4s", res2net50(26, 4), 4.2),
        ("14wx8s", res2net50(14, 8), 4.2),
        ("18wx4s", res2net50(18, 4), 2.9),
        ("26wx6s", res2net50(26, 6), 6.3),
        ("26wx8s", res2net50(26, 8), 8.3),
    ] {
        let g = count_macs(&build_network(&t, 1000, false).map_err(err)?, 224)
            .map_err(err)?
            .gmacs();
        if !within(g, want, 0.07) {
            return Err(format!("{label}: {g:.3}G vs {want}G"));
        }
        parts.push(format!("{label} {g:.2}G"));
    }
    deadline(start, Duration::from_secs(1))?;
    Ok(parts.join(", "))
}

fn model_sizes() -> Outcome {
    let start = Instant::now();
    let millions = |t: Template, classes| -> Result<f64, String> {
        Ok(
            count_params(&build_network(&t, classes, false).map_err(err)?)
                .map_err(err)?
                .params_millions(),
        )
    };
    let m = millions(res2net50(26, 4), 1000)?;
    if !within(m, 25.0, 0.10) {
        return Err(format!("res2net50-26w4s {m:.2}M vs 25M"));
    }
    let mut parts = vec![format!("26wx4s {m:.2}M")];
    for (t, want) in [
        (
            Template::ResNeXt29 {
                cardinality: 8,
                width: 64,
            },
            34.4,
        ),
        (res2next29(6, 24, 4), 24.3),
        (res2next29(8, 25, 4), 33.8),
        (res2next29(6, 24, 6), 36.7),
    ] {
        let m = millions(t, 100)?;
        if !within(m, want, 0.05) {
            return Err(format!("{t}: {m:.2}M vs {want}M"));
        }
        parts.push(format!("{t} {m:.2}M"));
    }
    deadline(start, Duration::from_secs(1))?;
    Ok(parts.join(", "))
}

fn width_solver() -> Outcome {
    let start = Instant::now();
    let base = build_network(&Template::ResNet50, 1000, false).map_err(err)?;
    let mut parts = Vec::new();
    for (s, want) in [(2, 48), (4, 26), (6, 18), (8, 14)] {
        let w = solve_width_for_scale(&base, s, WIDTH_SEARCH).map_err(err)?;
        if w != want {
            return Err(format!("scale {s}: w={w}, expected {want}"));
        }
        parts.push(format!("s={s} w={w}"));
    }
    deadline(start, Duration::from_secs(5))?;
    Ok(parts.join(", "))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let fragments = primitive_fragments(42);
    let count = fragments.len();
    for f in &fragments {
        let r = check_fragment(f, 1e-5, 1e-4, 42).map_err(err)?;
        if !r.passed {
            return Err(format!(
                "{}: max relative error {:.3e}",
                f.name, r.max_rel_error
            ));
        }
        worst = worst.max(r.max_rel_error);
    }
    let cfg = Res2NetBlockConfig::new(8, 8, 4, 4)
        .with_cardinality(2)
        .with_se(true)
        .with_se_ratio(4);
    let r = check_block_gradients(&cfg, 1e-5, 1e-4, 42).map_err(err)?;
    if !r.passed {
        return Err(format!("block: max relative error {:.3e}", r.max_rel_error));
    }
    deadline(start, Duration::from_secs(60))?;
    Ok(format!(
        "{count} primitives max {worst:.2e}; block s=4 c=2 SE max {:.2e} over {} coordinates",
        r.max_rel_error, r.comparisons
    ))
}

fn receptive_fields() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    for s in [2, 3, 4, 8] {
        let cfg = Res2NetBlockConfig::new(8, 8, 2, s);
        let params = positive_block_params(&cfg, "b", s as u64).map_err(err)?;
        let profile = rf_oracle(&cfg, &params, "b", 2 * s + 3).map_err(err)?;
        let expected: Vec<usize> = (1..=s).map(|i| 2 * (i - 1) + 1).collect();
        let measured: Vec<Option<usize>> = profile
            .splits
            .iter()
            .map(|f| f.measured.filter(|(h, w)| h == w).map(|(h, _)| h))
            .collect();
        if enumerate_receptive_fields(&cfg).sides() != expected
            || measured != expected.iter().map(|&v| Some(v)).collect::<Vec<_>>()
        {
            return Err(format!(
                "s={s}: measured {measured:?}, expected {expected:?}"
            ));
        }
        parts.push(format!("s={s} {expected:?}"));
    }
    deadline(start, Duration::from_secs(30))?;
    Ok(parts.join(", "))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst64, mut worst32): (f64, f64) = (0.0, 0.0);
    for case in 0..20u64 {
        let cfg = common::random_config(&mut rng);
        let side = rng.gen_range(5..=8);
        let train = case % 2 == 0;
        let params = common::random_block_params(&cfg, "b", case);
        let x = common::random_input([2, cfg.in_channels, side, side], case ^ 0xabc);
        let want = common::block(&common::Arr::from_tensor(&x), &cfg, &params, "b", train).d;
        let mode = if train { Mode::Train } else { Mode::Eval };
        let mut g = Graph::new(&params, mode);
        let xv = g.input(x.clone());
        let y = res2net_block_forward(&mut g, xv, &cfg, "b")
            .map_err(err)?
            .output;
        worst64 = worst64.max(common::max_rel_diff(g.value(y).data(), &want));
        let p32 = params.cast::<f32>();
        let mut g = Graph::new(&p32, mode);
        let xv = g.input(x.cast());
        let y = res2net_block_forward(&mut g, xv, &cfg, "b")
            .map_err(err)?
            .output;
        worst32 = worst32.max(common::norm_rel_diff(
            &g.value(y).cast::<f64>().into_data(),
            &want,
        ));
        if worst64 > 1e-5 || worst32 > 1e-5 {
            return Err(format!(
                "case {case} {cfg:?}: {worst64:.2e} (f64) {worst32:.2e} (f32)"
            ));
        }
    }
    let mut conv_worst: f64 = 0.0;
    for _ in 0..20 {
        let groups = rng.gen_range(1..=3);
        let c_in = groups * rng.gen_range(1..=4);
        let c_out = groups * rng.gen_range(1..=4);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let geo = ConvGeometry::new(rng.gen_range(1..=2), rng.gen_range(0..=k / 2), groups);
        let side = rng.gen_range(k..k + 8);
        let x = common::random_input([2, c_in, side, side], rng.gen()).cast::<f32>();
        let w = common::random_input([c_out, c_in / groups, k, k], rng.gen()).cast::<f32>();
        let fast = conv2d(&x, &w, geo).map_err(err)?.cast::<f64>().into_data();
        let naive = conv2d_direct(&x, &w, geo)
            .map_err(err)?
            .cast::<f64>()
            .into_data();
        conv_worst = conv_worst.max(common::norm_rel_diff(&fast, &naive));
    }
    if conv_worst > 1e-5 {
        return Err(format!("conv fast path off by {conv_worst:.2e}"));
    }
    deadline(start, Duration::from_secs(60))?;
    Ok(format!(
        "20 blocks: {worst64:.1e} (f64), {worst32:.1e} (f32); conv fast vs naive {conv_worst:.1e}"
    ))
}

fn delta_law() -> Outcome {
    for s in 2..=6 {
        for c in [1, 2] {
            let cfg = Res2NetBlockConfig::new(8, 8, 2 * c, s).with_cardinality(c);
            let mut params = init_block_params(&cfg, "b", s as u64).map_err(err)?;
            for i in 2..=s {
                params.insert(
                    format!("b.k{i}.conv.weight"),
                    delta_kernel(cfg.width, cfg.width / c),
                );
            }
            set_bn_identity(&mut params, "b");
            let mut rng = ChaCha8Rng::seed_from_u64(7 + s as u64);
            let x = Tensor::<f32>::from_fn([2, 8, 5, 5], |_, _, _, _| rng.gen_range(-1.0..1.0));
            let mut g = Graph::new(&params, Mode::Eval).with_bn_epsilon(0.0);
            let xv = g.input(x);
            let trace = res2net_block_forward(&mut g, xv, &cfg, "b").map_err(err)?;
            let xs: Vec<&Tensor<f32>> = trace.splits.iter().map(|&v| g.value(v)).collect();
            let mut expected = vec![xs[0].clone(), xs[1].clone()];
            for x in &xs[2..] {
                let prev = expected.last().expect("two entries").clone();
                expected.push(x.add(&prev).map_err(err)?);
            }
            for (i, (y, e)) in trace.outputs.iter().zip(&expected).enumerate() {
                let bits =
                    |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                if bits(g.value(*y)) != bits(e) {
                    return Err(format!("s={s} c={c}: split {} differs", i + 1));
                }
            }
        }
    }
    Ok("s=2..6, c in {1, 2}: bit-exact".into())
}

struct Overfit {
    spec: res2net::res2net::NetworkSpec,
    params: ParamStore<f32>,
    data: res2net::harness::Dataset,
}

fn overfit_once() -> Result<(Overfit, Vec<String>), String> {
    let t = Template::Mini {
        width: 4,
        scale: 4,
        cardinality: 1,
    };
    let classes = 4;
    let spec = build_network(&t, classes, false).map_err(err)?;
    let mut params = init_params(&spec.param_layout(), 42);
    let data = gen_synthetic_multiscale(64, classes, 32, 42).map_err(err)?;
    let cfg = TrainConfig {
        lr0: 0.05,
        lr_step: 1000,
        epochs: 500,
        batch_size: 16,
        seed: 42,
        target_accuracy: Some(0.99),
        ..TrainConfig::default()
    };
    let log = train(&spec, &mut params, &data, &cfg).map_err(err)?;
    let lines = log.iter().map(|l| l.to_string()).collect();
    Ok((Overfit { spec, params, data }, lines))
}

fn training_sanity() -> Result<(String, Overfit), String> {
    let start = Instant::now();
    let (a, log_a) = overfit_once()?;
    let (b, log_b) = overfit_once()?;
    let acc = 1.0
        - evaluate(&a.spec, &a.params, &a.data)
            .map_err(err)?
            .top1_error;
    if acc < 0.99 {
        return Err(format!(
            "train accuracy {acc:.4} after {} epochs",
            log_a.len()
        ));
    }
    let same_weights = a
        .params
        .iter()
        .zip(b.params.iter())
        .all(|((na, ta), (nb, tb))| {
            na == nb
                && ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    if log_a != log_b || !same_weights {
        return Err("two runs with the same seed differ".into());
    }
    deadline(start, Duration::from_secs(600))?;
    Ok((
        format!(
            "accuracy {acc:.4} after {} epochs, repeat run bit-identical ({:.0?} for both)",
            log_a.len(),
            start.elapsed()
        ),
        a,
    ))
}

fn cam_localization(model: &Overfit) -> Outcome {
    let start = Instant::now();
    let boxes = model.data.boxes.as_ref().ok_or("no boxes")?;
    let mut hits = 0;
    for (i, bbox) in boxes.iter().enumerate().take(32) {
        let cam = grad_cam(
            &model.spec,
            &model.params,
            &model.data.image(i),
            model.data.labels[i],
            "stage3.1",
        )
        .map_err(err)?;
        let (r, c) = cam.peak();
        hits += bbox.contains(r, c) as usize;
    }
    deadline(start, Duration::from_secs(120))?;
    let msg = format!("{hits}/32 peaks inside the pattern box at stage3.1");
    if hits * 10 >= 32 * 8 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn format_round_trips() -> Outcome {
    let start = Instant::now();
    let templates = [
        (Template::ResNet50, 1000),
        (res2net50(26, 4), 1000),
        (res2net50(14, 8), 1000),
        (
            Template::ResNeXt29 {
                cardinality: 8,
                width: 64,
            },
            100,
        ),
        (res2next29(6, 24, 4), 100),
        (
            Template::Mini {
                width: 4,
                scale: 4,
                cardinality: 2,
            },
            10,
        ),
    ];
    for (i, (t, classes)) in templates.iter().enumerate() {
        for se in [false, true] {
            let spec = build_network(t, *classes, se).map_err(err)?;
            let params = init_params(&spec.param_layout(), i as u64);
            let back = decode_weights(&encode_weights(&params).map_err(err)?).map_err(err)?;
            let exact = params.len() == back.len()
                && params.iter().zip(back.iter()).all(|((na, ta), (nb, tb))| {
                    na == nb
                        && ta.shape() == tb.shape()
                        && ta
                            .data()
                            .iter()
                            .zip(tb.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                });
            if !exact {
                return Err(format!("{t} se={se}: weights changed in round trip"));
            }
        }
    }
    for len in [CIFAR_RECORD - 1, 3 * (CIFAR_RECORD - 1), CIFAR_RECORD + 1] {
        if !matches!(
            parse_cifar100(&vec![0; len], 0),
            Err(Error::BadRecordLength { .. })
        ) {
            return Err(format!("CIFAR reader accepted {len} bytes"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for _ in 0..1000 {
        let parts = rng.gen_range(1..=6);
        let shape = [
            rng.gen_range(1..=3),
            parts * rng.gen_range(1..=4),
            rng.gen_range(1..=5),
            rng.gen_range(1..=5),
        ];
        let x = Tensor::<f32>::from_fn(shape, |_, _, _, _| rng.gen());
        let split = x.split_channels(parts).map_err(err)?;
        let back = Tensor::concat_channels(&split).map_err(err)?;
        let again = back.split_channels(parts).map_err(err)?;
        if back != x || again != split {
            return Err(format!(
                "split/concat inverse fails on {shape:?} into {parts}"
            ));
        }
    }
    Ok(format!(
        "{} template weight files bit-exact, CIFAR lengths rejected, 1000 split/concat shapes ({:.1?})",
        templates.len() * 2,
        start.elapsed()
    ))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| match &outcome {
        Ok(msg) => println!("PASS  {n:>2} {name}: {msg}"),
        Err(msg) => {
            failed += 1;
            println!("FAIL  {n:>2} {name}: {msg}");
        }
    };
    report(1, "complexity budgets", complexity_budgets());
    report(2, "model sizes", model_sizes());
    report(3, "width solver", width_solver());
    report(4, "gradient correctness", gradient_correctness());
    report(5, "receptive fields", receptive_fields());
    report(6, "oracle equivalence", oracle_equivalence());
    report(7, "delta-kernel law", delta_law());
    match training_sanity() {
        Ok((msg, model)) => {
            report(8, "training sanity", Ok(msg));
            report(9, "grad-cam localization", cam_localization(&model));
        }
        Err(msg) => {
            report(8, "training sanity", Err(msg));
            report(9, "grad-cam localization", Err("no trained model".into()));
        }
    }
    report(10, "format round trips", format_round_trips());
    if failed == 0 {
        println!("acceptance: all 10 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 10 criteria failed");
        ExitCode::FAILURE
    }
}
