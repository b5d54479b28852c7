use std::process::{Command, Output};

use res2net::harness::{gen_synthetic_multiscale, read_pnm, write_ppm};

fn res2net(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_res2net"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn solve_prints_width() {
    let o = res2net(&["solve", "--scale", "4"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "w=26");
}

#[test]
fn flops_near_four_gmacs() {
    let o = res2net(&["flops", "res2net50-26w4s", "--res", "224"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let macs: f64 = text
        .split_whitespace()
        .skip_while(|w| *w != "macs")
        .nth(1)
        .and_then(|v| v.parse().ok())
        .expect("macs field");
    assert!((macs / 4.2e9 - 1.0).abs() < 0.07, "{text}");
}

#[test]
fn params_accepts_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.cfg");
    std::fs::write(
        &path,
        "template=mini\nwidth=4\nscale=4\ncardinality=1\nse=false\nclasses=10\n",
    )
    .unwrap();
    let from_file = res2net(&["params", path.to_str().unwrap()]);
    let from_preset = res2net(&["params", "mini-4w4s"]);
    assert_eq!(from_file.status.code(), Some(0));
    assert_eq!(stdout(&from_file), stdout(&from_preset));
}

#[test]
fn usage_errors_exit_one() {
    let o = res2net(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = res2net(&["flops", "mini-4w4s", "--resolution", "32"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--resolution"));
    assert_eq!(res2net(&["solve"]).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    assert_eq!(res2net(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_two() {
    assert_eq!(
        res2net(&["params", "res2net50-0w4s"]).status.code(),
        Some(2)
    );
    assert_eq!(
        res2net(&["flops", "mini-4w4s", "--res", "0"]).status.code(),
        Some(2)
    );
    assert_eq!(
        res2net(&["sweep", "--dim", "height", "--values", "1"])
            .status
            .code(),
        Some(2)
    );
    let o = res2net(&[
        "eval",
        "mini-4w4s",
        "--weights",
        "/nonexistent/w.r2nw",
        "--data",
        "synthetic",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn rf_and_gradcheck_pass() {
    let o = res2net(&["rf", "mini-4w4s"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("sides {1, 3, 5, 7}"));
    let o = res2net(&["gradcheck", "mini-2w4s2c-se", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn sweep_grows_with_scale() {
    let o = res2net(&["sweep", "--dim", "scale", "--values", "1,2,4"]);
    assert_eq!(o.status.code(), Some(0));
    let totals: Vec<u64> = stdout(&o)
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 3);
    assert!(totals.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn train_eval_cam_round() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("mini.r2nw");
    let w = weights.to_str().unwrap();
    let common = ["--data", "synthetic", "--samples", "16", "--size", "16"];
    let mut args = vec![
        "train",
        "mini-4w4s",
        "--out",
        w,
        "--epochs",
        "2",
        "--lr",
        "0.05",
        "--batch-size",
        "8",
    ];
    args.extend(common);
    let o = res2net(&args);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(
        stdout(&o)
            .lines()
            .filter(|l| l.starts_with("epoch"))
            .count(),
        2
    );

    let mut args = vec!["eval", "mini-4w4s", "--weights", w];
    args.extend(common);
    let o = res2net(&args);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("top-1 error"));

    let data = gen_synthetic_multiscale(1, 10, 16, 7).unwrap();
    let image = dir.path().join("x.ppm");
    write_ppm(&image, &data.image(0)).unwrap();
    let out = dir.path().join("cam.pgm");
    let o = res2net(&[
        "cam",
        "mini-4w4s",
        "--weights",
        w,
        "--image",
        image.to_str().unwrap(),
        "--class",
        "0",
        "--layer",
        "stage2.1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let map = read_pnm(&out).unwrap();
    assert_eq!([map.height(), map.width()], [16, 16]);

    let o = res2net(&[
        "cam",
        "mini-4w4s",
        "--weights",
        w,
        "--image",
        image.to_str().unwrap(),
        "--class",
        "0",
        "--layer",
        "stage9.9",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_reports_timing() {
    let o = res2net(&["bench", "mini-4w4s", "--res", "16", "--iters", "2"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("median"));
}
