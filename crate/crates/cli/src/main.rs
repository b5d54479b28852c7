use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use res2net::analysis::{
    count_macs, count_params, positive_block_params, rf_oracle, solve_width_for_scale,
    sweep_dimension, Dimension, WIDTH_SEARCH,
};
use res2net::autodiff::{check_fragment, primitive_fragments};
use res2net::harness::{
    evaluate, gen_synthetic_multiscale, grad_cam, load_cifar100, load_weights, read_pnm,
    save_weights, train, write_pgm, Dataset, ModelConfig, TrainConfig,
};
use res2net::nnops::Mode;
use res2net::res2net::{
    build_network, build_network_with_params, check_block_gradients, Graph, Res2NetBlockConfig,
    Template,
};
use res2net::{Error, Result, Tensor};

#[derive(Parser, Debug)]
#[command(
    name = "res2net",
    version,
    about = "Res2Net blocks: complexity, receptive fields, training and Grad-CAM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer and total parameter counts.
    Params {
        /// Preset name (e.g. res2net50-26w4s) or key=value config file.
        config: String,
        /// Print every layer.
        #[arg(long)]
        layers: bool,
    },
    /// Multiply-accumulate count at a square input resolution.
    Flops {
        config: String,
        #[arg(long, default_value_t = 224)]
        res: usize,
        #[arg(long)]
        layers: bool,
    },
    /// Width per split that keeps ResNet-50's budget at a given scale.
    Solve {
        #[arg(long)]
        scale: usize,
    },
    /// Parameter totals as one dimension of a template varies.
    Sweep {
        #[arg(default_value = "res2next29-6c24w1s")]
        config: String,
        /// scale, cardinality or depth.
        #[arg(long)]
        dim: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Theoretical and measured receptive fields of a block's splits.
    Rf { config: String },
    /// Finite-difference gradient check of every primitive and a small block.
    Gradcheck {
        config: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
    },
    /// SGD training on CIFAR-100 or generated data.
    Train {
        config: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 90)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 30)]
        lr_step: usize,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 1e-4)]
        weight_decay: f64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long)]
        augment: bool,
        /// Stop once eval-mode training accuracy reaches this fraction.
        #[arg(long)]
        target_accuracy: Option<f64>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Top-1 and top-5 error of saved weights.
    Eval {
        config: String,
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Grad-CAM heat map for one image, written as PGM.
    Cam {
        config: String,
        #[arg(long)]
        weights: PathBuf,
        /// PPM or PGM image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "class")]
        class_id: usize,
        #[arg(long, default_value = "stage3.1")]
        layer: String,
        #[arg(long, default_value = "cam.pgm")]
        out: PathBuf,
    },
    /// Forward-pass timing.
    Bench {
        config: String,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Worker threads (0 uses the executor default).
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(clap::Args, Debug)]
struct DataArgs {
    /// CIFAR-100 binary file, or `synthetic`.
    #[arg(long)]
    data: String,
    /// Keep only the first N CIFAR records (0 keeps all).
    #[arg(long, default_value_t = 0)]
    limit: usize,
    /// Generated sample count.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Generated image side.
    #[arg(long, default_value_t = 32)]
    size: usize,
}

impl DataArgs {
    fn load(&self, classes: usize, seed: u64) -> Result<Dataset> {
        if self.data == "synthetic" {
            gen_synthetic_multiscale(self.samples, classes, self.size, seed)
        } else {
            load_cifar100(&self.data, self.limit)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` reports a failed check.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::Params { config, layers } => {
            let spec = ModelConfig::resolve(&config)?.build()?;
            let report = count_params(&spec)?;
            if layers {
                print!("{}", report.to_lines());
            }
            println!(
                "{}  params {}  ({:.2}M)",
                spec.name,
                report.total_params(),
                report.params_millions()
            );
        }
        Command::Flops {
            config,
            res,
            layers,
        } => {
            let spec = ModelConfig::resolve(&config)?.build()?;
            let report = count_macs(&spec, res)?;
            if layers {
                print!("{}", report.to_lines());
            }
            println!(
                "{}  res {res}  macs {}  ({:.2}G)",
                spec.name,
                report.total_macs(),
                report.gmacs()
            );
        }
        Command::Solve { scale } => {
            let baseline = build_network(&Template::ResNet50, 1000, false)?;
            let w = solve_width_for_scale(&baseline, scale, WIDTH_SEARCH)?;
            println!("w={w}");
        }
        Command::Sweep {
            config,
            dim,
            values,
        } => {
            let cfg = ModelConfig::resolve(&config)?;
            let dim: Dimension = dim.parse()?;
            for (v, p) in sweep_dimension(&cfg.template, cfg.classes, dim, &values)? {
                println!("{v}\t{p}\t{:.2}M", p as f64 / 1e6);
            }
        }
        Command::Rf { config } => {
            let spec = ModelConfig::resolve(&config)?.build()?;
            let (name, cfg) = spec
                .blocks()
                .find(|(_, c)| c.stride == 1)
                .ok_or_else(|| Error::InvalidConfig("no stride-1 block".into()))?;
            let cfg = *cfg;
            let params = positive_block_params(&cfg, &name, 42)?;
            let size = 2 * cfg.scale + 3;
            let profile = rf_oracle(&cfg, &params, &name, size)?;
            println!(
                "block {name}  scale {}  width {}  cardinality {}",
                cfg.scale, cfg.width, cfg.cardinality
            );
            println!("{profile}");
            let agrees = profile.agrees();
            println!(
                "{}",
                if agrees {
                    "measured = theory"
                } else {
                    "MISMATCH"
                }
            );
            return Ok(agrees);
        }
        Command::Gradcheck {
            config,
            seed,
            epsilon,
            threshold,
        } => {
            let model = ModelConfig::resolve(&config)?;
            let mut ok = true;
            for frag in primitive_fragments(seed) {
                let r = check_fragment(&frag, epsilon, threshold, seed)?;
                println!(
                    "{:<18} max_rel_error {:.3e}  {}",
                    frag.name,
                    r.max_rel_error,
                    if r.passed { "PASS" } else { "FAIL" }
                );
                ok &= r.passed;
            }
            let (_, scale, c) = model.template.dims();
            let block = Res2NetBlockConfig::new(8, 8, 2 * c, scale)
                .with_cardinality(c)
                .with_se(model.se)
                .with_se_ratio(4);
            println!("block s={scale} c={c} se={}", model.se);
            let r = check_block_gradients(&block, epsilon, threshold, seed)?;
            println!("{r}");
            ok &= r.passed;
            return Ok(ok);
        }
        Command::Train {
            config,
            data,
            out,
            epochs,
            lr,
            lr_step,
            momentum,
            weight_decay,
            batch_size,
            augment,
            target_accuracy,
            seed,
        } => {
            let model = ModelConfig::resolve(&config)?;
            let (spec, mut params) =
                build_network_with_params(&model.template, model.classes, model.se, seed)?;
            let dataset = data.load(model.classes, seed)?;
            let cfg = TrainConfig {
                lr0: lr,
                momentum,
                weight_decay,
                lr_step,
                epochs,
                batch_size,
                seed,
                augment,
                target_accuracy,
            };
            let start = Instant::now();
            let log = train(&spec, &mut params, &dataset, &cfg)?;
            for e in &log {
                println!("{e}");
            }
            save_weights(&params, &out)?;
            println!(
                "trained {} on {} samples in {:.1?}, weights -> {}",
                spec.name,
                dataset.len(),
                start.elapsed(),
                out.display()
            );
        }
        Command::Eval {
            config,
            weights,
            data,
            seed,
        } => {
            let model = ModelConfig::resolve(&config)?;
            let spec = model.build()?;
            let params = load_weights(&weights)?;
            let dataset = data.load(model.classes, seed)?;
            println!("{}", evaluate(&spec, &params, &dataset)?);
        }
        Command::Cam {
            config,
            weights,
            image,
            class_id,
            layer,
            out,
        } => {
            let spec = ModelConfig::resolve(&config)?.build()?;
            let params = load_weights(&weights)?;
            let img = read_pnm(&image)?;
            let cam = grad_cam(&spec, &params, &img, class_id, &layer)?;
            write_pgm(&out, &cam.upsampled)?;
            let (r, c) = cam.peak();
            println!(
                "layer {layer}  map {}x{}  peak ({r}, {c})  -> {}",
                cam.map.height(),
                cam.map.width(),
                out.display()
            );
        }
        Command::Bench {
            config,
            res,
            iters,
            batch,
            threads,
            seed,
        } => {
            let model = ModelConfig::resolve(&config)?;
            let (spec, params) =
                build_network_with_params(&model.template, model.classes, model.se, seed)?;
            let x = Tensor::<f32>::full([batch, 3, res, res], 0.5);
            let threads = if threads == 0 {
                res2net::par::threads()
            } else {
                threads
            };
            let mut times = res2net::par::with_threads(threads, || -> Result<Vec<f64>> {
                let mut times = Vec::with_capacity(iters);
                for _ in 0..iters.max(1) {
                    let start = Instant::now();
                    let mut g = Graph::new(&params, Mode::Eval);
                    let xv = g.input(x.clone());
                    spec.forward(&mut g, xv)?;
                    times.push(start.elapsed().as_secs_f64());
                }
                Ok(times)
            })?;
            times.sort_by(f64::total_cmp);
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            println!(
                "{}  batch {batch}  res {res}  iters {}  mean {:.3} ms  median {:.3} ms  threads {}",
                spec.name,
                times.len(),
                mean * 1e3,
                times[times.len() / 2] * 1e3,
                threads
            );
        }
    }
    Ok(true)
}
