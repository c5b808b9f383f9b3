use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mrc::io;
use mrc::verify::{
    check_dilated_support, check_endpoint_equivalences, check_guarantee1, check_guarantee2, check_quadtree,
    random_conv, random_input, MaskSampler, Report, TrialConfig, DEFAULT_TOL,
};
use mrc::{
    cost_report, edge_mask, keypoint_mask, oracle_mask, run_adaptive, run_dilated, run_regular, CostReport,
    DenseTensor, DownsampleMask, Error, Item, KeypointDilation, KeypointSet, NetworkSpec, PatchReducer, Variant,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Multi-resolution convolution with content-adaptive downsampling.
#[derive(Parser)]
#[command(name = "mrc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a network variant on an input tensor.
    Run(RunArgs),
    /// Generate a downsampling mask.
    Mask {
        #[command(subcommand)]
        kind: MaskKind,
    },
    /// Check endpoint equivalences and the adaptive-variant guarantees.
    Verify(VerifyArgs),
    /// Print multiply-add counts for the three variants.
    Cost(CostArgs),
    /// Write a small example network, weights, input and masks.
    Toy(ToyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Regular,
    Dilated,
    Adaptive,
}

#[derive(Args)]
struct NetArgs {
    /// Network spec (text).
    #[arg(long)]
    spec: PathBuf,
    /// Weights (MRW1).
    #[arg(long)]
    weights: PathBuf,
    /// Input tensor (MRT1) or grayscale image (binary PGM).
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, value_enum)]
    variant: VariantArg,
    /// One MSK1 mask per adaptive stage, in stage order.
    #[arg(long, num_args = 1..)]
    mask: Vec<PathBuf>,
    /// Number of trailing downsamplings the dilated variant removes
    /// (defaults to the spec's adaptive count).
    #[arg(long)]
    keep_last: Option<usize>,
    /// Output: MRT1 for regular/dilated, MRM1 for adaptive.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaskCommon {
    /// Square dilation size (odd).
    #[arg(long)]
    dilate: usize,
    /// Patch size of the mask grid.
    #[arg(long)]
    d: usize,
    /// MSK1 output; a PGM preview is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum MaskKind {
    /// Retain patches near strong Sobel edges.
    Edge {
        #[arg(long)]
        input: PathBuf,
        /// Edge threshold on the normalized gradient magnitude, in [0, 1].
        #[arg(long)]
        threshold: f32,
        #[command(flatten)]
        common: MaskCommon,
    },
    /// Retain patches near keypoints (`y x` per line).
    Keypoints {
        #[arg(long)]
        kps: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        /// Square dilation size, `0` (downsample everything) or `inf` (retain everything).
        #[arg(long)]
        dilate: String,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retain patches where the high-resolution prediction fixes the low-resolution one.
    Oracle {
        #[arg(long)]
        low: PathBuf,
        #[arg(long)]
        high: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[command(flatten)]
        common: MaskCommon,
    },
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Random mask trials per sampler.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    /// Random mask sets for the receptive-field check (0 skips it).
    #[arg(long, default_value_t = 3)]
    rf_masks: usize,
    /// Test hook: corrupt the weights used by the adaptive variant after its
    /// first adaptive stage.
    #[arg(long)]
    perturb_coarse: bool,
    /// Write a JSON summary here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Weights are optional; only layer shapes matter.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Input whose size is used; defaults to the spec's `input:` line.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    mask: Vec<PathBuf>,
    #[arg(long)]
    keep_last: Option<usize>,
    /// Write a JSON summary here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Lib(Error),
    Checks,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Lib(Error::InvalidArgument(msg.into()))
}

fn load_net(args: &NetArgs) -> Result<(NetworkSpec, DenseTensor), Error> {
    let spec = io::read_network(&args.spec, &args.weights)?;
    let input = io::read_image(&args.input)?;
    check_declared_input(&spec, &input)?;
    Ok((spec, input))
}

fn check_declared_input(spec: &NetworkSpec, input: &DenseTensor) -> Result<(), Error> {
    match spec.input_dims() {
        Some(dims) if dims != input.dims() => Err(Error::Shape(format!(
            "spec declares a {}x{}x{} input, got {}x{}x{}",
            dims.0,
            dims.1,
            dims.2,
            input.height(),
            input.width(),
            input.channels()
        ))),
        _ => Ok(()),
    }
}

fn load_masks(paths: &[PathBuf]) -> Result<Vec<DownsampleMask>, Error> {
    paths.iter().map(io::read_mask).collect()
}

fn keep_last(spec: &NetworkSpec, requested: Option<usize>) -> Result<usize, Failure> {
    let n = requested.unwrap_or(spec.n_adaptive());
    let downs = spec.downsample_indices().len();
    if n > downs {
        return Err(invalid(format!("--keep-last {n} exceeds the {downs} downsampling item(s)")));
    }
    Ok(n)
}

fn format_cost(report: &CostReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "variant {} total_ma={} reducer_ops={}",
        report.variant.name(),
        report.total_mult_adds,
        report.total_reducer_ops
    );
    for item in &report.items {
        let _ = writeln!(
            s,
            "  item {} {} {}x{} elements={} ma={} reducer_ops={}",
            item.index, item.kind, item.grid.0, item.grid.1, item.elements, item.mult_adds, item.reducer_ops
        );
    }
    for st in &report.stages {
        let _ = writeln!(
            s,
            "  stage {} mask_ones={}/{} active={}/{} active_fraction={:.6}",
            st.stage, st.mask_ones, st.mask_cells, st.active_elements, st.base_elements, st.active_fraction
        );
    }
    s
}

fn cmd_run(args: &RunArgs) -> CmdResult {
    let (spec, input) = load_net(&args.net)?;
    let dims = (input.height(), input.width());
    let report = match args.variant {
        VariantArg::Regular => {
            io::write_tensor(&args.out, &run_regular(&spec, &input)?)?;
            cost_report(&spec, dims, Variant::Regular, None)?
        }
        VariantArg::Dilated => {
            let keep = keep_last(&spec, args.keep_last)?;
            io::write_tensor(&args.out, &run_dilated(&spec, &input, keep)?)?;
            cost_report(&spec, dims, Variant::Dilated { keep_last: keep }, None)?
        }
        VariantArg::Adaptive => {
            if args.mask.len() != spec.n_adaptive() {
                return Err(Failure::Lib(Error::Shape(format!(
                    "adaptive run needs {} --mask file(s), got {}",
                    spec.n_adaptive(),
                    args.mask.len()
                ))));
            }
            let masks = load_masks(&args.mask)?;
            io::write_multires(&args.out, &run_adaptive(&spec, &input, &masks)?)?;
            cost_report(&spec, dims, Variant::Adaptive, Some(&masks))?
        }
    };
    print!("{}", format_cost(&report));
    Ok(())
}

fn write_mask_outputs(out: &Path, mask: &DownsampleMask) -> CmdResult {
    io::write_mask(out, mask)?;
    let preview = out.with_extension("pgm");
    io::write_mask_pgm(&preview, mask)?;
    println!(
        "mask {}x{} downsample={} retain={} -> {} ({})",
        mask.rows(),
        mask.cols(),
        mask.count_ones(),
        mask.count_zeros(),
        out.display(),
        preview.display()
    );
    Ok(())
}

fn cmd_mask(kind: &MaskKind) -> CmdResult {
    match kind {
        MaskKind::Edge {
            input,
            threshold,
            common,
        } => {
            let gray = io::read_image(input)?;
            let mask = edge_mask(&gray, *threshold, common.dilate, common.d)?;
            write_mask_outputs(&common.out, &mask)
        }
        MaskKind::Keypoints {
            kps,
            height,
            width,
            dilate,
            d,
            out,
        } => {
            let dilation: KeypointDilation = dilate.parse()?;
            let points = KeypointSet::new(*height, *width, io::read_keypoints(kps)?)?;
            let mask = keypoint_mask(&points, dilation, *d)?;
            write_mask_outputs(out, &mask)
        }
        MaskKind::Oracle {
            low,
            high,
            labels,
            common,
        } => {
            let mask = oracle_mask(
                &io::read_label_map(low)?,
                &io::read_label_map(high)?,
                &io::read_label_map(labels)?,
                common.dilate,
                common.d,
            )?;
            write_mask_outputs(&common.out, &mask)
        }
    }
}

fn cmd_verify(args: &VerifyArgs) -> CmdResult {
    if args.trials == 0 {
        return Err(invalid("--trials must be at least 1"));
    }
    if args.tol.is_nan() || args.tol < 0.0 {
        return Err(invalid("--tol must be non-negative"));
    }
    let (spec, input) = load_net(&args.net)?;
    let dims = (input.height(), input.width());
    let shapes = spec.stage_mask_shapes(dims.0, dims.1)?;
    let mut report = Report::default();
    report.extend(check_endpoint_equivalences(&spec, &input, args.tol));

    let samplers = [
        (MaskSampler::RandomDensity, args.trials),
        (MaskSampler::SingleRetained, args.trials),
        (MaskSampler::Checkerboard, 1),
        (MaskSampler::Inverted(Box::new(MaskSampler::Checkerboard)), 1),
    ];
    for (i, (sampler, trials)) in samplers.iter().enumerate() {
        let cfg = TrialConfig {
            trials: *trials,
            tol: args.tol,
            seed: args.seed.wrapping_add(i as u64),
            randomize_weights: false,
            perturb_coarse: args.perturb_coarse,
        };
        report.push(check_guarantee2(&spec, &input, sampler, &cfg));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    if args.rf_masks > 0 {
        let mut sets = vec![MaskSampler::Checkerboard.sample(&mut rng, &shapes)];
        sets.extend((1..args.rf_masks).map(|_| MaskSampler::RandomDensity.sample(&mut rng, &shapes)));
        report.push(check_guarantee1(&spec, dims, &sets));
        report.push(check_dilated_support(&spec, dims));
    }
    let masks = MaskSampler::RandomDensity.sample(&mut rng, &shapes);
    if spec.n_adaptive() > 0 {
        report.push(check_quadtree(&run_adaptive(&spec, &input, &masks)?));
    }

    print!("{}", report.to_text());
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_json() + "\n").map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure::Checks)
    }
}

fn cmd_cost(args: &CostArgs) -> CmdResult {
    let spec = match &args.weights {
        Some(w) => io::read_network(&args.spec, w)?,
        None => io::read_network_shape(&args.spec)?,
    };
    let dims = match &args.input {
        Some(path) => {
            let input = io::read_image(path)?;
            check_declared_input(&spec, &input)?;
            (input.height(), input.width())
        }
        None => spec
            .input_dims()
            .map(|(h, w, _)| (h, w))
            .ok_or_else(|| invalid("no --input given and the spec has no `input:` line"))?,
    };
    let keep = keep_last(&spec, args.keep_last)?;
    let mut reports = vec![
        cost_report(&spec, dims, Variant::Regular, None)?,
        cost_report(&spec, dims, Variant::Dilated { keep_last: keep }, None)?,
    ];
    if !args.mask.is_empty() {
        if args.mask.len() != spec.n_adaptive() {
            return Err(Failure::Lib(Error::Shape(format!(
                "adaptive cost needs {} --mask file(s), got {}",
                spec.n_adaptive(),
                args.mask.len()
            ))));
        }
        let masks = load_masks(&args.mask)?;
        reports.push(cost_report(&spec, dims, Variant::Adaptive, Some(&masks))?);
    }
    for r in &reports {
        print!("{}", format_cost(r));
    }
    if let Some(path) = &args.out {
        let summary: serde_json::Map<String, serde_json::Value> = reports
            .iter()
            .map(|r| (r.variant.name().to_string(), serde_json::to_value(r).expect("report serializes")))
            .collect();
        let text = serde_json::to_string_pretty(&summary).expect("report serializes") + "\n";
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok(())
}

fn cmd_toy(args: &ToyArgs) -> CmdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let items = vec![
        Item::Conv(random_conv(&mut rng, 3, 8, 8, true, true)),
        Item::Downsample {
            factor: 2,
            reducer: PatchReducer::UniformTopLeft,
        },
        Item::Conv(random_conv(&mut rng, 3, 8, 8, true, false)),
    ];
    let spec = NetworkSpec::new("toy", items, 1)?.with_input_dims((32, 32, 8));
    let input = random_input(&mut rng, 32, 32, 8);
    std::fs::create_dir_all(&args.out_dir).map_err(|source| Error::Io {
        path: args.out_dir.clone(),
        source,
    })?;
    let dir = &args.out_dir;
    io::write_network(dir.join("toy.net"), dir.join("toy.mrw"), &spec)?;
    io::write_tensor(dir.join("input.mrt"), &input)?;
    io::write_mask(dir.join("ones.msk"), &DownsampleMask::ones(16, 16))?;
    io::write_mask(dir.join("zeros.msk"), &DownsampleMask::zeros(16, 16))?;
    io::write_mask(dir.join("half.msk"), &DownsampleMask::from_fn(16, 16, |i, _| i % 2 == 0))?;
    println!("wrote toy.net toy.mrw input.mrt ones.msk zeros.msk half.msk to {}", dir.display());
    Ok(())
}

fn configure_threads() -> Result<(), Error> {
    let threads = match std::env::var("MRC_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("MRC_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    if threads > 1 {
        log::warn!("built without the parallel feature; MRC_THREADS={threads} ignored");
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_file_error() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().map_err(Failure::Lib).and_then(|()| match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Mask { kind } => cmd_mask(kind),
        Command::Verify(a) => cmd_verify(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Toy(a) => cmd_toy(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => {
            eprintln!("error: verification failed");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
