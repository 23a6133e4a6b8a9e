//! Command-line entry point. One binary, subcommand style; configuration
//! files are plain key=value text and command-line overrides are echoed,
//! so every run is reproducible from its config alone.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
//! failure.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::affinity::SimilarityMode;
use crate::datagen::{gen_dataset, DatagenError, SynthConfig};
use crate::feature_net::{NetError, NetworkConfig};
use crate::geometry::{load_auto, normalize, GeometryError};
use crate::losses::LossWeights;
use crate::matcher::{
    accuracy_curve, default_tolerance_grid, export_colored_pair, match_clouds, read_correspondence,
    read_index_file, write_correspondence, write_eval_csv, EvalResult, MatchError,
};
use crate::trainer::{fit, fit_resume, load_checkpoint, PairDataset, TrainConfig, TrainError};
use crate::verify;

const USAGE: &str = "\
usage: pointcorr <subcommand> [options] [key=value ...]

subcommands:
  gen-synth       generate synthetic deformable pairs with ground truth
                  --out DIR [--config FILE] [key=value ...]
  train           train the embedding network on a directory of clouds
                  --data DIR --out DIR [--config FILE] [--resume CKPT] [key=value ...]
  infer           compute a correspondence map from a checkpoint
                  --checkpoint CKPT --source FILE --target FILE --out FILE
  eval            evaluate predictions against ground truth
                  --pred FILE --target FILE --gt FILE --out CSV
                  or --manifest FILE --out CSV (lines: pred target gt)
  export-colored  write the color-transfer visualization pair
                  --source FILE --target FILE --corr FILE --out-prefix PREFIX
  selfcheck       run the built-in oracle and invariant suites

configuration files hold key=value lines; trailing key=value arguments
override them. Unknown keys are rejected with the list of valid keys.
";

enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Config(_) | TrainError::UnknownKey { .. } => CliError::Usage(e.to_string()),
            TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            TrainError::Net(NetError::NonFinite(_)) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match &e {
            DatagenError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MatchError> for CliError {
    fn from(e: MatchError) -> Self {
        match &e {
            MatchError::InvalidTolerance(_) => CliError::Usage(e.to_string()),
            MatchError::Net(NetError::NonFinite(_)) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let Some(sub) = args.first() else {
        eprint!("{USAGE}");
        return 1;
    };
    if sub == "--help" || sub == "-h" || sub == "help" {
        print!("{USAGE}");
        return 0;
    }
    let rest = &args[1..];
    let result = match sub.as_str() {
        "gen-synth" => cmd_gen_synth(rest),
        "train" => cmd_train(rest),
        "infer" => cmd_infer(rest),
        "eval" => cmd_eval(rest),
        "export-colored" => cmd_export_colored(rest),
        "selfcheck" => cmd_selfcheck(),
        other => Err(CliError::Usage(format!(
            "unknown subcommand '{other}'\n{USAGE}"
        ))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

/// Splits arguments into --flag value pairs and key=value overrides.
fn parse_args(
    args: &[String],
    allowed_flags: &[&str],
) -> Result<(HashMap<String, String>, Vec<(String, String)>), CliError> {
    let mut flags = HashMap::new();
    let mut overrides = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        if let Some(name) = arg.strip_prefix("--") {
            if !allowed_flags.contains(&name) {
                return Err(CliError::Usage(format!(
                    "unknown flag '--{name}'; expected one of: {}",
                    allowed_flags
                        .iter()
                        .map(|f| format!("--{f}"))
                        .collect::<Vec<_>>()
                        .join(", ")
                )));
            }
            let value = it
                .next()
                .ok_or_else(|| CliError::Usage(format!("flag '--{name}' needs a value")))?;
            flags.insert(name.to_string(), value.clone());
        } else if let Some((k, v)) = arg.split_once('=') {
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        } else {
            return Err(CliError::Usage(format!(
                "unexpected argument '{arg}' (use --flag value or key=value)"
            )));
        }
    }
    Ok((flags, overrides))
}

fn require<'a>(flags: &'a HashMap<String, String>, name: &str) -> Result<&'a String, CliError> {
    flags
        .get(name)
        .ok_or_else(|| CliError::Usage(format!("missing required flag '--{name}'")))
}

fn read_config_file(path: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{path}: {e}")))
}

fn cmd_gen_synth(args: &[String]) -> Result<(), CliError> {
    let (flags, overrides) = parse_args(args, &["out", "config"])?;
    let out = PathBuf::from(require(&flags, "out")?);
    let mut cfg = match flags.get("config") {
        Some(path) => SynthConfig::from_key_values(&read_config_file(path)?)?,
        None => SynthConfig::default(),
    };
    for (k, v) in &overrides {
        cfg.apply_key_value(k, v)?;
    }
    eprint!("effective config:\n{}", cfg.echo());
    let manifest = gen_dataset(&cfg, &out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(args: &[String]) -> Result<(), CliError> {
    let (flags, overrides) = parse_args(args, &["data", "out", "config", "resume"])?;
    let data = PathBuf::from(require(&flags, "data")?);
    let out = PathBuf::from(require(&flags, "out")?);
    let mut cfg = match flags.get("config") {
        Some(path) => TrainConfig::from_key_values(&read_config_file(path)?)?,
        None => TrainConfig::default(),
    };
    for (k, v) in &overrides {
        cfg.apply_key_value(k, v)?;
    }
    cfg.validate()?;
    let ds = PairDataset::from_dir(&data, cfg.pairing)?;
    fs::create_dir_all(&out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let echo_path = out.join("effective_config.txt");
    fs::write(&echo_path, cfg.to_key_values())
        .map_err(|e| CliError::Data(format!("{}: {e}", echo_path.display())))?;
    eprintln!(
        "training on {} clouds from {}; effective config written to {}",
        ds.len(),
        data.display(),
        echo_path.display()
    );
    let final_ckpt = match flags.get("resume") {
        Some(ckpt) => fit_resume(&ds, &cfg, &out, Path::new(ckpt))?,
        None => fit(&ds, &cfg, &out)?,
    };
    println!("{}", final_ckpt.display());
    Ok(())
}

fn cmd_infer(args: &[String]) -> Result<(), CliError> {
    let (flags, overrides) = parse_args(args, &["checkpoint", "source", "target", "out"])?;
    if let Some((k, _)) = overrides.first() {
        return Err(CliError::Usage(format!(
            "infer takes no key=value overrides (got '{k}')"
        )));
    }
    let ckpt = load_checkpoint(Path::new(require(&flags, "checkpoint")?))?;
    let source = load_auto(Path::new(require(&flags, "source")?))?;
    let target = load_auto(Path::new(require(&flags, "target")?))?;
    let out = PathBuf::from(require(&flags, "out")?);

    // the checkpoint's normalization convention applies to both clouds
    let source_n = normalize(&source);
    let target_n = normalize(&target);
    let map = match_clouds(
        &ckpt.params,
        &source_n,
        &target_n,
        ckpt.config.similarity,
        ckpt.config.loss.k_cc,
    )?;
    write_correspondence(&out, &map)?;
    eprintln!(
        "matched {} source points of '{}' into '{}'",
        map.len(),
        map.source_id,
        map.target_id
    );
    println!("{}", out.display());
    Ok(())
}

fn eval_one(pred: &Path, target: &Path, gt: &Path) -> Result<EvalResult, CliError> {
    let map = read_correspondence(pred)?;
    let target_cloud = load_auto(target)?; // original frame for unit-faithful metrics
    let gt = read_index_file(gt)?;
    Ok(accuracy_curve(
        &map,
        &target_cloud,
        &gt,
        &default_tolerance_grid(),
    )?)
}

fn cmd_eval(args: &[String]) -> Result<(), CliError> {
    let (flags, overrides) = parse_args(args, &["pred", "target", "gt", "manifest", "out"])?;
    if !overrides.is_empty() {
        return Err(CliError::Usage("eval takes no key=value overrides".into()));
    }
    let out = PathBuf::from(require(&flags, "out")?);
    let results: Vec<EvalResult> = if let Some(manifest) = flags.get("manifest") {
        let text = read_config_file(manifest)?;
        let base = Path::new(manifest).parent().unwrap_or(Path::new("."));
        let mut results = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 3 {
                return Err(CliError::Data(format!(
                    "{manifest} line {}: expected 'pred target gt'",
                    idx + 1
                )));
            }
            results.push(eval_one(
                &base.join(toks[0]),
                &base.join(toks[1]),
                &base.join(toks[2]),
            )?);
        }
        if results.is_empty() {
            return Err(CliError::Data(format!("{manifest}: no entries")));
        }
        results
    } else {
        vec![eval_one(
            Path::new(require(&flags, "pred")?),
            Path::new(require(&flags, "target")?),
            Path::new(require(&flags, "gt")?),
        )?]
    };

    // mean curve across entries
    let n = results.len() as f64;
    let grid = default_tolerance_grid();
    let mean = EvalResult {
        err: results.iter().map(|r| r.err).sum::<f64>() / n,
        d: results.iter().map(|r| r.d).sum::<f64>() / n,
        acc_at: grid
            .iter()
            .enumerate()
            .map(|(gi, &eps)| (eps, results.iter().map(|r| r.acc_at[gi].1).sum::<f64>() / n))
            .collect(),
    };
    write_eval_csv(&out, &mean)?;
    eprintln!(
        "evaluated {} pair(s): err = {:.6}, acc(0.01) = {:.4}, acc(0.05) = {:.4}",
        results.len(),
        mean.err,
        mean.acc_at[0].1,
        mean.acc_at[4].1
    );
    println!("{}", out.display());
    Ok(())
}

fn cmd_export_colored(args: &[String]) -> Result<(), CliError> {
    let (flags, _) = parse_args(args, &["source", "target", "corr", "out-prefix"])?;
    let source = load_auto(Path::new(require(&flags, "source")?))?;
    let target = load_auto(Path::new(require(&flags, "target")?))?;
    let map = read_correspondence(Path::new(require(&flags, "corr")?))?;
    let prefix = require(&flags, "out-prefix")?;
    let source_path = PathBuf::from(format!("{prefix}_source.ply"));
    let target_path = PathBuf::from(format!("{prefix}_target.ply"));
    export_colored_pair(&source_path, &target_path, &source, &target, &map)?;
    println!("{}", source_path.display());
    println!("{}", target_path.display());
    Ok(())
}

fn cmd_selfcheck() -> Result<(), CliError> {
    let mut failures = 0;
    let mut report = |name: &str, pass: bool, detail: String| {
        if pass {
            println!("ok   {name} ({detail})");
        } else {
            println!("FAIL {name} ({detail})");
            failures += 1;
        }
    };

    let worst = verify::check_chamfer_oracle(100, 48, 11);
    report(
        "chamfer-vs-brute-force",
        worst < 1e-9,
        format!("max rel dev {worst:.2e}"),
    );

    let knn_bad = verify::check_knn_oracle(50, 8, 12);
    report(
        "knn-vs-exhaustive",
        knn_bad == 0,
        format!("{knn_bad} mismatching rows"),
    );

    let arg_bad = verify::check_argmax_oracle(50, 10, 13);
    report(
        "argmax-topk-vs-global",
        arg_bad == 0,
        format!("{arg_bad} disagreeing rows"),
    );

    let softmax_ok = {
        let s = crate::affinity::AffinityMatrix {
            s: crate::tensor::Tensor::from_vec(1, 2, vec![0.0, (2.0_f64).ln()]),
            row_source: String::new(),
            col_source: String::new(),
        };
        let nb = crate::affinity::softmax_weights(&s, &[0, 1], 2);
        (nb.weights[0] - 1.0 / 3.0).abs() < 1e-12 && (nb.weights[1] - 2.0 / 3.0).abs() < 1e-12
    };
    report(
        "softmax-spot-value",
        softmax_ok,
        "weights (1/3, 2/3)".into(),
    );

    let mapping_ok = {
        let x = crate::geometry::PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], "spot");
        let yhat = crate::tensor::Tensor::from_vec(2, 3, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let loss = crate::losses::mapping_loss(&x, &yhat, 1, 8.0).expect("valid");
        (loss - (-0.125_f64).exp()).abs() < 1e-12
    };
    report("mapping-loss-spot-value", mapping_ok, "e^(-1/8)".into());

    // shrunken-network gradient check, strided for speed
    let mut rng = crate::rng::Rng::from_seed(14);
    let x = normalize(&verify::random_cloud(&mut rng, 16));
    let y = normalize(&verify::random_cloud(&mut rng, 16));
    let params = crate::feature_net::init_params(&NetworkConfig::tiny(), 15).expect("init");
    let w = LossWeights {
        k_cc: 3,
        k_sc: 3,
        k_m: 3,
        ..LossWeights::default()
    };
    let gc = verify::gradient_check(&params, &x, &y, &w, SimilarityMode::Cosine, 1e-4, 7);
    report(
        "gradient-check",
        gc.max_rel_err < 1e-4,
        format!(
            "{} entries, max rel err {:.2e}",
            gc.entries_checked, gc.max_rel_err
        ),
    );

    if failures > 0 {
        Err(CliError::Numerical(format!(
            "{failures} selfcheck suite(s) failed"
        )))
    } else {
        println!("all selfcheck suites passed");
        Ok(())
    }
}
