use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gaitpt::dataio::{
    load_config, parse_checkpoint, read_sequences, save_checkpoint, Dataset, RunConfig,
};
use gaitpt::evaluation::{
    ablation_variants, casia_eval, embed_sequences, partition_variants, rank_k_accuracy, run_seeds,
    run_variants, EmbeddingSet, ExperimentTable, Splits, Variant,
};
use gaitpt::gradcheck::{model_check, op_suite, GradCheckOptions, NamedReport};
use gaitpt::skeleton::filter_min_length;
use gaitpt::synth::{build_dataset, Split, SynthConfig};
use gaitpt::training::{train, TrainConfig};
use gaitpt::{with_stages, DType, Element, GaitPT, GaitPTConfig, GaitSequence, PartitionScheme};
use serde::Serialize;
use serde_json::json;

use crate::args::{
    AblateArgs, Cli, Command, Common, EmbedArgs, EvalArgs, GradcheckArgs, ModelSize, PartitionArgs,
    Protocol, SynthArgs, TrainArgs,
};
use crate::error::{CliError, Result};

pub fn run(cli: Cli) -> Result<()> {
    let common = cli.common;
    let config = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => synth(&common, a),
        Command::Train(a) => train_cmd(&common, &config, a),
        Command::Embed(a) => embed(&config, a),
        Command::Eval(a) => eval(&common, &config, a),
        Command::Ablate(a) => ablate(&common, &config, a),
        Command::Gradcheck(a) => gradcheck(&common, a),
        Command::PartitionStudy(a) => partition_study(&common, &config, a),
    }
}

fn print_json<S: Serialize>(value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| gaitpt::Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn synth(common: &Common, a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        identities: a.identities,
        sequences_per_identity: a.sequences,
        frames: a.frames,
        views: a.views,
        conditions: a.conditions,
        train_per_view: a.train_per_view,
        noise: a.noise,
        seed: common.seed,
    };
    cfg.validate()?;
    let manifest = build_dataset(&cfg, &a.out)?;
    let counts: Vec<(&str, usize)> = Split::ALL
        .iter()
        .map(|&s| (s.name(), manifest.keys(s).count()))
        .collect();
    if common.json {
        let counts: serde_json::Map<String, serde_json::Value> = counts
            .iter()
            .map(|(k, v)| (k.to_string(), json!(v)))
            .collect();
        print_json(&json!({ "manifest": a.out.join("manifest.json"), "sequences": counts }))
    } else {
        println!("wrote {}", a.out.join("manifest.json").display());
        for (name, n) in counts {
            println!("{name:<8}{n:>6}");
        }
        Ok(())
    }
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    Ok(Dataset::open(path)?)
}

fn model_config(
    config: &RunConfig,
    stages: Option<&[usize]>,
    scheme: Option<PartitionScheme>,
) -> Result<GaitPTConfig> {
    let mut model = config.model.clone();
    if let Some(s) = scheme {
        model.scheme = s;
    }
    if let Some(stages) = stages {
        model = with_stages(&model, stages)?;
    }
    model.validate()?;
    Ok(model)
}

fn train_config(config: &RunConfig, epochs: Option<usize>, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: epochs.unwrap_or(config.train.epochs),
        seed,
        ..config.train.clone()
    }
}

fn train_cmd(common: &Common, config: &RunConfig, a: TrainArgs) -> Result<()> {
    let ds = open_dataset(&a.data)?;
    let data = filter_min_length(ds.load(Split::Train)?, config.data.min_frames);
    let model_cfg = model_config(config, a.stages.as_deref(), a.scheme)?;
    let (init_seed, train_seed) = run_seeds(common.seed, 0);
    let tc = train_config(config, a.epochs, train_seed);
    let mut model: GaitPT<f32> = GaitPT::new(model_cfg, init_seed)?;
    let start = Instant::now();
    let log = train(&mut model, &data, &tc, |e, _| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  active {:.3}  lr {:.2e}  [{:.1}s]",
            e.epoch + 1,
            e.mean_loss,
            e.active_fraction,
            e.lr,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    save_checkpoint(&model, &a.out)?;
    let log_path = a.log.unwrap_or_else(|| a.out.with_extension("log.json"));
    let text = serde_json::to_vec_pretty(&log).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&log_path, &text)?;

    let summary = json!({
        "checkpoint": a.out,
        "log": log_path,
        "stages": model.config().active_stages(),
        "scheme": model.config().scheme,
        "params": model.param_count(),
        "sequences": data.len(),
        "epochs": log.len(),
        "final_loss": log.last().map(|e| e.mean_loss),
    });
    if common.json {
        print_json(&summary)
    } else {
        println!("wrote {}", a.out.display());
        println!(
            "stages {:?}, scheme {}",
            model.config().active_stages(),
            model.config().scheme
        );
        if let Some(last) = log.last() {
            println!(
                "final loss {:.5} after {} epochs",
                last.mean_loss,
                log.len()
            );
        }
        Ok(())
    }
}

fn embed_with<T: Element>(
    bytes: &[u8],
    seqs: &[GaitSequence],
    batch: usize,
) -> Result<EmbeddingSet> {
    let model: GaitPT<T> = gaitpt::dataio::model_from_checkpoint(bytes)?;
    Ok(embed_sequences(&model, seqs, batch)?)
}

/// Embeds with a checkpoint of either element type.
fn embed_checkpoint(ckpt: &Path, seqs: &[GaitSequence], batch: usize) -> Result<EmbeddingSet> {
    let bytes = fs::read(ckpt).map_err(|source| gaitpt::Error::Io {
        path: ckpt.to_path_buf(),
        source,
    })?;
    let (header, _) = parse_checkpoint(&bytes)?;
    match header.dtype {
        DType::F32 => embed_with::<f32>(&bytes, seqs, batch),
        DType::F64 => embed_with::<f64>(&bytes, seqs, batch),
    }
}

fn embed(config: &RunConfig, a: EmbedArgs) -> Result<()> {
    let seqs = read_sequences(&a.input)?;
    let set = embed_checkpoint(&a.ckpt, &seqs, config.data.embed_batch)?;
    let mut out = Vec::new();
    for row in set.rows() {
        serde_json::to_writer(&mut out, row).map_err(|e| CliError::Usage(e.to_string()))?;
        out.push(b'\n');
    }
    match a.out {
        Some(path) => write_file(&path, &out),
        None => std::io::stdout()
            .write_all(&out)
            .map_err(|e| CliError::Usage(format!("writing stdout: {e}"))),
    }
}

fn eval(common: &Common, config: &RunConfig, a: EvalArgs) -> Result<()> {
    if !a.ckpt.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            a.ckpt.display()
        )));
    }
    let gallery = read_sequences(&a.gallery)?;
    let probe = read_sequences(&a.probe)?;
    let batch = config.data.embed_batch;
    let g = embed_checkpoint(&a.ckpt, &gallery, batch)?;
    let p = embed_checkpoint(&a.ckpt, &probe, batch)?;
    match a.protocol {
        Protocol::Rankk => {
            let acc = rank_k_accuracy(&g, &p, &a.ks)?;
            if common.json {
                let rows: Vec<_> = acc
                    .iter()
                    .map(|(k, v)| json!({ "k": k, "accuracy": v }))
                    .collect();
                print_json(
                    &json!({ "protocol": "rankk", "gallery": g.len(), "probe": p.len(), "ranks": rows }),
                )
            } else {
                println!("{:<8}{:>9}", "rank", "accuracy");
                for (k, v) in acc {
                    println!("{:<8}{:>9.2}", format!("R{k}"), v * 100.0);
                }
                Ok(())
            }
        }
        Protocol::Casia => {
            // Sessions and conditions decide gallery and probe membership.
            let report = casia_eval(&g.merged(&p)?)?;
            if common.json {
                print_json(&report)
            } else {
                print!("{}", report.render_table());
                Ok(())
            }
        }
    }
}

fn parse_subsets(text: &str) -> Result<Vec<Vec<usize>>> {
    text.split('|')
        .map(|part| {
            part.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| CliError::Usage(format!("bad stage {s:?} in subset {part:?}")))
                })
                .collect()
        })
        .collect()
}

struct ExperimentData {
    train: Vec<GaitSequence>,
    gallery: Vec<GaitSequence>,
    probe: Vec<GaitSequence>,
}

fn experiment_data(path: &Path, config: &RunConfig) -> Result<ExperimentData> {
    let ds = open_dataset(path)?;
    let min = config.data.min_frames;
    Ok(ExperimentData {
        train: filter_min_length(ds.load(Split::Train)?, min),
        gallery: filter_min_length(ds.load(Split::Gallery)?, min),
        probe: filter_min_length(ds.load(Split::Probe)?, min),
    })
}

fn check_runs(runs: usize) -> Result<()> {
    if runs < 2 {
        return Err(CliError::Usage(format!(
            "pairwise t-tests need at least 2 runs per variant, got --runs {runs}"
        )));
    }
    Ok(())
}

fn run_experiment(
    common: &Common,
    config: &RunConfig,
    variants: &[Variant],
    data: PathBuf,
    runs: usize,
    epochs: Option<usize>,
) -> Result<()> {
    check_runs(runs)?;
    let d = experiment_data(&data, config)?;
    let tc = train_config(config, epochs, 0);
    let splits = Splits {
        train: &d.train,
        gallery: &d.gallery,
        probe: &d.probe,
    };
    let start = Instant::now();
    let table: ExperimentTable = run_variants::<f32>(
        variants,
        splits,
        &tc,
        runs,
        common.seed,
        config.data.embed_batch,
        |label, run, acc| {
            eprintln!(
                "{label} run {}: rank-1 {:.2}  [{:.1}s]",
                run + 1,
                acc * 100.0,
                start.elapsed().as_secs_f64()
            )
        },
    )?;
    if common.json {
        print_json(&table)
    } else {
        print!("{}", table.render_table());
        Ok(())
    }
}

fn ablate(common: &Common, config: &RunConfig, a: AblateArgs) -> Result<()> {
    let subsets = parse_subsets(&a.subsets)?;
    let variants = ablation_variants(&config.model, &subsets)?;
    run_experiment(common, config, &variants, a.data, a.runs, a.epochs)
}

fn partition_study(common: &Common, config: &RunConfig, a: PartitionArgs) -> Result<()> {
    let variants = partition_variants(&config.model, &PartitionScheme::ALL_SCHEMES);
    run_experiment(common, config, &variants, a.data, a.runs, a.epochs)
}

fn gradcheck(common: &Common, a: GradcheckArgs) -> Result<()> {
    if !(a.tol >= 0.0) {
        return Err(CliError::Usage(format!(
            "--tol must be non-negative, got {}",
            a.tol
        )));
    }
    let model_cfg = match a.size {
        ModelSize::Tiny => GaitPTConfig::tiny(),
    };
    let opts = GradCheckOptions {
        step: 1e-5,
        tolerance: a.tol,
        max_coords_per_input: None,
        seed: common.seed,
    };
    let mut reports = op_suite(&opts)?;
    let model_opts = GradCheckOptions {
        max_coords_per_input: Some(a.coords),
        ..opts
    };
    reports.push(model_check(&model_cfg, common.seed, &model_opts)?);
    let failed: Vec<&NamedReport> = reports.iter().filter(|r| !r.report.pass).collect();
    if common.json {
        print_json(&json!({ "tolerance": a.tol, "pass": failed.is_empty(), "checks": reports }))?;
    } else {
        println!(
            "{:<22}{:>14}{:>8}  result",
            "check", "max rel err", "coords"
        );
        for r in &reports {
            println!(
                "{:<22}{:>14.3e}{:>8}  {}",
                r.name,
                r.report.max_rel_err,
                r.report.coords_checked,
                if r.report.pass { "pass" } else { "FAIL" }
            );
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        let names: Vec<&str> = failed.iter().map(|r| r.name.as_str()).collect();
        Err(CliError::GradCheck(format!(
            "{} of {} checks at tolerance {:e}: {}",
            failed.len(),
            reports.len(),
            a.tol,
            names.join(", ")
        )))
    }
}
