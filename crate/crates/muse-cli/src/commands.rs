//! Subcommand implementations.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use muse_core::bench::{BenchConfig, BenchReport};
use muse_core::data::eval::gates_to_csv;
use muse_core::data::{load_parallel, write_parallel};
use muse_core::{
    average_checkpoints, beam_search, bucketed_eval, build_vocab, encode, encode_line,
    gate_weight_report, generate_task, greedy_decode, BeamConfig, Checkpoint, Hypothesis,
    ModelConfig, ModelParams, ModelScorer, ParamStore, Trainer, Vocab,
};

use crate::config::RunConfig;

/// Training corpus plus the held-out split, as raw text pairs.
struct CorpusBundle {
    train: Vec<(String, String)>,
    eval: Vec<(String, String)>,
}

fn load_corpus(cfg: &RunConfig) -> Result<CorpusBundle> {
    match cfg.train_task()? {
        Some(train_spec) => {
            let eval_spec = cfg.eval_task()?.expect("synthetic task has an eval split");
            Ok(CorpusBundle {
                train: generate_task(&train_spec).map_err(|e| anyhow!("{e}"))?,
                eval: generate_task(&eval_spec).map_err(|e| anyhow!("{e}"))?,
            })
        }
        None => {
            let src = cfg
                .file("src_file")
                .ok_or_else(|| anyhow!("task=files needs src_file in the config"))?;
            let tgt = cfg
                .file("tgt_file")
                .ok_or_else(|| anyhow!("task=files needs tgt_file in the config"))?;
            let train = load_parallel(&src, &tgt).map_err(|e| anyhow!("{e}"))?;
            let eval = match (cfg.file("eval_src_file"), cfg.file("eval_tgt_file")) {
                (Some(es), Some(et)) => load_parallel(&es, &et).map_err(|e| anyhow!("{e}"))?,
                _ => Vec::new(),
            };
            Ok(CorpusBundle { train, eval })
        }
    }
}

fn joint_vocab(cfg: &RunConfig, bundle: &CorpusBundle) -> Result<Vocab> {
    let min_freq = cfg.min_freq()?;
    let lines = bundle
        .train
        .iter()
        .flat_map(|(s, t)| [s.as_str(), t.as_str()]);
    Ok(build_vocab(lines, min_freq))
}

fn encode_pairs(pairs: &[(String, String)], vocab: &Vocab) -> Vec<(Vec<usize>, Vec<usize>)> {
    pairs
        .iter()
        .map(|(s, t)| (encode_line(s, vocab), encode_line(t, vocab)))
        .collect()
}

/// Latest-first checkpoint files under `out/checkpoints`.
fn checkpoint_files(out_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = out_dir.join("checkpoints");
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("no checkpoints under {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    if files.is_empty() {
        bail!("no checkpoint files under {}", dir.display());
    }
    files.sort();
    files.reverse();
    Ok(files)
}

/// Load a checkpoint: an explicit file, or the latest under the output
/// directory, or the average of the last `average` ones.
fn resolve_checkpoint(
    cfg: &RunConfig,
    explicit: Option<&Path>,
    average: Option<usize>,
) -> Result<Checkpoint> {
    if let Some(path) = explicit {
        return Checkpoint::load(path).map_err(|e| anyhow!("{e}"));
    }
    let out_dir = cfg.require_out_dir()?;
    let files = checkpoint_files(out_dir)?;
    match average {
        None | Some(0) | Some(1) => {
            Checkpoint::load(&files[0]).map_err(|e| anyhow!("{e}"))
        }
        Some(n) => {
            let take: Vec<Checkpoint> = files
                .iter()
                .take(n)
                .map(|p| Checkpoint::load(p).map_err(|e| anyhow!("{e}")))
                .collect::<Result<_>>()?;
            eprintln!("averaging the last {} checkpoints", take.len());
            average_checkpoints(&take).map_err(|e| anyhow!("{e}"))
        }
    }
}

/// Build the model and restore a checkpoint into it, enforcing the config
/// fingerprint.
fn restore_model(
    cfg: &RunConfig,
    vocab: &Vocab,
    explicit: Option<&Path>,
    average: Option<usize>,
) -> Result<(ParamStore, ModelParams, ModelConfig)> {
    let model_cfg = cfg.model_config(vocab.size())?;
    let ckpt = resolve_checkpoint(cfg, explicit, average)?;
    if ckpt.fingerprint != model_cfg.fingerprint() {
        bail!(
            "integrity error: checkpoint fingerprint {} does not match the current \
             model configuration {}",
            ckpt.fingerprint,
            model_cfg.fingerprint()
        );
    }
    let (mut store, params) = ModelParams::init(&model_cfg, cfg.seed).map_err(|e| anyhow!("{e}"))?;
    ckpt.apply_to(&mut store).map_err(|e| anyhow!("{e}"))?;
    Ok((store, params, model_cfg))
}

/// Translate one raw source-id sequence (no specials) into raw target ids.
fn translate_ids(
    store: &ParamStore,
    params: &ModelParams,
    model_cfg: &ModelConfig,
    beam: &BeamConfig,
    src: &[usize],
) -> muse_core::Result<Vec<usize>> {
    let mut framed = src.to_vec();
    framed.push(muse_core::EOS);
    framed.truncate(model_cfg.max_len);
    let state = encode(&framed, store, params, model_cfg)?;
    let scorer = ModelScorer { store, params, cfg: model_cfg, state: &state };
    let hyp: Hypothesis = if beam.beam_size == 1 {
        greedy_decode(&scorer, beam.max_len)?
    } else {
        beam_search(&scorer, beam)?
    };
    Ok(hyp.surface_ids().to_vec())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out_dir = cfg.require_out_dir()?.to_path_buf();
    fs::create_dir_all(&out_dir)?;
    let bundle = load_corpus(cfg)?;
    let vocab = joint_vocab(cfg, &bundle)?;
    let corpus = encode_pairs(&bundle.train, &vocab);
    let model_cfg = cfg.model_config(vocab.size())?;
    let train_cfg = cfg.train_config()?;

    fs::write(out_dir.join("config.resolved"), cfg.resolved_text())?;
    // keep the generated split alongside the artifacts for reference
    if cfg.task_kind()?.is_some() {
        write_parallel(
            &bundle.eval,
            &out_dir.join("eval.src"),
            &out_dir.join("eval.tgt"),
        )
        .map_err(|e| anyhow!("{e}"))?;
    }

    let (store, params) =
        ModelParams::init(&model_cfg, cfg.seed).map_err(|e| anyhow!("{e}"))?;
    println!(
        "training: {} pairs, vocab {}, {} parameters",
        corpus.len(),
        vocab.size(),
        store.total_scalars()
    );
    let mut trainer = Trainer::new(store, params, model_cfg, train_cfg, &corpus)
        .map_err(|e| anyhow!("{e}"))?;
    let saved = trainer
        .run_with_progress(&out_dir, |m| {
            if m.step % 50 == 0 {
                println!(
                    "step {:>6}  loss {:.4}  lr {:.2e}  {:.0} tok/s",
                    m.step, m.loss, m.lr, m.tokens_per_sec
                );
            }
        })
        .map_err(|e| anyhow!("{e}"))?;
    println!(
        "done: {} optimizer steps, {} checkpoints, metrics in {}",
        trainer.step,
        saved.len(),
        out_dir.join("metrics.csv").display()
    );
    Ok(())
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    average: Option<usize>,
) -> Result<()> {
    let out_dir = cfg.require_out_dir()?.to_path_buf();
    let bundle = load_corpus(cfg)?;
    if bundle.eval.is_empty() {
        bail!("evaluation corpus is empty");
    }
    let vocab = joint_vocab(cfg, &bundle)?;
    let (store, params, model_cfg) = restore_model(cfg, &vocab, checkpoint, average)?;
    let beam = cfg.beam_config()?;
    let pairs = encode_pairs(&bundle.eval, &vocab);
    let boundaries = cfg.buckets()?;
    let smooth = cfg.smooth_bleu()?;

    let mut report = bucketed_eval(
        |src| translate_ids(&store, &params, &model_cfg, &beam, src),
        &pairs,
        &boundaries,
        smooth,
    )
    .map_err(|e| anyhow!("{e}"))?;
    if model_cfg.mode == muse_core::BlockMode::Muse && model_cfg.kernel_sizes.len() >= 2 {
        report.gates =
            gate_weight_report(&store, &params, model_cfg.mode).map_err(|e| anyhow!("{e}"))?;
    }

    let csv_path = out_dir.join("eval_report.csv");
    fs::write(&csv_path, report.to_csv())?;
    if !report.gates.is_empty() {
        fs::write(out_dir.join("gates.csv"), gates_to_csv(&report.gates))?;
    }
    println!("bucket_lo,bucket_hi,count,token_acc,exact_match,bleu");
    for b in &report.buckets {
        let hi = if b.hi == usize::MAX { "inf".into() } else { b.hi.to_string() };
        println!(
            "{},{},{},{:.4},{:.4},{:.2}",
            b.lo, hi, b.count, b.token_acc, b.exact_match, b.bleu
        );
    }
    println!(
        "overall token accuracy {:.4} over {} pairs; report in {}",
        report.overall_token_acc(),
        report.total_count(),
        csv_path.display()
    );
    Ok(())
}

pub fn cmd_generate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    average: Option<usize>,
    input: Option<&Path>,
    output: Option<&Path>,
) -> Result<()> {
    let bundle = load_corpus(cfg)?;
    let vocab = joint_vocab(cfg, &bundle)?;
    let (store, params, model_cfg) = restore_model(cfg, &vocab, checkpoint, average)?;
    let beam = cfg.beam_config()?;

    let lines: Vec<String> = match input {
        Some(path) => fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?
            .lines()
            .map(|l| l.to_string())
            .collect(),
        None => std::io::stdin()
            .lock()
            .lines()
            .collect::<std::io::Result<_>>()
            .context("reading standard input")?,
    };

    let mut sink: Box<dyn Write> = match output {
        Some(path) => Box::new(fs::File::create(path)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for line in &lines {
        let src = encode_line(line, &vocab);
        let out = translate_ids(&store, &params, &model_cfg, &beam, &src)
            .map_err(|e| anyhow!("{e}"))?;
        writeln!(sink, "{}", muse_core::decode_ids(&out, &vocab))?;
    }
    Ok(())
}

pub fn cmd_bench(
    cfg: &RunConfig,
    profile: &str,
    decode_len: Option<usize>,
    reps: Option<usize>,
    warmup: Option<usize>,
    inputs: Option<usize>,
) -> Result<()> {
    let mut bench_cfg = match profile {
        "simple" => BenchConfig::base_simple(),
        "conv" => BenchConfig::base_conv(),
        "custom" => BenchConfig {
            model: cfg.model_config(256)?,
            ..BenchConfig::base_simple()
        },
        other => bail!("unknown bench profile \"{other}\"; expected simple, conv, or custom"),
    };
    bench_cfg.seed = cfg.seed;
    if let Some(v) = decode_len {
        bench_cfg.decode_len = v;
    }
    if let Some(v) = reps {
        bench_cfg.reps = v;
    }
    if let Some(v) = warmup {
        bench_cfg.warmup = v;
    }
    if let Some(v) = inputs {
        bench_cfg.equivalence_inputs = v;
    }

    eprintln!(
        "bench profile {profile}: {} blocks, d={}, d_ff={}, batch 1, {} decode steps",
        bench_cfg.model.n_layers, bench_cfg.model.d, bench_cfg.model.d_ff, bench_cfg.decode_len
    );
    let report: BenchReport =
        muse_core::bench::run_speed_benchmark(&bench_cfg).map_err(|e| anyhow!("{e}"))?;
    print!("{}", report.to_csv());
    println!(
        "# equivalence: max |fused - unfused| = {:.3e} over {} inputs",
        report.equivalence_max_diff, report.inputs_checked
    );
    if let Some(out_dir) = cfg.out_dir.as_deref() {
        fs::create_dir_all(out_dir)?;
        fs::write(out_dir.join("bench.csv"), report.to_csv())?;
    }
    Ok(())
}

pub fn cmd_inspect_gates(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    average: Option<usize>,
) -> Result<()> {
    let out_dir = cfg.require_out_dir()?.to_path_buf();
    let bundle = load_corpus(cfg)?;
    let vocab = joint_vocab(cfg, &bundle)?;
    let (store, params, model_cfg) = restore_model(cfg, &vocab, checkpoint, average)?;
    let gates =
        gate_weight_report(&store, &params, model_cfg.mode).map_err(|e| anyhow!("{e}"))?;
    let csv = gates_to_csv(&gates);
    fs::write(out_dir.join("gates.csv"), &csv)?;
    print!("{csv}");
    for g in &gates {
        println!("# {}: small/large ratio {:.4}", g.layer, g.ratio);
    }
    Ok(())
}
