use std::io::{Read, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use exembed::bench::{profile, reports_to_csv, BenchMode};
use exembed::checkpoint;
use exembed::config::{AppConfig, RunManifest};
use exembed::corpus;
use exembed::error::{Error, Result};
use exembed::evaluation::{sweep_with_path, EvalContext, EvalMethod};
use exembed::extension::DownscaleScheme;
use exembed::inference::{precompute, save_store, Sampler, SessionState};
use exembed::model::{embedder_from_downstream, pretrain_downstream};
use exembed::training::{log_to_csv, train};

#[derive(Parser)]
#[command(
    name = "exembed",
    version,
    about = "Long-context extension for a small LM via compressed soft-input embeddings"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the downstream model on the synthetic corpus, then freeze it.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the embedder against a frozen base checkpoint.
    TrainEmbedder {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        base_ckpt: PathBuf,
        /// Resume from an existing embedder checkpoint instead of
        /// initializing from the base model's first layers.
        #[arg(long)]
        ex_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tail-perplexity evaluation over the configured grid.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        base_ckpt: PathBuf,
        #[arg(long)]
        ex_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// online: compress context on the fly; offline: read compressed
        /// rows back through a precomputed embedding store.
        #[arg(long, default_value = "online")]
        mode: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Scaling-factor sweep:ters the full context-length x k grid for the
    /// truncate and compressed-context methods.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        base_ckpt: PathBuf,
        #[arg(long)]
        ex_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Efficiency profile: peak rows, FLOPs, wall time per mode and length.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        base_ckpt: PathBuf,
        #[arg(long)]
        ex_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// online | offline | full_attention_oracle | all
        #[arg(long, default_value = "all")]
        mode: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Precompute an embedding store for a document (byte file).
    Compress {
        #[arg(long)]
        doc: PathBuf,
        #[arg(long)]
        ex_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Chunk length; defaults to the model window.
        #[arg(long, short = 'L')]
        chunk_len: Option<usize>,
        /// Store pre-downscaled rows at this factor instead of full states.
        #[arg(long)]
        k: Option<usize>,
        /// strided | random | terminal
        #[arg(long, default_value = "strided")]
        scheme: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Read tokens from stdin, then generate to stdout.
    ServeStream {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        base_ckpt: PathBuf,
        #[arg(long)]
        ex_ckpt: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        gen_tokens: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<AppConfig> {
    let mut cfg = match path {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn parse_scheme(s: &str) -> Result<DownscaleScheme> {
    match s {
        "strided" => Ok(DownscaleScheme::Strided),
        "random" => Ok(DownscaleScheme::Random),
        "terminal" => Ok(DownscaleScheme::Terminal),
        other => Err(Error::Config(format!("unknown scheme `{other}`"))),
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Pretrain { config, out, log, seed } => {
            let cfg = load_config(&config, seed)?;
            let mut manifest = RunManifest::begin("pretrain", cfg.pretrain.seed, &cfg);
            let docs = corpus::generate_tokens(&cfg.corpus, cfg.train_docs)?;
            let (params, records) = pretrain_downstream(&docs, &cfg.model, &cfg.pretrain)?;
            checkpoint::save(&out, &cfg.model, &params)?;
            manifest.record_output(&out);
            if let Some(log_path) = &log {
                std::fs::write(log_path, log_to_csv(&records, cfg.timing))?;
                manifest.record_output(log_path);
            }
            manifest.finish()?;
            let last = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "pretrained {} params, {} steps, final loss {last:.4} -> {}",
                params.total_values(),
                records.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::TrainEmbedder { config, base_ckpt, ex_ckpt, out, log, seed } => {
            let cfg = load_config(&config, seed)?;
            let mut manifest = RunManifest::begin("train-embedder", cfg.trainer.seed, &cfg);
            manifest.record_input(&base_ckpt)?;
            let (model_cfg, base) = checkpoint::load(&base_ckpt, "base", false)?;
            let ex_init = match &ex_ckpt {
                Some(p) => {
                    manifest.record_input(p)?;
                    let (_, mut ex) = checkpoint::load(p, "ex", true)?;
                    ex.set_trainable_all(true);
                    ex
                }
                None => embedder_from_downstream(&model_cfg, &base),
            };
            let docs = corpus::generate_tokens(&cfg.corpus, cfg.train_docs)?;
            let outcome = train(&docs, &base, ex_init, &model_cfg, &cfg.trainer, None)?;
            checkpoint::save(&out, &model_cfg, &outcome.params_ex)?;
            manifest.record_output(&out);
            if let Some(log_path) = &log {
                std::fs::write(log_path, log_to_csv(&outcome.log, cfg.timing))?;
                manifest.record_output(log_path);
            }
            manifest.finish()?;
            let last = outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "trained embedder for {} steps ({:?}), final loss {last:.4} -> {}",
                outcome.log.len(),
                cfg.trainer.objective,
                out.display()
            );
            Ok(())
        }
        Cmd::Eval { config, base_ckpt, ex_ckpt, out, mode, seed } => {
            let offline = match mode.as_str() {
                "online" => false,
                "offline" => true,
                other => return Err(Error::Config(format!("unknown mode `{other}`"))),
            };
            run_eval(config, base_ckpt, ex_ckpt, out, seed, false, offline)
        }
        Cmd::Sweep { config, base_ckpt, ex_ckpt, out, seed } => {
            run_eval(config, base_ckpt, ex_ckpt, out, seed, true, false)
        }
        Cmd::Bench { config, base_ckpt, ex_ckpt, out, mode, seed } => {
            let cfg = load_config(&config, seed)?;
            let mut manifest = RunManifest::begin("bench", cfg.corpus.seed, &cfg);
            manifest.record_input(&base_ckpt)?;
            manifest.record_input(&ex_ckpt)?;
            let (model_cfg, base) = checkpoint::load(&base_ckpt, "base", false)?;
            let (_, ex) = checkpoint::load(&ex_ckpt, "ex", false)?;
            let modes: Vec<BenchMode> = match mode.as_str() {
                "online" => vec![BenchMode::Online],
                "offline" => vec![BenchMode::Offline],
                "full_attention_oracle" => vec![BenchMode::FullAttentionOracle],
                "all" => vec![
                    BenchMode::Online,
                    BenchMode::Offline,
                    BenchMode::FullAttentionOracle,
                ],
                other => return Err(Error::Config(format!("unknown mode `{other}`"))),
            };
            let max_ctx = cfg.bench.context_lens.iter().copied().max().unwrap_or(0);
            let mut doc_spec = cfg.eval_corpus();
            doc_spec.doc_len = doc_spec.doc_len.max(max_ctx);
            let doc = &corpus::generate_tokens(&doc_spec, 1)?[0];
            let mut reports = Vec::new();
            for &len in &cfg.bench.context_lens {
                for &m in &modes {
                    reports.push(profile(m, len, doc, &base, &ex, &model_cfg, &cfg.bench)?);
                }
            }
            let mut csv = reports_to_csv(&reports);
            if !cfg.timing {
                csv = zero_timing_columns(&csv);
            }
            std::fs::write(&out, csv)?;
            manifest.record_output(&out);
            manifest.finish()?;
            println!("profiled {} configurations -> {}", reports.len(), out.display());
            Ok(())
        }
        Cmd::Compress { doc, ex_ckpt, out, chunk_len, k, scheme, seed } => {
            let scheme = parse_scheme(&scheme)?;
            let mut manifest =
                RunManifest::begin("compress", seed.unwrap_or(0), &AppConfig::default());
            manifest.record_input(&doc)?;
            manifest.record_input(&ex_ckpt)?;
            let (model_cfg, ex) = checkpoint::load(&ex_ckpt, "ex", false)?;
            let bytes = std::fs::read(&doc)?;
            let tokens = corpus::tokenize(&bytes);
            let chunk = chunk_len.unwrap_or(model_cfg.max_window);
            let doc_id = doc
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "doc".to_string());
            let full = precompute(&doc_id, &tokens, chunk, &ex, &model_cfg)?;
            let store = match k {
                Some(k) => {
                    use rand::SeedableRng;
                    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed.unwrap_or(0));
                    full.downscaled(k, scheme, &mut rng)?
                }
                None => full,
            };
            save_store(&out, &store)?;
            manifest.record_output(&out);
            manifest.finish()?;
            println!(
                "stored {} chunks ({} remainder tokens, k={}) -> {}",
                store.chunks.len(),
                store.remainder_tokens.len(),
                store.k.map(|(k, _)| k.to_string()).unwrap_or_else(|| "full".into()),
                out.display()
            );
            Ok(())
        }
        Cmd::ServeStream { config, base_ckpt, ex_ckpt, k, gen_tokens, temperature, seed } => {
            let cfg = load_config(&config, seed)?;
            let (model_cfg, base) = checkpoint::load(&base_ckpt, "base", false)?;
            let (_, ex) = checkpoint::load(&ex_ckpt, "ex", false)?;
            let inf = &cfg.inference;
            let k = k.unwrap_or(inf.k);
            let capacity = inf.capacity.unwrap_or(model_cfg.max_window);
            let session_len = inf.session_len.unwrap_or((capacity / 8).max(1));
            let mut session = SessionState::with_layout(capacity, session_len, k)?
                .with_scheme(inf.scheme, seed.unwrap_or(0));

            let mut input = Vec::new();
            std::io::stdin().read_to_end(&mut input)?;
            session.push_token(corpus::BOS, &ex, &model_cfg)?;
            for t in corpus::tokenize(&input) {
                session.push_token(t, &ex, &model_cfg)?;
            }

            let temp = temperature.or(inf.temperature);
            let mut sampler = match temp {
                Some(t) => Sampler::temperature(t, seed.unwrap_or(0)),
                None => Sampler::greedy(),
            };
            let n = gen_tokens.unwrap_or(inf.gen_tokens);
            let mut generated = Vec::with_capacity(n);
            for _ in 0..n {
                let tok = session.step(&base, &ex, &model_cfg, &mut sampler)?;
                if tok == corpus::EOS {
                    break;
                }
                generated.push(tok);
            }
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(&corpus::detokenize(&generated))?;
            lock.flush()?;
            eprintln!(
                "read {} bytes, generated {} tokens, {} condensations, peak rows {}",
                input.len(),
                generated.len(),
                session.condensations(),
                session.peak_rows()
            );
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_eval(
    config: Option<PathBuf>,
    base_ckpt: PathBuf,
    ex_ckpt: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    force_grid: bool,
    offline: bool,
) -> Result<()> {
    let cfg = load_config(&config, seed)?;
    let cmd = if force_grid { "sweep" } else { "eval" };
    let mut manifest = RunManifest::begin(cmd, cfg.corpus.seed, &cfg);
    manifest.record_input(&base_ckpt)?;
    manifest.record_input(&ex_ckpt)?;
    let (model_cfg, base) = checkpoint::load(&base_ckpt, "base", false)?;
    let (_, ex) = checkpoint::load(&ex_ckpt, "ex", false)?;

    let mut spec = cfg.eval.clone();
    if force_grid {
        spec.methods = vec![EvalMethod::Truncate, EvalMethod::ExtEmbedding];
    }
    let docs = corpus::generate_tokens(&cfg.eval_corpus(), spec.n_docs)?;
    let ectx = EvalContext { base: &base, ex: &ex, cfg: &model_cfg };
    let (result, skipped) = sweep_with_path(&ectx, &docs, &spec, cfg.timing, offline)?;
    std::fs::write(&out, result.to_csv())?;
    manifest.record_output(&out);
    manifest.finish()?;
    println!(
        "{} rows over {} documents ({} overflow combinations skipped) -> {}",
        result.rows.len(),
        spec.n_docs,
        skipped.len(),
        out.display()
    );
    for s in &skipped {
        println!("  skipped: {s}");
    }
    Ok(())
}

fn zero_timing_columns(csv: &str) -> String {
    let mut out = String::with_capacity(csv.len());
    for (i, line) in csv.lines().enumerate() {
        if i == 0 {
            out.push_str(line);
        } else {
            let cols: Vec<&str> = line.split(',').collect();
            // mode,context_len,peak_rows,flops,seconds,phase1_s,phase2_s
            out.push_str(&cols[..4].join(","));
            out.push_str(",0.000000,0.000000,0.000000");
        }
        out.push('\n');
    }
    out
}
