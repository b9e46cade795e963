use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xcache::bench::{self, LoadGeometry};
use xcache::cache::{self, bytes_per_token, build_cache, xc_digest, CacheBlob, CacheGeometry, CacheModel, CacheStrategy};
use xcache::checkpoint::{self, checkpoint_files};
use xcache::config::RunConfig;
use xcache::decoder::DecoderWeights;
use xcache::encoders::{EncoderKind, EncoderOutput};
use xcache::metrics::{self, EvalMode, EvalReport};
use xcache::pretrain;
use xcache::store::{self, CacheFileHeader, Dtype};
use xcache::synth::{self, QARecord};
use xcache::trainer::{StepStats, Trainer};
use xcache::vocab::Vocab;
use xcache::xc::XCModel;
use xcache_cli::manifest::RunManifest;

#[derive(Parser)]
#[command(name = "xcache", about = "Train, cache, evaluate and benchmark cross-attention context models")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Base preset: toy or reference.
    #[arg(long, global = true, default_value = "toy")]
    preset: String,
    /// `key = value` files applied in order on top of the preset.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    /// Single `key=value` overrides applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sets every seed of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/valid JSONL files.
    Data {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base decoder that later runs frozen.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train cross-attention layers (and the small encoder) on a frozen decoder.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// JSONL records; generated from the configuration when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Base decoder directory; the bundled toy decoder when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this global step instead of `train.total_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a trained model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSONL records; the validation split of the configuration when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// with-context, no-context or both.
        #[arg(long, default_value = "both")]
        mode: String,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Read XC encodings from `--cache-dir` instead of encoding.
        #[arg(long)]
        use_cache: bool,
    },
    #[command(subcommand)]
    Cache(CacheCommand),
    /// Time cache file loading per strategy and context length.
    BenchLoad {
        /// Directory of `{strategy}_{T}.xcc` files; written first when empty.
        #[arg(long)]
        blob_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_LENGTHS)]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 10)]
        discard: usize,
        #[arg(long, default_value_t = 32)]
        layers: usize,
        #[arg(long, default_value_t = 1024)]
        hidden: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value = "f16")]
        dtype: String,
    },
    /// Count attention multiply-accumulates with and without a context cache.
    BenchAttn {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024, 2048, 4096])]
        lengths: Vec<usize>,
        /// Query plus answer tokens.
        #[arg(long, default_value_t = 32)]
        new_tokens: usize,
    },
    /// Needle-position sensitivity and cache-size tables for a trained model.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Records per needle position.
        #[arg(long, default_value_t = 200)]
        records: usize,
    },
}

#[derive(Subcommand)]
enum CacheCommand {
    /// Build one cache file per record.
    Build {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// kv, jitkv or xc.
        #[arg(long, default_value = "xc")]
        strategy: String,
        #[arg(long, default_value = "f32")]
        dtype: String,
    },
    /// Print the header of a cache file and verify its checksum.
    Inspect { file: PathBuf },
    /// Bytes per context token for each strategy at the configured geometry.
    Sizes {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "f16")]
        dtype: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { xcache_cli::EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(xcache_cli::exit_code(&e) as u8)
        }
    }
}

fn resolve_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(&g.preset)?;
    for path in &g.config {
        cfg.apply_file(path)?;
    }
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| xcache::Error::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.data.seed = seed;
        cfg.pretrain.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Data { out } => cmd_data(&cfg, &out),
        Command::Pretrain { out } => cmd_pretrain(&cfg, &out),
        Command::Train {
            out,
            data,
            base,
            resume,
            steps,
        } => cmd_train(&cfg, &out, data.as_deref(), base.as_deref(), resume.as_deref(), steps),
        Command::Eval {
            model,
            out,
            data,
            mode,
            cache_dir,
            use_cache,
        } => cmd_eval(&cfg, &model, &out, data.as_deref(), &mode, cache_dir.as_deref(), use_cache),
        Command::Cache(CacheCommand::Build {
            model,
            out,
            data,
            strategy,
            dtype,
        }) => cmd_cache_build(&cfg, &model, &out, data.as_deref(), &strategy, &dtype),
        Command::Cache(CacheCommand::Inspect { file }) => cmd_cache_inspect(&file),
        Command::Cache(CacheCommand::Sizes { out, dtype }) => cmd_cache_sizes(&cfg, out.as_deref(), &dtype),
        Command::BenchLoad {
            blob_dir,
            out,
            lengths,
            reps,
            discard,
            layers,
            hidden,
            batch,
            dtype,
        } => {
            let g = LoadGeometry {
                n_layers: layers,
                hidden,
                batch,
                dtype: dtype.parse()?,
            };
            cmd_bench_load(&cfg, &blob_dir, &out, &lengths, reps, discard, &g)
        }
        Command::BenchAttn {
            out,
            lengths,
            new_tokens,
        } => cmd_bench_attn(&cfg, &out, &lengths, new_tokens),
        Command::Report { model, out, records } => cmd_report(&cfg, &model, &out, records),
    }
}

fn vocab() -> Vocab {
    Vocab::default()
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_out(manifest: &mut RunManifest, path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    manifest.output(path)
}

fn manifest(name: &str, cfg: &RunConfig) -> Result<RunManifest> {
    Ok(RunManifest::new(name, cfg.to_kv()?, cfg.seed))
}

/// Records from `data`, or the configured synthetic split.
fn load_records(cfg: &RunConfig, data: Option<&Path>, m: &mut RunManifest, valid: bool) -> Result<Vec<QARecord>> {
    match data {
        Some(p) => {
            m.input(p)?;
            Ok(synth::read_jsonl(p, &vocab())?)
        }
        None => {
            let s = synth::split(synth::generate(&cfg.data)?, cfg.valid_fraction, cfg.seed)?;
            Ok(if valid { s.valid } else { s.train })
        }
    }
}

fn cmd_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    mkdir(out)?;
    let mut m = manifest("data", cfg)?;
    let s = synth::split(synth::generate(&cfg.data)?, cfg.valid_fraction, cfg.seed)?;
    for (name, recs) in [("train.jsonl", &s.train), ("valid.jsonl", &s.valid)] {
        let path = out.join(name);
        synth::write_jsonl(recs, &vocab(), &path)?;
        m.output(&path)?;
    }
    println!("{} train, {} valid records in {}", s.train.len(), s.valid.len(), out.display());
    m.finish(out)?;
    Ok(())
}

fn log_csv(rows: &[StepStats]) -> String {
    let mut out = format!("{}\n", StepStats::CSV_HEADER);
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    mkdir(out)?;
    let mut m = manifest("pretrain", cfg)?;
    let mut w = pretrain::init_decoder(&cfg.decoder, &cfg.pretrain)?;
    let mut log = Vec::new();
    pretrain::pretrain_decoder(&mut w, &cfg.decoder, &vocab(), &cfg.pretrain, |s| {
        if s.step % 100 == 0 {
            eprintln!("step {:>6}  loss {:.4}  lr {:.2e}", s.step, s.loss, s.lr);
        }
        log.push(s.clone());
    })?;
    checkpoint::save_decoder(out, &cfg.decoder, &w)?;
    for p in checkpoint_files(out) {
        m.output(&p)?;
    }
    write_out(&mut m, &out.join("pretrain_log.csv"), &log_csv(&log))?;
    m.finish(out)?;
    Ok(())
}

fn base_decoder(cfg: &RunConfig, base: Option<&Path>, m: &mut RunManifest) -> Result<DecoderWeights> {
    let (dcfg, w) = match base {
        Some(dir) => {
            for p in checkpoint_files(dir) {
                m.input(&p)?;
            }
            checkpoint::load_decoder(dir)?
        }
        None => pretrain::toy_base()?,
    };
    if dcfg != cfg.decoder {
        return Err(xcache::Error::Config(
            "decoder.* settings differ from the base decoder; run `xcache pretrain` and pass --base".into(),
        )
        .into());
    }
    Ok(w)
}

fn new_model(cfg: &RunConfig, decoder: DecoderWeights) -> Result<XCModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(XCModel::new(
        cfg.decoder.clone(),
        decoder,
        cfg.xc.clone(),
        Some(cfg.bidir.clone()),
        &mut rng,
    )?)
}

fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    data: Option<&Path>,
    base: Option<&Path>,
    resume: Option<&Path>,
    steps: Option<usize>,
) -> Result<()> {
    mkdir(out)?;
    let mut m = manifest("train", cfg)?;
    let records = load_records(cfg, data, &mut m, false)?;
    let (mut model, mut trainer, mut log) = match resume {
        Some(dir) => {
            for p in checkpoint_files(dir) {
                m.input(&p)?;
            }
            let ck = checkpoint::load_checkpoint(dir)?;
            let tr = ck
                .trainer
                .ok_or_else(|| anyhow!("{} holds no optimizer state", dir.display()))?;
            let log_path = dir.join("train_log.csv");
            let log = read_log(&log_path)?;
            (ck.model, tr, log)
        }
        None => {
            let model = new_model(cfg, base_decoder(cfg, base, &mut m)?)?;
            let tr = Trainer::new(&model, cfg.train.clone())?;
            (model, tr, Vec::new())
        }
    };
    let encodings = match model.encoder_kind() {
        EncoderKind::DecoderAsEncoder => Some(
            records
                .iter()
                .map(|r| Ok(model.encode_contexts(&r.contexts)?.states))
                .collect::<Result<Vec<_>>>()?,
        ),
        EncoderKind::SmallBidirectional => None,
    };
    let until = steps.unwrap_or(trainer.cfg.total_steps);
    trainer.run(&mut model, &records, encodings.as_deref(), until, |s| {
        if s.step % 50 == 0 {
            eprintln!("step {:>6}  {:<6}  loss {:.4}  lr {:.2e}", s.step, s.task, s.loss, s.lr);
        }
        log.push(s.clone());
        Ok(())
    })?;
    checkpoint::save_checkpoint(out, &model, Some(&trainer))?;
    for p in checkpoint_files(out) {
        m.output(&p)?;
    }
    write_out(&mut m, &out.join("train_log.csv"), &log_csv(&log))?;
    write_out(&mut m, &out.join("config.kv"), &cfg.to_kv()?)?;
    if let Some(last) = log.last() {
        println!("step {}  loss {:.4}", last.step, last.loss);
    }
    m.finish(out)?;
    Ok(())
}

fn read_log(path: &Path) -> Result<Vec<StepStats>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || xcache::Error::Parse {
                line: i + 2,
                msg: format!("bad log row {line:?}"),
            };
            if f.len() != 5 {
                return Err(bad().into());
            }
            Ok(StepStats {
                step: f[0].parse().map_err(|_| bad())?,
                task: f[1].to_string(),
                loss: f[2].parse().map_err(|_| bad())?,
                lr: f[3].parse().map_err(|_| bad())?,
                grad_norm: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn load_model(dir: &Path, m: &mut RunManifest) -> Result<XCModel> {
    for p in checkpoint_files(dir) {
        m.input(&p)?;
    }
    Ok(checkpoint::load_checkpoint(dir)?.model)
}

fn modes(mode: &str) -> Result<Vec<EvalMode>> {
    if mode == "both" {
        return Ok(vec![EvalMode::WithContext, EvalMode::NoContext]);
    }
    Ok(vec![mode.parse()?])
}

fn record_blob_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("rec_{i:06}.xcc"))
}

fn cached_encodings(model: &XCModel, dir: &Path, n: usize, m: &mut RunManifest) -> Result<Vec<EncoderOutput>> {
    if !dir.is_dir() {
        return Err(xcache::Error::Config(format!("cache directory {} does not exist", dir.display())).into());
    }
    let digest = xc_digest(model);
    (0..n)
        .map(|i| {
            let path = record_blob_path(dir, i);
            m.input(&path)?;
            match CacheBlob::load(&path)? {
                CacheBlob::Xc(b) if b.meta.digest == digest => Ok(EncoderOutput {
                    states: b.states,
                    kind: model.encoder_kind(),
                }),
                CacheBlob::Xc(_) => Err(xcache::Error::Cache(format!("{} was built by another model", path.display())).into()),
                other => Err(xcache::Error::Cache(format!(
                    "{} holds a {} cache; evaluation reads XC caches",
                    path.display(),
                    other.strategy()
                ))
                .into()),
            }
        })
        .collect()
}

fn cmd_eval(
    cfg: &RunConfig,
    model_dir: &Path,
    out: &Path,
    data: Option<&Path>,
    mode: &str,
    cache_dir: Option<&Path>,
    use_cache: bool,
) -> Result<()> {
    let modes = modes(mode)?;
    let mut m = manifest("eval", cfg)?;
    let model = load_model(model_dir, &mut m)?;
    let records = load_records(cfg, data, &mut m, true)?;
    let encodings = match (use_cache, cache_dir) {
        (true, Some(dir)) => Some(cached_encodings(&model, dir, records.len(), &mut m)?),
        (true, None) => return Err(xcache::Error::Config("--use-cache needs --cache-dir".into()).into()),
        (false, _) => None,
    };
    mkdir(out)?;
    let max_new = records.iter().flat_map(|r| r.answers.iter().map(Vec::len)).max().unwrap_or(1) + 1;
    let name = data
        .and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "synthetic".into());
    let mut report = EvalReport::default();
    for mode in modes {
        let preds = metrics::predict(&model, &records, mode, encodings.as_deref(), max_new)?;
        report.rows.push(metrics::score(&name, mode, &preds, &records)?);
    }
    print!("{}", report.to_table());
    write_out(&mut m, &out.join("eval.csv"), &report.to_csv())?;
    write_out(&mut m, &out.join("eval.txt"), &report.to_table())?;
    m.finish(out)?;
    Ok(())
}

fn cmd_cache_build(
    cfg: &RunConfig,
    model_dir: &Path,
    out: &Path,
    data: Option<&Path>,
    strategy: &str,
    dtype: &str,
) -> Result<()> {
    let strategy: CacheStrategy = strategy.parse()?;
    let dtype: Dtype = dtype.parse()?;
    let mut m = manifest("cache build", cfg)?;
    let model = load_model(model_dir, &mut m)?;
    let records = load_records(cfg, data, &mut m, true)?;
    mkdir(out)?;
    let cm = match strategy {
        CacheStrategy::Xc => CacheModel::Xc(&model),
        _ => CacheModel::Decoder(&model.decoder, &model.decoder_cfg),
    };
    let mut tokens = 0usize;
    let mut bytes = 0u64;
    for (i, r) in records.iter().enumerate() {
        let blob = match strategy {
            CacheStrategy::Xc => cache::build_xc_cache(&model, &r.contexts)?,
            _ => build_cache(cm, &r.joined_context(), strategy)?,
        };
        let path = record_blob_path(out, i);
        bytes += blob.save(&path, dtype)?;
        tokens += r.context_tokens();
        m.output(&path)?;
    }
    let g = cm.geometry();
    let per_token = bytes_per_token(&g, strategy, dtype.size());
    let table = format!(
        "strategy,records,context_tokens,file_bytes,bytes_per_token\n{strategy},{},{tokens},{bytes},{per_token}\n",
        records.len()
    );
    print!("{table}");
    write_out(&mut m, &out.join("sizes.csv"), &table)?;
    m.finish(out)?;
    Ok(())
}

fn cmd_cache_inspect(file: &Path) -> Result<()> {
    let bytes = store::read_file(file)?;
    let (h, _) = CacheFileHeader::decode(&bytes)?;
    println!("file       {}", file.display());
    println!("version    {}", h.version);
    println!("kind       {}", h.kind.label());
    println!("dtype      {:?}", h.dtype);
    println!("dims       {:?}", h.dims);
    println!("digest     {}", h.digest.iter().map(|b| format!("{b:02x}")).collect::<String>());
    println!("payload    {} bytes", h.payload_len);
    store::decode_container(&bytes)?;
    println!("checksum   ok");
    Ok(())
}

/// Rows of the bytes-per-token table: label, strategy, geometry.
fn size_rows(cfg: &RunConfig) -> Vec<(String, CacheStrategy, CacheGeometry)> {
    let g = CacheGeometry::of_decoder(&cfg.decoder);
    vec![
        ("KV".into(), CacheStrategy::Kv, g),
        ("JITKV".into(), CacheStrategy::JitKv, g),
        (format!("XC (d_enc={})", g.d_enc), CacheStrategy::Xc, g),
        (
            format!("XC (d_enc={})", cfg.bidir.d_enc),
            CacheStrategy::Xc,
            CacheGeometry {
                d_enc: cfg.bidir.d_enc,
                ..g
            },
        ),
    ]
}

fn sizes_table(cfg: &RunConfig, dtype: Dtype) -> (String, String) {
    let mut csv = String::from("strategy,d_enc,bytes_per_token,kib_per_token\n");
    let mut table = format!("{:<18}  {:>15}  {:>8}\n", "strategy", "bytes/token", "kB");
    for (label, s, g) in size_rows(cfg) {
        let b = bytes_per_token(&g, s, dtype.size());
        csv.push_str(&format!("{s},{},{b},{}\n", g.d_enc, b as f64 / 1024.0));
        table.push_str(&format!("{label:<18}  {b:>15}  {:>8}\n", b as f64 / 1024.0));
    }
    (csv, table)
}

fn cmd_cache_sizes(cfg: &RunConfig, out: Option<&Path>, dtype: &str) -> Result<()> {
    let dtype: Dtype = dtype.parse()?;
    let (csv, table) = sizes_table(cfg, dtype);
    print!("{table}");
    if let Some(dir) = out {
        mkdir(dir)?;
        let mut m = manifest("cache sizes", cfg)?;
        write_out(&mut m, &dir.join("cache_sizes.csv"), &csv)?;
        m.finish(dir)?;
    }
    Ok(())
}

fn cmd_bench_load(
    cfg: &RunConfig,
    blob_dir: &Path,
    out: &Path,
    lengths: &[usize],
    reps: usize,
    discard: usize,
    g: &LoadGeometry,
) -> Result<()> {
    if reps <= discard {
        return Err(xcache::Error::Config(format!("--reps {reps} must exceed --discard {discard}")).into());
    }
    let mut blobs = if blob_dir.is_dir() { bench::find_load_blobs(blob_dir)? } else { Vec::new() };
    if blobs.is_empty() {
        eprintln!("writing benchmark caches to {}", blob_dir.display());
        blobs = bench::write_load_blobs(blob_dir, g, lengths, cfg.seed)?;
    }
    let rows = bench::bench_load_table(&blobs, reps, discard)?;
    mkdir(out)?;
    let mut m = manifest("bench-load", cfg)?;
    print!("{}", bench::load_table(&rows));
    write_out(&mut m, &out.join("load_times.csv"), &bench::load_csv(&rows))?;
    write_out(&mut m, &out.join("load_times.txt"), &bench::load_table(&rows))?;
    m.finish(out)?;
    Ok(())
}

fn cmd_bench_attn(cfg: &RunConfig, out: &Path, lengths: &[usize], new_tokens: usize) -> Result<()> {
    if lengths.len() < 2 {
        bail!(xcache::Error::Config("--lengths needs at least two values".into()));
    }
    let dcfg = bench::counting_decoder(lengths.iter().max().copied().unwrap_or(0) + new_tokens);
    let rows = bench::attention_cost(&dcfg, lengths, new_tokens, cfg.seed)?;
    for r in &rows {
        if r.uncached_macs != r.uncached_expected || r.cached_macs != r.cached_expected {
            return Err(xcache::Error::Numeric(format!("counted MACs disagree with the closed form at T={}", r.t_ctx)).into());
        }
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.t_ctx as f64).collect();
    let un: Vec<f64> = rows.iter().map(|r| r.uncached_macs as f64).collect();
    let ca: Vec<f64> = rows.iter().map(|r| r.cached_macs as f64).collect();
    let (su, sc) = (bench::loglog_slope(&xs, &un)?, bench::loglog_slope(&xs, &ca)?);
    mkdir(out)?;
    let mut m = manifest("bench-attn", cfg)?;
    let mut csv = format!("{}\n", bench::AttnRow::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    let summary = format!("log-log slope uncached {su:.3}\nlog-log slope cached {sc:.3}\n");
    print!("{csv}{summary}");
    write_out(&mut m, &out.join("attn_macs.csv"), &csv)?;
    write_out(&mut m, &out.join("attn_slopes.txt"), &summary)?;
    m.finish(out)?;
    Ok(())
}

fn cmd_report(cfg: &RunConfig, model_dir: &Path, out: &Path, records: usize) -> Result<()> {
    let mut m = manifest("report", cfg)?;
    let model = load_model(model_dir, &mut m)?;
    mkdir(out)?;
    let base = synth::GenConfig {
        n_records: records,
        seed: cfg.seed.wrapping_add(1),
        ..cfg.data.clone()
    };
    let sens = metrics::sensitivity(&model, &base)?;
    let (sizes_csv, sizes_txt) = sizes_table(cfg, Dtype::F16);
    let text = format!("{}\n{}", sens.to_table(), sizes_txt);
    print!("{text}");
    write_out(&mut m, &out.join("sensitivity.csv"), &sens.to_csv())?;
    write_out(&mut m, &out.join("cache_sizes.csv"), &sizes_csv)?;
    write_out(&mut m, &out.join("report.txt"), &text)?;
    m.finish(out)?;
    Ok(())
}
