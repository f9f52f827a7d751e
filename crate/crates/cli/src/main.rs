//! `jointspace` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 verification failure.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use jointspace::adaptor::{read_adaptor, write_adaptor, AdaptorConfig, DEFAULT_LAYERS, DSAD_VERSION};
use jointspace::bench::{self, BenchConfig, BenchMode, BenchPath, OnlineInputs};
use jointspace::boxes::NmsConfig;
use jointspace::embedding_io::{read_embeddings, DSEM_VERSION};
use jointspace::featblob::{read_blob, DSFM_VERSION};
use jointspace::head::{reparameterize, FeatureMap, DEFAULT_LOGIT_BIAS, DEFAULT_LOGIT_SCALE};
use jointspace::pipeline::detect;
use jointspace::quant::{drift_report, QuantMode, QuantizedPack};
use jointspace::selfcheck::{adaptor_gradient_check, equivalence_check};
use jointspace::synth::{gen_class_embeddings, gen_corpus, read_corpus, write_corpus, Corpus, GeneratorMap, SynthSpec};
use jointspace::tensor::Matrix;
use jointspace::train::{append_train_log, train_adaptor, TrainConfig};
use jointspace::vocab::{build_vocab, load_pack, load_stored_pack, save_pack, save_stored_pack, StoredPack, DSPK_VERSION};
use jointspace::{AdaptorParams, Classifier, EmbeddingMatrix, VocabularyPack};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "jointspace", about = "Decoupled open-set detection head tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt class embeddings and fold them into a vocabulary pack.
    BuildVocab {
        #[arg(long)]
        embeddings: PathBuf,
        /// Adaptor checkpoint; the identity map when omitted.
        #[arg(long)]
        adaptor: Option<PathBuf>,
        /// JSON file with `logit_scale` and `logit_bias`, as written by train-adaptor.
        #[arg(long, conflicts_with_all = ["logit_scale", "logit_bias"])]
        logit_params: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_LOGIT_SCALE)]
        logit_scale: f32,
        #[arg(long, default_value_t = DEFAULT_LOGIT_BIAS, allow_hyphen_values = true)]
        logit_bias: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a feature blob against a pack and print one JSON line of detections per image.
    Detect {
        #[arg(long)]
        pack: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        score_thresh: f32,
        #[arg(long, default_value_t = 0.7)]
        iou_thresh: f32,
        #[arg(long, default_value_t = 300)]
        max_det: usize,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the adaptor (and α, β) on a synthetic corpus.
    TrainAdaptor {
        #[arg(long)]
        corpus: PathBuf,
        /// Starting checkpoint; a seeded random init when omitted.
        #[arg(long)]
        adaptor: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_LAYERS)]
        layers: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = jointspace::train::DEFAULT_LR)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Starting α and β as JSON; the defaults when omitted.
        #[arg(long)]
        logit_params: Option<PathBuf>,
        /// Where to write the trained α and β.
        #[arg(long)]
        logit_out: Option<PathBuf>,
        /// Keep α and β fixed.
        #[arg(long)]
        freeze_logit_params: bool,
        /// Training log CSV, appended to.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Time the offline (pack) or online (adaptor every frame) head.
    Bench {
        /// Float pack to time; a seeded random one when omitted.
        #[arg(long)]
        pack: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PathArg::Offline)]
        path: PathArg,
        /// Vocabulary size; with --pack, its first K classes.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Float)]
        mode: ModeArg,
        #[arg(long, default_value_t = bench::MIN_ITERATIONS)]
        iters: usize,
        #[arg(long, default_value_t = bench::MIN_WARMUP)]
        warmup: usize,
        /// Raw embeddings for the online path when --pack is given.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Adaptor for the online path when --pack is given.
        #[arg(long)]
        adaptor: Option<PathBuf>,
        /// Embedding width of the random pack.
        #[arg(long, default_value_t = 512)]
        dim: usize,
        #[arg(long, default_value_t = DEFAULT_LAYERS)]
        layers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quantize a float pack and optionally report score drift.
    Quantize {
        #[arg(long)]
        pack: PathBuf,
        #[arg(long, value_enum)]
        mode: QuantArg,
        #[arg(long)]
        out: PathBuf,
        /// Drift report CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Corpus whose features feed the drift report; random unit features when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 4096)]
        cells: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic scene corpus directory.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, value_enum, default_value_t = MapArg::Nonlinear)]
        map: MapArg,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 64)]
        scenes: usize,
        /// Index of the first scene; disjoint ranges give disjoint splits.
        #[arg(long, default_value_t = 0)]
        first: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the equivalence and gradient self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PathArg {
    Offline,
    Online,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Float,
    Int8,
    Int16,
}

#[derive(Clone, Copy, ValueEnum)]
enum QuantArg {
    Int8,
    Int16,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapArg {
    Linear,
    Nonlinear,
}

#[derive(Serialize, Deserialize)]
struct LogitParams {
    logit_scale: f32,
    logit_bias: f32,
}

#[derive(Serialize)]
struct DetectionDoc<'a> {
    #[serde(rename = "box")]
    bbox: [f32; 4],
    score: f32,
    label: &'a str,
    class_index: usize,
}

enum Failure {
    Usage(String),
    Data(String),
    Verify(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Verify(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Verify(m) => m,
        }
    }
}

impl From<jointspace::Error> for Failure {
    fn from(e: jointspace::Error) -> Self {
        match e {
            jointspace::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("io error on {}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn read_logit_params(path: &Path) -> CliResult<LogitParams> {
    let bytes = std::fs::read(path).map_err(|e| io_failure(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn version() -> String {
    format!(
        "{} (formats: DSEM v{DSEM_VERSION}, DSAD v{DSAD_VERSION}, DSPK v{DSPK_VERSION}, DSFM v{DSFM_VERSION})",
        env!("CARGO_PKG_VERSION")
    )
}

fn main() -> ExitCode {
    let matches = Cli::command().version(version()).try_get_matches();
    let cli = match matches.and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            eprintln!("ERROR(1): {}", text.trim_start_matches("error: ").trim_end());
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("ERROR({}): {}", f.code(), f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::BuildVocab {
            embeddings,
            adaptor,
            logit_params,
            logit_scale,
            logit_bias,
            out,
        } => {
            let e = read_embeddings(&embeddings)?;
            let adaptor = match adaptor {
                Some(p) => read_adaptor(p)?,
                None => AdaptorParams::identity(e.dims()),
            };
            let (scale, bias) = match logit_params {
                Some(p) => {
                    let lp = read_logit_params(&p)?;
                    (lp.logit_scale, lp.logit_bias)
                }
                None => (logit_scale, logit_bias),
            };
            let pack = build_vocab(&e, &adaptor, scale, bias)?;
            save_pack(&out, &pack)?;
            println!(
                "wrote {}: K={} D={} N={} alpha={} beta={}",
                out.display(),
                pack.num_classes(),
                pack.dim(),
                adaptor.num_layers(),
                scale,
                bias
            );
            Ok(())
        }
        Command::Detect {
            pack,
            features,
            score_thresh,
            iou_thresh,
            max_det,
            out,
        } => {
            let stored = load_stored_pack(&pack)?;
            let blob = read_blob(&features)?;
            let cfg = NmsConfig {
                iou_thresh,
                score_thresh,
                per_class: true,
                max_det,
            };
            let classifier: &dyn Classifier = match &stored {
                StoredPack::Float(p) => p,
                StoredPack::Quantized(q) => q,
            };
            let per_image = detect(classifier, &blob, &cfg)?;
            let labels = stored.labels();
            let mut text = String::new();
            for dets in &per_image {
                let docs: Vec<DetectionDoc> = dets
                    .iter()
                    .map(|d| DetectionDoc {
                        bbox: d.bbox.to_array(),
                        score: d.score,
                        label: &labels[d.class_index],
                        class_index: d.class_index,
                    })
                    .collect();
                text.push_str(&serde_json::to_string(&docs).map_err(|e| Failure::Data(e.to_string()))?);
                text.push('\n');
            }
            match out {
                Some(p) => write_text(&p, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::TrainAdaptor {
            corpus,
            adaptor,
            layers,
            out,
            steps,
            lr,
            batch,
            seed,
            logit_params,
            logit_out,
            freeze_logit_params,
            log,
        } => {
            let corpus = read_corpus(&corpus)?;
            let start = match adaptor {
                Some(p) => read_adaptor(p)?,
                None => AdaptorParams::init(&AdaptorConfig::new(layers, corpus.embeddings.dims(), seed)?)?,
            };
            let lp = match logit_params {
                Some(p) => read_logit_params(&p)?,
                None => LogitParams {
                    logit_scale: DEFAULT_LOGIT_SCALE,
                    logit_bias: DEFAULT_LOGIT_BIAS,
                },
            };
            let cfg = TrainConfig {
                steps,
                lr,
                batch,
                train_logit_params: !freeze_logit_params,
                ..TrainConfig::default()
            };
            let outcome = train_adaptor(&start, &corpus.embeddings, lp.logit_scale, lp.logit_bias, &corpus.scenes, &cfg)?;
            write_adaptor(&out, &outcome.adaptor)?;
            if let Some(p) = logit_out {
                let doc = LogitParams {
                    logit_scale: outcome.logit_scale,
                    logit_bias: outcome.logit_bias,
                };
                let json = serde_json::to_string(&doc).map_err(|e| Failure::Data(e.to_string()))?;
                write_text(&p, &format!("{json}\n"))?;
            }
            if let Some(p) = log {
                append_train_log(&p, &outcome.log)?;
            }
            if let Some(last) = outcome.log.last() {
                println!(
                    "step {}: loss_cls {:.6} acc {:.4} alpha {} beta {}",
                    last.step, last.loss_cls, last.acc, outcome.logit_scale, outcome.logit_bias
                );
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Bench {
            pack,
            path,
            k,
            threads,
            mode,
            iters,
            warmup,
            embeddings,
            adaptor,
            dim,
            layers,
            seed,
            out,
        } => {
            let path = match path {
                PathArg::Offline => BenchPath::Offline,
                PathArg::Online => BenchPath::Online,
            };
            let mode = match mode {
                ModeArg::Float => BenchMode::Float,
                ModeArg::Int8 => BenchMode::Int8,
                ModeArg::Int16 => BenchMode::Int16,
            };
            let (pack, raw, adaptor) = match pack {
                Some(p) => {
                    let full = load_pack(&p)?;
                    let k = k.unwrap_or(full.num_classes());
                    let pack = first_classes(&full, k)?;
                    let raw = embeddings.map(read_embeddings).transpose()?;
                    let raw = raw.map(|e| first_rows(&e, k)).transpose()?;
                    let adaptor = adaptor.map(read_adaptor).transpose()?;
                    if path == BenchPath::Online && (raw.is_none() || adaptor.is_none()) {
                        return Err(Failure::Usage("online bench of a pack file needs --embeddings and --adaptor".into()));
                    }
                    (pack, raw, adaptor)
                }
                None => {
                    let k = k.unwrap_or(80);
                    let raw = random_embeddings(seed, k, dim)?;
                    let adaptor = AdaptorParams::init(&AdaptorConfig::new(layers, dim, seed)?)?;
                    let pack = reparameterize(&adaptor.adapt(&raw)?, DEFAULT_LOGIT_SCALE, DEFAULT_LOGIT_BIAS)?;
                    (pack, Some(raw), Some(adaptor))
                }
            };
            let mut cfg = BenchConfig::single_level(path, threads, mode, seed);
            cfg.iterations = iters;
            cfg.warmup = warmup;
            let online = match (&raw, &adaptor) {
                (Some(embeddings), Some(adaptor)) => Some(OnlineInputs { embeddings, adaptor }),
                _ => None,
            };
            let result = bench::run_bench(&cfg, &pack, online)?;
            let results = [result];
            print!("{}", bench::report_table(&results));
            if let Some(p) = out {
                write_text(&p, &bench::report_csv(&results))?;
            }
            Ok(())
        }
        Command::Quantize {
            pack,
            mode,
            out,
            report,
            corpus,
            cells,
            seed,
        } => {
            let float = load_pack(&pack)?;
            let mode = match mode {
                QuantArg::Int8 => QuantMode::Int8,
                QuantArg::Int16 => QuantMode::Int16,
            };
            let q = QuantizedPack::from_pack(&float, mode);
            save_stored_pack(&out, &StoredPack::Quantized(q.clone()))?;
            println!("wrote {} ({})", out.display(), mode.name());
            if let Some(report) = report {
                let feats = match corpus {
                    Some(dir) => read_corpus(dir)?
                        .scenes
                        .into_iter()
                        .flat_map(|s| s.blob.features)
                        .collect(),
                    None => vec![random_unit_cells(seed, float.dim(), cells)?],
                };
                let r = drift_report(&float, &q, &feats)?;
                write_text(&report, &r.to_csv())?;
                println!(
                    "drift over {} cells: max {:.3e}, mean {:.3e}, top-1 agreement {:.4}",
                    r.cells, r.max_delta, r.mean_delta, r.top1_agreement
                );
            }
            Ok(())
        }
        Command::SynthGen {
            out,
            classes,
            dim,
            map,
            noise,
            scenes,
            first,
            seed,
        } => {
            let map = match map {
                MapArg::Linear => GeneratorMap::Linear,
                MapArg::Nonlinear => GeneratorMap::Nonlinear,
            };
            let spec = SynthSpec::small(classes, dim, map, noise, seed);
            let embeddings = gen_class_embeddings(&spec)?;
            let scenes = gen_corpus(&spec, &embeddings, first..first + scenes)?;
            let n = scenes.len();
            write_corpus(&out, &Corpus { spec, embeddings, scenes })?;
            println!("wrote {n} scenes to {}", out.display());
            Ok(())
        }
        Command::Verify { seed, cases } => {
            let checks = [equivalence_check(seed, cases)?, adaptor_gradient_check(seed, cases)?];
            let stdout = std::io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            let _ = writeln!(w, "{:<32} {:>6} {:>12} {:>10}  result", "check", "cases", "worst", "tol");
            for c in &checks {
                let _ = writeln!(
                    w,
                    "{:<32} {:>6} {:>12.3e} {:>10.0e}  {}",
                    c.name,
                    c.cases,
                    c.worst,
                    c.tol,
                    if c.passed { "PASS" } else { "FAIL" }
                );
            }
            let _ = w.flush();
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Verify(format!("failed: {}", failed.join(", "))))
            }
        }
    }
}

fn first_rows(e: &EmbeddingMatrix, k: usize) -> CliResult<EmbeddingMatrix> {
    if k > e.rows() {
        return Err(Failure::Usage(format!("--k {k} exceeds the {} available classes", e.rows())));
    }
    let m = Matrix::from_vec(k, e.dims(), e.matrix().as_slice()[..k * e.dims()].to_vec())?;
    let labels = e.labels().map(|l| l[..k].to_vec());
    Ok(EmbeddingMatrix::new(m, labels)?)
}

fn first_classes(pack: &VocabularyPack, k: usize) -> CliResult<VocabularyPack> {
    if k > pack.num_classes() {
        return Err(Failure::Usage(format!("--k {k} exceeds the {} classes in the pack", pack.num_classes())));
    }
    let d = pack.dim();
    let kernel = Matrix::from_vec(k, d, pack.kernel().as_slice()[..k * d].to_vec())?;
    Ok(VocabularyPack::new(
        pack.labels()[..k].to_vec(),
        kernel,
        pack.logit_scale(),
        pack.logit_bias(),
        pack.normalized(),
    )?)
}

fn random_embeddings(seed: u64, k: usize, d: usize) -> CliResult<EmbeddingMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..k * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Ok(EmbeddingMatrix::new(Matrix::from_vec(k, d, data)?, None)?)
}

fn random_unit_cells(seed: u64, d: usize, cells: usize) -> CliResult<FeatureMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fm = FeatureMap::zeros(0, 8, [1, d, 1, cells])?;
    for c in 0..cells {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        fm.set_cell(0, c, &v.iter().map(|x| (x / n) as f32).collect::<Vec<_>>());
    }
    Ok(fm)
}
