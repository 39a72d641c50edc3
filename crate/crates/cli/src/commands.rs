use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use refgen::balance::{split, stats_from_corpus, stats_from_instances, stats_from_records, DatasetStats};
use refgen::config::PipelineConfig;
use refgen::distractor::TaskInstance;
use refgen::eval::{
    chance_rate, evaluate, oracle_score_lines, EvalError, EvalReport, OracleScorer, RandomScorer, ScoreLine,
    Scorer, ScoresFileScorer, Setting, SubprocessScorer,
};
use refgen::expression::ExpressionRecord;
use refgen::jsonl::{read_jsonl, to_jsonl_string};
use refgen::mining::{
    mine_loss, read_embeddings_binary, read_embeddings_jsonl, write_embeddings_binary, MiningSampler,
    ModularEmbedding, Module,
};
use refgen::pipeline::{distract_all, generate_corpus, load_corpus_file, Resources, SCHEMA_VERSION};
use refgen::scene_graph::Corpus;
use refgen::synth::synthetic_corpus;

use crate::{
    Command, DistractArgs, EvalArgs, Failure, GenerateArgs, MineDemoArgs, OracleScoresArgs, RecordKind,
    SchemaCheckArgs, SplitArgs, StatsArgs, SynthArgs,
};

pub fn dispatch(command: Command, config: &PipelineConfig) -> Result<(), Failure> {
    match command {
        Command::Generate(a) => generate(a, config),
        Command::Distract(a) => distract(a, config),
        Command::Split(a) => split_cmd(a, config),
        Command::Stats(a) => stats(a, config),
        Command::Eval(a) => eval(a, config),
        Command::OracleScores(a) => oracle_scores(a),
        Command::MineDemo(a) => mine_demo(a, config),
        Command::SchemaCheck(a) => schema_check(a),
        Command::Synth(a) => synth(a, config),
    }
}

/// Prints the one-line machine-readable summary every command ends with.
fn summary(command: &str, mut fields: serde_json::Value) {
    if let Some(map) = fields.as_object_mut() {
        map.insert("schema_version".into(), json!(SCHEMA_VERSION));
        map.insert("command".into(), json!(command));
    }
    println!("{fields}");
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(Failure::data)?;
    }
    std::fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::data)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(Failure::data)?;
    text.push('\n');
    write_file(path, &text)
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(Failure::data)
}

fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    read_jsonl(open(path)?)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::data)
}

fn pick(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| Failure::config(anyhow!("no {what} given on the command line or in the config")))
}

fn resources(config: &PipelineConfig) -> Result<Resources, Failure> {
    Resources::load(config).map_err(Failure::config)
}

fn corpus_maybe_empty(path: &Path, resources: &Resources) -> Result<Corpus, Failure> {
    load_corpus_file(path, &resources.synonyms)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::data)
}

fn corpus(path: &Path, resources: &Resources) -> Result<Corpus, Failure> {
    let corpus = corpus_maybe_empty(path, resources)?;
    if corpus.is_empty() {
        return Err(Failure::empty(format!("{} holds no images", path.display())));
    }
    Ok(corpus)
}

fn generate(args: GenerateArgs, config: &PipelineConfig) -> Result<(), Failure> {
    let corpus_path = pick(args.corpus, &config.paths.corpus, "corpus")?;
    let out = pick(args.out, &config.paths.output_dir, "output directory")?;
    let resources = resources(config)?;
    // An empty corpus still writes its (empty) outputs before failing.
    let corpus = corpus_maybe_empty(&corpus_path, &resources)?;
    let (records, log) = generate_corpus(&corpus, &resources, config);
    write_file(&out.join("expressions.jsonl"), &to_jsonl_string(&records))?;
    write_json(&out.join("generation_log.json"), &log)?;
    summary("generate", json!({ "images": log.images, "records": log.records }));
    if corpus.is_empty() {
        return Err(Failure::empty(format!("{} holds no images", corpus_path.display())));
    }
    if records.is_empty() {
        return Err(Failure::empty("no expressions generated"));
    }
    Ok(())
}

fn distract(args: DistractArgs, config: &PipelineConfig) -> Result<(), Failure> {
    let corpus_path = pick(args.corpus, &config.paths.corpus, "corpus")?;
    let out = pick(args.out, &config.paths.output_dir, "output directory")?;
    let resources = resources(config)?;
    let corpus = corpus(&corpus_path, &resources)?;
    let records: Vec<ExpressionRecord> = read_records(&args.expressions)?;
    let (instances, log) = distract_all(&corpus, &records, config.distractor.per_type, &resources.lexicon);
    write_file(&out.join("instances.jsonl"), &to_jsonl_string(&instances))?;
    write_json(&out.join("distract_log.json"), &log)?;
    summary(
        "distract",
        json!({ "expressions": log.expressions, "instances": log.instances, "discarded": log.discarded }),
    );
    if instances.is_empty() {
        return Err(Failure::empty("no expression found a full distractor set"));
    }
    Ok(())
}

fn split_cmd(args: SplitArgs, config: &PipelineConfig) -> Result<(), Failure> {
    let out = pick(args.out, &config.paths.output_dir, "output directory")?;
    let instances: Vec<TaskInstance> = read_records(&args.instances)?;
    if instances.is_empty() {
        return Err(Failure::empty("no instances to split"));
    }
    let parts = split(instances, config.split, config.seed).map_err(Failure::config)?;
    write_file(&out.join("train.jsonl"), &to_jsonl_string(&parts.train))?;
    write_file(&out.join("val.jsonl"), &to_jsonl_string(&parts.val))?;
    write_file(&out.join("test.jsonl"), &to_jsonl_string(&parts.test))?;
    let fields = json!({
        "seed": config.seed,
        "train": parts.train.len(),
        "val": parts.val.len(),
        "test": parts.test.len(),
    });
    write_json(&out.join("split_summary.json"), &fields)?;
    summary("split", fields);
    Ok(())
}

fn stats(args: StatsArgs, config: &PipelineConfig) -> Result<(), Failure> {
    let top_k = args.top_k.unwrap_or(config.stats.top_k);
    let input = args.input;
    let result: Result<DatasetStats, _> = if let Some(p) = &input.instances {
        stats_from_instances(&read_records::<TaskInstance>(p)?, top_k)
    } else if let Some(p) = &input.expressions {
        stats_from_records(&read_records::<ExpressionRecord>(p)?, top_k)
    } else if let Some(p) = &input.corpus {
        stats_from_corpus(&corpus(p, &resources(config)?)?, top_k)
    } else {
        return Err(Failure::config(anyhow!("stats needs an input")));
    };
    let stats = result.map_err(|_| Failure::empty("no records to count"))?;
    eprint!("{stats}");
    if let Some(out) = &args.out {
        write_json(out, &stats)?;
    }
    summary("stats", json!({ "stats": stats }));
    Ok(())
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::EmptyInput => Failure::empty("no instances to evaluate"),
        other => Failure::data(other),
    }
}

fn eval(args: EvalArgs, config: &PipelineConfig) -> Result<(), Failure> {
    let settings: Vec<Setting> = if args.setting.eq_ignore_ascii_case("all") {
        Setting::ALL.to_vec()
    } else {
        vec![args.setting.parse().map_err(|e: String| Failure::config(anyhow!(e)))?]
    };
    let instances: Vec<TaskInstance> = read_records(&args.instances)?;
    let choice = args.scorer;
    let (name, scorer): (String, Box<dyn Scorer>) = if let Some(p) = &choice.scores {
        let scorer = ScoresFileScorer::from_reader(open(p)?).map_err(Failure::data)?;
        (format!("scores:{}", p.display()), Box::new(scorer))
    } else if choice.oracle {
        ("oracle".into(), Box::new(OracleScorer))
    } else if choice.random {
        (format!("random:{}", config.seed), Box::new(RandomScorer { seed: config.seed }))
    } else if let Some(cmd) = &choice.scorer_cmd {
        let scorer = SubprocessScorer::spawn(cmd, &args.scorer_args).map_err(Failure::config)?;
        (format!("command:{cmd}"), Box::new(scorer))
    } else {
        return Err(Failure::config(anyhow!("no scorer chosen")));
    };

    #[derive(Serialize)]
    struct SettingResult {
        #[serde(flatten)]
        report: EvalReport,
        chance_rate: f64,
    }
    let mut results = Vec::new();
    for setting in settings {
        let report = evaluate(&instances, setting, scorer.as_ref()).map_err(eval_failure)?;
        results.push(SettingResult {
            chance_rate: chance_rate(&instances, setting),
            report,
        });
    }
    let accuracies: BTreeMap<&str, f64> = results
        .iter()
        .map(|r| (r.report.setting.as_str(), r.report.accuracy()))
        .collect();
    if let Some(out) = &args.out {
        write_json(
            out,
            &json!({ "schema_version": SCHEMA_VERSION, "scorer": name, "instances": instances.len(), "results": results }),
        )?;
    }
    summary("eval", json!({ "scorer": name, "instances": instances.len(), "accuracy": accuracies }));
    Ok(())
}

fn oracle_scores(args: OracleScoresArgs) -> Result<(), Failure> {
    let instances: Vec<TaskInstance> = read_records(&args.instances)?;
    let lines: Vec<ScoreLine> = oracle_score_lines(&instances);
    write_file(&args.out, &to_jsonl_string(&lines))?;
    summary("oracle-scores", json!({ "instances": instances.len(), "lines": lines.len() }));
    if lines.is_empty() {
        return Err(Failure::empty("no candidate regions"));
    }
    Ok(())
}

const BINARY_MAGIC_PREFIX: &[u8] = b"RGEMB";

fn load_embeddings(path: &Path) -> Result<Vec<ModularEmbedding>, Failure> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::data)?;
    let parsed = if bytes.starts_with(BINARY_MAGIC_PREFIX) {
        read_embeddings_binary(bytes.as_slice())
    } else {
        read_embeddings_jsonl(bytes.as_slice())
    };
    parsed
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::data)
}

/// One line of the mining trace.
#[derive(Serialize)]
struct TraceLine {
    iteration: u64,
    epoch: u64,
    pair_id: String,
    negatives: BTreeMap<Module, String>,
    mine_loss: f64,
}

/// Walks the pairs in order for `iterations` steps. With no trained model
/// the demo scores pairs by the table's own similarities: the positive
/// scores 1 and each mined pair scores its cosine to the anchor.
fn mine_demo(args: MineDemoArgs, config: &PipelineConfig) -> Result<(), Failure> {
    let embeddings = load_embeddings(&args.embeddings)?;
    if embeddings.is_empty() {
        return Err(Failure::empty("no embeddings"));
    }
    if let Some(bin) = &args.write_binary {
        let mut bytes = Vec::new();
        write_embeddings_binary(&mut bytes, &embeddings).map_err(Failure::data)?;
        if let Some(dir) = bin.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(Failure::data)?;
        }
        std::fs::write(bin, bytes).map_err(Failure::data)?;
    }
    let sampler = MiningSampler::new(&embeddings, config.mining.refresh_interval).map_err(Failure::data)?;
    let anchors: Vec<usize> = {
        let table = sampler.current();
        (0..table.len()).filter(|&m| table.peer_count(m) > 0).collect()
    };
    if anchors.is_empty() {
        return Err(Failure::empty("no pair shares a category with another"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::new();
    let mut refreshes = 0;
    for iteration in 0..args.iterations {
        if sampler.step(iteration, &embeddings).map_err(Failure::data)? {
            refreshes += 1;
        }
        let table = sampler.current();
        let m = anchors[(iteration as usize) % anchors.len()];
        let pair_id = table.pair_id(m).to_string();
        let negatives = table.sample_negatives(&pair_id, &mut rng).map_err(Failure::data)?;
        let mut scores = BTreeMap::new();
        for (md, id) in &negatives {
            let n = table.index_of(id).expect("sampled ids exist");
            let s = table.score(m, n, *md);
            scores.insert(*md, (s, s));
        }
        let loss = mine_loss(1.0, &scores, config.mining.margin).map_err(Failure::data)?;
        trace.push(TraceLine {
            iteration,
            epoch: table.epoch(),
            pair_id,
            negatives,
            mine_loss: loss,
        });
    }
    if let Some(out) = &args.out {
        write_file(out, &to_jsonl_string(&trace))?;
    }
    let mean = trace.iter().map(|t| t.mine_loss).sum::<f64>() / trace.len().max(1) as f64;
    summary(
        "mine-demo",
        json!({
            "pairs": embeddings.len(),
            "iterations": args.iterations,
            "refreshes": refreshes,
            "mean_mine_loss": mean,
        }),
    );
    Ok(())
}

fn check_lines<T: DeserializeOwned>(reader: impl BufRead) -> Result<(usize, Vec<serde_json::Value>), Failure> {
    let mut lines = 0;
    let mut errors = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(Failure::data)?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        if let Err(e) = serde_json::from_str::<T>(&line) {
            errors.push(json!({ "line": i + 1, "detail": e.to_string() }));
        }
    }
    Ok((lines, errors))
}

fn schema_check(args: SchemaCheckArgs) -> Result<(), Failure> {
    let (lines, errors) = match args.kind {
        RecordKind::Expression => check_lines::<ExpressionRecord>(open(&args.file)?)?,
        RecordKind::Instance => check_lines::<TaskInstance>(open(&args.file)?)?,
        RecordKind::Score => check_lines::<ScoreLine>(open(&args.file)?)?,
        RecordKind::Embedding => {
            let bytes = std::fs::read(&args.file).map_err(Failure::data)?;
            if bytes.starts_with(BINARY_MAGIC_PREFIX) {
                match read_embeddings_binary(bytes.as_slice()) {
                    Ok(v) => (v.len(), Vec::new()),
                    Err(e) => (0, vec![json!({ "line": 0, "detail": e.to_string() })]),
                }
            } else {
                check_lines::<ModularEmbedding>(bytes.as_slice())?
            }
        }
    };
    let kind = format!("{:?}", args.kind).to_ascii_lowercase();
    let invalid = errors.len();
    summary(
        "schema-check",
        json!({ "kind": kind, "records": lines, "invalid": invalid, "errors": errors }),
    );
    if invalid > 0 {
        return Err(Failure::data(anyhow!("{invalid} invalid record(s) in {}", args.file.display())));
    }
    if lines == 0 {
        return Err(Failure::empty(format!("{} holds no records", args.file.display())));
    }
    Ok(())
}

fn synth(args: SynthArgs, config: &PipelineConfig) -> Result<(), Failure> {
    let corpus = synthetic_corpus(args.images, args.objects, config.seed);
    write_file(&args.out, &corpus.to_gqa_json())?;
    summary("synth", json!({ "images": args.images, "objects_per_image": args.objects }));
    Ok(())
}
