use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use bailaudit_core::backend::{
    run_batch, Backend, BackendConfig, BatchJob, BatchOptions, ModelBackend, API_KEY_ENV,
};
use bailaudit_core::corpus::{
    load_word_list, read_raw_cases, split_corpus, CaseFact, PreprocessConfig, Preprocessed,
    Split, TokenizerSpec,
};
use bailaudit_core::digest::sha256_hex;
use bailaudit_core::eval::{build_report, evaluate, ConfigurationMetrics, PredictionRecord, UnparseablePolicy};
use bailaudit_core::jsonl;
use bailaudit_core::offense_tagger::{expand_lexicon, tag_case, OffenseLexicon, TagOptions, TypedFact};
use bailaudit_core::pairing::{generate_pairs, load_roster, Group, ImageRecord, Pair};
use bailaudit_core::prompting::{Configuration, Decision, DecisionRules, PromptOptions, Templates};
use bailaudit_core::provenance::RunManifest;
use bailaudit_core::retrieval::{build_index, Embedder, HashingEmbedder, HttpEmbedder, PrecedentIndex};
use bailaudit_core::sft_export::{export_sft, ExportInputs, Scheme};
use bailaudit_core::text::WordMatch;
use tracing::info;

use crate::{
    Command, EmbedderArgs, EmbedderKind, EvaluateArgs, ExpandArgs, ExportArgs, IndexBuildArgs,
    IndexCommand, IndexQueryArgs, IngestArgs, PairArgs, PredictArgs, ReportArgs, SplitFilter,
    TagArgs,
};

/// Some pairs failed; artifacts were still written.
#[derive(Debug)]
pub struct PartialFailure {
    pub failed: usize,
    pub total: usize,
}

impl std::fmt::Display for PartialFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} of {} pairs failed; see the error field in the output", self.failed, self.total)
    }
}

impl std::error::Error for PartialFailure {}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Pair(a) => pair(a),
        Command::Tag(a) => tag(a),
        Command::ExpandLexicon(a) => expand(a),
        Command::Index(IndexCommand::Build(a)) => index_build(a),
        Command::Index(IndexCommand::Query(a)) => index_query(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::ExportSft(a) => export(a),
        Command::Report(a) => report(a),
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn manifest(command: &str) -> RunManifest {
    RunManifest::new(command, std::env::args().collect(), now())
}

fn finish(mut m: RunManifest, artifact: &Path) -> Result<()> {
    m.outputs.insert("artifact".into(), artifact.display().to_string());
    let path = m.write(artifact, now())?;
    info!(manifest = %path.display(), id = %m.manifest_id, "wrote run manifest");
    Ok(())
}

fn word_list(path: Option<&Path>, builtin: &str) -> Result<(Vec<String>, String)> {
    let list = match path {
        Some(p) => load_word_list(p)?,
        None => bailaudit_core::text::parse_word_list(builtin),
    };
    let hash = sha256_hex(list.join("\n"));
    Ok((list, hash))
}

fn read_facts(path: &Path) -> Result<Vec<CaseFact>> {
    jsonl::read(path).with_context(|| format!("reading facts from {}", path.display()))
}

fn read_typed(path: &Path) -> Result<Vec<TypedFact>> {
    jsonl::read(path).with_context(|| format!("reading typed facts from {}", path.display()))
}

fn keep_split(split: Option<Split>, filter: SplitFilter) -> bool {
    match filter {
        SplitFilter::All => true,
        SplitFilter::Train => split == Some(Split::Train),
        SplitFilter::Test => split == Some(Split::Test),
    }
}

/// Loads the roster and makes relative image locators relative to the
/// roster file's directory.
fn roster_with_resolved_uris(path: &Path, groups: &BTreeSet<Group>) -> Result<Vec<ImageRecord>> {
    let roster = load_roster(path, groups)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(roster
        .records
        .into_iter()
        .map(|mut r| {
            let remote = r.uri.starts_with("data:") || r.uri.contains("://");
            if !remote && !r.uri.is_empty() && Path::new(&r.uri).is_relative() {
                r.uri = base.join(&r.uri).display().to_string();
            }
            r
        })
        .collect())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mut m = manifest("ingest");
    let (stopwords, stop_hash) = word_list(
        a.stopwords.as_deref(),
        bailaudit_core::corpus::DEFAULT_LEGAL_STOPWORDS,
    )?;
    let (keywords, kw_hash) = word_list(
        a.argument_keywords.as_deref(),
        bailaudit_core::corpus::DEFAULT_ARGUMENT_KEYWORDS,
    )?;
    m.config_hashes.insert("legal_stopwords".into(), stop_hash);
    m.config_hashes.insert("argument_keywords".into(), kw_hash);
    m.hash_input("input", &a.input)?;
    m.seeds.insert("split".into(), a.seed);

    let cfg = PreprocessConfig {
        legal_stopwords: stopwords,
        argument_keywords: keywords,
        min_token_length: a.min_tokens,
        tokenizer: TokenizerSpec::from_str(&a.tokenizer)?,
        argument_match: if a.exact_argument_match {
            WordMatch::Exact
        } else {
            WordMatch::Inflected
        },
        ..PreprocessConfig::default()
    };
    let pre = cfg.compile()?;
    let raw = read_raw_cases(&a.input)?;
    let mut kept = Vec::new();
    let mut dropped = 0u64;
    for case in &raw {
        match pre.apply(case)? {
            Preprocessed::Kept(f) => kept.push(f),
            Preprocessed::Dropped { .. } => dropped += 1,
        }
    }
    let facts = split_corpus(kept, a.train_fraction, a.seed)?;
    let train = facts.iter().filter(|f| f.split == Some(Split::Train)).count() as u64;
    jsonl::write(&a.output, &facts)?;

    m.counts.insert("raw".into(), raw.len() as u64);
    m.counts.insert("dropped_too_short".into(), dropped);
    m.counts.insert("kept".into(), facts.len() as u64);
    m.counts.insert("train".into(), train);
    m.counts.insert("test".into(), facts.len() as u64 - train);
    eprintln!(
        "kept {} of {} cases ({} train, {} test)",
        facts.len(),
        raw.len(),
        train,
        facts.len() as u64 - train
    );
    finish(m, &a.output)
}

fn parse_groups(names: &[String]) -> Result<BTreeSet<Group>> {
    names
        .iter()
        .map(|g| Group::from_str(g.trim()).map_err(Into::into))
        .collect()
}

fn pair(a: PairArgs) -> Result<()> {
    let mut m = manifest("pair");
    m.hash_input("roster", &a.roster)?;
    m.hash_input("facts", &a.facts)?;
    m.seeds.insert("max_pairs_per_fact".into(), a.seed);

    let groups = parse_groups(&a.groups)?;
    let roster = load_roster(&a.roster, &groups)?;
    let facts: Vec<CaseFact> = read_facts(&a.facts)?
        .into_iter()
        .filter(|f| keep_split(f.split, a.split))
        .collect();
    let set = generate_pairs(&roster.records, &facts)?;

    let mut per_group: BTreeMap<Group, u64> = BTreeMap::new();
    let mut per_split: BTreeMap<Split, u64> = BTreeMap::new();
    let file = File::create(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let mut out = BufWriter::new(file);
    let mut emit = |p: &Pair| -> Result<()> {
        *per_group.entry(p.group).or_default() += 1;
        *per_split.entry(p.split).or_default() += 1;
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    match a.max_pairs_per_fact {
        Some(limit) => {
            for p in set.iter_limited(limit, a.seed) {
                emit(&p)?;
            }
        }
        None => {
            for p in set.iter() {
                emit(&p)?;
            }
        }
    }
    out.flush()?;

    let total: u64 = per_group.values().sum();
    m.counts.insert("images".into(), roster.records.len() as u64);
    m.counts.insert("images_skipped".into(), roster.skipped as u64);
    m.counts.insert("facts".into(), facts.len() as u64);
    m.counts.insert("pairs".into(), total);
    for (g, n) in &per_group {
        m.counts.insert(format!("pairs_{}", g.as_str()), *n);
    }
    for (s, n) in &per_split {
        m.counts.insert(format!("pairs_{s}"), *n);
    }
    if let Some(limit) = a.max_pairs_per_fact {
        m.counts.insert("max_pairs_per_fact".into(), limit as u64);
    }
    eprintln!("wrote {total} pairs");
    finish(m, &a.output)
}

fn tag(a: TagArgs) -> Result<()> {
    let mut m = manifest("tag");
    let lexicon = OffenseLexicon::load(&a.lexicon)?;
    m.config_hashes.insert("lexicon".into(), lexicon.sha256());
    m.hash_input("facts", &a.facts)?;
    let opts = TagOptions {
        case_insensitive: !a.case_sensitive,
        stemming: a.stemming,
    };
    let facts = read_facts(&a.facts)?;
    let typed: Vec<TypedFact> = facts.iter().map(|f| tag_case(f, &lexicon, opts)).collect();
    jsonl::write(&a.output, &typed)?;

    m.counts.insert("facts".into(), typed.len() as u64);
    m.counts.insert(
        "untyped".into(),
        typed.iter().filter(|t| t.offense_types.is_empty()).count() as u64,
    );
    for t in typed.iter().flat_map(|t| &t.offense_types) {
        *m.counts.entry(format!("type_{t}")).or_default() += 1;
    }
    finish(m, &a.output)
}

fn load_backend(path: &Path, m: &mut RunManifest) -> Result<ModelBackend> {
    let config = BackendConfig::load(path)?;
    if matches!(config, BackendConfig::HttpChat { .. }) && std::env::var_os(API_KEY_ENV).is_none() {
        eprintln!("note: {API_KEY_ENV} is not set; requests go out without an API key");
    }
    m.hash_input("backend_config", path)?;
    let backend = ModelBackend::new(config)?;
    m.backend = Some(backend.descriptor());
    Ok(backend)
}

fn expand(a: ExpandArgs) -> Result<()> {
    let mut m = manifest("expand-lexicon");
    let backend = load_backend(&a.backend, &mut m)?;
    let keywords = expand_lexicon(&backend, &a.offense_type, a.n)?;
    let mut text = keywords.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(&a.output, text).with_context(|| format!("writing {}", a.output.display()))?;
    m.counts.insert("keywords".into(), keywords.len() as u64);
    eprintln!(
        "{} candidate keywords for `{}`; review before merging into the lexicon",
        keywords.len(),
        a.offense_type
    );
    finish(m, &a.output)
}

fn make_embedder(a: &EmbedderArgs) -> Result<Box<dyn Embedder>> {
    Ok(match a.embedder {
        EmbedderKind::Hashing => Box::new(HashingEmbedder::new(a.dimension)?),
        EmbedderKind::Http => {
            let url = a
                .embedder_url
                .as_deref()
                .ok_or_else(|| anyhow!("--embedder http needs --embedder-url"))?;
            let model = a
                .embedder_model
                .as_deref()
                .ok_or_else(|| anyhow!("--embedder http needs --embedder-model"))?;
            let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
            Box::new(HttpEmbedder::new(url, model, a.dimension, key, Duration::from_secs(60))?)
        }
    })
}

/// The query embedder has to be the one the index was built with.
fn embedder_for(index: &PrecedentIndex, a: &EmbedderArgs) -> Result<Box<dyn Embedder>> {
    let mut a = a.clone();
    a.dimension = index.dimension();
    if index.embedder_name().starts_with("hashing-") {
        a.embedder = EmbedderKind::Hashing;
    } else if let Some(model) = index.embedder_name().strip_prefix("http:") {
        a.embedder = EmbedderKind::Http;
        a.embedder_model.get_or_insert_with(|| model.to_string());
    }
    make_embedder(&a)
}

fn index_build(a: IndexBuildArgs) -> Result<()> {
    let mut m = manifest("index build");
    let embedder = make_embedder(&a.embedder)?;
    m.config_hashes.insert("embedder".into(), embedder.name().to_string());
    let (index, total) = if let Some(path) = &a.typed {
        m.hash_input("typed", path)?;
        let all = read_typed(path)?;
        let total = all.len();
        let train: Vec<TypedFact> = all.into_iter().filter(|t| t.split == Some(Split::Train)).collect();
        (build_index(&train, embedder.as_ref())?, total)
    } else {
        let path = a.facts.as_ref().expect("clap requires facts or typed");
        m.hash_input("facts", path)?;
        let all = read_facts(path)?;
        let total = all.len();
        let train: Vec<CaseFact> = all.into_iter().filter(|f| f.split == Some(Split::Train)).collect();
        (build_index(&train, embedder.as_ref())?, total)
    };
    index.save(&a.output)?;
    m.counts.insert("facts".into(), total as u64);
    m.counts.insert("indexed".into(), index.len() as u64);
    m.outputs.insert(
        "sidecar".into(),
        PrecedentIndex::sidecar_path(&a.output).display().to_string(),
    );
    eprintln!("indexed {} training facts of {total}", index.len());
    finish(m, &a.output)
}

fn index_query(a: IndexQueryArgs) -> Result<()> {
    let index = PrecedentIndex::load(&a.index)?;
    let embedder = embedder_for(&index, &a.embedder)?;
    let (text, exclude) = match (&a.text, &a.case_id) {
        (Some(t), _) => (t.clone(), None),
        (None, Some(id)) => {
            let from_file = if let Some(p) = &a.typed {
                read_typed(p)?.into_iter().find(|t| &t.case_id == id).map(|t| t.rendered_text)
            } else if let Some(p) = &a.facts {
                read_facts(p)?.into_iter().find(|f| &f.case_id == id).map(|f| f.text)
            } else {
                None
            };
            let text = from_file
                .or_else(|| index.entry(id).map(|e| e.text.clone()))
                .ok_or_else(|| anyhow!("case `{id}` not found"))?;
            let exclude = index.entry(id).map(|_| id.as_str());
            (text, exclude)
        }
        (None, None) => unreachable!("clap requires --text or --case-id"),
    };
    let result = index.retrieve_top_k(embedder.as_ref(), &text, a.k, exclude)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let mut m = manifest("predict");
    let cfg = Configuration::from_str(&a.config)?;
    if cfg.uses_rag() && a.index.is_none() {
        bail!("{} needs --index", cfg.cli_name());
    }
    if !cfg.uses_rag() && a.index.is_some() {
        bail!("{} does not use a precedent index; drop --index", cfg.cli_name());
    }

    let mut query_texts = HashMap::new();
    let mut ground_truth = HashMap::new();
    if cfg.uses_typed_facts() {
        let path = a
            .typed
            .as_ref()
            .ok_or_else(|| anyhow!("{} needs --typed", cfg.cli_name()))?;
        m.hash_input("typed", path)?;
        for t in read_typed(path)? {
            ground_truth.insert(t.case_id.clone(), t.bail_granted);
            query_texts.insert(t.case_id, t.rendered_text);
        }
    } else {
        let path = a
            .facts
            .as_ref()
            .ok_or_else(|| anyhow!("{} needs --facts", cfg.cli_name()))?;
        m.hash_input("facts", path)?;
        for f in read_facts(path)? {
            ground_truth.insert(f.case_id.clone(), f.bail_granted);
            query_texts.insert(f.case_id, f.text);
        }
    }

    m.hash_input("pairs", &a.pairs)?;
    let pairs: Vec<Pair> = jsonl::read::<Pair>(&a.pairs)?
        .into_iter()
        .filter(|p| keep_split(Some(p.split), a.split))
        .collect();
    if pairs.is_empty() {
        bail!("no pairs left after the split filter");
    }
    if let Some(p) = pairs.iter().find(|p| !query_texts.contains_key(&p.case_id)) {
        bail!("pair references unknown case `{}`", p.case_id);
    }

    m.hash_input("roster", &a.roster)?;
    let roster = roster_with_resolved_uris(&a.roster, &Group::ALL.into_iter().collect())?;
    let image_refs: HashMap<String, String> = roster
        .into_iter()
        .map(|r| (r.image_id, r.uri))
        .collect();
    if let Some(p) = pairs.iter().find(|p| !image_refs.contains_key(&p.image_id)) {
        bail!("pair references image `{}` missing from the roster", p.image_id);
    }

    let backend = load_backend(&a.backend, &mut m)?;
    let templates = match &a.templates {
        Some(dir) => Templates::load_dir(dir)?,
        None => Templates::default(),
    };
    m.config_hashes.insert("templates".into(), templates.sha256());
    let rules = match &a.decision_rules {
        Some(p) => DecisionRules::load(p)?,
        None => DecisionRules::default(),
    };
    m.config_hashes.insert("decision_rules".into(), rules.sha256().to_string());

    let index = match &a.index {
        Some(p) => {
            m.hash_input("index", p)?;
            Some(PrecedentIndex::load(p)?)
        }
        None => None,
    };
    let embedder = match &index {
        Some(idx) => Some(embedder_for(idx, &a.embedder)?),
        None => None,
    };

    let job = BatchJob {
        configuration: cfg,
        query_texts: &query_texts,
        ground_truth: &ground_truth,
        image_refs: &image_refs,
        index: index.as_ref(),
        embedder: embedder.as_deref(),
        k: a.k,
        templates: &templates,
        prompt_options: PromptOptions {
            asks_confidence: !a.no_confidence,
            precedent_facts_only: a.precedent_facts_only,
        },
        decision_rules: &rules,
    };
    let opts = BatchOptions {
        parallelism: a.parallelism,
        checkpoint: a.checkpoint.clone(),
        checkpoint_every: a.checkpoint_every,
    };
    let outcome = run_batch(&pairs, &job, &backend, &opts)?;
    jsonl::write(&a.output, &outcome.records)?;

    m.counts.insert("pairs".into(), pairs.len() as u64);
    m.counts.insert("queried".into(), outcome.queried as u64);
    m.counts.insert("resumed".into(), outcome.resumed as u64);
    m.counts.insert("failed".into(), outcome.failures as u64);
    for r in &outcome.records {
        let key = match r.decision {
            Decision::Yes => "decision_yes",
            Decision::No => "decision_no",
            Decision::Unparseable => "decision_unparseable",
        };
        *m.counts.entry(key.into()).or_default() += 1;
    }
    finish(m, &a.output)?;
    if outcome.failures > 0 {
        return Err(PartialFailure {
            failed: outcome.failures,
            total: pairs.len(),
        }
        .into());
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let mut m = manifest("evaluate");
    m.hash_input("predictions", &a.predictions)?;
    let records: Vec<PredictionRecord> = jsonl::read(&a.predictions)?;
    let policy = if a.unparseable_as_deny {
        UnparseablePolicy::CountAsDeny
    } else {
        UnparseablePolicy::Exclude
    };
    let mut metrics = evaluate(&records, policy)?;
    metrics.source_manifest_id = RunManifest::read_for(&a.predictions).map(|r| r.manifest_id);
    fs::write(&a.output, serde_json::to_string_pretty(&metrics)? + "\n")
        .with_context(|| format!("writing {}", a.output.display()))?;

    m.counts.insert("records".into(), metrics.records as u64);
    m.counts.insert("excluded_unparseable".into(), metrics.excluded_unparseable as u64);
    m.counts.insert("excluded_errors".into(), metrics.excluded_errors as u64);
    if metrics.excluded_unparseable > 0 {
        eprintln!("excluded {} unparseable responses", metrics.excluded_unparseable);
    }
    finish(m, &a.output)
}

fn export(a: ExportArgs) -> Result<()> {
    let mut m = manifest("export-sft");
    let scheme = Scheme::from_str(&a.scheme)?;
    m.seeds.insert("export".into(), a.seed);
    m.hash_input("facts", &a.facts)?;
    m.hash_input("roster", &a.roster)?;

    let all = read_facts(&a.facts)?;
    let total = all.len();
    let facts: Vec<CaseFact> = all.into_iter().filter(|f| f.split == Some(Split::Train)).collect();
    let typed: Option<HashMap<String, TypedFact>> = match &a.typed {
        Some(p) => {
            m.hash_input("typed", p)?;
            Some(read_typed(p)?.into_iter().map(|t| (t.case_id.clone(), t)).collect())
        }
        None => None,
    };
    let roster = roster_with_resolved_uris(&a.roster, &Group::ALL.into_iter().collect())?;
    let templates = match &a.templates {
        Some(dir) => Templates::load_dir(dir)?,
        None => Templates::default(),
    };
    m.config_hashes.insert("templates".into(), templates.sha256());
    let lexicon_sha256 = match scheme {
        Scheme::Typed => {
            let path = a
                .lexicon
                .as_ref()
                .ok_or_else(|| anyhow!("the typed scheme needs --lexicon (the one used by `tag`)"))?;
            Some(OffenseLexicon::load(path)?.sha256())
        }
        Scheme::Vanilla => None,
    };
    if let Some(h) = &lexicon_sha256 {
        m.config_hashes.insert("lexicon".into(), h.clone());
    }

    let inputs = ExportInputs {
        facts: &facts,
        typed: typed.as_ref(),
        roster: &roster,
        templates: &templates,
        lexicon_sha256,
    };
    let exported = export_sft(&inputs, scheme, a.seed)?;
    fs::write(&a.output, exported.records_jsonl())
        .with_context(|| format!("writing {}", a.output.display()))?;
    let manifest_path = a.manifest_out.clone().unwrap_or_else(|| {
        let mut p = a.output.clone().into_os_string();
        p.push(".sft.json");
        PathBuf::from(p)
    });
    fs::write(&manifest_path, serde_json::to_string_pretty(&exported.manifest)? + "\n")
        .with_context(|| format!("writing {}", manifest_path.display()))?;

    m.counts.insert("facts".into(), total as u64);
    m.counts.insert("train".into(), exported.manifest.train_count as u64);
    m.counts.insert("validation".into(), exported.manifest.validation_count as u64);
    m.outputs.insert("sft_manifest".into(), manifest_path.display().to_string());
    finish(m, &a.output)
}

fn report(a: ReportArgs) -> Result<()> {
    let mut m = manifest("report");
    let mut all = Vec::new();
    for (i, path) in a.metrics.iter().enumerate() {
        m.hash_input(&format!("metrics_{i}"), path)?;
        let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let metrics: ConfigurationMetrics =
            serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
        all.push(metrics);
    }
    let mut report = build_report(all)?;
    report.manifest_id = Some(m.compute_id());
    fs::write(&a.output, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", a.output.display()))?;
    let table = report.to_table();
    if let Some(p) = &a.table {
        fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?;
        m.outputs.insert("table".into(), p.display().to_string());
    }
    print!("{table}");
    m.counts.insert("configurations".into(), report.columns.len() as u64);
    m.counts.insert("rows".into(), report.rows.len() as u64);
    finish(m, &a.output)
}
