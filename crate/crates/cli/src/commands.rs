use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use biacl::baseline::substitute;
use biacl::checkpoint;
use biacl::data::{curriculum_order, read_corpus, Vocabulary, EOS_ID};
use biacl::decoding::{build_constraints, translate_constrained, DecodeError, SearchParams};
use biacl::dictionary::{load_dictionary, BilingualDictionary, LoadReport};
use biacl::metrics::{corpus_bleu, isotropy_i1, isotropy_i2, sample_decoder_states, sample_encoder_states, MetricReport, StateSample};
use biacl::synth::{ablation_tsv, full_mask_wins, pair_name, run_ablation, run_experiment, translate, ExperimentConfig};
use biacl::training::{train, train_supervised, AblationMask, Langs, ParallelExample, TrainConfig, TrainTask};
use biacl::{Model64, ModelConfig, Seq2Seq, TokenId};
use clap::Parser;

use crate::error::CliError;
use crate::manifest::{self, Recorder};
use crate::run_config::RunConfig;
use crate::{
    Cli, Command, DecodeArgs, EvaluateArgs, ModelArgs, PivotArgs, PrepareArgs, ReplayArgs, SynthArgs, TrainArgs,
};

pub fn run(cli: Cli, args: &[String]) -> Result<(), CliError> {
    let manifest = cli.manifest;
    match cli.command {
        Command::PivotDict(a) => {
            let m = manifest.unwrap_or_else(|| sibling(&a.out, "manifest.json"));
            pivot_dict(&a, Recorder::start("pivot-dict", args), &m)
        }
        Command::Prepare(a) => {
            let m = manifest.unwrap_or_else(|| a.out.join("manifest.json"));
            prepare(&a, Recorder::start("prepare", args), &m)
        }
        Command::Train(a) => {
            let m = manifest.unwrap_or_else(|| a.out.join("manifest.json"));
            train_cmd(&a, Recorder::start("train", args), &m)
        }
        Command::Decode(a) => {
            let m = manifest.unwrap_or_else(|| default_manifest(a.out.as_deref(), "decode"));
            decode(&a, Recorder::start("decode", args), &m)
        }
        Command::Evaluate(a) => {
            let m = manifest.unwrap_or_else(|| default_manifest(a.out.as_deref(), "evaluate"));
            evaluate(&a, Recorder::start("evaluate", args), &m)
        }
        Command::SynthExperiment(a) => {
            let m = manifest.unwrap_or_else(|| a.out.join("manifest.json"));
            synth_experiment(&a, Recorder::start("synth-experiment", args), &m)
        }
        Command::Replay(a) => replay(&a),
    }
}

/// `out.tsv` → `out.tsv.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn default_manifest(out: Option<&Path>, command: &str) -> PathBuf {
    match out {
        Some(p) => sibling(p, "manifest.json"),
        None => PathBuf::from(format!("{command}.manifest.json")),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::output(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::output(path, e))
}

fn report_line(name: &str, d: &BilingualDictionary<String>, r: Option<&LoadReport>) -> String {
    let mut s = format!(
        "{name}\t{}-{}\tpairs {}\tsources {}",
        d.src_lang(),
        d.tgt_lang(),
        d.len(),
        d.num_sources()
    );
    if let Some(r) = r {
        s.push_str(&format!("\tmalformed {}\tduplicates {}", r.malformed, r.duplicates));
    }
    s
}

fn pivot_dict(a: &PivotArgs, mut rec: Recorder, manifest: &Path) -> Result<(), CliError> {
    rec.config("src_lang", &a.src_lang);
    rec.config("pivot_lang", &a.pivot_lang);
    rec.config("tgt_lang", &a.tgt_lang);
    let (left, lrep) = load_dictionary(&a.src_en, &a.src_lang, &a.pivot_lang)?;
    let (right, rrep) = load_dictionary(&a.en_tgt, &a.pivot_lang, &a.tgt_lang)?;
    rec.input(&a.src_en)?;
    rec.input(&a.en_tgt)?;
    let out = left.pivot(&right)?;
    out.save(&a.out).map_err(|e| CliError::output(&a.out, e))?;
    rec.output(&a.out)?;
    println!("{}", report_line("input", &left, Some(&lrep)));
    println!("{}", report_line("input", &right, Some(&rrep)));
    println!("{}", report_line("pivoted", &out, None));
    rec.finish(manifest)?;
    Ok(())
}

fn prepare(a: &PrepareArgs, mut rec: Recorder, manifest: &Path) -> Result<(), CliError> {
    rec.config("cap", a.cap);
    rec.config("phi", a.phi);
    rec.config("lang", &a.lang);
    rec.config("other_lang", &a.other_lang);
    let (corpus, report) = read_corpus(&a.mono, a.cap, &a.lang)?;
    let (dict, dict_report) = load_dictionary(&a.dict, &a.lang, &a.other_lang)?;
    rec.input(&a.mono)?;
    rec.input(&a.dict)?;
    if corpus.is_empty() {
        return Err(CliError::Input(format!("{}: no sentence survives filtering", a.mono.display())));
    }
    let plan = curriculum_order(&corpus.sentences, &dict, a.phi)?;

    let mut vocab = Vocabulary::build(
        &[a.other_lang.as_str(), a.lang.as_str()],
        corpus.sentences.iter().map(Vec::as_slice),
    );
    for (s, t) in dict.pairs() {
        for w in s.iter().chain(t) {
            vocab.add(w);
        }
    }

    create_dir(&a.out)?;
    let corpus_path = a.out.join("corpus.txt");
    write_text(&corpus_path, &corpus.lines().map(|l| l + "\n").collect::<String>())?;
    let vocab_path = a.out.join("vocab.txt");
    write_text(&vocab_path, &vocab.to_text())?;
    let mut cur = String::from("rank\tindex\tcoverage\n");
    for (rank, &i) in plan.order.iter().enumerate() {
        cur.push_str(&format!("{rank}\t{i}\t{:.6}\n", plan.scores[i]));
    }
    let cur_path = a.out.join("curriculum.tsv");
    write_text(&cur_path, &cur)?;
    let report_path = a.out.join("filter_report.txt");
    write_text(
        &report_path,
        &format!(
            "{report}\ndictionary_pairs\t{}\ndictionary_malformed\t{}\ncurriculum\t{}\n",
            dict_report.pairs,
            dict_report.malformed,
            plan.len()
        ),
    )?;
    let syn: Vec<(Vec<String>, Vec<String>)> = plan
        .order
        .iter()
        .map(|&i| (substitute(&corpus.sentences[i], &dict), corpus.sentences[i].clone()))
        .collect();
    let syn_path = a.out.join("syn_lexicon.tsv");
    write_text(&syn_path, &biacl::baseline::to_tsv(&syn))?;
    for p in [&corpus_path, &vocab_path, &cur_path, &report_path, &syn_path] {
        rec.output(p)?;
    }
    println!("kept {} of {} sentences", report.kept, report.input);
    println!("curriculum {} sentences at phi {}", plan.len(), a.phi);
    println!("vocabulary {} tokens", vocab.len());
    rec.finish(manifest)?;
    Ok(())
}

fn tag(vocab: &Vocabulary, lang: &str) -> Result<TokenId, CliError> {
    vocab
        .tag(lang)
        .ok_or_else(|| CliError::Input(format!("vocabulary has no tag for language {lang:?}")))
}

fn read_parallel(path: &Path, vocab: &Vocabulary, src: TokenId, tgt: TokenId) -> Result<Vec<ParallelExample>, CliError> {
    let mut out = Vec::new();
    for (i, line) in read_text(path)?.lines().enumerate() {
        let Some((s, t)) = line.split_once('\t') else {
            return Err(CliError::Input(format!("{}:{}: expected source<TAB>target", path.display(), i + 1)));
        };
        let (s, t) = (vocab.tokenize(s), vocab.tokenize(t));
        if s.is_empty() || t.is_empty() {
            continue;
        }
        out.push(ParallelExample {
            source: s.clone(),
            source_lang: src,
            target: t.clone(),
            target_lang: tgt,
        });
        out.push(ParallelExample {
            source: t,
            source_lang: tgt,
            target: s,
            target_lang: src,
        });
    }
    Ok(out)
}

fn train_cmd(a: &TrainArgs, mut rec: Recorder, manifest: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(&a.config, &a.set)?;
    let mask = AblationMask::parse(&a.ablation)
        .ok_or_else(|| CliError::Usage(format!("--ablation {:?}: expected four 0/1 flags", a.ablation)))?;
    for (k, v) in cfg.snapshot() {
        rec.config(&k, v);
    }
    rec.config("ablation", mask.label());
    rec.seed(cfg.train.seed);
    rec.input(&a.config)?;

    let vocab_path = cfg.data.join("vocab.txt");
    let corpus_path = cfg.data.join("corpus.txt");
    let vocab = Vocabulary::load(&vocab_path)?;
    let (tgt, src) = (tag(&vocab, &cfg.target_lang)?, tag(&vocab, &cfg.source_lang)?);
    let (dict, _) = load_dictionary(&cfg.dict, &cfg.target_lang, &cfg.source_lang)?;
    let dict = dict.map_tokens(|w| vocab.id(w), |w| vocab.id(w));
    for p in [&vocab_path, &corpus_path, &cfg.dict] {
        rec.input(p)?;
    }

    let mut model: Model64 = match &cfg.init {
        Some(p) => {
            rec.input(p)?;
            checkpoint::load(p)?
        }
        None => {
            let mut mc = ModelConfig::new(vocab.len(), vec![src, tgt]);
            mc.d_model = cfg.d_model;
            mc.layers = cfg.layers;
            mc.heads = cfg.heads;
            mc.ff_dim = cfg.ff_dim;
            mc.max_len = cfg.max_positions;
            Seq2Seq::new(mc, cfg.train.seed)?
        }
    };
    let mc = model.config().clone();
    if mc.vocab_size != vocab.len() {
        return Err(CliError::Model(format!(
            "model vocabulary has {} tokens, {} has {}",
            mc.vocab_size,
            vocab_path.display(),
            vocab.len()
        )));
    }
    if !mc.language_tags.contains(&src) || !mc.language_tags.contains(&tgt) {
        return Err(CliError::Model("model does not know both language tags".into()));
    }
    if cfg.train.max_len > mc.max_len {
        return Err(CliError::Config(vec![format!(
            "max_len {} exceeds the model's {} positions",
            cfg.train.max_len, mc.max_len
        )]));
    }

    let all: Vec<Vec<TokenId>> = read_text(&corpus_path)?.lines().map(|l| vocab.tokenize(l)).collect();
    let corpus: Vec<Vec<TokenId>> = all.into_iter().filter(|s| !s.is_empty() && s.len() < mc.max_len).collect();

    create_dir(&a.out)?;
    if let Some(p) = &cfg.parallel {
        if cfg.warm_epochs > 0 {
            rec.input(p)?;
            let examples = read_parallel(p, &vocab, src, tgt)?;
            let examples: Vec<ParallelExample> = examples
                .into_iter()
                .filter(|e| e.source.len() < mc.max_len && e.target.len() < mc.max_len)
                .collect();
            let wcfg = TrainConfig {
                epochs: cfg.warm_epochs,
                lr: cfg.warm_lr,
                ..cfg.train.clone()
            };
            let losses = train_supervised(&mut model, &examples, EOS_ID, &wcfg, true)?;
            if let Some(l) = losses.last() {
                println!("warm start: {} steps, final loss {l:.4}", losses.len());
            }
        }
    }

    let task = TrainTask {
        corpus: &corpus,
        dict: &dict,
        langs: Langs { target: tgt, source: src },
        eos: EOS_ID,
        banned: vocab.non_output_ids(),
    };
    let log_path = a.out.join("train.log");
    let file = fs::File::create(&log_path).map_err(|e| CliError::output(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let outcome = train(&mut model, &task, &cfg.train, mask, Some(&mut log));
    log.flush().map_err(|e| CliError::output(&log_path, e))?;
    drop(log);
    let outcome = outcome?;

    let ckpt = a.out.join("model.ckpt");
    checkpoint::save(&ckpt, &model)?;
    let vocab_out = a.out.join("vocab.txt");
    write_text(&vocab_out, &vocab.to_text())?;
    let cfg_out = a.out.join("config.txt");
    write_text(&cfg_out, &cfg.to_text())?;
    for p in [&ckpt, &vocab_out, &cfg_out, &log_path] {
        rec.output(p)?;
    }
    println!(
        "{} steps over {} curriculum sentences, {} pairs skipped",
        outcome.steps(),
        outcome.curriculum.len(),
        outcome.skipped()
    );
    if let Some(last) = outcome.reports.last() {
        println!("final composite loss {:.6}", last.star);
    }
    rec.finish(manifest)?;
    Ok(())
}

struct Loaded {
    model: Model64,
    vocab: Vocabulary,
    from: TokenId,
    to: TokenId,
    search: SearchParams,
}

fn load_model(a: &ModelArgs, rec: &mut Recorder) -> Result<Loaded, CliError> {
    let vocab_path = a
        .vocab
        .clone()
        .unwrap_or_else(|| a.model.parent().unwrap_or(Path::new("")).join("vocab.txt"));
    let model: Model64 = checkpoint::load(&a.model)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    rec.input(&a.model)?;
    rec.input(&vocab_path)?;
    if model.config().vocab_size != vocab.len() {
        return Err(CliError::Model(format!(
            "model vocabulary has {} tokens, {} has {}",
            model.config().vocab_size,
            vocab_path.display(),
            vocab.len()
        )));
    }
    let (from, to) = (tag(&vocab, &a.from_lang)?, tag(&vocab, &a.to_lang)?);
    if a.beam == 0 || a.max_len < 2 {
        return Err(CliError::Usage("--beam must be at least 1 and --max-len at least 2".into()));
    }
    let mut search = SearchParams::new(a.beam, a.max_len.min(model.config().max_len), EOS_ID);
    search.banned = vocab.non_output_ids();
    rec.config("from", &a.from_lang);
    rec.config("to", &a.to_lang);
    rec.config("beam", a.beam);
    rec.config("max_len", search.max_len);
    Ok(Loaded {
        model,
        vocab,
        from,
        to,
        search,
    })
}

fn translate_lines(
    m: &Loaded,
    lines: &[Vec<TokenId>],
    dict: Option<&BilingualDictionary<TokenId>>,
) -> Result<(Vec<Vec<TokenId>>, usize), CliError> {
    let mut out = Vec::with_capacity(lines.len());
    let mut failed = 0;
    for s in lines {
        if s.is_empty() || s.len() >= m.model.config().max_len {
            if !s.is_empty() {
                failed += 1;
            }
            out.push(Vec::new());
            continue;
        }
        let hyp = match dict {
            None => translate(&m.model, s, m.from, m.to, &m.search)?,
            Some(d) => {
                let mut src = s.clone();
                src.push(EOS_ID);
                match translate_constrained(&m.model, &src, m.from, m.to, &build_constraints(s, d), &m.search) {
                    Ok(h) => h,
                    Err(DecodeError::NoHypothesis) => {
                        failed += 1;
                        Vec::new()
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        out.push(hyp);
    }
    Ok((out, failed))
}

fn decode(a: &DecodeArgs, mut rec: Recorder, manifest: &Path) -> Result<(), CliError> {
    let m = load_model(&a.model, &mut rec)?;
    let dict = match a.constraints.as_slice() {
        [mode] if mode == "none" => None,
        [mode, path] if mode == "dict" => {
            let path = PathBuf::from(path);
            let (d, _) = load_dictionary(&path, &a.model.from_lang, &a.model.to_lang)?;
            rec.input(&path)?;
            Some(d.map_tokens(|w| m.vocab.id(w), |w| m.vocab.id(w)))
        }
        other => {
            return Err(CliError::Usage(format!(
                "--constraints {}: expected `none` or `dict PATH`",
                other.join(" ")
            )))
        }
    };
    rec.config("constraints", if dict.is_some() { "dict" } else { "none" });
    let lines: Vec<Vec<TokenId>> = read_text(&a.input)?.lines().map(|l| m.vocab.tokenize(l)).collect();
    rec.input(&a.input)?;
    let (hyps, failed) = translate_lines(&m, &lines, dict.as_ref())?;
    let text: String = hyps.iter().map(|h| m.vocab.detokenize(h) + "\n").collect();
    match &a.out {
        Some(p) => {
            write_text(p, &text)?;
            rec.output(p)?;
        }
        None => print!("{text}"),
    }
    if failed > 0 {
        log::warn!("{failed} of {} lines produced no translation", lines.len());
    }
    rec.finish(manifest)?;
    Ok(())
}

fn evaluate(a: &EvaluateArgs, mut rec: Recorder, manifest: &Path) -> Result<(), CliError> {
    let m = load_model(&a.model, &mut rec)?;
    let test_text = read_text(&a.test)?;
    let ref_text = read_text(&a.refs)?;
    rec.input(&a.test)?;
    rec.input(&a.refs)?;
    let sources: Vec<Vec<TokenId>> = test_text.lines().map(|l| m.vocab.tokenize(l)).collect();
    let refs: Vec<Vec<String>> = ref_text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_owned).collect())
        .collect();
    if sources.len() != refs.len() {
        return Err(CliError::Input(format!(
            "{} test lines but {} references",
            sources.len(),
            refs.len()
        )));
    }
    let (hyps, _) = translate_lines(&m, &sources, None)?;
    let hyp_words: Vec<Vec<String>> = hyps
        .iter()
        .map(|h| h.iter().map(|&t| m.vocab.token(t).unwrap_or("<unk>").to_owned()).collect())
        .collect();
    let bleu = corpus_bleu(&hyp_words, &refs)?;
    let model_name = a.model.model.display().to_string();
    let dataset = a.test.display().to_string();
    let mut tsv = String::new();
    if a.isotropy {
        rec.config("sample", a.sample);
        rec.seed(a.seed);
        let usable: Vec<Vec<TokenId>> = sources
            .iter()
            .filter(|s| !s.is_empty() && s.len() < m.model.config().max_len)
            .cloned()
            .collect();
        let sample = StateSample {
            size: a.sample,
            seed: a.seed,
            search: SearchParams {
                beam: 1,
                ..m.search.clone()
            },
        };
        let enc = sample_encoder_states(&m.model, &usable, m.from, &sample)?;
        let dec = sample_decoder_states(&m.model, &usable, m.from, m.to, &sample)?;
        tsv.push_str(MetricReport::TSV_HEADER);
        tsv.push('\n');
        for (side, w) in [("encoder", &enc), ("decoder", &dec)] {
            let r = MetricReport {
                model: model_name.clone(),
                dataset: dataset.clone(),
                side: side.into(),
                bleu,
                i1: isotropy_i1(w),
                i2: isotropy_i2(w),
            };
            println!("{r}\n");
            tsv.push_str(&r.to_tsv());
            tsv.push('\n');
        }
    } else {
        println!("model:   {model_name}\ndataset: {dataset}\nBLEU:    {bleu:.2}");
        tsv = format!("model\tdataset\tbleu\n{model_name}\t{dataset}\t{bleu:.4}\n");
    }
    if let Some(p) = &a.out {
        write_text(p, &tsv)?;
        rec.output(p)?;
    }
    rec.finish(manifest)?;
    Ok(())
}

fn synth_config(a: &SynthArgs) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.synth.seed = a.seed;
    if let Some(n) = a.mono {
        cfg.synth.mono = n;
    }
    if let Some(e) = a.epochs {
        cfg.biacl.epochs = e;
    }
    cfg
}

fn synth_experiment(a: &SynthArgs, mut rec: Recorder, manifest: &Path) -> Result<(), CliError> {
    let cfg = synth_config(a);
    rec.seed(a.seed);
    rec.config("mono", cfg.synth.mono);
    rec.config("parallel", cfg.synth.parallel);
    rec.config("coverage", cfg.synth.coverage);
    rec.config("d_model", cfg.d_model);
    rec.config("lambda", cfg.biacl.lambda);
    rec.config("epochs", cfg.biacl.epochs);
    rec.config("lr", cfg.biacl.lr);
    rec.config("soft_feed", cfg.biacl.soft_feed.as_str());
    create_dir(&a.out)?;
    let result = run_experiment::<f64>(&cfg)?;
    let tsv = result.to_tsv();
    let results_path = a.out.join("results.tsv");
    write_text(&results_path, &tsv)?;
    rec.output(&results_path)?;
    print!("{tsv}");
    if !a.ablation_seeds.is_empty() {
        rec.config(
            "ablation_seeds",
            a.ablation_seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
        let rows = run_ablation::<f64>(&cfg, &a.ablation_seeds)?;
        let table = ablation_tsv(&rows);
        let path = a.out.join("ablation.tsv");
        write_text(&path, &table)?;
        rec.output(&path)?;
        print!("{table}");
        for (seed, won) in full_mask_wins(&rows) {
            println!("seed {seed}: full mask {}", if won { "on top" } else { "not on top" });
        }
    }
    log::info!("pair {}", pair_name());
    rec.finish(manifest)?;
    Ok(())
}

fn replay(a: &ReplayArgs) -> Result<(), CliError> {
    let recorded = manifest::load(&a.manifest_path)?;
    let argv = std::iter::once("biacl".to_owned()).chain(recorded.args.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(CliError::Usage("a replay manifest cannot be replayed".into()));
    }
    let changed: Vec<String> = recorded
        .inputs
        .iter()
        .filter(|i| manifest::sha256_file(&i.path).map_or(true, |h| h != i.sha256))
        .map(|i| format!("input {}", i.path.display()))
        .collect();
    if !changed.is_empty() {
        return Err(CliError::Mismatch(changed));
    }
    run(cli, &recorded.args)?;
    let changed = manifest::changed_outputs(&recorded);
    if changed.is_empty() {
        println!("replay matches {} recorded outputs", recorded.outputs.len());
        Ok(())
    } else {
        Err(CliError::Mismatch(changed))
    }
}
