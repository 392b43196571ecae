//! Acceptance suite: one PASS/FAIL line per criterion. Pass criterion
//! numbers as arguments to run a subset.

use std::collections::HashMap;
use std::io::BufReader;
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{bail, Result};
use storyrank::corpus::{apply_masking, build_catalog_corpus, encode_story, truncate, MaskingConfig, MixtureConfig, MixtureSampler, Origin, Truncate};
use storyrank::datagen::{generate_world, WorldConfig};
use storyrank::eval::{eligible_positions, hit_rate_at_k, ndcg_at_k, read_metrics, story_prefix, Bm25Index, EvalRecord};
use storyrank::grammar::{story_fields, StoryTransform, View};
use storyrank::lm::{batch_loss, loss_and_grad, mean_loss, Layout};
use storyrank::prompt::{RankRequest, ScoringContext};
use storyrank::vocab::TokenClass;
use storyrank::{parse, serialize, CatalogIndex, Model, ModelConfig, TaskKind, TokenId, UserStory, Vocabulary};
use storyrank_cli::pipeline::{self, with_transform, LoadedModel, RunDir};
use storyrank_cli::serve::{serve_lines, ServeConfig};
use storyrank_cli::PipelineConfig;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

/// Worlds and runs shared between criteria.
#[derive(Default)]
struct Shared {
    mid_world: Option<(CatalogIndex, Vec<UserStory>)>,
    mid_vocab: Option<Vocabulary>,
    variants: Option<(tempfile::TempDir, PipelineConfig)>,
    tiny: Option<tempfile::TempDir>,
}

impl Shared {
    /// The 5,000-user world and its vocabulary.
    fn mid(&mut self) -> Result<(&CatalogIndex, &[UserStory], &Vocabulary)> {
        if self.mid_world.is_none() {
            let cfg = WorldConfig { n_users: 5000, ..WorldConfig::default() };
            let (catalog, stories) = generate_world(&cfg)?;
            let texts: Vec<String> = stories[..500].iter().map(|s| serialize(s).map(|t| t.into_string())).collect::<Result<_, _>>()?;
            self.mid_vocab = Some(Vocabulary::build(&catalog, 128, &texts)?);
            self.mid_world = Some((catalog, stories));
        }
        let (c, s) = self.mid_world.as_ref().unwrap();
        Ok((c, s, self.mid_vocab.as_ref().unwrap()))
    }
}

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    type Check = fn(&mut Shared) -> Result<Outcome>;
    let checks: [(u32, &str, Check); 13] = [
        (1, "grammar roundtrip", c01_grammar_roundtrip),
        (2, "tokenizer roundtrip", c02_tokenizer_roundtrip),
        (3, "masking rates", c03_masking_rates),
        (4, "mixture ratio", c04_mixture_ratio),
        (5, "gradient check", c05_gradient_check),
        (6, "causality", c06_causality),
        (7, "metric oracle", c07_metric_oracle),
        (8, "bm25 fixture", c08_bm25_fixture),
        (9, "learning smoke test", c09_learning),
        (10, "unified vs item view", c10_unified_vs_view),
        (11, "session ablation", c11_session_ablation),
        (12, "serving equivalence", c12_serving_equivalence),
        (13, "determinism", c13_determinism),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    let start = Instant::now();
    for (n, name, check) in checks {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match check(&mut shared) {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !pass {
            failed += 1;
        }
        println!("{} {n:>2} {name}: {detail} [{:.1}s]", if pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {failed} failed, total {:.1}s", start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn world_10k() -> Result<(CatalogIndex, Vec<UserStory>)> {
    Ok(generate_world(&WorldConfig { n_users: 10_000, ..WorldConfig::default() })?)
}

fn c01_grammar_roundtrip(_: &mut Shared) -> Result<Outcome> {
    let (catalog, stories) = world_10k()?;
    let mut failures = 0;
    for s in &stories {
        let text = serialize(s)?;
        let ok = match parse(text.as_str(), &catalog) {
            Ok(back) => story_fields(&back) == story_fields(s) && serialize(&back)?.as_str() == text.as_str(),
            Err(_) => false,
        };
        failures += usize::from(!ok);
    }
    outcome(failures == 0, format!("{} stories, {failures} failures", stories.len()))
}

fn c02_tokenizer_roundtrip(_: &mut Shared) -> Result<Outcome> {
    let (catalog, stories) = world_10k()?;
    let texts: Vec<String> = stories.iter().map(|s| serialize(s).map(|t| t.into_string())).collect::<Result<_, _>>()?;
    let vocab = Vocabulary::build(&catalog, 128, &texts[..500])?;
    let (mut failures, mut split_domain) = (0, 0);
    for text in &texts {
        let ids = vocab.tokenize(text)?;
        if vocab.detokenize(&ids)? != *text {
            failures += 1;
        }
        let domain = ids.iter().filter(|&&id| vocab.class(id).is_some_and(TokenClass::is_domain)).count();
        if domain != text.matches("<|").count() {
            split_domain += 1;
        }
    }
    outcome(
        failures == 0 && split_domain == 0,
        format!("{} texts, {failures} roundtrip failures, {split_domain} with split domain tokens", texts.len()),
    )
}

fn c03_masking_rates(shared: &mut Shared) -> Result<Outcome> {
    let (_, stories, vocab) = shared.mid()?;
    let encoded: Vec<Vec<TokenId>> =
        stories.iter().map(|s| encode_story(s, &StoryTransform::default(), vocab)).collect::<Result<_, _>>()?;
    let cfg = MaskingConfig::default();
    let mask = vocab.mask_carousel_id();
    let unk = vocab.unknown_item_id();
    let (mut slots, mut masked, mut items, mut unks) = (0u64, 0u64, 0u64, 0u64);
    let mut pass_index = 0u64;
    while items < 1_000_000 {
        for (i, ids) in encoded.iter().enumerate() {
            let out = apply_masking(ids, vocab, &cfg, pass_index * encoded.len() as u64 + i as u64);
            for (j, (&a, &b)) in ids.iter().zip(&out).enumerate() {
                if vocab.class(a) == Some(TokenClass::Surface) && j + 1 < ids.len() {
                    let next = ids[j + 1];
                    if vocab.class(next) == Some(TokenClass::Carousel) || next == vocab.empty_carousel_id() {
                        slots += 1;
                        masked += u64::from(out[j + 1] == mask);
                    }
                }
                if vocab.is_item(a) {
                    items += 1;
                    unks += u64::from(b == unk);
                }
            }
        }
        pass_index += 1;
    }
    let mask_rate = masked as f64 / slots as f64;
    let unk_rate = unks as f64 / items as f64;
    outcome(
        slots >= 100_000 && (0.095..=0.105).contains(&mask_rate) && (0.0005..=0.0015).contains(&unk_rate),
        format!("carousel mask {mask_rate:.5} over {slots} watches, unk {unk_rate:.6} over {items} item tokens"),
    )
}

fn c04_mixture_ratio(shared: &mut Shared) -> Result<Outcome> {
    let (catalog, stories, vocab) = shared.mid()?;
    let encoded: Vec<Vec<TokenId>> =
        stories.iter().map(|s| encode_story(s, &StoryTransform::default(), vocab)).collect::<Result<_, _>>()?;
    let cat = build_catalog_corpus(catalog, vocab)?;
    let sampler = MixtureSampler::new(&encoded, &cat, vocab, MixtureConfig::default(), MaskingConfig::none())?;
    let n = 210_000u64;
    let story = (0..n).filter(|&i| sampler.draw(i).origin == Origin::Story).count();
    let frac = story as f64 / n as f64;
    outcome((0.947..=0.958).contains(&frac), format!("story fraction {frac:.5} over {n} draws"))
}

fn c05_gradient_check(_: &mut Shared) -> Result<Outcome> {
    let cfg = ModelConfig {
        vocab_size: 13,
        context_length: 16,
        layers: 2,
        heads: 2,
        model_dim: 8,
        mlp_hidden_dim: None,
        tie_embeddings: false,
        rope_base: 10_000.0,
        norm_eps: 1e-5,
        init_std: 0.3,
    };
    let mut model = Model::<f64>::init(cfg, 11)?;
    let a: &[TokenId] = &[1, 5, 9, 2, 12, 3];
    let b: &[TokenId] = &[7, 0, 4, 4];
    let batch = [a, b];
    let (_, grads) = loss_and_grad(&model, &batch)?;
    let eps = 1e-5;
    let mut worst: HashMap<&'static str, f64> = HashMap::new();
    let tensors = model.layout().tensors().to_vec();
    for t in &tensors {
        let group = Layout::group_of(&t.name);
        for i in t.offset..t.offset + t.len() {
            let orig = model.params[i];
            model.params[i] = orig + eps;
            let up = batch_loss(&model, &batch)?;
            model.params[i] = orig - eps;
            let down = batch_loss(&model, &batch)?;
            model.params[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (numeric - grads[i]).abs() / numeric.abs().max(grads[i].abs()).max(1e-6);
            let w = worst.entry(group).or_default();
            *w = w.max(err);
        }
    }
    let mut groups: Vec<_> = worst.into_iter().collect();
    groups.sort_by(|x, y| x.0.cmp(y.0));
    let pass = groups.len() == 5 && groups.iter().all(|g| g.1 < 1e-4);
    let detail = groups.iter().map(|(g, e)| format!("{g} {e:.2e}")).collect::<Vec<_>>().join(", ");
    outcome(pass, format!("max relative error per group: {detail}"))
}

fn c06_causality(_: &mut Shared) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = 17;
    let mut configs = 0;
    let mut mismatches = 0;
    for layers in [1, 2, 4] {
        for heads in [1, 2, 4] {
            let cfg = ModelConfig {
                vocab_size: v,
                context_length: 32,
                layers,
                heads,
                model_dim: 16,
                mlp_hidden_dim: None,
                tie_embeddings: false,
                rope_base: 10_000.0,
                norm_eps: 1e-5,
                init_std: 0.2,
            };
            let model = Model::<f64>::init(cfg, rng.gen())?;
            let ids: Vec<TokenId> = (0..20).map(|_| rng.gen_range(0..v as TokenId)).collect();
            let full = model.forward(&ids)?;
            for t in 1..ids.len() {
                let part = model.forward(&ids[..t])?;
                let mut altered = ids[..t].to_vec();
                altered.extend((t..ids.len()).map(|_| rng.gen_range(0..v as TokenId)));
                let other = model.forward(&altered)?;
                if part[..] != full[..t * v] || other[..t * v] != full[..t * v] {
                    mismatches += 1;
                }
            }
            configs += 1;
        }
    }
    outcome(mismatches == 0, format!("{configs} layer/head configurations, {mismatches} prefix mismatches"))
}

fn c07_metric_oracle(_: &mut Shared) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ks = [1, 5, 8, 10, 50, 100, 200];
    let (mut mismatches, mut order_violations) = (0, 0);
    for case in 0..100 {
        let n_candidates = rng.gen_range(1..=250usize);
        let n = rng.gen_range(1..=60);
        let mut records = Vec::new();
        let mut lists = Vec::new();
        for p in 0..n {
            // an explicit ranked list; the target may be absent
            let mut list: Vec<TokenId> = (0..n_candidates as TokenId).collect();
            for i in (1..list.len()).rev() {
                list.swap(i, rng.gen_range(0..=i));
            }
            let target = if rng.gen_bool(0.1) { n_candidates as TokenId + 1 } else { rng.gen_range(0..n_candidates as TokenId) };
            let rank = list.iter().position(|&t| t == target).map(|i| i + 1);
            records.push(EvalRecord { user_id: format!("u{case}"), task: TaskKind::ItemMasked, position: p, target, rank });
            lists.push((list, target));
        }
        let mut prev = (0.0, 0.0);
        for &k in &ks {
            let (mut hits, mut dcg) = (0.0, 0.0);
            for (list, target) in &lists {
                for (i, &t) in list.iter().take(k).enumerate() {
                    if t == *target {
                        hits += 1.0;
                        // single relevant item: the ideal DCG is 1
                        dcg += 1.0 / ((i + 2) as f64).log2();
                    }
                }
            }
            let oracle = (hits / n as f64, dcg / n as f64);
            let got = (hit_rate_at_k(&records, k)?, ndcg_at_k(&records, k)?);
            mismatches += usize::from(got != oracle);
            order_violations += usize::from(got.1 > got.0 || got.0 < prev.0 || got.1 < prev.1);
            prev = got;
        }
    }
    outcome(
        mismatches == 0 && order_violations == 0,
        format!("100 cases x {} cutoffs, {mismatches} mismatches, {order_violations} ordering violations", ks.len()),
    )
}

fn c08_bm25_fixture(_: &mut Shared) -> Result<Outcome> {
    let docs = [
        ("d1".to_string(), "fog city".to_string()),
        ("d2".to_string(), "fog fog harbor".to_string()),
        ("d3".to_string(), "night train".to_string()),
    ];
    let index = Bm25Index::new(&docs, 1.2, 0.75);
    // By hand: N = 3, avgdl = 7/3, df(fog) = 2, df(harbor) = 1.
    let idf_fog = (1.5f64 / 2.5 + 1.0).ln();
    let idf_harbor = (2.5f64 / 1.5 + 1.0).ln();
    let norm = |len: f64| 1.2 * (0.25 + 0.75 * len / (7.0 / 3.0));
    let d1 = idf_fog * 2.2 / (1.0 + norm(2.0));
    let d2 = idf_fog * 2.0 * 2.2 / (2.0 + norm(3.0));
    let d2_harbor = d2 + idf_harbor * 2.2 / (1.0 + norm(3.0));
    let pinned = [(d1, 0.4991762683023676), (d2, 0.5981864372218454), (d2_harbor, 1.476370768406763)];
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1e-300);
    let mut ok = pinned.iter().all(|&(a, b)| close(a, b));
    let fog = index.rank("fog")?;
    let expect = [("d2", d2), ("d1", d1), ("d3", 0.0)];
    ok &= fog.len() == 3 && fog.iter().zip(&expect).all(|((id, s), (eid, es))| id == eid && (close(*s, *es) || *s == *es));
    let both = index.rank("fog harbor")?;
    ok &= both[0].0 == "d2" && close(both[0].1, d2_harbor);
    outcome(ok, format!("fog: {fog:?}; fog harbor top {:?}", both[0]))
}

/// Writes the 5,000-user world, vocabulary and split config into a run dir.
fn prepare_run(dir: &Path, model_dim: usize, layers: usize, steps: u64) -> Result<(PipelineConfig, RunDir)> {
    let mut cfg = PipelineConfig::default();
    cfg.world.n_users = 5000;
    cfg.model.model_dim = model_dim;
    cfg.model.layers = layers;
    cfg.train.learning_rate = 1e-3;
    cfg.train.warmup_steps = 50;
    cfg.train.batch_size = 8;
    cfg.train.macro_steps = steps;
    cfg.eval.max_users = Some(100);
    cfg.validate()?;
    let run = RunDir::new(dir);
    pipeline::gen_data(&cfg, &run)?;
    pipeline::build_vocab(&cfg, &run)?;
    Ok((cfg, run))
}

fn c09_learning(_: &mut Shared) -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let (mut cfg, run) = prepare_run(dir.path(), 128, 4, 400)?;
    cfg.eval.tasks = vec![TaskKind::ItemMasked];
    pipeline::build_corpus(&cfg, &run)?;
    let summary = pipeline::train(&cfg, &run, &mut |_| {})?;
    let out = pipeline::eval(&cfg, &run, &[summary.checkpoint.clone()])?;

    let vocab = pipeline::load_vocab(&run.vocab())?;
    let stories = pipeline::load_stories(&run.stories())?;
    let (_, held_out) = pipeline::split(&cfg, &stories)?;
    let held: Vec<Vec<TokenId>> = held_out
        .iter()
        .take(100)
        .map(|s| {
            let mut ids = encode_story(s, &StoryTransform::default(), &vocab)?;
            truncate(&mut ids, cfg.model.context_length, Truncate::Head);
            Ok(ids)
        })
        .collect::<Result<_>>()?;
    let LoadedModel::F32(ck) = LoadedModel::load(&summary.checkpoint)? else { bail!("expected a 32-bit checkpoint") };
    let loss = mean_loss(&ck.model, &held)?;
    let uniform = (vocab.len() as f64).ln();
    let reduction = 1.0 - loss / uniform;

    let hr = |method: &str| {
        out.rows.iter().find(|r| r.method == method && r.k == 8 && r.task == TaskKind::ItemMasked).and_then(|r| r.hr)
    };
    let (Some(model_hr), Some(pop_hr)) = (hr("full"), hr("popularity (reference)")) else { bail!("missing HR@8 rows") };
    let lift = model_hr / pop_hr - 1.0;
    outcome(
        reduction >= 0.30 && lift >= 0.20,
        format!(
            "{} steps; held-out loss {loss:.3} vs ln V {uniform:.3} ({:.1}% lower); item HR@8 {model_hr:.4} vs popularity {pop_hr:.4} (+{:.1}%)",
            summary.steps,
            reduction * 100.0,
            lift * 100.0
        ),
    )
}

const VARIANT_STEPS: u64 = 1500;

/// Trains the full, item-view and no-session variants on one world and
/// evaluates them together.
fn variants(shared: &mut Shared) -> Result<(PipelineConfig, RunDir)> {
    if shared.variants.is_none() {
        let dir = tempfile::tempdir()?;
        let (mut cfg, run) = prepare_run(dir.path(), 64, 2, VARIANT_STEPS)?;
        cfg.eval.tasks = vec![TaskKind::ItemMasked, TaskKind::Search];
        let transforms = [
            StoryTransform::default(),
            StoryTransform { view: Some(View::Item), ..StoryTransform::default() },
            StoryTransform { strip_sessions: true, ..StoryTransform::default() },
        ];
        let mut checkpoints = Vec::new();
        for t in transforms {
            let c = with_transform(&cfg, t);
            pipeline::build_corpus(&c, &run)?;
            checkpoints.push(pipeline::train(&c, &run, &mut |_| {})?.checkpoint);
        }
        pipeline::eval(&cfg, &run, &checkpoints)?;
        shared.variants = Some((dir, cfg));
    }
    let (dir, cfg) = shared.variants.as_ref().unwrap();
    Ok((cfg.clone(), RunDir::new(dir.path())))
}

fn metric(rows: &[storyrank::eval::MetricRow], method: &str, task: TaskKind) -> Option<f64> {
    rows.iter().find(|r| r.method == method && r.task == task && r.k == 8).and_then(|r| r.hr)
}

fn c10_unified_vs_view(shared: &mut Shared) -> Result<Outcome> {
    let (_, run) = variants(shared)?;
    let rows = read_metrics(BufReader::new(std::fs::File::open(run.metrics())?))?;
    let (Some(full), Some(item)) = (metric(&rows, "full", TaskKind::Search), metric(&rows, "item_view", TaskKind::Search))
    else {
        bail!("missing search HR@8 rows")
    };
    let full_item = metric(&rows, "full", TaskKind::ItemMasked).unwrap_or(f64::NAN);
    let view_item = metric(&rows, "item_view", TaskKind::ItemMasked).unwrap_or(f64::NAN);
    outcome(
        full >= item,
        format!(
            "search HR@8 unified {full:.4} vs item view {item:.4}; item HR@8 (not gated) unified {full_item:.4} vs item view {view_item:.4}"
        ),
    )
}

fn c11_session_ablation(shared: &mut Shared) -> Result<Outcome> {
    let (_, run) = variants(shared)?;
    let text = std::fs::read_to_string(run.metrics())?;
    let keys = ["method", "task", "K", "hr", "ndcg", "n_positions", "config_hash"];
    let mut schema_ok = !text.is_empty();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let obj = v.as_object().cloned().unwrap_or_default();
        schema_ok &= obj.len() == keys.len() && keys.iter().all(|k| obj.contains_key(*k));
    }
    let rows = read_metrics(text.as_bytes())?;
    let full = metric(&rows, "full", TaskKind::Search);
    let no_session = metric(&rows, "no_session", TaskKind::Search);
    let both = full.is_some() && no_session.is_some();
    outcome(
        schema_ok && both,
        format!(
            "{} rows, schema {}; search HR@8 full {:.4} vs no session {:.4} (directional, not gated)",
            rows.len(),
            if schema_ok { "ok" } else { "mismatch" },
            full.unwrap_or(f64::NAN),
            no_session.unwrap_or(f64::NAN)
        ),
    )
}

/// Requests replayed from held-out positions of every task kind.
fn replay_requests(stories: &[UserStory], n: usize) -> Vec<RankRequest> {
    let mut out = Vec::new();
    'outer: for story in stories {
        for kind in [TaskKind::ItemMasked, TaskKind::Carousel, TaskKind::Search, TaskKind::ItemContextual] {
            for pos in eligible_positions(story, kind).into_iter().step_by(3) {
                out.push(RankRequest {
                    id: Some(format!("r{}", out.len())),
                    story: story_prefix(story, pos.prefix_events),
                    task: kind,
                    now: Some(pos.now),
                    hour: Some(pos.context.hour),
                    surface: pos.context.surface,
                    carousel: pos.context.carousel.clone(),
                    query: pos.context.query.clone(),
                    top_k: 10_000,
                });
                if out.len() == n {
                    break 'outer;
                }
            }
        }
    }
    out
}

/// Compares batched serving with one `rank` call per request.
fn compare_serving(model: &LoadedModel, vocab: &Vocabulary, requests: &[RankRequest], exact: bool) -> Result<(bool, String)> {
    let input: String = requests.iter().map(|r| serde_json::to_string(r).map(|s| s + "\n")).collect::<Result<_, _>>()?;
    let cfg = ServeConfig { batch_window: Duration::from_millis(20), max_batch: 16, queue_capacity: 1024 };
    let mut output = Vec::new();
    let stats = serve_lines(model, vocab, cfg, input.as_bytes(), &mut output)?;
    let mut served: HashMap<String, Vec<(TokenId, f64)>> = HashMap::new();
    for line in String::from_utf8(output)?.lines() {
        let resp: storyrank::prompt::RankResponse = serde_json::from_str(line)?;
        served.insert(resp.id.clone().unwrap_or_default(), resp.candidates.iter().map(|c| (c.token_id, c.logit)).collect());
    }
    let (mut order_diff, mut logit_diff, mut bad_counter) = (0, 0, 0);
    let mut max_rel = 0.0f64;
    let transform = model.meta().transform;
    for req in requests {
        let ctx = ScoringContext::new();
        let prompt = req.prompt(vocab, &transform, model.context_length())?;
        let list = model.rank(&prompt, &ctx)?;
        bad_counter += usize::from(ctx.forward_calls() != 1);
        let Some(got) = served.get(req.id.as_deref().unwrap_or_default()) else {
            order_diff += 1;
            continue;
        };
        let want: Vec<(TokenId, f64)> = list.0.iter().map(|s| (s.token_id, s.logit)).collect();
        if got.len() != want.len() || got.iter().zip(&want).any(|(a, b)| a.0 != b.0) {
            order_diff += 1;
        }
        for (a, b) in got.iter().zip(&want) {
            let rel = (a.1 - b.1).abs() / b.1.abs().max(1e-30);
            max_rel = max_rel.max(rel);
            if (exact && a.1.to_bits() != b.1.to_bits()) || (!exact && rel > 1e-5) {
                logit_diff += 1;
            }
        }
    }
    let pass = order_diff == 0 && logit_diff == 0 && bad_counter == 0 && stats.requests == requests.len() as u64 && stats.forward_passes < stats.requests;
    Ok((
        pass,
        format!(
            "{} requests in {} forward passes; {order_diff} order diffs, {logit_diff} logit diffs (max rel {max_rel:.1e}), {bad_counter} unbatched calls with counter != 1",
            stats.requests, stats.forward_passes
        ),
    ))
}

fn tiny_config() -> Result<PipelineConfig> {
    PipelineConfig::from_toml(&std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml"))?)
}

fn c12_serving_equivalence(shared: &mut Shared) -> Result<Outcome> {
    let (cfg, run) = variants(shared)?;
    let vocab = pipeline::load_vocab(&run.vocab())?;
    let stories = pipeline::load_stories(&run.stories())?;
    let (_, held_out) = pipeline::split(&cfg, &stories)?;
    let requests = replay_requests(&held_out, 500);
    let model32 = LoadedModel::load(&run.checkpoint(&StoryTransform::default()))?;
    let (pass32, detail32) = compare_serving(&model32, &vocab, &requests, false)?;

    let tiny_dir = tiny_run(shared)?;
    let tiny = RunDir::new(tiny_dir);
    let tcfg = tiny_config()?;
    let tvocab = pipeline::load_vocab(&tiny.vocab())?;
    let tstories = pipeline::load_stories(&tiny.stories())?;
    let (_, theld) = pipeline::split(&tcfg, &tstories)?;
    let model64 = LoadedModel::load(&tiny.checkpoint(&StoryTransform::default()))?;
    let treqs = replay_requests(&theld, 500);
    let (pass64, detail64) = compare_serving(&model64, &tvocab, &treqs, true)?;
    outcome(
        pass32 && pass64 && requests.len() == 500 && treqs.len() == 500,
        format!("32-bit: {detail32}; 64-bit: {detail64}"),
    )
}

fn tiny_run(shared: &mut Shared) -> Result<&Path> {
    if shared.tiny.is_none() {
        let dir = tempfile::tempdir()?;
        pipeline::run_all(&tiny_config()?, &RunDir::new(dir.path()))?;
        shared.tiny = Some(dir);
    }
    Ok(shared.tiny.as_ref().unwrap().path())
}

fn c13_determinism(shared: &mut Shared) -> Result<Outcome> {
    let cfg = tiny_config()?;
    let first = tiny_run(shared)?.to_path_buf();
    let second = tempfile::tempdir()?;
    pipeline::run_all(&cfg, &RunDir::new(second.path()))?;
    let (a, b) = (RunDir::new(&first), RunDir::new(second.path()));
    let t = StoryTransform::default();
    let files = [
        ("stories", a.stories(), b.stories()),
        ("vocab", a.vocab(), b.vocab()),
        ("corpus", a.corpus(&t), b.corpus(&t)),
        ("checkpoint", a.checkpoint(&t), b.checkpoint(&t)),
        ("metrics", a.metrics(), b.metrics()),
    ];
    let mut diffs = Vec::new();
    for (name, x, y) in &files {
        if std::fs::read(x)? != std::fs::read(y)? {
            diffs.push(*name);
        }
    }
    let dtype = LoadedModel::load(&a.checkpoint(&t))?.meta().dtype;
    outcome(
        diffs.is_empty() && dtype == storyrank::Dtype::F64,
        format!("{} artifacts compared ({dtype:?} checkpoint), differing: {diffs:?}", files.len()),
    )
}
