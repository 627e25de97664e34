//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs offline against the mock backend.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use pertforge::backend::{Backend, CostLedger, MockBackend, Phase, RequestKind};
use pertforge::backend::{CallRecord, TokenSource};
use pertforge::metrics::{
    lev_similarity, levenshtein, rouge, sari, semantic_similarity, RougeVariant, SimilarityKind,
    SimilarityVerdict,
};
use pertforge::perturb::{
    adversarial_select, build_benchmark, guide_for, perturb_iterative, perturb_long_text,
    split_sentences, AttackContext, Category, GuideBook, PerturbConfig, PerturbError,
    PerturbationCode, SensitivityMatrix,
};
use pertforge::pgo::{Optimizer, PgoConfig, Prompt, RunStore};
use pertforge::tasks::{load_dataset, Gold, Sample, TaskKind, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets")
}

fn robust_mock() -> MockBackend {
    MockBackend::from_path(&assets().join("mock-robust.json")).expect("bundled script")
}

fn sentiment() -> TaskSpec {
    TaskSpec::classification(["positive", "negative"])
}

// ---------------------------------------------------------------------------
// 1. Metric oracles

const ALPHABET: [u8; 3] = *b"abc";
const MAX_LEN: usize = 7;

/// Every string over the alphabet up to `MAX_LEN`, and the one-edit graph
/// between them.
struct EditGraph {
    strings: Vec<String>,
    index: HashMap<String, usize>,
    adjacent: Vec<Vec<u32>>,
}

impl EditGraph {
    fn new() -> Self {
        let mut strings = vec![String::new()];
        let mut frontier = vec![String::new()];
        for _ in 0..MAX_LEN {
            let mut next = Vec::new();
            for s in &frontier {
                for &c in &ALPHABET {
                    let mut t = s.clone();
                    t.push(c as char);
                    next.push(t);
                }
            }
            strings.extend(next.iter().cloned());
            frontier = next;
        }
        let index: HashMap<String, usize> = strings
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        let adjacent = strings
            .iter()
            .map(|s| {
                let bytes = s.as_bytes();
                let mut out = HashSet::new();
                for i in 0..bytes.len() {
                    let mut del = bytes.to_vec();
                    del.remove(i);
                    out.insert(del);
                    for &c in &ALPHABET {
                        if c != bytes[i] {
                            let mut sub = bytes.to_vec();
                            sub[i] = c;
                            out.insert(sub);
                        }
                    }
                }
                if bytes.len() < MAX_LEN {
                    for i in 0..=bytes.len() {
                        for &c in &ALPHABET {
                            let mut ins = bytes.to_vec();
                            ins.insert(i, c);
                            out.insert(ins);
                        }
                    }
                }
                out.into_iter()
                    .map(|b| index[&String::from_utf8(b).unwrap()] as u32)
                    .collect()
            })
            .collect();
        EditGraph {
            strings,
            index,
            adjacent,
        }
    }

    /// Shortest edit-script length from `source` to every string. Optimal
    /// scripts never need an intermediate string longer than both ends, so
    /// the bounded graph is exact.
    fn distances(&self, source: usize) -> Vec<u8> {
        let mut dist = vec![u8::MAX; self.strings.len()];
        dist[source] = 0;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacent[u] {
                let v = v as usize;
                if dist[v] == u8::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

fn levenshtein_oracle() -> Outcome {
    let start = Instant::now();
    let graph = EditGraph::new();
    ensure!(
        graph.strings.len() == 3280,
        "expected 3280 strings, built {}",
        graph.strings.len()
    );
    ensure!(
        graph.index.len() == graph.strings.len(),
        "duplicate strings"
    );
    let n = graph.strings.len();
    let workers = std::thread::available_parallelism().map_or(4, |p| p.get());
    let mismatches: Vec<String> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let graph = &graph;
                scope.spawn(move || {
                    let mut bad = Vec::new();
                    for s in (w..n).step_by(workers) {
                        let dist = graph.distances(s);
                        for (t, &d) in dist.iter().enumerate() {
                            let got = levenshtein(&graph.strings[s], &graph.strings[t]);
                            if got != d as usize && bad.len() < 5 {
                                bad.push(format!(
                                    "{:?} vs {:?}: {got} != {d}",
                                    graph.strings[s], graph.strings[t]
                                ));
                            }
                        }
                    }
                    bad
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().unwrap())
            .collect()
    });
    ensure!(
        mismatches.is_empty(),
        "levenshtein mismatches: {mismatches:?}"
    );
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "oracle took {elapsed:?}");
    Ok(format!("{} pairs in {:.1}s", n * n, elapsed.as_secs_f64()))
}

/// (candidate, reference, ROUGE-1 F1, ROUGE-2 F1, ROUGE-L F1), enumerated by hand.
const ROUGE_GOLDEN: [(&str, &str, f64, f64, f64); 10] = [
    (
        "the cat sat on the mat",
        "the cat sat on the mat",
        1.0,
        1.0,
        1.0,
    ),
    ("the cat", "the dog", 0.5, 0.0, 0.5),
    ("a b c d", "a c b d", 1.0, 0.0, 0.75),
    ("a a b", "a b b", 2.0 / 3.0, 0.5, 2.0 / 3.0),
    (
        "the quick brown fox",
        "the brown fox",
        6.0 / 7.0,
        0.4,
        6.0 / 7.0,
    ),
    (
        "police closed the road",
        "the road was closed by police",
        0.8,
        0.25,
        0.4,
    ),
    ("x y z", "a b c", 0.0, 0.0, 0.0),
    ("a b a b", "a b", 2.0 / 3.0, 0.5, 2.0 / 3.0),
    ("one two three four five", "one three five", 0.75, 0.0, 0.75),
    ("the the the", "the the", 0.8, 2.0 / 3.0, 0.8),
];

fn ngram_bag<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, f64> {
    let mut bag = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *bag.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    bag
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// SARI written out directly from its definition: per n-gram order, keep F1
/// (source and candidate counts scaled by the number of references),
/// deletion precision and addition F1 over n-gram sets, each averaged over
/// orders 1..4; undefined ratios count as 1.
fn sari_oracle(source: &str, candidate: &str, references: &[&str]) -> f64 {
    let src: Vec<&str> = source.split_whitespace().collect();
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refs: Vec<Vec<&str>> = references
        .iter()
        .map(|r| r.split_whitespace().collect())
        .collect();
    let m = refs.len() as f64;
    let ratio = |num: f64, den: f64| if den == 0.0 { 1.0 } else { num / den };
    let (mut keep, mut del, mut add) = (0.0, 0.0, 0.0);
    for n in 1..=4 {
        let s: HashMap<_, f64> = ngram_bag(&src, n)
            .into_iter()
            .map(|(k, v)| (k, v * m))
            .collect();
        let c: HashMap<_, f64> = ngram_bag(&cand, n)
            .into_iter()
            .map(|(k, v)| (k, v * m))
            .collect();
        let mut r: HashMap<Vec<&str>, f64> = HashMap::new();
        for tokens in &refs {
            for (k, v) in ngram_bag(tokens, n) {
                *r.entry(k).or_insert(0.0) += v;
            }
        }
        let get = |bag: &HashMap<Vec<&str>, f64>, k: &Vec<&str>| bag.get(k).copied().unwrap_or(0.0);

        let kept: Vec<(&Vec<&str>, f64)> = s
            .iter()
            .filter_map(|(k, &v)| c.get(k).map(|&w| (k, v.min(w))))
            .collect();
        let keep_all: Vec<(&Vec<&str>, f64)> = s
            .iter()
            .filter_map(|(k, &v)| r.get(k).map(|&w| (k, v.min(w))))
            .collect();
        let all_of = |k: &Vec<&str>| {
            keep_all
                .iter()
                .find(|(g, _)| *g == k)
                .map_or(0.0, |(_, v)| *v)
        };
        let p_sum: f64 = kept.iter().map(|(k, v)| v.min(get(&r, k)) / v).sum();
        let r_sum: f64 = kept
            .iter()
            .filter(|(k, _)| all_of(k) > 0.0)
            .map(|(k, v)| v.min(get(&r, k)) / all_of(k))
            .sum();
        keep += f1(
            ratio(p_sum, kept.len() as f64),
            ratio(r_sum, keep_all.len() as f64),
        );

        let deleted: Vec<(&Vec<&str>, f64)> = s
            .iter()
            .map(|(k, &v)| (k, v - get(&c, k)))
            .filter(|(_, v)| *v > 0.0)
            .collect();
        let d_sum: f64 = deleted
            .iter()
            .map(|(k, v)| (v - get(&r, k)).max(0.0) / v)
            .sum();
        del += ratio(d_sum, deleted.len() as f64);

        let added: Vec<&Vec<&str>> = c.keys().filter(|k| !s.contains_key(*k)).collect();
        let good = added.iter().filter(|k| r.contains_key(**k)).count() as f64;
        let add_all = r.keys().filter(|k| !s.contains_key(*k)).count() as f64;
        add += f1(ratio(good, added.len() as f64), ratio(good, add_all));
    }
    (keep / 4.0 + del / 4.0 + add / 4.0) / 3.0
}

const SARI_GOLDEN: [(&str, &str, &[&str]); 10] = [
    ("the big cat", "the large cat", &["the large cat"]),
    ("the big cat", "", &["the big cat"]),
    (
        "about 95 species are currently accepted",
        "about 95 species are accepted",
        &[
            "about 95 species are currently known",
            "about 95 species are now accepted",
            "95 species are now accepted",
        ],
    ),
    (
        "the cat perched on the mat",
        "the cat sat on the mat",
        &["the cat sat on the mat", "a cat sat on a mat"],
    ),
    (
        "he is a very gifted and talented musician",
        "he is a talented musician",
        &["he is a very talented musician", "he is a gifted musician"],
    ),
    ("a b c d e", "a b c d e", &["a b c d e"]),
    ("a b c d e", "f g h", &["a b f", "c d g"]),
    (
        "the storm closed every school in the county",
        "the storm shut all schools",
        &[
            "the storm closed all schools in the county",
            "schools were shut by the storm",
        ],
    ),
    (
        "one two three four five six",
        "one two three",
        &["one two three four"],
    ),
    ("x y z", "x y z w", &["x y", "y z w", "x z"]),
];

fn metric_oracles() -> Outcome {
    let lev = levenshtein_oracle()?;
    for (cand, reference, r1, r2, rl) in ROUGE_GOLDEN {
        for (variant, expected) in [
            (RougeVariant::Rouge1, r1),
            (RougeVariant::Rouge2, r2),
            (RougeVariant::RougeL, rl),
        ] {
            let got = rouge(cand, reference, variant).f1;
            ensure!(
                (got - expected).abs() < 1e-9,
                "{variant:?}({cand:?}, {reference:?}) = {got}, expected {expected}"
            );
        }
    }
    for (i, (src, cand, refs)) in SARI_GOLDEN.iter().enumerate() {
        let owned: Vec<String> = refs.iter().map(|r| r.to_string()).collect();
        let got = sari(src, cand, &owned).map_err(|e| e.to_string())?.overall;
        let expected = sari_oracle(src, cand, refs);
        ensure!(
            (got - expected).abs() < 1e-9,
            "SARI triple {i}: {got} vs oracle {expected}"
        );
    }
    let anchor = sari_oracle("the big cat", "the large cat", &["the large cat"]);
    ensure!(
        (anchor - 1.0).abs() < 1e-12,
        "oracle anchor drifted: {anchor}"
    );
    let anchor = sari_oracle("the big cat", "", &["the big cat"]);
    ensure!(
        (anchor - 0.5).abs() < 1e-12,
        "oracle anchor drifted: {anchor}"
    );
    Ok(format!(
        "levenshtein {lev}; 10 ROUGE pairs x 3 variants; 10 SARI triples"
    ))
}

// ---------------------------------------------------------------------------
// 2. Gate soundness

const SHORT_TEXTS: [&str; 8] = [
    "The service at this place was quick and friendly.",
    "I would not buy this blender again, it broke in a week.",
    "A moving story with a cast that clearly cared.",
    "Battery life is poor and the screen scratches easily.",
    "What a delightful little cafe on the corner of the square.",
    "The plot drags in the middle but the ending pays off.",
    "Shipping took a month and the box arrived crushed.",
    "Clean rooms, helpful staff and a quiet street outside.",
];

fn gate_script() -> MockBackend {
    MockBackend::from_json(
        &json!({ "version": 1, "rules": [
            { "kind": "perturb", "label": "C1", "action": { "op": "choose", "options": [
                { "op": "typo", "edits": 1 }, { "op": "typo", "edits": 3 },
                { "op": "typo", "edits": 6 }, { "op": "typo", "edits": 12 }
            ] } },
            { "kind": "perturb", "label": "S1", "action": { "op": "choose", "options": [
                { "op": "append", "suffix": " @ab" }, { "op": "append", "suffix": " @someone_with_a_long_handle" }
            ] } },
            { "kind": "perturb", "label": "S2", "action": { "op": "choose", "options": [
                { "op": "append", "suffix": " indeed" },
                { "op": "prepend", "prefix": "Honestly, " },
                { "op": "template", "text": "totally unrelated words here" },
                { "op": "append", "suffix": " and then many more new words were added until meaning drifted away" }
            ] } },
            { "kind": "perturb", "label": "W1", "action": { "op": "choose", "options": [
                { "op": "replace", "pattern": "\\bthe\\b", "with": "this" },
                { "op": "template", "text": "zebra quantum orchestra" }
            ] } }
        ], "fallback": { "op": "template", "text": "positive" } })
        .to_string(),
    )
    .unwrap()
}

fn gate_soundness() -> Outcome {
    let backend = gate_script();
    let task = sentiment();
    let codes = [
        PerturbationCode::C1,
        PerturbationCode::S1,
        PerturbationCode::S2,
        PerturbationCode::W1,
    ];
    let (mut emitted, mut rejected, mut rounds) = (0usize, 0usize, 0usize);
    for run in 0..1000u64 {
        let code = codes[run as usize % codes.len()];
        let spec = guide_for(code.as_str()).map_err(|e| e.to_string())?;
        let config = PerturbConfig {
            seed: run,
            ..PerturbConfig::default()
        };
        let salt = format!("gate-{run}");
        let ctx = AttackContext {
            task: &task,
            prompt_text: "Classify the review.",
            backend: &backend,
            config: &config,
            salt: &salt,
        };
        let text = SHORT_TEXTS[(run / 4) as usize % SHORT_TEXTS.len()];
        let gold = Gold::Label("positive".into());
        match perturb_iterative(&format!("s{run}"), text, &gold, &spec, config.rounds, &ctx) {
            Ok(sample) => {
                emitted += 1;
                let epsilon = config.epsilon(code.category(), false);
                let mut texts: Vec<&str> = sample
                    .iterations
                    .iter()
                    .map(|t| t.candidate.as_str())
                    .collect();
                texts.push(&sample.perturbed);
                for t in texts {
                    rounds += 1;
                    let sim = match code.category() {
                        Category::P1 => lev_similarity(text, t),
                        Category::P2 => {
                            semantic_similarity(text, t, &backend).map_err(|e| e.to_string())?
                        }
                    };
                    ensure!(
                        sim >= epsilon,
                        "run {run} ({code}): similarity {sim} < {epsilon} for {t:?}"
                    );
                }
            }
            Err(PerturbError::Unperturbable { .. }) => rejected += 1,
            Err(e) => return Err(format!("run {run}: {e}")),
        }
    }
    ensure!(
        emitted > 0 && rejected > 0,
        "gate never exercised: {emitted} emitted, {rejected} rejected"
    );
    Ok(format!(
        "1000 runs: {emitted} emitted ({rounds} gated texts checked), {rejected} fully gated out"
    ))
}

// ---------------------------------------------------------------------------
// 3. Adversarial selection

fn argmin_trials() -> Outcome {
    let task = TaskSpec::summarization();
    let reference = "storm closes schools across the county today";
    let words: Vec<&str> = reference.split(' ').collect();
    let gold = Gold::References(vec![reference.to_owned()]);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let similarities = [0.91, 0.95, 0.95, 0.99];
    let mut ties = 0;
    for trial in 0..200 {
        let n = rng.random_range(1..=6);
        let mut entries = Vec::new();
        let mut lookup = Vec::new();
        let mut gated = Vec::new();
        for i in 0..n {
            let keep = rng.random_range(0..=4usize);
            let output = words[..keep].join(" ");
            let sim = similarities[rng.random_range(0..similarities.len())];
            let text = format!("candidate qz{i}q for trial {trial}");
            lookup.push(json!({ "contains": format!("qz{i}q"), "respond": output }));
            let expected = rouge(&output, reference, RougeVariant::Rouge1).f1
                + rouge(&output, reference, RougeVariant::Rouge2).f1
                + rouge(&output, reference, RougeVariant::RougeL).f1;
            entries.push((expected / 3.0, sim));
            gated.push((
                text,
                SimilarityVerdict::new(SimilarityKind::Levenshtein, sim, 0.9),
            ));
        }
        let backend = MockBackend::from_json(
            &json!({ "version": 1, "rules": [
                { "kind": "task", "action": { "op": "lookup", "entries": lookup, "default": "" } }
            ] })
            .to_string(),
        )
        .unwrap();
        let mut want = 0;
        for (i, &(score, sim)) in entries.iter().enumerate().skip(1) {
            let (bs, bsim) = entries[want];
            if score < bs - 1e-12 || ((score - bs).abs() <= 1e-12 && sim > bsim) {
                want = i;
            }
        }
        if entries
            .iter()
            .filter(|(s, _)| (s - entries[want].0).abs() <= 1e-12)
            .count()
            > 1
        {
            ties += 1;
        }
        let got = adversarial_select(&gated, "Summarize.", &gold, &task, &backend)
            .map_err(|e| e.to_string())?;
        ensure!(
            got.index == want,
            "trial {trial}: selected {} but argmin is {want} ({entries:?})",
            got.index
        );
        ensure!(
            (got.score - entries[want].0).abs() < 1e-12,
            "trial {trial}: score {} != {}",
            got.score,
            entries[want].0
        );
    }
    Ok(format!("200 trials, {ties} with tied minimum scores"))
}

// ---------------------------------------------------------------------------
// 4. Long-text contract

const SUBJECTS: [&str; 8] = [
    "The council",
    "A local team",
    "The museum",
    "Researchers",
    "The airport",
    "Volunteers",
    "The hospital",
    "Police",
];
const VERBS: [&str; 6] = [
    "announced",
    "reported",
    "confirmed",
    "described",
    "welcomed",
    "reviewed",
];
const OBJECTS: [&str; 8] = [
    "a new plan for the town centre",
    "the results of a long study",
    "changes to the weekend timetable",
    "an exhibition of early photography",
    "the opening of a second entrance",
    "a programme for young readers",
    "repairs to the old bridge",
    "funding for three new projects",
];

fn long_corpus(n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    (0..n)
        .map(|_| {
            let sentences = rng.random_range(3..=6);
            (0..sentences)
                .map(|_| {
                    format!(
                        "{} {} {} on {}.",
                        SUBJECTS[rng.random_range(0..SUBJECTS.len())],
                        VERBS[rng.random_range(0..VERBS.len())],
                        OBJECTS[rng.random_range(0..OBJECTS.len())],
                        ["Monday", "Tuesday", "Friday", "Sunday"][rng.random_range(0..4)]
                    )
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

fn long_text_contract() -> Outcome {
    let backend = MockBackend::from_path(&assets().join("mock-summarization.json"))
        .map_err(|e| e.to_string())?;
    let task = TaskSpec::summarization();
    let config = PerturbConfig::default();
    let codes = [
        PerturbationCode::C1,
        PerturbationCode::C2,
        PerturbationCode::W1,
        PerturbationCode::W3,
        PerturbationCode::S1,
        PerturbationCode::S2,
        PerturbationCode::S3,
    ];
    let (mut recorded, mut violations, mut unperturbable) = (0usize, Vec::new(), 0usize);
    for (d, doc) in long_corpus(50).iter().enumerate() {
        let code = codes[d % codes.len()];
        let spec = guide_for(code.as_str()).map_err(|e| e.to_string())?;
        let ctx = AttackContext {
            task: &task,
            prompt_text: "Summarize the article in one sentence.",
            backend: &backend,
            config: &config,
            salt: "long",
        };
        let gold = Gold::References(vec!["A summary.".into()]);
        let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
        let sample = match perturb_long_text(
            &format!("d{d}"),
            doc,
            &gold,
            &spec,
            config.rounds,
            &ctx,
            &mut rng,
        ) {
            Ok(s) => s,
            Err(PerturbError::Unperturbable { .. }) => {
                unperturbable += 1;
                continue;
            }
            Err(e) => return Err(format!("doc {d}: {e}")),
        };
        let mut previous = doc.clone();
        for trace in &sample.iterations {
            recorded += 1;
            let before: Vec<String> = split_sentences(&previous)
                .texts()
                .iter()
                .map(|s| s.to_string())
                .collect();
            let after: Vec<String> = split_sentences(&trace.candidate)
                .texts()
                .iter()
                .map(|s| s.to_string())
                .collect();
            let changed: Vec<usize> = (0..before.len().max(after.len()))
                .filter(|&i| before.get(i) != after.get(i))
                .collect();
            if before.len() != after.len()
                || changed.len() != 1
                || trace.sentence_index != Some(changed[0])
            {
                violations.push(format!(
                    "doc {d} round {}: changed {changed:?}",
                    trace.round
                ));
            }
            previous = trace.candidate.clone();
        }
    }
    ensure!(
        violations.is_empty(),
        "{} violations, first: {:?}",
        violations.len(),
        violations.first()
    );
    ensure!(recorded >= 50, "only {recorded} rounds recorded");
    Ok(format!(
        "50 documents, {recorded} rounds, 0 violations ({unperturbable} unperturbable)"
    ))
}

// ---------------------------------------------------------------------------
// 5. Monotone optimization

struct RobustTask {
    task: TaskSpec,
    train: Vec<Sample>,
    validation: BTreeMap<PerturbationCode, Vec<Sample>>,
    codes: Vec<PerturbationCode>,
}

fn robust_task(backend: &dyn Backend) -> Result<RobustTask, String> {
    let task = sentiment();
    let train =
        load_dataset(&assets().join("robust-train.jsonl"), &task).map_err(|e| e.to_string())?;
    let val = load_dataset(&assets().join("robust-val.jsonl"), &task).map_err(|e| e.to_string())?;
    let codes = SensitivityMatrix::default().sensitive_in(task.kind, Category::P1);
    let built = build_benchmark(
        &val,
        &GuideBook::default().specs(&codes),
        &SensitivityMatrix::default(),
        &PerturbConfig::default(),
        "Classify the review as positive or negative.",
        backend,
    )
    .map_err(|e| e.to_string())?;
    let validation = built
        .subsets
        .into_iter()
        .map(|(code, samples)| (code, samples.iter().map(|s| s.as_sample()).collect()))
        .collect();
    Ok(RobustTask {
        task,
        train: train.samples,
        validation,
        codes,
    })
}

fn monotone_optimization() -> Outcome {
    let start = Instant::now();
    let backend = robust_mock();
    let setup = robust_task(&backend)?;
    let mut optimal = 0;
    for seed in 0..100u64 {
        let config = PgoConfig {
            seed,
            ..PgoConfig::default()
        };
        ensure!(
            (config.iterations, config.proposals, config.paraphrases) == (5, 4, 2),
            "defaults changed"
        );
        let ledger = CostLedger::new();
        let run = Optimizer {
            task: &setup.task,
            category: Category::P1,
            codes: setup.codes.clone(),
            guides: GuideBook::default().specs(&setup.codes),
            config: &config,
            backend: &backend,
            ledger: &ledger,
        }
        .run(
            Prompt::initial("Classify the review as positive or negative."),
            &setup.train,
            &setup.validation,
            None,
            false,
        )
        .map_err(|e| format!("seed {seed}: {e}"))?;
        let mut trajectory = vec![run.records[0].candidates[0].loss.score()];
        trajectory.extend(run.trajectory());
        ensure!(
            trajectory.windows(2).all(|w| w[1] >= w[0]),
            "seed {seed}: trajectory decreases: {trajectory:?}"
        );
        if run.selection.validation.score() == 1.0 {
            optimal += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(optimal >= 95, "only {optimal}/100 seeds reached 1.0");
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "100 seeds monotone, {optimal}/100 reached 1.0, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 6. Taxonomy and sensitivity defaults

fn taxonomy_defaults() -> Outcome {
    use PerturbationCode::*;
    let taxonomy = [
        (C1, "Change words to have typos", Category::P1),
        (C2, "Change Letters", Category::P1),
        (C3, "Add extraneous characters", Category::P1),
        (W1, "Change word to synonyms", Category::P2),
        (W2, "Delete meaningless words", Category::P2),
        (W3, "Add neutral words", Category::P2),
        (S1, "Add meaningless handle", Category::P1),
        (S2, "Paraphrase the sentence", Category::P2),
        (S3, "Change the syntactic structure", Category::P2),
    ];
    for (code, description, category) in taxonomy {
        let spec = guide_for(code.as_str()).map_err(|e| e.to_string())?;
        ensure!(
            spec.category == category,
            "{code} is {} not {category}",
            spec.category
        );
        ensure!(
            spec.description == description,
            "{code}: {:?}",
            spec.description
        );
    }
    // Rows C1..S3; columns summarization, simplification, classification.
    let expected: [[bool; 3]; 9] = [
        [true, false, true],
        [true, false, true],
        [false, false, false],
        [true, true, true],
        [false, true, true],
        [true, true, true],
        [true, true, false],
        [true, true, true],
        [true, true, true],
    ];
    let kinds = [
        TaskKind::Summarization,
        TaskKind::Simplification,
        TaskKind::Classification,
    ];
    let matrix = SensitivityMatrix::default();
    let mut cells = 0;
    for (row, code) in PerturbationCode::ALL.iter().enumerate() {
        for (col, kind) in kinds.iter().enumerate() {
            cells += 1;
            ensure!(
                matrix.is_sensitive(*kind, *code) == expected[row][col],
                "{kind}/{code} mismatch"
            );
        }
    }
    Ok(format!(
        "9 codes categorized, {cells} sensitivity cells, 0 mismatches"
    ))
}

// ---------------------------------------------------------------------------
// 7. Cost ledger

fn cost_ledger() -> Outcome {
    let golden = CostLedger::new();
    for (phase, prompt, completion) in [(Phase::Perturb, 6000, 400), (Phase::Optimize, 19000, 400)]
    {
        golden.record(CallRecord {
            phase,
            iteration: 1,
            kind: RequestKind::Other,
            prompt_tokens: prompt,
            completion_tokens: completion,
            source: TokenSource::Reported,
        });
    }
    let line = golden.summary().report_line();
    ensure!(
        line == "A = 0.0064M, O = 0.0194M, total = Σ(A_i + O_i) = 0.0258M",
        "golden line: {line}"
    );

    let backend = robust_mock();
    let setup = robust_task(&backend)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = RunStore::new(dir.path());
    let config = PgoConfig::default();
    let ledger = CostLedger::new();
    let run = Optimizer {
        task: &setup.task,
        category: Category::P1,
        codes: setup.codes.clone(),
        guides: GuideBook::default().specs(&setup.codes),
        config: &config,
        backend: &backend,
        ledger: &ledger,
    }
    .run(
        Prompt::initial("Classify the review."),
        &setup.train,
        &setup.validation,
        Some(&store),
        false,
    )
    .map_err(|e| e.to_string())?;
    let saved = store
        .read_ledger()
        .map_err(|e| e.to_string())?
        .ok_or("no ledger.json")?;
    for (name, l) in [("in-memory", &ledger), ("ledger.json", &saved)] {
        let s = l.summary();
        let per_call: u64 = l.calls().iter().map(CallRecord::tokens).sum();
        let decomposed: u64 = s.iterations.values().map(|c| c.perturb + c.optimize).sum();
        ensure!(
            s.total == per_call,
            "{name}: total {} != per-call sum {per_call}",
            s.total
        );
        ensure!(
            s.total == decomposed,
            "{name}: total {} != Σ(A_i + O_i) {decomposed}",
            s.total
        );
        ensure!(
            s.total == s.perturb_total + s.optimize_total,
            "{name}: A + O mismatch"
        );
    }
    ensure!(
        run.ledger == ledger.summary(),
        "final.json ledger differs from the live ledger"
    );
    ensure!(
        run.ledger.iterations.len() == 5,
        "expected 5 iterations in the ledger"
    );
    Ok(format!(
        "golden row ok; run of {} calls: {}",
        run.ledger.calls,
        run.ledger.report_line()
    ))
}

// ---------------------------------------------------------------------------
// 8 and 9. Command-line outputs

fn pertforge(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pertforge"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "pertforge {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .map(|entries| {
            entries
                .filter_map(Result::ok)
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .map(|p| {
                    (
                        p.file_name().unwrap().to_string_lossy().into_owned(),
                        fs::read(&p).unwrap(),
                    )
                })
                .collect()
        })
        .unwrap_or_default()
}

fn asset(name: &str) -> String {
    assets().join(name).display().to_string()
}

fn determinism(work: &Path) -> Outcome {
    let mut compared = 0;
    for attempt in ["a", "b"] {
        let dir = work.join(attempt);
        pertforge(&[
            "--config",
            &asset("summarization.toml"),
            "build",
            &asset("xsum-mini.jsonl"),
            "--out",
            &dir.join("xsum").display().to_string(),
        ])?;
        pertforge(&[
            "--config",
            &asset("robust.toml"),
            "build",
            &asset("robust-val.jsonl"),
            "--out",
            &dir.join("robust").display().to_string(),
        ])?;
        pertforge(&[
            "--config",
            &asset("robust.toml"),
            "optimize",
            "--train",
            &asset("robust-train.jsonl"),
            "--val",
            &asset("robust-val.jsonl"),
            "--data-dir",
            &dir.join("robust").display().to_string(),
            "--out",
            &dir.join("run").display().to_string(),
        ])?;
    }
    for sub in ["xsum", "robust", "run"] {
        let (a, b) = (
            snapshot(&work.join("a").join(sub)),
            snapshot(&work.join("b").join(sub)),
        );
        ensure!(!a.is_empty(), "{sub}: no output files");
        ensure!(a.keys().eq(b.keys()), "{sub}: file sets differ");
        for (name, bytes) in &a {
            ensure!(b[name] == *bytes, "{sub}/{name} differs between runs");
            compared += 1;
        }
    }
    Ok(format!("{compared} files byte-identical across two runs"))
}

fn is_percent(field: &str) -> bool {
    match field.split_once('.') {
        Some((int, frac)) => {
            !int.is_empty()
                && int.len() <= 3
                && int.bytes().all(|b| b.is_ascii_digit())
                && frac.len() == 2
                && frac.bytes().all(|b| b.is_ascii_digit())
                && field
                    .parse::<f64>()
                    .is_ok_and(|v| (0.0..=100.0).contains(&v))
        }
        None => false,
    }
}

fn similarity_format(work: &Path) -> Outcome {
    let csv = fs::read_to_string(work.join("a").join("xsum").join("xsum-mini.similarity.csv"))
        .map_err(|e| format!("similarity csv missing: {e}"))?;
    let mut lines = csv.lines();
    ensure!(
        lines.next() == Some("dataset,code,lev_sim_pct,sem_sim_pct"),
        "header: {:?}",
        csv.lines().next()
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    for row in &rows {
        ensure!(row.len() == 4, "row {row:?} does not have 4 columns");
        ensure!(row[0] == "xsum-mini", "dataset column {:?}", row[0]);
        ensure!(
            is_percent(row[2]) && is_percent(row[3]),
            "not 2-decimal percentages: {row:?}"
        );
    }
    let codes: Vec<&str> = rows.iter().map(|r| r[1]).collect();
    ensure!(
        codes == ["C1", "C2", "W1", "W3", "S1", "S2", "S3", "all"],
        "codes {codes:?}"
    );
    let all = rows.last().unwrap();
    Ok(format!("8 rows, xsum-mini overall {} / {}", all[2], all[3]))
}

// ---------------------------------------------------------------------------

fn run(number: usize, name: &str, check: impl FnOnce() -> Outcome) -> bool {
    let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match outcome {
        Ok(detail) => {
            println!("PASS criterion {number} ({name}): {detail}");
            true
        }
        Err(reason) => {
            println!("FAIL criterion {number} ({name}): {reason}");
            false
        }
    }
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let results = [
        run(1, "metric oracles", metric_oracles),
        run(2, "gate soundness", gate_soundness),
        run(3, "argmin selection", argmin_trials),
        run(4, "long-text contract", long_text_contract),
        run(5, "monotone optimization", monotone_optimization),
        run(6, "taxonomy and sensitivity defaults", taxonomy_defaults),
        run(7, "cost ledger", cost_ledger),
        run(8, "determinism", || determinism(work.path())),
        run(9, "similarity report format", || {
            similarity_format(work.path())
        }),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
