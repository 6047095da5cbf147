//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero when
//! any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use tbarrier::langid::{corpus_from_lexicon, gated_identify, train_profiles, DEFAULT_MAX_RANKS};
use tbarrier::lexicon::LanguageCode;
use tbarrier::logitlens::{
    iterative_lens_decode, lens_distribution, InstanceTrace, LayerToken, LensStep, TrackedLayers,
};
use tbarrier::metrics::{
    aggregate_by_source, label_trace, layer_of_switch, pair_report, AttributionMode, LabelOptions,
    LayerProfileRow, ReportOptions, SWITCH_MIN_FINAL_ACC,
};
use tbarrier::pipeline::{
    cmd_analyze, cmd_run, train_tokenizer, training_examples, training_texts, AnalyzeOptions,
    PromptTemplate, RunConfig,
};
use tbarrier::refmodel::{
    save_weights, softmax, train, ModelBundle, ModelConfig, NormKind, TrainOptions, EOS, N_SPECIAL,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let modes = [AttributionMode::Precedence, AttributionMode::Fractional];
    let sets = 40;
    let mut pairs_checked = 0;
    for set in 0..sets {
        let n_layers = rng.random_range(1..=12usize);
        let tracked = random_tracked(&mut rng, n_layers);
        let options = ReportOptions {
            cutoff_offset: rng.random_range(0..=6),
            attribution_mode: modes[set % 2],
            switch_min_final_acc: SWITCH_MIN_FINAL_ACC,
        };
        let n_pairs = rng.random_range(1..=4usize);
        let mut reports = Vec::new();
        for _ in 0..n_pairs {
            let s = lang(POOL.choose(&mut rng).unwrap());
            let t = lang(POOL.choose(&mut rng).unwrap());
            let n = rng.random_range(1..=200 / n_pairs);
            let mut set_traces = random_labeled_pair(&mut rng, &s, &t, &tracked, n);
            // report must not depend on input order
            set_traces.reverse();
            let report = pair_report(&set_traces, &options).map_err(|e| e.to_string())?;
            let oracle = oracle_pair(&set_traces, options.cutoff_offset, options.attribution_mode);
            let bad = compare_pair(&report, &oracle);
            ensure(bad.is_empty(), format!("set {set}: {}", bad.join(", ")))?;
            reports.push(report);
            pairs_checked += 1;
        }
        let bad = compare_aggregates(&reports, &aggregate_by_source(&reports));
        ensure(bad.is_empty(), format!("set {set}: {}", bad.join(", ")))?;
    }
    let elapsed = start.elapsed();
    ensure(
        elapsed < Duration::from_secs(10),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "{sets} sets, {pairs_checked} pairs, all fields equal, {elapsed:.2?}"
    ))
}

fn single_trace(
    id: &str,
    concept: &str,
    source: &str,
    target: &str,
    texts: &[(usize, &str)],
) -> InstanceTrace {
    let per_layer = texts
        .iter()
        .map(|&(l, text)| {
            (
                l,
                LayerToken {
                    token: l as u32,
                    text: text.into(),
                    prob: 0.5,
                },
            )
        })
        .collect::<BTreeMap<_, _>>();
    let last = *texts.last().map(|(l, _)| l).unwrap();
    InstanceTrace {
        instance_id: id.into(),
        concept_id: concept.into(),
        source_lang: lang(source),
        target_lang: lang(target),
        prompt: String::new(),
        steps: vec![LensStep {
            step_index: 0,
            final_token: last as u32,
            per_layer,
        }],
        external_tags: BTreeMap::new(),
    }
}

fn hand_check() -> Outcome {
    let lex = lexicon50();
    let tracked = TrackedLayers::new(vec![6, 7, 8]).unwrap();
    let opts = LabelOptions::for_lexicon(&lex);
    // (concept, English at layer 7, French at layer 8)
    let plan = [
        ("water", true, true),
        ("fire", true, true),
        ("house", true, true),
        ("dog", false, true),
        ("cat", true, false),
        ("bird", true, false),
        ("tree", true, false),
        ("sun", true, false),
        ("moon", true, false),
        ("book", false, false),
    ];
    let mut labeled = Vec::new();
    for (concept, mid, fin) in plan {
        let c = lex.concept(concept).unwrap();
        let form = |l: &str| {
            c.forms_for(&lang(l))
                .unwrap()
                .iter()
                .next()
                .unwrap()
                .clone()
        };
        let (eng, fra, spa) = (form("eng_Latn"), form("fra_Latn"), form("spa_Latn"));
        let t = single_trace(
            concept,
            concept,
            "spa_Latn",
            "fra_Latn",
            &[
                (6, &spa),
                (7, if mid { &eng } else { "zzq" }),
                (8, if fin { &fra } else { "zzq" }),
            ],
        );
        labeled.push(label_trace(&t, &tracked, &lex, None, &opts).map_err(|e| e.to_string())?);
    }
    let r = pair_report(&labeled, &ReportOptions::default()).map_err(|e| e.to_string())?;
    ensure(
        r.n == 10 && r.final_correct == 4,
        format!("n={} final={}", r.n, r.final_correct),
    )?;
    ensure(r.d_f == 6, format!("d_F={}", r.d_f))?;
    ensure(r.tl_sum == 4, format!("tl_sum={}", r.tl_sum))?;
    ensure(
        r.tl_clamped_sum == 5,
        format!("tl_clamped_sum={}", r.tl_clamped_sum),
    )?;
    ensure(r.tlp == Some(4.0 / 6.0), format!("tlp={:?}", r.tlp))?;
    ensure(
        r.tlp_clamped == Some(5.0 / 6.0),
        format!("tlp_clamped={:?}", r.tlp_clamped),
    )?;
    let (tlp, clamped) = (r.tlp.unwrap(), r.tlp_clamped.unwrap());
    ensure(
        format!("{tlp:.3}") == "0.667" && format!("{clamped:.3}") == "0.833",
        "rounding",
    )?;
    Ok(format!("d_F=6 tl_sum=4 TLP={tlp:.3} clamped={clamped:.3}"))
}

fn random_prompt(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<u32> {
    let len = rng.random_range(1..=max_len);
    (0..len)
        .map(|_| rng.random_range(N_SPECIAL as u32..vocab as u32))
        .collect()
}

fn lens_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for norm_kind in [NormKind::Rms, NormKind::Layer] {
        let config = ModelConfig {
            norm_kind,
            seed: 99,
            ..ModelConfig::default()
        };
        ensure(
            config.n_layers == 8 && config.d_model == 128,
            "default shape changed",
        )?;
        let bundle = ModelBundle::init_seeded(config.clone()).map_err(|e| e.to_string())?;
        for i in 0..100 {
            let prompt = random_prompt(&mut rng, config.vocab_size, 24);
            let (hidden, logits) = bundle.forward(&prompt).map_err(|e| e.to_string())?;
            let model = softmax(logits.view());
            let lens =
                lens_distribution(hidden.last(8).unwrap(), &bundle).map_err(|e| e.to_string())?;
            let diff = model
                .iter()
                .zip(lens.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(diff);
            ensure(
                diff <= 1e-5,
                format!("{norm_kind} prompt {i}: max diff {diff:e}"),
            )?;
            let argmax = |v: &ndarray::Array1<f64>| tbarrier::refmodel::argmax(v.view());
            ensure(
                argmax(&model) == argmax(&lens),
                format!("{norm_kind} prompt {i}: greedy"),
            )?;
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} prompts (rms and layer norm), max diff {worst:e}"
    ))
}

fn decode_coupling() -> Outcome {
    let config = ModelConfig {
        d_model: 64,
        seed: 5,
        ..ModelConfig::default()
    };
    let bundle = ModelBundle::init_seeded(config.clone()).map_err(|e| e.to_string())?;
    let tracked = TrackedLayers::parse("all", 8).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let max_steps = 8;
    let mut early_stops = 0;
    for i in 0..50 {
        let prompt = random_prompt(&mut rng, config.vocab_size, 16);
        let mut stops = vec![EOS];
        if i % 2 == 1 {
            // stop on whatever greedy emits third, to exercise early stops
            let free = bundle
                .greedy_decode_until(&prompt, 3, &[])
                .map_err(|e| e.to_string())?;
            stops.push(free[2]);
        }
        let greedy = bundle
            .greedy_decode_until(&prompt, max_steps, &stops)
            .map_err(|e| e.to_string())?;
        let steps = iterative_lens_decode(&bundle, &prompt, &tracked, max_steps, &stops)
            .map_err(|e| e.to_string())?;
        let finals: Vec<u32> = steps.iter().map(|s| s.final_token).collect();
        ensure(
            finals == greedy,
            format!("prompt {i}: {finals:?} vs {greedy:?}"),
        )?;
        for s in &steps {
            ensure(
                s.per_layer.keys().copied().collect::<Vec<_>>() == tracked.layers(),
                format!("prompt {i}: layer set"),
            )?;
            ensure(
                s.per_layer[&8].token == s.final_token,
                format!("prompt {i}: layer 8"),
            )?;
        }
        early_stops += (greedy.len() < max_steps) as usize;
    }
    Ok(format!(
        "50 prompts token-for-token equal, {early_stops} stopped early"
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let traces_for = |workers: usize, name: &str| -> Result<Vec<u8>, String> {
        let mut c = RunConfig::new(fixture("lexicon50.tsv"), dir.path().join(name));
        c.init = Some(ModelConfig {
            n_layers: 4,
            d_model: 32,
            max_context: 128,
            ..ModelConfig::default()
        });
        c.pairs = vec!["spa_Latn:fra_Latn".into(), "deu_Latn:eng_Latn".into()];
        c.concept_limit = Some(12);
        c.tracked = "all".into();
        c.seed = 3;
        c.workers = workers;
        cmd_run(&c).map_err(|e| e.to_string())?;
        std::fs::read(&c.traces).map_err(|e| e.to_string())
    };
    let a = traces_for(1, "a.jsonl")?;
    let b = traces_for(1, "b.jsonl")?;
    let c = traces_for(4, "c.jsonl")?;
    ensure(a == b, "two runs differ")?;
    ensure(a == c, "worker count changes the trace")?;

    let lex = lexicon50();
    let profiles = train_profiles(
        &corpus_from_lexicon(&lex, &BTreeSet::new()),
        DEFAULT_MAX_RANKS,
    )
    .map_err(|e| e.to_string())?;
    let report_for = |workers: usize, name: &str| -> Result<Vec<u8>, String> {
        let mut options = AnalyzeOptions::for_lexicon(&lex);
        options.workers = workers;
        let out = dir.path().join(name);
        cmd_analyze(
            &dir.path().join("a.jsonl"),
            &lex,
            Some(&profiles),
            &options,
            &out,
        )
        .map_err(|e| e.to_string())?;
        std::fs::read(&out).map_err(|e| e.to_string())
    };
    let r1 = report_for(1, "r1.json")?;
    let r2 = report_for(1, "r2.json")?;
    let r3 = report_for(3, "r3.json")?;
    ensure(r1 == r2, "two analyses differ")?;
    ensure(r1 == r3, "worker count changes the report")?;
    Ok(format!(
        "trace {} bytes and report {} bytes identical across runs and 1/3/4 workers",
        a.len(),
        r1.len()
    ))
}

fn profile_rows(presence: &[Option<f64>]) -> Vec<LayerProfileRow> {
    let n = presence.len();
    presence
        .iter()
        .enumerate()
        .map(|(i, p)| LayerProfileRow {
            layer: i + 1,
            relative_layer: i as i64 + 1 - n as i64,
            total_count: 10,
            labeled_count: 10,
            on_target_correct: 0.0,
            on_target_incorrect: 0.0,
            off_target_correct: 0.0,
            off_target_incorrect: 1.0,
            accurate_count: p.map_or(0, |_| 10),
            target_presence_among_accurate: *p,
            empty: false,
        })
        .collect()
}

fn layer_switch() -> Outcome {
    let some = |v: &[f64]| v.iter().map(|x| Some(*x)).collect::<Vec<_>>();
    let fixture = profile_rows(&some(&[0.0, 0.05, 0.10, 0.60, 0.90]));
    // rises: 0.05, 0.05, 0.50, 0.30, so the switch is at the fourth row
    ensure(
        layer_of_switch(&fixture, 0.5, SWITCH_MIN_FINAL_ACC) == Some(4),
        "fixture",
    )?;
    let ties = profile_rows(&some(&[0.25, 0.5, 0.75]));
    ensure(
        layer_of_switch(&ties, 0.5, SWITCH_MIN_FINAL_ACC) == Some(3),
        "tie to later",
    )?;
    let gaps = profile_rows(&[Some(0.1), None, Some(0.2), Some(0.9), None]);
    ensure(
        layer_of_switch(&gaps, 0.5, SWITCH_MIN_FINAL_ACC) == Some(4),
        "undefined rows",
    )?;
    let falling = profile_rows(&some(&[0.9, 0.5, 0.1]));
    ensure(
        layer_of_switch(&falling, 0.5, SWITCH_MIN_FINAL_ACC).is_none(),
        "no rise",
    )?;
    ensure(
        layer_of_switch(&fixture, 0.05, SWITCH_MIN_FINAL_ACC).is_none(),
        "acc 0.05",
    )?;
    ensure(
        layer_of_switch(&fixture, 0.0, SWITCH_MIN_FINAL_ACC).is_none(),
        "acc 0",
    )?;
    ensure(
        layer_of_switch(&fixture, 0.051, SWITCH_MIN_FINAL_ACC) == Some(4),
        "acc 0.051",
    )?;

    // through the pair report: 1 of 25 final-correct stays absent
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut traces = random_labeled_pair(
        &mut rng,
        &lang("spa_Latn"),
        &lang("fra_Latn"),
        &[5, 6, 7, 8],
        25,
    );
    for (i, t) in traces.iter_mut().enumerate() {
        let last = t.outputs.last_mut().unwrap();
        last.target_match = i == 0;
        t.final_correct = i == 0;
    }
    let r = pair_report(&traces, &ReportOptions::default()).map_err(|e| e.to_string())?;
    ensure(
        r.final_acc == 0.04 && r.switch_layer.is_none(),
        "pair at 4% final accuracy",
    )?;
    Ok("fixture -> row 4 (L-1 of 5), ties later, <=5% final accuracy absent".into())
}

fn lid_gating() -> Outcome {
    let lex = lexicon50();
    let all: Vec<LanguageCode> = lex.languages().to_vec();
    let concepts: Vec<String> = lex.concepts().iter().map(|c| c.id.clone()).collect();
    let held: BTreeSet<String> = concepts.iter().skip(3).step_by(5).cloned().collect();
    let profiles = train_profiles(&corpus_from_lexicon(&lex, &held), DEFAULT_MAX_RANKS)
        .map_err(|e| e.to_string())?;
    let full: BTreeSet<LanguageCode> = all.iter().cloned().collect();

    // held-out forms in scripts used by exactly one language
    let mut held_total = 0;
    for code in ["tel_Telu", "amh_Ethi", "tha_Thai"] {
        let l = lang(code);
        for c in lex.concepts().iter().filter(|c| held.contains(&c.id)) {
            for form in c.forms_for(&l).into_iter().flatten() {
                let tag = gated_identify(form, &profiles, &full, None);
                ensure(
                    tag.as_ref() == Some(&l),
                    format!("{code} {form:?} -> {tag:?}"),
                )?;
                held_total += 1;
            }
        }
    }

    // fuzz: random strings, random candidate sets
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let ranges: [(u32, u32); 8] = [
        (0x61, 0x7a),
        (0x430, 0x44f),
        (0x905, 0x939),
        (0xc05, 0xc39),
        (0x1200, 0x1248),
        (0xe01, 0xe2e),
        (0x30, 0x39),
        (0x4e00, 0x4e80),
    ];
    let forms: Vec<&String> = lex
        .concepts()
        .iter()
        .flat_map(|c| c.forms.values().flatten())
        .collect();
    let mut tagged = 0;
    for i in 0..10_000 {
        let text: String = match i % 4 {
            0 => forms.choose(&mut rng).unwrap().to_string(),
            1 => format!(
                "{}{}",
                forms.choose(&mut rng).unwrap(),
                forms.choose(&mut rng).unwrap()
            ),
            _ => (0..rng.random_range(0..12))
                .map(|_| {
                    let (lo, hi) = *ranges.choose(&mut rng).unwrap();
                    char::from_u32(rng.random_range(lo..=hi)).unwrap_or('?')
                })
                .collect(),
        };
        let candidates: BTreeSet<LanguageCode> = all
            .iter()
            .filter(|_| rng.random_bool(0.4))
            .cloned()
            .collect();
        let hint = rng.random_bool(0.2).then(|| all.choose(&mut rng).unwrap());
        if let Some(tag) = gated_identify(&text, &profiles, &candidates, hint) {
            ensure(
                candidates.contains(&tag),
                format!("{text:?} tagged {tag} outside set"),
            )?;
            tagged += 1;
        }
    }

    let gibberish: Vec<String> = serde_json::from_str(
        &std::fs::read_to_string(fixture("lid_gibberish.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    for g in &gibberish {
        let tag = gated_identify(g, &profiles, &full, None);
        ensure(tag.is_none(), format!("gibberish {g:?} tagged {tag:?}"))?;
    }
    Ok(format!(
        "10000 fuzz strings ({tagged} tagged, 0 outside set), {held_total} held-out forms correct, {} gibberish abstained",
        gibberish.len()
    ))
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let lex = lexicon50();
    let eval = [
        ("spa_Latn", "fra_Latn"),
        ("fra_Latn", "deu_Latn"),
        ("deu_Latn", "eng_Latn"),
        ("eng_Latn", "spa_Latn"),
    ];
    let mut tasks: Vec<_> = eval.iter().map(|(s, t)| (lang(s), lang(t))).collect();
    for l in ["spa_Latn", "fra_Latn", "deu_Latn", "eng_Latn"] {
        tasks.push((lang(l), lang(l)));
    }
    let texts = training_texts(&lex, &tasks, PromptTemplate::TranslateWord);
    let tokenizer = train_tokenizer(&texts, 512).map_err(|e| e.to_string())?;
    let config = ModelConfig {
        n_layers: 8,
        d_model: 32,
        n_heads: 4,
        vocab_size: 512,
        max_context: 48,
        norm_kind: NormKind::Rms,
        seed: 0,
    };
    let bundle = ModelBundle::init_with_tokenizer(config, tokenizer).map_err(|e| e.to_string())?;
    let examples = training_examples(bundle.tokenizer(), &texts);
    let options = TrainOptions {
        epochs: 30,
        learning_rate: 5e-3,
        ..TrainOptions::default()
    };
    let (bundle, train_report) = train(&bundle, &examples, &options).map_err(|e| e.to_string())?;
    let trained = start.elapsed();
    let weights = dir.path().join("model.bin");
    save_weights(&bundle, &weights).map_err(|e| e.to_string())?;

    let profiles = train_profiles(
        &corpus_from_lexicon(&lex, &BTreeSet::new()),
        DEFAULT_MAX_RANKS,
    )
    .map_err(|e| e.to_string())?;
    let mut run = RunConfig::new(fixture("lexicon50.tsv"), dir.path().join("traces.jsonl.gz"));
    run.model = Some(weights);
    run.pairs = eval.iter().map(|(s, t)| format!("{s}:{t}")).collect();
    run.tracked = "all".into();
    run.max_steps = 6;
    let records = cmd_run(&run).map_err(|e| e.to_string())?;
    let report = cmd_analyze(
        &run.traces,
        &lex,
        Some(&profiles),
        &AnalyzeOptions::for_lexicon(&lex),
        &dir.path().join("report.json"),
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    ensure(records == 200, format!("{records} records"))?;
    ensure(
        report.invariant_violations.is_empty(),
        report.invariant_violations.join("; "),
    )?;
    let mut summary = Vec::new();
    for p in &report.pairs {
        ensure(
            p.intermediate_acc_clamped >= p.final_acc,
            format!(
                "{}->{}: clamped intermediate below final",
                p.source_lang, p.target_lang
            ),
        )?;
        summary.push(format!(
            "{}>{} fin={:.2} int={:.2} tlp={}",
            p.source_lang.iso639(),
            p.target_lang.iso639(),
            p.final_acc,
            p.intermediate_acc,
            p.tlp.map_or("-".into(), |t| format!("{t:.2}"))
        ));
    }
    ensure(
        elapsed < Duration::from_secs(60),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "{elapsed:.1?} (training {trained:.1?}, loss {:.3}); {}",
        train_report.epoch_losses.last().unwrap_or(&f64::NAN),
        summary.join(", ")
    ))
}

fn monotone_detection() -> Outcome {
    let lex = lexicon50();
    let opts = LabelOptions::for_lexicon(&lex);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let pairs: Vec<(LanguageCode, LanguageCode)> = [
        ("spa_Latn", "fra_Latn"),
        ("hin_Deva", "rus_Cyrl"),
        ("tel_Telu", "eng_Latn"),
    ]
    .iter()
    .map(|(s, t)| (lang(s), lang(t)))
    .collect();
    let mut removals = 0;
    for set in 0..100 {
        let n_layers = rng.random_range(2..=12usize);
        let layers = random_tracked(&mut rng, n_layers);
        let tracked = TrackedLayers::new(layers.clone()).unwrap();
        let pair = vec![pairs.choose(&mut rng).unwrap().clone()];
        let n = rng.random_range(1..=30);
        let traces = synthetic_traces(&mut rng, &lex, &pair, n, &tracked);
        let acc = |tracked: &TrackedLayers| -> Result<f64, String> {
            let labeled = traces
                .iter()
                .map(|t| label_trace(t, tracked, &lex, None, &opts))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            Ok(pair_report(&labeled, &ReportOptions::default())
                .map_err(|e| e.to_string())?
                .intermediate_acc)
        };
        let full = acc(&tracked)?;
        for drop in tracked.intermediate() {
            let fewer: Vec<usize> = layers.iter().copied().filter(|l| l != drop).collect();
            let reduced = acc(&TrackedLayers::new(fewer).unwrap())?;
            ensure(
                reduced <= full,
                format!("set {set}: dropping {drop} raised {full} to {reduced}"),
            )?;
            removals += 1;
        }
    }
    Ok(format!(
        "100 trace sets, {removals} single-layer removals, never increased"
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("metric oracle equivalence", oracle_equivalence),
        ("TL/TLP 10-instance hand check", hand_check),
        ("final-layer lens identity", lens_identity),
        ("iterative-decode coupling", decode_coupling),
        ("determinism", determinism),
        ("layer of switch", layer_switch),
        ("LID gating soundness", lid_gating),
        ("end-to-end demo", end_to_end),
        ("monotone detection", monotone_detection),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>())));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
