//! Acceptance suite. Each criterion is checked against an independent
//! oracle and reported as one PASS/FAIL line; the process exits non-zero
//! if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use impress_core::corpus::Report;
use impress_core::deauville::{extract_ds, filter_ds_cases, weighted_kappa, DeauvilleError};
use impress_core::metrics::lexical::{bleu, rouge_l, rouge_n};
use impress_core::metrics::{gen_score, GenDirection, MetricDescriptor, MetricFamily, MetricTable};
use impress_core::prompt::{build_example, Arch, FormattedExample, PromptMode, StyleTokenRegistry};
use impress_core::stats::benchmark::{
    compare_models, min_max_normalize, rank_metrics, style_transfer_report, HumanScoreSet, Marker, ModelScores,
};
use impress_core::stats::{bootstrap_mean, paired_exceedance_test, spearman_rho, two_sample_exceedance_test, BootstrapConfig, Verdict};
use impress_core::synth::{self, Style, SynthConfig};
use impress_model::{
    adapt_scorer, generate_impression, train, AdaptConfig, Adaptation, DecodeConfig, ModelScorer, Seq2SeqModel, TrainConfig,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cfg(trials: usize, seed: u64) -> BootstrapConfig {
    BootstrapConfig {
        trials,
        ..BootstrapConfig::with_seed(seed)
    }
}

// ---------------------------------------------------------------- metrics

fn grams(t: &[String], n: usize) -> Vec<&[String]> {
    if t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| &t[i..i + n]).collect()
}

/// Clipped n-gram matches by linear scans over distinct grams.
fn naive_matches(h: &[String], r: &[String], n: usize) -> usize {
    let (hg, rg) = (grams(h, n), grams(r, n));
    let mut seen: Vec<&[String]> = vec![];
    let mut total = 0;
    for g in &hg {
        if seen.contains(g) {
            continue;
        }
        seen.push(g);
        let ch = hg.iter().filter(|x| *x == g).count();
        let cr = rg.iter().filter(|x| *x == g).count();
        total += ch.min(cr);
    }
    total
}

fn naive_prf(m: usize, h: usize, r: usize) -> (f64, f64, f64) {
    if m == 0 || h == 0 || r == 0 {
        return (0.0, 0.0, 0.0);
    }
    let (p, rc) = (m as f64 / h as f64, m as f64 / r as f64);
    (p, rc, 2.0 * p * rc / (p + rc))
}

/// Longest common subsequence by trying every subsequence of `a`.
fn brute_lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        let mut it = b.iter();
        if sub.iter().all(|w| it.any(|x| x == *w)) {
            best = k;
        }
    }
    best
}

fn naive_bleu(h: &[String], r: &[String]) -> f64 {
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let m = naive_matches(h, r, n) as f64;
        let total = h.len().saturating_sub(n - 1) as f64;
        let p = if n == 1 { m / total } else { (m + 1.0) / (total + 1.0) };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln() / 4.0;
    }
    let (c, rl) = (h.len() as f64, r.len() as f64);
    let bp = if c > rl { 1.0 } else { (1.0 - rl / c).exp() };
    bp * log_sum.exp()
}

fn metric_oracle() -> Outcome {
    let vocab = ["node", "uptake", "left", "no", "lesion", "."];
    let mut g = rng(1);
    let mut mismatches = Vec::new();
    for case in 0..1000 {
        let draw = |g: &mut ChaCha8Rng| -> Vec<String> {
            let len = g.random_range(0..=12);
            (0..len).map(|_| vocab[g.random_range(0..vocab.len())].to_string()).collect()
        };
        let (h, r) = (draw(&mut g), draw(&mut g));
        for n in [1, 2] {
            let got = rouge_n(&h, &r, n);
            let want = naive_prf(
                naive_matches(&h, &r, n),
                h.len().saturating_sub(n - 1),
                r.len().saturating_sub(n - 1),
            );
            if (got.precision, got.recall, got.f) != want {
                mismatches.push(format!("case {case} rouge{n}"));
            }
        }
        let got = rouge_l(&h, &r);
        if (got.precision, got.recall, got.f) != naive_prf(brute_lcs(&h, &r), h.len(), r.len()) {
            mismatches.push(format!("case {case} rougeL"));
        }
        if bleu(&h, &r) != naive_bleu(&h, &r) {
            mismatches.push(format!("case {case} bleu"));
        }
    }
    ensure(
        mismatches.is_empty(),
        format!(
            "1000 pairs, rouge1/rouge2/rougeL/bleu exact; mismatches: {:?}",
            &mismatches[..mismatches.len().min(5)]
        ),
    )
}

// ---------------------------------------------------------------- spearman

/// Average ranks by counting, then Pearson on the ranks.
fn naive_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx).powi(2);
        syy += (ry[i] - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn spearman() -> Outcome {
    let hand = spearman_rho(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).map_err(|e| e.to_string())?;
    let mut g = rng(2);
    let mut worst: f64 = 0.0;
    let mut disagreements = 0;
    for i in 0..1000 {
        // fewer than three cases is rejected by design
        let n = g.random_range(3..=60);
        // half the vectors are small integers so ties are common
        let draw = |g: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if i % 2 == 0 {
                        g.random_range(0..6) as f64
                    } else {
                        g.random_range(-100.0..100.0)
                    }
                })
                .collect()
        };
        let (x, y) = (draw(&mut g), draw(&mut g));
        match (spearman_rho(&x, &y).ok(), naive_spearman(&x, &y)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => disagreements += 1,
        }
    }
    ensure(
        (hand - 0.8).abs() < 1e-12 && worst <= 1e-9 && disagreements == 0,
        format!("hand case rho={hand}; 1000 vectors max |diff|={worst:.2e}, defined/undefined disagreements={disagreements}"),
    )
}

// ---------------------------------------------------------------- bootstrap coverage

fn bootstrap_coverage() -> Outcome {
    let (mu, sigma) = (3.0, 2.0);
    let normal = Normal::new(mu, sigma).unwrap();
    let mut covered = 0;
    for d in 0..500u64 {
        let mut g = rng(10_000 + d);
        let xs: Vec<f64> = (0..200).map(|_| g.sample(normal)).collect();
        let ci = bootstrap_mean(&xs, cfg(10_000, d)).map_err(|e| e.to_string())?;
        if ci.ci_low <= mu && mu <= ci.ci_high {
            covered += 1;
        }
    }
    let rate = covered as f64 / 500.0;
    ensure(
        (0.92..=0.98).contains(&rate),
        format!("95% CI covered the true mean in {covered}/500 datasets ({:.1}%)", rate * 100.0),
    )
}

// ---------------------------------------------------------------- exceedance

/// Paired bootstrap with its own generator and a plain loop.
fn oracle_exceedance(diffs: &[f64], trials: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    let n = diffs.len();
    let mut score = 0.0;
    for _ in 0..trials {
        let s: f64 = (0..n).map(|_| diffs[g.random_range(0..n)]).sum();
        if s > 0.0 {
            score += 1.0;
        } else if s == 0.0 {
            score += 0.5;
        }
    }
    score / trials as f64
}

fn exceedance() -> Outcome {
    let mut g = rng(3);
    let a: Vec<f64> = (0..50).map(|_| g.random_range(0.0..1.0)).collect();
    let same_p = paired_exceedance_test(&a, &a, cfg(10_000, 1)).map_err(|e| e.to_string())?;
    let same_u = two_sample_exceedance_test(&a, &a, cfg(10_000, 1)).map_err(|e| e.to_string())?;
    let shifted: Vec<f64> = a.iter().map(|v| v + 100.0).collect();
    let up = paired_exceedance_test(&shifted, &a, cfg(10_000, 1)).map_err(|e| e.to_string())?;
    let up_u = two_sample_exceedance_test(&shifted, &a, cfg(10_000, 1)).map_err(|e| e.to_string())?;

    // borderline: mean difference about 1.8 standard errors
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut g = rng(4);
    let noise: Vec<f64> = (0..40).map(|_| g.sample(normal)).collect();
    let m = noise.iter().sum::<f64>() / 40.0;
    let sd = (noise.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 39.0).sqrt();
    let diffs: Vec<f64> = noise.iter().map(|v| v - m + 1.8 * sd / 40f64.sqrt()).collect();
    let zeros = vec![0.0; 40];
    let ours = paired_exceedance_test(&diffs, &zeros, cfg(10_000, 7)).map_err(|e| e.to_string())?;
    let oracle = oracle_exceedance(&diffs, 1_000_000, 99);
    let oracle_verdict = if oracle >= 0.95 || oracle <= 0.05 {
        Verdict::Significant
    } else {
        Verdict::NotSignificant
    };

    let ok = same_p.verdict == Verdict::NotSignificant
        && same_u.verdict == Verdict::NotSignificant
        && up.verdict == Verdict::Significant
        && up.exceedance == 1.0
        && up_u.exceedance == 1.0
        && (ours.exceedance - oracle).abs() <= 0.01
        && ours.verdict == oracle_verdict;
    ensure(
        ok,
        format!(
            "identical: paired {:.3} / unpaired {:.3} not significant; +100: {:.3} ({:?}); borderline: ours {:.4} vs 1e6-trial oracle {:.4}, verdicts {:?}/{:?}",
            same_p.exceedance, same_u.exceedance, up.exceedance, up.verdict, ours.exceedance, oracle, ours.verdict, oracle_verdict
        ),
    )
}

// ---------------------------------------------------------------- kappa

/// Linearly weighted kappa straight from its definition.
fn formula_kappa(pred: &[u8], reference: &[u8]) -> Option<f64> {
    let n = pred.len() as f64;
    let w = |i: u8, j: u8| (i as f64 - j as f64).abs() / 4.0;
    let mut po = 0.0;
    for (&p, &r) in pred.iter().zip(reference) {
        po += w(p, r) / n;
    }
    let mut pe = 0.0;
    for i in 1..=5u8 {
        for j in 1..=5u8 {
            let pi = pred.iter().filter(|&&p| p == i).count() as f64 / n;
            let rj = reference.iter().filter(|&&r| r == j).count() as f64 / n;
            pe += w(i, j) * pi * rj;
        }
    }
    (pe > 0.0).then(|| 1.0 - po / pe)
}

fn kappa() -> Outcome {
    let mut checked = 0;
    let mut bad = Vec::new();
    for code in 0..625u32 {
        let d = |k: u32| (code / 5u32.pow(k) % 5) as u8 + 1;
        let (pred, reference) = ([d(0), d(1)], [d(2), d(3)]);
        let ours = match weighted_kappa(&pred, &reference) {
            Ok(k) => Some(k),
            Err(DeauvilleError::DegenerateKappa) => None,
            Err(e) => return Err(e.to_string()),
        };
        let want = formula_kappa(&pred, &reference);
        let agree = match (ours, want) {
            (Some(a), Some(b)) => (a - b).abs() < 1e-12,
            (None, None) => true,
            _ => false,
        };
        if !agree {
            bad.push(format!("{pred:?} vs {reference:?}: {ours:?} != {want:?}"));
        }
        checked += 1;
    }
    let perfect = weighted_kappa(&[1, 2, 3, 4, 5, 3, 2], &[1, 2, 3, 4, 5, 3, 2]).map_err(|e| e.to_string())?;
    ensure(
        bad.is_empty() && perfect == 1.0,
        format!(
            "{checked} assignments match the formula (mismatches {:?}); perfect agreement kappa={perfect}",
            &bad[..bad.len().min(3)]
        ),
    )
}

// ---------------------------------------------------------------- deauville

const DS_SUITE: [(&str, Option<u8>); 60] = [
    ("Deauville score 3.", Some(3)),
    ("Deauville score: 4", Some(4)),
    ("Deauville score of 2.", Some(2)),
    ("Deauville score is 5.", Some(5)),
    ("Deauville score was 1.", Some(1)),
    ("DS 4", Some(4)),
    ("DS: 2.", Some(2)),
    ("DS=3", Some(3)),
    ("DS of 5.", Some(5)),
    ("DS is 4.", Some(4)),
    ("Deauville 3.", Some(3)),
    ("Deauville: 4", Some(4)),
    ("Deauville IV.", Some(4)),
    ("Deauville V", Some(5)),
    ("Deauville III uptake in the left axilla.", Some(3)),
    ("Deauville score four.", Some(4)),
    ("Deauville score of two.", Some(2)),
    ("DS five", Some(5)),
    ("Deauville grade 3", Some(3)),
    ("Deauville category 2", Some(2)),
    ("Deauville criteria score 4", Some(4)),
    ("Deauville 5-point scale score 3", Some(3)),
    ("Deauville five-point scale score of 1", Some(1)),
    ("Score of 4 on the Deauville scale.", Some(4)),
    ("Residual uptake grade 3 by Deauville criteria.", Some(3)),
    ("Deauville score 4-5", Some(5)),
    ("Deauville 2/3", Some(3)),
    ("Deauville score 3 to 4", Some(4)),
    ("Deauville score 4 or 5", Some(5)),
    ("Mediastinal node Deauville 5; overall Deauville score 4.", Some(4)),
    ("Cervical node Deauville 2. Splenic lesion Deauville 4.", Some(4)),
    ("Overall DS 3 with complete metabolic response in the neck.", Some(3)),
    (
        "In summary, Deauville score 2, consistent with complete metabolic response.",
        Some(2),
    ),
    ("Complete metabolic response (Deauville 1).", Some(1)),
    (
        "Partial metabolic response, Deauville score 4 (uptake moderately above liver).",
        Some(4),
    ),
    ("Progressive disease with new lesions, Deauville 5.", Some(5)),
    ("deauville score 3", Some(3)),
    ("DEAUVILLE SCORE 4", Some(4)),
    ("Findings compatible with Deauville score 2 disease.", Some(2)),
    (
        "1. Interval resolution of cervical adenopathy. Deauville score 2.\n2. No new lesions.",
        Some(2),
    ),
    ("Residual left axillary node with uptake below liver, DS 3.", Some(3)),
    ("Deauville score: 5 (new hepatic lesion).", Some(5)),
    ("The highest uptake corresponds to Deauville 4.", Some(4)),
    ("Deauville score 3 in the spleen; globally Deauville 2.", Some(2)),
    ("Final Deauville score: 3.", Some(3)),
    ("Exam-level Deauville score 4.", Some(4)),
    ("Deauville score = 1", Some(1)),
    ("Deauville score of 3 at interim PET.", Some(3)),
    ("Nodal uptake Deauville 2, splenic uptake Deauville 3, marrow Deauville 1.", Some(3)),
    ("No abnormal hypermetabolic activity.", None),
    ("Response assessed using the Deauville 5-point scale.", None),
    ("Deauville criteria were applied.", None),
    ("Complete metabolic response.", None),
    ("Left cervical node 1.5 cm, SUV max 4.2.", None),
    ("Deauville score not assigned given the absence of a baseline study.", None),
    ("Score 4 on visual analysis.", None),
    ("The DSA showed no vascular anomaly.", None),
    ("Stage IV disease at baseline.", None),
    ("Deauville scale reference regions are the mediastinum and liver.", None),
    ("Follow-up PET/CT in 3 months is recommended.", None),
];

fn deauville_extraction() -> Outcome {
    let wrong: Vec<String> = DS_SUITE
        .iter()
        .filter_map(|(text, want)| {
            let got = extract_ds("suite", text).ds;
            (got != *want).then(|| format!("{text:?}: got {got:?}, want {want:?}"))
        })
        .collect();
    let corpus = synth::generate(&SynthConfig {
        n_reports: 4000,
        n_ds: 405,
        findings_words: (10, 20),
        seed: 5,
        ..Default::default()
    });
    let cases = filter_ds_cases(&corpus.reports);
    let found: BTreeMap<&str, u8> = cases.iter().map(|c| (c.report_id.as_str(), c.reference_ds)).collect();
    let exact = corpus.planted_ds.iter().all(|(id, ds)| found.get(id.as_str()) == Some(ds));
    let correct = DS_SUITE.len() - wrong.len();
    ensure(
        wrong.is_empty() && cases.len() == 405 && exact,
        format!(
            "suite {correct}/{} correct {:?}; corpus of 4000 with 405 planted: {} DS cases found, values match plants: {exact}",
            DS_SUITE.len(),
            wrong,
            cases.len()
        ),
    )
}

// ---------------------------------------------------------------- toy models

fn prepare(reports: &[Report], seed: u64) -> (Seq2SeqModel, Vec<FormattedExample>) {
    let mut reg = StyleTokenRegistry::new();
    for r in reports {
        reg.register(&r.physician_id);
    }
    let examples: Vec<FormattedExample> = reports
        .iter()
        .map(|r| build_example(r, &reg, Arch::EncoderDecoder, PromptMode::Train).unwrap())
        .collect();
    let texts: Vec<String> = examples.iter().flat_map(|e| [e.prompt(), e.target_text.clone()]).collect();
    let mut m = Seq2SeqModel::from_ref("toy:tiny", Arch::EncoderDecoder, texts.iter().map(String::as_str), seed).unwrap();
    m.add_style_tokens(&reg).unwrap();
    (m, examples)
}

fn train_cfg(lr: f64, batch: usize, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::new("toy:tiny", Arch::EncoderDecoder, Adaptation::Full);
    c.learning_rate = Some(lr);
    c.batch_size = batch;
    c.max_steps = steps;
    c
}

fn toy_overfit() -> Outcome {
    let reports = synth::generate(&SynthConfig {
        n_reports: 8,
        findings_words: (20, 40),
        seed: 7,
        ..Default::default()
    })
    .reports;
    let (mut m, ex) = prepare(&reports, 3);
    let params = m.num_params();
    let run = train(&mut m, &train_cfg(3e-3, 8, 300), &ex, &[], None).map_err(|e| e.to_string())?;
    let (first, last) = (run.initial_loss().unwrap(), run.final_loss().unwrap());
    let decode = DecodeConfig::greedy(128);
    let exact = ex
        .iter()
        .filter(|e| {
            generate_impression(&m, &e.to_infer(), &decode)
                .map(|g| g.text == e.target_text)
                .unwrap_or(false)
        })
        .count();
    ensure(
        params <= 10_000_000 && run.loss_curve.len() == 300 && last < 0.05 * first && exact >= 7,
        format!(
            "{params} params, {} steps, loss {first:.3} -> {last:.4} ({:.2}% of initial), exact greedy {exact}/8",
            run.loss_curve.len(),
            100.0 * last / first
        ),
    )
}

fn style_control() -> Outcome {
    let corpus = synth::generate(&SynthConfig {
        n_reports: 200,
        findings_words: (10, 20),
        seed: 11,
        ..Default::default()
    });
    let (mut m, ex) = prepare(&corpus.reports, 5);
    let (train_ex, held) = ex.split_at(160);
    train(&mut m, &train_cfg(3e-3, 16, 300), train_ex, &[], None).map_err(|e| e.to_string())?;
    let verbose = m.registry.token(corpus.physicians_with(Style::Verbose)[0]).unwrap().to_string();
    let terse = m.registry.token(corpus.physicians_with(Style::Terse)[0]).unwrap().to_string();
    let decode = DecodeConfig::greedy(96);
    let words = |e: &FormattedExample, tok: &str| -> usize {
        generate_impression(&m, &e.to_infer().with_style_token(tok), &decode)
            .map(|g| g.text.split_whitespace().count())
            .unwrap_or(0)
    };
    let longer = held.iter().filter(|e| words(e, &verbose) > words(e, &terse)).count();
    ensure(
        longer * 10 >= held.len() * 9,
        format!(
            "200-case corpus, verbose token longer than terse on {longer}/{} held-out cases",
            held.len()
        ),
    )
}

fn descriptor(name: &str) -> MetricDescriptor {
    MetricDescriptor {
        name: name.into(),
        family: MetricFamily::Learned,
        needs_reference: true,
        needs_source: false,
        higher_is_better: true,
        range: None,
        display_scale: 1.0,
    }
}

fn scorer_and_meta_evaluation() -> Outcome {
    let corpus = synth::generate(&SynthConfig {
        n_reports: 16,
        findings_words: (10, 20),
        seed: 21,
        ..Default::default()
    });
    let (mut base, ex) = prepare(&corpus.reports, 9);
    train(&mut base, &train_cfg(3e-3, 8, 40), &ex, &[], None).map_err(|e| e.to_string())?;
    let pairs: Vec<(String, String)> = corpus.reports.iter().map(|r| (r.findings.clone(), r.impression.clone())).collect();
    let adapted = adapt_scorer(
        &base,
        &pairs,
        &AdaptConfig {
            steps: 40,
            learning_rate: 2e-3,
            batch_size: 8,
            seed: 1,
        },
    )
    .map_err(|e| e.to_string())?;
    let (b, a) = (ModelScorer::new(base), ModelScorer::new(adapted));
    let improved = pairs
        .iter()
        .filter(|(s, t)| {
            let after = gen_score(&a, s, t, GenDirection::SrcToHyp).unwrap();
            let before = gen_score(&b, s, t, GenDirection::SrcToHyp).unwrap();
            after > before
        })
        .count();

    let mut g = rng(8);
    let ids: Vec<String> = (0..80).map(|i| format!("C{i:03}")).collect();
    let human: BTreeMap<String, u8> = ids.iter().map(|id| (id.clone(), g.random_range(1..=5))).collect();
    let perfect: Vec<Option<f64>> = ids.iter().map(|id| Some(10.0 * human[id] as f64 + 3.0)).collect();
    let noisy: Vec<Option<f64>> = ids.iter().map(|id| Some(human[id] as f64 + g.random_range(-2.0..2.0))).collect();
    let random: Vec<Option<f64>> = ids.iter().map(|_| Some(g.random_range(0.0..1.0))).collect();
    let table = MetricTable {
        case_ids: ids.clone(),
        metrics: vec![descriptor("random"), descriptor("noisy"), descriptor("perfect")],
        values: vec![random, noisy, perfect],
        gaps: vec![],
    };
    let reader = HumanScoreSet::new("r1", human).map_err(|e| e.to_string())?;
    let ranking = rank_metrics(&table, &reader, None, cfg(2000, 3)).map_err(|e| e.to_string())?;
    let order: Vec<&str> = ranking.rows.iter().map(|r| r.metric.as_str()).collect();
    let top = &ranking.rows[0];
    let pos = |n: &str| order.iter().position(|m| *m == n).unwrap();
    ensure(
        improved * 10 >= pairs.len() * 9 && top.metric == "perfect" && (top.rho - 1.0).abs() <= 1e-12 && pos("random") > pos("perfect"),
        format!(
            "adapted scorer raised likelihood on {improved}/{} pairs; ranking {order:?}, top rho={}",
            pairs.len(),
            top.rho
        ),
    )
}

// ---------------------------------------------------------------- grid

/// Exact paired bootstrap exceedance by enumerating all n^n resamples.
fn exact_exceedance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    // values carry two decimals, so integer arithmetic gives exact ties
    let d: Vec<i64> = a.iter().zip(b).map(|(x, y)| ((x - y) * 100.0).round() as i64).collect();
    let total = n.pow(n as u32);
    let mut score = 0.0;
    for code in 0..total {
        let mut c = code;
        let mut s = 0;
        for _ in 0..n {
            s += d[c % n];
            c /= n;
        }
        score += match s.cmp(&0) {
            std::cmp::Ordering::Greater => 1.0,
            std::cmp::Ordering::Equal => 0.5,
            std::cmp::Ordering::Less => 0.0,
        };
    }
    score / total as f64
}

fn grid() -> Outcome {
    let norm = min_max_normalize(&[2.0, 4.0, 6.0]);
    let mut g = rng(6);
    let mut affine_ok = true;
    for _ in 0..200 {
        let x: Vec<f64> = (0..g.random_range(2..10)).map(|_| g.random_range(-5.0..5.0)).collect();
        let (s, t) = (g.random_range(0.1..10.0), g.random_range(-50.0..50.0));
        let y: Vec<f64> = x.iter().map(|v| s * v + t).collect();
        affine_ok &= min_max_normalize(&x)
            .iter()
            .zip(min_max_normalize(&y))
            .all(|(p, q)| (p - q).abs() < 1e-9);
    }

    let data: [(&str, bool, [[f64; 6]; 3]); 2] = [
        (
            "rouge1",
            true,
            [
                [0.60, 0.55, 0.70, 0.65, 0.58, 0.62],
                [0.59, 0.56, 0.66, 0.66, 0.57, 0.60],
                [0.30, 0.35, 0.40, 0.28, 0.33, 0.31],
            ],
        ),
        (
            "novel_bigrams",
            false,
            [
                [0.10, 0.12, 0.08, 0.15, 0.11, 0.09],
                [0.20, 0.25, 0.18, 0.30, 0.22, 0.19],
                [0.11, 0.10, 0.09, 0.16, 0.10, 0.12],
            ],
        ),
    ];
    let names = ["model_a", "model_b", "model_c"];
    let models: Vec<ModelScores> = names
        .iter()
        .enumerate()
        .map(|(k, name)| ModelScores {
            model: name.to_string(),
            metrics: data
                .iter()
                .map(|(metric, _, rows)| {
                    let per_case = rows[k].iter().enumerate().map(|(i, v)| (format!("R{i}"), *v)).collect();
                    (metric.to_string(), per_case)
                })
                .collect(),
        })
        .collect();
    let higher: BTreeMap<String, bool> = data.iter().map(|(m, h, _)| (m.to_string(), *h)).collect();
    let grid = compare_models(&models, &higher, cfg(10_000, 2)).map_err(|e| e.to_string())?;

    let mut mismatches = Vec::new();
    let mut summary = Vec::new();
    for (metric, hib, rows) in &data {
        let mi = grid.metrics.iter().position(|m| m == metric).unwrap();
        let means: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / 6.0).collect();
        let best = (0..3)
            .reduce(|x, y| {
                let better = if *hib { means[y] > means[x] } else { means[y] < means[x] };
                if better {
                    y
                } else {
                    x
                }
            })
            .unwrap();
        for k in 0..3 {
            let want = if k == best {
                Marker::Star
            } else {
                let (a, b) = if *hib { (&rows[best], &rows[k]) } else { (&rows[k], &rows[best]) };
                let e = exact_exceedance(a, b);
                summary.push(format!("{metric}:{}={e:.3}", names[k]));
                if e >= 0.95 || e <= 0.05 {
                    Marker::None
                } else {
                    Marker::Circle
                }
            };
            if grid.markers[mi][k] != want {
                mismatches.push(format!("{metric}/{}: {:?} != {want:?}", names[k], grid.markers[mi][k]));
            }
        }
    }
    ensure(
        norm == vec![0.0, 0.5, 1.0] && affine_ok && mismatches.is_empty(),
        format!(
            "[2,4,6] -> {norm:?}; affine invariance {affine_ok}; markers vs exact enumeration ({}) mismatches {mismatches:?}",
            summary.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- blinding

fn blinding() -> Outcome {
    use impress_review::{build_pool, AppState, ServiceConfig, Store};
    use serde_json::{json, Value};

    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap();
    rt.block_on(async {
        let dir = tempfile::tempdir().unwrap();
        let config = ServiceConfig {
            data_dir: dir.path().to_path_buf(),
            bootstrap_trials: 500,
            ..Default::default()
        };
        let corpus = synth::generate(&SynthConfig {
            n_reports: 96,
            physicians_per_style: 3,
            findings_words: (30, 60),
            seed: 3,
            ..Default::default()
        });
        let generated: BTreeMap<String, String> = corpus
            .reports
            .iter()
            .map(|r| (r.report_id.clone(), r.impression.to_uppercase()))
            .collect();
        let pool = build_pool(&corpus.reports, &generated);
        let store = Store::open(&config.db_path()).unwrap();
        store.add_cases(&pool).unwrap();
        let dims: Vec<String> = config.dimensions.iter().map(|d| d.key.clone()).collect();
        let state = AppState::new(store, config);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        tokio::spawn(impress_review::serve(state.clone(), listener));
        let client = reqwest::Client::new();

        let mut forbidden: BTreeSet<String> = pool
            .iter()
            .flat_map(|c| [c.style_owner.to_lowercase(), c.case_id.to_lowercase(), c.report_id.to_lowercase()])
            .collect();
        for w in [
            "origin",
            "original",
            "generated",
            "style_owner",
            "own_case",
            "physician",
            "dictat",
            "reader",
        ] {
            forbidden.insert(w.into());
        }
        let allowed_keys: BTreeSet<&str> = [
            "status",
            "case_id",
            "position",
            "total",
            "findings",
            "indications",
            "impression",
            "schema",
        ]
        .into();
        let mut payloads = 0;
        let mut leaks = Vec::new();
        let mut totals = Vec::new();
        for (i, reader) in ["P01", "P02", "P03", "P04", "P05"].iter().enumerate() {
            let r = client
                .post(format!("{base}/api/sessions"))
                .json(&json!({ "reader_id": reader, "seed": i }))
                .send()
                .await
                .unwrap();
            let created: Value = r.json().await.unwrap();
            let sid = created["session_id"].as_str().unwrap().to_string();
            totals.push(created["total"].as_u64().unwrap_or(0));
            loop {
                let text = client
                    .get(format!("{base}/api/sessions/{sid}/next"))
                    .send()
                    .await
                    .unwrap()
                    .text()
                    .await
                    .unwrap();
                let v: Value = serde_json::from_str(&text).unwrap();
                if v["status"] == "complete" {
                    break;
                }
                payloads += 1;
                let lower = text.to_lowercase();
                leaks.extend(
                    forbidden
                        .iter()
                        .filter(|f| lower.contains(f.as_str()))
                        .map(|f| format!("payload {payloads}: {f}")),
                );
                let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
                leaks.extend(
                    keys.iter()
                        .filter(|k| !allowed_keys.contains(*k))
                        .map(|k| format!("payload {payloads}: key {k}")),
                );
                let scores: Value = dims.iter().map(|d| (d.clone(), json!(3))).collect::<serde_json::Map<_, _>>().into();
                let body = json!({ "case_id": v["case_id"], "scores": scores, "utility": 3, "comment": "" });
                let r = client
                    .post(format!("{base}/api/sessions/{sid}/assessments"))
                    .json(&body)
                    .send()
                    .await
                    .unwrap();
                if !r.status().is_success() {
                    return Err(format!("submission rejected: {}", r.text().await.unwrap()));
                }
            }
        }
        let rows = state.store.export_rows().map_err(|e| e.to_string())?;
        let mut per_session: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for r in &rows {
            let e = per_session.entry(r.session_id.as_str()).or_default();
            if r.own_case {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
        let all_12_12 = per_session.len() == 5 && per_session.values().all(|&c| c == (12, 12)) && totals.iter().all(|&t| t == 24);
        ensure(
            payloads >= 100 && leaks.is_empty() && all_12_12,
            format!(
                "{payloads} payloads scanned, leaks {:?}; sessions own/other {:?}",
                &leaks[..leaks.len().min(5)],
                per_session.values().collect::<Vec<_>>()
            ),
        )
    })
}

// ---------------------------------------------------------------- external style

fn external_style() -> Outcome {
    let mut g = rng(12);
    let internal_values: Vec<f64> = (0..300).map(|_| g.random_range(0.2..0.8)).collect();
    let internal: BTreeMap<String, Vec<f64>> = [("rougeL".to_string(), internal_values.clone())].into();
    let same = style_transfer_report(&internal, &internal, cfg(5000, 1)).map_err(|e| e.to_string())?;
    let external: BTreeMap<String, Vec<f64>> = [("rougeL".to_string(), internal_values.iter().map(|v| v * 0.71).collect())].into();
    let shifted = style_transfer_report(&internal, &external, cfg(5000, 1)).map_err(|e| e.to_string())?;
    let (s0, s1) = (&same[0], &shifted[0]);
    ensure(
        s0.percent_change == 0.0
            && s0.ci_low <= 0.0
            && 0.0 <= s0.ci_high
            && (s1.percent_change + 29.0).abs() <= 0.5
            && s1.ci_low <= -29.0
            && -29.0 <= s1.ci_high,
        format!(
            "identity {:.3}% [{:.2}, {:.2}]; 0.71x shift {:.3}% [{:.2}, {:.2}]",
            s0.percent_change, s0.ci_low, s0.ci_high, s1.percent_change, s1.ci_low, s1.ci_high
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("metric-oracle", metric_oracle),
        ("spearman", spearman),
        ("bootstrap-coverage", bootstrap_coverage),
        ("exceedance", exceedance),
        ("weighted-kappa", kappa),
        ("deauville-extraction", deauville_extraction),
        ("toy-overfit", toy_overfit),
        ("style-token", style_control),
        ("scorer-adaptation-meta-eval", scorer_and_meta_evaluation),
        ("comparison-grid", grid),
        ("blinding", blinding),
        ("external-style", external_style),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("FAIL {name}: {detail} [{secs:.1}s]");
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        println!("{} criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
}
