use impress_core::corpus::Report;
use impress_core::prompt::{build_example, Arch, FormattedExample, PromptMode, StyleTokenRegistry};
use impress_core::synth::{self, Style, SynthConfig};
use impress_model::{generate_impression, train, Adaptation, DecodeConfig, Seq2SeqModel, TrainConfig};

fn prepare(reports: &[Report], arch: Arch, seed: u64) -> (Seq2SeqModel, Vec<FormattedExample>) {
    let mut reg = StyleTokenRegistry::new();
    for r in reports {
        reg.register(&r.physician_id);
    }
    let examples: Vec<FormattedExample> = reports
        .iter()
        .map(|r| build_example(r, &reg, arch, PromptMode::Train).unwrap())
        .collect();
    let texts: Vec<String> = examples.iter().flat_map(|e| [e.prompt(), e.target_text.clone()]).collect();
    let mut m = Seq2SeqModel::from_ref("toy:tiny", arch, texts.iter().map(String::as_str), seed).unwrap();
    m.add_style_tokens(&reg).unwrap();
    (m, examples)
}

fn short_corpus(n: usize, seed: u64) -> Vec<Report> {
    synth::generate(&SynthConfig {
        n_reports: n,
        findings_words: (20, 40),
        seed,
        ..Default::default()
    })
    .reports
}

#[test]
fn overfits_eight_pairs() {
    let t0 = std::time::Instant::now();
    let reports = short_corpus(8, 7);
    let (mut m, ex) = prepare(&reports, Arch::EncoderDecoder, 3);
    assert!(m.num_params() <= 10_000_000);
    let mut cfg = TrainConfig::new("toy:tiny", Arch::EncoderDecoder, Adaptation::Full);
    cfg.learning_rate = Some(3e-3);
    cfg.batch_size = 8;
    cfg.max_steps = 300;
    let run = train(&mut m, &cfg, &ex, &[], None).unwrap();
    let (first, last) = (run.initial_loss().unwrap(), run.final_loss().unwrap());
    let decode = DecodeConfig::greedy(128);
    let exact = ex
        .iter()
        .filter(|e| generate_impression(&m, &e.to_infer(), &decode).unwrap().text == e.target_text)
        .count();
    eprintln!("loss {first} -> {last}, exact {exact}/8, {:?}", t0.elapsed());
    assert!(last < 0.05 * first);
    assert!(exact >= 7);
}

#[test]
fn style_token_controls_length() {
    let t0 = std::time::Instant::now();
    let corpus = synth::generate(&SynthConfig {
        n_reports: 200,
        findings_words: (10, 20),
        seed: 11,
        ..Default::default()
    });
    let (mut m, ex) = prepare(&corpus.reports, Arch::EncoderDecoder, 5);
    let (train_ex, held) = ex.split_at(160);
    let mut cfg = TrainConfig::new("toy:tiny", Arch::EncoderDecoder, Adaptation::Full);
    cfg.learning_rate = Some(3e-3);
    cfg.batch_size = 16;
    cfg.max_steps = 300;
    let run = train(&mut m, &cfg, train_ex, &[], None).unwrap();
    eprintln!("trained {:?} loss {:?}", t0.elapsed(), run.final_loss());
    let verbose = m.registry.token(corpus.physicians_with(Style::Verbose)[0]).unwrap().to_string();
    let terse = m.registry.token(corpus.physicians_with(Style::Terse)[0]).unwrap().to_string();
    let decode = DecodeConfig::greedy(96);
    let longer = held
        .iter()
        .filter(|e| {
            let v = generate_impression(&m, &e.to_infer().with_style_token(&verbose), &decode).unwrap();
            let t = generate_impression(&m, &e.to_infer().with_style_token(&terse), &decode).unwrap();
            v.text.split_whitespace().count() > t.text.split_whitespace().count()
        })
        .count();
    eprintln!("longer {longer}/40 {:?}", t0.elapsed());
    assert!(longer >= 36);
}
