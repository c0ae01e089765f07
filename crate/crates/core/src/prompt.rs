//! Model input templates and physician style tokens.
//!
//! Encoder-decoder inputs are four lines: exam description, style token,
//! `Findings: ...` and `Indication: ...`. Decoder-only prompts use an
//! instruction line, an `Input:` block and a trailing `Response:` prefix.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Report;
use crate::tokenizer::{is_reserved_token, reserved_regex, Tokenizer};

pub const FINDINGS_LABEL: &str = "Findings:";
pub const INDICATION_LABEL: &str = "Indication:";
pub const INPUT_LABEL: &str = "Input:";
pub const RESPONSE_PREFIX: &str = "Response:";
pub const DEFAULT_TOKEN_PREFIX: &str = "PHY";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("physician {0:?} has no registered style token")]
    MissingToken(String),
    #[error("token budget {budget} cannot hold the prompt skeleton ({required} tokens without findings)")]
    Budget { budget: usize, required: usize },
    #[error("field {field} of report {report_id} contains reserved token {token:?}")]
    ReservedTokenInText {
        report_id: String,
        field: &'static str,
        token: String,
    },
    #[error("invalid token prefix {0:?}: expected an uppercase word")]
    InvalidPrefix(String),
    #[error("style token {0:?} collides with a base vocabulary entry")]
    VocabularyCollision(String),
    #[error("cannot parse formatted input: {0}")]
    Parse(String),
    #[error("registry i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    EncoderDecoder,
    DecoderOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Train,
    Infer,
}

/// Injective physician → reserved token mapping.
///
/// Tokens are `[<PREFIX>_<index>]` with the index assigned in registration
/// order, so a registry only ever grows and existing tokens never change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleTokenRegistry {
    prefix: String,
    tokens: BTreeMap<String, String>,
}

impl Default for StyleTokenRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl StyleTokenRegistry {
    pub fn new() -> Self {
        StyleTokenRegistry {
            prefix: DEFAULT_TOKEN_PREFIX.to_string(),
            tokens: BTreeMap::new(),
        }
    }

    pub fn with_prefix(prefix: &str) -> Result<Self, PromptError> {
        let ok = prefix.chars().next().is_some_and(|c| c.is_ascii_uppercase())
            && prefix.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit());
        if !ok {
            return Err(PromptError::InvalidPrefix(prefix.to_string()));
        }
        Ok(StyleTokenRegistry {
            prefix: prefix.to_string(),
            tokens: BTreeMap::new(),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Idempotent; a new physician gets the next index.
    pub fn register(&mut self, physician_id: &str) -> String {
        if let Some(t) = self.tokens.get(physician_id) {
            return t.clone();
        }
        let token = format!("[{}_{:03}]", self.prefix, self.tokens.len() + 1);
        self.tokens.insert(physician_id.to_string(), token.clone());
        token
    }

    pub fn token(&self, physician_id: &str) -> Option<&str> {
        self.tokens.get(physician_id).map(String::as_str)
    }

    pub fn physician(&self, token: &str) -> Option<&str> {
        self.tokens.iter().find(|(_, t)| *t == token).map(|(p, _)| p.as_str())
    }

    /// Tokens in registration order.
    pub fn tokens(&self) -> Vec<&str> {
        let mut all: Vec<&str> = self.tokens.values().map(String::as_str).collect();
        all.sort_by_key(|t| token_index(t));
        all
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.tokens.iter().map(|(p, t)| (p.as_str(), t.as_str()))
    }

    /// Fails if any token is already a base-vocabulary word.
    pub fn check_vocabulary(&self, is_base_word: impl Fn(&str) -> bool) -> Result<(), PromptError> {
        match self.tokens().into_iter().find(|t| is_base_word(t)) {
            Some(t) => Err(PromptError::VocabularyCollision(t.to_string())),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let reg: StyleTokenRegistry = serde_json::from_str(text).map_err(|e| PromptError::Io(e.to_string()))?;
        let mut seen = std::collections::HashSet::new();
        for t in reg.tokens.values() {
            if !is_reserved_token(t) || !seen.insert(t) {
                return Err(PromptError::Io(format!("invalid or repeated token {t:?}")));
            }
        }
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<(), PromptError> {
        std::fs::write(path, self.to_json()).map_err(|e| PromptError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io(e.to_string()))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON form, recorded in checkpoints.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("registry serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

fn token_index(token: &str) -> usize {
    token
        .trim_end_matches(']')
        .rsplit('_')
        .next()
        .and_then(|n| n.parse().ok())
        .unwrap_or(usize::MAX)
}

/// The report fields a template is rendered from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptParts {
    pub description: String,
    pub findings: String,
    pub indications: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormattedExample {
    pub report_id: String,
    pub arch: Arch,
    pub mode: PromptMode,
    pub input_text: String,
    pub target_text: String,
    pub style_token: String,
    #[serde(default)]
    pub truncated: bool,
    pub parts: PromptParts,
}

impl FormattedExample {
    /// The text the model conditions on: the full encoder input, or for
    /// decoder-only models everything up to and including `Response:`.
    pub fn prompt(&self) -> String {
        match self.arch {
            Arch::EncoderDecoder => self.input_text.clone(),
            Arch::DecoderOnly => render_decoder_only(&self.parts, &self.style_token, None),
        }
    }

    pub fn to_infer(&self) -> FormattedExample {
        let mut ex = self.clone();
        ex.mode = PromptMode::Infer;
        ex.target_text.clear();
        ex.input_text = self.prompt();
        ex
    }

    /// Re-renders the same report with another physician's style token.
    pub fn with_style_token(&self, token: &str) -> FormattedExample {
        let mut ex = self.clone();
        ex.style_token = token.to_string();
        ex.input_text = render(&ex.parts, ex.arch, token, self.train_target());
        ex
    }

    fn train_target(&self) -> Option<&str> {
        (self.mode == PromptMode::Train).then_some(self.target_text.as_str())
    }
}

fn single_line(description: &str) -> String {
    description.replace(['\r', '\n'], " ")
}

fn labelled(label: &str, text: &str) -> String {
    if text.is_empty() {
        label.to_string()
    } else {
        format!("{label} {text}")
    }
}

fn render_encoder_decoder(parts: &PromptParts, token: &str) -> String {
    format!(
        "{}\n{}\n{}\n{}",
        parts.description,
        token,
        labelled(FINDINGS_LABEL, &parts.findings),
        labelled(INDICATION_LABEL, &parts.indications)
    )
}

fn render_decoder_only(parts: &PromptParts, token: &str, target: Option<&str>) -> String {
    let mut text = format!(
        "Derive the impression from the given {} report for {}.\n{}\n{}\n\n{}\n{}",
        parts.description, token, INPUT_LABEL, parts.findings, parts.indications, RESPONSE_PREFIX
    );
    if let Some(t) = target {
        text.push(' ');
        text.push_str(t);
    }
    text
}

fn render(parts: &PromptParts, arch: Arch, token: &str, target: Option<&str>) -> String {
    match arch {
        Arch::EncoderDecoder => render_encoder_decoder(parts, token),
        Arch::DecoderOnly => render_decoder_only(parts, token, target),
    }
}

fn prepare(report: &Report, registry: &StyleTokenRegistry) -> Result<(PromptParts, String), PromptError> {
    let token = registry
        .token(&report.physician_id)
        .ok_or_else(|| PromptError::MissingToken(report.physician_id.clone()))?
        .to_string();
    for (field, text) in [
        ("exam_description", &report.exam_description),
        ("findings", &report.findings),
        ("indications", &report.indications),
    ] {
        if let Some(m) = reserved_regex().find(text) {
            return Err(PromptError::ReservedTokenInText {
                report_id: report.report_id.clone(),
                field,
                token: m.as_str().to_string(),
            });
        }
    }
    let parts = PromptParts {
        description: single_line(&report.exam_description),
        findings: report.findings.clone(),
        indications: report.indications.clone(),
    };
    Ok((parts, token))
}

pub fn build_encoder_decoder_input(report: &Report, registry: &StyleTokenRegistry) -> Result<FormattedExample, PromptError> {
    let (parts, token) = prepare(report, registry)?;
    Ok(FormattedExample {
        report_id: report.report_id.clone(),
        arch: Arch::EncoderDecoder,
        mode: PromptMode::Train,
        input_text: render_encoder_decoder(&parts, &token),
        target_text: report.impression.clone(),
        style_token: token,
        truncated: false,
        parts,
    })
}

pub fn build_decoder_only_prompt(
    report: &Report,
    registry: &StyleTokenRegistry,
    mode: PromptMode,
) -> Result<FormattedExample, PromptError> {
    let (parts, token) = prepare(report, registry)?;
    let target = match mode {
        PromptMode::Train => report.impression.clone(),
        PromptMode::Infer => String::new(),
    };
    let input_text = render_decoder_only(&parts, &token, (mode == PromptMode::Train).then_some(target.as_str()));
    Ok(FormattedExample {
        report_id: report.report_id.clone(),
        arch: Arch::DecoderOnly,
        mode,
        input_text,
        target_text: target,
        style_token: token,
        truncated: false,
        parts,
    })
}

pub fn build_example(
    report: &Report,
    registry: &StyleTokenRegistry,
    arch: Arch,
    mode: PromptMode,
) -> Result<FormattedExample, PromptError> {
    match arch {
        Arch::EncoderDecoder => {
            let ex = build_encoder_decoder_input(report, registry)?;
            Ok(if mode == PromptMode::Infer { ex.to_infer() } else { ex })
        }
        Arch::DecoderOnly => build_decoder_only_prompt(report, registry, mode),
    }
}

/// Recovers description, style token, findings and indications from an
/// untruncated encoder-decoder input.
pub fn parse_encoder_decoder_input(text: &str) -> Result<(PromptParts, String), PromptError> {
    let (description, rest) = text
        .split_once('\n')
        .ok_or_else(|| PromptError::Parse("missing description line".into()))?;
    let (token, rest) = rest
        .split_once('\n')
        .ok_or_else(|| PromptError::Parse("missing style token line".into()))?;
    let rest = rest
        .strip_prefix(FINDINGS_LABEL)
        .ok_or_else(|| PromptError::Parse("missing Findings: section".into()))?;
    let marker = format!("\n{INDICATION_LABEL}");
    let at = rest
        .find(&marker)
        .ok_or_else(|| PromptError::Parse("missing Indication: section".into()))?;
    let strip_space = |s: &str| s.strip_prefix(' ').unwrap_or(s).to_string();
    Ok((
        PromptParts {
            description: description.to_string(),
            findings: strip_space(&rest[..at]),
            indications: strip_space(&rest[at + marker.len()..]),
        },
        token.to_string(),
    ))
}

/// Shortens the findings tail until the prompt fits `token_budget` tokens.
///
/// The description line, style token and section labels are never cut.
/// For decoder-only training examples the budget covers the prompt; the
/// target suffix is kept whole.
pub fn truncate_to_budget(
    example: &FormattedExample,
    token_budget: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<FormattedExample, PromptError> {
    let prompt_len = |findings: &str| {
        let parts = PromptParts {
            findings: findings.to_string(),
            ..example.parts.clone()
        };
        tokenizer.count_tokens(&render(&parts, example.arch, &example.style_token, None))
    };
    if prompt_len(&example.parts.findings) <= token_budget {
        return Ok(example.clone());
    }
    let skeleton = prompt_len("");
    if skeleton > token_budget {
        return Err(PromptError::Budget {
            budget: token_budget,
            required: skeleton,
        });
    }
    let findings_pieces = tokenizer.tokenize(&example.parts.findings);
    let prefix = |k: usize| findings_pieces[..k].concat().trim_end().to_string();
    // largest k whose prefix fits
    let (mut lo, mut hi) = (0usize, findings_pieces.len());
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if prompt_len(&prefix(mid)) <= token_budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let mut out = example.clone();
    out.parts.findings = prefix(lo);
    out.input_text = render(&out.parts, out.arch, &out.style_token, example.train_target());
    out.truncated = true;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::PieceTokenizer;

    fn report(physician: &str) -> Report {
        Report {
            report_id: "R1".into(),
            exam_description: "PET/CT".into(),
            physician_id: physician.into(),
            findings: "Hypermetabolic left cervical node, SUVmax 7.2.".into(),
            indications: "Hodgkin lymphoma, restaging.".into(),
            impression: "1. Residual cervical disease. Deauville score 4.".into(),
            cohort_tag: None,
        }
    }

    fn registry() -> StyleTokenRegistry {
        let mut reg = StyleTokenRegistry::new();
        reg.register("P1");
        reg.register("P2");
        reg
    }

    #[test]
    fn register_is_idempotent_and_injective() {
        let mut reg = StyleTokenRegistry::new();
        let a = reg.register("P1");
        assert_eq!(reg.register("P1"), a);
        let b = reg.register("P2");
        assert_ne!(a, b);
        assert_eq!(reg.len(), 2);
    }

    #[test]
    fn sixty_five_physicians_get_distinct_tokens() {
        let mut reg = StyleTokenRegistry::new();
        let tokens: std::collections::HashSet<String> = (0..65).map(|i| reg.register(&format!("doc{i}"))).collect();
        assert_eq!(tokens.len(), 65);
        assert!(tokens.iter().all(|t| is_reserved_token(t)));
        assert_eq!(reg.tokens().len(), 65);
        assert_eq!(reg.tokens()[64], "[PHY_065]");
    }

    #[test]
    fn registry_json_round_trip_and_hash() {
        let reg = registry();
        let back = StyleTokenRegistry::from_json(&reg.to_json()).unwrap();
        assert_eq!(back, reg);
        assert_eq!(back.content_hash(), reg.content_hash());
        assert_eq!(back.physician("[PHY_002]"), Some("P2"));
    }

    #[test]
    fn vocabulary_collision_is_detected() {
        let reg = registry();
        assert!(reg.check_vocabulary(|w| w == "the").is_ok());
        assert_eq!(
            reg.check_vocabulary(|w| w == "[PHY_002]"),
            Err(PromptError::VocabularyCollision("[PHY_002]".into()))
        );
    }

    #[test]
    fn encoder_decoder_layout() {
        let ex = build_encoder_decoder_input(&report("P1"), &registry()).unwrap();
        let lines: Vec<&str> = ex.input_text.lines().collect();
        assert_eq!(
            lines,
            vec![
                "PET/CT",
                "[PHY_001]",
                "Findings: Hypermetabolic left cervical node, SUVmax 7.2.",
                "Indication: Hodgkin lymphoma, restaging."
            ]
        );
        assert_eq!(ex.target_text, report("P1").impression);
    }

    #[test]
    fn empty_indications_keep_the_section() {
        let mut r = report("P1");
        r.indications.clear();
        let ex = build_encoder_decoder_input(&r, &registry()).unwrap();
        assert!(ex.input_text.ends_with("\nIndication:"));
        let (parts, _) = parse_encoder_decoder_input(&ex.input_text).unwrap();
        assert_eq!(parts.indications, "");
    }

    #[test]
    fn physician_changes_only_line_two() {
        let a = build_encoder_decoder_input(&report("P1"), &registry()).unwrap();
        let b = build_encoder_decoder_input(&report("P2"), &registry()).unwrap();
        let diff: Vec<usize> = a
            .input_text
            .lines()
            .zip(b.input_text.lines())
            .enumerate()
            .filter(|(_, (x, y))| x != y)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(diff, vec![1]);
    }

    #[test]
    fn unregistered_physician() {
        assert_eq!(
            build_encoder_decoder_input(&report("P9"), &registry()).unwrap_err(),
            PromptError::MissingToken("P9".into())
        );
        assert!(build_decoder_only_prompt(&report("P9"), &registry(), PromptMode::Infer).is_err());
    }

    #[test]
    fn reserved_token_in_findings_is_rejected() {
        let mut r = report("P1");
        r.findings = "see [PHY_002]".into();
        assert!(matches!(
            build_encoder_decoder_input(&r, &registry()),
            Err(PromptError::ReservedTokenInText { field: "findings", .. })
        ));
    }

    #[test]
    fn decoder_only_instruction_and_prefix() {
        let reg = registry();
        let infer = build_decoder_only_prompt(&report("P2"), &reg, PromptMode::Infer).unwrap();
        assert!(infer.input_text.ends_with("Response:"));
        assert_eq!(
            infer.input_text.lines().next().unwrap(),
            "Derive the impression from the given PET/CT report for [PHY_002]."
        );
        assert!(infer.target_text.is_empty());
        let train = build_decoder_only_prompt(&report("P2"), &reg, PromptMode::Train).unwrap();
        assert_eq!(train.input_text, format!("{} {}", infer.input_text, report("P2").impression));
        assert_eq!(train.prompt(), infer.input_text);
        assert!(train
            .input_text
            .contains("Input:\nHypermetabolic left cervical node, SUVmax 7.2.\n\nHodgkin lymphoma, restaging.\n"));
    }

    #[test]
    fn truncation_noop_when_within_budget() {
        let ex = build_encoder_decoder_input(&report("P1"), &registry()).unwrap();
        let out = truncate_to_budget(&ex, 10_000, &PieceTokenizer).unwrap();
        assert_eq!(out, ex);
    }

    #[test]
    fn truncation_cuts_findings_tail_only() {
        let mut r = report("P1");
        r.findings = (0..600).map(|i| format!("word{i}")).collect::<Vec<_>>().join(" ");
        for arch in [Arch::EncoderDecoder, Arch::DecoderOnly] {
            let ex = build_example(&r, &registry(), arch, PromptMode::Train).unwrap();
            let out = truncate_to_budget(&ex, 120, &PieceTokenizer).unwrap();
            assert!(out.truncated);
            assert!(PieceTokenizer.count_tokens(&out.prompt()) <= 120);
            assert!(r.findings.starts_with(&out.parts.findings));
            assert!(out.parts.findings.len() < r.findings.len());
            assert_eq!(out.input_text.matches("[PHY_001]").count(), 1);
            assert!(out.input_text.contains("PET/CT"));
            assert!(out.input_text.contains(INDICATION_LABEL) || out.input_text.contains(INPUT_LABEL));
            if arch == Arch::DecoderOnly {
                assert!(out.input_text.ends_with(&r.impression));
            }
        }
    }

    #[test]
    fn tiny_budget_is_an_error() {
        let ex = build_encoder_decoder_input(&report("P1"), &registry()).unwrap();
        assert!(matches!(
            truncate_to_budget(&ex, 3, &PieceTokenizer),
            Err(PromptError::Budget { budget: 3, .. })
        ));
    }
}
