//! Character tokenizer, instruction templates and the synthetic tasks.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng::SplitMix64;

/// End-of-sequence id; also used to pad batches.
pub const EOS: usize = 0;
/// Target value skipped by the loss.
pub const IGNORE: usize = usize::MAX;
pub const VOCAB: usize = 64;

const PUNCT: &str = ".,:#|-?!'";

/// Map one character to its id. 0 is EOS, then newline, space, `a`–`z`,
/// `A`–`Z` and a few punctuation marks.
pub fn char_id(c: char) -> Result<usize> {
    Ok(match c {
        '\n' => 1,
        ' ' => 2,
        'a'..='z' => 3 + (c as usize - 'a' as usize),
        'A'..='Z' => 29 + (c as usize - 'A' as usize),
        _ => match PUNCT.chars().position(|p| p == c) {
            Some(i) => 55 + i,
            None => return Err(Error::UnknownChar(c)),
        },
    })
}

pub fn id_char(id: usize) -> Option<char> {
    match id {
        1 => Some('\n'),
        2 => Some(' '),
        3..=28 => Some((b'a' + (id - 3) as u8) as char),
        29..=54 => Some((b'A' + (id - 29) as u8) as char),
        55..=63 => PUNCT.chars().nth(id - 55),
        _ => None,
    }
}

pub fn encode(s: &str) -> Result<Vec<usize>> {
    s.chars().map(char_id).collect()
}

/// Decode ids, dropping anything after the first EOS.
pub fn decode(ids: &[usize]) -> String {
    ids.iter()
        .take_while(|&&i| i != EOS)
        .filter_map(|&i| id_char(i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlpacaSample {
    pub instruction: String,
    pub input: String,
    pub output: String,
    /// 8×8 toy image attached to visual tasks.
    pub image: Option<Vec<u8>>,
}

impl AlpacaSample {
    pub fn new(instruction: &str, input: &str, output: &str) -> Self {
        Self {
            instruction: instruction.into(),
            input: input.into(),
            output: output.into(),
            image: None,
        }
    }
}

/// Prompt layout. `Alpaca` is the standard instruction template; `Compact`
/// keeps the same three sections with one-letter headers so toy tasks fit in
/// a 64-token context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateStyle {
    Alpaca,
    Compact,
}

impl TemplateStyle {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpaca" => Ok(Self::Alpaca),
            "compact" => Ok(Self::Compact),
            _ => Err(Error::Config(alloc::format!("unknown template {s:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Alpaca => "alpaca",
            Self::Compact => "compact",
        }
    }
}

const HEADER_WITH_INPUT: &str = "Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.";
const HEADER_NO_INPUT: &str =
    "Below is an instruction that describes a task. Write a response that appropriately completes the request.";

/// Prompt text up to and including the response header.
pub fn render_prompt(s: &AlpacaSample, style: TemplateStyle) -> String {
    let mut out = String::new();
    match style {
        TemplateStyle::Alpaca => {
            let header = if s.input.is_empty() {
                HEADER_NO_INPUT
            } else {
                HEADER_WITH_INPUT
            };
            out.push_str(header);
            out.push_str("\n\nInstruction: ");
            out.push_str(&s.instruction);
            if !s.input.is_empty() {
                out.push_str("\n\nInput: ");
                out.push_str(&s.input);
            }
            out.push_str("\n\nResponse: ");
        }
        TemplateStyle::Compact => {
            out.push_str("I:");
            out.push_str(&s.instruction);
            if !s.input.is_empty() {
                out.push_str("\nX:");
                out.push_str(&s.input);
            }
            out.push_str("\nR:");
        }
    }
    out
}

/// Full rendered text including the response.
pub fn render(s: &AlpacaSample, style: TemplateStyle) -> String {
    let mut t = render_prompt(s, style);
    t.push_str(&s.output);
    t
}

/// Token ids of prompt, response and EOS, with the loss mask set on the
/// response and EOS only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
    pub prompt_len: usize,
}

impl Encoded {
    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.prompt_len]
    }

    /// Response ids without the EOS.
    pub fn response(&self) -> &[usize] {
        &self.tokens[self.prompt_len..self.tokens.len() - 1]
    }
}

pub fn format_alpaca(s: &AlpacaSample, style: TemplateStyle, max_seq: usize) -> Result<Encoded> {
    let prompt = encode(&render_prompt(s, style))?;
    let response = encode(&s.output)?;
    let len = prompt.len() + response.len() + 1;
    if len > max_seq {
        return Err(Error::SequenceTooLong { len, max: max_seq });
    }
    let prompt_len = prompt.len();
    let mut tokens = prompt;
    tokens.extend_from_slice(&response);
    tokens.push(EOS);
    let mut mask = vec![false; prompt_len];
    mask.resize(len, true);
    Ok(Encoded {
        tokens,
        mask,
        prompt_len,
    })
}

/// Next-token targets: position `t` predicts token `t + 1` where that token is
/// masked in, otherwise [`IGNORE`].
pub fn shifted_targets(e: &Encoded, seq: usize) -> Vec<usize> {
    let mut t = vec![IGNORE; seq];
    for i in 0..e.tokens.len() - 1 {
        if e.mask[i + 1] {
            t[i] = e.tokens[i + 1];
        }
    }
    t
}

/// Padded token batch and the matching flattened targets.
pub fn collate(items: &[&Encoded]) -> (TokenBatch, Vec<usize>) {
    let rows: Vec<Vec<usize>> = items.iter().map(|e| e.tokens.clone()).collect();
    let batch = TokenBatch::padded(&rows, EOS);
    let mut targets = Vec::with_capacity(batch.tokens.len());
    for e in items {
        targets.extend(shifted_targets(e, batch.seq));
    }
    (batch, targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Keymap,
    VisClass,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "keymap" => Ok(Self::Keymap),
            "vis-class" => Ok(Self::VisClass),
            _ => Err(Error::Config(alloc::format!("unknown task {s:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::Keymap => "keymap",
            Self::VisClass => "vis-class",
        }
    }

    /// Instruction word written into the prompt.
    pub fn instruction(&self) -> &'static str {
        match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::Keymap => "map",
            Self::VisClass => "name the image",
        }
    }
}

/// Class words of the visual task, one per patch.
pub const CLASS_WORDS: [&str; 4] = ["ant", "bee", "cat", "dog"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Characters inputs are drawn from.
    pub alphabet: Vec<char>,
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Substitution used by `keymap`; `None` draws a seeded permutation of
    /// the alphabet.
    pub keymap: Option<Vec<char>>,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, count: usize, seed: u64) -> Self {
        Self {
            kind,
            alphabet: "abcdefghijklmnop".chars().collect(),
            count,
            min_len: 3,
            max_len: 8,
            seed,
            keymap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet.is_empty() {
            return Err(Error::Config("data.alphabet must not be empty".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need 1 <= data.min_len <= data.max_len".into()));
        }
        for &c in &self.alphabet {
            char_id(c)?;
        }
        if let Some(k) = &self.keymap {
            if k.len() != self.alphabet.len() {
                return Err(Error::Config("keymap must have one entry per alphabet char".into()));
            }
        }
        Ok(())
    }

    /// The substitution table `keymap` uses.
    pub fn permutation(&self) -> Vec<char> {
        match &self.keymap {
            Some(k) => k.clone(),
            None => {
                let mut p = self.alphabet.clone();
                SplitMix64::derive(self.seed, "keymap").shuffle(&mut p);
                p
            }
        }
    }
}

/// Image whose brightest patch is `class`: background bytes in [0, 64),
/// the chosen 4×4 patch in [192, 256).
pub fn class_image(class: usize, rng: &mut SplitMix64) -> Vec<u8> {
    let mut img = vec![0u8; 64];
    for (i, px) in img.iter_mut().enumerate() {
        let (y, x) = (i / 8, i % 8);
        let patch = (y / 4) * 2 + x / 4;
        *px = if patch == class {
            192 + rng.below(64) as u8
        } else {
            rng.below(64) as u8
        };
    }
    img
}

/// Index of the patch with the largest byte sum.
pub fn dominant_patch(image: &[u8]) -> usize {
    let mut sums = [0u32; 4];
    for (i, &b) in image.iter().enumerate() {
        let (y, x) = (i / 8, i % 8);
        sums[(y / 4) * 2 + x / 4] += b as u32;
    }
    let mut best = 0;
    for p in 1..4 {
        if sums[p] > sums[best] {
            best = p;
        }
    }
    best
}

pub fn gen_task(spec: &TaskSpec) -> Result<Vec<AlpacaSample>> {
    spec.validate()?;
    let mut rng = SplitMix64::derive(spec.seed, spec.kind.name());
    let perm = spec.permutation();
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        if spec.kind == TaskKind::VisClass {
            let class = rng.below(CLASS_WORDS.len());
            let image = class_image(class, &mut rng);
            let input = CLASS_WORDS.join(" ");
            let mut s = AlpacaSample::new(
                spec.kind.instruction(),
                &input,
                CLASS_WORDS[dominant_patch(&image)],
            );
            s.image = Some(image);
            out.push(s);
            continue;
        }
        let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
        let input: String = (0..len)
            .map(|_| spec.alphabet[rng.below(spec.alphabet.len())])
            .collect();
        let output = apply_task(spec.kind, &input, &spec.alphabet, &perm);
        out.push(AlpacaSample::new(spec.kind.instruction(), &input, &output));
    }
    Ok(out)
}

/// Expected output of a text task.
pub fn apply_task(kind: TaskKind, input: &str, alphabet: &[char], perm: &[char]) -> String {
    match kind {
        TaskKind::Copy | TaskKind::VisClass => input.into(),
        TaskKind::Reverse => input.chars().rev().collect(),
        TaskKind::Keymap => input
            .chars()
            .map(|c| match alphabet.iter().position(|&a| a == c) {
                Some(i) => perm[i],
                None => c,
            })
            .collect(),
    }
}
