//! Cloze template DSL and sequence assembly.
//!
//! Templates are strings like `[CLS] {x1} , It was [MASK] . [SEP]`.
//! `{x1}`/`{x2}` are input slots, `[MASK]` is the single cloze slot,
//! `[PROMPT:m]` inserts `m` trainable continuous prompt positions, and
//! `[VDEMO]` optionally marks where demonstration blocks are spliced.
//! `[CLS]`/`[SEP]` are ordinary special tokens inside literals.
//!
//! Three augmented forms are assembled on top of the anchor sequence:
//! one real demonstration per class, one virtual (trainable) block per
//! class, and the positive view where a single virtual block is swapped
//! for a real demonstration of that class.

use std::ops::Range;

use crate::data::LabeledText;
use crate::error::{Error, Result};
use crate::task::{DemoPlacement, Verbalizer};
use crate::vocab::{Vocab, CLS_ID, MASK_ID, PROMPT_ID, SEP_ID, VDEMO_ID};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    /// Plain template text; may contain special tokens like `[CLS]`.
    Literal(String),
    /// `{x1}` is slot 0, `{x2}` is slot 1.
    InputSlot(usize),
    /// The cloze position.
    MaskSlot,
    /// `m` continuous prompt positions; indices restart at 0 in each
    /// demonstration block, so blocks share the anchor's prompt embeddings.
    PromptSlot(usize),
    /// A trainable demonstration block of `len` positions for one class.
    VirtualDemo { class: usize, len: usize },
    /// A real demonstration of one class, rendered through the template.
    RealDemo { class: usize },
    /// `[VDEMO]`: explicit splice point for demonstration blocks.
    DemoInsertion,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSpec {
    pub segments: Vec<Segment>,
}

impl TemplateSpec {
    /// Parses the DSL. Requires exactly one `[MASK]` and at most one
    /// `[VDEMO]`.
    pub fn parse(text: &str) -> Result<TemplateSpec> {
        let spec = Self::parse_segments(text)?;
        let masks = spec
            .segments
            .iter()
            .filter(|s| matches!(s, Segment::MaskSlot))
            .count();
        if masks == 0 {
            return Err(Error::MissingMask);
        }
        Ok(spec)
    }

    fn parse_segments(text: &str) -> Result<TemplateSpec> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut masks = 0usize;
        let mut vdemos = 0usize;
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0usize;

        let flush = |literal: &mut String, segments: &mut Vec<Segment>| {
            if !literal.trim().is_empty() {
                segments.push(Segment::Literal(literal.trim().to_string()));
            }
            literal.clear();
        };

        while i < chars.len() {
            match chars[i] {
                '{' => {
                    let close = chars[i + 1..]
                        .iter()
                        .position(|&c| c == '}')
                        .map(|p| i + 1 + p)
                        .ok_or_else(|| Error::UnbalancedBrace(text.to_string()))?;
                    let body: String = chars[i + 1..close].iter().collect();
                    if body.contains('{') || body.contains('[') {
                        return Err(Error::UnbalancedBrace(text.to_string()));
                    }
                    flush(&mut literal, &mut segments);
                    match body.as_str() {
                        "x1" => segments.push(Segment::InputSlot(0)),
                        "x2" => segments.push(Segment::InputSlot(1)),
                        other => return Err(Error::UnknownSlot(format!("{{{other}}}"))),
                    }
                    i = close + 1;
                }
                '}' => return Err(Error::UnbalancedBrace(text.to_string())),
                '[' => {
                    let close = chars[i + 1..]
                        .iter()
                        .position(|&c| c == ']')
                        .map(|p| i + 1 + p)
                        .ok_or_else(|| Error::UnbalancedBrace(text.to_string()))?;
                    let body: String = chars[i + 1..close].iter().collect();
                    if body.contains('[') || body.contains('{') {
                        return Err(Error::UnbalancedBrace(text.to_string()));
                    }
                    match body.as_str() {
                        "MASK" => {
                            masks += 1;
                            if masks > 1 {
                                return Err(Error::DuplicateMask);
                            }
                            flush(&mut literal, &mut segments);
                            segments.push(Segment::MaskSlot);
                        }
                        "VDEMO" => {
                            vdemos += 1;
                            if vdemos > 1 {
                                return Err(Error::DuplicateVDemo);
                            }
                            flush(&mut literal, &mut segments);
                            segments.push(Segment::DemoInsertion);
                        }
                        "CLS" | "SEP" | "PAD" | "UNK" => {
                            if !literal.is_empty() && !literal.ends_with(' ') {
                                literal.push(' ');
                            }
                            literal.push('[');
                            literal.push_str(&body);
                            literal.push(']');
                        }
                        other => {
                            if let Some(count) = other.strip_prefix("PROMPT:") {
                                let m: usize =
                                    count.parse().map_err(|_| Error::ParseError {
                                        context: "template".into(),
                                        detail: format!("bad prompt length {count:?}"),
                                    })?;
                                if m == 0 {
                                    return Err(Error::ParseError {
                                        context: "template".into(),
                                        detail: "prompt length must be >= 1".into(),
                                    });
                                }
                                flush(&mut literal, &mut segments);
                                segments.push(Segment::PromptSlot(m));
                            } else {
                                // Bare [PROMPT] has no length and is rejected.
                                return Err(Error::UnknownSlot(format!("[{other}]")));
                            }
                        }
                    }
                    i = close + 1;
                }
                ']' => return Err(Error::UnbalancedBrace(text.to_string())),
                c => {
                    literal.push(c);
                    i += 1;
                }
            }
        }
        flush(&mut literal, &mut segments);
        Ok(TemplateSpec { segments })
    }

    /// `[CLS] {x1} [SEP]` (plus `{x2} [SEP]`), the maskless form used by
    /// standard classifier-head fine-tuning.
    pub fn plain(with_pair: bool) -> TemplateSpec {
        let mut segments = vec![
            Segment::Literal("[CLS]".into()),
            Segment::InputSlot(0),
            Segment::Literal("[SEP]".into()),
        ];
        if with_pair {
            segments.push(Segment::InputSlot(1));
            segments.push(Segment::Literal("[SEP]".into()));
        }
        TemplateSpec { segments }
    }

    pub fn has_mask(&self) -> bool {
        self.segments.iter().any(|s| matches!(s, Segment::MaskSlot))
    }

    pub fn uses_input(&self, slot: usize) -> bool {
        self.segments
            .iter()
            .any(|s| matches!(s, Segment::InputSlot(i) if *i == slot))
    }

    /// Total continuous prompt positions in one walk of the template.
    pub fn num_prompt_tokens(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::PromptSlot(m) => *m,
                _ => 0,
            })
            .sum()
    }

    /// Non-special literal words, for vocabulary reservation.
    pub fn literal_words(&self) -> Vec<String> {
        let mut words = Vec::new();
        for seg in &self.segments {
            if let Segment::Literal(text) = seg {
                for w in text.split_whitespace() {
                    if !(w.starts_with('[') && w.ends_with(']')) {
                        words.push(w.to_string());
                    }
                }
            }
        }
        words
    }

    fn demo_insertion_index(&self) -> Option<usize> {
        self.segments
            .iter()
            .position(|s| matches!(s, Segment::DemoInsertion))
    }

    /// Splices demonstration block segments at the `[VDEMO]` marker, or per
    /// `placement`: `After` appends them, `Before` puts them right after a
    /// leading `[CLS]`.
    pub fn with_blocks(&self, blocks: Vec<Segment>, placement: DemoPlacement) -> TemplateSpec {
        let mut segments = self.segments.clone();
        if let Some(at) = self.demo_insertion_index() {
            segments.splice(at..at + 1, blocks);
            return TemplateSpec { segments };
        }
        match placement {
            DemoPlacement::After => segments.extend(blocks),
            DemoPlacement::Before => {
                let at = Self::split_leading_cls(&mut segments);
                segments.splice(at..at, blocks);
            }
        }
        TemplateSpec { segments }
    }

    /// The template with `m` trainable prompt positions inserted after a
    /// leading `[CLS]` (or at the front). Used when continuous prompting
    /// runs on a template without explicit prompt slots.
    pub fn with_prompt_prefix(&self, m: usize) -> TemplateSpec {
        let mut segments = self.segments.clone();
        let at = Self::split_leading_cls(&mut segments);
        segments.insert(at, Segment::PromptSlot(m));
        TemplateSpec { segments }
    }

    /// Detaches a leading `[CLS]` into its own segment and returns the
    /// index right after it (0 if the template does not start with one).
    fn split_leading_cls(segments: &mut Vec<Segment>) -> usize {
        if let Some(Segment::Literal(text)) = segments.first() {
            let mut words = text.split_whitespace();
            if words.next() == Some("[CLS]") {
                let rest: String = words.collect::<Vec<_>>().join(" ");
                segments[0] = Segment::Literal("[CLS]".into());
                if !rest.is_empty() {
                    segments.insert(1, Segment::Literal(rest));
                }
                return 1;
            }
        }
        0
    }
}

/// One fully assembled input sequence plus the structural positions the
/// model and losses need.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPlan {
    pub token_ids: Vec<u32>,
    /// Position whose hidden state is the sequence representation.
    pub cls_pos: usize,
    pub mask_pos: Option<usize>,
    /// `(prompt index, position)`; the same index at several positions
    /// means one shared trainable embedding.
    pub prompt_positions: Vec<(usize, usize)>,
    /// Per class: positions filled by that class's virtual demonstration.
    pub virtual_positions: Vec<Vec<usize>>,
    /// `(class, span)` of each real demonstration block.
    pub real_demo_spans: Vec<(usize, Range<usize>)>,
}

impl TokenPlan {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn mask_pos(&self) -> Result<usize> {
        self.mask_pos.ok_or(Error::NoMaskPosition)
    }
}

#[derive(Default)]
struct PlanBuilder {
    ids: Vec<u32>,
    mask_pos: Option<usize>,
    prompt_positions: Vec<(usize, usize)>,
    prompt_counter: usize,
    /// Anchor input token spans, for truncation.
    input_spans: Vec<(usize, Range<usize>)>,
    virtual_positions: Vec<Vec<usize>>,
    real_demo_spans: Vec<(usize, Range<usize>)>,
}

pub struct TemplateEngine<'a> {
    vocab: &'a Vocab,
    pub max_len: usize,
}

impl<'a> TemplateEngine<'a> {
    pub fn new(vocab: &'a Vocab, max_len: usize) -> TemplateEngine<'a> {
        TemplateEngine { vocab, max_len }
    }

    /// The anchor sequence `T(x)`: inputs substituted, mask kept. Errors
    /// with `OverLength` rather than truncating.
    pub fn render_anchor(
        &self,
        spec: &TemplateSpec,
        example: &LabeledText,
    ) -> Result<TokenPlan> {
        let inputs = self.example_inputs(spec, example)?;
        let plan = self.assemble(spec, &inputs, 0, &[], &[])?;
        self.check_len(plan.len())?;
        Ok(plan)
    }

    /// Like `render_anchor`, but trims input tokens to fit `max_len`.
    pub fn render_anchor_fit(
        &self,
        spec: &TemplateSpec,
        example: &LabeledText,
    ) -> Result<TokenPlan> {
        let inputs = self.example_inputs(spec, example)?;
        self.assemble_fit(spec, inputs, 0, &[], &[])
    }

    /// The token block a real demonstration contributes: the template with
    /// the demo's inputs, its label word at the mask, outer `[CLS]`
    /// dropped, ending in a single `[SEP]`.
    pub fn render_demonstration(
        &self,
        spec: &TemplateSpec,
        demo: &LabeledText,
        verbalizer: &Verbalizer,
    ) -> Result<Vec<u32>> {
        let class = verbalizer.class_of(&demo.label)?;
        let inputs = self.example_inputs(spec, demo)?;
        let mut builder = PlanBuilder::default();
        self.emit_block(spec, &inputs, verbalizer.word_id(class), &mut builder)?;
        self.check_len(builder.ids.len())?;
        Ok(builder.ids)
    }

    /// The fully demonstration-augmented sequence: the anchor followed by
    /// one real demonstration per class, in class order. `demos[c]` must be
    /// labeled with class `c`.
    pub fn build_demo_augmented(
        &self,
        spec: &TemplateSpec,
        example: &LabeledText,
        demos: &[LabeledText],
        verbalizer: &Verbalizer,
        placement: DemoPlacement,
    ) -> Result<TokenPlan> {
        if demos.len() != verbalizer.num_classes() {
            return Err(Error::InvalidConfig(format!(
                "need one demonstration per class ({}), got {}",
                verbalizer.num_classes(),
                demos.len()
            )));
        }
        for (class, demo) in demos.iter().enumerate() {
            let got = verbalizer.class_of(&demo.label)?;
            if got != class {
                return Err(Error::DemoClassMismatch {
                    expected: verbalizer.label(class).to_string(),
                    got: demo.label.clone(),
                });
            }
        }
        let blocks: Vec<Segment> = (0..demos.len())
            .map(|class| Segment::RealDemo { class })
            .collect();
        let full = spec.with_blocks(blocks, placement);
        let inputs = self.example_inputs(spec, example)?;
        self.assemble_fit(
            &full,
            inputs,
            verbalizer.num_classes(),
            demos,
            verbalizer.word_ids(),
        )
    }

    /// The virtual-demonstration sequence: the anchor followed by one
    /// trainable block of `n` positions per class.
    pub fn build_virtual(
        &self,
        spec: &TemplateSpec,
        example: &LabeledText,
        num_classes: usize,
        n: usize,
        placement: DemoPlacement,
    ) -> Result<TokenPlan> {
        let blocks: Vec<Segment> = (0..num_classes)
            .map(|class| Segment::VirtualDemo { class, len: n })
            .collect();
        let full = spec.with_blocks(blocks, placement);
        let inputs = self.example_inputs(spec, example)?;
        self.assemble_fit(&full, inputs, num_classes, &[], &[])
    }

    /// The positive view: like `build_virtual`, but the block of
    /// `replaced_class` is a real demonstration of that class instead.
    pub fn build_positive(
        &self,
        spec: &TemplateSpec,
        example: &LabeledText,
        num_classes: usize,
        n: usize,
        replaced_class: usize,
        demo: &LabeledText,
        verbalizer: &Verbalizer,
        placement: DemoPlacement,
    ) -> Result<TokenPlan> {
        let got = verbalizer.class_of(&demo.label)?;
        if got != replaced_class {
            return Err(Error::DemoClassMismatch {
                expected: verbalizer.label(replaced_class).to_string(),
                got: demo.label.clone(),
            });
        }
        let blocks: Vec<Segment> = (0..num_classes)
            .map(|class| {
                if class == replaced_class {
                    Segment::RealDemo { class }
                } else {
                    Segment::VirtualDemo { class, len: n }
                }
            })
            .collect();
        let full = spec.with_blocks(blocks, placement);
        let inputs = self.example_inputs(spec, example)?;
        // `demos` is indexed by class; only `replaced_class` is read.
        let mut demos: Vec<LabeledText> = Vec::new();
        for class in 0..num_classes {
            if class == replaced_class {
                demos.push(demo.clone());
            } else {
                demos.push(LabeledText {
                    uid: String::new(),
                    text: String::new(),
                    text_pair: None,
                    label: verbalizer.label(class).to_string(),
                });
            }
        }
        self.assemble_fit(
            &full,
            inputs,
            num_classes,
            &demos,
            verbalizer.word_ids(),
        )
    }

    fn example_inputs(
        &self,
        spec: &TemplateSpec,
        example: &LabeledText,
    ) -> Result<Vec<Vec<u32>>> {
        let mut inputs = vec![self.vocab.tokenize(&example.text)];
        if spec.uses_input(1) {
            let pair = example
                .text_pair
                .as_ref()
                .ok_or_else(|| Error::MissingField("x2".into()))?;
            inputs.push(self.vocab.tokenize(pair));
        } else {
            inputs.push(Vec::new());
        }
        Ok(inputs)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.max_len {
            return Err(Error::OverLength {
                length: len,
                max: self.max_len,
            });
        }
        Ok(())
    }

    /// Assembles, trimming anchor input tokens from the tail (longer slot
    /// first, ties trim `x2`, at least one token kept per used slot) until
    /// the sequence fits.
    fn assemble_fit(
        &self,
        spec: &TemplateSpec,
        mut inputs: Vec<Vec<u32>>,
        num_classes: usize,
        demos: &[LabeledText],
        demo_word_ids: &[u32],
    ) -> Result<TokenPlan> {
        loop {
            let plan = self.assemble(spec, &inputs, num_classes, demos, demo_word_ids)?;
            if plan.len() <= self.max_len {
                return Ok(plan);
            }
            let mut over = plan.len() - self.max_len;
            let mut trimmed = false;
            while over > 0 {
                let slot = match (inputs[0].len(), inputs[1].len()) {
                    (a, b) if b > 1 && b >= a => 1,
                    (a, _) if a > 1 => 0,
                    _ => break,
                };
                inputs[slot].pop();
                over -= 1;
                trimmed = true;
            }
            if !trimmed {
                return Err(Error::OverLength {
                    length: plan.len(),
                    max: self.max_len,
                });
            }
        }
    }

    fn assemble(
        &self,
        spec: &TemplateSpec,
        inputs: &[Vec<u32>],
        num_classes: usize,
        demos: &[LabeledText],
        demo_word_ids: &[u32],
    ) -> Result<TokenPlan> {
        let mut b = PlanBuilder {
            virtual_positions: vec![Vec::new(); num_classes],
            ..Default::default()
        };
        for seg in &spec.segments {
            match seg {
                Segment::Literal(text) => b.ids.extend(self.vocab.tokenize(text)),
                Segment::InputSlot(slot) => {
                    let toks = inputs.get(*slot).ok_or_else(|| {
                        Error::MissingField(format!("x{}", slot + 1))
                    })?;
                    let start = b.ids.len();
                    b.ids.extend_from_slice(toks);
                    b.input_spans.push((*slot, start..b.ids.len()));
                }
                Segment::MaskSlot => {
                    if b.mask_pos.is_some() {
                        return Err(Error::DuplicateMask);
                    }
                    b.mask_pos = Some(b.ids.len());
                    b.ids.push(MASK_ID);
                }
                Segment::PromptSlot(m) => {
                    for _ in 0..*m {
                        b.prompt_positions.push((b.prompt_counter, b.ids.len()));
                        b.prompt_counter += 1;
                        b.ids.push(PROMPT_ID);
                    }
                }
                Segment::VirtualDemo { class, len } => {
                    for _ in 0..*len {
                        b.virtual_positions[*class].push(b.ids.len());
                        b.ids.push(VDEMO_ID);
                    }
                    b.ids.push(SEP_ID);
                }
                Segment::RealDemo { class } => {
                    let demo = demos.get(*class).ok_or_else(|| {
                        Error::InvalidConfig(format!("no demonstration for class {class}"))
                    })?;
                    let word_id = *demo_word_ids.get(*class).ok_or_else(|| {
                        Error::InvalidConfig(format!("no label word for class {class}"))
                    })?;
                    let demo_inputs = self.example_inputs(spec, demo)?;
                    let start = b.ids.len();
                    self.emit_block(spec, &demo_inputs, word_id, &mut b)?;
                    // The span covers the block's content, not its [SEP].
                    b.real_demo_spans.push((*class, start..b.ids.len() - 1));
                }
                Segment::DemoInsertion => {}
            }
        }
        let cls_pos = b
            .ids
            .iter()
            .position(|&id| id == CLS_ID)
            .unwrap_or(0);
        Ok(TokenPlan {
            token_ids: b.ids,
            cls_pos,
            mask_pos: b.mask_pos,
            prompt_positions: b.prompt_positions,
            virtual_positions: b.virtual_positions,
            real_demo_spans: b.real_demo_spans,
        })
    }

    /// Emits one demonstration block into `builder`: the template walked
    /// with the demo's inputs and `word_id` at the mask, outer `[CLS]`
    /// stripped, exactly one trailing `[SEP]`.
    fn emit_block(
        &self,
        spec: &TemplateSpec,
        inputs: &[Vec<u32>],
        word_id: u32,
        builder: &mut PlanBuilder,
    ) -> Result<()> {
        let mut inner = PlanBuilder::default();
        for seg in &spec.segments {
            match seg {
                Segment::Literal(text) => inner.ids.extend(self.vocab.tokenize(text)),
                Segment::InputSlot(slot) => {
                    let toks = inputs.get(*slot).ok_or_else(|| {
                        Error::MissingField(format!("x{}", slot + 1))
                    })?;
                    inner.ids.extend_from_slice(toks);
                }
                Segment::MaskSlot => inner.ids.push(word_id),
                Segment::PromptSlot(m) => {
                    for _ in 0..*m {
                        inner
                            .prompt_positions
                            .push((inner.prompt_counter, inner.ids.len()));
                        inner.prompt_counter += 1;
                        inner.ids.push(PROMPT_ID);
                    }
                }
                // Nested demonstration structure is not expanded inside a
                // block; the parse layer cannot produce it.
                Segment::VirtualDemo { .. }
                | Segment::RealDemo { .. }
                | Segment::DemoInsertion => {}
            }
        }
        let mut start = 0usize;
        if inner.ids.first() == Some(&CLS_ID) {
            start = 1;
        }
        let mut end = inner.ids.len();
        while end > start && inner.ids[end - 1] == SEP_ID {
            end -= 1;
        }
        let offset = builder.ids.len();
        for (idx, pos) in inner.prompt_positions {
            if pos >= start && pos < end {
                builder.prompt_positions.push((idx, pos - start + offset));
            }
        }
        builder.ids.extend_from_slice(&inner.ids[start..end]);
        builder.ids.push(SEP_ID);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TEMPLATE: &str = "[CLS] {x1} , It was [MASK] . [SEP]";

    fn vocab() -> Vocab {
        Vocab::build(
            [
                "the movie was great and fun",
                "the film was terrible and dull",
                "a b c d e f g h i j k l m n o p",
            ],
            &["It", "was", "terrible", "great", ",", ".", "?"],
            true,
        )
    }

    fn verbalizer(v: &Vocab) -> Verbalizer {
        Verbalizer::new(
            &[
                ("negative".into(), "terrible".into()),
                ("positive".into(), "great".into()),
            ],
            v,
        )
        .unwrap()
    }

    fn ex(text: &str, label: &str) -> LabeledText {
        LabeledText {
            uid: format!("t-{label}"),
            text: text.into(),
            text_pair: None,
            label: label.into(),
        }
    }

    #[test]
    fn parse_splits_segments() {
        let spec = TemplateSpec::parse(TEMPLATE).unwrap();
        assert_eq!(
            spec.segments,
            vec![
                Segment::Literal("[CLS]".into()),
                Segment::InputSlot(0),
                Segment::Literal(", It was".into()),
                Segment::MaskSlot,
                Segment::Literal(". [SEP]".into()),
            ]
        );
    }

    #[test]
    fn parse_rejects_malformed_templates() {
        assert!(matches!(
            TemplateSpec::parse("[CLS] {x1} [SEP]"),
            Err(Error::MissingMask)
        ));
        assert!(matches!(
            TemplateSpec::parse("[MASK] and [MASK]"),
            Err(Error::DuplicateMask)
        ));
        assert!(matches!(
            TemplateSpec::parse("{x3} [MASK]"),
            Err(Error::UnknownSlot(_))
        ));
        assert!(matches!(
            TemplateSpec::parse("{x1 [MASK]"),
            Err(Error::UnbalancedBrace(_))
        ));
        assert!(matches!(
            TemplateSpec::parse("[PROMPT] {x1} [MASK]"),
            Err(Error::UnknownSlot(_))
        ));
        assert!(matches!(
            TemplateSpec::parse("[VDEMO] {x1} [MASK] [VDEMO]"),
            Err(Error::DuplicateVDemo)
        ));
    }

    #[test]
    fn parse_counts_prompt_tokens() {
        let spec = TemplateSpec::parse("[CLS] [PROMPT:4] {x1} [MASK] [SEP]").unwrap();
        assert_eq!(spec.num_prompt_tokens(), 4);
        assert!(matches!(
            TemplateSpec::parse("[PROMPT:0] {x1} [MASK]"),
            Err(Error::ParseError { .. })
        ));
    }

    #[test]
    fn anchor_renders_to_expected_tokens() {
        let v = vocab();
        let spec = TemplateSpec::parse(TEMPLATE).unwrap();
        let engine = TemplateEngine::new(&v, 32);
        let plan = engine.render_anchor(&spec, &ex("the movie was great", "positive")).unwrap();
        assert_eq!(
            v.detokenize(&plan.token_ids),
            "[CLS] the movie was great , it was [MASK] . [SEP]"
        );
        assert_eq!(plan.cls_pos, 0);
        assert_eq!(plan.mask_pos.unwrap(), 8);
        assert!(plan.prompt_positions.is_empty());
    }

    #[test]
    fn anchor_errors_when_too_long() {
        let v = vocab();
        let spec = TemplateSpec::parse(TEMPLATE).unwrap();
        let engine = TemplateEngine::new(&v, 16);
        let long = "a b c d e f g h i j k l m n o p".repeat(4);
        let err = engine.render_anchor(&spec, &ex(&long, "positive")).unwrap_err();
        assert!(matches!(err, Error::OverLength { max: 16, .. }));
    }

    #[test]
    fn demonstration_block_substitutes_label_word() {
        let v = vocab();
        let spec = TemplateSpec::parse(TEMPLATE).unwrap();
        let engine = TemplateEngine::new(&v, 32);
        let block = engine
            .render_demonstration(&spec, &ex("the film was dull", "negative"), &verbalizer(&v))
            .unwrap();
        assert_eq!(
            v.detokenize(&block),
            "the film was dull , it was terrible . [SEP]"
        );
        assert_ne!(block[0], CLS_ID);
        assert_eq!(block.last(), Some(&SEP_ID));
        assert!(!block.contains(&MASK_ID));
    }

    #[test]
    fn virtual_sequence_adds_one_block_per_class() {
        let v = vocab();
        let spec = TemplateSpec::parse(TEMPLATE).unwrap();
        let engine = TemplateEngine::new(&v, 40);
        let plan = engine
            .build_virtual(&spec, &ex("the movie was fun", "positive"), 2, 3, DemoPlacement::After)
            .unwrap();
        let anchor = engine.render_anchor(&spec, &ex("the movie was fun", "positive")).unwrap();
        assert_eq!(&plan.token_ids[..anchor.len()], &anchor.token_ids[..]);
        // Each block: three [VDEMO] positions then [SEP].
        assert_eq!(plan.len(), anchor.len() + 2 * 4);
        assert_eq!(plan.virtual_positions.len(), 2);
        for class in 0..2 {
            assert_eq!(plan.virtual_positions[class].len(), 3);
            for &pos in &plan.virtual_positions[class] {
                assert_eq!(plan.token_ids[pos], VDEMO_ID);
            }
        }
        assert_eq!(plan.mask_pos, anchor.mask_pos);
    }

    #[test]
    fn positive_view_swaps_one_block_for_a_real_demo() {
        let v = vocab();
        let spec = TemplateSpec::parse(TEMPLATE).unwrap();
        let engine = TemplateEngine::new(&v, 48);
        let demo = ex("the film was dull", "negative");
        let plan = engine
            .build_positive(
                &spec,
                &ex("the movie was fun", "positive"),
                2,
                2,
                0,
                &demo,
                &verbalizer(&v),
                DemoPlacement::After,
            )
            .unwrap();
        // Class 0 is now a real block, class 1 stays virtual.
        assert!(plan.virtual_positions[0].is_empty());
        assert_eq!(plan.virtual_positions[1].len(), 2);
        assert_eq!(plan.real_demo_spans.len(), 1);
        let (class, span) = plan.real_demo_spans[0].clone();
        assert_eq!(class, 0);
        assert_eq!(
            v.detokenize(&plan.token_ids[span]),
            "the film was dull , it was terrible ."
        );
        let err = engine.build_positive(
            &spec,
            &ex("the movie was fun", "positive"),
            2,
            2,
            1,
            &demo,
            &verbalizer(&v),
            DemoPlacement::After,
        );
        assert!(matches!(err, Err(Error::DemoClassMismatch { .. })));
    }

    #[test]
    fn demo_augmented_orders_blocks_by_class() {
        let v = vocab();
        let spec = TemplateSpec::parse(TEMPLATE).unwrap();
        let engine = TemplateEngine::new(&v, 64);
        let demos = vec![
            ex("the film was dull", "negative"),
            ex("the movie was fun", "positive"),
        ];
        let plan = engine
            .build_demo_augmented(
                &spec,
                &ex("the movie was great", "positive"),
                &demos,
                &verbalizer(&v),
                DemoPlacement::After,
            )
            .unwrap();
        assert_eq!(plan.real_demo_spans.len(), 2);
        assert_eq!(plan.real_demo_spans[0].0, 0);
        assert_eq!(plan.real_demo_spans[1].0, 1);
        let text = v.detokenize(&plan.token_ids);
        assert!(text.contains("it was terrible ."));
        assert!(text.contains("it was great ."));

        let swapped = vec![demos[1].clone(), demos[0].clone()];
        let err = engine.build_demo_augmented(
            &spec,
            &ex("the movie was great", "positive"),
            &swapped,
            &verbalizer(&v),
            DemoPlacement::After,
        );
        assert!(matches!(err, Err(Error::DemoClassMismatch { .. })));
    }

    #[test]
    fn over_length_sequences_trim_anchor_input_only() {
        let v = vocab();
        let spec = TemplateSpec::parse(TEMPLATE).unwrap();
        let max_len = 24;
        let engine = TemplateEngine::new(&v, max_len);
        let long = "a b c d e f g h i j k l m n o p a b c d".to_string();
        let example = ex(&long, "positive");
        let plan = engine
            .build_virtual(&spec, &example, 2, 1, DemoPlacement::After)
            .unwrap();
        assert_eq!(plan.len(), max_len);
        // Scaffold survives intact; only x1 lost tokens.
        let text = v.detokenize(&plan.token_ids);
        assert!(text.contains(", it was [MASK] . [SEP]"));
        assert!(text.starts_with("[CLS] a b c"));

        // But a sequence whose fixed scaffold alone exceeds the budget fails.
        let tight = TemplateEngine::new(&v, 12);
        let demo = ex("a b c d e f g h", "negative");
        let err = tight.build_positive(
            &spec,
            &example,
            2,
            1,
            0,
            &demo,
            &verbalizer(&v),
            DemoPlacement::After,
        );
        assert!(matches!(err, Err(Error::OverLength { .. })));
    }

    #[test]
    fn prompt_indices_are_shared_across_blocks() {
        let v = vocab();
        let spec = TemplateSpec::parse("[CLS] [PROMPT:2] {x1} [MASK] [SEP]").unwrap();
        let engine = TemplateEngine::new(&v, 64);
        let demos = vec![
            ex("the film was dull", "negative"),
            ex("the movie was fun", "positive"),
        ];
        let plan = engine
            .build_demo_augmented(
                &spec,
                &ex("the movie was great", "positive"),
                &demos,
                &verbalizer(&v),
                DemoPlacement::After,
            )
            .unwrap();
        // Anchor and both blocks each carry prompt indices 0 and 1.
        assert_eq!(plan.prompt_positions.len(), 6);
        let mut indices: Vec<usize> = plan.prompt_positions.iter().map(|(i, _)| *i).collect();
        indices.sort();
        assert_eq!(indices, vec![0, 0, 0, 1, 1, 1]);
        for &(_, pos) in &plan.prompt_positions {
            assert_eq!(plan.token_ids[pos], PROMPT_ID);
        }
    }

    #[test]
    fn vdemo_marker_overrides_placement() {
        let v = vocab();
        let spec = TemplateSpec::parse("[CLS] [VDEMO] {x1} , It was [MASK] . [SEP]").unwrap();
        let engine = TemplateEngine::new(&v, 40);
        let plan = engine
            .build_virtual(&spec, &ex("the movie was fun", "positive"), 2, 1, DemoPlacement::After)
            .unwrap();
        // Blocks land right after [CLS], before the input text.
        assert_eq!(plan.token_ids[1], VDEMO_ID);
        assert_eq!(plan.token_ids[2], SEP_ID);
        assert_eq!(plan.token_ids[3], VDEMO_ID);
        assert_eq!(plan.token_ids[4], SEP_ID);
        assert_eq!(plan.virtual_positions, vec![vec![1], vec![3]]);
    }

    #[test]
    fn before_placement_puts_blocks_after_cls() {
        let v = vocab();
        let spec = TemplateSpec::parse(TEMPLATE).unwrap();
        let engine = TemplateEngine::new(&v, 40);
        let plan = engine
            .build_virtual(&spec, &ex("the movie was fun", "positive"), 2, 1, DemoPlacement::Before)
            .unwrap();
        assert_eq!(plan.token_ids[0], CLS_ID);
        assert_eq!(plan.token_ids[1], VDEMO_ID);
        assert_eq!(plan.virtual_positions, vec![vec![1], vec![3]]);
        let text = v.detokenize(&plan.token_ids);
        assert!(text.ends_with(", it was [MASK] . [SEP]"));
    }

    #[test]
    fn maskless_plain_template_passes_text_through() {
        let v = vocab();
        let spec = TemplateSpec::plain(false);
        let engine = TemplateEngine::new(&v, 32);
        let plan = engine.render_anchor(&spec, &ex("the movie was fun", "positive")).unwrap();
        assert_eq!(v.detokenize(&plan.token_ids), "[CLS] the movie was fun [SEP]");
        assert!(plan.mask_pos.is_none());
        assert!(matches!(plan.mask_pos(), Err(Error::NoMaskPosition)));
    }

    #[test]
    fn pair_template_requires_second_input() {
        let v = vocab();
        let spec = TemplateSpec::parse("[CLS] {x1} ? [MASK] , {x2} [SEP]").unwrap();
        let engine = TemplateEngine::new(&v, 32);
        let err = engine.render_anchor(&spec, &ex("the movie", "positive")).unwrap_err();
        assert!(matches!(err, Error::MissingField(f) if f == "x2"));
        let mut both = ex("the movie", "positive");
        both.text_pair = Some("was fun".into());
        let plan = engine.render_anchor(&spec, &both).unwrap();
        assert_eq!(
            v.detokenize(&plan.token_ids),
            "[CLS] the movie ? [MASK] , was fun [SEP]"
        );
    }

    proptest! {
        #[test]
        fn anchor_length_is_scaffold_plus_input(words in proptest::collection::vec("[a-p]", 1..12)) {
            let v = vocab();
            let spec = TemplateSpec::parse(TEMPLATE).unwrap();
            let engine = TemplateEngine::new(&v, 64);
            let text = words.join(" ");
            let plan = engine.render_anchor(&spec, &ex(&text, "positive")).unwrap();
            // [CLS] + x1 + ", it was" + [MASK] + ". [SEP]"
            prop_assert_eq!(plan.len(), 1 + words.len() + 3 + 1 + 2);
            prop_assert_eq!(plan.token_ids.iter().filter(|&&id| id == MASK_ID).count(), 1);
            let max_id = v.len() as u32;
            prop_assert!(plan.token_ids.iter().all(|&id| id < max_id));
        }
    }
}

