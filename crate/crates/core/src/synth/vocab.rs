use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::scene::{Color, Quadrant, SceneSpec, Shape};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const PAD: TokenId = TokenId(0);
    pub const BOS: TokenId = TokenId(1);
    pub const EOS: TokenId = TokenId(2);
    pub const BOI: TokenId = TokenId(3);
    pub const EOI: TokenId = TokenId(4);
    /// Stands in for a dropped caption in classifier-free guidance training.
    pub const NULL: TokenId = TokenId(5);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<boi>", "<eoi>", "<null>"];
const FUNCTION_WORDS: [&str; 6] = ["a", "in", "the", "is", "full", "."];

/// Word-level vocabulary with dense ids: specials first, then function words, colors,
/// shapes and quadrants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<&'static str>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

/// Why a token sequence is not a canonical caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoMatch {
    Length(usize),
    Unexpected { position: usize },
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut words: Vec<&'static str> = Vec::new();
        words.extend(SPECIALS);
        words.extend(FUNCTION_WORDS);
        words.extend(Color::ALL.iter().map(|c| c.name()));
        words.extend(Shape::ALL.iter().map(|s| s.name()));
        words.extend(Quadrant::ALL.iter().map(|q| q.name()));
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.words
            .iter()
            .position(|w| *w == word)
            .map(|i| TokenId(i as u32))
    }

    pub fn word(&self, id: TokenId) -> Option<&'static str> {
        self.words.get(id.index()).copied()
    }

    fn must(&self, word: &str) -> TokenId {
        self.id(word).expect("word in the fixed vocabulary")
    }

    /// Whitespace tokenization; unknown words yield `None`.
    pub fn tokenize(&self, text: &str) -> Option<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.word(id).unwrap_or("<unk>"));
        }
        out
    }

    /// Non-special tokens: the alphabet of the caption and sentence grammars.
    pub fn grammar_tokens(&self) -> Vec<TokenId> {
        (SPECIALS.len()..self.len())
            .map(|i| TokenId(i as u32))
            .collect()
    }

    /// Canonical caption "a {color} {shape} in the {quadrant}".
    pub fn caption_of(&self, spec: &SceneSpec) -> Vec<TokenId> {
        alloc::vec![
            self.must("a"),
            self.must(spec.color.name()),
            self.must(spec.shape.name()),
            self.must("in"),
            self.must("the"),
            self.must(spec.quadrant.name()),
        ]
    }

    pub fn parse_caption(&self, tokens: &[TokenId]) -> Result<SceneSpec, NoMatch> {
        if tokens.len() != 6 {
            return Err(NoMatch::Length(tokens.len()));
        }
        let word = |i: usize| self.word(tokens[i]).unwrap_or("");
        let expect = |i: usize, w: &str| {
            if word(i) == w {
                Ok(())
            } else {
                Err(NoMatch::Unexpected { position: i })
            }
        };
        expect(0, "a")?;
        let color = Color::ALL
            .into_iter()
            .find(|c| c.name() == word(1))
            .ok_or(NoMatch::Unexpected { position: 1 })?;
        let shape = Shape::ALL
            .into_iter()
            .find(|s| s.name() == word(2))
            .ok_or(NoMatch::Unexpected { position: 2 })?;
        expect(3, "in")?;
        expect(4, "the")?;
        let quadrant = Quadrant::ALL
            .into_iter()
            .find(|q| q.name() == word(5))
            .ok_or(NoMatch::Unexpected { position: 5 })?;
        Ok(SceneSpec::new(shape, color, quadrant))
    }

    /// Text-only document body: the caption sentence followed by two distractor sentences
    /// ("the {shape} is {color} ." and "the {quadrant} is full .") whose order is `variant`.
    pub fn text_sentences(&self, spec: &SceneSpec, variant: bool) -> Vec<TokenId> {
        let mut out = self.caption_of(spec);
        out.push(self.must("."));
        let attr = [
            self.must("the"),
            self.must(spec.shape.name()),
            self.must("is"),
            self.must(spec.color.name()),
            self.must("."),
        ];
        let place = [
            self.must("the"),
            self.must(spec.quadrant.name()),
            self.must("is"),
            self.must("full"),
            self.must("."),
        ];
        if variant {
            out.extend(place);
            out.extend(attr);
        } else {
            out.extend(attr);
            out.extend(place);
        }
        out
    }

    pub fn random_text_sentences(&self, rng: &mut RngStream) -> (SceneSpec, bool, Vec<TokenId>) {
        let spec = SceneSpec::from_index(rng.below(48)).expect("index below 48");
        let variant = rng.bernoulli(0.5);
        (spec, variant, self.text_sentences(&spec, variant))
    }

    /// Entropy in nats per predicted token of the text-only documents ([BOS] body [EOS]),
    /// over all 96 equiprobable documents. Only the first mention of each attribute and the
    /// sentence order carry information, so this is ln 96 over the prediction count.
    pub fn text_only_entropy(&self) -> f64 {
        let spec = SceneSpec::from_index(0).expect("scene 0");
        let predictions = self.text_sentences(&spec, false).len() + 1;
        let docs = (SceneSpec::all().len() * 2) as f64;
        num_traits::Float::ln(docs) / predictions as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    #[test]
    fn ids_are_dense_and_specials_fixed() {
        let v = Vocabulary::new();
        assert_eq!(v.len(), 23);
        assert_eq!(v.id("<pad>"), Some(TokenId::PAD));
        assert_eq!(v.id("<eoi>"), Some(TokenId::EOI));
        for i in 0..v.len() {
            let w = v.word(TokenId(i as u32)).unwrap();
            assert_eq!(v.id(w), Some(TokenId(i as u32)));
        }
    }

    #[test]
    fn caption_roundtrip_example() {
        let v = Vocabulary::new();
        let spec = SceneSpec::new(Shape::Circle, Color::Blue, Quadrant::BottomRight);
        let cap = v.caption_of(&spec);
        assert_eq!(v.detokenize(&cap), "a blue circle in the bottom-right");
        assert_eq!(v.tokenize("a blue circle in the bottom-right"), Some(cap.clone()));
        assert_eq!(v.parse_caption(&cap), Ok(spec));
    }

    #[test]
    fn grammar_violation_is_no_match() {
        let v = Vocabulary::new();
        let toks = v.tokenize("a blue blue circle").unwrap();
        assert!(v.parse_caption(&toks).is_err());
        let toks = v.tokenize("a blue blue circle in the").unwrap();
        assert_eq!(v.parse_caption(&toks), Err(NoMatch::Unexpected { position: 2 }));
    }

    #[test]
    fn random_garbage_is_rejected() {
        let v = Vocabulary::new();
        let canon: BTreeSet<_> = SceneSpec::all().iter().map(|s| v.caption_of(s)).collect();
        let mut rng = RngStream::new(7);
        for _ in 0..1000 {
            let len = 7;
            let toks: Vec<_> = (0..len).map(|_| TokenId(rng.below(v.len()) as u32)).collect();
            assert!(!canon.contains(&toks));
            assert!(v.parse_caption(&toks).is_err());
        }
    }

    #[test]
    fn parser_accepts_exactly_the_canonical_captions() {
        // Exhaustive over grammar-token sequences of length 0..=6; longer ones fail on length.
        let v = Vocabulary::new();
        let alphabet = v.grammar_tokens();
        let canon: BTreeSet<_> = SceneSpec::all().iter().map(|s| v.caption_of(s)).collect();
        let mut accepted = 0usize;
        let mut seq = Vec::new();
        for len in 0..=6usize {
            let total = alphabet.len().pow(len as u32);
            for mut code in 0..total {
                seq.clear();
                for _ in 0..len {
                    seq.push(alphabet[code % alphabet.len()]);
                    code /= alphabet.len();
                }
                let ok = v.parse_caption(&seq).is_ok();
                assert_eq!(ok, canon.contains(&seq));
                accepted += ok as usize;
            }
        }
        assert_eq!(accepted, 48);
        let mut rng = RngStream::new(3);
        for len in 7..=8 {
            for _ in 0..2000 {
                let s: Vec<_> = (0..len).map(|_| alphabet[rng.below(alphabet.len())]).collect();
                assert_eq!(v.parse_caption(&s), Err(NoMatch::Length(len)));
            }
        }
    }

    #[test]
    fn text_entropy_matches_enumeration() {
        // Independent count: every document has the same length and all 96 are distinct.
        let v = Vocabulary::new();
        let mut docs = BTreeSet::new();
        let mut lens = BTreeSet::new();
        for s in SceneSpec::all() {
            for variant in [false, true] {
                let d = v.text_sentences(&s, variant);
                lens.insert(d.len());
                docs.insert(d);
            }
        }
        assert_eq!(docs.len(), 96);
        assert_eq!(lens.len(), 1);
        let predictions = *lens.iter().next().unwrap() as f64 + 1.0;
        let h = v.text_only_entropy();
        assert!((h - 96f64.ln() / predictions).abs() < 1e-12);
        assert!(h.exp() < 1.5);
    }
}
