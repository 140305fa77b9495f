//! Byte-level tokenizer with reserved ids for the prompt markers.

use super::ModelError;

/// Reserved markers, in id order starting at 256.
pub const SPECIAL_TOKENS: [&str; 10] = [
    "[INST]", "[/INST]", "<img>", "</img>", "[VQA]", "[caption]", "<Img>", "</Img>", "</s>", "<pad>",
];

pub const INST: usize = 256;
pub const INST_END: usize = 257;
pub const IMG_OPEN: usize = 258;
pub const IMG_CLOSE: usize = 259;
pub const VQA: usize = 260;
pub const CAPTION: usize = 261;
pub const IMG_OPEN_CAPS: usize = 262;
pub const IMG_CLOSE_CAPS: usize = 263;
pub const EOS: usize = 264;
pub const PAD: usize = 265;

pub const VOCAB_SIZE: usize = 256 + SPECIAL_TOKENS.len();

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    /// Reserved markers become single ids; everything else is split into UTF-8 bytes.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let bytes = text.as_bytes();
        let mut ids = Vec::with_capacity(bytes.len());
        let mut i = 0;
        'outer: while i < bytes.len() {
            if bytes[i] == b'[' || bytes[i] == b'<' {
                for (k, marker) in SPECIAL_TOKENS.iter().enumerate() {
                    if bytes[i..].starts_with(marker.as_bytes()) {
                        ids.push(256 + k);
                        i += marker.len();
                        continue 'outer;
                    }
                }
            }
            ids.push(bytes[i] as usize);
            i += 1;
        }
        ids
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String, ModelError> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => bytes.push(id as u8),
                _ if id < VOCAB_SIZE => bytes.extend_from_slice(SPECIAL_TOKENS[id - 256].as_bytes()),
                _ => return Err(ModelError::UnknownToken(id)),
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn contains_reserved(text: &str) -> bool {
        SPECIAL_TOKENS.iter().any(|m| text.contains(m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_plain_text() {
        let t = Tokenizer;
        let ids = t.tokenize("chest x-ray");
        assert_eq!(ids.len(), 11);
        assert_eq!(t.detokenize(&ids).unwrap(), "chest x-ray");
        assert_eq!(t.detokenize(&t.tokenize("café ✓")).unwrap(), "café ✓");
    }

    #[test]
    fn markers_are_single_ids() {
        let t = Tokenizer;
        assert_eq!(t.tokenize("[INST] <img>"), vec![INST, b' ' as usize, IMG_OPEN]);
        assert_eq!(t.tokenize("</img>[VQA][/INST]"), vec![IMG_CLOSE, VQA, INST_END]);
        assert_eq!(t.tokenize("<Img></Img>[caption]"), vec![IMG_OPEN_CAPS, IMG_CLOSE_CAPS, CAPTION]);
        assert_eq!(t.tokenize("[x] <b"), vec![b'[' as usize, b'x' as usize, b']' as usize, b' ' as usize, b'<' as usize, b'b' as usize]);
    }

    #[test]
    fn empty_text() {
        assert!(Tokenizer.tokenize("").is_empty());
    }

    #[test]
    fn unknown_id_rejected() {
        assert!(matches!(Tokenizer.detokenize(&[VOCAB_SIZE]), Err(ModelError::UnknownToken(_))));
    }

    proptest::proptest! {
        #[test]
        fn round_trip_without_markers(s in "[^\\[<]{0,40}") {
            let t = Tokenizer;
            proptest::prop_assert_eq!(t.detokenize(&t.tokenize(&s)).unwrap(), s);
        }
    }
}
