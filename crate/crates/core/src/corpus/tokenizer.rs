//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by the four
//! specials. Desk-scale stand-in for a learned subword vocabulary.

use crate::trainkit::{Sample, IGNORE_TARGET};

use super::PromptPair;

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const SEP: usize = 259;
pub const VOCAB_SIZE: usize = 260;

/// `BOS + utf-8 bytes + EOS`.
pub fn tokenize(text: &str) -> Vec<usize> {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(text.bytes().map(|b| b as usize));
    ids.push(EOS);
    ids
}

/// Inverse of [`tokenize`] on UTF-8 input: specials are dropped, byte ids
/// are reassembled (lossily for invalid byte sequences from generation).
pub fn detokenize(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Encode a prompt/target pair as one supervised next-token sequence:
/// `BOS prompt SEP target EOS`, with loss masked over the prompt so only
/// the completion is supervised. Returns `None` when the pair does not fit
/// `max_seq` with at least one supervised position.
pub fn encode_pair(pair: &PromptPair, max_seq: usize) -> Option<Sample> {
    let mut tokens = Vec::with_capacity(pair.prompt.len() + pair.target.len() + 3);
    tokens.push(BOS);
    tokens.extend(pair.prompt.bytes().map(|b| b as usize));
    let sep_pos = tokens.len();
    tokens.push(SEP);
    tokens.extend(pair.target.bytes().map(|b| b as usize));
    tokens.push(EOS);

    // input = tokens[..n-1]; position i predicts tokens[i+1]. Supervision
    // starts at the SEP position (predicting the first target byte).
    if tokens.len() > max_seq + 1 || sep_pos + 1 > max_seq {
        return None;
    }
    let input: Vec<usize> = tokens[..tokens.len() - 1].to_vec();
    let targets: Vec<usize> = tokens[1..]
        .iter()
        .enumerate()
        .map(|(i, &t)| if i < sep_pos { IGNORE_TARGET } else { t })
        .collect();
    Some(Sample {
        input,
        targets,
        prompt_len: sep_pos + 1,
    })
}
