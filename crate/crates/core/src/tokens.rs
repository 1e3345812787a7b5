//! Reserved token ids of the toy vocabulary.

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Separates image patches from the caption in generation prompts.
pub const ASK: u32 = 3;
/// Prefixed to queries before embedding.
pub const QUERY_MARKER: u32 = 4;
/// Prefixed to documents before embedding.
pub const DOC_MARKER: u32 = 5;
/// First id not reserved for control tokens.
pub const FIRST_FREE: u32 = 16;

/// Renders token ids as space-separated lowercase hex words, the text form
/// used for string metrics such as ANLS.
pub fn detokenize(ids: &[u32]) -> String {
    ids.iter()
        .map(|id| format!("{id:02x}"))
        .collect::<Vec<_>>()
        .join(" ")
}
