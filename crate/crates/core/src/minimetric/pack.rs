use std::ops::Range;

use super::{ModelConfig, CLS, SEP};
use crate::error::{Error, Result};

/// A packed model input plus the positions holding the translation tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedInput {
    pub ids: Vec<u32>,
    pub mt_span: Range<usize>,
}

impl PackedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Packs `[CLS] mt [SEP] src [SEP] (ref [SEP])`.
///
/// When the result would exceed `max_seq_len`, every segment is cut to
/// `⌊len · budget / total⌋` tokens (prefix kept), where `budget` excludes the
/// special tokens. Special tokens are never dropped.
pub fn pack_input(
    src: &[u32],
    mt: &[u32],
    reference: Option<&[u32]>,
    config: &ModelConfig,
) -> Result<PackedInput> {
    let ref_len = reference.map_or(0, <[u32]>::len);
    if src.is_empty() && mt.is_empty() && ref_len == 0 {
        return Err(Error::InvalidExample("source, translation and reference are all empty".into()));
    }
    let specials = if reference.is_some() { 4 } else { 3 };
    if config.max_seq_len <= specials {
        return Err(Error::config("max_seq_len too small for packing"));
    }
    let total = src.len() + mt.len() + ref_len;
    let budget = config.max_seq_len - specials;
    let cut = |len: usize| {
        if total <= budget {
            len
        } else {
            len * budget / total
        }
    };
    let (mt_n, src_n, ref_n) = (cut(mt.len()), cut(src.len()), cut(ref_len));

    let mut ids = Vec::with_capacity(specials + mt_n + src_n + ref_n);
    ids.push(CLS);
    ids.extend_from_slice(&mt[..mt_n]);
    ids.push(SEP);
    ids.extend_from_slice(&src[..src_n]);
    ids.push(SEP);
    if let Some(r) = reference {
        ids.extend_from_slice(&r[..ref_n]);
        ids.push(SEP);
    }
    Ok(PackedInput {
        ids,
        mt_span: 1..1 + mt_n,
    })
}
