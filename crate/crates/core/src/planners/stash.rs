//! Paged stash: one worst-case tmp buffer shared across layers plus a paged
//! buffer holding only the tokens each layer actually produced.

use std::collections::{BTreeMap, VecDeque};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_PAGE_TOKENS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct PageRecord {
    pub layer: usize,
    pub tokens: usize,
    pub pages: Vec<usize>,
    pub bytes: usize,
}

#[derive(Debug, Clone)]
pub struct PagedStash {
    page_tokens: usize,
    bytes_per_token: usize,
    tmp_tokens: usize,
    free: VecDeque<usize>,
    storage: Vec<Vec<u8>>,
    records: BTreeMap<usize, PageRecord>,
    peak_pages: usize,
}

impl PagedStash {
    pub fn new(
        num_pages: usize,
        page_tokens: usize,
        bytes_per_token: usize,
        tmp_tokens: usize,
    ) -> Result<PagedStash> {
        if page_tokens == 0 || bytes_per_token == 0 {
            return invalid("page size and bytes per token must be positive");
        }
        Ok(PagedStash {
            page_tokens,
            bytes_per_token,
            tmp_tokens,
            free: (0..num_pages).collect(),
            storage: vec![Vec::new(); num_pages],
            records: BTreeMap::new(),
            peak_pages: 0,
        })
    }

    pub fn page_tokens(&self) -> usize {
        self.page_tokens
    }

    pub fn num_pages(&self) -> usize {
        self.storage.len()
    }

    pub fn free_pages(&self) -> usize {
        self.free.len()
    }

    pub fn allocated_pages(&self) -> usize {
        self.records.values().map(|r| r.pages.len()).sum()
    }

    pub fn peak_pages(&self) -> usize {
        self.peak_pages
    }

    pub fn records(&self) -> impl Iterator<Item = &PageRecord> {
        self.records.values()
    }

    /// Next page to be handed out, if any.
    pub fn free_head(&self) -> Option<usize> {
        self.free.front().copied()
    }

    pub fn pages_for(&self, tokens: usize) -> usize {
        tokens.div_ceil(self.page_tokens)
    }

    /// Copy `payload` (`tokens` rows) out of the tmp buffer into pages taken
    /// from the head of the free list.
    pub fn stash(&mut self, layer: usize, tokens: usize, payload: &[u8]) -> Result<PageRecord> {
        if tokens > self.tmp_tokens {
            return invalid(format!(
                "{tokens} tokens exceed the {}-token tmp buffer",
                self.tmp_tokens
            ));
        }
        if payload.len() != tokens * self.bytes_per_token {
            return invalid("payload size does not match token count");
        }
        if self.records.contains_key(&layer) {
            return invalid(format!("layer {layer} is already stashed"));
        }
        let needed = self.pages_for(tokens);
        if needed > self.free.len() {
            return Err(Error::OutOfPages {
                needed,
                free: self.free.len(),
            });
        }
        let page_bytes = self.page_tokens * self.bytes_per_token;
        let pages: Vec<usize> = self.free.drain(..needed).collect();
        for (p, chunk) in pages.iter().zip(payload.chunks(page_bytes)) {
            self.storage[*p] = chunk.to_vec();
        }
        let rec = PageRecord {
            layer,
            tokens,
            pages,
            bytes: payload.len(),
        };
        self.records.insert(layer, rec.clone());
        self.peak_pages = self.peak_pages.max(self.allocated_pages());
        Ok(rec)
    }

    /// Gather a layer's payload and return its pages to the tail.
    pub fn reload(&mut self, layer: usize) -> Result<Vec<u8>> {
        let rec = self
            .records
            .remove(&layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} is not stashed")))?;
        let mut out = Vec::with_capacity(rec.bytes);
        for p in &rec.pages {
            out.append(&mut self.storage[*p]);
            self.free.push_back(*p);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct StashFootprint {
    pub paged_tokens: usize,
    pub naive_tokens: usize,
    /// One in-flight layer of pages kept for reload prefetch.
    pub double_buffer_tokens: usize,
}

/// Token footprint of paged stashing versus per-layer worst-case buffers.
pub fn stash_footprint(worst_case: usize, actual: &[usize], page_tokens: usize) -> StashFootprint {
    let paged: usize = actual
        .iter()
        .map(|a| a.div_ceil(page_tokens) * page_tokens)
        .sum();
    StashFootprint {
        paged_tokens: worst_case + paged,
        naive_tokens: worst_case * actual.len(),
        double_buffer_tokens: worst_case.div_ceil(page_tokens) * page_tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceiling_pages_and_identity() {
        let mut s = PagedStash::new(8, 64, 2, 4096).unwrap();
        let payload: Vec<u8> = (0..200).map(|i| i as u8).collect();
        let rec = s.stash(3, 100, &payload).unwrap();
        assert_eq!(rec.pages, vec![0, 1]);
        assert_eq!(s.free_pages(), 6);
        assert_eq!(s.reload(3).unwrap(), payload);
        assert_eq!(s.free_pages(), 8);
        // Returned pages go to the tail.
        assert_eq!(s.free_head(), Some(2));
    }

    #[test]
    fn out_of_pages() {
        let mut s = PagedStash::new(1, 64, 1, 4096).unwrap();
        assert_eq!(
            s.stash(0, 65, &[0; 65]),
            Err(Error::OutOfPages { needed: 2, free: 1 })
        );
    }

    #[test]
    fn sixty_layer_footprint() {
        let f = stash_footprint(4096, &[256; 60], 64);
        assert_eq!(f.paged_tokens, 19_456);
        assert_eq!(f.naive_tokens, 245_760);
    }
}
