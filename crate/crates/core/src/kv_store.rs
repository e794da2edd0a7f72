//! Paged key/value cache.
//!
//! Keys and values for each sequence live in fixed-size pages addressed
//! through a per-sequence page table, mirroring how serving engines lay out
//! decode-time KV state. Within a page the layout is NHD: token slot, then
//! kv head, then head dimension.
//!
//! The cache is also the artifact's measurement instrument: every
//! [`PagedKvCache::gather_rows`] call bumps an atomic byte counter by exactly
//! `2 * k * head_dim * element_width`, so byte traffic is accounted rather
//! than estimated. Gathers return copies, not views, because the counter is
//! meant to reflect rows actually moved.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::scalar::Scalar;

/// Errors from cache construction and access.
#[derive(Debug, Error)]
pub enum KvError {
    #[error("invalid cache config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {tokens} tokens x {kv_heads} kv heads x {head_dim} dims needs {expected} values, got {actual}")]
    ShapeMismatch {
        tokens: usize,
        kv_heads: usize,
        head_dim: usize,
        expected: usize,
        actual: usize,
    },

    #[error("unknown sequence {0:?}")]
    UnknownSequence(SeqId),

    #[error("token index {index} out of range for sequence of {total} tokens")]
    TokenOutOfRange { index: usize, total: usize },

    #[error("kv head {head} out of range ({num_heads} kv heads)")]
    KvHeadOutOfRange { head: usize, num_heads: usize },
}

/// Per-sequence identifier chosen by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeqId(pub u64);

/// Index into the shared page pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PageId(pub u32);

/// Cache geometry: kv head count, head dimension, tokens per page, and the
/// accounted element width in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub page_size: usize,
    pub element_width: usize,
}

impl CacheConfig {
    pub const DEFAULT_PAGE_SIZE: usize = 16;

    pub fn new(
        num_kv_heads: usize,
        head_dim: usize,
        page_size: usize,
        element_width: usize,
    ) -> Result<Self, KvError> {
        if num_kv_heads == 0 || head_dim == 0 || page_size == 0 {
            return Err(KvError::InvalidConfig(format!(
                "num_kv_heads={num_kv_heads}, head_dim={head_dim}, page_size={page_size} must all be >= 1"
            )));
        }
        if element_width != 2 && element_width != 4 {
            return Err(KvError::InvalidConfig(format!(
                "element_width must be 2 or 4, got {element_width}"
            )));
        }
        Ok(Self {
            num_kv_heads,
            head_dim,
            page_size,
            element_width,
        })
    }

    /// Scalars stored per page for one of keys/values.
    fn page_elems(&self) -> usize {
        self.page_size * self.num_kv_heads * self.head_dim
    }
}

/// One fixed-size page of key and value rows in NHD order.
#[derive(Debug, Clone)]
pub struct KvPage<T> {
    keys: Vec<T>,
    values: Vec<T>,
    occupancy: usize,
}

impl<T: Scalar> KvPage<T> {
    fn new(config: &CacheConfig) -> Self {
        Self {
            keys: vec![T::zero(); config.page_elems()],
            values: vec![T::zero(); config.page_elems()],
            occupancy: 0,
        }
    }

    pub fn occupancy(&self) -> usize {
        self.occupancy
    }
}

/// Logical-to-physical mapping for one sequence.
#[derive(Debug, Clone)]
pub struct PageTable {
    sequence_id: SeqId,
    page_ids: Vec<PageId>,
    total_tokens: usize,
    page_size: usize,
}

impl PageTable {
    fn new(sequence_id: SeqId, page_size: usize) -> Self {
        Self {
            sequence_id,
            page_ids: Vec::new(),
            total_tokens: 0,
            page_size,
        }
    }

    pub fn sequence_id(&self) -> SeqId {
        self.sequence_id
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    pub fn num_pages(&self) -> usize {
        self.page_ids.len()
    }

    pub fn page_ids(&self) -> &[PageId] {
        &self.page_ids
    }

    /// Map a logical token index to `(page, slot)`.
    pub fn token_location(&self, t: usize) -> Result<(PageId, usize), KvError> {
        if t >= self.total_tokens {
            return Err(KvError::TokenOutOfRange {
                index: t,
                total: self.total_tokens,
            });
        }
        Ok((self.page_ids[t / self.page_size], t % self.page_size))
    }
}

/// Paged KV cache with instrumented row gathers.
#[derive(Debug)]
pub struct PagedKvCache<T> {
    config: CacheConfig,
    pages: Vec<KvPage<T>>,
    tables: HashMap<SeqId, PageTable>,
    bytes_read: AtomicU64,
}

impl<T: Scalar> PagedKvCache<T> {
    /// Create an empty cache. The element width is taken from the scalar type.
    pub fn new(num_kv_heads: usize, head_dim: usize, page_size: usize) -> Result<Self, KvError> {
        let config = CacheConfig::new(num_kv_heads, head_dim, page_size, T::ELEMENT_WIDTH)?;
        Ok(Self {
            config,
            pages: Vec::new(),
            tables: HashMap::new(),
            bytes_read: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    /// Total key/value bytes moved by gathers so far.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::Relaxed)
    }

    pub fn page_table(&self, seq: SeqId) -> Result<&PageTable, KvError> {
        self.tables.get(&seq).ok_or(KvError::UnknownSequence(seq))
    }

    pub fn total_tokens(&self, seq: SeqId) -> Result<usize, KvError> {
        Ok(self.page_table(seq)?.total_tokens())
    }

    pub fn num_pages_in_pool(&self) -> usize {
        self.pages.len()
    }

    /// Append `tokens` new token rows to `seq`, creating the sequence on
    /// first use. `keys` and `values` are flattened `tokens x kv_heads x
    /// head_dim`. Returns the new total token count.
    pub fn append_tokens(
        &mut self,
        seq: SeqId,
        keys: &[T],
        values: &[T],
        tokens: usize,
    ) -> Result<usize, KvError> {
        let row = self.config.num_kv_heads * self.config.head_dim;
        let expected = tokens * row;
        if keys.len() != expected || values.len() != expected {
            return Err(KvError::ShapeMismatch {
                tokens,
                kv_heads: self.config.num_kv_heads,
                head_dim: self.config.head_dim,
                expected,
                actual: if keys.len() != expected {
                    keys.len()
                } else {
                    values.len()
                },
            });
        }

        let page_size = self.config.page_size;
        let table = self
            .tables
            .entry(seq)
            .or_insert_with(|| PageTable::new(seq, page_size));

        for t in 0..tokens {
            let slot_in_page = table.total_tokens % page_size;
            if slot_in_page == 0 {
                // Last page is full (or the sequence is empty): take a fresh one.
                let id = PageId(self.pages.len() as u32);
                self.pages.push(KvPage::new(&self.config));
                table.page_ids.push(id);
            }
            let page_id = *table.page_ids.last().expect("page allocated above");
            let page = &mut self.pages[page_id.0 as usize];
            let dst = slot_in_page * row;
            let src = t * row;
            page.keys[dst..dst + row].copy_from_slice(&keys[src..src + row]);
            page.values[dst..dst + row].copy_from_slice(&values[src..src + row]);
            page.occupancy = slot_in_page + 1;
            table.total_tokens += 1;
        }
        Ok(table.total_tokens)
    }

    #[inline]
    fn row_range(&self, slot: usize, kv_head: usize) -> std::ops::Range<usize> {
        let d = self.config.head_dim;
        let start = (slot * self.config.num_kv_heads + kv_head) * d;
        start..start + d
    }

    fn check_kv_head(&self, kv_head: usize) -> Result<(), KvError> {
        if kv_head >= self.config.num_kv_heads {
            return Err(KvError::KvHeadOutOfRange {
                head: kv_head,
                num_heads: self.config.num_kv_heads,
            });
        }
        Ok(())
    }

    /// Gather key and value rows for the given token indices, in the order
    /// given. Counts `2 * k * head_dim * element_width` bytes of traffic.
    pub fn gather_rows(
        &self,
        seq: SeqId,
        kv_head: usize,
        token_indices: &[u32],
    ) -> Result<(Vec<T>, Vec<T>), KvError> {
        self.check_kv_head(kv_head)?;
        let table = self.page_table(seq)?;
        let d = self.config.head_dim;
        let mut k_out = Vec::with_capacity(token_indices.len() * d);
        let mut v_out = Vec::with_capacity(token_indices.len() * d);
        for &t in token_indices {
            let (page_id, slot) = table.token_location(t as usize)?;
            let page = &self.pages[page_id.0 as usize];
            let range = self.row_range(slot, kv_head);
            k_out.extend_from_slice(&page.keys[range.clone()]);
            v_out.extend_from_slice(&page.values[range]);
        }
        let bytes = 2 * token_indices.len() as u64 * d as u64 * self.config.element_width as u64;
        self.bytes_read.fetch_add(bytes, Ordering::Relaxed);
        Ok((k_out, v_out))
    }

    /// Borrow one key row without touching the byte counter. Index selectors
    /// scan keys through this; their traffic is modeled analytically, not
    /// counted as gather traffic.
    pub fn key_row(&self, seq: SeqId, kv_head: usize, t: usize) -> Result<&[T], KvError> {
        self.check_kv_head(kv_head)?;
        let table = self.page_table(seq)?;
        let (page_id, slot) = table.token_location(t)?;
        let page = &self.pages[page_id.0 as usize];
        Ok(&page.keys[self.row_range(slot, kv_head)])
    }

    /// Borrow one value row without touching the byte counter.
    pub fn value_row(&self, seq: SeqId, kv_head: usize, t: usize) -> Result<&[T], KvError> {
        self.check_kv_head(kv_head)?;
        let table = self.page_table(seq)?;
        let (page_id, slot) = table.token_location(t)?;
        let page = &self.pages[page_id.0 as usize];
        Ok(&page.values[self.row_range(slot, kv_head)])
    }

    /// Visit every key row of `seq` for `kv_head` in token order, uncounted.
    pub fn for_each_key_row(
        &self,
        seq: SeqId,
        kv_head: usize,
        mut f: impl FnMut(usize, &[T]),
    ) -> Result<(), KvError> {
        self.check_kv_head(kv_head)?;
        let table = self.page_table(seq)?;
        let d = self.config.head_dim;
        let mut t = 0;
        for page_id in table.page_ids() {
            let page = &self.pages[page_id.0 as usize];
            for slot in 0..page.occupancy {
                let start = (slot * self.config.num_kv_heads + kv_head) * d;
                f(t, &page.keys[start..start + d]);
                t += 1;
            }
        }
        Ok(())
    }
}
