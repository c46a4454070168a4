//! Paged KV cache with a uniform element type per pool.
//!
//! Each page holds `page_tokens` slots. A slot stores K and V for every KV
//! head of one token; in INT4 mode each (token, head) vector carries its own
//! [`QuantParams`], stored next to the payload in the same page. Token `t` of
//! a sequence lives in page `pages[t / page_tokens]`, slot `t % page_tokens`.
//!
//! Appends rotate and quantize one head at a time into a `head_dim` scratch
//! buffer and write the packed nibbles straight into the page.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use half::bf16;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::int4::{dequantize_into, packed_len, quantize_head, quantize_into, QuantParams, SIDECAR_BYTES};
use crate::rotation::RotationSpec;
use crate::tensor::{apply_block_rotation, check_finite, FloatMatrix, HeadLayout};

const MAGIC: &[u8; 8] = b"I4KVPAGE";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Bf16,
    Int4,
}

impl Precision {
    /// Token slots per BF16 slot in the same bytes (payload only).
    pub fn density(self) -> usize {
        match self {
            Precision::Bf16 => 1,
            Precision::Int4 => 4,
        }
    }
}

/// Token slots a byte budget holds.
///
/// A BF16 slot needs `2 (K,V) · num_kv_heads · head_dim · 2` bytes; INT4 packs
/// four slots into the same bytes. Sidecars are not charged here.
pub fn capacity_tokens(layout: &HeadLayout, precision: Precision, budget_bytes: u64) -> usize {
    let bf16_slot = 4 * layout.kv_width() as u64;
    (budget_bytes / bf16_slot) as usize * precision.density()
}

/// Bytes a token actually occupies, sidecars included.
pub fn bytes_per_token(layout: &HeadLayout, precision: Precision) -> usize {
    match precision {
        Precision::Bf16 => 4 * layout.kv_width(),
        Precision::Int4 => {
            2 * layout.num_kv_heads() * (packed_len(layout.head_dim()) + SIDECAR_BYTES)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeqId(pub u64);

#[derive(Debug, Clone, PartialEq)]
struct Page {
    k: Vec<u8>,
    v: Vec<u8>,
    k_params: Vec<QuantParams>,
    v_params: Vec<QuantParams>,
    used: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
struct SeqEntry {
    pages: Vec<usize>,
    len: usize,
}

/// Stored bytes and sidecars of one token, for bit-level comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct RawToken {
    pub k: Vec<u8>,
    pub v: Vec<u8>,
    pub k_params: Vec<QuantParams>,
    pub v_params: Vec<QuantParams>,
}

#[derive(Debug, Clone)]
pub struct PagedKvCache {
    layout: HeadLayout,
    precision: Precision,
    spec: RotationSpec,
    pages: Vec<Page>,
    free: Vec<usize>,
    seqs: BTreeMap<SeqId, SeqEntry>,
    next_seq: u64,
    scratch: Vec<f64>,
}

impl PagedKvCache {
    pub fn new(layout: HeadLayout, precision: Precision, num_pages: usize, spec: RotationSpec) -> Result<Self> {
        spec.check_layout(&layout)?;
        let blank = Page::blank(&layout, precision);
        Ok(Self {
            scratch: vec![0.0; layout.head_dim()],
            pages: vec![blank; num_pages],
            // pop() hands out the lowest id first
            free: (0..num_pages).rev().collect(),
            seqs: BTreeMap::new(),
            next_seq: 0,
            layout,
            precision,
            spec,
        })
    }

    /// Pool sized from a byte budget via [`capacity_tokens`].
    pub fn with_budget(layout: HeadLayout, precision: Precision, budget_bytes: u64, spec: RotationSpec) -> Result<Self> {
        let pages = capacity_tokens(&layout, precision, budget_bytes) / layout.page_tokens();
        Self::new(layout, precision, pages, spec)
    }

    pub fn layout(&self) -> &HeadLayout {
        &self.layout
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn spec(&self) -> &RotationSpec {
        &self.spec
    }

    pub fn num_pages(&self) -> usize {
        self.pages.len()
    }

    pub fn free_pages(&self) -> usize {
        self.free.len()
    }

    pub fn allocated_pages(&self) -> usize {
        self.seqs.values().map(|s| s.pages.len()).sum()
    }

    pub fn capacity_tokens(&self) -> usize {
        self.pages.len() * self.layout.page_tokens()
    }

    pub fn add_sequence(&mut self) -> SeqId {
        let id = SeqId(self.next_seq);
        self.next_seq += 1;
        self.seqs.insert(id, SeqEntry::default());
        id
    }

    pub fn sequences(&self) -> impl Iterator<Item = SeqId> + '_ {
        self.seqs.keys().copied()
    }

    pub fn seq_len(&self, seq: SeqId) -> Result<usize> {
        Ok(self.entry(seq)?.len)
    }

    pub fn seq_pages(&self, seq: SeqId) -> Result<&[usize]> {
        Ok(&self.entry(seq)?.pages)
    }

    fn entry(&self, seq: SeqId) -> Result<&SeqEntry> {
        self.seqs.get(&seq).ok_or(Error::SequenceNotFound(seq.0))
    }

    fn check_token(&self, k: &[f64], v: &[f64]) -> Result<()> {
        let w = self.layout.kv_width();
        if k.len() != w || v.len() != w {
            return Err(shape_err(format!(
                "token K/V have lengths {}/{}, expected {w}",
                k.len(),
                v.len()
            )));
        }
        check_finite(k)?;
        check_finite(v)
    }

    /// Find the slot for the next token of `seq`, allocating a page if needed.
    fn reserve_slot(&mut self, seq: SeqId) -> Result<(usize, usize, usize)> {
        let pt = self.layout.page_tokens();
        let entry = self.seqs.get(&seq).ok_or(Error::SequenceNotFound(seq.0))?;
        let t = entry.len;
        if t % pt == 0 && self.free.is_empty() {
            return Err(Error::CapacityExceeded);
        }
        let entry = self.seqs.get_mut(&seq).expect("checked above");
        if t % pt == 0 {
            let page = self.free.pop().expect("checked above");
            entry.pages.push(page);
        }
        Ok((t, entry.pages[t / pt], t % pt))
    }

    fn commit_slot(&mut self, seq: SeqId, page: usize) {
        self.pages[page].used += 1;
        self.seqs.get_mut(&seq).expect("reserved").len += 1;
    }

    /// Rotate, quantize and store one token in a single pass per head.
    ///
    /// `k` and `v` are `num_kv_heads * head_dim` wide. Returns the token index.
    pub fn append_token(&mut self, seq: SeqId, k: &[f64], v: &[f64]) -> Result<usize> {
        self.check_token(k, v)?;
        self.entry(seq)?;
        let (t, page, slot) = self.reserve_slot(seq)?;
        let hd = self.layout.head_dim();
        let nkv = self.layout.num_kv_heads();
        let pb = packed_len(hd);
        let p = &mut self.pages[page];
        for h in 0..nkv {
            let src = h * hd..(h + 1) * hd;
            let cell = slot * nkv + h;
            for (is_key, x) in [(true, &k[src.clone()]), (false, &v[src])] {
                self.scratch.copy_from_slice(x);
                if is_key {
                    self.spec.forward_key(h, &mut self.scratch);
                } else {
                    self.spec.forward_value(h, &mut self.scratch);
                }
                let (payload, params) = if is_key {
                    (&mut p.k, &mut p.k_params)
                } else {
                    (&mut p.v, &mut p.v_params)
                };
                match self.precision {
                    Precision::Int4 => {
                        params[cell] = quantize_into(&self.scratch, &mut payload[cell * pb..(cell + 1) * pb])?;
                    }
                    Precision::Bf16 => {
                        let dst = &mut payload[cell * hd * 2..(cell + 1) * hd * 2];
                        for (b, &x) in dst.chunks_exact_mut(2).zip(&self.scratch) {
                            b.copy_from_slice(&bf16::from_f64(x).to_le_bytes());
                        }
                    }
                }
            }
        }
        self.commit_slot(seq, page);
        Ok(t)
    }

    /// Reference two-pass append: rotate the whole token, then quantize.
    pub fn append_token_unfused(&mut self, seq: SeqId, k: &[f64], v: &[f64]) -> Result<usize> {
        self.check_token(k, v)?;
        self.entry(seq)?;
        let w = self.layout.kv_width();
        let hd = self.layout.head_dim();
        let k_rot = apply_block_rotation(&FloatMatrix::new(1, w, k.to_vec())?, &self.layout, &self.spec)?;
        let mut v_rot = v.to_vec();
        for (h, chunk) in v_rot.chunks_exact_mut(hd).enumerate() {
            self.spec.forward_value(h, chunk);
        }
        let heads = |x: &[f64]| -> Result<Vec<_>> {
            x.chunks_exact(hd).map(quantize_head).collect()
        };
        let encoded = match self.precision {
            Precision::Int4 => Some((heads(k_rot.row(0))?, heads(&v_rot)?)),
            Precision::Bf16 => None,
        };

        let (t, page, slot) = self.reserve_slot(seq)?;
        let nkv = self.layout.num_kv_heads();
        let pb = packed_len(hd);
        let p = &mut self.pages[page];
        match encoded {
            Some((kq, vq)) => {
                for h in 0..nkv {
                    let cell = slot * nkv + h;
                    p.k[cell * pb..(cell + 1) * pb].copy_from_slice(kq[h].0.bytes());
                    p.v[cell * pb..(cell + 1) * pb].copy_from_slice(vq[h].0.bytes());
                    p.k_params[cell] = kq[h].1;
                    p.v_params[cell] = vq[h].1;
                }
            }
            None => {
                let base = slot * w * 2;
                for (i, (&kx, &vx)) in k_rot.row(0).iter().zip(&v_rot).enumerate() {
                    let o = base + 2 * i;
                    p.k[o..o + 2].copy_from_slice(&bf16::from_f64(kx).to_le_bytes());
                    p.v[o..o + 2].copy_from_slice(&bf16::from_f64(vx).to_le_bytes());
                }
            }
        }
        self.commit_slot(seq, page);
        Ok(t)
    }

    fn locate(&self, seq: SeqId, t: usize) -> Result<(usize, usize)> {
        let e = self.entry(seq)?;
        if t >= e.len {
            return Err(Error::Index { index: t, len: e.len });
        }
        let pt = self.layout.page_tokens();
        Ok((e.pages[t / pt], t % pt))
    }

    /// Dequantized rotated-space K and V of token `t`.
    pub fn read_token(&self, seq: SeqId, t: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let (page, slot) = self.locate(seq, t)?;
        let w = self.layout.kv_width();
        let mut k = vec![0.0; w];
        let mut v = vec![0.0; w];
        self.read_slot(page, slot, &mut k, &mut v);
        Ok((k, v))
    }

    fn read_slot(&self, page: usize, slot: usize, k: &mut [f64], v: &mut [f64]) {
        let hd = self.layout.head_dim();
        let nkv = self.layout.num_kv_heads();
        let p = &self.pages[page];
        match self.precision {
            Precision::Int4 => {
                let pb = packed_len(hd);
                for h in 0..nkv {
                    let cell = slot * nkv + h;
                    let bytes = cell * pb..(cell + 1) * pb;
                    dequantize_into(&p.k[bytes.clone()], &p.k_params[cell], &mut k[h * hd..(h + 1) * hd]);
                    dequantize_into(&p.v[bytes], &p.v_params[cell], &mut v[h * hd..(h + 1) * hd]);
                }
            }
            Precision::Bf16 => {
                let base = slot * nkv * hd * 2;
                let decode = |src: &[u8], out: &mut [f64]| {
                    for (o, b) in out.iter_mut().zip(src.chunks_exact(2)) {
                        *o = bf16::from_le_bytes([b[0], b[1]]).to_f64();
                    }
                };
                decode(&p.k[base..base + nkv * hd * 2], k);
                decode(&p.v[base..base + nkv * hd * 2], v);
            }
        }
    }

    /// Contiguous dequantized copy of a sequence: one token per row.
    pub fn flat_copy(&self, seq: SeqId) -> Result<(FloatMatrix, FloatMatrix)> {
        let len = self.seq_len(seq)?;
        let w = self.layout.kv_width();
        let mut k = FloatMatrix::zeros(len, w);
        let mut v = FloatMatrix::zeros(len, w);
        for t in 0..len {
            let (page, slot) = self.locate(seq, t)?;
            let mut kr = vec![0.0; w];
            self.read_slot(page, slot, &mut kr, v.row_mut(t));
            k.row_mut(t).copy_from_slice(&kr);
        }
        Ok((k, v))
    }

    /// Visit every cached token of `seq` in order, without copying pages.
    pub(crate) fn for_each_token(
        &self,
        seq: SeqId,
        mut f: impl FnMut(usize, &[f64], &[f64]),
    ) -> Result<()> {
        let len = self.seq_len(seq)?;
        let w = self.layout.kv_width();
        let mut k = vec![0.0; w];
        let mut v = vec![0.0; w];
        for t in 0..len {
            let (page, slot) = self.locate(seq, t)?;
            self.read_slot(page, slot, &mut k, &mut v);
            f(t, &k, &v);
        }
        Ok(())
    }

    pub fn raw_token(&self, seq: SeqId, t: usize) -> Result<RawToken> {
        let (page, slot) = self.locate(seq, t)?;
        let nkv = self.layout.num_kv_heads();
        let stride = self.slot_bytes();
        let p = &self.pages[page];
        let bytes = slot * stride..(slot + 1) * stride;
        let cells = slot * nkv..(slot + 1) * nkv;
        let params = |v: &[QuantParams]| if v.is_empty() { vec![] } else { v[cells.clone()].to_vec() };
        Ok(RawToken {
            k: p.k[bytes.clone()].to_vec(),
            v: p.v[bytes].to_vec(),
            k_params: params(&p.k_params),
            v_params: params(&p.v_params),
        })
    }

    fn slot_bytes(&self) -> usize {
        slot_bytes(&self.layout, self.precision)
    }

    /// Release a sequence's pages; returns how many were reclaimed.
    pub fn free_sequence(&mut self, seq: SeqId) -> Result<usize> {
        let entry = self.seqs.remove(&seq).ok_or(Error::SequenceNotFound(seq.0))?;
        let n = entry.pages.len();
        for &p in entry.pages.iter().rev() {
            self.pages[p].used = 0;
            self.free.push(p);
        }
        Ok(n)
    }

    /// Versioned binary snapshot: magic, JSON header, raw pages.
    pub fn dump(&self, out: &mut impl Write) -> Result<()> {
        let header = DumpHeader {
            version: FORMAT_VERSION,
            layout: self.layout,
            precision: self.precision,
            num_pages: self.pages.len(),
            next_seq: self.next_seq,
            free: self.free.clone(),
            sequences: self.seqs.iter().map(|(id, e)| (id.0, e.clone())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        for p in &self.pages {
            out.write_all(&(p.used as u32).to_le_bytes())?;
            out.write_all(&p.k)?;
            out.write_all(&p.v)?;
            let mut side = Vec::with_capacity(2 * p.k_params.len() * SIDECAR_BYTES);
            for q in p.k_params.iter().chain(&p.v_params) {
                q.write_le(&mut side);
            }
            out.write_all(&side)?;
        }
        Ok(())
    }

    pub fn load(input: &mut impl Read, spec: RotationSpec) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a page dump".into()));
        }
        let mut len = [0u8; 4];
        input.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut json)?;
        let h: DumpHeader = serde_json::from_slice(&json)?;
        if h.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported page dump version {}", h.version)));
        }
        let mut cache = Self::new(h.layout, h.precision, h.num_pages, spec)?;
        let cells = cache.layout.page_tokens() * cache.layout.num_kv_heads();
        for p in cache.pages.iter_mut() {
            input.read_exact(&mut len)?;
            p.used = u32::from_le_bytes(len) as usize;
            input.read_exact(&mut p.k)?;
            input.read_exact(&mut p.v)?;
            if h.precision == Precision::Int4 {
                let mut side = vec![0u8; 2 * cells * SIDECAR_BYTES];
                input.read_exact(&mut side)?;
                let mut it = side.chunks_exact(SIDECAR_BYTES).map(QuantParams::read_le);
                for q in p.k_params.iter_mut().chain(p.v_params.iter_mut()) {
                    *q = it.next().expect("sized above")?;
                }
            }
        }
        let mut owned = vec![false; h.num_pages];
        for &p in h.free.iter().chain(h.sequences.iter().flat_map(|(_, e)| &e.pages)) {
            if p >= h.num_pages || std::mem::replace(&mut owned[p], true) {
                return Err(Error::Format(format!("page {p} is out of range or listed twice")));
            }
        }
        if owned.iter().any(|o| !o) {
            return Err(Error::Format("page table does not cover the pool".into()));
        }
        cache.free = h.free;
        cache.next_seq = h.next_seq;
        cache.seqs = h.sequences.into_iter().map(|(id, e)| (SeqId(id), e)).collect();
        Ok(cache)
    }
}

fn slot_bytes(layout: &HeadLayout, precision: Precision) -> usize {
    match precision {
        Precision::Int4 => layout.num_kv_heads() * packed_len(layout.head_dim()),
        Precision::Bf16 => 2 * layout.kv_width(),
    }
}

impl Page {
    fn blank(layout: &HeadLayout, precision: Precision) -> Self {
        let bytes = layout.page_tokens() * slot_bytes(layout, precision);
        let cells = match precision {
            Precision::Int4 => layout.page_tokens() * layout.num_kv_heads(),
            Precision::Bf16 => 0,
        };
        let zero = QuantParams { scale: 0.0, zero_point: 0, offset: 0.0 };
        Self {
            k: vec![0; bytes],
            v: vec![0; bytes],
            k_params: vec![zero; cells],
            v_params: vec![zero; cells],
            used: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpHeader {
    version: u32,
    layout: HeadLayout,
    precision: Precision,
    num_pages: usize,
    next_seq: u64,
    free: Vec<usize>,
    sequences: Vec<(u64, SeqEntry)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::Targets;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout() -> HeadLayout {
        HeadLayout::new(4, 2, 16, 16, 4).unwrap()
    }

    fn spec() -> RotationSpec {
        RotationSpec::hadamard(16, 16, Targets::KeysAndValues).unwrap()
    }

    fn token(rng: &mut ChaCha8Rng, w: usize) -> Vec<f64> {
        (0..w).map(|_| rng.gen_range(-3.0..3.0)).collect()
    }

    #[test]
    fn page_allocation_follows_layout() {
        let mut c = PagedKvCache::new(layout(), Precision::Int4, 4, spec()).unwrap();
        let s = c.add_sequence();
        let z = vec![0.0; 32];
        assert_eq!(c.append_token(s, &z, &z).unwrap(), 0);
        assert_eq!(c.seq_pages(s).unwrap().len(), 1);
        assert_eq!(c.read_token(s, 0).unwrap(), (z.clone(), z.clone()));
        for _ in 0..4 {
            c.append_token(s, &z, &z).unwrap();
        }
        assert_eq!(c.seq_pages(s).unwrap().len(), 2);
        assert!(matches!(c.read_token(s, 5), Err(Error::Index { index: 5, len: 5 })));
        assert_eq!(c.free_sequence(s).unwrap(), 2);
        assert_eq!(c.free_pages(), 4);
        assert!(matches!(c.free_sequence(s), Err(Error::SequenceNotFound(0))));
    }

    #[test]
    fn exhausted_pool_errors() {
        let mut c = PagedKvCache::new(layout(), Precision::Int4, 1, spec()).unwrap();
        let s = c.add_sequence();
        let z = vec![1.0; 32];
        for _ in 0..4 {
            c.append_token(s, &z, &z).unwrap();
        }
        assert!(matches!(c.append_token(s, &z, &z), Err(Error::CapacityExceeded)));
        assert_eq!(c.seq_len(s).unwrap(), 4);
    }

    #[test]
    fn fused_matches_unfused_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for precision in [Precision::Int4, Precision::Bf16] {
            let spec = spec().with_random_signs(9, 0);
            let mut a = PagedKvCache::new(layout(), precision, 8, spec.clone()).unwrap();
            let mut b = PagedKvCache::new(layout(), precision, 8, spec).unwrap();
            let (sa, sb) = (a.add_sequence(), b.add_sequence());
            for _ in 0..30 {
                let (k, v) = (token(&mut rng, 32), token(&mut rng, 32));
                a.append_token(sa, &k, &v).unwrap();
                b.append_token_unfused(sb, &k, &v).unwrap();
            }
            let (mut da, mut db) = (Vec::new(), Vec::new());
            a.dump(&mut da).unwrap();
            b.dump(&mut db).unwrap();
            assert_eq!(da, db);
        }
    }

    #[test]
    fn dump_load_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = PagedKvCache::new(layout(), Precision::Int4, 6, spec()).unwrap();
        let s1 = c.add_sequence();
        let s2 = c.add_sequence();
        for i in 0..13 {
            let (k, v) = (token(&mut rng, 32), token(&mut rng, 32));
            c.append_token(if i % 3 == 0 { s1 } else { s2 }, &k, &v).unwrap();
        }
        let mut bytes = Vec::new();
        c.dump(&mut bytes).unwrap();
        let back = PagedKvCache::load(&mut bytes.as_slice(), spec()).unwrap();
        let mut again = Vec::new();
        back.dump(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(back.flat_copy(s2).unwrap(), c.flat_copy(s2).unwrap());
        bytes[0] = b'X';
        assert!(PagedKvCache::load(&mut bytes.as_slice(), spec()).is_err());
    }

    #[test]
    fn capacity_arithmetic() {
        let l = HeadLayout::new(32, 8, 128, 128, 16).unwrap();
        let b = 10_000_000u64;
        assert_eq!(capacity_tokens(&l, Precision::Bf16, b), (b / (2 * 8 * 128 * 2)) as usize);
        assert_eq!(capacity_tokens(&l, Precision::Int4, b), 4 * capacity_tokens(&l, Precision::Bf16, b));
        assert_eq!(capacity_tokens(&l, Precision::Int4, 100), 0);
        assert!(bytes_per_token(&l, Precision::Int4) * 4 > bytes_per_token(&l, Precision::Bf16));
    }

    #[test]
    fn bf16_storage_rounds_to_nearest() {
        let l = HeadLayout::new(1, 1, 2, 1, 1).unwrap();
        let mut c = PagedKvCache::new(l, Precision::Bf16, 1, RotationSpec::identity(2)).unwrap();
        let s = c.add_sequence();
        c.append_token(s, &[1.0, 1.0 + 1.0 / 512.0], &[3.140625, -0.0]).unwrap();
        let (k, v) = c.read_token(s, 0).unwrap();
        assert_eq!(k, vec![1.0, 1.0]);
        assert_eq!(v, vec![3.140625, 0.0]);
    }
}
