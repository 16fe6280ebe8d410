//! The attack surface: a mutable per-layer, per-head key/value store.
//!
//! Besides the entries themselves the cache keeps the clean block inputs of
//! every position, which is enough to re-derive any layer's keys and values
//! from scratch ([`KVCache::recompute_layer`]), and a [`TraceLog`] of every
//! mutation made through the perturbation API.

use serde::{Deserialize, Serialize};

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{invalid_arg, invalid_state, Error, Result};
use crate::linalg::{all_finite, norm2};
use crate::model::{project_kv, ModelConfig, Token, Weights};

/// How a perturbation was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Gaussian,
    Zeroing,
    Rotation,
    Optimized,
    Manual,
}

impl PerturbationKind {
    fn code(self) -> u8 {
        match self {
            Self::Gaussian => 0,
            Self::Zeroing => 1,
            Self::Rotation => 2,
            Self::Optimized => 3,
            Self::Manual => 4,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Self::Gaussian,
            1 => Self::Zeroing,
            2 => Self::Rotation,
            3 => Self::Optimized,
            4 => Self::Manual,
            _ => return None,
        })
    }
}

/// Which half of a cache entry was modified.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheTarget {
    #[default]
    Key,
    Value,
}

impl CacheTarget {
    fn is_key(&self) -> bool {
        *self == CacheTarget::Key
    }
}

/// One injection: at decode step `t`, entry `pos` of `(layer, head)` moved by
/// a vector of norm `delta_norm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(rename = "t")]
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub pos: usize,
    pub delta_norm: f64,
    #[serde(rename = "type")]
    pub kind: PerturbationKind,
    #[serde(default, skip_serializing_if = "CacheTarget::is_key")]
    pub target: CacheTarget,
}

/// Ordered injection log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TraceLog {
    records: Vec<TraceRecord>,
}

impl TraceLog {
    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn push(&mut self, r: TraceRecord) {
        debug_assert!(self.records.last().is_none_or(|p| p.step <= r.step));
        self.records.push(r);
    }
}

/// Tokens and per-layer block inputs of one position.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanRecord {
    pub token: Token,
    /// `[layer]` residual stream entering each block when this position was
    /// first processed.
    pub inputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct HeadStore {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Per-layer, per-head key/value cache.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    n_layers: usize,
    n_heads: usize,
    d_head: usize,
    d_model: usize,
    /// `[layer][head]`
    heads: Vec<Vec<HeadStore>>,
    records: Vec<CleanRecord>,
    trace: TraceLog,
}

/// Deep copy of a cache, restorable bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheSnapshot(KVCache);

impl KVCache {
    pub fn new(n_layers: usize, n_heads: usize, d_head: usize, d_model: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_head,
            d_model,
            heads: vec![vec![HeadStore::default(); n_heads]; n_layers],
            records: Vec::new(),
            trace: TraceLog::default(),
        }
    }

    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self::new(cfg.n_layers, cfg.n_heads, cfg.d_head(), cfg.d_model)
    }

    /// Number of cached positions (entries at layer 0, head 0).
    pub fn len(&self) -> usize {
        self.heads.first().and_then(|l| l.first()).map_or(0, |h| h.keys.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn keys(&self, layer: usize, head: usize) -> &[Vec<f64>] {
        &self.heads[layer][head].keys
    }

    pub fn values(&self, layer: usize, head: usize) -> &[Vec<f64>] {
        &self.heads[layer][head].values
    }

    pub fn trace(&self) -> &TraceLog {
        &self.trace
    }

    pub fn clean_records(&self) -> &[CleanRecord] {
        &self.records
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.records.iter().map(|r| r.token).collect()
    }

    fn check_slot(&self, layer: usize, head: usize) -> Result<()> {
        if layer >= self.n_layers || head >= self.n_heads {
            return Err(invalid_arg!(
                "(layer {layer}, head {head}) outside {}x{} cache",
                self.n_layers,
                self.n_heads
            ));
        }
        Ok(())
    }

    /// Appends one `(key, value)` to `(layer, head)`.
    ///
    /// Lengths only agree again once every slot of a step has been appended
    /// and [`KVCache::push_record`] has been called.
    pub fn append(&mut self, layer: usize, head: usize, key: Vec<f64>, value: Vec<f64>) -> Result<()> {
        self.check_slot(layer, head)?;
        if key.len() != self.d_head || value.len() != self.d_head {
            return Err(invalid_arg!(
                "entry dims ({}, {}) do not match d_head {}",
                key.len(),
                value.len(),
                self.d_head
            ));
        }
        let slot = &mut self.heads[layer][head];
        slot.keys.push(key);
        slot.values.push(value);
        Ok(())
    }

    /// Closes a step by recording its token and clean block inputs.
    pub fn push_record(&mut self, token: Token, inputs: Vec<Vec<f64>>) -> Result<()> {
        if inputs.len() != self.n_layers || inputs.iter().any(|x| x.len() != self.d_model) {
            return Err(invalid_arg!("clean record shape mismatch"));
        }
        self.records.push(CleanRecord { token, inputs });
        self.check_consistent()
    }

    /// Length invariant across all slots (and the clean record, when kept).
    pub fn check_consistent(&self) -> Result<()> {
        let n = self.len();
        for (l, layer) in self.heads.iter().enumerate() {
            for (h, slot) in layer.iter().enumerate() {
                if slot.keys.len() != n || slot.values.len() != n {
                    return Err(invalid_state!("slot ({l},{h}) has length {} != {n}", slot.keys.len()));
                }
            }
        }
        if !self.records.is_empty() && self.records.len() != n {
            return Err(invalid_state!("clean record length {} != {n}", self.records.len()));
        }
        Ok(())
    }

    fn perturb(
        &mut self,
        target: CacheTarget,
        layer: usize,
        head: usize,
        pos: usize,
        delta: &[f64],
        kind: PerturbationKind,
    ) -> Result<f64> {
        self.check_slot(layer, head)?;
        let n = self.len();
        if pos >= n {
            return Err(invalid_arg!("position {pos} out of range (length {n})"));
        }
        if delta.len() != self.d_head {
            return Err(invalid_arg!("delta dim {} != d_head {}", delta.len(), self.d_head));
        }
        if !all_finite(delta) {
            return Err(Error::NonFinite("perturbation".into()));
        }
        let slot = &mut self.heads[layer][head];
        let entry = match target {
            CacheTarget::Key => &mut slot.keys[pos],
            CacheTarget::Value => &mut slot.values[pos],
        };
        for (e, d) in entry.iter_mut().zip(delta) {
            *e += d;
        }
        let norm = norm2(delta);
        self.trace.push(TraceRecord {
            step: n + 1,
            layer,
            head,
            pos,
            delta_norm: norm,
            kind,
            target,
        });
        Ok(norm)
    }

    /// `k ↦ k + δ` at one position; returns `‖δ‖₂`.
    pub fn perturb_key(&mut self, layer: usize, head: usize, pos: usize, delta: &[f64]) -> Result<f64> {
        self.perturb(CacheTarget::Key, layer, head, pos, delta, PerturbationKind::Manual)
    }

    pub fn perturb_key_as(
        &mut self,
        kind: PerturbationKind,
        layer: usize,
        head: usize,
        pos: usize,
        delta: &[f64],
    ) -> Result<f64> {
        self.perturb(CacheTarget::Key, layer, head, pos, delta, kind)
    }

    /// `v ↦ v + δ` at one position; returns `‖δ‖₂`.
    pub fn perturb_value(&mut self, layer: usize, head: usize, pos: usize, delta: &[f64]) -> Result<f64> {
        self.perturb(CacheTarget::Value, layer, head, pos, delta, PerturbationKind::Manual)
    }

    /// Overwrites an entry without tracing (used to undo defense masks).
    pub(crate) fn set_entry(&mut self, layer: usize, head: usize, pos: usize, key: Vec<f64>, value: Vec<f64>) {
        let slot = &mut self.heads[layer][head];
        slot.keys[pos] = key;
        slot.values[pos] = value;
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        CacheSnapshot(self.clone())
    }

    pub fn restore(&mut self, snapshot: &CacheSnapshot) {
        *self = snapshot.0.clone();
    }

    /// Re-derives every key/value of `layer` from the clean block inputs.
    pub fn recompute_layer(&mut self, weights: &Weights, layer: usize) -> Result<()> {
        if layer >= self.n_layers {
            return Err(invalid_arg!("layer {layer} out of range"));
        }
        if self.records.len() != self.len() {
            return Err(invalid_state!(
                "clean record incomplete ({} of {} positions)",
                self.records.len(),
                self.len()
            ));
        }
        let lw = &weights.layers[layer];
        for (pos, rec) in self.records.iter().enumerate() {
            let kv = project_kv(lw, self.n_heads, &rec.inputs[layer])?;
            for (h, (k, v)) in kv.into_iter().enumerate() {
                let slot = &mut self.heads[layer][h];
                slot.keys[pos] = k;
                slot.values[pos] = v;
            }
        }
        Ok(())
    }

    // ── Binary form ─────────────────────────────────────────────────────────

    /// Binary encoding, little-endian:
    /// magic `KVLC`, version, n_layers, n_heads, d_head, d_model (u32),
    /// length, record count, trace count (u64), then entries in
    /// layer → head → position order (key then value), clean records
    /// (u32 token + inputs), trace records.
    pub fn serialize(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(CACHE_MAGIC);
        w.u32(CACHE_VERSION);
        for v in [self.n_layers, self.n_heads, self.d_head, self.d_model] {
            w.u32(v as u32);
        }
        w.u64(self.len() as u64);
        w.u64(self.records.len() as u64);
        w.u64(self.trace.len() as u64);
        for layer in &self.heads {
            for slot in layer {
                for (k, v) in slot.keys.iter().zip(&slot.values) {
                    w.f64s(k);
                    w.f64s(v);
                }
            }
        }
        for rec in &self.records {
            w.u32(rec.token);
            for x in &rec.inputs {
                w.f64s(x);
            }
        }
        for t in self.trace.records() {
            w.u64(t.step as u64);
            w.u32(t.layer as u32);
            w.u32(t.head as u32);
            w.u64(t.pos as u64);
            w.u8(u8::from(t.target == CacheTarget::Value));
            w.u8(t.kind.code());
            w.f64(t.delta_norm);
        }
        w.into_inner()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CACHE_MAGIC)?;
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::Parse { offset: 4, message: format!("unsupported version {version}") });
        }
        let dims_at = r.offset();
        let n_layers = r.u32()? as usize;
        let n_heads = r.u32()? as usize;
        let d_head = r.u32()? as usize;
        let d_model = r.u32()? as usize;
        if n_layers == 0 || n_heads == 0 || d_head == 0 || d_model == 0 {
            return Err(Error::Parse { offset: dims_at, message: "zero dimension".into() });
        }
        let len = r.usize()?;
        let n_records = r.usize()?;
        let n_trace = r.usize()?;
        if n_records != 0 && n_records != len {
            return Err(Error::Parse {
                offset: dims_at + 24,
                message: format!("record count {n_records} does not match length {len}"),
            });
        }
        let mut cache = Self::new(n_layers, n_heads, d_head, d_model);
        for l in 0..n_layers {
            for h in 0..n_heads {
                for _ in 0..len {
                    let k = r.f64s(d_head)?;
                    let v = r.f64s(d_head)?;
                    cache.heads[l][h].keys.push(k);
                    cache.heads[l][h].values.push(v);
                }
            }
        }
        for _ in 0..n_records {
            let token = r.u32()?;
            let inputs = (0..n_layers).map(|_| r.f64s(d_model)).collect::<Result<_>>()?;
            cache.records.push(CleanRecord { token, inputs });
        }
        for _ in 0..n_trace {
            let step = r.usize()?;
            let layer = r.u32()? as usize;
            let head = r.u32()? as usize;
            let pos = r.usize()?;
            let at = r.offset();
            let target = match r.u8()? {
                0 => CacheTarget::Key,
                1 => CacheTarget::Value,
                x => return Err(Error::Parse { offset: at, message: format!("bad target tag {x}") }),
            };
            let code = r.u8()?;
            let kind = PerturbationKind::from_code(code)
                .ok_or_else(|| Error::Parse { offset: at + 1, message: format!("bad kind tag {code}") })?;
            let delta_norm = r.f64()?;
            cache.trace.records.push(TraceRecord { step, layer, head, pos, delta_norm, kind, target });
        }
        if r.remaining() != 0 {
            return Err(Error::Parse {
                offset: r.offset(),
                message: format!("{} trailing bytes", r.remaining()),
            });
        }
        Ok(cache)
    }

    // ── Structured dump ─────────────────────────────────────────────────────

    /// Structured-text view (entries and trace; the clean record is not part
    /// of the dump).
    pub fn to_dump(&self, model_config: &ModelConfig) -> CacheDump {
        let layers = self
            .heads
            .iter()
            .enumerate()
            .map(|(layer, hs)| LayerDump {
                layer,
                heads: hs
                    .iter()
                    .enumerate()
                    .map(|(head, slot)| HeadDump {
                        head,
                        entries: slot
                            .keys
                            .iter()
                            .zip(&slot.values)
                            .enumerate()
                            .map(|(pos, (k, v))| EntryDump { pos, key: k.clone(), value: v.clone() })
                            .collect(),
                    })
                    .collect(),
            })
            .collect();
        CacheDump {
            model_config: model_config.clone(),
            length: self.len(),
            layers,
            trace: self.trace.clone(),
        }
    }

    pub fn from_dump(dump: &CacheDump) -> Result<Self> {
        let cfg = &dump.model_config;
        cfg.validate()?;
        let mut cache = Self::for_model(cfg);
        if dump.layers.len() != cfg.n_layers {
            return Err(invalid_arg!("dump has {} layers, config {}", dump.layers.len(), cfg.n_layers));
        }
        for (l, ld) in dump.layers.iter().enumerate() {
            if ld.layer != l || ld.heads.len() != cfg.n_heads {
                return Err(invalid_arg!("dump layer {l} malformed"));
            }
            for (h, hd) in ld.heads.iter().enumerate() {
                if hd.head != h || hd.entries.len() != dump.length {
                    return Err(invalid_arg!("dump slot ({l},{h}) malformed"));
                }
                for (p, e) in hd.entries.iter().enumerate() {
                    if e.pos != p {
                        return Err(invalid_arg!("dump slot ({l},{h}) position {p} out of order"));
                    }
                    cache.append(l, h, e.key.clone(), e.value.clone())?;
                }
            }
        }
        cache.trace = dump.trace.clone();
        cache.check_consistent()?;
        Ok(cache)
    }
}

pub const CACHE_MAGIC: &[u8; 4] = b"KVLC";
pub const CACHE_VERSION: u32 = 1;

/// Structured-text cache dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheDump {
    pub model_config: ModelConfig,
    pub length: usize,
    pub layers: Vec<LayerDump>,
    pub trace: TraceLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDump {
    pub layer: usize,
    pub heads: Vec<HeadDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDump {
    pub head: usize,
    pub entries: Vec<EntryDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryDump {
    pub pos: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_step, init_weights};

    fn cfg() -> ModelConfig {
        ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, vocab: 32, max_seq: 16, seed: 5 }
    }

    fn filled(n: usize) -> (Weights, KVCache) {
        let w = init_weights(&cfg()).unwrap();
        let mut c = KVCache::for_model(&cfg());
        for t in 0..n {
            forward_step(&w, &mut c, (t * 7 % 32) as Token).unwrap();
        }
        (w, c)
    }

    #[test]
    fn append_and_read_back() {
        let mut c = KVCache::new(1, 1, 2, 4);
        c.append(0, 0, vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.keys(0, 0)[0], vec![1.0, 2.0]);
        assert_eq!(c.values(0, 0)[0], vec![3.0, 4.0]);
        for i in 1..5 {
            c.append(0, 0, vec![i as f64; 2], vec![0.0; 2]).unwrap();
        }
        assert_eq!(c.len(), 5);
        assert!(c.append(0, 0, vec![1.0], vec![1.0, 1.0]).is_err());
        assert!(c.append(1, 0, vec![1.0; 2], vec![1.0; 2]).is_err());
    }

    #[test]
    fn zero_delta_is_identity() {
        let (_, mut c) = filled(4);
        let before = c.clone();
        let n = c.perturb_key(1, 0, 2, &[0.0; 4]).unwrap();
        assert_eq!(n, 0.0);
        assert_eq!(c.keys(1, 0), before.keys(1, 0));
        assert_eq!(c.trace().records()[0].delta_norm, 0.0);
    }

    #[test]
    fn negated_key_zeroes_exactly() {
        let (_, mut c) = filled(4);
        let neg: Vec<f64> = c.keys(0, 1)[1].iter().map(|x| -x).collect();
        c.perturb_key(0, 1, 1, &neg).unwrap();
        assert!(c.keys(0, 1)[1].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn perturb_touches_one_key_only() {
        let (_, mut c) = filled(5);
        let before = c.clone();
        c.perturb_key(1, 1, 3, &[0.5, -0.25, 1.0, 2.0]).unwrap();
        for l in 0..2 {
            for h in 0..2 {
                assert_eq!(c.values(l, h), before.values(l, h));
                for p in 0..5 {
                    if (l, h, p) != (1, 1, 3) {
                        assert_eq!(c.keys(l, h)[p], before.keys(l, h)[p]);
                    }
                }
            }
        }
        assert_ne!(c.keys(1, 1)[3], before.keys(1, 1)[3]);
        let rec = &c.trace().records()[0];
        assert_eq!((rec.step, rec.layer, rec.head, rec.pos), (6, 1, 1, 3));
        assert!(c.perturb_key(0, 0, 5, &[0.0; 4]).is_err());
    }

    #[test]
    fn snapshot_restore() {
        let (_, mut c) = filled(3);
        let original = c.clone();
        let snap = c.snapshot();
        c.perturb_key(0, 0, 0, &[1.0; 4]).unwrap();
        let inner = c.snapshot();
        c.perturb_key(0, 0, 1, &[1.0; 4]).unwrap();
        c.restore(&snap);
        assert_eq!(c, original);
        c.restore(&inner);
        assert_ne!(c, original);
        assert_eq!(c.trace().len(), 1);
    }

    #[test]
    fn binary_round_trip_and_layout() {
        let (_, mut c) = filled(3);
        c.perturb_key(1, 0, 1, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let bytes = c.serialize();
        assert_eq!(KVCache::deserialize(&bytes).unwrap(), c);

        // Hand decode: header is 4+4+16+24 = 48 bytes, then layer0/head0/pos0 key.
        assert_eq!(&bytes[..4], b"KVLC");
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 4); // d_head
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 3); // length
        let key0: Vec<f64> = bytes[48..80]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        assert_eq!(key0, c.keys(0, 0)[0]);

        for cut in [0, 3, 47, bytes.len() - 1] {
            assert!(matches!(KVCache::deserialize(&bytes[..cut]), Err(Error::Parse { .. })), "cut {cut}");
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let (_, c) = filled(2);
        let bytes = c.serialize();
        match KVCache::deserialize(&bytes[..60]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 48),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dump_round_trip() {
        let (_, mut c) = filled(3);
        c.perturb_key(0, 1, 2, &[1e-300, -0.0, 3.0, 1.0 / 3.0]).unwrap();
        let dump = c.to_dump(&cfg());
        let text = serde_json::to_string(&dump).unwrap();
        let back: CacheDump = serde_json::from_str(&text).unwrap();
        let restored = KVCache::from_dump(&back).unwrap();
        for l in 0..2 {
            for h in 0..2 {
                assert_eq!(restored.keys(l, h), c.keys(l, h));
                assert_eq!(restored.values(l, h), c.values(l, h));
            }
        }
        assert_eq!(restored.trace(), c.trace());
        assert!(text.contains("\"type\":\"manual\""));
    }

    #[test]
    fn recompute_restores_clean_layer() {
        let (w, mut c) = filled(6);
        let clean = c.clone();
        c.recompute_layer(&w, 1).unwrap();
        assert_eq!(c, clean);

        c.perturb_key(1, 0, 2, &[9.0; 4]).unwrap();
        c.perturb_key(1, 1, 4, &[-3.0; 4]).unwrap();
        c.recompute_layer(&w, 1).unwrap();
        for h in 0..2 {
            assert_eq!(c.keys(1, h), clean.keys(1, h));
            assert_eq!(c.values(1, h), clean.values(1, h));
        }

        let mut bare = KVCache::new(2, 2, 4, 8);
        bare.append(0, 0, vec![0.0; 4], vec![0.0; 4]).unwrap();
        assert!(matches!(bare.recompute_layer(&w, 0), Err(Error::InvalidState(_))));
    }
}
