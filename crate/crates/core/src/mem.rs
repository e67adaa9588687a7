//! The data plane's allocator. All analytics data lives in uArrays:
//! append-only, logically contiguous containers that move through
//! Open → Produced → Retired. uArrays are co-located into uGroups so memory
//! can be reclaimed consecutively from the front of each group.
//!
//! Placement follows the consumed-after chain supplied by untrusted hints:
//! a new array lands right behind the nearest chain predecessor that is
//! Produced and sits at the end of its group; otherwise it gets a fresh
//! group. Groups grow in place in fixed chunks (2 MiB by default, modeling
//! level-2 page-table granularity) inside a per-group reserved range
//! (1 GiB by default); sealed bytes are never relocated.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

use crate::model::Schema;
use crate::util::fnv1a64;

pub const CHUNK_SIZE: usize = 2 * 1024 * 1024;
pub const GROUP_RESERVE: u64 = 1024 * 1024 * 1024;

#[derive(Debug, Clone, Copy)]
pub struct AllocConfig {
    pub chunk_size: usize,
    pub group_reserve: u64,
}

impl Default for AllocConfig {
    fn default() -> Self {
        AllocConfig {
            chunk_size: CHUNK_SIZE,
            group_reserve: GROUP_RESERVE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArrayKind {
    Streaming,
    State,
    Temporary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayState {
    Open,
    Produced,
    Retired,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemError {
    #[error("lifecycle violation: {0}")]
    LifecycleViolation(&'static str),
    #[error("group reserved capacity exhausted")]
    GroupCapacity,
    #[error("array is no longer addressable")]
    UnknownArray,
    #[error("byte length is not a multiple of the item size")]
    BadSize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MemoryStats {
    pub resident_bytes: u64,
    pub reserved_bytes: u64,
    pub live_groups: u64,
    pub live_arrays: u64,
    pub reclaimed_bytes: u64,
    pub peak_resident_bytes: u64,
}

#[derive(Default)]
struct StatCounters {
    resident: AtomicU64,
    reserved: AtomicU64,
    live_groups: AtomicU64,
    live_arrays: AtomicU64,
    reclaimed: AtomicU64,
    peak: AtomicU64,
}

impl StatCounters {
    fn add_resident(&self, n: u64) {
        let cur = self.resident.fetch_add(n, Ordering::Relaxed) + n;
        self.peak.fetch_max(cur, Ordering::Relaxed);
    }

    fn snapshot(&self) -> MemoryStats {
        MemoryStats {
            resident_bytes: self.resident.load(Ordering::Relaxed),
            reserved_bytes: self.reserved.load(Ordering::Relaxed),
            live_groups: self.live_groups.load(Ordering::Relaxed),
            live_arrays: self.live_arrays.load(Ordering::Relaxed),
            reclaimed_bytes: self.reclaimed.load(Ordering::Relaxed),
            peak_resident_bytes: self.peak.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug)]
struct Seg {
    chunk: usize,
    off: usize,
    len: usize,
}

#[derive(Debug)]
struct Member {
    id: u64,
    kind: ArrayKind,
    state: ArrayState,
    window: Option<u64>,
    item_size: usize,
    len: u64,
    start: u64,
    end: u64,
    segments: Vec<Seg>,
    seal_hash: Option<u64>,
}

struct GroupInner {
    chunks: Vec<Option<Box<[u8]>>>,
    members: VecDeque<Member>,
    reclaim_cursor: u64,
    append_cursor: u64,
    destroyed: bool,
}

pub struct UGroup {
    pub id: u64,
    chunk_size: usize,
    reserve: u64,
    inner: RwLock<GroupInner>,
    stats: Arc<StatCounters>,
}

impl UGroup {
    fn new(id: u64, cfg: &AllocConfig, stats: Arc<StatCounters>) -> Self {
        stats.live_groups.fetch_add(1, Ordering::Relaxed);
        stats.reserved.fetch_add(cfg.group_reserve, Ordering::Relaxed);
        UGroup {
            id,
            chunk_size: cfg.chunk_size,
            reserve: cfg.group_reserve,
            inner: RwLock::new(GroupInner {
                chunks: Vec::new(),
                members: VecDeque::new(),
                reclaim_cursor: 0,
                append_cursor: 0,
                destroyed: false,
            }),
            stats: stats.clone(),
        }
    }

    /// Frees whole chunks covered by the retired prefix; destroys the group
    /// once every member is retired. Returns (bytes freed, destroyed).
    fn reclaim(&self) -> (u64, bool) {
        let mut inner = self.inner.write().unwrap();
        if inner.destroyed {
            return (0, false);
        }
        while matches!(
            inner.members.front(),
            Some(m) if m.state == ArrayState::Retired
        ) {
            let m = inner.members.pop_front().unwrap();
            inner.reclaim_cursor = inner.reclaim_cursor.max(m.end);
        }
        let mut freed = 0u64;
        if inner.members.is_empty() {
            // Fully retired: release everything and retire the group itself.
            // Every group is born with a member, so empty means drained.
            for c in inner.chunks.iter_mut() {
                if let Some(b) = c.take() {
                    freed += b.len() as u64;
                }
            }
            inner.destroyed = true;
        } else {
            let covered = (inner.reclaim_cursor / self.chunk_size as u64) as usize;
            for c in inner.chunks.iter_mut().take(covered) {
                if let Some(b) = c.take() {
                    freed += b.len() as u64;
                }
            }
        }
        if freed > 0 {
            self.stats.resident.fetch_sub(freed, Ordering::Relaxed);
            self.stats.reclaimed.fetch_add(freed, Ordering::Relaxed);
        }
        let destroyed = inner.destroyed;
        if destroyed {
            self.stats.live_groups.fetch_sub(1, Ordering::Relaxed);
            self.stats.reserved.fetch_sub(self.reserve, Ordering::Relaxed);
        }
        (freed, destroyed)
    }
}

impl GroupInner {
    fn member_mut(&mut self, id: u64) -> Option<&mut Member> {
        self.members.iter_mut().rev().find(|m| m.id == id)
    }

    fn member(&self, id: u64) -> Option<&Member> {
        self.members.iter().rev().find(|m| m.id == id)
    }
}

/// Owner-held handle to one uArray. Appends are only valid while the array
/// is Open and the handle holder is the single owner by construction.
#[derive(Clone)]
pub struct UArrayHandle {
    group: Arc<UGroup>,
    id: u64,
    schema: Schema,
    kind: ArrayKind,
}

impl UArrayHandle {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn schema(&self) -> Schema {
        self.schema
    }

    pub fn kind(&self) -> ArrayKind {
        self.kind
    }

    pub fn group_id(&self) -> u64 {
        self.group.id
    }

    pub fn item_size(&self) -> usize {
        self.schema.item_size()
    }

    pub fn len(&self) -> u64 {
        let inner = self.group.inner.read().unwrap();
        inner.member(self.id).map(|m| m.len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self) -> Option<ArrayState> {
        let inner = self.group.inner.read().unwrap();
        inner.member(self.id).map(|m| m.state)
    }

    pub fn window(&self) -> Option<u64> {
        let inner = self.group.inner.read().unwrap();
        inner.member(self.id).and_then(|m| m.window)
    }

    pub fn set_window(&self, w: Option<u64>) {
        let mut inner = self.group.inner.write().unwrap();
        if let Some(m) = inner.member_mut(self.id) {
            m.window = w;
        }
    }

    /// Appends packed items. Bytes are laid out contiguously in logical
    /// order; an item never straddles a chunk boundary, so a chunk's tail
    /// smaller than one item is skipped as padding.
    pub fn append_bytes(&self, bytes: &[u8]) -> Result<u64, MemError> {
        let item = self.item_size();
        if bytes.len() % item != 0 {
            return Err(MemError::BadSize);
        }
        let chunk_size = self.group.chunk_size;
        let mut inner = self.group.inner.write().unwrap();
        let is_open_last = match inner.members.back() {
            Some(m) => m.id == self.id && m.state == ArrayState::Open,
            None => false,
        };
        if !is_open_last {
            let exists = inner.member(self.id).is_some();
            return Err(if exists {
                MemError::LifecycleViolation("append requires an Open array")
            } else {
                MemError::UnknownArray
            });
        }

        // Dry run for capacity so a failed append mutates nothing.
        let mut cursor = inner.append_cursor;
        let mut items_left = (bytes.len() / item) as u64;
        while items_left > 0 {
            let room = chunk_size as u64 - cursor % chunk_size as u64;
            if room < item as u64 {
                cursor += room;
                continue;
            }
            let fit = (room / item as u64).min(items_left);
            cursor += fit * item as u64;
            items_left -= fit;
        }
        if cursor > self.group.reserve {
            return Err(MemError::GroupCapacity);
        }

        let mut src = 0usize;
        while src < bytes.len() {
            let off = (inner.append_cursor % chunk_size as u64) as usize;
            let room = chunk_size - off;
            if room < item {
                inner.append_cursor += room as u64;
                continue;
            }
            let chunk_idx = (inner.append_cursor / chunk_size as u64) as usize;
            while inner.chunks.len() <= chunk_idx {
                inner.chunks.push(None);
            }
            if inner.chunks[chunk_idx].is_none() {
                inner.chunks[chunk_idx] =
                    Some(vec![0u8; chunk_size].into_boxed_slice());
                self.stats_add_resident(chunk_size as u64);
            }
            let fit_items = (room / item).min((bytes.len() - src) / item);
            let nbytes = fit_items * item;
            inner.chunks[chunk_idx].as_mut().unwrap()[off..off + nbytes]
                .copy_from_slice(&bytes[src..src + nbytes]);
            let cursor_after = inner.append_cursor + nbytes as u64;
            let m = inner.members.back_mut().unwrap();
            match m.segments.last_mut() {
                Some(s) if s.chunk == chunk_idx && s.off + s.len == off => s.len += nbytes,
                _ => m.segments.push(Seg {
                    chunk: chunk_idx,
                    off,
                    len: nbytes,
                }),
            }
            m.len += fit_items as u64;
            m.end = cursor_after;
            inner.append_cursor = cursor_after;
            src += nbytes;
        }
        let cursor = inner.append_cursor;
        let m = inner.members.back_mut().unwrap();
        m.end = cursor;
        Ok(m.len)
    }

    fn stats_add_resident(&self, n: u64) {
        self.group.stats.add_resident(n);
    }

    /// Finalizes length and content; the array becomes read-only and its
    /// bytes stay at their addresses until retirement.
    pub fn seal(&self) -> Result<(), MemError> {
        let mut inner = self.group.inner.write().unwrap();
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        {
            let m = inner.member(self.id).ok_or(MemError::UnknownArray)?;
            if m.state != ArrayState::Open {
                return Err(MemError::LifecycleViolation("seal requires an Open array"));
            }
            for seg in &m.segments {
                let chunk = inner.chunks[seg.chunk].as_ref().unwrap();
                for &b in &chunk[seg.off..seg.off + seg.len] {
                    hash ^= u64::from(b);
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        let m = inner.member_mut(self.id).unwrap();
        m.state = ArrayState::Produced;
        m.seal_hash = Some(hash);
        Ok(())
    }

    pub fn seal_hash(&self) -> Option<u64> {
        let inner = self.group.inner.read().unwrap();
        inner.member(self.id).and_then(|m| m.seal_hash)
    }

    /// Hash of the current content, for address-stability checks.
    pub fn content_hash(&self) -> Result<u64, MemError> {
        Ok(fnv1a64(&self.copy_out()?))
    }

    pub fn copy_out(&self) -> Result<Vec<u8>, MemError> {
        let inner = self.group.inner.read().unwrap();
        let m = inner.member(self.id).ok_or(MemError::UnknownArray)?;
        let mut out = Vec::with_capacity((m.len as usize) * m.item_size);
        for seg in &m.segments {
            let chunk = inner.chunks[seg.chunk]
                .as_ref()
                .ok_or(MemError::UnknownArray)?;
            out.extend_from_slice(&chunk[seg.off..seg.off + seg.len]);
        }
        Ok(out)
    }

    pub fn retire(&self) -> Result<(), MemError> {
        let mut inner = self.group.inner.write().unwrap();
        let m = inner.member_mut(self.id).ok_or(MemError::UnknownArray)?;
        match m.state {
            ArrayState::Produced => {
                m.state = ArrayState::Retired;
                self.group.stats.live_arrays.fetch_sub(1, Ordering::Relaxed);
                Ok(())
            }
            ArrayState::Open => Err(MemError::LifecycleViolation(
                "retire requires a Produced array",
            )),
            ArrayState::Retired => Err(MemError::LifecycleViolation("array already retired")),
        }
    }
}

/// Inspection snapshot for tests and debug dumps.
#[derive(Debug, Clone)]
pub struct GroupSnapshot {
    pub id: u64,
    pub reclaim_cursor: u64,
    pub append_cursor: u64,
    pub resident_chunks: usize,
    pub members: Vec<MemberSnapshot>,
}

#[derive(Debug, Clone)]
pub struct MemberSnapshot {
    pub id: u64,
    pub state: ArrayState,
    pub kind: ArrayKind,
    pub start: u64,
    pub end: u64,
    pub len: u64,
}

struct AllocState {
    groups: BTreeMap<u64, Arc<UGroup>>,
    arrays: HashMap<u64, Arc<UGroup>>,
    after_pred: HashMap<u64, u64>,
    next_group_id: u64,
}

pub struct Allocator {
    cfg: AllocConfig,
    state: Mutex<AllocState>,
    stats: Arc<StatCounters>,
    next_array_id: AtomicU64,
    hint_anomalies: AtomicU64,
}

impl Allocator {
    pub fn new(cfg: AllocConfig) -> Self {
        Allocator {
            cfg,
            state: Mutex::new(AllocState {
                groups: BTreeMap::new(),
                arrays: HashMap::new(),
                after_pred: HashMap::new(),
                next_group_id: 0,
            }),
            stats: Arc::new(StatCounters::default()),
            next_array_id: AtomicU64::new(1),
            hint_anomalies: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> AllocConfig {
        self.cfg
    }

    /// Creates an Open uArray. `pred` is the resolved consumed-after
    /// predecessor, if the control plane provided one; consumed-in-parallel
    /// siblings simply pass no predecessor, which matches the default rule
    /// of one fresh group per array.
    pub fn create(
        &self,
        kind: ArrayKind,
        schema: Schema,
        window: Option<u64>,
        pred: Option<u64>,
    ) -> Result<UArrayHandle, MemError> {
        let id = self.next_array_id.fetch_add(1, Ordering::Relaxed);
        let mut st = self.state.lock().unwrap();

        // Walk back the consumed-after chain for a Produced array at the end
        // of its group.
        let mut target: Option<Arc<UGroup>> = None;
        let mut cur = pred;
        let mut hops = 0;
        while let Some(p) = cur {
            hops += 1;
            if hops > 1024 {
                break;
            }
            if let Some(g) = st.arrays.get(&p) {
                let inner = g.inner.read().unwrap();
                let eligible = !inner.destroyed
                    && matches!(
                        inner.members.back(),
                        Some(m) if m.id == p && m.state == ArrayState::Produced
                    );
                drop(inner);
                if eligible {
                    target = Some(g.clone());
                    break;
                }
            }
            cur = st.after_pred.get(&p).copied();
        }

        let group = match target {
            Some(g) => g,
            None => {
                let gid = st.next_group_id;
                st.next_group_id += 1;
                let g = Arc::new(UGroup::new(gid, &self.cfg, self.stats.clone()));
                st.groups.insert(gid, g.clone());
                g
            }
        };

        {
            let mut inner = group.inner.write().unwrap();
            if inner.destroyed {
                // Raced with reclamation; fall back to a fresh group.
                drop(inner);
                let gid = st.next_group_id;
                st.next_group_id += 1;
                let g = Arc::new(UGroup::new(gid, &self.cfg, self.stats.clone()));
                st.groups.insert(gid, g.clone());
                let mut inner = g.inner.write().unwrap();
                let start = inner.append_cursor;
                inner.members.push_back(Member {
                    id,
                    kind,
                    state: ArrayState::Open,
                    window,
                    item_size: schema.item_size(),
                    len: 0,
                    start,
                    end: start,
                    segments: Vec::new(),
                    seal_hash: None,
                });
                drop(inner);
                st.arrays.insert(id, g.clone());
                if let Some(p) = pred {
                    st.after_pred.insert(id, p);
                }
                self.stats.live_arrays.fetch_add(1, Ordering::Relaxed);
                return Ok(UArrayHandle {
                    group: g,
                    id,
                    schema,
                    kind,
                });
            }
            let start = inner.append_cursor;
            inner.members.push_back(Member {
                id,
                kind,
                state: ArrayState::Open,
                window,
                item_size: schema.item_size(),
                len: 0,
                start,
                end: start,
                segments: Vec::new(),
                seal_hash: None,
            });
        }
        st.arrays.insert(id, group.clone());
        if let Some(p) = pred {
            st.after_pred.insert(id, p);
        }
        self.stats.live_arrays.fetch_add(1, Ordering::Relaxed);
        Ok(UArrayHandle {
            group,
            id,
            schema,
            kind,
        })
    }

    /// Advances every group's reclaim cursor over its retired prefix and
    /// releases whole chunks; destroys fully retired groups.
    pub fn reclaim(&self) -> u64 {
        let groups: Vec<Arc<UGroup>> = {
            let st = self.state.lock().unwrap();
            st.groups.values().cloned().collect()
        };
        let mut freed = 0;
        let mut dead = Vec::new();
        for g in groups {
            let (f, destroyed) = g.reclaim();
            freed += f;
            if destroyed {
                dead.push(g.id);
            }
        }
        if !dead.is_empty() {
            let mut st = self.state.lock().unwrap();
            for gid in dead {
                if let Some(g) = st.groups.remove(&gid) {
                    let ids: Vec<u64> = {
                        let inner = g.inner.read().unwrap();
                        inner.members.iter().map(|m| m.id).collect()
                    };
                    for id in ids {
                        st.arrays.remove(&id);
                    }
                }
            }
            // Drop bookkeeping for arrays whose group vanished.
            st.arrays.retain(|_, g| !g.inner.read().unwrap().destroyed);
        }
        freed
    }

    pub fn stats(&self) -> MemoryStats {
        self.stats.snapshot()
    }

    pub fn note_hint_anomaly(&self) {
        self.hint_anomalies.fetch_add(1, Ordering::Relaxed);
    }

    pub fn hint_anomalies(&self) -> u64 {
        self.hint_anomalies.load(Ordering::Relaxed)
    }

    pub fn snapshot_groups(&self) -> Vec<GroupSnapshot> {
        let st = self.state.lock().unwrap();
        st.groups
            .values()
            .map(|g| {
                let inner = g.inner.read().unwrap();
                GroupSnapshot {
                    id: g.id,
                    reclaim_cursor: inner.reclaim_cursor,
                    append_cursor: inner.append_cursor,
                    resident_chunks: inner.chunks.iter().filter(|c| c.is_some()).count(),
                    members: inner
                        .members
                        .iter()
                        .map(|m| MemberSnapshot {
                            id: m.id,
                            state: m.state,
                            kind: m.kind,
                            start: m.start,
                            end: m.end,
                            len: m.len,
                        })
                        .collect(),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EventLayout, Schema};

    fn small_alloc() -> Allocator {
        Allocator::new(AllocConfig {
            chunk_size: 4096,
            group_reserve: 1 << 20,
        })
    }

    fn ev_schema() -> Schema {
        Schema::Events(EventLayout::ThreeField)
    }

    #[test]
    fn default_placement_is_fresh_group() {
        let a = small_alloc();
        let x = a.create(ArrayKind::State, ev_schema(), None, None).unwrap();
        let y = a.create(ArrayKind::State, ev_schema(), None, None).unwrap();
        assert_ne!(x.group_id(), y.group_id());
        assert_eq!(a.stats().live_groups, 2);
    }

    #[test]
    fn after_hint_appends_to_predecessor_group() {
        let a = small_alloc();
        let b1 = a.create(ArrayKind::State, ev_schema(), None, None).unwrap();
        b1.append_bytes(&[0u8; 24]).unwrap();
        b1.seal().unwrap();
        let b2 = a
            .create(ArrayKind::State, ev_schema(), None, Some(b1.id()))
            .unwrap();
        assert_eq!(b1.group_id(), b2.group_id());

        // b1 is no longer at the end, so a chain through it keeps walking and
        // lands behind b2 once b2 is produced.
        b2.seal().unwrap();
        let b3 = a
            .create(ArrayKind::State, ev_schema(), None, Some(b2.id()))
            .unwrap();
        assert_eq!(b3.group_id(), b1.group_id());
        let snap = a.snapshot_groups();
        assert_eq!(snap.len(), 1);
        assert_eq!(snap[0].members.len(), 3);
    }

    #[test]
    fn open_tail_blocks_chained_placement() {
        let a = small_alloc();
        let b1 = a.create(ArrayKind::State, ev_schema(), None, None).unwrap();
        b1.seal().unwrap();
        let b2 = a
            .create(ArrayKind::State, ev_schema(), None, Some(b1.id()))
            .unwrap();
        assert_eq!(b1.group_id(), b2.group_id());
        // b2 still open: the chain finds no produced-at-end array.
        let b3 = a
            .create(ArrayKind::State, ev_schema(), None, Some(b2.id()))
            .unwrap();
        assert_ne!(b3.group_id(), b2.group_id());
    }

    #[test]
    fn parallel_siblings_get_separate_groups() {
        let a = small_alloc();
        let sibs: Vec<_> = (0..4)
            .map(|_| a.create(ArrayKind::State, ev_schema(), None, None).unwrap())
            .collect();
        let mut gids: Vec<u64> = sibs.iter().map(|h| h.group_id()).collect();
        gids.dedup();
        assert_eq!(gids.len(), 4);
    }

    #[test]
    fn append_lifecycle() {
        let a = small_alloc();
        let h = a.create(ArrayKind::Streaming, ev_schema(), None, None).unwrap();
        assert_eq!(h.append_bytes(&[1u8; 36]).unwrap(), 3);
        assert_eq!(h.append_bytes(&[7u8; 5]), Err(MemError::BadSize));
        h.seal().unwrap();
        assert_eq!(
            h.append_bytes(&[1u8; 12]),
            Err(MemError::LifecycleViolation("append requires an Open array"))
        );
        assert_eq!(
            h.seal(),
            Err(MemError::LifecycleViolation("seal requires an Open array"))
        );
        assert_eq!(h.len(), 3);
        h.retire().unwrap();
        assert_eq!(
            h.retire(),
            Err(MemError::LifecycleViolation("array already retired"))
        );
    }

    #[test]
    fn retire_open_array_is_violation() {
        let a = small_alloc();
        let h = a.create(ArrayKind::Streaming, ev_schema(), None, None).unwrap();
        assert_eq!(
            h.retire(),
            Err(MemError::LifecycleViolation(
                "retire requires a Produced array"
            ))
        );
    }

    #[test]
    fn seal_empty_array_is_valid() {
        let a = small_alloc();
        let h = a.create(ArrayKind::State, ev_schema(), None, None).unwrap();
        h.seal().unwrap();
        assert_eq!(h.len(), 0);
        assert_eq!(h.copy_out().unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn chunk_crossing_append_matches_shadow_copy() {
        let a = small_alloc(); // 4 KiB chunks
        let h = a.create(ArrayKind::Streaming, ev_schema(), None, None).unwrap();
        let mut shadow = Vec::new();
        let mut next = 0u8;
        // 1000 items * 12 B = ~12 KB across 3+ chunks, in ragged pieces.
        for piece in [7usize, 100, 341, 1, 250, 301] {
            let bytes: Vec<u8> = (0..piece * 12)
                .map(|_| {
                    next = next.wrapping_add(1);
                    next
                })
                .collect();
            shadow.extend_from_slice(&bytes);
            h.append_bytes(&bytes).unwrap();
        }
        h.seal().unwrap();
        assert_eq!(h.copy_out().unwrap(), shadow);
        // 4096 % 12 != 0, so padding must have forced multiple segments.
        assert!(a.snapshot_groups()[0].resident_chunks >= 3);
    }

    #[test]
    fn sealed_content_stable_under_allocation_churn() {
        let a = small_alloc();
        let h = a.create(ArrayKind::State, ev_schema(), None, None).unwrap();
        h.append_bytes(&[42u8; 1200]).unwrap();
        h.seal().unwrap();
        let sealed = h.seal_hash().unwrap();
        for _ in 0..10_000 {
            let t = a.create(ArrayKind::Temporary, ev_schema(), None, None).unwrap();
            t.append_bytes(&[9u8; 12]).unwrap();
            t.seal().unwrap();
            t.retire().unwrap();
        }
        a.reclaim();
        assert_eq!(h.content_hash().unwrap(), sealed);
    }

    #[test]
    fn reclaim_frees_prefix_only() {
        let a = small_alloc();
        let mk = |kind| {
            let h = a.create(kind, ev_schema(), None, None).unwrap();
            h
        };
        // One group with three chained members. 1023 items span three 4 KiB
        // chunks (341 items each, 4 bytes tail padding per chunk).
        let m1 = mk(ArrayKind::State);
        m1.append_bytes(&vec![1u8; 1023 * 12]).unwrap();
        m1.seal().unwrap();
        let m2 = a
            .create(ArrayKind::State, ev_schema(), None, Some(m1.id()))
            .unwrap();
        m2.append_bytes(&vec![2u8; 341 * 12]).unwrap();
        m2.seal().unwrap();
        let m3 = a
            .create(ArrayKind::State, ev_schema(), None, Some(m2.id()))
            .unwrap();
        m3.append_bytes(&vec![3u8; 1200]).unwrap();
        m3.seal().unwrap();
        assert_eq!(m1.group_id(), m3.group_id());

        // Retiring the middle member frees nothing.
        m2.retire().unwrap();
        a.reclaim();
        let snap = &a.snapshot_groups()[0];
        assert_eq!(snap.reclaim_cursor, 0);

        // Retiring the head releases the fully covered chunks.
        let before = a.stats().resident_bytes;
        m1.retire().unwrap();
        let freed = a.reclaim();
        assert!(freed >= 2 * 4096);
        assert!(a.stats().resident_bytes < before);
        // m3 still alive: group survives.
        assert_eq!(a.stats().live_groups, 1);

        m3.retire().unwrap();
        a.reclaim();
        assert_eq!(a.stats().live_groups, 0);
        assert_eq!(a.stats().resident_bytes, 0);
    }

    #[test]
    fn group_capacity_exhaustion() {
        let a = Allocator::new(AllocConfig {
            chunk_size: 4096,
            group_reserve: 8192,
        });
        let h = a.create(ArrayKind::Streaming, ev_schema(), None, None).unwrap();
        // 4096/12 = 341 items per chunk; two chunks hold 682.
        h.append_bytes(&vec![0u8; 682 * 12]).unwrap();
        assert_eq!(h.append_bytes(&vec![0u8; 1200]), Err(MemError::GroupCapacity));
        // The failed append must not have changed the length.
        assert_eq!(h.len(), 682);
    }

    #[test]
    fn resident_bounded_by_reserved() {
        let a = small_alloc();
        for _ in 0..5 {
            let h = a.create(ArrayKind::State, ev_schema(), None, None).unwrap();
            h.append_bytes(&[0u8; 120]).unwrap();
            h.seal().unwrap();
        }
        let s = a.stats();
        assert!(s.resident_bytes <= s.reserved_bytes);
        assert_eq!(s.live_groups, 5);
    }
}
