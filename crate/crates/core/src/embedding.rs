//! Hierarchical shared embeddings plus a recyclable table of unique embeddings.
//!
//! Each field (users, items) owns `k` shared vectors `e_s1..e_sk` and a slot
//! table of unique vectors. An id sits at a position `p ∈ [1, k+1]`: positions
//! `1..=k` resolve to the matching shared vector, position `k+1` to a unique
//! slot owned by that id alone. With `k = 0` every id is unique on first sight.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_rng, write_rng, Reader, Writer};
use crate::error::{check_dim, Error, Result};
use crate::nn::init::kaiming_vec;
use crate::nn::{AdamConfig, AdamState};
use crate::reward::LossHistory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    User,
    Item,
}

impl Field {
    pub const ALL: [Field; 2] = [Field::User, Field::Item];

    pub fn index(self) -> usize {
        match self {
            Field::User => 0,
            Field::Item => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::User => "user",
            Field::Item => "item",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IdKey {
    pub field: Field,
    pub raw_id: u64,
}

impl IdKey {
    pub fn user(raw_id: u64) -> Self {
        Self {
            field: Field::User,
            raw_id,
        }
    }

    pub fn item(raw_id: u64) -> Self {
        Self {
            field: Field::Item,
            raw_id,
        }
    }
}

impl fmt::Display for IdKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.field.name(), self.raw_id)
    }
}

/// Where an id's embedding lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    /// One-based shared level.
    Shared(usize),
    /// Index into the unique slot table.
    Unique(usize),
}

/// Position move chosen by an identity agent. The index order is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Ascend,
    Unchanged,
    Descend,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Ascend, Action::Unchanged, Action::Descend];

    pub fn index(self) -> usize {
        match self {
            Action::Ascend => 0,
            Action::Unchanged => 1,
            Action::Descend => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Target position after this action, clamped to `[1, k+1]`.
    pub fn target(self, position: usize, k: usize) -> usize {
        match self {
            Action::Ascend => (position + 1).min(k + 1),
            Action::Unchanged => position,
            Action::Descend => position.saturating_sub(1).max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdState {
    pub frequency: u64,
    pub position: usize,
    pub history: LossHistory,
}

/// Result of [`EmbeddingStore::apply_action`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionChange {
    pub from: usize,
    pub to: usize,
    pub allocated: Option<usize>,
    pub freed: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    raw_id: u64,
    state: IdState,
    slot: Slot,
}

#[derive(Debug, Clone, PartialEq)]
struct FieldTable {
    k: usize,
    shared: Vec<f64>,
    shared_opt: Vec<AdamState>,
    unique: Vec<f64>,
    unique_opt: Vec<AdamState>,
    unique_owner: Vec<Option<u64>>,
    free: Vec<usize>,
    index: HashMap<u64, usize>,
    entries: Vec<Entry>,
}

impl FieldTable {
    fn entry(&self, raw_id: u64) -> Option<&Entry> {
        self.index.get(&raw_id).map(|&i| &self.entries[i])
    }

    fn live_unique(&self) -> usize {
        self.unique_owner.len() - self.free.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub dim: usize,
    pub k_user: usize,
    pub k_item: usize,
    pub history_capacity: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

/// Parameter accounting for one field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    pub ids: u64,
    pub origin_params: u64,
    pub actual_params: u64,
    pub deduction_ratio: f64,
}

impl FieldParams {
    /// `origin = ids·d`, `actual = (k + live_unique)·d`.
    pub fn compute(ids: u64, k: u64, live_unique: u64, dim: u64) -> Self {
        let origin_params = ids * dim;
        let actual_params = (k + live_unique) * dim;
        let deduction_ratio = if origin_params > 0 {
            1.0 - actual_params as f64 / origin_params as f64
        } else {
            0.0
        };
        Self {
            ids,
            origin_params,
            actual_params,
            deduction_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub user: FieldParams,
    pub item: FieldParams,
    pub origin_params: u64,
    pub actual_params: u64,
    pub deduction_ratio: f64,
}

impl ParamReport {
    pub fn from_fields(user: FieldParams, item: FieldParams) -> Self {
        let origin_params = user.origin_params + item.origin_params;
        let actual_params = user.actual_params + item.actual_params;
        let deduction_ratio = if origin_params > 0 {
            1.0 - actual_params as f64 / origin_params as f64
        } else {
            0.0
        };
        Self {
            user,
            item,
            origin_params,
            actual_params,
            deduction_ratio,
        }
    }

    pub fn field(&self, field: Field) -> &FieldParams {
        match field {
            Field::User => &self.user,
            Field::Item => &self.item,
        }
    }
}

/// Per-slot gradient sums for one training batch.
#[derive(Debug, Clone, Default)]
pub struct SlotGradients {
    dim: usize,
    grads: BTreeMap<(Field, Slot), Vec<f64>>,
}

impl SlotGradients {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            grads: BTreeMap::new(),
        }
    }

    /// Adds `grad` to the running sum for `slot`.
    pub fn add(&mut self, field: Field, slot: Slot, grad: &[f64]) -> Result<()> {
        check_dim("slot gradient", self.dim, grad.len())?;
        let acc = self
            .grads
            .entry((field, slot))
            .or_insert_with(|| vec![0.0; grad.len()]);
        for (a, g) in acc.iter_mut().zip(grad) {
            *a += g;
        }
        Ok(())
    }

    pub fn get(&self, field: Field, slot: Slot) -> Option<&[f64]> {
        self.grads.get(&(field, slot)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Field, Slot, &[f64])> {
        self.grads.iter().map(|((f, s), g)| (*f, *s, g.as_slice()))
    }
}

/// Shared and unique embedding tables for both fields, with per-id state.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    history_capacity: usize,
    adam: AdamConfig,
    seed: u64,
    rng: ChaCha8Rng,
    tables: [FieldTable; 2],
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.history_capacity == other.history_capacity
            && self.adam == other.adam
            && self.seed == other.seed
            && self.rng == other.rng
            && self.tables == other.tables
    }
}

impl EmbeddingStore {
    pub fn new(config: StoreConfig) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::invalid("dim", "embedding dimension must be >= 1"));
        }
        config.adam.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut table = |k: usize| FieldTable {
            k,
            shared: kaiming_vec(k * config.dim, config.dim, &mut rng),
            shared_opt: (0..k)
                .map(|_| AdamState::new(config.dim, config.adam))
                .collect(),
            unique: Vec::new(),
            unique_opt: Vec::new(),
            unique_owner: Vec::new(),
            free: Vec::new(),
            index: HashMap::new(),
            entries: Vec::new(),
        };
        let tables = [table(config.k_user), table(config.k_item)];
        Ok(Self {
            dim: config.dim,
            history_capacity: config.history_capacity,
            adam: config.adam,
            seed: config.seed,
            rng,
            tables,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self, field: Field) -> usize {
        self.tables[field.index()].k
    }

    pub fn history_capacity(&self) -> usize {
        self.history_capacity
    }

    /// Number of distinct ids observed in `field`.
    pub fn id_count(&self, field: Field) -> usize {
        self.tables[field.index()].entries.len()
    }

    pub fn live_unique(&self, field: Field) -> usize {
        self.tables[field.index()].live_unique()
    }

    /// Unique slots ever allocated (live plus recycled).
    pub fn allocated_unique(&self, field: Field) -> usize {
        self.tables[field.index()].unique_owner.len()
    }

    pub fn ids(&self, field: Field) -> impl Iterator<Item = IdKey> + '_ {
        self.tables[field.index()]
            .entries
            .iter()
            .map(move |e| IdKey {
                field,
                raw_id: e.raw_id,
            })
    }

    pub fn state(&self, id: IdKey) -> Option<&IdState> {
        self.tables[id.field.index()]
            .entry(id.raw_id)
            .map(|e| &e.state)
    }

    pub fn slot(&self, id: IdKey) -> Option<Slot> {
        self.tables[id.field.index()]
            .entry(id.raw_id)
            .map(|e| e.slot)
    }

    fn entry_index(&self, id: IdKey) -> Result<usize> {
        self.tables[id.field.index()]
            .index
            .get(&id.raw_id)
            .copied()
            .ok_or(Error::UnknownId(id))
    }

    /// Registers one occurrence of `id`.
    ///
    /// A first sighting creates state `(frequency 1, position 1)`; later
    /// sightings only bump the frequency.
    pub fn observe(&mut self, id: IdKey) -> &IdState {
        let f = id.field.index();
        let idx = match self.tables[f].index.get(&id.raw_id) {
            Some(&i) => {
                self.tables[f].entries[i].state.frequency += 1;
                i
            }
            None => {
                let i = self.tables[f].entries.len();
                let k = self.tables[f].k;
                let slot = if k >= 1 {
                    Slot::Shared(1)
                } else {
                    Slot::Unique(self.allocate_unique(id.field, id.raw_id))
                };
                let table = &mut self.tables[f];
                table.index.insert(id.raw_id, i);
                table.entries.push(Entry {
                    raw_id: id.raw_id,
                    state: IdState {
                        frequency: 1,
                        position: 1,
                        history: LossHistory::new(self.history_capacity),
                    },
                    slot,
                });
                i
            }
        };
        &self.tables[f].entries[idx].state
    }

    fn allocate_unique(&mut self, field: Field, owner: u64) -> usize {
        let d = self.dim;
        let k = self.tables[field.index()].k;
        let init = if k >= 1 {
            let t = &self.tables[field.index()];
            t.shared[(k - 1) * d..k * d].to_vec()
        } else {
            kaiming_vec(d, d, &mut self.rng)
        };
        let adam = self.adam;
        let table = &mut self.tables[field.index()];
        match table.free.pop() {
            Some(slot) => {
                table.unique[slot * d..(slot + 1) * d].copy_from_slice(&init);
                table.unique_opt[slot].reset();
                table.unique_owner[slot] = Some(owner);
                slot
            }
            None => {
                let slot = table.unique_owner.len();
                table.unique.extend_from_slice(&init);
                table.unique_opt.push(AdamState::new(d, adam));
                table.unique_owner.push(Some(owner));
                slot
            }
        }
    }

    /// Moves `id` one level up, down, or nowhere.
    ///
    /// Crossing `k → k+1` allocates a unique slot initialized from `e_sk`;
    /// crossing back frees it for reuse and discards its contents.
    pub fn apply_action(&mut self, id: IdKey, action: Action) -> Result<PositionChange> {
        let idx = self.entry_index(id)?;
        let f = id.field.index();
        let k = self.tables[f].k;
        let entry = &self.tables[f].entries[idx];
        let from = entry.state.position;
        let to = action.target(from, k);
        let mut change = PositionChange {
            from,
            to,
            allocated: None,
            freed: None,
        };
        if from == to {
            return Ok(change);
        }
        let old_slot = entry.slot;
        let new_slot = if to == k + 1 {
            let s = self.allocate_unique(id.field, id.raw_id);
            change.allocated = Some(s);
            Slot::Unique(s)
        } else {
            Slot::Shared(to)
        };
        if let Slot::Unique(s) = old_slot {
            let table = &mut self.tables[f];
            table.unique_owner[s] = None;
            table.free.push(s);
            change.freed = Some(s);
        }
        let entry = &mut self.tables[f].entries[idx];
        entry.state.position = to;
        entry.slot = new_slot;
        Ok(change)
    }

    /// Forces `id` to `position`, walking one level at a time.
    pub fn move_to(&mut self, id: IdKey, position: usize) -> Result<()> {
        let k = self.k(id.field);
        if position == 0 || position > k + 1 {
            return Err(Error::Position {
                position,
                max: k + 1,
            });
        }
        loop {
            let current = self.state(id).ok_or(Error::UnknownId(id))?.position;
            let action = match current.cmp(&position) {
                std::cmp::Ordering::Less => Action::Ascend,
                std::cmp::Ordering::Greater => Action::Descend,
                std::cmp::Ordering::Equal => return Ok(()),
            };
            self.apply_action(id, action)?;
        }
    }

    pub fn slot_vector(&self, field: Field, slot: Slot) -> Result<&[f64]> {
        let t = &self.tables[field.index()];
        let d = self.dim;
        match slot {
            Slot::Shared(level) if level >= 1 && level <= t.k => {
                Ok(&t.shared[(level - 1) * d..level * d])
            }
            Slot::Unique(s) if s < t.unique_owner.len() && t.unique_owner[s].is_some() => {
                Ok(&t.unique[s * d..(s + 1) * d])
            }
            _ => Err(Error::invalid(
                "slot",
                format!("{slot:?} is not live in the {} table", field.name()),
            )),
        }
    }

    pub fn shared_vector(&self, field: Field, level: usize) -> Result<&[f64]> {
        self.slot_vector(field, Slot::Shared(level))
    }

    /// The slot and vector currently assigned to `id`.
    pub fn resolve(&self, id: IdKey) -> Result<(Slot, &[f64])> {
        let slot = self.slot(id).ok_or(Error::UnknownId(id))?;
        Ok((slot, self.slot_vector(id.field, slot)?))
    }

    pub fn slot_vector_mut(&mut self, field: Field, slot: Slot) -> Result<&mut [f64]> {
        self.slot_vector(field, slot)?;
        let d = self.dim;
        let t = &mut self.tables[field.index()];
        Ok(match slot {
            Slot::Shared(level) => &mut t.shared[(level - 1) * d..level * d],
            Slot::Unique(s) => &mut t.unique[s * d..(s + 1) * d],
        })
    }

    /// The vector `id` would use at `position`, without moving it.
    ///
    /// A unique position resolves to the id's own vector when it already owns
    /// one and to `e_sk` otherwise, matching what a promotion would copy.
    pub fn vector_at(&self, id: IdKey, position: usize) -> Result<&[f64]> {
        let k = self.k(id.field);
        if position == 0 || position > k + 1 {
            return Err(Error::Position {
                position,
                max: k + 1,
            });
        }
        if position <= k {
            return self.shared_vector(id.field, position);
        }
        match self.slot(id).ok_or(Error::UnknownId(id))? {
            Slot::Unique(s) => self.slot_vector(id.field, Slot::Unique(s)),
            Slot::Shared(_) => self.shared_vector(id.field, k),
        }
    }

    /// One Adam step on every slot named in `grads`.
    pub fn apply_gradients(&mut self, grads: &SlotGradients) -> Result<()> {
        check_dim("slot gradient dim", self.dim, grads.dim)?;
        let d = self.dim;
        for (field, slot, g) in grads.iter() {
            self.slot_vector(field, slot)?;
            let t = &mut self.tables[field.index()];
            match slot {
                Slot::Shared(level) => {
                    let i = level - 1;
                    t.shared_opt[i].step(&mut t.shared[i * d..(i + 1) * d], g)?;
                }
                Slot::Unique(s) => {
                    t.unique_opt[s].step(&mut t.unique[s * d..(s + 1) * d], g)?;
                }
            }
        }
        Ok(())
    }

    /// Overwrites shared levels `2..=k` with a copy of level 1.
    pub fn broadcast_first_shared(&mut self, field: Field) {
        let d = self.dim;
        let t = &mut self.tables[field.index()];
        for level in 1..t.k {
            let (first, rest) = t.shared.split_at_mut(d);
            rest[(level - 1) * d..level * d].copy_from_slice(first);
            t.shared_opt[level] = t.shared_opt[0].clone();
        }
    }

    pub fn record_loss(&mut self, id: IdKey, loss: f64) -> Result<()> {
        let idx = self.entry_index(id)?;
        self.tables[id.field.index()].entries[idx]
            .state
            .history
            .record(loss)
    }

    /// Mean of `id`'s recorded losses minus `current_loss`.
    pub fn reward(&self, id: IdKey, current_loss: f64) -> Result<f64> {
        self.state(id)
            .ok_or(Error::UnknownId(id))?
            .history
            .reward(current_loss)
    }

    pub fn field_params(&self, field: Field) -> FieldParams {
        let t = &self.tables[field.index()];
        FieldParams::compute(
            t.entries.len() as u64,
            t.k as u64,
            t.live_unique() as u64,
            self.dim as u64,
        )
    }

    pub fn param_report(&self) -> ParamReport {
        ParamReport::from_fields(
            self.field_params(Field::User),
            self.field_params(Field::Item),
        )
    }

    /// Checks the slot-assignment invariants, describing the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for field in Field::ALL {
            let t = &self.tables[field.index()];
            let k = t.k;
            let mut owners_seen = 0usize;
            for e in &t.entries {
                let p = e.state.position;
                if p < 1 || p > k + 1 {
                    return Err(format!(
                        "{}:{} position {p} outside [1, {}]",
                        field.name(),
                        e.raw_id,
                        k + 1
                    ));
                }
                if e.state.frequency < 1 {
                    return Err(format!("{}:{} has zero frequency", field.name(), e.raw_id));
                }
                match e.slot {
                    Slot::Shared(level) if p <= k && level == p => {}
                    Slot::Unique(s) if p == k + 1 => {
                        if t.unique_owner.get(s).copied().flatten() != Some(e.raw_id) {
                            return Err(format!(
                                "{}:{} maps to unique slot {s} it does not own",
                                field.name(),
                                e.raw_id
                            ));
                        }
                        owners_seen += 1;
                    }
                    slot => {
                        return Err(format!(
                            "{}:{} at position {p} maps to {slot:?}",
                            field.name(),
                            e.raw_id
                        ));
                    }
                }
            }
            let owned = t.unique_owner.iter().filter(|o| o.is_some()).count();
            if owned != owners_seen || t.free.len() + owned != t.unique_owner.len() {
                return Err(format!(
                    "{}: {} free + {owned} owned slots but {} allocated",
                    field.name(),
                    t.free.len(),
                    t.unique_owner.len()
                ));
            }
            let mut free = t.free.clone();
            free.sort_unstable();
            if free.windows(2).any(|w| w[0] == w[1]) {
                return Err(format!("{}: duplicate free-list entry", field.name()));
            }
            for s in &free {
                if t.unique_owner.get(*s).copied().flatten().is_some() {
                    return Err(format!("{}: free slot {s} still owned", field.name()));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.tag(b"STOR");
        w.usize(self.dim);
        w.usize(self.history_capacity);
        write_adam_config(w, &self.adam);
        w.u64(self.seed);
        write_rng(w, &self.rng);
        for t in &self.tables {
            w.usize(t.k);
            w.f64s(&t.shared);
            for s in &t.shared_opt {
                write_adam_state(w, s);
            }
            w.usize(t.unique_owner.len());
            w.f64s(&t.unique);
            for (owner, opt) in t.unique_owner.iter().zip(&t.unique_opt) {
                match owner {
                    Some(o) => {
                        w.bool(true);
                        w.u64(*o);
                    }
                    None => w.bool(false),
                }
                write_adam_state(w, opt);
            }
            w.usize(t.free.len());
            for s in &t.free {
                w.usize(*s);
            }
            w.usize(t.entries.len());
            for e in &t.entries {
                w.u64(e.raw_id);
                w.u64(e.state.frequency);
                w.usize(e.state.position);
                match e.slot {
                    Slot::Shared(l) => {
                        w.u8(0);
                        w.usize(l);
                    }
                    Slot::Unique(s) => {
                        w.u8(1);
                        w.usize(s);
                    }
                }
                e.state.history.write(w);
            }
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_tag(b"STOR")?;
        let dim = r.usize()?;
        let history_capacity = r.usize()?;
        let adam = read_adam_config(r)?;
        let seed = r.u64()?;
        let rng = read_rng(r)?;
        let read_table = |r: &mut Reader<'_>| -> Result<FieldTable> {
            let k = r.usize()?;
            let shared = r.f64s()?;
            check_ckpt(shared.len() == k * dim, "shared table size")?;
            let shared_opt = (0..k)
                .map(|_| read_adam_state(r))
                .collect::<Result<Vec<_>>>()?;
            let n_slots = r.len(1)?;
            let unique = r.f64s()?;
            check_ckpt(unique.len() == n_slots * dim, "unique table size")?;
            let mut unique_owner = Vec::with_capacity(n_slots);
            let mut unique_opt = Vec::with_capacity(n_slots);
            for _ in 0..n_slots {
                unique_owner.push(if r.bool()? { Some(r.u64()?) } else { None });
                unique_opt.push(read_adam_state(r)?);
            }
            let n_free = r.len(8)?;
            let free = (0..n_free).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let n_entries = r.len(8)?;
            let mut entries = Vec::with_capacity(n_entries);
            let mut index = HashMap::with_capacity(n_entries);
            for i in 0..n_entries {
                let raw_id = r.u64()?;
                let frequency = r.u64()?;
                let position = r.usize()?;
                let slot = match r.u8()? {
                    0 => Slot::Shared(r.usize()?),
                    1 => Slot::Unique(r.usize()?),
                    t => return Err(Error::Checkpoint(format!("bad slot tag {t}"))),
                };
                let history = LossHistory::read(r)?;
                index.insert(raw_id, i);
                entries.push(Entry {
                    raw_id,
                    state: IdState {
                        frequency,
                        position,
                        history,
                    },
                    slot,
                });
            }
            Ok(FieldTable {
                k,
                shared,
                shared_opt,
                unique,
                unique_opt,
                unique_owner,
                free,
                index,
                entries,
            })
        };
        let user = read_table(r)?;
        let item = read_table(r)?;
        let store = Self {
            dim,
            history_capacity,
            adam,
            seed,
            rng,
            tables: [user, item],
        };
        store.check_invariants().map_err(Error::Checkpoint)?;
        Ok(store)
    }

    /// Serializes the store alone in the checkpoint format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes)?;
        let store = Self::read(&mut r)?;
        r.finish()?;
        Ok(store)
    }
}

fn check_ckpt(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("inconsistent {what}")))
    }
}

pub(crate) fn write_adam_config(w: &mut Writer, c: &AdamConfig) {
    w.f64(c.lr);
    w.f64(c.beta1);
    w.f64(c.beta2);
    w.f64(c.eps);
}

pub(crate) fn read_adam_config(r: &mut Reader<'_>) -> Result<AdamConfig> {
    Ok(AdamConfig {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    })
}

pub(crate) fn write_adam_state(w: &mut Writer, s: &AdamState) {
    w.u64(s.step);
    w.f64s(&s.m);
    w.f64s(&s.v);
    write_adam_config(w, &s.config);
}

pub(crate) fn read_adam_state(r: &mut Reader<'_>) -> Result<AdamState> {
    let step = r.u64()?;
    let m = r.f64s()?;
    let v = r.f64s()?;
    check_ckpt(m.len() == v.len(), "adam moments")?;
    Ok(AdamState {
        step,
        m,
        v,
        config: read_adam_config(r)?,
    })
}
