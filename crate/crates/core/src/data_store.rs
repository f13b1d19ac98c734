//! Single authoritative store for all simulation state.
//!
//! Every array is laid out row-major with the environment as the outermost
//! axis, so one environment's data is a contiguous run of each buffer. After
//! [`DataStore::lock`] the set of arrays is frozen and contents are only ever
//! mutated in place.

use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Names of the placeholders every runnable store must carry.
pub const OBSERVATIONS: &str = "observations";
pub const SAMPLED_ACTIONS: &str = "sampled_actions";
pub const REWARDS: &str = "rewards";
pub const DONE: &str = "done";

pub const CANONICAL_PLACEHOLDERS: [&str; 4] = [OBSERVATIONS, SAMPLED_ACTIONS, REWARDS, DONE];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("array `{0}` is already registered")]
    DuplicateName(String),
    #[error("array `{name}`: shape {shape:?} holds {expected} elements, got {actual}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("array `{name}`: {reason}")]
    InvalidShape { name: String, reason: String },
    #[error("store is locked; arrays can no longer be added")]
    Locked,
    #[error("store is not locked yet")]
    NotLocked,
    #[error("canonical placeholder `{0}` is not registered")]
    MissingPlaceholder(String),
    #[error("unknown array `{0}`")]
    UnknownName(String),
    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },
    #[error("array `{name}` holds {actual:?} elements, requested {requested:?}")]
    KindMismatch {
        name: String,
        actual: ElementKind,
        requested: ElementKind,
    },
    #[error("store dimensions must be positive (num_envs={num_envs}, num_agents={num_agents})")]
    EmptyStore { num_envs: usize, num_agents: usize },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Element type of an array: 32-bit real, 32-bit integer, or 8-bit boolean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Real,
    Integer,
    Boolean,
}

/// Declaration of one store array.
#[derive(Debug, Clone, PartialEq)]
pub struct ArraySpec {
    pub name: String,
    /// `shape[0]` is always `num_envs`; when `agent_axis` is set `shape[1]` is `num_agents`.
    pub shape: Vec<usize>,
    pub kind: ElementKind,
    pub agent_axis: bool,
    pub snapshot_on_reset: bool,
}

impl ArraySpec {
    /// An array with one row of `trailing` features per environment.
    pub fn per_env(name: impl Into<String>, kind: ElementKind, num_envs: usize, trailing: &[usize]) -> Self {
        let mut shape = vec![num_envs];
        shape.extend_from_slice(trailing);
        Self {
            name: name.into(),
            shape,
            kind,
            agent_axis: false,
            snapshot_on_reset: false,
        }
    }

    /// An array indexed `[env, agent, trailing...]`.
    pub fn per_agent(
        name: impl Into<String>,
        kind: ElementKind,
        num_envs: usize,
        num_agents: usize,
        trailing: &[usize],
    ) -> Self {
        let mut shape = vec![num_envs, num_agents];
        shape.extend_from_slice(trailing);
        Self {
            name: name.into(),
            shape,
            kind,
            agent_axis: true,
            snapshot_on_reset: false,
        }
    }

    pub fn with_snapshot(mut self) -> Self {
        self.snapshot_on_reset = true;
        self
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per environment row.
    pub fn env_stride(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Elements per agent row, if the array has an agent axis.
    pub fn agent_stride(&self) -> Option<usize> {
        self.agent_axis.then(|| self.shape[2..].iter().product())
    }
}

/// Typed backing storage of one array.
#[derive(Debug, Clone, PartialEq)]
pub enum Buffer {
    Real(Vec<f32>),
    Integer(Vec<i32>),
    Boolean(Vec<u8>),
}

impl Buffer {
    pub fn zeros(kind: ElementKind, len: usize) -> Self {
        match kind {
            ElementKind::Real => Buffer::Real(vec![0.0; len]),
            ElementKind::Integer => Buffer::Integer(vec![0; len]),
            ElementKind::Boolean => Buffer::Boolean(vec![0; len]),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Buffer::Real(v) => v.len(),
            Buffer::Integer(v) => v.len(),
            Buffer::Boolean(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ElementKind {
        match self {
            Buffer::Real(_) => ElementKind::Real,
            Buffer::Integer(_) => ElementKind::Integer,
            Buffer::Boolean(_) => ElementKind::Boolean,
        }
    }

    fn zero_range(&mut self, range: std::ops::Range<usize>) {
        match self {
            Buffer::Real(v) => v[range].fill(0.0),
            Buffer::Integer(v) => v[range].fill(0),
            Buffer::Boolean(v) => v[range].fill(0),
        }
    }

    fn copy_range_from(&mut self, src: &Buffer, range: std::ops::Range<usize>) {
        match (self, src) {
            (Buffer::Real(d), Buffer::Real(s)) => d[range.clone()].copy_from_slice(&s[range]),
            (Buffer::Integer(d), Buffer::Integer(s)) => d[range.clone()].copy_from_slice(&s[range]),
            (Buffer::Boolean(d), Buffer::Boolean(s)) => d[range.clone()].copy_from_slice(&s[range]),
            _ => unreachable!("snapshot kind always matches its array"),
        }
    }

    fn split_env_rows(&mut self, stride: usize) -> Vec<Slot<'_>> {
        match self {
            Buffer::Real(v) => v.chunks_mut(stride).map(Slot::Real).collect(),
            Buffer::Integer(v) => v.chunks_mut(stride).map(Slot::Integer).collect(),
            Buffer::Boolean(v) => v.chunks_mut(stride).map(Slot::Boolean).collect(),
        }
    }
}

impl From<Vec<f32>> for Buffer {
    fn from(v: Vec<f32>) -> Self {
        Buffer::Real(v)
    }
}

impl From<Vec<i32>> for Buffer {
    fn from(v: Vec<i32>) -> Self {
        Buffer::Integer(v)
    }
}

impl From<Vec<u8>> for Buffer {
    fn from(v: Vec<u8>) -> Self {
        Buffer::Boolean(v)
    }
}

/// A mutable per-environment row of one array, as handed to kernels.
#[derive(Debug)]
pub enum Slot<'a> {
    Real(&'a mut [f32]),
    Integer(&'a mut [i32]),
    Boolean(&'a mut [u8]),
}

/// Scalar types a store array may hold.
pub trait Element: Copy + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    const KIND: ElementKind;
    fn from_buffer(buffer: &Buffer) -> Option<&[Self]>;
    fn from_buffer_mut(buffer: &mut Buffer) -> Option<&mut [Self]>;
    fn from_slot<'s>(slot: &'s Slot<'_>) -> Option<&'s [Self]>;
    fn from_slot_mut<'s>(slot: &'s mut Slot<'_>) -> Option<&'s mut [Self]>;
}

macro_rules! impl_element {
    ($ty:ty, $variant:ident) => {
        impl Element for $ty {
            const KIND: ElementKind = ElementKind::$variant;

            fn from_buffer(buffer: &Buffer) -> Option<&[Self]> {
                match buffer {
                    Buffer::$variant(v) => Some(v),
                    _ => None,
                }
            }

            fn from_buffer_mut(buffer: &mut Buffer) -> Option<&mut [Self]> {
                match buffer {
                    Buffer::$variant(v) => Some(v),
                    _ => None,
                }
            }

            fn from_slot<'s>(slot: &'s Slot<'_>) -> Option<&'s [Self]> {
                match slot {
                    Slot::$variant(v) => Some(v),
                    _ => None,
                }
            }

            fn from_slot_mut<'s>(slot: &'s mut Slot<'_>) -> Option<&'s mut [Self]> {
                match slot {
                    Slot::$variant(v) => Some(v),
                    _ => None,
                }
            }
        }
    };
}

impl_element!(f32, Real);
impl_element!(i32, Integer);
impl_element!(u8, Boolean);

/// Stable handle to a registered array; valid for the lifetime of its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArrayId(pub(crate) usize);

impl ArrayId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    spec: ArraySpec,
    data: Buffer,
    snapshot: Option<Buffer>,
}

#[derive(Debug, Clone)]
pub struct DataStore {
    num_envs: usize,
    num_agents: usize,
    entries: IndexMap<String, Entry>,
    locked: bool,
}

impl DataStore {
    pub fn new(num_envs: usize, num_agents: usize) -> Result<Self> {
        if num_envs == 0 || num_agents == 0 {
            return Err(StoreError::EmptyStore { num_envs, num_agents });
        }
        Ok(Self {
            num_envs,
            num_agents,
            entries: IndexMap::new(),
            locked: false,
        })
    }

    pub fn num_envs(&self) -> usize {
        self.num_envs
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn is_locked(&self) -> bool {
        self.locked
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers an array with its initial contents. Arrays flagged
    /// `snapshot_on_reset` keep a private copy of `initial`.
    pub fn register(&mut self, spec: ArraySpec, initial: impl Into<Buffer>) -> Result<ArrayId> {
        if self.locked {
            return Err(StoreError::Locked);
        }
        if self.entries.contains_key(&spec.name) {
            return Err(StoreError::DuplicateName(spec.name));
        }
        self.check_shape(&spec)?;
        let initial = initial.into();
        if initial.kind() != spec.kind {
            return Err(StoreError::KindMismatch {
                name: spec.name,
                actual: initial.kind(),
                requested: spec.kind,
            });
        }
        if initial.len() != spec.len() {
            return Err(StoreError::ShapeMismatch {
                expected: spec.len(),
                actual: initial.len(),
                name: spec.name,
                shape: spec.shape,
            });
        }
        let snapshot = spec.snapshot_on_reset.then(|| initial.clone());
        let (index, _) = self.entries.insert_full(
            spec.name.clone(),
            Entry {
                spec,
                data: initial,
                snapshot,
            },
        );
        Ok(ArrayId(index))
    }

    /// Registers a zero-filled array.
    pub fn register_zeros(&mut self, spec: ArraySpec) -> Result<ArrayId> {
        let buffer = Buffer::zeros(spec.kind, spec.len());
        self.register(spec, buffer)
    }

    fn check_shape(&self, spec: &ArraySpec) -> Result<()> {
        let invalid = |reason: String| StoreError::InvalidShape {
            name: spec.name.clone(),
            reason,
        };
        if spec.shape.first() != Some(&self.num_envs) {
            return Err(invalid(format!(
                "outermost dimension must equal num_envs={}",
                self.num_envs
            )));
        }
        if spec.agent_axis && spec.shape.get(1) != Some(&self.num_agents) {
            return Err(invalid(format!(
                "agent axis must equal num_agents={}",
                self.num_agents
            )));
        }
        if spec.shape.contains(&0) {
            return Err(invalid("zero-sized dimension".into()));
        }
        Ok(())
    }

    /// Freezes the set of arrays. Requires every canonical placeholder.
    pub fn lock(&mut self) -> Result<()> {
        for name in CANONICAL_PLACEHOLDERS {
            if !self.entries.contains_key(name) {
                return Err(StoreError::MissingPlaceholder(name.to_string()));
            }
        }
        self.locked = true;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Result<ArrayId> {
        self.entries
            .get_index_of(name)
            .map(ArrayId)
            .ok_or_else(|| StoreError::UnknownName(name.to_string()))
    }

    pub fn spec(&self, id: ArrayId) -> &ArraySpec {
        &self.entries[id.0].spec
    }

    pub fn spec_by_name(&self, name: &str) -> Result<&ArraySpec> {
        Ok(self.spec(self.id(name)?))
    }

    pub fn specs(&self) -> impl Iterator<Item = &ArraySpec> {
        self.entries.values().map(|e| &e.spec)
    }

    pub fn buffer(&self, id: ArrayId) -> &Buffer {
        &self.entries[id.0].data
    }

    fn typed<T: Element>(&self, id: ArrayId) -> Result<&[T]> {
        let entry = &self.entries[id.0];
        T::from_buffer(&entry.data).ok_or_else(|| StoreError::KindMismatch {
            name: entry.spec.name.clone(),
            actual: entry.spec.kind,
            requested: T::KIND,
        })
    }

    fn typed_mut<T: Element>(&mut self, id: ArrayId) -> Result<&mut [T]> {
        let entry = &mut self.entries[id.0];
        let kind = entry.spec.kind;
        let name = &entry.spec.name;
        match T::from_buffer_mut(&mut entry.data) {
            Some(v) => Ok(v),
            None => Err(StoreError::KindMismatch {
                name: name.clone(),
                actual: kind,
                requested: T::KIND,
            }),
        }
    }

    /// Whole flat buffer of an array.
    pub fn array<T: Element>(&self, name: &str) -> Result<&[T]> {
        self.typed(self.id(name)?)
    }

    pub fn array_mut<T: Element>(&mut self, name: &str) -> Result<&mut [T]> {
        let id = self.id(name)?;
        self.typed_mut(id)
    }

    pub fn array_by_id<T: Element>(&self, id: ArrayId) -> Result<&[T]> {
        self.typed(id)
    }

    pub fn array_by_id_mut<T: Element>(&mut self, id: ArrayId) -> Result<&mut [T]> {
        self.typed_mut(id)
    }

    /// In-place view of one environment's row of `name`.
    pub fn env_slice<T: Element>(&mut self, name: &str, env_id: usize) -> Result<&mut [T]> {
        if !self.locked {
            return Err(StoreError::NotLocked);
        }
        if env_id >= self.num_envs {
            return Err(StoreError::IndexOutOfRange {
                index: env_id,
                limit: self.num_envs,
            });
        }
        let id = self.id(name)?;
        let stride = self.spec(id).env_stride();
        let data = self.typed_mut::<T>(id)?;
        Ok(&mut data[env_id * stride..(env_id + 1) * stride])
    }

    fn check_envs(&self, env_ids: &[usize]) -> Result<()> {
        match env_ids.iter().find(|&&e| e >= self.num_envs) {
            Some(&index) => Err(StoreError::IndexOutOfRange {
                index,
                limit: self.num_envs,
            }),
            None => Ok(()),
        }
    }

    /// Copies the registration-time rows of every snapshot array back for `env_ids`.
    pub fn restore_snapshot(&mut self, env_ids: &[usize]) -> Result<()> {
        if !self.locked {
            return Err(StoreError::NotLocked);
        }
        self.check_envs(env_ids)?;
        for entry in self.entries.values_mut() {
            let Some(snapshot) = &entry.snapshot else {
                continue;
            };
            let stride = entry.spec.env_stride();
            for &env in env_ids {
                entry
                    .data
                    .copy_range_from(snapshot, env * stride..(env + 1) * stride);
            }
        }
        Ok(())
    }

    /// Zero-fills the rows of `env_ids` in one array.
    pub fn zero_envs(&mut self, id: ArrayId, env_ids: &[usize]) -> Result<()> {
        self.check_envs(env_ids)?;
        let entry = &mut self.entries[id.0];
        let stride = entry.spec.env_stride();
        for &env in env_ids {
            entry.data.zero_range(env * stride..(env + 1) * stride);
        }
        Ok(())
    }

    /// Splits every array into per-environment rows. The returned views
    /// alias the store and are pairwise disjoint, so they can be handed to
    /// different workers.
    pub fn env_views(&mut self) -> Vec<EnvView<'_>> {
        let num_envs = self.num_envs;
        let num_agents = self.num_agents;
        let arrays = self.entries.len();
        let mut views: Vec<EnvView<'_>> = (0..num_envs)
            .map(|env_id| EnvView {
                env_id,
                num_agents,
                slots: Vec::with_capacity(arrays),
            })
            .collect();
        for entry in self.entries.values_mut() {
            let stride = entry.spec.env_stride();
            for (view, slot) in views.iter_mut().zip(entry.data.split_env_rows(stride)) {
                view.slots.push(slot);
            }
        }
        views
    }

    /// Writes one array as CSV: one row per environment, features flattened.
    pub fn write_csv<W: Write>(&self, name: &str, out: W) -> Result<(), std::io::Error> {
        let id = self
            .id(name)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::NotFound, e))?;
        let entry = &self.entries[id.0];
        let stride = entry.spec.env_stride();
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["env".to_string()];
        header.extend((0..stride).map(|i| format!("{name}_{i}")));
        writer.write_record(&header)?;
        for env in 0..self.num_envs {
            let range = env * stride..(env + 1) * stride;
            let mut row = vec![env.to_string()];
            match &entry.data {
                Buffer::Real(v) => row.extend(v[range].iter().map(f32::to_string)),
                Buffer::Integer(v) => row.extend(v[range].iter().map(i32::to_string)),
                Buffer::Boolean(v) => row.extend(v[range].iter().map(u8::to_string)),
            }
            writer.write_record(&row)?;
        }
        writer.flush()
    }
}

/// Shared read access to per-environment rows.
pub trait ArrayRead {
    fn read<T: Element>(&self, id: ArrayId) -> &[T];
}

impl ArrayRead for EnvView<'_> {
    fn read<T: Element>(&self, id: ArrayId) -> &[T] {
        self.get(id)
    }
}

impl ArrayRead for EnvReader<'_, '_> {
    fn read<T: Element>(&self, id: ArrayId) -> &[T] {
        self.get(id)
    }
}

/// All arrays of one environment, borrowed mutably from the store.
#[derive(Debug)]
pub struct EnvView<'a> {
    env_id: usize,
    num_agents: usize,
    slots: Vec<Slot<'a>>,
}

impl<'a> EnvView<'a> {
    pub fn env_id(&self) -> usize {
        self.env_id
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    /// Panics when `T` does not match the array's element kind.
    pub fn get<T: Element>(&self, id: ArrayId) -> &[T] {
        T::from_slot(&self.slots[id.0]).expect("element kind mismatch")
    }

    pub fn get_mut<T: Element>(&mut self, id: ArrayId) -> &mut [T] {
        T::from_slot_mut(&mut self.slots[id.0]).expect("element kind mismatch")
    }

    /// Mutable access to one array while reading all others.
    pub fn split_mut<T: Element>(&mut self, id: ArrayId) -> (&mut [T], EnvReader<'_, 'a>) {
        let (left, rest) = self.slots.split_at_mut(id.0);
        let (target, right) = rest.split_first_mut().expect("array id out of range");
        let slice = T::from_slot_mut(target).expect("element kind mismatch");
        (
            slice,
            EnvReader {
                left,
                right,
                hole: id.0,
            },
        )
    }
}

/// Read-only access to an [`EnvView`] minus the array borrowed by [`EnvView::split_mut`].
#[derive(Debug)]
pub struct EnvReader<'v, 'a> {
    left: &'v [Slot<'a>],
    right: &'v [Slot<'a>],
    hole: usize,
}

impl EnvReader<'_, '_> {
    pub fn get<T: Element>(&self, id: ArrayId) -> &[T] {
        let slot = match id.0.cmp(&self.hole) {
            std::cmp::Ordering::Less => &self.left[id.0],
            std::cmp::Ordering::Greater => &self.right[id.0 - self.hole - 1],
            std::cmp::Ordering::Equal => panic!("array is mutably borrowed"),
        };
        T::from_slot(slot).expect("element kind mismatch")
    }
}
