//! Per-class bounded FIFO queues of paired (cls, loc) feature snapshots.
//!
//! The bank is the single source of class prototypes (mean features) and
//! per-dimension variances for all three distillers. Entries are detached
//! value snapshots taken at enqueue time; gradients never flow through
//! stored features or anything derived from them.

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

use crate::numerics::{euclidean_distance, FeatureVector};

/// Foreground class index. Indices `0..n_base` are base classes,
/// `n_base..n_base+n_novel` are novel classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(pub usize);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Whether a class has abundant (base) or K-shot (novel) supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassRole {
    Base,
    Novel,
}

/// Which decoupled feature space a query refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSpace {
    Cls,
    Loc,
}

impl fmt::Display for FeatureSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSpace::Cls => write!(f, "cls"),
            FeatureSpace::Loc => write!(f, "loc"),
        }
    }
}

/// One stored snapshot: the same proposal's feature in both spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub cls_feature: FeatureVector,
    pub loc_feature: FeatureVector,
}

#[derive(Debug, Error, PartialEq)]
pub enum BankError {
    #[error("dimension mismatch in {space} space: expected {expected}, got {got}")]
    DimensionMismatch {
        space: FeatureSpace,
        expected: usize,
        got: usize,
    },
    #[error("unknown class {0}")]
    UnknownClass(ClassId),
    #[error("class {0} has an empty queue")]
    EmptyQueue(ClassId),
    #[error("class {class} has {have} entries; variance needs at least 2")]
    InsufficientSamples { class: ClassId, have: usize },
    #[error("class {0} is not a novel class")]
    NotNovelClass(ClassId),
    #[error("need {need} base classes with entries, only {have} available")]
    InsufficientBaseClasses { need: usize, have: usize },
}

/// Bounded FIFO feature store, one queue per foreground class.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    d_cls: usize,
    d_loc: usize,
    roles: Vec<ClassRole>,
    queues: Vec<VecDeque<BankEntry>>,
}

impl MemoryBank {
    /// Bank for `n_base + n_novel` classes with per-queue `capacity`.
    pub fn new(n_base: usize, n_novel: usize, capacity: usize, d_cls: usize, d_loc: usize) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        let mut roles = vec![ClassRole::Base; n_base];
        roles.extend(std::iter::repeat(ClassRole::Novel).take(n_novel));
        let queues = roles.iter().map(|_| VecDeque::new()).collect();
        MemoryBank {
            capacity,
            d_cls,
            d_loc,
            roles,
            queues,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_classes(&self) -> usize {
        self.roles.len()
    }

    pub fn role(&self, c: ClassId) -> Result<ClassRole, BankError> {
        self.roles
            .get(c.0)
            .copied()
            .ok_or(BankError::UnknownClass(c))
    }

    pub fn len(&self, c: ClassId) -> Result<usize, BankError> {
        Ok(self.queue(c)?.len())
    }

    pub fn is_empty(&self, c: ClassId) -> Result<bool, BankError> {
        Ok(self.queue(c)?.is_empty())
    }

    /// Class ids whose role is `Base`, ascending.
    pub fn base_classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes_with_role(ClassRole::Base)
    }

    /// Class ids whose role is `Novel`, ascending.
    pub fn novel_classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes_with_role(ClassRole::Novel)
    }

    fn classes_with_role(&self, role: ClassRole) -> impl Iterator<Item = ClassId> + '_ {
        self.roles
            .iter()
            .enumerate()
            .filter(move |(_, r)| **r == role)
            .map(|(i, _)| ClassId(i))
    }

    fn queue(&self, c: ClassId) -> Result<&VecDeque<BankEntry>, BankError> {
        self.queues.get(c.0).ok_or(BankError::UnknownClass(c))
    }

    /// Append `entry` to class `c`, dequeuing the oldest entries once the
    /// queue exceeds its capacity.
    pub fn enqueue(&mut self, c: ClassId, entry: BankEntry) -> Result<(), BankError> {
        if entry.cls_feature.len() != self.d_cls {
            return Err(BankError::DimensionMismatch {
                space: FeatureSpace::Cls,
                expected: self.d_cls,
                got: entry.cls_feature.len(),
            });
        }
        if entry.loc_feature.len() != self.d_loc {
            return Err(BankError::DimensionMismatch {
                space: FeatureSpace::Loc,
                expected: self.d_loc,
                got: entry.loc_feature.len(),
            });
        }
        let capacity = self.capacity;
        let queue = self.queues.get_mut(c.0).ok_or(BankError::UnknownClass(c))?;
        queue.push_back(entry);
        while queue.len() > capacity {
            queue.pop_front();
        }
        Ok(())
    }

    /// Mean feature of class `c` over its current queue, in `space`.
    pub fn prototype(&self, c: ClassId, space: FeatureSpace) -> Result<FeatureVector, BankError> {
        let queue = self.queue(c)?;
        if queue.is_empty() {
            return Err(BankError::EmptyQueue(c));
        }
        let dim = self.dim(space);
        let mut mean = vec![0.0; dim];
        for entry in queue {
            for (m, x) in mean.iter_mut().zip(entry.space(space)) {
                *m += x;
            }
        }
        let n = queue.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        Ok(mean)
    }

    /// Per-dimension population variance (divide by n) of class `c` in `space`.
    pub fn variance(&self, c: ClassId, space: FeatureSpace) -> Result<FeatureVector, BankError> {
        let queue = self.queue(c)?;
        if queue.len() < 2 {
            return Err(BankError::InsufficientSamples {
                class: c,
                have: queue.len(),
            });
        }
        let mean = self.prototype(c, space)?;
        let mut var = vec![0.0; mean.len()];
        for entry in queue {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(entry.space(space)) {
                let d = x - m;
                *v += d * d;
            }
        }
        let n = queue.len() as f64;
        for v in &mut var {
            *v /= n;
        }
        Ok(var)
    }

    /// The `k` base classes whose cls-space prototypes are nearest (Euclidean)
    /// to novel class `c`'s prototype, ascending by distance. Ties break by
    /// ascending class index so runs are reproducible.
    pub fn top_k_closest_base(&self, c: ClassId, k: usize) -> Result<Vec<ClassId>, BankError> {
        PrototypeSet::from_bank(self, FeatureSpace::Cls).top_k_closest_base(c, k)
    }

    fn dim(&self, space: FeatureSpace) -> usize {
        match space {
            FeatureSpace::Cls => self.d_cls,
            FeatureSpace::Loc => self.d_loc,
        }
    }

    /// Debug dump: one line per stored feature,
    /// `<class> <space> <v0> <v1> ...`, oldest first, after a header line.
    pub fn dump<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(
            out,
            "# bank v1 classes={} capacity={} d_cls={} d_loc={}",
            self.n_classes(),
            self.capacity,
            self.d_cls,
            self.d_loc
        )?;
        for (i, queue) in self.queues.iter().enumerate() {
            for entry in queue {
                for (space, feat) in [
                    (FeatureSpace::Cls, &entry.cls_feature),
                    (FeatureSpace::Loc, &entry.loc_feature),
                ] {
                    write!(out, "{i} {space}")?;
                    for x in feat {
                        write!(out, " {x}")?;
                    }
                    writeln!(out)?;
                }
            }
        }
        Ok(())
    }
}

impl BankEntry {
    fn space(&self, space: FeatureSpace) -> &[f64] {
        match space {
            FeatureSpace::Cls => &self.cls_feature,
            FeatureSpace::Loc => &self.loc_feature,
        }
    }
}

/// Snapshot of every class prototype in one feature space.
///
/// The trainer builds one per iteration so that a batch of soft-label and
/// calibration queries shares a single pass over the queues. `None` marks a
/// class whose queue was empty at snapshot time.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    space: FeatureSpace,
    roles: Vec<ClassRole>,
    protos: Vec<Option<FeatureVector>>,
}

impl PrototypeSet {
    pub fn from_bank(bank: &MemoryBank, space: FeatureSpace) -> Self {
        let protos = (0..bank.n_classes())
            .map(|i| bank.prototype(ClassId(i), space).ok())
            .collect();
        PrototypeSet {
            space,
            roles: bank.roles.clone(),
            protos,
        }
    }

    /// Assemble a set directly from prototypes (used by tests).
    pub fn from_parts(
        space: FeatureSpace,
        roles: Vec<ClassRole>,
        protos: Vec<Option<FeatureVector>>,
    ) -> Self {
        assert_eq!(roles.len(), protos.len());
        PrototypeSet {
            space,
            roles,
            protos,
        }
    }

    pub fn space(&self) -> FeatureSpace {
        self.space
    }

    pub fn n_classes(&self) -> usize {
        self.roles.len()
    }

    pub fn role(&self, c: ClassId) -> Result<ClassRole, BankError> {
        self.roles
            .get(c.0)
            .copied()
            .ok_or(BankError::UnknownClass(c))
    }

    /// Prototype of class `c`, or `EmptyQueue` if it was unavailable.
    pub fn get(&self, c: ClassId) -> Result<&FeatureVector, BankError> {
        self.protos
            .get(c.0)
            .ok_or(BankError::UnknownClass(c))?
            .as_ref()
            .ok_or(BankError::EmptyQueue(c))
    }

    /// True when every novel-class prototype is available.
    pub fn all_novel_present(&self) -> bool {
        self.roles
            .iter()
            .zip(&self.protos)
            .all(|(r, p)| *r != ClassRole::Novel || p.is_some())
    }

    /// Nearest base classes to novel class `c` by prototype distance,
    /// ascending, ties broken by ascending class index.
    pub fn top_k_closest_base(&self, c: ClassId, k: usize) -> Result<Vec<ClassId>, BankError> {
        if self.role(c)? != ClassRole::Novel {
            return Err(BankError::NotNovelClass(c));
        }
        let target = self.get(c)?;
        let mut candidates: Vec<(f64, ClassId)> = Vec::new();
        for (i, (role, proto)) in self.roles.iter().zip(&self.protos).enumerate() {
            if *role == ClassRole::Base {
                if let Some(p) = proto {
                    candidates.push((euclidean_distance(target, p), ClassId(i)));
                }
            }
        }
        if candidates.len() < k {
            return Err(BankError::InsufficientBaseClasses {
                need: k,
                have: candidates.len(),
            });
        }
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        Ok(candidates.into_iter().take(k).map(|(_, c)| c).collect())
    }
}
