use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use parking_lot::RwLock;

use super::{refresh_snapshot, KnowledgeItem, MemorySnapshot};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

/// Holder of the currently published snapshot.
///
/// Readers take an `Arc` to one snapshot and keep it for as long as they
/// need; a refresh swaps the pointer, so a reader sees either the old or the
/// new snapshot, never a mix. At most one refresh runs at a time.
pub struct SnapshotStore<T> {
    current: RwLock<Arc<MemorySnapshot<T>>>,
    refreshing: Arc<AtomicBool>,
}

impl<T: Scalar> SnapshotStore<T> {
    pub fn new(initial: MemorySnapshot<T>) -> Self {
        Self {
            current: RwLock::new(Arc::new(initial)),
            refreshing: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn current(&self) -> Arc<MemorySnapshot<T>> {
        self.current.read().clone()
    }

    pub fn version(&self) -> u32 {
        self.current.read().version()
    }

    /// Publishes `next`; its version must exceed the current one.
    pub fn publish(&self, next: Arc<MemorySnapshot<T>>) -> Result<()> {
        let mut cur = self.current.write();
        if next.version() <= cur.version() {
            return Err(Error::InvalidArgument(format!(
                "refusing to publish version {} over {}",
                next.version(),
                cur.version()
            )));
        }
        *cur = next;
        Ok(())
    }

    pub fn is_refreshing(&self) -> bool {
        self.refreshing.load(Ordering::Acquire)
    }

    /// Starts re-encoding `items` with a copy of `model` on a worker thread.
    pub fn spawn_refresh(&self, items: Arc<Vec<KnowledgeItem>>, model: Model<T>) -> Result<RefreshHandle<T>> {
        if self
            .refreshing
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(Error::InvalidArgument("a refresh is already running".into()));
        }
        let base = self.current();
        let flag = Arc::clone(&self.refreshing);
        let join = thread::spawn(move || {
            let out = refresh_snapshot(&base, &items, &model).map(Arc::new);
            flag.store(false, Ordering::Release);
            out
        });
        Ok(RefreshHandle { join })
    }

    /// Synchronous refresh and publish.
    pub fn refresh_now(&self, items: &[KnowledgeItem], model: &Model<T>) -> Result<Arc<MemorySnapshot<T>>> {
        let next = Arc::new(refresh_snapshot(&self.current(), items, model)?);
        self.publish(Arc::clone(&next))?;
        Ok(next)
    }
}

pub struct RefreshHandle<T> {
    join: JoinHandle<Result<Arc<MemorySnapshot<T>>>>,
}

impl<T: Scalar> RefreshHandle<T> {
    pub fn is_finished(&self) -> bool {
        self.join.is_finished()
    }

    /// Waits for the worker and publishes its snapshot.
    pub fn publish_into(self, store: &SnapshotStore<T>) -> Result<Arc<MemorySnapshot<T>>> {
        let next = self
            .join
            .join()
            .map_err(|_| Error::InvalidArgument("refresh worker panicked".into()))??;
        store.publish(Arc::clone(&next))?;
        Ok(next)
    }
}
