use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use crate::model::Event;

/// An event bound for one function, as held in a worker queue.
#[derive(Clone, Debug)]
pub struct Task {
    pub event: Event,
    pub function: usize,
    /// When the event's chain entered this node; inherited by emissions.
    pub origin: Instant,
}

/// FIFO of tasks owned by one worker. Many producers, one consumer.
pub struct WorkerQueue {
    items: Mutex<VecDeque<Task>>,
    ready: Condvar,
    len: AtomicUsize,
}

impl Default for WorkerQueue {
    fn default() -> Self {
        Self::new()
    }
}

impl WorkerQueue {
    pub fn new() -> Self {
        Self {
            items: Mutex::new(VecDeque::new()),
            ready: Condvar::new(),
            len: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.len.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&self, task: Task) {
        let mut q = self.items.lock();
        q.push_back(task);
        self.len.store(q.len(), Ordering::Release);
        drop(q);
        self.ready.notify_one();
    }

    /// Pops the next task, waiting up to `wait` for one to arrive.
    pub fn pop_timeout(&self, wait: Duration) -> Option<Task> {
        let deadline = Instant::now() + wait;
        let mut q = self.items.lock();
        loop {
            if let Some(t) = q.pop_front() {
                self.len.store(q.len(), Ordering::Release);
                return Some(t);
            }
            if self.ready.wait_until(&mut q, deadline).timed_out() {
                return None;
            }
        }
    }

    pub fn wake(&self) {
        self.ready.notify_all();
    }
}
