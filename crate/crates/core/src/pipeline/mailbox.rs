//! Shared state between the backbone and compensation workers.

use crate::error::Error;
use crate::ids::WindowId;
use crate::numerics::DenseMatrix;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // a worker that panicked while holding a lock has already been reported
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Level-triggered one-shot signal.
#[derive(Default)]
pub struct Event {
    flag: Mutex<bool>,
    cv: Condvar,
}

/// Why a wait returned without the event being set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaitError {
    Timeout,
    Shutdown,
}

impl Event {
    pub fn set(&self) {
        *lock(&self.flag) = true;
        self.cv.notify_all();
    }

    pub fn clear(&self) {
        *lock(&self.flag) = false;
    }

    pub fn is_set(&self) -> bool {
        *lock(&self.flag)
    }

    fn wake(&self) {
        let _g = lock(&self.flag);
        self.cv.notify_all();
    }

    /// Blocks until set, `shutdown` is raised or `timeout` elapses.
    pub fn wait(&self, shutdown: &AtomicBool, timeout: Option<Duration>) -> Result<(), WaitError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut g = lock(&self.flag);
        loop {
            if *g {
                return Ok(());
            }
            if shutdown.load(Ordering::SeqCst) {
                return Err(WaitError::Shutdown);
            }
            g = match deadline {
                None => self.cv.wait(g).unwrap_or_else(|e| e.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(WaitError::Timeout);
                    }
                    self.cv.wait_timeout(g, d - now).unwrap_or_else(|e| e.into_inner()).0
                }
            };
        }
    }
}

/// What the backbone hands over for one window.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// One input per member group (dense layer or routed expert).
    Groups(Vec<(Option<usize>, DenseMatrix)>),
    /// Full layer input; the compensator routes it to experts itself.
    Routed(DenseMatrix),
    /// Quantized `up` and `gate` outputs per activated expert, from which the
    /// compensator rebuilds the DOWN-window input.
    Gated(Vec<(usize, DenseMatrix, DenseMatrix)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub generation: u64,
    pub window: WindowId,
    pub payload: Payload,
}

/// Per group, per window slot: the correction, or `None` for skipped slots.
pub type Corrections = Vec<Vec<Option<DenseMatrix>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ResultMsg {
    pub generation: u64,
    pub corrections: Corrections,
}

/// Exchange counters for protocol checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MailboxStats {
    pub starts: u64,
    pub dones: u64,
    pub activation_writes: u64,
    pub result_writes: u64,
}

#[derive(Default)]
pub struct Mailbox {
    pub start: Event,
    pub done: Event,
    activation: Mutex<Option<Activation>>,
    result: Mutex<Option<ResultMsg>>,
    shutdown: AtomicBool,
    fault: Mutex<Option<Error>>,
    starts: AtomicU64,
    dones: AtomicU64,
    activation_writes: AtomicU64,
    result_writes: AtomicU64,
}

impl Mailbox {
    pub fn write_activation(&self, a: Activation) {
        *lock(&self.activation) = Some(a);
        self.activation_writes.fetch_add(1, Ordering::SeqCst);
    }

    pub fn take_activation(&self) -> Option<Activation> {
        lock(&self.activation).take()
    }

    pub fn write_result(&self, r: ResultMsg) {
        *lock(&self.result) = Some(r);
        self.result_writes.fetch_add(1, Ordering::SeqCst);
    }

    pub fn take_result(&self) -> Option<ResultMsg> {
        lock(&self.result).take()
    }

    pub fn raise_start(&self) {
        self.starts.fetch_add(1, Ordering::SeqCst);
        self.start.set();
    }

    pub fn raise_done(&self) {
        self.dones.fetch_add(1, Ordering::SeqCst);
        self.done.set();
    }

    pub fn shutdown_flag(&self) -> &AtomicBool {
        &self.shutdown
    }

    pub fn is_shutdown(&self) -> bool {
        self.shutdown.load(Ordering::SeqCst)
    }

    /// Stops both workers, waking any blocked wait.
    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
        self.start.wake();
        self.done.wake();
    }

    /// Records the first fault and shuts down.
    pub fn fail(&self, e: Error) {
        lock(&self.fault).get_or_insert(e);
        self.shutdown();
    }

    pub fn fault(&self) -> Option<Error> {
        lock(&self.fault).clone()
    }

    pub fn stats(&self) -> MailboxStats {
        MailboxStats {
            starts: self.starts.load(Ordering::SeqCst),
            dones: self.dones.load(Ordering::SeqCst),
            activation_writes: self.activation_writes.load(Ordering::SeqCst),
            result_writes: self.result_writes.load(Ordering::SeqCst),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn wait_outcomes() {
        let e = Event::default();
        let stop = AtomicBool::new(false);
        assert_eq!(e.wait(&stop, Some(Duration::from_millis(5))), Err(WaitError::Timeout));
        e.set();
        assert_eq!(e.wait(&stop, Some(Duration::from_millis(5))), Ok(()));
        e.clear();
        stop.store(true, Ordering::SeqCst);
        assert_eq!(e.wait(&stop, None), Err(WaitError::Shutdown));
    }

    #[test]
    fn shutdown_wakes_a_blocked_waiter() {
        let mb = Arc::new(Mailbox::default());
        let m2 = Arc::clone(&mb);
        let h = std::thread::spawn(move || m2.start.wait(m2.shutdown_flag(), None));
        std::thread::sleep(Duration::from_millis(20));
        mb.shutdown();
        assert_eq!(h.join().unwrap(), Err(WaitError::Shutdown));
    }

    #[test]
    fn first_fault_wins() {
        let mb = Mailbox::default();
        mb.fail(Error::Config("a".into()));
        mb.fail(Error::Config("b".into()));
        assert_eq!(mb.fault(), Some(Error::Config("a".into())));
        assert!(mb.is_shutdown());
    }
}
