//! Injectable time source so schedulers and throttles are testable.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
    /// Sleep for `d`, or until a fake clock is advanced past the deadline.
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Manually driven clock. `sleep` blocks until `advance` moves time far
/// enough, which makes schedule tests exact instead of ± one tick.
pub struct FakeClock {
    now: AtomicU64,
    gate: Mutex<()>,
    cv: Condvar,
}

impl FakeClock {
    pub fn new(start_ms: u64) -> Arc<Self> {
        Arc::new(FakeClock {
            now: AtomicU64::new(start_ms),
            gate: Mutex::new(()),
            cv: Condvar::new(),
        })
    }

    pub fn advance(&self, d: Duration) {
        self.now.fetch_add(d.as_millis() as u64, Ordering::SeqCst);
        let _g = self.gate.lock().unwrap();
        self.cv.notify_all();
    }

    pub fn set(&self, ms: u64) {
        self.now.store(ms, Ordering::SeqCst);
        let _g = self.gate.lock().unwrap();
        self.cv.notify_all();
    }
}

impl Clock for FakeClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn sleep(&self, d: Duration) {
        let deadline = self.now_ms() + d.as_millis() as u64;
        let mut g = self.gate.lock().unwrap();
        while self.now_ms() < deadline {
            let (guard, res) = self
                .cv
                .wait_timeout(g, Duration::from_millis(50))
                .unwrap();
            g = guard;
            // Real waiters (tests) advance us; the timeout only guards
            // against a forgotten advance deadlocking a test run.
            if res.timed_out() && self.now_ms() < deadline {
                continue;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fake_clock_orders_sleepers() {
        let c = FakeClock::new(1_000);
        assert_eq!(c.now_ms(), 1_000);
        let c2 = c.clone();
        let h = std::thread::spawn(move || {
            c2.sleep(Duration::from_millis(500));
            c2.now_ms()
        });
        std::thread::sleep(Duration::from_millis(20));
        c.advance(Duration::from_millis(500));
        assert_eq!(h.join().unwrap(), 1_500);
    }
}
