use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

/// Time source shared by the runtime, the retry loop and the scripted backend.
///
/// `now` is measured from the unix epoch so timestamps written into traces are
/// wall-clock values. `sleep` lets a fake clock advance instantly.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);

    fn now_millis(&self) -> u64 {
        self.now().as_millis() as u64
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Manually driven clock. Sleeping advances it and is recorded so tests can
/// inspect back-off schedules.
#[derive(Debug, Clone)]
pub struct FakeClock {
    inner: Arc<Mutex<FakeState>>,
}

#[derive(Debug)]
struct FakeState {
    now: Duration,
    sleeps: Vec<Duration>,
}

/// 2025-01-01T00:00:00Z, the origin used by `--fixed-clock`.
pub const FIXED_EPOCH: Duration = Duration::from_secs(1_735_689_600);

impl FakeClock {
    pub fn new(start: Duration) -> Self {
        Self {
            inner: Arc::new(Mutex::new(FakeState {
                now: start,
                sleeps: Vec::new(),
            })),
        }
    }

    pub fn fixed() -> Self {
        Self::new(FIXED_EPOCH)
    }

    pub fn advance(&self, d: Duration) {
        self.inner.lock().unwrap().now += d;
    }

    /// Every duration passed to `sleep`, in call order.
    pub fn sleeps(&self) -> Vec<Duration> {
        self.inner.lock().unwrap().sleeps.clone()
    }
}

impl Default for FakeClock {
    fn default() -> Self {
        Self::fixed()
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        self.inner.lock().unwrap().now
    }

    fn sleep(&self, d: Duration) {
        let mut state = self.inner.lock().unwrap();
        state.now += d;
        state.sleeps.push(d);
    }
}
