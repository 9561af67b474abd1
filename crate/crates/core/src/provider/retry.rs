use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;

use super::ProviderError;

/// Exponential backoff with full jitter.
///
/// Attempt `n` (zero-based) that fails retryably waits a uniform random
/// duration in `[0, min(cap, base * factor^n)]` before the next attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub base: Duration,
    pub factor: f64,
    pub cap: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base: Duration::from_secs(1),
            factor: 2.0,
            cap: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Upper bound of the wait after failed attempt `n`.
    pub fn ceiling(&self, n: u32) -> Duration {
        let scaled = self.base.as_secs_f64() * self.factor.powi(n as i32);
        Duration::from_secs_f64(scaled.min(self.cap.as_secs_f64()))
    }

    pub fn backoff(&self, n: u32, rng: &mut impl Rng) -> Duration {
        let ceiling = self.ceiling(n).as_millis() as u64;
        Duration::from_millis(rng.random_range(0..=ceiling))
    }

    /// Calls `op` until it succeeds, fails non-retryably, or attempts run
    /// out. Returns the value and the number of attempts used.
    pub fn run<T>(
        &self,
        sleeper: &dyn Sleeper,
        mut op: impl FnMut(u32) -> Result<T, ProviderError>,
    ) -> Result<(T, u32), ProviderError> {
        let max = self.max_attempts.max(1);
        let mut rng = rand::rng();
        let mut attempt = 0;
        loop {
            match op(attempt) {
                Ok(v) => return Ok((v, attempt + 1)),
                Err(e) if !e.is_retryable() => return Err(e),
                Err(e) if attempt + 1 >= max => {
                    return Err(ProviderError::RetriesExhausted {
                        attempts: attempt + 1,
                        last: Box::new(e),
                    })
                }
                Err(_) => {
                    sleeper.sleep(self.backoff(attempt, &mut rng));
                    attempt += 1;
                }
            }
        }
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, duration: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Records requested sleeps without sleeping.
#[derive(Debug, Default)]
pub struct RecordingSleeper {
    slept: Mutex<Vec<Duration>>,
}

impl RecordingSleeper {
    pub fn sleeps(&self) -> Vec<Duration> {
        self.slept.lock().unwrap().clone()
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, duration: Duration) {
        self.slept.lock().unwrap().push(duration);
    }
}
