use std::sync::Mutex;
use std::time::{Duration, Instant};

pub const DEFAULT_RATE_PER_S: f64 = 2.0;

/// Token bucket shared by all in-flight requests of one provider.
/// Capacity is one second's worth of tokens (at least one).
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(rate_per_s: f64) -> Self {
        assert!(rate_per_s > 0.0, "rate must be positive");
        let capacity = rate_per_s.max(1.0);
        TokenBucket {
            rate: rate_per_s,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Takes one token at `now`, returning how long the caller must wait
    /// before its request may go out. The token is reserved either way.
    pub fn reserve_at(&self, now: Instant) -> Duration {
        let mut state = self.state.lock().unwrap();
        let (tokens, last) = *state;
        let elapsed = now.saturating_duration_since(last).as_secs_f64();
        let available = (tokens + elapsed * self.rate).min(self.capacity) - 1.0;
        *state = (available, now.max(last));
        if available >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-available / self.rate)
        }
    }

    pub fn acquire(&self) {
        let wait = self.reserve_at(Instant::now());
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paces_after_burst() {
        let bucket = TokenBucket::new(2.0);
        let t0 = Instant::now();
        assert_eq!(bucket.reserve_at(t0), Duration::ZERO);
        assert_eq!(bucket.reserve_at(t0), Duration::ZERO);
        assert_eq!(bucket.reserve_at(t0), Duration::from_millis(500));
        assert_eq!(bucket.reserve_at(t0), Duration::from_millis(1000));
    }

    #[test]
    fn refills_over_time() {
        let bucket = TokenBucket::new(2.0);
        let t0 = Instant::now();
        bucket.reserve_at(t0);
        bucket.reserve_at(t0);
        assert_eq!(bucket.reserve_at(t0 + Duration::from_millis(500)), Duration::ZERO);
        // never refills beyond capacity
        let later = t0 + Duration::from_secs(100);
        assert_eq!(bucket.reserve_at(later), Duration::ZERO);
        assert_eq!(bucket.reserve_at(later), Duration::ZERO);
        assert!(bucket.reserve_at(later) > Duration::ZERO);
    }
}
