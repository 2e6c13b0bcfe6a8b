//! Integer realizations of fractional rate ratios.

/// Splits a `num / den` ratio into integer counts per event so that the
/// running total after `k` events is always `floor(k * num / den)`.
///
/// ```
/// use racelab::rates::RateDivider;
/// let mut learner = RateDivider::new(32, 10);
/// let counts: Vec<u64> = (0..5).map(|_| learner.next_count()).collect();
/// assert_eq!(counts, [3, 3, 3, 3, 4]);
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RateDivider {
    num: u64,
    den: u64,
    events: u64,
}

impl RateDivider {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "rate divider denominator must be positive");
        Self { num, den, events: 0 }
    }

    /// Count for the next event.
    pub fn next_count(&mut self) -> u64 {
        let before = self.events * self.num / self.den;
        self.events += 1;
        self.events * self.num / self.den - before
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn total(&self) -> u64 {
        self.events * self.num / self.den
    }
}
