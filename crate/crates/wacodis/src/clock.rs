//! Injectable time source for everything that schedules or timestamps.
//!
//! All schedule arithmetic in the system runs against a [`Clock`] so that
//! cron fires, temporal coverage windows and retry delays can be driven
//! deterministically from tests and demos. The simulated variant only moves
//! when [`Clock::advance`] is called.

use std::pin::Pin;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use tokio::sync::Notify;

/// A shared, cloneable time source. `Real` follows the system clock,
/// `Simulated` starts at a configured instant and advances manually.
#[derive(Clone)]
pub enum Clock {
    Real,
    Simulated(Arc<SimulatedClock>),
}

pub struct SimulatedClock {
    now: Mutex<DateTime<Utc>>,
    tick: Notify,
}

impl Clock {
    pub fn real() -> Self {
        Clock::Real
    }

    pub fn simulated(start: DateTime<Utc>) -> Self {
        Clock::Simulated(Arc::new(SimulatedClock {
            now: Mutex::new(start),
            tick: Notify::new(),
        }))
    }

    pub fn is_simulated(&self) -> bool {
        matches!(self, Clock::Simulated(_))
    }

    pub fn now(&self) -> DateTime<Utc> {
        match self {
            Clock::Real => Utc::now(),
            Clock::Simulated(sim) => *sim.now.lock().expect("clock poisoned"),
        }
    }

    /// Resolves once the clock reaches `deadline`. On the simulated clock this
    /// waits for an `advance` call to move time far enough.
    pub async fn wait_until(&self, deadline: DateTime<Utc>) {
        match self {
            Clock::Real => {
                let remaining = deadline - Utc::now();
                if let Ok(d) = remaining.to_std() {
                    tokio::time::sleep(d).await;
                }
            }
            Clock::Simulated(sim) => {
                loop {
                    // Register interest before re-checking so an advance
                    // between the check and the await is not lost.
                    let mut notified = Box::pin(sim.tick.notified());
                    Pin::as_mut(&mut notified).enable();
                    if *sim.now.lock().expect("clock poisoned") >= deadline {
                        return;
                    }
                    notified.await;
                }
            }
        }
    }

    pub async fn sleep(&self, duration: Duration) {
        let deadline = self.now() + duration;
        self.wait_until(deadline).await;
    }

    /// Moves a simulated clock forward. Panics on the real clock; production
    /// code never calls this, only tests and demos do.
    pub fn advance(&self, delta: Duration) {
        match self {
            Clock::Real => panic!("cannot advance the real clock"),
            Clock::Simulated(sim) => {
                {
                    let mut now = sim.now.lock().expect("clock poisoned");
                    *now += delta;
                }
                sim.tick.notify_waiters();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[tokio::test]
    async fn simulated_clock_waits_for_advance() {
        let start = Utc.with_ymd_and_hms(2020, 7, 7, 14, 0, 0).unwrap();
        let clock = Clock::simulated(start);
        assert_eq!(clock.now(), start);

        let waiter = clock.clone();
        let handle = tokio::spawn(async move {
            waiter.wait_until(start + Duration::seconds(60)).await;
            waiter.now()
        });

        // Give the waiter a chance to park, then release it.
        tokio::task::yield_now().await;
        clock.advance(Duration::seconds(30));
        tokio::task::yield_now().await;
        assert!(!handle.is_finished());
        clock.advance(Duration::seconds(30));

        let seen = handle.await.unwrap();
        assert_eq!(seen, start + Duration::seconds(60));
    }

    #[tokio::test]
    async fn wait_until_past_deadline_returns_immediately() {
        let start = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        let clock = Clock::simulated(start);
        clock.wait_until(start - Duration::seconds(1)).await;
    }
}
