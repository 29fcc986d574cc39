//! Sample-accurate fixed delay lines.
//!
//! The whole loop runs on one sample clock of rate `f_s`. A round trip of
//! `d` seconds is `n_d = f_s * d` samples, split evenly between the command
//! path and the feedback path.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayParams {
    /// Samples per second.
    pub sample_rate: f64,
    /// Round-trip delay, seconds.
    pub round_trip: f64,
    /// Round-trip delay in samples; always even.
    pub round_trip_samples: u64,
}

impl DelayParams {
    /// `n_d = round(f_s * d)`, rounded up to the next even number.
    pub fn new(sample_rate: f64, round_trip: f64) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if !(round_trip >= 0.0 && round_trip.is_finite()) {
            return Err(Error::invalid("round-trip delay must be non-negative"));
        }
        let mut n = (sample_rate * round_trip).round() as u64;
        if n % 2 == 1 {
            n += 1;
        }
        Ok(DelayParams {
            sample_rate,
            round_trip,
            round_trip_samples: n,
        })
    }

    pub fn one_way_samples(&self) -> u64 {
        self.round_trip_samples / 2
    }
}

/// FIFO that emits, at step `n`, the item pushed at step `n - delay`.
#[derive(Debug, Clone)]
pub struct DelayLine<T> {
    buffer: VecDeque<T>,
    delay: u64,
    fill: T,
    next: Option<u64>,
}

impl<T: Clone> DelayLine<T> {
    /// `fill` is returned until the first pushed item has aged `delay` samples.
    pub fn new(delay: u64, fill: T) -> Self {
        DelayLine {
            buffer: VecDeque::with_capacity(delay as usize + 1),
            delay,
            fill,
            next: None,
        }
    }

    pub fn delay(&self) -> u64 {
        self.delay
    }

    /// Pushes the item for sample `n` and pops the one due at `n`. Sample
    /// indices must increase by exactly one per call.
    pub fn push_pop(&mut self, item: T, n: u64) -> Result<T> {
        if let Some(expected) = self.next {
            if n != expected {
                return Err(Error::Sequencing { expected, got: n });
            }
        }
        self.next = Some(n + 1);
        self.buffer.push_back(item);
        if self.buffer.len() as u64 > self.delay {
            Ok(self.buffer.pop_front().expect("non-empty"))
        } else {
            Ok(self.fill.clone())
        }
    }

    /// Items still in flight, oldest first.
    pub fn in_flight(&self) -> impl Iterator<Item = &T> {
        self.buffer.iter()
    }

    /// Empties the line, returning the items still in flight in order.
    pub fn drain(&mut self) -> Vec<T> {
        self.buffer.drain(..).collect()
    }
}

/// Command (master to slave) and feedback (slave to master) lines, each
/// carrying half the round-trip delay.
pub fn channel_pair<C: Clone, F: Clone>(
    params: &DelayParams,
    command_fill: C,
    feedback_fill: F,
) -> (DelayLine<C>, DelayLine<F>) {
    let one_way = params.one_way_samples();
    (
        DelayLine::new(one_way, command_fill),
        DelayLine::new(one_way, feedback_fill),
    )
}
