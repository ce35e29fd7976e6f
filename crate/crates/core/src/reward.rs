//! Per-id loss histories and the loss-improvement reward.

use std::collections::VecDeque;

use crate::checkpoint::{Reader, Writer};
use crate::error::{Error, Result};

/// Default number of past losses averaged by the reward.
pub const DEFAULT_HISTORY: usize = 30;

/// The last `capacity` prediction losses of one id, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHistory {
    buf: VecDeque<f64>,
    capacity: usize,
}

impl LossHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            buf: VecDeque::with_capacity(capacity.min(64)),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.buf.iter().copied()
    }

    /// Appends a loss, evicting the oldest entry when full.
    pub fn record(&mut self, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite("recorded loss"));
        }
        if loss < 0.0 {
            return Err(Error::invalid("loss", format!("must be >= 0, got {loss}")));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(loss);
        Ok(())
    }

    /// Mean of the stored losses, `None` when empty.
    pub fn mean(&self) -> Option<f64> {
        if self.buf.is_empty() {
            None
        } else {
            Some(self.buf.iter().sum::<f64>() / self.buf.len() as f64)
        }
    }

    /// Average past loss minus `current_loss`; zero for an empty history.
    pub fn reward(&self, current_loss: f64) -> Result<f64> {
        if !current_loss.is_finite() {
            return Err(Error::NonFinite("current loss"));
        }
        Ok(self.mean().map_or(0.0, |m| m - current_loss))
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.usize(self.capacity);
        let v: Vec<f64> = self.buf.iter().copied().collect();
        w.f64s(&v);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let capacity = r.usize()?;
        let values = r.f64s()?;
        if values.len() > capacity {
            return Err(Error::Checkpoint(
                "loss history exceeds its capacity".into(),
            ));
        }
        Ok(Self {
            buf: values.into(),
            capacity,
        })
    }
}
