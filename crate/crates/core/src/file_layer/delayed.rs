use std::collections::VecDeque;

use crate::simnet::SimTime;

/// Per-file historian deciding when to stop waiting for the cache and read
/// the durable log instead.
#[derive(Debug, Clone)]
pub struct DelayedReadState {
    pub max_delay_ms: u64,
    size_record: VecDeque<(SimTime, u64)>,
}

impl Default for DelayedReadState {
    fn default() -> Self {
        Self::new(1000)
    }
}

impl DelayedReadState {
    pub fn new(max_delay_ms: u64) -> Self {
        Self {
            max_delay_ms,
            size_record: VecDeque::new(),
        }
    }

    pub fn should_read_from_durable(
        &mut self,
        cache_size: u64,
        durable_size: u64,
        now: SimTime,
    ) -> bool {
        self.size_record.push_back((now, durable_size));
        while let Some(&(_, size)) = self.size_record.front() {
            if size > cache_size {
                break;
            }
            // Remove caught-up positions.
            self.size_record.pop_front();
        }
        let Some(&(t, _)) = self.size_record.front() else {
            return false;
        };
        if now > t + self.max_delay_ms {
            self.size_record.clear();
            return true;
        }
        false
    }

    pub fn pending(&self) -> usize {
        self.size_record.len()
    }
}
