//! Bandwidth/latency DRAM channel: one serial queue of transactions served
//! at a fixed byte rate, reads landing `latency` cycles after service.

use std::collections::VecDeque;
use std::rc::Rc;

#[derive(Clone, Debug)]
pub enum Txn {
    /// Bytes fetched once; consumer `t` of `(t, share)` is credited `share`
    /// bytes in proportion to what has landed.
    Read {
        bytes: u64,
        dests: Rc<[(usize, u64)]>,
    },
    Write {
        bytes: u64,
    },
}

#[derive(Debug)]
struct Landing {
    ready: u64,
    dests: Rc<[(usize, u64)]>,
    before: u64,
    take: u64,
    total: u64,
}

#[derive(Debug)]
pub struct Dram {
    bytes_per_cycle: f64,
    latency: u64,
    credit: f64,
    queue: VecDeque<(Txn, u64)>,
    landing: VecDeque<Landing>,
    pub read_bytes: u64,
    pub write_bytes: u64,
}

/// What one cycle of service produced.
#[derive(Debug, Default)]
pub struct Served {
    pub write_bytes: u64,
    pub busy: bool,
}

impl Dram {
    pub fn new(bytes_per_cycle: f64, latency: u64) -> Self {
        Dram {
            bytes_per_cycle,
            latency,
            credit: 0.0,
            queue: VecDeque::new(),
            landing: VecDeque::new(),
            read_bytes: 0,
            write_bytes: 0,
        }
    }

    pub fn push(&mut self, t: Txn) {
        let bytes = match &t {
            Txn::Read { bytes, .. } | Txn::Write { bytes } => *bytes,
        };
        if bytes > 0 {
            self.queue.push_back((t, bytes));
        }
    }

    pub fn idle(&self) -> bool {
        self.queue.is_empty() && self.landing.is_empty()
    }

    pub fn queued_bytes(&self) -> u64 {
        self.queue.iter().map(|(_, r)| r).sum()
    }

    /// Serves up to one cycle of bandwidth at cycle `now`.
    pub fn serve(&mut self, now: u64) -> Served {
        let mut out = Served::default();
        if self.queue.is_empty() {
            self.credit = 0.0;
            return out;
        }
        self.credit += self.bytes_per_cycle;
        while self.credit >= 1.0 {
            let Some((txn, remaining)) = self.queue.front_mut() else {
                break;
            };
            let take = (*remaining).min(self.credit as u64);
            self.credit -= take as f64;
            out.busy = true;
            match txn {
                Txn::Read { dests, bytes } => {
                    self.read_bytes += take;
                    self.landing.push_back(Landing {
                        ready: now + self.latency,
                        dests: dests.clone(),
                        before: *bytes - *remaining,
                        take,
                        total: *bytes,
                    });
                }
                Txn::Write { .. } => {
                    self.write_bytes += take;
                    out.write_bytes += take;
                }
            }
            *remaining -= take;
            if *remaining == 0 {
                self.queue.pop_front();
            }
        }
        if self.queue.is_empty() {
            self.credit = 0.0;
        }
        out
    }

    /// Read bytes whose latency has elapsed by `now`, per consumer.
    pub fn land(&mut self, now: u64, mut f: impl FnMut(usize, u64)) {
        while let Some(l) = self.landing.front() {
            if l.ready > now {
                break;
            }
            let l = self.landing.pop_front().expect("front exists");
            let (a, b) = (l.before as u128, (l.before + l.take) as u128);
            let total = l.total as u128;
            for &(d, share) in l.dests.iter() {
                let s = share as u128;
                let credit = b * s / total - a * s / total;
                if credit > 0 {
                    f(d, credit as u64);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_and_latency() {
        let mut d = Dram::new(32.0, 100);
        d.push(Txn::Read {
            bytes: 100,
            dests: Rc::from(vec![(0, 100), (1, 60)]),
        });
        let mut got = [0u64; 2];
        let mut first = None;
        for now in 0..200 {
            d.serve(now);
            d.land(now, |t, b| {
                got[t] += b;
                first.get_or_insert(now);
            });
        }
        assert_eq!(got, [100, 60]);
        assert_eq!(first, Some(100));
        assert_eq!(d.read_bytes, 100);
        assert!(d.idle());
    }

    #[test]
    fn serial_order() {
        let mut d = Dram::new(32.0, 0);
        d.push(Txn::Write { bytes: 64 });
        d.push(Txn::Read {
            bytes: 32,
            dests: Rc::from(vec![(0, 32)]),
        });
        assert_eq!(d.serve(0).write_bytes, 32);
        assert_eq!(d.serve(1).write_bytes, 32);
        let mut landed = 0;
        d.serve(2);
        d.land(2, |_, b| landed += b);
        assert_eq!(landed, 32);
    }
}
