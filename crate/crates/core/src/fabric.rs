//! Lockstep in-process message fabric with alpha-beta cost metering.
//!
//! A round is a global barrier: every message planned for the round is
//! delivered before the next round starts. Each worker that sends or receives
//! in a round is charged one latency unit; receivers are charged the scalar
//! volume of what they receive.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::SparseBlock;

/// 0-indexed worker rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WorkerId(pub usize);

impl WorkerId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A delivered message. The volume is derived from the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Message<T> {
    source: WorkerId,
    target: WorkerId,
    payload: Vec<SparseBlock<T>>,
    scalar_volume: usize,
}

impl<T: Scalar> Message<T> {
    pub fn new(source: WorkerId, target: WorkerId, payload: Vec<SparseBlock<T>>) -> Self {
        let scalar_volume = payload.iter().map(SparseBlock::scalar_volume).sum();
        Self {
            source,
            target,
            payload,
            scalar_volume,
        }
    }

    pub fn source(&self) -> WorkerId {
        self.source
    }

    pub fn target(&self) -> WorkerId {
        self.target
    }

    pub fn scalar_volume(&self) -> usize {
        self.scalar_volume
    }

    pub fn payload(&self) -> &[SparseBlock<T>] {
        &self.payload
    }

    pub fn into_payload(self) -> Vec<SparseBlock<T>> {
        self.payload
    }
}

/// Per-worker latency rounds and received scalars.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostLedger {
    rounds: Vec<u64>,
    scalars_received: Vec<u64>,
    scalars_sent: Vec<u64>,
}

/// Snapshot of a ledger reduced to its parallel-time cost.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerReport {
    pub ledger: CostLedger,
    pub max_rounds: u64,
    pub max_scalars_received: u64,
}

impl CostLedger {
    pub fn new(workers: usize) -> Self {
        Self {
            rounds: vec![0; workers],
            scalars_received: vec![0; workers],
            scalars_sent: vec![0; workers],
        }
    }

    pub fn workers(&self) -> usize {
        self.rounds.len()
    }

    pub fn rounds(&self, worker: WorkerId) -> u64 {
        self.rounds[worker.0]
    }

    pub fn scalars_received(&self, worker: WorkerId) -> u64 {
        self.scalars_received[worker.0]
    }

    pub fn max_rounds(&self) -> u64 {
        self.rounds.iter().copied().max().unwrap_or(0)
    }

    pub fn max_scalars_received(&self) -> u64 {
        self.scalars_received.iter().copied().max().unwrap_or(0)
    }

    pub fn total_scalars_received(&self) -> u64 {
        self.scalars_received.iter().sum()
    }

    pub fn total_scalars_sent(&self) -> u64 {
        self.scalars_sent.iter().sum()
    }

    /// Cost accrued since `earlier`, a snapshot of the same ledger.
    pub fn since(&self, earlier: &CostLedger) -> CostLedger {
        let diff = |a: &[u64], b: &[u64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        CostLedger {
            rounds: diff(&self.rounds, &earlier.rounds),
            scalars_received: diff(&self.scalars_received, &earlier.scalars_received),
            scalars_sent: diff(&self.scalars_sent, &earlier.scalars_sent),
        }
    }

    /// Accumulates another ledger of the same cluster size.
    pub fn absorb(&mut self, other: &CostLedger) {
        for (a, b) in self.rounds.iter_mut().zip(&other.rounds) {
            *a += b;
        }
        for (a, b) in self
            .scalars_received
            .iter_mut()
            .zip(&other.scalars_received)
        {
            *a += b;
        }
        for (a, b) in self.scalars_sent.iter_mut().zip(&other.scalars_sent) {
            *a += b;
        }
    }

    /// CSV with columns `worker_id,rounds,scalars_received`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["worker_id", "rounds", "scalars_received"])?;
        for (id, (r, s)) in self.rounds.iter().zip(&self.scalars_received).enumerate() {
            w.write_record([id.to_string(), r.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Closed-form communication cost: latency rounds and an interval of
/// scalars received (degenerate when the cost is exact).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedCost {
    pub rounds: u64,
    pub scalars_low: f64,
    pub scalars_high: f64,
}

impl ExpectedCost {
    pub fn exact(rounds: u64, scalars: u64) -> Self {
        Self {
            rounds,
            scalars_low: scalars as f64,
            scalars_high: scalars as f64,
        }
    }

    pub fn interval(rounds: u64, low: f64, high: f64) -> Self {
        Self {
            rounds,
            scalars_low: low,
            scalars_high: high,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.scalars_low == self.scalars_high
    }

    /// Whether a measured `(rounds, scalars)` pair agrees with the prediction.
    pub fn admits(&self, rounds: u64, scalars: u64) -> bool {
        let s = scalars as f64;
        rounds == self.rounds && self.scalars_low <= s && s <= self.scalars_high
    }
}

/// One worker's outgoing message for a round.
pub type Outgoing<T> = (WorkerId, Vec<SparseBlock<T>>);

/// The simulated cluster interconnect.
#[derive(Debug, Clone)]
pub struct Fabric<T> {
    ledger: CostLedger,
    round: u64,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Scalar> Fabric<T> {
    pub fn new(workers: usize) -> Self {
        assert!(workers >= 1, "a fabric needs at least one worker");
        Self {
            ledger: CostLedger::new(workers),
            round: 0,
            _scalar: std::marker::PhantomData,
        }
    }

    pub fn workers(&self) -> usize {
        self.ledger.workers()
    }

    /// Global rounds executed so far (rounds with at least one message).
    pub fn rounds_executed(&self) -> u64 {
        self.round
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn ledger_report(&self) -> LedgerReport {
        LedgerReport {
            ledger: self.ledger.clone(),
            max_rounds: self.ledger.max_rounds(),
            max_scalars_received: self.ledger.max_scalars_received(),
        }
    }

    /// Runs one lockstep round.
    ///
    /// `plan[w]` is worker `w`'s outgoing message, if any. The returned vector
    /// holds, per worker, the message it received this round. The whole plan
    /// is validated before anything is delivered or charged.
    pub fn exchange(&mut self, plan: Vec<Option<Outgoing<T>>>) -> Result<Vec<Option<Message<T>>>> {
        let p = self.workers();
        if plan.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: plan.len(),
            });
        }
        let mut inbox: Vec<Option<Message<T>>> = (0..p).map(|_| None).collect();
        if plan.iter().all(Option::is_none) {
            return Ok(inbox);
        }
        let mut targeted = vec![false; p];
        for (src, send) in plan.iter().enumerate() {
            if let Some((target, _)) = send {
                if target.0 >= p {
                    return Err(Error::UnknownWorker {
                        worker: target.0,
                        workers: p,
                    });
                }
                if target.0 == src {
                    return Err(Error::InvalidGroup(format!(
                        "worker {src} cannot send to itself"
                    )));
                }
                if std::mem::replace(&mut targeted[target.0], true) {
                    return Err(Error::ScheduleViolation {
                        round: self.round,
                        target: target.0,
                    });
                }
            }
        }

        let mut active = vec![false; p];
        for (src, send) in plan.into_iter().enumerate() {
            if let Some((target, payload)) = send {
                let msg = Message::new(WorkerId(src), target, payload);
                let vol = msg.scalar_volume() as u64;
                self.ledger.scalars_sent[src] += vol;
                self.ledger.scalars_received[target.0] += vol;
                active[src] = true;
                active[target.0] = true;
                inbox[target.0] = Some(msg);
            }
        }
        for (w, a) in active.into_iter().enumerate() {
            if a {
                self.ledger.rounds[w] += 1;
            }
        }
        self.round += 1;
        Ok(inbox)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_entries() -> Vec<SparseBlock<f64>> {
        vec![SparseBlock::new(0, 0..10, vec![(1, 1.0), (2, 2.0), (3, 3.0)]).unwrap()]
    }

    #[test]
    fn fresh_fabric_reports_zero() {
        let f = Fabric::<f64>::new(3);
        let r = f.ledger_report();
        assert_eq!((r.max_rounds, r.max_scalars_received), (0, 0));
    }

    #[test]
    fn single_send_charges_both_ends() {
        let mut f = Fabric::<f64>::new(2);
        let inbox = f
            .exchange(vec![Some((WorkerId(1), three_entries())), None])
            .unwrap();
        assert_eq!(inbox[1].as_ref().unwrap().scalar_volume(), 6);
        assert_eq!(inbox[1].as_ref().unwrap().source(), WorkerId(0));
        assert!(inbox[0].is_none());
        let l = f.ledger();
        assert_eq!(l.scalars_received(WorkerId(1)), 6);
        assert_eq!(l.scalars_received(WorkerId(0)), 0);
        assert_eq!(l.rounds(WorkerId(0)), 1);
        assert_eq!(l.rounds(WorkerId(1)), 1);
        let r = f.ledger_report();
        assert_eq!((r.max_rounds, r.max_scalars_received), (1, 6));
    }

    #[test]
    fn empty_round_is_free() {
        let mut f = Fabric::<f64>::new(4);
        f.exchange(vec![None, None, None, None]).unwrap();
        assert_eq!(f.ledger(), &CostLedger::new(4));
        assert_eq!(f.rounds_executed(), 0);
    }

    #[test]
    fn pairwise_round_counts_once_per_worker() {
        let mut f = Fabric::<f64>::new(4);
        let plan = (0..4)
            .map(|w| Some((WorkerId(w ^ 1), three_entries())))
            .collect();
        f.exchange(plan).unwrap();
        for w in 0..4 {
            assert_eq!(f.ledger().rounds(WorkerId(w)), 1);
        }
        assert_eq!(
            f.ledger().total_scalars_sent(),
            f.ledger().total_scalars_received()
        );
    }

    #[test]
    fn duplicate_target_is_rejected_without_charging() {
        let mut f = Fabric::<f64>::new(3);
        let err = f
            .exchange(vec![
                None,
                Some((WorkerId(0), three_entries())),
                Some((WorkerId(0), three_entries())),
            ])
            .unwrap_err();
        assert_eq!(
            err,
            Error::ScheduleViolation {
                round: 0,
                target: 0
            }
        );
        assert_eq!(f.ledger(), &CostLedger::new(3));
    }

    #[test]
    fn ledger_csv_layout() {
        let mut f = Fabric::<f64>::new(2);
        f.exchange(vec![Some((WorkerId(1), three_entries())), None])
            .unwrap();
        let mut buf = Vec::new();
        f.ledger().write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "worker_id,rounds,scalars_received\n0,1,0\n1,1,6\n"
        );
    }
}
