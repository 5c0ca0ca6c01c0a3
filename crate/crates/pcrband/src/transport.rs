//! Rank-addressed message passing with an in-process backend.
//!
//! The solver only ever talks to [`Communicator`]; a real network backend
//! could be swapped in behind the same surface. Two execution modes:
//!
//! * `Lockstep` - ranks are advanced one at a time by a round-robin
//!   scheduler, so message traces and floating-point results are fully
//!   deterministic. A stage where some rank would wait forever is reported
//!   as a [`TransportError::Deadlock`] instead of hanging. Default for
//!   correctness runs.
//! * `Concurrent` - one OS thread per rank with blocking queues, used for
//!   wall-clock measurements.
//!
//! Payloads are flat arrays of 64-bit reals with explicit (rows, cols)
//! framing. Delivery is reliable and FIFO per (sender, receiver, tag).
//! Every endpoint keeps monotone counters of messages, payload bytes and
//! barrier stages entered.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

/// Rank index inside a world of `p` endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RankId(pub usize);

impl fmt::Display for RankId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type Tag = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Lockstep,
    Concurrent,
}

/// A message payload: a flat 64-bit real array framed as rows x cols.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "frame shape");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }
}

/// Per-rank monotone instrumentation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub messages_sent: u64,
    pub bytes_sent: u64,
    pub stages_entered: u64,
}

/// One entry of the deterministic message trace.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Send {
        from: usize,
        to: usize,
        tag: Tag,
        rows: usize,
        cols: usize,
    },
    Recv {
        by: usize,
        from: usize,
        tag: Tag,
    },
    Stage {
        rank: usize,
        label: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    /// No rank can make progress: every live rank is blocked on a message
    /// or barrier that can never complete.
    Deadlock {
        rank: usize,
        detail: String,
    },
    /// Two ranks entered the same stage barrier with different labels.
    BarrierMismatch {
        rank: usize,
        expected: String,
        got: String,
    },
    InvalidRank {
        rank: usize,
        p: usize,
    },
}

impl fmt::Display for TransportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportError::Deadlock { rank, detail } => {
                write!(f, "deadlock detected at rank {rank}: {detail}")
            }
            TransportError::BarrierMismatch {
                rank,
                expected,
                got,
            } => write!(
                f,
                "barrier label mismatch at rank {rank}: \"{got}\" joined a \"{expected}\" stage"
            ),
            TransportError::InvalidRank { rank, p } => {
                write!(f, "rank {rank} outside world of size {p}")
            }
        }
    }
}

impl std::error::Error for TransportError {}

#[derive(Debug, Clone, PartialEq)]
enum Phase {
    Running,
    WaitRecv { from: usize, tag: Tag },
    WaitBarrier { gen: u64 },
    Done,
}

struct State {
    queues: HashMap<(usize, usize, Tag), VecDeque<Frame>>,
    phase: Vec<Phase>,
    turn: usize,
    counters: Vec<Counters>,
    trace: Vec<TraceEvent>,
    barrier_label: Option<String>,
    barrier_joined: Vec<bool>,
    barrier_gen: u64,
    failed: Option<TransportError>,
}

impl State {
    fn queue_ready(&self, to: usize, from: usize, tag: Tag) -> bool {
        self.queues
            .get(&(to, from, tag))
            .is_some_and(|q| !q.is_empty())
    }

    fn runnable(&self, rank: usize) -> bool {
        match &self.phase[rank] {
            Phase::Running => true,
            Phase::WaitRecv { from, tag } => self.queue_ready(rank, *from, *tag),
            Phase::WaitBarrier { gen } => self.barrier_gen > *gen,
            Phase::Done => false,
        }
    }

    /// Hand the lockstep turn to the next rank that can make progress.
    /// Declares deadlock when no live rank is runnable.
    fn advance_turn(&mut self, from_rank: usize, p: usize) {
        for step in 1..=p {
            let cand = (from_rank + step) % p;
            if self.phase[cand] == Phase::Done {
                continue;
            }
            if self.runnable(cand) {
                self.turn = cand;
                return;
            }
        }
        if self.phase.iter().all(|ph| *ph == Phase::Done) {
            return;
        }
        let (rank, detail) = self
            .phase
            .iter()
            .enumerate()
            .find_map(|(i, ph)| match ph {
                Phase::WaitRecv { from, tag } => {
                    Some((i, format!("recv from rank {from} tag {tag}")))
                }
                Phase::WaitBarrier { .. } => Some((i, "stage barrier".to_string())),
                _ => None,
            })
            .unwrap_or((from_rank, "no runnable rank".to_string()));
        self.failed = Some(TransportError::Deadlock { rank, detail });
    }
}

struct Shared {
    p: usize,
    mode: Mode,
    state: Mutex<State>,
    cv: Condvar,
}

/// Wait bound for the concurrent mode, where no deadlock detector runs.
const CONCURRENT_WAIT: Duration = Duration::from_secs(60);

/// Handle on a world of `p` connected endpoints; keeps access to counters
/// and the trace after the endpoints are done.
pub struct World {
    shared: Arc<Shared>,
}

impl World {
    /// Create `p` connected endpoints. Every ordered pair of ranks can
    /// exchange frames, including a rank with itself.
    pub fn connect(p: usize, mode: Mode) -> (World, Vec<Communicator>) {
        assert!(p >= 1, "world needs at least one rank");
        let shared = Arc::new(Shared {
            p,
            mode,
            state: Mutex::new(State {
                queues: HashMap::new(),
                phase: vec![Phase::Running; p],
                turn: 0,
                counters: vec![Counters::default(); p],
                trace: Vec::new(),
                barrier_label: None,
                barrier_joined: vec![false; p],
                barrier_gen: 0,
                failed: None,
            }),
            cv: Condvar::new(),
        });
        let comms = (0..p)
            .map(|rank| Communicator {
                rank,
                shared: Arc::clone(&shared),
                finished: false,
            })
            .collect();
        (World { shared }, comms)
    }

    /// Run one closure per rank on its own thread and collect the results
    /// in rank order. A failure on any rank becomes the run's error, with
    /// derived deadlocks discarded in favor of the root cause.
    pub fn run<T, F>(
        p: usize,
        mode: Mode,
        f: F,
    ) -> std::result::Result<WorldRun<T>, crate::error::SolverError>
    where
        T: Send,
        F: Fn(&mut Communicator) -> std::result::Result<T, crate::error::SolverError> + Sync,
    {
        let (world, comms) = World::connect(p, mode);
        let mut slots: Vec<Option<std::result::Result<T, crate::error::SolverError>>> =
            (0..p).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for mut comm in comms {
                let f = &f;
                handles.push(scope.spawn(move || {
                    let out = f(&mut comm);
                    comm.finish();
                    out
                }));
            }
            for (i, h) in handles.into_iter().enumerate() {
                slots[i] = Some(h.join().expect("rank thread panicked"));
            }
        });
        let is_secondary = |e: &crate::error::SolverError| {
            matches!(
                e,
                crate::error::SolverError::Transport(TransportError::Deadlock { .. })
            )
        };
        let mut results = Vec::with_capacity(p);
        let mut first_err: Option<crate::error::SolverError> = None;
        for s in slots {
            match s.unwrap() {
                Ok(v) => results.push(v),
                Err(e) => match &first_err {
                    None => first_err = Some(e),
                    Some(cur) if is_secondary(cur) && !is_secondary(&e) => first_err = Some(e),
                    _ => {}
                },
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        Ok(WorldRun {
            results,
            counters: world.counters(),
            trace: world.trace(),
        })
    }

    pub fn counters(&self) -> Vec<Counters> {
        self.shared.state.lock().unwrap().counters.clone()
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        self.shared.state.lock().unwrap().trace.clone()
    }
}

/// Results of [`World::run`]: per-rank outputs plus instrumentation.
pub struct WorldRun<T> {
    pub results: Vec<T>,
    pub counters: Vec<Counters>,
    pub trace: Vec<TraceEvent>,
}

/// One rank's endpoint into the world.
pub struct Communicator {
    rank: usize,
    shared: Arc<Shared>,
    finished: bool,
}

impl Communicator {
    pub fn rank(&self) -> RankId {
        RankId(self.rank)
    }

    pub fn world_size(&self) -> usize {
        self.shared.p
    }

    pub fn mode(&self) -> Mode {
        self.shared.mode
    }

    /// Snapshot of this rank's counters.
    pub fn counters(&self) -> Counters {
        self.shared.state.lock().unwrap().counters[self.rank]
    }

    /// Queue a frame for `to`. Sending never blocks.
    pub fn send(
        &self,
        to: RankId,
        tag: Tag,
        frame: Frame,
    ) -> std::result::Result<(), TransportError> {
        let p = self.shared.p;
        if to.0 >= p {
            return Err(TransportError::InvalidRank { rank: to.0, p });
        }
        let mut st = self.shared.state.lock().unwrap();
        loop {
            if let Some(err) = &st.failed {
                return Err(err.clone());
            }
            if self.shared.mode == Mode::Concurrent || st.turn == self.rank {
                break;
            }
            st = self.shared.cv.wait(st).unwrap();
        }
        st.counters[self.rank].messages_sent += 1;
        st.counters[self.rank].bytes_sent += 8 * frame.data.len() as u64;
        st.trace.push(TraceEvent::Send {
            from: self.rank,
            to: to.0,
            tag,
            rows: frame.rows,
            cols: frame.cols,
        });
        st.queues
            .entry((to.0, self.rank, tag))
            .or_default()
            .push_back(frame);
        self.shared.cv.notify_all();
        Ok(())
    }

    /// Blocking receive of the next frame from `from` under `tag`.
    pub fn recv(&self, from: RankId, tag: Tag) -> std::result::Result<Frame, TransportError> {
        let p = self.shared.p;
        if from.0 >= p {
            return Err(TransportError::InvalidRank { rank: from.0, p });
        }
        let mut st = self.shared.state.lock().unwrap();
        loop {
            if let Some(err) = &st.failed {
                return Err(err.clone());
            }
            let ready = st.queue_ready(self.rank, from.0, tag);
            match self.shared.mode {
                Mode::Concurrent => {
                    if ready {
                        break;
                    }
                    let (guard, timeout) =
                        self.shared.cv.wait_timeout(st, CONCURRENT_WAIT).unwrap();
                    st = guard;
                    if timeout.timed_out() {
                        st.failed = Some(TransportError::Deadlock {
                            rank: self.rank,
                            detail: format!("recv from rank {} tag {tag} timed out", from.0),
                        });
                        self.shared.cv.notify_all();
                    }
                }
                Mode::Lockstep => {
                    if st.turn == self.rank {
                        if ready {
                            st.phase[self.rank] = Phase::Running;
                            break;
                        }
                        st.phase[self.rank] = Phase::WaitRecv { from: from.0, tag };
                        st.advance_turn(self.rank, p);
                        self.shared.cv.notify_all();
                        // Re-check right away: advance_turn may have
                        // declared a deadlock with nobody left to wake us.
                        continue;
                    }
                    st = self.shared.cv.wait(st).unwrap();
                }
            }
        }
        let frame = st
            .queues
            .get_mut(&(self.rank, from.0, tag))
            .unwrap()
            .pop_front()
            .unwrap();
        st.trace.push(TraceEvent::Recv {
            by: self.rank,
            from: from.0,
            tag,
        });
        self.shared.cv.notify_all();
        Ok(frame)
    }

    /// Collective stage boundary. All ranks must call it with the same
    /// label; the per-rank stage counter increments on entry.
    pub fn stage_barrier(&self, label: &str) -> std::result::Result<(), TransportError> {
        let p = self.shared.p;
        let mut st = self.shared.state.lock().unwrap();
        // Join once the turn allows (lockstep) or immediately (concurrent).
        loop {
            if let Some(err) = &st.failed {
                return Err(err.clone());
            }
            if self.shared.mode == Mode::Concurrent || st.turn == self.rank {
                break;
            }
            st = self.shared.cv.wait(st).unwrap();
        }
        match &st.barrier_label {
            Some(current) if current != label => {
                let err = TransportError::BarrierMismatch {
                    rank: self.rank,
                    expected: current.clone(),
                    got: label.to_string(),
                };
                st.failed = Some(err.clone());
                self.shared.cv.notify_all();
                return Err(err);
            }
            Some(_) => {}
            None => st.barrier_label = Some(label.to_string()),
        }
        st.barrier_joined[self.rank] = true;
        st.counters[self.rank].stages_entered += 1;
        st.trace.push(TraceEvent::Stage {
            rank: self.rank,
            label: label.to_string(),
        });
        if st.barrier_joined.iter().all(|&j| j) {
            st.barrier_gen += 1;
            st.barrier_label = None;
            st.barrier_joined.iter_mut().for_each(|j| *j = false);
            self.shared.cv.notify_all();
            return Ok(());
        }
        let joined_gen = st.barrier_gen;
        if self.shared.mode == Mode::Lockstep {
            st.phase[self.rank] = Phase::WaitBarrier { gen: joined_gen };
            st.advance_turn(self.rank, p);
            self.shared.cv.notify_all();
        }
        loop {
            if let Some(err) = &st.failed {
                return Err(err.clone());
            }
            if st.barrier_gen > joined_gen {
                st.phase[self.rank] = Phase::Running;
                return Ok(());
            }
            match self.shared.mode {
                Mode::Concurrent => {
                    let (guard, timeout) =
                        self.shared.cv.wait_timeout(st, CONCURRENT_WAIT).unwrap();
                    st = guard;
                    if timeout.timed_out() {
                        st.failed = Some(TransportError::Deadlock {
                            rank: self.rank,
                            detail: format!("barrier \"{label}\" timed out"),
                        });
                        self.shared.cv.notify_all();
                    }
                }
                Mode::Lockstep => {
                    st = self.shared.cv.wait(st).unwrap();
                }
            }
        }
    }

    /// Mark this rank done so the scheduler stops considering it.
    fn finish(&mut self) {
        if self.finished {
            return;
        }
        self.finished = true;
        let mut st = self.shared.state.lock().unwrap();
        st.phase[self.rank] = Phase::Done;
        if self.shared.mode == Mode::Lockstep && st.turn == self.rank {
            st.advance_turn(self.rank, self.shared.p);
        }
        self.shared.cv.notify_all();
    }
}

impl Drop for Communicator {
    fn drop(&mut self) {
        self.finish();
    }
}

/// Sum-reduce `values` across all ranks, returning the total on every rank.
/// Rank 0 accumulates in rank order, which keeps the result independent of
/// scheduling.
pub fn allreduce_sum(
    comm: &Communicator,
    tag: Tag,
    values: &[f64],
) -> std::result::Result<Vec<f64>, TransportError> {
    reduce_then_broadcast(comm, tag, values, |acc, v| {
        for (a, b) in acc.iter_mut().zip(v) {
            *a += b;
        }
    })
}

/// Max-reduce `values` across all ranks.
pub fn allreduce_max(
    comm: &Communicator,
    tag: Tag,
    values: &[f64],
) -> std::result::Result<Vec<f64>, TransportError> {
    reduce_then_broadcast(comm, tag, values, |acc, v| {
        for (a, b) in acc.iter_mut().zip(v) {
            *a = a.max(*b);
        }
    })
}

fn reduce_then_broadcast(
    comm: &Communicator,
    tag: Tag,
    values: &[f64],
    mut combine: impl FnMut(&mut Vec<f64>, &[f64]),
) -> std::result::Result<Vec<f64>, TransportError> {
    let p = comm.world_size();
    let me = comm.rank().0;
    if p == 1 {
        return Ok(values.to_vec());
    }
    if me == 0 {
        let mut acc = values.to_vec();
        for from in 1..p {
            let f = comm.recv(RankId(from), tag)?;
            combine(&mut acc, &f.data);
        }
        for to in 1..p {
            comm.send(RankId(to), tag, Frame::new(1, acc.len(), acc.clone()))?;
        }
        Ok(acc)
    } else {
        comm.send(RankId(0), tag, Frame::new(1, values.len(), values.to_vec()))?;
        Ok(comm.recv(RankId(0), tag)?.data)
    }
}
