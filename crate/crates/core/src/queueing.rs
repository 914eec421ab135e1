//! Queue state, normalization, load metric, deadline priority and the
//! per-slot service simulation of a single non-preemptive queue.

use serde::{Deserialize, Serialize};

use crate::environment::{Flagged, TaskId};

/// Normalized value returned for a non-empty queue with zero service rate.
pub const SATURATION_CEILING: f64 = 10.0;

/// Highest task priority.
pub const B_MAX: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueueKind {
    LocalCpu,
    Tx,
    LocalGpu,
    ServerCpu,
    ServerGpu,
}

impl QueueKind {
    pub const ALL: [QueueKind; 5] = [
        QueueKind::LocalCpu,
        QueueKind::Tx,
        QueueKind::LocalGpu,
        QueueKind::ServerCpu,
        QueueKind::ServerGpu,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Five backlogs `(q_lc, q_tx, q_lg, q_sc, q_sg)` in cycles, bits, FLOPs,
/// cycles and FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QueueState {
    pub backlog: [f64; 5],
}

impl QueueState {
    pub fn get(&self, kind: QueueKind) -> f64 {
        self.backlog[kind.index()]
    }

    /// Normalizes each backlog by its one-slot service capacity.
    pub fn normalized(&self, rates: &[f64; 5], slot_s: f64) -> ([f64; 5], bool) {
        let mut out = [0.0; 5];
        let mut flagged = false;
        for i in 0..5 {
            let n = normalize_queue(self.backlog[i], rates[i], slot_s);
            out[i] = n.value;
            flagged |= n.flagged;
        }
        (out, flagged)
    }
}

/// `backlog / (rate · slot)`. An empty queue is 0 regardless of rate; a
/// non-empty queue with no service saturates at [`SATURATION_CEILING`].
pub fn normalize_queue(backlog: f64, service_rate: f64, slot_s: f64) -> Flagged<f64> {
    if backlog <= 0.0 {
        return Flagged::clean(0.0);
    }
    if service_rate <= 0.0 || slot_s <= 0.0 {
        return Flagged {
            value: SATURATION_CEILING,
            flagged: true,
        };
    }
    Flagged::clean(backlog / (service_rate * slot_s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadWeights {
    pub w_q: f64,
    pub w_u: f64,
    pub w_g: f64,
}

impl Default for LoadWeights {
    fn default() -> Self {
        Self {
            w_q: 0.6,
            w_u: 0.2,
            w_g: 0.2,
        }
    }
}

impl LoadWeights {
    pub fn is_valid(&self) -> bool {
        self.w_q >= 0.0
            && self.w_u >= 0.0
            && self.w_g >= 0.0
            && (self.w_q + self.w_u + self.w_g - 1.0).abs() < 1e-9
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UtilizationSnapshot {
    pub u_cpu_local: f64,
    pub u_gpu_local: f64,
    pub u_cpu_server: f64,
    pub u_gpu_server: f64,
}

impl UtilizationSnapshot {
    pub fn as_array(&self) -> [f64; 4] {
        [self.u_cpu_local, self.u_gpu_local, self.u_cpu_server, self.u_gpu_server]
    }
}

/// `L = (w_q/5)·Σ tanh(q̂_j) + w_u·ū_cpu + w_g·ū_gpu`, where the means
/// average local and server utilization.
pub fn load_metric(qhat: &[f64; 5], util: &UtilizationSnapshot, w: &LoadWeights) -> f64 {
    let q: f64 = qhat.iter().map(|q| q.max(0.0).tanh()).sum::<f64>() / 5.0;
    let u_cpu = 0.5 * (util.u_cpu_local + util.u_cpu_server);
    let u_gpu = 0.5 * (util.u_gpu_local + util.u_gpu_server);
    (w.w_q * q + w.w_u * u_cpu + w.w_g * u_gpu).clamp(0.0, 1.0)
}

/// `(b/b_max)·max(0, (ddl − now)/D_est)·ρ`.
pub fn priority_score(priority_b: u8, deadline: f64, now_s: f64, d_est_s: f64, best_rho: f64) -> f64 {
    if now_s >= deadline || d_est_s <= 0.0 {
        return 0.0;
    }
    (priority_b as f64 / B_MAX) * ((deadline - now_s) / d_est_s).max(0.0) * best_rho
}

/// 1 when no target fits well enough or the slack is shorter than the
/// estimated processing time.
pub fn failure_risk(deadline: f64, now_s: f64, best_rho: f64, d_est_s: f64, theta_min: f64) -> bool {
    best_rho < theta_min || (deadline - now_s) < d_est_s
}

/// Service capability and backlog of one stage on a candidate path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageView {
    /// Work this task adds to the stage, in the stage's units.
    pub work: f64,
    pub rate: f64,
    /// Work already queued ahead of the task.
    pub backlog: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimate {
    Feasible { d_est_s: f64, w_est_s: f64 },
    Infeasible,
}

impl Estimate {
    pub fn total(&self) -> Option<f64> {
        match self {
            Estimate::Feasible { d_est_s, w_est_s } => Some(d_est_s + w_est_s),
            Estimate::Infeasible => None,
        }
    }
}

/// Processing (`D_est`) and waiting (`W_est`) estimates along a path of
/// stages at current rates. Stages with no work are skipped.
pub fn estimate_times(stages: &[StageView], compatible: bool) -> Estimate {
    if !compatible {
        return Estimate::Infeasible;
    }
    let mut d = 0.0;
    let mut w = 0.0;
    for s in stages.iter().filter(|s| s.work > 0.0) {
        if s.rate <= 0.0 {
            return Estimate::Infeasible;
        }
        d += s.work / s.rate;
        w += s.backlog.max(0.0) / s.rate;
    }
    Estimate::Feasible { d_est_s: d, w_est_s: w }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DequeueMode {
    /// Highest deadline-priority score first.
    #[default]
    Priority,
    /// Arrival order.
    Fifo,
}

/// One task's presence in one queue.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub task: TaskId,
    /// Remaining work in the queue's units.
    pub work: f64,
    /// Time the job entered this queue.
    pub ready_at: f64,
    pub created_t: f64,
    pub deadline: f64,
    pub priority_b: u8,
    pub d_est_s: f64,
    pub rho: f64,
    /// False when the task's GPU demand exceeds this queue's GPU.
    pub compatible: bool,
    /// Server index for transmissions, 0 otherwise.
    pub target: usize,
}

impl Job {
    pub fn score(&self, now: f64) -> f64 {
        priority_score(self.priority_b, self.deadline, now, self.d_est_s, self.rho)
    }
}

fn before(a: &Job, b: &Job, now: f64, mode: DequeueMode) -> std::cmp::Ordering {
    let key = match mode {
        DequeueMode::Priority => b.score(now).total_cmp(&a.score(now)),
        DequeueMode::Fifo => a.ready_at.total_cmp(&b.ready_at),
    };
    key.then(a.created_t.total_cmp(&b.created_t)).then(a.task.cmp(&b.task))
}

/// Sorts jobs into service order at time `now`.
pub fn dequeue_order(jobs: &[Job], now: f64, mode: DequeueMode) -> Vec<TaskId> {
    let mut v: Vec<&Job> = jobs.iter().collect();
    v.sort_by(|a, b| before(a, b, now, mode));
    v.into_iter().map(|j| j.task).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitKind {
    Completed,
    /// Deadline reached while waiting or in service.
    Expired,
    /// Reached a GPU that cannot host it.
    Incompatible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceEvent {
    pub job: Job,
    pub kind: ExitKind,
    pub at: f64,
    /// When service began, if it did.
    pub started: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ServiceReport {
    pub events: Vec<ServiceEvent>,
    /// `(task, seconds busy, work done)` per contiguous service chunk.
    pub chunks: Vec<(TaskId, f64, f64)>,
    pub busy_s: f64,
}

/// A single-server queue with non-preemptive service in the chosen order.
/// A job whose deadline arrives while it waits or runs leaves as expired.
#[derive(Debug, Clone, Default)]
pub struct JobQueue {
    waiting: Vec<Job>,
    in_service: Option<(Job, f64)>,
}

impl JobQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, job: Job) {
        self.waiting.push(job);
    }

    pub fn len(&self) -> usize {
        self.waiting.len() + usize::from(self.in_service.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Remaining work of every job present, including the one in service.
    pub fn backlog(&self) -> f64 {
        self.waiting.iter().map(|j| j.work).sum::<f64>()
            + self.in_service.as_ref().map_or(0.0, |(j, _)| j.work)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.in_service.iter().map(|(j, _)| j).chain(self.waiting.iter())
    }

    pub fn waiting(&self) -> &[Job] {
        &self.waiting
    }

    pub fn in_service(&self) -> Option<&Job> {
        self.in_service.as_ref().map(|(j, _)| j)
    }

    /// Removes every job, returning them (used when a horizon is reached).
    pub fn drain(&mut self) -> Vec<Job> {
        let mut out: Vec<Job> = self.in_service.take().map(|(j, _)| j).into_iter().collect();
        out.append(&mut self.waiting);
        out
    }

    /// Simulates service over `[t0, t1)`. `rate` gives the service rate for a
    /// job (work units per second).
    pub fn serve(
        &mut self,
        t0: f64,
        t1: f64,
        mode: DequeueMode,
        rate: impl Fn(&Job) -> f64,
    ) -> ServiceReport {
        let mut report = ServiceReport::default();
        let mut now = t0;
        loop {
            if let Some((mut job, started)) = self.in_service.take() {
                let r = rate(&job);
                let finish = if r > 0.0 { now + job.work / r } else { f64::INFINITY };
                if finish <= job.deadline && finish <= t1 {
                    report.chunks.push((job.task, finish - now, job.work));
                    report.busy_s += finish - now;
                    job.work = 0.0;
                    report.events.push(ServiceEvent {
                        job,
                        kind: ExitKind::Completed,
                        at: finish,
                        started: Some(started),
                    });
                    now = finish;
                } else if job.deadline < finish && job.deadline <= t1 {
                    let dt = (job.deadline - now).max(0.0);
                    let done = (r * dt).min(job.work);
                    report.chunks.push((job.task, dt, done));
                    report.busy_s += dt;
                    job.work -= done;
                    now = job.deadline.max(now);
                    report.events.push(ServiceEvent {
                        job,
                        kind: ExitKind::Expired,
                        at: now,
                        started: Some(started),
                    });
                } else {
                    let dt = t1 - now;
                    let done = (r * dt).min(job.work);
                    if dt > 0.0 {
                        report.chunks.push((job.task, dt, done));
                        report.busy_s += dt;
                    }
                    job.work -= done;
                    self.in_service = Some((job, started));
                    break;
                }
                continue;
            }

            self.expire_waiting(now, &mut report);
            let pick = self
                .waiting
                .iter()
                .enumerate()
                .filter(|(_, j)| j.ready_at <= now)
                .min_by(|(_, a), (_, b)| before(a, b, now, mode))
                .map(|(i, _)| i);
            match pick {
                Some(i) => {
                    let job = self.waiting.remove(i);
                    if job.compatible {
                        self.in_service = Some((job, now));
                    } else {
                        report.events.push(ServiceEvent {
                            job,
                            kind: ExitKind::Incompatible,
                            at: now,
                            started: None,
                        });
                    }
                }
                None => {
                    let next = self
                        .waiting
                        .iter()
                        .map(|j| j.ready_at)
                        .filter(|&t| t > now)
                        .fold(f64::INFINITY, f64::min);
                    if next < t1 {
                        now = next;
                    } else {
                        break;
                    }
                }
            }
        }
        self.expire_waiting(t1, &mut report);
        report
    }

    fn expire_waiting(&mut self, now: f64, report: &mut ServiceReport) {
        let mut i = 0;
        while i < self.waiting.len() {
            let j = &self.waiting[i];
            if j.deadline <= now && j.ready_at <= now {
                let job = self.waiting.remove(i);
                let at = job.deadline.max(job.ready_at);
                report.events.push(ServiceEvent {
                    job,
                    kind: ExitKind::Expired,
                    at,
                    started: None,
                });
            } else {
                i += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn job(task: TaskId, work: f64, ready: f64, ddl: f64) -> Job {
        Job {
            task,
            work,
            ready_at: ready,
            created_t: 0.0,
            deadline: ddl,
            priority_b: 4,
            d_est_s: 1.0,
            rho: 1.0,
            compatible: true,
            target: 0,
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_queue(0.0, 2e9, 1.0).value, 0.0);
        assert_eq!(normalize_queue(0.0, 0.0, 1.0), Flagged::clean(0.0));
        assert_eq!(normalize_queue(2e9, 2e9, 1.0).value, 1.0);
        assert!((normalize_queue(3e9, 2e9, 1.0).value - 1.5).abs() < 1e-12);
        let z = normalize_queue(5.0, 0.0, 1.0);
        assert!(z.flagged);
        assert_eq!(z.value, SATURATION_CEILING);
    }

    #[test]
    fn load_examples() {
        let w = LoadWeights::default();
        assert!(w.is_valid());
        assert_eq!(load_metric(&[0.0; 5], &UtilizationSnapshot::default(), &w), 0.0);
        let full = UtilizationSnapshot {
            u_cpu_local: 1.0,
            u_gpu_local: 1.0,
            u_cpu_server: 1.0,
            u_gpu_server: 1.0,
        };
        assert!((load_metric(&[1e6; 5], &full, &w) - 1.0).abs() < 1e-12);
        let half = UtilizationSnapshot {
            u_cpu_local: 0.5,
            u_gpu_local: 0.5,
            u_cpu_server: 0.5,
            u_gpu_server: 0.5,
        };
        let l = load_metric(&[1.0; 5], &half, &w);
        assert!((l - (0.6 * 1f64.tanh() + 0.2)).abs() < 1e-12);
        assert!((l - 0.65696).abs() < 1e-5);
    }

    #[test]
    fn priority_examples() {
        assert_eq!(priority_score(4, 1.0, 1.0, 1.0, 1.0), 0.0);
        assert_eq!(priority_score(4, 1.0, 2.0, 1.0, 1.0), 0.0);
        assert!((priority_score(4, 0.5, 0.0, 1.0, 0.8) - 0.4).abs() < 1e-12);
        assert!((priority_score(1, 1.0, 0.0, 0.5, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn estimate_examples() {
        let empty = estimate_times(&[StageView { work: 1e9, rate: 5e10, backlog: 0.0 }], true);
        assert_eq!(empty, Estimate::Feasible { d_est_s: 0.02, w_est_s: 0.0 });
        let cpu = estimate_times(&[StageView { work: 1e6 * 1000.0, rate: 5e10, backlog: 1e10 }], true);
        match cpu {
            Estimate::Feasible { d_est_s, w_est_s } => {
                assert!((d_est_s - 0.02).abs() < 1e-12);
                assert!((w_est_s - 0.2).abs() < 1e-12);
            }
            Estimate::Infeasible => panic!(),
        }
        assert_eq!(estimate_times(&[], false), Estimate::Infeasible);
        assert_eq!(
            estimate_times(&[StageView { work: 1.0, rate: 0.0, backlog: 0.0 }], true),
            Estimate::Infeasible
        );
        // zero-work stages are not traversed
        assert!(matches!(
            estimate_times(&[StageView { work: 0.0, rate: 0.0, backlog: 9.0 }], true),
            Estimate::Feasible { .. }
        ));
    }

    #[test]
    fn failure_risk_examples() {
        assert!(failure_risk(1.1, 1.0, 0.9, 0.2, 0.05));
        assert!(failure_risk(10.0, 0.0, 0.0, 0.2, 0.05));
        assert!(!failure_risk(1.0, 0.0, 0.9, 0.2, 0.05));
    }

    #[test]
    fn dequeue_order_examples() {
        assert!(dequeue_order(&[], 0.0, DequeueMode::Priority).is_empty());
        let mut a = job(1, 1.0, 0.0, 0.5);
        a.rho = 0.8; // score 0.4
        let mut b = job(2, 1.0, 0.0, 1.0);
        b.priority_b = 1;
        b.d_est_s = 0.5; // score 0.5
        assert_eq!(dequeue_order(&[a.clone(), b.clone()], 0.0, DequeueMode::Priority), vec![2, 1]);
        let mut c = job(7, 1.0, 0.0, 2.0);
        c.created_t = 2.0;
        let mut d = job(9, 1.0, 0.0, 2.0);
        d.created_t = 1.0;
        assert_eq!(dequeue_order(&[c.clone(), d.clone()], 0.0, DequeueMode::Priority), vec![9, 7]);
        let mut e = job(3, 1.0, 0.2, 9.0);
        e.priority_b = 4;
        let f = job(4, 1.0, 0.1, 0.2);
        assert_eq!(dequeue_order(&[e, f], 0.0, DequeueMode::Fifo), vec![4, 3]);
    }

    #[test]
    fn serve_completes_in_order_and_carries_over() {
        let mut q = JobQueue::new();
        q.push(job(1, 0.6, 0.0, 10.0));
        q.push(job(2, 0.6, 0.0, 10.0));
        let r = q.serve(0.0, 1.0, DequeueMode::Fifo, |_| 1.0);
        assert_eq!(r.events.len(), 1);
        assert_eq!(r.events[0].job.task, 1);
        assert!((r.events[0].at - 0.6).abs() < 1e-12);
        assert!((r.busy_s - 1.0).abs() < 1e-12);
        assert!((q.backlog() - 0.2).abs() < 1e-12);
        let r = q.serve(1.0, 2.0, DequeueMode::Fifo, |_| 1.0);
        assert_eq!(r.events[0].job.task, 2);
        assert!((r.events[0].at - 1.2).abs() < 1e-12);
        assert_eq!(r.events[0].started, Some(0.6));
        assert!(q.is_empty());
    }

    #[test]
    fn serve_waits_for_ready_time() {
        let mut q = JobQueue::new();
        q.push(job(1, 0.1, 0.5, 10.0));
        let r = q.serve(0.0, 1.0, DequeueMode::Priority, |_| 1.0);
        assert!((r.events[0].at - 0.6).abs() < 1e-12);
        assert!((r.busy_s - 0.1).abs() < 1e-12);
    }

    #[test]
    fn serve_expires_jobs() {
        let mut q = JobQueue::new();
        q.push(job(1, 5.0, 0.0, 0.5));
        q.push(job(2, 0.1, 0.0, 0.3));
        let r = q.serve(0.0, 1.0, DequeueMode::Fifo, |_| 1.0);
        // job 1 is picked first (earlier id), runs until its deadline; job 2 expired meanwhile
        let kinds: Vec<_> = r.events.iter().map(|e| (e.job.task, e.kind, e.at)).collect();
        assert!(kinds.contains(&(1, ExitKind::Expired, 0.5)));
        assert!(kinds.contains(&(2, ExitKind::Expired, 0.3)));
        assert!(q.is_empty());
    }

    #[test]
    fn serve_rejects_incompatible_jobs_at_dequeue() {
        let mut q = JobQueue::new();
        let mut j = job(1, 1.0, 0.2, 5.0);
        j.compatible = false;
        q.push(j);
        let r = q.serve(0.0, 1.0, DequeueMode::Priority, |_| 1.0);
        assert_eq!(r.events[0].kind, ExitKind::Incompatible);
        assert_eq!(r.events[0].at, 0.2);
        assert_eq!(r.busy_s, 0.0);
    }

    #[test]
    fn zero_rate_stalls_without_progress() {
        let mut q = JobQueue::new();
        q.push(job(1, 1.0, 0.0, 5.0));
        let r = q.serve(0.0, 1.0, DequeueMode::Priority, |_| 0.0);
        assert!(r.events.is_empty());
        assert_eq!(q.backlog(), 1.0);
    }

    proptest! {
        #[test]
        fn load_is_bounded_and_monotone(
            q in proptest::array::uniform5(0.0f64..20.0),
            u in proptest::array::uniform4(0.0f64..1.0),
            bump in 0.0f64..5.0,
            idx in 0usize..9,
        ) {
            let w = LoadWeights::default();
            let util = UtilizationSnapshot { u_cpu_local: u[0], u_gpu_local: u[1], u_cpu_server: u[2], u_gpu_server: u[3] };
            let l = load_metric(&q, &util, &w);
            prop_assert!((0.0..=1.0).contains(&l));
            let mut q2 = q;
            let mut u2 = u;
            if idx < 5 { q2[idx] += bump } else { u2[idx - 5] = (u2[idx - 5] + bump).min(1.0) }
            let util2 = UtilizationSnapshot { u_cpu_local: u2[0], u_gpu_local: u2[1], u_cpu_server: u2[2], u_gpu_server: u2[3] };
            prop_assert!(load_metric(&q2, &util2, &w) >= l);
        }

        #[test]
        fn backlog_is_conserved(
            works in proptest::collection::vec((0.01f64..2.0, 0.0f64..1.0, 0.1f64..4.0), 0..12),
            rate in 0.0f64..3.0,
            mode in prop_oneof![Just(DequeueMode::Priority), Just(DequeueMode::Fifo)],
        ) {
            let mut q = JobQueue::new();
            let mut arrivals = 0.0;
            for (i, (w, ready, slack)) in works.iter().enumerate() {
                q.push(job(i as u64, *w, *ready, ready + slack));
                arrivals += w;
            }
            let before = 0.0;
            let r = q.serve(0.0, 1.0, mode, |_| rate);
            let served: f64 = r.chunks.iter().map(|c| c.2).sum();
            let dropped: f64 = r.events.iter().filter(|e| e.kind != ExitKind::Completed).map(|e| e.job.work).sum();
            let after = q.backlog();
            prop_assert!(after >= 0.0);
            prop_assert!((before + arrivals - served - dropped - after).abs() < 1e-9);
            prop_assert!(r.busy_s <= 1.0 + 1e-12);
            let order_a = dequeue_order(q.waiting(), 1.0, mode);
            let order_b = dequeue_order(q.waiting(), 1.0, mode);
            prop_assert_eq!(order_a, order_b);
        }
    }
}
