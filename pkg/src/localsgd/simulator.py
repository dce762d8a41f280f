"""Local SGD engine: per-node iterates, synchronization schedule, averaging,
and trace recording including the iterate deviation V_t.

One run is strictly sequential over t. Replicated runs are vectorized over
the seed axis: every (seed, node) pair owns its own counter-based stream, so
a run inside a batch draws exactly what it would draw alone, and local SGD
with H=1 consumes the same per-node draws as minibatch SGD.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .dataio import Regime
from .numkit import RngStream, draw_indices
from .objective import Problem, ReferenceSolution, loss_many

# Stream-id namespace: index draws use the node id, Gaussian noise draws use
# the node id with the top bit set, so the two never collide.
_NOISE_STREAM_FLAG = 1 << 63
_NOISE_CHUNK = 256  # steps of pre-drawn noise per refill
_DIVERGENCE_LIMIT = 1e100


class GradientMode(enum.Enum):
    STOCHASTIC = "stochastic"
    FULL = "full"
    # Exact gradient plus Gaussian noise of known total variance; makes the
    # uniform-variance assumption hold exactly with sigma^2 = noise_sigma^2.
    INJECTED_NOISE = "injected-noise"


class DivergenceError(RuntimeError):
    def __init__(self, t: int, seed: int, node: int | None):
        where = f"seed {seed}" + ("" if node is None else f", node {node}")
        super().__init__(f"iterate diverged at step {t} ({where})")
        self.t = t
        self.seed = seed
        self.node = node


@dataclass(frozen=True)
class SyncSchedule:
    """Strictly increasing synchronization timestamps with max gap H.

    The gap from 0 to the first timestamp counts; the final timestamp must
    equal the run length T (validated against the RunConfig).
    """

    sync_steps: tuple[int, ...]
    H: int

    def __post_init__(self):
        steps = tuple(int(s) for s in self.sync_steps)
        object.__setattr__(self, "sync_steps", steps)
        if not steps:
            raise ValueError("schedule needs at least one synchronization step")
        if steps[0] < 1:
            raise ValueError("first synchronization step must be >= 1")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("synchronization steps must be strictly increasing")
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if self.max_gap() > self.H:
            raise ValueError(f"schedule gap {self.max_gap()} exceeds declared H={self.H}")

    def max_gap(self) -> int:
        prev = 0
        gap = 0
        for s in self.sync_steps:
            gap = max(gap, s - prev)
            prev = s
        return gap

    @property
    def final(self) -> int:
        return self.sync_steps[-1]

    @classmethod
    def uniform(cls, H: int, T: int) -> "SyncSchedule":
        """Every H steps, plus T itself when H does not divide T."""
        if H < 1 or T < 1:
            raise ValueError("H and T must be >= 1")
        steps = list(range(H, T + 1, H))
        if not steps or steps[-1] != T:
            steps.append(T)
        return cls(sync_steps=tuple(steps), H=H)

    @classmethod
    def one_shot(cls, T: int) -> "SyncSchedule":
        return cls(sync_steps=(T,), H=T)

    @classmethod
    def from_steps(cls, steps: Sequence[int], H: int | None = None) -> "SyncSchedule":
        steps = tuple(int(s) for s in steps)
        if H is None:
            prev = 0
            H = 1
            for s in steps:
                H = max(H, s - prev)
                prev = s
        return cls(sync_steps=steps, H=H)

    def describe(self) -> str:
        if self.sync_steps == tuple(range(self.H, self.final + 1, self.H)):
            return f"uniform(H={self.H})"
        if len(self.sync_steps) == 1:
            return f"one-shot(T={self.final})"
        return "explicit(" + ",".join(str(s) for s in self.sync_steps) + f";H={self.H})"


@dataclass(frozen=True)
class RunConfig:
    M: int
    T: int
    schedule: SyncSchedule
    gamma: float
    regime: Regime
    gradient_mode: GradientMode
    seed: int
    batch: int = 1
    noise_sigma: float | None = None
    x0: np.ndarray | None = None
    record_every: int | None = None

    def validate(self, p: Problem) -> None:
        if self.M != p.M:
            raise ValueError(f"config M={self.M} but partition has {p.M} nodes")
        if self.regime != p.part.regime:
            raise ValueError("config regime disagrees with the partition's regime")
        if self.schedule.final != self.T:
            raise ValueError(
                f"schedule ends at {self.schedule.final}, run length is {self.T}")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.gradient_mode == GradientMode.INJECTED_NOISE:
            if self.noise_sigma is None or self.noise_sigma <= 0:
                raise ValueError("injected-noise mode needs noise_sigma > 0")
        if self.x0 is not None and np.asarray(self.x0).shape != (p.dim,):
            raise ValueError("x0 dimension mismatch")

    def stride(self) -> int:
        if self.record_every is not None:
            return max(1, int(self.record_every))
        return max(1, math.ceil(self.T / 1000))


def compute_Vt(iterates) -> float:
    """(1/M) sum_m ||x^m - mean||^2 for a stack of node iterates.

    Bitwise-identical iterates give exactly 0.0: their mean is the common
    value, and recomputing it in floating point must not manufacture
    deviation.
    """
    X = np.asarray(iterates, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("expected a (M, d) stack of iterates")
    if np.all(X == X[0]):
        return 0.0
    xhat = X.mean(axis=0)
    return float(np.mean(np.sum((X - xhat) ** 2, axis=1)))


def _mean_nodes(X: np.ndarray) -> np.ndarray:
    """Node average per seed; exact when a seed's nodes are bitwise equal."""
    xhat = X.mean(axis=1)
    eq = np.all(X == X[:, :1, :], axis=(1, 2))
    if np.any(eq):
        xhat[eq] = X[eq, 0, :]
    return xhat


def _vt_batch(X: np.ndarray, xhat: np.ndarray) -> np.ndarray:
    V = np.mean(np.sum((X - xhat[:, None, :]) ** 2, axis=2), axis=1)
    eq = np.all(X == X[:, :1, :], axis=(1, 2))
    V[eq] = 0.0
    return V


# ---------------------------------------------------------------------------
# Gradient evaluation, vectorized over (seed, node)
# ---------------------------------------------------------------------------

class _GradientEngine:
    """Per-step gradients for all (seed, node) pairs of one run batch."""

    def __init__(self, p: Problem, cfg: RunConfig, seeds: Sequence[int]):
        self.p = p
        self.cfg = cfg
        self.seeds = list(seeds)
        self.S = len(self.seeds)
        self.M = cfg.M
        self.n, self.d = p.dataset.features.shape
        mode = cfg.gradient_mode

        if mode == GradientMode.STOCHASTIC:
            # One bulk draw per (seed, node) stream: identical to what a
            # single run would draw, and shared with the minibatch engine.
            idx = np.empty((self.S, self.M, cfg.T, cfg.batch), dtype=np.int64)
            for s, seed in enumerate(self.seeds):
                for m in range(self.M):
                    start, stop = p.node_range(m)
                    stream = RngStream(seed=seed, stream_id=m)
                    idx[s, m] = start + draw_indices(
                        stream, stop - start, (cfg.T, cfg.batch))
            self.idx = idx
            K = self.S * self.M * cfg.batch
            # Group-sum selector: row (s, m) sums its `batch` gathered rows.
            rows = np.repeat(np.arange(self.S * self.M), cfg.batch)
            self.group_sum = sp.csr_matrix(
                (np.ones(K), (rows, np.arange(K))), shape=(self.S * self.M, K))
        else:
            # Column weights for exact per-node gradients: sample i weighs
            # 1/n_m inside node m's block and 0 elsewhere.
            col_w = np.zeros((self.n, self.M))
            for m in range(self.M):
                start, stop = p.node_range(m)
                col_w[start:stop, m] = 1.0 / (stop - start)
            self.col_w = np.tile(col_w, (1, self.S))  # columns ordered (s, m)

        if mode == GradientMode.INJECTED_NOISE:
            self.noise_gens = [
                [RngStream(seed=seed, stream_id=m | _NOISE_STREAM_FLAG).generator()
                 for m in range(self.M)]
                for seed in self.seeds
            ]
            self.noise_buf: np.ndarray | None = None
            self.noise_pos = 0

    def _refill_noise(self, steps_left: int) -> None:
        length = min(_NOISE_CHUNK, steps_left)
        buf = np.empty((self.S, self.M, length, self.d))
        for s in range(self.S):
            for m in range(self.M):
                buf[s, m] = self.noise_gens[s][m].standard_normal((length, self.d))
        # Total injected variance per draw is noise_sigma^2, split over coords.
        buf *= self.cfg.noise_sigma / math.sqrt(self.d)
        self.noise_buf = buf
        self.noise_pos = 0

    def _full_grads(self, Xn: np.ndarray) -> np.ndarray:
        y = self.p.dataset.labels
        if (self.p.part.regime == Regime.IDENTICAL
                and np.all(Xn == Xn[:, :1, :])):
            # Nodes coincide and share f: one gradient per seed suffices.
            Xf = Xn[:, 0, :]
            U = self.p.margins(Xf)  # (n, S)
            C = -y[:, None] * expit(-y[:, None] * U) / self.n
            G = self.p.rows_T_dot(C).T[:, None, :]  # (S, 1, d)
            return np.broadcast_to(G, Xn.shape) + self.p.lam * Xn
        Xf = Xn.reshape(self.S * self.M, self.d)
        U = self.p.margins(Xf)  # (n, S*M) margins
        C = (-y[:, None] * expit(-y[:, None] * U)) * self.col_w
        G = self.p.rows_T_dot(C).T
        return G.reshape(self.S, self.M, self.d) + self.p.lam * Xn

    def _stochastic_grads(self, Xn: np.ndarray, t: int) -> np.ndarray:
        p, cfg = self.p, self.cfg
        if p.dense_rows is not None:
            rows = p.dense_rows[self.idx[:, :, t, :]]  # (S, M, batch, d)
            y_sel = p.dataset.labels[self.idx[:, :, t, :]]
            tv = np.einsum("smbd,smd->smb", rows, Xn)
            c = -y_sel * expit(-y_sel * tv) / cfg.batch
            return np.einsum("smb,smbd->smd", c, rows) + p.lam * Xn
        idx_t = self.idx[:, :, t, :].reshape(-1)  # (S*M*batch,)
        A_sel = p.dataset.features[idx_t]
        y_sel = p.dataset.labels[idx_t]
        X_rep = np.broadcast_to(
            Xn[:, :, None, :], (self.S, self.M, cfg.batch, self.d)
        ).reshape(-1, self.d)
        tv = np.asarray(A_sel.multiply(X_rep).sum(axis=1)).ravel()
        c = -y_sel * expit(-y_sel * tv) / cfg.batch
        G = (self.group_sum @ A_sel.multiply(c[:, None])).toarray()
        return G.reshape(self.S, self.M, self.d) + p.lam * Xn

    def gradients(self, Xn: np.ndarray, t: int) -> np.ndarray:
        mode = self.cfg.gradient_mode
        if mode == GradientMode.STOCHASTIC:
            return self._stochastic_grads(Xn, t)
        G = self._full_grads(Xn)
        if mode == GradientMode.INJECTED_NOISE:
            if self.noise_buf is None or self.noise_pos >= self.noise_buf.shape[2]:
                self._refill_noise(self.cfg.T - t)
            G = G + self.noise_buf[:, :, self.noise_pos, :]
            self.noise_pos += 1
        return G


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

# `round` counts completed synchronizations up to t, so curves can be read
# against either the step axis or the communication-round axis.
_CSV_COLUMNS = ("t", "round", "synced", "V_t", "dist_sq", "subopt", "grad_norm_sq")


def _write_metadata(stream: TextIO, metadata: dict) -> None:
    for k in sorted(metadata):
        stream.write(f"# {k} = {metadata[k]}\n")


@dataclass
class Trace:
    """Recorded metrics of a single run plus its summary."""

    t: np.ndarray
    synced: np.ndarray
    V: np.ndarray
    dist_sq: np.ndarray
    subopt: np.ndarray
    grad_norm_sq: np.ndarray
    bar_subopt_tail: float  # f(mean of xhat_t, t = 1..T) - f*
    bar_subopt_head: float  # f(mean of xhat_t, t = 0..T-1) - f*
    comm_rounds: int
    metadata: dict
    xhat: np.ndarray | None = None  # optional (rows, d) trajectory capture

    def to_csv(self, stream: TextIO) -> None:
        md = dict(self.metadata)
        md["bar_subopt_tail"] = repr(float(self.bar_subopt_tail))
        md["bar_subopt_head"] = repr(float(self.bar_subopt_head))
        md["comm_rounds"] = self.comm_rounds
        _write_metadata(stream, md)
        stream.write(",".join(_CSV_COLUMNS) + "\n")
        rounds = np.cumsum(self.synced)
        for i in range(self.t.size):
            stream.write(
                f"{int(self.t[i])},{int(rounds[i])},{int(self.synced[i])},"
                f"{float(self.V[i])!r},{float(self.dist_sq[i])!r},"
                f"{float(self.subopt[i])!r},{float(self.grad_norm_sq[i])!r}\n"
            )


@dataclass
class AggregateTrace:
    """Per-step mean and standard error over a list of seeded runs."""

    t: np.ndarray
    synced: np.ndarray
    mean: dict[str, np.ndarray]  # keys: V, dist_sq, subopt, grad_norm_sq
    se: dict[str, np.ndarray]
    bar_subopt_tail: tuple[float, float]  # (mean, se)
    bar_subopt_head: tuple[float, float]
    n_seeds: int
    seeds: tuple[int, ...]
    comm_rounds: int
    metadata: dict

    def to_csv(self, stream: TextIO) -> None:
        md = dict(self.metadata)
        md["seeds"] = ",".join(str(s) for s in self.seeds)
        md["n_seeds"] = self.n_seeds
        md["comm_rounds"] = self.comm_rounds
        md["bar_subopt_tail_mean"] = repr(self.bar_subopt_tail[0])
        md["bar_subopt_tail_se"] = repr(self.bar_subopt_tail[1])
        md["bar_subopt_head_mean"] = repr(self.bar_subopt_head[0])
        md["bar_subopt_head_se"] = repr(self.bar_subopt_head[1])
        _write_metadata(stream, md)
        cols = ["t", "round", "synced"]
        names = ("V", "dist_sq", "subopt", "grad_norm_sq")
        for name in names:
            cols += [f"{name}_mean", f"{name}_se"]
        stream.write(",".join(cols) + "\n")
        rounds = np.cumsum(self.synced)
        for i in range(self.t.size):
            parts = [str(int(self.t[i])), str(int(rounds[i])),
                     str(int(self.synced[i]))]
            for name in names:
                parts.append(repr(float(self.mean[name][i])))
                parts.append(repr(float(self.se[name][i])))
            stream.write(",".join(parts) + "\n")


def _mean_and_se(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean/SE over the last axis; identical observations give the exact
    value and an SE of 0 instead of floating-point dust."""
    S = values.shape[-1]
    mean = values.mean(axis=-1)
    if S < 2:
        return mean, np.zeros_like(mean)
    se = values.std(axis=-1, ddof=1) / math.sqrt(S)
    spread = values.max(axis=-1) - values.min(axis=-1)
    exact = spread == 0.0
    mean = np.where(exact, values[..., 0], mean)
    se = np.where(exact, 0.0, se)
    return mean, se


# ---------------------------------------------------------------------------
# The engine
# ---------------------------------------------------------------------------

def _base_metadata(p: Problem, cfg: RunConfig, ref: ReferenceSolution,
                   engine: str) -> dict:
    x0 = np.zeros(p.dim) if cfg.x0 is None else np.asarray(cfg.x0)
    r0_sq = float(np.sum((x0 - ref.x_star) ** 2))
    return {
        "engine": engine,
        "dataset": p.dataset.name,
        "n": p.dataset.n,
        "dim": p.dataset.dim,
        "M": cfg.M,
        "T": cfg.T,
        "H": cfg.schedule.H,
        "schedule": cfg.schedule.describe(),
        "gamma": repr(float(cfg.gamma)),
        "batch": cfg.batch,
        "regime": cfg.regime.value,
        "gradient_mode": cfg.gradient_mode.value,
        "noise_sigma": "" if cfg.noise_sigma is None else repr(float(cfg.noise_sigma)),
        "record_every": cfg.stride(),
        "lambda": repr(float(p.lam)),
        "mu": repr(float(p.mu)),
        "L": repr(float(p.L)),
        "L_component": repr(float(p.L_component)),
        "f_star": repr(float(ref.f_star)),
        "ref_grad_norm": repr(float(ref.grad_norm)),
        "x0": "zeros" if cfg.x0 is None else "custom",
        "r0_sq": repr(r0_sq),
        "intercept": "none",
    }


def _record_grid(cfg: RunConfig) -> list[int]:
    stride = cfg.stride()
    grid = set(range(0, cfg.T + 1, stride))
    grid.update(cfg.schedule.sync_steps)
    grid.add(cfg.T)
    return sorted(grid)


class _RunBatch:
    """Raw per-seed outputs of one vectorized simulation."""

    def __init__(self, t, synced, V, dist_sq, subopt, grad_norm_sq,
                 bar_tail, bar_head, xhat, comm_rounds, metadata, seeds):
        self.t = t
        self.synced = synced
        self.V = V
        self.dist_sq = dist_sq
        self.subopt = subopt
        self.grad_norm_sq = grad_norm_sq
        self.bar_tail = bar_tail
        self.bar_head = bar_head
        self.xhat = xhat
        self.comm_rounds = comm_rounds
        self.metadata = metadata
        self.seeds = seeds


def _check_divergence(X: np.ndarray, t: int, seeds: Sequence[int]) -> None:
    peak = np.max(np.abs(X))
    if np.isfinite(peak) and peak <= _DIVERGENCE_LIMIT:
        return
    bad = ~np.isfinite(X) | (np.abs(X) > _DIVERGENCE_LIMIT)
    s, m = np.argwhere(np.any(bad, axis=2))[0]
    raise DivergenceError(t, seeds[int(s)], int(m))


def _simulate(p: Problem, cfg: RunConfig, ref: ReferenceSolution,
              seeds: Sequence[int], *, minibatch: bool,
              capture_xhat: bool = False,
              _disable_averaging: bool = False) -> _RunBatch:
    cfg.validate(p)
    seeds = list(seeds)
    S, M, d, T = len(seeds), cfg.M, p.dim, cfg.T
    gamma = cfg.gamma
    x0 = np.zeros(d) if cfg.x0 is None else np.asarray(cfg.x0, dtype=np.float64)

    grad_engine = _GradientEngine(p, cfg, seeds)
    sync_set = frozenset(cfg.schedule.sync_steps)
    grid = _record_grid(cfg)
    row_of = {t: i for i, t in enumerate(grid)}
    R = len(grid)

    X = np.tile(x0, (S, M, 1))
    xhat = _mean_nodes(X)
    bar_head_sum = np.zeros((S, d))  # accumulates xhat_t over t = 0..T-1
    bar_tail_sum = np.zeros((S, d))  # accumulates xhat_t over t = 1..T

    V = np.zeros((R, S))
    dist = np.zeros((R, S))
    subopt = np.zeros((R, S))
    gradsq = np.full((R, S), np.nan)
    xhat_rows = np.zeros((R, S, d)) if capture_xhat else None

    # Suboptimality needs a full loss evaluation; batch the recorded
    # averages into few matrix products instead of one product per step.
    pending: list[tuple[int, np.ndarray]] = []

    def flush_subopt() -> None:
        if not pending:
            return
        pts = np.concatenate([xh for _, xh in pending], axis=0)
        vals = (loss_many(p, pts) - ref.f_star).reshape(len(pending), S)
        for (r, _), row in zip(pending, vals):
            subopt[r] = row
        pending.clear()

    def record_state(t: int) -> int | None:
        r = row_of.get(t)
        if r is None:
            return None
        V[r] = _vt_batch(X, xhat)
        diff = xhat - ref.x_star
        dist[r] = np.sum(diff * diff, axis=1)
        pending.append((r, xhat))
        if len(pending) >= 64:
            flush_subopt()
        if xhat_rows is not None:
            xhat_rows[r] = xhat
        return r

    for t in range(T):
        r = record_state(t)
        G = grad_engine.gradients(X, t)
        if r is not None:
            g_mean = G.mean(axis=1)
            gradsq[r] = np.sum(g_mean * g_mean, axis=1)
        bar_head_sum += xhat
        if minibatch:
            xhat = xhat - gamma * G.mean(axis=1)
            X = np.repeat(xhat[:, None, :], M, axis=1)
        else:
            X = X - gamma * G
            if (t + 1) in sync_set and not _disable_averaging:
                xhat = _mean_nodes(X)
                X = np.repeat(xhat[:, None, :], M, axis=1)
            else:
                xhat = _mean_nodes(X)
        bar_tail_sum += xhat
        _check_divergence(X, t + 1, seeds)
    record_state(T)
    flush_subopt()

    bar_tail = loss_many(p, bar_tail_sum / T) - ref.f_star
    bar_head = loss_many(p, bar_head_sum / T) - ref.f_star

    metadata = _base_metadata(p, cfg, ref, "minibatch" if minibatch else "local")
    return _RunBatch(
        t=np.asarray(grid, dtype=np.int64),
        synced=np.asarray([t in sync_set for t in grid], dtype=bool),
        V=V, dist_sq=dist, subopt=subopt, grad_norm_sq=gradsq,
        bar_tail=bar_tail, bar_head=bar_head,
        xhat=xhat_rows, comm_rounds=len(cfg.schedule.sync_steps),
        metadata=metadata, seeds=seeds,
    )


def _single_trace(batch: _RunBatch) -> Trace:
    md = dict(batch.metadata)
    md["seed"] = batch.seeds[0]
    return Trace(
        t=batch.t,
        synced=batch.synced,
        V=batch.V[:, 0],
        dist_sq=batch.dist_sq[:, 0],
        subopt=batch.subopt[:, 0],
        grad_norm_sq=batch.grad_norm_sq[:, 0],
        bar_subopt_tail=float(batch.bar_tail[0]),
        bar_subopt_head=float(batch.bar_head[0]),
        comm_rounds=batch.comm_rounds,
        metadata=md,
        xhat=None if batch.xhat is None else batch.xhat[:, 0, :],
    )


def run_local_sgd(p: Problem, cfg: RunConfig, ref: ReferenceSolution, *,
                  capture_xhat: bool = False,
                  _disable_averaging: bool = False) -> Trace:
    """One Local SGD run: every node steps on its own stream; at each
    scheduled timestamp all nodes are replaced by their average."""
    batch = _simulate(p, cfg, ref, [cfg.seed], minibatch=False,
                      capture_xhat=capture_xhat,
                      _disable_averaging=_disable_averaging)
    return _single_trace(batch)


def run_minibatch_sgd(p: Problem, cfg: RunConfig, ref: ReferenceSolution, *,
                      capture_xhat: bool = False) -> Trace:
    """Minibatch SGD baseline: a single iterate stepped by the average of the
    M per-node stochastic gradients, drawn from the same per-node streams."""
    batch = _simulate(p, cfg, ref, [cfg.seed], minibatch=True,
                      capture_xhat=capture_xhat)
    return _single_trace(batch)


def run_replicated(p: Problem, cfg: RunConfig, ref: ReferenceSolution,
                   seeds: Sequence[int]) -> AggregateTrace:
    """Mean and standard error of the trace metrics over independent seeds.

    Seeds are aggregated in sorted order so the result does not depend on how
    the list was arranged.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ValueError("run_replicated needs at least 2 seeds")
    seeds_sorted = sorted(seeds)
    # A run is a pure function of its seed, and exact-gradient runs do not
    # touch the streams at all: simulate each distinct trajectory once and
    # fan the columns back out, so duplicates agree bitwise.
    if cfg.gradient_mode == GradientMode.FULL:
        sim_seeds = seeds_sorted[:1]
        expand = [0] * len(seeds_sorted)
    else:
        sim_seeds = sorted(set(seeds_sorted))
        col_of = {s: i for i, s in enumerate(sim_seeds)}
        expand = [col_of[s] for s in seeds_sorted]
    batch = _simulate(p, cfg, ref, sim_seeds, minibatch=False)

    mean: dict[str, np.ndarray] = {}
    se: dict[str, np.ndarray] = {}
    for name, arr in (("V", batch.V), ("dist_sq", batch.dist_sq),
                      ("subopt", batch.subopt), ("grad_norm_sq", batch.grad_norm_sq)):
        mean[name], se[name] = _mean_and_se(arr[:, expand])
    tail_mean, tail_se = _mean_and_se(batch.bar_tail[expand])
    head_mean, head_se = _mean_and_se(batch.bar_head[expand])

    return AggregateTrace(
        t=batch.t,
        synced=batch.synced,
        mean=mean,
        se=se,
        bar_subopt_tail=(float(tail_mean), float(tail_se)),
        bar_subopt_head=(float(head_mean), float(head_se)),
        n_seeds=len(seeds_sorted),
        seeds=tuple(seeds_sorted),
        comm_rounds=batch.comm_rounds,
        metadata=batch.metadata,
    )
