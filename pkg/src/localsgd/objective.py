"""The l2-regularized logistic regression problem and its measured constants.

Covers losses, per-node stochastic and exact gradients, the smoothness and
strong-convexity constants, the deterministic reference optimum, and the
variance quantities evaluated exactly at that optimum.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np
from scipy.special import expit

from .dataio import Dataset, Partition, Regime
from .numkit import DimensionMismatchError, RngStream, draw_indices


class ConvergenceError(RuntimeError):
    """An iterative routine hit its iteration cap before reaching tolerance."""


@dataclass(frozen=True)
class Problem:
    """f(x) = (1/M) sum_m f_m(x), each f_m an average of logistic losses plus
    (lam/2)||x||^2 over its node's samples.

    L is the global smoothness estimate lambda_max((1/4n) A^T A) + lam; the
    logistic part contributes at least zero curvature so mu equals lam
    exactly. L_component is the almost-sure smoothness bound over
    single-sample draws, max_i ||a_i||^2 / 4 + lam; the finite-sum bounds
    hold for that constant, not for the (smaller) global L.
    """

    dataset: Dataset
    part: Partition
    lam: float
    L: float
    L_component: float
    row_norms_sq: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)  # per-sample weight in f; sums to 1
    # Dense copy of the rows when the stored matrix is mostly dense anyway
    # (synthetic data); genuinely sparse datasets keep None and all products
    # go through CSR.
    dense_rows: np.ndarray | None = field(default=None, repr=False)

    def margins(self, X: np.ndarray) -> np.ndarray:
        """A @ X.T for a stack of points, shape (k, d) -> (n, k)."""
        if self.dense_rows is not None:
            return self.dense_rows @ X.T
        return self.dataset.features @ X.T

    def rows_T_dot(self, C: np.ndarray) -> np.ndarray:
        """A.T @ C, shape (n, k) -> (d, k)."""
        if self.dense_rows is not None:
            return self.dense_rows.T @ C
        return self.dataset.features.T @ C

    @property
    def mu(self) -> float:
        return self.lam

    @property
    def kappa(self) -> float:
        return self.L / self.mu if self.mu > 0 else float("inf")

    @property
    def M(self) -> int:
        return self.part.M

    @property
    def dim(self) -> int:
        return self.dataset.dim

    def node_range(self, node: int) -> tuple[int, int]:
        return self.part.node_ranges[node]


def sample_weights(dataset: Dataset, part: Partition) -> np.ndarray:
    """Weight of each sample inside f = (1/M) sum_m f_m.

    Identical regime: every node averages the full dataset, so each sample
    weighs 1/n. Heterogeneous: sample i in node m weighs 1/(M * n_m), which
    differs from 1/n only when block sizes are unequal.
    """
    n = dataset.n
    if part.regime == Regime.IDENTICAL:
        return np.full(n, 1.0 / n)
    w = np.zeros(n)
    M = part.M
    for start, stop in part.node_ranges:
        w[start:stop] = 1.0 / (M * (stop - start))
    return w


def estimate_L(dataset: Dataset, lam: float, *, rtol: float = 1e-9,
               max_iter: int = 10_000) -> float:
    """L = lambda_max((1/4n) A^T A) + lam by power iteration to `rtol`.

    (1/4) A^T A / n dominates the logistic Hessian at every point, so the
    result is a global smoothness constant for f.
    """
    A = dataset.features
    n = dataset.n
    if n == 0:
        raise ValueError("empty dataset")
    v = RngStream(seed=0x5EED, stream_id=0).generator().standard_normal(dataset.dim)
    v /= np.linalg.norm(v)
    lam_prev = 0.0
    for it in range(max_iter):
        w = A.T @ (A @ v) / (4.0 * n)
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0:
            return lam  # A^T A annihilates the probe: spectrum is zero
        lam_max = float(v @ w)
        v = w / norm_w
        if it > 0 and abs(lam_max - lam_prev) <= rtol * max(abs(lam_max), 1e-300):
            return lam_max + lam
        lam_prev = lam_max
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations "
        f"(last residual {abs(lam_max - lam_prev):.3e})"
    )


def build_problem(dataset: Dataset, part: Partition, lam: float | None = None) -> Problem:
    """Assemble a Problem; lam defaults to 1/n as in the experimental setup."""
    if lam is None:
        lam = 1.0 / dataset.n
    if lam < 0:
        raise ValueError("lam must be >= 0")
    rn = dataset.row_norms_sq()
    A = dataset.features
    dense = A.toarray() if A.nnz >= 0.5 * A.shape[0] * A.shape[1] else None
    return Problem(
        dataset=dataset,
        part=part,
        lam=lam,
        L=estimate_L(dataset, lam),
        L_component=float(rn.max()) / 4.0 + lam,
        row_norms_sq=rn,
        weights=sample_weights(dataset, part),
        dense_rows=dense,
    )


# ---------------------------------------------------------------------------
# Losses and gradients
# ---------------------------------------------------------------------------

def _check_dim(p: Problem, x: np.ndarray) -> None:
    if x.shape[-1] != p.dim:
        raise DimensionMismatchError(f"x has dim {x.shape[-1]}, problem has {p.dim}")


def _log1p_exp_neg(t: np.ndarray) -> np.ndarray:
    """log(1 + exp(-t)) as log1p(exp(-t)) for t >= 0 and -t + log1p(exp(t))
    for t < 0; never overflows and is bit-stable."""
    out = np.log1p(np.exp(-np.abs(t)))
    np.add(out, np.maximum(-t, 0.0), out=out)
    return out


def loss_many(p: Problem, X: np.ndarray) -> np.ndarray:
    """f evaluated at each row of X, shape (k, d) -> (k,)."""
    _check_dim(p, X)
    X2 = np.atleast_2d(X)
    U = p.margins(X2)  # (n, k) margins a_i . x
    per_sample = _log1p_exp_neg(p.dataset.labels[:, None] * U)
    vals = p.weights @ per_sample + 0.5 * p.lam * np.einsum("kd,kd->k", X2, X2)
    return vals


def loss(p: Problem, x: np.ndarray) -> float:
    """f(x), with the logistic term evaluated on the overflow-free branch."""
    return float(loss_many(p, x[None, :])[0])


def _loss_coeffs(p: Problem, x: np.ndarray) -> np.ndarray:
    """Per-sample d/dt log(1+exp(-y t)) * y = -y * sigmoid(-y (a_i . x))."""
    t = p.dataset.features @ x
    y = p.dataset.labels
    return -y * expit(-y * t)


def full_grad(p: Problem, node: int, x: np.ndarray) -> np.ndarray:
    """Exact gradient of f_node: average over the node's samples plus lam*x."""
    _check_dim(p, x)
    start, stop = p.node_range(node)
    A = p.dataset.features[start:stop]
    y = p.dataset.labels[start:stop]
    t = A @ x
    coeff = -y * expit(-y * t) / (stop - start)
    return A.T @ coeff + p.lam * x


def full_grad_global(p: Problem, x: np.ndarray) -> np.ndarray:
    """Gradient of f: per-node gradients combined in ascending node order."""
    if p.part.regime == Regime.IDENTICAL:
        return full_grad(p, 0, x)  # all nodes share f; mean of identical values
    acc = full_grad(p, 0, x)
    for m in range(1, p.M):
        acc = acc + full_grad(p, m, x)
    return acc / p.M


def stochastic_grad(p: Problem, node: int, x: np.ndarray, rng: RngStream,
                    batch: int = 1, *, exhaustive: bool = False) -> np.ndarray:
    """Average of `batch` component gradients sampled uniformly with
    replacement from the node's range; unbiased for grad f_node(x).

    `exhaustive` replaces sampling with a full sweep over the node's samples,
    which equals full_grad exactly.
    """
    if exhaustive:
        return full_grad(p, node, x)
    if batch < 1:
        raise ValueError("batch must be >= 1")
    _check_dim(p, x)
    start, stop = p.node_range(node)
    if stop <= start:
        raise ValueError(f"node {node} has an empty sample range")
    idx = start + draw_indices(rng, stop - start, batch)
    A = p.dataset.features[idx]
    y = p.dataset.labels[idx]
    t = A @ x
    coeff = -y * expit(-y * t) / batch
    return A.T @ coeff + p.lam * x


def grad_check_central(p: Problem, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of f; the independent oracle for tests."""
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = eps
        g[j] = (loss(p, x + e) - loss(p, x - e)) / (2.0 * eps)
    return g


# ---------------------------------------------------------------------------
# Reference optimum
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceSolution:
    x_star: np.ndarray
    f_star: float
    grad_norm: float
    tolerance: float
    iterations: int
    method: str

    def __post_init__(self):
        if self.grad_norm > self.tolerance:
            raise ValueError("reference solution does not meet its tolerance")

    def to_kv_text(self) -> str:
        lines = [
            f"f_star = {self.f_star!r}",
            f"grad_norm = {self.grad_norm!r}",
            f"tolerance = {self.tolerance!r}",
            f"iterations = {self.iterations}",
            f"method = {self.method}",
            "x_star = " + ",".join(repr(float(v)) for v in self.x_star),
        ]
        return "\n".join(lines) + "\n"


def solve_reference(p: Problem, tol: float, *, accelerated: bool = False,
                    x0: np.ndarray | None = None,
                    max_iter: int = 10_000_000) -> ReferenceSolution:
    """Deterministic full-batch descent at stepsize 1/L until ||grad f|| <= tol.

    Plain gradient descent by default; `accelerated` switches to Nesterov
    momentum (strongly convex variant when mu > 0), useful for the 1/n
    regularization where kappa is large.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.zeros(p.dim) if x0 is None else np.array(x0, dtype=np.float64)
    # L == 0 only for degenerate data (all-zero rows, lam = 0), where f is
    # constant and the first gradient check below already returns.
    gamma = 1.0 / p.L if p.L > 0 else 0.0

    if not accelerated:
        for it in range(max_iter):
            g = full_grad_global(p, x)
            gn = float(np.linalg.norm(g))
            if gn <= tol:
                return ReferenceSolution(x, loss(p, x), gn, tol, it, "gd")
            x = x - gamma * g
    else:
        if p.mu > 0:
            beta = (np.sqrt(p.kappa) - 1.0) / (np.sqrt(p.kappa) + 1.0)
        y = x.copy()
        x_prev = x.copy()
        t_k = 1.0
        for it in range(max_iter):
            g = full_grad_global(p, y)
            x = y - gamma * g
            if p.mu > 0:
                y = x + beta * (x - x_prev)
            else:
                t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_k * t_k))
                y = x + ((t_k - 1.0) / t_next) * (x - x_prev)
                t_k = t_next
            x_prev = x
            if it % 16 == 0 or float(np.linalg.norm(g)) <= tol:
                gx = full_grad_global(p, x)
                gn = float(np.linalg.norm(gx))
                if gn <= tol:
                    return ReferenceSolution(x, loss(p, x), gn, tol, it, "nesterov")
    gn = float(np.linalg.norm(full_grad_global(p, x)))
    raise ConvergenceError(
        f"reference solver hit the {max_iter}-iteration cap at ||grad|| = {gn:.3e} "
        f"(target {tol:.3e})"
    )


# ---------------------------------------------------------------------------
# Variance quantities at the optimum
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VarianceReport:
    """Exact sigma quantities at x*, plus a probe-set estimate for the
    uniform variance bound.

    sigma_sq is only an estimate (the true supremum over all iterates is not
    computable); everything else is enumerated exactly over the dataset.
    """

    sigma_sq: float
    sigma_opt_sq: float
    sigma_dif_sq: float
    per_node_sigma_sq: tuple[float, ...]
    batch_size: int
    exhaustive: bool
    regime: Regime
    sigma_sq_is_estimate: bool = True

    def __post_init__(self):
        vals = (self.sigma_sq, self.sigma_opt_sq, self.sigma_dif_sq,
                *self.per_node_sigma_sq)
        if any(v < 0 for v in vals):
            raise ValueError("variance quantities must be nonnegative")

    def to_kv_text(self) -> str:
        lines = [
            f"sigma_sq = {self.sigma_sq!r}",
            f"sigma_sq_is_estimate = {self.sigma_sq_is_estimate}",
            f"sigma_opt_sq = {self.sigma_opt_sq!r}",
            f"sigma_dif_sq = {self.sigma_dif_sq!r}",
            f"batch_size = {self.batch_size}",
            f"exhaustive = {self.exhaustive}",
            f"regime = {self.regime.value}",
        ]
        return "\n".join(lines) + "\n"

    def to_csv(self, stream: TextIO) -> None:
        stream.write("node,sigma_m_sq\n")
        for m, v in enumerate(self.per_node_sigma_sq):
            stream.write(f"{m},{v!r}\n")


def _per_sample_grad_sq(p: Problem, x: np.ndarray) -> np.ndarray:
    """||c_i a_i + lam x||^2 for every sample, without materializing the
    gradients: expands to c^2 ||a||^2 + 2 lam c (a.x) + lam^2 ||x||^2."""
    t = p.dataset.features @ x
    y = p.dataset.labels
    c = -y * expit(-y * t)
    return c * c * p.row_norms_sq + 2.0 * p.lam * c * t + p.lam**2 * float(x @ x)


def _range_grad_stats(p: Problem, x: np.ndarray, start: int, stop: int,
                      node: int | None) -> tuple[float, float]:
    """(E_z ||grad h(x,z)||^2, ||grad h(x)||^2) for uniform draws over
    [start, stop); h is f_node when node is given, else f restricted to the
    range (the identical-data case uses the full range and h = f)."""
    q = _per_sample_grad_sq(p, x)[start:stop]
    mean_q = float(np.mean(q))
    if node is None:
        mean_grad = full_grad_global(p, x)
    else:
        mean_grad = full_grad(p, node, x)
    return mean_q, float(mean_grad @ mean_grad)


def expected_stochastic_grad_sq(p: Problem, node: int, x: np.ndarray,
                                batch: int = 1) -> float:
    """Exact E||g||^2 for a batch-average stochastic gradient of f_node at x.

    Only the variance part shrinks with the batch:
    E||g||^2 = ||grad f_node(x)||^2 + (E||grad h(x,z)||^2 - ||grad f_node(x)||^2)/batch.
    """
    start, stop = p.node_range(node)
    mean_q, g_sq = _range_grad_stats(p, x, start, stop, node)
    return g_sq + (mean_q - g_sq) / batch


def measure_variances(p: Problem, ref: ReferenceSolution, batch: int = 1, *,
                      exhaustive: bool = False,
                      probes: Sequence[np.ndarray] | None = None) -> VarianceReport:
    """Enumerate the sigma quantities at x* exactly.

    sigma_opt_sq uses h = f with uniform draws over the full dataset (it does
    not depend on M); sigma_dif_sq uses h = f_m over each node's own range.
    The variance part divides by `batch`, the mean part does not, and
    `exhaustive` (full sweep instead of sampling) removes the variance part
    entirely. sigma_sq is the max over a small probe set of iterates of
    E||g - grad h||^2, reported as an estimate for the uniform bound.
    """
    if ref.grad_norm > ref.tolerance:
        raise ValueError("reference solution not converged")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    x_star = ref.x_star
    identical = p.part.regime == Regime.IDENTICAL

    def sigma_from_stats(mean_q: float, g_sq: float) -> float:
        return g_sq if exhaustive else g_sq + (mean_q - g_sq) / batch

    mean_q, g_sq = _range_grad_stats(p, x_star, 0, p.dataset.n, None)
    sigma_opt = sigma_from_stats(mean_q, g_sq)

    if identical:
        per_node = (sigma_opt,) * p.M  # every node draws from the same f
    else:
        per_node = tuple(
            sigma_from_stats(*_range_grad_stats(p, x_star, *p.node_range(m), m))
            for m in range(p.M)
        )
    sigma_dif = float(np.mean(per_node))

    if probes is None:
        probes = [np.zeros(p.dim), x_star, 0.5 * x_star]
    sigma_sq = 0.0
    for x in probes:
        nodes = [None] if identical else range(p.M)
        for m in nodes:
            if m is None:
                mq, gs = _range_grad_stats(p, x, 0, p.dataset.n, None)
            else:
                mq, gs = _range_grad_stats(p, x, *p.node_range(m), m)
            var = 0.0 if exhaustive else max(mq - gs, 0.0) / batch
            sigma_sq = max(sigma_sq, var)

    return VarianceReport(
        sigma_sq=sigma_sq,
        sigma_opt_sq=max(sigma_opt, 0.0),
        sigma_dif_sq=max(sigma_dif, 0.0),
        per_node_sigma_sq=per_node,
        batch_size=batch,
        exhaustive=exhaustive,
        regime=p.part.regime,
    )
