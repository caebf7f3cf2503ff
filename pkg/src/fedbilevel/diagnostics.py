"""Per-step measurements, fairness metrics, and log serialization.

The engine feeds a MetricsCollector one snapshot per step; standalone
functions cover the one-off measurements (hypergradient bias probes,
client-heterogeneity estimates, fairness metrics). Logs are written as
newline-delimited JSON with a leading metadata block, plus a flat CSV
export with a fixed column order.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .hypergrad import LinearSolveConfig, NeumannConfig, cg_solve, phi_exact, phi_stochastic
from .numerics import RngStream, Vector, l2_norm_sq, mean_of_vectors
from .oracle import FULL_F, FULL_G, FULL_HESSIAN, BilevelOracle

CSV_COLUMNS = (
    "t",
    "grad_norm_sq",
    "consensus_error",
    "inner_error",
    "hypergrad_bias",
    "alpha_t",
    "outer_loss",
)


@dataclass
class MetricsRecord:
    t: int
    grad_norm_sq: float
    consensus_error: float
    outer_loss: float
    wall_clock_ns: int
    inner_error: Optional[float] = None
    hypergrad_bias: Optional[float] = None
    alpha_t: Optional[float] = None


def consensus_error(clients: Sequence) -> float:
    """Mean squared deviation of client outer iterates from their average."""
    if not clients:
        raise ValueError("consensus_error: empty client list")
    x_bar = mean_of_vectors([c.x for c in clients])
    return float(np.mean([l2_norm_sq(c.x - x_bar) for c in clients]))


def solve_inner(
    oracle: BilevelOracle,
    x: Vector,
    y0: Optional[Vector] = None,
    tol: float = 1e-10,
    max_newton: int = 100,
) -> Vector:
    """Minimize g(x, .) by (matrix-free) Newton steps to gradient norm tol."""
    closed = oracle.inner_solution(x)
    if closed is not None:
        return closed
    y = np.zeros(oracle.dim_y) if y0 is None else np.asarray(y0, dtype=np.float64).copy()
    for _ in range(max_newton):
        grad = oracle.grad_y_g(x, y, FULL_G)
        if np.sqrt(l2_norm_sq(grad)) <= tol:
            return y
        step = cg_solve(
            lambda v: oracle.hvp_yy_g(x, y, v, FULL_HESSIAN),
            grad,
            tol=1e-12,
            max_iter=20 * oracle.dim_y,
        )
        y = y - step
    raise RuntimeError(f"inner solve did not reach tolerance {tol} in {max_newton} Newton steps")


def inner_error(
    clients: Sequence,
    ground_truth=None,
    oracles: Optional[Sequence[BilevelOracle]] = None,
    tol: float = 1e-10,
) -> float:
    """Mean squared distance of inner iterates to the per-client inner optimum.

    Uses the closed-form solution when a ground truth (or the oracle)
    provides one, otherwise a Newton solve to the given tolerance.
    """
    if not clients:
        raise ValueError("inner_error: empty client list")
    total = 0.0
    for m, client in enumerate(clients):
        if ground_truth is not None:
            y_opt = ground_truth.y_star(m, client.x)
        elif oracles is not None:
            y_opt = solve_inner(oracles[m], client.x, y0=client.y, tol=tol)
        else:
            raise ValueError("inner_error needs a ground truth or the oracles")
        total += l2_norm_sq(client.y - y_opt)
    return total / len(clients)


def hypergrad_bias(
    oracle: BilevelOracle,
    x: Vector,
    y: Vector,
    neumann_cfg: NeumannConfig,
    num_mc: int,
    rng: RngStream,
    solve: LinearSolveConfig = LinearSolveConfig(),
) -> float:
    """Distance between the Monte-Carlo mean of the stochastic hypergradient
    and the exact one at a fixed point."""
    if num_mc < 1:
        raise ValueError(f"num_mc must be >= 1, got {num_mc}")
    draws = [phi_stochastic(oracle, x, y, neumann_cfg, rng) for _ in range(num_mc)]
    mc_mean = np.mean(draws, axis=0)
    return float(np.sqrt(l2_norm_sq(mc_mean - phi_exact(oracle, x, y, solve))))


def zeta_hat(
    oracles: Sequence[BilevelOracle],
    probes: int,
    rng: RngStream,
    solve: LinearSolveConfig = LinearSolveConfig(),
) -> float:
    """Empirical lower bound on the client-heterogeneity constant.

    Max over random probe points of the max pairwise distance between
    exact per-client hypergradients, each evaluated at that client's exact
    inner solution.
    """
    if len(oracles) < 2:
        return 0.0
    worst = 0.0
    dim_x = oracles[0].dim_x
    for _ in range(probes):
        x = rng.normal(dim_x)
        grads = []
        for oracle in oracles:
            y_opt = solve_inner(oracle, x)
            grads.append(phi_exact(oracle, x, y_opt, solve))
        for i in range(len(grads)):
            for j in range(i + 1, len(grads)):
                worst = max(worst, float(np.sqrt(l2_norm_sq(grads[i] - grads[j]))))
    return worst


def predictions(theta: Vector, features: np.ndarray) -> np.ndarray:
    """Hard labels of the logistic model: score >= 0 is the positive class."""
    return (features @ theta >= 0.0).astype(int)


def accuracy(theta: Vector, dataset) -> float:
    return float((predictions(theta, dataset.features) == dataset.labels).mean())


def eqopp(theta: Vector, dataset) -> float:
    """Equal-opportunity gap: max pairwise difference in true-positive rate
    across sensitive groups (on groups present in the dataset)."""
    preds = predictions(theta, dataset.features)
    tprs = []
    for g in range(dataset.group_count):
        in_group = dataset.groups == g
        if not in_group.any():
            continue
        positives = in_group & (dataset.labels == 1)
        if not positives.any():
            raise ValueError(f"group {g} has no positive samples, TPR undefined")
        tprs.append(float(preds[positives].mean()))
    if len(tprs) < 2:
        return 0.0
    return max(tprs) - min(tprs)


# ---------------------------------------------------------------------------
# Per-step collection
# ---------------------------------------------------------------------------


class MetricsCollector:
    """Accumulates one MetricsRecord per observed engine step.

    With a ground truth, grad_norm_sq is the exact squared hypergradient
    norm at the virtual average; without one it falls back to the squared
    norm of the mean client momentum (flagged as an estimate in the log
    metadata, and NaN before the first step produces a momentum).
    """

    def __init__(self, ground_truth=None, compute_inner: bool = False, stride: int = 1):
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        self.ground_truth = ground_truth
        self.compute_inner = compute_inner
        self.stride = stride
        self.records: list[MetricsRecord] = []

    def observe(self, t, clients, oracles, algorithm: str, alpha_t=None) -> None:
        if (t - 1) % self.stride != 0:
            return
        x_bar = mean_of_vectors([c.x for c in clients])
        if self.ground_truth is not None:
            grad_norm_sq = l2_norm_sq(self.ground_truth.grad_h(x_bar))
        elif clients[0].nu is not None:
            grad_norm_sq = l2_norm_sq(mean_of_vectors([c.nu for c in clients]))
        else:
            grad_norm_sq = math.nan

        bilevel = clients[0].y is not None
        if bilevel:
            outer_loss = float(
                np.mean([oracles[m].f_value(c.x, c.y, FULL_F) for m, c in enumerate(clients)])
            )
        else:
            outer_loss = float(
                np.mean([oracles[m].value(c.x, FULL_F) for m, c in enumerate(clients)])
            )

        inner = None
        if self.compute_inner and bilevel:
            inner = inner_error(clients, ground_truth=self.ground_truth, oracles=oracles)

        self.records.append(
            MetricsRecord(
                t=t,
                grad_norm_sq=float(grad_norm_sq),
                consensus_error=consensus_error(clients),
                outer_loss=outer_loss,
                wall_clock_ns=time.monotonic_ns(),
                inner_error=inner,
                alpha_t=None if alpha_t is None else float(alpha_t),
            )
        )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _jsonable(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def write_log(records: Sequence[MetricsRecord], path, metadata: dict) -> None:
    """Newline-delimited JSON: metadata line first, one record per step after."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": metadata}, sort_keys=True, default=str) + "\n")
        for rec in records:
            row = {k: _jsonable(v) for k, v in asdict(rec).items()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_log(path) -> tuple[dict, list[MetricsRecord]]:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line]
    if not lines:
        raise ValueError(f"{path}: empty log")
    head = json.loads(lines[0])
    if "meta" not in head:
        raise ValueError(f"{path}: first line is not a metadata block")
    records = []
    for line in lines[1:]:
        row = json.loads(line)
        if row.get("grad_norm_sq") is None:
            row["grad_norm_sq"] = math.nan
        records.append(MetricsRecord(**row))
    return head["meta"], records


def export_csv(records: Sequence[MetricsRecord], path) -> None:
    """Flat CSV with the documented fixed column order."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for rec in records:
            row = asdict(rec)
            cells = []
            for col in CSV_COLUMNS:
                value = row[col]
                if value is None or (isinstance(value, float) and math.isnan(value)):
                    cells.append("")
                else:
                    cells.append(repr(value) if isinstance(value, float) else str(value))
            fh.write(",".join(cells) + "\n")


def derived_constants(constants, mu: float) -> dict:
    """Smoothness constants of the solution map and hypergradient, derived
    from declared oracle metadata; only the entries whose inputs were
    declared are present."""
    out = {}
    if constants is None or mu <= 0:
        return out
    lip = constants.lipschitz_l
    cross = constants.cross_bound
    if cross is not None:
        out["inner_solution_lipschitz"] = cross / mu
    if (
        lip is not None
        and cross is not None
        and constants.grad_bound_m is not None
        and constants.cross_lipschitz is not None
        and constants.hess_lipschitz is not None
    ):
        m_bound = constants.grad_bound_m
        out["hypergrad_error_coeff"] = (
            lip
            + lip * cross / mu
            + m_bound * (constants.cross_lipschitz / mu + constants.hess_lipschitz * cross / mu**2)
        )
        out["joint_lipschitz"] = lip + m_bound * constants.cross_lipschitz / mu + cross * (
            lip / mu + m_bound * constants.hess_lipschitz / mu**2
        )
    return out
