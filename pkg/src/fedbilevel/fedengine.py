"""Federated simulation loop.

Three algorithms share one engine:

* fedavg     - plain local gradient steps on a single-level objective,
               periodic averaging of the iterate.
* fedbio     - deterministic alternating bilevel descent per client with
               the exact (CG-solved) hypergradient, periodic averaging of
               the outer iterate only.
* fedbioacc  - stochastic bilevel descent with recursive momentum on both
               the inner gradient and the hypergradient estimate, a
               decaying step schedule, and three-way averaging (pre-update
               outer iterate, momentum, post-update outer iterate).

Clients are independent between communication rounds; each owns its state
and RNG stream exclusively, so parallel execution of local steps is
bitwise identical to sequential execution.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import diagnostics
from .hypergrad import (
    LinearSolveConfig,
    NeumannConfig,
    draw_phi_batches,
    phi_exact,
    phi_with_batches,
)
from .numerics import RngStream, Vector, mean_of_vectors
from .oracle import BilevelOracle, SingleLevelOracle

ALGORITHMS = ("fedavg", "fedbio", "fedbioacc")


class EngineStepError(RuntimeError):
    """A local step failed; carries the step index and client."""

    def __init__(self, step: int, client: int, cause: Exception):
        self.step = step
        self.client = client
        super().__init__(f"step {step}, client {client}: {cause}")


@dataclass
class ClientState:
    """One client's iterates, momentum and private random stream."""

    x: Vector
    rng: RngStream
    y: Optional[Vector] = None
    nu: Optional[Vector] = None
    omega: Optional[Vector] = None
    x_prev: Optional[Vector] = None
    y_prev: Optional[Vector] = None


@dataclass(frozen=True)
class RunConfig:
    """Everything one run depends on, seed included.

    gamma / eta_outer are the inner / outer step sizes; for fedbioacc they
    are multiplied by the decaying schedule alpha_t = delta/(u + sigma^2 t)^(1/3)
    governed by (delta, u, sigma), with momentum decay controlled by
    (c_nu, c_omega). fedavg reads its minibatch size from neumann.batch_f.
    """

    algorithm: str
    num_clients: int
    sync_interval: int
    total_steps: int
    gamma: float = 0.1
    eta_outer: float = 0.1
    c_nu: float = 1.0
    c_omega: float = 1.0
    delta: float = 0.1
    u: float = 1.0
    sigma: float = 1.0
    neumann: NeumannConfig = field(default_factory=lambda: NeumannConfig(eta=0.5, q_terms=10))
    solve: LinearSolveConfig = field(default_factory=LinearSolveConfig)
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}, expected one of {ALGORITHMS}")
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.sync_interval < 1:
            raise ValueError(f"sync_interval must be >= 1, got {self.sync_interval}")
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.algorithm == "fedbioacc":
            if self.u <= 0:
                raise ValueError(f"u must be positive, got {self.u}")
            if self.delta <= 0:
                raise ValueError(f"delta must be positive, got {self.delta}")
            if self.c_nu < 0 or self.c_omega < 0:
                raise ValueError("momentum constants must be nonnegative")
            alpha_1 = alpha_schedule(self, 1)
            for name, c in (("c_nu", self.c_nu), ("c_omega", self.c_omega)):
                # c * alpha_1^2 == 1 keeps the momentum coefficient at exactly
                # zero (a plain stochastic step), so only > 1 is invalid.
                if c * alpha_1**2 > 1 + 1e-12:
                    raise ValueError(
                        f"{name} * alpha_1^2 = {c * alpha_1 ** 2:.3g} > 1; the momentum "
                        f"coefficient would leave [0, 1] during the run"
                    )

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    clients: list[ClientState]
    records: list["diagnostics.MetricsRecord"]
    config: RunConfig


def alpha_schedule(cfg: RunConfig, t: int) -> float:
    """Decaying step multiplier delta / (u + sigma^2 t)^(1/3)."""
    if t < 1:
        raise ValueError(f"schedule is defined for t >= 1, got {t}")
    if cfg.u <= 0:
        raise ValueError(f"u must be positive, got {cfg.u}")
    return cfg.delta / (cfg.u + cfg.sigma**2 * t) ** (1.0 / 3.0)


# ---------------------------------------------------------------------------
# Local steps
# ---------------------------------------------------------------------------


def fedavg_local_step(
    client: ClientState, oracle: SingleLevelOracle, lr: float, batch_size: int = 0
) -> ClientState:
    """One local gradient step x <- x - lr * grad(x; B)."""
    batch = oracle.sample_minibatch(client.rng, batch_size)
    grad = oracle.grad(client.x, batch)
    client.nu = grad
    client.x_prev = client.x
    client.x = client.x - lr * grad
    return client


def fedbio_local_step(
    client: ClientState,
    oracle: BilevelOracle,
    gamma: float,
    eta: float,
    solve: LinearSolveConfig = LinearSolveConfig(),
) -> ClientState:
    """Deterministic alternating step: both directions taken at the
    pre-update point, inner variable by the inner gradient, outer variable
    by the exact hypergradient."""
    x, y = client.x, client.y
    omega = oracle.grad_y_g(x, y)
    nu = phi_exact(oracle, x, y, solve)
    client.omega = omega
    client.nu = nu
    client.x_prev = x
    client.y_prev = y
    client.y = y - gamma * omega
    client.x = x - eta * nu
    return client


def fedbioacc_local_step(
    client: ClientState, oracle: BilevelOracle, cfg: RunConfig, t: int
) -> ClientState:
    """One accelerated stochastic step with recursive momentum.

    The inner-gradient batch and the full hypergradient batch set are each
    drawn once and reused at both the current and the previous point, so
    the momentum corrections difference out the shared sampling noise.
    The first step has no history and uses the plain estimates.
    """
    x, y = client.x, client.y
    batch_y = oracle.sample_minibatch(client.rng, "g", cfg.neumann.batch_g)
    batches_x = draw_phi_batches(oracle, cfg.neumann, client.rng)

    if t == 1:
        omega = oracle.grad_y_g(x, y, batch_y)
        nu = phi_with_batches(oracle, x, y, cfg.neumann, batches_x)
    else:
        alpha_prev = alpha_schedule(cfg, t - 1)
        grad_now = oracle.grad_y_g(x, y, batch_y)
        grad_prev = oracle.grad_y_g(client.x_prev, client.y_prev, batch_y)
        omega = grad_now + (1.0 - cfg.c_omega * alpha_prev**2) * (client.omega - grad_prev)
        mu_now = phi_with_batches(oracle, x, y, cfg.neumann, batches_x)
        mu_prev = phi_with_batches(oracle, client.x_prev, client.y_prev, cfg.neumann, batches_x)
        nu = mu_now + (1.0 - cfg.c_nu * alpha_prev**2) * (client.nu - mu_prev)

    alpha_t = alpha_schedule(cfg, t)
    client.omega = omega
    client.nu = nu
    client.x_prev = x
    client.y_prev = y
    client.y = y - cfg.gamma * alpha_t * omega
    client.x = x - cfg.eta_outer * alpha_t * nu
    return client


def communicate(clients: Sequence[ClientState], algorithm: str) -> Sequence[ClientState]:
    """Server averaging barrier.

    fedavg / fedbio replace every client's outer iterate with the mean.
    fedbioacc additionally averages the stored pre-update iterate (so the
    next momentum evaluation happens at the averaged previous point) and
    the outer momentum. The inner variable is never averaged.
    """
    if not clients:
        raise ValueError("communicate: empty client list")
    x_bar = mean_of_vectors([c.x for c in clients])
    if algorithm == "fedbioacc":
        x_prev_bar = mean_of_vectors([c.x_prev for c in clients])
        nu_bar = mean_of_vectors([c.nu for c in clients])
        for c in clients:
            c.x = x_bar.copy()
            c.x_prev = x_prev_bar.copy()
            c.nu = nu_bar.copy()
    else:
        for c in clients:
            c.x = x_bar.copy()
    return clients


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------


def _make_clients(cfg: RunConfig, oracles, x0, y0) -> list[ClientState]:
    bilevel = cfg.algorithm in ("fedbio", "fedbioacc")
    if bilevel:
        dim_x, dim_y = oracles[0].dim_x, oracles[0].dim_y
        x_init = np.zeros(dim_x) if x0 is None else np.asarray(x0, dtype=np.float64)
        y_init = np.zeros(dim_y) if y0 is None else np.asarray(y0, dtype=np.float64)
    else:
        dim = oracles[0].dim
        x_init = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=np.float64)
        y_init = None
    clients = []
    for m in range(cfg.num_clients):
        clients.append(
            ClientState(
                x=x_init.copy(),
                y=None if y_init is None else y_init.copy(),
                rng=RngStream(cfg.seed, stream_id=m),
            )
        )
    return clients


def run(
    cfg: RunConfig,
    oracles: Sequence,
    sink: Optional["diagnostics.MetricsCollector"] = None,
    x0: Optional[Vector] = None,
    y0: Optional[Vector] = None,
    project_x: Optional[Callable[[Vector], Vector]] = None,
    workers: int = 1,
) -> RunResult:
    """Execute total_steps federated steps and collect per-step metrics.

    The sink observes every step's pre-update snapshot (the virtual
    average over clients is computed for measurement even on steps with no
    communication). Averaging happens at steps where (t + 1) is a multiple
    of the sync interval. project_x, when given, is applied to each
    client's outer iterate after every local update.
    """
    if len(oracles) != cfg.num_clients:
        raise ValueError(f"expected {cfg.num_clients} oracles, got {len(oracles)}")
    clients = _make_clients(cfg, oracles, x0, y0)
    if sink is None:
        sink = diagnostics.MetricsCollector()

    def local_step(m: int, t: int) -> None:
        client, oracle = clients[m], oracles[m]
        try:
            if cfg.algorithm == "fedavg":
                fedavg_local_step(client, oracle, cfg.eta_outer, cfg.neumann.batch_f)
            elif cfg.algorithm == "fedbio":
                fedbio_local_step(client, oracle, cfg.gamma, cfg.eta_outer, cfg.solve)
            else:
                fedbioacc_local_step(client, oracle, cfg, t)
        except Exception as exc:  # noqa: BLE001 - annotate with step context
            raise EngineStepError(t, m, exc) from exc
        if project_x is not None:
            client.x = project_x(client.x)

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(1, cfg.total_steps + 1):
            alpha_t = alpha_schedule(cfg, t) if cfg.algorithm == "fedbioacc" else None
            sink.observe(t, clients, oracles, algorithm=cfg.algorithm, alpha_t=alpha_t)
            if pool is not None:
                list(pool.map(lambda m: local_step(m, t), range(cfg.num_clients)))
            else:
                for m in range(cfg.num_clients):
                    local_step(m, t)
            if (t + 1) % cfg.sync_interval == 0:
                communicate(clients, cfg.algorithm)
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(clients=clients, records=sink.records, config=cfg)
