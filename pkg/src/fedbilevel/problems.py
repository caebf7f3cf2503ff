"""Concrete bilevel problem instances.

Two families:

* A synthetic quadratic family with closed-form inner solutions,
  hypergradients and minimizer, used as the verification bedrock. A
  heterogeneity knob spreads the per-client coupling matrices and targets;
  optional per-sample target noise turns it into a finite-sum stochastic
  instance with exactly unbiased minibatch oracles.
* The group-fair weighted logistic-regression task: outer variable = group
  weights on the training loss, inner variable = model parameters, outer
  objective = unweighted loss on a group-balanced validation set.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from . import fedengine
from .dataio import TabularDataset, build_balanced_validation, partition_iid, partition_noniid
from .numerics import RngStream, Vector, simplex_project
from .oracle import (
    FULL_F,
    FULL_G,
    FULL_HESSIAN,
    BilevelOracle,
    Minibatch,
    OracleConstants,
    SingleLevelOracle,
)

DEFAULT_WEIGHT_FLOOR = 0.01


# ---------------------------------------------------------------------------
# Quadratic family
# ---------------------------------------------------------------------------


class QuadraticBilevelOracle(BilevelOracle):
    """g(x,y) = (y - Ax)' H (y - Ax) / 2,  f(x,y) = ||y - b||^2 / 2.

    Optional extras:
      * x_coupling c > 0 adds c/2 * ||x - d||^2 to f, exercising the
        direct outer-gradient term.
      * (noise_f, noise_g) tables of shape (N, dim_y) make the instance a
        finite sum over N samples: sample i shifts the f target to
        b + noise_f[i] and the inner target to Ax + noise_g[i]. The tables
        are mean-centered so minibatch oracles are exactly unbiased.
        Hessian and coupling products are sample-independent.
    """

    def __init__(
        self,
        coupling: np.ndarray,
        hessian: np.ndarray,
        target: Vector,
        x_coupling: float = 0.0,
        x_center: Optional[Vector] = None,
        noise_f: Optional[np.ndarray] = None,
        noise_g: Optional[np.ndarray] = None,
    ):
        self.A = np.asarray(coupling, dtype=np.float64)
        self.H = np.asarray(hessian, dtype=np.float64)
        self.b = np.asarray(target, dtype=np.float64)
        self.dim_y, self.dim_x = self.A.shape
        if self.H.shape != (self.dim_y, self.dim_y):
            raise ValueError("hessian shape inconsistent with coupling")
        if self.b.shape != (self.dim_y,):
            raise ValueError("target shape inconsistent with coupling")
        eigvals = np.linalg.eigvalsh(self.H)
        if eigvals[0] <= 0:
            raise ValueError(f"hessian must be positive definite, min eigenvalue {eigvals[0]}")
        self.strong_convexity_mu = float(eigvals[0])
        self.x_coupling = float(x_coupling)
        self.x_center = (
            np.zeros(self.dim_x) if x_center is None else np.asarray(x_center, dtype=np.float64)
        )

        def _center(table):
            if table is None:
                return None
            table = np.asarray(table, dtype=np.float64)
            return table - table.mean(axis=0)

        self._noise_f = _center(noise_f)
        self._noise_g = _center(noise_g)
        self.num_samples_f = 0 if self._noise_f is None else self._noise_f.shape[0]
        self.num_samples_g = 0 if self._noise_g is None else self._noise_g.shape[0]
        # Residual means after centering; keep ground truth exact to the finite sum.
        self._noise_f_mean = (
            np.zeros(self.dim_y) if self._noise_f is None else self._noise_f.mean(axis=0)
        )
        self._noise_g_mean = (
            np.zeros(self.dim_y) if self._noise_g is None else self._noise_g.mean(axis=0)
        )
        self.constants = OracleConstants(
            lipschitz_l=float(eigvals[-1]),
            cross_bound=float(np.linalg.norm(self.A.T @ self.H, 2)),
            cross_lipschitz=0.0,
            hess_lipschitz=0.0,
        )

    # -- noise lookups ------------------------------------------------------

    def _f_shift(self, batch: Minibatch) -> Vector:
        if self._noise_f is None:
            return np.zeros(self.dim_y)
        if batch.is_full:
            return self._noise_f_mean
        return self._noise_f[list(batch.indices)].mean(axis=0)

    def _g_shift(self, batch: Minibatch) -> Vector:
        if self._noise_g is None:
            return np.zeros(self.dim_y)
        if batch.is_full:
            return self._noise_g_mean
        return self._noise_g[list(batch.indices)].mean(axis=0)

    # -- oracle surface ------------------------------------------------------

    def f_value(self, x, y, batch=FULL_F) -> float:
        self._check_xy(x, y)
        if self._noise_f is None or batch.is_full:
            rows = self._noise_f if self._noise_f is not None else np.zeros((1, self.dim_y))
        else:
            rows = self._noise_f[list(batch.indices)]
        resid = y - self.b - rows
        value = 0.5 * float((resid * resid).sum(axis=1).mean())
        if self.x_coupling:
            dx = x - self.x_center
            value += 0.5 * self.x_coupling * float(dx @ dx)
        return value

    def g_value(self, x, y, batch=FULL_G) -> float:
        self._check_xy(x, y)
        if self._noise_g is None or batch.is_full:
            rows = self._noise_g if self._noise_g is not None else np.zeros((1, self.dim_y))
        else:
            rows = self._noise_g[list(batch.indices)]
        resid = y - self.A @ x - rows
        return 0.5 * float(np.einsum("ij,jk,ik->i", resid, self.H, resid).mean())

    def grad_x_f(self, x, y, batch=FULL_F) -> Vector:
        self._check_xy(x, y)
        if self.x_coupling:
            return self.x_coupling * (x - self.x_center)
        return np.zeros(self.dim_x)

    def grad_y_f(self, x, y, batch=FULL_F) -> Vector:
        self._check_xy(x, y)
        return y - self.b - self._f_shift(batch)

    def grad_y_g(self, x, y, batch=FULL_G) -> Vector:
        self._check_xy(x, y)
        return self.H @ (y - self.A @ x - self._g_shift(batch))

    def hvp_yy_g(self, x, y, v, batch=FULL_HESSIAN) -> Vector:
        self._check_xy(x, y)
        self._check_v(v)
        return self.H @ v

    def jvp_xy_g(self, x, y, v, batch=FULL_G) -> Vector:
        self._check_xy(x, y)
        self._check_v(v)
        return -(self.A.T @ (self.H @ v))

    def inner_solution(self, x) -> Vector:
        return self.A @ x + self._g_shift(FULL_G)


@dataclass
class QuadraticGroundTruth:
    """Closed-form quantities for a list of quadratic clients."""

    oracles: list[QuadraticBilevelOracle]

    def y_star(self, client: int, x: Vector) -> Vector:
        return self.oracles[client].inner_solution(x)

    def client_grad_h(self, client: int, x: Vector) -> Vector:
        o = self.oracles[client]
        y = o.inner_solution(x)
        grad = o.A.T @ (y - o.b - o._noise_f_mean)
        if o.x_coupling:
            grad = grad + o.x_coupling * (x - o.x_center)
        return grad

    def grad_h(self, x: Vector) -> Vector:
        return np.mean([self.client_grad_h(m, x) for m in range(len(self.oracles))], axis=0)

    def h_value(self, x: Vector) -> float:
        return float(
            np.mean(
                [o.f_value(x, o.inner_solution(x), FULL_F) for o in self.oracles]
            )
        )

    def x_star(self) -> Vector:
        """Minimizer of the averaged outer objective, when it is unique."""
        dim_x = self.oracles[0].dim_x
        lhs = np.zeros((dim_x, dim_x))
        rhs = np.zeros(dim_x)
        for o in self.oracles:
            lhs += o.A.T @ o.A + o.x_coupling * np.eye(dim_x)
            rhs += o.A.T @ (o.b + o._noise_f_mean - o._g_shift(FULL_G)) + o.x_coupling * o.x_center
        if np.linalg.matrix_rank(lhs) < dim_x:
            raise np.linalg.LinAlgError("averaged outer objective has no unique minimizer")
        return np.linalg.solve(lhs, rhs)


def make_quadratic(
    dim_x: int,
    dim_y: int,
    num_clients: int,
    mu: float,
    smooth_l: float,
    zeta_scale: float,
    seed: int,
    num_samples: int = 0,
    noise_sigma: float = 0.0,
    x_coupling: float = 0.0,
) -> tuple[list[QuadraticBilevelOracle], QuadraticGroundTruth]:
    """Generate a heterogeneous quadratic bilevel family.

    The inner Hessian is shared across clients with spectrum spanning
    [mu, smooth_l]; heterogeneity enters only through the per-client
    coupling matrices and targets, scaled by zeta_scale (0 makes every
    client identical). num_samples > 0 adds centered per-sample target
    noise of scale noise_sigma, producing stochastic oracles.
    """
    if not 0 < mu <= smooth_l:
        raise ValueError(f"need 0 < mu <= smooth_l, got mu={mu}, L={smooth_l}")
    if num_clients < 1:
        raise ValueError(f"num_clients must be >= 1, got {num_clients}")
    rng = RngStream(seed, stream_id=90_001)

    # Shared base coupling with orthonormal columns, so A0' A0 = I.
    gauss = rng.normal((dim_y, dim_x))
    if dim_y >= dim_x:
        q_mat, _ = np.linalg.qr(gauss)
        base_a = q_mat[:, :dim_x]
    else:
        base_a = gauss / max(1.0, np.linalg.norm(gauss, 2))
    base_b = rng.normal(dim_y)

    eigs = np.linspace(mu, smooth_l, dim_y) if dim_y > 1 else np.array([mu])
    q_h, _ = np.linalg.qr(rng.normal((dim_y, dim_y)))
    hessian = (q_h * eigs) @ q_h.T
    hessian = 0.5 * (hessian + hessian.T)

    oracles = []
    for _ in range(num_clients):
        delta_a = rng.normal((dim_y, dim_x)) / np.sqrt(dim_y * dim_x)
        delta_b = rng.normal(dim_y)
        a_m = base_a + zeta_scale * delta_a
        b_m = base_b + zeta_scale * delta_b
        noise_f = noise_g = None
        if num_samples > 0:
            noise_f = noise_sigma * rng.normal((num_samples, dim_y))
            noise_g = noise_sigma * rng.normal((num_samples, dim_y))
        oracles.append(
            QuadraticBilevelOracle(
                coupling=a_m,
                hessian=hessian,
                target=b_m,
                x_coupling=x_coupling,
                noise_f=noise_f,
                noise_g=noise_g,
            )
        )
    return oracles, QuadraticGroundTruth(oracles)


class QuadraticSingleLevel(SingleLevelOracle):
    """f(x) = ||x - c||^2 / 2 with optional per-sample target noise."""

    def __init__(self, center: Vector, noise: Optional[np.ndarray] = None):
        self.center = np.asarray(center, dtype=np.float64)
        self.dim = self.center.shape[0]
        self._noise = None
        if noise is not None:
            noise = np.asarray(noise, dtype=np.float64)
            self._noise = noise - noise.mean(axis=0)
        self.num_samples = 0 if self._noise is None else self._noise.shape[0]

    def _shift(self, batch: Minibatch) -> Vector:
        if self._noise is None or batch.is_full:
            return np.zeros(self.dim)
        return self._noise[list(batch.indices)].mean(axis=0)

    def value(self, x, batch=FULL_F) -> float:
        resid = x - self.center - self._shift(batch)
        return 0.5 * float(resid @ resid)

    def grad(self, x, batch=FULL_F) -> Vector:
        return x - self.center - self._shift(batch)


# ---------------------------------------------------------------------------
# Group-fair weighted logistic regression
# ---------------------------------------------------------------------------


def logistic_loss_terms(theta: Vector, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    scores = features @ theta
    return np.logaddexp(0.0, scores) - labels * scores


@dataclass
class FairFLClientData:
    train: TabularDataset
    validation: TabularDataset


@dataclass
class FairFLSpec:
    """Per-client data plus the inner-problem regularization.

    The inner problem is strongly convex with constant l2_reg thanks to the
    ridge term; validation sets must be exactly group balanced.
    """

    clients: list[FairFLClientData]
    l2_reg: float = 1e-2
    weight_floor: float = DEFAULT_WEIGHT_FLOOR

    def __post_init__(self):
        if self.l2_reg <= 0:
            raise ValueError(f"l2_reg must be positive, got {self.l2_reg}")
        for m, client in enumerate(self.clients):
            val = client.validation
            counts = val.group_sizes()
            present = counts[counts > 0]
            if len(present) and not (present == present[0]).all():
                raise ValueError(
                    f"client {m}: validation set is not group balanced, counts {counts.tolist()}"
                )

    @property
    def group_count(self) -> int:
        return self.clients[0].train.group_count

    @property
    def feature_dim(self) -> int:
        return self.clients[0].train.features.shape[1]

    @property
    def num_clients(self) -> int:
        return len(self.clients)


class FairFLOracle(BilevelOracle):
    """Bilevel oracle for one client of the group-weight tuning task.

    Outer variable x = group weights (dim = number of groups); inner
    variable y = model parameters. The outer objective does not depend on
    the weights directly, so grad_x_f is identically zero and the whole
    hypergradient flows through the mixed second derivative of g.
    """

    def __init__(self, train: TabularDataset, validation: TabularDataset, l2_reg: float):
        self.train = train
        self.validation = validation
        self.l2_reg = float(l2_reg)
        self.dim_x = train.group_count
        self.dim_y = train.features.shape[1]
        self.num_samples_f = len(validation)
        self.num_samples_g = len(train)
        self.strong_convexity_mu = self.l2_reg
        counts = train.group_sizes()
        for g in range(train.group_count):
            if counts[g] == 0:
                raise ValueError(f"group {g} has no training samples on this client")

    def _train_rows(self, batch: Minibatch):
        if batch.is_full:
            return self.train.features, self.train.labels, self.train.groups
        idx = list(batch.indices)
        return self.train.features[idx], self.train.labels[idx], self.train.groups[idx]

    def _val_rows(self, batch: Minibatch):
        if batch.is_full:
            return self.validation.features, self.validation.labels
        idx = list(batch.indices)
        return self.validation.features[idx], self.validation.labels[idx]

    def f_value(self, x, y, batch=FULL_F) -> float:
        self._check_xy(x, y)
        feats, labels = self._val_rows(batch)
        return float(logistic_loss_terms(y, feats, labels).mean())

    def g_value(self, x, y, batch=FULL_G) -> float:
        self._check_xy(x, y)
        feats, labels, groups = self._train_rows(batch)
        terms = logistic_loss_terms(y, feats, labels)
        return float((x[groups] * terms).mean()) + 0.5 * self.l2_reg * float(y @ y)

    def grad_x_f(self, x, y, batch=FULL_F) -> Vector:
        self._check_xy(x, y)
        return np.zeros(self.dim_x)

    def grad_y_f(self, x, y, batch=FULL_F) -> Vector:
        self._check_xy(x, y)
        feats, labels = self._val_rows(batch)
        resid = expit(feats @ y) - labels
        return feats.T @ resid / len(labels)

    def grad_y_g(self, x, y, batch=FULL_G) -> Vector:
        self._check_xy(x, y)
        feats, labels, groups = self._train_rows(batch)
        resid = x[groups] * (expit(feats @ y) - labels)
        return feats.T @ resid / len(labels) + self.l2_reg * y

    def hvp_yy_g(self, x, y, v, batch=FULL_HESSIAN) -> Vector:
        self._check_xy(x, y)
        self._check_v(v)
        feats, _, groups = self._train_rows(batch)
        prob = expit(feats @ y)
        weights = x[groups] * prob * (1.0 - prob)
        return feats.T @ (weights * (feats @ v)) / feats.shape[0] + self.l2_reg * v

    def jvp_xy_g(self, x, y, v, batch=FULL_G) -> Vector:
        self._check_xy(x, y)
        self._check_v(v)
        feats, labels, groups = self._train_rows(batch)
        contrib = (expit(feats @ y) - labels) * (feats @ v)
        out = np.zeros(self.dim_x)
        np.add.at(out, groups, contrib)
        return out / feats.shape[0]


def fairfl_oracle(spec: FairFLSpec, client: int) -> FairFLOracle:
    if not 0 <= client < spec.num_clients:
        raise IndexError(f"client {client} out of range [0, {spec.num_clients})")
    data = spec.clients[client]
    return FairFLOracle(data.train, data.validation, spec.l2_reg)


class WeightedLogisticOracle(SingleLevelOracle):
    """Group-weighted ridge logistic objective for the final-model stage."""

    def __init__(self, train: TabularDataset, weights: Vector, l2_reg: float):
        self.train = train
        self.weights = np.asarray(weights, dtype=np.float64)
        self.l2_reg = float(l2_reg)
        self.dim = train.features.shape[1]
        self.num_samples = len(train)

    def _rows(self, batch: Minibatch):
        if batch.is_full:
            return self.train.features, self.train.labels, self.train.groups
        idx = list(batch.indices)
        return self.train.features[idx], self.train.labels[idx], self.train.groups[idx]

    def value(self, x, batch=FULL_F) -> float:
        feats, labels, groups = self._rows(batch)
        terms = logistic_loss_terms(x, feats, labels)
        return float((self.weights[groups] * terms).mean()) + 0.5 * self.l2_reg * float(x @ x)

    def grad(self, x, batch=FULL_F) -> Vector:
        feats, labels, groups = self._rows(batch)
        resid = self.weights[groups] * (expit(feats @ x) - labels)
        return feats.T @ resid / len(labels) + self.l2_reg * x


# ---------------------------------------------------------------------------
# Synthetic generative task and the two-stage pipeline
# ---------------------------------------------------------------------------


def synthetic_group_shift_dataset(
    n: int,
    rng: RngStream,
    minority_frac: float = 1.0 / 11.0,
    majority_margin: float = 1.5,
    minority_positive_center: float = 0.0,
    minority_negative_center: float = -3.0,
) -> TabularDataset:
    """Two-group binary task whose pooled decision boundary is unfair.

    The majority group separates around 0 while the minority group's
    positives sit on the majority boundary, so an unweighted fit trades the
    minority true-positive rate away. Upweighting the minority group moves
    the boundary and shrinks the opportunity gap. Features: one informative
    coordinate, one noise coordinate, one constant intercept.
    """
    groups = (rng.uniform(n) < minority_frac).astype(int)
    labels = (rng.uniform(n) < 0.5).astype(int)
    centers = np.where(
        groups == 0,
        np.where(labels == 1, majority_margin, -majority_margin),
        np.where(labels == 1, minority_positive_center, minority_negative_center),
    )
    informative = centers + rng.normal(n)
    noise = rng.normal(n)
    features = np.column_stack([informative, noise, np.ones(n)])
    if not ((groups == 0).any() and (groups == 1).any()):
        raise ValueError("degenerate draw: a group is empty, increase n")
    return TabularDataset(
        features=features,
        labels=labels,
        groups=groups,
        feature_names=["informative", "noise", "intercept"],
        group_count=2,
    )


def build_fairfl_spec(
    train: TabularDataset,
    num_clients: int,
    distribution: str,
    per_group_validation: int,
    rng: RngStream,
    l2_reg: float = 1e-2,
    weight_floor: float = DEFAULT_WEIGHT_FLOOR,
) -> FairFLSpec:
    """Partition a train set across clients and carve balanced validation sets."""
    if distribution == "iid":
        shards = partition_iid(train, num_clients, rng)
    elif distribution == "noniid":
        shards = partition_noniid(train, rng, num_clients)
    else:
        raise ValueError(f"unknown distribution {distribution!r}, expected iid or noniid")
    clients = []
    for shard in shards:
        val, remaining = build_balanced_validation(shard, per_group_validation, rng)
        clients.append(FairFLClientData(train=remaining, validation=val))
    return FairFLSpec(clients=clients, l2_reg=l2_reg, weight_floor=weight_floor)


@dataclass
class TwoStageResult:
    weights: Vector
    model: Vector
    stage1: "fedengine.RunResult"
    stage2: "fedengine.RunResult"


def two_stage_train(
    spec: FairFLSpec,
    cfg: "fedengine.RunConfig",
    stage2_steps: Optional[int] = None,
    stage2_lr: Optional[float] = None,
    stage2_batch: Optional[int] = None,
) -> TwoStageResult:
    """Learn group weights by bilevel optimization, then fit the final model.

    Stage 1 runs the configured bilevel algorithm on the weight-tuning
    oracles, projecting the weights onto the floor-truncated simplex after
    every outer update. Stage 2 fits the weighted objective with the
    averaging baseline, reusing the learned weights.
    """
    if cfg.algorithm not in ("fedbio", "fedbioacc"):
        raise ValueError(f"stage 1 needs a bilevel algorithm, got {cfg.algorithm!r}")
    k = spec.group_count
    oracles = [fairfl_oracle(spec, m) for m in range(spec.num_clients)]
    project = lambda w: simplex_project(w, total=float(k), floor=spec.weight_floor)
    stage1 = fedengine.run(
        cfg,
        oracles,
        x0=np.ones(k),
        y0=np.zeros(spec.feature_dim),
        project_x=project,
    )
    weights = project(np.mean([c.x for c in stage1.clients], axis=0))

    stage2_cfg = fedengine.RunConfig(
        algorithm="fedavg",
        num_clients=cfg.num_clients,
        sync_interval=cfg.sync_interval,
        total_steps=stage2_steps if stage2_steps is not None else cfg.total_steps,
        gamma=cfg.gamma,
        eta_outer=stage2_lr if stage2_lr is not None else cfg.gamma,
        neumann=cfg.neumann
        if stage2_batch is None
        else dataclasses.replace(cfg.neumann, batch_f=stage2_batch),
        seed=cfg.seed + 7919,
    )
    stage2_oracles = [
        WeightedLogisticOracle(spec.clients[m].train, weights, spec.l2_reg)
        for m in range(spec.num_clients)
    ]
    stage2 = fedengine.run(stage2_cfg, stage2_oracles, x0=np.zeros(spec.feature_dim))
    model = np.mean([c.x for c in stage2.clients], axis=0)
    return TwoStageResult(weights=weights, model=model, stage1=stage1, stage2=stage2)
