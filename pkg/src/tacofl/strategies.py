"""Federated optimisation strategies.

Every strategy is expressed through three hooks that mirror the shared
round structure of the algorithms:

* ``adjust_local_gradient`` turns a raw minibatch gradient into the local
  update direction ``v`` (the caller applies ``w <- w - eta_l * v``);
* ``aggregate`` folds the client uploads into the global gradient and
  updates server/client auxiliary state;
* the auxiliary state itself (``ServerAux`` / ``ClientAux``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import numkit
from .numkit import EPS_ZERO, DimensionError

log = logging.getLogger(__name__)

NAMES = ("fedavg", "fedprox", "foolsgold", "scaffold", "stem", "fedacg", "taco")

# strategy -> {parameter: default}; None means "resolved from the run config"
PARAMS: dict[str, dict[str, object]] = {
    "fedavg": {},
    "fedprox": {"zeta": 0.1},
    "foolsgold": {"eps_w": 1e-6},
    "scaffold": {"alpha": 1.0},
    "stem": {"alpha0": 0.2, "decay": 2.0 / 3.0},
    "fedacg": {"beta": 0.001, "rho": 0.85},
    "taco": {"gamma": None, "tailored_correction": True,
             "tailored_aggregation": True, "fixed_alpha": None},
}

TACO_ALPHA_INIT = 0.1


@dataclass(frozen=True)
class Strategy:
    name: str
    zeta: float = 0.1
    eps_w: float = 1e-6
    alpha: float = 1.0
    alpha0: float = 0.2
    decay: float = 2.0 / 3.0
    beta: float = 0.001
    rho: float = 0.85
    gamma: float = 0.1
    tailored_correction: bool = True
    tailored_aggregation: bool = True
    fixed_alpha: float | None = None

    def __post_init__(self):
        if self.name not in NAMES:
            raise ValueError(f"unknown strategy {self.name!r}; expected one of {NAMES}")
        checks = {
            "zeta": self.zeta >= 0,
            "eps_w": self.eps_w > 0,
            "alpha": self.alpha > 0,
            "alpha0": 0 < self.alpha0 <= 1,
            "beta": self.beta >= 0,
            "rho": 0 <= self.rho < 1,
            # gamma == 0 is allowed so sensitivity sweeps can switch the correction off
            "gamma": 0 <= self.gamma <= 1,
            "fixed_alpha": self.fixed_alpha is None or 0 <= self.fixed_alpha <= 1,
        }
        for key, ok in checks.items():
            if key in PARAMS[self.name] and not ok:
                raise ValueError(f"strategy.{key} out of range: {getattr(self, key)!r}")

    def params(self) -> dict[str, object]:
        return {k: getattr(self, k) for k in PARAMS[self.name]}

    @property
    def has_alpha(self) -> bool:
        return self.name == "taco"


@dataclass
class ServerAux:
    delta: np.ndarray                  # global gradient Delta_t
    alpha: np.ndarray                  # TACO alpha_i^t, one slot per client id
    c_global: np.ndarray               # Scaffold c_t
    m: np.ndarray                      # FedACG m_t
    alpha_stem: float                  # STEM alpha_t
    rho: np.ndarray                    # FoolsGold weights of the last aggregation
    t: int = 0

    @classmethod
    def initial(cls, strategy: Strategy, num_params: int, num_clients: int) -> "ServerAux":
        return cls(
            delta=numkit.zeros(num_params),
            alpha=np.full(num_clients, TACO_ALPHA_INIT),
            c_global=numkit.zeros(num_params),
            m=numkit.zeros(num_params),
            alpha_stem=strategy.alpha0,
            rho=np.ones(num_clients),
        )

    def copy(self) -> "ServerAux":
        return replace(self, delta=self.delta.copy(), alpha=self.alpha.copy(),
                       c_global=self.c_global.copy(), m=self.m.copy(), rho=self.rho.copy())


@dataclass
class ClientAux:
    c_local: np.ndarray
    v_prev: np.ndarray | None = None
    prev_w: np.ndarray | None = None

    @classmethod
    def initial(cls, num_params: int) -> "ClientAux":
        return cls(c_local=numkit.zeros(num_params))


@dataclass
class Upload:
    client_id: int
    delta: np.ndarray
    n_samples: int = 1
    v_last: np.ndarray | None = None   # STEM only


@dataclass
class AggregateResult:
    delta_next: np.ndarray
    server: ServerAux
    alpha_next: dict[int, float] = field(default_factory=dict)
    weights: dict[int, float] = field(default_factory=dict)
    degenerate: bool = False


def correction_alpha(strategy: Strategy, server: ServerAux, client_id: int,
                     active: list[int] | None = None) -> float:
    """The alpha entering TACO's local correction factor (1 - alpha)."""
    if strategy.fixed_alpha is not None:
        return strategy.fixed_alpha
    if not strategy.tailored_correction:
        ids = active if active is not None else range(server.alpha.shape[0])
        return float(np.mean(server.alpha[list(ids)]))
    return float(server.alpha[client_id])


def adjust_local_gradient(strategy: Strategy, g: np.ndarray, w: np.ndarray,
                          w_round_start: np.ndarray, server: ServerAux, client: ClientAux,
                          client_id: int, k: int,
                          grad_at: Callable[[np.ndarray], np.ndarray] | None = None,
                          alpha_i: float | None = None) -> np.ndarray:
    """Local update direction for step ``k``.

    ``grad_at(w')`` must evaluate the *current* minibatch gradient at ``w'``;
    only STEM calls it. ``alpha_i`` overrides the TACO coefficient lookup.
    """
    if g.shape != w.shape or w.shape != w_round_start.shape:
        raise DimensionError("gradient and parameter vectors differ in length")
    name = strategy.name
    if name in ("fedavg", "foolsgold"):
        v = g
    elif name == "fedprox":
        v = numkit.axpy(g, strategy.zeta, w - w_round_start)
    elif name == "scaffold":
        v = numkit.axpy(g, strategy.alpha, server.c_global - client.c_local)
    elif name == "stem":
        if k == 0 or client.v_prev is None:
            v = g
        else:
            g_prev = grad_at(client.prev_w)
            v = numkit.axpy(g, 1.0 - server.alpha_stem, client.v_prev - g_prev)
        client.v_prev = v
        client.prev_w = w.copy()
    elif name == "fedacg":
        v = numkit.axpy(g, strategy.beta, w - w_round_start - server.m)
    else:  # taco
        a = correction_alpha(strategy, server, client_id) if alpha_i is None else alpha_i
        coef = strategy.gamma * (1.0 - a)
        v = g if coef == 0.0 else numkit.axpy(g, coef, server.delta)
    return numkit.check_finite(v, "local update direction")


def taco_alpha(prev_uploads, prev_alpha=None) -> np.ndarray:
    """Correction coefficients from the previous round's uploads.

    Combines each upload's share of the total upload magnitude with its
    (non-negative) cosine to the mean upload.
    """
    deltas = [numkit.as_vector(d) for d in prev_uploads]
    if not deltas:
        raise ValueError("taco_alpha needs at least one upload")
    if any(d.shape != deltas[0].shape for d in deltas):
        raise DimensionError("uploads differ in length")
    norms = np.array([numkit.norm2(d) for d in deltas])
    total = float(np.cumsum(norms)[-1])
    if total < EPS_ZERO:
        if prev_alpha is None:
            return np.full(len(deltas), TACO_ALPHA_INIT)
        return np.asarray(prev_alpha, dtype=np.float64).copy()
    mean = deltas[0].copy()
    for d in deltas[1:]:
        mean += d
    mean /= len(deltas)
    return np.array([(1.0 - n / total) * max(numkit.cosine(d, mean), 0.0)
                     for d, n in zip(deltas, norms)])


def _weighted_sum(vectors, weights) -> np.ndarray:
    out = numkit.zeros(vectors[0].shape[0])
    for v, a in zip(vectors, weights):
        out += a * v
    return out


def aggregate(strategy: Strategy, uploads: list[Upload], server: ServerAux,
              clients: dict[int, ClientAux] | None, K: int, eta_l: float, eta_g: float,
              analysis_mode: bool = False) -> AggregateResult:
    """Combine client uploads into the next global gradient."""
    if not uploads:
        raise ValueError("aggregate needs at least one upload")
    if K < 1 or eta_l <= 0 or eta_g <= 0:
        raise ValueError("K, eta_l and eta_g must be positive")
    P = server.delta.shape[0]
    if any(u.delta.shape != (P,) for u in uploads):
        raise DimensionError("upload length does not match the model")

    new = server.copy()
    new.t = server.t + 1
    ids = [u.client_id for u in uploads]
    deltas = [u.delta for u in uploads]
    N = len(uploads)
    uniform = [1.0 / N] * N
    result = AggregateResult(delta_next=numkit.zeros(P), server=new)
    name = strategy.name

    if name == "taco":
        alpha = taco_alpha(deltas, server.alpha[ids])
        new.alpha[ids] = alpha
        result.alpha_next = dict(zip(ids, alpha.tolist()))
        weights = uniform
        if strategy.tailored_aggregation and not analysis_mode:
            s = float(np.cumsum(alpha)[-1])
            if s < EPS_ZERO:
                log.warning("round %d: all TACO weights vanish, using uniform aggregation", server.t)
                result.degenerate = True
            else:
                weights = (alpha / s).tolist()
        delta_next = _weighted_sum(deltas, weights) / (K * eta_l)
    elif name == "foolsgold" and not analysis_mode:
        rho = np.array([max(numkit.cosine(server.delta, d), strategy.eps_w) for d in deltas])
        new.rho[ids] = rho
        weights = (rho / rho.sum()).tolist()
        delta_next = _weighted_sum(deltas, weights) / (K * eta_l)
    elif name == "stem":
        weights = uniform
        vs = [u.v_last if u.v_last is not None else numkit.zeros(P) for u in uploads]
        # v_{i,K-1} is a gradient; one local step (eta_l) puts it in upload units
        delta_next = _weighted_sum([d + eta_l * v for d, v in zip(deltas, vs)], weights) / (K * eta_l)
        new.alpha_stem = strategy.alpha0 / (server.t + 2) ** strategy.decay
    elif name == "fedacg":
        D = float(sum(u.n_samples for u in uploads))
        weights = [u.n_samples / D for u in uploads]
        mean_step = _weighted_sum(deltas, weights) / K      # per-step displacement
        new.m = strategy.rho * server.m + mean_step
        delta_next = mean_step / eta_l + new.m / eta_g
    else:  # fedavg, fedprox, scaffold, and foolsgold in analysis mode
        weights = uniform
        delta_next = _weighted_sum(deltas, weights) / (K * eta_l)

    if name == "scaffold" and clients is not None:
        shift = numkit.zeros(P)
        for u in uploads:
            ca = clients[u.client_id]
            c_new = ca.c_local - server.c_global + u.delta / (K * eta_l)
            shift += c_new - ca.c_local
            ca.c_local = c_new
        new.c_global = server.c_global + shift / N

    result.delta_next = numkit.check_finite(delta_next, "aggregated gradient")
    result.weights = dict(zip(ids, weights))
    new.delta = result.delta_next
    return result
