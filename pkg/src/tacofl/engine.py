"""Round orchestration: broadcast, local passes, aggregation, global step,
freeloader detection, and the final momentum-adjusted model output."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit
from .config import RunConfig
from .data import (FREELOADER, ClientShard, Dataset, PartitionSpec, client_rng, derive_seed,
                   gen_gaussian_mixture, load_idx, partition, sample_minibatch, train_test_split)
from .model import Batch, ModelSpec, accuracy, init_params, loss_and_grad
from .numkit import NonFiniteError
from .strategies import (ClientAux, ServerAux, Strategy, Upload, adjust_local_gradient,
                         aggregate, correction_alpha)

log = logging.getLogger(__name__)

SEED_DATA, SEED_SPLIT, SEED_PARTITION, SEED_INIT = 1, 2, 3, 4


class DivergenceError(RuntimeError):
    def __init__(self, message: str, client_id: int | None = None, step: int | None = None,
                 round_index: int | None = None):
        super().__init__(message)
        self.client_id = client_id
        self.step = step
        self.round_index = round_index


@dataclass
class Setup:
    cfg: RunConfig
    spec: ModelSpec
    train: Dataset
    test: Dataset
    shards: list[ClientShard]

    @property
    def groups(self) -> dict[int, str]:
        out = {}
        for s in self.shards:
            if s.behavior == FREELOADER:
                out[s.client_id] = "freeloaders"
            elif s.group is not None:
                out[s.client_id] = "group_" + "ABCDEFGHIJKLMNOPQRSTUVWXYZ"[s.group % 26]
            else:
                out[s.client_id] = "all"
        return out


def build_setup(cfg: RunConfig) -> Setup:
    d = cfg.data
    if d.source == "idx":
        ds = load_idx(d.images, d.labels, d.num_classes)
    else:
        ds = gen_gaussian_mixture(d.dim, d.num_classes, d.n_per_class, d.sep,
                                  derive_seed(cfg.seed, SEED_DATA))
    train, test = train_test_split(ds, d.test_fraction, derive_seed(cfg.seed, SEED_SPLIT))
    p = d.partition
    pspec = PartitionSpec(p.scheme, cfg.clients, derive_seed(cfg.seed, SEED_PARTITION),
                          p.phi, p.groups)
    shards = partition(train, pspec, cfg.freeloaders)
    return Setup(cfg, cfg.model_spec(ds.dim, ds.num_classes), train, test, shards)


@dataclass
class TrainState:
    w: np.ndarray
    w_prev: np.ndarray
    server: ServerAux
    client_aux: dict[int, ClientAux]
    violation_count: dict[int, int]
    active: list[int]
    expelled: list[int]
    rngs: dict[int, np.random.Generator]


@dataclass
class LocalResult:
    delta: np.ndarray
    grad_evals: int
    grad_sum: np.ndarray
    drift: float = 0.0
    v_last: np.ndarray | None = None


@dataclass
class RoundRecord:
    t: int
    active: list[int]
    uploads: dict[int, np.ndarray]
    alpha_used: dict[int, float]
    alpha: dict[int, float]
    weights: dict[int, float]
    delta_prev: np.ndarray
    delta_next: np.ndarray
    tilde_delta: np.ndarray
    w: np.ndarray
    w_next: np.ndarray
    flagged: list[int]
    expelled: list[int]
    grad_evals: dict[int, int]
    test_acc: float
    train_loss: float
    drift: float
    alpha_stem: float
    rho: dict[int, float] = field(default_factory=dict)
    newly_expelled: list[int] = field(default_factory=list)


@dataclass
class Trace:
    cfg: RunConfig
    w0: np.ndarray
    records: list[RoundRecord]
    w_final: np.ndarray
    z_final: np.ndarray
    alpha_final: float
    groups: dict[int, str]
    behaviors: dict[int, str]
    diverged: dict | None = None
    initial_acc: float = 0.0

    @property
    def accuracies(self) -> list[float]:
        return [r.test_acc for r in self.records]

    @property
    def final_acc(self) -> float:
        if self.diverged is not None:
            return float("nan")
        return self.records[-1].test_acc if self.records else self.initial_acc

    @property
    def freeloaders(self) -> set[int]:
        return {i for i, b in self.behaviors.items() if b == FREELOADER}


def effective_strategy(cfg: RunConfig) -> Strategy:
    if cfg.analysis_mode and cfg.strategy.name == "taco":
        return replace(cfg.strategy, gamma=1.0)
    return cfg.strategy


def detect_freeloaders(alpha: dict[int, float], kappa: float, lam: int,
                       violation_count: dict[int, int]) -> tuple[list[int], dict[int, int], list[int]]:
    """Flag clients whose coefficient reaches ``kappa``; expel at ``lam`` flags.

    Returns (flagged, updated counters, newly expelled).
    """
    counts = dict(violation_count)
    flagged = sorted(i for i, a in alpha.items() if a >= kappa)
    for i in flagged:
        counts[i] = counts.get(i, 0) + 1
    expelled = [i for i in flagged if counts[i] >= lam]
    return flagged, counts, expelled


def finalize(w_T: np.ndarray, w_prev: np.ndarray, alpha_T: float) -> np.ndarray:
    """Momentum-adjusted output z_T = w_T + (1 - alpha_T)(w_T - w_{T-1})."""
    return w_T + (1.0 - alpha_T) * (w_T - w_prev)


class Simulator:
    def __init__(self, cfg: RunConfig, threads: int = 1, setup: Setup | None = None):
        self.cfg = cfg
        self.setup = setup or build_setup(cfg)
        self.strategy = effective_strategy(cfg)
        self.threads = max(1, int(threads))
        self.spec = self.setup.spec
        self._train_batch = self.setup.train.as_batch()
        self._test_batch = self.setup.test.as_batch()
        self._shard_data = {s.client_id: self.setup.train.subset(s.indices).as_batch()
                            for s in self.setup.shards}

    @property
    def detection_on(self) -> bool:
        return self.cfg.detection.enabled and self.strategy.has_alpha

    def init_state(self) -> TrainState:
        cfg = self.cfg
        w0 = init_params(self.spec, derive_seed(cfg.seed, SEED_INIT))
        P = w0.shape[0]
        ids = list(range(cfg.clients))
        return TrainState(
            w=w0, w_prev=w0.copy(),
            server=ServerAux.initial(self.strategy, P, cfg.clients),
            client_aux={i: ClientAux.initial(P) for i in ids},
            violation_count={i: 0 for i in ids},
            active=ids, expelled=[],
            rngs={i: client_rng(cfg.seed, i) for i in ids},
        )

    def _batch(self, client_id: int, state: TrainState) -> Batch:
        shard = self.setup.shards[client_id]
        if self.cfg.full_batch:
            return self._shard_data[client_id]
        return sample_minibatch(shard, self.setup.train, self.cfg.batch_size, state.rngs[client_id])

    def local_pass(self, client_id: int, state: TrainState, alpha_i: float = 1.0) -> LocalResult:
        cfg, strat = self.cfg, self.strategy
        K, eta_l = cfg.local_steps, cfg.eta_l
        w_t = state.w
        P = w_t.shape[0]
        if self.setup.shards[client_id].behavior == FREELOADER:
            return LocalResult(delta=(K * eta_l) * state.server.delta, grad_evals=0,
                               grad_sum=numkit.zeros(P))

        aux = state.client_aux[client_id]
        aux.v_prev = aux.prev_w = None
        w = w_t.copy()
        grad_sum = numkit.zeros(P)
        drift = 0.0
        evals = 0
        v = None
        for k in range(K):
            batch = self._batch(client_id, state)

            def grad_at(x, batch=batch):
                nonlocal evals
                evals += 1
                return loss_and_grad(self.spec, x, batch)[1]

            try:
                g = grad_at(w)
                grad_sum += g
                drift += numkit.norm2(w_t - w) ** 2
                v = adjust_local_gradient(strat, g, w, w_t, state.server, aux, client_id, k,
                                          grad_at=grad_at, alpha_i=alpha_i)
                w = numkit.axpy(w, -eta_l, v)
            except NonFiniteError as e:
                raise DivergenceError(f"client {client_id} diverged at local step {k}: {e}",
                                      client_id, k) from None
        return LocalResult(delta=w_t - w, grad_evals=evals, grad_sum=grad_sum,
                           drift=drift, v_last=v if strat.name == "stem" else None)

    def _map(self, fn, items):
        if self.threads == 1 or len(items) < 2:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    def run_round(self, t: int, state: TrainState) -> RoundRecord:
        cfg, strat = self.cfg, self.strategy
        active = list(state.active)
        if not active:
            raise ValueError("no active clients left")
        if strat.has_alpha:
            alpha_used = {i: correction_alpha(strat, state.server, i, active) for i in active}
        else:
            alpha_used = {}

        results = self._map(lambda i: self.local_pass(i, state, alpha_used.get(i, 1.0)), active)
        uploads = [Upload(i, r.delta, len(self.setup.shards[i]), r.v_last)
                   for i, r in zip(active, results)]

        try:
            agg = aggregate(strat, uploads, state.server, state.client_aux, cfg.local_steps,
                            cfg.eta_l, cfg.eta_g if cfg.eta_g > 0 else 1.0, cfg.analysis_mode)
            w_next = numkit.axpy(state.w, -cfg.eta_g, agg.delta_next)
        except NonFiniteError as e:
            raise DivergenceError(f"aggregation diverged: {e}") from None

        tilde = numkit.zeros(state.w.shape[0])
        for r in results:
            tilde += r.grad_sum
        tilde /= cfg.local_steps * len(active)

        flagged, newly = [], []
        if self.detection_on:
            flagged, state.violation_count, newly = detect_freeloaders(
                agg.alpha_next, cfg.detection.kappa, cfg.detection.lam, state.violation_count)
            if newly:
                state.expelled = sorted(state.expelled + newly)
                state.active = [i for i in state.active if i not in newly]

        try:
            train_loss, _ = loss_and_grad(self.spec, w_next, self._train_batch)
        except NonFiniteError:
            train_loss = float("inf")
        test_acc = accuracy(self.spec, w_next, self._test_batch)

        record = RoundRecord(
            t=t, active=active,
            uploads={u.client_id: u.delta for u in uploads},
            alpha_used=alpha_used, alpha=agg.alpha_next, weights=agg.weights,
            delta_prev=state.server.delta, delta_next=agg.delta_next, tilde_delta=tilde,
            w=state.w, w_next=w_next, flagged=flagged, expelled=list(state.expelled),
            grad_evals={i: r.grad_evals for i, r in zip(active, results)},
            test_acc=test_acc, train_loss=float(train_loss),
            drift=sum(r.drift for r in results) / (cfg.local_steps * len(active)),
            alpha_stem=state.server.alpha_stem,
            rho={i: float(agg.server.rho[i]) for i in active} if strat.name == "foolsgold" else {},
            newly_expelled=newly,
        )
        state.server = agg.server
        state.w_prev, state.w = state.w, w_next
        return record

    def final_alpha(self, state: TrainState) -> float:
        if not self.strategy.has_alpha or not state.active:
            return 1.0
        return float(np.mean([correction_alpha(self.strategy, state.server, i, state.active)
                              for i in state.active]))

    def run(self) -> Trace:
        cfg = self.cfg
        state = self.init_state()
        w0 = state.w.copy()
        records: list[RoundRecord] = []
        diverged = None
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for t in range(cfg.rounds):
                try:
                    records.append(self.run_round(t, state))
                except DivergenceError as e:
                    diverged = {"round": t, "client": e.client_id, "step": e.step,
                                "message": str(e)}
                    log.warning("run diverged in round %d: %s", t, e)
                    break
                if not state.active:
                    log.warning("every client was expelled after round %d", t)
                    break
        alpha_T = self.final_alpha(state)
        z = finalize(state.w, state.w_prev, alpha_T)
        return Trace(cfg=cfg, w0=w0, records=records, w_final=state.w.copy(), z_final=z,
                     alpha_final=alpha_T, groups=self.setup.groups,
                     behaviors={s.client_id: s.behavior for s in self.setup.shards},
                     diverged=diverged,
                     initial_acc=accuracy(self.spec, w0, self._test_batch))


def run(cfg: RunConfig, threads: int = 1) -> Trace:
    return Simulator(cfg, threads=threads).run()
