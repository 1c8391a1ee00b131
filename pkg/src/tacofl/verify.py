"""Numerical checks of the convergence-analysis objects along recorded traces."""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .config import RunConfig, override
from .engine import Setup, Trace, build_setup, run
from .metrics import final_detection, mean_std
from .model import Batch, ModelSpec, loss_and_grad
from .numkit import EPS_ZERO

log = logging.getLogger(__name__)


class NotAnalysisTrace(ValueError):
    pass


@dataclass
class AssumptionEstimate:
    mu_hat: dict[int, float]
    c_hat: dict[int, float]
    rounds_used: int
    grad_norms: list[float] = field(default_factory=list)


def _require_analysis(trace: Trace) -> None:
    if not trace.cfg.analysis_mode:
        raise NotAnalysisTrace("trace was not produced in analysis mode")


def round_alpha(trace: Trace, t: int) -> float:
    """Average correction coefficient applied during round ``t`` (1 without correction)."""
    if t == len(trace.records):
        return trace.alpha_final
    used = trace.records[t].alpha_used
    return float(np.mean(list(used.values()))) if used else 1.0


def lemma1_residuals(trace: Trace) -> list[float]:
    out = []
    for t, r in enumerate(trace.records):
        pred = r.tilde_delta + (1.0 - round_alpha(trace, t)) * r.delta_prev
        out.append(numkit.norm2(r.delta_next - pred))
    return out


def check_lemma1(trace: Trace) -> float:
    """Max over rounds of |Delta_{t+1} - tildeDelta_t - (1 - alpha_t) Delta_t|."""
    _require_analysis(trace)
    res = lemma1_residuals(trace)
    return max(res) if res else 0.0


def z_sequence(trace: Trace) -> list[np.ndarray]:
    """z_t = w_t + (1 - alpha_t)(w_t - w_{t-1}) for t = 0..T, with w_{-1} = w_0."""
    ws = [trace.w0] + [r.w_next for r in trace.records]
    zs = [ws[0].copy()]
    for t in range(1, len(ws)):
        zs.append(ws[t] + (1.0 - round_alpha(trace, t)) * (ws[t] - ws[t - 1]))
    return zs


def lemma2_residuals(trace: Trace) -> list[float]:
    zs = z_sequence(trace)
    eta_g = trace.cfg.eta_g
    return [numkit.norm2(zs[t + 1] - zs[t] + eta_g * r.tilde_delta)
            for t, r in enumerate(trace.records)]


def check_lemma2(trace: Trace) -> float:
    """Max over rounds of |z_{t+1} - z_t + eta_g tildeDelta_t|."""
    _require_analysis(trace)
    res = lemma2_residuals(trace)
    return max(res) if res else 0.0


def client_data(setup: Setup) -> Batch:
    """All samples dealt to clients (the global objective's dataset)."""
    idx = np.concatenate([s.indices for s in setup.shards])
    return Batch(setup.train.features[idx], setup.train.labels[idx])


def full_gradient(spec: ModelSpec, w: np.ndarray, data: Batch) -> np.ndarray:
    return loss_and_grad(spec, w, data)[1]


def estimate_assumption2(trace: Trace, data: Batch, spec: ModelSpec) -> AssumptionEstimate:
    mu: dict[int, float] = {}
    c: dict[int, float] = {}
    used = 0
    norms = []
    for r in trace.records:
        g = full_gradient(spec, r.w, data)
        gn = numkit.norm2(g)
        norms.append(gn)
        if gn < EPS_ZERO:
            continue
        used += 1
        for i, d in r.uploads.items():
            if trace.behaviors.get(i) == "freeloader":
                continue
            m = numkit.dot(g, d) / (gn * gn)
            cs = numkit.cosine(g, d)
            mu[i] = max(mu.get(i, -np.inf), m)
            c[i] = min(c.get(i, np.inf), cs)
    if used == 0:
        raise ValueError("no round with a usable global gradient")
    return AssumptionEstimate(mu, c, used, norms)


def estimate_L_G(trace: Trace, data: Batch, spec: ModelSpec, pairs: int = 200,
                 seed: int = 0) -> tuple[float, float]:
    """Empirical smoothness and gradient-bound surrogates along the trace."""
    ws = [trace.w0] + [r.w_next for r in trace.records]
    grads = [full_gradient(spec, w, data) for w in ws]
    G = max(numkit.norm2(g) for g in grads)
    rng = np.random.default_rng(seed)
    L = 0.0
    if len(ws) >= 2:
        for _ in range(pairs):
            a, b = rng.choice(len(ws), size=2, replace=False)
            dw = numkit.norm2(ws[a] - ws[b])
            if dw > EPS_ZERO:
                L = max(L, numkit.norm2(grads[a] - grads[b]) / dw)
    return L, G


def _values(x, keys=None) -> dict:
    if isinstance(x, Mapping):
        return dict(x)
    return dict(enumerate(x)) if keys is None else dict(zip(keys, x))


def compute_Yt(alpha, est: AssumptionEstimate, K: int, N: int, eta_l: float,
               L_hat: float, G_hat: float) -> float:
    """Over-correction term of the error bound for one round's coefficients."""
    if L_hat <= 0 or G_hat <= 0:
        raise ValueError("L_hat and G_hat must be positive")
    alpha = _values(alpha)
    ratios = []
    for i in sorted(est.mu_hat):
        ci = est.c_hat[i]
        if ci <= 0:
            log.warning("client %d has non-positive cosine bound %.3g; excluded", i, ci)
            continue
        ratios.append(est.mu_hat[i] / ci)
    if not ratios:
        raise ValueError("every client has a non-positive cosine bound")
    s = sum(1.0 - a for a in alpha.values()) * sum(ratios)
    return (L_hat * G_hat) ** 2 / (K ** 2 * N ** 4 * eta_l ** 2) * s * s


def Yt_series(trace: Trace, est: AssumptionEstimate, L_hat: float, G_hat: float) -> list[float]:
    cfg = trace.cfg
    out = []
    for r in trace.records:
        if r.alpha_used:
            out.append(compute_Yt(r.alpha_used, est, cfg.local_steps, len(r.active),
                                  cfg.eta_l, L_hat, G_hat))
    return out


def correction_budget(alpha, est: AssumptionEstimate) -> tuple[float, float]:
    """(tailored, uniform) values of sum_i (1 - alpha_i) * mu_i / c_i.

    The uniform variant spreads the same total sum_i (1 - alpha_i) evenly.
    """
    alpha = _values(alpha)
    ids = [i for i in sorted(alpha) if est.c_hat.get(i, 0.0) > 0]
    if not ids:
        raise ValueError("no client with a positive cosine bound")
    r = np.array([est.mu_hat[i] / est.c_hat[i] for i in ids])
    x = np.array([1.0 - alpha[i] for i in ids])
    return float(x @ r), float(x.mean() * r.sum())


def rate_slope(trace: Trace, data: Batch, spec: ModelSpec) -> float:
    """Log-log slope of the running mean of |grad f(z_t)|^2 against t."""
    zs = z_sequence(trace)[1:]
    if len(zs) < 3:
        raise ValueError("need at least three rounds")
    sq = np.array([numkit.norm2(full_gradient(spec, z, data)) ** 2 for z in zs])
    running = np.cumsum(sq) / np.arange(1, len(sq) + 1)
    t = np.arange(1, len(sq) + 1)
    return float(np.polyfit(np.log(t), np.log(running), 1)[0])


SWEEP_PATHS = {
    "gamma": "strategy.gamma",
    "kappa": "detection.kappa",
    "lambda": "detection.lambda",
    "phi": "data.partition.phi",
}


@dataclass
class SweepRow:
    value: float
    acc_mean: float
    acc_std: float
    tpr: float | None
    fpr: float | None
    diverged: int
    accs: list[float]
    seeds: list[int]


def sweep(param: str, values: Sequence, base_cfg: RunConfig, seeds: Sequence[int],
          threads: int = 1) -> list[SweepRow]:
    if param not in SWEEP_PATHS:
        raise ValueError(f"cannot sweep {param!r}; choose from {sorted(SWEEP_PATHS)}")
    if not values:
        raise ValueError("no sweep values")
    rows = []
    for v in values:
        v = int(v) if param == "lambda" else float(v)
        cfg_v = override(base_cfg, **{SWEEP_PATHS[param]: v})
        accs, tprs, fprs, div = [], [], [], 0
        for s in seeds:
            tr = run(cfg_v.with_seed(s), threads=threads)
            accs.append(tr.final_acc)
            div += tr.diverged is not None
            if tr.freeloaders and tr.records:
                rep = final_detection(tr)
                tprs.append(rep.tpr)
                fprs.append(rep.fpr)
        m, sd = mean_std(accs)
        rows.append(SweepRow(v, m, sd, float(np.mean(tprs)) if tprs else None,
                             float(np.mean(fprs)) if fprs else None, div, accs, list(seeds)))
    return rows


def sweep_csv(param: str, rows: list[SweepRow]) -> str:
    from .metrics import rows_to_csv
    return rows_to_csv([{param: r.value, "acc_mean": r.acc_mean, "acc_std": r.acc_std,
                         "tpr": r.tpr, "fpr": r.fpr, "diverged": r.diverged} for r in rows])


@dataclass
class VerificationReport:
    lemma1: float | None
    lemma2: float | None
    estimate: AssumptionEstimate | None
    L_hat: float | None
    G_hat: float | None
    Yt: list[float]
    drift: list[float]

    def text(self) -> str:
        lines = []
        if self.lemma1 is not None:
            lines.append(f"lemma1 max residual: {self.lemma1:.3e}")
            lines.append(f"lemma2 max residual: {self.lemma2:.3e}")
        else:
            lines.append("lemma checks skipped: trace not in analysis mode")
        if self.estimate is not None:
            lines.append(f"assumption-2 rounds used: {self.estimate.rounds_used}")
            for i in sorted(self.estimate.mu_hat):
                lines.append(f"  client {i}: mu_hat={self.estimate.mu_hat[i]:.4g} "
                             f"c_hat={self.estimate.c_hat[i]:.4g}")
            lines.append(f"L_hat={self.L_hat:.4g} G_hat={self.G_hat:.4g}")
        if self.Yt:
            lines.append(f"Y_t: first={self.Yt[0]:.4g} last={self.Yt[-1]:.4g} max={max(self.Yt):.4g}")
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        from .metrics import rows_to_csv
        T = len(self.drift)
        rows = []
        l1 = self._l1 if hasattr(self, "_l1") else [None] * T
        l2 = self._l2 if hasattr(self, "_l2") else [None] * T
        for t in range(T):
            rows.append({"t": t, "lemma1_residual": l1[t], "lemma2_residual": l2[t],
                         "Yt": self.Yt[t] if t < len(self.Yt) else None,
                         "drift": self.drift[t]})
        return rows_to_csv(rows)


def verify_trace(trace: Trace, setup: Setup | None = None) -> VerificationReport:
    setup = setup or build_setup(trace.cfg)
    data = client_data(setup)
    l1 = l2 = None
    res1 = res2 = None
    if trace.cfg.analysis_mode:
        res1, res2 = lemma1_residuals(trace), lemma2_residuals(trace)
        l1, l2 = max(res1, default=0.0), max(res2, default=0.0)
    est = L = G = None
    Y: list[float] = []
    if trace.records:
        try:
            est = estimate_assumption2(trace, data, setup.spec)
            L, G = estimate_L_G(trace, data, setup.spec)
            if L > 0 and G > 0 and any(c > 0 for c in est.c_hat.values()):
                Y = Yt_series(trace, est, L, G)
        except ValueError as e:
            log.warning("assumption estimates unavailable: %s", e)
    rep = VerificationReport(l1, l2, est, L, G, Y, [r.drift for r in trace.records])
    if res1 is not None:
        rep._l1, rep._l2 = res1, res2
    return rep


def momentum_form_residuals(trace: Trace, alpha: float) -> list[float]:
    """Residuals of z_{t+1} = z_t - (eta_g / alpha) tildeDelta_t for the heavy-ball
    reparametrisation z_t = w_t + ((1 - alpha) / alpha)(w_t - w_{t-1}).

    This identity is exact when every round applies the same coefficient ``alpha``.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    ws = [trace.w0] + [r.w_next for r in trace.records]
    c = (1.0 - alpha) / alpha
    zs = [ws[0]] + [ws[t] + c * (ws[t] - ws[t - 1]) for t in range(1, len(ws))]
    step = trace.cfg.eta_g / alpha
    return [numkit.norm2(zs[t + 1] - zs[t] + step * r.tilde_delta)
            for t, r in enumerate(trace.records)]
