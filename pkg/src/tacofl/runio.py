"""Run directory layout.

    config.toml        resolved config snapshot (reproduces the run)
    trace.csv          one row per round, scalars plus per-client aux values
    vectors.bin        sidecar with every per-round vector (see ``write_vectors``)
    detection.csv      t, client_id, alpha, flagged, expelled
    metrics.csv        strategy, seed, final_acc, rounds_to_target, cost_to_target
    partition.csv      per-client sample and class counts
    final_w.fcsm       w_T
    final_z.fcsm       z_T
    status.json        completion / divergence marker

``.fcsm`` files: b"FCSM", u32 version, u64 count, then little-endian float64.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from . import config as config_mod
from .data import partition_report
from .engine import RoundRecord, Trace, build_setup
from .metrics import CostModel, metrics_row, rows_to_csv

FCSM_MAGIC = b"FCSM"
FCSM_VERSION = 1
VEC_MAGIC = b"FCSV"


class RunDirError(OSError):
    pass


def write_fcsm(path, vec: np.ndarray) -> None:
    vec = np.ascontiguousarray(vec, dtype="<f8")
    with open(path, "wb") as f:
        f.write(FCSM_MAGIC + struct.pack("<IQ", FCSM_VERSION, vec.shape[0]) + vec.tobytes())


def read_fcsm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FCSM_MAGIC:
        raise RunDirError(f"{path}: not an FCSM model file")
    version, n = struct.unpack("<IQ", raw[4:16])
    if version != FCSM_VERSION:
        raise RunDirError(f"{path}: unsupported FCSM version {version}")
    body = raw[16:]
    if len(body) != 8 * n:
        raise RunDirError(f"{path}: expected {n} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)


def write_vectors(path, named: list[tuple[str, np.ndarray]]) -> None:
    """Entries: u16 name length, utf-8 name, u64 count, float64 LE data."""
    with open(path, "wb") as f:
        f.write(VEC_MAGIC + struct.pack("<I", len(named)))
        for name, vec in named:
            key = name.encode()
            data = np.ascontiguousarray(vec, dtype="<f8")
            f.write(struct.pack("<H", len(key)) + key + struct.pack("<Q", data.shape[0]))
            f.write(data.tobytes())


def read_vectors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != VEC_MAGIC:
        raise RunDirError(f"{path}: not a vector sidecar")
    (count,) = struct.unpack("<I", raw[4:8])
    pos, out = 8, {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", raw[pos:pos + 2])
        name = raw[pos + 2:pos + 2 + klen].decode()
        pos += 2 + klen
        (n,) = struct.unpack("<Q", raw[pos:pos + 8])
        pos += 8
        out[name] = np.frombuffer(raw[pos:pos + 8 * n], dtype="<f8").astype(np.float64)
        pos += 8 * n
    return out


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def trace_csv(trace: Trace, cm: CostModel) -> str:
    from .metrics import round_costs

    N = trace.cfg.clients
    costs = round_costs(trace, cm) if trace.records else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["t", "test_acc", "train_loss", "drift", "n_active", "n_flagged", "n_expelled",
            "round_cost", "grad_evals_max", "alpha_stem", "alpha_mean", "alpha_used_mean",
            "delta_norm"]
    for prefix in ("alpha", "alpha_used", "rho", "grad_evals"):
        head += [f"{prefix}_{i}" for i in range(N)]
    w.writerow(head)
    for r, cost in zip(trace.records, costs):
        row = [r.t, _num(r.test_acc), _num(r.train_loss), _num(r.drift), len(r.active),
               len(r.flagged), len(r.expelled), _num(cost), max(r.grad_evals.values()),
               _num(r.alpha_stem),
               _num(np.mean(list(r.alpha.values()))) if r.alpha else "",
               _num(np.mean(list(r.alpha_used.values()))) if r.alpha_used else "",
               _num(float(np.linalg.norm(r.delta_next)))]
        for d in (r.alpha, r.alpha_used, r.rho):
            row += [_num(d.get(i)) for i in range(N)]
        row += [r.grad_evals.get(i, "") for i in range(N)]
        w.writerow(row)
    return buf.getvalue()


def detection_csv(trace: Trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "client_id", "alpha", "flagged", "expelled"])
    for r in trace.records:
        for i, a in sorted(r.alpha.items()):
            w.writerow([r.t, i, _num(a), int(i in r.flagged), int(i in r.expelled)])
    return buf.getvalue()


def _vectors(trace: Trace) -> list[tuple[str, np.ndarray]]:
    out = [("w0", trace.w0)]
    for r in trace.records:
        p = f"r{r.t}/"
        out += [(p + "w_next", r.w_next), (p + "delta_next", r.delta_next),
                (p + "tilde_delta", r.tilde_delta)]
        out += [(f"{p}upload/{i}", v) for i, v in sorted(r.uploads.items())]
    return out


def prepare_out_dir(out_dir, force: bool = False) -> Path:
    out = Path(out_dir)
    if out.exists() and not out.is_dir():
        raise RunDirError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise RunDirError(f"{out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run(out_dir, trace: Trace, setup=None, force: bool = False) -> Path:
    out = prepare_out_dir(out_dir, force)
    cfg = trace.cfg
    cm = CostModel(cfg.cost.grad_eval_cost, {cfg.strategy.name: cfg.cost.overhead,
                                             "fedavg": 0.0})
    (out / "config.toml").write_text(config_mod.dumps(cfg))
    (out / "trace.csv").write_text(trace_csv(trace, cm))
    (out / "detection.csv").write_text(detection_csv(trace))
    (out / "metrics.csv").write_text(rows_to_csv([metrics_row(trace, cm, cfg.target_acc)]))
    write_vectors(out / "vectors.bin", _vectors(trace))
    write_fcsm(out / "final_w.fcsm", trace.w_final)
    write_fcsm(out / "final_z.fcsm", trace.z_final)
    if setup is not None:
        (out / "partition.csv").write_text(partition_report(setup.train, setup.shards))
    status = {"status": "diverged" if trace.diverged else "ok",
              "rounds_completed": len(trace.records), "final_acc": trace.final_acc,
              "alpha_final": trace.alpha_final, "divergence": trace.diverged}
    (out / "status.json").write_text(json.dumps(status, indent=1, sort_keys=True) + "\n")
    return out


def _parse_map(row: dict, prefix: str, N: int, conv=float) -> dict[int, float]:
    out = {}
    for i in range(N):
        v = row.get(f"{prefix}_{i}", "")
        if v != "":
            out[i] = conv(v)
    return out


def load_run(run_dir) -> Trace:
    """Rebuild an in-memory trace from a run directory."""
    d = Path(run_dir)
    for name in ("config.toml", "trace.csv", "vectors.bin", "final_w.fcsm", "final_z.fcsm",
                 "status.json"):
        if not (d / name).is_file():
            raise RunDirError(f"{d}: missing {name}")
    cfg = config_mod.parse_config(d / "config.toml")
    setup = build_setup(cfg)
    vecs = read_vectors(d / "vectors.bin")
    status = json.loads((d / "status.json").read_text())
    with open(d / "trace.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    N = cfg.clients
    records = []
    w = vecs["w0"]
    delta_prev = np.zeros_like(w)
    expelled: list[int] = []
    for row in rows:
        t = int(row["t"])
        p = f"r{t}/"
        uploads = {int(k[len(p) + 7:]): v for k, v in vecs.items() if k.startswith(p + "upload/")}
        alpha = _parse_map(row, "alpha", N)
        flagged = []
        r = RoundRecord(
            t=t, active=sorted(uploads), uploads=uploads,
            alpha_used=_parse_map(row, "alpha_used", N), alpha=alpha, weights={},
            delta_prev=delta_prev, delta_next=vecs[p + "delta_next"],
            tilde_delta=vecs[p + "tilde_delta"], w=w, w_next=vecs[p + "w_next"],
            flagged=flagged, expelled=expelled, grad_evals=_parse_map(row, "grad_evals", N, int),
            test_acc=float(row["test_acc"]), train_loss=float(row["train_loss"]),
            drift=float(row["drift"]),
            alpha_stem=float(row["alpha_stem"]), rho=_parse_map(row, "rho", N),
        )
        records.append(r)
        w, delta_prev = r.w_next, r.delta_next
    if (d / "detection.csv").is_file():
        with open(d / "detection.csv", newline="") as f:
            by_t: dict[int, list[dict]] = {}
            for row in csv.DictReader(f):
                by_t.setdefault(int(row["t"]), []).append(row)
        for r in records:
            rows_t = by_t.get(r.t, [])
            r.flagged = [int(x["client_id"]) for x in rows_t if x["flagged"] == "1"]
            r.expelled = [int(x["client_id"]) for x in rows_t if x["expelled"] == "1"]
        expelled_so_far: set[int] = set()
        for r in records:
            expelled_so_far |= set(r.expelled)
            r.expelled = sorted(expelled_so_far)
    return Trace(cfg=cfg, w0=vecs["w0"], records=records, w_final=read_fcsm(d / "final_w.fcsm"),
                 z_final=read_fcsm(d / "final_z.fcsm"), alpha_final=float(status["alpha_final"]),
                 groups=setup.groups, behaviors={s.client_id: s.behavior for s in setup.shards},
                 diverged=status["divergence"])
