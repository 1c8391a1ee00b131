import numpy as np
import pytest

from tacofl import config, engine
from tacofl.data import ClientShard, gen_gaussian_mixture
from tacofl.engine import Setup, Simulator, detect_freeloaders, finalize
from tacofl.model import loss_and_grad

from conftest import small_cfg
from oracles import taco_alpha_direct


def test_fedavg_single_step_upload():
    cfg = small_cfg("fedavg", local_steps=1)
    sim = Simulator(cfg)
    state = sim.init_state()
    rng_copy = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, 0]))
    res = sim.local_pass(0, state)
    shard = sim.setup.shards[0]
    pick = shard.indices[rng_copy.integers(0, len(shard), size=cfg.batch_size)]
    from tacofl.model import Batch
    g = loss_and_grad(sim.spec, state.w, Batch(sim.setup.train.features[pick],
                                               sim.setup.train.labels[pick]))[1]
    np.testing.assert_allclose(res.delta, cfg.eta_l * g, rtol=1e-12, atol=1e-15)
    assert res.grad_evals == 1


def test_freeloader_round_zero_uploads_zero():
    cfg = small_cfg("taco", freeloaders=[2])
    tr = engine.run(cfg)
    assert np.all(tr.records[0].uploads[2] == 0)
    assert tr.records[0].grad_evals[2] == 0
    # later rounds: the rescaled previous global gradient
    r1 = tr.records[1]
    np.testing.assert_allclose(r1.uploads[2], cfg.local_steps * cfg.eta_l * r1.delta_prev)


@pytest.mark.parametrize("name,evals", [("fedavg", 5), ("foolsgold", 5), ("fedprox", 5),
                                        ("scaffold", 5), ("fedacg", 5), ("taco", 5), ("stem", 9)])
def test_grad_eval_bookkeeping(name, evals):
    cfg = small_cfg(name, local_steps=5, rounds=2, freeloaders=[4],
                    **({"detection.enabled": False} if name == "taco" else {}))
    tr = engine.run(cfg)
    for r in tr.records:
        assert r.grad_evals[4] == 0
        assert all(r.grad_evals[i] == evals for i in range(4))


def test_identical_shards_follow_centralised_gd():
    cfg = small_cfg("fedavg", full_batch=True, clients=3, local_steps=4, rounds=3)
    base = engine.build_setup(cfg)
    idx = np.arange(30)
    shards = [ClientShard(i, idx.copy()) for i in range(3)]
    setup = Setup(cfg, base.spec, base.train, base.test, shards)
    tr = Simulator(cfg, setup=setup).run()
    batch = base.train.subset(idx).as_batch()
    w = tr.w0.copy()
    for r in tr.records:
        for _ in range(cfg.local_steps):
            w = w - cfg.eta_l * loss_and_grad(base.spec, w, batch)[1]
        # eta_g = K * eta_l makes one round equal to K centralised steps
        np.testing.assert_allclose(r.w_next, w, atol=1e-10)


def test_zero_global_rate_freezes_model():
    tr = engine.run(small_cfg("taco", eta_g=0.0))
    for r in tr.records:
        np.testing.assert_array_equal(r.w_next, tr.w0)


@pytest.mark.parametrize("name", ["taco", "fedavg", "foolsgold"])
def test_analysis_mode_lemma1(name):
    tr = engine.run(small_cfg(name, analysis_mode=True))
    for t, r in enumerate(tr.records):
        a = np.mean(list(r.alpha_used.values())) if r.alpha_used else 1.0
        np.testing.assert_allclose(r.delta_next, r.tilde_delta + (1 - a) * r.delta_prev, atol=1e-9)
    # equal in exact arithmetic; the two sides are summed in different orders
    np.testing.assert_allclose(tr.records[0].delta_next, tr.records[0].tilde_delta, atol=1e-12)


def test_taco_alpha_lag_and_values():
    tr = engine.run(small_cfg("taco", **{"detection.enabled": False}))
    r0, r1 = tr.records[0], tr.records[1]
    assert all(a == 0.1 for a in r0.alpha_used.values())
    assert r1.alpha_used == r0.alpha
    want = taco_alpha_direct([r0.uploads[i].tolist() for i in sorted(r0.uploads)])
    np.testing.assert_allclose([r0.alpha[i] for i in sorted(r0.alpha)], want, atol=1e-12)


def test_detect_freeloaders_counts_and_expels():
    flagged, counts, out = detect_freeloaders({0: 0.7, 1: 0.2, 2: 0.6}, 0.6, 2, {0: 1, 1: 0, 2: 0})
    assert flagged == [0, 2]
    assert counts == {0: 2, 1: 0, 2: 1}
    assert out == [0]


def test_kappa_one_never_flags():
    cfg = small_cfg("taco", freeloaders=[3, 4], **{"detection.kappa": 1.0, "detection.lambda": 1})
    tr = engine.run(cfg)
    assert all(not r.flagged for r in tr.records)
    assert tr.records[-1].expelled == []


def test_expulsion_is_monotone():
    cfg = small_cfg("taco", freeloaders=[3, 4], rounds=10, **{"detection.lambda": 1,
                                                                "detection.kappa": 0.3})
    tr = engine.run(cfg)
    gone = set()
    for r in tr.records:
        assert not gone & set(r.uploads)
        assert set(r.expelled) >= gone
        gone = set(r.expelled)
    assert gone


def test_finalize_examples():
    np.testing.assert_allclose(finalize(np.array([1.0]), np.array([0.0]), 0.5), [1.5])
    np.testing.assert_array_equal(finalize(np.array([2.0]), np.array([-4.0]), 1.0), [2.0])
    np.testing.assert_array_equal(finalize(np.array([2.0]), np.array([2.0]), 0.3), [2.0])


def test_non_taco_output_is_w():
    tr = engine.run(small_cfg("scaffold"))
    assert tr.alpha_final == 1.0
    np.testing.assert_array_equal(tr.z_final, tr.w_final)


def test_taco_output_uses_mean_final_alpha():
    tr = engine.run(small_cfg("taco", **{"detection.enabled": False}))
    a = np.mean(list(tr.records[-1].alpha.values()))
    assert tr.alpha_final == pytest.approx(a)
    np.testing.assert_allclose(tr.z_final, finalize(tr.w_final, tr.records[-1].w, a))


def test_zero_rounds():
    tr = engine.run(small_cfg("taco", rounds=0))
    assert tr.records == []
    np.testing.assert_array_equal(tr.z_final, tr.w0)


@pytest.mark.parametrize("name", ["taco", "stem", "scaffold"])
def test_deterministic_across_threads(name):
    a = engine.run(small_cfg(name), threads=1)
    b = engine.run(small_cfg(name), threads=4)
    for ra, rb in zip(a.records, b.records):
        assert np.array_equal(ra.w_next, rb.w_next)
        assert ra.alpha == rb.alpha and ra.test_acc == rb.test_acc


def test_divergence_is_recorded():
    # eta_l * zeta = 50: every local step multiplies w - w_t by about -49
    cfg = config.override(small_cfg("fedprox", local_steps=200, rounds=4, eta_l=0.5),
                          **{"strategy.zeta": 100.0})
    tr = engine.run(cfg)
    assert tr.diverged is not None
    assert tr.diverged["round"] == len(tr.records)
    assert tr.diverged["client"] is not None and tr.diverged["step"] is not None
    assert np.isnan(tr.final_acc)


def test_groups_labels():
    cfg = config.override(small_cfg("taco"), **{"data.partition.scheme": "label_groups",
                                                 "data.partition.groups": [[2, 0.25], [3, 0.5]],
                                                 "freeloaders": [4]})
    setup = engine.build_setup(cfg)
    assert setup.groups == {0: "group_A", 1: "group_A", 2: "group_B", 3: "group_B",
                            4: "freeloaders"}
