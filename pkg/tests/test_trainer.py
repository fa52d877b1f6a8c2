import csv
import math

import numpy as np
import pytest

from jointtask.dataset import gen_synthetic, make_sample
from jointtask.gradcheck import numeric_grad, rel_error
from jointtask.latent_sampler import LATTICE, ZERO_INDEX, lattice_index
from jointtask.networks import JointModel, NetworkConfig
from jointtask.tensor_core import LayerSpec
from jointtask.trainer import (LatentState, TrainConfig, TrainingError, backprop_batch,
                               build_model, compute_boundary_tables, e_step, em_train, joint_cost,
                               latest_checkpoint, m_step, pretrain_localization,
                               substream)

# -- tiny nets and an independent scalar oracle ------------------------------------

FRAME = 8


def tiny_configs():
    loc = NetworkConfig("localization", (FRAME, FRAME, 3), [
        LayerSpec("conv", "c1", kernels=2, size=3, pad=1), LayerSpec("relu", "r1"),
        LayerSpec("rn", "n1", rn_alpha=0.3), LayerSpec("maxpool", "p1"),
        LayerSpec("fc", "f1", outputs=4)])
    seg = NetworkConfig("segmentation", (5, 5, 3), [
        LayerSpec("conv", "c1", kernels=2, size=3), LayerSpec("relu", "r1"),
        LayerSpec("maxpool", "p1"), LayerSpec("fc", "f1", outputs=4),
        LayerSpec("logistic", "prob")])
    return loc, seg


def tiny_model(seed=0):
    loc, seg = tiny_configs()
    model = JointModel.build(loc, seg, np.random.default_rng(seed), 0.4)
    rng = np.random.default_rng(seed + 100)
    for _, p in list(model.loc.param_layers()) + list(model.seg.param_layers()):
        p.biases[...] = rng.normal(0, 0.5, p.biases.shape)
    loc_fc = model.loc.params[-1]
    loc_fc.biases[...] = [1.5, 2.0, 6.0, 6.5]
    return model


def toy_samples():
    rng = np.random.default_rng(7)
    out = []
    for i, (h, w, rect) in enumerate([(10, 12, (2, 3, 8, 9)), (9, 9, (1, 1, 6, 5))]):
        mask = np.zeros((h, w), bool)
        r0, c0, r1, c1 = rect
        mask[r0:r1, c0:c1] = True
        out.append(make_sample(f"t{i}", rng.random((h, w, 3)), mask, FRAME))
    return out


def bilinear(img, box, side):
    h, w = img.shape[:2]
    x1, y1, x2, y2 = box
    out = np.zeros((side, side, img.shape[2]))
    for i in range(side):
        y = min(max(y1 + (i + 0.5) * (y2 - y1) / side - 0.5, 0.0), h - 1)
        for j in range(side):
            x = min(max(x1 + (j + 0.5) * (x2 - x1) / side - 0.5, 0.0), w - 1)
            a, b = int(math.floor(x)), int(math.floor(y))
            a1, b1 = min(a + 1, w - 1), min(b + 1, h - 1)
            fx, fy = x - a, y - b
            out[i, j] = ((1 - fy) * ((1 - fx) * img[b, a] + fx * img[b, a1])
                         + fy * ((1 - fx) * img[b1, a] + fx * img[b1, a1]))
    return out


def nearest(mask, box, side):
    h, w = mask.shape
    x1, y1, x2, y2 = box
    out = np.zeros((side, side), bool)
    for i in range(side):
        r = min(max(int(math.floor(y1 + (i + 0.5) * (y2 - y1) / side)), 0), h - 1)
        for j in range(side):
            c = min(max(int(math.floor(x1 + (j + 0.5) * (x2 - x1) / side)), 0), w - 1)
            out[i, j] = mask[r, c]
    return out


def scalar_forward(x, net):
    """Layer-by-layer forward with explicit loops over every index."""
    a = x.copy()
    for spec, p in zip(net.config.layers, net.params):
        if spec.kind == "conv":
            H, W, C = a.shape
            pad, s = spec.pad, spec.size
            ap = np.zeros((H + 2 * pad, W + 2 * pad, C))
            ap[pad:pad + H, pad:pad + W] = a
            ho, wo = H + 2 * pad - s + 1, W + 2 * pad - s + 1
            o = np.zeros((ho, wo, spec.kernels))
            for r in range(ho):
                for c in range(wo):
                    for f in range(spec.kernels):
                        acc = p.biases[f]
                        for dr in range(s):
                            for dc in range(s):
                                for ch in range(C):
                                    acc += ap[r + dr, c + dc, ch] * p.weights[f, dr, dc, ch]
                        o[r, c, f] = acc
            a = o
        elif spec.kind == "relu":
            a = np.array([max(v, 0.0) for v in a.ravel()]).reshape(a.shape)
        elif spec.kind == "rn":
            o = np.zeros_like(a)
            C = a.shape[2]
            for r in range(a.shape[0]):
                for c in range(a.shape[1]):
                    for ch in range(C):
                        s = sum(a[r, c, q] ** 2 for q in range(max(0, ch - spec.rn_n // 2),
                                                               min(C, ch + spec.rn_n // 2 + 1)))
                        o[r, c, ch] = a[r, c, ch] / (spec.rn_k + spec.rn_alpha * s) ** spec.rn_beta
            a = o
        elif spec.kind == "maxpool":
            H, W, C = a.shape
            ho, wo = (H - 3) // 2 + 1, (W - 3) // 2 + 1
            o = np.zeros((ho, wo, C))
            for r in range(ho):
                for c in range(wo):
                    for ch in range(C):
                        o[r, c, ch] = max(a[2 * r + i, 2 * c + j, ch] for i in range(3) for j in range(3))
            a = o
        elif spec.kind == "fc":
            flat = a.ravel()
            a = np.array([p.biases[k] + sum(p.weights[k, i] * flat[i] for i in range(flat.size))
                          for k in range(spec.outputs)])
        else:
            a = np.array([1.0 / (1.0 + math.exp(-v)) for v in a])
    return a


def oracle_cost(samples, adjustments, model):
    loc_terms, seg_terms = [], []
    for s, dl in zip(samples, adjustments):
        h, w = s.mask.shape
        ref = [min(max(v, 0.0), FRAME) for v in (np.asarray(s.tight_box) + dl)]
        f = scalar_forward(bilinear(s.image, (0, 0, w, h), FRAME) - 0.5, model.loc)
        loc_terms.append(sum((f[k] - ref[k]) ** 2 for k in range(4)))
        px = (ref[0] * w / FRAME, ref[1] * h / FRAME, ref[2] * w / FRAME, ref[3] * h / FRAME)
        p = scalar_forward(bilinear(s.image, px, 5) - 0.5, model.seg)
        y = nearest(s.mask, px, 2).ravel()
        ce = 0.0
        for yj, pj in zip(y, p):
            pj = min(max(pj, 1e-7), 1 - 1e-7)
            ce -= math.log(pj) if yj else math.log(1 - pj)
        # foreground outside the reference is painted as background
        for r in range(h):
            for c in range(w):
                inside = px[0] <= c + 0.5 < px[2] and px[1] <= r + 0.5 < px[3]
                if s.mask[r, c] and not inside:
                    ce -= math.log(1e-7)
        seg_terms.append(ce)
    n = len(samples)
    return sum(loc_terms) / n + sum(seg_terms) / n, sum(loc_terms) / n, sum(seg_terms) / n


@pytest.mark.parametrize("adj", [[[0, 0, 0, 0], [0, 0, 0, 0]], [[-1, 0.5, 1, -0.5], [0.5, 1, -1, 0]],
                                 [[-5, -5, 5, 5], [0, 0, 0, 0]]])
def test_joint_cost_matches_scalar_oracle(adj):
    samples, model = toy_samples(), tiny_model()
    adj = np.array(adj, float)
    got = joint_cost(samples, adj, model)
    total, loc, seg = oracle_cost(samples, adj, model)
    assert got.total == pytest.approx(total, rel=1e-10)
    assert got.loc_term == pytest.approx(loc, rel=1e-10)
    assert got.seg_term == pytest.approx(seg, rel=1e-10)
    assert got.total == pytest.approx(got.loc_term + got.seg_term, rel=1e-15)
    crop_only = joint_cost(samples, adj, model, count_truncated=False)
    assert crop_only.loc_term == got.loc_term
    assert (crop_only.seg_term < got.seg_term) == bool(np.any(adj[:, 2:] < 0) or np.any(adj[:, :2] > 0))


def test_perfect_localization_and_uniform_segmentation():
    samples, model = toy_samples()[:1], tiny_model()
    fc = model.loc.params[-1]
    fc.weights[...] = 0
    fc.biases[...] = samples[0].tight_box
    sfc = model.seg.params[[s.kind for s in model.seg.layers].index("fc")]
    sfc.weights[...] = 0
    sfc.biases[...] = 0
    c = joint_cost(samples, np.zeros((1, 4)), model)
    assert c.loc_term == 0.0
    assert c.seg_term == pytest.approx(4 * math.log(2), rel=1e-14)


def test_backprop_matches_finite_differences():
    samples, model = toy_samples(), tiny_model(1)
    adj = np.array([[0.5, 0, -0.5, 1], [0, 0, 0, 0]])
    backprop_batch(samples, adj, model)
    for net in (model.loc, model.seg):
        for spec, p in net.param_layers():
            analytic = p.weight_grads.copy(), p.bias_grads.copy()
            p.zero_grad()
            f = lambda: joint_cost(samples, adj, model).total
            assert rel_error(analytic[0], numeric_grad(f, p.weights)) < 1e-4, spec.name
            assert rel_error(analytic[1], numeric_grad(f, p.biases)) < 1e-4, spec.name


def test_zero_learning_rates_keep_cost():
    samples, model = toy_samples(), tiny_model(2)
    adj = np.zeros((2, 4))
    before = joint_cost(samples, adj, model).total
    cfg = TrainConfig(eps1=0, eps2=0, batch_size=1)
    after = m_step(samples, adj, model, cfg, np.random.default_rng(0)).total
    assert after == before


def test_non_finite_input_names_samples():
    samples, model = toy_samples(), tiny_model(3)
    samples[1].image[0, 0, 0] = np.nan
    with pytest.raises(TrainingError, match="t1"):
        m_step(samples, np.zeros((2, 4)), model, TrainConfig(eps1=1e-3, eps2=1e-3, batch_size=2),
               np.random.default_rng(0))


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert cfg.eps1 == 1e-6 and cfg.eps2 == 1e-8 and cfg.K == 20
    assert cfg.conv_rate_factor == 0.01 and cfg.latent_mode == "mcmc"
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"eps1": 1e-3, "bogus": 1})
    with pytest.raises(ValueError):
        TrainConfig(K=0)
    with pytest.raises(ValueError):
        TrainConfig(latent_mode="gibbs")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_substreams_are_independent_and_stable():
    a = substream(5, 1, 3, 7).random(4)
    np.testing.assert_array_equal(a, substream(5, 1, 3, 7).random(4))
    assert not np.array_equal(a, substream(5, 1, 3, 8).random(4))
    assert not np.array_equal(a, substream(5, 2, 3, 7).random(4))


# -- E-step ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_setup():
    samples = gen_synthetic(6, 31)
    cfg = TrainConfig(init_std="he", K=20, seed=3)
    return samples, cfg, build_model(cfg), compute_boundary_tables(samples, cfg)


@pytest.mark.parametrize("mode", ["mcmc", "enumerate"])
def test_e_step_never_increases_cost(desk_setup, mode):
    samples, cfg, model, pc = desk_setup
    cfg = TrainConfig.from_dict({**cfg.to_dict(), "latent_mode": mode})
    state = LatentState(len(samples), cfg, pc)
    state.index[:] = [0, ZERO_INDEX, 5, 100, 624, ZERO_INDEX]
    before = joint_cost(samples, state.adjustments, model).per_sample
    e_step(samples, model, state, cfg, epoch=1)
    after = joint_cost(samples, state.adjustments, model).per_sample
    assert np.all(after <= before + 1e-9)
    assert all(len(s.history) == 1 for s in state.stats)


def test_zero_mode_pins_adjustments(desk_setup):
    samples, cfg, model, pc = desk_setup
    cfg = TrainConfig.from_dict({**cfg.to_dict(), "latent_mode": "zero"})
    state = LatentState(len(samples), cfg)
    state.index[:] = 7
    e_step(samples, model, state, cfg, epoch=1)
    assert np.all(state.adjustments == 0)


def test_e_step_chain_log_has_k_rows_per_sample(desk_setup):
    samples, cfg, model, pc = desk_setup
    state = LatentState(len(samples), cfg, pc)
    log = []
    e_step(samples, model, state, cfg, epoch=2, chain_log=log)
    assert len(log) == cfg.K * len(samples)
    assert {r["sample"] for r in log} == {s.id for s in samples}


def test_shared_stats_pool_history(desk_setup):
    samples, cfg, model, pc = desk_setup
    cfg = TrainConfig.from_dict({**cfg.to_dict(), "shared_stats": True})
    state = LatentState(len(samples), cfg, pc)
    e_step(samples, model, state, cfg, epoch=1)
    assert len(state.stats[0].history) == len(samples)
    assert state.history_array().shape == (1, len(samples), 4)


# -- EM loop -----------------------------------------------------------------------

FAST = dict(eps1=3e-4, eps2=3e-5, momentum=0.9, init_std="he", K=5, batch_size=4, seed=9,
            early_stop_patience=0)


def test_epochs_zero_writes_initial_state(tmp_path):
    samples = gen_synthetic(4, 1)
    res = em_train(samples, TrainConfig(epochs=0, **FAST), tmp_path)
    assert len(res.history) == 1 and res.history[0]["epoch"] == 0
    assert (tmp_path / "checkpoints" / "epoch_000.ckpt").exists()
    rows = list(csv.reader(open(tmp_path / "costs.csv")))
    assert rows[0] == ["epoch", "total", "loc_term", "seg_term", "wall_seconds"]
    assert len(rows) == 2 and rows[1][4] == ""


def test_reproducible_runs_are_identical(tmp_path):
    samples = gen_synthetic(6, 2)
    cfg = TrainConfig(epochs=2, **FAST)
    em_train(samples, cfg, tmp_path / "a")
    em_train(samples, cfg, tmp_path / "b")
    assert (tmp_path / "a" / "costs.csv").read_bytes() == (tmp_path / "b" / "costs.csv").read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    samples = gen_synthetic(6, 3)
    full = em_train(samples, TrainConfig(epochs=3, **FAST), tmp_path / "full")
    em_train(samples, TrainConfig(epochs=2, **FAST), tmp_path / "part")
    resumed = em_train(samples, TrainConfig(epochs=3, **FAST), tmp_path / "part", resume=True)
    assert [r["total"] for r in resumed.history] == [r["total"] for r in full.history]
    assert latest_checkpoint(tmp_path / "part").name == "epoch_003.ckpt"
    np.testing.assert_array_equal(resumed.state.index, full.state.index)


def test_burn_in_keeps_zero_then_samples():
    samples = gen_synthetic(5, 4)
    res = em_train(samples, TrainConfig(epochs=2, latent_burn_in=2, **FAST))
    assert np.all(res.state.adjustments == 0)
    assert all(r.get("evaluations", 0) == 0 for r in res.history)
    res = em_train(samples, TrainConfig(epochs=2, latent_burn_in=1, **FAST))
    assert res.history[-1]["evaluations"] > 0


def test_batch_alternation_runs():
    samples = gen_synthetic(5, 5)
    res = em_train(samples, TrainConfig(epochs=1, alternation="batch", **FAST))
    assert res.history[-1]["evaluations"] > 0
    assert set(np.unique(res.state.adjustments)) <= set(LATTICE.ravel())


def test_early_stop_triggers_on_plateau():
    samples = gen_synthetic(3, 6)
    cfg = TrainConfig(**{**FAST, "eps1": 0.0, "eps2": 0.0, "early_stop_patience": 2,
                         "latent_mode": "zero", "epochs": 10})
    res = em_train(samples, cfg)
    assert res.stopped_early and len(res.history) == 3


def test_pretraining_resets_fc_only():
    samples = gen_synthetic(4, 8)
    cfg = TrainConfig(pretrain_epochs=1, pretrain_lr=1e-4, **FAST)
    fresh = build_model(cfg)
    model = build_model(cfg)
    pretrain_localization(samples, model, cfg)
    for (spec, a), (_, b) in zip(fresh.loc.param_layers(), model.loc.param_layers()):
        if spec.kind == "conv":
            assert not np.array_equal(a.weights, b.weights)
        else:
            assert a.weights.shape == b.weights.shape
            assert not b.biases.any()


def test_mcmc_lowers_cost_against_zero_on_fixed_nets(desk_setup):
    samples, cfg, model, pc = desk_setup
    state = LatentState(len(samples), cfg, pc)
    e_step(samples, model, state, cfg, epoch=1)
    zero = joint_cost(samples, np.zeros((len(samples), 4)), model).total
    assert joint_cost(samples, state.adjustments, model).total <= zero
    assert lattice_index(state.adjustments[0]) == state.index[0]
