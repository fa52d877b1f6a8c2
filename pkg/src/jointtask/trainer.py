"""Joint cost, M-step and the EM training loop."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .latent_sampler import (LATTICE, PROB_EPS, TRUNCATION_COST, ZERO_INDEX, LatentProblem,
                             ProposalStats, boundary_table, enumerate_best, reference_boxes,
                             run_chain)
from .networks import (JointModel, box_to_pixels, crop_mask_pixels, crop_pixels,
                       outside_foreground, prepare_input, profile_configs, resize_image)
from .superpixels import cached_slic
from .tensor_core import init_params, sgd_step

log = logging.getLogger(__name__)

LATENT_MODES = ("mcmc", "enumerate", "zero")

# named RNG substreams
STREAM_INIT, STREAM_SAMPLER, STREAM_ORDER, STREAM_PRETRAIN = range(4)


class TrainingError(RuntimeError):
    pass


def substream(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, *keys]))


@dataclass
class TrainConfig:
    eps1: float = 1e-6
    eps2: float = 1e-8
    conv_rate_factor: float = 0.01
    K: int = 20
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    latent_mode: str = "mcmc"
    profile: str = "desk"
    dtype: str = "float64"
    init_std: float | str = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0
    warm_start: bool = True
    shared_stats: bool = False
    sigma0: float = 5.0
    perimeter_samples: int = 200
    superpixel_segments: int = 200
    compactness: float = 10.0
    alternation: str = "epoch"
    mstep_passes: int = 1
    latent_burn_in: int = 0
    pretrain_epochs: int = 0
    pretrain_lr: float = 1e-4
    pretrain_reset_fc: bool = True
    early_stop_patience: int = 5
    early_stop_tol: float = 1e-4
    count_truncated: bool = True

    def __post_init__(self):
        if self.eps1 < 0 or self.eps2 < 0:
            raise ValueError("learning rates must be non-negative")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.latent_mode not in LATENT_MODES:
            raise ValueError(f"latent_mode must be one of {LATENT_MODES}")
        if self.alternation not in ("epoch", "batch"):
            raise ValueError("alternation must be 'epoch' or 'batch'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CostReport:
    total: float
    loc_term: float
    seg_term: float
    per_sample: np.ndarray = field(default=None, repr=False)


# -- cost ----------------------------------------------------------------------

def _loc_inputs(samples, side: int) -> np.ndarray:
    return prepare_input(np.stack([resize_image(s.image, side) for s in samples]))


def _truncated(samples, boxes: np.ndarray) -> np.ndarray:
    out = np.empty(len(samples))
    for k, (s, b) in enumerate(zip(samples, boxes)):
        h, w = s.mask.shape
        out[k] = outside_foreground(s.mask, box_to_pixels(b[None], s.frame, h, w))[0]
    return out


def _seg_batch(samples, boxes: np.ndarray, model: JointModel):
    crops, targets = [], []
    for s, b in zip(samples, boxes):
        h, w = s.mask.shape
        px = box_to_pixels(b[None], s.frame, h, w)
        crops.append(crop_pixels(s.image, px, model.crop_side)[0][0])
        targets.append(crop_mask_pixels(s.mask, px, model.mask_side)[0])
    return prepare_input(np.stack(crops)), np.stack(targets).reshape(len(samples), -1)


def reference_for(samples, adjustments: np.ndarray) -> np.ndarray:
    return np.stack([reference_boxes(s.tight_box, s.frame, np.asarray(a)[None])[0]
                     for s, a in zip(samples, adjustments)])


def joint_cost(samples, adjustments, model: JointModel, batch: int = 64,
               count_truncated: bool = True) -> CostReport:
    """Mean over samples of ||F_loc(I) - L~||^2 plus the pixel cross-entropy at L~.

    With ``count_truncated`` the cross-entropy also charges ``-log(PROB_EPS)``
    per foreground pixel outside L~ (constant in the weights, so the M-step
    gradient is unaffected).
    """
    if len(samples) == 0:
        raise ValueError("dataset is empty")
    adjustments = np.asarray(adjustments, dtype=np.float64).reshape(len(samples), 4)
    side = model.loc.config.input_shape[0]
    loc_terms, seg_terms = [], []
    for start in range(0, len(samples), batch):
        part = samples[start:start + batch]
        ref = reference_for(part, adjustments[start:start + batch])
        out = model.loc.forward(_loc_inputs(part, side)).astype(np.float64)
        loc_terms.append(((out - ref) ** 2).sum(axis=1))
        x, y = _seg_batch(part, ref, model)
        p = np.clip(model.seg.forward(x).astype(np.float64), PROB_EPS, 1 - PROB_EPS)
        seg = -np.where(y, np.log(p), np.log1p(-p)).sum(axis=1)
        if count_truncated:
            seg = seg + TRUNCATION_COST * _truncated(part, ref)
        seg_terms.append(seg)
    loc = np.concatenate(loc_terms)
    seg = np.concatenate(seg_terms)
    return CostReport(float(loc.mean() + seg.mean()), float(loc.mean()), float(seg.mean()),
                      loc + seg)


# -- M-step --------------------------------------------------------------------

def _check_grads(net, ids):
    for spec, p in net.param_layers():
        if not (np.all(np.isfinite(p.weight_grads)) and np.all(np.isfinite(p.bias_grads))):
            raise TrainingError(f"non-finite gradient in {net.config.name}/{spec.name} "
                                f"for samples {list(ids)}")


def loc_rates(model: JointModel, eps2: float, conv_factor: float) -> list[float]:
    return [eps2 * conv_factor if spec.kind == "conv" else eps2
            for spec, _ in model.loc.param_layers()]


def backprop_batch(samples, adjustments, model: JointModel):
    """Accumulate mean-over-batch gradients of the joint cost into both networks."""
    n = len(samples)
    side = model.loc.config.input_shape[0]
    ids = [s.id for s in samples]
    ref = reference_for(samples, adjustments)
    dtype = model.loc.dtype
    try:
        out = model.loc.forward(_loc_inputs(samples, side), train=True)
        model.loc.backward((2.0 / n) * (out - ref.astype(dtype)))
        x, y = _seg_batch(samples, ref, model)
        logits = model.seg.forward(x, train=True, logits=True)
        p = 0.5 * (1.0 + np.tanh(0.5 * logits))
        model.seg.backward((p - y.astype(dtype)) / n)
    except FloatingPointError as e:
        raise TrainingError(f"{e} for samples {ids}") from e
    _check_grads(model.loc, ids)
    _check_grads(model.seg, ids)


def apply_update(model: JointModel, config: TrainConfig, velocity: dict):
    rates = loc_rates(model, config.eps2, config.conv_rate_factor)
    for (_, p), lr in zip(model.loc.param_layers(), rates):
        sgd_step(p, lr, config.momentum, velocity, config.weight_decay)
    for _, p in model.seg.param_layers():
        sgd_step(p, config.eps1, config.momentum, velocity, config.weight_decay)


def m_step(samples, adjustments, model: JointModel, config: TrainConfig,
           rng: np.random.Generator, velocity: dict | None = None,
           report: bool = True) -> CostReport | None:
    """One pass of minibatch SGD with the adjustments held fixed."""
    velocity = {} if velocity is None else velocity
    adjustments = np.asarray(adjustments, dtype=np.float64)
    for _ in range(config.mstep_passes):
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), config.batch_size):
            idx = order[start:start + config.batch_size]
            backprop_batch([samples[i] for i in idx], adjustments[idx], model)
            apply_update(model, config, velocity)
    return joint_cost(samples, adjustments, model, count_truncated=config.count_truncated) \
        if report else None


# -- latent state / E-step -----------------------------------------------------

class LatentState:
    """Per-sample adjustments, proposal statistics and boundary tables."""

    def __init__(self, n: int, config: TrainConfig, pc_tables: np.ndarray | None = None):
        self.config = config
        self.index = np.full(n, ZERO_INDEX, dtype=np.int64)
        self.pc = np.ones((n, len(LATTICE))) if pc_tables is None else pc_tables
        if config.shared_stats:
            shared = ProposalStats(sigma0=config.sigma0)
            self.stats = [shared] * n
        else:
            self.stats = [ProposalStats(sigma0=config.sigma0) for _ in range(n)]

    @property
    def adjustments(self) -> np.ndarray:
        return LATTICE[self.index]

    def history_array(self) -> np.ndarray:
        if self.config.shared_stats:
            h = np.asarray(self.stats[0].history).reshape(-1, 4)
            return h[None]
        lens = {len(s.history) for s in self.stats}
        t = max(lens) if lens else 0
        out = np.full((len(self.stats), t, 4), np.nan)
        for i, s in enumerate(self.stats):
            if s.history:
                out[i, :len(s.history)] = np.asarray(s.history)
        return out

    def load_history(self, hist: np.ndarray):
        if self.config.shared_stats:
            self.stats[0].history = [r for r in hist[0] if not np.isnan(r).any()]
            self.stats[0].refresh()
            return
        for s, h in zip(self.stats, hist):
            s.history = [r for r in h if not np.isnan(r).any()]
            s.refresh()


def compute_boundary_tables(samples, config: TrainConfig, cache_dir=None) -> np.ndarray:
    tables = []
    for s in samples:
        sp = cached_slic(s.image, cache_dir, config.superpixel_segments, config.compactness)
        tables.append(boundary_table(s, sp, config.perimeter_samples))
    return np.stack(tables)


def e_step(samples, model: JointModel, state: LatentState, config: TrainConfig, epoch: int,
           indices=None, chain_log: list | None = None) -> dict:
    """Choose an adjustment per sample; returns summary statistics."""
    indices = range(len(samples)) if indices is None else indices
    indices = list(indices)
    if config.latent_mode == "zero":
        state.index[indices] = ZERO_INDEX
        return {"changed": 0, "evaluations": 0}
    side = model.loc.config.input_shape[0]
    loc_pred = model.loc.forward(_loc_inputs([samples[i] for i in indices], side)).astype(np.float64)
    eps_pc = 1.0 / config.perimeter_samples
    changed = evaluations = 0
    new_index = {}
    for row, i in enumerate(indices):
        stats = state.stats[i]
        prob = LatentProblem(samples[i], model, state.pc[i], stats, eps_pc, loc_pred[row],
                             count_truncated=config.count_truncated)
        prev = int(state.index[i])
        if config.latent_mode == "enumerate":
            _, best, _ = enumerate_best(prob)
        else:
            init = prev if config.warm_start else ZERO_INDEX
            res = run_chain(prob, config.K, substream(config.seed, STREAM_SAMPLER, epoch, i), init)
            best = res.best_index
            # keep the previous choice unless the chain found something strictly better
            if prob.log_pi(prev) >= prob.log_pi(best):
                best = prev
            if chain_log is not None:
                for r in res.trace:
                    chain_log.append({"epoch": epoch, "sample": samples[i].id, **r})
        new_index[i] = best
        evaluations += prob.evaluations
        changed += int(best != prev)
    for i, best in new_index.items():
        state.index[i] = best
        state.stats[i].record(LATTICE[best])
    return {"changed": changed, "evaluations": evaluations}


# -- pre-training --------------------------------------------------------------

def pretrain_localization(samples, model: JointModel, config: TrainConfig):
    """Warm-up box regression on tight boxes at one uniform rate for every layer.

    Afterwards the fully connected layers are re-initialised (conv layers kept).
    """
    if config.pretrain_epochs <= 0:
        return
    side = model.loc.config.input_shape[0]
    velocity = {}
    targets = np.stack([s.tight_box for s in samples])
    x_all = _loc_inputs(samples, side)
    for ep in range(config.pretrain_epochs):
        order = substream(config.seed, STREAM_PRETRAIN, ep).permutation(len(samples))
        for start in range(0, len(samples), config.batch_size):
            idx = order[start:start + config.batch_size]
            out = model.loc.forward(x_all[idx], train=True)
            model.loc.backward((2.0 / len(idx)) * (out - targets[idx].astype(out.dtype)))
            _check_grads(model.loc, [samples[i].id for i in idx])
            for _, p in model.loc.param_layers():
                sgd_step(p, config.pretrain_lr, config.momentum, velocity)
    if config.pretrain_reset_fc:
        rng = substream(config.seed, STREAM_PRETRAIN, 10_000)
        shapes = model.loc.shapes
        for i, (spec, p) in enumerate(zip(model.loc.layers, model.loc.params)):
            if spec.kind == "fc":
                fresh = init_params(spec, shapes[i], rng, config.init_std, p.weights.dtype)
                p.weights, p.biases = fresh.weights, fresh.biases
                p.zero_grad()


# -- EM loop -------------------------------------------------------------------

@dataclass
class TrainResult:
    model: JointModel
    history: list
    state: LatentState
    stopped_early: bool = False


COST_COLUMNS = ("epoch", "total", "loc_term", "seg_term", "wall_seconds")


def _write_costs(path: Path, history: list, reproducible: bool):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COST_COLUMNS)
        for r in history:
            wall = "" if reproducible else f"{r['wall_seconds']:.3f}"
            w.writerow([r["epoch"], repr(r["total"]), repr(r["loc_term"]), repr(r["seg_term"]), wall])


def _write_timing(path: Path, history: list):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "wall_seconds", "estep_evaluations"])
        for r in history:
            w.writerow([r["epoch"], f"{r['wall_seconds']:.3f}", r.get("evaluations", 0)])


def build_model(config: TrainConfig, network_configs=None) -> JointModel:
    loc_cfg, seg_cfg = network_configs or profile_configs(config.profile)
    return JointModel.build(loc_cfg, seg_cfg, substream(config.seed, STREAM_INIT),
                            config.init_std, np.dtype(config.dtype))


def _named_params(model: JointModel):
    for tag, net in (("loc", model.loc), ("seg", model.seg)):
        for spec, p in net.param_layers():
            yield f"{tag}.{spec.name}", p


def velocity_tensors(model: JointModel, velocity: dict) -> dict:
    out = {}
    for name, p in _named_params(model):
        if id(p) in velocity:
            out[f"velocity.{name}.w"], out[f"velocity.{name}.b"] = velocity[id(p)]
    return out


def restore_velocity(model: JointModel, tensors: dict) -> dict:
    """Momentum buffers keyed by the (new) parameter objects of ``model``."""
    return {id(p): (tensors[f"velocity.{name}.w"].copy(), tensors[f"velocity.{name}.b"].copy())
            for name, p in _named_params(model) if f"velocity.{name}.w" in tensors}


def save_checkpoint(path, model: JointModel, state: LatentState, config: TrainConfig,
                    epoch: int, history: list, velocity: dict | None = None):
    meta = {"epoch": epoch, "config": config.to_dict(), "version": __version__,
            "history": [{k: r[k] for k in ("epoch", "total", "loc_term", "seg_term")}
                        for r in history]}
    extra = {"latent.index": state.index, "latent.history": state.history_array(),
             **velocity_tensors(model, velocity or {})}
    model.save(path, meta, extra)


def latest_checkpoint(out_dir) -> Path | None:
    ckpts = sorted((Path(out_dir) / "checkpoints").glob("epoch_*.ckpt"))
    return ckpts[-1] if ckpts else None


def em_train(samples, config: TrainConfig, out_dir=None, network_configs=None,
             pc_tables: np.ndarray | None = None, cache_dir=None, resume: bool = False,
             reproducible: bool = True, chain_log: list | None = None,
             model: JointModel | None = None) -> TrainResult:
    """Alternate E-steps (latent adjustments) and M-steps (SGD on both networks).

    Epoch 0 records the cost before any update.  With ``out_dir`` set, a
    checkpoint is written per epoch along with ``costs.csv`` and ``timing.csv``.
    """
    if not samples:
        raise ValueError("dataset is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    if pc_tables is None and config.latent_mode != "zero":
        pc_tables = compute_boundary_tables(samples, config, cache_dir)
    state = LatentState(len(samples), config, pc_tables)
    history: list = []
    start_epoch = 1
    ckpt = latest_checkpoint(out) if (resume and out is not None) else None
    velocity: dict = {}
    if ckpt is not None:
        model, meta, tensors = JointModel.load(ckpt, np.dtype(config.dtype))
        state.index[:] = tensors["latent.index"]
        state.load_history(tensors["latent.history"])
        velocity = restore_velocity(model, tensors)
        history = [dict(r, wall_seconds=0.0) for r in meta["history"]]
        start_epoch = meta["epoch"] + 1
        log.info("resumed from %s at epoch %d", ckpt, start_epoch)
    else:
        if model is None:
            model = build_model(config, network_configs)
        t0 = time.perf_counter()
        pretrain_localization(samples, model, config)
        c = joint_cost(samples, state.adjustments, model, count_truncated=config.count_truncated)
        history.append({"epoch": 0, "total": c.total, "loc_term": c.loc_term,
                        "seg_term": c.seg_term, "wall_seconds": time.perf_counter() - t0})
        if out is not None:
            save_checkpoint(out / "checkpoints" / "epoch_000.ckpt", model, state, config, 0, history)
    stopped = False
    for epoch in range(start_epoch, config.epochs + 1):
        t0 = time.perf_counter()
        sampling = epoch > config.latent_burn_in
        rng = substream(config.seed, STREAM_ORDER, epoch)
        info = {"changed": 0, "evaluations": 0}
        if config.alternation == "epoch":
            if sampling:
                info = e_step(samples, model, state, config, epoch, chain_log=chain_log)
            m_step(samples, state.adjustments, model, config, rng, velocity, report=False)
        else:
            for _ in range(config.mstep_passes):
                order = rng.permutation(len(samples))
                for start in range(0, len(samples), config.batch_size):
                    idx = order[start:start + config.batch_size]
                    if sampling:
                        r = e_step(samples, model, state, config, epoch, idx, chain_log)
                        info["changed"] += r["changed"]
                        info["evaluations"] += r["evaluations"]
                    backprop_batch([samples[i] for i in idx], state.adjustments[idx], model)
                    apply_update(model, config, velocity)
        c = joint_cost(samples, state.adjustments, model, count_truncated=config.count_truncated)
        row = {"epoch": epoch, "total": c.total, "loc_term": c.loc_term, "seg_term": c.seg_term,
               "wall_seconds": time.perf_counter() - t0, **info}
        history.append(row)
        log.info("epoch %d cost %.4f (loc %.4f seg %.4f) changed %d", epoch, c.total,
                 c.loc_term, c.seg_term, info["changed"])
        if out is not None:
            save_checkpoint(out / "checkpoints" / f"epoch_{epoch:03d}.ckpt", model, state,
                            config, epoch, history, velocity)
            _write_costs(out / "costs.csv", history, reproducible)
        if _should_stop(history, config):
            stopped = True
            break
    if out is not None:
        _write_costs(out / "costs.csv", history, reproducible)
        _write_timing(out / "timing.csv", history)
        model.save(out / "final.ckpt", {"config": config.to_dict(), "version": __version__},
                   {"latent.index": state.index})
    return TrainResult(model, history, state, stopped)


def _should_stop(history: list, config: TrainConfig) -> bool:
    p = config.early_stop_patience
    if p <= 0 or len(history) <= p:
        return False
    old, new = history[-p - 1]["total"], history[-1]["total"]
    return (old - new) / max(abs(old), 1e-12) < config.early_stop_tol


def write_manifest(path, config: TrainConfig, dataset_hash: str, extra: dict | None = None):
    manifest = {"config": config.to_dict(), "seed": config.seed, "dataset_hash": dataset_hash,
                "code_version": __version__,
                "started": time.strftime("%Y-%m-%dT%H:%M:%S"), **(extra or {})}
    Path(path).write_text(json.dumps(manifest, indent=2, default=str))
    return manifest
