"""Metropolis-Hastings search over discrete box adjustments.

The adjustment lattice is the 4-fold product of ``LATTICE_VALUES`` (625 points,
lexicographic order).  The proposal mass does not depend on the current state,
so it is tabulated once per sample and normalized exactly over the lattice;
acceptance ratios then use exact ``q`` values.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .networks import JointModel, box_to_pixels, clamp_box, crop_mask_pixels, crop_pixels, \
    localize_batch, outside_foreground, segment_batch
from .superpixels import SuperpixelMap, boundary_fraction, DEFAULT_SAMPLES

LATTICE_VALUES = (-10.0, -5.0, 0.0, 5.0, 10.0)
PROB_EPS = 1e-7
# cost of one foreground pixel left outside the reference (predicted background)
TRUNCATION_COST = -float(np.log(PROB_EPS))


def make_lattice(values=LATTICE_VALUES) -> np.ndarray:
    return np.array(list(itertools.product(sorted(values), repeat=4)), dtype=np.float64)


LATTICE = make_lattice()
ZERO_INDEX = int(np.flatnonzero(~LATTICE.any(axis=1))[0])


def lattice_index(dl, lattice: np.ndarray = LATTICE) -> int:
    hit = np.flatnonzero(np.all(lattice == np.asarray(dl, dtype=np.float64), axis=1))
    if hit.size == 0:
        raise ValueError(f"{dl} is not a lattice point")
    return int(hit[0])


@dataclass
class ProposalStats:
    """Per-sample Gaussian over past optimal adjustments."""
    sigma0: float = 5.0
    min_history: int = 5
    reg: float = 1e-3
    history: list = field(default_factory=list)
    mu: np.ndarray = field(default=None)
    sigma: np.ndarray = field(default=None)

    def __post_init__(self):
        self.refresh()

    def prior(self) -> np.ndarray:
        return np.eye(4) * self.sigma0 ** 2

    def refresh(self):
        h = np.asarray(self.history, dtype=np.float64).reshape(-1, 4)
        self.mu = h.mean(axis=0) if len(h) else np.zeros(4)
        if len(h) < self.min_history:
            self.sigma = self.prior() + self.reg * np.eye(4)
            return
        cov = np.cov(h, rowvar=False)
        if np.linalg.matrix_rank(cov) < 4:
            cov = self.prior()
        self.sigma = cov + self.reg * np.eye(4)

    def record(self, dl):
        self.history.append(np.asarray(dl, dtype=np.float64).copy())
        self.refresh()

    def log_gaussian(self, lattice: np.ndarray = LATTICE) -> np.ndarray:
        d = lattice - self.mu
        return -0.5 * np.einsum("ni,ij,nj->n", d, np.linalg.inv(self.sigma), d)


def proposal_log_mass(stats: ProposalStats, pc: np.ndarray, eps_pc: float,
                      lattice: np.ndarray = LATTICE) -> np.ndarray:
    """Normalized log q over the lattice: Gaussian x max(P_c, eps_pc)."""
    logw = stats.log_gaussian(lattice) + np.log(np.maximum(pc, eps_pc))
    return logw - logsumexp(logw)


def reference_boxes(tight_box, frame: float, lattice: np.ndarray = LATTICE) -> np.ndarray:
    """Adjusted boxes L + dL, clamped to the frame (lattice points stay untouched)."""
    return clamp_box(np.asarray(tight_box) + lattice, frame)


def boundary_table(sample, spmap: SuperpixelMap, c: int = DEFAULT_SAMPLES,
                   lattice: np.ndarray = LATTICE) -> np.ndarray:
    """P_c for every lattice point of one sample."""
    h, w = sample.mask.shape
    px = box_to_pixels(reference_boxes(sample.tight_box, sample.frame, lattice), sample.frame, h, w)
    return boundary_fraction(spmap, px, c)


def score_boxes(sample, model: JointModel, boxes: np.ndarray, loc_pred: np.ndarray,
                count_truncated: bool = True) -> np.ndarray:
    """log pi for reference boxes (normalized frame), up to an additive constant.

    Localization term: -||F_loc(I) - box||^2.  Segmentation term: Bernoulli
    log-likelihood of the mask cropped at ``box`` under the network output,
    plus (``count_truncated``) ``log(PROB_EPS)`` for every foreground pixel
    outside the box, where the painted-back mask is background.
    """
    h, w = sample.mask.shape
    px = box_to_pixels(boxes, sample.frame, h, w)
    crops, _ = crop_pixels(sample.image, px, model.crop_side)
    targets = crop_mask_pixels(sample.mask, px, model.mask_side)
    p = np.clip(segment_batch(crops, model.seg), PROB_EPS, 1 - PROB_EPS)
    seg = np.where(targets, np.log(p), np.log1p(-p)).sum(axis=(1, 2))
    if count_truncated:
        seg = seg - TRUNCATION_COST * outside_foreground(sample.mask, px)
    loc = ((np.asarray(loc_pred) - boxes) ** 2).sum(axis=1)
    return seg - loc


class LatentProblem:
    """Scores and proposes adjustments for one sample under fixed networks.

    ``log_pi`` values are memoised per lattice index; networks must not change
    during the lifetime of a problem.
    """

    def __init__(self, sample, model: JointModel, pc: np.ndarray | None = None,
                 stats: ProposalStats | None = None, eps_pc: float = 1.0 / DEFAULT_SAMPLES,
                 loc_pred: np.ndarray | None = None, lattice: np.ndarray = LATTICE,
                 batch: int = 256, count_truncated: bool = True):
        self.sample = sample
        self.count_truncated = count_truncated
        self.model = model
        self.lattice = lattice
        self.stats = stats if stats is not None else ProposalStats()
        self.pc = np.ones(len(lattice)) if pc is None else np.asarray(pc, dtype=np.float64)
        self.eps_pc = eps_pc
        self.log_q = proposal_log_mass(self.stats, self.pc, eps_pc, lattice)
        self._cdf = np.cumsum(np.exp(self.log_q))
        self.loc_pred = (localize_batch([sample.image], model.loc, raw=True)[0]
                         if loc_pred is None else np.asarray(loc_pred, dtype=np.float64))
        self.boxes = reference_boxes(sample.tight_box, sample.frame, lattice)
        self.batch = batch
        self._cache: dict[int, float] = {}
        self.evaluations = 0

    def __len__(self):
        return len(self.lattice)

    def draw(self, rng: np.random.Generator, size=None):
        u = rng.random(size)
        return np.minimum(np.searchsorted(self._cdf, u * self._cdf[-1], side="right"),
                          len(self.lattice) - 1)

    def _score(self, idx: np.ndarray) -> np.ndarray:
        out = np.concatenate([
            score_boxes(self.sample, self.model, self.boxes[idx[i:i + self.batch]], self.loc_pred,
                        self.count_truncated)
            for i in range(0, len(idx), self.batch)])
        self.evaluations += len(idx)
        return out

    def prefetch(self, indices):
        todo = np.array(sorted({int(i) for i in np.atleast_1d(indices)} - self._cache.keys()),
                        dtype=np.intp)
        if todo.size:
            for i, v in zip(todo.tolist(), self._score(todo)):
                self._cache[i] = float(v)

    def log_pi(self, index: int) -> float:
        if index not in self._cache:
            self.prefetch([index])
        return self._cache[index]

    def log_pi_all(self) -> np.ndarray:
        self.prefetch(np.arange(len(self.lattice)))
        return np.array([self._cache[i] for i in range(len(self.lattice))])


class TableProblem:
    """A lattice target given directly as tables; used for sampler validation."""

    def __init__(self, log_pi: np.ndarray, log_q: np.ndarray, lattice: np.ndarray = LATTICE):
        self.lattice = lattice
        self.table = np.asarray(log_pi, dtype=np.float64)
        self.log_q = np.asarray(log_q, dtype=np.float64) - logsumexp(log_q)
        self._cdf = np.cumsum(np.exp(self.log_q))

    def __len__(self):
        return len(self.table)

    draw = LatentProblem.draw

    def prefetch(self, indices):
        pass

    def log_pi(self, index: int) -> float:
        return float(self.table[index])

    def log_pi_all(self) -> np.ndarray:
        return self.table.copy()


def log_invariant(sample, dl, model: JointModel, count_truncated: bool = True) -> float:
    """Unnormalized log pi of a single adjustment (one forward pass of each network)."""
    loc_pred = localize_batch([sample.image], model.loc, raw=True)[0]
    box = reference_boxes(sample.tight_box, sample.frame, np.asarray(dl, dtype=np.float64)[None])
    return float(score_boxes(sample, model, box, loc_pred, count_truncated)[0])


@dataclass
class ChainState:
    current: int
    current_log_pi: float
    best: int
    best_log_pi: float
    moves_done: int = 0

    @classmethod
    def start(cls, problem, index: int = ZERO_INDEX) -> "ChainState":
        lp = problem.log_pi(index)
        return cls(index, lp, index, lp, 0)

    def dl(self, lattice: np.ndarray = LATTICE) -> np.ndarray:
        return lattice[self.current]

    def best_dl(self, lattice: np.ndarray = LATTICE) -> np.ndarray:
        return lattice[self.best]


def propose(problem, rng: np.random.Generator) -> int:
    return int(problem.draw(rng))


def mh_step(state: ChainState, problem, rng: np.random.Generator,
            proposal: int | None = None, u: float | None = None) -> ChainState:
    """One Metropolis-Hastings move; returns a new state."""
    j = propose(problem, rng) if proposal is None else int(proposal)
    u = rng.random() if u is None else u
    lp = problem.log_pi(j)
    i = state.current
    log_alpha = (lp + problem.log_q[i]) - (state.current_log_pi + problem.log_q[j])
    accepted = j == i or log_alpha >= 0 or np.log(u) < log_alpha
    cur, cur_lp = (j, lp) if accepted else (i, state.current_log_pi)
    best, best_lp = state.best, state.best_log_pi
    if lp > best_lp:
        best, best_lp = j, lp
    return ChainState(cur, cur_lp, best, best_lp, state.moves_done + 1)


@dataclass
class ChainResult:
    best: np.ndarray
    best_index: int
    best_log_pi: float
    trace: list
    accepted: int


def run_chain(problem, K: int, rng: np.random.Generator, init: int = ZERO_INDEX,
              stats: ProposalStats | None = None) -> ChainResult:
    """K moves from ``init``; returns the best adjustment scored along the way.

    Proposals are state-independent, so all K are drawn up front and scored
    in one batch before the sequential accept/reject pass.  If ``stats`` is
    given the result is appended to its history.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    proposals = problem.draw(rng, K)
    us = rng.random(K)
    problem.prefetch(np.append(proposals, init))
    state = ChainState.start(problem, init)
    trace, accepted = [], 0
    for step, (j, u) in enumerate(zip(proposals.tolist(), us.tolist())):
        state = mh_step(state, problem, rng, proposal=j, u=u)
        took = state.current == j
        accepted += int(took)
        trace.append({"step": step, "proposal": j, "proposal_log_pi": problem.log_pi(j),
                      "accepted": took, "current": state.current,
                      "current_log_pi": state.current_log_pi, "best_log_pi": state.best_log_pi})
    best = problem.lattice[state.best]
    if stats is not None:
        stats.record(best)
    return ChainResult(best.copy(), state.best, state.best_log_pi, trace, accepted)


def enumerate_best(problem) -> tuple[np.ndarray, int, np.ndarray]:
    """Exhaustive argmax over the lattice; ties go to the lexicographically smallest."""
    values = problem.log_pi_all()
    k = int(np.argmax(values))
    return problem.lattice[k].copy(), k, values


def percentile_of(value: float, table: np.ndarray) -> float:
    """Percentage of lattice scores that ``value`` is greater than or equal to."""
    return 100.0 * float(np.mean(table <= value))


def sample_chain_visits(problem, n_steps: int, rng: np.random.Generator,
                        init: int = ZERO_INDEX) -> np.ndarray:
    """Visit counts of a long chain (state after every move)."""
    counts = np.zeros(len(problem), dtype=np.int64)
    state = ChainState.start(problem, init)
    for j, u in zip(problem.draw(rng, n_steps).tolist(), rng.random(n_steps).tolist()):
        state = mh_step(state, problem, rng, proposal=j, u=u)
        counts[state.current] += 1
    return counts
