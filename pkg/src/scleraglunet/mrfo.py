"""Manta Ray Foraging Optimization: continuous minimizer with the
chain / cyclone / somersault phases, plus a binary feature-selection
wrapper driven by a closed-form linear probe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParam, NonFiniteFitness
from .evalkit import confusion_and_prf1


@dataclass(frozen=True)
class MrfoConfig:
    pop_size: int
    iters: int
    dim: int
    bounds: tuple  # ((lo, hi), ...) per dimension
    somersault_factor: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.pop_size < 2:
            raise InvalidParam("pop_size must be >= 2")
        if self.dim < 1 or len(self.bounds) != self.dim:
            raise InvalidParam("bounds must give one (lo, hi) per dimension")
        if any(lo >= hi for lo, hi in self.bounds):
            raise InvalidParam("each bound must satisfy lo < hi")
        if self.somersault_factor <= 0:
            raise InvalidParam("somersault factor must be positive")


def uniform_box(lo: np.ndarray, hi: np.ndarray, rng) -> np.ndarray:
    return lo + rng.random(lo.shape[-1]) * (hi - lo)


def mrfo_step(positions: np.ndarray, t: int, total_iters: int,
              best: np.ndarray, lo: np.ndarray, hi: np.ndarray,
              somersault: float, rng) -> np.ndarray:
    """One movement step (chain/cyclone then somersault), clamped to bounds.

    Uses the incoming population and best throughout; fitness evaluation and
    elitism live in the caller.
    """
    if not (1 <= t <= total_iters):
        raise InvalidParam("iteration index out of range")
    n, dim = positions.shape
    new = np.empty_like(positions)
    for i in range(n):
        prev = best if i == 0 else positions[i - 1]
        xi = positions[i]
        if rng.random() < 0.5:
            # cyclone foraging: spiral around best (exploit) or a random
            # point in the box (explore, early iterations)
            r1 = rng.random(dim)
            beta = 2.0 * np.exp(r1 * (total_iters - t + 1) / total_iters) * np.sin(2.0 * np.pi * r1)
            r = rng.random(dim)
            if t / total_iters > rng.random():
                new[i] = best + r * (prev - xi) + beta * (best - xi)
            else:
                x_rand = uniform_box(lo, hi, rng)
                prev_r = x_rand if i == 0 else positions[i - 1]
                new[i] = x_rand + r * (prev_r - xi) + beta * (x_rand - xi)
        else:
            # chain foraging
            r = rng.random(dim)
            alpha = 2.0 * r * np.sqrt(np.abs(np.log(r)))
            new[i] = xi + r * (prev - xi) + alpha * (best - xi)
    np.clip(new, lo, hi, out=new)
    # somersault around the best position
    for i in range(n):
        r2 = rng.random(dim)
        r3 = rng.random(dim)
        new[i] = new[i] + somersault * (r2 * best - r3 * new[i])
    np.clip(new, lo, hi, out=new)
    return new


@dataclass
class MrfoResult:
    best_position: np.ndarray
    best_fitness: float
    history: list = field(default_factory=list)


def mrfo_optimize(fitness, config: MrfoConfig, observer=None) -> MrfoResult:
    """Minimize `fitness` over the box; deterministic given config.seed.

    `observer(position, value)` is called for every evaluation, letting
    wrappers apply their own tie-break bookkeeping.
    """
    rng = np.random.default_rng(config.seed)
    lo = np.array([b[0] for b in config.bounds], dtype=np.float64)
    hi = np.array([b[1] for b in config.bounds], dtype=np.float64)
    positions = lo + rng.random((config.pop_size, config.dim)) * (hi - lo)

    def evaluate(pos_matrix):
        vals = np.empty(len(pos_matrix))
        for i, p in enumerate(pos_matrix):
            v = float(fitness(p))
            if not np.isfinite(v):
                raise NonFiniteFitness(f"fitness not finite at {p}")
            if observer is not None:
                observer(p, v)
            vals[i] = v
        return vals

    fitnesses = evaluate(positions)
    best_i = int(np.argmin(fitnesses))
    best_pos = positions[best_i].copy()
    best_fit = float(fitnesses[best_i])
    history = [best_fit]

    for t in range(1, config.iters + 1):
        positions = mrfo_step(positions, t, config.iters, best_pos, lo, hi,
                              config.somersault_factor, rng)
        fitnesses = evaluate(positions)
        cand = int(np.argmin(fitnesses))
        if fitnesses[cand] < best_fit:
            best_fit = float(fitnesses[cand])
            best_pos = positions[cand].copy()
        history.append(best_fit)
    return MrfoResult(best_position=best_pos, best_fitness=best_fit, history=history)


# ---------------------------------------------------------------------------
# Binary feature selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureMask:
    bits: tuple

    def __post_init__(self):
        if not any(self.bits):
            raise InvalidParam("mask must select at least one feature")

    @property
    def dim(self) -> int:
        return len(self.bits)

    @property
    def selected(self) -> int:
        return sum(self.bits)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.float64)


def all_ones_mask(dim: int) -> FeatureMask:
    return FeatureMask(bits=(1,) * dim)


def save_mask(mask: FeatureMask, path, seed: int):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# dim={mask.dim} seed={seed}\n")
        fh.write("".join(str(b) for b in mask.bits) + "\n")


def load_mask(path) -> FeatureMask:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    bits = tuple(int(ch) for ch in lines[1])
    return FeatureMask(bits=bits)


def decode_mask(position: np.ndarray) -> tuple:
    """Continuous [0,1] position -> bits; force the top coordinate on if empty."""
    bits = position > 0.5
    if not bits.any():
        bits = np.zeros_like(bits)
        bits[int(np.argmax(position))] = True
    return tuple(int(b) for b in bits)


def ridge_probe_macro_f1(train_x: np.ndarray, train_y: np.ndarray,
                         val_x: np.ndarray, val_y: np.ndarray,
                         num_classes: int = 3, ridge: float = 1e-3) -> float:
    """Macro-F1 of a closed-form one-vs-all ridge classifier."""
    n, d = train_x.shape
    xb = np.hstack([train_x, np.ones((n, 1))])
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), train_y] = 1.0
    gram = xb.T @ xb + ridge * np.eye(d + 1)
    w = np.linalg.solve(gram, xb.T @ onehot)
    vb = np.hstack([val_x, np.ones((len(val_x), 1))])
    pred = np.argmax(vb @ w, axis=1)
    _, per_class, macro, _ = confusion_and_prf1(val_y, pred, num_classes)
    return macro["f1"]


def mask_fitness(bits: tuple, train_x, train_y, val_x, val_y,
                 lambda_red: float) -> float:
    sel = np.array(bits, dtype=bool)
    f1 = ridge_probe_macro_f1(train_x[:, sel], train_y, val_x[:, sel], val_y)
    return -f1 + lambda_red * (sel.sum() / len(bits))


class _BestMaskTracker:
    """Tie-break: lower fitness, then fewer features, then lexicographically
    smaller bit pattern."""

    def __init__(self):
        self.key = None
        self.bits = None
        self.fitness = None

    def offer(self, bits: tuple, fitness: float):
        key = (fitness, sum(bits), bits)
        if self.key is None or key < self.key:
            self.key = key
            self.bits = bits
            self.fitness = fitness


def feature_select(train_x: np.ndarray, train_y: np.ndarray,
                   val_x: np.ndarray, val_y: np.ndarray,
                   config: MrfoConfig, lambda_red: float = 0.01) -> FeatureMask:
    """MRFO wrapper selection over the concatenated embedding dimensions.

    Fitness of a candidate mask is minus the macro-F1 of a ridge probe fit on
    the training embeddings and scored on held-out validation embeddings,
    plus a sparsity penalty. The caller is responsible for never passing
    test-fold participants here.
    """
    dim = train_x.shape[1]
    if config.dim != dim:
        raise InvalidParam(f"config.dim {config.dim} != embedding dim {dim}")
    tracker = _BestMaskTracker()
    cache: dict = {}

    def fitness(position):
        bits = decode_mask(position)
        if bits not in cache:
            cache[bits] = mask_fitness(bits, train_x, train_y, val_x, val_y, lambda_red)
        v = cache[bits]
        tracker.offer(bits, v)
        return v

    mrfo_optimize(fitness, config)
    return FeatureMask(bits=tracker.bits)
