"""Bayesian-optimization search over pipeline configurations.

Configurations pair a categorical choice per stage with continuous/integer
hyperparameters for that choice.  They are encoded as one-hot stage blocks
concatenated with min-max-normalized hyperparameter coordinates (inactive
hyperparameters pinned at zero), which makes the encoding injective over
the skeleton and gives the GP surrogate a fixed-width input.

The loop: an initial uniform design, then per round a surrogate refit by
marginal-likelihood maximization and an expected-improvement argmax over a
fresh pool of random candidates.  Already-evaluated encodings are never
re-proposed; on finite fully-categorical spaces the dedup rule plus an
enumeration fallback guarantee full coverage once the budget allows it.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from . import gp

__all__ = [
    "HyperRange",
    "StageChoice",
    "SearchSpace",
    "SearchResult",
    "skeleton_count",
    "encode",
    "sample_config",
    "search",
    "history_to_jsonl",
]


@dataclass(frozen=True)
class HyperRange:
    low: float
    high: float
    kind: str = "float"  # float | int | logfloat

    def __post_init__(self):
        if self.kind not in ("float", "int", "logfloat"):
            raise ValueError(f"unknown hyperparameter kind {self.kind!r}")
        if not (self.low < self.high):
            raise ValueError("low must be < high")
        if self.kind == "logfloat" and self.low <= 0:
            raise ValueError("logfloat ranges must be positive")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "int":
            return int(rng.integers(int(self.low), int(self.high) + 1))
        if self.kind == "logfloat":
            return float(np.exp(rng.uniform(math.log(self.low), math.log(self.high))))
        return float(rng.uniform(self.low, self.high))

    def normalize(self, value: float) -> float:
        if self.kind == "logfloat":
            return (math.log(value) - math.log(self.low)) / (
                math.log(self.high) - math.log(self.low)
            )
        return (value - self.low) / (self.high - self.low)

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high


@dataclass(frozen=True)
class StageChoice:
    name: str
    hyperparams: Tuple[Tuple[str, HyperRange], ...] = ()

    @staticmethod
    def from_bounds(name: str, bounds: Dict[str, tuple]) -> "StageChoice":
        hp = tuple(
            (pname, HyperRange(low=b[0], high=b[1], kind=b[2]))
            for pname, b in sorted(bounds.items())
        )
        return StageChoice(name=name, hyperparams=hp)


@dataclass(frozen=True)
class SearchSpace:
    """Ordered stages, each offering a nonempty list of choices."""

    stages: Tuple[Tuple[str, Tuple[StageChoice, ...]], ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("search space needs at least one stage")
        for stage, choices in self.stages:
            if not choices:
                raise ValueError(f"stage {stage!r} has no choices")

    @staticmethod
    def from_dict(stages: Dict[str, Sequence[StageChoice]]) -> "SearchSpace":
        return SearchSpace(
            stages=tuple((name, tuple(ch)) for name, ch in stages.items())
        )

    def choice(self, stage: str, name: str) -> StageChoice:
        for sname, choices in self.stages:
            if sname == stage:
                for ch in choices:
                    if ch.name == name:
                        return ch
                raise KeyError(f"stage {stage!r} has no choice {name!r}")
        raise KeyError(f"no stage {stage!r}")

    @property
    def encoding_dim(self) -> int:
        total = 0
        for _, choices in self.stages:
            total += len(choices) + sum(len(ch.hyperparams) for ch in choices)
        return total

    @property
    def purely_categorical(self) -> bool:
        return all(
            not ch.hyperparams for _, choices in self.stages for ch in choices
        )


def skeleton_count(space: SearchSpace) -> int:
    """Number of distinct per-stage algorithm selections (hyperparams aside)."""
    count = 1
    for _, choices in space.stages:
        count *= len(choices)
    return count


def sample_config(space: SearchSpace, rng: np.random.Generator) -> dict:
    config = {}
    for stage, choices in space.stages:
        ch = choices[rng.integers(0, len(choices))]
        config[stage] = {
            "choice": ch.name,
            "params": {pname: rng_kind.sample(rng) for pname, rng_kind in ch.hyperparams},
        }
    return config


def encode(config: dict, space: SearchSpace) -> np.ndarray:
    """One-hot per stage plus normalized hyperparameters; inactive ones are 0."""
    vec: List[float] = []
    for stage, choices in space.stages:
        if stage not in config:
            raise ValueError(f"config is missing stage {stage!r}")
        picked = config[stage]["choice"]
        params = config[stage].get("params", {})
        names = [ch.name for ch in choices]
        if picked not in names:
            raise ValueError(f"choice {picked!r} not in stage {stage!r}")
        onehot = [1.0 if n == picked else 0.0 for n in names]
        vec.extend(onehot)
        for ch in choices:
            for pname, hrange in ch.hyperparams:
                if ch.name == picked:
                    if pname not in params:
                        raise ValueError(
                            f"config is missing hyperparameter {stage}.{pname}"
                        )
                    value = params[pname]
                    if not hrange.contains(value):
                        raise ValueError(
                            f"{stage}.{pname}={value} outside [{hrange.low}, {hrange.high}]"
                        )
                    vec.append(hrange.normalize(value))
                else:
                    vec.append(0.0)
    return np.asarray(vec, dtype=float)


def _encoding_key(vec: np.ndarray) -> bytes:
    return np.round(vec, 12).tobytes()


def _all_skeleton_configs(space: SearchSpace):
    names = [[ch.name for ch in choices] for _, choices in space.stages]
    stage_names = [stage for stage, _ in space.stages]
    for combo in itertools.product(*names):
        yield {
            stage: {"choice": choice, "params": {}}
            for stage, choice in zip(stage_names, combo)
        }


@dataclass
class SearchResult:
    best_config: dict
    best_loss: float
    history: List[Tuple[dict, float]] = field(default_factory=list)

    @property
    def best_trace(self) -> List[float]:
        trace, best = [], math.inf
        for _, loss in self.history:
            best = min(best, loss)
            trace.append(best)
        return trace


def expected_improvement(mean, std, best) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    std = np.maximum(np.asarray(std, dtype=float), 0.0)
    improve = best - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(std > 0, improve / np.maximum(std, 1e-300), 0.0)
    ei = np.where(
        std > 0,
        improve * norm.cdf(z) + std * norm.pdf(z),
        np.maximum(improve, 0.0),
    )
    return np.maximum(ei, 0.0)


def search(
    space: SearchSpace,
    objective: Callable[[dict], float],
    budget: int,
    seed: int = 0,
    init_count: int = 10,
    pool_size: int = 512,
) -> SearchResult:
    """Sequential exploration-exploitation over the configuration space."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    init_count = min(init_count, budget)
    rng = np.random.default_rng(seed)
    seen: Dict[bytes, float] = {}
    history: List[Tuple[dict, float]] = []
    encodings: List[np.ndarray] = []
    losses: List[float] = []

    def evaluate(config: dict) -> None:
        vec = encode(config, space)
        try:
            loss = float(objective(config))
        except Exception:
            loss = math.inf
        seen[_encoding_key(vec)] = loss
        history.append((config, loss))
        encodings.append(vec)
        losses.append(loss)

    def fresh_configs(count: int, tries: int = 50) -> List[dict]:
        out, batch_keys, k = [], set(), 0
        while len(out) < count and k < tries * count:
            cfg = sample_config(space, rng)
            key = _encoding_key(encode(cfg, space))
            if key not in seen and key not in batch_keys:
                out.append(cfg)
                batch_keys.add(key)
            k += 1
        if not out and space.purely_categorical:
            for cfg in _all_skeleton_configs(space):
                if _encoding_key(encode(cfg, space)) not in seen:
                    out.append(cfg)
                    if len(out) >= count:
                        break
        return out

    # Initial uniform design.
    for cfg in fresh_configs(init_count):
        evaluate(cfg)

    while len(history) < budget:
        pool = fresh_configs(pool_size)
        if not pool:
            break  # finite space fully evaluated
        finite = np.isfinite(losses)
        if finite.sum() >= 2 and len(set(np.round(np.asarray(losses)[finite], 12))) > 1:
            x = np.asarray(encodings)[finite]
            y = np.asarray(losses)[finite]
            penalty = y.max() + 3.0 * max(y.std(), 1e-3)
            y_all = np.where(np.isfinite(losses), losses, penalty)
            x_all = np.asarray(encodings)
            mu, sd = float(y_all.mean()), float(max(y_all.std(), 1e-9))
            surrogate = gp.fit_hyperparameters(
                x_all, (y_all - mu) / sd, n_restarts=1, seed=seed
            )
            pool_enc = np.asarray([encode(c, space) for c in pool])
            post = gp.posterior(surrogate, pool_enc)
            best_norm = (min(y_all) - mu) / sd
            ei = expected_improvement(
                post.mean, np.sqrt(np.maximum(post.variance, 0.0)), best_norm
            )
            top = ei.max()
            tied = np.flatnonzero(ei >= top - 1e-12)
            if len(tied) > 1:
                order = np.lexsort(pool_enc[tied].T[::-1])
                pick = tied[order[0]]
            else:
                pick = tied[0]
            evaluate(pool[pick])
        else:
            evaluate(pool[0])

    best_idx = int(np.argmin(losses))
    return SearchResult(
        best_config=history[best_idx][0],
        best_loss=losses[best_idx],
        history=history,
    )


def history_to_jsonl(result: SearchResult) -> str:
    """Line-delimited (config, loss, timestamp) records for downstream analysis."""
    stamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    lines = []
    for config, loss in result.history:
        lines.append(
            json.dumps(
                {"config": config, "loss": None if math.isinf(loss) else loss, "ts": stamp},
                sort_keys=True,
            )
        )
    return "\n".join(lines)
