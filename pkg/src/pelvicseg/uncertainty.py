"""Monte-Carlo-dropout sampling, voxelwise moments, 95% bounds, and the
reference-free contour quality score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .metrics import dsc
from .rng import Rng

Z95 = 1.96
DEFAULT_T = 50


@dataclass
class McdoStack:
    """T stochastic probability volumes over one grid."""

    samples: np.ndarray  # (T, ...)
    config_hash: str = ""
    seeds: tuple[int, ...] = ()

    @property
    def t(self) -> int:
        return self.samples.shape[0]


@dataclass
class UncertaintySummary:
    mean: np.ndarray
    var: np.ndarray  # population variance
    lower: np.ndarray  # clamp(mean - 1.96 sd, 0, 1)
    upper: np.ndarray
    mean_contour: np.ndarray  # mean >= 0.5
    band: np.ndarray  # (upper >= 0.5) minus (lower >= 0.5)


def sample_seed(base_seed: int, t: int) -> int:
    return Rng(base_seed).derive("mcdo", t).key % (2**31)


def mcdo_sample(model, inp: np.ndarray, t: int = DEFAULT_T, base_seed: int = 0) -> McdoStack:
    """T stochastic forward passes with DropBlock left on; sample i is a pure
    function of (base_seed, i), so any evaluation order gives the same stack."""
    if t < 1:
        raise ValueError("need at least one sample")
    seeds = tuple(sample_seed(base_seed, i) for i in range(t))
    samples = []
    for s in seeds:
        out = nets.forward(model, inp, stochastic=True, rng_state=s)
        if isinstance(out, nets.AgmtnOutputs):
            out = out.main_seg
        samples.append(np.asarray(out, dtype=np.float32))
    return McdoStack(np.stack(samples), nets.config_hash(model.cfg), seeds)


def summarize(stack: McdoStack) -> UncertaintySummary:
    if stack.t < 2:
        raise ValueError("variance needs at least two samples")
    mean = stack.samples.mean(axis=0)
    var = stack.samples.var(axis=0)  # population: exact for the alternating-sample case
    sd = np.sqrt(var)
    lower = np.clip(mean - Z95 * sd, 0.0, 1.0)
    upper = np.clip(mean + Z95 * sd, 0.0, 1.0)
    return UncertaintySummary(
        mean=mean,
        var=var,
        lower=lower,
        upper=upper,
        mean_contour=mean >= 0.5,
        band=(upper >= 0.5) & ~(lower >= 0.5),
    )


def contour_quality(stack: McdoStack) -> float | None:
    """Mean Dice between each binarized sample and the binarized mean;
    undefined (None) when the mean contour is empty."""
    if stack.t < 2:
        raise ValueError("contour quality needs at least two samples")
    mean_contour = stack.samples.mean(axis=0) >= 0.5
    if not mean_contour.any():
        return None
    vals = [dsc(stack.samples[i] >= 0.5, mean_contour) for i in range(stack.t)]
    return float(np.mean(vals))
