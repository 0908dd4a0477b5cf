"""Synthetic labeled datasets with class-conditional Beta score distributions.

Both stage scores are drawn independently given the label, so the second
stage adds information rather than echoing the first. Separation controls
distinguishability: positives draw from Beta(1 + sep, 1) (skewed toward 1),
negatives from Beta(1, 1 + sep) (skewed toward 0); sep = 0 is uninformative
Uniform(0, 1) for both classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabeledExample, ProbVector, VideoItem


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one reproducible dataset.

    n: number of examples.
    prevalence: marginal probability of the positive class.
    stage1_sep / stage2_sep: class separation of each scorer, >= 0.
    seed: generator seed; equal specs yield identical datasets.
    """

    n: int
    prevalence: float = 0.1
    stage1_sep: float = 1.0
    stage2_sep: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be >= 0")
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must be within (0, 1)")
        if self.stage1_sep < 0 or self.stage2_sep < 0:
            raise ValueError("separations must be >= 0")


def _stage_scores(rng: np.random.Generator, labels: np.ndarray, sep: float) -> np.ndarray:
    pos = rng.beta(1.0 + sep, 1.0, size=labels.shape)
    neg = rng.beta(1.0, 1.0 + sep, size=labels.shape)
    return np.where(labels == 1, pos, neg)


def generate(spec: SynthSpec) -> list[LabeledExample]:
    """Draw a dataset according to the spec, deterministically in the seed."""
    rng = np.random.default_rng(spec.seed)
    labels = (rng.uniform(size=spec.n) < spec.prevalence).astype(int)
    s1 = _stage_scores(rng, labels, spec.stage1_sep)
    s2 = _stage_scores(rng, labels, spec.stage2_sep)
    # view volume spans ten to a million, log-uniform
    vv = 10.0 ** rng.uniform(1.0, 6.0, size=spec.n)

    examples = []
    for i in range(spec.n):
        item = VideoItem(
            id=f"v{spec.seed}-{i:06d}",
            metadata={"vv": float(vv[i])},
        )
        examples.append(
            LabeledExample(
                item=item,
                stage1=ProbVector((1.0 - float(s1[i]), float(s1[i]))),
                stage2=ProbVector((1.0 - float(s2[i]), float(s2[i]))),
                label=int(labels[i]),
            )
        )
    return examples
