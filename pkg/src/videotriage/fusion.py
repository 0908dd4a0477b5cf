"""Desk-scale late-fusion classifier over per-frame visual, text, and audio
features, trainable by gradient descent and verifiable by finite differences.

Dataflow: each frame vector passes through a 2-layer tanh MLP projector into
the shared token space; projected frames and text tokens form one sequence
whose mean feeds a single dense aggregator layer, producing the fused
vision-language vector H. Audio frames are average-pooled into H_a (zero
vector when a video has no audio), concatenated with H, and classified by a
linear layer plus softmax.

The aggregator-over-mean-pool is a stand-in for a language model's final
hidden state: it preserves the tokens-to-single-vector dataflow so the
projector, audio pooling, late concatenation, and classification head are
exercised exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .core import ModelOutput, ProbVector, TriageError, VideoItem


class DimensionMismatchError(TriageError):
    """Input feature dimensions do not match the parameter shapes."""


class EmptyAudioError(TriageError):
    """audio_pool needs at least one frame; callers may substitute zeros."""


class DivergenceDetectedError(TriageError):
    """Training loss became non-finite."""


def _as_matrix(rows: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, arr.shape[1] if arr.ndim == 2 else 0)
    if arr.ndim != 2:
        raise DimensionMismatchError(f"expected a list of vectors, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class FeatureBundle:
    """Precomputed per-modality features for one video.

    frame_feats: (n_frames, d_v), at least one frame.
    text_feats: (n_text, d_h), possibly empty.
    audio_frames: (n_audio, d_a), possibly empty (no audio track).
    """

    frame_feats: np.ndarray
    text_feats: np.ndarray
    audio_frames: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "frame_feats", _as_matrix(self.frame_feats))
        object.__setattr__(self, "text_feats", _as_matrix(self.text_feats))
        object.__setattr__(self, "audio_frames", _as_matrix(self.audio_frames))
        if self.frame_feats.shape[0] < 1:
            raise ValueError("need at least one frame")
        for name in ("frame_feats", "text_feats", "audio_frames"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    def to_dict(self) -> dict:
        return {
            "frame_feats": self.frame_feats.tolist(),
            "text_feats": self.text_feats.tolist(),
            "audio_frames": self.audio_frames.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureBundle":
        return cls(
            frame_feats=data["frame_feats"],
            text_feats=data.get("text_feats", []),
            audio_frames=data.get("audio_frames", []),
        )


@dataclass
class FusionParams:
    """All trainable parameters, also the container for their gradients.

    proj_w1/proj_b1/proj_w2/proj_b2: the 2-layer projector d_v -> d_h -> d_h.
    agg_w/agg_b: the dense aggregator d_h -> d_h applied to the token mean.
    cls_w/cls_b: linear classifier (d_h + d_a) -> n_classes.
    """

    proj_w1: np.ndarray
    proj_b1: np.ndarray
    proj_w2: np.ndarray
    proj_b2: np.ndarray
    agg_w: np.ndarray
    agg_b: np.ndarray
    cls_w: np.ndarray
    cls_b: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        d_v, d_h = self.proj_w1.shape
        if self.proj_b1.shape != (d_h,) or self.proj_w2.shape != (d_h, d_h):
            raise DimensionMismatchError("projector shapes inconsistent")
        if self.proj_b2.shape != (d_h,) or self.agg_w.shape != (d_h, d_h):
            raise DimensionMismatchError("aggregator shapes inconsistent")
        if self.agg_b.shape != (d_h,):
            raise DimensionMismatchError("aggregator bias shape inconsistent")
        if self.cls_w.ndim != 2 or self.cls_w.shape[0] < d_h:
            raise DimensionMismatchError("classifier input must cover d_h + d_a")
        if self.cls_b.shape != (self.cls_w.shape[1],):
            raise DimensionMismatchError("classifier bias shape inconsistent")
        for f in fields(self):
            if not np.all(np.isfinite(getattr(self, f.name))):
                raise ValueError(f"{f.name} contains non-finite values")

    @property
    def d_v(self) -> int:
        return self.proj_w1.shape[0]

    @property
    def d_h(self) -> int:
        return self.proj_w1.shape[1]

    @property
    def d_a(self) -> int:
        return self.cls_w.shape[0] - self.d_h

    @property
    def n_classes(self) -> int:
        return self.cls_w.shape[1]

    def copy(self) -> "FusionParams":
        return FusionParams(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def to_json_dict(self) -> dict:
        return {f.name: getattr(self, f.name).tolist() for f in fields(self)}

    @classmethod
    def from_json_dict(cls, data: dict) -> "FusionParams":
        return cls(**{f.name: np.asarray(data[f.name], dtype=np.float64) for f in fields(cls)})

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path: str) -> "FusionParams":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def init_params(
    d_v: int, d_h: int, d_a: int, n_classes: int, seed: int
) -> FusionParams:
    """Seeded initialization, every parameter uniform in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)

    def uniform(fan_in: int, shape: tuple) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return FusionParams(
        proj_w1=uniform(d_v, (d_v, d_h)),
        proj_b1=uniform(d_v, (d_h,)),
        proj_w2=uniform(d_h, (d_h, d_h)),
        proj_b2=uniform(d_h, (d_h,)),
        agg_w=uniform(d_h, (d_h, d_h)),
        agg_b=uniform(d_h, (d_h,)),
        cls_w=uniform(d_h + d_a, (d_h + d_a, n_classes)),
        cls_b=uniform(d_h + d_a, (n_classes,)),
    )


def project(params: FusionParams, frame_feats: np.ndarray) -> np.ndarray:
    """Map each frame vector through dense -> tanh -> dense into token space."""
    frame_feats = _as_matrix(frame_feats)
    if frame_feats.shape[0] < 1:
        raise DimensionMismatchError("project needs at least one frame")
    if frame_feats.shape[1] != params.d_v:
        raise DimensionMismatchError(
            f"frame dimension {frame_feats.shape[1]} != d_v {params.d_v}"
        )
    hidden = np.tanh(frame_feats @ params.proj_w1 + params.proj_b1)
    return hidden @ params.proj_w2 + params.proj_b2


def audio_pool(audio_frames: np.ndarray) -> np.ndarray:
    """Elementwise arithmetic mean across audio frames."""
    audio_frames = _as_matrix(audio_frames)
    if audio_frames.shape[0] < 1:
        raise EmptyAudioError("no audio frames; substitute the zero vector if intended")
    return audio_frames.mean(axis=0)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _forward_parts(params: FusionParams, bundle: FeatureBundle):
    """Forward pass returning every intermediate needed for backprop."""
    h_frames_pre = np.tanh(bundle.frame_feats @ params.proj_w1 + params.proj_b1)
    h_frames = h_frames_pre @ params.proj_w2 + params.proj_b2
    if bundle.text_feats.shape[0] > 0:
        if bundle.text_feats.shape[1] != params.d_h:
            raise DimensionMismatchError(
                f"text dimension {bundle.text_feats.shape[1]} != d_h {params.d_h}"
            )
        tokens = np.vstack([h_frames, bundle.text_feats])
    else:
        tokens = h_frames
    mean_token = tokens.mean(axis=0)
    fused = mean_token @ params.agg_w + params.agg_b

    if bundle.audio_frames.shape[0] > 0:
        if bundle.audio_frames.shape[1] != params.d_a:
            raise DimensionMismatchError(
                f"audio dimension {bundle.audio_frames.shape[1]} != d_a {params.d_a}"
            )
        pooled_audio = audio_pool(bundle.audio_frames)
    else:
        pooled_audio = np.zeros(params.d_a)

    combined = np.concatenate([fused, pooled_audio])
    logits = combined @ params.cls_w + params.cls_b
    probs = _softmax(logits)
    return h_frames_pre, tokens, mean_token, combined, probs


def forward(params: FusionParams, bundle: FeatureBundle) -> ProbVector:
    """Full forward pass producing a valid class distribution."""
    if bundle.frame_feats.shape[1] != params.d_v:
        raise DimensionMismatchError(
            f"frame dimension {bundle.frame_feats.shape[1]} != d_v {params.d_v}"
        )
    *_, probs = _forward_parts(params, bundle)
    return ProbVector(tuple(float(p) for p in probs))


def loss_and_grad(
    params: FusionParams, bundle: FeatureBundle, label: int
) -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy loss -log p[label] and its gradient for every parameter.

    Gradients come back as a plain dict keyed by parameter name: unlike
    parameters they may legitimately be non-finite when training diverges,
    so they must not pass through FusionParams validation.

    Reverse-mode accumulation through the classifier, the concatenation, the
    aggregator, the token mean, and the per-frame projector. Text and audio
    features are fixed inputs, so no gradient flows into them.
    """
    if not (0 <= label < params.n_classes):
        raise ValueError(f"label {label} out of range for {params.n_classes} classes")
    h_frames_pre, tokens, mean_token, combined, probs = _forward_parts(params, bundle)
    loss = -math.log(max(probs[label], 1e-300))

    d_logits = probs.copy()
    d_logits[label] -= 1.0

    g_cls_w = np.outer(combined, d_logits)
    g_cls_b = d_logits.copy()
    d_combined = params.cls_w @ d_logits

    d_fused = d_combined[: params.d_h]
    # the audio slice of d_combined stops here: pooled audio has no parameters

    g_agg_w = np.outer(mean_token, d_fused)
    g_agg_b = d_fused.copy()
    d_mean = params.agg_w @ d_fused

    n_tokens = tokens.shape[0]
    d_token = d_mean / n_tokens  # identical share for every token in the mean

    # only the projected-frame tokens carry parameters
    n_frames = bundle.frame_feats.shape[0]
    d_frame_rows = np.tile(d_token, (n_frames, 1))
    g_proj_w2 = h_frames_pre.T @ d_frame_rows
    g_proj_b2 = d_frame_rows.sum(axis=0)
    d_hidden = (d_frame_rows @ params.proj_w2.T) * (1.0 - h_frames_pre**2)
    g_proj_w1 = bundle.frame_feats.T @ d_hidden
    g_proj_b1 = d_hidden.sum(axis=0)

    grads = {
        "proj_w1": g_proj_w1,
        "proj_b1": g_proj_b1,
        "proj_w2": g_proj_w2,
        "proj_b2": g_proj_b2,
        "agg_w": g_agg_w,
        "agg_b": g_agg_b,
        "cls_w": g_cls_w,
        "cls_b": g_cls_b,
    }
    return loss, grads


def train(
    dataset: Sequence[tuple[FeatureBundle, int]],
    epochs: int,
    learning_rate: float,
    seed: int,
    d_h: int = 8,
    n_classes: int | None = None,
) -> tuple[FusionParams, list[float]]:
    """Full-batch gradient descent from a seeded initialization.

    Returns the final parameters and the mean training loss per epoch.
    Dimensions are inferred from the data (d_v from frames, d_a from the
    first bundle with audio, n_classes from the labels unless given).
    Raises DivergenceDetectedError when the loss becomes non-finite.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    if learning_rate <= 0:
        raise ValueError("learning_rate must be > 0")
    d_v = dataset[0][0].frame_feats.shape[1]
    d_a = 0
    for bundle, _ in dataset:
        if bundle.audio_frames.shape[0] > 0:
            d_a = bundle.audio_frames.shape[1]
            break
    for bundle, _ in dataset:
        if bundle.text_feats.shape[0] > 0:
            d_h = bundle.text_feats.shape[1]
            break
    if n_classes is None:
        n_classes = max(label for _, label in dataset) + 1
    n_classes = max(n_classes, 2)

    params = init_params(d_v, d_h, d_a, n_classes, seed)
    losses: list[float] = []
    n = len(dataset)
    for _ in range(epochs):
        total_loss = 0.0
        total = {f.name: np.zeros_like(getattr(params, f.name)) for f in fields(FusionParams)}
        for bundle, label in dataset:
            loss, grads = loss_and_grad(params, bundle, label)
            total_loss += loss
            for name, g in grads.items():
                total[name] += g
        mean_loss = total_loss / n
        if not math.isfinite(mean_loss):
            raise DivergenceDetectedError(f"mean loss became {mean_loss}")
        losses.append(mean_loss)
        updated = {
            f.name: getattr(params, f.name) - learning_rate * total[f.name] / n
            for f in fields(FusionParams)
        }
        if any(not np.all(np.isfinite(arr)) for arr in updated.values()):
            raise DivergenceDetectedError(
                "parameters became non-finite; lower the learning rate"
            )
        params = FusionParams(**updated)
    return params, losses


# --------------------------------------------------------------------------
# Dataset persistence: JSONL with frame_feats / text_feats / audio_frames /
# label per line; parameters persist to a flat JSON of named arrays.
# --------------------------------------------------------------------------


def write_bundles(path: str, dataset: Sequence[tuple[FeatureBundle, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for bundle, label in dataset:
            record = bundle.to_dict()
            record["label"] = label
            fh.write(json.dumps(record) + "\n")


def read_bundles(path: str) -> list[tuple[FeatureBundle, int]]:
    dataset = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            dataset.append((FeatureBundle.from_dict(record), int(record["label"])))
    return dataset


class FusionClassifier(BaseEstimator):
    """Estimator wrapper: fit on (bundles, labels), predict distributions.

    Plain gradient descent with deterministic seeded initialization; after
    fit, ``params_`` holds the trained weights and ``loss_curve_`` the mean
    loss per epoch.
    """

    def __init__(self, epochs: int = 200, learning_rate: float = 0.5, seed: int = 0, d_h: int = 8):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.seed = seed
        self.d_h = d_h

    def fit(self, bundles: Sequence[FeatureBundle], labels: Sequence[int]) -> "FusionClassifier":
        dataset = list(zip(bundles, labels))
        self.params_, self.loss_curve_ = train(
            dataset,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            seed=self.seed,
            d_h=self.d_h,
        )
        self.classes_ = np.arange(self.params_.n_classes)
        return self

    def predict_proba(self, bundles: Sequence[FeatureBundle]) -> np.ndarray:
        return np.array([list(forward(self.params_, b)) for b in bundles])

    def predict(self, bundles: Sequence[FeatureBundle]) -> np.ndarray:
        return self.predict_proba(bundles).argmax(axis=1)


class FusionScorer:
    """Adapter exposing a trained fusion model under the Classifier protocol.

    Scores a VideoItem by running forward() on its attached FeatureBundle.
    """

    def __init__(self, params: FusionParams, cost_units: float = 10.0, model_id: str = "fusion"):
        self.params = params
        self.cost_units = cost_units
        self.model_id = model_id

    def score(self, item: VideoItem) -> ModelOutput:
        if item.features is None:
            raise ValueError(f"item {item.id!r} has no feature bundle")
        probs = forward(self.params, item.features)
        return ModelOutput(probs=probs, model_id=self.model_id, cost_units=self.cost_units)
