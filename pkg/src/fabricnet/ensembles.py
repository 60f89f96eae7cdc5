"""Ensemble combinators over opaque predictors.

A predictor is any callable mapping an input array to an output array
and deterministic for fixed parameters. The combinators here build
composite predictors out of submodel predictors: stacking under a final
meta-model, weighted score averaging, single-label class-based argmax,
and the shared-head multi-label rule where one head evaluation feeds
every per-class scorer.

All argmax decisions break ties toward the lowest class index.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError


def _as_row(value):
    arr = np.asarray(value)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def stacked_ensemble(subs, final):
    """Composite predictor: ``final`` over the concatenated sub outputs.

    Sub outputs are concatenated along the last axis in list order. The
    final predictor must accept that concatenation; an arity mismatch
    surfaces as a shape error at the first call.
    """
    subs = list(subs)
    if not subs:
        raise ValidationError("stacked_ensemble needs at least one submodel")

    def predict(x):
        outs = [_as_row(sub(x)) for sub in subs]
        return final(np.concatenate(outs, axis=-1))

    return predict


def weight_average_ensemble(subs, w):
    """Predictor deciding by argmax over the weighted sum of sub scores.

    Every sub must emit a score vector of one common length; the
    weighted vectors are summed elementwise and the decision is the
    argmax index, ties to the lowest index.
    """
    subs = list(subs)
    weights = np.asarray(w, dtype=np.float64)
    if weights.ndim != 1 or len(subs) != weights.size:
        raise ValidationError(f"need one weight per submodel, got {weights.size} for {len(subs)} subs")
    if not subs:
        raise ValidationError("weight_average_ensemble needs at least one submodel")
    if not np.isfinite(weights).all():
        raise ValidationError("weights must be finite")

    def predict(x):
        combined = None
        for sub, wi in zip(subs, weights):
            scores = _as_row(sub(x)).astype(np.float64)
            if scores.ndim != 1:
                raise ShapeError(f"sub scores must be vectors, got shape {scores.shape}")
            if combined is None:
                combined = wi * scores
            elif scores.shape != combined.shape:
                raise ShapeError(f"sub score lengths differ: {scores.shape} vs {combined.shape}")
            else:
                combined += wi * scores
        return int(np.argmax(combined))

    return predict


def class_based_ensemble(subs):
    """Single-label predictor over per-class scalar scorers.

    Sub i scores class i; the decision is the argmax index, ties to the
    lowest index. A sub emitting anything but one scalar is an error.
    """
    subs = list(subs)
    if not subs:
        raise ValidationError("class_based_ensemble needs at least one submodel")

    def predict(x):
        scores = np.empty(len(subs), dtype=np.float64)
        for i, sub in enumerate(subs):
            out = np.asarray(sub(x), dtype=np.float64)
            if out.size != 1:
                raise ShapeError(f"sub {i} must emit one scalar score, got shape {out.shape}")
            scores[i] = out.reshape(())
        return int(np.argmax(scores))

    return predict


def _class_scores(head, subs, x):
    if not subs:
        raise ValidationError("need at least one per-class submodel")
    features = head(x)
    columns = []
    width = None
    for i, sub in enumerate(subs):
        out = np.asarray(sub(features), dtype=np.float64)
        if out.ndim and out.shape[-1] == 1:
            out = out[..., 0]
        if out.ndim > 1:
            raise ShapeError(f"sub {i} must emit one score per sample, got shape {out.shape}")
        if width is None:
            width = out.shape
        elif out.shape != width:
            raise ShapeError(f"sub {i} output shape {out.shape} differs from {width}")
        columns.append(out)
    return np.stack(columns, axis=-1)


def fabricnet_predict(head, subs, x, threshold=0.5):
    """Multi-label rule: shared head once, one sigmoid score per class.

    Returns (binary, scores) where scores[i] is sub i applied to the
    single shared head output and binary[i] = scores[i] >= threshold.
    The threshold must lie strictly inside (0, 1). Batched input yields
    matching leading axes on both outputs.
    """
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    scores = _class_scores(head, subs, x)
    return (scores >= threshold).astype(np.uint8), scores


def fabricnet_classify(head, subs, x):
    """Single-label mode of the shared-head rule: argmax class index.

    The head runs exactly once per call; ties go to the lowest index.
    Batched input yields a vector of indices.
    """
    scores = _class_scores(head, subs, x)
    if scores.ndim == 1:
        return int(np.argmax(scores))
    return np.argmax(scores, axis=-1)
