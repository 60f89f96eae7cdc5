"""Loss, optimizer, augmentation, splits and the training/evaluation loops."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import bilinear_resize
from .errors import ShapeError, ValidationError
from .metrics import (
    aggregate_runs,
    auc_200,
    exact_match_accuracy,
    micro_precision_recall_f1,
)
from .model import count_flops, count_params

BCE_EPS = 1e-7
HISTORY_HEADER = "epoch,split,loss,f1,auc"


def bce_loss(outputs, targets):
    """Binary cross entropy: summed over classes, averaged over samples.

    Scores are clamped to [1e-7, 1 - 1e-7] before the logs; gradients
    are zero where the clamp engaged. Returns a scalar Tensor.
    """
    outputs = outputs if isinstance(outputs, T.Tensor) else T.Tensor(np.asarray(outputs))
    od = outputs.data
    t = np.asarray(targets)
    if od.shape != t.shape:
        raise ShapeError(f"shape mismatch: outputs {od.shape} vs targets {t.shape}")
    if od.ndim not in (1, 2):
        raise ValidationError(f"bce_loss expects (N, C) or (C,), got shape {od.shape}")
    if not np.isin(t, (0, 1)).all():
        raise ValidationError("targets must be binary 0/1")
    n_samples = 1 if od.ndim == 1 else od.shape[0]
    oc = np.clip(od.astype(np.float64), BCE_EPS, 1.0 - BCE_EPS)
    per_cell = -(t * np.log(oc) + (1.0 - t) * np.log1p(-oc))
    value = per_cell.sum() / n_samples

    def _bw(g):
        if not outputs.requires_grad:
            return
        in_range = (od >= BCE_EPS) & (od <= 1.0 - BCE_EPS)
        grad = (oc - t) / (oc * (1.0 - oc)) * in_range / n_samples * g
        outputs._accum(grad.astype(od.dtype, copy=False))

    return T._make(np.float64(value), "bce", (outputs,), _bw)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place; increments the step.

    ``params`` maps names to Tensors, ``grads`` names to arrays; every
    parameter must have a gradient of the matching shape so silent
    staleness cannot slip through.
    """
    if lr < 0:
        raise ValidationError(f"lr must be >= 0, got {lr}")
    state.t += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ValidationError(f"parameter {name} has no gradient")
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        mhat = m / (1.0 - state.beta1**state.t)
        vhat = v / (1.0 - state.beta2**state.t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# augmentation


def augment_image(image, rng):
    """Randomized photometric and scale jitter for one image.

    Five independent coin flips are drawn first, then parameters for
    the active transforms in a fixed order: brightness shift
    U(-0.2, 0.2); contrast scale U(0.8, 1.2) about the image mean;
    zoom U(1.0, 1.2) with center crop back to the input size;
    translation by a random crop from a 10% reflected border;
    per-channel shift U(-0.1, 0.1). No flips, rotations or shears.
    The result is clipped back to [0, 1]; labels are never touched.
    """
    coins = rng.random(5) < 0.5
    img = np.asarray(image, dtype=np.float32).copy()
    h, w = img.shape[:2]
    if coins[0]:
        img += np.float32(rng.uniform(-0.2, 0.2))
    if coins[1]:
        factor = rng.uniform(0.8, 1.2)
        mean = img.mean()
        img = np.float32(mean) + np.float32(factor) * (img - np.float32(mean))
    if coins[2]:
        zoom = rng.uniform(1.0, 1.2)
        zh, zw = int(np.ceil(h * zoom)), int(np.ceil(w * zoom))
        big = bilinear_resize(img, (zh, zw))
        top, left = (zh - h) // 2, (zw - w) // 2
        img = big[top : top + h, left : left + w]
    if coins[3]:
        ph, pw = max(1, round(0.1 * h)), max(1, round(0.1 * w))
        dy = int(rng.integers(0, 2 * ph + 1))
        dx = int(rng.integers(0, 2 * pw + 1))
        padded = np.pad(img, ((ph, ph), (pw, pw), (0, 0)), mode="reflect")
        img = padded[dy : dy + h, dx : dx + w]
    if coins[4]:
        img += rng.uniform(-0.1, 0.1, size=img.shape[2]).astype(np.float32)
    np.clip(img, 0.0, 1.0, out=img)
    return img


def augment_batch(images, rng):
    return np.stack([augment_image(img, rng) for img in images])


# ---------------------------------------------------------------------------
# splits


def kfold_split(n, k=4, seed=0):
    """Seeded k-fold rotation with disjoint train/val/test per round.

    A single permutation is cut into k folds; round r tests on fold r,
    validates on fold (r + 1) mod k and trains on the remaining k - 2
    folds. With k = 4 that is a 50/25/25 split.
    """
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if n < 2 * k:
        raise ValidationError(f"need at least {2 * k} samples for {k} folds, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    rounds = []
    for r in range(k):
        v = (r + 1) % k
        train = [folds[j] for j in range(k) if j not in (r, v)]
        train = np.concatenate(train) if train else np.empty(0, dtype=np.int64)
        rounds.append({"train": train, "val": folds[v], "test": folds[r]})
    return rounds


def holdout_split(n, val_fraction, seed):
    """Single seeded split; returns (train_idx, val_idx)."""
    if not 0.0 < val_fraction < 1.0:
        raise ValidationError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    if n < 2:
        raise ValidationError("need at least 2 samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = min(max(1, round(n * val_fraction)), n - 1)
    return perm[n_val:], perm[:n_val]


# ---------------------------------------------------------------------------
# loops


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 100
    lr: float = 1e-3
    k_folds: int = 4
    seed: int = 0
    threshold: float = 0.5
    augment: bool = True

    def validate(self):
        if self.batch_size < 2:
            raise ValidationError(f"batch_size must be >= 2 for batch statistics, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValidationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.lr < 0:
            raise ValidationError(f"lr must be >= 0, got {self.lr}")
        if self.k_folds < 2:
            raise ValidationError(f"k_folds must be >= 2, got {self.k_folds}")
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError(f"threshold must lie in (0, 1), got {self.threshold}")
        return self


def _check_xy(graph, x, y, what):
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise ValidationError(f"{what} partition is empty")
    if x.ndim != len(graph.input_shape) + 1 or x.shape[1:] != graph.input_shape:
        raise ValidationError(f"expected {what} images shaped (N, {graph.input_shape}), got {x.shape}")
    n_classes = graph.output_shape[-1]
    if y.shape != (x.shape[0], n_classes):
        raise ValidationError(f"expected {what} labels shaped ({x.shape[0]}, {n_classes}), got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError(f"{what} labels must be binary 0/1")
    return x, y


def _batches(order, batch_size):
    """Index batches; a trailing singleton is folded into its neighbor.

    Batch statistics need at least two samples, so a lone remainder is
    merged into the previous batch when one exists and dropped for a
    single-sample dataset.
    """
    out = []
    for start in range(0, len(order), batch_size):
        out.append(order[start : start + batch_size])
    if out and len(out[-1]) == 1:
        tail = out.pop()
        if out:
            out[-1] = np.concatenate([out[-1], tail])
    return out


def evaluate(graph, x, y, threshold=0.5, batch_size=128):
    """Inference metrics over one labeled partition.

    Returns a report dict with accuracy (exact match), micro precision,
    recall and f1, pooled auc, mean loss, and the model's parameter and
    FLOP counts. Batch statistics stay frozen throughout.
    """
    x, y = _check_xy(graph, x, y, "eval")
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    scores = np.concatenate(
        [graph.predict(x[s : s + batch_size]) for s in range(0, len(x), batch_size)]
    )
    loss = float(bce_loss(T.Tensor(scores), y).data)
    binary = (scores >= threshold).astype(np.uint8)
    report = micro_precision_recall_f1(binary, y)
    report["accuracy"] = exact_match_accuracy(binary, y)
    report["auc"] = auc_200(scores, y)
    report["loss"] = loss
    report["params"] = count_params(graph)["trainable"]
    report["flops"] = count_flops(graph)
    return report


def _history_lines(rec):
    return [
        f"{rec['epoch']},train,{rec['train']['loss']:.6f},{rec['train']['f1']:.6f},{rec['train']['auc']:.6f}",
        f"{rec['epoch']},val,{rec['val']['loss']:.6f},{rec['val']['f1']:.6f},{rec['val']['auc']:.6f}",
    ]


def train(graph, data, config, history_path=None, log=None):
    """Mini-batch Adam training with best-epoch tracking.

    ``data`` is ((x_train, y_train), (x_val, y_val)). Each epoch
    shuffles with the config seed's stream, augments train batches only
    (when enabled), runs batchnorm in train mode for updates and infer
    mode for validation, and records loss/F1/AUC for both splits; train
    metrics come from the scores produced during the updates. The
    parameters with the highest validation F1 (earliest epoch on ties)
    are restored into the model before returning.

    Returns {"history": [one record per epoch], "best_state": dict,
    "best_epoch": int, "best_val_f1": float}. When ``history_path`` is
    given the records are also streamed to it as CSV lines.
    """
    config.validate()
    (x, y), (vx, vy) = data
    x, y = _check_xy(graph, x, y, "train")
    vx, vy = _check_xy(graph, vx, vy, "val")
    rng = np.random.default_rng(config.seed)
    adam = AdamState()
    history = []
    best_state = graph.state_dict()
    best_f1 = -1.0
    best_epoch = 0
    fh = open(history_path, "w", encoding="utf-8") if history_path else None
    if fh:
        fh.write(HISTORY_HEADER + "\n")
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = rng.permutation(len(x))
            loss_sum = 0.0
            seen = 0
            score_parts, target_parts = [], []
            for idx in _batches(order, config.batch_size):
                bx = x[idx]
                by = y[idx]
                if config.augment:
                    bx = augment_batch(bx, rng)
                out = graph.forward(bx, train=True)
                loss = bce_loss(out, by)
                graph.zero_grad()
                grads = T.backward(loss, params=graph.params)
                adam_step(graph.params, grads, adam, config.lr)
                loss_sum += float(loss.data) * len(idx)
                seen += len(idx)
                score_parts.append(out.data)
                target_parts.append(by)
            scores = np.concatenate(score_parts)
            targets = np.concatenate(target_parts)
            binary = (scores >= config.threshold).astype(np.uint8)
            ev = evaluate(graph, vx, vy, config.threshold, config.batch_size)
            rec = {
                "epoch": epoch,
                "train": {
                    "loss": loss_sum / seen,
                    "f1": micro_precision_recall_f1(binary, targets)["f1"],
                    "auc": auc_200(scores, targets),
                },
                "val": {"loss": ev["loss"], "f1": ev["f1"], "auc": ev["auc"]},
            }
            history.append(rec)
            if ev["f1"] > best_f1:
                best_f1 = ev["f1"]
                best_epoch = epoch
                best_state = graph.state_dict()
            lines = _history_lines(rec)
            if fh:
                fh.write("\n".join(lines) + "\n")
                fh.flush()
            if log:
                log(lines)
    finally:
        if fh:
            fh.close()
    graph.load_state(best_state)
    return {
        "history": history,
        "best_state": best_state,
        "best_epoch": best_epoch,
        "best_val_f1": best_f1,
    }


def run_fold(make_model, x, y, config, fold_index=0, runs=3, history_dir=None):
    """Repeated training on one cross-validation round.

    The sample set is cut into ``config.k_folds`` folds with
    ``config.seed``; the round at ``fold_index`` fixes the partitions.
    Each of the ``runs`` repeats reseeds everything (weights, shuffling,
    augmentation) with seed + run index, trains to max_epochs, and is
    scored on the test fold at its best-validation state. Returns
    {"runs": [per-run reports], "aggregate": mean±std strings,
    "states": [best state per run], "fold": indices}.
    """
    if runs < 1:
        raise ValidationError(f"runs must be >= 1, got {runs}")
    config.validate()
    x = np.asarray(x)
    y = np.asarray(y)
    rounds = kfold_split(len(x), config.k_folds, config.seed)
    if not 0 <= fold_index < len(rounds):
        raise ValidationError(f"fold_index must lie in [0, {len(rounds)}), got {fold_index}")
    fold = rounds[fold_index]
    reports, states = [], []
    for j in range(runs):
        seed = config.seed + j
        graph = make_model(seed)
        cfg = dataclasses.replace(config, seed=seed)
        hpath = None
        if history_dir is not None:
            hpath = f"{history_dir}/history_run{j}.csv"
        result = train(
            graph,
            ((x[fold["train"]], y[fold["train"]]), (x[fold["val"]], y[fold["val"]])),
            cfg,
            history_path=hpath,
        )
        report = evaluate(graph, x[fold["test"]], y[fold["test"]], cfg.threshold, cfg.batch_size)
        report.update(
            {
                "run": j,
                "seed": seed,
                "best_epoch": result["best_epoch"],
                "best_val_f1": result["best_val_f1"],
            }
        )
        reports.append(report)
        states.append(result["best_state"])
    fields = ("accuracy", "precision", "recall", "f1", "auc", "loss")
    aggregate = {name: aggregate_runs([r[name] for r in reports]) for name in fields}
    return {"runs": reports, "aggregate": aggregate, "states": states, "fold": fold}
