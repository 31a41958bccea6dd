"""Downstream training, open-set prediction, the sequential evaluation
protocol, and its summary score.

A model condensed at task i is deployed unchanged on every later task j.
Test nodes whose class did not exist at task i are relabeled ``unknown``
(-1); the classifier must reject them, either by a softmax confidence
threshold or by Weibull-calibrated logit revision (per-class extreme
value models over distances to mean activation vectors).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.optimize

from .condense import CondensedGraph, one_hot
from .errors import DataError, NumericalError
from .graph import SplitMask, TaskSequence, normalize_adjacency
from .propagation import propagate

UNKNOWN = -1


@dataclass
class LinearClassifier:
    W: np.ndarray  # d x C
    b: np.ndarray  # C

    def logits(self, H: np.ndarray) -> np.ndarray:
        return H @ self.W + self.b

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def train_downstream(
    cond: CondensedGraph, max_steps: int = 2000, grad_tol: float = 1e-6
) -> LinearClassifier:
    """Full-batch softmax regression on the condensed set.

    The condensed adjacency is the identity, so the inputs are the raw
    condensed features.  L-BFGS from a zero start runs until the gradient
    max-norm drops below ``grad_tol`` or ``max_steps`` iterations pass;
    the zero start makes retraining deterministic.
    """
    x, y = cond.Xp, cond.labels
    c = cond.num_classes
    if c < 2:
        raise DataError("need at least two classes to train a classifier")
    if np.bincount(y, minlength=c).min() == 0:
        raise DataError("condensed set is empty for some class")
    n, d = x.shape
    y_onehot = one_hot(y, c)

    def objective(flat):
        w = flat[: d * c].reshape(d, c)
        bias = flat[d * c :]
        logits = x @ w + bias
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        loss = -np.mean(logp[np.arange(n), y])
        delta = (np.exp(logp) - y_onehot) / n
        grad = np.concatenate([(x.T @ delta).ravel(), delta.sum(axis=0)])
        return loss, grad

    res = scipy.optimize.minimize(
        objective,
        np.zeros(d * c + c),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_steps, "gtol": grad_tol, "ftol": 1e-15},
    )
    if not np.all(np.isfinite(res.x)) or not math.isfinite(res.fun):
        raise NumericalError("downstream training diverged")
    return LinearClassifier(
        W=res.x[: d * c].reshape(d, c).copy(), b=res.x[d * c :].copy()
    )


def calibrate_threshold(val_confidences, quantile: float = 0.10) -> float:
    """Threshold excluding the lowest-confidence validation fraction.

    Returns the k-th smallest confidence with k = floor(quantile * n)
    (at least 1); flagging everything <= threshold rejects exactly k
    validation nodes on tie-free inputs, more when values tie.
    """
    conf = np.sort(np.asarray(val_confidences, dtype=np.float64))
    if conf.size == 0:
        raise ValueError("empty confidence list")
    k = max(1, int(math.floor(quantile * conf.size)))
    return float(conf[k - 1])


@dataclass
class WeibullModel:
    shape: float
    scale: float
    tail_size: int

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        pos = x > 0
        out[pos] = 1.0 - np.exp(-((x[pos] / self.scale) ** self.shape))
        return out


def profile_scale(x: np.ndarray, shape: float) -> float:
    """Maximum-likelihood scale for a fixed shape: (mean(x^k))^(1/k).

    At shape 1 this is the exponential MLE, i.e. the sample mean.
    """
    logx = np.log(x)
    w = shape * logx
    wmax = w.max()
    return float(math.exp((wmax + math.log(np.mean(np.exp(w - wmax)))) / shape))


def _profile_equation(logx: np.ndarray, k: float) -> tuple[float, float]:
    """Value and derivative of the stationarity condition in the shape.

    f(k) = sum(x^k ln x)/sum(x^k) - 1/k - mean(ln x); f is strictly
    increasing, so the root is unique.  Weights are exponentiated with a
    max shift to stay finite for large k.
    """
    w = k * logx
    e = np.exp(w - w.max())
    s0 = e.sum()
    s1 = (e * logx).sum()
    s2 = (e * logx * logx).sum()
    f = s1 / s0 - 1.0 / k - logx.mean()
    fp = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (k * k)
    return f, fp


def _profile_nll(logx: np.ndarray, k: float) -> float:
    x = np.exp(logx)
    scale = profile_scale(x, k)
    ll = (
        logx.size * math.log(k)
        - logx.size * k * math.log(scale)
        + (k - 1.0) * logx.sum()
        - np.sum((x / scale) ** k)
    )
    return -ll


def _golden_section(fn, lo: float, hi: float, tol: float = 1e-12) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol * max(1.0, abs(a) + abs(b)):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def fit_weibull(tail_distances, tail_size: int) -> WeibullModel:
    """Maximum-likelihood Weibull fit on the largest ``tail_size`` values.

    Solves the shape stationarity equation by safeguarded Newton (bracket
    maintained by bisection), stopping when |f(shape)| <= 1e-10; if Newton
    stalls, minimizes the negative profile log-likelihood by golden
    section over the bracket instead.
    """
    dist = np.asarray(tail_distances, dtype=np.float64)
    if dist.size < tail_size:
        raise ValueError(f"need >= {tail_size} distances, got {dist.size}")
    tail = np.sort(dist)[-tail_size:]
    if np.any(tail <= 0):
        raise ValueError("tail distances must be positive")
    logx = np.log(tail)
    sd = logx.std()
    if sd < 1e-12:
        raise DataError("degenerate tail")

    k = math.pi / (math.sqrt(6.0) * sd)  # moment start on the log scale
    lo, hi = k, k
    while _profile_equation(logx, lo)[0] > 0 and lo > 1e-8:
        lo /= 2.0
    while _profile_equation(logx, hi)[0] < 0 and hi < 1e8:
        hi *= 2.0

    converged = False
    for _ in range(100):
        f, fp = _profile_equation(logx, k)
        if abs(f) <= 1e-10:
            converged = True
            break
        if f > 0:
            hi = k
        else:
            lo = k
        step = k - f / fp
        k = step if lo < step < hi else 0.5 * (lo + hi)
    if not converged:
        k = _golden_section(lambda s: _profile_nll(logx, s), lo, hi)
    return WeibullModel(shape=float(k), scale=profile_scale(tail, k), tail_size=tail_size)


@dataclass
class OpensetModel:
    """Calibrated rejection rule: plain confidence thresholding, or
    Weibull-revised logits with a synthetic unknown class."""

    mode: str                                 # "softmax" | "openmax"
    threshold: float
    mav: np.ndarray | None = None             # C x C mean activation vectors
    weibulls: list[WeibullModel] | None = None
    alpha_rank: int = 3

    def validate(self) -> None:
        if self.mode not in ("softmax", "openmax"):
            raise ValueError(f"unknown open-set mode {self.mode!r}")
        if self.mode == "openmax" and (self.mav is None or self.weibulls is None):
            raise ValueError("openmax model is not calibrated")


def fit_openmax_stats(
    logits_train: np.ndarray,
    y_train: np.ndarray,
    tail_size: int = 20,
) -> tuple[np.ndarray, list[WeibullModel]]:
    """Per-class mean activation vectors and Weibull tail models.

    MAVs average the logit vectors of correctly classified training nodes
    (all of the class's nodes if none are correct); each class's Weibull
    is fit on the largest Euclidean distances to its MAV, with the tail
    clamped to the available sample count.
    """
    c = logits_train.shape[1]
    pred = np.argmax(logits_train, axis=1)
    mav = np.zeros((c, c))
    weibulls = []
    for cls in range(c):
        vectors = logits_train[(y_train == cls) & (pred == cls)]
        if vectors.shape[0] == 0:
            vectors = logits_train[y_train == cls]
        if vectors.shape[0] == 0:
            raise DataError(f"no calibration vectors for class {cls}")
        mav[cls] = vectors.mean(axis=0)
        dists = np.linalg.norm(vectors - mav[cls], axis=1)
        dists = dists[dists > 0]
        if dists.size < 2:
            raise DataError(f"class {cls}: not enough spread to fit a tail model")
        weibulls.append(fit_weibull(dists, min(tail_size, dists.size)))
    return mav, weibulls


def openmax_probs(model: OpensetModel, logits: np.ndarray) -> np.ndarray:
    """Revised probabilities over C known classes plus an unknown column.

    For the top-ranked classes, each logit is damped by its rank weight
    times the Weibull CDF of the node's distance to that class's MAV; the
    shaved mass becomes the unknown logit.  A node whose top classes all
    carry zero outlier weight has nothing shaved, so its unknown
    probability is 0 and the known-class scores are the plain softmax.
    """
    n, c = logits.shape
    alpha = min(model.alpha_rank, c)
    out = np.zeros((n, c + 1))
    for i in range(n):
        v = logits[i]
        ranked = np.argsort(v)[::-1]
        w = np.zeros(c)
        for r in range(alpha):
            cls = ranked[r]
            dist = np.linalg.norm(v - model.mav[cls])
            w[cls] = (1.0 - r / alpha) * float(model.weibulls[cls].cdf(dist))
        if not np.any(w > 0):
            out[i, :c] = _softmax(v[None, :])[0]
            continue
        revised = v * (1.0 - w)
        unknown = float(np.sum(v * w))
        full = np.concatenate([revised, [unknown]])
        shifted = np.exp(full - full.max())
        out[i] = shifted / shifted.sum()
    return out


def openset_confidence(clf: LinearClassifier, model: OpensetModel, H: np.ndarray) -> np.ndarray:
    """Per-node confidence: max known-class probability under the model."""
    logits = clf.logits(H)
    if model.mode == "softmax":
        return _softmax(logits).max(axis=1)
    return openmax_probs(model, logits)[:, :-1].max(axis=1)


def openset_predict(
    clf: LinearClassifier, model: OpensetModel, H_test: np.ndarray
) -> np.ndarray:
    """Predicted class per node, UNKNOWN (-1) for rejected ones."""
    model.validate()
    logits = clf.logits(H_test)
    if model.mode == "softmax":
        probs = _softmax(logits)
        pred = np.argmax(probs, axis=1)
        reject = probs.max(axis=1) <= model.threshold
    else:
        probs = openmax_probs(model, logits)
        known = probs[:, :-1]
        pred = np.argmax(known, axis=1)
        reject = (probs[:, -1] > known.max(axis=1)) | (known.max(axis=1) <= model.threshold)
    pred = pred.astype(np.int64)
    pred[reject] = UNKNOWN
    return pred


def calibrate_openset(
    clf: LinearClassifier,
    H_train: np.ndarray,
    y_train: np.ndarray,
    H_val: np.ndarray,
    mode: str,
    quantile: float = 0.10,
    tail_size: int = 20,
    alpha_rank: int | None = None,
) -> OpensetModel:
    """Fit the rejection rule on the condensed task's own data: tail
    statistics from the training split, threshold from the validation
    split."""
    c = clf.num_classes
    model = OpensetModel(
        mode=mode, threshold=0.0, alpha_rank=alpha_rank or min(c, 3)
    )
    if mode == "openmax":
        model.mav, model.weibulls = fit_openmax_stats(
            clf.logits(H_train), y_train, tail_size
        )
    model.threshold = calibrate_threshold(
        openset_confidence(clf, model, H_val), quantile
    )
    return model


@dataclass
class PerformanceMatrix:
    """Upper-triangular accuracies M[i, j]: condensed at task i, tested
    on task j.  ``first_task`` anchors row/column 0 to an actual task."""

    values: np.ndarray    # k x k, NaN below the diagonal
    counts: np.ndarray    # k x k int, 0 below the diagonal
    first_task: int = 1

    @property
    def size(self) -> int:
        return self.values.shape[0]


def map_score(M: PerformanceMatrix | np.ndarray) -> float:
    """Mean over condensation tasks of that task's average accuracy on
    all its future (and own) test tasks."""
    values = M.values if isinstance(M, PerformanceMatrix) else np.asarray(M, dtype=np.float64)
    m = values.shape[0]
    row_means = [np.mean(values[i, i:]) for i in range(m)]
    return float(np.mean(row_means))


def evaluate_sequence(
    seq: TaskSequence,
    splits: SplitMask,
    condense_fn,
    cfg,
    *,
    openset_mode: str = "softmax",
    from_task: int = 1,
    quantile: float = 0.10,
    tail_size: int = 20,
    predict_fn=None,
) -> PerformanceMatrix:
    """Condense each task from ``from_task`` on, train a downstream
    classifier, calibrate rejection on that task's validation split, and
    score it on every later task's test split (no fine-tuning between).

    ``condense_fn(seq, splits, cfg, task)`` supplies the condensed graph;
    ``predict_fn(i, j, test_idx, H_test)``, when given, replaces the
    trained predictor (test hook).
    """
    m = seq.m
    if not 1 <= from_task <= m:
        raise DataError(f"from_task {from_task} out of range 1..{m}")
    k = m - from_task + 1
    values = np.full((k, k), np.nan)
    counts = np.zeros((k, k), dtype=np.int64)

    embeddings = {}
    for j in range(from_task, m + 1):
        snap = seq.snapshot(j)
        embeddings[j] = propagate(
            normalize_adjacency(snap), snap.features, cfg.K, j
        ).matrix

    for i in range(from_task, m + 1):
        snap_i = seq.snapshot(i)
        row = i - from_task
        if predict_fn is None:
            cond = condense_fn(seq, splits, cfg, i)
            clf = train_downstream(cond)
            h_i = embeddings[i]
            model = calibrate_openset(
                clf,
                h_i[splits.train(i)],
                snap_i.labels[splits.train(i)],
                h_i[splits.val(i)],
                openset_mode,
                quantile=quantile,
                tail_size=tail_size,
            )
        for j in range(i, m + 1):
            snap_j = seq.snapshot(j)
            test_idx = splits.test(j)
            truth = snap_j.labels[test_idx].copy()
            truth[truth >= snap_i.num_classes] = UNKNOWN
            h_test = embeddings[j][test_idx]
            if predict_fn is not None:
                pred = predict_fn(i, j, test_idx, h_test)
            else:
                pred = openset_predict(clf, model, h_test)
            col = j - from_task
            values[row, col] = float(np.mean(pred == truth))
            counts[row, col] = test_idx.size
    return PerformanceMatrix(values=values, counts=counts, first_task=from_task)


def metrics_dict(perf: PerformanceMatrix, config_hash: str, seeds, openset_mode: str) -> dict:
    matrix = [
        [None if math.isnan(v) else float(v) for v in row] for row in perf.values
    ]
    return {
        "performance_matrix": matrix,
        "cell_counts": perf.counts.tolist(),
        "per_task_accuracy": [float(perf.values[i, i]) for i in range(perf.size)],
        "map": map_score(perf),
        "first_task": perf.first_task,
        "openset_mode": openset_mode,
        "config_hash": config_hash,
        "seeds": seeds,
    }


def write_metrics(path: str | Path, metrics: dict) -> None:
    with open(path, "w") as fh:
        json.dump(metrics, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_metrics(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"metrics file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed metrics file: {exc}") from exc


def render_tsv(metrics: dict) -> str:
    """Tab-separated view of the performance matrix plus the summary
    score, recomputed from the stored matrix."""
    matrix = metrics["performance_matrix"]
    first = metrics.get("first_task", 1)
    k = len(matrix)
    tasks = [first + idx for idx in range(k)]
    lines = ["task\t" + "\t".join(str(t) for t in tasks)]
    for idx, row in enumerate(matrix):
        cells = ["" if v is None else f"{v:.6f}" for v in row]
        lines.append(f"{tasks[idx]}\t" + "\t".join(cells))
    values = np.array(
        [[np.nan if v is None else v for v in row] for row in matrix]
    )
    lines.append(f"mAP\t{map_score(values):.6f}")
    return "\n".join(lines) + "\n"
