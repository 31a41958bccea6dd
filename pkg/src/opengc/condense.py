"""Condensation loop: synthesize a small feature set whose closed-form
ridge readout mimics classifiers trained on the full graph, regularized
toward predictions that stay invariant across temporal environments.

Per outer iteration: resample the relay layer, fit the readout on the
condensed set in closed form, evaluate the base cross-entropy plus the
environment losses with their invariance penalty, and take one ADAM step
on the condensed features and the log-temperature.  The readout fit is
an N' x N' solve, so iteration cost is dominated by encoding the (fixed)
original-graph embeddings through the resampled layer.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import ogcf
from .environments import (
    EnvironmentSet,
    fallback_environments,
    generate_environments,
)
from .errors import DataError, NumericalError
from .graph import SplitMask, TaskSequence, derive_seed, normalize_adjacency
from .propagation import propagate
from .relay import RelayParams, krr_fit, sample_relay, transform


@dataclass
class CondenseConfig:
    """Knobs for one condensation run.

    ``alpha`` weights the environment block against the base loss,
    ``gamma`` weights the invariance penalty inside it, ``eta`` scales
    the residual-transplant magnitude, and ``c`` calibrates the Beta
    degree multiplier.  ``ratio`` fixes the condensed size as a fraction
    of the task's node count.
    """

    lam: float = 5e-3
    K: int = 2
    b: int = 1024
    alpha: float = 0.5
    gamma: float = 0.5
    eta: float = 1.0
    c: float = 10.0
    env_count: int = 3
    lr: float = 1e-2
    max_iters: int = 300
    patience: int = 10
    eval_every: int = 10
    seed: int = 0
    ratio: float = 0.01
    beta_mode: str = "literal"
    drop_edge_rate: float = 0.2
    drop_feature_rate: float = 0.2
    fallback_scope: str = "no-history"   # or "global"
    tau_init: float = 1.0

    def validate(self) -> None:
        if self.lam <= 0 or self.b < 1 or self.K < 0:
            raise ValueError("require lam > 0, b >= 1, K >= 0")
        if self.env_count < 1:
            raise ValueError("env_count must be >= 1")
        if self.lr <= 0 or self.max_iters < 0 or self.eval_every < 1:
            raise ValueError("require lr > 0, max_iters >= 0, eval_every >= 1")
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must lie in (0, 1]")
        if self.beta_mode not in ("literal", "intent"):
            raise ValueError("beta_mode must be 'literal' or 'intent'")
        if self.fallback_scope not in ("no-history", "global"):
            raise ValueError("fallback_scope must be 'no-history' or 'global'")
        if self.tau_init <= 0:
            raise ValueError("tau_init must be positive")


def config_hash(cfg: CondenseConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class CondensedGraph:
    """Synthetic features with fixed one-hot labels and implied identity
    adjacency."""

    Xp: np.ndarray        # N' x d
    Yp: np.ndarray        # N' x C one-hot
    labels: np.ndarray    # N' int
    metadata: dict = field(default_factory=dict)

    @property
    def num_condensed(self) -> int:
        return self.Xp.shape[0]

    @property
    def num_classes(self) -> int:
        return self.Yp.shape[1]


@dataclass
class AdamState:
    """Moment estimates for the condensed features and the log-temperature."""

    m_x: np.ndarray
    v_x: np.ndarray
    m_t: float = 0.0
    v_t: float = 0.0
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_shape(cls, shape: tuple[int, int]) -> "AdamState":
        return cls(m_x=np.zeros(shape), v_x=np.zeros(shape))

    def update(
        self, xp: np.ndarray, log_tau: float, g_x: np.ndarray, g_t: float, lr: float
    ) -> tuple[np.ndarray, float]:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        self.m_x = b1 * self.m_x + (1 - b1) * g_x
        self.v_x = b2 * self.v_x + (1 - b2) * g_x * g_x
        self.m_t = b1 * self.m_t + (1 - b1) * g_t
        self.v_t = b2 * self.v_t + (1 - b2) * g_t * g_t
        c1, c2 = 1 - b1 ** self.step, 1 - b2 ** self.step
        xp = xp - lr * (self.m_x / c1) / (np.sqrt(self.v_x / c2) + self.eps)
        log_tau = log_tau - lr * (self.m_t / c1) / (math.sqrt(self.v_t / c2) + self.eps)
        return xp, log_tau


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _class_counts(labels: np.ndarray, num_classes: int, n_prime: int) -> np.ndarray:
    """Per-class condensed counts: largest-remainder on the training class
    distribution, every class floored at one node."""
    hist = np.bincount(labels, minlength=num_classes).astype(np.float64)
    if (hist == 0).any():
        raise DataError("every class needs at least one labeled training node")
    quota = n_prime * hist / hist.sum()
    counts = np.maximum(1, np.floor(quota).astype(np.int64))
    while counts.sum() > n_prime:
        over = np.where(counts > 1, counts - quota, -np.inf)
        counts[int(np.argmax(over))] -= 1
    remainders = quota - np.floor(quota)
    while counts.sum() < n_prime:
        idx = int(np.argmax(remainders))
        counts[idx] += 1
        remainders[idx] = -np.inf
    return counts


def init_condensed(
    H_train: np.ndarray,
    labels: np.ndarray,
    ratio: float,
    seed: int,
    *,
    num_nodes_total: int,
    num_classes: int,
) -> CondensedGraph:
    """Seed the condensed set from class-stratified samples of the
    propagated training embeddings plus a little Gaussian noise."""
    labels = np.asarray(labels, dtype=np.int64)
    n_prime = int(round(ratio * num_nodes_total))
    if n_prime < num_classes:
        raise DataError(
            f"ratio {ratio} gives {n_prime} condensed nodes for "
            f"{num_classes} classes"
        )
    counts = _class_counts(labels, num_classes, n_prime)
    rng = np.random.default_rng(seed)
    rows, row_labels = [], []
    for cls in range(num_classes):
        pool = np.flatnonzero(labels == cls)
        k = int(counts[cls])
        picked = rng.choice(pool, size=k, replace=pool.size < k)
        rows.append(H_train[picked] + rng.normal(0.0, 1e-3, (k, H_train.shape[1])))
        row_labels.extend([cls] * k)
    xp = np.vstack(rows)
    lab = np.asarray(row_labels, dtype=np.int64)
    return CondensedGraph(
        Xp=xp,
        Yp=one_hot(lab, num_classes),
        labels=lab,
        metadata={"compress_ratio": n_prime / num_nodes_total, "seed": seed},
    )


def ce_loss(logprobs, Y: np.ndarray, mask: np.ndarray | None = None):
    """Mean over (masked) rows of the negative true-class log-probability.

    ``logprobs`` may be an array or a tape node; Y is one-hot.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        n = int(mask.sum())
        if n == 0:
            raise ValueError("empty mask")
        Y = Y * mask[:, None]
    else:
        n = Y.shape[0]
        if n == 0:
            raise ValueError("empty batch")
    return ad.scale(ad.reduce_sum(ad.mul(Y, logprobs)), -1.0 / n)


def irm_penalty(logits, Y: np.ndarray, tau=1.0, mask: np.ndarray | None = None):
    """Squared derivative of the tempered cross-entropy with respect to a
    scalar classifier multiplier at 1.

    Closed form of the derivative: mean over rows of
    sum_j (softmax(logits/tau)_j - Y_j) * logits_j / tau, which is exact
    for softmax cross-entropy and stays differentiable when ``logits``
    and ``tau`` are tape nodes (pass tau = exp(log-temperature leaf)).
    """
    Y = np.asarray(Y, dtype=np.float64)
    inv_tau = ad.reciprocal(tau) if isinstance(tau, ad.Node) else 1.0 / float(tau)
    z = ad.mul(logits, inv_tau)
    p = ad.exp(ad.log_softmax(z, 0.0))
    term = ad.mul(ad.sub(p, Y), z)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        n = int(mask.sum())
        if n == 0:
            raise ValueError("empty mask")
        term = ad.mul(term, mask[:, None].astype(np.float64))
    else:
        n = Y.shape[0]
    g = ad.scale(ad.reduce_sum(term), 1.0 / n)
    return ad.mul(g, g)


def total_loss(
    envs: EnvironmentSet,
    y_train: np.ndarray,
    theta: RelayParams,
    Xp,
    Yp: np.ndarray,
    log_tau,
    cfg: CondenseConfig,
):
    """Base cross-entropy plus the weighted environment block:

        L = ce(base) + alpha * mean_e [ ce(env_e) + gamma * penalty(env_e) ]

    ``Xp`` and ``log_tau`` may be tape leaves (gradient path) or plain
    values (finite-difference path).  The readout is fit on the condensed
    set inside this function, so the whole expression differentiates
    through the solve.
    """
    w = krr_fit(transform(theta, Xp), Yp, cfg.lam)
    logits_base = ad.matmul(transform(theta, envs.base), w)
    loss = ce_loss(ad.log_softmax(logits_base, log_tau), y_train)
    if cfg.alpha == 0.0:
        return loss
    tau = ad.exp(log_tau)
    env_sum = None
    for h_env in envs.envs:
        logits_e = ad.matmul(transform(theta, h_env), w)
        term = ce_loss(ad.log_softmax(logits_e, log_tau), y_train)
        if cfg.gamma != 0.0:
            term = ad.add(term, ad.scale(irm_penalty(logits_e, y_train, tau), cfg.gamma))
        env_sum = term if env_sum is None else ad.add(env_sum, term)
    return ad.add(loss, ad.scale(env_sum, cfg.alpha / envs.env_count))


def _build_environments(
    seq: TaskSequence, task: int, H_t, masked_labels, train_idx, cfg: CondenseConfig
) -> EnvironmentSet:
    snap = seq.snapshot(task)
    env_seed = derive_seed(cfg.seed, "env", task)
    prop = lambda adj, x: propagate(adj, x, cfg.K).matrix
    if task == 1:
        return fallback_environments(
            snap, prop, cfg.drop_edge_rate, cfg.drop_feature_rate,
            env_count=cfg.env_count, seed=env_seed, rows=train_idx,
        )
    snap_prev = seq.snapshot(task - 1)
    h_prev = propagate(normalize_adjacency(snap_prev), snap_prev.features, cfg.K)
    envs = generate_environments(
        H_t, h_prev, masked_labels, snap.degrees(),
        eta=cfg.eta, c=cfg.c, mode=cfg.beta_mode,
        env_count=cfg.env_count, seed=env_seed,
    )
    if cfg.fallback_scope == "global" and envs.miss_mask is not None and envs.miss_mask.any():
        fb = fallback_environments(
            snap, prop, cfg.drop_edge_rate, cfg.drop_feature_rate,
            env_count=cfg.env_count, seed=env_seed, rows=train_idx,
        )
        for h_env, h_fb in zip(envs.envs, fb.envs):
            h_env[envs.miss_mask] = h_fb[envs.miss_mask]
    return envs


def _readout_accuracy(theta, xp, yp, lam, h_eval, y_eval) -> float:
    """Validation accuracy of the closed-form readout under the current
    relay sample (temperature does not move the argmax)."""
    w = krr_fit(transform(theta, xp), yp, lam)
    logits = transform(theta, h_eval) @ w
    return float(np.mean(np.argmax(logits, axis=1) == y_eval))


def condense(
    seq: TaskSequence,
    splits: SplitMask,
    cfg: CondenseConfig,
    task: int | None = None,
) -> CondensedGraph:
    """Run the full condensation loop for one task and return the best
    checkpoint by validation readout accuracy."""
    cfg.validate()
    task = seq.m if task is None else task
    if task < 1:
        raise DataError("task must be >= 1")
    snap = seq.snapshot(task)
    h_t = propagate(normalize_adjacency(snap), snap.features, cfg.K, task)
    train_idx = splits.train(task)
    val_idx = splits.val(task)
    masked_labels = np.full(snap.num_nodes, -1, dtype=np.int64)
    masked_labels[train_idx] = snap.labels[train_idx]

    envs = _build_environments(seq, task, h_t, masked_labels, train_idx, cfg)
    y_train = one_hot(snap.labels[train_idx], snap.num_classes)
    h_val = h_t.matrix[val_idx]
    y_val = snap.labels[val_idx]

    cond = init_condensed(
        h_t.matrix[train_idx],
        snap.labels[train_idx],
        cfg.ratio,
        derive_seed(cfg.seed, "init", task),
        num_nodes_total=snap.num_nodes,
        num_classes=snap.num_classes,
    )
    xp = cond.Xp.copy()
    log_tau = math.log(cfg.tau_init)
    theta0 = sample_relay(derive_seed(cfg.seed, "theta", task, 0), snap.feature_dim, cfg.b)
    best_acc = _readout_accuracy(theta0, xp, cond.Yp, cfg.lam, h_val, y_val)
    best_xp, best_tau = xp.copy(), log_tau
    history = [(0, best_acc)]
    stale = 0
    adam = AdamState.for_shape(xp.shape)

    iters_run = 0
    for it in range(1, cfg.max_iters + 1):
        theta = sample_relay(
            derive_seed(cfg.seed, "theta", task, it), snap.feature_dim, cfg.b
        )
        tape = ad.Tape()
        x_node = tape.leaf(xp)
        t_node = tape.leaf(np.asarray(log_tau))
        loss = total_loss(envs, y_train, theta, x_node, cond.Yp, t_node, cfg)
        if not np.isfinite(loss.value):
            raise NumericalError(
                f"non-finite condensation loss at iteration {it}: {loss.value}"
            )
        g_x, g_t = tape.backward(loss)
        xp, log_tau = adam.update(xp, log_tau, g_x, float(g_t), cfg.lr)
        iters_run = it
        if it % cfg.eval_every == 0 or it == cfg.max_iters:
            acc = _readout_accuracy(theta, xp, cond.Yp, cfg.lam, h_val, y_val)
            history.append((it, acc))
            if acc > best_acc:
                best_acc, best_xp, best_tau = acc, xp.copy(), log_tau
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break

    cond.Xp = best_xp
    cond.metadata.update(
        task_index=task,
        seed=cfg.seed,
        config_hash=config_hash(cfg),
        ratio=cfg.ratio,
        compress_ratio=cond.num_condensed / snap.num_nodes,
        best_val_acc=best_acc,
        log_tau=best_tau,
        iters_run=iters_run,
        eval_history=[[int(i), float(a)] for i, a in history],
        donor_miss=int(envs.donor_miss),
    )
    return cond


def save_condensed(cond: CondensedGraph, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ogcf.write_matrix(out_dir / "condensed.bin", cond.Xp)
    with open(out_dir / "labels.tsv", "w") as fh:
        for i, lab in enumerate(cond.labels):
            fh.write(f"{i}\t{int(lab)}\n")
    meta = dict(cond.metadata)
    meta["num_condensed"] = cond.num_condensed
    meta["num_classes"] = cond.num_classes
    with open(out_dir / "meta.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_condensed(out_dir: str | Path) -> CondensedGraph:
    out_dir = Path(out_dir)
    xp = ogcf.read_matrix(out_dir / "condensed.bin")
    rows = np.loadtxt(out_dir / "labels.tsv", dtype=np.int64, delimiter="\t", ndmin=2)
    labels = rows[np.argsort(rows[:, 0])][:, 1]
    meta = json.loads((out_dir / "meta.json").read_text())
    return CondensedGraph(
        Xp=xp,
        Yp=one_hot(labels, int(meta["num_classes"])),
        labels=labels,
        metadata=meta,
    )
