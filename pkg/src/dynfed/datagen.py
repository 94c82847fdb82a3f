"""Synthetic federated data and device partitioners.

The synthetic generator draws argmax-linear classification data per device:
labels come from ``argmax(opt_weights @ x + opt_bias)`` where the optimal
parameters, the feature means and the device sizes can each carry their own
heterogeneity knob. Exactly one knob is active at a time; the other two
randomness sources are switched off entirely (shared optimal parameters, zero
feature means, equal sizes).

Partitioners split any ``(features, labels)`` arrays into device shards:
uniform IID, Dirichlet label-skew with per-sample stock tracking, and
lognormal unbalanced size sampling. All functions are deterministic per seed;
per-device draws use independent named streams (see :mod:`dynfed.rng`), so
generation is order independent.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .losses import ContractError, DataShard
from . import rng as rngs


class SyntheticMode(Enum):
    """Which single heterogeneity source is active."""

    HOMOGENEOUS = "homogeneous"
    TYPE1 = "type1"  # per-device optimal parameters, spread gamma1
    TYPE2 = "type2"  # per-device feature means, spread gamma2
    TYPE3 = "type3"  # unbalanced device sizes, log-variance gamma3


@dataclass
class SyntheticConfig:
    """Knobs for the argmax-linear synthetic dataset.

    ``gamma1`` and ``gamma2`` are the variances of the per-device mean draws;
    ``gamma3`` is the variance of the log of the device sizes (the lognormal
    is parameterized by the std of the log, ``sqrt(gamma3)``). Only the gamma
    selected by ``mode`` has any effect.
    """

    m: int = 20
    avg_n: int = 200
    p: int = 30
    n_classes: int = 5
    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma3: float = 1.0
    mode: SyntheticMode = SyntheticMode.HOMOGENEOUS
    seed: int = 0
    test_fraction: float = 0.1

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = SyntheticMode(self.mode)
        if self.m < 1 or self.avg_n < 1 or self.p < 1 or self.n_classes < 2:
            raise ContractError("need m >= 1, avg_n >= 1, p >= 1, n_classes >= 2")
        if min(self.gamma1, self.gamma2, self.gamma3) < 0:
            raise ContractError("gammas must be nonnegative")
        if not 0.0 <= self.test_fraction <= 1.0:
            raise ContractError("test_fraction must lie in [0, 1]")


@dataclass
class PartitionMeta:
    """Per-device label histograms and sizes plus provenance echo."""

    sizes: np.ndarray
    histograms: np.ndarray  # (m, n_classes) int counts
    kind: str
    seed: int
    extra: dict = field(default_factory=dict)


@dataclass
class FederatedDataset:
    """Device shards, one held-out test shard and partition metadata."""

    shards: list
    test: DataShard
    meta: PartitionMeta

    @property
    def m(self) -> int:
        return len(self.shards)


def feature_scales(p: int) -> np.ndarray:
    """Per-coordinate feature standard deviations; variances decay as k^-1.2."""
    k = np.arange(1, p + 1, dtype=np.float64)
    return np.sqrt(k ** -1.2)


def _label_histograms(shards, n_classes: int) -> np.ndarray:
    hist = np.zeros((len(shards), n_classes), dtype=np.int64)
    for i, shard in enumerate(shards):
        hist[i] = np.bincount(shard.labels, minlength=n_classes)
    return hist


def _labeler_fingerprint(weights: np.ndarray, bias: np.ndarray) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(weights).tobytes())
    digest.update(np.ascontiguousarray(bias).tobytes())
    return digest.hexdigest()[:16]


def generate_synthetic(cfg: SyntheticConfig) -> FederatedDataset:
    """Generate the argmax-linear dataset for one heterogeneity setting.

    Per device i: optimal parameters have entries ~ N(mean_i, 1) with
    mean_i ~ N(0, gamma1) when type-1 heterogeneity is on, otherwise one
    shared draw with entries ~ N(0, 1) is used for every device. Features are
    x ~ N(nu_i, diag(k^-1.2)) with nu_i entries ~ N(beta_i, 1),
    beta_i ~ N(0, gamma2) when type-2 is on, else nu_i = 0. Device sizes are
    lognormal with log-variance gamma3 around ``avg_n`` when type-3 is on,
    else all equal. The test shard pools ``test_fraction`` extra samples per
    device drawn by the same process.
    """
    mode = cfg.mode
    scales = feature_scales(cfg.p)

    if mode is SyntheticMode.TYPE3 and cfg.gamma3 > 0:
        sizes = sample_unbalanced_sizes(cfg.m, math.sqrt(cfg.gamma3),
                                        cfg.m * cfg.avg_n, cfg.seed)
    else:
        sizes = np.full(cfg.m, cfg.avg_n, dtype=np.int64)

    if mode is not SyntheticMode.TYPE1:
        shared_rng = rngs.stream(cfg.seed, rngs.TAG_SHARED_OPTIMUM)
        shared_weights = shared_rng.normal(size=(cfg.n_classes, cfg.p))
        shared_bias = shared_rng.normal(size=cfg.n_classes)

    shards, test_parts, fingerprints = [], [], []
    for i in range(cfg.m):
        rng = rngs.stream(cfg.seed, rngs.TAG_DATA, i)
        if mode is SyntheticMode.TYPE1:
            mean_i = rng.normal(0.0, math.sqrt(cfg.gamma1))
            weights = rng.normal(mean_i, 1.0, size=(cfg.n_classes, cfg.p))
            bias = rng.normal(mean_i, 1.0, size=cfg.n_classes)
        else:
            weights, bias = shared_weights, shared_bias
        if mode is SyntheticMode.TYPE2:
            beta_i = rng.normal(0.0, math.sqrt(cfg.gamma2))
            nu = rng.normal(beta_i, 1.0, size=cfg.p)
        else:
            nu = np.zeros(cfg.p)

        def draw(n):
            X = nu + rng.normal(size=(n, cfg.p)) * scales
            y = np.argmax(X @ weights.T + bias, axis=1)
            return X, y

        X, y = draw(int(sizes[i]))
        shards.append(DataShard(X, y))
        n_test = int(math.ceil(cfg.test_fraction * sizes[i]))
        if n_test:
            test_parts.append(draw(n_test))
        fingerprints.append(_labeler_fingerprint(weights, bias))

    if test_parts:
        test = DataShard(np.vstack([X for X, _ in test_parts]),
                         np.concatenate([y for _, y in test_parts]))
    else:
        test = DataShard.empty(cfg.p)

    meta = PartitionMeta(
        sizes=sizes,
        histograms=_label_histograms(shards, cfg.n_classes),
        kind=f"synthetic-{mode.value}",
        seed=cfg.seed,
        extra={
            "mode": mode.value,
            "gamma1": cfg.gamma1, "gamma2": cfg.gamma2, "gamma3": cfg.gamma3,
            "avg_n": cfg.avg_n, "p": cfg.p, "n_classes": cfg.n_classes,
            "test_fraction": cfg.test_fraction,
            "test_fraction_note": "held-out size is an artifact choice",
            "labeler_fingerprints": fingerprints,
        },
    )
    return FederatedDataset(shards=shards, test=test, meta=meta)


def _validate_pool(features, labels):
    features = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
    labels = np.ascontiguousarray(np.asarray(labels, dtype=np.int64))
    if features.ndim != 2 or labels.ndim != 1 or features.shape[0] != labels.shape[0]:
        raise ContractError("features must be (n, p) with one label per row")
    return features, labels


def _make_test_shard(p, test_features, test_labels) -> DataShard:
    if test_features is None:
        return DataShard.empty(p)
    tf, tl = _validate_pool(test_features, test_labels)
    return DataShard(tf, tl)


def partition_iid(features, labels, m: int, seed: int, sizes=None,
                  test_features=None, test_labels=None) -> FederatedDataset:
    """Split a labeled pool across m devices by uniform random permutation.

    With ``sizes`` omitted every device gets ``n // m`` samples and the
    remainder is spread one per device starting from device 0. An explicit
    ``sizes`` vector (e.g. from :func:`sample_unbalanced_sizes`) must sum to n.
    """
    features, labels = _validate_pool(features, labels)
    n = features.shape[0]
    if m < 1 or m > n:
        raise ContractError(f"need 1 <= m <= n, got m={m}, n={n}")
    if sizes is None:
        base, rem = divmod(n, m)
        sizes = np.full(m, base, dtype=np.int64)
        sizes[:rem] += 1
    else:
        sizes = np.asarray(sizes, dtype=np.int64)
        if sizes.shape != (m,) or sizes.sum() != n or sizes.min() < 1:
            raise ContractError("sizes must be m positive counts summing to n")
    perm = rngs.stream(seed, rngs.TAG_PARTITION).permutation(n)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    shards = [DataShard(features[perm[a:b]], labels[perm[a:b]])
              for a, b in zip(bounds[:-1], bounds[1:])]
    n_classes = int(labels.max()) + 1 if n else 1
    meta = PartitionMeta(sizes=sizes, histograms=_label_histograms(shards, n_classes),
                         kind="iid", seed=seed)
    return FederatedDataset(shards=shards,
                            test=_make_test_shard(features.shape[1], test_features, test_labels),
                            meta=meta)


def partition_dirichlet(features, labels, m: int, prior: float, seed: int,
                        test_features=None, test_labels=None) -> FederatedDataset:
    """Label-skewed split: per-device class priors ~ Dirichlet(prior).

    Assignment walks devices round-robin; each turn samples one label from the
    device's prior restricted (and renormalized) to classes with remaining
    stock, then takes one unused sample of that label. Every datapoint is
    assigned exactly once. Smaller priors give more skewed devices.
    """
    if prior <= 0:
        raise ContractError("dirichlet prior must be positive")
    features, labels = _validate_pool(features, labels)
    n = features.shape[0]
    if m < 1 or m > n:
        raise ContractError(f"need 1 <= m <= n, got m={m}, n={n}")
    n_classes = int(labels.max()) + 1
    rng = rngs.stream(seed, rngs.TAG_PARTITION)
    priors = rng.dirichlet(np.full(n_classes, prior), size=m)

    # Shuffled per-class stacks; popping from the end is O(1).
    stacks = []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        stacks.append(list(idx))
    remaining = np.array([len(s) for s in stacks], dtype=np.float64)

    assigned = [[] for _ in range(m)]
    classes = np.arange(n_classes)
    left = n
    device = 0
    while left > 0:
        weights = priors[device] * (remaining > 0)
        total = weights.sum()
        if total <= 0:  # tiny priors can underflow to exact zeros; fall back to uniform over stocked classes
            weights = (remaining > 0).astype(np.float64)
            total = weights.sum()
        label = rng.choice(classes, p=weights / total)
        assigned[device].append(stacks[label].pop())
        remaining[label] -= 1
        left -= 1
        device = (device + 1) % m

    shards = []
    for idx in assigned:
        order = np.array(idx, dtype=np.int64)
        shards.append(DataShard(features[order], labels[order]))
    sizes = np.array([s.n for s in shards], dtype=np.int64)
    meta = PartitionMeta(sizes=sizes, histograms=_label_histograms(shards, n_classes),
                         kind="dirichlet", seed=seed, extra={"prior": prior})
    return FederatedDataset(shards=shards,
                            test=_make_test_shard(features.shape[1], test_features, test_labels),
                            meta=meta)


def sample_unbalanced_sizes(m: int, sigma: float, total: int, seed: int) -> np.ndarray:
    """Device sizes proportional to lognormal draws, summing exactly to total.

    ``sigma`` is the standard deviation of the log of the draws; zero gives an
    equal split. Every size is at least 1.
    """
    if sigma < 0:
        raise ContractError("sigma must be nonnegative")
    if m < 1 or total < m:
        raise ContractError(f"need total >= m >= 1, got m={m}, total={total}")
    if sigma == 0:
        base, rem = divmod(total, m)
        sizes = np.full(m, base, dtype=np.int64)
        sizes[:rem] += 1
        return sizes
    draws = rngs.stream(seed, rngs.TAG_SIZES).lognormal(0.0, sigma, size=m)
    quota = draws / draws.sum() * total
    sizes = np.floor(quota).astype(np.int64)
    # Largest-remainder apportionment, then enforce the floor of 1.
    shortfall = total - int(sizes.sum())
    order = np.argsort(-(quota - sizes), kind="stable")
    sizes[order[:shortfall]] += 1
    while (sizes < 1).any():
        lender = int(np.argmax(sizes))
        borrower = int(np.argmin(sizes))
        sizes[lender] -= 1
        sizes[borrower] += 1
    return sizes


def load_csv_pool(features_path: str, labels_path: str):
    """Read a header-free comma-separated feature matrix and label vector."""
    features = np.loadtxt(features_path, delimiter=",", dtype=np.float64, ndmin=2)
    labels = np.loadtxt(labels_path, delimiter=",", dtype=np.int64, ndmin=1)
    return _validate_pool(features, labels)


def dump_dataset(dataset: FederatedDataset, out_dir: str) -> None:
    """Write shard CSV pairs plus a meta.json manifest into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    for k, shard in enumerate(dataset.shards):
        np.savetxt(os.path.join(out_dir, f"shard_{k}_features.csv"),
                   shard.features, delimiter=",", fmt="%.17g")
        np.savetxt(os.path.join(out_dir, f"shard_{k}_labels.csv"),
                   shard.labels, delimiter=",", fmt="%d")
    np.savetxt(os.path.join(out_dir, "test_features.csv"),
               dataset.test.features, delimiter=",", fmt="%.17g")
    np.savetxt(os.path.join(out_dir, "test_labels.csv"),
               dataset.test.labels, delimiter=",", fmt="%d")
    meta = {
        "devices": dataset.m,
        "sizes": dataset.meta.sizes.tolist(),
        "histograms": dataset.meta.histograms.tolist(),
        "kind": dataset.meta.kind,
        "seed": dataset.meta.seed,
        "test_size": dataset.test.n,
        "fingerprint": dataset_fingerprint(dataset),
        "extra": dataset.meta.extra,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_dumped_dataset(in_dir: str) -> FederatedDataset:
    """Read back a directory written by :func:`dump_dataset`."""
    with open(os.path.join(in_dir, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    shards = []
    for k in range(meta["devices"]):
        X, y = load_csv_pool(os.path.join(in_dir, f"shard_{k}_features.csv"),
                             os.path.join(in_dir, f"shard_{k}_labels.csv"))
        shards.append(DataShard(X, y))
    if meta["test_size"]:
        tX, ty = load_csv_pool(os.path.join(in_dir, "test_features.csv"),
                               os.path.join(in_dir, "test_labels.csv"))
        test = DataShard(tX, ty)
    else:
        test = DataShard.empty(shards[0].p)
    part_meta = PartitionMeta(sizes=np.array(meta["sizes"], dtype=np.int64),
                              histograms=np.array(meta["histograms"], dtype=np.int64),
                              kind=meta["kind"], seed=meta["seed"], extra=meta["extra"])
    return FederatedDataset(shards=shards, test=test, meta=part_meta)


def dataset_fingerprint(dataset: FederatedDataset) -> str:
    """Content hash over all shard and test arrays, stable across re-runs."""
    digest = hashlib.sha256()
    for shard in dataset.shards:
        digest.update(shard.features.tobytes())
        digest.update(shard.labels.tobytes())
    digest.update(dataset.test.features.tobytes())
    digest.update(dataset.test.labels.tobytes())
    return digest.hexdigest()
