"""Episode synthesis from unlabeled data, plus evaluation-task sampling.

A synthesized N-way K-shot episode starts from N base images drawn without
replacement and assumed to come from distinct latent classes. Supports are
fresh augmentations of a base image and inherit its pseudo-label; queries
augment a uniformly chosen base and then blend in a second image drawn
from the rest of the dataset with a truncated-Beta coefficient kept below
one half, so the query stays dominated by its base. Everything is a pure
function of (dataset, config, seed): provenance records enough to replay
each query bit-for-bit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .augment import apply_pipeline, sample_augmentations
from .datasets import Dataset
from .errors import ContractError
from .image import mix_patch, mix_pixel
from .rng import SmallRng, derive, generator


@dataclass(frozen=True)
class MixConfig:
    """Truncated-Beta blend coefficient and mixing mode for query synthesis."""

    alpha: float = 1.0
    beta: float = 1.0
    lo: float = 0.0
    hi: float = 0.5
    mode: str = "pixel"

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ContractError(f"Beta shape parameters must be positive: {self.alpha}, {self.beta}")
        if not 0.0 <= self.lo < self.hi <= 1.0:
            raise ContractError(f"bad mixing range ({self.lo}, {self.hi})")
        if self.mode not in ("pixel", "patch"):
            raise ContractError(f"mode must be 'pixel' or 'patch', got {self.mode!r}")


def sample_lambda(mix: MixConfig, seed: int) -> float:
    """Rejection-sample Beta(alpha, beta) into the open interval (lo, hi)."""
    if mix.alpha == 1.0 and mix.beta == 1.0:
        rng = SmallRng(seed, "lambda-uniform")
        for _ in range(1_000_000):
            lam = rng.uniform()
            if mix.lo < lam < mix.hi:
                return lam
        raise ContractError(
            f"could not draw lambda in ({mix.lo}, {mix.hi}) from Beta(1, 1)")
    rng = generator(seed)
    for _ in range(1_000_000):
        lam = float(rng.beta(mix.alpha, mix.beta))
        if mix.lo < lam < mix.hi:
            return lam
    raise ContractError(
        f"could not draw lambda in ({mix.lo}, {mix.hi}) from Beta({mix.alpha}, {mix.beta})")


@dataclass
class Episode:
    n_way: int
    k_shot: int
    n_query: int
    support_images: np.ndarray   # (N*K, H, W, C)
    support_labels: np.ndarray   # (N*K,) in [0, N)
    query_images: np.ndarray     # (Q, H, W, C)
    query_labels: np.ndarray     # (Q,) in [0, N)
    provenance: dict = field(default_factory=dict)


def _support_block(ds, base_indices, k_shot, aug_count, seed):
    supports, labels, records = [], [], []
    for n, base_idx in enumerate(base_indices):
        base = ds.images[base_idx]
        for k in range(k_shot):
            ev = derive(seed, "support", n, k)
            specs = sample_augmentations(aug_count, derive(ev, "kinds"))
            supports.append(apply_pipeline(base, specs, derive(ev, "apply")))
            labels.append(n)
            records.append({
                "base": int(base_idx),
                "label": n,
                "aug_kinds": [s.kind for s in specs],
                "event_seed": ev,
            })
    return np.stack(supports), np.array(labels, dtype=np.int64), records


def _check_synth_inputs(ds, n_way, k_shot, n_query, aug_count):
    if n_way < 1 or k_shot < 1 or n_query < 1:
        raise ContractError(f"need N, K, Q >= 1, got {n_way}, {k_shot}, {n_query}")
    if len(ds) < n_way + n_query:
        raise ContractError(
            f"dataset {ds.id!r} has {len(ds)} items, needs >= N + Q = {n_way + n_query}")
    if not 1 <= aug_count <= 7:
        raise ContractError(f"aug_count must be in [1, 7], got {aug_count}")
    if ds.labeled:
        warnings.warn(f"dataset {ds.id!r} is labeled; labels are ignored for task synthesis")


def _query_event(ds, base_indices, aug_count, seed, j):
    """Shared query randomness: base pick and augmented view."""
    ev = derive(seed, "query", j)
    n = SmallRng(ev, "base").integers(len(base_indices))
    specs = sample_augmentations(aug_count, derive(ev, "kinds"))
    x_aug = apply_pipeline(ds.images[base_indices[n]], specs, derive(ev, "apply"))
    record = {
        "base": int(base_indices[n]),
        "label": n,
        "aug_kinds": [s.kind for s in specs],
        "event_seed": ev,
    }
    return ev, n, x_aug, record


def build_episode(ds: Dataset, n_way: int, k_shot: int, n_query: int,
                  mix: MixConfig | None = None, aug_count: int = 3,
                  seed: int = 0) -> Episode:
    """Synthesize one episode with mixed queries."""
    mix = mix or MixConfig()
    _check_synth_inputs(ds, n_way, k_shot, n_query, aug_count)
    base_indices = np.array(SmallRng(seed, "bases").distinct(len(ds), n_way))
    support_images, support_labels, sup_records = _support_block(
        ds, base_indices, k_shot, aug_count, seed)

    # mixing partners come from everything except the episode's base images
    allowed = np.setdiff1d(np.arange(len(ds)), base_indices)
    queries, q_labels, q_records = [], [], []
    for j in range(n_query):
        ev, n, x_aug, record = _query_event(ds, base_indices, aug_count, seed, j)
        z_idx = int(allowed[SmallRng(ev, "partner").integers(len(allowed))])
        lam = sample_lambda(mix, derive(ev, "lambda"))
        if mix.mode == "pixel":
            q = mix_pixel(x_aug, ds.images[z_idx], lam)
        else:
            q = mix_patch(x_aug, ds.images[z_idx], lam, derive(ev, "patch"))
        record.update({"z_index": z_idx, "lambda": lam, "mix_mode": mix.mode})
        queries.append(q)
        q_labels.append(n)
        q_records.append(record)

    return Episode(
        n_way=n_way, k_shot=k_shot, n_query=n_query,
        support_images=support_images, support_labels=support_labels,
        query_images=np.stack(queries), query_labels=np.array(q_labels, dtype=np.int64),
        provenance={
            "kind": "mixed", "dataset": ds.id, "seed": int(seed),
            "aug_count": aug_count, "base_indices": [int(i) for i in base_indices],
            "mix": {"alpha": mix.alpha, "beta": mix.beta, "lo": mix.lo,
                    "hi": mix.hi, "mode": mix.mode},
            "supports": sup_records, "queries": q_records,
        },
    )


def build_episode_augment_only(ds: Dataset, n_way: int, k_shot: int, n_query: int,
                               aug_count: int = 3, seed: int = 0) -> Episode:
    """Ablation variant: queries are plain augmentations, nothing is mixed.

    Consumes the same per-event randomness as build_episode, so with equal
    seeds its queries equal the mixed episode's queries at lambda = 0.
    """
    _check_synth_inputs(ds, n_way, k_shot, n_query, aug_count)
    base_indices = np.array(SmallRng(seed, "bases").distinct(len(ds), n_way))
    support_images, support_labels, sup_records = _support_block(
        ds, base_indices, k_shot, aug_count, seed)
    queries, q_labels, q_records = [], [], []
    for j in range(n_query):
        _, n, x_aug, record = _query_event(ds, base_indices, aug_count, seed, j)
        queries.append(x_aug)
        q_labels.append(n)
        q_records.append(record)
    return Episode(
        n_way=n_way, k_shot=k_shot, n_query=n_query,
        support_images=support_images, support_labels=support_labels,
        query_images=np.stack(queries), query_labels=np.array(q_labels, dtype=np.int64),
        provenance={
            "kind": "augment_only", "dataset": ds.id, "seed": int(seed),
            "aug_count": aug_count, "base_indices": [int(i) for i in base_indices],
            "supports": sup_records, "queries": q_records,
        },
    )


def replay_query(ds: Dataset, episode: Episode, j: int) -> dict:
    """Rebuild query j from provenance; returns the intermediate pieces."""
    rec = episode.provenance["queries"][j]
    specs = sample_augmentations(
        episode.provenance["aug_count"], derive(rec["event_seed"], "kinds"))
    x_aug = apply_pipeline(ds.images[rec["base"]], specs, derive(rec["event_seed"], "apply"))
    out = {"x_aug": x_aug}
    if "lambda" in rec:
        z = ds.images[rec["z_index"]]
        out["z"] = z
        out["lambda"] = rec["lambda"]
        if rec["mix_mode"] == "pixel":
            out["query"] = mix_pixel(x_aug, z, rec["lambda"])
        else:
            out["query"] = mix_patch(x_aug, z, rec["lambda"],
                                     derive(rec["event_seed"], "patch"))
    else:
        out["query"] = x_aug
    return out


def build_test_episode(ds: Dataset, n_way: int, k_shot: int, n_query: int,
                       seed: int = 0) -> Episode:
    """Sample a standard supervised N-way K-shot task from a labeled dataset.

    Queries are class-balanced; when n_query is not divisible by n_way the
    first (n_query mod n_way) episode classes receive one extra query.
    Support and query items are disjoint by construction.
    """
    if not ds.labeled:
        raise ContractError(f"dataset {ds.id!r} is unlabeled; test episodes need labels")
    if n_way < 1 or k_shot < 1 or n_query < 1:
        raise ContractError(f"need N, K, Q >= 1, got {n_way}, {k_shot}, {n_query}")
    classes = ds.classes()
    if classes.size < n_way:
        raise ContractError(f"dataset {ds.id!r} has {classes.size} classes, needs >= {n_way}")
    rng = generator(seed, "classes")
    chosen = classes[rng.choice(classes.size, size=n_way, replace=False)]
    per_class_q = [n_query // n_way + (1 if r < n_query % n_way else 0) for r in range(n_way)]
    sup_idx, sup_lab, qr_idx, qr_lab = [], [], [], []
    for ep_label, cls in enumerate(chosen):
        pool = np.flatnonzero(ds.labels == cls)
        need = k_shot + per_class_q[ep_label]
        if pool.size < need:
            raise ContractError(
                f"class {int(cls)} has {pool.size} items, needs >= {need}")
        picked = pool[generator(seed, "items", ep_label).choice(pool.size, size=need,
                                                                replace=False)]
        sup_idx.extend(picked[:k_shot])
        sup_lab.extend([ep_label] * k_shot)
        qr_idx.extend(picked[k_shot:])
        qr_lab.extend([ep_label] * per_class_q[ep_label])
    return Episode(
        n_way=n_way, k_shot=k_shot, n_query=n_query,
        support_images=ds.images[np.array(sup_idx)],
        support_labels=np.array(sup_lab, dtype=np.int64),
        query_images=ds.images[np.array(qr_idx)],
        query_labels=np.array(qr_lab, dtype=np.int64),
        provenance={
            "kind": "test", "dataset": ds.id, "seed": int(seed),
            "class_map": {int(c): i for i, c in enumerate(chosen)},
            "support_indices": [int(i) for i in sup_idx],
            "query_indices": [int(i) for i in qr_idx],
        },
    )


def collision_probability(class_count: int, per_class: int, n_draws: int) -> float:
    """Probability that n_draws items from a balanced pool share a class.

    Uniform draws without replacement from class_count * per_class items;
    computed in log space as 1 - C! * m^N * (Cm-N)! / ((C-N)! * (Cm)!).
    More draws than classes forces a repeat, so that case returns 1.
    """
    c, m, n = int(class_count), int(per_class), int(n_draws)
    if c < 1 or m < 1 or n < 1:
        raise ContractError(f"need C, m, N >= 1, got {c}, {m}, {n}")
    if n > c:
        return 1.0
    log_all_distinct = (
        math.lgamma(c + 1) - math.lgamma(c - n + 1)
        + n * math.log(m)
        + math.lgamma(c * m - n + 1) - math.lgamma(c * m + 1)
    )
    return min(1.0, max(0.0, -math.expm1(log_all_distinct)))


def multi_dataset_sample(datasets: list[Dataset], seed: int) -> int:
    """Uniform dataset index, independent of the datasets' sizes."""
    if not datasets:
        raise ContractError("multi_dataset_sample needs a non-empty dataset list")
    return int(generator(seed, "dataset-pick").integers(len(datasets)))
