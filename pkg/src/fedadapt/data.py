"""Datasets, IDX ingestion and the two simulated non-IID federations."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    """Images ``(N, C, H, W)`` float32 in [0, 1] with integer labels.

    ``sample_ids`` index into the source dataset so that disjointness of
    client splits can be checked after transforms.
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels outside [0, {self.class_count})")
        if self.sample_ids is None:
            object.__setattr__(self, "sample_ids", np.arange(len(self.labels)))

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, index, name=None):
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(
            self.images[index], self.labels[index], self.class_count, name or self.name, self.sample_ids[index]
        )

    def map_images(self, fn, name=None):
        return LabeledDataset(
            fn(self.images).astype(np.float32), self.labels, self.class_count, name or self.name, self.sample_ids
        )


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    train: LabeledDataset
    test: LabeledDataset
    # ground truth; read only by evaluation code, never by extraction/grouping
    true_distribution_id: int


@dataclass(frozen=True)
class Federation:
    clients: tuple
    distribution_type_count: int
    kind: str = ""

    def __post_init__(self):
        ids = [c.client_id for c in self.clients]
        if ids != list(range(1, len(ids) + 1)):
            raise DataError(f"client ids must be contiguous from 1, got {ids}")

    def __len__(self):
        return len(self.clients)

    def __iter__(self):
        return iter(self.clients)

    def client(self, client_id):
        return self.clients[client_id - 1]

    @property
    def client_ids(self):
        return [c.client_id for c in self.clients]

    def true_groups(self):
        """Ground-truth distribution id per client (evaluation only)."""
        return {c.client_id: c.true_distribution_id for c in self.clients}

    def manifest(self, include_truth=True):
        clients = []
        for c in self.clients:
            entry = {"client_id": c.client_id, "train_count": len(c.train), "test_count": len(c.test)}
            if include_truth:
                entry["true_distribution_id"] = c.true_distribution_id
            clients.append(entry)
        return {"kind": self.kind, "distribution_type_count": self.distribution_type_count, "clients": clients}

    def write_manifest(self, path, include_truth=True):
        Path(path).write_text(json.dumps(self.manifest(include_truth), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


def _open(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path, expected_magic=None):
    """Parse an unsigned-byte IDX file into a numpy array."""
    raw = _open(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX magic number", offset=len(raw))
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    magic = struct.unpack(">I", raw[:4])[0]
    if zero != 0 or dtype_code != 0x08 or ndim == 0:
        raise FormatError(f"{path}: bad IDX magic number 0x{magic:08x}", offset=0)
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) - header_end < count:
        raise FormatError(
            f"{path}: truncated payload, {count} bytes declared, {len(raw) - header_end} present",
            offset=len(raw),
        )
    if len(raw) - header_end > count:
        raise FormatError(f"{path}: {len(raw) - header_end - count} trailing bytes", offset=header_end + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if Path(path).suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_idx(images_path, labels_path, class_count=None, name=None):
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected 3 dimensions, got {images.ndim}", offset=3)
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected 1 dimension, got {labels.ndim}", offset=3)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels in {labels_path}", offset=4)
    if len(labels) == 0:
        raise FormatError(f"{labels_path}: no samples", offset=8)
    if class_count is None:
        class_count = int(labels.max()) + 1
    x = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return LabeledDataset(x, labels.astype(np.int64), class_count, name or Path(images_path).name)


# ---------------------------------------------------------------------------
# federations
# ---------------------------------------------------------------------------


def _split_counts(total, parts):
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def partition_class_imbalance(
    dataset, n_clients=25, n_types=5, classes_per_type=2, samples_per_split=100, seed=0
):
    """Clients grouped in ``n_types`` distribution types with disjoint class sets.

    Clients ``1..k`` form type 1, ``k+1..2k`` type 2 and so on.  Every client
    draws ``samples_per_split`` train and as many test samples, class-balanced
    within its type, without replacement.
    """
    if n_types < 1 or n_clients < 1 or classes_per_type < 1 or samples_per_split < 1:
        raise ConfigurationError("federation sizes must be positive")
    if n_types * classes_per_type > dataset.class_count:
        raise ConfigurationError(
            f"{n_types} types x {classes_per_type} classes exceeds {dataset.class_count} classes"
        )
    if n_clients % n_types:
        raise ConfigurationError(f"{n_clients} clients not divisible by {n_types} types")
    rng = np.random.default_rng(seed)
    per_type = n_clients // n_types
    class_order = rng.permutation(dataset.class_count)[: n_types * classes_per_type]
    per_class = _split_counts(samples_per_split, classes_per_type)

    pools = {}
    for t in range(n_types):
        for k, cls in enumerate(class_order[t * classes_per_type : (t + 1) * classes_per_type]):
            idx = np.flatnonzero(dataset.labels == cls)
            need = per_type * 2 * per_class[k]
            if len(idx) < need:
                raise DataError(f"class {int(cls)} has {len(idx)} samples, {need} required")
            pools[int(cls)] = rng.permutation(idx)

    clients = []
    for t in range(n_types):
        classes = class_order[t * classes_per_type : (t + 1) * classes_per_type]
        for j in range(per_type):
            train_idx, test_idx = [], []
            for k, cls in enumerate(classes):
                m = per_class[k]
                chunk = pools[int(cls)][j * 2 * m : (j + 1) * 2 * m]
                train_idx.append(chunk[:m])
                test_idx.append(chunk[m:])
            train_idx = np.sort(np.concatenate(train_idx))
            test_idx = np.sort(np.concatenate(test_idx))
            cid = t * per_type + j + 1
            clients.append(
                ClientDataset(
                    cid,
                    dataset.subset(train_idx, f"client{cid}-train"),
                    dataset.subset(test_idx, f"client{cid}-test"),
                    t + 1,
                )
            )
    return Federation(tuple(clients), n_types, "class-imbalance")


def _mean3x3(x):
    h, w = x.shape[-2:]
    p = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    out = np.zeros_like(x, dtype=np.float32)
    for i in range(3):
        for j in range(3):
            out += p[..., i : i + h, j : j + w]
    return out / np.float32(9.0)


def _grid(x):
    h, w = x.shape[-2:]
    pattern = np.zeros((h, w), dtype=np.float32)
    pattern[::3, :] = 0.5
    pattern[:, ::3] = 0.5
    return np.clip(x + pattern, 0.0, 1.0)


DOMAIN_TRANSFORMS = (
    ("identity", lambda x: x),
    ("inverted", lambda x: 1.0 - x),
    ("grid-background", _grid),
    ("mean-blur", _mean3x3),
)


def apply_domain(images, domain):
    """Deterministic input transform of domain ``domain`` (1-based)."""
    if not 1 <= domain <= len(DOMAIN_TRANSFORMS):
        raise ConfigurationError(f"domain {domain} not in 1..{len(DOMAIN_TRANSFORMS)}")
    return DOMAIN_TRANSFORMS[domain - 1][1](images).astype(np.float32)


def partition_background_difference(dataset, n_domains=4, clients_per_domain=5, train_fraction=0.8, seed=0):
    """Clients share every class but see inputs through one of four domain transforms.

    The dataset is dealt class-stratified into ``n_domains * clients_per_domain``
    disjoint shards; each shard is split ``train_fraction`` / rest per class.
    """
    if not 1 <= n_domains <= len(DOMAIN_TRANSFORMS):
        raise ConfigurationError(f"n_domains must be in 1..{len(DOMAIN_TRANSFORMS)}, got {n_domains}")
    if clients_per_domain < 1 or not 0 < train_fraction < 1:
        raise ConfigurationError("clients_per_domain >= 1 and 0 < train_fraction < 1 required")
    rng = np.random.default_rng(seed)
    n_shards = n_domains * clients_per_domain
    shards = [[] for _ in range(n_shards)]
    for cls in range(dataset.class_count):
        idx = rng.permutation(np.flatnonzero(dataset.labels == cls))
        if len(idx) < 2 * n_shards:
            raise DataError(f"class {cls} has {len(idx)} samples, {2 * n_shards} required")
        offset = int(rng.integers(n_shards))
        for s, part in enumerate(np.array_split(idx, n_shards)):
            shards[(s + offset) % n_shards].append(part)
    shards_train, shards_test = [], []
    for parts in shards:
        # walk the shard class by class and send the k-th sample to train when
        # floor((k + 1) f) > floor(k f): exact overall fraction, stratified by class
        order = np.concatenate(parts)
        k = np.arange(len(order))
        to_train = np.floor((k + 1) * train_fraction) > np.floor(k * train_fraction)
        shards_train.append([order[to_train]])
        shards_test.append([order[~to_train]])

    clients = []
    for d in range(1, n_domains + 1):
        name = DOMAIN_TRANSFORMS[d - 1][0]
        for j in range(clients_per_domain):
            s = (d - 1) * clients_per_domain + j
            cid = s + 1
            train = dataset.subset(np.sort(np.concatenate(shards_train[s])))
            test = dataset.subset(np.sort(np.concatenate(shards_test[s])))
            clients.append(
                ClientDataset(
                    cid,
                    train.map_images(lambda x, d=d: apply_domain(x, d), f"client{cid}-{name}-train"),
                    test.map_images(lambda x, d=d: apply_domain(x, d), f"client{cid}-{name}-test"),
                    d,
                )
            )
    return Federation(tuple(clients), n_domains, "background-difference")


def single_client_federation(dataset, train_fraction=0.8, seed=0):
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(dataset))
    n_train = int(round(len(idx) * train_fraction))
    return Federation(
        (ClientDataset(1, dataset.subset(np.sort(idx[:n_train])), dataset.subset(np.sort(idx[n_train:])), 1),),
        1,
        "single",
    )
