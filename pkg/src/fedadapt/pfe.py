"""Channel-sparsity representations of client data.

A client feeds its training set through the federated model, measures for a
few selected channels of one ReLU layer the fraction of exactly-zero
activations per sample, and averages over samples.  Only that short vector is
uploaded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigurationError, ContractError, DataError

BYTES_PER_VALUE = 4


@dataclass(frozen=True)
class ChannelSelector:
    relu_index: int
    channel_ids: tuple
    seed: int

    def __post_init__(self):
        ids = tuple(int(c) for c in self.channel_ids)
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"duplicate channel ids in {ids}")
        if any(c < 0 for c in ids):
            raise ConfigurationError("channel ids must be non-negative")
        object.__setattr__(self, "channel_ids", ids)

    @property
    def q(self):
        return len(self.channel_ids)


@dataclass(frozen=True)
class SparsityRepresentation:
    client_id: int
    selector: ChannelSelector
    values: np.ndarray  # float32, one entry per selected channel

    def to_json(self):
        return {
            "client_id": self.client_id,
            "relu_index": self.selector.relu_index,
            "channel_ids": list(self.selector.channel_ids),
            "values": [float(v) for v in self.values],
        }

    @classmethod
    def from_json(cls, record, seed=0):
        selector = ChannelSelector(record["relu_index"], tuple(record["channel_ids"]), seed)
        return cls(record["client_id"], selector, np.asarray(record["values"], dtype=np.float32))


def channel_sparsity(feature_map):
    """Fraction of exact zeros in one H x W ReLU output channel."""
    fm = np.asarray(feature_map)
    if fm.size == 0:
        raise ContractError("empty feature map")
    if np.any(fm < 0):
        raise ContractError("negative activations: input is not a ReLU output")
    return float(np.count_nonzero(fm == 0)) / fm.size


def select_channels(model, relu_index, q, seed):
    """Draw ``q`` distinct channels of the given ReLU layer; returned sorted."""
    channels = model.relu_channels(relu_index)
    if not 1 <= q <= channels:
        raise ConfigurationError(f"q={q} but ReLU {relu_index} has {channels} channels")
    rng = np.random.default_rng(seed)
    picked = rng.permutation(channels)[:q]
    return ChannelSelector(relu_index, tuple(sorted(int(c) for c in picked)), seed)


def zero_counts(model, images, relu_index, batch_size=500):
    """Per-sample, per-channel count of zero activations at a ReLU layer.

    Returns ``(counts (N, C) int64, spatial_size)``.  A dense ReLU output is
    treated as C channels of spatial size 1.
    """
    stop = model.relu_layer(relu_index)
    counts = []
    spatial = 1
    for start in range(0, len(images), batch_size):
        out, _ = nn.forward(model, images[start : start + batch_size], stop=stop)
        flat = out.reshape(out.shape[0], out.shape[1], -1)
        spatial = flat.shape[2]
        counts.append(np.count_nonzero(flat == 0, axis=2))
    return np.concatenate(counts), spatial


def client_representation(model, client, selector):
    """Average channel sparsity over the client's training samples.

    The mean of per-sample ratios ``count_p / HW`` equals
    ``sum(count_p) / (N * HW)``; the integer sum makes it order independent.
    """
    train = client.train
    if len(train) == 0:
        raise DataError(f"client {client.client_id} has no training data")
    channels = model.relu_channels(selector.relu_index)
    if max(selector.channel_ids) >= channels:
        raise ConfigurationError(f"selector channel out of range for ReLU {selector.relu_index} ({channels})")
    counts, spatial = zero_counts(model, train.images, selector.relu_index)
    picked = counts[:, list(selector.channel_ids)].sum(axis=0)
    values = (picked / (len(train) * spatial)).astype(np.float32)
    return SparsityRepresentation(client.client_id, selector, values)


def extract_all(model, federation, selector):
    return [client_representation(model, c, selector) for c in federation]


def upload_cost(selector_or_q):
    """Bytes uploaded per client: four per selected channel."""
    q = selector_or_q.q if isinstance(selector_or_q, ChannelSelector) else int(selector_or_q)
    return q * BYTES_PER_VALUE


def write_representations(reps, path, extra=None):
    payload = {"representations": [r.to_json() for r in reps]}
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
