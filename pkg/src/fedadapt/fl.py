"""Classical federated learning: local SGD, FedAvg and round orchestration."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigurationError, DataError, InternalError


@dataclass(frozen=True)
class FLConfig:
    rounds: int = 50
    local_epochs: int = 1
    lr: float = 0.01
    momentum: float = 0.5
    batch_size: int = 10
    seed: int = 0
    client_fraction: float = 1.0

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if self.local_epochs < 0:
            raise ConfigurationError("local_epochs must be >= 0")
        if not self.lr > 0:
            raise ConfigurationError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0 < self.client_fraction <= 1:
            raise ConfigurationError("client_fraction must lie in (0, 1]")


@dataclass
class RoundMetrics:
    round: int
    selected: list
    train_loss: dict
    train_acc: dict
    test_loss: dict
    test_acc: dict
    seconds: float = field(default=0.0, compare=False)

    @property
    def mean_train_acc(self):
        return float(np.mean(list(self.train_acc.values())))

    @property
    def mean_test_acc(self):
        return float(np.mean(list(self.test_acc.values())))


def derive_seed(*keys):
    """Stable 63-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> 1)


def client_round_seed(seed, round_index, client_id):
    return derive_seed(seed, 2, round_index, client_id)


def local_train(model, client, epochs, lr, momentum, batch_size, seed):
    """SGD with momentum on ``client.train``; returns new ModelParams.

    Velocity starts at zero for every call.  The input model is not modified.
    """
    train = client.train
    if len(train) == 0:
        raise DataError(f"client {client.client_id} has an empty training set")
    params = model.params.flat.copy()
    if epochs <= 0:
        return model.params.with_flat(params)
    rng = np.random.default_rng(seed)
    velocity = np.zeros_like(params)
    work = model.with_params(params)
    n = len(train)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, grads = nn.loss_and_grad(work, train.images[idx], train.labels[idx])
            params, velocity = nn.sgd_step(params, grads, velocity, lr, momentum)
            work.params = work.params.with_flat(params)
    return work.params


def fedavg(params_list, weights=None, client_ids=None):
    """Weighted elementwise mean of parameter vectors.

    Inputs are summed in ascending ``client_ids`` order in float64 and the
    result is cast back to the input dtype.
    """
    if not params_list:
        raise ConfigurationError("fedavg needs at least one parameter vector")
    flats = [p.flat if isinstance(p, nn.ModelParams) else np.asarray(p) for p in params_list]
    size = flats[0].size
    for f in flats:
        if f.size != size:
            raise InternalError(f"fedavg length mismatch: {f.size} != {size}")
    w = np.ones(len(flats)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(w) != len(flats):
        raise InternalError(f"{len(w)} weights for {len(flats)} parameter vectors")
    if np.any(w < 0):
        raise ConfigurationError("fedavg weights must be non-negative")
    total = w.sum()
    if not total > 0:
        raise ConfigurationError("fedavg weights sum to zero")
    order = range(len(flats)) if client_ids is None else np.argsort(np.asarray(client_ids), kind="stable")
    acc = np.zeros(size, dtype=np.float64)
    for i in order:
        acc += (w[i] / total) * flats[i].astype(np.float64)
    out = acc.astype(flats[0].dtype)
    first = params_list[0]
    return first.with_flat(out) if isinstance(first, nn.ModelParams) else out


def evaluate_with_loss(model, dataset, batch_size=500):
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    correct, loss_sum = 0, 0.0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start : start + batch_size]
        y = dataset.labels[start : start + batch_size]
        logits, _ = nn.forward(model, x)
        correct += int((logits.argmax(axis=1) == y).sum())
        loss_sum += float(nn.cross_entropy(logits.astype(np.float64), y)) * len(y)
    return loss_sum / len(dataset), correct / len(dataset)


def evaluate(model, dataset):
    """Fraction of argmax-correct predictions (ties go to the lowest class)."""
    return evaluate_with_loss(model, dataset)[1]


def select_clients(client_ids, fraction, seed, round_index):
    count = math.ceil(fraction * len(client_ids))
    rng = np.random.default_rng(derive_seed(seed, 1, round_index))
    picked = rng.permutation(np.asarray(client_ids))[:count]
    return sorted(int(c) for c in picked)


def _parallel_map(fn, items, threads):
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def train_rounds(model, clients, config, threads=1, metrics_clients=None, progress=None, on_round=None):
    """FedAvg over ``clients`` starting from ``model``; the engine shared by FL and CSM.

    Returns ``(final_model, history)``; metrics are evaluated on
    ``metrics_clients`` (default: ``clients``) after each aggregation.
    ``progress(metrics)`` and ``on_round(round_index, model)`` are called
    after every round.
    """
    clients = sorted(clients, key=lambda c: c.client_id)
    by_id = {c.client_id: c for c in clients}
    metrics_clients = clients if metrics_clients is None else metrics_clients
    history = []
    for r in range(config.rounds):
        t0 = time.perf_counter()
        selected = select_clients(list(by_id), config.client_fraction, config.seed, r)

        def train_one(cid, current=model, r=r):
            return local_train(
                current,
                by_id[cid],
                config.local_epochs,
                config.lr,
                config.momentum,
                config.batch_size,
                client_round_seed(config.seed, r, cid),
            )

        updates = _parallel_map(train_one, selected, threads)
        sizes = [len(by_id[cid].train) for cid in selected]
        model = model.with_params(fedavg(updates, sizes, selected))
        history.append(round_metrics(model, metrics_clients, r, selected, time.perf_counter() - t0))
        if progress:
            progress(history[-1])
        if on_round:
            on_round(r, model)
    return model, history


def round_metrics(model, clients, round_index, selected, seconds=0.0):
    train_loss, train_acc, test_loss, test_acc = {}, {}, {}, {}
    for c in clients:
        train_loss[c.client_id], train_acc[c.client_id] = evaluate_with_loss(model, c.train)
        test_loss[c.client_id], test_acc[c.client_id] = evaluate_with_loss(model, c.test)
    return RoundMetrics(round_index, list(selected), train_loss, train_acc, test_loss, test_acc, seconds)


def run_federated_learning(federation, arch, config, threads=1, progress=None, on_round=None):
    """Train the federated model M_f.

    ``arch`` is a built-in architecture name (initialised from
    ``config.seed``) or an existing Model to continue from.
    """
    if len(federation) == 0:
        raise DataError("federation has no clients")
    if isinstance(arch, nn.Model):
        model = arch
    else:
        first = federation.clients[0].train
        layers = nn.architecture(arch, first.input_shape, first.class_count)
        model = nn.build_model(layers, first.input_shape, seed=derive_seed(config.seed, 0))
    return train_rounds(model, list(federation), config, threads=threads, progress=progress, on_round=on_round)


def history_rows(history):
    """Flatten metrics into (round, client_id, split, loss, accuracy) rows."""
    rows = []
    for m in history:
        for cid in sorted(m.test_acc):
            rows.append((m.round, cid, "train", m.train_loss[cid], m.train_acc[cid]))
            rows.append((m.round, cid, "test", m.test_loss[cid], m.test_acc[cid]))
    return rows
