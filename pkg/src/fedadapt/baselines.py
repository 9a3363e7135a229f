"""Comparison methods: the global model, local fine-tuning, random grouping."""

import numpy as np

from . import fl
from .csm import PersonalizationResult, group_wise_adaptation
from .fsc import GroupAssignment


def baseline_accuracy(federated_model, federation):
    """Accuracy of the unadapted federated model on every client's test split."""
    return {c.client_id: fl.evaluate(federated_model, c.test) for c in federation}


def local_finetune(federated_model, client, epochs, lr, momentum, batch_size, seed, session_epochs=None):
    """Retrain all parameters on one client's data.

    The budget of ``epochs`` is run in sessions of ``session_epochs`` (default:
    one session).  Each session restarts momentum and uses the same per-round
    seed as a group-wise adaptation round, so a budget of ``rounds *
    local_epochs`` in sessions of ``local_epochs`` reproduces a singleton group
    bit for bit.
    """
    session_epochs = session_epochs or epochs
    model = federated_model
    if epochs <= 0:
        return model.copy()
    sessions, rest = divmod(epochs, session_epochs)
    plan = [session_epochs] * sessions + ([rest] if rest else [])
    for r, e in enumerate(plan):
        params = fl.local_train(model, client, e, lr, momentum, batch_size, fl.client_round_seed(seed, r, client.client_id))
        model = model.with_params(params)
    return model


def finetune_all(federated_model, federation, config):
    """Fine-tune every client with the same total epochs as group adaptation."""
    models, accuracy = {}, {}
    for g, c in enumerate(federation):
        model = local_finetune(
            federated_model,
            c,
            config.total_epochs,
            config.lr,
            config.momentum,
            config.batch_size,
            config.seed,
            session_epochs=config.local_epochs,
        )
        models[g] = model
        accuracy[c.client_id] = fl.evaluate(model, c.test)
    assignment = GroupAssignment({c.client_id: g for g, c in enumerate(federation)})
    return PersonalizationResult(assignment, models, accuracy)


def random_assignment(client_ids, group_count, seed):
    if not 1 <= group_count <= len(client_ids):
        raise ValueError(f"group_count must lie in 1..{len(client_ids)}")
    perm = np.random.default_rng(seed).permutation(np.asarray(sorted(client_ids)))
    return GroupAssignment.from_partition(np.array_split(perm, group_count))


def random_group_adaptation(federated_model, federation, group_count, seed, config, threads=1):
    """Adapt within randomly drawn groups of near-equal size."""
    assignment = random_assignment(federation.client_ids, group_count, seed)
    return group_wise_adaptation(federated_model, federation, assignment, config, threads=threads)


def federated_adaptation(federated_model, federation, config, threads=1):
    """All clients in one group: plain FL continued for the adaptation budget."""
    assignment = GroupAssignment({c: 0 for c in federation.client_ids})
    return group_wise_adaptation(federated_model, federation, assignment, config, threads=threads)
