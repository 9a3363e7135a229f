"""Group-wise federated adaptation and the end-to-end pipeline.

Every group starts from the same federated model and runs its own FedAvg
rounds over its members only; the resulting group model is the personalized
model of each member.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import fl, fsc, pfe
from .errors import ConfigurationError, FedAdaptError, StageError


@dataclass(frozen=True)
class AdaptationConfig:
    adaptation_rounds: int = 30
    local_epochs: int = 1
    lr: float = 0.01
    momentum: float = 0.5
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.adaptation_rounds < 1:
            raise ConfigurationError("adaptation_rounds must be >= 1")

    def fl_config(self):
        return fl.FLConfig(
            rounds=self.adaptation_rounds,
            local_epochs=self.local_epochs,
            lr=self.lr,
            momentum=self.momentum,
            batch_size=self.batch_size,
            seed=self.seed,
            client_fraction=1.0,
        )

    @property
    def total_epochs(self):
        return self.adaptation_rounds * self.local_epochs


@dataclass(frozen=True)
class PFEConfig:
    relu_index: int = 1
    q: int = 30
    seed: int = 0


@dataclass(frozen=True)
class FSCConfig:
    mode: str = "anchor"  # "anchor" or "full"
    expected_groups: int | None = None
    epsilon: float | None = None
    anchor_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("anchor", "full"):
            raise ConfigurationError(f"fsc mode must be 'anchor' or 'full', got {self.mode!r}")


@dataclass
class PersonalizationResult:
    assignment: fsc.GroupAssignment
    group_models: dict  # group id -> Model
    client_accuracy: dict  # client id -> accuracy on own test split
    history: dict = field(default_factory=dict)  # group id -> list of RoundMetrics

    def model_for(self, client_id):
        return self.group_models[self.assignment.groups[client_id]]

    @property
    def mean_accuracy(self):
        return sum(self.client_accuracy.values()) / len(self.client_accuracy)


def group_wise_adaptation(federated_model, federation, assignment, config, threads=1):
    """Adapt the federated model separately inside every group."""
    missing = set(federation.client_ids) - set(assignment.groups)
    if missing:
        raise ConfigurationError(f"clients {sorted(missing)} have no group")
    fl_config = config.fl_config()
    models, history, accuracy = {}, {}, {}
    for g, members in enumerate(assignment.partition()):
        clients = [federation.client(c) for c in members]
        model, hist = fl.train_rounds(federated_model, clients, fl_config, threads=threads)
        models[g], history[g] = model, hist
        for c in clients:
            accuracy[c.client_id] = fl.evaluate(model, c.test)
    return PersonalizationResult(assignment, models, dict(sorted(accuracy.items())), history)


@dataclass
class PipelineResult:
    federated_model: object
    fl_history: list
    selector: pfe.ChannelSelector
    representations: list
    similarity: object  # SimilarityMatrix or AnchorSimilarityVector
    assignment: fsc.GroupAssignment
    personalization: PersonalizationResult


def run_stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (FedAdaptError, ValueError) as exc:
        raise StageError(name, exc) from exc


def extract_and_group(federated_model, federation, pfe_config, fsc_config):
    selector = run_stage("pfe", pfe.select_channels, federated_model, pfe_config.relu_index, pfe_config.q, pfe_config.seed)
    reps = run_stage("pfe", pfe.extract_all, federated_model, federation, selector)
    if fsc_config.mode == "full":
        sim = run_stage("fsc", fsc.full_matrix, reps)
    else:
        sim = run_stage("fsc", fsc.anchor_vector, reps, fsc_config.anchor_seed)
    assignment = run_stage("fsc", fsc.group_clients, sim, fsc_config.expected_groups, fsc_config.epsilon)
    return selector, reps, sim, assignment


def run_pfa_pipeline(
    federation,
    arch,
    fl_config,
    pfe_config,
    adaptation_config,
    fsc_config=None,
    threads=1,
    federated=None,
):
    """Federated learning, sparsity extraction, grouping, then group-wise adaptation.

    ``federated`` may supply an already trained ``(model, history)`` pair to
    skip the first stage.
    """
    fsc_config = fsc_config or FSCConfig()
    if federated is None:
        federated = run_stage("fl", fl.run_federated_learning, federation, arch, fl_config, threads=threads)
    m_f, history = federated
    selector, reps, sim, assignment = extract_and_group(m_f, federation, pfe_config, fsc_config)
    result = run_stage("csm", group_wise_adaptation, m_f, federation, assignment, adaptation_config, threads=threads)
    return PipelineResult(m_f, history, selector, reps, sim, assignment, result)
