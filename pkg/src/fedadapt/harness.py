"""Experiment driver: datasets, the full pipeline, baselines, sweeps and reports.

Every file an experiment writes goes through :class:`ArtifactWriter`, which
stamps the config hash into it and records it in ``manifest.json`` with its
sha256.  Wall-clock timings live in ``timings.json`` only, and that file is
marked volatile, so all other artifacts are byte-identical across reruns of
the same config.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, csm, data, fl, fsc, nn, pfe, privacy, synthetic
from .config import METHODS
from .errors import ComparisonError, ConfigurationError, FedAdaptError, StageError

log = logging.getLogger(__name__)

VOLATILE = {"timings.json"}


def fmt_pct(accuracy):
    return f"{100 * accuracy:.2f}"


class ArtifactWriter:
    """Single writer for one artifact directory."""

    def __init__(self, root, config_hash):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        self.files = []

    def path(self, name):
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if name not in self.files:
            self.files.append(name)
        return p

    def json(self, name, payload):
        payload = dict(payload)
        payload["config_hash"] = self.config_hash
        self.path(name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def csv(self, name, header, rows):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(header) + ["config_hash"])
        for row in rows:
            writer.writerow(list(row) + [self.config_hash])
        self.path(name).write_text(buf.getvalue(), encoding="utf-8")

    def register(self, name):
        """Declare a file written by some other routine."""
        return self.path(name)

    def manifest(self, extra=None):
        entries = []
        for name in sorted(self.files):
            entry = {"path": name, "volatile": name in VOLATILE}
            if name not in VOLATILE:
                entry["sha256"] = hashlib.sha256((self.root / name).read_bytes()).hexdigest()
            entries.append(entry)
        payload = {"config_hash": self.config_hash, "files": entries}
        payload.update(extra or {})
        (self.root / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


@dataclass
class ExperimentResult:
    config: object
    out_dir: Path
    status: int = 0
    failed_stage: str | None = None
    error: str | None = None
    federation: object = None
    federated_model: object = None
    fl_history: list = field(default_factory=list)
    representations: list = field(default_factory=list)
    similarity: object = None
    assignment: object = None
    accuracy: dict = field(default_factory=dict)  # method -> {client_id: accuracy}
    groups: dict = field(default_factory=dict)  # method -> GroupAssignment
    inversion: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------


def load_dataset(spec):
    if spec.format == "idx":
        return data.load_idx(spec.images, spec.labels)
    images, labels = synthetic.make_glyphs(spec.samples_per_class, spec.size, seed=spec.seed, noise=spec.noise)
    x = (images.astype(np.float32) / np.float32(255.0))[:, None]
    return data.LabeledDataset(x, labels.astype(np.int64), 10, "glyphs")


def build_federation(spec, dataset):
    if spec.kind == "class-imbalance":
        return data.partition_class_imbalance(
            dataset, spec.n_clients, spec.n_types, spec.classes_per_type, spec.samples_per_split, spec.seed
        )
    return data.partition_background_difference(
        dataset, spec.n_domains, spec.clients_per_domain, spec.train_fraction, spec.seed
    )


def prepare(config):
    """Validated config to federation; raises before any training happens."""
    config.validate()
    dataset = csm.run_stage("data", load_dataset, config.dataset)
    return csm.run_stage("data", build_federation, config.federation, dataset)


def train_federated(config, federation, threads, writer=None):
    """FL stage; checkpoints every ``config.checkpoint_every`` rounds when writing."""

    def on_round(r, model):
        k = config.checkpoint_every
        if writer is not None and k and (r + 1) % k == 0:
            nn.save_model(model, writer.register(f"checkpoints/fl_round_{r + 1:03d}.ckpt"), {"round": r + 1})

    return csm.run_stage(
        "fl", fl.run_federated_learning, federation, config.architecture, config.fl, threads=threads, on_round=on_round
    )


def accuracy_rows(federation, accuracy, assignment, baseline):
    truth = federation.true_groups()
    rows = []
    for cid in sorted(accuracy):
        group = assignment.groups[cid] if assignment is not None else ""
        rows.append((cid, truth[cid], group, fmt_pct(baseline[cid]), fmt_pct(accuracy[cid])))
    return rows


ACCURACY_HEADER = ("client_id", "true_distribution_id", "group_id", "baseline_acc", "adapted_acc")


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def run_experiment(config, out_dir, threads=1, federated=None):
    """Run the full pipeline plus configured baselines; never raises on stage failure.

    ``federated`` may supply a trained ``(model, history)`` pair to skip FL.
    Validation problems raise :class:`ConfigurationError` before any work.
    """
    config.validate()
    result = ExperimentResult(config, Path(out_dir))
    writer = ArtifactWriter(out_dir, config.config_hash)
    writer.json("config.json", {"config": config.to_dict()})
    clock = {}

    def timed(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            clock[name] = round(time.perf_counter() - t0, 3)

    try:
        federation = timed("data", prepare, config)
        result.federation = federation
        writer.json("federation.json", federation.manifest(include_truth=True))

        if federated is None:
            federated = timed("fl", train_federated, config, federation, threads, writer)
        m_f, history = federated
        result.federated_model, result.fl_history = m_f, history
        nn.save_model(m_f, writer.register("checkpoints/federated.ckpt"), {"config_hash": config.config_hash})
        writer.csv("fl_history.csv", ("round", "client_id", "split", "loss", "accuracy"), _history_rows(history))

        selector, reps, sim, assignment = timed(
            "pfe_fsc", csm.extract_and_group, m_f, federation, config.pfe, config.fsc
        )
        result.representations, result.similarity, result.assignment = reps, sim, assignment
        writer.json("representations.json", {"representations": [r.to_json() for r in reps]})
        writer.json("similarity.json", {"mode": config.fsc.mode, **sim.to_json()})
        if isinstance(sim, fsc.SimilarityMatrix):
            writer.csv("similarity_pairs.csv", ("client_a", "client_b", "distance"), sim.pair_rows())
        writer.json("groups.json", assignment.to_json())
        writer.json(
            "upload_cost.json",
            {
                "q": selector.q,
                "bytes_per_client": pfe.upload_cost(selector),
                "model_parameters": int(m_f.params.flat.size),
                "model_bytes": int(m_f.params.flat.nbytes),
                "ratio": pfe.upload_cost(selector) / m_f.params.flat.nbytes,
            },
        )

        baseline = csm.run_stage("baselines", baselines.baseline_accuracy, m_f, federation)
        result.accuracy["baseline"] = baseline
        methods = set(config.baselines.methods) | {"pfa"}
        for method in METHODS:
            if method == "baseline" or method not in methods:
                continue
            personal = timed(method, _run_method, method, m_f, federation, assignment, config, threads)
            result.accuracy[method] = personal.client_accuracy
            result.groups[method] = personal.assignment
            writer.csv(
                f"accuracy_{method}.csv",
                ACCURACY_HEADER,
                accuracy_rows(federation, personal.client_accuracy, personal.assignment, baseline),
            )
            if method == "pfa":
                for g, model in personal.group_models.items():
                    nn.save_model(model, writer.register(f"checkpoints/group_{g}.ckpt"), {"group": g})
        if "baseline" in config.baselines.methods:
            writer.csv("accuracy_baseline.csv", ACCURACY_HEADER, accuracy_rows(federation, baseline, None, baseline))

        if config.privacy.enabled:
            result.inversion = timed("privacy", csm.run_stage, "privacy", run_inversion, config, federation, m_f, writer)

        if config.figures:
            timed("figures", csm.run_stage, "report", _run_figures, result, writer)
    except (StageError, FedAdaptError, ValueError) as exc:
        stage = exc.stage if isinstance(exc, StageError) else "harness"
        log.error("stage %s failed: %s", stage, exc)
        result.status, result.failed_stage, result.error = 2, stage, str(exc)

    result.timings = clock
    writer.json("timings.json", {"seconds": clock})
    extra = {
        "status": "ok" if result.status == 0 else "failed",
        "seeds": _seeds(config),
    }
    if result.failed_stage:
        extra.update(failed_stage=result.failed_stage, error=result.error)
    writer.manifest(extra)
    return result


def _history_rows(history):
    return [(r, c, s, f"{loss:.6f}", f"{acc:.4f}") for r, c, s, loss, acc in fl.history_rows(history)]


def _seeds(config):
    seeds = {"seed": config.seed}
    for name in ("dataset", "federation", "fl", "pfe", "adaptation", "baselines", "privacy", "sweep"):
        seeds[name] = getattr(config, name).seed
    seeds["fsc_anchor"] = config.fsc.anchor_seed
    return seeds


def _run_method(method, m_f, federation, assignment, config, threads):
    adapt = config.adaptation
    if method == "pfa":
        return csm.run_stage("csm", csm.group_wise_adaptation, m_f, federation, assignment, adapt, threads=threads)
    if method == "finetune":
        return csm.run_stage("baselines", baselines.finetune_all, m_f, federation, adapt)
    if method == "random":
        k = config.baselines.random_groups or assignment.group_count
        return csm.run_stage(
            "baselines",
            baselines.random_group_adaptation,
            m_f,
            federation,
            k,
            config.baselines.seed,
            adapt,
            threads=threads,
        )
    if method == "federated":
        return csm.run_stage("baselines", baselines.federated_adaptation, m_f, federation, adapt, threads=threads)
    raise ConfigurationError(f"unknown method {method!r}")


def _run_figures(result, writer):
    from . import plotting

    plotting.plot_fl_history(result.fl_history, writer.register("figures/fl_accuracy.png"))
    plotting.plot_method_accuracy(result.accuracy, writer.register("figures/method_accuracy.png"))
    plotting.plot_similarity(result.similarity, writer.register("figures/similarity.png"))


# ---------------------------------------------------------------------------
# inversion
# ---------------------------------------------------------------------------


def attack_references(federation, count, seed):
    """``count`` test images drawn from the pooled client test splits."""
    pool = np.concatenate([c.test.images for c in federation])
    idx = np.sort(np.random.default_rng(seed).choice(len(pool), size=min(count, len(pool)), replace=False))
    return pool[idx]


def run_inversion(config, federation, model, writer=None):
    spec = config.privacy
    refs = attack_references(federation, spec.samples, spec.seed)
    reports = []
    for relu in spec.relu_indices:
        if not 1 <= relu <= len(model.relu_positions):
            raise ConfigurationError(f"privacy relu index {relu} outside 1..{len(model.relu_positions)}")
        for kind in spec.kinds:
            for i, ref in enumerate(refs):
                target = privacy.capture_target(model, ref, kind, relu, spec.beta)
                seed = fl.derive_seed(spec.seed, 3, relu, i)
                reports.append(privacy.invert(model, target, spec.steps, spec.step_size, seed))
    summary = summarize_inversion(reports)
    if writer is not None:
        writer.json(
            "inversion/inversion.json",
            {"attacks": [_attack_record(r) for r in reports], "summary": summary},
        )
        privacy.write_pgm(list(refs) + [r.reconstruction for r in reports], writer.register("inversion/inversion.pgm"))
        writer.csv(
            "inversion/summary.csv",
            ("relu_index", "kind", "mean_mse", "mean_ssim", "failures"),
            [(s["relu_index"], s["kind"], f"{s['mean_mse']:.6f}", f"{s['mean_ssim']:.4f}", s["failures"]) for s in summary],
        )
    return reports


def _attack_record(report):
    record = report.to_json()
    record["objective"] = [float(f"{v:.6e}") for v in record["objective"][:: max(1, len(record["objective"]) // 50)]]
    return record


def summarize_inversion(reports):
    groups = {}
    for r in reports:
        groups.setdefault((r.relu_index, r.kind), []).append(r)
    out = []
    for (relu, kind), rs in sorted(groups.items()):
        ok = [r for r in rs if not r.failed]
        out.append(
            {
                "relu_index": relu,
                "kind": kind,
                "mean_mse": float(np.mean([r.mse for r in ok])) if ok else float("nan"),
                "mean_ssim": float(np.mean([r.ssim for r in ok])) if ok else float("nan"),
                "failures": len(rs) - len(ok),
            }
        )
    return out


def invert_experiment(config, out_dir, threads=1, federated=None):
    """FL (or a supplied model) followed by the configured inversion attacks."""
    config.validate()
    writer = ArtifactWriter(out_dir, config.config_hash)
    federation = prepare(config)
    if federated is None:
        federated = train_federated(config, federation, threads)
    reports = csm.run_stage("privacy", run_inversion, config, federation, federated[0], writer)
    writer.manifest({"status": "ok", "seeds": _seeds(config)})
    return reports


# ---------------------------------------------------------------------------
# extraction sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    rows: list
    summary: dict  # (relu_index, q) -> separation ratio
    warnings: list


def anchor_separation(distances, truth, anchor_id):
    """``(min inter-type, max intra-type)`` distance from the anchor client."""
    own = truth[anchor_id]
    intra = [d for c, d in distances.items() if c != anchor_id and truth[c] == own]
    inter = [d for c, d in distances.items() if truth[c] != own]
    return (min(inter) if inter else float("inf")), (max(intra) if intra else 0.0)


def sweep_extraction(config, relu_indices, q_values, out_dir=None, threads=1, federated=None):
    """Anchor distances from one client for every (ReLU index, q) pair.

    Invalid combinations produce a warning row instead of an error.  The
    summary ratio uses ground-truth types and is an evaluation quantity only.
    """
    config.validate()
    federation = prepare(config)
    if federated is None:
        federated = train_federated(config, federation, threads)
    model = federated[0]
    truth = federation.true_groups()
    anchor_id = config.sweep.anchor_client
    if anchor_id not in truth:
        raise ConfigurationError(f"sweep anchor client {anchor_id} not in federation")
    rows, summary, warnings, stats = [], {}, [], []
    for relu in sorted(set(relu_indices)):
        for q in sorted(set(q_values)):
            try:
                sel = pfe.select_channels(model, relu, q, config.sweep.seed)
            except ConfigurationError as exc:
                warnings.append((relu, q, str(exc)))
                rows.append((relu, q, "", "", f"warning: {exc}"))
                continue
            reps = pfe.extract_all(model, federation, sel)
            vector = fsc.anchor_vector_for(reps, anchor_id)
            distances = dict(zip(vector.client_ids, vector.distances.tolist()))
            for cid in vector.client_ids:
                rows.append((relu, q, cid, f"{distances[cid]:.8f}", ""))
            inter, intra = anchor_separation(distances, truth, anchor_id)
            ratio = inter / intra if intra > 0 else float("inf")
            summary[(relu, q)] = ratio
            stats.append((relu, q, f"{inter:.8f}", f"{intra:.8f}", f"{ratio:.6f}"))
    if out_dir is not None:
        writer = ArtifactWriter(out_dir, config.config_hash)
        writer.csv("sweep.csv", ("relu_index", "q", "client_id", "distance", "note"), rows)
        writer.csv("sweep_summary.csv", ("relu_index", "q", "min_inter", "max_intra", "ratio"), stats)
        if config.figures and summary:
            from . import plotting

            plotting.plot_sweep(summary, writer.register("figures/sweep.png"))
        writer.manifest({"status": "ok", "anchor_client": anchor_id, "seeds": _seeds(config)})
    return SweepResult(rows, summary, warnings)


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------

TABLE8 = {"federated learning": "federated", "random selection": "random", "sparsity-based selection": "pfa"}


def _read_accuracy(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ComparisonError(f"{path} has no rows")
    return rows


def compare_methods(artifact_dir):
    """Per-client comparison table across the method files found in ``artifact_dir``."""
    root = Path(artifact_dir)
    present, absent, hashes, table, truth = [], [], set(), {}, {}
    for method in METHODS:
        path = root / f"accuracy_{method}.csv"
        if not path.exists():
            absent.append(method)
            continue
        present.append(method)
        for row in _read_accuracy(path):
            hashes.add(row["config_hash"])
            cid = int(row["client_id"])
            truth[cid] = int(row["true_distribution_id"])
            table.setdefault(cid, {})[method] = float(row["adapted_acc"])
    if not present:
        raise ComparisonError(f"no accuracy_*.csv files in {root}")
    if len(hashes) > 1:
        raise ComparisonError(f"accuracy files come from different configs: {sorted(hashes)}")
    config_hash = hashes.pop()
    for cid, accs in table.items():
        missing = [m for m in present if m not in accs]
        if missing:
            raise ComparisonError(f"client {cid} missing from {missing}")

    rows, wins = [], {m: 0 for m in present}
    for cid in sorted(table):
        values = [table[cid][m] for m in present]
        best = max(values)
        leaders = [m for m, v in zip(present, values) if v == best]
        winner = leaders[0] if len(leaders) == 1 and len(present) > 1 else ""
        if winner:
            wins[winner] += 1
        rows.append([cid, truth[cid]] + [f"{v:.2f}" for v in values] + [winner])

    def mean_of(method, clients):
        return round(float(np.mean([table[c][method] for c in clients])), 2)

    type_means = {}
    for t in sorted(set(truth.values())):
        members = [c for c in table if truth[c] == t]
        type_means[t] = {m: mean_of(m, members) for m in present}
        rows.append([f"type {t}", t] + [f"{type_means[t][m]:.2f}" for m in present] + [""])
    means = {m: mean_of(m, list(table)) for m in present}
    rows.append(["average", ""] + [f"{means[m]:.2f}" for m in present] + [""])

    writer = ArtifactWriter(root, config_hash)
    _reload_manifest(writer)
    writer.csv("comparison.csv", ["client_id", "true_distribution_id"] + present + ["winner"], rows)
    summary = {
        "methods": present,
        "absent": absent,
        "mean_accuracy": means,
        "type_mean_accuracy": {str(t): v for t, v in type_means.items()},
        "wins": wins,
        "table8": {col: means.get(m) for col, m in TABLE8.items() if m in means},
    }
    writer.json("comparison.json", summary)
    _rewrite_manifest(writer)
    return summary


def _reload_manifest(writer):
    path = writer.root / "manifest.json"
    writer._manifest_extra = {}
    if path.exists():
        old = json.loads(path.read_text())
        writer.files = [f["path"] for f in old.get("files", [])]
        writer._manifest_extra = {k: v for k, v in old.items() if k not in ("files", "config_hash")}


def _rewrite_manifest(writer):
    writer.manifest(getattr(writer, "_manifest_extra", {}))
