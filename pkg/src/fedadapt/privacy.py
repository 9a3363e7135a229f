"""Inversion attacks against feature maps and sparsity-derived properties.

An attacker who knows the model and some property of one input's ReLU
output (the full map, or a sparsity summary of it) runs gradient descent on a
candidate input so that the candidate's property matches the target.  How
close the candidate gets to the real input measures how much the property
leaks.

Exact zero counts are piecewise constant, so sparsity properties use the
logistic relaxation ``sigmoid(-beta * a)`` of "a is zero".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage.metrics import structural_similarity

from . import nn
from .errors import ConfigurationError

PROPERTY_KINDS = ("fm", "h_sp", "v_sp", "w_sp")
DEFAULT_BETA = 50.0


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def soft_sparsity(feature_map, beta=DEFAULT_BETA):
    """Differentiable sparsity of one channel: mean of sigmoid(-beta * a)."""
    if not beta > 0:
        raise ConfigurationError("beta must be > 0")
    a = np.asarray(feature_map, dtype=np.float64)
    return float(_sigmoid(-beta * a).mean())


def _as_maps(activation):
    # dense ReLU outputs become C channels of spatial size 1 x 1
    a = np.asarray(activation, dtype=np.float64)
    return a.reshape(a.shape[0], 1, 1) if a.ndim == 1 else a


def property_value(activation, kind, beta=DEFAULT_BETA):
    """Property of one sample's ReLU output ``(C, H, W)``.

    ``fm`` is the map itself, ``h_sp`` the soft sparsity of every row of every
    channel ``(C, H)``, ``v_sp`` of every column ``(C, W)`` and ``w_sp`` the sum
    over channels of whole-map soft sparsity (a scalar).
    """
    a = _as_maps(activation)
    if kind == "fm":
        return a.copy()
    s = _sigmoid(-beta * a)
    if kind == "h_sp":
        return s.mean(axis=2)
    if kind == "v_sp":
        return s.mean(axis=1)
    if kind == "w_sp":
        return np.array(s.mean(axis=(1, 2)).sum())
    raise ConfigurationError(f"unknown property kind {kind!r}; expected one of {PROPERTY_KINDS}")


def _property_and_vjp(activation, kind, beta, upstream):
    """Property value and the vector-Jacobian product ``upstream^T dP/da``."""
    a = _as_maps(activation)
    if kind == "fm":
        return a, upstream.reshape(a.shape)
    s = _sigmoid(-beta * a)
    ds = -beta * s * (1.0 - s)  # d sigmoid(-beta a) / da
    h, w = a.shape[1:]
    if kind == "h_sp":
        grad = np.repeat(upstream[:, :, None], w, axis=2) / w
    elif kind == "v_sp":
        grad = np.repeat(upstream[:, None, :], h, axis=1) / h
    else:
        grad = np.full(a.shape, float(upstream) / (h * w))
    return property_value(activation, kind, beta), grad * ds


@dataclass(frozen=True)
class InversionTarget:
    """What the attacker observes.  ``reference`` is kept only for scoring."""

    kind: str
    relu_index: int
    values: np.ndarray
    reference: np.ndarray = field(repr=False)
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if self.kind not in PROPERTY_KINDS:
            raise ConfigurationError(f"unknown property kind {self.kind!r}; expected one of {PROPERTY_KINDS}")


def capture_target(model, reference, kind, relu_index, beta=DEFAULT_BETA):
    """Record the property of ``reference`` at the given ReLU layer."""
    reference = np.asarray(reference, dtype=np.float32)
    out, _ = nn.forward(model, reference, stop=model.relu_layer(relu_index))
    return InversionTarget(kind, relu_index, property_value(out, kind, beta), reference, beta)


@dataclass
class InversionReport:
    kind: str
    relu_index: int
    reconstruction: np.ndarray
    objective: list
    mse: float
    ssim: float
    failed: bool = False
    message: str = ""

    def to_json(self):
        return {
            "kind": self.kind,
            "relu_index": self.relu_index,
            "mse": self.mse,
            "ssim": self.ssim,
            "failed": self.failed,
            "message": self.message,
            "final_objective": self.objective[-1] if self.objective else None,
            "objective": self.objective,
        }


def reconstruction_scores(reconstruction, reference):
    """``(mse, ssim)`` between two images with values in [0, 1]."""
    x = np.asarray(reconstruction, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    mse = float(np.mean((x - r) ** 2))
    if x.ndim == 3:
        channel_axis = 0 if x.shape[0] > 1 else None
        if channel_axis is None:
            x, r = x[0], r[0]
        side = min(x.shape[-2:])
        win = min(7, side if side % 2 else side - 1)
        ssim = structural_similarity(x, r, data_range=1.0, win_size=win, channel_axis=channel_axis)
    else:
        ssim = float("nan")
    return mse, float(ssim)


def invert(model, target, steps=500, step_size=1.0, seed=0, decay_every=100):
    """Gradient descent on a uniform-noise input to match ``target``.

    The objective is the mean squared difference between the candidate's
    property and ``target.values``; it never reads ``target.reference``.
    The step size halves every ``decay_every`` steps and the input is clamped
    to [0, 1] after each step.
    """
    model = model.with_params(model.params.flat.astype(np.float64))
    layer = model.relu_layer(target.relu_index)
    goal = np.asarray(target.values, dtype=np.float64)
    size = goal.size

    def objective(out):
        prop = property_value(out, target.kind, target.beta)
        diff = prop - goal
        value = float(np.mean(diff**2))
        _, dout = _property_and_vjp(out, target.kind, target.beta, 2.0 * diff / size)
        return value, dout.reshape(np.shape(out))

    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, target.reference.shape)
    history = []
    lr = step_size
    for step in range(steps):
        if step and step % decay_every == 0:
            lr *= 0.5
        value, grad = nn.input_gradient(model, x, layer, objective)
        history.append(value)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return InversionReport(
                target.kind, target.relu_index, x, history, float("nan"), float("nan"), True,
                f"objective diverged at step {step}",
            )
        x = np.clip(x - lr * grad, 0.0, 1.0)
    final, _ = nn.input_gradient(model, x, layer, objective)
    history.append(final)
    mse, ssim = reconstruction_scores(x, target.reference)
    return InversionReport(target.kind, target.relu_index, x, history, mse, ssim)


def write_pgm(images, path, scale=4):
    """Write images in [0, 1] as one binary PGM row, each upscaled ``scale`` x."""
    tiles = []
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        img = img[0] if img.ndim == 3 else img
        tiles.append(np.kron(np.clip(img, 0, 1), np.ones((scale, scale))))
    gap = np.ones((tiles[0].shape[0], scale))
    grid = np.concatenate([t for tile in tiles for t in (tile, gap)][:-1], axis=1)
    pixels = np.round(grid * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_report(reports, references, directory, extra=None):
    """JSON metrics plus a PGM strip: references, then one reconstruction per report."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {"attacks": [r.to_json() for r in reports]}
    if extra:
        payload.update(extra)
    (directory / "inversion.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_pgm(list(references) + [r.reconstruction for r in reports], directory / "inversion.pgm")
