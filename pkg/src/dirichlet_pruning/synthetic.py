"""Synthetic switch-recovery task.

A small two-layer network with a known ground-truth switch vector generates
the labels; switch training on the frozen true weights should then recover
the relative importance of the hidden channels.

The truth vector zeroes out a quarter of the channels (down to eps = 1e-3/D)
and gives every surviving channel a strictly distinct draw from U(0.5, 1.5)
before renormalizing to the simplex. Distinct values keep rank agreement
between truth and posterior well defined; labels come from propagating the
inputs through the true switched network, with the output bias centered so
the two classes split the dataset evenly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .models import ModelGraph, build_mlp


@dataclass
class SyntheticTask:
    d_x: int
    d_h: int
    n: int
    true_switch: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def make_true_switch(d_h: int, rng) -> np.ndarray:
    """Quarter of the channels at eps = 1e-3/d_h, the rest U(0.5, 1.5),
    renormalized to sum 1."""
    if d_h < 4:
        raise ContractError(f"need d_h >= 4 so a quarter can be zeroed, got {d_h}")
    eps = 1e-3 / d_h
    k0 = d_h // 4
    s = rng.uniform(0.5, 1.5, size=d_h)
    off = rng.choice(d_h, size=k0, replace=False)
    s[off] = eps
    return s / s.sum()


def gen_synthetic(d_x: int, d_h: int, n: int, rng,
                  d_out: int = 2) -> tuple[SyntheticTask, np.ndarray, np.ndarray]:
    """Draw the true network and a labeled dataset of n standard-normal
    inputs. n must be even; labels are argmax outputs of the true switched
    network with the output bias median-centered, so for two classes the
    dataset comes out exactly balanced.

    Inputs are a single isotropic Gaussian on purpose: labels must be driven
    by the switched pathway itself, not by a cluster offset, or the hidden
    channels' importances leave no footprint in the likelihood and cannot be
    recovered.
    """
    if n < 2 or n % 2 != 0:
        raise ContractError(f"n must be even and >= 2, got {n}")
    if d_x < 1 or d_out < 2:
        raise ContractError(f"bad dims d_x={d_x}, d_out={d_out}")
    true_switch = make_true_switch(d_h, rng)
    w1 = rng.standard_normal((d_x, d_h)) / np.sqrt(d_x)
    b1 = 0.1 * rng.standard_normal(d_h)
    w2 = rng.standard_normal((d_h, d_out)) / np.sqrt(d_h)
    b2 = np.zeros(d_out)

    x = rng.standard_normal((n, d_x))
    h = np.maximum(true_switch * (x @ w1 + b1), 0.0)
    # simplex-scale switches shrink the activations by ~d_h, which would
    # leave near-zero logit margins and no per-channel signal in the
    # likelihood; rescale the output layer so the true network is decisive
    logits = h @ w2
    spread = logits.std(axis=0).mean()
    if spread > 0.0:
        w2 = w2 * (3.0 / spread)
        logits = h @ w2
    logits = logits + b2
    if d_out == 2:
        margin = logits[:, 1] - logits[:, 0]
        b2 = b2.copy()
        b2[1] -= np.median(margin)
        logits = h @ w2 + b2
    y = logits.argmax(axis=1).astype(np.int64)
    task = SyntheticTask(d_x, d_h, n, true_switch, w1, b1, w2, b2)
    return task, x, y


def task_model(task: SyntheticTask, with_switches: bool = True) -> ModelGraph:
    """The true weights as a model graph; the truth switch is NOT folded in,
    so running it with switches at the truth reproduces the label process."""
    model = build_mlp(task.d_x, task.d_h, task.w2.shape[1],
                      rng=np.random.default_rng(0), with_switches=with_switches)
    fc = [i for i, _ in enumerate(model.layers)
          if f"layer{i}.weight" in model.weights]
    first, last = fc[0], fc[-1]
    model.weights[f"layer{first}.weight"] = task.w1.copy()
    model.weights[f"layer{first}.bias"] = task.b1.copy()
    model.weights[f"layer{last}.weight"] = task.w2.copy()
    model.weights[f"layer{last}.bias"] = task.b2.copy()
    return model
