"""Point samplers inside the perturbation set, used as soundness oracles.

The set is a product of per-position l_p balls of radius epsilon around the
embeddings at the perturbed positions. All samplers take a numpy Generator
so every draw comes from one seed.
"""
from __future__ import annotations

import numpy as np

from .bounds import PerturbationSpec
from .model import TransformerModel, forward_embeddings


def _ball(rng: np.random.Generator, p: float, shape: tuple[int, ...], surface: bool = False) -> np.ndarray:
    """Uniform draws from the unit l_p ball (or its surface) along the last axis."""
    dim = shape[-1]
    lead = shape[:-1]
    if np.isinf(p):
        if not surface:
            return rng.uniform(-1.0, 1.0, size=shape)
        pts = rng.uniform(-1.0, 1.0, size=shape)
        face = rng.integers(0, dim, size=lead)
        np.put_along_axis(pts, face[..., None], rng.choice([-1.0, 1.0], size=lead + (1,)), axis=-1)
        return pts
    if p == 1:
        # Laplace draws normalised by their l1 norm are uniform on the l1 sphere
        g = rng.laplace(size=shape)
        direction = g / np.abs(g).sum(axis=-1, keepdims=True)
    else:
        g = rng.normal(size=shape)
        direction = g / np.linalg.norm(g, axis=-1, keepdims=True)
    if surface:
        return direction
    radius = rng.uniform(size=lead + (1,)) ** (1.0 / dim)
    return direction * radius


def sample_perturbations(rng: np.random.Generator, spec: PerturbationSpec, d: int, count: int,
                         surface: bool = False) -> np.ndarray:
    """``count`` perturbations of shape (count, t, d), each row within radius epsilon."""
    return spec.epsilon * _ball(rng, spec.p, (count, spec.t, d), surface)


def extreme_perturbations(rng: np.random.Generator, spec: PerturbationSpec, d: int,
                          count: int = 64) -> np.ndarray:
    """Vertices and axis points of the ball: signed unit vectors, and for l_inf random corners."""
    eps = spec.epsilon
    axes = np.concatenate([np.eye(d), -np.eye(d)]) * eps
    picks = rng.integers(0, 2 * d, size=(count, spec.t))
    pts = axes[picks]
    if np.isinf(spec.p):
        corners = eps * rng.choice([-1.0, 1.0], size=(count, spec.t, d))
        pts = np.concatenate([pts, corners])
    return pts


def apply(x0: np.ndarray, spec: PerturbationSpec, deltas: np.ndarray) -> np.ndarray:
    """Embeddings batch (count, n, d) with ``deltas`` added at the perturbed positions."""
    batch = np.repeat(x0[None], deltas.shape[0], axis=0)
    batch[:, spec.index] += deltas
    return batch


def _project(delta: np.ndarray, p: float, eps: float) -> np.ndarray:
    """Scale rows back into the l_p ball (exact projection for l_2 and l_inf, radial for l_1)."""
    if np.isinf(p):
        return np.clip(delta, -eps, eps)
    norms = np.linalg.norm(delta, ord=p, axis=-1, keepdims=True)
    scale = np.where(norms > eps, eps / np.maximum(norms, 1e-300), 1.0)
    return delta * scale


def margins(model: TransformerModel, batch: np.ndarray, label: int) -> np.ndarray:
    """min over y != label of (logit_label - logit_y) for each embedded input."""
    logits = forward_embeddings(model, batch)
    others = np.delete(logits, label, axis=-1)
    return logits[..., label] - others.max(axis=-1)


def attack(model: TransformerModel, x0: np.ndarray, spec: PerturbationSpec, label: int,
           rng: np.random.Generator, steps: int = 20, restarts: int = 2, h: float = 1e-5) -> np.ndarray:
    """Projected steepest descent on the margin with finite-difference gradients.

    Returns the perturbations (restarts, t, d) it ended on.
    """
    t, d = spec.t, x0.shape[1]
    eps = spec.epsilon
    delta = sample_perturbations(rng, spec, d, restarts)
    if eps == 0:
        return delta
    step = 2.5 * eps / steps
    eye = np.eye(t * d).reshape(t * d, t, d) * h
    for _ in range(steps):
        probes = np.concatenate([delta[:, None] + eye, delta[:, None] - eye], axis=1)
        flat = probes.reshape(-1, t, d)
        m = margins(model, apply(x0, spec, flat), label).reshape(restarts, 2, t * d)
        grad = ((m[:, 0] - m[:, 1]) / (2 * h)).reshape(restarts, t, d)
        if np.isinf(spec.p):
            move = -np.sign(grad)
        else:
            q = spec.dual_q
            mag = np.abs(grad)
            if spec.p == 1:
                # steepest l1 step: the coordinate with the largest gradient
                move = np.zeros_like(grad)
                idx = mag.reshape(restarts, t, d).argmax(axis=-1)
                np.put_along_axis(move, idx[..., None], -np.sign(np.take_along_axis(grad, idx[..., None], -1)), -1)
            else:
                norm = np.linalg.norm(grad, ord=q, axis=-1, keepdims=True)
                move = -grad / np.maximum(norm, 1e-300)
        delta = _project(delta + step * move, spec.p, eps)
    return delta


def violations(model: TransformerModel, x0: np.ndarray, spec: PerturbationSpec, label: int,
               rng: np.random.Generator, samples: int = 10_000, slack: float = 1e-6,
               with_attack: bool = True) -> int:
    """Number of probes (random, boundary, extreme, attacked) whose margin drops below -slack."""
    d = x0.shape[1]
    deltas = [
        sample_perturbations(rng, spec, d, samples),
        sample_perturbations(rng, spec, d, max(samples // 10, 1), surface=True),
        extreme_perturbations(rng, spec, d),
    ]
    if with_attack:
        deltas.append(attack(model, x0, spec, label, rng))
    bad = 0
    for chunk in deltas:
        for start in range(0, chunk.shape[0], 2048):
            m = margins(model, apply(x0, spec, chunk[start:start + 2048]), label)
            bad += int(np.sum(m < -slack))
    return bad
