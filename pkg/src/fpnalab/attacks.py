"""Attack suite: input-space perturbations, the learnable-permutation
worst-case search, and the simulated external-workload attack.

The permutation attack optimizes in exact arithmetic over doubly-stochastic
relaxations (where hard permutations change nothing but the relaxation
provides gradient signal), then periodically hardens to true permutations
and verifies candidate flips in the emulated reduced-precision path.  A
``flipped`` report always carries a witness that re-verifies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .classifiers import (
    InjectionPoint,
    ModelKind,
    forward_exact,
    forward_ordered,
    loss_and_grads,
    predict_class,
)
from .orderedfp import PrecisionMode
from .permkit import harden
from .schedsim import WorkloadSpec, default_occupancy, feed_model_order, \
    simulate_reduction


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.0
    steps: int = 1
    step_size: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass(frozen=True)
class LpConfig:
    opt_steps: int = 1000
    temperature_init: float = 1.0
    temperature_decay: float = 0.995
    temperature_min: float = 1e-3
    sinkhorn_iters: int = 30
    noise_scale: float = 1.0
    learning_rate: float = 0.1
    harden_every: int = 25
    verify_mode: PrecisionMode = PrecisionMode.BINARY32

    def __post_init__(self):
        if min(self.opt_steps, self.sinkhorn_iters, self.harden_every) < 1:
            raise ValueError("opt_steps, sinkhorn_iters, harden_every must be >= 1")
        if self.temperature_init <= 0 or self.learning_rate <= 0:
            raise ValueError("temperature_init and learning_rate must be positive")
        if not 0.0 < self.temperature_decay <= 1.0:
            raise ValueError("temperature_decay must lie in (0, 1]")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")


@dataclass(frozen=True)
class EwaConfig:
    k_range: tuple = (1000, 10000)
    budget: int = 100
    trials_per_eval: int = 200
    target_class: Optional[int] = None  # None: second-most-probable
    success_threshold: float = 0.75
    n_blocks: int = 64
    verify_mode: PrecisionMode = PrecisionMode.BINARY32

    def __post_init__(self):
        lo, hi = self.k_range
        if lo > hi:
            raise ValueError("k_range must be non-empty")
        if self.budget < 2:
            raise ValueError("budget must be >= 2")
        if not 0.0 < self.success_threshold <= 1.0:
            raise ValueError("success_threshold must lie in (0, 1]")


@dataclass
class AttackReport:
    attack: str
    flipped: bool
    witness: object = None
    flip_rate: Optional[float] = None
    iterations_used: int = 0
    seed: Optional[int] = None
    details: dict = field(default_factory=dict)

    def to_json(self, **extra):
        payload = {
            "attack": self.attack,
            "flipped": bool(self.flipped),
            "flip_rate": self.flip_rate,
            "iterations_used": self.iterations_used,
            "seed": self.seed,
            "witness": _jsonable(self.witness),
        }
        payload.update(extra)
        return json.dumps(payload)


def _jsonable(obj):
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (list, tuple)):
        return [_jsonable(o) for o in obj]
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    return str(obj)


# ---------------------------------------------------------------------------
# input-space attacks
# ---------------------------------------------------------------------------


def _restrict_rows(g, feature_rows):
    """Zero the gradient outside the attacker-controlled feature rows."""
    if feature_rows is None:
        return g
    masked = np.zeros_like(g)
    masked[feature_rows] = g[feature_rows]
    return masked


def _input_gradient(model, x, label, graph=None, node=None, feature_rows=None):
    out = loss_and_grads(model, x, label, graph=graph, node=node)
    return _restrict_rows(out["grad_input"], feature_rows)


def fgsm(model, x, label, cfg, graph=None, node=None, feature_rows=None):
    """x + epsilon * sign(grad of the loss); sign(0) = 0.

    ``feature_rows`` limits the perturbation to the given rows of a feature
    matrix (e.g. the attacked node's own features).
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.epsilon == 0:
        return x.copy()
    g = _input_gradient(model, x, label, graph=graph, node=node,
                        feature_rows=feature_rows)
    return x + cfg.epsilon * np.sign(g)


def pgd(model, x, label, cfg, graph=None, node=None, feature_rows=None):
    """Iterated sign-gradient steps projected onto the epsilon-ball."""
    x0 = np.asarray(x, dtype=np.float64)
    if cfg.epsilon == 0:
        return x0.copy()
    x_adv = x0.copy()
    for _ in range(cfg.steps):
        g = _input_gradient(model, x_adv, label, graph=graph, node=node,
                            feature_rows=feature_rows)
        x_adv = x_adv + cfg.step_size * np.sign(g)
        x_adv = np.clip(x_adv, x0 - cfg.epsilon, x0 + cfg.epsilon)
    return x_adv


def random_attack(x, cfg, rng):
    """Uniform noise baseline: x + epsilon * U[-1, 1]^d."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.epsilon == 0:
        return x.copy()
    return x + cfg.epsilon * rng.uniform(-1.0, 1.0, size=x.shape)


def _margin_and_grad(model, x, graph=None, node=None):
    x_t = torch.as_tensor(np.asarray(x, dtype=np.float64)).clone().requires_grad_(True)
    from .classifiers import _forward_torch
    logits = _forward_torch(model, x_t, None, graph)
    if node is not None:
        logits = logits[node]
    if logits.ndim > 1:
        logits = logits[0]
    top2 = torch.topk(logits, 2).values
    f = top2[0] - top2[1]
    (grad,) = torch.autograd.grad(f, x_t)
    return float(f.detach()), grad.numpy()


def targeted_margin(model, x, cfg, graph=None, node=None, feature_rows=None):
    """Margin-minimizing attack within the epsilon-ball; returns the iterate
    with the smallest observed margin.

    Because the margin is piecewise linear in the input, each step moves along
    the negative margin gradient by f / ||g||^2 — the exact distance to the
    boundary within the current linear region — capped at ``step_size``.
    Inputs the ball can reach therefore land essentially on the boundary,
    where accumulation order decides the class.
    """
    x0 = np.asarray(x, dtype=np.float64)
    best_f, _ = _margin_and_grad(model, x0, graph=graph, node=node)
    best_x = x0.copy()
    if cfg.epsilon == 0:
        return best_x
    x_adv = x0.copy()
    for _ in range(cfg.steps):
        f, g = _margin_and_grad(model, x_adv, graph=graph, node=node)
        g = _restrict_rows(g, feature_rows)
        gsq = float(np.sum(g * g))
        if gsq == 0.0:
            break
        alpha = min(cfg.step_size, f / gsq) if f > 0 else cfg.step_size
        x_adv = np.clip(x_adv - alpha * g, x0 - cfg.epsilon, x0 + cfg.epsilon)
        f_new, _ = _margin_and_grad(model, x_adv, graph=graph, node=node)
        if f_new < best_f:
            best_f, best_x = f_new, x_adv.copy()
    return best_x


# ---------------------------------------------------------------------------
# learnable-permutation attack
# ---------------------------------------------------------------------------


def _sinkhorn_torch(log_alpha, iters):
    for _ in range(iters):
        log_alpha = log_alpha - torch.logsumexp(log_alpha, dim=1, keepdim=True)
        log_alpha = log_alpha - torch.logsumexp(log_alpha, dim=0, keepdim=True)
    return torch.exp(log_alpha)


def _verify_perms(model, x, layer_perms, mode, label, graph=None, node=None):
    injections = [InjectionPoint(l, p) for l, p in layer_perms]
    logits = forward_ordered(model, x, injections, mode, graph=graph)
    if node is not None:
        logits = logits[node]
        lab = int(np.asarray(label).reshape(-1)[node])
    else:
        lab = int(label)
    return predict_class(logits) != lab, logits


def lp_attack(model, x, label, cfg, rng, graph=None, node=None, layers=None):
    """Search permutation space for a verified reduced-precision flip.

    Per step: Gumbel-perturbed logits pass through a temperature-scaled
    Sinkhorn relaxation, the exact-path loss is ascended with respect to the
    permutation logits only, and every ``harden_every`` steps the soft
    permutations are projected to hard ones and checked in the emulated
    verify mode.  Failure to flip is a valid result.

    ``layers`` restricts the search to a subset of injection points (all by
    default); unlisted reductions keep the canonical order.
    """
    lengths = model.injection_lengths(graph)
    if not lengths:
        raise ValueError("model exposes no injection points")
    if layers is None:
        layers = list(range(len(lengths)))
    else:
        layers = [int(l) for l in layers]
        if any(l < 0 or l >= len(lengths) for l in layers):
            raise ValueError("layer index out of range for this model")
    params = [torch.zeros((lengths[l], lengths[l]), dtype=torch.float64,
                          requires_grad=True) for l in layers]
    temp = cfg.temperature_init

    # the identity ordering is the deterministic baseline; an input already
    # misclassified there needs no search
    flipped, _ = _verify_perms(model, x, [], cfg.verify_mode, label,
                               graph=graph, node=node)
    if flipped:
        return AttackReport(attack="lp", flipped=True,
                            witness=[list(range(lengths[l])) for l in layers],
                            flip_rate=None, iterations_used=0,
                            details={"layers": layers})

    from .classifiers import _forward_torch
    x_t = torch.as_tensor(np.asarray(
        x.features if hasattr(x, "features") else x, dtype=np.float64))
    labels_t = torch.as_tensor(np.asarray(label, dtype=np.int64))

    for step in range(1, cfg.opt_steps + 1):
        softs = []
        for p in params:
            noise = rng.gumbel(size=tuple(p.shape)) * cfg.noise_scale
            log_alpha = (p + torch.as_tensor(noise)) / temp
            softs.append(_sinkhorn_torch(log_alpha, cfg.sinkhorn_iters))
        full = [None] * len(lengths)
        for l, s in zip(layers, softs):
            full[l] = s
        logits = _forward_torch(model, x_t, full, graph)
        if model.kind is ModelKind.GNN and node is not None:
            loss = torch.nn.functional.cross_entropy(
                logits[node][None, :], labels_t.reshape(-1)[node][None])
        else:
            batched = logits if logits.ndim == 2 else logits[None, :]
            loss = torch.nn.functional.cross_entropy(
                batched, labels_t.reshape(-1) if batched.shape[0] > 1
                else labels_t.reshape(1))
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        with torch.no_grad():
            for p, g in zip(params, grads):
                if g is None:
                    continue
                scale = g.abs().max()
                if scale > 0:
                    # normalized step plus a trust region keeps the logits on
                    # the Gumbel noise scale, so hardening stays exploratory
                    # even when the loss surface is steep
                    p += cfg.learning_rate * g / scale
                    p.clamp_(-3.0 * cfg.noise_scale, 3.0 * cfg.noise_scale)
        temp = max(cfg.temperature_min, temp * cfg.temperature_decay)

        if step % cfg.harden_every == 0 or step == cfg.opt_steps:
            hard = [harden(s.detach().numpy()) for s in softs]
            flipped, _ = _verify_perms(model, x, list(zip(layers, hard)),
                                       cfg.verify_mode, label,
                                       graph=graph, node=node)
            if flipped:
                return AttackReport(attack="lp", flipped=True,
                                    witness=[h.tolist() for h in hard],
                                    flip_rate=None, iterations_used=step,
                                    details={"layers": layers})
    return AttackReport(attack="lp", flipped=False, witness=None,
                        iterations_used=cfg.opt_steps,
                        details={"layers": layers})


# ---------------------------------------------------------------------------
# external-workload attack
# ---------------------------------------------------------------------------


def default_workload_factory(k, burst_scale=1.0):
    """Workload whose stolen capacity and stall rate both grow with k."""
    return WorkloadSpec(matrix_size=int(k), occupancy_fn=default_occupancy,
                        burst_rate=burst_scale * k / 10000.0)


def peaked_workload_factory(k_star, width=3000.0, peak_occupancy=0.98,
                            burst_scale=1.0):
    """Factory whose stolen capacity peaks at ``k_star``.

    Near the peak the reduction is squeezed onto very few parallel units and
    executes close to serial (identity) order, so on inputs whose serialized
    outcome is already misclassified the flip probability peaks at ``k_star``;
    away from it, order scrambling dilutes the effect.
    """
    if not 0.0 < peak_occupancy < 1.0:
        raise ValueError("peak_occupancy must lie in (0, 1)")
    if width <= 0:
        raise ValueError("width must be positive")

    def occupancy(k):
        return peak_occupancy * math.exp(-((k - k_star) / width) ** 2)

    def factory(k):
        return WorkloadSpec(matrix_size=int(k), occupancy_fn=occupancy,
                            burst_rate=burst_scale * k / 10000.0)

    return factory


def blackbox_optimize(objective, k_range, budget, rng):
    """Surrogate-guided integer search: a coarse deterministic sweep followed
    by seeded local refinement around the incumbent.

    Never evaluates outside ``k_range``; returns the best evaluated point.
    """
    lo, hi = int(k_range[0]), int(k_range[1])
    if lo > hi:
        raise ValueError("empty k range")
    if budget < 2:
        raise ValueError("budget must be >= 2")
    evaluated = {}

    def evaluate(k):
        k = int(np.clip(k, lo, hi))
        if k not in evaluated:
            evaluated[k] = float(objective(k))
        return k

    n_coarse = max(2, budget // 3)
    for k in np.unique(np.linspace(lo, hi, n_coarse).round().astype(int)):
        evaluate(int(k))

    sigma = max(1.0, (hi - lo) / 4.0)
    shrink = 0.95
    while len(evaluated) < budget and len(evaluated) < hi - lo + 1:
        best_k = min(evaluated, key=lambda k: (-evaluated[k], k))
        k = int(round(rng.normal(best_k, sigma)))
        k = int(np.clip(k, lo, hi))
        if k in evaluated:
            # nearest unevaluated integer
            for delta in range(1, hi - lo + 1):
                if k + delta <= hi and k + delta not in evaluated:
                    k = k + delta
                    break
                if k - delta >= lo and k - delta not in evaluated:
                    k = k - delta
                    break
            else:
                break
        evaluate(k)
        sigma = max(1.0, sigma * shrink)

    best_k = min(evaluated, key=lambda k: (-evaluated[k], k))
    return best_k, evaluated[best_k], dict(evaluated)


def _eval_seed(base_seed, k, trial):
    return (int(base_seed) * 1_000_003 + int(k)) * 1_000_003 + int(trial)


def ewa_attack(model, x, device, cfg, rng, graph=None, node=None,
               workload_factory=default_workload_factory, label=None):
    """Black-box search for the external-workload size that skews simulated
    reduction orderings toward a target class."""
    lengths = model.injection_lengths(graph)
    if not lengths:
        raise ValueError("model exposes no injection points")
    det_logits = forward_exact(model, x, graph=graph)
    if node is not None:
        det_logits = det_logits[node]
    if det_logits.ndim > 1:
        det_logits = det_logits[0]
    if cfg.target_class is None:
        order = np.argsort(det_logits)[::-1]
        target = int(order[1])
    else:
        target = int(cfg.target_class)

    base_seed = int(rng.integers(0, 2 ** 31 - 1))

    def flip_rate_at(k, record_witness=False):
        flips = 0
        witness = None
        for t in range(cfg.trials_per_eval):
            trace = simulate_reduction(device, workload_factory(k),
                                       cfg.n_blocks, _eval_seed(base_seed, k, t))
            perms = [feed_model_order(trace, d) for d in lengths]
            injections = [InjectionPoint(l, p) for l, p in enumerate(perms)]
            logits = forward_ordered(model, x, injections, cfg.verify_mode,
                                     graph=graph)
            if node is not None:
                logits = logits[node]
            if logits.ndim > 1:
                logits = logits[0]
            if predict_class(logits) == target:
                flips += 1
                if record_witness and witness is None:
                    witness = [p.tolist() for p in perms]
        rate = flips / cfg.trials_per_eval
        return (rate, witness) if record_witness else rate

    best_k, best_rate, log = blackbox_optimize(flip_rate_at, cfg.k_range,
                                               cfg.budget, rng)
    _, witness = flip_rate_at(best_k, record_witness=True)
    return AttackReport(
        attack="ewa",
        flipped=best_rate >= cfg.success_threshold,
        witness={"k": int(best_k), "orders": witness},
        flip_rate=best_rate,
        iterations_used=len(log),
        seed=base_seed,
        details={"target_class": target, "evaluations": log},
    )
