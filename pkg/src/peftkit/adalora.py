"""AdaLoRA adapters: ``P diag(lambda) Q`` with a shrinking rank budget."""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .errors import ShapeError
from .linalg import DTYPE, frobenius_norm, matmul


@dataclass
class AdaLoraAdapter:
    p: np.ndarray  # d1 x r, orthonormal columns at init
    lam: np.ndarray  # r, zero at init
    q: np.ndarray  # r x d2, orthonormal rows at init
    gamma: float = 0.0

    kind = "adalora"

    def __post_init__(self):
        r = self.lam.shape[0]
        if self.p.shape[1] != r or self.q.shape[0] != r:
            raise ShapeError(f"P {self.p.shape}, lambda ({r},) and Q {self.q.shape} disagree on rank")

    @property
    def rank(self) -> int:
        return self.lam.shape[0]

    @property
    def effective_rank(self) -> int:
        return int(np.count_nonzero(self.lam))

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @property
    def k(self) -> int:
        return self.q.shape[1]

    @property
    def n_params(self) -> int:
        return self.p.size + self.lam.size + self.q.size

    def parameters(self) -> dict[str, np.ndarray]:
        return {"p": self.p, "lam": self.lam, "q": self.q}

    def forward_delta(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.n:
            raise ShapeError(f"input has {x.shape[1]} columns, adapter expects {self.n}")
        return matmul(matmul(x, self.p) * self.lam, self.q)

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> tuple[dict, np.ndarray]:
        if grad_out.shape != (x.shape[0], self.k):
            raise ShapeError(f"upstream gradient {grad_out.shape} != output shape {(x.shape[0], self.k)}")
        xp = matmul(x, self.p)
        g_scaled = matmul(grad_out, np.ascontiguousarray(self.q.T))
        g_xp = g_scaled * self.lam
        grads = {
            "p": matmul(np.ascontiguousarray(x.T), g_xp),
            "lam": np.sum(g_scaled * xp, axis=0),
            "q": matmul(np.ascontiguousarray((xp * self.lam).T), grad_out),
        }
        return grads, matmul(g_xp, np.ascontiguousarray(self.p.T))

    def astype(self, dtype) -> "AdaLoraAdapter":
        return AdaLoraAdapter(self.p.astype(dtype), self.lam.astype(dtype), self.q.astype(dtype), self.gamma)


def _orthonormal_columns(rng, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    # fix the sign ambiguity of QR so the draw is a deterministic function of the seed
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def init_adalora(d1: int, d2: int, r: int, gamma: float = 0.0, seed=0) -> AdaLoraAdapter:
    """Orthonormal ``P`` and ``Q`` from a seeded Gaussian QR, ``lambda = 0``."""
    if not 1 <= r <= min(d1, d2):
        raise ValueError(f"rank r={r} outside [1, min(d1, d2)={min(d1, d2)}]")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    rng = np.random.default_rng(seed)
    p = _orthonormal_columns(rng, d1, r).astype(DTYPE)
    q = _orthonormal_columns(rng, d2, r).T.astype(DTYPE)
    return AdaLoraAdapter(np.ascontiguousarray(p), np.zeros(r, dtype=DTYPE), np.ascontiguousarray(q), gamma)


def adalora_delta(ad: AdaLoraAdapter) -> np.ndarray:
    """``P diag(lambda) Q`` as the column-scaled ``P`` times ``Q``."""
    return matmul(ad.p * ad.lam, ad.q)


def _gram_residuals(ad: AdaLoraAdapter) -> tuple[np.ndarray, np.ndarray]:
    eye = np.eye(ad.rank, dtype=ad.p.dtype)
    return matmul(np.ascontiguousarray(ad.p.T), ad.p) - eye, matmul(ad.q, np.ascontiguousarray(ad.q.T)) - eye


def orthogonality_penalty(ad: AdaLoraAdapter) -> float:
    """``gamma (||P^T P - I||_F^2 + ||Q Q^T - I||_F^2)``."""
    if ad.gamma == 0:
        return 0.0
    rp, rq = _gram_residuals(ad)
    return ad.gamma * (frobenius_norm(rp) ** 2 + frobenius_norm(rq) ** 2)


def penalty_gradients(ad: AdaLoraAdapter) -> dict[str, np.ndarray]:
    """Analytic gradients of :func:`orthogonality_penalty` w.r.t. ``P`` and ``Q``."""
    if ad.gamma == 0:
        return {"p": np.zeros_like(ad.p), "q": np.zeros_like(ad.q)}
    rp, rq = _gram_residuals(ad)
    g = 4.0 * ad.gamma
    return {"p": (g * matmul(ad.p, rp)).astype(ad.p.dtype), "q": (g * matmul(rq, ad.q)).astype(ad.q.dtype)}


def regularized_loss(task_cost: float, ad: AdaLoraAdapter) -> float:
    return task_cost + orthogonality_penalty(ad)


def importance_scores(lambda_tilde) -> np.ndarray:
    """``|lambda|``: larger singular values matter more."""
    return np.abs(np.asarray(lambda_tilde))


@dataclass(frozen=True)
class BudgetSchedule:
    b_init: int
    b_final: int
    total_steps: int
    warmup_steps: int = 0

    def __post_init__(self):
        if self.b_final < 0 or self.b_final > self.b_init:
            raise ValueError(f"need 0 <= b_final <= b_init, got {self.b_final}, {self.b_init}")
        if self.total_steps < 0 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


def budget_at(schedule: BudgetSchedule, t: int) -> int:
    """Flat at ``b_init`` through warmup, then linear (rounded) down to ``b_final``."""
    if not 0 <= t <= schedule.total_steps:
        raise ValueError(f"step {t} outside [0, {schedule.total_steps}]")
    if t == schedule.total_steps:
        return schedule.b_final
    if t < schedule.warmup_steps:
        return schedule.b_init
    remaining = Fraction(schedule.total_steps - t, schedule.total_steps - schedule.warmup_steps)
    return schedule.b_final + round((schedule.b_init - schedule.b_final) * remaining)


def prune_lambda(lambda_tilde, scores, b_t: int) -> np.ndarray:
    """Keep the ``b_t`` highest-scoring entries (lower index wins ties), zero the rest."""
    lam = np.asarray(lambda_tilde)
    s = np.asarray(scores)
    if lam.shape != s.shape:
        raise ShapeError(f"lambda {lam.shape} and scores {s.shape} differ")
    if b_t < 0:
        raise ValueError(f"budget must be >= 0, got {b_t}")
    keep = np.argsort(-s, kind="stable")[:b_t]
    out = np.zeros_like(lam)
    out[keep] = lam[keep]
    return out


def lambda_sgd_step(ad: AdaLoraAdapter, grad_lambda, eta: float, schedule: BudgetSchedule, t: int) -> AdaLoraAdapter:
    """Gradient step on the diagonal, then prune to the step-``t`` budget."""
    if eta <= 0:
        raise ValueError(f"learning rate must be positive, got {eta}")
    g = np.asarray(grad_lambda, dtype=ad.lam.dtype)
    tilde = (ad.lam - ad.lam.dtype.type(eta) * g).astype(ad.lam.dtype)
    pruned = prune_lambda(tilde, importance_scores(tilde), budget_at(schedule, t))
    return replace(ad, lam=pruned)
