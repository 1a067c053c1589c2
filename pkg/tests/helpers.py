"""Shared test helpers: acceptance bookkeeping and finite-difference gradients."""

import numpy as np
import torch

ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def record_acceptance(number: int, ok: bool | None, detail: str):
    """``ok=None`` marks a soft gate that did not hold (reported as WARN)."""
    status = "PASS" if ok else ("WARN" if ok is None else "FAIL")
    ACCEPTANCE_RESULTS[number] = (status, detail)
    print(f"acceptance {number:2d}: {status} {detail}")


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def fd_grad(fn, x: torch.Tensor, eps: float = 1e-6, max_coords: int | None = None, seed: int = 0):
    """Central finite differences of scalar ``fn()`` w.r.t. tensor ``x`` (modified in place, restored)."""
    flat = x.data.view(-1)
    coords = np.arange(flat.numel())
    if max_coords is not None and flat.numel() > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(flat.numel(), max_coords, replace=False))
    out = np.zeros(len(coords))
    for j, i in enumerate(coords):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(fn())
        flat[i] = orig - eps
        lo = float(fn())
        flat[i] = orig
        out[j] = (hi - lo) / (2 * eps)
    return coords, out
