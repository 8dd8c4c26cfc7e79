"""Scale-invariant signal-to-distortion ratio, and its negative as a loss.

The estimate is projected onto the reference; the value is the dB ratio of
projection energy to residual energy.  The guard epsilon is applied
*relatively* (each energy floors the other at eps times its size), which
keeps the value finite for perfect or orthogonal estimates, caps it at
+/- 120 dB, and makes scale invariance exact for power-of-two scalings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["SisdrResult", "sisdr", "sisdr_loss", "sisdr_loss_grad", "EPS"]

EPS = 1e-12
_LN10 = float(np.log(10.0))


@dataclass
class SisdrResult:
    value_db: float
    target_energy: float
    projection_energy: float
    residual_energy: float

    @property
    def loss(self) -> float:
        return -self.value_db


def _energies(est: np.ndarray, ref: np.ndarray, zero_mean: bool) -> tuple[float, float, float]:
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: est {est.shape[0]} vs ref {ref.shape[0]}")
    if zero_mean:
        est = est - est.mean()
        ref = ref - ref.mean()
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise ValueError("reference signal is identically zero")
    dot = float(est @ ref)
    proj = (dot / ref_energy) * ref
    residual = est - proj
    return ref_energy, float(proj @ proj), float(residual @ residual)


def sisdr(est, ref, zero_mean: bool = False) -> SisdrResult:
    """SISDR of ``est`` against reference ``ref`` in dB.

    value = 10*log10((pe + eps*re) / (re + eps*pe)) where pe is the
    projection energy and re the residual energy: +120 dB when the
    estimate is a nonzero scaling of the reference, about -120 dB when it
    is orthogonal to it.
    """
    ref_energy, proj_energy, res_energy = _energies(est, ref, zero_mean)
    num = proj_energy + EPS * res_energy
    den = res_energy + EPS * proj_energy
    if num == 0.0 and den == 0.0:  # est identically zero
        ratio = EPS
    else:
        ratio = num / den
    return SisdrResult(
        value_db=10.0 * float(np.log10(ratio)),
        target_energy=ref_energy,
        projection_energy=proj_energy,
        residual_energy=res_energy,
    )


def sisdr_loss(est: Tensor, ref, zero_mean: bool = False) -> Tensor:
    """Negative SISDR as a differentiable graph node.

    ``est`` is a graph tensor, ``ref`` a fixed reference array.  Uses the
    same relative epsilon guard as :func:`sisdr`, so the loss is smooth and
    its gradient vanishes at a perfect reconstruction.
    """
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    if est.size != ref.size:
        raise ValueError(f"length mismatch: est {est.size} vs ref {ref.size}")
    est = est.reshape((ref.size,))
    ref_t = Tensor(ref)
    if zero_mean:
        est = est - est.mean()
        ref_t = Tensor(ref - ref.mean())
    ref_energy = float(ref_t.data @ ref_t.data)
    if ref_energy == 0.0:
        raise ValueError("reference signal is identically zero")
    dot = (est * ref_t).sum()
    proj_energy = (dot * dot) * (1.0 / ref_energy)
    residual = est - (dot * (1.0 / ref_energy)) * ref_t
    res_energy = (residual * residual).sum()
    num = proj_energy + EPS * res_energy
    den = res_energy + EPS * proj_energy
    return (10.0 / _LN10) * (ad.log(den) - ad.log(num))


def sisdr_loss_grad(est, ref, zero_mean: bool = False) -> np.ndarray:
    """Analytic gradient of the negative-SISDR loss with respect to est."""
    leaf = Tensor(np.asarray(est, dtype=np.float64).reshape(-1).copy(), requires_grad=True)
    ad.backward(sisdr_loss(leaf, ref, zero_mean=zero_mean))
    return leaf.grad
