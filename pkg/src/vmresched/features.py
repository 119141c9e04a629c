"""State encoding for the policy: 8 features per PM, 14 per VM, min-max normalised."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cluster import BOTH, ClusterState

PM_DIM = 8
VM_DIM = 14


def pm_features(state: ClusterState, x: int = 16) -> np.ndarray:
    """Per NUMA: free CPU, free memory, local fragment rate, fragment size (NUMA 0 block, then NUMA 1)."""
    fc = state.free_cpu.astype(np.float64)
    fm = state.free_mem.astype(np.float64)
    frag = (state.free_cpu % x).astype(np.float64)
    ratio = np.divide(frag, fc, out=np.zeros_like(frag), where=fc > 0)
    out = np.empty((state.n_pms, PM_DIM))
    for j in (0, 1):
        out[:, 4 * j:4 * j + 4] = np.stack([fc[:, j], fm[:, j], ratio[:, j], frag[:, j]], axis=1)
    return out


def vm_features(state: ClusterState, pm_feat: np.ndarray | None = None, x: int = 16) -> np.ndarray:
    """Per-NUMA requested CPU (2), memory (2), own fragment size (2), then the source PM's 8 features.

    Single-NUMA VMs fill the slot of the NUMA they occupy and leave zeros in the other.
    """
    if pm_feat is None:
        pm_feat = pm_features(state, x)
    m = state.n_vms
    w = state.vm_w
    s_cpu = (state.vm_cpu // w).astype(np.float64)
    s_mem = (state.vm_mem // w).astype(np.float64)
    s_frag = ((state.vm_cpu // w) % x).astype(np.float64)
    occ = np.zeros((m, 2))
    numa = state.vm_numa
    occ[numa == BOTH] = 1.0
    single = numa != BOTH
    occ[np.flatnonzero(single), numa[single]] = 1.0
    out = np.empty((m, VM_DIM))
    out[:, 0:2] = occ * s_cpu[:, None]
    out[:, 2:4] = occ * s_mem[:, None]
    out[:, 4:6] = occ * s_frag[:, None]
    out[:, 6:] = pm_feat[state.vm_pm]
    return out


@dataclass
class NormStats:
    vm_min: np.ndarray
    vm_max: np.ndarray
    pm_min: np.ndarray
    pm_max: np.ndarray

    @classmethod
    def fit(cls, states, x: int = 16) -> "NormStats":
        vms, pms = [], []
        for s in states:
            p = pm_features(s, x)
            pms.append(p)
            vms.append(vm_features(s, p, x))
        v = np.concatenate(vms)
        p = np.concatenate(pms)
        # a migration can empty a NUMA completely, so include full capacity in the range
        cap = np.concatenate([s.cap_cpu for s in states])
        capm = np.concatenate([s.cap_mem for s in states])
        pmax = p.max(axis=0)
        for j in (0, 1):
            pmax[4 * j] = max(pmax[4 * j], cap[:, j].max())
            pmax[4 * j + 1] = max(pmax[4 * j + 1], capm[:, j].max())
            pmax[4 * j + 3] = max(pmax[4 * j + 3], x - 1)
            pmax[4 * j + 2] = max(pmax[4 * j + 2], 1.0)
        vmax = v.max(axis=0)
        vmax[6:] = np.maximum(vmax[6:], pmax)
        pmin = np.minimum(p.min(axis=0), 0.0)
        vmin = np.minimum(v.min(axis=0), 0.0)
        return cls(vmin, vmax, pmin, pmax)

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(np.zeros(VM_DIM), np.ones(VM_DIM), np.zeros(PM_DIM), np.ones(PM_DIM))

    @staticmethod
    def _scale(a, lo, hi):
        span = hi - lo
        out = np.divide(a - lo, span, out=np.zeros_like(a), where=span > 0)
        return np.clip(out, 0.0, 1.0)

    def apply(self, vm_feat, pm_feat):
        return (self._scale(vm_feat, self.vm_min, self.vm_max),
                self._scale(pm_feat, self.pm_min, self.pm_max))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("vm_min", "vm_max", "pm_min", "pm_max")}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("vm_min", "vm_max", "pm_min", "pm_max")))


@dataclass
class FeatureTensor:
    vm: np.ndarray  # (M, 14) normalised
    pm: np.ndarray  # (N, 8) normalised
    tree_index: np.ndarray  # (M,) source PM of each VM


def encode_features(state: ClusterState, norm: NormStats | None = None, x: int = 16) -> FeatureTensor:
    p = pm_features(state, x)
    v = vm_features(state, p, x)
    if norm is not None:
        v, p = norm.apply(v, p)
    return FeatureTensor(v, p, state.vm_pm.copy())
