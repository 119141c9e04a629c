"""Two-stage attention policy: VM actor, PM actor and critic.

Each block runs three attention stages over VM and PM embeddings:

1. local attention inside each PM tree (a PM plus the VMs it hosts),
2. VM-VM and PM-PM self-attention,
3. VM-to-PM cross-attention, whose head-averaged pre-softmax scores are
   handed to the PM actor and added to its destination logits.

There are no positional encodings, so the actor outputs are equivariant and
the critic invariant under VM/PM reordering.
"""
from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .cluster import ClusterState, MigrationAction
from .features import PM_DIM, VM_DIM, FeatureTensor, NormStats, encode_features
from .simulator import pair_mask

CHECKPOINT_VERSION = 1


class NoLegalAction(RuntimeError):
    pass


@dataclass
class PolicyConfig:
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    d_ff: int = 128
    critic_hidden: int = 128
    x: int = 16


# --- batching ---------------------------------------------------------------------------

@dataclass
class Batch:
    vm: torch.Tensor  # (B, M, 14)
    pm: torch.Tensor  # (B, N, 8)
    vm_pm: torch.Tensor  # (B, M) long
    vm_valid: torch.Tensor  # (B, M) bool
    pm_valid: torch.Tensor  # (B, N) bool
    # single-state batches with repeated VM tokens: (unique-token batch, inverse map, log multiplicity)
    dedup: tuple | None = None

    def __post_init__(self):
        self.all_vm_valid = bool(self.vm_valid.all())
        self.all_pm_valid = bool(self.pm_valid.all())

    @property
    def shape(self):
        return self.vm.shape[0], self.vm.shape[1], self.pm.shape[1]

    @cached_property
    def trees(self) -> list:
        """[(idx, mask)] per size bucket; idx rows point into the flattened (VM, PM) token table.

        Each tree is a PM token followed by its hosted VMs; trees are bucketed
        by padded size so padding stays small.
        """
        b, m, n = self.shape
        width = m + n
        pad_row = b * width  # extra all-zero row
        members = [[i * width + m + p] for i in range(b) for p in range(n)]
        vm_pm = self.vm_pm.numpy()
        valid = self.vm_valid.numpy()
        for i, k in zip(*np.nonzero(valid)):
            members[i * n + int(vm_pm[i, k])].append(i * width + int(k))
        buckets = {}
        for mem in members:
            size = 1 << max(len(mem) - 1, 0).bit_length()
            buckets.setdefault(size, []).append(mem)
        trees = []
        for size in sorted(buckets):
            group = buckets[size]
            idx = np.full((len(group), size), pad_row, dtype=np.int64)
            mask = np.zeros((len(group), size), dtype=bool)
            for r, mem in enumerate(group):
                idx[r, :len(mem)] = mem
                mask[r, :len(mem)] = True
            trees.append((torch.as_tensor(idx), torch.as_tensor(mask)))
        return trees


def make_batch(feats: Sequence[FeatureTensor], dtype=torch.float32, dedup: bool = True) -> Batch:
    """Pad and stack states.

    VMs with identical features on the same PM keep identical embeddings
    through every stage, so for a single state the trunk runs on unique VM
    tokens, with a log-multiplicity bias on their attention keys (exact, and
    cheaper), and expands the result afterwards.
    """
    b = len(feats)
    m = max(len(f.vm) for f in feats)
    n = max(len(f.pm) for f in feats)
    vm = np.zeros((b, m, VM_DIM))
    pm = np.zeros((b, n, PM_DIM))
    vm_pm = np.zeros((b, m), dtype=np.int64)
    vm_valid = np.zeros((b, m), dtype=bool)
    pm_valid = np.zeros((b, n), dtype=bool)
    for i, f in enumerate(feats):
        mi, ni = len(f.vm), len(f.pm)
        vm[i, :mi] = f.vm
        pm[i, :ni] = f.pm
        vm_pm[i, :mi] = f.tree_index
        vm_valid[i, :mi] = True
        pm_valid[i, :ni] = True
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)
    groups = None
    if dedup and b == 1 and m > 0:
        key = np.ascontiguousarray(np.concatenate([feats[0].vm, feats[0].tree_index[:, None]], axis=1))
        first: dict = {}
        inv = np.array([first.setdefault(row.tobytes(), len(first)) for row in key], dtype=np.int64)
        if len(first) < m:
            rep = np.unique(inv, return_index=True)[1]  # first occurrence of each token
            counts = np.bincount(inv)
            inner = Batch(as_t(vm[:, rep]), as_t(pm), torch.as_tensor(vm_pm[:, rep]),
                          torch.ones(1, len(rep), dtype=torch.bool), torch.as_tensor(pm_valid))
            groups = (inner, torch.as_tensor(inv), torch.as_tensor(np.log(counts), dtype=dtype))
    return Batch(as_t(vm), as_t(pm), torch.as_tensor(vm_pm), torch.as_tensor(vm_valid),
                 torch.as_tensor(pm_valid), groups)


# --- layers -----------------------------------------------------------------------------

class Attention(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        self.h = heads
        self.dh = d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def _split(self, t):
        b, l, _ = t.shape
        return t.view(b, l, self.h, self.dh).transpose(1, 2)

    def forward(self, q_in, kv_in, mask=None, want_scores=False, manual=False):
        """``mask`` broadcasts to (B, heads, Lq, Lk): boolean (True means attend) or an additive bias.

        ``want_scores`` also returns the head-averaged pre-softmax scores;
        ``manual`` computes the softmax explicitly instead of the fused kernel.
        """
        qf, kf = self.q(q_in), self.k(kv_in)
        q, k, v = self._split(qf), self._split(kf), self._split(self.v(kv_in))
        b, _, lq, _ = q.shape
        scale = 1.0 / math.sqrt(self.dh)
        if manual:
            s = (q * scale) @ k.transpose(-1, -2)
            if mask is None:
                s_masked = s
            elif mask.dtype == torch.bool:
                s_masked = s.masked_fill(~mask, float("-inf"))
            else:
                s_masked = s + mask
            out = torch.softmax(s_masked, dim=-1) @ v
        else:
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        # the mean over heads of per-head dot products is one full-width dot product
        scores = (qf @ kf.transpose(-1, -2)) * (scale / self.h) if want_scores else None
        out = out.transpose(1, 2).reshape(b, lq, self.h * self.dh)
        return self.o(out), scores


class FeedForward(nn.Module):
    def __init__(self, d, d_ff):
        super().__init__()
        self.a = nn.Linear(d, d_ff)
        self.b = nn.Linear(d_ff, d)

    def forward(self, x):
        return self.b(F.gelu(self.a(x)))


def _embedder(d_in, d):
    return nn.Sequential(nn.Linear(d_in, d), nn.GELU(), nn.Linear(d, d))


class Block(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        d, h = cfg.d_model, cfg.n_heads
        self.tree = Attention(d, h)
        self.ln_tree = nn.LayerNorm(d)
        self.vm_self = Attention(d, h)
        self.pm_self = Attention(d, h)
        self.ln_vm_self = nn.LayerNorm(d)
        self.ln_pm_self = nn.LayerNorm(d)
        self.cross = Attention(d, h)
        self.ln_cross = nn.LayerNorm(d)
        self.ff_vm = FeedForward(d, cfg.d_ff)
        self.ff_pm = FeedForward(d, cfg.d_ff)
        self.ln_ff_vm = nn.LayerNorm(d)
        self.ln_ff_pm = nn.LayerNorm(d)

    def local_sparse(self, vm, pm, batch: Batch, key_bias=None):
        """Stage 1 restricted to PM trees; returns attention outputs for VM and PM tokens.

        ``key_bias`` (one value per VM token) is added to scores against VM keys.
        """
        b, m, n = batch.shape
        d = vm.shape[-1]
        att = self.tree
        flat = torch.cat([vm, pm], dim=1).reshape(b * (m + n), d)
        pad = flat.new_zeros(1, d)
        q = torch.cat([att.q(flat), pad])
        k = torch.cat([att.k(flat), pad])
        v = torch.cat([att.v(flat), pad])
        bias = None
        if key_bias is not None:
            bias = torch.cat([key_bias.reshape(b, m), key_bias.new_zeros(b, n)], dim=1).reshape(-1)
            bias = torch.cat([bias, key_bias.new_zeros(1)])
        out = flat.new_zeros(b * (m + n) + 1, d)
        scale = 1.0 / math.sqrt(att.dh)
        for idx, mask in batch.trees:
            t, size = idx.shape
            split = lambda a: a[idx].view(t, size, att.h, att.dh).transpose(1, 2)
            s = (split(q) * scale) @ split(k).transpose(-1, -2)
            if bias is not None:
                s = s + bias[idx][:, None, None, :]
            s = s.masked_fill(~mask[:, None, None, :], float("-inf"))
            o = (torch.softmax(s, dim=-1) @ split(v)).transpose(1, 2).reshape(t, size, d)
            out = out.index_copy(0, idx[mask], o[mask])
        out = out[:-1]
        # tokens outside every tree (padded VMs) receive no attention output
        member = torch.zeros(b * (m + n), dtype=torch.bool)
        for idx, mask in batch.trees:
            member[idx[mask]] = True
        out = torch.where(member[:, None], att.o(out), out).view(b, m + n, d)
        return out[:, :m], out[:, m:]

    def local_dense(self, vm, pm, batch: Batch, key_bias=None):
        """Stage 1 as full attention with off-tree pairs masked to -inf (reference path)."""
        b, m, n = batch.shape
        tok = torch.cat([vm, pm], dim=1)
        tree = torch.cat([batch.vm_pm, torch.arange(n).expand(b, n)], dim=1)
        valid = torch.cat([batch.vm_valid, torch.ones_like(batch.pm_valid)], dim=1)
        mask = (tree[:, :, None] == tree[:, None, :]) & valid[:, None, :]
        mask = (mask | torch.eye(m + n, dtype=torch.bool)[None])[:, None]
        if key_bias is not None:
            bias = torch.cat([key_bias.reshape(b, m), key_bias.new_zeros(b, n)], dim=1)
            mask = torch.where(mask, bias[:, None, None, :], float("-inf"))
        out, _ = self.tree(tok, tok, mask, manual=True)
        out = out * valid[..., None]
        return out[:, :m], out[:, m:]

    def forward(self, vm, pm, batch: Batch, want_scores=False, dense_local=False, key_bias=None):
        """``key_bias`` is the log multiplicity of each VM token when ``batch`` holds unique tokens."""
        lv, lp = (self.local_dense if dense_local else self.local_sparse)(vm, pm, batch, key_bias)
        vm = self.ln_tree(vm + lv)
        pm = self.ln_tree(pm + lp)
        # no mask when nothing is padded: lets the fused kernel take its fast path
        vm_key = None if batch.all_vm_valid else batch.vm_valid[:, None, None, :]
        pm_key = None if batch.all_pm_valid else batch.pm_valid[:, None, None, :]
        if key_bias is not None:
            att = self.vm_self(vm, vm, key_bias[None, None, None, :])[0]
        else:
            att = self.vm_self(vm, vm, vm_key)[0]
        vm = self.ln_vm_self(vm + att)
        pm = self.ln_pm_self(pm + self.pm_self(pm, pm, pm_key)[0])
        c, scores = self.cross(vm, pm, pm_key, want_scores=want_scores)
        vm = self.ln_cross(vm + c)
        vm = self.ln_ff_vm(vm + self.ff_vm(vm))
        pm = self.ln_ff_pm(pm + self.ff_pm(pm))
        return vm, pm, scores


class PmActor(nn.Module):
    """Encoder over the selected VM token, decoder over PM tokens."""

    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        d, h = cfg.d_model, cfg.n_heads
        self.enc_attn = Attention(d, h)
        self.ln_enc = nn.LayerNorm(d)
        self.enc_ff = FeedForward(d, cfg.d_ff)
        self.ln_enc_ff = nn.LayerNorm(d)
        self.dec_self = Attention(d, h)
        self.ln_dec_self = nn.LayerNorm(d)
        self.dec_cross = Attention(d, h)
        self.ln_dec_cross = nn.LayerNorm(d)
        self.dec_ff = FeedForward(d, cfg.d_ff)
        self.ln_dec_ff = nn.LayerNorm(d)
        self.out = nn.Linear(d, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, v_sel, pm, pm_valid):
        e = v_sel[:, None, :]
        e = self.ln_enc(e + self.enc_attn(e, e)[0])
        e = self.ln_enc_ff(e + self.enc_ff(e))
        p = self.ln_dec_self(pm + self.dec_self(pm, pm, pm_valid[:, None, None, :])[0])
        p = self.ln_dec_cross(p + self.dec_cross(p, e)[0])
        p = self.ln_dec_ff(p + self.dec_ff(p))
        return self.out(p).squeeze(-1)


class TwoStagePolicy(nn.Module):
    def __init__(self, cfg: PolicyConfig | None = None, norm: NormStats | None = None):
        super().__init__()
        self.cfg = cfg or PolicyConfig()
        self.norm = norm or NormStats.identity()
        d = self.cfg.d_model
        self.vm_embed = _embedder(VM_DIM, d)
        self.pm_embed = _embedder(PM_DIM, d)
        self.blocks = nn.ModuleList(Block(self.cfg) for _ in range(self.cfg.n_blocks))
        self.vm_out = nn.Linear(d, 1)
        nn.init.zeros_(self.vm_out.weight)
        nn.init.zeros_(self.vm_out.bias)
        self.pm_actor = PmActor(self.cfg)
        self.critic = nn.Sequential(nn.Linear(2 * d, self.cfg.critic_hidden), nn.Tanh(),
                                    nn.Linear(self.cfg.critic_hidden, 1))

    @property
    def dtype(self):
        return self.vm_out.weight.dtype

    def encode(self, state: ClusterState) -> FeatureTensor:
        return encode_features(state, self.norm, self.cfg.x)

    def trunk(self, batch: Batch, dense_local=False):
        """Final VM and PM embeddings, VM logits (unmasked) and last-block cross scores."""
        inner, inv, key_bias = batch.dedup if batch.dedup is not None else (batch, None, None)
        vm = self.vm_embed(inner.vm)
        pm = self.pm_embed(inner.pm)
        scores = None
        for i, blk in enumerate(self.blocks):
            vm, pm, s = blk(vm, pm, inner, want_scores=i == len(self.blocks) - 1,
                            dense_local=dense_local, key_bias=key_bias)
            if s is not None:
                scores = s
        logits = self.vm_out(vm).squeeze(-1)
        if inv is not None:
            vm, logits, scores = vm[:, inv], logits[:, inv], scores[:, inv]
        return vm, pm, logits, scores

    def value(self, vm, pm, batch: Batch):
        vw = batch.vm_valid[..., None].to(vm.dtype)
        pw = batch.pm_valid[..., None].to(pm.dtype)
        pooled = torch.cat([(vm * vw).sum(1) / vw.sum(1).clamp(min=1),
                            (pm * pw).sum(1) / pw.sum(1).clamp(min=1)], dim=-1)
        return self.critic(pooled).squeeze(-1)

    def pm_logits(self, sel, vm, pm, scores, batch: Batch):
        rows = torch.arange(vm.shape[0])
        return self.pm_actor(vm[rows, sel], pm, batch.pm_valid) + scores[rows, sel]

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def masked_log_softmax(logits, mask):
    return torch.log_softmax(logits.masked_fill(~mask, float("-inf")), dim=-1)


# --- single-state API -------------------------------------------------------------------

def _single_batch(f: FeatureTensor | Batch, policy: TwoStagePolicy) -> Batch:
    return f if isinstance(f, Batch) else make_batch([f], policy.dtype)


def vm_actor_forward(f: FeatureTensor | Batch, policy: TwoStagePolicy, vm_mask):
    """(vm_probs, vm_embeds, pm_embeds, cross_scores) for one state; masked VMs get probability 0."""
    batch = _single_batch(f, policy)
    mask = torch.as_tensor(np.asarray(vm_mask), dtype=torch.bool).reshape(1, -1)
    if not mask.any():
        raise NoLegalAction("no VM has a legal destination")
    vm, pm, logits, scores = policy.trunk(batch)
    probs = masked_log_softmax(logits, mask).exp()
    return probs[0], vm, pm, scores


def pm_actor_forward(selected_vm: int, vm_embeds, pm_embeds, cross_scores, policy: TwoStagePolicy,
                     pm_mask, batch: Batch | None = None):
    """Destination probabilities for ``selected_vm``; illegal PMs get probability exactly 0."""
    mask = torch.as_tensor(np.asarray(pm_mask), dtype=torch.bool).reshape(1, -1)
    if not mask.any():
        raise NoLegalAction(f"VM {selected_vm} has no legal destination")
    pm_valid = batch.pm_valid if batch is not None else torch.ones_like(mask)
    rows = torch.zeros(1, dtype=torch.long)
    sel = torch.tensor([selected_vm])
    logits = policy.pm_actor(vm_embeds[rows, sel], pm_embeds, pm_valid) + cross_scores[rows, sel]
    return masked_log_softmax(logits, mask).exp()[0]


def critic_forward(vm_embeds, pm_embeds, policy: TwoStagePolicy, batch: Batch | None = None):
    if batch is None:
        b, m, _ = vm_embeds.shape
        n = pm_embeds.shape[1]
        batch = Batch(None, None, None, torch.ones(b, m, dtype=torch.bool),
                      torch.ones(b, n, dtype=torch.bool))
    return policy.value(vm_embeds, pm_embeds, batch)[0]


def _pick(p: np.ndarray, rng: np.random.Generator, greedy: bool) -> int:
    if greedy:
        return int(np.argmax(p))
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(p) - 1))


def sample_two_stage_action(state: ClusterState, policy: TwoStagePolicy, rng: np.random.Generator,
                            greedy: bool = False, vm_filter: Callable | None = None,
                            pm_filter: Callable | None = None):
    """Pick a VM, then a destination PM among its legal ones.

    Returns (MigrationAction, log_prob, value); log_prob is the log of the
    probabilities actually sampled from (after any filters).
    """
    legal = pair_mask(state)
    vm_mask = legal.any(axis=1)
    if not vm_mask.any():
        raise NoLegalAction("no legal migration")
    with torch.no_grad():
        batch = make_batch([policy.encode(state)], policy.dtype)
        probs, vm, pm, scores = vm_actor_forward(batch, policy, vm_mask)
        value = float(policy.value(vm, pm, batch)[0])
        p = probs.double().numpy()
        if vm_filter is not None:
            p = vm_filter(p)
        k = _pick(p, rng, greedy)
        pp = pm_actor_forward(k, vm, pm, scores, policy, legal[k], batch).double().numpy()
        if pm_filter is not None:
            pp = pm_filter(pp)
        i = _pick(pp, rng, greedy)
    return MigrationAction(k, i), float(np.log(p[k]) + np.log(pp[i])), value


# --- checkpoints ------------------------------------------------------------------------

def save_checkpoint(policy: TwoStagePolicy, path, extra: dict | None = None) -> None:
    payload = {"version": CHECKPOINT_VERSION, "config": asdict(policy.cfg),
               "norm_stats": policy.norm.to_dict(), "dtype": str(policy.dtype),
               "state_dict": policy.state_dict(), "extra": extra or {}}
    torch.save(payload, path)


def load_checkpoint(path) -> TwoStagePolicy:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    policy = TwoStagePolicy(PolicyConfig(**payload["config"]), NormStats.from_dict(payload["norm_stats"]))
    if payload.get("dtype") == "torch.float64":
        policy = policy.double()
    policy.load_state_dict(payload["state_dict"])
    policy.eval()
    return policy


def checkpoint_bytes(policy: TwoStagePolicy) -> int:
    buf = io.BytesIO()
    save_checkpoint(policy, buf)
    return buf.tell()
