"""Differentiable layer inventory, parameter store, Adam and gradient checking.

Reverse-mode differentiation is delegated to torch's autograd; every op in
this module is checked against central finite differences by ``grad_check``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

CHECKPOINT_FORMAT = "ParamStore"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.dim() == 2:
        return x.unsqueeze(0), True
    if x.dim() != 3:
        raise ShapeError(f"expected (C, L) or (N, C, L), got {tuple(x.shape)}")
    return x, False


# ---------------------------------------------------------------- layer ops

def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with same padding; ``w`` is (Cout, Cin, K), K odd."""
    if w.dim() != 3:
        raise ShapeError(f"weight must be (Cout, Cin, K), got {tuple(w.shape)}")
    k = w.shape[-1]
    if k % 2 != 1:
        raise ShapeError("kernel size must be odd for same padding")
    xb, squeeze = _batched(x)
    if xb.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {xb.shape[1]} channels, weight expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("bias must have shape (Cout,)")
    y = F.conv1d(xb, w, b, padding=k // 2)
    return y[0] if squeeze else y


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    return F.elu(x, alpha=alpha)


def batch_norm_1d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor | None = None,
                  running_var: Tensor | None = None, training: bool = True, momentum: float = 0.1,
                  eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over batch and time.

    With ``training=True`` the batch statistics are used and the running
    buffers (if given) are updated in place; otherwise the running buffers are
    applied as a fixed affine map.
    """
    xb, squeeze = _batched(x)
    if not training and (running_mean is None or running_var is None):
        raise ValueError("inference-mode batch norm needs running statistics")
    y = F.batch_norm(xb, running_mean, running_var, gamma, beta, training=training,
                     momentum=momentum, eps=eps)
    return y[0] if squeeze else y


def max_pool_1d(x: Tensor, factor: int) -> Tensor:
    xb, squeeze = _batched(x)
    if xb.shape[-1] % factor:
        raise ShapeError(f"length {xb.shape[-1]} not divisible by pool factor {factor}")
    y = F.max_pool1d(xb, factor)
    return y[0] if squeeze else y


def nearest_upsample_1d(x: Tensor, factor: int) -> Tensor:
    return torch.repeat_interleave(x, factor, dim=-1)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` over the last axis; ``w`` is (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear expects last dim {w.shape[1]}, got {x.shape[-1]}")
    return F.linear(x, w, b)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return F.layer_norm(x, (x.shape[-1],), gamma, beta, eps)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    return a + b


def concat(tensors: Iterable[Tensor], dim: int = -2) -> Tensor:
    """Channel concatenation for skip connections (channels are dim -2)."""
    tensors = list(tensors)
    if len({t.shape[-1] for t in tensors}) != 1:
        raise ShapeError("skip concatenation needs equal temporal length")
    return torch.cat(tensors, dim=dim)


def mean_pool_over_window(x: Tensor, window: int) -> Tensor:
    """(..., C, L) -> (..., C, L // window) by averaging non-overlapping windows."""
    if x.shape[-1] % window:
        raise ShapeError(f"length {x.shape[-1]} not divisible by window {window}")
    return x.reshape(*x.shape[:-1], x.shape[-1] // window, window).mean(dim=-1)


def multi_head_self_attention(x: Tensor, w_qkv: Tensor, b_qkv: Tensor, w_out: Tensor, b_out: Tensor,
                              n_heads: int = 4) -> Tensor:
    """Scaled dot-product self-attention over (N, S, E) sequences."""
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    n, s, e = x.shape
    if e % n_heads:
        raise ShapeError(f"embed dim {e} not divisible by {n_heads} heads")
    hd = e // n_heads
    q, k, v = linear(x, w_qkv, b_qkv).chunk(3, dim=-1)

    def heads(t):
        return t.reshape(n, s, n_heads, hd).transpose(1, 2)

    q, k, v = heads(q), heads(k), heads(v)
    att = softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
    y = (att @ v).transpose(1, 2).reshape(n, s, e)
    y = linear(y, w_out, b_out)
    return y[0] if squeeze else y


# ------------------------------------------------------------ param storage

class ParamStore:
    """Named tensors with a frozen mask; buffers (e.g. running statistics) ride along.

    Tensors are held by reference, so a store built from a module sees the
    module's live parameters.
    """

    def __init__(self, params: dict[str, Tensor] | None = None, buffers: dict[str, Tensor] | None = None,
                 frozen: Iterable[str] = ()):
        self.params: dict[str, Tensor] = dict(params or {})
        self.buffers: dict[str, Tensor] = dict(buffers or {})
        self.frozen: set[str] = set()
        for name in frozen:
            self.freeze(name)

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefix: str = "") -> "ParamStore":
        params = {prefix + n: p for n, p in module.named_parameters()}
        buffers = {prefix + n: b for n, b in module.named_buffers()}
        frozen = [n for n, p in params.items() if not p.requires_grad]
        return cls(params, buffers, frozen)

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def merge(self, other: "ParamStore", prefix: str = "") -> "ParamStore":
        out = ParamStore(self.params, self.buffers, self.frozen)
        for n, p in other.params.items():
            out.params[prefix + n] = p
        for n, b in other.buffers.items():
            out.buffers[prefix + n] = b
        out.frozen |= {prefix + n for n in other.frozen}
        return out

    def freeze(self, pattern: str = "") -> None:
        """Freeze every parameter whose name starts with ``pattern``."""
        for n, p in self.params.items():
            if n.startswith(pattern):
                self.frozen.add(n)
                p.requires_grad_(False)

    def unfreeze(self, pattern: str = "") -> None:
        for n, p in self.params.items():
            if n.startswith(pattern):
                self.frozen.discard(n)
                p.requires_grad_(True)

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if n not in self.frozen}

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def _entries(self):
        for n, t in self.params.items():
            yield n, t, "param"
        for n, t in self.buffers.items():
            yield n, t, "buffer"

    def to_bytes(self) -> tuple[dict, bytes]:
        manifest, chunks, offset = [], [], 0
        for name, t, kind in self._entries():
            arr = t.detach().cpu().numpy().astype("<f4", copy=False).ravel()
            chunks.append(arr.tobytes())
            manifest.append({"name": name, "kind": kind, "shape": list(t.shape),
                             "frozen": name in self.frozen, "offset": offset, "count": int(arr.size)})
            offset += arr.size
        return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "entries": manifest}, b"".join(chunks)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest, blob = self.to_bytes()
        (directory / "params.f32").write_bytes(blob)
        (directory / "params.json").write_text(json.dumps(manifest, indent=1))
        return directory

    def load_into(self, directory) -> None:
        """Copy a saved checkpoint into this store's tensors in place (names and shapes must match)."""
        directory = Path(directory)
        manifest = json.loads((directory / "params.json").read_text())
        if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{directory} is not a ParamStore v1 checkpoint")
        blob = np.frombuffer((directory / "params.f32").read_bytes(), dtype="<f4")
        for e in manifest["entries"]:
            table = self.params if e["kind"] == "param" else self.buffers
            if e["name"] not in table:
                raise KeyError(f"checkpoint entry {e['name']} not in store")
            t = table[e["name"]]
            if list(t.shape) != e["shape"]:
                raise ShapeError(f"{e['name']}: checkpoint shape {e['shape']} vs store {list(t.shape)}")
            vals = blob[e["offset"] : e["offset"] + e["count"]].reshape(e["shape"])
            with torch.no_grad():
                t.copy_(torch.from_numpy(vals.copy()).to(t.dtype))
            if e["kind"] == "param":
                (self.freeze if e["frozen"] else self.unfreeze)(e["name"])

    def fingerprint(self, pattern: str = "") -> bytes:
        """Raw bytes of all parameters/buffers under ``pattern``, for byte-identity checks."""
        return b"".join(t.detach().cpu().numpy().tobytes() for n, t, _ in self._entries() if n.startswith(pattern))


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, grads: dict[str, Tensor | None] | None, state: AdamState) -> ParamStore:
    """One bias-corrected Adam update, in place; frozen tensors and missing gradients are skipped.

    With ``grads=None`` the ``.grad`` fields of the trainable tensors are used.
    """
    if grads is None:
        grads = {n: p.grad for n, p in params.trainable().items()}
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name!r} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, g in grads.items():
            if g is None or name in params.frozen:
                continue
            p = params[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, param {tuple(p.shape)}")
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params


# ---------------------------------------------------------------- grad check

def grad_check(f: Callable[[], Tensor], params, h: float = 1e-5, max_elements: int | None = 64,
               seed: int = 0) -> float:
    """Max over tensors of ``|a - n| / (|a| + |n| + 1e-12)`` (2-norms), comparing
    autograd against central differences.

    ``params`` is a ParamStore (frozen entries skipped), a dict, or a list of
    tensors. Tensors with more than ``max_elements`` entries are checked on a
    random subset of coordinates.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("finite-difference step must lie in [1e-6, 1e-3]")
    if isinstance(params, ParamStore):
        named = params.trainable()
    elif isinstance(params, dict):
        named = dict(params)
    else:
        named = {str(i): t for i, t in enumerate(params)}
    tensors = list(named.values())
    for t in tensors:
        t.requires_grad_(True)
        t.grad = None
    loss = f()
    if not torch.isfinite(loss):
        raise FloatingPointError("loss is not finite at the check point")
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    gen = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for t, a in zip(tensors, analytic):
            a = torch.zeros_like(t) if a is None else a
            flat = t.view(-1)
            idx = np.arange(flat.numel())
            if max_elements is not None and idx.size > max_elements:
                idx = gen.choice(idx, size=max_elements, replace=False)
            num = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                num[j] = (fp - fm) / (2 * h)
            ana = a.reshape(-1)[torch.as_tensor(idx)].double().cpu().numpy()
            err = np.linalg.norm(ana - num) / (np.linalg.norm(ana) + np.linalg.norm(num) + 1e-12)
            worst = max(worst, float(err))
    return worst
