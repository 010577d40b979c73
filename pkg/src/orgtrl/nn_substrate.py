"""Differentiable substrate: named parameter storage, the few primitive layers
the captioner needs, checkpoint I/O and a finite-difference gradient checker.

Reverse-mode gradients come from torch autograd; the layers below are written
out explicitly so their forward arithmetic is visible and testable.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Callable, Iterable, Iterator, NamedTuple

import numpy as np
import torch

from .errors import ConfigError, FormatError, ShapeError, ValidationError
from .feature_store import read_tensor_file, write_tensor_file


class ParameterStore:
    """Named leaf tensors with gradient buffers and optimizer moments."""

    def __init__(self, dtype: torch.dtype = torch.float32):
        self.dtype = dtype
        self._params: dict[str, torch.Tensor] = {}
        # Adam state, kept alongside the parameters so checkpoints are complete.
        self.moments: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        self.step_count = 0

    def add(self, name: str, value) -> torch.Tensor:
        if name in self._params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(np.asarray(value), dtype=self.dtype).clone().requires_grad_(True)
        t.grad = torch.zeros_like(t)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def numel(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            if p.grad is None:
                p.grad = torch.zeros_like(p)
            else:
                p.grad.zero_()

    def to(self, dtype: torch.dtype) -> "ParameterStore":
        """Independent copy of the parameters at another precision (moments dropped)."""
        out = ParameterStore(dtype)
        for name, p in self._params.items():
            out.add(name, p.detach().to(dtype).numpy())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.detach().cpu().numpy() for n, p in self._params.items()}

    # -- checkpoints ---------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        """One ORGT file per parameter plus index.txt (name TAB comma-dims).
        Optimizer moments go to optimizer.txt / adam.{m,v}.<name>.orgt."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        index = []
        for name, p in self._params.items():
            write_tensor_file(d / f"{name}.orgt", p.detach().numpy())
            index.append(f"{name}\t{','.join(map(str, p.shape))}")
        (d / "index.txt").write_text("\n".join(index) + "\n")
        opt = [f"step\t{self.step_count}"]
        for name, (m, v) in self.moments.items():
            write_tensor_file(d / f"adam.m.{name}.orgt", m.numpy())
            write_tensor_file(d / f"adam.v.{name}.orgt", v.numpy())
            opt.append(f"moments\t{name}")
        (d / "optimizer.txt").write_text("\n".join(opt) + "\n")

    @classmethod
    def load(cls, directory: str | Path, dtype: torch.dtype = torch.float32) -> "ParameterStore":
        d = Path(directory)
        store = cls(dtype)
        for line in (d / "index.txt").read_text().splitlines():
            if not line:
                continue
            name, dims = line.split("\t")
            shape = tuple(int(x) for x in dims.split(",")) if dims else ()
            arr = read_tensor_file(d / f"{name}.orgt")
            if arr.shape != shape:
                raise FormatError(f"{name}: index shape {shape} but file holds {arr.shape}")
            store.add(name, arr)
        opt_path = d / "optimizer.txt"
        if opt_path.exists():
            for line in opt_path.read_text().splitlines():
                key, _, val = line.partition("\t")
                if key == "step":
                    store.step_count = int(val)
                elif key == "moments":
                    m = torch.as_tensor(read_tensor_file(d / f"adam.m.{val}.orgt"), dtype=dtype)
                    v = torch.as_tensor(read_tensor_file(d / f"adam.v.{val}.orgt"), dtype=dtype)
                    store.moments[val] = (m, v)
        return store


class LstmState(NamedTuple):
    hidden: torch.Tensor
    cell: torch.Tensor


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape or (fan_in, fan_out))


def init_lstm(store: ParameterStore, prefix: str, input_size: int, hidden: int,
              rng: np.random.Generator) -> None:
    """Fused gate weights [input+hidden, 4*hidden], gate order i, f, o, g."""
    store.add(f"{prefix}.W", glorot_uniform(rng, input_size + hidden, 4 * hidden))
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = 1.0  # forget gate
    store.add(f"{prefix}.b", b)


# ---------------------------------------------------------------------------
# Primitive layers
# ---------------------------------------------------------------------------


def linear_forward(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    x, W = torch.as_tensor(x), torch.as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight rows {W.shape[0]}")
    y = x @ W
    if b is not None:
        b = torch.as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias shape {tuple(b.shape)} vs output width {W.shape[1]}")
        y = y + b
    return y


def _masked_logits(logits, mask, dim):
    logits = torch.as_tensor(logits)
    if mask is None:
        return logits
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any(dim=dim).all()):
        raise ValidationError("softmax: every entry of some row is masked")
    return logits.masked_fill(~mask, float("-inf"))


def softmax_stable(logits, mask=None, dim: int = -1) -> torch.Tensor:
    """Softmax with max-subtraction; masked entries come out exactly 0."""
    z = _masked_logits(logits, mask, dim)
    z = z - z.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax_stable(logits, mask=None, dim: int = -1) -> torch.Tensor:
    z = _masked_logits(logits, mask, dim)
    z = z - z.amax(dim=dim, keepdim=True).detach()
    return z - torch.log(torch.exp(z).sum(dim=dim, keepdim=True))


def lstm_cell_step(x: torch.Tensor, state: LstmState, W: torch.Tensor, b: torch.Tensor) -> LstmState:
    h_prev, c_prev = state
    hidden = h_prev.shape[-1]
    if W.shape != (x.shape[-1] + hidden, 4 * hidden):
        raise ShapeError(
            f"lstm: weight {tuple(W.shape)} does not fit input {x.shape[-1]} + hidden {hidden}"
        )
    gates = torch.cat([x, h_prev], dim=-1) @ W + b
    i, f, o, g = gates.split(hidden, dim=-1)
    c = torch.sigmoid(f) * c_prev + torch.sigmoid(i) * torch.tanh(g)
    h = torch.sigmoid(o) * torch.tanh(c)
    return LstmState(h, c)


def zero_state(batch: int, hidden: int, dtype=torch.float32) -> LstmState:
    return LstmState(torch.zeros(batch, hidden, dtype=dtype), torch.zeros(batch, hidden, dtype=dtype))


def embedding_lookup(W_e: torch.Tensor, ids) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= W_e.shape[0]):
        raise IndexError(f"word id out of range [0, {W_e.shape[0]})")
    return W_e[ids]


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check_detail(loss_fn: Callable[[ParameterStore], torch.Tensor], params: ParameterStore,
                      eps: float = 2e-4, sample: int | None = 20, seed: int = 0,
                      names: Iterable[str] | None = None) -> dict[str, float]:
    """Per-parameter max relative error between autograd and central differences.

    `sample` coordinates are drawn per parameter (all of them when None or
    when the parameter is smaller); `names` restricts the check to a subset.
    Relative error is |g_a - g_n| / max(1e-8, |g_a| + |g_n|).
    """
    if not eps > 0:
        raise ConfigError("eps must be > 0")
    if params.dtype != torch.float64:
        raise ValidationError("gradient checks must run on a float64 parameter store")
    params.zero_grad()
    loss = loss_fn(params)
    if not torch.isfinite(loss):
        raise ValidationError("loss is not finite")
    loss.backward()
    rng = np.random.default_rng(seed)
    report = {}
    selected = set(params) if names is None else set(names)
    for name, p in params.items():
        if name not in selected:
            continue
        analytic = p.grad.detach().reshape(-1).clone()
        n = p.numel()
        coords = range(n) if sample is None or sample >= n else rng.choice(n, size=sample, replace=False)
        flat = p.data.view(-1)
        worst = 0.0
        with torch.no_grad():
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                lp = loss_fn(params).item()
                flat[i] = orig - eps
                lm = loss_fn(params).item()
                flat[i] = orig
                if not (math.isfinite(lp) and math.isfinite(lm)):
                    raise ValidationError(f"loss not finite while perturbing {name}[{i}]")
                g_n = (lp - lm) / (2 * eps)
                g_a = analytic[i].item()
                worst = max(worst, abs(g_a - g_n) / max(1e-8, abs(g_a) + abs(g_n)))
        report[name] = worst
    params.zero_grad()
    return report


def grad_check(loss_fn: Callable[[ParameterStore], torch.Tensor], params: ParameterStore,
               eps: float = 2e-4, sample: int | None = 20, seed: int = 0,
               names: Iterable[str] | None = None) -> float:
    return max(grad_check_detail(loss_fn, params, eps, sample, seed, names).values(), default=0.0)


def numeric_gradient(loss_fn: Callable[[ParameterStore], torch.Tensor], params: ParameterStore,
                     name: str, eps: float = 2e-4) -> np.ndarray:
    """Central-difference gradient of every coordinate of one parameter."""
    flat = params[name].data.view(-1)
    out = np.empty(flat.numel())
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            lp = loss_fn(params).item()
            flat[i] = orig - eps
            lm = loss_fn(params).item()
            flat[i] = orig
            out[i] = (lp - lm) / (2 * eps)
    return out.reshape(tuple(params[name].shape))
