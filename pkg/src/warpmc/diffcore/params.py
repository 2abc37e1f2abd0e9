"""Named parameters, Adam, and checkpoint files."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..fileio import file_sha256, read_container, write_container
from .tensor import Tensor

CHECKPOINT_VERSION = 1


class NonFiniteGradient(FloatingPointError):
    pass


class ParamStore:
    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def n_values(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict:
        return {k: (np.zeros_like(p.value) if p.grad is None else p.grad) for k, p in self.params.items()}

    def state_dict(self) -> dict:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.value.shape:
                raise ValueError(f"{k}: shape {v.shape} != {p.value.shape}")
            p.value = v.copy()

    def flat(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.params.values()]) if self.params else np.zeros(0)

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        i = 0
        for p in self.params.values():
            n = p.value.size
            p.value = vec[i:i + n].reshape(p.value.shape).copy()
            i += n


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping. Non-finite norms are left for the
    optimizer to report.
    """
    grads = [p.grad for _, p in store if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if np.isfinite(norm) and norm > max_norm > 0:
        scale = max_norm / norm
        for _, p in store:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Adam:
    def __init__(self, store: ParamStore, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.store = store
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in store}
        self.v = {k: np.zeros_like(p.value) for k, p in store}

    def step(self):
        grads = self.store.grads()
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in parameter {k!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.store:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> tuple[dict, dict]:
        arrays = {}
        for k in self.m:
            arrays[f"adam.m.{k}"] = self.m[k]
            arrays[f"adam.v.{k}"] = self.v[k]
        meta = {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}
        return meta, arrays

    def load(self, meta: dict, arrays: dict):
        self.t = int(meta["t"])
        self.lr = float(meta["lr"])
        self.beta1, self.beta2, self.eps = meta["beta1"], meta["beta2"], meta["eps"]
        for k in self.m:
            self.m[k] = np.array(arrays[f"adam.m.{k}"])
            self.v[k] = np.array(arrays[f"adam.v.{k}"])


def adam_step(store: ParamStore, optimizer: Adam):
    optimizer.step()
    return store


def save_checkpoint(path, store: ParamStore, meta: dict | None = None, optimizer: Adam | None = None) -> str:
    arrays = {f"param.{k}": p.value for k, p in store}
    header = {"format_version": CHECKPOINT_VERSION, "user": meta or {}}
    if optimizer is not None:
        om, oa = optimizer.state()
        header["optimizer"] = om
        arrays.update(oa)
    return write_container(path, "checkpoint", header, arrays)


def load_checkpoint(path, store: ParamStore | None = None, optimizer: Adam | None = None,
                    expected_sha256: str | None = None) -> dict:
    """Read a checkpoint into ``store`` (if given); returns the user metadata.

    When ``expected_sha256`` is set, the file hash must match.
    """
    if expected_sha256 is not None and file_sha256(path) != expected_sha256:
        raise ValueError(f"{path}: checkpoint hash mismatch")
    meta, arrays = read_container(path, "checkpoint")
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version")
    params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    if store is not None:
        store.load_state_dict(params)
    if optimizer is not None and "optimizer" in meta:
        optimizer.load(meta["optimizer"], arrays)
    user = dict(meta.get("user", {}))
    user["_params"] = params
    return user
