"""Conditional RealNVP flow over (positions, auxiliaries) given x^p(t).

Generative direction, per coupling layer::

    z^p <- exp(s^p(z^v; x)) * z^p + t^p(z^v; x)
    z^v <- exp(s^v(z^p; x)) * z^v + t^v(z^p; x)

followed by the skip connection x^p(t+tau) = x^p(t) + z^p. Each of s^p, t^p,
s^v, t^v is an atom transformer: per-atom MLPs around kernel self-attention
whose weights come from the conditioning positions only.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .core import as_rng
from .diffcore import Tensor

LOG_2PI = math.log(2.0 * math.pi)


class FlowError(FloatingPointError):
    pass


@dataclass
class FlowConfig:
    dimension: int = 3
    n_coupling: int = 4
    n_transformer: int = 2
    hidden: int = 32
    embed: int = 8
    lengthscales: tuple = (0.1, 0.3, 0.7, 1.2)
    n_types: int = 64
    scale_clamp: float = 5.0
    layer_norm: bool = False
    canonicalize: bool = True  # off for external (non translation-invariant) potentials
    zero_init_output: bool = True
    output_init_scale: float = 0.1  # std multiplier for the last layer when not zero-initialised
    init_seed: int = 0

    def __post_init__(self):
        self.lengthscales = tuple(float(l) for l in self.lengthscales)
        if any(l <= 0 for l in self.lengthscales):
            raise ValueError("lengthscales must be positive")
        if self.n_coupling < 1 or self.hidden < 1 or self.n_types < 1:
            raise ValueError("n_coupling, hidden and n_types must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["lengthscales"] = list(self.lengthscales)
        return d


def attention_weights(positions, lengthscale: float) -> np.ndarray:
    """Row-stochastic w_ij = softmax_j(-|x_i - x_j|^2 / l^2); batched over leading axes."""
    if not lengthscale > 0:
        raise ValueError("lengthscale must be positive")
    x = np.asarray(positions, dtype=np.float64)
    diff = x[..., :, None, :] - x[..., None, :, :]
    logits = -np.sum(diff * diff, axis=-1) / lengthscale**2
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def attention_tensor(cond: Tensor, lengthscales) -> Tensor:
    """Multihead weights (S, heads, N, N) as a differentiable function of ``cond`` (S, N, d)."""
    diff = cond[:, :, None, :] - cond[:, None, :, :]
    sq = dc.tsum(dc.square(diff), axis=-1)  # (S, N, N)
    inv = -1.0 / np.asarray(lengthscales, dtype=np.float64) ** 2
    logits = dc.mul(sq[:, None, :, :], inv[None, :, None, None])
    return dc.softmax(logits, axis=-1)


def _layer_norm(x: Tensor, eps=1e-5) -> Tensor:
    mu = dc.mean(x, axis=-1, keepdims=True)
    c = x - mu
    var = dc.mean(dc.square(c), axis=-1, keepdims=True)
    return c / dc.sqrt(var + eps)


class AtomTransformer:
    """Per-atom map R^{N x d} -> R^{N x d} conditioned on atom types and positions."""

    def __init__(self, store: dc.ParamStore, prefix: str, cfg: FlowConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, D, H, h = cfg.dimension, cfg.hidden, cfg.embed, len(cfg.lengthscales)
        self.p = {}

        def lin(name, fan_in, fan_out, zero=False, bias=True, gain=1.0):
            w = np.zeros((fan_in, fan_out)) if zero else rng.normal(0, gain / math.sqrt(fan_in), (fan_in, fan_out))
            self.p[name + ".w"] = store.add(f"{prefix}.{name}.w", w)
            if bias:
                self.p[name + ".b"] = store.add(f"{prefix}.{name}.b", np.zeros(fan_out))

        self.p["embed"] = store.add(f"{prefix}.embed", rng.normal(0, 1.0, (cfg.n_types, H)))
        lin("in1", 2 * d + H, D)
        lin("in2", D, D)
        for k in range(cfg.n_transformer):
            lin(f"blk{k}.value", D, h * D, bias=False)
            lin(f"blk{k}.mix", h * D, D)
            lin(f"blk{k}.mlp1", D, 2 * D)
            lin(f"blk{k}.mlp2", 2 * D, D)
        lin("out1", D, D)
        lin("out2", D, d, zero=cfg.zero_init_output, gain=cfg.output_init_scale)

    def _affine(self, x, name):
        out = dc.matmul(x, self.p[name + ".w"])
        b = self.p.get(name + ".b")
        return out if b is None else out + b

    def __call__(self, z: Tensor, cond: Tensor, h_types: Tensor, weights: Tensor) -> Tensor:
        cfg = self.cfg
        S, N = z.shape[0], z.shape[1]
        D, heads = cfg.hidden, len(cfg.lengthscales)
        emb = dc.embedding(self.p["embed"], h_types) if not isinstance(h_types, Tensor) else h_types
        if emb.shape[0] != S:
            emb = dc.broadcast_to(emb, (S, N, emb.shape[-1]))
        a = dc.concat([cond, emb, z], axis=-1)
        r = self._affine(dc.silu(self._affine(a, "in1")), "in2")
        for k in range(cfg.n_transformer):
            q = _layer_norm(r) if cfg.layer_norm else r
            v = self._affine(q, f"blk{k}.value").reshape(S, N, heads, D).transpose(0, 2, 1, 3)
            att = dc.matmul(weights, v).transpose(0, 2, 1, 3).reshape(S, N, heads * D)
            r = r + self._affine(att, f"blk{k}.mix")
            q = _layer_norm(r) if cfg.layer_norm else r
            r = r + self._affine(dc.relu(self._affine(q, f"blk{k}.mlp1")), f"blk{k}.mlp2")
        return self._affine(dc.silu(self._affine(r, "out1")), "out2")

    def zero_output(self):
        self.p["out2.w"].value[...] = 0.0
        self.p["out2.b"].value[...] = 0.0


class CouplingLayer:
    def __init__(self, store, prefix, cfg, rng):
        self.cfg = cfg
        self.s_p = AtomTransformer(store, prefix + ".sp", cfg, rng)
        self.t_p = AtomTransformer(store, prefix + ".tp", cfg, rng)
        self.s_v = AtomTransformer(store, prefix + ".sv", cfg, rng)
        self.t_v = AtomTransformer(store, prefix + ".tv", cfg, rng)
        self.clamp_count = 0

    def _scale(self, net, z, ctx):
        s = net(z, *ctx)
        c = self.cfg.scale_clamp
        over = int(np.count_nonzero(np.abs(s.value) > c))
        if over:
            self.clamp_count += over
            s = dc.clip(s, -c, c)
        return s

    def forward(self, zp, zv, ctx):
        sp = self._scale(self.s_p, zv, ctx)
        zp = dc.exp(sp) * zp + self.t_p(zv, *ctx)
        sv = self._scale(self.s_v, zp, ctx)
        zv = dc.exp(sv) * zv + self.t_v(zp, *ctx)
        return zp, zv, dc.tsum(sp, axis=(1, 2)) + dc.tsum(sv, axis=(1, 2))

    def inverse(self, zp, zv, ctx):
        sv = self._scale(self.s_v, zp, ctx)
        zv = (zv - self.t_v(zp, *ctx)) * dc.exp(-sv)
        sp = self._scale(self.s_p, zv, ctx)
        zp = (zp - self.t_p(zv, *ctx)) * dc.exp(-sp)
        return zp, zv, -(dc.tsum(sp, axis=(1, 2)) + dc.tsum(sv, axis=(1, 2)))

    def transformers(self):
        return (self.s_p, self.t_p, self.s_v, self.t_v)


def _flatten(x, nd=2):
    """Collapse leading axes: returns (array of shape (S, N, d), leading shape)."""
    lead = x.shape[:-nd]
    return x.reshape((-1,) + x.shape[-nd:]), lead


def gaussian_logpdf_sum(zp, zv) -> Tensor:
    """log N(z^p; 0, I) + log N(z^v; 0, I) summed per sample, for (S, N, d) tensors."""
    n = zp.shape[1] * zp.shape[2]
    sq = dc.tsum(dc.square(zp), axis=(1, 2)) + dc.tsum(dc.square(zv), axis=(1, 2))
    return dc.mul(sq, -0.5) - n * LOG_2PI


class ConditionalFlow:
    def __init__(self, cfg: FlowConfig | None = None, store: dc.ParamStore | None = None):
        self.cfg = cfg or FlowConfig()
        self.store = store or dc.ParamStore()
        rng = np.random.default_rng(self.cfg.init_seed)
        self.layers = [CouplingLayer(self.store, f"layer{k}", self.cfg, rng) for k in range(self.cfg.n_coupling)]

    # introspection / hooks
    @property
    def clamp_count(self) -> int:
        return sum(l.clamp_count for l in self.layers)

    def n_parameters(self) -> int:
        return self.store.n_values()

    def zero_output(self):
        """Make every transformer output zero: the flow becomes z -> z plus the skip."""
        for layer in self.layers:
            for t in layer.transformers():
                t.zero_output()

    # plumbing
    def _context(self, cond: Tensor, types):
        """Canonicalised conditioning, type ids broadcast to (S, N), attention weights."""
        S, N = cond.shape[0], cond.shape[1]
        if self.cfg.canonicalize:
            cond = cond - dc.mean(cond, axis=1, keepdims=True)
        types = np.asarray(types, dtype=np.int64)
        types = np.broadcast_to(types.reshape((-1, N)) if types.ndim > 1 else types, (S, N))
        if types.min() < 0 or types.max() >= self.cfg.n_types:
            raise ValueError(f"atom type ids must lie in [0, {self.cfg.n_types})")
        return cond, types, attention_tensor(cond, self.cfg.lengthscales)

    def _check(self, arrs, where):
        for a in arrs:
            if not np.all(np.isfinite(a.value)):
                raise FlowError(f"non-finite values after {where}")

    # core transforms on (S, N, d) tensors
    def forward_tensors(self, zp, zv, cond, types):
        """Latents -> (x^p, x^v, log|det J_f|) with the skip connection applied."""
        ctx = self._context(cond, types)
        logdet = 0.0
        for k, layer in enumerate(self.layers):
            zp, zv, ld = layer.forward(zp, zv, ctx)
            logdet = logdet + ld
            self._check((zp, zv), f"coupling layer {k}")
        return cond + zp, zv, logdet

    def inverse_tensors(self, xp, xv, cond, types):
        """(x^p, x^v) -> (z^p, z^v, log|det J_{f^-1}|)."""
        ctx = self._context(cond, types)
        zp, zv = xp - cond, xv
        logdet = 0.0
        for k in reversed(range(len(self.layers))):
            zp, zv, ld = self.layers[k].inverse(zp, zv, ctx)
            logdet = logdet + ld
            self._check((zp, zv), f"inverse of coupling layer {k}")
        return zp, zv, logdet

    def log_density_tensor(self, xp, xv, cond, types) -> Tensor:
        zp, zv, ld = self.inverse_tensors(xp, xv, cond, types)
        return gaussian_logpdf_sum(zp, zv) + ld

    def sample_tensors(self, zp, zv, cond, types):
        """Generative pass from fixed latents; returns (x^p, x^v, log p)."""
        xp, xv, ld = self.forward_tensors(zp, zv, cond, types)
        return xp, xv, gaussian_logpdf_sum(zp, zv) - ld

    # numpy API
    def sample(self, cond, types, rng, n: int = 1, latents=None):
        """Draw ``n`` proposals per conditioning state.

        ``cond`` is (N, d) or (C, N, d); outputs are (n, N, d) or (C, n, N, d),
        with log-densities of shape (n,) or (C, n). Latents are drawn as z^p
        then z^v from ``rng`` unless supplied as a pair.
        """
        cond = np.asarray(cond, dtype=np.float64)
        shape = cond.shape[:-2] + (n,) + cond.shape[-2:]
        if latents is None:
            rng = as_rng(rng)
            zp = rng.normal(shape)
            zv = rng.normal(shape)
        else:
            zp, zv = (np.asarray(z, dtype=np.float64).reshape(shape) for z in latents)
        c = np.broadcast_to(cond[..., None, :, :], shape)
        types = self._types_for(types, cond.shape[:-2], n, cond.shape[-2])
        with dc.no_grad():
            xp, xv, lp = self.sample_tensors(*(Tensor(_flatten(a)[0]) for a in (zp, zv, c)), types)
        return xp.value.reshape(shape), xv.value.reshape(shape), lp.value.reshape(shape[:-2])

    def log_density(self, xp, xv, cond, types) -> np.ndarray:
        xp = np.asarray(xp, dtype=np.float64)
        xv = np.asarray(xv, dtype=np.float64)
        shape = np.broadcast_shapes(xp.shape, xv.shape, np.shape(cond))
        arrs = [np.broadcast_to(np.asarray(a, dtype=np.float64), shape) for a in (xp, xv, cond)]
        t = np.asarray(types, dtype=np.int64)
        if t.ndim > 1:
            t = np.broadcast_to(t, shape[:-1]).reshape(-1, shape[-2])
        with dc.no_grad():
            lp = self.log_density_tensor(*(Tensor(_flatten(a)[0]) for a in arrs), t)
        return lp.value.reshape(shape[:-2])

    def forward(self, zp, zv, cond, types):
        """Numpy generative map; returns (x^p, x^v, log|det J_f|)."""
        shape = np.shape(zp)
        c = np.broadcast_to(np.asarray(cond, dtype=np.float64), shape)
        with dc.no_grad():
            xp, xv, ld = self.forward_tensors(*(Tensor(_flatten(np.asarray(a, float))[0]) for a in (zp, zv, c)),
                                              self._flat_types(types, shape))
        return xp.value.reshape(shape), xv.value.reshape(shape), ld.value.reshape(shape[:-2])

    def inverse(self, xp, xv, cond, types):
        shape = np.shape(xp)
        c = np.broadcast_to(np.asarray(cond, dtype=np.float64), shape)
        with dc.no_grad():
            zp, zv, ld = self.inverse_tensors(*(Tensor(_flatten(np.asarray(a, float))[0]) for a in (xp, xv, c)),
                                              self._flat_types(types, shape))
        return zp.value.reshape(shape), zv.value.reshape(shape), ld.value.reshape(shape[:-2])

    @staticmethod
    def _flat_types(types, shape):
        t = np.asarray(types, dtype=np.int64)
        return np.broadcast_to(t, shape[:-1]).reshape(-1, shape[-2]) if t.ndim > 1 else t

    @staticmethod
    def _types_for(types, lead, n, N):
        t = np.asarray(types, dtype=np.int64)
        if t.ndim == 1:
            return t
        return np.broadcast_to(t.reshape(lead + (1, N)), lead + (n, N)).reshape(-1, N)

    # persistence
    def save(self, path, meta: dict | None = None, optimizer=None) -> str:
        m = {"flow_config": self.cfg.to_dict()}
        m.update(meta or {})
        return dc.save_checkpoint(path, self.store, m, optimizer)

    @classmethod
    def load(cls, path, expected_sha256: str | None = None) -> tuple["ConditionalFlow", dict]:
        meta = dc.load_checkpoint(path, None, expected_sha256=expected_sha256)
        cfg = FlowConfig(**meta["flow_config"])
        flow = cls(cfg)
        flow.store.load_state_dict(meta.pop("_params"))
        return flow, meta


def coupling_forward(layer: CouplingLayer, zp, zv, cond, types, canonicalize: bool = True):
    """Numpy wrapper for one coupling layer in the generative direction."""
    return _run_layer(layer, zp, zv, cond, types, canonicalize, inverse=False)


def coupling_inverse(layer: CouplingLayer, zp, zv, cond, types, canonicalize: bool = True):
    return _run_layer(layer, zp, zv, cond, types, canonicalize, inverse=True)


def _run_layer(layer, zp, zv, cond, types, canonicalize, inverse):
    zp = np.asarray(zp, dtype=np.float64)
    shape = zp.shape
    cond = np.broadcast_to(np.asarray(cond, dtype=np.float64), shape)
    flat = lambda a: Tensor(np.asarray(a, dtype=np.float64).reshape((-1,) + shape[-2:]))  # noqa: E731
    c = flat(cond)
    N = shape[-2]
    with dc.no_grad():
        if canonicalize:
            c = c - dc.mean(c, axis=1, keepdims=True)
        t = np.broadcast_to(np.asarray(types, dtype=np.int64), (c.shape[0], N)) if np.ndim(types) > 1 else \
            np.broadcast_to(np.asarray(types, dtype=np.int64), (c.shape[0], N))
        ctx = (c, t, attention_tensor(c, layer.cfg.lengthscales))
        fn = layer.inverse if inverse else layer.forward
        a, b, ld = fn(flat(zp), flat(zv), ctx)
    return a.value.reshape(shape), b.value.reshape(shape), ld.value.reshape(shape[:-2])


def flow_sample(flow: ConditionalFlow, cond, types, rng, batch: int):
    return flow.sample(cond, types, rng, batch)


def flow_log_density(flow: ConditionalFlow, xp, xv, cond, types):
    return flow.log_density(xp, xv, cond, types)
