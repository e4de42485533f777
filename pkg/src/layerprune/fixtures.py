"""Constructed networks with known analytic behaviour, used as oracles."""

from __future__ import annotations

import copy
import hashlib
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .toynet import LayerError, LayerId, LayerKind, Network, NetworkSpec, Stage, build

__all__ = ["OrthogonalNet", "build_orthogonal", "build_disparate"]


class OrthogonalNet:
    """Each prunable layer adds ``tanh(x A_i + a_i) U_i Q_i`` to the output.

    ``x`` is the flattened network input and the rows of the fixed ``Q_i``
    blocks are mutually orthonormal across layers, so layer contributions
    are pairwise orthogonal for every input.  Joint-removal output MSE is
    then exactly the sum of single-removal MSEs.

    Exposes the same surface as :class:`~layerprune.toynet.Network`.
    """

    _BASE = LayerId(Stage.dn(1), 0, LayerKind.SAMPLER)

    def __init__(self, tokens, channels, layers, base, frames, removed=frozenset(), seed=0):
        self.tokens, self.channels = tokens, channels
        self._layers = layers
        self._base = base
        self._frames = frames
        self.removed = frozenset(removed)
        self.seed = seed

    @property
    def prunable(self) -> list[LayerId]:
        return list(self._layers)

    @property
    def layer_ids(self) -> list[LayerId]:
        return [self._BASE] + self.prunable

    @property
    def stages(self) -> list[Stage]:
        return [Stage.dn(1), Stage.mid()]

    def stage_set(self) -> list[Stage]:
        return [Stage.mid()] if self._layers else []

    def _params_of(self, layer):
        if layer == self._BASE:
            return [self._base]
        try:
            return list(self._layers[layer].values())
        except KeyError:
            raise LayerError(f"layer {layer} is not part of this network") from None

    def layer_params(self, layer):
        return self._params_of(layer)

    def param_count(self, layer) -> int:
        return int(sum(p.size for p in self._params_of(layer)))

    def total_params(self) -> int:
        return sum(self.param_count(l) for l in self.layer_ids)

    def prunable_params(self) -> int:
        return sum(self.param_count(l) for l in self.prunable)

    def named_parameters(self):
        out = {f"{self._BASE.key}.bias": self._base}
        for lid, ps in self._layers.items():
            for k, p in ps.items():
                out[f"{lid.key}.{k}"] = p
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def fingerprint(self) -> str:
        h = hashlib.sha256(b"orthogonal")
        for name, p in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()[:16]

    def forward(self, z_t, y=None, t=None):
        x = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        single = x.ndim == 2
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        if x.shape[1:] != (self.tokens, self.channels):
            raise ad.ShapeError(f"forward: input shape {x.shape} does not match {(self.tokens, self.channels)}")
        b = x.shape[0]
        flat = ad.reshape(x, (b, self.tokens * self.channels))
        out = ad.add(ad.scale(flat, 0.0), self._base)
        for lid, p in self._layers.items():
            hidden = ad.tanh(ad.add(ad.matmul(flat, p["a"]), p["a_b"]))
            out = ad.add(out, ad.matmul(ad.matmul(hidden, p["u"]), Tensor(self._frames[lid])))
        out = ad.reshape(out, (b, self.tokens, self.channels))
        if single:
            out = ad.reshape(out, out.shape[1:])
        return out, {"Mid": out}

    def __call__(self, z_t, y=None, t=None):
        return self.forward(z_t, y, t)

    def remove_layers(self, removal):
        removal = frozenset(removal)
        for lid in removal:
            if lid == self._BASE:
                raise LayerError(f"cannot remove {lid}: sampler layers are not prunable")
            if lid not in self._layers:
                raise LayerError(f"cannot remove {lid}: not part of this network")
        layers = {l: copy.deepcopy(p) for l, p in self._layers.items() if l not in removal}
        return OrthogonalNet(self.tokens, self.channels, layers, copy.deepcopy(self._base), self._frames,
                             self.removed | removal, self.seed)


def build_orthogonal(seed: int = 0, tokens: int = 16, channels: int = 8, n_layers: int = 16,
                     max_hidden: int = 8) -> OrthogonalNet:
    """Layer hidden widths are drawn from ``1..max_hidden`` so parameter
    masses differ and every removal ratio bucket is reachable."""
    dim = tokens * channels
    if dim % n_layers:
        raise ValueError(f"output dimension {dim} must split evenly across {n_layers} layers")
    k = dim // n_layers
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    layers, frames = {}, {}
    for i in range(n_layers):
        lid = LayerId(Stage.mid(), i, LayerKind.RESIDUAL)
        gain = rng.uniform(0.05, 1.0)
        hidden = int(rng.integers(1, max_hidden + 1))
        layers[lid] = {
            "a": Tensor(rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, hidden)), requires_grad=True),
            "a_b": Tensor(rng.normal(0.0, 0.2, hidden), requires_grad=True),
            "u": Tensor(rng.normal(0.0, gain, (hidden, k)), requires_grad=True),
        }
        frames[lid] = q[i * k : (i + 1) * k]
    base = Tensor(rng.normal(0.0, 0.1, dim), requires_grad=True)
    return OrthogonalNet(tokens, channels, layers, base, frames, seed=seed)


def build_disparate(spec: NetworkSpec, gain: float = 100.0) -> Network:
    """A toy network whose inner stages carry features ``gain`` times larger.

    The Dn1 -> Dn2 downsampler is scaled by ``gain`` and the Up1 -> Up2
    upsampler by ``1 / gain``, so Dn2, Mid and Up1 run at a larger scale
    while Dn1 and Up2 keep theirs.  Needs two Dn stages.
    """
    if spec.num_dn_stages != 2:
        raise ValueError("build_disparate needs a two-stage spec")
    net = build(spec)
    for lid in net.layer_ids:
        mod = net.module(lid)
        if lid.stage == Stage.dn(1) and lid.kind is LayerKind.SAMPLER and "w" in mod.params:
            mod.params["w"].data *= gain
        if lid.stage == Stage.up(1) and lid.kind is LayerKind.SAMPLER and lid.index > 0:
            mod.params["w"].data /= gain
    return net
