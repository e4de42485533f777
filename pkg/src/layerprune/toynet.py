"""A staged U-Net-like denoiser built from shape-preserving residual blocks.

Layout for ``K`` down stages::

    Dn1 .. DnK   [stem]   body   <tap/skip>   [downsample]
    Mid                   body   <tap>
    Up1 .. UpK   [merge]  body   <tap>        [upsample | head]

``body`` layers (residual and mixer blocks) keep their input shape and are
the only removable layers.  Everything in brackets is a sampler: it either
changes shape or wires a skip connection, and is never prunable.  Up stage
``j`` concatenates the tap of Dn stage ``K - j + 1`` with its input.
"""

from __future__ import annotations

import copy
import dataclasses
import enum
import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "LayerKind",
    "Stage",
    "LayerId",
    "NetworkSpec",
    "Network",
    "LayerError",
    "build",
    "forward",
    "remove_layers",
    "param_count",
]


class LayerError(ValueError):
    """Unknown, non-prunable or otherwise invalid layer reference."""


class LayerKind(str, enum.Enum):
    RESIDUAL = "residual"
    MIXER = "mixer"
    SAMPLER = "sampler"


@dataclass(frozen=True, order=True)
class Stage:
    # sort key: Dn stages, then Mid, then Up stages
    rank: int
    kind: str
    k: int

    @classmethod
    def dn(cls, k: int) -> "Stage":
        return cls(0, "dn", k)

    @classmethod
    def mid(cls) -> "Stage":
        return cls(1, "mid", 0)

    @classmethod
    def up(cls, k: int) -> "Stage":
        return cls(2, "up", k)

    @property
    def name(self) -> str:
        if self.kind == "mid":
            return "Mid"
        return f"{'Dn' if self.kind == 'dn' else 'Up'}{self.k}"

    @classmethod
    def parse(cls, name: str) -> "Stage":
        if name == "Mid":
            return cls.mid()
        if name[:2] in ("Dn", "Up") and name[2:].isdigit():
            k = int(name[2:])
            return cls.dn(k) if name[:2] == "Dn" else cls.up(k)
        raise LayerError(f"unknown stage name {name!r}")

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True, order=True)
class LayerId:
    stage: Stage
    index: int
    kind: LayerKind = field(compare=False)

    @property
    def key(self) -> str:
        return f"{self.stage.name}.{self.index}"

    @property
    def prunable(self) -> bool:
        return self.kind is not LayerKind.SAMPLER

    def __str__(self) -> str:
        return f"{self.key}:{self.kind.value}"


def _per_stage(value, k: int, name: str) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,) * k
    value = tuple(int(v) for v in value)
    if len(value) != k:
        raise ValueError(f"{name} needs {k} entries, got {len(value)}")
    return value


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture and initialization seed of a toy denoiser."""

    num_dn_stages: int = 2
    widths: tuple[int, ...] = (8, 16)
    tokens: int = 16
    dn_residual: tuple[int, ...] | int = 2
    dn_mixer: tuple[int, ...] | int = 2
    mid_residual: int = 2
    mid_mixer: int = 2
    up_residual: tuple[int, ...] | int = 3
    up_mixer: tuple[int, ...] | int = 2
    embed_dim: int = 8
    num_classes: int = 8
    num_timesteps: int = 100
    seed: int = 0

    def __post_init__(self):
        k = self.num_dn_stages
        if k < 1:
            raise ValueError("num_dn_stages must be >= 1")
        widths = tuple(int(w) for w in self.widths)
        if len(widths) != k:
            raise ValueError(f"widths needs {k} entries, got {len(widths)}")
        if any(w < 1 for w in widths):
            raise ValueError(f"zero-width stage in widths={widths}")
        if self.tokens < 1 or self.tokens % (2 ** (k - 1)):
            raise ValueError(f"tokens={self.tokens} must be positive and divisible by {2 ** (k - 1)}")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("embed_dim must be an even integer >= 2")
        if self.num_classes < 1 or self.num_timesteps < 1:
            raise ValueError("num_classes and num_timesteps must be >= 1")
        object.__setattr__(self, "widths", widths)
        for name in ("dn_residual", "dn_mixer", "up_residual", "up_mixer"):
            counts = _per_stage(getattr(self, name), k, name)
            if any(c < 0 for c in counts):
                raise ValueError(f"{name} has a negative count")
            object.__setattr__(self, name, counts)
        if self.mid_residual < 0 or self.mid_mixer < 0:
            raise ValueError("mid counts must be >= 0")

    @property
    def in_channels(self) -> int:
        return self.widths[0]

    def stages(self) -> list[Stage]:
        k = self.num_dn_stages
        return [Stage.dn(i) for i in range(1, k + 1)] + [Stage.mid()] + [Stage.up(j) for j in range(1, k + 1)]

    def stage_geometry(self, stage: Stage) -> tuple[int, int]:
        """(tokens, width) at which the stage body runs."""
        k = self.num_dn_stages
        level = {"dn": stage.k, "mid": k, "up": k - stage.k + 1}[stage.kind]
        return self.tokens // 2 ** (level - 1), self.widths[level - 1]

    def body_counts(self, stage: Stage) -> tuple[int, int]:
        if stage.kind == "dn":
            return self.dn_residual[stage.k - 1], self.dn_mixer[stage.k - 1]
        if stage.kind == "up":
            return self.up_residual[stage.k - 1], self.up_mixer[stage.k - 1]
        return self.mid_residual, self.mid_mixer

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown NetworkSpec keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- modules


def _dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


class _Module:
    kind: LayerKind

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = {k: Tensor(v, requires_grad=True) for k, v in params.items()}

    def __call__(self, h: Tensor, ctx: dict) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def num_params(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))


class Residual(_Module):
    """h + W2 tanh(W1 h + b1) + b2, applied per token."""

    kind = LayerKind.RESIDUAL

    def __call__(self, h, ctx):
        p = self.params
        return ad.add(h, _dense(ad.tanh(_dense(h, p["w1"], p["b1"])), p["w2"], p["b2"]))


class Mixer(_Module):
    """Token-mixing map followed by a channel MLP, each with a residual add.

    Stands in for a transformer block: same residual shape contract,
    no attention.
    """

    kind = LayerKind.MIXER

    def __call__(self, h, ctx):
        p = self.params
        h = ad.add(h, ad.matmul(p["tok"], h))
        return ad.add(h, _dense(ad.tanh(_dense(h, p["w1"], p["b1"])), p["w2"], p["b2"]))


class Stem(_Module):
    """Input projection plus class and timestep conditioning."""

    kind = LayerKind.SAMPLER

    def __call__(self, h, ctx):
        p = self.params
        c = ad.add(ad.take_rows(p["cond"], ctx["y"]), ad.tanh(_dense(Tensor(ctx["temb"]), p["time_w"], p["time_b"])))
        cproj = ad.matmul(c, p["cond_w"])
        cproj = ad.reshape(cproj, (cproj.shape[0], 1, cproj.shape[1]))
        return ad.add(_dense(h, p["in_w"], p["in_b"]), cproj)


class Resample(_Module):
    """Fixed token resampling matrix followed by a learned channel map."""

    kind = LayerKind.SAMPLER

    def __init__(self, params, token_map: np.ndarray):
        super().__init__(params)
        self.token_map = Tensor(token_map)

    def __call__(self, h, ctx):
        return _dense(ad.matmul(self.token_map, h), self.params["w"], self.params["b"])


class SkipMerge(_Module):
    """Concatenate the skip feature on channels, project back to stage width."""

    kind = LayerKind.SAMPLER

    def __init__(self, params, source: Stage):
        super().__init__(params)
        self.source = source

    def __call__(self, h, ctx):
        return _dense(ad.concat([h, ctx["skips"][self.source]], axis=-1), self.params["w"], self.params["b"])


class Head(_Module):
    kind = LayerKind.SAMPLER

    def __call__(self, h, ctx):
        return _dense(h, self.params["w"], self.params["b"])


def _pool_matrix(n: int) -> np.ndarray:
    m = np.zeros((n // 2, n))
    for i in range(n // 2):
        m[i, 2 * i] = m[i, 2 * i + 1] = 0.5
    return m


def _repeat_matrix(n: int) -> np.ndarray:
    m = np.zeros((2 * n, n))
    for i in range(n):
        m[2 * i, i] = m[2 * i + 1, i] = 1.0
    return m


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


# ---------------------------------------------------------------- network


@dataclass
class _StageBlock:
    stage: Stage
    pre: list[tuple[LayerId, _Module]]
    body: list[tuple[LayerId, _Module]]
    post: list[tuple[LayerId, _Module]]

    def layers(self) -> Iterator[tuple[LayerId, _Module]]:
        yield from self.pre
        yield from self.body
        yield from self.post


class Network:
    """A built toy denoiser.  Removal returns a new instance."""

    def __init__(self, spec: NetworkSpec, blocks: list[_StageBlock], removed: frozenset = frozenset()):
        self.spec = spec
        self.blocks = blocks
        self.removed = frozenset(removed)
        self._index = {lid: mod for blk in blocks for lid, mod in blk.layers()}

    # -- structure

    @property
    def layer_ids(self) -> list[LayerId]:
        return [lid for blk in self.blocks for lid, _ in blk.layers()]

    @property
    def prunable(self) -> list[LayerId]:
        """Surviving prunable layers, in forward order."""
        return [lid for blk in self.blocks for lid, _ in blk.body]

    @property
    def stages(self) -> list[Stage]:
        return [blk.stage for blk in self.blocks]

    def stage_set(self) -> list[Stage]:
        """Stages that still hold at least one prunable layer."""
        return [blk.stage for blk in self.blocks if blk.body]

    def module(self, layer: LayerId) -> _Module:
        try:
            return self._index[layer]
        except KeyError:
            raise LayerError(f"layer {layer} is not part of this network") from None

    def layer_params(self, layer: LayerId) -> list[Tensor]:
        return list(self.module(layer).params.values())

    def param_count(self, layer: LayerId) -> int:
        return self.module(layer).num_params()

    def total_params(self) -> int:
        return int(np.sum([m.num_params() for m in self._index.values()]))

    def prunable_params(self) -> int:
        return int(np.sum([self.param_count(l) for l in self.prunable] or [0]))

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for lid in self.layer_ids:
            for pname, p in self._index[lid].params.items():
                out[f"{lid.key}.{pname}"] = p
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(sorted(self.spec.to_dict().items())).encode())
        h.update(",".join(sorted(l.key for l in self.removed)).encode())
        for name, p in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    # -- evaluation

    def forward(self, z_t, y, t) -> tuple[Tensor, dict[str, Tensor]]:
        x = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        single = x.ndim == 2
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        expected = (self.spec.tokens, self.spec.in_channels)
        if x.ndim != 3 or x.shape[1:] != expected:
            raise ad.ShapeError(f"forward: input shape {x.shape} does not match network input {expected}")
        batch = x.shape[0]
        y = np.broadcast_to(np.asarray(y, dtype=np.int64), (batch,))
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
        if np.any((y < 0) | (y >= self.spec.num_classes)):
            raise ValueError(f"condition ids must lie in [0, {self.spec.num_classes})")
        if np.any((t < 0) | (t >= self.spec.num_timesteps)):
            raise ValueError(f"timesteps must lie in [0, {self.spec.num_timesteps})")
        ctx = {"y": y, "temb": timestep_embedding(t, self.spec.embed_dim), "skips": {}}
        feats: dict[str, Tensor] = {}
        h = x
        for blk in self.blocks:
            for _, mod in blk.pre:
                h = mod(h, ctx)
            for _, mod in blk.body:
                h = mod(h, ctx)
            feats[blk.stage.name] = h
            if blk.stage.kind == "dn":
                ctx["skips"][blk.stage] = h
            for _, mod in blk.post:
                h = mod(h, ctx)
        if single:
            h = ad.reshape(h, h.shape[1:])
            feats = {k: ad.reshape(v, v.shape[1:]) for k, v in feats.items()}
        return h, feats

    def __call__(self, z_t, y, t):
        return self.forward(z_t, y, t)

    # -- surgery

    def remove_layers(self, removal: Iterable[LayerId]) -> "Network":
        removal = frozenset(removal)
        for lid in removal:
            if lid not in self._index:
                raise LayerError(f"cannot remove {lid}: not part of this network")
            if not lid.prunable:
                raise LayerError(f"cannot remove {lid}: sampler layers change shape or wire skips")
        blocks = []
        for blk in self.blocks:
            blocks.append(
                _StageBlock(
                    blk.stage,
                    [(l, copy.deepcopy(m)) for l, m in blk.pre],
                    [(l, copy.deepcopy(m)) for l, m in blk.body if l not in removal],
                    [(l, copy.deepcopy(m)) for l, m in blk.post],
                )
            )
        return Network(self.spec, blocks, self.removed | removal)

    def copy(self) -> "Network":
        return self.remove_layers(())


# ---------------------------------------------------------------- building

# Branch output scales.  Small enough that single-layer removals perturb
# the output moderately, large enough that layers differ in importance.
_BRANCH_GAIN = 0.6
_TOKEN_GAIN = 0.3
_MIXER_HIDDEN = 2


def _residual_params(rng, w):
    return {
        "w1": rng.normal(0.0, 1.0 / math.sqrt(w), (w, w)),
        "b1": rng.normal(0.0, 0.1, w),
        "w2": rng.normal(0.0, _BRANCH_GAIN * rng.uniform(0.2, 1.0) / math.sqrt(w), (w, w)),
        "b2": rng.normal(0.0, 0.02, w),
    }


def _mixer_params(rng, n, w):
    hid = _MIXER_HIDDEN * w
    return {
        "tok": rng.normal(0.0, _TOKEN_GAIN * rng.uniform(0.2, 1.0) / math.sqrt(n), (n, n)),
        "w1": rng.normal(0.0, 1.0 / math.sqrt(w), (w, hid)),
        "b1": rng.normal(0.0, 0.1, hid),
        "w2": rng.normal(0.0, _BRANCH_GAIN * rng.uniform(0.2, 1.0) / math.sqrt(hid), (hid, w)),
        "b2": rng.normal(0.0, 0.02, w),
    }


def _linear_params(rng, n_in, n_out):
    return {"w": rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out)), "b": np.zeros(n_out)}


def build(spec: NetworkSpec) -> Network:
    """Initialize a network deterministically from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    k = spec.num_dn_stages
    c, e = spec.in_channels, spec.embed_dim
    blocks = []
    for stage in spec.stages():
        n, w = spec.stage_geometry(stage)
        pre, body, post = [], [], []
        idx = 0

        def add(lst, mod):
            nonlocal idx
            lst.append((LayerId(stage, idx, mod.kind), mod))
            idx += 1

        if stage.kind == "dn" and stage.k == 1:
            add(pre, Stem({
                "cond": rng.normal(0.0, 1.0, (spec.num_classes, e)),
                "time_w": rng.normal(0.0, 1.0 / math.sqrt(e), (e, e)),
                "time_b": np.zeros(e),
                "cond_w": rng.normal(0.0, 0.5 / math.sqrt(e), (e, c)),
                "in_w": rng.normal(0.0, 1.0 / math.sqrt(c), (c, c)),
                "in_b": np.zeros(c),
            }))
        if stage.kind == "up":
            add(pre, SkipMerge(_linear_params(rng, 2 * w, w), Stage.dn(k - stage.k + 1)))
        n_res, n_mix = spec.body_counts(stage)
        for i in range(max(n_res, n_mix)):
            if i < n_res:
                add(body, Residual(_residual_params(rng, w)))
            if i < n_mix:
                add(body, Mixer(_mixer_params(rng, n, w)))
        if stage.kind == "dn" and stage.k < k:
            w_next = spec.widths[stage.k]
            add(post, Resample(_linear_params(rng, w, w_next), _pool_matrix(n)))
        if stage.kind == "up":
            if stage.k < k:
                w_next = spec.widths[k - stage.k - 1]
                add(post, Resample(_linear_params(rng, w, w_next), _repeat_matrix(n)))
            else:
                add(post, Head(_linear_params(rng, w, c)))
        blocks.append(_StageBlock(stage, pre, body, post))
    return Network(spec, blocks)


# module-level aliases mirroring the operation names


def forward(net, z_t, y, t):
    return net.forward(z_t, y, t)


def remove_layers(net, removal):
    return net.remove_layers(removal)


def param_count(net, layer: LayerId) -> int:
    return net.param_count(layer)


def prunable_fraction(net) -> float:
    return net.prunable_params() / net.total_params()
