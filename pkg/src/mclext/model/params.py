"""Named parameter store and initialization."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import ConfigError, ShapeError
from ..numerics import Tensor
from .config import ModelConfig


class ModelParams:
    """Ordered mapping of unique names to trainable tensors."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._t:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._t[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._t[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self) -> list[str]:
        return list(self._t)

    def groups(self) -> list[str]:
        """Distinct name prefixes before the last dot, in order."""
        seen: dict[str, None] = {}
        for name in self._t:
            seen.setdefault(name.rsplit(".", 1)[0], None)
        return list(seen)

    def count(self) -> int:
        return int(sum(t.value.size for t in self._t.values()))

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.zero_grad()

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({n: Tensor(t.value.astype(dtype)) for n, t in self._t.items()})

    def copy(self) -> "ModelParams":
        return ModelParams({n: Tensor(t.value.copy()) for n, t in self._t.items()})

    def check(self, cfg: ModelConfig) -> None:
        """Raise unless names and shapes match a fresh init for ``cfg`` and every value is finite."""
        n_bins = self._t["embedder.w1"].shape[0] if "embedder.w1" in self._t else 65
        ref = init_params(cfg, seed=0, n_bins=n_bins, shapes_only=True)
        if set(ref) != set(self._t):
            missing = sorted(set(ref) - set(self._t))
            extra = sorted(set(self._t) - set(ref))
            raise ShapeError(f"parameter names do not match config (missing {missing[:5]}, unexpected {extra[:5]})")
        for name, shape in ref.items():
            if self._t[name].shape != shape:
                raise ShapeError(f"{name}: shape {self._t[name].shape}, config expects {shape}")
            if not np.all(np.isfinite(self._t[name].value)):
                raise ShapeError(f"{name}: non-finite values")


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str, int]]:
    """(name, shape, init kind, fan_in) for every parameter, in a fixed order."""
    d, h, c_in, k = cfg.embed_dim, cfg.hidden, cfg.in_maps, cfg.spk_dim
    specs = [
        ("encoder.w", (d, c_in, 3, 3), "uniform", c_in * 9),
        ("encoder.b", (d,), "uniform", c_in * 9),
    ]
    for g in range(cfg.downsample_depth):
        specs += [
            (f"down{g}.norm_g", (d,), "ones", 0),
            (f"down{g}.norm_b", (d,), "zeros", 0),
            (f"down{g}.w", (d, d, 3, 3), "uniform", d * 9),
            (f"down{g}.b", (d,), "uniform", d * 9),
        ]
    for b in range(cfg.n_blocks):
        for unit in ("freq", "time"):
            p = f"block{b}.{unit}"
            specs += [
                (f"{p}.ln_g", (d,), "ones", 0),
                (f"{p}.ln_b", (d,), "zeros", 0),
                (f"{p}.w_ih", (2, d, 4 * h), "uniform", h),
                (f"{p}.w_hh", (2, h, 4 * h), "uniform", h),
                (f"{p}.bias", (2, 4 * h), "lstm_bias", h),
                (f"{p}.proj_w", (2 * h, d), "uniform", 2 * h),
                (f"{p}.proj_b", (d,), "uniform", 2 * h),
            ]
    for j in cfg.fusion_sites():
        p = f"fuse{j}"
        if cfg.fusion == "concatenation":
            specs += [
                (f"{p}.w", (k, d), "uniform", k),
                (f"{p}.b", (d,), "zeros", 0),
                (f"{p}.out_w", (2 * d, d), "uniform", 2 * d),
                (f"{p}.out_b", (d,), "zeros", 0),
            ]
        elif cfg.fusion == "addition":
            specs += [(f"{p}.w", (k, d), "uniform", k), (f"{p}.b", (d,), "zeros", 0)]
        elif cfg.fusion == "multiplication":
            specs += [(f"{p}.w", (k, d), "uniform", k), (f"{p}.b", (d,), "ones", 0)]
        elif cfg.fusion == "film":
            specs += [
                (f"{p}.gamma_w", (k, d), "uniform", k),
                (f"{p}.gamma_b", (d,), "ones", 0),
                (f"{p}.beta_w", (k, d), "uniform", k),
                (f"{p}.beta_b", (d,), "zeros", 0),
            ]
    if cfg.uses_embedding:
        m = cfg.embed_hidden
        specs += [
            ("embedder.w1", (None, m), "uniform", None),  # rows filled from n_bins at init
            ("embedder.b1", (m,), "zeros", 0),
            ("embedder.w2", (m, m), "uniform", m),
            ("embedder.b2", (m,), "zeros", 0),
            ("embedder.w_out", (2 * m, k), "uniform", 2 * m),
            ("embedder.b_out", (k,), "zeros", 0),
        ]
    specs += [
        ("decoder.w", (d, 2, 3, 3), "uniform", d * 9),
        ("decoder.b", (2,), "zeros", 0),
    ]
    return specs


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32, n_bins: int = 65, shapes_only: bool = False):
    """Fresh parameters.  ``n_bins`` sizes the embedder input layer.

    With ``shapes_only`` a ``{name: shape}`` dict is returned instead; the
    embedder input rows are then taken as ``n_bins``.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape, kind, fan_in in _specs(cfg):
        if shape[0] is None:
            shape = (n_bins,) + shape[1:]
            fan_in = n_bins
        if shapes_only:
            out[name] = shape
            continue
        if kind == "uniform":
            out[name] = _uniform(rng, shape, fan_in, dtype)
        elif kind == "lstm_bias":
            # a positive forget-gate offset lets the prompt survive the long run of enrollment frames
            b = _uniform(rng, shape, fan_in, dtype)
            hid = shape[-1] // 4
            b[:, hid: 2 * hid] += cfg.forget_bias
            out[name] = b
        elif kind == "ones":
            out[name] = np.ones(shape, dtype=dtype)
        else:
            out[name] = np.zeros(shape, dtype=dtype)
    return out if shapes_only else ModelParams({n: Tensor(v) for n, v in out.items()})
