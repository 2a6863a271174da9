"""Snippet classifier + background/foreground attention model.

Column 0 of the attention maps is background, column 1 is foreground.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numcore import (
    LOG_EPS,
    Param,
    ShapeError,
    affine_backward,
    affine_forward,
    cross_entropy,
    cross_entropy_backward,
    relu_backward,
    relu_forward,
    sigmoid,
    softmax_column,
    softmax_column_backward,
    softmax_rows,
    softmax_rows_backward,
    zero_grads,
)

BG, FG = 0, 1
ATTENTION_VARIANTS = ("two_logit", "scalar_sigmoid")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    D: int | None = None
    N: int | None = None
    L: int = 2
    attention_variant: str = "two_logit"
    init_seed: int = 0

    def validate(self) -> None:
        if self.D is None or self.N is None:
            raise ConfigError("model D and N must be set")
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if self.N < 1 or self.D < 1:
            raise ConfigError(f"D and N must be >= 1, got D={self.D}, N={self.N}")
        if self.D // 2 ** (self.L - 1) < 1:
            raise ConfigError(f"D={self.D} is too small for L={self.L} halving layers")
        if self.attention_variant not in ATTENTION_VARIANTS:
            raise ConfigError(f"unknown attention_variant {self.attention_variant!r}")

    def widths(self, out: int) -> list[int]:
        return [self.D // 2 ** l for l in range(self.L)] + [out]


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, Param]
    step: int = 0

    def param_list(self) -> list[Param]:
        return list(self.params.values())

    def copy(self) -> "Model":
        return Model(self.cfg, {k: p.copy() for k, p in self.params.items()}, self.step)


def _head_names(head: str, L: int) -> list[tuple[str, str]]:
    return [(f"{head}.{l}.w", f"{head}.{l}.b") for l in range(L)]


def init_model(cfg: ModelConfig) -> Model:
    """Glorot-uniform weights, zero biases."""
    cfg.validate()
    rng = np.random.default_rng(cfg.init_seed)
    params = {}
    att_out = 2 if cfg.attention_variant == "two_logit" else 1
    for head, out in (("cls", cfg.N), ("att", att_out)):
        widths = cfg.widths(out)
        for l, (wn, bn) in enumerate(_head_names(head, cfg.L)):
            fan_in, fan_out = widths[l], widths[l + 1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[wn] = Param(wn, rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            params[bn] = Param(bn, np.zeros((1, fan_out)))
    return Model(cfg, params)


@dataclass
class ForwardMaps:
    C: np.ndarray
    A: np.ndarray
    Cbar: np.ndarray
    Abf: np.ndarray
    Atime: np.ndarray
    yhat: np.ndarray
    # per-head lists of (layer input, pre-activation) for backward
    cache: dict = field(default=None, repr=False)

    @property
    def T(self) -> int:
        return self.Cbar.shape[0]


def _mlp_forward(params, head: str, L: int, F: np.ndarray):
    h, saved = F, []
    for l, (wn, bn) in enumerate(_head_names(head, L)):
        z = affine_forward(h, params[wn], params[bn])
        saved.append((h, z))
        h = relu_forward(z) if l < L - 1 else z
    return h, saved


def _mlp_backward(params, head: str, L: int, saved, dout: np.ndarray) -> None:
    names = _head_names(head, L)
    for l in reversed(range(L)):
        h, z = saved[l]
        if l < L - 1:
            dout = relu_backward(dout, z)
        wn, bn = names[l]
        dout = affine_backward(dout, h, params[wn], params[bn])


def forward(model: Model, F: np.ndarray) -> ForwardMaps:
    cfg = model.cfg
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 1 or F.shape[1] != cfg.D:
        raise ShapeError(f"features must be T x {cfg.D} with T >= 1, got shape {F.shape}")
    C, cls_saved = _mlp_forward(model.params, "cls", cfg.L, F)
    A, att_saved = _mlp_forward(model.params, "att", cfg.L, F)
    Cbar = softmax_rows(C)
    if cfg.attention_variant == "two_logit":
        Abf = softmax_rows(A)
    else:
        fg = sigmoid(A[:, 0])
        Abf = np.stack([1.0 - fg, fg], axis=1)
    # softmax over time of the already-normalized foreground column
    Atime = softmax_column(Abf[:, FG])
    yhat = Atime @ Cbar
    return ForwardMaps(C, A, Cbar, Abf, Atime, yhat,
                       cache={"cls": cls_saved, "att": att_saved, "variant": cfg.attention_variant})


def scalar_attention_forward(model: Model, F: np.ndarray) -> ForwardMaps:
    if model.cfg.attention_variant != "scalar_sigmoid":
        raise ConfigError("scalar_attention_forward needs attention_variant='scalar_sigmoid'")
    return forward(model, F)


def pseudo_class_weights(labels: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Inverse-frequency (background, foreground) weights over the sampled snippets."""
    sel = np.asarray(labels)[np.asarray(mask, dtype=bool)]
    m = sel.size
    n_fg = int(np.count_nonzero(sel == FG))
    n_bg = m - n_fg
    w_bg = m / (2.0 * n_bg) if n_bg else 0.0
    w_fg = m / (2.0 * n_fg) if n_fg else 0.0
    return w_bg, w_fg


@dataclass
class LossResult:
    loss: float
    video_loss: float
    pseudo_loss: float
    dC: np.ndarray
    dA: np.ndarray


def total_loss(maps: ForwardMaps, y: np.ndarray, pseudo=None, beta: float = 0.0) -> LossResult:
    """Video cross-entropy plus beta times the class-weighted pseudo-label loss.

    ``pseudo`` is anything with ``labels`` (0 background / 1 foreground) and
    ``sample_mask`` arrays of length T. Returns the loss and its gradient
    with respect to the head logits ``C`` and ``A``.
    """
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    y = np.asarray(y, dtype=np.float64)
    T = maps.T
    video_loss = cross_entropy(maps.yhat, y)

    # video term: yhat = Atime @ Cbar
    dyhat = cross_entropy_backward(maps.yhat, y)
    dCbar = np.outer(maps.Atime, dyhat)
    dAtime = maps.Cbar @ dyhat
    dAbf = np.zeros_like(maps.Abf)
    dAbf[:, FG] = softmax_column_backward(dAtime, maps.Atime)

    pseudo_loss = 0.0
    dA_direct = None
    if pseudo is not None and beta != 0.0:
        labels = np.asarray(pseudo.labels, dtype=np.int64)
        mask = np.asarray(pseudo.sample_mask, dtype=bool)
        if labels.shape != (T,) or mask.shape != (T,):
            raise ShapeError(f"pseudo labels have length {labels.size}, mask {mask.size}, expected T={T}")
        m = int(mask.sum())
        if m:
            w_bg, w_fg = pseudo_class_weights(labels, mask)
            idx = np.flatnonzero(mask)
            g = labels[idx]
            w = np.where(g == FG, w_fg, w_bg)
            p_true = maps.Abf[idx, g]
            pseudo_loss = float(np.sum(w * -np.log(np.maximum(p_true, LOG_EPS)))) / m
            # gradient straight to the attention logits (softmax/sigmoid + CE)
            coef = beta * w / m
            if maps.cache is None or maps.cache["variant"] == "two_logit":
                dA_direct = np.zeros((T, 2))
                onehot = np.zeros((idx.size, 2))
                onehot[np.arange(idx.size), g] = 1.0
                dA_direct[idx] = coef[:, None] * (maps.Abf[idx] - onehot)
            else:
                dA_direct = np.zeros((T, 1))
                dA_direct[idx, 0] = coef * (maps.Abf[idx, FG] - g)

    loss = video_loss + beta * pseudo_loss if (pseudo is not None and beta != 0.0) else video_loss
    dC = softmax_rows_backward(dCbar, maps.Cbar)
    variant = maps.cache["variant"] if maps.cache is not None else "two_logit"
    if variant == "two_logit":
        dA = softmax_rows_backward(dAbf, maps.Abf)
    else:
        fg = maps.Abf[:, FG]
        dA = ((dAbf[:, FG] - dAbf[:, BG]) * fg * (1.0 - fg))[:, None]
    if dA_direct is not None:
        dA = dA + dA_direct
    return LossResult(loss, video_loss, pseudo_loss, dC, dA)


def backward(model: Model, maps: ForwardMaps, dC: np.ndarray, dA: np.ndarray) -> None:
    """Accumulate parameter gradients from logit gradients."""
    if maps.cache is None:
        raise ValueError("maps were built without a forward cache")
    _mlp_backward(model.params, "cls", model.cfg.L, maps.cache["cls"], dC)
    _mlp_backward(model.params, "att", model.cfg.L, maps.cache["att"], dA)


def loss_and_grad(model: Model, F: np.ndarray, y: np.ndarray, pseudo=None, beta: float = 0.0) -> LossResult:
    zero_grads(model.param_list())
    maps = forward(model, F)
    res = total_loss(maps, y, pseudo, beta)
    backward(model, maps, res.dC, res.dA)
    return res


# --- checkpoints ----------------------------------------------------------
# Layout: 8-byte little-endian header length, UTF-8 JSON header, then each
# parameter's value as little-endian f64 (row-major) in header["params"] order.

def save_checkpoint(model: Model, path) -> None:
    header = {
        "config": asdict(model.cfg),
        "step": model.step,
        "params": [{"name": p.name, "shape": list(p.shape)} for p in model.param_list()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for p in model.param_list():
            f.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack_from("<Q", raw, 0)
    header = json.loads(raw[8:8 + n])
    cfg = ModelConfig(**header["config"])
    off = 8 + n
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        value = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        params[entry["name"]] = Param(entry["name"], value.astype(np.float64))
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes in checkpoint")
    return Model(cfg, params, header["step"])
