"""Patch backbone producing (global, dense) representations, and the two heads."""

from __future__ import annotations

import json
import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor

BLOCK_TYPES = ("attention", "pool")


@dataclass(frozen=True)
class BackboneConfig:
    patch: int = 16
    in_chans: int = 3
    dim: int = 32
    depth: int = 1
    block: str = "attention"
    mlp_ratio: int = 2
    head_hidden: int = 64
    bottleneck: int = 32
    n_prototypes: int = 256
    pos_embed: bool = True
    ln_eps: float = 1e-6
    norm_eps: float = 1e-9

    def __post_init__(self):
        if self.n_prototypes < 2:
            raise ValueError("need at least two prototypes")
        if self.dim < 4 or self.dim % 4:
            raise ValueError("feature dim must be a multiple of 4 and at least 4")
        if self.block not in BLOCK_TYPES:
            raise ValueError(f"block must be one of {BLOCK_TYPES}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ModelState:
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    center: np.ndarray
    step: int = 0
    config: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if list(self.student) != list(self.teacher):
            raise ValueError("student and teacher parameter names differ")
        for k in self.student:
            if self.student[k].shape != self.teacher[k].shape:
                raise ValueError(f"shape mismatch for {k}")


# ---------------------------------------------------------------------------
# parameters


def _linear(rng, params, name, fan_in, fan_out):
    params[f"{name}.w"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
    params[f"{name}.b"] = np.zeros(fan_out)


def _norm(params, name, dim):
    params[f"{name}.w"] = np.ones(dim)
    params[f"{name}.b"] = np.zeros(dim)


def init_params(cfg: BackboneConfig, seed: int | np.random.SeedSequence = 0) -> dict[str, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(seed))
    d = cfg.dim
    p: dict[str, np.ndarray] = {}
    _linear(rng, p, "embed", cfg.patch * cfg.patch * cfg.in_chans, d)
    for i in range(cfg.depth):
        blk = f"blk{i}"
        _norm(p, f"{blk}.ln1", d)
        if cfg.block == "attention":
            _linear(rng, p, f"{blk}.qkv", d, 3 * d)
        _linear(rng, p, f"{blk}.proj", d, d)
        _norm(p, f"{blk}.ln2", d)
        _linear(rng, p, f"{blk}.fc1", d, cfg.mlp_ratio * d)
        _linear(rng, p, f"{blk}.fc2", cfg.mlp_ratio * d, d)
    _norm(p, "norm", d)
    for head in ("ghead", "lhead"):
        _linear(rng, p, f"{head}.fc1", d, cfg.head_hidden)
        _linear(rng, p, f"{head}.fc2", cfg.head_hidden, cfg.bottleneck)
        p[f"{head}.proto"] = rng.normal(size=(cfg.n_prototypes, cfg.bottleneck))
    return p


def init_state(cfg: BackboneConfig, seed: int = 0) -> ModelState:
    """Student and teacher start from the same random draw."""
    params = init_params(cfg, seed)
    return ModelState(
        student={k: v.copy() for k, v in params.items()},
        teacher={k: v.copy() for k, v in params.items()},
        center=np.zeros(cfg.n_prototypes),
        step=0,
        config=cfg,
    )


def n_parameters(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


# ---------------------------------------------------------------------------
# forward


def patchify(images: np.ndarray, r: int) -> np.ndarray:
    """``(B, h, w, C) -> (B, K, r*r*C)`` with tokens in row-major grid order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    B, h, w, C = images.shape
    if h % r or w % r:
        raise ValueError(f"view size {h}x{w} is not divisible by patch size {r}")
    ht, wt = h // r, w // r
    x = images.reshape(B, ht, r, wt, r, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, ht * wt, r * r * C)


def sincos_embedding(grid: tuple[int, int], dim: int) -> np.ndarray:
    """Fixed 2-D sine/cosine code of each token's normalised view position."""
    ht, wt = grid
    jj, ii = np.meshgrid((np.arange(wt) + 0.5) / wt, (np.arange(ht) + 0.5) / ht)
    freqs = np.pi * (np.arange(dim // 4) + 1.0)
    u = jj.ravel()[:, None] * freqs
    v = ii.ravel()[:, None] * freqs
    return np.concatenate([np.sin(u), np.cos(u), np.sin(v), np.cos(v)], axis=1)


def _dense(x, P, name):
    return nx.matmul(x, P[f"{name}.w"]) + P[f"{name}.b"]


def _ln(x, P, name, eps):
    return nx.layer_norm(x, P[f"{name}.w"], P[f"{name}.b"], eps)


def _wrap(params) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def forward(params, images: np.ndarray, cfg: BackboneConfig,
            pos_embed: bool | None = None) -> tuple[Tensor, Tensor]:
    """Return ``(z_bar, z)`` with shapes ``(B, d)`` and ``(B, K, d)``.

    ``z`` rows follow the same row-major grid order as
    :func:`glsd.geometry.token_centers`; ``z_bar`` is the token mean.
    """
    P = _wrap(params)
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    _, h, w, _ = images.shape
    grid = (h // cfg.patch, w // cfg.patch)
    x = _dense(Tensor(patchify(images, cfg.patch)), P, "embed")
    if cfg.pos_embed if pos_embed is None else pos_embed:
        x = x + sincos_embedding(grid, cfg.dim)
    d = cfg.dim
    for i in range(cfg.depth):
        blk = f"blk{i}"
        y = _ln(x, P, f"{blk}.ln1", cfg.ln_eps)
        if cfg.block == "attention":
            qkv = _dense(y, P, f"{blk}.qkv")
            q = qkv[..., :d]
            k = qkv[..., d:2 * d]
            v = qkv[..., 2 * d:]
            attn = nx.softmax(nx.matmul(q, nx.transpose(k)), temperature=np.sqrt(d))
            mixed = nx.matmul(attn, v)
        else:
            mixed = nx.mean(y, axis=1, keepdims=True) - y
        x = x + _dense(mixed, P, f"{blk}.proj")
        y = _ln(x, P, f"{blk}.ln2", cfg.ln_eps)
        x = x + _dense(nx.gelu(_dense(y, P, f"{blk}.fc1")), P, f"{blk}.fc2")
    z = _ln(x, P, "norm", cfg.ln_eps)
    return nx.mean(z, axis=1), z


# ---------------------------------------------------------------------------
# heads


def head_logits(params, rep, cfg: BackboneConfig, which: str = "global") -> Tensor:
    """MLP, L2-normalised bottleneck, then cosine against unit-norm prototypes."""
    if which not in ("global", "local"):
        raise ValueError("which must be 'global' or 'local'")
    name = "ghead" if which == "global" else "lhead"
    P = _wrap(params)
    rep = rep if isinstance(rep, Tensor) else Tensor(rep)
    y = nx.gelu(_dense(rep, P, f"{name}.fc1"))
    y = _dense(y, P, f"{name}.fc2")
    y = nx.l2_normalize(y, eps=cfg.norm_eps)
    return nx.wn_linear(y, P[f"{name}.proto"])


def head_probs(logits, role: str, tau_s: float = 0.1, tau_t: float = 0.04,
               center: np.ndarray | None = None) -> Tensor:
    """Student: ``softmax(l / tau_s)``; teacher: ``softmax((l - c) / tau_t)``."""
    if role == "student":
        return nx.softmax(logits, tau_s)
    if role == "teacher":
        if center is None:
            raise ValueError("teacher role requires a center vector")
        return nx.softmax(nx.sub(logits, center), tau_t)
    raise ValueError("role must be 'student' or 'teacher'")


def head(params, rep, cfg: BackboneConfig, which: str, role: str,
         tau_s: float = 0.1, tau_t: float = 0.04, center: np.ndarray | None = None) -> Tensor:
    return head_probs(head_logits(params, rep, cfg, which), role, tau_s, tau_t, center)


# ---------------------------------------------------------------------------
# teacher updates


def ema_update(state: ModelState, lam: float) -> ModelState:
    """``teacher <- lam * teacher + (1 - lam) * student`` for every parameter."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"EMA coefficient {lam} outside [0, 1]")
    teacher = {k: lam * state.teacher[k] + (1.0 - lam) * state.student[k] for k in state.teacher}
    return ModelState(state.student, teacher, state.center, state.step, state.config)


def center_update(center: np.ndarray, teacher_logits: np.ndarray, m: float) -> np.ndarray:
    logits = np.asarray(teacher_logits, dtype=np.float64)
    logits = logits.reshape(-1, logits.shape[-1])
    if len(logits) == 0:
        raise ValueError("empty teacher batch")
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"center momentum {m} outside [0, 1]")
    return m * center + (1.0 - m) * logits.mean(axis=0)
