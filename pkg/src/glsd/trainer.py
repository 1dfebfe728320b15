"""Training loop: multi-crop views, teacher/student forward, AdamW, EMA teacher."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .augment import MultiCropConfig, make_views
from .checkpoint import save_checkpoint
from .data import Dataset, load_dataset
from .geometry import similarity_match_batch, token_centers
from .losses import ForwardBundle, Setting, total_loss
from .model import (BackboneConfig, ModelState, center_update, ema_update, forward,
                    head_logits, head_probs, init_state)
from .numerics import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    setting: str = "geometric"
    dataset: str = ""
    out_dir: str = "runs/default"
    seed: int = 0
    epochs: int = 30
    batch_size: int = 16
    # peak lr = base_lr * batch_size / 256
    base_lr: float = 0.05
    min_lr: float = 1e-6
    warmup_epochs: int = 2
    weight_decay: float = 0.04
    weight_decay_end: float = 0.4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_grad: float = 0.0
    lambda_ema: float = 0.99
    lambda_ema_end: float = 1.0
    ema_every: str = "step"
    tau_s: float = 0.1
    tau_t: float = 0.04
    center_momentum: float = 0.9
    # "pooled": one center over both heads' teacher logits; "separate": one per head
    center_mode: str = "pooled"
    local_weight: float = 1.0
    n_local_crops: int = 8
    global_size: int = 64
    local_size: int = 32
    patch: int = 16
    photometric: bool = True
    teacher_all_views: bool = False
    dim: int = 32
    depth: int = 1
    block: str = "attention"
    mlp_ratio: int = 2
    head_hidden: int = 64
    bottleneck: int = 32
    n_prototypes: int = 256
    pos_embed: bool = True
    threads: int = 1

    def __post_init__(self):
        Setting.parse(self.setting)
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs cannot exceed epochs")
        if self.center_mode not in ("pooled", "separate"):
            raise ValueError("center_mode must be 'pooled' or 'separate'")
        if self.ema_every not in ("step", "epoch"):
            raise ValueError("ema_every must be 'step' or 'epoch'")

    # -- derived configs -----------------------------------------------------

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            patch=self.patch, dim=self.dim, depth=self.depth, block=self.block,
            mlp_ratio=self.mlp_ratio, head_hidden=self.head_hidden,
            bottleneck=self.bottleneck, n_prototypes=self.n_prototypes,
            pos_embed=self.pos_embed,
        )

    def multicrop(self) -> MultiCropConfig:
        return MultiCropConfig(global_size=self.global_size, local_size=self.local_size,
                               n_local=self.n_local_crops, patch=self.patch,
                               photometric=self.photometric)

    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    # -- key=value files ---------------------------------------------------

    @classmethod
    def coerce(cls, key: str, value: str):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        if key not in fields:
            raise KeyError(f"unknown config key {key!r}")
        kind = type(fields[key].default)
        if kind is bool:
            low = str(value).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"{key}: expected a boolean, got {value!r}")
        return kind(value)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = cls.coerce(key, val)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 0.0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


@dataclass
class StepOutput:
    state: ModelState
    opt: OptimizerState
    metrics: dict
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    teacher_grads: dict[str, np.ndarray] = field(default_factory=dict)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedules


def cosine_schedule(step: int, total: int, start: float, end: float,
                    warmup_steps: int = 0, warmup_start: float = 0.0) -> float:
    """Linear warmup to ``start`` then half-cosine to ``end`` at step ``total - 1``."""
    if step < warmup_steps:
        return warmup_start + (start - warmup_start) * step / warmup_steps
    span = total - 1 - warmup_steps
    if span <= 0:
        return end
    t = min(step - warmup_steps, span) / span
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * t))


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    return math.ceil(n_images / batch_size)


def lr_at(step: int, config: TrainConfig, n_steps_epoch: int) -> float:
    total = config.epochs * n_steps_epoch
    return cosine_schedule(step, total, config.peak_lr(), config.min_lr,
                           warmup_steps=config.warmup_epochs * n_steps_epoch)


def ema_at(step: int, config: TrainConfig, total: int) -> float:
    return cosine_schedule(step, total, config.lambda_ema, config.lambda_ema_end)


def wd_at(step: int, config: TrainConfig, total: int) -> float:
    return cosine_schedule(step, total, config.weight_decay, config.weight_decay_end)


# ---------------------------------------------------------------------------
# optimizer


def adamw_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                 opt: OptimizerState, lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Decoupled weight decay Adam; 1-D parameters (biases, norms) are not decayed."""
    t = opt.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * opt.m[k] + (1.0 - beta1) * g
        v = beta2 * opt.v[k] + (1.0 - beta2) * g * g
        wd = weight_decay if p.ndim > 1 else 0.0
        step = (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_p[k] = p * (1.0 - lr * wd) - lr * step
        new_m[k], new_v[k] = m, v
    return new_p, OptimizerState(new_m, new_v, t, lr)


# ---------------------------------------------------------------------------
# one step


def _view_seed(config: TrainConfig, step: int, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([config.seed, step, i])


def _threads(config: TrainConfig) -> int:
    env = os.environ.get("GLTD_THREADS")
    n = config.threads
    if env:
        n = min(n, int(env)) if n > 1 else int(env)
    return max(1, n)


def build_views(images, config: TrainConfig, step: int):
    mc = config.multicrop()
    jobs = [(img, _view_seed(config, step, i)) for i, img in enumerate(images)]
    n = _threads(config)
    if n > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(n) as pool:
            return list(pool.map(lambda j: make_views(j[0], mc, j[1]), jobs))
    return [make_views(img, mc, seed) for img, seed in jobs]


def _head_centers(center: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(global, local)`` centers from a pooled ``(I,)`` or per-head ``(2, I)`` vector."""
    if center.ndim == 2:
        return center[0], center[1]
    return center, center


def collapse_index_rows(target: np.ndarray) -> np.ndarray:
    """Per row of a ``(B, K)`` target array: largest target multiplicity / K."""
    k = target.shape[-1]
    return np.array([np.bincount(row).max() / k for row in target.reshape(-1, k)])


@dataclass
class StepInputs:
    """Everything a step needs besides the student parameters: rendered views,
    token positions and the (constant) teacher targets."""

    glob: np.ndarray
    loc: np.ndarray | None
    n_local: int
    pos: list
    diag: list
    teacher_views: list
    t_glog: list
    t_llog: list
    t_gprob: list
    t_lprob: list
    t_reps: list
    teacher_grads: dict


def prepare_step(state: ModelState, images, config: TrainConfig, step: int | None = None) -> StepInputs:
    """Render the views of a batch and run the teacher (outside any tape)."""
    cfg = state.config
    step = state.step if step is None else step
    B = len(images)
    viewsets = build_views(images, config, step)
    n_views = len(viewsets[0])
    n_local = n_views - 2
    glob = np.stack([vs[v].image for v in range(2) for vs in viewsets])
    loc = np.stack([vs[v].image for v in range(2, n_views) for vs in viewsets]) if n_local else None
    pos, diag = [], []
    for v in range(n_views):
        encs = [token_centers(vs[v].geo, cfg.patch) for vs in viewsets]
        pos.append(np.stack([e.centers for e in encs]))
        diag.append(np.array([e.diag for e in encs]))
    teacher_views = list(range(n_views)) if config.teacher_all_views else [0, 1]

    # teacher: outside any tape, so it never receives gradient
    teacher_leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in state.teacher.items()}
    with nx.no_grad():
        t_groups = [(glob, 2)] + ([(loc, n_local)] if config.teacher_all_views and n_local else [])
        t_glog, t_llog, t_reps = [], [], []
        for arr, nv in t_groups:
            zbar, z = forward(teacher_leaves, arr, cfg)
            gl = head_logits(teacher_leaves, zbar, cfg, "global").data
            ll = head_logits(teacher_leaves, z, cfg, "local").data
            for v in range(nv):
                t_glog.append(gl[v * B:(v + 1) * B])
                t_llog.append(ll[v * B:(v + 1) * B])
                t_reps.append(z.data[v * B:(v + 1) * B])
        c_glob, c_loc = _head_centers(state.center)
        t_gprob = [head_probs(g, "teacher", tau_t=config.tau_t, center=c_glob).data for g in t_glog]
        t_lprob = [head_probs(g, "teacher", tau_t=config.tau_t, center=c_loc).data for g in t_llog]
    return StepInputs(glob, loc, n_local, pos, diag, teacher_views, t_glog, t_llog, t_gprob,
                      t_lprob, t_reps, {k: t.grad for k, t in teacher_leaves.items()})


def student_loss(leaves: dict, inputs: StepInputs, config: TrainConfig, cfg,
                 loss_log: dict | None = None):
    """Student forward and total loss for fixed teacher targets.

    Returns ``(loss, loss_global, loss_local, student_reps)``; the caller
    owns the tape.
    """
    B = len(inputs.glob) // 2
    s_glob, s_dense, s_reps = [], [], []
    groups = [(inputs.glob, 2)] + ([(inputs.loc, inputs.n_local)] if inputs.n_local else [])
    for arr, nv in groups:
        zbar, z = forward(leaves, arr, cfg)
        gp = head_probs(head_logits(leaves, zbar, cfg, "global"), "student", tau_s=config.tau_s)
        lp = head_probs(head_logits(leaves, z, cfg, "local"), "student", tau_s=config.tau_s)
        for v in range(nv):
            sl = slice(v * B, (v + 1) * B)
            s_glob.append(gp[sl])
            s_dense.append(lp[sl])
            s_reps.append(z[sl])
    tv = inputs.teacher_views
    bundle = ForwardBundle(
        teacher_global=inputs.t_gprob, student_global=s_glob,
        teacher_dense=inputs.t_lprob, student_dense=s_dense,
        teacher_reps=inputs.t_reps, student_reps=s_reps,
        teacher_pos=[inputs.pos[v] for v in tv], student_pos=inputs.pos,
        teacher_diag=[inputs.diag[v] for v in tv], student_diag=inputs.diag,
        teacher_views=tv, multicrop=not config.teacher_all_views,
    )
    loss, lg, ll = total_loss(bundle, Setting.parse(config.setting), config.local_weight,
                              log=loss_log)
    return loss, lg, ll, s_reps


def train_step(state: ModelState, opt: OptimizerState, images, config: TrainConfig,
               n_steps_epoch: int | None = None, lr: float | None = None,
               lam: float | None = None) -> StepOutput:
    """One optimisation step over a batch of original images."""
    cfg = state.config
    n_steps_epoch = n_steps_epoch or 1
    total_steps = max(1, config.epochs * n_steps_epoch)
    step = state.step
    lr = lr_at(step, config, n_steps_epoch) if lr is None else lr
    wd = wd_at(step, config, total_steps)

    inputs = prepare_step(state, images, config)
    t_glog, t_llog, t_reps = inputs.t_glog, inputs.t_llog, inputs.t_reps
    with Tape() as tape:
        leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in state.student.items()}
        loss_log: dict = {}
        loss, lg, ll, s_reps = student_loss(leaves, inputs, config, cfg, loss_log)
    if not np.isfinite(loss.item()):
        raise TrainingDiverged(f"non-finite loss at step {step}")
    tape.backward(loss)
    grads = {k: t.grad for k, t in leaves.items()}
    grad_norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if config.clip_grad > 0 and grad_norm > config.clip_grad:
        scale = config.clip_grad / (grad_norm + 1e-6)
        grads = {k: g * scale for k, g in grads.items()}

    new_student, new_opt = adamw_update(state.student, grads, opt, lr, wd,
                                        config.beta1, config.beta2, config.adam_eps)
    g_rows = np.concatenate(t_glog, axis=0).reshape(-1, cfg.n_prototypes)
    l_rows = np.concatenate(t_llog, axis=0).reshape(-1, cfg.n_prototypes)
    if config.center_mode == "pooled":
        center = center_update(state.center, np.concatenate([g_rows, l_rows]), config.center_momentum)
    else:
        c_glob, c_loc = _head_centers(state.center)
        center = np.stack([center_update(c_glob, g_rows, config.center_momentum),
                           center_update(c_loc, l_rows, config.center_momentum)])
    new_state = ModelState(new_student, state.teacher, center, step + 1, cfg)
    if config.ema_every == "step":
        lam = ema_at(step, config, total_steps) if lam is None else lam
        new_state = ema_update(new_state, lam)

    # diagnostic: similarity matchings between the two global views
    collapse = []
    for a in (0, 1):
        target, _ = similarity_match_batch(t_reps[a], s_reps[1 - a].data)
        collapse.append(collapse_index_rows(target))
    local_log = loss_log.get("local")
    metrics = {
        "step": step,
        "lr": lr,
        "loss_total": loss.item(),
        "loss_global": lg.item(),
        "loss_local": None if ll is None else ll.item(),
        "mask_fill_rate": None if local_log is None else local_log.mask_fill_rate,
        "grad_norm": grad_norm,
        "collapse_index": float(np.mean(np.concatenate(collapse))),
    }
    return StepOutput(new_state, new_opt, metrics, grads, inputs.teacher_grads)


# ---------------------------------------------------------------------------
# full run


def initial_state(config: TrainConfig) -> ModelState:
    state = init_state(config.backbone(), config.seed)
    if config.center_mode == "separate":
        state.center = np.zeros((2, state.config.n_prototypes))
    return state


@dataclass
class TrainResult:
    state: ModelState
    opt: OptimizerState
    metrics: list[dict]
    checkpoint: Path | None
    metrics_path: Path | None


def code_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def metrics_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=False)


def train(config: TrainConfig, dataset: Dataset | None = None, out_dir: str | None = None,
          progress=None) -> TrainResult:
    """Run the full schedule; writes checkpoint, metrics and manifest unless the
    output directory (``out_dir`` or ``config.out_dir``) is empty."""
    if dataset is None:
        if not config.dataset:
            raise FileNotFoundError("no dataset configured")
        dataset = load_dataset(config.dataset)
    target = out_dir if out_dir is not None else config.out_dir
    out = Path(target) if target else None
    cfg = config.backbone()
    state = initial_state(config)
    opt = OptimizerState.zeros_like(state.student)
    n = len(dataset)
    spe = steps_per_epoch(n, config.batch_size)
    total = config.epochs * spe

    metrics_fh = None
    ckpt_path = metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        metrics_fh = open(metrics_path, "w")
        ckpt_path = out / "checkpoint"
        manifest = {
            "config": config.to_dict(),
            "seed": config.seed,
            "config_hash": config.digest(),
            "code_hash": code_digest(),
            "outputs": {"checkpoint": "checkpoint.gltd", "manifest": "checkpoint.json",
                        "metrics": "metrics.jsonl"},
        }
        (out / "run.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    def write_ckpt(epoch: int) -> None:
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, state,
                            meta={"epoch": epoch, "train_config": config.to_dict()},
                            extra={"adam_m": opt.m, "adam_v": opt.v})

    history: list[dict] = []
    try:
        if config.epochs == 0:
            write_ckpt(0)
        for epoch in range(config.epochs):
            order = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence([config.seed, 10_007, epoch]))).permutation(n)
            for s in range(spe):
                idx = order[s * config.batch_size:(s + 1) * config.batch_size]
                try:
                    res = train_step(state, opt, [dataset.images[i] for i in idx], config, spe)
                except nx.NonFiniteError as exc:
                    _dump_diagnostics(out, config, state, history, exc)
                    raise TrainingDiverged(str(exc)) from exc
                state, opt = res.state, res.opt
                res.metrics["epoch"] = epoch
                history.append(res.metrics)
                if metrics_fh is not None:
                    metrics_fh.write(metrics_line(res.metrics) + "\n")
                if progress is not None:
                    progress(res.metrics)
            if config.ema_every == "epoch":
                state = ema_update(state, cosine_schedule(epoch, config.epochs,
                                                          config.lambda_ema, config.lambda_ema_end))
            write_ckpt(epoch + 1)
            log.info("epoch %d/%d done (%d steps)", epoch + 1, config.epochs, total)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return TrainResult(state, opt, history,
                       None if ckpt_path is None else ckpt_path.with_suffix(".gltd"), metrics_path)


def _dump_diagnostics(out: Path | None, config: TrainConfig, state: ModelState,
                      history: list[dict], exc: Exception) -> None:
    if out is None:
        return
    (out / "diverged.json").write_text(json.dumps({
        "error": str(exc),
        "step": state.step,
        "config": config.to_dict(),
        "last_metrics": history[-5:],
        "param_max_abs": {k: float(np.abs(v).max()) for k, v in state.student.items()},
    }, indent=1))
