"""Training loop, configuration, checkpoint (de)serialisation and evaluation.

One :func:`train_step` runs, in order:

1. teacher refresh by EMA and pseudo-labels for the target batch;
2. the full dual-path forward pass;
3. a discriminator update on detached backbone features;
4. a student update on ``seg + lam * st + beta * adv``.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import torch

from . import losses as L
from .checkpoint import Checkpoint, flatten_optimizer, restore_optimizer
from .data import DatasetError, DatasetManifest, batch_indices
from .metrics import ConfusionMatrix, EvalReport, summarize
from .network import StudentEnsemble, disc_output_size, forward_full, predict, predict_source_path, segment
from .selftrain import PARADIGMS, TeacherState, init_teacher, self_training_round

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CONFIG_ENV = "STDASEG_CONFIG"

# file keys that differ from attribute names
_ALIASES = {"lambda": "lam"}


@dataclass
class TrainConfig:
    """Flat training configuration. Serialised as a JSON object; see :meth:`to_dict`.

    Optimiser defaults are the DeepLabV3 student settings (SGD, lr 1e-3,
    momentum 0.9, weight decay 1e-4) and Adam at 2.5e-4 for discriminators.
    """

    backbone_kind: str = "tiny_cnn"
    decoder_kind: str = "conv_head"
    channels: int = 32
    downsample: int = 4
    backbone_width: int = 0  # 0: same as channels
    ddm_reduction: int = 4
    use_ddm: bool = True
    dual_path: bool = True
    num_classes: int = 6
    main_optimizer: str = "sgd"
    main_lr: float = 1e-3
    main_momentum: float = 0.9
    main_weight_decay: float = 1e-4
    disc_optimizer: str = "adam"
    disc_lr: float = 2.5e-4
    disc_beta1: float = 0.9
    disc_beta2: float = 0.99
    lr_schedule: str = "constant"  # or "poly"
    lr_power: float = 0.9
    lam: float = L.DEFAULT_LAMBDA
    beta: float = L.DEFAULT_BETA
    alpha: float = 0.99
    paradigm: str = "decoder_only"
    vote: str = "prob"
    ema_interval: int = 1
    st_burn_in: int = 0
    max_iters: int = 100
    batch_size: int = 4
    patch_size: int = 64
    seed: int = 0
    checkpoint_interval: int = 0
    dtype: str = "float32"
    palette: list = field(default_factory=list)  # only for palette-based decoders

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.main_lr <= 0 or self.disc_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lambda and beta must be nonnegative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}")
        if self.main_optimizer not in ("sgd", "adam") or self.disc_optimizer not in ("sgd", "adam"):
            raise ValueError("optimizers must be 'sgd' or 'adam'")
        if self.lr_schedule not in ("constant", "poly"):
            raise ValueError("lr_schedule must be 'constant' or 'poly'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if min(self.max_iters, self.checkpoint_interval, self.st_burn_in) < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.batch_size < 1 or self.patch_size < 1 or self.ema_interval < 1:
            raise ValueError("batch_size, patch_size and ema_interval must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema version {version}")
        for k, v in _ALIASES.items():
            if k in d:
                d[v] = d.pop(k)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)


def build_ensemble(config: TrainConfig) -> StudentEnsemble:
    bk = {"width": config.backbone_width} if config.backbone_width and config.backbone_kind == "tiny_cnn" else {}
    dk = {"palette": config.palette} if config.palette else {}
    torch.manual_seed(config.seed)
    ens = StudentEnsemble(
        num_classes=config.num_classes,
        channels=config.channels,
        downsample=config.downsample,
        backbone=config.backbone_kind,
        decoder=config.decoder_kind,
        reduction=config.ddm_reduction,
        use_ddm=config.use_ddm,
        backbone_kwargs=bk,
        decoder_kwargs=dk,
    )
    if config.dtype == "float64":
        ens = ens.double()
    return ens


def _make_optimizer(kind, params, lr, momentum=0.9, weight_decay=0.0, betas=(0.9, 0.999)):
    params = list(params)
    if not params:
        return None
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    return torch.optim.Adam(params, lr=lr, betas=betas, weight_decay=weight_decay)


class TrainState:
    """Everything that evolves during training. The loop is its only writer."""

    def __init__(self, config: TrainConfig, ensemble: Optional[StudentEnsemble] = None):
        self.config = config
        self.ensemble = ensemble if ensemble is not None else build_ensemble(config)
        self.teacher: TeacherState = init_teacher(self.ensemble, config.paradigm, config.alpha)
        c = config
        self.opt_main = _make_optimizer(
            c.main_optimizer, self.ensemble.student_parameters(), c.main_lr, c.main_momentum,
            c.main_weight_decay if c.main_optimizer == "sgd" else 0.0,
        )
        self.opt_disc = _make_optimizer(
            c.disc_optimizer, self.ensemble.disc_parameters(), c.disc_lr, betas=(c.disc_beta1, c.disc_beta2)
        )
        self.step = 0
        self.history: list[dict] = []

    # -- checkpoint conversion

    def to_checkpoint(self) -> Checkpoint:
        tensors = {}
        for k, v in self.ensemble.state_dict().items():
            tensors[f"ensemble/{k}"] = v
        for k, v in self.teacher.state_dict().items():
            tensors[f"teacher/{k}"] = v
        meta = {
            "config": self.config.to_dict(),
            "step": self.step,
            "teacher": {"paradigm": self.teacher.paradigm, "alpha": self.teacher.alpha, "step": self.teacher.step},
        }
        for name in ("opt_main", "opt_disc"):
            opt = getattr(self, name)
            if opt is not None:
                meta[name] = flatten_optimizer(name, opt, tensors)
        return Checkpoint({k: v.detach().clone() for k, v in tensors.items()}, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: Optional[TrainConfig] = None) -> "TrainState":
        saved = TrainConfig.from_dict(ckpt.meta["config"])
        state = cls(config or saved)
        sub = lambda p: {k[len(p):]: v for k, v in ckpt.tensors.items() if k.startswith(p)}
        state.ensemble.load_state_dict(sub("ensemble/"))
        tmeta = ckpt.meta["teacher"]
        if tmeta["paradigm"] == state.teacher.paradigm:
            state.teacher.load_state_dict(sub("teacher/"))
            state.teacher.step = int(tmeta["step"])
        for name in ("opt_main", "opt_disc"):
            opt = getattr(state, name)
            if opt is not None and name in ckpt.meta:
                restore_optimizer(name, opt, ckpt.meta[name], ckpt.tensors)
        state.step = int(ckpt.meta["step"])
        return state


def _set_lr(state: TrainState):
    c = state.config
    if c.lr_schedule != "poly" or c.max_iters == 0:
        return
    factor = (1 - state.step / c.max_iters) ** c.lr_power
    for opt, base in ((state.opt_main, c.main_lr), (state.opt_disc, c.disc_lr)):
        if opt is not None:
            for g in opt.param_groups:
                g["lr"] = base * factor


def train_step(state: TrainState, batch_s, batch_t) -> tuple[TrainState, L.LossBundle]:
    """One optimisation step. ``batch_s = (x_s, y_s)``; ``batch_t`` is ``x_t`` (or ``(x_t, _)``)."""
    c = state.config
    ens = state.ensemble
    x_s, y_s = batch_s
    x_t = batch_t[0] if isinstance(batch_t, (tuple, list)) else batch_t
    if x_s.shape[0] == 0 or x_t.shape[0] == 0:
        raise ValueError("batches must be nonempty")
    if x_s.shape[1:] != x_t.shape[1:]:
        raise ValueError(f"source {tuple(x_s.shape)} and target {tuple(x_t.shape)} batch shapes differ")
    dtype = next(ens.parameters()).dtype
    x_s, x_t = x_s.to(dtype), x_t.to(dtype)
    _set_lr(state)
    ens.train()

    # (1) teacher refresh and pseudo-labels
    use_st = c.lam > 0 and state.step >= c.st_burn_in
    do_ema = state.step % c.ema_interval == 0
    pseudo = None
    if c.dual_path:
        if use_st:
            pseudo, _ = self_training_round(state.teacher, ens, x_t, vote=c.vote, update=do_ema)
        elif do_ema:
            from .selftrain import ema_update
            ema_update(state.teacher, ens)
    else:
        pseudo = _single_path_teacher(state, x_t, use_st, do_ema)

    # (2) forward
    if c.dual_path:
        out = forward_full(ens, x_s, x_t)
        feats = out["features"]
    else:
        size = tuple(x_s.shape[-2:])
        f_ss, f_st = ens.backbone_s(x_s), ens.backbone_s(x_t)
        feats = {"S-s": f_ss, "S-t": f_st}
        out = {"logits_src_style": {"s": segment(ens.decoder_s, f_ss, size), "t": segment(ens.decoder_s, f_st, size)}}

    # (3) discriminator step on detached features
    parts: dict = {}
    if c.beta > 0:
        pairs = [("S", ens.disc_s, feats["S-s"], feats["S-t"])]
        if c.dual_path:
            pairs.append(("T", ens.disc_t, feats["T-t"], feats["T-s"]))
        d_total = 0.0
        for tag, disc, real, fake in pairs:
            d = L.discriminator_loss(disc(real.detach()), disc(fake.detach()))
            parts[f"disc_{tag}"] = d
            d_total = d_total + d
        state.opt_disc.zero_grad(set_to_none=True)
        d_total.backward()
        state.opt_disc.step()

    # (4) student step
    parts["seg_S"] = L.seg_loss(out["logits_src_style"]["s"], y_s)
    if c.dual_path:
        parts["seg_T"] = L.seg_loss(out["logits_tgt_style"]["s"], y_s)
    if pseudo is not None:
        if c.paradigm == "decoder_only" or not c.dual_path:
            parts["st_S"] = L.st_loss(out["logits_src_style"]["t"], pseudo)
        if c.dual_path:
            parts["st_T"] = L.st_loss(out["logits_tgt_style"]["t"], pseudo)
    if c.beta > 0:
        discs = [ens.disc_s] + ([ens.disc_t] if c.dual_path else [])
        for d in discs:
            d.requires_grad_(False)
        parts["adv_S"] = L.generator_loss(ens.disc_s(feats["S-t"]))
        if c.dual_path:
            parts["adv_T"] = L.generator_loss(ens.disc_t(feats["T-s"]))
        for d in discs:
            d.requires_grad_(True)
    try:
        bundle = L.combine(parts, c.lam, c.beta)
    except L.NonFiniteLossError as exc:
        raise L.NonFiniteLossError(f"step {state.step}: {exc}") from None
    state.opt_main.zero_grad(set_to_none=True)
    bundle.combined.backward()
    state.opt_main.step()
    state.step += 1
    return state, bundle


@torch.no_grad()
def _single_path_teacher(state, x_t, use_st, do_ema):
    from .selftrain import PseudoLabel, ema_update

    ens, teacher = state.ensemble, state.teacher
    if teacher.paradigm != "decoder_only":
        raise ValueError("single-path training supports only the decoder_only teacher")
    if do_ema:
        ema_update(teacher, {"decoder_s": ens.decoder_s, "decoder_t": ens.decoder_t})
    if not use_st:
        return None
    logits = segment(teacher.decoder_s, ens.backbone_s(x_t), tuple(x_t.shape[-2:]))
    return PseudoLabel(logits.argmax(dim=1), teacher.step)


def _validate_manifests(config: TrainConfig, src: DatasetManifest, tgt: DatasetManifest):
    if len(src) == 0 or len(tgt) == 0:
        raise DatasetError("source and target manifests must be nonempty")
    if not src.has_labels:
        raise DatasetError("source manifest has no labels")
    for m in (src, tgt):
        if m.patch_size != config.patch_size:
            raise DatasetError(f"{m.domain} manifest patch size {m.patch_size} != config patch size {config.patch_size}")
        if m.num_classes != config.num_classes:
            raise DatasetError(f"{m.domain} manifest has {m.num_classes} classes, config says {config.num_classes}")
    feat = config.patch_size // config.downsample
    if config.beta > 0 and disc_output_size(feat) < 1:
        raise ValueError(
            f"patch size {config.patch_size} / downsample {config.downsample} gives {feat}x{feat} features, "
            "too small for the discriminator (need at least 12x12)"
        )
    # touch one patch of each so unreadable files fail before step 0
    src.get(0)
    tgt.get(0, with_label=False)


def fit(
    config: TrainConfig,
    source: DatasetManifest,
    target: DatasetManifest,
    out_dir=None,
    resume: Optional[Union[Checkpoint, str, os.PathLike]] = None,
    log_path=None,
) -> Checkpoint:
    """Run ``config.max_iters`` steps and return the final checkpoint.

    With ``out_dir`` the run writes ``config.json``, ``train_log.jsonl``,
    ``ckpt_<step>.bin`` every ``checkpoint_interval`` steps and ``final.bin``.
    """
    _validate_manifests(config, source, target)
    torch.use_deterministic_algorithms(True, warn_only=True)
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else Checkpoint.load(resume)
        state = TrainState.from_checkpoint(ckpt, config)
    else:
        state = TrainState(config)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        config.save(out_dir / "config.json")
        if log_path is None:
            log_path = out_dir / "train_log.jsonl"
    log_fh = open(log_path, "a" if resume is not None else "w") if log_path is not None else None
    try:
        while state.step < config.max_iters:
            step = state.step
            xs, ys = source.load_batch(batch_indices(len(source), config.batch_size, config.seed, step))
            xt, _ = target.load_batch(batch_indices(len(target), config.batch_size, config.seed + 1, step), with_labels=False)
            _, bundle = train_step(state, (xs, ys), xt)
            rec = {"step": step, **bundle.record()}
            state.history.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log_fh.flush()
            if step % 50 == 0:
                log.info("step %d combined %.4f", step, rec["combined"])
            if out_dir is not None and config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
                state.to_checkpoint().save(out_dir / f"ckpt_{state.step:06d}.bin")
    finally:
        if log_fh is not None:
            log_fh.close()
    ckpt = state.to_checkpoint()
    ckpt.meta["history"] = state.history
    if out_dir is not None:
        ckpt.save(out_dir / "final.bin")
    return ckpt


def _as_ensemble(model) -> tuple[StudentEnsemble, TrainConfig]:
    if isinstance(model, (str, os.PathLike)):
        model = Checkpoint.load(model)
    if isinstance(model, Checkpoint):
        model = TrainState.from_checkpoint(model)
    if isinstance(model, TrainState):
        return model.ensemble, model.config
    if isinstance(model, StudentEnsemble):
        return model, None
    raise TypeError(f"cannot evaluate {type(model).__name__}")


@torch.no_grad()
def evaluate(model, manifest: DatasetManifest, batch_size: int = 8, vote: Optional[str] = None, single_path: Optional[bool] = None) -> EvalReport:
    """Soft-voted two-path prediction on each labelled patch, accumulated into one report.

    ``model`` may be a checkpoint, a checkpoint path, a train state or an ensemble.
    """
    if not manifest.has_labels:
        raise DatasetError("evaluation manifest has no labels")
    ens, cfg = _as_ensemble(model)
    if vote is None:
        vote = cfg.vote if cfg else "prob"
    if single_path is None:
        single_path = cfg is not None and not cfg.dual_path
    ens.eval()
    dtype = next(ens.parameters()).dtype if any(True for _ in ens.parameters()) else torch.float32
    cm = ConfusionMatrix(manifest.num_classes)
    for lo in range(0, len(manifest), batch_size):
        idx = range(lo, min(lo + batch_size, len(manifest)))
        x, y = manifest.load_batch(idx)
        x = x.to(dtype)
        pred = predict_source_path(ens, x) if single_path else predict(ens, x, vote)
        cm.accumulate(pred.numpy(), y.numpy())
    return summarize(cm, manifest.class_names)


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
