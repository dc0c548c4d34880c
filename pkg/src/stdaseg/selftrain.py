"""EMA teachers and pseudo-label generation for cross-domain separated self-training.

Two paradigms are supported:

``decoder_only``
    EMA copies of both student decoders. Pseudo-labels soft-vote the two
    teacher decoders applied to the students' disentangled target features.
``single_target``
    EMA copies of the target backbone and target decoder. Pseudo-labels are
    the argmax of the teacher target decoder, fed by the DDM on
    (student source backbone, teacher target backbone) features.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .network import StudentEnsemble, segment, soft_vote

PARADIGMS = ("decoder_only", "single_target")
DEFAULT_ALPHA = 0.99


@dataclass
class PseudoLabel:
    labels: torch.Tensor  # [B, H, W] long
    source_step: int


class TeacherState:
    """EMA teacher components. Construct with :func:`init_teacher`."""

    def __init__(
        self,
        paradigm: str,
        decoder_t: nn.Module,
        decoder_s: Optional[nn.Module] = None,
        backbone_t: Optional[nn.Module] = None,
        alpha: float = DEFAULT_ALPHA,
        step: int = 0,
    ):
        if paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}, got {paradigm!r}")
        if paradigm == "decoder_only" and (decoder_s is None or backbone_t is not None):
            raise ValueError("decoder_only teacher needs decoder_s and no backbone_t")
        if paradigm == "single_target" and (backbone_t is None or decoder_s is not None):
            raise ValueError("single_target teacher needs backbone_t and no decoder_s")
        _check_alpha(alpha)
        self.paradigm = paradigm
        self.decoder_t = decoder_t
        self.decoder_s = decoder_s
        self.backbone_t = backbone_t
        self.alpha = float(alpha)
        self.step = int(step)

    def components(self) -> dict[str, nn.Module]:
        """Teacher modules keyed by the name of their student counterpart."""
        if self.paradigm == "decoder_only":
            return {"decoder_s": self.decoder_s, "decoder_t": self.decoder_t}
        return {"backbone_t": self.backbone_t, "decoder_t": self.decoder_t}

    def parameters(self):
        for m in self.components().values():
            yield from m.parameters()

    def state_dict(self) -> dict:
        return {f"{name}.{k}": v for name, m in self.components().items() for k, v in m.state_dict().items()}

    def load_state_dict(self, sd: dict) -> None:
        for name, m in self.components().items():
            prefix = name + "."
            m.load_state_dict({k[len(prefix):]: v for k, v in sd.items() if k.startswith(prefix)})


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def _frozen_copy(module: nn.Module) -> nn.Module:
    clone = copy.deepcopy(module)
    for p in clone.parameters():
        p.requires_grad_(False)
    return clone


def init_teacher(ensemble: StudentEnsemble, paradigm: str = "decoder_only", alpha: float = DEFAULT_ALPHA) -> TeacherState:
    """Teacher components start as exact copies of the students."""
    if paradigm == "decoder_only":
        return TeacherState(
            paradigm,
            decoder_t=_frozen_copy(ensemble.decoder_t),
            decoder_s=_frozen_copy(ensemble.decoder_s),
            alpha=alpha,
        )
    if paradigm == "single_target":
        return TeacherState(
            paradigm,
            decoder_t=_frozen_copy(ensemble.decoder_t),
            backbone_t=_frozen_copy(ensemble.backbone_t),
            alpha=alpha,
        )
    raise ValueError(f"paradigm must be one of {PARADIGMS}, got {paradigm!r}")


@torch.no_grad()
def ema_update(teacher: TeacherState, students, alpha: Optional[float] = None) -> TeacherState:
    """``phi <- alpha * phi + (1 - alpha) * theta`` for every teacher tensor.

    ``students`` is a :class:`StudentEnsemble` or a mapping from component name
    to student module. Updates in place, bumps the step and returns the teacher.
    """
    alpha = teacher.alpha if alpha is None else float(alpha)
    _check_alpha(alpha)
    if isinstance(students, StudentEnsemble):
        students = students.student_modules()
    for name, t_mod in teacher.components().items():
        s_mod = students[name]
        t_params = dict(t_mod.named_parameters())
        s_params = dict(s_mod.named_parameters())
        if t_params.keys() != s_params.keys():
            raise ValueError(f"teacher {name} and student parameters do not correspond")
        for key, phi in t_params.items():
            theta = s_params[key]
            if phi.shape != theta.shape:
                raise ValueError(f"shape mismatch for {name}.{key}: {tuple(phi.shape)} vs {tuple(theta.shape)}")
            phi.mul_(alpha).add_(theta.detach(), alpha=1.0 - alpha)
        for (key, b_t), (_, b_s) in zip(t_mod.named_buffers(), s_mod.named_buffers()):
            if b_t.dtype.is_floating_point:
                b_t.mul_(alpha).add_(b_s, alpha=1.0 - alpha)
            else:
                b_t.copy_(b_s)
    teacher.step += 1
    return teacher


def _require(teacher: TeacherState, paradigm: str):
    if teacher.paradigm != paradigm:
        raise ValueError(f"teacher paradigm is {teacher.paradigm!r}, operation needs {paradigm!r}")


@torch.no_grad()
def pseudo_label_decoder_only(
    teacher: TeacherState, d_s_t: torch.Tensor, d_t_t: torch.Tensor, out_size, vote: str = "prob"
) -> PseudoLabel:
    """Soft vote of the two teacher decoders on disentangled target features."""
    _require(teacher, "decoder_only")
    a = segment(teacher.decoder_s, d_s_t, out_size)
    b = segment(teacher.decoder_t, d_t_t, out_size)
    return PseudoLabel(soft_vote(a, b, vote).argmax(dim=-3), teacher.step)


@torch.no_grad()
def disentangled_target_features(teacher: Optional[TeacherState], ensemble: StudentEnsemble, x_t: torch.Tensor):
    """DDM outputs on the target image as used for pseudo-labelling.

    The target-style branch uses the teacher backbone under ``single_target``.
    """
    f_s = ensemble.backbone_s(x_t)
    if teacher is not None and teacher.paradigm == "single_target":
        f_t = teacher.backbone_t(x_t)
    else:
        f_t = ensemble.backbone_t(x_t)
    return ensemble.disentangle(f_s, f_t)


@torch.no_grad()
def pseudo_label_single_target(teacher: TeacherState, x_t: torch.Tensor, ensemble: StudentEnsemble) -> PseudoLabel:
    _require(teacher, "single_target")
    _, d_t = disentangled_target_features(teacher, ensemble, x_t)
    logits = segment(teacher.decoder_t, d_t, tuple(x_t.shape[-2:]))
    return PseudoLabel(logits.argmax(dim=1), teacher.step)


@torch.no_grad()
def generate_pseudo_label(teacher: TeacherState, ensemble: StudentEnsemble, x_t: torch.Tensor, vote: str = "prob") -> PseudoLabel:
    if teacher.paradigm == "decoder_only":
        d_s, d_t = disentangled_target_features(teacher, ensemble, x_t)
        return pseudo_label_decoder_only(teacher, d_s, d_t, tuple(x_t.shape[-2:]), vote)
    return pseudo_label_single_target(teacher, x_t, ensemble)


def self_training_round(
    teacher: TeacherState,
    ensemble: StudentEnsemble,
    x_t: torch.Tensor,
    alpha: Optional[float] = None,
    vote: str = "prob",
    update: bool = True,
):
    """EMA update first, then pseudo-labels from the refreshed teacher."""
    if update:
        ema_update(teacher, ensemble, alpha)
    return generate_pseudo_label(teacher, ensemble, x_t, vote), teacher
