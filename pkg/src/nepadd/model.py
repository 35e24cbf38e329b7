"""Full detector: student branch + optional frozen teacher + aggregation + classifier."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from nepadd import tensor as nt
from nepadd.aggregation import GATE_MODES, FusionGate, TransferConfig, attention_transfer_loss
from nepadd.classifier import Classifier, ClassifierConfig, bce_frame_loss
from nepadd.errors import ConfigError
from nepadd.layers import Module
from nepadd.ner import NerBranch, NerBranchConfig
from nepadd.padd import PaddBranch, PaddBranchConfig

AGGREGATION_MODES = ("af", "at", "none")


@dataclass(frozen=True)
class ModelConfig:
    padd: PaddBranchConfig = field(default_factory=PaddBranchConfig)
    ner: NerBranchConfig = field(default_factory=NerBranchConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    aggregation: str = "af"
    gate_mode: str = "per-frame-scalar"

    def __post_init__(self):
        if self.aggregation not in AGGREGATION_MODES:
            raise ConfigError(f"aggregation must be one of {AGGREGATION_MODES}, "
                              f"got {self.aggregation!r}")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        if self.classifier.dim != self.padd.model_dim:
            raise ConfigError(f"classifier dim {self.classifier.dim} != student model_dim "
                              f"{self.padd.model_dim}")
        if self.aggregation != "none":
            if self.ner.model_dim != self.padd.model_dim:
                raise ConfigError(f"teacher model_dim {self.ner.model_dim} != student "
                                  f"model_dim {self.padd.model_dim}")
            if self.ner.d_in != self.padd.d_in:
                raise ConfigError("teacher and student must read the same frame features")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(padd=PaddBranchConfig(**d.get("padd", {})),
                       ner=NerBranchConfig(**d.get("ner", {})),
                       classifier=ClassifierConfig(**d.get("classifier", {})),
                       aggregation=d.get("aggregation", "af"),
                       gate_mode=d.get("gate_mode", "per-frame-scalar"))
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc


@dataclass
class TeacherOutputs:
    """Constant teacher signals for one utterance (the teacher is frozen)."""

    alpha: np.ndarray
    attended: np.ndarray


class NEPADDModel(Module):
    def __init__(self, cfg: ModelConfig, rng, teacher: NerBranch | None = None):
        self.cfg = cfg
        self.student = PaddBranch(cfg.padd, rng)
        self.classifier = Classifier(cfg.classifier, rng)
        self.gate = FusionGate(cfg.padd.model_dim, rng, cfg.gate_mode) \
            if cfg.aggregation == "af" else None
        if cfg.aggregation != "none":
            self.teacher = teacher if teacher is not None else NerBranch(cfg.ner, rng)
            self.teacher.freeze()
        else:
            self.teacher = None

    def teacher_outputs(self, x) -> TeacherOutputs:
        with nt.no_grad():
            _, alpha, attended, _ = self.teacher(x)
        return TeacherOutputs(alpha.data, attended.data)

    def forward(self, x, teacher: TeacherOutputs | None = None):
        """Returns a dict with probs (T,), alpha_add, and per-mode extras."""
        x = nt.as_tensor(x)
        _, alpha_add, h_att = self.student(x)
        out = {"alpha_add": alpha_add}
        if self.cfg.aggregation != "none" and teacher is None:
            teacher = self.teacher_outputs(x)
        if self.cfg.aggregation == "af":
            fused, g = self.gate(h_att, nt.Tensor(teacher.attended))
            out["gate"] = g
            h_att = fused
        if teacher is not None:
            out["alpha_ner"] = teacher.alpha
        out["probs"] = self.classifier(h_att)
        return out

    def losses(self, x, labels, transfer: TransferConfig, teacher=None, spoof_weight=None):
        """(L_CE, L_KL or None, forward outputs) for one utterance."""
        out = self.forward(x, teacher)
        ce = bce_frame_loss(out["probs"], labels, spoof_weight=spoof_weight)
        kl = None
        if self.cfg.aggregation == "at":
            kl = attention_transfer_loss(out["alpha_ner"], out["alpha_add"], transfer)
        return ce, kl, out

    def spoof_scores(self, x, teacher=None):
        with nt.no_grad():
            return 1.0 - self.forward(x, teacher)["probs"].data

    def frozen_flags(self):
        return {k: p.frozen for k, p in self.named_parameters()}
