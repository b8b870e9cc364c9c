"""The regression cascade: one global linear layer plus T shape-indexed layers.

Everything here works on batches: shapes are ``(N, 2P)``, global features
``(N, d0)`` and local features ``(N, 128P)``.  Local features come from a
provider object exposing ``extract(t, shapes)`` and ``jacobian(t, shapes)``
(see :mod:`deepreg.features`); tests substitute analytic providers.

Dropout follows the keep-probability convention: a feature survives with
probability ``dropout_rate`` during training and weights are scaled by
``dropout_rate`` at inference.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgument
from .features import DESCRIPTOR_DIM, HogConfig, LocalDescriptorConfig, SingleImageFeatures, extract_global
from .shapes import LandmarkLayout

TRAINING = "training"
INFERENCE = "inference"


@dataclass
class LocalStage:
    W: np.ndarray
    b: np.ndarray
    cfg: LocalDescriptorConfig


@dataclass
class CascadeModel:
    layout: LandmarkLayout
    hog_cfg: HogConfig
    stages: list[LocalStage]
    W0: Optional[np.ndarray] = None
    b0: Optional[np.ndarray] = None
    dropout_rate: float = 0.5
    mean_shape: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0 < self.dropout_rate <= 1:
            raise InvalidArgument("dropout_rate must lie in (0, 1]")
        n = 2 * self.layout.P
        if self.W0 is None:
            if self.mean_shape is None or np.shape(self.mean_shape) != (n,):
                raise InvalidArgument("a model without a global layer needs a mean shape of length 2P")
        else:
            if self.W0.shape != (n, self.hog_cfg.dim) or self.b0 is None or self.b0.shape != (n,):
                raise InvalidArgument(
                    f"global layer must be {n}x{self.hog_cfg.dim} with a length-{n} bias")
        for t, st in enumerate(self.stages, 1):
            if st.W.shape != (n, DESCRIPTOR_DIM * self.layout.P) or st.b.shape != (n,):
                raise InvalidArgument(f"stage {t} parameters have wrong shape {st.W.shape}")

    @classmethod
    def zeros(cls, layout: LandmarkLayout, hog_cfg: HogConfig,
              local_cfgs: Sequence[LocalDescriptorConfig], dropout_rate: float = 0.5,
              mean_shape=None) -> "CascadeModel":
        """Zero-initialized model; passing ``mean_shape`` drops the global layer."""
        n = 2 * layout.P
        stages = [LocalStage(np.zeros((n, DESCRIPTOR_DIM * layout.P)), np.zeros(n), c) for c in local_cfgs]
        if mean_shape is not None:
            return cls(layout, hog_cfg, stages, None, None, dropout_rate,
                       np.asarray(mean_shape, dtype=np.float64).copy())
        return cls(layout, hog_cfg, stages, np.zeros((n, hog_cfg.dim)), np.zeros(n), dropout_rate)

    @property
    def P(self) -> int:
        return self.layout.P

    @property
    def T(self) -> int:
        return len(self.stages)

    @property
    def has_global(self) -> bool:
        return self.W0 is not None

    @property
    def local_cfgs(self) -> list[LocalDescriptorConfig]:
        return [st.cfg for st in self.stages]

    def params(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order (W0, b0, W1, b1, ...)."""
        out = [self.W0, self.b0] if self.has_global else []
        for st in self.stages:
            out += [st.W, st.b]
        return out

    def copy(self) -> "CascadeModel":
        return copy.deepcopy(self)


@dataclass
class Gradients:
    W0: Optional[np.ndarray]
    b0: Optional[np.ndarray]
    W: list[np.ndarray]
    b: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = [self.W0, self.b0] if self.W0 is not None else []
        for w, b in zip(self.W, self.b):
            out += [w, b]
        return out


@dataclass
class StageTrace:
    """Per-stage quantities of one batched forward pass, reused by backward."""

    shapes: list[np.ndarray]                 # s^0 .. s^T, each (N, 2P)
    phis: list[Optional[np.ndarray]]         # phi^0 .. phi^T (phi^0 None without a global layer)
    masks: list[Optional[np.ndarray]]        # dropout masks, None in inference mode
    mode: str = INFERENCE
    jacobians: list[Optional[np.ndarray]] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.shapes[-1]


def _as_batch(x, name):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 1 else x


def global_forward(model: CascadeModel, phi0, mask=None) -> np.ndarray:
    """Initial shape from global features; ``mask=None`` selects inference scaling."""
    single = np.ndim(phi0) == 1
    phi0 = _as_batch(phi0, "phi0")
    if not model.has_global:
        s0 = np.broadcast_to(model.mean_shape, (phi0.shape[0], 2 * model.P)).copy()
        return s0[0] if single else s0
    if phi0.shape[-1] != model.W0.shape[1]:
        raise InvalidArgument(f"global feature has {phi0.shape[-1]} dims, W0 expects {model.W0.shape[1]}")
    if mask is None:
        s0 = model.dropout_rate * (phi0 @ model.W0.T) + model.b0
    else:
        s0 = (np.asarray(mask) * phi0) @ model.W0.T + model.b0
    return s0[0] if single else s0


def local_forward(W, b, s_prev, phi, mask=None, dropout_rate: float = 1.0) -> np.ndarray:
    """Additive refinement ``s_prev + W (mask * phi) + b``; inference scales W instead."""
    single = np.ndim(s_prev) == 1
    s_prev = _as_batch(s_prev, "s_prev")
    phi = _as_batch(phi, "phi")
    W = np.asarray(W)
    if W.shape != (s_prev.shape[-1], phi.shape[-1]) or np.shape(b) != (s_prev.shape[-1],):
        raise InvalidArgument(f"W {W.shape} incongruent with shape {s_prev.shape} and feature {phi.shape}")
    if mask is None:
        s = s_prev + dropout_rate * (phi @ W.T) + b
    else:
        s = s_prev + (np.asarray(mask) * phi) @ W.T + b
    return s[0] if single else s


def sample_masks(model: CascadeModel, n: int, rng: np.random.Generator, d0: int | None = None) -> list:
    """Independent Bernoulli(keep) masks per sample and per stage."""
    p = model.dropout_rate
    masks = []
    if model.has_global:
        masks.append((rng.random((n, d0 or model.W0.shape[1])) < p).astype(np.float64))
    else:
        masks.append(None)
    for st in model.stages:
        masks.append((rng.random((n, st.W.shape[1])) < p).astype(np.float64))
    return masks


def forward_batch(model: CascadeModel, phi0, features, n: int | None = None, mode: str = INFERENCE,
                  rng: np.random.Generator | None = None, masks=None) -> StageTrace:
    """Run the cascade on a batch.

    ``phi0`` is ``(N, d0)`` (ignored without a global layer, where ``n`` gives
    the batch size).  In training mode masks are drawn from ``rng`` unless
    given explicitly, which lets a pass be replayed with fixed masks.
    """
    if mode not in (TRAINING, INFERENCE):
        raise InvalidArgument(f"unknown mode {mode!r}")
    if phi0 is not None:
        phi0 = _as_batch(phi0, "phi0")
        n = phi0.shape[0]
    if n is None:
        raise InvalidArgument("batch size unknown: pass phi0 or n")
    if mode == TRAINING and masks is None:
        if rng is None:
            raise InvalidArgument("training mode needs an rng or explicit masks")
        masks = sample_masks(model, n, rng)
    if mode == INFERENCE:
        masks = [None] * (model.T + 1)
    if len(masks) != model.T + 1:
        raise InvalidArgument("need one mask entry per stage")

    if model.has_global:
        s = global_forward(model, phi0, masks[0])
    else:
        s = np.broadcast_to(model.mean_shape, (n, 2 * model.P)).copy()
        phi0 = None
    shapes, phis = [s], [phi0]
    for t, st in enumerate(model.stages, 1):
        phi = features.extract(t, s)
        s = local_forward(st.W, st.b, s, phi, masks[t], model.dropout_rate)
        shapes.append(s)
        phis.append(phi)
    return StageTrace(shapes, phis, list(masks), mode)


def forward(model: CascadeModel, img, mode: str = INFERENCE, rng=None, masks=None) -> StageTrace:
    """Single-image forward pass computing HOG and response maps on the fly."""
    phi0 = extract_global(img, model.hog_cfg)[None] if model.has_global else None
    feats = SingleImageFeatures(img, model.local_cfgs)
    return forward_batch(model, phi0, feats, n=1, mode=mode, rng=rng, masks=masks)


def predict(model: CascadeModel, img) -> np.ndarray:
    return forward(model, img).output[0]


def loss(trace: StageTrace, truth) -> float:
    r = trace.output - _as_batch(truth, "truth")
    return 0.5 * float((r ** 2).sum())


def backward(model: CascadeModel, trace: StageTrace, truth, features) -> Gradients:
    """Gradients of the half squared error summed over the batch.

    The shape gradient is propagated through each local layer as
    ``g <- g + ((g W) * mask) Psi`` where ``Psi`` is the block-diagonal
    descriptor Jacobian at the layer's input shape.
    """
    if trace.mode != TRAINING:
        raise InvalidArgument("backward needs a training-mode trace with recorded masks")
    if len(trace.shapes) != model.T + 1:
        raise InvalidArgument(f"trace has {len(trace.shapes) - 1} stages, model has {model.T}")
    truth = _as_batch(truth, "truth")
    if truth.shape != trace.output.shape:
        raise InvalidArgument(f"truth {truth.shape} does not match output {trace.output.shape}")

    n, P = truth.shape[0], model.P
    g = trace.output - truth
    dW = [None] * model.T
    db = [None] * model.T
    jacobians = [None] * (model.T + 1)
    for t in range(model.T, 0, -1):
        st = model.stages[t - 1]
        mask = trace.masks[t]
        phi_m = trace.phis[t] * mask
        dW[t - 1] = g.T @ phi_m
        db[t - 1] = g.sum(axis=0)
        psi = features.jacobian(t, trace.shapes[t - 1])
        jacobians[t] = psi
        v = ((g @ st.W) * mask).reshape(n, P, -1)
        g = g + np.einsum("npd,npdk->npk", v, psi).reshape(n, 2 * P)
    trace.jacobians = jacobians
    if model.has_global:
        dW0 = g.T @ (trace.phis[0] * trace.masks[0])
        db0 = g.sum(axis=0)
    else:
        dW0 = db0 = None
    return Gradients(dW0, db0, dW, db)
