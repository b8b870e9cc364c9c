"""Sequential pre-training, joint back-propagation training and diagnostics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .cascade import INFERENCE, TRAINING, CascadeModel, backward, forward_batch, loss
from .data_io import FaceSample
from .errors import InvalidArgument, NumericFailure
from .features import HogConfig, LocalDescriptorConfig, MapBank, ResponseMapFeatures, extract_global
from .shapes import LandmarkLayout, flip_shape, normalized_errors

log = logging.getLogger(__name__)

SEQUENTIAL = "SequentialReg"
JOINT = "DeepReg"
JOINT_LOCAL = "DeepRegLocal"
MODES = (SEQUENTIAL, JOINT, JOINT_LOCAL)


@dataclass
class TrainConfig:
    T: int = 5
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 100
    dropout_rate: float = 0.5
    epsilon: float = 2.0
    patch_sizes: Optional[tuple[int, ...]] = None  # None -> 32 except 16 for the last two stages
    patience_epochs: int = 10
    lr_decay_factor: float = 0.1
    min_lr: float = 1e-5
    pretrain_max_epochs: int = 100   # per sequential stage
    max_epochs: int = 100            # joint phase
    validation_count: int = 200
    flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.T < 0:
            raise InvalidArgument("T must be non-negative")
        if not (self.learning_rate > 0 and self.momentum >= 0 and self.lr_decay_factor > 0
                and self.min_lr > 0 and self.epsilon > 0):
            raise InvalidArgument("rates must be positive")
        if not 0 < self.dropout_rate <= 1:
            raise InvalidArgument("dropout_rate must lie in (0, 1]")
        if self.batch_size < 1 or self.patience_epochs < 1:
            raise InvalidArgument("batch_size and patience_epochs must be >= 1")
        if self.validation_count < 0 or self.max_epochs < 0 or self.pretrain_max_epochs < 0:
            raise InvalidArgument("counts must be non-negative")
        if self.patch_sizes is not None:
            self.patch_sizes = tuple(int(p) for p in self.patch_sizes)
            if len(self.patch_sizes) != self.T:
                raise InvalidArgument(f"{len(self.patch_sizes)} patch sizes given for T={self.T}")

    def local_cfgs(self) -> list[LocalDescriptorConfig]:
        sizes = self.patch_sizes or tuple(32 if t <= self.T - 2 else 16 for t in range(1, self.T + 1))
        return [LocalDescriptorConfig(p, self.epsilon) for p in sizes]


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimizerState:
    velocity: list[np.ndarray]
    lr: float
    epochs_since_improvement: int = 0
    best_validation_error: float = float("inf")

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], lr)

    def observe(self, val_error: float, cfg: TrainConfig) -> bool:
        """Record an epoch's validation error; decays lr on a plateau. Returns True if improved."""
        if val_error < self.best_validation_error:
            self.best_validation_error = val_error
            self.epochs_since_improvement = 0
            return True
        self.epochs_since_improvement += 1
        if self.epochs_since_improvement >= cfg.patience_epochs:
            self.lr *= cfg.lr_decay_factor
            self.epochs_since_improvement = 0
        return False

    def exhausted(self, cfg: TrainConfig) -> bool:
        return self.lr < cfg.min_lr * (1 - 1e-9)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState,
             batch_size: int, momentum: float = 0.9) -> None:
    """In-place momentum update ``v <- m v - lr g / B; p <- p + v``."""
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise InvalidArgument("parameter, gradient and velocity lists differ in length")
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise InvalidArgument(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        v *= momentum
        v -= state.lr * (g / batch_size)
        p += v


# ---------------------------------------------------------------------------
# Prepared datasets


@dataclass
class PreparedSet:
    """Samples with global features and response maps computed once."""

    phi0: Optional[np.ndarray]
    bank: MapBank
    truths: np.ndarray
    d_pupils: np.ndarray
    source_ids: list[str]
    local_cfgs: list[LocalDescriptorConfig]

    def __len__(self) -> int:
        return len(self.truths)

    def features(self, idx=None) -> ResponseMapFeatures:
        return ResponseMapFeatures(self.bank, self.local_cfgs, idx)


def prepare(samples: Sequence[FaceSample], hog_cfg: HogConfig,
            local_cfgs: Sequence[LocalDescriptorConfig], with_global: bool = True) -> PreparedSet:
    images = [s.image for s in samples]
    phi0 = np.array([extract_global(im, hog_cfg) for im in images]) if with_global else None
    if phi0 is not None and len(images) == 0:
        phi0 = np.zeros((0, hog_cfg.dim))
    bank = MapBank(images, [c.sigma for c in local_cfgs])
    truths = np.array([s.truth for s in samples], dtype=np.float64)
    return PreparedSet(phi0, bank, truths, np.array([s.d_pupils for s in samples], dtype=np.float64),
                       [s.source_id for s in samples], list(local_cfgs))


def augment_flip(samples: Sequence[FaceSample], layout: LandmarkLayout) -> list[FaceSample]:
    """Originals followed by their horizontal mirrors."""
    mirrored = [
        FaceSample(s.image[:, ::-1].copy(), flip_shape(s.truth, s.image.shape[1], layout),
                   s.d_pupils, s.source_id + "_flip")
        for s in samples
    ]
    return list(samples) + mirrored


def split_validation(samples: Sequence[FaceSample], count: int, rng: np.random.Generator):
    """Seeded uniform split into (train, validation)."""
    if count >= len(samples) and count > 0:
        raise InvalidArgument(f"validation_count {count} leaves no training samples out of {len(samples)}")
    order = rng.permutation(len(samples))
    val_idx = np.sort(order[:count])
    train_idx = np.sort(order[count:])
    return [samples[i] for i in train_idx], [samples[i] for i in val_idx]


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(n, start + size))


def stage_shapes(model: CascadeModel, data: PreparedSet, chunk: int = 256) -> np.ndarray:
    """Inference-mode estimates of every stage, ``(T+1, N, 2P)``."""
    out = np.empty((model.T + 1, len(data), 2 * model.P))
    for idx in _chunks(len(data), chunk):
        phi0 = data.phi0[idx] if model.has_global else None
        trace = forward_batch(model, phi0, data.features(idx), n=len(idx), mode=INFERENCE)
        out[:, idx] = np.stack(trace.shapes)
    return out


def mean_error(model: CascadeModel, data: PreparedSet) -> float:
    return float(normalized_errors(stage_shapes(model, data)[-1], data.truths, data.d_pupils).mean())


def stage_bias_variance(model: CascadeModel, data: PreparedSet) -> np.ndarray:
    """Mean and standard deviation of the normalized error of each stage, ``(T+1, 2)``."""
    if len(data) == 0:
        raise InvalidArgument("empty dataset")
    shapes = stage_shapes(model, data)
    errs = np.stack([normalized_errors(s, data.truths, data.d_pupils) for s in shapes])
    return np.stack([errs.mean(axis=1), errs.std(axis=1)], axis=1)


# ---------------------------------------------------------------------------
# Sequential learning


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lr: float
    train_error: float
    validation_error: float


Logger = Optional[Callable[[EpochRecord], None]]


def _emit(records, logger, rec):
    records.append(rec)
    if logger is not None:
        logger(rec)
    log.debug("%s epoch %d lr %.3g train %.6f val %.6f", rec.phase, rec.epoch, rec.lr,
              rec.train_error, rec.validation_error)


def fit_linear_stage(X, base, target, cfg: TrainConfig, rng: np.random.Generator,
                     dropout_rate: float = 1.0, d_pupils=None, val=None, W=None, b=None,
                     phase: str = "stage", logger: Logger = None, records=None):
    """SGD with dropout on ``0.5 * ||base + W (z * x) + b - target||^2``.

    ``val`` is ``(X, base, target, d_pupils)`` for the monitored set; without
    it the training set is monitored.  The monitored score is the mean
    normalized error when ``d_pupils`` is known and the mean half squared
    residual otherwise.  Returns the best-scoring ``(W, b)``.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    k = target.shape[1]
    W = np.zeros((k, d)) if W is None else W.copy()
    b = np.zeros(k) if b is None else b.copy()
    if n == 0:
        raise InvalidArgument("empty training set")
    records = [] if records is None else records
    vX, vbase, vtarget, vd = val if val is not None else (X, base, target, d_pupils)

    def score(Xs, bs, ts, ds):
        pred = bs + dropout_rate * (Xs @ W.T) + b
        if ds is None:
            return 0.5 * float(((pred - ts) ** 2).sum(axis=1).mean())
        return float(normalized_errors(pred, ts, ds).mean())

    state = OptimizerState.for_params([W, b], cfg.learning_rate)
    state.observe(score(vX, vbase, vtarget, vd), cfg)
    best = (W.copy(), b.copy())
    for epoch in range(1, cfg.pretrain_max_epochs + 1):
        for idx in np.array_split(rng.permutation(n), max(1, -(-n // cfg.batch_size))):
            x = X[idx]
            if dropout_rate < 1:
                x = x * (rng.random(x.shape) < dropout_rate)
            g = base[idx] + x @ W.T + b - target[idx]
            if not np.all(np.isfinite(g)):
                raise NumericFailure(f"{phase}: non-finite residual at epoch {epoch}")
            sgd_step([W, b], [g.T @ x, g.sum(axis=0)], state, len(idx), cfg.momentum)
        lr = state.lr
        val_score = score(vX, vbase, vtarget, vd)
        if not np.isfinite(val_score):
            raise NumericFailure(f"{phase}: non-finite validation error at epoch {epoch}")
        if state.observe(val_score, cfg):
            best = (W.copy(), b.copy())
        _emit(records, logger, EpochRecord(epoch, phase, lr, score(X, base, target, d_pupils), val_score))
        if state.exhausted(cfg):
            break
    return best[0], best[1]


def pretrain_sequential(train: PreparedSet, val: Optional[PreparedSet], cfg: TrainConfig,
                        layout: LandmarkLayout, hog_cfg: HogConfig, local_only: bool = False,
                        rng: np.random.Generator | None = None, logger: Logger = None,
                        records=None) -> CascadeModel:
    """Fit the global layer, then each local layer against the frozen prefix."""
    if len(train) == 0:
        raise InvalidArgument("empty training set")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    records = [] if records is None else records
    p = cfg.dropout_rate
    mean = train.truths.mean(axis=0) if local_only else None
    model = CascadeModel.zeros(layout, hog_cfg, train.local_cfgs, p, mean_shape=mean)
    monitored = val if val is not None and len(val) else None

    def current(data):
        return np.broadcast_to(model.mean_shape, data.truths.shape).copy() if local_only else \
            np.zeros_like(data.truths)

    s_train = current(train)
    s_val = current(monitored) if monitored else None
    if not local_only:
        v = (monitored.phi0, s_val, monitored.truths, monitored.d_pupils) if monitored else None
        model.W0, model.b0 = fit_linear_stage(
            train.phi0, s_train, train.truths, cfg, rng, p, train.d_pupils, v,
            phase="seq-stage-0", logger=logger, records=records)
        s_train = s_train + p * train.phi0 @ model.W0.T + model.b0
        if monitored:
            s_val = s_val + p * monitored.phi0 @ model.W0.T + model.b0

    for t, st in enumerate(model.stages, 1):
        phi_train = _local_features(train, t, s_train)
        v = None
        if monitored:
            phi_val = _local_features(monitored, t, s_val)
            v = (phi_val, s_val, monitored.truths, monitored.d_pupils)
        st.W, st.b = fit_linear_stage(
            phi_train, s_train, train.truths, cfg, rng, p, train.d_pupils, v,
            phase=f"seq-stage-{t}", logger=logger, records=records)
        s_train = s_train + p * phi_train @ st.W.T + st.b
        if monitored:
            s_val = s_val + p * phi_val @ st.W.T + st.b
    return model


def _local_features(data: PreparedSet, t: int, shapes: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = []
    for idx in _chunks(len(data), chunk):
        out.append(data.features(idx).extract(t, shapes[idx]))
    return np.concatenate(out) if out else np.zeros((0, 128 * (shapes.shape[1] // 2)))


# ---------------------------------------------------------------------------
# Joint learning


def train_joint(model: CascadeModel, train: PreparedSet, val: Optional[PreparedSet], cfg: TrainConfig,
                rng: np.random.Generator | None = None, logger: Logger = None,
                records=None) -> CascadeModel:
    """Mini-batch SGD on all layers through the full cascade; returns the best checkpoint."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    records = [] if records is None else records
    monitored = val if val is not None and len(val) else train
    model = model.copy()
    n = len(train)
    if n == 0:
        raise InvalidArgument("empty training set")
    state = OptimizerState.for_params(model.params(), cfg.learning_rate)
    state.observe(mean_error(model, monitored), cfg)
    best = model.copy()
    for epoch in range(1, cfg.max_epochs + 1):
        train_err = 0.0
        for idx in np.array_split(rng.permutation(n), max(1, -(-n // cfg.batch_size))):
            idx = np.sort(idx)
            phi0 = train.phi0[idx] if model.has_global else None
            feats = train.features(idx)
            trace = forward_batch(model, phi0, feats, n=len(idx), mode=TRAINING, rng=rng)
            truth = train.truths[idx]
            if not np.isfinite(loss(trace, truth)):
                raise NumericFailure(f"joint: non-finite loss at epoch {epoch}")
            grads = backward(model, trace, truth, feats)
            sgd_step(model.params(), grads.arrays(), state, len(idx), cfg.momentum)
            train_err += float(normalized_errors(trace.output, truth, train.d_pupils[idx]).sum())
        lr = state.lr
        val_err = mean_error(model, monitored)
        if not np.isfinite(val_err):
            raise NumericFailure(f"joint: non-finite validation error at epoch {epoch}")
        if state.observe(val_err, cfg):
            best = model.copy()
        _emit(records, logger, EpochRecord(epoch, "joint", lr, train_err / n, val_err))
        if state.exhausted(cfg):
            break
    return best


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class FitResult:
    model: CascadeModel
    records: list[EpochRecord] = field(default_factory=list)
    train: Optional[PreparedSet] = None
    val: Optional[PreparedSet] = None


def fit(samples: Sequence[FaceSample], cfg: TrainConfig, layout: LandmarkLayout,
        hog_cfg: HogConfig = HogConfig(), mode: str = JOINT, init_model: CascadeModel | None = None,
        logger: Logger = None) -> FitResult:
    """Split, augment, pre-train sequentially and (unless sequential-only) train jointly.

    With ``init_model`` pre-training is skipped and joint training resumes
    from the given parameters.
    """
    if mode not in MODES:
        raise InvalidArgument(f"unknown mode {mode!r}; expected one of {MODES}")
    if not samples:
        raise InvalidArgument("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    train_s, val_s = split_validation(samples, cfg.validation_count, rng)
    if cfg.flip:
        train_s = augment_flip(train_s, layout)
    local_cfgs = init_model.local_cfgs if init_model is not None else cfg.local_cfgs()
    if init_model is not None:
        hog_cfg = init_model.hog_cfg
    with_global = init_model.has_global if init_model is not None else mode != JOINT_LOCAL
    train = prepare(train_s, hog_cfg, local_cfgs, with_global)
    val = prepare(val_s, hog_cfg, local_cfgs, with_global) if val_s else None
    records: list[EpochRecord] = []
    if init_model is None:
        model = pretrain_sequential(train, val, cfg, layout, hog_cfg, local_only=mode == JOINT_LOCAL,
                                    rng=rng, logger=logger, records=records)
    else:
        model = init_model.copy()
    if mode != SEQUENTIAL:
        model = train_joint(model, train, val, cfg, rng=rng, logger=logger, records=records)
    monitored = val if val is not None else train
    final = EpochRecord(records[-1].epoch if records else 0, "final",
                        records[-1].lr if records else cfg.learning_rate,
                        mean_error(model, train), mean_error(model, monitored))
    _emit(records, logger, final)
    return FitResult(model, records, train, val)
