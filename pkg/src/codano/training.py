"""Masked-reconstruction pretraining and few-shot predictive fine-tuning.

Masking follows the two-mode scheme used for self-supervision: either a
random subset of points is zeroed inside most variables (point mode), or a
few whole variables are zeroed (variable mode), chosen per sample. Training
is plain Adam with global gradient-norm clipping, a temporal holdout split,
and per-epoch evaluation with a fixed mask sequence so eval losses are
comparable across epochs. Checkpoints round-trip the full trainer state:
parameters, Adam moments, RNG state, epoch counter, holdout indices, history.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (FractionError, MeshError, NumericError, PairingError,
                     TrainingStateError, UnknownVariableError)
from .field import GridFunction, resample
from .gno import nearest_neighbor_spacing
from .model import ModelConfig, has_predictor, model_forward, predict
from .simdata import DatasetContainer, read_container, write_container

EVAL_STREAM = 0xEA15
SHUFFLE_STREAM = 0x5FFE
FEWSHOT_STREAM = 0xF57


# -- masking -------------------------------------------------------------------


@dataclass
class MaskSpec:
    """Self-supervision masks drawn per sample.

    With probability point_probability a point mask is drawn: ceil(
    variable_fraction * d) variables (never all d) each lose a point_fraction
    share of mesh points, independently per variable. Otherwise a variable
    mask zeroes ceil(full_variable_fraction * d) whole variables. On
    irregular meshes point masks grow circular patches of patch_radius
    (default twice the mean nearest-neighbor spacing) until the target count
    is reached, so the masked fraction is exact only up to patch granularity.
    """

    point_probability: float = 0.5
    point_fraction: float = 0.5
    variable_fraction: float = 0.6
    full_variable_fraction: float = 0.3
    patch_radius: float = 0.0

    def __post_init__(self):
        for name in ("point_probability", "point_fraction",
                     "variable_fraction", "full_variable_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise FractionError(f"{name} must be in [0, 1], got {v}")
        if self.patch_radius < 0:
            raise FractionError("patch_radius must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def ceil_count(fraction: float, total: int) -> int:
    """ceil(fraction * total) with a guard against float drift (0.6*5 -> 3)."""
    return max(0, int(np.ceil(fraction * total - 1e-9)))


def _point_subset(rng, mesh, fraction, radius):
    n = mesh.n_points
    target = int(round(fraction * n))
    mask = np.zeros(n, dtype=bool)
    if target <= 0:
        return mask
    if mesh.is_uniform:
        mask[rng.choice(n, size=target, replace=False)] = True
        return mask
    pts = mesh.points
    while mask.sum() < target:
        pool = np.flatnonzero(~mask)
        seed = pool[rng.integers(len(pool))]
        d2 = np.sum((pts - pts[seed]) ** 2, axis=1)
        mask |= d2 <= radius * radius
    return mask


def apply_mask(a: GridFunction, spec: MaskSpec, rng):
    """Returns (masked copy of a, boolean mask (n_points, n_channels)).

    True marks a zeroed entry. Fractions of zero leave the function intact.
    """
    n, d = a.values.shape
    mask = np.zeros((n, d), dtype=bool)
    if rng.random() < spec.point_probability:
        n_aff = min(ceil_count(spec.variable_fraction, d), d - 1)
        if n_aff > 0:
            chosen = rng.choice(d, size=n_aff, replace=False)
            radius = spec.patch_radius
            if radius == 0.0 and not a.mesh.is_uniform:
                radius = 2.0 * float(np.mean(nearest_neighbor_spacing(a.mesh)))
            for j in sorted(chosen):
                mask[:, j] = _point_subset(rng, a.mesh, spec.point_fraction,
                                           radius)
    else:
        n_full = ceil_count(spec.full_variable_fraction, d)
        if n_full > 0:
            chosen = rng.choice(d, size=min(n_full, d), replace=False)
            mask[:, sorted(chosen)] = True
    values = a.values.copy()
    values[mask] = 0.0
    return GridFunction(a.mesh, values, names=a.names), mask


# -- losses --------------------------------------------------------------------


@dataclass
class LossReport:
    overall: float
    per_variable: dict
    absolute_fallback: bool = False


def relative_l2(pred: GridFunction, target: GridFunction) -> LossReport:
    """Quadrature relative L2 error with a per-variable breakdown.

    Channels are aligned by name. A zero-norm target channel switches that
    entry (and the overall number if the whole target is zero) to absolute
    L2, flagged in the report.
    """
    if not pred.mesh.same(target.mesh):
        raise MeshError("prediction and target live on different meshes")
    missing = [v for v in pred.names if v not in target.names]
    if missing:
        raise UnknownVariableError(f"target lacks variables {missing}")
    w = pred.mesh.quad_weights
    fallback = False
    per = {}
    num_sq = den_sq = 0.0
    for name in pred.names:
        p = pred.channel(name)
        t = target.channel(name)
        nv = float(w @ ((p - t) ** 2))
        dv = float(w @ (t ** 2))
        num_sq += nv
        den_sq += dv
        if dv == 0.0:
            per[name] = float(np.sqrt(nv))
            fallback = True
        else:
            per[name] = float(np.sqrt(nv / dv))
    if den_sq == 0.0:
        overall = float(np.sqrt(num_sq))
        fallback = True
    else:
        overall = float(np.sqrt(num_sq / den_sq))
    return LossReport(overall, per, fallback)


def loss_relative_l2(pred, target: np.ndarray, mesh):
    """Differentiable overall relative L2 of a predicted tensor vs an array."""
    w = mesh.quad_weights[:, None]
    diff = pred - ad.as_tensor(target)
    num = ad.tsqrt(ad.tsum(diff * diff * w))
    den = float(np.sqrt(np.sum(target * target * w)))
    if den == 0.0:
        return num
    return num / den


# -- plans and state -------------------------------------------------------------


@dataclass
class TrainPlan:
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    holdout_fraction: float = 0.2
    seed: int = 0
    mask: MaskSpec = field(default_factory=MaskSpec)
    delta: int = 1               # prediction offset in snapshots (finetune)
    few_shot: int = 0            # training pairs kept, 0 = all (finetune)
    freeze_encoder: bool = False # train only predictor.* and vspe.* (finetune)
    eval_max_samples: int = 0    # cap holdout evals per epoch, 0 = all
    target_eval_loss: float = 0.0  # stop once eval loss dips below, 0 = never

    def __post_init__(self):
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise FractionError(
                f"holdout_fraction must be in [0, 1), got {self.holdout_fraction}")
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainingStateError("need epochs >= 0 and batch_size >= 1")
        if isinstance(self.mask, dict):
            self.mask = MaskSpec(**self.mask)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask"] = self.mask.to_dict()
        return d


@dataclass
class TrainerState:
    params: ad.ParamStore
    config: ModelConfig
    adam: ad.AdamState
    rng: np.random.Generator
    epoch: int = 0
    holdout: tuple = ()
    history: list = field(default_factory=list)


def fresh_state(params, config: ModelConfig, plan: TrainPlan) -> TrainerState:
    adam = ad.AdamState(lr=plan.learning_rate)
    rng = np.random.default_rng([plan.seed, SHUFFLE_STREAM])
    return TrainerState(params=params, config=config, adam=adam, rng=rng)


def _temporal_holdout(n_items: int, fraction: float):
    n_hold = ceil_count(fraction, n_items)
    if n_hold >= n_items:
        n_hold = n_items - 1
    train = np.arange(n_items - n_hold)
    hold = np.arange(n_items - n_hold, n_items)
    return train, hold


# -- training loops ---------------------------------------------------------------


def _batch_step(state: TrainerState, plan: TrainPlan, losses):
    total = losses[0]
    for li in losses[1:]:
        total = total + li
    total = total * (1.0 / len(losses))
    value = float(total.data)
    if not np.isfinite(value):
        raise NumericError(f"training loss became non-finite at epoch "
                           f"{state.epoch + 1}")
    state.params.zero_grads()
    ad.backward(total, state.params)
    ad.clip_grad_norm(state.params, plan.clip_norm)
    ad.optimizer_step(state.params, state.adam)
    return value


def evaluate_reconstruction(params, config, dataset, plan, indices,
                            cache=None, query_mesh=None) -> LossReport:
    """Masked-reconstruction eval over the given snapshot indices.

    The mask sequence is a fixed function of plan.seed, so repeated calls
    (and successive epochs) see identical masks. A query_mesh at a different
    resolution evaluates zero-shot super-resolution against spectrally
    resampled targets.
    """
    rng = np.random.default_rng([plan.seed, EVAL_STREAM])
    idx = list(indices)
    if plan.eval_max_samples > 0:
        idx = idx[:plan.eval_max_samples]
    reports = []
    for i in idx:
        target = dataset.function(int(i))
        masked, _ = apply_mask(target, plan.mask, rng)
        out = predict(params, config, masked, query_mesh=query_mesh,
                      head="reconstructor", cache=cache)
        if query_mesh is not None and not query_mesh.same(target.mesh):
            target = resample(target, query_mesh.resolution)
        reports.append(relative_l2(out, target))
    return _mean_reports(reports)


def evaluate_prediction(params, config, dataset, plan, pairs, cache=None,
                        query_mesh=None) -> LossReport:
    """Next-step prediction eval over the given (input, target) index pairs."""
    reports = []
    for i, j in pairs:
        out = predict(params, config, dataset.function(i),
                      query_mesh=query_mesh, head="predictor", cache=cache)
        target = dataset.function(j)
        if query_mesh is not None and not query_mesh.same(target.mesh):
            target = resample(target, query_mesh.resolution)
        reports.append(relative_l2(out, target))
    return _mean_reports(reports)


def reconstruction_splits(n_snapshots: int, plan: TrainPlan):
    """(training snapshot indices, holdout snapshot indices)."""
    train_idx, hold_idx = _temporal_holdout(n_snapshots, plan.holdout_fraction)
    return [int(i) for i in train_idx], [int(i) for i in hold_idx]


def prediction_splits(n_snapshots: int, plan: TrainPlan):
    """(train_pairs after few-shot, holdout pairs after the eval cap)."""
    pairs = snapshot_pairs(n_snapshots, plan.delta)
    train_sel, hold_sel = _temporal_holdout(len(pairs), plan.holdout_fraction)
    train_pairs = [pairs[i] for i in train_sel]
    hold_pairs = [pairs[i] for i in hold_sel]
    if plan.few_shot > 0:
        if plan.few_shot > len(train_pairs):
            raise PairingError(f"few_shot={plan.few_shot} exceeds the "
                               f"{len(train_pairs)} available training pairs")
        pick_rng = np.random.default_rng([plan.seed, FEWSHOT_STREAM])
        keep = np.sort(pick_rng.choice(len(train_pairs), size=plan.few_shot,
                                       replace=False))
        train_pairs = [train_pairs[i] for i in keep]
    if plan.eval_max_samples > 0:
        hold_pairs = hold_pairs[:plan.eval_max_samples]
    return train_pairs, hold_pairs


def _mean_reports(reports):
    if not reports:
        return LossReport(float("nan"), {}, False)
    overall = float(np.mean([r.overall for r in reports]))
    per = {}
    for name in reports[0].per_variable:
        per[name] = float(np.mean([r.per_variable[name] for r in reports]))
    return LossReport(overall, per, any(r.absolute_fallback for r in reports))


def pretrain(params, config: ModelConfig, dataset: DatasetContainer,
             plan: TrainPlan, log=None, state: TrainerState | None = None
             ) -> TrainerState:
    """Masked-reconstruction training; resumes from state when given.

    Returns the trainer state; state.history holds one record per epoch plus
    an initial record (epoch 0) with the untrained eval loss.
    """
    if state is None:
        state = fresh_state(params, config, plan)
    unknown = [v for v in dataset.variables
               if v not in state.config.variables]
    if unknown:
        raise UnknownVariableError(
            f"dataset variables {unknown} not registered in the model "
            f"(model has {state.config.variables})")
    cache = {}
    if not state.holdout:
        train_idx, hold_idx = _temporal_holdout(dataset.n_snapshots,
                                                plan.holdout_fraction)
        state.holdout = tuple(int(i) for i in hold_idx)
    else:
        hold = set(state.holdout)
        train_idx = np.array([i for i in range(dataset.n_snapshots)
                              if i not in hold])

    def emit(record):
        state.history.append(record)
        if log is not None:
            log(record)

    if state.epoch == 0 and not state.history:
        report = evaluate_reconstruction(state.params, state.config, dataset,
                                         plan, state.holdout, cache)
        emit({"phase": "pretrain", "epoch": 0, "train_loss": None,
              "eval_loss": report.overall,
              "eval_per_variable": report.per_variable})
        if plan.target_eval_loss > 0 and report.overall <= plan.target_eval_loss:
            return state

    while state.epoch < plan.epochs:
        order = state.rng.permutation(train_idx)
        train_losses = []
        for start in range(0, len(order), plan.batch_size):
            losses = []
            for i in order[start:start + plan.batch_size]:
                target = dataset.function(int(i))
                masked, _ = apply_mask(target, plan.mask, state.rng)
                out = model_forward(state.params, state.config, masked,
                                    head="reconstructor", cache=cache)
                losses.append(loss_relative_l2(out, target.values, target.mesh))
            train_losses.append(_batch_step(state, plan, losses))
        state.epoch += 1
        report = evaluate_reconstruction(state.params, state.config, dataset,
                                         plan, state.holdout, cache)
        emit({"phase": "pretrain", "epoch": state.epoch,
              "train_loss": float(np.mean(train_losses)),
              "eval_loss": report.overall,
              "eval_per_variable": report.per_variable})
        if plan.target_eval_loss > 0 and report.overall <= plan.target_eval_loss:
            break
    return state


def snapshot_pairs(n_snapshots: int, delta: int):
    if delta < 1:
        raise PairingError(f"prediction offset must be >= 1, got {delta}")
    if n_snapshots <= delta:
        raise PairingError(
            f"{n_snapshots} snapshots cannot form (t, t+{delta}) pairs")
    return [(i, i + delta) for i in range(n_snapshots - delta)]


def finetune(params, config: ModelConfig, dataset: DatasetContainer,
             plan: TrainPlan, log=None, state: TrainerState | None = None
             ) -> TrainerState:
    """Supervised (t -> t+delta) training of the predictor head.

    few_shot keeps a deterministic subsample of the training pairs;
    freeze_encoder leaves everything but predictor.* and vspe.* untouched.
    """
    if state is None:
        state = fresh_state(params, config, plan)
    unknown = [v for v in dataset.variables
               if v not in state.config.variables]
    if unknown:
        raise UnknownVariableError(
            f"dataset variables {unknown} not registered in the model "
            f"(model has {state.config.variables})")
    if not has_predictor(state.params, state.config):
        raise TrainingStateError(
            "no predictor head in these parameters; extend_variables creates one")
    cache = {}

    train_pairs, hold_pairs = prediction_splits(dataset.n_snapshots, plan)
    if not state.holdout:
        state.holdout = tuple(j for _, j in hold_pairs)

    if plan.freeze_encoder:
        for name in state.params.names():
            head = name.split(".", 1)[0]
            if head not in ("predictor", "vspe"):
                state.params.freeze(name)

    def emit(record):
        state.history.append(record)
        if log is not None:
            log(record)

    if state.epoch == 0 and not any(r.get("phase") == "finetune"
                                    for r in state.history):
        report = evaluate_prediction(state.params, state.config, dataset,
                                     plan, hold_pairs, cache)
        emit({"phase": "finetune", "epoch": 0, "train_loss": None,
              "eval_loss": report.overall,
              "eval_per_variable": report.per_variable})

    while state.epoch < plan.epochs:
        order = state.rng.permutation(len(train_pairs))
        train_losses = []
        for start in range(0, len(order), plan.batch_size):
            losses = []
            for k in order[start:start + plan.batch_size]:
                i, j = train_pairs[int(k)]
                out = model_forward(state.params, state.config,
                                    dataset.function(i), head="predictor",
                                    cache=cache)
                target = dataset.snapshots[j]
                losses.append(loss_relative_l2(out, target, dataset.mesh))
            train_losses.append(_batch_step(state, plan, losses))
        state.epoch += 1
        report = evaluate_prediction(state.params, state.config, dataset,
                                     plan, hold_pairs, cache)
        emit({"phase": "finetune", "epoch": state.epoch,
              "train_loss": float(np.mean(train_losses)),
              "eval_loss": report.overall,
              "eval_per_variable": report.per_variable})
        if plan.target_eval_loss > 0 and report.overall <= plan.target_eval_loss:
            break
    return state


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, state: TrainerState, plan: TrainPlan | None = None
                    ) -> None:
    buffers = [(f"param.{n}", t.data) for n, t in state.params.items()]
    for n in state.params.names():
        if n in state.adam.m:
            buffers.append((f"adam.m.{n}", state.adam.m[n]))
            buffers.append((f"adam.v.{n}", state.adam.v[n]))
    header = {
        "kind": "checkpoint",
        "model_config": state.config.to_dict(),
        "epoch": state.epoch,
        "holdout": [int(i) for i in state.holdout],
        "history": state.history,
        "frozen": sorted(n for n in state.params.names()
                         if state.params.is_frozen(n)),
        "adam": {"lr": state.adam.lr, "beta1": state.adam.beta1,
                 "beta2": state.adam.beta2, "eps": state.adam.eps,
                 "step": state.adam.step},
        "rng_state": state.rng.bit_generator.state,
        "plan": plan.to_dict() if plan is not None else None,
    }
    write_container(path, header, buffers)


def load_checkpoint(path) -> TrainerState:
    header, buffers = read_container(path)
    if header.get("kind") != "checkpoint":
        raise TrainingStateError(f"container at {path} is not a checkpoint "
                                 f"(kind={header.get('kind')!r})")
    config = ModelConfig.from_dict(header["model_config"])
    params = ad.ParamStore()
    for spec in header["buffers"]:
        name = spec["name"]
        if name.startswith("param."):
            params.add(name[len("param."):], buffers[name])
    for name in header.get("frozen", []):
        params.freeze(name)
    a = header["adam"]
    adam = ad.AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"],
                        eps=a["eps"], step=a["step"])
    for name in params.names():
        key = f"adam.m.{name}"
        if key in buffers:
            adam.m[name] = buffers[key]
            adam.v[name] = buffers[f"adam.v.{name}"]
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    return TrainerState(params=params, config=config, adam=adam, rng=rng,
                        epoch=int(header["epoch"]),
                        holdout=tuple(header.get("holdout", [])),
                        history=list(header.get("history", [])))
