"""Bi-level teacher training and downstream detector training.

Each meta iteration samples two disjoint class-balanced batches, runs the
student through ``lower_steps`` gradient-descent steps under the teacher's
pixel-wise supervision, evaluates the stepped student against the
momentum-averaged shadow teacher on the validation batch, and updates the
teacher by descending

    d/dw [ L_val(theta*(w)) - mu * mean_k mean(sigmoid(g_w(x_k))) ]

where only the final student step is differentiated through (its incoming
weights are treated as constants with respect to the teacher). The mixed
second-order term is assembled structurally: a reverse pass gives
v = dL_val/dtheta*, a forward-mode pass through the final step's tape gives
per-sample directional derivatives u_k = J_theta f(x_k) . v, and one
reverse pass through the teacher pulls the combined cotangent back to the
teacher weights. Live samples never contribute: their supervision is the
constant zero-map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor, WeightBundle
from .networks import (NetworkSpec, SupervisionMap, TeacherState, bind_params,
                       constrained_spoof_maps, forward_raw, forward_vars,
                       init_weights, normalized_supervision,
                       baseline_teacher_output)
from .synth_data import Dataset, Sample

# spawn keys for the independent per-stage random streams of one seed
_K_TEACHER_INIT, _K_STUDENT_INIT, _K_PRETRAIN, _K_META_LOOP = 0, 1, 2, 3


@dataclass
class TrainConfig:
    """Scalar hyperparameters of the bi-level training procedure."""

    alpha: float = 0.001          # lower-level (student) learning rate
    beta: float = 0.001           # meta (teacher) learning rate
    gamma: float = 0.999          # shadow-teacher momentum
    mu: float = 0.001             # anti-collapse regularizer weight
    T: int = 10                   # detector sync interval (iterations)
    M: int = 20                   # per-class batch size of the training batch
    N: int = 10                   # per-class batch size of the validation batch
    lower_steps: int = 2          # student gradient steps per iteration
    pretrain_iters: int = 2000
    meta_iters: int = 5000
    seed: int = 0
    no_pretrain: bool = False
    no_mt_v: bool = False
    no_detector_sync: bool = False
    precision: str = "single"

    def __post_init__(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.M < 1 or self.N < 1:
            raise ValueError("M and N must be at least 1")
        if self.lower_steps < 1:
            raise ValueError("lower_steps must be at least 1")
        if self.pretrain_iters < 0 or self.meta_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")


@dataclass(frozen=True)
class MetaIterationTrace:
    iteration: int
    l_train: float
    l_val: float
    meta_grad_norm: float
    mean_sigmoid: float
    detector_synced: bool


TRACE_COLUMNS = ("iteration", "l_train", "l_val", "meta_grad_norm",
                 "mean_sigmoid", "detector_synced")


class NonFiniteLossError(RuntimeError):
    """A loss went NaN/Inf; carries the trace collected so far."""

    def __init__(self, message: str, trace: list[MetaIterationTrace] | None = None):
        super().__init__(message)
        self.trace = trace or []


def _as_samples(dataset) -> list[Sample]:
    if isinstance(dataset, Dataset):
        return list(dataset.samples)
    return list(dataset)


def _classes(samples: Sequence[Sample]) -> tuple[list[Sample], list[Sample]]:
    lives = [s for s in samples if s.label == "live"]
    spoofs = [s for s in samples if s.label == "spoof"]
    return lives, spoofs


def sample_batches(dataset, M: int, N: int,
                   rng: np.random.Generator) -> tuple[list[Sample], list[Sample]]:
    """Draw disjoint class-balanced batches: 2M faces for training and 2N
    for validation, with no sample shared between the two."""
    lives, spoofs = _classes(_as_samples(dataset))
    if len(lives) < M + N or len(spoofs) < M + N:
        raise ValueError(
            f"need at least {M + N} samples per class, have "
            f"{len(lives)} live / {len(spoofs)} spoof")
    li = rng.choice(len(lives), size=M + N, replace=False)
    si = rng.choice(len(spoofs), size=M + N, replace=False)
    phi_t = [lives[i] for i in li[:M]] + [spoofs[i] for i in si[:M]]
    phi_v = [lives[i] for i in li[M:]] + [spoofs[i] for i in si[M:]]
    return phi_t, phi_v


def momentum_update(omega_hat: WeightBundle, omega: WeightBundle,
                    gamma: float) -> WeightBundle:
    """Shadow-teacher update: omega_hat <- gamma*omega_hat + (1-gamma)*omega."""
    if not omega_hat.same_layout(omega):
        raise ad.ShapeError("momentum_update requires identical layouts")
    dt = omega_hat.flat.data.dtype
    new = dt.type(gamma) * omega_hat.flat.data + dt.type(1.0 - gamma) * omega.flat.data
    return omega_hat.with_flat(new)


class Adam:
    """Adam with the conventional constants (b1=0.9, b2=0.999, eps=1e-8)."""

    def __init__(self, size: int, lr: float, dtype,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray) -> np.ndarray:
        dt = flat.dtype.type
        self.t += 1
        self.m = dt(self.beta1) * self.m + dt(1 - self.beta1) * grad
        self.v = dt(self.beta2) * self.v + dt(1 - self.beta2) * (grad * grad)
        mhat = self.m / dt(1 - self.beta1 ** self.t)
        vhat = self.v / dt(1 - self.beta2 ** self.t)
        return flat - dt(self.lr) * mhat / (np.sqrt(vhat) + dt(self.eps))


@dataclass
class StepRecord:
    """Tape of the final lower-level step, kept for the meta gradient."""

    tape: ad.Tape
    map_var: ad.Var
    loss_var: ad.Var
    theta_in: WeightBundle
    sample_ids: tuple[int, ...]
    spoof_rows: tuple[int, ...]
    alpha: float
    step_losses: tuple[float, ...] = ()


@dataclass
class TeacherRecord:
    tape: ad.Tape
    p_var: ad.Var
    sample_ids: tuple[int, ...]


def _check_finite_scalar(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NonFiniteError(f"{what} is not finite")
    return value


class MetaTrainer:
    """Runs the full teacher-training procedure for a student/teacher pair."""

    def __init__(self, student_spec: NetworkSpec, teacher_spec: NetworkSpec,
                 cfg: TrainConfig):
        if student_spec.output_shape != teacher_spec.output_shape:
            raise ad.ShapeError("student and teacher must emit the same map shape")
        self.student_spec = student_spec
        self.teacher_spec = teacher_spec
        self.cfg = cfg
        self.dtype = ad.dtype_for(cfg.precision)
        self.final_theta: WeightBundle | None = None

    # -- batching helpers ---------------------------------------------------

    def _stack(self, samples: Sequence[Sample], dtype=None) -> np.ndarray:
        dt = self.dtype if dtype is None else dtype
        return np.stack([s.image.data for s in samples]).astype(dt, copy=False)

    def _spoof_rows(self, samples: Sequence[Sample]) -> tuple[int, ...]:
        return tuple(i for i, s in enumerate(samples) if s.label == "spoof")

    def supervision_targets(self, omega: WeightBundle,
                            samples: Sequence[Sample]) -> np.ndarray:
        """Teacher maps for a batch: exact zero rows for live samples,
        2*sigmoid(g(x)) for spoof samples (evaluated in one batched pass)."""
        dt = omega.flat.data.dtype
        out_shape = self.teacher_spec.output_shape
        targets = np.zeros((len(samples),) + out_shape, dtype=dt)
        rows = self._spoof_rows(samples)
        if rows:
            spoof_imgs = self._stack([samples[i] for i in rows], dt)
            targets[list(rows)] = constrained_spoof_maps(
                self.teacher_spec, omega, spoof_imgs)
        return targets

    def binary_targets(self, samples: Sequence[Sample]) -> np.ndarray:
        out_shape = self.student_spec.output_shape
        targets = np.zeros((len(samples),) + out_shape, dtype=self.dtype)
        for i, s in enumerate(samples):
            if s.label == "spoof":
                targets[i] = 1.0
        return targets

    def _record_student_loss(self, theta: WeightBundle, images: np.ndarray,
                             targets: np.ndarray) -> tuple[ad.Tape, ad.Var, ad.Var]:
        tape = ad.Tape(theta.flat.data.dtype)
        params = bind_params(tape, self.student_spec, theta)
        out = forward_vars(self.student_spec, params, tape.const(images))
        diff = ad.sub(out, tape.const(targets))
        loss = ad.mean(ad.mul(diff, diff))
        tape.outputs = [loss]
        return tape, out, loss

    def _record_teacher(self, omega: WeightBundle,
                        spoofs: Sequence[Sample]) -> TeacherRecord:
        tape = ad.Tape(omega.flat.data.dtype)
        params = bind_params(tape, self.teacher_spec, omega)
        images = self._stack(spoofs, omega.flat.data.dtype)
        g = forward_vars(self.teacher_spec, params, tape.const(images))
        p = ad.scale(ad.sigmoid(g), 2.0)
        tape.outputs = [p]
        return TeacherRecord(tape, p, tuple(s.id for s in spoofs))

    # -- pretraining --------------------------------------------------------

    def pretrain(self, detector_weights: WeightBundle, teacher_state: TeacherState,
                 dataset) -> tuple[WeightBundle, TeacherState]:
        """Regress both backbones toward zero-maps (live) and one-maps
        (spoof) with Adam for ``pretrain_iters`` steps, then set the shadow
        teacher to an exact copy of the teacher. Skipped entirely (except
        the copy) under the no_pretrain ablation."""
        samples = _as_samples(dataset)
        lives, spoofs = _classes(samples)
        if not lives or not spoofs:
            raise ValueError("pretraining needs both live and spoof samples")
        cfg = self.cfg
        theta = detector_weights
        omega = teacher_state.omega
        if not cfg.no_pretrain:
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(entropy=cfg.seed, spawn_key=(_K_PRETRAIN,))))
            adam_t = Adam(omega.size, cfg.alpha, self.dtype)
            adam_s = Adam(theta.size, cfg.alpha, self.dtype)
            m = min(cfg.M, len(lives), len(spoofs))
            for _ in range(cfg.pretrain_iters):
                li = rng.choice(len(lives), size=m, replace=False)
                si = rng.choice(len(spoofs), size=m, replace=False)
                batch = [lives[i] for i in li] + [spoofs[i] for i in si]
                images = self._stack(batch)
                targets = self.binary_targets(batch)
                for spec, bundle, adam in ((self.teacher_spec, omega, adam_t),
                                           (self.student_spec, theta, adam_s)):
                    tape = ad.Tape(self.dtype)
                    params = bind_params(tape, spec, bundle)
                    out = forward_vars(spec, params, tape.const(images))
                    diff = ad.sub(out, tape.const(targets))
                    loss = ad.mean(ad.mul(diff, diff))
                    tape.outputs = [loss]
                    _check_finite_scalar(float(loss.value), "pretraining loss")
                    g = ad.grad(tape, bundle)
                    new_flat = adam.step(bundle.flat.data, g.data)
                    if spec is self.teacher_spec:
                        omega = bundle.with_flat(new_flat)
                    else:
                        theta = bundle.with_flat(new_flat)
        return theta, TeacherState(self.teacher_spec, omega, omega.copy())

    # -- lower level ---------------------------------------------------------

    def lower_level_step(self, theta: WeightBundle, omega: WeightBundle,
                         phi_t: Sequence[Sample], alpha: float | None = None,
                         steps: int | None = None,
                         targets: np.ndarray | None = None
                         ) -> tuple[WeightBundle, StepRecord]:
        """Apply ``steps`` gradient-descent steps of the student on one
        batch under the teacher's supervision. Returns the stepped weights
        and the record of the final step; the final step's incoming weights
        are what the meta gradient treats as constant."""
        alpha = self.cfg.alpha if alpha is None else alpha
        steps = self.cfg.lower_steps if steps is None else steps
        if steps < 1:
            raise ValueError("steps must be at least 1")
        if targets is None:
            targets = self.supervision_targets(omega, phi_t)
        images = self._stack(phi_t, theta.flat.data.dtype)
        record: StepRecord | None = None
        losses: list[float] = []
        for step in range(steps):
            theta_in = theta
            tape, map_var, loss_var = self._record_student_loss(theta, images, targets)
            losses.append(
                _check_finite_scalar(float(loss_var.value), "lower-level loss"))
            g = ad.grad(tape, theta)
            dt = theta.flat.data.dtype.type
            theta = theta.with_flat(theta.flat.data - dt(alpha) * g.data)
            if step == steps - 1:
                record = StepRecord(tape, map_var, loss_var, theta_in,
                                    tuple(s.id for s in phi_t),
                                    self._spoof_rows(phi_t), alpha, tuple(losses))
        assert record is not None
        return theta, record

    # -- validation ----------------------------------------------------------

    def validation_loss(self, theta_star: WeightBundle, omega_hat: WeightBundle,
                        phi_v: Sequence[Sample]) -> tuple[float, ad.Tape]:
        """Pixel MSE of the stepped student against the shadow teacher's
        supervision on the validation batch; the tape differentiates with
        respect to the student weights."""
        targets = self.supervision_targets(omega_hat, phi_v)
        images = self._stack(phi_v, theta_star.flat.data.dtype)
        tape, _, loss_var = self._record_student_loss(theta_star, images, targets)
        value = _check_finite_scalar(float(loss_var.value), "validation loss")
        return value, tape

    # -- meta gradient --------------------------------------------------------

    def meta_gradient(self, theta: WeightBundle, omega: WeightBundle,
                      theta_star: WeightBundle, phi_t: Sequence[Sample],
                      phi_v: Sequence[Sample], omega_hat: WeightBundle,
                      alpha: float | None = None, mu: float | None = None,
                      step_record: StepRecord | None = None,
                      val_grad: Tensor | None = None,
                      teacher_record: TeacherRecord | None = None) -> Tensor:
        """Descent gradient of the meta objective with respect to the
        teacher weights. ``theta`` is the final step's incoming student
        weights (equal to the iteration's theta when lower_steps == 1)."""
        alpha = self.cfg.alpha if alpha is None else alpha
        mu = self.cfg.mu if mu is None else mu
        phi_t_ids = tuple(s.id for s in phi_t)
        if step_record is not None:
            if step_record.sample_ids != phi_t_ids or step_record.alpha != alpha:
                raise ValueError("step record does not match this batch and alpha")
        spoofs = [s for s in phi_t if s.label == "spoof"]
        if not spoofs:
            return Tensor(np.zeros(omega.size, dtype=omega.flat.data.dtype))

        if val_grad is None:
            _, val_tape = self.validation_loss(theta_star, omega_hat, phi_v)
            val_grad = ad.grad(val_tape, theta_star)
        if step_record is None:
            targets = self.supervision_targets(omega, phi_t)
            tape, map_var, loss_var = self._record_student_loss(
                theta, self._stack(phi_t, theta.flat.data.dtype), targets)
            step_record = StepRecord(tape, map_var, loss_var, theta,
                                     phi_t_ids, self._spoof_rows(phi_t), alpha)

        u = ad.jvp(step_record.tape, theta, val_grad, output=step_record.map_var)
        u_spoof = u.data[list(step_record.spoof_rows)]

        if teacher_record is None:
            teacher_record = self._record_teacher(omega, spoofs)
        elif teacher_record.sample_ids != tuple(s.id for s in spoofs):
            raise ValueError("teacher record does not match this batch")

        out_c, out_h, out_w = self.teacher_spec.output_shape
        n_px = out_c * out_h * out_w
        dt = omega.flat.data.dtype.type
        lv_coeff = dt(2.0 * alpha / (len(phi_t) * n_px))
        mu_coeff = dt(mu / (2.0 * len(spoofs) * n_px))
        cotangent = lv_coeff * u_spoof - mu_coeff
        result = ad.vjp(teacher_record.tape, omega, Tensor(cotangent),
                        output=teacher_record.p_var)
        if not np.isfinite(result.data).all():
            raise NonFiniteError("meta gradient is not finite")
        return result

    # -- full procedure --------------------------------------------------------

    def train_meta_teacher(self, dataset) -> tuple[TeacherState, list[MetaIterationTrace]]:
        """Run pretraining plus ``meta_iters`` bi-level iterations.

        Deterministic in cfg.seed; a non-finite loss aborts with the trace
        collected so far attached to the raised error.
        """
        cfg = self.cfg
        theta = init_weights(self.student_spec,
                             np.random.SeedSequence(entropy=cfg.seed,
                                                    spawn_key=(_K_STUDENT_INIT,)),
                             cfg.precision)
        omega = init_weights(self.teacher_spec,
                             np.random.SeedSequence(entropy=cfg.seed,
                                                    spawn_key=(_K_TEACHER_INIT,)),
                             cfg.precision)
        state = TeacherState(self.teacher_spec, omega, omega.copy())
        theta, state = self.pretrain(theta, state, dataset)
        omega, omega_hat = state.omega, state.omega_hat

        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(_K_META_LOOP,))))
        trace: list[MetaIterationTrace] = []
        dt = self.dtype.type
        try:
            for it in range(cfg.meta_iters):
                phi_t, phi_v = sample_batches(dataset, cfg.M, cfg.N, rng)
                spoofs = [s for s in phi_t if s.label == "spoof"]
                teacher_rec = self._record_teacher(omega, spoofs) if spoofs else None
                targets = np.zeros((len(phi_t),) + self.teacher_spec.output_shape,
                                   dtype=self.dtype)
                if teacher_rec is not None:
                    targets[[i for i, s in enumerate(phi_t) if s.label == "spoof"]] = \
                        teacher_rec.p_var.value
                mean_sigmoid = (float(teacher_rec.p_var.value.mean()) / 2.0
                                if teacher_rec is not None else 0.0)

                theta_star, rec = self.lower_level_step(theta, omega, phi_t,
                                                        targets=targets)
                l_train = rec.step_losses[0]
                omega_hat_eff = omega if cfg.no_mt_v else omega_hat
                l_val, val_tape = self.validation_loss(theta_star, omega_hat_eff, phi_v)
                v = ad.grad(val_tape, theta_star)
                g_meta = self.meta_gradient(rec.theta_in, omega, theta_star,
                                            phi_t, phi_v, omega_hat_eff,
                                            step_record=rec, val_grad=v,
                                            teacher_record=teacher_rec)
                omega = omega.with_flat(omega.flat.data - dt(cfg.beta) * g_meta.data)
                omega_hat = omega.copy() if cfg.no_mt_v \
                    else momentum_update(omega_hat, omega, cfg.gamma)
                synced = (it % cfg.T == 0) and not cfg.no_detector_sync
                if synced:
                    theta = theta_star
                trace.append(MetaIterationTrace(
                    it, l_train, l_val, float(np.linalg.norm(g_meta.data)),
                    mean_sigmoid, synced))
        except NonFiniteError as exc:
            raise NonFiniteLossError(str(exc), trace) from exc
        self.final_theta = theta
        return TeacherState(self.teacher_spec, omega, omega_hat), trace


# ---------------------------------------------------------------------------
# downstream detector training


SUPERVISION_SOURCES = ("meta_teacher", "pixel_binary", "baseline_teacher")


def make_supervision_source(kind: str, out_shape: tuple[int, int, int],
                            teacher_spec: NetworkSpec | None = None,
                            teacher_weights: WeightBundle | None = None
                            ) -> Callable[[Sample], SupervisionMap]:
    if kind == "pixel_binary":
        def source(sample: Sample) -> SupervisionMap:
            value = 1.0 if sample.label == "spoof" else 0.0
            return SupervisionMap(Tensor(np.full(out_shape, value, dtype=np.float32)),
                                  "binary")
        return source
    if kind in ("meta_teacher", "baseline_teacher"):
        if teacher_spec is None or teacher_weights is None:
            raise ValueError(f"supervision source {kind!r} needs a trained teacher")
        transform = normalized_supervision if kind == "meta_teacher" \
            else baseline_teacher_output

        def source(sample: Sample) -> SupervisionMap:
            return transform(teacher_weights, teacher_spec, sample)
        return source
    raise ValueError(f"unavailable supervision source {kind!r}")


def train_detector(detector_spec: NetworkSpec, supervision_source: str, dataset,
                   epochs: int, lr: float, seed: int,
                   teacher_spec: NetworkSpec | None = None,
                   teacher_weights: WeightBundle | None = None,
                   batch_size: int = 8, precision: str = "single") -> WeightBundle:
    """Adam-train a detector to regress each sample's supervision map.

    Supervision maps are precomputed once (the teacher is fixed); batches
    are reshuffled each epoch from a seed-derived stream.
    """
    samples = _as_samples(dataset)
    if not samples:
        raise ValueError("empty training set")
    dtype = ad.dtype_for(precision)
    source = make_supervision_source(supervision_source, detector_spec.output_shape,
                                     teacher_spec, teacher_weights)
    target_arr = np.stack([source(s).values.data for s in samples]).astype(dtype)
    image_arr = np.stack([s.image.data for s in samples]).astype(dtype)

    init_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    theta = init_weights(detector_spec, init_ss, precision)
    rng = np.random.Generator(np.random.PCG64(shuffle_ss))
    adam = Adam(theta.size, lr, dtype)
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), batch_size):
            rows = order[start:start + batch_size]
            tape = ad.Tape(dtype)
            params = bind_params(tape, detector_spec, theta)
            out = forward_vars(detector_spec, params, tape.const(image_arr[rows]))
            diff = ad.sub(out, tape.const(target_arr[rows]))
            loss = ad.mean(ad.mul(diff, diff))
            tape.outputs = [loss]
            _check_finite_scalar(float(loss.value), "detector loss")
            g = ad.grad(tape, theta)
            theta = theta.with_flat(adam.step(theta.flat.data, g.data))
    return theta


def pixel_binary_mse(spec: NetworkSpec, weights: WeightBundle,
                     samples: Sequence[Sample]) -> float:
    """Mean squared error of raw maps against the 0/1 binary targets."""
    dtype = weights.flat.data.dtype
    images = np.stack([s.image.data for s in samples]).astype(dtype)
    targets = np.zeros((len(samples),) + spec.output_shape, dtype=dtype)
    for i, s in enumerate(samples):
        if s.label == "spoof":
            targets[i] = 1.0
    out = forward_raw(spec, weights, images)
    return float(np.mean((out - targets) ** 2, dtype=np.float64))
