"""Synthetic data, model-constrained training and evaluation for the heat inverse problem.

The model maps a noisy temperature field to the conductivity that produced
it.  Per sample the training loss is

    1/2 ||kappa_pred - kappa_exact||^2_L2  +  alpha/2 ||u(kappa_pred) - u_obs||^2_L2

averaged over the training set, and the test metric R is the mean of
||kappa_pred - kappa_exact||^2_L2 / ||kappa_exact||^2_L2.
"""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .errors import AfemError, AssemblyError, DivergenceError, SolverError
from .fem import l2_normsq, solve_forward
from .fem_ops import op_cast_to_dofs, op_l2_lossq, op_pde_solve
from .mesh import FeFunction, Mesh, build_unit_square_mesh, grid_view, interpolate
from .nn import AdamState, BoundParams, ModelParams, adam_step, model_forward
from .tape import ReducedFunctional, Tape, Variable, backward

log = logging.getLogger(__name__)

# Train seeds are base + i, test seeds base + TEST_OFFSET + i, so the two
# ranges cannot overlap while n_train < TEST_OFFSET.
SEED_STRIDE = 2**32
TEST_OFFSET = 2**31


class GenerationError(AfemError, RuntimeError):
    def __init__(self, seed: int, cause: Exception):
        super().__init__(f"forward solve failed for sample seed {seed}: {cause}")
        self.seed = seed


def _from_dict(cls, d):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class GenConfig:
    n_train: int = 50
    n_test: int = 20
    nx: int = 16
    ny: int = 16
    source: str = "sine"
    source_amplitude: float = 10.0
    n_modes: int = 8
    sigma_kappa: float = 0.5
    decay: float = 1.0
    noise: float = 0.01
    seed: int = 0
    tol: float = 1e-10

    def __post_init__(self):
        if self.n_train < 0 or self.n_test < 0 or max(self.n_train, self.n_test) >= TEST_OFFSET:
            raise ValueError("sample counts must be in [0, 2**31)")
        if self.nx < 1 or self.ny < 1 or self.n_modes < 1:
            raise ValueError("nx, ny and n_modes must be positive")
        if self.sigma_kappa < 0 or self.noise < 0 or self.decay < 0 or self.tol <= 0:
            raise ValueError("sigma_kappa, noise and decay must be non-negative, tol positive")
        if not 0 <= self.seed < SEED_STRIDE:
            raise ValueError("seed must fit in 32 bits")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}; choose from {sorted(SOURCES)}")

    def train_seeds(self) -> list[int]:
        base = self.seed * SEED_STRIDE
        return [base + i for i in range(self.n_train)]

    def test_seeds(self) -> list[int]:
        base = self.seed * SEED_STRIDE + TEST_OFFSET
        return [base + i for i in range(self.n_test)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "GenConfig":
        return _from_dict(cls, d)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 10
    tol: float = 1e-10
    seed: int = 0
    checkpoint_every: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.threads < 1:
            raise ValueError("invalid epochs / batch_size / lr / threads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return _from_dict(cls, d)


SOURCES = {
    "sine": lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y),
    "constant": lambda x, y: np.ones_like(x),
}


def source_term(mesh: Mesh, cfg: GenConfig) -> FeFunction:
    g = SOURCES[cfg.source]
    return interpolate(lambda x, y: cfg.source_amplitude * g(x, y), mesh)


@dataclass(frozen=True, eq=False)
class Sample:
    kappa_exact: FeFunction
    u_obs: FeFunction
    seed: int


@dataclass(eq=False)
class Dataset:
    config: GenConfig
    train: list[Sample]
    test: list[Sample]
    norm_mean: float = 0.0
    norm_std: float = 1.0
    mesh: Mesh = field(init=False, repr=False)

    def __post_init__(self):
        self.mesh = build_unit_square_mesh(self.config.nx, self.config.ny)

    def split(self, name: str) -> list[Sample]:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test


def generate_kappa(seed: int, cfg: GenConfig, mesh: Mesh | None = None) -> FeFunction:
    """Truncated sine series sigma * sum a_kl (k^2 + l^2)^-decay sin(k pi x) sin(l pi y), a_kl ~ N(0, 1)."""
    mesh = mesh or build_unit_square_mesh(cfg.nx, cfg.ny)
    rng = np.random.default_rng(seed)
    K = cfg.n_modes
    a = rng.standard_normal((K, K))
    k = np.arange(1, K + 1)
    coeff = a * (k[:, None] ** 2 + k[None, :] ** 2) ** (-cfg.decay)
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    sx = np.sin(np.pi * k[:, None] * x[None, :])
    sy = np.sin(np.pi * k[:, None] * y[None, :])
    values = cfg.sigma_kappa * np.einsum("kl,kn,ln->n", coeff, sx, sy)
    return FeFunction(mesh, values)


def observe(u: FeFunction, seed: int, noise: float) -> FeFunction:
    """u + eps with eps ~ N(0, (noise * rms(u))^2) at every node, boundary included."""
    rms = float(np.sqrt(np.mean(u.dofs**2)))
    rng = np.random.default_rng([seed, 1])
    eps = rng.normal(0.0, noise * rms, size=u.dofs.shape) if noise > 0 else 0.0
    return FeFunction(u.mesh, u.dofs + eps)


def make_sample(seed: int, cfg: GenConfig, mesh: Mesh, f: FeFunction) -> Sample:
    kappa = generate_kappa(seed, cfg, mesh)
    try:
        u = solve_forward(kappa, f, cfg.tol)
    except SolverError as exc:
        raise GenerationError(seed, exc) from exc
    return Sample(kappa, observe(u, seed, cfg.noise), seed)


def normalization_stats(samples: Sequence[Sample]) -> tuple[float, float]:
    if not samples:
        return 0.0, 1.0
    values = np.concatenate([s.u_obs.dofs for s in samples])
    std = float(values.std())
    return float(values.mean()), (std if std > 0 else 1.0)


def generate_dataset(cfg: GenConfig, progress: Callable[[int, int], None] | None = None) -> Dataset:
    mesh = build_unit_square_mesh(cfg.nx, cfg.ny)
    f = source_term(mesh, cfg)
    seeds = cfg.train_seeds() + cfg.test_seeds()
    samples = []
    for i, s in enumerate(seeds):
        samples.append(make_sample(s, cfg, mesh, f))
        if progress:
            progress(i + 1, len(seeds))
    train, test = samples[: cfg.n_train], samples[cfg.n_train:]
    mean, std = normalization_stats(train)
    return Dataset(cfg, train, test, mean, std)


@dataclass(frozen=True, eq=False)
class InverseProblem:
    """Everything a sample loss needs besides parameters and data."""

    mesh: Mesh
    source: FeFunction
    norm_mean: float
    norm_std: float
    tol: float = 1e-10

    @classmethod
    def from_dataset(cls, ds: Dataset, tol: float | None = None) -> "InverseProblem":
        return cls(ds.mesh, source_term(ds.mesh, ds.config), ds.norm_mean, ds.norm_std,
                   ds.config.tol if tol is None else tol)

    def model_input(self, u_obs: FeFunction) -> np.ndarray:
        return (grid_view(u_obs) - self.norm_mean) / self.norm_std


def sample_loss(params, sample: Sample, alpha: float, tape: Tape, problem: InverseProblem) -> Variable:
    """Two-term model-constrained loss of one sample, recorded on ``tape``.

    ``params`` is a :class:`ModelParams` or a :class:`BoundParams` on ``tape``.
    The PDE node is recorded even for ``alpha == 0`` so that its (zero)
    cotangent can be inspected.
    """
    x = tape.constant(problem.model_input(sample.u_obs), name="u_obs_grid")
    kappa_grid = model_forward(params, x)
    kappa = op_cast_to_dofs(kappa_grid, problem.mesh)
    misfit = op_l2_lossq(kappa, sample.kappa_exact, 0.5)
    u = op_pde_solve(kappa, problem.source, problem.tol)
    residual = op_l2_lossq(u, sample.u_obs, 0.5 * alpha)
    return misfit + residual


def loss_and_grad(params: ModelParams, sample: Sample, alpha: float, problem: InverseProblem):
    tape = Tape()
    bound = BoundParams(params, tape)
    loss = sample_loss(bound, sample, alpha, tape, problem)
    grads = backward(ReducedFunctional(loss, list(bound.values())))
    return float(loss.value), dict(zip(bound.keys(), grads))


def predict(params: ModelParams, u_obs: FeFunction, problem: InverseProblem) -> FeFunction:
    tape = Tape()
    bound = BoundParams(params, tape, requires_grad=False)
    out = model_forward(bound, tape.constant(problem.model_input(u_obs)))
    return FeFunction(problem.mesh, out.value.reshape(-1))


@dataclass
class TrainState:
    params: ModelParams
    adam: AdamState
    epoch: int = 0
    history: list[float] = field(default_factory=list)


def _threads(cfg: TrainConfig) -> int:
    env = os.environ.get("AFEM_THREADS")
    return max(1, int(env)) if env else cfg.threads


def train(
    params: ModelParams,
    dataset: Dataset,
    cfg: TrainConfig,
    resume: TrainState | None = None,
    on_epoch: Callable[[TrainState, float], None] | None = None,
) -> TrainState:
    """Minibatch Adam on the sample-averaged loss.

    ``history[0]`` is the mean training loss at the starting parameters and
    ``history[e]`` the mean of the per-sample losses seen during epoch ``e``.
    Shuffling depends only on ``(cfg.seed, epoch)`` so a resumed run follows
    the same trajectory as an uninterrupted one.  Per-sample gradients are
    summed in batch order whatever the thread count.
    """
    problem = InverseProblem.from_dataset(dataset, cfg.tol)
    samples = dataset.train
    n = len(samples)
    if n == 0:
        raise ValueError("empty training split")
    threads = _threads(cfg)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    mapper = pool.map if pool else map

    def run(idx):
        return loss_and_grad(state.params, samples[idx], cfg.alpha, problem)

    try:
        if resume is None:
            state = TrainState(params.copy(), AdamState.zeros_like(params))
            t0 = time.perf_counter()
            initial = [
                float(sample_loss(state.params, s, cfg.alpha, Tape(), problem).value) for s in samples
            ]
            state.history.append(float(np.mean(initial)))
            if not np.isfinite(state.history[0]):
                raise DivergenceError("non-finite initial loss", epoch=0)
            if on_epoch:
                on_epoch(state, time.perf_counter() - t0)
        else:
            state = TrainState(resume.params.copy(), resume.adam, resume.epoch, list(resume.history))

        for epoch in range(state.epoch, cfg.epochs):
            t0 = time.perf_counter()
            last_good = TrainState(state.params, state.adam, state.epoch, list(state.history))
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            losses = np.empty(n)
            for start in range(0, n, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                try:
                    results = list(mapper(run, batch))
                except (AssemblyError, SolverError) as exc:
                    raise DivergenceError(f"epoch {epoch + 1}: {exc}", epoch, last_good) from exc
                total = {k: np.zeros_like(v) for k, v in state.params.tensors.items()}
                for idx, (loss, grads) in zip(batch, results):
                    losses[idx] = loss
                    for k in total:
                        total[k] += grads[k]
                if not np.all(np.isfinite(losses[batch])):
                    raise DivergenceError(f"non-finite loss in epoch {epoch + 1}", epoch, last_good)
                grads = {k: v / len(batch) for k, v in total.items()}
                try:
                    state.params, state.adam = adam_step(state.params, grads, state.adam, cfg.lr)
                except DivergenceError as exc:
                    raise DivergenceError(str(exc), epoch, last_good) from exc
            state.epoch = epoch + 1
            state.history.append(float(losses.mean()))
            if on_epoch:
                on_epoch(state, time.perf_counter() - t0)
    finally:
        if pool:
            pool.shutdown()
    return state


def relative_error(pred: FeFunction, exact: FeFunction) -> float:
    denom = l2_normsq(exact)
    if denom < 1e-14:
        raise ValueError("||kappa_exact||^2 below 1e-14; relative error undefined")
    return l2_normsq(pred - exact) / denom


def evaluate(params: ModelParams, samples: Sequence[Sample], problem: InverseProblem) -> float:
    """Mean squared-norm ratio R over ``samples`` (not square-rooted)."""
    if not samples:
        raise ValueError("no samples to evaluate")
    return float(np.mean([relative_error(predict(params, s.u_obs, problem), s.kappa_exact) for s in samples]))
