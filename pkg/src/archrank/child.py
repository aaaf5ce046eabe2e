"""Continuously parametrized child models.

An architecture is encoded as a vector of softmax logits u = (gamma, alpha,
beta): gamma mixes fixed feature modules, each alpha row mixes the base
layers inside one parametrized layer, and each beta row gates that layer
against a residual skip. Two performance backends measure an encoding on a
task: ``RealTrainBackend`` actually builds and trains the child network,
``AnalyticBackend`` is a smooth surrogate cheap enough to brute-force.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tape, Var
from .tasks import TaskDataset, sample_batch

CHILD_ACTS = ("relu", "tanh")


@dataclass(frozen=True)
class ArchSpace:
    """Dimensions of the architecture search space."""

    num_feature_modules: int = 3               # G
    num_layers: int = 3                        # L
    base_sizes: tuple[int, ...] = (8, 16)
    base_acts: tuple[str, ...] = ("relu", "tanh")
    common_width: int = 32                     # H, shared by all base-layer outputs

    def __post_init__(self):
        if self.num_feature_modules < 1 or self.num_layers < 1:
            raise ValueError("need at least one feature module and one layer")
        if not self.base_sizes or not self.base_acts:
            raise ValueError("base_sizes and base_acts must be nonempty")
        for a in self.base_acts:
            if a not in CHILD_ACTS:
                raise ValueError(f"unsupported base activation {a!r}")

    @property
    def num_bases(self) -> int:
        return len(self.base_sizes) * len(self.base_acts)

    @property
    def encoding_dim(self) -> int:
        g, l, b = self.num_feature_modules, self.num_layers, self.num_bases
        return g + l * b + 2 * l

    def bases(self) -> list[tuple[int, str]]:
        """(width, activation) of every base layer, in encoding order."""
        return [(s, a) for s in self.base_sizes for a in self.base_acts]

    def fingerprint(self) -> str:
        payload = json.dumps(
            {
                "G": self.num_feature_modules,
                "L": self.num_layers,
                "base_sizes": list(self.base_sizes),
                "base_acts": list(self.base_acts),
                "H": self.common_width,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "num_feature_modules": self.num_feature_modules,
            "num_layers": self.num_layers,
            "base_sizes": list(self.base_sizes),
            "base_acts": list(self.base_acts),
            "common_width": self.common_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpace":
        return cls(
            num_feature_modules=int(d["num_feature_modules"]),
            num_layers=int(d["num_layers"]),
            base_sizes=tuple(int(s) for s in d["base_sizes"]),
            base_acts=tuple(d["base_acts"]),
            common_width=int(d["common_width"]),
        )

    @classmethod
    def paper_scale(cls) -> "ArchSpace":
        """7 feature modules, 7 layers of 6 sizes x 2 activations: 105 dims."""
        return cls(
            num_feature_modules=7,
            num_layers=7,
            base_sizes=(8, 16, 32, 64, 128, 256),
            base_acts=("relu", "tanh"),
        )


@dataclass
class ArchEncoding:
    """Softmax logits (gamma, alpha, beta) for one candidate architecture."""

    gamma: np.ndarray  # [G]
    alpha: np.ndarray  # [L, B]
    beta: np.ndarray   # [L, 2] (apply, skip) gate logits

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.alpha.ravel(), self.beta.ravel()])

    @classmethod
    def from_flat(cls, u, space: ArchSpace) -> "ArchEncoding":
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (space.encoding_dim,):
            raise ValueError(
                f"encoding length {u.shape} != ({space.encoding_dim},) for this space"
            )
        g, l, b = space.num_feature_modules, space.num_layers, space.num_bases
        return cls(
            gamma=u[:g].copy(),
            alpha=u[g:g + l * b].reshape(l, b).copy(),
            beta=u[g + l * b:].reshape(l, 2).copy(),
        )

    @classmethod
    def random(cls, space: ArchSpace, rng) -> "ArchEncoding":
        """i.i.d. standard-normal logits over the whole encoding."""
        return cls.from_flat(rng.standard_normal(space.encoding_dim), space)


@dataclass
class MixWeights:
    """Softmaxed mixture weights; every row sums to one."""

    feature_weights: np.ndarray  # [G]
    layer_weights: np.ndarray    # [L, B]
    gate_weights: np.ndarray     # [L, 2]

    def concat(self) -> np.ndarray:
        return np.concatenate(
            [self.feature_weights, self.layer_weights.ravel(), self.gate_weights.ravel()]
        )


def mix_weights(encoding: ArchEncoding) -> MixWeights:
    """Softmax each logit group of the encoding."""
    for name, arr in (("gamma", encoding.gamma), ("alpha", encoding.alpha), ("beta", encoding.beta)):
        nm.check_finite(arr, f"encoding.{name}")
    return MixWeights(
        feature_weights=nm.softmax(encoding.gamma),
        layer_weights=nm.softmax_rows(encoding.alpha),
        gate_weights=nm.softmax_rows(encoding.beta),
    )


def _group_slices(space: ArchSpace) -> list[tuple[int, int]]:
    """(start, stop) of every softmax group in the flat encoding."""
    g, l, b = space.num_feature_modules, space.num_layers, space.num_bases
    slices = [(0, g)]
    pos = g
    for _ in range(l):
        slices.append((pos, pos + b))
        pos += b
    for _ in range(l):
        slices.append((pos, pos + 2))
        pos += 2
    return slices


def mix_weights_var(u: Var, space: ArchSpace) -> Var:
    """Concatenated softmax groups s(u) as a tape node (differentiable in u)."""
    return nm.concat([nm.softmax_var(nm.slice1d(u, lo, hi)) for lo, hi in _group_slices(space)])


def mix_weights_flat(u: np.ndarray, space: ArchSpace) -> np.ndarray:
    """s(u) for a flat encoding, plain numpy."""
    u = np.asarray(u, dtype=np.float64)
    return np.concatenate([nm.softmax(u[lo:hi]) for lo, hi in _group_slices(space)])


def mix_weights_batch(U: np.ndarray, space: ArchSpace) -> np.ndarray:
    """Row-wise s(u) for a batch of flat encodings, vectorized."""
    U = np.asarray(U, dtype=np.float64)
    return np.hstack([nm.softmax_rows(U[:, lo:hi]) for lo, hi in _group_slices(space)])


# ---------------------------------------------------------------------------
# feature modules (stand-ins for pre-trained embedding modules)
# ---------------------------------------------------------------------------

class FeatureModules:
    """G frozen random linear projections d_in -> H with tanh."""

    def __init__(self, space: ArchSpace, d_in: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.d_in = d_in
        self.space = space
        self.projections = [
            rng.standard_normal((space.common_width, d_in)) / np.sqrt(d_in)
            for _ in range(space.num_feature_modules)
        ]

    def mixed(self, X: np.ndarray, feature_weights: np.ndarray) -> np.ndarray:
        """Weighted sum of module outputs for a sample batch [n, d_in]."""
        out = np.zeros((X.shape[0], self.space.common_width))
        for w, P in zip(feature_weights, self.projections):
            out += w * np.tanh(X @ P.T)
        return out


# ---------------------------------------------------------------------------
# real training backend
# ---------------------------------------------------------------------------

def _glorot(rng, fan_out: int, fan_in: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


def init_child_params(space: ArchSpace, num_classes: int, rng) -> dict[str, np.ndarray]:
    """Trainable tensors of one child network, keyed layer{l}.base{b}.{W1,b1,W2}."""
    h = space.common_width
    params: dict[str, np.ndarray] = {}
    for l in range(space.num_layers):
        for b, (size, _act) in enumerate(space.bases()):
            params[f"layer{l}.base{b}.W1"] = _glorot(rng, size, h)
            params[f"layer{l}.base{b}.b1"] = np.zeros(size)
            params[f"layer{l}.base{b}.W2"] = _glorot(rng, h, size)
    params["head.W"] = _glorot(rng, num_classes, h)
    params["head.b"] = np.zeros(num_classes)
    return params


def child_forward(
    h0: Var,
    params: dict[str, Var],
    mw: MixWeights,
    space: ArchSpace,
) -> Var:
    """Logits of the child net given pre-mixed features h0 [n, H].

    Each parametrized layer is the softmax mixture of its base layers (an FC
    to the base width, activation, then a linear projection back to H),
    gated against a residual skip by the beta weights.
    """
    h = h0
    bases = space.bases()
    for l in range(space.num_layers):
        mixed = None
        for b, (_size, act) in enumerate(bases):
            w = float(mw.layer_weights[l, b])
            z = nm.affine(h, params[f"layer{l}.base{b}.W1"], params[f"layer{l}.base{b}.b1"])
            z = z.relu() if act == "relu" else z.tanh()
            z = nm.affine(z, params[f"layer{l}.base{b}.W2"], None)
            term = z * w
            mixed = term if mixed is None else mixed + term
        h = mixed * float(mw.gate_weights[l, 0]) + h * float(mw.gate_weights[l, 1])
    return nm.affine(h, params["head.W"], params["head.b"])


@dataclass
class RealTrainBackend:
    """Builds and trains a child network; measures split accuracy."""

    space: ArchSpace
    feature_modules: FeatureModules
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 32
    kind: str = field(default="real_train", init=False)

    def measure(self, encoding, task: TaskDataset, rng) -> float:
        """Train on the train split, return val accuracy in [0, 1]."""
        return self._train_and_eval(encoding, task, rng, "val")[0]

    def measure_split(self, encoding, task: TaskDataset, rng, split: str) -> float:
        return self._train_and_eval(encoding, task, rng, split)[0]

    def _train_and_eval(self, encoding, task, rng, eval_split):
        if isinstance(encoding, np.ndarray):
            encoding = ArchEncoding.from_flat(encoding, self.space)
        if len(task.split_indices("train")) == 0 or len(task.split_indices(eval_split)) == 0:
            raise ValueError(f"task {task.task_id}: empty train or {eval_split} split")
        mw = mix_weights(encoding)
        params = init_child_params(self.space, task.num_classes, rng)

        X_tr, y_tr = task.split_arrays("train")
        h0_tr = self.feature_modules.mixed(X_tr, mw.feature_weights)
        n = len(y_tr)
        for _epoch in range(self.epochs):
            order = rng.permutation(n)
            for lo in range(0, n, self.batch_size):
                pick = order[lo:lo + self.batch_size]
                tape = Tape()
                pvars = {k: tape.param(v, k) for k, v in params.items()}
                logits = child_forward(tape.const(h0_tr[pick]), pvars, mw, self.space)
                loss = nm.cross_entropy_with_logits(logits, y_tr[pick])
                tape.backward(loss)
                for k, v in pvars.items():
                    if v.grad is not None:
                        params[k] -= self.lr * v.grad

        X_ev, y_ev = task.split_arrays(eval_split)
        acc = self._accuracy(X_ev, y_ev, params, mw)
        return acc, params

    def _accuracy(self, X, y, params, mw) -> float:
        h0 = self.feature_modules.mixed(X, mw.feature_weights)
        tape = Tape()
        pvars = {k: tape.const(v) for k, v in params.items()}
        logits = child_forward(tape.const(h0), pvars, mw, self.space).value
        return float((logits.argmax(axis=1) == y).mean())


def build_and_train_child(encoding, task: TaskDataset, backend: RealTrainBackend, seed: int) -> float:
    """Measured validation performance of the child defined by the encoding."""
    p = backend.measure(encoding, task, np.random.default_rng(seed))
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"performance {p} outside [0, 1]")
    return p


# ---------------------------------------------------------------------------
# analytic surrogate backend
# ---------------------------------------------------------------------------

@dataclass
class AnalyticBackend:
    """Smooth stand-in for child training.

    The true performance of an encoding u on task t is
    exp(-||s(u) - c_t||^2 / tau), where s(u) is the concatenated mixture
    weights and c_t the task's optimum point; measurements add Gaussian
    noise and clip to [0, 1]. Optima are a smooth function of the task
    latent, so related tasks prefer related architectures.
    """

    space: ArchSpace
    optima: dict[str, np.ndarray]
    tau: float = 2.0
    noise: float = 0.01
    kind: str = field(default="analytic", init=False)

    @classmethod
    def for_tasks(
        cls,
        space: ArchSpace,
        tasks: list[TaskDataset],
        seed: int = 0,
        tau: float = 2.0,
        noise: float = 0.01,
        latent_scale: float = 1.5,
    ) -> "AnalyticBackend":
        rng = np.random.default_rng(seed)
        dim = space.encoding_dim
        optima = {}
        latent_dims = {t.latent.shape[0] for t in tasks if t.latent is not None}
        if len(latent_dims) > 1:
            raise ValueError("tasks disagree on latent dimension")
        lat_dim = latent_dims.pop() if latent_dims else 0
        # affine latent -> logit map shared by the family; constant column keeps
        # a task-independent component
        Q = latent_scale * rng.standard_normal((dim, lat_dim + 1)) / np.sqrt(lat_dim + 1)
        for t in tasks:
            theta = t.latent if t.latent is not None else np.empty(0)
            u_opt = Q @ np.concatenate([theta, [1.0]])
            optima[t.task_id] = mix_weights_flat(u_opt, space)
        return cls(space=space, optima=optima, tau=tau, noise=noise)

    def _optimum(self, task_id: str) -> np.ndarray:
        if task_id not in self.optima:
            raise KeyError(f"analytic backend has no parameters for task {task_id!r}")
        return self.optima[task_id]

    def true_value(self, encoding, task_id: str) -> float:
        """Noise-free surrogate performance."""
        c = self._optimum(task_id)
        u = encoding.flatten() if isinstance(encoding, ArchEncoding) else np.asarray(encoding)
        s = mix_weights_flat(u, self.space)
        return float(np.exp(-np.sum((s - c) ** 2) / self.tau))

    def true_values(self, U: np.ndarray, task_id: str) -> np.ndarray:
        """Vectorized noise-free values for a batch of flat encodings."""
        c = self._optimum(task_id)
        S = mix_weights_batch(U, self.space)
        return np.exp(-np.sum((S - c) ** 2, axis=1) / self.tau)

    def score_var(self, u: Var, task_id: str) -> Var:
        """True value as a tape node, differentiable in u."""
        c = self._optimum(task_id)
        s = mix_weights_var(u, self.space)
        d = nm.sub(s, u.tape.const(c))
        return nm.exp(nm.sum_all(nm.square(d)) * (-1.0 / self.tau))

    def measure(self, encoding, task, rng) -> float:
        """Noisy, clipped measurement; task may be a TaskDataset or an id."""
        task_id = task.task_id if isinstance(task, TaskDataset) else task
        p = self.true_value(encoding, task_id)
        if self.noise > 0:
            p += rng.normal(0.0, self.noise)
        return float(np.clip(p, 0.0, 1.0))


def surrogate_perf(encoding, task_id: str, backend: AnalyticBackend, rng) -> float:
    """Surrogate measurement of an encoding on a task."""
    return backend.measure(encoding, task_id, rng)
