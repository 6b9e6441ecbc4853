"""Three-headed outcome/propensity network with neighbour-augmented outcome heads.

The representation ``Z(x)`` feeds a propensity head (linear map + sigmoid)
and two outcome heads. In the modified variant each outcome head also sees
the neighbour average of its own treatment arm, concatenated to ``Z(x)``;
the baseline variant drops that extra input.

Training works in standardized units (covariates and outcomes scaled with
training-split statistics); everything public returns original units.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import nn_core
from ._io import atomic_write
from .data import Dataset, Split, Standardizer, split_dataset
from .neighbors import DistanceMetric, NeighborAverages, neighbor_averages
from .nn_core import Activation, Network, OptimizerState

log = logging.getLogger(__name__)


class Variant(str, Enum):
    MODIFIED = "modified"
    BASELINE = "baseline"


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, learning_rate: float, detail: str = ""):
        super().__init__(
            f"training diverged at epoch {epoch} (learning_rate={learning_rate})"
            + (f": {detail}" if detail else "")
        )
        self.epoch = epoch
        self.learning_rate = learning_rate


class PropensityDomainError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    k: int = 10
    metric: DistanceMetric = DistanceMetric.EUCLIDEAN
    validation_fraction: float = 0.2
    test_fraction: float = 0.0
    epochs: int = 300
    batch_size: int = 64
    patience: int = 20
    learning_rate: float = 1e-5
    momentum: float = 0.9
    seed: int = 0
    standardize: bool = True
    self_exclusion: bool = True
    rep_width: int = 200
    rep_depth: int = 3
    head_width: int = 100
    head_depth: int = 2
    head_l2: float = 1e-2
    g_clip: tuple[float, float] = (0.01, 0.99)

    def __post_init__(self):
        self.metric = DistanceMetric.parse(self.metric)
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        for name in ("k", "epochs", "batch_size", "patience", "rep_width", "rep_depth",
                     "head_width", "head_depth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        lo, hi = self.g_clip
        if not 0 < lo < hi < 1:
            raise ValueError("g_clip must satisfy 0 < lo < hi < 1")


@dataclass
class ModelOutputs:
    q0: np.ndarray
    q1: np.ndarray
    g: np.ndarray

    def factual(self, t) -> np.ndarray:
        return np.where(np.asarray(t) == 1, self.q1, self.q0)


@dataclass
class DragonnetModel:
    representation: Network
    head0: Network
    head1: Network
    propensity: Network
    use_neighbors: bool = True
    # stored as a 1-element array so the optimizer can update it in place
    epsilon: np.ndarray = field(default_factory=lambda: np.zeros(1))
    x_scaler: Optional[Standardizer] = None
    y_scaler: Optional[Standardizer] = None
    g_clip: tuple[float, float] = (0.01, 0.99)
    targeted: bool = True
    trained: bool = False

    def __post_init__(self):
        p = self.representation.out_dim
        extra = 1 if self.use_neighbors else 0
        for name in ("head0", "head1"):
            head = getattr(self, name)
            if head.in_dim != p + extra or head.out_dim != 1:
                raise nn_core.ShapeError(
                    f"{name} must map {p + extra} -> 1, got {head.in_dim} -> {head.out_dim}"
                )
        if self.propensity.in_dim != p or self.propensity.out_dim != 1:
            raise nn_core.ShapeError("propensity head must map the representation to 1 output")
        d = self.representation.in_dim
        if self.x_scaler is None:
            self.x_scaler = Standardizer.identity(d)
        if self.y_scaler is None:
            self.y_scaler = Standardizer(np.float64(0.0), np.float64(1.0))
        self.epsilon = np.asarray(self.epsilon, dtype=np.float64).reshape(1)

    @property
    def variant(self) -> Variant:
        return Variant.MODIFIED if self.use_neighbors else Variant.BASELINE

    @property
    def networks(self) -> tuple[Network, ...]:
        return (self.representation, self.head0, self.head1, self.propensity)

    def parameters(self) -> list[np.ndarray]:
        params = []
        for net in self.networks:
            params.extend(net.parameters())
        params.append(self.epsilon)
        return params

    def bump_version(self):
        for net in self.networks:
            net.version += 1

    @property
    def outcome_epsilon(self) -> float:
        """The fluctuation coefficient expressed in original outcome units."""
        return float(self.epsilon[0] * self.y_scaler.scale)

    def copy(self) -> "DragonnetModel":
        return DragonnetModel(
            *(net.copy() for net in self.networks),
            use_neighbors=self.use_neighbors,
            epsilon=self.epsilon.copy(),
            x_scaler=self.x_scaler,
            y_scaler=self.y_scaler,
            g_clip=self.g_clip,
            targeted=self.targeted,
            trained=self.trained,
        )


def build_model(d: int, variant: Variant | str = Variant.MODIFIED,
                config: Optional[TrainConfig] = None, seed=0) -> DragonnetModel:
    """Fresh, randomly initialised network for ``d`` covariates."""
    cfg = config or TrainConfig()
    variant = Variant(variant)
    rng = np.random.default_rng(seed)
    w = cfg.rep_width
    rep = nn_core.init_network(
        [(d, w, Activation.ELU, 0.0)] + [(w, w, Activation.ELU, 0.0)] * (cfg.rep_depth - 1), rng
    )
    extra = 1 if variant is Variant.MODIFIED else 0

    def head():
        h = cfg.head_width
        spec = [(w + extra, h, Activation.ELU, cfg.head_l2)]
        spec += [(h, h, Activation.ELU, cfg.head_l2)] * (cfg.head_depth - 1)
        spec += [(h, 1, Activation.LINEAR, 0.0)]
        return nn_core.init_network(spec, rng)

    h0, h1 = head(), head()
    prop = nn_core.init_network([(w, 1, Activation.SIGMOID, 0.0)], rng)
    return DragonnetModel(rep, h0, h1, prop, use_neighbors=variant is Variant.MODIFIED,
                          g_clip=cfg.g_clip, targeted=cfg.beta > 0)


def _head_input(model: DragonnetModel, z: np.ndarray, ybar: Optional[np.ndarray]) -> np.ndarray:
    if not model.use_neighbors:
        return z
    return np.column_stack([z, ybar])


def _forward_std(model: DragonnetModel, Xs, yb0s=None, yb1s=None):
    z, c_rep = nn_core.forward(model.representation, Xs)
    q0, c0 = nn_core.forward(model.head0, _head_input(model, z, yb0s))
    q1, c1 = nn_core.forward(model.head1, _head_input(model, z, yb1s))
    g_raw, cg = nn_core.forward(model.propensity, z)
    lo, hi = model.g_clip
    g_raw = g_raw[:, 0]
    outputs = ModelOutputs(q0[:, 0], q1[:, 0], np.clip(g_raw, lo, hi))
    return outputs, g_raw, (c_rep, c0, c1, cg)


def _check_lengths(t, y, outputs: ModelOutputs):
    n = outputs.q0.shape[0]
    if np.shape(t) != (n,) or np.shape(y) != (n,):
        raise ValueError(f"t and y must have length {n}")


def base_loss(outputs: ModelOutputs, t, y, alpha: float = 1.0) -> float:
    """Mean of factual squared error plus ``alpha`` times propensity cross-entropy."""
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_lengths(t, y, outputs)
    g = outputs.g
    if np.any(g <= 0) or np.any(g >= 1):
        raise PropensityDomainError("propensity must lie strictly inside (0, 1)")
    sq = (outputs.factual(t) - y) ** 2
    ce = -t * np.log(g) - (1 - t) * np.log1p(-g)
    return float(np.mean(sq + alpha * ce))


def fluctuation(t, g) -> np.ndarray:
    """``t/g - (1-t)/(1-g)``: the direction the targeted term moves Q along."""
    t = np.asarray(t, dtype=np.float64)
    return t / g - (1 - t) / (1 - g)


def targeted_regularizer(outputs: ModelOutputs, t, y, epsilon: float) -> tuple[float, np.ndarray]:
    """Mean squared residual of the fluctuated factual prediction, and that prediction."""
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_lengths(t, y, outputs)
    q_tilde = outputs.factual(t) + float(np.asarray(epsilon).reshape(-1)[0]) * fluctuation(t, outputs.g)
    return float(np.mean((y - q_tilde) ** 2)), q_tilde


def training_loss(outputs: ModelOutputs, t, y, epsilon, alpha: float = 1.0, beta: float = 1.0) -> float:
    reg = targeted_regularizer(outputs, t, y, epsilon)[0] if beta else 0.0
    return base_loss(outputs, t, y, alpha) + beta * reg


def full_loss_and_gradient(model: DragonnetModel, Xs, t, ys, yb0s=None, yb1s=None,
                           alpha: float = 1.0, beta: float = 1.0):
    """Objective on standardized inputs and its gradient w.r.t. ``model.parameters()``.

    The objective is the mean data loss plus every layer's L2 penalty.
    """
    t = np.asarray(t, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    n = t.shape[0]
    out, g_raw, (c_rep, c0, c1, cg) = _forward_std(model, Xs, yb0s, yb1s)
    eps = model.epsilon[0]
    g = out.g
    h = fluctuation(t, g)
    q_t = out.factual(t)
    resid_t = ys - (q_t + eps * h)

    loss = training_loss(out, t, ys, eps, alpha, beta)
    loss += sum(net.l2_penalty() for net in model.networks)

    d_qt = (2.0 * (q_t - ys) - 2.0 * beta * resid_t) / n
    d_eps = np.sum(-2.0 * beta * resid_t * h) / n
    dh_dg = -t / g**2 - (1 - t) / (1 - g) ** 2
    d_g = (alpha * (-t / g + (1 - t) / (1 - g)) - 2.0 * beta * resid_t * eps * dh_dg) / n
    lo, hi = model.g_clip
    d_g = d_g * ((g_raw > lo) & (g_raw < hi))

    p = model.representation.out_dim
    g0 = nn_core.backward(model.head0, c0, (d_qt * (1 - t))[:, None])
    g1 = nn_core.backward(model.head1, c1, (d_qt * t)[:, None])
    gp = nn_core.backward(model.propensity, cg, d_g[:, None])
    dz = g0.input[:, :p] + g1.input[:, :p] + gp.input
    gr = nn_core.backward(model.representation, c_rep, dz)

    grads = gr.flat() + g0.flat() + g1.flat() + gp.flat() + [np.array([d_eps])]
    return loss, grads


def _scaled_neighbors(model: DragonnetModel, nbrs: Optional[NeighborAverages], n: int):
    if not model.use_neighbors:
        return None, None
    if nbrs is None or len(nbrs) != n:
        raise ValueError(f"neighbour averages for {n} rows are required by the modified variant")
    return model.y_scaler.apply(nbrs.ybar0), model.y_scaler.apply(nbrs.ybar1)


def predict(model: DragonnetModel, X, nbrs: Optional[NeighborAverages] = None) -> ModelOutputs:
    """Outcome predictions under control and treatment plus clipped propensity."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.representation.in_dim:
        raise ValueError(f"X must be (n, {model.representation.in_dim}), got {X.shape}")
    yb0, yb1 = _scaled_neighbors(model, nbrs, X.shape[0])
    out, _, _ = _forward_std(model, model.x_scaler.apply(X), yb0, yb1)
    inv = model.y_scaler.invert
    return ModelOutputs(inv(out.q0), inv(out.q1), out.g)


@dataclass
class TrainResult:
    model: DragonnetModel
    config: TrainConfig
    split: Split
    reference: Dataset  # training rows, original units; neighbour lookups use these only
    history: list[dict]
    best_epoch: int

    def neighbors_for(self, X) -> Optional[NeighborAverages]:
        """Neighbour averages of new rows against the training rows."""
        if not self.model.use_neighbors:
            return None
        xs = self.model.x_scaler
        ref = Dataset(xs.apply(self.reference.X), self.reference.t, self.reference.y)
        return neighbor_averages(xs.apply(X), ref, self.config.k, self.config.metric, False)

    def training_neighbors(self) -> Optional[NeighborAverages]:
        if not self.model.use_neighbors:
            return None
        xs = self.model.x_scaler
        ref = Dataset(xs.apply(self.reference.X), self.reference.t, self.reference.y)
        return neighbor_averages(ref.X, ref, self.config.k, self.config.metric,
                                 self.config.self_exclusion)

    def neighbors_for_dataset(self, dataset: Dataset) -> Optional[NeighborAverages]:
        """Averages for every row of the dataset the model was trained on.

        Training rows exclude themselves; all other rows look only at training rows.
        """
        if not self.model.use_neighbors:
            return None
        train_idx = self.split.train_idx
        other = np.setdiff1d(np.arange(dataset.n), train_idx)
        yb0 = np.empty(dataset.n)
        yb1 = np.empty(dataset.n)
        tr = self.training_neighbors()
        yb0[train_idx], yb1[train_idx] = tr.ybar0, tr.ybar1
        if other.size:
            ot = self.neighbors_for(dataset.X[other])
            yb0[other], yb1[other] = ot.ybar0, ot.ybar1
        return NeighborAverages(yb0, yb1, self.config.k, self.config.metric)


def train(dataset: Dataset, config: Optional[TrainConfig] = None,
          variant: Variant | str = Variant.MODIFIED) -> TrainResult:
    """Fit the model with SGD + momentum and early stopping on a stratified validation split.

    When ``config.test_fraction > 0`` a held-out test part is carved off first
    and none of its rows (covariates or outcomes) are touched.
    """
    cfg = config or TrainConfig()
    variant = Variant(variant)
    ss = np.random.SeedSequence(cfg.seed)
    split_seed, init_seed, shuffle_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    split = split_dataset(dataset, cfg.validation_fraction * (1 - cfg.test_fraction),
                          cfg.test_fraction, split_seed)
    tr, va = dataset.subset(split.train_idx), dataset.subset(split.val_idx)
    assert np.intersect1d(split.train_idx, split.val_idx).size == 0

    model = build_model(dataset.d, variant, cfg, init_seed)
    if cfg.standardize:
        model.x_scaler = Standardizer.fit(tr.X)
        y_sc = Standardizer.fit(tr.y[:, None])
        model.y_scaler = Standardizer(y_sc.mean[0], y_sc.scale[0])

    Xs_tr, Xs_va = model.x_scaler.apply(tr.X), model.x_scaler.apply(va.X)
    ys_tr, ys_va = model.y_scaler.apply(tr.y), model.y_scaler.apply(va.y)
    yb_tr = yb_va = (None, None)
    if variant is Variant.MODIFIED:
        ref = Dataset(Xs_tr, tr.t, tr.y)
        nb_tr = neighbor_averages(Xs_tr, ref, cfg.k, cfg.metric, cfg.self_exclusion)
        nb_va = neighbor_averages(Xs_va, ref, cfg.k, cfg.metric, self_exclusion=False)
        yb_tr = (model.y_scaler.apply(nb_tr.ybar0), model.y_scaler.apply(nb_tr.ybar1))
        yb_va = (model.y_scaler.apply(nb_va.ybar0), model.y_scaler.apply(nb_va.ybar1))

    def val_loss():
        out, _, _ = _forward_std(model, Xs_va, *yb_va)
        return training_loss(out, va.t, ys_va, model.epsilon[0], cfg.alpha, cfg.beta)

    params = model.parameters()
    state = OptimizerState.for_params(params, cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng(shuffle_seed)
    best = val_loss()
    history = [{"epoch": 0, "train_loss": float("nan"), "val_loss": best}]
    best_params = [p.copy() for p in params]
    best_epoch, stale = 0, 0
    n = tr.n
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            yb0 = None if yb_tr[0] is None else yb_tr[0][b]
            yb1 = None if yb_tr[1] is None else yb_tr[1][b]
            loss, grads = full_loss_and_gradient(model, Xs_tr[b], tr.t[b], ys_tr[b], yb0, yb1,
                                                 cfg.alpha, cfg.beta)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, cfg.learning_rate, "non-finite training loss")
            try:
                nn_core.sgd_momentum_step(params, grads, state)
            except nn_core.NonFiniteGradientError as exc:
                raise DivergenceError(epoch, cfg.learning_rate, str(exc)) from exc
            model.bump_version()
            total += loss * b.size
        vl = val_loss()
        if not np.isfinite(vl):
            raise DivergenceError(epoch, cfg.learning_rate, "non-finite validation loss")
        history.append({"epoch": epoch, "train_loss": total / n, "val_loss": vl})
        if vl < best:
            best, best_epoch, stale = vl, epoch, 0
            best_params = [p.copy() for p in params]
        else:
            stale += 1
            if stale >= cfg.patience:
                log.debug("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    for p, bp in zip(params, best_params):
        p[...] = bp
    model.bump_version()
    model.trained = True
    model.targeted = cfg.beta > 0
    return TrainResult(model, cfg, split, tr, history, best_epoch)


_ACT_CODES = {a: i for i, a in enumerate(Activation)}


def save_snapshot(model: DragonnetModel, path) -> None:
    """Write every weight, epsilon and the scaling constants; exact round trip."""
    arrays = {
        "use_neighbors": np.array(model.use_neighbors),
        "epsilon": model.epsilon,
        "x_mean": np.asarray(model.x_scaler.mean),
        "x_scale": np.asarray(model.x_scaler.scale),
        "y_mean": np.asarray(model.y_scaler.mean),
        "y_scale": np.asarray(model.y_scaler.scale),
        "g_clip": np.array(model.g_clip),
        "flags": np.array([model.targeted, model.trained]),
    }
    for ni, net in enumerate(model.networks):
        arrays[f"net{ni}_acts"] = np.array([_ACT_CODES[l.activation] for l in net.layers])
        arrays[f"net{ni}_l2"] = np.array([l.l2_coefficient for l in net.layers])
        for li, layer in enumerate(net.layers):
            arrays[f"net{ni}_W{li}"] = layer.weights
            arrays[f"net{ni}_b{li}"] = layer.bias
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write(path, buf.getvalue())


def load_snapshot(path) -> DragonnetModel:
    acts = list(Activation)
    with np.load(path) as z:
        nets = []
        for ni in range(4):
            codes, l2s = z[f"net{ni}_acts"], z[f"net{ni}_l2"]
            nets.append(Network([
                nn_core.DenseLayer(z[f"net{ni}_W{li}"], z[f"net{ni}_b{li}"], acts[int(c)], float(l2))
                for li, (c, l2) in enumerate(zip(codes, l2s))
            ]))
        targeted, trained = (bool(v) for v in z["flags"])
        return DragonnetModel(
            *nets,
            use_neighbors=bool(z["use_neighbors"]),
            epsilon=z["epsilon"].copy(),
            x_scaler=Standardizer(z["x_mean"], z["x_scale"]),
            y_scaler=Standardizer(z["y_mean"][()], z["y_scale"][()]),
            g_clip=tuple(float(v) for v in z["g_clip"]),
            targeted=targeted,
            trained=trained,
        )
