"""Base recommenders trained with the pairwise ranking loss.

Every model exposes ``score_grad(u, i)``, which returns the score and its
gradient as a list of ``(param name, row or None, array)`` entries. Rows are
used for embedding tables so an SGD step only touches the rows involved.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODEL_KINDS = ("bprmf", "gmf", "mlp", "ncf")

Grad = list[tuple[str, "int | None", np.ndarray]]


class NoNegativeAvailable(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.05
    l2_reg: float = 0.01
    epochs: int = 50
    neg_per_pos: int = 1
    seed: int = 0
    d: int = 16
    layers: tuple[int, ...] = (32, 16, 8)
    mix_alpha: float = 0.5
    init_scale: float = 0.01
    shuffle: bool = True

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.neg_per_pos < 1:
            raise ValueError("neg_per_pos must be >= 1")
        self.layers = tuple(int(v) for v in self.layers)

    def to_dict(self) -> dict:
        return asdict(self)


# -- numerics --------------------------------------------------------------


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def log_sigmoid(z):
    """Stable ``log(sigmoid(z))``."""
    z = np.asarray(z, dtype=np.float64)
    return -np.logaddexp(0.0, -z)


def bpr_pair_loss(score_p: float, score_n: float) -> tuple[float, float, float]:
    """``-log sigmoid(score_p - score_n)`` and its derivatives in both scores."""
    delta = float(score_p) - float(score_n)
    loss = float(-log_sigmoid(delta))
    g = float(sigmoid(-delta))
    return loss, -g, g


ACTIVATIONS = {
    "relu": (lambda a: np.maximum(a, 0.0), lambda a: (a > 0).astype(np.float64)),
    "identity": (lambda a: a, lambda a: np.ones_like(a)),
    "tanh": (np.tanh, lambda a: 1.0 - np.tanh(a) ** 2),
    "logistic": (sigmoid, lambda a: sigmoid(a) * (1.0 - sigmoid(a))),
}


# -- models ----------------------------------------------------------------


class PairwiseModel:
    """Common plumbing: parameters dict, pairwise SGD step, checkpoints."""

    kind = "base"
    # parameter arrays indexed by user / item row; others are dense
    user_params: tuple[str, ...] = ()
    item_params: tuple[str, ...] = ()
    unregularized: tuple[str, ...] = ()

    def __init__(self, n_users: int, n_items: int) -> None:
        self.n_users = n_users
        self.n_items = n_items
        self.params: dict[str, np.ndarray] = {}

    # subclasses implement these two
    def score_grad(self, u: int, i: int) -> tuple[float, Grad]:
        raise NotImplementedError

    def scores(self, u: int, items: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def score(self, u: int, i: int) -> float:
        self._check(u, i)
        return float(self.scores(u, np.array([i]))[0])

    def _check(self, u: int, i: int) -> None:
        if not 0 <= u < self.n_users:
            raise IndexError(f"user index {u} out of range")
        if not 0 <= i < self.n_items:
            raise IndexError(f"item index {i} out of range")

    def dense_params(self) -> list[str]:
        return [k for k in self.params if k not in self.user_params + self.item_params]

    def l2_terms(self, u: int, items: Iterable[int]) -> tuple[float, Grad]:
        """Squared norm of the parameters touched by a (u, items) update."""
        total = 0.0
        grads: Grad = []
        touched = [(k, u) for k in self.user_params]
        touched += [(k, i) for i in items for k in self.item_params]
        touched += [(k, None) for k in self.dense_params() if k not in self.unregularized]
        for name, row in touched:
            arr = self.params[name] if row is None else self.params[name][row]
            total += float(arr.ravel() @ arr.ravel())
            grads.append((name, row, 2.0 * arr))
        return total, grads

    def triple_loss_grad(self, u: int, p: int, n: int, l2: float) -> tuple[float, Grad]:
        sp_, gp = self.score_grad(u, p)
        sn_, gn = self.score_grad(u, n)
        loss, dp, dn = bpr_pair_loss(sp_, sn_)
        grads: Grad = [(k, r, dp * g) for k, r, g in gp] + [(k, r, dn * g) for k, r, g in gn]
        if l2:
            reg, rg = self.l2_terms(u, (p, n))
            loss += l2 * reg
            grads += [(k, r, l2 * g) for k, r, g in rg]
        return loss, grads

    def apply(self, grads: Grad, lr: float) -> None:
        for name, row, g in grads:
            if row is None:
                self.params[name] -= lr * g
            else:
                self.params[name][row] -= lr * g

    def sgd_step(self, u: int, p: int, n: int, lr: float, l2: float) -> float:
        loss, grads = self.triple_loss_grad(u, p, n, l2)
        self.apply(grads, lr)
        return loss

    def full_gradient(self, grads: Grad) -> dict[str, np.ndarray]:
        out = {k: np.zeros_like(v) for k, v in self.params.items()}
        for name, row, g in grads:
            if row is None:
                out[name] += g
            else:
                out[name][row] += g
        return out

    def copy(self) -> "PairwiseModel":
        other = object.__new__(type(self))
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def config(self) -> dict:
        return {"n_users": self.n_users, "n_items": self.n_items}


class BPRMF(PairwiseModel):
    """Matrix factorisation scored by the user/item inner product."""

    kind = "bprmf"
    user_params = ("U",)
    item_params = ("I",)

    def __init__(self, n_users: int, n_items: int, d: int = 16, rng: np.random.Generator | None = None,
                 init_scale: float = 0.01) -> None:
        super().__init__(n_users, n_items)
        self.d = d
        rng = rng or np.random.default_rng(0)
        self.params["U"] = rng.uniform(-init_scale, init_scale, size=(n_users, d))
        self.params["I"] = rng.uniform(-init_scale, init_scale, size=(n_items, d))

    @property
    def U(self) -> np.ndarray:
        return self.params["U"]

    @property
    def I(self) -> np.ndarray:
        return self.params["I"]

    def score_grad(self, u: int, i: int) -> tuple[float, Grad]:
        uu, ii = self.params["U"][u], self.params["I"][i]
        return float(uu @ ii), [("U", u, ii.copy()), ("I", i, uu.copy())]

    def scores(self, u: int, items: np.ndarray) -> np.ndarray:
        return self.params["I"][np.asarray(items)] @ self.params["U"][u]

    def sgd_step(self, u: int, p: int, n: int, lr: float, l2: float) -> float:
        U, I = self.params["U"], self.params["I"]
        uu, ip, in_ = U[u].copy(), I[p].copy(), I[n].copy()
        loss, dp, dn = bpr_pair_loss(uu @ ip, uu @ in_)
        if l2:
            loss += l2 * float(uu @ uu + ip @ ip + in_ @ in_)
        U[u] -= lr * (dp * ip + dn * in_ + 2.0 * l2 * uu)
        I[p] -= lr * (dp * uu + 2.0 * l2 * ip)
        I[n] -= lr * (dn * uu + 2.0 * l2 * in_)
        return loss

    def config(self) -> dict:
        return {**super().config(), "d": self.d}


def bprmf_score(m: BPRMF, u: int, i: int) -> float:
    m._check(u, i)
    return float(m.U[u] @ m.I[i])


class NCF(PairwiseModel):
    """GMF and MLP branches joined by a learned output projection.

    ``branches`` selects ``("gmf", "mlp")`` for the fused model, or a single
    branch for the GMF / MLP baselines (then no mixing factor is applied).
    """

    kind = "ncf"
    user_params = ("Ug", "Um")
    item_params = ("Ig", "Im")
    unregularized = ()

    def __init__(
        self,
        n_users: int,
        n_items: int,
        d: int = 16,
        layers: Sequence[int] = (32, 16, 8),
        mix_alpha: float = 0.5,
        activation: str = "relu",
        out_activation: str = "logistic",
        branches: Sequence[str] = ("gmf", "mlp"),
        rng: np.random.Generator | None = None,
        init_scale: float = 0.01,
    ) -> None:
        super().__init__(n_users, n_items)
        branches = tuple(branches)
        if not branches or any(b not in ("gmf", "mlp") for b in branches):
            raise ValueError(f"invalid branches {branches}")
        if not 0.0 <= mix_alpha <= 1.0:
            raise ValueError("mix_alpha must lie in [0, 1]")
        layers = tuple(int(v) for v in layers)
        if "mlp" in branches and (len(layers) < 1 or layers[0] % 2):
            raise ValueError("first MLP layer size must be even (user half + item half)")
        self.d, self.layers, self.mix_alpha = d, layers, mix_alpha
        self.activation, self.out_activation = activation, out_activation
        self.branches = branches
        rng = rng or np.random.default_rng(0)
        uni = lambda *shape: rng.uniform(-init_scale, init_scale, size=shape)  # noqa: E731
        user_p, item_p = [], []
        out_dim = 0
        if "gmf" in branches:
            self.params["Ug"] = uni(n_users, d)
            self.params["Ig"] = uni(n_items, d)
            user_p.append("Ug")
            item_p.append("Ig")
            out_dim += d
        if "mlp" in branches:
            half = layers[0] // 2
            self.params["Um"] = uni(n_users, half)
            self.params["Im"] = uni(n_items, half)
            user_p.append("Um")
            item_p.append("Im")
            for k in range(len(layers) - 1):
                self.params[f"W{k}"] = uni(layers[k], layers[k + 1])
                self.params[f"b{k}"] = np.zeros(layers[k + 1])
            out_dim += layers[-1]
        self.params["h"] = uni(out_dim)
        self.user_params, self.item_params = tuple(user_p), tuple(item_p)
        self.unregularized = tuple(k for k in self.params if k.startswith("b"))
        self.kind = "ncf" if len(branches) == 2 else branches[0]

    @property
    def n_layers(self) -> int:
        return len(self.layers) - 1 if "mlp" in self.branches else 0

    def _mix(self) -> tuple[float, float]:
        if len(self.branches) == 2:
            return self.mix_alpha, 1.0 - self.mix_alpha
        return 1.0, 1.0

    def gmf_vector(self, u: int, i: int) -> np.ndarray:
        return self.params["Ug"][u] * self.params["Ig"][i]

    def _tower(self, z: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
        act = ACTIVATIONS[self.activation][0]
        inputs, pre = [], []
        for k in range(self.n_layers):
            inputs.append(z)
            a = z @ self.params[f"W{k}"] + self.params[f"b{k}"]
            pre.append(a)
            z = act(a)
        return z, inputs, pre

    def mlp_vector(self, u: int, i: int) -> np.ndarray:
        z = np.concatenate([self.params["Um"][u], self.params["Im"][i]])
        return self._tower(z)[0]

    def _features(self, u: int, i: int):
        a_g, a_m = self._mix()
        parts, cache = [], {}
        if "gmf" in self.branches:
            h = self.gmf_vector(u, i)
            parts.append(a_g * h)
        if "mlp" in self.branches:
            z0 = np.concatenate([self.params["Um"][u], self.params["Im"][i]])
            g, inputs, pre = self._tower(z0)
            cache = {"inputs": inputs, "pre": pre}
            parts.append(a_m * g)
        return np.concatenate(parts), cache

    def score_grad(self, u: int, i: int) -> tuple[float, Grad]:
        c, cache = self._features(u, i)
        f, fprime = ACTIVATIONS[self.out_activation]
        s_lin = float(self.params["h"] @ c)
        ds = float(fprime(np.array(s_lin)))
        grads: Grad = [("h", None, ds * c)]
        dc = ds * self.params["h"]
        a_g, a_m = self._mix()
        off = 0
        if "gmf" in self.branches:
            dh = a_g * dc[: self.d]
            grads.append(("Ug", u, dh * self.params["Ig"][i]))
            grads.append(("Ig", i, dh * self.params["Ug"][u]))
            off = self.d
        if "mlp" in self.branches:
            dz = a_m * dc[off:]
            dact = ACTIVATIONS[self.activation][1]
            for k in reversed(range(self.n_layers)):
                da = dz * dact(cache["pre"][k])
                grads.append((f"W{k}", None, np.outer(cache["inputs"][k], da)))
                grads.append((f"b{k}", None, da))
                dz = self.params[f"W{k}"] @ da
            half = self.layers[0] // 2
            grads.append(("Um", u, dz[:half]))
            grads.append(("Im", i, dz[half:]))
        return float(f(np.array(s_lin))), grads

    def scores(self, u: int, items: np.ndarray) -> np.ndarray:
        items = np.asarray(items)
        a_g, a_m = self._mix()
        parts = []
        if "gmf" in self.branches:
            parts.append(a_g * (self.params["Ug"][u][None, :] * self.params["Ig"][items]))
        if "mlp" in self.branches:
            um = np.broadcast_to(self.params["Um"][u], (len(items), self.layers[0] // 2))
            z = np.concatenate([um, self.params["Im"][items]], axis=1)
            act = ACTIVATIONS[self.activation][0]
            for k in range(self.n_layers):
                z = act(z @ self.params[f"W{k}"] + self.params[f"b{k}"])
            parts.append(a_m * z)
        c = np.concatenate(parts, axis=1)
        return ACTIVATIONS[self.out_activation][0](c @ self.params["h"])

    def config(self) -> dict:
        return {
            **super().config(),
            "d": self.d,
            "layers": list(self.layers),
            "mix_alpha": self.mix_alpha,
            "activation": self.activation,
            "out_activation": self.out_activation,
            "branches": list(self.branches),
        }


def gmf_vector(m: NCF, u: int, i: int) -> np.ndarray:
    return m.gmf_vector(u, i)


def mlp_vector(m: NCF, u: int, i: int) -> np.ndarray:
    return m.mlp_vector(u, i)


def ncf_score(m: NCF, u: int, i: int) -> float:
    m._check(u, i)
    return m.score_grad(u, i)[0]


def make_model(kind: str, n_users: int, n_items: int, cfg: TrainConfig) -> PairwiseModel:
    rng = np.random.default_rng(cfg.seed)
    if kind == "bprmf":
        return BPRMF(n_users, n_items, cfg.d, rng, cfg.init_scale)
    branches = {"ncf": ("gmf", "mlp"), "gmf": ("gmf",), "mlp": ("mlp",)}.get(kind)
    if branches is None:
        raise ValueError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
    return NCF(n_users, n_items, cfg.d, cfg.layers, cfg.mix_alpha, branches=branches, rng=rng,
               init_scale=cfg.init_scale)


# -- training --------------------------------------------------------------


@dataclass
class TrainData:
    """Training positives as (user, item index) rows plus per-user exclusion sets.

    Item indices are positions in ``universe``; negatives are drawn uniformly
    from items outside the user's exclusion set (train and test items).
    """

    n_users: int
    n_items: int
    positives: np.ndarray
    exclude: list[np.ndarray]
    universe: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @classmethod
    def from_histories(
        cls,
        train: Mapping[int, Sequence[int]],
        exclude: Mapping[int, Iterable[int]] | None = None,
        universe: Sequence[int] | None = None,
        n_users: int | None = None,
    ) -> "TrainData":
        """Build from ``user -> item ids``; ``universe`` maps item ids to indices."""
        if universe is None:
            ids = sorted({int(i) for items in train.values() for i in items})
            universe = np.arange(max(ids) + 1 if ids else 0)
        universe = np.asarray(universe, dtype=np.int64)
        index = {int(v): k for k, v in enumerate(universe)}
        users = sorted(train)
        n_users = n_users if n_users is not None else (max(users) + 1 if users else 0)
        rows = []
        excl: list[np.ndarray] = [np.zeros(0, dtype=np.int64) for _ in range(n_users)]
        for u in users:
            if len(train[u]) == 0:
                raise ValueError(f"user {u} has no training positive")
            idx = [index[int(i)] for i in train[u]]
            rows.extend((u, i) for i in idx)
            extra = [index[int(i)] for i in (exclude or {}).get(u, ())]
            excl[u] = np.unique(np.array(idx + extra, dtype=np.int64))
        return cls(n_users, len(universe), np.array(rows, dtype=np.int64).reshape(-1, 2), excl, universe)

    def sample_negative(self, u: int, rng: np.random.Generator) -> int:
        ex = self.exclude[u]
        if len(ex) >= self.n_items:
            raise NoNegativeAvailable(f"user {u} has interacted with every item")
        while True:
            n = int(rng.integers(self.n_items))
            k = np.searchsorted(ex, n)
            if k >= len(ex) or ex[k] != n:
                return n

    def history(self, u: int) -> np.ndarray:
        return self.positives[self.positives[:, 0] == u, 1]


def iterate_triples(data: TrainData, cfg: TrainConfig, rng: np.random.Generator):
    """One epoch of (user, positive, negative) triples in a seed-determined order."""
    order = rng.permutation(len(data.positives)) if cfg.shuffle else np.arange(len(data.positives))
    for idx in order:
        u, p = data.positives[idx]
        for _ in range(cfg.neg_per_pos):
            yield int(u), int(p), data.sample_negative(int(u), rng)


def train_base(
    kind: str | PairwiseModel,
    data: TrainData,
    cfg: TrainConfig | None = None,
    log: list[float] | None = None,
) -> PairwiseModel:
    """Plain SGD on the pairwise loss; returns the trained model.

    ``kind`` may be a model name or an already initialised model (trained in
    place). Mean per-triple loss for each epoch is appended to ``log``.
    """
    cfg = cfg or TrainConfig()
    model = make_model(kind, data.n_users, data.n_items, cfg) if isinstance(kind, str) else kind
    rng = np.random.default_rng([cfg.seed, 1])
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for u, p, n in iterate_triples(data, cfg, rng):
            total += model.sgd_step(u, p, n, cfg.lr, cfg.l2_reg)
            count += 1
        mean = total / max(count, 1)
        if not np.isfinite(mean):
            raise FloatingPointError(f"training diverged at epoch {epoch}")
        if log is not None:
            log.append(mean)
        logger.debug("%s epoch %d loss %.6f", model.kind, epoch, mean)
    return model


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], meta: Mapping) -> None:
    """Write parameters plus a JSON metadata blob into one ``.npz`` container."""
    blob = json.dumps({"version": CHECKPOINT_VERSION, **meta}, sort_keys=True)
    arrays = {f"p_{k}": np.asarray(v) for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(blob), **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        params = {k[2:]: z[k].copy() for k in z.files if k.startswith("p_")}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    return params, meta


def save_model(model: PairwiseModel, path: str | Path, extra: Mapping | None = None) -> None:
    meta = {"kind": model.kind, "model": model.config(), **(extra or {})}
    save_checkpoint(path, model.params, meta)


def model_from_state(params: Mapping[str, np.ndarray], meta: Mapping) -> PairwiseModel:
    mc = dict(meta["model"])
    kind = meta["kind"]
    if kind == "bprmf":
        model: PairwiseModel = BPRMF(mc["n_users"], mc["n_items"], mc["d"])
    else:
        model = NCF(
            mc["n_users"], mc["n_items"], mc["d"], mc["layers"], mc["mix_alpha"],
            mc["activation"], mc["out_activation"], mc["branches"],
        )
    if set(params) != set(model.params):
        raise ValueError("checkpoint parameters do not match the model layout")
    for k, v in params.items():
        if v.shape != model.params[k].shape:
            raise ValueError(f"shape mismatch for {k}: {v.shape} vs {model.params[k].shape}")
        model.params[k] = np.array(v, dtype=np.float64)
    return model


def load_model(path: str | Path) -> tuple[PairwiseModel, dict]:
    params, meta = load_checkpoint(path)
    return model_from_state(params, meta), meta
