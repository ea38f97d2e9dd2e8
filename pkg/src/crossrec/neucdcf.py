"""Wide-and-deep fusion, its training objective and the mini-batch trainer."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import gcmf, sed
from .data import SOURCE, TARGET, TRAIN, ProtocolError, evaluation_users
from .numkernel import NonFiniteGradientError, OptimizerState, apply_rmsprop, apply_sgd, dropout_mask

_log = logging.getLogger(__name__)

KINDS = ("pmf", "gmf", "gmf_cd", "cmf", "gcmf", "sed", "neucdcf")
GCMF_MODE = {"pmf": "pmf", "gmf": "gmf", "gmf_cd": "gmf_cd", "cmf": "cmf", "gcmf": "full", "neucdcf": "full"}
K_GRID = (8, 16, 32, 48, 64, 80)
ALPHA_GRID = (0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 0.9, 0.95)
L2_GRID = (0.0001, 0.0005, 0.005, 0.001, 0.05, 0.01, 0.5)
OPTIMIZERS = ("rmsprop", "sgd")


class TrainingDiverged(FloatingPointError):
    """The objective or its gradient became non-finite."""


@dataclass
class TrainConfig:
    """Training hyperparameters.

    ``lr`` and ``l2`` default per model kind when left as ``None``: plain
    factorization baselines (pmf, cmf) use ``lr=0.002`` with L2, the neural
    models use ``lr=0.005`` with dropout and no L2.
    """

    k: int = 8
    alpha: float = 0.5
    lr: float | None = None
    batch_size: int = 512
    dropout: float = 0.5
    epochs: int = 120
    patience: int = 10
    l2: float | None = None
    rho: float = 0.9
    eps: float = 1e-8
    layers: int = 6
    seed: int = 0
    optimizer: str = "rmsprop"
    init_std: float = 0.002
    scale_input: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ValueError(msg)

        need(isinstance(self.k, (int, np.integer)) and self.k > 0, f"k must be a positive integer, got {self.k}")
        need(0.0 <= self.alpha <= 1.0, f"alpha must lie in [0, 1], got {self.alpha}")
        need(self.lr is None or self.lr >= 0, f"lr must be non-negative, got {self.lr}")
        need(self.batch_size > 0, f"batch_size must be positive, got {self.batch_size}")
        need(0.0 <= self.dropout < 1.0, f"dropout must lie in [0, 1), got {self.dropout}")
        need(self.epochs > 0, f"epochs must be positive, got {self.epochs}")
        need(0 < self.patience <= self.epochs, f"patience must lie in [1, epochs], got {self.patience}")
        need(self.l2 is None or self.l2 >= 0, f"l2 must be non-negative, got {self.l2}")
        need(0.0 < self.rho < 1.0, f"rho must lie in (0, 1), got {self.rho}")
        need(self.eps >= 0, f"eps must be non-negative, got {self.eps}")
        need(self.layers >= 2 and self.layers % 2 == 0, f"layers must be even and >= 2, got {self.layers}")
        need(self.optimizer in OPTIMIZERS, f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        need(self.init_std >= 0, f"init_std must be non-negative, got {self.init_std}")

    def resolved_lr(self, kind):
        if self.lr is not None:
            return self.lr
        return 0.002 if kind in ("pmf", "cmf") else 0.005

    def resolved_l2(self, kind):
        if self.l2 is not None:
            return self.l2
        return 0.001 if kind in ("pmf", "cmf") else 0.0

    def resolved_dropout(self, kind):
        return 0.0 if kind in ("pmf", "cmf") else self.dropout

    def to_dict(self):
        return asdict(self)


@dataclass
class Model:
    """A fitted (or freshly initialized) model of any supported kind."""

    kind: str
    params: dict
    alpha: float
    gamma_min: float
    gamma_max: float
    m: int
    n_s: int
    n_t: int
    k: int
    layers: int
    scale_input: bool = True

    @property
    def has_gcmf(self):
        return self.kind != "sed"

    @property
    def has_sed(self):
        return self.kind in ("sed", "neucdcf")

    @property
    def mode(self):
        return gcmf.get_mode(GCMF_MODE[self.kind]) if self.has_gcmf else None

    @property
    def final_activation(self):
        return self.mode.final_activation if self.has_gcmf else "sigmoid"

    @property
    def single_domain(self):
        return self.has_gcmf and self.mode.single_domain

    @property
    def effective_alpha(self):
        if self.kind == "neucdcf":
            return self.alpha
        return 1.0 if self.kind == "sed" else 0.0

    def gcmf_params(self):
        return {k: v for k, v in self.params.items() if k in _GCMF_KEYS}

    def sed_params(self):
        return {k: v for k, v in self.params.items() if k not in _GCMF_KEYS}

    def copy(self):
        return copy.deepcopy(self)

    def domains_of(self, items):
        return np.where(np.asarray(items) >= self.n_s, TARGET, SOURCE).astype(np.int8)

    def logits(self, ds, users, items, zero_delta=None):
        """(gcmf_logit or None, sed_logit or None) for the given pairs."""
        users = np.atleast_1d(np.asarray(users, dtype=np.int64))
        items = np.atleast_1d(np.asarray(items, dtype=np.int64))
        lg = ls = None
        if self.has_gcmf:
            lg, _ = gcmf.forward(self.gcmf_params(), users, items, self.domains_of(items), zero_delta)
        if self.has_sed:
            uniq, inv = np.unique(users, return_inverse=True)
            X = sed.source_input(ds, uniq, self.scale_input)
            ls, _, _ = sed.forward(self.sed_params(), X, inv, items, self.gamma_max, reconstruct=False)
        return lg, ls

    def predict(self, ds, users, items, zero_delta=None, batch_size=4096):
        users = np.atleast_1d(np.asarray(users, dtype=np.int64))
        items = np.atleast_1d(np.asarray(items, dtype=np.int64))
        out = np.empty(len(users))
        for s in range(0, len(users), batch_size):
            sl = slice(s, s + batch_size)
            lg, ls = self.logits(ds, users[sl], items[sl], zero_delta)
            out[sl] = gcmf.output(fuse_logits(lg, ls, self.effective_alpha), self.gamma_max, self.final_activation)
        return out


_GCMF_KEYS = {"P_zeta", "P_delta_s", "P_delta_t", "Q_G", "w_G"}


def fuse_logits(lg, ls, alpha):
    """``(1-alpha)*lg + alpha*ls``; a missing side means that network is absent."""
    if ls is None:
        return lg
    if lg is None:
        return ls
    return (1.0 - alpha) * lg + alpha * ls


def init_model(kind, ds, cfg):
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    rng = np.random.default_rng([cfg.seed, 100])
    params = {}
    if kind != "sed":
        params.update(gcmf.init_params(ds.m, ds.n_items, cfg.k, rng, GCMF_MODE[kind], cfg.init_std))
    if kind in ("sed", "neucdcf"):
        params.update(sed.init_params(ds.n_s, ds.n_t, ds.n_items, cfg.k, cfg.layers, rng, cfg.init_std))
    return Model(
        kind=kind,
        params=params,
        alpha=cfg.alpha,
        gamma_min=ds.gamma_min,
        gamma_max=ds.gamma_max,
        m=ds.m,
        n_s=ds.n_s,
        n_t=ds.n_t,
        k=cfg.k,
        layers=cfg.layers if kind in ("sed", "neucdcf") else 0,
        scale_input=cfg.scale_input,
    )


def fuse_predict(model, ds, users, items, zero_delta=None):
    return model.predict(ds, users, items, zero_delta)


def training_index(model, ds):
    """Triples the model learns from: target train only for single-domain kinds."""
    idx = ds.train_index
    if model.single_domain:
        idx = idx[ds.domain[idx] == TARGET]
    return idx


def objective(model, ds, idx, rng=None, dropout=0.0, l2=0.0, train_idx=None):
    """Loss and gradients of the model's objective on the triples ``idx``.

    The loss is the pair MSE on the batch, plus the source-to-target term for
    models with a deep side, plus ``l2 * sum ||theta||^2``.

    The source-to-target term is batched so that its expectation over a
    uniformly drawn batch equals the full-data term: user ``u`` with ``c_u``
    training triples, appearing ``b_u`` times in a batch of size ``b``, gets
    weight ``(b_u / c_u) * |train| / (b * |target train|)`` on its masked row
    error.  A batch covering the whole training set gets exactly
    ``1 / |target train|``.

    Returns:
        (loss, grads, parts) where ``parts`` holds the individual terms.
    """
    if len(idx) == 0:
        raise ValueError("empty batch")
    if train_idx is None:
        train_idx = training_index(model, ds)
    users, items, ratings = ds.users[idx], ds.items[idx], ds.ratings[idx]
    domains = ds.domain[idx]
    b = len(idx)
    alpha = model.effective_alpha

    lg = ls = None
    if model.has_gcmf:
        gp = model.gcmf_params()
        drop = None
        if rng is not None and dropout and model.mode.learn_head:
            drop = dropout_mask((b, model.k), dropout, rng)
        lg, gcache = gcmf.forward(gp, users, items, domains, drop=drop)
    if model.has_sed:
        sp_ = model.sed_params()
        uniq, inv, b_u = np.unique(users, return_inverse=True, return_counts=True)
        X = sed.source_input(ds, uniq, model.scale_input)
        ls, recon, scache = sed.forward(sp_, X, inv, items, model.gamma_max, rng, dropout)

    logit = fuse_logits(lg, ls, alpha)
    pred = gcmf.output(logit, model.gamma_max, model.final_activation)
    err = pred - ratings
    loss_pred = float(np.mean(err * err))
    dlogit = 2.0 * err / b
    if model.final_activation != "identity":
        dlogit = dlogit * gcmf.output_grad(logit, model.gamma_max, model.final_activation)

    grads = {}
    parts = {"pred": loss_pred, "s2t": 0.0, "reg": 0.0}
    if model.has_gcmf:
        dl = dlogit if ls is None else (1.0 - alpha) * dlogit
        grads.update(gcmf.backward(dl, gcache, gp))
    if model.has_sed:
        n_target = ds.target_train_rows.nnz
        drecon = None
        if n_target:
            target = ds.target_train_rows[uniq].toarray()
            mask = target > 0
            counts = np.bincount(ds.users[train_idx], minlength=ds.m)[uniq]
            weight = (b_u / counts) * (len(train_idx) / (b * n_target))
            row_err = sed.reconstruction_error(recon, target, mask)
            parts["s2t"] = float(np.dot(weight, row_err))
            drecon = 2.0 * weight[:, None] * (recon - target) * mask
        dl = dlogit if lg is None else alpha * dlogit
        grads.update(sed.backward(dl, drecon, scache, sp_))

    if l2:
        parts["reg"] = l2 * sum(float(np.sum(v * v)) for v in model.params.values())
        for key, v in model.params.items():
            grads[key] = grads[key] + 2.0 * l2 * v

    total = parts["pred"] + parts["s2t"] + parts["reg"]
    return total, grads, parts


def total_loss(model, ds, idx=None, l2=0.0):
    """Deterministic objective value (no dropout); the full training set by default."""
    train_idx = training_index(model, ds)
    value, _, _ = objective(model, ds, train_idx if idx is None else idx, l2=l2, train_idx=train_idx)
    return value


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_mae: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = float("nan")
    stop_reason: str = ""

    def rows(self):
        """``(epoch, loss, val_mae)`` per epoch; wall time is deliberately left out."""
        return [(r.epoch, r.loss, r.val_mae) for r in self.records]


def zero_delta_mask(ds, users=None):
    """Boolean user mask selecting users whose domain offset is dropped."""
    if users is None:
        users = evaluation_users(ds)
    if users is None:
        return None
    mask = np.zeros(ds.m, dtype=bool)
    mask[users] = True
    return mask


def validation_mae(model, ds):
    idx = ds.target_index(1)
    if len(idx) == 0:
        return float("nan")
    pred = model.predict(ds, ds.users[idx], ds.items[idx], zero_delta_mask(ds))
    return float(np.mean(np.abs(pred - ds.ratings[idx])))


def train(kind, ds, cfg=None, model=None):
    """Fit ``kind`` on the protocol instance ``ds``.

    Each epoch shuffles the training triples with a generator derived from
    ``(cfg.seed, epoch)``, takes one optimizer step per batch and scores the
    validation set.  Training stops after ``cfg.epochs`` or once validation
    MAE has not improved for ``cfg.patience`` epochs; the parameters of the
    best validation epoch are returned.
    """
    cfg = cfg or TrainConfig()
    if not ds.is_split:
        raise ProtocolError("dataset must be split before training")
    if model is None:
        model = init_model(kind, ds, cfg)
    train_idx = training_index(model, ds)
    if len(train_idx) == 0:
        raise ValueError("empty training set")
    lr = cfg.resolved_lr(kind)
    l2 = cfg.resolved_l2(kind)
    dropout = cfg.resolved_dropout(kind)
    state = OptimizerState(lr=lr, rho=cfg.rho, eps=cfg.eps)

    log = TrainLog()
    best = model.copy()
    best_val = np.inf
    wait = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, 200, epoch])
        order = train_idx[rng.permutation(len(train_idx))]
        batch_losses = []
        for s in range(0, len(order), cfg.batch_size):
            batch = order[s : s + cfg.batch_size]
            value, grads, _ = objective(model, ds, batch, rng, dropout, l2, train_idx)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            try:
                if cfg.optimizer == "sgd":
                    apply_sgd(model.params, grads, lr)
                else:
                    apply_rmsprop(model.params, grads, state)
            except NonFiniteGradientError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            batch_losses.append(value)
        val = validation_mae(model, ds)
        log.records.append(EpochRecord(epoch, float(np.mean(batch_losses)), val, time.perf_counter() - t0))
        _log.debug("%s epoch %d loss %.6f val_mae %.6f", kind, epoch, log.records[-1].loss, val)
        if np.isnan(val) or val < best_val:
            best_val = val if not np.isnan(val) else best_val
            best = model.copy()
            log.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                log.stop_reason = f"no validation improvement for {cfg.patience} epochs"
                break
    else:
        log.stop_reason = "max epochs"
    log.best_val_mae = float(best_val) if np.isfinite(best_val) else float("nan")
    return best, log


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model, path, config=None):
    meta = {
        "format": "crossrec.checkpoint",
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "alpha": model.alpha,
        "gamma_min": model.gamma_min,
        "gamma_max": model.gamma_max,
        "m": model.m,
        "n_s": model.n_s,
        "n_t": model.n_t,
        "k": model.k,
        "layers": model.layers,
        "scale_input": model.scale_input,
        "config": config,
        "shapes": {key: list(v.shape) for key, v in model.params.items()},
    }
    arrays = {f"param/{key}": v for key, v in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("format") != "crossrec.checkpoint":
            raise ValueError(f"{path} is not a checkpoint")
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        params = {key[len("param/") :]: npz[key].copy() for key in npz.files if key.startswith("param/")}
    for key, shape in meta["shapes"].items():
        if list(params[key].shape) != shape:
            raise ValueError(f"checkpoint tensor {key} has shape {params[key].shape}, expected {shape}")
    if meta["layers"]:
        for stack, shapes in sed.stack_shapes(meta["n_s"], meta["n_t"], meta["k"], meta["layers"]).items():
            for i, shape in enumerate(shapes):
                if params[f"{stack}_W{i}"].shape != shape:
                    raise ValueError(f"{stack} layer {i} does not match the declared architecture")
    model = Model(
        kind=meta["kind"],
        params=params,
        alpha=meta["alpha"],
        gamma_min=meta["gamma_min"],
        gamma_max=meta["gamma_max"],
        m=meta["m"],
        n_s=meta["n_s"],
        n_t=meta["n_t"],
        k=meta["k"],
        layers=meta["layers"],
        scale_input=meta["scale_input"],
    )
    return model, meta.get("config")


def config_from_dict(d):
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in names})
