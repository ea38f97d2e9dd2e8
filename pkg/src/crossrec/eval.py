"""Error metrics, protocol-aware evaluation and the paired t-test."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from .data import TEST, ProtocolSpec, evaluation_users
from .neucdcf import zero_delta_mask

_log = logging.getLogger(__name__)


def _check_pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("cannot score an empty prediction set")
    return pred, truth


def mae(pred, truth):
    pred, truth = _check_pair(pred, truth)
    return float(np.mean(np.abs(truth - pred)))


def rmse(pred, truth):
    pred, truth = _check_pair(pred, truth)
    return float(np.sqrt(np.mean((truth - pred) ** 2)))


@dataclass
class EvalReport:
    """Test metrics for one model under one protocol, over one or more seeds."""

    protocol: ProtocolSpec
    model: str
    seeds: list = field(default_factory=list)
    mae: list = field(default_factory=list)
    rmse: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    count: list = field(default_factory=list)
    cold_users: list = field(default_factory=list)

    @property
    def empty(self):
        return not self.count or sum(self.count) == 0

    @property
    def mae_mean(self):
        return _nanmean(self.mae)

    @property
    def mae_std(self):
        return _nanstd(self.mae)

    @property
    def rmse_mean(self):
        return _nanmean(self.rmse)

    @property
    def rmse_std(self):
        return _nanstd(self.rmse)

    @property
    def val_mae_mean(self):
        return _nanmean(self.val_mae)

    def extend(self, other):
        for name in ("seeds", "mae", "rmse", "val_mae", "count", "cold_users"):
            getattr(self, name).extend(getattr(other, name))
        return self

    def to_dict(self):
        d = asdict(self)
        d["protocol"] = self.protocol.to_dict()
        d.update(mae_mean=self.mae_mean, mae_std=self.mae_std, rmse_mean=self.rmse_mean, rmse_std=self.rmse_std)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_rows(self):
        """One ``(protocol, K, model, seed, MAE, RMSE)`` row per seed."""
        return [
            (self.protocol.kind, self.protocol.K, self.model, s, m, r)
            for s, m, r in zip(self.seeds, self.mae, self.rmse)
        ]


CSV_HEADER = ("protocol", "K", "model", "seed", "mae", "rmse")


def rows_to_csv(rows, header=CSV_HEADER):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _nanmean(xs):
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else float("nan")


def _nanstd(xs):
    # population std over repeats; a single run reports 0
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.std(xs)) if xs else float("nan")


def evaluate(model, ds, protocol=None, seed=None, val_mae=float("nan")):
    """Score ``model`` on the test ratings selected by the protocol.

    ``sparse`` uses every test pair, ``cold_start`` only pairs of users with
    fewer than five target train ratings, ``full_cold_start`` only pairs of
    the users whose target train ratings were removed.  Cold-start paths drop
    the domain-specific user offset.
    """
    protocol = protocol or ds.protocol or ProtocolSpec()
    idx = ds.target_index(TEST)
    users = evaluation_users(ds) if protocol.kind != "sparse" else None
    zero = None
    if users is not None:
        idx = idx[np.isin(ds.users[idx], users)]
        zero = zero_delta_mask(ds, users)
    report = EvalReport(protocol=protocol, model=model.kind, seeds=[protocol.seed if seed is None else seed])
    report.val_mae.append(float(val_mae))
    report.cold_users.append(0 if users is None else int(len(users)))
    report.count.append(int(len(idx)))
    if len(idx) == 0:
        _log.warning("no test pairs to evaluate under %s K=%s", protocol.kind, protocol.K)
        report.mae.append(float("nan"))
        report.rmse.append(float("nan"))
        return report
    pred = model.predict(ds, ds.users[idx], ds.items[idx], zero)
    truth = ds.ratings[idx]
    report.mae.append(mae(pred, truth))
    report.rmse.append(rmse(pred, truth))
    return report


@dataclass
class TTestResult:
    t: float
    p: float
    degenerate: bool = False


def t_sf_two_sided(t, df):
    """Two-sided tail probability of Student's t via the regularized incomplete beta."""
    x = df / (df + t * t)
    return float(special.betainc(df / 2.0, 0.5, x))


def paired_t_test(a, b):
    """Two-sided paired t-test over per-split metrics ``a`` and ``b``.

    Zero-variance differences give ``t = +/-inf`` (or 0 for identical inputs)
    with ``degenerate=True``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-d arrays of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, degenerate=True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, t_sf_two_sided(t, n - 1))
