"""Two-stage assignment, outcome models and trajectories.

At every decision point the treated probability is drawn from {q1, q2}
and every unit is then assigned Bernoulli(Q). Both persist until the next
decision point. Outcome models map the last ``m + 1`` entries of a unit's
probability path and treatment path to an outcome; paths are clipped at
the start of the series.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .design import Design
from .exceptions import ValidationError

SeedLike = int | np.random.SeedSequence | np.random.Generator | None


def make_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ValidationError("a seed is required")
    return np.random.default_rng(seed)


def derive_seed(master: int, *key: int) -> np.random.SeedSequence:
    """Counter-based child seed for (center, replication, ...) keys.

    Children depend only on the master seed and the key, never on the
    order in which workers pick up tasks.
    """
    return np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key))


@dataclass(frozen=True)
class AssignmentPolicy:
    design: Design
    q1: float = 0.6
    q2: float = 0.4
    r_q1: float = 0.5

    def __post_init__(self):
        if not isinstance(self.design, Design):
            raise ValidationError("policy.design must be a Design")
        for name in ("q1", "q2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValidationError(f"{name} must lie strictly in (0, 1), got {v!r}")
        # r_q1 in {0, 1} is allowed here: it gives the degenerate selections
        if not 0.0 <= self.r_q1 <= 1.0:
            raise ValidationError(f"r_q1 must lie in [0, 1], got {self.r_q1!r}")

    @property
    def r_q2(self) -> float:
        return 1.0 - self.r_q1

    @property
    def T(self) -> int:
        return self.design.horizon

    def r_of(self, q: float) -> float:
        if q == self.q1:
            return self.r_q1
        if q == self.q2:
            return self.r_q2
        raise ValidationError(f"probability level {q!r} is neither q1 nor q2")

    @classmethod
    def from_params(cls, design: Design, params) -> "AssignmentPolicy":
        return cls(design, params.q1, params.q2, params.r_q1)


def _interval_index(design: Design) -> np.ndarray:
    pts = np.asarray(design.decision_points)
    return np.searchsorted(pts, np.arange(1, design.horizon + 1), side="right") - 1


def draw_assignment(policy: AssignmentPolicy, N: int, seed: SeedLike) -> tuple[np.ndarray, np.ndarray]:
    """Return Q (length T) and Z (N x T, int8), held constant between decision points."""
    if N < 1:
        raise ValidationError(f"N must be >= 1, got {N}")
    rng = make_rng(seed)
    n_dec = len(policy.design.decision_points)
    pick_q1 = rng.random(n_dec) < policy.r_q1
    q_dec = np.where(pick_q1, policy.q1, policy.q2)
    z_dec = (rng.random((N, n_dec)) < q_dec).astype(np.int8)
    idx = _interval_index(policy.design)
    return q_dec[idx], z_dec[:, idx]


@dataclass
class Trajectory:
    """Realised probabilities Q (T,), assignments Z (N, T) and outcomes Y (N, T)."""

    Q: np.ndarray
    Z: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.Z = np.asarray(self.Z)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Q.ndim != 1:
            raise ValidationError("Q must be a vector")
        if self.Z.ndim != 2 or self.Y.shape != self.Z.shape or self.Z.shape[1] != self.Q.size:
            raise ValidationError(
                f"shape mismatch: Q {self.Q.shape}, Z {self.Z.shape}, Y {self.Y.shape}"
            )
        if not np.isin(self.Z, (0, 1)).all():
            raise ValidationError("Z entries must be 0 or 1")
        self.Z = self.Z.astype(np.int8)

    @property
    def N(self) -> int:
        return self.Z.shape[0]

    @property
    def T(self) -> int:
        return self.Q.size

    def check_design(self, design: Design) -> None:
        """Horizon and persistence checks against a design."""
        if design.horizon != self.T:
            raise ValidationError(
                f"horizon mismatch: trajectory has T={self.T}, design has T={design.horizon}"
            )
        idx = _interval_index(design)
        same = idx[1:] == idx[:-1]
        if np.any(self.Q[1:][same] != self.Q[:-1][same]) or np.any(
            self.Z[:, 1:][:, same] != self.Z[:, :-1][:, same]
        ):
            raise ValidationError(
                "trajectory is not constant between decision points of the design"
            )

    def check_levels(self, q1: float, q2: float) -> None:
        if not np.all((self.Q == q1) | (self.Q == q2)):
            raise ValidationError(f"trajectory Q values must be q1={q1} or q2={q2}")

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["unit", "time", "q", "z", "y"])
        for i in range(self.N):
            for t in range(self.T):
                w.writerow([i + 1, t + 1, repr(float(self.Q[t])), int(self.Z[i, t]),
                            repr(float(self.Y[i, t]))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path_or_text: str | Path) -> "Trajectory":
        raw = str(path_or_text)
        if isinstance(path_or_text, Path) or "\n" not in raw:
            try:
                text = Path(raw).read_text()
            except OSError as exc:
                raise ValidationError(f"cannot read trajectory file {raw!r}: {exc.strerror}") from None
        else:
            text = raw
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or [c.strip() for c in rows[0]] != ["unit", "time", "q", "z", "y"]:
            raise ValidationError("trajectory CSV header must be 'unit,time,q,z,y'")
        body = [r for r in rows[1:] if r]
        try:
            unit = np.array([int(r[0]) for r in body])
            time = np.array([int(r[1]) for r in body])
            q = np.array([float(r[2]) for r in body])
            z = np.array([int(r[3]) for r in body])
            y = np.array([float(r[4]) for r in body])
        except (ValueError, IndexError) as exc:
            raise ValidationError(f"malformed trajectory CSV row: {exc}") from None
        if body == []:
            raise ValidationError("trajectory CSV has no rows")
        N, T = int(unit.max()), int(time.max())
        if unit.min() < 1 or time.min() < 1 or len(body) != N * T:
            raise ValidationError("trajectory CSV must hold one row per (unit, time), 1-based")
        Z = np.full((N, T), -1, dtype=np.int64)
        Y = np.zeros((N, T))
        Qm = np.full((N, T), np.nan)
        Z[unit - 1, time - 1] = z
        Y[unit - 1, time - 1] = y
        Qm[unit - 1, time - 1] = q
        if (Z < 0).any():
            raise ValidationError("trajectory CSV has duplicate (unit, time) rows")
        if np.any(Qm != Qm[0]):
            raise ValidationError("column q must be identical across units at each time")
        return cls(Qm[0], Z, Y)


# Outcome models

class OutcomeModel:
    """Outcome as a function of the last ``m + 1`` probability and treatment entries.

    ``realize`` is the vectorised path: Q has shape (..., T) and Z shape
    (..., N, T); the result has Z's shape. ``eval`` evaluates one (i, t)
    from explicit paths and exists mainly for cross-checks.
    """

    m: int = 0
    bounded: bool = True

    def eval(self, i: int, t: int, q_path: Sequence[float], z_path: Sequence[int]) -> float:
        raise NotImplementedError

    def realize(self, Q: np.ndarray, Z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def constant_path_table(self, q: float, z: int, N: int, T: int) -> np.ndarray:
        """Y_{i,t}(q 1, z 1) for all units and times (N x T)."""
        return self.realize(np.full(T, float(q)), np.full((N, T), int(z), dtype=np.int8))


def _lagged(x: np.ndarray, lag: int, fill=0) -> np.ndarray:
    """x shifted right by ``lag`` along the last axis, padded with ``fill``."""
    if lag == 0:
        return x
    out = np.full_like(x, fill)
    out[..., lag:] = x[..., :-lag]
    return out


@dataclass
class Model1(OutcomeModel):
    """Y = B when treated and -B otherwise, whatever the probability path."""

    B: float = 1.0
    m: int = 0

    def eval(self, i, t, q_path, z_path):
        return self.B if z_path[-1] == 1 else -self.B

    def realize(self, Q, Z):
        return np.where(np.asarray(Z) == 1, self.B, -self.B).astype(float)


@dataclass(frozen=True)
class Model2Spec:
    m: int = 2
    alpha: Callable[[np.ndarray], np.ndarray] = np.log
    delta_q: tuple[float, ...] | None = None
    delta_z: tuple[float, ...] | None = None
    delta_qz: tuple[float, ...] | None = None
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.m < 0:
            raise ValidationError(f"m must be >= 0, got {self.m}")
        for name in ("delta_q", "delta_z", "delta_qz"):
            v = getattr(self, name)
            v = (1.0,) * (self.m + 1) if v is None else tuple(float(x) for x in v)
            if len(v) != self.m + 1:
                raise ValidationError(f"{name} must have length m+1={self.m + 1}, got {len(v)}")
            object.__setattr__(self, name, v)
        if self.noise_sd < 0:
            raise ValidationError("noise_sd must be >= 0")


class Model2(OutcomeModel):
    """Linear model with time fixed effect, frozen noise and lagged indicators.

    Y = alpha_t + eps_{i,t} + sum over lags d <= m of
        dq_d 1{Q_{t-d} = q1} + dz_d 1{Z_{t-d} = 1} + dqz_d 1{both},
    with lags before t = 1 contributing nothing. The noise table is drawn
    once from ``seed`` and then held fixed.
    """

    bounded = False

    def __init__(self, spec: Model2Spec, N: int, T: int, q1: float, seed: SeedLike = 0):
        self.spec = spec
        self.m = spec.m
        self.N, self.T, self.q1 = int(N), int(T), float(q1)
        self.alpha = np.asarray(spec.alpha(np.arange(1, T + 1, dtype=float)), dtype=float)
        rng = make_rng(seed)
        self.eps = rng.normal(0.0, spec.noise_sd, size=(N, T)) if spec.noise_sd > 0 else np.zeros((N, T))
        self._dq = np.array(spec.delta_q)
        self._dz = np.array(spec.delta_z)
        self._dqz = np.array(spec.delta_qz)

    def eval(self, i, t, q_path, z_path):
        q_path, z_path = list(q_path), list(z_path)
        if len(q_path) != min(t, self.m + 1) or len(z_path) != len(q_path):
            raise ValidationError("paths must have length min(t, m+1)")
        y = self.alpha[t - 1] + self.eps[i, t - 1]
        for d in range(len(q_path)):
            iq = float(q_path[-1 - d] == self.q1)
            iz = float(z_path[-1 - d] == 1)
            y += self._dq[d] * iq + self._dz[d] * iz + self._dqz[d] * iq * iz
        return float(y)

    def realize(self, Q, Z):
        Q = np.asarray(Q, dtype=float)
        Z = np.asarray(Z)
        if Z.shape[-2:] != (self.N, self.T):
            raise ValidationError(f"Z must end in shape ({self.N}, {self.T}), got {Z.shape}")
        iq = (Q == self.q1).astype(float)[..., None, :]
        iz = (Z == 1).astype(float)
        y = np.broadcast_to(self.alpha + self.eps, Z.shape).copy()
        for d in range(self.m + 1):
            lq, lz = _lagged(iq, d), _lagged(iz, d)
            y += self._dq[d] * lq + self._dz[d] * lz + self._dqz[d] * lq * lz
        return y


class PathTable(OutcomeModel):
    """Arbitrary outcomes indexed by the last m+1 probability and treatment bits.

    ``values`` has shape (N, T, 2^(m+1), 2^(m+1)); bit d of the first
    code is 1{Q_{t-d} = q1} and of the second 1{Z_{t-d} = 1}. Lags before
    the series start read as 0.
    """

    def __init__(self, values: np.ndarray, q1: float, B: float | None = None):
        values = np.asarray(values, dtype=float)
        if values.ndim != 4 or values.shape[2] != values.shape[3]:
            raise ValidationError("values must have shape (N, T, 2^(m+1), 2^(m+1))")
        k = values.shape[2]
        m = int(round(math.log2(k))) - 1
        if 2 ** (m + 1) != k:
            raise ValidationError("last two axes must have length 2^(m+1)")
        self.values, self.q1, self.m = values, float(q1), m
        self.N, self.T = values.shape[:2]
        self.B = float(np.abs(values).max()) if B is None else B

    @classmethod
    def random(cls, N: int, T: int, m: int, q1: float, rng: np.random.Generator, B: float = 1.0):
        k = 2 ** (m + 1)
        return cls(rng.uniform(-B, B, size=(N, T, k, k)), q1, B)

    @classmethod
    def from_model(cls, model: OutcomeModel, N: int, T: int, q1: float, q2: float) -> "PathTable":
        """Tabulate any model over all bit patterns (lags before t = 1 read as q2 / 0)."""
        m = model.m
        k = 2 ** (m + 1)
        vals = np.empty((N, T, k, k))
        for i in range(N):
            for t in range(1, T + 1):
                n = min(t, m + 1)
                for qc in range(k):
                    for zc in range(k):
                        qp = [q1 if (qc >> d) & 1 else q2 for d in range(n)][::-1]
                        zp = [(zc >> d) & 1 for d in range(n)][::-1]
                        vals[i, t - 1, qc, zc] = model.eval(i, t, qp, zp)
        return cls(vals, q1)

    def _codes(self, Q, Z):
        iq = (np.asarray(Q, dtype=float) == self.q1).astype(np.int64)
        iz = (np.asarray(Z) == 1).astype(np.int64)
        qc = np.zeros_like(iq)
        zc = np.zeros_like(iz)
        for d in range(self.m + 1):
            qc += _lagged(iq, d) << d
            zc += _lagged(iz, d) << d
        return qc, zc

    def eval(self, i, t, q_path, z_path):
        qc = sum(int(q == self.q1) << d for d, q in enumerate(reversed(list(q_path))))
        zc = sum(int(z == 1) << d for d, z in enumerate(reversed(list(z_path))))
        return float(self.values[i, t - 1, qc, zc])

    def realize(self, Q, Z):
        Z = np.asarray(Z)
        if Z.shape[-2:] != (self.N, self.T):
            raise ValidationError(f"Z must end in shape ({self.N}, {self.T}), got {Z.shape}")
        qc, zc = self._codes(Q, Z)
        qc = np.broadcast_to(qc[..., None, :], Z.shape)
        ii = np.arange(self.N)[:, None]
        tt = np.arange(self.T)[None, :]
        return self.values[ii, tt, qc, zc]


def realize_outcomes(model: OutcomeModel, Q: np.ndarray, Z: np.ndarray) -> np.ndarray:
    Q = np.asarray(Q)
    Z = np.asarray(Z)
    if Z.shape[-1] != Q.shape[-1]:
        raise ValidationError(f"Q has {Q.shape[-1]} periods but Z has {Z.shape[-1]}")
    return model.realize(Q, Z)


def run_trial(policy: AssignmentPolicy, model: OutcomeModel, N: int, seed: SeedLike) -> Trajectory:
    Q, Z = draw_assignment(policy, N, seed)
    return Trajectory(Q, Z, realize_outcomes(model, Q, Z))


@dataclass(frozen=True)
class CenterSpec:
    label: str
    N: int
    policy: AssignmentPolicy
    model: OutcomeModel = field(default_factory=Model1)


def center_weights(specs: Sequence[CenterSpec]) -> np.ndarray:
    n = np.array([s.N for s in specs], dtype=float)
    return n / n.sum()


def run_multicenter(specs: Sequence[CenterSpec], seed: int, rep: int = 0) -> list[Trajectory]:
    """One independent trial per center, seeded by (center index, rep).

    With a single center this draws from ``derive_seed(seed, 0, rep)``,
    the same stream the single-center harness uses.
    """
    if not specs:
        raise ValidationError("at least one center is required")
    return [run_trial(s.policy, s.model, s.N, derive_seed(seed, g, rep)) for g, s in enumerate(specs)]
