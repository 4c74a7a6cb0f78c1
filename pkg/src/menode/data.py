"""Synthetic panel datasets and their on-disk CSV form.

All subjects in a dataset share one observation grid. Times before the
split index are the observed (interpolation) window; the rest is the
extrapolation window held out from training and calibration. Ground
truth (initial state, subject effect) rides along so parameter recovery
can be scored later.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError


@dataclass
class PanelDataset:
    times: np.ndarray        # (n_times,)
    X: np.ndarray            # (n_subjects, n_times, obs_dim)
    subject_ids: np.ndarray  # (n_subjects,) int64
    group_ids: np.ndarray    # (n_subjects,) int64
    split_index: int
    true_z0: np.ndarray | None = None  # (n_subjects, z0_dim)
    true_w: np.ndarray | None = None   # (n_subjects, w_dim)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.X = np.asarray(self.X, dtype=np.float64)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        self.group_ids = np.asarray(self.group_ids, dtype=np.int64)
        if self.times.ndim != 1 or not np.all(np.diff(self.times) > 0):
            raise ContractError("PanelDataset: times must be 1-D and strictly increasing")
        n, t = self.subject_ids.size, self.times.size
        if self.X.shape[:2] != (n, t) or self.X.ndim != 3:
            raise ContractError(f"PanelDataset: X must be ({n}, {t}, d), got {self.X.shape}")
        if self.group_ids.shape != (n,):
            raise ContractError("PanelDataset: group_ids must match subject_ids")
        if not 0 < self.split_index < t:
            raise ContractError(
                f"PanelDataset: split index must lie strictly inside the grid (0, {t}), got {self.split_index}")
        if not np.all(np.isfinite(self.X)):
            raise ContractError("PanelDataset: observations must be finite")
        for name in ("true_z0", "true_w"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.float64)
                if arr.ndim != 2 or arr.shape[0] != n:
                    raise ContractError(f"PanelDataset: {name} must be ({n}, k), got {arr.shape}")
                setattr(self, name, arr)

    @property
    def n_subjects(self) -> int:
        return self.subject_ids.size

    @property
    def n_times(self) -> int:
        return self.times.size

    @property
    def obs_dim(self) -> int:
        return self.X.shape[2]

    @property
    def interp_times(self) -> np.ndarray:
        return self.times[: self.split_index]

    @property
    def extrap_times(self) -> np.ndarray:
        return self.times[self.split_index:]

    @property
    def X_interp(self) -> np.ndarray:
        return self.X[:, : self.split_index, :]

    @property
    def X_extrap(self) -> np.ndarray:
        return self.X[:, self.split_index:, :]

    def subset(self, indices) -> "PanelDataset":
        indices = np.asarray(indices)
        return PanelDataset(
            times=self.times.copy(),
            X=self.X[indices].copy(),
            subject_ids=self.subject_ids[indices].copy(),
            group_ids=self.group_ids[indices].copy(),
            split_index=self.split_index,
            true_z0=None if self.true_z0 is None else self.true_z0[indices].copy(),
            true_w=None if self.true_w is None else self.true_w[indices].copy(),
        )

    def train_test_split(self, train_frac: float):
        """Leading-fraction split in stored subject order (generation order)."""
        if not 0.0 < train_frac < 1.0:
            raise ContractError(f"train_frac must lie in (0, 1), got {train_frac}")
        n_train = int(self.n_subjects * train_frac)
        if n_train < 1 or n_train >= self.n_subjects:
            raise ContractError(
                f"train_frac={train_frac} leaves an empty side for {self.n_subjects} subjects")
        idx = np.arange(self.n_subjects)
        return self.subset(idx[:n_train]), self.subset(idx[n_train:])


@dataclass(frozen=True)
class ToySpec:
    """One-dimensional exponential-growth panel: dz/dt = z*w, closed form z0*exp(w*t)."""

    mu: float = 1.3
    sigma: float = 0.01
    beta: float = 0.3
    sigma_b: float = 0.01
    n_subjects: int = 1000
    train_frac: float = 0.8
    n_times: int = 20
    t_max: float = 3.0

    def __post_init__(self):
        if self.sigma <= 0 or self.sigma_b <= 0:
            raise ContractError("ToySpec: sigma and sigma_b must be > 0")
        if self.n_subjects < 2 or self.n_times < 2:
            raise ContractError("ToySpec: need at least 2 subjects and 2 time points")
        if not 0.0 < self.train_frac < 1.0:
            raise ContractError(f"ToySpec: train_frac must lie in (0, 1), got {self.train_frac}")
        if self.t_max <= 0:
            raise ContractError("ToySpec: t_max must be > 0")


def _grid_times(n_times: int, t_max: float, jitter: bool, rng) -> np.ndarray:
    """Evenly spaced grid on [0, t_max]; optional interior jitter shared by all subjects."""
    times = np.linspace(0.0, t_max, n_times)
    if jitter:
        dt = times[1] - times[0]
        times[1:-1] = times[1:-1] + rng.uniform(-0.3, 0.3, size=n_times - 2) * dt
        times = np.sort(times)
        if not np.all(np.diff(times) > 0):
            raise ContractError("jittered grid collapsed; retry with another seed")
    return times


def generate_toy(spec: ToySpec, seed: int, jitter: bool = False) -> PanelDataset:
    """Exact exponential trajectories (no solver error, no observation noise)."""
    rng = np.random.default_rng(seed)
    times = _grid_times(spec.n_times, spec.t_max, jitter, rng)
    z0 = rng.normal(spec.mu, spec.sigma, spec.n_subjects)
    w = rng.normal(spec.beta, spec.sigma_b, spec.n_subjects)
    X = (z0[:, None] * np.exp(w[:, None] * times[None, :]))[:, :, None]
    return PanelDataset(
        times=times,
        X=X,
        subject_ids=np.arange(spec.n_subjects),
        group_ids=np.zeros(spec.n_subjects, dtype=np.int64),
        split_index=spec.n_times // 2,
        true_z0=z0[:, None],
        true_w=w[:, None],
    )


GROUPED_2D_GROUP_COUNTS = (1, 2, 4, 8)


def rotation_states(z0: np.ndarray, omega: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Closed-form planar rotation: state(t) = R(omega*t) @ z0, shapes (N,2),(N,),(T,) -> (N,T,2)."""
    angles = omega[:, None] * times[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    x = cos * z0[:, None, 0] - sin * z0[:, None, 1]
    y = sin * z0[:, None, 0] + cos * z0[:, None, 1]
    return np.stack([x, y], axis=-1)


def _group_omegas(n_groups: int) -> np.ndarray:
    if n_groups == 1:
        return np.array([1.0])
    return np.linspace(0.3, 1.8, n_groups)


def generate_grouped_2d(n_groups: int, n_subjects: int, seed: int, noise_sigma: float = 0.01,
                        n_times: int = 20, t_max: float = 2.0) -> PanelDataset:
    """Planar rotations with one angular speed per group.

    Group g owns a contiguous arc of the unit circle for initial angles
    (with one group that is the whole circle) and the g-th speed of an
    evenly spaced ladder, so groups differ both at baseline and in their
    dynamics. Observations get N(0, noise_sigma^2) noise per coordinate.
    """
    if n_groups not in GROUPED_2D_GROUP_COUNTS:
        raise ContractError(f"generate_grouped_2d: n_groups must be one of {GROUPED_2D_GROUP_COUNTS}")
    if n_subjects < 2 * n_groups:
        raise ContractError("generate_grouped_2d: need at least two subjects per group")
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, t_max, n_times)
    omegas = _group_omegas(n_groups)
    group_ids = rng.integers(0, n_groups, size=n_subjects)
    arc = 2.0 * math.pi / n_groups
    theta0 = group_ids * arc + rng.uniform(0.0, arc, size=n_subjects)
    z0 = np.stack([np.cos(theta0), np.sin(theta0)], axis=1)
    omega = omegas[group_ids]
    states = rotation_states(z0, omega, times)
    X = states + rng.normal(0.0, noise_sigma, size=states.shape)
    return PanelDataset(
        times=times,
        X=X,
        subject_ids=np.arange(n_subjects),
        group_ids=group_ids.astype(np.int64),
        split_index=n_times // 2,
        true_z0=z0,
        true_w=omega[:, None],
    )


def _fmt(value: float) -> str:
    # 17 significant digits round-trips any float64 exactly
    return format(float(value), ".17g")


def write_csv(dataset: PanelDataset, path):
    """One row per (subject, time), subject-major; UTF-8, LF line endings."""
    d = dataset.obs_dim
    header = ["subject_id", "group_id", "time", "split"]
    header += [f"x_{j}" for j in range(d)]
    if dataset.true_z0 is not None:
        header += [f"true_z0_{j}" for j in range(dataset.true_z0.shape[1])]
    if dataset.true_w is not None:
        header += [f"true_w_{j}" for j in range(dataset.true_w.shape[1])]
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for i in range(dataset.n_subjects):
        for t_idx in range(dataset.n_times):
            row = [
                str(int(dataset.subject_ids[i])),
                str(int(dataset.group_ids[i])),
                _fmt(dataset.times[t_idx]),
                "interp" if t_idx < dataset.split_index else "extrap",
            ]
            row += [_fmt(v) for v in dataset.X[i, t_idx]]
            if dataset.true_z0 is not None:
                row += [_fmt(v) for v in dataset.true_z0[i]]
            if dataset.true_w is not None:
                row += [_fmt(v) for v in dataset.true_w[i]]
            buf.write(",".join(row) + "\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def _parse_float(text: str, line_no: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"expected a number, got {text!r}", line=line_no, column=column) from None


def _parse_int(text: str, line_no: int, column: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataError(f"expected an integer, got {text!r}", line=line_no, column=column) from None


def read_csv(path) -> PanelDataset:
    """Inverse of :func:`write_csv`; rejects ragged grids and malformed fields."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataError("empty file", line=1)
    header = lines[0].split(",")
    required = ["subject_id", "group_id", "time", "split"]
    for col in required:
        if col not in header:
            raise DataError(f"missing required column {col!r}", line=1, column=col)
    col_idx = {name: i for i, name in enumerate(header)}
    x_cols = [c for c in header if c.startswith("x_")]
    if not x_cols:
        raise DataError("no observation columns (x_0, ...)", line=1, column="x_0")
    z0_cols = [c for c in header if c.startswith("true_z0_")]
    w_cols = [c for c in header if c.startswith("true_w_")]

    rows_by_subject: dict[int, list] = {}
    group_by_subject: dict[int, int] = {}
    truth_by_subject: dict[int, tuple] = {}
    order: list[int] = []
    for line_no, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != len(header):
            raise DataError(f"expected {len(header)} fields, got {len(fields)}", line=line_no)
        sid = _parse_int(fields[col_idx["subject_id"]], line_no, "subject_id")
        gid = _parse_int(fields[col_idx["group_id"]], line_no, "group_id")
        t = _parse_float(fields[col_idx["time"]], line_no, "time")
        split = fields[col_idx["split"]]
        if split not in ("interp", "extrap"):
            raise DataError(f"split must be 'interp' or 'extrap', got {split!r}",
                            line=line_no, column="split")
        x = [_parse_float(fields[col_idx[c]], line_no, c) for c in x_cols]
        z0 = tuple(_parse_float(fields[col_idx[c]], line_no, c) for c in z0_cols)
        w = tuple(_parse_float(fields[col_idx[c]], line_no, c) for c in w_cols)
        if sid not in rows_by_subject:
            rows_by_subject[sid] = []
            group_by_subject[sid] = gid
            truth_by_subject[sid] = (z0, w)
            order.append(sid)
        elif group_by_subject[sid] != gid:
            raise DataError(f"subject {sid} has inconsistent group ids", line=line_no, column="group_id")
        rows_by_subject[sid].append((t, split, x, line_no))

    first = rows_by_subject[order[0]]
    times = np.array([r[0] for r in first])
    splits = [r[1] for r in first]
    if np.any(np.diff(times) <= 0):
        raise DataError(f"times for subject {order[0]} are not strictly increasing")
    n_interp = sum(1 for s in splits if s == "interp")
    if splits != ["interp"] * n_interp + ["extrap"] * (len(splits) - n_interp):
        raise DataError("split labels must be a block of 'interp' rows followed by 'extrap' rows")
    if n_interp == 0 or n_interp == len(splits):
        raise DataError("file must contain both interp and extrap rows for every subject")

    X = np.empty((len(order), times.size, len(x_cols)))
    for i, sid in enumerate(order):
        rows = rows_by_subject[sid]
        if len(rows) != times.size:
            raise DataError(f"subject {sid} has {len(rows)} rows, expected {times.size}",
                            line=rows[-1][3])
        for t_idx, (t, split, x, line_no) in enumerate(rows):
            if t != times[t_idx]:
                raise DataError(f"subject {sid} is not on the shared time grid",
                                line=line_no, column="time")
            if split != splits[t_idx]:
                raise DataError(f"subject {sid} disagrees on the split label",
                                line=line_no, column="split")
            X[i, t_idx] = x

    true_z0 = None
    true_w = None
    if z0_cols:
        true_z0 = np.array([truth_by_subject[sid][0] for sid in order])
    if w_cols:
        true_w = np.array([truth_by_subject[sid][1] for sid in order])
    return PanelDataset(
        times=times,
        X=X,
        subject_ids=np.array(order, dtype=np.int64),
        group_ids=np.array([group_by_subject[sid] for sid in order], dtype=np.int64),
        split_index=n_interp,
        true_z0=true_z0,
        true_w=true_w,
    )
