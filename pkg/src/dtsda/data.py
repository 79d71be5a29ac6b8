"""Sensor recordings, sliding windows, domain datasets and a synthetic generator."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

# 0-based versions of the activity/index tables used by the three public datasets
ACTIVITY_TABLES: dict[str, tuple[str, ...]] = {
    "oppt": ("standing", "walking", "sitting", "lying"),
    "pamap2": (
        "lying", "sitting", "standing", "walking", "running", "cycling",
        "Nordic walking", "ascending stairs", "descending stairs",
        "vacuum cleaning", "ironing",
    ),
    "dsads": (
        "sitting", "standing", "lying on back", "lying on right",
        "ascending stairs", "descending stairs", "standing in elevator still",
        "moving around in elevator", "walking in parking lot",
        "walking on treadmill in flat", "walking on treadmill inclined positions",
        "running on treadmill in flat", "exercising on stepper",
        "exercising on cross trainer",
        "cycling on exercise bike in horizontal positions",
        "cycling on exercise bike in vertical positions",
        "rowing", "jumping", "playing basketball",
    ),
}

REQUIRED_COLUMNS = ("timestamp", "user", "segment", "activity")
MISSING = -1


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def fmt(x: float) -> str:
    """Shortest decimal string that parses back to the same float."""
    return repr(float(x))


# ----------------------------------------------------------------------------
# recordings


@dataclass
class SensorRecording:
    user_id: str
    segment_id: int
    sampling_rate: float
    channels: np.ndarray  # [num_channels, num_samples]
    labels: np.ndarray  # [num_samples], MISSING where unlabelled
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.channels.ndim != 2:
            raise DataError("channels must be [num_channels, num_samples]")
        if self.labels.shape != (self.channels.shape[1],):
            raise DataError("one label per sample required")
        if not self.sampling_rate > 0:
            raise DataError("sampling_rate must be positive")

    @property
    def num_samples(self) -> int:
        return self.channels.shape[1]


def load_activity_map(path: str | Path) -> dict[str, int]:
    """Read a two-column ``activity,index`` CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"activity", "index"}:
        raise DataError(f"{path}: expected columns activity,index")
    return {r["activity"]: int(r["index"]) for r in rows}


def write_activity_map(mapping: Mapping[str, int], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["activity", "index"])
        for name, idx in sorted(mapping.items(), key=lambda kv: kv[1]):
            w.writerow([name, idx])


def activity_map_for(table: str) -> dict[str, int]:
    return {name: i for i, name in enumerate(ACTIVITY_TABLES[table.lower()])}


def load_recordings_csv(
    path: str | Path,
    activity_map: Mapping[str, int] | str | Path,
    sampling_rate: float | None = None,
) -> list[SensorRecording]:
    """Parse the recording CSV into one :class:`SensorRecording` per (user, segment).

    Columns are ``timestamp, user, segment, activity`` followed by one float
    column per channel. An empty ``activity`` cell marks an unlabelled
    sample. ``activity_map`` is a name->index mapping, a path to an
    ``activity,index`` CSV, or the name of a built-in table
    (``oppt``, ``pamap2``, ``dsads``). Without an explicit
    ``sampling_rate`` it is estimated from the median timestamp step
    over the whole file.
    """
    if isinstance(activity_map, (str, Path)):
        key = str(activity_map).lower()
        activity_map = activity_map_for(key) if key in ACTIVITY_TABLES else load_activity_map(activity_map)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        pos = {c: header.index(c) for c in REQUIRED_COLUMNS}
        chan_cols = [i for i, c in enumerate(header) if c not in REQUIRED_COLUMNS]
        if not chan_cols:
            raise DataError(f"{path}: no sensor channel columns")
        groups: dict[tuple[str, int], list[list[str]]] = {}
        for row in reader:
            if not row:
                continue
            groups.setdefault((row[pos["user"]], int(row[pos["segment"]])), []).append(row)

    names = tuple(header[i] for i in chan_cols)
    stamps = {k: np.array([float(r[pos["timestamp"]]) for r in rows]) for k, rows in groups.items()}
    for (user, seg), ts in stamps.items():
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise DataError(f"{path}: timestamps not increasing in user {user!r} segment {seg}")
    if sampling_rate is None:
        steps = np.concatenate([np.diff(ts) for ts in stamps.values()])
        if steps.size == 0:
            raise DataError(f"{path}: cannot infer sampling rate without consecutive samples")
        sampling_rate = 1.0 / float(np.median(steps))
    out = []
    for (user, seg), rows in groups.items():
        labels = []
        for r in rows:
            name = r[pos["activity"]]
            if name == "":
                labels.append(MISSING)
            elif name in activity_map:
                labels.append(activity_map[name])
            else:
                raise DataError(f"{path}: unknown activity {name!r}")
        data = np.array([[float(r[i]) for i in chan_cols] for r in rows]).T
        out.append(SensorRecording(user, seg, sampling_rate, data, np.array(labels), names))
    return out


def write_recordings_csv(
    recordings: Sequence[SensorRecording],
    path: str | Path,
    activity_names: Sequence[str],
) -> None:
    names = recordings[0].channel_names or tuple(f"ch{i}" for i in range(recordings[0].channels.shape[0]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*REQUIRED_COLUMNS, *names])
        for rec in recordings:
            dt = 1.0 / rec.sampling_rate
            for j in range(rec.num_samples):
                lab = rec.labels[j]
                w.writerow(
                    [fmt(j * dt), rec.user_id, rec.segment_id, "" if lab == MISSING else activity_names[lab]]
                    + [fmt(v) for v in rec.channels[:, j]]
                )


# ----------------------------------------------------------------------------
# windows


@dataclass
class Window:
    data: np.ndarray  # [num_channels, window_len]
    class_label: int
    segment_id: int
    temporal_index: int
    domain: int = 0
    ts: int = 0
    user_id: str = ""

    def pseudo_label(self, num_classes: int) -> int:
        return compose_pseudo_label(self.ts, self.class_label, num_classes)


def window_geometry(sampling_rate: float, window_seconds: float = 3.0, overlap: float = 0.5) -> tuple[int, int]:
    """``(window_len, stride)`` in samples."""
    if not 0 <= overlap < 1:
        raise ValueError("overlap must lie in [0, 1)")
    window_len = int(round(window_seconds * sampling_rate))
    stride = max(1, int(round(window_len * (1 - overlap))))
    return window_len, stride


def segment_windows(rec: SensorRecording, window_seconds: float = 3.0, overlap: float = 0.5) -> list[Window]:
    """Cut a recording into fixed windows, dropping any that mix activity labels.

    Windows containing unlabelled samples are dropped as well.
    """
    window_len, stride = window_geometry(rec.sampling_rate, window_seconds, overlap)
    if rec.num_samples < window_len:
        raise DataError(
            f"recording {rec.user_id}/{rec.segment_id} has {rec.num_samples} samples, window needs {window_len}"
        )
    out = []
    for start in range(0, rec.num_samples - window_len + 1, stride):
        labs = rec.labels[start : start + window_len]
        if labs[0] == MISSING or np.any(labs != labs[0]):
            continue
        out.append(
            Window(
                rec.channels[:, start : start + window_len].copy(),
                int(labs[0]),
                rec.segment_id,
                len(out),
                user_id=rec.user_id,
            )
        )
    return out


@dataclass
class WindowedDataset:
    """Column-oriented storage of windows.

    ``segment`` and ``temporal_index`` order windows in time; the only field
    mutated after construction is ``ts``, and only by the relabelling step.
    """

    data: np.ndarray  # [N, channels, window_len]
    labels: np.ndarray  # class label c
    domain: np.ndarray
    segment: np.ndarray
    temporal_index: np.ndarray
    num_classes: int
    ts: np.ndarray | None = None
    activity_names: tuple[str, ...] = ()
    channel_mean: np.ndarray | None = None
    channel_std: np.ndarray | None = None
    normalized: bool = False
    class_permutation: np.ndarray | None = None  # target anonymisation, see anonymize_target_classes

    def __post_init__(self):
        n = len(self.data)
        self.data = np.asarray(self.data, dtype=np.float64)
        for name in ("labels", "domain", "segment", "temporal_index"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
            if getattr(self, name).shape != (n,):
                raise DataError(f"{name} must have one entry per window")
        if self.ts is None:
            self.ts = np.zeros(n, dtype=np.int64)
        self.ts = np.asarray(self.ts, dtype=np.int64)
        if self.data.ndim != 3:
            raise DataError("data must be [N, channels, window_len]")

    def __len__(self) -> int:
        return len(self.data)

    @property
    def window_len(self) -> int:
        return self.data.shape[2]

    @property
    def num_channels(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_windows(
        cls, windows: Sequence[Window], num_classes: int, activity_names: Sequence[str] = ()
    ) -> "WindowedDataset":
        if not windows:
            raise DataError("no windows")
        lengths = {w.data.shape for w in windows}
        if len(lengths) != 1:
            raise DataError(f"inconsistent window shapes {sorted(lengths)}")
        return cls(
            np.stack([w.data for w in windows]),
            [w.class_label for w in windows],
            [w.domain for w in windows],
            [w.segment_id for w in windows],
            [w.temporal_index for w in windows],
            num_classes,
            ts=[w.ts for w in windows],
            activity_names=tuple(activity_names),
        )

    def windows(self) -> list[Window]:
        return [
            Window(self.data[i], int(self.labels[i]), int(self.segment[i]), int(self.temporal_index[i]),
                   int(self.domain[i]), int(self.ts[i]))
            for i in range(len(self))
        ]

    def subset(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx)
        return replace(
            self,
            data=self.data[idx],
            labels=self.labels[idx],
            domain=self.domain[idx],
            segment=self.segment[idx],
            temporal_index=self.temporal_index[idx],
            ts=self.ts[idx].copy(),
        )

    def with_domain(self, d: int) -> "WindowedDataset":
        return replace(self, domain=np.full(len(self), d), ts=self.ts.copy())

    def pseudo_labels(self) -> np.ndarray:
        return self.ts * 2 * self.num_classes + self.labels

    def check(self, num_states: int | None = None) -> None:
        """Assert window invariants: label ranges per domain and consecutive temporal order."""
        C = self.num_classes
        src, tgt = self.domain == 0, self.domain == 1
        if not np.all(src | tgt):
            raise DataError("domain must be 0 or 1")
        # target labels live in [C, 2C) once anonymised
        lo = np.where(tgt & (self.class_permutation is not None), C, 0)
        if np.any(self.labels < lo) or np.any(self.labels >= lo + C):
            raise DataError("class labels outside the domain's label range")
        if num_states is not None and (self.ts.min() < 0 or self.ts.max() >= num_states):
            raise DataError("temporal state outside [0, T)")
        for key, idx in group_indices(self, by_class=False).items():
            if not np.array_equal(self.temporal_index[idx], np.arange(len(idx))):
                raise DataError(f"temporal_index not consecutive in group {key}")


def group_indices(ds: WindowedDataset, by_class: bool = True) -> dict[tuple, np.ndarray]:
    """Window indices per (domain, [class,] segment), each sorted by temporal index."""
    keys = [ds.domain, ds.segment] if not by_class else [ds.domain, ds.labels, ds.segment]
    order = np.lexsort([ds.temporal_index, *reversed(keys)])
    out: dict[tuple, list[int]] = {}
    for i in order:
        out.setdefault(tuple(int(k[i]) for k in keys), []).append(int(i))
    return {k: np.array(v) for k, v in out.items()}


def windowed_dataset_from_recordings(
    recordings: Iterable[SensorRecording],
    num_classes: int,
    activity_names: Sequence[str] = (),
    window_seconds: float = 3.0,
    overlap: float = 0.5,
) -> WindowedDataset:
    windows = []
    for rec in recordings:
        windows.extend(segment_windows(rec, window_seconds, overlap))
    return WindowedDataset.from_windows(windows, num_classes, activity_names)


def concat_domains(source: WindowedDataset, target: WindowedDataset) -> WindowedDataset:
    if source.num_classes != target.num_classes:
        raise DataError(f"class count mismatch: {source.num_classes} vs {target.num_classes}")
    if source.data.shape[1:] != target.data.shape[1:]:
        raise DataError("source and target windows differ in shape")
    if source.normalized != target.normalized:
        raise DataError("source and target must both be normalized, or neither")
    return replace(
        source,
        data=np.concatenate([source.data, target.data]),
        labels=np.concatenate([source.labels, target.labels]),
        domain=np.concatenate([np.zeros(len(source), int), np.ones(len(target), int)]),
        segment=np.concatenate([source.segment, target.segment]),
        temporal_index=np.concatenate([source.temporal_index, target.temporal_index]),
        ts=np.concatenate([source.ts, target.ts]),
        class_permutation=target.class_permutation,
    )


# ----------------------------------------------------------------------------
# normalisation and padding


def channel_stats(ds: WindowedDataset, eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over the source-domain windows of ``ds``."""
    src = ds.data[ds.domain == 0]
    if len(src) == 0:
        raise DataError("no source windows to take statistics from")
    mean = src.mean(axis=(0, 2))
    std = src.std(axis=(0, 2))
    if np.any(std < eps):
        warnings.warn("zero-variance channel; std clamped to epsilon", RuntimeWarning, stacklevel=2)
        std = np.maximum(std, eps)
    return mean, std


def normalize(
    ds: WindowedDataset,
    stats_from: WindowedDataset | tuple[np.ndarray, np.ndarray] | None = None,
) -> WindowedDataset:
    """Z-score every channel with source statistics.

    ``stats_from`` defaults to the source-domain windows of ``ds`` itself.
    """
    if ds.normalized:
        raise DataError("dataset is already normalized")
    if stats_from is None:
        mean, std = channel_stats(ds)
    elif isinstance(stats_from, WindowedDataset):
        mean, std = channel_stats(stats_from)
    else:
        mean, std = (np.asarray(a, dtype=np.float64) for a in stats_from)
    data = (ds.data - mean[None, :, None]) / std[None, :, None]
    return replace(ds, data=data, channel_mean=mean, channel_std=std, normalized=True, ts=ds.ts.copy())


def pad_window_length(ds: WindowedDataset, multiple: int = 4) -> WindowedDataset:
    """Edge-replicate the time axis up to the next multiple of ``multiple``."""
    extra = -ds.window_len % multiple
    if extra == 0:
        return ds
    data = np.pad(ds.data, ((0, 0), (0, 0), (0, extra)), mode="edge")
    return replace(ds, data=data, ts=ds.ts.copy())


# ----------------------------------------------------------------------------
# labels


def anonymize_target_classes(labels, num_classes: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Map true target classes onto ``[C, 2C)`` through a seeded permutation.

    Returns the anonymised labels and the permutation ``perm`` with
    ``anon = C + perm[label]``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"target label outside [0, {num_classes})")
    perm = np.random.default_rng(seed).permutation(num_classes)
    return num_classes + perm[labels], perm


def deanonymize_target_classes(anon, perm: np.ndarray) -> np.ndarray:
    C = len(perm)
    anon = np.asarray(anon, dtype=np.int64)
    if anon.size and (anon.min() < C or anon.max() >= 2 * C):
        raise ValueError(f"anonymised label outside [{C}, {2 * C})")
    return np.argsort(perm)[anon - C]


def compose_pseudo_label(ts, c, num_classes: int, num_states: int | None = None):
    """``ts * 2C + c``; works elementwise on arrays."""
    ts_a, c_a = np.asarray(ts), np.asarray(c)
    if np.any(c_a < 0) or np.any(c_a >= 2 * num_classes) or np.any(ts_a < 0):
        raise ValueError("pseudo label components out of range")
    if num_states is not None and np.any(ts_a >= num_states):
        raise ValueError("temporal state out of range")
    y = ts_a * 2 * num_classes + c_a
    return int(y) if np.ndim(y) == 0 else y


def decompose_pseudo_label(y, num_classes: int):
    """Inverse of :func:`compose_pseudo_label`, returning ``(ts, c)``."""
    y_a = np.asarray(y)
    if np.any(y_a < 0):
        raise ValueError("pseudo label must be non-negative")
    ts, c = np.divmod(y_a, 2 * num_classes)
    if np.ndim(y_a) == 0:
        return int(ts), int(c)
    return ts, c


# ----------------------------------------------------------------------------
# synthetic users


@dataclass
class UserTransform:
    mixing: np.ndarray  # [channels, channels]
    bias: np.ndarray  # [channels]
    noise_scale: float = 0.0

    def __post_init__(self):
        self.mixing = np.asarray(self.mixing, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if abs(np.linalg.det(self.mixing)) < 1e-10:
            raise ValueError("user mixing matrix must be invertible")

    @classmethod
    def identity(cls, channels: int, noise_scale: float = 0.0) -> "UserTransform":
        return cls(np.eye(channels), np.zeros(channels), noise_scale)


@dataclass
class SynthSpec:
    """Generative model: activities made of left-to-right sub-activity states.

    Each segment is one activity performed once, passing through states
    ``0 .. T_true-1`` in order, each held for a dwell time drawn uniformly
    from ``[dwell_min, dwell_max]`` windows. A window in state ``s`` of
    activity ``a`` has i.i.d. samples ``state_means[a, s] + state_scales[a, s] * eps``
    which each user maps through ``mixing @ x + bias`` plus their own noise.
    """

    state_means: np.ndarray  # [C, T_true, channels]
    state_scales: np.ndarray  # [C, T_true]
    users: list[UserTransform]
    segments_per_activity: int = 16
    dwell_min: int = 5
    dwell_max: int = 15
    window_len: int = 32
    sampling_rate: float = 32.0
    seed: int = 0
    user_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.state_means = np.asarray(self.state_means, dtype=np.float64)
        self.state_scales = np.broadcast_to(
            np.asarray(self.state_scales, dtype=np.float64), self.state_means.shape[:2]
        ).copy()
        if self.state_means.ndim != 3 or self.state_means.shape[1] < 1:
            raise ValueError("state_means must be [C, T_true >= 1, channels]")
        if self.dwell_min < 1 or self.dwell_max < self.dwell_min:
            raise ValueError("degenerate dwell distribution")
        if not self.user_names:
            self.user_names = tuple(f"U{i + 1}" for i in range(len(self.users)))

    @property
    def num_classes(self) -> int:
        return self.state_means.shape[0]

    @property
    def num_states(self) -> int:
        return self.state_means.shape[1]

    @property
    def num_channels(self) -> int:
        return self.state_means.shape[2]


def make_synth_spec(
    num_classes: int = 4,
    num_states: int = 3,
    num_channels: int = 6,
    num_users: int = 2,
    separation: float = 2.0,
    state_scale: float = 0.3,
    mixing_shift: float = 0.0,
    bias_shift: float = 0.0,
    noise_scale: float = 0.0,
    seed: int = 0,
    shared_states: bool = False,
    **kwargs,
) -> SynthSpec:
    """Random :class:`SynthSpec`; the first user is untransformed.

    ``mixing_shift`` perturbs other users' mixing matrices away from the
    identity and ``bias_shift`` scales their channel offsets. With
    ``shared_states`` every activity's state ``s`` adds the same offset to
    that activity's own mean, so a state index means the same phase in
    every activity; otherwise all state means are independent.
    """
    rng = np.random.default_rng(seed)
    if shared_states:
        activity = rng.normal(scale=separation, size=(num_classes, 1, num_channels))
        phase = rng.normal(scale=separation, size=(1, num_states, num_channels))
        means = (activity + phase) / math.sqrt(2)
    else:
        means = rng.normal(scale=separation, size=(num_classes, num_states, num_channels))
    users = [UserTransform.identity(num_channels, noise_scale)]
    for _ in range(num_users - 1):
        mix = np.eye(num_channels) + mixing_shift * rng.normal(size=(num_channels, num_channels)) / math.sqrt(num_channels)
        users.append(UserTransform(mix, bias_shift * rng.normal(size=num_channels), noise_scale))
    return SynthSpec(means, np.full((num_classes, num_states), state_scale), users, seed=seed, **kwargs)


class SyntheticUser(NamedTuple):
    dataset: WindowedDataset
    states: np.ndarray  # ground-truth sub-activity state per window
    recordings: list[SensorRecording]
    sample_states: list[np.ndarray]


class SyntheticData(NamedTuple):
    source: WindowedDataset
    target: WindowedDataset
    source_states: np.ndarray
    target_states: np.ndarray


def synthesize_users(spec: SynthSpec) -> dict[str, SyntheticUser]:
    """Generate every user in ``spec``; same spec, same arrays."""
    rng = np.random.default_rng(spec.seed)
    C, T, ch, L = spec.num_classes, spec.num_states, spec.num_channels, spec.window_len
    names = tuple(ACTIVITY_TABLES["oppt"][:C]) if C <= 4 else tuple(f"activity{i}" for i in range(C))
    out = {}
    for uname, tr in zip(spec.user_names, spec.users):
        windows, states, recs, sample_states = [], [], [], []
        seg = 0
        for a in range(C):
            for _ in range(spec.segments_per_activity):
                dwell = rng.integers(spec.dwell_min, spec.dwell_max + 1, size=T)
                seq = np.repeat(np.arange(T), dwell)
                n = len(seq)
                clean = spec.state_means[a, seq][:, :, None] + spec.state_scales[a, seq][:, None, None] * rng.normal(
                    size=(n, ch, L)
                )
                x = np.einsum("ij,njl->nil", tr.mixing, clean) + tr.bias[None, :, None]
                x = x + tr.noise_scale * rng.normal(size=x.shape)
                for i in range(n):
                    windows.append(Window(x[i], a, seg, i, user_id=uname))
                states.append(seq)
                recs.append(
                    SensorRecording(
                        uname, seg, spec.sampling_rate, np.concatenate(list(x), axis=1), np.full(n * L, a),
                        tuple(f"ch{i}" for i in range(ch)),
                    )
                )
                sample_states.append(np.repeat(seq, L))
                seg += 1
        ds = WindowedDataset.from_windows(windows, C, names)
        out[uname] = SyntheticUser(ds, np.concatenate(states), recs, sample_states)
    return out


def synthesize_dataset(spec: SynthSpec) -> SyntheticData:
    """Source = first user, target = second user (domain 1, true labels)."""
    if len(spec.users) < 2:
        raise ValueError("need at least two users")
    users = synthesize_users(spec)
    src, tgt = (users[n] for n in spec.user_names[:2])
    return SyntheticData(src.dataset, tgt.dataset.with_domain(1), src.states, tgt.states)


# ----------------------------------------------------------------------------
# task preparation


@dataclass
class PreparedTask:
    """Source and target merged into one normalised, padded, anonymised dataset."""

    dataset: WindowedDataset
    target_true_labels: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.dataset.num_classes

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.dataset.data, self.dataset.labels, self.dataset.domain, self.dataset.segment,
                    self.dataset.temporal_index):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def prepare_task(source: WindowedDataset, target: WindowedDataset, seed: int, pad_multiple: int = 4) -> PreparedTask:
    """Normalise both domains with source statistics, pad, and anonymise target classes."""
    src = source.with_domain(0)
    tgt = target.with_domain(1)
    mean, std = channel_stats(src)
    src, tgt = normalize(src, (mean, std)), normalize(tgt, (mean, std))
    true = tgt.labels.copy()
    anon, perm = anonymize_target_classes(true, tgt.num_classes, seed)
    tgt = replace(tgt, labels=anon, class_permutation=perm, ts=tgt.ts.copy())
    merged = pad_window_length(concat_domains(src, tgt), pad_multiple)
    merged.ts[:] = 0
    return PreparedTask(merged, true)
