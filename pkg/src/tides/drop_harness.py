"""Random-drop generalization harness.

Models train on sequences with a fresh random fraction ``r_train`` of time
steps removed at every step, keeping the original timestamps, and are then
evaluated on fixed subsamples at other rates ``r_test``. Six variants differ
only in which SSM components are input-dependent.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Adam, rng_stream, value_and_grad
from .block import ModelConfig, SequenceModel, cross_entropy, model_param_count
from .fading_flash import RATES, compute_target, FlashSequence

R_TEST_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


class IngestError(ValueError):
    pass


@dataclass
class TimestampedSeries:
    values: np.ndarray  # (L, C)
    timestamps: np.ndarray  # (L,)
    label: int
    series_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.timestamps.shape[0]:
            raise ValueError("values must be (L, C) with one timestamp per row")
        if self.timestamps.size < 2:
            raise ValueError("a series needs at least two observations")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError(f"timestamps of series {self.series_id!r} are not strictly increasing")

    def __len__(self) -> int:
        return self.timestamps.size

    def gaps(self) -> np.ndarray:
        """t_{k+1} - t_k, length L - 1."""
        return np.diff(self.timestamps)

    def step_deltas(self) -> np.ndarray:
        """Per-step elapsed time t_k - t_{k-1}; the first step reuses the first gap."""
        d = self.gaps()
        return np.concatenate([d[:1], d])


@dataclass(frozen=True)
class DropPlan:
    kept_indices: np.ndarray
    rate: float
    mode: str


def kept_count(r: float, length: int) -> int:
    """round((1 - r) L), halves rounded away from zero."""
    return int(math.floor((1.0 - r) * length + 0.5))


def sample_drop(
    rng: np.random.Generator | None,
    r: float,
    length: int,
    mode: str = "fresh",
    seed: int = 0,
    series_id: str | int = 0,
) -> DropPlan:
    """Uniform subset of indices kept after dropping a fraction ``r``.

    ``fresh`` draws from ``rng``; ``fixed`` ignores it and derives the plan
    from (seed, series_id, r) alone.
    """
    if not 0.0 <= r < 1.0:
        raise ValueError(f"drop rate must lie in [0, 1), got {r}")
    if length < 4:
        raise ValueError("sequences shorter than 4 cannot be subsampled")
    n = kept_count(r, length)
    if n < 2:
        raise ValueError(f"drop rate {r} keeps {n} of {length} steps; at least 2 are needed")
    if mode == "fixed":
        rng = rng_stream(seed, "drop-plan", str(series_id), repr(float(r)))
    elif mode != "fresh":
        raise ValueError(f"unknown drop mode {mode!r}")
    if rng is None:
        raise ValueError("fresh drop plans need a random generator")
    kept = np.sort(rng.choice(length, size=n, replace=False))
    return DropPlan(kept, float(r), mode)


def apply_drop(series: TimestampedSeries, plan: DropPlan) -> TimestampedSeries:
    idx = plan.kept_indices
    if idx.size and (idx.min() < 0 or idx.max() >= len(series)):
        raise IndexError(f"drop plan index out of range for series of length {len(series)}")
    return TimestampedSeries(series.values[idx], series.timestamps[idx], series.label, series.series_id)


# --------------------------------------------------------------------------
# variants

@dataclass(frozen=True)
class VariantSpec:
    name: str
    id_re_lambda: bool
    id_im_lambda: bool
    id_bc: bool
    id_delta: bool
    H: int

    @property
    def flags(self) -> tuple[bool, bool, bool, bool]:
        return (self.id_re_lambda, self.id_im_lambda, self.id_bc, self.id_delta)


VARIANTS = {
    "s5": VariantSpec("s5", False, False, False, False, 80),
    "mamba": VariantSpec("mamba", False, False, True, True, 16),
    "tides": VariantSpec("tides", True, False, True, False, 16),
    "tides_lambda": VariantSpec("tides_lambda", True, False, False, False, 80),
    "tides_bc": VariantSpec("tides_bc", False, False, True, False, 16),
    "tides_full": VariantSpec("tides_full", True, True, True, False, 16),
}
_KNOWN_FLAGS = {v.flags for v in VARIANTS.values()}

# shared settings: one bidirectional ZOH layer, P = 16
BC_RANK = 16
FF_MULT = 1.0


def variant_config(spec: VariantSpec, d_input: int, n_classes: int, states: int = 16) -> ModelConfig:
    if spec.flags not in _KNOWN_FLAGS:
        raise ValueError(f"variant {spec.name!r} has an unknown input-dependence combination {spec.flags}")
    return ModelConfig(
        d_input=d_input + (1 if spec.id_delta else 0),
        H=spec.H,
        layers=1,
        ssm_mult=states,
        bidir=True,
        disc="zoh",
        id_re_lambda=spec.id_re_lambda,
        id_im_lambda=spec.id_im_lambda,
        id_bc=spec.id_bc,
        delta_mode="learned" if spec.id_delta else "physical",
        bc_rank=BC_RANK,
        ff_mult=FF_MULT,
        task="classification",
        n_out=n_classes,
    )


def variant_param_count(spec: VariantSpec, d_input: int, n_classes: int, states: int = 16) -> int:
    return model_param_count(variant_config(spec, d_input, n_classes, states))


def build_variant(spec: VariantSpec, d_input: int, n_classes: int, rng: np.random.Generator, states: int = 16) -> SequenceModel:
    return SequenceModel(variant_config(spec, d_input, n_classes, states), rng)


def model_inputs(spec: VariantSpec, batch: Sequence[TimestampedSeries]) -> tuple[np.ndarray, np.ndarray]:
    """Stack a batch into (values, deltas); learned-step variants get delta as a channel."""
    values = np.stack([s.values for s in batch])
    deltas = np.stack([s.step_deltas() for s in batch])
    if spec.id_delta:
        values = np.concatenate([values, deltas[..., None]], axis=-1)
    return values, deltas


# --------------------------------------------------------------------------
# datasets

def ingest_csv(path: str | Path) -> list[TimestampedSeries]:
    """Read ``series_id,timestamp,label,c0,c1,...`` rows into series."""
    path = Path(path)
    rows: dict[str, list[tuple[float, int, list[float], int]]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: missing header row") from None
        if header[:3] != ["series_id", "timestamp", "label"] or len(header) < 4:
            raise IngestError(f"{path}: header must start with series_id,timestamp,label and list channels")
        n_ch = len(header) - 3
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_ch + 3:
                raise IngestError(f"{path}:{lineno}: expected {n_ch} channels, found {len(row) - 3}")
            try:
                t, label = float(row[1]), int(row[2])
                vals = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from None
            rows.setdefault(row[0], []).append((t, label, vals, lineno))
    dataset = []
    for sid, items in rows.items():
        items.sort(key=lambda it: it[0])
        ts = np.array([it[0] for it in items])
        dup = np.flatnonzero(np.diff(ts) == 0)
        if dup.size:
            raise IngestError(f"{path}: series {sid!r} has duplicate timestamp {ts[dup[0]]} (line {items[dup[0] + 1][3]})")
        labels = {it[1] for it in items}
        if len(labels) != 1:
            raise IngestError(f"{path}: series {sid!r} has conflicting labels {sorted(labels)}")
        dataset.append(TimestampedSeries(np.array([it[2] for it in items]), ts, labels.pop(), sid))
    return dataset


SYNTH_LENGTH = 200
SYNTH_CLOCK = 0.03
FIRST_ZONE = (0.7, 0.85)  # fraction of the series covered by the labelled zone


def synth_series(rng: np.random.Generator, label: int, series_id: str, length: int = SYNTH_LENGTH) -> TimestampedSeries:
    """Glow driven by a uniform random flash every step of the first zone, then left to fade.

    While driven, the glow hovers near 0.5 / (rate * clock), so any sample of the
    first zone carries the label. The undriven tail fades at a different rate.
    """
    first_end = int(rng.integers(int(FIRST_ZONE[0] * length), int(FIRST_ZONE[1] * length) + 1))
    tail_rate = int(rng.choice([z for z in range(len(RATES)) if z != label]))
    edges = np.array([0, first_end, length])
    zones = np.repeat([label, tail_rate], np.diff(edges))
    flashes = np.zeros(length)
    flashes[:first_end] = rng.uniform(0.0, 1.0, first_end)
    seq = FlashSequence(flashes, zones, edges, SYNTH_CLOCK)
    glow = compute_target(seq) / SYNTH_CLOCK
    return TimestampedSeries(glow[:, None], np.arange(length, dtype=np.float64), label, series_id)


def synth_classification(rng: np.random.Generator, n: int, classes: int = 3, prefix: str = "s") -> list[TimestampedSeries]:
    """Class-balanced synthetic dataset, labels cycling 0..classes-1 then shuffled."""
    if n < classes:
        raise ValueError("need at least one series per class")
    if classes > len(RATES):
        raise ValueError(f"at most {len(RATES)} classes are available")
    labels = rng.permutation(np.arange(n) % classes)
    return [synth_series(rng, int(lab), f"{prefix}{i}") for i, lab in enumerate(labels)]


def decay_fit_classifier(series: TimestampedSeries) -> int:
    """Oracle: fit the driven zone's decay rate and snap it to the nearest class rate.

    While driven, h_k = a h_{k-1} + b p_k with p_k >= 0, so every step ratio
    is at least a = exp(-rate dt). The largest per-unit-time rate implied by
    any ratio therefore approaches the true rate from below.
    """
    t = series.timestamps
    y = series.values[:, 0]
    keep = (t[1:] < FIRST_ZONE[0] * SYNTH_LENGTH) & (y[:-1] > 0) & (y[1:] > 0)
    rates = -np.log(y[1:][keep] / y[:-1][keep]) / (np.diff(t)[keep] * SYNTH_CLOCK)
    if rates.size == 0:
        raise ValueError(f"series {series.series_id!r} has no driven steps to fit")
    return int(np.argmin(np.abs(RATES - rates.max())))


# --------------------------------------------------------------------------
# sweep

@dataclass
class SweepRow:
    spec: str
    seed: int
    r_train: float
    r_test: float
    accuracy: float


def _check_equal_lengths(dataset: Sequence[TimestampedSeries]) -> int:
    lengths = {len(s) for s in dataset}
    if len(lengths) != 1:
        raise ValueError(f"the sweep needs equal-length series, found lengths {sorted(lengths)}")
    return lengths.pop()


def train_variant(
    spec: VariantSpec,
    train: Sequence[TimestampedSeries],
    n_classes: int,
    seed: int,
    r_train: float = 0.5,
    epochs: int = 400,
    batch: int = 16,
    lr: float = 1e-3,
    weight_decay: float = 0.1,
) -> SequenceModel:
    """Adam with decoupled weight decay; fresh drop plans for every batch element."""
    length = _check_equal_lengths(train)
    d_input = train[0].values.shape[1]
    model = build_variant(spec, d_input, n_classes, rng_stream(seed, "droprate", spec.name, "init"))
    order_rng = rng_stream(seed, "droprate", spec.name, "order")
    drop_rng = rng_stream(seed, "droprate", spec.name, "drops")
    dropout_rng = rng_stream(seed, "droprate", spec.name, "dropout")
    opt = Adam(lr=lr, weight_decay=weight_decay)
    params = model.params
    for epoch in range(epochs):
        order = order_rng.permutation(len(train))
        for start in range(0, len(order), batch):
            items = [apply_drop(train[i], sample_drop(drop_rng, r_train, length)) for i in order[start : start + batch]]
            values, deltas = model_inputs(spec, items)
            labels = np.array([s.label for s in items])

            def loss_fn(p):
                return cross_entropy(model(p, values, deltas, train=True, rng=dropout_rng), labels)

            loss, grads = value_and_grad(loss_fn, params)
            if not math.isfinite(loss):
                raise FloatingPointError(f"{spec.name}: non-finite loss in epoch {epoch}")
            params = opt.step(params, grads)
    model.params = params
    return model


def evaluate_variant(
    model: SequenceModel,
    spec: VariantSpec,
    test: Sequence[TimestampedSeries],
    r_test: float,
    seed: int,
    batch: int = 64,
) -> float:
    """Accuracy on fixed per-seed drop plans at rate ``r_test``."""
    length = _check_equal_lengths(test)
    items = [apply_drop(s, sample_drop(None, r_test, length, "fixed", seed, s.series_id)) for s in test]
    correct = 0
    for start in range(0, len(items), batch):
        chunk = items[start : start + batch]
        values, deltas = model_inputs(spec, chunk)
        logits = model(model.params, values, deltas, train=False).data
        correct += int(np.sum(logits.argmax(axis=-1) == np.array([s.label for s in chunk])))
    return correct / len(items)


def _run_cell(args) -> list[SweepRow]:
    spec, seed, train, test, n_classes, r_train, r_test_grid, epochs, batch, lr, weight_decay = args
    model = train_variant(spec, train, n_classes, seed, r_train, epochs, batch, lr, weight_decay)
    return [SweepRow(spec.name, seed, r_train, r, evaluate_variant(model, spec, test, r, seed)) for r in r_test_grid]


def run_sweep(
    train: Sequence[TimestampedSeries],
    test: Sequence[TimestampedSeries],
    specs: Iterable[VariantSpec],
    r_train: float = 0.5,
    r_test_grid: Sequence[float] = R_TEST_GRID,
    seeds: Sequence[int] = (0, 1, 2),
    epochs: int = 400,
    batch: int = 16,
    lr: float = 1e-3,
    weight_decay: float = 0.1,
    progress=None,
    workers: int = 1,
) -> list[SweepRow]:
    """Train every (spec, seed) cell at ``r_train`` and score it on each ``r_test``.

    Cells own their random streams, so ``workers > 1`` (separate processes)
    gives the same rows as a serial run.
    """
    if not train or not test:
        raise ValueError("train and test sets must be non-empty")
    for r in (r_train, *r_test_grid):
        if not 0.0 <= r < 1.0:
            raise ValueError(f"drop rate {r} outside [0, 1)")
    n_classes = max(s.label for s in (*train, *test)) + 1
    cells = [
        (spec, seed, train, test, n_classes, r_train, tuple(r_test_grid), epochs, batch, lr, weight_decay)
        for spec in specs
        for seed in seeds
    ]
    rows: list[SweepRow] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_run_cell, cells)
            for cell, cell_rows in zip(cells, results):
                rows.extend(cell_rows)
                if progress is not None:
                    progress(cell[0].name, cell[1], cell_rows)
        return rows
    for cell in cells:
        cell_rows = _run_cell(cell)
        rows.extend(cell_rows)
        if progress is not None:
            progress(cell[0].name, cell[1], cell_rows)
    return rows


def summarize(rows: Sequence[SweepRow]) -> dict[str, dict[float, float]]:
    """Mean accuracy over seeds, keyed by spec then r_test."""
    acc: dict[str, dict[float, list[float]]] = {}
    for row in rows:
        acc.setdefault(row.spec, {}).setdefault(row.r_test, []).append(row.accuracy)
    return {s: {r: float(np.mean(v)) for r, v in by_r.items()} for s, by_r in acc.items()}


LTI_FLAT = 0.02  # all-LTI accuracy spread across r_test
TIDES_DROP = 0.10  # allowed TIDES loss from r_test = r_train to the sparsest rate
GATE_DROP = 0.15  # required learned-gate loss at the sparsest rate


def pattern_checks(summary: dict[str, dict[float, float]], r_train: float = 0.5) -> dict[str, bool]:
    """Flat all-LTI row, near-flat TIDES row, collapsing learned-gate row."""
    out = {}
    sparse = max(next(iter(summary.values())).keys()) if summary else None
    if "s5" in summary:
        accs = list(summary["s5"].values())
        out["lti_flat"] = max(accs) - min(accs) < LTI_FLAT
    if "tides" in summary and r_train in summary["tides"]:
        out["tides_robust"] = summary["tides"][r_train] - summary["tides"][sparse] < TIDES_DROP
    if "mamba" in summary and r_train in summary["mamba"]:
        out["gate_collapse"] = summary["mamba"][r_train] - summary["mamba"][sparse] >= GATE_DROP
    return out


def split_dataset(dataset: Sequence[TimestampedSeries], test_fraction: float, rng: np.random.Generator):
    """Random train/test partition with at least one series on each side."""
    if len(dataset) < 2:
        raise ValueError("need at least two series to split into train and test")
    order = rng.permutation(len(dataset))
    n_test = min(max(1, int(round(test_fraction * len(dataset)))), len(dataset) - 1)
    test = [dataset[i] for i in order[:n_test]]
    train = [dataset[i] for i in order[n_test:]]
    return train, test
