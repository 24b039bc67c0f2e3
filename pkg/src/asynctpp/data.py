"""Event-sequence data model, JSONL ingestion and synthetic generators."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "Event",
    "EventSequence",
    "TauScaler",
    "Dataset",
    "load_jsonl",
    "save_jsonl",
    "pad_and_mask",
    "standardize_tau",
    "HawkesParams",
    "simulate_hawkes",
    "simulate_poisson",
    "make_hawkes_dataset",
    "make_poisson_dataset",
]


class DataError(ValueError):
    """Malformed or contract-violating event data."""


@dataclass(frozen=True)
class Event:
    """One event: inter-event duration tau and categorical type k."""

    tau: float
    k: int


@dataclass
class EventSequence:
    """Chronologically ordered events; index i is the i-th event."""

    events: list[Event]

    def __len__(self) -> int:
        return len(self.events)

    def taus(self) -> np.ndarray:
        return np.array([e.tau for e in self.events], dtype=np.float64)

    def types(self) -> np.ndarray:
        return np.array([e.k for e in self.events], dtype=np.int64)


@dataclass(frozen=True)
class TauScaler:
    """Affine duration scaler; inversion clamps reconstructed taus at 0."""

    mean: float = 0.0
    std: float = 1.0

    def apply(self, tau):
        return (np.asarray(tau, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.maximum(np.asarray(z, dtype=np.float64) * self.std + self.mean, 0.0)


@dataclass
class Dataset:
    sequences: list[EventSequence]
    num_types: int
    max_len: int
    tau_scaler: TauScaler | None = None

    def validate(self) -> None:
        if self.num_types < 1 or self.max_len < 1:
            raise DataError("num_types and max_len must be positive")
        for si, seq in enumerate(self.sequences):
            if len(seq) < 1:
                raise DataError(f"sequence {si} is empty")
            if len(seq) > self.max_len:
                raise DataError(f"sequence {si} longer than max_len {self.max_len}")
            for e in seq.events:
                if not 0 <= e.k < self.num_types:
                    raise DataError(f"sequence {si}: type {e.k} outside [0, {self.num_types})")
                if e.tau < 0 and self.tau_scaler is None:
                    raise DataError(f"sequence {si}: negative duration {e.tau}")

    def all_events(self) -> tuple[np.ndarray, np.ndarray]:
        """All (taus, types) pooled across sequences."""
        taus = np.concatenate([s.taus() for s in self.sequences])
        types = np.concatenate([s.types() for s in self.sequences])
        return taus, types


def _parse_meta(obj: dict, where: str) -> tuple[int, int]:
    try:
        return int(obj["num_types"]), int(obj["max_len"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: meta must provide num_types and max_len") from exc


def _parse_line(obj: dict, lineno: int, num_types: int) -> EventSequence:
    taus = obj.get("taus")
    types = obj.get("types")
    if not isinstance(taus, list) or not isinstance(types, list):
        raise DataError(f"line {lineno}: expected 'taus' and 'types' arrays")
    if len(taus) != len(types):
        raise DataError(f"line {lineno}: taus ({len(taus)}) and types ({len(types)}) differ")
    if len(taus) == 0:
        raise DataError(f"line {lineno}: empty sequence")
    events = []
    for tau, k in zip(taus, types):
        tau = float(tau)
        k = int(k)
        if tau < 0:
            raise DataError(f"line {lineno}: negative duration {tau}")
        if not 0 <= k < num_types:
            raise DataError(f"line {lineno}: type {k} outside [0, {num_types})")
        events.append(Event(tau, k))
    return EventSequence(events)


def load_jsonl(path: str | Path) -> Dataset:
    """Load a JSON Lines dataset.

    Each data line is an object {"taus": [...], "types": [...]}. The meta
    object {"num_types": K, "max_len": N} comes from a companion file
    ``<path>.meta.json`` when present, otherwise from the first line.
    Sequences longer than N are split into non-overlapping chunks of
    length <= N.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    meta_path = Path(str(path) + ".meta.json")
    lines = path.read_text(encoding="utf-8").splitlines()
    start = 0
    if meta_path.exists():
        num_types, max_len = _parse_meta(json.loads(meta_path.read_text(encoding="utf-8")),
                                         str(meta_path))
    else:
        if not lines:
            raise DataError(f"{path}: empty file")
        try:
            head = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise DataError(f"line 1: invalid JSON: {exc}") from exc
        if "num_types" not in head:
            raise DataError(f"{path}: no meta header line and no {meta_path.name}")
        num_types, max_len = _parse_meta(head, "line 1")
        start = 1

    sequences: list[EventSequence] = []
    for lineno, raw in enumerate(lines[start:], start=start + 1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: invalid JSON: {exc}") from exc
        seq = _parse_line(obj, lineno, num_types)
        for chunk_start in range(0, len(seq), max_len):
            chunk = seq.events[chunk_start:chunk_start + max_len]
            sequences.append(EventSequence(chunk))
    ds = Dataset(sequences, num_types, max_len)
    ds.validate()
    return ds


def save_jsonl(path: str | Path, dataset: Dataset, meta_companion: bool = True) -> None:
    """Write a dataset in the JSONL format accepted by :func:`load_jsonl`."""
    path = Path(path)
    meta = {"num_types": dataset.num_types, "max_len": dataset.max_len}
    lines = []
    if not meta_companion:
        lines.append(json.dumps(meta))
    for seq in dataset.sequences:
        lines.append(json.dumps({"taus": [e.tau for e in seq.events],
                                 "types": [e.k for e in seq.events]}))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if meta_companion:
        Path(str(path) + ".meta.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")


def save_raw_jsonl(path: str | Path, sequences: list[EventSequence], num_types: int,
                   max_len: int) -> None:
    """Write unchunked sequences, one line each; meta goes to the companion
    file. Over-length sequences are split when the file is loaded."""
    path = Path(path)
    lines = [json.dumps({"taus": [e.tau for e in seq.events],
                         "types": [e.k for e in seq.events]})
             for seq in sequences]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {"num_types": num_types, "max_len": max_len}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")


def pad_and_mask(seq: EventSequence, n_max: int) -> tuple[list[Event], np.ndarray]:
    """Pad to length N with (tau=0, k=0) placeholders and return the validity mask."""
    n = len(seq)
    if n < 1:
        raise DataError("cannot pad an empty sequence")
    if n > n_max:
        raise DataError(f"sequence length {n} exceeds max length {n_max}")
    events = list(seq.events) + [Event(0.0, 0)] * (n_max - n)
    mask = np.zeros(n_max, dtype=np.float64)
    mask[:n] = 1.0
    return events, mask


def standardize_tau(dataset: Dataset) -> tuple[Dataset, TauScaler]:
    """Replace every tau by (tau - mean) / std over all events (population std)."""
    taus, _ = dataset.all_events()
    if taus.size < 2:
        raise DataError("need at least 2 events to standardize")
    mean = float(taus.mean())
    std = float(taus.std())
    if std == 0.0:
        raise DataError("zero duration variance; use the identity scaler instead")
    scaler = TauScaler(mean, std)
    sequences = [
        EventSequence([Event(float(scaler.apply(e.tau)), e.k) for e in seq.events])
        for seq in dataset.sequences
    ]
    return Dataset(sequences, dataset.num_types, dataset.max_len, scaler), scaler


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

@dataclass
class HawkesParams:
    """Multivariate Hawkes process with exponential kernels.

    Intensity of type k at time t:
        mu[k] + sum over past events j of alpha[k, k_j] * exp(-beta[k, k_j] (t - t_j))
    """

    mu: np.ndarray          # (K,) positive base rates
    alpha: np.ndarray       # (K, K) non-negative excitation
    beta: np.ndarray        # (K, K) positive decay

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        k = self.mu.shape[0]
        if self.alpha.shape != (k, k) or self.beta.shape != (k, k):
            raise DataError("alpha and beta must be K x K")
        if np.any(self.mu <= 0) or np.any(self.alpha < 0) or np.any(self.beta <= 0):
            raise DataError("need mu > 0, alpha >= 0, beta > 0")

    @property
    def num_types(self) -> int:
        return self.mu.shape[0]

    def branching_matrix(self) -> np.ndarray:
        return self.alpha / self.beta

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.branching_matrix()))))

    def check_stationary(self) -> None:
        rho = self.spectral_radius()
        if rho >= 1.0:
            raise DataError(f"non-stationary Hawkes parameters (spectral radius {rho:.3f} >= 1)")


def simulate_hawkes(params: HawkesParams, horizon: float,
                    rng: np.random.Generator) -> EventSequence:
    """Draw one realization on [0, horizon] via Ogata thinning.

    Returns the inter-event representation (first tau measured from 0).
    May be empty for tiny horizons; callers retry in that case.
    """
    params.check_stationary()
    if horizon <= 0:
        raise DataError("horizon must be positive")
    k_types = params.num_types
    # contrib[k, j]: summed kernel mass of past type-j events on channel k
    contrib = np.zeros((k_types, k_types))
    t = 0.0
    last_t = 0.0
    events: list[Event] = []
    while True:
        lam_upper = float(params.mu.sum() + contrib.sum())
        w = rng.exponential(1.0 / lam_upper)
        t += w
        if t > horizon:
            break
        contrib *= np.exp(-params.beta * w)
        lam = params.mu + contrib.sum(axis=1)
        total = float(lam.sum())
        u = rng.uniform(0.0, lam_upper)
        if u <= total:
            k = int(np.searchsorted(np.cumsum(lam), u))
            events.append(Event(t - last_t, k))
            last_t = t
            contrib[:, k] += params.alpha[:, k]
    return EventSequence(events)


def simulate_poisson(rate: float, horizon: float, rng: np.random.Generator) -> EventSequence:
    """Homogeneous single-type Poisson events on [0, horizon]."""
    if rate <= 0 or horizon <= 0:
        raise DataError("rate and horizon must be positive")
    events: list[Event] = []
    t = 0.0
    while True:
        w = rng.exponential(1.0 / rate)
        if t + w > horizon:
            break
        t += w
        events.append(Event(w, 0))
    return EventSequence(events)


def _collect_sequences(draw, n_seqs: int, max_retries: int = 100) -> list[EventSequence]:
    out = []
    retries = 0
    while len(out) < n_seqs:
        seq = draw()
        if len(seq) >= 2:
            out.append(seq)
        else:
            retries += 1
            if retries > max_retries:
                raise DataError("generator keeps producing near-empty sequences; "
                                "increase the horizon")
    return out


def make_hawkes_dataset(params: HawkesParams, horizon: float, n_seqs: int,
                        max_len: int, rng: np.random.Generator) -> Dataset:
    seqs = _collect_sequences(lambda: simulate_hawkes(params, horizon, rng), n_seqs)
    chunked = []
    for seq in seqs:
        for start in range(0, len(seq), max_len):
            chunk = seq.events[start:start + max_len]
            if chunk:
                chunked.append(EventSequence(chunk))
    ds = Dataset(chunked, params.num_types, max_len)
    ds.validate()
    return ds


def make_poisson_dataset(rate: float, horizon: float, n_seqs: int, max_len: int,
                         rng: np.random.Generator) -> Dataset:
    seqs = _collect_sequences(lambda: simulate_poisson(rate, horizon, rng), n_seqs)
    chunked = []
    for seq in seqs:
        for start in range(0, len(seq), max_len):
            chunk = seq.events[start:start + max_len]
            if chunk:
                chunked.append(EventSequence(chunk))
    ds = Dataset(chunked, 1, max_len)
    ds.validate()
    return ds
