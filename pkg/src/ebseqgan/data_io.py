"""Synthetic data, session-log ingestion and on-disk formats.

Session file
    UTF-8 CSV with header exactly ``user_id,timestamp,item_id``; integer
    timestamps.
Checkpoint file
    JSON object; parameters are written with ``float.hex`` so a load
    reproduces them bit for bit.  ``format_version`` is currently 1.
Metrics file
    CSV with the :data:`~ebseqgan.gan_trainer.METRIC_FIELDS` header; missing
    metrics are empty cells.
"""
from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gan_trainer import METRIC_FIELDS
from .maxent_il import DemoSet
from .numerics import make_rng
from .seq_models import (LinearEnergy, RecurrentEnergy, RecurrentGenerator, TabularGenerator,
                         Vocabulary, sample_batch)

FORMAT_VERSION = 1
SESSION_HEADER = ["user_id", "timestamp", "item_id"]
SMOOTHING_FLOOR = 1e-6


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class UnknownModelKindError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class SessionFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# synthetic ground truth


@dataclass(eq=False)
class MarkovOracle:
    vocab: Vocabulary
    initial: np.ndarray
    transition: np.ndarray
    seed: int

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def as_generator(self) -> TabularGenerator:
        params = np.concatenate([np.log(self.initial), np.log(self.transition).ravel()])
        return TabularGenerator(self.vocab_size, 1, params)

    def to_dict(self) -> dict:
        return {"vocab": list(self.vocab.tokens), "seed": self.seed,
                "initial": [float(x).hex() for x in self.initial],
                "transition": [[float(x).hex() for x in row] for row in self.transition]}

    @classmethod
    def from_dict(cls, d: dict) -> "MarkovOracle":
        return cls(Vocabulary(tuple(d["vocab"])),
                   np.array([float.fromhex(x) for x in d["initial"]]),
                   np.array([[float.fromhex(x) for x in row] for row in d["transition"]]),
                   int(d["seed"]))


def _smoothed_rows(draws: np.ndarray) -> np.ndarray:
    rows = draws / draws.sum(axis=-1, keepdims=True)
    rows = rows + SMOOTHING_FLOOR
    return rows / rows.sum(axis=-1, keepdims=True)


def make_markov_oracle(V: int, seed: int, concentration: float = 1.0) -> MarkovOracle:
    """Random first-order chain; every row is a normalized Gamma(concentration) draw."""
    if V < 2:
        raise ValueError("vocabulary must contain at least two items")
    if not concentration > 0:
        raise ValueError("concentration must be positive")
    rng = make_rng(seed)
    draws = rng.gamma(concentration, 1.0, size=(V + 1, V))
    rows = _smoothed_rows(draws)
    return MarkovOracle(Vocabulary.synthetic(V), rows[0], rows[1:], seed)


def sample_demos(oracle: MarkovOracle, n: int, T: int, seed: int) -> DemoSet:
    if n < 1:
        raise ValueError("need at least one demonstration")
    seqs, _ = sample_batch(oracle.as_generator(), n, T, make_rng(seed))
    return DemoSet(seqs, oracle.vocab_size)


# ---------------------------------------------------------------------------
# session logs


def ingest_sessions(path, T: int, stride: int = 1) -> tuple[DemoSet, Vocabulary]:
    """Turn a session CSV into fixed-length windows.

    Events are grouped by user, stably sorted by timestamp, and cut into
    windows of ``T`` items every ``stride`` events.  Users with fewer than
    ``T`` events are dropped.  Item ids follow first appearance in the file.
    """
    if T < 1 or stride < 1:
        raise ValueError("T and stride must be >= 1")
    path = Path(path)
    tokens: dict[str, int] = {}
    users: dict[str, list[tuple[int, int]]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SESSION_HEADER:
            raise SessionFormatError(f"{path}:1: header must be {','.join(SESSION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise SessionFormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            user, ts, item = row
            try:
                ts = int(ts)
            except ValueError:
                raise SessionFormatError(f"{path}:{lineno}: timestamp {ts!r} is not an integer") from None
            if not item:
                raise SessionFormatError(f"{path}:{lineno}: empty item id")
            idx = tokens.setdefault(item, len(tokens))
            users.setdefault(user, []).append((ts, idx))
    windows = []
    for events in users.values():
        items = [i for _, i in sorted(events, key=lambda e: e[0])]
        for start in range(0, len(items) - T + 1, stride):
            windows.append(items[start:start + T])
    if not windows:
        raise SessionFormatError(f"{path}: no session has at least {T} events")
    vocab = Vocabulary(tuple(tokens))
    return DemoSet(np.array(windows, dtype=np.int64), len(vocab)), vocab


def write_sessions(demos: DemoSet, vocab: Vocabulary, path) -> None:
    """Write each sequence as one user's session, timestamps 0..T-1."""
    rows = [SESSION_HEADER]
    for u, seq in enumerate(demos.seqs):
        rows.extend([str(u), str(t), vocab.tokens[i]] for t, i in enumerate(seq))
    _atomic_write(path, lambda fh: csv.writer(fh, lineterminator="\n").writerows(rows))


def write_sequences(seqs, vocab: Vocabulary, path=None, stream=None) -> None:
    """One sequence per line, tokens separated by spaces."""
    lines = "".join(" ".join(vocab.decode(s)) + "\n" for s in np.asarray(seqs))
    if path is None:
        stream.write(lines)
    else:
        _atomic_write(path, lambda fh: fh.write(lines))


def read_sequences(path, vocab: Vocabulary) -> DemoSet:
    seqs = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    seqs.append(vocab.encode(line.split()))
                except KeyError as exc:
                    raise SessionFormatError(f"{path}:{lineno}: {exc.args[0]}") from None
    if not seqs or len({len(s) for s in seqs}) != 1:
        raise SessionFormatError(f"{path}: expected non-empty, equal-length sequences")
    return DemoSet(np.array(seqs, dtype=np.int64), len(vocab))


# ---------------------------------------------------------------------------
# persistence


def _atomic_write(path, write) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


_KINDS = {
    ("generator", "tabular"): TabularGenerator,
    ("generator", "recurrent"): RecurrentGenerator,
    ("energy", "linear"): LinearEnergy,
    ("energy", "recurrent"): RecurrentEnergy,
}


def _kind_tag(model) -> str:
    for (role, kind), cls in _KINDS.items():
        if type(model) is cls:
            return f"{role}/{kind}"
    raise UnknownModelKindError(f"cannot checkpoint {type(model).__name__}")


def _dims(model) -> dict:
    if isinstance(model, TabularGenerator):
        return {"order": model.order, "time_indexed": model.time_indexed}
    if isinstance(model, (RecurrentGenerator, RecurrentEnergy)):
        return {"embed_dim": model.embed_dim, "hidden_dim": model.hidden_dim}
    return {}


@dataclass
class Checkpoint:
    model: object
    horizon: int | None = None
    vocab: Vocabulary | None = None
    seed: int | None = None


def save_checkpoint(model, path, *, horizon: int | None = None, vocab: Vocabulary | None = None,
                    seed: int | None = None) -> None:
    if isinstance(model, TabularGenerator) and model.time_indexed:
        horizon = model.horizon
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": _kind_tag(model),
        "vocab_size": model.vocab_size,
        "horizon": horizon,
        "dims": _dims(model),
        "seed": seed,
        "vocab": list(vocab.tokens) if vocab is not None else None,
        "n_params": int(model.params.size),
        "params": [float(x).hex() for x in model.params],
    }
    _atomic_write(path, lambda fh: json.dump(doc, fh, indent=1))


def load_checkpoint(path) -> Checkpoint:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TruncatedCheckpointError(f"{path}: unreadable checkpoint ({exc.msg})") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise TruncatedCheckpointError(f"{path}: missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format_version {doc['format_version']}, this build reads {FORMAT_VERSION}")
    role, _, kind = str(doc.get("kind", "")).partition("/")
    cls = _KINDS.get((role, kind))
    if cls is None:
        raise UnknownModelKindError(f"{path}: unknown model kind {doc.get('kind')!r}")
    try:
        params = np.array([float.fromhex(x) for x in doc["params"]])
        if params.size != doc["n_params"]:
            raise TruncatedCheckpointError(
                f"{path}: {params.size} parameters stored, header says {doc['n_params']}")
        kwargs = dict(doc["dims"])
        if cls is TabularGenerator and kwargs.get("time_indexed"):
            kwargs["horizon"] = doc["horizon"]
        model = cls(vocab_size=doc["vocab_size"], params=params, **kwargs)
    except KeyError as exc:
        raise TruncatedCheckpointError(f"{path}: missing field {exc.args[0]!r}") from None
    except ValueError as exc:
        raise TruncatedCheckpointError(f"{path}: {exc}") from None
    vocab = Vocabulary(tuple(doc["vocab"])) if doc.get("vocab") else None
    return Checkpoint(model, doc.get("horizon"), vocab, doc.get("seed"))


def save_oracle(oracle: MarkovOracle, path) -> None:
    _atomic_write(path, lambda fh: json.dump(oracle.to_dict(), fh, indent=1))


def load_oracle(path) -> MarkovOracle:
    return MarkovOracle.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(rows, path) -> None:
    def write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow([_cell(row.get(k)) for k in METRIC_FIELDS])
    _atomic_write(path, write)


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        out = []
        for row in reader:
            out.append({k: (None if row[k] == "" else (int(row[k]) if k == "iteration" else float(row[k])))
                        for k in METRIC_FIELDS})
        return out
