"""File formats and reproducible run configuration.

Sample sets travel as a one-line JSON header followed by one whitespace
record per sample; models and reports are JSON documents; photoelectron
traces are two-column CSV.  All reals are serialized with 17 significant
digits so that a write/read cycle is lossless.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .fit import FitConfig
from .model import ApproxModel, GaussianComponent, ModelError, ParamSpace, SampleSet
from .muons import AugerChainConfig, PECountSignal, PulseShape
from .sinusoid import SinChainConfig

__all__ = [
    "StorageError",
    "RunConfig",
    "write_samples",
    "read_samples",
    "write_model",
    "read_model",
    "write_report",
    "write_pe_signal",
    "read_pe_signal",
    "spawn_seeds",
]

SAMPLES_FORMAT = "transdim-samples"
MODEL_FORMAT = "transdim-model"
FORMAT_VERSION = 1


class StorageError(ModelError):
    """Malformed file, wrong version, or invalid configuration document."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# sample sets
# ---------------------------------------------------------------------------


def write_samples(samples: SampleSet, path) -> None:
    """Persist a SampleSet: JSON header line, then one record per sample."""
    header = {
        "format": SAMPLES_FORMAT,
        "version": FORMAT_VERSION,
        "d": samples.space.dim,
        "bounds": [[float(lo), float(hi)] for lo, hi in samples.space.bounds],
        "provenance": samples.provenance,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples.samples:
            flat = s.components.reshape(-1)
            if not np.all(np.isfinite(flat)):
                raise StorageError("refusing to write non-finite sample values")
            fh.write(" ".join([str(s.k)] + [_fmt(v) for v in flat]) + "\n")


def read_samples(path) -> SampleSet:
    """Stream a samples file back into a SampleSet.

    Errors carry the 1-based line number of the offending record.
    """
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise StorageError("empty file: missing header")
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise StorageError(f"line 1: header is not valid JSON ({exc})") from None
        if header.get("format") != SAMPLES_FORMAT:
            raise StorageError(f"line 1: not a {SAMPLES_FORMAT} file")
        if header.get("version") != FORMAT_VERSION:
            raise StorageError(
                f"line 1: unsupported version {header.get('version')!r}"
            )
        try:
            d = int(header["d"])
            bounds = np.array(
                [[float(lo), float(hi)] for lo, hi in header["bounds"]]
            )
            space = ParamSpace(bounds)
        except (KeyError, TypeError, ValueError, ModelError) as exc:
            raise StorageError(f"line 1: bad header fields ({exc})") from None
        if space.dim != d:
            raise StorageError("line 1: bounds do not match the declared dimension")

        raw: list[np.ndarray] = []
        for lineno, line in enumerate(fh, start=2):
            tokens = line.split()
            if not tokens:
                continue
            try:
                k = int(tokens[0])
                values = [float(t) for t in tokens[1:]]
            except ValueError:
                raise StorageError(f"line {lineno}: malformed record") from None
            if k < 0 or len(values) != k * d:
                raise StorageError(
                    f"line {lineno}: expected {0 if k < 0 else k * d} values for k={tokens[0]}, got {len(values)}"
                )
            if not all(math.isfinite(v) for v in values):
                raise StorageError(f"line {lineno}: non-finite value")
            raw.append(np.array(values).reshape(k, d))
        return SampleSet.ingest(space, raw, header.get("provenance") or {})


# ---------------------------------------------------------------------------
# models and reports
# ---------------------------------------------------------------------------


def write_model(model: ApproxModel, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "bounds": [[float(lo), float(hi)] for lo, hi in model.space.bounds],
        "lam": float(model.lam),
        "components": [
            {
                "mu": [float(v) for v in c.mu],
                "sigma2": [float(v) for v in c.sigma2],
                "pi": float(c.pi),
            }
            for c in model.components
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_model(path) -> ApproxModel:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise StorageError(f"model file is not valid JSON ({exc})") from None
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != FORMAT_VERSION:
        raise StorageError("not a supported model file")
    try:
        space = ParamSpace(np.array(doc["bounds"], dtype=float))
        comps = [
            GaussianComponent(
                np.array(c["mu"], dtype=float),
                np.array(c["sigma2"], dtype=float),
                float(c["pi"]),
            )
            for c in doc["components"]
        ]
        return ApproxModel(space, comps, float(doc["lam"]))
    except (KeyError, TypeError, ValueError, ModelError) as exc:
        raise StorageError(f"bad model document ({exc})") from None


def write_report(report_dict: dict, path) -> None:
    doc = {"format": "transdim-report", "version": FORMAT_VERSION, **report_dict}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# photoelectron traces
# ---------------------------------------------------------------------------


def write_pe_signal(signal: PECountSignal, path) -> None:
    """Two-column CSV (bin index, count) with the geometry in a comment."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# t0={_fmt(signal.t0)} t_delta={_fmt(signal.t_delta)}\n")
        writer = csv.writer(fh)
        writer.writerow(["bin", "count"])
        for i, c in enumerate(signal.counts):
            writer.writerow([i, int(c)])


def read_pe_signal(path) -> PECountSignal:
    with open(path, "r", encoding="utf-8") as fh:
        comment = fh.readline().strip()
        t0, t_delta = 0.0, 25.0
        if comment.startswith("#"):
            try:
                parts = dict(p.split("=", 1) for p in comment[1:].split())
                t0 = float(parts.get("t0", t0))
                t_delta = float(parts.get("t_delta", t_delta))
            except (ValueError, TypeError):
                raise StorageError("malformed geometry comment") from None
            rows = list(csv.reader(fh))
        else:
            rows = list(csv.reader([comment])) + list(csv.reader(fh))
        if not rows or rows[0] != ["bin", "count"]:
            raise StorageError("missing 'bin,count' header row")
        counts = []
        for lineno, row in enumerate(rows[1:], start=1):
            if not row:
                continue
            try:
                idx, val = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise StorageError(f"record {lineno}: malformed row {row!r}") from None
            if idx != len(counts):
                raise StorageError(f"record {lineno}: bins out of order")
            counts.append(val)
        try:
            return PECountSignal(np.array(counts, dtype=np.int64), t0, t_delta)
        except ModelError as exc:
            raise StorageError(str(exc)) from None


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


_SIN_SIGNAL_KEYS = {"k", "omega", "energies", "phases", "snr_db", "n", "seed"}
_AUGER_SIGNAL_KEYS = {"muons", "n_bins", "t0", "t_delta", "rise_time", "decay", "seed"}


def _config_field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def spawn_seeds(master: int, count: int) -> list[int]:
    """Deterministic per-replicate seeds derived from one master seed."""
    seqs = np.random.SeedSequence(master).spawn(count)
    return [int(s.generate_state(1, dtype=np.uint64)[0]) for s in seqs]


@dataclass(frozen=True)
class RunConfig:
    """One experiment, fully described: signal, chain, and fit settings.

    The canonical JSON form (sorted keys, no whitespace) is stable across
    processes, so its digest identifies a run.
    """

    experiment: str
    signal: dict = field(default_factory=dict)
    chain: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    seed: int | None = None

    _TOP_KEYS = ("experiment", "signal", "chain", "fit", "seed")

    def __post_init__(self):
        if self.experiment not in ("sin", "auger"):
            raise StorageError(f"unknown experiment {self.experiment!r}")
        chain_cls = SinChainConfig if self.experiment == "sin" else AugerChainConfig
        allowed_chain = _config_field_names(chain_cls)
        unknown = set(self.chain) - allowed_chain
        if unknown:
            raise StorageError(f"unknown chain keys: {sorted(unknown)}")
        allowed_signal = _SIN_SIGNAL_KEYS if self.experiment == "sin" else _AUGER_SIGNAL_KEYS
        unknown = set(self.signal) - allowed_signal
        if unknown:
            raise StorageError(f"unknown signal keys: {sorted(unknown)}")
        unknown = set(self.fit) - _config_field_names(FitConfig)
        if unknown:
            raise StorageError(f"unknown fit keys: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise StorageError("configuration must be a JSON object")
        unknown = set(doc) - set(cls._TOP_KEYS)
        if unknown:
            raise StorageError(f"unknown configuration keys: {sorted(unknown)}")
        if "experiment" not in doc:
            raise StorageError("configuration needs an 'experiment' entry")
        return cls(
            experiment=doc["experiment"],
            signal=dict(doc.get("signal") or {}),
            chain=dict(doc.get("chain") or {}),
            fit=dict(doc.get("fit") or {}),
            seed=doc.get("seed"),
        )

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "signal": dict(self.signal),
            "chain": dict(self.chain),
            "fit": dict(self.fit),
            "seed": self.seed,
        }

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def chain_config(self, seed: int | None = None):
        kwargs = dict(self.chain)
        if seed is not None:
            kwargs["rng_seed"] = seed
        elif "rng_seed" not in kwargs and self.seed is not None:
            kwargs["rng_seed"] = self.seed
        if self.experiment == "sin":
            if "init_omega" in kwargs:
                kwargs["init_omega"] = tuple(kwargs["init_omega"])
            return SinChainConfig(**kwargs)
        if "pulse" in kwargs and isinstance(kwargs["pulse"], dict):
            kwargs["pulse"] = PulseShape(**kwargs["pulse"])
        if "init_muons" in kwargs:
            kwargs["init_muons"] = tuple(tuple(m) for m in kwargs["init_muons"])
        return AugerChainConfig(**kwargs)

    def fit_config(self, seed: int | None = None) -> FitConfig:
        kwargs = dict(self.fit)
        if seed is not None:
            kwargs["rng_seed"] = seed
        return FitConfig(**kwargs)
