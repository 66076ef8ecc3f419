"""Per-datapoint sampler stores in three memory regimes and the ratio
gradient estimators built from them.

All estimators target E_posterior[f] with f(z) = -d log q(z|x) / d(parameters)
(the per-datapoint gradient of the inclusive KL). Run weights are kept in log
domain; the ratio of evidence-weighted numerator to running evidence mean is
formed as a difference of logs before a single exponentiation, so every
estimator is invariant to rescaling all evidence estimates by a common factor.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import as_generator
from .smc import SmcRunRecord

__all__ = [
    "SamplerStore",
    "GradientEstimate",
    "EmptyStoreError",
    "store_append",
    "grad_estimate_a",
    "grad_estimate_b",
    "grad_estimate_c",
    "grad_estimate_naive",
    "subsample_records",
    "save_store",
    "load_store",
]

STORE_FORMAT_VERSION = 1


class EmptyStoreError(RuntimeError):
    """A gradient estimate was requested before any sampler run was stored."""


@dataclass
class GradientEstimate:
    """Gradient vector plus provenance metadata."""

    vector: np.ndarray
    estimator: str
    runs_used: int
    weight_entropy: float


@dataclass
class SamplerStore:
    """Archive of LT-SMC run outputs for one datapoint.

    mode "a" keeps whole records (O(M K) memory), mode "b" keeps one
    categorically drawn atom plus the evidence estimate per run (O(M)),
    mode "c" keeps only the latest record(s) in a short window (O(K),
    independent of M). The running evidence mean is a streaming
    log-mean-exp in every mode.
    """

    datapoint_index: int
    mode: str = "a"
    window: int | None = None
    run_count: int = 0
    log_evidence_sum: float = -np.inf  # logsumexp of stored log evidences
    records: list = field(default_factory=list)
    atoms: list = field(default_factory=list)
    atom_log_evidences: list = field(default_factory=list)
    latest: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.mode not in ("a", "b", "c"):
            raise ValueError("store mode must be 'a', 'b', or 'c'")
        maxlen = 1 if self.window is None else int(self.window)
        self.latest = deque(self.latest, maxlen=maxlen)

    @property
    def log_evidence_mean(self) -> float:
        """log of the arithmetic running mean of the evidence estimates."""
        if self.run_count == 0:
            raise EmptyStoreError(f"store for datapoint {self.datapoint_index} is empty")
        return self.log_evidence_sum - np.log(self.run_count)


def store_append(store: SamplerStore, record: SmcRunRecord, rng=None) -> SamplerStore:
    """Append one run: bump the count, fold the evidence into the running
    mean, and retain whatever the memory regime keeps."""
    store.run_count += 1
    store.log_evidence_sum = float(np.logaddexp(store.log_evidence_sum, record.log_evidence))
    if store.mode == "a":
        store.records.append(record)
    elif store.mode == "b":
        store.atoms.append(record.draw_atom(as_generator(rng)))
        store.atom_log_evidences.append(record.log_evidence)
    else:
        store.latest.append(record)
    return store


def _evidence_softmax(log_evidences: np.ndarray) -> np.ndarray:
    lw = log_evidences - np.max(log_evidences)
    w = np.exp(lw)
    return w / w.sum()


def _entropy(weights: np.ndarray) -> float:
    w = weights[weights > 0]
    return float(-np.sum(w * np.log(w)))


def _records_grad(records, run_weights, encoder, x) -> np.ndarray:
    """-sum_m lambda_m sum_k w_mk d log q(z_mk|x) in one backward pass."""
    zs = np.concatenate([r.atoms for r in records], axis=0)
    coeffs = np.concatenate([-lam * r.weights for lam, r in zip(run_weights, records)])
    return encoder.score_grad(x, zs, coeffs)


def grad_estimate_a(store: SamplerStore, encoder, x, m_star: int | None = None,
                    rng=None) -> GradientEstimate:
    """Evidence-weighted convex combination of the per-run weighted-atom
    estimates (the full-records estimator).

    With ``m_star`` set, runs are first resampled evidence-proportionally
    (with replacement) and then evenly averaged, which keeps minibatch
    shapes fixed while estimating the same quantity.
    """
    if store.mode != "a":
        raise ValueError("estimator 'a' needs a full-records store (mode 'a')")
    if store.run_count == 0:
        raise EmptyStoreError(f"store for datapoint {store.datapoint_index} is empty")
    if m_star is not None and store.run_count > m_star:
        records = subsample_records(store, m_star, rng, mode="evidence")
        lam = np.full(len(records), 1.0 / len(records))
    else:
        records = store.records
        lam = _evidence_softmax(np.array([r.log_evidence for r in records]))
    vec = _records_grad(records, lam, encoder, x)
    return GradientEstimate(vec, "a", store.run_count, _entropy(lam))


def grad_estimate_b(store: SamplerStore, encoder, x, rng=None) -> GradientEstimate:
    """Evidence-weighted average of f at one retained atom per run."""
    if store.run_count == 0:
        raise EmptyStoreError(f"store for datapoint {store.datapoint_index} is empty")
    if store.mode == "b":
        zs = np.asarray(store.atoms)
        log_es = np.asarray(store.atom_log_evidences)
    elif store.mode == "a":
        gen = as_generator(rng)
        zs = np.asarray([r.draw_atom(gen) for r in store.records])
        log_es = np.asarray([r.log_evidence for r in store.records])
    else:
        raise ValueError("estimator 'b' needs a mode 'b' (or 'a') store")
    lam = _evidence_softmax(log_es)
    vec = encoder.score_grad(x, zs, -lam)
    return GradientEstimate(vec, "b", store.run_count, _entropy(lam))


def grad_estimate_c(store: SamplerStore, encoder, x) -> GradientEstimate:
    """Latest record(s) over the all-time running evidence mean.

    The window variant averages the numerator over the retained records; the
    denominator is always the running mean over every run so far.
    """
    if store.mode != "c":
        raise ValueError("estimator 'c' needs a latest-only store (mode 'c')")
    if store.run_count == 0:
        raise EmptyStoreError(f"store for datapoint {store.datapoint_index} is empty")
    records = list(store.latest)
    log_mean = store.log_evidence_mean
    lam = np.array([np.exp(r.log_evidence - log_mean) / len(records) for r in records])
    vec = _records_grad(records, lam, encoder, x)
    return GradientEstimate(vec, "c", store.run_count, _entropy(lam / max(lam.sum(), 1e-300)))


def grad_estimate_naive(store: SamplerStore, encoder, x, rng=None,
                        m_prime: int = 1) -> GradientEstimate:
    """Evenly weighted estimate from a uniform random subset of runs,
    ignoring the evidence estimates (the sample-replenishment baseline)."""
    records = subsample_records(store, m_prime, rng, mode="uniform")
    lam = np.full(len(records), 1.0 / len(records))
    vec = _records_grad(records, lam, encoder, x)
    return GradientEstimate(vec, "naive", store.run_count, _entropy(lam))


def subsample_records(store: SamplerStore, m_star: int, rng=None,
                      mode: str = "evidence") -> list:
    """Pick run records for fixed-width minibatch work.

    mode "evidence": m_star draws with replacement, probability proportional
    to each run's evidence estimate. mode "uniform": random subset of size
    m_star without replacement (a permutation when m_star equals the run
    count), evenly weighted by the caller.
    """
    if store.mode != "a":
        raise ValueError("record subsampling needs a full-records store")
    if store.run_count == 0:
        raise EmptyStoreError(f"store for datapoint {store.datapoint_index} is empty")
    gen = as_generator(rng)
    if mode == "evidence":
        probs = _evidence_softmax(np.array([r.log_evidence for r in store.records]))
        idx = gen.choice(store.run_count, size=m_star, replace=True, p=probs)
    elif mode == "uniform":
        if m_star > store.run_count:
            raise ValueError("uniform subset size exceeds stored run count")
        idx = gen.choice(store.run_count, size=m_star, replace=False)
    else:
        raise ValueError("subsample mode must be 'evidence' or 'uniform'")
    return [store.records[i] for i in idx]


def save_store(store: SamplerStore, path) -> None:
    """Versioned binary snapshot (atoms, weights, log evidences) for resume."""
    payload = {
        "version": np.array(STORE_FORMAT_VERSION),
        "datapoint_index": np.array(store.datapoint_index),
        "mode": np.array(store.mode),
        "window": np.array(-1 if store.window is None else store.window),
        "run_count": np.array(store.run_count),
        "log_evidence_sum": np.array(store.log_evidence_sum),
    }
    if store.mode == "b":
        payload["atoms"] = np.asarray(store.atoms)
        payload["atom_log_evidences"] = np.asarray(store.atom_log_evidences)
    else:
        records = store.records if store.mode == "a" else list(store.latest)
        payload["n_records"] = np.array(len(records))
        for i, rec in enumerate(records):
            payload[f"rec{i}_atoms"] = rec.atoms
            payload[f"rec{i}_weights"] = rec.weights
            payload[f"rec{i}_log_evidence"] = np.array(rec.log_evidence)
            payload[f"rec{i}_temperatures"] = rec.temperatures
            payload[f"rec{i}_ess"] = rec.ess_trace
    np.savez(path, **payload)


def load_store(path) -> SamplerStore:
    with np.load(Path(path), allow_pickle=False) as data:
        if int(data["version"]) != STORE_FORMAT_VERSION:
            raise ValueError(f"unsupported store snapshot version {int(data['version'])}")
        window = int(data["window"])
        store = SamplerStore(
            datapoint_index=int(data["datapoint_index"]),
            mode=str(data["mode"]),
            window=None if window < 0 else window,
        )
        store.run_count = int(data["run_count"])
        store.log_evidence_sum = float(data["log_evidence_sum"])
        if store.mode == "b":
            store.atoms = list(np.asarray(data["atoms"]))
            store.atom_log_evidences = list(np.asarray(data["atom_log_evidences"]))
        else:
            records = []
            for i in range(int(data["n_records"])):
                records.append(SmcRunRecord(
                    atoms=data[f"rec{i}_atoms"],
                    weights=data[f"rec{i}_weights"],
                    log_evidence=float(data[f"rec{i}_log_evidence"]),
                    temperatures=data[f"rec{i}_temperatures"],
                    ess_trace=data[f"rec{i}_ess"],
                ))
            if store.mode == "a":
                store.records = records
            else:
                store.latest.extend(records)
    return store
