"""Dataset synthesis, QC, partitioning, and on-disk shard exchange.

Synthetic cohorts follow the usual additive-genetics setup: integer
genotype codes 0/1/2 drawn per-feature from Binomial(2, f) with allele
frequencies f uniform over a range, optional missingness (code -1),
mean imputation, and a linear response with noise scaled to a target
signal-to-noise ratio.

Shard files are a fixed little-endian binary layout with a trailing
SHA-256 so institutions can verify what they load; a JSON manifest
ties a partitioned dataset together.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

MISSING = -1

_SHARD_MAGIC = b"FLSH"
_SHARD_VERSION = 1
_SHARD_HEADER = struct.Struct("<4sIIQQQ")


@dataclass
class SynthConfig:
    n_subjects: int
    n_features: int
    support_size: int
    snr: float = 10.0
    maf_low: float = 0.05
    maf_high: float = 0.5
    missing_rate: float = 0.0
    maf_threshold: float = 0.0
    standardize: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.n_features < 1:
            raise ConfigError("need at least one subject and one feature")
        if not 0 <= self.support_size <= self.n_features:
            raise ConfigError(
                f"support_size {self.support_size} not in [0, {self.n_features}]"
            )
        if not 0.0 < self.maf_low <= self.maf_high <= 0.5:
            raise ConfigError("need 0 < maf_low <= maf_high <= 0.5")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError(f"missing_rate must be in [0, 1), got {self.missing_rate}")
        if self.snr <= 0.0 and self.support_size > 0:
            raise ConfigError(f"snr must be positive, got {self.snr}")

    def digest_fields(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "n_features": self.n_features,
            "support_size": self.support_size,
            "snr": self.snr,
            "maf_low": self.maf_low,
            "maf_high": self.maf_high,
            "missing_rate": self.missing_rate,
            "maf_threshold": self.maf_threshold,
            "standardize": self.standardize,
            "seed": self.seed,
        }


@dataclass
class SynthResult:
    genotypes: np.ndarray
    design: np.ndarray
    response: np.ndarray
    beta: np.ndarray
    maf: np.ndarray
    sigma: float
    kept_features: np.ndarray


def gen_synthetic(cfg: SynthConfig) -> SynthResult:
    """Draw a cohort; the response is built on the imputed, encoded design."""
    rng = np.random.default_rng(cfg.seed)
    maf = rng.uniform(cfg.maf_low, cfg.maf_high, cfg.n_features)
    codes = rng.binomial(2, maf, size=(cfg.n_subjects, cfg.n_features)).astype(np.int8)
    if cfg.missing_rate > 0.0:
        gaps = rng.random(codes.shape) < cfg.missing_rate
        codes[gaps] = MISSING

    kept = np.arange(cfg.n_features)
    if cfg.maf_threshold > 0.0:
        kept = maf_filter(codes, cfg.maf_threshold)
        if kept.size == 0:
            raise DataError(
                f"MAF threshold {cfg.maf_threshold} removes every feature"
            )
        codes = codes[:, kept]
        maf = maf[kept]

    design = impute_and_encode(codes)
    if cfg.standardize:
        design = standardize_columns(design)
    p_eff = design.shape[1]
    if cfg.support_size > p_eff:
        raise DataError(
            f"support_size {cfg.support_size} exceeds the {p_eff} features left after QC"
        )
    beta = np.zeros(p_eff)
    support = rng.choice(p_eff, size=cfg.support_size, replace=False)
    beta[support] = rng.choice([-1.0, 1.0], size=cfg.support_size)

    signal = design @ beta
    sigma = 0.0
    noise = np.zeros(cfg.n_subjects)
    if cfg.support_size > 0:
        sigma = float(np.linalg.norm(signal) / np.sqrt(cfg.n_subjects * cfg.snr))
        noise = rng.normal(0.0, sigma, cfg.n_subjects) if sigma > 0.0 else noise
    response = signal + noise
    return SynthResult(codes, design, response, beta, maf, sigma, kept)


def estimated_maf(genotypes: np.ndarray) -> np.ndarray:
    """Per-feature minor-allele frequency from observed codes (missing skipped).

    Features with no observed calls get a frequency of 0.
    """
    codes = np.asarray(genotypes)
    observed = codes != MISSING
    calls = observed.sum(axis=0)
    totals = np.where(observed, codes, 0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        freq = np.where(calls > 0, totals / (2.0 * calls), 0.0)
    return np.minimum(freq, 1.0 - freq)


def maf_filter(genotypes: np.ndarray, threshold: float) -> np.ndarray:
    """Indices of features whose minor-allele frequency is >= threshold."""
    if not 0.0 <= threshold <= 0.5:
        raise ConfigError(f"MAF threshold must be in [0, 0.5], got {threshold}")
    return np.flatnonzero(estimated_maf(genotypes) >= threshold)


def impute_and_encode(genotypes: np.ndarray) -> np.ndarray:
    """Float design matrix with missing codes replaced by the column mean of
    the observed codes (0 when a column is entirely missing)."""
    codes = np.asarray(genotypes)
    if codes.ndim != 2:
        raise ConfigError(f"genotypes must be 2-D, got shape {codes.shape}")
    design = codes.astype(np.float64)
    observed = codes != MISSING
    calls = observed.sum(axis=0)
    sums = np.where(observed, design, 0.0).sum(axis=0)
    means = np.where(calls > 0, sums / np.maximum(calls, 1), 0.0)
    gaps = ~observed
    if gaps.any():
        design[gaps] = np.broadcast_to(means, design.shape)[gaps]
    return design


def standardize_columns(design: np.ndarray) -> np.ndarray:
    """Center each column and scale it to unit sample standard deviation.

    Raw genotype codes are all non-negative, which gives the design a
    dominant shared direction and a needlessly large spectral norm;
    standardizing removes it. Constant columns come out as all zeros.
    """
    design = np.asarray(design, dtype=np.float64)
    if design.ndim != 2:
        raise ConfigError(f"design must be 2-D, got shape {design.shape}")
    centered = design - design.mean(axis=0)
    scale = centered.std(axis=0)
    return np.divide(centered, scale, out=centered, where=scale > 0.0)


# --- partitioning -------------------------------------------------------------


def partition_counts(n: int, m: int, proportions=None) -> list[int]:
    """Split n subjects into m shard sizes by largest remainder; every shard
    must come out non-empty."""
    if m < 1:
        raise ConfigError(f"need at least one shard, got {m}")
    if n < m:
        raise DataError(f"cannot spread {n} subjects over {m} shards")
    if proportions is None:
        proportions = [1.0 / m] * m
    props = np.asarray(proportions, dtype=np.float64)
    if props.shape != (m,) or np.any(props <= 0.0):
        raise ConfigError(f"need {m} positive proportions")
    props = props / props.sum()
    quotas = props * n
    counts = np.floor(quotas).astype(np.int64)
    short = n - counts.sum()
    if short > 0:
        order = np.lexsort((np.arange(m), -(quotas - counts)))
        counts[order[:short]] += 1
    if np.any(counts == 0):
        raise DataError(f"proportions {list(props)} leave an empty shard for n={n}")
    return [int(c) for c in counts]


def partition_rows(n: int, counts: list[int]) -> list[np.ndarray]:
    """Contiguous row blocks per shard, in shard order."""
    if sum(counts) != n:
        raise ConfigError(f"counts {counts} do not sum to {n}")
    bounds = np.concatenate(([0], np.cumsum(counts)))
    return [np.arange(bounds[i], bounds[i + 1]) for i in range(len(counts))]


# --- shard files ----------------------------------------------------------------


@dataclass
class ShardFile:
    shard_id: int
    n_total: int
    A: np.ndarray
    y: np.ndarray
    row_ids: np.ndarray
    sha256: str


def write_shard(path, shard_id: int, A: np.ndarray, y: np.ndarray,
                row_ids: np.ndarray, n_total: int) -> str:
    """Write one institution's block; returns the hex digest."""
    A = np.asfortranarray(A, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    row_ids = np.ascontiguousarray(row_ids, dtype=np.uint64)
    n, p = A.shape
    if y.shape != (n,) or row_ids.shape != (n,):
        raise ConfigError(
            f"inconsistent shard shapes: A {A.shape}, y {y.shape}, row_ids {row_ids.shape}"
        )
    header = _SHARD_HEADER.pack(_SHARD_MAGIC, _SHARD_VERSION, shard_id, n, p, n_total)
    body = A.tobytes(order="F") + y.tobytes() + row_ids.tobytes()
    digest = hashlib.sha256(header + body).hexdigest()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)
        fh.write(bytes.fromhex(digest))
    return digest


def read_shard(path) -> ShardFile:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _SHARD_HEADER.size + 32:
        raise DataError(f"{path}: too short to be a shard file")
    magic, version, shard_id, n, p, n_total = _SHARD_HEADER.unpack_from(blob)
    if magic != _SHARD_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != _SHARD_VERSION:
        raise DataError(f"{path}: unsupported shard version {version}")
    want = _SHARD_HEADER.size + 8 * n * p + 8 * n + 8 * n + 32
    if len(blob) != want:
        raise DataError(f"{path}: expected {want} bytes for {n}x{p}, found {len(blob)}")
    digest = hashlib.sha256(blob[:-32]).hexdigest()
    if digest != blob[-32:].hex():
        raise DataError(f"{path}: checksum mismatch; the file is corrupt")
    offset = _SHARD_HEADER.size
    A = np.frombuffer(blob, dtype="<f8", count=n * p, offset=offset).reshape((n, p), order="F")
    offset += 8 * n * p
    y = np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
    offset += 8 * n
    row_ids = np.frombuffer(blob, dtype="<u8", count=n, offset=offset)
    return ShardFile(int(shard_id), int(n_total), A.copy(order="F"), y.copy(),
                     row_ids.copy(), digest)


def write_manifest(path, n_total: int, p: int, shard_entries: list[dict],
                   meta: dict | None = None) -> None:
    doc = {
        "format": "fedlasso-manifest",
        "version": 1,
        "n_total": n_total,
        "p": p,
        "shards": shard_entries,
        "meta": meta or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "fedlasso-manifest" or doc.get("version") != 1:
        raise DataError(f"{path}: not a recognized manifest")
    return doc


def load_shards(manifest_path) -> tuple[dict, list[ShardFile]]:
    """Read a manifest plus every shard it lists, verifying checksums."""
    manifest_path = Path(manifest_path)
    doc = read_manifest(manifest_path)
    shards = []
    for entry in doc["shards"]:
        shard = read_shard(manifest_path.parent / entry["path"])
        if shard.shard_id != entry["shard_id"] or shard.sha256 != entry["sha256"]:
            raise DataError(
                f"{entry['path']}: shard does not match its manifest entry"
            )
        if shard.A.shape[1] != doc["p"] or shard.n_total != doc["n_total"]:
            raise DataError(f"{entry['path']}: dimensions disagree with the manifest")
        shards.append(shard)
    return doc, shards


# --- subject CSV import -----------------------------------------------------------


def read_subjects_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Import `subject_id,feature_0,...,feature_K,response` into arrays."""
    table = pd.read_csv(path)
    if "subject_id" not in table.columns or "response" not in table.columns:
        raise DataError(f"{path}: need subject_id and response columns")
    feature_cols = [c for c in table.columns if c.startswith("feature_")]
    if not feature_cols:
        raise DataError(f"{path}: no feature_* columns found")
    try:
        feature_cols.sort(key=lambda c: int(c.split("_", 1)[1]))
    except ValueError as exc:
        raise DataError(f"{path}: feature columns must be numbered: {exc}") from exc
    ids = table["subject_id"].to_numpy()
    A = table[feature_cols].to_numpy(dtype=np.float64)
    y = table["response"].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(y)):
        raise DataError(f"{path}: non-finite values in features or response")
    return ids, A, y


# --- packed genotype codec -----------------------------------------------------


def pack_genotypes(codes: np.ndarray) -> np.ndarray:
    """Pack genotype codes {0,1,2,missing} into 2 bits each, 4 per byte."""
    arr = np.asarray(codes)
    if arr.ndim != 2:
        raise ConfigError(f"genotypes must be 2-D, got shape {arr.shape}")
    flat = arr.astype(np.int16).ravel()
    flat = np.where(flat == MISSING, 3, flat)
    if flat.size and (flat.min() < 0 or flat.max() > 3):
        raise DataError("genotype codes must be 0, 1, 2, or missing")
    pad = (-flat.size) % 4
    if pad:
        flat = np.concatenate((flat, np.zeros(pad, dtype=np.int16)))
    quads = flat.astype(np.uint8).reshape(-1, 4)
    return quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)


def unpack_genotypes(packed: np.ndarray, n: int, p: int) -> np.ndarray:
    """Inverse of pack_genotypes; code 3 comes back as missing (-1)."""
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.size * 4 < n * p:
        raise DataError(f"packed buffer too small for {n}x{p}")
    quads = np.empty((packed.size, 4), dtype=np.int8)
    quads[:, 0] = packed & 3
    quads[:, 1] = (packed >> 2) & 3
    quads[:, 2] = (packed >> 4) & 3
    quads[:, 3] = (packed >> 6) & 3
    flat = quads.ravel()[: n * p]
    return np.where(flat == 3, MISSING, flat).astype(np.int8).reshape(n, p)
