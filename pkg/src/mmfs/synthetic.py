"""Synthetic labeled data with known informative, redundant and noise features.

Feature layout (0-based): informative ids first, then noise ids, then the
exact copies requested by ``duplicates`` in the order given.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import SparseDataset, dump_svmlight
from .errors import ConfigError

MANIFEST_VERSION = "mmfs-manifest/1"


@dataclass(frozen=True)
class GenConfig:
    n_instances: int = 500
    n_informative: int = 2
    n_noise: int = 50
    # (base feature id, number of exact copies)
    duplicates: tuple = ()
    nnz_per_instance: float | None = None
    label_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "duplicates", tuple((int(f), int(c)) for f, c in self.duplicates))
        if self.n_instances < 2:
            raise ConfigError("need at least two instances")
        if self.n_informative < 1 or self.n_noise < 0:
            raise ConfigError("need >= 1 informative and >= 0 noise features")
        n_base = self.n_informative + self.n_noise
        for f, c in self.duplicates:
            if not 0 <= f < n_base:
                raise ConfigError(f"cannot duplicate feature {f}: only {n_base} base features exist")
            if c < 1:
                raise ConfigError("duplicate count must be >= 1")
        if self.nnz_per_instance is not None and self.nnz_per_instance <= 0:
            raise ConfigError("nnz_per_instance must be positive")

    @property
    def n_features(self) -> int:
        return self.n_informative + self.n_noise + sum(c for _, c in self.duplicates)


@dataclass(frozen=True, eq=False)
class Manifest:
    informative: list
    noise: list
    duplicate_groups: list
    config: dict

    def to_json(self) -> dict:
        return {"format": MANIFEST_VERSION, "index_base": 0, "informative": self.informative,
                "noise": self.noise, "duplicate_groups": self.duplicate_groups,
                "config": self.config}


def _noise_counts(cfg: GenConfig) -> int:
    """Stored noise entries per instance needed to hit the nnz target."""
    if cfg.nnz_per_instance is None:
        return cfg.n_noise
    dense = cfg.n_informative + sum(c for f, c in cfg.duplicates if f < cfg.n_informative)
    per_noise = 1 + sum(c for f, c in cfg.duplicates if f >= cfg.n_informative) / max(cfg.n_noise, 1)
    k = (cfg.nnz_per_instance - dense) / per_noise
    return int(min(max(round(k), 0), cfg.n_noise))


def generate(cfg: GenConfig) -> tuple[SparseDataset, Manifest]:
    rng = np.random.default_rng(cfg.seed)
    m, n_inf, n_noise = cfg.n_instances, cfg.n_informative, cfg.n_noise
    informative = rng.standard_normal((m, n_inf))
    z = informative.sum(axis=1) + cfg.label_noise * rng.standard_normal(m)
    y = np.where(z >= 0, 1.0, -1.0)

    rows = [np.repeat(np.arange(m), n_inf)]
    cols = [np.tile(np.arange(n_inf), m)]
    vals = [informative.ravel()]
    k = _noise_counts(cfg)
    if k == n_noise:
        rows.append(np.repeat(np.arange(m), n_noise))
        cols.append(n_inf + np.tile(np.arange(n_noise), m))
        vals.append(rng.standard_normal(m * n_noise))
    elif k > 0:
        picks = np.sort(rng.integers(0, n_noise, size=(m, k)), axis=1)
        fresh = np.ones(picks.shape, dtype=bool)
        fresh[:, 1:] = picks[:, 1:] != picks[:, :-1]
        r_idx = np.repeat(np.arange(m), k).reshape(m, k)[fresh]
        rows.append(r_idx)
        cols.append(n_inf + picks[fresh])
        vals.append(rng.standard_normal(r_idx.size))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)

    groups = []
    next_id = n_inf + n_noise
    extra_r, extra_c, extra_v = [], [], []
    for base, copies in cfg.duplicates:
        sel = cols == base
        group = [base]
        for _ in range(copies):
            extra_r.append(rows[sel])
            extra_c.append(np.full(int(sel.sum()), next_id))
            extra_v.append(vals[sel])
            group.append(next_id)
            next_id += 1
        groups.append(group)
    if extra_r:
        rows = np.concatenate([rows] + extra_r)
        cols = np.concatenate([cols] + extra_c)
        vals = np.concatenate([vals] + extra_v)

    ds = SparseDataset.from_triplets(rows, cols, vals, y, n_features=cfg.n_features)
    manifest = Manifest(list(range(n_inf)), list(range(n_inf, n_inf + n_noise)), groups,
                        dict(asdict(cfg), duplicates=[list(d) for d in cfg.duplicates]))
    return ds, manifest


def write_generated(cfg: GenConfig, data_path, manifest_path=None) -> tuple[SparseDataset, Manifest]:
    ds, manifest = generate(cfg)
    with open(data_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_svmlight(ds))
    if manifest_path is not None:
        with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(manifest.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return ds, manifest
