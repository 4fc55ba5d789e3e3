"""Sample batches with provenance.

A batch is a (n, D) matrix plus the metadata needed to reproduce or audit it:
the seed it came from, the noise level it conditions on (if any), and how many
denoiser calls produced it. Dumps are plain CSV, one row per sample, so other
tools can consume them without this package.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = ["SampleBatch"]


@dataclass(frozen=True)
class SampleBatch:
    """Matrix of samples plus provenance metadata.

    Attributes
    ----------
    data : numpy.ndarray, shape (n, D)
    seed : int
        Root seed of the stream that produced the batch.
    source : str
        Short label, e.g. "oracle", "generator-ema", "posterior-chain".
    sigma : float or None
        Conditioning noise level; None for unconditional draws.
    steps : int
        Number of denoiser calls per sample (0 for exact oracle draws).
    """

    data: np.ndarray
    seed: int
    source: str = "unknown"
    sigma: Optional[float] = None
    steps: int = 0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=float)
        if arr.ndim != 2:
            raise ValueError(f"data must be (n, D), got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def save_csv(self, path) -> None:
        header = [f"x{i}" for i in range(self.dim)] + ["seed", "source", "sigma", "steps"]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            sigma_repr = "" if self.sigma is None else repr(float(self.sigma))
            for row in self.data:
                writer.writerow([repr(float(v)) for v in row] + [self.seed, self.source, sigma_repr, self.steps])

    @classmethod
    def load_csv(cls, path) -> "SampleBatch":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if "seed" not in header:
                raise ValueError(f"{path} is not a sample batch dump (no 'seed' column)")
            dim = header.index("seed")
            rows, meta = [], None
            for rec in reader:
                rows.append([float(v) for v in rec[:dim]])
                meta = rec[dim:]
        if meta is None:
            raise ValueError(f"{path} contains no samples")
        seed, source, sigma_repr, steps = meta
        return cls(
            data=np.asarray(rows, dtype=float),
            seed=int(seed),
            source=source,
            sigma=None if sigma_repr == "" else float(sigma_repr),
            steps=int(steps),
        )
