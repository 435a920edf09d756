"""Byte-level corpus loading and deterministic, restartable batch streams."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ContractError

SPLITS = {"train": 0, "heldout": 1}


def builtin_corpus(name: str) -> bytes:
    """``sample``: a few KB of public-domain prose bundled with the package.
    ``pydoc``: the CPython reference topics shipped in ``pydoc_data`` (~450 KB).
    ``stdlib``: the top-level ``.py`` modules of the running interpreter's
    standard library, sorted by name (~5 MB of code).
    """
    if name == "sample":
        return resources.files("tqat.corpus").joinpath("sample.txt").read_bytes()
    if name == "pydoc":
        from pydoc_data.topics import topics

        return "\n\n".join(topics[k] for k in sorted(topics)).encode("utf-8")
    if name == "stdlib":
        import sysconfig

        files = sorted(Path(sysconfig.get_paths()["stdlib"]).glob("*.py"))
        return b"\n".join(f.read_bytes() for f in files)
    raise ValueError(f"unknown builtin corpus {name!r}")


def load_corpus(spec: str | Path) -> bytes:
    """Read a corpus from a file path or ``builtin:<name>``."""
    s = str(spec)
    if s.startswith("builtin:"):
        return builtin_corpus(s.split(":", 1)[1])
    return Path(s).read_bytes()


class BatchStream:
    """Batch ``t`` is a pure function of ``(corpus, seq_len, batch_size, seed, split, t)``.

    Window offsets come from a Philox counter-based generator whose key is
    ``(seed, split)`` and whose counter carries ``t``, so any batch can be
    regenerated without replaying earlier ones. The last ``heldout_frac`` of
    the corpus is reserved for the held-out split; windows never straddle it.
    """

    def __init__(self, corpus: bytes, seq_len: int, batch_size: int, seed: int = 0,
                 split: str = "train", heldout_frac: float = 0.1):
        if split not in SPLITS:
            raise ValueError(f"split must be one of {sorted(SPLITS)}")
        self.tokens = np.frombuffer(bytes(corpus), dtype=np.uint8)
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.seed = seed
        self.split = split
        cut = int(len(self.tokens) * (1.0 - heldout_frac))
        self.lo, self.hi = (0, cut) if split == "train" else (cut, len(self.tokens))
        if self.hi - self.lo < seq_len + 1:
            raise ContractError(
                f"{split} split has {self.hi - self.lo} bytes, need at least seq_len+1={seq_len + 1}"
            )
        self.cursor = 0

    def _rng(self, t: int):
        bitgen = np.random.Philox(key=[self.seed & (2**64 - 1), SPLITS[self.split]], counter=[0, t, 0, 0])
        return np.random.Generator(bitgen)

    def offsets(self, t: int) -> np.ndarray:
        n_start = self.hi - self.lo - self.seq_len
        return self.lo + self._rng(t).integers(0, n_start, size=self.batch_size)

    def next_batch(self, t: int | None = None):
        """Return ``(inputs, targets)`` int64 arrays of shape [B, T] for batch ``t``."""
        if t is None:
            t = self.cursor
        self.cursor = t + 1
        idx = self.offsets(t)[:, None] + np.arange(self.seq_len + 1)[None, :]
        window = self.tokens[idx].astype(np.int64)
        return window[:, :-1], window[:, 1:]

    def __iter__(self):
        while True:
            yield self.next_batch()


def next_batch(stream: BatchStream, t: int):
    return stream.next_batch(t)
